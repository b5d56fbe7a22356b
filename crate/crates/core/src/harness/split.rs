//! Train/validation/test partitions: stratified random and isolated components.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::graphbuild::AccountGraph;
use crate::rng;
use crate::txcorpus::Address;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Train,
    Val,
    Test,
}

impl Part {
    pub const ALL: [Part; 3] = [Part::Train, Part::Val, Part::Test];

    pub fn name(self) -> &'static str {
        match self {
            Part::Train => "train",
            Part::Val => "val",
            Part::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Split {
    /// Labeled accounts per part, sorted.
    pub parts: [Vec<Address>; 3],
    /// Part of every graph node (component split only; `None` for dropped nodes).
    pub node_parts: Option<Vec<Option<Part>>>,
}

impl Split {
    pub fn part(&self, p: Part) -> &[Address] {
        &self.parts[p as usize]
    }

    pub fn sizes(&self) -> [usize; 3] {
        [self.parts[0].len(), self.parts[1].len(), self.parts[2].len()]
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "address,split")?;
        let mut rows: Vec<(&Address, Part)> = Part::ALL.iter().flat_map(|&p| self.part(p).iter().map(move |a| (a, p))).collect();
        rows.sort();
        for (a, p) in rows {
            writeln!(w, "{a},{}", p.name())?;
        }
        Ok(())
    }
}

/// Reads `address,split` rows written by [`Split::write_csv`].
pub fn read_split_csv<R: BufRead>(r: R) -> Result<Split, HarnessError> {
    let mut split = Split::default();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with("address")) {
            continue;
        }
        let bad = || HarnessError::Format(format!("split line {}: expected address,train|val|test", i + 1));
        let (a, p) = line.split_once(',').ok_or_else(bad)?;
        let a = Address::parse(a.trim()).ok_or_else(bad)?;
        let p = Part::ALL.into_iter().find(|q| q.name() == p.trim()).ok_or_else(bad)?;
        split.parts[p as usize].push(a);
    }
    for part in &mut split.parts {
        part.sort();
    }
    Ok(split)
}

fn check_ratios(ratios: [f64; 3]) -> Result<(), HarnessError> {
    if ratios.iter().any(|&r| !(r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(HarnessError::Split(format!("ratios {ratios:?} must be non-negative and sum to 1")));
    }
    Ok(())
}

/// Integer sizes summing to `n` with each within 1 of `n * ratio` (largest remainder).
pub fn apportion(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut sizes = [0usize; 3];
    for k in 0..3 {
        sizes[k] = exact[k].floor() as usize;
    }
    let mut rest: Vec<usize> = (0..3).collect();
    rest.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut left = n - sizes.iter().sum::<usize>();
    for k in rest {
        if left == 0 {
            break;
        }
        sizes[k] += 1;
        left -= 1;
    }
    sizes
}

/// Shuffled split stratified by label. Total sizes and per-part fraud
/// counts are each within one account of their exact shares.
pub fn split_random(labels: &BTreeMap<Address, u8>, ratios: [f64; 3], seed: u64) -> Result<Split, HarnessError> {
    check_ratios(ratios)?;
    let mut by_class: [Vec<Address>; 2] = [Vec::new(), Vec::new()];
    for (a, &l) in labels {
        by_class.get_mut(l as usize).ok_or(HarnessError::Label(l))?.push(a.clone());
    }
    for (c, members) in by_class.iter().enumerate() {
        if members.len() < 3 {
            return Err(HarnessError::Split(format!("class {c} has {} members; at least 3 are needed", members.len())));
        }
    }
    let total = apportion(labels.len(), ratios);
    let fraud = apportion(by_class[1].len(), ratios);
    let mut r = rng::stream(seed, "split-random");
    let mut parts: [Vec<Address>; 3] = Default::default();
    for (c, members) in by_class.iter_mut().enumerate() {
        members.shuffle(&mut r);
        let mut at = 0;
        for k in 0..3 {
            let take = if c == 1 { fraud[k] } else { total[k] - fraud[k] };
            parts[k].extend_from_slice(&members[at..at + take]);
            at += take;
        }
    }
    parts.iter_mut().for_each(|p| p.sort());
    Ok(Split { parts, node_parts: None })
}

/// Connected components of the undirected graph, each sorted, in order of
/// their smallest node.
pub fn components(adj: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let mut seen = vec![false; adj.len()];
    let mut out = Vec::new();
    for s in 0..adj.len() {
        if seen[s] {
            continue;
        }
        seen[s] = true;
        let mut comp = vec![s];
        let mut i = 0;
        while i < comp.len() {
            for &v in &adj[comp[i]] {
                if !seen[v] {
                    seen[v] = true;
                    comp.push(v);
                }
            }
            i += 1;
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Greedy assignment of `n` items to the part with the largest remaining
/// deficit `ratio * n - assigned` (ties to the earlier part).
pub fn greedy_counts(n: usize, ratios: [f64; 3]) -> Vec<Part> {
    let mut assigned = [0usize; 3];
    (0..n)
        .map(|_| {
            let k = (0..3)
                .max_by(|&a, &b| {
                    let da = ratios[a] * n as f64 - assigned[a] as f64;
                    let db = ratios[b] * n as f64 - assigned[b] as f64;
                    da.total_cmp(&db).then(b.cmp(&a))
                })
                .expect("three parts");
            assigned[k] += 1;
            Part::ALL[k]
        })
        .collect()
}

/// Split along connected components so that no edge joins two parts.
///
/// With `downsample_benign`, benign accounts are first sampled down to twice
/// the fraud count and only labeled, kept accounts remain in the graph.
pub fn split_components(
    graph: &AccountGraph,
    labels: &BTreeMap<Address, u8>,
    ratios: [f64; 3],
    seed: u64,
    downsample_benign: bool,
) -> Result<Split, HarnessError> {
    check_ratios(ratios)?;
    let mut r = rng::stream(seed, "split-components");
    let n = graph.n_nodes();
    let mut keep = vec![true; n];
    if downsample_benign {
        let mut benign: Vec<usize> = Vec::new();
        let mut fraud = 0;
        for (u, a) in graph.nodes().iter().enumerate() {
            match labels.get(a) {
                Some(0) => benign.push(u),
                Some(1) => fraud += 1,
                Some(&l) => return Err(HarnessError::Label(l)),
                None => keep[u] = false,
            }
        }
        benign.shuffle(&mut r);
        for &u in benign.iter().skip(2 * fraud) {
            keep[u] = false;
        }
    }
    let adj: Vec<Vec<usize>> = graph
        .undirected()
        .into_iter()
        .enumerate()
        .map(|(u, nb)| if keep[u] { nb.into_iter().filter(|&v| keep[v]).collect() } else { Vec::new() })
        .collect();
    let mut comps: Vec<Vec<usize>> = components(&adj).into_iter().filter(|c| keep[c[0]]).collect();
    let kept = keep.iter().filter(|&&k| k).count();
    if let Some(big) = comps.iter().map(Vec::len).max() {
        if big as f64 > 0.7 * kept as f64 {
            return Err(HarnessError::Split(format!(
                "largest component holds {big} of {kept} nodes (> 70%); use the random split instead"
            )));
        }
    }
    comps.shuffle(&mut r);
    let mut node_parts = vec![None; n];
    let mut parts: [Vec<Address>; 3] = Default::default();
    for (comp, part) in comps.iter().zip(greedy_counts(comps.len(), ratios)) {
        for &u in comp {
            node_parts[u] = Some(part);
            let a = &graph.nodes()[u];
            if labels.contains_key(a) {
                parts[part as usize].push(a.clone());
            }
        }
    }
    parts.iter_mut().for_each(|p| p.sort());
    Ok(Split { parts, node_parts: Some(node_parts) })
}

/// Directed edges whose endpoints sit in different parts, counting every
/// node with an assignment.
pub fn cross_split_edges(graph: &AccountGraph, node_parts: &[Option<Part>]) -> usize {
    let adj = graph.undirected();
    let mut n = 0;
    for (u, nb) in adj.iter().enumerate() {
        for &v in nb {
            if u < v {
                if let (Some(a), Some(b)) = (node_parts[u], node_parts[v]) {
                    n += usize::from(a != b);
                }
            }
        }
    }
    n
}

/// Node-level assignment implied by a labeled split, for leakage counting.
pub fn node_parts_of(graph: &AccountGraph, split: &Split) -> Vec<Option<Part>> {
    let mut by_addr: BTreeMap<&Address, Part> = BTreeMap::new();
    for p in Part::ALL {
        for a in split.part(p) {
            by_addr.insert(a, p);
        }
    }
    graph.nodes().iter().map(|a| by_addr.get(a).copied()).collect()
}

/// Sorted set of accounts appearing in more than one part.
pub fn overlap(split: &Split) -> BTreeSet<Address> {
    let mut seen = BTreeSet::new();
    let mut dup = BTreeSet::new();
    for p in Part::ALL {
        for a in split.part(p) {
            if !seen.insert(a.clone()) {
                dup.insert(a.clone());
            }
        }
    }
    dup
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphbuild::build_graph;
    use crate::txcorpus::{Direction, TransactionRecord};

    fn labels(n: usize, fraud_every: usize) -> BTreeMap<Address, u8> {
        (0..n).map(|i| (Address::from_index(i as u64 + 1), u8::from(i % fraud_every == 0))).collect()
    }

    #[test]
    fn split_csv_round_trips() {
        let s = split_random(&labels(40, 4), [0.7, 0.1, 0.2], 3).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let back = read_split_csv(&buf[..]).unwrap();
        assert_eq!(back.parts, s.parts);
        assert!(read_split_csv(&b"address,split\n0x01,holdout\n"[..]).is_err());
    }

    #[test]
    fn random_split_sizes_and_strata() {
        let l = labels(100, 10);
        let s = split_random(&l, [0.7, 0.1, 0.2], 3).unwrap();
        assert_eq!(s.sizes(), [70, 10, 20]);
        assert!(overlap(&s).is_empty());
        for (k, p) in Part::ALL.iter().enumerate() {
            let f = s.part(*p).iter().filter(|a| l[*a] == 1).count() as f64;
            assert!((f - 10.0 * [0.7, 0.1, 0.2][k]).abs() <= 1.0);
        }
        assert_eq!(s, split_random(&l, [0.7, 0.1, 0.2], 3).unwrap());
        assert_ne!(s, split_random(&l, [0.7, 0.1, 0.2], 4).unwrap());
        assert!(split_random(&labels(20, 10), [0.7, 0.1, 0.2], 0).is_err());
        assert!(split_random(&l, [0.7, 0.1, 0.1], 0).is_err());
    }

    #[test]
    fn apportion_stays_within_one() {
        for n in 0..300 {
            let s = apportion(n, [0.7, 0.1, 0.2]);
            assert_eq!(s.iter().sum::<usize>(), n);
            for k in 0..3 {
                assert!((s[k] as f64 - n as f64 * [0.7, 0.1, 0.2][k]).abs() < 1.0);
            }
        }
    }

    #[test]
    fn greedy_singletons() {
        let c = greedy_counts(10, [0.7, 0.1, 0.2]);
        let count = |p| c.iter().filter(|&&x| x == p).count();
        assert_eq!((count(Part::Train), count(Part::Val), count(Part::Test)), (7, 1, 2));
    }

    fn tx(a: u64, b: u64, t: i64) -> TransactionRecord {
        TransactionRecord {
            sender: Address::from_index(a),
            receiver: Address::from_index(b),
            value: 1.0,
            direction: Direction::Out,
            timestamp: t,
        }
    }

    #[test]
    fn component_split_has_no_leakage() {
        // 100 components of varying size: paths of length 1..=3
        let mut txs = Vec::new();
        let mut next = 1u64;
        for c in 0..100u64 {
            let len = c % 3 + 1;
            for k in 0..len {
                txs.push(tx(next + k, next + k + 1, (c * 10 + k) as i64));
            }
            next += len + 1;
        }
        let g = build_graph(&txs).unwrap();
        let l: BTreeMap<Address, u8> = g.nodes().iter().enumerate().map(|(i, a)| (a.clone(), u8::from(i % 5 == 0))).collect();
        let s = split_components(&g, &l, [0.7, 0.1, 0.2], 1, false).unwrap();
        let np = s.node_parts.as_ref().unwrap();
        assert_eq!(cross_split_edges(&g, np), 0);
        let comps = components(&g.undirected());
        let mut counts = [0usize; 3];
        for c in &comps {
            counts[np[c[0]].unwrap() as usize] += 1;
        }
        for k in 0..3 {
            assert!((counts[k] as f64 - 100.0 * [0.7, 0.1, 0.2][k]).abs() <= 1.0);
        }
        // the random split of the same graph leaks
        let rs = split_random(&l, [0.7, 0.1, 0.2], 1).unwrap();
        assert!(cross_split_edges(&g, &node_parts_of(&g, &rs)) > 0);
        let d = split_components(&g, &l, [0.7, 0.1, 0.2], 1, true).unwrap();
        let benign = d.parts.iter().flatten().filter(|a| l[*a] == 0).count();
        let fraud = d.parts.iter().flatten().filter(|a| l[*a] == 1).count();
        assert_eq!(benign, 2 * fraud);
        assert_eq!(cross_split_edges(&g, d.node_parts.as_ref().unwrap()), 0);
    }

    #[test]
    fn giant_component_is_refused() {
        let txs: Vec<_> = (1..50).map(|i| tx(i, i + 1, i as i64)).collect();
        let g = build_graph(&txs).unwrap();
        let l: BTreeMap<Address, u8> = g.nodes().iter().map(|a| (a.clone(), 0)).collect();
        assert!(matches!(split_components(&g, &l, [0.7, 0.1, 0.2], 0, false), Err(HarnessError::Split(_))));
    }
}
