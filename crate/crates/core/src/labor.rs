//! Mini-batch partitioning, layer-neighbor sampling and a node-wise baseline.
//!
//! LABOR draws one uniform variate `r_u` per candidate source vertex, shared
//! by every seed of the batch within a layer. Seed `v` keeps neighbor `u`
//! when `r_u <= c_v`, with `c_v = min(k, d_v) / d_v`. Seeds with overlapping
//! neighborhoods therefore pick overlapping neighbors, which shrinks the
//! number of distinct vertices per layer compared to independent sampling.

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graphbuild::AccountGraph;
use crate::rng;

#[derive(Debug, Error, PartialEq)]
pub enum SampleError {
    #[error("batch count {batches} must be in 1..={nodes}")]
    Batches { batches: usize, nodes: usize },
    #[error("seed {0} is not a node of the graph")]
    UnknownSeed(usize),
    #[error("fanout must be at least 1")]
    Fanout,
    #[error("empty seed set")]
    NoSeeds,
    #[error("edge references node {0} outside the sampled block")]
    Dangling(usize),
}

/// Random permutation of `nodes` cut into `b` parts whose sizes differ by at most one.
pub fn partition_batches<R: Rng + ?Sized>(nodes: &[usize], b: usize, rng: &mut R) -> Result<Vec<Vec<usize>>, SampleError> {
    if b == 0 || b > nodes.len() {
        return Err(SampleError::Batches { batches: b, nodes: nodes.len() });
    }
    let mut perm = nodes.to_vec();
    perm.shuffle(rng);
    let (q, r) = (perm.len() / b, perm.len() % b);
    let mut out = Vec::with_capacity(b);
    let mut start = 0;
    for i in 0..b {
        let len = q + usize::from(i < r);
        out.push(perm[start..start + len].to_vec());
        start += len;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NeighborMode {
    /// Sources of edges pointing at the seed.
    #[default]
    In,
    Out,
    Both,
}

/// Weighted neighbor lists used for sampling and aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighborhoods {
    offsets: Vec<usize>,
    nbrs: Vec<usize>,
    weight: Vec<f64>,
    total: Vec<f64>,
}

impl Neighborhoods {
    pub fn from_lists(lists: Vec<Vec<(usize, f64)>>) -> Self {
        let mut offsets = vec![0];
        let mut nbrs = Vec::new();
        let mut weight = Vec::new();
        let mut total = Vec::with_capacity(lists.len());
        for mut l in lists {
            l.sort_by_key(|e| e.0);
            total.push(l.iter().map(|e| e.1).sum());
            for (u, w) in l {
                nbrs.push(u);
                weight.push(w);
            }
            offsets.push(nbrs.len());
        }
        Self { offsets, nbrs, weight, total }
    }

    pub fn from_graph(g: &AccountGraph, mode: NeighborMode) -> Self {
        let lists = (0..g.n_nodes())
            .map(|v| {
                let mut m: Vec<(usize, f64)> = Vec::new();
                if mode != NeighborMode::Out {
                    m.extend(g.inc.range(v).map(|p| (g.inc.targets[p], g.inc.weight[p])));
                }
                if mode != NeighborMode::In {
                    m.extend(g.out.range(v).map(|p| (g.out.targets[p], g.out.weight[p])));
                }
                // reciprocal edges merge into one neighbor with summed weight
                m.sort_by_key(|e| e.0);
                let mut merged: Vec<(usize, f64)> = Vec::with_capacity(m.len());
                for (u, w) in m {
                    match merged.last_mut() {
                        Some(last) if last.0 == u => last.1 += w,
                        _ => merged.push((u, w)),
                    }
                }
                merged
            })
            .collect();
        Self::from_lists(lists)
    }

    pub fn n_nodes(&self) -> usize {
        self.total.len()
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.nbrs[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn weights(&self, v: usize) -> &[f64] {
        &self.weight[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    /// Sum of neighbor weights over the full neighborhood.
    pub fn total_weight(&self, v: usize) -> f64 {
        self.total[v]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampledEdge {
    pub src: usize,
    pub dst: usize,
    /// Edge weight `w_uv`.
    pub weight: f64,
    /// Inverse inclusion probability.
    pub importance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Labor,
    Ns,
}

impl std::str::FromStr for SamplerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "labor" => Ok(Self::Labor),
            "ns" => Ok(Self::Ns),
            _ => Err(format!("unknown sampler {s:?}; expected labor or ns")),
        }
    }
}

impl SamplerKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Labor => "labor",
            Self::Ns => "ns",
        }
    }
}

fn check_seeds(nb: &Neighborhoods, seeds: &[usize], k: usize) -> Result<(), SampleError> {
    if k == 0 {
        return Err(SampleError::Fanout);
    }
    if seeds.is_empty() {
        return Err(SampleError::NoSeeds);
    }
    match seeds.iter().find(|&&s| s >= nb.n_nodes()) {
        Some(&s) => Err(SampleError::UnknownSeed(s)),
        None => Ok(()),
    }
}

/// Shared per-vertex uniform variate in `[0, 1)` derived from a layer key.
pub fn shared_uniform(key: u64, u: usize) -> f64 {
    let mut z = key ^ (u as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// `c_v` under uniform `π`.
pub fn labor_threshold(degree: usize, k: usize) -> f64 {
    if degree == 0 {
        return 0.0;
    }
    k.min(degree) as f64 / degree as f64
}

/// LABOR-0 selection for one layer. `key` fixes the shared `r` vector.
pub fn labor_sample(nb: &Neighborhoods, seeds: &[usize], k: usize, key: u64) -> Result<Vec<SampledEdge>, SampleError> {
    check_seeds(nb, seeds, k)?;
    let mut edges = Vec::new();
    for &v in seeds {
        let c = labor_threshold(nb.degree(v), k);
        let importance = 1.0 / c.min(1.0);
        for (&u, &w) in nb.neighbors(v).iter().zip(nb.weights(v)) {
            if shared_uniform(key, u) <= c {
                edges.push(SampledEdge { src: u, dst: v, weight: w, importance });
            }
        }
    }
    Ok(edges)
}

/// Independent uniform sampling of `min(k, d_v)` neighbors per seed.
pub fn ns_sample<R: Rng + ?Sized>(nb: &Neighborhoods, seeds: &[usize], k: usize, rng: &mut R) -> Result<Vec<SampledEdge>, SampleError> {
    check_seeds(nb, seeds, k)?;
    let mut edges = Vec::new();
    for &v in seeds {
        let d = nb.degree(v);
        if d == 0 {
            continue;
        }
        let take = k.min(d);
        let importance = d as f64 / take as f64;
        let (ns, ws) = (nb.neighbors(v), nb.weights(v));
        let mut picks = sample(rng, d, take).into_vec();
        picks.sort_unstable();
        for i in picks {
            edges.push(SampledEdge { src: ns[i], dst: v, weight: ws[i], importance });
        }
    }
    Ok(edges)
}

/// Multi-hop sample around a batch with layered node order: batch seeds
/// first, then the vertices first reached at each further hop.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledBlock {
    /// Global ids in local order.
    pub nodes: Vec<usize>,
    /// `layer_sizes[h]` = number of nodes within `h` hops; a prefix of `nodes`.
    pub layer_sizes: Vec<usize>,
    /// Edges of hop `h`: destinations within `layer_sizes[h]`, sources within `layer_sizes[h + 1]`.
    pub hops: Vec<Vec<SampledEdge>>,
}

impl SampledBlock {
    pub fn n_hops(&self) -> usize {
        self.hops.len()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub fanouts: Vec<usize>,
    pub mode: NeighborMode,
    pub seed: u64,
    /// Redraw the shared `r` vector per batch and layer; otherwise once per epoch and layer.
    pub redraw_per_batch: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { kind: SamplerKind::Labor, fanouts: vec![10, 10], mode: NeighborMode::In, seed: 0, redraw_per_batch: true }
    }
}

/// Samples `fanouts.len()` hops outward from `seeds`. Hop `h` samples
/// neighbors for every node reached within `h` hops.
pub fn sample_block(
    nb: &Neighborhoods,
    seeds: &[usize],
    cfg: &SamplerConfig,
    epoch: u64,
    batch: u64,
) -> Result<SampledBlock, SampleError> {
    let mut nodes: Vec<usize> = Vec::with_capacity(seeds.len());
    let mut local: HashMap<usize, usize> = HashMap::with_capacity(seeds.len() * 4);
    for &s in seeds {
        if local.insert(s, nodes.len()).is_none() {
            nodes.push(s);
        }
    }
    let mut layer_sizes = vec![nodes.len()];
    let mut hops = Vec::with_capacity(cfg.fanouts.len());
    let batch_coord = if cfg.redraw_per_batch { batch } else { u64::MAX };
    for (h, &k) in cfg.fanouts.iter().enumerate() {
        let frontier = &nodes[..*layer_sizes.last().expect("non-empty")];
        let mut r = rng::substream(cfg.seed, cfg.kind.name(), &[epoch, batch_coord, h as u64]);
        let edges = match cfg.kind {
            SamplerKind::Labor => labor_sample(nb, frontier, k, r.next_u64())?,
            SamplerKind::Ns => ns_sample(nb, frontier, k, &mut r)?,
        };
        for e in &edges {
            if let std::collections::hash_map::Entry::Vacant(slot) = local.entry(e.src) {
                slot.insert(nodes.len());
                nodes.push(e.src);
            }
        }
        layer_sizes.push(nodes.len());
        hops.push(edges);
    }
    Ok(SampledBlock { nodes, layer_sizes, hops })
}

/// One hop of relabeled adjacency, rows are destinations.
#[derive(Debug, Clone, PartialEq)]
pub struct HopCsr {
    pub offsets: Vec<usize>,
    pub src: Vec<usize>,
    /// `w_uv` times the importance weight (or `w_uv` alone when not debiased).
    pub coef: Vec<f64>,
    /// Normalizer per destination: `1 + Σ w_uv` over the neighborhood.
    pub dst_norm: Vec<f64>,
}

impl HopCsr {
    pub fn n_dst(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn n_edges(&self) -> usize {
        self.src.len()
    }

    /// `(dst, src)` local index pairs with coefficients, in row order.
    pub fn triples(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n_dst()).flat_map(move |d| (self.offsets[d]..self.offsets[d + 1]).map(move |p| (d, self.src[p], self.coef[p])))
    }
}

/// Compact per-hop adjacency of a sampled block.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchAdjacency {
    pub nodes: Vec<usize>,
    pub layer_sizes: Vec<usize>,
    pub hops: Vec<HopCsr>,
}

impl BatchAdjacency {
    pub fn global(&self, local: usize) -> usize {
        self.nodes[local]
    }
}

/// Relabels a block to local ids and attaches aggregation coefficients.
///
/// With `debias`, the normalizer is the full-neighborhood weight so that the
/// sampled aggregate is an unbiased estimate of the exact weighted mean.
pub fn build_batch_adjacency(block: &SampledBlock, nb: &Neighborhoods, debias: bool) -> Result<BatchAdjacency, SampleError> {
    let local: HashMap<usize, usize> = block.nodes.iter().enumerate().map(|(i, &g)| (g, i)).collect();
    let mut hops = Vec::with_capacity(block.hops.len());
    for (h, edges) in block.hops.iter().enumerate() {
        let n_dst = block.layer_sizes[h];
        let n_src = block.layer_sizes[h + 1];
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_dst];
        for e in edges {
            let d = *local.get(&e.dst).filter(|&&d| d < n_dst).ok_or(SampleError::Dangling(e.dst))?;
            let s = *local.get(&e.src).filter(|&&s| s < n_src).ok_or(SampleError::Dangling(e.src))?;
            let coef = if debias { e.weight * e.importance } else { e.weight };
            rows[d].push((s, coef));
        }
        let mut csr = HopCsr { offsets: vec![0], src: Vec::new(), coef: Vec::new(), dst_norm: Vec::with_capacity(n_dst) };
        for (d, row) in rows.into_iter().enumerate() {
            let norm = if debias {
                1.0 + nb.total_weight(block.nodes[d])
            } else {
                1.0 + row.iter().map(|r| r.1).sum::<f64>()
            };
            csr.dst_norm.push(norm);
            for (s, c) in row {
                csr.src.push(s);
                csr.coef.push(c);
            }
            csr.offsets.push(csr.src.len());
        }
        hops.push(csr);
    }
    Ok(BatchAdjacency { nodes: block.nodes.clone(), layer_sizes: block.layer_sizes.clone(), hops })
}

/// Mean per-layer counts for one sampler, plus throughput.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerStats {
    pub sampler: SamplerKind,
    /// Unique vertices within `h` hops, `h = 0..=hops`.
    pub vertices: Vec<f64>,
    /// Sampled edges per hop.
    pub edges: Vec<f64>,
    pub iterations_per_sec: f64,
    pub iterations: usize,
}

impl SamplerStats {
    pub fn csv_header(hops: usize) -> String {
        let mut cols = vec!["sampler".to_string()];
        cols.extend((0..=hops).map(|h| format!("V{h}")));
        cols.extend((0..hops).map(|h| format!("E{h}")));
        cols.push("its".into());
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![self.sampler.name().to_string()];
        cols.extend(self.vertices.iter().map(|v| format!("{v:.2}")));
        cols.extend(self.edges.iter().map(|v| format!("{v:.2}")));
        cols.push(format!("{:.2}", self.iterations_per_sec));
        cols.join(",")
    }
}

/// Averages block sizes over `trials` passes of every batch. `clock` returns
/// seconds and is only used for throughput.
pub fn sampling_stats_with_clock(
    nb: &Neighborhoods,
    cfg: &SamplerConfig,
    batches: &[Vec<usize>],
    trials: usize,
    clock: &dyn Fn() -> f64,
) -> Result<SamplerStats, SampleError> {
    let trials = trials.max(1);
    let hops = cfg.fanouts.len();
    let mut vertices = vec![0.0; hops + 1];
    let mut edges = vec![0.0; hops];
    let start = clock();
    let mut iterations = 0usize;
    for t in 0..trials {
        for (b, seeds) in batches.iter().enumerate() {
            let block = sample_block(nb, seeds, cfg, t as u64, b as u64)?;
            for (acc, &v) in vertices.iter_mut().zip(&block.layer_sizes) {
                *acc += v as f64;
            }
            for (acc, e) in edges.iter_mut().zip(&block.hops) {
                *acc += e.len() as f64;
            }
            iterations += 1;
        }
    }
    let elapsed = clock() - start;
    let denom = iterations.max(1) as f64;
    vertices.iter_mut().for_each(|v| *v /= denom);
    edges.iter_mut().for_each(|v| *v /= denom);
    Ok(SamplerStats {
        sampler: cfg.kind,
        vertices,
        edges,
        iterations_per_sec: if elapsed > 0.0 { iterations as f64 / elapsed } else { 0.0 },
        iterations,
    })
}

#[cfg(not(target_arch = "wasm32"))]
pub fn sampling_stats(nb: &Neighborhoods, cfg: &SamplerConfig, batches: &[Vec<usize>], trials: usize) -> Result<SamplerStats, SampleError> {
    let t0 = std::time::Instant::now();
    sampling_stats_with_clock(nb, cfg, batches, trials, &|| t0.elapsed().as_secs_f64())
}

/// Graph with dense, overlapping neighborhoods inside each community: every
/// node has `degree` in-neighbors drawn from its own community.
pub fn clustered_graph(n: usize, communities: usize, degree: usize, seed: u64) -> Neighborhoods {
    let mut r = rng::stream(seed, "clustered-graph");
    let size = n.div_ceil(communities.max(1));
    let lists = (0..n)
        .map(|v| {
            let c = v / size;
            let lo = c * size;
            let hi = ((c + 1) * size).min(n);
            let members: Vec<usize> = (lo..hi).filter(|&u| u != v).collect();
            let k = degree.min(members.len());
            let mut picks: Vec<(usize, f64)> = sample(&mut r, members.len(), k).into_iter().map(|i| (members[i], 1.0)).collect();
            picks.sort_by_key(|p| p.0);
            picks
        })
        .collect();
    Neighborhoods::from_lists(lists)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn star(d: usize) -> Neighborhoods {
        let mut lists = vec![(1..=d).map(|u| (u, 1.0)).collect::<Vec<_>>()];
        lists.extend((0..d).map(|_| Vec::new()));
        Neighborhoods::from_lists(lists)
    }

    #[test]
    fn partition_sizes() {
        let v: Vec<usize> = (0..10).collect();
        let p = partition_batches(&v, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut sizes: Vec<usize> = p.iter().map(Vec::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![3, 3, 4]);
        let one = partition_batches(&v, 1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut all = one[0].clone();
        all.sort_unstable();
        assert_eq!(all, v);
        let again = partition_batches(&v, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(p, again);
        assert!(partition_batches(&v, 11, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn low_degree_keeps_everything() {
        let nb = star(3);
        for key in 0..50 {
            let e = labor_sample(&nb, &[0], 10, key).unwrap();
            assert_eq!(e.len(), 3);
            assert!(e.iter().all(|x| x.importance == 1.0));
        }
        let e = ns_sample(&nb, &[0], 10, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(e.len(), 3);
    }

    #[test]
    fn labor_mean_sample_size() {
        let nb = star(20);
        let trials = 100_000u64;
        let total: usize = (0..trials).map(|t| labor_sample(&nb, &[0], 10, t.wrapping_mul(0x2545F4914F6CDD1D)).unwrap().len()).sum();
        let mean = total as f64 / trials as f64;
        assert!((mean - 10.0).abs() <= 0.1, "mean {mean}");
    }

    #[test]
    fn ns_exact_count_and_independence() {
        let nb = Neighborhoods::from_lists(
            [(0..20).map(|u| (u + 2, 1.0)).collect::<Vec<_>>(), (0..20).map(|u| (u + 2, 1.0)).collect()]
                .into_iter()
                .chain((0..20).map(|_| Vec::new()))
                .collect(),
        );
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let mut differ = 0;
        for _ in 0..1000 {
            let e = ns_sample(&nb, &[0, 1], 10, &mut r).unwrap();
            let a: Vec<usize> = e.iter().filter(|x| x.dst == 0).map(|x| x.src).collect();
            let b: Vec<usize> = e.iter().filter(|x| x.dst == 1).map(|x| x.src).collect();
            assert_eq!((a.len(), b.len()), (10, 10));
            differ += usize::from(a != b);
        }
        assert!(differ > 0);
        for key in 0..100 {
            let e = labor_sample(&nb, &[0, 1], 10, key).unwrap();
            let a: Vec<usize> = e.iter().filter(|x| x.dst == 0).map(|x| x.src).collect();
            let b: Vec<usize> = e.iter().filter(|x| x.dst == 1).map(|x| x.src).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn errors() {
        let nb = star(2);
        assert_eq!(labor_sample(&nb, &[7], 1, 0), Err(SampleError::UnknownSeed(7)));
        assert_eq!(labor_sample(&nb, &[0], 0, 0), Err(SampleError::Fanout));
        assert_eq!(labor_sample(&nb, &[], 1, 0), Err(SampleError::NoSeeds));
    }

    #[test]
    fn path_two_hop_counts() {
        // A -> B -> C with in-neighbor sampling from C
        let nb = Neighborhoods::from_lists(vec![vec![], vec![(0, 1.0)], vec![(1, 1.0)]]);
        for kind in [SamplerKind::Labor, SamplerKind::Ns] {
            let cfg = SamplerConfig { kind, fanouts: vec![10, 10], ..Default::default() };
            let block = sample_block(&nb, &[2], &cfg, 0, 0).unwrap();
            assert_eq!(block.layer_sizes, vec![1, 2, 3]);
            assert_eq!(block.nodes, vec![2, 1, 0]);
            assert_eq!((block.hops[0].len(), block.hops[1].len()), (1, 2));
            let adj = build_batch_adjacency(&block, &nb, true).unwrap();
            let restored: Vec<usize> = (0..adj.nodes.len()).map(|i| adj.global(i)).collect();
            assert_eq!(restored, block.nodes);
            assert_eq!(adj.hops[0].triples().collect::<Vec<_>>(), vec![(0, 1, 1.0)]);
        }
    }

    #[test]
    fn dangling_edges_rejected() {
        let nb = star(2);
        let block = SampledBlock {
            nodes: vec![0],
            layer_sizes: vec![1, 1],
            hops: vec![vec![SampledEdge { src: 5, dst: 0, weight: 1.0, importance: 1.0 }]],
        };
        assert_eq!(build_batch_adjacency(&block, &nb, true), Err(SampleError::Dangling(5)));
    }

    #[test]
    fn edgeless_stats_and_determinism() {
        let nb = Neighborhoods::from_lists(vec![Vec::new(); 5]);
        let cfg = SamplerConfig { fanouts: vec![1], ..Default::default() };
        let s = sampling_stats(&nb, &cfg, &[vec![0, 1], vec![2, 3, 4]], 2).unwrap();
        assert_eq!(s.vertices, vec![2.5, 2.5]);
        assert_eq!(s.edges, vec![0.0]);

        let g = clustered_graph(200, 4, 20, 1);
        let cfg = SamplerConfig::default();
        let a = sampling_stats(&g, &cfg, &[(0..50).collect()], 3).unwrap();
        let b = sampling_stats(&g, &cfg, &[(0..50).collect()], 3).unwrap();
        assert_eq!((a.vertices, a.edges), (b.vertices, b.edges));
    }

    proptest! {
        #[test]
        fn raising_fanout_never_drops_neighbors(d in 1usize..40, k in 1usize..40, extra in 0usize..10, key in any::<u64>()) {
            let nb = star(d);
            let small: Vec<usize> = labor_sample(&nb, &[0], k, key).unwrap().iter().map(|e| e.src).collect();
            let big: Vec<usize> = labor_sample(&nb, &[0], k + extra, key).unwrap().iter().map(|e| e.src).collect();
            prop_assert!(small.iter().all(|u| big.contains(u)));
        }

        #[test]
        fn partition_covers_exactly(n in 1usize..200, b in 1usize..50, seed in any::<u64>()) {
            let b = b.min(n);
            let v: Vec<usize> = (0..n).collect();
            let p = partition_batches(&v, b, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let mut all: Vec<usize> = p.concat();
            all.sort_unstable();
            prop_assert_eq!(all, v);
            let sizes: Vec<usize> = p.iter().map(Vec::len).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }

        #[test]
        fn block_layers_are_prefixes(seed in any::<u64>(), kind in prop_oneof![Just(SamplerKind::Labor), Just(SamplerKind::Ns)]) {
            let nb = clustered_graph(120, 3, 15, seed);
            let cfg = SamplerConfig { kind, fanouts: vec![5, 5, 5], seed, ..Default::default() };
            let block = sample_block(&nb, &[0, 50, 100, 7], &cfg, 1, 2).unwrap();
            prop_assert!(block.layer_sizes.windows(2).all(|w| w[0] <= w[1]));
            for (h, edges) in block.hops.iter().enumerate() {
                let dst: Vec<usize> = block.nodes[..block.layer_sizes[h]].to_vec();
                let src: Vec<usize> = block.nodes[..block.layer_sizes[h + 1]].to_vec();
                for e in edges {
                    prop_assert!(dst.contains(&e.dst) && src.contains(&e.src));
                    prop_assert!(e.importance >= 1.0);
                }
            }
        }
    }
}
