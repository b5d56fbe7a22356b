//! Weighted account interaction graph and the 22 expert node features.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numcore::Tensor;
use crate::rng;
use crate::txcorpus::{Address, Direction, TransactionRecord};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("no transactions to build a graph from")]
    Empty,
    #[error("unknown account {0}")]
    UnknownAccount(String),
    #[error("power iteration did not converge after {0} iterations")]
    NoConvergence(usize),
    #[error("training node set is empty")]
    EmptyTrainSet,
    #[error("invalid windows: long {long}s must exceed short {short}s > 0")]
    Windows { long: i64, short: i64 },
    #[error("malformed edge list line {line}: {reason}")]
    EdgeList { line: usize, reason: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const N_FEATURES: usize = 22;

pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "Node outdegree",
    "Node indegree",
    "Max outgoing amount",
    "Min outgoing amount",
    "Max incoming amount",
    "Min incoming amount",
    "Average outgoing amount",
    "Average incoming amount",
    "Account balance",
    "Account lifetime",
    "Long-term incoming transfer frequency",
    "Short-term incoming transfer frequency",
    "Long-term outgoing transfer frequency",
    "Short-term outgoing transfer frequency",
    "Degree centrality",
    "Indegree centrality",
    "Outdegree centrality",
    "Betweenness centrality",
    "Closeness centrality",
    "Eigenvector centrality",
    "Katz centrality",
    "Clustering coefficient",
];

/// Compressed sparse rows with per-edge aggregates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Csr {
    pub offsets: Vec<usize>,
    pub targets: Vec<usize>,
    pub count: Vec<u64>,
    pub value: Vec<f64>,
    pub weight: Vec<f64>,
}

impl Csr {
    fn from_edges(n: usize, edges: &[(usize, usize, u64, f64, f64)]) -> Self {
        let mut offsets = vec![0usize; n + 1];
        for e in edges {
            offsets[e.0 + 1] += 1;
        }
        for i in 0..n {
            offsets[i + 1] += offsets[i];
        }
        let mut fill = offsets.clone();
        let m = edges.len();
        let mut csr = Csr {
            offsets,
            targets: vec![0; m],
            count: vec![0; m],
            value: vec![0.0; m],
            weight: vec![0.0; m],
        };
        for &(u, v, c, val, w) in edges {
            let p = fill[u];
            fill[u] += 1;
            csr.targets[p] = v;
            csr.count[p] = c;
            csr.value[p] = val;
            csr.weight[p] = w;
        }
        csr
    }

    pub fn range(&self, u: usize) -> std::ops::Range<usize> {
        self.offsets[u]..self.offsets[u + 1]
    }

    pub fn neighbors(&self, u: usize) -> &[usize] {
        &self.targets[self.range(u)]
    }

    pub fn degree(&self, u: usize) -> usize {
        self.offsets[u + 1] - self.offsets[u]
    }

    pub fn n_edges(&self) -> usize {
        self.targets.len()
    }
}

/// Per-node transfer aggregates.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NodeActivity {
    pub out_count: u64,
    pub in_count: u64,
    pub out_sum: f64,
    pub in_sum: f64,
    pub out_max: f64,
    pub out_min: f64,
    pub in_max: f64,
    pub in_min: f64,
    pub first_ts: Option<i64>,
    pub last_ts: Option<i64>,
}

impl NodeActivity {
    fn record(&mut self, dir: Direction, value: f64, count: u64, ts: Option<i64>) {
        let (n, sum, max, min) = match dir {
            Direction::Out => (&mut self.out_count, &mut self.out_sum, &mut self.out_max, &mut self.out_min),
            Direction::In => (&mut self.in_count, &mut self.in_sum, &mut self.in_max, &mut self.in_min),
        };
        if *n == 0 {
            *max = value;
            *min = value;
        } else {
            *max = max.max(value);
            *min = min.min(value);
        }
        *n += count;
        *sum += value * count as f64;
        if let Some(t) = ts {
            self.first_ts = Some(self.first_ts.map_or(t, |f| f.min(t)));
            self.last_ts = Some(self.last_ts.map_or(t, |l| l.max(t)));
        }
    }
}

/// Directed, weighted account graph. Nodes are ordered by address.
#[derive(Debug, Clone)]
pub struct AccountGraph {
    nodes: Vec<Address>,
    index: HashMap<Address, usize>,
    pub out: Csr,
    pub inc: Csr,
    activity: Vec<NodeActivity>,
}

impl AccountGraph {
    fn assemble(
        nodes: Vec<Address>,
        agg: BTreeMap<(usize, usize), (u64, f64)>,
        activity: Vec<NodeActivity>,
    ) -> Self {
        let n = nodes.len();
        let max_count = agg.values().map(|v| v.0).max().unwrap_or(1).max(1) as f64;
        let out_edges: Vec<_> = agg
            .iter()
            .map(|(&(u, v), &(c, val))| (u, v, c, val, c as f64 / max_count))
            .collect();
        let mut in_edges: Vec<_> = out_edges.iter().map(|&(u, v, c, val, w)| (v, u, c, val, w)).collect();
        in_edges.sort_by_key(|e| (e.0, e.1));
        let index = nodes.iter().enumerate().map(|(i, a)| (a.clone(), i)).collect();
        Self {
            out: Csr::from_edges(n, &out_edges),
            inc: Csr::from_edges(n, &in_edges),
            nodes,
            index,
            activity,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_edges(&self) -> usize {
        self.out.n_edges()
    }

    pub fn nodes(&self) -> &[Address] {
        &self.nodes
    }

    pub fn node_index(&self, a: &Address) -> Option<usize> {
        self.index.get(a).copied()
    }

    pub fn activity(&self, u: usize) -> &NodeActivity {
        &self.activity[u]
    }

    /// Aggregated `(count, value_sum, weight)` of edge `u → v`.
    pub fn edge(&self, u: usize, v: usize) -> Option<(u64, f64, f64)> {
        let r = self.out.range(u);
        let pos = self.out.targets[r.clone()].binary_search(&v).ok()?;
        let p = r.start + pos;
        Some((self.out.count[p], self.out.value[p], self.out.weight[p]))
    }

    /// Sorted, deduplicated neighbors ignoring direction.
    pub fn undirected(&self) -> Vec<Vec<usize>> {
        (0..self.n_nodes())
            .map(|u| {
                let mut nb: Vec<usize> = self.out.neighbors(u).iter().chain(self.inc.neighbors(u)).copied().collect();
                nb.sort_unstable();
                nb.dedup();
                nb.retain(|&v| v != u);
                nb
            })
            .collect()
    }

    /// Writes `from,to,count,value_sum`.
    pub fn write_edge_list<W: Write>(&self, w: W) -> Result<(), GraphError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["from", "to", "count", "value_sum"])?;
        for u in 0..self.n_nodes() {
            for p in self.out.range(u) {
                wr.write_record([
                    self.nodes[u].to_string(),
                    self.nodes[self.out.targets[p]].to_string(),
                    self.out.count[p].to_string(),
                    self.out.value[p].to_string(),
                ])?;
            }
        }
        wr.flush()?;
        Ok(())
    }
}

/// Builds the graph from sender-view transfers.
pub fn build_graph(transfers: &[TransactionRecord]) -> Result<AccountGraph, GraphError> {
    if transfers.is_empty() {
        return Err(GraphError::Empty);
    }
    let set: BTreeSet<&Address> = transfers.iter().flat_map(|t| [&t.sender, &t.receiver]).collect();
    let nodes: Vec<Address> = set.into_iter().cloned().collect();
    let idx: HashMap<&Address, usize> = nodes.iter().enumerate().map(|(i, a)| (a, i)).collect();
    let mut agg: BTreeMap<(usize, usize), (u64, f64)> = BTreeMap::new();
    let mut activity = vec![NodeActivity::default(); nodes.len()];
    for t in transfers {
        let (u, v) = (idx[&t.sender], idx[&t.receiver]);
        let e = agg.entry((u, v)).or_default();
        e.0 += 1;
        e.1 += t.value;
        activity[u].record(Direction::Out, t.value, 1, Some(t.timestamp));
        activity[v].record(Direction::In, t.value, 1, Some(t.timestamp));
    }
    Ok(AccountGraph::assemble(nodes, agg, activity))
}

/// Builds a graph from a `from,to,count,value_sum` edge list. Without
/// individual transfers, each edge contributes `count` transfers of its
/// mean value and no timestamps.
pub fn read_edge_list<R: std::io::Read>(r: R) -> Result<AccountGraph, GraphError> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let err = |reason: &str| GraphError::EdgeList { line, reason: reason.into() };
        let from = Address::parse(rec.get(0).unwrap_or("")).ok_or_else(|| err("bad from"))?;
        let to = Address::parse(rec.get(1).unwrap_or("")).ok_or_else(|| err("bad to"))?;
        let count: u64 = rec.get(2).unwrap_or("").trim().parse().map_err(|_| err("bad count"))?;
        let value: f64 = rec.get(3).unwrap_or("").trim().parse().map_err(|_| err("bad value_sum"))?;
        if count == 0 || from == to || !(value >= 0.0 && value.is_finite()) {
            return Err(err("count must be positive, value non-negative, no self loops"));
        }
        rows.push((from, to, count, value));
    }
    if rows.is_empty() {
        return Err(GraphError::Empty);
    }
    let set: BTreeSet<&Address> = rows.iter().flat_map(|r| [&r.0, &r.1]).collect();
    let nodes: Vec<Address> = set.into_iter().cloned().collect();
    let idx: HashMap<&Address, usize> = nodes.iter().enumerate().map(|(i, a)| (a, i)).collect();
    let mut agg: BTreeMap<(usize, usize), (u64, f64)> = BTreeMap::new();
    let mut activity = vec![NodeActivity::default(); nodes.len()];
    for (from, to, count, value) in &rows {
        let (u, v) = (idx[from], idx[to]);
        let e = agg.entry((u, v)).or_default();
        e.0 += count;
        e.1 += value;
        let mean = value / *count as f64;
        activity[u].record(Direction::Out, mean, *count, None);
        activity[v].record(Direction::In, mean, *count, None);
    }
    Ok(AccountGraph::assemble(nodes, agg, activity))
}

// Column indices of imputed-feature flags.
const F_MAX_OUT: usize = 2;
const F_MIN_OUT: usize = 3;
const F_MAX_IN: usize = 4;
const F_MIN_IN: usize = 5;
const F_AVG_OUT: usize = 6;
const F_AVG_IN: usize = 7;
const F_LIFETIME: usize = 9;
const F_CLOSENESS: usize = 18;

/// Ten transaction-statistics features plus a bitmask of imputed columns.
pub fn transaction_stats(graph: &AccountGraph, account: &Address) -> Result<([f64; 10], u32), GraphError> {
    let u = graph
        .node_index(account)
        .ok_or_else(|| GraphError::UnknownAccount(account.to_string()))?;
    Ok(stats_of(graph.activity(u)))
}

fn stats_of(a: &NodeActivity) -> ([f64; 10], u32) {
    let mut flags = 0u32;
    let mut f = [0.0; 10];
    f[0] = a.out_count as f64;
    f[1] = a.in_count as f64;
    if a.out_count > 0 {
        f[F_MAX_OUT] = a.out_max;
        f[F_MIN_OUT] = a.out_min;
        f[F_AVG_OUT] = a.out_sum / a.out_count as f64;
    } else {
        flags |= 1 << F_MAX_OUT | 1 << F_MIN_OUT | 1 << F_AVG_OUT;
    }
    if a.in_count > 0 {
        f[F_MAX_IN] = a.in_max;
        f[F_MIN_IN] = a.in_min;
        f[F_AVG_IN] = a.in_sum / a.in_count as f64;
    } else {
        flags |= 1 << F_MAX_IN | 1 << F_MIN_IN | 1 << F_AVG_IN;
    }
    f[8] = a.in_sum - a.out_sum;
    match (a.first_ts, a.last_ts) {
        (Some(first), Some(last)) => f[F_LIFETIME] = (last - first) as f64 / 86_400.0,
        _ => flags |= 1 << F_LIFETIME,
    }
    (f, flags)
}

/// `[long_in, short_in, long_out, short_out]` counted over trailing windows
/// that end at the account's last transaction.
pub fn transfer_frequencies(records: &[TransactionRecord], long_window: i64, short_window: i64) -> Result<[f64; 4], GraphError> {
    if short_window <= 0 || long_window <= short_window {
        return Err(GraphError::Windows { long: long_window, short: short_window });
    }
    let Some(last) = records.iter().map(|r| r.timestamp).max() else {
        return Ok([0.0; 4]);
    };
    let mut f = [0.0; 4];
    for r in records {
        let age = last - r.timestamp;
        let base = if r.direction == Direction::In { 0 } else { 2 };
        if age <= long_window {
            f[base] += 1.0;
        }
        if age <= short_window {
            f[base + 1] += 1.0;
        }
    }
    Ok(f)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CentralityConfig {
    /// Exact betweenness up to this many nodes, pivot sampling above.
    pub exact_limit: usize,
    pub pivots: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for CentralityConfig {
    fn default() -> Self {
        Self { exact_limit: 50_000, pivots: 256, tol: 1e-10, max_iter: 20_000, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Centralities {
    pub degree: Vec<f64>,
    pub in_degree: Vec<f64>,
    pub out_degree: Vec<f64>,
    pub betweenness: Vec<f64>,
    pub closeness: Vec<f64>,
    pub eigenvector: Vec<f64>,
    pub katz: Vec<f64>,
    /// Katz scores before L2 normalization.
    pub katz_raw: Vec<f64>,
    pub clustering: Vec<f64>,
    pub sampled_pivots: Option<usize>,
    pub lambda_max: f64,
    pub eigen_iterations: usize,
    pub eigen_converged: bool,
}

/// Per-source BFS result on the undirected projection.
struct Bfs {
    order: Vec<usize>,
    dist: Vec<i64>,
    sigma: Vec<f64>,
}

fn bfs(adj: &[Vec<usize>], s: usize, dist: &mut [i64], sigma: &mut [f64], order: &mut Vec<usize>) {
    order.clear();
    dist[s] = 0;
    sigma[s] = 1.0;
    order.push(s);
    let mut head = 0;
    while head < order.len() {
        let v = order[head];
        head += 1;
        for &w in &adj[v] {
            if dist[w] < 0 {
                dist[w] = dist[v] + 1;
                order.push(w);
            }
            if dist[w] == dist[v] + 1 {
                sigma[w] += sigma[v];
            }
        }
    }
}

/// Brandes dependencies and distance totals from a range of sources.
fn brandes_chunk(adj: &[Vec<usize>], sources: &[usize], with_dependency: bool) -> (Vec<f64>, Vec<(usize, f64, usize)>) {
    let n = adj.len();
    let mut bc = vec![0.0; n];
    let mut reach = Vec::with_capacity(sources.len());
    let mut st = Bfs { order: Vec::with_capacity(n), dist: vec![-1; n], sigma: vec![0.0; n] };
    let mut delta = vec![0.0; n];
    for &s in sources {
        bfs(adj, s, &mut st.dist, &mut st.sigma, &mut st.order);
        let total: i64 = st.order.iter().map(|&v| st.dist[v]).sum();
        reach.push((s, total as f64, st.order.len()));
        if with_dependency {
            for &w in st.order.iter().rev() {
                for &v in &adj[w] {
                    if st.dist[v] == st.dist[w] - 1 {
                        delta[v] += st.sigma[v] / st.sigma[w] * (1.0 + delta[w]);
                    }
                }
                if w != s {
                    bc[w] += delta[w];
                }
            }
        }
        for &v in &st.order {
            st.dist[v] = -1;
            st.sigma[v] = 0.0;
            delta[v] = 0.0;
        }
    }
    (bc, reach)
}

/// Runs `f` over sources split into a fixed number of contiguous chunks so
/// the reduction order does not depend on the thread count.
fn chunked_brandes(adj: &[Vec<usize>], sources: &[usize], with_dependency: bool) -> (Vec<f64>, Vec<(usize, f64, usize)>) {
    let n = adj.len();
    let n_chunks = sources.len().clamp(1, 32);
    let size = sources.len().div_ceil(n_chunks).max(1);
    let parts = crate::par_map(n_chunks, |c| {
        let lo = (c * size).min(sources.len());
        let hi = ((c + 1) * size).min(sources.len());
        brandes_chunk(adj, &sources[lo..hi], with_dependency)
    });
    let mut bc = vec![0.0; n];
    let mut reach = Vec::with_capacity(sources.len());
    for (b, r) in parts {
        for (acc, x) in bc.iter_mut().zip(b) {
            *acc += x;
        }
        reach.extend(r);
    }
    (bc, reach)
}

fn l2_normalize(x: &mut [f64]) {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        x.iter_mut().for_each(|v| *v /= norm);
    }
}

/// Power iteration on `A + I` of the undirected projection.
/// Returns the unit eigenvector, the Rayleigh quotient of `A`, and iterations.
pub fn eigenvector_centrality(adj: &[Vec<usize>], tol: f64, max_iter: usize) -> Result<(Vec<f64>, f64, usize), GraphError> {
    match power_iteration(adj, tol, max_iter) {
        (x, lambda, it, true) => Ok((x, lambda, it)),
        _ => Err(GraphError::NoConvergence(max_iter)),
    }
}

/// Like [`eigenvector_centrality`] but keeps the last iterate when the cap is hit.
/// Components with nearly equal spectral radius mix very slowly.
pub fn power_iteration(adj: &[Vec<usize>], tol: f64, max_iter: usize) -> (Vec<f64>, f64, usize, bool) {
    let n = adj.len();
    let mut x = vec![1.0 / n as f64; n];
    l2_normalize(&mut x);
    let mut converged = false;
    let mut iters = 0;
    for it in 1..=max_iter {
        let mut y: Vec<f64> = (0..n).map(|v| x[v] + adj[v].iter().map(|&u| x[u]).sum::<f64>()).collect();
        l2_normalize(&mut y);
        let diff: f64 = y.iter().zip(&x).map(|(a, b)| (a - b).abs()).sum();
        x = y;
        iters = it;
        if diff < n as f64 * tol {
            converged = true;
            break;
        }
    }
    let lambda: f64 = (0..n).map(|v| x[v] * adj[v].iter().map(|&u| x[u]).sum::<f64>()).sum();
    (x, lambda, iters, converged)
}

pub fn katz_centrality(adj: &[Vec<usize>], alpha: f64, beta: f64, tol: f64, max_iter: usize) -> Result<Vec<f64>, GraphError> {
    let n = adj.len();
    let mut x = vec![beta; n];
    for _ in 0..max_iter {
        let y: Vec<f64> = (0..n).map(|v| alpha * adj[v].iter().map(|&u| x[u]).sum::<f64>() + beta).collect();
        let diff: f64 = y.iter().zip(&x).map(|(a, b)| (a - b).abs()).sum();
        x = y;
        if diff < n as f64 * tol {
            return Ok(x);
        }
    }
    Err(GraphError::NoConvergence(max_iter))
}

fn clustering(adj: &[Vec<usize>]) -> Vec<f64> {
    crate::par_map(adj.len(), |v| {
        let nb = &adj[v];
        let k = nb.len();
        if k < 2 {
            return 0.0;
        }
        let mut links = 0usize;
        for &u in nb {
            // sorted-list intersection
            let (mut i, mut j) = (0, 0);
            let other = &adj[u];
            while i < nb.len() && j < other.len() {
                match nb[i].cmp(&other[j]) {
                    std::cmp::Ordering::Less => i += 1,
                    std::cmp::Ordering::Greater => j += 1,
                    std::cmp::Ordering::Equal => {
                        links += 1;
                        i += 1;
                        j += 1;
                    }
                }
            }
        }
        // each triangle counted twice
        links as f64 / (k * (k - 1)) as f64
    })
}

pub fn centralities(graph: &AccountGraph, cfg: &CentralityConfig) -> Result<Centralities, GraphError> {
    let n = graph.n_nodes();
    if n == 0 {
        return Err(GraphError::Empty);
    }
    let adj = graph.undirected();
    let denom = (n.max(2) - 1) as f64;
    let in_degree: Vec<f64> = (0..n).map(|u| graph.inc.degree(u) as f64 / denom).collect();
    let out_degree: Vec<f64> = (0..n).map(|u| graph.out.degree(u) as f64 / denom).collect();
    let degree: Vec<f64> = in_degree.iter().zip(&out_degree).map(|(a, b)| a + b).collect();

    let (sources, sampled) = if n > cfg.exact_limit {
        let mut r = rng::stream(cfg.seed, "betweenness-pivots");
        let k = cfg.pivots.min(n);
        let mut s = sample(&mut r, n, k).into_vec();
        s.sort_unstable();
        (s, Some(k))
    } else {
        ((0..n).collect::<Vec<_>>(), None)
    };
    let (mut betweenness, reach) = chunked_brandes(&adj, &sources, true);
    let scale = n as f64 / sources.len() as f64;
    // undirected pairs are seen from both endpoints
    let pair_norm = if n > 2 { ((n - 1) * (n - 2)) as f64 / 2.0 } else { 0.0 };
    for b in &mut betweenness {
        *b = if pair_norm > 0.0 { *b * scale / 2.0 / pair_norm } else { 0.0 };
    }

    let mut closeness = vec![0.0; n];
    if sampled.is_none() {
        for (s, total, r) in reach {
            if r > 1 && total > 0.0 {
                let rf = (r - 1) as f64;
                closeness[s] = rf / total * rf / denom;
            }
        }
    } else {
        // distances are symmetric: pivot BFS trees estimate every node's totals
        let mut total = vec![0.0; n];
        let mut count = vec![0.0; n];
        let mut dist = vec![-1i64; n];
        let mut sigma = vec![0.0; n];
        let mut order = Vec::new();
        for &s in &sources {
            bfs(&adj, s, &mut dist, &mut sigma, &mut order);
            for &v in &order {
                total[v] += dist[v] as f64 * scale;
                count[v] += scale;
                dist[v] = -1;
                sigma[v] = 0.0;
            }
        }
        for v in 0..n {
            let reached = (count[v] - 1.0).max(0.0);
            if reached > 0.0 && total[v] > 0.0 {
                closeness[v] = reached / total[v] * reached / denom;
            }
        }
    }

    let (eigenvector, lambda_max, eigen_iterations, eigen_converged) = power_iteration(&adj, cfg.tol, cfg.max_iter);
    if !eigen_converged {
        log::warn!("eigenvector centrality did not settle in {} iterations; using the last iterate", cfg.max_iter);
    }
    let alpha = if lambda_max > 1e-12 { 0.9 / lambda_max } else { 0.0 };
    let katz_raw = katz_centrality(&adj, alpha, 1.0, cfg.tol, cfg.max_iter.max(1000) * 10)?;
    let mut katz = katz_raw.clone();
    l2_normalize(&mut katz);

    Ok(Centralities {
        degree,
        in_degree,
        out_degree,
        betweenness,
        closeness,
        eigenvector,
        katz,
        katz_raw,
        clustering: clustering(&adj),
        sampled_pivots: sampled,
        lambda_max,
        eigen_iterations,
        eigen_converged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub long_window_secs: i64,
    pub short_window_secs: i64,
    pub centrality: CentralityConfig,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { long_window_secs: 30 * 86_400, short_window_secs: 86_400, centrality: CentralityConfig::default() }
    }
}

/// Per-column standardization fitted on training nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZScore {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Zero-variance columns are left unscaled.
    pub passthrough: Vec<bool>,
}

impl ZScore {
    pub fn fit(raw: &[f64], cols: usize, rows: &[usize]) -> Result<Self, GraphError> {
        if rows.is_empty() {
            return Err(GraphError::EmptyTrainSet);
        }
        let k = rows.len() as f64;
        let mut mean = vec![0.0; cols];
        for &r in rows {
            for c in 0..cols {
                mean[c] += raw[r * cols + c];
            }
        }
        mean.iter_mut().for_each(|m| *m /= k);
        let mut var = vec![0.0; cols];
        for &r in rows {
            for c in 0..cols {
                var[c] += (raw[r * cols + c] - mean[c]).powi(2);
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / k).sqrt()).collect();
        let passthrough = std.iter().zip(&mean).map(|(s, m)| *s <= 1e-12 * m.abs().max(1.0)).collect();
        Ok(Self { mean, std, passthrough })
    }

    pub fn apply(&self, raw: &[f64]) -> Vec<f64> {
        let cols = self.mean.len();
        raw.iter()
            .enumerate()
            .map(|(i, &x)| {
                let c = i % cols;
                if self.passthrough[c] { x } else { (x - self.mean[c]) / self.std[c] }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureMeta {
    pub columns: Vec<String>,
    pub zscore: ZScore,
    pub long_window_secs: i64,
    pub short_window_secs: i64,
    pub betweenness_pivots: Option<usize>,
    pub lambda_max: f64,
    pub eigen_iterations: usize,
    pub eigen_converged: bool,
    /// Nodes with at least one imputed column, with their column bitmask.
    pub imputed: Vec<(usize, u32)>,
}

/// `|V| × 22` node features. `raw` is unscaled, `scaled` is standardized.
#[derive(Debug, Clone)]
pub struct NodeFeatureMatrix {
    pub n: usize,
    pub raw: Vec<f64>,
    pub scaled: Vec<f64>,
    pub meta: FeatureMeta,
}

impl NodeFeatureMatrix {
    pub fn row(&self, u: usize) -> &[f64] {
        &self.scaled[u * N_FEATURES..(u + 1) * N_FEATURES]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.n, N_FEATURES, self.scaled.clone()).expect("row-major n×22")
    }

    /// CSV with an `account` column followed by the 22 named columns.
    pub fn write_csv<W: Write>(&self, w: W, accounts: &[Address]) -> Result<(), GraphError> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["account".to_string()];
        header.extend(FEATURE_NAMES.iter().map(|s| s.to_string()));
        wr.write_record(&header)?;
        for (u, a) in accounts.iter().enumerate().take(self.n) {
            let mut rec = vec![a.to_string()];
            rec.extend(self.row(u).iter().map(|x| x.to_string()));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Reads the scaled feature CSV back as `(accounts, row-major values)`.
pub fn read_features_csv<R: std::io::Read>(r: R) -> Result<(Vec<Address>, Vec<f64>), GraphError> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut accounts = Vec::new();
    let mut values = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let err = |reason: &str| GraphError::EdgeList { line: i + 2, reason: reason.into() };
        if rec.len() != N_FEATURES + 1 {
            return Err(err("wrong column count"));
        }
        accounts.push(Address::parse(&rec[0]).ok_or_else(|| err("bad account"))?);
        for c in 1..=N_FEATURES {
            values.push(rec[c].parse::<f64>().map_err(|_| err("bad number"))?);
        }
    }
    Ok((accounts, values))
}

/// Computes, imputes and standardizes all 22 features.
pub fn assemble_features(
    graph: &AccountGraph,
    by_account: &BTreeMap<Address, Vec<TransactionRecord>>,
    train: &[usize],
    cfg: &FeatureConfig,
) -> Result<NodeFeatureMatrix, GraphError> {
    if train.is_empty() {
        return Err(GraphError::EmptyTrainSet);
    }
    if cfg.short_window_secs <= 0 || cfg.long_window_secs <= cfg.short_window_secs {
        return Err(GraphError::Windows { long: cfg.long_window_secs, short: cfg.short_window_secs });
    }
    let n = graph.n_nodes();
    let cent = centralities(graph, &cfg.centrality)?;
    let rows = crate::par_map(n, |u| {
        let (stats, mut flags) = stats_of(graph.activity(u));
        let recs = by_account.get(&graph.nodes()[u]).map(Vec::as_slice).unwrap_or(&[]);
        let freq = transfer_frequencies(recs, cfg.long_window_secs, cfg.short_window_secs).unwrap_or([0.0; 4]);
        if cent.closeness[u] == 0.0 {
            flags |= 1 << F_CLOSENESS;
        }
        let mut row = [0.0; N_FEATURES];
        row[..10].copy_from_slice(&stats);
        row[10..14].copy_from_slice(&freq);
        row[14] = cent.degree[u];
        row[15] = cent.in_degree[u];
        row[16] = cent.out_degree[u];
        row[17] = cent.betweenness[u];
        row[18] = cent.closeness[u];
        row[19] = cent.eigenvector[u];
        row[20] = cent.katz[u];
        row[21] = cent.clustering[u];
        (row, flags)
    });
    let mut raw = Vec::with_capacity(n * N_FEATURES);
    let mut imputed = Vec::new();
    for (u, (row, flags)) in rows.into_iter().enumerate() {
        raw.extend_from_slice(&row);
        if flags != 0 {
            imputed.push((u, flags));
        }
    }
    let zscore = ZScore::fit(&raw, N_FEATURES, train)?;
    let scaled = zscore.apply(&raw);
    Ok(NodeFeatureMatrix {
        n,
        raw,
        scaled,
        meta: FeatureMeta {
            columns: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            zscore,
            long_window_secs: cfg.long_window_secs,
            short_window_secs: cfg.short_window_secs,
            betweenness_pivots: cent.sampled_pivots,
            lambda_max: cent.lambda_max,
            eigen_iterations: cent.eigen_iterations,
            eigen_converged: cent.eigen_converged,
            imputed,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::txcorpus::group_by_account;

    pub(crate) fn tx(from: u64, to: u64, value: f64, ts: i64) -> TransactionRecord {
        TransactionRecord {
            sender: Address::from_index(from),
            receiver: Address::from_index(to),
            value,
            direction: Direction::Out,
            timestamp: ts,
        }
    }

    fn fixture() -> Vec<TransactionRecord> {
        vec![tx(0xA, 0xB, 2.0, 100), tx(0xA, 0xB, 3.0, 200), tx(0xB, 0xC, 1.0, 300)]
    }

    #[test]
    fn aggregation() {
        let g = build_graph(&fixture()).unwrap();
        assert_eq!((g.n_nodes(), g.n_edges()), (3, 2));
        assert_eq!(g.edge(0, 1).unwrap().0, 2);
        assert_eq!(g.edge(1, 2).unwrap().0, 1);
        assert_eq!(g.edge(1, 2).unwrap().2, 0.5);

        let g = build_graph(&[tx(1, 2, 1.0, 1), tx(2, 1, 1.0, 2)]).unwrap();
        assert_eq!(g.n_edges(), 2);
        assert!(matches!(build_graph(&[]), Err(GraphError::Empty)));
    }

    #[test]
    fn in_and_out_csr_are_transposes() {
        let g = build_graph(&fixture()).unwrap();
        let mut a: Vec<(usize, usize, u64)> = Vec::new();
        let mut b = Vec::new();
        for u in 0..g.n_nodes() {
            for p in g.out.range(u) {
                a.push((u, g.out.targets[p], g.out.count[p]));
            }
            for p in g.inc.range(u) {
                b.push((g.inc.targets[p], u, g.inc.count[p]));
            }
        }
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn stats_of_fixture() {
        let g = build_graph(&fixture()).unwrap();
        let (f, flags) = transaction_stats(&g, &Address::from_index(0xA)).unwrap();
        assert_eq!(&f[..9], &[2.0, 0.0, 3.0, 2.0, 0.0, 0.0, 2.5, 0.0, -5.0]);
        assert!((f[9] - 100.0 / 86_400.0).abs() < 1e-15);
        assert_ne!(flags & (1 << F_MAX_IN), 0);
        let (f, _) = transaction_stats(&g, &Address::from_index(0xC)).unwrap();
        assert_eq!(f[9], 0.0);
        assert!(transaction_stats(&g, &Address::from_index(0xFF)).is_err());
    }

    #[test]
    fn window_counts() {
        let day = 86_400;
        let recs: Vec<_> = (0..4)
            .map(|i| {
                let mut r = tx(1, 2, 1.0, 1_000 + i * 10 * day);
                r.direction = if i % 2 == 0 { Direction::In } else { Direction::Out };
                r
            })
            .collect();
        // last tx is out at day 30; the in tx at day 0 sits exactly 30 days back
        let f = transfer_frequencies(&recs, 30 * day, day).unwrap();
        assert_eq!(f, [2.0, 0.0, 2.0, 1.0]);
        let f = transfer_frequencies(&recs[..1], 30 * day, day).unwrap();
        assert_eq!(f, [1.0, 1.0, 0.0, 0.0]);
        assert_eq!(transfer_frequencies(&[], 30 * day, day).unwrap(), [0.0; 4]);
        assert!(transfer_frequencies(&recs, day, day).is_err());
    }

    #[test]
    fn path_and_triangle_centralities() {
        let g = build_graph(&[tx(1, 2, 1.0, 1), tx(2, 3, 1.0, 2)]).unwrap();
        let c = centralities(&g, &CentralityConfig::default()).unwrap();
        assert_eq!(c.degree[1], 1.0);
        assert!((c.betweenness[1] - 1.0).abs() < 1e-12);
        assert!((c.closeness[1] - 1.0).abs() < 1e-12);

        let g = build_graph(&[tx(1, 2, 1.0, 1), tx(2, 3, 1.0, 2), tx(3, 1, 1.0, 3)]).unwrap();
        let c = centralities(&g, &CentralityConfig::default()).unwrap();
        for v in 0..3 {
            assert!((c.clustering[v] - 1.0).abs() < 1e-12);
            assert!((c.eigenvector[v] - 1.0 / 3f64.sqrt()).abs() < 1e-9);
        }
    }

    #[test]
    fn edgeless_adjacency() {
        let adj = vec![Vec::new(); 4];
        let katz = katz_centrality(&adj, 0.0, 1.0, 1e-10, 10).unwrap();
        assert_eq!(katz, vec![1.0; 4]);
        assert_eq!(clustering(&adj), vec![0.0; 4]);
        let (bc, _) = chunked_brandes(&adj, &[0, 1, 2, 3], true);
        assert_eq!(bc, vec![0.0; 4]);
    }

    #[test]
    fn feature_matrix_shape_and_scaling() {
        let txs = fixture();
        let g = build_graph(&txs).unwrap();
        let by = group_by_account(&txs);
        let m = assemble_features(&g, &by, &[0, 1, 2], &FeatureConfig::default()).unwrap();
        assert_eq!((m.n, m.scaled.len()), (3, 66));
        assert!(m.scaled.iter().all(|x| x.is_finite()));
        for c in 0..N_FEATURES {
            let col: Vec<f64> = (0..3).map(|r| m.scaled[r * N_FEATURES + c]).collect();
            if m.meta.zscore.passthrough[c] {
                assert_eq!(col, (0..3).map(|r| m.raw[r * N_FEATURES + c]).collect::<Vec<_>>());
                continue;
            }
            let mean = col.iter().sum::<f64>() / 3.0;
            let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 3.0;
            assert!(mean.abs() < 1e-9 && (var.sqrt() - 1.0).abs() < 1e-9, "column {c}");
        }
        // clustering is zero everywhere on a path
        assert!(m.meta.zscore.passthrough[21]);
        assert!(matches!(
            assemble_features(&g, &by, &[], &FeatureConfig::default()),
            Err(GraphError::EmptyTrainSet)
        ));
    }

    #[test]
    fn csv_roundtrips() {
        let txs = fixture();
        let g = build_graph(&txs).unwrap();
        let mut buf = Vec::new();
        g.write_edge_list(&mut buf).unwrap();
        let g2 = read_edge_list(buf.as_slice()).unwrap();
        assert_eq!(g2.out, g.out);
        let m = assemble_features(&g, &group_by_account(&txs), &[0, 1, 2], &FeatureConfig::default()).unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf, g.nodes()).unwrap();
        let (accts, vals) = read_features_csv(buf.as_slice()).unwrap();
        assert_eq!(accts, g.nodes());
        assert_eq!(vals, m.scaled);
    }

    #[test]
    fn pivot_mode_flags_and_scales() {
        let txs: Vec<_> = (0..30).map(|i| tx(i, (i + 1) % 30, 1.0, i as i64 + 1)).collect();
        let g = build_graph(&txs).unwrap();
        let cfg = CentralityConfig { exact_limit: 10, pivots: 30, ..Default::default() };
        let sampled = centralities(&g, &cfg).unwrap();
        let exact = centralities(&g, &CentralityConfig::default()).unwrap();
        assert_eq!(sampled.sampled_pivots, Some(30));
        for v in 0..30 {
            assert!((sampled.betweenness[v] - exact.betweenness[v]).abs() < 1e-9);
            assert!((sampled.closeness[v] - exact.closeness[v]).abs() < 1e-9);
        }
    }
}
