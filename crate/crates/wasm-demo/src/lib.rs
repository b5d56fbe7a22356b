//! Browser bindings for a few self-contained demos. Every export returns a
//! JSON string so the page can render it without extra glue types.

use serde_json::{json, Value};
use txfuse::graphbuild::{centralities as graph_centralities, read_edge_list, CentralityConfig};
use txfuse::harness::{build_corpus, load_dataset, make_split, node_features, pretrain_gae, pretrain_lm, ExperimentConfig};
use txfuse::labor::{clustered_graph, partition_batches, sampling_stats_with_clock, SamplerConfig, SamplerKind};
use txfuse::rng;
use wasm_bindgen::prelude::*;

fn fail(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn parse_fanouts(s: &str) -> Result<Vec<usize>, String> {
    let f: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("bad fanout {p:?}")))
        .collect::<Result<_, _>>()?;
    if f.is_empty() || f.contains(&0) {
        return Err("fanouts must be positive".into());
    }
    Ok(f)
}

/// Average sampled block sizes of the two samplers on a clustered random graph.
#[wasm_bindgen]
pub fn sampler_stats(nodes: usize, communities: usize, degree: usize, fanouts: &str, batch_size: usize, trials: usize, seed: u64) -> Result<String, String> {
    let fanouts = parse_fanouts(fanouts)?;
    if nodes == 0 || batch_size == 0 || trials == 0 {
        return Err("nodes, batch size and trials must be positive".into());
    }
    let nb = clustered_graph(nodes, communities, degree, seed);
    let ids: Vec<usize> = (0..nodes).collect();
    let batches = partition_batches(&ids, batch_size, &mut rng::stream(seed, "demo-batches")).map_err(fail)?;
    // No wall clock in the browser sandbox; the page times calls itself.
    let clock = || 0.0;
    let mut out = Vec::new();
    for kind in [SamplerKind::Labor, SamplerKind::Ns] {
        let cfg = SamplerConfig { kind, fanouts: fanouts.clone(), seed, ..SamplerConfig::default() };
        let s = sampling_stats_with_clock(&nb, &cfg, &batches, trials, &clock).map_err(fail)?;
        out.push(json!({ "sampler": kind.name(), "vertices": s.vertices, "edges": s.edges }));
    }
    Ok(Value::Array(out).to_string())
}

/// Centralities of a `from,to,count,value` edge list given as CSV text.
#[wasm_bindgen]
pub fn centralities(edges_csv: &str) -> Result<String, String> {
    let g = read_edge_list(edges_csv.as_bytes()).map_err(fail)?;
    let c = graph_centralities(&g, &CentralityConfig::default()).map_err(fail)?;
    let nodes: Vec<String> = g.nodes().iter().map(|a| a.to_string()).collect();
    Ok(json!({
        "nodes": nodes,
        "degree": c.degree,
        "in_degree": c.in_degree,
        "out_degree": c.out_degree,
        "betweenness": c.betweenness,
        "closeness": c.closeness,
        "eigenvector": c.eigenvector,
        "katz": c.katz,
        "clustering": c.clustering,
    })
    .to_string())
}

/// Pretraining loss curves of both encoders on a small synthetic dataset.
#[wasm_bindgen]
pub fn loss_curves(accounts: usize, lm_epochs: usize, gae_epochs: usize, seed: u64) -> Result<String, String> {
    if !(20..=2000).contains(&accounts) {
        return Err("accounts must be between 20 and 2000".into());
    }
    let mut cfg = ExperimentConfig::default();
    cfg.set_seed(seed);
    cfg.synthetic.n_accounts = accounts;
    cfg.txclm.d_model = 16;
    cfg.txclm.max_seq_len = 32;
    cfg.txclm.epochs = lm_epochs.max(1);
    cfg.magae.epochs = gae_epochs.max(1);
    let data = load_dataset(&cfg).map_err(fail)?;
    let corpus = build_corpus(&data.by_account, cfg.txclm.max_seq_len, cfg.corpus.min_freq)
        .map_err(fail)?
        .ok_or("synthetic data has no transaction history")?;
    let lm = pretrain_lm(&cfg, &corpus, &data.labels, true).map_err(fail)?;
    let split = make_split(&cfg, &data).map_err(fail)?;
    let x = node_features(&cfg, &data, &split).map_err(fail)?.to_tensor();
    let (gae, _) = pretrain_gae(&cfg, &data.graph, &x).map_err(fail)?;
    let lm_rows: Vec<Value> = lm.logs.iter().map(|l| json!({ "epoch": l.epoch, "mlm": l.mlm, "ta": l.ta, "combined": l.combined })).collect();
    Ok(json!({ "lm": lm_rows, "gae": gae.losses }).to_string())
}
