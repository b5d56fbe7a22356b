//! Masked account graph autoencoder over sampled blocks.
//!
//! Training masks a share of each batch's node features, encodes the block
//! with two weighted-mean message-passing layers, re-masks the same rows in
//! the hidden space and decodes them back to feature space. The loss is the
//! scaled cosine error on masked nodes only. Inference runs the encoder on
//! full neighborhoods with no masking.

use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labor::{build_batch_adjacency, partition_batches, sample_block, BatchAdjacency, HopCsr, Neighborhoods, SampleError, SamplerConfig, SamplerKind};
use crate::numcore::{checkpoint, AdamConfig, AdamState, Bound, ParamId, ParamSet, Tape, Tensor, TensorError, Var};
use crate::rng;

#[derive(Debug, Error)]
pub enum MagaeError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error("no usable masked nodes")]
    EmptyMask,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("model has not been trained")]
    Untrained,
    #[error("block has {hops} hops, need at least {need}")]
    Depth { hops: usize, need: usize },
    #[error("training diverged in epoch {epoch}")]
    Diverged { epoch: usize, last_good: Box<Magae> },
    #[error("bad checkpoint metadata: {0}")]
    Meta(String),
}

pub const ENCODER_LAYERS: usize = 2;

#[derive(Debug, Serialize, Deserialize)]
struct MagaeMeta {
    kind: String,
    d_in: usize,
    d_h: usize,
    trained: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Magae {
    pub d_in: usize,
    pub d_h: usize,
    pub params: ParamSet,
    pub trained: bool,
}

/// Masked rows (local indices among the batch seeds).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NodeMaskPlan {
    pub masked: Vec<usize>,
    pub ratio: f64,
}

/// Picks `round(ratio · n)` of the first `n` rows.
pub fn plan_mask<R: Rng + ?Sized>(n: usize, ratio: f64, rng: &mut R) -> NodeMaskPlan {
    let ratio = ratio.clamp(0.0, 1.0);
    let m = ((ratio * n as f64).round() as usize).min(n);
    let mut masked = sample(rng, n, m).into_vec();
    masked.sort_unstable();
    NodeMaskPlan { masked, ratio }
}

/// Replaces masked rows of `x` with `token`.
pub fn mask_nodes<R: Rng + ?Sized>(x: &Tensor, ratio: f64, token: &[f64], rng: &mut R) -> Result<(Tensor, NodeMaskPlan), TensorError> {
    let (n, f) = x.dims2();
    if token.len() != f {
        return Err(TensorError::ShapeMismatch { op: "mask_nodes", lhs: vec![n, f], rhs: vec![token.len()] });
    }
    let plan = plan_mask(n, ratio, rng);
    let mut out = x.clone();
    for &i in &plan.masked {
        out.data_mut()[i * f..(i + 1) * f].copy_from_slice(token);
    }
    Ok((out, plan))
}

/// `rows(x)` with masked rows swapped for the `token` row `[1 × f]`, on a tape.
fn substitute_rows(tape: &mut Tape, x: Var, token: Var, masked: &[usize]) -> Result<Var, TensorError> {
    if masked.is_empty() {
        return Ok(x);
    }
    let (n, _) = tape.dims2(x);
    let mut keep = vec![1.0; n];
    let mut hit = vec![0.0; n];
    for &i in masked {
        keep[i] = 0.0;
        hit[i] = 1.0;
    }
    let keep = tape.constant(vec![n, 1], keep)?;
    let hit = tape.constant(vec![n, 1], hit)?;
    let kept = tape.mul(x, keep)?;
    let filled = tape.matmul(hit, token)?;
    tape.add(kept, filled)
}

/// Scaled cosine error over `masked` rows. Rows whose target is all zeros
/// have no direction and are skipped; the count of skipped rows is returned.
pub fn sce_loss(tape: &mut Tape, x: Var, z: Var, masked: &[usize], gamma: f64) -> Result<(Var, usize), MagaeError> {
    if gamma < 1.0 {
        return Err(MagaeError::Config(format!("gamma must be >= 1, got {gamma}")));
    }
    let (_, f) = tape.dims2(x);
    let rows: Vec<usize> = masked
        .iter()
        .copied()
        .filter(|&i| tape.data(x)[i * f..(i + 1) * f].iter().any(|&v| v != 0.0))
        .collect();
    if rows.is_empty() {
        return Err(MagaeError::EmptyMask);
    }
    let xs = tape.gather_rows(x, &rows)?;
    let zs = tape.gather_rows(z, &rows)?;
    let c = tape.cosine_rows(xs, zs)?;
    let one_minus = tape.neg(c)?;
    let one_minus = tape.add_scalar(one_minus, 1.0)?;
    // rounding can push 1 - cos slightly below zero
    let clipped = tape.relu(one_minus)?;
    let powed = tape.pow(clipped, gamma)?;
    Ok((tape.mean(powed)?, masked.len() - rows.len()))
}

/// Weighted mean of self and sampled neighbors for one hop, on a tape.
fn aggregate(tape: &mut Tape, x: Var, hop: &HopCsr) -> Result<Var, TensorError> {
    let n_dst = hop.n_dst();
    let own = tape.slice_rows(x, 0, n_dst)?;
    let num = if hop.n_edges() == 0 {
        own
    } else {
        let mut dst = Vec::with_capacity(hop.n_edges());
        for d in 0..n_dst {
            dst.extend(std::iter::repeat_n(d, hop.offsets[d + 1] - hop.offsets[d]));
        }
        let g = tape.gather_rows(x, &hop.src)?;
        let coef = tape.constant(vec![hop.n_edges(), 1], hop.coef.clone())?;
        let g = tape.mul(g, coef)?;
        let s = tape.scatter_add_rows(g, &dst, n_dst)?;
        tape.add(own, s)?
    };
    let norm = tape.constant(vec![n_dst, 1], hop.dst_norm.clone())?;
    tape.div(num, norm)
}

fn prelu_plain(x: &mut [f64], alpha: &[f64]) {
    let d = alpha.len();
    for (i, v) in x.iter_mut().enumerate() {
        if *v < 0.0 {
            *v *= alpha[i % d];
        }
    }
}

impl Magae {
    pub fn new(d_in: usize, d_h: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "magae-init");
        let mut p = ParamSet::new();
        p.add("x_mask", Tensor::zeros(&[1, d_in]));
        p.add("enc0.w", Tensor::uniform_fan_in(&[d_in, d_h], d_in, &mut r));
        p.add("enc0.b", Tensor::zeros(&[d_h]));
        p.add("enc0.alpha", Tensor::filled(&[d_h], 0.25));
        p.add("enc1.w", Tensor::uniform_fan_in(&[d_h, d_h], d_h, &mut r));
        p.add("enc1.b", Tensor::zeros(&[d_h]));
        p.add("enc1.alpha", Tensor::filled(&[d_h], 0.25));
        p.add("dmask", Tensor::zeros(&[1, d_h]));
        p.add("dec.w", Tensor::uniform_fan_in(&[d_h, d_in], d_h, &mut r));
        p.add("dec.b", Tensor::zeros(&[d_in]));
        Self { d_in, d_h, params: p, trained: false }
    }

    fn id(&self, name: &str) -> ParamId {
        self.params.id(name).expect("magae parameter")
    }

    fn layer(&self, tape: &mut Tape, bound: &Bound, x: Var, hop: &HopCsr, name: &str, activate: bool) -> Result<Var, TensorError> {
        let agg = aggregate(tape, x, hop)?;
        let y = tape.matmul(agg, bound.var(self.id(&format!("{name}.w"))))?;
        let y = tape.add(y, bound.var(self.id(&format!("{name}.b"))))?;
        if activate {
            tape.prelu(y, bound.var(self.id(&format!("{name}.alpha"))))
        } else {
            Ok(y)
        }
    }

    /// Encoder over `hops[first + 1]` then `hops[first]`; returns rows for
    /// the first `layer_sizes[first]` block nodes.
    pub fn encode_block(&self, tape: &mut Tape, bound: &Bound, adj: &BatchAdjacency, x: Var, first: usize) -> Result<Var, MagaeError> {
        if adj.hops.len() < first + ENCODER_LAYERS {
            return Err(MagaeError::Depth { hops: adj.hops.len(), need: first + ENCODER_LAYERS });
        }
        let h = self.layer(tape, bound, x, &adj.hops[first + 1], "enc0", true)?;
        Ok(self.layer(tape, bound, h, &adj.hops[first], "enc1", true)?)
    }

    pub fn decode_block(&self, tape: &mut Tape, bound: &Bound, hop: &HopCsr, h: Var) -> Result<Var, MagaeError> {
        Ok(self.layer(tape, bound, h, hop, "dec", false)?)
    }

    pub fn remask(&self, tape: &mut Tape, bound: &Bound, h: Var, plan: &NodeMaskPlan) -> Result<Var, TensorError> {
        substitute_rows(tape, h, bound.var(self.id("dmask")), &plan.masked)
    }

    pub fn mask_input(&self, tape: &mut Tape, bound: &Bound, x: Var, plan: &NodeMaskPlan) -> Result<Var, TensorError> {
        substitute_rows(tape, x, bound.var(self.id("x_mask")), &plan.masked)
    }

    /// Batch loss: mask batch seeds, encode over hops 2 and 1, re-mask,
    /// decode over hop 0, score masked rows.
    pub fn batch_loss(&self, tape: &mut Tape, bound: &Bound, adj: &BatchAdjacency, x: &Tensor, plan: &NodeMaskPlan, gamma: f64) -> Result<Var, MagaeError> {
        if adj.hops.len() != ENCODER_LAYERS + 1 {
            return Err(MagaeError::Depth { hops: adj.hops.len(), need: ENCODER_LAYERS + 1 });
        }
        let xv = tape.leaf(x);
        let xm = self.mask_input(tape, bound, xv, plan)?;
        let h = self.encode_block(tape, bound, adj, xm, 1)?;
        let hm = self.remask(tape, bound, h, plan)?;
        let z = self.decode_block(tape, bound, &adj.hops[0], hm)?;
        let (loss, _) = sce_loss(tape, xv, z, &plan.masked, gamma)?;
        Ok(loss)
    }

    fn dense_layer(&self, nb: &Neighborhoods, x: &[f64], width: usize, name: &str) -> Vec<f64> {
        let n = nb.n_nodes();
        let w = self.params.get(self.id(&format!("{name}.w")));
        let b = self.params.get(self.id(&format!("{name}.b")));
        let agg: Vec<f64> = crate::par_map(n, |v| {
            let mut row: Vec<f64> = x[v * width..(v + 1) * width].to_vec();
            for (&u, &wt) in nb.neighbors(v).iter().zip(nb.weights(v)) {
                for (r, xu) in row.iter_mut().zip(&x[u * width..(u + 1) * width]) {
                    *r += wt * xu;
                }
            }
            let norm = 1.0 + nb.total_weight(v);
            row.iter_mut().for_each(|r| *r /= norm);
            row
        })
        .concat();
        let agg = Tensor::matrix(n, width, agg).expect("row-major aggregate");
        let mut y = crate::numcore::matmul_plain(&agg, &Tensor::matrix(w.rows(), w.cols(), w.data().to_vec()).expect("weight")).expect("shapes");
        let d = w.cols();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v += b.data()[i % d];
        }
        let mut out = y.into_data();
        if let Some(alpha) = self.params.id(&format!("{name}.alpha")) {
            prelu_plain(&mut out, self.params.get(alpha).data());
        }
        out
    }

    /// Exact full-neighborhood encoder output, no masking.
    pub fn encode_full(&self, nb: &Neighborhoods, x: &Tensor) -> Result<Tensor, MagaeError> {
        let (n, f) = x.dims2();
        if f != self.d_in || n != nb.n_nodes() {
            return Err(MagaeError::Config(format!("features {n}x{f} do not match graph of {} nodes and d_in {}", nb.n_nodes(), self.d_in)));
        }
        let h = self.dense_layer(nb, x.data(), f, "enc0");
        let h = self.dense_layer(nb, &h, self.d_h, "enc1");
        Ok(Tensor::matrix(n, self.d_h, h)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), MagaeError> {
        let meta = MagaeMeta { kind: "magae".into(), d_in: self.d_in, d_h: self.d_h, trained: self.trained };
        let meta = serde_json::to_string(&meta).map_err(|e| MagaeError::Meta(e.to_string()))?;
        checkpoint::write(path, &self.params, &meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MagaeError> {
        let (params, meta) = checkpoint::read(path)?;
        let meta: MagaeMeta = serde_json::from_str(&meta).map_err(|e| MagaeError::Meta(e.to_string()))?;
        if meta.kind != "magae" {
            return Err(MagaeError::Meta(format!("expected a magae checkpoint, found {}", meta.kind)));
        }
        if Magae::new(meta.d_in, meta.d_h, 0).params.names() != params.names() {
            return Err(MagaeError::Meta("parameter layout mismatch".into()));
        }
        Ok(Self { d_in: meta.d_in, d_h: meta.d_h, params, trained: meta.trained })
    }
}

/// Inference embeddings for every node.
pub fn infer_embeddings(nb: &Neighborhoods, x: &Tensor, model: &Magae) -> Result<Tensor, MagaeError> {
    if !model.trained {
        return Err(MagaeError::Untrained);
    }
    model.encode_full(nb, x)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct MagaeConfig {
    pub d_h: usize,
    pub mask_ratio: f64,
    pub gamma: f64,
    pub fanout: usize,
    pub sampler: SamplerKind,
    /// Nodes per mini-batch; the batch count is `ceil(|V| / batch_size)`.
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub debias: bool,
    pub seed: u64,
}

impl Default for MagaeConfig {
    fn default() -> Self {
        Self {
            d_h: 64,
            mask_ratio: 0.6,
            gamma: 2.0,
            fanout: 10,
            sampler: SamplerKind::Labor,
            batch_size: 256,
            epochs: 30,
            lr: 1e-3,
            debias: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MagaeOutcome {
    pub model: Magae,
    /// Mean SCE per epoch.
    pub losses: Vec<f64>,
}

/// Self-supervised training over LABOR (or NS) sampled blocks.
pub fn pretrain(nb: &Neighborhoods, x: &Tensor, cfg: &MagaeConfig) -> Result<MagaeOutcome, MagaeError> {
    if !(cfg.mask_ratio > 0.0 && cfg.mask_ratio <= 1.0) {
        return Err(MagaeError::Config(format!("mask ratio must be in (0, 1], got {}", cfg.mask_ratio)));
    }
    if cfg.gamma < 1.0 {
        return Err(MagaeError::Config(format!("gamma must be >= 1, got {}", cfg.gamma)));
    }
    let (n, f) = x.dims2();
    if n != nb.n_nodes() || n == 0 {
        return Err(MagaeError::Config(format!("{n} feature rows for {} nodes", nb.n_nodes())));
    }
    let mut model = Magae::new(f, cfg.d_h, cfg.seed);
    let mut adam = AdamState::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &model.params);
    let sampler = SamplerConfig {
        kind: cfg.sampler,
        fanouts: vec![cfg.fanout; ENCODER_LAYERS + 1],
        seed: cfg.seed,
        ..SamplerConfig::default()
    };
    let all: Vec<usize> = (0..n).collect();
    let n_batches = n.div_ceil(cfg.batch_size.max(1));
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let last_good = model.clone();
        let batches = partition_batches(&all, n_batches, &mut rng::substream(cfg.seed, "magae-partition", &[epoch as u64]))?;
        let (mut total, mut counted) = (0.0, 0usize);
        for (b, seeds) in batches.iter().enumerate() {
            let block = sample_block(nb, seeds, &sampler, epoch as u64, b as u64)?;
            let adj = build_batch_adjacency(&block, nb, cfg.debias)?;
            let plan = plan_mask(seeds.len(), cfg.mask_ratio, &mut rng::substream(cfg.seed, "magae-mask", &[epoch as u64, b as u64]));
            let mut xb = Vec::with_capacity(adj.nodes.len() * f);
            for &g in &adj.nodes {
                xb.extend_from_slice(x.row(g));
            }
            let xb = Tensor::matrix(adj.nodes.len(), f, xb)?;
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape, true);
            let loss = match model.batch_loss(&mut tape, &bound, &adj, &xb, &plan, cfg.gamma) {
                Ok(l) => l,
                Err(MagaeError::EmptyMask) => continue,
                Err(MagaeError::Tensor(TensorError::NonFinite { .. })) => {
                    return Err(MagaeError::Diverged { epoch, last_good: Box::new(last_good) })
                }
                Err(e) => return Err(e),
            };
            let g = tape.backward(loss)?;
            model.params.zero_grad();
            model.params.accumulate(&bound, &g, 1.0)?;
            adam.step(&mut model.params)?;
            total += tape.item(loss);
            counted += 1;
        }
        let mean = if counted > 0 { total / counted as f64 } else { f64::NAN };
        if !mean.is_finite() || !model.params.all_finite() {
            return Err(MagaeError::Diverged { epoch, last_good: Box::new(last_good) });
        }
        log::info!("magae epoch {}: sce {:.5}", epoch + 1, mean);
        losses.push(mean);
    }
    model.trained = true;
    Ok(MagaeOutcome { model, losses })
}
