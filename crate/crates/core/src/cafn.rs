//! Cross-attention fusion network: compresses token representations with
//! learnable aggregate tokens, fuses them with a graph embedding, pools
//! through fusion tokens and classifies accounts as normal or fraud.

use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numcore::{checkpoint, AdamConfig, AdamState, Bound, ParamId, ParamSet, Tape, Tensor, TensorError, Var};
use crate::{par_map, rng};

#[derive(Debug, Error)]
pub enum CafnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{what}: expected dimension {expected}, got {got}")]
    Dim { what: &'static str, expected: usize, got: usize },
    #[error("training set contains a single class")]
    SingleClass,
    #[error("label {0} is not 0 or 1")]
    Label(usize),
    #[error("{0} predictions for {1} labels")]
    Length(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("config: {0}")]
    Config(String),
    #[error("training diverged in epoch {0}")]
    Diverged(usize),
    #[error("checkpoint metadata: {0}")]
    Meta(String),
}

/// Architectural variants used for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    None,
    /// Row means of both inputs projected and summed; no attention, no activation.
    Add,
    /// Row means through the fusion layer (tanh); no attention.
    Linear,
    /// Graph projection fixed at zero.
    NoGraph,
    /// Token representations replaced by a single zero row.
    NoLm,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Ablation::None, Ablation::Add, Ablation::Linear, Ablation::NoGraph, Ablation::NoLm];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::Add => "add",
            Ablation::Linear => "linear",
            Ablation::NoGraph => "no-graph",
            Ablation::NoLm => "no-lm",
        }
    }
}

impl FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown ablation {s:?}; expected one of none, add, linear, no-graph, no-lm"))
    }
}

/// One account's inputs: token representations (rows) and its graph embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct AccountInput {
    pub semantic: Tensor,
    pub graph: Vec<f64>,
    /// Set when the sentence had no tokens and a zero row stands in.
    pub degenerate: bool,
}

impl AccountInput {
    pub fn new(semantic: Tensor, graph: Vec<f64>) -> Self {
        let (r, c) = semantic.dims2();
        if r == 0 {
            return Self { semantic: Tensor::zeros(&[1, c]), graph, degenerate: true };
        }
        Self { semantic, graph, degenerate: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CafnShape {
    pub d_s: usize,
    pub d_h: usize,
    pub d_f: usize,
    pub k_s: usize,
    pub k_f: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cafn {
    pub shape: CafnShape,
    pub ablation: Ablation,
    pub params: ParamSet,
    pub trained: bool,
}

/// Intermediate values of one account.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedAccount {
    pub account: String,
    pub zs: Tensor,
    pub zsg: Tensor,
    pub pooled: Vec<f64>,
    pub probs: [f64; 2],
}

/// Tape handles of a batched forward pass. For the attention-free ablations
/// `zs` holds the per-account token means and `zsg` equals `pooled`.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub zs: Var,
    pub zsg: Var,
    pub pooled: Var,
    pub logits: Var,
}

#[derive(Serialize, Deserialize)]
struct CafnMeta {
    kind: String,
    shape: CafnShape,
    ablation: Ablation,
    trained: bool,
}

/// Two-way softmax.
pub fn softmax2(logits: [f64; 2]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let (a, b) = ((logits[0] - m).exp(), (logits[1] - m).exp());
    [a / (a + b), b / (a + b)]
}

impl Cafn {
    pub fn new(shape: CafnShape, ablation: Ablation, seed: u64) -> Result<Self, CafnError> {
        let CafnShape { d_s, d_h, d_f, k_s, k_f } = shape;
        if [d_s, d_h, k_s, k_f].contains(&0) || d_f < 2 {
            return Err(CafnError::Config(format!("invalid shape {shape:?}")));
        }
        let mut r = rng::stream(seed, "cafn-init");
        let mut p = ParamSet::new();
        p.add("agg_tokens", Tensor::uniform_fan_in(&[k_s, d_s], d_s, &mut r));
        p.add("sem.q", Tensor::uniform_fan_in(&[d_s, d_s], d_s, &mut r));
        p.add("sem.k", Tensor::uniform_fan_in(&[d_s, d_s], d_s, &mut r));
        p.add("sem.v", Tensor::uniform_fan_in(&[d_s, d_s], d_s, &mut r));
        p.add("fuse.ws", Tensor::uniform_fan_in(&[d_s, d_f], d_s, &mut r));
        let wg = p.add("fuse.wg", Tensor::uniform_fan_in(&[d_h, d_f], d_h, &mut r));
        p.add("fuse.b", Tensor::zeros(&[d_f]));
        p.add("fusion_tokens", Tensor::uniform_fan_in(&[k_f, d_f], d_f, &mut r));
        p.add("fus.q", Tensor::uniform_fan_in(&[d_f, d_f], d_f, &mut r));
        p.add("fus.k", Tensor::uniform_fan_in(&[d_f, d_f], d_f, &mut r));
        p.add("fus.v", Tensor::uniform_fan_in(&[d_f, d_f], d_f, &mut r));
        let half = d_f / 2;
        p.add("mlp1.w", Tensor::uniform_fan_in(&[d_f, half], d_f, &mut r));
        p.add("mlp1.b", Tensor::zeros(&[half]));
        p.add("mlp2.w", Tensor::uniform_fan_in(&[half, 2], half, &mut r));
        p.add("mlp2.b", Tensor::zeros(&[2]));
        if ablation == Ablation::NoGraph {
            *p.get_mut(wg) = Tensor::zeros(&[d_h, d_f]);
            p.set_trainable(wg, false);
        }
        Ok(Self { shape, ablation, params: p, trained: false })
    }

    fn id(&self, name: &str) -> ParamId {
        self.params.id(name).expect("cafn parameter")
    }

    fn var(&self, bound: &Bound, name: &str) -> Var {
        bound.var(self.id(name))
    }

    fn check(&self, input: &AccountInput) -> Result<(), CafnError> {
        let d_s = input.semantic.cols();
        if d_s != self.shape.d_s {
            return Err(CafnError::Dim { what: "token representations", expected: self.shape.d_s, got: d_s });
        }
        if input.graph.len() != self.shape.d_h {
            return Err(CafnError::Dim { what: "graph embedding", expected: self.shape.d_h, got: input.graph.len() });
        }
        Ok(())
    }

    /// `(A Wq) Wk^T / sqrt(d)`; scores against raw keys then equal the
    /// scaled `Q K^T` of the attention.
    fn queries(&self, tape: &mut Tape, bound: &Bound, prefix: &str, tokens: &str, d: usize) -> Result<Var, TensorError> {
        let q = tape.matmul(self.var(bound, tokens), self.var(bound, &format!("{prefix}.q")))?;
        let qk = tape.matmul_t(q, false, self.var(bound, &format!("{prefix}.k")), true)?;
        tape.scale(qk, 1.0 / (d as f64).sqrt())
    }

    /// Attention weights over the rows of `keys`.
    fn weights(tape: &mut Tape, queries: Var, keys: Var) -> Result<Var, TensorError> {
        let scores = tape.matmul_t(queries, false, keys, true)?;
        tape.softmax_rows(scores, 1.0)
    }

    fn semantic_input(&self, tape: &mut Tape, input: &AccountInput) -> Var {
        if self.ablation == Ablation::NoLm {
            tape.leaf(&Tensor::zeros(&[1, self.shape.d_s]))
        } else {
            tape.leaf(&input.semantic)
        }
    }

    fn classifier(&self, tape: &mut Tape, bound: &Bound, f: Var) -> Result<Var, TensorError> {
        let h = tape.matmul(f, self.var(bound, "mlp1.w"))?;
        let h = tape.add(h, self.var(bound, "mlp1.b"))?;
        let h = tape.relu(h)?;
        let o = tape.matmul(h, self.var(bound, "mlp2.w"))?;
        tape.add(o, self.var(bound, "mlp2.b"))
    }

    /// Batched forward pass; rows of every output follow `batch` order
    /// (`zs`/`zsg` stack `k_s` rows per account).
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, batch: &[&AccountInput]) -> Result<Forward, CafnError> {
        if batch.is_empty() {
            return Err(CafnError::Empty);
        }
        for a in batch {
            self.check(a)?;
        }
        let CafnShape { d_s, d_h, d_f, k_s, .. } = self.shape;
        let b = batch.len();
        let xg = tape.constant(vec![b, d_h], batch.iter().flat_map(|a| a.graph.iter().copied()).collect())?;
        let ws = self.var(bound, "fuse.ws");
        let wg = self.var(bound, "fuse.wg");

        if matches!(self.ablation, Ablation::Add | Ablation::Linear) {
            let means = batch
                .iter()
                .map(|a| {
                    let s = self.semantic_input(tape, a);
                    tape.col_means(s)
                })
                .collect::<Result<Vec<_>, _>>()?;
            let zs = tape.concat_rows(&means)?;
            let sp = tape.matmul(zs, ws)?;
            let gp = tape.matmul(xg, wg)?;
            let mut f = tape.add(sp, gp)?;
            if self.ablation == Ablation::Linear {
                f = tape.add(f, self.var(bound, "fuse.b"))?;
                f = tape.tanh(f)?;
            }
            let logits = self.classifier(tape, bound, f)?;
            return Ok(Forward { zs, zsg: f, pooled: f, logits });
        }

        let qs = self.queries(tape, bound, "sem", "agg_tokens", d_s)?;
        let mut attended = Vec::with_capacity(b);
        for a in batch {
            let s = self.semantic_input(tape, a);
            let p = Self::weights(tape, qs, s)?;
            attended.push(tape.matmul(p, s)?);
        }
        let stacked = tape.concat_rows(&attended)?;
        let zs = tape.matmul(stacked, self.var(bound, "sem.v"))?;

        let rep: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, k_s)).collect();
        let xrep = tape.gather_rows(xg, &rep)?;
        let sp = tape.matmul(zs, ws)?;
        let gp = tape.matmul(xrep, wg)?;
        let pre = tape.add(sp, gp)?;
        let pre = tape.add(pre, self.var(bound, "fuse.b"))?;
        let zsg = tape.tanh(pre)?;

        // mean over fusion-token rows commutes with the value projection
        let qf = self.queries(tape, bound, "fus", "fusion_tokens", d_f)?;
        let mut pooled = Vec::with_capacity(b);
        for i in 0..b {
            let z = tape.slice_rows(zsg, i * k_s, (i + 1) * k_s)?;
            let p = Self::weights(tape, qf, z)?;
            let pbar = tape.col_means(p)?;
            pooled.push(tape.matmul(pbar, z)?);
        }
        let pooled = tape.concat_rows(&pooled)?;
        let f = tape.matmul(pooled, self.var(bound, "fus.v"))?;
        let logits = self.classifier(tape, bound, f)?;
        Ok(Forward { zs, zsg, pooled: f, logits })
    }

    /// Compressed token representations `Z^s` of one account.
    pub fn aggregate_semantic(&self, s: &Tensor) -> Result<Tensor, CafnError> {
        let (r, c) = s.dims2();
        if c != self.shape.d_s {
            return Err(CafnError::Dim { what: "token representations", expected: self.shape.d_s, got: c });
        }
        if r == 0 {
            return Err(CafnError::Empty);
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let qs = self.queries(&mut tape, &bound, "sem", "agg_tokens", self.shape.d_s)?;
        let sv = tape.leaf(s);
        let p = Self::weights(&mut tape, qs, sv)?;
        let ps = tape.matmul(p, sv)?;
        let zs = tape.matmul(ps, self.var(&bound, "sem.v"))?;
        Ok(tape.value(zs))
    }

    /// `tanh(Z^s W_s + x W_g + b)` with the graph embedding broadcast over rows.
    pub fn cross_perspective_fuse(&self, zs: &Tensor, graph: &[f64]) -> Result<Tensor, CafnError> {
        let (r, c) = zs.dims2();
        if c != self.shape.d_s {
            return Err(CafnError::Dim { what: "Z^s", expected: self.shape.d_s, got: c });
        }
        if graph.len() != self.shape.d_h {
            return Err(CafnError::Dim { what: "graph embedding", expected: self.shape.d_h, got: graph.len() });
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let z = tape.leaf(zs);
        let x = tape.constant(vec![1, graph.len()], graph.to_vec())?;
        let xrep = tape.gather_rows(x, &vec![0; r])?;
        let sp = tape.matmul(z, self.var(&bound, "fuse.ws"))?;
        let gp = tape.matmul(xrep, self.var(&bound, "fuse.wg"))?;
        let pre = tape.add(sp, gp)?;
        let pre = tape.add(pre, self.var(&bound, "fuse.b"))?;
        let out = tape.tanh(pre)?;
        Ok(tape.value(out))
    }

    /// Fusion-token attention over `Z^sg` followed by mean pooling.
    pub fn fuse(&self, zsg: &Tensor) -> Result<Vec<f64>, CafnError> {
        let (r, c) = zsg.dims2();
        if c != self.shape.d_f {
            return Err(CafnError::Dim { what: "Z^sg", expected: self.shape.d_f, got: c });
        }
        if r == 0 {
            return Err(CafnError::Empty);
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let qf = self.queries(&mut tape, &bound, "fus", "fusion_tokens", self.shape.d_f)?;
        let z = tape.leaf(zsg);
        let p = Self::weights(&mut tape, qf, z)?;
        let out = tape.matmul(p, z)?;
        let out = tape.matmul(out, self.var(&bound, "fus.v"))?;
        let f = tape.col_means(out)?;
        Ok(tape.data(f).to_vec())
    }

    /// Class probabilities `[normal, fraud]` for a pooled vector.
    pub fn classify(&self, pooled: &[f64]) -> Result<[f64; 2], CafnError> {
        if pooled.len() != self.shape.d_f {
            return Err(CafnError::Dim { what: "pooled vector", expected: self.shape.d_f, got: pooled.len() });
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let f = tape.constant(vec![1, pooled.len()], pooled.to_vec())?;
        let l = self.classifier(&mut tape, &bound, f)?;
        let d = tape.data(l);
        Ok(softmax2([d[0], d[1]]))
    }

    /// Every intermediate of one account.
    pub fn fuse_account(&self, account: &str, input: &AccountInput) -> Result<FusedAccount, CafnError> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let fw = self.forward(&mut tape, &bound, &[input])?;
        let l = tape.data(fw.logits);
        Ok(FusedAccount {
            account: account.to_string(),
            zs: tape.value(fw.zs),
            zsg: tape.value(fw.zsg),
            pooled: tape.data(fw.pooled).to_vec(),
            probs: softmax2([l[0], l[1]]),
        })
    }

    /// Class probabilities for every input, evaluated in parallel chunks.
    pub fn predict_proba(&self, inputs: &[AccountInput]) -> Result<Vec<[f64; 2]>, CafnError> {
        const CHUNK: usize = 64;
        let chunks: Vec<&[AccountInput]> = inputs.chunks(CHUNK).collect();
        let parts = par_map(chunks.len(), |c| -> Result<Vec<[f64; 2]>, CafnError> {
            let batch: Vec<&AccountInput> = chunks[c].iter().collect();
            let mut tape = Tape::new();
            let bound = self.params.bind(&mut tape, false);
            let fw = self.forward(&mut tape, &bound, &batch)?;
            Ok(tape.data(fw.logits).chunks(2).map(|l| softmax2([l[0], l[1]])).collect())
        });
        let mut out = Vec::with_capacity(inputs.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    /// Argmax labels (fraud = 1).
    pub fn predict(&self, inputs: &[AccountInput]) -> Result<Vec<usize>, CafnError> {
        Ok(self.predict_proba(inputs)?.iter().map(|p| usize::from(p[1] > p[0])).collect())
    }

    pub fn save(&self, path: &Path) -> Result<(), CafnError> {
        let meta = CafnMeta { kind: "cafn".into(), shape: self.shape, ablation: self.ablation, trained: self.trained };
        let meta = serde_json::to_string(&meta).map_err(|e| CafnError::Meta(e.to_string()))?;
        checkpoint::write(path, &self.params, &meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CafnError> {
        let (params, meta) = checkpoint::read(path)?;
        let meta: CafnMeta = serde_json::from_str(&meta).map_err(|e| CafnError::Meta(e.to_string()))?;
        if meta.kind != "cafn" {
            return Err(CafnError::Meta(format!("expected a cafn checkpoint, found {}", meta.kind)));
        }
        let mut model = Cafn::new(meta.shape, meta.ablation, 0)?;
        if model.params.names() != params.names() {
            return Err(CafnError::Meta("parameter layout mismatch".into()));
        }
        for (dst, src) in model.params.tensors_mut().iter_mut().zip(params.tensors()) {
            if dst.shape() != src.shape() {
                return Err(CafnError::Meta("parameter shape mismatch".into()));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        model.trained = meta.trained;
        Ok(model)
    }
}

/// Inverse class-frequency weights `N / (2 N_c)`.
pub fn class_weights(labels: &[usize]) -> Result<[f64; 2], CafnError> {
    let mut counts = [0usize; 2];
    for &y in labels {
        *counts.get_mut(y).ok_or(CafnError::Label(y))? += 1;
    }
    if counts.contains(&0) {
        return Err(CafnError::SingleClass);
    }
    let n = labels.len() as f64;
    Ok([n / (2.0 * counts[0] as f64), n / (2.0 * counts[1] as f64)])
}

/// `sum_i w_{y_i} * CE_i / sum_i w_{y_i}` over the rows of `logits`.
pub fn weighted_cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize], weights: [f64; 2]) -> Result<Var, CafnError> {
    if let Some(&bad) = labels.iter().find(|&&y| y > 1) {
        return Err(CafnError::Label(bad));
    }
    let lsm = tape.log_softmax_rows(logits)?;
    let picked = tape.pick_per_row(lsm, labels)?;
    let nll = tape.neg(picked)?;
    let w: Vec<f64> = labels.iter().map(|&y| weights[y]).collect();
    let total: f64 = w.iter().sum();
    let wv = tape.constant(vec![labels.len()], w)?;
    let weighted = tape.mul(nll, wv)?;
    let s = tape.sum(weighted)?;
    let denom = tape.constant(vec![], vec![total])?;
    Ok(tape.div(s, denom)?)
}

/// Binary classification metrics with fraud (1) as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub balanced_accuracy: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Precision was set to 0 because nothing was predicted positive.
    pub no_positive_predictions: bool,
}

pub fn metrics(pred: &[usize], labels: &[usize]) -> Result<Metrics, CafnError> {
    if pred.len() != labels.len() {
        return Err(CafnError::Length(pred.len(), labels.len()));
    }
    if pred.is_empty() {
        return Err(CafnError::Empty);
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&p, &y) in pred.iter().zip(labels) {
        match (p, y) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 0) => tn += 1,
            (0, 1) => fn_ += 1,
            (p, y) => return Err(CafnError::Label(p.max(y))),
        }
    }
    let ratio = |a: usize, b: usize| if a + b == 0 { 0.0 } else { a as f64 / (a + b) as f64 };
    let precision = ratio(tp, fp);
    let recall = ratio(tp, fn_);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    let tnr = ratio(tn, fp);
    Ok(Metrics {
        precision,
        recall,
        f1,
        balanced_accuracy: (recall + tnr) / 2.0,
        tp,
        fp,
        tn,
        fn_,
        no_positive_predictions: tp + fp == 0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CafnConfig {
    pub k_s: usize,
    pub k_f: usize,
    pub d_f: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub class_weighting: bool,
    pub ablation: Ablation,
    pub seed: u64,
}

impl Default for CafnConfig {
    fn default() -> Self {
        Self {
            k_s: 8,
            k_f: 4,
            d_f: 64,
            lr: 1e-3,
            batch_size: 32,
            epochs: 100,
            patience: 10,
            class_weighting: true,
            ablation: Ablation::None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_f1: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct CafnOutcome {
    pub model: Cafn,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub class_weights: [f64; 2],
}

fn eval_loss(model: &Cafn, inputs: &[AccountInput], labels: &[usize], weights: [f64; 2]) -> Result<(f64, Vec<usize>), CafnError> {
    let probs = model.predict_proba(inputs)?;
    let (mut num, mut den) = (0.0, 0.0);
    for (p, &y) in probs.iter().zip(labels) {
        num -= weights[y] * p[y].max(f64::MIN_POSITIVE).ln();
        den += weights[y];
    }
    Ok((num / den, probs.iter().map(|p| usize::from(p[1] > p[0])).collect()))
}

/// Mini-batch training with class-weighted cross-entropy and early stopping
/// on validation F1 (ties broken by lower validation loss). The best epoch's
/// parameters are returned. An empty validation set selects on training data.
pub fn train(
    inputs: &[AccountInput],
    labels: &[usize],
    val: &[AccountInput],
    val_labels: &[usize],
    cfg: &CafnConfig,
) -> Result<CafnOutcome, CafnError> {
    if inputs.len() != labels.len() {
        return Err(CafnError::Length(inputs.len(), labels.len()));
    }
    if val.len() != val_labels.len() {
        return Err(CafnError::Length(val.len(), val_labels.len()));
    }
    let first = inputs.first().ok_or(CafnError::Empty)?;
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(CafnError::Config("batch size and learning rate must be positive".into()));
    }
    let computed = class_weights(labels)?;
    let weights = if cfg.class_weighting { computed } else { [1.0, 1.0] };
    let shape = CafnShape {
        d_s: first.semantic.cols(),
        d_h: first.graph.len(),
        d_f: cfg.d_f,
        k_s: cfg.k_s,
        k_f: cfg.k_f,
    };
    let mut model = Cafn::new(shape, cfg.ablation, cfg.seed)?;
    for a in inputs.iter().chain(val) {
        model.check(a)?;
    }
    let (sel_inputs, sel_labels) = if val.is_empty() { (inputs, labels) } else { (val, val_labels) };
    let mut adam = AdamState::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &model.params);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut shuffle = rng::stream(cfg.seed, "cafn-shuffle");
    let mut best = (model.params.clone(), f64::NEG_INFINITY, f64::INFINITY, 0usize);
    let mut history = Vec::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        let (mut total, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&AccountInput> = chunk.iter().map(|&i| &inputs[i]).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape, true);
            let step = model
                .forward(&mut tape, &bound, &batch)
                .and_then(|fw| weighted_cross_entropy(&mut tape, fw.logits, &ys, weights));
            let loss = match step {
                Ok(l) => l,
                Err(CafnError::Tensor(TensorError::NonFinite { .. })) => return Err(CafnError::Diverged(epoch)),
                Err(e) => return Err(e),
            };
            let g = tape.backward(loss)?;
            model.params.zero_grad();
            model.params.accumulate(&bound, &g, 1.0)?;
            adam.step(&mut model.params)?;
            total += tape.item(loss) * chunk.len() as f64;
            count += chunk.len();
        }
        if !model.params.all_finite() {
            return Err(CafnError::Diverged(epoch));
        }
        let (val_loss, pred) = eval_loss(&model, sel_inputs, sel_labels, weights)?;
        let val_f1 = metrics(&pred, sel_labels)?.f1;
        history.push(EpochRecord { epoch: epoch + 1, loss: total / count as f64, val_f1, val_loss });
        log::info!("cafn epoch {}: loss {:.5} val_f1 {:.4}", epoch + 1, total / count as f64, val_f1);
        if val_f1 > best.1 || (val_f1 == best.1 && val_loss < best.2) {
            best = (model.params.clone(), val_f1, val_loss, epoch + 1);
        } else if epoch + 1 - best.3 >= cfg.patience {
            break;
        }
    }
    model.params = best.0;
    model.trained = true;
    Ok(CafnOutcome { model, history, best_epoch: best.3, class_weights: weights })
}
