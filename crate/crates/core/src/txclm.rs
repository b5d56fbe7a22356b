//! Small bidirectional transformer encoder pretrained with masked-token
//! prediction plus a token-level contrastive term against a frozen copy of
//! its own initialization.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numcore::{checkpoint, AdamConfig, AdamState, Bound, ParamGrads, ParamSet, Tape, Tensor, TensorError, Var};
use crate::rng;
use crate::txcorpus::{CLS_ID, MASK_ID, PAD_ID, RESERVED, SEP_ID};

#[derive(Debug, Error)]
pub enum TxclmError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("sequence of {len} tokens exceeds max length {max}")]
    TooLong { len: usize, max: usize },
    #[error("d_model {d} is not divisible by {heads} heads")]
    Heads { d: usize, heads: usize },
    #[error("encoder has not been trained")]
    Untrained,
    #[error("need at least 2 non-special tokens, got {0}")]
    TooShort(usize),
    #[error("no trainable sentences in corpus")]
    EmptyCorpus,
    #[error("training diverged in epoch {epoch}")]
    Diverged { epoch: usize, last_good: Box<Encoder> },
    #[error("bad checkpoint metadata: {0}")]
    Meta(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderShape {
    pub vocab: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_seq_len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct EncoderMeta {
    kind: String,
    shape: EncoderShape,
    trained: bool,
}

/// Pre-LN transformer encoder with a masked-token head. There is no final
/// layer norm, so zero attention and feed-forward weights make the output
/// equal to the summed token and position embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub shape: EncoderShape,
    pub params: ParamSet,
    pub trained: bool,
}

struct LayerIds {
    ln1: (usize, usize),
    q: (usize, usize),
    k: (usize, usize),
    v: (usize, usize),
    o: (usize, usize),
    ln2: (usize, usize),
    ff1: (usize, usize),
    ff2: (usize, usize),
}

impl Encoder {
    pub fn new(shape: EncoderShape, seed: u64) -> Result<Self, TxclmError> {
        let EncoderShape { vocab, d_model: d, layers, heads, max_seq_len } = shape;
        if heads == 0 || d % heads != 0 {
            return Err(TxclmError::Heads { d, heads });
        }
        let mut r = rng::stream(seed, "txclm-init");
        let mut p = ParamSet::new();
        p.add("tok_emb", Tensor::uniform_fan_in(&[vocab, d], d, &mut r));
        p.add("pos_emb", Tensor::uniform_fan_in(&[max_seq_len, d], d, &mut r));
        for l in 0..layers {
            p.add(format!("l{l}.ln1.g"), Tensor::filled(&[d], 1.0));
            p.add(format!("l{l}.ln1.b"), Tensor::zeros(&[d]));
            for name in ["q", "k", "v", "o"] {
                p.add(format!("l{l}.{name}.w"), Tensor::uniform_fan_in(&[d, d], d, &mut r));
                p.add(format!("l{l}.{name}.b"), Tensor::zeros(&[d]));
            }
            p.add(format!("l{l}.ln2.g"), Tensor::filled(&[d], 1.0));
            p.add(format!("l{l}.ln2.b"), Tensor::zeros(&[d]));
            p.add(format!("l{l}.ff1.w"), Tensor::uniform_fan_in(&[d, 4 * d], d, &mut r));
            p.add(format!("l{l}.ff1.b"), Tensor::zeros(&[4 * d]));
            p.add(format!("l{l}.ff2.w"), Tensor::uniform_fan_in(&[4 * d, d], 4 * d, &mut r));
            p.add(format!("l{l}.ff2.b"), Tensor::zeros(&[d]));
        }
        p.add("head.w", Tensor::uniform_fan_in(&[d, vocab], d, &mut r));
        p.add("head.b", Tensor::zeros(&[vocab]));
        Ok(Self { shape, params: p, trained: false })
    }

    fn idx(&self, name: &str) -> usize {
        self.params.names().iter().position(|n| n == name).expect("encoder parameter")
    }

    fn layer_ids(&self, l: usize) -> LayerIds {
        let pair = |n: &str| (self.idx(&format!("l{l}.{n}.w")), self.idx(&format!("l{l}.{n}.b")));
        let ln = |n: &str| (self.idx(&format!("l{l}.{n}.g")), self.idx(&format!("l{l}.{n}.b")));
        LayerIds {
            ln1: ln("ln1"),
            q: pair("q"),
            k: pair("k"),
            v: pair("v"),
            o: pair("o"),
            ln2: ln("ln2"),
            ff1: pair("ff1"),
            ff2: pair("ff2"),
        }
    }

    fn check_ids(&self, ids: &[usize]) -> Result<(), TxclmError> {
        if ids.len() > self.shape.max_seq_len {
            return Err(TxclmError::TooLong { len: ids.len(), max: self.shape.max_seq_len });
        }
        if ids.is_empty() {
            return Err(TxclmError::TooShort(0));
        }
        match ids.iter().find(|&&i| i >= self.shape.vocab) {
            Some(&id) => Err(TxclmError::TokenOutOfRange { id, vocab: self.shape.vocab }),
            None => Ok(()),
        }
    }

    /// Contextual representations `[n × d]` recorded on `tape`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, ids: &[usize]) -> Result<Var, TxclmError> {
        self.check_ids(ids)?;
        let vars = |i: usize| bound_var(bound, i);
        let n = ids.len();
        let d = self.shape.d_model;
        let heads = self.shape.heads;
        let dh = d / heads;
        let tok = tape.gather_rows(vars(self.idx("tok_emb")), ids)?;
        let pos = tape.slice_rows(vars(self.idx("pos_emb")), 0, n)?;
        let mut x = tape.add(tok, pos)?;
        for l in 0..self.shape.layers {
            let ids = self.layer_ids(l);
            let lin = |tape: &mut Tape, x: Var, (w, b): (usize, usize)| -> Result<Var, TensorError> {
                let y = tape.matmul(x, vars(w))?;
                tape.add(y, vars(b))
            };
            let h = tape.layer_norm(x, vars(ids.ln1.0), vars(ids.ln1.1))?;
            let q = lin(tape, h, ids.q)?;
            let k = lin(tape, h, ids.k)?;
            let v = lin(tape, h, ids.v)?;
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = tape.slice_cols(q, hd * dh, (hd + 1) * dh)?;
                let kh = tape.slice_cols(k, hd * dh, (hd + 1) * dh)?;
                let vh = tape.slice_cols(v, hd * dh, (hd + 1) * dh)?;
                let s = tape.matmul_t(qh, false, kh, true)?;
                let s = tape.scale(s, 1.0 / (dh as f64).sqrt())?;
                let p = tape.softmax_rows(s, 1.0)?;
                outs.push(tape.matmul(p, vh)?);
            }
            let att = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
            let att = lin(tape, att, ids.o)?;
            x = tape.add(x, att)?;
            let h = tape.layer_norm(x, vars(ids.ln2.0), vars(ids.ln2.1))?;
            let f = lin(tape, h, ids.ff1)?;
            let f = tape.relu(f)?;
            let f = lin(tape, f, ids.ff2)?;
            x = tape.add(x, f)?;
        }
        Ok(x)
    }

    /// Masked-token logits `[m × |V|]` for the given rows of `h`.
    pub fn mlm_logits(&self, tape: &mut Tape, bound: &Bound, h: Var, rows: &[usize]) -> Result<Var, TxclmError> {
        let g = tape.gather_rows(h, rows)?;
        let z = tape.matmul(g, bound_var(bound, self.idx("head.w")))?;
        Ok(tape.add(z, bound_var(bound, self.idx("head.b")))?)
    }

    /// Inference-mode representations.
    pub fn encode(&self, ids: &[usize]) -> Result<Tensor, TxclmError> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let h = self.forward(&mut tape, &bound, ids)?;
        Ok(tape.value(h))
    }

    pub fn save(&self, path: &Path) -> Result<(), TxclmError> {
        let meta = EncoderMeta { kind: "txclm".into(), shape: self.shape, trained: self.trained };
        let meta = serde_json::to_string(&meta).map_err(|e| TxclmError::Meta(e.to_string()))?;
        checkpoint::write(path, &self.params, &meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TxclmError> {
        let (params, meta) = checkpoint::read(path)?;
        let meta: EncoderMeta = serde_json::from_str(&meta).map_err(|e| TxclmError::Meta(e.to_string()))?;
        if meta.kind != "txclm" {
            return Err(TxclmError::Meta(format!("expected a txclm checkpoint, found {}", meta.kind)));
        }
        let expect = Encoder::new(meta.shape, 0)?;
        if expect.params.names() != params.names() {
            return Err(TxclmError::Meta("parameter layout mismatch".into()));
        }
        Ok(Self { shape: meta.shape, params, trained: meta.trained })
    }
}

fn bound_var(bound: &Bound, i: usize) -> Var {
    bound.var(crate::numcore::ParamId(i))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskAction {
    Mask,
    Random,
    Keep,
}

/// Positions chosen for masked-token prediction and what was done to them.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MaskPlan {
    pub positions: Vec<usize>,
    pub actions: Vec<MaskAction>,
    pub originals: Vec<usize>,
}

impl MaskPlan {
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }
}

fn maskable(id: usize) -> bool {
    id != CLS_ID && id != SEP_ID && id != PAD_ID
}

/// Masks `round(ratio · maskable)` positions with the 80/10/10 rule.
pub fn apply_mask<R: Rng + ?Sized>(ids: &[usize], ratio: f64, vocab: usize, rng: &mut R) -> (Vec<usize>, MaskPlan) {
    let ratio = ratio.clamp(0.0, 1.0);
    let candidates: Vec<usize> = (0..ids.len()).filter(|&i| maskable(ids[i])).collect();
    let m = (ratio * candidates.len() as f64).round() as usize;
    let mut positions: Vec<usize> = candidates.choose_multiple(rng, m).copied().collect();
    positions.sort_unstable();
    let mut out = ids.to_vec();
    let mut plan = MaskPlan::default();
    for &p in &positions {
        let u: f64 = rng.gen();
        let action = if u < 0.8 {
            out[p] = MASK_ID;
            MaskAction::Mask
        } else if u < 0.9 {
            out[p] = if vocab > RESERVED.len() { rng.gen_range(RESERVED.len()..vocab) } else { MASK_ID };
            MaskAction::Random
        } else {
            MaskAction::Keep
        };
        plan.actions.push(action);
        plan.originals.push(ids[p]);
    }
    plan.positions = positions;
    (out, plan)
}

/// Mean negative log-likelihood of `targets` under `logits`. Returns a
/// constant zero and `true` when there is nothing to predict.
pub fn mlm_loss(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<(Var, bool), TensorError> {
    if targets.is_empty() {
        return Ok((tape.constant(vec![1], vec![0.0])?, true));
    }
    let (m, _) = tape.dims2(logits);
    if m != targets.len() {
        return Err(TensorError::ShapeMismatch { op: "mlm_loss", lhs: vec![m], rhs: vec![targets.len()] });
    }
    let lp = tape.log_softmax_rows(logits)?;
    let picked = tape.pick_per_row(lp, targets)?;
    let mean = tape.mean(picked)?;
    Ok((tape.neg(mean)?, false))
}

/// Token-level contrastive loss. For each query row `positions[i]` of
/// `enhanced`, the logits are cosine similarities to every row of `anchor`
/// divided by `tau`, and the target is the anchor row at the same position.
/// Gradients never reach `anchor` when it is recorded as a constant.
pub fn token_contrastive_loss(tape: &mut Tape, enhanced: Var, anchor: Var, positions: &[usize], tau: f64) -> Result<Var, TensorError> {
    if tau <= 0.0 || tau.is_nan() {
        return Err(TensorError::Temperature(tau));
    }
    if positions.is_empty() {
        return tape.constant(vec![1], vec![0.0]);
    }
    if tape.shape(enhanced) != tape.shape(anchor) {
        return Err(TensorError::ShapeMismatch {
            op: "token_contrastive_loss",
            lhs: tape.shape(enhanced).to_vec(),
            rhs: tape.shape(anchor).to_vec(),
        });
    }
    let q = tape.gather_rows(enhanced, positions)?;
    let q = tape.normalize_rows(q)?;
    let a = tape.normalize_rows(anchor)?;
    let logits = tape.matmul_t(q, false, a, true)?;
    let logits = tape.scale(logits, 1.0 / tau)?;
    let lp = tape.log_softmax_rows(logits)?;
    let picked = tape.pick_per_row(lp, positions)?;
    let mean = tape.mean(picked)?;
    tape.neg(mean)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TxclmConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_seq_len: usize,
    pub mask_ratio: f64,
    pub tau: f64,
    /// Weight of the contrastive term; 0 gives masked-token training alone.
    pub contrastive_weight: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TxclmConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            layers: 2,
            heads: 4,
            max_seq_len: 128,
            mask_ratio: 0.15,
            tau: 0.1,
            contrastive_weight: 1.0,
            epochs: 10,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mlm: f64,
    /// Mean-reduced contrastive loss.
    pub ta: f64,
    /// Contrastive loss summed over masked tokens, averaged over sentences.
    pub ta_sum: f64,
    pub combined: f64,
}

pub fn write_log_csv<W: std::io::Write>(mut w: W, logs: &[EpochLog]) -> std::io::Result<()> {
    writeln!(w, "epoch,L_MLM,L_Ta,L_Ta_sum,combined")?;
    for l in logs {
        writeln!(w, "{},{},{},{},{}", l.epoch, l.mlm, l.ta, l.ta_sum, l.combined)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub encoder: Encoder,
    /// Frozen copy of the initialization.
    pub anchor: Encoder,
    pub logs: Vec<EpochLog>,
}

struct SentenceLoss {
    mlm: f64,
    ta: f64,
    masked: usize,
    grads: ParamGrads,
}

fn sentence_step(
    enc: &Encoder,
    ids: &[usize],
    anchor_rows: Option<&Tensor>,
    cfg: &TxclmConfig,
    epoch: usize,
    index: usize,
) -> Result<SentenceLoss, TxclmError> {
    let mut r = rng::substream(cfg.seed, "txclm-mask", &[epoch as u64, index as u64]);
    let (masked, plan) = apply_mask(ids, cfg.mask_ratio, enc.shape.vocab, &mut r);
    let mut tape = Tape::new();
    let bound = enc.params.bind(&mut tape, true);
    let h = enc.forward(&mut tape, &bound, &masked)?;
    let logits = enc.mlm_logits(&mut tape, &bound, h, &plan.positions)?;
    let (mlm, _) = mlm_loss(&mut tape, logits, &plan.originals)?;
    let mut loss = mlm;
    let mut ta_value = 0.0;
    if let (Some(a), true) = (anchor_rows, cfg.contrastive_weight != 0.0) {
        // candidates exclude the [CLS] row
        let n = ids.len();
        let body = tape.slice_rows(h, 1, n)?;
        let anchor = tape.leaf(a);
        let rows: Vec<usize> = plan.positions.iter().map(|p| p - 1).collect();
        let ta = token_contrastive_loss(&mut tape, body, anchor, &rows, cfg.tau)?;
        ta_value = tape.item(ta);
        let weighted = tape.scale(ta, cfg.contrastive_weight)?;
        loss = tape.add(loss, weighted)?;
    }
    let g = tape.backward(loss)?;
    Ok(SentenceLoss { mlm: tape.item(mlm), ta: ta_value, masked: plan.len(), grads: enc.params.grads_of(&bound, &g) })
}

/// Trains an encoder on token-id sentences. Sentences with fewer than two
/// tokens carry nothing to mask and are skipped.
pub fn pretrain(sentences: &[Vec<usize>], vocab: usize, cfg: &TxclmConfig) -> Result<PretrainOutcome, TxclmError> {
    let shape = EncoderShape {
        vocab,
        d_model: cfg.d_model,
        layers: cfg.layers,
        heads: cfg.heads,
        max_seq_len: cfg.max_seq_len,
    };
    let mut enc = Encoder::new(shape, cfg.seed)?;
    let anchor = enc.clone();
    let usable: Vec<usize> = (0..sentences.len()).filter(|&i| sentences[i].len() >= 2).collect();
    if usable.is_empty() {
        return Err(TxclmError::EmptyCorpus);
    }
    for &i in &usable {
        enc.check_ids(&sentences[i])?;
    }
    // anchor sees the unmasked sentence and never changes, so its rows are fixed
    let anchor_rows: Vec<Option<Tensor>> = if cfg.contrastive_weight != 0.0 {
        let rows = crate::par_map(usable.len(), |j| {
            let ids = &sentences[usable[j]];
            anchor.encode(ids).and_then(|t| {
                let d = t.cols();
                Ok(Tensor::matrix(ids.len() - 1, d, t.data()[d..].to_vec())?)
            })
        });
        rows.into_iter().map(|r| r.map(Some)).collect::<Result<_, _>>()?
    } else {
        vec![None; usable.len()]
    };

    let mut adam = AdamState::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &enc.params);
    let mut logs = Vec::with_capacity(cfg.epochs);
    let batch = cfg.batch_size.max(1);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..usable.len()).collect();
        order.shuffle(&mut rng::substream(cfg.seed, "txclm-shuffle", &[epoch as u64]));
        let (mut mlm_sum, mut ta_sum, mut ta_tok_sum) = (0.0, 0.0, 0.0);
        let last_good = enc.clone();
        for chunk in order.chunks(batch) {
            let results = crate::par_map(chunk.len(), |j| {
                let k = chunk[j];
                sentence_step(&enc, &sentences[usable[k]], anchor_rows[k].as_ref(), cfg, epoch, usable[k])
            });
            enc.params.zero_grad();
            for res in results {
                let s = match res {
                    Ok(s) => s,
                    Err(TxclmError::Tensor(TensorError::NonFinite { .. })) => {
                        return Err(TxclmError::Diverged { epoch, last_good: Box::new(last_good) })
                    }
                    Err(e) => return Err(e),
                };
                mlm_sum += s.mlm;
                ta_sum += s.ta;
                ta_tok_sum += s.ta * s.masked as f64;
                enc.params.accumulate_flat(&s.grads, 1.0 / chunk.len() as f64)?;
            }
            adam.step(&mut enc.params)?;
            if !enc.params.all_finite() {
                return Err(TxclmError::Diverged { epoch, last_good: Box::new(last_good) });
            }
        }
        let n = usable.len() as f64;
        let entry = EpochLog {
            epoch: epoch + 1,
            mlm: mlm_sum / n,
            ta: ta_sum / n,
            ta_sum: ta_tok_sum / n,
            combined: (mlm_sum + cfg.contrastive_weight * ta_sum) / n,
        };
        if !entry.combined.is_finite() {
            return Err(TxclmError::Diverged { epoch, last_good: Box::new(last_good) });
        }
        log::info!(
            "txclm epoch {}: mlm {:.4} ta {:.4} combined {:.4}",
            entry.epoch,
            entry.mlm,
            entry.ta,
            entry.combined
        );
        logs.push(entry);
    }
    enc.trained = true;
    Ok(PretrainOutcome { encoder: enc, anchor, logs })
}

/// Token-level representation matrix `S` of one sentence.
pub fn account_embedding(enc: &Encoder, ids: &[usize]) -> Result<Tensor, TxclmError> {
    if !enc.trained {
        return Err(TxclmError::Untrained);
    }
    enc.encode(ids)
}

/// Mean pairwise cosine between distinct rows.
pub fn mean_pairwise_cosine(rows: &[&[f64]]) -> Result<f64, TxclmError> {
    let n = rows.len();
    if n < 2 {
        return Err(TxclmError::TooShort(n));
    }
    let unit: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            r.iter().map(|x| x / norm).collect()
        })
        .collect();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                total += unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
    Ok(total / (n * (n - 1)) as f64)
}

/// Self-similarity of a sentence over its non-special tokens.
pub fn self_similarity(enc: &Encoder, ids: &[usize]) -> Result<f64, TxclmError> {
    let h = enc.encode(ids)?;
    let rows: Vec<&[f64]> = (0..ids.len()).filter(|&i| ids[i] >= RESERVED.len()).map(|i| h.row(i)).collect();
    mean_pairwise_cosine(&rows)
}
