//! End-to-end orchestration with cached stage outputs, reports and manifests.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::{DataSource, ExperimentConfig, PipelineAblation, SplitStrategy};
use super::io::{write_embeddings_bin, write_embeddings_csv, write_labels, RunLock};
use super::split::{split_components, split_random, Part, Split};
use super::synth::synth_generate;
use super::HarnessError;
use crate::cafn::{self, AccountInput, Cafn, Metrics};
use crate::graphbuild::{assemble_features, build_graph, read_edge_list, AccountGraph, NodeFeatureMatrix};
use crate::labor::{NeighborMode, Neighborhoods};
use crate::magae::{self, Magae};
use crate::numcore::{checkpoint, Tensor};
use crate::txclm::{self, Encoder};
use crate::txcorpus::{
    build_sentence, build_vocab, corpus_tokens, group_by_account, parse_transactions, parse_transactions_csv, write_corpus,
    write_jsonl, Address, TransactionRecord, TransactionSentence, Vocabulary,
};
use crate::{par_map, rng};

pub const STAGES: [&str; 8] = ["load", "corpus", "split", "pretrain-lm", "features", "pretrain-gae", "fuse-train", "evaluate"];

/// Transactions, labels and the account graph of one experiment.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub transfers: Vec<TransactionRecord>,
    pub by_account: BTreeMap<Address, Vec<TransactionRecord>>,
    pub labels: BTreeMap<Address, u8>,
    pub graph: AccountGraph,
    pub rejected: usize,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub sentences: BTreeMap<Address, TransactionSentence>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub ablation: String,
    /// Keyed by `train`, `val`, `test`.
    pub metrics: BTreeMap<String, Metrics>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub class_weights: [f64; 2],
}

impl Report {
    pub fn test(&self) -> &Metrics {
        &self.metrics["test"]
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "split,Precision,Recall,F1,BAcc,TP,FP,TN,FN")?;
        for p in Part::ALL {
            if let Some(m) = self.metrics.get(p.name()) {
                writeln!(
                    w,
                    "{},{:.6},{:.6},{:.6},{:.6},{},{},{},{}",
                    p.name(),
                    m.precision,
                    m.recall,
                    m.f1,
                    m.balanced_accuracy,
                    m.tp,
                    m.fp,
                    m.tn,
                    m.fn_
                )?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub stage: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub ablation: String,
    /// Stages the run executed, in order.
    pub stages: Vec<String>,
    /// Parameter checksums of every trained model.
    pub checksums: BTreeMap<String, String>,
    pub report: Option<Report>,
    pub failure: Option<Failure>,
    pub started_at: u64,
    pub finished_at: u64,
}

impl Manifest {
    /// Copy with timestamps cleared, for reproducibility comparisons.
    pub fn without_timestamps(&self) -> Manifest {
        Manifest { started_at: 0, finished_at: 0, ..self.clone() }
    }
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

struct StageError {
    stage: &'static str,
    error: HarnessError,
}

trait AtStage<T> {
    fn at(self, stage: &'static str) -> Result<T, StageError>;
}

impl<T, E: Into<HarnessError>> AtStage<T> for Result<T, E> {
    fn at(self, stage: &'static str) -> Result<T, StageError> {
        self.map_err(|e| StageError { stage, error: e.into() })
    }
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset, HarnessError> {
    let open = |p: &Path| File::open(p).map(BufReader::new);
    let read_labels = |p: &Path| super::io::read_labels(open(p)?);
    let (transfers, labels, rejected) = match &cfg.data {
        DataSource::Synthetic => {
            let s = synth_generate(&cfg.synthetic, cfg.seed)?;
            (s.transfers, s.labels, 0)
        }
        DataSource::Jsonl { path, labels } => {
            let p = parse_transactions(open(path)?)?;
            (p.transfers, read_labels(labels)?, p.rejects.len())
        }
        DataSource::Csv { path, labels } => {
            let p = parse_transactions_csv(open(path)?)?;
            (p.transfers, read_labels(labels)?, p.rejects.len())
        }
        DataSource::EdgeList { path, labels } => {
            let graph = read_edge_list(open(path)?)?;
            return Ok(Dataset { transfers: Vec::new(), by_account: BTreeMap::new(), labels: read_labels(labels)?, graph, rejected: 0 });
        }
    };
    if rejected > 0 {
        log::warn!("{rejected} malformed transaction records skipped");
    }
    let graph = build_graph(&transfers)?;
    let by_account = group_by_account(&transfers);
    Ok(Dataset { transfers, by_account, labels, graph, rejected })
}

/// Vocabulary and sentences of every account with a history; `None` when
/// the source has no per-transaction records.
pub fn build_corpus(
    by_account: &BTreeMap<Address, Vec<TransactionRecord>>,
    max_seq_len: usize,
    min_freq: usize,
) -> Result<Option<Corpus>, HarnessError> {
    if by_account.is_empty() {
        return Ok(None);
    }
    let tokens = corpus_tokens(by_account, max_seq_len)?;
    let lists: Vec<Vec<String>> = tokens.iter().map(|(_, t, _)| t.clone()).collect();
    let vocab = build_vocab(&lists, min_freq)?;
    let sentences = by_account
        .iter()
        .map(|(a, recs)| Ok((a.clone(), build_sentence(a, recs, max_seq_len, &vocab)?)))
        .collect::<Result<_, HarnessError>>()?;
    Ok(Some(Corpus { vocab, sentences }))
}

pub fn make_split(cfg: &ExperimentConfig, data: &Dataset) -> Result<Split, HarnessError> {
    match cfg.split.strategy {
        SplitStrategy::Random => split_random(&data.labels, cfg.split.ratios, cfg.seed),
        SplitStrategy::Components => {
            split_components(&data.graph, &data.labels, cfg.split.ratios, cfg.seed, cfg.split.downsample_benign)
        }
    }
}

/// Trains the language model on the labeled accounts' sentences.
pub fn pretrain_lm(cfg: &ExperimentConfig, corpus: &Corpus, labels: &BTreeMap<Address, u8>, contrastive: bool) -> Result<txclm::PretrainOutcome, HarnessError> {
    let sentences: Vec<Vec<usize>> = labels.keys().filter_map(|a| corpus.sentences.get(a)).map(|s| s.ids.clone()).collect();
    let mut c = cfg.txclm.clone();
    if !contrastive {
        c.contrastive_weight = 0.0;
    }
    Ok(txclm::pretrain(&sentences, corpus.vocab.len(), &c)?)
}

/// Token representations of each labeled account (degenerate accounts get none).
pub fn semantic_rows(enc: &Encoder, corpus: &Corpus, accounts: &[Address]) -> Result<BTreeMap<Address, Tensor>, HarnessError> {
    let rows = par_map(accounts.len(), |i| match corpus.sentences.get(&accounts[i]) {
        Some(s) if !s.is_degenerate() => txclm::account_embedding(enc, &s.ids).map(Some),
        _ => Ok(None),
    });
    let mut out = BTreeMap::new();
    for (a, r) in accounts.iter().zip(rows) {
        if let Some(t) = r? {
            out.insert(a.clone(), t);
        }
    }
    Ok(out)
}

pub fn node_features(cfg: &ExperimentConfig, data: &Dataset, split: &Split) -> Result<NodeFeatureMatrix, HarnessError> {
    let train: Vec<usize> = split.part(Part::Train).iter().filter_map(|a| data.graph.node_index(a)).collect();
    Ok(assemble_features(&data.graph, &data.by_account, &train, &cfg.features)?)
}

/// Standard-normal stand-in for the expert features.
pub fn random_features(n: usize, d: usize, seed: u64) -> Tensor {
    let mut r = rng::stream(seed, "random-features");
    let data = (0..n * d).map(|_| StandardNormal.sample(&mut r)).collect();
    Tensor::matrix(n, d, data).expect("shape matches")
}

pub fn pretrain_gae(cfg: &ExperimentConfig, graph: &AccountGraph, x: &Tensor) -> Result<(magae::MagaeOutcome, Tensor), HarnessError> {
    let nb = Neighborhoods::from_graph(graph, NeighborMode::In);
    let out = magae::pretrain(&nb, x, &cfg.magae)?;
    let emb = magae::infer_embeddings(&nb, x, &out.model)?;
    Ok((out, emb))
}

/// Fusion inputs for `accounts`, with zero stand-ins where a branch is absent.
pub fn fusion_inputs(
    accounts: &[Address],
    semantic: Option<&BTreeMap<Address, Tensor>>,
    d_s: usize,
    graph: &AccountGraph,
    embeddings: Option<&Tensor>,
    d_h: usize,
) -> Vec<AccountInput> {
    accounts
        .iter()
        .map(|a| {
            let s = semantic.and_then(|m| m.get(a)).cloned().unwrap_or_else(|| Tensor::zeros(&[0, d_s]));
            let g = match (embeddings, graph.node_index(a)) {
                (Some(e), Some(u)) => e.row(u).to_vec(),
                _ => vec![0.0; d_h],
            };
            AccountInput::new(s, g)
        })
        .collect()
}

pub fn evaluate(model: &Cafn, parts: &[(Part, &[AccountInput], Vec<usize>)]) -> Result<BTreeMap<String, Metrics>, HarnessError> {
    let mut out = BTreeMap::new();
    for (p, inputs, labels) in parts {
        if inputs.is_empty() {
            continue;
        }
        let pred = model.predict(inputs)?;
        out.insert(p.name().to_string(), cafn::metrics(&pred, labels)?);
    }
    Ok(out)
}

/// Runs pipeline variants, sharing stage outputs between them.
pub struct Pipeline {
    pub cfg: ExperimentConfig,
    out: Option<PathBuf>,
    data: Option<Dataset>,
    corpus: Option<Option<Corpus>>,
    split: Option<Split>,
    lm: HashMap<bool, (Encoder, BTreeMap<Address, Tensor>)>,
    features: Option<NodeFeatureMatrix>,
    gae: HashMap<bool, (Magae, Tensor)>,
    stages: Vec<&'static str>,
    checksums: BTreeMap<String, String>,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig) -> Self {
        Self {
            cfg,
            out: None,
            data: None,
            corpus: None,
            split: None,
            lm: HashMap::new(),
            features: None,
            gae: HashMap::new(),
            stages: Vec::new(),
            checksums: BTreeMap::new(),
        }
    }

    /// Writes every stage artifact into `dir`.
    pub fn with_output(mut self, dir: impl Into<PathBuf>) -> Self {
        self.out = Some(dir.into());
        self
    }

    fn artifact(&self, name: &str) -> Option<PathBuf> {
        self.out.as_ref().map(|d| d.join(name))
    }

    fn write_with(&self, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> Result<(), HarnessError>) -> Result<(), HarnessError> {
        if let Some(p) = self.artifact(name) {
            let mut w = BufWriter::new(File::create(p)?);
            f(&mut w)?;
            w.flush()?;
        }
        Ok(())
    }

    pub fn dataset(&mut self) -> Result<&Dataset, HarnessError> {
        if self.data.is_none() {
            let d = load_dataset(&self.cfg)?;
            if matches!(self.cfg.data, DataSource::Synthetic) {
                self.write_with("transactions.jsonl", |w| Ok(write_jsonl(w, &d.transfers)?))?;
            }
            self.write_with("labels.csv", |w| Ok(write_labels(w, &d.labels)?))?;
            self.write_with("edges.csv", |w| Ok(d.graph.write_edge_list(w)?))?;
            self.data = Some(d);
        }
        Ok(self.data.as_ref().expect("loaded"))
    }

    fn corpus(&mut self) -> Result<Option<&Corpus>, HarnessError> {
        if self.corpus.is_none() {
            let data = self.data.as_ref().expect("dataset before corpus");
            let c = build_corpus(&data.by_account, self.cfg.txclm.max_seq_len, self.cfg.corpus.min_freq)?;
            if let Some(c) = &c {
                self.write_with("vocab.txt", |w| Ok(c.vocab.write(w)?))?;
                let list: Vec<TransactionSentence> = c.sentences.values().cloned().collect();
                self.write_with("corpus.tsv", |w| Ok(write_corpus(w, &list)?))?;
            }
            self.corpus = Some(c);
        }
        Ok(self.corpus.as_ref().expect("built").as_ref())
    }

    fn split(&mut self) -> Result<&Split, HarnessError> {
        if self.split.is_none() {
            let s = make_split(&self.cfg, self.data.as_ref().expect("dataset before split"))?;
            self.write_with("split.csv", |w| Ok(s.write_csv(w)?))?;
            self.split = Some(s);
        }
        Ok(self.split.as_ref().expect("split"))
    }

    fn lm(&mut self, contrastive: bool) -> Result<Option<&BTreeMap<Address, Tensor>>, HarnessError> {
        if !self.lm.contains_key(&contrastive) {
            let Some(corpus) = self.corpus.as_ref().and_then(Option::as_ref) else {
                return Ok(None);
            };
            let data = self.data.as_ref().expect("dataset before lm");
            let out = pretrain_lm(&self.cfg, corpus, &data.labels, contrastive)?;
            let accounts: Vec<Address> = data.labels.keys().cloned().collect();
            let rows = semantic_rows(&out.encoder, corpus, &accounts)?;
            let tag = if contrastive { "lm" } else { "lm-mlm-only" };
            if let Some(p) = self.artifact(&format!("{tag}.ckpt")) {
                out.encoder.save(&p)?;
            }
            self.write_with(&format!("{tag}_log.csv"), |w| Ok(txclm::write_log_csv(w, &out.logs)?))?;
            self.lm.insert(contrastive, (out.encoder, rows));
        }
        let (enc, rows) = &self.lm[&contrastive];
        self.checksums.insert(if contrastive { "lm" } else { "lm-mlm-only" }.into(), checkpoint::checksum(&enc.params));
        Ok(Some(rows))
    }

    fn features(&mut self) -> Result<&NodeFeatureMatrix, HarnessError> {
        if self.features.is_none() {
            let data = self.data.as_ref().expect("dataset before features");
            let f = node_features(&self.cfg, data, self.split.as_ref().expect("split before features"))?;
            self.write_with("features.csv", |w| Ok(f.write_csv(w, data.graph.nodes())?))?;
            self.write_with("features.json", |w| {
                serde_json::to_writer_pretty(w, &f.meta).map_err(|e| HarnessError::Format(e.to_string()))
            })?;
            self.features = Some(f);
        }
        Ok(self.features.as_ref().expect("features"))
    }

    fn gae(&mut self, expert: bool) -> Result<&Tensor, HarnessError> {
        if !self.gae.contains_key(&expert) {
            let x = if expert {
                self.features()?.to_tensor()
            } else {
                let n = self.data.as_ref().expect("dataset").graph.n_nodes();
                random_features(n, crate::graphbuild::N_FEATURES, self.cfg.seed)
            };
            let data = self.data.as_ref().expect("dataset before gae");
            let (out, emb) = pretrain_gae(&self.cfg, &data.graph, &x)?;
            let tag = if expert { "gae" } else { "gae-random-features" };
            if let Some(p) = self.artifact(&format!("{tag}.ckpt")) {
                out.model.save(&p)?;
            }
            if let Some(p) = self.artifact(&format!("{tag}_embeddings.bin")) {
                write_embeddings_bin(&p, &emb)?;
            }
            self.write_with(&format!("{tag}_embeddings.csv"), |w| write_embeddings_csv(w, data.graph.nodes(), &emb))?;
            self.write_with(&format!("{tag}_log.csv"), |w| {
                writeln!(w, "epoch,sce")?;
                for (i, l) in out.losses.iter().enumerate() {
                    writeln!(w, "{},{l:?}", i + 1)?;
                }
                Ok(())
            })?;
            self.gae.insert(expert, (out.model, emb));
        }
        let (m, emb) = &self.gae[&expert];
        self.checksums.insert(if expert { "gae" } else { "gae-random-features" }.into(), checkpoint::checksum(&m.params));
        Ok(emb)
    }

    fn variant(&mut self, ablation: PipelineAblation) -> Result<Report, StageError> {
        self.stages.clear();
        self.checksums.clear();
        self.stages.push("load");
        self.dataset().at("load")?;
        let use_lm = ablation.uses_lm();
        let use_graph = ablation.uses_graph();
        if use_lm {
            self.stages.push("corpus");
            self.corpus().at("corpus")?;
        }
        self.stages.push("split");
        self.split().at("split")?;
        if use_lm && self.corpus.as_ref().is_some_and(Option::is_some) {
            self.stages.push("pretrain-lm");
            self.lm(ablation != PipelineAblation::NoTa).at("pretrain-lm")?;
        }
        if use_graph {
            if ablation != PipelineAblation::NoExpert {
                self.stages.push("features");
                self.features().at("features")?;
            }
            self.stages.push("pretrain-gae");
            self.gae(ablation != PipelineAblation::NoExpert).at("pretrain-gae")?;
        }

        self.stages.push("fuse-train");
        let data = self.data.as_ref().expect("loaded");
        let split = self.split.as_ref().expect("split");
        let semantic = if use_lm { self.lm.get(&(ablation != PipelineAblation::NoTa)).map(|(_, r)| r) } else { None };
        let emb = if use_graph { self.gae.get(&(ablation != PipelineAblation::NoExpert)).map(|(_, e)| e) } else { None };
        let d_s = self.cfg.txclm.d_model;
        let d_h = self.cfg.magae.d_h;
        let build = |p: Part| -> (Vec<AccountInput>, Vec<usize>) {
            let accts = split.part(p);
            let inputs = fusion_inputs(accts, semantic, d_s, &data.graph, emb, d_h);
            (inputs, accts.iter().map(|a| data.labels[a] as usize).collect())
        };
        let (tr_x, tr_y) = build(Part::Train);
        let (va_x, va_y) = build(Part::Val);
        let (te_x, te_y) = build(Part::Test);
        let mut ccfg = self.cfg.cafn.clone();
        ccfg.ablation = ablation.fusion();
        let out = cafn::train(&tr_x, &tr_y, &va_x, &va_y, &ccfg).at("fuse-train")?;
        self.checksums.insert("cafn".into(), checkpoint::checksum(&out.model.params));
        if ablation == self.cfg.ablation {
            if let Some(p) = self.artifact("cafn.ckpt") {
                out.model.save(&p).at("fuse-train")?;
            }
            let hist = out.history.clone();
            self.write_with("cafn_log.csv", |w| {
                writeln!(w, "epoch,loss,val_f1,val_loss")?;
                for h in &hist {
                    writeln!(w, "{},{:?},{:?},{:?}", h.epoch, h.loss, h.val_f1, h.val_loss)?;
                }
                Ok(())
            })
            .at("fuse-train")?;
        }

        self.stages.push("evaluate");
        let metrics = evaluate(
            &out.model,
            &[(Part::Train, &tr_x, tr_y), (Part::Val, &va_x, va_y), (Part::Test, &te_x, te_y)],
        )
        .at("evaluate")?;
        Ok(Report {
            ablation: ablation.name().into(),
            metrics,
            best_epoch: out.best_epoch,
            epochs_run: out.history.len(),
            class_weights: out.class_weights,
        })
    }

    /// Runs one variant and returns its report.
    pub fn run_variant(&mut self, ablation: PipelineAblation) -> Result<Report, HarnessError> {
        self.variant(ablation).map_err(|e| e.error)
    }

    /// Runs the configured variant, writing artifacts, `report.json`,
    /// `report.csv` and `manifest.json` into the output directory (also on
    /// failure, with the failing stage recorded).
    pub fn run_recorded(cfg: ExperimentConfig) -> Result<Manifest, HarnessError> {
        cfg.validate()?;
        let dir = cfg.output_dir.clone();
        let _lock = RunLock::acquire(&dir)?;
        fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
        let started_at = now();
        let ablation = cfg.ablation;
        let mut p = Pipeline::new(cfg).with_output(&dir);
        let result = p.variant(ablation);
        let mut manifest = Manifest {
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: p.cfg.hash()?,
            seed: p.cfg.seed,
            ablation: ablation.name().into(),
            stages: p.stages.iter().map(|s| s.to_string()).collect(),
            checksums: p.checksums.clone(),
            report: None,
            failure: None,
            started_at,
            finished_at: 0,
        };
        match &result {
            Ok(report) => {
                manifest.report = Some(report.clone());
                fs::write(dir.join("report.json"), serde_json::to_string_pretty(report).map_err(|e| HarnessError::Format(e.to_string()))?)?;
                report.write_csv(BufWriter::new(File::create(dir.join("report.csv"))?))?;
            }
            Err(e) => {
                manifest.failure = Some(Failure { stage: e.stage.into(), error: e.error.to_string() });
            }
        }
        manifest.finished_at = now();
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| HarnessError::Format(e.to_string()))?;
        checkpoint::write_bytes_atomic(&dir.join("manifest.json"), json.as_bytes())?;
        match result {
            Ok(_) => Ok(manifest),
            Err(e) => Err(e.error),
        }
    }

    /// Reports for several variants; shared stages run once.
    pub fn ablation_study(&mut self, variants: &[PipelineAblation]) -> Result<Vec<Report>, HarnessError> {
        variants.iter().map(|&v| self.run_variant(v)).collect()
    }

    /// Stages executed by the most recent variant.
    pub fn stages(&self) -> &[&'static str] {
        &self.stages
    }

    pub fn checksums(&self) -> &BTreeMap<String, String> {
        &self.checksums
    }
}
