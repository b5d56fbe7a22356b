//! Stage commands. Each reads its inputs from the working directory and
//! writes its artifacts next to them, so stages can be rerun one at a time.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::ValueEnum;
use txfuse::cafn::{self, AccountInput, Cafn};
use txfuse::graphbuild::{read_edge_list, read_features_csv, N_FEATURES};
use txfuse::harness::io::{read_embeddings_bin, write_embeddings_bin, write_embeddings_csv, write_labels};
use txfuse::harness::{
    build_corpus, fusion_inputs, load_dataset, make_split, node_features, random_features, read_split_csv, semantic_rows,
    synth_generate, Corpus, DataSource, Dataset, ExperimentConfig, Part, Pipeline, PipelineAblation, Report, Split,
};
use txfuse::labor::{clustered_graph, partition_batches, sampling_stats, NeighborMode, Neighborhoods, SamplerConfig, SamplerKind, SamplerStats};
use txfuse::numcore::Tensor;
use txfuse::txclm::{self, Encoder};
use txfuse::txcorpus::{read_corpus, write_corpus, write_jsonl, Address, TransactionSentence, Vocabulary};
use txfuse::rng;

use crate::BenchArgs;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InputFormat {
    Jsonl,
    Csv,
    Edges,
}

fn dir(cfg: &ExperimentConfig) -> &Path {
    &cfg.output_dir
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .with_context(|| format!("opening {}; run the earlier stages first", path.display()))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w)?;
    w.flush()?;
    println!("wrote {}", path.display());
    Ok(())
}

/// The dataset as ingested into the working directory.
fn workspace_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let d = dir(cfg);
    let labels = d.join("labels.csv");
    let tx = d.join("transactions.jsonl");
    let mut c = cfg.clone();
    c.data = if tx.exists() {
        DataSource::Jsonl { path: tx, labels }
    } else {
        DataSource::EdgeList { path: d.join("edges.csv"), labels }
    };
    load_dataset(&c).context("loading the ingested dataset (run ingest first)")
}

fn workspace_corpus(cfg: &ExperimentConfig) -> Result<Option<Corpus>> {
    let d = dir(cfg);
    let vocab_path = d.join("vocab.txt");
    if !vocab_path.exists() {
        return Ok(None);
    }
    let vocab = Vocabulary::read(open(&vocab_path)?)?;
    let sentences = read_corpus(open(&d.join("corpus.tsv"))?)?.into_iter().map(|s| (s.account.clone(), s)).collect();
    Ok(Some(Corpus { vocab, sentences }))
}

fn workspace_split(cfg: &ExperimentConfig) -> Result<Split> {
    Ok(read_split_csv(open(&dir(cfg).join("split.csv"))?)?)
}

pub fn synth(cfg: &ExperimentConfig) -> Result<()> {
    let s = synth_generate(&cfg.synthetic, cfg.seed)?;
    let d = dir(cfg);
    write_file(&d.join("transactions.jsonl"), |w| Ok(write_jsonl(w, &s.transfers)?))?;
    write_file(&d.join("labels.csv"), |w| Ok(write_labels(w, &s.labels)?))?;
    let fraud = s.labels.values().filter(|&&l| l == 1).count();
    println!("{} transfers, {} labeled accounts ({fraud} fraud)", s.transfers.len(), s.labels.len());
    Ok(())
}

fn guess_format(path: &Path) -> InputFormat {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") if path.file_stem().is_some_and(|s| s.to_string_lossy().contains("edge")) => InputFormat::Edges,
        Some("csv") => InputFormat::Csv,
        _ => InputFormat::Jsonl,
    }
}

pub fn ingest(cfg: &ExperimentConfig, input: Option<PathBuf>, labels: Option<PathBuf>, format: Option<InputFormat>) -> Result<()> {
    let d = dir(cfg).to_path_buf();
    let input = input.unwrap_or_else(|| d.join("transactions.jsonl"));
    let labels = labels.unwrap_or_else(|| d.join("labels.csv"));
    let format = format.unwrap_or_else(|| guess_format(&input));
    let mut c = cfg.clone();
    c.data = match format {
        InputFormat::Jsonl => DataSource::Jsonl { path: input.clone(), labels },
        InputFormat::Csv => DataSource::Csv { path: input.clone(), labels },
        InputFormat::Edges => DataSource::EdgeList { path: input.clone(), labels },
    };
    let data = load_dataset(&c).with_context(|| format!("ingesting {}", input.display()))?;
    if data.rejected > 0 {
        eprintln!("skipped {} malformed records", data.rejected);
    }

    let tx_path = d.join("transactions.jsonl");
    if format == InputFormat::Edges {
        // A stale history would shadow the edge list in later stages.
        if tx_path.exists() {
            fs::remove_file(&tx_path)?;
        }
    } else if fs::canonicalize(&input).ok() != fs::canonicalize(&tx_path).ok() {
        write_file(&tx_path, |w| Ok(write_jsonl(w, &data.transfers)?))?;
    }
    write_file(&d.join("labels.csv"), |w| Ok(write_labels(w, &data.labels)?))?;
    write_file(&d.join("edges.csv"), |w| Ok(data.graph.write_edge_list(w)?))?;
    match build_corpus(&data.by_account, cfg.txclm.max_seq_len, cfg.corpus.min_freq)? {
        Some(corpus) => {
            write_file(&d.join("vocab.txt"), |w| Ok(corpus.vocab.write(w)?))?;
            let list: Vec<TransactionSentence> = corpus.sentences.into_values().collect();
            write_file(&d.join("corpus.tsv"), |w| Ok(write_corpus(w, &list)?))?;
        }
        None => {
            for stale in ["vocab.txt", "corpus.tsv"] {
                let p = d.join(stale);
                if p.exists() {
                    fs::remove_file(p)?;
                }
            }
            eprintln!("no per-transaction history; the language branch will be empty");
        }
    }
    println!("{} accounts, {} edges, {} labeled", data.graph.n_nodes(), data.graph.n_edges(), data.labels.len());
    Ok(())
}

pub fn features(cfg: &ExperimentConfig) -> Result<()> {
    let data = workspace_dataset(cfg)?;
    let split = make_split(cfg, &data)?;
    let d = dir(cfg);
    write_file(&d.join("split.csv"), |w| Ok(split.write_csv(w)?))?;
    let f = node_features(cfg, &data, &split)?;
    write_file(&d.join("features.csv"), |w| Ok(f.write_csv(w, data.graph.nodes())?))?;
    write_file(&d.join("features.json"), |w| Ok(serde_json::to_writer_pretty(w, &f.meta)?))?;
    let [tr, va, te] = split.sizes();
    println!("split train {tr} / val {va} / test {te}; {} x {N_FEATURES} features", f.n);
    Ok(())
}

fn lm_tag(contrastive: bool) -> &'static str {
    if contrastive { "lm" } else { "lm-mlm-only" }
}

fn gae_tag(expert: bool) -> &'static str {
    if expert { "gae" } else { "gae-random-features" }
}

pub fn pretrain_lm(cfg: &ExperimentConfig, contrastive: bool) -> Result<()> {
    let corpus = workspace_corpus(cfg)?.context("no corpus in the working directory; ingest a transaction history first")?;
    let data_labels = txfuse::harness::io::read_labels(open(&dir(cfg).join("labels.csv"))?)?;
    let out = txfuse::harness::pretrain_lm(cfg, &corpus, &data_labels, contrastive)?;
    let d = dir(cfg);
    let tag = lm_tag(contrastive);
    let ckpt = d.join(format!("{tag}.ckpt"));
    out.encoder.save(&ckpt)?;
    println!("wrote {}", ckpt.display());
    write_file(&d.join(format!("{tag}_log.csv")), |w| Ok(txclm::write_log_csv(w, &out.logs)?))?;
    if let Some(last) = out.logs.last() {
        println!("final epoch {}: mlm {:.4} contrastive {:.4}", last.epoch, last.mlm, last.ta);
    }
    Ok(())
}

fn node_matrix(cfg: &ExperimentConfig, data: &Dataset, expert: bool) -> Result<Tensor> {
    let n = data.graph.n_nodes();
    if !expert {
        return Ok(random_features(n, N_FEATURES, cfg.seed));
    }
    let (accounts, values) = read_features_csv(open(&dir(cfg).join("features.csv"))?)?;
    ensure!(accounts.as_slice() == data.graph.nodes(), "features.csv does not match the ingested graph; rerun features");
    Ok(Tensor::matrix(n, N_FEATURES, values)?)
}

pub fn pretrain_gae(cfg: &ExperimentConfig, random: bool) -> Result<()> {
    let data = workspace_dataset(cfg)?;
    let x = node_matrix(cfg, &data, !random)?;
    let (out, emb) = txfuse::harness::pretrain_gae(cfg, &data.graph, &x)?;
    let d = dir(cfg);
    let tag = gae_tag(!random);
    let ckpt = d.join(format!("{tag}.ckpt"));
    out.model.save(&ckpt)?;
    let bin = d.join(format!("{tag}_embeddings.bin"));
    write_embeddings_bin(&bin, &emb)?;
    println!("wrote {}\nwrote {}", ckpt.display(), bin.display());
    write_file(&d.join(format!("{tag}_embeddings.csv")), |w| Ok(write_embeddings_csv(w, data.graph.nodes(), &emb)?))?;
    write_file(&d.join(format!("{tag}_log.csv")), |w| {
        writeln!(w, "epoch,sce")?;
        for (i, l) in out.losses.iter().enumerate() {
            writeln!(w, "{},{l:?}", i + 1)?;
        }
        Ok(())
    })?;
    if let Some(l) = out.losses.last() {
        println!("final reconstruction loss {l:.4}");
    }
    Ok(())
}

/// Everything the fusion network consumes, per split part.
struct FusionData {
    split: Split,
    labels: BTreeMap<Address, u8>,
    parts: Vec<(Part, Vec<AccountInput>, Vec<usize>)>,
}

fn fusion_data(cfg: &ExperimentConfig, ablation: PipelineAblation) -> Result<FusionData> {
    let data = workspace_dataset(cfg)?;
    let split = workspace_split(cfg)?;
    let d = dir(cfg);
    let labeled: Vec<Address> = data.labels.keys().cloned().collect();

    let mut d_s = cfg.txclm.d_model;
    let semantic = match (ablation.uses_lm(), workspace_corpus(cfg)?) {
        (true, Some(corpus)) => {
            let enc = Encoder::load(&d.join(format!("{}.ckpt", lm_tag(ablation != PipelineAblation::NoTa))))
                .context("loading the language model (run pretrain-lm)")?;
            d_s = enc.shape.d_model;
            Some(semantic_rows(&enc, &corpus, &labeled)?)
        }
        _ => None,
    };
    let mut d_h = cfg.magae.d_h;
    let emb = if ablation.uses_graph() {
        let p = d.join(format!("{}_embeddings.bin", gae_tag(ablation != PipelineAblation::NoExpert)));
        let e = read_embeddings_bin(&p).with_context(|| format!("loading {} (run pretrain-gae)", p.display()))?;
        ensure!(e.dims2().0 == data.graph.n_nodes(), "{} does not match the ingested graph", p.display());
        d_h = e.dims2().1;
        Some(e)
    } else {
        None
    };

    let parts = Part::ALL
        .iter()
        .map(|&p| {
            let accts = split.part(p);
            let missing = accts.iter().find(|a| !data.labels.contains_key(*a));
            if let Some(a) = missing {
                bail!("split account {a} has no label");
            }
            let inputs = fusion_inputs(accts, semantic.as_ref(), d_s, &data.graph, emb.as_ref(), d_h);
            Ok((p, inputs, accts.iter().map(|a| data.labels[a] as usize).collect()))
        })
        .collect::<Result<_>>()?;
    Ok(FusionData { split, labels: data.labels, parts })
}

fn write_report(cfg: &ExperimentConfig, report: &Report) -> Result<()> {
    let d = dir(cfg);
    write_file(&d.join("report.json"), |w| Ok(serde_json::to_writer_pretty(w, report)?))?;
    write_file(&d.join("report.csv"), |w| Ok(report.write_csv(w)?))?;
    for (part, m) in &report.metrics {
        println!("{part:5}  F1 {:.4}  P {:.4}  R {:.4}  BAcc {:.4}", m.f1, m.precision, m.recall, m.balanced_accuracy);
    }
    Ok(())
}

pub fn fuse_train(cfg: &ExperimentConfig) -> Result<()> {
    let fd = fusion_data(cfg, cfg.ablation)?;
    let (tr, va) = (&fd.parts[0], &fd.parts[1]);
    let mut ccfg = cfg.cafn.clone();
    ccfg.ablation = cfg.ablation.fusion();
    let out = cafn::train(&tr.1, &tr.2, &va.1, &va.2, &ccfg)?;
    let d = dir(cfg);
    let ckpt = d.join("cafn.ckpt");
    out.model.save(&ckpt)?;
    println!("wrote {}", ckpt.display());
    write_file(&d.join("cafn_log.csv"), |w| {
        writeln!(w, "epoch,loss,val_f1,val_loss")?;
        for h in &out.history {
            writeln!(w, "{},{:?},{:?},{:?}", h.epoch, h.loss, h.val_f1, h.val_loss)?;
        }
        Ok(())
    })?;
    let parts: Vec<(Part, &[AccountInput], Vec<usize>)> = fd.parts.iter().map(|(p, x, y)| (*p, x.as_slice(), y.clone())).collect();
    let report = Report {
        ablation: cfg.ablation.name().into(),
        metrics: txfuse::harness::evaluate(&out.model, &parts)?,
        best_epoch: out.best_epoch,
        epochs_run: out.history.len(),
        class_weights: out.class_weights,
    };
    write_report(cfg, &report)
}

pub fn evaluate(cfg: &ExperimentConfig, ablation: Option<PipelineAblation>) -> Result<()> {
    let d = dir(cfg);
    let model = Cafn::load(&d.join("cafn.ckpt")).context("loading the classifier (run fuse-train)")?;
    let ablation = match ablation {
        Some(a) => a,
        None => match fs::read_to_string(d.join("report.json")) {
            Ok(s) => serde_json::from_str::<Report>(&s)?.ablation.parse().map_err(anyhow::Error::msg)?,
            Err(_) => cfg.ablation,
        },
    };
    let fd = fusion_data(cfg, ablation)?;
    let parts: Vec<(Part, &[AccountInput], Vec<usize>)> = fd.parts.iter().map(|(p, x, y)| (*p, x.as_slice(), y.clone())).collect();
    let metrics = txfuse::harness::evaluate(&model, &parts)?;
    write_file(&d.join("predictions.csv"), |w| {
        writeln!(w, "address,split,label,p_fraud,prediction")?;
        for (p, inputs, _) in &fd.parts {
            let probs = model.predict_proba(inputs)?;
            for (a, pr) in fd.split.part(*p).iter().zip(probs) {
                writeln!(w, "{a},{},{},{:.6},{}", p.name(), fd.labels[a], pr[1], u8::from(pr[1] > pr[0]))?;
            }
        }
        Ok(())
    })?;
    let previous = fs::read_to_string(d.join("report.json")).ok().and_then(|s| serde_json::from_str::<Report>(&s).ok());
    let report = Report {
        ablation: ablation.name().into(),
        metrics,
        best_epoch: previous.as_ref().map_or(0, |r| r.best_epoch),
        epochs_run: previous.as_ref().map_or(0, |r| r.epochs_run),
        class_weights: previous.map_or([1.0, 1.0], |r| r.class_weights),
    };
    write_report(cfg, &report)
}

pub fn sample_bench(cfg: &ExperimentConfig, a: &BenchArgs) -> Result<()> {
    ensure!(!a.fanout.is_empty(), "at least one fanout is required");
    let kinds: Vec<SamplerKind> = match a.sampler.as_str() {
        "both" => vec![SamplerKind::Labor, SamplerKind::Ns],
        s => vec![s.parse().map_err(anyhow::Error::msg)?],
    };
    let nb = match &a.graph {
        Some(p) => Neighborhoods::from_graph(&read_edge_list(open(p)?)?, NeighborMode::In),
        None => clustered_graph(a.nodes, a.communities, a.degree, cfg.seed),
    };
    let nodes: Vec<usize> = (0..nb.n_nodes()).collect();
    let batches = partition_batches(&nodes, a.batch_size, &mut rng::stream(cfg.seed, "bench-batches"))?;
    let mut rows = Vec::new();
    for kind in kinds {
        let sc = SamplerConfig { kind, fanouts: a.fanout.clone(), seed: cfg.seed, ..SamplerConfig::default() };
        rows.push(sampling_stats(&nb, &sc, &batches, a.trials)?);
    }
    let hops = a.fanout.len();
    let header = SamplerStats::csv_header(hops);
    println!("{header}");
    for r in &rows {
        println!("{}", r.csv_row());
    }
    write_file(&dir(cfg).join("sample_bench.csv"), |w| {
        writeln!(w, "{header}")?;
        for r in &rows {
            writeln!(w, "{}", r.csv_row())?;
        }
        Ok(())
    })
}

pub fn run(cfg: ExperimentConfig, study: bool) -> Result<()> {
    let manifest = Pipeline::run_recorded(cfg.clone())?;
    println!("stages: {}", manifest.stages.join(" -> "));
    if let Some(r) = &manifest.report {
        let t = r.test();
        println!("{}: test F1 {:.4} P {:.4} R {:.4} BAcc {:.4}", r.ablation, t.f1, t.precision, t.recall, t.balanced_accuracy);
    }
    println!("wrote {}", cfg.output_dir.join("manifest.json").display());
    if study {
        let mut p = Pipeline::new(cfg.clone());
        let reports = p.ablation_study(&PipelineAblation::ALL)?;
        write_file(&cfg.output_dir.join("study.csv"), |w| {
            writeln!(w, "ablation,f1,precision,recall,balanced_accuracy")?;
            for r in &reports {
                let t = r.test();
                writeln!(w, "{},{:.4},{:.4},{:.4},{:.4}", r.ablation, t.f1, t.precision, t.recall, t.balanced_accuracy)?;
            }
            Ok(())
        })?;
        for r in &reports {
            println!("{:10} test F1 {:.4}", r.ablation, r.test().f1);
        }
    }
    Ok(())
}
