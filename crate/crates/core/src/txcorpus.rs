//! Transaction ingestion, linguistic serialization, vocabulary and tokenization.
//!
//! Each transaction of an account is rendered as the fixed template
//! `amount AMT_k direction in|out time HOD_h GAP_g`. Addresses never appear
//! in the rendered text; relational information is left to the graph side.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("min_freq must be at least 1")]
    MinFreq,
    #[error("timestamps out of order: {current} < {previous}")]
    Ordering { previous: i64, current: i64 },
    #[error("malformed corpus line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Lower-case `0x`-prefixed 20-byte hex address.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Address(String);

impl Address {
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim();
        let hex = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X"))?;
        if hex.len() == 40 && hex.bytes().all(|b| b.is_ascii_hexdigit()) {
            Some(Self(format!("0x{}", hex.to_ascii_lowercase())))
        } else {
            None
        }
    }

    /// Deterministic synthetic address for an integer id.
    pub fn from_index(i: u64) -> Self {
        Self(format!("0x{:040x}", i))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    In,
    Out,
}

impl Direction {
    /// `-1` inflow, `+1` outflow.
    pub fn sign(self) -> i8 {
        match self {
            Direction::In => -1,
            Direction::Out => 1,
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            Direction::In => "in",
            Direction::Out => "out",
        }
    }
}

/// One external transfer seen from a focal account.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransactionRecord {
    pub sender: Address,
    pub receiver: Address,
    /// ETH, non-negative.
    pub value: f64,
    pub direction: Direction,
    /// Unix seconds.
    pub timestamp: i64,
}

impl TransactionRecord {
    /// The counterparty of the focal account.
    pub fn counterparty(&self) -> &Address {
        match self.direction {
            Direction::Out => &self.receiver,
            Direction::In => &self.sender,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Reject {
    pub line: usize,
    pub reason: String,
}

/// Result of ingesting a transaction stream.
#[derive(Debug, Clone, Default)]
pub struct ParsedTransactions {
    /// Every accepted transfer, from the sender's point of view.
    pub transfers: Vec<TransactionRecord>,
    /// Per focal account, sorted by timestamp (stable in input order).
    pub by_account: BTreeMap<Address, Vec<TransactionRecord>>,
    pub rejects: Vec<Reject>,
    pub self_transfers: usize,
}

#[derive(Debug, Deserialize)]
struct RawLine {
    from: serde_json::Value,
    to: serde_json::Value,
    value: serde_json::Value,
    timestamp: serde_json::Value,
}

fn json_str(v: &serde_json::Value) -> Option<String> {
    match v {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn validate(from: &str, to: &str, value: &str, ts: &str) -> Result<(Address, Address, f64, i64), String> {
    let sender = Address::parse(from).ok_or_else(|| format!("malformed address {from:?}"))?;
    let receiver = Address::parse(to).ok_or_else(|| format!("malformed address {to:?}"))?;
    let v: f64 = value
        .trim()
        .parse()
        .map_err(|_| format!("unparsable value {value:?}"))?;
    if !v.is_finite() {
        return Err("non-finite value".into());
    }
    if v < 0.0 {
        return Err("negative value".into());
    }
    let t: i64 = ts
        .trim()
        .parse()
        .map_err(|_| format!("unparsable timestamp {ts:?}"))?;
    if t <= 0 {
        return Err("non-positive timestamp".into());
    }
    Ok((sender, receiver, v, t))
}

#[derive(Default)]
struct Ingest {
    out: ParsedTransactions,
}

impl Ingest {
    fn accept(&mut self, line: usize, fields: Result<(Address, Address, f64, i64), String>) {
        match fields {
            Err(reason) => self.out.rejects.push(Reject { line, reason }),
            Ok((sender, receiver, value, timestamp)) => {
                if sender == receiver {
                    self.out.self_transfers += 1;
                    log::warn!("line {line}: self-transfer rejected");
                    self.out.rejects.push(Reject { line, reason: "self transfer".into() });
                    return;
                }
                let rec = TransactionRecord { sender, receiver, value, direction: Direction::Out, timestamp };
                self.out.transfers.push(rec);
            }
        }
    }

    fn finish(mut self) -> ParsedTransactions {
        self.out.by_account = group_by_account(&self.out.transfers);
        self.out
    }
}

/// Splits sender-view transfers into per-account, direction-tagged histories.
pub fn group_by_account(transfers: &[TransactionRecord]) -> BTreeMap<Address, Vec<TransactionRecord>> {
    let mut by: BTreeMap<Address, Vec<TransactionRecord>> = BTreeMap::new();
    for t in transfers {
        let mut out = t.clone();
        out.direction = Direction::Out;
        by.entry(t.sender.clone()).or_default().push(out);
        let mut inc = t.clone();
        inc.direction = Direction::In;
        by.entry(t.receiver.clone()).or_default().push(inc);
    }
    for v in by.values_mut() {
        v.sort_by_key(|r| r.timestamp);
    }
    by
}

/// Parses JSON-Lines records with keys `from`, `to`, `value`, `timestamp`.
/// Malformed lines are reported in `rejects`; parsing continues.
pub fn parse_transactions<R: BufRead>(reader: R) -> Result<ParsedTransactions, CorpusError> {
    let mut ingest = Ingest::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields = serde_json::from_str::<RawLine>(&line)
            .map_err(|e| format!("malformed json: {e}"))
            .and_then(|raw| {
                let get = |v: &serde_json::Value, k: &str| json_str(v).ok_or_else(|| format!("bad field {k}"));
                validate(
                    &get(&raw.from, "from")?,
                    &get(&raw.to, "to")?,
                    &get(&raw.value, "value")?,
                    &get(&raw.timestamp, "timestamp")?,
                )
            });
        ingest.accept(lineno, fields);
    }
    Ok(ingest.finish())
}

/// CSV variant with header `from,to,value,timestamp`.
pub fn parse_transactions_csv<R: std::io::Read>(reader: R) -> Result<ParsedTransactions, CorpusError> {
    let mut ingest = Ingest::default();
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (Some(cf), Some(ct), Some(cv), Some(cts)) = (col("from"), col("to"), col("value"), col("timestamp")) else {
        return Err(CorpusError::Format { line: 1, reason: "missing from/to/value/timestamp header".into() });
    };
    for (i, rec) in rdr.records().enumerate() {
        let lineno = i + 2;
        let fields = match rec {
            Err(e) => Err(format!("malformed csv: {e}")),
            Ok(r) => {
                let g = |c: usize| r.get(c).unwrap_or("");
                validate(g(cf), g(ct), g(cv), g(cts))
            }
        };
        ingest.accept(lineno, fields);
    }
    Ok(ingest.finish())
}

pub fn write_jsonl<W: Write>(mut w: W, transfers: &[TransactionRecord]) -> std::io::Result<()> {
    for t in transfers {
        writeln!(
            w,
            "{{\"from\":\"{}\",\"to\":\"{}\",\"value\":\"{}\",\"timestamp\":{}}}",
            t.sender, t.receiver, t.value, t.timestamp
        )?;
    }
    Ok(())
}

// ---- serialization ----------------------------------------------------------

pub const PAD: &str = "[PAD]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const UNK: &str = "[UNK]";
pub const RESERVED: [&str; 5] = [PAD, CLS, SEP, MASK, UNK];
pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const SEP_ID: usize = 2;
pub const MASK_ID: usize = 3;
pub const UNK_ID: usize = 4;
pub const TEMPLATE_WORDS: [&str; 3] = ["amount", "direction", "time"];
/// Tokens per serialized transaction.
pub const TX_TOKENS: usize = 7;
pub const DEFAULT_MAX_SEQ_LEN: usize = 128;

/// `AMT_k`, `k = clamp(floor(2·log10(max(v, 1e-8))), -16, 15) + 16`.
pub fn bucket_amount(v: f64) -> String {
    format!("AMT_{}", amount_bucket(v))
}

pub fn amount_bucket(v: f64) -> i32 {
    let l = (2.0 * v.max(1e-8).log10()).floor() as i32;
    l.clamp(-16, 15) + 16
}

/// `(HOD_h, GAP_g)`: UTC hour of day and log2 gap since the previous transaction.
pub fn bucket_time(ts: i64, prev: Option<i64>) -> Result<(String, String), CorpusError> {
    let hour = ts.rem_euclid(86_400) / 3_600;
    let gap = match prev {
        None => 0,
        Some(p) if ts < p => return Err(CorpusError::Ordering { previous: p, current: ts }),
        Some(p) => gap_bucket(ts - p),
    };
    Ok((format!("HOD_{hour}"), format!("GAP_{gap}")))
}

pub fn gap_bucket(delta: i64) -> i64 {
    let d = delta.max(1) as f64;
    (d.log2().floor() as i64).clamp(0, 24)
}

pub fn serialize_transaction(t: &TransactionRecord, prev: Option<i64>) -> Result<Vec<String>, CorpusError> {
    let (hod, gap) = bucket_time(t.timestamp, prev)?;
    Ok(vec![
        "amount".into(),
        bucket_amount(t.value),
        "direction".into(),
        t.direction.word().into(),
        "time".into(),
        hod,
        gap,
    ])
}

/// Token strings of one account, plus whether older transactions were dropped.
///
/// Truncation keeps the most recent whole transactions so that the retained
/// tokens after `[CLS]` are a suffix of the untruncated sequence.
pub fn sentence_tokens(records: &[TransactionRecord], max_seq_len: usize) -> Result<(Vec<String>, bool), CorpusError> {
    let per_tx: Vec<Vec<String>> = records
        .iter()
        .enumerate()
        .map(|(i, r)| serialize_transaction(r, i.checked_sub(1).map(|p| records[p].timestamp)))
        .collect::<Result<_, _>>()?;
    // [CLS] + m·7 + (m−1) separators = 8m tokens
    let keep = (max_seq_len / (TX_TOKENS + 1)).min(per_tx.len());
    let start = per_tx.len() - keep;
    let mut tokens = vec![CLS.to_string()];
    for (i, tx) in per_tx[start..].iter().enumerate() {
        if i > 0 {
            tokens.push(SEP.to_string());
        }
        tokens.extend(tx.iter().cloned());
    }
    Ok((tokens, start > 0))
}

/// Token-id rendering of one account's history.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransactionSentence {
    pub account: Address,
    pub ids: Vec<usize>,
    pub n_transactions: usize,
    pub truncated: bool,
}

impl TransactionSentence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Only `[CLS]`: the account had no transactions.
    pub fn is_degenerate(&self) -> bool {
        self.n_transactions == 0
    }
}

pub fn build_sentence(
    account: &Address,
    records: &[TransactionRecord],
    max_seq_len: usize,
    vocab: &Vocabulary,
) -> Result<TransactionSentence, CorpusError> {
    let (tokens, truncated) = sentence_tokens(records, max_seq_len)?;
    Ok(TransactionSentence {
        account: account.clone(),
        ids: tokens.iter().map(|t| vocab.id(t)).collect(),
        n_transactions: records.len(),
        truncated,
    })
}

/// Token-string ↔ id map with fixed reserved ids `0..5`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(id: usize) -> bool {
        id < RESERVED.len()
    }

    /// One token per line in id order.
    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self, CorpusError> {
        let tokens: Vec<String> = r.lines().collect::<Result<_, _>>()?;
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(CorpusError::Format { line: 1, reason: "reserved tokens missing".into() });
        }
        Ok(Self::from_tokens(tokens))
    }
}

/// Builds the vocabulary: reserved tokens, template words, then observed
/// tokens with frequency `>= min_freq` ordered by (frequency desc, token asc).
pub fn build_vocab(corpus: &[Vec<String>], min_freq: usize) -> Result<Vocabulary, CorpusError> {
    if min_freq == 0 {
        return Err(CorpusError::MinFreq);
    }
    if corpus.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for sentence in corpus {
        for t in sentence {
            *freq.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    tokens.extend(TEMPLATE_WORDS.iter().map(|s| s.to_string()));
    let mut observed: Vec<(&str, usize)> = freq
        .into_iter()
        .filter(|(t, c)| *c >= min_freq && !RESERVED.contains(t) && !TEMPLATE_WORDS.contains(t))
        .collect();
    observed.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    tokens.extend(observed.into_iter().map(|(t, _)| t.to_string()));
    Ok(Vocabulary::from_tokens(tokens))
}

/// Sentence corpus: `account \t id id id ...` per line.
pub fn write_corpus<W: Write>(mut w: W, sentences: &[TransactionSentence]) -> std::io::Result<()> {
    for s in sentences {
        let ids: Vec<String> = s.ids.iter().map(usize::to_string).collect();
        writeln!(w, "{}\t{}", s.account, ids.join(" "))?;
    }
    Ok(())
}

pub fn read_corpus<R: BufRead>(r: R) -> Result<Vec<TransactionSentence>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: &str| CorpusError::Format { line: i + 1, reason: reason.into() };
        let (acct, ids) = line.split_once('\t').ok_or_else(|| err("missing tab"))?;
        let account = Address::parse(acct).ok_or_else(|| err("bad account"))?;
        let ids: Vec<usize> = ids
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|_| err("bad token id"))?;
        let n_sep = ids.iter().filter(|&&t| t == SEP_ID).count();
        let n_transactions = if ids.len() > 1 { n_sep + 1 } else { 0 };
        out.push(TransactionSentence { account, ids, n_transactions, truncated: false });
    }
    Ok(out)
}

/// Renders every account of a parsed stream into token strings.
pub fn corpus_tokens(
    parsed: &BTreeMap<Address, Vec<TransactionRecord>>,
    max_seq_len: usize,
) -> Result<Vec<(Address, Vec<String>, bool)>, CorpusError> {
    parsed
        .iter()
        .map(|(a, recs)| sentence_tokens(recs, max_seq_len).map(|(t, tr)| (a.clone(), t, tr)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn a(i: u64) -> Address {
        Address::from_index(i)
    }

    fn rec(value: f64, direction: Direction, timestamp: i64) -> TransactionRecord {
        TransactionRecord { sender: a(1), receiver: a(2), value, direction, timestamp }
    }

    fn line(from: &Address, to: &Address, value: &str, ts: i64) -> String {
        format!("{{\"from\":\"{from}\",\"to\":\"{to}\",\"value\":\"{value}\",\"timestamp\":{ts}}}")
    }

    #[test]
    fn direction_follows_focal_account() {
        let input = line(&a(0xA), &a(0xB), "2.0", 100);
        let p = parse_transactions(input.as_bytes()).unwrap();
        let ra = &p.by_account[&a(0xA)][0];
        assert_eq!((ra.value, ra.direction.sign(), ra.timestamp), (2.0, 1, 100));
        let rb = &p.by_account[&a(0xB)][0];
        assert_eq!((rb.value, rb.direction.sign(), rb.timestamp), (2.0, -1, 100));
    }

    #[test]
    fn rejects_are_reported_and_parsing_continues() {
        let input = [
            line(&a(1), &a(2), "-1", 100),
            "not json".to_string(),
            line(&a(3), &a(3), "1", 100),
            line(&a(1), &a(2), "1", 200),
        ]
        .join("\n");
        let p = parse_transactions(input.as_bytes()).unwrap();
        assert_eq!(p.transfers.len(), 1);
        assert_eq!(p.rejects.len(), 3);
        assert_eq!(p.rejects[0].reason, "negative value");
        assert_eq!(p.self_transfers, 1);
    }

    #[test]
    fn csv_variant() {
        let input = format!("from,to,value,timestamp\n{},{},1.5,10\n", a(1), a(2));
        let p = parse_transactions_csv(input.as_bytes()).unwrap();
        assert_eq!(p.transfers[0].value, 1.5);
    }

    #[test]
    fn amount_buckets() {
        assert_eq!(bucket_amount(1.0), "AMT_16");
        assert_eq!(bucket_amount(0.0), "AMT_0");
        assert_eq!(bucket_amount(99.9), "AMT_19");
        assert_eq!(bucket_amount(1e30), "AMT_31");
    }

    #[test]
    fn time_buckets() {
        assert_eq!(bucket_time(1800, None).unwrap(), ("HOD_0".into(), "GAP_0".into()));
        assert_eq!(bucket_time(3600 + 10, Some(10)).unwrap().1, "GAP_11");
        assert_eq!(bucket_time(11, Some(10)).unwrap().1, "GAP_0");
        assert!(matches!(bucket_time(5, Some(10)), Err(CorpusError::Ordering { .. })));
    }

    #[test]
    fn transaction_template() {
        let toks = serialize_transaction(&rec(1.0, Direction::Out, 1800), None).unwrap();
        assert_eq!(toks, ["amount", "AMT_16", "direction", "out", "time", "HOD_0", "GAP_0"]);
        let toks = serialize_transaction(&rec(1.0, Direction::In, 1800), None).unwrap();
        assert_eq!(toks[3], "in");
        let recs = [rec(1.0, Direction::Out, 100), rec(1.0, Direction::Out, 3700)];
        let (toks, _) = sentence_tokens(&recs, 128).unwrap();
        assert_eq!(toks.last().unwrap(), "GAP_11");
    }

    #[test]
    fn sentence_lengths_and_truncation() {
        let vocab = build_vocab(&[vec!["x".into()]], 1).unwrap();
        let s = build_sentence(&a(1), &[rec(1.0, Direction::Out, 10)], 16, &vocab).unwrap();
        assert_eq!(s.len(), 8);
        assert!(!s.truncated);

        let many: Vec<_> = (0..100).map(|i| rec(1.0, Direction::Out, 10 + i)).collect();
        let s = build_sentence(&a(1), &many, 64, &vocab).unwrap();
        assert!(s.truncated && s.len() <= 64);

        let s = build_sentence(&a(1), &[], 64, &vocab).unwrap();
        assert_eq!(s.ids, vec![CLS_ID]);
        assert!(s.is_degenerate());
    }

    #[test]
    fn vocab_rules() {
        let sent: Vec<String> = ["[CLS]", "amount", "AMT_16", "direction", "out", "time", "HOD_0", "GAP_0"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let v = build_vocab(std::slice::from_ref(&sent), 1).unwrap();
        assert_eq!(v.len(), 5 + 7);
        assert_eq!(v.token(MASK_ID), Some(MASK));

        let v2 = build_vocab(&[sent.clone(), sent.clone()], 1).unwrap();
        assert_eq!(v2, build_vocab(&[sent.clone(), sent.clone()], 1).unwrap());

        // "AMT_3" appears once, threshold 2 maps it to [UNK]
        let mut odd = sent.clone();
        odd.push("AMT_3".into());
        let v3 = build_vocab(&[sent.clone(), odd], 2).unwrap();
        assert_eq!(v3.id("AMT_3"), UNK_ID);
        assert_ne!(v3.id("AMT_16"), UNK_ID);

        assert!(matches!(build_vocab(&[], 1), Err(CorpusError::EmptyCorpus)));
        assert!(matches!(build_vocab(&[sent], 0), Err(CorpusError::MinFreq)));
    }

    #[test]
    fn corpus_file_roundtrip() {
        let s = TransactionSentence { account: a(9), ids: vec![1, 5, 6, 2, 5, 7], n_transactions: 2, truncated: false };
        let mut buf = Vec::new();
        write_corpus(&mut buf, std::slice::from_ref(&s)).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with(&format!("{}\t1 5 6", a(9))));
        assert_eq!(read_corpus(buf.as_slice()).unwrap(), vec![s]);
    }

    fn arb_records() -> impl Strategy<Value = Vec<TransactionRecord>> {
        prop::collection::vec((0.0f64..1e6, any::<bool>(), 1i64..10_000_000), 0..40).prop_map(|mut v| {
            v.sort_by_key(|x| x.2);
            v.into_iter()
                .map(|(val, out, ts)| rec(val, if out { Direction::Out } else { Direction::In }, ts))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn no_address_like_tokens(recs in arb_records(), max in 8usize..200) {
            let (toks, _) = sentence_tokens(&recs, max).unwrap();
            let re = regex_like_hex;
            prop_assert!(toks.iter().all(|t| !re(t)));
            prop_assert!(toks.len() <= max.max(1));
        }

        #[test]
        fn truncation_keeps_suffix(recs in arb_records(), max in 8usize..120) {
            let (full, _) = sentence_tokens(&recs, usize::MAX / 2).unwrap();
            let (cut, truncated) = sentence_tokens(&recs, max).unwrap();
            prop_assert_eq!(&cut[0], CLS);
            prop_assert!(full.ends_with(&cut[1..]));
            prop_assert_eq!(truncated, cut.len() < full.len());
        }

        #[test]
        fn buckets_monotone(x in 0.0f64..1e9, dx in 0.0f64..1e9, d in 0i64..1_000_000_000, dd in 0i64..1_000_000) {
            prop_assert!(amount_bucket(x) <= amount_bucket(x + dx));
            prop_assert!(gap_bucket(d) <= gap_bucket(d + dd));
        }

        #[test]
        fn serialization_deterministic(recs in arb_records()) {
            let a1 = sentence_tokens(&recs, 128).unwrap();
            let a2 = sentence_tokens(&recs, 128).unwrap();
            prop_assert_eq!(a1, a2);
        }
    }

    /// `0x` followed by 40 hex digits anywhere in the token.
    fn regex_like_hex(t: &str) -> bool {
        t.as_bytes().windows(42).any(|w| {
            w[0] == b'0' && (w[1] == b'x' || w[1] == b'X') && w[2..].iter().all(u8::is_ascii_hexdigit)
        })
    }
}
