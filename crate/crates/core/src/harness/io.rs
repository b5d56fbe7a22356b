//! Labels, embedding matrices and run-directory locking.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, Read, Write};
use std::path::{Path, PathBuf};

use super::HarnessError;
use crate::numcore::checkpoint::write_bytes_atomic;
use crate::numcore::Tensor;
use crate::txcorpus::Address;

const EMB_MAGIC: &[u8; 8] = b"TXFEMB01";

pub fn write_labels<W: Write>(mut w: W, labels: &BTreeMap<Address, u8>) -> std::io::Result<()> {
    writeln!(w, "address,label")?;
    for (a, l) in labels {
        writeln!(w, "{a},{l}")?;
    }
    Ok(())
}

/// `address,label` rows; a header line is optional.
pub fn read_labels<R: BufRead>(r: R) -> Result<BTreeMap<Address, u8>, HarnessError> {
    let mut out = BTreeMap::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with("address")) {
            continue;
        }
        let bad = || HarnessError::Format(format!("labels line {}: expected address,label", i + 1));
        let (a, l) = line.split_once(',').ok_or_else(bad)?;
        let a = Address::parse(a.trim()).ok_or_else(bad)?;
        let l: u8 = l.trim().parse().map_err(|_| bad())?;
        if l > 1 {
            return Err(HarnessError::Label(l));
        }
        out.insert(a, l);
    }
    Ok(out)
}

/// Little-endian binary matrix: magic, rows (u64), cols (u64), f64 values.
pub fn encode_embeddings(t: &Tensor) -> Vec<u8> {
    let (r, c) = t.dims2();
    let mut out = Vec::with_capacity(24 + 8 * r * c);
    out.extend_from_slice(EMB_MAGIC);
    out.extend_from_slice(&(r as u64).to_le_bytes());
    out.extend_from_slice(&(c as u64).to_le_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<Tensor, HarnessError> {
    let bad = |m: &str| HarnessError::Format(format!("embeddings: {m}"));
    if bytes.len() < 24 || &bytes[..8] != EMB_MAGIC {
        return Err(bad("bad header"));
    }
    let word = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().expect("8 bytes")) as usize;
    let (r, c) = (word(8), word(16));
    let need = r.checked_mul(c).and_then(|n| n.checked_mul(8)).and_then(|n| n.checked_add(24));
    if need != Some(bytes.len()) {
        return Err(bad("length does not match shape"));
    }
    let data = bytes[24..].chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
    Ok(Tensor::matrix(r, c, data)?)
}

pub fn write_embeddings_bin(path: &Path, t: &Tensor) -> Result<(), HarnessError> {
    write_bytes_atomic(path, &encode_embeddings(t))?;
    Ok(())
}

pub fn read_embeddings_bin(path: &Path) -> Result<Tensor, HarnessError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_embeddings(&bytes)
}

/// `address,e0,e1,...` with full round-trip precision.
pub fn write_embeddings_csv<W: Write>(w: W, accounts: &[Address], t: &Tensor) -> Result<(), HarnessError> {
    if accounts.len() != t.rows() {
        return Err(HarnessError::Format(format!("{} accounts for {} embedding rows", accounts.len(), t.rows())));
    }
    let mut w = csv::Writer::from_writer(w);
    let mut header = vec!["address".to_string()];
    header.extend((0..t.cols()).map(|j| format!("e{j}")));
    w.write_record(&header).map_err(csv_err)?;
    for (i, a) in accounts.iter().enumerate() {
        let mut rec = vec![a.to_string()];
        rec.extend(t.row(i).iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_embeddings_csv<R: Read>(r: R) -> Result<(Vec<Address>, Tensor), HarnessError> {
    let mut rd = csv::Reader::from_reader(r);
    let cols = rd.headers().map_err(csv_err)?.len().saturating_sub(1);
    let (mut accounts, mut data) = (Vec::new(), Vec::new());
    for (i, rec) in rd.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let bad = || HarnessError::Format(format!("embeddings row {}", i + 1));
        accounts.push(Address::parse(rec.get(0).ok_or_else(bad)?).ok_or_else(bad)?);
        for j in 1..=cols {
            data.push(rec.get(j).ok_or_else(bad)?.parse::<f64>().map_err(|_| bad())?);
        }
    }
    let t = Tensor::matrix(accounts.len(), cols, data)?;
    Ok((accounts, t))
}

pub(crate) fn csv_err(e: csv::Error) -> HarnessError {
    HarnessError::Format(format!("csv: {e}"))
}

/// Exclusive ownership of a run directory; released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self, HarnessError> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".txfuse.lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(HarnessError::Locked(dir.display().to_string())),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_files_round_trip() {
        let t = Tensor::matrix(2, 3, vec![0.1, -2.5, 1e-300, 3.0, f64::MIN_POSITIVE, 7.25]).unwrap();
        assert_eq!(decode_embeddings(&encode_embeddings(&t)).unwrap(), t);
        let mut bytes = encode_embeddings(&t);
        bytes.pop();
        assert!(decode_embeddings(&bytes).is_err());
        let accts = vec![Address::from_index(1), Address::from_index(2)];
        let mut buf = Vec::new();
        write_embeddings_csv(&mut buf, &accts, &t).unwrap();
        let (a, back) = read_embeddings_csv(&buf[..]).unwrap();
        assert_eq!((a, back), (accts, t));
    }

    #[test]
    fn labels_round_trip_and_validation() {
        let l: BTreeMap<Address, u8> = (1..5).map(|i| (Address::from_index(i), (i % 2) as u8)).collect();
        let mut buf = Vec::new();
        write_labels(&mut buf, &l).unwrap();
        assert_eq!(read_labels(&buf[..]).unwrap(), l);
        let bad = format!("{},2\n", Address::from_index(1));
        assert!(matches!(read_labels(bad.as_bytes()), Err(HarnessError::Label(2))));
    }

    #[test]
    fn lock_is_exclusive() {
        let d = tempfile::tempdir().unwrap();
        let a = RunLock::acquire(d.path()).unwrap();
        assert!(matches!(RunLock::acquire(d.path()), Err(HarnessError::Locked(_))));
        drop(a);
        assert!(RunLock::acquire(d.path()).is_ok());
    }
}
