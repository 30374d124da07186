//! Canonical record files and dataset manifests.
//!
//! ```text
//! magic       8 bytes "BEATECG\0"
//! version     u32 LE
//! header_len  u32 LE, followed by a JSON RecordHeader
//! samples     C × T f32 LE, lead-major (row c holds lead c)
//! labels      ceil(K / 8) bytes, bit k of byte k/8 (LSB first)
//! ```
//! A dataset directory holds one `.ecg` file per record plus a
//! `manifest.json` naming the files of each split.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EcgRecord, Split};
use crate::binio::Cursor;
use crate::error::{Error, Result};
use crate::FORMAT_VERSION;

const MAGIC: &[u8; 8] = b"BEATECG\0";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECORD_EXT: &str = "ecg";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordHeader {
    pub record_id: String,
    pub fs: u32,
    pub n_leads: usize,
    pub n_samples: usize,
    pub n_labels: usize,
    pub lead_names: Vec<String>,
    pub label_names: Vec<String>,
}

pub fn encode_record(rec: &EcgRecord) -> Result<Vec<u8>> {
    let header = RecordHeader {
        record_id: rec.record_id.clone(),
        fs: rec.fs,
        n_leads: rec.n_leads(),
        n_samples: rec.n_samples(),
        n_labels: rec.labels.len(),
        lead_names: rec.lead_names.clone(),
        label_names: rec.label_names.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + json.len() + 4 * rec.n_leads() * rec.n_samples());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for v in rec.signal.iter().flatten() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    buf.extend(pack_bits(&rec.labels));
    Ok(buf)
}

pub fn decode_record(bytes: &[u8], path: &Path) -> Result<EcgRecord> {
    let mut c = Cursor::new(bytes, path, "record");
    c.magic(MAGIC)?;
    c.version()?;
    let len = c.u32()? as usize;
    let header: RecordHeader = serde_json::from_slice(c.take(len)?).map_err(|e| c.bad(&e.to_string()))?;
    if header.lead_names.len() != header.n_leads || header.label_names.len() != header.n_labels {
        return Err(c.bad("header counts disagree with name lists"));
    }
    let signal = (0..header.n_leads)
        .map(|_| Ok(c.f32s(header.n_samples)?.into_iter().map(f64::from).collect()))
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let labels = unpack_bits(c.take(header.n_labels.div_ceil(8))?, header.n_labels);
    c.finish()?;
    EcgRecord::new(
        header.record_id,
        header.fs,
        header.lead_names,
        signal,
        header.label_names,
        labels,
    )
}

pub fn write_record(path: &Path, rec: &EcgRecord) -> Result<()> {
    std::fs::write(path, encode_record(rec)?)?;
    Ok(())
}

pub fn read_record(path: &Path) -> Result<EcgRecord> {
    decode_record(&std::fs::read(path)?, path)
}

pub(crate) fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
        out[i / 8] |= 1 << (i % 8);
    }
    out
}

pub(crate) fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

/// Lists the files of each split, relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub label_names: Vec<String>,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetManifest {
    pub fn split(&self, name: &str) -> Result<&[String]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::invalid("split", format!("unknown split {other:?}"))),
        }
    }
}

fn file_name(rec: &EcgRecord) -> String {
    let safe: String = rec
        .record_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{safe}.{RECORD_EXT}")
}

/// Writes every record plus `manifest.json` into `dir` (created if needed).
pub fn write_dataset(dir: &Path, data: &Split<EcgRecord>) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir)?;
    let label_names = [&data.train, &data.val, &data.test]
        .into_iter()
        .flatten()
        .next()
        .map(|r| r.label_names.clone())
        .unwrap_or_default();
    let write_all = |recs: &[EcgRecord]| -> Result<Vec<String>> {
        recs.iter()
            .map(|r| {
                let name = file_name(r);
                write_record(&dir.join(&name), r)?;
                Ok(name)
            })
            .collect()
    };
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        label_names,
        train: write_all(&data.train)?,
        val: write_all(&data.val)?,
        test: write_all(&data.test)?,
    };
    let all: Vec<&String> = manifest.train.iter().chain(&manifest.val).chain(&manifest.test).collect();
    let unique: std::collections::BTreeSet<&&String> = all.iter().collect();
    if unique.len() != all.len() {
        return Err(Error::invalid("record_id", "two records map to the same file name"));
    }
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let manifest: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format {
            kind: "dataset manifest",
            path,
            reason: format!("unsupported version {}", manifest.format_version),
        });
    }
    Ok(manifest)
}

pub fn read_split(dir: &Path, manifest: &DatasetManifest, split: &str) -> Result<Vec<EcgRecord>> {
    manifest.split(split)?.iter().map(|f| read_record(&dir.join(f))).collect()
}

pub fn read_dataset(dir: &Path) -> Result<Split<EcgRecord>> {
    let m = read_manifest(dir)?;
    Ok(Split {
        train: read_split(dir, &m, "train")?,
        val: read_split(dir, &m, "val")?,
        test: read_split(dir, &m, "test")?,
    })
}

/// All `.ecg` files directly inside `dir`, sorted by file name.
pub fn list_records(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == RECORD_EXT));
    paths.sort();
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str) -> EcgRecord {
        EcgRecord::new(
            id,
            100,
            vec!["I".into(), "II".into()],
            vec![(0..250).map(|i| i as f64 * 0.25).collect(), vec![-1.5; 250]],
            vec!["a".into(), "b".into(), "c".into()],
            vec![true, false, true],
        )
        .unwrap()
    }

    #[test]
    fn record_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.ecg");
        let rec = record("r1");
        write_record(&path, &rec).unwrap();
        assert_eq!(read_record(&path).unwrap(), rec);
    }

    #[test]
    fn bits_roundtrip() {
        let bits: Vec<bool> = (0..19).map(|i| i % 3 == 0).collect();
        let packed = pack_bits(&bits);
        assert_eq!(packed.len(), 3);
        assert_eq!(packed[0], 0b0100_1001);
        assert_eq!(unpack_bits(&packed, 19), bits);
    }

    #[test]
    fn truncated_record_rejected() {
        let bytes = encode_record(&record("x")).unwrap();
        let err = decode_record(&bytes[..bytes.len() - 3], Path::new("x.ecg")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    #[test]
    fn dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let data = Split {
            train: vec![record("a"), record("b")],
            val: vec![record("c")],
            test: vec![record("d/e")],
        };
        let m = write_dataset(dir.path(), &data).unwrap();
        assert_eq!(m.test, vec!["d_e.ecg".to_string()]);
        assert_eq!(read_dataset(dir.path()).unwrap(), data);
        assert_eq!(list_records(dir.path()).unwrap().len(), 4);
    }
}
