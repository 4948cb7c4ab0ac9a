//! Sample manifests: one JSON array of records pointing at per-sample
//! feature files and token transcripts, with the reference summary inline.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::feature::read_feature_file;
use super::vocab::tokenize;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub visual: PathBuf,
    pub acoustic: PathBuf,
    pub asr: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ocr: Option<PathBuf>,
    pub summary: String,
}

/// A sample with every referenced file pulled into memory.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub id: String,
    pub visual: Tensor,
    pub acoustic: Tensor,
    pub asr_tokens: Vec<String>,
    pub ocr_tokens: Vec<String>,
    pub summary: String,
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<SampleRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[SampleRecord]) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(records)
        .map_err(|e| Error::format(path, e.to_string()))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

fn read_tokens(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(tokenize(&text))
}

/// Load one record; relative paths resolve against `base`.
pub fn load_sample(record: &SampleRecord, base: &Path) -> Result<LoadedSample> {
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    Ok(LoadedSample {
        id: record.id.clone(),
        visual: read_feature_file(resolve(&record.visual))?,
        acoustic: read_feature_file(resolve(&record.acoustic))?,
        asr_tokens: read_tokens(&resolve(&record.asr))?,
        ocr_tokens: match &record.ocr {
            Some(p) => read_tokens(&resolve(p))?,
            None => Vec::new(),
        },
        summary: record.summary.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::feature::write_feature_file;

    #[test]
    fn manifest_round_trip_preserves_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let records: Vec<SampleRecord> = (0..5)
            .map(|i| SampleRecord {
                id: format!("s{i}"),
                visual: PathBuf::from(format!("s{i}.visual.flrt")),
                acoustic: PathBuf::from(format!("s{i}.acoustic.flrt")),
                asr: PathBuf::from(format!("s{i}.asr.txt")),
                ocr: if i % 2 == 0 {
                    Some(PathBuf::from(format!("s{i}.ocr.txt")))
                } else {
                    None
                },
                summary: format!("summary {i}"),
            })
            .collect();
        write_manifest(&path, &records).unwrap();
        let back = read_manifest(&path).unwrap();
        let ids: Vec<&str> = back.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, vec!["s0", "s1", "s2", "s3", "s4"]);
        assert!(back[1].ocr.is_none());
    }

    #[test]
    fn load_sample_reads_all_files() {
        let dir = tempfile::tempdir().unwrap();
        write_feature_file(dir.path().join("v.flrt"), &Tensor::zeros(vec![3, 2])).unwrap();
        write_feature_file(dir.path().join("a.flrt"), &Tensor::zeros(vec![4, 2])).unwrap();
        fs::write(dir.path().join("t.txt"), "Hello World").unwrap();
        let record = SampleRecord {
            id: "x".into(),
            visual: "v.flrt".into(),
            acoustic: "a.flrt".into(),
            asr: "t.txt".into(),
            ocr: None,
            summary: "a summary".into(),
        };
        let sample = load_sample(&record, dir.path()).unwrap();
        assert_eq!(sample.visual.shape(), &[3, 2]);
        assert_eq!(sample.asr_tokens, vec!["hello", "world"]);
        assert!(sample.ocr_tokens.is_empty());
    }

    #[test]
    fn missing_file_surfaces_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let record = SampleRecord {
            id: "x".into(),
            visual: "absent.flrt".into(),
            acoustic: "absent.flrt".into(),
            asr: "absent.txt".into(),
            ocr: None,
            summary: String::new(),
        };
        assert!(matches!(
            load_sample(&record, dir.path()),
            Err(Error::Io { .. })
        ));
    }
}
