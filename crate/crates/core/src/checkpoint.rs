//! Checkpoints: one feature file per named parameter plus a JSON index of
//! names, files, shapes, and the verbatim run configuration. Optimizer
//! moments ride along so training can resume exactly.
//!
//! Feature files carry f32 payloads, so each f64 value is stored as a
//! hi/lo pair of f32s (hi = nearest f32, lo = residual). Reconstruction is
//! accurate to ~1e-16 relative, which keeps resumed runs on the
//! uninterrupted trajectory, and the encoding is deterministic, so equal
//! parameters give byte-identical checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::feature::{read_feature_file, write_feature_file};
use crate::model::FmtModel;
use crate::optim::AdamState;
use crate::tensor::Tensor;

const INDEX_FILE: &str = "index.json";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointIndex {
    config_version: u32,
    step: u64,
    run_config: RunConfig,
    params: Vec<ParamEntry>,
    optimizer: Option<OptimizerIndex>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerIndex {
    step: u64,
    m_files: Vec<String>,
    v_files: Vec<String>,
}

/// Split every f64 into a hi/lo f32 pair: shape [2, n].
fn encode_split(t: &Tensor) -> Tensor {
    let n = t.numel();
    let mut data = vec![0.0f64; 2 * n];
    for (i, &v) in t.data().iter().enumerate() {
        let hi = v as f32 as f64;
        data[i] = hi;
        data[n + i] = v - hi;
    }
    Tensor::new(vec![2, n], data).unwrap()
}

fn decode_split(pair: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let expect: usize = shape.iter().product();
    if pair.rank() != 2 || pair.shape()[0] != 2 || pair.shape()[1] != expect {
        return Err(Error::Config(format!(
            "split-encoded tensor has shape {:?}, expected [2, {expect}]",
            pair.shape()
        )));
    }
    let n = expect;
    let data: Vec<f64> = (0..n).map(|i| pair.data()[i] + pair.data()[n + i]).collect();
    Tensor::new(shape.to_vec(), data)
}

fn param_file(name: &str) -> String {
    format!("{name}.flrt")
}

pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    model: &FmtModel,
    optimizer: Option<&AdamState>,
    run_config: &RunConfig,
    step: u64,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for (info, (_, tensor)) in model.param_infos().iter().zip(model.params()) {
        let file = param_file(&info.name);
        write_feature_file(dir.join(&file), &encode_split(tensor))?;
        entries.push(ParamEntry {
            name: info.name.clone(),
            file,
            shape: info.shape.clone(),
        });
    }
    let optimizer_index = match optimizer {
        Some(state) => {
            let mut m_files = Vec::new();
            let mut v_files = Vec::new();
            for (i, (name, _)) in model.params().iter().enumerate() {
                let m_file = format!("opt-m.{}", param_file(name));
                let v_file = format!("opt-v.{}", param_file(name));
                write_feature_file(dir.join(&m_file), &encode_split(&state.m[i]))?;
                write_feature_file(dir.join(&v_file), &encode_split(&state.v[i]))?;
                m_files.push(m_file);
                v_files.push(v_file);
            }
            Some(OptimizerIndex {
                step: state.step,
                m_files,
                v_files,
            })
        }
        None => None,
    };
    let index = CheckpointIndex {
        config_version: crate::config::CONFIG_VERSION,
        step,
        run_config: run_config.clone(),
        params: entries,
        optimizer: optimizer_index,
    };
    let index_path = dir.join(INDEX_FILE);
    let json = serde_json::to_string_pretty(&index)
        .map_err(|e| Error::format(&index_path, e.to_string()))?;
    fs::write(&index_path, json).map_err(|e| Error::io(&index_path, e))
}

pub struct LoadedCheckpoint {
    pub model: FmtModel,
    pub optimizer: Option<AdamState>,
    pub run_config: RunConfig,
    pub step: u64,
}

/// Load and verify: every parameter present, every shape as the
/// configuration demands.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<LoadedCheckpoint> {
    let dir = dir.as_ref();
    let index_path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let index: CheckpointIndex =
        serde_json::from_str(&text).map_err(|e| Error::format(&index_path, e.to_string()))?;
    index.run_config.validate()?;

    let mut params = Vec::with_capacity(index.params.len());
    for entry in &index.params {
        let raw = read_feature_file(dir.join(&entry.file))?;
        let tensor = decode_split(&raw, &entry.shape)?;
        params.push((entry.name.clone(), tensor));
    }
    let model = FmtModel::from_params(index.run_config.model.clone(), params)?;

    let optimizer = match &index.optimizer {
        Some(opt) => {
            if opt.m_files.len() != model.params().len()
                || opt.v_files.len() != model.params().len()
            {
                return Err(Error::Config(
                    "optimizer state does not cover every parameter".into(),
                ));
            }
            let mut m = Vec::new();
            let mut v = Vec::new();
            for (i, (_, tensor)) in model.params().iter().enumerate() {
                m.push(decode_split(
                    &read_feature_file(dir.join(&opt.m_files[i]))?,
                    tensor.shape(),
                )?);
                v.push(decode_split(
                    &read_feature_file(dir.join(&opt.v_files[i]))?,
                    tensor.shape(),
                )?);
            }
            Some(AdamState {
                step: opt.step,
                m,
                v,
            })
        }
        None => None,
    };

    Ok(LoadedCheckpoint {
        model,
        optimizer,
        run_config: index.run_config,
        step: index.step,
    })
}

/// Compare two checkpoint directories byte for byte.
pub fn dirs_identical(a: impl AsRef<Path>, b: impl AsRef<Path>) -> Result<bool> {
    let list = |d: &Path| -> Result<Vec<PathBuf>> {
        let mut out: Vec<PathBuf> = fs::read_dir(d)
            .map_err(|e| Error::io(d, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        out.sort();
        Ok(out)
    };
    let (fa, fb) = (list(a.as_ref())?, list(b.as_ref())?);
    if fa.len() != fb.len() {
        return Ok(false);
    }
    for (pa, pb) in fa.iter().zip(&fb) {
        if pa.file_name() != pb.file_name() {
            return Ok(false);
        }
        let ba = fs::read(pa).map_err(|e| Error::io(pa, e))?;
        let bb = fs::read(pb).map_err(|e| Error::io(pb, e))?;
        if ba != bb {
            return Ok(false);
        }
    }
    Ok(true)
}
