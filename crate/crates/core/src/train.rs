//! Decoder-only training and generation: teacher forcing with target-only
//! loss, Adam with warmup/decay and clipping, periodic validation with
//! best-checkpoint tracking, and greedy decoding with the stop condition.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{RateConfig, RunConfig};
use crate::error::{Error, Result};
use crate::io::align::resample_to_clock;
use crate::io::manifest::LoadedSample;
use crate::io::vocab::{Vocab, STOP_ID};
use crate::model::{DropoutCtx, FmtModel, ModelInput, SeqMode, TextSource};
use crate::optim::{adam_update, clip_global_norm, lr_at, AdamState};
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

const DROPOUT_STREAM: u64 = 0x44524f50; // distinct rng stream labels
const SHUFFLE_STREAM: u64 = 0x53485546;

/// A sample ready for the model: streams on the clock, tokens as ids.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub id: String,
    pub input: ModelInput,
    pub target: Vec<u32>,
}

fn prepare_stream(stream: &Tensor, rate: Option<f64>, reference: f64, l_max: usize) -> Result<Tensor> {
    if stream.rows() == 0 {
        return Ok(stream.clone());
    }
    match rate {
        Some(r) => resample_to_clock(stream, r, reference),
        None => resample_to_clock(stream, stream.rows() as f64, l_max as f64),
    }
}

fn scaled(t: Tensor, factor: f64) -> Tensor {
    if factor == 1.0 {
        return t;
    }
    let shape = t.shape().to_vec();
    let data = t.data().iter().map(|v| v * factor).collect();
    Tensor::new(shape, data).expect("scaling preserves length")
}

/// Resample the float streams onto the reference clock, apply the input
/// scale, and encode tokens.
pub fn prepare_sample(
    loaded: &LoadedSample,
    vocab: &Vocab,
    run: &RunConfig,
) -> Result<PreparedSample> {
    let l_max = run.model.l_max;
    let scale = run.model.input_scale;
    let visual = scaled(
        prepare_stream(&loaded.visual, run.rates.visual, run.rates.reference, l_max)?,
        scale,
    );
    let acoustic = scaled(
        prepare_stream(
            &loaded.acoustic,
            run.rates.acoustic,
            run.rates.reference,
            l_max,
        )?,
        scale,
    );
    let asr: Vec<u32> = loaded.asr_tokens.iter().map(|t| vocab.id(t)).collect();
    let ocr: Vec<u32> = loaded.ocr_tokens.iter().map(|t| vocab.id(t)).collect();
    Ok(PreparedSample {
        id: loaded.id.clone(),
        input: ModelInput {
            visual,
            acoustic,
            text: TextSource::Tokens { asr, ocr },
        },
        target: vocab.encode(&loaded.summary),
    })
}

/// The materialized LM sequence of one sample: source blocks, delimiter,
/// target region, positional embeddings included, plus its layout.
pub struct LmSequence {
    /// l_prime x d_x
    pub blocks: Tensor,
    pub layout: crate::sequence::LmLayout,
    pub source_pad: Vec<bool>,
}

/// Materialize the sequence a training or generation pass would consume.
/// `target` of `None` builds the inference layout (delimiter only).
pub fn build_lm_sequence(
    model: &FmtModel,
    input: &ModelInput,
    target: Option<&[u32]>,
    rates: &RateConfig,
) -> Result<LmSequence> {
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);
    let mode = match target {
        Some(target) => SeqMode::Train { target },
        None => SeqMode::Generate { emitted: &[] },
    };
    let pass = model.forward(
        &mut tape,
        &binding,
        input,
        mode,
        rates.textual,
        rates.reference,
        None,
    )?;
    crate::sequence::check_single_delimiter(&pass.layout)?;
    Ok(LmSequence {
        blocks: tape.value(pass.sequence).clone(),
        layout: pass.layout,
        source_pad: pass.source_pad,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Stepped {
        loss: f64,
        lr: f64,
        grad_norm: f64,
    },
    /// No sample in the batch had any loss-masked position; parameters are
    /// untouched.
    SkippedNoTargets,
}

fn wrap_sample_error(id: &str, e: Error) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("sample {id}: {msg}")),
        other => other,
    }
}

/// One teacher-forced step over a batch: pooled mean cross-entropy over all
/// loss-masked positions, global-norm clipping, one Adam update.
pub fn train_step(
    model: &mut FmtModel,
    batch: &[PreparedSample],
    optimizer: &mut AdamState,
    run: &RunConfig,
    step: u64,
) -> Result<StepOutcome> {
    let tc = &run.train;
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);
    let mut drop_rng = Rng::derive(tc.seed ^ DROPOUT_STREAM, step);

    let mut weighted = Vec::new();
    for sample in batch {
        if sample.target.is_empty() {
            continue;
        }
        let pass = model
            .forward(
                &mut tape,
                &binding,
                &sample.input,
                SeqMode::Train {
                    target: &sample.target,
                },
                run.rates.textual,
                run.rates.reference,
                Some(DropoutCtx {
                    rate: tc.dropout,
                    rng: &mut drop_rng,
                }),
            )
            .map_err(|e| wrap_sample_error(&sample.id, e))?;
        let count = pass.layout.masked_count();
        if count == 0 {
            continue;
        }
        let ce = tape
            .cross_entropy(pass.logits, &pass.layout.labels, &pass.layout.loss_mask)
            .map_err(|e| wrap_sample_error(&sample.id, e))?;
        if !tape.value(ce).scalar_value().is_finite() {
            return Err(Error::Numeric(format!(
                "sample {}: non-finite loss",
                sample.id
            )));
        }
        weighted.push((ce, count, sample.id.clone()));
    }
    if weighted.is_empty() {
        return Ok(StepOutcome::SkippedNoTargets);
    }

    let total: usize = weighted.iter().map(|(_, c, _)| c).sum();
    let mut acc = None;
    for (ce, count, id) in &weighted {
        let scaled = tape
            .scale(*ce, *count as f64)
            .map_err(|e| wrap_sample_error(id, e))?;
        acc = Some(match acc {
            None => scaled,
            Some(prev) => tape.add(prev, scaled)?,
        });
    }
    let loss = tape.scale(acc.expect("non-empty batch"), 1.0 / total as f64)?;
    let loss_value = tape.value(loss).scalar_value();

    let grads = tape.backward(loss)?;
    let ids = model.binding_ids(&binding).to_vec();
    let mut grad_tensors: Vec<Tensor> = ids
        .iter()
        .enumerate()
        .map(|(i, &id)| match grads.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(model.params()[i].1.shape().to_vec()),
        })
        .collect();
    let grad_norm = clip_global_norm(&mut grad_tensors, tc.clip_norm);
    let lr = lr_at(optimizer.step, tc);
    adam_update(model, &grad_tensors, optimizer, lr);
    Ok(StepOutcome::Stepped {
        loss: loss_value,
        lr,
        grad_norm,
    })
}

/// Pooled mean cross-entropy over all loss-masked positions, eval mode.
pub fn evaluate_loss(model: &FmtModel, samples: &[PreparedSample], rates: &RateConfig) -> Result<f64> {
    let mut total_loss = 0.0;
    let mut total_count = 0usize;
    for sample in samples {
        if sample.target.is_empty() {
            continue;
        }
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape);
        let pass = model
            .forward(
                &mut tape,
                &binding,
                &sample.input,
                SeqMode::Train {
                    target: &sample.target,
                },
                rates.textual,
                rates.reference,
                None,
            )
            .map_err(|e| wrap_sample_error(&sample.id, e))?;
        let count = pass.layout.masked_count();
        if count == 0 {
            continue;
        }
        let ce = tape.cross_entropy(pass.logits, &pass.layout.labels, &pass.layout.loss_mask)?;
        total_loss += tape.value(ce).scalar_value() * count as f64;
        total_count += count;
    }
    if total_count == 0 {
        return Err(Error::Contract("no loss-masked positions to evaluate".into()));
    }
    Ok(total_loss / total_count as f64)
}

/// Teacher-forced next-token accuracy over loss-masked positions.
pub fn token_accuracy(
    model: &FmtModel,
    samples: &[PreparedSample],
    rates: &RateConfig,
) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for sample in samples {
        if sample.target.is_empty() {
            continue;
        }
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape);
        let pass = model.forward(
            &mut tape,
            &binding,
            &sample.input,
            SeqMode::Train {
                target: &sample.target,
            },
            rates.textual,
            rates.reference,
            None,
        )?;
        let logits = tape.value(pass.logits);
        for t in 0..pass.layout.l_prime {
            if !pass.layout.loss_mask[t] {
                continue;
            }
            let row = logits.row(t);
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            total += 1;
            if best == pass.layout.labels[t] {
                hits += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Contract("no loss-masked positions to score".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// Greedy decoding: re-run the model after every emitted token, appending
/// the token into the textual region; stop at the stop token or `max_len`.
/// Ties break toward the lowest token id. The stop token is not part of the
/// output.
pub fn generate(
    model: &FmtModel,
    input: &ModelInput,
    rates: &RateConfig,
    max_len: usize,
) -> Result<Vec<u32>> {
    let mut emitted: Vec<u32> = Vec::new();
    for _ in 0..max_len {
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape);
        let pass = model.forward(
            &mut tape,
            &binding,
            input,
            SeqMode::Generate { emitted: &emitted },
            rates.textual,
            rates.reference,
            None,
        )?;
        let logits = tape.value(pass.logits);
        let row = logits.row(logits.rows() - 1);
        let mut best = 0usize;
        for j in 1..row.len() {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best as u32 == STOP_ID {
            break;
        }
        emitted.push(best as u32);
    }
    Ok(emitted)
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub steps_run: u64,
    pub final_train_loss: f64,
    pub final_val_loss: f64,
    pub best_val_loss: f64,
    pub best_dir: PathBuf,
    pub latest_dir: PathBuf,
    pub metrics_path: PathBuf,
}

/// Batch composition for a step: a pure function of (seed, step, n, batch
/// size), so interrupted and uninterrupted runs see identical data.
fn batch_indices(seed: u64, step: u64, n: usize, batch_size: usize) -> Vec<usize> {
    let per_epoch = (n / batch_size).max(1) as u64;
    let epoch = step / per_epoch;
    let slot = (step % per_epoch) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = Rng::derive(seed ^ SHUFFLE_STREAM, epoch);
    rng.shuffle(&mut order);
    let start = slot * batch_size;
    let end = (start + batch_size).min(n);
    order[start..end].to_vec()
}

/// The full loop: steps with periodic validation, append-only NDJSON
/// metrics, a resumable `latest` checkpoint and a `best` checkpoint by
/// validation loss. `resume_from` restores parameters and optimizer state
/// and continues from the recorded step.
pub fn train(
    model: &mut FmtModel,
    train_set: &[PreparedSample],
    val_set: &[PreparedSample],
    run: &RunConfig,
    out_dir: impl AsRef<Path>,
    resume_from: Option<&Path>,
) -> Result<TrainReport> {
    run.validate()?;
    if train_set.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics_path = out_dir.join("metrics.ndjson");
    let best_dir = out_dir.join("best");
    let latest_dir = out_dir.join("latest");

    let mut optimizer = match resume_from {
        Some(dir) => {
            let loaded = load_checkpoint(dir)?;
            if loaded.run_config.model != run.model {
                return Err(Error::Config(
                    "resume checkpoint was trained under a different model config".into(),
                ));
            }
            let opt = loaded.optimizer.ok_or_else(|| {
                Error::Config("resume checkpoint carries no optimizer state".into())
            })?;
            *model = loaded.model;
            opt
        }
        None => AdamState::new(model),
    };

    let mut metrics = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    if optimizer.step == 0 {
        writeln!(metrics, "{}", serde_json::json!({ "config": run.to_json() }))
            .map_err(|e| Error::io(&metrics_path, e))?;
    }

    let tc = &run.train;
    let mut best_val = f64::INFINITY;
    let mut window_loss = 0.0;
    let mut window_count = 0u64;
    let mut last_train = f64::NAN;
    let mut last_val = f64::NAN;

    let start = optimizer.step;
    for step in start..tc.total_steps {
        let indices = batch_indices(tc.seed, step, train_set.len(), tc.batch_size);
        let batch: Vec<PreparedSample> =
            indices.iter().map(|&i| train_set[i].clone()).collect();
        match train_step(model, &batch, &mut optimizer, run, step)? {
            StepOutcome::Stepped { loss, .. } => {
                window_loss += loss;
                window_count += 1;
                last_train = loss;
            }
            StepOutcome::SkippedNoTargets => {}
        }

        let done = step + 1 == tc.total_steps;
        if (step + 1) % tc.eval_interval == 0 || done {
            let train_loss = if window_count > 0 {
                window_loss / window_count as f64
            } else {
                last_train
            };
            let val_loss = if val_set.is_empty() {
                train_loss
            } else {
                evaluate_loss(model, val_set, &run.rates)?
            };
            window_loss = 0.0;
            window_count = 0;
            last_val = val_loss;
            writeln!(
                metrics,
                "{}",
                serde_json::json!({
                    "step": step + 1,
                    "train_loss": train_loss,
                    "val_loss": val_loss,
                })
            )
            .map_err(|e| Error::io(&metrics_path, e))?;
            save_checkpoint(&latest_dir, model, Some(&optimizer), run, step + 1)?;
            if val_loss < best_val {
                best_val = val_loss;
                save_checkpoint(&best_dir, model, Some(&optimizer), run, step + 1)?;
            }
        }
    }

    Ok(TrainReport {
        steps_run: tc.total_steps - start,
        final_train_loss: last_train,
        final_val_loss: last_val,
        best_val_loss: best_val,
        best_dir,
        latest_dir,
        metrics_path,
    })
}
