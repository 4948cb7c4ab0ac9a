//! Command-line surface: every subcommand prints machine-readable JSON on
//! stdout and human logs on stderr. Exit codes: 0 success, 1 contract or
//! format violations, 2 I/O failures, 3 numeric failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use mmsum_core::checkpoint::load_checkpoint;
use mmsum_core::config::RunConfig;
use mmsum_core::error::{Error, Result};
use mmsum_core::fusion;
use mmsum_core::gradcheck;
use mmsum_core::io::feature::{read_feature_file, write_feature_file};
use mmsum_core::io::manifest::{load_sample, read_manifest};
use mmsum_core::io::synth::{gen_synthetic_dataset, SynthProfile};
use mmsum_core::io::vocab::Vocab;
use mmsum_core::mfcc::{mfcc, read_wav_mono16, MfccConfig};
use mmsum_core::model::FmtModel;
use mmsum_core::rouge::evaluate_corpus;
use mmsum_core::train::{generate, prepare_sample, train, PreparedSample};

#[derive(Parser)]
#[command(
    name = "mmsum",
    version,
    about = "Multimodal abstractive summarization workflows"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multimodal dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        samples: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value = "toy")]
        profile: String,
    },
    /// Train on a dataset directory (manifest.json + vocab.json).
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "toy")]
        profile: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        eval_interval: Option<u64>,
        /// Samples held out (from the end of the manifest) for validation.
        #[arg(long)]
        val_count: Option<usize>,
        /// Resume from a checkpoint directory with optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Greedy-decode a summary for one sample using a trained checkpoint.
    Summarize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sample: String,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Score line-aligned hypothesis and reference files.
    Rouge {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Extract MFCC features from a 16-bit mono PCM WAV file.
    Mfcc {
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse ASR and OCR embedding streams with guided attention.
    Fuse {
        #[arg(long)]
        asr: PathBuf,
        #[arg(long)]
        ocr: PathBuf,
        #[arg(long)]
        wb: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Force gates to 1: plain concatenation baseline.
        #[arg(long)]
        ungated: bool,
        #[arg(long, default_value_t = fusion::DEFAULT_OCR_CAP)]
        ocr_cap: usize,
    },
    /// Gradient-check every primitive and the full toy model.
    Gradcheck {
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        rounds: usize,
    },
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 2,
        Error::Numeric(_) => 3,
        _ => 1,
    }
}

fn echo_config(run: &RunConfig) {
    eprintln!("effective config: {}", run.to_json());
}

fn load_run_config(config: &Option<PathBuf>, profile: &str) -> Result<RunConfig> {
    match config {
        Some(path) => RunConfig::load(path),
        None => RunConfig::for_profile(profile),
    }
}

fn load_dataset(data: &Path, run: &RunConfig) -> Result<(Vec<PreparedSample>, Vocab)> {
    let vocab = Vocab::load(data.join("vocab.json"))?;
    if vocab.len() != run.model.vocab_size {
        return Err(Error::Config(format!(
            "dataset vocabulary has {} tokens, model expects {}",
            vocab.len(),
            run.model.vocab_size
        )));
    }
    let records = read_manifest(data.join("manifest.json"))?;
    let samples = records
        .iter()
        .map(|r| prepare_sample(&load_sample(r, data)?, &vocab, run))
        .collect::<Result<Vec<_>>>()?;
    Ok((samples, vocab))
}

fn run_command(command: Command) -> Result<serde_json::Value> {
    match command {
        Command::Synth {
            out,
            samples,
            seed,
            profile,
        } => {
            let run = RunConfig::for_profile(&profile)?;
            echo_config(&run);
            let synth = SynthProfile::from_run(&run);
            let ds = gen_synthetic_dataset(&out, samples, seed, &synth)?;
            Ok(json!({
                "out": out,
                "samples": samples,
                "seed": seed,
                "profile": profile,
                "manifest": ds.manifest_path,
                "vocab": ds.vocab_path,
            }))
        }
        Command::Train {
            config,
            profile,
            data,
            out,
            steps,
            seed,
            batch_size,
            eval_interval,
            val_count,
            resume,
        } => {
            let mut run = load_run_config(&config, &profile)?;
            if let Some(steps) = steps {
                run.train.total_steps = steps;
            }
            if let Some(seed) = seed {
                run.seed = seed;
                run.train.seed = seed;
            }
            if let Some(batch_size) = batch_size {
                run.train.batch_size = batch_size;
            }
            if let Some(eval_interval) = eval_interval {
                run.train.eval_interval = eval_interval;
            }
            run.validate()?;
            echo_config(&run);
            let (samples, _) = load_dataset(&data, &run)?;
            let held = val_count.unwrap_or_else(|| (samples.len() / 8).clamp(1, 64));
            if held >= samples.len() {
                return Err(Error::Config(format!(
                    "validation count {held} leaves no training samples"
                )));
            }
            let split = samples.len() - held;
            let (train_set, val_set) = samples.split_at(split);
            // On resume the loaded checkpoint replaces these parameters.
            let mut model = FmtModel::init(run.model.clone(), run.seed)?;
            let report = train(
                &mut model,
                train_set,
                val_set,
                &run,
                &out,
                resume.as_deref(),
            )?;
            Ok(json!({
                "steps_run": report.steps_run,
                "final_train_loss": report.final_train_loss,
                "final_val_loss": report.final_val_loss,
                "best_val_loss": report.best_val_loss,
                "best": report.best_dir,
                "latest": report.latest_dir,
                "metrics": report.metrics_path,
                "parameters": model.param_count(),
                "config": run.to_json(),
            }))
        }
        Command::Summarize {
            ckpt,
            data,
            sample,
            max_len,
        } => {
            let loaded = load_checkpoint(&ckpt)?;
            let run = loaded.run_config;
            echo_config(&run);
            let vocab = Vocab::load(data.join("vocab.json"))?;
            let records = read_manifest(data.join("manifest.json"))?;
            let record = records
                .iter()
                .find(|r| r.id == sample)
                .ok_or_else(|| Error::Input(format!("sample {sample} not in manifest")))?;
            let prepared = prepare_sample(&load_sample(record, &data)?, &vocab, &run)?;
            let cap = max_len
                .unwrap_or(run.model.m_max)
                .min(run.model.m_max);
            let ids = generate(&loaded.model, &prepared.input, &run.rates, cap)?;
            let tokens: Vec<String> = ids.iter().map(|&i| vocab.token(i).to_string()).collect();
            Ok(json!({
                "id": sample,
                "token_ids": ids,
                "tokens": tokens,
                "text": vocab.decode(&ids),
                "max_len": cap,
                "checkpoint_step": loaded.step,
            }))
        }
        Command::Rouge { hyp, reference } => {
            let report = evaluate_corpus(&hyp, &reference)?;
            Ok(serde_json::to_value(&report).expect("report serializes"))
        }
        Command::Mfcc { wav, out } => {
            let config = MfccConfig::default();
            let (signal, rate) = read_wav_mono16(&wav)?;
            if rate != config.sample_rate {
                return Err(Error::Input(format!(
                    "wav sample rate {rate} does not match configured {}",
                    config.sample_rate
                )));
            }
            let features = mfcc(&signal, &config)?;
            write_feature_file(&out, &features.frames)?;
            Ok(json!({
                "wav": wav,
                "out": out,
                "frames": features.frames.shape()[0],
                "width": features.frames.shape()[1],
                "duration_seconds": signal.len() as f64 / rate as f64,
            }))
        }
        Command::Fuse {
            asr,
            ocr,
            wb,
            out,
            ungated,
            ocr_cap,
        } => {
            let asr_t = read_feature_file(&asr)?;
            let ocr_t = fusion::truncate_ocr(&read_feature_file(&ocr)?, ocr_cap);
            let wb_t = read_feature_file(&wb)?;
            let result = if ungated {
                // gates pinned to 1: plain concatenation baseline
                let mut tape = mmsum_core::tape::Tape::new();
                let a = tape.input(asr_t.clone());
                let o = tape.input(ocr_t.clone());
                let w = tape.input(wb_t.clone());
                let nodes = fusion::fuse_on_tape(&mut tape, a, o, w, false)?;
                let fused = tape.value(nodes.fused).clone();
                let gates = tape.value(nodes.gates).clone();
                (fused, gates)
            } else {
                let r = fusion::fuse(&asr_t, &ocr_t, &wb_t)?;
                (r.fused, r.gates)
            };
            write_feature_file(&out, &result.0)?;
            let gates_mean = if result.1.numel() > 0 {
                result.1.data().iter().sum::<f64>() / result.1.numel() as f64
            } else {
                0.0
            };
            Ok(json!({
                "out": out,
                "asr_rows": asr_t.shape()[0],
                "ocr_rows": ocr_t.shape()[0],
                "fused_rows": result.0.shape()[0],
                "gates_mean": gates_mean,
                "ungated": ungated,
            }))
        }
        Command::Gradcheck { seed, rounds } => {
            let reports = gradcheck::primitive_suite(seed, rounds)?;
            let model_err =
                gradcheck::model_gradcheck(&RunConfig::toy().model, seed, 5, 12)?;
            let primitive_max = reports
                .iter()
                .map(|r| r.max_rel_err)
                .fold(0.0f64, f64::max);
            let max_rel_err = primitive_max.max(model_err);
            let pass = max_rel_err < gradcheck::TOLERANCE;
            let value = json!({
                "primitives": reports
                    .iter()
                    .map(|r| json!({ "name": r.name, "max_rel_err": r.max_rel_err }))
                    .collect::<Vec<_>>(),
                "model_max_rel_err": model_err,
                "max_rel_err": max_rel_err,
                "tolerance": gradcheck::TOLERANCE,
                "pass": pass,
            });
            if !pass {
                println!("{value}");
                return Err(Error::Numeric(format!(
                    "gradient check failed: max relative error {max_rel_err}"
                )));
            }
            Ok(value)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version print to stdout and succeed; everything
            // else is a usage error.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run_command(cli.command) {
        Ok(value) => {
            println!("{}", serde_json::to_string_pretty(&value).expect("json"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
