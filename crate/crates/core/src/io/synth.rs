//! Synthetic multimodal dataset generator.
//!
//! Each sample's timeline splits into `m` equal segments, and every segment
//! is assigned one dominant modality, drawn uniformly. The target summary
//! names the dominant modality of each segment in order, so the summary is a
//! deterministic function of the input:
//!
//! - visual-dominant segments carry visual rows of norm `amp_hi`, acoustic
//!   rows of norm `amp_lo`;
//! - acoustic-dominant segments are the mirror image;
//! - text-dominant segments zero both float streams, leaving the token
//!   stream as the largest block.
//!
//! Token rows count as unit-norm (a one-hot indicator has norm 1), so
//! "largest mean row norm per segment" is well defined across all three
//! modalities and is recomputable from the emitted files alone.
//!
//! The OCR stream duplicates a random subset of ASR tokens and mixes in
//! novel tokens, so redundancy gating in the fusion stage has something to
//! suppress. Generation is seed-deterministic byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::feature::write_feature_file;
use super::manifest::{write_manifest, SampleRecord};
use super::vocab::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Visual,
    Acoustic,
    Textual,
}

impl Modality {
    pub fn token(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Acoustic => "acoustic",
            Modality::Textual => "textual",
        }
    }

    fn from_index(i: usize) -> Self {
        match i {
            0 => Modality::Visual,
            1 => Modality::Acoustic,
            _ => Modality::Textual,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthProfile {
    /// Timesteps per sample on the reference clock.
    pub l: usize,
    /// Block width the downstream model will project into.
    pub d_b: usize,
    /// Summary length = number of segments.
    pub m: usize,
    pub vocab_size: usize,
    pub d_visual: usize,
    pub d_acoustic: usize,
    /// Inclusive ASR / OCR token count ranges.
    pub asr_len: (usize, usize),
    pub ocr_len: (usize, usize),
    /// Probability that an OCR token duplicates an ASR token.
    pub ocr_duplicate_frac: f64,
    /// Row norm of the dominant float modality.
    pub amp_hi: f64,
    /// Row norm of a non-dominant float modality.
    pub amp_lo: f64,
}

impl SynthProfile {
    pub fn toy() -> Self {
        SynthProfile {
            l: 16,
            d_b: 16,
            m: 4,
            vocab_size: 32,
            d_visual: 20,
            d_acoustic: 12,
            asr_len: (8, 12),
            ocr_len: (3, 5),
            ocr_duplicate_frac: 0.5,
            amp_hi: 2.0,
            amp_lo: 0.3,
        }
    }

    /// Derive a generator profile from a run configuration, keeping the
    /// toy profile's proportions at any scale.
    pub fn from_run(run: &crate::config::RunConfig) -> Self {
        let l = run.model.l_max;
        SynthProfile {
            l,
            d_b: run.model.d_b,
            m: run.model.m_max,
            vocab_size: run.model.vocab_size,
            d_visual: run.model.d_visual,
            d_acoustic: run.model.d_acoustic,
            asr_len: ((l / 2).max(1), (3 * l / 4).max(1)),
            ocr_len: (l / 5, (l / 3).max(1)),
            ocr_duplicate_frac: 0.5,
            amp_hi: 2.0,
            amp_lo: 0.3,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.l == 0 || self.m == 0 || self.l < self.m {
            return Err(Error::Config(format!(
                "need l >= m >= 1, got l={} m={}",
                self.l, self.m
            )));
        }
        if self.vocab_size < 12 {
            return Err(Error::Config(format!(
                "vocab_size {} too small for reserved + class + filler tokens",
                self.vocab_size
            )));
        }
        if self.asr_len.0 == 0 || self.asr_len.0 > self.asr_len.1 {
            return Err(Error::Config("bad asr_len range".into()));
        }
        if self.ocr_len.0 > self.ocr_len.1 {
            return Err(Error::Config("bad ocr_len range".into()));
        }
        Ok(())
    }

    /// The vocabulary every generated dataset shares: reserved block, the
    /// three class tokens, then filler and OCR-only novel tokens.
    pub fn vocab(&self) -> Vocab {
        let mut tokens: Vec<String> =
            vec!["visual".into(), "acoustic".into(), "textual".into()];
        let remaining = self.vocab_size - super::vocab::RESERVED.len() - tokens.len();
        let n_filler = (remaining * 2) / 3;
        for i in 0..n_filler {
            tokens.push(format!("w{i:02}"));
        }
        for i in 0..remaining - n_filler {
            tokens.push(format!("o{i:02}"));
        }
        Vocab::from_token_list(tokens, 1)
    }

    fn filler_tokens(&self) -> Vec<String> {
        let remaining = self.vocab_size - super::vocab::RESERVED.len() - 3;
        (0..(remaining * 2) / 3).map(|i| format!("w{i:02}")).collect()
    }

    fn novel_tokens(&self) -> Vec<String> {
        let remaining = self.vocab_size - super::vocab::RESERVED.len() - 3;
        let n_filler = (remaining * 2) / 3;
        (0..remaining - n_filler).map(|i| format!("o{i:02}")).collect()
    }
}

/// Segment index for timestep `t` when `l` timesteps split into `m` parts.
pub fn segment_of(t: usize, l: usize, m: usize) -> usize {
    (t * m / l).min(m - 1)
}

/// Recompute the dominant modality per segment from raw streams, under the
/// convention that token rows have unit norm. This is the inverse of the
/// generator's construction and is used to audit emitted datasets.
pub fn dominant_modalities(visual: &Tensor, acoustic: &Tensor, l: usize, m: usize) -> Vec<Modality> {
    let mut sums = vec![[0.0f64; 3]; m];
    let mut counts = vec![0usize; m];
    for t in 0..l {
        let seg = segment_of(t, l, m);
        let norm = |stream: &Tensor| -> f64 {
            if t < stream.rows() {
                stream.row(t).iter().map(|v| v * v).sum::<f64>().sqrt()
            } else {
                0.0
            }
        };
        sums[seg][0] += norm(visual);
        sums[seg][1] += norm(acoustic);
        sums[seg][2] += 1.0; // token rows: unit-norm indicator at every clock tick
        counts[seg] += 1;
    }
    sums.iter()
        .map(|s| {
            let mut best = 0;
            for i in 1..3 {
                if s[i] > s[best] {
                    best = i;
                }
            }
            Modality::from_index(best)
        })
        .collect()
}

/// A row with exactly the requested L2 norm (or all zeros for norm 0).
fn row_with_norm(d: usize, norm: f64, rng: &mut Rng) -> Vec<f64> {
    if norm == 0.0 {
        return vec![0.0; d];
    }
    loop {
        let raw: Vec<f64> = (0..d).map(|_| rng.range(-1.0, 1.0)).collect();
        let len = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if len > 1e-3 {
            return raw.iter().map(|v| v * norm / len).collect();
        }
    }
}

/// Variant dataset for redundancy-gating experiments. The first quarter of
/// the clock is covered by ASR tokens and behaves like the base generator.
/// The remaining segments are covered by OCR tokens and carry deliberately
/// ambiguous float patterns: a visual-class segment and a textual-class
/// segment can present identical visual/acoustic amplitudes, and only the
/// OCR content distinguishes them, because duplicated tokens carry no new
/// information and count as zero-norm under the dominance convention while
/// novel tokens count as unit rows. Crucially, duplicates and novel tokens
/// come from the same filler pool: a token is redundant only relative to
/// this sample's transcript, so no lexical shortcut exists. A model that
/// filters redundancy reads the class directly off the gated textual
/// energy; a model that cannot must match OCR tokens against the
/// transcript the hard way.
///
/// Duplicate draws are tuned so half of all OCR tokens duplicate ASR
/// tokens in expectation.
pub fn gen_redundant_variant(
    out_dir: impl AsRef<Path>,
    n_samples: usize,
    seed: u64,
    profile: &SynthProfile,
) -> Result<GeneratedDataset> {
    profile.validate()?;
    if profile.l % profile.m != 0 || profile.m < 2 {
        return Err(Error::Config(
            "redundant variant needs l divisible by m and at least two segments".into(),
        ));
    }
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let vocab = profile.vocab();
    let vocab_path = out_dir.join("vocab.json");
    vocab.save(&vocab_path)?;

    let fillers = profile.filler_tokens();
    let seg_len = profile.l / profile.m;
    let amp_mid = 0.9;
    let mut rng = Rng::new(seed);
    let mut records = Vec::with_capacity(n_samples);

    for i in 0..n_samples {
        let id = format!("s{i:05}");
        let mut visual = Tensor::zeros(vec![profile.l, profile.d_visual]);
        let mut acoustic = Tensor::zeros(vec![profile.l, profile.d_acoustic]);
        let mut asr: Vec<String> = Vec::new();
        let mut ocr: Vec<String> = Vec::new();
        let mut classes = Vec::with_capacity(profile.m);

        for seg in 0..profile.m {
            let class = Modality::from_index(rng.below(3));
            classes.push(class);
            let ocr_backed = seg > 0;
            // Float amplitudes: the ASR-backed segment keeps the base
            // semantics; OCR-backed segments use the ambiguous mid/lo
            // pattern, with the textual class mimicking one of the others.
            let (v_amp, a_amp) = if !ocr_backed {
                match class {
                    Modality::Visual => (profile.amp_hi, profile.amp_lo),
                    Modality::Acoustic => (profile.amp_lo, profile.amp_hi),
                    Modality::Textual => (0.0, 0.0),
                }
            } else {
                match class {
                    Modality::Visual => (amp_mid, profile.amp_lo),
                    Modality::Acoustic => (profile.amp_lo, amp_mid),
                    Modality::Textual => {
                        if rng.uniform() < 0.5 {
                            (amp_mid, profile.amp_lo)
                        } else {
                            (profile.amp_lo, amp_mid)
                        }
                    }
                }
            };
            for t in seg * seg_len..(seg + 1) * seg_len {
                let vrow = row_with_norm(profile.d_visual, v_amp, &mut rng);
                let arow = row_with_norm(profile.d_acoustic, a_amp, &mut rng);
                let vw = visual.cols();
                visual.data_mut()[t * vw..(t + 1) * vw].copy_from_slice(&vrow);
                let aw = acoustic.cols();
                acoustic.data_mut()[t * aw..(t + 1) * aw].copy_from_slice(&arow);
            }
            if !ocr_backed {
                for _ in 0..seg_len {
                    asr.push(fillers[rng.below(fillers.len())].clone());
                }
            } else {
                for _ in 0..seg_len {
                    let duplicate = match class {
                        // Non-textual segments are redundancy-heavy; the
                        // 3/4 rate makes duplicates half of all OCR tokens
                        // overall (2/3 of segments at 3/4 density).
                        Modality::Visual | Modality::Acoustic => rng.uniform() < 0.75,
                        Modality::Textual => false,
                    };
                    if duplicate {
                        ocr.push(asr[rng.below(asr.len())].clone());
                    } else {
                        // Same pool as ASR, minus this sample's own tokens:
                        // novelty is relative, never lexical.
                        loop {
                            let tok = &fillers[rng.below(fillers.len())];
                            if !asr.contains(tok) {
                                ocr.push(tok.clone());
                                break;
                            }
                        }
                    }
                }
            }
        }

        let summary = classes
            .iter()
            .map(|c| c.token())
            .collect::<Vec<_>>()
            .join(" ");
        let visual_path = format!("{id}.visual.flrt");
        let acoustic_path = format!("{id}.acoustic.flrt");
        let asr_path = format!("{id}.asr.txt");
        let ocr_path = format!("{id}.ocr.txt");
        write_feature_file(out_dir.join(&visual_path), &visual)?;
        write_feature_file(out_dir.join(&acoustic_path), &acoustic)?;
        fs::write(out_dir.join(&asr_path), asr.join(" "))
            .map_err(|e| Error::io(out_dir.join(&asr_path), e))?;
        fs::write(out_dir.join(&ocr_path), ocr.join(" "))
            .map_err(|e| Error::io(out_dir.join(&ocr_path), e))?;
        records.push(SampleRecord {
            id,
            visual: visual_path.into(),
            acoustic: acoustic_path.into(),
            asr: asr_path.into(),
            ocr: Some(ocr_path.into()),
            summary,
        });
    }

    let manifest_path = out_dir.join("manifest.json");
    write_manifest(&manifest_path, &records)?;
    Ok(GeneratedDataset {
        manifest_path,
        vocab_path,
        records,
    })
}

pub struct GeneratedDataset {
    pub manifest_path: PathBuf,
    pub vocab_path: PathBuf,
    pub records: Vec<SampleRecord>,
}

/// Emit `n_samples` samples under `out_dir`: a manifest, a vocabulary, and
/// per-sample feature and token files.
pub fn gen_synthetic_dataset(
    out_dir: impl AsRef<Path>,
    n_samples: usize,
    seed: u64,
    profile: &SynthProfile,
) -> Result<GeneratedDataset> {
    profile.validate()?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let vocab = profile.vocab();
    let vocab_path = out_dir.join("vocab.json");
    vocab.save(&vocab_path)?;

    let fillers = profile.filler_tokens();
    let novels = profile.novel_tokens();
    let mut rng = Rng::new(seed);
    let mut records = Vec::with_capacity(n_samples);

    for i in 0..n_samples {
        let id = format!("s{i:05}");
        let classes: Vec<Modality> =
            (0..profile.m).map(|_| Modality::from_index(rng.below(3))).collect();

        let amp_for = |m: Modality, class: Modality| -> f64 {
            if class == Modality::Textual {
                0.0
            } else if class == m {
                profile.amp_hi
            } else {
                profile.amp_lo
            }
        };

        let mut visual = Tensor::zeros(vec![profile.l, profile.d_visual]);
        let mut acoustic = Tensor::zeros(vec![profile.l, profile.d_acoustic]);
        for t in 0..profile.l {
            let class = classes[segment_of(t, profile.l, profile.m)];
            let vrow = row_with_norm(
                profile.d_visual,
                amp_for(Modality::Visual, class),
                &mut rng,
            );
            let arow = row_with_norm(
                profile.d_acoustic,
                amp_for(Modality::Acoustic, class),
                &mut rng,
            );
            let vw = visual.cols();
            visual.data_mut()[t * vw..(t + 1) * vw].copy_from_slice(&vrow);
            let aw = acoustic.cols();
            acoustic.data_mut()[t * aw..(t + 1) * aw].copy_from_slice(&arow);
        }

        let n_asr = profile.asr_len.0 + rng.below(profile.asr_len.1 - profile.asr_len.0 + 1);
        let asr: Vec<String> = (0..n_asr)
            .map(|_| fillers[rng.below(fillers.len())].clone())
            .collect();
        let n_ocr = profile.ocr_len.0 + rng.below(profile.ocr_len.1 - profile.ocr_len.0 + 1);
        let ocr: Vec<String> = (0..n_ocr)
            .map(|_| {
                if rng.uniform() < profile.ocr_duplicate_frac {
                    asr[rng.below(asr.len())].clone()
                } else {
                    novels[rng.below(novels.len())].clone()
                }
            })
            .collect();

        let summary = classes
            .iter()
            .map(|c| c.token())
            .collect::<Vec<_>>()
            .join(" ");

        let visual_path = format!("{id}.visual.flrt");
        let acoustic_path = format!("{id}.acoustic.flrt");
        let asr_path = format!("{id}.asr.txt");
        let ocr_path = format!("{id}.ocr.txt");
        write_feature_file(out_dir.join(&visual_path), &visual)?;
        write_feature_file(out_dir.join(&acoustic_path), &acoustic)?;
        fs::write(out_dir.join(&asr_path), asr.join(" "))
            .map_err(|e| Error::io(out_dir.join(&asr_path), e))?;
        fs::write(out_dir.join(&ocr_path), ocr.join(" "))
            .map_err(|e| Error::io(out_dir.join(&ocr_path), e))?;

        records.push(SampleRecord {
            id,
            visual: visual_path.into(),
            acoustic: acoustic_path.into(),
            asr: asr_path.into(),
            ocr: Some(ocr_path.into()),
            summary,
        });
    }

    let manifest_path = out_dir.join("manifest.json");
    write_manifest(&manifest_path, &records)?;
    Ok(GeneratedDataset {
        manifest_path,
        vocab_path,
        records,
    })
}
