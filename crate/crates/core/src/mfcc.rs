//! Acoustic feature extraction from mono PCM audio: framing with a Hamming
//! window, magnitude spectrum, triangular mel filter bank over 0-8000 Hz,
//! log compression, orthonormal DCT-II, and temporal derivatives, assembled
//! into fixed-width frame vectors.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct MfccConfig {
    pub sample_rate: u32,
    pub win_ms: u32,
    pub hop_ms: u32,
    pub n_mels: usize,
    pub n_ceps: usize,
    pub delta: bool,
    pub delta_delta: bool,
    /// Each frame vector is zero-padded to this width.
    pub out_width: usize,
    pub log_floor: f64,
    pub fmin: f64,
    pub fmax: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig {
            sample_rate: 16_000,
            win_ms: 25,
            hop_ms: 10,
            n_mels: 40,
            n_ceps: 13,
            delta: true,
            delta_delta: true,
            out_width: 512,
            log_floor: 1e-10,
            fmin: 0.0,
            fmax: 8_000.0,
        }
    }
}

impl MfccConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop_ms == 0 || self.win_ms <= self.hop_ms {
            return Err(Error::Config(format!(
                "need win_ms > hop_ms > 0, got {} and {}",
                self.win_ms, self.hop_ms
            )));
        }
        if self.n_ceps > self.n_mels {
            return Err(Error::Config(format!(
                "n_ceps {} exceeds n_mels {}",
                self.n_ceps, self.n_mels
            )));
        }
        if self.out_width < self.feature_width() {
            return Err(Error::Config(format!(
                "out_width {} below feature width {}",
                self.out_width,
                self.feature_width()
            )));
        }
        if self.fmax <= self.fmin || self.fmax > self.sample_rate as f64 / 2.0 {
            return Err(Error::Config(format!(
                "mel band [{}, {}] invalid for sample rate {}",
                self.fmin, self.fmax, self.sample_rate
            )));
        }
        Ok(())
    }

    pub fn win_len(&self) -> usize {
        (self.sample_rate as usize * self.win_ms as usize) / 1000
    }

    pub fn hop_len(&self) -> usize {
        (self.sample_rate as usize * self.hop_ms as usize) / 1000
    }

    /// Width of the populated part of each frame vector.
    pub fn feature_width(&self) -> usize {
        self.n_ceps * (1 + self.delta as usize + self.delta_delta as usize)
    }

    /// DFT size: next power of two at or above the window length.
    pub fn n_fft(&self) -> usize {
        self.win_len().next_power_of_two()
    }

    pub fn frame_count(&self, n_samples: usize) -> Option<usize> {
        let win = self.win_len();
        if n_samples < win {
            return None;
        }
        Some((n_samples - win) / self.hop_len() + 1)
    }
}

/// d_w frames of out_width values, plus the center time of each frame.
#[derive(Debug, Clone)]
pub struct AcousticFeatures {
    pub frames: Tensor,
    pub frame_times: Vec<f64>,
}

/// Slice the signal into hop-spaced windows and apply a Hamming window to
/// each. Frame count is floor((n - win) / hop) + 1.
pub fn frame_and_window(signal: &[f64], config: &MfccConfig) -> Result<Tensor> {
    config.validate()?;
    let win = config.win_len();
    let hop = config.hop_len();
    let Some(d_w) = config.frame_count(signal.len()) else {
        return Err(Error::Input(format!(
            "signal of {} samples is shorter than one {}-sample window",
            signal.len(),
            win
        )));
    };
    let hamming: Vec<f64> = (0..win)
        .map(|k| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * k as f64 / (win - 1) as f64).cos())
        .collect();
    let mut frames = Tensor::zeros(vec![d_w, win]);
    for f in 0..d_w {
        let start = f * hop;
        for k in 0..win {
            frames.set(f, k, signal[start + k] * hamming[k]);
        }
    }
    Ok(frames)
}

/// Magnitude spectrum of one zero-padded frame: bins 0..=n_fft/2.
/// Plain table-driven DFT; frames are short and counts are desk scale.
fn magnitude_spectrum(frame: &[f64], n_fft: usize) -> Vec<f64> {
    let bins = n_fft / 2 + 1;
    let step = 2.0 * std::f64::consts::PI / n_fft as f64;
    let mut mags = Vec::with_capacity(bins);
    for b in 0..bins {
        let mut re = 0.0;
        let mut im = 0.0;
        for (k, &v) in frame.iter().enumerate() {
            let angle = step * (b * k % n_fft) as f64;
            re += v * angle.cos();
            im -= v * angle.sin();
        }
        mags.push((re * re + im * im).sqrt());
    }
    mags
}

pub fn mel_scale(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of the triangular filters, equally spaced on the
/// mel scale between fmin and fmax.
pub fn filter_centers(config: &MfccConfig) -> Vec<f64> {
    let lo = mel_scale(config.fmin);
    let hi = mel_scale(config.fmax);
    (1..=config.n_mels)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (config.n_mels + 1) as f64))
        .collect()
}

fn filter_bank(config: &MfccConfig) -> Vec<Vec<f64>> {
    let n_fft = config.n_fft();
    let bins = n_fft / 2 + 1;
    let lo = mel_scale(config.fmin);
    let hi = mel_scale(config.fmax);
    let points: Vec<f64> = (0..config.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (config.n_mels + 1) as f64))
        .collect();
    let bin_hz = config.sample_rate as f64 / n_fft as f64;
    (0..config.n_mels)
        .map(|i| {
            let (left, center, right) = (points[i], points[i + 1], points[i + 2]);
            (0..bins)
                .map(|b| {
                    let f = b as f64 * bin_hz;
                    if f < left || f > right {
                        0.0
                    } else if f <= center {
                        if center > left { (f - left) / (center - left) } else { 0.0 }
                    } else if right > center {
                        (right - f) / (right - center)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Triangular mel filter energies of windowed frames; non-negative.
pub fn mel_filterbank_energies(frames: &Tensor, config: &MfccConfig) -> Result<Tensor> {
    config.validate()?;
    let n_fft = config.n_fft();
    let filters = filter_bank(config);
    let d_w = frames.rows();
    let mut out = Tensor::zeros(vec![d_w, config.n_mels]);
    for f in 0..d_w {
        let mags = magnitude_spectrum(frames.row(f), n_fft);
        for (i, filt) in filters.iter().enumerate() {
            let e: f64 = filt.iter().zip(&mags).map(|(w, m)| w * m).sum();
            out.set(f, i, e);
        }
    }
    Ok(out)
}

/// Orthonormal DCT-II of a vector.
pub fn dct_orthonormal(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut out = vec![0.0; n];
    for (k, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (i, &v) in x.iter().enumerate() {
            acc += v
                * (std::f64::consts::PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos();
        }
        let scale = if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        *o = acc * scale;
    }
    out
}

/// Inverse of [`dct_orthonormal`] (DCT-III with matching normalization).
pub fn idct_orthonormal(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut out = vec![0.0; n];
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = x[0] * (1.0 / n as f64).sqrt();
        for (k, &v) in x.iter().enumerate().skip(1) {
            acc += v
                * (2.0 / n as f64).sqrt()
                * (std::f64::consts::PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos();
        }
        *o = acc;
    }
    out
}

/// Two-frame symmetric difference with edge replication.
fn temporal_delta(series: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let t_max = series.len();
    (0..t_max)
        .map(|t| {
            let prev = &series[t.saturating_sub(1)];
            let next = &series[(t + 1).min(t_max - 1)];
            prev.iter().zip(next).map(|(p, n)| (n - p) / 2.0).collect()
        })
        .collect()
}

/// Full pipeline: frame, window, mel energies, log, DCT-II, keep n_ceps
/// coefficients, append deltas, zero-pad each frame vector to out_width.
pub fn mfcc(signal: &[f64], config: &MfccConfig) -> Result<AcousticFeatures> {
    let frames = frame_and_window(signal, config)?;
    let energies = mel_filterbank_energies(&frames, config)?;
    let d_w = frames.rows();

    let ceps: Vec<Vec<f64>> = (0..d_w)
        .map(|f| {
            let logs: Vec<f64> = energies
                .row(f)
                .iter()
                .map(|&e| (e + config.log_floor).ln())
                .collect();
            let mut c = dct_orthonormal(&logs);
            c.truncate(config.n_ceps);
            c
        })
        .collect();

    let d1 = if config.delta { Some(temporal_delta(&ceps)) } else { None };
    let d2 = match (&d1, config.delta_delta) {
        (Some(d1), true) => Some(temporal_delta(d1)),
        (None, true) => Some(temporal_delta(&temporal_delta(&ceps))),
        _ => None,
    };

    let mut out = Tensor::zeros(vec![d_w, config.out_width]);
    for f in 0..d_w {
        let mut col = 0;
        for &v in &ceps[f] {
            out.set(f, col, v);
            col += 1;
        }
        if let Some(d1) = &d1 {
            for &v in &d1[f] {
                out.set(f, col, v);
                col += 1;
            }
        }
        if let Some(d2) = &d2 {
            for &v in &d2[f] {
                out.set(f, col, v);
                col += 1;
            }
        }
    }

    let (win, hop, sr) = (config.win_len(), config.hop_len(), config.sample_rate as f64);
    let frame_times = (0..d_w)
        .map(|f| (f * hop) as f64 / sr + win as f64 / (2.0 * sr))
        .collect();
    Ok(AcousticFeatures {
        frames: out,
        frame_times,
    })
}

// ---- WAV input --------------------------------------------------------

/// Read a 16-bit signed mono PCM WAV file; samples scale to [-1, 1).
/// Other encodings, channel counts, or bit depths are format errors.
pub fn read_wav_mono16(path: impl AsRef<Path>) -> Result<(Vec<f64>, u32)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |detail: &str| Error::format(path, detail.to_string());
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(fail("not a RIFF/WAVE file"));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_end = pos + 8 + size;
        if body_end > bytes.len() {
            return Err(fail("chunk overruns file"));
        }
        let body = &bytes[pos + 8..body_end];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(fail("fmt chunk too short"));
                }
                fmt = Some((
                    u16::from_le_bytes(body[0..2].try_into().unwrap()),
                    u16::from_le_bytes(body[2..4].try_into().unwrap()),
                    u32::from_le_bytes(body[4..8].try_into().unwrap()),
                    u16::from_le_bytes(body[14..16].try_into().unwrap()),
                ));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        pos = body_end + (size & 1); // chunks are word-aligned
    }
    let (audio_format, channels, sample_rate, bits) =
        fmt.ok_or_else(|| fail("missing fmt chunk"))?;
    if audio_format != 1 {
        return Err(fail("only PCM encoding supported"));
    }
    if channels != 1 {
        return Err(fail("only mono audio supported"));
    }
    if bits != 16 {
        return Err(fail("only 16-bit samples supported"));
    }
    let data = data.ok_or_else(|| fail("missing data chunk"))?;
    let samples = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
        .collect();
    Ok((samples, sample_rate))
}

/// Write a 16-bit mono PCM WAV; the inverse of [`read_wav_mono16`], used to
/// produce fixture and demo audio.
pub fn write_wav_mono16(path: impl AsRef<Path>, samples: &[f64], sample_rate: u32) -> Result<()> {
    let path = path.as_ref();
    let n = samples.len();
    let data_len = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
