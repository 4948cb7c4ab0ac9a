//! Reference-clock resampling and assembly of per-modality streams into
//! fixed-length block-concatenated samples.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Source-row index per output row for nearest-previous resampling of `l`
/// rows from `source_rate` to `reference_rate`: output row j copies input
/// row floor(j * source_rate / reference_rate), and the output has
/// ceil(l * reference_rate / source_rate) rows. The small epsilon keeps
/// rate ratios that are integers in exact arithmetic (15 * r / r, say)
/// from rounding down one row in f64; equal rates short-circuit to the
/// identity outright.
pub fn resample_indices(l: usize, source_rate: f64, reference_rate: f64) -> Vec<usize> {
    debug_assert!(l >= 1 && source_rate > 0.0 && reference_rate > 0.0);
    if source_rate == reference_rate {
        return (0..l).collect();
    }
    const RATE_EPS: f64 = 1e-9;
    let l_out = (l as f64 * reference_rate / source_rate - RATE_EPS).ceil() as usize;
    (0..l_out.max(1))
        .map(|j| {
            (((j as f64 * source_rate / reference_rate) + RATE_EPS).floor() as usize).min(l - 1)
        })
        .collect()
}

/// Resample a sequence of rows onto the reference clock by nearest-previous
/// sampling. Causal and exactly testable.
pub fn resample_to_clock(seq: &Tensor, source_rate: f64, reference_rate: f64) -> Result<Tensor> {
    if source_rate <= 0.0 || reference_rate <= 0.0 {
        return Err(Error::Contract(format!(
            "resample rates must be positive, got {source_rate} and {reference_rate}"
        )));
    }
    if !seq.is_matrix() || seq.rows() == 0 {
        return Err(Error::Contract(
            "resample expects a non-empty row matrix".into(),
        ));
    }
    let d = seq.cols();
    let indices = resample_indices(seq.rows(), source_rate, reference_rate);
    let mut data = Vec::with_capacity(indices.len() * d);
    for &src in &indices {
        data.extend_from_slice(seq.row(src));
    }
    Tensor::new(vec![indices.len(), d], data)
}

/// Per-modality affine map into the common block width.
#[derive(Debug, Clone)]
pub struct ModalProjection {
    /// d_in x d_b
    pub weight: Tensor,
    /// 1 x d_b
    pub bias: Tensor,
}

impl ModalProjection {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if !weight.is_matrix() || !bias.is_matrix() || bias.rows() != 1
            || bias.cols() != weight.cols()
        {
            return Err(Error::Config(format!(
                "projection weight {:?} and bias {:?} are inconsistent",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(ModalProjection { weight, bias })
    }

    pub fn out_width(&self) -> usize {
        self.weight.cols()
    }

    fn project_row(&self, row: &[f64], out: &mut [f64]) {
        let d_in = self.weight.rows();
        let d_b = self.weight.cols();
        debug_assert_eq!(row.len(), d_in);
        out.copy_from_slice(self.bias.data());
        for (k, &v) in row.iter().enumerate() {
            if v != 0.0 {
                let wrow = &self.weight.data()[k * d_b..(k + 1) * d_b];
                for (o, &w) in out.iter_mut().zip(wrow) {
                    *o += v * w;
                }
            }
        }
    }
}

/// The three projections, in fixed block order: visual, acoustic, textual.
#[derive(Debug, Clone)]
pub struct Projections {
    pub visual: ModalProjection,
    pub acoustic: ModalProjection,
    pub textual: ModalProjection,
}

impl Projections {
    pub fn block_width(&self) -> Result<usize> {
        let d_b = self.visual.out_width();
        if self.acoustic.out_width() != d_b || self.textual.out_width() != d_b {
            return Err(Error::Config(format!(
                "projections disagree on block width: {} / {} / {}",
                d_b,
                self.acoustic.out_width(),
                self.textual.out_width()
            )));
        }
        Ok(d_b)
    }
}

/// One assembled datum: L timesteps of concatenated
/// (visual | acoustic | textual) blocks, target token ids, and a mask of
/// timesteps where all three streams were absent.
#[derive(Debug, Clone)]
pub struct AlignedSample {
    /// L x 3*d_b
    pub blocks: Tensor,
    pub target: Vec<u32>,
    pub pad_mask: Vec<bool>,
}

fn check_stream(name: &str, stream: &Tensor, proj: &ModalProjection) -> Result<()> {
    if !stream.is_matrix() {
        return Err(Error::Contract(format!("{name} stream must be a matrix")));
    }
    if stream.rows() > 0 && stream.cols() != proj.weight.rows() {
        return Err(Error::Shape {
            op: "pad_and_assemble",
            lhs: stream.shape().to_vec(),
            rhs: proj.weight.shape().to_vec(),
        });
    }
    Ok(())
}

/// Project each stream per-timestep into its block, zero-pad to `l`
/// timesteps, and concatenate in fixed (V, A, T) order. Streams longer than
/// `l` are truncated with a logged warning rather than an error: long real
/// transcripts must not abort training.
pub fn pad_and_assemble(
    visual: &Tensor,
    acoustic: &Tensor,
    textual: &Tensor,
    l: usize,
    proj: &Projections,
) -> Result<AlignedSample> {
    let d_b = proj.block_width()?;
    check_stream("visual", visual, &proj.visual)?;
    check_stream("acoustic", acoustic, &proj.acoustic)?;
    check_stream("textual", textual, &proj.textual)?;

    let streams: [(&Tensor, &ModalProjection, &str); 3] = [
        (visual, &proj.visual, "visual"),
        (acoustic, &proj.acoustic, "acoustic"),
        (textual, &proj.textual, "textual"),
    ];

    let mut blocks = Tensor::zeros(vec![l, 3 * d_b]);
    let width = 3 * d_b;
    for (slot, (stream, p, name)) in streams.iter().enumerate() {
        let mut len = stream.rows();
        if len > l {
            eprintln!("warning: {name} stream length {len} truncated to {l} timesteps");
            len = l;
        }
        for t in 0..len {
            let off = t * width + slot * d_b;
            p.project_row(stream.row(t), &mut blocks.data_mut()[off..off + d_b]);
        }
    }

    let pad_mask: Vec<bool> = (0..l)
        .map(|t| t >= visual.rows() && t >= acoustic.rows() && t >= textual.rows())
        .collect();

    Ok(AlignedSample {
        blocks,
        target: Vec::new(),
        pad_mask,
    })
}
