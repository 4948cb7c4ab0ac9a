//! Guided attention fusion of the ASR and OCR token streams.
//!
//! An affinity matrix correlates every ASR embedding with every OCR
//! embedding through a learned matrix; a per-OCR-column softmax over the
//! ASR index yields an attended ASR context for each OCR token; each OCR
//! token is then gated by its cosine *distance* to its own context, so
//! tokens that merely repeat the transcript are suppressed and dissimilar
//! tokens pass through. The fused textual stream is the ASR rows followed
//! by the gated OCR rows.
//!
//! The whole computation runs on the tape, so gradients reach the
//! correlation matrix and both embedding streams.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Default cap on OCR tokens entering fusion.
pub const DEFAULT_OCR_CAP: usize = 500;

/// Tape nodes for every intermediate of the fusion computation.
#[derive(Debug, Clone, Copy)]
pub struct FusionNodes {
    /// n x m, entries in (-1, 1)
    pub affinity: NodeId,
    /// n x m, column-stochastic
    pub alpha: NodeId,
    /// m x d attended ASR contexts
    pub contexts: NodeId,
    /// m x 1 gates in [0, 2]
    pub gates: NodeId,
    /// (n + m) x d fused stream
    pub fused: NodeId,
}

/// Concrete values of a fusion pass.
#[derive(Debug, Clone)]
pub struct FusionResult {
    pub affinity: Tensor,
    pub alpha: Tensor,
    pub contexts: Tensor,
    pub gates: Tensor,
    pub fused: Tensor,
}

fn check_inputs(tape: &Tape, asr: NodeId, ocr: NodeId, w_b: NodeId) -> Result<()> {
    let (ta, to, tw) = (tape.value(asr), tape.value(ocr), tape.value(w_b));
    if !ta.is_matrix() || ta.rows() == 0 {
        return Err(Error::Contract(
            "fusion requires at least one ASR row".into(),
        ));
    }
    if !to.is_matrix() || to.cols() != ta.cols() && to.rows() > 0 {
        return Err(Error::Shape {
            op: "fuse",
            lhs: ta.shape().to_vec(),
            rhs: to.shape().to_vec(),
        });
    }
    if !tw.is_matrix() || tw.rows() != ta.cols() || tw.cols() != ta.cols() {
        return Err(Error::Shape {
            op: "fuse",
            lhs: ta.shape().to_vec(),
            rhs: tw.shape().to_vec(),
        });
    }
    Ok(())
}

/// Record the full fusion on `tape`. With `gated` false the gates are
/// pinned to 1, which degenerates to plain ASR/OCR concatenation (the
/// comparison baseline and the ablation arm).
pub fn fuse_on_tape(
    tape: &mut Tape,
    asr: NodeId,
    ocr: NodeId,
    w_b: NodeId,
    gated: bool,
) -> Result<FusionNodes> {
    check_inputs(tape, asr, ocr, w_b)?;
    let m = tape.value(ocr).rows();

    let correlated = tape.matmul(asr, w_b)?;
    let ocr_t = tape.transpose(ocr)?;
    let raw = tape.matmul(correlated, ocr_t)?;
    let affinity = tape.tanh(raw)?;

    // Normalize over the ASR index, separately per OCR column.
    let alpha = tape.softmax(affinity, 0)?;
    let alpha_t = tape.transpose(alpha)?;
    let contexts = tape.matmul(alpha_t, asr)?;

    let ones = tape.input(Tensor::full(vec![m, 1], 1.0));
    let gates = if gated {
        let cos = tape.cosine_similarity(ocr, contexts)?;
        let neg = tape.scale(cos, -1.0)?;
        tape.add(ones, neg)?
    } else {
        ones
    };

    let gated_rows = tape.mul(ocr, gates)?;
    let fused = tape.concat(&[asr, gated_rows], 0)?;
    Ok(FusionNodes {
        affinity,
        alpha,
        contexts,
        gates,
        fused,
    })
}

/// Run fusion on a scratch tape and extract the values.
pub fn fuse(asr: &Tensor, ocr: &Tensor, w_b: &Tensor) -> Result<FusionResult> {
    let mut tape = Tape::new();
    let a = tape.input(asr.clone());
    let o = tape.input(ocr.clone());
    let w = tape.input(w_b.clone());
    let nodes = fuse_on_tape(&mut tape, a, o, w, true)?;
    Ok(FusionResult {
        affinity: tape.value(nodes.affinity).clone(),
        alpha: tape.value(nodes.alpha).clone(),
        contexts: tape.value(nodes.contexts).clone(),
        gates: tape.value(nodes.gates).clone(),
        fused: tape.value(nodes.fused).clone(),
    })
}

/// Affinity alone: tanh(asr . w_b . ocr^T), n x m.
pub fn affinity(asr: &Tensor, ocr: &Tensor, w_b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let a = tape.input(asr.clone());
    let o = tape.input(ocr.clone());
    let w = tape.input(w_b.clone());
    check_inputs(&tape, a, o, w)?;
    let correlated = tape.matmul(a, w)?;
    let ot = tape.transpose(o)?;
    let raw = tape.matmul(correlated, ot)?;
    let aff = tape.tanh(raw)?;
    Ok(tape.value(aff).clone())
}

/// Per-column softmax over the ASR index and the attended contexts.
pub fn attend_contexts(affinity: &Tensor, asr: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let c = tape.input(affinity.clone());
    let a = tape.input(asr.clone());
    let alpha = tape.softmax(c, 0)?;
    let alpha_t = tape.transpose(alpha)?;
    let contexts = tape.matmul(alpha_t, a)?;
    Ok((tape.value(alpha).clone(), tape.value(contexts).clone()))
}

/// Cosine-distance gates: 1 - cos(o_j, g_j), one per OCR row, in [0, 2].
pub fn redundancy_gate(ocr: &Tensor, contexts: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let o = tape.input(ocr.clone());
    let g = tape.input(contexts.clone());
    let cos = tape.cosine_similarity(o, g)?;
    let neg = tape.scale(cos, -1.0)?;
    let ones = tape.input(Tensor::full(vec![ocr.rows(), 1], 1.0));
    let gates = tape.add(ones, neg)?;
    Ok(tape.value(gates).clone())
}

/// Keep at most `cap` OCR rows (the configurable input cap).
pub fn truncate_ocr(ocr: &Tensor, cap: usize) -> Tensor {
    if !ocr.is_matrix() || ocr.rows() <= cap {
        return ocr.clone();
    }
    let d = ocr.cols();
    Tensor::new(vec![cap, d], ocr.data()[..cap * d].to_vec()).unwrap()
}
