//! The factorized multimodal transformer, used as a decoder-only LM.
//!
//! The model stream is three fixed-width blocks per timestep, in (visual,
//! acoustic, textual) order. Each factorized self-attention unit runs seven
//! causal attentions, one per non-empty modality subset, each reading and
//! writing only its own blocks; their concatenated outputs reduce back to
//! stream width through the S1 map. A transformer layer stacks P such units
//! behind an S2 reduction, with residual connections, layer norms and a
//! feedforward. A GRU consumes the final states left to right and a
//! vocabulary projection (tied to the token embedding by default) produces
//! next-token logits.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::fusion::{fuse_on_tape, truncate_ocr};
use crate::io::align::resample_indices;
use crate::rng::Rng;
use crate::sequence::{attention_mask, generation_layout, training_layout, LmLayout};
use crate::tape::{NodeId, Tape, MASK_FILL};
use crate::tensor::Tensor;

/// One of the seven modality subsets an FMS attention may read and write.
/// L is the language (textual) block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReceptiveField {
    L,
    V,
    A,
    LV,
    LA,
    VA,
    LVA,
}

pub const FIELDS: [ReceptiveField; 7] = [
    ReceptiveField::L,
    ReceptiveField::V,
    ReceptiveField::A,
    ReceptiveField::LV,
    ReceptiveField::LA,
    ReceptiveField::VA,
    ReceptiveField::LVA,
];

impl ReceptiveField {
    /// Block indices in layout order (0 = visual, 1 = acoustic, 2 = textual).
    pub fn blocks(self) -> &'static [usize] {
        match self {
            ReceptiveField::L => &[2],
            ReceptiveField::V => &[0],
            ReceptiveField::A => &[1],
            ReceptiveField::LV => &[0, 2],
            ReceptiveField::LA => &[1, 2],
            ReceptiveField::VA => &[0, 1],
            ReceptiveField::LVA => &[0, 1, 2],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ReceptiveField::L => "l",
            ReceptiveField::V => "v",
            ReceptiveField::A => "a",
            ReceptiveField::LV => "lv",
            ReceptiveField::LA => "la",
            ReceptiveField::VA => "va",
            ReceptiveField::LVA => "lva",
        }
    }

    pub fn width(self, d_b: usize) -> usize {
        self.blocks().len() * d_b
    }
}

/// The text side of a sample: token ids to embed and fuse (the learned
/// path), or pre-extracted embedding streams ingested from files.
#[derive(Debug, Clone)]
pub enum TextSource {
    Tokens { asr: Vec<u32>, ocr: Vec<u32> },
    Embedded { asr: Tensor, ocr: Tensor },
}

/// One sample as the model consumes it: float streams already on the
/// reference clock (at most l_max rows each) plus the text source.
#[derive(Debug, Clone)]
pub struct ModelInput {
    pub visual: Tensor,
    pub acoustic: Tensor,
    pub text: TextSource,
}

#[derive(Debug, Clone, Copy)]
pub enum SeqMode<'a> {
    Train { target: &'a [u32] },
    Generate { emitted: &'a [u32] },
}

/// Dropout configuration for one forward pass; absent at evaluation.
pub struct DropoutCtx<'a> {
    pub rate: f64,
    pub rng: &'a mut Rng,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Xavier,
    Zeros,
    Ones,
    Embedding,
}

fn param_specs(config: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d_b = config.d_b;
    let d_x = config.d_x();
    let mut specs: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let affine = |name: &str, d_in: usize, d_out: usize, specs: &mut Vec<_>| {
        specs.push((format!("{name}.w"), vec![d_in, d_out], Init::Xavier));
        specs.push((format!("{name}.b"), vec![1, d_out], Init::Zeros));
    };
    affine("proj.visual", config.d_visual, d_b, &mut specs);
    affine("proj.acoustic", config.d_acoustic, d_b, &mut specs);
    affine("proj.textual", config.d_textual, d_b, &mut specs);
    specs.push((
        "fusion.w_b".into(),
        vec![config.d_textual, config.d_textual],
        Init::Xavier,
    ));
    specs.push((
        "embed.token".into(),
        vec![config.vocab_size, d_b],
        Init::Embedding,
    ));
    specs.push((
        "embed.pos".into(),
        vec![config.pos_len(), d_x],
        Init::Embedding,
    ));
    for l in 0..config.n_layers {
        for p in 0..config.p_units {
            for field in FIELDS {
                let w = field.width(d_b);
                let base = format!("layer{l}.fms{p}.{}", field.name());
                affine(&format!("{base}.q"), w, w, &mut specs);
                affine(&format!("{base}.k"), w, w, &mut specs);
                affine(&format!("{base}.v"), w, w, &mut specs);
            }
            affine(&format!("layer{l}.fms{p}.s1"), 12 * d_b, d_x, &mut specs);
        }
        affine(&format!("layer{l}.s2"), config.p_units * d_x, d_x, &mut specs);
        specs.push((format!("layer{l}.ln1.g"), vec![1, d_x], Init::Ones));
        specs.push((format!("layer{l}.ln1.b"), vec![1, d_x], Init::Zeros));
        affine(&format!("layer{l}.ff1"), d_x, config.d_ff, &mut specs);
        affine(&format!("layer{l}.ff2"), config.d_ff, d_x, &mut specs);
        specs.push((format!("layer{l}.ln2.g"), vec![1, d_x], Init::Ones));
        specs.push((format!("layer{l}.ln2.b"), vec![1, d_x], Init::Zeros));
    }
    for gate in ["z", "r", "h"] {
        specs.push((format!("gru.w{gate}"), vec![d_x, config.d_y], Init::Xavier));
        specs.push((format!("gru.u{gate}"), vec![config.d_y, config.d_y], Init::Xavier));
        specs.push((format!("gru.b{gate}"), vec![1, config.d_y], Init::Zeros));
    }
    if !config.tie_embeddings {
        specs.push((
            "head.w".into(),
            vec![config.d_y, config.vocab_size],
            Init::Xavier,
        ));
    }
    specs.push(("head.b".into(), vec![1, config.vocab_size], Init::Zeros));
    specs
}

/// The full parameter table plus the model configuration. Parameters keep a
/// fixed registry order, so initialization and checkpoints are byte-stable.
pub struct FmtModel {
    pub config: ModelConfig,
    params: Vec<(String, Tensor)>,
    index: BTreeMap<String, usize>,
}

/// Tape node ids for every parameter, in registry order.
pub struct TapeBinding {
    ids: Vec<NodeId>,
}

impl FmtModel {
    /// Initialize all parameters: affine weights Glorot-uniform, biases
    /// zero, embedding tables normal(0, 0.02), layer-norm gains one.
    /// Seed-deterministic.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let mut params = Vec::new();
        let mut index = BTreeMap::new();
        for (name, shape, init) in param_specs(&config) {
            let tensor = match init {
                Init::Xavier => Tensor::xavier(shape[0], shape[1], &mut rng),
                Init::Zeros => Tensor::zeros(shape),
                Init::Ones => Tensor::full(shape, 1.0),
                Init::Embedding => Tensor::rand_normal(shape, 0.02, &mut rng),
            };
            index.insert(name.clone(), params.len());
            params.push((name, tensor));
        }
        Ok(FmtModel {
            config,
            params,
            index,
        })
    }

    /// Rebuild a model from a loaded parameter table, verifying every shape
    /// against the configuration.
    pub fn from_params(config: ModelConfig, loaded: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if loaded.len() != specs.len() {
            return Err(Error::Config(format!(
                "parameter table has {} entries, config expects {}",
                loaded.len(),
                specs.len()
            )));
        }
        let by_name: BTreeMap<&str, &Tensor> =
            loaded.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut params = Vec::new();
        let mut index = BTreeMap::new();
        for (name, shape, _) in &specs {
            let tensor = by_name.get(name.as_str()).ok_or_else(|| {
                Error::Config(format!("parameter {name} missing from checkpoint"))
            })?;
            if tensor.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, config expects {:?}",
                    tensor.shape(),
                    shape
                )));
            }
            index.insert(name.clone(), params.len());
            params.push((name.clone(), (*tensor).clone()));
        }
        Ok(FmtModel {
            config,
            params,
            index,
        })
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].1)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = *self.index.get(name)?;
        Some(&mut self.params[i].1)
    }

    pub fn set_param_data(&mut self, idx: usize, data: Tensor) {
        debug_assert_eq!(self.params[idx].1.shape(), data.shape());
        self.params[idx].1 = data;
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Register every parameter on a tape.
    pub fn bind(&self, tape: &mut Tape) -> TapeBinding {
        TapeBinding {
            ids: self.params.iter().map(|(_, t)| tape.param(t.clone())).collect(),
        }
    }

    pub fn node(&self, binding: &TapeBinding, name: &str) -> NodeId {
        let idx = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        binding.ids[idx]
    }

    pub fn binding_ids<'a>(&self, binding: &'a TapeBinding) -> &'a [NodeId] {
        &binding.ids
    }

    /// Point one parameter slot of a binding at a different tape node.
    /// Lets gradient checks substitute an externally registered leaf.
    pub fn rebind_param(&self, binding: &mut TapeBinding, idx: usize, node: NodeId) {
        binding.ids[idx] = node;
    }

    // ---- sequence assembly ------------------------------------------------

    fn affine(
        &self,
        tape: &mut Tape,
        binding: &TapeBinding,
        x: NodeId,
        name: &str,
    ) -> Result<NodeId> {
        let w = self.node(binding, &format!("{name}.w"));
        let b = self.node(binding, &format!("{name}.b"));
        let h = tape.matmul(x, w)?;
        tape.add(h, b)
    }

    /// Project one float stream into its block and zero-pad to l_max rows.
    /// Returns the block node and the populated length.
    fn stream_block(
        &self,
        tape: &mut Tape,
        binding: &TapeBinding,
        stream: &Tensor,
        proj: &str,
    ) -> Result<(NodeId, usize)> {
        let l = self.config.l_max;
        let d_b = self.config.d_b;
        let len = stream.rows().min(l);
        if stream.rows() > l {
            eprintln!(
                "warning: stream of {} rows truncated to {l} timesteps",
                stream.rows()
            );
        }
        if len == 0 {
            return Ok((tape.input(Tensor::zeros(vec![l, d_b])), 0));
        }
        let leaf = if stream.rows() > l {
            let d = stream.cols();
            tape.input(Tensor::new(vec![l, d], stream.data()[..l * d].to_vec())?)
        } else {
            tape.input(stream.clone())
        };
        let projected = self.affine(tape, binding, leaf, proj)?;
        if len == l {
            return Ok((projected, len));
        }
        let pad = tape.input(Tensor::zeros(vec![l - len, d_b]));
        Ok((tape.concat(&[projected, pad], 0)?, len))
    }

    /// Fuse the token streams, stretch the fused stream onto the clock with
    /// a constant selection matrix, project, and pad. Returns the textual
    /// block and its populated length.
    fn textual_block(
        &self,
        tape: &mut Tape,
        binding: &TapeBinding,
        text: &TextSource,
        textual_rate: Option<f64>,
        reference_rate: f64,
    ) -> Result<(NodeId, usize)> {
        let l = self.config.l_max;
        let d_b = self.config.d_b;
        let (asr_node, ocr_node) = match text {
            TextSource::Tokens { asr, ocr } => {
                if self.config.d_textual != d_b {
                    return Err(Error::Config(format!(
                        "token text source requires d_textual == d_b, got {} and {}",
                        self.config.d_textual, d_b
                    )));
                }
                if asr.is_empty() && ocr.is_empty() {
                    return Ok((tape.input(Tensor::zeros(vec![l, d_b])), 0));
                }
                if asr.is_empty() {
                    return Err(Error::Contract(
                        "sample has OCR tokens but no ASR tokens to attend".into(),
                    ));
                }
                let table = self.node(binding, "embed.token");
                let asr_ids: Vec<usize> = asr.iter().map(|&t| t as usize).collect();
                let ocr_ids: Vec<usize> = ocr
                    .iter()
                    .take(self.config.ocr_cap)
                    .map(|&t| t as usize)
                    .collect();
                (
                    tape.embed_lookup(table, &asr_ids)?,
                    tape.embed_lookup(table, &ocr_ids)?,
                )
            }
            TextSource::Embedded { asr, ocr } => {
                if asr.rows() == 0 && ocr.rows() == 0 {
                    return Ok((tape.input(Tensor::zeros(vec![l, d_b])), 0));
                }
                (
                    tape.input(asr.clone()),
                    tape.input(truncate_ocr(ocr, self.config.ocr_cap)),
                )
            }
        };
        let w_b = self.node(binding, "fusion.w_b");
        let fused = fuse_on_tape(tape, asr_node, ocr_node, w_b, self.config.gated_fusion)?.fused;
        let n_rows = tape.value(fused).rows();

        // Nearest-previous resampling as a 0/1 selection matrix, so the
        // gather stays differentiable through matmul. Without an explicit
        // rate the stream is fit to the clock: exactly l rows out.
        let indices = match textual_rate {
            Some(rate) => resample_indices(n_rows, rate, reference_rate),
            None => resample_indices(n_rows, n_rows as f64, l as f64),
        };
        let len = indices.len().min(l);
        if indices.len() > l {
            eprintln!(
                "warning: textual stream of {} clock rows truncated to {l}",
                indices.len()
            );
        }
        let mut select = Tensor::zeros(vec![len, n_rows]);
        for (j, &src) in indices.iter().take(len).enumerate() {
            select.set(j, src, 1.0);
        }
        let select = tape.input(select);
        let on_clock = tape.matmul(select, fused)?;
        let projected = self.affine(tape, binding, on_clock, "proj.textual")?;
        if len == l {
            return Ok((projected, len));
        }
        let pad = tape.input(Tensor::zeros(vec![l - len, d_b]));
        Ok((tape.concat(&[projected, pad], 0)?, len))
    }

    /// Assemble the L x d_x source: per-modality blocks side by side, plus
    /// the pad mask of timesteps where all three streams are absent.
    pub fn assemble_source(
        &self,
        tape: &mut Tape,
        binding: &TapeBinding,
        input: &ModelInput,
        textual_rate: Option<f64>,
        reference_rate: f64,
    ) -> Result<(NodeId, Vec<bool>)> {
        let (v_block, v_len) = self.stream_block(tape, binding, &input.visual, "proj.visual")?;
        let (a_block, a_len) =
            self.stream_block(tape, binding, &input.acoustic, "proj.acoustic")?;
        let (t_block, t_len) =
            self.textual_block(tape, binding, &input.text, textual_rate, reference_rate)?;
        let blocks = tape.concat(&[v_block, a_block, t_block], 1)?;
        let pad_mask: Vec<bool> = (0..self.config.l_max)
            .map(|t| t >= v_len && t >= a_len && t >= t_len)
            .collect();
        Ok((blocks, pad_mask))
    }

    /// Full forward pass: assemble, append the token region, add positional
    /// embeddings, run the transformer stack and the head.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binding: &TapeBinding,
        input: &ModelInput,
        mode: SeqMode,
        textual_rate: Option<f64>,
        reference_rate: f64,
        mut dropout: Option<DropoutCtx>,
    ) -> Result<ForwardPass> {
        let (source, source_pad) =
            self.assemble_source(tape, binding, input, textual_rate, reference_rate)?;
        let layout = match mode {
            SeqMode::Train { target } => training_layout(self.config.l_max, target, self.config.m_max),
            SeqMode::Generate { emitted } => generation_layout(self.config.l_max, emitted),
        };
        if layout.l_prime > self.config.pos_len() {
            return Err(Error::Length {
                len: layout.l_prime,
                cap: self.config.pos_len(),
            });
        }

        // Appended positions: zero visual and acoustic blocks, token
        // embedding in the textual block.
        let table = self.node(binding, "embed.token");
        let appended_ids: Vec<usize> = layout.appended.iter().map(|&t| t as usize).collect();
        let emb = tape.embed_lookup(table, &appended_ids)?;
        let zeros = tape.input(Tensor::zeros(vec![appended_ids.len(), 2 * self.config.d_b]));
        let appended_rows = tape.concat(&[zeros, emb], 1)?;
        let seq = tape.concat(&[source, appended_rows], 0)?;

        let pos_table = self.node(binding, "embed.pos");
        let pos = tape.slice(pos_table, 0, 0, layout.l_prime)?;
        let seq = tape.add(seq, pos)?;

        let mask = attention_mask(layout.l_prime, &source_pad);
        let states = self.fmt_forward(tape, binding, seq, &mask, dropout.as_mut())?;
        let logits = self.head_logits(tape, binding, states, &source_pad)?;
        Ok(ForwardPass {
            logits,
            states,
            sequence: seq,
            layout,
            source_pad,
        })
    }

    // ---- transformer body --------------------------------------------------

    fn check_stream_width(&self, tape: &Tape, x: NodeId) -> Result<()> {
        let got = tape.value(x).cols();
        if got != self.config.d_x() {
            return Err(Error::Config(format!(
                "stream width {got} is not three blocks of {}",
                self.config.d_b
            )));
        }
        Ok(())
    }

    /// Input restricted to one receptive field: its blocks, concatenated in
    /// block-layout order.
    fn field_input(&self, tape: &mut Tape, x: NodeId, field: ReceptiveField) -> Result<NodeId> {
        let d_b = self.config.d_b;
        let parts: Vec<NodeId> = field
            .blocks()
            .iter()
            .map(|&b| tape.slice(x, 1, b * d_b, d_b))
            .collect::<Result<_>>()?;
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            tape.concat(&parts, 1)
        }
    }

    /// The seven attention outputs of one FMS unit, before S1. Each output
    /// has its field's width and reads only its field's blocks.
    pub fn fms_attention_outputs(
        &self,
        tape: &mut Tape,
        binding: &TapeBinding,
        layer: usize,
        unit: usize,
        x: NodeId,
        mask: &[bool],
    ) -> Result<Vec<NodeId>> {
        self.check_stream_width(tape, x)?;
        let heads = self.config.heads;
        let mut outs = Vec::with_capacity(FIELDS.len());
        for field in FIELDS {
            let base = format!("layer{layer}.fms{unit}.{}", field.name());
            let x_f = self.field_input(tape, x, field)?;
            let q = self.affine(tape, binding, x_f, &format!("{base}.q"))?;
            let k = self.affine(tape, binding, x_f, &format!("{base}.k"))?;
            let v = self.affine(tape, binding, x_f, &format!("{base}.v"))?;
            let width = field.width(self.config.d_b);
            let head_dim = width / heads;
            let scale = 1.0 / (head_dim as f64).sqrt();
            let mut head_outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let (qh, kh, vh) = if heads == 1 {
                    (q, k, v)
                } else {
                    (
                        tape.slice(q, 1, h * head_dim, head_dim)?,
                        tape.slice(k, 1, h * head_dim, head_dim)?,
                        tape.slice(v, 1, h * head_dim, head_dim)?,
                    )
                };
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.scale(scores, scale)?;
                let masked = tape.masked_fill(scores, mask, MASK_FILL)?;
                let att = tape.softmax(masked, 1)?;
                head_outs.push(tape.matmul(att, vh)?);
            }
            outs.push(if heads == 1 {
                head_outs[0]
            } else {
                tape.concat(&head_outs, 1)?
            });
        }
        Ok(outs)
    }

    /// One FMS unit: the seven attentions concatenated, reduced by S1.
    pub fn fms_forward(
        &self,
        tape: &mut Tape,
        binding: &TapeBinding,
        layer: usize,
        unit: usize,
        x: NodeId,
        mask: &[bool],
    ) -> Result<NodeId> {
        let outs = self.fms_attention_outputs(tape, binding, layer, unit, x, mask)?;
        let cat = tape.concat(&outs, 1)?;
        self.affine(tape, binding, cat, &format!("layer{layer}.fms{unit}.s1"))
    }

    fn layer_norm_affine(
        &self,
        tape: &mut Tape,
        binding: &TapeBinding,
        x: NodeId,
        name: &str,
    ) -> Result<NodeId> {
        let normed = tape.layer_norm(x)?;
        let g = self.node(binding, &format!("{name}.g"));
        let b = self.node(binding, &format!("{name}.b"));
        let scaled = tape.mul(normed, g)?;
        tape.add(scaled, b)
    }

    fn maybe_dropout(
        &self,
        tape: &mut Tape,
        x: NodeId,
        dropout: &mut Option<&mut DropoutCtx>,
    ) -> Result<NodeId> {
        match dropout {
            Some(ctx) if ctx.rate > 0.0 => tape.dropout(x, ctx.rate, ctx.rng),
            _ => Ok(x),
        }
    }

    /// One transformer layer: P FMS units stacked and reduced by S2 inside a
    /// residual + layer-norm, then the feedforward inside a second one.
    pub fn mtl_forward(
        &self,
        tape: &mut Tape,
        binding: &TapeBinding,
        layer: usize,
        x: NodeId,
        mask: &[bool],
        mut dropout: Option<&mut DropoutCtx>,
    ) -> Result<NodeId> {
        let units: Vec<NodeId> = (0..self.config.p_units)
            .map(|p| self.fms_forward(tape, binding, layer, p, x, mask))
            .collect::<Result<_>>()?;
        let stacked = if units.len() == 1 {
            units[0]
        } else {
            tape.concat(&units, 1)?
        };
        let reduced = self.affine(tape, binding, stacked, &format!("layer{layer}.s2"))?;
        let reduced = self.maybe_dropout(tape, reduced, &mut dropout)?;
        let residual = tape.add(x, reduced)?;
        let normed = self.layer_norm_affine(tape, binding, residual, &format!("layer{layer}.ln1"))?;

        let ff = self.affine(tape, binding, normed, &format!("layer{layer}.ff1"))?;
        let ff = tape.relu(ff)?;
        let ff = self.affine(tape, binding, ff, &format!("layer{layer}.ff2"))?;
        let ff = self.maybe_dropout(tape, ff, &mut dropout)?;
        let residual = tape.add(normed, ff)?;
        self.layer_norm_affine(tape, binding, residual, &format!("layer{layer}.ln2"))
    }

    /// The full stack of transformer layers.
    pub fn fmt_forward(
        &self,
        tape: &mut Tape,
        binding: &TapeBinding,
        x: NodeId,
        mask: &[bool],
        mut dropout: Option<&mut DropoutCtx>,
    ) -> Result<NodeId> {
        let mut h = x;
        for layer in 0..self.config.n_layers {
            h = self.mtl_forward(tape, binding, layer, h, mask, dropout.as_deref_mut())?;
        }
        Ok(h)
    }

    /// GRU over the final states, then the vocabulary projection. States at
    /// padded source positions are zeroed first so the recurrence carries
    /// nothing that depends on values stored at padding.
    pub fn head_logits(
        &self,
        tape: &mut Tape,
        binding: &TapeBinding,
        states: NodeId,
        source_pad: &[bool],
    ) -> Result<NodeId> {
        let l_prime = tape.value(states).rows();
        let d_x = self.config.d_x();
        let d_y = self.config.d_y;

        let any_pad = source_pad.iter().any(|&p| p);
        let states = if any_pad {
            let mut mask = vec![false; l_prime * d_x];
            for (t, &p) in source_pad.iter().enumerate() {
                if p {
                    mask[t * d_x..(t + 1) * d_x].fill(true);
                }
            }
            tape.masked_fill(states, &mask, 0.0)?
        } else {
            states
        };

        let wz = self.node(binding, "gru.wz");
        let uz = self.node(binding, "gru.uz");
        let bz = self.node(binding, "gru.bz");
        let wr = self.node(binding, "gru.wr");
        let ur = self.node(binding, "gru.ur");
        let br = self.node(binding, "gru.br");
        let wh = self.node(binding, "gru.wh");
        let uh = self.node(binding, "gru.uh");
        let bh = self.node(binding, "gru.bh");

        let mut h = tape.input(Tensor::zeros(vec![1, d_y]));
        let mut rows = Vec::with_capacity(l_prime);
        for t in 0..l_prime {
            let x_t = tape.slice(states, 0, t, 1)?;
            let z = {
                let a = tape.matmul(x_t, wz)?;
                let b = tape.matmul(h, uz)?;
                let s = tape.add(a, b)?;
                let s = tape.add(s, bz)?;
                tape.sigmoid(s)?
            };
            let r = {
                let a = tape.matmul(x_t, wr)?;
                let b = tape.matmul(h, ur)?;
                let s = tape.add(a, b)?;
                let s = tape.add(s, br)?;
                tape.sigmoid(s)?
            };
            let candidate = {
                let gated_h = tape.mul(h, r)?;
                let a = tape.matmul(x_t, wh)?;
                let b = tape.matmul(gated_h, uh)?;
                let s = tape.add(a, b)?;
                let s = tape.add(s, bh)?;
                tape.tanh(s)?
            };
            // h <- (1 - z) h + z c  ==  h + z (c - h)
            let neg_h = tape.scale(h, -1.0)?;
            let delta = tape.add(candidate, neg_h)?;
            let step = tape.mul(delta, z)?;
            h = tape.add(h, step)?;
            rows.push(h);
        }
        let hidden = tape.concat(&rows, 0)?;

        let logits = if self.config.tie_embeddings {
            let table = self.node(binding, "embed.token");
            let w_out = tape.transpose(table)?;
            tape.matmul(hidden, w_out)?
        } else {
            let w_out = self.node(binding, "head.w");
            tape.matmul(hidden, w_out)?
        };
        let bias = self.node(binding, "head.b");
        tape.add(logits, bias)
    }
}

/// Everything a forward pass hands back to training or generation.
pub struct ForwardPass {
    pub logits: NodeId,
    pub states: NodeId,
    /// The assembled input sequence with positional embeddings added.
    pub sequence: NodeId,
    pub layout: LmLayout,
    pub source_pad: Vec<bool>,
}

/// Serializable description of one parameter for checkpoint indexes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

impl FmtModel {
    pub fn param_infos(&self) -> Vec<ParamInfo> {
        self.params
            .iter()
            .map(|(name, t)| ParamInfo {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect()
    }
}
