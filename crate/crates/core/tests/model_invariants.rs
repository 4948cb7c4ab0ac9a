//! Cross-module invariants that need the whole model wired together.

use mmsum_core::config::RunConfig;
use mmsum_core::fusion;
use mmsum_core::io::align::{pad_and_assemble, resample_to_clock, ModalProjection, Projections};
use mmsum_core::model::{FmtModel, ModelInput, SeqMode, TextSource};
use mmsum_core::rng::Rng;
use mmsum_core::sequence::attention_mask;
use mmsum_core::tape::Tape;
use mmsum_core::tensor::Tensor;

/// Logits at non-pad positions must not depend on values stored at padded
/// source positions: pad keys are masked out of every attention and pad
/// states are zeroed before the recurrent head.
#[test]
fn padding_neutrality_is_bit_exact() {
    let config = RunConfig::toy().model;
    let model = FmtModel::init(config.clone(), 5).unwrap();
    let mut rng = Rng::new(2);
    let l_prime = 10;
    let pad: Vec<bool> = (0..l_prime).map(|t| t == 4 || t == 7).collect();
    let mask = attention_mask(l_prime, &pad);
    let x_base = Tensor::rand_uniform(vec![l_prime, config.d_x()], -1.0, 1.0, &mut rng);

    let logits_for = |x: &Tensor| -> Tensor {
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape);
        let node = tape.input(x.clone());
        let states = model.fmt_forward(&mut tape, &binding, node, &mask, None).unwrap();
        let logits = model.head_logits(&mut tape, &binding, states, &pad).unwrap();
        tape.value(logits).clone()
    };
    let baseline = logits_for(&x_base);

    for trial in 0..5 {
        let mut x = x_base.clone();
        for (t, &is_pad) in pad.iter().enumerate() {
            if is_pad {
                for k in 0..config.d_x() {
                    x.set(t, k, rng.range(-50.0, 50.0));
                }
            }
        }
        let perturbed = logits_for(&x);
        for (t, &is_pad) in pad.iter().enumerate() {
            if !is_pad {
                assert!(
                    perturbed.row(t) == baseline.row(t),
                    "trial {trial}: logits at non-pad position {t} changed with pad values"
                );
            }
        }
    }
}

/// The model's on-tape source assembly and the standalone pad_and_assemble
/// agree when fed the same projections and the same fused textual stream.
#[test]
fn on_tape_assembly_matches_offline_assembly() {
    let run = RunConfig::toy();
    let config = &run.model;
    let model = FmtModel::init(config.clone(), 9).unwrap();
    let mut rng = Rng::new(4);

    // Short streams so padding is exercised.
    let visual = Tensor::rand_uniform(vec![10, config.d_visual], -1.0, 1.0, &mut rng);
    let acoustic = Tensor::rand_uniform(vec![12, config.d_acoustic], -1.0, 1.0, &mut rng);
    let asr: Vec<u32> = vec![5, 8, 9, 6, 7];
    let ocr: Vec<u32> = vec![8, 10];

    // On-tape: explicit rates put every stream through the identity
    // resampler, so lengths stay as given and the tail is padding.
    let mut on_run = run.clone();
    on_run.rates.visual = Some(1.0);
    on_run.rates.acoustic = Some(1.0);
    on_run.rates.textual = Some(1.0);
    let input = ModelInput {
        visual: visual.clone(),
        acoustic: acoustic.clone(),
        text: TextSource::Tokens {
            asr: asr.clone(),
            ocr: ocr.clone(),
        },
    };
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);
    let (node, pad_mask) = model
        .assemble_source(&mut tape, &binding, &input, on_run.rates.textual, on_run.rates.reference)
        .unwrap();
    let on_tape = tape.value(node).clone();

    // Offline: embed and fuse with the same parameters, then resample and
    // assemble with the model's own projection tensors.
    let table = model.param("embed.token").unwrap();
    let embed = |ids: &[u32]| -> Tensor {
        let mut out = Tensor::zeros(vec![ids.len(), config.d_b]);
        for (i, &id) in ids.iter().enumerate() {
            for k in 0..config.d_b {
                out.set(i, k, table.at(id as usize, k));
            }
        }
        out
    };
    let fused = fusion::fuse(&embed(&asr), &embed(&ocr), model.param("fusion.w_b").unwrap())
        .unwrap()
        .fused;
    let textual = resample_to_clock(&fused, 1.0, 1.0).unwrap();
    let proj = |name: &str| {
        ModalProjection::new(
            model.param(&format!("{name}.w")).unwrap().clone(),
            model.param(&format!("{name}.b")).unwrap().clone(),
        )
        .unwrap()
    };
    let projections = Projections {
        visual: proj("proj.visual"),
        acoustic: proj("proj.acoustic"),
        textual: proj("proj.textual"),
    };
    let offline = pad_and_assemble(&visual, &acoustic, &textual, config.l_max, &projections).unwrap();

    assert_eq!(on_tape.shape(), offline.blocks.shape());
    let diff = on_tape.max_abs_diff(&offline.blocks);
    assert!(diff < 1e-12, "assembly paths disagree by {diff}");
    assert_eq!(pad_mask, offline.pad_mask);
    // Streams of lengths 10/12/7 on a 16-clock: positions 12.. are padding.
    assert_eq!(&pad_mask[..12], vec![false; 12].as_slice());
    assert_eq!(&pad_mask[12..], vec![true; 4].as_slice());
}

/// Appended positions carry zero visual and acoustic blocks: after the
/// positional table is added, those entries equal the positional row
/// exactly, and the textual block equals token embedding plus position.
#[test]
fn appended_region_blocks_are_zero() {
    let run = RunConfig::toy();
    let model = FmtModel::init(run.model.clone(), 3).unwrap();
    let mut rng = Rng::new(8);
    let input = ModelInput {
        visual: Tensor::rand_uniform(vec![16, run.model.d_visual], -1.0, 1.0, &mut rng),
        acoustic: Tensor::rand_uniform(vec![16, run.model.d_acoustic], -1.0, 1.0, &mut rng),
        text: TextSource::Tokens {
            asr: vec![5, 6],
            ocr: vec![],
        },
    };
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);
    let pass = model
        .forward(
            &mut tape,
            &binding,
            &input,
            SeqMode::Train { target: &[5, 6, 7] },
            None,
            1.0,
            None,
        )
        .unwrap();
    assert_eq!(pass.layout.l_prime, 16 + 3 + 2);
    assert_eq!(pass.layout.appended.len(), 5);

    let seq = tape.value(pass.sequence);
    let table = model.param("embed.token").unwrap();
    let pos = model.param("embed.pos").unwrap();
    let d_b = run.model.d_b;
    for (offset, &tok) in pass.layout.appended.iter().enumerate() {
        let t = 16 + offset;
        for k in 0..2 * d_b {
            assert_eq!(seq.at(t, k), pos.at(t, k), "float block at ({t}, {k})");
        }
        for k in 0..d_b {
            let expected = table.at(tok as usize, k) + pos.at(t, 2 * d_b + k);
            assert_eq!(seq.at(t, 2 * d_b + k), expected, "textual block at ({t}, {k})");
        }
    }
}
