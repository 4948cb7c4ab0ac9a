//! Named gradient-check suites over every registered primitive.
//!
//! Each suite builds a small scalar function around one primitive and runs
//! central finite differences at random points. Points are drawn away from
//! non-differentiable kinks (relu corners, cosine zero norms) so the check
//! measures the implementation, not the sampling luck.

use crate::error::Result;
use crate::rng::Rng;
use crate::tape::{grad_check, NodeId, Tape, MASK_FILL};
use crate::tensor::Tensor;

/// Finite-difference step used throughout.
pub const H: f64 = 1e-5;

/// Relative-error threshold every primitive must satisfy.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct PrimitiveReport {
    pub name: &'static str,
    pub max_rel_err: f64,
}

/// Sample uniformly from [-2, -0.5] or [0.5, 2]: keeps points away from 0,
/// where relu and |.| are non-smooth and finite differences lie.
fn off_kink(rng: &mut Rng) -> f64 {
    let mag = rng.range(0.5, 2.0);
    if rng.uniform() < 0.5 {
        -mag
    } else {
        mag
    }
}

fn off_kink_tensor(shape: Vec<usize>, rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| off_kink(rng)).collect()).unwrap()
}

fn check_once(
    name: &'static str,
    f: impl Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
    points: Vec<Tensor>,
) -> Result<PrimitiveReport> {
    let err = grad_check(&f, &points, H)?;
    Ok(PrimitiveReport {
        name,
        max_rel_err: err,
    })
}

/// Run every primitive's gradient check at `rounds` random points each and
/// return the worst relative error seen per primitive.
pub fn primitive_suite(seed: u64, rounds: usize) -> Result<Vec<PrimitiveReport>> {
    let mut rng = Rng::new(seed);
    let mut worst: Vec<PrimitiveReport> = Vec::new();

    let record = |r: PrimitiveReport, out: &mut Vec<PrimitiveReport>| {
        if let Some(existing) = out.iter_mut().find(|e| e.name == r.name) {
            if r.max_rel_err > existing.max_rel_err {
                existing.max_rel_err = r.max_rel_err;
            }
        } else {
            out.push(r);
        }
    };

    for _ in 0..rounds {
        let reports = one_round(&mut rng)?;
        for r in reports {
            record(r, &mut worst);
        }
    }
    Ok(worst)
}

fn one_round(rng: &mut Rng) -> Result<Vec<PrimitiveReport>> {
    let mut out = Vec::new();

    out.push(check_once(
        "matmul",
        |t, ids| {
            let y = t.matmul(ids[0], ids[1])?;
            t.sum(y)
        },
        vec![
            Tensor::rand_uniform(vec![3, 4], -1.0, 1.0, rng),
            Tensor::rand_uniform(vec![4, 5], -1.0, 1.0, rng),
        ],
    )?);

    out.push(check_once(
        "add",
        |t, ids| {
            let y = t.add(ids[0], ids[1])?;
            let y = t.tanh(y)?;
            t.sum(y)
        },
        vec![
            Tensor::rand_uniform(vec![3, 4], -1.0, 1.0, rng),
            Tensor::rand_uniform(vec![1, 4], -1.0, 1.0, rng),
        ],
    )?);

    out.push(check_once(
        "mul",
        |t, ids| {
            let y = t.mul(ids[0], ids[1])?;
            t.sum(y)
        },
        vec![
            Tensor::rand_uniform(vec![4, 3], -1.0, 1.0, rng),
            Tensor::rand_uniform(vec![4, 1], -1.0, 1.0, rng),
        ],
    )?);

    out.push(check_once(
        "tanh",
        |t, ids| {
            let y = t.tanh(ids[0])?;
            t.sum(y)
        },
        vec![Tensor::rand_uniform(vec![2, 6], -2.0, 2.0, rng)],
    )?);

    out.push(check_once(
        "sigmoid",
        |t, ids| {
            let y = t.sigmoid(ids[0])?;
            let sq = t.mul(y, y)?;
            t.sum(sq)
        },
        vec![Tensor::rand_uniform(vec![2, 6], -3.0, 3.0, rng)],
    )?);

    out.push(check_once(
        "relu",
        |t, ids| {
            let y = t.relu(ids[0])?;
            t.sum(y)
        },
        vec![off_kink_tensor(vec![3, 5], rng)],
    )?);

    out.push(check_once(
        "softmax",
        |t, ids| {
            let s = t.softmax(ids[0], 1)?;
            let sq = t.mul(s, s)?;
            t.sum(sq)
        },
        vec![Tensor::rand_uniform(vec![3, 6], -2.0, 2.0, rng)],
    )?);

    out.push(check_once(
        "softmax-axis0",
        |t, ids| {
            let s = t.softmax(ids[0], 0)?;
            let sq = t.mul(s, s)?;
            t.sum(sq)
        },
        vec![Tensor::rand_uniform(vec![4, 3], -2.0, 2.0, rng)],
    )?);

    out.push(check_once(
        "log-softmax",
        |t, ids| {
            let s = t.log_softmax(ids[0], 1)?;
            let sq = t.mul(s, s)?;
            t.sum(sq)
        },
        vec![Tensor::rand_uniform(vec![3, 5], -2.0, 2.0, rng)],
    )?);

    out.push(check_once(
        "layer-normalize",
        |t, ids| {
            let y = t.layer_norm(ids[0])?;
            let cubed = t.mul(y, y)?;
            let cubed = t.mul(cubed, y)?;
            t.sum(cubed)
        },
        vec![Tensor::rand_uniform(vec![3, 8], -2.0, 2.0, rng)],
    )?);

    let drop_seed = rng.next_u64();
    out.push(check_once(
        "dropout",
        move |t, ids| {
            let mut drop_rng = Rng::new(drop_seed);
            let y = t.dropout(ids[0], 0.3, &mut drop_rng)?;
            let sq = t.mul(y, y)?;
            t.sum(sq)
        },
        vec![Tensor::rand_uniform(vec![4, 6], -1.0, 1.0, rng)],
    )?);

    out.push(check_once(
        "embed-lookup",
        |t, ids| {
            let rows = t.embed_lookup(ids[0], &[2, 0, 1, 2])?;
            let sq = t.mul(rows, rows)?;
            t.sum(sq)
        },
        vec![Tensor::rand_uniform(vec![4, 5], -1.0, 1.0, rng)],
    )?);

    out.push(check_once(
        "concat",
        |t, ids| {
            let y = t.concat(&[ids[0], ids[1]], 1)?;
            let y = t.tanh(y)?;
            t.sum(y)
        },
        vec![
            Tensor::rand_uniform(vec![3, 2], -1.0, 1.0, rng),
            Tensor::rand_uniform(vec![3, 4], -1.0, 1.0, rng),
        ],
    )?);

    out.push(check_once(
        "slice",
        |t, ids| {
            let y = t.slice(ids[0], 0, 1, 2)?;
            let sq = t.mul(y, y)?;
            t.sum(sq)
        },
        vec![Tensor::rand_uniform(vec![4, 3], -1.0, 1.0, rng)],
    )?);

    out.push(check_once(
        "transpose",
        |t, ids| {
            let at = t.transpose(ids[0])?;
            let y = t.matmul(ids[0], at)?;
            t.sum(y)
        },
        vec![Tensor::rand_uniform(vec![3, 4], -1.0, 1.0, rng)],
    )?);

    out.push(check_once(
        "cosine-similarity",
        |t, ids| {
            let c = t.cosine_similarity(ids[0], ids[1])?;
            t.sum(c)
        },
        vec![off_kink_tensor(vec![3, 5], rng), off_kink_tensor(vec![3, 5], rng)],
    )?);

    out.push(check_once(
        "scalar-scale",
        |t, ids| {
            let y = t.scale(ids[0], -1.7)?;
            let y = t.tanh(y)?;
            t.sum(y)
        },
        vec![Tensor::rand_uniform(vec![2, 5], -1.0, 1.0, rng)],
    )?);

    out.push(check_once(
        "masked-fill",
        |t, ids| {
            let mask = [false, true, false, false, true, false];
            let y = t.masked_fill(ids[0], &mask, MASK_FILL)?;
            let s = t.softmax(y, 1)?;
            let sq = t.mul(s, s)?;
            t.sum(sq)
        },
        vec![Tensor::rand_uniform(vec![2, 3], -2.0, 2.0, rng)],
    )?);

    out.push(check_once(
        "cross-entropy",
        |t, ids| t.cross_entropy(ids[0], &[1, 3, 0], &[true, false, true]),
        vec![Tensor::rand_uniform(vec![3, 4], -2.0, 2.0, rng)],
    )?);

    out.push(check_once(
        "sum",
        |t, ids| {
            let sq = t.mul(ids[0], ids[0])?;
            t.sum(sq)
        },
        vec![Tensor::rand_uniform(vec![3, 3], -1.0, 1.0, rng)],
    )?);

    Ok(out)
}


/// Finite-difference check of the full model: scalar training loss as a
/// function of `n_params` randomly chosen parameter tensors, probing
/// `coords_per_param` coordinates of each. Returns the worst relative error.
pub fn model_gradcheck(
    config: &crate::config::ModelConfig,
    seed: u64,
    n_params: usize,
    coords_per_param: usize,
) -> Result<f64> {
    use crate::model::{FmtModel, ModelInput, SeqMode, TextSource};
    use crate::tape::grad_check_sampled;

    let model = FmtModel::init(config.clone(), seed)?;
    let mut rng = Rng::new(seed ^ 0x6d6f64656c);
    let l = config.l_max;
    let real_tokens = crate::io::vocab::RESERVED.len() as u32..config.vocab_size as u32;
    let pick_tokens = |rng: &mut Rng, n: usize| -> Vec<u32> {
        (0..n)
            .map(|_| real_tokens.start + rng.below((real_tokens.end - real_tokens.start) as usize) as u32)
            .collect()
    };
    let input = ModelInput {
        visual: Tensor::rand_uniform(vec![l, config.d_visual], -1.0, 1.0, &mut rng),
        acoustic: Tensor::rand_uniform(vec![l, config.d_acoustic], -1.0, 1.0, &mut rng),
        text: TextSource::Tokens {
            asr: pick_tokens(&mut rng, l.min(8)),
            ocr: pick_tokens(&mut rng, 3),
        },
    };
    let target = pick_tokens(&mut rng, config.m_max.min(3));

    let n_total = model.params().len();
    let mut worst = 0.0f64;
    for _ in 0..n_params {
        let probe = rng.below(n_total);
        let point = model.params()[probe].1.clone();
        let err = grad_check_sampled(
            &|tape: &mut Tape, ids: &[NodeId]| {
                let mut binding = model.bind(tape);
                model.rebind_param(&mut binding, probe, ids[0]);
                let pass = model.forward(
                    tape,
                    &binding,
                    &input,
                    SeqMode::Train { target: &target },
                    None,
                    1.0,
                    None,
                )?;
                tape.cross_entropy(pass.logits, &pass.layout.labels, &pass.layout.loss_mask)
            },
            &[point],
            H,
            coords_per_param,
            &mut rng,
        )?;
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}
