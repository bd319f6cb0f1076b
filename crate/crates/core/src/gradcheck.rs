//! Central finite-difference checks of analytic gradients (f64 only).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{OpKind, ParamId, ParamStore, RetentionPolicy, Tape, Var};
use crate::discriminator::{Conditioning, PatchDiscriminator};
use crate::error::{Error, Result};
use crate::generators::{build_generator_pair, Domain, GeneratorConfig};
use crate::kernels::PaddingSpec;
use crate::reversible::{gradient_discrepancy, CouplingBlock, Direction, RetentionMode, ReversibleSequence};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default step.
pub const STEP: f64 = 1e-5;
/// Pass threshold for the suite.
pub const TOLERANCE: f64 = 1e-6;
/// Inputs closer than this to an activation kink are pushed away from it.
pub const KINK_MARGIN: f64 = 1e-3;

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn scalar_of(tape: &Tape<f64>, v: Var) -> Result<f64> {
    let t = tape.try_value(v)?;
    if !t.is_scalar() {
        return Err(Error::invalid(format!(
            "gradcheck needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

/// `max_i |g_i - (f(x + h e_i) - f(x - h e_i)) / 2h| / max(1, |g_i|)` for
/// the analytic gradient `g` of `f` at `x`.
pub fn gradcheck<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    gradcheck_with_fault(f, x, h, None)
}

fn gradcheck_with_fault<F>(f: F, x: &Tensor<f64>, h: f64, fault: Option<OpKind>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    input_check(|t, _, v| f(t, v), &ParamStore::new(), x, h, fault)
}

/// Input-gradient check of `f`, which may read parameters from `store`.
fn input_check<F>(f: F, store: &ParamStore<f64>, x: &Tensor<f64>, h: f64, fault: Option<OpKind>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>, Var) -> Result<Var>,
{
    let mut scratch = store.clone();
    let mut tape = Tape::new(RetentionPolicy::RetainAll);
    if let Some(k) = fault {
        tape.inject_fault(k);
    }
    let xv = tape.input(x.clone());
    let out = f(&mut tape, store, xv)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out, &mut scratch)?;
    let analytic = grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    let eval = |x: Tensor<f64>| -> Result<f64> {
        let mut t = Tape::no_grad();
        let v = t.input(x);
        let o = f(&mut t, store, v)?;
        scalar_of(&t, o)
    };
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(rel_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Same metric over every coordinate of the parameters `ids`.
pub fn gradcheck_params<F>(f: F, store: &mut ParamStore<f64>, ids: &[ParamId], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    gradcheck_params_with_fault(f, store, ids, h, None)
}

fn gradcheck_params_with_fault<F>(
    f: F,
    store: &mut ParamStore<f64>,
    ids: &[ParamId],
    h: f64,
    fault: Option<OpKind>,
) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    store.zero_all_grads();
    let mut tape = Tape::new(RetentionPolicy::ReversibleAware);
    if let Some(k) = fault {
        tape.inject_fault(k);
    }
    let out = f(&mut tape, store)?;
    scalar_of(&tape, out)?;
    tape.backward(out, store)?;
    let analytic: Vec<Tensor<f64>> = ids.iter().map(|&id| store.grad(id).clone()).collect();
    store.zero_all_grads();
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut t = Tape::no_grad();
        let o = f(&mut t, store)?;
        scalar_of(&t, o)
    };
    let mut worst = 0.0f64;
    for (k, &id) in ids.iter().enumerate() {
        for i in 0..store.value(id).numel() {
            let orig = store.value(id).data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + h;
            let fp = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig - h;
            let fm = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            worst = worst.max(rel_error(analytic[k].data()[i], (fp - fm) / (2.0 * h)));
        }
    }
    Ok(worst)
}

/// Moves entries within `margin` of 0 out to `+-margin`.
pub fn nudge_off_kinks(x: &Tensor<f64>, margin: f64) -> Tensor<f64> {
    x.map(|v| if v.abs() < margin { margin.copysign(v) } else { v })
}

/// One line of the suite.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckRecord {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

type Case = (&'static str, Box<dyn Fn(Option<OpKind>) -> Result<f64>>);

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    nudge_off_kinks(&Tensor::uniform(shape, -1.0, 1.0, &mut rng), KINK_MARGIN)
}

/// Contracts `v` with fixed random weights so every output entry matters.
fn weighted_sum(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(v)?;
    let w = tape.constant(random(&shape, seed));
    let p = tape.mul(v, w)?;
    tape.sum(p)
}

fn input_case<F>(shape: &'static [usize], seed: u64, f: F) -> Box<dyn Fn(Option<OpKind>) -> Result<f64>>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var> + Clone + 'static,
{
    Box::new(move |fault| {
        let x = random(shape, seed);
        let f = f.clone();
        gradcheck_with_fault(
            move |t, v| {
                let o = f(t, v)?;
                weighted_sum(t, o, seed + 1)
            },
            &x,
            STEP,
            fault,
        )
    })
}

fn primitive_cases() -> Vec<Case> {
    const X: &[usize] = &[2, 4, 5, 5];
    let conv_w = random(&[3, 4, 3, 3], 11);
    let conv_b = random(&[3], 12);
    let tw = random(&[4, 3, 3, 3], 13);
    let tb = random(&[3], 14);
    let (w1, b1, w2, b2) = (conv_w.clone(), conv_b.clone(), tw.clone(), tb.clone());
    let other = random(X, 15);
    let (o1, o2, o3) = (other.clone(), other.clone(), other);
    vec![
        (
            "conv2d",
            input_case(X, 1, move |t, x| {
                let (w, b) = (t.input(w1.clone()), t.input(b1.clone()));
                t.conv2d(x, w, b, 2, PaddingSpec::Reflect(1))
            }),
        ),
        (
            "conv2d_zero_pad",
            input_case(X, 2, move |t, x| {
                let (w, b) = (t.constant(conv_w.clone()), t.constant(conv_b.clone()));
                t.conv2d(x, w, b, 1, PaddingSpec::Zero(1))
            }),
        ),
        (
            "conv2d_transpose",
            input_case(X, 3, move |t, x| {
                let (w, b) = (t.input(w2.clone()), t.input(b2.clone()));
                t.conv_transpose2d(x, w, b, 2, 1, 1)
            }),
        ),
        (
            "conv2d_transpose_weights",
            Box::new(move |fault| {
                let x = random(X, 4);
                let b = tb.clone();
                gradcheck_with_fault(
                    move |t, w| {
                        let (xv, bv) = (t.constant(x.clone()), t.constant(b.clone()));
                        let o = t.conv_transpose2d(xv, w, bv, 2, 1, 1)?;
                        weighted_sum(t, o, 5)
                    },
                    &tw,
                    STEP,
                    fault,
                )
            }),
        ),
        ("instance_norm", input_case(X, 6, |t, x| t.instance_norm(x, 1e-5))),
        ("relu", input_case(X, 7, |t, x| t.relu(x))),
        ("leaky_relu", input_case(X, 8, |t, x| t.leaky_relu(x, 0.2))),
        ("tanh", input_case(X, 9, |t, x| t.tanh(x))),
        ("sigmoid", input_case(X, 10, |t, x| t.sigmoid(x))),
        ("softplus", input_case(X, 16, |t, x| t.softplus(x))),
        ("abs", input_case(X, 17, |t, x| t.abs(x))),
        (
            "add",
            input_case(X, 18, move |t, x| {
                let o = t.constant(o1.clone());
                t.add(x, o)
            }),
        ),
        (
            "sub",
            input_case(X, 19, move |t, x| {
                let o = t.constant(o2.clone());
                t.sub(o, x)
            }),
        ),
        (
            "mul",
            input_case(X, 20, move |t, x| {
                let o = t.constant(o3.clone());
                let p = t.mul(x, o)?;
                t.mul(p, x)
            }),
        ),
        ("scale", input_case(X, 21, |t, x| t.scale(x, -2.5))),
        (
            "channel_split_concat",
            input_case(X, 22, |t, x| {
                let (a, b) = t.channel_split(x)?;
                let b2 = t.scale(b, 3.0)?;
                t.concat(b2, a)
            }),
        ),
        (
            "sum",
            input_case(X, 23, |t, x| {
                let s = t.mul(x, x)?;
                t.sum(s)
            }),
        ),
        (
            "mean",
            input_case(X, 24, |t, x| {
                let s = t.mul(x, x)?;
                t.mean(s)
            }),
        ),
        (
            "composite_depth6",
            input_case(X, 25, move |t, x| {
                let (w, b) = (t.constant(random(&[4, 4, 3, 3], 26)), t.constant(random(&[4], 27)));
                let h = t.conv2d(x, w, b, 1, PaddingSpec::Reflect(1))?;
                let h = t.instance_norm(h, 1e-5)?;
                let h = t.leaky_relu(h, 0.2)?;
                let h = t.add(h, x)?;
                let h = t.tanh(h)?;
                t.softplus(h)
            }),
        ),
    ]
}

fn model_cases() -> Vec<Case> {
    vec![
        (
            "coupling_block",
            Box::new(|fault| {
                let mut store = ParamStore::<f64>::new();
                let block = CouplingBlock::register(&mut store, "blk", 4, true)?;
                let ids = block.param_ids();
                crate::layers::init_gaussian(&mut store, &ids, 31, 0.5);
                let x = random(&[1, 4, 5, 5], 32);
                let xp = x.clone();
                let gi = input_check(
                    |t, s, v| {
                        let o = block.forward(t, s, v)?;
                        weighted_sum(t, o, 33)
                    },
                    &store,
                    &x,
                    STEP,
                    fault,
                )?;
                let gp = gradcheck_params_with_fault(
                    |t, s| {
                        let v = t.constant(xp.clone());
                        let o = block.forward(t, s, v)?;
                        weighted_sum(t, o, 33)
                    },
                    &mut store,
                    &ids,
                    STEP,
                    fault,
                )?;
                Ok(gi.max(gp))
            }),
        ),
        (
            "reversible_sequence_recompute",
            Box::new(|fault| {
                let mut store = ParamStore::<f64>::new();
                let seq = ReversibleSequence::register(&mut store, "core", 4, 4, true, RetentionMode::Recompute)?;
                let ids = seq.param_ids();
                crate::layers::init_gaussian(&mut store, &ids, 34, 0.5);
                let x = random(&[1, 4, 4, 4], 35);
                gradcheck_params_with_fault(
                    |t, s| {
                        let v = t.input(x.clone());
                        let o = seq.forward(t, s, v, Direction::Yx)?;
                        weighted_sum(t, o, 36)
                    },
                    &mut store,
                    &ids,
                    STEP,
                    fault,
                )
            }),
        ),
        (
            "generator_pair",
            Box::new(|fault| {
                let mut store = ParamStore::<f64>::new();
                let cfg = GeneratorConfig {
                    zero_init: false,
                    ..GeneratorConfig::new(2, 1, 8)
                };
                let pair = build_generator_pair(&mut store, &cfg, 41)?;
                crate::layers::init_gaussian(&mut store, &pair.param_ids(), 41, 0.3);
                let ids = pair.param_ids();
                let x = random(&[1, 3, 8, 8], 42);
                gradcheck_params_with_fault(
                    |t, s| {
                        let v = t.constant(x.clone());
                        let fy = pair.translate(t, s, v, Domain::X)?;
                        let back = pair.translate(t, s, fy, Domain::Y)?;
                        let a = weighted_sum(t, fy, 43)?;
                        let b = weighted_sum(t, back, 44)?;
                        t.add(a, b)
                    },
                    &mut store,
                    &ids,
                    STEP,
                    fault,
                )
            }),
        ),
        (
            "patch_discriminator",
            Box::new(|fault| {
                let mut store = ParamStore::<f64>::new();
                let d = PatchDiscriminator::build(&mut store, "d", 3, 2, Conditioning::Conditional, 51)?;
                crate::layers::init_gaussian(&mut store, &d.param_ids(), 51, 0.3);
                let ids = d.param_ids();
                let (img, cond) = (random(&[1, 3, 16, 16], 52), random(&[1, 3, 16, 16], 53));
                let pg = gradcheck_params_with_fault(
                    |t, s| {
                        let (i, c) = (t.constant(img.clone()), t.constant(cond.clone()));
                        let o = d.logits(t, s, i, Some(c))?;
                        weighted_sum(t, o, 54)
                    },
                    &mut store,
                    &ids,
                    STEP,
                    fault,
                )?;
                let ig = input_check(
                    |t, s, v| {
                        let c = t.constant(cond.clone());
                        let o = d.logits(t, s, v, Some(c))?;
                        weighted_sum(t, o, 54)
                    },
                    &store,
                    &img,
                    STEP,
                    fault,
                )?;
                Ok(pg.max(ig))
            }),
        ),
    ]
}

/// Stored versus recompute gradients of a depth-4 core, worst of both
/// directions and of input and parameter gradients.
pub fn equivalence_error<T: Scalar>(depth: usize, seed: u64) -> Result<f64> {
    let mut store = ParamStore::<T>::new();
    let mut seq = ReversibleSequence::register(&mut store, "core", 8, depth, true, RetentionMode::Stored)?;
    crate::layers::init_gaussian(&mut store, &seq.param_ids(), seed, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::<T>::uniform(&[2, 8, 6, 6], -1.0, 1.0, &mut rng);
    let mut worst = 0.0f64;
    for dir in [Direction::Xy, Direction::Yx] {
        let (a, b) = gradient_discrepancy(&mut seq, &mut store, &x, dir)?;
        worst = worst.max(a).max(b);
    }
    Ok(worst)
}

/// Checks every primitive op, a coupling block, a depth-4 recompute-mode
/// sequence, a generator pair and a discriminator against finite
/// differences, then stored-versus-recompute gradient equivalence. `fault`
/// corrupts the backward rule of one op kind so the harness can be shown to
/// catch it.
pub fn gradcheck_suite(fault: Option<OpKind>) -> Result<Vec<GradcheckRecord>> {
    let mut out = Vec::new();
    let mut push = |name: &str, err: f64, tolerance: f64| {
        out.push(GradcheckRecord {
            name: name.to_string(),
            max_rel_error: err,
            tolerance,
            passed: err < tolerance,
        })
    };
    for (name, case) in primitive_cases().into_iter().chain(model_cases()) {
        push(name, case(fault)?, TOLERANCE);
    }
    push("stored_vs_recompute_f64", equivalence_error::<f64>(4, 61)?, 1e-10);
    push("stored_vs_recompute_f32", equivalence_error::<f32>(4, 61)?, 1e-5);
    Ok(out)
}

/// Draws a random point for ad-hoc checks.
pub fn random_point(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    nudge_off_kinks(&Tensor::uniform(shape, -1.0, 1.0, rng), KINK_MARGIN)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact_to_rounding() {
        let x = random(&[2, 3], 1);
        let e = gradcheck(
            |t, v| {
                let s = t.mul(v, v)?;
                t.sum(s)
            },
            &x,
            STEP,
        )
        .unwrap();
        assert!(e < 1e-9, "{e}");
    }

    #[test]
    fn non_scalar_function_is_rejected() {
        let x = random(&[2, 3], 1);
        assert!(matches!(
            gradcheck(|t, v| t.relu(v), &x, STEP),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn nudging_moves_values_off_zero() {
        let x = Tensor::new(vec![3], vec![0.0, -1e-4, 0.5]).unwrap();
        assert_eq!(nudge_off_kinks(&x, 1e-3).data(), &[1e-3, -1e-3, 0.5]);
    }

    #[test]
    fn suite_passes_and_catches_an_injected_fault() {
        let records = gradcheck_suite(None).unwrap();
        for r in &records {
            assert!(r.passed, "{} failed with {}", r.name, r.max_rel_error);
        }
        let faulty = gradcheck_suite(Some(OpKind::Tanh)).unwrap();
        assert!(faulty.iter().any(|r| r.name == "tanh" && !r.passed));
    }
}
