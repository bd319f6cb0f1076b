//! Adversarial, L1 and cycle objectives and their paired/unpaired totals.
//!
//! Every log-sigmoid is evaluated from logits as a softplus:
//! `-ln sigmoid(z) = softplus(-z)` and `-ln(1 - sigmoid(z)) = softplus(z)`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::data::SampleBatch;
use crate::discriminator::PatchDiscriminator;
use crate::error::{Error, Result};
use crate::generators::{Domain, GeneratorPair};
use crate::kernels::softplus_scalar;
use crate::model::{Regime, RevGan};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GanMode {
    /// Generator minimizes `-ln sigmoid(fake)`.
    #[default]
    Nonsaturating,
    /// Generator minimizes `ln(1 - sigmoid(fake))`.
    Minimax,
}

/// Scalar loss terms of one iteration. Terms that do not apply to the
/// regime are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub adv_g_xy: f64,
    pub adv_g_yx: f64,
    pub adv_d_x: f64,
    pub adv_d_y: f64,
    pub l1_xy: f64,
    pub l1_yx: f64,
    pub cycle_x: f64,
    pub cycle_y: f64,
    pub total_g: f64,
    pub total_d_x: f64,
    pub total_d_y: f64,
}

impl LossReport {
    /// Generator total for `regime` and `lambda`, summed in f64.
    pub fn generator_total(&self, regime: Regime, lambda: f64) -> f64 {
        let rec = match regime {
            Regime::Paired => self.l1_xy + self.l1_yx,
            Regime::Unpaired => self.cycle_x + self.cycle_y,
        };
        lambda * rec + self.adv_g_xy + self.adv_g_yx
    }

    pub fn all_finite(&self) -> bool {
        [
            self.adv_g_xy,
            self.adv_g_yx,
            self.adv_d_x,
            self.adv_d_y,
            self.l1_xy,
            self.l1_yx,
            self.cycle_x,
            self.cycle_y,
            self.total_g,
            self.total_d_x,
            self.total_d_y,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// `(loss_d, loss_g)` for real and fake logit grids, non-saturating generator.
pub fn adversarial_losses<T: Scalar>(real: &Tensor<T>, fake: &Tensor<T>) -> Result<(f64, f64)> {
    real.expect_same_shape(fake)?;
    let mean_sp = |t: &Tensor<T>, sign: f64| {
        t.data()
            .iter()
            .map(|&v| softplus_scalar(v.as_f64() * sign))
            .sum::<f64>()
            / t.numel() as f64
    };
    let loss_d = mean_sp(real, -1.0) + mean_sp(fake, 1.0);
    let loss_g = mean_sp(fake, -1.0);
    Ok((loss_d, loss_g))
}

/// Mean absolute difference.
pub fn l1_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    pred.expect_same_shape(target)?;
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| (a - b).abs().as_f64())
        .sum();
    Ok(s / pred.numel() as f64)
}

/// `l1(G(F(x)), x)` for `from = X`, `l1(F(G(y)), y)` for `from = Y`.
pub fn cycle_loss<T: Scalar>(pair: &GeneratorPair, store: &ParamStore<T>, x: &Tensor<T>, from: Domain) -> Result<f64> {
    let back = match from {
        Domain::X => pair.translate_yx(store, &pair.translate_xy(store, x)?)?,
        Domain::Y => pair.translate_xy(store, &pair.translate_yx(store, x)?)?,
    };
    l1_loss(&back, x)
}

/// Records `mean(softplus(-real)) + mean(softplus(fake))`.
pub fn record_critic_loss<T: Scalar>(tape: &mut Tape<T>, real_logits: Var, fake_logits: Var) -> Result<Var> {
    if tape.shape(real_logits)? != tape.shape(fake_logits)? {
        return Err(Error::invalid("real and fake logit grids differ in shape"));
    }
    let nr = tape.neg(real_logits)?;
    let a = tape.softplus(nr)?;
    let a = tape.mean(a)?;
    let b = tape.softplus(fake_logits)?;
    let b = tape.mean(b)?;
    tape.add(a, b)
}

/// Records the generator's adversarial term for `fake_logits`.
pub fn record_generator_adv<T: Scalar>(tape: &mut Tape<T>, fake_logits: Var, mode: GanMode) -> Result<Var> {
    match mode {
        GanMode::Nonsaturating => {
            let n = tape.neg(fake_logits)?;
            let s = tape.softplus(n)?;
            tape.mean(s)
        }
        GanMode::Minimax => {
            let s = tape.softplus(fake_logits)?;
            let m = tape.mean(s)?;
            tape.neg(m)
        }
    }
}

/// Records `mean |a - b|`.
pub fn record_l1<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let d = tape.abs(d)?;
    tape.mean(d)
}

/// Generator outputs recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorPass {
    pub x: Var,
    pub y: Var,
    /// `F(x)`.
    pub fake_y: Var,
    /// `G(y)`.
    pub fake_x: Var,
    /// `G(F(x))` and `F(G(y))`, unpaired regime only.
    pub cycles: Option<(Var, Var)>,
}

/// Records both translations (and both cycles when unpaired).
pub fn record_generators<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    model: &RevGan,
    batch: &SampleBatch<T>,
) -> Result<GeneratorPass> {
    check_regime(model.regime, batch)?;
    let x = tape.constant(batch.x.clone());
    let y = tape.constant(batch.y.clone());
    let pair = &model.pair;
    let fake_y = pair.translate(tape, store, x, Domain::X)?;
    let fake_x = pair.translate(tape, store, y, Domain::Y)?;
    let cycles = match model.regime {
        Regime::Paired => None,
        Regime::Unpaired => Some((
            pair.translate(tape, store, fake_y, Domain::Y)?,
            pair.translate(tape, store, fake_x, Domain::X)?,
        )),
    };
    Ok(GeneratorPass {
        x,
        y,
        fake_y,
        fake_x,
        cycles,
    })
}

fn check_regime<T: Scalar>(regime: Regime, batch: &SampleBatch<T>) -> Result<()> {
    if regime == Regime::Paired && !batch.paired {
        return Err(Error::invalid("paired objective needs a paired batch"));
    }
    Ok(())
}

fn critic_input(regime: Regime, condition: Var) -> Option<Var> {
    match regime {
        Regime::Paired => Some(condition),
        Regime::Unpaired => None,
    }
}

/// Generator-side loss terms recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorTerms {
    pub adv_xy: Var,
    pub adv_yx: Var,
    /// `l1_xy` (paired) or `cycle_x` (unpaired).
    pub rec_xy: Var,
    /// `l1_yx` (paired) or `cycle_y` (unpaired).
    pub rec_yx: Var,
    pub total: Var,
}

/// Records `lambda * (rec_xy + rec_yx) + adv_xy + adv_yx`.
pub fn record_generator_objective<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    model: &RevGan,
    pass: &GeneratorPass,
    lambda: f64,
    mode: GanMode,
) -> Result<GeneratorTerms> {
    let ly = model
        .d_y
        .logits(tape, store, pass.fake_y, critic_input(model.regime, pass.x))?;
    let adv_xy = record_generator_adv(tape, ly, mode)?;
    let lx = model
        .d_x
        .logits(tape, store, pass.fake_x, critic_input(model.regime, pass.y))?;
    let adv_yx = record_generator_adv(tape, lx, mode)?;
    let (rec_xy, rec_yx) = match pass.cycles {
        None => (
            record_l1(tape, pass.fake_y, pass.y)?,
            record_l1(tape, pass.fake_x, pass.x)?,
        ),
        Some((cx, cy)) => (record_l1(tape, cx, pass.x)?, record_l1(tape, cy, pass.y)?),
    };
    let rec = tape.add(rec_xy, rec_yx)?;
    let rec = tape.scale(rec, lambda)?;
    let adv = tape.add(adv_xy, adv_yx)?;
    let total = tape.add(rec, adv)?;
    Ok(GeneratorTerms {
        adv_xy,
        adv_yx,
        rec_xy,
        rec_yx,
        total,
    })
}

/// Records the loss of `critic` on `real` versus the (detached) `fake`.
pub fn record_critic_objective<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    critic: &PatchDiscriminator,
    regime: Regime,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    condition: &Tensor<T>,
) -> Result<Var> {
    let r = tape.constant(real.clone());
    let f = tape.constant(fake.clone());
    let c = tape.constant(condition.clone());
    let lr = critic.logits(tape, store, r, critic_input(regime, c))?;
    let lf = critic.logits(tape, store, f, critic_input(regime, c))?;
    record_critic_loss(tape, lr, lf)
}

/// Writes the generator terms of `terms` into `report`.
pub fn fill_generator_terms<T: Scalar>(
    report: &mut LossReport,
    tape: &Tape<T>,
    terms: &GeneratorTerms,
    regime: Regime,
    lambda: f64,
) -> Result<()> {
    let get = |v: Var| -> Result<f64> { Ok(tape.try_value(v)?.item().as_f64()) };
    report.adv_g_xy = get(terms.adv_xy)?;
    report.adv_g_yx = get(terms.adv_yx)?;
    match regime {
        Regime::Paired => {
            report.l1_xy = get(terms.rec_xy)?;
            report.l1_yx = get(terms.rec_yx)?;
        }
        Regime::Unpaired => {
            report.cycle_x = get(terms.rec_xy)?;
            report.cycle_y = get(terms.rec_yx)?;
        }
    }
    report.total_g = report.generator_total(regime, lambda);
    Ok(())
}

fn evaluate<T: Scalar>(
    store: &ParamStore<T>,
    model: &RevGan,
    batch: &SampleBatch<T>,
    lambda: f64,
    mode: GanMode,
) -> Result<LossReport> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::invalid(format!(
            "lambda must be finite and non-negative, got {lambda}"
        )));
    }
    let mut tape = Tape::no_grad();
    let pass = record_generators(&mut tape, store, model, batch)?;
    let terms = record_generator_objective(&mut tape, store, model, &pass, lambda, mode)?;
    let mut report = LossReport::default();
    fill_generator_terms(&mut report, &tape, &terms, model.regime, lambda)?;
    let fake_y = tape.value(pass.fake_y).clone();
    let fake_x = tape.value(pass.fake_x).clone();
    let dy = record_critic_objective(&mut tape, store, &model.d_y, model.regime, &batch.y, &fake_y, &batch.x)?;
    let dx = record_critic_objective(&mut tape, store, &model.d_x, model.regime, &batch.x, &fake_x, &batch.y)?;
    report.adv_d_y = tape.value(dy).item().as_f64();
    report.adv_d_x = tape.value(dx).item().as_f64();
    report.total_d_y = report.adv_d_y;
    report.total_d_x = report.adv_d_x;
    Ok(report)
}

/// Loss terms of the paired objective, without gradients.
pub fn paired_objective<T: Scalar>(
    store: &ParamStore<T>,
    model: &RevGan,
    batch: &SampleBatch<T>,
    lambda: f64,
    mode: GanMode,
) -> Result<LossReport> {
    if model.regime != Regime::Paired {
        return Err(Error::invalid(
            "paired objective needs a model built for the paired regime",
        ));
    }
    evaluate(store, model, batch, lambda, mode)
}

/// Loss terms of the unpaired objective, without gradients.
pub fn unpaired_objective<T: Scalar>(
    store: &ParamStore<T>,
    model: &RevGan,
    batch: &SampleBatch<T>,
    lambda: f64,
    mode: GanMode,
) -> Result<LossReport> {
    if model.regime != Regime::Unpaired {
        return Err(Error::invalid(
            "unpaired objective needs a model built for the unpaired regime",
        ));
    }
    evaluate(store, model, batch, lambda, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators::GeneratorConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_neg_log_sigmoid(z: f64) -> f64 {
        -(1.0 / (1.0 + (-z).exp())).ln()
    }

    #[test]
    fn zero_logits() {
        let z = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        let (d, g) = adversarial_losses(&z, &z).unwrap();
        assert!((d - 2.0 * 2f64.ln()).abs() < 1e-15);
        assert!((g - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn perfect_critic_has_vanishing_loss_and_large_logits_stay_finite() {
        let real = Tensor::<f64>::full(&[1, 1, 2, 2], 100.0);
        let fake = Tensor::<f64>::full(&[1, 1, 2, 2], -100.0);
        let (d, g) = adversarial_losses(&real, &fake).unwrap();
        assert!((0.0..1e-40).contains(&d));
        assert!((g - 100.0).abs() < 1e-12);
        let (d, g) = adversarial_losses(&fake, &real).unwrap();
        assert!(d.is_finite() && g.is_finite());
        let big = Tensor::<f32>::full(&[1, 1, 1, 1], 100.0);
        let (d, g) = adversarial_losses(&big.scale(-1.0), &big).unwrap();
        assert!(d.is_finite() && g.is_finite() && d > 0.0);
    }

    #[test]
    fn stable_form_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let real = Tensor::<f64>::uniform(&[2, 1, 3, 3], -8.0, 8.0, &mut rng);
        let fake = Tensor::<f64>::uniform(&[2, 1, 3, 3], -8.0, 8.0, &mut rng);
        let (d, g) = adversarial_losses(&real, &fake).unwrap();
        let n = 18.0;
        let nd = real.data().iter().map(|&v| naive_neg_log_sigmoid(v)).sum::<f64>() / n
            + fake.data().iter().map(|&v| naive_neg_log_sigmoid(-v)).sum::<f64>() / n;
        let ng = fake.data().iter().map(|&v| naive_neg_log_sigmoid(v)).sum::<f64>() / n;
        assert!((d - nd).abs() < 1e-10);
        assert!((g - ng).abs() < 1e-10);

        let mut tape = Tape::no_grad();
        let (r, f) = (tape.constant(real), tape.constant(fake));
        let td = record_critic_loss(&mut tape, r, f).unwrap();
        let tg = record_generator_adv(&mut tape, f, GanMode::Nonsaturating).unwrap();
        assert!((tape.value(td).item() - nd).abs() < 1e-10);
        assert!((tape.value(tg).item() - ng).abs() < 1e-10);
        assert!(adversarial_losses(&Tensor::<f64>::zeros(&[1, 1, 2, 2]), &Tensor::zeros(&[1, 1, 1, 1])).is_err());
    }

    #[test]
    fn l1_cases() {
        let p = Tensor::new(vec![2], vec![1.0f64, 1.0]).unwrap();
        let t = Tensor::new(vec![2], vec![0.0f64, 3.0]).unwrap();
        assert_eq!(l1_loss(&p, &t).unwrap(), 1.5);
        assert_eq!(l1_loss(&p, &p).unwrap(), 0.0);
        assert_eq!(l1_loss(&p.scale(-4.0), &t.scale(-4.0)).unwrap(), 6.0);
        assert!(l1_loss(&p, &Tensor::zeros(&[3])).is_err());
    }

    fn batch(paired: bool, seed: u64) -> SampleBatch<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SampleBatch {
            x: Tensor::uniform(&[1, 3, 16, 16], -1.0, 1.0, &mut rng),
            y: Tensor::uniform(&[1, 3, 16, 16], -1.0, 1.0, &mut rng),
            paired,
            labels: None,
        }
    }

    #[test]
    fn report_totals_are_weighted_sums() {
        let mut store = ParamStore::<f64>::new();
        let m = RevGan::build(&mut store, &GeneratorConfig::new(2, 1, 16), Regime::Paired, 2, 4).unwrap();
        let b = batch(true, 1);
        let r = paired_objective(&store, &m, &b, 100.0, GanMode::Nonsaturating).unwrap();
        let expected = r.adv_g_yx + r.adv_g_xy + 100.0 * r.l1_yx + 100.0 * r.l1_xy;
        assert!((r.total_g - expected).abs() < 1e-12);
        assert!(r.l1_xy > 0.0 && r.adv_d_x > 0.0 && r.cycle_x == 0.0);
        let r0 = paired_objective(&store, &m, &b, 0.0, GanMode::Nonsaturating).unwrap();
        assert!((r0.total_g - (r0.adv_g_xy + r0.adv_g_yx)).abs() < 1e-15);
        assert!(paired_objective(&store, &m, &batch(false, 1), 100.0, GanMode::Nonsaturating).is_err());
    }

    #[test]
    fn zero_init_cycle_is_encoder_decoder_reconstruction() {
        let mut store = ParamStore::<f64>::new();
        let m = RevGan::build(&mut store, &GeneratorConfig::new(2, 2, 16), Regime::Unpaired, 2, 4).unwrap();
        let b = batch(false, 2);
        let r = unpaired_objective(&store, &m, &b, 10.0, GanMode::Nonsaturating).unwrap();
        let p = &m.pair;
        let h = p.encode(&store, &b.x, Domain::X).unwrap();
        let fy = p.decode(&store, &h, Domain::Y).unwrap();
        let back = p
            .decode(&store, &p.encode(&store, &fy, Domain::Y).unwrap(), Domain::X)
            .unwrap();
        assert_eq!(r.cycle_x, l1_loss(&back, &b.x).unwrap());
        assert_eq!(r.cycle_x, cycle_loss(p, &store, &b.x, Domain::X).unwrap());
        let expected = r.adv_g_xy + r.adv_g_yx + 10.0 * (r.cycle_x + r.cycle_y);
        assert!((r.total_g - expected).abs() < 1e-12);
        assert!(r.all_finite());
    }
}
