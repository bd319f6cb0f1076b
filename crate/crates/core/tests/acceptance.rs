//! Acceptance suite. Runs without the libtest harness so that every
//! criterion prints exactly one PASS/FAIL line; exits nonzero if any fails.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use revcore::data::metrics::{mae, psnr, rmse, segmentation_scores, ssim};
use revcore::data::{make_toy_dataset, Pairing, ToyKind};
use revcore::generators::{build_generator_pair, Domain, GeneratorConfig};
use revcore::gradcheck::{gradcheck_suite, TOLERANCE};
use revcore::layers::{init_gaussian, INIT_STD};
use revcore::losses::{cycle_loss, l1_loss, record_generator_adv, record_l1};
use revcore::model::Regime;
use revcore::profile::{memprofile, DEFAULT_DEPTHS};
use revcore::{
    fit, gradient_discrepancy, sequence_forward, DType, DatasetSpec, Direction, ParamStore, Result, RetentionMode,
    RetentionPolicy, ReversibleSequence, Scalar, Tape, Tensor, TrainConfig, Trainer,
};

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Gaussian weights on every conv; `trailing` selects the generator's
/// two-conv subnet layout.
fn random_core<T: Scalar>(
    channels: usize,
    depth: usize,
    trailing: bool,
    std: f64,
    seed: u64,
) -> Result<(ParamStore<T>, ReversibleSequence)> {
    let mut store = ParamStore::new();
    let seq = ReversibleSequence::register(&mut store, "core", channels, depth, trailing, RetentionMode::Stored)?;
    init_gaussian(&mut store, &seq.param_ids(), seed, std);
    Ok((store, seq))
}

fn max_round_trip<T: Scalar>(trials: usize, seed: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for depth in [1, 2, 4, 8] {
        for t in 0..trials {
            let (store, seq) = random_core::<T>(32, depth, true, INIT_STD, seed ^ (depth * 1000 + t) as u64)?;
            let h = Tensor::<T>::uniform(&[2, 32, 8, 8], -1.0, 1.0, &mut rng);
            let y = sequence_forward(&seq, &store, &h, Direction::Xy)?;
            let back = sequence_forward(&seq, &store, &y, Direction::Yx)?;
            worst = worst.max(back.max_abs_diff(&h)?.as_f64());
        }
    }
    Ok(worst)
}

fn exact_inversion() -> Result<Verdict> {
    let e32 = max_round_trip::<f32>(100, 1)?;
    let e64 = max_round_trip::<f64>(100, 2)?;
    Ok(verdict(
        e32 < 1e-5 && e64 < 1e-11,
        format!("max |C^-1(C(h)) - h|: f32 {e32:.2e} (< 1e-5), f64 {e64:.2e} (< 1e-11)"),
    ))
}

fn worst_discrepancy<T: Scalar>() -> Result<f64> {
    let mut worst = 0.0f64;
    for seed in 0..3u64 {
        let (mut store, mut seq) = random_core::<T>(32, 4, false, 0.3, 50 + seed)?;
        let x = Tensor::<T>::uniform(&[2, 32, 8, 8], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        for dir in [Direction::Xy, Direction::Yx] {
            let (gi, gp) = gradient_discrepancy(&mut seq, &mut store, &x, dir)?;
            worst = worst.max(gi).max(gp);
        }
    }
    Ok(worst)
}

fn gradient_equivalence() -> Result<Verdict> {
    let e32 = worst_discrepancy::<f32>()?;
    let e64 = worst_discrepancy::<f64>()?;
    Ok(verdict(
        e32 < 1e-5 && e64 < 1e-10,
        format!("stored vs recompute, depth 4: f32 {e32:.2e} (< 1e-5), f64 {e64:.2e} (< 1e-10)"),
    ))
}

fn finite_differences() -> Result<Verdict> {
    let records = gradcheck_suite(None)?;
    let fd: Vec<_> = records
        .iter()
        .filter(|r| !r.name.starts_with("stored_vs_recompute"))
        .collect();
    let required = [
        "conv2d",
        "conv2d_transpose",
        "instance_norm",
        "relu",
        "leaky_relu",
        "tanh",
        "sigmoid",
        "softplus",
        "abs",
        "add",
        "sub",
        "mul",
        "scale",
        "channel_split_concat",
        "sum",
        "mean",
        "coupling_block",
        "generator_pair",
        "patch_discriminator",
    ];
    let missing: Vec<_> = required.iter().filter(|n| !fd.iter().any(|r| r.name == **n)).collect();
    let worst = fd
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("suite is nonempty");
    Ok(verdict(
        missing.is_empty() && worst.max_rel_error < TOLERANCE,
        format!(
            "{} checks, worst {} at {:.1e} (< 1e-6){}",
            fd.len(),
            worst.name,
            worst.max_rel_error,
            if missing.is_empty() {
                String::new()
            } else {
                format!(", missing {missing:?}")
            }
        ),
    ))
}

fn constant_memory() -> Result<Verdict> {
    let p = memprofile(&[8], &DEFAULT_DEPTHS, 32, 0)?;
    let s = &p.summaries[0];
    let rec: Vec<usize> = p
        .records
        .iter()
        .filter(|r| r.mode == RetentionMode::Recompute)
        .map(|r| r.retained_activation_bytes)
        .collect();
    let residual_free = match s.stored_affine {
        Some((a, b)) => p
            .records
            .iter()
            .filter(|r| r.mode == RetentionMode::Stored)
            .all(|r| r.retained_activation_bytes as i64 == a + b * r.depth as i64),
        None => false,
    };
    let passed = rec.len() == DEFAULT_DEPTHS.len() && s.recompute_constant && residual_free && s.parameters_increasing;
    Ok(verdict(
        passed,
        format!(
            "recompute bytes {:?}, stored = a + b*R with (a, b) = {:?}, parameters increasing: {}",
            rec, s.stored_affine, s.parameters_increasing
        ),
    ))
}

fn identity_at_zero_init() -> Result<Verdict> {
    let mut store = ParamStore::<f32>::new();
    let pair = build_generator_pair(&mut store, &GeneratorConfig::new(8, 4, 16), 3)?;
    let x = Tensor::<f32>::uniform(&[2, 3, 16, 16], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(4));
    let direct = pair.translate_xy(&store, &x)?;
    let h = pair.encode(&store, &x, Domain::X)?;
    let composed = pair.decode(&store, &h, Domain::Y)?;
    let core_xy = sequence_forward(&pair.core, &store, &h, Direction::Xy)?;
    let core_yx = sequence_forward(&pair.core, &store, &h, Direction::Yx)?;
    let (a, b, c) = (direct.bit_eq(&composed), core_xy.bit_eq(&h), core_yx.bit_eq(&h));
    Ok(verdict(
        a && b && c,
        format!("translate_xy == dec_y(enc_x): {a}, core identity xy: {b}, yx: {c}"),
    ))
}

fn weight_tying() -> Result<Verdict> {
    let cfg = TrainConfig {
        disc_width: 8,
        precision: DType::F64,
        dataset: DatasetSpec::Toy {
            kind: ToyKind::Invert,
            n: 4,
            size: 16,
            seed: 6,
            pairing: Pairing::Paired,
        },
        ..TrainConfig::default()
    };
    let ds = cfg.dataset.load()?;
    let mut t = Trainer::<f64>::new(cfg.clone(), ds)?;
    let pair = t.model.pair.clone();
    let held_out = make_toy_dataset(ToyKind::Invert, 1, 16, 99)?.b[0].to_tensor::<f64>();
    let before = pair.translate_yx(&t.store, &held_out)?;
    let untouched: Vec<_> = pair
        .enc_y
        .param_ids()
        .into_iter()
        .chain(pair.dec_x.param_ids())
        .collect();
    let snapshot: Vec<_> = untouched.iter().map(|&id| t.store.value(id).clone()).collect();

    let batch = t.batch_at(0)?;
    let mut tape = Tape::new(RetentionPolicy::ReversibleAware);
    tape.freeze(t.model.critic_ids());
    let x = tape.constant(batch.x.clone());
    let y = tape.constant(batch.y.clone());
    let fake_y = pair.translate(&mut tape, &t.store, x, Domain::X)?;
    let l1 = record_l1(&mut tape, fake_y, y)?;
    let l1 = tape.scale(l1, cfg.lambda)?;
    let logits = t.model.d_y.logits(&mut tape, &t.store, fake_y, Some(x))?;
    let adv = record_generator_adv(&mut tape, logits, cfg.gan_mode)?;
    let loss = tape.add(l1, adv)?;
    tape.backward(loss, &mut t.store)?;
    t.opt.g.step(&mut t.store, cfg.lr)?;

    let delta = pair.translate_yx(&t.store, &held_out)?.max_abs_diff(&before)?;
    let yx_only_unchanged = untouched
        .iter()
        .zip(&snapshot)
        .all(|(&id, v)| t.store.value(id).bit_eq(v));
    let ids = pair.param_ids();
    let core = pair.core.param_ids();
    let once = core.iter().all(|c| ids.iter().filter(|&&i| i == *c).count() == 1);
    let registered = t.store.ids_with_prefix("genpair.core.").len() == core.len();
    Ok(verdict(
        delta > 0.0 && once && registered && yx_only_unchanged,
        format!(
            "yx output delta {delta:.2e} after an xy-only step (enc_y/dec_x untouched: {yx_only_unchanged}), \
             {} core ids each registered once: {}",
            core.len(),
            once && registered
        ),
    ))
}

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const ITERS: usize = 500;

fn toy_config(regime: Regime, lambda: f64, seed: u64) -> TrainConfig {
    let pairing = match regime {
        Regime::Paired => Pairing::Paired,
        Regime::Unpaired => Pairing::Unpaired,
    };
    TrainConfig {
        regime,
        lambda,
        seed,
        dataset: DatasetSpec::Toy {
            kind: ToyKind::Invert,
            n: 64,
            size: 16,
            seed,
            pairing,
        },
        ..TrainConfig::default()
    }
}

/// Mean over the training set of `l1(F(x), y)` (paired) or `cycle_x`.
fn dataset_loss(t: &Trainer<f32>) -> Result<f64> {
    let ds = &t.dataset;
    let mut total = 0.0;
    for (a, b) in ds.a.iter().zip(&ds.b) {
        let x = a.to_tensor::<f32>();
        total += match t.model.regime {
            Regime::Paired => l1_loss(&t.model.pair.translate_xy(&t.store, &x)?, &b.to_tensor::<f32>())?,
            Regime::Unpaired => cycle_loss(&t.model.pair, &t.store, &x, Domain::X)?,
        };
    }
    Ok(total / ds.len() as f64)
}

struct ToyRun {
    ratio: f64,
    held_out_mae: f64,
    finite: bool,
}

fn toy_run(regime: Regime, lambda: f64, seed: u64) -> Result<ToyRun> {
    let cfg = toy_config(regime, lambda, seed);
    let ds = cfg.dataset.load()?;
    let mut t = Trainer::<f32>::new(cfg, ds)?;
    let start = dataset_loss(&t)?;
    let mut finite = true;
    for _ in 0..ITERS {
        finite &= t.step()?.all_finite();
    }
    let end = dataset_loss(&t)?;
    let test = make_toy_dataset(ToyKind::Invert, 16, 16, 10_000 + seed)?;
    let mut held_out_mae = 0.0;
    for (a, b) in test.a.iter().zip(&test.b) {
        let pred = t.model.pair.translate_xy(&t.store, &a.to_tensor::<f32>())?;
        held_out_mae += mae(&pred, &b.to_tensor::<f32>())? / test.len() as f64;
    }
    Ok(ToyRun {
        ratio: end / start,
        held_out_mae,
        finite,
    })
}

fn toy_paired() -> Result<Verdict> {
    let runs = SEEDS
        .iter()
        .map(|&s| toy_run(Regime::Paired, 100.0, s))
        .collect::<Result<Vec<_>>>()?;
    let ratios: Vec<f64> = runs.iter().map(|r| r.ratio).collect();
    let maes: Vec<f64> = runs.iter().map(|r| r.held_out_mae).collect();
    let worst_mae = maes.iter().cloned().fold(0.0, f64::max);
    let m = median(&ratios);
    Ok(verdict(
        m < 0.5 && worst_mae < 20.0,
        format!(
            "median l1_xy ratio {m:.3} (< 0.5) over {ratios:.3?}; held-out MAE {maes:.2?}, worst {worst_mae:.2} (< 20)"
        ),
    ))
}

fn toy_unpaired() -> Result<Verdict> {
    let runs = SEEDS
        .iter()
        .map(|&s| toy_run(Regime::Unpaired, 10.0, s))
        .collect::<Result<Vec<_>>>()?;
    let ratios: Vec<f64> = runs.iter().map(|r| r.ratio).collect();
    let finite = runs.iter().all(|r| r.finite);
    let m = median(&ratios);
    Ok(verdict(
        m < 0.7 && finite,
        format!("median cycle_x ratio {m:.3} (< 0.7) over {ratios:.3?}; losses finite: {finite}"),
    ))
}

/// Confusion counts by direct enumeration of every (truth, pred) class pair.
fn oracle_scores(pred: &[u8], truth: &[u8], k: usize) -> (f64, f64, f64) {
    let count = |t: Option<u8>, p: Option<u8>| {
        pred.iter()
            .zip(truth)
            .filter(|&(&pp, &tt)| t.is_none_or(|t| t == tt) && p.is_none_or(|p| p == pp))
            .count()
    };
    let correct: usize = (0..k as u8).map(|c| count(Some(c), Some(c))).sum();
    let (mut rs, mut rn, mut is, mut inn) = (0.0, 0usize, 0.0, 0usize);
    for c in 0..k as u8 {
        let tp = count(Some(c), Some(c));
        let (t, p) = (count(Some(c), None), count(None, Some(c)));
        if t > 0 {
            rs += tp as f64 / t as f64;
            rn += 1;
        }
        if t + p - tp > 0 {
            is += tp as f64 / (t + p - tp) as f64;
            inn += 1;
        }
    }
    (correct as f64 / pred.len() as f64, rs / rn as f64, is / inn as f64)
}

fn metrics_oracle() -> Result<Verdict> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut seg_ok = true;
    for _ in 0..200 {
        let k = rng.gen_range(2..=6usize);
        let truth: Vec<u8> = (0..64).map(|_| rng.gen_range(0..k as u8)).collect();
        let pred: Vec<u8> = (0..64).map(|_| rng.gen_range(0..k as u8)).collect();
        let s = segmentation_scores(&pred, &truth, k)?;
        seg_ok &= (s.per_pixel_acc, s.per_class_acc, s.class_iou) == oracle_scores(&pred, &truth, k);
    }

    let levels = |v: u8| revcore::data::normalize::<f64>(v);
    let img: Tensor<f64> = Tensor::from_fn(&[1, 3, 16, 16], |i| levels(((i * 37) % 200 + 20) as u8));
    let shifted: Tensor<f64> = Tensor::from_fn(&[1, 3, 16, 16], |i| levels(((i * 37) % 200 + 21) as u8));
    let s = ssim(&img, &img)?;
    let p = psnr(&img, &shifted)?;
    let offset_mae = mae(&img, &shifted)?;
    let offset_rmse = rmse(&img, &shifted, None)?;
    // Half the pixels off by 4 levels: mae 2, rmse sqrt(8).
    let half: Tensor<f64> = Tensor::from_fn(&[1, 3, 16, 16], |i| {
        levels(((i * 37) % 200 + 20 + if (i / 16) % 2 == 0 { 4 } else { 0 }) as u8)
    });
    let (hm, hr) = (mae(&img, &half)?, rmse(&img, &half, None)?);
    let closed = offset_mae == 1.0 && offset_rmse == 1.0 && hm == 2.0 && hr == 8f64.sqrt();
    Ok(verdict(
        seg_ok && s == 1.0 && (p - 48.13).abs() <= 0.01 && closed,
        format!(
            "segmentation == oracle on 200 grids: {seg_ok}; ssim(a,a) = {s}; psnr(+1 level) = {p:.4} dB; \
             mae/rmse closed forms exact: {closed}"
        ),
    ))
}

fn determinism_and_resume() -> Result<Verdict> {
    let dir = tempfile::tempdir().map_err(|e| revcore::Error::Internal(e.to_string()))?;
    let config = |name: &str| TrainConfig {
        width: 4,
        depth: 2,
        disc_width: 8,
        epochs: 2,
        epochs_decay: 1,
        seed: 11,
        dataset: DatasetSpec::Toy {
            kind: ToyKind::Invert,
            n: 8,
            size: 16,
            seed: 11,
            pairing: Pairing::Paired,
        },
        checkpoint_dir: Some(dir.path().join(name)),
        ..TrainConfig::default()
    };
    let read = |name: &str| std::fs::read(dir.path().join(name).join("final.rgck")).unwrap_or_default();
    fit(&config("a"), None, None)?;
    fit(&config("b"), None, None)?;
    // 12 of 24 iterations: the middle of epoch 1 (8 iterations per epoch).
    let half = fit(&config("c"), None, Some(12))?;
    let ckpt = half
        .last_checkpoint
        .clone()
        .ok_or_else(|| revcore::Error::Internal("no checkpoint".into()))?;
    let resumed = fit(&config("c"), Some(&ckpt), None)?;
    let (a, b, c) = (read("a"), read("b"), read("c"));
    let identical = !a.is_empty() && a == b;
    let resumes = !half.finished && resumed.finished && a == c;
    Ok(verdict(
        identical && resumes,
        format!("two runs bit-identical: {identical}; resume at iteration 12 of 24 bit-identical: {resumes}"),
    ))
}

fn main() {
    type Criterion = (&'static str, Duration, fn() -> Result<Verdict>);
    let criteria: [Criterion; 10] = [
        ("exact inversion", Duration::from_secs(30), exact_inversion),
        ("gradient equivalence", Duration::from_secs(60), gradient_equivalence),
        ("finite-difference suite", Duration::from_secs(300), finite_differences),
        ("O(1) activation memory", Duration::from_secs(120), constant_memory),
        ("identity at zero init", Duration::from_secs(60), identity_at_zero_init),
        ("weight tying", Duration::from_secs(60), weight_tying),
        ("toy paired training", Duration::from_secs(900), toy_paired),
        ("toy unpaired training", Duration::from_secs(1200), toy_unpaired),
        ("metrics oracle", Duration::from_secs(60), metrics_oracle),
        (
            "determinism and resume",
            Duration::from_secs(120),
            determinism_and_resume,
        ),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, limit, run)) in criteria.iter().enumerate() {
        if only.is_some_and(|o| o != i + 1) {
            continue;
        }
        let start = Instant::now();
        let v = run().unwrap_or_else(|e| verdict(false, format!("error: {e}")));
        let took = start.elapsed();
        let in_time = took <= *limit;
        let ok = v.passed && in_time;
        failed += usize::from(!ok);
        println!(
            "criterion {:>2} {:<24} {}  [{:.1}s / {}s] {}",
            i + 1,
            name,
            if ok { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            limit.as_secs(),
            v.detail
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
