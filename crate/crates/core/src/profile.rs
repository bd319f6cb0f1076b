//! Activation-memory profiling of the generator against core depth.
//!
//! Memory is the exact byte count of activations the tape retains for the
//! backward pass, not process RSS.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{ParamStore, RetentionPolicy, Tape};
use crate::error::{Error, Result};
use crate::generators::{build_generator_pair, Domain, GeneratorConfig};
use crate::reversible::RetentionMode;
use crate::tensor::Tensor;

/// Default depth sweep.
pub const DEFAULT_DEPTHS: [usize; 5] = [6, 9, 12, 18, 30];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProfileRecord {
    pub width: usize,
    pub depth: usize,
    pub mode: RetentionMode,
    pub retained_activation_bytes: usize,
    pub parameter_bytes: usize,
    pub subnet_eval_count: usize,
    pub wall_time_ms: f64,
}

/// One f32 forward and backward pass of `translate_xy` on a `1 x 3 x size x
/// size` input under `mean(out^2)`.
pub fn profile_generator(
    width: usize,
    depth: usize,
    size: usize,
    mode: RetentionMode,
    seed: u64,
) -> Result<ProfileRecord> {
    let cfg = GeneratorConfig {
        zero_init: false,
        mode,
        ..GeneratorConfig::new(width, depth, size)
    };
    let mut store = ParamStore::<f32>::new();
    let pair = build_generator_pair(&mut store, &cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::<f32>::uniform(&[1, 3, size, size], -1.0, 1.0, &mut rng);
    pair.core.reset_counters();
    let start = Instant::now();
    let mut tape = Tape::new(RetentionPolicy::ReversibleAware);
    let xv = tape.constant(x);
    let out = pair.translate(&mut tape, &store, xv, Domain::X)?;
    let sq = tape.mul(out, out)?;
    let loss = tape.mean(sq)?;
    let retained = tape.retained_activation_bytes();
    tape.backward(loss, &mut store)?;
    let wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(ProfileRecord {
        width,
        depth,
        mode,
        retained_activation_bytes: retained,
        parameter_bytes: store.bytes(&pair.param_ids()),
        subnet_eval_count: pair.core.diagnostics().subnet_evals,
        wall_time_ms,
    })
}

/// Exact integer fit `y = a + b * x` through every point, if one exists.
pub fn fit_affine(points: &[(usize, usize)]) -> Option<(i64, i64)> {
    let (&(x0, y0), rest) = points.split_first()?;
    let &(x1, y1) = rest.iter().find(|p| p.0 != x0)?;
    let (dx, dy) = (x1 as i64 - x0 as i64, y1 as i64 - y0 as i64);
    if dy % dx != 0 {
        return None;
    }
    let b = dy / dx;
    let a = y0 as i64 - b * x0 as i64;
    points
        .iter()
        .all(|&(x, y)| a + b * x as i64 == y as i64)
        .then_some((a, b))
}

/// Invariant checks for one width of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepSummary {
    pub width: usize,
    /// Recompute-mode retained bytes are identical at every depth.
    pub recompute_constant: bool,
    /// Exact `(a, b)` with stored retained bytes `= a + b * depth`.
    pub stored_affine: Option<(i64, i64)>,
    pub stored_increasing: bool,
    pub parameters_increasing: bool,
    /// Smallest depth at which stored-mode activation bytes exceed the
    /// recompute-mode activation plus parameter bytes.
    pub crossover_depth: Option<usize>,
}

impl SweepSummary {
    pub fn holds(&self) -> bool {
        self.recompute_constant && self.stored_affine.is_some() && self.stored_increasing && self.parameters_increasing
    }
}

fn strictly_increasing(v: &[usize]) -> bool {
    v.windows(2).all(|w| w[1] > w[0])
}

fn summarize(width: usize, stored: &[&ProfileRecord], recompute: &[&ProfileRecord]) -> SweepSummary {
    let pts = |rs: &[&ProfileRecord], f: fn(&ProfileRecord) -> usize| -> Vec<(usize, usize)> {
        rs.iter().map(|r| (r.depth, f(r))).collect()
    };
    let s_act = pts(stored, |r| r.retained_activation_bytes);
    let r_act = pts(recompute, |r| r.retained_activation_bytes);
    let params = pts(recompute, |r| r.parameter_bytes);
    let stored_affine = fit_affine(&s_act);
    let recompute_constant = r_act.windows(2).all(|w| w[0].1 == w[1].1);
    let crossover_depth = match (stored_affine, fit_affine(&params), r_act.first()) {
        (Some((a_s, b_s)), Some((a_p, b_p)), Some(&(_, c))) if recompute_constant => {
            let base = c as i64 + a_p;
            if a_s > base {
                Some(0)
            } else if b_s > b_p {
                Some(((base - a_s) / (b_s - b_p) + 1) as usize)
            } else {
                None
            }
        }
        _ => None,
    };
    SweepSummary {
        width,
        recompute_constant,
        stored_affine,
        stored_increasing: strictly_increasing(&s_act.iter().map(|p| p.1).collect::<Vec<_>>()),
        parameters_increasing: strictly_increasing(&params.iter().map(|p| p.1).collect::<Vec<_>>())
            && strictly_increasing(
                &pts(stored, |r| r.parameter_bytes)
                    .iter()
                    .map(|p| p.1)
                    .collect::<Vec<_>>(),
            ),
        crossover_depth,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MemProfile {
    pub records: Vec<ProfileRecord>,
    pub summaries: Vec<SweepSummary>,
}

/// Profiles every `(width, depth, mode)` combination; depths are visited in
/// ascending order. Depth 0 is rejected: without a core there is no separate
/// core output tensor, so it falls off the affine line of `depth >= 1`.
pub fn memprofile(widths: &[usize], depths: &[usize], size: usize, seed: u64) -> Result<MemProfile> {
    if widths.is_empty() || depths.is_empty() {
        return Err(Error::invalid("memprofile needs at least one width and one depth"));
    }
    if depths.contains(&0) {
        return Err(Error::invalid("memprofile depths must be at least 1"));
    }
    let mut depths = depths.to_vec();
    depths.sort_unstable();
    depths.dedup();
    let mut records = Vec::new();
    let mut summaries = Vec::new();
    for &w in widths {
        let start = records.len();
        for mode in [RetentionMode::Stored, RetentionMode::Recompute] {
            for &d in &depths {
                records.push(profile_generator(w, d, size, mode, seed)?);
            }
        }
        let rows = &records[start..];
        let stored: Vec<_> = rows.iter().filter(|r| r.mode == RetentionMode::Stored).collect();
        let recompute: Vec<_> = rows.iter().filter(|r| r.mode == RetentionMode::Recompute).collect();
        summaries.push(summarize(w, &stored, &recompute));
    }
    Ok(MemProfile { records, summaries })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_fit_is_exact_or_absent() {
        assert_eq!(fit_affine(&[(1, 7), (3, 13), (4, 16)]), Some((4, 3)));
        assert_eq!(fit_affine(&[(1, 7), (3, 13), (4, 17)]), None);
        assert_eq!(fit_affine(&[(1, 7), (2, 8), (3, 10)]), None);
        assert_eq!(fit_affine(&[(5, 5)]), None);
    }

    #[test]
    fn small_sweep_has_constant_recompute_and_affine_stored_memory() {
        let p = memprofile(&[2], &[1, 3, 2], 16, 0).unwrap();
        assert_eq!(p.records.len(), 6);
        let s = &p.summaries[0];
        assert!(s.holds(), "{s:?}");
        let (_, b) = s.stored_affine.unwrap();
        // Six half-planes plus two per-channel inverse std vectors per block,
        // core of 8 channels at 4x4, f32.
        assert_eq!(b, (6 * 4 * 16 * 4 + 2 * 4 * 4) as i64);
        assert!(s.crossover_depth.is_some());
        let evals: Vec<_> = p
            .records
            .iter()
            .map(|r| (r.mode, r.depth, r.subnet_eval_count))
            .collect();
        assert!(evals.contains(&(RetentionMode::Recompute, 3, 12)));
        assert!(evals.contains(&(RetentionMode::Stored, 3, 6)));
        assert!(memprofile(&[2], &[0, 1], 16, 0).is_err());
        assert!(memprofile(&[], &[1], 16, 0).is_err());
    }
}
