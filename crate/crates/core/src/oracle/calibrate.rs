//! Iterative proportional fitting of mixture weights to target group masses.
//!
//! One Monte-Carlo sample set is drawn from the prior up front; every round
//! re-labels that fixed set under the current weights, so rounds differ only
//! through the weights and the iteration is noise-free.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::world::{classify, MixtureWorld};
use crate::error::{Error, Result};

pub const MIN_SAMPLE_BUDGET: usize = 100_000;
pub const MAX_ROUNDS: usize = 50;
pub const DEFAULT_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOutcome {
    /// Normalized, in world group order.
    pub weights: Vec<f64>,
    pub targets: Vec<f64>,
    pub relative_errors: Vec<f64>,
    pub max_relative_error: f64,
    pub rounds: usize,
    pub sample_budget: usize,
    pub tolerance: f64,
}

/// Fits weights so the fraction of prior samples labelled `k` matches
/// `targets[k]` within relative `tolerance`. Targets are given in world
/// group order; any shortfall from 1 is the intended no-face mass.
pub fn calibrate_weights<R: Rng>(
    world: &MixtureWorld,
    targets: &[f64],
    sample_budget: usize,
    tolerance: f64,
    rng: &mut R,
) -> Result<CalibrationOutcome> {
    let k = world.groups().len();
    if targets.len() != k {
        return Err(Error::invalid(format!(
            "expected {k} target proportions, got {}",
            targets.len()
        )));
    }
    if targets.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        return Err(Error::invalid("target proportions must be positive"));
    }
    let sum: f64 = targets.iter().sum();
    if sum > 1.0 + 1e-9 {
        return Err(Error::invalid(format!("target proportions sum to {sum} > 1")));
    }
    if sample_budget < MIN_SAMPLE_BUDGET {
        return Err(Error::invalid(format!(
            "sample_budget must be at least {MIN_SAMPLE_BUDGET}"
        )));
    }
    if tolerance.is_nan() || tolerance <= 0.0 {
        return Err(Error::invalid("tolerance must be positive"));
    }

    let dim = world.space().dim();
    let mut comps = vec![0.0; sample_budget * k];
    let mut x = vec![0.0; dim];
    for chunk in comps.chunks_exact_mut(k) {
        x.iter_mut().for_each(|c| *c = (rng.sample::<f64, _>(StandardNormal) as f32) as f64);
        world.component_log_densities(&x, chunk);
    }

    let log_tau = world.log_detect_threshold();
    let mut weights = world.weights().to_vec();
    let mut errors = vec![f64::INFINITY; k];
    for round in 1..=MAX_ROUNDS {
        let mut counts = vec![0u64; k];
        let log_weights: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
        for chunk in comps.chunks_exact(k) {
            if let Some(label) = classify(chunk, &log_weights, log_tau) {
                counts[label] += 1;
            }
        }
        let n = sample_budget as f64;
        let estimates: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
        for i in 0..k {
            errors[i] = (estimates[i] - targets[i]).abs() / targets[i];
        }
        let max_err = errors.iter().cloned().fold(0.0, f64::max);
        if max_err <= tolerance {
            return Ok(CalibrationOutcome {
                weights,
                targets: targets.to_vec(),
                relative_errors: errors,
                max_relative_error: max_err,
                rounds: round,
                sample_budget,
                tolerance,
            });
        }
        for i in 0..k {
            let est = estimates[i].max(0.5 / n);
            weights[i] *= targets[i] / est;
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
    }
    Err(Error::CalibrationFailed {
        rounds: MAX_ROUNDS,
        errors,
    })
}

/// Fraction of `samples` fresh prior draws labelled as each group, plus the
/// no-face fraction.
pub fn measure_proportions<R: Rng>(
    world: &MixtureWorld,
    samples: usize,
    rng: &mut R,
) -> (Vec<f64>, f64) {
    let k = world.groups().len();
    let mut counts = vec![0u64; k];
    let mut none = 0u64;
    let space = world.space();
    for _ in 0..samples {
        let v = super::sample_prior(space, rng);
        match world.verdict(&v).label().and_then(|l| world.group_index(l)) {
            Some(i) => counts[i] += 1,
            None => none += 1,
        }
    }
    let n = samples as f64;
    (
        counts.iter().map(|&c| c as f64 / n).collect(),
        none as f64 / n,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GroupLabel, LatentSpaceSpec, SpaceTag};
    use crate::oracle::world::{default_log_threshold, paper_bias_targets, WorldParams};
    use crate::rng;

    fn symmetric_world() -> MixtureWorld {
        let space = LatentSpaceSpec::new(SpaceTag::Z, 8).unwrap();
        let mut a = vec![0.0; 8];
        a[0] = 3.0;
        let mut b = vec![0.0; 8];
        b[0] = -3.0;
        let mut proj = vec![vec![0.0; 8]; 2];
        proj[0][1] = 1.0;
        proj[1][2] = 1.0;
        MixtureWorld::from_parts(
            space,
            vec![GroupLabel::new("A").unwrap(), GroupLabel::new("B").unwrap()],
            vec![a, b],
            vec![1.0, 1.0],
            vec![0.8, 0.2],
            default_log_threshold(8, 3.0, 1.0, 4.0),
            proj,
        )
        .unwrap()
    }

    #[test]
    fn symmetric_targets_give_equal_weights() {
        let w = symmetric_world();
        let mut r = rng::stream(1, &[]);
        let out = calibrate_weights(&w, &[0.5, 0.5], MIN_SAMPLE_BUDGET, 0.02, &mut r).unwrap();
        // Label mass is insensitive to small weight changes here, so the
        // weights are only loosely pinned; the masses are what must match.
        assert!((out.weights[0] - 0.5).abs() <= 0.1, "{:?}", out.weights);
        let fitted = w.with_weights(out.weights.clone()).unwrap();
        let (props, _) = measure_proportions(&fitted, 200_000, &mut rng::stream(2, &[]));
        for p in props {
            assert!((p - 0.5).abs() <= 0.02, "{p}");
        }
    }

    #[test]
    fn preconditions() {
        let w = symmetric_world();
        let mut r = rng::stream(1, &[]);
        assert!(calibrate_weights(&w, &[0.6, 0.6], MIN_SAMPLE_BUDGET, 0.05, &mut r).is_err());
        assert!(calibrate_weights(&w, &[0.5, 0.5], 10, 0.05, &mut r).is_err());
        assert!(calibrate_weights(&w, &[0.5], MIN_SAMPLE_BUDGET, 0.05, &mut r).is_err());
        assert!(calibrate_weights(&w, &[0.5, 0.0], MIN_SAMPLE_BUDGET, 0.05, &mut r).is_err());
    }

    #[test]
    fn unreachable_no_face_mass_fails() {
        // Nearly all prior mass is detected, so a 50% no-face remainder
        // cannot be produced by weights alone.
        let w = symmetric_world();
        let mut r = rng::stream(1, &[]);
        let err = calibrate_weights(&w, &[0.25, 0.25], MIN_SAMPLE_BUDGET, 0.05, &mut r)
            .unwrap_err();
        match err {
            Error::CalibrationFailed { rounds, errors } => {
                assert_eq!(rounds, MAX_ROUNDS);
                assert_eq!(errors.len(), 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn six_group_fixed_point_reproduces_on_fresh_samples() {
        let space = LatentSpaceSpec::new(SpaceTag::Z, 32).unwrap();
        let (groups, targets): (Vec<_>, Vec<_>) = paper_bias_targets().into_iter().unzip();
        let tol = DEFAULT_TOLERANCE;
        let world = MixtureWorld::generate(space, groups, &WorldParams::default(), 77)
            .unwrap()
            .calibrated(&targets, 1_000_000, tol, 77)
            .unwrap();
        let mut fresh = rng::stream(0xfeed, &[]);
        let (measured, _) = measure_proportions(&world, 1_000_000, &mut fresh);
        for (m, t) in measured.iter().zip(&targets) {
            assert!((m - t).abs() / t <= 2.0 * tol, "measured {m}, target {t}");
        }
    }
}
