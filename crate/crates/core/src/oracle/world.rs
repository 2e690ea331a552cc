//! Simulated biased latent world.
//!
//! An isotropic Gaussian mixture over latent space stands in for generator +
//! classifier + detector: a latent "shows a face" when the mixture density
//! clears a threshold, its group is the component with the largest weighted
//! density, and its identity embedding is a fixed orthonormal projection of
//! the offset from that component's anchor.

use std::sync::{Arc, OnceLock};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::calibrate::{calibrate_weights, CalibrationOutcome, DEFAULT_TOLERANCE};
use crate::error::{Error, Result};
use crate::model::{GroupLabel, LatentSpaceSpec, LatentVector, OracleVerdict, SpaceTag};
use crate::rng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Shape parameters for a freshly generated world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldParams {
    pub anchor_radius: f64,
    pub min_separation: f64,
    pub spread: f64,
    pub embedding_dim: usize,
    /// Squared-Mahalanobis headroom of the detection boundary, in standard
    /// deviations of a prior draw's squared distance to an anchor.
    pub detect_sigmas: f64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            anchor_radius: 3.0,
            min_separation: 3.0,
            spread: 1.0,
            embedding_dim: 16,
            detect_sigmas: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawWorld", into = "RawWorld")]
pub struct MixtureWorld {
    space: LatentSpaceSpec,
    groups: Vec<GroupLabel>,
    anchors: Vec<Vec<f64>>,
    spreads: Vec<f64>,
    weights: Vec<f64>,
    log_detect_threshold: f64,
    embedding_dim: usize,
    projection: Vec<Vec<f64>>,
    calibration: Option<CalibrationOutcome>,
}

/// On-disk world description; also read by external bridge implementations.
#[derive(Serialize, Deserialize)]
struct RawWorld {
    space: LatentSpaceSpec,
    groups: Vec<GroupLabel>,
    anchors: Vec<Vec<f64>>,
    spreads: Vec<f64>,
    weights: Vec<f64>,
    log_detect_threshold: f64,
    embedding_dim: usize,
    projection: Vec<Vec<f64>>,
    #[serde(default)]
    calibration: Option<CalibrationOutcome>,
}

impl TryFrom<RawWorld> for MixtureWorld {
    type Error = Error;
    fn try_from(r: RawWorld) -> Result<Self> {
        let mut w = MixtureWorld::from_parts(
            r.space,
            r.groups,
            r.anchors,
            r.spreads,
            r.weights,
            r.log_detect_threshold,
            r.projection,
        )?;
        if w.embedding_dim != r.embedding_dim {
            return Err(Error::invalid("embedding_dim disagrees with projection"));
        }
        w.calibration = r.calibration;
        Ok(w)
    }
}

impl From<MixtureWorld> for RawWorld {
    fn from(w: MixtureWorld) -> Self {
        RawWorld {
            space: w.space,
            groups: w.groups,
            anchors: w.anchors,
            spreads: w.spreads,
            weights: w.weights,
            log_detect_threshold: w.log_detect_threshold,
            embedding_dim: w.embedding_dim,
            projection: w.projection,
            calibration: w.calibration,
        }
    }
}

/// Log of the isotropic normal density at squared distance `sq` from its mean.
pub(crate) fn log_normal(sq: f64, dim: usize, spread: f64) -> f64 {
    -0.5 * dim as f64 * (LN_2PI + 2.0 * spread.ln()) - sq / (2.0 * spread * spread)
}

/// Log density at the detection boundary: a component's density at the
/// squared Mahalanobis radius sitting `sigmas` standard deviations beyond
/// the mean squared distance between a standard-normal prior draw and an
/// anchor of norm `anchor_radius`.
pub fn default_log_threshold(dim: usize, anchor_radius: f64, spread: f64, sigmas: f64) -> f64 {
    let d = dim as f64;
    let r2 = anchor_radius * anchor_radius;
    let s2 = spread * spread;
    let mean = (d + r2) / s2;
    let sd = (2.0 * (d + 2.0 * r2)).sqrt() / s2;
    let radius_sq = mean + sigmas * sd;
    log_normal(radius_sq * s2, dim, spread)
}

impl MixtureWorld {
    pub fn from_parts(
        space: LatentSpaceSpec,
        groups: Vec<GroupLabel>,
        anchors: Vec<Vec<f64>>,
        spreads: Vec<f64>,
        weights: Vec<f64>,
        log_detect_threshold: f64,
        projection: Vec<Vec<f64>>,
    ) -> Result<Self> {
        crate::model::validate_label_set(&groups)?;
        let k = groups.len();
        if k < 2 {
            return Err(Error::invalid("a mixture world needs at least two groups"));
        }
        if anchors.len() != k || spreads.len() != k || weights.len() != k {
            return Err(Error::invalid("anchors, spreads and weights must match groups"));
        }
        if anchors.iter().any(|a| a.len() != space.dim()) {
            return Err(Error::invalid("anchor dimension differs from latent dim"));
        }
        if spreads.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::invalid("spreads must be positive"));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::invalid("weights must be positive"));
        }
        if log_detect_threshold.is_nan() {
            return Err(Error::invalid("detection threshold is NaN"));
        }
        let embedding_dim = projection.len();
        if embedding_dim == 0 || projection.iter().any(|r| r.len() != space.dim()) {
            return Err(Error::invalid("projection must be embedding_dim x latent dim"));
        }
        check_orthonormal(&projection, 1e-6)?;
        let total: f64 = weights.iter().sum();
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(Self {
            space,
            groups,
            anchors,
            spreads,
            weights,
            log_detect_threshold,
            embedding_dim,
            projection,
            calibration: None,
        })
    }

    /// Places anchors at random on a sphere with enforced pairwise
    /// separation, draws an orthonormal projection, and sets uniform weights.
    pub fn generate(
        space: LatentSpaceSpec,
        groups: Vec<GroupLabel>,
        params: &WorldParams,
        seed: u64,
    ) -> Result<Self> {
        let dim = space.dim();
        if params.embedding_dim == 0 || params.embedding_dim > dim {
            return Err(Error::invalid("embedding_dim must be in 1..=latent dim"));
        }
        let mut rng = rng::stream(seed, &[rng::TAG_WORLD]);
        let mut anchors: Vec<Vec<f64>> = Vec::with_capacity(groups.len());
        for _ in 0..groups.len() {
            let mut tries = 0;
            loop {
                tries += 1;
                if tries > 10_000 {
                    return Err(Error::invalid(
                        "could not place anchors with the requested separation",
                    ));
                }
                let candidate = random_on_sphere(dim, params.anchor_radius, &mut rng);
                let far_enough = anchors
                    .iter()
                    .all(|a| euclidean(a, &candidate) >= params.min_separation);
                if far_enough {
                    anchors.push(candidate);
                    break;
                }
            }
        }
        let projection = random_orthonormal_rows(params.embedding_dim, dim, &mut rng);
        let k = groups.len();
        Self::from_parts(
            space,
            groups,
            anchors,
            vec![params.spread; k],
            vec![1.0; k],
            default_log_threshold(dim, params.anchor_radius, params.spread, params.detect_sigmas),
            projection,
        )
    }

    pub fn space(&self) -> LatentSpaceSpec {
        self.space
    }

    pub fn groups(&self) -> &[GroupLabel] {
        &self.groups
    }

    pub fn anchors(&self) -> &[Vec<f64>] {
        &self.anchors
    }

    pub fn spreads(&self) -> &[f64] {
        &self.spreads
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn log_detect_threshold(&self) -> f64 {
        self.log_detect_threshold
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn projection(&self) -> &[Vec<f64>] {
        &self.projection
    }

    pub fn calibration(&self) -> Option<&CalibrationOutcome> {
        self.calibration.as_ref()
    }

    pub fn group_index(&self, label: &GroupLabel) -> Option<usize> {
        self.groups.iter().position(|g| g == label)
    }

    pub fn anchor_latent(&self, k: usize) -> LatentVector {
        LatentVector::from_f64(self.space, &self.anchors[k]).expect("anchor has world dim")
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.groups.len() || weights.iter().any(|w| !w.is_finite() || *w <= 0.0) {
            return Err(Error::invalid("weights must be positive, one per group"));
        }
        let total: f64 = weights.iter().sum();
        self.weights = weights.into_iter().map(|w| w / total).collect();
        Ok(self)
    }

    pub fn with_log_detect_threshold(mut self, log_tau: f64) -> Self {
        self.log_detect_threshold = log_tau;
        self
    }

    /// Calibrates the weights so that prior mass per group matches `targets`,
    /// which must be given in the world's group order.
    pub fn calibrated(
        self,
        targets: &[f64],
        sample_budget: usize,
        tolerance: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = rng::stream(seed, &[rng::TAG_CALIBRATION]);
        let outcome = calibrate_weights(&self, targets, sample_budget, tolerance, &mut rng)?;
        let mut world = self.with_weights(outcome.weights.clone())?;
        world.calibration = Some(outcome);
        Ok(world)
    }

    /// Unweighted per-component log densities at `x`.
    pub(crate) fn component_log_densities(&self, x: &[f64], out: &mut [f64]) {
        for (k, slot) in out.iter_mut().enumerate() {
            let sq = euclidean_sq(x, &self.anchors[k]);
            *slot = log_normal(sq, self.space.dim(), self.spreads[k]);
        }
    }

    /// Detection and label from unweighted component log densities.
    pub(crate) fn classify_components(&self, comps: &[f64]) -> Option<usize> {
        let log_weights: Vec<f64> = self.weights.iter().map(|w| w.ln()).collect();
        classify(comps, &log_weights, self.log_detect_threshold)
    }

    /// Log of the mixture density.
    pub fn log_density(&self, v: &LatentVector) -> f64 {
        let x = v.to_f64();
        let mut comps = vec![0.0; self.groups.len()];
        self.component_log_densities(&x, &mut comps);
        log_sum_exp(comps.iter().zip(&self.weights).map(|(c, w)| c + w.ln()))
    }

    /// Pure verdict for `v`; dimension checks are the caller's job.
    pub fn verdict(&self, v: &LatentVector) -> OracleVerdict {
        let x = v.to_f64();
        let mut comps = vec![0.0; self.groups.len()];
        self.component_log_densities(&x, &mut comps);
        match self.classify_components(&comps) {
            None => OracleVerdict::no_face(),
            Some(k) => {
                let embedding = self.embed(&x, k);
                OracleVerdict::new(true, Some(self.groups[k].clone()), Some(embedding))
                    .expect("simulated verdicts satisfy their invariants")
            }
        }
    }

    fn embed(&self, x: &[f64], k: usize) -> Vec<f64> {
        let offset: Vec<f64> = x.iter().zip(&self.anchors[k]).map(|(a, b)| a - b).collect();
        let mut e: Vec<f64> = self
            .projection
            .iter()
            .map(|row| row.iter().zip(&offset).map(|(r, o)| r * o).sum())
            .collect();
        let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 && norm.is_finite() {
            e.iter_mut().for_each(|x| *x /= norm);
        } else {
            // Degenerate only exactly at the anchor's projected position.
            e.iter_mut().for_each(|x| *x = 0.0);
            e[0] = 1.0;
        }
        e
    }

    /// Stable content hash, used to derive the oracle id.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("world serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("world serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::parse(e.line(), e.column(), e.to_string()))
    }
}

/// Label with the largest weighted density, if the mixture density clears
/// `log_tau`. `log_weights` are natural logs of the mixture weights.
pub(crate) fn classify(comps: &[f64], log_weights: &[f64], log_tau: f64) -> Option<usize> {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (k, (c, lw)) in comps.iter().zip(log_weights).enumerate() {
        let s = c + lw;
        if s > best_score {
            best_score = s;
            best = k;
        }
    }
    if best_score >= log_tau {
        // The log-sum-exp is never below its largest term.
        return Some(best);
    }
    let lse = log_sum_exp(comps.iter().zip(log_weights).map(|(c, lw)| c + lw));
    (lse >= log_tau).then_some(best)
}

pub(crate) fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn euclidean_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    euclidean_sq(a, b).sqrt()
}

fn random_on_sphere<R: Rng>(dim: usize, radius: f64, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x * radius / n).collect();
        }
    }
}

/// Gaussian rows orthonormalized by modified Gram-Schmidt.
fn random_orthonormal_rows<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(rows);
    while out.len() < rows {
        let mut v: Vec<f64> = (0..cols).map(|_| rng.sample(StandardNormal)).collect();
        // Two passes keep the rows orthogonal to machine precision.
        for _ in 0..2 {
            for q in &out {
                let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            out.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    out
}

fn check_orthonormal(rows: &[Vec<f64>], tol: f64) -> Result<()> {
    for (i, a) in rows.iter().enumerate() {
        for (j, b) in rows.iter().enumerate().skip(i) {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            if (dot - want).abs() > tol {
                return Err(Error::invalid(format!(
                    "projection rows {i},{j} not orthonormal (dot {dot})"
                )));
            }
        }
    }
    Ok(())
}

/// Group proportions measured on 10,000 StyleGAN2 samples: 26 Indian,
/// 171 African, 6,500 Caucasian. The leftover mass goes to Asian, Middle
/// Eastern and Latino Hispanic in inverse proportion to their rejection
/// sampling times (118.96, 170.63 and 124.31 minutes per 1000 samples).
pub fn paper_bias_targets() -> Vec<(GroupLabel, f64)> {
    let caucasian = 0.65;
    let african = 0.0171;
    let indian = 0.0026;
    let leftover = 1.0 - caucasian - african - indian;
    let inv = [1.0 / 118.96, 1.0 / 170.63, 1.0 / 124.31];
    let total: f64 = inv.iter().sum();
    let label = |s: &str| GroupLabel::new(s).expect("static label");
    vec![
        (label("Caucasian"), caucasian),
        (label("African"), african),
        (label("Indian"), indian),
        (label("Asian"), leftover * inv[0] / total),
        (label("MiddleEastern"), leftover * inv[1] / total),
        (label("LatinoHispanic"), leftover * inv[2] / total),
    ]
}

/// Monte-Carlo samples drawn when calibrating a preset world.
pub const PRESET_CALIBRATION_SAMPLES: usize = 1_000_000;
pub const PRESET_SEED: u64 = 0x5eed_1a7e_47f0_0001;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// 32-dimensional world, fast enough for unit tests.
    Desk,
    /// 512-dimensional world matching the Z space size.
    PaperScale,
}

impl Preset {
    pub fn dim(self) -> usize {
        match self {
            Preset::Desk => 32,
            Preset::PaperScale => 512,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::PaperScale => "paper",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "desk" => Some(Preset::Desk),
            "paper" => Some(Preset::PaperScale),
            _ => None,
        }
    }

    /// Builds and calibrates the preset. Deterministic; prefer [`Preset::world`]
    /// which caches the result per process.
    pub fn build(self) -> Result<MixtureWorld> {
        let space = LatentSpaceSpec::new(SpaceTag::Z, self.dim())?;
        let (groups, targets): (Vec<_>, Vec<_>) = paper_bias_targets().into_iter().unzip();
        MixtureWorld::generate(space, groups, &WorldParams::default(), PRESET_SEED)?.calibrated(
            &targets,
            PRESET_CALIBRATION_SAMPLES,
            DEFAULT_TOLERANCE,
            PRESET_SEED,
        )
    }

    pub fn world(self) -> Result<Arc<MixtureWorld>> {
        static DESK: OnceLock<std::result::Result<Arc<MixtureWorld>, String>> = OnceLock::new();
        static PAPER: OnceLock<std::result::Result<Arc<MixtureWorld>, String>> = OnceLock::new();
        let cell = match self {
            Preset::Desk => &DESK,
            Preset::PaperScale => &PAPER,
        };
        cell.get_or_init(|| self.build().map(Arc::new).map_err(|e| e.to_string()))
            .clone()
            .map_err(Error::InvalidInput)
    }
}
