//! The oracle: generator, attribute classifier and face detector behind one
//! call. Backed either by the in-process [`MixtureWorld`] or by an external
//! process speaking the line-delimited JSON protocol.

pub mod calibrate;
pub mod external;
pub mod world;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{GroupLabel, LatentSpaceSpec, LatentVector, OracleVerdict};

pub use calibrate::{calibrate_weights, measure_proportions, CalibrationOutcome};
pub use external::{ExternalOracle, HelloInfo};
pub use world::{paper_bias_targets, MixtureWorld, Preset, WorldParams};

/// Draws i.i.d. standard-normal coordinates.
pub fn sample_prior<R: Rng + ?Sized>(space: LatentSpaceSpec, rng: &mut R) -> LatentVector {
    let values = (0..space.dim())
        .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
        .collect();
    LatentVector::new(space, values).expect("prior draws are finite")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleKind {
    Simulated,
    External,
}

enum Backend {
    Simulated(Arc<MixtureWorld>),
    External(Mutex<Box<ExternalOracle>>),
}

/// Shared, thread-safe entry point to an oracle. Counts every evaluation
/// that reaches the backend.
pub struct OracleHandle {
    backend: Backend,
    oracle_id: String,
    space: LatentSpaceSpec,
    labels: Vec<GroupLabel>,
    embedding_dim: Option<usize>,
    calls: AtomicU64,
}

impl std::fmt::Debug for OracleHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OracleHandle")
            .field("kind", &self.kind())
            .field("oracle_id", &self.oracle_id)
            .field("calls", &self.calls())
            .finish()
    }
}

impl OracleHandle {
    pub fn simulated(world: Arc<MixtureWorld>) -> Self {
        let oracle_id = format!("sim-{}", &world.digest()[..16]);
        Self {
            oracle_id,
            space: world.space(),
            labels: world.groups().to_vec(),
            embedding_dim: Some(world.embedding_dim()),
            backend: Backend::Simulated(world),
            calls: AtomicU64::new(0),
        }
    }

    /// Requests on one external connection are serialized; open one handle
    /// per worker for parallel throughput.
    pub fn external(client: ExternalOracle) -> Self {
        let hello = client.hello().clone();
        Self {
            oracle_id: client.oracle_id(),
            space: client.space(),
            labels: hello.labels.clone(),
            embedding_dim: hello.embedding_dim,
            backend: Backend::External(Mutex::new(Box::new(client))),
            calls: AtomicU64::new(0),
        }
    }

    pub fn kind(&self) -> OracleKind {
        match self.backend {
            Backend::Simulated(_) => OracleKind::Simulated,
            Backend::External(_) => OracleKind::External,
        }
    }

    pub fn oracle_id(&self) -> &str {
        &self.oracle_id
    }

    pub fn space(&self) -> LatentSpaceSpec {
        self.space
    }

    pub fn labels(&self) -> &[GroupLabel] {
        &self.labels
    }

    pub fn embedding_dim(&self) -> Option<usize> {
        self.embedding_dim
    }

    pub fn world(&self) -> Option<&Arc<MixtureWorld>> {
        match &self.backend {
            Backend::Simulated(w) => Some(w),
            Backend::External(_) => None,
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn check_label(&self, label: &GroupLabel) -> Result<()> {
        if self.labels.contains(label) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "group {label} is not produced by oracle {}",
                self.oracle_id
            )))
        }
    }

    pub fn evaluate(&self, v: &LatentVector) -> Result<OracleVerdict> {
        if v.space() != self.space {
            return Err(Error::DimensionMismatch {
                expected: self.space.dim(),
                got: v.dim(),
            });
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        match &self.backend {
            Backend::Simulated(world) => Ok(world.verdict(v)),
            Backend::External(client) => client
                .lock()
                .unwrap_or_else(|p| p.into_inner())
                .evaluate(v),
        }
    }

    /// 1 iff a face is detected and labelled `target`.
    pub fn fitness(&self, v: &LatentVector, target: &GroupLabel) -> Result<bool> {
        Ok(self.evaluate(v)?.matches(target))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SpaceTag;
    use crate::rng;

    #[test]
    fn prior_is_deterministic_per_seed() {
        let space = LatentSpaceSpec::new(SpaceTag::Z, 4).unwrap();
        let a = sample_prior(space, &mut rng::stream(5, &[]));
        let b = sample_prior(space, &mut rng::stream(5, &[]));
        let c = sample_prior(space, &mut rng::stream(6, &[]));
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.dim(), 4);
    }

    #[test]
    fn prior_moments() {
        let space = LatentSpaceSpec::new(SpaceTag::Z, 512).unwrap();
        let mut r = rng::stream(11, &[]);
        let n = 10_000;
        let mut sum = vec![0.0f64; 512];
        let mut sq = vec![0.0f64; 512];
        for _ in 0..n {
            let v = sample_prior(space, &mut r);
            for (i, &x) in v.values().iter().enumerate() {
                sum[i] += x as f64;
                sq[i] += (x as f64) * (x as f64);
            }
        }
        for i in 0..512 {
            let mean = sum[i] / n as f64;
            let var = sq[i] / n as f64 - mean * mean;
            assert!(mean.abs() <= 0.05, "coordinate {i} mean {mean}");
            assert!((var - 1.0).abs() <= 0.1, "coordinate {i} var {var}");
        }
    }

    #[test]
    fn dimension_mismatch_is_not_counted() {
        let world = Preset::Desk.world().unwrap();
        let h = OracleHandle::simulated(world);
        let wrong = LatentVector::new(LatentSpaceSpec::new(SpaceTag::Z, 3).unwrap(), vec![0.0; 3])
            .unwrap();
        assert!(matches!(h.evaluate(&wrong), Err(Error::DimensionMismatch { .. })));
        assert_eq!(h.calls(), 0);
        let v = sample_prior(h.space(), &mut rng::stream(1, &[]));
        h.evaluate(&v).unwrap();
        h.evaluate(&v).unwrap();
        assert_eq!(h.calls(), 2);
    }

    #[test]
    fn fitness_agrees_with_evaluate() {
        let world = Preset::Desk.world().unwrap();
        let h = OracleHandle::simulated(world.clone());
        let mut r = rng::stream(3, &[]);
        for i in 0..1000 {
            let v = sample_prior(h.space(), &mut r);
            let t = &world.groups()[i % world.groups().len()];
            let verdict = h.evaluate(&v).unwrap();
            let expected = verdict.face_detected() && verdict.label() == Some(t);
            assert_eq!(h.fitness(&v, t).unwrap(), expected);
            assert_eq!(h.evaluate(&v).unwrap(), verdict);
        }
    }

    #[test]
    fn anchors_of_default_world() {
        let world = Preset::Desk.world().unwrap();
        let h = OracleHandle::simulated(world.clone());
        let caucasian = GroupLabel::new("Caucasian").unwrap();
        let k = world.group_index(&caucasian).unwrap();
        assert!(h.fitness(&world.anchor_latent(k), &caucasian).unwrap());
        for (j, other) in world.groups().iter().enumerate() {
            if j != k {
                assert!(!h.fitness(&world.anchor_latent(k), other).unwrap());
            }
        }
    }
}
