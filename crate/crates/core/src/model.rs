//! Domain types shared by every stage of a campaign.
//!
//! These are plain value objects: constructors enforce invariants, nothing
//! here talks to an oracle. Latent coordinates are stored as `f32`, the same
//! precision as the bulk sidecar file, so a manifest written with nine
//! significant digits decodes to exactly the vectors the search produced.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SpaceTag {
    Z,
    W,
}

impl SpaceTag {
    /// 512 for Z, 18×512 flattened for W.
    pub fn default_dim(self) -> usize {
        match self {
            SpaceTag::Z => 512,
            SpaceTag::W => 18 * 512,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SpaceTag::Z => "Z",
            SpaceTag::W => "W",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "Z" | "z" => Ok(SpaceTag::Z),
            "W" | "w" => Ok(SpaceTag::W),
            other => Err(Error::invalid(format!("unknown latent space {other:?}"))),
        }
    }
}

impl fmt::Display for SpaceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawSpace", into = "RawSpace")]
pub struct LatentSpaceSpec {
    tag: SpaceTag,
    dim: usize,
}

#[derive(Serialize, Deserialize)]
struct RawSpace {
    tag: SpaceTag,
    dim: usize,
}

impl TryFrom<RawSpace> for LatentSpaceSpec {
    type Error = Error;
    fn try_from(raw: RawSpace) -> Result<Self> {
        LatentSpaceSpec::new(raw.tag, raw.dim)
    }
}

impl From<LatentSpaceSpec> for RawSpace {
    fn from(s: LatentSpaceSpec) -> Self {
        RawSpace {
            tag: s.tag,
            dim: s.dim,
        }
    }
}

impl LatentSpaceSpec {
    pub fn new(tag: SpaceTag, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("latent dimension must be positive"));
        }
        Ok(Self { tag, dim })
    }

    pub fn standard(tag: SpaceTag) -> Self {
        Self {
            tag,
            dim: tag.default_dim(),
        }
    }

    pub fn tag(&self) -> SpaceTag {
        self.tag
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// A point in the generator's latent space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentVector {
    space: LatentSpaceSpec,
    values: Vec<f32>,
}

impl LatentVector {
    pub fn new(space: LatentSpaceSpec, values: Vec<f32>) -> Result<Self> {
        if values.len() != space.dim() {
            return Err(Error::DimensionMismatch {
                expected: space.dim(),
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|x| !x.is_finite()) {
            return Err(Error::invalid(format!("latent coordinate {i} is not finite")));
        }
        Ok(Self { space, values })
    }

    /// Rounds `values` to `f32`.
    pub fn from_f64(space: LatentSpaceSpec, values: &[f64]) -> Result<Self> {
        Self::new(space, values.iter().map(|&x| x as f32).collect())
    }

    pub fn space(&self) -> LatentSpaceSpec {
        self.space
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&x| x as f64).collect()
    }

    /// Euclidean distance, accumulated in `f64`.
    pub fn distance(&self, other: &LatentVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn linf_distance(&self, other: &LatentVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .fold(0.0, f64::max)
    }
}

/// Name of a demographic group. Identifiers only (`[A-Za-z0-9_-]+`) so they
/// can travel unescaped through every text format.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct GroupLabel(String);

impl GroupLabel {
    pub fn new(name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        let ok = !name.is_empty()
            && name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
        if !ok {
            return Err(Error::invalid(format!("invalid group label {name:?}")));
        }
        Ok(Self(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// The six groups the ethnicity classifier distinguishes.
    pub fn default_set() -> Vec<GroupLabel> {
        [
            "Caucasian",
            "African",
            "Indian",
            "Asian",
            "MiddleEastern",
            "LatinoHispanic",
        ]
        .into_iter()
        .map(|s| GroupLabel(s.to_string()))
        .collect()
    }
}

impl TryFrom<String> for GroupLabel {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        GroupLabel::new(s)
    }
}

impl From<GroupLabel> for String {
    fn from(g: GroupLabel) -> Self {
        g.0
    }
}

impl fmt::Display for GroupLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Checks a configured label set: nonempty, no duplicates.
pub fn validate_label_set(labels: &[GroupLabel]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::invalid("label set is empty"));
    }
    let mut seen = std::collections::HashSet::new();
    for l in labels {
        if !seen.insert(l) {
            return Err(Error::invalid(format!("duplicate group label {l}")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DistanceMetric {
    #[default]
    Euclidean,
}

/// Hard ceiling on accepted identities per seed chain. Past this many
/// acceptances a chain only yields near-duplicates of the same identity.
pub const MAX_ITER_CEILING: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Mutations generated per accepted vector.
    pub n: usize,
    /// Half-width of the per-coordinate uniform mutation.
    pub delta: f64,
    /// Accepted identities per seed chain.
    pub max_iter: usize,
    pub quota_per_group: usize,
    /// Oracle calls each group may spend, seed discovery included.
    pub oracle_call_budget: u64,
    pub rng_seed: u64,
    pub distance: DistanceMetric,
    /// Dequeues allowed per chain, as a multiple of `max_iter`.
    pub dequeue_cap_factor: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            n: 4,
            delta: 0.25,
            max_iter: MAX_ITER_CEILING,
            quota_per_group: 50,
            oracle_call_budget: 1_000_000,
            rng_seed: 0,
            distance: DistanceMetric::Euclidean,
            dequeue_cap_factor: 100,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::invalid("n must be at least 1"));
        }
        if !(self.delta.is_finite() && self.delta > 0.0) {
            return Err(Error::invalid("delta must be positive and finite"));
        }
        if self.max_iter == 0 || self.max_iter > MAX_ITER_CEILING {
            return Err(Error::invalid(format!(
                "max_iter must be in 1..={MAX_ITER_CEILING}"
            )));
        }
        if self.quota_per_group == 0 {
            return Err(Error::invalid("quota_per_group must be at least 1"));
        }
        if self.oracle_call_budget == 0 {
            return Err(Error::invalid("oracle_call_budget must be at least 1"));
        }
        if self.dequeue_cap_factor == 0 {
            return Err(Error::invalid("dequeue_cap_factor must be at least 1"));
        }
        Ok(())
    }

    pub fn dequeue_cap(&self) -> usize {
        self.max_iter.saturating_mul(self.dequeue_cap_factor)
    }
}

/// The oracle's answer for one latent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleVerdict {
    face_detected: bool,
    label: Option<GroupLabel>,
    embedding: Option<Vec<f64>>,
}

const UNIT_NORM_TOL: f64 = 1e-6;

impl OracleVerdict {
    pub fn no_face() -> Self {
        Self {
            face_detected: false,
            label: None,
            embedding: None,
        }
    }

    pub fn new(
        face_detected: bool,
        label: Option<GroupLabel>,
        embedding: Option<Vec<f64>>,
    ) -> Result<Self> {
        if label.is_some() && !face_detected {
            return Err(Error::invalid("verdict carries a label without a face"));
        }
        if let Some(e) = &embedding {
            let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::invalid(format!(
                    "embedding norm {norm} is not unit"
                )));
            }
        }
        Ok(Self {
            face_detected,
            label,
            embedding,
        })
    }

    pub fn face_detected(&self) -> bool {
        self.face_detected
    }

    pub fn label(&self) -> Option<&GroupLabel> {
        self.label.as_ref()
    }

    pub fn embedding(&self) -> Option<&[f64]> {
        self.embedding.as_deref()
    }

    /// Fitness indicator: a face was found and classified as `target`.
    pub fn matches(&self, target: &GroupLabel) -> bool {
        self.face_detected && self.label.as_ref() == Some(target)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityRecord {
    pub identity_id: u64,
    pub group: GroupLabel,
    pub latent: LatentVector,
    /// Root of the seed chain this record descends from.
    pub seed_id: u64,
    pub parent_id: Option<u64>,
    pub depth: u32,
    /// Group-local oracle call count at acceptance.
    pub call_index: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum DirectionKind {
    Pose,
    Expression,
    Illumination,
    Custom(String),
}

impl DirectionKind {
    pub fn parse(s: &str) -> Self {
        match s {
            "pose" => DirectionKind::Pose,
            "expression" => DirectionKind::Expression,
            "illumination" => DirectionKind::Illumination,
            other => DirectionKind::Custom(other.to_string()),
        }
    }

    pub fn name(&self) -> &str {
        match self {
            DirectionKind::Pose => "pose",
            DirectionKind::Expression => "expression",
            DirectionKind::Illumination => "illumination",
            DirectionKind::Custom(s) => s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationDirection {
    pub kind: DirectionKind,
    pub vector: Vec<f64>,
    pub magnitudes: Vec<f64>,
}

/// Identity-preserving edit directions (pose, expression, illumination).
/// These come from outside; the search never learns them.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VariationSpec {
    pub directions: Vec<VariationDirection>,
}

impl VariationSpec {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.directions.is_empty() {
            return Err(Error::invalid("variation spec has no directions"));
        }
        for d in &self.directions {
            let name = d.kind.name();
            if d.vector.len() != dim {
                return Err(Error::invalid(format!(
                    "direction {name} has {} values, latent dim is {dim}",
                    d.vector.len()
                )));
            }
            if d.vector.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid(format!("direction {name} is not finite")));
            }
            if d.magnitudes.is_empty() {
                return Err(Error::invalid(format!("direction {name} has no magnitudes")));
            }
            if d.magnitudes.iter().any(|m| *m == 0.0 || !m.is_finite()) {
                return Err(Error::invalid(format!(
                    "direction {name} has a zero or non-finite magnitude"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroupStatus {
    Running,
    Complete,
    Partial,
}

impl GroupStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            GroupStatus::Running => "running",
            GroupStatus::Complete => "complete",
            GroupStatus::Partial => "partial",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "running" => Ok(GroupStatus::Running),
            "complete" => Ok(GroupStatus::Complete),
            "partial" => Ok(GroupStatus::Partial),
            other => Err(Error::invalid(format!("unknown group status {other:?}"))),
        }
    }
}

/// Per-group bookkeeping stored in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: GroupLabel,
    pub quota: u64,
    pub count: u64,
    pub seeds_used: u64,
    pub calls_used: u64,
    pub status: GroupStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config_fingerprint: String,
    pub oracle_id: String,
    pub rng_seed: u64,
    pub space: LatentSpaceSpec,
    /// In configured group order.
    pub groups: Vec<GroupSummary>,
    pub records: Vec<IdentityRecord>,
    pub variant_latents: BTreeMap<u64, Vec<LatentVector>>,
}

impl DatasetManifest {
    pub fn empty(
        config_fingerprint: impl Into<String>,
        oracle_id: impl Into<String>,
        rng_seed: u64,
        space: LatentSpaceSpec,
    ) -> Self {
        Self {
            config_fingerprint: config_fingerprint.into(),
            oracle_id: oracle_id.into(),
            rng_seed,
            space,
            groups: Vec::new(),
            records: Vec::new(),
            variant_latents: BTreeMap::new(),
        }
    }

    pub fn per_group_counts(&self) -> BTreeMap<GroupLabel, u64> {
        self.groups
            .iter()
            .map(|g| (g.group.clone(), g.count))
            .collect()
    }

    pub fn is_complete(&self) -> bool {
        self.groups.iter().all(|g| g.status == GroupStatus::Complete)
    }

    pub fn partial_groups(&self) -> Vec<&GroupLabel> {
        self.groups
            .iter()
            .filter(|g| g.status != GroupStatus::Complete)
            .map(|g| &g.group)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub identity_id: Option<u64>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.identity_id {
            Some(id) => write!(f, "identity {id}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// Lists every broken manifest invariant. An empty list means the manifest is
/// consistent.
pub fn validate_manifest(manifest: &DatasetManifest) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |identity_id: Option<u64>, message: String| {
        out.push(Violation {
            identity_id,
            message,
        })
    };

    let mut seen_groups = std::collections::HashSet::new();
    for g in &manifest.groups {
        if !seen_groups.insert(&g.group) {
            push(None, format!("group {} listed twice", g.group));
        }
        if g.status == GroupStatus::Complete && g.count != g.quota {
            push(
                None,
                format!(
                    "group {} marked complete with {} of {} records",
                    g.group, g.count, g.quota
                ),
            );
        }
    }

    // Walk records against the bookkeeping: a record that overflows its
    // group's recorded count is named individually.
    let mut remaining: HashMap<&GroupLabel, u64> = manifest
        .groups
        .iter()
        .map(|g| (&g.group, g.count))
        .collect();
    let mut by_id: HashMap<u64, &IdentityRecord> = HashMap::new();
    for r in &manifest.records {
        if by_id.insert(r.identity_id, r).is_some() {
            push(Some(r.identity_id), "duplicate identity_id".into());
        }
        if r.latent.space() != manifest.space {
            push(
                Some(r.identity_id),
                format!(
                    "latent space {}/{} differs from manifest {}/{}",
                    r.latent.space().tag(),
                    r.latent.dim(),
                    manifest.space.tag(),
                    manifest.space.dim()
                ),
            );
        }
        match remaining.get_mut(&r.group) {
            None => push(
                Some(r.identity_id),
                format!("group {} has no bookkeeping entry", r.group),
            ),
            Some(0) => push(
                Some(r.identity_id),
                format!("group {} holds more records than its count", r.group),
            ),
            Some(n) => *n -= 1,
        }
        if (r.depth == 0) != r.parent_id.is_none() {
            push(
                Some(r.identity_id),
                "depth 0 must coincide with an absent parent".into(),
            );
        }
    }
    for g in &manifest.groups {
        if let Some(&left) = remaining.get(&g.group) {
            if left > 0 {
                push(
                    None,
                    format!(
                        "group {} records {} identities but only {} are present",
                        g.group,
                        g.count,
                        g.count - left
                    ),
                );
            }
        }
    }

    // Lineage walk.
    for r in &manifest.records {
        match r.parent_id {
            None => {
                if r.seed_id != r.identity_id {
                    push(Some(r.identity_id), "chain root must be its own seed".into());
                }
            }
            Some(pid) => match by_id.get(&pid) {
                None => push(Some(r.identity_id), format!("parent {pid} missing")),
                Some(p) => {
                    if p.depth + 1 != r.depth {
                        push(
                            Some(r.identity_id),
                            format!("depth {} is not parent depth {} + 1", r.depth, p.depth),
                        );
                    }
                    if p.seed_id != r.seed_id {
                        push(Some(r.identity_id), "seed differs from parent's seed".into());
                    }
                    if p.group != r.group {
                        push(Some(r.identity_id), "group differs from parent's group".into());
                    }
                }
            },
        }
    }

    for (id, variants) in &manifest.variant_latents {
        if !by_id.contains_key(id) {
            push(Some(*id), "variants attached to unknown identity".into());
        }
        if variants.iter().any(|v| v.space() != manifest.space) {
            push(Some(*id), "variant latent has the wrong space".into());
        }
    }
    out
}
