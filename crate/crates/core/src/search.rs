//! Breadth-first evolutionary exploration of the latent space.
//!
//! A chain starts from a randomly found seed whose oracle label is the target
//! group. Accepted vectors are mutated with a per-coordinate uniform step and
//! children are queued only when they move strictly farther from the seed, so
//! each chain sweeps outward through the target region until its frontier
//! dies, its acceptance cap is hit, or the group's call budget runs out.
//! Campaigns repeat chains per group until the quota is met.

use std::collections::VecDeque;
use std::ops::ControlFlow;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{
    DatasetManifest, GroupLabel, GroupStatus, GroupSummary, IdentityRecord, LatentSpaceSpec,
    LatentVector, SearchConfig, VariationSpec,
};
use crate::oracle::{sample_prior, OracleHandle};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct SeedHit {
    pub latent: LatentVector,
    /// Oracle calls spent, the successful one included.
    pub calls: u64,
}

/// Samples the prior until a latent is labelled `target`.
pub fn find_seed<R: Rng + ?Sized>(
    handle: &OracleHandle,
    target: &GroupLabel,
    budget: u64,
    rng: &mut R,
) -> Result<SeedHit> {
    if budget == 0 {
        return Err(Error::invalid("seed budget must be at least 1"));
    }
    handle.check_label(target)?;
    for calls in 1..=budget {
        let v = sample_prior(handle.space(), rng);
        if handle.fitness(&v, target)? {
            return Ok(SeedHit { latent: v, calls });
        }
    }
    Err(Error::SeedNotFound {
        group: target.to_string(),
        budget,
    })
}

/// `n` children of `parent`, each coordinate shifted by an independent
/// uniform draw on `[-delta, delta]`. Children are rounded to `f32` without
/// ever leaving the box.
pub fn mutate<R: Rng + ?Sized>(
    parent: &LatentVector,
    n: usize,
    delta: f64,
    rng: &mut R,
) -> Result<Vec<LatentVector>> {
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    if !(delta.is_finite() && delta > 0.0) {
        return Err(Error::invalid("delta must be positive and finite"));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let values = parent
            .values()
            .iter()
            .map(|&p| {
                let u = rng.random_range(-delta..=delta);
                let mut x = (p as f64 + u) as f32;
                while (x as f64 - p as f64).abs() > delta {
                    x = if x > p { x.next_down() } else { x.next_up() };
                }
                x
            })
            .collect();
        out.push(LatentVector::new(parent.space(), values)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    QueueEmpty,
    /// The chain reached its acceptance cap (`max_iter`, or the group's
    /// remaining quota when smaller).
    MaxIter,
    Budget,
    DequeueCap,
    /// An oracle error ended the chain; accepted records are kept.
    Aborted,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Termination::QueueEmpty => "queue-empty",
            Termination::MaxIter => "max-iter",
            Termination::Budget => "budget",
            Termination::DequeueCap => "dequeue-cap",
            Termination::Aborted => "aborted",
        }
    }
}

/// Where a chain sits inside its campaign.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChainContext {
    pub first_id: u64,
    pub calls_before: u64,
    pub budget_remaining: u64,
    pub max_accept: usize,
}

#[derive(Debug)]
pub struct ChainOutcome {
    pub records: Vec<IdentityRecord>,
    pub termination: Termination,
    pub calls_used: u64,
    pub dequeues: usize,
    /// Hash of whatever was left in the queue.
    pub frontier_digest: String,
    pub error: Option<Error>,
}

struct FrontierItem {
    latent: LatentVector,
    parent: Option<u64>,
    depth: u32,
    /// Distance to the seed, cached for the enqueue test of its children.
    seed_distance: f64,
}

/// Runs one seed chain with a standalone context.
pub fn explore<R: Rng + ?Sized>(
    seed: &LatentVector,
    target: &GroupLabel,
    config: &SearchConfig,
    handle: &OracleHandle,
    rng: &mut R,
) -> Result<ChainOutcome> {
    let ctx = ChainContext {
        first_id: 0,
        calls_before: 0,
        budget_remaining: config.oracle_call_budget,
        max_accept: config.max_iter,
    };
    explore_with(seed, target, config, handle, rng, ctx)
}

pub fn explore_with<R: Rng + ?Sized>(
    seed: &LatentVector,
    target: &GroupLabel,
    config: &SearchConfig,
    handle: &OracleHandle,
    rng: &mut R,
    ctx: ChainContext,
) -> Result<ChainOutcome> {
    config.validate()?;
    if seed.space() != handle.space() {
        return Err(Error::DimensionMismatch {
            expected: handle.space().dim(),
            got: seed.dim(),
        });
    }
    let max_accept = ctx.max_accept.min(config.max_iter);
    let dequeue_cap = config.dequeue_cap();

    let mut queue = VecDeque::new();
    queue.push_back(FrontierItem {
        latent: seed.clone(),
        parent: None,
        depth: 0,
        seed_distance: 0.0,
    });
    let mut records: Vec<IdentityRecord> = Vec::new();
    let mut calls = 0u64;
    let mut dequeues = 0usize;
    let mut error = None;

    let termination = loop {
        if records.len() >= max_accept {
            break Termination::MaxIter;
        }
        if queue.is_empty() {
            break Termination::QueueEmpty;
        }
        if calls >= ctx.budget_remaining {
            break Termination::Budget;
        }
        if dequeues >= dequeue_cap {
            break Termination::DequeueCap;
        }
        let item = queue.pop_front().expect("queue is nonempty");
        dequeues += 1;
        calls += 1;
        let verdict = match handle.evaluate(&item.latent) {
            Ok(v) => v,
            Err(e) => {
                error = Some(e);
                break Termination::Aborted;
            }
        };
        if !verdict.face_detected() || verdict.label() != Some(target) {
            continue;
        }
        let id = ctx.first_id + records.len() as u64;
        for child in mutate(&item.latent, config.n, config.delta, rng)? {
            let d = child.distance(seed);
            if d > item.seed_distance {
                queue.push_back(FrontierItem {
                    latent: child,
                    parent: Some(id),
                    depth: item.depth + 1,
                    seed_distance: d,
                });
            }
        }
        records.push(IdentityRecord {
            identity_id: id,
            group: target.clone(),
            latent: item.latent,
            seed_id: ctx.first_id,
            parent_id: item.parent,
            depth: item.depth,
            call_index: ctx.calls_before + calls,
        });
    };

    Ok(ChainOutcome {
        records,
        termination,
        calls_used: calls,
        dequeues,
        frontier_digest: frontier_digest(&queue),
        error,
    })
}

fn frontier_digest(queue: &VecDeque<FrontierItem>) -> String {
    let mut h = Sha256::new();
    h.update((queue.len() as u64).to_le_bytes());
    for item in queue {
        h.update(item.parent.map_or(u64::MAX, |p| p).to_le_bytes());
        h.update(item.depth.to_le_bytes());
        for x in item.latent.values() {
            h.update(x.to_le_bytes());
        }
    }
    hex::encode(&h.finalize()[..8])
}

/// Progress of one group. Identity ids here are group-local (0-based);
/// [`CampaignState::to_manifest`] renumbers them campaign-wide.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupProgress {
    pub group: GroupLabel,
    pub records: Vec<IdentityRecord>,
    pub chains: u64,
    pub calls_used: u64,
    pub status: GroupStatus,
    pub frontier_digest: String,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CampaignState {
    pub config_fingerprint: String,
    pub oracle_id: String,
    pub rng_seed: u64,
    pub space: LatentSpaceSpec,
    pub quota: u64,
    pub groups: Vec<GroupProgress>,
}

/// Digest recorded for a group that has not run a chain yet.
pub const EMPTY_FRONTIER: &str = "-";

impl CampaignState {
    pub fn to_manifest(&self) -> DatasetManifest {
        let mut m = DatasetManifest::empty(
            self.config_fingerprint.clone(),
            self.oracle_id.clone(),
            self.rng_seed,
            self.space,
        );
        let mut offset = 0u64;
        for g in &self.groups {
            for r in &g.records {
                let mut r = r.clone();
                r.identity_id += offset;
                r.seed_id += offset;
                r.parent_id = r.parent_id.map(|p| p + offset);
                m.records.push(r);
            }
            offset += g.records.len() as u64;
            m.groups.push(GroupSummary {
                group: g.group.clone(),
                quota: self.quota,
                count: g.records.len() as u64,
                seeds_used: g.chains,
                calls_used: g.calls_used,
                status: g.status,
            });
        }
        m
    }

    /// Rebuilds state from a manifest-shaped checkpoint. `digests` holds one
    /// frontier digest per group, in manifest group order.
    pub fn from_manifest(m: &DatasetManifest, digests: &[String]) -> Result<Self> {
        if digests.len() != m.groups.len() {
            return Err(Error::invalid("one frontier digest per group is required"));
        }
        let quota = m.groups.first().map_or(0, |g| g.quota);
        if m.groups.iter().any(|g| g.quota != quota) {
            return Err(Error::invalid("groups disagree on quota"));
        }
        let mut groups = Vec::with_capacity(m.groups.len());
        let mut offset = 0u64;
        for (summary, digest) in m.groups.iter().zip(digests) {
            let mut records: Vec<IdentityRecord> = m
                .records
                .iter()
                .filter(|r| r.group == summary.group)
                .cloned()
                .collect();
            if records.len() as u64 != summary.count {
                return Err(Error::invalid(format!(
                    "group {} lists {} records, bookkeeping says {}",
                    summary.group,
                    records.len(),
                    summary.count
                )));
            }
            for (i, r) in records.iter_mut().enumerate() {
                if r.identity_id != offset + i as u64 || r.seed_id < offset {
                    return Err(Error::invalid(format!(
                        "identity {} breaks dense group-ordered numbering",
                        r.identity_id
                    )));
                }
                r.identity_id -= offset;
                r.seed_id -= offset;
                r.parent_id = match r.parent_id {
                    Some(p) if p < offset => {
                        return Err(Error::invalid(format!(
                            "identity {} has a parent outside its group",
                            r.identity_id + offset
                        )))
                    }
                    p => p.map(|p| p - offset),
                };
            }
            offset += records.len() as u64;
            groups.push(GroupProgress {
                group: summary.group.clone(),
                records,
                chains: summary.seeds_used,
                calls_used: summary.calls_used,
                status: summary.status,
                frontier_digest: digest.clone(),
                failure: None,
            });
        }
        Ok(Self {
            config_fingerprint: m.config_fingerprint.clone(),
            oracle_id: m.oracle_id.clone(),
            rng_seed: m.rng_seed,
            space: m.space,
            quota,
            groups,
        })
    }

    pub fn is_finished(&self) -> bool {
        self.groups.iter().all(|g| g.status != GroupStatus::Running)
    }

    pub fn digests(&self) -> Vec<String> {
        self.groups.iter().map(|g| g.frontier_digest.clone()).collect()
    }
}

/// Reported to the campaign observer after every completed chain.
#[derive(Debug, Clone)]
pub struct ChainEvent {
    pub group_index: usize,
    pub chain_index: u64,
    pub accepted: usize,
    pub termination: Option<Termination>,
}

#[derive(Debug)]
pub struct CampaignRun {
    pub state: CampaignState,
    /// The observer asked to stop before every group finished.
    pub interrupted: bool,
}

impl CampaignRun {
    pub fn manifest(&self) -> DatasetManifest {
        self.state.to_manifest()
    }
}

/// Per-group quota campaigns over a shared oracle.
pub struct Campaign<'a> {
    handle: &'a OracleHandle,
    config: SearchConfig,
    groups: Vec<GroupLabel>,
    fingerprint: String,
    workers: usize,
}

impl<'a> Campaign<'a> {
    pub fn new(
        handle: &'a OracleHandle,
        config: SearchConfig,
        groups: Vec<GroupLabel>,
        fingerprint: impl Into<String>,
    ) -> Result<Self> {
        config.validate()?;
        crate::model::validate_label_set(&groups)?;
        for g in &groups {
            handle.check_label(g)?;
        }
        let workers = groups.len();
        Ok(Self {
            handle,
            config,
            groups,
            fingerprint: fingerprint.into(),
            workers,
        })
    }

    pub fn workers(mut self, workers: usize) -> Self {
        self.workers = workers.max(1);
        self
    }

    pub fn initial_state(&self) -> CampaignState {
        CampaignState {
            config_fingerprint: self.fingerprint.clone(),
            oracle_id: self.handle.oracle_id().to_string(),
            rng_seed: self.config.rng_seed,
            space: self.handle.space(),
            quota: self.config.quota_per_group as u64,
            groups: self
                .groups
                .iter()
                .map(|g| GroupProgress {
                    group: g.clone(),
                    records: Vec::new(),
                    chains: 0,
                    calls_used: 0,
                    status: GroupStatus::Running,
                    frontier_digest: EMPTY_FRONTIER.to_string(),
                    failure: None,
                })
                .collect(),
        }
    }

    pub fn run(&self) -> Result<DatasetManifest> {
        Ok(self
            .run_from(self.initial_state(), &|_, _| ControlFlow::Continue(()))?
            .manifest())
    }

    /// Continues `state` (fresh or loaded from a checkpoint). `observer` runs
    /// under the state lock after every completed chain, which makes it the
    /// single writer for checkpoints; returning `Break` stops the campaign
    /// once in-flight chains finish.
    pub fn run_from(
        &self,
        state: CampaignState,
        observer: &(dyn Fn(&CampaignState, &ChainEvent) -> ControlFlow<()> + Sync),
    ) -> Result<CampaignRun> {
        self.check_resumable(&state)?;
        let shared = Mutex::new(state);
        let next = AtomicUsize::new(0);
        let stop = AtomicBool::new(false);
        let workers = self.workers.min(self.groups.len()).max(1);

        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let gi = next.fetch_add(1, Ordering::SeqCst);
                    if gi >= self.groups.len() || stop.load(Ordering::SeqCst) {
                        break;
                    }
                    self.run_group(gi, &shared, &stop, observer);
                });
            }
        });

        let state = shared.into_inner().unwrap_or_else(|p| p.into_inner());
        let interrupted = !state.is_finished();
        Ok(CampaignRun { state, interrupted })
    }

    fn check_resumable(&self, state: &CampaignState) -> Result<()> {
        if state.config_fingerprint != self.fingerprint {
            return Err(Error::invalid("checkpoint belongs to a different configuration"));
        }
        if state.oracle_id != self.handle.oracle_id() {
            return Err(Error::invalid(format!(
                "checkpoint was produced by oracle {}, not {}",
                state.oracle_id,
                self.handle.oracle_id()
            )));
        }
        let names: Vec<&GroupLabel> = state.groups.iter().map(|g| &g.group).collect();
        if names != self.groups.iter().collect::<Vec<_>>() {
            return Err(Error::invalid("checkpoint groups differ from configured groups"));
        }
        if state.quota != self.config.quota_per_group as u64 {
            return Err(Error::invalid("checkpoint quota differs from configuration"));
        }
        Ok(())
    }

    fn run_group(
        &self,
        gi: usize,
        shared: &Mutex<CampaignState>,
        stop: &AtomicBool,
        observer: &(dyn Fn(&CampaignState, &ChainEvent) -> ControlFlow<()> + Sync),
    ) {
        let target = &self.groups[gi];
        let quota = self.config.quota_per_group;
        let budget = self.config.oracle_call_budget;
        loop {
            if stop.load(Ordering::SeqCst) {
                return;
            }
            let (accepted, chains, calls_used, status) = {
                let s = shared.lock().unwrap_or_else(|p| p.into_inner());
                let g = &s.groups[gi];
                (g.records.len(), g.chains, g.calls_used, g.status)
            };
            if status != GroupStatus::Running {
                return;
            }
            if accepted >= quota {
                self.commit(gi, shared, stop, observer, |g| g.status = GroupStatus::Complete, None);
                return;
            }
            if calls_used >= budget {
                self.commit(gi, shared, stop, observer, |g| g.status = GroupStatus::Partial, None);
                return;
            }

            let mut chain_rng = rng::stream(self.config.rng_seed, &[rng::TAG_CHAIN, gi as u64, chains]);
            let budget_left = budget - calls_used;
            let seed = match find_seed(self.handle, target, budget_left, &mut chain_rng) {
                Ok(hit) => hit,
                Err(Error::SeedNotFound { .. }) => {
                    self.commit(
                        gi,
                        shared,
                        stop,
                        observer,
                        |g| {
                            g.calls_used += budget_left;
                            g.status = GroupStatus::Partial;
                        },
                        None,
                    );
                    return;
                }
                Err(e) => {
                    let msg = e.to_string();
                    self.commit(
                        gi,
                        shared,
                        stop,
                        observer,
                        |g| {
                            g.status = GroupStatus::Partial;
                            g.failure = Some(msg);
                        },
                        None,
                    );
                    return;
                }
            };
            let ctx = ChainContext {
                first_id: accepted as u64,
                calls_before: calls_used + seed.calls,
                budget_remaining: budget_left - seed.calls,
                max_accept: quota - accepted,
            };
            let outcome = match explore_with(
                &seed.latent,
                target,
                &self.config,
                self.handle,
                &mut chain_rng,
                ctx,
            ) {
                Ok(o) => o,
                Err(e) => {
                    let msg = e.to_string();
                    self.commit(
                        gi,
                        shared,
                        stop,
                        observer,
                        |g| {
                            g.status = GroupStatus::Partial;
                            g.failure = Some(msg);
                        },
                        None,
                    );
                    return;
                }
            };
            let termination = outcome.termination;
            let failure = outcome.error.as_ref().map(|e| e.to_string());
            let n_accepted = outcome.records.len();
            let spent = seed.calls + outcome.calls_used;
            let finished = self.commit(
                gi,
                shared,
                stop,
                observer,
                move |g| {
                    g.records.extend(outcome.records);
                    g.chains += 1;
                    g.calls_used += spent;
                    g.frontier_digest = outcome.frontier_digest;
                    if g.records.len() >= quota {
                        g.status = GroupStatus::Complete;
                    } else if g.calls_used >= budget || failure.is_some() {
                        g.status = GroupStatus::Partial;
                        g.failure = failure;
                    }
                },
                Some((n_accepted, termination)),
            );
            if finished {
                return;
            }
        }
    }

    /// Applies `update` to group `gi` under the lock and notifies the
    /// observer. Returns true when the group is no longer running.
    fn commit(
        &self,
        gi: usize,
        shared: &Mutex<CampaignState>,
        stop: &AtomicBool,
        observer: &(dyn Fn(&CampaignState, &ChainEvent) -> ControlFlow<()> + Sync),
        update: impl FnOnce(&mut GroupProgress),
        chain: Option<(usize, Termination)>,
    ) -> bool {
        let mut s = shared.lock().unwrap_or_else(|p| p.into_inner());
        update(&mut s.groups[gi]);
        let event = ChainEvent {
            group_index: gi,
            chain_index: s.groups[gi].chains,
            accepted: chain.map_or(0, |c| c.0),
            termination: chain.map(|c| c.1),
        };
        if observer(&s, &event).is_break() {
            stop.store(true, Ordering::SeqCst);
        }
        s.groups[gi].status != GroupStatus::Running
    }
}

/// Stable hash of the search knobs and group list.
pub fn config_fingerprint(config: &SearchConfig, groups: &[GroupLabel]) -> String {
    let json = serde_json::to_vec(&(config, groups)).expect("config serializes");
    hex::encode(&Sha256::digest(&json)[..16])
}

/// Runs a campaign over `targets` with one worker per group.
pub fn run_campaign(
    targets: &[GroupLabel],
    config: &SearchConfig,
    handle: &OracleHandle,
) -> Result<DatasetManifest> {
    Campaign::new(
        handle,
        config.clone(),
        targets.to_vec(),
        config_fingerprint(config, targets),
    )?
    .run()
}

/// Identity-preserving variants `v + m * d` that keep the target label.
pub fn expand_identity(
    v: &LatentVector,
    spec: &VariationSpec,
    target: &GroupLabel,
    handle: &OracleHandle,
) -> Result<Vec<LatentVector>> {
    spec.validate(v.dim())?;
    if !handle.fitness(v, target)? {
        return Err(Error::invalid(format!(
            "latent is not labelled {target}; only accepted identities can be expanded"
        )));
    }
    let base = v.to_f64();
    let mut kept = Vec::new();
    for d in &spec.directions {
        for &m in &d.magnitudes {
            let moved: Vec<f64> = base.iter().zip(&d.vector).map(|(x, dx)| x + m * dx).collect();
            let candidate = LatentVector::from_f64(v.space(), &moved)?;
            if candidate == *v {
                continue;
            }
            if handle.evaluate(&candidate)?.matches(target) {
                kept.push(candidate);
            }
        }
    }
    Ok(kept)
}

/// Fills `manifest.variant_latents` for every record.
pub fn expand_manifest(
    manifest: &mut DatasetManifest,
    spec: &VariationSpec,
    handle: &OracleHandle,
) -> Result<()> {
    let mut variants = std::collections::BTreeMap::new();
    for r in &manifest.records {
        variants.insert(r.identity_id, expand_identity(&r.latent, spec, &r.group, handle)?);
    }
    manifest.variant_latents = variants;
    Ok(())
}
