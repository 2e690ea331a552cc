//! Random rejection sampling and its efficiency comparison against the
//! latent search. Oracle calls are the cost unit; wall time is reported
//! alongside but depends on the machine.

use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{GroupLabel, GroupStatus, LatentVector, SearchConfig};
use crate::oracle::{sample_prior, OracleHandle};
use crate::rng;
use crate::search::{config_fingerprint, Campaign};

#[derive(Debug, Clone, PartialEq)]
pub struct RejectionOutcome {
    pub kept: Vec<LatentVector>,
    pub calls_used: u64,
    /// False when the budget ran out before `count` hits.
    pub complete: bool,
}

impl RejectionOutcome {
    pub fn acceptance_rate(&self) -> f64 {
        if self.calls_used == 0 {
            0.0
        } else {
            self.kept.len() as f64 / self.calls_used as f64
        }
    }
}

/// Draws prior samples until `count` of them are labelled `target`.
pub fn rejection_sample<R: Rng + ?Sized>(
    handle: &OracleHandle,
    target: &GroupLabel,
    count: usize,
    budget: u64,
    rng: &mut R,
) -> Result<RejectionOutcome> {
    if count == 0 {
        return Err(Error::invalid("count must be at least 1"));
    }
    handle.check_label(target)?;
    let mut kept = Vec::with_capacity(count);
    let mut calls = 0u64;
    while kept.len() < count && calls < budget {
        let v = sample_prior(handle.space(), rng);
        calls += 1;
        if handle.fitness(&v, target)? {
            kept.push(v);
        }
    }
    let complete = kept.len() == count;
    Ok(RejectionOutcome {
        kept,
        calls_used: calls,
        complete,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EfficiencyReport {
    pub group: GroupLabel,
    pub count: usize,
    pub rejection_calls: u64,
    pub search_calls: u64,
    /// `rejection_calls / search_calls`.
    pub ratio: f64,
    pub rejection_wall_seconds: f64,
    pub search_wall_seconds: f64,
    /// False when either method missed `count` within its budget.
    pub comparable: bool,
}

/// Produces `count` identities of `target` both ways under the same call
/// budget (`config.oracle_call_budget`) and compares their cost.
pub fn compare_efficiency(
    handle: &OracleHandle,
    target: &GroupLabel,
    count: usize,
    config: &SearchConfig,
) -> Result<EfficiencyReport> {
    if count == 0 {
        return Err(Error::invalid("count must be at least 1"));
    }
    let budget = config.oracle_call_budget;

    let started = Instant::now();
    let mut rej_rng = rng::stream(config.rng_seed, &[rng::TAG_REJECTION]);
    let rejection = rejection_sample(handle, target, count, budget, &mut rej_rng)?;
    let rejection_wall_seconds = started.elapsed().as_secs_f64();

    let search_config = SearchConfig {
        quota_per_group: count,
        ..config.clone()
    };
    let groups = vec![target.clone()];
    let fingerprint = config_fingerprint(&search_config, &groups);
    let started = Instant::now();
    let manifest = Campaign::new(handle, search_config, groups, fingerprint)?
        .workers(1)
        .run()?;
    let search_wall_seconds = started.elapsed().as_secs_f64();
    let group = &manifest.groups[0];

    let search_calls = group.calls_used;
    let comparable = rejection.complete && group.status == GroupStatus::Complete;
    Ok(EfficiencyReport {
        group: target.clone(),
        count,
        rejection_calls: rejection.calls_used,
        search_calls,
        ratio: rejection.calls_used as f64 / search_calls.max(1) as f64,
        rejection_wall_seconds,
        search_wall_seconds,
        comparable,
    })
}

pub fn render_table(reports: &[EfficiencyReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<16} {:>7} {:>16} {:>13} {:>9} {:>12}",
        "group", "count", "rejection_calls", "search_calls", "ratio", "wall_seconds"
    );
    for r in reports {
        let _ = writeln!(
            s,
            "{:<16} {:>7} {:>16} {:>13} {:>9.2} {:>12.3}{}",
            r.group.as_str(),
            r.count,
            r.rejection_calls,
            r.search_calls,
            r.ratio,
            r.rejection_wall_seconds + r.search_wall_seconds,
            if r.comparable { "" } else { "  (incomparable)" }
        );
    }
    s
}

/// One `key = value` block per report.
pub fn render_kv(reports: &[EfficiencyReport]) -> String {
    let mut s = String::new();
    for r in reports {
        let _ = writeln!(s, "group = {}", r.group);
        let _ = writeln!(s, "count = {}", r.count);
        let _ = writeln!(s, "rejection_calls = {}", r.rejection_calls);
        let _ = writeln!(s, "search_calls = {}", r.search_calls);
        let _ = writeln!(s, "ratio = {:.6}", r.ratio);
        let _ = writeln!(s, "rejection_wall_seconds = {:.6}", r.rejection_wall_seconds);
        let _ = writeln!(s, "search_wall_seconds = {:.6}", r.search_wall_seconds);
        let _ = writeln!(
            s,
            "wall_seconds = {:.6}",
            r.rejection_wall_seconds + r.search_wall_seconds
        );
        let _ = writeln!(s, "comparable = {}", r.comparable);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::Preset;

    fn handle() -> OracleHandle {
        OracleHandle::simulated(Preset::Desk.world().unwrap())
    }

    fn label(s: &str) -> GroupLabel {
        GroupLabel::new(s).unwrap()
    }

    #[test]
    fn majority_group_cost_matches_geometric_expectation() {
        let h = handle();
        let target = label("Caucasian");
        let p = Preset::Desk.world().unwrap().calibration().unwrap().targets[0];
        let expected = 100.0 / p;
        for run in 0..20u64 {
            let mut r = rng::stream(run, &[9]);
            let out = rejection_sample(&h, &target, 100, 1_000_000, &mut r).unwrap();
            assert!(out.complete);
            let c = out.calls_used as f64;
            assert!((c - expected).abs() <= 0.3 * expected, "run {run}: {c} vs {expected}");
        }
    }

    #[test]
    fn rare_group_cost() {
        let h = handle();
        let mut r = rng::stream(17, &[]);
        let out = rejection_sample(&h, &label("Indian"), 100, 1_000_000, &mut r).unwrap();
        let expected = 100.0 / 0.0026;
        let c = out.calls_used as f64;
        assert!((c - expected).abs() <= 0.3 * expected, "{c} vs {expected}");
    }

    #[test]
    fn preconditions_and_partial() {
        let h = handle();
        let mut r = rng::stream(1, &[]);
        assert!(rejection_sample(&h, &label("Caucasian"), 0, 10, &mut r).is_err());
        assert!(rejection_sample(&h, &label("Nobody"), 1, 10, &mut r).is_err());
        let out = rejection_sample(&h, &label("Indian"), 50, 20, &mut r).unwrap();
        assert!(!out.complete);
        assert_eq!(out.calls_used, 20);
        let cfg = SearchConfig::default();
        assert!(compare_efficiency(&h, &label("Indian"), 0, &cfg).is_err());
    }

    #[test]
    fn incomparable_when_budget_short() {
        let h = handle();
        let cfg = SearchConfig {
            oracle_call_budget: 50,
            ..Default::default()
        };
        let rep = compare_efficiency(&h, &label("Indian"), 20, &cfg).unwrap();
        assert!(!rep.comparable);
        assert!(render_table(std::slice::from_ref(&rep)).contains("incomparable"));
        assert!(render_kv(&[rep]).contains("comparable = false"));
    }
}
