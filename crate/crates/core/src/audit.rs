//! Post-hoc dataset audits: pairwise identity uniqueness, group balance and
//! the accuracy-difference bias measure.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DatasetManifest, GroupLabel};
use crate::oracle::OracleHandle;

/// Operating threshold of the SFace matcher.
pub const SFACE_THRESHOLD: f64 = 0.593;
pub const BIN_WIDTH: f64 = 0.02;
pub const BIN_COUNT: usize = 100;

/// Per-group recognition accuracies, in percent.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyTable {
    entries: Vec<(GroupLabel, f64)>,
}

impl AccuracyTable {
    pub fn new(entries: Vec<(GroupLabel, f64)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("accuracy table is empty"));
        }
        let mut seen = std::collections::HashSet::new();
        for (g, acc) in &entries {
            if !seen.insert(g) {
                return Err(Error::invalid(format!("group {g} appears twice")));
            }
            if !(0.0..=100.0).contains(acc) {
                return Err(Error::invalid(format!("accuracy {acc} for {g} outside [0, 100]")));
            }
        }
        Ok(Self { entries })
    }

    pub fn from_pairs(pairs: &[(&str, f64)]) -> Result<Self> {
        let entries = pairs
            .iter()
            .map(|(g, a)| Ok((GroupLabel::new(*g)?, *a)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(entries)
    }

    pub fn entries(&self) -> &[(GroupLabel, f64)] {
        &self.entries
    }

    /// Parses `Group = accuracy` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let content = line.split('#').next().unwrap_or("");
            if content.trim().is_empty() {
                continue;
            }
            let (k, v) = content
                .split_once('=')
                .ok_or_else(|| Error::parse(i + 1, 1, "expected `group = accuracy`"))?;
            let label = GroupLabel::new(k.trim()).map_err(|e| Error::parse(i + 1, 1, e.to_string()))?;
            let col = k.len() + 2;
            let acc: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::parse(i + 1, col, format!("bad accuracy {:?}", v.trim())))?;
            entries.push((label, acc));
        }
        Self::new(entries)
    }
}

/// Largest absolute accuracy gap between any two groups.
pub fn accuracy_difference(table: &AccuracyTable) -> Result<f64> {
    let accs: Vec<f64> = table.entries.iter().map(|(_, a)| *a).collect();
    if accs.len() < 2 {
        return Err(Error::invalid("accuracy difference needs at least two groups"));
    }
    let max = accs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = accs.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(max - min)
}

/// How the threshold is compared against a pair's cosine similarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ThresholdOrientation {
    /// Duplicate when similarity >= threshold.
    #[default]
    HigherIsMoreSimilar,
    /// Threshold is a cosine distance: duplicate when 1 - similarity <= threshold.
    LowerIsMoreSimilar,
}

impl ThresholdOrientation {
    pub fn as_str(self) -> &'static str {
        match self {
            ThresholdOrientation::HigherIsMoreSimilar => "higher-is-more-similar",
            ThresholdOrientation::LowerIsMoreSimilar => "lower-is-more-similar",
        }
    }

    pub fn is_duplicate(self, similarity: f64, threshold: f64) -> bool {
        match self {
            ThresholdOrientation::HigherIsMoreSimilar => similarity >= threshold,
            ThresholdOrientation::LowerIsMoreSimilar => 1.0 - similarity <= threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniquenessReport {
    pub identities: usize,
    pub pair_count: u64,
    /// Bin `i` covers `[-1 + 0.02 i, -1 + 0.02 (i + 1))`; the last bin also
    /// holds similarity exactly 1.
    pub histogram: Vec<u64>,
    pub duplicate_count: u64,
    pub duplicate_rate: f64,
    pub threshold: f64,
    pub orientation: ThresholdOrientation,
}

pub fn bin_index(similarity: f64) -> usize {
    let idx = ((similarity + 1.0) / BIN_WIDTH).floor();
    if idx <= 0.0 {
        0
    } else {
        (idx as usize).min(BIN_COUNT - 1)
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot.clamp(-1.0, 1.0)
}

/// All-pairs cosine similarity over unit embeddings.
pub fn uniqueness_from_embeddings(
    embeddings: &[Vec<f64>],
    threshold: f64,
    orientation: ThresholdOrientation,
) -> UniquenessReport {
    let n = embeddings.len();
    let (histogram, duplicates) = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut hist = vec![0u64; BIN_COUNT];
            let mut dup = 0u64;
            for j in i + 1..n {
                let s = cosine(&embeddings[i], &embeddings[j]);
                hist[bin_index(s)] += 1;
                if orientation.is_duplicate(s, threshold) {
                    dup += 1;
                }
            }
            (hist, dup)
        })
        .reduce(
            || (vec![0u64; BIN_COUNT], 0u64),
            |(mut h, d), (h2, d2)| {
                h.iter_mut().zip(h2).for_each(|(a, b)| *a += b);
                (h, d + d2)
            },
        );
    let pair_count = (n as u64) * (n.saturating_sub(1) as u64) / 2;
    UniquenessReport {
        identities: n,
        pair_count,
        histogram,
        duplicate_count: duplicates,
        duplicate_rate: if pair_count == 0 {
            0.0
        } else {
            duplicates as f64 / pair_count as f64
        },
        threshold,
        orientation,
    }
}

/// Matches every identity's base latent against every other one.
pub fn uniqueness_report(
    manifest: &DatasetManifest,
    handle: &OracleHandle,
    threshold: f64,
    orientation: ThresholdOrientation,
) -> Result<UniquenessReport> {
    if handle.embedding_dim().is_none() {
        return Err(Error::UnsupportedAudit(handle.oracle_id().to_string()));
    }
    let embeddings = manifest
        .records
        .iter()
        .map(|r| {
            handle
                .evaluate(&r.latent)?
                .embedding()
                .map(<[f64]>::to_vec)
                .ok_or_else(|| Error::UnsupportedAudit(handle.oracle_id().to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(uniqueness_from_embeddings(&embeddings, threshold, orientation))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalanceEntry {
    pub group: GroupLabel,
    pub count: u64,
    pub share: f64,
    /// Count differs from an exactly uniform split.
    pub deviates: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalanceReport {
    pub entries: Vec<BalanceEntry>,
    pub total: u64,
    /// Recounted totals agree with the manifest's bookkeeping.
    pub bookkeeping_consistent: bool,
}

/// Counts records per group (from the records themselves, not bookkeeping).
pub fn balance_report(manifest: &DatasetManifest) -> BalanceReport {
    let mut counts: BTreeMap<&GroupLabel, u64> = BTreeMap::new();
    for r in &manifest.records {
        *counts.entry(&r.group).or_default() += 1;
    }
    let k = manifest.groups.len() as u64;
    let total = manifest.records.len() as u64;
    let entries = manifest
        .groups
        .iter()
        .map(|g| {
            let count = counts.get(&g.group).copied().unwrap_or(0);
            BalanceEntry {
                group: g.group.clone(),
                count,
                share: if total == 0 { 0.0 } else { count as f64 / total as f64 },
                deviates: count * k != total,
            }
        })
        .collect();
    let bookkeeping_consistent = manifest
        .groups
        .iter()
        .all(|g| counts.get(&g.group).copied().unwrap_or(0) == g.count)
        && counts.keys().all(|g| manifest.groups.iter().any(|s| &s.group == *g));
    BalanceReport {
        entries,
        total,
        bookkeeping_consistent,
    }
}

pub fn render_uniqueness_text(r: &UniquenessReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "identities      {}", r.identities);
    let _ = writeln!(s, "pairs           {}", r.pair_count);
    let _ = writeln!(s, "threshold       {} ({})", r.threshold, r.orientation.as_str());
    let _ = writeln!(s, "duplicates      {}", r.duplicate_count);
    let _ = writeln!(s, "duplicate_rate  {:.6}", r.duplicate_rate);
    s
}

pub fn render_uniqueness_kv(r: &UniquenessReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "identities = {}", r.identities);
    let _ = writeln!(s, "pair_count = {}", r.pair_count);
    let _ = writeln!(s, "threshold = {}", r.threshold);
    let _ = writeln!(s, "orientation = {}", r.orientation.as_str());
    let _ = writeln!(s, "duplicate_count = {}", r.duplicate_count);
    let _ = writeln!(s, "duplicate_rate = {:.9}", r.duplicate_rate);
    s
}

/// Two columns: left bin edge and count.
pub fn render_histogram(r: &UniquenessReport) -> String {
    let mut s = String::new();
    for (i, c) in r.histogram.iter().enumerate() {
        let left = -1.0 + BIN_WIDTH * i as f64;
        let _ = writeln!(s, "{left:.2} {c}");
    }
    s
}

pub fn render_balance_text(r: &BalanceReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<16} {:>8} {:>8}", "group", "count", "share");
    for e in &r.entries {
        let _ = writeln!(
            s,
            "{:<16} {:>8} {:>8.4}{}",
            e.group.as_str(),
            e.count,
            e.share,
            if e.deviates { "  deviates" } else { "" }
        );
    }
    let _ = writeln!(s, "total {}", r.total);
    s
}

pub fn render_balance_kv(r: &BalanceReport) -> String {
    let mut s = String::new();
    for e in &r.entries {
        let _ = writeln!(s, "{}.count = {}", e.group, e.count);
        let _ = writeln!(s, "{}.share = {:.9}", e.group, e.share);
        let _ = writeln!(s, "{}.deviates = {}", e.group, e.deviates);
    }
    let _ = writeln!(s, "total = {}", r.total);
    let _ = writeln!(s, "bookkeeping_consistent = {}", r.bookkeeping_consistent);
    s
}
