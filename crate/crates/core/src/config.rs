//! Campaign configuration: a flat file of `key = value` lines.
//!
//! ```text
//! # six-group desk campaign
//! groups = Caucasian, African, Indian, Asian, MiddleEastern, LatinoHispanic
//! quota = 50
//! n = 4
//! delta = 0.25
//! max_iter = 500
//! oracle_call_budget = 1000000
//! seed = 7
//! oracle = simulated
//! world = desk            # desk | paper | path/to/world.json
//! ```
//!
//! External oracles use `oracle = external`, `external_command = <argv>`
//! (split on whitespace), `space = Z|W` and optionally
//! `external_timeout_secs`. `variations = <path>` names a direction file
//! for identity expansion.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{DirectionKind, GroupLabel, SearchConfig, SpaceTag, VariationDirection, VariationSpec};
use crate::oracle::external::DEFAULT_TIMEOUT;
use crate::oracle::{ExternalOracle, MixtureWorld, OracleHandle, Preset};

#[derive(Debug, Clone, PartialEq)]
pub enum WorldSource {
    Preset(Preset),
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub enum OracleSpec {
    Simulated(WorldSource),
    External {
        command: Vec<String>,
        space: SpaceTag,
        timeout: Duration,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CampaignConfig {
    pub groups: Vec<GroupLabel>,
    pub search: SearchConfig,
    pub oracle: OracleSpec,
    pub variations: Option<PathBuf>,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            groups: GroupLabel::default_set(),
            search: SearchConfig::default(),
            oracle: OracleSpec::Simulated(WorldSource::Preset(Preset::Desk)),
            variations: None,
        }
    }
}

const KEYS: &[&str] = &[
    "groups",
    "quota",
    "n",
    "delta",
    "max_iter",
    "oracle_call_budget",
    "seed",
    "dequeue_cap_factor",
    "oracle",
    "world",
    "space",
    "external_command",
    "external_timeout_secs",
    "variations",
];

/// Splits `key = value` lines. Returns (line, key, value, value column).
fn kv_lines(text: &str) -> Result<Vec<(usize, String, String, usize)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("");
        if content.trim().is_empty() {
            continue;
        }
        let eq = content
            .find('=')
            .ok_or_else(|| Error::parse(line, 1, "expected `key = value`"))?;
        let key = content[..eq].trim();
        if key.is_empty() {
            return Err(Error::parse(line, 1, "missing key"));
        }
        let after = &content[eq + 1..];
        let lead = after.len() - after.trim_start().len();
        out.push((line, key.to_string(), after.trim().to_string(), eq + 2 + lead));
    }
    Ok(out)
}

fn parse_num<T: std::str::FromStr>(v: &str, line: usize, col: usize, key: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::parse(line, col, format!("invalid value {v:?} for {key}")))
}

impl CampaignConfig {
    pub fn parse(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let mut cfg = CampaignConfig::default();
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();
        let mut oracle_kind = "simulated".to_string();
        let mut world: Option<(String, usize, usize)> = None;
        let mut space = SpaceTag::Z;
        let mut command: Option<Vec<String>> = None;
        let mut timeout = DEFAULT_TIMEOUT;
        let resolve = |p: &str| -> PathBuf {
            let path = PathBuf::from(p);
            match base_dir {
                Some(dir) if path.is_relative() => dir.join(path),
                _ => path,
            }
        };

        for (line, key, value, col) in kv_lines(text)? {
            if !KEYS.contains(&key.as_str()) {
                return Err(Error::parse(line, 1, format!("unknown key {key:?}")));
            }
            if let Some(prev) = seen.insert(key.clone(), line) {
                return Err(Error::parse(line, 1, format!("{key} already set on line {prev}")));
            }
            let s = &mut cfg.search;
            match key.as_str() {
                "groups" => {
                    cfg.groups = value
                        .split(',')
                        .map(|g| GroupLabel::new(g.trim()))
                        .collect::<Result<Vec<_>>>()
                        .map_err(|e| Error::parse(line, col, e.to_string()))?;
                    crate::model::validate_label_set(&cfg.groups)
                        .map_err(|e| Error::parse(line, col, e.to_string()))?;
                }
                "quota" => s.quota_per_group = parse_num(&value, line, col, &key)?,
                "n" => s.n = parse_num(&value, line, col, &key)?,
                "delta" => s.delta = parse_num(&value, line, col, &key)?,
                "max_iter" => s.max_iter = parse_num(&value, line, col, &key)?,
                "oracle_call_budget" => s.oracle_call_budget = parse_num(&value, line, col, &key)?,
                "seed" => s.rng_seed = parse_num(&value, line, col, &key)?,
                "dequeue_cap_factor" => s.dequeue_cap_factor = parse_num(&value, line, col, &key)?,
                "oracle" => {
                    if value != "simulated" && value != "external" {
                        return Err(Error::parse(line, col, "oracle must be simulated or external"));
                    }
                    oracle_kind = value;
                }
                "world" => world = Some((value, line, col)),
                "space" => {
                    space = SpaceTag::parse(&value).map_err(|e| Error::parse(line, col, e.to_string()))?
                }
                "external_command" => {
                    let argv: Vec<String> = value.split_whitespace().map(String::from).collect();
                    if argv.is_empty() {
                        return Err(Error::parse(line, col, "external_command is empty"));
                    }
                    command = Some(argv);
                }
                "external_timeout_secs" => {
                    let secs: f64 = parse_num(&value, line, col, &key)?;
                    if !(secs.is_finite() && secs > 0.0) {
                        return Err(Error::parse(line, col, "timeout must be positive"));
                    }
                    timeout = Duration::from_secs_f64(secs);
                }
                "variations" => cfg.variations = Some(resolve(&value)),
                _ => unreachable!("key list checked above"),
            }
            cfg.search
                .validate()
                .map_err(|e| Error::parse(line, col, e.to_string()))?;
        }

        cfg.oracle = if oracle_kind == "external" {
            let command = command.ok_or_else(|| {
                Error::parse(seen.get("oracle").copied().unwrap_or(1), 1, "external oracle needs external_command")
            })?;
            OracleSpec::External {
                command,
                space,
                timeout,
            }
        } else {
            let source = match world {
                None => WorldSource::Preset(Preset::Desk),
                Some((w, _, _)) => match Preset::parse(&w) {
                    Some(p) => WorldSource::Preset(p),
                    None => WorldSource::File(resolve(&w)),
                },
            };
            OracleSpec::Simulated(source)
        };
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path.parent())
    }

    /// Canonical `key = value` rendering of every setting.
    pub fn canonical(&self) -> String {
        let s = &self.search;
        let groups: Vec<&str> = self.groups.iter().map(GroupLabel::as_str).collect();
        let mut lines = vec![
            format!("groups = {}", groups.join(",")),
            format!("quota = {}", s.quota_per_group),
            format!("n = {}", s.n),
            format!("delta = {:?}", s.delta),
            format!("max_iter = {}", s.max_iter),
            format!("oracle_call_budget = {}", s.oracle_call_budget),
            format!("seed = {}", s.rng_seed),
            format!("dequeue_cap_factor = {}", s.dequeue_cap_factor),
        ];
        match &self.oracle {
            OracleSpec::Simulated(src) => {
                lines.push("oracle = simulated".into());
                lines.push(match src {
                    WorldSource::Preset(p) => format!("world = {}", p.name()),
                    WorldSource::File(f) => format!("world = {}", f.display()),
                });
            }
            OracleSpec::External {
                command,
                space,
                timeout,
            } => {
                lines.push("oracle = external".into());
                lines.push(format!("external_command = {}", command.join(" ")));
                lines.push(format!("space = {space}"));
                lines.push(format!("external_timeout_secs = {}", timeout.as_secs_f64()));
            }
        }
        if let Some(v) = &self.variations {
            lines.push(format!("variations = {}", v.display()));
        }
        lines.join("\n") + "\n"
    }

    /// Hash of everything that determines a campaign's output except the
    /// oracle's own content, which the manifest records as `oracle_id`.
    pub fn fingerprint(&self) -> String {
        hex::encode(&Sha256::digest(self.canonical().as_bytes())[..16])
    }

    pub fn open_oracle(&self) -> Result<OracleHandle> {
        match &self.oracle {
            OracleSpec::Simulated(WorldSource::Preset(p)) => Ok(OracleHandle::simulated(p.world()?)),
            OracleSpec::Simulated(WorldSource::File(path)) => {
                let world = MixtureWorld::from_json(&std::fs::read_to_string(path)?)?;
                Ok(OracleHandle::simulated(Arc::new(world)))
            }
            OracleSpec::External {
                command,
                space,
                timeout,
            } => Ok(OracleHandle::external(ExternalOracle::spawn(command, *space, *timeout)?)),
        }
    }

    pub fn load_variations(&self, dim: usize) -> Result<Option<VariationSpec>> {
        match &self.variations {
            None => Ok(None),
            Some(path) => parse_variations(&std::fs::read_to_string(path)?, dim).map(Some),
        }
    }
}

/// Direction file: one `direction name=<kind> magnitudes=<m,...> vector=<x,...>`
/// line per direction.
pub fn parse_variations(text: &str, dim: usize) -> Result<VariationSpec> {
    let mut spec = VariationSpec::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut tokens = content.split_whitespace();
        if tokens.next() != Some("direction") {
            return Err(Error::parse(line, 1, "expected a direction line"));
        }
        let mut name = None;
        let mut magnitudes = None;
        let mut vector = None;
        for tok in tokens {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| Error::parse(line, 1, format!("expected key=value, got {tok:?}")))?;
            let floats = |v: &str| -> Result<Vec<f64>> {
                v.split(',')
                    .map(|x| x.parse::<f64>().map_err(|_| Error::parse(line, 1, format!("bad number {x:?}"))))
                    .collect()
            };
            match k {
                "name" => name = Some(DirectionKind::parse(v)),
                "magnitudes" => magnitudes = Some(floats(v)?),
                "vector" => vector = Some(floats(v)?),
                other => return Err(Error::parse(line, 1, format!("unknown field {other:?}"))),
            }
        }
        spec.directions.push(VariationDirection {
            kind: name.ok_or_else(|| Error::parse(line, 1, "direction lacks name"))?,
            vector: vector.ok_or_else(|| Error::parse(line, 1, "direction lacks vector"))?,
            magnitudes: magnitudes.ok_or_else(|| Error::parse(line, 1, "direction lacks magnitudes"))?,
        });
    }
    spec.validate(dim)?;
    Ok(spec)
}

/// Target proportions file for calibration: `Group = proportion` lines plus
/// optional `calibration.*` settings.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationRequest {
    pub targets: Vec<(GroupLabel, f64)>,
    pub dim: usize,
    pub sample_budget: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl CalibrationRequest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut req = CalibrationRequest {
            targets: Vec::new(),
            dim: Preset::Desk.dim(),
            sample_budget: crate::oracle::world::PRESET_CALIBRATION_SAMPLES,
            tolerance: crate::oracle::calibrate::DEFAULT_TOLERANCE,
            seed: crate::oracle::world::PRESET_SEED,
        };
        for (line, key, value, col) in kv_lines(text)? {
            match key.as_str() {
                "calibration.dim" => req.dim = parse_num(&value, line, col, &key)?,
                "calibration.samples" => req.sample_budget = parse_num(&value, line, col, &key)?,
                "calibration.tolerance" => req.tolerance = parse_num(&value, line, col, &key)?,
                "calibration.seed" => req.seed = parse_num(&value, line, col, &key)?,
                _ => {
                    let label = GroupLabel::new(key.as_str()).map_err(|e| Error::parse(line, 1, e.to_string()))?;
                    let p: f64 = parse_num(&value, line, col, "proportion")?;
                    if !(p.is_finite() && p > 0.0) {
                        return Err(Error::parse(line, col, "proportions must be positive"));
                    }
                    req.targets.push((label, p));
                }
            }
        }
        let labels: Vec<GroupLabel> = req.targets.iter().map(|(g, _)| g.clone()).collect();
        crate::model::validate_label_set(&labels)?;
        if labels.len() < 2 {
            return Err(Error::invalid("calibration needs at least two groups"));
        }
        let sum: f64 = req.targets.iter().map(|(_, p)| p).sum();
        if sum > 1.0 + 1e-9 {
            return Err(Error::invalid(format!("proportions sum to {sum} > 1")));
        }
        Ok(req)
    }
}
