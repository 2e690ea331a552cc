//! `lforge`: run search campaigns, baselines, audits and world calibration.
//!
//! Exit codes: 0 complete, 2 partial, 3 calibration failure, 64 usage,
//! 65 data.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use clap::{Parser, Subcommand, ValueEnum};
use lforge_core::audit::{self, AccuracyTable, ThresholdOrientation};
use lforge_core::baseline::{compare_efficiency, render_kv, render_table};
use lforge_core::config::{CalibrationRequest, CampaignConfig};
use lforge_core::manifest::{
    decode_checkpoint, decode_manifest, encode_checkpoint, encode_manifest, write_sidecar,
};
use lforge_core::model::validate_manifest;
use lforge_core::oracle::{MixtureWorld, WorldParams};
use lforge_core::search::{expand_manifest, Campaign, CampaignState, ChainEvent};
use lforge_core::{Error, GroupLabel, LatentSpaceSpec, OracleHandle, SpaceTag};

const EXIT_PARTIAL: u8 = 2;
const EXIT_CALIBRATION: u8 = 3;
const EXIT_USAGE: u8 = 64;
const EXIT_DATA: u8 = 65;

#[derive(Parser)]
#[command(name = "lforge", version, about = "Latent-space search for balanced synthetic identities")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a campaign and write the manifest plus latent sidecar.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from `<out>.ckpt` when present.
        #[arg(long)]
        resume: bool,
        /// Worker threads (default: one per group).
        #[arg(long)]
        workers: Option<usize>,
        /// Print per-group progress every N completed chains; 0 disables.
        #[arg(long, default_value_t = 10)]
        progress_every: u64,
    },
    /// Compare rejection sampling against the search.
    Baseline {
        #[arg(long)]
        config: PathBuf,
        /// Repeatable; defaults to every configured group.
        #[arg(long)]
        group: Vec<String>,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Audit a manifest (uniqueness, balance) or an accuracy table (ad).
    Audit {
        input: PathBuf,
        #[arg(long, value_enum)]
        kind: AuditKind,
        /// Oracle configuration; required for uniqueness.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = audit::SFACE_THRESHOLD)]
        threshold: f64,
        /// Treat the threshold as a cosine distance.
        #[arg(long)]
        distance_threshold: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a simulated world's mixture weights to target proportions.
    Calibrate {
        targets: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// World generation seed (default: the preset seed).
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AuditKind {
    Uniqueness,
    Balance,
    Ad,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    fn usage(message: impl Into<String>) -> Self {
        Self::new(EXIT_USAGE, message)
    }

    fn data(message: impl Into<String>) -> Self {
        Self::new(EXIT_DATA, message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::CalibrationFailed { .. } => EXIT_CALIBRATION,
            Error::InvalidInput(_) | Error::Parse { .. } | Error::UnsupportedAudit(_) => EXIT_USAGE,
            Error::SeedNotFound { .. } => EXIT_PARTIAL,
            _ => EXIT_DATA,
        };
        Failure::new(code, e.to_string())
    }
}

type Outcome = Result<u8, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Generate {
            config,
            out,
            resume,
            workers,
            progress_every,
        } => generate(&config, &out, resume, workers, progress_every),
        Command::Baseline {
            config,
            group,
            count,
            out,
        } => baseline(&config, &group, count, out.as_deref()),
        Command::Audit {
            input,
            kind,
            config,
            threshold,
            distance_threshold,
            out,
        } => {
            let orientation = if distance_threshold {
                ThresholdOrientation::LowerIsMoreSimilar
            } else {
                ThresholdOrientation::HigherIsMoreSimilar
            };
            run_audit(&input, kind, config.as_deref(), threshold, orientation, out.as_deref())
        }
        Command::Calibrate { targets, out, seed } => calibrate(&targets, &out, seed),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("lforge: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = OsString::from(path.as_os_str());
    s.push(suffix);
    PathBuf::from(s)
}

/// Writes via a temporary sibling and a rename so readers never see a torn file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    let tmp = with_suffix(path, ".tmp");
    fs::write(&tmp, bytes)
        .and_then(|_| fs::rename(&tmp, path))
        .map_err(|e| Failure::data(format!("cannot write {}: {e}", path.display())))
}

fn read_text(path: &Path, what: &str) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::usage(format!("cannot read {what} {}: {e}", path.display())))
}

fn load_config(path: &Path) -> Result<CampaignConfig, Failure> {
    let text = read_text(path, "config")?;
    let mut cfg = CampaignConfig::parse(&text, path.parent()).map_err(|e| match e {
        Error::Parse { line, column, message } => {
            Failure::usage(format!("{}:{line}:{column}: {message}", path.display()))
        }
        other => Failure::usage(format!("{}: {other}", path.display())),
    })?;
    if let Ok(seed) = std::env::var("LFORGE_SEED") {
        cfg.search.rng_seed = seed
            .trim()
            .parse()
            .map_err(|_| Failure::usage(format!("LFORGE_SEED is not an unsigned integer: {seed:?}")))?;
    }
    Ok(cfg)
}

fn progress_lines(state: &CampaignState) -> String {
    let mut s = String::new();
    for g in &state.groups {
        let _ = writeln!(
            s,
            "progress group={} accepted={}/{} calls={} status={}",
            g.group,
            g.records.len(),
            state.quota,
            g.calls_used,
            g.status.as_str()
        );
    }
    s
}

fn generate(config_path: &Path, out: &Path, resume: bool, workers: Option<usize>, every: u64) -> Outcome {
    let cfg = load_config(config_path)?;
    let handle = cfg.open_oracle()?;
    let variations = cfg.load_variations(handle.space().dim())?;
    let fingerprint = cfg.fingerprint();
    let groups = cfg.groups.clone();
    let mut campaign = Campaign::new(&handle, cfg.search.clone(), groups.clone(), fingerprint)?;
    if let Some(w) = workers {
        if w == 0 {
            return Err(Failure::usage("--workers must be at least 1"));
        }
        campaign = campaign.workers(w);
    }

    let ckpt_path = with_suffix(out, ".ckpt");
    let state = if resume && ckpt_path.exists() {
        let text = read_text(&ckpt_path, "checkpoint")?;
        let state = decode_checkpoint(&text)
            .map_err(|e| Failure::data(format!("{}: {e}", ckpt_path.display())))?;
        eprintln!("resuming from {}", ckpt_path.display());
        state
    } else {
        if resume {
            eprintln!("no checkpoint at {}; starting fresh", ckpt_path.display());
        }
        campaign.initial_state()
    };

    let chains = Mutex::new(0u64);
    let write_error: Mutex<Option<Failure>> = Mutex::new(None);
    let observer = |s: &CampaignState, _: &ChainEvent| {
        if let Err(f) = write_atomic(&ckpt_path, encode_checkpoint(s).as_bytes()) {
            *write_error.lock().unwrap() = Some(f);
            return ControlFlow::Break(());
        }
        let mut n = chains.lock().unwrap();
        *n += 1;
        if every > 0 && n.is_multiple_of(every) {
            eprint!("{}", progress_lines(s));
        }
        ControlFlow::Continue(())
    };
    let run = campaign
        .run_from(state, &observer)
        .map_err(|e| match e {
            Error::InvalidInput(m) => Failure::usage(format!("cannot resume: {m}")),
            other => other.into(),
        })?;
    if let Some(f) = write_error.into_inner().unwrap() {
        return Err(f);
    }
    write_atomic(&ckpt_path, encode_checkpoint(&run.state).as_bytes())?;
    eprint!("{}", progress_lines(&run.state));

    let mut manifest = run.manifest();
    if let Some(spec) = &variations {
        expand_manifest(&mut manifest, spec, &handle)?;
    }
    write_atomic(out, encode_manifest(&manifest).as_bytes())?;
    let sidecar = with_suffix(out, ".latents.bin");
    let mut buf = BufWriter::new(Vec::new());
    write_sidecar(&mut buf, manifest.space, &manifest.records)?;
    write_atomic(&sidecar, buf.get_ref())?;

    for g in &run.state.groups {
        if let Some(why) = &g.failure {
            eprintln!("group {} stopped early: {why}", g.group);
        }
    }
    if manifest.is_complete() {
        Ok(0)
    } else {
        let partial: Vec<&str> = manifest.partial_groups().iter().map(|g| g.as_str()).collect();
        eprintln!("partial result: {} below quota", partial.join(", "));
        Ok(EXIT_PARTIAL)
    }
}

fn baseline(config_path: &Path, groups: &[String], count: usize, out: Option<&Path>) -> Outcome {
    if count == 0 {
        return Err(Failure::usage("--count must be at least 1"));
    }
    let cfg = load_config(config_path)?;
    let targets: Vec<GroupLabel> = if groups.is_empty() {
        cfg.groups.clone()
    } else {
        groups
            .iter()
            .map(|g| GroupLabel::new(g.as_str()))
            .collect::<Result<_, _>>()?
    };
    let handle = cfg.open_oracle()?;
    let mut reports = Vec::new();
    for g in &targets {
        let r = compare_efficiency(&handle, g, count, &cfg.search)?;
        eprintln!(
            "baseline group={} rejection_calls={} search_calls={} ratio={:.2}",
            g, r.rejection_calls, r.search_calls, r.ratio
        );
        reports.push(r);
    }
    eprint!("{}", render_table(&reports));
    let kv = render_kv(&reports);
    print!("{kv}");
    if let Some(path) = out {
        write_atomic(path, kv.as_bytes())?;
    }
    Ok(if reports.iter().all(|r| r.comparable) {
        0
    } else {
        EXIT_PARTIAL
    })
}

fn emit(report: &str, out: Option<&Path>) -> Result<(), Failure> {
    print!("{report}");
    if let Some(path) = out {
        write_atomic(path, report.as_bytes())?;
    }
    Ok(())
}

fn run_audit(
    input: &Path,
    kind: AuditKind,
    config: Option<&Path>,
    threshold: f64,
    orientation: ThresholdOrientation,
    out: Option<&Path>,
) -> Outcome {
    if let AuditKind::Ad = kind {
        let text = read_text(input, "accuracy table")?;
        let table = AccuracyTable::parse(&text).map_err(|e| Failure::data(format!("{}: {e}", input.display())))?;
        let ad = audit::accuracy_difference(&table)?;
        emit(&format!("ad = {ad:.2}\n"), out)?;
        return Ok(0);
    }

    let text = read_text(input, "manifest")?;
    let manifest = decode_manifest(&text).map_err(|e| Failure::data(format!("{}: {e}", input.display())))?;
    let violations = validate_manifest(&manifest);
    if !violations.is_empty() {
        for v in &violations {
            match v.identity_id {
                Some(id) => eprintln!("violation: identity {id}: {}", v.message),
                None => eprintln!("violation: {}", v.message),
            }
        }
        return Err(Failure::data(format!("{} failed validation", input.display())));
    }

    match kind {
        AuditKind::Balance => {
            let report = audit::balance_report(&manifest);
            eprint!("{}", audit::render_balance_text(&report));
            emit(&audit::render_balance_kv(&report), out)?;
        }
        AuditKind::Uniqueness => {
            if !(threshold.is_finite() && (-1.0..=2.0).contains(&threshold)) {
                return Err(Failure::usage("--threshold must lie in [-1, 2]"));
            }
            let config = config.ok_or_else(|| Failure::usage("uniqueness needs --config to reach the oracle"))?;
            let cfg = load_config(config)?;
            let handle: OracleHandle = cfg.open_oracle()?;
            if handle.oracle_id() != manifest.oracle_id {
                return Err(Failure::data(format!(
                    "manifest was produced by oracle {}, config opens {}",
                    manifest.oracle_id,
                    handle.oracle_id()
                )));
            }
            let report = audit::uniqueness_report(&manifest, &handle, threshold, orientation)?;
            eprint!("{}", audit::render_uniqueness_text(&report));
            emit(&audit::render_uniqueness_kv(&report), out)?;
            let hist = audit::render_histogram(&report);
            match out {
                Some(path) => write_atomic(&with_suffix(path, ".hist"), hist.as_bytes())?,
                None => eprint!("{hist}"),
            }
        }
        AuditKind::Ad => unreachable!("handled above"),
    }
    Ok(0)
}

fn calibrate(targets_path: &Path, out: &Path, seed: Option<u64>) -> Outcome {
    let text = read_text(targets_path, "targets")?;
    let req = CalibrationRequest::parse(&text).map_err(|e| Failure::usage(format!("{}: {e}", targets_path.display())))?;
    let seed = seed.unwrap_or(req.seed);
    let space = LatentSpaceSpec::new(SpaceTag::Z, req.dim)?;
    let groups: Vec<GroupLabel> = req.targets.iter().map(|(g, _)| g.clone()).collect();
    let proportions: Vec<f64> = req.targets.iter().map(|(_, p)| *p).collect();
    let world = MixtureWorld::generate(space, groups, &WorldParams::default(), seed)?;
    let world = match world.calibrated(&proportions, req.sample_budget, req.tolerance, seed) {
        Ok(w) => w,
        Err(Error::CalibrationFailed { rounds, errors }) => {
            let errs: Vec<String> = errors.iter().map(|e| format!("{e:.4}")).collect();
            return Err(Failure::new(
                EXIT_CALIBRATION,
                format!("calibration did not converge in {rounds} rounds; relative errors [{}]", errs.join(", ")),
            ));
        }
        Err(e) => return Err(e.into()),
    };
    write_atomic(out, world.to_json().as_bytes())?;
    let outcome = world.calibration().expect("calibrated world records its outcome");
    let mut s = String::new();
    for (i, g) in world.groups().iter().enumerate() {
        let _ = writeln!(s, "{g}.weight = {:.9}", world.weights()[i]);
        let _ = writeln!(s, "{g}.relative_error = {:.6}", outcome.relative_errors[i]);
    }
    let _ = writeln!(s, "log_detect_threshold = {}", world.log_detect_threshold());
    let _ = writeln!(s, "max_relative_error = {:.6}", outcome.max_relative_error);
    let _ = writeln!(s, "rounds = {}", outcome.rounds);
    print!("{s}");
    Ok(0)
}
