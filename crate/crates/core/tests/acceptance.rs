//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Runs with a plain `main` so every criterion reports even when an earlier
//! one fails; the process exits nonzero if any criterion fails.

use std::collections::BTreeMap;
use std::ops::ControlFlow;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use lforge_core::audit::{
    accuracy_difference, uniqueness_report, AccuracyTable, ThresholdOrientation, BIN_COUNT,
    SFACE_THRESHOLD,
};
use lforge_core::baseline::{compare_efficiency, rejection_sample};
use lforge_core::manifest::{decode_checkpoint, encode_checkpoint, encode_manifest};
use lforge_core::model::validate_manifest;
use lforge_core::oracle::{paper_bias_targets, sample_prior, MixtureWorld, Preset};
use lforge_core::rng;
use lforge_core::search::{config_fingerprint, Campaign};
use lforge_core::{
    DatasetManifest, GroupLabel, GroupStatus, GroupSummary, IdentityRecord, LatentVector,
    OracleHandle, SearchConfig,
};
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn label(s: &str) -> GroupLabel {
    GroupLabel::new(s).unwrap()
}

/// Reference classifier written directly from the mixture definition.
fn reference_label(world: &MixtureWorld, x: &[f32]) -> Option<usize> {
    let d = x.len() as f64;
    let logs: Vec<f64> = world
        .anchors()
        .iter()
        .zip(world.spreads())
        .zip(world.weights())
        .map(|((mu, s), w)| {
            let sq: f64 = x.iter().zip(mu).map(|(a, b)| (*a as f64 - b).powi(2)).sum();
            w.ln() - 0.5 * d * (2.0 * std::f64::consts::PI * s * s).ln() - sq / (2.0 * s * s)
        })
        .collect();
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logs.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    if lse < world.log_detect_threshold() {
        return None;
    }
    (0..logs.len()).max_by(|&a, &b| logs[a].total_cmp(&logs[b]))
}

fn reference_embedding(world: &MixtureWorld, x: &[f32], k: usize) -> Vec<f64> {
    let off: Vec<f64> = x.iter().zip(&world.anchors()[k]).map(|(a, b)| *a as f64 - b).collect();
    let e: Vec<f64> = world
        .projection()
        .iter()
        .map(|row| row.iter().zip(&off).map(|(r, o)| r * o).sum())
        .collect();
    let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
    e.into_iter().map(|v| v / norm).collect()
}

fn ad_reproduction() -> Outcome {
    // (model/table, per-group accuracies, printed AD)
    let rows: [(&str, [f64; 4], f64); 9] = [
        ("vgg/ArcFace", [79.17, 74.90, 82.48, 73.80], 8.68),
        ("vgg/AdaFace", [77.97, 75.67, 82.52, 70.18], 12.33),
        ("vgg/ElasticFace", [74.97, 71.32, 77.78, 70.92], 6.87),
        ("bupt/ArcFace", [94.23, 92.87, 95.03, 92.92], 2.12),
        ("bupt/AdaFace", [93.28, 92.87, 95.02, 90.78], 4.23),
        ("bupt/ElasticFace", [94.23, 93.83, 95.30, 93.03], 2.27),
        ("global/ArcFace", [94.85, 94.28, 96.23, 93.20], 3.03),
        ("global/AdaFace", [94.22, 93.88, 96.63, 91.05], 5.58),
        ("global/ElasticFace", [95.32, 94.70, 97.07, 93.68], 3.38),
    ];
    let names = ["Indian", "Asian", "White", "African"];
    let mut worst: f64 = 0.0;
    for (row, acc, printed) in rows {
        let pairs: Vec<(&str, f64)> = names.iter().copied().zip(acc).collect();
        let ad = accuracy_difference(&AccuracyTable::from_pairs(&pairs).unwrap()).unwrap();
        worst = worst.max((ad - printed).abs());
        ensure((ad - printed).abs() <= 0.05, || format!("{row}: {ad} vs printed {printed}"))?;
    }
    // Exact arithmetic against the pairwise definition on synthetic tables.
    let mut r = rng::stream(0xad, &[]);
    for t in 0..2000 {
        let k = r.random_range(2..=8);
        let accs: Vec<f64> = (0..k).map(|_| r.random_range(0..=40000) as f64 / 400.0).collect();
        let table = AccuracyTable::new(
            accs.iter().enumerate().map(|(i, a)| (label(&format!("G{i}")), *a)).collect(),
        )
        .unwrap();
        let mut brute: f64 = 0.0;
        for a in &accs {
            for b in &accs {
                brute = brute.max((a - b).abs());
            }
        }
        let ad = accuracy_difference(&table).unwrap();
        ensure(ad == brute, || format!("synthetic table {t}: {ad} != {brute}"))?;
    }
    Ok(format!("9 printed rows, max deviation {worst:.3}; 2000 synthetic tables exact"))
}

fn bias_calibration(world: &MixtureWorld, handle: &OracleHandle) -> Outcome {
    let samples = 100_000;
    let mut r = rng::stream(0xb1a5, &[]);
    let k = world.groups().len();
    let mut counts = vec![0u64; k];
    for _ in 0..samples {
        let v = sample_prior(handle.space(), &mut r);
        let reference = reference_label(world, v.values());
        let lib = handle.evaluate(&v).unwrap().label().cloned();
        ensure(reference.map(|i| world.groups()[i].clone()) == lib, || {
            format!("simulated oracle disagrees with reference at {:?}", v.values())
        })?;
        if let Some(i) = reference {
            counts[i] += 1;
        }
    }
    let mut summary = Vec::new();
    for (g, target) in paper_bias_targets() {
        let i = world.group_index(&g).unwrap();
        let p = counts[i] as f64 / samples as f64;
        let rel = (p - target).abs() / target;
        summary.push(format!("{g} {:.4}%", 100.0 * p));
        ensure(rel <= 0.20, || format!("{g}: measured {p} vs target {target}"))?;
    }
    let cau = counts[world.group_index(&label("Caucasian")).unwrap()] as f64 / samples as f64;
    ensure(cau >= 0.65 * 0.8, || format!("Caucasian share {cau}"))?;
    Ok(summary.join(", "))
}

fn efficiency(handle: &OracleHandle) -> Outcome {
    let config = SearchConfig {
        rng_seed: 2024,
        ..SearchConfig::default()
    };
    let rare = compare_efficiency(handle, &label("Indian"), 100, &config).unwrap();
    let major = compare_efficiency(handle, &label("Caucasian"), 100, &config).unwrap();
    ensure(rare.comparable && major.comparable, || "a method ran out of budget".into())?;
    ensure(rare.ratio >= 5.0, || format!("rare ratio {:.2}", rare.ratio))?;
    ensure(major.ratio > 1.0, || format!("majority ratio {:.2}", major.ratio))?;
    // Every group under 5% mass must also favour the search.
    let african = compare_efficiency(handle, &label("African"), 100, &config).unwrap();
    ensure(african.comparable && african.search_calls < african.rejection_calls, || {
        format!("African {}/{}", african.rejection_calls, african.search_calls)
    })?;
    Ok(format!(
        "Indian {}/{} = {:.1}x, African {:.1}x, Caucasian {}/{} = {:.2}x",
        rare.rejection_calls,
        rare.search_calls,
        rare.ratio,
        african.ratio,
        major.rejection_calls,
        major.search_calls,
        major.ratio
    ))
}

fn run(handle: &OracleHandle, config: &SearchConfig, groups: &[GroupLabel], workers: usize) -> DatasetManifest {
    Campaign::new(handle, config.clone(), groups.to_vec(), config_fingerprint(config, groups))
        .unwrap()
        .workers(workers)
        .run()
        .unwrap()
}

fn search_properties(world: &MixtureWorld, handle: &OracleHandle) -> Outcome {
    let groups = GroupLabel::default_set();
    let deltas = [0.05, 0.15, 0.25, 0.5];
    let max_iters = [3, 7, 20, 500];
    let campaigns = 24u64;
    let mut records = 0usize;
    for s in 0..campaigns {
        let config = SearchConfig {
            n: 2 + (s % 4) as usize,
            delta: deltas[(s % 4) as usize],
            max_iter: max_iters[((s / 4) % 4) as usize],
            quota_per_group: 8 + (s % 5) as usize * 4,
            rng_seed: 1000 + s,
            ..SearchConfig::default()
        };
        let serial = run(handle, &config, &groups, 1);
        let parallel = run(handle, &config, &groups, groups.len());
        let again = run(handle, &config, &groups, 3);
        let text = encode_manifest(&serial);
        ensure(text == encode_manifest(&parallel), || format!("campaign {s}: serial and parallel differ"))?;
        ensure(text == encode_manifest(&again), || format!("campaign {s}: rerun differs"))?;
        let violations = validate_manifest(&serial);
        ensure(violations.is_empty(), || format!("campaign {s}: {violations:?}"))?;

        let by_id: BTreeMap<u64, &IdentityRecord> =
            serial.records.iter().map(|r| (r.identity_id, r)).collect();
        let mut per_seed: BTreeMap<u64, usize> = BTreeMap::new();
        for r in &serial.records {
            let k = reference_label(world, r.latent.values());
            ensure(k.map(|k| &world.groups()[k]) == Some(&r.group), || {
                format!("campaign {s}: identity {} is not {}", r.identity_id, r.group)
            })?;
            *per_seed.entry(r.seed_id).or_default() += 1;
            if let Some(p) = r.parent_id {
                let parent = by_id[&p];
                let seed = &by_id[&r.seed_id].latent;
                ensure(r.latent.distance(seed) > parent.latent.distance(seed), || {
                    format!("campaign {s}: identity {} not farther from its seed than its parent", r.identity_id)
                })?;
                ensure(r.latent.linf_distance(&parent.latent) <= config.delta, || {
                    format!("campaign {s}: identity {} steps more than delta", r.identity_id)
                })?;
            }
        }
        ensure(per_seed.values().all(|&c| c <= config.max_iter), || {
            format!("campaign {s}: a seed exceeded max_iter")
        })?;
        for g in &serial.groups {
            ensure(g.status == GroupStatus::Complete, || format!("campaign {s}: {} incomplete", g.group))?;
            let n = serial.records.iter().filter(|r| r.group == g.group).count() as u64;
            ensure(n == g.quota && g.count == g.quota, || {
                format!("campaign {s}: {} has {n} of {}", g.group, g.quota)
            })?;
        }
        records += serial.records.len();
    }
    Ok(format!("{campaigns} campaigns, {records} identities checked"))
}

fn uniqueness(world: &MixtureWorld, handle: &OracleHandle) -> Outcome {
    let groups: Vec<GroupLabel> = ["Caucasian", "African", "Asian", "Indian"].map(label).to_vec();
    let config = SearchConfig {
        quota_per_group: 50,
        max_iter: 10,
        rng_seed: 77,
        ..SearchConfig::default()
    };
    let manifest = run(handle, &config, &groups, groups.len());
    ensure(manifest.records.len() == 200, || format!("{} identities", manifest.records.len()))?;
    let report =
        uniqueness_report(&manifest, handle, SFACE_THRESHOLD, ThresholdOrientation::HigherIsMoreSimilar)
            .unwrap();

    let emb: Vec<Vec<f64>> = manifest
        .records
        .iter()
        .map(|r| {
            let k = reference_label(world, r.latent.values()).unwrap();
            reference_embedding(world, r.latent.values(), k)
        })
        .collect();
    let mut hist = vec![0u64; BIN_COUNT];
    let mut pairs = 0u64;
    let mut dups = 0u64;
    for i in 0..emb.len() {
        for j in 0..i {
            let s: f64 = emb[i].iter().zip(&emb[j]).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0);
            let b = (((s + 1.0) / 0.02).floor() as i64).clamp(0, BIN_COUNT as i64 - 1);
            hist[b as usize] += 1;
            pairs += 1;
            if s >= SFACE_THRESHOLD {
                dups += 1;
            }
        }
    }
    ensure(pairs == 19_900 && report.pair_count == pairs, || format!("pairs {}", report.pair_count))?;
    ensure(report.histogram == hist, || "histogram differs from brute force".into())?;
    ensure(report.duplicate_count == dups, || format!("duplicates {} vs {dups}", report.duplicate_count))?;

    // Two records sharing one latent.
    let v = world.anchor_latent(0);
    let off = LatentVector::from_f64(v.space(), &v.to_f64().iter().map(|x| x + 0.3).collect::<Vec<_>>()).unwrap();
    let mut twin = DatasetManifest::empty("twin", handle.oracle_id(), 0, handle.space());
    let g = world.groups()[reference_label(world, off.values()).unwrap()].clone();
    for id in 0..2 {
        twin.records.push(IdentityRecord {
            identity_id: id,
            group: g.clone(),
            latent: off.clone(),
            seed_id: id,
            parent_id: None,
            depth: 0,
            call_index: id + 1,
        });
    }
    twin.groups.push(GroupSummary {
        group: g,
        quota: 2,
        count: 2,
        seeds_used: 2,
        calls_used: 2,
        status: GroupStatus::Complete,
    });
    let t = uniqueness_report(&twin, handle, SFACE_THRESHOLD, ThresholdOrientation::HigherIsMoreSimilar).unwrap();
    ensure(t.duplicate_count == 1 && t.histogram[BIN_COUNT - 1] == 1, || {
        format!("identical latents: {t:?}")
    })?;
    Ok(format!("19900 pairs, {dups} above threshold, histogram identical"))
}

fn rejection_statistics(world: &MixtureWorld, handle: &OracleHandle) -> Outcome {
    // Reference prior mass from a large independent sample.
    let mut r = rng::stream(0x5e, &[1]);
    let k = world.groups().len();
    let mut counts = vec![0u64; k];
    let reference_n = 1_000_000u64;
    for _ in 0..reference_n {
        let v = sample_prior(handle.space(), &mut r);
        if let Some(i) = reference_label(world, v.values()) {
            counts[i] += 1;
        }
    }
    let trials = 10_000u64;
    let mut worst: f64 = 0.0;
    for (i, g) in world.groups().iter().enumerate() {
        let p = counts[i] as f64 / reference_n as f64;
        let mut rr = rng::stream(0x5e, &[2, i as u64]);
        let out = rejection_sample(handle, g, trials as usize, trials, &mut rr).unwrap();
        ensure(out.calls_used == trials, || format!("{g}: {} trials", out.calls_used))?;
        let se = (p * (1.0 - p) / trials as f64).sqrt();
        let z = (out.acceptance_rate() - p).abs() / se;
        worst = worst.max(z);
        ensure(z <= 3.0, || format!("{g}: rate {} vs mass {p} ({z:.2} SE)", out.acceptance_rate()))?;
    }
    Ok(format!("{k} groups, worst deviation {worst:.2} SE"))
}

fn checkpoint_equivalence(handle: &OracleHandle) -> Outcome {
    let groups: Vec<GroupLabel> = ["Caucasian", "African", "Indian"].map(label).to_vec();
    let config = SearchConfig {
        quota_per_group: 20,
        max_iter: 6,
        rng_seed: 4242,
        ..SearchConfig::default()
    };
    let fp = config_fingerprint(&config, &groups);
    let campaign = |workers| Campaign::new(handle, config.clone(), groups.clone(), fp.clone()).unwrap().workers(workers);
    let full = encode_manifest(&campaign(1).run().unwrap());

    // Snapshots written by the observer after each chain.
    let snaps = Mutex::new(Vec::new());
    let c = campaign(3);
    c.run_from(c.initial_state(), &|s, _| {
        snaps.lock().unwrap().push(encode_checkpoint(s));
        ControlFlow::Continue(())
    })
    .unwrap();
    let snaps = snaps.into_inner().unwrap();
    for (i, text) in snaps.iter().enumerate() {
        let state = decode_checkpoint(text).unwrap();
        let resumed = campaign(2).run_from(state, &|_, _| ControlFlow::Continue(())).unwrap();
        ensure(encode_manifest(&resumed.manifest()) == full, || format!("snapshot {i} diverges"))?;
    }

    // Stopping after the k-th chain, then resuming from the saved state.
    let total = snaps.len();
    for k in 1..total {
        let seen = Mutex::new(0usize);
        let c = campaign(1);
        let stopped = c
            .run_from(c.initial_state(), &|_, _| {
                let mut n = seen.lock().unwrap();
                *n += 1;
                if *n >= k {
                    ControlFlow::Break(())
                } else {
                    ControlFlow::Continue(())
                }
            })
            .unwrap();
        let state = decode_checkpoint(&encode_checkpoint(&stopped.state)).unwrap();
        let resumed = campaign(3).run_from(state, &|_, _| ControlFlow::Continue(())).unwrap();
        ensure(!resumed.interrupted, || "resume did not finish".into())?;
        ensure(encode_manifest(&resumed.manifest()) == full, || format!("stop after chain {k} diverges"))?;
    }
    Ok(format!("{} snapshots and {} stop points resume identically", snaps.len(), total - 1))
}

fn main() {
    let setup = Instant::now();
    let world: Arc<MixtureWorld> = Preset::Desk.world().expect("desk world calibrates");
    let handle = OracleHandle::simulated(world.clone());
    println!("setup: desk world ready in {:.1}s", setup.elapsed().as_secs_f64());

    type Check<'a> = (&'a str, Option<Duration>, Box<dyn Fn() -> Outcome + 'a>);
    let checks: Vec<Check> = vec![
        ("AD metric reproduction", Some(Duration::from_secs(1)), Box::new(ad_reproduction)),
        ("bias calibration", Some(Duration::from_secs(30)), Box::new(|| bias_calibration(&world, &handle))),
        ("efficiency direction", Some(Duration::from_secs(120)), Box::new(|| efficiency(&handle))),
        ("search property suite", Some(Duration::from_secs(120)), Box::new(|| search_properties(&world, &handle))),
        ("uniqueness audit equivalence", Some(Duration::from_secs(30)), Box::new(|| uniqueness(&world, &handle))),
        ("rejection sampling statistics", Some(Duration::from_secs(30)), Box::new(|| rejection_statistics(&world, &handle))),
        ("checkpoint equivalence", None, Box::new(|| checkpoint_equivalence(&handle))),
    ];

    let mut failed = 0;
    for (name, limit, check) in &checks {
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = started.elapsed();
        let result = match (result, limit) {
            (Ok(_), Some(l)) if elapsed > *l => Err(format!("took {elapsed:.1?}, limit {l:?}")),
            (r, _) => r,
        };
        match result {
            Ok(detail) => println!("PASS {name} ({:.2}s): {detail}", elapsed.as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("FAIL {name} ({:.2}s): {why}", elapsed.as_secs_f64());
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
