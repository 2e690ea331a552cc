//! Serves a simulated mixture world over the line-delimited JSON oracle
//! protocol on stdin/stdout.
//!
//! ```text
//! lforge-sim-oracle [--world desk|paper|<world.json>] [--fault <kind>:<n>]
//! ```
//!
//! Fault kinds act on the n-th evaluate request (0-based): `truncate` writes
//! half a response and exits, `stall` stops answering, `wrong-id` echoes a
//! different id, `garbage` answers with a non-JSON line.

use std::io::{self, BufRead, Write};
use std::process::ExitCode;
use std::sync::Arc;

use clap::Parser;
use lforge_core::oracle::external::PROTOCOL_VERSION;
use lforge_core::oracle::{MixtureWorld, Preset};
use lforge_core::LatentVector;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "lforge-sim-oracle", about = "Simulated oracle over stdin/stdout")]
struct Args {
    #[arg(long, default_value = "desk")]
    world: String,
    #[arg(long)]
    fault: Option<String>,
}

#[derive(Clone, Copy, PartialEq)]
enum Fault {
    Truncate,
    Stall,
    WrongId,
    Garbage,
}

fn parse_fault(s: &str) -> Option<(Fault, u64)> {
    let (kind, n) = s.split_once(':')?;
    let kind = match kind {
        "truncate" => Fault::Truncate,
        "stall" => Fault::Stall,
        "wrong-id" => Fault::WrongId,
        "garbage" => Fault::Garbage,
        _ => return None,
    };
    Some((kind, n.parse().ok()?))
}

fn load_world(spec: &str) -> Result<Arc<MixtureWorld>, String> {
    match Preset::parse(spec) {
        Some(p) => p.world().map_err(|e| e.to_string()),
        None => {
            let text = std::fs::read_to_string(spec).map_err(|e| format!("{spec}: {e}"))?;
            MixtureWorld::from_json(&text).map(Arc::new).map_err(|e| e.to_string())
        }
    }
}

fn answer(world: &MixtureWorld, request: &Value) -> Value {
    let id = request.get("id").cloned().unwrap_or(Value::Null);
    let fail = |msg: String| json!({"id": id, "ok": false, "error": msg});
    if !id.is_u64() {
        return fail("request id must be an unsigned integer".into());
    }
    match request.get("op").and_then(Value::as_str) {
        Some("hello") => json!({
            "id": id,
            "ok": true,
            "version": PROTOCOL_VERSION,
            "dim": world.space().dim(),
            "embedding_dim": world.embedding_dim(),
            "labels": world.groups().iter().map(|g| g.as_str()).collect::<Vec<_>>(),
        }),
        Some("evaluate") => {
            let space = request.get("space").and_then(Value::as_str);
            if space != Some(world.space().tag().as_str()) {
                return fail(format!("this world serves space {}", world.space().tag()));
            }
            let Some(latent) = request.get("latent").and_then(Value::as_array) else {
                return fail("latent must be an array".into());
            };
            let values: Option<Vec<f64>> = latent.iter().map(Value::as_f64).collect();
            let Some(values) = values else {
                return fail("latent must hold numbers".into());
            };
            let v = match LatentVector::from_f64(world.space(), &values) {
                Ok(v) => v,
                Err(e) => return fail(e.to_string()),
            };
            let verdict = world.verdict(&v);
            json!({
                "id": id,
                "ok": true,
                "face": verdict.face_detected(),
                "label": verdict.label().map(|l| l.as_str()),
                "embedding": verdict.embedding(),
            })
        }
        Some(other) => fail(format!("unknown op {other:?}")),
        None => fail("request lacks op".into()),
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    let fault = match args.fault.as_deref().map(parse_fault) {
        None => None,
        Some(Some(f)) => Some(f),
        Some(None) => {
            eprintln!("lforge-sim-oracle: bad --fault; expected <truncate|stall|wrong-id|garbage>:<n>");
            return ExitCode::from(64);
        }
    };
    let world = match load_world(&args.world) {
        Ok(w) => w,
        Err(e) => {
            eprintln!("lforge-sim-oracle: {e}");
            return ExitCode::from(65);
        }
    };

    let stdin = io::stdin();
    let mut stdout = io::stdout().lock();
    let mut evaluations = 0u64;
    for line in stdin.lock().lines() {
        let Ok(line) = line else { break };
        let mut response = match serde_json::from_str::<Value>(&line) {
            Ok(request) => answer(&world, &request),
            Err(e) => json!({"id": null, "ok": false, "error": format!("malformed request: {e}")}),
        };

        let is_eval = response.get("face").is_some();
        let mut text = response.to_string();
        if let (Some((kind, n)), true) = (fault, is_eval) {
            if evaluations == n {
                match kind {
                    Fault::Truncate => {
                        let _ = stdout.write_all(&text.as_bytes()[..text.len() / 2]);
                        let _ = stdout.flush();
                        return ExitCode::SUCCESS;
                    }
                    Fault::Stall => loop {
                        std::thread::park();
                    },
                    Fault::WrongId => {
                        response["id"] = json!(response["id"].as_u64().unwrap_or(0) + 1000);
                        text = response.to_string();
                    }
                    Fault::Garbage => text = "garbage".into(),
                }
            }
        }
        if is_eval {
            evaluations += 1;
        }
        if writeln!(stdout, "{text}").and_then(|_| stdout.flush()).is_err() {
            break;
        }
    }
    ExitCode::SUCCESS
}
