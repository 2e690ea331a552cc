//! Manifest and checkpoint files, plus the bulk latent sidecar.
//!
//! Text layout, one item per line, space-separated `key=value` fields:
//!
//! ```text
//! lforge-manifest version=1 fingerprint=<hex> oracle_id=<id> rng_seed=<u64> space=Z dim=32
//! group name=Asian quota=50 count=50 seeds=1 calls=58 status=complete
//! record id=0 group=Asian seed=0 parent=- depth=0 call=5 latent=1.23456789e0,...
//! variant id=0 latent=...
//! ```
//!
//! Latent coordinates are written with nine significant digits, enough to
//! round-trip `f32` exactly. Checkpoints use the same layout under an
//! `lforge-checkpoint` header, and their group lines add the frontier digest
//! of the group's last chain.
//!
//! The sidecar is `LFORGE1` followed by a little-endian `u32` dimension, a
//! `u64` row count and the rows as little-endian `f32`.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::model::{
    DatasetManifest, GroupLabel, GroupStatus, GroupSummary, IdentityRecord, LatentSpaceSpec,
    LatentVector, SpaceTag,
};
use crate::search::CampaignState;

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST_MAGIC: &str = "lforge-manifest";
const CHECKPOINT_MAGIC: &str = "lforge-checkpoint";
pub const SIDECAR_MAGIC: &[u8; 7] = b"LFORGE1";

pub fn format_f32(x: f32) -> String {
    format!("{x:.8e}")
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '%' => out.push_str("%25"),
            ' ' => out.push_str("%20"),
            '=' => out.push_str("%3D"),
            '\n' => out.push_str("%0A"),
            '\r' => out.push_str("%0D"),
            '\t' => out.push_str("%09"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Option<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '%' {
            let hex: String = chars.by_ref().take(2).collect();
            let byte = u8::from_str_radix(&hex, 16).ok()?;
            out.push(byte as char);
        } else {
            out.push(c);
        }
    }
    Some(out)
}

fn write_latent(out: &mut String, v: &LatentVector) {
    for (i, x) in v.values().iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&format_f32(*x));
    }
}

fn header(magic: &str, fingerprint: &str, oracle_id: &str, seed: u64, space: LatentSpaceSpec) -> String {
    format!(
        "{magic} version={FORMAT_VERSION} fingerprint={} oracle_id={} rng_seed={seed} space={} dim={}\n",
        escape(fingerprint),
        escape(oracle_id),
        space.tag(),
        space.dim()
    )
}

fn group_line(g: &GroupSummary) -> String {
    format!(
        "group name={} quota={} count={} seeds={} calls={} status={}",
        g.group,
        g.quota,
        g.count,
        g.seeds_used,
        g.calls_used,
        g.status.as_str()
    )
}

fn record_line(out: &mut String, r: &IdentityRecord) {
    out.push_str(&format!(
        "record id={} group={} seed={} parent={} depth={} call={} latent=",
        r.identity_id,
        r.group,
        r.seed_id,
        r.parent_id.map_or("-".to_string(), |p| p.to_string()),
        r.depth,
        r.call_index
    ));
    write_latent(out, &r.latent);
    out.push('\n');
}

fn body(out: &mut String, m: &DatasetManifest, extra: &dyn Fn(usize) -> String) {
    for (i, g) in m.groups.iter().enumerate() {
        out.push_str(&group_line(g));
        out.push_str(&extra(i));
        out.push('\n');
    }
    for r in &m.records {
        record_line(out, r);
    }
    for (id, variants) in &m.variant_latents {
        for v in variants {
            out.push_str(&format!("variant id={id} latent="));
            write_latent(out, v);
            out.push('\n');
        }
    }
}

pub fn encode_manifest(m: &DatasetManifest) -> String {
    let mut out = header(MANIFEST_MAGIC, &m.config_fingerprint, &m.oracle_id, m.rng_seed, m.space);
    body(&mut out, m, &|_| String::new());
    out
}

pub fn encode_checkpoint(state: &CampaignState) -> String {
    let m = state.to_manifest();
    let mut out = header(CHECKPOINT_MAGIC, &m.config_fingerprint, &m.oracle_id, m.rng_seed, m.space);
    body(&mut out, &m, &|i| {
        let g = &state.groups[i];
        let mut s = format!(" frontier={}", escape(&g.frontier_digest));
        if let Some(f) = &g.failure {
            s.push_str(&format!(" failure={}", escape(f)));
        }
        s
    });
    out
}

/// One parsed line: its kind and `key=value` fields with 1-based columns.
struct Line<'a> {
    number: usize,
    kind: &'a str,
    fields: Vec<(&'a str, &'a str, usize)>,
}

impl<'a> Line<'a> {
    fn parse(number: usize, text: &'a str) -> Result<Self> {
        let mut fields = Vec::new();
        let mut kind = None;
        let mut col = 1;
        for token in text.split(' ') {
            if token.is_empty() {
                return Err(Error::parse(number, col, "empty field (double space?)"));
            }
            if kind.is_none() {
                kind = Some(token);
            } else {
                let (k, v) = token
                    .split_once('=')
                    .ok_or_else(|| Error::parse(number, col, format!("expected key=value, got {token:?}")))?;
                fields.push((k, v, col + k.len() + 1));
            }
            col += token.len() + 1;
        }
        Ok(Self {
            number,
            kind: kind.unwrap_or(""),
            fields,
        })
    }

    fn raw(&self, key: &str) -> Result<(&'a str, usize)> {
        self.fields
            .iter()
            .find(|(k, _, _)| *k == key)
            .map(|(_, v, c)| (*v, *c))
            .ok_or_else(|| Error::parse(self.number, 1, format!("{} line lacks {key}", self.kind)))
    }

    fn opt(&self, key: &str) -> Option<(&'a str, usize)> {
        self.fields.iter().find(|(k, _, _)| *k == key).map(|(_, v, c)| (*v, *c))
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let (v, col) = self.raw(key)?;
        v.parse()
            .map_err(|_| Error::parse(self.number, col, format!("bad value {v:?} for {key}")))
    }

    fn text(&self, key: &str) -> Result<String> {
        let (v, col) = self.raw(key)?;
        unescape(v).ok_or_else(|| Error::parse(self.number, col, format!("bad escape in {key}")))
    }

    fn label(&self, key: &str) -> Result<GroupLabel> {
        let (v, col) = self.raw(key)?;
        GroupLabel::new(v).map_err(|e| Error::parse(self.number, col, e.to_string()))
    }

    fn latent(&self, space: LatentSpaceSpec) -> Result<LatentVector> {
        let (v, col) = self.raw("latent")?;
        let mut values = Vec::with_capacity(space.dim());
        let mut c = col;
        for part in v.split(',') {
            let x: f32 = part
                .parse()
                .map_err(|_| Error::parse(self.number, c, format!("bad latent value {part:?}")))?;
            values.push(x);
            c += part.len() + 1;
        }
        LatentVector::new(space, values).map_err(|e| Error::parse(self.number, col, e.to_string()))
    }
}

struct Decoded {
    manifest: DatasetManifest,
    digests: Vec<String>,
    failures: Vec<Option<String>>,
}

fn decode(text: &str, magic: &str) -> Result<Decoded> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (n, first) = lines
        .next()
        .ok_or_else(|| Error::parse(1, 1, "empty file"))?;
    let head = Line::parse(n, first)?;
    if head.kind != magic {
        return Err(Error::parse(n, 1, format!("expected {magic} header, got {:?}", head.kind)));
    }
    let version: u32 = head.get("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::parse(n, 1, format!("unsupported format version {version}")));
    }
    let (tag_text, tag_col) = head.raw("space")?;
    let tag = SpaceTag::parse(tag_text).map_err(|e| Error::parse(n, tag_col, e.to_string()))?;
    let space = LatentSpaceSpec::new(tag, head.get("dim")?)
        .map_err(|e| Error::parse(n, 1, e.to_string()))?;
    let mut m = DatasetManifest::empty(
        head.text("fingerprint")?,
        head.text("oracle_id")?,
        head.get("rng_seed")?,
        space,
    );
    let mut digests = Vec::new();
    let mut failures = Vec::new();

    for (n, text) in lines {
        if text.is_empty() {
            continue;
        }
        let line = Line::parse(n, text)?;
        match line.kind {
            "group" => {
                let (status_text, status_col) = line.raw("status")?;
                let status = GroupStatus::parse(status_text)
                    .map_err(|e| Error::parse(n, status_col, e.to_string()))?;
                m.groups.push(GroupSummary {
                    group: line.label("name")?,
                    quota: line.get("quota")?,
                    count: line.get("count")?,
                    seeds_used: line.get("seeds")?,
                    calls_used: line.get("calls")?,
                    status,
                });
                digests.push(match line.opt("frontier") {
                    Some(_) => line.text("frontier")?,
                    None => String::new(),
                });
                failures.push(match line.opt("failure") {
                    Some(_) => Some(line.text("failure")?),
                    None => None,
                });
            }
            "record" => {
                let (parent_text, parent_col) = line.raw("parent")?;
                let parent_id = if parent_text == "-" {
                    None
                } else {
                    Some(parent_text.parse().map_err(|_| {
                        Error::parse(n, parent_col, format!("bad parent {parent_text:?}"))
                    })?)
                };
                m.records.push(IdentityRecord {
                    identity_id: line.get("id")?,
                    group: line.label("group")?,
                    latent: line.latent(space)?,
                    seed_id: line.get("seed")?,
                    parent_id,
                    depth: line.get("depth")?,
                    call_index: line.get("call")?,
                });
            }
            "variant" => {
                let id: u64 = line.get("id")?;
                let v = line.latent(space)?;
                m.variant_latents.entry(id).or_default().push(v);
            }
            other => return Err(Error::parse(n, 1, format!("unknown line kind {other:?}"))),
        }
    }
    Ok(Decoded {
        manifest: m,
        digests,
        failures,
    })
}

pub fn decode_manifest(text: &str) -> Result<DatasetManifest> {
    Ok(decode(text, MANIFEST_MAGIC)?.manifest)
}

pub fn decode_checkpoint(text: &str) -> Result<CampaignState> {
    let d = decode(text, CHECKPOINT_MAGIC)?;
    let mut state = CampaignState::from_manifest(&d.manifest, &d.digests)?;
    for (g, f) in state.groups.iter_mut().zip(d.failures) {
        g.failure = f;
    }
    Ok(state)
}

/// Writes base latents of `records`, one row each.
pub fn write_sidecar<W: Write>(
    mut w: W,
    space: LatentSpaceSpec,
    records: &[IdentityRecord],
) -> Result<()> {
    let dim = u32::try_from(space.dim()).map_err(|_| Error::invalid("dimension exceeds u32"))?;
    w.write_all(SIDECAR_MAGIC)?;
    w.write_all(&dim.to_le_bytes())?;
    w.write_all(&(records.len() as u64).to_le_bytes())?;
    for r in records {
        if r.latent.space() != space {
            return Err(Error::invalid("record latent differs from sidecar space"));
        }
        for x in r.latent.values() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Returns (dim, rows).
pub fn read_sidecar<R: Read>(mut r: R) -> Result<(usize, Vec<Vec<f32>>)> {
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic)?;
    if &magic != SIDECAR_MAGIC {
        return Err(Error::invalid("not an LFORGE1 sidecar"));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let dim = u32::from_le_bytes(b4) as usize;
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let rows = u64::from_le_bytes(b8) as usize;
    let mut out = Vec::with_capacity(rows);
    for _ in 0..rows {
        let mut row = Vec::with_capacity(dim);
        for _ in 0..dim {
            r.read_exact(&mut b4)?;
            row.push(f32::from_le_bytes(b4));
        }
        out.push(row);
    }
    Ok((dim, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_manifest(values: Vec<f32>) -> DatasetManifest {
        let space = LatentSpaceSpec::new(SpaceTag::W, values.len()).unwrap();
        let g = GroupLabel::new("Asian").unwrap();
        let mut m = DatasetManifest::empty("abc123", "sim-xyz with space", 42, space);
        m.groups.push(GroupSummary {
            group: g.clone(),
            quota: 2,
            count: 2,
            seeds_used: 1,
            calls_used: 9,
            status: GroupStatus::Complete,
        });
        let latent = LatentVector::new(space, values.clone()).unwrap();
        let rev: Vec<f32> = values.iter().rev().cloned().collect();
        m.records.push(IdentityRecord {
            identity_id: 0,
            group: g.clone(),
            latent: latent.clone(),
            seed_id: 0,
            parent_id: None,
            depth: 0,
            call_index: 3,
        });
        m.records.push(IdentityRecord {
            identity_id: 1,
            group: g,
            latent: LatentVector::new(space, rev).unwrap(),
            seed_id: 0,
            parent_id: Some(0),
            depth: 1,
            call_index: 5,
        });
        m.variant_latents.insert(1, vec![latent.clone(), latent]);
        m
    }

    proptest! {
        #[test]
        fn manifest_round_trips(values in proptest::collection::vec(
            any::<f32>().prop_filter("finite", |x| x.is_finite()), 1..24)) {
            let m = sample_manifest(values);
            let text = encode_manifest(&m);
            prop_assert_eq!(decode_manifest(&text).unwrap(), m);
        }
    }

    #[test]
    #[allow(clippy::excessive_precision)]
    fn float_format_has_nine_significant_digits() {
        assert_eq!(format_f32(1.0), "1.00000000e0");
        assert_eq!(format_f32(-0.123456789), "-1.23456791e-1");
    }

    #[test]
    fn parse_errors_carry_position() {
        let m = sample_manifest(vec![1.0, 2.0]);
        let text = encode_manifest(&m).replace("depth=1", "depth=x");
        match decode_manifest(&text).unwrap_err() {
            Error::Parse { line, column, .. } => {
                assert_eq!(line, 4);
                assert!(column > 1);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(decode_manifest("").is_err());
        assert!(decode_manifest("lforge-checkpoint version=1").is_err());
    }

    #[test]
    fn sidecar_round_trip() {
        let m = sample_manifest(vec![0.5, -1.25, 3.0]);
        let mut buf = Vec::new();
        write_sidecar(&mut buf, m.space, &m.records).unwrap();
        assert_eq!(&buf[..7], b"LFORGE1");
        assert_eq!(buf.len(), 7 + 4 + 8 + 2 * 3 * 4);
        let (dim, rows) = read_sidecar(&buf[..]).unwrap();
        assert_eq!(dim, 3);
        assert_eq!(rows[1], vec![3.0, -1.25, 0.5]);
    }

    #[test]
    fn escaping_round_trips() {
        for s in ["plain", "a b=c%d", "x\ny"] {
            assert_eq!(unescape(&escape(s)).unwrap(), s);
            assert!(!escape(s).contains(' '));
        }
    }
}
