//! Self-describing binary checkpoints: an eight-byte magic string, a
//! length-prefixed textual header carrying the architecture, epoch, rng
//! state, and parameter table, then every parameter as little-endian 64-bit
//! reals. Loading rebuilds the network through the normal constructor and
//! overwrites its values, so layout drift between writer and reader is an
//! error, never a silent misalignment.

use crate::blocks::BlockKind;
use crate::network::{GroupSpec, Network, NetworkSpec, Topology};
use crate::rng::{RngState, SeededRng};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"SSPNLAB1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

fn bad(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Malformed(msg.into())
}

/// A trained (or in-progress) model plus everything needed to resume.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub network: Network,
    pub epoch: usize,
    pub rng: RngState,
    pub config_hash: String,
}

/// `key = value` lines describing a network spec; also embedded in run
/// configuration files.
pub fn encode_spec(spec: &NetworkSpec) -> String {
    let mut out = String::new();
    out.push_str(&format!("kind = {}\n", spec.kind.name()));
    match &spec.topology {
        Topology::Image { in_channels, height, width, stem, groups } => {
            out.push_str("topology = image\n");
            out.push_str(&format!("in_channels = {in_channels}\n"));
            out.push_str(&format!("height = {height}\n"));
            out.push_str(&format!("width = {width}\n"));
            let stem_s: Vec<String> =
                stem.iter().map(|(c, s)| format!("{c}x{s}")).collect();
            out.push_str(&format!("stem = {}\n", stem_s.join(",")));
            let group_s: Vec<String> =
                groups.iter().map(|g| format!("{}x{}", g.blocks, g.channels)).collect();
            out.push_str(&format!("groups = {}\n", group_s.join(",")));
        }
        Topology::Vector { input_dim, width, blocks } => {
            out.push_str("topology = vector\n");
            out.push_str(&format!("input_dim = {input_dim}\n"));
            out.push_str(&format!("width = {width}\n"));
            out.push_str(&format!("blocks = {blocks}\n"));
        }
    }
    out.push_str(&format!("classes = {}\n", spec.classes));
    out.push_str(&format!("alpha21 = {}\n", spec.alpha21));
    out
}

/// Parse the `key = value` lines produced by [`encode_spec`]. Unknown keys
/// are rejected so typos surface instead of silently defaulting.
pub fn decode_spec(text: &str) -> Result<NetworkSpec, String> {
    let mut map = std::collections::BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("expected `key = value`, got {line:?}"))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    decode_spec_map(&mut map).and_then(|spec| {
        if let Some(k) = map.keys().next() {
            return Err(format!("unknown spec key {k:?}"));
        }
        Ok(spec)
    })
}

/// Consume spec keys out of `map` (shared with the run-config parser, which
/// holds extra keys of its own).
pub fn decode_spec_map(
    map: &mut std::collections::BTreeMap<String, String>,
) -> Result<NetworkSpec, String> {
    let mut take = |k: &str| map.remove(k).ok_or_else(|| format!("missing spec key {k:?}"));
    let kind_s = take("kind")?;
    let kind = BlockKind::parse(&kind_s).ok_or_else(|| format!("unknown kind {kind_s:?}"))?;
    let topology = match take("topology")?.as_str() {
        "image" => {
            let pairs = |s: &str, what: &str| -> Result<Vec<(usize, usize)>, String> {
                if s.is_empty() {
                    return Ok(vec![]);
                }
                s.split(',')
                    .map(|p| {
                        let (a, b) = p
                            .split_once('x')
                            .ok_or_else(|| format!("bad {what} entry {p:?}"))?;
                        Ok((
                            a.trim().parse().map_err(|_| format!("bad {what} entry {p:?}"))?,
                            b.trim().parse().map_err(|_| format!("bad {what} entry {p:?}"))?,
                        ))
                    })
                    .collect()
            };
            Topology::Image {
                in_channels: parse_num(&take("in_channels")?, "in_channels")?,
                height: parse_num(&take("height")?, "height")?,
                width: parse_num(&take("width")?, "width")?,
                stem: pairs(&take("stem")?, "stem")?,
                groups: pairs(&take("groups")?, "groups")?
                    .into_iter()
                    .map(|(blocks, channels)| GroupSpec { blocks, channels })
                    .collect(),
            }
        }
        "vector" => Topology::Vector {
            input_dim: parse_num(&take("input_dim")?, "input_dim")?,
            width: parse_num(&take("width")?, "width")?,
            blocks: parse_num(&take("blocks")?, "blocks")?,
        },
        other => return Err(format!("unknown topology {other:?}")),
    };
    let classes = parse_num(&take("classes")?, "classes")?;
    let alpha21: f64 =
        take("alpha21")?.parse().map_err(|_| "alpha21 must be a real number".to_string())?;
    Ok(NetworkSpec { kind, topology, classes, alpha21 })
}

fn parse_num(s: &str, what: &str) -> Result<usize, String> {
    s.parse().map_err(|_| format!("{what} must be a nonnegative integer, got {s:?}"))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<Vec<u8>, CheckpointError> {
    if s.len() % 2 != 0 {
        return Err(bad("odd-length hex string"));
    }
    (0..s.len() / 2)
        .map(|i| {
            u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| bad("invalid hex digit"))
        })
        .collect()
}

/// Write a checkpoint to `path`.
pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let mut header = String::new();
    header.push_str(&encode_spec(&ckpt.network.spec));
    header.push_str(&format!("epoch = {}\n", ckpt.epoch));
    header.push_str(&format!("config_hash = {}\n", ckpt.config_hash));
    header.push_str(&format!(
        "rng = {} {} {}\n",
        hex(&ckpt.rng.seed),
        ckpt.rng.stream,
        ckpt.rng.word_pos
    ));
    for p in &ckpt.network.params {
        let dims: Vec<String> = p.value.shape.iter().map(|d| d.to_string()).collect();
        header.push_str(&format!("param = {} {}\n", p.name, dims.join("x")));
    }

    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(MAGIC)?;
    file.write_all(&(header.len() as u64).to_le_bytes())?;
    file.write_all(header.as_bytes())?;
    for p in &ckpt.network.params {
        for &v in &p.value.data {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

/// Read a checkpoint back; parameter names and shapes must match what the
/// current code builds for the embedded spec.
pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header = vec![0u8; header_len];
    file.read_exact(&mut header)?;
    let header = String::from_utf8(header).map_err(|_| bad("header is not UTF-8"))?;

    let mut spec_lines = String::new();
    let mut epoch = None;
    let mut config_hash = None;
    let mut rng = None;
    let mut param_table: Vec<(String, Vec<usize>)> = Vec::new();
    for line in header.lines() {
        let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("bad line {line:?}")))?;
        let (k, v) = (k.trim(), v.trim());
        match k {
            "epoch" => epoch = Some(v.parse().map_err(|_| bad("bad epoch"))?),
            "config_hash" => config_hash = Some(v.to_string()),
            "rng" => {
                let mut parts = v.split_whitespace();
                let seed_hex = parts.next().ok_or_else(|| bad("rng missing seed"))?;
                let seed_vec = unhex(seed_hex)?;
                let seed: [u8; 32] =
                    seed_vec.try_into().map_err(|_| bad("rng seed must be 32 bytes"))?;
                let stream =
                    parts.next().ok_or_else(|| bad("rng missing stream"))?.parse().map_err(
                        |_| bad("bad rng stream"),
                    )?;
                let word_pos =
                    parts.next().ok_or_else(|| bad("rng missing position"))?.parse().map_err(
                        |_| bad("bad rng position"),
                    )?;
                rng = Some(RngState { seed, stream, word_pos });
            }
            "param" => {
                let mut parts = v.split_whitespace();
                let name = parts.next().ok_or_else(|| bad("param missing name"))?.to_string();
                let dims = parts.next().ok_or_else(|| bad("param missing shape"))?;
                let shape: Result<Vec<usize>, _> =
                    dims.split('x').map(|d| d.parse::<usize>()).collect();
                param_table.push((name, shape.map_err(|_| bad("bad param shape"))?));
            }
            _ => {
                spec_lines.push_str(line);
                spec_lines.push('\n');
            }
        }
    }
    let spec = decode_spec(&spec_lines).map_err(bad)?;
    let epoch = epoch.ok_or_else(|| bad("missing epoch"))?;
    let config_hash = config_hash.ok_or_else(|| bad("missing config_hash"))?;
    let rng = rng.ok_or_else(|| bad("missing rng state"))?;

    // rebuild through the ordinary constructor, then overwrite values
    let mut network = Network::init(spec, &mut SeededRng::new(0));
    if network.params.len() != param_table.len() {
        return Err(bad(format!(
            "parameter table length {} does not match the spec's layout {}",
            param_table.len(),
            network.params.len()
        )));
    }
    for (p, (name, shape)) in network.params.iter_mut().zip(&param_table) {
        if &p.name != name || &p.value.shape != shape {
            return Err(bad(format!(
                "parameter {} {:?} does not match the layout's {} {:?}",
                name, shape, p.name, p.value.shape
            )));
        }
        let mut buf = vec![0u8; p.value.numel() * 8];
        file.read_exact(&mut buf)?;
        for (v, chunk) in p.value.data.iter_mut().zip(buf.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("chunks_exact(8)"));
        }
    }
    let mut rest = Vec::new();
    file.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(bad(format!("{} trailing bytes after the parameter data", rest.len())));
    }
    Ok(Checkpoint { network, epoch, rng, config_hash })
}
