//! Self-describing checkpoint container.
//!
//! Layout: a UTF-8 text header terminated by a line reading `binary`,
//! followed by the raw little-endian f32 parameter arrays concatenated
//! in header order. Round-trips are bit-exact.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::params::ParamSet;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug)]
pub enum CheckpointError {
    Io(std::io::Error),
    Malformed(String),
    VersionMismatch { found: u32 },
    ParamMismatch { name: String, detail: String },
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io(e) => write!(f, "checkpoint io: {e}"),
            CheckpointError::Malformed(m) => write!(f, "malformed checkpoint: {m}"),
            CheckpointError::VersionMismatch { found } => {
                write!(f, "unsupported checkpoint version {found}")
            }
            CheckpointError::ParamMismatch { name, detail } => {
                write!(f, "parameter {name}: {detail}")
            }
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<std::io::Error> for CheckpointError {
    fn from(e: std::io::Error) -> Self {
        CheckpointError::Io(e)
    }
}

/// Everything a checkpoint carries besides parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub version: u32,
    pub seed: u64,
    /// Resolved configuration, one canonical `key=value` per entry.
    pub config: Vec<String>,
}

pub fn save(
    path: &Path,
    params: &ParamSet,
    seed: u64,
    config_lines: &[String],
) -> Result<(), CheckpointError> {
    let mut header = String::new();
    header.push_str(&format!("trajgen-checkpoint {CHECKPOINT_FORMAT_VERSION}\n"));
    header.push_str(&format!("seed {seed}\n"));
    header.push_str(&format!("config {}\n", config_lines.len()));
    for line in config_lines {
        header.push_str(line);
        header.push('\n');
    }
    header.push_str(&format!("params {}\n", params.len()));
    for p in params.iter() {
        header.push_str(&format!("{} {} {}\n", p.name, p.rows, p.cols));
    }
    header.push_str("binary\n");

    let mut bytes = header.into_bytes();
    for p in params.iter() {
        for v in &p.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub struct LoadedCheckpoint {
    pub meta: CheckpointMeta,
    /// (name, rows, cols, values) in header order.
    pub params: Vec<(String, usize, usize, Vec<f32>)>,
}

pub fn load(path: &Path) -> Result<LoadedCheckpoint, CheckpointError> {
    let bytes = fs::read(path)?;
    let marker = b"\nbinary\n";
    let split = find(&bytes, marker)
        .ok_or_else(|| CheckpointError::Malformed("missing binary marker".into()))?;
    let header = std::str::from_utf8(&bytes[..split])
        .map_err(|_| CheckpointError::Malformed("header is not utf-8".into()))?;
    let mut payload = &bytes[split + marker.len()..];

    let mut lines = header.lines();
    let first = lines
        .next()
        .ok_or_else(|| CheckpointError::Malformed("empty header".into()))?;
    let version: u32 = first
        .strip_prefix("trajgen-checkpoint ")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| CheckpointError::Malformed(format!("bad magic line: {first}")))?;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch { found: version });
    }
    let seed: u64 = expect_field(lines.next(), "seed")?;
    let n_config: usize = expect_field(lines.next(), "config")?;
    let mut config = Vec::with_capacity(n_config);
    for _ in 0..n_config {
        config.push(
            lines
                .next()
                .ok_or_else(|| CheckpointError::Malformed("truncated config block".into()))?
                .to_string(),
        );
    }
    let n_params: usize = expect_field(lines.next(), "params")?;
    let mut shapes = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let line = lines
            .next()
            .ok_or_else(|| CheckpointError::Malformed("truncated param block".into()))?;
        let mut it = line.split_whitespace();
        let name = it
            .next()
            .ok_or_else(|| CheckpointError::Malformed("empty param line".into()))?
            .to_string();
        let rows: usize = it
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| CheckpointError::Malformed(format!("bad shape: {line}")))?;
        let cols: usize = it
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| CheckpointError::Malformed(format!("bad shape: {line}")))?;
        shapes.push((name, rows, cols));
    }

    let mut params = Vec::with_capacity(n_params);
    for (name, rows, cols) in shapes {
        let n = rows * cols;
        if payload.len() < n * 4 {
            return Err(CheckpointError::Malformed(format!(
                "payload truncated at parameter {name}"
            )));
        }
        let mut values = Vec::with_capacity(n);
        for chunk in payload[..n * 4].chunks_exact(4) {
            values.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        payload = &payload[n * 4..];
        params.push((name, rows, cols, values));
    }
    if !payload.is_empty() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes after parameters",
            payload.len()
        )));
    }
    Ok(LoadedCheckpoint {
        meta: CheckpointMeta {
            version,
            seed,
            config,
        },
        params,
    })
}

/// Copy loaded values into an existing parameter set, validating names
/// and shapes in declaration order.
pub fn restore_into(
    params: &mut ParamSet,
    loaded: &LoadedCheckpoint,
) -> Result<(), CheckpointError> {
    if params.len() != loaded.params.len() {
        return Err(CheckpointError::Malformed(format!(
            "parameter count mismatch: model has {}, checkpoint has {}",
            params.len(),
            loaded.params.len()
        )));
    }
    for (p, (name, rows, cols, values)) in params.iter_mut().zip(&loaded.params) {
        if &p.name != name {
            return Err(CheckpointError::ParamMismatch {
                name: name.clone(),
                detail: format!("expected {}", p.name),
            });
        }
        if p.rows != *rows || p.cols != *cols {
            return Err(CheckpointError::ParamMismatch {
                name: name.clone(),
                detail: format!("shape {rows}x{cols}, expected {}x{}", p.rows, p.cols),
            });
        }
        p.values.copy_from_slice(values);
    }
    Ok(())
}

fn expect_field<T: std::str::FromStr>(
    line: Option<&str>,
    key: &str,
) -> Result<T, CheckpointError> {
    let line = line.ok_or_else(|| CheckpointError::Malformed(format!("missing {key} line")))?;
    line.strip_prefix(key)
        .map(str::trim)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| CheckpointError::Malformed(format!("bad {key} line: {line}")))
}

fn find(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack
        .windows(needle.len())
        .position(|w| w == needle)
}
