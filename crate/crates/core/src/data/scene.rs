//! Trajectory dataset files: whitespace text, one observation per line
//! as `frame-id agent-id x y` (meters). Annotation stride is
//! auto-detected and collapsed to a contiguous frame index.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

#[derive(Debug)]
pub enum DataError {
    Io(std::io::Error),
    MalformedLine {
        path: String,
        line_no: usize,
        line: String,
    },
    DuplicateRecord {
        path: String,
        frame: i64,
        agent: i64,
    },
    EmptyFile {
        path: String,
    },
    UnknownSubset {
        name: String,
        available: Vec<String>,
    },
    BadSpec(String),
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Io(e) => write!(f, "data io: {e}"),
            DataError::MalformedLine { path, line_no, line } => {
                write!(f, "malformed line {line_no} in {path}: {line}")
            }
            DataError::DuplicateRecord { path, frame, agent } => {
                write!(f, "duplicate (frame {frame}, agent {agent}) in {path}")
            }
            DataError::EmptyFile { path } => write!(f, "no observations in {path}"),
            DataError::UnknownSubset { name, available } => {
                write!(f, "unknown subset {name}; available: {}", available.join(", "))
            }
            DataError::BadSpec(m) => write!(f, "bad scene spec: {m}"),
        }
    }
}

impl std::error::Error for DataError {}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io(e)
    }
}

/// A timestamped set of agent positions on a gap-free frame grid.
#[derive(Debug, Clone)]
pub struct Scene {
    pub name: String,
    pub dt: f64,
    /// Index `i` corresponds to raw frame id `first_frame + i * stride`.
    pub frames: Vec<BTreeMap<i64, [f64; 2]>>,
    pub first_frame: i64,
    pub stride: i64,
}

impl Scene {
    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    /// Agents observed anywhere in the scene, ascending.
    pub fn agent_ids(&self) -> Vec<i64> {
        let mut ids: Vec<i64> = self
            .frames
            .iter()
            .flat_map(|f| f.keys().copied())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Render back to the input text format, reproducing original frame ids.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (idx, frame) in self.frames.iter().enumerate() {
            let fid = self.first_frame + idx as i64 * self.stride;
            for (agent, pos) in frame {
                out.push_str(&format!("{fid} {agent} {} {}\n", pos[0], pos[1]));
            }
        }
        out
    }
}

pub fn parse_dataset_file(path: &Path, dt: f64) -> Result<Scene, DataError> {
    let text = fs::read_to_string(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scene".to_string());
    parse_dataset_text(&text, &name, dt, &path.display().to_string())
}

pub fn parse_dataset_text(
    text: &str,
    name: &str,
    dt: f64,
    path_label: &str,
) -> Result<Scene, DataError> {
    let mut records: Vec<(i64, i64, f64, f64)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let malformed = || DataError::MalformedLine {
            path: path_label.to_string(),
            line_no: idx + 1,
            line: raw.to_string(),
        };
        let mut fields = line.split_whitespace();
        let next_f64 = |fields: &mut std::str::SplitWhitespace| -> Result<f64, DataError> {
            fields
                .next()
                .and_then(|v| v.parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(malformed)
        };
        let frame = next_f64(&mut fields)?;
        let agent = next_f64(&mut fields)?;
        let x = next_f64(&mut fields)?;
        let y = next_f64(&mut fields)?;
        // Frame and agent ids must be integral, even if written as floats.
        if frame.fract() != 0.0 || agent.fract() != 0.0 {
            return Err(malformed());
        }
        records.push((frame as i64, agent as i64, x, y));
    }
    if records.is_empty() {
        return Err(DataError::EmptyFile {
            path: path_label.to_string(),
        });
    }

    let mut frame_ids: Vec<i64> = records.iter().map(|r| r.0).collect();
    frame_ids.sort_unstable();
    frame_ids.dedup();
    let first = frame_ids[0];
    let stride = frame_ids
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(0i64, gcd)
        .max(1);

    let last = *frame_ids.last().unwrap();
    let n = ((last - first) / stride + 1) as usize;
    let mut frames = vec![BTreeMap::new(); n];
    for (frame, agent, x, y) in records {
        let idx = ((frame - first) / stride) as usize;
        if frames[idx].insert(agent, [x, y]).is_some() {
            return Err(DataError::DuplicateRecord {
                path: path_label.to_string(),
                frame,
                agent,
            });
        }
    }
    Ok(Scene {
        name: name.to_string(),
        dt,
        frames,
        first_frame: first,
        stride,
    })
}

/// Load every `*.txt` file in a directory as a scene, sorted by file name.
pub fn load_dataset_dir(dir: &Path, dt: f64) -> Result<Vec<Scene>, DataError> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "txt").unwrap_or(false))
        .collect();
    paths.sort();
    paths.iter().map(|p| parse_dataset_file(p, dt)).collect()
}

fn gcd(a: i64, b: i64) -> i64 {
    let (mut a, mut b) = (a.abs(), b.abs());
    while b != 0 {
        let t = b;
        b = a % b;
        a = t;
    }
    a
}
