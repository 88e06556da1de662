//! Dataset preparation: frame extraction timing, discarding of no-tool
//! frames, timestamp-to-per-frame phase annotation, video-level splits,
//! and the on-disk formats for frame tables, feature stores, split
//! manifests and phase annotations.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::substream;
use crate::NUM_TOOLS;

/// Source video metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoMeta {
    pub video_id: String,
    pub fps: f64,
    pub duration_s: f64,
}

/// Ordered phase transitions, each taking effect at its start time.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseAnnotation {
    transitions: Vec<(usize, f64)>,
}

impl PhaseAnnotation {
    pub fn new(transitions: Vec<(usize, f64)>) -> Result<Self> {
        if transitions.is_empty() {
            return Err(Error::EmptyInput("phase annotation"));
        }
        for w in transitions.windows(2) {
            if w[1].1 <= w[0].1 {
                return Err(Error::InvalidInput(format!(
                    "transition times must be strictly increasing: {} then {}",
                    w[0].1, w[1].1
                )));
            }
        }
        if let Some((p, _)) = transitions.iter().find(|(p, _)| *p >= crate::NUM_PHASES) {
            return Err(Error::InvalidInput(format!("phase id {p} out of range")));
        }
        Ok(PhaseAnnotation { transitions })
    }

    pub fn transitions(&self) -> &[(usize, f64)] {
        &self.transitions
    }

    /// Phase active at `time_s`: the latest transition with start ≤ time
    /// (a frame exactly at a transition belongs to the new phase).
    pub fn phase_at(&self, time_s: f64) -> Option<usize> {
        self.transitions
            .iter()
            .take_while(|(_, t)| *t <= time_s)
            .last()
            .map(|(p, _)| *p)
    }
}

/// One extracted frame with its tool presence bits and optional
/// feature vector and phase label.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub video_id: String,
    pub frame_index: u32,
    pub time_s: f64,
    pub tools: Vec<u8>,
    pub features: Option<Vec<f64>>,
    pub phase: Option<usize>,
}

impl FrameRecord {
    pub fn has_tools(&self) -> bool {
        self.tools.iter().any(|&b| b != 0)
    }
}

/// Dataset partition a video belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    HoldoutTest,
    ExternalTest,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::HoldoutTest => "holdout_test",
            Split::ExternalTest => "external_test",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "holdout_test" => Ok(Split::HoldoutTest),
            "external_test" => Ok(Split::ExternalTest),
            other => Err(Error::InvalidInput(format!("unknown split '{other}'"))),
        }
    }
}

/// Video-level split assignment; splitting is by video, never by frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetSplit {
    map: BTreeMap<String, Split>,
}

impl DatasetSplit {
    pub fn assign(&mut self, video_id: impl Into<String>, split: Split) {
        self.map.insert(video_id.into(), split);
    }

    pub fn split_of(&self, video_id: &str) -> Option<Split> {
        self.map.get(video_id).copied()
    }

    pub fn videos_in(&self, split: Split) -> Vec<&str> {
        self.map
            .iter()
            .filter(|(_, s)| **s == split)
            .map(|(v, _)| v.as_str())
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Split)> {
        self.map.iter().map(|(v, s)| (v.as_str(), *s))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Frame extraction schedule: times k / extraction_fps while < duration.
pub fn extract_frame_times(meta: &VideoMeta, extraction_fps: f64) -> Result<Vec<(u32, f64)>> {
    if !(extraction_fps > 0.0) || extraction_fps > meta.fps {
        return Err(Error::InvalidInput(format!(
            "extraction fps {extraction_fps} must be in (0, source fps {}]",
            meta.fps
        )));
    }
    let mut out = Vec::new();
    let mut k = 0u32;
    loop {
        let t = k as f64 / extraction_fps;
        if t >= meta.duration_s {
            break;
        }
        out.push((k, t));
        k += 1;
    }
    Ok(out)
}

/// Discards ⌈fraction·m⌉ of the m zero-tool frames by seeded uniform
/// sampling without replacement; frames with any tool set are always
/// kept and temporal order is preserved.
pub fn discard_no_tool_frames(
    records: Vec<FrameRecord>,
    fraction: f64,
    seed: u64,
) -> Result<Vec<FrameRecord>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidInput(format!(
            "discard fraction {fraction} outside [0,1]"
        )));
    }
    let zero_tool: Vec<usize> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| !r.has_tools())
        .map(|(i, _)| i)
        .collect();
    let to_remove = (fraction * zero_tool.len() as f64).ceil() as usize;
    let mut rng = substream(seed, "discard-no-tool");
    let mut shuffled = zero_tool;
    shuffled.shuffle(&mut rng);
    let removed: std::collections::HashSet<usize> = shuffled.into_iter().take(to_remove).collect();
    Ok(records
        .into_iter()
        .enumerate()
        .filter(|(i, _)| !removed.contains(i))
        .map(|(_, r)| r)
        .collect())
}

/// Sets each frame's phase from the annotation timeline.
pub fn annotate_phases(
    mut records: Vec<FrameRecord>,
    annotation: &PhaseAnnotation,
) -> Result<Vec<FrameRecord>> {
    for r in &mut records {
        match annotation.phase_at(r.time_s) {
            Some(p) => r.phase = Some(p),
            None => {
                return Err(Error::InvalidInput(format!(
                    "frame at {} s precedes the first phase transition at {} s",
                    r.time_s, annotation.transitions[0].1
                )))
            }
        }
    }
    Ok(records)
}

const FRAME_TABLE_COLUMNS: usize = 3 + NUM_TOOLS + 1;

fn frame_table_header() -> String {
    let mut h = String::from("video_id,frame_index,time_s");
    for i in 0..NUM_TOOLS {
        h.push_str(&format!(",tool_{i:02}"));
    }
    h.push_str(",phase_id");
    h
}

/// Writes the frame table CSV, rows sorted by (video_id, frame_index).
/// Feature vectors are stored separately in the feature store.
pub fn save_frame_table(records: &[FrameRecord], path: &Path) -> Result<()> {
    let mut sorted: Vec<&FrameRecord> = records.iter().collect();
    sorted.sort_by(|a, b| (&a.video_id, a.frame_index).cmp(&(&b.video_id, b.frame_index)));
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", frame_table_header()).map_err(io)?;
    for r in sorted {
        write!(w, "{},{},{}", r.video_id, r.frame_index, r.time_s).map_err(io)?;
        for &b in &r.tools {
            write!(w, ",{b}").map_err(io)?;
        }
        match r.phase {
            Some(p) => writeln!(w, ",{p}").map_err(io)?,
            None => writeln!(w, ",").map_err(io)?,
        }
    }
    w.flush().map_err(io)
}

/// Loads a frame table, rejecting malformed rows with their line number.
pub fn load_frame_table(path: &Path) -> Result<Vec<FrameRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if lineno == 0 {
            if line != frame_table_header() {
                return Err(parse_err(1, format!("unexpected header '{line}'")));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != FRAME_TABLE_COLUMNS {
            return Err(parse_err(
                lineno + 1,
                format!(
                    "expected {FRAME_TABLE_COLUMNS} columns ({NUM_TOOLS} tool columns), got {}",
                    cells.len()
                ),
            ));
        }
        let frame_index: u32 = cells[1]
            .parse()
            .map_err(|_| parse_err(lineno + 1, format!("bad frame index '{}'", cells[1])))?;
        let time_s: f64 = cells[2]
            .parse()
            .map_err(|_| parse_err(lineno + 1, format!("bad time '{}'", cells[2])))?;
        let mut tools = Vec::with_capacity(NUM_TOOLS);
        for cell in &cells[3..3 + NUM_TOOLS] {
            match *cell {
                "0" => tools.push(0),
                "1" => tools.push(1),
                other => {
                    return Err(parse_err(
                        lineno + 1,
                        format!("tool cell must be 0 or 1, got '{other}'"),
                    ))
                }
            }
        }
        let phase_cell = cells[FRAME_TABLE_COLUMNS - 1];
        let phase = if phase_cell.is_empty() {
            None
        } else {
            let p: usize = phase_cell
                .parse()
                .map_err(|_| parse_err(lineno + 1, format!("bad phase id '{phase_cell}'")))?;
            if p >= crate::NUM_PHASES {
                return Err(parse_err(
                    lineno + 1,
                    format!("phase id {p} out of range 0..{}", crate::NUM_PHASES),
                ));
            }
            Some(p)
        };
        records.push(FrameRecord {
            video_id: cells[0].to_string(),
            frame_index,
            time_s,
            tools,
            features: None,
            phase,
        });
    }
    Ok(records)
}

const FEATURE_STORE_MAGIC: &[u8; 4] = b"PHFT";
const FEATURE_STORE_VERSION: u32 = 1;

/// Writes the binary feature store. Features are stored as 32-bit
/// little-endian reals, mirroring how backbone features would arrive.
pub fn save_feature_store(
    features: &BTreeMap<(String, u32), Vec<f64>>,
    dim: usize,
    path: &Path,
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(FEATURE_STORE_MAGIC).map_err(io)?;
    w.write_all(&FEATURE_STORE_VERSION.to_le_bytes())
        .map_err(io)?;
    w.write_all(&(dim as u32).to_le_bytes()).map_err(io)?;
    for ((video_id, frame_index), vec) in features {
        if vec.len() != dim {
            return Err(Error::shape("feature store", dim, vec.len()));
        }
        let id = video_id.as_bytes();
        w.write_all(&(id.len() as u16).to_le_bytes()).map_err(io)?;
        w.write_all(id).map_err(io)?;
        w.write_all(&frame_index.to_le_bytes()).map_err(io)?;
        for &v in vec {
            w.write_all(&(v as f32).to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Loads the feature store, widening values to f64.
pub fn load_feature_store(path: &Path) -> Result<BTreeMap<(String, u32), Vec<f64>>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let fmt_err = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| fmt_err("missing magic bytes".into()))?;
    if &magic != FEATURE_STORE_MAGIC {
        return Err(fmt_err(format!("bad magic {magic:?}")));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)
        .map_err(|_| fmt_err("truncated version".into()))?;
    let version = u32::from_le_bytes(u32buf);
    if version != FEATURE_STORE_VERSION {
        return Err(fmt_err(format!("unsupported version {version}")));
    }
    r.read_exact(&mut u32buf)
        .map_err(|_| fmt_err("truncated dimension".into()))?;
    let dim = u32::from_le_bytes(u32buf) as usize;
    let mut out = BTreeMap::new();
    loop {
        let mut u16buf = [0u8; 2];
        match r.read_exact(&mut u16buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(Error::io(path, e)),
        }
        let id_len = u16::from_le_bytes(u16buf) as usize;
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id)
            .map_err(|_| fmt_err("truncated video id".into()))?;
        let video_id =
            String::from_utf8(id).map_err(|_| fmt_err("video id is not valid UTF-8".into()))?;
        r.read_exact(&mut u32buf)
            .map_err(|_| fmt_err("truncated frame index".into()))?;
        let frame_index = u32::from_le_bytes(u32buf);
        let mut vec = Vec::with_capacity(dim);
        let mut f32buf = [0u8; 4];
        for _ in 0..dim {
            r.read_exact(&mut f32buf).map_err(|_| {
                fmt_err(format!(
                    "truncated feature vector for {video_id}:{frame_index}"
                ))
            })?;
            vec.push(f32::from_le_bytes(f32buf) as f64);
        }
        out.insert((video_id, frame_index), vec);
    }
    Ok(out)
}

/// Writes the split manifest CSV `video_id,split`.
pub fn save_split_manifest(split: &DatasetSplit, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "video_id,split").map_err(io)?;
    for (video, s) in split.iter() {
        writeln!(w, "{video},{s}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_split_manifest(path: &Path) -> Result<DatasetSplit> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut split = DatasetSplit::default();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if lineno == 0 || line.is_empty() {
            continue;
        }
        let (video, s) = line.split_once(',').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message: "expected video_id,split".into(),
        })?;
        let parsed: Split = s.parse().map_err(|e: Error| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        split.assign(video, parsed);
    }
    Ok(split)
}

/// Writes per-video phase annotations as CSV `video_id,phase_id,start_time_s`.
pub fn save_annotations(
    annotations: &BTreeMap<String, PhaseAnnotation>,
    path: &Path,
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "video_id,phase_id,start_time_s").map_err(io)?;
    for (video, ann) in annotations {
        for (phase, start) in ann.transitions() {
            writeln!(w, "{video},{phase},{start}").map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load_annotations(path: &Path) -> Result<BTreeMap<String, PhaseAnnotation>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut raw: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if lineno == 0 || line.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message,
        };
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 3 {
            return Err(parse_err(format!(
                "expected 3 columns, got {}",
                cells.len()
            )));
        }
        let phase: usize = cells[1]
            .parse()
            .map_err(|_| parse_err(format!("bad phase id '{}'", cells[1])))?;
        let start: f64 = cells[2]
            .parse()
            .map_err(|_| parse_err(format!("bad start time '{}'", cells[2])))?;
        raw.entry(cells[0].to_string())
            .or_default()
            .push((phase, start));
    }
    raw.into_iter()
        .map(|(video, transitions)| Ok((video, PhaseAnnotation::new(transitions)?)))
        .collect()
}
