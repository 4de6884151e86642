//! Per-person pose time series and its CSV file format.
//!
//! One file per person. A `#` comment line carries the person index and the
//! frame rate, followed by a header row and one row per frame:
//! `frame, q_00.., <joint>_x/_y/_z.., w_<keypoint>.., cam_v<k>..`. Missing
//! camera selections are written as `-1`. Floats use the shortest
//! representation that round-trips exactly.

use std::io::Write;
use std::path::Path;

use nalgebra::{DVector, Vector3};

use crate::error::{Error, Result};
use crate::skeleton::{JointAngles, JointPositions, SkeletonModel};

#[derive(Debug, Clone, PartialEq)]
pub struct PoseFrame {
    pub frame: usize,
    pub angles: JointAngles,
    pub positions: JointPositions,
    /// Per-keypoint confidence weight used for this frame.
    pub weights: Vec<f64>,
    /// Selected camera per viewpoint.
    pub cameras: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub person: usize,
    pub frame_rate: f64,
    pub joint_names: Vec<String>,
    pub keypoint_names: Vec<String>,
    /// Ascending by frame; frames where the person was not tracked are absent.
    pub frames: Vec<PoseFrame>,
}

impl MotionSequence {
    pub fn new(person: usize, frame_rate: f64, model: &SkeletonModel) -> Self {
        Self {
            person,
            frame_rate,
            joint_names: model.joints().iter().map(|j| j.name.clone()).collect(),
            keypoint_names: model.keypoint_names().to_vec(),
            frames: Vec::new(),
        }
    }

    pub fn frame(&self, frame: usize) -> Option<&PoseFrame> {
        self.frames
            .binary_search_by_key(&frame, |f| f.frame)
            .ok()
            .map(|i| &self.frames[i])
    }

    pub fn push(&mut self, frame: PoseFrame) {
        debug_assert!(self.frames.last().is_none_or(|f| f.frame < frame.frame));
        self.frames.push(frame);
    }

    pub fn to_csv(&self) -> String {
        let mut out = Vec::new();
        self.write_csv(&mut out).expect("writing to memory cannot fail");
        String::from_utf8(out).expect("csv output is utf-8")
    }

    pub fn write_csv(&self, out: impl Write) -> std::io::Result<()> {
        let n_dof = self.frames.first().map_or(0, |f| f.angles.len());
        let n_views = self.frames.first().map_or(0, |f| f.cameras.len());
        let mut out = out;
        writeln!(out, "# person={} frame_rate={}", self.person, self.frame_rate)?;
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["frame".to_string()];
        header.extend((0..n_dof).map(|d| format!("q_{d:02}")));
        for name in &self.joint_names {
            header.extend(["x", "y", "z"].iter().map(|a| format!("{name}_{a}")));
        }
        header.extend(self.keypoint_names.iter().map(|k| format!("w_{k}")));
        header.extend((0..n_views).map(|v| format!("cam_v{v}")));
        w.write_record(&header)?;
        for f in &self.frames {
            let mut row = vec![f.frame.to_string()];
            row.extend(f.angles.0.iter().map(|v| v.to_string()));
            for p in &f.positions.0 {
                row.extend(p.iter().map(|v| v.to_string()));
            }
            row.extend(f.weights.iter().map(|v| v.to_string()));
            row.extend(f.cameras.iter().map(|c| c.map_or("-1".to_string(), |c| c.to_string())));
            w.write_record(&row)?;
        }
        w.flush()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut buf = std::io::BufWriter::new(file);
        self.write_csv(&mut buf).map_err(|e| Error::io(path, e))?;
        buf.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Parses CSV text; `path` only labels errors.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let format = |offset: u64, message: String| Error::Format {
            path: path.to_path_buf(),
            offset,
            message,
        };
        let first = text.lines().next().unwrap_or("");
        let meta = first
            .strip_prefix('#')
            .ok_or_else(|| format(0, "missing `# person=.. frame_rate=..` line".into()))?;
        let mut person = None;
        let mut frame_rate = None;
        for kv in meta.split_whitespace() {
            match kv.split_once('=') {
                Some(("person", v)) => person = v.parse::<usize>().ok(),
                Some(("frame_rate", v)) => frame_rate = v.parse::<f64>().ok(),
                _ => {}
            }
        }
        let (Some(person), Some(frame_rate)) = (person, frame_rate) else {
            return Err(format(0, "metadata line needs person and frame_rate".into()));
        };
        let body_start = first.len() + 1;
        let mut reader = csv::ReaderBuilder::new().from_reader(text.get(body_start..).unwrap_or("").as_bytes());
        let header = reader
            .headers()
            .map_err(|e| format(body_start as u64, e.to_string()))?
            .clone();
        let cols: Vec<&str> = header.iter().collect();
        if cols.first() != Some(&"frame") {
            return Err(format(body_start as u64, "first column must be `frame`".into()));
        }
        let n_dof = cols.iter().filter(|c| c.starts_with("q_")).count();
        let keypoint_names: Vec<String> = cols
            .iter()
            .filter_map(|c| c.strip_prefix("w_").map(str::to_string))
            .collect();
        let n_views = cols.iter().filter(|c| c.starts_with("cam_v")).count();
        let pos_cols = cols.len() - 1 - n_dof - keypoint_names.len() - n_views;
        if pos_cols % 3 != 0 {
            return Err(format(body_start as u64, "position columns must come in x/y/z triples".into()));
        }
        let joint_names: Vec<String> = (0..pos_cols / 3)
            .map(|j| {
                let c = cols[1 + n_dof + 3 * j];
                c.strip_suffix("_x").unwrap_or(c).to_string()
            })
            .collect();

        let mut frames: Vec<PoseFrame> = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| {
                let offset = e.position().map_or(0, |p| p.byte());
                format(body_start as u64 + offset, e.to_string())
            })?;
            let offset = body_start as u64 + record.position().map_or(0, |p| p.byte());
            if record.len() != cols.len() {
                return Err(format(offset, format!("expected {} fields, found {}", cols.len(), record.len())));
            }
            let num = |i: usize| -> Result<f64> {
                record[i]
                    .parse::<f64>()
                    .map_err(|_| format(offset, format!("field `{}` is not a number: `{}`", cols[i], &record[i])))
            };
            let frame = record[0]
                .parse::<usize>()
                .map_err(|_| format(offset, format!("bad frame index `{}`", &record[0])))?;
            if frames.last().is_some_and(|f| f.frame >= frame) {
                return Err(format(offset, format!("frame {frame} out of order")));
            }
            let angles = (1..=n_dof).map(num).collect::<Result<Vec<_>>>()?;
            let base = 1 + n_dof;
            let positions = (0..pos_cols / 3)
                .map(|j| Ok(Vector3::new(num(base + 3 * j)?, num(base + 3 * j + 1)?, num(base + 3 * j + 2)?)))
                .collect::<Result<Vec<_>>>()?;
            let base = base + pos_cols;
            let weights = (0..keypoint_names.len()).map(|k| num(base + k)).collect::<Result<Vec<_>>>()?;
            let base = base + keypoint_names.len();
            let cameras = (0..n_views)
                .map(|v| match record[base + v].parse::<i64>() {
                    Ok(-1) => Ok(None),
                    Ok(c) if c >= 0 => Ok(Some(c as usize)),
                    _ => Err(format(offset, format!("bad camera id `{}`", &record[base + v]))),
                })
                .collect::<Result<Vec<_>>>()?;
            frames.push(PoseFrame {
                frame,
                angles: JointAngles(DVector::from_vec(angles)),
                positions: JointPositions(positions),
                weights,
                cameras,
            });
        }
        Ok(Self {
            person,
            frame_rate,
            joint_names,
            keypoint_names,
            frames,
        })
    }
}
