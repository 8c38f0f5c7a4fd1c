//! JSON-lines frame files: one frame per line.
//!
//! ```text
//! {"frame_index":0,"source":"td","persons":[{"person_id":3,"joints":[[x,y,z],...],"conf":[...]}]}
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Vec3;
use crate::skeleton::{Frame, Pose2D, Pose3D};

/// Producer of a frame record. `Obs` records hold 2D observations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Td,
    Bu,
    Gt,
    Fused,
    Obs,
}

impl Source {
    /// Coordinates per joint records of this source must carry.
    pub fn dims(self) -> usize {
        match self {
            Source::Obs => 2,
            _ => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PersonRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub person_id: Option<u64>,
    pub joints: Vec<Vec<f64>>,
    pub conf: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub frame_index: usize,
    pub source: Source,
    pub persons: Vec<PersonRecord>,
}

impl PersonRecord {
    pub fn from_pose3d(person_id: Option<u64>, pose: &Pose3D<f64>) -> Self {
        Self {
            person_id,
            joints: pose.joints.iter().map(|j| j.to_array().to_vec()).collect(),
            conf: pose.conf.clone(),
        }
    }

    pub fn from_pose2d(person_id: Option<u64>, pose: &Pose2D<f64>) -> Self {
        Self {
            person_id,
            joints: pose.joints.iter().map(|j| j.to_vec()).collect(),
            conf: pose.conf.clone(),
        }
    }

    /// Camera-centric pose; every joint must have three coordinates.
    pub fn to_pose3d(&self, root: usize) -> Result<Pose3D<f64>> {
        let joints = self
            .joints
            .iter()
            .map(|j| match j.as_slice() {
                [x, y, z] => Ok(Vec3::new(*x, *y, *z)),
                _ => Err(Error::InvalidArgument(format!("joint with {} coordinates, expected 3", j.len()))),
            })
            .collect::<Result<Vec<_>>>()?;
        Pose3D::new(joints, self.conf.clone(), Frame::CameraCentric, root)
    }

    /// 2D pose from the first two coordinates of every joint.
    pub fn to_pose2d(&self) -> Result<Pose2D<f64>> {
        let joints = self
            .joints
            .iter()
            .map(|j| {
                if j.len() < 2 {
                    return Err(Error::InvalidArgument("joint with fewer than 2 coordinates".into()));
                }
                Ok([j[0], j[1]])
            })
            .collect::<Result<Vec<_>>>()?;
        Pose2D::new(joints, self.conf.clone())
    }
}

fn schema(line: usize, path: String, message: impl Into<String>) -> Error {
    Error::Schema {
        line,
        path,
        message: message.into(),
    }
}

/// Checks joint counts, coordinate arity, finiteness and confidence range.
pub fn validate_record(rec: &FrameRecord, num_joints: usize, line: usize) -> Result<()> {
    let dims = rec.source.dims();
    for (i, p) in rec.persons.iter().enumerate() {
        if p.joints.len() != num_joints {
            return Err(schema(
                line,
                format!("persons[{i}].joints"),
                format!("expected {num_joints} joints, found {}", p.joints.len()),
            ));
        }
        if p.conf.len() != num_joints {
            return Err(schema(
                line,
                format!("persons[{i}].conf"),
                format!("expected {num_joints} confidences, found {}", p.conf.len()),
            ));
        }
        for (k, j) in p.joints.iter().enumerate() {
            if j.len() != dims {
                return Err(schema(
                    line,
                    format!("persons[{i}].joints[{k}]"),
                    format!("expected {dims} coordinates for source {:?}, found {}", rec.source, j.len()),
                ));
            }
            if j.iter().any(|v| !v.is_finite()) {
                return Err(schema(line, format!("persons[{i}].joints[{k}]"), "non-finite coordinate"));
            }
        }
        for (k, c) in p.conf.iter().enumerate() {
            if !(0.0..=1.0).contains(c) {
                return Err(schema(line, format!("persons[{i}].conf[{k}]"), format!("{c} outside [0, 1]")));
            }
        }
    }
    Ok(())
}

/// Parses frame records, one JSON object per non-blank line. Line numbers
/// in errors are 1-based.
pub fn parse_frames<R: BufRead>(reader: R, num_joints: usize) -> Result<Vec<FrameRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let rec: FrameRecord = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        validate_record(&rec, num_joints, line_no)?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_frames(path: &Path, num_joints: usize) -> Result<Vec<FrameRecord>> {
    parse_frames(BufReader::new(File::open(path)?), num_joints)
}

/// Serializes records, one per line. Floats use the shortest representation
/// that parses back to the same value.
pub fn format_frames<W: Write>(records: &[FrameRecord], mut out: W) -> Result<()> {
    for rec in records {
        for p in &rec.persons {
            if p.joints.iter().flatten().chain(&p.conf).any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "frame {}: non-finite value cannot be written",
                    rec.frame_index
                )));
            }
        }
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_frames(records: &[FrameRecord], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    format_frames(records, &mut w)?;
    w.flush()?;
    Ok(())
}
