//! End-to-end chain over frame files: match, fuse, link into tracks,
//! refine each track and evaluate.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::camera::project;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fusion::{fuse_frame, Provenance};
use crate::io::{read_frames, write_frames, FrameRecord, PersonRecord, Source};
use crate::matching::{match_sets, MatchContext, MatchResult};
use crate::metrics::{evaluate, write_report_csv, FrameSets, MetricReport};
use crate::skeleton::{Pose2D, Pose3D, TrackSequence};
use crate::tto::{optimize, Observations, TraceRow};

type Pose = Pose3D<f64>;

/// Indexes records by frame, rejecting duplicates and unexpected sources.
pub fn index_frames(records: &[FrameRecord], source: Source) -> Result<BTreeMap<usize, &FrameRecord>> {
    let mut out = BTreeMap::new();
    for r in records {
        if r.source != source {
            return Err(Error::InvalidArgument(format!(
                "frame {}: expected source {source:?}, found {:?}",
                r.frame_index, r.source
            )));
        }
        if out.insert(r.frame_index, r).is_some() {
            return Err(Error::FrameMisalignment(format!(
                "frame {} appears twice in the {source:?} input",
                r.frame_index
            )));
        }
    }
    Ok(out)
}

fn poses_of(rec: &FrameRecord, root: usize) -> Result<Vec<Pose>> {
    rec.persons.iter().map(|p| p.to_pose3d(root)).collect()
}

fn check_same_frames(a: &BTreeMap<usize, &FrameRecord>, b: &BTreeMap<usize, &FrameRecord>, what: &str) -> Result<()> {
    let ka: BTreeSet<_> = a.keys().collect();
    let kb: BTreeSet<_> = b.keys().collect();
    if ka != kb {
        let only_a: Vec<_> = ka.difference(&kb).take(5).collect();
        let only_b: Vec<_> = kb.difference(&ka).take(5).collect();
        return Err(Error::FrameMisalignment(format!(
            "{what}: frames only in the first input {only_a:?}, only in the second {only_b:?}"
        )));
    }
    Ok(())
}

/// Per-frame matching of top-down against bottom-up persons.
pub fn match_frames(cfg: &RunConfig, td: &[FrameRecord], bu: &[FrameRecord]) -> Result<Vec<(usize, MatchResult<f64>)>> {
    let root = cfg.skeleton.root_index;
    let ctx = MatchContext::new(&cfg.matching, &cfg.skeleton, Some(cfg.camera))?;
    let td = index_frames(td, Source::Td)?;
    let bu = index_frames(bu, Source::Bu)?;
    check_same_frames(&td, &bu, "top-down vs bottom-up")?;
    td.iter()
        .map(|(&f, rec)| Ok((f, match_sets(&poses_of(rec, root)?, &poses_of(bu[&f], root)?, &ctx)?)))
        .collect()
}

/// A fused person with the pose its 2D fallback observation comes from.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedPerson {
    pub person_id: Option<u64>,
    pub pose: Pose,
    /// Top-down member when present, otherwise the fused pose itself.
    pub observed: Pose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedFrame {
    pub frame_index: usize,
    pub persons: Vec<FusedPerson>,
}

/// Matches and fuses every frame. Without bottom-up input the top-down
/// poses pass through unchanged.
pub fn fuse_frames(cfg: &RunConfig, td: &[FrameRecord], bu: Option<&[FrameRecord]>) -> Result<Vec<FusedFrame>> {
    let root = cfg.skeleton.root_index;
    let td_idx = index_frames(td, Source::Td)?;
    if td_idx.is_empty() {
        return Err(Error::EmptyInput("top-down input has no frames".into()));
    }
    let Some(bu) = bu else {
        return td_idx
            .iter()
            .map(|(&f, rec)| {
                let persons = rec
                    .persons
                    .iter()
                    .map(|p| {
                        let pose = p.to_pose3d(root)?;
                        Ok(FusedPerson {
                            person_id: p.person_id,
                            observed: pose.clone(),
                            pose,
                        })
                    })
                    .collect::<Result<_>>()?;
                Ok(FusedFrame { frame_index: f, persons })
            })
            .collect();
    };
    let bu_idx = index_frames(bu, Source::Bu)?;
    check_same_frames(&td_idx, &bu_idx, "top-down vs bottom-up")?;
    let strategy = cfg.fusion.strategy::<f64>()?;
    let ctx = MatchContext::new(&cfg.matching, &cfg.skeleton, Some(cfg.camera))?;
    let mut out = Vec::with_capacity(td_idx.len());
    for (&f, td_rec) in &td_idx {
        let bu_rec = bu_idx[&f];
        let td_poses = poses_of(td_rec, root)?;
        let bu_poses = poses_of(bu_rec, root)?;
        let m = match_sets(&td_poses, &bu_poses, &ctx)?;
        let persons = fuse_frame(&m, &td_poses, &bu_poses, &strategy)?
            .into_iter()
            .map(|(pose, prov)| {
                let (person_id, observed) = match prov {
                    Provenance::Pair { td, .. } | Provenance::TopDownOnly(td) => {
                        (td_rec.persons[td].person_id, td_poses[td].clone())
                    }
                    Provenance::BottomUpOnly(bu) => (bu_rec.persons[bu].person_id, pose.clone()),
                };
                FusedPerson {
                    person_id,
                    pose,
                    observed,
                }
            })
            .collect();
        out.push(FusedFrame { frame_index: f, persons });
    }
    Ok(out)
}

/// A linked track with the fallback observation pose of each frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkedTrack {
    pub id: u64,
    pub frames: BTreeMap<usize, (Pose, Pose)>,
}

/// Groups fused persons into tracks. When every person carries an id the
/// ids define the tracks; otherwise persons are linked greedily to the
/// nearest root of a track present in the previous frame within `gate` mm.
pub fn link_tracks(frames: &[FusedFrame], gate: f64) -> Result<Vec<LinkedTrack>> {
    let all_labeled = frames.iter().flat_map(|f| &f.persons).all(|p| p.person_id.is_some());
    if all_labeled {
        let mut tracks: BTreeMap<u64, LinkedTrack> = BTreeMap::new();
        for f in frames {
            for p in &f.persons {
                let id = p.person_id.expect("checked above");
                let tr = tracks.entry(id).or_insert_with(|| LinkedTrack {
                    id,
                    frames: BTreeMap::new(),
                });
                if tr.frames.insert(f.frame_index, (p.pose.clone(), p.observed.clone())).is_some() {
                    return Err(Error::InvalidArgument(format!(
                        "person id {id} appears twice in frame {}",
                        f.frame_index
                    )));
                }
            }
        }
        return Ok(tracks.into_values().collect());
    }

    let mut tracks: Vec<LinkedTrack> = Vec::new();
    // (track index, last frame, last root)
    let mut last: Vec<(usize, usize, crate::scalar::Vec3<f64>)> = Vec::new();
    for f in frames {
        let mut cand = Vec::new();
        for (ti, &(_, lf, root)) in last.iter().enumerate() {
            if lf + 1 != f.frame_index {
                continue;
            }
            for (pi, p) in f.persons.iter().enumerate() {
                let d = p.pose.root_position().distance(root);
                if d < gate {
                    cand.push((d, ti, pi));
                }
            }
        }
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
        let mut track_used = vec![false; last.len()];
        let mut person_track = vec![None; f.persons.len()];
        for (_, ti, pi) in cand {
            if !track_used[ti] && person_track[pi].is_none() {
                track_used[ti] = true;
                person_track[pi] = Some(last[ti].0);
            }
        }
        for (pi, p) in f.persons.iter().enumerate() {
            let t = match person_track[pi] {
                Some(t) => t,
                None => {
                    tracks.push(LinkedTrack {
                        id: tracks.len() as u64,
                        frames: BTreeMap::new(),
                    });
                    last.push((tracks.len() - 1, 0, p.pose.root_position()));
                    tracks.len() - 1
                }
            };
            tracks[t].frames.insert(f.frame_index, (p.pose.clone(), p.observed.clone()));
            let slot = last.iter_mut().find(|l| l.0 == t).expect("every track has a slot");
            *slot = (t, f.frame_index, p.pose.root_position());
        }
    }
    Ok(tracks)
}

fn projected(pose: &Pose, cfg: &RunConfig) -> Result<Pose2D<f64>> {
    let joints = pose
        .joints
        .iter()
        .map(|&j| project(j, &cfg.camera))
        .collect::<Result<Vec<_>>>()?;
    Pose2D::new(joints, pose.conf.clone())
}

/// Observation records keyed by (frame, person id).
fn index_observations(obs: &[FrameRecord]) -> Result<BTreeMap<(usize, u64), Pose2D<f64>>> {
    let mut out = BTreeMap::new();
    for (f, rec) in index_frames(obs, Source::Obs)? {
        for p in &rec.persons {
            let Some(id) = p.person_id else {
                log::debug!("frame {f}: observation without person id ignored");
                continue;
            };
            out.insert((f, id), p.to_pose2d()?);
        }
    }
    Ok(out)
}

/// Refined track and its loss trace (empty when refinement is off).
pub type Refined = (TrackSequence<f64>, Vec<TraceRow>);

/// Loss traces keyed by track id.
pub type Traces = Vec<(u64, Vec<TraceRow>)>;

/// Runs test-time optimization on every track, in parallel, keeping order.
pub fn refine_tracks(cfg: &RunConfig, tracks: &[LinkedTrack], obs: Option<&[FrameRecord]>) -> Result<Vec<Refined>> {
    let obs_idx = obs.map(index_observations).transpose()?.unwrap_or_default();
    tracks
        .par_iter()
        .map(|tr| {
            let seq = TrackSequence::from_poses(tr.id, tr.frames.iter().map(|(&f, (p, _))| (f, p.clone())))?;
            if !cfg.refine {
                return Ok((seq, Vec::new()));
            }
            let observations: Observations<f64> = tr
                .frames
                .iter()
                .map(|(&f, (_, seen))| match obs_idx.get(&(f, tr.id)) {
                    Some(o) => Ok((f, o.clone())),
                    None => Ok((f, projected(seen, cfg)?)),
                })
                .collect::<Result<_>>()?;
            let out = optimize(&seq, &observations, &cfg.camera, &cfg.skeleton, &cfg.tto)?;
            Ok((out.track, out.trace))
        })
        .collect()
}

/// Output records for `frame_indices`, persons ordered by track id.
pub fn tracks_to_records(tracks: &[TrackSequence<f64>], frame_indices: &[usize]) -> Vec<FrameRecord> {
    let mut order: Vec<&TrackSequence<f64>> = tracks.iter().collect();
    order.sort_by_key(|t| t.person_id);
    frame_indices
        .iter()
        .map(|&f| FrameRecord {
            frame_index: f,
            source: Source::Fused,
            persons: order
                .iter()
                .filter_map(|t| t.get(f).map(|p| PersonRecord::from_pose3d(Some(t.person_id), p)))
                .collect(),
        })
        .collect()
}

/// Fused frames as records; persons keep the ids they inherited.
pub fn fused_to_records(frames: &[FusedFrame]) -> Vec<FrameRecord> {
    frames
        .iter()
        .map(|f| FrameRecord {
            frame_index: f.frame_index,
            source: Source::Fused,
            persons: f.persons.iter().map(|p| PersonRecord::from_pose3d(p.person_id, &p.pose)).collect(),
        })
        .collect()
}

/// Links and refines records of any single 3D source.
pub fn refine_records(
    cfg: &RunConfig,
    records: &[FrameRecord],
    obs: Option<&[FrameRecord]>,
) -> Result<(Vec<FrameRecord>, Traces)> {
    cfg.validate()?;
    let Some(first) = records.first() else {
        return Err(Error::EmptyInput("no frames to refine".into()));
    };
    if first.source.dims() != 3 {
        return Err(Error::InvalidArgument("refinement needs 3D records".into()));
    }
    let root = cfg.skeleton.root_index;
    let frames = index_frames(records, first.source)?
        .into_iter()
        .map(|(f, rec)| {
            let persons = rec
                .persons
                .iter()
                .map(|p| {
                    let pose = p.to_pose3d(root)?;
                    Ok(FusedPerson {
                        person_id: p.person_id,
                        observed: pose.clone(),
                        pose,
                    })
                })
                .collect::<Result<_>>()?;
            Ok(FusedFrame { frame_index: f, persons })
        })
        .collect::<Result<Vec<_>>>()?;
    let frame_indices: Vec<usize> = frames.iter().map(|f| f.frame_index).collect();
    let tracks = link_tracks(&frames, cfg.link_gate_mm)?;
    let refined = refine_tracks(cfg, &tracks, obs)?;
    let traces = refined.iter().map(|(t, tr)| (t.person_id, tr.clone())).collect();
    let final_tracks: Vec<TrackSequence<f64>> = refined.into_iter().map(|(t, _)| t).collect();
    Ok((tracks_to_records(&final_tracks, &frame_indices), traces))
}

/// Evaluates predictions (any 3D source) against ground truth. Every
/// prediction frame must exist in the ground truth.
pub fn evaluate_records(cfg: &RunConfig, pred: &[FrameRecord], gt: &[FrameRecord]) -> Result<MetricReport> {
    let root = cfg.skeleton.root_index;
    let gt_idx = index_frames(gt, Source::Gt)?;
    let mut pred_idx: BTreeMap<usize, &FrameRecord> = BTreeMap::new();
    for r in pred {
        if r.source == Source::Obs || r.source == Source::Gt {
            return Err(Error::InvalidArgument(format!("cannot evaluate {:?} records as predictions", r.source)));
        }
        if pred_idx.insert(r.frame_index, r).is_some() {
            return Err(Error::FrameMisalignment(format!("prediction frame {} appears twice", r.frame_index)));
        }
    }
    if let Some(f) = pred_idx.keys().find(|f| !gt_idx.contains_key(f)) {
        return Err(Error::FrameMisalignment(format!("prediction frame {f} has no ground truth")));
    }
    let sets = gt_idx
        .iter()
        .map(|(f, g)| {
            Ok(FrameSets {
                pred: match pred_idx.get(f) {
                    Some(p) => poses_of(p, root)?,
                    None => Vec::new(),
                },
                gt: poses_of(g, root)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate(&sets, &cfg.metrics)
}

/// Metrics of the raw top-down input, the fused poses and the final output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Reports {
    pub input: MetricReport,
    pub fused: MetricReport,
    pub output: MetricReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub frames: Vec<FrameRecord>,
    pub traces: Traces,
    pub reports: Option<Reports>,
}

/// The full chain on in-memory records.
pub fn run_records(
    cfg: &RunConfig,
    td: &[FrameRecord],
    bu: Option<&[FrameRecord]>,
    gt: Option<&[FrameRecord]>,
    obs: Option<&[FrameRecord]>,
) -> Result<PipelineOutput> {
    cfg.validate()?;
    let fused = fuse_frames(cfg, td, bu)?;
    let frame_indices: Vec<usize> = fused.iter().map(|f| f.frame_index).collect();
    let tracks = link_tracks(&fused, cfg.link_gate_mm)?;
    let unrefined: Vec<TrackSequence<f64>> = tracks
        .iter()
        .map(|tr| TrackSequence::from_poses(tr.id, tr.frames.iter().map(|(&f, (p, _))| (f, p.clone()))))
        .collect::<Result<_>>()?;
    let refined = refine_tracks(cfg, &tracks, obs)?;
    let traces = refined.iter().map(|(t, tr)| (t.person_id, tr.clone())).collect();
    let final_tracks: Vec<TrackSequence<f64>> = refined.into_iter().map(|(t, _)| t).collect();
    let frames = tracks_to_records(&final_tracks, &frame_indices);
    let reports = match gt {
        None => None,
        Some(gt) => Some(Reports {
            input: evaluate_records(cfg, td, gt)?,
            fused: evaluate_records(cfg, &tracks_to_records(&unrefined, &frame_indices), gt)?,
            output: evaluate_records(cfg, &frames, gt)?,
        }),
    };
    Ok(PipelineOutput {
        frames,
        traces,
        reports,
    })
}

/// The full chain on files. A bottom-up path that does not exist selects
/// top-down passthrough with a warning.
pub fn run_pipeline(
    cfg: &RunConfig,
    td_path: &Path,
    bu_path: Option<&Path>,
    gt_path: Option<&Path>,
    obs_path: Option<&Path>,
) -> Result<PipelineOutput> {
    let k = cfg.skeleton.num_joints();
    let td = read_frames(td_path, k)?;
    let bu = match bu_path {
        Some(p) if p.exists() => Some(read_frames(p, k)?),
        Some(p) => {
            log::warn!("bottom-up input {} not found; passing top-down poses through", p.display());
            None
        }
        None => {
            log::warn!("no bottom-up input; passing top-down poses through");
            None
        }
    };
    let gt = gt_path.map(|p| read_frames(p, k)).transpose()?;
    let obs = obs_path.map(|p| read_frames(p, k)).transpose()?;
    run_records(cfg, &td, bu.as_deref(), gt.as_deref(), obs.as_deref())
}

/// Writes all traces as CSV, each row prefixed with its track id.
pub fn write_traces_csv<W: Write>(traces: &[(u64, Vec<TraceRow>)], mut out: W) -> Result<()> {
    writeln!(out, "person_id,iteration,stage,l_traj,l_rep,l_bone,total")?;
    for (id, rows) in traces {
        for r in rows {
            writeln!(
                out,
                "{id},{},{},{:?},{:?},{:?},{:?}",
                r.iteration, r.stage, r.l_traj, r.l_rep, r.l_bone, r.total
            )?;
        }
    }
    Ok(())
}

pub fn write_traces(traces: &[(u64, Vec<TraceRow>)], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_traces_csv(traces, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Writes `fused.jsonl` and, with reports, `metrics.json` and `metrics.csv`
/// into `dir`.
pub fn write_outputs(out: &PipelineOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_frames(&out.frames, &dir.join("fused.jsonl"))?;
    if let Some(r) = &out.reports {
        write_reports(r, dir)?;
    }
    Ok(())
}

pub fn write_reports(r: &Reports, dir: &Path) -> Result<()> {
    let mut json = serde_json::to_string_pretty(r)?;
    json.push('\n');
    std::fs::write(dir.join("metrics.json"), json)?;
    let rows = [
        ("input".to_string(), r.input.clone()),
        ("fused".to_string(), r.fused.clone()),
        ("output".to_string(), r.output.clone()),
    ];
    let mut w = BufWriter::new(File::create(dir.join("metrics.csv"))?);
    write_report_csv(&rows, &mut w)?;
    w.flush()?;
    Ok(())
}
