//! Pose accuracy metrics and multi-person evaluation against ground truth.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::assignment::min_cost_assignment;
use crate::error::{Error, Result};
use crate::procrustes::similarity_align;
use crate::scalar::Real;
use crate::skeleton::{Frame, Pose3D};

fn check_pair<T: Real>(pred: &Pose3D<T>, gt: &Pose3D<T>) -> Result<()> {
    if pred.num_joints() != gt.num_joints() || pred.root != gt.root {
        return Err(Error::InvalidSkeleton(format!(
            "prediction has {} joints (root {}), ground truth has {} (root {})",
            pred.num_joints(),
            pred.root,
            gt.num_joints(),
            gt.root
        )));
    }
    if pred.num_joints() == 0 {
        return Err(Error::EmptyInput("pose without joints".into()));
    }
    Ok(())
}

/// Per-joint distances after moving both roots to the origin.
fn root_aligned_distances<T: Real>(pred: &Pose3D<T>, gt: &Pose3D<T>) -> Vec<T> {
    let rp = pred.root_position();
    let rg = gt.root_position();
    pred.joints
        .iter()
        .zip(&gt.joints)
        .map(|(&p, &g)| ((p - rp) - (g - rg)).norm())
        .collect()
}

fn mean<T: Real>(v: &[T]) -> T {
    v.iter().copied().sum::<T>() / T::from_usize_lossy(v.len())
}

/// Mean per-joint position error after root alignment, mm.
pub fn mpjpe<T: Real>(pred: &Pose3D<T>, gt: &Pose3D<T>) -> Result<T> {
    check_pair(pred, gt)?;
    Ok(mean(&root_aligned_distances(pred, gt)))
}

/// Mean per-joint position error after least-squares similarity alignment
/// of the prediction onto the ground truth, mm.
pub fn pa_mpjpe<T: Real>(pred: &Pose3D<T>, gt: &Pose3D<T>) -> Result<T> {
    check_pair(pred, gt)?;
    let sim = similarity_align(&pred.joints, &gt.joints)?;
    let d: Vec<T> = pred
        .joints
        .iter()
        .zip(&gt.joints)
        .map(|(&p, &g)| sim.apply(p).distance(g))
        .collect();
    Ok(mean(&d))
}

fn check_threshold<T: Real>(t: T) -> Result<()> {
    if !(t > T::zero()) {
        return Err(Error::Domain {
            what: "distance threshold",
            value: t.as_f64(),
        });
    }
    Ok(())
}

fn fraction_below<T: Real>(d: &[T], threshold: T) -> T {
    T::from_usize_lossy(d.iter().filter(|&&x| x < threshold).count()) / T::from_usize_lossy(d.len())
}

/// Fraction of joints whose root-aligned distance is below `threshold`.
pub fn pck<T: Real>(pred: &Pose3D<T>, gt: &Pose3D<T>, threshold: T) -> Result<T> {
    check_pair(pred, gt)?;
    check_threshold(threshold)?;
    Ok(fraction_below(&root_aligned_distances(pred, gt), threshold))
}

fn absolute_distances<T: Real>(pred: &Pose3D<T>, gt: &Pose3D<T>) -> Result<Vec<T>> {
    pred.expect_frame(Frame::CameraCentric)?;
    gt.expect_frame(Frame::CameraCentric)?;
    Ok(pred.joints.iter().zip(&gt.joints).map(|(&p, &g)| p.distance(g)).collect())
}

/// Fraction of joints within `threshold` in raw camera coordinates.
pub fn pck_abs<T: Real>(pred: &Pose3D<T>, gt: &Pose3D<T>, threshold: T) -> Result<T> {
    check_pair(pred, gt)?;
    check_threshold(threshold)?;
    Ok(fraction_below(&absolute_distances(pred, gt)?, threshold))
}

/// Thresholds `step, 2 step, ..., max` (the zero threshold is excluded
/// because no distance is strictly below it).
pub fn auc_grid(max: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(max >= step) {
        return Err(Error::InvalidArgument(format!("AUC grid needs 0 < step <= max, got step {step}, max {max}")));
    }
    let n = (max / step + 1e-9).floor() as usize;
    Ok((1..=n).map(|i| i as f64 * step).collect())
}

/// Mean PCK over `grid` for already-paired predictions.
pub fn auc_rel<T: Real>(pairs: &[(&Pose3D<T>, &Pose3D<T>)], grid: &[f64]) -> Result<T> {
    if pairs.is_empty() || grid.is_empty() {
        return Err(Error::EmptyInput("AUC needs at least one pair and one threshold".into()));
    }
    let mut d = Vec::new();
    for (p, g) in pairs {
        check_pair(p, g)?;
        d.extend(root_aligned_distances(p, g));
    }
    let sum: T = grid.iter().map(|&t| fraction_below(&d, T::lit(t))).sum();
    Ok(sum / T::from_usize_lossy(grid.len()))
}

/// Predictions and ground truth persons of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSets<T> {
    pub pred: Vec<Pose3D<T>>,
    pub gt: Vec<Pose3D<T>>,
}

/// Ranking confidence of a prediction.
fn score<T: Real>(p: &Pose3D<T>) -> T {
    p.mean_confidence()
}

/// Average precision of root localisation. Predictions across all frames
/// are ranked by mean joint confidence; each claims the nearest unclaimed
/// ground-truth root of its frame strictly within `radius`. The area uses
/// the monotone precision envelope over all recall points.
pub fn ap_root<T: Real>(frames: &[FrameSets<T>], radius: T) -> Result<T> {
    check_threshold(radius)?;
    let n_gt: usize = frames.iter().map(|f| f.gt.len()).sum();
    let mut ranked: Vec<(usize, usize)> = frames
        .iter()
        .enumerate()
        .flat_map(|(f, fs)| (0..fs.pred.len()).map(move |i| (f, i)))
        .collect();
    if n_gt == 0 {
        return Ok(if ranked.is_empty() { T::one() } else { T::zero() });
    }
    // Stable sort: ties keep frame-then-index order.
    ranked.sort_by(|a, b| {
        let sa = score(&frames[a.0].pred[a.1]);
        let sb = score(&frames[b.0].pred[b.1]);
        sb.partial_cmp(&sa).unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut claimed: Vec<Vec<bool>> = frames.iter().map(|f| vec![false; f.gt.len()]).collect();
    let mut tp_flags = Vec::with_capacity(ranked.len());
    for &(f, i) in &ranked {
        let root = frames[f].pred[i].root_position();
        let best = frames[f]
            .gt
            .iter()
            .enumerate()
            .filter(|(g, _)| !claimed[f][*g])
            .map(|(g, gt)| (g, gt.root_position().distance(root)))
            .filter(|&(_, d)| d < radius)
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
        if let Some((g, _)) = best {
            claimed[f][g] = true;
        }
        tp_flags.push(best.is_some());
    }
    let mut precision = Vec::with_capacity(tp_flags.len());
    let mut recall = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (rank, &hit) in tp_flags.iter().enumerate() {
        tp += hit as usize;
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Ok(T::lit(ap))
}

/// Hungarian pairing of predictions to ground truth by root distance.
fn hungarian_pairs<T: Real>(f: &FrameSets<T>) -> Vec<(usize, usize)> {
    let cost: Vec<Vec<T>> = f
        .pred
        .iter()
        .map(|p| f.gt.iter().map(|g| p.root_position().distance(g.root_position())).collect())
        .collect();
    min_cost_assignment(&cost)
        .into_iter()
        .enumerate()
        .filter_map(|(p, g)| g.map(|g| (p, g)))
        .collect()
}

/// Joint-level true positive, false positive and false negative counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn f1(&self) -> f64 {
        let p = if self.tp + self.fp == 0 { 0.0 } else { self.tp as f64 / (self.tp + self.fp) as f64 };
        let r = if self.tp + self.fn_ == 0 { 0.0 } else { self.tp as f64 / (self.tp + self.fn_) as f64 };
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

/// Joint counts at camera-space threshold `t` (mm). A matched joint farther
/// than `t` is both a false positive and a false negative.
pub fn f1_counts<T: Real>(frames: &[FrameSets<T>], t: T) -> Result<Counts> {
    check_threshold(t)?;
    let mut c = Counts::default();
    for f in frames {
        let pairs = hungarian_pairs(f);
        for &(p, g) in &pairs {
            check_pair(&f.pred[p], &f.gt[g])?;
            for d in absolute_distances(&f.pred[p], &f.gt[g])? {
                if d < t {
                    c.tp += 1;
                } else {
                    c.fp += 1;
                    c.fn_ += 1;
                }
            }
        }
        let matched_pred: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let matched_gt: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        for (i, p) in f.pred.iter().enumerate() {
            if !matched_pred.contains(&i) {
                c.fp += p.num_joints();
            }
        }
        for (i, g) in f.gt.iter().enumerate() {
            if !matched_gt.contains(&i) {
                c.fn_ += g.num_joints();
            }
        }
    }
    Ok(c)
}

pub fn f1_at<T: Real>(frames: &[FrameSets<T>], t: T) -> Result<f64> {
    Ok(f1_counts(frames, t)?.f1())
}

/// Greedy nearest-root pairing: repeatedly takes the closest remaining
/// (prediction, ground truth) pair. Returns `(pred, gt)` pairs.
pub fn greedy_root_pairs<T: Real>(f: &FrameSets<T>) -> Vec<(usize, usize)> {
    let mut cand: Vec<(T, usize, usize)> = Vec::new();
    for (g, gt) in f.gt.iter().enumerate() {
        for (p, pred) in f.pred.iter().enumerate() {
            cand.push((pred.root_position().distance(gt.root_position()), g, p));
        }
    }
    cand.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then((a.1, a.2).cmp(&(b.1, b.2)))
    });
    let mut used_p = vec![false; f.pred.len()];
    let mut used_g = vec![false; f.gt.len()];
    let mut out = Vec::new();
    for (_, g, p) in cand {
        if !used_p[p] && !used_g[g] {
            used_p[p] = true;
            used_g[g] = true;
            out.push((p, g));
        }
    }
    out.sort_unstable();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricThresholds {
    pub pck_mm: f64,
    pub pck_abs_mm: f64,
    pub auc_max_mm: f64,
    pub auc_step_mm: f64,
    pub ap_radius_mm: f64,
    pub f1_mm: Vec<f64>,
}

impl Default for MetricThresholds {
    fn default() -> Self {
        Self {
            pck_mm: 150.0,
            pck_abs_mm: 250.0,
            auc_max_mm: 150.0,
            auc_step_mm: 5.0,
            ap_radius_mm: 250.0,
            f1_mm: vec![400.0, 800.0, 1200.0],
        }
    }
}

impl MetricThresholds {
    pub fn validate(&self) -> Result<()> {
        for v in [self.pck_mm, self.pck_abs_mm, self.ap_radius_mm]
            .into_iter()
            .chain(self.f1_mm.iter().copied())
        {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("metric threshold {v} must be positive")));
            }
        }
        auc_grid(self.auc_max_mm, self.auc_step_mm).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

/// Aggregate evaluation. Distances in mm, `pck`, `pck_abs`, `auc_rel` and
/// `ap_root` in percent, F1 as a fraction keyed by threshold in mm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mpjpe: Option<f64>,
    pub pa_mpjpe: Option<f64>,
    pub pck: f64,
    pub pck_abs: f64,
    pub auc_rel: f64,
    pub ap_root: f64,
    pub f1_at: BTreeMap<String, f64>,
    pub matched: usize,
    pub missed: usize,
    pub extra: usize,
}

/// Evaluates every metric. Persons are paired by greedy nearest root; a
/// missed ground-truth person counts all its joints as incorrect for the
/// PCK family and is excluded from the distance means.
pub fn evaluate<T: Real>(frames: &[FrameSets<T>], th: &MetricThresholds) -> Result<MetricReport> {
    th.validate()?;
    let grid = auc_grid(th.auc_max_mm, th.auc_step_mm)?;
    let mut rel: Vec<T> = Vec::new();
    let mut abs: Vec<T> = Vec::new();
    let mut per_pose = Vec::new();
    let mut per_pose_pa = Vec::new();
    let mut missed_joints = 0usize;
    let (mut matched, mut missed, mut extra) = (0, 0, 0);
    for f in frames {
        let pairs = greedy_root_pairs(f);
        for &(p, g) in &pairs {
            let (pred, gt) = (&f.pred[p], &f.gt[g]);
            check_pair(pred, gt)?;
            rel.extend(root_aligned_distances(pred, gt));
            abs.extend(absolute_distances(pred, gt)?);
            per_pose.push(mpjpe(pred, gt)?.as_f64());
            per_pose_pa.push(pa_mpjpe(pred, gt)?.as_f64());
        }
        matched += pairs.len();
        missed += f.gt.len() - pairs.len();
        extra += f.pred.len() - pairs.len();
        missed_joints += f
            .gt
            .iter()
            .enumerate()
            .filter(|(g, _)| !pairs.iter().any(|pr| pr.1 == *g))
            .map(|(_, gt)| gt.num_joints())
            .sum::<usize>();
    }
    let total_joints = rel.len() + missed_joints;
    let pct = |d: &[T], t: f64| -> f64 {
        if total_joints == 0 {
            return 0.0;
        }
        100.0 * d.iter().filter(|&&x| x < T::lit(t)).count() as f64 / total_joints as f64
    };
    let mean_of = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let mut f1 = BTreeMap::new();
    for &t in &th.f1_mm {
        f1.insert(format!("{t}"), f1_at(frames, T::lit(t))?);
    }
    Ok(MetricReport {
        mpjpe: mean_of(&per_pose),
        pa_mpjpe: mean_of(&per_pose_pa),
        pck: pct(&rel, th.pck_mm),
        pck_abs: pct(&abs, th.pck_abs_mm),
        auc_rel: grid.iter().map(|&t| pct(&rel, t)).sum::<f64>() / grid.len() as f64,
        ap_root: 100.0 * ap_root(frames, T::lit(th.ap_radius_mm))?.as_f64(),
        f1_at: f1,
        matched,
        missed,
        extra,
    })
}

/// One CSV row per named report, with a header.
pub fn write_report_csv<W: Write>(rows: &[(String, MetricReport)], mut out: W) -> Result<()> {
    let f1_keys: Vec<String> = rows
        .first()
        .map(|(_, r)| r.f1_at.keys().cloned().collect())
        .unwrap_or_default();
    write!(out, "sequence,mpjpe,pa_mpjpe,pck,pck_abs,auc_rel,ap_root")?;
    for k in &f1_keys {
        write!(out, ",f1_{k}")?;
    }
    writeln!(out, ",matched,missed,extra")?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
    for (name, r) in rows {
        write!(
            out,
            "{name},{},{},{:?},{:?},{:?},{:?}",
            opt(r.mpjpe),
            opt(r.pa_mpjpe),
            r.pck,
            r.pck_abs,
            r.auc_rel,
            r.ap_root
        )?;
        for k in &f1_keys {
            write!(out, ",{}", opt(r.f1_at.get(k).copied()))?;
        }
        writeln!(out, ",{},{},{}", r.matched, r.missed, r.extra)?;
    }
    Ok(())
}
