//! Test-time refinement of a person track: polynomial trajectory priors,
//! reprojection against 2D observations and a latent bone-length prior,
//! minimized by gradient descent with backtracking.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::camera::{project_with_jacobian, CameraIntrinsics};
use crate::error::{Error, Result};
use crate::scalar::{solve_dense, Real, Vec3};
use crate::skeleton::{bone_lengths, Frame, Pose2D, Pose3D, SkeletonSpec, TrackSequence};

/// 2D observations keyed by frame index.
pub type Observations<T> = BTreeMap<usize, Pose2D<T>>;

/// Number of trajectory orders (1, 2, 3).
pub const ORDERS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TtoConfig {
    /// Past-frame window per trajectory order 1, 2, 3.
    pub windows: [usize; ORDERS],
    pub c_rep_stage1: f64,
    pub c_rep_stage2: f64,
    pub c_bone: f64,
    pub iters_per_stage: usize,
    /// Initial step of the adaptive descent, in mm per unit gradient.
    pub step_size: f64,
    pub two_stage: bool,
    /// When false only the latent bone lengths move.
    pub optimize_joints: bool,
}

impl Default for TtoConfig {
    fn default() -> Self {
        Self {
            windows: [2, 5, 5],
            c_rep_stage1: 0.1,
            c_rep_stage2: 100.0,
            c_bone: 1.0,
            iters_per_stage: 3000,
            step_size: 0.01,
            two_stage: true,
            optimize_joints: true,
        }
    }
}

impl TtoConfig {
    pub fn validate(&self) -> Result<()> {
        for (i, &w) in self.windows.iter().enumerate() {
            if w < i + 2 {
                return Err(Error::Config(format!(
                    "order {} needs a window of at least {}, got {w}",
                    i + 1,
                    i + 2
                )));
            }
        }
        for (name, c) in [
            ("c_rep_stage1", self.c_rep_stage1),
            ("c_rep_stage2", self.c_rep_stage2),
            ("c_bone", self.c_bone),
        ] {
            if !(c >= 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {c}")));
            }
        }
        if self.iters_per_stage == 0 {
            return Err(Error::Config("iters_per_stage must be >= 1".into()));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("step_size must be positive, got {}", self.step_size)));
        }
        Ok(())
    }

    pub fn c_rep(&self, stage: Stage) -> f64 {
        match stage {
            Stage::One => self.c_rep_stage1,
            Stage::Two => self.c_rep_stage2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn number(self) -> usize {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

/// Weights `a` such that `sum_j a_j y_j` is the least-squares polynomial of
/// degree `order` through `y_0..y_{w-1}` evaluated one step past the window.
pub fn extrapolation_weights<T: Real>(window: usize, order: usize) -> Result<Vec<T>> {
    if window < order + 1 {
        return Err(Error::InsufficientHistory {
            needed: order + 1,
            got: window,
        });
    }
    // Time rescaled to [0, 1) for conditioning; the target sits at 1.
    let n = order + 1;
    let w = window as f64;
    let v: Vec<Vec<f64>> = (0..window)
        .map(|t| (0..n).map(|d| (t as f64 / w).powi(d as i32)).collect())
        .collect();
    let gram: Vec<Vec<f64>> = (0..n)
        .map(|a| (0..n).map(|b| v.iter().map(|row| row[a] * row[b]).sum()).collect())
        .collect();
    let x = solve_dense(gram, vec![1.0; n])
        .ok_or_else(|| Error::Degenerate(format!("polynomial fit of order {order} over {window} points")))?;
    Ok(v
        .iter()
        .map(|row| T::lit(row.iter().zip(&x).map(|(a, b)| a * b).sum()))
        .collect())
}

/// Extrapolates `history` (consecutive frames, oldest first) one frame ahead
/// with a least-squares polynomial of degree `order`.
pub fn fit_trajectory<T: Real>(history: &[Vec3<T>], order: usize) -> Result<Vec3<T>> {
    let a = extrapolation_weights::<T>(history.len(), order)?;
    Ok(history
        .iter()
        .zip(&a)
        .fold(Vec3::zero(), |acc, (&p, &w)| acc + p * w))
}

/// Current optimization variables.
#[derive(Debug, Clone, PartialEq)]
pub struct TtoState<T> {
    /// Joint positions, frame-major: `joints[f * K + k]`.
    pub joints: Vec<Vec3<T>>,
    /// Latent length per bone, mm.
    pub bones: Vec<T>,
}

impl<T: Real> TtoState<T> {
    fn zeros_like(&self) -> Self {
        Self {
            joints: vec![Vec3::zero(); self.joints.len()],
            bones: vec![T::zero(); self.bones.len()],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.joints.iter().all(|j| j.is_finite()) && self.bones.iter().all(|b| b.is_finite())
    }

    /// Flattened coordinates: all joint x, y, z followed by the bones.
    pub fn to_flat(&self) -> Vec<T> {
        self.joints
            .iter()
            .flat_map(|j| j.to_array())
            .chain(self.bones.iter().copied())
            .collect()
    }

    pub fn from_flat(&self, flat: &[T]) -> Self {
        let n = self.joints.len();
        Self {
            joints: (0..n)
                .map(|i| Vec3::new(flat[3 * i], flat[3 * i + 1], flat[3 * i + 2]))
                .collect(),
            bones: flat[3 * n..].to_vec(),
        }
    }

    fn axpy(&mut self, a: T, other: &Self) {
        for (x, &g) in self.joints.iter_mut().zip(&other.joints) {
            *x += g * a;
        }
        for (x, &g) in self.bones.iter_mut().zip(&other.bones) {
            *x += g * a;
        }
    }
}

/// The three loss terms, with the trajectory term split by order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms<T> {
    pub traj_by_order: [T; ORDERS],
    pub rep: T,
    pub bone: T,
}

impl<T: Real> LossTerms<T> {
    pub fn traj(&self) -> T {
        self.traj_by_order.iter().copied().sum()
    }

    pub fn total(&self, c_rep: T, c_bone: T) -> T {
        self.traj() + c_rep * self.rep + c_bone * self.bone
    }
}

/// Gradient of each loss term separately.
#[derive(Debug, Clone)]
pub struct TermGradients<T> {
    pub traj: TtoState<T>,
    pub rep: TtoState<T>,
    pub bone: TtoState<T>,
}

impl<T: Real> TermGradients<T> {
    pub fn combined(&self, c_rep: T, c_bone: T) -> TtoState<T> {
        let mut g = self.traj.clone();
        g.axpy(c_rep, &self.rep);
        g.axpy(c_bone, &self.bone);
        g
    }
}

#[derive(Debug, Clone, Copy)]
struct TrajTerm {
    slot: usize,
    /// Position of the predicted frame in the sequence.
    pos: usize,
}

/// A track prepared for loss evaluation.
#[derive(Debug, Clone)]
pub struct TtoProblem<T> {
    person_id: u64,
    frames: Vec<usize>,
    k: usize,
    root: usize,
    conf: Vec<Vec<T>>,
    bones: Vec<(usize, usize)>,
    cam: CameraIntrinsics<T>,
    observations: Option<Vec<Pose2D<T>>>,
    weights: [Vec<T>; ORDERS],
    weight_sums: [T; ORDERS],
    terms: Vec<TrajTerm>,
    initial: TtoState<T>,
}

impl<T: Real> TtoProblem<T> {
    /// Without observations the reprojection term is identically zero.
    pub fn new(
        seq: &TrackSequence<T>,
        observations: Option<&Observations<T>>,
        cam: &CameraIntrinsics<T>,
        skeleton: &SkeletonSpec,
        cfg: &TtoConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let k = seq
            .num_joints()
            .ok_or_else(|| Error::EmptyInput(format!("track {} has no frames", seq.person_id)))?;
        if k != skeleton.num_joints() {
            return Err(Error::InvalidSkeleton(format!(
                "track has {k} joints, skeleton has {}",
                skeleton.num_joints()
            )));
        }
        let frames: Vec<usize> = seq.frame_indices().collect();
        let obs = match observations {
            None => None,
            Some(map) => {
                if map.len() != frames.len() || !frames.iter().all(|f| map.contains_key(f)) {
                    let missing: Vec<_> = frames.iter().filter(|f| !map.contains_key(f)).take(5).collect();
                    let extra: Vec<_> = map.keys().filter(|f| seq.get(**f).is_none()).take(5).collect();
                    return Err(Error::MisalignedObservations(format!(
                        "missing frames {missing:?}, unexpected frames {extra:?}"
                    )));
                }
                let list: Vec<Pose2D<T>> = frames.iter().map(|f| map[f].clone()).collect();
                if let Some(p) = list.iter().find(|p| p.num_joints() != k) {
                    return Err(Error::MisalignedObservations(format!(
                        "observation has {} joints, track has {k}",
                        p.num_joints()
                    )));
                }
                Some(list)
            }
        };
        let weights = [
            extrapolation_weights(cfg.windows[0], 1)?,
            extrapolation_weights(cfg.windows[1], 2)?,
            extrapolation_weights(cfg.windows[2], 3)?,
        ];
        let mut terms = Vec::new();
        for pos in 0..frames.len() {
            for (slot, &w) in cfg.windows.iter().enumerate() {
                // Strictly increasing indices: a gap of exactly `w` means the
                // preceding `w` frames are all present.
                if pos >= w && frames[pos] - frames[pos - w] == w {
                    terms.push(TrajTerm { slot, pos });
                }
            }
        }
        let poses: Vec<&Pose3D<T>> = seq.poses().collect();
        let initial = TtoState {
            joints: poses.iter().flat_map(|p| p.joints.iter().copied()).collect(),
            bones: bone_lengths(poses[0], skeleton),
        };
        Ok(Self {
            person_id: seq.person_id,
            frames,
            k,
            root: poses[0].root,
            conf: poses.iter().map(|p| p.conf.clone()).collect(),
            bones: skeleton.bones.clone(),
            cam: *cam,
            observations: obs,
            weight_sums: [0, 1, 2].map(|i| weights[i].iter().copied().sum()),
            weights,
            terms,
            initial,
        })
    }

    /// Joints of the input track, bones at their frame-0 lengths.
    pub fn initial_state(&self) -> TtoState<T> {
        self.initial.clone()
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn terms(&self, state: &TtoState<T>) -> Result<LossTerms<T>> {
        self.evaluate(state, None)
    }

    pub fn gradients(&self, state: &TtoState<T>) -> Result<(LossTerms<T>, TermGradients<T>)> {
        let z = state.zeros_like();
        let mut g = TermGradients {
            traj: z.clone(),
            rep: z.clone(),
            bone: z,
        };
        let terms = self.evaluate(state, Some(&mut g))?;
        Ok((terms, g))
    }

    fn evaluate(&self, state: &TtoState<T>, mut grad: Option<&mut TermGradients<T>>) -> Result<LossTerms<T>> {
        self.check_shape(state)?;
        let traj_by_order = self.traj(&state.joints, grad.as_deref_mut().map(|g| &mut g.traj.joints[..]));
        let rep = self.rep(&state.joints, grad.as_deref_mut().map(|g| &mut g.rep.joints[..]))?;
        let bone = self.bone(state, grad.map(|g| &mut g.bone))?;
        Ok(LossTerms {
            traj_by_order,
            rep,
            bone,
        })
    }

    fn check_shape(&self, state: &TtoState<T>) -> Result<()> {
        if state.joints.len() != self.frames.len() * self.k || state.bones.len() != self.bones.len() {
            return Err(Error::InvalidArgument(format!(
                "state has {} joints and {} bones, problem expects {} and {}",
                state.joints.len(),
                state.bones.len(),
                self.frames.len() * self.k,
                self.bones.len()
            )));
        }
        Ok(())
    }

    fn traj(&self, x: &[Vec3<T>], mut grad: Option<&mut [Vec3<T>]>) -> [T; ORDERS] {
        let k = self.k;
        let inv_k = T::one() / T::from_usize_lossy(k);
        let two = T::lit(2.0);
        let mut out = [T::zero(); ORDERS];
        for term in &self.terms {
            let a = &self.weights[term.slot];
            let start = term.pos - a.len();
            let a_sum = self.weight_sums[term.slot];
            for j in 0..k {
                // Weights sum to one, so the residual is formed from
                // differences: constant motion then cancels exactly.
                let p = x[term.pos * k + j];
                let mut r = Vec3::zero();
                for (i, &w) in a.iter().enumerate() {
                    r += (p - x[(start + i) * k + j]) * w;
                }
                out[term.slot] += r.norm_squared() * inv_k;
                if let Some(g) = grad.as_deref_mut() {
                    let gr = r * (two * inv_k);
                    g[term.pos * k + j] += gr * a_sum;
                    for (i, &w) in a.iter().enumerate() {
                        g[(start + i) * k + j] -= gr * w;
                    }
                }
            }
        }
        out
    }

    fn rep(&self, x: &[Vec3<T>], mut grad: Option<&mut [Vec3<T>]>) -> Result<T> {
        let Some(obs) = &self.observations else {
            return Ok(T::zero());
        };
        let k = self.k;
        let inv_k = T::one() / T::from_usize_lossy(k);
        let two = T::lit(2.0);
        let mut total = T::zero();
        for (pos, o) in obs.iter().enumerate() {
            let mut frame = T::zero();
            for j in 0..k {
                let (uv, jac) = project_with_jacobian(x[pos * k + j], &self.cam)?;
                let du = uv[0] - o.joints[j][0];
                let dv = uv[1] - o.joints[j][1];
                let c = o.conf[j];
                frame += c * (du * du + dv * dv);
                if let Some(g) = grad.as_deref_mut() {
                    let s = two * c * inv_k;
                    g[pos * k + j] += Vec3::new(
                        jac[0][0] * du + jac[1][0] * dv,
                        jac[0][1] * du + jac[1][1] * dv,
                        jac[0][2] * du + jac[1][2] * dv,
                    ) * s;
                }
            }
            total += frame * inv_k;
        }
        Ok(total)
    }

    fn bone(&self, state: &TtoState<T>, mut grad: Option<&mut TtoState<T>>) -> Result<T> {
        let k = self.k;
        let two = T::lit(2.0);
        let mut total = T::zero();
        for pos in 0..self.frames.len() {
            for (i, &(p, c)) in self.bones.iter().enumerate() {
                let d = state.joints[pos * k + p] - state.joints[pos * k + c];
                let l = d.norm();
                let r = l - state.bones[i];
                total += r * r;
                if let Some(g) = grad.as_deref_mut() {
                    // At zero length the subgradient 0 is used.
                    if l > T::zero() {
                        let gd = d * (two * r / l);
                        g.joints[pos * k + p] += gd;
                        g.joints[pos * k + c] -= gd;
                    }
                    g.bones[i] -= two * r;
                }
            }
        }
        Ok(total)
    }

    /// Rebuilds a track from a state, keeping the input confidences.
    pub fn to_track(&self, state: &TtoState<T>) -> Result<TrackSequence<T>> {
        self.check_shape(state)?;
        let poses = self
            .frames
            .iter()
            .enumerate()
            .map(|(pos, &f)| {
                let joints = state.joints[pos * self.k..(pos + 1) * self.k].to_vec();
                Pose3D::new(joints, self.conf[pos].clone(), Frame::CameraCentric, self.root).map(|p| (f, p))
            })
            .collect::<Result<Vec<_>>>()?;
        TrackSequence::from_poses(self.person_id, poses)
    }
}

/// Sum over frames and orders of the mean per-joint squared residual
/// against each order's polynomial extrapolation from the preceding window.
pub fn trajectory_loss<T: Real>(seq: &TrackSequence<T>, skeleton: &SkeletonSpec, cfg: &TtoConfig) -> Result<T> {
    Ok(trajectory_loss_by_order(seq, skeleton, cfg)?.iter().copied().sum())
}

pub fn trajectory_loss_by_order<T: Real>(
    seq: &TrackSequence<T>,
    skeleton: &SkeletonSpec,
    cfg: &TtoConfig,
) -> Result<[T; ORDERS]> {
    let cam = CameraIntrinsics::new(T::one(), T::one(), T::zero(), T::zero())?;
    let problem = TtoProblem::new(seq, None, &cam, skeleton, cfg)?;
    Ok(problem.terms(&problem.initial_state())?.traj_by_order)
}

/// `sum_t sum_i (length_i(P_t) - B_i)^2`.
pub fn bone_loss<T: Real>(seq: &TrackSequence<T>, skeleton: &SkeletonSpec, bones: &[T]) -> Result<T> {
    if bones.len() != skeleton.num_bones() {
        return Err(Error::InvalidArgument(format!(
            "{} latent lengths for {} bones",
            bones.len(),
            skeleton.num_bones()
        )));
    }
    let mut total = T::zero();
    for pose in seq.poses() {
        for (l, &b) in bone_lengths(pose, skeleton).into_iter().zip(bones) {
            total += (l - b) * (l - b);
        }
    }
    Ok(total)
}

/// `L_traj + c_rep(stage) L_rep + c_bone L_bone` for the given track and
/// latent bone lengths.
pub fn tto_loss<T: Real>(
    seq: &TrackSequence<T>,
    observations: &Observations<T>,
    cam: &CameraIntrinsics<T>,
    skeleton: &SkeletonSpec,
    bones: &[T],
    cfg: &TtoConfig,
    stage: Stage,
) -> Result<T> {
    let problem = TtoProblem::new(seq, Some(observations), cam, skeleton, cfg)?;
    let mut state = problem.initial_state();
    if bones.len() != state.bones.len() {
        return Err(Error::InvalidArgument(format!(
            "{} latent lengths for {} bones",
            bones.len(),
            state.bones.len()
        )));
    }
    state.bones = bones.to_vec();
    let terms = problem.terms(&state)?;
    Ok(terms.total(T::lit(cfg.c_rep(stage)), T::lit(cfg.c_bone)))
}

/// One row of the loss trace, recorded after every iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub stage: usize,
    pub l_traj: f64,
    pub l_rep: f64,
    pub l_bone: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TtoOutcome<T> {
    pub track: TrackSequence<T>,
    pub bones: Vec<T>,
    pub trace: Vec<TraceRow>,
}

const STEP_GROWTH: f64 = 1.2;
const STEP_SHRINK: f64 = 0.5;

/// Refines a track. Every iteration proposes one gradient step; the step is
/// accepted when the stage loss does not increase (the step then grows) and
/// rejected otherwise (the step halves). The latent-bone gradient is scaled
/// by `1 / frames` so both variable groups share a step.
pub fn optimize<T: Real>(
    seq: &TrackSequence<T>,
    observations: &Observations<T>,
    cam: &CameraIntrinsics<T>,
    skeleton: &SkeletonSpec,
    cfg: &TtoConfig,
) -> Result<TtoOutcome<T>> {
    let problem = TtoProblem::new(seq, Some(observations), cam, skeleton, cfg)?;
    let (state, trace) = optimize_problem(&problem, problem.initial_state(), cfg)?;
    Ok(TtoOutcome {
        track: problem.to_track(&state)?,
        bones: state.bones,
        trace,
    })
}

/// Runs the descent from an explicit starting state.
pub fn optimize_problem<T: Real>(
    problem: &TtoProblem<T>,
    start: TtoState<T>,
    cfg: &TtoConfig,
) -> Result<(TtoState<T>, Vec<TraceRow>)> {
    cfg.validate()?;
    let stages: &[Stage] = if cfg.two_stage { &[Stage::One, Stage::Two] } else { &[Stage::One] };
    let c_bone = T::lit(cfg.c_bone);
    let b_scale = T::one() / T::from_usize_lossy(problem.num_frames());
    let mut state = start;
    let mut trace = Vec::with_capacity(stages.len() * cfg.iters_per_stage);
    let mut iteration = 0;
    for &stage in stages {
        let c_rep = T::lit(cfg.c_rep(stage));
        let mut step = T::lit(cfg.step_size);
        let (mut terms, mut grads) = problem.gradients(&state)?;
        let mut total = terms.total(c_rep, c_bone);
        for _ in 0..cfg.iters_per_stage {
            let mut direction = grads.combined(c_rep, c_bone);
            if !direction.is_finite() || !total.is_finite() {
                return Err(Error::NonFiniteGradient {
                    iteration,
                    stage: stage.number(),
                });
            }
            if !cfg.optimize_joints {
                direction.joints.iter_mut().for_each(|g| *g = Vec3::zero());
            }
            direction.bones.iter_mut().for_each(|g| *g *= b_scale);
            let mut candidate = state.clone();
            candidate.axpy(-step, &direction);
            candidate.bones.iter_mut().for_each(|b| *b = b.max(T::zero()));
            match problem.gradients(&candidate) {
                Ok((t, g)) if t.total(c_rep, c_bone) <= total => {
                    state = candidate;
                    terms = t;
                    grads = g;
                    total = terms.total(c_rep, c_bone);
                    step *= T::lit(STEP_GROWTH);
                }
                // A step that crosses the image plane counts as a loss increase.
                Ok(_) | Err(Error::BehindCamera { .. }) => step *= T::lit(STEP_SHRINK),
                Err(e) => return Err(e),
            }
            trace.push(TraceRow {
                iteration,
                stage: stage.number(),
                l_traj: terms.traj().as_f64(),
                l_rep: terms.rep.as_f64(),
                l_bone: terms.bone.as_f64(),
                total: total.as_f64(),
            });
            iteration += 1;
        }
    }
    Ok((state, trace))
}

/// Writes the trace as CSV with a header row.
pub fn write_trace_csv<W: Write>(rows: &[TraceRow], mut out: W) -> Result<()> {
    writeln!(out, "iteration,stage,l_traj,l_rep,l_bone,total")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{:?},{:?},{:?},{:?}",
            r.iteration, r.stage, r.l_traj, r.l_rep, r.l_bone, r.total
        )?;
    }
    Ok(())
}
