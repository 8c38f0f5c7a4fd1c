//! Pairing of top-down and bottom-up pose sets by confidence-weighted OKS
//! similarity and optimal assignment.

use serde::{Deserialize, Serialize};

use crate::assignment::max_weight_matching_lex;
use crate::camera::{project, CameraIntrinsics};
use crate::error::{Error, Result};
use crate::scalar::{Real, Vec3};
use crate::skeleton::{Frame, Pose3D, SkeletonSpec};

/// Object keypoint similarity of two joints: `exp(-d^2 / (2 s^2 sigma^2))`.
#[inline]
pub fn oks<T: Real>(a: Vec3<T>, b: Vec3<T>, s: T, sigma: T) -> T {
    let d2 = (a - b).norm_squared();
    (-d2 / (T::lit(2.0) * s * s * sigma * sigma)).exp()
}

/// Where joint distances are measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceSpace {
    /// Camera-centric 3D distances in mm.
    #[default]
    Camera3d,
    /// Distances between projections, in px.
    Image2d,
}

/// How the OKS scale of a pose pair is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleSource {
    /// Square root of the mean axis-aligned x/y bounding-box area of the two
    /// poses (mm^2 in 3D, px^2 in the image).
    BoxArea,
    /// Constant scale in the units of the distance space.
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    /// Unitless multiplier on the pair scale.
    pub s: f64,
    pub scale_source: ScaleSource,
    pub sigma_override: Option<Vec<f64>>,
    /// Minimum similarity for a valid pair, as a fraction of the joint count.
    pub tau_match: f64,
    pub space: DistanceSpace,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            s: 1.0,
            scale_source: ScaleSource::BoxArea,
            sigma_override: None,
            tau_match: 0.1,
            space: DistanceSpace::Camera3d,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.s > 0.0 && self.s.is_finite()) {
            return Err(Error::Config(format!("match s must be positive, got {}", self.s)));
        }
        if !(0.0..=1.0).contains(&self.tau_match) {
            return Err(Error::Config(format!(
                "tau_match must lie in [0, 1], got {}",
                self.tau_match
            )));
        }
        if let ScaleSource::Fixed(v) = self.scale_source {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("fixed scale must be positive, got {v}")));
            }
        }
        if let Some(s) = &self.sigma_override {
            if s.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::Config("sigma_override entries must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Resolved matching parameters for one skeleton and camera.
#[derive(Debug, Clone)]
pub struct MatchContext<T> {
    pub sigmas: Vec<T>,
    pub s: T,
    pub scale_source: ScaleSource,
    pub space: DistanceSpace,
    pub camera: Option<CameraIntrinsics<T>>,
    /// Absolute similarity threshold (`tau_match * K`).
    pub threshold: T,
}

impl<T: Real> MatchContext<T> {
    pub fn new(
        cfg: &MatchConfig,
        skeleton: &SkeletonSpec,
        camera: Option<CameraIntrinsics<T>>,
    ) -> Result<Self> {
        cfg.validate()?;
        let sigmas = cfg.sigma_override.as_ref().unwrap_or(&skeleton.oks_sigma);
        if sigmas.len() != skeleton.num_joints() {
            return Err(Error::Config(format!(
                "{} OKS sigmas for {} joints",
                sigmas.len(),
                skeleton.num_joints()
            )));
        }
        if cfg.space == DistanceSpace::Image2d && camera.is_none() {
            return Err(Error::Config("image-space matching needs camera intrinsics".into()));
        }
        Ok(Self {
            sigmas: sigmas.iter().map(|&v| T::lit(v)).collect(),
            s: T::lit(cfg.s),
            scale_source: cfg.scale_source,
            space: cfg.space,
            camera,
            threshold: T::lit(cfg.tau_match) * T::from_usize_lossy(skeleton.num_joints()),
        })
    }

    fn points(&self, pose: &Pose3D<T>) -> Result<Vec<Vec3<T>>> {
        match self.space {
            DistanceSpace::Camera3d => Ok(pose.joints.clone()),
            DistanceSpace::Image2d => {
                let cam = self.camera.as_ref().expect("checked in new");
                pose.joints
                    .iter()
                    .map(|&j| project(j, cam).map(|uv| Vec3::new(uv[0], uv[1], T::zero())))
                    .collect()
            }
        }
    }

    fn box_area(points: &[Vec3<T>]) -> T {
        let (mut lo, mut hi) = (points[0], points[0]);
        for p in points {
            lo.x = lo.x.min(p.x);
            lo.y = lo.y.min(p.y);
            hi.x = hi.x.max(p.x);
            hi.y = hi.y.max(p.y);
        }
        (hi.x - lo.x) * (hi.y - lo.y)
    }

    fn pair_scale(&self, a: &[Vec3<T>], b: &[Vec3<T>]) -> T {
        match self.scale_source {
            ScaleSource::Fixed(v) => self.s * T::lit(v),
            ScaleSource::BoxArea => {
                let area = (Self::box_area(a) + Self::box_area(b)) / T::lit(2.0);
                self.s * area.max(T::one()).sqrt()
            }
        }
    }
}

/// `sum_k min(c_bu[k], c_td[k]) * OKS(bu_k, td_k)`.
pub fn pose_similarity<T: Real>(bu: &Pose3D<T>, td: &Pose3D<T>, ctx: &MatchContext<T>) -> Result<T> {
    bu.expect_frame(Frame::CameraCentric)?;
    td.expect_frame(Frame::CameraCentric)?;
    if bu.num_joints() != td.num_joints() || bu.num_joints() != ctx.sigmas.len() {
        return Err(Error::InvalidArgument(format!(
            "joint counts differ: {} vs {} (skeleton {})",
            bu.num_joints(),
            td.num_joints(),
            ctx.sigmas.len()
        )));
    }
    let pa = ctx.points(bu)?;
    let pb = ctx.points(td)?;
    let s = ctx.pair_scale(&pa, &pb);
    let mut sim = T::zero();
    for k in 0..pa.len() {
        let w = bu.conf[k].min(td.conf[k]);
        if w > T::zero() {
            sim += w * oks(pa[k], pb[k], s, ctx.sigmas[k]);
        }
    }
    Ok(sim)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult<T> {
    /// `(td_index, bu_index, similarity)`, sorted by `td_index`.
    pub pairs: Vec<(usize, usize, T)>,
    pub unmatched_td: Vec<usize>,
    pub unmatched_bu: Vec<usize>,
}

impl<T: Real> MatchResult<T> {
    pub fn total_similarity(&self) -> T {
        self.pairs.iter().fold(T::zero(), |a, p| a + p.2)
    }
}

/// Full similarity matrix, rows = top-down poses, columns = bottom-up poses.
pub fn similarity_matrix<T: Real>(
    td: &[Pose3D<T>],
    bu: &[Pose3D<T>],
    ctx: &MatchContext<T>,
) -> Result<Vec<Vec<T>>> {
    td.iter()
        .map(|t| bu.iter().map(|b| pose_similarity(b, t, ctx)).collect())
        .collect()
}

/// Optimal one-to-one pairing maximising total similarity over pairs whose
/// similarity reaches the threshold.
pub fn match_sets<T: Real>(
    td: &[Pose3D<T>],
    bu: &[Pose3D<T>],
    ctx: &MatchContext<T>,
) -> Result<MatchResult<T>> {
    let sims = similarity_matrix(td, bu, ctx)?;
    let weights: Vec<Vec<Option<T>>> = sims
        .iter()
        .map(|row| {
            row.iter()
                .map(|&s| (s >= ctx.threshold).then_some(s))
                .collect()
        })
        .collect();
    let chosen = max_weight_matching_lex(&weights);
    let mut td_used = vec![false; td.len()];
    let mut bu_used = vec![false; bu.len()];
    let pairs: Vec<(usize, usize, T)> = chosen
        .into_iter()
        .map(|(i, j)| {
            td_used[i] = true;
            bu_used[j] = true;
            (i, j, sims[i][j])
        })
        .collect();
    Ok(MatchResult {
        pairs,
        unmatched_td: (0..td.len()).filter(|&i| !td_used[i]).collect(),
        unmatched_bu: (0..bu.len()).filter(|&j| !bu_used[j]).collect(),
    })
}
