//! Interaction-aware plausibility: composition of a single-person scorer and
//! a two-person scorer, the adversarial loss on that composite, and
//! deterministic geometric reference scorers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{Real, Vec3};
use crate::skeleton::{bone_lengths, to_person_centric, Frame, Pose3D, SkeletonSpec};

/// Single-person (`d1`, person-centric input) and two-person (`d2`,
/// camera-centric inputs) plausibility scorers. Outputs must lie strictly
/// inside `(0, 1)`.
pub trait PlausibilityScorers<T> {
    fn d1(&self, pose: &Pose3D<T>) -> T;
    fn d2(&self, a: &Pose3D<T>, b: &Pose3D<T>) -> T;
}

fn check_open_unit<T: Real>(v: T) -> Result<T> {
    if v > T::zero() && v < T::one() {
        Ok(v)
    } else {
        Err(Error::ScorerContract { value: v.as_f64() })
    }
}

/// `C = 0.25 (D1(a) + D1(b)) + 0.5 D2(a, b)`, with `D1` evaluated on the
/// person-centric reductions.
pub fn discriminator_score<T: Real, S: PlausibilityScorers<T> + ?Sized>(
    a: &Pose3D<T>,
    b: &Pose3D<T>,
    scorers: &S,
) -> Result<T> {
    a.expect_frame(Frame::CameraCentric)?;
    b.expect_frame(Frame::CameraCentric)?;
    let (a_pc, _) = to_person_centric(a)?;
    let (b_pc, _) = to_person_centric(b)?;
    let d1a = check_open_unit(scorers.d1(&a_pc))?;
    let d1b = check_open_unit(scorers.d1(&b_pc))?;
    let d2 = check_open_unit(scorers.d2(a, b))?;
    Ok(T::lit(0.25) * (d1a + d1b) + T::lit(0.5) * d2)
}

/// `log(C_real) + log(1 - C_fake)`.
pub fn discriminator_loss<T: Real>(real_score: T, fake_score: T) -> Result<T> {
    for (what, v) in [("real pair score", real_score), ("fake pair score", fake_score)] {
        if !(v > T::zero() && v < T::one()) {
            return Err(Error::Domain {
                what,
                value: v.as_f64(),
            });
        }
    }
    Ok(real_score.ln() + (T::one() - fake_score).ln())
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn clamp_open<T: Real>(v: T) -> T {
    let eps = T::epsilon();
    v.max(eps).min(T::one() - eps)
}

/// Closest distance between segments `p0-p1` and `q0-q1`.
pub fn segment_distance<T: Real>(p0: Vec3<T>, p1: Vec3<T>, q0: Vec3<T>, q1: Vec3<T>) -> T {
    let d1 = p1 - p0;
    let d2 = q1 - q0;
    let r = p0 - q0;
    let a = d1.norm_squared();
    let e = d2.norm_squared();
    let f = d2.dot(r);
    let tiny = T::epsilon();
    let (s, t);
    if a <= tiny && e <= tiny {
        return r.norm();
    }
    if a <= tiny {
        s = T::zero();
        t = (f / e).max(T::zero()).min(T::one());
    } else {
        let c = d1.dot(r);
        if e <= tiny {
            t = T::zero();
            s = (-c / a).max(T::zero()).min(T::one());
        } else {
            let b = d1.dot(d2);
            let denom = a * e - b * b;
            let mut s0 = if denom > tiny {
                ((b * f - c * e) / denom).max(T::zero()).min(T::one())
            } else {
                T::zero()
            };
            let mut t0 = (b * s0 + f) / e;
            if t0 < T::zero() {
                t0 = T::zero();
                s0 = (-c / a).max(T::zero()).min(T::one());
            } else if t0 > T::one() {
                t0 = T::one();
                s0 = ((b - c) / a).max(T::zero()).min(T::one());
            }
            s = s0;
            t = t0;
        }
    }
    ((p0 + d1 * s) - (q0 + d2 * t)).norm()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeometricScorerConfig {
    /// Reference bone lengths, mm, in skeleton bone order.
    pub rest_lengths: Vec<f64>,
    /// Allowed relative deviation from the rest length.
    pub length_tolerance: f64,
    pub length_softness: f64,
    /// `(parent, hinge, child)` joint triples (elbows, knees).
    pub hinges: Vec<(usize, usize, usize)>,
    pub min_angle_deg: f64,
    pub max_angle_deg: f64,
    pub angle_softness_deg: f64,
    /// Limb capsule radius, mm.
    pub capsule_radius: f64,
    pub clearance_softness: f64,
}

/// Rest bone lengths of the default 15-joint skeleton, mm.
pub const MUPOTS15_REST_LENGTHS: [f64; 14] = [
    500.0, 200.0, 180.0, 280.0, 250.0, 180.0, 280.0, 250.0, 120.0, 420.0, 400.0, 120.0, 420.0,
    400.0,
];

impl Default for GeometricScorerConfig {
    fn default() -> Self {
        Self {
            rest_lengths: MUPOTS15_REST_LENGTHS.to_vec(),
            length_tolerance: 0.3,
            length_softness: 0.05,
            hinges: vec![(3, 4, 5), (6, 7, 8), (9, 10, 11), (12, 13, 14)],
            min_angle_deg: 0.0,
            max_angle_deg: 180.0,
            angle_softness_deg: 10.0,
            capsule_radius: 80.0,
            clearance_softness: 40.0,
        }
    }
}

/// Deterministic stand-ins for learned discriminators.
///
/// `d1` is a product of sigmoid penalties: one per bone on the relative
/// deviation from its rest length beyond the tolerance band, and two per
/// hinge on the interior angle leaving `[min, max]` (evaluated with a
/// margin of five softness widths). `d2` is a sigmoid of the signed
/// clearance between the two skeletons' limb capsules.
#[derive(Debug, Clone, Default)]
pub struct GeometricScorers {
    pub skeleton: SkeletonSpec,
    pub config: GeometricScorerConfig,
}

impl GeometricScorers {
    pub fn new(skeleton: SkeletonSpec, config: GeometricScorerConfig) -> Result<Self> {
        if config.rest_lengths.len() != skeleton.num_bones() {
            return Err(Error::Config(format!(
                "{} rest lengths for {} bones",
                config.rest_lengths.len(),
                skeleton.num_bones()
            )));
        }
        let k = skeleton.num_joints();
        if config.hinges.iter().any(|&(a, b, c)| a >= k || b >= k || c >= k) {
            return Err(Error::Config("hinge joint index out of range".into()));
        }
        Ok(Self { skeleton, config })
    }

    /// Signed clearance between the capsule sets of two poses, mm.
    pub fn clearance<T: Real>(&self, a: &Pose3D<T>, b: &Pose3D<T>) -> T {
        let mut best = T::infinity();
        for &(p, c) in &self.skeleton.bones {
            for &(q, d) in &self.skeleton.bones {
                let dist = segment_distance(a.joints[p], a.joints[c], b.joints[q], b.joints[d]);
                best = best.min(dist);
            }
        }
        best - T::lit(2.0 * self.config.capsule_radius)
    }
}

impl<T: Real> PlausibilityScorers<T> for GeometricScorers {
    fn d1(&self, pose: &Pose3D<T>) -> T {
        let cfg = &self.config;
        let mut score = T::one();
        for (len, rest) in bone_lengths(pose, &self.skeleton).iter().zip(&cfg.rest_lengths) {
            let dev = (*len / T::lit(*rest) - T::one()).abs();
            score *= sigmoid((T::lit(cfg.length_tolerance) - dev) / T::lit(cfg.length_softness));
        }
        let soft = T::lit(cfg.angle_softness_deg.to_radians());
        let margin = soft * T::lit(5.0);
        let lo = T::lit(cfg.min_angle_deg.to_radians());
        let hi = T::lit(cfg.max_angle_deg.to_radians());
        for &(a, h, c) in &cfg.hinges {
            let u = pose.joints[a] - pose.joints[h];
            let v = pose.joints[c] - pose.joints[h];
            let denom = u.norm() * v.norm();
            let angle = if denom > T::zero() {
                (u.dot(v) / denom).max(-T::one()).min(T::one()).acos()
            } else {
                T::zero()
            };
            score *= sigmoid((angle - lo + margin) / soft) * sigmoid((hi - angle + margin) / soft);
        }
        clamp_open(score)
    }

    fn d2(&self, a: &Pose3D<T>, b: &Pose3D<T>) -> T {
        let c = self.clearance(a, b);
        clamp_open(sigmoid(c / T::lit(self.config.clearance_softness)))
    }
}
