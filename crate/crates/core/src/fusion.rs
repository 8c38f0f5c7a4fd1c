//! Fusion of matched top-down / bottom-up pose pairs, and the data-corruption
//! operators used to train a learned integrator.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::MatchResult;
use crate::scalar::{Real, Vec3};
use crate::skeleton::{Frame, Pose3D};

/// A learned (or otherwise external) pair integrator.
pub trait Integrator<T>: Send + Sync {
    fn integrate(&self, td: &Pose3D<T>, bu: &Pose3D<T>) -> Result<Pose3D<T>>;
}

#[derive(Clone)]
pub enum FusionStrategy<T> {
    /// Top-down person-centric pose, re-rooted at the bottom-up root depth.
    Hard,
    /// Per-joint confidence-proportional blend.
    Linear,
    /// Fixed blend `alpha * td + (1 - alpha) * bu`.
    Weighted(T),
    Pluggable(Arc<dyn Integrator<T>>),
}

impl<T: fmt::Debug> fmt::Debug for FusionStrategy<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FusionStrategy::Hard => write!(f, "Hard"),
            FusionStrategy::Linear => write!(f, "Linear"),
            FusionStrategy::Weighted(a) => write!(f, "Weighted({a:?})"),
            FusionStrategy::Pluggable(_) => write!(f, "Pluggable(..)"),
        }
    }
}

/// Serializable choice of a built-in strategy.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    Hard,
    #[default]
    Linear,
    Weighted(f64),
}

impl FusionKind {
    pub fn validate(&self) -> Result<()> {
        if let FusionKind::Weighted(a) = self {
            if !(0.0..=1.0).contains(a) {
                return Err(Error::Config(format!("fusion weight {a} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn strategy<T: Real>(&self) -> Result<FusionStrategy<T>> {
        self.validate()?;
        Ok(match *self {
            FusionKind::Hard => FusionStrategy::Hard,
            FusionKind::Linear => FusionStrategy::Linear,
            FusionKind::Weighted(a) => FusionStrategy::Weighted(T::lit(a)),
        })
    }
}

fn check_pair<T: Real>(td: &Pose3D<T>, bu: &Pose3D<T>) -> Result<()> {
    td.expect_frame(Frame::CameraCentric)?;
    bu.expect_frame(Frame::CameraCentric)?;
    if td.num_joints() != bu.num_joints() || td.root != bu.root {
        return Err(Error::InvalidArgument(format!(
            "pair skeletons differ: {} vs {} joints",
            td.num_joints(),
            bu.num_joints()
        )));
    }
    Ok(())
}

/// Fuses one matched pair. Output confidences are the per-joint maximum.
pub fn fuse_pair<T: Real>(
    td: &Pose3D<T>,
    bu: &Pose3D<T>,
    strategy: &FusionStrategy<T>,
) -> Result<Pose3D<T>> {
    check_pair(td, bu)?;
    let conf: Vec<T> = td.conf.iter().zip(&bu.conf).map(|(a, b)| a.max(*b)).collect();
    let joints: Vec<Vec3<T>> = match strategy {
        FusionStrategy::Hard => {
            let td_root = td.root_position();
            let root = Vec3::new(td_root.x, td_root.y, bu.root_position().z);
            td.joints.iter().map(|&j| j - td_root + root).collect()
        }
        FusionStrategy::Linear => td
            .joints
            .iter()
            .zip(&bu.joints)
            .zip(td.conf.iter().zip(&bu.conf))
            .map(|((&a, &b), (&ca, &cb))| {
                let total = ca + cb;
                // Written as an offset so identical inputs fuse exactly.
                if total > T::zero() {
                    a + (b - a) * (cb / total)
                } else if cb > ca {
                    b
                } else {
                    a
                }
            })
            .collect(),
        FusionStrategy::Weighted(alpha) => {
            let alpha = *alpha;
            if !(alpha >= T::zero() && alpha <= T::one()) {
                return Err(Error::InvalidArgument(format!("weight {alpha} outside [0, 1]")));
            }
            td.joints
                .iter()
                .zip(&bu.joints)
                .map(|(&a, &b)| b + (a - b) * alpha)
                .collect()
        }
        FusionStrategy::Pluggable(integrator) => {
            let out = integrator.integrate(td, bu)?;
            out.expect_frame(Frame::CameraCentric)?;
            return Ok(out);
        }
    };
    Pose3D::new(joints, conf, Frame::CameraCentric, td.root)
}

/// Where a fused pose came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Pair { td: usize, bu: usize },
    TopDownOnly(usize),
    BottomUpOnly(usize),
}

/// Fuses all pairs of a frame and passes unmatched poses through. Output
/// order: pairs, then unmatched top-down, then unmatched bottom-up.
pub fn fuse_frame<T: Real>(
    matches: &MatchResult<T>,
    td: &[Pose3D<T>],
    bu: &[Pose3D<T>],
    strategy: &FusionStrategy<T>,
) -> Result<Vec<(Pose3D<T>, Provenance)>> {
    fn get<P>(set: &[P], i: usize) -> Result<&P> {
        set.get(i).ok_or(Error::IndexOutOfRange {
            index: i,
            len: set.len(),
        })
    }
    let mut out = Vec::with_capacity(
        matches.pairs.len() + matches.unmatched_td.len() + matches.unmatched_bu.len(),
    );
    for &(i, j, _) in &matches.pairs {
        out.push((
            fuse_pair(get(td, i)?, get(bu, j)?, strategy)?,
            Provenance::Pair { td: i, bu: j },
        ));
    }
    for &i in &matches.unmatched_td {
        out.push((get(td, i)?.clone(), Provenance::TopDownOnly(i)));
    }
    for &j in &matches.unmatched_bu {
        out.push((get(bu, j)?.clone(), Provenance::BottomUpOnly(j)));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptionConfig {
    pub mask_rate: f64,
    /// Standard deviation of the per-coordinate joint shift, mm.
    pub shift_sigma: f64,
    pub drop_rate: f64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self {
            mask_rate: 0.1,
            shift_sigma: 20.0,
            drop_rate: 0.1,
        }
    }
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("mask_rate", self.mask_rate), ("drop_rate", self.drop_rate)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("{name} {r} outside [0, 1]")));
            }
        }
        if !(self.shift_sigma >= 0.0 && self.shift_sigma.is_finite()) {
            return Err(Error::Config(format!("shift_sigma {} must be >= 0", self.shift_sigma)));
        }
        Ok(())
    }
}

/// Training-time corruption of a `(td, bu)` pair: random joint masking
/// (confidence 0), Gaussian joint shifts, and zeroing one side of the pair.
/// Deterministic for a fixed seed.
pub fn corrupt_pair<T: Real>(
    pair: (&Pose3D<T>, &Pose3D<T>),
    seed: u64,
    cfg: &CorruptionConfig,
) -> Result<(Pose3D<T>, Pose3D<T>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = T::lit(cfg.shift_sigma);
    let mut corrupt = |pose: &Pose3D<T>| {
        let mut out = pose.clone();
        for k in 0..out.num_joints() {
            if rng.random::<f64>() < cfg.mask_rate {
                out.conf[k] = T::zero();
            }
            let n: [f64; 3] = [
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
            ];
            if cfg.shift_sigma > 0.0 {
                out.joints[k] += Vec3::new(T::lit(n[0]), T::lit(n[1]), T::lit(n[2])) * sigma;
            }
        }
        out
    };
    let mut td = corrupt(pair.0);
    let mut bu = corrupt(pair.1);
    if rng.random::<f64>() < cfg.drop_rate {
        let victim = if rng.random::<bool>() { &mut td } else { &mut bu };
        victim.joints.iter_mut().for_each(|j| *j = Vec3::zero());
        victim.conf.iter_mut().for_each(|c| *c = T::zero());
    }
    Ok((td, bu))
}
