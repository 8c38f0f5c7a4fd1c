//! Synthetic multi-person scenes with exact ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::camera::{project, rotate_point_about_y, CameraIntrinsics};
use crate::error::{Error, Result};
use crate::heatmap::{render_stack, HeatmapStack, RenderConfig};
use crate::io::{FrameRecord, PersonRecord, Source};
use crate::scalar::Vec3;
use crate::skeleton::{Pose2D, Pose3D, SkeletonSpec, TrackSequence};

/// Rest pose of the 15-joint skeleton relative to the pelvis, mm, for a
/// person facing the camera (y points down, z away from the camera).
/// Elbows and knees are slightly bent so no limb is degenerate.
pub fn rest_pose_offsets(scale: f64) -> Vec<Vec3<f64>> {
    let (s20, c20) = 20f64.to_radians().sin_cos();
    let (s10, c10) = 10f64.to_radians().sin_cos();
    let arm = |side: f64| {
        let shoulder = Vec3::new(180.0 * side, -500.0, 0.0);
        let elbow = shoulder + Vec3::new(0.0, 280.0, 0.0);
        let wrist = elbow + Vec3::new(0.0, 250.0 * c20, -250.0 * s20);
        [shoulder, elbow, wrist]
    };
    let leg = |side: f64| {
        let hip = Vec3::new(120.0 * side, 0.0, 0.0);
        let knee = hip + Vec3::new(0.0, 420.0 * c10, -420.0 * s10);
        let ankle = knee + Vec3::new(0.0, 400.0 * c10, 400.0 * s10);
        [hip, knee, ankle]
    };
    let mut out = vec![Vec3::zero(), Vec3::new(0.0, -500.0, 0.0), Vec3::new(0.0, -700.0, 0.0)];
    out.extend(arm(-1.0));
    out.extend(arm(1.0));
    out.extend(leg(-1.0));
    out.extend(leg(1.0));
    out.into_iter().map(|o| o * scale).collect()
}

/// Root trajectory or articulation model, with `t` in frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Motion {
    Static,
    /// Root moves by `velocity` mm per frame.
    Linear { velocity: [f64; 3] },
    /// Root offset `c1 t + c2 t^2 + c3 t^3`, rigid body.
    Polynomial { coeffs: [[f64; 3]; 3] },
    /// Each non-root joint oscillates along its own axis with a
    /// joint-dependent phase; bone lengths vary.
    Sinusoidal { amplitude: f64, period: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonSpec {
    /// Pelvis position at frame 0, mm.
    pub start: [f64; 3],
    /// Rotation about the vertical axis, rad.
    pub yaw: f64,
    pub scale: f64,
    pub motion: Motion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    /// Gaussian noise per coordinate of the 3D estimates, mm.
    pub sigma_3d: f64,
    /// Gaussian noise per coordinate of the 2D observations, px.
    pub sigma_2d: f64,
    /// Confidence is `conf_base + conf_jitter * U(-1, 1)`, clamped to [0, 1].
    pub conf_base: f64,
    pub conf_jitter: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            sigma_3d: 0.0,
            sigma_2d: 0.0,
            conf_base: 1.0,
            conf_jitter: 0.0,
        }
    }
}

/// The top-down branch misses `person` for frames `start..end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapEvent {
    pub person: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct OcclusionSpec {
    /// Probability that a joint is reported with confidence 0.
    pub drop_prob: f64,
    pub overlap: Vec<OverlapEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSpec {
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub render: RenderConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub persons: Vec<PersonSpec>,
    pub num_frames: usize,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub occlusion: OcclusionSpec,
    #[serde(default)]
    pub heatmaps: Option<HeatmapSpec>,
    #[serde(default)]
    pub seed: u64,
}

impl SceneSpec {
    /// Benchmark scene: persons side by side at 4-6 m walking along random
    /// smooth cubic paths, 3D noise `sigma_3d`, exact 2D observations.
    pub fn benchmark(num_persons: usize, num_frames: usize, sigma_3d: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5ce7e);
        let n = num_frames.max(1) as f64;
        let persons = (0..num_persons)
            .map(|i| {
                let mut c = [[0.0; 3]; 3];
                for axis in [0, 2] {
                    c[0][axis] = rng.random_range(-6.0..6.0);
                    c[1][axis] = rng.random_range(-1.0..1.0) * 300.0 / (n * n);
                    c[2][axis] = rng.random_range(-1.0..1.0) * 300.0 / (n * n * n);
                }
                PersonSpec {
                    start: [
                        (i as f64 - (num_persons as f64 - 1.0) / 2.0) * 1300.0,
                        rng.random_range(-50.0..50.0),
                        4500.0 + 600.0 * (i % 2) as f64,
                    ],
                    yaw: rng.random_range(-0.6..0.6),
                    scale: rng.random_range(0.9..1.1),
                    motion: Motion::Polynomial { coeffs: c },
                }
            })
            .collect();
        Self {
            persons,
            num_frames,
            noise: NoiseSpec {
                sigma_3d,
                ..NoiseSpec::default()
            },
            occlusion: OcclusionSpec::default(),
            heatmaps: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_frames == 0 {
            return Err(Error::Config("num_frames must be >= 1".into()));
        }
        let p = self.occlusion.drop_prob;
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("drop probability {p} outside [0, 1]")));
        }
        let n = &self.noise;
        for (name, v) in [
            ("sigma_3d", n.sigma_3d),
            ("sigma_2d", n.sigma_2d),
            ("conf_jitter", n.conf_jitter),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&n.conf_base) {
            return Err(Error::Config(format!("conf_base {} outside [0, 1]", n.conf_base)));
        }
        for e in &self.occlusion.overlap {
            if e.person >= self.persons.len() || e.start > e.end {
                return Err(Error::Config(format!("invalid overlap event {e:?}")));
            }
        }
        for (i, p) in self.persons.iter().enumerate() {
            if !(p.scale > 0.0) {
                return Err(Error::Config(format!("person {i} has non-positive scale")));
            }
            if let Motion::Sinusoidal { period, .. } = p.motion {
                if !(period > 0.0) {
                    return Err(Error::Config(format!("person {i} has non-positive period")));
                }
            }
        }
        Ok(())
    }
}

/// Ground-truth joint positions of one person at frame `t`.
pub fn person_pose(p: &PersonSpec, t: usize, rest: &[Vec3<f64>]) -> Vec<Vec3<f64>> {
    let tf = t as f64;
    let start = Vec3::from_array(p.start);
    let root = match &p.motion {
        Motion::Static | Motion::Sinusoidal { .. } => start,
        Motion::Linear { velocity } => start + Vec3::from_array(*velocity) * tf,
        Motion::Polynomial { coeffs } => {
            start
                + Vec3::from_array(coeffs[0]) * tf
                + Vec3::from_array(coeffs[1]) * (tf * tf)
                + Vec3::from_array(coeffs[2]) * (tf * tf * tf)
        }
    };
    rest.iter()
        .enumerate()
        .map(|(k, &o)| {
            let mut off = rotate_point_about_y(o * p.scale, p.yaw, Vec3::zero());
            if let Motion::Sinusoidal { amplitude, period } = p.motion {
                if k != 0 {
                    let phase = 0.9 * k as f64;
                    let s = amplitude * (std::f64::consts::TAU * tf / period + phase).sin();
                    off[k % 3] += s;
                }
            }
            root + off
        })
        .collect()
}

/// A person's estimate in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub person_id: u64,
    pub pose: Pose3D<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub gt_tracks: Vec<TrackSequence<f64>>,
    /// Per frame, the persons the top-down branch reports.
    pub noisy_td: Vec<Vec<Detection>>,
    /// Per frame, every person as seen by the bottom-up branch.
    pub noisy_bu: Vec<Vec<Detection>>,
    /// Per frame, per person (in person order) 2D observations.
    pub obs_2d: Vec<Vec<Pose2D<f64>>>,
    pub heatmaps: Option<Vec<HeatmapStack<f64>>>,
}

/// A scene as frame files: top-down, bottom-up (unlabeled), ground truth
/// and 2D observations.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecords {
    pub td: Vec<FrameRecord>,
    pub bu: Vec<FrameRecord>,
    pub gt: Vec<FrameRecord>,
    pub obs: Vec<FrameRecord>,
}

impl Scene {
    /// Ground-truth poses of frame `t`, in person order.
    pub fn gt_frame(&self, t: usize) -> Vec<Pose3D<f64>> {
        self.gt_tracks.iter().filter_map(|tr| tr.get(t).cloned()).collect()
    }

    pub fn records(&self) -> SceneRecords {
        let frames = self.noisy_td.len();
        let record = |f: usize, source: Source, persons: Vec<PersonRecord>| FrameRecord {
            frame_index: f,
            source,
            persons,
        };
        SceneRecords {
            td: (0..frames)
                .map(|f| {
                    let p = self.noisy_td[f].iter().map(|d| PersonRecord::from_pose3d(Some(d.person_id), &d.pose));
                    record(f, Source::Td, p.collect())
                })
                .collect(),
            bu: (0..frames)
                .map(|f| {
                    let p = self.noisy_bu[f].iter().map(|d| PersonRecord::from_pose3d(None, &d.pose));
                    record(f, Source::Bu, p.collect())
                })
                .collect(),
            gt: (0..frames)
                .map(|f| {
                    let p = self.gt_tracks.iter().filter_map(|tr| {
                        tr.get(f).map(|pose| PersonRecord::from_pose3d(Some(tr.person_id), pose))
                    });
                    record(f, Source::Gt, p.collect())
                })
                .collect(),
            obs: (0..frames)
                .map(|f| {
                    let p = self.obs_2d[f]
                        .iter()
                        .enumerate()
                        .map(|(i, o)| PersonRecord::from_pose2d(Some(i as u64), o));
                    record(f, Source::Obs, p.collect())
                })
                .collect(),
        }
    }
}

struct Perturb<'a> {
    rng: &'a mut ChaCha8Rng,
    noise: &'a NoiseSpec,
    drop_prob: f64,
}

impl Perturb<'_> {
    // Every draw happens regardless of the configured magnitudes so the
    // random stream layout does not depend on them.
    fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    fn confidences(&mut self, k: usize) -> Vec<f64> {
        (0..k)
            .map(|_| {
                let jitter: f64 = self.rng.random_range(-1.0..=1.0);
                let dropped = self.rng.random::<f64>() < self.drop_prob;
                if dropped {
                    0.0
                } else {
                    (self.noise.conf_base + self.noise.conf_jitter * jitter).clamp(0.0, 1.0)
                }
            })
            .collect()
    }

    fn pose3d(&mut self, gt: &[Vec3<f64>]) -> Result<Pose3D<f64>> {
        let s = self.noise.sigma_3d;
        let joints = gt
            .iter()
            .map(|&j| {
                let d = Vec3::new(self.normal(), self.normal(), self.normal());
                if s == 0.0 {
                    j
                } else {
                    j + d * s
                }
            })
            .collect();
        let conf = self.confidences(gt.len());
        Pose3D::new(joints, conf, crate::skeleton::Frame::CameraCentric, 0)
    }

    fn pose2d(&mut self, gt: &[Vec3<f64>], cam: &CameraIntrinsics<f64>) -> Result<Pose2D<f64>> {
        let s = self.noise.sigma_2d;
        let mut joints = Vec::with_capacity(gt.len());
        for &j in gt {
            let uv = project(j, cam)?;
            let (du, dv) = (self.normal(), self.normal());
            joints.push(if s == 0.0 { uv } else { [uv[0] + du * s, uv[1] + dv * s] });
        }
        let conf = self.confidences(gt.len());
        Pose2D::new(joints, conf)
    }
}

/// Generates a scene. Deterministic in `spec.seed`.
pub fn generate(spec: &SceneSpec, skeleton: &SkeletonSpec, cam: &CameraIntrinsics<f64>) -> Result<Scene> {
    spec.validate()?;
    if skeleton.num_joints() != 15 || skeleton.root_index != 0 {
        return Err(Error::InvalidSkeleton(
            "synthetic scenes use the 15-joint skeleton rooted at the pelvis".into(),
        ));
    }
    let rest = rest_pose_offsets(1.0);
    let mut gt_tracks: Vec<TrackSequence<f64>> =
        (0..spec.persons.len()).map(|i| TrackSequence::new(i as u64)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut noisy_td = Vec::with_capacity(spec.num_frames);
    let mut noisy_bu = Vec::with_capacity(spec.num_frames);
    let mut obs_2d = Vec::with_capacity(spec.num_frames);
    let mut heatmaps = spec.heatmaps.as_ref().map(|_| Vec::with_capacity(spec.num_frames));
    for t in 0..spec.num_frames {
        let mut td = Vec::new();
        let mut bu = Vec::new();
        let mut obs = Vec::new();
        let mut gt_frame = Vec::new();
        for (i, person) in spec.persons.iter().enumerate() {
            let joints = person_pose(person, t, &rest);
            if let Some(j) = joints.iter().find(|j| !(j.z > 0.0)) {
                return Err(Error::InvalidArgument(format!(
                    "person {i} frame {t}: ground-truth joint behind the camera (z = {})",
                    j.z
                )));
            }
            let gt = Pose3D::camera(joints.clone(), 0)?;
            gt_tracks[i].insert(t, gt.clone())?;
            gt_frame.push(gt);
            let mut p = Perturb {
                rng: &mut rng,
                noise: &spec.noise,
                drop_prob: spec.occlusion.drop_prob,
            };
            let td_pose = p.pose3d(&joints)?;
            let bu_pose = p.pose3d(&joints)?;
            obs.push(p.pose2d(&joints, cam)?);
            let hidden = spec
                .occlusion
                .overlap
                .iter()
                .any(|e| e.person == i && (e.start..e.end).contains(&t));
            if !hidden {
                td.push(Detection {
                    person_id: i as u64,
                    pose: td_pose,
                });
            }
            bu.push(Detection {
                person_id: i as u64,
                pose: bu_pose,
            });
        }
        if let (Some(maps), Some(h)) = (heatmaps.as_mut(), spec.heatmaps.as_ref()) {
            maps.push(render_stack(&gt_frame, cam, h.width, h.height, 15, &h.render)?);
        }
        noisy_td.push(td);
        noisy_bu.push(bu);
        obs_2d.push(obs);
    }
    Ok(Scene {
        gt_tracks,
        noisy_td,
        noisy_bu,
        obs_2d,
        heatmaps,
    })
}
