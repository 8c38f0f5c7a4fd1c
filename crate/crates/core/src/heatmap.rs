//! Joint heatmaps, associative-embedding tag maps and depth maps: rendering
//! from known poses, and decoding back into grouped camera-centric poses.
//!
//! Decoding follows the usual bottom-up recipe. Peaks are local maxima of
//! each joint map, refined by a quarter pixel toward the larger neighbour.
//! Peaks are grouped into persons by the tag value under them, and the
//! absolute root depth plus per-joint relative depths are sampled where the
//! joints land.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::camera::{back_project, project, CameraIntrinsics};
use crate::error::{Error, Result};
use crate::scalar::{Real, Vec3};
use crate::skeleton::{Frame, Pose2D, Pose3D};

/// Row-major scalar image.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Real> Grid<T> {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, T::zero())
    }

    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    fn check_inside(&self, u: T, v: T) -> Result<()> {
        let w = T::from_usize_lossy(self.width - 1);
        let h = T::from_usize_lossy(self.height - 1);
        if !(u >= T::zero() && v >= T::zero() && u <= w && v <= h) {
            return Err(Error::OutOfBounds {
                u: u.as_f64(),
                v: v.as_f64(),
                width: self.width,
                height: self.height,
            });
        }
        Ok(())
    }

    /// Bilinear interpolation; exact at integer coordinates.
    pub fn sample_bilinear(&self, u: T, v: T) -> Result<T> {
        self.check_inside(u, v)?;
        let x0 = u.floor();
        let y0 = v.floor();
        let fx = u - x0;
        let fy = v - y0;
        let x0 = x0.to_usize().unwrap_or(0);
        let y0 = y0.to_usize().unwrap_or(0);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let one = T::one();
        Ok(self.get(x0, y0) * (one - fx) * (one - fy)
            + self.get(x1, y0) * fx * (one - fy)
            + self.get(x0, y1) * (one - fx) * fy
            + self.get(x1, y1) * fx * fy)
    }

    pub fn sample_nearest(&self, u: T, v: T) -> Result<T> {
        self.check_inside(u, v)?;
        let x = u.round().to_usize().unwrap_or(0).min(self.width - 1);
        let y = v.round().to_usize().unwrap_or(0).min(self.height - 1);
        Ok(self.get(x, y))
    }
}

/// The four map groups of the bottom-up branch on one image grid.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack<T> {
    pub width: usize,
    pub height: usize,
    pub joint_maps: Vec<Grid<T>>,
    pub tag_maps: Vec<Grid<T>>,
    pub rel_depth_maps: Vec<Grid<T>>,
    pub root_depth_map: Grid<T>,
}

impl<T: Real> HeatmapStack<T> {
    pub fn zeros(num_joints: usize, width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            joint_maps: vec![Grid::new(width, height); num_joints],
            tag_maps: vec![Grid::new(width, height); num_joints],
            rel_depth_maps: vec![Grid::new(width, height); num_joints],
            root_depth_map: Grid::new(width, height),
        }
    }

    pub fn num_joints(&self) -> usize {
        self.joint_maps.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.joint_maps.len();
        if self.tag_maps.len() != k || self.rel_depth_maps.len() != k {
            return Err(Error::Format("map groups have different joint counts".into()));
        }
        let dims_ok = |g: &Grid<T>| {
            g.width == self.width && g.height == self.height && g.data.len() == g.width * g.height
        };
        if !(self.joint_maps.iter().all(dims_ok)
            && self.tag_maps.iter().all(dims_ok)
            && self.rel_depth_maps.iter().all(dims_ok)
            && dims_ok(&self.root_depth_map))
        {
            return Err(Error::Format("map groups have different grid sizes".into()));
        }
        if self
            .joint_maps
            .iter()
            .flat_map(|g| g.data.iter())
            .any(|v| !(*v >= T::zero() && *v <= T::one()))
        {
            return Err(Error::Format("joint heatmap value outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// Depth map sampling rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    #[default]
    Bilinear,
    Nearest,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub peak_threshold: f64,
    pub tag_threshold: f64,
    pub sampling: Sampling,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            peak_threshold: 0.3,
            tag_threshold: 1.0,
            sampling: Sampling::Bilinear,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub sigma_px: f64,
    /// Tag value difference between consecutive persons.
    pub tag_spacing: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            sigma_px: 2.0,
            tag_spacing: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak<T> {
    pub u: T,
    pub v: T,
    pub score: T,
    /// Integer cell of the maximum.
    pub cell: (usize, usize),
}

/// Strict local maxima of each joint map with score at least `threshold`,
/// sorted by descending score.
pub fn extract_peaks<T: Real>(stack: &HeatmapStack<T>, threshold: T) -> Vec<Vec<Peak<T>>> {
    let quarter = T::lit(0.25);
    stack
        .joint_maps
        .iter()
        .map(|map| {
            let (w, h) = (map.width, map.height);
            let mut peaks = Vec::new();
            for y in 0..h {
                for x in 0..w {
                    let c = map.get(x, y);
                    if c < threshold || c <= T::zero() {
                        continue;
                    }
                    let mut is_max = true;
                    'nb: for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            if dx == 0 && dy == 0 {
                                continue;
                            }
                            let nx = x as i64 + dx;
                            let ny = y as i64 + dy;
                            if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                                continue;
                            }
                            if map.get(nx as usize, ny as usize) >= c {
                                is_max = false;
                                break 'nb;
                            }
                        }
                    }
                    if !is_max {
                        continue;
                    }
                    let shift = |lo: Option<T>, hi: Option<T>| match (lo, hi) {
                        (Some(a), Some(b)) if b > a => quarter,
                        (Some(a), Some(b)) if a > b => -quarter,
                        (None, Some(_)) => quarter,
                        (Some(_), None) => -quarter,
                        _ => T::zero(),
                    };
                    let left = (x > 0).then(|| map.get(x - 1, y));
                    let right = (x + 1 < w).then(|| map.get(x + 1, y));
                    let up = (y > 0).then(|| map.get(x, y - 1));
                    let down = (y + 1 < h).then(|| map.get(x, y + 1));
                    peaks.push(Peak {
                        u: T::from_usize_lossy(x) + shift(left, right),
                        v: T::from_usize_lossy(y) + shift(up, down),
                        score: c,
                        cell: (x, y),
                    });
                }
            }
            peaks.sort_by(|a, b| {
                b.score
                    .partial_cmp(&a.score)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cell.1.cmp(&b.cell.1))
                    .then(a.cell.0.cmp(&b.cell.0))
            });
            peaks
        })
        .collect()
}

/// Greedy associative-embedding grouping.
///
/// Joints are visited in index order and peaks by descending score. A peak
/// joins the person whose mean tag is nearest and within `threshold`, among
/// persons that do not yet own that joint; otherwise it starts a new person.
/// Joints a person never received have confidence 0.
pub fn group_by_tags<T: Real>(
    peaks: &[Vec<Peak<T>>],
    tag_maps: &[Grid<T>],
    threshold: T,
) -> Vec<Pose2D<T>> {
    struct Person<T> {
        tag_sum: T,
        count: usize,
        joints: Vec<Option<Peak<T>>>,
    }
    let k = peaks.len();
    let mut persons: Vec<Person<T>> = Vec::new();
    for (joint, joint_peaks) in peaks.iter().enumerate() {
        for peak in joint_peaks {
            let tag = tag_maps[joint].get(peak.cell.0, peak.cell.1);
            let mut best: Option<(usize, T)> = None;
            for (i, p) in persons.iter().enumerate() {
                if p.joints[joint].is_some() {
                    continue;
                }
                let d = (p.tag_sum / T::from_usize_lossy(p.count) - tag).abs();
                if d <= threshold && best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((i, d));
                }
            }
            match best {
                Some((i, _)) => {
                    let p = &mut persons[i];
                    p.tag_sum += tag;
                    p.count += 1;
                    p.joints[joint] = Some(*peak);
                }
                None => {
                    let mut joints = vec![None; k];
                    joints[joint] = Some(*peak);
                    persons.push(Person {
                        tag_sum: tag,
                        count: 1,
                        joints,
                    });
                }
            }
        }
    }
    persons
        .into_iter()
        .map(|p| {
            let joints = p
                .joints
                .iter()
                .map(|j| j.map_or([T::zero(), T::zero()], |pk| [pk.u, pk.v]))
                .collect();
            let conf = p
                .joints
                .iter()
                .map(|j| j.map_or(T::zero(), |pk| pk.score.min(T::one())))
                .collect();
            Pose2D { joints, conf }
        })
        .collect()
}

/// Samples the absolute root depth at the root joint and each joint's
/// relative depth at that joint. Joints with zero confidence other than the
/// root get a relative depth of 0.
pub fn retrieve_depths<T: Real>(
    pose: &Pose2D<T>,
    stack: &HeatmapStack<T>,
    root: usize,
    sampling: Sampling,
) -> Result<(T, Vec<T>)> {
    let sample = |g: &Grid<T>, p: [T; 2]| match sampling {
        Sampling::Bilinear => g.sample_bilinear(p[0], p[1]),
        Sampling::Nearest => g.sample_nearest(p[0], p[1]),
    };
    if pose.num_joints() != stack.num_joints() {
        return Err(Error::InvalidArgument(format!(
            "pose has {} joints, stack has {}",
            pose.num_joints(),
            stack.num_joints()
        )));
    }
    let z_root = sample(&stack.root_depth_map, pose.joints[root])?;
    let mut z_rel = Vec::with_capacity(pose.num_joints());
    for (k, (&p, &c)) in pose.joints.iter().zip(&pose.conf).enumerate() {
        if k != root && c <= T::zero() {
            z_rel.push(T::zero());
        } else {
            z_rel.push(sample(&stack.rel_depth_maps[k], p)?);
        }
    }
    Ok((z_root, z_rel))
}

/// Full decode: peaks, grouping, depth retrieval and back-projection.
/// Groups without a root joint are dropped.
pub fn decode<T: Real>(
    stack: &HeatmapStack<T>,
    cam: &CameraIntrinsics<T>,
    root: usize,
    cfg: &DecodeConfig,
) -> Result<Vec<Pose3D<T>>> {
    let peaks = extract_peaks(stack, T::lit(cfg.peak_threshold));
    let groups = group_by_tags(&peaks, &stack.tag_maps, T::lit(cfg.tag_threshold));
    let mut out = Vec::with_capacity(groups.len());
    for g in groups {
        if g.conf[root] <= T::zero() {
            log::debug!("dropping decoded group without a root joint");
            continue;
        }
        let (z_root, z_rel) = retrieve_depths(&g, stack, root, cfg.sampling)?;
        let mut joints = Vec::with_capacity(g.num_joints());
        for k in 0..g.num_joints() {
            let z = if k == root { z_root } else { z_root + z_rel[k] };
            let pixel = if g.conf[k] > T::zero() {
                g.joints[k]
            } else {
                g.joints[root]
            };
            let depth = if g.conf[k] > T::zero() { z } else { z_root };
            joints.push(back_project(pixel, depth, cam)?);
        }
        out.push(Pose3D::new(joints, g.conf.clone(), Frame::CameraCentric, root)?);
    }
    Ok(out)
}

/// Renders the four map groups from camera-centric poses.
///
/// Joint maps hold max-composited Gaussians at the projected joints. Tag
/// maps hold `person_index * tag_spacing` in a `3 sigma` disc around each
/// joint. Depth maps hold the exact root depth / relative depth in a square
/// neighbourhood of radius `max(ceil(sigma), 2)` cells around each joint.
pub fn render_stack<T: Real>(
    poses: &[Pose3D<T>],
    cam: &CameraIntrinsics<T>,
    width: usize,
    height: usize,
    num_joints: usize,
    cfg: &RenderConfig,
) -> Result<HeatmapStack<T>> {
    let mut stack = HeatmapStack::zeros(num_joints, width, height);
    let sigma = T::lit(cfg.sigma_px);
    let gauss_r = (3.0 * cfg.sigma_px).ceil() as i64;
    let depth_r = cfg.sigma_px.ceil().max(2.0) as i64;
    let two_s2 = T::lit(2.0) * sigma * sigma;
    for (person, pose) in poses.iter().enumerate() {
        pose.expect_frame(Frame::CameraCentric)?;
        if pose.num_joints() != num_joints {
            return Err(Error::InvalidArgument(format!(
                "pose has {} joints, expected {num_joints}",
                pose.num_joints()
            )));
        }
        let tag = T::from_usize_lossy(person) * T::lit(cfg.tag_spacing);
        let root_pos = pose.root_position();
        for (k, &joint) in pose.joints.iter().enumerate() {
            let uv = project(joint, cam)?;
            stack.joint_maps[k].check_inside(uv[0], uv[1])?;
            let cx = uv[0].round().to_i64().unwrap_or(0);
            let cy = uv[1].round().to_i64().unwrap_or(0);
            let rel = joint.z - root_pos.z;
            for dy in -gauss_r..=gauss_r {
                for dx in -gauss_r..=gauss_r {
                    let x = cx + dx;
                    let y = cy + dy;
                    if x < 0 || y < 0 || x >= width as i64 || y >= height as i64 {
                        continue;
                    }
                    let (xu, yu) = (x as usize, y as usize);
                    let ddx = T::from_i64(x).unwrap_or_else(T::zero) - uv[0];
                    let ddy = T::from_i64(y).unwrap_or_else(T::zero) - uv[1];
                    let d2 = ddx * ddx + ddy * ddy;
                    let g = (-d2 / two_s2).exp();
                    let map = &mut stack.joint_maps[k];
                    if g > map.get(xu, yu) {
                        map.set(xu, yu, g);
                    }
                    if dx * dx + dy * dy <= gauss_r * gauss_r {
                        stack.tag_maps[k].set(xu, yu, tag);
                    }
                    if dx.abs() <= depth_r && dy.abs() <= depth_r {
                        stack.rel_depth_maps[k].set(xu, yu, rel);
                        if k == pose.root {
                            stack.root_depth_map.set(xu, yu, root_pos.z);
                        }
                    }
                }
            }
        }
    }
    Ok(stack)
}

const MAGIC: &[u8; 4] = b"PHMS";
const VERSION: u16 = 1;

/// Writes the binary stack format: magic `PHMS`, version u16, then u32
/// `K, width, height`, then all maps as row-major little-endian f32 in the
/// order joint / tag / rel-depth / root-depth.
pub fn write_stack<T: Real, W: Write>(stack: &HeatmapStack<T>, mut w: W) -> Result<()> {
    stack.validate()?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for n in [stack.num_joints(), stack.width, stack.height] {
        let n = u32::try_from(n).map_err(|_| Error::Format(format!("dimension {n} exceeds u32")))?;
        w.write_all(&n.to_le_bytes())?;
    }
    let groups = stack
        .joint_maps
        .iter()
        .chain(&stack.tag_maps)
        .chain(&stack.rel_depth_maps)
        .chain(std::iter::once(&stack.root_depth_map));
    let mut buf = Vec::with_capacity(stack.width * stack.height * 4);
    for g in groups {
        buf.clear();
        for v in &g.data {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_stack<T: Real, R: Read>(mut r: R) -> Result<HeatmapStack<T>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut v = [0u8; 2];
    r.read_exact(&mut v)?;
    let version = u16::from_le_bytes(v);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        *d = u32::from_le_bytes(b) as usize;
    }
    let [k, width, height] = dims;
    if width == 0 || height == 0 {
        return Err(Error::Format("empty grid".into()));
    }
    let cells = width
        .checked_mul(height)
        .ok_or_else(|| Error::Format("grid too large".into()))?;
    let mut read_grid = || -> Result<Grid<T>> {
        let mut bytes = vec![0u8; cells * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        Ok(Grid {
            width,
            height,
            data,
        })
    };
    let joint_maps = (0..k).map(|_| read_grid()).collect::<Result<Vec<_>>>()?;
    let tag_maps = (0..k).map(|_| read_grid()).collect::<Result<Vec<_>>>()?;
    let rel_depth_maps = (0..k).map(|_| read_grid()).collect::<Result<Vec<_>>>()?;
    let root_depth_map = read_grid()?;
    let stack = HeatmapStack {
        width,
        height,
        joint_maps,
        tag_maps,
        rel_depth_maps,
        root_depth_map,
    };
    stack.validate()?;
    Ok(stack)
}

/// Convenience for tests and synthesis: a pose whose every joint sits at
/// `center` offset by `offsets`.
pub fn pose_at<T: Real>(center: Vec3<T>, offsets: &[Vec3<T>], root: usize) -> Result<Pose3D<T>> {
    Pose3D::camera(offsets.iter().map(|&o| center + o).collect(), root)
}
