//! Least-squares similarity alignment via the unit-quaternion method.

use crate::error::{Error, Result};
use crate::scalar::{mat3_mul_vec, symmetric_eigen, Mat3, Real, Vec3};

/// `x -> scale * rotation * x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity<T> {
    pub rotation: Mat3<T>,
    pub scale: T,
    pub translation: Vec3<T>,
}

impl<T: Real> Similarity<T> {
    #[inline]
    pub fn apply(&self, p: Vec3<T>) -> Vec3<T> {
        mat3_mul_vec(&self.rotation, p) * self.scale + self.translation
    }
}

fn centroid<T: Real>(pts: &[Vec3<T>]) -> Vec3<T> {
    pts.iter().fold(Vec3::zero(), |a, &p| a + p) / T::from_usize_lossy(pts.len())
}

/// Rank of a centred point cloud is at least 2.
fn check_spread<T: Real>(pts: &[Vec3<T>], c: Vec3<T>, what: &str) -> Result<()> {
    let mut cov = [[T::zero(); 3]; 3];
    for &p in pts {
        let d = p - c;
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] += d[i] * d[j];
            }
        }
    }
    let (vals, _) = symmetric_eigen(cov);
    if !(vals[0] > T::zero()) || vals[1] <= vals[0] * T::lit(1e-12) {
        return Err(Error::Degenerate(format!("{what} points are collinear or coincident")));
    }
    Ok(())
}

/// Similarity transform minimizing `sum |S(src_i) - dst_i|^2`.
pub fn similarity_align<T: Real>(src: &[Vec3<T>], dst: &[Vec3<T>]) -> Result<Similarity<T>> {
    if src.len() != dst.len() {
        return Err(Error::InvalidArgument(format!(
            "{} source points, {} target points",
            src.len(),
            dst.len()
        )));
    }
    if src.len() < 3 {
        return Err(Error::Degenerate(format!("{} points cannot fix a rotation", src.len())));
    }
    let ca = centroid(src);
    let cb = centroid(dst);
    check_spread(src, ca, "source")?;
    check_spread(dst, cb, "target")?;

    let mut s = [[T::zero(); 3]; 3];
    let mut norm_a = T::zero();
    for (&a, &b) in src.iter().zip(dst) {
        let a = a - ca;
        let b = b - cb;
        norm_a += a.norm_squared();
        for i in 0..3 {
            for j in 0..3 {
                s[i][j] += a[i] * b[j];
            }
        }
    }
    let [[sxx, sxy, sxz], [syx, syy, syz], [szx, szy, szz]] = s;
    let n = [
        [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
        [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
        [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
        [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
    ];
    let (vals, vecs) = symmetric_eigen(n);
    let (w, x, y, z) = (vecs[0][0], vecs[1][0], vecs[2][0], vecs[3][0]);
    let norm = (w * w + x * x + y * y + z * z).sqrt();
    let (w, x, y, z) = (w / norm, x / norm, y / norm, z / norm);
    let one = T::one();
    let two = T::lit(2.0);
    let rotation = [
        [one - two * (y * y + z * z), two * (x * y - w * z), two * (x * z + w * y)],
        [two * (x * y + w * z), one - two * (x * x + z * z), two * (y * z - w * x)],
        [two * (x * z - w * y), two * (y * z + w * x), one - two * (x * x + y * y)],
    ];
    // The top eigenvalue equals sum b . (R a).
    let scale = vals[0] / norm_a;
    let translation = cb - mat3_mul_vec(&rotation, ca) * scale;
    Ok(Similarity {
        rotation,
        scale,
        translation,
    })
}
