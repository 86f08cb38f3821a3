//! Camera model, ray generation, positional encoding and stratified depth
//! sampling. Everything here is a pure function of its inputs.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub lo: Vector3<f64>,
    pub hi: Vector3<f64>,
}

impl Aabb {
    pub fn new(lo: Vector3<f64>, hi: Vector3<f64>) -> Self {
        Aabb { lo, hi }
    }

    pub fn extent(&self) -> Vector3<f64> {
        self.hi - self.lo
    }

    pub fn center(&self) -> Vector3<f64> {
        (self.lo + self.hi) * 0.5
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|a| p[a] >= self.lo[a] && p[a] <= self.hi[a])
    }

    pub fn clamp(&self, p: &Vector3<f64>) -> Vector3<f64> {
        Vector3::new(
            p.x.clamp(self.lo.x, self.hi.x),
            p.y.clamp(self.lo.y, self.hi.y),
            p.z.clamp(self.lo.z, self.hi.z),
        )
    }

    pub fn grow(&self, margin: f64) -> Aabb {
        let m = Vector3::new(margin, margin, margin);
        Aabb::new(self.lo - m, self.hi + m)
    }
}

/// Pinhole intrinsics shared by every frame of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Depth-map integer units per meter (e.g. 1000 for millimeter PNGs).
    pub depth_scale: f64,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::domain("focal lengths must be positive"));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(Error::domain("cx outside image"));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(Error::domain("cy outside image"));
        }
        if !(self.depth_scale > 0.0) {
            return Err(Error::domain("depth_scale must be positive"));
        }
        Ok(())
    }
}

/// Camera-to-world rigid transform.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rtr = self.rotation.transpose() * self.rotation;
        let err = (rtr - Matrix3::identity()).norm();
        if err > 1e-6 {
            return Err(Error::domain(format!(
                "pose rotation not orthonormal (|R'R - I| = {err:.3e})"
            )));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > 1e-6 {
            return Err(Error::domain(format!(
                "pose rotation determinant {det} != +1"
            )));
        }
        Ok(())
    }

    /// Camera-frame point to world frame.
    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// World point to camera frame.
    pub fn inverse_transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }
}

/// A world-space ray with a sampling interval.
#[derive(Debug, Clone, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn point_at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

/// Raw coordinates plus sin/cos frequency features.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPoint {
    pub raw: Vector3<f64>,
    pub encoding: Vec<f64>,
}

/// Build the world-space ray through the center of pixel (px, py).
pub fn pixel_to_ray(
    intr: &CameraIntrinsics,
    pose: &Pose,
    px: f64,
    py: f64,
    near: f64,
    far: f64,
) -> Result<Ray> {
    if !(px >= 0.0 && px < intr.width as f64 && py >= 0.0 && py < intr.height as f64) {
        return Err(Error::domain(format!(
            "pixel ({px}, {py}) outside {}x{} image",
            intr.width, intr.height
        )));
    }
    let dir_cam = Vector3::new((px - intr.cx) / intr.fx, (py - intr.cy) / intr.fy, 1.0);
    let dir_world = (pose.rotation * dir_cam).normalize();
    Ok(Ray {
        origin: pose.translation,
        direction: dir_world,
        near,
        far,
    })
}

/// Project a world point back into the image; returns (px, py, z_cam).
pub fn project(intr: &CameraIntrinsics, pose: &Pose, p: &Vector3<f64>) -> Option<(f64, f64, f64)> {
    let pc = pose.inverse_transform(p);
    if pc.z <= 0.0 {
        return None;
    }
    let px = intr.fx * pc.x / pc.z + intr.cx;
    let py = intr.fy * pc.y / pc.z + intr.cy;
    Some((px, py, pc.z))
}

/// Ratio between ray parameter t (meters along the unit direction) and the
/// camera-frame z depth for the pixel's ray: t = z * z_to_t.
pub fn z_to_t_factor(intr: &CameraIntrinsics, px: f64, py: f64) -> f64 {
    let a = (px - intr.cx) / intr.fx;
    let b = (py - intr.cy) / intr.fy;
    (1.0 + a * a + b * b).sqrt()
}

/// NeRF-style frequency encoding with `octaves` sin/cos pairs, the raw
/// coordinates prepended. Output length is 3 + 6 * octaves.
pub fn positional_encode(x: &Vector3<f64>, octaves: usize) -> EncodedPoint {
    let mut encoding = Vec::with_capacity(3 + 6 * octaves);
    encoding.extend_from_slice(&[x.x, x.y, x.z]);
    encode_into(x, octaves, true, &mut encoding);
    EncodedPoint { raw: *x, encoding }
}

/// Append the frequency features of `x` to `out` (raw coordinates included
/// when `include_raw`); reusable buffer variant for hot paths.
pub fn encode_into(x: &Vector3<f64>, octaves: usize, _include_raw_done: bool, out: &mut Vec<f64>) {
    let mut freq = std::f64::consts::PI;
    for _ in 0..octaves {
        out.push((freq * x.x).sin());
        out.push((freq * x.y).sin());
        out.push((freq * x.z).sin());
        out.push((freq * x.x).cos());
        out.push((freq * x.y).cos());
        out.push((freq * x.z).cos());
        freq *= 2.0;
    }
}

/// Encoded length for a 3-vector at the given octave count.
pub fn encoded_len(octaves: usize, include_raw: bool) -> usize {
    (if include_raw { 3 } else { 0 }) + 6 * octaves
}

/// One stratified depth per equal-width bin of [near, far]. With `jitter`
/// disabled the bin midpoints are returned; enabled, a uniform draw inside
/// each bin. Depths are strictly increasing either way.
pub fn stratified_samples<R: Rng>(ray: &Ray, n: usize, jitter: bool, rng: &mut R) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::domain("stratified_samples requires n >= 1"));
    }
    let span = ray.far - ray.near;
    let bin = span / n as f64;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let u = if jitter { rng.gen::<f64>() } else { 0.5 };
        out.push(ray.near + (i as f64 + u) * bin);
    }
    Ok(out)
}

/// Intersect a ray with an axis-aligned box; returns (t_enter, t_exit) when
/// the intersection is non-empty.
pub fn ray_aabb(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    lo: &Vector3<f64>,
    hi: &Vector3<f64>,
) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if origin[a] < lo[a] || origin[a] > hi[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (mut ta, mut tb) = ((lo[a] - origin[a]) * inv, (hi[a] - origin[a]) * inv);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    if t0 <= t1 {
        Some((t0, t1))
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn intr_64() -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: 32.0,
            cy: 32.0,
            width: 200,
            height: 200,
            depth_scale: 1000.0,
        }
    }

    #[test]
    fn optical_axis_ray() {
        let ray = pixel_to_ray(&intr_64(), &Pose::identity(), 32.0, 32.0, 0.0, 1.0).unwrap();
        assert_relative_eq!(ray.direction.x, 0.0, epsilon = 1e-12);
        assert_relative_eq!(ray.direction.y, 0.0, epsilon = 1e-12);
        assert_relative_eq!(ray.direction.z, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn off_axis_ray_matches_pinhole_formula() {
        let ray = pixel_to_ray(&intr_64(), &Pose::identity(), 132.0, 32.0, 0.0, 1.0).unwrap();
        assert_relative_eq!(ray.direction.x, 0.7071, epsilon = 1e-4);
        assert_relative_eq!(ray.direction.y, 0.0, epsilon = 1e-12);
        assert_relative_eq!(ray.direction.z, 0.7071, epsilon = 1e-4);
    }

    #[test]
    fn ray_origin_is_camera_center() {
        let pose = Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::new(1.0, 2.0, 3.0),
        };
        let ray = pixel_to_ray(&intr_64(), &pose, 10.0, 20.0, 0.0, 1.0).unwrap();
        assert_eq!(ray.origin, Vector3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn pixel_out_of_bounds_is_domain_error() {
        assert!(pixel_to_ray(&intr_64(), &Pose::identity(), 200.0, 0.0, 0.0, 1.0).is_err());
        assert!(pixel_to_ray(&intr_64(), &Pose::identity(), -1.0, 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn project_roundtrip_recovers_pixel() {
        let intr = intr_64();
        // Non-trivial pose: rotation about y plus translation.
        let angle = 0.3_f64;
        let rot = Matrix3::new(
            angle.cos(),
            0.0,
            angle.sin(),
            0.0,
            1.0,
            0.0,
            -angle.sin(),
            0.0,
            angle.cos(),
        );
        let pose = Pose {
            rotation: rot,
            translation: Vector3::new(0.2, -0.1, 0.4),
        };
        pose.validate().unwrap();
        for &(px, py) in &[(0.0, 0.0), (32.0, 32.0), (150.5, 40.25), (10.0, 199.0)] {
            let ray = pixel_to_ray(&intr, &pose, px, py, 0.0, 10.0).unwrap();
            let p = ray.point_at(2.37);
            let (qx, qy, _z) = project(&intr, &pose, &p).unwrap();
            assert_relative_eq!(qx, px, epsilon = 1e-6);
            assert_relative_eq!(qy, py, epsilon = 1e-6);
        }
    }

    #[test]
    fn encode_zero_point() {
        let e = positional_encode(&Vector3::zeros(), 2);
        assert_eq!(e.encoding.len(), 3 + 12);
        for i in 0..3 {
            assert_eq!(e.encoding[i], 0.0);
        }
        // Per-octave layout: [sin xyz, cos xyz].
        for oct in 0..2 {
            for i in 0..3 {
                assert_eq!(e.encoding[3 + 6 * oct + i], 0.0);
                assert_eq!(e.encoding[3 + 6 * oct + 3 + i], 1.0);
            }
        }
    }

    #[test]
    fn encode_half_hits_sin_peak() {
        let e = positional_encode(&Vector3::new(0.5, 0.0, 0.0), 1);
        assert_relative_eq!(e.encoding[3], 1.0, epsilon = 1e-12); // sin(pi/2)
        assert_relative_eq!(e.encoding[6], 0.0, epsilon = 1e-12); // cos(pi/2)
    }

    #[test]
    fn encode_zero_octaves_is_raw() {
        let e = positional_encode(&Vector3::new(0.1, 0.2, 0.3), 0);
        assert_eq!(e.encoding, vec![0.1, 0.2, 0.3]);
    }

    #[test]
    fn encode_lengths_and_range() {
        for octaves in 0..=10 {
            let e = positional_encode(&Vector3::new(1.7, -2.3, 0.9), octaves);
            assert_eq!(e.encoding.len(), 3 + 6 * octaves);
            for v in &e.encoding[3..] {
                assert!(*v >= -1.0 - 1e-12 && *v <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn stratified_midpoints_without_jitter() {
        let ray = Ray {
            origin: Vector3::zeros(),
            direction: Vector3::new(0.0, 0.0, 1.0),
            near: 0.0,
            far: 1.0,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let d = stratified_samples(&ray, 4, false, &mut rng).unwrap();
        assert_eq!(d, vec![0.125, 0.375, 0.625, 0.875]);
    }

    #[test]
    fn stratified_bins_and_determinism() {
        let ray = Ray {
            origin: Vector3::zeros(),
            direction: Vector3::new(0.0, 0.0, 1.0),
            near: 0.5,
            far: 2.5,
        };
        for seed in 0..20 {
            let mut r1 = ChaCha12Rng::seed_from_u64(seed);
            let mut r2 = ChaCha12Rng::seed_from_u64(seed);
            let a = stratified_samples(&ray, 16, true, &mut r1).unwrap();
            let b = stratified_samples(&ray, 16, true, &mut r2).unwrap();
            assert_eq!(a, b);
            let bin = 2.0 / 16.0;
            for (i, d) in a.iter().enumerate() {
                assert!(*d >= 0.5 + i as f64 * bin && *d <= 0.5 + (i + 1) as f64 * bin);
            }
            for w in a.windows(2) {
                assert!(w[1] > w[0]);
            }
        }
    }

    #[test]
    fn stratified_zero_count_rejected() {
        let ray = Ray {
            origin: Vector3::zeros(),
            direction: Vector3::new(0.0, 0.0, 1.0),
            near: 0.0,
            far: 1.0,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        assert!(stratified_samples(&ray, 0, false, &mut rng).is_err());
    }

    #[test]
    fn aabb_intersection() {
        let lo = Vector3::new(-1.0, -1.0, -1.0);
        let hi = Vector3::new(1.0, 1.0, 1.0);
        let (t0, t1) = ray_aabb(
            &Vector3::new(0.0, 0.0, -2.0),
            &Vector3::new(0.0, 0.0, 1.0),
            &lo,
            &hi,
        )
        .unwrap();
        assert_relative_eq!(t0, 1.0);
        assert_relative_eq!(t1, 3.0);
        assert!(ray_aabb(
            &Vector3::new(0.0, 2.0, -2.0),
            &Vector3::new(0.0, 0.0, 1.0),
            &lo,
            &hi
        )
        .is_none());
    }
}
