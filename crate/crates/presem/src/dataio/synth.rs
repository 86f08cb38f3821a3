//! Synthetic RGB-D scene generator: analytic SDF scenes, sphere-traced
//! depth, flat shading under a fixed world light, pseudo-color semantics,
//! a sensor noise model, and a marching-cubes ground-truth mesh.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{load_dataset, ply, semantic_palette, Dataset};
use crate::error::{Error, Result};
use crate::geometry::{Aabb, CameraIntrinsics, Pose};
use crate::mesher::extract_mesh;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrimitiveSpec {
    /// "room" (inverted box shell), "box", "sphere" or "plane".
    pub kind: String,
    #[serde(default)]
    pub center: [f64; 3],
    #[serde(default)]
    pub half_extents: [f64; 3],
    #[serde(default)]
    pub radius: f64,
    /// Plane only: outward normal and a point on the plane.
    #[serde(default = "default_up")]
    pub normal: [f64; 3],
    #[serde(default)]
    pub point: [f64; 3],
    /// Box only: rotation about +z in degrees.
    #[serde(default)]
    pub yaw_deg: f64,
    pub albedo: [f64; 3],
    pub class_id: u8,
}

fn default_up() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Multiplicative Gaussian std as a fraction of depth.
    #[serde(default)]
    pub level: f64,
    /// Elliptical dropout holes per frame.
    #[serde(default)]
    pub holes_per_frame: usize,
    #[serde(default = "default_hole_radius")]
    pub hole_radius_px: [f64; 2],
    /// Depth invalidated where |normal . view| falls below this.
    #[serde(default = "default_grazing")]
    pub grazing_threshold: f64,
}

fn default_hole_radius() -> [f64; 2] {
    [2.0, 8.0]
}

fn default_grazing() -> f64 {
    0.2
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            level: 0.0,
            holes_per_frame: 0,
            hole_radius_px: default_hole_radius(),
            grazing_threshold: default_grazing(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectorySpec {
    /// Ring radius around the scene center.
    #[serde(default = "default_orbit_radius")]
    pub radius: f64,
    /// Camera pitch cycle in degrees (repeats over frames; positive looks
    /// up).
    #[serde(default = "default_pitch_cycle")]
    pub pitch_cycle_deg: Vec<f64>,
    /// Camera height offsets cycled over frames.
    #[serde(default)]
    pub height_cycle: Vec<f64>,
    /// Look toward the scene center instead of outward (object scans).
    #[serde(default)]
    pub look_inward: bool,
}

fn default_orbit_radius() -> f64 {
    0.3
}

fn default_pitch_cycle() -> Vec<f64> {
    vec![-35.0, 0.0, 35.0]
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        TrajectorySpec {
            radius: default_orbit_radius(),
            pitch_cycle_deg: default_pitch_cycle(),
            height_cycle: Vec::new(),
            look_inward: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    pub frames: usize,
    #[serde(default = "default_width")]
    pub width: u32,
    #[serde(default = "default_height")]
    pub height: u32,
    #[serde(default = "default_fov")]
    pub fov_deg: f64,
    #[serde(default = "default_depth_scale")]
    pub depth_scale: f64,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub trajectory: TrajectorySpec,
    #[serde(rename = "primitive")]
    pub primitives: Vec<PrimitiveSpec>,
    /// Ground-truth marching-cubes nodes per axis.
    #[serde(default = "default_gt_resolution")]
    pub gt_resolution: usize,
    /// Write pseudo-color semantic images.
    #[serde(default = "default_true")]
    pub semantics: bool,
}

fn default_width() -> u32 {
    80
}
fn default_height() -> u32 {
    60
}
fn default_fov() -> f64 {
    70.0
}
fn default_depth_scale() -> f64 {
    1000.0
}
fn default_gt_resolution() -> usize {
    192
}
fn default_true() -> bool {
    true
}

impl SceneSpec {
    pub fn from_toml(text: &str) -> Result<SceneSpec> {
        let spec: SceneSpec =
            toml::from_str(text).map_err(|e| Error::data(format!("scene spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::domain("scene needs at least one primitive"));
        }
        if self.frames == 0 {
            return Err(Error::domain("scene needs at least one frame"));
        }
        for p in &self.primitives {
            match p.kind.as_str() {
                "room" | "box" | "sphere" | "plane" => {}
                other => return Err(Error::domain(format!("unknown primitive kind '{other}'"))),
            }
            if p.class_id >= 40 {
                return Err(Error::domain("class_id must be < 40"));
            }
        }
        Ok(())
    }
}

fn box_sdf(p: &Vector3<f64>, half: &Vector3<f64>) -> f64 {
    let q = Vector3::new(p.x.abs() - half.x, p.y.abs() - half.y, p.z.abs() - half.z);
    let outside = Vector3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
    let inside = q.x.max(q.y).max(q.z).min(0.0);
    outside + inside
}

/// Analytic scene: union of primitives, SDF positive outside solids.
pub struct Scene {
    prims: Vec<PrimitiveSpec>,
}

impl Scene {
    pub fn new(spec: &SceneSpec) -> Scene {
        Scene {
            prims: spec.primitives.clone(),
        }
    }

    fn prim_sdf(p: &PrimitiveSpec, x: &Vector3<f64>) -> f64 {
        let c = Vector3::new(p.center[0], p.center[1], p.center[2]);
        match p.kind.as_str() {
            "sphere" => (x - c).norm() - p.radius,
            "box" => {
                let local = if p.yaw_deg != 0.0 {
                    let a = -p.yaw_deg.to_radians();
                    let (s, co) = a.sin_cos();
                    let d = x - c;
                    Vector3::new(co * d.x - s * d.y, s * d.x + co * d.y, d.z)
                } else {
                    x - c
                };
                box_sdf(
                    &local,
                    &Vector3::new(p.half_extents[0], p.half_extents[1], p.half_extents[2]),
                )
            }
            "room" => {
                // Solid everywhere outside the box: the interior is free
                // space, the shell is the surface.
                -box_sdf(
                    &(x - c),
                    &Vector3::new(p.half_extents[0], p.half_extents[1], p.half_extents[2]),
                )
            }
            "plane" => {
                let n = Vector3::new(p.normal[0], p.normal[1], p.normal[2]).normalize();
                (x - Vector3::new(p.point[0], p.point[1], p.point[2])).dot(&n)
            }
            _ => f64::INFINITY,
        }
    }

    pub fn sdf(&self, x: &Vector3<f64>) -> f64 {
        self.prims
            .iter()
            .map(|p| Scene::prim_sdf(p, x))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn nearest_prim(&self, x: &Vector3<f64>) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, p) in self.prims.iter().enumerate() {
            let d = Scene::prim_sdf(p, x);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    pub fn normal(&self, x: &Vector3<f64>) -> Vector3<f64> {
        let h = 1e-5;
        let mut g = Vector3::zeros();
        for a in 0..3 {
            let mut hi = *x;
            hi[a] += h;
            let mut lo = *x;
            lo[a] -= h;
            g[a] = (self.sdf(&hi) - self.sdf(&lo)) / (2.0 * h);
        }
        let n = g.norm();
        if n > 1e-12 {
            g / n
        } else {
            Vector3::new(0.0, 0.0, 1.0)
        }
    }

    /// Domain that strictly contains every primitive surface of interest.
    pub fn bounds(&self) -> Aabb {
        let mut lo = Vector3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut hi = -lo;
        let mut absorb = |p: Vector3<f64>| {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        };
        for p in &self.prims {
            let c = Vector3::new(p.center[0], p.center[1], p.center[2]);
            match p.kind.as_str() {
                "sphere" => {
                    absorb(c + Vector3::repeat(p.radius));
                    absorb(c - Vector3::repeat(p.radius));
                }
                "box" | "room" => {
                    let h = Vector3::new(p.half_extents[0], p.half_extents[1], p.half_extents[2]);
                    let m = h.norm();
                    absorb(c + Vector3::repeat(m));
                    absorb(c - Vector3::repeat(m));
                }
                "plane" => {}
                _ => {}
            }
        }
        if !lo.x.is_finite() {
            lo = Vector3::repeat(-1.0);
            hi = Vector3::repeat(1.0);
        }
        Aabb::new(lo, hi).grow(0.05)
    }
}

/// Sphere-trace from the origin along `dir` (unit); returns the hit
/// parameter.
pub fn sphere_trace(scene: &Scene, origin: &Vector3<f64>, dir: &Vector3<f64>, t_max: f64) -> Option<f64> {
    let mut t = 0.0;
    let mut prev = 0.0;
    for _ in 0..512 {
        let d = scene.sdf(&(origin + dir * t));
        if d < 1e-6 {
            // Bisection refinement between the last safe point and here.
            let mut lo = prev;
            let mut hi = t;
            for _ in 0..40 {
                let mid = 0.5 * (lo + hi);
                if scene.sdf(&(origin + dir * mid)) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            return Some(0.5 * (lo + hi));
        }
        prev = t;
        t += (d * 0.9).max(1e-5);
        if t > t_max {
            return None;
        }
    }
    None
}

fn look_at_pose(pos: Vector3<f64>, forward: Vector3<f64>) -> Pose {
    let z = forward.normalize();
    let up = Vector3::new(0.0, 0.0, 1.0);
    // Image +y points down in world.
    let mut y = -up;
    let x = (y.cross(&z)).normalize();
    y = z.cross(&x);
    let rotation = Matrix3::from_columns(&[x, y, z]);
    Pose {
        rotation,
        translation: pos,
    }
}

const WORLD_LIGHT: [f64; 3] = [0.36, 0.22, 0.91];

fn shade(albedo: [f64; 3], normal: &Vector3<f64>) -> [f64; 3] {
    let l = Vector3::new(WORLD_LIGHT[0], WORLD_LIGHT[1], WORLD_LIGHT[2]).normalize();
    // Two-sided lambert under a fixed world light keeps colors a function
    // of position only, so the photometric target is multi-view consistent.
    let diff = normal.dot(&l).abs();
    let s = 0.45 + 0.55 * diff;
    [albedo[0] * s, albedo[1] * s, albedo[2] * s]
}

/// Rendered (pre-noise) content of one frame.
struct CleanFrame {
    rgb: Vec<[f64; 3]>,
    depth_z: Vec<f64>,
    sem: Vec<[f64; 3]>,
}

fn render_frame(scene: &Scene, intr: &CameraIntrinsics, pose: &Pose, grazing: f64, t_max: f64) -> CleanFrame {
    use rayon::prelude::*;
    let w = intr.width as usize;
    let h = intr.height as usize;
    let rows: Vec<Vec<([f64; 3], f64, [f64; 3])>> = (0..h)
        .into_par_iter()
        .map(|py| {
            let mut row = Vec::with_capacity(w);
            for px in 0..w {
                let dir_cam = Vector3::new(
                    (px as f64 - intr.cx) / intr.fx,
                    (py as f64 - intr.cy) / intr.fy,
                    1.0,
                );
                let dir = (pose.rotation * dir_cam).normalize();
                match sphere_trace(scene, &pose.translation, &dir, t_max) {
                    Some(t) => {
                        let p = pose.translation + dir * t;
                        let n = scene.normal(&p);
                        let prim = scene.nearest_prim(&p);
                        let albedo = scene.prims[prim].albedo;
                        let class = scene.prims[prim].class_id as usize;
                        let rgb = shade(albedo, &n);
                        let sem = semantic_palette()[class];
                        // z-depth in the camera frame.
                        let z = (pose.rotation.transpose() * (p - pose.translation)).z;
                        // Grazing surfaces drop out of the depth channel.
                        let facing = n.dot(&-dir);
                        let z = if facing.abs() < grazing { 0.0 } else { z };
                        row.push((rgb, z, sem));
                    }
                    None => row.push(([0.0, 0.0, 0.0], 0.0, [0.0, 0.0, 0.0])),
                }
            }
            row
        })
        .collect();
    let mut rgb = Vec::with_capacity(w * h);
    let mut depth_z = Vec::with_capacity(w * h);
    let mut sem = Vec::with_capacity(w * h);
    for row in rows {
        for (c, z, s) in row {
            rgb.push(c);
            depth_z.push(z);
            sem.push(s);
        }
    }
    CleanFrame { rgb, depth_z, sem }
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller.
    let u1: f64 = rng.gen::<f64>().max(1e-12);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn apply_noise<R: Rng>(depth_z: &mut [f64], intr: &CameraIntrinsics, noise: &NoiseSpec, rng: &mut R) {
    let w = intr.width as usize;
    let h = intr.height as usize;
    if noise.level > 0.0 {
        for z in depth_z.iter_mut() {
            if *z > 0.0 {
                *z *= 1.0 + noise.level * gaussian(rng);
                if *z < 0.0 {
                    *z = 0.0;
                }
            }
        }
    }
    for _ in 0..noise.holes_per_frame {
        let cx = rng.gen::<f64>() * w as f64;
        let cy = rng.gen::<f64>() * h as f64;
        let rx = rng.gen_range(noise.hole_radius_px[0]..=noise.hole_radius_px[1]);
        let ry = rng.gen_range(noise.hole_radius_px[0]..=noise.hole_radius_px[1]);
        let angle = rng.gen::<f64>() * std::f64::consts::PI;
        let (s, c) = angle.sin_cos();
        for py in 0..h {
            for px in 0..w {
                let dx = px as f64 + 0.5 - cx;
                let dy = py as f64 + 0.5 - cy;
                let u = (c * dx + s * dy) / rx;
                let v = (-s * dx + c * dy) / ry;
                if u * u + v * v <= 1.0 {
                    depth_z[py * w + px] = 0.0;
                }
            }
        }
    }
}

fn write_png_rgb(path: &Path, data: &[[f64; 3]], w: u32, h: u32) -> Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 3);
    for p in data {
        for c in 0..3 {
            buf.push((p[c].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    image::save_buffer(path, &buf, w, h, image::ColorType::Rgb8)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

fn write_png_depth(path: &Path, depth_z: &[f64], scale: f64, w: u32, h: u32) -> Result<()> {
    let mut buf: Vec<u16> = Vec::with_capacity(depth_z.len());
    for z in depth_z {
        let q = (z * scale).round();
        buf.push(if q <= 0.0 || q > 65535.0 { 0 } else { q as u16 });
    }
    let img: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
        image::ImageBuffer::from_vec(w, h, buf).expect("depth buffer size");
    img.save(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

/// Generate a dataset on disk (plus `gt_mesh.ply`) and load it back.
pub fn generate_synthetic(spec: &SceneSpec, out_dir: &Path, seed: u64) -> Result<Dataset> {
    use rand::SeedableRng;
    spec.validate()?;
    let scene = Scene::new(spec);
    let bounds = scene.bounds();
    let center = bounds.center();
    std::fs::create_dir_all(out_dir)?;
    std::fs::create_dir_all(out_dir.join("rgb"))?;
    std::fs::create_dir_all(out_dir.join("depth"))?;
    if spec.semantics {
        std::fs::create_dir_all(out_dir.join("semantic"))?;
    }

    let fov = spec.fov_deg.to_radians();
    let fx = spec.width as f64 * 0.5 / (fov * 0.5).tan();
    let intr = CameraIntrinsics {
        fx,
        fy: fx,
        cx: spec.width as f64 * 0.5,
        cy: spec.height as f64 * 0.5,
        width: spec.width,
        height: spec.height,
        depth_scale: spec.depth_scale,
    };
    intr.validate()?;

    std::fs::write(
        out_dir.join("intrinsics.txt"),
        format!(
            "{} {} {} {} {} {} {}\n",
            intr.fx, intr.fy, intr.cx, intr.cy, intr.width, intr.height, intr.depth_scale
        ),
    )?;

    // Orbit poses around the scene center, looking outward.
    let traj = &spec.trajectory;
    let mut poses = Vec::with_capacity(spec.frames);
    for i in 0..spec.frames {
        let theta = 2.0 * std::f64::consts::PI * i as f64 / spec.frames as f64;
        let height = if traj.height_cycle.is_empty() {
            0.0
        } else {
            traj.height_cycle[i % traj.height_cycle.len()]
        };
        let pos = center + Vector3::new(traj.radius * theta.cos(), traj.radius * theta.sin(), height);
        let pitch = traj.pitch_cycle_deg[i % traj.pitch_cycle_deg.len()].to_radians();
        let out = if traj.look_inward { -1.0 } else { 1.0 };
        let forward = Vector3::new(
            out * theta.cos() * pitch.cos(),
            out * theta.sin() * pitch.cos(),
            pitch.sin(),
        );
        poses.push(look_at_pose(pos, forward));
    }
    let mut pose_lines = String::new();
    for p in &poses {
        let r = p.rotation;
        let t = p.translation;
        let row = [
            [r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x],
            [r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y],
            [r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z],
            [0.0, 0.0, 0.0, 1.0],
        ];
        let mut vals = Vec::with_capacity(16);
        for rr in row {
            for v in rr {
                vals.push(format!("{v}"));
            }
        }
        pose_lines.push_str(&vals.join(" "));
        pose_lines.push('\n');
    }
    std::fs::write(out_dir.join("poses.txt"), pose_lines)?;

    let t_max = bounds.extent().norm() * 2.0;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    for (i, pose) in poses.iter().enumerate() {
        let clean = render_frame(&scene, &intr, pose, spec.noise.grazing_threshold, t_max);
        let mut depth = clean.depth_z.clone();
        apply_noise(&mut depth, &intr, &spec.noise, &mut rng);
        write_png_rgb(&out_dir.join(format!("rgb/{i:05}.png")), &clean.rgb, intr.width, intr.height)?;
        write_png_depth(
            &out_dir.join(format!("depth/{i:05}.png")),
            &depth,
            intr.depth_scale,
            intr.width,
            intr.height,
        )?;
        if spec.semantics {
            write_png_rgb(
                &out_dir.join(format!("semantic/{i:05}.png")),
                &clean.sem,
                intr.width,
                intr.height,
            )?;
        }
    }

    // Ground-truth surface by marching cubes over the analytic SDF.
    let sdf_fn = |p: &Vector3<f64>| scene.sdf(p);
    let gt = extract_mesh(&sdf_fn, &bounds, spec.gt_resolution, 0.0)?;
    ply::write_mesh(&gt, &out_dir.join("gt_mesh.ply"))?;

    load_dataset(out_dir)
}
