//! Dataset ingestion and persistence. Directory layout:
//!
//! ```text
//! intrinsics.txt     "fx fy cx cy width height depth_scale"
//! poses.txt          one 4x4 camera-to-world matrix per frame, row-major
//! rgb/%05d.png       8-bit RGB
//! depth/%05d.png     16-bit, units of 1/depth_scale meters, 0 = invalid
//! semantic/%05d.png  8-bit RGB pseudo-color (optional)
//! gt_mesh.ply        (optional)
//! ```

pub mod ply;
pub mod synth;

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{pixel_to_ray, ray_aabb, z_to_t_factor, Aabb, CameraIntrinsics, Pose};
use crate::losses::RayTask;

/// One RGB-D observation. Depth is z-depth in meters (0 = invalid).
#[derive(Debug, Clone)]
pub struct Frame {
    pub pose: Pose,
    pub rgb: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
    pub semantic: Option<Vec<[f64; 3]>>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub intrinsics: CameraIntrinsics,
    pub frames: Vec<Frame>,
    pub bounds: Aabb,
    pub gt_mesh_path: Option<PathBuf>,
}

/// Fixed 40-entry pseudo-color palette (class id -> RGB in [0,1]).
pub fn semantic_palette() -> &'static [[f64; 3]; 40] {
    use std::sync::OnceLock;
    static PALETTE: OnceLock<[[f64; 3]; 40]> = OnceLock::new();
    PALETTE.get_or_init(|| {
        let raw = include_str!("../../data/nyu40_palette.txt");
        let mut out = [[0.0; 3]; 40];
        let mut i = 0;
        for line in raw.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let v: Vec<f64> = line
                .split_whitespace()
                .map(|s| s.parse::<f64>().expect("palette entry"))
                .collect();
            out[i] = [v[0] / 255.0, v[1] / 255.0, v[2] / 255.0];
            i += 1;
        }
        assert_eq!(i, 40, "palette must have 40 entries");
        out
    })
}

fn parse_intrinsics(path: &Path) -> Result<CameraIntrinsics> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let v: Vec<f64> = text
        .split_whitespace()
        .map(|s| {
            s.parse()
                .map_err(|_| Error::data(format!("{}: bad value '{s}'", path.display())))
        })
        .collect::<Result<_>>()?;
    if v.len() != 7 {
        return Err(Error::data(format!(
            "{}: expected 7 values, found {}",
            path.display(),
            v.len()
        )));
    }
    let intr = CameraIntrinsics {
        fx: v[0],
        fy: v[1],
        cx: v[2],
        cy: v[3],
        width: v[4] as u32,
        height: v[5] as u32,
        depth_scale: v[6],
    };
    intr.validate()?;
    Ok(intr)
}

fn parse_poses(path: &Path) -> Result<Vec<Pose>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|s| {
                s.parse().map_err(|_| {
                    Error::data(format!("{}:{}: bad value '{s}'", path.display(), ln + 1))
                })
            })
            .collect::<Result<_>>()?;
        if v.len() != 16 {
            return Err(Error::data(format!(
                "{}:{}: expected 16 values per pose line, found {}",
                path.display(),
                ln + 1,
                v.len()
            )));
        }
        let rotation = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        let translation = Vector3::new(v[3], v[7], v[11]);
        let pose = Pose {
            rotation,
            translation,
        };
        pose.validate()
            .map_err(|e| Error::data(format!("{}:{}: {e}", path.display(), ln + 1)))?;
        out.push(pose);
    }
    Ok(out)
}

fn load_rgb(path: &Path) -> Result<(Vec<[f64; 3]>, u32, u32)> {
    let img = image::open(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img
        .pixels()
        .map(|p| {
            [
                p.0[0] as f64 / 255.0,
                p.0[1] as f64 / 255.0,
                p.0[2] as f64 / 255.0,
            ]
        })
        .collect();
    Ok((data, w, h))
}

fn load_depth(path: &Path, depth_scale: f64) -> Result<(Vec<f64>, u32, u32)> {
    let img = image::open(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let img = match img {
        image::DynamicImage::ImageLuma16(b) => b,
        other => other.to_luma16(),
    };
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| p.0[0] as f64 / depth_scale).collect();
    Ok((data, w, h))
}

/// Load a dataset directory; every frame must share the intrinsics' image
/// size, and pose/image counts must agree.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(Error::data(format!(
            "{}: not a dataset directory",
            dir.display()
        )));
    }
    let intrinsics = parse_intrinsics(&dir.join("intrinsics.txt"))?;
    let poses = parse_poses(&dir.join("poses.txt"))?;
    if poses.is_empty() {
        return Err(Error::data(format!("{}: poses.txt has no frames", dir.display())));
    }
    let sem_dir = dir.join("semantic");
    let has_sem = sem_dir.is_dir();
    let mut frames = Vec::with_capacity(poses.len());
    for (i, pose) in poses.into_iter().enumerate() {
        let rgb_path = dir.join(format!("rgb/{i:05}.png"));
        let depth_path = dir.join(format!("depth/{i:05}.png"));
        let (rgb, w, h) = load_rgb(&rgb_path)?;
        if (w, h) != (intrinsics.width, intrinsics.height) {
            return Err(Error::data(format!(
                "{}: size {w}x{h} does not match intrinsics {}x{}",
                rgb_path.display(),
                intrinsics.width,
                intrinsics.height
            )));
        }
        let (depth, dw, dh) = load_depth(&depth_path, intrinsics.depth_scale)?;
        if (dw, dh) != (intrinsics.width, intrinsics.height) {
            return Err(Error::data(format!(
                "{}: depth size mismatch",
                depth_path.display()
            )));
        }
        let semantic = if has_sem {
            let sp = sem_dir.join(format!("{i:05}.png"));
            let (s, sw, sh) = load_rgb(&sp)?;
            if (sw, sh) != (intrinsics.width, intrinsics.height) {
                return Err(Error::data(format!("{}: semantic size mismatch", sp.display())));
            }
            Some(s)
        } else {
            None
        };
        frames.push(Frame {
            pose,
            rgb,
            depth,
            semantic,
        });
    }
    let bounds = derive_bounds(&intrinsics, &frames);
    let gt = dir.join("gt_mesh.ply");
    Ok(Dataset {
        intrinsics,
        frames,
        bounds,
        gt_mesh_path: if gt.is_file() { Some(gt) } else { None },
    })
}

/// Scene bounds from camera centers and back-projected valid depths
/// (subsampled), grown by a fixed margin.
fn derive_bounds(intr: &CameraIntrinsics, frames: &[Frame]) -> Aabb {
    let mut lo = Vector3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
    let mut hi = -lo;
    let mut absorb = |p: Vector3<f64>| {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    };
    for f in frames {
        absorb(f.pose.translation);
        for py in (0..intr.height as usize).step_by(4) {
            for px in (0..intr.width as usize).step_by(4) {
                let z = f.depth[py * intr.width as usize + px];
                if z <= 0.0 {
                    continue;
                }
                let dir_cam = Vector3::new(
                    (px as f64 - intr.cx) / intr.fx,
                    (py as f64 - intr.cy) / intr.fy,
                    1.0,
                );
                absorb(f.pose.transform(&(dir_cam * z)));
            }
        }
    }
    if !lo.x.is_finite() {
        // No valid depth anywhere: unit box around the cameras.
        lo = Vector3::new(-1.0, -1.0, -1.0);
        hi = Vector3::new(1.0, 1.0, 1.0);
    }
    Aabb::new(lo, hi).grow(0.1)
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::data("dataset has no frames"));
        }
        for f in &self.frames {
            if !self.bounds.contains(&f.pose.translation) {
                return Err(Error::data("camera center outside bounds"));
            }
        }
        Ok(())
    }

    pub fn has_semantics(&self) -> bool {
        self.frames.iter().all(|f| f.semantic.is_some())
    }

    /// Any frame with at least one valid depth pixel.
    pub fn has_valid_depth(&self) -> bool {
        self.frames
            .iter()
            .any(|f| f.depth.iter().any(|d| *d > 0.0))
    }

    /// Supervised ray through pixel (px, py) of a frame; `None` when the ray
    /// misses the bounds.
    pub fn ray_task(&self, frame: usize, px: usize, py: usize) -> Option<RayTask> {
        let f = &self.frames[frame];
        let idx = py * self.intrinsics.width as usize + px;
        let mut ray = pixel_to_ray(
            &self.intrinsics,
            &f.pose,
            px as f64,
            py as f64,
            0.0,
            0.0,
        )
        .ok()?;
        let (t0, t1) = ray_aabb(&ray.origin, &ray.direction, &self.bounds.lo, &self.bounds.hi)?;
        ray.near = t0.max(0.02);
        ray.far = t1;
        if ray.far <= ray.near + 1e-6 {
            return None;
        }
        let z = f.depth[idx];
        let gt_depth_t = if z > 0.0 {
            Some(z * z_to_t_factor(&self.intrinsics, px as f64, py as f64))
        } else {
            None
        };
        Some(RayTask {
            ray,
            gt_color: f.rgb[idx],
            gt_sem: f.semantic.as_ref().map(|s| s[idx]),
            gt_depth_t,
        })
    }

    /// Draw one uniformly random supervised ray.
    pub fn sample_task<R: Rng>(&self, rng: &mut R) -> RayTask {
        loop {
            let frame = rng.gen_range(0..self.frames.len());
            let px = rng.gen_range(0..self.intrinsics.width as usize);
            let py = rng.gen_range(0..self.intrinsics.height as usize);
            if let Some(t) = self.ray_task(frame, px, py) {
                return t;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn palette_is_distinct() {
        let p = semantic_palette();
        for i in 0..40 {
            for j in i + 1..40 {
                assert_ne!(p[i], p[j], "classes {i} and {j} share a color");
            }
        }
    }

    #[test]
    fn missing_directory_is_data_error() {
        let err = load_dataset(Path::new("/nonexistent/nowhere")).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }
}
