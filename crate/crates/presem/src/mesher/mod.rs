//! Marching-cubes surface extraction over a dense query lattice, plus
//! observed-space culling of the result.

pub mod table;

use std::collections::HashMap;

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::Field;
use crate::geometry::{project, Aabb, CameraIntrinsics, Pose};
use table::{case_table, CORNER_POS, EDGE_AXIS, EDGE_ENDPOINTS};

/// Extracted surface with per-vertex normals.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[u32; 3]>,
    pub normals: Vec<Vector3<f64>>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.faces[f];
        let u = self.vertices[b as usize] - self.vertices[a as usize];
        let v = self.vertices[c as usize] - self.vertices[a as usize];
        u.cross(&v).norm() * 0.5
    }

    pub fn area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    pub fn face_normal(&self, f: usize) -> Vector3<f64> {
        let [a, b, c] = self.faces[f];
        let u = self.vertices[b as usize] - self.vertices[a as usize];
        let v = self.vertices[c as usize] - self.vertices[a as usize];
        let n = u.cross(&v);
        let len = n.norm();
        if len > 0.0 {
            n / len
        } else {
            Vector3::zeros()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for f in &self.faces {
            for &i in f {
                if i as usize >= self.vertices.len() {
                    return Err(Error::domain("face index out of range"));
                }
            }
        }
        if self.normals.len() != self.vertices.len() {
            return Err(Error::domain("normal count mismatch"));
        }
        for f in 0..self.faces.len() {
            if self.face_area(f) <= 1e-12 {
                return Err(Error::domain(format!("degenerate face {f}")));
            }
        }
        for n in &self.normals {
            if (n.norm() - 1.0).abs() > 1e-6 {
                return Err(Error::domain("non-unit normal"));
            }
        }
        Ok(())
    }
}

/// Scalar field the mesher queries. Blanket-implemented for closures.
pub trait SdfSource: Sync {
    fn sdf(&self, p: &Vector3<f64>) -> f64;
}

impl<F: Fn(&Vector3<f64>) -> f64 + Sync> SdfSource for F {
    fn sdf(&self, p: &Vector3<f64>) -> f64 {
        self(p)
    }
}

impl SdfSource for Field {
    fn sdf(&self, p: &Vector3<f64>) -> f64 {
        self.sdf_at(p)
    }
}

fn fd_normal<S: SdfSource + ?Sized>(field: &S, p: &Vector3<f64>, h: f64) -> Vector3<f64> {
    let mut g = Vector3::zeros();
    for a in 0..3 {
        let mut hi = *p;
        hi[a] += h;
        let mut lo = *p;
        lo[a] -= h;
        g[a] = (field.sdf(&hi) - field.sdf(&lo)) / (2.0 * h);
    }
    let n = g.norm();
    if n > 1e-12 {
        g / n
    } else {
        Vector3::new(0.0, 0.0, 1.0)
    }
}

/// Marching cubes over `bounds` sampled at `resolution` nodes per axis.
/// Vertices sit on sign-change edges by linear interpolation; normals come
/// from the field gradient. No sign change anywhere yields an empty mesh.
pub fn extract_mesh<S: SdfSource + ?Sized>(
    field: &S,
    bounds: &Aabb,
    resolution: usize,
    iso: f64,
) -> Result<TriangleMesh> {
    if resolution < 8 {
        return Err(Error::domain("mesh resolution must be at least 8 nodes"));
    }
    let n = resolution;
    let ext = bounds.extent();
    let step = Vector3::new(
        ext.x / (n - 1) as f64,
        ext.y / (n - 1) as f64,
        ext.z / (n - 1) as f64,
    );
    let node = |i: usize, j: usize, k: usize| {
        Vector3::new(
            bounds.lo.x + i as f64 * step.x,
            bounds.lo.y + j as f64 * step.y,
            bounds.lo.z + k as f64 * step.z,
        )
    };
    // Exact-iso values are nudged outside so crossings never sit on nodes.
    let nudge = 1e-12 * (1.0 + iso.abs());
    let eval_plane = |k: usize| -> Vec<f64> {
        (0..n * n)
            .into_par_iter()
            .map(|idx| {
                let i = idx / n;
                let j = idx % n;
                let v = field.sdf(&node(i, j, k));
                if v == iso {
                    iso + nudge
                } else {
                    v
                }
            })
            .collect()
    };

    let table = case_table();
    let mut verts: Vec<Vector3<f64>> = Vec::new();
    let mut faces: Vec<[u32; 3]> = Vec::new();
    let mut edge_ids: HashMap<(u32, u32, u32, u8), u32> = HashMap::new();

    let mut plane0 = eval_plane(0);
    for k in 0..n - 1 {
        let plane1 = eval_plane(k + 1);
        let value = |i: usize, j: usize, dk: usize| -> f64 {
            if dk == 0 {
                plane0[i * n + j]
            } else {
                plane1[i * n + j]
            }
        };
        for i in 0..n - 1 {
            for j in 0..n - 1 {
                let mut config = 0u8;
                let mut corner_vals = [0.0f64; 8];
                for (c, pos) in CORNER_POS.iter().enumerate() {
                    let v = value(i + pos[0] as usize, j + pos[1] as usize, pos[2] as usize);
                    corner_vals[c] = v;
                    if v < iso {
                        config |= 1 << c;
                    }
                }
                let tris = &table[config as usize];
                if tris.is_empty() {
                    continue;
                }
                let mut local = [u32::MAX; 12];
                for tri in tris {
                    let mut ids = [0u32; 3];
                    for (slot, &e) in tri.iter().enumerate() {
                        let e = e as usize;
                        if local[e] == u32::MAX {
                            let (a, b) = EDGE_ENDPOINTS[e];
                            let pa = CORNER_POS[a];
                            let axis = EDGE_AXIS[e];
                            let key = (
                                (i + pa[0] as usize) as u32,
                                (j + pa[1] as usize) as u32,
                                (k + pa[2] as usize) as u32,
                                axis as u8,
                            );
                            local[e] = *edge_ids.entry(key).or_insert_with(|| {
                                let va = corner_vals[a];
                                let vb = corner_vals[b];
                                let t = ((iso - va) / (vb - va)).clamp(0.0, 1.0);
                                let pb = CORNER_POS[b];
                                let p0 = node(i + pa[0] as usize, j + pa[1] as usize, k + pa[2] as usize);
                                let p1 = node(i + pb[0] as usize, j + pb[1] as usize, k + pb[2] as usize);
                                verts.push(p0 + (p1 - p0) * t);
                                (verts.len() - 1) as u32
                            });
                        }
                        ids[slot] = local[e];
                    }
                    if ids[0] != ids[1] && ids[1] != ids[2] && ids[0] != ids[2] {
                        faces.push(ids);
                    }
                }
            }
        }
        plane0 = plane1;
    }

    // Drop zero-area faces (collinear crossings).
    let mut mesh = TriangleMesh {
        vertices: verts,
        faces,
        normals: Vec::new(),
    };
    mesh.faces = (0..mesh.faces.len())
        .filter(|f| mesh.face_area(*f) > 1e-12)
        .map(|f| mesh.faces[f])
        .collect();

    let h = 0.5 * step.x.min(step.y).min(step.z);
    mesh.normals = mesh
        .vertices
        .par_iter()
        .map(|v| fd_normal(field, v, h))
        .collect();
    Ok(mesh)
}

/// One observation used for visibility culling.
pub struct CullView<'a> {
    pub intrinsics: CameraIntrinsics,
    pub pose: Pose,
    /// Row-major z-depth per pixel, 0 = invalid. When present, vertices far
    /// behind the observed surface are treated as unseen.
    pub depth: Option<&'a [f64]>,
}

/// Remove vertices observed by no view; faces keep any observed vertex.
pub fn cull_to_observed(mesh: &TriangleMesh, views: &[CullView], depth_margin: f64) -> TriangleMesh {
    let seen: Vec<bool> = mesh
        .vertices
        .par_iter()
        .map(|v| {
            views.iter().any(|view| {
                match project(&view.intrinsics, &view.pose, v) {
                    Some((px, py, z)) => {
                        if px < 0.0
                            || py < 0.0
                            || px >= view.intrinsics.width as f64
                            || py >= view.intrinsics.height as f64
                        {
                            return false;
                        }
                        match view.depth {
                            Some(d) => {
                                let xi = px as usize;
                                let yi = py as usize;
                                let obs = d[yi * view.intrinsics.width as usize + xi];
                                obs == 0.0 || z <= obs + depth_margin
                            }
                            None => true,
                        }
                    }
                    None => false,
                }
            })
        })
        .collect();
    let keep_face: Vec<bool> = mesh
        .faces
        .iter()
        .map(|f| f.iter().any(|&i| seen[i as usize]))
        .collect();
    let mut remap = vec![u32::MAX; mesh.vertices.len()];
    let mut vertices = Vec::new();
    let mut normals = Vec::new();
    let mut faces = Vec::new();
    for (fi, f) in mesh.faces.iter().enumerate() {
        if !keep_face[fi] {
            continue;
        }
        let mut ids = [0u32; 3];
        for (s, &i) in f.iter().enumerate() {
            if remap[i as usize] == u32::MAX {
                remap[i as usize] = vertices.len() as u32;
                vertices.push(mesh.vertices[i as usize]);
                normals.push(mesh.normals[i as usize]);
            }
            ids[s] = remap[i as usize];
        }
        faces.push(ids);
    }
    TriangleMesh {
        vertices,
        faces,
        normals,
    }
}

/// Every edge of a closed surface is shared by exactly two faces.
pub fn is_watertight(mesh: &TriangleMesh) -> bool {
    let mut counts: HashMap<(u32, u32), u32> = HashMap::new();
    for f in &mesh.faces {
        for s in 0..3 {
            let a = f[s];
            let b = f[(s + 1) % 3];
            let key = (a.min(b), a.max(b));
            *counts.entry(key).or_insert(0) += 1;
        }
    }
    counts.values().all(|c| *c == 2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cube_bounds() -> Aabb {
        Aabb::new(Vector3::new(-1.0, -1.0, -1.0), Vector3::new(1.0, 1.0, 1.0))
    }

    fn sphere_sdf(c: Vector3<f64>, r: f64) -> impl Fn(&Vector3<f64>) -> f64 + Sync {
        move |p: &Vector3<f64>| (p - c).norm() - r
    }

    #[test]
    fn sphere_vertices_on_radius() {
        let f = sphere_sdf(Vector3::zeros(), 0.5);
        let mesh = extract_mesh(&f, &cube_bounds(), 64, 0.0).unwrap();
        assert!(!mesh.is_empty());
        let voxel_diag = (2.0 / 63.0f64) * 3.0f64.sqrt();
        for v in &mesh.vertices {
            let r = v.norm();
            assert!(
                (r - 0.5).abs() <= voxel_diag,
                "vertex radius {r} off by more than one voxel diagonal"
            );
        }
        mesh.validate().unwrap();
    }

    #[test]
    fn sphere_mesh_watertight_and_genus_zero() {
        // Slightly off-center so lattice symmetries don't mask stitching
        // bugs.
        let f = sphere_sdf(Vector3::new(0.013, -0.021, 0.007), 0.5);
        let mesh = extract_mesh(&f, &cube_bounds(), 48, 0.0).unwrap();
        assert!(is_watertight(&mesh));
        let v = mesh.vertices.len() as i64;
        let fc = mesh.faces.len() as i64;
        let mut edges = std::collections::HashSet::new();
        for f in &mesh.faces {
            for s in 0..3 {
                let a = f[s];
                let b = f[(s + 1) % 3];
                edges.insert((a.min(b), a.max(b)));
            }
        }
        assert_eq!(v - edges.len() as i64 + fc, 2, "Euler characteristic");
    }

    #[test]
    fn sphere_rms_error_halves_with_resolution()
    {
        let f = sphere_sdf(Vector3::new(0.009, 0.004, -0.013), 0.5);
        let rms = |res: usize| {
            let mesh = extract_mesh(&f, &cube_bounds(), res, 0.0).unwrap();
            let s: f64 = mesh
                .vertices
                .iter()
                .map(|v| {
                    let c = Vector3::new(0.009, 0.004, -0.013);
                    ((v - c).norm() - 0.5).powi(2)
                })
                .sum();
            (s / mesh.vertices.len() as f64).sqrt()
        };
        let e64 = rms(64);
        let e128 = rms(128);
        assert!(
            e64 / e128 >= 1.8,
            "rms {e64:.2e} -> {e128:.2e} improved only {:.2}x",
            e64 / e128
        );
    }

    #[test]
    fn all_positive_field_gives_empty_mesh() {
        let f = |_p: &Vector3<f64>| 1.0;
        let mesh = extract_mesh(&f, &cube_bounds(), 16, 0.0).unwrap();
        assert!(mesh.is_empty());
    }

    #[test]
    fn plane_face_normals_align() {
        let n = Vector3::new(1.0, 2.0, -0.5).normalize();
        let f = move |p: &Vector3<f64>| p.dot(&n) - 0.1;
        let mesh = extract_mesh(&f, &cube_bounds(), 32, 0.0).unwrap();
        assert!(!mesh.is_empty());
        for fi in 0..mesh.faces.len() {
            let fnorm = mesh.face_normal(fi);
            assert!(
                fnorm.dot(&n) > 1.0 - 1e-3,
                "face {fi} normal {fnorm:?} misaligned"
            );
        }
        // Vertex normals point along the gradient too.
        for vn in &mesh.normals {
            assert!(vn.dot(&n) > 1.0 - 1e-6);
        }
    }

    #[test]
    fn random_fields_are_watertight_or_boundary_open() {
        // Every interior edge is shared by exactly 2 faces; edges on the
        // lattice boundary may be open. Closed random blobs away from the
        // boundary must be fully watertight.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(3);
        for _ in 0..5 {
            let centers: Vec<(Vector3<f64>, f64)> = (0..4)
                .map(|_| {
                    (
                        Vector3::new(
                            rng.gen_range(-0.4..0.4),
                            rng.gen_range(-0.4..0.4),
                            rng.gen_range(-0.4..0.4),
                        ),
                        rng.gen_range(0.15..0.35),
                    )
                })
                .collect();
            let f = move |p: &Vector3<f64>| {
                centers
                    .iter()
                    .map(|(c, r)| (p - c).norm() - r)
                    .fold(f64::INFINITY, f64::min)
            };
            let mesh = extract_mesh(&f, &cube_bounds(), 40, 0.0).unwrap();
            assert!(!mesh.is_empty());
            assert!(is_watertight(&mesh));
        }
    }

    #[test]
    fn mesh_deterministic() {
        let f = sphere_sdf(Vector3::new(0.1, 0.0, 0.0), 0.4);
        let a = extract_mesh(&f, &cube_bounds(), 32, 0.0).unwrap();
        let b = extract_mesh(&f, &cube_bounds(), 32, 0.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn low_resolution_rejected() {
        let f = sphere_sdf(Vector3::zeros(), 0.5);
        assert!(extract_mesh(&f, &cube_bounds(), 4, 0.0).is_err());
    }

    #[test]
    fn culling_drops_occluded_vertices() {
        let f = sphere_sdf(Vector3::zeros(), 0.5);
        let mesh = extract_mesh(&f, &cube_bounds(), 32, 0.0).unwrap();
        // Camera at -z looking toward +z; a synthetic depth map of the near
        // hemisphere occludes the far side.
        let intr = CameraIntrinsics {
            fx: 60.0,
            fy: 60.0,
            cx: 32.0,
            cy: 32.0,
            width: 64,
            height: 64,
            depth_scale: 1000.0,
        };
        let pose = Pose {
            rotation: nalgebra::Matrix3::identity(),
            translation: Vector3::new(0.0, 0.0, -2.0),
        };
        let mut depth = vec![0.0f64; 64 * 64];
        for py in 0..64 {
            for px in 0..64 {
                // Ray-sphere in camera frame: center (0,0,2), r=0.5.
                let d = Vector3::new((px as f64 - 32.0) / 60.0, (py as f64 - 32.0) / 60.0, 1.0);
                let dn = d.norm();
                let c = Vector3::new(0.0, 0.0, 2.0);
                let tc = d.dot(&c) / (dn * dn);
                let m2 = (d * tc - c).norm_squared();
                if m2 < 0.25 {
                    let dt = (0.25 - m2).sqrt() / dn;
                    depth[py * 64 + px] = (tc - dt) * d.z; // z of near hit
                }
            }
        }
        let views = [CullView {
            intrinsics: intr,
            pose,
            depth: Some(&depth),
        }];
        let culled = cull_to_observed(&mesh, &views, 0.05);
        assert!(!culled.is_empty());
        assert!(culled.faces.len() < mesh.faces.len());
        culled.validate().unwrap();
        // Far-hemisphere vertices (camera z near 2.5) are gone.
        let max_z = culled
            .vertices
            .iter()
            .map(|v| v.z)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(max_z < 0.25, "far hemisphere survived culling: {max_z}");
    }

    #[test]
    fn radius_error_statistics() {
        // RMS error at 64 nodes should be well under a voxel.
        let f = sphere_sdf(Vector3::zeros(), 0.5);
        let mesh = extract_mesh(&f, &cube_bounds(), 64, 0.0).unwrap();
        let mut rms = 0.0;
        for v in &mesh.vertices {
            rms += (v.norm() - 0.5).powi(2);
        }
        rms = (rms / mesh.vertices.len() as f64).sqrt();
        assert!(rms < 2.0 / 63.0, "rms {rms}");
        assert_relative_eq!(mesh.area(), 4.0 * std::f64::consts::PI * 0.25, epsilon = 0.05);
    }
}
