//! Multi-resolution voxel feature lattices with trilinear interpolation.
//!
//! All levels share the bounds' lower corner as lattice origin, so a level
//! whose spacing is an integer multiple of a finer level's spacing has its
//! nodes coincide with that level's nodes (this is what makes the
//! coarse-to-fine feature transfer exact at coarse nodes).

use nalgebra::Vector3;

use crate::geometry::Aabb;

/// One lattice level. `spacing` is the actual per-axis node spacing; it
/// equals the nominal `voxel` except when the voxel exceeds the scene
/// extent, in which case the level collapses to a 2-node lattice per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct GridLevel {
    pub voxel: f64,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub collapsed: bool,
}

impl GridLevel {
    pub fn new(bounds: &Aabb, voxel: f64) -> Self {
        let ext = bounds.extent();
        let mut dims = [0usize; 3];
        let mut spacing = [0.0f64; 3];
        let mut collapsed = false;
        for a in 0..3 {
            if voxel >= ext[a] {
                dims[a] = 2;
                spacing[a] = ext[a];
                collapsed = true;
            } else {
                let cells = (ext[a] / voxel).ceil() as usize;
                dims[a] = cells + 1;
                spacing[a] = voxel;
            }
        }
        GridLevel {
            voxel,
            dims,
            spacing,
            collapsed,
        }
    }

    pub fn node_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn node_index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    pub fn node_position(&self, bounds: &Aabb, i: usize, j: usize, k: usize) -> Vector3<f64> {
        Vector3::new(
            bounds.lo.x + i as f64 * self.spacing[0],
            bounds.lo.y + j as f64 * self.spacing[1],
            bounds.lo.z + k as f64 * self.spacing[2],
        )
    }
}

/// Per-level interpolation stencil retained for the reverse pass: the eight
/// enclosing node indices and their trilinear weights.
#[derive(Debug, Clone, Default)]
pub struct InterpCache {
    pub corners: Vec<[usize; 8]>,
    pub weights: Vec<[f64; 8]>,
    pub clamped: bool,
}

impl InterpCache {
    pub fn for_levels(n: usize) -> Self {
        InterpCache {
            corners: vec![[0; 8]; n],
            weights: vec![[0.0; 8]; n],
            clamped: false,
        }
    }
}

/// Compute the stencil for one level at point `x` (already clamped to
/// bounds). Returns (corner node indices, weights). With `extrapolate` the
/// fractional coordinate is left unclamped, extending the boundary cell's
/// multilinear patch beyond the lattice (used by feature transfer).
pub fn stencil_ext(
    level: &GridLevel,
    bounds: &Aabb,
    x: &Vector3<f64>,
    extrapolate: bool,
) -> ([usize; 8], [f64; 8]) {
    let mut cell = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..3 {
        let u = (x[a] - bounds.lo[a]) / level.spacing[a];
        let max_cell = level.dims[a] - 2;
        let c = u.floor();
        let c = if c < 0.0 {
            0.0
        } else if c as usize > max_cell {
            max_cell as f64
        } else {
            c
        };
        cell[a] = c as usize;
        frac[a] = if extrapolate {
            u - c
        } else {
            (u - c).clamp(0.0, 1.0)
        };
    }
    let mut corners = [0usize; 8];
    let mut weights = [0.0f64; 8];
    for bit in 0..8 {
        let di = bit & 1;
        let dj = (bit >> 1) & 1;
        let dk = (bit >> 2) & 1;
        corners[bit] = level.node_index(cell[0] + di, cell[1] + dj, cell[2] + dk);
        let wx = if di == 1 { frac[0] } else { 1.0 - frac[0] };
        let wy = if dj == 1 { frac[1] } else { 1.0 - frac[1] };
        let wz = if dk == 1 { frac[2] } else { 1.0 - frac[2] };
        weights[bit] = wx * wy * wz;
    }
    (corners, weights)
}

pub fn stencil(level: &GridLevel, bounds: &Aabb, x: &Vector3<f64>) -> ([usize; 8], [f64; 8]) {
    stencil_ext(level, bounds, x, false)
}

/// Trilinear interpolation of every level at `x`, concatenated
/// coarse-to-fine into `out`. Points outside the bounds are clamped to the
/// boundary and flagged in the cache. `levels` is ordered finest-first;
/// `grid_offsets[l]` is the flat offset of level l's feature array.
#[allow(clippy::too_many_arguments)]
pub fn interpolate(
    params: &[f64],
    levels: &[GridLevel],
    grid_offsets: &[usize],
    feature_dim: usize,
    bounds: &Aabb,
    x: &Vector3<f64>,
    out: &mut [f64],
    cache: &mut InterpCache,
) {
    let inside = bounds.contains(x);
    let xq = if inside { *x } else { bounds.clamp(x) };
    cache.clamped = !inside;
    let n_levels = levels.len();
    // Concatenation runs coarse-to-fine, i.e. levels in reverse storage order.
    for (slot, l) in (0..n_levels).rev().enumerate() {
        let (corners, weights) = stencil(&levels[l], bounds, &xq);
        let base = grid_offsets[l];
        let dst = &mut out[slot * feature_dim..(slot + 1) * feature_dim];
        dst.fill(0.0);
        for c in 0..8 {
            let w = weights[c];
            if w == 0.0 {
                continue;
            }
            let src = &params[base + corners[c] * feature_dim..][..feature_dim];
            for f in 0..feature_dim {
                dst[f] += w * src[f];
            }
        }
        cache.corners[l] = corners;
        cache.weights[l] = weights;
    }
}

/// Reverse of `interpolate`: scatter `d_out` (gradient of the concatenated
/// feature vector) back into the grid gradient.
pub fn interpolate_backward(
    grad: &mut [f64],
    levels_len: usize,
    grid_offsets: &[usize],
    feature_dim: usize,
    cache: &InterpCache,
    d_out: &[f64],
) {
    for (slot, l) in (0..levels_len).rev().enumerate() {
        let base = grid_offsets[l];
        let src = &d_out[slot * feature_dim..(slot + 1) * feature_dim];
        let corners = &cache.corners[l];
        let weights = &cache.weights[l];
        for c in 0..8 {
            let w = weights[c];
            if w == 0.0 {
                continue;
            }
            let dst = base + corners[c] * feature_dim;
            for f in 0..feature_dim {
                grad[dst + f] += w * src[f];
            }
        }
    }
}
