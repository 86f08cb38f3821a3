//! The learnable scene representation: multi-resolution feature grids, the
//! pre-rendering density MLP, the SDF/RGB decoders and the semantic color
//! head, together with the hand-written reverse pass used for training.
//!
//! Forward evaluation is read-only and callable concurrently; each worker
//! owns a [`FieldScratch`] that carries the activation caches the reverse
//! pass consumes. Parameters live in one flat `Vec<f64>` described by a
//! [`ParamLayout`], which is what makes the optimizer, the checkpoint format
//! and the finite-difference gradient checks straightforward.

pub mod grid;
pub mod mlp;
pub mod params;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::geometry::{encode_into, encoded_len, Aabb};
use grid::{GridLevel, InterpCache};
use mlp::{MlpCache, MlpOffsets, MlpSpec};
use params::{ParamGroup, ParamLayout};

#[derive(Debug, Clone, PartialEq)]
pub struct FieldConfig {
    /// Feature width per grid level.
    pub feature_dim: usize,
    /// Width of the geometric feature emitted by the SDF decoder.
    pub geo_dim: usize,
    /// Frequency octaves for the pre-rendering MLP's position encoding.
    pub pr_octaves: usize,
    /// Frequency octaves for the view-direction encoding.
    pub dir_octaves: usize,
    /// Prepend raw coordinates to frequency encodings.
    pub encode_include_raw: bool,
    pub pr_hidden: [usize; 2],
    pub sdf_hidden: [usize; 2],
    pub rgb_hidden: [usize; 2],
    pub sem_hidden: usize,
    pub init_inv_s: f64,
    /// sdf_gradient finite-difference step, as a fraction of the finest
    /// node spacing.
    pub fd_step_frac: f64,
    pub init_seed: u64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            feature_dim: 4,
            geo_dim: 4,
            pr_octaves: 6,
            dir_octaves: 4,
            encode_include_raw: true,
            pr_hidden: [32, 32],
            sdf_hidden: [64, 64],
            rgb_hidden: [64, 64],
            sem_hidden: 32,
            init_inv_s: 10.0,
            fd_step_frac: 0.5,
            init_seed: 0,
        }
    }
}

/// Decoded field quantities at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldOutput {
    pub sdf: f64,
    pub color: [f64; 3],
    pub semantic_color: [f64; 3],
    pub geometric_feature: Vec<f64>,
    /// Query point was outside the bounds and clamped.
    pub clamped: bool,
}

/// Copyable subset of [`FieldOutput`] used on hot paths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeVals {
    pub sdf: f64,
    pub color: [f64; 3],
    pub semantic_color: [f64; 3],
    pub clamped: bool,
}

/// Gradient of some scalar loss with respect to one decode's outputs.
#[derive(Debug, Clone, Copy, Default)]
pub struct DecodeGrad {
    pub d_sdf: f64,
    pub d_color: [f64; 3],
    pub d_semantic: [f64; 3],
}

pub struct Field {
    pub cfg: FieldConfig,
    pub bounds: Aabb,
    /// Finest-first (voxel sizes strictly increasing).
    pub levels: Vec<GridLevel>,
    pub layout: ParamLayout,
    pub params: Vec<f64>,
    pub iteration: u64,
    grid_offsets: Vec<usize>,
    pr_spec: MlpSpec,
    pr_off: MlpOffsets,
    sdf_spec: MlpSpec,
    sdf_off: MlpOffsets,
    rgb_spec: MlpSpec,
    rgb_off: MlpOffsets,
    sem_spec: MlpSpec,
    sem_off: MlpOffsets,
    inv_s_off: usize,
}

/// Per-worker activation caches. A decode's backward must run before the
/// next decode reuses the scratch.
pub struct FieldScratch {
    feat: Vec<f64>,
    interp: InterpCache,
    sdf_cache: MlpCache,
    head_in: Vec<f64>,
    rgb_cache: MlpCache,
    sem_cache: MlpCache,
    pr_cache: MlpCache,
    pr_enc: Vec<f64>,
    d_feat: Vec<f64>,
    d_head_in: Vec<f64>,
    d_sdf_out: Vec<f64>,
    color: [f64; 3],
    sem_color: [f64; 3],
}

fn add_mlp(layout: &mut ParamLayout, prefix: &str, spec: &MlpSpec, group: ParamGroup) -> MlpOffsets {
    let mut w = Vec::new();
    let mut b = Vec::new();
    for l in 0..spec.n_layers() {
        w.push(layout.push(
            format!("{prefix}.w{l}"),
            spec.sizes[l + 1] * spec.sizes[l],
            group,
        ));
        b.push(layout.push(format!("{prefix}.b{l}"), spec.sizes[l + 1], group));
    }
    let skip = if spec.skip {
        Some(layout.push(format!("{prefix}.skip"), spec.input(), group))
    } else {
        None
    };
    MlpOffsets { w, b, skip }
}

impl Field {
    /// Build an uninitialized (all-zero) field over `bounds` with the given
    /// nominal voxel sizes (strictly increasing, finest first).
    pub fn new(bounds: Aabb, voxel_sizes: &[f64], cfg: FieldConfig) -> Result<Field> {
        if voxel_sizes.is_empty() {
            return Err(Error::domain("at least one grid level required"));
        }
        for w in voxel_sizes.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::domain("voxel sizes must be strictly increasing"));
            }
        }
        if !(voxel_sizes[0] > 0.0) {
            return Err(Error::domain("voxel sizes must be positive"));
        }
        let levels: Vec<GridLevel> = voxel_sizes.iter().map(|v| GridLevel::new(&bounds, *v)).collect();

        let mut layout = ParamLayout::new();
        let mut grid_offsets = Vec::new();
        for (i, l) in levels.iter().enumerate() {
            grid_offsets.push(layout.push(
                format!("grid{i}"),
                l.node_count() * cfg.feature_dim,
                ParamGroup::Field,
            ));
        }

        let feat_len = levels.len() * cfg.feature_dim;
        let dir_len = encoded_len(cfg.dir_octaves, cfg.encode_include_raw);
        let pr_in = encoded_len(cfg.pr_octaves, cfg.encode_include_raw);

        let sdf_spec = MlpSpec::new(
            vec![feat_len, cfg.sdf_hidden[0], cfg.sdf_hidden[1], 1 + cfg.geo_dim],
            true,
        );
        let rgb_spec = MlpSpec::new(
            vec![cfg.geo_dim + dir_len, cfg.rgb_hidden[0], cfg.rgb_hidden[1], 3],
            false,
        );
        let sem_spec = MlpSpec::new(vec![cfg.geo_dim + dir_len, cfg.sem_hidden, 3], false);
        let pr_spec = MlpSpec::new(vec![pr_in, cfg.pr_hidden[0], cfg.pr_hidden[1], 1], false);

        let sdf_off = add_mlp(&mut layout, "sdf", &sdf_spec, ParamGroup::Field);
        let rgb_off = add_mlp(&mut layout, "rgb", &rgb_spec, ParamGroup::Field);
        let inv_s_off = layout.push("log_inv_s", 1, ParamGroup::Field);
        let pr_off = add_mlp(&mut layout, "pr", &pr_spec, ParamGroup::PrMlp);
        let sem_off = add_mlp(&mut layout, "sem", &sem_spec, ParamGroup::Semantic);

        let params = vec![0.0; layout.total()];
        Ok(Field {
            cfg,
            bounds,
            levels,
            layout,
            params,
            iteration: 0,
            grid_offsets,
            pr_spec,
            pr_off,
            sdf_spec,
            sdf_off,
            rgb_spec,
            rgb_off,
            sem_spec,
            sem_off,
            inv_s_off,
        })
    }

    /// Build and initialize: Xavier hidden layers, near-zero output layers,
    /// and the finest grid's channel 0 seeded with a sphere prior (positive
    /// toward the scene center) passed through the SDF decoder's skip row,
    /// so the initial surface is non-empty.
    pub fn new_initialized(bounds: Aabb, voxel_sizes: &[f64], cfg: FieldConfig) -> Result<Field> {
        let mut field = Field::new(bounds, voxel_sizes, cfg)?;
        let mut rng = ChaCha12Rng::seed_from_u64(field.cfg.init_seed);
        field.init_params(&mut rng);
        Ok(field)
    }

    fn init_mlp(params: &mut [f64], spec: &MlpSpec, off: &MlpOffsets, rng: &mut ChaCha12Rng) {
        let n_layers = spec.n_layers();
        for l in 0..n_layers {
            let n_in = spec.sizes[l];
            let n_out = spec.sizes[l + 1];
            let last = l + 1 == n_layers;
            let s = if last {
                1e-4
            } else {
                (6.0 / (n_in + n_out) as f64).sqrt()
            };
            for i in 0..n_out * n_in {
                params[off.w[l] + i] = rng.gen_range(-s..s);
            }
            for i in 0..n_out {
                params[off.b[l] + i] = 0.0;
            }
        }
        if let Some(skip) = off.skip {
            for i in 0..spec.input() {
                params[skip + i] = 0.0;
            }
        }
    }

    fn init_params(&mut self, rng: &mut ChaCha12Rng) {
        let fdim = self.cfg.feature_dim;
        for (li, level) in self.levels.iter().enumerate() {
            let base = self.grid_offsets[li];
            for i in 0..level.node_count() * fdim {
                self.params[base + i] = rng.gen_range(-1e-4..1e-4);
            }
        }
        // Sphere prior on the finest level's channel 0: positive at the
        // scene center, zero on a sphere well inside the bounds.
        let center = self.bounds.center();
        let ext = self.bounds.extent();
        let r0 = 0.45 * ext.x.min(ext.y).min(ext.z);
        let finest = 0;
        let level = self.levels[finest].clone();
        let base = self.grid_offsets[finest];
        for i in 0..level.dims[0] {
            for j in 0..level.dims[1] {
                for k in 0..level.dims[2] {
                    let p = level.node_position(&self.bounds, i, j, k);
                    let prior = r0 - (p - center).norm();
                    self.params[base + level.node_index(i, j, k) * fdim] = prior;
                }
            }
        }

        let (sdf_spec, sdf_off) = (self.sdf_spec.clone(), self.sdf_off.clone());
        Field::init_mlp(&mut self.params, &sdf_spec, &sdf_off, rng);
        let (rgb_spec, rgb_off) = (self.rgb_spec.clone(), self.rgb_off.clone());
        Field::init_mlp(&mut self.params, &rgb_spec, &rgb_off, rng);
        let (sem_spec, sem_off) = (self.sem_spec.clone(), self.sem_off.clone());
        Field::init_mlp(&mut self.params, &sem_spec, &sem_off, rng);
        let (pr_spec, pr_off) = (self.pr_spec.clone(), self.pr_off.clone());
        Field::init_mlp(&mut self.params, &pr_spec, &pr_off, rng);

        // Route the finest channel-0 (coarse-to-fine concat puts it last)
        // straight to the sdf output.
        let skip = self.sdf_off.skip.unwrap();
        let finest_slot = self.levels.len() - 1;
        self.params[skip + finest_slot * fdim] = 1.0;

        self.params[self.inv_s_off] = self.cfg.init_inv_s.ln();
    }

    pub fn scratch(&self) -> FieldScratch {
        let feat_len = self.levels.len() * self.cfg.feature_dim;
        let head_len = self.rgb_spec.input();
        FieldScratch {
            feat: vec![0.0; feat_len],
            interp: InterpCache::for_levels(self.levels.len()),
            sdf_cache: MlpCache::for_spec(&self.sdf_spec),
            head_in: vec![0.0; head_len],
            rgb_cache: MlpCache::for_spec(&self.rgb_spec),
            sem_cache: MlpCache::for_spec(&self.sem_spec),
            pr_cache: MlpCache::for_spec(&self.pr_spec),
            pr_enc: Vec::with_capacity(self.pr_spec.input()),
            d_feat: vec![0.0; feat_len],
            d_head_in: vec![0.0; head_len],
            d_sdf_out: vec![0.0; 1 + self.cfg.geo_dim],
            color: [0.0; 3],
            sem_color: [0.0; 3],
        }
    }

    pub fn inv_s(&self) -> f64 {
        self.params[self.inv_s_off].exp()
    }

    pub fn inv_s_index(&self) -> usize {
        self.inv_s_off
    }

    pub fn finest_spacing(&self) -> f64 {
        let s = &self.levels[0].spacing;
        s[0].min(s[1]).min(s[2])
    }

    /// Fail fast if any parameter is non-finite, naming the block.
    pub fn validate(&self) -> Result<()> {
        self.layout.check_finite(&self.params, "parameter")
    }

    /// Trilinear interpolation of all levels at `x`, concatenated
    /// coarse-to-fine. Public surface for the grid contract; hot paths go
    /// through `decode_*`.
    pub fn interpolate(&self, x: &Vector3<f64>) -> (Vec<f64>, bool) {
        let mut out = vec![0.0; self.levels.len() * self.cfg.feature_dim];
        let mut cache = InterpCache::for_levels(self.levels.len());
        grid::interpolate(
            &self.params,
            &self.levels,
            &self.grid_offsets,
            self.cfg.feature_dim,
            &self.bounds,
            x,
            &mut out,
            &mut cache,
        );
        (out, cache.clamped)
    }

    fn interp_into(&self, x: &Vector3<f64>, scratch: &mut FieldScratch) {
        grid::interpolate(
            &self.params,
            &self.levels,
            &self.grid_offsets,
            self.cfg.feature_dim,
            &self.bounds,
            x,
            &mut scratch.feat,
            &mut scratch.interp,
        );
    }

    /// SDF-only decode (grid interpolation + SDF MLP) with cache.
    pub fn decode_sdf(&self, x: &Vector3<f64>, scratch: &mut FieldScratch) -> (f64, bool) {
        self.interp_into(x, scratch);
        mlp::forward(
            &self.params,
            &self.sdf_spec,
            &self.sdf_off,
            &scratch.feat,
            &mut scratch.sdf_cache,
        );
        (scratch.sdf_cache.out[0], scratch.interp.clamped)
    }

    /// Reverse of `decode_sdf` for the most recent call on this scratch.
    pub fn decode_sdf_backward(&self, scratch: &mut FieldScratch, d_sdf: f64, grad: &mut [f64]) {
        scratch.d_sdf_out.fill(0.0);
        scratch.d_sdf_out[0] = d_sdf;
        scratch.d_feat.fill(0.0);
        mlp::backward(
            &self.params,
            &self.sdf_spec,
            &self.sdf_off,
            &scratch.sdf_cache,
            &scratch.d_sdf_out,
            grad,
            &mut scratch.d_feat,
        );
        grid::interpolate_backward(
            grad,
            self.levels.len(),
            &self.grid_offsets,
            self.cfg.feature_dim,
            &scratch.interp,
            &scratch.d_feat,
        );
    }

    /// Full decode: SDF, view-conditioned color and semantic color.
    pub fn decode_cached(
        &self,
        x: &Vector3<f64>,
        view_dir: &Vector3<f64>,
        scratch: &mut FieldScratch,
    ) -> DecodeVals {
        let (sdf, clamped) = self.decode_sdf(x, scratch);
        let geo = &scratch.sdf_cache.out[1..];
        scratch.head_in[..self.cfg.geo_dim].copy_from_slice(geo);
        let mut dir_buf = std::mem::take(&mut scratch.pr_enc);
        dir_buf.clear();
        if self.cfg.encode_include_raw {
            dir_buf.extend_from_slice(&[view_dir.x, view_dir.y, view_dir.z]);
        }
        encode_into(view_dir, self.cfg.dir_octaves, true, &mut dir_buf);
        scratch.head_in[self.cfg.geo_dim..].copy_from_slice(&dir_buf);
        scratch.pr_enc = dir_buf;
        mlp::forward(
            &self.params,
            &self.rgb_spec,
            &self.rgb_off,
            &scratch.head_in,
            &mut scratch.rgb_cache,
        );
        mlp::forward(
            &self.params,
            &self.sem_spec,
            &self.sem_off,
            &scratch.head_in,
            &mut scratch.sem_cache,
        );
        for c in 0..3 {
            scratch.color[c] = sigmoid(scratch.rgb_cache.out[c]);
            scratch.sem_color[c] = sigmoid(scratch.sem_cache.out[c]);
        }
        DecodeVals {
            sdf,
            color: scratch.color,
            semantic_color: scratch.sem_color,
            clamped,
        }
    }

    /// Public decode returning the full output record.
    pub fn decode(&self, x: &Vector3<f64>, view_dir: &Vector3<f64>) -> FieldOutput {
        let mut scratch = self.scratch();
        let v = self.decode_cached(x, view_dir, &mut scratch);
        FieldOutput {
            sdf: v.sdf,
            color: v.color,
            semantic_color: v.semantic_color,
            geometric_feature: scratch.sdf_cache.out[1..].to_vec(),
            clamped: v.clamped,
        }
    }

    /// Reverse of `decode_cached` for the most recent call on this scratch.
    pub fn decode_backward(&self, scratch: &mut FieldScratch, d: &DecodeGrad, grad: &mut [f64]) {
        scratch.d_sdf_out.fill(0.0);
        scratch.d_sdf_out[0] = d.d_sdf;
        let any_color = d.d_color.iter().any(|v| *v != 0.0);
        let any_sem = d.d_semantic.iter().any(|v| *v != 0.0);
        if any_color || any_sem {
            scratch.d_head_in.fill(0.0);
            if any_color {
                let mut d_raw = [0.0; 3];
                for c in 0..3 {
                    let s = scratch.color[c];
                    d_raw[c] = d.d_color[c] * s * (1.0 - s);
                }
                mlp::backward(
                    &self.params,
                    &self.rgb_spec,
                    &self.rgb_off,
                    &scratch.rgb_cache,
                    &d_raw,
                    grad,
                    &mut scratch.d_head_in,
                );
            }
            if any_sem {
                let mut d_raw = [0.0; 3];
                for c in 0..3 {
                    let s = scratch.sem_color[c];
                    d_raw[c] = d.d_semantic[c] * s * (1.0 - s);
                }
                mlp::backward(
                    &self.params,
                    &self.sem_spec,
                    &self.sem_off,
                    &scratch.sem_cache,
                    &d_raw,
                    grad,
                    &mut scratch.d_head_in,
                );
            }
            for g in 0..self.cfg.geo_dim {
                scratch.d_sdf_out[1 + g] += scratch.d_head_in[g];
            }
        }
        scratch.d_feat.fill(0.0);
        mlp::backward(
            &self.params,
            &self.sdf_spec,
            &self.sdf_off,
            &scratch.sdf_cache,
            &scratch.d_sdf_out,
            grad,
            &mut scratch.d_feat,
        );
        grid::interpolate_backward(
            grad,
            self.levels.len(),
            &self.grid_offsets,
            self.cfg.feature_dim,
            &scratch.interp,
            &scratch.d_feat,
        );
    }

    fn pr_encode(&self, x: &Vector3<f64>, out: &mut Vec<f64>) {
        // Normalize into [-1, 1] over the bounds before encoding so the
        // frequency ladder spans the scene.
        let c = self.bounds.center();
        let e = self.bounds.extent() * 0.5;
        let xn = Vector3::new((x.x - c.x) / e.x, (x.y - c.y) / e.y, (x.z - c.z) / e.z);
        out.clear();
        if self.cfg.encode_include_raw {
            out.extend_from_slice(&[xn.x, xn.y, xn.z]);
        }
        encode_into(&xn, self.cfg.pr_octaves, true, out);
    }

    /// Pre-rendering density: softplus(MLP(gamma(x))).
    pub fn pr_density_cached(&self, x: &Vector3<f64>, scratch: &mut FieldScratch) -> f64 {
        let mut enc = std::mem::take(&mut scratch.pr_enc);
        self.pr_encode(x, &mut enc);
        mlp::forward(&self.params, &self.pr_spec, &self.pr_off, &enc, &mut scratch.pr_cache);
        scratch.pr_enc = enc;
        softplus(scratch.pr_cache.out[0])
    }

    pub fn pr_density(&self, x: &Vector3<f64>) -> f64 {
        let mut scratch = self.scratch();
        self.pr_density_cached(x, &mut scratch)
    }

    /// Reverse of `pr_density_cached` for the most recent call.
    pub fn pr_density_backward(&self, scratch: &mut FieldScratch, d_sigma: f64, grad: &mut [f64]) {
        let pre = scratch.pr_cache.out[0];
        let d_pre = d_sigma * sigmoid(pre);
        // The pr encoding carries no parameters; input gradient is discarded.
        let mut sink = vec![0.0; self.pr_spec.input()];
        mlp::backward(
            &self.params,
            &self.pr_spec,
            &self.pr_off,
            &scratch.pr_cache,
            &[d_pre],
            grad,
            &mut sink,
        );
    }

    /// Central finite-difference gradient of the decoded SDF with step
    /// `fd_step_frac * finest spacing`; falls back to a one-sided difference
    /// on axes whose neighbor leaves the bounds (flag returned).
    pub fn sdf_gradient(&self, x: &Vector3<f64>, scratch: &mut FieldScratch) -> (Vector3<f64>, bool) {
        let h = self.gradient_step();
        let mut g = Vector3::zeros();
        let mut one_sided = false;
        let mut center: Option<f64> = None;
        for a in 0..3 {
            let mut hi = *x;
            hi[a] += h;
            let mut lo = *x;
            lo[a] -= h;
            let hi_in = self.bounds.contains(&hi);
            let lo_in = self.bounds.contains(&lo);
            g[a] = match (hi_in, lo_in) {
                (true, true) => {
                    (self.decode_sdf(&hi, scratch).0 - self.decode_sdf(&lo, scratch).0) / (2.0 * h)
                }
                (true, false) => {
                    one_sided = true;
                    let c = *center.get_or_insert_with(|| self.decode_sdf(x, scratch).0);
                    (self.decode_sdf(&hi, scratch).0 - c) / h
                }
                (false, true) => {
                    one_sided = true;
                    let c = *center.get_or_insert_with(|| self.decode_sdf(x, scratch).0);
                    (c - self.decode_sdf(&lo, scratch).0) / h
                }
                (false, false) => {
                    one_sided = true;
                    0.0
                }
            };
        }
        (g, one_sided)
    }

    pub fn gradient_step(&self) -> f64 {
        self.cfg.fd_step_frac * self.finest_spacing()
    }

    pub fn grid_offset(&self, level: usize) -> usize {
        self.grid_offsets[level]
    }

    /// Decode the SDF at a point without a persistent scratch (convenience
    /// for meshing and tests; allocates).
    pub fn sdf_at(&self, x: &Vector3<f64>) -> f64 {
        let mut scratch = self.scratch();
        self.decode_sdf(x, &mut scratch).0
    }

    /// Trilinear evaluation of a single level's feature field at `x`,
    /// extending the boundary cells' multilinear patches beyond the lattice.
    /// Used by the coarse-to-fine feature transfer, where extrapolation is
    /// what keeps the decoded field unchanged on overhang cells.
    pub fn interpolate_level(&self, level: usize, x: &Vector3<f64>) -> Vec<f64> {
        let (corners, weights) = grid::stencil_ext(&self.levels[level], &self.bounds, x, true);
        let fdim = self.cfg.feature_dim;
        let base = self.grid_offsets[level];
        let mut out = vec![0.0; fdim];
        for c in 0..8 {
            let w = weights[c];
            if w == 0.0 {
                continue;
            }
            let src = &self.params[base + corners[c] * fdim..][..fdim];
            for f in 0..fdim {
                out[f] += w * src[f];
            }
        }
        out
    }

    // ------------------------------------------------------------------
    // Checkpoint I/O
    // ------------------------------------------------------------------

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_checkpoint(&mut w)
    }

    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(params::CHECKPOINT_MAGIC.as_bytes())?;
        w.write_all(b"\n")?;
        for a in 0..3 {
            params::write_f64(w, self.bounds.lo[a])?;
        }
        for a in 0..3 {
            params::write_f64(w, self.bounds.hi[a])?;
        }
        params::write_u32(w, self.levels.len() as u32)?;
        for l in &self.levels {
            params::write_f64(w, l.voxel)?;
            for a in 0..3 {
                params::write_u32(w, l.dims[a] as u32)?;
            }
        }
        let c = &self.cfg;
        for v in [
            c.feature_dim,
            c.geo_dim,
            c.pr_octaves,
            c.dir_octaves,
            c.encode_include_raw as usize,
            c.pr_hidden[0],
            c.pr_hidden[1],
            c.sdf_hidden[0],
            c.sdf_hidden[1],
            c.rgb_hidden[0],
            c.rgb_hidden[1],
            c.sem_hidden,
        ] {
            params::write_u32(w, v as u32)?;
        }
        params::write_f64(w, c.init_inv_s)?;
        params::write_f64(w, c.fd_step_frac)?;
        params::write_u64(w, c.init_seed)?;
        params::write_u64(w, self.iteration)?;
        params::write_u64(w, self.params.len() as u64)?;
        for v in &self.params {
            params::write_f64(w, *v)?;
        }
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Field> {
        let mut r = BufReader::new(
            File::open(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?,
        );
        Field::read_checkpoint(&mut r)
    }

    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Field> {
        let mut magic = vec![0u8; params::CHECKPOINT_MAGIC.len() + 1];
        r.read_exact(&mut magic)?;
        if &magic[..params::CHECKPOINT_MAGIC.len()] != params::CHECKPOINT_MAGIC.as_bytes() {
            return Err(Error::data("not a presem-ckpt-v1 checkpoint"));
        }
        let mut lo = Vector3::zeros();
        let mut hi = Vector3::zeros();
        for a in 0..3 {
            lo[a] = params::read_f64(r)?;
        }
        for a in 0..3 {
            hi[a] = params::read_f64(r)?;
        }
        let n_levels = params::read_u32(r)? as usize;
        let mut voxels = Vec::with_capacity(n_levels);
        let mut stored_dims = Vec::with_capacity(n_levels);
        for _ in 0..n_levels {
            voxels.push(params::read_f64(r)?);
            let dims = [
                params::read_u32(r)? as usize,
                params::read_u32(r)? as usize,
                params::read_u32(r)? as usize,
            ];
            stored_dims.push(dims);
        }
        let mut u = [0usize; 12];
        for v in u.iter_mut() {
            *v = params::read_u32(r)? as usize;
        }
        let init_inv_s = params::read_f64(r)?;
        let fd_step_frac = params::read_f64(r)?;
        let init_seed = params::read_u64(r)?;
        let cfg = FieldConfig {
            feature_dim: u[0],
            geo_dim: u[1],
            pr_octaves: u[2],
            dir_octaves: u[3],
            encode_include_raw: u[4] != 0,
            pr_hidden: [u[5], u[6]],
            sdf_hidden: [u[7], u[8]],
            rgb_hidden: [u[9], u[10]],
            sem_hidden: u[11],
            init_inv_s,
            fd_step_frac,
            init_seed,
        };
        let iteration = params::read_u64(r)?;
        let n_params = params::read_u64(r)? as usize;
        let mut field = Field::new(Aabb::new(lo, hi), &voxels, cfg)?;
        for (l, dims) in field.levels.iter().zip(stored_dims.iter()) {
            if &l.dims != dims {
                return Err(Error::data("checkpoint grid dims inconsistent with bounds"));
            }
        }
        if field.params.len() != n_params {
            return Err(Error::data(format!(
                "checkpoint parameter count {} != expected {}",
                n_params,
                field.params.len()
            )));
        }
        for v in field.params.iter_mut() {
            *v = params::read_f64(r)?;
        }
        field.iteration = iteration;
        Ok(field)
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        (1.0 + x.exp()).ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small_field() -> Field {
        let bounds = Aabb::new(Vector3::new(-1.0, -1.0, -1.0), Vector3::new(1.0, 1.0, 1.0));
        Field::new_initialized(
            bounds,
            &[0.25, 0.5],
            FieldConfig {
                feature_dim: 2,
                geo_dim: 3,
                pr_octaves: 2,
                dir_octaves: 1,
                pr_hidden: [8, 8],
                sdf_hidden: [16, 16],
                rgb_hidden: [16, 16],
                sem_hidden: 8,
                init_seed: 5,
                ..FieldConfig::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn pr_density_zero_params_is_ln2() {
        let mut field = small_field();
        // Zero the PR block only.
        for r in field.layout.group_ranges(ParamGroup::PrMlp) {
            field.params[r].fill(0.0);
        }
        let sigma = field.pr_density(&Vector3::new(0.1, 0.2, 0.3));
        assert_relative_eq!(sigma, 2.0_f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn pr_density_nonnegative_and_deterministic() {
        let field = small_field();
        for i in 0..50 {
            let x = Vector3::new((i as f64) * 0.01 - 0.3, 0.2, -0.1);
            let a = field.pr_density(&x);
            let b = field.pr_density(&x);
            assert!(a >= 0.0);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn decode_zeroed_rgb_head_gives_mid_grey() {
        let mut field = small_field();
        // Zero only the RGB output layer.
        let off = field.rgb_off.clone();
        let spec = field.rgb_spec.clone();
        let last = spec.n_layers() - 1;
        let n = spec.sizes[last + 1] * spec.sizes[last];
        field.params[off.w[last]..off.w[last] + n].fill(0.0);
        field.params[off.b[last]..off.b[last] + spec.sizes[last + 1]].fill(0.0);
        let out = field.decode(&Vector3::new(0.2, 0.0, -0.2), &Vector3::new(0.0, 0.0, 1.0));
        for c in 0..3 {
            assert_relative_eq!(out.color[c], 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn decode_is_deterministic_and_pure() {
        let field = small_field();
        let before = field.params.clone();
        let x = Vector3::new(0.3, -0.4, 0.5);
        let d = Vector3::new(0.0, 0.6, 0.8);
        let a = field.decode(&x, &d);
        let b = field.decode(&x, &d);
        assert_eq!(a, b);
        assert_eq!(before, field.params);
    }

    #[test]
    fn initialized_sdf_matches_sphere_prior_at_finest_nodes() {
        let field = small_field();
        let center = field.bounds.center();
        let ext = field.bounds.extent();
        let r0 = 0.45 * ext.x.min(ext.y).min(ext.z);
        let level = field.levels[0].clone();
        let mut scratch = field.scratch();
        let mut worst: f64 = 0.0;
        for i in (0..level.dims[0]).step_by(3) {
            for j in (0..level.dims[1]).step_by(3) {
                for k in (0..level.dims[2]).step_by(3) {
                    let p = level.node_position(&field.bounds, i, j, k);
                    let prior = r0 - (p - center).norm();
                    let (sdf, _) = field.decode_sdf(&p, &mut scratch);
                    worst = worst.max((sdf - prior).abs());
                }
            }
        }
        // Output layer noise is ~1e-4; the skip carries the prior.
        assert!(worst < 5e-3, "worst deviation {worst}");
    }

    #[test]
    fn sdf_gradient_of_linear_grid_field() {
        let bounds = Aabb::new(Vector3::new(-1.0, -1.0, -1.0), Vector3::new(1.0, 1.0, 1.0));
        let mut field = Field::new(
            bounds,
            &[0.25],
            FieldConfig {
                feature_dim: 1,
                geo_dim: 2,
                sdf_hidden: [8, 8],
                rgb_hidden: [8, 8],
                sem_hidden: 4,
                ..FieldConfig::default()
            },
        )
        .unwrap();
        // sdf(x) = x.x via channel 0 + skip.
        let level = field.levels[0].clone();
        let base = field.grid_offset(0);
        for i in 0..level.dims[0] {
            for j in 0..level.dims[1] {
                for k in 0..level.dims[2] {
                    let p = level.node_position(&field.bounds, i, j, k);
                    field.params[base + level.node_index(i, j, k)] = p.x;
                }
            }
        }
        let skip = field.sdf_off.skip.unwrap();
        field.params[skip] = 1.0;
        let mut scratch = field.scratch();
        let (g, one_sided) = field.sdf_gradient(&Vector3::new(0.1, -0.2, 0.3), &mut scratch);
        assert!(!one_sided);
        assert_relative_eq!(g.x, 1.0, epsilon = 1e-6);
        assert_relative_eq!(g.y, 0.0, epsilon = 1e-6);
        assert_relative_eq!(g.z, 0.0, epsilon = 1e-6);

        // Constant field: zero gradient.
        for i in 0..level.node_count() {
            field.params[base + i] = 3.0;
        }
        let (g, _) = field.sdf_gradient(&Vector3::new(0.1, -0.2, 0.3), &mut scratch);
        assert_relative_eq!(g.norm(), 0.0, epsilon = 1e-9);

        // Near the boundary the difference goes one-sided but stays finite.
        let (g, one_sided) = field.sdf_gradient(&Vector3::new(0.999, 0.0, 0.0), &mut scratch);
        assert!(one_sided);
        assert!(g.norm().is_finite());
    }

    #[test]
    fn finite_difference_probe_of_grid_perturbation() {
        let field = small_field();
        let x = Vector3::new(0.21, -0.17, 0.33);
        let mut scratch = field.scratch();
        let (s0, _) = field.decode_sdf(&x, &mut scratch);
        let mut perturbed = small_field();
        let delta = 1e-4;
        perturbed.params[field.grid_offset(0)] += delta;
        let (s1, _) = perturbed.decode_sdf(&x, &mut scratch);
        // Bounded response to a bounded perturbation.
        assert!((s1 - s0).abs() <= 10.0 * delta);
    }

    #[test]
    fn checkpoint_roundtrip_bitexact() {
        let field = small_field();
        let mut buf = Vec::new();
        field.write_checkpoint(&mut buf).unwrap();
        let loaded = Field::read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(field.params, loaded.params);
        assert_eq!(field.iteration, loaded.iteration);
        assert_eq!(field.bounds, loaded.bounds);
        let mut buf2 = Vec::new();
        loaded.write_checkpoint(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn bad_magic_rejected() {
        let field = small_field();
        let mut buf = Vec::new();
        field.write_checkpoint(&mut buf).unwrap();
        buf[0] = b'x';
        assert!(Field::read_checkpoint(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn decode_backward_matches_finite_differences() {
        let mut field = small_field();
        let x = Vector3::new(0.13, -0.29, 0.41);
        let dir = Vector3::new(0.48, 0.6, 0.64).normalize();
        let d = DecodeGrad {
            d_sdf: 0.7,
            d_color: [0.3, -0.2, 0.9],
            d_semantic: [-0.5, 0.4, 0.1],
        };
        let mut scratch = field.scratch();
        let _ = field.decode_cached(&x, &dir, &mut scratch);
        let mut grad = vec![0.0; field.params.len()];
        field.decode_backward(&mut scratch, &d, &mut grad);

        let probe = |f: &Field| {
            let mut s = f.scratch();
            let v = f.decode_cached(&x, &dir, &mut s);
            v.sdf * d.d_sdf
                + (0..3).map(|c| v.color[c] * d.d_color[c]).sum::<f64>()
                + (0..3).map(|c| v.semantic_color[c] * d.d_semantic[c]).sum::<f64>()
        };
        let h = 1e-6;
        let n = field.params.len();
        let step = (n / 97).max(1);
        for idx in (0..n).step_by(step) {
            let orig = field.params[idx];
            field.params[idx] = orig + h;
            let lp = probe(&field);
            field.params[idx] = orig - h;
            let lm = probe(&field);
            field.params[idx] = orig;
            let num = (lp - lm) / (2.0 * h);
            let ana = grad[idx];
            let denom = num.abs().max(ana.abs()).max(1e-7);
            // Absolute floor absorbs finite-difference cancellation noise on
            // near-zero gradients.
            assert!(
                (num - ana).abs() < 1e-8 || ((num - ana) / denom).abs() < 1e-5,
                "idx {idx} ({}): fd {num} vs analytic {ana}",
                field.layout.block_of(idx)
            );
        }
    }
}
