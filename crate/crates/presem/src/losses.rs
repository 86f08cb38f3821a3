//! The training objective: photometric, depth, truncated-SDF, free-space,
//! Eikonal, smoothness and semantic terms, plus the pre-rendering depth
//! loss, as pure functions of a frozen sample set — and the hand-written
//! reverse pass that pushes their gradients into the flat parameter vector.
//!
//! The split into `sample_batch` (draws and freezes every sample location),
//! `forward_ray`/`RayEval` (pure evaluation at fixed locations) and
//! `backprop_ray` (reverse pass at the same locations) is what the
//! finite-difference gradient checks lean on: derivatives are taken with
//! sample positions held fixed.

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::field::{DecodeGrad, DecodeVals, Field, FieldScratch};
use crate::geometry::Ray;
use crate::renderer::{
    coarse_weights, composite, sdf_to_density, sdf_to_density_grad, spacings, weight_chain,
    weight_chain_backward, RayRender, RendererConfig, Stage, WeightChain, WeightMode,
};
use crate::sampler::{hierarchical_sample, SampleLayer, SamplerConfig};

/// Loss weights. The nested lambda structure follows the two-branch
/// objective: an SG branch over rendering/geometry terms and a semantic
/// branch over pseudo-color supervision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_sg: f64,
    pub lambda_sem: f64,
    pub lambda_pr: f64,
    pub lambda_rgb: f64,
    pub lambda_d: f64,
    pub lambda_sdf: f64,
    pub lambda_fs: f64,
    pub lambda_eik: f64,
    pub lambda_smooth: f64,
    /// Semantic branch color weight (lambda'_rgb).
    pub lambda_sem_rgb: f64,
    /// Semantic branch depth weight (lambda'_d).
    pub lambda_sem_d: f64,
    /// Extra multiplier applied to the fine-stage color+depth pair.
    pub lambda_model: f64,
    /// Truncation distance in meters.
    pub truncation: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_sg: 4.0,
            lambda_sem: 1.0,
            lambda_pr: 1.0,
            lambda_rgb: 10.0,
            lambda_d: 1.0,
            lambda_sdf: 10.0,
            lambda_fs: 1.0,
            lambda_eik: 0.1,
            lambda_smooth: 0.01,
            lambda_sem_rgb: 1.0,
            lambda_sem_d: 0.1,
            lambda_model: 5.0,
            truncation: 0.05,
        }
    }
}

impl LossWeights {
    /// Effective weights for a training stage: the model multiplier scales
    /// the fine-stage color and depth pair.
    pub fn for_stage(&self, stage: Stage) -> LossWeights {
        let mut w = *self;
        if stage == Stage::Fine {
            w.lambda_rgb *= self.lambda_model;
            w.lambda_d *= self.lambda_model;
        }
        w
    }
}

/// Per-term loss values (unweighted).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub pr: f64,
    pub rgb: f64,
    pub depth: f64,
    pub sdf: f64,
    pub fs: f64,
    pub eik: f64,
    pub smooth: f64,
    pub sem_rgb: f64,
    pub sem_depth: f64,
}

/// No-op flags: a term whose sample set came up empty contributes zero.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossFlags {
    pub pr_noop: bool,
    pub depth_noop: bool,
    pub sdf_noop: bool,
    pub fs_noop: bool,
    pub eik_noop: bool,
    pub smooth_noop: bool,
    pub sem_noop: bool,
}

/// Weighted total per the two-branch objective.
pub fn total_loss(t: &LossTerms, w: &LossWeights) -> f64 {
    w.lambda_sg
        * (w.lambda_pr * t.pr
            + w.lambda_rgb * t.rgb
            + w.lambda_d * t.depth
            + w.lambda_sdf * t.sdf
            + w.lambda_fs * t.fs
            + w.lambda_eik * t.eik
            + w.lambda_smooth * t.smooth)
        + w.lambda_sem * (w.lambda_sem_rgb * t.sem_rgb + w.lambda_sem_d * t.sem_depth)
}

// ---------------------------------------------------------------------
// Batch construction
// ---------------------------------------------------------------------

/// One supervised ray. Depths are ray parameters (meters along the unit
/// direction); `gt_depth_t` is `None` for invalid sensor readings.
#[derive(Debug, Clone)]
pub struct RayTask {
    pub ray: Ray,
    pub gt_color: [f64; 3],
    pub gt_sem: Option<[f64; 3]>,
    pub gt_depth_t: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchConfig {
    /// Dedicated uniform truncation-region samples per valid-depth ray.
    pub tr_samples: usize,
    /// Free-space points per ray carried into the Eikonal term (0 = all).
    pub eik_per_ray: usize,
    /// Near-surface points for the smoothness term per batch.
    pub smooth_points: usize,
    /// Rejection budget multiplier for smoothness sampling.
    pub smooth_budget: usize,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig {
            tr_samples: 8,
            eik_per_ray: 6,
            smooth_points: 512,
            smooth_budget: 20,
        }
    }
}

/// Where a truncation-region point lives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrSource {
    /// Index into the ray's sample layer.
    Layer(usize),
    /// Index into the dedicated truncation draws.
    Extra(usize),
}

/// Frozen per-ray sample set.
#[derive(Debug, Clone)]
pub struct SampledRay {
    pub task: usize,
    pub layer: SampleLayer,
    pub dz: Vec<f64>,
    /// Free-space indices into the layer (z < D - tr).
    pub fs: Vec<usize>,
    /// Subset of `fs` carrying the Eikonal term.
    pub eik: Vec<usize>,
    /// Dedicated uniform truncation-region depths (sorted).
    pub extra_tr: Vec<f64>,
    /// All truncation-region points (|z - D| < tr), sorted by depth.
    pub tr_union: Vec<(f64, TrSource)>,
}

/// A near-surface point and its offset twin for the smoothness term.
#[derive(Debug, Clone, Copy)]
pub struct SmoothPoint {
    pub x: Vector3<f64>,
    pub x_off: Vector3<f64>,
}

/// Frozen batch: every sample location the losses will touch.
#[derive(Debug, Clone)]
pub struct SampledBatch {
    pub rays: Vec<SampledRay>,
    pub stage: Stage,
    pub smooth: Vec<SmoothPoint>,
    /// Rejection budget ran out before `smooth_points` were found.
    pub smooth_exhausted: bool,
    /// Plain stratified + density-guided resampling was used instead of the
    /// pre-rendered pipeline (ablation).
    pub no_sg_mlp: bool,
}

/// Deterministic per-ray RNG stream from (seed, ray id).
pub fn ray_stream(seed: u64, id: u64) -> ChaCha12Rng {
    use rand::SeedableRng;
    let mut z = seed ^ id.wrapping_mul(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^= z >> 31;
    ChaCha12Rng::seed_from_u64(z)
}

/// Plain stratified sampling refined by density-guided inverse-CDF draws
/// (the sampler used when the pre-rendering pipeline is ablated).
fn nerf_sample<R: Rng>(
    field: &Field,
    ray: &Ray,
    cfg: &SamplerConfig,
    rcfg: &RendererConfig,
    rng: &mut R,
) -> Result<SampleLayer> {
    let depths = crate::geometry::stratified_samples(ray, cfg.n_initial, cfg.jitter, rng)?;
    let mut scratch = field.scratch();
    let inv_s = field.inv_s();
    let score = |d: &[f64], scratch: &mut FieldScratch| -> Vec<f64> {
        d.iter()
            .map(|t| {
                let (sdf, _) = field.decode_sdf(&ray.point_at(*t), scratch);
                sdf_to_density(sdf, inv_s, rcfg.sdf_positive_outside)
            })
            .collect()
    };
    let sigma = score(&depths, &mut scratch);
    let dz = spacings(&depths, ray.far);
    let w = coarse_weights(&sigma, &dz)?;
    // Piecewise-constant pdf over the sample strata, floored for coverage.
    let pdf: Vec<f64> = w.iter().map(|v| v + 1e-3).collect();
    let mut cdf = Vec::with_capacity(pdf.len());
    let mut acc = 0.0;
    for p in &pdf {
        acc += p;
        cdf.push(acc);
    }
    let n_extra = cfg.n_layers * cfg.n_per_layer;
    let mut all = depths.clone();
    for _ in 0..n_extra {
        let u: f64 = rng.gen::<f64>() * acc;
        let j = cdf.partition_point(|c| *c < u).min(cdf.len() - 1);
        let lo = if j == 0 { ray.near } else { depths[j - 1] };
        let hi = if j + 1 < depths.len() { depths[j + 1] } else { ray.far };
        let v: f64 = rng.gen();
        all.push(lo + v * (hi - lo));
    }
    all.sort_by(f64::total_cmp);
    for i in 1..all.len() {
        if all[i] <= all[i - 1] {
            all[i] = all[i - 1] + 1e-12 * (1.0 + all[i - 1].abs());
        }
    }
    let positions: Vec<Vector3<f64>> = all.iter().map(|d| ray.point_at(*d)).collect();
    let densities = score(&all, &mut scratch);
    Ok(SampleLayer {
        depths: all,
        positions,
        densities,
        layer_index: cfg.n_layers,
    })
}

/// Draw and freeze every sample location for one batch.
#[allow(clippy::too_many_arguments)]
pub fn sample_batch(
    field: &Field,
    tasks: &[RayTask],
    sampler_cfg: &SamplerConfig,
    rcfg: &RendererConfig,
    bcfg: &BatchConfig,
    weights: &LossWeights,
    stage: Stage,
    seed: u64,
    no_sg_mlp: bool,
) -> Result<SampledBatch> {
    let tr = weights.truncation;
    let mut rays = Vec::with_capacity(tasks.len());
    for (idx, task) in tasks.iter().enumerate() {
        let mut rng = ray_stream(seed, idx as u64);
        let layer = if no_sg_mlp {
            nerf_sample(field, &task.ray, sampler_cfg, rcfg, &mut rng)?
        } else {
            let mut q = crate::renderer::FieldDensity::new(field, rcfg);
            hierarchical_sample(&task.ray, &mut q, sampler_cfg, &mut rng)?
        };
        let dz = spacings(&layer.depths, task.ray.far);
        let mut fs = Vec::new();
        let mut tr_union: Vec<(f64, TrSource)> = Vec::new();
        let mut extra_tr = Vec::new();
        if let Some(d) = task.gt_depth_t {
            for (i, z) in layer.depths.iter().enumerate() {
                if *z < d - tr {
                    fs.push(i);
                } else if (*z - d).abs() < tr {
                    tr_union.push((*z, TrSource::Layer(i)));
                }
            }
            // Dedicated uniform draws across the truncation region.
            let lo = (d - tr).max(task.ray.near);
            let hi = (d + tr).min(task.ray.far);
            if hi > lo && bcfg.tr_samples > 0 {
                let bin = (hi - lo) / bcfg.tr_samples as f64;
                for i in 0..bcfg.tr_samples {
                    let u: f64 = rng.gen();
                    extra_tr.push(lo + (i as f64 + u) * bin);
                }
                for (j, z) in extra_tr.iter().enumerate() {
                    tr_union.push((*z, TrSource::Extra(j)));
                }
            }
            tr_union.sort_by(|a, b| a.0.total_cmp(&b.0));
        }
        let eik = if bcfg.eik_per_ray == 0 || fs.len() <= bcfg.eik_per_ray {
            fs.clone()
        } else {
            // Partial Fisher-Yates over a copy; deterministic per stream.
            let mut pool = fs.clone();
            let mut chosen = Vec::with_capacity(bcfg.eik_per_ray);
            for k in 0..bcfg.eik_per_ray {
                let j = k + (rng.gen::<u64>() as usize) % (pool.len() - k);
                pool.swap(k, j);
                chosen.push(pool[k]);
            }
            chosen.sort_unstable();
            chosen
        };
        rays.push(SampledRay {
            task: idx,
            layer,
            dz,
            fs,
            eik,
            extra_tr,
            tr_union,
        });
    }

    // Near-surface points for the smoothness term: rejection over bounds.
    let mut smooth = Vec::new();
    let mut smooth_exhausted = false;
    if bcfg.smooth_points > 0 {
        let mut rng = ray_stream(seed, u64::MAX - 1);
        let mut scratch = field.scratch();
        let budget = bcfg.smooth_points * bcfg.smooth_budget;
        let lo = field.bounds.lo;
        let ext = field.bounds.extent();
        let delta_mag = field.finest_spacing();
        let mut tries = 0;
        while smooth.len() < bcfg.smooth_points && tries < budget {
            tries += 1;
            let x = Vector3::new(
                lo.x + rng.gen::<f64>() * ext.x,
                lo.y + rng.gen::<f64>() * ext.y,
                lo.z + rng.gen::<f64>() * ext.z,
            );
            let (sdf, _) = field.decode_sdf(&x, &mut scratch);
            if sdf.abs() >= tr {
                continue;
            }
            // Random direction of one finest-voxel magnitude.
            let mut v = Vector3::new(
                rng.gen::<f64>() * 2.0 - 1.0,
                rng.gen::<f64>() * 2.0 - 1.0,
                rng.gen::<f64>() * 2.0 - 1.0,
            );
            if v.norm() < 1e-9 {
                v = Vector3::new(1.0, 0.0, 0.0);
            }
            let x_off = x + v.normalize() * delta_mag;
            smooth.push(SmoothPoint { x, x_off });
        }
        smooth_exhausted = smooth.len() < bcfg.smooth_points;
    }

    Ok(SampledBatch {
        rays,
        stage,
        smooth,
        smooth_exhausted,
        no_sg_mlp,
    })
}

// ---------------------------------------------------------------------
// Forward evaluation
// ---------------------------------------------------------------------

/// Per-worker scratch pool sized for one ray.
pub struct RayWorkspace {
    layer: Vec<FieldScratch>,
    tr: Vec<FieldScratch>,
    probes: Vec<FieldScratch>,
}

impl RayWorkspace {
    pub fn new(field: &Field) -> Self {
        RayWorkspace {
            layer: Vec::new(),
            tr: Vec::new(),
            probes: (0..7).map(|_| field.scratch()).collect(),
        }
    }

    fn ensure(&mut self, field: &Field, n_layer: usize, n_tr: usize) {
        while self.layer.len() < n_layer {
            self.layer.push(field.scratch());
        }
        while self.tr.len() < n_tr {
            self.tr.push(field.scratch());
        }
    }
}

/// Everything the loss terms need from one ray at the frozen locations.
pub struct RayForward {
    pub vals: Vec<DecodeVals>,
    pub sigma: Vec<f64>,
    pub chain: WeightChain,
    pub render: RayRender,
    /// SDF at each dedicated truncation draw.
    pub extra_sdf: Vec<f64>,
    /// Pre-rendering density at each truncation-union point.
    pub pr_sigma: Vec<f64>,
    pub pr_chain: Option<WeightChain>,
    /// (sum of PR weights, PR-rendered depth).
    pub pr_depth: Option<(f64, f64)>,
    /// Finite-difference SDF gradient at each Eikonal point.
    pub eik_g: Vec<Vector3<f64>>,
}

const PR_WEIGHT_FLOOR: f64 = 1e-12;

/// Finite-difference SDF gradient at `x` using the probe scratch pool.
/// When `d_g` is provided the probes' reverse passes scatter the chain-rule
/// coefficients into `grad` (the probe caches are still warm).
fn fd_gradient(
    field: &Field,
    x: &Vector3<f64>,
    probes: &mut [FieldScratch],
    mut d_g: Option<(&Vector3<f64>, &mut [f64])>,
) -> Vector3<f64> {
    let h = field.gradient_step();
    let mut g = Vector3::zeros();
    // Per-scratch chain coefficients; 6 = center.
    let mut coeff = [0.0f64; 7];
    let mut used = [false; 7];
    let mut center_val: Option<f64> = None;
    for a in 0..3 {
        let mut hi = *x;
        hi[a] += h;
        let mut lo = *x;
        lo[a] -= h;
        let hi_in = field.bounds.contains(&hi);
        let lo_in = field.bounds.contains(&lo);
        let want = d_g.as_ref().map(|(v, _)| v[a]).unwrap_or(0.0);
        match (hi_in, lo_in) {
            (true, true) => {
                let (fh, _) = field.decode_sdf(&hi, &mut probes[2 * a]);
                let (fl, _) = field.decode_sdf(&lo, &mut probes[2 * a + 1]);
                used[2 * a] = true;
                used[2 * a + 1] = true;
                g[a] = (fh - fl) / (2.0 * h);
                coeff[2 * a] += want / (2.0 * h);
                coeff[2 * a + 1] -= want / (2.0 * h);
            }
            (true, false) => {
                let (fh, _) = field.decode_sdf(&hi, &mut probes[2 * a]);
                used[2 * a] = true;
                let c = match center_val {
                    Some(c) => c,
                    None => {
                        let (c, _) = field.decode_sdf(x, &mut probes[6]);
                        used[6] = true;
                        center_val = Some(c);
                        c
                    }
                };
                g[a] = (fh - c) / h;
                coeff[2 * a] += want / h;
                coeff[6] -= want / h;
            }
            (false, true) => {
                let (fl, _) = field.decode_sdf(&lo, &mut probes[2 * a + 1]);
                used[2 * a + 1] = true;
                let c = match center_val {
                    Some(c) => c,
                    None => {
                        let (c, _) = field.decode_sdf(x, &mut probes[6]);
                        used[6] = true;
                        center_val = Some(c);
                        c
                    }
                };
                g[a] = (c - fl) / h;
                coeff[2 * a + 1] -= want / h;
                coeff[6] += want / h;
            }
            (false, false) => {
                g[a] = 0.0;
            }
        }
    }
    if let Some((_, grad)) = d_g.as_mut() {
        // The probe forwards above each used a distinct scratch, so every
        // cache is intact. The center probe, when used, ran last for its
        // first axis but its cache belongs to scratch 6 permanently.
        for (i, probe) in probes.iter_mut().enumerate().take(7) {
            if used[i] && coeff[i] != 0.0 {
                field.decode_sdf_backward(probe, coeff[i], grad);
            }
        }
    }
    g
}

/// Forward pass over one frozen ray; fills the workspace caches so a
/// reverse pass can follow immediately. `enable_pr` gates the
/// pre-rendering depth path (off under the no-SG-MLP ablation).
#[allow(clippy::too_many_arguments)]
pub fn forward_ray(
    field: &Field,
    task: &RayTask,
    sray: &SampledRay,
    rcfg: &RendererConfig,
    mode_override: Option<WeightMode>,
    stage: Stage,
    enable_pr: bool,
    ws: &mut RayWorkspace,
) -> Result<RayForward> {
    let n = sray.layer.len();
    ws.ensure(field, n, sray.extra_tr.len());
    let inv_s = field.inv_s();
    let mut vals = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    let mut sems = Vec::with_capacity(n);
    for i in 0..n {
        let v = field.decode_cached(&sray.layer.positions[i], &task.ray.direction, &mut ws.layer[i]);
        sigma.push(sdf_to_density(v.sdf, inv_s, rcfg.sdf_positive_outside));
        colors.push(v.color);
        sems.push(v.semantic_color);
        vals.push(v);
    }
    let mode = mode_override.unwrap_or(match stage {
        Stage::Coarse => WeightMode::NeusStandard,
        Stage::Fine => WeightMode::FineReweighted,
    });
    let chain = weight_chain(&sigma, &sray.dz, mode, rcfg)?;
    let render = composite(&chain.weights, &colors, &sems, &sray.layer.depths, stage)?;

    // Dedicated truncation draws: SDF decode.
    let mut extra_sdf = Vec::with_capacity(sray.extra_tr.len());
    for (j, t) in sray.extra_tr.iter().enumerate() {
        let (sdf, _) = field.decode_sdf(&task.ray.point_at(*t), &mut ws.tr[j]);
        extra_sdf.push(sdf);
    }

    // Pre-rendering densities over the truncation union, and the PR depth.
    let mut pr_sigma = Vec::with_capacity(sray.tr_union.len());
    let mut pr_chain = None;
    let mut pr_depth = None;
    if enable_pr && !sray.tr_union.is_empty() && task.gt_depth_t.is_some() {
        for (t, src) in &sray.tr_union {
            let p = task.ray.point_at(*t);
            let s = match src {
                TrSource::Layer(i) => field.pr_density_cached(&p, &mut ws.layer[*i]),
                TrSource::Extra(j) => field.pr_density_cached(&p, &mut ws.tr[*j]),
            };
            pr_sigma.push(s);
        }
        let depths: Vec<f64> = sray.tr_union.iter().map(|(t, _)| *t).collect();
        // Tail interval falls back to the previous gap, keeping the last
        // truncation sample from absorbing the whole remaining ray.
        let dz = spacings(&depths, *depths.last().unwrap());
        let chain = weight_chain(&pr_sigma, &dz, WeightMode::NeusStandard, rcfg)?;
        let wsum: f64 = chain.weights.iter().sum();
        if wsum > PR_WEIGHT_FLOOR {
            let wz: f64 = chain
                .weights
                .iter()
                .zip(depths.iter())
                .map(|(w, z)| w * z)
                .sum();
            pr_depth = Some((wsum, wz / wsum));
        }
        pr_chain = Some(chain);
    }

    // Eikonal gradients (values only; backward re-probes).
    let mut eik_g = Vec::with_capacity(sray.eik.len());
    for &i in &sray.eik {
        let g = fd_gradient(field, &sray.layer.positions[i], &mut ws.probes, None);
        eik_g.push(g);
    }

    Ok(RayForward {
        vals,
        sigma,
        chain,
        render,
        extra_sdf,
        pr_sigma,
        pr_chain,
        pr_depth,
        eik_g,
    })
}

/// Per-ray loss pieces; batch reductions happen in the `loss_*` helpers.
#[derive(Debug, Clone, Copy, Default)]
pub struct RayEval {
    pub rgb_sq: f64,
    pub sem_sq: Option<f64>,
    pub depth_ok: bool,
    pub depth_sq: f64,
    pub pr_ok: bool,
    pub pr_sq: f64,
    pub has_tr: bool,
    pub sdf_term: f64,
    pub has_fs: bool,
    pub fs_term: f64,
    pub has_eik: bool,
    pub eik_term: f64,
}

/// Truncation-normalized SDF target: clamp((D - z)/tr, -1, 1).
pub fn sdf_target(depth: f64, z: f64, tr: f64) -> f64 {
    ((depth - z) / tr).clamp(-1.0, 1.0)
}

pub fn eval_ray(
    task: &RayTask,
    sray: &SampledRay,
    fwd: &RayForward,
    tr: f64,
    min_wsum: f64,
) -> RayEval {
    let mut e = RayEval {
        rgb_sq: (0..3)
            .map(|c| (fwd.render.color[c] - task.gt_color[c]).powi(2))
            .sum(),
        ..RayEval::default()
    };
    if let Some(gt) = task.gt_sem {
        e.sem_sq = Some(
            (0..3)
                .map(|c| (fwd.render.semantic_color[c] - gt[c]).powi(2))
                .sum(),
        );
    }
    if let Some(d) = task.gt_depth_t {
        if fwd.render.weight_sum >= min_wsum {
            e.depth_ok = true;
            e.depth_sq = (fwd.render.depth - d).powi(2);
        }
        if let Some((_, pr_d)) = fwd.pr_depth {
            e.pr_ok = true;
            e.pr_sq = (pr_d - d).powi(2);
        }
        if !sray.tr_union.is_empty() {
            e.has_tr = true;
            let mut acc = 0.0;
            for (z, src) in sray.tr_union.iter() {
                let sdf = match src {
                    TrSource::Layer(i) => fwd.vals[*i].sdf,
                    TrSource::Extra(j) => fwd.extra_sdf[*j],
                };
                let b = sdf_target(d, *z, tr);
                acc += (sdf / tr - b).powi(2);
            }
            e.sdf_term = acc / sray.tr_union.len() as f64;
        }
        if !sray.fs.is_empty() {
            e.has_fs = true;
            let mut acc = 0.0;
            for &i in &sray.fs {
                acc += (fwd.vals[i].sdf / tr - 1.0).powi(2);
            }
            e.fs_term = acc / sray.fs.len() as f64;
        }
        if !sray.eik.is_empty() {
            e.has_eik = true;
            let mut acc = 0.0;
            for g in &fwd.eik_g {
                acc += (g.norm() - 1.0).powi(2);
            }
            e.eik_term = acc / sray.eik.len() as f64;
        }
    }
    e
}

// ---------------------------------------------------------------------
// Batch reductions (the loss operations)
// ---------------------------------------------------------------------

/// Mean squared color error over all sampled rays.
pub fn loss_rgb(evals: &[RayEval]) -> f64 {
    if evals.is_empty() {
        return 0.0;
    }
    evals.iter().map(|e| e.rgb_sq).sum::<f64>() / evals.len() as f64
}

/// Semantic pseudo-color analog; no-op when no ray carries semantics.
pub fn loss_sem_rgb(evals: &[RayEval]) -> (f64, bool) {
    let with: Vec<f64> = evals.iter().filter_map(|e| e.sem_sq).collect();
    if with.is_empty() {
        (0.0, true)
    } else {
        (with.iter().sum::<f64>() / with.len() as f64, false)
    }
}

/// Mean squared depth error over surface-hitting valid-depth rays.
pub fn loss_depth(evals: &[RayEval]) -> (f64, bool) {
    let n = evals.iter().filter(|e| e.depth_ok).count();
    if n == 0 {
        (0.0, true)
    } else {
        (
            evals.iter().filter(|e| e.depth_ok).map(|e| e.depth_sq).sum::<f64>() / n as f64,
            false,
        )
    }
}

/// Pre-rendered depth vs sensor depth over truncation regions.
pub fn loss_pr(evals: &[RayEval]) -> (f64, bool) {
    let n = evals.iter().filter(|e| e.pr_ok).count();
    if n == 0 {
        (0.0, true)
    } else {
        (
            evals.iter().filter(|e| e.pr_ok).map(|e| e.pr_sq).sum::<f64>() / n as f64,
            false,
        )
    }
}

/// Truncated-SDF supervision: per-ray mean over truncation points, averaged
/// over rays owning any.
pub fn loss_sdf(evals: &[RayEval]) -> (f64, bool) {
    let n = evals.iter().filter(|e| e.has_tr).count();
    if n == 0 {
        (0.0, true)
    } else {
        (
            evals.iter().filter(|e| e.has_tr).map(|e| e.sdf_term).sum::<f64>() / n as f64,
            false,
        )
    }
}

/// Free-space pull toward +tr.
pub fn loss_fs(evals: &[RayEval]) -> (f64, bool) {
    let n = evals.iter().filter(|e| e.has_fs).count();
    if n == 0 {
        (0.0, true)
    } else {
        (
            evals.iter().filter(|e| e.has_fs).map(|e| e.fs_term).sum::<f64>() / n as f64,
            false,
        )
    }
}

/// Unit-gradient penalty over free-space points.
pub fn loss_eikonal(evals: &[RayEval]) -> (f64, bool) {
    let n = evals.iter().filter(|e| e.has_eik).count();
    if n == 0 {
        (0.0, true)
    } else {
        (
            evals.iter().filter(|e| e.has_eik).map(|e| e.eik_term).sum::<f64>() / n as f64,
            false,
        )
    }
}

/// Gradient-difference smoothness over the frozen near-surface points.
pub fn loss_smooth(field: &Field, points: &[SmoothPoint], ws: &mut RayWorkspace) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let mut acc = 0.0;
    for p in points {
        let g0 = fd_gradient(field, &p.x, &mut ws.probes, None);
        let g1 = fd_gradient(field, &p.x_off, &mut ws.probes, None);
        acc += (g1 - g0).norm_squared();
    }
    acc / points.len() as f64
}

// ---------------------------------------------------------------------
// Reverse pass
// ---------------------------------------------------------------------

/// Frozen normalization constants: the per-term coefficients already divided
/// by their batch set sizes (zero when a set is empty).
#[derive(Debug, Clone, Copy, Default)]
pub struct EffCoeffs {
    pub rgb: f64,
    pub sem_rgb: f64,
    pub depth: f64,
    pub sem_depth: f64,
    pub pr: f64,
    pub sdf: f64,
    pub fs: f64,
    pub eik: f64,
    pub smooth: f64,
    pub truncation: f64,
}

impl EffCoeffs {
    /// Build from effective (stage-scaled) weights and batch counts.
    pub fn new(w: &LossWeights, evals: &[RayEval], n_smooth: usize, no_semantic: bool) -> EffCoeffs {
        let n_rgb = evals.len();
        let n_sem = evals.iter().filter(|e| e.sem_sq.is_some()).count();
        let n_d = evals.iter().filter(|e| e.depth_ok).count();
        let n_pr = evals.iter().filter(|e| e.pr_ok).count();
        let n_sdf = evals.iter().filter(|e| e.has_tr).count();
        let n_fs = evals.iter().filter(|e| e.has_fs).count();
        let n_eik = evals.iter().filter(|e| e.has_eik).count();
        let div = |num: f64, n: usize| if n == 0 { 0.0 } else { num / n as f64 };
        let sem_gate = if no_semantic { 0.0 } else { 1.0 };
        EffCoeffs {
            rgb: div(w.lambda_sg * w.lambda_rgb, n_rgb),
            sem_rgb: sem_gate * div(w.lambda_sem * w.lambda_sem_rgb, n_sem),
            depth: div(w.lambda_sg * w.lambda_d, n_d),
            sem_depth: if n_sem == 0 {
                0.0
            } else {
                sem_gate * div(w.lambda_sem * w.lambda_sem_d, n_d)
            },
            pr: div(w.lambda_sg * w.lambda_pr, n_pr),
            sdf: div(w.lambda_sg * w.lambda_sdf, n_sdf),
            fs: div(w.lambda_sg * w.lambda_fs, n_fs),
            eik: div(w.lambda_sg * w.lambda_eik, n_eik),
            smooth: div(w.lambda_sg * w.lambda_smooth, n_smooth),
            truncation: w.truncation,
        }
    }
}

/// Reverse pass for one ray. `fwd` must come from `forward_ray` on the same
/// workspace (its caches are consumed here). Accumulates into `grad`.
#[allow(clippy::too_many_arguments)]
pub fn backprop_ray(
    field: &Field,
    task: &RayTask,
    sray: &SampledRay,
    fwd: &RayForward,
    eff: &EffCoeffs,
    rcfg: &RendererConfig,
    ws: &mut RayWorkspace,
    grad: &mut [f64],
) {
    let n = sray.layer.len();
    let inv_s = field.inv_s();

    // dL/d(render outputs).
    let mut d_color = [0.0; 3];
    for c in 0..3 {
        d_color[c] = 2.0 * (fwd.render.color[c] - task.gt_color[c]) * eff.rgb;
    }
    let mut d_sem = [0.0; 3];
    if let Some(gt) = task.gt_sem {
        for c in 0..3 {
            d_sem[c] = 2.0 * (fwd.render.semantic_color[c] - gt[c]) * eff.sem_rgb;
        }
    }
    let mut d_depth = 0.0;
    if let Some(d) = task.gt_depth_t {
        if fwd.render.weight_sum >= rcfg.min_weight_sum_for_depth {
            d_depth = 2.0 * (fwd.render.depth - d) * (eff.depth + eff.sem_depth);
        }
    }

    // Through compositing: dL/dw_k and per-sample color gradients.
    let mut d_weights = vec![0.0; n];
    for k in 0..n {
        let mut acc = 0.0;
        for c in 0..3 {
            acc += d_color[c] * fwd.vals[k].color[c];
            acc += d_sem[c] * fwd.vals[k].semantic_color[c];
        }
        acc += d_depth * sray.layer.depths[k];
        d_weights[k] = acc;
    }
    let d_sigma = weight_chain_backward(&fwd.chain, &d_weights);

    // Per-sample SDF gradient accumulator, starting from the density chain.
    let mut d_sdf = vec![0.0; n];
    let mut d_inv_s = 0.0;
    for k in 0..n {
        let (ds, dis) = sdf_to_density_grad(fwd.vals[k].sdf, inv_s, rcfg.sdf_positive_outside);
        d_sdf[k] += d_sigma[k] * ds;
        d_inv_s += d_sigma[k] * dis;
    }

    let truncation = eff.truncation;
    // Truncated-SDF and free-space terms (valid-depth rays only).
    let mut d_extra_sdf = vec![0.0; sray.extra_tr.len()];
    if let Some(d) = task.gt_depth_t {
        if !sray.tr_union.is_empty() && eff.sdf != 0.0 {
            let per = eff.sdf / sray.tr_union.len() as f64;
            for (z, src) in &sray.tr_union {
                let sdf = match src {
                    TrSource::Layer(i) => fwd.vals[*i].sdf,
                    TrSource::Extra(j) => fwd.extra_sdf[*j],
                };
                let b = sdf_target(d, *z, truncation);
                let g = per * 2.0 * (sdf / truncation - b) / truncation;
                match src {
                    TrSource::Layer(i) => d_sdf[*i] += g,
                    TrSource::Extra(j) => d_extra_sdf[*j] += g,
                }
            }
        }
        if !sray.fs.is_empty() && eff.fs != 0.0 {
            let per = eff.fs / sray.fs.len() as f64;
            for &i in &sray.fs {
                d_sdf[i] += per * 2.0 * (fwd.vals[i].sdf / truncation - 1.0) / truncation;
            }
        }
    }

    // Pre-rendering depth loss through the PR weight chain.
    let mut d_pr_sigma = vec![0.0; fwd.pr_sigma.len()];
    if let (Some((wsum, pr_d)), Some(pr_chain), Some(d)) =
        (fwd.pr_depth, fwd.pr_chain.as_ref(), task.gt_depth_t)
    {
        if eff.pr != 0.0 {
            let d_prd = eff.pr * 2.0 * (pr_d - d);
            // pr_d = sum(w z)/sum(w): quotient rule.
            let m = sray.tr_union.len();
            let mut d_w = vec![0.0; m];
            for (k, (z, _)) in sray.tr_union.iter().enumerate() {
                d_w[k] = d_prd * (z - pr_d) / wsum;
            }
            let ds = weight_chain_backward(pr_chain, &d_w);
            d_pr_sigma.copy_from_slice(&ds);
        }
    }

    // Scatter: layer samples (render + sdf/fs + pr), then extras.
    for k in 0..n {
        let dv = DecodeGrad {
            d_sdf: d_sdf[k],
            d_color: [
                d_color[0] * fwd.chain.weights[k],
                d_color[1] * fwd.chain.weights[k],
                d_color[2] * fwd.chain.weights[k],
            ],
            d_semantic: [
                d_sem[0] * fwd.chain.weights[k],
                d_sem[1] * fwd.chain.weights[k],
                d_sem[2] * fwd.chain.weights[k],
            ],
        };
        field.decode_backward(&mut ws.layer[k], &dv, grad);
    }
    for (u, (_, src)) in sray.tr_union.iter().enumerate() {
        if d_pr_sigma.get(u).copied().unwrap_or(0.0) != 0.0 {
            match src {
                TrSource::Layer(i) => {
                    field.pr_density_backward(&mut ws.layer[*i], d_pr_sigma[u], grad)
                }
                TrSource::Extra(j) => field.pr_density_backward(&mut ws.tr[*j], d_pr_sigma[u], grad),
            }
        }
    }
    for (j, dsd) in d_extra_sdf.iter().enumerate() {
        if *dsd != 0.0 {
            field.decode_sdf_backward(&mut ws.tr[j], *dsd, grad);
        }
    }

    // Eikonal: re-probe and push through the finite differences.
    if eff.eik != 0.0 && !sray.eik.is_empty() && task.gt_depth_t.is_some() {
        let per = eff.eik / sray.eik.len() as f64;
        for (e_i, &i) in sray.eik.iter().enumerate() {
            let g = fwd.eik_g[e_i];
            let norm = g.norm();
            if norm < 1e-12 {
                continue;
            }
            let scale = per * 2.0 * (norm - 1.0) / norm;
            let dg = g * scale;
            let _ = fd_gradient(
                field,
                &sray.layer.positions[i],
                &mut ws.probes,
                Some((&dg, grad)),
            );
        }
    }

    // inv_s is learned in log space.
    grad[field.inv_s_index()] += d_inv_s * inv_s;
}

/// Smoothness reverse pass over the frozen point set.
pub fn backprop_smooth(
    field: &Field,
    points: &[SmoothPoint],
    coeff: f64,
    ws: &mut RayWorkspace,
    grad: &mut [f64],
) {
    if coeff == 0.0 || points.is_empty() {
        return;
    }
    for p in points {
        let g0 = fd_gradient(field, &p.x, &mut ws.probes, None);
        let g1 = fd_gradient(field, &p.x_off, &mut ws.probes, None);
        let diff = g1 - g0;
        let d1 = diff * (2.0 * coeff);
        let d0 = -d1;
        let _ = fd_gradient(field, &p.x, &mut ws.probes, Some((&d0, grad)));
        let _ = fd_gradient(field, &p.x_off, &mut ws.probes, Some((&d1, grad)));
    }
}
