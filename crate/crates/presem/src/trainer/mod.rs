//! The progressive training loop: a coarse stage on 10x voxels for the
//! first half of the iterations, then a fine stage seeded by trilinear
//! feature transfer; Adam updates over three parameter groups;
//! deterministic chunked gradient reduction; the finite-difference gradient
//! check harness; ablation switches.

pub mod adam;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::field::{params::ParamGroup, Field, FieldConfig};
use crate::losses::{
    backprop_ray, backprop_smooth, eval_ray, forward_ray, loss_depth, loss_eikonal, loss_fs,
    loss_pr, loss_rgb, loss_sdf, loss_sem_rgb, loss_smooth, sample_batch, total_loss, BatchConfig,
    EffCoeffs, LossFlags, LossTerms, LossWeights, RayEval, RayTask, RayWorkspace, SampledBatch,
};
use crate::renderer::{RendererConfig, Stage, WeightMode};
use crate::sampler::SamplerConfig;
use adam::GroupAdam;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_iters: u64,
    pub rays_per_batch: usize,
    pub lr_field: f64,
    pub lr_pr: f64,
    pub lr_sem: f64,
    pub fine_voxel_sizes: Vec<f64>,
    pub coarse_factor: f64,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub renderer: RendererConfig,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub batch: BatchConfig,
    pub seed: u64,
    #[serde(default)]
    pub no_semantic: bool,
    #[serde(default)]
    pub no_sg_mlp: bool,
    /// Force transmittance-only weights in both stages.
    #[serde(default)]
    pub neus_weights_only: bool,
    #[serde(default)]
    pub deterministic: bool,
    /// Rays per reduction chunk.
    #[serde(default = "default_chunk")]
    pub chunk_size: usize,
    /// Grid feature width and decoder shapes.
    #[serde(default)]
    pub field: FieldNetConfig,
}

fn default_chunk() -> usize {
    128
}

/// Serializable subset of the field configuration (shapes only; seeds come
/// from the trainer).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldNetConfig {
    pub feature_dim: usize,
    pub geo_dim: usize,
    pub pr_octaves: usize,
    pub dir_octaves: usize,
    pub pr_hidden: [usize; 2],
    pub sdf_hidden: [usize; 2],
    pub rgb_hidden: [usize; 2],
    pub sem_hidden: usize,
    pub init_inv_s: f64,
}

impl Default for FieldNetConfig {
    fn default() -> Self {
        let f = FieldConfig::default();
        FieldNetConfig {
            feature_dim: f.feature_dim,
            geo_dim: f.geo_dim,
            pr_octaves: f.pr_octaves,
            dir_octaves: f.dir_octaves,
            pr_hidden: f.pr_hidden,
            sdf_hidden: f.sdf_hidden,
            rgb_hidden: f.rgb_hidden,
            sem_hidden: f.sem_hidden,
            init_inv_s: f.init_inv_s,
        }
    }
}

impl FieldNetConfig {
    pub fn to_field_config(&self, init_seed: u64) -> FieldConfig {
        FieldConfig {
            feature_dim: self.feature_dim,
            geo_dim: self.geo_dim,
            pr_octaves: self.pr_octaves,
            dir_octaves: self.dir_octaves,
            pr_hidden: self.pr_hidden,
            sdf_hidden: self.sdf_hidden,
            rgb_hidden: self.rgb_hidden,
            sem_hidden: self.sem_hidden,
            init_inv_s: self.init_inv_s,
            init_seed,
            ..FieldConfig::default()
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_iters: 2000,
            rays_per_batch: 1024,
            lr_field: 1e-3,
            lr_pr: 1e-3,
            lr_sem: 1e-3,
            fine_voxel_sizes: vec![0.03, 0.06, 0.24, 0.96],
            coarse_factor: 10.0,
            sampler: SamplerConfig::default(),
            renderer: RendererConfig::default(),
            weights: LossWeights::default(),
            batch: BatchConfig::default(),
            seed: 0,
            no_semantic: false,
            no_sg_mlp: false,
            neus_weights_only: false,
            deterministic: false,
            chunk_size: default_chunk(),
            field: FieldNetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_iters < 2 || self.total_iters % 2 != 0 {
            return Err(Error::domain("total_iters must be even and >= 2"));
        }
        if !(self.coarse_factor > 1.0) {
            return Err(Error::domain("coarse_factor must exceed 1"));
        }
        if !(self.lr_field > 0.0 && self.lr_pr > 0.0 && self.lr_sem > 0.0) {
            return Err(Error::domain("learning rates must be positive"));
        }
        if self.rays_per_batch == 0 {
            return Err(Error::domain("rays_per_batch must be >= 1"));
        }
        self.sampler.validate()?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<TrainConfig> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::data(format!("train config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Coarse for the first half of the iterations, fine after.
pub fn stage_for(iteration: u64, total: u64) -> Result<Stage> {
    if iteration >= total {
        return Err(Error::domain(format!(
            "iteration {iteration} out of range for {total}"
        )));
    }
    Ok(if iteration < total / 2 {
        Stage::Coarse
    } else {
        Stage::Fine
    })
}

/// Voxel sizes for a stage: fine uses the configured sizes, coarse scales
/// them by the coarse factor.
pub fn grids_for_stage(fine_sizes: &[f64], coarse_factor: f64, stage: Stage) -> Vec<f64> {
    match stage {
        Stage::Fine => fine_sizes.to_vec(),
        Stage::Coarse => fine_sizes.iter().map(|v| v * coarse_factor).collect(),
    }
}

/// Seed the fine grids from the coarse field: per-level trilinear resampling
/// of the coarse feature field at the fine node positions; all decoder
/// blocks copy over by name.
pub fn transfer_features(coarse: &Field, fine: &mut Field) {
    for block in coarse.layout.blocks() {
        if block.name.starts_with("grid") {
            continue;
        }
        let dst = fine
            .layout
            .blocks()
            .iter()
            .find(|b| b.name == block.name)
            .expect("matching decoder block");
        debug_assert_eq!(dst.len, block.len);
        let (doff, dlen) = (dst.offset, dst.len);
        fine.params[doff..doff + dlen]
            .copy_from_slice(&coarse.params[block.offset..block.offset + block.len]);
    }
    let fdim = fine.cfg.feature_dim;
    for l in 0..fine.levels.len() {
        let level = fine.levels[l].clone();
        let base = fine.grid_offset(l);
        for i in 0..level.dims[0] {
            for j in 0..level.dims[1] {
                for k in 0..level.dims[2] {
                    let p = level.node_position(&fine.bounds, i, j, k);
                    let val = coarse.interpolate_level(l, &p);
                    let at = base + level.node_index(i, j, k) * fdim;
                    fine.params[at..at + fdim].copy_from_slice(&val);
                }
            }
        }
    }
    fine.iteration = coarse.iteration;
}

/// Everything `process_batch` needs besides the field and rays.
pub struct BatchParams<'a> {
    pub sampler: &'a SamplerConfig,
    pub renderer: &'a RendererConfig,
    pub batch: &'a BatchConfig,
    /// Stage-effective loss weights.
    pub weights: &'a LossWeights,
    pub stage: Stage,
    pub mode_override: Option<WeightMode>,
    pub no_sg_mlp: bool,
    pub no_semantic: bool,
    pub chunk: usize,
    pub seed: u64,
}

pub struct BatchOutcome {
    pub terms: LossTerms,
    pub flags: LossFlags,
    pub total: f64,
    pub grad: Vec<f64>,
    pub evals: Vec<RayEval>,
}

/// Sample, evaluate and differentiate one batch. Deterministic for a given
/// (field, tasks, seed) regardless of thread count: rays are processed in
/// fixed chunks and per-chunk gradients merge sequentially in chunk order.
pub fn process_batch(field: &Field, tasks: &[RayTask], p: &BatchParams) -> Result<BatchOutcome> {
    let batch: SampledBatch = sample_batch(
        field,
        tasks,
        p.sampler,
        p.renderer,
        p.batch,
        p.weights,
        p.stage,
        p.seed,
        p.no_sg_mlp,
    )?;
    process_sampled(field, tasks, &batch, p)
}

/// Evaluate and differentiate a frozen sample set. Derivatives are taken
/// with the sample locations held fixed; this is the surface the gradient
/// checks probe.
pub fn process_sampled(
    field: &Field,
    tasks: &[RayTask],
    batch: &SampledBatch,
    p: &BatchParams,
) -> Result<BatchOutcome> {
    field.validate()?;
    let enable_pr = !p.no_sg_mlp;

    // Phase A: pure forward evaluation per ray.
    let evals: Vec<RayEval> = batch
        .rays
        .par_chunks(p.chunk)
        .map_init(
            || RayWorkspace::new(field),
            |ws, chunk| {
                let mut out = Vec::with_capacity(chunk.len());
                for sray in chunk {
                    let task = &tasks[sray.task];
                    let fwd = forward_ray(
                        field,
                        task,
                        sray,
                        p.renderer,
                        p.mode_override,
                        p.stage,
                        enable_pr,
                        ws,
                    )?;
                    out.push(eval_ray(
                        task,
                        sray,
                        &fwd,
                        p.weights.truncation,
                        p.renderer.min_weight_sum_for_depth,
                    ));
                }
                Ok(out)
            },
        )
        .collect::<Result<Vec<Vec<RayEval>>>>()?
        .into_iter()
        .flatten()
        .collect();

    let mut smooth_ws = RayWorkspace::new(field);
    let smooth_val = loss_smooth(field, &batch.smooth, &mut smooth_ws);

    let (pr, pr_noop) = loss_pr(&evals);
    let rgb = loss_rgb(&evals);
    let (depth, depth_noop) = loss_depth(&evals);
    let (sdf, sdf_noop) = loss_sdf(&evals);
    let (fs, fs_noop) = loss_fs(&evals);
    let (eik, eik_noop) = loss_eikonal(&evals);
    let (sem_rgb_raw, sem_noop_raw) = loss_sem_rgb(&evals);
    let sem_gate = !p.no_semantic && !sem_noop_raw;
    let terms = LossTerms {
        pr,
        rgb,
        depth,
        sdf,
        fs,
        eik,
        smooth: smooth_val,
        sem_rgb: if sem_gate { sem_rgb_raw } else { 0.0 },
        sem_depth: if sem_gate { depth } else { 0.0 },
    };
    let flags = LossFlags {
        pr_noop,
        depth_noop,
        sdf_noop,
        fs_noop,
        eik_noop,
        smooth_noop: batch.smooth.is_empty() || batch.smooth_exhausted,
        sem_noop: !sem_gate,
    };
    let total = total_loss(&terms, p.weights);

    let eff = EffCoeffs::new(p.weights, &evals, batch.smooth.len(), p.no_semantic);

    // Phase B: reverse pass, per-chunk buffers merged in chunk order.
    let n = field.params.len();
    let chunk_grads: Vec<Vec<f64>> = batch
        .rays
        .par_chunks(p.chunk)
        .map_init(
            || RayWorkspace::new(field),
            |ws, chunk| {
                let mut grad = vec![0.0; n];
                for sray in chunk {
                    let task = &tasks[sray.task];
                    let fwd = forward_ray(
                        field,
                        task,
                        sray,
                        p.renderer,
                        p.mode_override,
                        p.stage,
                        enable_pr,
                        ws,
                    )?;
                    backprop_ray(field, task, sray, &fwd, &eff, p.renderer, ws, &mut grad);
                }
                Ok(grad)
            },
        )
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let mut grad = vec![0.0; n];
    for cg in chunk_grads {
        for (g, c) in grad.iter_mut().zip(cg.iter()) {
            *g += c;
        }
    }
    backprop_smooth(field, &batch.smooth, eff.smooth, &mut smooth_ws, &mut grad);

    Ok(BatchOutcome {
        terms,
        flags,
        total,
        grad,
        evals,
    })
}

#[derive(Debug, Clone)]
pub struct HistoryRow {
    pub iteration: u64,
    pub stage: Stage,
    pub terms: LossTerms,
    pub total: f64,
}

pub struct TrainResult {
    pub field: Field,
    pub history: Vec<HistoryRow>,
}

pub fn write_history_csv(rows: &[HistoryRow], path: &Path) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "iteration,stage,pr,rgb,depth,sdf,fs,eik,smooth,sem_rgb,sem_depth,total"
    )?;
    for r in rows {
        let t = &r.terms;
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.iteration,
            r.stage,
            t.pr,
            t.rgb,
            t.depth,
            t.sdf,
            t.fs,
            t.eik,
            t.smooth,
            t.sem_rgb,
            t.sem_depth,
            r.total
        )?;
    }
    Ok(())
}

fn adam_for(field: &Field, cfg: &TrainConfig) -> GroupAdam {
    GroupAdam::new(
        field.params.len(),
        vec![
            (field.layout.group_ranges(ParamGroup::Field), cfg.lr_field),
            (field.layout.group_ranges(ParamGroup::PrMlp), cfg.lr_pr),
            (field.layout.group_ranges(ParamGroup::Semantic), cfg.lr_sem),
        ],
    )
}

/// Carry optimizer moments across the stage switch for blocks that keep
/// their shapes (decoders); grid moments restart.
fn carry_moments(old_field: &Field, old: &GroupAdam, new_field: &Field, new: &mut GroupAdam) {
    for block in old_field.layout.blocks() {
        if block.name.starts_with("grid") {
            continue;
        }
        if let Some(dst) = new_field
            .layout
            .blocks()
            .iter()
            .find(|b| b.name == block.name && b.len == block.len)
        {
            new.m[dst.offset..dst.offset + dst.len]
                .copy_from_slice(&old.m[block.offset..block.offset + block.len]);
            new.v[dst.offset..dst.offset + dst.len]
                .copy_from_slice(&old.v[block.offset..block.offset + block.len]);
        }
    }
    new.t = old.t;
}

fn batch_seed(seed: u64, iteration: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0xA24BAED4963EE407)
        .wrapping_add(iteration.wrapping_mul(0x9FB21C651E98DF25));
    z = (z ^ (z >> 28)).wrapping_mul(0xD6E8FEB86659FD93);
    z ^ (z >> 32)
}

/// Full training run. On a numerical failure the pre-update parameters are
/// written to `abort_ckpt` (when given) before the error returns.
pub fn train(ds: &Dataset, cfg: &TrainConfig, abort_ckpt: Option<&Path>) -> Result<TrainResult> {
    cfg.validate()?;
    ds.validate()?;
    if !ds.has_valid_depth() {
        return Err(Error::domain("dataset has no frame with valid depth"));
    }

    let coarse_sizes = grids_for_stage(&cfg.fine_voxel_sizes, cfg.coarse_factor, Stage::Coarse);
    let mut field = Field::new_initialized(
        ds.bounds,
        &coarse_sizes,
        cfg.field.to_field_config(cfg.seed),
    )?;
    let mut opt = adam_for(&field, cfg);
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mode_override = if cfg.neus_weights_only {
        Some(WeightMode::NeusStandard)
    } else {
        None
    };
    let no_semantic = cfg.no_semantic || !ds.has_semantics();
    let mut history = Vec::with_capacity(cfg.total_iters as usize);

    for it in 0..cfg.total_iters {
        let stage = stage_for(it, cfg.total_iters)?;
        if it == cfg.total_iters / 2 {
            // Stage switch: rebuild on fine grids, transfer features.
            let mut fine = Field::new(
                ds.bounds,
                &cfg.fine_voxel_sizes,
                cfg.field.to_field_config(cfg.seed),
            )?;
            transfer_features(&field, &mut fine);
            let mut fine_opt = adam_for(&fine, cfg);
            carry_moments(&field, &opt, &fine, &mut fine_opt);
            field = fine;
            opt = fine_opt;
        }

        let tasks: Vec<RayTask> = (0..cfg.rays_per_batch)
            .map(|_| ds.sample_task(&mut rng))
            .collect();
        let weights_eff = cfg.weights.for_stage(stage);
        let params = BatchParams {
            sampler: &cfg.sampler,
            renderer: &cfg.renderer,
            batch: &cfg.batch,
            weights: &weights_eff,
            stage,
            mode_override,
            no_sg_mlp: cfg.no_sg_mlp,
            no_semantic,
            chunk: cfg.chunk_size,
            seed: batch_seed(cfg.seed, it),
        };
        let outcome = process_batch(&field, &tasks, &params)?;

        if !outcome.total.is_finite() {
            if let Some(path) = abort_ckpt {
                field.save_checkpoint(path)?;
            }
            return Err(Error::numerical(format!(
                "non-finite loss at iteration {it}; last good checkpoint kept"
            )));
        }
        if let Err(e) = field.layout.check_finite(&outcome.grad, "gradient") {
            if let Some(path) = abort_ckpt {
                field.save_checkpoint(path)?;
            }
            return Err(e);
        }

        history.push(HistoryRow {
            iteration: it,
            stage,
            terms: outcome.terms,
            total: outcome.total,
        });
        opt.step(&mut field.params, &outcome.grad);
        field.iteration = it + 1;
    }

    Ok(TrainResult { field, history })
}

// ---------------------------------------------------------------------
// Gradient check harness
// ---------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TermReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub checked: usize,
    pub worst_block: String,
    pub worst_fd: f64,
    pub worst_analytic: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub terms: Vec<TermReport>,
    pub pass: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for t in &self.terms {
            writeln!(
                f,
                "{:<10} max rel err {:>12.3e}  (tol {:.0e}, {} params)  {}  [worst {} fd {:.3e} vs {:.3e}]",
                t.name,
                t.max_rel_err,
                t.tolerance,
                t.checked,
                if t.max_rel_err <= t.tolerance {
                    "ok"
                } else {
                    "FAIL"
                },
                t.worst_block,
                t.worst_fd,
                t.worst_analytic,
            )?;
        }
        writeln!(f, "gradient check: {}", if self.pass { "pass" } else { "FAIL" })
    }
}

fn probe_weights(term: &str) -> LossWeights {
    let mut w = LossWeights {
        lambda_sg: 0.0,
        lambda_sem: 0.0,
        lambda_pr: 0.0,
        lambda_rgb: 0.0,
        lambda_d: 0.0,
        lambda_sdf: 0.0,
        lambda_fs: 0.0,
        lambda_eik: 0.0,
        lambda_smooth: 0.0,
        lambda_sem_rgb: 0.0,
        lambda_sem_d: 0.0,
        lambda_model: 1.0,
        truncation: 0.08,
    };
    match term {
        "pr" => {
            w.lambda_sg = 1.0;
            w.lambda_pr = 1.0;
        }
        "rgb" => {
            w.lambda_sg = 1.0;
            w.lambda_rgb = 1.0;
        }
        "depth" => {
            w.lambda_sg = 1.0;
            w.lambda_d = 1.0;
        }
        "sdf" => {
            w.lambda_sg = 1.0;
            w.lambda_sdf = 1.0;
        }
        "fs" => {
            w.lambda_sg = 1.0;
            w.lambda_fs = 1.0;
        }
        "eik" => {
            w.lambda_sg = 1.0;
            w.lambda_eik = 1.0;
        }
        "smooth" => {
            w.lambda_sg = 1.0;
            w.lambda_smooth = 1.0;
        }
        "sem_rgb" => {
            w.lambda_sem = 1.0;
            w.lambda_sem_rgb = 1.0;
        }
        "sem_depth" => {
            w.lambda_sem = 1.0;
            w.lambda_sem_d = 1.0;
        }
        _ => unreachable!(),
    }
    w
}

/// Finite-difference check of every loss term's reverse pass on a tiny
/// field (8^3 finest grid, width-16 decoders). Derivatives are taken with
/// the sample set frozen.
pub fn gradient_check(seed: u64) -> Result<GradCheckReport> {
    use nalgebra::Vector3;
    let bounds = crate::geometry::Aabb::new(
        Vector3::new(-0.5, -0.5, -0.5),
        Vector3::new(0.5, 0.5, 0.5),
    );
    let fc = FieldConfig {
        feature_dim: 2,
        geo_dim: 3,
        pr_octaves: 2,
        dir_octaves: 1,
        pr_hidden: [16, 16],
        sdf_hidden: [16, 16],
        rgb_hidden: [16, 16],
        sem_hidden: 16,
        init_inv_s: 8.0,
        init_seed: seed,
        ..FieldConfig::default()
    };
    let mut field = Field::new_initialized(bounds, &[1.0 / 7.0, 2.0 / 7.0], fc)?;
    // Roughen the grids so SDF structure is generic.
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x5151);
    let grid_len: usize = field
        .layout
        .blocks()
        .iter()
        .filter(|b| b.name.starts_with("grid"))
        .map(|b| b.len)
        .sum();
    for i in 0..grid_len {
        field.params[i] += rng.gen_range(-0.08..0.08);
    }

    // A handful of rays crossing the volume with plausible supervision.
    let mut tasks = Vec::new();
    for _ in 0..6 {
        let origin = Vector3::new(
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.3..0.3),
        );
        let dir = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        )
        .normalize();
        tasks.push(RayTask {
            ray: crate::geometry::Ray {
                origin,
                direction: dir,
                near: 0.02,
                far: 0.45,
            },
            gt_color: [rng.gen(), rng.gen(), rng.gen()],
            gt_sem: Some([rng.gen(), rng.gen(), rng.gen()]),
            gt_depth_t: Some(rng.gen_range(0.15..0.35)),
        });
    }

    let sampler = SamplerConfig {
        n_initial: 10,
        n_per_layer: 5,
        n_layers: 2,
        lambda: 0.5,
        jitter: true,
    };
    let renderer = RendererConfig {
        // Gate-free depth supervision keeps the loss smooth in the
        // parameters (set membership cannot flip under perturbation).
        min_weight_sum_for_depth: 0.0,
        ..RendererConfig::default()
    };
    let bcfg = BatchConfig {
        tr_samples: 4,
        eik_per_ray: 2,
        smooth_points: 6,
        smooth_budget: 300,
    };

    let term_list = [
        ("rgb", 1e-4),
        ("depth", 1e-4),
        ("pr", 1e-4),
        ("sdf", 1e-4),
        ("fs", 1e-4),
        ("sem_rgb", 1e-4),
        ("sem_depth", 1e-4),
        ("eik", 1e-3),
        ("smooth", 1e-3),
    ];

    // Stratified probe indices across blocks.
    let mut probe_idx = Vec::new();
    {
        let blocks: Vec<(usize, usize)> = field
            .layout
            .blocks()
            .iter()
            .map(|b| (b.offset, b.len))
            .collect();
        let mut bi = 0;
        while probe_idx.len() < 64 {
            let (off, len) = blocks[bi % blocks.len()];
            probe_idx.push(off + rng.gen_range(0..len));
            bi += 1;
        }
    }

    let mut reports = Vec::new();
    let mut pass = true;
    for (name, tol) in term_list {
        let w = probe_weights(name);
        let p = BatchParams {
            sampler: &sampler,
            renderer: &renderer,
            batch: &bcfg,
            weights: &w,
            stage: Stage::Fine,
            mode_override: None,
            no_sg_mlp: false,
            no_semantic: false,
            chunk: 3,
            seed: seed ^ 0xBEEF,
        };
        // Freeze the sample set once; the check differentiates the losses
        // at fixed sample locations.
        let batch = sample_batch(
            &field, &tasks, &sampler, &renderer, &bcfg, &w, Stage::Fine, p.seed, false,
        )?;
        let base = process_sampled(&field, &tasks, &batch, &p)?;
        let mut max_rel: f64 = 0.0;
        let mut checked = 0;
        let mut worst = (String::new(), 0.0, 0.0);
        for &idx in &probe_idx {
            let orig = field.params[idx];
            let h = 1e-5 * orig.abs().max(1.0);
            field.params[idx] = orig + h;
            let lp = process_sampled(&field, &tasks, &batch, &p)?.total;
            field.params[idx] = orig - h;
            let lm = process_sampled(&field, &tasks, &batch, &p)?.total;
            field.params[idx] = orig;
            let num = (lp - lm) / (2.0 * h);
            let ana = base.grad[idx];
            let scale = num.abs().max(ana.abs());
            if scale < 1e-7 {
                continue; // below finite-difference noise
            }
            let rel = (num - ana).abs() / scale;
            if rel > max_rel {
                max_rel = rel;
                worst = (field.layout.block_of(idx).to_string(), num, ana);
            }
            checked += 1;
        }
        if max_rel > tol {
            pass = false;
        }
        reports.push(TermReport {
            name: name.to_string(),
            max_rel_err: max_rel,
            tolerance: tol,
            checked,
            worst_block: worst.0,
            worst_fd: worst.1,
            worst_analytic: worst.2,
        });
    }
    Ok(GradCheckReport {
        terms: reports,
        pass,
    })
}
