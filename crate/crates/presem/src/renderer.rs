//! SDF-to-density conversion, coarse transmittance weights, fine
//! reweighting, and compositing — with the matching reverse pass used by the
//! trainer.

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{sigmoid, DecodeVals, Field, FieldScratch};
use crate::geometry::Ray;
use crate::sampler::{hierarchical_sample, DensityQuery, SampleLayer, SamplerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Coarse,
    Fine,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage::Coarse => write!(f, "coarse"),
            Stage::Fine => write!(f, "fine"),
        }
    }
}

/// Which weight formula drives compositing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightMode {
    /// Transmittance weights only.
    NeusStandard,
    /// Transmittance weights reweighted by the fine-stage rule and
    /// renormalized.
    FineReweighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RendererConfig {
    /// Fine reweighting scale.
    pub beta: f64,
    /// SDF sign convention: positive outside the surface (density rises as
    /// the ray crosses into negative SDF).
    pub sdf_positive_outside: bool,
    /// Clamp floor for the fine-rule denominator.
    pub denom_eps: f64,
    /// Rays whose weight mass stays below this have no surface; depth is
    /// excluded from supervision.
    pub min_weight_sum_for_depth: f64,
}

impl Default for RendererConfig {
    fn default() -> Self {
        RendererConfig {
            beta: 1.0,
            sdf_positive_outside: true,
            denom_eps: 1e-6,
            min_weight_sum_for_depth: 0.5,
        }
    }
}

/// Logistic density from an SDF value (the sign convention makes density
/// grow toward the inside).
pub fn sdf_to_density(sdf: f64, inv_s: f64, positive_outside: bool) -> f64 {
    let x = if positive_outside { -sdf } else { sdf };
    sigmoid(x * inv_s)
}

/// d(sigma)/d(sdf) and d(sigma)/d(inv_s) for the same convention.
pub fn sdf_to_density_grad(sdf: f64, inv_s: f64, positive_outside: bool) -> (f64, f64) {
    let sigma = sdf_to_density(sdf, inv_s, positive_outside);
    let base = sigma * (1.0 - sigma);
    if positive_outside {
        (-inv_s * base, -sdf * base)
    } else {
        (inv_s * base, sdf * base)
    }
}

/// omega_k = exp(-sum_{j<k} sigma_j dz_j) * (1 - exp(-sigma_k dz_k)).
pub fn coarse_weights(sigma: &[f64], dz: &[f64]) -> Result<Vec<f64>> {
    if sigma.len() != dz.len() {
        return Err(Error::domain(format!(
            "coarse_weights length mismatch: {} densities vs {} intervals",
            sigma.len(),
            dz.len()
        )));
    }
    let mut out = Vec::with_capacity(sigma.len());
    let mut trans = 1.0;
    for k in 0..sigma.len() {
        let a = 1.0 - (-sigma[k] * dz[k]).exp();
        out.push(trans * a);
        trans *= (-sigma[k] * dz[k]).exp();
    }
    Ok(out)
}

/// Everything the reverse pass needs from one ray's weight computation.
#[derive(Debug, Clone)]
pub struct WeightChain {
    pub sigma: Vec<f64>,
    pub dz: Vec<f64>,
    pub mode: WeightMode,
    pub w_coarse: Vec<f64>,
    pub sum_coarse: f64,
    /// exp(-sigma_k dz_k) per sample.
    e: Vec<f64>,
    /// Pre-normalization fine weights (empty in NeusStandard mode).
    fine_pre: Vec<f64>,
    /// Fine denominators after clamping, and whether each clamped.
    denom: Vec<f64>,
    denom_clamped: Vec<bool>,
    presum: f64,
    scale: f64,
    capped: bool,
    beta: f64,
    pub weights: Vec<f64>,
}

const PRESUM_FLOOR: f64 = 1e-300;

/// Forward weight computation for one ray.
pub fn weight_chain(sigma: &[f64], dz: &[f64], mode: WeightMode, cfg: &RendererConfig) -> Result<WeightChain> {
    let w_coarse = coarse_weights(sigma, dz)?;
    let sum_coarse: f64 = w_coarse.iter().sum();
    let e: Vec<f64> = sigma
        .iter()
        .zip(dz.iter())
        .map(|(s, d)| (-s * d).exp())
        .collect();
    let n = sigma.len();
    match mode {
        WeightMode::NeusStandard => Ok(WeightChain {
            sigma: sigma.to_vec(),
            dz: dz.to_vec(),
            mode,
            weights: w_coarse.clone(),
            w_coarse,
            sum_coarse,
            e,
            fine_pre: Vec::new(),
            denom: Vec::new(),
            denom_clamped: Vec::new(),
            presum: 0.0,
            scale: 0.0,
            capped: false,
            beta: cfg.beta,
        }),
        WeightMode::FineReweighted => {
            let mut fine_pre = Vec::with_capacity(n);
            let mut denom = Vec::with_capacity(n);
            let mut denom_clamped = Vec::with_capacity(n);
            for k in 0..n {
                let succ = if k + 1 < n { k + 1 } else { k };
                let raw = 1.0 - e[succ];
                let (d, clamped) = if raw < cfg.denom_eps {
                    (cfg.denom_eps, true)
                } else {
                    (raw, false)
                };
                denom.push(d);
                denom_clamped.push(clamped);
                fine_pre.push(cfg.beta * w_coarse[k] * e[k] / d);
            }
            let presum: f64 = fine_pre.iter().sum();
            let target = sum_coarse.min(1.0);
            let capped = sum_coarse > 1.0;
            let (scale, weights) = if presum > PRESUM_FLOOR {
                let s = target / presum;
                (s, fine_pre.iter().map(|f| f * s).collect())
            } else {
                (0.0, vec![0.0; n])
            };
            Ok(WeightChain {
                sigma: sigma.to_vec(),
                dz: dz.to_vec(),
                mode,
                w_coarse,
                sum_coarse,
                e,
                fine_pre,
                denom,
                denom_clamped,
                presum,
                scale,
                capped,
                beta: cfg.beta,
                weights,
            })
        }
    }
}

/// Reverse pass: gradient of the final weights with respect to the
/// densities. `d_weights` is dL/d(weights); returns dL/d(sigma).
pub fn weight_chain_backward(chain: &WeightChain, d_weights: &[f64]) -> Vec<f64> {
    let n = chain.sigma.len();
    let mut d_sigma = vec![0.0; n];
    if n == 0 {
        return d_sigma;
    }
    // dL/d(w_coarse) and the direct density terms, depending on the mode.
    let mut d_wc = vec![0.0; n];
    match chain.mode {
        WeightMode::NeusStandard => {
            d_wc.copy_from_slice(d_weights);
        }
        WeightMode::FineReweighted => {
            if chain.scale == 0.0 {
                return d_sigma;
            }
            // Through the normalization w_k = fine_pre_k * target / presum.
            let gdotw: f64 = d_weights
                .iter()
                .zip(chain.weights.iter())
                .map(|(g, w)| g * w)
                .sum();
            let mut d_fine = vec![0.0; n];
            for k in 0..n {
                d_fine[k] = d_weights[k] * chain.scale - gdotw / chain.presum;
            }
            let d_target = gdotw / (chain.sum_coarse.min(1.0)).max(PRESUM_FLOOR);
            // Through fine_pre_k = beta * w_coarse_k * e_k / denom_k.
            let mut d_e = vec![0.0; n];
            for k in 0..n {
                let f = chain.fine_pre[k];
                d_wc[k] += d_fine[k] * chain.beta * chain.e[k] / chain.denom[k];
                d_e[k] += d_fine[k] * chain.beta * chain.w_coarse[k] / chain.denom[k];
                // denom_k = 1 - e_{succ(k)} unless clamped.
                if !chain.denom_clamped[k] {
                    let succ = if k + 1 < n { k + 1 } else { k };
                    d_e[succ] += d_fine[k] * f / chain.denom[k];
                }
            }
            // Normalization target = min(sum_coarse, 1).
            if !chain.capped {
                for k in 0..n {
                    d_wc[k] += d_target;
                }
            }
            // e_k = exp(-sigma_k dz_k).
            for k in 0..n {
                d_sigma[k] += d_e[k] * (-chain.dz[k]) * chain.e[k];
            }
        }
    }
    // Coarse weights: d sigma_m = dz_m * (g_m T_m e_m - sum_{k>m} g_k w_k).
    // T_m e_m = T_{m+1}; running transmittance recovered from e.
    let mut suffix = 0.0;
    let mut trans_after: Vec<f64> = vec![0.0; n];
    let mut t = 1.0;
    for k in 0..n {
        t *= chain.e[k];
        trans_after[k] = t;
    }
    for m in (0..n).rev() {
        d_sigma[m] += chain.dz[m] * (d_wc[m] * trans_after[m] - suffix);
        suffix += d_wc[m] * chain.w_coarse[m];
    }
    d_sigma
}

/// Composited ray outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct RayRender {
    pub color: [f64; 3],
    pub semantic_color: [f64; 3],
    pub depth: f64,
    pub weights: Vec<f64>,
    pub weight_sum: f64,
    pub stage: Stage,
}

/// Convex compositing against a black background.
pub fn composite(
    weights: &[f64],
    colors: &[[f64; 3]],
    semantic_colors: &[[f64; 3]],
    depths: &[f64],
    stage: Stage,
) -> Result<RayRender> {
    let n = weights.len();
    if colors.len() != n || semantic_colors.len() != n || depths.len() != n {
        return Err(Error::domain("composite length mismatch"));
    }
    let mut color = [0.0; 3];
    let mut sem = [0.0; 3];
    let mut depth = 0.0;
    let mut wsum = 0.0;
    for k in 0..n {
        let w = weights[k];
        for c in 0..3 {
            color[c] += w * colors[k][c];
            sem[c] += w * semantic_colors[k][c];
        }
        depth += w * depths[k];
        wsum += w;
    }
    Ok(RayRender {
        color,
        semantic_color: sem,
        depth,
        weights: weights.to_vec(),
        weight_sum: wsum,
        stage,
    })
}

/// Sample spacings from sorted depths; the final sample extends to `far`
/// (floored at a sliver so the last interval stays positive).
pub fn spacings(depths: &[f64], far: f64) -> Vec<f64> {
    let n = depths.len();
    let mut dz = Vec::with_capacity(n);
    for k in 0..n {
        if k + 1 < n {
            dz.push(depths[k + 1] - depths[k]);
        } else {
            let tail = far - depths[k];
            let fallback = if n >= 2 {
                depths[n - 1] - depths[n - 2]
            } else {
                1e-4
            };
            dz.push(if tail > 0.0 { tail } else { fallback.max(1e-9) });
        }
    }
    dz
}

fn stage_mode(stage: Stage) -> WeightMode {
    match stage {
        Stage::Coarse => WeightMode::NeusStandard,
        Stage::Fine => WeightMode::FineReweighted,
    }
}

/// Wraps a field with per-worker scratch so the sampler can score densities.
pub struct FieldDensity<'a> {
    pub field: &'a Field,
    scratch: FieldScratch,
    positive_outside: bool,
    inv_s: f64,
}

impl<'a> FieldDensity<'a> {
    pub fn new(field: &'a Field, cfg: &RendererConfig) -> Self {
        FieldDensity {
            scratch: field.scratch(),
            positive_outside: cfg.sdf_positive_outside,
            inv_s: field.inv_s(),
            field,
        }
    }
}

impl DensityQuery for FieldDensity<'_> {
    fn pr_density(&mut self, p: &Vector3<f64>) -> f64 {
        self.field.pr_density_cached(p, &mut self.scratch)
    }
    fn surface_density(&mut self, p: &Vector3<f64>) -> f64 {
        let (sdf, _) = self.field.decode_sdf(p, &mut self.scratch);
        sdf_to_density(sdf, self.inv_s, self.positive_outside)
    }
}

/// Full single-ray render: hierarchical sampling, decoding, weights,
/// compositing. `weight_mode_override` forces a weight formula regardless of
/// stage (ablation switch).
pub fn render_ray<R: Rng>(
    field: &Field,
    ray: &Ray,
    stage: Stage,
    sampler_cfg: &SamplerConfig,
    cfg: &RendererConfig,
    weight_mode_override: Option<WeightMode>,
    rng: &mut R,
) -> Result<RayRender> {
    let layer = {
        let mut q = FieldDensity::new(field, cfg);
        hierarchical_sample(ray, &mut q, sampler_cfg, rng)?
    };
    render_samples(field, ray, &layer, stage, cfg, weight_mode_override)
}

/// Render a prepared sample set (decodes each sample once).
pub fn render_samples(
    field: &Field,
    ray: &Ray,
    layer: &SampleLayer,
    stage: Stage,
    cfg: &RendererConfig,
    weight_mode_override: Option<WeightMode>,
) -> Result<RayRender> {
    let mut scratch = field.scratch();
    let inv_s = field.inv_s();
    let n = layer.len();
    let mut colors = Vec::with_capacity(n);
    let mut sems = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    for p in &layer.positions {
        let v: DecodeVals = field.decode_cached(p, &ray.direction, &mut scratch);
        colors.push(v.color);
        sems.push(v.semantic_color);
        sigma.push(sdf_to_density(v.sdf, inv_s, cfg.sdf_positive_outside));
    }
    let dz = spacings(&layer.depths, ray.far);
    let mode = weight_mode_override.unwrap_or_else(|| stage_mode(stage));
    let chain = weight_chain(&sigma, &dz, mode, cfg)?;
    composite(&chain.weights, &colors, &sems, &layer.depths, stage)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn sigmoid_density_examples() {
        for inv_s in [0.5, 1.0, 20.0] {
            assert_relative_eq!(sdf_to_density(0.0, inv_s, true), 0.5, epsilon = 1e-12);
        }
        // Inside point (sdf = -1) at inv_s = ln 3 maps to 0.75.
        assert_relative_eq!(
            sdf_to_density(-1.0, 3.0_f64.ln(), true),
            0.75,
            epsilon = 1e-12
        );
        assert!(sdf_to_density(1e6, 1.0, true) < 1e-12);
    }

    #[test]
    fn coarse_weight_examples() {
        let w = coarse_weights(&[LN2], &[1.0]).unwrap();
        assert_relative_eq!(w[0], 0.5, epsilon = 1e-12);
        let w = coarse_weights(&[LN2, LN2], &[1.0, 1.0]).unwrap();
        assert_relative_eq!(w[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(w[1], 0.25, epsilon = 1e-12);
        assert_relative_eq!(w.iter().sum::<f64>(), 0.75, epsilon = 1e-12);
        let w = coarse_weights(&[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0]).unwrap();
        assert!(w.iter().all(|v| *v == 0.0));
        assert!(coarse_weights(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn coarse_weights_telescope() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        for _ in 0..2000 {
            let n = rng.gen_range(1..40);
            let sigma: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..3.0)).collect();
            let dz: Vec<f64> = (0..n).map(|_| rng.gen_range(0.001..0.5)).collect();
            let w = coarse_weights(&sigma, &dz).unwrap();
            let sum: f64 = w.iter().sum();
            let total: f64 = sigma.iter().zip(dz.iter()).map(|(s, d)| s * d).sum();
            assert!((sum - (1.0 - (-total).exp())).abs() < 1e-12);
        }
    }

    #[test]
    fn coarse_weights_split_invariance() {
        // Splitting a sample into two with the same sigma and summed dz
        // leaves the transmittance seen by later samples unchanged and
        // conserves the split sample's weight mass.
        let sigma = [0.7, 1.3, 0.4];
        let dz = [0.2, 0.5, 0.3];
        let w = coarse_weights(&sigma, &dz).unwrap();
        let sigma_s = [0.7, 1.3, 1.3, 0.4];
        let dz_s = [0.2, 0.2, 0.3, 0.3];
        let ws = coarse_weights(&sigma_s, &dz_s).unwrap();
        assert_relative_eq!(ws[1] + ws[2], w[1], epsilon = 1e-12);
        assert_relative_eq!(ws[0], w[0], epsilon = 1e-12);
        assert_relative_eq!(ws[3], w[2], epsilon = 1e-12);
    }

    #[test]
    fn fine_weight_example() {
        // beta=1, w_coarse=0.5, sigma_k dz_k = sigma_{k+1} dz_{k+1} = ln 2
        // gives pre-normalization 0.5 * 0.5 / 0.5 = 0.5 on sample 0.
        let cfg = RendererConfig::default();
        let chain = weight_chain(&[LN2, LN2], &[1.0, 1.0], WeightMode::FineReweighted, &cfg)
            .unwrap();
        assert_relative_eq!(chain.fine_pre[0], 0.5, epsilon = 1e-12);
        // Renormalized sum equals the coarse sum (0.75 < 1).
        assert_relative_eq!(
            chain.weights.iter().sum::<f64>(),
            chain.sum_coarse,
            epsilon = 1e-12
        );
    }

    #[test]
    fn fine_weights_beta_zero_all_zero() {
        let cfg = RendererConfig {
            beta: 0.0,
            ..RendererConfig::default()
        };
        let chain = weight_chain(&[1.0, 2.0], &[0.1, 0.2], WeightMode::FineReweighted, &cfg)
            .unwrap();
        assert!(chain.weights.iter().all(|w| *w == 0.0));
    }

    #[test]
    fn fine_weights_survive_zero_denominator() {
        let cfg = RendererConfig::default();
        // Successor density zero makes the raw denominator vanish.
        let chain = weight_chain(&[2.0, 0.0], &[0.3, 0.3], WeightMode::FineReweighted, &cfg)
            .unwrap();
        for w in &chain.weights {
            assert!(w.is_finite());
        }
    }

    #[test]
    fn fine_weights_beta_invariant_after_normalization() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.gen_range(2..20);
            let sigma: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..3.0)).collect();
            let dz: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..0.4)).collect();
            let mk = |beta: f64| {
                let cfg = RendererConfig {
                    beta,
                    ..RendererConfig::default()
                };
                weight_chain(&sigma, &dz, WeightMode::FineReweighted, &cfg)
                    .unwrap()
                    .weights
            };
            let a = mk(1.0);
            let b = mk(7.3);
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fine_weight_sum_at_most_one() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        for _ in 0..500 {
            let n = rng.gen_range(1..30);
            let sigma: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..8.0)).collect();
            let dz: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..0.5)).collect();
            let cfg = RendererConfig::default();
            let chain = weight_chain(&sigma, &dz, WeightMode::FineReweighted, &cfg).unwrap();
            let sum: f64 = chain.weights.iter().sum();
            assert!(sum <= 1.0 + 1e-9, "sum {sum}");
            for w in &chain.weights {
                assert!(*w >= 0.0);
            }
        }
    }

    #[test]
    fn composite_examples() {
        let colors = vec![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        let sems = vec![[0.2, 0.2, 0.2], [0.8, 0.8, 0.8]];
        let depths = vec![1.0, 2.0];
        // One-hot.
        let r = composite(&[0.0, 1.0], &colors, &sems, &depths, Stage::Coarse).unwrap();
        assert_eq!(r.color, [0.0, 0.0, 1.0]);
        assert_eq!(r.depth, 2.0);
        // Even blend.
        let r = composite(&[0.5, 0.5], &colors, &sems, &depths, Stage::Coarse).unwrap();
        assert_eq!(r.color, [0.5, 0.0, 0.5]);
        assert_relative_eq!(r.depth, 1.5);
        // All-zero weights: black, depth 0, no surface.
        let r = composite(&[0.0, 0.0], &colors, &sems, &depths, Stage::Coarse).unwrap();
        assert_eq!(r.color, [0.0, 0.0, 0.0]);
        assert_eq!(r.depth, 0.0);
        assert_eq!(r.weight_sum, 0.0);
        // Length mismatch.
        assert!(composite(&[1.0], &colors, &sems, &depths, Stage::Coarse).is_err());
    }

    #[test]
    fn composite_stays_in_color_hull() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        for _ in 0..300 {
            let n = rng.gen_range(1..12);
            let colors: Vec<[f64; 3]> = (0..n)
                .map(|_| [rng.gen(), rng.gen(), rng.gen()])
                .collect();
            let depths: Vec<f64> = (0..n).map(|i| 0.1 * (i as f64 + 1.0)).collect();
            let mut w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let sum: f64 = w.iter().sum();
            if sum > 1.0 {
                for v in w.iter_mut() {
                    *v /= sum;
                }
            }
            let r = composite(&w, &colors, &colors, &depths, Stage::Fine).unwrap();
            // Against black background the hull includes the origin.
            for c in 0..3 {
                let max = colors.iter().map(|v| v[c]).fold(0.0, f64::max);
                assert!(r.color[c] >= -1e-12 && r.color[c] <= max + 1e-12);
            }
        }
    }

    #[test]
    fn weight_chain_backward_matches_fd() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        for mode in [WeightMode::NeusStandard, WeightMode::FineReweighted] {
            for _ in 0..40 {
                let n = rng.gen_range(2..10);
                let sigma: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..2.0)).collect();
                let dz: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..0.3)).collect();
                let g: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let cfg = RendererConfig::default();
                let chain = weight_chain(&sigma, &dz, mode, &cfg).unwrap();
                let d_sigma = weight_chain_backward(&chain, &g);
                let loss = |s: &[f64]| {
                    let c = weight_chain(s, &dz, mode, &cfg).unwrap();
                    c.weights.iter().zip(g.iter()).map(|(w, gg)| w * gg).sum::<f64>()
                };
                let h = 1e-7;
                for i in 0..n {
                    let mut sp = sigma.clone();
                    sp[i] += h;
                    let lp = loss(&sp);
                    sp[i] = sigma[i] - h;
                    let lm = loss(&sp);
                    let num = (lp - lm) / (2.0 * h);
                    let ana = d_sigma[i];
                    let denom = num.abs().max(ana.abs()).max(1e-6);
                    assert!(
                        ((num - ana) / denom).abs() < 1e-5,
                        "{mode:?} i={i}: fd {num} vs {ana}"
                    );
                }
            }
        }
    }

    #[test]
    fn spacing_construction() {
        let dz = spacings(&[0.1, 0.4, 0.9], 1.0);
        assert_relative_eq!(dz[0], 0.3, epsilon = 1e-12);
        assert_relative_eq!(dz[1], 0.5, epsilon = 1e-12);
        assert_relative_eq!(dz[2], 0.1, epsilon = 1e-12);
        let dz = spacings(&[0.5], 1.0);
        assert_relative_eq!(dz[0], 0.5, epsilon = 1e-12);
    }
}
