use nalgebra::Vector3;
use presem::field::{Field, FieldConfig};
use presem::geometry::{Aabb, Ray};
use presem::losses::{sample_batch, BatchConfig, LossWeights, RayTask};
use presem::renderer::{RendererConfig, Stage};
use presem::sampler::SamplerConfig;
use presem::trainer::{process_sampled, BatchParams};
use rand::{Rng, SeedableRng};

fn main() {
    let seed = 7u64;
    let bounds = Aabb::new(Vector3::new(-0.5, -0.5, -0.5), Vector3::new(0.5, 0.5, 0.5));
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
    let mut field = Field::new_initialized(bounds, &[1.0 / 7.0, 2.0 / 7.0], fc).unwrap();
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed ^ 0x5151);
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

    let tasks = vec![RayTask {
        ray: Ray {
            origin: Vector3::new(-0.1, 0.05, -0.2),
            direction: Vector3::new(0.3, 0.2, 0.93).normalize(),
            near: 0.02,
            far: 0.45,
        },
        gt_color: [0.2, 0.7, 0.4],
        gt_sem: Some([0.9, 0.1, 0.3]),
        gt_depth_t: Some(0.3),
    }];
    let sampler = SamplerConfig {
        n_initial: 4,
        n_per_layer: 2,
        n_layers: 1,
        lambda: 0.5,
        jitter: true,
    };
    let renderer = RendererConfig {
        min_weight_sum_for_depth: 0.0,
        ..RendererConfig::default()
    };
    let bcfg = BatchConfig {
        tr_samples: 0,
        eik_per_ray: 0,
        smooth_points: 0,
        smooth_budget: 1,
    };
    let mut w = LossWeights {
        lambda_sg: 1.0,
        lambda_sem: 0.0,
        lambda_pr: 0.0,
        lambda_rgb: 1.0,
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
    if std::env::args().any(|a| a == "--depth") {
        w.lambda_rgb = 0.0;
        w.lambda_d = 1.0;
    }
    let stage = if std::env::args().any(|a| a == "--coarse") {
        Stage::Coarse
    } else {
        Stage::Fine
    };
    let p = BatchParams {
        sampler: &sampler,
        renderer: &renderer,
        batch: &bcfg,
        weights: &w,
        stage,
        mode_override: None,
        no_sg_mlp: false,
        no_semantic: false,
        chunk: 8,
        seed: 99,
    };
    let batch = sample_batch(
        &field, &tasks, &sampler, &renderer, &bcfg, &w, stage, 99, false,
    )
    .unwrap();
    let base = process_sampled(&field, &tasks, &batch, &p).unwrap();
    println!("total = {}", base.total);
    let n = field.params.len();
    let mut worst: Vec<(f64, usize, f64, f64)> = Vec::new();
    for idx in 0..n {
        let orig = field.params[idx];
        let h = 1e-6 * orig.abs().max(1.0);
        field.params[idx] = orig + h;
        let lp = process_sampled(&field, &tasks, &batch, &p).unwrap().total;
        field.params[idx] = orig - h;
        let lm = process_sampled(&field, &tasks, &batch, &p).unwrap().total;
        field.params[idx] = orig;
        let num = (lp - lm) / (2.0 * h);
        let ana = base.grad[idx];
        let scale = num.abs().max(ana.abs());
        if scale < 1e-9 {
            continue;
        }
        let rel = (num - ana).abs() / scale;
        worst.push((rel, idx, num, ana));
    }
    worst.sort_by(|a, b| b.0.total_cmp(&a.0));
    for (rel, idx, num, ana) in worst.iter().take(12) {
        println!(
            "rel {rel:.3e} idx {idx:<6} {}  fd {num:.6e} vs analytic {ana:.6e}",
            field.layout.block_of(*idx)
        );
    }
}
