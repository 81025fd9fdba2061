//! Noise schedule statistics and short training runs on the tiny config.

use candle_core::{Device, Tensor};
use fia_vton::ablation::{run_ablation, AblationOptions};
use fia_vton::checkpoint::{capture, load, restore, save, to_bytes};
use fia_vton::config::ScheduleConfig;
use fia_vton::diffusion_engine::{draw_step, NoiseSchedule, PreparedSample, TrainOptions, TryOnPipeline};
use fia_vton::flow_guider::FlowSource;
use fia_vton::latent_codec::LatentCodec;
use fia_vton::metrics::FeatureExtractor;
use fia_vton::synthetic_data::generate_dataset;
use fia_vton::{ModelConfig, Variant};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn pipeline(config: &ModelConfig) -> TryOnPipeline {
    TryOnPipeline::new(config, LatentCodec::for_config(config, 0).unwrap(), FlowSource::Oracle).unwrap()
}

#[test]
fn noised_variance_follows_the_schedule() {
    let s = NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap();
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut normal = |k: usize| -> Vec<f32> {
        (0..k).map(|_| Distribution::<f32>::sample(&StandardNormal, &mut rng)).collect()
    };
    for t in [1usize, 100, 500, 999] {
        let x0 = Tensor::from_vec(normal(n), (n, 1), &Device::Cpu).unwrap();
        let eps = Tensor::from_vec(normal(n), (n, 1), &Device::Cpu).unwrap();
        let x_t = s.add_noise(&x0, &vec![t; n], &eps).unwrap();
        let v: Vec<f64> = x_t.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().map(|&x| x as f64).collect();
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let ab = s.alpha_bar(t).unwrap();
        let expected = ab + (1.0 - ab);
        // x_t is Gaussian, so the sample variance has std σ²·√(2/(n−1))
        let sigma = expected * (2.0 / (n - 1) as f64).sqrt();
        assert!((var - expected).abs() <= 3.0 * sigma, "t={t}: var {var}, expected {expected}");
    }
}

#[test]
fn initial_loss_is_near_unit_noise_variance() {
    let config = ModelConfig::tiny();
    let samples = generate_dataset(16, &config, 31).unwrap();
    let p = pipeline(&config);
    let data = p.prepare(&samples).unwrap();
    let (h, w) = config.latent_size();
    let mut losses = Vec::new();
    for step in 0..8 {
        let d = draw_step(7, step, data.len(), 4, p.schedule.steps(), config.latent_channels * h * w);
        let batch: Vec<&PreparedSample> = d.indices.iter().map(|&i| &data[i]).collect();
        let (loss, _) = p.loss(&batch, &d.timesteps, &d.noise).unwrap();
        losses.push(loss.to_scalar::<f32>().unwrap() as f64);
    }
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    assert!((mean - 1.0).abs() <= 0.2, "mean initial loss {mean}");
}

fn window_mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean absolute error over pixels where `select` holds.
fn region_mae(a: &fia_vton::data_model::ImageTensor, b: &fia_vton::data_model::ImageTensor, select: &[bool]) -> f64 {
    let hw = a.height() * a.width();
    let (mut sum, mut n) = (0.0, 0usize);
    for c in 0..a.channels() {
        for (i, &on) in select.iter().enumerate() {
            if on {
                sum += (a.data()[c * hw + i] - b.data()[c * hw + i]).abs() as f64;
                n += 1;
            }
        }
    }
    sum / n.max(1) as f64
}

#[test]
fn overfits_a_small_set_and_respects_mask_conditioning() {
    let config = ModelConfig::tiny();
    let samples = generate_dataset(64, &config, 41).unwrap();
    let mut p = pipeline(&config);
    let data = p.prepare(&samples).unwrap();
    let records = p.train(&data, 200, &TrainOptions::default()).unwrap();
    assert_eq!(records.len(), 200);
    let losses: Vec<f64> = records.iter().map(|r| r.loss).collect();
    // per-step losses depend on the drawn time steps, so compare window means
    let (first, last) = (window_mean(&losses[..20]), window_mean(&losses[180..]));
    assert!(last <= 0.5 * first, "loss {first:.4} -> {last:.4}");

    // mask ≡ 0 with the full person as context, pixel compositing disabled so
    // the decoded output is compared directly
    let items: Vec<PreparedSample> = data[..4].to_vec();
    let unmasked: Vec<PreparedSample> = items
        .iter()
        .map(|s| {
            let mut s = s.clone();
            s.x_m = s.x0.clone().unwrap();
            s.mask_lat = fia_vton::data_model::Array3::zeros(1, s.mask_lat.height(), s.mask_lat.width());
            s.mask = vec![1.0; s.mask.len()];
            s.person = samples.iter().find(|o| o.sample_id == s.sample_id).unwrap().target.clone().unwrap();
            s
        })
        .collect();
    let masked_out = p.sample(&items, 5, 3).unwrap();
    let unmasked_out = p.sample(&unmasked, 5, 3).unwrap();
    for (i, s) in items.iter().enumerate() {
        let target = samples[i].target.as_ref().unwrap();
        let preserved: Vec<bool> = s.mask.iter().map(|&m| m == 0.0).collect();
        let garment: Vec<bool> = s.mask.iter().map(|&m| m == 1.0).collect();
        let e_preserved = region_mae(&unmasked_out[i], target, &preserved);
        let e_garment = region_mae(&masked_out[i], target, &garment);
        assert!(e_preserved <= e_garment, "sample {i}: preserved {e_preserved:.4} garment {e_garment:.4}");
    }
}

#[test]
fn resume_then_ten_steps_matches_uninterrupted_run() {
    let config = ModelConfig::tiny();
    let samples = generate_dataset(8, &config, 51).unwrap();
    let k = 3;
    let mut a = pipeline(&config);
    let data = a.prepare(&samples).unwrap();
    a.train(&data, k, &TrainOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("k.ckpt");
    save(&a, &path).unwrap();
    a.train(&data, k + 10, &TrainOptions::default()).unwrap();

    let mut b = restore(&load(&path).unwrap()).unwrap();
    assert_eq!(b.step, k);
    b.train(&data, k + 10, &TrainOptions::default()).unwrap();
    assert_eq!(b.step, k + 10);
    assert_eq!(to_bytes(&capture(&a).unwrap()).unwrap(), to_bytes(&capture(&b).unwrap()).unwrap());
}

#[test]
fn train_writes_logs_and_periodic_checkpoints() {
    let config = ModelConfig {
        training: fia_vton::config::TrainingConfig {
            checkpoint_every: 2,
            log_every: 1,
            ..ModelConfig::tiny().training
        },
        ..ModelConfig::tiny()
    };
    let samples = generate_dataset(4, &config, 61).unwrap();
    let mut p = pipeline(&config);
    let data = p.prepare(&samples).unwrap();
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("checkpoints")).unwrap();
    p.train(&data, 4, &TrainOptions::for_run(&config, dir.path())).unwrap();
    let log = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[3]["step"], 4);
    for s in [2, 4] {
        assert!(dir.path().join(format!("checkpoints/step_{s:07}.ckpt")).is_file());
    }
}

#[test]
fn two_variant_sweep_shares_seeds() {
    let config = ModelConfig {
        training: fia_vton::config::TrainingConfig {
            batch_size: 2,
            ..ModelConfig::tiny().training
        },
        ..ModelConfig::tiny()
    };
    let train = generate_dataset(6, &config, 71).unwrap();
    let eval = generate_dataset(4, &config, 72).unwrap();
    let opts = AblationOptions {
        seeds: vec![5],
        train_steps: 2,
        sampling_steps: 2,
        ..AblationOptions::for_config(&config, vec![Variant::Fia, Variant::NoFlow])
    };
    let ex = FeatureExtractor::standard().unwrap();
    let mut seen = Vec::new();
    let table = run_ablation(
        &config,
        &train,
        &eval,
        &opts,
        &|c| LatentCodec::for_config(c, 0),
        &|_| Ok(FlowSource::Oracle),
        &ex,
        |r| seen.push(r.variant),
    )
    .unwrap();
    assert_eq!(seen, vec![Variant::Fia, Variant::NoFlow]);
    assert_eq!(table.rows.len(), 2);
    assert!(table.rows.iter().all(|r| r.seed == 5));
    for r in &table.rows {
        assert!(r.ssim.is_finite() && r.psnr.is_finite() && r.proxy_fid_paired.is_finite() && r.proxy_fid_unpaired.is_finite());
    }
    let json = table.to_json();
    assert_eq!(json["means"].as_array().unwrap().len(), 2);
}
