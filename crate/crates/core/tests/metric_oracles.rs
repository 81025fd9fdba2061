//! Metrics against direct formula evaluation.

use fia_vton::data_model::{Array3, ImageTensor, ValueRange};
use fia_vton::metrics::{evaluate, frechet_distance, mse, psnr, ssim, FeatureExtractor, Setting};
use fia_vton::resample::Interpolation;
use fia_vton::synthetic_data::generate_dataset;
use fia_vton::ModelConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn unit(a: Array3) -> ImageTensor {
    ImageTensor::new(a, ValueRange::Unit).unwrap()
}

/// SSIM with the full 2-D Gaussian window evaluated at every pixel; windows
/// are cut at the border and renormalized.
fn ssim_oracle(a: &ImageTensor, b: &ImageTensor) -> f64 {
    let (c, h, w) = (a.channels(), a.height(), a.width());
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let g = |d: isize| (-(d * d) as f64 / (2.0 * 1.5 * 1.5)).exp();
    let mut total = 0.0;
    for ch in 0..c {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let (mut sw, mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in -5..=5isize {
                    for dx in -5..=5isize {
                        let (yy, xx) = (y + dy, x + dx);
                        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                            continue;
                        }
                        let wt = g(dy) * g(dx);
                        let p = a.array().get(ch, yy as usize, xx as usize) as f64;
                        let q = b.array().get(ch, yy as usize, xx as usize) as f64;
                        sw += wt;
                        mx += wt * p;
                        my += wt * q;
                        sxx += wt * p * p;
                        syy += wt * q * q;
                        sxy += wt * p * q;
                    }
                }
                let (mx, my) = (mx / sw, my / sw);
                let vx = sxx / sw - mx * mx;
                let vy = syy / sw - my * my;
                let cov = sxy / sw - mx * my;
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
    }
    total / (c * h * w) as f64
}

#[test]
fn two_block_ssim_matches_the_window_oracle() {
    let left_right = unit(Array3::from_fn(1, 8, 8, |_, _, x| if x < 4 { 0.2 } else { 0.8 }));
    let top_bottom = unit(Array3::from_fn(1, 8, 8, |_, y, _| if y < 4 { 0.1 } else { 0.9 }));
    let got = ssim(&left_right, &top_bottom).unwrap();
    let want = ssim_oracle(&left_right, &top_bottom);
    assert!((got - want).abs() <= 1e-6, "{got} vs {want}");
    let shifted = unit(Array3::from_fn(3, 8, 8, |c, _, x| if x < 5 { 0.3 + 0.1 * c as f32 } else { 0.7 }));
    let blocks3 = unit(Array3::from_fn(3, 8, 8, |_, _, x| if x < 4 { 0.2 } else { 0.8 }));
    assert!((ssim(&blocks3, &shifted).unwrap() - ssim_oracle(&blocks3, &shifted)).abs() <= 1e-6);
}

#[test]
fn psnr_matches_hand_mse() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = unit(Array3::from_fn(3, 12, 10, |_, _, _| rng.random::<f32>()));
    let b = unit(Array3::from_fn(3, 12, 10, |_, _, _| rng.random::<f32>()));
    let n = a.data().len() as f64;
    let hand: f64 = a.data().iter().zip(b.data()).map(|(p, q)| (*p as f64 - *q as f64).powi(2)).sum::<f64>() / n;
    assert!((mse(&a, &b).unwrap() - hand).abs() <= 1e-9);
    assert!((psnr(&a, &b).unwrap() - 10.0 * (1.0 / hand).log10()).abs() <= 1e-9);
}

#[test]
fn gaussian_mean_gap_gives_its_square() {
    let n = 10_000;
    let delta = 0.7;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut draw = |shift: f64| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| vec![shift + Distribution::<f64>::sample(&StandardNormal, &mut rng)])
            .collect()
    };
    let a = draw(0.0);
    let b = draw(delta);
    let d = frechet_distance(&a, &b).unwrap();
    // Monte Carlo error of the mean gap and variances: a few times 2δ/√n + 2/√n
    let mc = 4.0 * (2.0 * delta + 2.0) / (n as f64).sqrt();
    assert!((d - delta * delta).abs() <= mc, "{d} vs {}", delta * delta);
}

fn desk_images(seed: u64, n: usize) -> Vec<ImageTensor> {
    generate_dataset(n, &ModelConfig::desk(), seed)
        .unwrap()
        .into_iter()
        .map(|s| s.target.unwrap())
        .collect()
}

#[test]
fn interpolation_choice_changes_proxy_fid() {
    let ex = FeatureExtractor::standard().unwrap();
    let outputs = desk_images(1, 12);
    let refs = desk_images(2, 12);
    let bl = evaluate(&outputs, &refs, Setting::Paired, Interpolation::Bilinear, &ex).unwrap();
    let cu = evaluate(&outputs, &refs, Setting::Paired, Interpolation::Cubic, &ex).unwrap();
    let (fb, fc) = (bl.get("proxy_fid").unwrap().mean, cu.get("proxy_fid").unwrap().mean);
    assert!(fb.is_finite() && fc.is_finite());
    assert_ne!(fb, fc, "bilinear {fb} cubic {fc}");
    assert_eq!(bl.to_json()["interpolation"], "bilinear");
    assert_eq!(cu.to_json()["interpolation"], "cubic");
}

#[test]
fn unpaired_reports_carry_only_distribution_metrics() {
    let ex = FeatureExtractor::standard().unwrap();
    let outputs = desk_images(3, 6);
    let refs = desk_images(4, 6);
    let r = evaluate(&outputs, &refs, Setting::Unpaired, Interpolation::Bilinear, &ex).unwrap();
    for k in ["ssim", "psnr", "lpips_proxy"] {
        assert!(r.get(k).is_none(), "{k} present in unpaired report");
    }
    assert!(r.get("proxy_fid").is_some());
    let same = evaluate(&outputs, &outputs, Setting::Paired, Interpolation::Bilinear, &ex).unwrap();
    assert_eq!(same.get("ssim").unwrap().mean, 1.0);
    assert_eq!(same.get("psnr").unwrap().mean, f64::INFINITY);
    assert_eq!(same.get("lpips_proxy").unwrap().mean, 0.0);
    assert!(same.get("proxy_fid").unwrap().mean <= 1e-3);
}

#[test]
fn growing_noise_degrades_psnr_and_ssim() {
    let refs = desk_images(5, 1).remove(0);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let z: Vec<f32> = (0..refs.data().len())
        .map(|_| Distribution::<f32>::sample(&StandardNormal, &mut rng))
        .collect();
    let (mut last_p, mut last_s) = (f64::INFINITY, 1.0);
    for sigma in [0.01f32, 0.03, 0.1, 0.3] {
        let noisy: Vec<f32> = refs.data().iter().zip(&z).map(|(v, n)| v + sigma * n).collect();
        let a = Array3::new(noisy, 3, refs.height(), refs.width()).unwrap();
        let img = ImageTensor::clamped(a, ValueRange::Unit).unwrap();
        let (p, s) = (psnr(&img, &refs).unwrap(), ssim(&img, &refs).unwrap());
        assert!(p < last_p && s < last_s, "σ={sigma}: psnr {p} ssim {s}");
        (last_p, last_s) = (p, s);
    }
}
