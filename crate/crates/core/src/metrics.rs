//! Evaluation metrics: SSIM, PSNR, an encoder-feature LPIPS proxy, and a
//! Fréchet distance over pluggable features (reported as proxy-FID).

use std::collections::BTreeMap;

use candle_core::DType;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data_model::{Array3, ImageTensor, ValueRange};
use crate::error::{invalid, shape_err, FiaError, Result};
use crate::latent_codec::images_to_tensor;
use crate::nn::ParamStore;
use crate::parallel::par_map;
use crate::resample::{resize, Interpolation};
use crate::spatial_guider::{SpatialEncoder, SpatialEncoderConfig};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const FRECHET_JITTER: f64 = 1e-6;
/// Resolution images are resampled to before feature extraction.
pub const EVAL_SIZE: (usize, usize) = (32, 24);

fn check_pair(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if (a.channels(), a.height(), a.width()) != (b.channels(), b.height(), b.width()) {
        return shape_err(format!(
            "metric inputs differ in shape: [{}, {}, {}] vs [{}, {}, {}]",
            a.channels(),
            a.height(),
            a.width(),
            b.channels(),
            b.height(),
            b.width()
        ));
    }
    Ok(())
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    w
}

/// Separable Gaussian-weighted local mean of `plane` (`h × w`). Windows that
/// cross the border are truncated and renormalized.
fn local_mean(plane: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (mut acc, mut norm) = (0.0, 0.0);
            for k in -r..=r {
                let xx = x as isize + k;
                if xx >= 0 && (xx as usize) < w {
                    let wt = win[(k + r) as usize];
                    acc += wt * plane[y * w + xx as usize];
                    norm += wt;
                }
            }
            tmp[y * w + x] = acc / norm;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (mut acc, mut norm) = (0.0, 0.0);
            for k in -r..=r {
                let yy = y as isize + k;
                if yy >= 0 && (yy as usize) < h {
                    let wt = win[(k + r) as usize];
                    acc += wt * tmp[yy as usize * w + x];
                    norm += wt;
                }
            }
            out[y * w + x] = acc / norm;
        }
    }
    out
}

/// Mean SSIM over every pixel and channel of two unit-range images.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_pair(a, b)?;
    let (a, b) = (a.to_unit(), b.to_unit());
    let (c, h, w) = (a.channels(), a.height(), a.width());
    let win = gaussian_window();
    let mut total = 0.0;
    for ch in 0..c {
        let x: Vec<f64> = a.array().channel(ch).iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = b.array().channel(ch).iter().map(|&v| v as f64).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, my) = (local_mean(&x, h, w, &win), local_mean(&y, h, w, &win));
        let (exx, eyy, exy) = (
            local_mean(&xx, h, w, &win),
            local_mean(&yy, h, w, &win),
            local_mean(&xy, h, w, &win),
        );
        for i in 0..h * w {
            let (ux, uy) = (mx[i], my[i]);
            let sxx = exx[i] - ux * ux;
            let syy = eyy[i] - uy * uy;
            let sxy = exy[i] - ux * uy;
            let num = (2.0 * (ux * uy) + SSIM_C1) * (2.0 * sxy + SSIM_C2);
            let den = (ux * ux + uy * uy + SSIM_C1) * (sxx + syy + SSIM_C2);
            total += num / den;
        }
    }
    Ok(total / (c * h * w) as f64)
}

/// Mean squared error in unit range.
pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_pair(a, b)?;
    let (a, b) = (a.to_unit(), b.to_unit());
    let n = a.data().len() as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(p, q)| (*p as f64 - *q as f64).powi(2))
        .sum::<f64>()
        / n)
}

/// `10·log10(1/MSE)` in dB; `+∞` when the images are identical.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / m).log10())
}

fn mean_cov(x: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = x.len();
    let k = x.first().map(|r| r.len()).unwrap_or(0);
    if n < 2 || k == 0 {
        return invalid("Fréchet distance needs at least two feature vectors of nonzero width");
    }
    if x.iter().any(|r| r.len() != k) {
        return shape_err("feature vectors have different widths");
    }
    let mut mu = DVector::<f64>::zeros(k);
    for r in x {
        for (j, v) in r.iter().enumerate() {
            mu[j] += v;
        }
    }
    mu /= n as f64;
    let mut cov = DMatrix::<f64>::zeros(k, k);
    for r in x {
        let d = DVector::from_iterator(k, r.iter().zip(mu.iter()).map(|(v, m)| v - m));
        cov += &d * d.transpose();
    }
    cov /= (n - 1) as f64;
    for i in 0..k {
        cov[(i, i)] += FRECHET_JITTER;
    }
    Ok((mu, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    if eig.eigenvalues.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(FiaError::InvalidInput("covariance is degenerate even after jitter".into()));
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// `‖μ_a − μ_b‖² + tr(Σ_a + Σ_b − 2(Σ_a Σ_b)^{1/2})` with unbiased covariances
/// plus diagonal jitter. The trace of the matrix square root is taken from
/// the eigenvalues of the symmetric `Σ_a^{1/2} Σ_b Σ_a^{1/2}`.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (mu_a, cov_a) = mean_cov(a)?;
    let (mu_b, cov_b) = mean_cov(b)?;
    if mu_a.len() != mu_b.len() {
        return shape_err("feature sets have different widths");
    }
    let sa = sym_sqrt(&cov_a)?;
    let m = &sa * &cov_b * &sa;
    let m = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(m);
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let d = (&mu_a - &mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
    if d < -1e-6 {
        return Err(FiaError::InvalidInput(format!("Fréchet distance came out negative ({d})")));
    }
    Ok(d.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Paired,
    Unpaired,
}

impl std::str::FromStr for Setting {
    type Err = FiaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paired" => Ok(Setting::Paired),
            "unpaired" => Ok(Setting::Unpaired),
            _ => Err(FiaError::InvalidInput(format!(
                "unknown setting {s:?} (expected paired or unpaired)"
            ))),
        }
    }
}

impl Setting {
    pub fn name(self) -> &'static str {
        match self {
            Setting::Paired => "paired",
            Setting::Unpaired => "unpaired",
        }
    }
}

/// Fixed-seed, untrained toy spatial encoder used as a feature extractor.
pub struct FeatureExtractor {
    _store: ParamStore,
    encoder: SpatialEncoder,
    seed: u64,
}

pub const EXTRACTOR_SEED: u64 = 0x5eed_f1d0;

impl FeatureExtractor {
    pub fn new(seed: u64) -> Result<Self> {
        let cfg = SpatialEncoderConfig {
            image_size: EVAL_SIZE,
            patch: 8,
            dim: 32,
            heads: 4,
            blocks: 2,
            positional: true,
        };
        let (store, encoder) = SpatialEncoder::standalone(cfg, DType::F32, seed)?;
        Ok(Self {
            _store: store,
            encoder,
            seed,
        })
    }

    pub fn standard() -> Result<Self> {
        Self::new(EXTRACTOR_SEED)
    }

    pub fn id(&self) -> String {
        format!("toy-spatial-encoder/random-seed-{:#x}/32x24/p8/d32", self.seed)
    }

    /// Patch token maps `[n_tokens, d]` (class token dropped) per image.
    pub fn token_maps(&self, images: &[ImageTensor]) -> Result<Vec<Vec<Vec<f64>>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let refs: Vec<&ImageTensor> = chunk.iter().collect();
            let t = self.encoder.forward(&images_to_tensor(&refs, DType::F32)?)?;
            let (b, n, d) = t.dims3()?;
            let v = t.flatten_all()?.to_vec1::<f32>()?;
            for i in 0..b {
                out.push(
                    (1..n)
                        .map(|j| v[(i * n + j) * d..(i * n + j + 1) * d].iter().map(|&x| x as f64).collect())
                        .collect(),
                );
            }
        }
        Ok(out)
    }

    /// Pooled feature vector per image: per-channel token mean then std.
    pub fn features(&self, images: &[ImageTensor]) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .token_maps(images)?
            .into_iter()
            .map(|toks| {
                let d = toks[0].len();
                let n = toks.len() as f64;
                let mut f = vec![0.0; 2 * d];
                for t in &toks {
                    for j in 0..d {
                        f[j] += t[j] / n;
                    }
                }
                for t in &toks {
                    for j in 0..d {
                        f[d + j] += (t[j] - f[j]).powi(2) / n;
                    }
                }
                for v in &mut f[d..] {
                    *v = v.sqrt();
                }
                f
            })
            .collect())
    }
}

/// Mean over tokens of the squared L2 distance between unit-normalized
/// token vectors.
pub fn lpips_proxy_tokens(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return shape_err("token maps must be nonempty and equally long");
    }
    let unit = |v: &[f64]| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter().map(|x| x / n).collect::<Vec<_>>()
    };
    let mut total = 0.0;
    for (p, q) in a.iter().zip(b) {
        let (p, q) = (unit(p), unit(q));
        total += p.iter().zip(&q).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    }
    Ok(total / a.len() as f64)
}

/// Resamples to [`EVAL_SIZE`] with the chosen interpolation (unit range).
pub fn downsample_for_eval(img: &ImageTensor, interp: Interpolation) -> Result<ImageTensor> {
    let u = img.to_unit();
    let r: Array3 = resize(u.array(), EVAL_SIZE.0, EVAL_SIZE.1, interp);
    ImageTensor::clamped(r, ValueRange::Unit)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricSummary {
    pub mean: f64,
    pub per_sample: Vec<f64>,
}

impl MetricSummary {
    fn from_samples(per_sample: Vec<f64>) -> Self {
        let mean = per_sample.iter().sum::<f64>() / per_sample.len().max(1) as f64;
        Self { mean, per_sample }
    }
}

fn num(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else if v > 0.0 {
        json!("inf")
    } else if v < 0.0 {
        json!("-inf")
    } else {
        json!("nan")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub setting: Setting,
    pub interpolation: Interpolation,
    pub extractor_id: String,
    pub n: usize,
    /// Keyed by metric name: `ssim`, `psnr`, `lpips_proxy`, `proxy_fid`.
    pub metrics: BTreeMap<String, MetricSummary>,
}

impl MetricReport {
    pub fn get(&self, name: &str) -> Option<&MetricSummary> {
        self.metrics.get(name)
    }

    pub fn to_json(&self) -> Value {
        let mut obj = serde_json::Map::new();
        for (k, m) in &self.metrics {
            obj.insert(
                k.clone(),
                json!({"mean": num(m.mean), "per_sample": m.per_sample.iter().map(|&v| num(v)).collect::<Vec<_>>()}),
            );
        }
        obj.insert("setting".into(), json!(self.setting.name()));
        obj.insert("interpolation".into(), json!(self.interpolation.name()));
        obj.insert("extractor_id".into(), json!(self.extractor_id));
        obj.insert("n".into(), json!(self.n));
        Value::Object(obj)
    }
}

/// Full-resolution SSIM/PSNR (paired only) plus LPIPS-proxy and proxy-FID on
/// images resampled to [`EVAL_SIZE`] with `interp`.
pub fn evaluate(
    outputs: &[ImageTensor],
    references: &[ImageTensor],
    setting: Setting,
    interp: Interpolation,
    extractor: &FeatureExtractor,
) -> Result<MetricReport> {
    if outputs.is_empty() || references.is_empty() {
        return invalid("evaluation needs nonempty output and reference sets");
    }
    if setting == Setting::Paired && outputs.len() != references.len() {
        return invalid(format!(
            "paired evaluation needs aligned sets, got {} outputs and {} references",
            outputs.len(),
            references.len()
        ));
    }
    let down = |set: &[ImageTensor]| -> Result<Vec<ImageTensor>> {
        par_map(set.len(), |i| downsample_for_eval(&set[i], interp))
            .into_iter()
            .collect()
    };
    let (out_small, ref_small) = (down(outputs)?, down(references)?);
    let mut metrics = BTreeMap::new();
    let fa = extractor.features(&out_small)?;
    let fb = extractor.features(&ref_small)?;
    metrics.insert(
        "proxy_fid".to_string(),
        MetricSummary {
            mean: frechet_distance(&fa, &fb)?,
            per_sample: vec![],
        },
    );
    if setting == Setting::Paired {
        let pairs: Vec<(f64, f64)> = par_map(outputs.len(), |i| {
            Ok::<_, FiaError>((ssim(&outputs[i], &references[i])?, psnr(&outputs[i], &references[i])?))
        })
        .into_iter()
        .collect::<Result<_>>()?;
        metrics.insert("ssim".into(), MetricSummary::from_samples(pairs.iter().map(|p| p.0).collect()));
        metrics.insert("psnr".into(), MetricSummary::from_samples(pairs.iter().map(|p| p.1).collect()));
        let ta = extractor.token_maps(&out_small)?;
        let tb = extractor.token_maps(&ref_small)?;
        let lp = ta
            .iter()
            .zip(&tb)
            .map(|(p, q)| lpips_proxy_tokens(p, q))
            .collect::<Result<Vec<_>>>()?;
        metrics.insert("lpips_proxy".into(), MetricSummary::from_samples(lp));
    }
    Ok(MetricReport {
        setting,
        interpolation: interp,
        extractor_id: extractor.id(),
        n: outputs.len(),
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(Array3::from_fn(3, h, w, |_, _, _| rng.random_range(0.0..1.0)), ValueRange::Unit).unwrap()
    }

    #[test]
    fn ssim_self_is_one() {
        let x = random_image(1, 20, 16);
        assert_eq!(ssim(&x, &x).unwrap(), 1.0);
    }

    #[test]
    fn ssim_inverse_binary_is_negative() {
        let x = ImageTensor::new(
            Array3::from_fn(1, 16, 16, |_, y, x| ((x / 4 + y / 4) % 2) as f32),
            ValueRange::Unit,
        )
        .unwrap();
        let inv = ImageTensor::new(x.array().map(|v| 1.0 - v), ValueRange::Unit).unwrap();
        assert!(ssim(&x, &inv).unwrap() < 0.0);
    }

    #[test]
    fn psnr_identical_is_infinite() {
        let x = random_image(2, 8, 8);
        assert_eq!(psnr(&x, &x).unwrap(), f64::INFINITY);
    }

    #[test]
    fn frechet_identical_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<Vec<f64>> = (0..50).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        assert!(frechet_distance(&a, &a).unwrap() <= 1e-3);
    }

    #[test]
    fn frechet_rejects_single_row() {
        assert!(frechet_distance(&[vec![1.0]], &[vec![1.0], vec![2.0]]).is_err());
    }

    #[test]
    fn report_json_marks_infinity() {
        let x = random_image(4, 32, 24);
        let ex = FeatureExtractor::standard().unwrap();
        let set = vec![x.clone(), random_image(5, 32, 24), random_image(6, 32, 24)];
        let r = evaluate(&set, &set, Setting::Paired, Interpolation::Bilinear, &ex).unwrap();
        let j = r.to_json();
        assert_eq!(j["psnr"]["mean"], json!("inf"));
        assert_eq!(j["ssim"]["mean"], json!(1.0));
        assert_eq!(j["interpolation"], json!("bilinear"));
        let u = evaluate(&set, &set, Setting::Unpaired, Interpolation::Cubic, &ex).unwrap();
        assert!(u.get("ssim").is_none() && u.get("psnr").is_none() && u.get("lpips_proxy").is_none());
    }
}
