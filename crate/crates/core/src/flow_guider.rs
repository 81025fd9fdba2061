//! Dense warp flow: the backward bilinear warp operator, flow resizing, and
//! the flow sources (ground-truth pass-through, a small learned coarse-to-fine
//! estimator, or all-zero).
//!
//! Flows follow the backward convention: `warp(x, F)(p) = x(p + F(p))`, with
//! displacements in normalized units (1.0 spans the full image side) and zero
//! padding outside the source.

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::data_model::{AgnosticMask, Array3, DenseFlow, ImageTensor, SkeletonMap, TryOnSample, MAX_FLOW_COMPONENT};
use crate::error::{invalid, shape_err, FiaError, Result};
use crate::nn::{upsample2x, Conv2d, ParamStore};
use crate::optim::{AdamW, AdamWConfig};
use crate::resample::{resize, Interpolation};

/// Bilinear sample of channel `c` at fractional pixel position `(sy, sx)`;
/// taps outside the array contribute zero.
#[inline]
pub fn bilinear_zero_pad(src: &Array3, c: usize, sy: f64, sx: f64) -> f32 {
    let (h, w) = (src.height() as isize, src.width() as isize);
    let y0 = sy.floor();
    let x0 = sx.floor();
    let ay = sy - y0;
    let ax = sx - x0;
    let (y0, x0) = (y0 as isize, x0 as isize);
    let tap = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h || x >= w {
            0.0
        } else {
            src.get(c, y as usize, x as usize) as f64
        }
    };
    let mut acc = 0.0;
    // Skipping zero-weight taps keeps integer-aligned samples exact.
    if (1.0 - ay) * (1.0 - ax) != 0.0 {
        acc += (1.0 - ay) * (1.0 - ax) * tap(y0, x0);
    }
    if ax != 0.0 && 1.0 - ay != 0.0 {
        acc += (1.0 - ay) * ax * tap(y0, x0 + 1);
    }
    if ay != 0.0 && 1.0 - ax != 0.0 {
        acc += ay * (1.0 - ax) * tap(y0 + 1, x0);
    }
    if ay != 0.0 && ax != 0.0 {
        acc += ay * ax * tap(y0 + 1, x0 + 1);
    }
    acc as f32
}

/// Backward-warps every channel of `src` by `flow` (same spatial size).
pub fn warp(src: &Array3, flow: &DenseFlow) -> Result<Array3> {
    let (h, w) = (src.height(), src.width());
    if (flow.height(), flow.width()) != (h, w) {
        return shape_err(format!(
            "flow {}x{} does not match array {h}x{w}; resize the flow first",
            flow.height(),
            flow.width()
        ));
    }
    Ok(Array3::from_fn(src.channels(), h, w, |c, y, x| {
        let (dx, dy) = flow.at(y, x);
        let sx = x as f64 + dx as f64 * w as f64;
        let sy = y as f64 + dy as f64 * h as f64;
        bilinear_zero_pad(src, c, sy, sx)
    }))
}

/// Warps an image, resizing the flow to the image resolution when needed.
pub fn warp_image(image: &ImageTensor, flow: &DenseFlow) -> Result<ImageTensor> {
    let flow = resize_flow(flow, image.height(), image.width())?;
    let out = warp(image.array(), &flow)?;
    ImageTensor::clamped(out, image.range())
}

/// Bilinear resize of both flow components. Normalized displacements keep
/// their meaning at any resolution, so values are not rescaled.
pub fn resize_flow(flow: &DenseFlow, height: usize, width: usize) -> Result<DenseFlow> {
    if height == 0 || width == 0 {
        return invalid("resize_flow target must be at least 1x1");
    }
    if (flow.height(), flow.width()) == (height, width) {
        return Ok(flow.clone());
    }
    let planar = Array3::from_fn(2, flow.height(), flow.width(), |c, y, x| {
        let (dx, dy) = flow.at(y, x);
        if c == 0 {
            dx
        } else {
            dy
        }
    });
    let r = resize(&planar, height, width, Interpolation::Bilinear);
    DenseFlow::from_fn(height, width, |y, x| (r.get(0, y, x), r.get(1, y, x)))
}

/// The small trainable estimator: `/2` and `/4` feature levels, a coarse flow
/// head at `/4` and a residual refinement at `/2`.
pub struct FlowEstimator {
    store: ParamStore,
    enc1: [Conv2d; 2],
    enc2: [Conv2d; 3],
    coarse_head: Conv2d,
    refine: [Conv2d; 2],
    latent_size: (usize, usize),
    image_size: (usize, usize),
}

const ESTIMATOR_IN: usize = 7;

impl FlowEstimator {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let (h, w) = config.image_size;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(FiaError::Config(format!("flow estimator needs image sides divisible by 4, got {h}x{w}")));
        }
        let mut store = ParamStore::new(DType::F32, seed);
        let mut s = store.scope("flow_guider");
        let enc1 = [
            Conv2d::new(&mut s.pp("enc1_0"), ESTIMATOR_IN, 16, 3, 2)?,
            Conv2d::new(&mut s.pp("enc1_1"), 16, 16, 3, 1)?,
        ];
        let enc2 = [
            Conv2d::new(&mut s.pp("enc2_0"), 16, 32, 3, 2)?,
            Conv2d::new(&mut s.pp("enc2_1"), 32, 32, 3, 1)?,
            Conv2d::new(&mut s.pp("enc2_2"), 32, 32, 3, 1)?,
        ];
        let coarse_head = Conv2d::new(&mut s.pp("coarse_head"), 32, 2, 3, 1)?;
        let refine = [
            Conv2d::new(&mut s.pp("refine_0"), 16 + 32 + 2, 16, 3, 1)?,
            Conv2d::new(&mut s.pp("refine_1"), 16, 2, 3, 1)?,
        ];
        Ok(Self {
            store,
            enc1,
            enc2,
            coarse_head,
            refine,
            latent_size: config.latent_size(),
            image_size: config.image_size,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Returns `(coarse at /4, refined at /2)`, both `[b, 2, ·, ·]`.
    fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let f1 = self.enc1[1].forward(&self.enc1[0].forward(x)?.silu()?)?.silu()?;
        let mut f2 = self.enc2[0].forward(&f1)?.silu()?;
        f2 = (self.enc2[1].forward(&f2)?.silu()? + &f2)?;
        f2 = (self.enc2[2].forward(&f2)?.silu()? + &f2)?;
        let coarse = self.coarse_head.forward(&f2)?;
        let up = upsample2x(&coarse)?;
        let joined = Tensor::cat(&[&f1, &upsample2x(&f2)?, &up], 1)?;
        let residual = self.refine[1].forward(&self.refine[0].forward(&joined)?.silu()?)?;
        Ok((coarse, (up + residual)?))
    }

    fn input_tensor(&self, items: &[FlowInputs<'_>]) -> Result<Tensor> {
        let (h, w) = self.image_size;
        let mut data = Vec::with_capacity(items.len() * ESTIMATOR_IN * h * w);
        for it in items {
            if (it.garment.height(), it.garment.width()) != (h, w)
                || (it.mask.height(), it.mask.width()) != (h, w)
            {
                return shape_err("flow estimator input does not match the configured image size");
            }
            data.extend(it.garment.to_signed().data());
            data.extend(it.skeleton.image().data().iter().map(|v| v * 2.0 - 1.0));
            data.extend(it.mask.data().iter().map(|v| v * 2.0 - 1.0));
        }
        Ok(Tensor::from_vec(data, (items.len(), ESTIMATOR_IN, h, w), self.store.device())?)
    }

    pub fn predict(&self, items: &[FlowInputs<'_>]) -> Result<Vec<DenseFlow>> {
        let x = self.input_tensor(items)?;
        let (_, fine) = self.forward(&x)?;
        let (b, _, fh, fw) = fine.dims4()?;
        let v = fine.flatten_all()?.to_vec1::<f32>()?;
        let (lh, lw) = self.latent_size;
        (0..b)
            .map(|i| {
                let blk = &v[i * 2 * fh * fw..(i + 1) * 2 * fh * fw];
                let f = DenseFlow::from_fn(fh, fw, |y, x| {
                    let clip = |a: f32| a.clamp(-MAX_FLOW_COMPONENT, MAX_FLOW_COMPONENT);
                    (clip(blk[y * fw + x]), clip(blk[fh * fw + y * fw + x]))
                })?;
                resize_flow(&f, lh, lw)
            })
            .collect()
    }
}

/// Inputs consumed by a flow source.
#[derive(Clone, Copy)]
pub struct FlowInputs<'a> {
    pub garment: &'a ImageTensor,
    pub skeleton: &'a SkeletonMap,
    pub mask: &'a AgnosticMask,
    pub flow_gt: Option<&'a DenseFlow>,
}

impl<'a> FlowInputs<'a> {
    pub fn from_sample(s: &'a TryOnSample) -> Self {
        Self {
            garment: &s.garment,
            skeleton: &s.skeleton,
            mask: &s.mask,
            flow_gt: s.flow_gt.as_ref(),
        }
    }
}

pub enum FlowSource {
    /// Passes the ground-truth flow through unchanged.
    Oracle,
    /// Frozen learned estimator.
    Learned(Box<FlowEstimator>),
    /// All-zero flow (ablation).
    Zero,
}

impl FlowSource {
    pub fn kind_name(&self) -> &'static str {
        match self {
            FlowSource::Oracle => "oracle",
            FlowSource::Learned(_) => "learned",
            FlowSource::Zero => "zero",
        }
    }

    pub fn estimator(&self) -> Option<&FlowEstimator> {
        match self {
            FlowSource::Learned(e) => Some(e),
            _ => None,
        }
    }
}

/// Flow at latent resolution `latent_size` for each input.
pub fn estimate_flows(
    items: &[FlowInputs<'_>],
    source: &FlowSource,
    latent_size: (usize, usize),
) -> Result<Vec<DenseFlow>> {
    match source {
        FlowSource::Zero => Ok(items.iter().map(|_| DenseFlow::zeros(latent_size.0, latent_size.1)).collect()),
        FlowSource::Oracle => items
            .iter()
            .map(|it| {
                let f = it
                    .flow_gt
                    .ok_or_else(|| FiaError::InvalidInput("oracle flow source needs flow_gt".into()))?;
                if (f.height(), f.width()) == latent_size {
                    Ok(f.clone())
                } else {
                    resize_flow(f, latent_size.0, latent_size.1)
                }
            })
            .collect(),
        FlowSource::Learned(est) => {
            if est.latent_size != latent_size {
                return shape_err("learned flow estimator was built for a different latent size");
            }
            est.predict(items)
        }
    }
}

pub fn estimate_flow(inputs: FlowInputs<'_>, source: &FlowSource, latent_size: (usize, usize)) -> Result<DenseFlow> {
    Ok(estimate_flows(&[inputs], source, latent_size)?.remove(0))
}

#[derive(Debug, Clone)]
pub struct FlowPretrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Fraction of the dataset held out for validation.
    pub validation_fraction: f64,
}

impl Default for FlowPretrainOptions {
    fn default() -> Self {
        Self {
            steps: 5_000,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
            validation_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FlowPretrainReport {
    pub steps: usize,
    pub final_loss: f64,
    pub validation_epe: f64,
}

fn flow_to_planar(flow: &DenseFlow) -> Vec<f32> {
    let n = flow.height() * flow.width();
    let mut out = vec![0f32; 2 * n];
    for (i, d) in flow.data().chunks_exact(2).enumerate() {
        out[i] = d[0];
        out[n + i] = d[1];
    }
    out
}

fn target_tensor(samples: &[&TryOnSample], h: usize, w: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(samples.len() * 2 * h * w);
    for s in samples {
        let gt = s
            .flow_gt
            .as_ref()
            .ok_or_else(|| FiaError::InvalidInput("flow estimator training needs flow_gt".into()))?;
        data.extend(flow_to_planar(&resize_flow(gt, h, w)?));
    }
    Ok(Tensor::from_vec(data, (samples.len(), 2, h, w), &candle_core::Device::Cpu)?)
}

/// Mean endpoint error between `[b, 2, h, w]` tensors (smoothed at zero).
fn endpoint_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let d2 = (pred - target)?.sqr()?.sum_keepdim(1)?;
    Ok((d2 + 1e-8)?.sqrt()?.mean_all()?)
}

/// Mean endpoint error of `source` over `samples`, at latent resolution.
pub fn mean_endpoint_error(samples: &[TryOnSample], source: &FlowSource, latent_size: (usize, usize)) -> Result<f64> {
    let mut total = 0.0;
    for chunk in samples.chunks(32) {
        let items: Vec<_> = chunk.iter().map(FlowInputs::from_sample).collect();
        let flows = estimate_flows(&items, source, latent_size)?;
        for (f, s) in flows.iter().zip(chunk) {
            let gt = resize_flow(s.flow_gt.as_ref().expect("checked"), latent_size.0, latent_size.1)?;
            total += f.mean_endpoint_error(&gt)? as f64;
        }
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Trains a fresh estimator against `flow_gt` with an endpoint-error loss on
/// both pyramid levels and returns it frozen.
pub fn pretrain_flow_estimator(
    dataset: &[TryOnSample],
    config: &ModelConfig,
    opts: &FlowPretrainOptions,
) -> Result<(FlowSource, FlowPretrainReport)> {
    if dataset.is_empty() {
        return invalid("flow estimator pretraining needs a nonempty dataset");
    }
    if dataset.iter().any(|s| s.flow_gt.is_none()) {
        return invalid("flow estimator pretraining needs flow_gt on every sample");
    }
    let est = FlowEstimator::new(config, opts.seed)?;
    let n_val = ((dataset.len() as f64 * opts.validation_fraction).round() as usize).min(dataset.len() - 1);
    let (val, train) = dataset.split_at(n_val);
    let (h, w) = config.image_size;
    let mut opt = AdamW::new(AdamWConfig {
        lr: opts.learning_rate,
        weight_decay: 0.0,
        ..Default::default()
    });
    let mut final_loss = f64::NAN;
    for step in 0..opts.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let batch: Vec<&TryOnSample> = (0..opts.batch_size.min(train.len()))
            .map(|_| &train[rng.random_range(0..train.len())])
            .collect();
        let items: Vec<_> = batch.iter().map(|s| FlowInputs::from_sample(s)).collect();
        let x = est.input_tensor(&items)?;
        let (coarse, fine) = est.forward(&x)?;
        let loss = (endpoint_loss(&fine, &target_tensor(&batch, h / 2, w / 2)?)?
            + (endpoint_loss(&coarse, &target_tensor(&batch, h / 4, w / 4)?)? * 0.5)?)?;
        final_loss = loss.to_scalar::<f32>()? as f64;
        if !final_loss.is_finite() {
            return Err(FiaError::Divergence(format!(
                "flow estimator loss became {final_loss} at step {step}"
            )));
        }
        let grads = loss.backward()?;
        opt.step(est.store(), &grads, |_| true)?;
        if step % 500 == 0 {
            log::info!("flow estimator step {step}: loss {final_loss:.5}");
        }
    }
    let source = FlowSource::Learned(Box::new(est));
    let val_set = if val.is_empty() { train } else { val };
    let validation_epe = mean_endpoint_error(val_set, &source, config.latent_size())?;
    log::info!("flow estimator validation endpoint error {validation_epe:.5}");
    Ok((
        source,
        FlowPretrainReport {
            steps: opts.steps,
            final_loss,
            validation_epe,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> Array3 {
        Array3::from_fn(c, h, w, |ch, y, x| (ch * 1000 + y * 37 + x * 3) as f32 * 0.01)
    }

    #[test]
    fn zero_flow_is_identity() {
        let a = ramp(3, 6, 8);
        assert_eq!(warp(&a, &DenseFlow::zeros(6, 8)).unwrap(), a);
    }

    #[test]
    fn constant_half_width_shift_matches_index_shift() {
        let (h, w) = (5, 8);
        let a = ramp(2, h, w);
        let out = warp(&a, &DenseFlow::constant(h, w, 0.5, 0.0).unwrap()).unwrap();
        // independent index-shift oracle
        for c in 0..2 {
            for y in 0..h {
                for x in 0..w {
                    let expect = if x + w / 2 < w { a.get(c, y, x + w / 2) } else { 0.0 };
                    assert_eq!(out.get(c, y, x), expect);
                }
            }
        }
    }

    #[test]
    fn subpixel_sample_uses_bilinear_weights() {
        let a = Array3::new(vec![1.0, 2.0, 3.0, 4.0], 1, 2, 2).unwrap();
        // from pixel (0,0), a (0.25, 0.25) normalized shift lands on (0.5, 0.5)
        let flow = DenseFlow::from_fn(2, 2, |y, x| {
            if (y, x) == (0, 0) {
                (0.25, 0.25)
            } else {
                (0.0, 0.0)
            }
        })
        .unwrap();
        let out = warp(&a, &flow).unwrap();
        // brute-force weights over the four corners
        let (sy, sx) = (0.5f64, 0.5f64);
        let mut expect = 0.0;
        for yy in 0..2 {
            for xx in 0..2 {
                let wgt = (1.0 - (sy - yy as f64).abs()) * (1.0 - (sx - xx as f64).abs());
                expect += wgt * a.get(0, yy, xx) as f64;
            }
        }
        assert!((out.get(0, 0, 0) as f64 - expect).abs() < 1e-6);
        assert_eq!(expect, 2.5);
    }

    #[test]
    fn resize_constant_and_identity() {
        let f = DenseFlow::constant(6, 4, 0.1, -0.2).unwrap();
        assert_eq!(resize_flow(&f, 6, 4).unwrap(), f);
        let r = resize_flow(&f, 13, 9).unwrap();
        for d in r.data().chunks_exact(2) {
            assert!((d[0] - 0.1).abs() < 1e-6 && (d[1] + 0.2).abs() < 1e-6);
        }
    }

    #[test]
    fn ramp_round_trip_interior() {
        let (h, w) = (8, 10);
        let f = DenseFlow::from_fn(h, w, |y, x| (0.01 * x as f32, -0.02 * y as f32)).unwrap();
        let up = resize_flow(&f, 2 * h, 2 * w).unwrap();
        let back = resize_flow(&up, h, w).unwrap();
        let mut worst = 0f32;
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let (a, b) = (f.at(y, x), back.at(y, x));
                worst = worst.max((a.0 - b.0).abs()).max((a.1 - b.1).abs());
            }
        }
        assert!(worst <= 1e-6, "worst {worst}");
    }

    #[test]
    fn resize_rejects_empty_target() {
        assert!(resize_flow(&DenseFlow::zeros(2, 2), 0, 3).is_err());
    }
}
