//! Noise schedule, the ε-prediction objective, DDIM sampling and the joint
//! training harness.
//!
//! Randomness is keyed by `(seed, step)`: every training step draws its batch
//! indices, time steps and noise from a ChaCha8 stream selected by the step
//! number, so a resumed run replays exactly the draws of an uninterrupted one.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::config::{ModelConfig, ScheduleConfig, Variant};
use crate::data_model::{Array3, DenseFlow, ImageTensor, TryOnSample, ValueRange};
use crate::denoising_model::{assemble_input, build_architecture, mask_to_latent, skeleton_to_latent, FiaModel};
use crate::error::{invalid, shape_err, FiaError, Result};
use crate::flow_guider::{estimate_flows, resize_flow, warp_image, FlowInputs, FlowSource};
use crate::latent_codec::{tensor_to_arrays, LatentCodec};
use crate::nn::{stack_chw, ParamStore};
use crate::optim::{AdamW, AdamWConfig};

/// Namespaces updated by joint training. `flow_guider/` and `codec/` are
/// frozen and never enter the trainable store.
pub const TRAINABLE_PREFIXES: [&str; 4] = ["denoiser/", "garment_net/", "fia/", "spatial_guider/"];

pub fn is_trainable(name: &str) -> bool {
    TRAINABLE_PREFIXES.iter().any(|p| name.starts_with(p))
}

/// Linear β schedule over `T` steps; time steps are 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return invalid("schedule needs at least two steps");
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return invalid(format!("betas must satisfy 0 < {beta_start} < {beta_end} < 1"));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let mut prod = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                prod *= 1.0 - b;
                prod
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    pub fn from_config(c: &ScheduleConfig) -> Result<Self> {
        Self::linear(c.train_steps, c.beta_start, c.beta_end)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return invalid(format!("time step {t} outside [1, {}]", self.steps()));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.betas[t - 1])
    }

    /// `ᾱ_t`; `ᾱ_0 = 1` by convention.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    /// `√ᾱ_t·x_0 + √(1−ᾱ_t)·ε` per batch item.
    pub fn add_noise(&self, x0: &Tensor, t: &[usize], eps: &Tensor) -> Result<Tensor> {
        let (a, b) = self.coefficients(x0, t)?;
        Ok((x0.broadcast_mul(&a)? + eps.broadcast_mul(&b)?)?)
    }

    /// Inverse of [`NoiseSchedule::add_noise`] given the noise.
    pub fn recover_x0(&self, x_t: &Tensor, t: &[usize], eps: &Tensor) -> Result<Tensor> {
        let (a, b) = self.coefficients(x_t, t)?;
        Ok((x_t - eps.broadcast_mul(&b)?)?.broadcast_div(&a)?)
    }

    fn coefficients(&self, x: &Tensor, t: &[usize]) -> Result<(Tensor, Tensor)> {
        let b = x.dim(0)?;
        if t.len() != b {
            return shape_err(format!("{} time steps for a batch of {b}", t.len()));
        }
        let mut sa = Vec::with_capacity(b);
        let mut sb = Vec::with_capacity(b);
        for &ti in t {
            self.check(ti)?;
            let ab = self.alpha_bars[ti - 1];
            sa.push(ab.sqrt());
            sb.push((1.0 - ab).sqrt());
        }
        let mut shape = vec![b];
        shape.extend(std::iter::repeat_n(1, x.rank() - 1));
        let dev = x.device();
        Ok((
            Tensor::from_vec(sa, shape.as_slice(), dev)?.to_dtype(x.dtype())?,
            Tensor::from_vec(sb, shape.as_slice(), dev)?.to_dtype(x.dtype())?,
        ))
    }

    /// Evenly spaced DDIM time steps, descending, ending at 1.
    pub fn ddim_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        if steps < 1 {
            return invalid("sampling needs at least one step");
        }
        if steps > self.steps() {
            return invalid(format!("{steps} sampling steps exceed the {} schedule steps", self.steps()));
        }
        let mut ts: Vec<usize> = (0..steps).map(|i| 1 + i * self.steps() / steps).collect();
        ts.reverse();
        Ok(ts)
    }
}

/// Everything a sample contributes to training or sampling, precomputed at
/// latent resolution with the frozen codec and flow guider.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub sample_id: String,
    /// Latent of the target (paired samples only).
    pub x0: Option<Array3>,
    pub x_m: Array3,
    pub mask_lat: Array3,
    pub skeleton_lat: Array3,
    pub x_g: Array3,
    pub flow: DenseFlow,
    /// Latent of the garment warped by the flow, for `concat_input`.
    pub warped_garment: Option<Array3>,
    pub garment: ImageTensor,
    pub person: ImageTensor,
    pub mask: Vec<f32>,
}

/// Encodes samples for `config`; the warped garment latent is only built
/// for the `concat_input` variant.
pub fn prepare_samples(
    samples: &[TryOnSample],
    codec: &LatentCodec,
    flow: &FlowSource,
    config: &ModelConfig,
) -> Result<Vec<PreparedSample>> {
    let f = codec.factor();
    if f != config.codec_factor {
        return Err(FiaError::Config(format!(
            "codec factor {f} does not match config factor {}",
            config.codec_factor
        )));
    }
    let latent = config.latent_size();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(32) {
        let inputs: Vec<FlowInputs> = chunk.iter().map(FlowInputs::from_sample).collect();
        let flows = estimate_flows(&inputs, flow, latent)?;
        let masked: Vec<ImageTensor> = chunk.iter().map(|s| s.masked_person()).collect();
        let x_m = tensor_to_arrays(&codec.encode_batch(&masked.iter().collect::<Vec<_>>())?)?;
        let x_g = tensor_to_arrays(&codec.encode_batch(&chunk.iter().map(|s| &s.garment).collect::<Vec<_>>())?)?;
        let x0 = if chunk.iter().all(|s| s.target.is_some()) {
            let t: Vec<&ImageTensor> = chunk.iter().map(|s| s.target.as_ref().expect("paired")).collect();
            Some(tensor_to_arrays(&codec.encode_batch(&t)?)?)
        } else {
            None
        };
        let warped = if config.variant == Variant::ConcatInput {
            let (h, w) = config.image_size;
            let imgs = chunk
                .iter()
                .zip(&flows)
                .map(|(s, fl)| warp_image(&s.garment, &resize_flow(fl, h, w)?))
                .collect::<Result<Vec<_>>>()?;
            Some(tensor_to_arrays(&codec.encode_batch(&imgs.iter().collect::<Vec<_>>())?)?)
        } else {
            None
        };
        for (i, s) in chunk.iter().enumerate() {
            let x0_i = match (&x0, &s.target) {
                (Some(v), _) => Some(v[i].clone()),
                (None, Some(t)) => Some(tensor_to_arrays(&codec.encode_batch(&[t])?)?.remove(0)),
                (None, None) => None,
            };
            out.push(PreparedSample {
                sample_id: s.sample_id.clone(),
                x0: x0_i,
                x_m: x_m[i].clone(),
                mask_lat: mask_to_latent(&s.mask, f)?,
                skeleton_lat: skeleton_to_latent(&s.skeleton, f),
                x_g: x_g[i].clone(),
                flow: flows[i].clone(),
                warped_garment: warped.as_ref().map(|w| w[i].clone()),
                garment: s.garment.clone(),
                person: s.person.clone(),
                mask: s.mask.data().to_vec(),
            });
        }
    }
    Ok(out)
}

fn stack(arrays: &[&Array3], dtype: DType) -> Result<Tensor> {
    let first = arrays.first().ok_or_else(|| FiaError::InvalidInput("empty batch".into()))?;
    let [c, h, w] = first.shape();
    let items: Vec<&[f32]> = arrays.iter().map(|a| a.data()).collect();
    stack_chw(&items, c, h, w, dtype, &Device::Cpu)
}

/// ChaCha8 stream for training step `step` under `seed`.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Random draws of one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDraws {
    pub indices: Vec<usize>,
    pub timesteps: Vec<usize>,
    pub noise: Vec<f32>,
}

pub fn draw_step(seed: u64, step: u64, n: usize, batch: usize, t_max: usize, latent_len: usize) -> StepDraws {
    let mut rng = step_rng(seed, step);
    let indices = if batch <= n {
        rand::seq::index::sample(&mut rng, n, batch).into_vec()
    } else {
        (0..batch).map(|_| rng.random_range(0..n)).collect()
    };
    let timesteps = (0..batch).map(|_| rng.random_range(1..=t_max)).collect();
    let noise = normal_vec(&mut rng, batch * latent_len);
    StepDraws {
        indices,
        timesteps,
        noise,
    }
}

/// Codec, flow guider and the jointly trained model with its optimizer.
pub struct TryOnPipeline {
    pub config: ModelConfig,
    pub codec: LatentCodec,
    pub flow: FlowSource,
    pub store: ParamStore,
    pub model: FiaModel,
    pub optimizer: AdamW,
    pub schedule: NoiseSchedule,
    /// Completed training steps.
    pub step: u64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct LogRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

pub fn adamw_config(config: &ModelConfig) -> AdamWConfig {
    let t = &config.training;
    AdamWConfig {
        lr: t.learning_rate,
        beta1: t.beta1,
        beta2: t.beta2,
        eps: t.eps,
        weight_decay: t.weight_decay,
    }
}

impl TryOnPipeline {
    /// Fresh model around an already prepared (frozen) codec and flow source.
    pub fn new(config: &ModelConfig, codec: LatentCodec, flow: FlowSource) -> Result<Self> {
        if codec.latent_channels() != config.latent_channels {
            return Err(FiaError::Config(format!(
                "codec has {} latent channels, config {}",
                codec.latent_channels(),
                config.latent_channels
            )));
        }
        let (store, model) = build_architecture(config, DType::F32)?;
        Ok(Self {
            config: config.clone(),
            codec,
            flow,
            store,
            model,
            optimizer: AdamW::new(adamw_config(config)),
            schedule: NoiseSchedule::from_config(&config.schedule)?,
            step: 0,
        })
    }

    pub fn prepare(&self, samples: &[TryOnSample]) -> Result<Vec<PreparedSample>> {
        prepare_samples(samples, &self.codec, &self.flow, &self.config)
    }

    fn latent_len(&self) -> usize {
        let (h, w) = self.config.latent_size();
        self.config.latent_channels * h * w
    }

    /// Input tensor and conditioning for `batch` with noisy latents `x_t`.
    fn forward_eps(&self, batch: &[&PreparedSample], x_t: &Tensor, t: &[f64], dtype: DType) -> Result<Tensor> {
        let x_m = stack(&batch.iter().map(|p| &p.x_m).collect::<Vec<_>>(), dtype)?;
        let mask = stack(&batch.iter().map(|p| &p.mask_lat).collect::<Vec<_>>(), dtype)?;
        let skel = stack(&batch.iter().map(|p| &p.skeleton_lat).collect::<Vec<_>>(), dtype)?;
        let extra = match self.config.variant {
            Variant::ConcatInput => {
                let w = batch
                    .iter()
                    .map(|p| {
                        p.warped_garment
                            .as_ref()
                            .ok_or_else(|| FiaError::InvalidInput("sample prepared without warped garment".into()))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Some(stack(&w, dtype)?)
            }
            _ => None,
        };
        let input = assemble_input(x_t, &x_m, &mask, &skel, extra.as_ref())?;
        let x_g = stack(&batch.iter().map(|p| &p.x_g).collect::<Vec<_>>(), dtype)?;
        let flows: Vec<DenseFlow> = batch.iter().map(|p| p.flow.clone()).collect();
        let garments: Vec<&ImageTensor> = batch.iter().map(|p| &p.garment).collect();
        let variant = self.config.variant;
        let cond = self.model.condition(&x_g, &flows, &garments, variant)?;
        self.model.predict_noise(&input, t, &cond, variant)
    }

    /// Per-sample mean squared ε error and the batch loss tensor.
    pub fn loss(&self, batch: &[&PreparedSample], timesteps: &[usize], noise: &[f32]) -> Result<(Tensor, Vec<f64>)> {
        let x0s = batch
            .iter()
            .map(|p| {
                p.x0.as_ref()
                    .ok_or_else(|| FiaError::InvalidInput(format!("sample {} has no target", p.sample_id)))
            })
            .collect::<Result<Vec<_>>>()?;
        let x0 = stack(&x0s, DType::F32)?;
        let eps = Tensor::from_vec(noise.to_vec(), x0.shape(), &Device::Cpu)?;
        let x_t = self.schedule.add_noise(&x0, timesteps, &eps)?;
        let t: Vec<f64> = timesteps.iter().map(|&t| t as f64).collect();
        let eps_hat = self.forward_eps(batch, &x_t, &t, DType::F32)?;
        let per = (eps_hat - &eps)?.sqr()?.flatten_from(1)?.mean(1)?;
        let per_vals: Vec<f64> = per.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        Ok((per.mean_all()?, per_vals))
    }

    /// One AdamW update on the batch drawn for the current step.
    pub fn training_step(&mut self, data: &[PreparedSample]) -> Result<f64> {
        if data.is_empty() {
            return invalid("training set is empty");
        }
        let draws = draw_step(
            self.config.seed,
            self.step,
            data.len(),
            self.config.training.batch_size,
            self.schedule.steps(),
            self.latent_len(),
        );
        let batch: Vec<&PreparedSample> = draws.indices.iter().map(|&i| &data[i]).collect();
        let (loss, _) = self.loss(&batch, &draws.timesteps, &draws.noise)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(FiaError::Divergence(format!(
                "loss {value} at step {} (batch {:?}, t {:?})",
                self.step, draws.indices, draws.timesteps
            )));
        }
        let grads = loss.backward()?;
        self.optimizer.step(&self.store, &grads, is_trainable)?;
        self.step += 1;
        Ok(value)
    }

    /// Trains until `until_step`, appending JSON-lines records every
    /// `log_every` steps and checkpointing every `checkpoint_every` steps.
    pub fn train(&mut self, data: &[PreparedSample], until_step: u64, opts: &TrainOptions) -> Result<Vec<LogRecord>> {
        let start = Instant::now();
        let mut log_file = match &opts.log_path {
            Some(p) => Some(std::fs::OpenOptions::new().create(true).append(true).open(p)?),
            None => None,
        };
        let mut records = Vec::new();
        while self.step < until_step {
            let loss = self.training_step(data)?;
            let rec = LogRecord {
                step: self.step,
                loss,
                lr: self.optimizer.config.lr,
                wall_ms: start.elapsed().as_millis() as u64,
            };
            if opts.log_every > 0 && (self.step % opts.log_every as u64 == 0 || self.step == until_step) {
                if let Some(f) = log_file.as_mut() {
                    writeln!(f, "{}", serde_json::to_string(&rec)?)?;
                }
                log::info!("step {} loss {:.5}", rec.step, rec.loss);
            }
            records.push(rec);
            if let Some(dir) = &opts.checkpoint_dir {
                if opts.checkpoint_every > 0 && self.step % opts.checkpoint_every as u64 == 0 {
                    crate::checkpoint::save(self, &dir.join(format!("step_{:07}.ckpt", self.step)))?;
                }
            }
        }
        Ok(records)
    }

    /// DDIM (η = 0) from pure noise, then decode and re-composite the
    /// preserved region from the person image. Returns unit-range images.
    pub fn sample(&self, items: &[PreparedSample], steps: usize, seed: u64) -> Result<Vec<ImageTensor>> {
        let ts = self.schedule.ddim_timesteps(steps)?;
        let mut outs = Vec::with_capacity(items.len());
        for (chunk_i, chunk) in items.chunks(self.config.training.batch_size.max(1)).enumerate() {
            let batch: Vec<&PreparedSample> = chunk.iter().collect();
            let b = batch.len();
            let (h, w) = self.config.latent_size();
            let c = self.config.latent_channels;
            let mut noise = Vec::with_capacity(b * c * h * w);
            for i in 0..b {
                let mut rng = step_rng(seed, (chunk_i * self.config.training.batch_size.max(1) + i) as u64);
                noise.extend(normal_vec(&mut rng, c * h * w));
            }
            let mut x = Tensor::from_vec(noise, (b, c, h, w), &Device::Cpu)?;
            for (k, &t) in ts.iter().enumerate() {
                let t_prev = ts.get(k + 1).copied().unwrap_or(0);
                let ab = self.schedule.alpha_bar(t)?;
                let ab_prev = self.schedule.alpha_bar(t_prev)?;
                let eps = self.forward_eps(&batch, &x, &vec![t as f64; b], DType::F32)?.detach();
                let x0 = ((&x - (&eps * (1.0 - ab).sqrt())?)? / ab.sqrt())?;
                x = ((x0 * ab_prev.sqrt())? + (eps * (1.0 - ab_prev).sqrt())?)?.detach();
            }
            let decoded = self.codec.decode_batch(&x)?;
            for (p, img) in batch.iter().zip(decoded) {
                outs.push(composite(&img.to_unit(), &p.person, &p.mask)?);
            }
        }
        Ok(outs)
    }
}

/// `mask·generated + (1 − mask)·person`, exact where the mask is 0.
pub fn composite(generated: &ImageTensor, person: &ImageTensor, mask: &[f32]) -> Result<ImageTensor> {
    let (c, h, w) = (person.channels(), person.height(), person.width());
    if generated.array().shape() != [c, h, w] || mask.len() != h * w {
        return shape_err("composite inputs disagree in shape");
    }
    let g = generated.to_unit();
    let p = person.to_unit();
    let arr = Array3::from_fn(c, h, w, |ci, y, x| {
        if mask[y * w + x] >= 0.5 {
            g.array().get(ci, y, x)
        } else {
            p.array().get(ci, y, x)
        }
    });
    ImageTensor::new(arr, ValueRange::Unit)
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub log_every: usize,
    pub checkpoint_every: usize,
    pub log_path: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainOptions {
    pub fn for_run(config: &ModelConfig, out: &Path) -> Self {
        Self {
            log_every: config.training.log_every,
            checkpoint_every: config.training.checkpoint_every,
            log_path: Some(out.join("train_log.jsonl")),
            checkpoint_dir: Some(out.join("checkpoints")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::FlowSourceKind;
    use crate::flow_guider::FlowEstimator;
    use crate::synthetic_data::generate_dataset;

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap()
    }

    #[test]
    fn schedule_is_monotone() {
        let s = schedule();
        for t in 1..s.steps() {
            assert!(s.beta(t + 1).unwrap() > s.beta(t).unwrap());
            assert!(s.alpha_bar(t + 1).unwrap() < s.alpha_bar(t).unwrap());
        }
        assert!(s.alpha_bar(1000).unwrap() < 0.01);
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
    }

    #[test]
    fn add_noise_range_and_inversion() {
        let s = schedule();
        let x0 = Tensor::new(&[[0.3f64, -0.7], [0.1, 0.9]], &Device::Cpu).unwrap();
        let eps = Tensor::new(&[[1.0f64, -2.0], [0.5, 0.25]], &Device::Cpu).unwrap();
        assert!(s.add_noise(&x0, &[0, 5], &eps).is_err());
        assert!(s.add_noise(&x0, &[1, 1001], &eps).is_err());
        let xt = s.add_noise(&x0, &[3, 999], &eps).unwrap();
        let back = s.recover_x0(&xt, &[3, 999], &eps).unwrap();
        let d = (back - &x0).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d < 1e-5);
    }

    #[test]
    fn ddim_grid() {
        let s = schedule();
        assert!(s.ddim_timesteps(0).is_err());
        let ts = s.ddim_timesteps(50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 981);
        assert_eq!(*ts.last().unwrap(), 1);
        assert_eq!(s.ddim_timesteps(1).unwrap(), vec![1]);
    }

    #[test]
    fn step_draws_depend_only_on_seed_and_step() {
        let a = draw_step(7, 3, 10, 4, 1000, 6);
        let b = draw_step(7, 3, 10, 4, 1000, 6);
        let c = draw_step(7, 4, 10, 4, 1000, 6);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let mut idx = a.indices.clone();
        idx.sort();
        idx.dedup();
        assert_eq!(idx.len(), 4);
    }

    fn tiny_pipeline(config: &ModelConfig, n: usize) -> (TryOnPipeline, Vec<PreparedSample>) {
        let samples = generate_dataset(n, config, 3).unwrap();
        let codec = LatentCodec::for_config(config, 1).unwrap();
        let flow = match config.flow_source {
            FlowSourceKind::Learned => FlowSource::Learned(Box::new(FlowEstimator::new(config, 2).unwrap())),
            FlowSourceKind::Zero => FlowSource::Zero,
            FlowSourceKind::Oracle => FlowSource::Oracle,
        };
        let p = TryOnPipeline::new(config, codec, flow).unwrap();
        let data = p.prepare(&samples).unwrap();
        (p, data)
    }

    #[test]
    fn loss_is_mean_of_per_sample_errors() {
        let (p, data) = tiny_pipeline(&ModelConfig::tiny(), 3);
        let batch: Vec<&PreparedSample> = data.iter().collect();
        let draws = draw_step(0, 0, 3, 3, 1000, p.latent_len());
        let (loss, per) = p.loss(&batch, &draws.timesteps, &draws.noise).unwrap();
        let l = loss.to_scalar::<f32>().unwrap() as f64;
        let mean = per.iter().sum::<f64>() / per.len() as f64;
        assert!((l - mean).abs() <= 1e-7, "{l} vs {mean}");
    }

    #[test]
    fn frozen_namespaces_do_not_move() {
        let config = ModelConfig {
            codec_factor: 2,
            latent_channels: 4,
            flow_source: FlowSourceKind::Learned,
            ..ModelConfig::tiny()
        };
        let (mut p, data) = tiny_pipeline(&config, 4);
        let codec_before = p.codec.store().unwrap().snapshot().unwrap();
        let flow_before = p.flow.estimator().unwrap().store().snapshot().unwrap();
        let trained_before = p.store.snapshot().unwrap();
        p.training_step(&data).unwrap();
        assert_eq!(p.codec.store().unwrap().snapshot().unwrap(), codec_before);
        assert_eq!(p.flow.estimator().unwrap().store().snapshot().unwrap(), flow_before);
        assert_ne!(p.store.snapshot().unwrap(), trained_before);
        assert!(p.store.names().all(|n| is_trainable(n)));
    }

    #[test]
    fn sampling_is_deterministic_and_keeps_unmasked_pixels() {
        let (p, data) = tiny_pipeline(&ModelConfig::tiny(), 2);
        assert!(p.sample(&data, 0, 1).is_err());
        let a = p.sample(&data, 2, 5).unwrap();
        let b = p.sample(&data, 2, 5).unwrap();
        assert_eq!(a, b);
        let mut cleared = data[0].clone();
        cleared.mask.iter_mut().for_each(|m| *m = 0.0);
        let out = p.sample(&[cleared.clone()], 2, 5).unwrap();
        assert_eq!(out[0].data(), cleared.person.to_unit().data());
    }
}
