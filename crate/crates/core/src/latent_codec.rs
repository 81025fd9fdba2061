//! Image ↔ latent codec: either the exact identity (`f = 1`, `c_z = 3`) or a
//! small convolutional autoencoder trained once on reconstruction and then
//! frozen.

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::data_model::{Array3, ImageTensor, TryOnSample, ValueRange};
use crate::error::{invalid, shape_err, FiaError, Result};
use crate::nn::{upsample2x, Conv2d, ParamStore};
use crate::optim::{AdamW, AdamWConfig};

/// Latent array `[c_z, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent(Array3);

impl Latent {
    pub fn new(array: Array3) -> Result<Self> {
        if array.data().iter().any(|v| !v.is_finite()) {
            return invalid("latent contains non-finite values");
        }
        Ok(Self(array))
    }

    /// Skips the finiteness check (used to exercise decode's own check).
    pub fn new_unchecked(array: Array3) -> Self {
        Self(array)
    }

    pub fn array(&self) -> &Array3 {
        &self.0
    }

    pub fn into_array(self) -> Array3 {
        self.0
    }

    pub fn shape(&self) -> [usize; 3] {
        self.0.shape()
    }
}

/// Tensor `[b, c, h, w]` of the images in signed range.
pub fn images_to_tensor(images: &[&ImageTensor], dtype: DType) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| FiaError::InvalidInput("empty image batch".into()))?;
    let (c, h, w) = (first.channels(), first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for im in images {
        if (im.channels(), im.height(), im.width()) != (c, h, w) {
            return shape_err("images in a batch must share one shape");
        }
        data.extend_from_slice(im.to_signed().data());
    }
    Ok(Tensor::from_vec(data, (images.len(), c, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Splits `[b, c, h, w]` into per-item arrays.
pub fn tensor_to_arrays(t: &Tensor) -> Result<Vec<Array3>> {
    let (b, c, h, w) = t.dims4()?;
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    (0..b)
        .map(|i| Array3::new(v[i * c * h * w..(i + 1) * c * h * w].to_vec(), c, h, w))
        .collect()
}

const AE_WIDTH: [usize; 2] = [16, 32];

/// Encoder: full-resolution stem, then one stride-2 stage per factor of two.
/// Decoder mirrors it with nearest upsampling.
pub struct TinyAutoencoder {
    store: ParamStore,
    enc_in: Conv2d,
    enc_down: Vec<(Conv2d, Conv2d)>,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_up: Vec<(Conv2d, Conv2d)>,
    dec_out: Conv2d,
    factor: usize,
    latent_channels: usize,
}

impl TinyAutoencoder {
    pub fn new(factor: usize, latent_channels: usize, seed: u64) -> Result<Self> {
        if !factor.is_power_of_two() {
            return Err(FiaError::Config(format!("codec factor {factor} is not a power of two")));
        }
        let stages = factor.trailing_zeros() as usize;
        let mut store = ParamStore::new(DType::F32, seed);
        let mut s = store.scope("codec");
        let wide = |i: usize| if i == 0 { AE_WIDTH[0] } else { AE_WIDTH[1] };
        let enc_in = Conv2d::new(&mut s.pp("enc_in"), 3, AE_WIDTH[0], 3, 1)?;
        let mut enc_down = Vec::new();
        for i in 0..stages {
            enc_down.push((
                Conv2d::new(&mut s.pp(&format!("enc_down{i}_a")), wide(i), AE_WIDTH[1], 3, 2)?,
                Conv2d::new(&mut s.pp(&format!("enc_down{i}_b")), AE_WIDTH[1], AE_WIDTH[1], 3, 1)?,
            ));
        }
        let c_last = wide(stages);
        let enc_out = Conv2d::new(&mut s.pp("enc_out"), c_last, latent_channels, 3, 1)?;
        let dec_in = Conv2d::new(&mut s.pp("dec_in"), latent_channels, c_last, 3, 1)?;
        let mut dec_up = Vec::new();
        for i in (0..stages).rev() {
            dec_up.push((
                Conv2d::new(&mut s.pp(&format!("dec_up{i}_a")), AE_WIDTH[1], wide(i), 3, 1)?,
                Conv2d::new(&mut s.pp(&format!("dec_up{i}_b")), wide(i), wide(i), 3, 1)?,
            ));
        }
        let dec_out = Conv2d::new(&mut s.pp("dec_out"), AE_WIDTH[0], 3, 3, 1)?;
        Ok(Self {
            store,
            enc_in,
            enc_down,
            enc_out,
            dec_in,
            dec_up,
            dec_out,
            factor,
            latent_channels,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn encode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.enc_in.forward(x)?.silu()?;
        for (a, b) in &self.enc_down {
            h = a.forward(&h)?.silu()?;
            h = (b.forward(&h)?.silu()? + &h)?;
        }
        self.enc_out.forward(&h)
    }

    /// Unclamped reconstruction.
    pub fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        let mut h = self.dec_in.forward(z)?.silu()?;
        for (a, b) in &self.dec_up {
            h = a.forward(&upsample2x(&h)?)?.silu()?;
            h = (b.forward(&h)?.silu()? + &h)?;
        }
        self.dec_out.forward(&h)
    }
}

pub enum LatentCodec {
    Identity,
    Learned(Box<TinyAutoencoder>),
}

impl LatentCodec {
    /// Identity for the identity configuration, otherwise a freshly
    /// initialized (untrained) autoencoder.
    pub fn for_config(config: &ModelConfig, seed: u64) -> Result<Self> {
        if config.is_identity_codec() {
            Ok(LatentCodec::Identity)
        } else {
            Ok(LatentCodec::Learned(Box::new(TinyAutoencoder::new(
                config.codec_factor,
                config.latent_channels,
                seed,
            )?)))
        }
    }

    pub fn factor(&self) -> usize {
        match self {
            LatentCodec::Identity => 1,
            LatentCodec::Learned(ae) => ae.factor,
        }
    }

    pub fn latent_channels(&self) -> usize {
        match self {
            LatentCodec::Identity => 3,
            LatentCodec::Learned(ae) => ae.latent_channels,
        }
    }

    /// Parameters (empty for the identity codec).
    pub fn store(&self) -> Option<&ParamStore> {
        match self {
            LatentCodec::Identity => None,
            LatentCodec::Learned(ae) => Some(&ae.store),
        }
    }

    pub fn store_mut(&mut self) -> Option<&mut ParamStore> {
        match self {
            LatentCodec::Identity => None,
            LatentCodec::Learned(ae) => Some(&mut ae.store),
        }
    }

    fn check_image(&self, h: usize, w: usize) -> Result<()> {
        let f = self.factor();
        if h % f != 0 || w % f != 0 {
            return shape_err(format!("image {h}x{w} not divisible by codec factor {f}"));
        }
        Ok(())
    }

    /// `[b, c_z, h, w]` latents for a batch of images, as `f32`.
    pub fn encode_batch(&self, images: &[&ImageTensor]) -> Result<Tensor> {
        for im in images {
            self.check_image(im.height(), im.width())?;
            if im.channels() != 3 {
                return shape_err("codec expects 3-channel images");
            }
        }
        let x = images_to_tensor(images, DType::F32)?;
        match self {
            LatentCodec::Identity => Ok(x),
            LatentCodec::Learned(ae) => ae.encode_tensor(&x)?.detach().contiguous().map_err(Into::into),
        }
    }

    /// Decodes `[b, c_z, h, w]` into signed-range, clamped images.
    pub fn decode_batch(&self, z: &Tensor) -> Result<Vec<ImageTensor>> {
        let (_, c, _, _) = z.dims4()?;
        if c != self.latent_channels() {
            return shape_err(format!("latent has {c} channels, codec expects {}", self.latent_channels()));
        }
        let z = z.to_dtype(DType::F32)?;
        let check = z.flatten_all()?.to_vec1::<f32>()?;
        if check.iter().any(|v| !v.is_finite()) {
            return invalid("latent contains non-finite values");
        }
        let x = match self {
            LatentCodec::Identity => z,
            LatentCodec::Learned(ae) => ae.decode_tensor(&z)?,
        };
        tensor_to_arrays(&x)?
            .into_iter()
            .map(|a| ImageTensor::clamped(a, ValueRange::Signed))
            .collect()
    }

    pub fn encode(&self, image: &ImageTensor) -> Result<Latent> {
        let z = self.encode_batch(&[image])?;
        Latent::new(tensor_to_arrays(&z)?.remove(0))
    }

    pub fn decode(&self, z: &Latent) -> Result<ImageTensor> {
        let [c, h, w] = z.shape();
        let t = Tensor::from_vec(z.array().data().to_vec(), (1, c, h, w), &Device::Cpu)?;
        Ok(self.decode_batch(&t)?.remove(0))
    }
}

#[derive(Debug, Clone)]
pub struct CodecPretrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the re-encoding consistency term `‖E(D(E(x))) − E(x)‖²`.
    pub consistency_weight: f64,
    pub seed: u64,
    pub validation_fraction: f64,
}

impl Default for CodecPretrainOptions {
    fn default() -> Self {
        Self {
            steps: 2_000,
            batch_size: 16,
            learning_rate: 1e-3,
            consistency_weight: 0.1,
            seed: 0,
            validation_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CodecPretrainReport {
    pub steps: usize,
    pub initial_psnr: f64,
    pub validation_psnr: f64,
}

/// Mean reconstruction PSNR (dB, unit range) of `codec` over `images`.
pub fn reconstruction_psnr(codec: &LatentCodec, images: &[&ImageTensor]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in images.chunks(32) {
        let z = codec.encode_batch(chunk)?;
        let rec = codec.decode_batch(&z)?;
        for (r, x) in rec.iter().zip(chunk) {
            total += crate::metrics::psnr(&r.to_unit(), &x.to_unit())?.min(100.0);
        }
    }
    Ok(total / images.len().max(1) as f64)
}

/// Codec training images: every person and garment image of the dataset.
pub fn codec_images(dataset: &[TryOnSample]) -> Vec<&ImageTensor> {
    dataset.iter().flat_map(|s| [&s.person, &s.garment]).collect()
}

/// Trains the autoencoder for `config` on reconstruction. For the identity
/// configuration this is a no-op returning the identity codec.
pub fn pretrain_autoencoder(
    dataset: &[TryOnSample],
    config: &ModelConfig,
    opts: &CodecPretrainOptions,
) -> Result<(LatentCodec, CodecPretrainReport)> {
    if dataset.is_empty() {
        return invalid("codec pretraining needs a nonempty dataset");
    }
    let codec = LatentCodec::for_config(config, opts.seed)?;
    let images = codec_images(dataset);
    let n_val = ((images.len() as f64 * opts.validation_fraction).round() as usize).clamp(1, images.len());
    let (val, train) = images.split_at(n_val);
    let train = if train.is_empty() { val } else { train };
    let LatentCodec::Learned(ae) = &codec else {
        let psnr = reconstruction_psnr(&codec, val)?;
        return Ok((
            codec,
            CodecPretrainReport {
                steps: 0,
                initial_psnr: psnr,
                validation_psnr: psnr,
            },
        ));
    };
    let initial_psnr = reconstruction_psnr(&codec, val)?;
    log::info!("codec initial validation PSNR {initial_psnr:.2} dB");
    let mut opt = AdamW::new(AdamWConfig {
        lr: opts.learning_rate,
        weight_decay: 0.0,
        ..Default::default()
    });
    for step in 0..opts.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let batch: Vec<&ImageTensor> = (0..opts.batch_size.min(train.len()))
            .map(|_| train[rng.random_range(0..train.len())])
            .collect();
        let x = images_to_tensor(&batch, DType::F32)?;
        let z = ae.encode_tensor(&x)?;
        let rec = ae.decode_tensor(&z)?;
        let mut loss = (&rec - &x)?.sqr()?.mean_all()?;
        if opts.consistency_weight > 0.0 {
            let z2 = ae.encode_tensor(&rec)?;
            loss = (loss + ((z2 - z.detach())?.sqr()?.mean_all()? * opts.consistency_weight)?)?;
        }
        let value = loss.to_scalar::<f32>()?;
        if !value.is_finite() {
            return Err(FiaError::Divergence(format!("codec loss became {value} at step {step}")));
        }
        let grads = loss.backward()?;
        opt.step(ae.store(), &grads, |_| true)?;
        if step % 250 == 0 {
            log::info!("codec step {step}: loss {value:.6}");
        }
    }
    let validation_psnr = reconstruction_psnr(&codec, val)?;
    log::info!("codec validation PSNR {validation_psnr:.2} dB after {} steps", opts.steps);
    Ok((
        codec,
        CodecPretrainReport {
            steps: opts.steps,
            initial_psnr,
            validation_psnr,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Array3::from_fn(3, 16, 12, |_, _, _| (rng.random_range(0..=255u32) as f32) / 255.0);
        ImageTensor::new(a, ValueRange::Unit).unwrap()
    }

    #[test]
    fn identity_round_trip_is_exact() {
        let c = LatentCodec::Identity;
        let x = img(1);
        let z = c.encode(&x).unwrap();
        assert_eq!(z.array().data(), x.to_signed().data());
        assert_eq!(c.decode(&z).unwrap(), x.to_signed());
    }

    #[test]
    fn decode_rejects_nan() {
        let c = LatentCodec::Identity;
        let mut v = vec![0.0; 3 * 8 * 8];
        v[5] = f32::NAN;
        let z = Latent::new_unchecked(Array3::new(v, 3, 8, 8).unwrap());
        assert!(c.decode(&z).is_err());
    }

    #[test]
    fn learned_codec_shapes_and_zero_image() {
        let ae = LatentCodec::Learned(Box::new(TinyAutoencoder::new(2, 4, 0).unwrap()));
        let zero = ImageTensor::new(Array3::zeros(3, 16, 12), ValueRange::Unit).unwrap();
        let z = ae.encode(&zero).unwrap();
        assert_eq!(z.shape(), [4, 8, 6]);
        assert!(z.array().data().iter().all(|v| v.is_finite()));
        let back = ae.decode(&z).unwrap();
        assert_eq!((back.channels(), back.height(), back.width()), (3, 16, 12));
        assert_eq!(ae.encode(&zero).unwrap(), z);
    }

    #[test]
    fn rejects_indivisible_image() {
        let ae = LatentCodec::Learned(Box::new(TinyAutoencoder::new(2, 4, 0).unwrap()));
        let odd = ImageTensor::new(Array3::zeros(3, 9, 12), ValueRange::Unit).unwrap();
        assert!(ae.encode(&odd).is_err());
    }
}
