//! High-level garment tokens `S`: a toy patch transformer trained jointly with
//! the denoiser, or any registered external encoder.

use candle_core::{DType, Device, Tensor};

use crate::config::ModelConfig;
use crate::data_model::ImageTensor;
use crate::error::{shape_err, FiaError, Result};
use crate::latent_codec::images_to_tensor;
use crate::nn::{multi_head_attention, Init, LayerNorm, Linear, ParamStore, Scope};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialEncoderConfig {
    pub image_size: (usize, usize),
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Adds a fixed 2-D sinusoidal encoding to patch tokens.
    pub positional: bool,
}

impl SpatialEncoderConfig {
    pub fn from_model(config: &ModelConfig) -> Self {
        Self {
            image_size: config.image_size,
            patch: config.patch_size,
            dim: config.spatial_dim,
            heads: config.head_count,
            blocks: 2,
            positional: true,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_size.0 / self.patch, self.image_size.1 / self.patch)
    }

    /// Patches plus one class slot.
    pub fn token_count(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw + 1
    }
}

/// Token sequence `[n_s, d_s]` for one garment.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialTokens {
    data: Vec<f32>,
    count: usize,
    dim: usize,
}

impl SpatialTokens {
    pub fn new(data: Vec<f32>, count: usize, dim: usize) -> Result<Self> {
        if data.len() != count * dim {
            return shape_err(format!("{} values cannot form {count} tokens of width {dim}", data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FiaError::InvalidInput("spatial tokens contain non-finite values".into()));
        }
        Ok(Self { data, count, dim })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn token(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.data.clone(), (1, self.count, self.dim), &Device::Cpu)?)
    }
}

/// 2-D sinusoidal encoding: the first half of the channels encode the row,
/// the second half the column.
pub fn positional_encoding_2d(gh: usize, gw: usize, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let quarter = half / 2;
    let mut out = vec![0f32; gh * gw * dim];
    for y in 0..gh {
        for x in 0..gw {
            let row = &mut out[(y * gw + x) * dim..(y * gw + x + 1) * dim];
            for i in 0..quarter {
                let freq = (-(10_000f64).ln() * i as f64 / quarter.max(1) as f64).exp();
                row[i] = (y as f64 * freq).sin() as f32;
                row[quarter + i] = (y as f64 * freq).cos() as f32;
                row[half + i] = (x as f64 * freq).sin() as f32;
                row[half + quarter + i] = (x as f64 * freq).cos() as f32;
            }
        }
    }
    out
}

struct EncoderBlock {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl EncoderBlock {
    fn new(s: &mut Scope, d: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(&mut s.pp("ln1"), d)?,
            q: Linear::new(&mut s.pp("q"), d, d, false)?,
            k: Linear::new(&mut s.pp("k"), d, d, false)?,
            v: Linear::new(&mut s.pp("v"), d, d, false)?,
            o: Linear::new(&mut s.pp("o"), d, d, true)?,
            ln2: LayerNorm::new(&mut s.pp("ln2"), d)?,
            fc1: Linear::new(&mut s.pp("fc1"), d, 2 * d, true)?,
            fc2: Linear::new(&mut s.pp("fc2"), 2 * d, d, true)?,
        })
    }

    fn forward(&self, x: &Tensor, heads: usize) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let a = multi_head_attention(&self.q.forward(&h)?, &self.k.forward(&h)?, &self.v.forward(&h)?, heads)?;
        let x = (x + self.o.forward(&a)?)?;
        let h = self.fc2.forward(&self.fc1.forward(&self.ln2.forward(&x)?)?.gelu()?)?;
        Ok((x + h)?)
    }
}

/// Patch linear embedding, class token, pre-LN transformer blocks.
pub struct SpatialEncoder {
    cfg: SpatialEncoderConfig,
    embed: Linear,
    cls: Tensor,
    blocks: Vec<EncoderBlock>,
    ln_out: LayerNorm,
}

impl SpatialEncoder {
    /// Creates (or reuses) parameters under `<scope>/`.
    pub fn new(s: &mut Scope, cfg: SpatialEncoderConfig) -> Result<Self> {
        let (h, w) = cfg.image_size;
        if cfg.patch == 0 || h < cfg.patch || w < cfg.patch || h % cfg.patch != 0 || w % cfg.patch != 0 {
            return Err(FiaError::Config(format!(
                "image {h}x{w} cannot be tiled by {}-pixel patches",
                cfg.patch
            )));
        }
        if cfg.dim % cfg.heads != 0 || cfg.dim % 4 != 0 {
            return Err(FiaError::Config(format!(
                "spatial width {} must be divisible by 4 and by {} heads",
                cfg.dim, cfg.heads
            )));
        }
        let d = cfg.dim;
        let embed = Linear::new(&mut s.pp("patch_embed"), 3 * cfg.patch * cfg.patch, d, true)?;
        let cls = s.param("cls_token", &[1, 1, d], Init::Uniform(0.02))?;
        let blocks = (0..cfg.blocks)
            .map(|i| EncoderBlock::new(&mut s.pp(&format!("block{i}")), d))
            .collect::<Result<_>>()?;
        let ln_out = LayerNorm::new(&mut s.pp("ln_out"), d)?;
        Ok(Self {
            cfg,
            embed,
            cls,
            blocks,
            ln_out,
        })
    }

    /// Standalone encoder with its own parameter store under `spatial_guider/`.
    pub fn standalone(cfg: SpatialEncoderConfig, dtype: DType, seed: u64) -> Result<(ParamStore, Self)> {
        let mut store = ParamStore::new(dtype, seed);
        let enc = Self::new(&mut store.scope("spatial_guider"), cfg)?;
        Ok((store, enc))
    }

    pub fn config(&self) -> &SpatialEncoderConfig {
        &self.cfg
    }

    /// `[b, 3, H, W]` → `[b, gh·gw, 3·p·p]`, patches in row-major order.
    pub fn patchify(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if (h, w) != self.cfg.image_size || c != 3 {
            return shape_err(format!(
                "spatial encoder expects [b, 3, {}, {}], got [{b}, {c}, {h}, {w}]",
                self.cfg.image_size.0, self.cfg.image_size.1
            ));
        }
        let p = self.cfg.patch;
        let (gh, gw) = (h / p, w / p);
        Ok(x
            .reshape((b, c, gh, p, gw, p))?
            .permute((0, 2, 4, 1, 3, 5))?
            .contiguous()?
            .reshape((b, gh * gw, c * p * p))?)
    }

    /// Content embeddings of the patches, before positional encoding.
    pub fn patch_embeddings(&self, x: &Tensor) -> Result<Tensor> {
        self.embed.forward(&self.patchify(x)?)
    }

    /// `[b, 3, H, W]` signed images → `[b, n_s, d_s]`, class token first.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tok = self.patch_embeddings(x)?;
        let (b, n, d) = tok.dims3()?;
        if self.cfg.positional {
            let (gh, gw) = self.cfg.grid();
            let pe = Tensor::from_vec(positional_encoding_2d(gh, gw, d), (1, n, d), x.device())?.to_dtype(tok.dtype())?;
            tok = tok.broadcast_add(&pe)?;
        }
        let cls = self.cls.broadcast_as((b, 1, d))?;
        let mut h = Tensor::cat(&[&cls, &tok], 1)?;
        for blk in &self.blocks {
            h = blk.forward(&h, self.cfg.heads)?;
        }
        self.ln_out.forward(&h)
    }

    pub fn encode(&self, garment: &ImageTensor) -> Result<SpatialTokens> {
        let x = images_to_tensor(&[garment], self.cls.dtype())?;
        let t = self.forward(&x)?.to_dtype(DType::F32)?;
        let (_, n, d) = t.dims3()?;
        SpatialTokens::new(t.flatten_all()?.to_vec1::<f32>()?, n, d)
    }
}

/// A frozen third-party encoder producing `[n_s, d_s]` tokens per image.
pub trait ExternalSpatialEncoder: Send + Sync {
    fn id(&self) -> &str;
    fn token_dim(&self) -> usize;
    fn encode(&self, garment: &ImageTensor) -> Result<SpatialTokens>;
}

pub enum SpatialSource {
    /// Toy encoder whose parameters live in the main store and train jointly.
    Toy(SpatialEncoder),
    External(Box<dyn ExternalSpatialEncoder>),
    /// No spatial tokens; the spatial attention stage is skipped.
    None,
}

impl SpatialSource {
    /// Tokens for a batch `[b, n_s, d_s]`, or `None` when there is no source.
    /// The toy encoder output stays attached to the graph.
    pub fn tokens(&self, garments: &[&ImageTensor], x_signed: Option<&Tensor>, dtype: DType) -> Result<Option<Tensor>> {
        match self {
            SpatialSource::None => Ok(None),
            SpatialSource::Toy(enc) => {
                let x = match x_signed {
                    Some(x) => x.to_dtype(dtype)?,
                    None => images_to_tensor(garments, dtype)?,
                };
                Ok(Some(enc.forward(&x)?))
            }
            SpatialSource::External(ext) => {
                let toks = garments.iter().map(|g| ext.encode(g)).collect::<Result<Vec<_>>>()?;
                let first = toks
                    .first()
                    .ok_or_else(|| FiaError::InvalidInput("empty garment batch".into()))?;
                let (n, d) = (first.count(), first.dim());
                let mut data = Vec::with_capacity(toks.len() * n * d);
                for t in &toks {
                    if (t.count(), t.dim()) != (n, d) {
                        return shape_err("external encoder returned ragged token sequences");
                    }
                    data.extend_from_slice(t.data());
                }
                Ok(Some(Tensor::from_vec(data, (toks.len(), n, d), &Device::Cpu)?.to_dtype(dtype)?))
            }
        }
    }
}

/// Tokens for one garment from the toy encoder.
pub fn encode_spatial(garment: &ImageTensor, encoder: &SpatialEncoder) -> Result<SpatialTokens> {
    let (h, w) = (garment.height(), garment.width());
    let p = encoder.config().patch;
    if h < p || w < p {
        return shape_err(format!("image {h}x{w} is smaller than the {p}-pixel patch"));
    }
    encoder.encode(garment)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::{Array3, ValueRange};

    fn cfg(positional: bool) -> SpatialEncoderConfig {
        SpatialEncoderConfig {
            image_size: (16, 24),
            patch: 8,
            dim: 16,
            heads: 4,
            blocks: 2,
            positional,
        }
    }

    #[test]
    fn token_count_matches_grid() {
        let (_, enc) = SpatialEncoder::standalone(cfg(true), DType::F32, 1).unwrap();
        let g = ImageTensor::new(Array3::zeros(3, 16, 24), ValueRange::Unit).unwrap();
        let t = encode_spatial(&g, &enc).unwrap();
        assert_eq!(t.count(), 2 * 3 + 1);
        assert_eq!(t.dim(), 16);
    }

    #[test]
    fn zero_image_without_positions_gives_identical_patch_tokens() {
        let (_, enc) = SpatialEncoder::standalone(cfg(false), DType::F32, 1).unwrap();
        let g = ImageTensor::new(Array3::zeros(3, 16, 24), ValueRange::Signed).unwrap();
        let t = encode_spatial(&g, &enc).unwrap();
        for i in 2..t.count() {
            assert_eq!(t.token(i), t.token(1));
        }
    }

    #[test]
    fn rejects_image_smaller_than_patch() {
        let c = SpatialEncoderConfig {
            image_size: (8, 8),
            patch: 8,
            ..cfg(true)
        };
        let (_, enc) = SpatialEncoder::standalone(c, DType::F32, 1).unwrap();
        let small = ImageTensor::new_unchecked(Array3::zeros(3, 4, 4), ValueRange::Unit);
        assert!(encode_spatial(&small, &enc).is_err());
    }
}
