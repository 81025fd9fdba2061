//! The inpainting denoiser with FIA blocks at its attention sites, plus the
//! garment net and spatial guider it is trained with.
//!
//! Input channels are concatenated in the fixed order
//! `[x_t | x_m | mask | skeleton]` (`2·c_z + 4` channels), followed by the
//! warped garment latent for the `concat_input` variant.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};

use crate::config::{ModelConfig, SiteId, SpatialSourceKind, Variant};
use crate::data_model::{AgnosticMask, Array3, DenseFlow, ImageTensor, SkeletonMap};
use crate::error::{shape_err, FiaError, Result};
use crate::fia_attention::{FiaSite, SiteFlow};
use crate::garment_net::{init_from_denoiser, FeatureBundle, GarmentNet};
use crate::nn::ParamStore;
use crate::resample::area_downsample;
use crate::spatial_guider::{SpatialEncoder, SpatialEncoderConfig, SpatialSource};
use crate::unet::{SiteHook, UNet};

/// Mask at latent resolution: block mean over `f × f`, re-binarized at 0.5.
pub fn mask_to_latent(mask: &AgnosticMask, factor: usize) -> Result<Array3> {
    let a = Array3::new(mask.data().to_vec(), 1, mask.height(), mask.width())?;
    Ok(area_downsample(&a, factor).map(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
}

/// Skeleton at latent resolution by block mean (unit range kept).
pub fn skeleton_to_latent(skeleton: &SkeletonMap, factor: usize) -> Array3 {
    area_downsample(skeleton.image().array(), factor)
}

/// Concatenates `[x_t | x_m | mask | skeleton (| extra)]` along channels.
pub fn assemble_input(
    x_t: &Tensor,
    x_m: &Tensor,
    mask: &Tensor,
    skeleton: &Tensor,
    extra: Option<&Tensor>,
) -> Result<Tensor> {
    let (b, _, h, w) = x_t.dims4()?;
    let mut parts = vec![x_t, x_m, mask, skeleton];
    if let Some(e) = extra {
        parts.push(e);
    }
    for (name, p) in ["x_m", "mask", "skeleton", "warped garment"].iter().zip(&parts[1..]) {
        let (pb, _, ph, pw) = p.dims4()?;
        if (pb, ph, pw) != (b, h, w) {
            return shape_err(format!(
                "{name} is [{pb}, _, {ph}, {pw}] but x_t is [{b}, _, {h}, {w}]; downsample to the latent grid first"
            ));
        }
    }
    if mask.dim(1)? != 1 || skeleton.dim(1)? != 3 {
        return shape_err("mask must have 1 channel and skeleton 3");
    }
    Ok(Tensor::cat(&parts, 1)?)
}

/// Everything the denoiser consumes besides its input tensor and time step.
pub struct Conditioning {
    pub bundle: FeatureBundle,
    /// One entry per attention site, config order.
    pub flows: Vec<SiteFlow>,
    /// `[b, n_s, d_s]`, or `None` to skip the spatial stage.
    pub spatial: Option<Tensor>,
}

pub struct FiaModel {
    pub config: ModelConfig,
    pub denoiser: UNet,
    pub garment_net: GarmentNet,
    pub fia: Vec<FiaSite>,
    pub spatial: SpatialSource,
}

struct FiaHook<'a> {
    model: &'a FiaModel,
    cond: &'a Conditioning,
    variant: Variant,
}

impl SiteHook for FiaHook<'_> {
    fn at_site(&mut self, site: SiteId, k: usize, tokens: Tensor, _grid: (usize, usize)) -> Result<Tensor> {
        let entry = &self.cond.bundle.entries[k];
        debug_assert_eq!(entry.site, site);
        self.model.fia[k].forward(&tokens, &entry.tokens, &self.cond.flows[k], self.cond.spatial.as_ref(), self.variant)
    }
}

impl FiaModel {
    /// Builds every trainable component, creating parameters in `store` (or
    /// reusing those already present). External spatial encoders are attached
    /// later with [`FiaModel::set_spatial_source`].
    pub fn build(config: &ModelConfig, store: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        let c_z = config.latent_channels;
        let denoiser = UNet::new(&mut store.scope("denoiser"), config, config.denoiser_in_channels(), c_z)?;
        let garment_net = GarmentNet::new(&mut store.scope("garment_net"), config)?;
        let mut fia = Vec::new();
        for (k, &site) in config.attention_sites.iter().enumerate() {
            let width = config.site_width(site);
            fia.push(FiaSite::new(
                &mut store.scope(&format!("fia/site{k}")),
                width,
                config.spatial_dim,
                config.head_count,
            )?);
        }
        let spatial = match config.spatial_source {
            SpatialSourceKind::Toy => SpatialSource::Toy(SpatialEncoder::new(
                &mut store.scope("spatial_guider"),
                SpatialEncoderConfig::from_model(config),
            )?),
            SpatialSourceKind::External | SpatialSourceKind::None => SpatialSource::None,
        };
        Ok(Self {
            config: config.clone(),
            denoiser,
            garment_net,
            fia,
            spatial,
        })
    }

    pub fn set_spatial_source(&mut self, source: SpatialSource) {
        self.spatial = source;
    }

    /// `(h, w)` token grid of each attention site, config order.
    pub fn site_grids(&self) -> Vec<(usize, usize)> {
        let (h, w) = self.config.latent_size();
        self.config
            .attention_sites
            .iter()
            .map(|s| {
                let l = s.level(self.config.depth());
                (h >> l, w >> l)
            })
            .collect()
    }

    /// Per-site flow tokens for latent-resolution `flows`.
    pub fn site_flows(&self, flows: &[DenseFlow], dtype: DType) -> Result<Vec<SiteFlow>> {
        self.site_grids()
            .into_iter()
            .map(|g| SiteFlow::new(flows, g, g, dtype))
            .collect()
    }

    /// Garment features, flow tokens and spatial tokens for a batch.
    /// `garments` are the unit-range garment images; spatial tokens are only
    /// computed when `variant` uses them.
    pub fn condition(&self, x_g: &Tensor, flows: &[DenseFlow], garments: &[&ImageTensor], variant: Variant) -> Result<Conditioning> {
        let dtype = x_g.dtype();
        let bundle = self.garment_net.extract_garment_features(x_g)?;
        let flows = self.site_flows(flows, dtype)?;
        let spatial = if variant.uses_spatial() {
            self.spatial.tokens(garments, None, dtype)?
        } else {
            None
        };
        Ok(Conditioning { bundle, flows, spatial })
    }

    /// ε̂ for the assembled input `[b, C, h, w]` at time steps `t`.
    pub fn predict_noise(&self, input: &Tensor, t: &[f64], cond: &Conditioning, variant: Variant) -> Result<Tensor> {
        let (b, c, h, w) = input.dims4()?;
        if (h, w) != self.config.latent_size() {
            return shape_err(format!(
                "input grid {h}x{w} does not match latent size {:?}",
                self.config.latent_size()
            ));
        }
        let is_concat = variant == Variant::ConcatInput;
        if is_concat != (self.config.variant == Variant::ConcatInput) {
            return Err(FiaError::Config(format!(
                "variant {variant} needs a model built for {} input channels",
                if is_concat { "concat" } else { "non-concat" }
            )));
        }
        if c != self.config.denoiser_in_channels() {
            return shape_err(format!("input has {c} channels, model expects {}", self.config.denoiser_in_channels()));
        }
        if t.len() != b {
            return shape_err(format!("{} time steps for a batch of {b}", t.len()));
        }
        let sites = &self.config.attention_sites;
        if cond.bundle.len() != sites.len() || cond.flows.len() != sites.len() {
            return shape_err(format!(
                "conditioning has {} bundle entries and {} flows for {} sites",
                cond.bundle.len(),
                cond.flows.len(),
                sites.len()
            ));
        }
        for (k, (entry, &site)) in cond.bundle.entries.iter().zip(sites).enumerate() {
            let grid = self.site_grids()[k];
            if entry.site != site || entry.grid != grid || entry.tokens.dims3()? != (b, grid.0 * grid.1, self.config.site_width(site)) {
                return shape_err(format!("garment bundle entry {k} does not match site {site}"));
            }
        }
        let mut hook = FiaHook {
            model: self,
            cond,
            variant,
        };
        self.denoiser
            .forward(input, t, &mut hook)?
            .ok_or_else(|| FiaError::Shape("denoiser pass ended early".into()))
    }
}

/// Fresh model for `config` with the garment net initialized from the
/// denoiser weights.
pub fn build_architecture(config: &ModelConfig, dtype: DType) -> Result<(ParamStore, FiaModel)> {
    let mut store = ParamStore::new(dtype, config.seed);
    let model = FiaModel::build(config, &mut store)?;
    init_from_denoiser(&store, &store)?;
    Ok((store, model))
}

/// Scalar parameter count per top-level namespace.
pub fn parameter_counts(store: &ParamStore) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for (name, var) in store.iter() {
        let ns = name.split('/').next().unwrap_or("").to_string();
        *out.entry(ns).or_insert(0) += var.elem_count();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(shape: &[usize], seed: u64, dtype: DType) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f32> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
    }

    fn flows(b: usize, h: usize, w: usize) -> Vec<DenseFlow> {
        (0..b)
            .map(|i| DenseFlow::from_fn(h, w, |y, x| (0.01 * (x + i) as f32, -0.02 * y as f32)).unwrap())
            .collect()
    }

    struct Fixture {
        model: FiaModel,
        input: Tensor,
        cond: Conditioning,
        t: Vec<f64>,
    }

    fn fixture(config: &ModelConfig) -> Fixture {
        let (_, model) = build_architecture(config, DType::F64).unwrap();
        let (h, w) = config.latent_size();
        let c_z = config.latent_channels;
        let b = 2;
        let input = randn(&[b, config.denoiser_in_channels(), h, w], 1, DType::F64);
        let x_g = randn(&[b, c_z, h, w], 2, DType::F64);
        let garments: Vec<ImageTensor> = (0..b)
            .map(|i| {
                let (ih, iw) = config.image_size;
                let a = Array3::from_fn(3, ih, iw, |c, y, x| ((c + y * 3 + x * 7 + i) % 11) as f32 / 10.0);
                ImageTensor::new(a, crate::data_model::ValueRange::Unit).unwrap()
            })
            .collect();
        let cond = model
            .condition(&x_g, &flows(b, h, w), &garments.iter().collect::<Vec<_>>(), config.variant)
            .unwrap();
        Fixture {
            model,
            input,
            cond,
            t: vec![10.0, 700.0],
        }
    }

    fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn input_channel_counts() {
        let t = |c| Tensor::zeros((1, c, 4, 3), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(assemble_input(&t(4), &t(4), &t(1), &t(3), None).unwrap().dim(1).unwrap(), 12);
        assert_eq!(assemble_input(&t(3), &t(3), &t(1), &t(3), None).unwrap().dim(1).unwrap(), 10);
        let big_mask = Tensor::zeros((1, 1, 8, 6), DType::F32, &Device::Cpu).unwrap();
        assert!(assemble_input(&t(4), &t(4), &big_mask, &t(3), None).is_err());
    }

    #[test]
    fn mask_downsampling_rebinarizes() {
        let mut data = vec![0.0; 4 * 4];
        for v in data.iter_mut().take(6) {
            *v = 1.0;
        }
        let m = AgnosticMask::new(data, 4, 4).unwrap();
        let l = mask_to_latent(&m, 2).unwrap();
        // top-left block fully set, top-right block half set
        assert_eq!(l.data(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn architecture_counts() {
        let desk = ModelConfig::desk();
        let (store, model) = build_architecture(&desk, DType::F32).unwrap();
        assert_eq!(model.fia.len(), 3);
        let small = ModelConfig {
            unet_widths: vec![8, 16, 32],
            ..ModelConfig::desk()
        };
        let (small_store, _) = build_architecture(&small, DType::F32).unwrap();
        assert!(small_store.parameter_count("") < store.parameter_count(""));
        let counts = parameter_counts(&store);
        assert!(counts.contains_key("denoiser") && counts.contains_key("fia"));
        let bad = ModelConfig {
            head_count: 3,
            ..ModelConfig::desk()
        };
        assert!(build_architecture(&bad, DType::F32).is_err());
    }

    #[test]
    fn deterministic_with_latent_shaped_output() {
        let config = ModelConfig::tiny();
        let f = fixture(&config);
        let a = f.model.predict_noise(&f.input, &f.t, &f.cond, Variant::Fia).unwrap();
        let b = f.model.predict_noise(&f.input, &f.t, &f.cond, Variant::Fia).unwrap();
        assert_eq!(max_abs(&a, &b), 0.0);
        let (h, w) = config.latent_size();
        assert_eq!(a.dims(), &[2, config.latent_channels, h, w]);
    }

    #[test]
    fn fresh_model_fia_equals_plain_cross_attention() {
        let f = fixture(&ModelConfig::tiny());
        let a = f.model.predict_noise(&f.input, &f.t, &f.cond, Variant::Fia).unwrap();
        let b = f
            .model
            .predict_noise(&f.input, &f.t, &f.cond, Variant::PlainCrossAttention)
            .unwrap();
        assert!(max_abs(&a, &b) <= 1e-7);
    }

    #[test]
    fn channel_order_matters() {
        let f = fixture(&ModelConfig::tiny());
        let c = f.input.dim(1).unwrap();
        let reversed: Vec<u32> = (0..c as u32).rev().collect();
        let idx = Tensor::new(reversed.as_slice(), &Device::Cpu).unwrap();
        let permuted = f.input.index_select(&idx, 1).unwrap();
        let a = f.model.predict_noise(&f.input, &f.t, &f.cond, Variant::Fia).unwrap();
        let b = f.model.predict_noise(&permuted, &f.t, &f.cond, Variant::Fia).unwrap();
        assert!(max_abs(&a, &b) > 1e-6);
    }

    #[test]
    fn mismatched_bundle_and_variant_are_rejected() {
        let config = ModelConfig::tiny();
        let f = fixture(&config);
        let mut short = Conditioning {
            bundle: f.cond.bundle.clone(),
            flows: f.cond.flows.clone(),
            spatial: f.cond.spatial.clone(),
        };
        short.bundle.entries.pop();
        assert!(f.model.predict_noise(&f.input, &f.t, &short, Variant::Fia).is_err());
        assert!(f.model.predict_noise(&f.input, &f.t, &f.cond, Variant::ConcatInput).is_err());
    }
}
