//! Garment net: a UNet sibling of the denoiser run once, at time step 0, on
//! the garment latent. It records the post-self-attention tokens at every
//! attention site; these are the garment features `G` consumed by the
//! denoiser's FIA blocks.

use candle_core::Tensor;

use crate::config::{ModelConfig, SiteId};
use crate::error::{shape_err, FiaError, Result};
use crate::nn::{ParamStore, Scope};
use crate::unet::{SiteHook, UNet};

/// Time step of the single garment pass.
pub const GARMENT_TIMESTEP: f64 = 0.0;

#[derive(Debug, Clone)]
pub struct BundleEntry {
    pub site: SiteId,
    /// `[b, n_g, d]`.
    pub tokens: Tensor,
    pub grid: (usize, usize),
}

/// Garment tokens for every attention site, in config order.
#[derive(Debug, Clone)]
pub struct FeatureBundle {
    pub entries: Vec<BundleEntry>,
}

impl FeatureBundle {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, site: SiteId) -> Option<&BundleEntry> {
        self.entries.iter().find(|e| e.site == site)
    }

    pub fn detach(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|e| BundleEntry {
                    site: e.site,
                    tokens: e.tokens.detach(),
                    grid: e.grid,
                })
                .collect(),
        }
    }
}

struct TapHook {
    entries: Vec<BundleEntry>,
    wanted: usize,
}

impl SiteHook for TapHook {
    fn at_site(&mut self, site: SiteId, _k: usize, tokens: Tensor, grid: (usize, usize)) -> Result<Tensor> {
        self.entries.push(BundleEntry {
            site,
            tokens: tokens.clone(),
            grid,
        });
        Ok(tokens)
    }

    fn done(&self) -> bool {
        self.entries.len() == self.wanted
    }
}

pub struct GarmentNet {
    pub unet: UNet,
    latent_channels: usize,
}

impl GarmentNet {
    /// Parameters under `<scope>/`; the input convolution takes `c_z` channels.
    pub fn new(s: &mut Scope, config: &ModelConfig) -> Result<Self> {
        Ok(Self {
            unet: UNet::new(s, config, config.latent_channels, config.latent_channels)?,
            latent_channels: config.latent_channels,
        })
    }

    /// One pass over `x_g` `[b, c_z, h, w]`; stops after the last site.
    pub fn extract_garment_features(&self, x_g: &Tensor) -> Result<FeatureBundle> {
        let (b, c, _, _) = x_g.dims4()?;
        if c != self.latent_channels {
            return shape_err(format!("garment latent has {c} channels, expected {}", self.latent_channels));
        }
        let mut hook = TapHook {
            entries: Vec::new(),
            wanted: self.unet.sites.len(),
        };
        if hook.wanted > 0 {
            self.unet.forward(x_g, &vec![GARMENT_TIMESTEP; b], &mut hook)?;
        }
        // reorder to config order (the pass visits sites in network order)
        let mut entries = Vec::with_capacity(hook.entries.len());
        for site in &self.unet.sites {
            let e = hook
                .entries
                .iter()
                .find(|e| e.site == *site)
                .ok_or_else(|| FiaError::Shape(format!("garment pass never reached site {site}")))?;
            entries.push(e.clone());
        }
        Ok(FeatureBundle { entries })
    }
}

/// Copies every `denoiser/…` parameter except the input convolution onto the
/// matching `garment_net/…` parameter. Fails if the two architectures do not
/// mirror each other.
pub fn init_from_denoiser(denoiser: &ParamStore, garment: &ParamStore) -> Result<usize> {
    const SRC: &str = "denoiser/";
    const DST: &str = "garment_net/";
    let skip = |rest: &str| rest.starts_with("conv_in/");
    let mut copied = 0;
    for (name, var) in denoiser.with_prefix(SRC) {
        let rest = &name[SRC.len()..];
        if skip(rest) {
            continue;
        }
        let target = format!("{DST}{rest}");
        let Some(dst) = garment.get(&target) else {
            return Err(FiaError::Config(format!("garment net has no parameter matching {name}")));
        };
        if dst.dims() != var.dims() {
            return shape_err(format!(
                "architecture mismatch at {rest}: denoiser {:?}, garment net {:?}",
                var.dims(),
                dst.dims()
            ));
        }
        garment.set(&target, &var.as_tensor().copy()?)?;
        copied += 1;
    }
    for (name, _) in garment.with_prefix(DST) {
        let rest = &name[DST.len()..];
        if !skip(rest) && denoiser.get(&format!("{SRC}{rest}")).is_none() {
            return Err(FiaError::Config(format!("denoiser has no parameter matching {name}")));
        }
    }
    Ok(copied)
}
