//! UNet body shared by the denoiser and the garment net.
//!
//! For widths `[w0, …, w_{D-1}]`: an input convolution, one residual block
//! (plus an optional attention site) and a stride-2 convolution per down
//! level, a middle block at the deepest level, and mirrored up levels that
//! upsample, convolve, concatenate the skip and apply a residual block.
//! Residual blocks take the time embedding as a scale-shift.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};

use crate::config::{ModelConfig, SiteId};
use crate::error::{FiaError, Result};
use crate::nn::{from_tokens, multi_head_attention, timestep_embedding, to_tokens, upsample2x, Conv2d, GroupNorm, LayerNorm, Linear, Scope};

pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(s: &mut Scope, c_in: usize, c_out: usize, t_dim: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&mut s.pp("norm1"), c_in)?,
            conv1: Conv2d::new(&mut s.pp("conv1"), c_in, c_out, 3, 1)?,
            time: Linear::new(&mut s.pp("time"), t_dim, 2 * c_out, true)?,
            norm2: GroupNorm::new(&mut s.pp("norm2"), c_out)?,
            conv2: Conv2d::new(&mut s.pp("conv2"), c_out, c_out, 3, 1)?,
            skip: if c_in != c_out {
                Some(Conv2d::new(&mut s.pp("skip"), c_in, c_out, 1, 1)?)
            } else {
                None
            },
        })
    }

    pub fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let c = h.dim(1)?;
        let ss = self.time.forward(&temb.silu()?)?;
        let scale = ss.narrow(1, 0, c)?.unsqueeze(2)?.unsqueeze(3)?;
        let shift = ss.narrow(1, c, c)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = self.norm2.forward(&h)?;
        let h = (h.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(&shift))?;
        let h = self.conv2.forward(&h.silu()?)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Self-attention and feed-forward around the cross-attention slot.
pub struct SiteBlock {
    ln_self: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln_ff: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    heads: usize,
}

impl SiteBlock {
    pub fn new(s: &mut Scope, d: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln_self: LayerNorm::new(&mut s.pp("ln_self"), d)?,
            q: Linear::new(&mut s.pp("q"), d, d, false)?,
            k: Linear::new(&mut s.pp("k"), d, d, false)?,
            v: Linear::new(&mut s.pp("v"), d, d, false)?,
            o: Linear::new(&mut s.pp("o"), d, d, true)?,
            ln_ff: LayerNorm::new(&mut s.pp("ln_ff"), d)?,
            ff1: Linear::new(&mut s.pp("ff1"), d, 2 * d, true)?,
            ff2: Linear::new(&mut s.pp("ff2"), 2 * d, d, true)?,
            heads,
        })
    }

    pub fn self_attention(&self, h: &Tensor) -> Result<Tensor> {
        let n = self.ln_self.forward(h)?;
        let a = multi_head_attention(&self.q.forward(&n)?, &self.k.forward(&n)?, &self.v.forward(&n)?, self.heads)?;
        Ok((h + self.o.forward(&a)?)?)
    }

    pub fn feed_forward(&self, h: &Tensor) -> Result<Tensor> {
        let f = self.ff2.forward(&self.ff1.forward(&self.ln_ff.forward(h)?)?.gelu()?)?;
        Ok((h + f)?)
    }
}

/// Hook for the cross-attention slot of each site: receives the site and
/// the post-self-attention tokens `[b, n, d]`, returns the replacement.
pub trait SiteHook {
    fn at_site(&mut self, site: SiteId, k: usize, tokens: Tensor, grid: (usize, usize)) -> Result<Tensor>;
    /// Stop the forward pass early (after this site's hook) if true.
    fn done(&self) -> bool {
        false
    }
}

pub struct UNet {
    pub widths: Vec<usize>,
    pub sites: Vec<SiteId>,
    t_dim: usize,
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    down: Vec<ResBlock>,
    downsample: Vec<Conv2d>,
    mid: ResBlock,
    up_conv: Vec<Conv2d>,
    up: Vec<ResBlock>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    site_blocks: BTreeMap<SiteId, SiteBlock>,
}

impl UNet {
    /// Builds (or reuses) parameters under the scope prefix.
    pub fn new(s: &mut Scope, config: &ModelConfig, in_channels: usize, out_channels: usize) -> Result<Self> {
        let widths = config.unet_widths.clone();
        let depth = widths.len();
        if depth < 2 {
            return Err(FiaError::Config("UNet needs at least two levels".into()));
        }
        let t_dim = 4 * widths[0];
        let time1 = Linear::new(&mut s.pp("time_embed/l1"), widths[0], t_dim, true)?;
        let time2 = Linear::new(&mut s.pp("time_embed/l2"), t_dim, t_dim, true)?;
        let conv_in = Conv2d::new(&mut s.pp("conv_in"), in_channels, widths[0], 3, 1)?;
        let mut down = Vec::new();
        let mut downsample = Vec::new();
        let mut prev = widths[0];
        for l in 0..depth - 1 {
            down.push(ResBlock::new(&mut s.pp(&format!("down{l}/res")), prev, widths[l], t_dim)?);
            downsample.push(Conv2d::new(&mut s.pp(&format!("down{l}/downsample")), widths[l], widths[l], 3, 2)?);
            prev = widths[l];
        }
        let mid = ResBlock::new(&mut s.pp("mid/res"), prev, widths[depth - 1], t_dim)?;
        let mut up_conv = Vec::new();
        let mut up = Vec::new();
        for l in (0..depth - 1).rev() {
            up_conv.push(Conv2d::new(&mut s.pp(&format!("up{l}/upsample")), widths[l + 1], widths[l], 3, 1)?);
            up.push(ResBlock::new(&mut s.pp(&format!("up{l}/res")), 2 * widths[l], widths[l], t_dim)?);
        }
        let norm_out = GroupNorm::new(&mut s.pp("norm_out"), widths[0])?;
        let conv_out = Conv2d::new(&mut s.pp("conv_out"), widths[0], out_channels, 3, 1)?;
        let mut site_blocks = BTreeMap::new();
        for &site in &config.attention_sites {
            let d = config.site_width(site);
            site_blocks.insert(site, SiteBlock::new(&mut s.pp(&format!("site_{site}")), d, config.head_count)?);
        }
        Ok(Self {
            widths,
            sites: config.attention_sites.clone(),
            t_dim,
            time1,
            time2,
            conv_in,
            down,
            downsample,
            mid,
            up_conv,
            up,
            norm_out,
            conv_out,
            site_blocks,
        })
    }

    pub fn time_embedding(&self, t: &[f64], dtype: DType) -> Result<Tensor> {
        let e = timestep_embedding(t, self.widths[0], dtype, &candle_core::Device::Cpu)?;
        self.time2.forward(&self.time1.forward(&e)?.silu()?)
    }

    fn site(&self, site: SiteId, h: Tensor, hook: &mut dyn SiteHook) -> Result<Tensor> {
        let Some(block) = self.site_blocks.get(&site) else {
            return Ok(h);
        };
        let k = self.sites.iter().position(|&s| s == site).expect("site listed");
        let (_, _, gh, gw) = h.dims4()?;
        let tok = block.self_attention(&to_tokens(&h)?)?;
        let tok = hook.at_site(site, k, tok, (gh, gw))?;
        if hook.done() {
            return Ok(h);
        }
        from_tokens(&block.feed_forward(&tok)?, gh, gw)
    }

    /// Runs the network. Returns `None` if the hook asked to stop early.
    pub fn forward(&self, x: &Tensor, t: &[f64], hook: &mut dyn SiteHook) -> Result<Option<Tensor>> {
        let depth = self.widths.len();
        let temb = self.time_embedding(t, x.dtype())?;
        let mut h = self.conv_in.forward(x)?;
        let mut skips = Vec::new();
        for l in 0..depth - 1 {
            h = self.down[l].forward(&h, &temb)?;
            h = self.site(SiteId::Down(l), h, hook)?;
            if hook.done() {
                return Ok(None);
            }
            skips.push(h.clone());
            h = self.downsample[l].forward(&h)?;
        }
        h = self.mid.forward(&h, &temb)?;
        h = self.site(SiteId::Mid, h, hook)?;
        if hook.done() {
            return Ok(None);
        }
        for (i, l) in (0..depth - 1).rev().enumerate() {
            h = self.up_conv[i].forward(&upsample2x(&h)?)?;
            let skip = skips.pop().expect("one skip per level");
            h = Tensor::cat(&[&h, &skip], 1)?;
            h = self.up[i].forward(&h, &temb)?;
            h = self.site(SiteId::Up(l), h, hook)?;
            if hook.done() {
                return Ok(None);
            }
        }
        let out = self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)?;
        Ok(Some(out))
    }

    pub fn t_dim(&self) -> usize {
        self.t_dim
    }
}
