//! Flow infused attention at one UNet site.
//!
//! With model tokens `P`, garment tokens `G`, per-token flow `F` and spatial
//! tokens `S`:
//!
//! ```text
//! P_f = P + proj_p(F_model)            G_f = G + proj_g(F_garment)
//! P_e = P_f + softmax(F_Q(P_f) F_K(G_f)ᵀ / √d_h) F_V(G_f)
//! P_o = P_e + softmax(S_Q(P_e) S_K(S)ᵀ / √d_h) S_V(S)
//! ```
//!
//! Attention is multi-head; `d_h` is the per-head width. The last projector
//! layers and `S_V` start at zero, so a fresh block computes exactly the plain
//! garment cross-attention.

use candle_core::{DType, Device, Tensor};

use crate::config::Variant;
use crate::data_model::DenseFlow;
use crate::error::{shape_err, FiaError, Result};
use crate::flow_guider::resize_flow;
use crate::nn::{multi_head_attention, Linear, Scope};

/// `2 → d/2 → d` MLP with SiLU; the output layer starts at zero.
pub struct FlowProjector {
    pub l1: Linear,
    pub l2: Linear,
}

impl FlowProjector {
    pub fn new(s: &mut Scope, d: usize) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(&mut s.pp("l1"), 2, d / 2, true)?,
            l2: Linear::zeros(&mut s.pp("l2"), d / 2, d, true)?,
        })
    }

    /// `[b, n, 2]` flow tokens → `[b, n, d]`.
    pub fn forward(&self, flow: &Tensor) -> Result<Tensor> {
        self.l2.forward(&self.l1.forward(flow)?.silu()?)
    }
}

/// Parameters of one FIA block.
pub struct FiaSite {
    pub proj_model: FlowProjector,
    pub proj_garment: FlowProjector,
    pub f_q: Linear,
    pub f_k: Linear,
    pub f_v: Linear,
    pub s_q: Linear,
    pub s_k: Linear,
    pub s_v: Linear,
    pub width: usize,
    pub spatial_dim: usize,
    pub heads: usize,
}

impl FiaSite {
    pub fn new(s: &mut Scope, width: usize, spatial_dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(FiaError::Config(format!("site width {width} not divisible by {heads} heads")));
        }
        Ok(Self {
            proj_model: FlowProjector::new(&mut s.pp("flow_proj_model"), width)?,
            proj_garment: FlowProjector::new(&mut s.pp("flow_proj_garment"), width)?,
            f_q: Linear::new(&mut s.pp("f_q"), width, width, false)?,
            f_k: Linear::new(&mut s.pp("f_k"), width, width, false)?,
            f_v: Linear::new(&mut s.pp("f_v"), width, width, false)?,
            s_q: Linear::new(&mut s.pp("s_q"), width, width, false)?,
            s_k: Linear::new(&mut s.pp("s_k"), spatial_dim, width, false)?,
            s_v: Linear::zeros(&mut s.pp("s_v"), spatial_dim, width, true)?,
            width,
            spatial_dim,
            heads,
        })
    }

    /// Flow infusion by summation.
    pub fn infuse_flow(&self, p: &Tensor, g: &Tensor, flow: &SiteFlow) -> Result<(Tensor, Tensor)> {
        let (b, n_p, _) = p.dims3()?;
        let (_, n_g, _) = g.dims3()?;
        if flow.model.dims3()?.1 != n_p || flow.garment.dims3()?.1 != n_g || flow.model.dim(0)? != b {
            return shape_err(format!(
                "flow tokens {:?}/{:?} do not match {n_p} model and {n_g} garment tokens",
                flow.model.dims(),
                flow.garment.dims()
            ));
        }
        let fp = self.proj_model.forward(&flow.model.to_dtype(p.dtype())?)?;
        let fg = self.proj_garment.forward(&flow.garment.to_dtype(g.dtype())?)?;
        Ok(((p + fp)?, (g + fg)?))
    }

    /// Garment cross-attention with residual.
    pub fn joint_cross_attention(&self, p_f: &Tensor, g_f: &Tensor) -> Result<Tensor> {
        let a = multi_head_attention(
            &self.f_q.forward(p_f)?,
            &self.f_k.forward(g_f)?,
            &self.f_v.forward(g_f)?,
            self.heads,
        )?;
        Ok((p_f + a)?)
    }

    /// Spatial-token cross-attention with residual.
    pub fn spatial_cross_attention(&self, p_e: &Tensor, s: &Tensor) -> Result<Tensor> {
        if s.dim(2)? != self.spatial_dim {
            return shape_err(format!("spatial tokens have width {}, site expects {}", s.dim(2)?, self.spatial_dim));
        }
        let a = multi_head_attention(
            &self.s_q.forward(p_e)?,
            &self.s_k.forward(s)?,
            &self.s_v.forward(s)?,
            self.heads,
        )?;
        Ok((p_e + a)?)
    }

    /// The block under `variant`. `concat_input` behaves like `no_flow` here;
    /// its flow enters at the denoiser input instead. When `s` is `None` the
    /// spatial stage is skipped.
    pub fn forward(&self, p: &Tensor, g: &Tensor, flow: &SiteFlow, s: Option<&Tensor>, variant: Variant) -> Result<Tensor> {
        let (p_f, g_f) = if variant.uses_flow_projection() {
            self.infuse_flow(p, g, flow)?
        } else {
            (p.clone(), g.clone())
        };
        let p_e = self.joint_cross_attention(&p_f, &g_f)?;
        match (variant.uses_spatial(), s) {
            (true, Some(s)) => self.spatial_cross_attention(&p_e, s),
            _ => Ok(p_e),
        }
    }
}

/// Flow tokens for one site: the flow resized to the model grid and to the
/// garment grid, flattened row-major to `[b, n, 2]` as `(dx, dy)`.
#[derive(Debug, Clone)]
pub struct SiteFlow {
    pub model: Tensor,
    pub garment: Tensor,
}

/// `[b, h·w, 2]` tokens of `flows` resized to `grid`.
pub fn flow_tokens(flows: &[DenseFlow], grid: (usize, usize), dtype: DType) -> Result<Tensor> {
    let mut data = Vec::with_capacity(flows.len() * grid.0 * grid.1 * 2);
    for f in flows {
        let r = resize_flow(f, grid.0, grid.1)?;
        data.extend_from_slice(r.data());
    }
    Ok(Tensor::from_vec(data, (flows.len(), grid.0 * grid.1, 2), &Device::Cpu)?.to_dtype(dtype)?)
}

impl SiteFlow {
    pub fn new(flows: &[DenseFlow], model_grid: (usize, usize), garment_grid: (usize, usize), dtype: DType) -> Result<Self> {
        let model = flow_tokens(flows, model_grid, dtype)?;
        let garment = if garment_grid == model_grid {
            model.clone()
        } else {
            flow_tokens(flows, garment_grid, dtype)?
        };
        Ok(Self { model, garment })
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            model: self.model.to_dtype(dtype)?,
            garment: self.garment.to_dtype(dtype)?,
        })
    }
}
