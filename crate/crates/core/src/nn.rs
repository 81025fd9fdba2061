//! Named-parameter storage and the small set of layers the networks use.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention_kernel::fused_attention;
use crate::error::{FiaError, Result};

/// How a freshly created parameter is filled.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a; stable across platforms and releases.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Flat, ordered map from parameter names (`namespace/…/leaf`) to variables.
///
/// Initial values depend only on the store seed and the parameter name, so
/// two stores built with the same seed agree regardless of creation order.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    seed: u64,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            seed,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn scope(&mut self, prefix: &str) -> Scope<'_> {
        Scope {
            store: self,
            prefix: prefix.trim_end_matches('/').to_string(),
        }
    }

    fn create(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(v) = self.vars.get(name) {
            if v.dims() != shape {
                return Err(FiaError::Shape(format!(
                    "parameter {name} exists with shape {:?}, requested {shape:?}",
                    v.dims()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(bound) => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(name));
                (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    /// Variables whose name starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a Var)> + 'a {
        self.vars.range(prefix.to_string()..).take_while(move |(k, _)| k.starts_with(prefix))
    }

    /// Total scalar parameter count under `prefix` (empty prefix counts all).
    pub fn parameter_count(&self, prefix: &str) -> usize {
        self.with_prefix(prefix).map(|(_, v)| v.elem_count()).sum()
    }

    /// Overwrites the value of an existing parameter in place.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| FiaError::Checkpoint(format!("unknown parameter {name}")))?;
        if var.dims() != value.dims() {
            return Err(FiaError::Shape(format!(
                "parameter {name}: stored {:?}, new value {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Values of every parameter as `f32` vectors, keyed by name.
    pub fn snapshot(&self) -> Result<BTreeMap<String, (Vec<usize>, Vec<f32>)>> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.vars {
            let v = var.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
            out.insert(name.clone(), (var.dims().to_vec(), v));
        }
        Ok(out)
    }

    /// Sets every parameter from `values`; extra entries are ignored, a
    /// missing one is an error.
    pub fn load_snapshot(&self, values: &BTreeMap<String, (Vec<usize>, Vec<f32>)>) -> Result<()> {
        for name in self.vars.keys() {
            let (shape, data) = values
                .get(name)
                .ok_or_else(|| FiaError::Checkpoint(format!("missing parameter {name}")))?;
            self.set(name, &Tensor::from_vec(data.clone(), shape.as_slice(), &self.device)?)?;
        }
        Ok(())
    }

    /// Copy of the store with every parameter converted to `dtype`.
    pub fn to_dtype(&self, dtype: DType) -> Result<ParamStore> {
        let mut vars = BTreeMap::new();
        for (name, var) in &self.vars {
            let t = var.as_tensor().to_dtype(dtype)?.copy()?;
            vars.insert(name.clone(), Var::from_tensor(&t)?);
        }
        Ok(ParamStore {
            vars,
            dtype,
            device: self.device.clone(),
            seed: self.seed,
        })
    }
}

/// A name prefix into a [`ParamStore`], used while building modules.
pub struct Scope<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn pp(&mut self, name: &str) -> Scope<'_> {
        Scope {
            prefix: format!("{}/{}", self.prefix, name),
            store: self.store,
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn param(&mut self, leaf: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let name = format!("{}/{}", self.prefix, leaf);
        self.store.create(&name, shape, init)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    /// PyTorch-style uniform initialization, bound `1/sqrt(fan_in)`.
    pub fn new(s: &mut Scope, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        Self::with_init(s, d_in, d_out, bias, Init::Uniform(bound))
    }

    pub fn zeros(s: &mut Scope, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        Self::with_init(s, d_in, d_out, bias, Init::Zeros)
    }

    fn with_init(s: &mut Scope, d_in: usize, d_out: usize, bias: bool, init: Init) -> Result<Self> {
        let weight = s.param("weight", &[d_out, d_in], init)?;
        let bias = if bias {
            let b_init = match init {
                Init::Uniform(b) => Init::Uniform(b),
                other => other,
            };
            Some(s.param("bias", &[d_out], b_init)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    /// Applies to the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().expect("non-scalar input");
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let flat = x.reshape((rows, d_in))?;
        let mut y = flat.matmul(&self.weight.t()?)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.weight.dim(0)?;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(s: &mut Scope, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Result<Self> {
        let bound = 1.0 / ((c_in * kernel * kernel) as f64).sqrt();
        Ok(Self {
            weight: s.param("weight", &[c_out, c_in, kernel, kernel], Init::Uniform(bound))?,
            bias: s.param("bias", &[c_out], Init::Uniform(bound))?,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn zeros(s: &mut Scope, c_in: usize, c_out: usize, kernel: usize) -> Result<Self> {
        Ok(Self {
            weight: s.param("weight", &[c_out, c_in, kernel, kernel], Init::Zeros)?,
            bias: s.param("bias", &[c_out], Init::Zeros)?,
            stride: 1,
            padding: kernel / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = crate::conv_kernel::conv2d(x, &self.weight, self.stride, self.padding)?;
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    groups: usize,
    gamma: Tensor,
    beta: Tensor,
}

/// Largest group count in {8, 4, 2, 1} that divides `channels` with at least
/// two channels per group (single-channel inputs use one group).
pub fn default_groups(channels: usize) -> usize {
    [8, 4, 2]
        .into_iter()
        .find(|g| channels % g == 0 && channels / g >= 2)
        .unwrap_or(1)
}

impl GroupNorm {
    pub fn new(s: &mut Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            groups: default_groups(channels),
            gamma: s.param("weight", &[channels], Init::Ones)?,
            beta: s.param("bias", &[channels], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let g = self.groups;
        let xg = x.reshape((b, g, (c / g) * h * w))?;
        let mean = xg.mean_keepdim(D::Minus1)?;
        let centered = xg.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        let normed = normed.reshape((b, c, h, w))?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn new(s: &mut Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: s.param("weight", &[dim], Init::Ones)?,
            beta: s.param("bias", &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Splits `[b, n, heads·dh]` into `[b·heads, n, dh]`.
pub fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, n, d) = x.dims3()?;
    Ok(x
        .reshape((b, n, heads, d / heads))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b * heads, n, d / heads))?)
}

/// Inverse of [`split_heads`].
pub fn merge_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (bh, n, dh) = x.dims3()?;
    let b = bh / heads;
    Ok(x
        .reshape((b, heads, n, dh))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b, n, heads * dh))?)
}

/// Multi-head attention over already-projected `q [b, n, d]`, `k [b, m, d]`,
/// `v [b, m, dv]`, scaled by `1/sqrt(d/heads)`.
pub fn multi_head_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let d = q.dim(2)?;
    let scale = 1.0 / ((d / heads) as f64).sqrt();
    let out = fused_attention(&split_heads(q, heads)?, &split_heads(k, heads)?, &split_heads(v, heads)?, scale)?;
    merge_heads(&out, heads)
}

/// `[b, c, h, w]` → `[b, h·w, c]`.
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// `[b, h·w, c]` → `[b, c, h, w]`.
pub fn from_tokens(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, _, c) = x.dims3()?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
}

/// Nearest-neighbour 2× upsampling built from broadcasts so the backward pass
/// is a plain sum.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x
        .reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .contiguous()?
        .reshape((b, c, 2 * h, 2 * w))?)
}

/// Sinusoidal embedding of (possibly fractional) time steps, `[b] → [b, dim]`.
pub fn timestep_embedding(t: &[f64], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        for i in 0..half {
            let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
            data.push((ti * freq).cos());
        }
        for i in 0..half {
            let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
            data.push((ti * freq).sin());
        }
        for _ in 2 * half..dim {
            data.push(0.0);
        }
    }
    Ok(Tensor::from_vec(data, (t.len(), dim), device)?.to_dtype(dtype)?)
}

/// Builds a `[b, c, h, w]` tensor from per-item channel-major buffers.
pub fn stack_chw(items: &[&[f32]], c: usize, h: usize, w: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut data = Vec::with_capacity(items.len() * c * h * w);
    for it in items {
        if it.len() != c * h * w {
            return Err(FiaError::Shape(format!(
                "buffer of {} values is not [{c}, {h}, {w}]",
                it.len()
            )));
        }
        data.extend_from_slice(it);
    }
    Ok(Tensor::from_vec(data, (items.len(), c, h, w), device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_order_independent() {
        let mut a = ParamStore::new(DType::F32, 3);
        let mut b = ParamStore::new(DType::F32, 3);
        let x1 = Linear::new(&mut a.scope("x"), 4, 4, true).unwrap();
        let _ = Linear::new(&mut a.scope("y"), 4, 4, true).unwrap();
        let _ = Linear::new(&mut b.scope("y"), 4, 4, true).unwrap();
        let x2 = Linear::new(&mut b.scope("x"), 4, 4, true).unwrap();
        let d = (x1.weight() - x2.weight()).unwrap().abs().unwrap().sum_all().unwrap();
        assert_eq!(d.to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn group_norm_normalizes() {
        let mut ps = ParamStore::new(DType::F64, 0);
        let gn = GroupNorm::new(&mut ps.scope("gn"), 8).unwrap();
        let x = Tensor::randn(3f64, 2.0, (2, 8, 4, 4), &Device::Cpu).unwrap();
        let y = gn.forward(&x).unwrap();
        let m = y.mean_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(m.abs() < 1e-10);
    }

    #[test]
    fn upsample_repeats_pixels() {
        let x = Tensor::arange(0f32, 4.0, &Device::Cpu).unwrap().reshape((1, 1, 2, 2)).unwrap();
        let y = upsample2x(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(
            y,
            vec![0., 0., 1., 1., 0., 0., 1., 1., 2., 2., 3., 3., 2., 2., 3., 3.]
        );
    }

    #[test]
    fn tokens_round_trip() {
        let x = Tensor::randn(0f32, 1.0, (2, 3, 4, 5), &Device::Cpu).unwrap();
        let back = from_tokens(&to_tokens(&x).unwrap(), 4, 5).unwrap();
        let d = (x - back).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(d.to_scalar::<f32>().unwrap(), 0.0);
    }
}
