//! 2-D convolution as im2col followed by a matrix product.
//!
//! The column op carries its own backward (col2im), so gradients of both the
//! input and the kernel go through dense matrix products.

use candle_core::{CpuStorage, CustomOp1, DType, Layout, Shape, Tensor, WithDType};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn new(dims: &[usize], k: usize, stride: usize, pad: usize) -> candle_core::Result<Self> {
        let &[b, c, h, w] = dims else {
            candle_core::bail!("im2col expects [b, c, h, w], got {dims:?}")
        };
        if h + 2 * pad < k || w + 2 * pad < k {
            candle_core::bail!("kernel {k} larger than padded input {h}x{w}");
        }
        Ok(Self {
            b,
            c,
            h,
            w,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Source coordinate of output position `o` under kernel offset `d`, or
    /// `None` inside the padding.
    #[inline]
    fn src(&self, o: usize, d: usize, size: usize) -> Option<usize> {
        let p = (o * self.stride + d) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < size).then_some(p as usize)
    }
}

fn im2col<T: WithDType>(x: &[T], g: Geometry) -> Vec<T> {
    let cols = g.cols();
    let mut out = vec![T::zero(); g.b * g.rows() * cols];
    for bi in 0..g.b {
        for ci in 0..g.c {
            let plane = &x[(bi * g.c + ci) * g.h * g.w..][..g.h * g.w];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let r = (ci * g.k + ky) * g.k + kx;
                    let dst = &mut out[(r * g.b + bi) * cols..][..cols];
                    for oy in 0..g.oh {
                        let Some(sy) = g.src(oy, ky, g.h) else { continue };
                        let row = &plane[sy * g.w..][..g.w];
                        let drow = &mut dst[oy * g.ow..][..g.ow];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            if let Some(sx) = g.src(ox, kx, g.w) {
                                *d = row[sx];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im<T: WithDType>(cols_data: &[T], g: Geometry) -> Vec<T> {
    let cols = g.cols();
    let mut out = vec![T::zero(); g.b * g.c * g.h * g.w];
    for bi in 0..g.b {
        for ci in 0..g.c {
            let plane = &mut out[(bi * g.c + ci) * g.h * g.w..][..g.h * g.w];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let r = (ci * g.k + ky) * g.k + kx;
                    let src = &cols_data[(r * g.b + bi) * cols..][..cols];
                    for oy in 0..g.oh {
                        let Some(sy) = g.src(oy, ky, g.h) else { continue };
                        let srow = &src[oy * g.ow..][..g.ow];
                        let row = &mut plane[sy * g.w..][..g.w];
                        for (ox, &v) in srow.iter().enumerate() {
                            if let Some(sx) = g.src(ox, kx, g.w) {
                                row[sx] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("im2col expects a contiguous input"),
    }
}

struct Im2Col {
    k: usize,
    stride: usize,
    pad: usize,
}

struct Col2Im {
    geometry: Geometry,
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = Geometry::new(l.dims(), self.k, self.stride, self.pad)?;
        let shape = Shape::from((g.rows(), g.b * g.cols()));
        match s {
            CpuStorage::F32(x) => Ok((CpuStorage::F32(im2col(slice(x, l)?, g)), shape)),
            CpuStorage::F64(x) => Ok((CpuStorage::F64(im2col(slice(x, l)?, g)), shape)),
            _ => candle_core::bail!("im2col supports f32 and f64"),
        }
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let geometry = Geometry::new(arg.dims(), self.k, self.stride, self.pad)?;
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&Col2Im { geometry })?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.geometry;
        if l.dims() != [g.rows(), g.b * g.cols()] {
            candle_core::bail!("col2im got {:?}", l.dims());
        }
        let shape = Shape::from((g.b, g.c, g.h, g.w));
        match s {
            CpuStorage::F32(x) => Ok((CpuStorage::F32(col2im(slice(x, l)?, g)), shape)),
            CpuStorage::F64(x) => Ok((CpuStorage::F64(col2im(slice(x, l)?, g)), shape)),
            _ => candle_core::bail!("col2im supports f32 and f64"),
        }
    }
}

/// `[b, c, h, w] ⊛ [o, c, k, k]` with zero padding `pad`, no bias.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> candle_core::Result<Tensor> {
    let (b, _, h, w) = x.dims4()?;
    let (o, c, k, _) = weight.dims4()?;
    if !matches!(x.dtype(), DType::F32 | DType::F64) {
        candle_core::bail!("conv2d supports f32 and f64");
    }
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    // columns are [c·k·k, b·oh·ow] so one matrix product covers the batch
    let cols = x.contiguous()?.apply_op1(Im2Col { k, stride, pad })?;
    let wm = weight.reshape((o, c * k * k))?;
    wm.matmul(&cols)?.reshape((o, b, oh, ow))?.permute((1, 0, 2, 3))?.contiguous()
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn matches_reference_convolution_and_gradients() {
        for &(k, stride, h, w) in &[(3, 1, 7, 5), (3, 2, 8, 6), (3, 2, 7, 5), (1, 1, 4, 3)] {
            let pad = k / 2;
            let x = Var::from_tensor(&randn(&[2, 3, h, w], 1)).unwrap();
            let wt = Var::from_tensor(&randn(&[4, 3, k, k], 2)).unwrap();
            let probe = randn(&[2, 4, (h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1], 3);
            let ours = conv2d(x.as_tensor(), wt.as_tensor(), stride, pad).unwrap();
            let reference = x.as_tensor().conv2d(wt.as_tensor(), pad, stride, 1, 1).unwrap();
            assert!(max_abs(&ours, &reference) < 1e-12, "k{k} s{stride} {}", max_abs(&ours, &reference));
            let g1 = (&ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            let g2 = (&reference * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            for v in [&x, &wt] {
                let a = g1.get(v.as_tensor()).unwrap();
                let b = g2.get(v.as_tensor()).unwrap();
                assert!(max_abs(a, b) < 1e-10, "k{k} s{stride}");
            }
        }
    }
}
