//! Separable image resampling (half-pixel centres, edge clamping) and
//! integer-factor area downsampling.

use serde::{Deserialize, Serialize};

use crate::data_model::Array3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    Bilinear,
    /// Keys cubic convolution, a = -0.5.
    Cubic,
}

impl Interpolation {
    pub fn name(self) -> &'static str {
        match self {
            Interpolation::Bilinear => "bilinear",
            Interpolation::Cubic => "cubic",
        }
    }
}

impl std::str::FromStr for Interpolation {
    type Err = crate::error::FiaError;

    fn from_str(s: &str) -> crate::error::Result<Self> {
        match s {
            "bilinear" => Ok(Interpolation::Bilinear),
            "cubic" => Ok(Interpolation::Cubic),
            _ => Err(crate::error::FiaError::InvalidInput(format!(
                "unknown interpolation {s:?} (expected bilinear or cubic)"
            ))),
        }
    }
}

fn cubic_weight(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Taps `(source index, weight)` for every output index along one axis.
fn axis_taps(n_in: usize, n_out: usize, interp: Interpolation) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    let last = n_in as isize - 1;
    (0..n_out)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            match interp {
                Interpolation::Bilinear => {
                    let src = src.clamp(0.0, last as f64);
                    let i0 = src.floor() as isize;
                    let a = src - i0 as f64;
                    let i1 = (i0 + 1).min(last);
                    if a == 0.0 {
                        vec![(i0 as usize, 1.0)]
                    } else {
                        vec![(i0 as usize, 1.0 - a), (i1 as usize, a)]
                    }
                }
                Interpolation::Cubic => {
                    let i0 = src.floor() as isize;
                    let a = src - i0 as f64;
                    (-1..=2)
                        .map(|k| {
                            let idx = (i0 + k).clamp(0, last) as usize;
                            (idx, cubic_weight(a - k as f64))
                        })
                        .collect()
                }
            }
        })
        .collect()
}

/// Resizes every channel of `src` to `out_h × out_w`.
pub fn resize(src: &Array3, out_h: usize, out_w: usize, interp: Interpolation) -> Array3 {
    let (c, h, w) = (src.channels(), src.height(), src.width());
    if (h, w) == (out_h, out_w) {
        return src.clone();
    }
    let ty = axis_taps(h, out_h, interp);
    let tx = axis_taps(w, out_w, interp);
    let mut tmp = vec![0f64; c * h * out_w];
    for ch in 0..c {
        for y in 0..h {
            for (ox, taps) in tx.iter().enumerate() {
                let mut acc = 0.0;
                for &(ix, wt) in taps {
                    acc += wt * src.get(ch, y, ix) as f64;
                }
                tmp[(ch * h + y) * out_w + ox] = acc;
            }
        }
    }
    Array3::from_fn(c, out_h, out_w, |ch, oy, ox| {
        let mut acc = 0.0;
        for &(iy, wt) in &ty[oy] {
            acc += wt * tmp[(ch * h + iy) * out_w + ox];
        }
        acc as f32
    })
}

/// Mean over non-overlapping `factor × factor` blocks.
pub fn area_downsample(src: &Array3, factor: usize) -> Array3 {
    if factor == 1 {
        return src.clone();
    }
    let (c, h, w) = (src.channels(), src.height() / factor, src.width() / factor);
    let inv = 1.0 / (factor * factor) as f64;
    Array3::from_fn(c, h, w, |ch, y, x| {
        let mut acc = 0.0f64;
        for dy in 0..factor {
            for dx in 0..factor {
                acc += src.get(ch, y * factor + dy, x * factor + dx) as f64;
            }
        }
        (acc * inv) as f32
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_is_identity() {
        let a = Array3::from_fn(2, 5, 7, |c, y, x| (c * 100 + y * 10 + x) as f32);
        assert_eq!(resize(&a, 5, 7, Interpolation::Cubic), a);
    }

    #[test]
    fn bilinear_half_is_block_mean() {
        let a = Array3::from_fn(1, 4, 4, |_, y, x| (y * 4 + x) as f32);
        let r = resize(&a, 2, 2, Interpolation::Bilinear);
        let b = area_downsample(&a, 2);
        for (p, q) in r.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn cubic_weights_partition_unity() {
        for i in 0..10 {
            let a = i as f64 / 10.0;
            let s: f64 = (-1..=2).map(|k| cubic_weight(a - k as f64)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cubic_differs_from_bilinear_on_texture() {
        let a = Array3::from_fn(1, 8, 8, |_, y, x| ((x * 3 + y * 5) % 4) as f32 / 4.0);
        let b = resize(&a, 4, 4, Interpolation::Bilinear);
        let c = resize(&a, 4, 4, Interpolation::Cubic);
        assert_ne!(b, c);
    }
}
