//! Helpers shared by the integration tests: seeded tensors, parameter
//! perturbation and plain-loop reference implementations.

#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use fia_vton::nn::{Linear, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn vec3(t: &Tensor) -> Vec<Vec<Vec<f64>>> {
    t.to_dtype(DType::F64).unwrap().to_vec3::<f64>().unwrap()
}

pub fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
    (a.to_dtype(DType::F64).unwrap() - b.to_dtype(DType::F64).unwrap())
        .unwrap()
        .abs()
        .unwrap()
        .max_all()
        .unwrap()
        .to_scalar::<f64>()
        .unwrap()
}

pub fn max_diff3(a: &[Vec<Vec<f64>>], b: &[Vec<Vec<f64>>]) -> f64 {
    a.iter()
        .flatten()
        .flatten()
        .zip(b.iter().flatten().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Adds N(0, std²) to every parameter in `store`.
pub fn perturb(store: &ParamStore, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        let v = store.get(&name).unwrap().as_tensor().clone();
        let noise: Vec<f64> = (0..v.elem_count())
            .map(|_| std * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        let noise = Tensor::from_vec(noise, v.dims(), &Device::Cpu).unwrap().to_dtype(v.dtype()).unwrap();
        store.set(&name, &(v + noise).unwrap()).unwrap();
    }
}

pub fn linear_oracle(x: &[f64], l: &Linear) -> Vec<f64> {
    let w = l.weight().to_dtype(DType::F64).unwrap().to_vec2::<f64>().unwrap();
    let b = l.bias().map(|b| b.to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap());
    w.iter()
        .enumerate()
        .map(|(o, row)| {
            let mut acc = b.as_ref().map(|b| b[o]).unwrap_or(0.0);
            for (wj, xj) in row.iter().zip(x) {
                acc += wj * xj;
            }
            acc
        })
        .collect()
}

/// `x + softmax(q kᵀ / √d_h) v` per head, by explicit loops.
pub fn attention_oracle(
    x_q: &[Vec<Vec<f64>>],
    x_kv: &[Vec<Vec<f64>>],
    q: &Linear,
    k: &Linear,
    v: &Linear,
    heads: usize,
) -> Vec<Vec<Vec<f64>>> {
    let mut out = x_q.to_vec();
    for (bi, rows) in x_q.iter().enumerate() {
        let qs: Vec<Vec<f64>> = rows.iter().map(|r| linear_oracle(r, q)).collect();
        let ks: Vec<Vec<f64>> = x_kv[bi].iter().map(|r| linear_oracle(r, k)).collect();
        let vs: Vec<Vec<f64>> = x_kv[bi].iter().map(|r| linear_oracle(r, v)).collect();
        let dh = qs[0].len() / heads;
        for h in 0..heads {
            for (i, qi) in qs.iter().enumerate() {
                let scores: Vec<f64> = ks
                    .iter()
                    .map(|kj| (h * dh..(h + 1) * dh).map(|e| qi[e] * kj[e]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                for (j, vj) in vs.iter().enumerate() {
                    let p = (scores[j] - mx).exp() / z;
                    for e in h * dh..(h + 1) * dh {
                        out[bi][i][e] += p * vj[e];
                    }
                }
            }
        }
    }
    out
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}
