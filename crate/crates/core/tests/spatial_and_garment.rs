//! Spatial encoder layout properties and garment-net weight sharing.

mod common;

use candle_core::{DType, Device, Tensor};
use common::*;
use fia_vton::data_model::{Array3, ImageTensor, ValueRange};
use fia_vton::denoising_model::build_architecture;
use fia_vton::garment_net::init_from_denoiser;
use fia_vton::latent_codec::images_to_tensor;
use fia_vton::spatial_guider::{encode_spatial, SpatialEncoder, SpatialEncoderConfig};
use fia_vton::synthetic_data::generate_dataset;
use fia_vton::ModelConfig;

fn encoder(positional: bool) -> SpatialEncoder {
    let mut cfg = SpatialEncoderConfig::from_model(&ModelConfig::desk());
    cfg.positional = positional;
    SpatialEncoder::standalone(cfg, DType::F64, 3).unwrap().1
}

fn garment() -> ImageTensor {
    generate_dataset(1, &ModelConfig::desk(), 5).unwrap().remove(0).garment
}

fn mirror(a: &Array3) -> Array3 {
    let w = a.width();
    Array3::from_fn(a.channels(), a.height(), w, |c, y, x| a.get(c, y, w - 1 - x))
}

/// Rows of `[1, n, d]` embeddings.
fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    vec3(t).remove(0)
}

/// Index of patch `(r, gw-1-c)` for patch `(r, c)`.
fn mirrored_patch(i: usize, gw: usize) -> usize {
    let (r, c) = (i / gw, i % gw);
    r * gw + (gw - 1 - c)
}

#[test]
fn mirrored_garment_permutes_patch_content_embeddings() {
    let enc = encoder(true);
    let (gh, gw) = enc.config().grid();
    let p = enc.config().patch;

    // a garment whose every patch is left-right symmetric, so the pixel
    // mirror only moves patches around
    let g = garment().to_unit();
    let sym = Array3::from_fn(3, g.height(), g.width(), |c, y, x| {
        let (px, base) = (x % p, x - x % p);
        g.array().get(c, y, base + px.min(p - 1 - px))
    });
    let a = ImageTensor::new(sym.clone(), ValueRange::Unit).unwrap();
    let b = ImageTensor::new(mirror(&sym), ValueRange::Unit).unwrap();
    let ea = rows(&enc.patch_embeddings(&images_to_tensor(&[&a], DType::F64).unwrap()).unwrap());
    let eb = rows(&enc.patch_embeddings(&images_to_tensor(&[&b], DType::F64).unwrap()).unwrap());
    assert_eq!(ea.len(), gh * gw);
    let mut worst: f64 = 0.0;
    for i in 0..gh * gw {
        for (x, y) in ea[i].iter().zip(&eb[mirrored_patch(i, gw)]) {
            worst = worst.max((x - y).abs());
        }
    }
    assert!(worst <= 1e-5, "content embeddings differ by {worst}");

    // the encoded sequences differ only through the positional encoding
    let ta = encode_spatial(&a, &enc).unwrap();
    let tb = encode_spatial(&b, &enc).unwrap();
    assert_eq!(ta.count(), tb.count());
    assert_ne!(ta.data(), tb.data());
}

#[test]
fn patch_shuffles_are_equivariant_for_any_garment() {
    let enc = encoder(true);
    let (gh, gw) = enc.config().grid();
    let p = enc.config().patch;
    let g = garment().to_unit();
    // move whole patches (mirror permutation at patch level, content intact)
    let moved = Array3::from_fn(3, g.height(), g.width(), |c, y, x| {
        let (col, px) = (x / p, x % p);
        g.array().get(c, y, (gw - 1 - col) * p + px)
    });
    let b = ImageTensor::new(moved, ValueRange::Unit).unwrap();
    let ea = rows(&enc.patch_embeddings(&images_to_tensor(&[&g], DType::F64).unwrap()).unwrap());
    let eb = rows(&enc.patch_embeddings(&images_to_tensor(&[&b], DType::F64).unwrap()).unwrap());
    for i in 0..gh * gw {
        assert_eq!(ea[i], eb[mirrored_patch(i, gw)]);
    }
}

#[test]
fn identical_garments_give_identical_tokens() {
    let enc = encoder(true);
    let g = garment();
    let a = encode_spatial(&g, &enc).unwrap();
    let b = encode_spatial(&g.clone(), &enc).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.count(), ModelConfig::desk().spatial_token_count());
}

#[test]
fn garment_net_copies_denoiser_weights_exactly() {
    let config = ModelConfig::tiny();
    let (store, _model) = build_architecture(&config, DType::F32).unwrap();
    perturb(&store, 0.1, 9);
    let copied = init_from_denoiser(&store, &store).unwrap();
    assert!(copied > 0);
    let mut compared = 0;
    for (name, var) in store.with_prefix("denoiser/") {
        let rest = &name["denoiser/".len()..];
        if rest.starts_with("conv_in/") {
            continue;
        }
        let twin = store.get(&format!("garment_net/{rest}")).unwrap();
        let a: Vec<u32> = var.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = twin.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b, "{rest}");
        compared += 1;
    }
    assert_eq!(compared, copied);
}

#[test]
fn garment_features_cover_every_site() {
    let config = ModelConfig::tiny();
    let (_store, model) = build_architecture(&config, DType::F32).unwrap();
    let (h, w) = config.latent_size();
    let x_g = randn(&[2, config.latent_channels, h, w], 4).to_dtype(DType::F32).unwrap();
    let bundle = model.garment_net.extract_garment_features(&x_g).unwrap();
    assert_eq!(bundle.len(), config.attention_sites.len());
    for (entry, grid) in config.attention_sites.iter().zip(model.site_grids()) {
        let e = bundle.get(*entry).unwrap();
        assert_eq!(e.tokens.dims(), &[2, grid.0 * grid.1, config.site_width(*entry)]);
    }
    let again = model.garment_net.extract_garment_features(&x_g).unwrap();
    for (a, b) in bundle.entries.iter().zip(&again.entries) {
        assert_eq!(max_abs(&a.tokens, &b.tokens), 0.0);
    }
    let wrong = Tensor::zeros((1, config.latent_channels + 1, h, w), DType::F32, &Device::Cpu).unwrap();
    assert!(model.garment_net.extract_garment_features(&wrong).is_err());
}
