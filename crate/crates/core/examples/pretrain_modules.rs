//! Pretrains the desk autoencoder and flow estimator and reports PSNR,
//! re-encoding drift and endpoint error.
//!
//! `cargo run --release --example pretrain_modules -- [codec_steps] [flow_steps] [n]`

use std::time::Instant;

use fia_vton::data_model::DenseFlow;
use fia_vton::flow_guider::{estimate_flow, mean_endpoint_error, pretrain_flow_estimator, FlowInputs, FlowPretrainOptions};
use fia_vton::latent_codec::{codec_images, pretrain_autoencoder, reconstruction_psnr, CodecPretrainOptions};
use fia_vton::synthetic_data::{generate_dataset, generate_spec, render_sample, WarpSpec};
use fia_vton::ModelConfig;

fn arg(i: usize, default: usize) -> usize {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> fia_vton::Result<()> {
    let (codec_steps, flow_steps, n) = (arg(1, 2000), arg(2, 5000), arg(3, 500));
    let config = ModelConfig::desk();
    let data = generate_dataset(n, &config, 11)?;
    let held_out = generate_dataset(32, &config, 12)?;

    let t = Instant::now();
    let opts = CodecPretrainOptions { steps: codec_steps, ..Default::default() };
    let (codec, report) = pretrain_autoencoder(&data, &config, &opts)?;
    println!(
        "codec: {} steps in {:.0}s, PSNR {:.2} -> {:.2} dB",
        codec_steps,
        t.elapsed().as_secs_f64(),
        report.initial_psnr,
        report.validation_psnr
    );
    let imgs = codec_images(&held_out);
    println!("codec held-out PSNR {:.2} dB", reconstruction_psnr(&codec, &imgs)?);
    let mut drift: f32 = 0.0;
    for img in &imgs {
        let z = codec.encode(img)?;
        let z2 = codec.encode(&codec.decode(&z)?)?;
        for (a, b) in z.array().data().iter().zip(z2.array().data()) {
            drift = drift.max((a - b).abs());
        }
    }
    println!("codec max |E(D(E(x))) - E(x)| = {drift:.3e}");

    let t = Instant::now();
    let fopts = FlowPretrainOptions { steps: flow_steps, ..Default::default() };
    let (source, freport) = pretrain_flow_estimator(&data, &config, &fopts)?;
    println!(
        "flow: {} steps in {:.0}s, validation EPE {:.4}",
        flow_steps,
        t.elapsed().as_secs_f64(),
        freport.validation_epe
    );
    let untrained = pretrain_flow_estimator(&data, &config, &FlowPretrainOptions { steps: 0, ..Default::default() })?.0;
    println!(
        "held-out EPE trained {:.4} untrained {:.4}",
        mean_endpoint_error(&held_out, &source, config.latent_size())?,
        mean_endpoint_error(&held_out, &untrained, config.latent_size())?
    );
    let mut mag = 0.0;
    for i in 0..16 {
        let mut spec = generate_spec(i, 13);
        spec.warp = WarpSpec::identity();
        let s = render_sample(&format!("id{i}"), &spec, &config)?;
        let f: DenseFlow = estimate_flow(FlowInputs::from_sample(&s), &source, config.latent_size())?;
        mag += f.mean_magnitude() as f64 / 16.0;
    }
    println!("identity-warp mean |flow| {mag:.4}");
    Ok(())
}
