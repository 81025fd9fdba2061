//! Times joint training steps and DDIM sampling for the desk profile.

use std::time::Instant;

use fia_vton::diffusion_engine::TryOnPipeline;
use fia_vton::flow_guider::FlowSource;
use fia_vton::latent_codec::LatentCodec;
use fia_vton::synthetic_data::generate_dataset;
use fia_vton::ModelConfig;

fn main() -> fia_vton::Result<()> {
    let identity = std::env::args().any(|a| a == "--identity");
    let mut config = ModelConfig::desk();
    if identity {
        config = config.with_identity_codec();
    }
    let samples = generate_dataset(64, &config, 1)?;
    let codec = LatentCodec::for_config(&config, config.seed)?;
    let mut p = TryOnPipeline::new(&config, codec, FlowSource::Oracle)?;
    let data = p.prepare(&samples)?;
    println!("parameters: {}", p.store.parameter_count(""));
    for _ in 0..3 {
        let t = Instant::now();
        let loss = p.training_step(&data)?;
        println!("step {} loss {loss:.4} {:.2}s", p.step, t.elapsed().as_secs_f64());
    }
    let t = Instant::now();
    let out = p.sample(&data[..4], 5, 0)?;
    println!("sample 4 items x 5 steps: {:.2}s ({} outputs)", t.elapsed().as_secs_f64(), out.len());
    Ok(())
}
