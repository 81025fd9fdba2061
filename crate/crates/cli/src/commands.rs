use std::path::{Path, PathBuf};
use std::time::Instant;

use fia_vton::ablation::{directional_check, run_ablation, AblationOptions, AblationRow};
use fia_vton::checkpoint;
use fia_vton::config::FlowSourceKind;
use fia_vton::data_model::{validate_sample, Array3, ImageTensor, TryOnSample};
use fia_vton::dataset_io::{list_split, read_sample, read_split, write_png, write_split};
use fia_vton::diffusion_engine::{TrainOptions, TryOnPipeline};
use fia_vton::flow_guider::{pretrain_flow_estimator, FlowEstimator, FlowPretrainOptions, FlowSource};
use fia_vton::latent_codec::{pretrain_autoencoder, CodecPretrainOptions, LatentCodec};
use fia_vton::metrics::{evaluate as evaluate_metrics, FeatureExtractor, Setting};
use fia_vton::resample::Interpolation;
use fia_vton::synthetic_data::{generate_dataset, make_unpaired, swap_garment};
use fia_vton::{ModelConfig, Variant};
use serde_json::{json, Value};

use crate::manifest::{entries_hash, hash_files, inputs_hash, RunManifest, MANIFEST_NAME};
use crate::{AblateArgs, CliError, CliResult, EvaluateArgs, GenerateArgs, TrainArgs, TryonArgs};

/// What a command did, before its manifest is written.
pub struct Run {
    command: &'static str,
    out: PathBuf,
    config: Option<ModelConfig>,
    seed: u64,
    inputs: Vec<PathBuf>,
    details: Value,
    started: Instant,
}

fn user(msg: impl Into<String>) -> CliError {
    CliError::User(msg.into())
}

/// Hashes inputs and outputs and writes `<out>/manifest.json`.
pub fn finish(run: Run, args: Vec<String>, threads: usize) -> CliResult<PathBuf> {
    let outputs = hash_files(&run.out)?;
    let manifest = RunManifest {
        command: run.command.to_string(),
        args,
        config: run.config,
        seed: run.seed,
        input_hash: inputs_hash(&run.inputs)?,
        inputs: run.inputs.iter().map(|p| p.display().to_string()).collect(),
        content_hash: entries_hash(&outputs),
        outputs,
        wall_ms: run.started.elapsed().as_millis() as u64,
        threads,
        details: run.details,
    };
    let path = run.out.join(MANIFEST_NAME);
    checkpoint::write_atomic(&path, &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(path)
}

fn parse_size(s: &str) -> CliResult<(usize, usize)> {
    let bad = || user(format!("bad --size {s:?}; expected HEIGHTxWIDTH such as 64x48"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> CliResult<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let items: Vec<T> = s
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<T>().map_err(|e| user(format!("{what}: {e}"))))
        .collect::<CliResult<_>>()?;
    if items.is_empty() {
        return Err(user(format!("{what}: empty list")));
    }
    Ok(items)
}

fn parse_interpolations(s: &str) -> CliResult<Vec<Interpolation>> {
    if s == "both" {
        return Ok(vec![Interpolation::Bilinear, Interpolation::Cubic]);
    }
    Ok(vec![s.parse()?])
}

fn require_dir(path: &Path, what: &str) -> CliResult<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(user(format!("{what} {} does not exist or is not a directory", path.display())))
    }
}

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(user(format!("{what} {} does not exist", path.display())))
    }
}

fn load_config(path: Option<&Path>) -> CliResult<ModelConfig> {
    let value = match path {
        Some(p) => {
            require_file(p, "config file")?;
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str(&text).map_err(|e| user(format!("config file {}: {e}", p.display())))?
        }
        None => json!({}),
    };
    Ok(ModelConfig::from_overrides(&value)?)
}

fn load_pipeline(path: &Path) -> CliResult<TryOnPipeline> {
    require_file(path, "checkpoint")?;
    let ckpt = checkpoint::load(path).map_err(|e| user(e.to_string()))?;
    Ok(checkpoint::restore(&ckpt)?)
}

fn read_data(root: &Path, split: &str) -> CliResult<Vec<TryOnSample>> {
    require_dir(root, "dataset")?;
    let samples = read_split(root, split)?;
    if samples.is_empty() {
        return Err(user(format!("split {split:?} under {} is empty", root.display())));
    }
    Ok(samples)
}

pub fn generate(a: GenerateArgs) -> CliResult<Run> {
    let started = Instant::now();
    let (h, w) = parse_size(&a.size)?;
    if a.n == 0 {
        return Err(user("--n must be at least 1"));
    }
    let config = ModelConfig {
        image_size: (h, w),
        ..ModelConfig::desk()
    };
    let mut samples = generate_dataset(a.n + a.eval_n, &config, a.seed)?;
    for s in &samples {
        let violations = validate_sample(s, &config);
        if !violations.is_empty() {
            return Err(CliError::Internal(format!(
                "generated sample {} violates: {}",
                s.sample_id,
                violations.join("; ")
            )));
        }
    }
    let eval = samples.split_off(a.n);
    std::fs::create_dir_all(&a.out)?;
    write_split(&a.out, "train", &samples)?;
    if !eval.is_empty() {
        write_split(&a.out, "eval", &eval)?;
    }
    log::info!("wrote {} train and {} eval samples to {}", samples.len(), eval.len(), a.out.display());
    Ok(Run {
        command: "generate",
        out: a.out,
        config: None,
        seed: a.seed,
        inputs: Vec::new(),
        details: json!({"size": [h, w], "n": a.n, "eval_n": a.eval_n}),
        started,
    })
}

fn pretrain_modules(
    samples: &[TryOnSample],
    config: &ModelConfig,
    codec_steps: usize,
    flow_steps: usize,
) -> CliResult<(LatentCodec, FlowSource, Value)> {
    log::info!("stage 1/3: latent codec");
    let (codec, codec_report) = pretrain_autoencoder(
        samples,
        config,
        &CodecPretrainOptions {
            steps: codec_steps,
            seed: config.seed,
            ..Default::default()
        },
    )?;
    log::info!("stage 2/3: flow guider ({:?})", config.flow_source);
    let (flow, flow_report) = match config.flow_source {
        FlowSourceKind::Oracle => (FlowSource::Oracle, Value::Null),
        FlowSourceKind::Zero => (FlowSource::Zero, Value::Null),
        FlowSourceKind::Learned => {
            let (f, r) = pretrain_flow_estimator(
                samples,
                config,
                &FlowPretrainOptions {
                    steps: flow_steps,
                    seed: config.seed,
                    ..Default::default()
                },
            )?;
            (f, json!({"steps": r.steps, "final_loss": r.final_loss, "validation_epe": r.validation_epe}))
        }
    };
    let report = json!({
        "codec": {
            "steps": codec_report.steps,
            "initial_psnr": codec_report.initial_psnr,
            "validation_psnr": codec_report.validation_psnr,
        },
        "flow": flow_report,
    });
    Ok((codec, flow, report))
}

pub fn train(a: TrainArgs) -> CliResult<Run> {
    let started = Instant::now();
    let samples = read_data(&a.data, &a.split)?;
    let mut inputs = vec![a.data.join(&a.split)];
    let (mut p, stages) = match &a.resume {
        Some(ckpt) => {
            if a.config.is_some() || a.seed.is_some() || a.variant.is_some() {
                return Err(user("--resume takes its config from the checkpoint; only --steps may be given"));
            }
            inputs.push(ckpt.clone());
            let p = load_pipeline(ckpt)?;
            log::info!("resuming at step {}", p.step);
            let report = json!({"resumed_from_step": p.step});
            (p, report)
        }
        None => {
            let mut config = load_config(a.config.as_deref())?;
            if let Some(s) = a.seed {
                config.seed = s;
            }
            if let Some(v) = &a.variant {
                config.variant = v.parse::<Variant>()?;
            }
            if let Some(c) = &a.config {
                inputs.push(c.clone());
            }
            config.validate()?;
            let (codec, flow, report) = pretrain_modules(&samples, &config, a.codec_steps, a.flow_steps)?;
            (TryOnPipeline::new(&config, codec, flow)?, report)
        }
    };
    if let Some(s) = a.steps {
        p.config.training.steps = s;
    }
    let until = p.config.training.steps as u64;
    log::info!("stage 3/3: joint training to step {until}");
    std::fs::create_dir_all(&a.out)?;
    let data = p.prepare(&samples)?;
    let records = p.train(&data, until, &TrainOptions::for_run(&p.config, &a.out))?;
    checkpoint::save(&p, &a.out.join("final.ckpt"))?;
    let details = json!({
        "stages": stages,
        "final_step": p.step,
        "final_loss": records.last().map(|r| r.loss),
    });
    Ok(Run {
        command: "train",
        out: a.out,
        seed: p.config.seed,
        config: Some(p.config),
        inputs,
        details,
        started,
    })
}

/// Images side by side on one row.
fn hstack(images: &[&ImageTensor]) -> CliResult<Array3> {
    let (c, h) = (images[0].channels(), images[0].height());
    let widths: Vec<usize> = images.iter().map(|i| i.width()).collect();
    let total: usize = widths.iter().sum();
    let units: Vec<ImageTensor> = images.iter().map(|i| i.to_unit()).collect();
    Ok(Array3::from_fn(c, h, total, |ci, y, x| {
        let mut x = x;
        for (img, &w) in units.iter().zip(&widths) {
            if x < w {
                return img.array().get(ci, y, x);
            }
            x -= w;
        }
        unreachable!("column within total width")
    }))
}

fn sampling_steps(p: &TryOnPipeline, requested: Option<usize>) -> CliResult<usize> {
    match requested {
        Some(0) => Err(user("--steps must be at least 1")),
        Some(n) => Ok(n),
        None => Ok(p.config.schedule.sampling_steps),
    }
}

pub fn tryon(a: TryonArgs) -> CliResult<Run> {
    let started = Instant::now();
    let p = load_pipeline(&a.checkpoint)?;
    let steps = sampling_steps(&p, a.steps)?;
    require_dir(&a.data, "dataset")?;
    let ids = list_split(&a.data, &a.split)?;
    let garment_id = a.garment.clone().unwrap_or_else(|| a.person.clone());
    for id in [&a.person, &garment_id] {
        if !ids.contains(id) {
            return Err(user(format!("sample {id:?} not found in split {:?}", a.split)));
        }
    }
    let person = read_sample(&a.data, &a.split, &a.person)?;
    let sample = if garment_id == a.person {
        person
    } else {
        swap_garment(&read_sample(&a.data, &a.split, &garment_id)?, &person)
    };
    let setting = if sample.is_paired() { Setting::Paired } else { Setting::Unpaired };
    let out = p.sample(&p.prepare(std::slice::from_ref(&sample))?, steps, a.seed)?.remove(0);
    std::fs::create_dir_all(&a.out)?;
    write_png(&a.out.join("tryon.png"), out.array())?;
    let mut row = vec![&sample.person, &sample.garment, &out];
    if let Some(t) = &sample.target {
        row.push(t);
    }
    write_png(&a.out.join("grid.png"), &hstack(&row)?)?;
    Ok(Run {
        command: "tryon",
        out: a.out,
        config: Some(p.config.clone()),
        seed: a.seed,
        inputs: vec![a.checkpoint, a.data.join(&a.split)],
        details: json!({
            "setting": setting.name(),
            "person": a.person,
            "garment": garment_id,
            "steps": steps,
            "grid_columns": if sample.target.is_some() { "person, garment, output, target" } else { "person, garment, output" },
        }),
        started,
    })
}

pub fn evaluate(a: EvaluateArgs) -> CliResult<Run> {
    let started = Instant::now();
    let setting: Setting = a.setting.parse()?;
    let interps = parse_interpolations(&a.interpolation)?;
    let p = load_pipeline(&a.checkpoint)?;
    let steps = sampling_steps(&p, a.steps)?;
    let mut samples = read_data(&a.data, &a.split)?;
    if let Some(n) = a.limit {
        samples.truncate(n.max(1));
    }
    let references: Vec<ImageTensor> = samples
        .iter()
        .map(|s| s.target.clone().unwrap_or_else(|| s.person.clone()))
        .collect();
    let inputs = match setting {
        Setting::Paired => {
            if let Some(s) = samples.iter().find(|s| !s.is_paired()) {
                return Err(user(format!("paired evaluation needs targets; sample {} has none", s.sample_id)));
            }
            samples
        }
        Setting::Unpaired => make_unpaired(&samples, 1)?,
    };
    log::info!("sampling {} items with {steps} steps", inputs.len());
    let outputs = p.sample(&p.prepare(&inputs)?, steps, a.seed)?;
    let extractor = FeatureExtractor::standard()?;
    std::fs::create_dir_all(&a.out)?;
    let mut reports = Vec::new();
    for interp in interps {
        let report = evaluate_metrics(&outputs, &references, setting, interp, &extractor)?;
        let name = format!("report_{}_{}.json", setting.name(), interp.name());
        std::fs::write(a.out.join(&name), serde_json::to_vec_pretty(&report.to_json())?)?;
        reports.push(name);
    }
    Ok(Run {
        command: "evaluate",
        out: a.out,
        config: Some(p.config.clone()),
        seed: a.seed,
        inputs: vec![a.checkpoint, a.data.join(&a.split)],
        details: json!({"setting": setting.name(), "steps": steps, "n": outputs.len(), "reports": reports}),
        started,
    })
}

pub fn ablate(a: AblateArgs) -> CliResult<Run> {
    let started = Instant::now();
    let variants: Vec<Variant> = parse_list(&a.variants, "--variants")?;
    let seeds: Vec<u64> = parse_list(&a.seeds, "--seeds")?;
    let interp: Interpolation = a.interpolation.parse()?;
    let mut config = load_config(a.config.as_deref())?;
    if let Some(s) = a.steps {
        config.training.steps = s;
    }
    let train = read_data(&a.data, &a.split)?;
    let mut eval = read_data(&a.data, &a.eval_split)?;
    if let Some(n) = a.eval_limit {
        eval.truncate(n.max(2));
    }
    let (codec, flow, stages) = pretrain_modules(&train, &config, a.codec_steps, a.flow_steps)?;
    let codec_values = codec.store().map(|s| s.snapshot()).transpose()?;
    let flow_values = flow.estimator().map(|e| e.store().snapshot()).transpose()?;
    let base_seed = config.seed;
    let make_codec = |c: &ModelConfig| {
        let codec = LatentCodec::for_config(c, base_seed)?;
        if let (Some(s), Some(v)) = (codec.store(), &codec_values) {
            s.load_snapshot(v)?;
        }
        Ok(codec)
    };
    let make_flow = |c: &ModelConfig| {
        Ok(match (c.flow_source, &flow_values) {
            (FlowSourceKind::Learned, Some(v)) => {
                let est = FlowEstimator::new(c, base_seed)?;
                est.store().load_snapshot(v)?;
                FlowSource::Learned(Box::new(est))
            }
            (FlowSourceKind::Zero, _) => FlowSource::Zero,
            _ => FlowSource::Oracle,
        })
    };
    let mut opts = AblationOptions::for_config(&config, variants);
    opts.seeds = seeds.clone();
    opts.interpolation = interp;
    if let Some(s) = a.sampling_steps {
        if s == 0 {
            return Err(user("--sampling-steps must be at least 1"));
        }
        opts.sampling_steps = s;
    }
    std::fs::create_dir_all(&a.out)?;
    let rows_path = a.out.join("ablation_rows.jsonl");
    std::fs::write(&rows_path, "")?;
    let extractor = FeatureExtractor::standard()?;
    let table = run_ablation(
        &config,
        &train,
        &eval,
        &opts,
        &make_codec,
        &make_flow,
        &extractor,
        |row: &AblationRow| {
            log::info!("{} seed {}: ssim {:.4} proxy_fid_p {:.4}", row.variant, row.seed, row.ssim, row.proxy_fid_paired);
            let line = serde_json::to_string(row).expect("row serializes") + "\n";
            if let Err(e) = std::fs::OpenOptions::new()
                .append(true)
                .open(&rows_path)
                .and_then(|mut f| std::io::Write::write_all(&mut f, line.as_bytes()))
            {
                log::warn!("could not append to {}: {e}", rows_path.display());
            }
        },
    )?;
    let mut doc = table.to_json();
    doc["directional_check"] = match directional_check(&table) {
        Ok(c) => json!({
            "ssim_beats_no_flow": c.ssim_beats_no_flow,
            "ssim_beats_no_spatial": c.ssim_beats_no_spatial,
            "fid_beats_no_flow": c.fid_beats_no_flow,
            "passed": c.passed(),
        }),
        Err(_) => Value::Null,
    };
    std::fs::write(a.out.join("ablation.json"), serde_json::to_vec_pretty(&doc)?)?;
    let mut inputs = vec![a.data.join(&a.split), a.data.join(&a.eval_split)];
    if let Some(c) = &a.config {
        inputs.push(c.clone());
    }
    Ok(Run {
        command: "ablate",
        out: a.out,
        seed: config.seed,
        config: Some(config),
        inputs,
        details: json!({
            "seeds": seeds,
            "train_steps": opts.train_steps,
            "sampling_steps": opts.sampling_steps,
            "interpolation": interp.name(),
            "stages": stages,
        }),
        started,
    })
}
