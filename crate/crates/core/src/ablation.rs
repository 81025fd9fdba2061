//! Variant sweeps: train each variant under shared seeds, sample the
//! evaluation set, and compare paired and unpaired metrics.

use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{ModelConfig, Variant};
use crate::data_model::{ImageTensor, TryOnSample};
use crate::diffusion_engine::{TrainOptions, TryOnPipeline};
use crate::error::{invalid, FiaError, Result};
use crate::flow_guider::FlowSource;
use crate::latent_codec::LatentCodec;
use crate::metrics::{evaluate, FeatureExtractor, MetricReport, Setting};
use crate::resample::Interpolation;
use crate::synthetic_data::make_unpaired;

#[derive(Debug, Clone)]
pub struct AblationOptions {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub train_steps: u64,
    pub sampling_steps: usize,
    pub interpolation: Interpolation,
    /// Garment shift used to build the unpaired evaluation set.
    pub unpaired_shift: usize,
}

impl AblationOptions {
    pub fn for_config(config: &ModelConfig, variants: Vec<Variant>) -> Self {
        Self {
            variants,
            seeds: vec![0, 1, 2],
            train_steps: config.training.steps as u64,
            sampling_steps: config.schedule.sampling_steps,
            interpolation: Interpolation::Bilinear,
            unpaired_shift: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub ssim: f64,
    pub psnr: f64,
    pub lpips_proxy: f64,
    pub proxy_fid_paired: f64,
    pub proxy_fid_unpaired: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

/// Per-variant means over seeds, in first-appearance order.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct VariantMean {
    pub variant: Variant,
    pub seeds: usize,
    pub ssim: f64,
    pub psnr: f64,
    pub lpips_proxy: f64,
    pub proxy_fid_paired: f64,
    pub proxy_fid_unpaired: f64,
}

impl AblationTable {
    pub fn means(&self) -> Vec<VariantMean> {
        let mut order: Vec<Variant> = Vec::new();
        for r in &self.rows {
            if !order.contains(&r.variant) {
                order.push(r.variant);
            }
        }
        order
            .into_iter()
            .map(|v| {
                let rs: Vec<&AblationRow> = self.rows.iter().filter(|r| r.variant == v).collect();
                let n = rs.len() as f64;
                let mean = |f: fn(&AblationRow) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
                VariantMean {
                    variant: v,
                    seeds: rs.len(),
                    ssim: mean(|r| r.ssim),
                    psnr: mean(|r| r.psnr),
                    lpips_proxy: mean(|r| r.lpips_proxy),
                    proxy_fid_paired: mean(|r| r.proxy_fid_paired),
                    proxy_fid_unpaired: mean(|r| r.proxy_fid_unpaired),
                }
            })
            .collect()
    }

    pub fn mean_for(&self, v: Variant) -> Option<VariantMean> {
        self.means().into_iter().find(|m| m.variant == v)
    }

    pub fn to_json(&self) -> Value {
        json!({
            "rows": self.rows,
            "means": self.means(),
            "metric_note": "proxy_fid and lpips_proxy use the desk feature extractor and are comparable only within this artifact",
        })
    }
}

/// Outcome of the directional comparison between `fia` and the flow and
/// spatial ablations.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionalCheck {
    pub ssim_beats_no_flow: bool,
    pub ssim_beats_no_spatial: bool,
    pub fid_beats_no_flow: bool,
}

impl DirectionalCheck {
    pub fn passed(&self) -> bool {
        self.ssim_beats_no_flow && self.ssim_beats_no_spatial && self.fid_beats_no_flow
    }
}

pub fn directional_check(table: &AblationTable) -> Result<DirectionalCheck> {
    let get = |v: Variant| {
        table
            .mean_for(v)
            .ok_or_else(|| FiaError::InvalidInput(format!("ablation table has no {v} rows")))
    };
    let (fia, nf, ns) = (get(Variant::Fia)?, get(Variant::NoFlow)?, get(Variant::NoSpatial)?);
    Ok(DirectionalCheck {
        ssim_beats_no_flow: fia.ssim > nf.ssim,
        ssim_beats_no_spatial: fia.ssim > ns.ssim,
        fid_beats_no_flow: fia.proxy_fid_paired < nf.proxy_fid_paired,
    })
}

/// Trains one variant and evaluates it in both settings.
pub fn run_variant(
    base: &ModelConfig,
    variant: Variant,
    seed: u64,
    train: &[TryOnSample],
    eval: &[TryOnSample],
    opts: &AblationOptions,
    make_codec: &dyn Fn(&ModelConfig) -> Result<LatentCodec>,
    make_flow: &dyn Fn(&ModelConfig) -> Result<FlowSource>,
    extractor: &FeatureExtractor,
) -> Result<AblationRow> {
    let config = ModelConfig {
        variant,
        seed,
        ..base.clone()
    };
    config.validate()?;
    let mut p = TryOnPipeline::new(&config, make_codec(&config)?, make_flow(&config)?)?;
    let data = p.prepare(train)?;
    let records = p.train(&data, opts.train_steps, &TrainOptions::default())?;
    let final_loss = records.last().map(|r| r.loss).unwrap_or(f64::NAN);

    let eval_prepared = p.prepare(eval)?;
    let outputs = p.sample(&eval_prepared, opts.sampling_steps, seed)?;
    let targets: Vec<ImageTensor> = eval
        .iter()
        .map(|s| s.target.clone().ok_or_else(|| FiaError::InvalidInput("evaluation samples must be paired".into())))
        .collect::<Result<_>>()?;
    let paired = evaluate(&outputs, &targets, Setting::Paired, opts.interpolation, extractor)?;

    let unpaired_set = make_unpaired(eval, opts.unpaired_shift)?;
    let unpaired_outputs = p.sample(&p.prepare(&unpaired_set)?, opts.sampling_steps, seed)?;
    let unpaired = evaluate(&unpaired_outputs, &targets, Setting::Unpaired, opts.interpolation, extractor)?;

    let m = |r: &MetricReport, k: &str| r.get(k).map(|s| s.mean).unwrap_or(f64::NAN);
    Ok(AblationRow {
        variant,
        seed,
        ssim: m(&paired, "ssim"),
        psnr: m(&paired, "psnr"),
        lpips_proxy: m(&paired, "lpips_proxy"),
        proxy_fid_paired: m(&paired, "proxy_fid"),
        proxy_fid_unpaired: m(&unpaired, "proxy_fid"),
        final_loss,
    })
}

/// Every variant under every seed. Rows are ordered variant-major.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    base: &ModelConfig,
    train: &[TryOnSample],
    eval: &[TryOnSample],
    opts: &AblationOptions,
    make_codec: &dyn Fn(&ModelConfig) -> Result<LatentCodec>,
    make_flow: &dyn Fn(&ModelConfig) -> Result<FlowSource>,
    extractor: &FeatureExtractor,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<AblationTable> {
    if opts.variants.is_empty() || opts.seeds.is_empty() {
        return invalid("ablation needs at least one variant and one seed");
    }
    let mut rows = Vec::new();
    for &v in &opts.variants {
        for &seed in &opts.seeds {
            let row = run_variant(base, v, seed, train, eval, opts, make_codec, make_flow, extractor)?;
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(AblationTable { rows })
}
