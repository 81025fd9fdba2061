//! Model, schedule and training configuration with the `paper` and `desk`
//! default bundles.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{FiaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Full-scale settings reported for the original model.
    Paper,
    /// Settings sized for a single workstation.
    Desk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowSourceKind {
    Oracle,
    Learned,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialSourceKind {
    Toy,
    External,
    None,
}

/// Attention-block variant used at every attention site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Flow infusion, joint garment attention, then spatial attention.
    Fia,
    /// Warped garment concatenated to the denoiser input; no flow projection.
    ConcatInput,
    /// Joint attention on raw model/garment tokens only.
    PlainCrossAttention,
    /// FIA without the flow infusion step.
    NoFlow,
    /// FIA without the spatial attention step.
    NoSpatial,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Fia,
        Variant::ConcatInput,
        Variant::PlainCrossAttention,
        Variant::NoFlow,
        Variant::NoSpatial,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Fia => "fia",
            Variant::ConcatInput => "concat_input",
            Variant::PlainCrossAttention => "plain_cross_attention",
            Variant::NoFlow => "no_flow",
            Variant::NoSpatial => "no_spatial",
        }
    }

    pub fn uses_flow_projection(self) -> bool {
        matches!(self, Variant::Fia | Variant::NoSpatial)
    }

    pub fn uses_spatial(self) -> bool {
        matches!(self, Variant::Fia | Variant::NoFlow | Variant::ConcatInput)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = FiaError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                FiaError::InvalidInput(format!(
                    "unknown variant {s:?}; valid variants: {}",
                    names.join(", ")
                ))
            })
    }
}

/// Location of an attention block in the UNet. Levels count downsamplings
/// from the latent resolution; the middle block sits at the deepest level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SiteId {
    Down(usize),
    Mid,
    Up(usize),
}

impl SiteId {
    pub fn level(self, depth: usize) -> usize {
        match self {
            SiteId::Down(l) | SiteId::Up(l) => l,
            SiteId::Mid => depth - 1,
        }
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SiteId::Down(l) => write!(f, "down{l}"),
            SiteId::Mid => f.write_str("mid"),
            SiteId::Up(l) => write!(f, "up{l}"),
        }
    }
}

impl FromStr for SiteId {
    type Err = FiaError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || FiaError::Config(format!("bad attention site {s:?} (expected downN, mid or upN)"));
        if s == "mid" {
            return Ok(SiteId::Mid);
        }
        if let Some(l) = s.strip_prefix("down") {
            return l.parse().map(SiteId::Down).map_err(|_| bad());
        }
        if let Some(l) = s.strip_prefix("up") {
            return l.parse().map(SiteId::Up).map_err(|_| bad());
        }
        Err(bad())
    }
}

impl Serialize for SiteId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SiteId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sampling_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            train_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            sampling_steps: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl TrainingConfig {
    pub fn paper() -> Self {
        Self {
            learning_rate: 1e-5,
            batch_size: 64,
            steps: 100_000,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            checkpoint_every: 5_000,
            log_every: 100,
        }
    }

    pub fn desk() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 16,
            steps: 5_000,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            checkpoint_every: 1_000,
            log_every: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub profile: Profile,
    /// `(height, width)` of person, garment and target images.
    pub image_size: (usize, usize),
    /// Spatial downsampling of the latent codec; 1 selects the identity codec.
    pub codec_factor: usize,
    pub latent_channels: usize,
    pub unet_widths: Vec<usize>,
    pub attention_sites: Vec<SiteId>,
    pub head_count: usize,
    /// Width of the spatial guider tokens.
    pub spatial_dim: usize,
    pub patch_size: usize,
    pub flow_source: FlowSourceKind,
    pub spatial_source: SpatialSourceKind,
    pub variant: Variant,
    pub schedule: ScheduleConfig,
    pub training: TrainingConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            profile: Profile::Desk,
            image_size: (64, 48),
            codec_factor: 2,
            latent_channels: 4,
            unet_widths: vec![32, 64, 128],
            attention_sites: vec![SiteId::Down(1), SiteId::Mid, SiteId::Up(1)],
            head_count: 4,
            spatial_dim: 32,
            patch_size: 8,
            flow_source: FlowSourceKind::Oracle,
            spatial_source: SpatialSourceKind::Toy,
            variant: Variant::Fia,
            schedule: ScheduleConfig::default(),
            training: TrainingConfig::desk(),
            seed: 0,
        }
    }

    pub fn paper() -> Self {
        Self {
            profile: Profile::Paper,
            image_size: (512, 384),
            codec_factor: 8,
            latent_channels: 4,
            unet_widths: vec![320, 640, 1280],
            attention_sites: vec![SiteId::Down(1), SiteId::Mid, SiteId::Up(1)],
            head_count: 8,
            spatial_dim: 768,
            patch_size: 32,
            flow_source: FlowSourceKind::Learned,
            spatial_source: SpatialSourceKind::External,
            variant: Variant::Fia,
            schedule: ScheduleConfig::default(),
            training: TrainingConfig::paper(),
            seed: 0,
        }
    }

    /// A seconds-scale desk variant for tests and smoke runs: 32×24 images,
    /// identity codec, widths `[8, 16, 32]`.
    pub fn tiny() -> Self {
        Self {
            image_size: (32, 24),
            codec_factor: 1,
            latent_channels: 3,
            unet_widths: vec![8, 16, 32],
            head_count: 2,
            spatial_dim: 8,
            training: TrainingConfig {
                learning_rate: 1e-3,
                batch_size: 4,
                steps: 200,
                checkpoint_every: 50,
                log_every: 10,
                ..TrainingConfig::desk()
            },
            ..Self::desk()
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Paper => Self::paper(),
            Profile::Desk => Self::desk(),
        }
    }

    /// The identity codec configuration used by architecture tests.
    pub fn with_identity_codec(mut self) -> Self {
        self.codec_factor = 1;
        self.latent_channels = 3;
        self
    }

    pub fn depth(&self) -> usize {
        self.unet_widths.len()
    }

    pub fn latent_size(&self) -> (usize, usize) {
        (
            self.image_size.0 / self.codec_factor,
            self.image_size.1 / self.codec_factor,
        )
    }

    pub fn is_identity_codec(&self) -> bool {
        self.codec_factor == 1
    }

    pub fn site_width(&self, site: SiteId) -> usize {
        self.unet_widths[site.level(self.depth())]
    }

    /// Channels of the assembled denoiser input.
    pub fn denoiser_in_channels(&self) -> usize {
        let base = 2 * self.latent_channels + 4;
        if self.variant == Variant::ConcatInput {
            base + self.latent_channels
        } else {
            base
        }
    }

    pub fn spatial_token_count(&self) -> usize {
        (self.image_size.0 / self.patch_size) * (self.image_size.1 / self.patch_size) + 1
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(FiaError::Config(m));
        let (h, w) = self.image_size;
        let f = self.codec_factor;
        if ![1, 2, 8].contains(&f) {
            return err(format!("codec factor {f} not in {{1, 2, 8}}"));
        }
        if f == 1 && self.latent_channels != 3 {
            return err("the identity codec (factor 1) requires 3 latent channels".into());
        }
        if self.latent_channels == 0 {
            return err("latent_channels must be positive".into());
        }
        let depth = self.depth();
        if depth < 2 {
            return err("unet_widths needs at least two levels".into());
        }
        let div = f << (depth - 1);
        if h < 8 || w < 8 || h % div != 0 || w % div != 0 {
            return err(format!("image size {h}x{w} not divisible by {div} (codec factor x 2^(depth-1))"));
        }
        if self.head_count == 0 {
            return err("head_count must be positive".into());
        }
        for &width in &self.unet_widths {
            if width == 0 || width % self.head_count != 0 {
                return err(format!("width {width} not divisible by head_count {}", self.head_count));
            }
            if width % 2 != 0 {
                return err(format!("width {width} must be even"));
            }
        }
        if self.spatial_dim == 0 || self.spatial_dim % self.head_count != 0 {
            return err(format!(
                "spatial_dim {} not divisible by head_count {}",
                self.spatial_dim, self.head_count
            ));
        }
        if self.patch_size == 0 || h % self.patch_size != 0 || w % self.patch_size != 0 {
            return err(format!("image size {h}x{w} not divisible by patch size {}", self.patch_size));
        }
        let mut seen = Vec::new();
        for &site in &self.attention_sites {
            match site {
                SiteId::Down(l) | SiteId::Up(l) if l + 1 >= depth => {
                    return err(format!("site {site} beyond the UNet depth {depth}"))
                }
                _ => {}
            }
            if seen.contains(&site) {
                return err(format!("duplicate attention site {site}"));
            }
            seen.push(site);
        }
        let s = &self.schedule;
        if s.train_steps == 0 || !(0.0 < s.beta_start && s.beta_start < s.beta_end && s.beta_end < 1.0) {
            return err("schedule needs T >= 1 and 0 < beta_start < beta_end < 1".into());
        }
        if s.sampling_steps == 0 || s.sampling_steps > s.train_steps {
            return err("sampling_steps must be in [1, train_steps]".into());
        }
        let t = &self.training;
        if t.batch_size == 0 || !(t.learning_rate > 0.0) {
            return err("training needs batch_size >= 1 and a positive learning rate".into());
        }
        Ok(())
    }

    /// Resolves a config file: the `profile` field (default `desk`) selects
    /// the base bundle and every other key overrides it. Keys may name
    /// top-level fields or, flat, fields of `schedule` and `training`; nested
    /// objects are merged key by key.
    pub fn from_overrides(file: &serde_json::Value) -> Result<Self> {
        let serde_json::Value::Object(obj) = file else {
            return Err(FiaError::Config("config file must be a JSON object".into()));
        };
        let profile = match obj.get("profile") {
            Some(v) => serde_json::from_value::<Profile>(v.clone())
                .map_err(|_| FiaError::Config(format!("unknown profile {v}; expected \"paper\" or \"desk\"")))?,
            None => Profile::Desk,
        };
        let mut base = serde_json::to_value(Self::for_profile(profile))?;
        let root = base.as_object_mut().expect("config serializes to an object");
        for (key, value) in obj {
            if root.contains_key(key) {
                merge(root.get_mut(key).expect("present"), value)?;
                continue;
            }
            let section = ["schedule", "training"]
                .into_iter()
                .find(|s| root[*s].as_object().is_some_and(|o| o.contains_key(key)))
                .ok_or_else(|| FiaError::Config(format!("unknown config key {key:?}")))?;
            root.get_mut(section).expect("present")[key] = value.clone();
        }
        let config: Self = serde_json::from_value(base).map_err(|e| FiaError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn config_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Architecture identity: everything except the training loop settings.
    pub fn architecture_hash(&self) -> String {
        let mut arch = self.clone();
        arch.training = TrainingConfig::desk();
        arch.config_hash()
    }
}

fn merge(dst: &mut serde_json::Value, src: &serde_json::Value) -> Result<()> {
    match (dst, src) {
        (serde_json::Value::Object(d), serde_json::Value::Object(s)) => {
            for (k, v) in s {
                let slot = d
                    .get_mut(k)
                    .ok_or_else(|| FiaError::Config(format!("unknown config key {k:?}")))?;
                merge(slot, v)?;
            }
        }
        (d, s) => *d = s.clone(),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_profiles_validate() {
        ModelConfig::desk().validate().unwrap();
        ModelConfig::paper().validate().unwrap();
        ModelConfig::desk().with_identity_codec().validate().unwrap();
    }

    #[test]
    fn paper_training_defaults() {
        let t = ModelConfig::paper().training;
        assert_eq!(t.learning_rate, 1e-5);
        assert_eq!(t.batch_size, 64);
        assert_eq!(t.steps, 100_000);
        let d = ModelConfig::desk().training;
        assert_eq!((d.learning_rate, d.batch_size, d.steps), (1e-4, 16, 5_000));
        assert_eq!(ModelConfig::desk().image_size, (64, 48));
    }

    #[test]
    fn head_count_must_divide_widths() {
        let mut c = ModelConfig::desk();
        c.head_count = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn site_and_variant_parse() {
        for s in ["down0", "mid", "up1"] {
            assert_eq!(s.parse::<SiteId>().unwrap().to_string(), s);
        }
        assert!("sideways".parse::<SiteId>().is_err());
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        let e = "bogus".parse::<Variant>().unwrap_err().to_string();
        assert!(e.contains("no_spatial") && e.contains("concat_input"));
    }

    #[test]
    fn config_round_trips_through_json() {
        let c = ModelConfig::desk();
        let s = serde_json::to_string(&c).unwrap();
        let back: ModelConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.config_hash(), c.config_hash());
    }

    #[test]
    fn overrides_resolve_against_the_profile() {
        let file = serde_json::json!({
            "profile": "desk",
            "image_size": [32, 24],
            "unet_widths": [8, 16, 32],
            "learning_rate": 0.001,
            "schedule": {"sampling_steps": 3},
            "seed": 5
        });
        let c = ModelConfig::from_overrides(&file).unwrap();
        assert_eq!(c.image_size, (32, 24));
        assert_eq!(c.training.learning_rate, 1e-3);
        assert_eq!(c.training.batch_size, ModelConfig::desk().training.batch_size);
        assert_eq!(c.schedule.sampling_steps, 3);
        assert_eq!(c.seed, 5);
        let bad = serde_json::json!({"profile": "desk", "no_such_key": 1});
        assert!(matches!(ModelConfig::from_overrides(&bad), Err(FiaError::Config(_))));
        let bad = serde_json::json!({"profile": "huge"});
        assert!(ModelConfig::from_overrides(&bad).is_err());
        let bad = serde_json::json!({"training": {"batch": 3}});
        assert!(ModelConfig::from_overrides(&bad).is_err());
    }

    #[test]
    fn in_channels_formula() {
        let c = ModelConfig::desk();
        assert_eq!(c.denoiser_in_channels(), 12);
        let id = c.clone().with_identity_codec();
        assert_eq!(id.denoiser_in_channels(), 10);
        let mut cat = c;
        cat.variant = Variant::ConcatInput;
        assert_eq!(cat.denoiser_in_channels(), 16);
    }
}
