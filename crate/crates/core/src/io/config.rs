//! Flat `key=value` run configuration.
//!
//! One assignment per line, `#` starts a comment, blank lines are ignored.
//! Unknown keys, duplicate keys and malformed values are errors carrying
//! the 1-based line number. Every key has a default, so an empty file is a
//! complete configuration. [`RunConfig::to_text`] writes every key and
//! parses back to an equal value.

use thiserror::Error;

use crate::conditioning::StyleExtractorConfig;
use crate::diffusion::{linear_schedule, ReverseVariance, Schedule};
use crate::error::Result;
use crate::io::corpus::ToyCorpusSpec;
use crate::networks::codec::{CodecConfig, CodecKind};
use crate::networks::ModelConfig;
use crate::sampler::{grid_lattice, grid_rows, GuidanceScales, SamplerKind, SamplerSpec};
use crate::training::TrainConfig;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key `{key}` (first set on line {first})")]
    DuplicateKey { line: usize, key: String, first: usize },
    #[error("line {line}: bad value for `{key}`: {msg}")]
    Malformed { line: usize, key: String, msg: String },
    #[error("line {line}: expected key=value")]
    Syntax { line: usize },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScheduleKind {
    #[default]
    Linear,
}

/// Bound on each sampling step's clean-signal estimate.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum ClipSetting {
    /// Unit bound for the pixel-space codec, none for a learned latent.
    #[default]
    Auto,
    Off,
    Bound(f64),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GridLayout {
    /// Content sweep row plus style sweep row.
    #[default]
    Rows,
    /// Every content scale against every style scale.
    Lattice,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionConfig {
    pub timesteps: usize,
    pub schedule: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            schedule: ScheduleKind::Linear,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplingConfig {
    pub sampler: SamplerKind,
    pub steps: usize,
    pub s_cnt: f64,
    pub s_sty: f64,
    pub variance: ReverseVariance,
    pub clip: ClipSetting,
    pub grid_content_scales: Vec<f64>,
    pub grid_style_scales: Vec<f64>,
    pub grid_layout: GridLayout,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerKind::Ddim,
            steps: 250,
            s_cnt: 0.6,
            s_sty: 3.0,
            variance: ReverseVariance::BetaTilde,
            clip: ClipSetting::Auto,
            grid_content_scales: crate::sampler::GRID_CONTENT_SCALES.to_vec(),
            grid_style_scales: crate::sampler::GRID_STYLE_SCALES.to_vec(),
            grid_layout: GridLayout::Rows,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub diffusion: DiffusionConfig,
    pub train: TrainConfig,
    pub model: ModelConfig,
    /// Accepted for completeness; only the empty list is supported.
    pub attention_resolutions: Vec<usize>,
    pub codec: CodecConfig,
    pub sampling: SamplingConfig,
    pub corpus: ToyCorpusSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            diffusion: DiffusionConfig::default(),
            train: TrainConfig::default(),
            model: ModelConfig {
                extractor: StyleExtractorConfig::default(),
                ..ModelConfig::default()
            },
            attention_resolutions: Vec::new(),
            codec: CodecConfig::default(),
            sampling: SamplingConfig::default(),
            corpus: ToyCorpusSpec::default(),
        }
    }
}

/// Text form of one value.
trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! display_fromstr_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse::<$t>().map_err(|e| e.to_string())
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

display_fromstr_value!(usize, u64, bool, CodecKind, SamplerKind, ReverseVariance);

impl ConfigValue for f64 {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let v: f64 = s.parse().map_err(|e: std::num::ParseFloatError| e.to_string())?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err("must be finite".into())
        }
    }

    fn render(&self) -> String {
        self.to_string()
    }
}

impl<T: ConfigValue> ConfigValue for Vec<T> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s.is_empty() {
            return Ok(Vec::new());
        }
        s.split(',').map(|p| T::parse_value(p.trim())).collect()
    }

    fn render(&self) -> String {
        self.iter().map(T::render).collect::<Vec<_>>().join(",")
    }
}

/// `auto` or a count.
impl ConfigValue for Option<usize> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s == "auto" {
            Ok(None)
        } else {
            usize::parse_value(s).map(Some)
        }
    }

    fn render(&self) -> String {
        self.map_or_else(|| "auto".into(), |v| v.to_string())
    }
}

impl ConfigValue for ScheduleKind {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s {
            "linear" => Ok(Self::Linear),
            _ => Err(format!("only `linear` is supported, got `{s}`")),
        }
    }

    fn render(&self) -> String {
        "linear".into()
    }
}

impl ConfigValue for ClipSetting {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s {
            "auto" => Ok(Self::Auto),
            "off" => Ok(Self::Off),
            _ => match f64::parse_value(s)? {
                b if b > 0.0 => Ok(Self::Bound(b)),
                _ => Err("bound must be positive".into()),
            },
        }
    }

    fn render(&self) -> String {
        match self {
            Self::Auto => "auto".into(),
            Self::Off => "off".into(),
            Self::Bound(b) => b.to_string(),
        }
    }
}

impl ConfigValue for GridLayout {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s {
            "rows" => Ok(Self::Rows),
            "lattice" => Ok(Self::Lattice),
            _ => Err(format!("expected rows or lattice, got `{s}`")),
        }
    }

    fn render(&self) -> String {
        match self {
            Self::Rows => "rows",
            Self::Lattice => "lattice",
        }
        .into()
    }
}

macro_rules! config_keys {
    ($($key:literal => $($field:ident).+ : $doc:literal;)*) => {
        /// Every key with a one-line description, in `to_text` order.
        pub const KEYS: &[(&str, &str)] = &[$(($key, $doc)),*];

        fn set_key(cfg: &mut RunConfig, key: &str, value: &str) -> Option<std::result::Result<(), String>> {
            match key {
                $($key => Some(ConfigValue::parse_value(value).map(|v| cfg $(.$field)+ = v)),)*
                _ => None,
            }
        }

        fn get_key(cfg: &RunConfig, key: &str) -> Option<String> {
            match key {
                $($key => Some(cfg $(.$field)+ .render()),)*
                _ => None,
            }
        }
    };
}

config_keys! {
    "timesteps" => diffusion.timesteps : "diffusion length T";
    "schedule" => diffusion.schedule : "beta schedule (linear)";
    "beta_start" => diffusion.beta_start : "first beta";
    "beta_end" => diffusion.beta_end : "last beta";
    "lr" => train.lr : "AdamW learning rate";
    "weight_decay" => train.weight_decay : "AdamW decoupled weight decay";
    "batch_size" => train.batch_size : "images per optimizer step";
    "iterations" => train.iterations : "optimizer steps";
    "p_content_only" => train.p_content_only : "probability of the content-only mode";
    "p_style_only" => train.p_style_only : "probability of the style-only mode";
    "ema_decay" => train.ema_decay : "EMA decay";
    "ema_warmup" => train.ema_warmup : "cap early EMA decay at (1+n)/(10+n)";
    "seed" => train.seed : "training RNG seed";
    "checkpoint_every" => train.checkpoint_every : "checkpoint period in steps (0 = only at the end)";
    "dual_corpus" => train.dual_corpus : "draw content-only samples from the content family";
    "refiner_channels" => model.refiner_channels : "refined content channels C_r (auto = 3/4 of C_z)";
    "refiner_allow_full" => model.refiner_allow_full : "permit C_r = C_z (ablation only)";
    "base_channels" => model.base_channels : "denoiser width at the first level";
    "channel_mults" => model.channel_mults : "width multiplier per level";
    "blocks_per_level" => model.blocks_per_level : "residual blocks per level and direction";
    "embed_dim" => model.embed_dim : "conditioning embedding width";
    "patch_size" => model.patch_size : "space-to-depth factor of the denoiser stem";
    "norm_groups" => model.norm_groups : "normalization groups";
    "input_skip" => model.input_skip : "gated copy of z_t added to the noise prediction";
    "attention_resolutions" => attention_resolutions : "unsupported; must be empty";
    "style_channels" => model.extractor.channels : "style extractor channels per level";
    "style_first_kernel" => model.extractor.first_kernel : "first extractor kernel size";
    "style_seed" => model.extractor.seed : "style extractor weight seed";
    "init_seed" => model.init_seed : "trainable weight initialisation seed";
    "codec" => codec.kind : "identity or autoencoder";
    "codec_factor" => codec.factor : "autoencoder spatial reduction";
    "latent_channels" => codec.latent_channels : "autoencoder latent channels C_z";
    "codec_hidden" => codec.hidden_channels : "autoencoder hidden width";
    "codec_iterations" => codec.iterations : "autoencoder training steps";
    "codec_batch_size" => codec.batch_size : "autoencoder batch size";
    "codec_lr" => codec.lr : "autoencoder learning rate";
    "codec_seed" => codec.seed : "autoencoder seed";
    "sampler" => sampling.sampler : "ddim or ddpm";
    "sample_steps" => sampling.steps : "reverse steps";
    "s_cnt" => sampling.s_cnt : "content guidance scale";
    "s_sty" => sampling.s_sty : "style guidance scale";
    "ddpm_variance" => sampling.variance : "beta or beta_tilde";
    "sample_clip" => sampling.clip : "auto, off, or a bound on each step's clean estimate";
    "grid_content_scales" => sampling.grid_content_scales : "content scales of the grid";
    "grid_style_scales" => sampling.grid_style_scales : "style scales of the grid";
    "grid_layout" => sampling.grid_layout : "rows or lattice";
    "corpus_count" => corpus.count : "toy corpus size";
    "image_size" => corpus.image_size : "toy image side length";
    "corpus_seed" => corpus.seed : "toy corpus seed";
    "corpus_content_fraction" => corpus.content_fraction : "share of content-family images";
}

/// Parse and validate configuration text.
pub fn parse_config(text: &str) -> std::result::Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    let mut seen: std::collections::HashMap<String, usize> = std::collections::HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or(ConfigError::Syntax { line })?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(ConfigError::Syntax { line });
        }
        if let Some(&first) = seen.get(key) {
            return Err(ConfigError::DuplicateKey {
                line,
                key: key.into(),
                first,
            });
        }
        match set_key(&mut cfg, key, value) {
            None => return Err(ConfigError::UnknownKey { line, key: key.into() }),
            Some(Err(msg)) => {
                return Err(ConfigError::Malformed {
                    line,
                    key: key.into(),
                    msg,
                })
            }
            Some(Ok(())) => {}
        }
        seen.insert(key.to_string(), line);
    }
    cfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(cfg)
}

impl RunConfig {
    /// Every key in declaration order.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|(k, _)| format!("{k}={}\n", get_key(self, k).expect("declared key")))
            .collect()
    }

    pub fn get(&self, key: &str) -> Option<String> {
        get_key(self, key)
    }

    /// Cross-field checks, delegated to the owning modules where they exist.
    pub fn validate(&self) -> Result<()> {
        use crate::error::Error;
        self.train.validate()?;
        self.codec.validate()?;
        self.corpus.validate()?;
        if !self.attention_resolutions.is_empty() {
            return Err(Error::InvalidArgument("attention blocks are not supported; leave attention_resolutions empty".into()));
        }
        self.schedule()?;
        if self.sampling.steps == 0 || self.sampling.steps > self.diffusion.timesteps {
            return Err(Error::InvalidArgument(format!(
                "sample_steps must be in 1..={}",
                self.diffusion.timesteps
            )));
        }
        self.scales()?;
        self.grid()?;
        let factor = match self.codec.kind {
            CodecKind::Identity => 1,
            CodecKind::Autoencoder => self.codec.factor,
        };
        if !self.corpus.image_size.is_multiple_of(factor) {
            return Err(Error::InvalidArgument(format!(
                "image_size {} not divisible by codec factor {factor}",
                self.corpus.image_size
            )));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<Schedule> {
        match self.diffusion.schedule {
            ScheduleKind::Linear => linear_schedule(self.diffusion.timesteps, self.diffusion.beta_start, self.diffusion.beta_end),
        }
    }

    pub fn scales(&self) -> Result<GuidanceScales> {
        GuidanceScales::new(self.sampling.s_cnt, self.sampling.s_sty)
    }

    pub fn sampler_spec(&self, seed: u64) -> SamplerSpec {
        SamplerSpec {
            kind: self.sampling.sampler,
            steps: self.sampling.steps,
            seed,
            variance: self.sampling.variance,
            clip_x0: match (self.sampling.clip, self.codec.kind) {
                (ClipSetting::Bound(b), _) => Some(b),
                (ClipSetting::Auto, CodecKind::Identity) => Some(1.0),
                _ => None,
            },
        }
    }

    pub fn grid(&self) -> Result<Vec<Vec<GuidanceScales>>> {
        let (c, s) = (&self.sampling.grid_content_scales, &self.sampling.grid_style_scales);
        match self.sampling.grid_layout {
            GridLayout::Rows => grid_rows(c, s),
            GridLayout::Lattice => grid_lattice(c, s),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(parse_config("").unwrap(), RunConfig::default());
        assert_eq!(parse_config("# nothing\n\n   \n").unwrap(), RunConfig::default());
    }

    #[test]
    fn published_values_parse() {
        let cfg = parse_config("p_style_only=0.5\np_content_only=0.1\ntimesteps=1000\nschedule=linear\n").unwrap();
        assert_eq!(cfg.train.p_content_only, 0.1);
        assert_eq!(cfg.train.p_style_only, 0.5);
        assert_eq!(cfg.diffusion.timesteps, 1000);
        assert_eq!(cfg.diffusion.schedule, ScheduleKind::Linear);
        let d = RunConfig::default();
        assert_eq!((d.sampling.s_cnt, d.sampling.s_sty, d.sampling.steps), (0.6, 3.0, 250));
    }

    #[test]
    fn line_numbered_errors() {
        assert_eq!(
            parse_config("seed=1\nbogus=2\n"),
            Err(ConfigError::UnknownKey { line: 2, key: "bogus".into() })
        );
        assert_eq!(
            parse_config("seed=1\n# c\nseed=2\n"),
            Err(ConfigError::DuplicateKey {
                line: 3,
                key: "seed".into(),
                first: 1
            })
        );
        assert!(matches!(
            parse_config("\nlr=fast"),
            Err(ConfigError::Malformed { line: 2, .. })
        ));
        assert_eq!(parse_config("lr"), Err(ConfigError::Syntax { line: 1 }));
        assert!(matches!(parse_config("p_content_only=0.7\np_style_only=0.5"), Err(ConfigError::Invalid(_))));
        assert!(matches!(parse_config("attention_resolutions=16,8"), Err(ConfigError::Invalid(_))));
        assert!(matches!(parse_config("schedule=cosine"), Err(ConfigError::Malformed { .. })));
        assert!(matches!(parse_config("lr=inf"), Err(ConfigError::Malformed { .. })));
    }

    #[test]
    fn text_round_trip() {
        let text = "refiner_channels=4\nchannel_mults=1,2,2\nnorm_groups=4\ncodec=autoencoder\ngrid_layout=lattice\nlr=0.00025\nseed=18446744073709551615\n";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.model.refiner_channels, Some(4));
        assert_eq!(parse_config(&cfg.to_text()).unwrap(), cfg);
        let d = RunConfig::default();
        assert_eq!(parse_config(&d.to_text()).unwrap(), d);
        assert_eq!(d.to_text().lines().count(), KEYS.len());
    }

    #[test]
    fn clip_resolves_per_codec() {
        let d = RunConfig::default();
        assert_eq!(d.sampler_spec(0).clip_x0, Some(1.0));
        let ae = parse_config("codec=autoencoder\n").unwrap();
        assert_eq!(ae.sampler_spec(0).clip_x0, None);
        let cfg = parse_config("codec=autoencoder\nsample_clip=2.5\n").unwrap();
        assert_eq!(cfg.sampler_spec(0).clip_x0, Some(2.5));
        assert_eq!(parse_config("sample_clip=off\n").unwrap().sampler_spec(0).clip_x0, None);
        assert!(parse_config("sample_clip=0\n").is_err());
        assert_eq!(parse_config(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn comments_after_values() {
        let cfg = parse_config("iterations = 12   # short\n").unwrap();
        assert_eq!(cfg.train.iterations, 12);
    }
}
