//! Run configuration: a flat `key = value` text format.
//!
//! Every field is always written, one per line, so a config serializes and
//! re-parses to an identical value. Unknown or repeated keys are errors.
//! Blank lines and `#` comments are ignored.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{EditError, Result};

/// Where region proposals come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DetectMode {
    /// Boxes recorded by the dataset generator.
    Oracle,
    /// A fixed k×k tiling of the image.
    Grid,
}

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Option<Self>;
    fn render(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Option<Self> {
                s.parse().ok()
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

plain_value!(u64, usize, bool);

impl ConfigValue for f64 {
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok().filter(|v: &f64| v.is_finite())
    }
    fn render(&self) -> String {
        // Rust's shortest round-trip formatting
        format!("{self:?}")
    }
}

impl ConfigValue for DetectMode {
    fn parse_value(s: &str) -> Option<Self> {
        match s {
            "oracle" => Some(Self::Oracle),
            "grid" => Some(Self::Grid),
            _ => None,
        }
    }
    fn render(&self) -> String {
        match self {
            Self::Oracle => "oracle".into(),
            Self::Grid => "grid".into(),
        }
    }
}

impl ConfigValue for Vec<usize> {
    fn parse_value(s: &str) -> Option<Self> {
        if s.is_empty() {
            return Some(Vec::new());
        }
        s.split(',').map(|p| p.trim().parse().ok()).collect()
    }
    fn render(&self) -> String {
        self.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }
}

macro_rules! run_config {
    ($( $(#[doc = $doc:literal])* $name:ident : $t:ty = $default:expr, )*) => {
        /// Every tunable of a run: data, model, training, sampling.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $( $(#[doc = $doc])* pub $name: $t, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $( $name: $default, )* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($name)),*];

            /// Sets one field from its textual form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($name) => {
                        self.$name = <$t as ConfigValue>::parse_value(value).ok_or_else(|| {
                            EditError::config(format!("bad value {value:?} for key {key}"))
                        })?;
                    } )*
                    _ => return Err(EditError::config(format!("unknown key {key}"))),
                }
                Ok(())
            }

            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $( writeln!(out, "{} = {}", stringify!($name), ConfigValue::render(&self.$name)).unwrap(); )*
                out
            }
        }
    };
}

run_config! {
    /// Master seed: initialization, data generation and per-step noise.
    seed: u64 = 7,
    /// Joint optimizer steps.
    steps: usize = 2000,
    /// Records per step; gradients are averaged over the batch.
    batch_size: usize = 8,
    lr: f64 = 1e-3,
    /// Cosine decay of the learning rate to zero over `steps`.
    lr_decay: bool = true,
    grad_clip: f64 = 1.0,
    /// 0 disables periodic checkpoints.
    checkpoint_every: usize = 0,
    /// Worker threads for per-record gradients (fixed reduction order).
    workers: usize = 1,

    records: usize = 8,
    image_size: usize = 16,
    patch: usize = 2,
    latent_factor: usize = 2,
    shapes_min: usize = 1,
    shapes_max: usize = 3,
    palette_size: usize = 6,
    /// Force two same-coloured shapes so the target needs a positional word.
    region_critical_only: bool = false,

    vision_width: usize = 32,
    hybrid_width: usize = 32,
    region_pool: usize = 2,
    detect_mode: DetectMode = DetectMode::Oracle,
    grid_k: usize = 2,
    use_region: bool = true,
    /// Add a 2-D sinusoidal code of the box centre to region tokens.
    region_pos_code: bool = false,

    vlm_width: usize = 64,
    vlm_layers: usize = 4,
    vlm_heads: usize = 4,
    vocab_size: usize = 64,
    img_tokens: usize = 4,
    lora_rank: usize = 4,
    lora_alpha: f64 = 8.0,
    mlp_ratio: usize = 4,

    qformer_queries: usize = 8,
    qformer_depth: usize = 2,
    /// Let the bridge queries also attend to image features (unsupported).
    qformer_image_attention: bool = false,
    cond_width: usize = 64,
    cond_heads: usize = 4,

    use_tati: bool = true,
    tati_units: usize = 2,
    tati_queries: usize = 8,
    use_hvca: bool = true,
    hvca_blocks: usize = 2,
    hvca_queries: usize = 16,
    /// Weight of the visual branch of decoupled cross-attention.
    lambda: f64 = 1.0,

    timesteps: usize = 64,
    unet_channels: usize = 32,
    unet_levels: usize = 2,
    attn_levels: Vec<usize> = vec![0, 1],
    /// Noisings per record and step; their diffusion losses are averaged.
    noise_draws: usize = 4,
    p_img: f64 = 0.05,
    p_txt: f64 = 0.05,
    s_img: f64 = 1.5,
    s_txt: f64 = 7.5,
    sample_steps: usize = 64,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| EditError::config(format!("line {}: expected key = value", lineno + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(EditError::config(format!("line {}: repeated key {key}", lineno + 1)));
            }
            cfg.set(key, value.trim())
                .map_err(|e| EditError::config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// The smallest configuration that still exercises every module; all
    /// widths are at most 8.
    pub fn micro() -> Self {
        Self {
            steps: 1,
            batch_size: 1,
            records: 1,
            image_size: 8,
            shapes_max: 2,
            vision_width: 6,
            hybrid_width: 4,
            region_pool: 1,
            vlm_width: 8,
            vlm_layers: 1,
            vlm_heads: 2,
            img_tokens: 2,
            lora_rank: 2,
            lora_alpha: 4.0,
            mlp_ratio: 1,
            qformer_queries: 3,
            qformer_depth: 1,
            cond_width: 8,
            cond_heads: 2,
            tati_units: 1,
            tati_queries: 2,
            hvca_blocks: 1,
            hvca_queries: 2,
            unet_channels: 4,
            noise_draws: 1,
            sample_steps: 4,
            ..Self::default()
        }
    }

    /// Largest hidden width of any module.
    pub fn max_width(&self) -> usize {
        [
            self.vision_width,
            self.hybrid_width,
            self.vlm_width,
            self.vlm_width * self.mlp_ratio,
            self.cond_width,
            2 * self.unet_channels,
            self.unet_channels << self.unet_levels.saturating_sub(1),
        ]
        .into_iter()
        .max()
        .unwrap_or(0)
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / self.latent_factor
    }

    pub fn latent_channels(&self) -> usize {
        self.latent_factor * self.latent_factor * 3
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(EditError::Config(msg));
        let size = self.image_size;
        if size == 0 || self.patch == 0 || !size.is_multiple_of(2 * self.patch) {
            return fail(format!(
                "image_size {size} must be divisible by 2·patch = {}",
                2 * self.patch
            ));
        }
        if self.latent_factor == 0 || !size.is_multiple_of(self.latent_factor) {
            return fail(format!("image_size {size} not divisible by latent_factor {}", self.latent_factor));
        }
        let latent = self.latent_size();
        if self.unet_levels == 0 || !latent.is_multiple_of(1 << (self.unet_levels - 1)) {
            return fail(format!("latent size {latent} cannot be halved {} times", self.unet_levels - 1));
        }
        if let Some(&l) = self.attn_levels.iter().find(|&&l| l >= self.unet_levels) {
            return fail(format!("attention level {l} >= unet_levels {}", self.unet_levels));
        }
        if self.vlm_heads == 0 || !self.vlm_width.is_multiple_of(self.vlm_heads) {
            return fail(format!("vlm_width {} not divisible by vlm_heads {}", self.vlm_width, self.vlm_heads));
        }
        if self.cond_heads == 0 || !self.cond_width.is_multiple_of(self.cond_heads) {
            return fail(format!("cond_width {} not divisible by cond_heads {}", self.cond_width, self.cond_heads));
        }
        let positive = [
            ("lora_rank", self.lora_rank),
            ("img_tokens", self.img_tokens),
            ("qformer_queries", self.qformer_queries),
            ("qformer_depth", self.qformer_depth),
            ("tati_units", self.tati_units),
            ("tati_queries", self.tati_queries),
            ("hvca_blocks", self.hvca_blocks),
            ("hvca_queries", self.hvca_queries),
            ("timesteps", self.timesteps),
            ("batch_size", self.batch_size),
            ("records", self.records),
            ("region_pool", self.region_pool),
            ("grid_k", self.grid_k),
            ("workers", self.workers),
            ("mlp_ratio", self.mlp_ratio),
            ("noise_draws", self.noise_draws),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return fail(format!("{name} must be at least 1"));
        }
        // the linear ramp ends at 20/T, which must stay below 1
        if self.timesteps <= 20 {
            return fail(format!("timesteps {} must exceed 20", self.timesteps));
        }
        if self.sample_steps == 0 || self.sample_steps > self.timesteps {
            return fail(format!("sample_steps {} outside 1..={}", self.sample_steps, self.timesteps));
        }
        if self.shapes_min == 0 || self.shapes_min > self.shapes_max || self.shapes_max > 3 {
            return fail(format!("shape count range {}..={} outside 1..=3", self.shapes_min, self.shapes_max));
        }
        if !(2..=crate::data::PALETTE.len()).contains(&self.palette_size) {
            return fail(format!("palette_size {} outside 2..={}", self.palette_size, crate::data::PALETTE.len()));
        }
        if self.vocab_size < crate::data::VOCAB.len() {
            return fail(format!(
                "vocab_size {} smaller than the instruction vocabulary ({})",
                self.vocab_size,
                crate::data::VOCAB.len()
            ));
        }
        for (name, p) in [("p_img", self.p_img), ("p_txt", self.p_txt)] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} = {p} is not a probability"));
            }
        }
        if self.qformer_image_attention {
            return fail("qformer_image_attention is not supported; the bridge attends to the edit states only".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_micro_validate() {
        RunConfig::default().validate().unwrap();
        RunConfig::micro().validate().unwrap();
    }

    #[test]
    fn round_trip_is_identity() {
        let mut cfg = RunConfig::micro();
        cfg.lr = 3.3e-4;
        cfg.attn_levels = vec![1];
        cfg.detect_mode = DetectMode::Grid;
        let text = cfg.to_text();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
        assert_eq!(text.lines().count(), RunConfig::KEYS.len());
    }

    #[test]
    fn unknown_and_repeated_keys_fail() {
        assert!(matches!(RunConfig::parse("bogus = 1"), Err(EditError::Config(_))));
        assert!(RunConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(RunConfig::parse("seed = x").is_err());
        assert!(RunConfig::parse("lr = nan").is_err());
        let cfg = RunConfig::parse("# comment\n\nseed = 3  # trailing\n").unwrap();
        assert_eq!(cfg.seed, 3);
    }

    #[test]
    fn invalid_extents_are_config_errors() {
        assert!(RunConfig::parse("image_size = 10").is_err());
        assert!(RunConfig::parse("attn_levels = 0,2").is_err());
        assert!(RunConfig::parse("qformer_image_attention = true").is_err());
    }
}
