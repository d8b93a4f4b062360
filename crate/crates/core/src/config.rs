//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! errors. The canonical text form (every key, fixed order) is what the
//! config hash is computed over, so two configs that differ only in comments
//! or key order hash the same.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::checkpoint::short_hash;
use crate::decoding::{DecodeSettings, Pooling};
use crate::denoiser::DenoiserConfig;
use crate::diffusion::TrainConfig;
use crate::error::{invalid, Error, Result};
use crate::schedule::ScheduleKind;
use crate::synthdata::{feature_space, CaptionGrammar, GRID_SIDE};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: u64,

    // corpus
    pub n_shapes: usize,
    pub gen_views: usize,
    pub captions_per_shape: usize,
    pub cap_len: usize,

    // model
    pub embed_dim: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_mult: usize,
    pub dropout: f64,

    // training
    pub schedule: ScheduleKind,
    pub diffusion_steps: usize,
    pub batch_size: usize,
    pub train_steps: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub reg_weight: f64,
    pub ce_weight: f64,
    pub grad_clip: f64,
    pub train_clamp: bool,
    pub import_embeddings: Option<PathBuf>,
    pub freeze_embeddings: bool,
    pub checkpoint_every: usize,

    // decoding
    pub views: usize,
    pub samples: usize,
    pub pooling: Pooling,
    pub clamp: bool,
    pub inference_steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            dataset: None,
            checkpoint: None,
            out: None,
            seed: 0,
            n_shapes: 256,
            gen_views: 10,
            captions_per_shape: 1,
            cap_len: crate::synthdata::DEFAULT_CAPTION_LEN,
            embed_dim: 128,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            ff_mult: 4,
            dropout: 0.0,
            schedule: train.schedule,
            diffusion_steps: train.diffusion_steps,
            batch_size: train.batch_size,
            train_steps: train.train_steps,
            learning_rate: train.learning_rate,
            warmup_steps: train.warmup_steps,
            reg_weight: train.reg_weight,
            ce_weight: train.ce_weight,
            grad_clip: train.grad_clip,
            train_clamp: train.clamp_enabled,
            import_embeddings: None,
            freeze_embeddings: false,
            checkpoint_every: 1000,
            views: 10,
            samples: 5,
            pooling: Pooling::Max,
            clamp: true,
            inference_steps: 200,
        }
    }
}

pub const KEYS: [&str; 32] = [
    "dataset",
    "checkpoint",
    "out",
    "seed",
    "n_shapes",
    "gen_views",
    "captions_per_shape",
    "cap_len",
    "embed_dim",
    "d_model",
    "n_layers",
    "n_heads",
    "ff_mult",
    "dropout",
    "schedule",
    "diffusion_steps",
    "batch_size",
    "train_steps",
    "learning_rate",
    "warmup_steps",
    "reg_weight",
    "ce_weight",
    "grad_clip",
    "train_clamp",
    "import_embeddings",
    "freeze_embeddings",
    "checkpoint_every",
    "views",
    "samples",
    "pooling",
    "clamp",
    "inference_steps",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| invalid(format!("{key} = '{value}': {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(invalid(format!("{key} = '{value}': expected a boolean"))),
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    if value.is_empty() {
        None
    } else {
        Some(PathBuf::from(value))
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| invalid(format!("config line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair.split_once('=').ok_or_else(|| invalid(format!("override '{pair}' is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset" => self.dataset = opt_path(value),
            "checkpoint" => self.checkpoint = opt_path(value),
            "out" => self.out = opt_path(value),
            "seed" => self.seed = parse(key, value)?,
            "n_shapes" => self.n_shapes = parse(key, value)?,
            "gen_views" => self.gen_views = parse(key, value)?,
            "captions_per_shape" => self.captions_per_shape = parse(key, value)?,
            "cap_len" => self.cap_len = parse(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "d_model" => self.d_model = parse(key, value)?,
            "n_layers" => self.n_layers = parse(key, value)?,
            "n_heads" => self.n_heads = parse(key, value)?,
            "ff_mult" => self.ff_mult = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "schedule" => self.schedule = value.parse()?,
            "diffusion_steps" => self.diffusion_steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "train_steps" => self.train_steps = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "warmup_steps" => self.warmup_steps = parse(key, value)?,
            "reg_weight" => self.reg_weight = parse(key, value)?,
            "ce_weight" => self.ce_weight = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            "train_clamp" => self.train_clamp = parse_bool(key, value)?,
            "import_embeddings" => self.import_embeddings = opt_path(value),
            "freeze_embeddings" => self.freeze_embeddings = parse_bool(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "views" => self.views = parse(key, value)?,
            "samples" => self.samples = parse(key, value)?,
            "pooling" => self.pooling = value.parse()?,
            "clamp" => self.clamp = parse_bool(key, value)?,
            "inference_steps" => self.inference_steps = parse(key, value)?,
            _ => return Err(invalid(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Canonical `key = value` text for every setting.
    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("dataset", path(&self.dataset));
        kv("checkpoint", path(&self.checkpoint));
        kv("out", path(&self.out));
        kv("seed", self.seed.to_string());
        kv("n_shapes", self.n_shapes.to_string());
        kv("gen_views", self.gen_views.to_string());
        kv("captions_per_shape", self.captions_per_shape.to_string());
        kv("cap_len", self.cap_len.to_string());
        kv("embed_dim", self.embed_dim.to_string());
        kv("d_model", self.d_model.to_string());
        kv("n_layers", self.n_layers.to_string());
        kv("n_heads", self.n_heads.to_string());
        kv("ff_mult", self.ff_mult.to_string());
        kv("dropout", self.dropout.to_string());
        kv("schedule", self.schedule.to_string());
        kv("diffusion_steps", self.diffusion_steps.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("train_steps", self.train_steps.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("warmup_steps", self.warmup_steps.to_string());
        kv("reg_weight", self.reg_weight.to_string());
        kv("ce_weight", self.ce_weight.to_string());
        kv("grad_clip", self.grad_clip.to_string());
        kv("train_clamp", self.train_clamp.to_string());
        kv("import_embeddings", path(&self.import_embeddings));
        kv("freeze_embeddings", self.freeze_embeddings.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("views", self.views.to_string());
        kv("samples", self.samples.to_string());
        kv("pooling", self.pooling.to_string());
        kv("clamp", self.clamp.to_string());
        kv("inference_steps", self.inference_steps.to_string());
        s
    }

    pub fn hash(&self) -> String {
        short_hash(self.to_text().as_bytes())
    }

    pub fn grammar(&self) -> CaptionGrammar {
        CaptionGrammar { cap_len: self.cap_len, captions_per_shape: self.captions_per_shape }
    }

    pub fn model_config(&self, vocab_size: usize) -> DenoiserConfig {
        DenoiserConfig {
            embed_dim: self.embed_dim,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            ff_mult: self.ff_mult,
            img_len: GRID_SIDE * GRID_SIDE,
            cap_len: self.cap_len,
            t_max: self.diffusion_steps,
            dropout: self.dropout,
            vocab_size,
            features: feature_space(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            schedule: self.schedule,
            diffusion_steps: self.diffusion_steps,
            batch_size: self.batch_size,
            train_steps: self.train_steps,
            learning_rate: self.learning_rate,
            warmup_steps: self.warmup_steps,
            reg_weight: self.reg_weight,
            ce_weight: self.ce_weight,
            clamp_enabled: self.train_clamp,
            grad_clip: self.grad_clip,
            freeze_token_embeddings: self.freeze_embeddings,
            seed: self.seed,
        }
    }

    pub fn decode_settings(&self) -> DecodeSettings {
        DecodeSettings { samples: self.samples, pooling: self.pooling, clamp_enabled: self.clamp, seed: self.seed }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.model_config(8).validate()?;
        if self.views == 0 || self.samples == 0 || self.inference_steps == 0 {
            return Err(invalid("views, samples and inference_steps must be positive"));
        }
        if self.inference_steps > self.diffusion_steps {
            return Err(Error::InvalidArgument(format!(
                "inference_steps {} exceeds diffusion_steps {}",
                self.inference_steps, self.diffusion_steps
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_override_and_canonical_hash() {
        let mut a = RunConfig::default();
        a.apply_text("# comment\nembed_dim = 32\n\nschedule = cosine\nclamp = off\n").unwrap();
        assert_eq!(a.embed_dim, 32);
        assert_eq!(a.schedule, ScheduleKind::Cosine);
        assert!(!a.clamp);
        let mut b = RunConfig::default();
        b.apply_text("clamp=false\nschedule=cosine\nembed_dim=32").unwrap();
        assert_eq!(a.hash(), b.hash());
        b.set_pair("seed=9").unwrap();
        assert_ne!(a.hash(), b.hash());

        assert_eq!(b.to_text().lines().count(), KEYS.len());
        for (line, key) in b.to_text().lines().zip(KEYS) {
            assert!(line.starts_with(key));
        }
        let mut round = RunConfig::default();
        round.apply_text(&b.to_text()).unwrap();
        assert_eq!(round, b);
    }

    #[test]
    fn rejects_bad_input() {
        let mut c = RunConfig::default();
        assert!(c.apply_text("bogus = 1").is_err());
        assert!(c.apply_text("seed").is_err());
        assert!(c.set("embed_dim", "abc").is_err());
        assert!(c.set("pooling", "median").is_err());
        c.inference_steps = c.diffusion_steps + 1;
        assert!(c.validate().is_err());
    }
}
