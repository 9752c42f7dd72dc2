//! Plain-text `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Later assignments
//! win, so command-line overrides are applied after the file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::activation::Activation;
use crate::dataset::{DatasetSpec, PerturbConfig};
use crate::error::{GleanError, Result};
use crate::model::{DiscriminatorConfig, GeneratorConfig};
use crate::training::{GanLoss, TrainingConfig};

/// Generator hyperparameters; every FFC block shares them.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorSettings {
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub blocks: usize,
    pub alpha_in: f32,
    pub alpha_out: f32,
    pub kernel_size: usize,
    pub activation: Activation,
    pub output_scale: f32,
}

impl Default for GeneratorSettings {
    fn default() -> Self {
        let r = GeneratorConfig::reference();
        GeneratorSettings {
            stem_channels: r.stem_channels,
            stem_kernel: r.stem_kernel,
            blocks: r.blocks.len(),
            alpha_in: r.blocks[0].alpha_in,
            alpha_out: r.blocks[0].alpha_out,
            kernel_size: r.blocks[0].kernel_size,
            activation: r.activation,
            output_scale: r.output_scale,
        }
    }
}

impl GeneratorSettings {
    pub fn build(&self) -> Result<GeneratorConfig> {
        let mut g = GeneratorConfig::uniform(
            self.stem_channels,
            self.blocks,
            self.alpha_in,
            self.alpha_out,
            self.kernel_size,
            self.output_scale,
        );
        g.stem_kernel = self.stem_kernel;
        g.activation = self.activation;
        for b in &mut g.blocks {
            b.activation = self.activation;
        }
        g.validate()?;
        Ok(g)
    }
}

/// Everything a `train` run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub training: TrainingConfig,
    pub generator: GeneratorSettings,
    pub discriminator: DiscriminatorConfig,
    /// Used to synthesize a dataset when no manifest is given.
    pub data: DatasetSpec,
    pub manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            training: TrainingConfig::default(),
            generator: GeneratorSettings::default(),
            discriminator: DiscriminatorConfig::reference(),
            data: DatasetSpec {
                pairs: 240,
                size: 64,
                seed: 0,
                perturb: PerturbConfig::default(),
            },
            manifest: None,
            out_dir: PathBuf::from("run"),
            resume: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| GleanError::config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(GleanError::config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|s| parse(key, s.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

/// Keys that name locations rather than model or training settings.
pub const PATH_KEYS: [&str; 3] = ["manifest", "out_dir", "resume"];

impl RunConfig {
    /// Assigns one key. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.training;
        let g = &mut self.generator;
        let d = &mut self.discriminator;
        match key {
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "adam_beta1" => t.adam_beta1 = parse(key, value)?,
            "adam_beta2" => t.adam_beta2 = parse(key, value)?,
            "adam_eps" => t.adam_eps = parse(key, value)?,
            "lambda_l1" => t.lambda_l1 = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "loss" => t.loss = value.parse::<GanLoss>()?,
            "grad_clip" => {
                t.grad_clip = match value {
                    "" | "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "checkpoint_every" => t.checkpoint_every = parse(key, value)?,

            "gen.stem_channels" => g.stem_channels = parse(key, value)?,
            "gen.stem_kernel" => g.stem_kernel = parse(key, value)?,
            "gen.blocks" => g.blocks = parse(key, value)?,
            "gen.alpha_in" => g.alpha_in = parse(key, value)?,
            "gen.alpha_out" => g.alpha_out = parse(key, value)?,
            "gen.kernel_size" => g.kernel_size = parse(key, value)?,
            "gen.activation" => g.activation = value.parse()?,
            "gen.output_scale" => g.output_scale = parse(key, value)?,

            "disc.channels" => d.channels = parse_list(key, value)?,
            "disc.strides" => d.strides = parse_list(key, value)?,
            "disc.kernel_size" => d.kernel_size = parse(key, value)?,
            "disc.activation" => d.activation = value.parse()?,
            "disc.conditioned" => d.conditioned = parse_bool(key, value)?,

            "data.pairs" => self.data.pairs = parse(key, value)?,
            "data.size" => self.data.size = parse(key, value)?,
            "data.seed" => self.data.seed = parse(key, value)?,
            "data.amplitude" => self.data.perturb.amplitude = parse(key, value)?,
            "data.f_lo" => self.data.perturb.f_lo = parse(key, value)?,
            "data.f_hi" => self.data.perturb.f_hi = parse(key, value)?,

            "manifest" => self.manifest = optional_path(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "resume" => self.resume = optional_path(value),
            other => return Err(GleanError::config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.training;
        let g = &self.generator;
        let d = &self.discriminator;
        let p = |o: &Option<PathBuf>| o.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        vec![
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("learning_rate", t.learning_rate.to_string()),
            ("adam_beta1", t.adam_beta1.to_string()),
            ("adam_beta2", t.adam_beta2.to_string()),
            ("adam_eps", t.adam_eps.to_string()),
            ("lambda_l1", t.lambda_l1.to_string()),
            ("seed", t.seed.to_string()),
            ("loss", t.loss.to_string()),
            ("grad_clip", t.grad_clip.map_or("none".into(), |c| c.to_string())),
            ("checkpoint_every", t.checkpoint_every.to_string()),
            ("gen.stem_channels", g.stem_channels.to_string()),
            ("gen.stem_kernel", g.stem_kernel.to_string()),
            ("gen.blocks", g.blocks.to_string()),
            ("gen.alpha_in", g.alpha_in.to_string()),
            ("gen.alpha_out", g.alpha_out.to_string()),
            ("gen.kernel_size", g.kernel_size.to_string()),
            ("gen.activation", g.activation.to_string()),
            ("gen.output_scale", g.output_scale.to_string()),
            ("disc.channels", join(&d.channels)),
            ("disc.strides", join(&d.strides)),
            ("disc.kernel_size", d.kernel_size.to_string()),
            ("disc.activation", d.activation.to_string()),
            ("disc.conditioned", d.conditioned.to_string()),
            ("data.pairs", self.data.pairs.to_string()),
            ("data.size", self.data.size.to_string()),
            ("data.seed", self.data.seed.to_string()),
            ("data.amplitude", self.data.perturb.amplitude.to_string()),
            ("data.f_lo", self.data.perturb.f_lo.to_string()),
            ("data.f_hi", self.data.perturb.f_hi.to_string()),
            ("manifest", p(&self.manifest)),
            ("out_dir", self.out_dir.display().to_string()),
            ("resume", p(&self.resume)),
        ]
    }

    /// Entries without the location keys.
    pub fn settings(&self) -> Vec<(&'static str, String)> {
        self.entries()
            .into_iter()
            .filter(|(k, _)| !PATH_KEYS.contains(k))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| GleanError::config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| GleanError::config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// Applies `KEY=VALUE` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| GleanError::config(format!("override `{o}` is not KEY=VALUE")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GleanError::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        self.generator.build()?;
        self.discriminator.validate()?;
        self.data.perturb.validate()?;
        if self.manifest.is_none() {
            if self.data.pairs < 2 {
                return Err(GleanError::config("data.pairs must be at least 2"));
            }
            let m = self.discriminator.required_multiple().max(8);
            if self.data.size == 0 || !self.data.size.is_multiple_of(m) {
                return Err(GleanError::config(format!(
                    "data.size {} must be a positive multiple of {m}",
                    self.data.size
                )));
            }
        }
        Ok(())
    }
}
