//! Flat `key = value` run configuration.
//!
//! Values resolve in three layers: profile defaults, then a config file,
//! then command-line overrides. The `profile` key picks the defaults and
//! is itself resolved first (command line over file).

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::pipeline::loss::CharbonnierMode;
use crate::pipeline::model::IagcConfig;
use crate::pipeline::train::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Profile {
    /// Small crops and batches for a laptop CPU.
    #[default]
    Desk,
    /// The published schedule.
    Paper,
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Desk => "desk",
            Self::Paper => "paper",
        })
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "desk" => Ok(Self::Desk),
            "paper" => Ok(Self::Paper),
            _ => Err(Error::Config(format!("profile must be `desk` or `paper`, got `{s}`"))),
        }
    }
}

/// Every accepted key with a short description, in echo order.
pub const KEYS: &[(&str, &str)] = &[
    ("profile", "default set: desk or paper"),
    ("embed_dim", "feature channels c"),
    ("heads", "attention heads; must divide embed_dim"),
    ("depth", "number of blocks L"),
    ("window_size", "window side w"),
    ("global_dim", "window-token width; 0 means 4 x embed_dim"),
    ("mlp_ratio", "transformer MLP expansion"),
    ("taylor_order", "order of the gamma polynomial"),
    ("gamma_floor", "clamp floor before the logarithm"),
    ("attention", "attention variant A1..A4"),
    ("gamma", "gamma-module variant G1..G3"),
    ("epochs", "training epochs"),
    ("batch_size", "pairs per step"),
    ("steps_per_epoch", "0 means ceil(pairs / batch_size)"),
    ("lr", "base learning rate"),
    ("weight_decay", "decoupled weight decay"),
    ("beta1", "Adam first-moment decay"),
    ("beta2", "Adam second-moment decay"),
    ("adam_eps", "Adam denominator epsilon"),
    ("drop_path", "stochastic depth probability"),
    ("crop_size", "training crop side"),
    ("flip", "random horizontal flips (true/false)"),
    ("seed", "seed for initialization and sampling"),
    ("charbonnier", "whole or pixel"),
    ("charbonnier_eps", "Charbonnier epsilon"),
    ("checkpoint_every", "steps between checkpoints; 0 only at the end"),
    ("probe_every", "steps between probe PSNRs; 0 disables"),
    ("data_dir", "dataset directory with low/ and gt/"),
    ("out_dir", "run output directory"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub profile: Profile,
    pub model: IagcConfig,
    pub train: TrainConfig,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_profile(Profile::Desk)
    }
}

fn parse_value<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

fn unknown_key(key: &str) -> Error {
    let valid: Vec<&str> = KEYS.iter().map(|(k, _)| *k).collect();
    Error::Config(format!("unknown key `{key}`; valid keys: {}", valid.join(", ")))
}

/// `key = value` pairs of a config file, in order.
pub fn parse_entries(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: missing key", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let train = match profile {
            Profile::Desk => TrainConfig::desk(),
            Profile::Paper => TrainConfig::paper(),
        };
        let model = IagcConfig {
            crop_size: train.crop_size,
            ..IagcConfig::default()
        };
        RunConfig {
            profile,
            model,
            train,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/iagc"),
        }
    }

    /// Resolve defaults, then `file` entries, then `overrides`, and validate.
    pub fn resolve(file: &[(String, String)], overrides: &[(String, String)]) -> Result<Self> {
        let pick = |src: &[(String, String)]| src.iter().rev().find(|(k, _)| k == "profile").map(|(_, v)| v.clone());
        let profile = match pick(overrides).or_else(|| pick(file)) {
            Some(p) => p.parse()?,
            None => Profile::Desk,
        };
        let mut cfg = Self::for_profile(profile);
        for (k, v) in file.iter().chain(overrides) {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse config-file text and resolve it with `overrides`.
    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        Self::resolve(&parse_entries(text)?, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (m, t) = (&mut self.model, &mut self.train);
        let v = value.trim();
        match key {
            "profile" => self.profile = v.parse()?,
            "embed_dim" => m.embed_dim = parse_value(key, v)?,
            "heads" => m.heads = parse_value(key, v)?,
            "depth" => m.depth = parse_value(key, v)?,
            "window_size" => m.window_size = parse_value(key, v)?,
            "global_dim" => m.global_dim = parse_value(key, v)?,
            "mlp_ratio" => m.mlp_ratio = parse_value(key, v)?,
            "taylor_order" => m.taylor_order = parse_value(key, v)?,
            "gamma_floor" => m.floor = parse_value(key, v)?,
            "attention" => m.attention = v.parse()?,
            "gamma" => m.gamma = v.parse()?,
            "epochs" => t.epochs = parse_value(key, v)?,
            "batch_size" => t.batch_size = parse_value(key, v)?,
            "steps_per_epoch" => t.steps_per_epoch = parse_value(key, v)?,
            "lr" => t.lr = parse_value(key, v)?,
            "weight_decay" => t.adam.weight_decay = parse_value(key, v)?,
            "beta1" => t.adam.beta1 = parse_value(key, v)?,
            "beta2" => t.adam.beta2 = parse_value(key, v)?,
            "adam_eps" => t.adam.eps = parse_value(key, v)?,
            "drop_path" => t.drop_path = parse_value(key, v)?,
            "crop_size" => {
                t.crop_size = parse_value(key, v)?;
                m.crop_size = t.crop_size;
            }
            "flip" => t.flip = parse_bool(key, v)?,
            "seed" => t.seed = parse_value(key, v)?,
            "charbonnier" => t.loss.charbonnier = v.parse::<CharbonnierMode>()?,
            "charbonnier_eps" => t.loss.eps = parse_value(key, v)?,
            "checkpoint_every" => t.checkpoint_every = parse_value(key, v)?,
            "probe_every" => t.probe_every = parse_value(key, v)?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            _ => return Err(unknown_key(key)),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let (m, t) = (&self.model, &self.train);
        Ok(match key {
            "profile" => self.profile.to_string(),
            "embed_dim" => m.embed_dim.to_string(),
            "heads" => m.heads.to_string(),
            "depth" => m.depth.to_string(),
            "window_size" => m.window_size.to_string(),
            "global_dim" => m.global_dim.to_string(),
            "mlp_ratio" => m.mlp_ratio.to_string(),
            "taylor_order" => m.taylor_order.to_string(),
            "gamma_floor" => m.floor.to_string(),
            "attention" => m.attention.to_string(),
            "gamma" => m.gamma.to_string(),
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "steps_per_epoch" => t.steps_per_epoch.to_string(),
            "lr" => t.lr.to_string(),
            "weight_decay" => t.adam.weight_decay.to_string(),
            "beta1" => t.adam.beta1.to_string(),
            "beta2" => t.adam.beta2.to_string(),
            "adam_eps" => t.adam.eps.to_string(),
            "drop_path" => t.drop_path.to_string(),
            "crop_size" => t.crop_size.to_string(),
            "flip" => t.flip.to_string(),
            "seed" => t.seed.to_string(),
            "charbonnier" => t.loss.charbonnier.to_string(),
            "charbonnier_eps" => t.loss.eps.to_string(),
            "checkpoint_every" => t.checkpoint_every.to_string(),
            "probe_every" => t.probe_every.to_string(),
            "data_dir" => self.data_dir.display().to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            _ => return Err(unknown_key(key)),
        })
    }

    /// Every key with its resolved value, one `key = value` line each.
    /// Parsing the echo reproduces the configuration.
    pub fn echo(&self) -> String {
        KEYS.iter()
            .map(|(k, _)| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }
}
