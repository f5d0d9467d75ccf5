//! Run configuration as flat `key=value` text.
//!
//! Keys carry a section prefix (`model.`, `neuron.`, `loss.`, `memory.`,
//! `optim.`, `ablation.`, `data.`) except the top-level `seed`. Blank lines
//! and `#` comments are ignored; unknown keys are rejected.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::hral::LossWeights;
use crate::model::ModelConfig;
use crate::optim::AdamWConfig;
use crate::spiking::NiLifConfig;

/// Which auxiliary parts of the objective are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    pub ssa: bool,
    pub shs: bool,
    pub hral: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            ssa: true,
            shs: true,
            hral: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: SyntheticSpec,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub memory_capacity: usize,
    pub optim: AdamWConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub ablation: Ablation,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: SyntheticSpec::default(),
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            memory_capacity: 4,
            optim: AdamWConfig::default(),
            epochs: 5,
            batch_size: 16,
            ablation: Ablation::default(),
        }
    }
}

fn parse_num<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets one key; unknown keys are usage errors.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "data.classes" => {
                self.data.classes = parse_num(key, v)?;
                self.model.num_classes = self.data.classes;
            }
            "data.drone_views" => self.data.drone_views = parse_num(key, v)?,
            "data.image_size" => {
                self.data.image_size = parse_num(key, v)?;
                self.model.image_size = self.data.image_size;
            }
            "data.max_rotation_deg" => self.data.max_rotation_deg = parse_num(key, v)?,
            "data.scale_min" => self.data.scale_range.0 = parse_num(key, v)?,
            "data.scale_max" => self.data.scale_range.1 = parse_num(key, v)?,
            "data.max_shift" => self.data.max_shift = parse_num(key, v)?,
            "data.brightness_min" => self.data.brightness_range.0 = parse_num(key, v)?,
            "data.brightness_max" => self.data.brightness_range.1 = parse_num(key, v)?,
            "model.widths" => {
                let parts: Vec<usize> = v.split(',').map(|p| parse_num(key, p.trim())).collect::<Result<_>>()?;
                self.model.widths = parts
                    .try_into()
                    .map_err(|_| Error::Config(format!("model.widths needs three values, got {v:?}")))?;
            }
            "model.conv_blocks" => self.model.conv_blocks = parse_num(key, v)?,
            "model.transformer_blocks" => self.model.transformer_blocks = parse_num(key, v)?,
            "model.mlp_ratio" => self.model.mlp_ratio = parse_num(key, v)?,
            "model.state_dim" => self.model.state_dim = parse_num(key, v)?,
            "neuron.d_max" => self.model.neuron.d_max = parse_num(key, v)?,
            "neuron.beta" => self.model.neuron.beta = parse_num(key, v)?,
            "neuron.t_steps" => self.model.neuron.t_steps = parse_num(key, v)?,
            "loss.lambda1" => self.loss.lambda1 = parse_num(key, v)?,
            "loss.lambda2" => self.loss.lambda2 = parse_num(key, v)?,
            "loss.alpha" => self.loss.alpha = parse_num(key, v)?,
            "loss.k" => self.loss.k = parse_num(key, v)?,
            "loss.tau" => self.loss.tau = parse_num(key, v)?,
            "memory.capacity" => self.memory_capacity = parse_num(key, v)?,
            "optim.lr" => self.optim.lr = parse_num(key, v)?,
            "optim.weight_decay" => self.optim.weight_decay = parse_num(key, v)?,
            "optim.epochs" => self.epochs = parse_num(key, v)?,
            "optim.batch_size" => self.batch_size = parse_num(key, v)?,
            "ablation.ssa" => self.ablation.ssa = parse_bool(key, v)?,
            "ablation.shs" => self.ablation.shs = parse_bool(key, v)?,
            "ablation.hral" => self.ablation.hral = parse_bool(key, v)?,
            _ => return Err(Error::Usage(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        if self.model.num_classes != self.data.classes || self.model.image_size != self.data.image_size {
            return Err(Error::Config("model and data sections disagree on classes or image size".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("optim.epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("optim.batch_size must be at least 2".into()));
        }
        NiLifConfig::validate(&self.model.neuron)
    }

    /// Every key with its current value, in a form [`RunConfig::parse`] reads back.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let d = &self.data;
        let m = &self.model;
        let l = &self.loss;
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "data.classes={}", d.classes);
        let _ = writeln!(s, "data.drone_views={}", d.drone_views);
        let _ = writeln!(s, "data.image_size={}", d.image_size);
        let _ = writeln!(s, "data.max_rotation_deg={}", d.max_rotation_deg);
        let _ = writeln!(s, "data.scale_min={}", d.scale_range.0);
        let _ = writeln!(s, "data.scale_max={}", d.scale_range.1);
        let _ = writeln!(s, "data.max_shift={}", d.max_shift);
        let _ = writeln!(s, "data.brightness_min={}", d.brightness_range.0);
        let _ = writeln!(s, "data.brightness_max={}", d.brightness_range.1);
        let _ = writeln!(s, "model.widths={},{},{}", m.widths[0], m.widths[1], m.widths[2]);
        let _ = writeln!(s, "model.conv_blocks={}", m.conv_blocks);
        let _ = writeln!(s, "model.transformer_blocks={}", m.transformer_blocks);
        let _ = writeln!(s, "model.mlp_ratio={}", m.mlp_ratio);
        let _ = writeln!(s, "model.state_dim={}", m.state_dim);
        let _ = writeln!(s, "neuron.d_max={}", m.neuron.d_max);
        let _ = writeln!(s, "neuron.beta={}", m.neuron.beta);
        let _ = writeln!(s, "neuron.t_steps={}", m.neuron.t_steps);
        let _ = writeln!(s, "loss.lambda1={}", l.lambda1);
        let _ = writeln!(s, "loss.lambda2={}", l.lambda2);
        let _ = writeln!(s, "loss.alpha={}", l.alpha);
        let _ = writeln!(s, "loss.k={}", l.k);
        let _ = writeln!(s, "loss.tau={}", l.tau);
        let _ = writeln!(s, "memory.capacity={}", self.memory_capacity);
        let _ = writeln!(s, "optim.lr={}", self.optim.lr);
        let _ = writeln!(s, "optim.weight_decay={}", self.optim.weight_decay);
        let _ = writeln!(s, "optim.epochs={}", self.epochs);
        let _ = writeln!(s, "optim.batch_size={}", self.batch_size);
        let _ = writeln!(s, "ablation.ssa={}", self.ablation.ssa);
        let _ = writeln!(s, "ablation.shs={}", self.ablation.shs);
        let _ = writeln!(s, "ablation.hral={}", self.ablation.hral);
        s
    }
}
