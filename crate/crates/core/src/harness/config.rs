//! Training and model configuration with a `key = value` text form.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::normalize::RainScaling;

/// Branches that can be switched off for ablation runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablations {
    /// Drop the radar encoder, the rain-front branch and the virtual nodes.
    pub no_radar: bool,
    /// Drop the gauge-graph branch.
    pub no_aws: bool,
    /// Skip boundary fusion in the query encoder.
    pub no_rfe: bool,
    /// Keep only the gauge-to-radar attention direction.
    pub no_bpa_bidir: bool,
    /// Uniform decoder attention and no geographic regularizer.
    pub no_csta_geo: bool,
}

pub const ABLATION_NAMES: [&str; 5] = ["no_radar", "no_aws", "no_rfe", "no_bpa_bidir", "no_csta_geo"];

impl Ablations {
    /// Switches on one flag by name; `no_csta` is accepted for `no_csta_geo`.
    pub fn enable(&mut self, name: &str) -> Result<()> {
        match name {
            "no_radar" => self.no_radar = true,
            "no_aws" => self.no_aws = true,
            "no_rfe" => self.no_rfe = true,
            "no_bpa_bidir" => self.no_bpa_bidir = true,
            "no_csta_geo" | "no_csta" => self.no_csta_geo = true,
            other => {
                return Err(Error::Usage(format!(
                    "unknown ablation '{other}'; valid: {}",
                    ABLATION_NAMES.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Parses a comma-separated list; empty or `none` means no ablation.
    pub fn parse(list: &str) -> Result<Self> {
        let mut a = Self::default();
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty() && *s != "none") {
            a.enable(name)?;
        }
        Ok(a)
    }

    pub fn names(&self) -> Vec<&'static str> {
        let flags = [self.no_radar, self.no_aws, self.no_rfe, self.no_bpa_bidir, self.no_csta_geo];
        ABLATION_NAMES.iter().zip(flags).filter(|(_, on)| *on).map(|(n, _)| *n).collect()
    }
}

/// Architecture sizes and input scalings.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub radar_channels: usize,
    pub temporal_kernel: usize,
    /// Token width before the aligner doubles it.
    pub dim: usize,
    pub heads: usize,
    pub patch: usize,
    pub boundary_channels: usize,
    pub convlstm_kernel: usize,
    pub aws_layers: usize,
    pub virtual_nodes: usize,
    /// Chebyshev radius (cells) of the boundary-fusion neighbourhood.
    pub fuse_radius: usize,
    pub distance_bias: bool,
    pub scaling: RainScaling,
    /// Multiplier applied to reflectivity (dBZ) before the radar encoder.
    pub radar_scale: f64,
    /// Multiplier applied to the Laplacian boundary frames.
    pub boundary_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            radar_channels: 4,
            temporal_kernel: 3,
            dim: 16,
            heads: 2,
            patch: 4,
            boundary_channels: 4,
            convlstm_kernel: 3,
            aws_layers: 1,
            virtual_nodes: 16,
            fuse_radius: 2,
            distance_bias: true,
            scaling: RainScaling::Log1p,
            radar_scale: 0.02,
            boundary_scale: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Steps per input window; the target is the window's last step.
    pub window: usize,
    /// Windows per optimizer step.
    pub batch: usize,
    pub steps: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub lambda: f64,
    pub pair_budget: usize,
    /// Neighbours per node in the gauge graph.
    pub k: usize,
    /// Fraction of stations held out for evaluation.
    pub mask_ratio: f64,
    /// Fraction of visible stations hidden from the input and used as
    /// targets in each training window; 0 supervises every visible station
    /// without hiding any.
    pub pseudo_mask: f64,
    pub train_fraction: f64,
    pub seed: u64,
    pub ablation: Ablations,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            window: 6,
            batch: 32,
            steps: 1000,
            peak_lr: 5e-4,
            weight_decay: 0.01,
            clip_norm: 1.0,
            lambda: 0.1,
            pair_budget: 64,
            k: 8,
            mask_ratio: 0.2,
            pseudo_mask: 0.2,
            train_fraction: 0.8,
            seed: 0,
            ablation: Ablations::default(),
            model: ModelConfig::default(),
        }
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse '{value}' for key '{key}'")))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("expected a boolean for key '{key}', got '{value}'"))),
    }
}

impl TrainConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "window" => self.window = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "lr" => self.peak_lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "clip_norm" => self.clip_norm = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "pairs" => self.pair_budget = num(key, value)?,
            "k" => self.k = num(key, value)?,
            "mask_ratio" => self.mask_ratio = num(key, value)?,
            "pseudo_mask" => self.pseudo_mask = num(key, value)?,
            "train_fraction" => self.train_fraction = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "ablate" => self.ablation = Ablations::parse(value)?,
            "channels" => m.radar_channels = num(key, value)?,
            "temporal_kernel" => m.temporal_kernel = num(key, value)?,
            "dim" => m.dim = num(key, value)?,
            "heads" => m.heads = num(key, value)?,
            "patch" => m.patch = num(key, value)?,
            "boundary_channels" => m.boundary_channels = num(key, value)?,
            "convlstm_kernel" => m.convlstm_kernel = num(key, value)?,
            "aws_layers" => m.aws_layers = num(key, value)?,
            "virtual_nodes" => m.virtual_nodes = num(key, value)?,
            "fuse_radius" => m.fuse_radius = num(key, value)?,
            "distance_bias" => m.distance_bias = flag(key, value)?,
            "scaling" => m.scaling = RainScaling::parse(value)?,
            "radar_scale" => m.radar_scale = num(key, value)?,
            "boundary_scale" => m.boundary_scale = num(key, value)?,
            _ => return Err(Error::Usage(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines (`#` starts a comment) over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every setting, one per line, in a fixed order; parses back to `self`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let ablate = self.ablation.names();
        let ablate = if ablate.is_empty() { "none".to_string() } else { ablate.join(",") };
        let mut s = String::new();
        let rows: [(&str, String); 28] = [
            ("window", self.window.to_string()),
            ("batch", self.batch.to_string()),
            ("steps", self.steps.to_string()),
            ("lr", self.peak_lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("lambda", self.lambda.to_string()),
            ("pairs", self.pair_budget.to_string()),
            ("k", self.k.to_string()),
            ("mask_ratio", self.mask_ratio.to_string()),
            ("pseudo_mask", self.pseudo_mask.to_string()),
            ("train_fraction", self.train_fraction.to_string()),
            ("seed", self.seed.to_string()),
            ("ablate", ablate),
            ("channels", m.radar_channels.to_string()),
            ("temporal_kernel", m.temporal_kernel.to_string()),
            ("dim", m.dim.to_string()),
            ("heads", m.heads.to_string()),
            ("patch", m.patch.to_string()),
            ("boundary_channels", m.boundary_channels.to_string()),
            ("convlstm_kernel", m.convlstm_kernel.to_string()),
            ("aws_layers", m.aws_layers.to_string()),
            ("virtual_nodes", m.virtual_nodes.to_string()),
            ("fuse_radius", m.fuse_radius.to_string()),
            ("distance_bias", m.distance_bias.to_string()),
            ("scaling", m.scaling.name()),
            ("radar_scale", m.radar_scale.to_string()),
            ("boundary_scale", m.boundary_scale.to_string()),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let positive = [
            ("window", self.window),
            ("batch", self.batch),
            ("steps", self.steps),
            ("k", self.k),
            ("channels", m.radar_channels),
            ("dim", m.dim),
            ("heads", m.heads),
            ("patch", m.patch),
            ("boundary_channels", m.boundary_channels),
            ("aws_layers", m.aws_layers),
            ("fuse_radius", m.fuse_radius),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("'{k}' must be positive")));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.lambda < 0.0 || self.weight_decay < 0.0 || self.clip_norm < 0.0 {
            return Err(Error::Config("lambda, weight_decay and clip_norm must be nonnegative".into()));
        }
        for (k, v) in [("mask_ratio", self.mask_ratio), ("pseudo_mask", self.pseudo_mask)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("'{k}' must lie in [0, 1)")));
            }
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("'train_fraction' must lie in (0, 1)".into()));
        }
        if m.temporal_kernel % 2 == 0 || m.convlstm_kernel % 2 == 0 {
            return Err(Error::Config("kernel lengths must be odd".into()));
        }
        if m.dim % m.heads != 0 {
            return Err(Error::Config(format!("{} heads do not divide width {}", m.heads, m.dim)));
        }
        if self.ablation.no_radar && self.ablation.no_aws {
            return Err(Error::Config("no_radar and no_aws together leave no input".into()));
        }
        Ok(())
    }
}
