//! Training configuration and its flat `key = value` text format.
//!
//! Keys are the field names of [`TrainConfig`]. Lists (`lambda`, `split`,
//! `kernel_sizes`) are comma separated, flags accept `on/off`, `true/false`
//! or `1/0`. Blank lines and `#` comments are ignored; unknown or repeated
//! keys are errors.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::bridging::{AttentionConfig, ContrastiveConfig};
use crate::encoders::{GatConfig, GraphConfig, TextEncoderConfig};
use crate::error::{Error, Result};
use crate::fusion::{FusionKind, LossWeights};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(f.is_finite() && *f >= 0.0))
            || ((parts.iter().sum::<f64>()) - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(format!(
                "split fractions {parts:?} must be non-negative and sum to 1"
            )));
        }
        Ok(())
    }
}

/// Which auxiliary components are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    /// Supervised contrastive representation enhancement.
    pub mre: bool,
    pub cmca: bool,
    pub ml: bool,
    /// Adaptive fusion; when off, fusion falls back to `is-concat`.
    pub af: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            mre: true,
            cmca: true,
            ml: true,
            af: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub d: usize,
    pub heads: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub dropout: f64,
    pub tau_scl: f64,
    pub tau_cmca: f64,
    pub lambda: LossWeights,
    pub theta: f64,
    pub seed: u64,
    pub split: SplitFractions,
    pub mre: bool,
    pub cmca: bool,
    pub ml: bool,
    pub af: bool,
    pub fusion: FusionKind,
    pub seq_len: usize,
    pub lift_tokens: usize,
    pub gat_layers: usize,
    pub leaky_slope: f64,
    pub kernel_sizes: Vec<usize>,
    pub cross_kind_edges: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            d: 300,
            heads: 8,
            batch_size: 64,
            epochs: 50,
            lr: 0.002,
            lr_decay: 0.98,
            dropout: 0.5,
            tau_scl: 0.5,
            tau_cmca: 0.5,
            lambda: LossWeights::default(),
            theta: 0.5,
            seed: 0,
            split: SplitFractions::default(),
            mre: true,
            cmca: true,
            ml: true,
            af: true,
            fusion: FusionKind::Adaptive,
            seq_len: 64,
            lift_tokens: 6,
            gat_layers: 2,
            leaky_slope: 0.2,
            kernel_sizes: vec![3, 4, 5],
            cross_kind_edges: true,
        }
    }
}

const KEYS: &[&str] = &[
    "d",
    "heads",
    "batch_size",
    "epochs",
    "lr",
    "lr_decay",
    "dropout",
    "tau_scl",
    "tau_cmca",
    "lambda",
    "theta",
    "seed",
    "split",
    "mre",
    "cmca",
    "ml",
    "af",
    "fusion",
    "seq_len",
    "lift_tokens",
    "gat_layers",
    "leaky_slope",
    "kernel_sizes",
    "cross_kind_edges",
];

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|_| Error::Config(format!("{key}: cannot parse `{s}`")))
        })
        .collect()
}

fn parse_one<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{value}`")))
}

fn parse_flag(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected on/off, got `{value}`"
        ))),
    }
}

fn flag(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

impl TrainConfig {
    pub fn ablation(&self) -> Ablation {
        Ablation {
            mre: self.mre,
            cmca: self.cmca,
            ml: self.ml,
            af: self.af,
        }
    }

    /// Fusion actually used: `is-concat` whenever adaptive fusion is ablated.
    pub fn effective_fusion(&self) -> FusionKind {
        match self.fusion {
            FusionKind::Adaptive if !self.af => FusionKind::IsConcat,
            other => other,
        }
    }

    pub fn attention(&self) -> Result<AttentionConfig> {
        AttentionConfig::new(self.d, self.heads, self.lift_tokens)
    }

    pub fn gat(&self) -> GatConfig {
        GatConfig {
            heads: self.heads,
            layers: self.gat_layers,
            similarity_threshold: self.theta,
            leaky_slope: self.leaky_slope,
        }
    }

    pub fn text(&self, vocab_size: usize) -> Result<TextEncoderConfig> {
        TextEncoderConfig::new(vocab_size, self.d, self.seq_len, &self.kernel_sizes)
    }

    pub fn graph(&self) -> GraphConfig {
        GraphConfig {
            theta: self.theta,
            cross_kind: self.cross_kind_edges,
        }
    }

    pub fn contrastive(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            tau_scl: self.tau_scl,
            tau_cmca: self.tau_cmca,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("lr_decay", self.lr_decay),
            ("tau_scl", self.tau_scl),
            ("tau_cmca", self.tau_cmca),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.d == 0 || self.seq_len == 0 {
            return Err(Error::Config("d and seq_len must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return Err(Error::Config("leaky_slope must be non-negative".into()));
        }
        if self.kernel_sizes.contains(&0) || self.kernel_sizes.is_empty() {
            return Err(Error::Config("kernel_sizes must be positive".into()));
        }
        LossWeights::new(self.lambda.0)?;
        self.split.validate()?;
        self.attention()?;
        self.gat().validate()?;
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(Error::Config(format!(
                    "line {}: unknown key `{key}`",
                    lineno + 1
                )));
            }
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key `{key}`",
                    lineno + 1
                )));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Sets one key from its text form (no validation).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "d" => self.d = parse_one(key, value)?,
            "heads" => self.heads = parse_one(key, value)?,
            "batch_size" => self.batch_size = parse_one(key, value)?,
            "epochs" => self.epochs = parse_one(key, value)?,
            "lr" => self.lr = parse_one(key, value)?,
            "lr_decay" => self.lr_decay = parse_one(key, value)?,
            "dropout" => self.dropout = parse_one(key, value)?,
            "tau_scl" => self.tau_scl = parse_one(key, value)?,
            "tau_cmca" => self.tau_cmca = parse_one(key, value)?,
            "lambda" => {
                let v: Vec<f64> = parse_list(key, value)?;
                let arr: [f64; 4] = v.try_into().map_err(|_| {
                    Error::Config("lambda: expected four comma-separated values".into())
                })?;
                self.lambda = LossWeights::new(arr)?;
            }
            "theta" => self.theta = parse_one(key, value)?,
            "seed" => self.seed = parse_one(key, value)?,
            "split" => {
                let v: Vec<f64> = parse_list(key, value)?;
                let [train, val, test]: [f64; 3] = v.try_into().map_err(|_| {
                    Error::Config("split: expected three comma-separated fractions".into())
                })?;
                self.split = SplitFractions { train, val, test };
            }
            "mre" => self.mre = parse_flag(key, value)?,
            "cmca" => self.cmca = parse_flag(key, value)?,
            "ml" => self.ml = parse_flag(key, value)?,
            "af" => self.af = parse_flag(key, value)?,
            "fusion" => self.fusion = value.parse()?,
            "seq_len" => self.seq_len = parse_one(key, value)?,
            "lift_tokens" => self.lift_tokens = parse_one(key, value)?,
            "gat_layers" => self.gat_layers = parse_one(key, value)?,
            "leaky_slope" => self.leaky_slope = parse_one(key, value)?,
            "kernel_sizes" => self.kernel_sizes = parse_list(key, value)?,
            "cross_kind_edges" => self.cross_kind_edges = parse_flag(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Every key, one per line, in a form [`parse`](Self::parse) reads back.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let l = self.lambda.0;
        let _ = writeln!(s, "d = {}", self.d);
        let _ = writeln!(s, "heads = {}", self.heads);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "lr_decay = {}", self.lr_decay);
        let _ = writeln!(s, "dropout = {}", self.dropout);
        let _ = writeln!(s, "tau_scl = {}", self.tau_scl);
        let _ = writeln!(s, "tau_cmca = {}", self.tau_cmca);
        let _ = writeln!(s, "lambda = {}", join(&l));
        let _ = writeln!(s, "theta = {}", self.theta);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(
            s,
            "split = {},{},{}",
            self.split.train, self.split.val, self.split.test
        );
        let _ = writeln!(s, "mre = {}", flag(self.mre));
        let _ = writeln!(s, "cmca = {}", flag(self.cmca));
        let _ = writeln!(s, "ml = {}", flag(self.ml));
        let _ = writeln!(s, "af = {}", flag(self.af));
        let _ = writeln!(s, "fusion = {}", self.fusion);
        let _ = writeln!(s, "seq_len = {}", self.seq_len);
        let _ = writeln!(s, "lift_tokens = {}", self.lift_tokens);
        let _ = writeln!(s, "gat_layers = {}", self.gat_layers);
        let _ = writeln!(s, "leaky_slope = {}", self.leaky_slope);
        let _ = writeln!(s, "kernel_sizes = {}", join(&self.kernel_sizes));
        let _ = writeln!(s, "cross_kind_edges = {}", flag(self.cross_kind_edges));
        s
    }
}
