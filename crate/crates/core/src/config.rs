//! Run configuration: defaults, TOML parsing and validation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{FlocoError, Result};
use crate::model::SimplexScope;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Fedavg,
    Fedprox,
    Floco,
    FlocoPlus,
    Ditto,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Fedavg,
        Strategy::Fedprox,
        Strategy::Floco,
        Strategy::FlocoPlus,
        Strategy::Ditto,
    ];

    /// Strategies that train a solution simplex and assign subregions.
    pub fn uses_simplex(self) -> bool {
        matches!(self, Strategy::Floco | Strategy::FlocoPlus)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Fedavg => "fedavg",
            Strategy::Fedprox => "fedprox",
            Strategy::Floco => "floco",
            Strategy::FlocoPlus => "floco_plus",
            Strategy::Ditto => "ditto",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = FlocoError;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| FlocoError::config("strategy", format!("unknown strategy `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionScheme {
    Dirichlet,
    Fivefold,
}

/// Synthetic dataset and partitioning settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub classes: usize,
    pub input_dim: usize,
    pub samples_per_class: usize,
    /// Within-class standard deviation; centroids lie on the unit sphere.
    pub spread: f64,
    pub partition: PartitionScheme,
    /// Dirichlet concentration.
    pub beta: f64,
    /// Five-fold primary-class share in percent.
    pub q: f64,
    pub groups: usize,
    /// Fraction of each client's samples held out for local testing.
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            input_dim: 16,
            samples_per_class: 1000,
            spread: 0.35,
            partition: PartitionScheme::Dirichlet,
            beta: 0.3,
            q: 80.0,
            groups: 5,
            test_fraction: 0.2,
        }
    }
}

/// Every hyperparameter of one federated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    /// K
    pub clients: usize,
    /// T
    pub rounds: usize,
    /// Local work per round in epochs over the client's train split, unless
    /// `local_steps` fixes the step count directly.
    pub local_epochs: usize,
    pub local_steps: Option<usize>,
    /// |S^t|
    pub participants: usize,
    /// Step size.
    pub lr: f64,
    pub batch_size: usize,
    /// M
    pub simplex_dim: usize,
    /// Round of subregion assignment; `rounds + 1` disables it.
    pub tau: usize,
    pub rho: f64,
    pub strategy: Strategy,
    pub mu: f64,
    pub lambda: f64,
    /// Fine-tuning epochs for Ditto and floco_plus.
    pub finetune_epochs: usize,
    pub simplex_scope: SimplexScope,
    pub master_seed: u64,
    pub renormalize_participation: bool,
    pub ece_bins: usize,
    pub eval_interval: usize,
    pub hidden_dim: usize,
    pub data: DataConfig,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            clients: 20,
            rounds: 200,
            local_epochs: 5,
            local_steps: None,
            participants: 10,
            lr: 0.05,
            batch_size: 32,
            simplex_dim: 5,
            tau: 100,
            rho: 0.1,
            strategy: Strategy::Floco,
            mu: 0.01,
            lambda: 1.0,
            finetune_epochs: 5,
            simplex_scope: SimplexScope::LastLayer,
            master_seed: 0,
            renormalize_participation: false,
            ece_bins: 10,
            eval_interval: 10,
            hidden_dim: 32,
            data: DataConfig::default(),
        }
    }
}

impl FederationConfig {
    /// T' for a client holding `train_len` samples.
    pub fn local_steps_for(&self, train_len: usize) -> usize {
        self.local_steps
            .unwrap_or_else(|| self.local_epochs * train_len.div_ceil(self.batch_size))
    }

    /// Steps in `epochs` passes over `train_len` samples.
    pub fn epoch_steps(&self, epochs: usize, train_len: usize) -> usize {
        epochs * train_len.div_ceil(self.batch_size)
    }

    /// Simplex dimension actually trained: flat strategies use one endpoint.
    pub fn effective_simplex_dim(&self) -> usize {
        if self.strategy.uses_simplex() {
            self.simplex_dim
        } else {
            0
        }
    }

    pub fn validate(&self) -> Result<()> {
        fn check(ok: bool, field: &str, msg: &str) -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(FlocoError::config(field, msg))
            }
        }
        let d = &self.data;
        check(self.clients >= 1, "clients", "must be at least 1")?;
        check(self.rounds >= 1, "rounds", "must be at least 1")?;
        check(
            self.participants >= 1 && self.participants <= self.clients,
            "participants",
            "must satisfy 1 <= participants <= clients",
        )?;
        check(self.local_epochs >= 1, "local_epochs", "must be at least 1")?;
        check(self.local_steps != Some(0), "local_steps", "must be at least 1")?;
        check(self.lr > 0.0 && self.lr.is_finite(), "lr", "must be positive")?;
        check(self.batch_size >= 1, "batch_size", "must be at least 1")?;
        check(
            self.tau >= 1 && self.tau <= self.rounds + 1,
            "tau",
            "must satisfy 1 <= tau <= rounds + 1",
        )?;
        check(self.rho > 0.0 && self.rho.is_finite(), "rho", "must be positive")?;
        check(self.mu >= 0.0 && self.mu.is_finite(), "mu", "must be >= 0")?;
        check(
            self.lambda >= 0.0 && self.lambda.is_finite(),
            "lambda",
            "must be >= 0",
        )?;
        check(self.finetune_epochs >= 1, "finetune_epochs", "must be at least 1")?;
        check(self.ece_bins >= 1, "ece_bins", "must be at least 1")?;
        check(self.eval_interval >= 1, "eval_interval", "must be at least 1")?;
        check(self.hidden_dim >= 1, "hidden_dim", "must be at least 1")?;
        check(d.classes >= 2, "data.classes", "must be at least 2")?;
        check(d.input_dim >= 2, "data.input_dim", "must be at least 2")?;
        check(
            d.samples_per_class >= 1,
            "data.samples_per_class",
            "must be at least 1",
        )?;
        check(
            d.spread >= 0.0 && d.spread.is_finite(),
            "data.spread",
            "must be >= 0",
        )?;
        check(
            d.beta > 0.0 && d.beta.is_finite(),
            "data.beta",
            "must be positive",
        )?;
        check((0.0..=100.0).contains(&d.q), "data.q", "must be in [0, 100]")?;
        check(d.groups >= 1, "data.groups", "must be at least 1")?;
        check(
            d.test_fraction > 0.0 && d.test_fraction < 1.0,
            "data.test_fraction",
            "must be in (0, 1)",
        )?;
        if d.partition == PartitionScheme::Fivefold {
            check(
                self.clients.is_multiple_of(d.groups),
                "data.groups",
                "clients must be divisible by groups",
            )?;
            check(
                d.classes.is_multiple_of(d.groups),
                "data.groups",
                "classes must be divisible by groups",
            )?;
        }
        check(
            self.clients <= d.classes * d.samples_per_class,
            "clients",
            "more clients than samples",
        )?;
        Ok(())
    }
}

/// A validated config plus notes about fields that have no effect.
#[derive(Debug, Clone)]
pub struct ParsedConfig {
    pub config: FederationConfig,
    pub warnings: Vec<String>,
}

fn ignored_field_warnings(table: &toml::Table, strategy: Strategy) -> Vec<String> {
    let ignored: &[&str] = match strategy {
        Strategy::Fedavg => &["mu", "lambda", "tau", "rho", "simplex_dim", "finetune_epochs"],
        Strategy::Fedprox => &["lambda", "tau", "rho", "simplex_dim", "finetune_epochs"],
        Strategy::Ditto => &["mu", "tau", "rho", "simplex_dim"],
        Strategy::Floco => &["mu", "lambda", "finetune_epochs"],
        Strategy::FlocoPlus => &["mu"],
    };
    ignored
        .iter()
        .filter(|k| table.contains_key(**k))
        .map(|k| format!("field `{k}` is ignored by strategy `{strategy}`"))
        .collect()
}

/// Parses a TOML document; absent fields take their defaults and unknown
/// fields are rejected.
pub fn parse_config(text: &str) -> Result<ParsedConfig> {
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| FlocoError::Parse(e.to_string()))?;
    let config: FederationConfig = table
        .clone()
        .try_into()
        .map_err(|e: toml::de::Error| FlocoError::Parse(e.to_string()))?;
    config.validate()?;
    let warnings = ignored_field_warnings(&table, config.strategy);
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(ParsedConfig { config, warnings })
}
