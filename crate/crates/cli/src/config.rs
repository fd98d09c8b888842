//! Flat `key = value` run configuration.
//!
//! Values are resolved in three layers: built-in defaults, then a config
//! file, then command-line overrides. Keys mirror the field names of the
//! training configuration plus a handful of run-level settings.

use std::collections::BTreeMap;
use std::path::Path;

use unload_core::dqn::{LossKind, OptimizerKind, TrainConfig};
use unload_core::env::{EnvKind, RunConfig};

use crate::CliError;

/// Every key accepted in config files and `--set` overrides.
pub const KEYS: &[&str] = &[
    "learning_rate",
    "batch_size",
    "total_steps",
    "epsilon_init",
    "epsilon_final",
    "epsilon_decay_steps",
    "gamma",
    "beta",
    "loss_kind",
    "buffer_capacity",
    "optimizer",
    "seed",
    "target_sync_period",
    "mask_during_training",
    "env_kind",
    "env_count",
    "workers",
    "checkpoint_every",
    "n_features",
    "episode_limit",
    "equalize",
];

/// Raw key/value pairs in the order they take effect.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    entries: BTreeMap<String, String>,
}

impl Overrides {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sets `key`, replacing any earlier value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        if !KEYS.contains(&key) {
            return Err(CliError::Validation(format!("unknown config key `{key}`")));
        }
        self.entries
            .insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    /// Parses `key=value`.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), CliError> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Validation(format!("expected key=value, found `{pair}`")))?;
        self.set(k.trim(), v)
    }

    /// Layers `other` on top of `self`.
    pub fn merge(&mut self, other: &Overrides) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn parse_text(text: &str) -> Result<Self, CliError> {
        let mut out = Self::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            out.set_pair(line)
                .map_err(|e| CliError::Validation(format!("line {}: {e}", no + 1)))?;
        }
        Ok(out)
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse_text(&text)
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Validation(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(CliError::Validation(format!(
            "`{key}`: expected a boolean, found `{value}`"
        ))),
    }
}

/// Applies the overrides to a default run configuration of the given kind.
///
/// `epsilon_decay_steps` follows `total_steps / 2` unless set explicitly.
pub fn resolve(kind: EnvKind, layers: &Overrides) -> Result<RunConfig, CliError> {
    let mut run = RunConfig {
        env_kind: kind,
        ..RunConfig::default()
    };
    let total_steps = match layers.get("total_steps") {
        Some(v) => parse("total_steps", v)?,
        None => run.train.total_steps,
    };
    run.train = TrainConfig::with_steps(total_steps);
    for (key, value) in &layers.entries {
        let v = value.as_str();
        let t = &mut run.train;
        match key.as_str() {
            "learning_rate" => t.learning_rate = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "total_steps" => {}
            "epsilon_init" => t.epsilon_init = parse(key, v)?,
            "epsilon_final" => t.epsilon_final = parse(key, v)?,
            "epsilon_decay_steps" => t.epsilon_decay_steps = parse(key, v)?,
            "gamma" => t.gamma = parse(key, v)?,
            "beta" => t.beta = parse(key, v)?,
            "loss_kind" => t.loss_kind = parse_loss(v)?,
            "buffer_capacity" => t.buffer_capacity = parse(key, v)?,
            "optimizer" => t.optimizer = parse_optimizer(v)?,
            "seed" => t.seed = parse(key, v)?,
            "target_sync_period" => t.target_sync_period = parse(key, v)?,
            "mask_during_training" => t.mask_during_training = parse_bool(key, v)?,
            "env_kind" => run.env_kind = parse_kind(v)?,
            "env_count" => run.env_count = parse(key, v)?,
            "workers" => run.workers = parse(key, v)?,
            "checkpoint_every" => run.checkpoint_every = parse(key, v)?,
            "n_features" => run.net.n_features = parse(key, v)?,
            "episode_limit" => run.env.episode_limit = parse(key, v)?,
            "equalize" => {
                let on = parse_bool(key, v)?;
                run.env.viewer.equalize = on;
                run.tuning.equalize = on;
            }
            other => {
                return Err(CliError::Validation(format!(
                    "unknown config key `{other}`"
                )))
            }
        }
    }
    run.validate()
        .map_err(|e| CliError::Validation(e.to_string()))?;
    Ok(run)
}

fn parse_loss(v: &str) -> Result<LossKind, CliError> {
    match v {
        "smooth_l1" => Ok(LossKind::SmoothL1),
        "mse" => Ok(LossKind::Mse),
        _ => Err(CliError::Validation(format!(
            "`loss_kind`: expected smooth_l1 or mse, found `{v}`"
        ))),
    }
}

fn parse_optimizer(v: &str) -> Result<OptimizerKind, CliError> {
    match v {
        "sgd" => Ok(OptimizerKind::Sgd),
        "adam" => Ok(OptimizerKind::Adam),
        _ => Err(CliError::Validation(format!(
            "`optimizer`: expected sgd or adam, found `{v}`"
        ))),
    }
}

fn parse_kind(v: &str) -> Result<EnvKind, CliError> {
    match v {
        "unload" => Ok(EnvKind::Unload),
        "tuning" => Ok(EnvKind::Tuning),
        _ => Err(CliError::Validation(format!(
            "`env_kind`: expected unload or tuning, found `{v}`"
        ))),
    }
}

/// Every key with its resolved value, in `KEYS` order.
pub fn materialize(run: &RunConfig) -> Vec<(&'static str, String)> {
    let t = &run.train;
    let loss = match t.loss_kind {
        LossKind::SmoothL1 => "smooth_l1",
        LossKind::Mse => "mse",
    };
    let optimizer = match t.optimizer {
        OptimizerKind::Sgd => "sgd",
        OptimizerKind::Adam => "adam",
    };
    let (kind, equalize) = match run.env_kind {
        EnvKind::Unload => ("unload", run.env.viewer.equalize),
        EnvKind::Tuning => ("tuning", run.tuning.equalize),
    };
    vec![
        ("learning_rate", t.learning_rate.to_string()),
        ("batch_size", t.batch_size.to_string()),
        ("total_steps", t.total_steps.to_string()),
        ("epsilon_init", t.epsilon_init.to_string()),
        ("epsilon_final", t.epsilon_final.to_string()),
        ("epsilon_decay_steps", t.epsilon_decay_steps.to_string()),
        ("gamma", t.gamma.to_string()),
        ("beta", t.beta.to_string()),
        ("loss_kind", loss.to_string()),
        ("buffer_capacity", t.buffer_capacity.to_string()),
        ("optimizer", optimizer.to_string()),
        ("seed", t.seed.to_string()),
        ("target_sync_period", t.target_sync_period.to_string()),
        ("mask_during_training", t.mask_during_training.to_string()),
        ("env_kind", kind.to_string()),
        ("env_count", run.env_count.to_string()),
        ("workers", run.workers.to_string()),
        ("checkpoint_every", run.checkpoint_every.to_string()),
        ("n_features", run.net.n_features.to_string()),
        ("episode_limit", run.env.episode_limit.to_string()),
        ("equalize", equalize.to_string()),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_file_then_cli() {
        let file =
            Overrides::parse_text("learning_rate = 0.01\nbatch_size=64 # small\n\nseed=3").unwrap();
        let mut cli = Overrides::new();
        cli.set_pair("batch_size=128").unwrap();
        let mut layers = file.clone();
        layers.merge(&cli);
        let run = resolve(EnvKind::Tuning, &layers).unwrap();
        assert_eq!(run.train.learning_rate, 0.01);
        assert_eq!(run.train.batch_size, 128);
        assert_eq!(run.train.seed, 3);
        assert_eq!(run.train.total_steps, 200_000);
    }

    #[test]
    fn decay_follows_total_steps() {
        let mut o = Overrides::new();
        o.set("total_steps", "3000").unwrap();
        let run = resolve(EnvKind::Tuning, &o).unwrap();
        assert_eq!(run.train.epsilon_decay_steps, 1500);
        o.set("epsilon_decay_steps", "100").unwrap();
        assert_eq!(
            resolve(EnvKind::Tuning, &o)
                .unwrap()
                .train
                .epsilon_decay_steps,
            100
        );
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(
            Overrides::parse_text("lr = 1"),
            Err(CliError::Validation(_))
        ));
    }

    #[test]
    fn invalid_value_names_field() {
        let mut o = Overrides::new();
        o.set("gamma", "2").unwrap();
        let err = resolve(EnvKind::Unload, &o).unwrap_err().to_string();
        assert!(err.contains("gamma"), "{err}");
        o.set("gamma", "abc").unwrap();
        let err = resolve(EnvKind::Unload, &o).unwrap_err().to_string();
        assert!(err.contains("gamma"), "{err}");
    }

    #[test]
    fn materialize_round_trips() {
        let mut o = Overrides::new();
        o.set("loss_kind", "mse").unwrap();
        o.set("optimizer", "sgd").unwrap();
        o.set("equalize", "false").unwrap();
        o.set("total_steps", "10").unwrap();
        let run = resolve(EnvKind::Tuning, &o).unwrap();
        let mut back = Overrides::new();
        for (k, v) in materialize(&run) {
            back.set(k, &v).unwrap();
        }
        assert_eq!(resolve(EnvKind::Unload, &back).unwrap(), run);
        assert_eq!(materialize(&run).len(), KEYS.len());
    }
}
