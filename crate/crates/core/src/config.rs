//! Flat `key = value` configuration text.
//!
//! Blank lines and lines starting with `#` are ignored; a `#` after a value
//! starts a trailing comment. Later assignments override earlier ones.

use crate::attacks::{AttackConfig, AttackFamily};
use crate::error::{Error, Result};
use crate::optim::AdamConfig;
use crate::training::TrainConfig;

/// Ordered key/value pairs as they appeared in the source.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    pairs: Vec<(String, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::usage(format!(
                    "config line {}: expected `key = value`, got `{raw}`",
                    lineno + 1
                )));
            };
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::usage(format!("config line {}: empty key", lineno + 1)));
            }
            pairs.push((key.to_string(), value.trim().to_string()));
        }
        Ok(Self { pairs })
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.pairs.push((key.into(), value.into()));
    }

    /// Last value assigned to `key`.
    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.pairs.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn to_text(&self) -> String {
        self.pairs
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

pub fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::usage(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::usage(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

fn set_adam(adam: &mut AdamConfig, field: &str, key: &str, value: &str) -> Result<bool> {
    match field {
        "lr" => adam.lr = parse_value(key, value)?,
        "beta1" => adam.beta1 = parse_value(key, value)?,
        "beta2" => adam.beta2 = parse_value(key, value)?,
        "eps" => adam.eps = parse_value(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

impl AttackConfig {
    /// Applies one attack setting. `eps` keeps the `step_size / eps` ratio;
    /// set `step_size` afterwards to override it.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "attack" => self.family = value.parse()?,
            "eps" => *self = self.with_epsilon(parse_value(key, value)?),
            "step_size" => self.step_size = parse_value(key, value)?,
            "steps" => self.steps = parse_value(key, value)?,
            "random_start" => self.random_start = parse_bool(key, value)?,
            "attack_seed" => self.seed = parse_value(key, value)?,
            "cw_confidence" => self.cw.confidence = parse_value(key, value)?,
            "cw_initial_penalty" => self.cw.initial_penalty = parse_value(key, value)?,
            "cw_steps" => self.cw.steps = parse_value(key, value)?,
            "cw_lr" => self.cw.lr = parse_value(key, value)?,
            "cw_rounds" => self.cw.search_rounds = parse_value(key, value)?,
            _ => return Err(Error::usage(format!("unknown attack key `{key}`"))),
        }
        Ok(())
    }

    /// Every attack setting; [`AttackConfig::set`] in this order reproduces it.
    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.push("attack", self.family.name());
        kv.push("eps", self.epsilon.to_string());
        kv.push("step_size", self.step_size.to_string());
        kv.push("steps", self.steps.to_string());
        kv.push("random_start", self.random_start.to_string());
        kv.push("attack_seed", self.seed.to_string());
        kv.push("cw_confidence", self.cw.confidence.to_string());
        kv.push("cw_initial_penalty", self.cw.initial_penalty.to_string());
        kv.push("cw_steps", self.cw.steps.to_string());
        kv.push("cw_lr", self.cw.lr.to_string());
        kv.push("cw_rounds", self.cw.search_rounds.to_string());
        kv
    }
}

impl TrainConfig {
    /// Applies one setting. `lr`, `beta1`, `beta2` and `adam_eps` set all
    /// three optimizers; `critic_*`, `main_*` and `ascent_*` set one.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "regime" => self.regime = value.parse()?,
            "lambda" => self.lambda = parse_value(key, value)?,
            "clip" => self.clip = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "latent_dim" => self.latent_dim = parse_value(key, value)?,
            "plain_latent_dim" => self.plain_latent_dim = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "lr" | "beta1" | "beta2" | "adam_eps" => {
                let field = key.strip_prefix("adam_").unwrap_or(key);
                for adam in [&mut self.critic_adam, &mut self.main_adam, &mut self.ascent_adam] {
                    set_adam(adam, field, key, value)?;
                }
            }
            "train_attack" => {
                let family: AttackFamily = value.parse()?;
                self.attack.family = family;
            }
            "train_eps" => {
                let eps: f64 = parse_value(key, value)?;
                self.attack = self.attack.with_epsilon(eps);
            }
            "train_step_size" => self.attack.step_size = parse_value(key, value)?,
            "train_steps" => self.attack.steps = parse_value(key, value)?,
            "train_random_start" => self.attack.random_start = parse_bool(key, value)?,
            "train_attack_seed" => self.attack.seed = parse_value(key, value)?,
            "eps_warmup_epochs" => self.eps_warmup_epochs = parse_value(key, value)?,
            _ => {
                let handled = match key.split_once('_') {
                    Some(("critic", f)) => set_adam(&mut self.critic_adam, f, key, value)?,
                    Some(("main", f)) => set_adam(&mut self.main_adam, f, key, value)?,
                    Some(("ascent", f)) => set_adam(&mut self.ascent_adam, f, key, value)?,
                    _ => false,
                };
                if !handled {
                    return Err(Error::usage(format!("unknown config key `{key}`")));
                }
            }
        }
        Ok(())
    }

    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        kv.iter().try_for_each(|(k, v)| self.set(k, v))
    }

    /// Every setting, in a form [`TrainConfig::apply`] reproduces exactly.
    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.push("regime", self.regime.name());
        kv.push("lambda", self.lambda.to_string());
        kv.push("clip", self.clip.to_string());
        kv.push("epochs", self.epochs.to_string());
        kv.push("batch_size", self.batch_size.to_string());
        kv.push("latent_dim", self.latent_dim.to_string());
        kv.push("plain_latent_dim", self.plain_latent_dim.to_string());
        for (prefix, adam) in [
            ("critic", &self.critic_adam),
            ("main", &self.main_adam),
            ("ascent", &self.ascent_adam),
        ] {
            kv.push(format!("{prefix}_lr"), adam.lr.to_string());
            kv.push(format!("{prefix}_beta1"), adam.beta1.to_string());
            kv.push(format!("{prefix}_beta2"), adam.beta2.to_string());
            kv.push(format!("{prefix}_eps"), adam.eps.to_string());
        }
        kv.push("train_attack", self.attack.family.name());
        kv.push("train_eps", self.attack.epsilon.to_string());
        kv.push("train_step_size", self.attack.step_size.to_string());
        kv.push("train_steps", self.attack.steps.to_string());
        kv.push("train_random_start", self.attack.random_start.to_string());
        kv.push("train_attack_seed", self.attack.seed.to_string());
        kv.push("eps_warmup_epochs", self.eps_warmup_epochs.to_string());
        kv.push("seed", self.seed.to_string());
        kv
    }
}
