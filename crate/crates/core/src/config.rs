//! `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are skipped. Keys are unique.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::losses::ModulatorGrad;
use crate::synthetic::SyntheticConfig;
use crate::train::TrainConfig;

pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        if out.insert(k.to_owned(), v.to_owned()).is_some() {
            return Err(Error::Config(format!(
                "line {}: duplicate key `{k}`",
                i + 1
            )));
        }
    }
    Ok(out)
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean `{v}` for `{key}`"))),
    }
}

/// Training plus data-generation settings for a toy run.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySettings {
    pub train: TrainConfig,
    pub data: SyntheticConfig,
}

impl ToySettings {
    /// Overrides fields from parsed config entries; unknown keys are errors.
    pub fn apply(&mut self, entries: &BTreeMap<String, String>) -> Result<()> {
        for (k, v) in entries {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "iterations" => t.iterations = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "lr" | "learning_rate" => t.learning_rate = parse(key, v)?,
            "momentum" => t.momentum = parse(key, v)?,
            "weight_decay" => t.weight_decay = parse(key, v)?,
            "loss" => t.loss = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "gamma" => t.focal.gamma = parse(key, v)?,
            "epsilon" => t.focal.epsilon = parse(key, v)?,
            "modulator_grad" => {
                t.focal.modulator = match v {
                    "through" => ModulatorGrad::Through,
                    "detached" => ModulatorGrad::Detached,
                    _ => return Err(Error::Config(format!("bad value `{v}` for `{key}`"))),
                }
            }
            "tree_triplet" => t.tree_triplet = parse_bool(key, v)?,
            "triplets" | "triplet_count" => t.triplet_count = parse(key, v)?,
            "margin_epsilon" => t.margin.epsilon = parse(key, v)?,
            "margin_scale" => t.margin.scale = parse(key, v)?,
            "beta_schedule" => {
                t.beta_schedule = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?
            }
            "beta_max" => t.beta_max = parse(key, v)?,
            "seed" => {
                t.seed = parse(key, v)?;
                d.seed = t.seed;
            }
            "feature_dim" => d.feature_dim = parse(key, v)?,
            "pixels_per_class" => d.pixels_per_class = parse(key, v)?,
            "center_scale" => d.center_scale = parse(key, v)?,
            "noise_sigma" => d.noise_sigma = parse(key, v)?,
            "height" => d.height = parse(key, v)?,
            "width" => d.width = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_rejects() {
        let m = parse_config("# c\n\n a = 1 \nb=x=y\n").unwrap();
        assert_eq!(m["a"], "1");
        assert_eq!(m["b"], "x=y");
        assert!(parse_config("a=1\na=2\n").is_err());
        assert!(parse_config("novalue\n").is_err());
        assert!(parse_config("=3\n").is_err());
    }

    #[test]
    fn applies_known_keys() {
        let h = crate::taxonomy::parse_taxonomy("root\tr\nr\ta\nr\tb\n").unwrap();
        let mut s = ToySettings {
            train: TrainConfig::default(),
            data: SyntheticConfig::for_hierarchy(&h, 10, 5),
        };
        let m =
            parse_config("loss=bce\ngamma=1.5\ntree_triplet=yes\nseed=9\nbeta_schedule=constant\n")
                .unwrap();
        s.apply(&m).unwrap();
        assert_eq!(s.train.loss, crate::losses::LossKind::Bce);
        assert_eq!(s.train.focal.gamma, 1.5);
        assert!(s.train.tree_triplet);
        assert_eq!(s.data.seed, 9);
        assert!(s.set("nope", "1").is_err());
        assert!(s.set("iterations", "-1").is_err());
        assert!(s.set("loss", "mse").is_err());
    }
}
