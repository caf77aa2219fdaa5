//! Whole-run configuration: every tunable in one TOML file, with
//! key-level overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{SplitConfig, SyntheticSpec};
use crate::error::{Error, Result};
use crate::matcher::MatcherConfig;
use crate::pipeline::{Architecture, Stage2Config};
use crate::qbf::QbfConfig;
use crate::qbs::QbsConfig;
use crate::vae::Stage1Config;

/// Dataset construction knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Keep only the first this many labelled pairs of a TSV (0 keeps all).
    pub max_pairs: usize,
    /// Minimum occurrences for a word to enter the vocabulary.
    pub min_count: usize,
    pub synthetic: SyntheticSpec,
    pub split: SplitConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            max_pairs: 0,
            min_count: 1,
            synthetic: SyntheticSpec::default(),
            split: SplitConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; copied into every component seed.
    pub seed: u64,
    pub data: DataConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub qbs: QbsConfig,
    pub qbf: QbfConfig,
    pub matcher: MatcherConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Small widths that train on a laptop CPU in minutes.
    pub fn desk() -> Self {
        let arch = Architecture::desk();
        RunConfig {
            seed: 0,
            data: DataConfig::default(),
            stage1: Stage1Config::desk(),
            stage2: Stage2Config::desk(),
            qbs: arch.qbs,
            qbf: arch.qbf,
            matcher: arch.matcher,
        }
    }

    /// The published hyperparameters (768-wide fusion, learning rate 1e-5).
    pub fn published() -> Self {
        let arch = Architecture::default();
        RunConfig {
            seed: 0,
            data: DataConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            qbs: arch.qbs,
            qbf: arch.qbf,
            matcher: arch.matcher,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "published" => Ok(Self::published()),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected desk or published)"))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read `path`; keys it omits take the desk defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.resolved()).expect("config serialises")
    }

    /// Component seeds replaced by the master seed.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.stage1.rng_seed = c.seed;
        c.stage2.rng_seed = c.seed;
        c
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            qbs: self.qbs.clone(),
            qbf: self.qbf.clone(),
            matcher: self.matcher.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.architecture().validate()?;
        if self.data.min_count == 0 {
            return Err(Error::Config("data.min_count must be >= 1".into()));
        }
        Ok(())
    }

    /// Apply `section.field = value` (or a bare `field` when exactly one
    /// section among `sections` has it). Field names may be kebab-case.
    /// The value is read as a TOML literal, falling back to a string.
    pub fn set(&mut self, key: &str, value: &str, sections: &[&str]) -> Result<()> {
        let key = key.replace('-', "_");
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let path: Vec<String> = if key.contains('.') {
            key.split('.').map(str::to_string).collect()
        } else if root.get(&key).is_some() {
            vec![key.clone()]
        } else {
            let hits: Vec<&str> = sections
                .iter()
                .copied()
                .filter(|s| lookup(&root, &section_path(s, &key)).is_some())
                .collect();
            match hits.as_slice() {
                [one] => section_path(one, &key),
                [] => return Err(Error::Config(format!("unknown config key {key:?}"))),
                many => {
                    return Err(Error::Config(format!(
                        "config key {key:?} is ambiguous; qualify it as one of {}",
                        many.iter().map(|s| format!("{s}.{key}")).collect::<Vec<_>>().join(", ")
                    )))
                }
            }
        };
        let parsed = parse_literal(value);
        let slot = lookup_mut(&mut root, &path).ok_or_else(|| Error::Config(format!("unknown config key {:?}", path.join("."))))?;
        *slot = parsed;
        let next: RunConfig = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{}: {}", path.join("."), e.message())))?;
        next.validate()?;
        *self = next;
        Ok(())
    }
}

fn section_path(section: &str, key: &str) -> Vec<String> {
    section.split('.').map(str::to_string).chain(std::iter::once(key.to_string())).collect()
}

fn parse_literal(v: &str) -> toml::Value {
    let wrapped = format!("x = {v}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("x").unwrap_or_else(|| toml::Value::String(v.to_string())),
        Err(_) => toml::Value::String(v.to_string()),
    }
}

fn lookup<'a>(v: &'a toml::Value, path: &[String]) -> Option<&'a toml::Value> {
    path.iter().try_fold(v, |cur, k| cur.get(k.as_str()))
}

fn lookup_mut<'a>(v: &'a mut toml::Value, path: &[String]) -> Option<&'a mut toml::Value> {
    path.iter().try_fold(v, |cur, k| cur.get_mut(k.as_str()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip_and_unknown_keys() {
        let cfg = RunConfig::desk();
        let text = cfg.to_toml();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg.resolved());
        let err = RunConfig::from_toml("[stage2]\nlamda1 = 0.5\n").unwrap_err();
        assert!(err.to_string().contains("lamda1"), "{err}");
        assert!(RunConfig::from_toml("bogus = 1\n").is_err());
        let partial = RunConfig::from_toml("seed = 9\n[stage2]\nk = 3\n").unwrap();
        assert_eq!((partial.seed, partial.stage2.k), (9, 3));
        assert_eq!(partial.stage1, Stage1Config::desk());
    }

    #[test]
    fn overrides() {
        let mut cfg = RunConfig::desk();
        cfg.set("lambda1", "0.25", &["stage2"]).unwrap();
        assert_eq!(cfg.stage2.lambda1, 0.25);
        cfg.set("stage1.learning-rate", "0.01", &[]).unwrap();
        assert_eq!(cfg.stage1.learning_rate, 0.01);
        cfg.set("ablation", "no_qbs", &["stage2"]).unwrap();
        assert_eq!(cfg.stage2.ablation, crate::pipeline::Ablation::NoQbs);
        let amb = cfg.set("dropout", "0.2", &["qbs", "qbf", "matcher"]).unwrap_err();
        assert!(amb.to_string().contains("ambiguous"));
        cfg.set("dropout", "0.2", &["qbs"]).unwrap();
        assert_eq!(cfg.qbs.dropout, 0.2);
        assert!(cfg.set("lambda1", "2.0", &["stage2"]).is_err());
        assert!(cfg.set("nope", "1", &["stage2"]).is_err());
        cfg.set("n-clusters", "12", &["data.synthetic", "data"]).unwrap();
        assert_eq!(cfg.data.synthetic.n_clusters, 12);
        cfg.set("seed", "17", &[]).unwrap();
        assert_eq!(cfg.resolved().stage2.rng_seed, 17);
    }

    #[test]
    fn presets() {
        let p = RunConfig::preset("published").unwrap();
        assert_eq!((p.stage2.learning_rate, p.qbf.d_model, p.stage1.d_z), (1e-5, 768, 128));
        assert!(RunConfig::preset("huge").is_err());
        assert_eq!(RunConfig::preset("desk").unwrap(), RunConfig::desk());
    }

    #[test]
    fn published_hyperparameters() {
        let p = RunConfig::published();
        assert_eq!((p.stage2.lambda1, p.stage2.lambda2), (0.5, 0.1));
        assert_eq!((p.stage2.learning_rate, p.stage2.validation_interval, p.stage2.k), (1e-5, 0.1, 10));
        assert_eq!((p.qbf.d_model, p.qbf.heads, p.qbf.layers, p.qbf.dropout), (768, 8, 2, 0.1));
        assert_eq!((p.qbs.tau, p.qbs.tau1, p.qbs.tau2), (0.7, 1e-4, 1e-3));
        assert_eq!((p.stage1.tau, p.stage1.batch_size, p.stage1.max_len), (0.7, 128, 50));
    }
}
