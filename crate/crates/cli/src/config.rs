//! Run configuration: one TOML file with `[synth]` and `[train]` sections.

use std::path::Path;

use layerseg::synth::SynthConfig;
use layerseg::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, IoContext, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Fraction of the annotated training samples that keep their labels.
    pub labeled_subset: Option<f64>,
    pub synth: SynthConfig,
    pub train: TrainConfig,
}

/// Ablations selectable from the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Drop the texture channel from the anatomical factors.
    NoTexture,
    /// Zero the anatomical prior weights.
    NoSelfLosses,
    /// Supervised terms only; the unlabeled pool is not used.
    SupervisedOnly,
}

/// Command-line values that take precedence over the config file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub labeled_fraction: Option<f64>,
    pub ablations: Vec<Ablation>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::from_toml_str(&text, path)
    }

    /// Reads `path` if given, otherwise uses the defaults.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run configuration serializes to TOML")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.synth.seed = seed;
            self.train.seed = seed;
        }
        if let Some(f) = o.labeled_fraction {
            self.synth.labeled_fraction = f;
            self.labeled_subset = Some(f);
        }
        for a in &o.ablations {
            match a {
                Ablation::NoTexture => self.train.disable_texture_head = true,
                Ablation::NoSelfLosses => self.train.disable_self_losses = true,
                Ablation::SupervisedOnly => self.train.supervised_only = true,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml_str(&cfg.to_toml_string(), Path::new("x.toml")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let text = "[train]\niterations = 5\n[train.model]\nbase_channels = 4\n[train.weights]\nslope = 2.0\n";
        let cfg = RunConfig::from_toml_str(text, Path::new("x.toml")).unwrap();
        assert_eq!(cfg.train.iterations, 5);
        assert_eq!(cfg.train.model.base_channels, 4);
        assert_eq!(cfg.train.weights.slope, 2.0);
        assert_eq!(cfg.train.weights.surface_kl, 50.0);
        assert_eq!(cfg.synth, SynthConfig::default());
    }

    #[test]
    fn unknown_key_is_named_with_location() {
        let err = RunConfig::from_toml_str("[train]\nitertions = 5\n", Path::new("run.toml"))
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("run.toml"), "{msg}");
        assert!(msg.contains("itertions"), "{msg}");
        assert!(msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn overrides_take_precedence() {
        let mut cfg = RunConfig::default();
        cfg.apply(&Overrides {
            seed: Some(9),
            labeled_fraction: Some(0.5),
            ablations: vec![Ablation::NoSelfLosses, Ablation::NoTexture],
        });
        assert_eq!((cfg.synth.seed, cfg.train.seed), (9, 9));
        assert_eq!(cfg.synth.labeled_fraction, 0.5);
        assert_eq!(cfg.labeled_subset, Some(0.5));
        assert!(cfg.train.disable_self_losses && cfg.train.disable_texture_head);
        let w = cfg.train.effective_weights();
        assert_eq!(
            (w.ordering, w.continuity, w.slope, w.spread),
            (0.0, 0.0, 0.0, 0.0)
        );
    }
}
