//! Declarative experiment configuration (single JSON file).
//!
//! Every stochastic and numeric knob of a run lives here; a config plus its
//! seed fully determines every artifact byte. Unknown keys are rejected so
//! typos fail loudly. [`ExperimentConfig::default`] is the desk-scale setup:
//! three participant sites with heterogeneous generation profiles, two
//! held-out sites, 32x32 images, and a 60-round schedule with 20 warmup
//! rounds.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GmlError, Result};
use crate::gossip::Schedule;
use crate::losses::LossConfig;
use crate::model::ArchSpec;
use crate::synth::{SiteGenSpec, SplitRatios};

/// Which optimizer trains every model in the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

/// Model architecture plus optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub arch: ArchSpec,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// Used by SGD only.
    pub momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        // 1e-4 leaves the 60-round schedule short of saturation, which is
        // the regime where cross-site exchanges have something to teach.
        ModelConfig {
            arch: ArchSpec::default(),
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-4,
            momentum: 0.9,
        }
    }
}

impl ModelConfig {
    /// Fresh optimizer state for `n_params` parameters.
    pub fn make_opt(&self, n_params: usize) -> crate::model::OptState {
        match self.optimizer {
            OptimizerKind::Adam => crate::model::OptState::adam(self.learning_rate, n_params),
            OptimizerKind::Sgd => {
                crate::model::OptState::sgd(self.learning_rate, self.momentum, n_params)
            }
        }
    }
}

/// How per-site DSC values combine into one number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AggregationWeights {
    /// The string `"test_counts"`: weight each site by its local-test size.
    Named(WeightRule),
    /// An explicit positive weight per participant site, in site order.
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightRule {
    TestCounts,
}

impl Default for AggregationWeights {
    fn default() -> Self {
        AggregationWeights::Named(WeightRule::TestCounts)
    }
}

/// Evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Binarization threshold (inclusive).
    pub threshold: f64,
    pub aggregation_weights: AggregationWeights,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            threshold: 0.5,
            aggregation_weights: AggregationWeights::default(),
        }
    }
}

/// The complete declarative description of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub image_extent: usize,
    /// Shared by all participant sites.
    pub split: SplitRatios,
    pub sites: Vec<SiteGenSpec>,
    /// Never trained on; evaluated as out-of-sample data.
    pub held_out_sites: Vec<SiteGenSpec>,
    pub model: ModelConfig,
    pub schedule: Schedule,
    pub loss: LossConfig,
    pub eval: EvalConfig,
}

// The three participant profiles differ in lesion size, intensity, noise,
// and scanner contrast; the gaps are moderate on purpose so that knowledge
// carried by a visiting model is informative rather than misleading. The two
// held-out profiles interpolate between their neighbors.
fn default_sites() -> Vec<SiteGenSpec> {
    vec![
        SiteGenSpec {
            site_id: "site-a".into(),
            n_cases: 16,
            blob_radius_range: [4.5, 6.5],
            tumor_intensity: 2.4,
            background_noise_sigma: 1.2,
            contrast_scale: 1.0,
            tumor_free_fraction: 0.0,
        },
        SiteGenSpec {
            site_id: "site-b".into(),
            n_cases: 28,
            blob_radius_range: [5.5, 7.5],
            tumor_intensity: 2.1,
            background_noise_sigma: 1.3,
            contrast_scale: 1.1,
            tumor_free_fraction: 0.0,
        },
        SiteGenSpec {
            site_id: "site-c".into(),
            n_cases: 36,
            blob_radius_range: [6.5, 9.5],
            tumor_intensity: 1.8,
            background_noise_sigma: 1.4,
            contrast_scale: 1.2,
            tumor_free_fraction: 0.0,
        },
    ]
}

fn default_held_out() -> Vec<SiteGenSpec> {
    vec![
        SiteGenSpec {
            site_id: "site-d".into(),
            n_cases: 10,
            blob_radius_range: [4.5, 7.5],
            tumor_intensity: 2.25,
            background_noise_sigma: 1.25,
            contrast_scale: 1.05,
            tumor_free_fraction: 0.0,
        },
        SiteGenSpec {
            site_id: "site-e".into(),
            n_cases: 10,
            blob_radius_range: [5.5, 9.5],
            tumor_intensity: 1.95,
            background_noise_sigma: 1.35,
            contrast_scale: 1.15,
            tumor_free_fraction: 0.0,
        },
    ]
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            image_extent: 32,
            split: SplitRatios::default(),
            sites: default_sites(),
            held_out_sites: default_held_out(),
            model: ModelConfig::default(),
            schedule: Schedule::default(),
            loss: LossConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Checks every cross-field invariant. Field names in errors refer to the
    /// JSON keys.
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| GmlError::InvalidConfig {
            field: field.into(),
            reason,
        };
        if self.image_extent < 8 {
            return Err(bad(
                "image_extent",
                format!("must be >= 8, got {}", self.image_extent),
            ));
        }
        if self.sites.is_empty() {
            return Err(bad("sites", "at least one participant site".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for (i, s) in self.sites.iter().chain(&self.held_out_sites).enumerate() {
            s.validate(self.image_extent)
                .map_err(|e| bad(&format!("sites[{i}]"), e.to_string()))?;
            if !seen.insert(s.site_id.clone()) {
                return Err(bad(
                    &format!("sites[{i}]"),
                    format!("duplicate site_id {}", s.site_id),
                ));
            }
        }
        self.split
            .validate()
            .map_err(|e| bad("split", e.to_string()))?;
        self.model
            .arch
            .validate()
            .map_err(|e| bad("model.arch", e.to_string()))?;
        if !(self.model.learning_rate > 0.0 && self.model.learning_rate.is_finite()) {
            return Err(bad(
                "model.learning_rate",
                format!("must be positive and finite, got {}", self.model.learning_rate),
            ));
        }
        if !(0.0..1.0).contains(&self.model.momentum) {
            return Err(bad(
                "model.momentum",
                format!("must lie in [0, 1), got {}", self.model.momentum),
            ));
        }
        self.schedule.validate()?;
        if self.schedule.warmup_rounds >= self.schedule.total_rounds {
            return Err(bad(
                "schedule",
                format!(
                    "warmup_rounds ({}) must be < total_rounds ({})",
                    self.schedule.warmup_rounds, self.schedule.total_rounds
                ),
            ));
        }
        if !(self.loss.eps > 0.0 && self.loss.eps.is_finite()) {
            return Err(bad("loss.eps", "must be positive and finite".into()));
        }
        if !(self.loss.clamp > 0.0 && self.loss.clamp < 0.5) {
            return Err(bad("loss.clamp", "must lie in (0, 0.5)".into()));
        }
        if !(self.eval.threshold > 0.0 && self.eval.threshold < 1.0) {
            return Err(bad("eval.threshold", "must lie in (0, 1)".into()));
        }
        if let AggregationWeights::Explicit(w) = &self.eval.aggregation_weights {
            if w.len() != self.sites.len() {
                return Err(bad(
                    "eval.aggregation_weights",
                    format!("{} weights for {} sites", w.len(), self.sites.len()),
                ));
            }
            if w.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
                return Err(bad(
                    "eval.aggregation_weights",
                    "weights must be positive and finite".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization cannot fail")
    }
}

/// Parses and validates a config file.
///
/// Malformed JSON or unknown keys are reported with the line and column;
/// well-formed configs that violate an invariant name the offending field.
pub fn config_load(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| GmlError::io(path, e))?;
    config_parse(&text)
}

/// [`config_load`] for in-memory text.
pub fn config_parse(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = serde_json::from_str(text)
        .map_err(|e| GmlError::BadConfig(format!("line {}, column {}: {e}", e.line(), e.column())))?;
    cfg.validate()?;
    Ok(cfg)
}
