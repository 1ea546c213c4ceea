//! Run configuration: everything a training run needs, deserializable from a
//! JSON document whose keys mirror the field names below. Unknown keys are a
//! hard error so typos fail fast instead of silently training the wrong
//! thing.

use serde::{Deserialize, Serialize};

use crate::controller::ControllerConfig;
use crate::error::{Error, Result};
use crate::models::{self, Dataset, LossKind, ModelSpec};
use crate::optim::Variant;

/// Which update rule drives the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Sparsity-inducing Bregman iterations.
    LinBreg,
    /// Bregman iterations with Adam-style moments on the dual.
    AdaBreg,
    /// Dense momentum SGD baseline.
    Sgd,
    /// Dense decoupled-weight-decay Adam baseline.
    AdamW,
    /// Dense SGD plus a gradual magnitude-pruning schedule.
    Prune,
}

impl OptimizerKind {
    pub fn is_bregman(self) -> bool {
        matches!(self, OptimizerKind::LinBreg | OptimizerKind::AdaBreg)
    }

    /// Step-size preset used when the config leaves `tau` unset.
    pub fn default_tau(self) -> f64 {
        match self {
            OptimizerKind::LinBreg => 0.1,
            OptimizerKind::AdaBreg => 0.01,
            OptimizerKind::Sgd | OptimizerKind::Prune => 0.1,
            OptimizerKind::AdamW => 1e-3,
        }
    }

    /// Starting regularization weight preset for adaptive Bregman runs.
    pub fn default_lambda0(self) -> f64 {
        match self {
            OptimizerKind::AdaBreg => ControllerConfig::LAMBDA0_ADABREG,
            _ => ControllerConfig::LAMBDA0_LINBREG,
        }
    }
}

/// Step-size schedule applied at epoch boundaries. Touches only the step
/// size (tau for Bregman runs, lr for dense ones); controller state is never
/// decayed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrDecay {
    None,
    /// Multiply by `factor` once the epoch-mean training loss has not
    /// improved for more than `patience` consecutive epochs.
    Plateau { factor: f64, patience: usize },
    /// Multiply by `rate` after every epoch.
    PerEpochExp { rate: f64 },
}

impl Default for LrDecay {
    fn default() -> Self {
        LrDecay::None
    }
}

impl LrDecay {
    fn validate(&self) -> Result<()> {
        match *self {
            LrDecay::None => Ok(()),
            LrDecay::Plateau { factor, .. } => {
                if !(0.0 < factor && factor < 1.0) {
                    return Err(Error::InvalidConfig(format!(
                        "plateau factor must lie in (0,1), got {factor}"
                    )));
                }
                Ok(())
            }
            LrDecay::PerEpochExp { rate } => {
                if !(0.0 < rate && rate <= 1.0) {
                    return Err(Error::InvalidConfig(format!(
                        "per-epoch decay rate must lie in (0,1], got {rate}"
                    )));
                }
                Ok(())
            }
        }
    }
}

/// Synthetic dataset recipe. Generation is seeded independently of the run
/// seed so the same data can be reused across optimizer comparisons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    SparseRegression { d: usize, n: usize, k_sparse: usize, noise_sigma: f64, seed: u64 },
    Blobs { n_per_class: usize, classes: usize, d_in: usize, separation: f64, seed: u64 },
}

impl DataSpec {
    pub fn d_in(&self) -> usize {
        match *self {
            DataSpec::SparseRegression { d, .. } => d,
            DataSpec::Blobs { d_in, .. } => d_in,
        }
    }

    pub fn n_rows(&self) -> usize {
        match *self {
            DataSpec::SparseRegression { n, .. } => n,
            DataSpec::Blobs { n_per_class, classes, .. } => n_per_class * classes,
        }
    }

    /// Build the dataset; for regression recipes the planted coefficient
    /// vector comes back alongside it.
    pub fn materialize(&self) -> Result<(Dataset, Option<Vec<f64>>)> {
        match *self {
            DataSpec::SparseRegression { d, n, k_sparse, noise_sigma, seed } => {
                let (ds, truth) = models::gen_sparse_regression(d, n, k_sparse, noise_sigma, seed)?;
                Ok((ds, Some(truth)))
            }
            DataSpec::Blobs { n_per_class, classes, d_in, separation, seed } => {
                Ok((models::gen_blobs(n_per_class, classes, d_in, separation, seed)?, None))
            }
        }
    }
}

fn default_classifier_scale() -> f64 {
    1.0
}

fn default_prune_epochs() -> usize {
    10
}

/// Complete description of one training run.
///
/// `tau` doubles as the Bregman step size and the dense learning rate; when
/// unset, each optimizer's preset applies. For Bregman runs exactly one of
/// `adaptive` and `fixed_lambda` must be chosen; dense baselines ignore both
/// (a present `fixed_lambda` is tolerated so configs can be shared across
/// optimizer columns).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub data: DataSpec,
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub adaptive: bool,
    #[serde(default)]
    pub fixed_lambda: Option<f64>,
    #[serde(default)]
    pub target_sparsity: Option<f64>,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub variant: Variant,
    /// Step size; tau for Bregman runs, learning rate for dense ones.
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default)]
    pub lr_decay: LrDecay,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Probability of zeroing each regularized entry at initialization.
    #[serde(default)]
    pub s_init: f64,
    /// Multiplier on lambda for tensors named `classifier.*`.
    #[serde(default = "default_classifier_scale")]
    pub classifier_lambda_scale: f64,
    /// Length of the gradual pruning ramp, in epochs.
    #[serde(default = "default_prune_epochs")]
    pub prune_schedule_epochs: usize,
    /// Apply the full pruning target at epoch 0 instead of ramping.
    #[serde(default)]
    pub prune_single_shot: bool,
}

impl RunConfig {
    /// Starting lambda the run will actually use.
    pub fn resolve_lambda0(&self) -> f64 {
        if !self.optimizer.is_bregman() {
            return 0.0;
        }
        if self.adaptive {
            self.controller.lambda0.unwrap_or_else(|| self.optimizer.default_lambda0())
        } else {
            self.fixed_lambda.unwrap_or(0.0)
        }
    }

    /// Step size the run will actually use.
    pub fn resolve_tau(&self) -> f64 {
        self.tau.unwrap_or_else(|| self.optimizer.default_tau())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.controller.validate()?;
        self.lr_decay.validate()?;
        if self.data.d_in() != self.model.d_in() {
            return Err(Error::ShapeMismatch {
                expected: self.model.d_in(),
                got: self.data.d_in(),
            });
        }
        match (&self.data, self.model.loss) {
            (DataSpec::SparseRegression { .. }, LossKind::SquaredError) => {}
            (DataSpec::Blobs { classes, .. }, LossKind::CrossEntropy) => {
                if *classes != self.model.d_out() {
                    return Err(Error::InvalidConfig(format!(
                        "data has {} classes but the model emits {} logits",
                        classes,
                        self.model.d_out()
                    )));
                }
            }
            _ => {
                return Err(Error::InvalidConfig(
                    "data kind and model loss disagree: sparse_regression pairs with \
                     squared_error, blobs with cross_entropy"
                        .into(),
                ))
            }
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if let Some(t) = self.tau {
            if !(t > 0.0) {
                return Err(Error::InvalidConfig(format!("tau must be positive, got {t}")));
            }
        }
        if !(0.0..1.0).contains(&self.s_init) {
            return Err(Error::InvalidConfig(format!(
                "s_init must lie in [0,1), got {}",
                self.s_init
            )));
        }
        if !(self.classifier_lambda_scale > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "classifier_lambda_scale must be positive, got {}",
                self.classifier_lambda_scale
            )));
        }
        if let Some(s) = self.target_sparsity {
            if !(0.0 < s && s < 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "target_sparsity must lie in (0,1), got {s}"
                )));
            }
        }
        if let Some(l) = self.fixed_lambda {
            if !(l >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "fixed_lambda must be nonnegative, got {l}"
                )));
            }
        }
        match self.optimizer {
            OptimizerKind::LinBreg | OptimizerKind::AdaBreg => {
                if self.adaptive == self.fixed_lambda.is_some() {
                    return Err(Error::InvalidConfig(
                        "adaptive and fixed_lambda are mutually exclusive: set exactly one \
                         of them for a Bregman run"
                            .into(),
                    ));
                }
                if self.adaptive && self.target_sparsity.is_none() {
                    return Err(Error::InvalidConfig(
                        "adaptive runs need target_sparsity".into(),
                    ));
                }
                if self.variant == Variant::ProxRescale && !(self.resolve_lambda0() > 0.0) {
                    return Err(Error::InvalidConfig(
                        "prox_rescale needs a positive lambda".into(),
                    ));
                }
            }
            OptimizerKind::Sgd | OptimizerKind::AdamW => {
                if self.adaptive {
                    return Err(Error::InvalidConfig(
                        "adaptive requires a Bregman optimizer (linbreg or adabreg)".into(),
                    ));
                }
            }
            OptimizerKind::Prune => {
                if self.adaptive {
                    return Err(Error::InvalidConfig(
                        "adaptive requires a Bregman optimizer (linbreg or adabreg)".into(),
                    ));
                }
                if self.target_sparsity.is_none() {
                    return Err(Error::InvalidConfig(
                        "pruning runs need target_sparsity".into(),
                    ));
                }
                if self.prune_schedule_epochs == 0 {
                    return Err(Error::InvalidConfig(
                        "prune_schedule_epochs must be at least 1".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Parse a config from JSON text, rejecting unknown keys anywhere.
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Serialization(e.to_string()))?;
        Ok(cfg)
    }

    /// Stable JSON rendering used for hashing and for writing the resolved
    /// config back into a run directory. Field order follows the struct, so
    /// equal configs always serialize to equal bytes.
    pub fn canonical_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    /// Apply one `key=value` override, with dots descending into nested
    /// objects (`controller.f=10`). The value is parsed as JSON when
    /// possible, else taken as a bare string. Unknown keys are an error.
    pub fn with_override(&self, path: &str, raw: &str) -> Result<RunConfig> {
        let mut doc =
            serde_json::to_value(self).map_err(|e| Error::Serialization(e.to_string()))?;
        apply_override(&mut doc, path, raw)?;
        serde_json::from_value(doc).map_err(|e| {
            Error::InvalidConfig(format!("override {path}={raw} does not fit the config: {e}"))
        })
    }
}

/// Set `path` (dot-separated) inside a JSON document to the parsed `raw`
/// value. Every path segment except the last must already name an object
/// field; the last must name an existing key, so overrides can never invent
/// config entries.
pub fn apply_override(doc: &mut serde_json::Value, path: &str, raw: &str) -> Result<()> {
    let segs: Vec<&str> = path.split('.').collect();
    if segs.iter().any(|s| s.is_empty()) {
        return Err(Error::InvalidConfig(format!("malformed override key {path:?}")));
    }
    let mut cursor = doc;
    for seg in &segs[..segs.len() - 1] {
        cursor = match cursor {
            serde_json::Value::Object(map) => map.get_mut(*seg).ok_or_else(|| {
                Error::InvalidConfig(format!("unknown config key {seg:?} in override {path:?}"))
            })?,
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "config key {seg:?} in override {path:?} is not an object"
                )))
            }
        };
    }
    let last = segs[segs.len() - 1];
    let parsed =
        serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    match cursor {
        serde_json::Value::Object(map) => {
            if !map.contains_key(last) {
                return Err(Error::InvalidConfig(format!(
                    "unknown config key {last:?} in override {path:?}"
                )));
            }
            map.insert(last.to_string(), parsed);
            Ok(())
        }
        _ => Err(Error::InvalidConfig(format!(
            "override {path:?} does not point into an object"
        ))),
    }
}
