//! JSON experiment configuration.
//!
//! ```json
//! {
//!   "loss": "quadratic_4_1",
//!   "theta0": [0.3, 0.3],
//!   "sigma2": 1.0,
//!   "gains": {
//!     "bernoulli": { "a": 0.01897, "c": 0.1 },
//!     "segmented_uniform": { "a": 0.00167, "c": 0.1 }
//!   },
//!   "k_values": [1, 5, 10, 1000],
//!   "n_reps": 10000,
//!   "master_seed": 20130705
//! }
//! ```
//!
//! Optional keys: `theta_star` (defaults to the registered minimizer),
//! `noise` (`"gaussian"` or `"uniform"`), `condition` (one of
//! `theorem1_explicit`, `corollary1`, `corollary2`, `corollary3`; most
//! specific applicable form when absent), `third_derivative_bound` and
//! `output`. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SpsaError};
use crate::experiments::ExperimentSpec;
use crate::spsa::{GainSchedule, LossRegistry, NoiseLaw, ProblemConfig};
use crate::theory::{evaluate_condition, ConditionForm, ConditionInput, ConditionReport};

/// Gain constants keyed by distribution name.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainsByDistribution {
    pub bernoulli: GainSchedule,
    pub segmented_uniform: GainSchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    pub loss: String,
    pub theta0: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_star: Option<Vec<f64>>,
    pub sigma2: f64,
    #[serde(default)]
    pub noise: NoiseLaw,
    pub gains: GainsByDistribution,
    pub k_values: Vec<usize>,
    pub n_reps: u64,
    pub master_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<ConditionForm>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub third_derivative_bound: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
}

impl CliConfig {
    /// Parses JSON; syntax and schema errors carry line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Single-line JSON, for metadata echoes.
    pub fn to_json_compact(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn problem(&self, registry: &LossRegistry) -> Result<ProblemConfig> {
        let loss = registry.get(&self.loss)?;
        let theta_star = match (&self.theta_star, loss.minimizer()) {
            (Some(t), _) => t.clone(),
            (None, Some(m)) => m.to_vec(),
            (None, None) => {
                return Err(SpsaError::InvalidExperiment(format!(
                    "theta_star: required because loss `{}` has no registered minimizer",
                    self.loss
                )))
            }
        };
        Ok(ProblemConfig::new(loss, theta_star, self.sigma2, self.theta0.clone())?.with_noise(self.noise))
    }

    pub fn schedules(&self) -> Result<(GainSchedule, GainSchedule)> {
        let su = GainSchedule::new(self.gains.segmented_uniform.a, self.gains.segmented_uniform.c)?;
        let bern = GainSchedule::new(self.gains.bernoulli.a, self.gains.bernoulli.c)?;
        Ok((su, bern))
    }

    pub fn experiment_spec(&self, registry: &LossRegistry) -> Result<ExperimentSpec> {
        let (schedule_su, schedule_bern) = self.schedules()?;
        let spec = ExperimentSpec {
            problem: self.problem(registry)?,
            schedule_su,
            schedule_bern,
            k_values: self.k_values.clone(),
            n_reps: self.n_reps,
            master_seed: self.master_seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The condition form that [`CliConfig::condition_report`] evaluates.
    pub fn condition_form(&self, registry: &LossRegistry) -> Result<ConditionForm> {
        let loss = registry.get(&self.loss)?;
        Ok(self.condition.unwrap_or_else(|| {
            ConditionForm::auto(loss.is_quadratic(), loss.dim(), self.third_derivative_bound.is_some())
        }))
    }

    pub fn condition_report(&self, registry: &LossRegistry) -> Result<ConditionReport> {
        let problem = self.problem(registry)?;
        let (su, bern) = self.schedules()?;
        let (input, source) = ConditionInput::from_problem(&problem, &su, &bern, self.third_derivative_bound);
        let form = self.condition_form(registry)?;
        evaluate_condition(&input, form, problem.loss().is_quadratic(), source)
    }
}
