//! Run configuration: one JSON document with `model`, `task`, `selector`,
//! `optimizer` and `run` sections, plus dotted-path overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::DyConvention;
use crate::model::ToyModelConfig;
use crate::optimizer::OptimizerConfig;
use crate::synth::SynthTask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Re-evaluate importance and re-plan at every evaluation event.
    Adaptive,
    /// Train every tensor.
    FullFt,
    /// The deepest bp-order prefix of tensors that fits the budget.
    FixedTopK,
    /// Plan once at the first evaluation event and keep that mask.
    StaticFirstEpoch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Decays linearly from `optimizer.lr` to zero over the run.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectorConfig {
    pub rho: f64,
    pub t_q: u64,
    pub dy_convention: DyConvention,
    pub prune: bool,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        SelectorConfig {
            rho: 0.5,
            t_q: 1000,
            dy_convention: DyConvention::Inclusive,
            prune: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub strategy: Strategy,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub lr_schedule: LrSchedule,
    /// Iterations between importance evaluations; `None` means once per epoch.
    pub eval_every: Option<usize>,
    /// Size of the held-out set scored after every epoch.
    pub eval_examples: usize,
    /// Budgets visited by `sweep`.
    pub rhos: Vec<f64>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            strategy: Strategy::Adaptive,
            epochs: 10,
            steps_per_epoch: 100,
            batch_size: 16,
            lr_schedule: LrSchedule::Linear,
            eval_every: None,
            eval_examples: 256,
            rhos: vec![0.4, 0.5, 0.7],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ToyModelConfig,
    pub task: SynthTask,
    pub selector: SelectorConfig,
    pub optimizer: OptimizerConfig,
    pub run: RunSection,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Sets `key` (a dotted path such as `selector.rho`) to `value`. The value
    /// is read as JSON when it parses, otherwise as a string. Unknown keys are
    /// an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut doc = serde_json::to_value(&*self).expect("config serializes");
        let mut cur = &mut doc;
        for part in key.split('.') {
            cur = cur
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::config(key, "unknown configuration key"))?;
        }
        *cur = serde_json::from_str(value).unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
        *self = serde_json::from_value(doc).map_err(|e| Error::config(key, e.to_string()))?;
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<'a>(&mut self, overrides: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for item in overrides {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| Error::config(item, "override must look like key=value"))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate(self.model.vocab, self.model.n)?;
        self.optimizer.validate()?;
        crate::importance::check_rho(self.selector.rho).map_err(|_| {
            Error::config("selector.rho", format!("{} is outside (0, 1]", self.selector.rho))
        })?;
        if self.selector.t_q == 0 {
            return Err(Error::config("selector.t_q", "must be at least 1"));
        }
        for (field, v) in [
            ("run.epochs", self.run.epochs),
            ("run.steps_per_epoch", self.run.steps_per_epoch),
            ("run.batch_size", self.run.batch_size),
            ("run.eval_examples", self.run.eval_examples),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.run.eval_every == Some(0) {
            return Err(Error::config("run.eval_every", "must be at least 1"));
        }
        if let Some(bad) = self.run.rhos.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return Err(Error::config("run.rhos", format!("{bad} is outside (0, 1]")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        c.validate().unwrap();
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let c = RunConfig::from_json(r#"{"selector": {"rho": 0.7}}"#).unwrap();
        assert_eq!(c.selector.rho, 0.7);
        assert_eq!(c.selector.t_q, 1000);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(RunConfig::from_json(r#"{"selector": {"roh": 0.7}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"extra": {}}"#).is_err());
    }

    #[test]
    fn overrides() {
        let mut c = RunConfig::default();
        c.apply_overrides(["selector.rho=0.4", "run.strategy=full_ft", "run.eval_every=25", "task.kind=reverse"])
            .unwrap();
        assert_eq!(c.selector.rho, 0.4);
        assert_eq!(c.run.strategy, Strategy::FullFt);
        assert_eq!(c.run.eval_every, Some(25));
        assert_eq!(c.task.kind, crate::synth::TaskKind::Reverse);
        match c.set("selector.rhoo", "1") {
            Err(Error::Config { field, .. }) => assert_eq!(field, "selector.rhoo"),
            other => panic!("{other:?}"),
        }
        assert!(c.set("selector.rho", "\"high\"").is_err());
        assert!(c.apply_overrides(["selector.rho"]).is_err());
    }

    #[test]
    fn validation_names_fields() {
        let mut c = RunConfig::default();
        c.selector.rho = 0.0;
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "selector.rho"));
        let mut c = RunConfig::default();
        c.task.max_len = 9;
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "task.max_len"));
    }
}
