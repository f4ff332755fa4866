//! Frozen/trainable split of the model parameters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::TrainMode;
use crate::error::{Error, Result};
use crate::params::ParamSpec;

pub const NAMESPACES: [&str; 4] = ["backbone.", "transformer.", "decoder.", "spg."];

/// Which parameters an optimizer may touch, with element counts per name.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParameterPartition {
    pub trainable: BTreeMap<String, usize>,
    pub frozen: BTreeMap<String, usize>,
}

impl ParameterPartition {
    pub fn trainable_count(&self) -> usize {
        self.trainable.values().sum()
    }

    pub fn frozen_count(&self) -> usize {
        self.frozen.values().sum()
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.contains_key(name)
    }

    pub fn check_disjoint(&self) -> Result<()> {
        if let Some(name) = self.trainable.keys().find(|k| self.frozen.contains_key(*k)) {
            return Err(Error::Accounting(format!(
                "`{name}` is both trainable and frozen"
            )));
        }
        Ok(())
    }

    /// Every spec assigned exactly once, with matching counts, and nothing extra.
    pub fn check_covers(&self, specs: &[ParamSpec]) -> Result<()> {
        self.check_disjoint()?;
        for s in specs {
            let n = self
                .trainable
                .get(&s.name)
                .or_else(|| self.frozen.get(&s.name))
                .ok_or_else(|| Error::Accounting(format!("`{}` is not assigned", s.name)))?;
            if *n != s.numel() {
                return Err(Error::Accounting(format!(
                    "`{}` counted as {n} elements, has {}",
                    s.name,
                    s.numel()
                )));
            }
        }
        let assigned = self.trainable.len() + self.frozen.len();
        if assigned != specs.len() {
            return Err(Error::Accounting(format!(
                "partition assigns {assigned} parameters, model has {}",
                specs.len()
            )));
        }
        Ok(())
    }
}

/// Splits `specs` according to `mode`: pre-training and full fine-tuning
/// train everything, the prompt modes train only `spg.*`, and `no_spg`
/// trains nothing.
pub fn partition_parameters(specs: &[ParamSpec], mode: TrainMode) -> Result<ParameterPartition> {
    let mut part = ParameterPartition::default();
    for s in specs {
        if !NAMESPACES.iter().any(|ns| s.name.starts_with(ns)) {
            return Err(Error::Accounting(format!(
                "`{}` is outside the known namespaces {NAMESPACES:?}",
                s.name
            )));
        }
        let trainable = match mode {
            TrainMode::Pretrain | TrainMode::FullFinetune => true,
            TrainMode::PromptTune | TrainMode::PromptConcat => s.name.starts_with("spg."),
            TrainMode::NoSpg => false,
        };
        let slot = if trainable {
            &mut part.trainable
        } else {
            &mut part.frozen
        };
        if slot.insert(s.name.clone(), s.numel()).is_some() {
            return Err(Error::Accounting(format!("`{}` declared twice", s.name)));
        }
    }
    Ok(part)
}
