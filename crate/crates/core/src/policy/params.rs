use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Trainability partition of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    /// Observation encoder; frozen under action-policy fine-tuning.
    Backbone,
    /// Transformer blocks, projections, time embedding, token encoders, FiLM
    /// and bias tables.
    ActionPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FinetuneMode {
    /// Update only action-policy parameters.
    #[serde(rename = "AP-FT", alias = "ap_ft")]
    ApFt,
    /// Update everything.
    #[serde(rename = "Full-FT", alias = "full_ft")]
    FullFt,
}

impl FinetuneMode {
    pub fn trains(self, p: Partition) -> bool {
        matches!(self, FinetuneMode::FullFt) || p == Partition::ActionPolicy
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Array2<f64>,
    pub partition: Partition,
    /// Subject to decoupled weight decay.
    pub decay: bool,
}

/// Named parameters in a stable (sorted) order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>, partition: Partition, decay: bool) {
        self.params.insert(
            name.into(),
            Param {
                value,
                partition,
                decay,
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> &Array2<f64> {
        &self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
            .value
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.params.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn partition_of(&self, name: &str) -> Option<Partition> {
        self.params.get(name).map(|p| p.partition)
    }
}
