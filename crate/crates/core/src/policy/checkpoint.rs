use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::config::{MaskMode, PolicyConfig};
use super::model::{initial_topology_table, PolicyModel};
use super::params::{ParamStore, Partition};
use crate::error::{Error, Result};
use crate::morphology::NormalizationStats;

pub const CHECKPOINT_FORMAT: &str = "morphpolicy-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoredTensor {
    partition: Partition,
    decay: bool,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    format: String,
    version: u32,
    config: PolicyConfig,
    norm_stats: NormalizationStats,
    tensors: BTreeMap<String, StoredTensor>,
}

/// JSON text of a model. Floats round-trip exactly.
pub fn to_json(model: &PolicyModel) -> String {
    let tensors = model
        .params
        .iter()
        .map(|(name, p)| {
            let (r, c) = p.value.dim();
            let stored = StoredTensor {
                partition: p.partition,
                decay: p.decay,
                shape: [r, c],
                data: p.value.iter().copied().collect(),
            };
            (name.clone(), stored)
        })
        .collect();
    let doc = Document {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        norm_stats: model.norm_stats.clone(),
        tensors,
    };
    serde_json::to_string(&doc).expect("checkpoint serializes")
}

/// Model under the stored config.
pub fn from_json(text: &str) -> Result<PolicyModel> {
    let doc = parse(text)?;
    PolicyModel::from_parts(doc.config, store(doc.tensors)?, doc.norm_stats)
}

/// Model under `target`. The stored config must equal `target`, except that
/// a checkpoint trained with a hard mask mode may be loaded into
/// `spd_softmask`: every shared tensor is kept and the distance table is
/// initialized from `target.spd_init`.
pub fn from_json_as(text: &str, target: &PolicyConfig) -> Result<PolicyModel> {
    let doc = parse(text)?;
    let mut params = store(doc.tensors)?;
    if doc.config == *target {
        return PolicyModel::from_parts(doc.config, params, doc.norm_stats);
    }
    let warm = target.mask_mode == MaskMode::SpdSoftmask && doc.config.mask_mode.hard_schedule().is_some() && {
        let mut relaxed = doc.config.clone();
        relaxed.mask_mode = target.mask_mode;
        relaxed.spd_init = target.spd_init;
        relaxed == *target
    };
    if !warm {
        return Err(Error::Checkpoint(format!(
            "config mismatch: {}",
            config_diff(&doc.config, target).join(", ")
        )));
    }
    let (name, table) = initial_topology_table(target).expect("spd mode has a table");
    params.insert(name, table, Partition::ActionPolicy, false);
    PolicyModel::from_parts(target.clone(), params, doc.norm_stats)
}

pub fn save(model: &PolicyModel, path: &Path) -> Result<()> {
    std::fs::write(path, to_json(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<PolicyModel> {
    from_json(&std::fs::read_to_string(path)?)
}

pub fn load_as(path: &Path, target: &PolicyConfig) -> Result<PolicyModel> {
    from_json_as(&std::fs::read_to_string(path)?, target)
}

fn parse(text: &str) -> Result<Document> {
    let doc: Document = serde_json::from_str(text)?;
    if doc.format != CHECKPOINT_FORMAT || doc.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint {} v{}",
            doc.format, doc.version
        )));
    }
    Ok(doc)
}

fn store(tensors: BTreeMap<String, StoredTensor>) -> Result<ParamStore> {
    let mut out = ParamStore::default();
    for (name, t) in tensors {
        let value = Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data)
            .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        out.insert(name, value, t.partition, t.decay);
    }
    Ok(out)
}

/// Names of top-level config fields that differ.
fn config_diff(a: &PolicyConfig, b: &PolicyConfig) -> Vec<String> {
    let (Ok(serde_json::Value::Object(a)), Ok(serde_json::Value::Object(b))) =
        (serde_json::to_value(a), serde_json::to_value(b))
    else {
        return vec!["unserializable config".into()];
    };
    a.iter()
        .filter(|(k, v)| b.get(*k) != Some(v))
        .map(|(k, v)| format!("{k} {v} vs {}", b.get(k).cloned().unwrap_or_default()))
        .collect()
}
