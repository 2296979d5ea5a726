use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AutodiffError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Flat map from parameter path to tensor, serialised as JSON.
///
/// Floats are written with shortest round-trip formatting and parsed with
/// `float_roundtrip`, so save followed by load is bit-exact.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamMap(pub BTreeMap<String, Tensor>);

impl ParamMap {
    /// Collects every parameter of `store` under `prefix` + its name.
    pub fn insert_store(&mut self, prefix: &str, store: &ParamStore) {
        for id in store.ids() {
            self.0
                .insert(format!("{prefix}{}", store.name(id)), store.value(id).clone());
        }
    }

    /// Writes the matching entries back into `store`. Every parameter must be present.
    pub fn load_into(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let key = format!("{prefix}{}", store.name(id));
            let tensor = self
                .0
                .get(&key)
                .ok_or_else(|| AutodiffError::Checkpoint(format!("missing parameter `{key}`")))?;
            store
                .set_value(id, tensor.clone())
                .map_err(|e| AutodiffError::Checkpoint(format!("`{key}`: {e}")))?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: Self = serde_json::from_str(text)?;
        for (name, t) in &map.0 {
            if t.shape().iter().product::<usize>() != t.numel() {
                return Err(AutodiffError::Checkpoint(format!("`{name}`: data does not match shape")));
            }
        }
        Ok(map)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
