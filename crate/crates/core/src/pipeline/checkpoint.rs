use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::train::EpochRecord;
use crate::error::{Error, Result};
use crate::lsg::ToyLM;
use crate::model::HoiModel;
use crate::nncore::{Mat, ParamStore};
use crate::synthworld::{Catalog, SplitSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub trainable: bool,
    pub values: Mat,
}

/// Model weights without the language model, which lives in its own file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub catalog: Catalog,
    pub split: SplitSpec,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub params: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn from_store(config: &RunConfig, catalog: &Catalog, split: &SplitSpec, store: &ParamStore, history: &[EpochRecord]) -> Self {
        let lm_prefix = format!("{}.", ToyLM::PREFIX);
        let params = store
            .iter()
            .filter(|(_, p)| !p.name().starts_with(&lm_prefix))
            .map(|(_, p)| NamedArray { name: p.name().to_string(), trainable: p.trainable(), values: p.values().clone() })
            .collect();
        Self {
            config: config.clone(),
            catalog: catalog.clone(),
            split: split.clone(),
            epoch: history.len(),
            history: history.to_vec(),
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("checkpoint {}: {e}", path.display()))))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Rebuilds the model skeleton and overwrites every parameter by name.
    pub fn restore(&self) -> Result<(ParamStore, HoiModel)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut store = ParamStore::new();
        let model = HoiModel::new(&mut store, self.config.model.clone(), &self.catalog, &self.split, &mut rng)?;
        if store.len() != self.params.len() {
            return Err(Error::Format(format!("checkpoint has {} arrays, model has {}", self.params.len(), store.len())));
        }
        for a in &self.params {
            let id = store.id(&a.name)?;
            store.set_values(id, a.values.clone())?;
            store.set_trainable(id, a.trainable);
        }
        Ok((store, model))
    }
}
