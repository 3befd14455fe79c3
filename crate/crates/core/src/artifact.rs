//! Talker checkpoints: model weights, identity library and optional
//! optimizer state in one file, plus a plain-text identity sidecar.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{DenoiserModel, ModelConfig};
use crate::nn::{AdamState, Checkpoint, ParameterSet};
use crate::personalization::{IdentityLibrary, LIBRARY_PARAM};

#[derive(Debug, Clone)]
pub struct TalkerArtifact {
    pub model: DenoiserModel,
    pub library: IdentityLibrary,
    pub adam: Option<AdamState>,
    /// Free-form entries stored next to the model and library keys.
    pub info: BTreeMap<String, String>,
}

pub fn identities_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".identities");
    PathBuf::from(s)
}

impl TalkerArtifact {
    pub fn new(model: DenoiserModel, library: IdentityLibrary) -> Self {
        Self {
            model,
            library,
            adam: None,
            info: BTreeMap::new(),
        }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        for id in self.library.ids() {
            if id.is_empty() || id.contains([',', '\n', '\r']) || id.trim() != id {
                return Err(Error::Checkpoint(format!("speaker id `{id}` cannot be stored")));
            }
        }
        let mut params = self.model.params.clone();
        params.insert(LIBRARY_PARAM, self.library.embeddings().clone())?;
        let mut metadata = self.info.clone();
        metadata.extend(self.model.config.to_kv());
        metadata.insert("library.temperature".into(), self.library.temperature.to_string());
        metadata.insert("library.ids".into(), self.library.ids().join(","));
        let flags: String = self.library.trainable().iter().map(|&t| if t { '1' } else { '0' }).collect();
        metadata.insert("library.trainable".into(), flags);
        Ok(Checkpoint {
            metadata,
            params,
            adam: self.adam.clone(),
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let meta = &ckpt.metadata;
        let config = ModelConfig::from_kv(meta)?;
        let field = |key: &str| {
            meta.get(key)
                .ok_or_else(|| Error::Checkpoint(format!("metadata lacks `{key}`")))
        };
        let temperature: f64 = field("library.temperature")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad library.temperature".into()))?;
        let ids_text = field("library.ids")?;
        let ids: Vec<String> = if ids_text.is_empty() {
            Vec::new()
        } else {
            ids_text.split(',').map(str::to_string).collect()
        };
        let trainable: Vec<bool> = field("library.trainable")?
            .chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                _ => Err(Error::Checkpoint(format!("bad trainable flag `{c}`"))),
            })
            .collect::<Result<_>>()?;
        let mut model_params = ParameterSet::new();
        let mut embeddings = None;
        for (name, p) in ckpt.params.iter() {
            if name == LIBRARY_PARAM {
                embeddings = Some(p.clone());
            } else {
                model_params.insert(name.clone(), p.clone())?;
            }
        }
        let embeddings = embeddings.ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks `{LIBRARY_PARAM}`")))?;
        let library = IdentityLibrary::from_parts(ids, trainable, embeddings, temperature)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let model = DenoiserModel::from_params(config, model_params)?;
        let info = meta
            .iter()
            .filter(|(k, _)| !k.starts_with("model.") && !k.starts_with("library."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Ok(Self {
            model,
            library,
            adam: ckpt.adam,
            info,
        })
    }

    /// Writes the checkpoint and its `.identities` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)?;
        let side = identities_path(path);
        std::fs::write(&side, self.library.manifest()).map_err(|e| Error::io(side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}
