use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CausalLMConfig, Head, IlqlHeads, PolicyModel};
use crate::error::{Error, IoContext, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, StoreState};

pub const CHECKPOINT_FORMAT: &str = "offrl-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct IlqlState<T: Scalar> {
    pub q: StoreState<T>,
    pub v: StoreState<T>,
    pub eta: f64,
    pub target_v: Option<StoreState<T>>,
    #[serde(default)]
    pub critic: Option<StoreState<T>>,
}

/// On-disk form of a [`PolicyModel`], tagged with format and version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Checkpoint<T: Scalar> {
    pub format: String,
    pub version: u32,
    pub scalar: String,
    pub vocab_hash: String,
    /// Hashes of the config and upstream artifacts this model came from.
    pub provenance: BTreeMap<String, String>,
    pub config: CausalLMConfig,
    pub backbone: StoreState<T>,
    pub ilql: Option<IlqlState<T>>,
    pub value_head: Option<StoreState<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_model(model: &PolicyModel<T>, vocab_hash: &str, provenance: BTreeMap<String, String>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            scalar: T::NAME.into(),
            vocab_hash: vocab_hash.into(),
            provenance,
            config: model.config.clone(),
            backbone: model.backbone.state(),
            ilql: model.ilql.as_ref().map(|h| IlqlState {
                q: h.q.store.state(),
                v: h.v.store.state(),
                eta: h.eta,
                target_v: h.target_v.as_ref().map(|t| t.store.state()),
                critic: h.critic.as_ref().map(ParamStore::state),
            }),
            value_head: model.value_head.as_ref().map(|h| h.store.state()),
        }
    }

    pub fn into_model(self) -> Result<PolicyModel<T>> {
        let head = |s: StoreState<T>| -> Result<Head<T>> { Head::from_store(ParamStore::from_state(s)?) };
        let ilql = match self.ilql {
            Some(s) => Some(IlqlHeads {
                q: head(s.q)?,
                v: head(s.v)?,
                eta: s.eta,
                target_v: s.target_v.map(head).transpose()?,
                critic: s.critic.map(ParamStore::from_state).transpose()?,
            }),
            None => None,
        };
        let value_head = self.value_head.map(head).transpose()?;
        PolicyModel::from_parts(self.config, ParamStore::from_state(self.backbone)?, ilql, value_head)
    }
}

pub fn save_checkpoint<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    let bytes = serde_json::to_vec(ckpt)?;
    std::fs::write(path, bytes).at(path)
}

/// Reads a checkpoint and checks its format tag, version, and scalar type.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).at(path)?;
    #[derive(Deserialize)]
    struct Tag {
        format: String,
        version: u32,
        scalar: String,
    }
    let tag: Tag = serde_json::from_slice(&bytes)?;
    if tag.format != CHECKPOINT_FORMAT || tag.version != CHECKPOINT_VERSION {
        return Err(Error::Invalid(format!("{}: unsupported checkpoint {} v{}", path.display(), tag.format, tag.version)));
    }
    if tag.scalar != T::NAME {
        return Err(Error::Invalid(format!("{}: checkpoint holds {} values, expected {}", path.display(), tag.scalar, T::NAME)));
    }
    Ok(serde_json::from_slice(&bytes)?)
}
