//! Checkpoint files: a safetensors archive of `f64` tensors whose header
//! metadata carries a JSON manifest under [`MANIFEST_KEY`]. Optimizer slots
//! are stored as `optim.m.<name>` and `optim.v.<name>`, with the optimizer
//! step count in the manifest entry as `optim_t`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::IxDyn;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::config::FlatConfig;
use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::partition::ParameterPartition;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_KEY: &str = "unisod.manifest";
const OPTIM_M: &str = "optim.m.";
const OPTIM_V: &str = "optim.v.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// Every model parameter.
    Full,
    /// Only the prompt-generation parameters of one task.
    Prompts,
}

/// The data order is a pure function of `(seed, epoch)`, so `seed` and
/// `step` are the whole random state a resume needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub algorithm: String,
    pub seed: u64,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub mode: String,
    pub task: String,
    pub step: u64,
    pub seed: u64,
    pub rng: RngState,
    pub partition: Option<ParameterPartition>,
    pub config: FlatConfig,
    pub best_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub params: ParamStore,
    pub optim: Option<AdamState>,
}

/// What the manifest metadata entry holds: the manifest itself plus the
/// optimizer step count when optimizer slots are stored.
#[derive(Serialize, Deserialize)]
struct Header {
    #[serde(flatten)]
    manifest: CheckpointManifest,
    optim_t: Option<u64>,
}

fn to_bytes(t: &Tensor) -> Vec<u8> {
    t.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn from_view(name: &str, v: &TensorView<'_>) -> Result<Tensor> {
    if v.dtype() != Dtype::F64 {
        return Err(Error::Checkpoint(format!(
            "tensor {name} has dtype {:?}, expected F64",
            v.dtype()
        )));
    }
    let data: Vec<f64> = v
        .data()
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Tensor::from_shape_vec(IxDyn(v.shape()), data).map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut named: BTreeMap<String, &Tensor> = BTreeMap::new();
        for (k, t) in self.params.iter() {
            if k.starts_with("optim.") {
                return Err(Error::Checkpoint(format!("parameter name {k} collides with optimizer slots")));
            }
            named.insert(k.clone(), t);
        }
        if let Some(o) = &self.optim {
            for (k, t) in &o.m {
                named.insert(format!("{OPTIM_M}{k}"), t);
            }
            for (k, t) in &o.v {
                named.insert(format!("{OPTIM_V}{k}"), t);
            }
        }
        let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = named
            .into_iter()
            .map(|(k, t)| (k, to_bytes(t), t.shape().to_vec()))
            .collect();
        let views = bytes
            .iter()
            .map(|(k, b, s)| {
                TensorView::new(Dtype::F64, s.clone(), b)
                    .map(|v| (k.as_str(), v))
                    .map_err(|e| Error::Checkpoint(format!("tensor {k}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        // A single metadata entry: safetensors writes the map in hash order,
        // and one key keeps the file bytes reproducible.
        let header = Header {
            manifest: self.manifest.clone(),
            optim_t: self.optim.as_ref().map(|o| o.t),
        };
        let mut meta = HashMap::new();
        meta.insert(
            MANIFEST_KEY.to_string(),
            serde_json::to_string(&header).expect("manifest is plain data"),
        );
        safetensors::serialize(views, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let meta = header
            .metadata()
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("archive has no metadata".into()))?;
        let raw = meta
            .get(MANIFEST_KEY)
            .ok_or_else(|| Error::Checkpoint(format!("archive has no `{MANIFEST_KEY}` entry")))?;
        let probe: serde_json::Value =
            serde_json::from_str(raw).map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
        let version = probe.get("format_version").and_then(|v| v.as_u64());
        if version != Some(FORMAT_VERSION as u64) {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format version {version:?}, expected {FORMAT_VERSION}"
            )));
        }
        let Header { manifest, optim_t } =
            serde_json::from_value(probe).map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;

        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut params = ParamStore::new();
        let mut optim = AdamState {
            t: optim_t.unwrap_or(0),
            ..AdamState::default()
        };
        for (name, view) in st.tensors() {
            let tensor = from_view(&name, &view)?;
            if let Some(k) = name.strip_prefix(OPTIM_M) {
                optim.m.insert(k.to_string(), tensor);
            } else if let Some(k) = name.strip_prefix(OPTIM_V) {
                optim.v.insert(k.to_string(), tensor);
            } else {
                params.insert(name, tensor);
            }
        }
        Ok(Self {
            manifest,
            params,
            optim: optim_t.map(|_| optim),
        })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn manifest() -> CheckpointManifest {
        CheckpointManifest {
            format_version: FORMAT_VERSION,
            kind: CheckpointKind::Full,
            mode: "pretrain".into(),
            task: "rgb".into(),
            step: 7,
            seed: 3,
            rng: RngState {
                algorithm: "chacha8".into(),
                seed: 3,
                step: 7,
            },
            partition: None,
            config: FlatConfig::default(),
            best_loss: Some(0.25),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let mut params = ParamStore::new();
        params.insert("decoder.head.weight", arr2(&[[0.1, -1e-300], [f64::MAX, 3.0]]).into_dyn());
        let mut optim = AdamState {
            t: 4,
            ..Default::default()
        };
        optim.m.insert("decoder.head.weight".into(), arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        optim.v.insert("decoder.head.weight".into(), arr2(&[[5.0, 6.0], [7.0, 8.0]]).into_dyn());
        let ck = Checkpoint {
            manifest: manifest(),
            params,
            optim: Some(optim),
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn header_holds_one_metadata_entry_and_optional_optimizer() {
        let ck = Checkpoint {
            manifest: manifest(),
            params: ParamStore::new(),
            optim: None,
        };
        let bytes = ck.to_bytes().unwrap();
        let (_, header) = SafeTensors::read_metadata(&bytes).unwrap();
        let meta = header.metadata().as_ref().unwrap();
        assert_eq!(meta.keys().collect::<Vec<_>>(), [MANIFEST_KEY]);
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
        assert_eq!(bytes, ck.to_bytes().unwrap());
    }

    #[test]
    fn wrong_version_is_rejected() {
        let mut ck = Checkpoint {
            manifest: manifest(),
            params: ParamStore::new(),
            optim: None,
        };
        ck.manifest.format_version = 99;
        let err = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap_err();
        assert!(err.to_string().contains("version"));
        assert!(Checkpoint::from_bytes(b"garbage").is_err());
    }
}
