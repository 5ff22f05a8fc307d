//! Versioned checkpoint files.
//!
//! A checkpoint is a safetensors container. Parameters are stored under
//! `param/<name>`, optimizer buffers under `<buffer>/<name>`. A single
//! metadata entry holds a JSON header with the model configuration, seed,
//! step count and free-form extras; one entry keeps the file bytes
//! independent of hash-map iteration order.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerNet, ModelConfig};
use crate::optim::{Optimizer, OptimizerKind};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "layerseg-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_KEY: &str = "layerseg";
const PARAM_PREFIX: &str = "param/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub seed: u64,
    /// Optimizer updates applied to the stored parameters.
    pub step: u64,
    pub optimizer: Option<OptimizerKind>,
    /// Caller-defined values such as the training configuration.
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<(String, Tensor)>,
    /// Optimizer buffers keyed `<buffer>/<param name>`.
    pub optimizer_state: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn capture(model: &LayerNet, optimizer: Option<&Optimizer>, seed: u64, step: u64) -> Self {
        let params = model
            .store()
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        Self {
            header: CheckpointHeader {
                format: CHECKPOINT_FORMAT.into(),
                version: CHECKPOINT_VERSION,
                model: model.config().clone(),
                seed,
                step,
                optimizer: optimizer.map(Optimizer::kind),
                extra: BTreeMap::new(),
            },
            params,
            optimizer_state: optimizer
                .map(|o| o.export_state(model.store()))
                .unwrap_or_default(),
        }
    }

    /// Rebuilds the model with the stored parameters.
    pub fn model(&self) -> Result<LayerNet> {
        let mut net = LayerNet::new(self.header.model.clone(), self.header.seed)?;
        net.store_mut().load_from(self.params.iter().cloned())?;
        Ok(net)
    }

    /// Rebuilds the optimizer for `model` with the stored state.
    pub fn optimizer(&self, model: &LayerNet, lr: f64) -> Result<Optimizer> {
        let kind = self
            .header
            .optimizer
            .ok_or_else(|| Error::Checkpoint("checkpoint holds no optimizer state".into()))?;
        let mut opt = Optimizer::new(kind, model.store(), lr);
        opt.import_state(model.store(), self.header.step, &self.optimizer_state)?;
        Ok(opt)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_string(&self.header)?;
        let named: Vec<(String, &Tensor)> = self
            .params
            .iter()
            .map(|(n, t)| (format!("{PARAM_PREFIX}{n}"), t))
            .chain(self.optimizer_state.iter().map(|(n, t)| (n.clone(), t)))
            .collect();
        let bytes: Vec<Vec<u8>> = named
            .iter()
            .map(|(_, t)| t.data().iter().flat_map(|v| v.to_le_bytes()).collect())
            .collect();
        let views = named
            .iter()
            .zip(&bytes)
            .map(|((n, t), b)| {
                let view = TensorView::new(Dtype::F32, t.shape().to_vec(), b)
                    .map_err(|e| Error::Checkpoint(format!("tensor `{n}`: {e}")))?;
                Ok((n.clone(), view))
            })
            .collect::<Result<Vec<_>>>()?;
        let metadata = Some(HashMap::from([(HEADER_KEY.to_string(), header)]));
        safetensors::serialize(views, &metadata).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(buffer: &[u8]) -> Result<Self> {
        let (_, meta) =
            SafeTensors::read_metadata(buffer).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let header_json = meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get(HEADER_KEY))
            .ok_or_else(|| Error::Checkpoint("checkpoint header missing".into()))?;
        let header: CheckpointHeader = serde_json::from_str(header_json)?;
        if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                header.format, header.version
            )));
        }
        let st = SafeTensors::deserialize(buffer).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut params = Vec::new();
        let mut optimizer_state = Vec::new();
        let mut names = st.names();
        names.sort();
        for name in names {
            let view = st
                .tensor(name)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            if view.dtype() != Dtype::F32 {
                return Err(Error::Checkpoint(format!("tensor `{name}` is not f32")));
            }
            let data = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(view.shape().to_vec(), data)?;
            match name.strip_prefix(PARAM_PREFIX) {
                Some(p) => params.push((p.to_string(), t)),
                None => optimizer_state.push((name.to_string(), t)),
            }
        }
        Ok(Self {
            header,
            params,
            optimizer_state,
        })
    }

    /// Writes via a temporary file and rename so readers never see a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
