//! Checkpoint files.
//!
//! Layout: one ASCII header line `GDRCKPT <version> <manifest bytes>`, a JSON
//! manifest of that many bytes, then every parameter as little-endian `f32`
//! in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use gdr_core::data::{SyntheticSpec, Vocab, NUM_RESERVED};
use gdr_core::{LossConfig, Model, ModelConfig, ParamStore, Tensor, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const MAGIC: &str = "GDRCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub steps_done: usize,
    /// Generator settings when trained on a synthetic task.
    pub task: Option<SyntheticSpec>,
    /// Regular tokens; the reserved tokens are implied.
    pub src_vocab: Vec<String>,
    pub tgt_vocab: Vec<String>,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ParamStore<f32>,
}

fn regular_tokens(v: &Vocab) -> Vec<String> {
    v.tokens()[NUM_RESERVED..].to_vec()
}

impl Checkpoint {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: ModelConfig,
        loss: LossConfig,
        train: TrainConfig,
        steps_done: usize,
        task: Option<SyntheticSpec>,
        src_vocab: &Vocab,
        tgt_vocab: &Vocab,
        params: &ParamStore<f32>,
    ) -> Self {
        let entries = params
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect();
        Checkpoint {
            manifest: Manifest {
                version: FORMAT_VERSION,
                model,
                loss,
                train,
                steps_done,
                task,
                src_vocab: regular_tokens(src_vocab),
                tgt_vocab: regular_tokens(tgt_vocab),
                params: entries,
            },
            params: params.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec_pretty(&self.manifest).map_err(|e| CliError::Format(e.to_string()))?;
        let mut out = format!("{MAGIC} {FORMAT_VERSION} {}\n", manifest.len()).into_bytes();
        out.extend_from_slice(&manifest);
        for p in self.params.iter() {
            for x in p.value.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let bad = |m: &str| CliError::Format(format!("not a checkpoint: {m}"));
        let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing header"))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("header is not text"))?;
        let fields: Vec<&str> = header.split(' ').collect();
        let [magic, version, len] = fields[..] else {
            return Err(bad("malformed header"));
        };
        if magic != MAGIC {
            return Err(bad("wrong magic"));
        }
        if version.parse::<u32>().ok() != Some(FORMAT_VERSION) {
            return Err(CliError::Format(format!("unsupported checkpoint version {version}")));
        }
        let len: usize = len.parse().map_err(|_| bad("bad manifest length"))?;
        let body = &bytes[nl + 1..];
        if body.len() < len {
            return Err(bad("truncated manifest"));
        }
        let manifest: Manifest =
            serde_json::from_slice(&body[..len]).map_err(|e| CliError::Format(format!("manifest: {e}")))?;
        let mut payload = body[len..].chunks_exact(4);
        let expected: usize = manifest.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
        if payload.len() != expected || !payload.remainder().is_empty() {
            return Err(CliError::Format(format!(
                "payload holds {} bytes, manifest needs {}",
                body.len() - len,
                expected * 4
            )));
        }
        let mut params = ParamStore::new();
        for entry in &manifest.params {
            let n = entry.shape.iter().product();
            let data: Vec<f32> = payload
                .by_ref()
                .take(n)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            params.insert(&entry.name, Tensor::new(&entry.shape, data)?)?;
        }
        Ok(Checkpoint { manifest, params })
    }

    /// Writes through a temporary file so a crash never leaves a partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| CliError::io(&tmp, e))?;
        f.sync_all().map_err(|e| CliError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    pub fn vocabs(&self) -> Result<(Vocab, Vocab)> {
        Ok((
            Vocab::from_tokens(self.manifest.src_vocab.iter().cloned())?,
            Vocab::from_tokens(self.manifest.tgt_vocab.iter().cloned())?,
        ))
    }

    /// Rebuilds the model from the manifest and loads the stored weights.
    pub fn model(&self) -> Result<(Model, ParamStore<f32>)> {
        let (model, mut store) = Model::build::<f32>(self.manifest.model, 0)?;
        if store.len() != self.params.len() {
            return Err(CliError::Format(format!(
                "checkpoint has {} parameters, its configuration defines {}",
                self.params.len(),
                store.len()
            )));
        }
        store.load_from(&self.params)?;
        Ok((model, store))
    }
}

/// Copies every parameter of `from` whose name exists in `into`. Returns the
/// number of copied tensors.
pub fn warm_start(into: &mut ParamStore<f32>, from: &ParamStore<f32>) -> Result<usize> {
    let mut copied = 0;
    for p in into.iter_mut() {
        let Ok(id) = from.id(&p.name) else { continue };
        let src = from.value(id);
        if src.shape() != p.value.shape() {
            return Err(CliError::Format(format!(
                "cannot initialize {} {:?} from {:?}",
                p.name,
                p.value.shape(),
                src.shape()
            )));
        }
        p.value = src.clone();
        copied += 1;
    }
    Ok(copied)
}
