//! Learned-embedding artifacts: a `.tsr` tensor plus a JSON sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::DetectionMetrics;
use crate::losses::LossSelection;
use crate::numeric::{tsr, Tensor};
use crate::tuning::{Method, Tuned};
use crate::vlm::PromptKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingArtifact {
    pub method: Method,
    pub kind: PromptKind,
    pub base_checkpoint: String,
    pub classes: Vec<String>,
    pub tokens_per_class: usize,
    pub losses: LossSelection,
    pub seed: u64,
    pub val_metric: DetectionMetrics,
    pub tensor_sha256: String,
}

fn paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{stem}.{}", tsr::EXTENSION)), dir.join(format!("{stem}.json")))
}

/// Writes `<stem>.tsr` and `<stem>.json` for a run that learned a prompt tensor.
pub fn save_embeddings(dir: &Path, stem: &str, tuned: &Tuned, classes: &[String]) -> Result<EmbeddingArtifact> {
    let tensor = tuned
        .prompt
        .tensor
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument(format!("{} learned no embeddings", tuned.run.method)))?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (tp, jp) = paths(dir, stem);
    let bytes = tsr::encode(stem, tensor);
    fs::write(&tp, &bytes).map_err(|e| Error::io(&tp, e))?;
    let art = EmbeddingArtifact {
        method: tuned.run.method,
        kind: tuned.prompt.kind,
        base_checkpoint: tuned.run.base_checkpoint.clone(),
        classes: classes.to_vec(),
        tokens_per_class: tuned.prompt.tokens_per_class,
        losses: tuned.run.losses,
        seed: tuned.run.seed,
        val_metric: tuned.run.val,
        tensor_sha256: hex::encode(Sha256::digest(&bytes)),
    };
    let json = serde_json::to_vec_pretty(&art).expect("artifact serializes");
    fs::write(&jp, json).map_err(|e| Error::io(&jp, e))?;
    Ok(art)
}

pub fn load_embeddings(dir: &Path, stem: &str) -> Result<(EmbeddingArtifact, Tensor)> {
    let (tp, jp) = paths(dir, stem);
    let text = fs::read_to_string(&jp).map_err(|e| Error::io(&jp, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let art: EmbeddingArtifact = serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
        field: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    let bytes = fs::read(&tp).map_err(|e| Error::io(&tp, e))?;
    if hex::encode(Sha256::digest(&bytes)) != art.tensor_sha256 {
        return Err(Error::Integrity(format!("{} does not match its sidecar hash", tp.display())));
    }
    let (_, tensor) = tsr::decode(&bytes)?;
    if tensor.rows() != art.classes.len() * art.tokens_per_class {
        return Err(Error::Integrity("embedding rows do not match classes × tokens".into()));
    }
    Ok((art, tensor))
}
