//! Checkpoint directories: one `.tsr` file per parameter plus `manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::DetectionMetrics;
use crate::nn::{ParamStore, Partition};
use crate::numeric::tsr;
use crate::vlm::config::VlmConfig;
use crate::vlm::model::VlmModel;
use crate::vlm::pretrain::Checkpoint;

pub const MANIFEST: &str = "manifest.json";
const TAU_FILE: &str = "log_tau.tsr";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub file: String,
    pub partition: Partition,
    pub frozen: bool,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub id: String,
    pub config: VlmConfig,
    pub seed: u64,
    pub step: usize,
    pub val: DetectionMetrics,
    pub log_tau_sha256: String,
    pub params: Vec<ManifestEntry>,
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content id of a model: config, seed, temperature and every tensor.
pub fn model_id(model: &VlmModel) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(model.config()).expect("config serializes"));
    h.update(model.seed().to_le_bytes());
    h.update(model.log_tau_tensor().checksum());
    for p in model.params().iter() {
        h.update(p.name.as_bytes());
        h.update(p.tensor.checksum());
    }
    hex::encode(&h.finalize()[..8])
}

fn file_name(param: &str) -> String {
    format!("{param}.{}", tsr::EXTENSION)
}

pub fn save_checkpoint(ck: &Checkpoint, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |file: &str, name: &str, t: &crate::numeric::Tensor| -> Result<String> {
        let bytes = tsr::encode(name, t);
        let path = dir.join(file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        Ok(sha_hex(&bytes))
    };
    let mut params = Vec::new();
    for p in ck.model.params().iter() {
        let file = file_name(&p.name);
        let sha256 = write(&file, &p.name, &p.tensor)?;
        params.push(ManifestEntry {
            name: p.name.clone(),
            file,
            partition: p.partition,
            frozen: p.frozen(),
            sha256,
        });
    }
    let log_tau_sha256 = write(TAU_FILE, "log_tau", ck.model.log_tau_tensor())?;
    let manifest = Manifest {
        version: FORMAT_VERSION,
        id: model_id(&ck.model),
        config: ck.model.config().clone(),
        seed: ck.model.seed(),
        step: ck.step,
        val: ck.val,
        log_tau_sha256,
        params,
    };
    let path = dir.join(MANIFEST);
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn read_verified(dir: &Path, file: &str, sha256: &str) -> Result<crate::numeric::Tensor> {
    let path = dir.join(file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if sha_hex(&bytes) != sha256 {
        return Err(Error::Integrity(format!("{} does not match its manifest hash", path.display())));
    }
    Ok(tsr::decode(&bytes)?.1)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let manifest: Manifest = serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
        field: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    if manifest.version > FORMAT_VERSION {
        return Err(Error::SchemaVersion {
            found: manifest.version,
            supported: FORMAT_VERSION,
        });
    }
    let mut store = ParamStore::new();
    for e in &manifest.params {
        let t = read_verified(dir, &e.file, &e.sha256)?;
        store.add(&e.name, e.partition, t)?;
        store.set_frozen(&e.name, e.frozen)?;
    }
    let tau = read_verified(dir, TAU_FILE, &manifest.log_tau_sha256)?;
    let model = VlmModel::from_parts(manifest.config.clone(), manifest.seed, store, tau.data()[0])?;
    let fresh = VlmModel::new(manifest.config.clone(), manifest.seed)?;
    let expected: BTreeMap<&str, Vec<usize>> = fresh.params().iter().map(|p| (p.name.as_str(), p.tensor.shape().to_vec())).collect();
    let found: BTreeMap<&str, Vec<usize>> = model.params().iter().map(|p| (p.name.as_str(), p.tensor.shape().to_vec())).collect();
    if expected != found {
        return Err(Error::Integrity("parameter set does not match the recorded config".into()));
    }
    if model_id(&model) != manifest.id {
        return Err(Error::Integrity(format!("model id mismatch: manifest says {}", manifest.id)));
    }
    Ok(Checkpoint {
        model,
        step: manifest.step,
        val: manifest.val,
    })
}
