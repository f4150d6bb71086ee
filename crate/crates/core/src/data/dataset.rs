use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::scene::{caption_tokens, generate_scene, BBox, Scene, SceneConfig};
use crate::data::vocab::{ClassSpec, Domain, Vocabulary};
use crate::error::{Error, Result};
use crate::numeric::{rng::mix64, tsr, Tensor};

pub const ANNOTATION_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub domain: Domain,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub scene: SceneConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self::in_domain(0)
    }
}

impl DatasetConfig {
    /// 800/100/100 pretraining scenes.
    pub fn in_domain(seed: u64) -> Self {
        Self {
            seed,
            domain: Domain::InDomain,
            train: 800,
            val: 100,
            test: 100,
            scene: SceneConfig::default(),
        }
    }

    /// 200/50/50 transfer scenes.
    pub fn out_domain(seed: u64) -> Self {
        Self {
            seed,
            domain: Domain::OutDomain,
            train: 200,
            val: 50,
            test: 50,
            scene: SceneConfig::default(),
        }
    }
}

/// Train/val sizes for a `train_parts : val_parts` split of `total`.
pub fn ratio_split(total: usize, train_parts: usize, val_parts: usize) -> (usize, usize) {
    let train = total * train_parts / (train_parts + val_parts);
    (train, total - train)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplits {
    pub seed: u64,
    pub config: DatasetConfig,
    pub vocabulary: Vocabulary,
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
    pub test: Vec<Scene>,
}

impl DatasetSplits {
    pub fn split(&self, name: &str) -> Result<&[Scene]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }

    /// Keeps the first `fraction` of the training scenes.
    pub fn subsample_train(&self, fraction: f64) -> Self {
        let n = ((self.train.len() as f64 * fraction).round() as usize).clamp(1, self.train.len());
        let mut out = self.clone();
        out.train.truncate(n);
        out
    }
}

fn domain_salt(d: Domain) -> u64 {
    match d {
        Domain::InDomain => 0x1d,
        Domain::OutDomain => 0x0d,
    }
}

/// Generates train/val/test scenes. Scene `i` (counted across the three
/// splits) is rendered from its own derived seed, so splits never share a
/// scene seed.
pub fn make_splits(config: &DatasetConfig) -> Result<DatasetSplits> {
    if config.train == 0 || config.val == 0 || config.test == 0 {
        return Err(Error::Config("split sizes must be positive".into()));
    }
    let vocabulary = Vocabulary::for_domain(config.domain);
    let base = mix64(config.seed) ^ domain_salt(config.domain);
    let mut index = 0u64;
    let mut gen = |n: usize| -> Result<Vec<Scene>> {
        (0..n)
            .map(|_| {
                let seed = mix64(base.wrapping_add(index));
                index += 1;
                generate_scene(&config.scene, &vocabulary, None, seed)
            })
            .collect()
    };
    let train = gen(config.train)?;
    let val = gen(config.val)?;
    let test = gen(config.test)?;
    Ok(DatasetSplits {
        seed: config.seed,
        config: config.clone(),
        vocabulary,
        train,
        val,
        test,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassEntry {
    name: String,
    domain: Domain,
    shape: crate::data::vocab::ShapeKind,
    color: [f64; 3],
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneEntry {
    image_file: String,
    boxes: Vec<[f64; 4]>,
    labels: Vec<usize>,
    mask_files: Vec<String>,
    seed: u64,
    caption_token_ids: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Annotation {
    version: u32,
    vocabulary: Vec<ClassEntry>,
    scenes: Vec<SceneEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetManifest {
    version: u32,
    seed: u64,
    config: DatasetConfig,
}

const SPLITS: [&str; 3] = ["train", "val", "test"];

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(v).expect("serializable");
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Parses JSON, reporting schema violations by field path.
pub(crate) fn parse_json<T: for<'de> Deserialize<'de>>(bytes: &[u8]) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
        field: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

fn check_version(bytes: &[u8]) -> Result<()> {
    #[derive(Deserialize)]
    struct Versioned {
        version: Option<u32>,
    }
    if let Ok(Versioned { version: Some(v) }) = serde_json::from_slice::<Versioned>(bytes) {
        if v > ANNOTATION_VERSION {
            return Err(Error::SchemaVersion {
                found: v,
                supported: ANNOTATION_VERSION,
            });
        }
    }
    Ok(())
}

fn mask_tensor(mask: &[bool], h: usize, w: usize) -> Tensor {
    Tensor::new(vec![h, w], mask.iter().map(|&b| b as u8 as f64).collect()).expect("mask shape")
}

/// Writes `dataset.json`, one annotation file per split, and `.tsr` files for
/// images and masks.
pub fn save_dataset(splits: &DatasetSplits, dir: &Path) -> Result<()> {
    for sub in ["images", "masks"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    write_json(
        &dir.join("dataset.json"),
        &DatasetManifest {
            version: ANNOTATION_VERSION,
            seed: splits.seed,
            config: splits.config.clone(),
        },
    )?;
    let vocabulary: Vec<ClassEntry> = splits
        .vocabulary
        .classes()
        .iter()
        .map(|c| ClassEntry {
            name: c.name.clone(),
            domain: c.domain,
            shape: c.shape,
            color: c.color,
        })
        .collect();
    for name in SPLITS {
        let mut scenes = Vec::new();
        for (i, s) in splits.split(name)?.iter().enumerate() {
            let image_file = format!("images/{name}_{i:05}.tsr");
            let img = Tensor::new(vec![s.height, s.width, 3], s.image.clone())?;
            tsr::write(&dir.join(&image_file), &image_file, &img)?;
            let mut mask_files = Vec::new();
            for (k, m) in s.masks.iter().enumerate() {
                let f = format!("masks/{name}_{i:05}_{k}.tsr");
                tsr::write(&dir.join(&f), &f, &mask_tensor(m, s.height, s.width))?;
                mask_files.push(f);
            }
            scenes.push(SceneEntry {
                image_file,
                boxes: s.boxes.iter().map(|b| b.to_array()).collect(),
                labels: s.labels.clone(),
                mask_files,
                seed: s.seed,
                caption_token_ids: s.caption_token_ids.clone(),
            });
        }
        let ann = Annotation {
            version: ANNOTATION_VERSION,
            vocabulary: vocabulary
                .iter()
                .map(|c| ClassEntry {
                    name: c.name.clone(),
                    domain: c.domain,
                    shape: c.shape,
                    color: c.color,
                })
                .collect(),
            scenes,
        };
        write_json(&dir.join(format!("{name}.json")), &ann)?;
    }
    Ok(())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(dir: &Path) -> Result<DatasetSplits> {
    let mbytes = read_bytes(&dir.join("dataset.json"))?;
    check_version(&mbytes)?;
    let manifest: DatasetManifest = parse_json(&mbytes)?;
    let mut vocabulary = None;
    let mut loaded = Vec::new();
    for name in SPLITS {
        let bytes = read_bytes(&dir.join(format!("{name}.json")))?;
        check_version(&bytes)?;
        let ann: Annotation = parse_json(&bytes)?;
        let vocab = Vocabulary::new(
            ann.vocabulary
                .into_iter()
                .map(|c| ClassSpec {
                    name: c.name,
                    domain: c.domain,
                    shape: c.shape,
                    color: c.color,
                })
                .collect(),
        )?;
        let mut scenes = Vec::new();
        for (i, e) in ann.scenes.into_iter().enumerate() {
            let field = |f: &str| format!("scenes[{i}].{f}");
            if e.boxes.len() != e.labels.len() || e.boxes.len() != e.mask_files.len() {
                return Err(Error::Schema {
                    field: field("labels"),
                    message: "boxes, labels and mask_files differ in length".into(),
                });
            }
            if let Some(&l) = e.labels.iter().find(|&&l| l >= vocab.len()) {
                return Err(Error::Schema {
                    field: field("labels"),
                    message: format!("label {l} outside vocabulary"),
                });
            }
            let (_, img) = tsr::read(&dir.join(&e.image_file))?;
            let shape = img.shape().to_vec();
            if shape.len() != 3 || shape[2] != 3 {
                return Err(Error::Schema {
                    field: field("image_file"),
                    message: format!("expected H x W x 3 image, got {shape:?}"),
                });
            }
            let (h, w) = (shape[0], shape[1]);
            let masks = e
                .mask_files
                .iter()
                .map(|f| {
                    let (_, m) = tsr::read(&dir.join(f))?;
                    if m.shape() != [h, w] {
                        return Err(Error::Schema {
                            field: field("mask_files"),
                            message: format!("mask shape {:?} does not match image", m.shape()),
                        });
                    }
                    Ok(m.data().iter().map(|v| *v != 0.0).collect())
                })
                .collect::<Result<Vec<_>>>()?;
            if e.caption_token_ids != caption_tokens(&vocab, &e.labels) {
                return Err(Error::Schema {
                    field: field("caption_token_ids"),
                    message: "caption does not name exactly the present classes".into(),
                });
            }
            scenes.push(Scene {
                seed: e.seed,
                height: h,
                width: w,
                image: img.into_data(),
                boxes: e.boxes.into_iter().map(BBox::from_array).collect(),
                labels: e.labels,
                masks,
                caption_token_ids: e.caption_token_ids,
            });
        }
        vocabulary = Some(vocab);
        loaded.push(scenes);
    }
    let test = loaded.pop().expect("three splits");
    let val = loaded.pop().expect("three splits");
    let train = loaded.pop().expect("three splits");
    Ok(DatasetSplits {
        seed: manifest.seed,
        config: manifest.config,
        vocabulary: vocabulary.expect("three splits"),
        train,
        val,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> DatasetConfig {
        DatasetConfig {
            train: 6,
            val: 2,
            test: 2,
            ..DatasetConfig::in_domain(seed)
        }
    }

    #[test]
    fn eight_two_ratio() {
        assert_eq!(ratio_split(100, 8, 2), (80, 20));
    }

    #[test]
    fn deterministic_and_disjoint() {
        let a = make_splits(&small(3)).unwrap();
        let b = make_splits(&small(3)).unwrap();
        assert_eq!(a, b);
        let mut seeds: Vec<u64> = a.train.iter().chain(&a.val).chain(&a.test).map(|s| s.seed).collect();
        seeds.sort();
        seeds.dedup();
        assert_eq!(seeds.len(), 10);
    }

    #[test]
    fn unit_sizes() {
        let cfg = DatasetConfig {
            train: 1,
            val: 1,
            test: 1,
            ..DatasetConfig::out_domain(0)
        };
        let s = make_splits(&cfg).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (1, 1, 1));
        assert_ne!(s.train[0].seed, s.val[0].seed);
        assert_ne!(s.val[0].seed, s.test[0].seed);
    }

    #[test]
    fn default_sizes() {
        let i = DatasetConfig::in_domain(0);
        let o = DatasetConfig::out_domain(0);
        assert_eq!((i.train, i.val, i.test), (800, 100, 100));
        assert_eq!((o.train, o.val, o.test), (200, 50, 50));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = make_splits(&small(1)).unwrap();
        save_dataset(&s, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), s);
    }

    #[test]
    fn corrupted_annotation_names_field() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&make_splits(&small(1)).unwrap(), dir.path()).unwrap();
        let p = dir.path().join("val.json");
        let text = fs::read_to_string(&p).unwrap().replacen("\"labels\": [", "\"labels\": [\"x\", ", 1);
        fs::write(&p, text).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Schema { field, .. }) => assert!(field.contains("labels"), "{field}"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn newer_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&make_splits(&small(1)).unwrap(), dir.path()).unwrap();
        let p = dir.path().join("train.json");
        let text = fs::read_to_string(&p).unwrap().replacen("\"version\": 1", "\"version\": 7", 1);
        fs::write(&p, text).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(Error::SchemaVersion { found: 7, .. })
        ));
    }
}
