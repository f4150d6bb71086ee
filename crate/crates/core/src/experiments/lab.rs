//! Artifact root: content-addressed datasets, checkpoints and runs, shared
//! in-memory caches, and the append-only run ledger.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::data::{load_dataset, make_splits, save_dataset, DatasetSplits, Domain};
use crate::error::{Error, Result};
use crate::eval::DetectionMetrics;
use crate::experiments::config::{content_hash, EvalSplit, ExperimentConfig, PretrainScale};
use crate::losses::LossSelection;
use crate::numeric::Rng;
use crate::tuning::{
    finetune_with_embeddings, full_finetune, init_concept_embeddings, linear_probe, load_embeddings, prompt_tuning,
    save_embeddings, search_concept_embeddings, textual_inversion, zero_shot, Method, Tuned, TuningRun,
};
use crate::vlm::{load_checkpoint, pretrain_vlm, save_checkpoint, Checkpoint, ParamCounts, Prompt, PromptKind};

pub const HOME_VAR: &str = "CONES_LAB_HOME";
pub const DEFAULT_HOME: &str = "cones-lab";
pub const LEDGER: &str = "ledger.jsonl";

/// One adaptation run, fully determined by the experiment config plus these
/// fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub method: Method,
    pub seed: u64,
    pub domain: Domain,
    pub fusion: bool,
    pub scale: PretrainScale,
    pub tokens_per_class: usize,
    pub losses: LossSelection,
}

impl RunSpec {
    pub fn from_config(cfg: &ExperimentConfig, method: Method) -> Self {
        Self {
            method,
            seed: cfg.seed,
            domain: cfg.eval.domain,
            fusion: cfg.fusion,
            scale: PretrainScale::Full,
            tokens_per_class: cfg.tokens_per_class,
            losses: cfg.losses,
        }
    }

    pub fn with_method(&self, method: Method) -> Self {
        Self {
            method,
            ..self.clone()
        }
    }
}

/// What a run directory's `run.json` holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub key: String,
    pub config_hash: String,
    pub checkpoint: String,
    pub spec: RunSpec,
    pub eval_split: EvalSplit,
    pub test: DetectionMetrics,
    pub params: ParamCounts,
    pub run: TuningRun,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub record: RunRecord,
    pub tuned: Tuned,
    /// Directory of the run when the lab persists artifacts.
    pub dir: Option<PathBuf>,
}

/// Row of the methods × datasets summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: Method,
    pub domain: Domain,
    pub seed: u64,
    pub ap: f64,
    pub ap50: f64,
    pub ap_mask: f64,
    pub unfrozen: usize,
    pub total: usize,
    pub seconds_per_step: f64,
}

impl ReportRow {
    pub fn from_result(r: &RunResult) -> Self {
        let rec = &r.record;
        Self {
            method: rec.spec.method,
            domain: rec.spec.domain,
            seed: rec.spec.seed,
            ap: rec.test.ap_box,
            ap50: rec.test.ap50_box,
            ap_mask: rec.test.ap_mask,
            unfrozen: rec.run.unfrozen_scalars,
            total: rec.params.total,
            seconds_per_step: r.tuned.run.seconds_per_step,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub command: String,
    pub config_hash: String,
    pub artifacts: Vec<String>,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    /// Config values replaced by command-line flags.
    #[serde(default)]
    pub overrides: Vec<String>,
    #[serde(default)]
    pub rows: Vec<ReportRow>,
}

impl LedgerEntry {
    pub fn new(command: &str, cfg: &ExperimentConfig) -> Self {
        Self {
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            command: command.to_string(),
            config_hash: cfg.hash(),
            artifacts: Vec::new(),
            metrics: BTreeMap::new(),
            overrides: Vec::new(),
            rows: Vec::new(),
        }
    }
}

type Slot<T> = Arc<Mutex<Option<Arc<T>>>>;

/// Per-key memo whose slots block concurrent builders of the same key.
struct Memo<T>(Mutex<HashMap<String, Slot<T>>>);

impl<T> Memo<T> {
    fn new() -> Self {
        Self(Mutex::new(HashMap::new()))
    }

    fn get_or_try(&self, key: &str, build: impl FnOnce() -> Result<T>) -> Result<Arc<T>> {
        let slot = self.0.lock().expect("memo lock").entry(key.to_string()).or_default().clone();
        let mut guard = slot.lock().expect("slot lock");
        if let Some(v) = guard.as_ref() {
            return Ok(v.clone());
        }
        let v = Arc::new(build()?);
        *guard = Some(v.clone());
        Ok(v)
    }
}

pub struct Lab {
    root: PathBuf,
    persist: bool,
    datasets: Memo<DatasetSplits>,
    checkpoints: Memo<Checkpoint>,
    runs: Memo<RunResult>,
}

impl Lab {
    /// Lab rooted at `root`, reading and writing artifacts there.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self::build(root, true))
    }

    /// Root from `CONES_LAB_HOME`, else `fallback`.
    pub fn from_env(fallback: impl Into<PathBuf>) -> Result<Self> {
        match std::env::var_os(HOME_VAR) {
            Some(v) if !v.is_empty() => Self::open(PathBuf::from(v)),
            _ => Self::open(fallback),
        }
    }

    /// Lab that never touches the file system.
    pub fn in_memory() -> Self {
        Self::build(PathBuf::new(), false)
    }

    fn build(root: PathBuf, persist: bool) -> Self {
        Self {
            root,
            persist,
            datasets: Memo::new(),
            checkpoints: Memo::new(),
            runs: Memo::new(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn persists(&self) -> bool {
        self.persist
    }

    pub fn dataset_key(cfg: &ExperimentConfig, domain: Domain, seed: u64) -> String {
        format!("{}-{}", domain.as_str(), content_hash(&cfg.data.dataset(domain, seed)))
    }

    pub fn dataset_dir(&self, key: &str) -> PathBuf {
        self.root.join("data").join(key)
    }

    /// Splits for `domain`, loaded from the store when present.
    pub fn splits(&self, cfg: &ExperimentConfig, domain: Domain, seed: u64) -> Result<Arc<DatasetSplits>> {
        let key = Self::dataset_key(cfg, domain, seed);
        self.datasets.get_or_try(&key, || {
            let dir = self.dataset_dir(&key);
            if self.persist && dir.join("dataset.json").exists() {
                return load_dataset(&dir);
            }
            let dc = cfg.data.dataset(domain, seed);
            dc.scene.validate()?;
            make_splits(&dc)
        })
    }

    /// Writes the splits into the store (once) and returns their directory.
    pub fn save_splits(&self, cfg: &ExperimentConfig, domain: Domain, seed: u64) -> Result<PathBuf> {
        let splits = self.splits(cfg, domain, seed)?;
        let key = Self::dataset_key(cfg, domain, seed);
        let dir = self.dataset_dir(&key);
        if self.persist && !dir.join("dataset.json").exists() {
            publish(&dir, |tmp| {
                save_dataset(&splits, tmp)?;
                write_json(&tmp.join("config.json"), cfg)
            })?;
        }
        Ok(dir)
    }

    pub fn checkpoint_key(cfg: &ExperimentConfig, seed: u64, fusion: bool, scale: PretrainScale) -> String {
        let fraction = match scale {
            PretrainScale::Small => Some(cfg.ablate.small_fraction),
            PretrainScale::Full => None,
        };
        let pre = crate::vlm::PretrainConfig {
            seed,
            ..cfg.pretrain.clone()
        };
        let h = content_hash(&(cfg.vlm(fusion), pre, cfg.data.dataset(Domain::InDomain, seed), fraction));
        format!("{}-{h}", scale.as_str())
    }

    pub fn checkpoint_dir(&self, key: &str) -> PathBuf {
        self.root.join("checkpoints").join(key)
    }

    /// Pretrained checkpoint on the in-domain splits; `Small` keeps only a
    /// fraction of the training scenes.
    pub fn pretrained(&self, cfg: &ExperimentConfig, seed: u64, fusion: bool, scale: PretrainScale) -> Result<Arc<Checkpoint>> {
        let key = Self::checkpoint_key(cfg, seed, fusion, scale);
        self.checkpoints.get_or_try(&key, || {
            let dir = self.checkpoint_dir(&key);
            if self.persist && dir.join(crate::vlm::checkpoint::MANIFEST).exists() {
                return load_checkpoint(&dir);
            }
            let full = self.splits(cfg, Domain::InDomain, seed)?;
            let splits = match scale {
                PretrainScale::Small => Arc::new(full.subsample_train(cfg.ablate.small_fraction)),
                PretrainScale::Full => full,
            };
            let pre = crate::vlm::PretrainConfig {
                seed,
                ..cfg.pretrain.clone()
            };
            let (ck, _) = pretrain_vlm(&cfg.vlm(fusion), &splits, &pre)?;
            if self.persist {
                publish(&dir, |tmp| {
                    save_checkpoint(&ck, tmp)?;
                    write_json(&tmp.join("config.json"), cfg)
                })?;
            }
            Ok(ck)
        })
    }

    pub fn run_key(cfg: &ExperimentConfig, spec: &RunSpec) -> String {
        let ck = Self::checkpoint_key(cfg, spec.seed, spec.fusion, spec.scale);
        let tuning = match spec.method {
            Method::ZeroShot => None,
            _ => Some(Self::tuning_for(cfg, spec)),
        };
        let stage2 = (spec.method == Method::ConesStage2).then(|| cfg.stage2_tuning(spec.seed));
        let h = content_hash(&(
            ck,
            spec,
            tuning,
            stage2,
            cfg.data.dataset(spec.domain, spec.seed),
            cfg.eval.split,
        ));
        format!("{}-{h}", spec.method.as_str())
    }

    fn tuning_for(cfg: &ExperimentConfig, spec: &RunSpec) -> crate::tuning::TuningConfig {
        crate::tuning::TuningConfig {
            tokens_per_class: spec.tokens_per_class,
            losses: spec.losses,
            ..cfg.tuning(spec.seed)
        }
    }

    pub fn run_dir(&self, key: &str) -> PathBuf {
        self.root.join("runs").join(key)
    }

    /// Adapts the pretrained checkpoint with `spec.method` and evaluates on
    /// the configured split. Stage 2 reuses the matching stage-1 run.
    pub fn run(&self, cfg: &ExperimentConfig, spec: &RunSpec) -> Result<Arc<RunResult>> {
        let key = Self::run_key(cfg, spec);
        self.runs.get_or_try(&key, || {
            let dir = self.run_dir(&key);
            if self.persist && dir.join("run.json").exists() {
                return self.load_run(cfg, spec, &dir);
            }
            let ck = self.pretrained(cfg, spec.seed, spec.fusion, spec.scale)?;
            let splits = self.splits(cfg, spec.domain, spec.seed)?;
            let model = &ck.model;
            let tc = Self::tuning_for(cfg, spec);
            let tuned = match spec.method {
                Method::ZeroShot => zero_shot(model, &splits)?,
                Method::ConesStage1 => {
                    let mut rng = Rng::new(spec.seed);
                    let init = init_concept_embeddings(model, &splits.vocabulary, spec.tokens_per_class, tc.init, &mut rng)?;
                    search_concept_embeddings(model, init, &splits, &tc)?
                }
                Method::ConesStage2 => {
                    let s1 = self.run(cfg, &spec.with_method(Method::ConesStage1))?;
                    let tc2 = crate::tuning::TuningConfig {
                        tokens_per_class: spec.tokens_per_class,
                        losses: spec.losses,
                        ..cfg.stage2_tuning(spec.seed)
                    };
                    finetune_with_embeddings(&s1.tuned.model, &s1.tuned.prompt, &splits, &tc2)?
                }
                Method::PromptTuning => prompt_tuning(model, &splits, &tc)?,
                Method::TextualInversion => textual_inversion(model, &splits, &tc)?,
                Method::LinearProbe => linear_probe(model, &splits, &tc)?,
                Method::FullFinetune => full_finetune(model, &splits, &tc)?,
            };
            let test = tuned.evaluate(eval_scenes(&splits, cfg.eval.split))?;
            let record = RunRecord {
                key: key.clone(),
                config_hash: cfg.hash(),
                checkpoint: Self::checkpoint_key(cfg, spec.seed, spec.fusion, spec.scale),
                spec: spec.clone(),
                eval_split: cfg.eval.split,
                test,
                params: model.count_parameters(true),
                run: tuned.run.clone(),
                config: cfg.clone(),
            };
            let out = if self.persist {
                publish(&dir, |tmp| save_run(tmp, &record, &tuned, &splits.vocabulary.names()))?;
                Some(dir)
            } else {
                None
            };
            Ok(RunResult { record, tuned, dir: out })
        })
    }

    fn load_run(&self, cfg: &ExperimentConfig, spec: &RunSpec, dir: &Path) -> Result<RunResult> {
        let record: RunRecord = read_json(&dir.join("run.json"))?;
        let splits = self.splits(cfg, spec.domain, spec.seed)?;
        let vocab = &splits.vocabulary;
        let model = if dir.join("model").join(crate::vlm::checkpoint::MANIFEST).exists() {
            load_checkpoint(&dir.join("model"))?.model
        } else {
            self.pretrained(cfg, spec.seed, spec.fusion, spec.scale)?.model.clone()
        };
        let prompt = if dir.join("embeddings.json").exists() {
            let (art, tensor) = load_embeddings(dir, "embeddings")?;
            let m = art.tokens_per_class;
            match art.kind {
                PromptKind::Concepts => Prompt::concepts(vocab, m, tensor)?,
                PromptKind::PromptTuning => Prompt::prompt_tuning(vocab, m, Some(tensor))?,
                PromptKind::TextualInversion => Prompt::textual_inversion(vocab, m, tensor)?,
                PromptKind::ClassNames => Prompt::class_names(vocab),
            }
        } else {
            Prompt::class_names(vocab)
        };
        let tuned = Tuned {
            run: record.run.clone(),
            model,
            prompt,
        };
        Ok(RunResult {
            record,
            tuned,
            dir: Some(dir.to_path_buf()),
        })
    }

    pub fn ledger_path(&self) -> PathBuf {
        self.root.join(LEDGER)
    }

    /// Appends one line; in-memory labs drop the entry.
    pub fn append_ledger(&self, entry: &LedgerEntry) -> Result<()> {
        if !self.persist {
            return Ok(());
        }
        let path = self.ledger_path();
        let mut line = serde_json::to_string(entry).expect("ledger entry serializes");
        line.push('\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        f.write_all(line.as_bytes()).map_err(|e| Error::io(&path, e))
    }

    pub fn read_ledger(&self) -> Result<Vec<LedgerEntry>> {
        read_ledger(&self.ledger_path())
    }

    /// Path relative to the root, for ledger entries.
    pub fn relative(&self, p: &Path) -> String {
        p.strip_prefix(&self.root).unwrap_or(p).display().to_string()
    }
}

pub fn eval_scenes(splits: &DatasetSplits, split: EvalSplit) -> &[crate::data::Scene] {
    match split {
        EvalSplit::Val => &splits.val,
        EvalSplit::Test => &splits.test,
    }
}

/// Ledger lines in file order; a missing file is an empty ledger.
pub fn read_ledger(path: &Path) -> Result<Vec<LedgerEntry>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Schema {
                field: format!("{LEDGER}:{}", i + 1),
                message: e.to_string(),
            })
        })
        .collect()
}

fn save_run(dir: &Path, record: &RunRecord, tuned: &Tuned, classes: &[String]) -> Result<()> {
    write_json(&dir.join("run.json"), record)?;
    if tuned.prompt.tensor.is_some() {
        save_embeddings(dir, "embeddings", tuned, classes)?;
    }
    if matches!(
        record.spec.method,
        Method::ConesStage2 | Method::LinearProbe | Method::FullFinetune
    ) {
        let ck = Checkpoint {
            model: tuned.model.clone(),
            step: tuned.run.best_step,
            val: tuned.run.val,
        };
        save_checkpoint(&ck, &dir.join("model"))?;
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("value serializes");
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
        field: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

/// Fills a scratch directory and renames it into place, so readers never
/// see a half-written artifact. An existing target is left untouched.
pub fn publish(dir: &Path, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    if dir.exists() {
        return Ok(());
    }
    let parent = dir.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let name = dir.file_name().map_or("artifact".into(), |n| n.to_string_lossy().into_owned());
    let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    if let Err(e) = fill(&tmp) {
        let _ = fs::remove_dir_all(&tmp);
        return Err(e);
    }
    if let Err(e) = fs::rename(&tmp, dir) {
        let _ = fs::remove_dir_all(&tmp);
        if !dir.exists() {
            return Err(Error::io(dir, e));
        }
    }
    Ok(())
}
