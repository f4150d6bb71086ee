use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{DatasetConfig, Domain, SceneConfig};
use crate::error::{Error, Result};
use crate::losses::diffusion::DenoiserConfig;
use crate::losses::LossSelection;
use crate::tuning::{InitScheme, Method, TuningConfig};
use crate::vlm::{PretrainConfig, VlmConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 800,
            val: 100,
            test: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub in_domain: SplitSizes,
    pub out_domain: SplitSizes,
    pub scene: SceneConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        let o = DatasetConfig::out_domain(0);
        Self {
            in_domain: SplitSizes::default(),
            out_domain: SplitSizes {
                train: o.train,
                val: o.val,
                test: o.test,
            },
            scene: SceneConfig::default(),
        }
    }
}

impl DataSection {
    pub fn dataset(&self, domain: Domain, seed: u64) -> DatasetConfig {
        let s = match domain {
            Domain::InDomain => self.in_domain,
            Domain::OutDomain => self.out_domain,
        };
        DatasetConfig {
            seed,
            domain,
            train: s.train,
            val: s.val,
            test: s.test,
            scene: self.scene.clone(),
        }
    }
}

/// Tuning hyperparameters; method, losses and tokens per class live at the
/// top level of the experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuneSection {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub eval_every: usize,
    pub init: InitScheme,
    pub select_best: bool,
    pub stage2_steps: usize,
    pub stage2_learning_rate: f64,
}

impl Default for TuneSection {
    fn default() -> Self {
        let t = TuningConfig::default();
        let s2 = TuningConfig::stage2();
        Self {
            steps: t.steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            eval_every: t.eval_every,
            init: t.init,
            select_best: t.select_best,
            stage2_steps: 500,
            stage2_learning_rate: s2.learning_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub split: EvalSplit,
    pub domain: Domain,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            split: EvalSplit::Test,
            domain: Domain::OutDomain,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainScale {
    Small,
    Full,
}

impl PretrainScale {
    pub fn as_str(self) -> &'static str {
        match self {
            PretrainScale::Small => "small",
            PretrainScale::Full => "full",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub seeds: Vec<u64>,
    pub tokens: Vec<usize>,
    pub domains: Vec<Domain>,
    /// Loss combinations as `cls+bbox` strings; empty means all seven.
    pub losses: Vec<String>,
    pub fusion: Vec<bool>,
    pub scales: Vec<PretrainScale>,
    /// Share of the pretraining scenes used at the small scale.
    pub small_fraction: f64,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            tokens: vec![1, 2, 3, 4, 5],
            domains: vec![Domain::InDomain, Domain::OutDomain],
            losses: Vec::new(),
            fusion: vec![true, false],
            scales: vec![PretrainScale::Small, PretrainScale::Full],
            small_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateSection {
    pub denoiser: DenoiserConfig,
    pub colors: Vec<[f64; 3]>,
    pub images_per_concept: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub samples: usize,
    /// Inversion steps per concept against the trained denoiser; 0 skips it.
    pub invert_steps: usize,
    pub invert_tokens: usize,
    pub invert_learning_rate: f64,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self {
            denoiser: DenoiserConfig::default(),
            colors: vec![[0.9, 0.15, 0.15], [0.15, 0.3, 0.95]],
            images_per_concept: 64,
            steps: 1500,
            batch_size: 32,
            learning_rate: 2e-3,
            samples: 32,
            invert_steps: 300,
            invert_tokens: 3,
            invert_learning_rate: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Directory for tables and reports; empty means
    /// `<lab root>/tables/<config hash>`.
    pub output: String,
    pub method: Method,
    pub losses: LossSelection,
    pub tokens_per_class: usize,
    pub fusion: bool,
    pub data: DataSection,
    pub model: VlmConfig,
    pub pretrain: PretrainConfig,
    pub tune: TuneSection,
    pub eval: EvalSection,
    pub ablate: AblateSection,
    pub generate: GenerateSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output: String::new(),
            method: Method::ConesStage1,
            losses: LossSelection::DETECTION,
            tokens_per_class: 3,
            fusion: true,
            data: DataSection::default(),
            model: VlmConfig::default(),
            pretrain: PretrainConfig::default(),
            tune: TuneSection::default(),
            eval: EvalSection::default(),
            ablate: AblateSection::default(),
            generate: GenerateSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.losses.require_nonempty()?;
        if self.tune.batch_size == 0 || self.pretrain.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(self.ablate.small_fraction > 0.0 && self.ablate.small_fraction <= 1.0) {
            return Err(Error::Config("ablate.small_fraction must lie in (0, 1]".into()));
        }
        self.generate.denoiser.validate()?;
        for l in &self.ablate.losses {
            l.parse::<LossSelection>()?;
        }
        Ok(())
    }

    /// Tuning settings of the first stage (and of every non-ConES method).
    pub fn tuning(&self, seed: u64) -> TuningConfig {
        TuningConfig {
            steps: self.tune.steps,
            batch_size: self.tune.batch_size,
            learning_rate: self.tune.learning_rate,
            weight_decay: self.tune.weight_decay,
            tokens_per_class: self.tokens_per_class,
            losses: self.losses,
            eval_every: self.tune.eval_every,
            init: self.tune.init,
            select_best: self.tune.select_best,
            seed,
        }
    }

    pub fn stage2_tuning(&self, seed: u64) -> TuningConfig {
        TuningConfig {
            steps: self.tune.stage2_steps,
            learning_rate: self.tune.stage2_learning_rate,
            ..self.tuning(seed)
        }
    }

    pub fn vlm(&self, fusion: bool) -> VlmConfig {
        VlmConfig {
            fusion,
            ..self.model.clone()
        }
    }

    /// Hash of everything that shapes results; the output location is
    /// left out.
    pub fn hash(&self) -> String {
        content_hash(&Self {
            output: String::new(),
            ..self.clone()
        })
    }
}

/// First 16 hex digits of the SHA-256 of a value's canonical JSON.
pub fn content_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("value serializes");
    hex::encode(&Sha256::digest(json)[..8])
}

/// Converts a `serde_path_to_error` path (`a.b[0]`) to a JSON pointer.
fn json_pointer(path: &str) -> String {
    if path == "." || path.is_empty() {
        return "/".into();
    }
    let mut out = String::new();
    for part in path.split('.') {
        let mut rest = part;
        if let Some(i) = rest.find('[') {
            if i > 0 {
                out.push('/');
                out.push_str(&rest[..i]);
            }
            rest = &rest[i..];
            while let Some(end) = rest.find(']') {
                out.push('/');
                out.push_str(&rest[1..end]);
                rest = &rest[end + 1..];
            }
        } else {
            out.push('/');
            out.push_str(rest);
        }
    }
    out
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    if text.trim().is_empty() {
        return Ok(ExperimentConfig::default());
    }
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
        field: json_pointer(&e.path().to_string()),
        message: e.inner().to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(parse_config("").unwrap(), ExperimentConfig::default());
        assert_eq!(parse_config("{}").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn dump_round_trips() {
        let c = ExperimentConfig::default();
        let text = serde_json::to_string_pretty(&c).unwrap();
        assert_eq!(parse_config(&text).unwrap(), c);
    }

    #[test]
    fn errors_name_the_json_pointer() {
        match parse_config(r#"{"tune": {"steps": "many"}}"#) {
            Err(Error::Schema { field, .. }) => assert_eq!(field, "/tune/steps"),
            other => panic!("{other:?}"),
        }
        match parse_config(r#"{"ablate": {"seeds": [0, "x"]}}"#) {
            Err(Error::Schema { field, .. }) => assert_eq!(field, "/ablate/seeds/1"),
            other => panic!("{other:?}"),
        }
        match parse_config(r#"{"modle": {}}"#) {
            Err(Error::Schema { message, .. }) => assert!(message.contains("modle")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { seed: 1, ..a.clone() };
        assert_eq!(a.hash(), a.clone().hash());
        assert_ne!(a.hash(), b.hash());
    }
}
