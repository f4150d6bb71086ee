//! Concept embedding search (stage 1) and fine-tuning around fixed concept
//! embeddings (stage 2).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplits, Vocabulary};
use crate::error::{Error, Result};
use crate::nn::{Binder, Partition};
use crate::numeric::{Graph, Rng, Tensor};
use crate::tuning::{record, require_frozen, require_splits, Method, Tuned, TuningConfig};
use crate::vlm::{train_detection, Prompt, PromptKind, VlmModel};

pub const GAUSSIAN_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    #[default]
    Gaussian,
    /// Rows copied from the encoded class name, cycling over its tokens.
    CopyText,
}

impl InitScheme {
    pub fn as_str(self) -> &'static str {
        match self {
            InitScheme::Gaussian => "gaussian",
            InitScheme::CopyText => "copy_text",
        }
    }
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(InitScheme::Gaussian),
            "copy_text" => Ok(InitScheme::CopyText),
            _ => Err(Error::Config(format!("unknown init scheme `{s}`"))),
        }
    }
}

/// One M × d block per class, stacked class-major into a (K·M) × d tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptEmbeddings {
    pub tensor: Tensor,
    pub classes: Vec<String>,
    pub tokens_per_class: usize,
    pub scheme: InitScheme,
}

impl ConceptEmbeddings {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Rows of class `k`.
    pub fn block(&self, k: usize) -> &[f64] {
        let w = self.tokens_per_class * self.tensor.cols();
        &self.tensor.data()[k * w..(k + 1) * w]
    }

    pub fn to_prompt(&self, vocab: &Vocabulary) -> Result<Prompt> {
        if vocab.names() != self.classes {
            return Err(Error::InvalidArgument("concept classes do not match the vocabulary".into()));
        }
        Prompt::concepts(vocab, self.tokens_per_class, self.tensor.clone())
    }

    pub fn from_prompt(prompt: &Prompt, vocab: &Vocabulary, scheme: InitScheme) -> Result<Self> {
        match (&prompt.kind, &prompt.tensor) {
            (PromptKind::Concepts, Some(t)) => Ok(Self {
                tensor: t.clone(),
                classes: vocab.names(),
                tokens_per_class: prompt.tokens_per_class,
                scheme,
            }),
            _ => Err(Error::InvalidArgument("prompt does not hold concept embeddings".into())),
        }
    }
}

pub fn init_concept_embeddings(
    model: &VlmModel,
    vocab: &Vocabulary,
    tokens_per_class: usize,
    scheme: InitScheme,
    rng: &mut Rng,
) -> Result<ConceptEmbeddings> {
    let (k, m, d) = (vocab.len(), tokens_per_class, model.config().embed_dim);
    if k == 0 || m == 0 {
        return Err(Error::InvalidArgument(format!("need K, M >= 1 (K={k}, M={m})")));
    }
    let data = match scheme {
        InitScheme::Gaussian => rng.normal_vec(k * m * d, 0.0, GAUSSIAN_STD),
        InitScheme::CopyText => {
            let frozen = model.frozen_params();
            let mut out = Vec::with_capacity(k * m * d);
            for c in 0..k {
                let mut g = Graph::new();
                let mut b = Binder::new(&frozen);
                let p = model.encode_text(&mut g, &mut b, &vocab.class_tokens(c))?;
                let rows = g.value(p);
                let t = rows.len() / d;
                for j in 0..m {
                    out.extend_from_slice(&rows[(j % t) * d..(j % t + 1) * d]);
                }
            }
            out
        }
    };
    Ok(ConceptEmbeddings {
        tensor: Tensor::new(vec![k * m, d], data)?,
        classes: vocab.names(),
        tokens_per_class: m,
        scheme,
    })
}

/// Stage 1: optimizes only the concept embeddings, which replace the text
/// encoder output at the fusion input. Every model parameter stays frozen.
pub fn search_concept_embeddings(
    model: &VlmModel,
    init: ConceptEmbeddings,
    splits: &DatasetSplits,
    cfg: &TuningConfig,
) -> Result<Tuned> {
    require_frozen(model)?;
    require_splits(splits)?;
    cfg.losses.require_nonempty()?;
    let mut prompt = init.to_prompt(&splits.vocabulary)?;
    let mut tuned = model.clone();
    tuned.reset_text_calls();
    tuned.params_mut().clear_grads();
    let outcome = train_detection(
        &mut tuned,
        &mut prompt,
        &splits.train,
        &splits.val,
        &cfg.train_config(),
        true,
        false,
    )?;
    if let Some(name) = tuned.params().with_grad().first() {
        return Err(Error::FreezeViolation(format!("model parameter `{name}` received a gradient")));
    }
    let run = record(Method::ConesStage1, model, cfg, outcome);
    Ok(Tuned {
        run,
        model: tuned,
        prompt,
    })
}

/// Stage 2: fine-tunes image encoder, fusion and heads around fixed concept
/// embeddings. The text encoder is never evaluated.
pub fn finetune_with_embeddings(
    model: &VlmModel,
    concepts: &Prompt,
    splits: &DatasetSplits,
    cfg: &TuningConfig,
) -> Result<Tuned> {
    if concepts.kind != PromptKind::Concepts || concepts.tensor.is_none() {
        return Err(Error::InvalidArgument("stage 2 needs concept embeddings".into()));
    }
    require_splits(splits)?;
    let mut tuned = model.clone();
    tuned.reset_text_calls();
    tuned.params_mut().set_trainable_where(|p| p.partition != Partition::Text);
    let mut prompt = concepts.clone();
    let outcome = train_detection(
        &mut tuned,
        &mut prompt,
        &splits.train,
        &splits.val,
        &cfg.train_config(),
        false,
        false,
    )?;
    let p = tuned.params();
    let expected = p.total() - p.count(Partition::Text);
    if outcome.optimizer_scalars != expected {
        return Err(Error::FreezeViolation(format!(
            "optimizer holds {} scalars, expected {expected} without the text encoder",
            outcome.optimizer_scalars
        )));
    }
    tuned.params_mut().freeze_all();
    let run = record(Method::ConesStage2, model, cfg, outcome);
    Ok(Tuned {
        run,
        model: tuned,
        prompt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vlm::VlmConfig;

    fn tiny() -> VlmModel {
        let cfg = VlmConfig {
            embed_dim: 8,
            depth: 2,
            heads: 2,
            fusion_layers: 1,
            ..VlmConfig::default()
        };
        let mut m = VlmModel::new(cfg, 1).unwrap();
        m.params_mut().freeze_all();
        m
    }

    #[test]
    fn init_shapes_and_reproducibility() {
        let model = tiny();
        let vocab = Vocabulary::out_domain();
        let a = init_concept_embeddings(&model, &vocab, 3, InitScheme::Gaussian, &mut Rng::new(5)).unwrap();
        let b = init_concept_embeddings(&model, &vocab, 3, InitScheme::Gaussian, &mut Rng::new(5)).unwrap();
        assert_eq!(a.tensor.shape(), &[18, 8]);
        assert_eq!(a, b);
        assert_eq!(a.block(1).len(), 24);
        let c = init_concept_embeddings(&model, &vocab, 3, InitScheme::CopyText, &mut Rng::new(5)).unwrap();
        assert!(c.tensor.data().iter().all(|x| x.is_finite()));
        assert!(init_concept_embeddings(&model, &vocab, 0, InitScheme::Gaussian, &mut Rng::new(5)).is_err());
    }

    #[test]
    fn unknown_scheme_is_rejected() {
        assert!(matches!("uniform".parse::<InitScheme>(), Err(Error::Config(_))));
        assert_eq!("copy_text".parse::<InitScheme>().unwrap(), InitScheme::CopyText);
    }
}
