use serde::{Deserialize, Serialize};

use crate::data::vocab::SEP_TOKEN;
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::nn::Binder;
use crate::numeric::{Graph, Tensor, Var};
use crate::vlm::model::{Span, VlmModel};

/// How the prompt-side sequence is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    /// Class names through the text encoder.
    ClassNames,
    /// Per-class embedding blocks fed straight to the fusion input.
    Concepts,
    /// Learned vectors around each class name, through the text encoder.
    PromptTuning,
    /// Learned pseudo tokens in place of each class name, through the text
    /// encoder.
    TextualInversion,
}

/// Prompt for a K-class vocabulary. Learned kinds carry a (K·M) × d tensor
/// whose rows `k·M .. (k+1)·M` belong to class k.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub kind: PromptKind,
    pub tokens_per_class: usize,
    pub class_tokens: Vec<Vec<usize>>,
    pub tensor: Option<Tensor>,
}

enum Row {
    Learned(usize),
    Token(usize),
}

impl Prompt {
    pub fn class_names(vocab: &Vocabulary) -> Self {
        Self {
            kind: PromptKind::ClassNames,
            tokens_per_class: 0,
            class_tokens: (0..vocab.len()).map(|k| vocab.class_tokens(k)).collect(),
            tensor: None,
        }
    }

    fn learned(kind: PromptKind, vocab: &Vocabulary, m: usize, tensor: Tensor) -> Result<Self> {
        let k = vocab.len();
        if tensor.rows() != k * m || tensor.shape().len() != 2 {
            return Err(Error::shape("prompt tensor", tensor.shape(), &[k * m, tensor.cols()]));
        }
        Ok(Self {
            kind,
            tokens_per_class: m,
            class_tokens: (0..k).map(|i| vocab.class_tokens(i)).collect(),
            tensor: Some(tensor),
        })
    }

    pub fn concepts(vocab: &Vocabulary, m: usize, tensor: Tensor) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidArgument("concept prompts need at least one token per class".into()));
        }
        Self::learned(PromptKind::Concepts, vocab, m, tensor)
    }

    /// With `m == 0` this is exactly the class-name prompt.
    pub fn prompt_tuning(vocab: &Vocabulary, m: usize, tensor: Option<Tensor>) -> Result<Self> {
        match (m, tensor) {
            (0, _) => Ok(Self::class_names(vocab)),
            (_, Some(t)) => Self::learned(PromptKind::PromptTuning, vocab, m, t),
            (_, None) => Err(Error::InvalidArgument("prompt tuning needs its vectors".into())),
        }
    }

    pub fn textual_inversion(vocab: &Vocabulary, m: usize, tensor: Tensor) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidArgument("textual inversion needs at least one token per class".into()));
        }
        Self::learned(PromptKind::TextualInversion, vocab, m, tensor)
    }

    pub fn num_classes(&self) -> usize {
        self.class_tokens.len()
    }

    pub fn uses_text_encoder(&self) -> bool {
        self.kind != PromptKind::Concepts
    }

    /// Scalars that a tuning run would optimize.
    pub fn tunable_count(&self) -> usize {
        self.tensor.as_ref().map_or(0, Tensor::numel)
    }

    /// Row layout of the sequence and each class's span.
    fn layout(&self) -> (Vec<Row>, Vec<Span>) {
        let m = self.tokens_per_class;
        let mut rows = Vec::new();
        let mut spans = Vec::new();
        for (k, toks) in self.class_tokens.iter().enumerate() {
            if k > 0 && self.kind != PromptKind::Concepts {
                rows.push(Row::Token(SEP_TOKEN));
            }
            let start = rows.len();
            match self.kind {
                PromptKind::ClassNames => rows.extend(toks.iter().map(|&t| Row::Token(t))),
                PromptKind::Concepts | PromptKind::TextualInversion => {
                    rows.extend((0..m).map(|j| Row::Learned(k * m + j)));
                }
                PromptKind::PromptTuning => {
                    let before = m.div_ceil(2);
                    rows.extend((0..before).map(|j| Row::Learned(k * m + j)));
                    rows.extend(toks.iter().map(|&t| Row::Token(t)));
                    rows.extend((before..m).map(|j| Row::Learned(k * m + j)));
                }
            }
            spans.push(Span {
                start,
                len: rows.len() - start,
            });
        }
        (rows, spans)
    }

    pub fn spans(&self) -> Vec<Span> {
        self.layout().1
    }

    /// Sequence length of the assembled prompt.
    pub fn len(&self) -> usize {
        self.layout().0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_tokens.is_empty()
    }

    /// Input rows before any encoder: learned rows and token embeddings in
    /// layout order. `learned` overrides the stored tensor (for training).
    pub fn input_rows(&self, model: &VlmModel, g: &mut Graph, b: &mut Binder, learned: Option<Var>) -> Result<Var> {
        let (rows, _) = self.layout();
        let learned = match (learned, &self.tensor) {
            (Some(v), _) => Some(v),
            (None, Some(t)) => Some(g.leaf(&t.clone().with_requires_grad(false))),
            (None, None) => None,
        };
        let ids: Vec<usize> = rows
            .iter()
            .filter_map(|r| match r {
                Row::Token(t) => Some(*t),
                Row::Learned(_) => None,
            })
            .collect();
        let n_learned = learned.map_or(0, |v| g.shape(v).0);
        let mut parts = Vec::new();
        if let Some(v) = learned {
            parts.push(v);
        }
        if !ids.is_empty() {
            parts.push(model.token_embeddings(g, b, &ids)?);
        }
        let all = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
        let mut next_token = n_learned;
        let idx: Vec<usize> = rows
            .iter()
            .map(|r| match r {
                Row::Learned(i) => *i,
                Row::Token(_) => {
                    next_token += 1;
                    next_token - 1
                }
            })
            .collect();
        if self.kind == PromptKind::Concepts && idx.iter().enumerate().all(|(i, j)| i == *j) {
            return Ok(all);
        }
        g.gather_rows(all, &idx)
    }

    /// The T × d sequence entering the fusion stack.
    pub fn build(&self, model: &VlmModel, g: &mut Graph, b: &mut Binder, learned: Option<Var>) -> Result<Var> {
        let x = self.input_rows(model, g, b, learned)?;
        if self.uses_text_encoder() {
            model.encode_text_embeds(g, b, x)
        } else {
            Ok(x)
        }
    }
}
