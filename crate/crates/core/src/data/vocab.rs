use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed word table shared by every vocabulary. Index = token id.
pub const WORDS: &[&str] = &[
    "[sep]", "a", "photo", "of", "red", "green", "blue", "yellow", "circle", "square", "triangle",
    "orange", "purple", "striped", "ellipse", "ring", "checker", "blob",
];

pub const SEP_TOKEN: usize = 0;

/// Number of distinct token ids.
pub fn token_vocab_size() -> usize {
    WORDS.len()
}

pub fn token_id(word: &str) -> Result<usize> {
    WORDS
        .iter()
        .position(|w| *w == word)
        .ok_or_else(|| Error::UnknownClass(word.to_string()))
}

/// Whitespace tokenizer over [`WORDS`].
pub fn tokenize(text: &str) -> Result<Vec<usize>> {
    text.split_whitespace().map(token_id).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    InDomain,
    OutDomain,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::InDomain => "in_domain",
            Domain::OutDomain => "out_domain",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    StripedEllipse,
    Ring,
    CheckerBlob,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub domain: Domain,
    pub shape: ShapeKind,
    pub color: [f64; 3],
}

const IN_COLORS: [(&str, [f64; 3]); 4] = [
    ("red", [0.90, 0.15, 0.15]),
    ("green", [0.15, 0.80, 0.20]),
    ("blue", [0.20, 0.30, 0.95]),
    ("yellow", [0.95, 0.90, 0.20]),
];
const IN_SHAPES: [(&str, ShapeKind); 3] = [
    ("circle", ShapeKind::Circle),
    ("square", ShapeKind::Square),
    ("triangle", ShapeKind::Triangle),
];
const OUT_COLORS: [(&str, [f64; 3]); 2] = [("orange", [1.00, 0.55, 0.10]), ("purple", [0.60, 0.25, 0.80])];
const OUT_SHAPES: [(&str, ShapeKind); 3] = [
    ("striped ellipse", ShapeKind::StripedEllipse),
    ("ring", ShapeKind::Ring),
    ("checker blob", ShapeKind::CheckerBlob),
];

/// Ordered class list of one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    classes: Vec<ClassSpec>,
}

impl Vocabulary {
    pub fn new(classes: Vec<ClassSpec>) -> Result<Self> {
        for (i, c) in classes.iter().enumerate() {
            if classes[..i].iter().any(|o| o.name == c.name) {
                return Err(Error::Config(format!("duplicate class name `{}`", c.name)));
            }
            tokenize(&c.name)?;
        }
        Ok(Self { classes })
    }

    /// 12 solid primitives: 3 shapes x 4 colors.
    pub fn in_domain() -> Self {
        let classes = IN_SHAPES
            .iter()
            .flat_map(|(sn, shape)| {
                IN_COLORS.iter().map(move |(cn, color)| ClassSpec {
                    name: format!("{cn} {sn}"),
                    domain: Domain::InDomain,
                    shape: *shape,
                    color: *color,
                })
            })
            .collect();
        Self { classes }
    }

    /// 6 textured or composite primitives in colors unseen in-domain.
    pub fn out_domain() -> Self {
        let classes = OUT_SHAPES
            .iter()
            .flat_map(|(sn, shape)| {
                OUT_COLORS.iter().map(move |(cn, color)| ClassSpec {
                    name: format!("{cn} {sn}"),
                    domain: Domain::OutDomain,
                    shape: *shape,
                    color: *color,
                })
            })
            .collect();
        Self { classes }
    }

    pub fn for_domain(domain: Domain) -> Self {
        match domain {
            Domain::InDomain => Self::in_domain(),
            Domain::OutDomain => Self::out_domain(),
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[ClassSpec] {
        &self.classes
    }

    pub fn class(&self, i: usize) -> &ClassSpec {
        &self.classes[i]
    }

    pub fn names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| Error::UnknownClass(name.to_string()))
    }

    pub fn class_tokens(&self, i: usize) -> Vec<usize> {
        tokenize(&self.classes[i].name).expect("validated on construction")
    }

    pub fn has_domain(&self, d: Domain) -> bool {
        self.classes.iter().any(|c| c.domain == d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_vocabularies() {
        let i = Vocabulary::in_domain();
        let o = Vocabulary::out_domain();
        assert_eq!((i.len(), o.len()), (12, 6));
        assert!(!i.has_domain(Domain::OutDomain));
        assert!(!o.has_domain(Domain::InDomain));
        for v in [&i, &o] {
            for k in 0..v.len() {
                assert!(v.class_tokens(k).iter().all(|&t| t < token_vocab_size()));
            }
        }
    }

    #[test]
    fn out_domain_words_never_name_in_domain_classes() {
        let in_tokens: Vec<usize> = (0..12).flat_map(|k| Vocabulary::in_domain().class_tokens(k)).collect();
        let o = Vocabulary::out_domain();
        for k in 0..o.len() {
            assert!(o.class_tokens(k).iter().all(|t| !in_tokens.contains(t)));
        }
    }

    #[test]
    fn duplicates_and_unknown_words_rejected() {
        let c = Vocabulary::in_domain().class(0).clone();
        assert!(Vocabulary::new(vec![c.clone(), c.clone()]).is_err());
        let mut bad = c;
        bad.name = "mauve hexagon".into();
        assert!(Vocabulary::new(vec![bad]).is_err());
    }
}
