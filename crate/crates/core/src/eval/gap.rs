//! Distances between prompt-side class embeddings and visual region
//! embeddings in the model's alignment space, where both sides are unit
//! vectors and classification logits are their cosines.

use serde::{Deserialize, Serialize};

use crate::data::Scene;
use crate::error::{Error, Result};
use crate::eval::project::Projection;
use crate::nn::Binder;
use crate::numeric::Graph;
use crate::vlm::train::scene_targets;
use crate::vlm::{Prompt, VlmModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapSpace {
    RawEmbedding,
    Projected2d,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub method: String,
    pub class: String,
    pub visual_samples: usize,
    pub raw_embedding: f64,
    pub projected_2d: f64,
}

/// One point of the joint 2D projection. Visual samples carry the tag
/// `visual`, or `visual:<method>` when each method has its own samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub class: String,
    pub method: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub rows: Vec<GapRow>,
    #[serde(default)]
    pub points: Vec<ProjectedPoint>,
}

impl GapReport {
    pub fn distance(&self, method: &str, class: &str, space: GapSpace) -> Option<f64> {
        self.rows.iter().find(|r| r.method == method && r.class == class).map(|r| match space {
            GapSpace::RawEmbedding => r.raw_embedding,
            GapSpace::Projected2d => r.projected_2d,
        })
    }

    /// Mean over classes of one method's distances.
    pub fn mean(&self, method: &str, space: GapSpace) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.method == method)
            .map(|r| match space {
                GapSpace::RawEmbedding => r.raw_embedding,
                GapSpace::Projected2d => r.projected_2d,
            })
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,class,visual_samples,raw_embedding,projected_2d\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{:.6},{:.6}\n",
                r.method, r.class, r.visual_samples, r.raw_embedding, r.projected_2d
            ));
        }
        s
    }
}

/// Class embeddings of one method, with the visual samples they are
/// compared against (one set per class).
#[derive(Debug, Clone, PartialEq)]
pub struct MethodEmbeddings {
    pub name: String,
    pub classes: Vec<Vec<f64>>,
    pub visual: Vec<Vec<Vec<f64>>>,
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// `entries` are (method, class embeddings, index into `visuals`).
fn build(classes: &[String], entries: &[(&str, &[Vec<f64>], usize)], visuals: &[(String, &[Vec<Vec<f64>>])]) -> Result<GapReport> {
    if visuals.iter().any(|(_, v)| v.len() != classes.len()) || entries.iter().any(|(_, e, _)| e.len() != classes.len()) {
        return Err(Error::InvalidArgument("one embedding and one sample set per class are required".into()));
    }
    for (_, v) in visuals {
        if let Some((c, _)) = classes.iter().zip(v.iter()).find(|(_, s)| s.len() < 2) {
            return Err(Error::Degenerate(format!("class `{c}` has fewer than 2 visual samples")));
        }
    }
    let mut all: Vec<Vec<f64>> = visuals.iter().flat_map(|(_, v)| v.iter().flatten().cloned()).collect();
    all.extend(entries.iter().flat_map(|(_, e, _)| e.iter().cloned()));
    let proj = Projection::fit(&all)?;
    let vis2: Vec<Vec<Vec<[f64; 2]>>> = visuals
        .iter()
        .map(|(_, v)| v.iter().map(|s| s.iter().map(|x| proj.apply(x)).collect()).collect())
        .collect();
    let point = |class: &str, method: &str, p: [f64; 2]| ProjectedPoint {
        class: class.to_string(),
        method: method.to_string(),
        x: p[0],
        y: p[1],
    };
    let mut points = Vec::new();
    for ((tag, _), sets) in visuals.iter().zip(&vis2) {
        for (c, v) in classes.iter().zip(sets) {
            points.extend(v.iter().map(|&p| point(c, tag, p)));
        }
    }
    let mut rows = Vec::new();
    for &(name, emb, vi) in entries {
        let visual = visuals[vi].1;
        for (k, class) in classes.iter().enumerate() {
            let n = visual[k].len() as f64;
            let raw = visual[k].iter().map(|v| euclid(&emb[k], v)).sum::<f64>() / n;
            let e2 = proj.apply(&emb[k]);
            points.push(point(class, name, e2));
            let flat = vis2[vi][k].iter().map(|v| euclid(&e2, v)).sum::<f64>() / n;
            rows.push(GapRow {
                method: name.to_string(),
                class: class.clone(),
                visual_samples: visual[k].len(),
                raw_embedding: raw,
                projected_2d: flat,
            });
        }
    }
    Ok(GapReport { rows, points })
}

/// Per class and method, the mean Euclidean distance from the method's class
/// embedding to each visual sample of that class, in the raw space and in a
/// PCA plane fitted to all points together.
pub fn gap_report(
    classes: &[String],
    methods: &[(String, Vec<Vec<f64>>)],
    visual: &[Vec<Vec<f64>>],
) -> Result<GapReport> {
    let entries: Vec<(&str, &[Vec<f64>], usize)> = methods.iter().map(|(n, e)| (n.as_str(), e.as_slice(), 0)).collect();
    build(classes, &entries, &[("visual".to_string(), visual)])
}

/// As [`gap_report`], with each method measured against its own visual
/// samples.
pub fn paired_gap_report(classes: &[String], methods: &[MethodEmbeddings]) -> Result<GapReport> {
    let entries: Vec<(&str, &[Vec<f64>], usize)> = methods
        .iter()
        .enumerate()
        .map(|(i, m)| (m.name.as_str(), m.classes.as_slice(), i))
        .collect();
    let visuals: Vec<(String, &[Vec<Vec<f64>>])> = methods.iter().map(|m| (format!("visual:{}", m.name), m.visual.as_slice())).collect();
    build(classes, &entries, &visuals)
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.into_iter().map(|x| x / n).collect()
    } else {
        v
    }
}

/// Alignment-space embeddings under `prompt`: the unit region vector at each
/// object's assigned region, grouped by class, and per class the
/// renormalized mean of its unit prompt vector over `scenes`. Deep fusion
/// makes both sides depend on the prompt and the image.
pub fn alignment_embeddings(model: &VlmModel, prompt: &Prompt, scenes: &[Scene]) -> Result<(Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>)> {
    let k = prompt.num_classes();
    let spans = prompt.spans();
    let frozen = model.frozen_params();
    let mut visual = vec![Vec::new(); k];
    let mut class_sum: Vec<Vec<f64>> = Vec::new();
    for s in scenes {
        let mut g = Graph::new();
        let mut b = Binder::new(&frozen);
        let trunk = model.trunk(&mut g, &mut b, &s.image)?;
        let p = prompt.build(model, &mut g, &mut b, None)?;
        let (v, p) = model.fuse_tail(&mut g, &mut b, trunk, p)?;
        let (vn, pn) = model.alignment_features(&mut g, &mut b, v, p, &spans)?;
        let d = g.shape(vn).1;
        let rows = g.value(vn);
        for (&r, &label) in scene_targets(model, s, k)?.regions.iter().zip(&s.labels) {
            if label < k {
                visual[label].push(rows[r * d..(r + 1) * d].to_vec());
            }
        }
        let pv = g.value(pn);
        if class_sum.is_empty() {
            class_sum = vec![vec![0.0; d]; k];
        }
        for (c, acc) in class_sum.iter_mut().enumerate() {
            acc.iter_mut().zip(&pv[c * d..(c + 1) * d]).for_each(|(a, x)| *a += x);
        }
    }
    if class_sum.is_empty() {
        return Err(Error::Degenerate("no scenes to embed".into()));
    }
    Ok((class_sum.into_iter().map(unit).collect(), visual))
}

/// Gap report for named prompts against the objects in `scenes`.
pub fn modality_gap_report(
    model: &VlmModel,
    classes: &[String],
    prompts: &[(&str, &Prompt)],
    scenes: &[Scene],
) -> Result<GapReport> {
    if prompts.is_empty() || prompts.iter().any(|(_, p)| p.num_classes() != classes.len()) {
        return Err(Error::InvalidArgument("every prompt must cover the listed classes".into()));
    }
    let methods = prompts
        .iter()
        .map(|(n, p)| {
            let (classes, visual) = alignment_embeddings(model, p, scenes)?;
            Ok(MethodEmbeddings {
                name: n.to_string(),
                classes,
                visual,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    paired_gap_report(classes, &methods)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_point_hand_layout() {
        // Visual samples (0,0) and (4,0); concept at (2,0); text at (2,3).
        let classes = vec!["a".to_string()];
        let visual = vec![vec![vec![0.0, 0.0], vec![4.0, 0.0]]];
        let methods = vec![
            ("concept".to_string(), vec![vec![2.0, 0.0]]),
            ("text".to_string(), vec![vec![2.0, 3.0]]),
        ];
        let r = gap_report(&classes, &methods, &visual).unwrap();
        assert!((r.distance("concept", "a", GapSpace::RawEmbedding).unwrap() - 2.0).abs() < 1e-12);
        assert!((r.distance("text", "a", GapSpace::RawEmbedding).unwrap() - 13f64.sqrt()).abs() < 1e-12);
        // Points already span a plane, so the projection preserves distances.
        assert!((r.distance("text", "a", GapSpace::Projected2d).unwrap() - 13f64.sqrt()).abs() < 1e-9);
        assert_eq!(r.rows[0].visual_samples, 2);
    }

    #[test]
    fn identical_samples_and_concept_give_zero() {
        let classes = vec!["a".to_string()];
        let visual = vec![vec![vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]]];
        let methods = vec![("c".to_string(), vec![vec![1.0, 2.0, 3.0]])];
        let r = gap_report(&classes, &methods, &visual).unwrap();
        assert_eq!(r.distance("c", "a", GapSpace::RawEmbedding), Some(0.0));
    }

    #[test]
    fn each_method_uses_its_own_samples() {
        let classes = vec!["a".to_string()];
        let methods = vec![
            MethodEmbeddings {
                name: "concept".into(),
                classes: vec![vec![0.0, 0.0]],
                visual: vec![vec![vec![1.0, 0.0], vec![-1.0, 0.0]]],
            },
            MethodEmbeddings {
                name: "text".into(),
                classes: vec![vec![0.0, 0.0]],
                visual: vec![vec![vec![3.0, 0.0], vec![0.0, 3.0]]],
            },
        ];
        let r = paired_gap_report(&classes, &methods).unwrap();
        assert_eq!(r.distance("concept", "a", GapSpace::RawEmbedding), Some(1.0));
        assert_eq!(r.distance("text", "a", GapSpace::RawEmbedding), Some(3.0));
        assert_eq!(r.points.iter().filter(|p| p.method == "visual:text").count(), 2);
        assert_eq!(r.points.len(), 6);
    }

    #[test]
    fn missing_samples_are_rejected() {
        let classes = vec!["a".to_string(), "b".to_string()];
        let visual = vec![vec![vec![0.0], vec![1.0]], vec![]];
        let methods = vec![("c".to_string(), vec![vec![0.0], vec![0.0]])];
        assert!(matches!(gap_report(&classes, &methods, &visual), Err(Error::Degenerate(_))));
    }
}
