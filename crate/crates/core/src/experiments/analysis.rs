//! Modality-gap analysis and the concept-conditioned generation study.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{modality_gap_report, GapReport, GapSpace};
use crate::experiments::config::{ExperimentConfig, GenerateSection};
use crate::experiments::lab::{eval_scenes, Lab, RunSpec};
use crate::losses::diffusion::{mean_color, sample_generation, train_denoiser, ToyDenoiser};
use crate::numeric::Rng;
use crate::tuning::{textual_inversion_generation, Method, TuningConfig};
use crate::vlm::Prompt;

pub const CONCEPT_TAG: &str = "concept";
pub const TEXT_TAG: &str = "text";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapAnalysis {
    pub seed: u64,
    pub domain: crate::data::Domain,
    pub classes: Vec<String>,
    pub report: GapReport,
}

impl GapAnalysis {
    /// Classes whose concept embedding sits closer to the visual samples
    /// than the class-name embedding, in the raw space.
    pub fn classes_closer(&self) -> usize {
        self.classes
            .iter()
            .filter(|c| {
                let a = self.report.distance(CONCEPT_TAG, c, GapSpace::RawEmbedding);
                let b = self.report.distance(TEXT_TAG, c, GapSpace::RawEmbedding);
                matches!((a, b), (Some(a), Some(b)) if a < b)
            })
            .count()
    }

    pub fn mean(&self, tag: &str) -> f64 {
        self.report.mean(tag, GapSpace::RawEmbedding).unwrap_or(f64::NAN)
    }

    /// `class,domain_tag,method,x,y` rows of the joint projection.
    pub fn projection_csv(&self) -> String {
        let mut s = String::from("class,domain_tag,method,x,y\n");
        for p in &self.report.points {
            s.push_str(&format!("{},{},{},{:.6},{:.6}\n", p.class, self.domain.as_str(), p.method, p.x, p.y));
        }
        s
    }
}

/// Distances from searched concepts and from class-name prompts to the
/// visual embeddings of the evaluation split, on the pretrained model.
pub fn gap_analysis(lab: &Lab, cfg: &ExperimentConfig, seed: u64) -> Result<GapAnalysis> {
    let spec = RunSpec {
        seed,
        ..RunSpec::from_config(cfg, Method::ConesStage1)
    };
    let run = lab.run(cfg, &spec)?;
    let ck = lab.pretrained(cfg, seed, spec.fusion, spec.scale)?;
    let splits = lab.splits(cfg, spec.domain, seed)?;
    let classes = splits.vocabulary.names();
    let text = Prompt::class_names(&splits.vocabulary);
    let report = modality_gap_report(
        &ck.model,
        &classes,
        &[(CONCEPT_TAG, &run.tuned.prompt), (TEXT_TAG, &text)],
        eval_scenes(&splits, cfg.eval.split),
    )?;
    Ok(GapAnalysis {
        seed,
        domain: spec.domain,
        classes,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSamples {
    pub concept: usize,
    pub color: [f64; 3],
    /// Mean colour of each generated sample.
    pub sample_colors: Vec<[f64; 3]>,
    /// Share of samples closer to this concept's colour than to any other.
    pub closer_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationStudy {
    pub seed: u64,
    pub final_loss: f64,
    /// Samples under the conditioning vectors the denoiser was trained with.
    pub conditioned: Vec<ConceptSamples>,
    /// Samples under embeddings recovered by inversion against the frozen
    /// denoiser.
    pub inverted: Vec<ConceptSamples>,
}

fn solid_images(color: [f64; 3], count: usize, side: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| {
            (0..side * side)
                .flat_map(|_| color.map(|c| (c + rng.normal(0.0, 0.02)).clamp(0.0, 1.0)))
                .collect()
        })
        .collect()
}

fn score(concept: usize, colors: &[[f64; 3]], samples: &[Vec<f64>]) -> ConceptSamples {
    let dist = |a: &[f64], b: &[f64; 3]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let mut sample_colors = Vec::new();
    let mut closer = 0;
    for s in samples {
        let m = mean_color(s, 3);
        let own = dist(&m, &colors[concept]);
        if colors.iter().enumerate().all(|(j, c)| j == concept || own < dist(&m, c)) {
            closer += 1;
        }
        sample_colors.push([m[0], m[1], m[2]]);
    }
    ConceptSamples {
        concept,
        color: colors[concept],
        sample_colors,
        closer_fraction: closer as f64 / samples.len().max(1) as f64,
    }
}

/// Trains the toy denoiser on solid-colour concepts, each with its own
/// conditioning vector, then samples per concept. With `invert_steps > 0`
/// it also learns fresh embeddings for each concept against the frozen
/// denoiser and samples from those.
pub fn generation_study(gen: &GenerateSection, seed: u64) -> Result<GenerationStudy> {
    let dc = &gen.denoiser;
    dc.validate()?;
    if dc.channels != 3 || gen.colors.len() < 2 {
        return Err(Error::Config("generation needs RGB and at least two concept colours".into()));
    }
    let mut rng = Rng::derived(seed, 0x6e);
    let conds: Vec<Vec<f64>> = gen.colors.iter().map(|_| rng.normal_vec(dc.cond_dim, 0.0, 1.0)).collect();
    let mut images = Vec::new();
    let mut image_conds = Vec::new();
    for (k, &c) in gen.colors.iter().enumerate() {
        for img in solid_images(c, gen.images_per_concept, dc.side, &mut rng) {
            images.push(img);
            image_conds.push(conds[k].clone());
        }
    }
    let mut den = ToyDenoiser::new(dc.clone(), seed)?;
    let curve = train_denoiser(&mut den, &images, &image_conds, gen.steps, gen.batch_size, gen.learning_rate, &mut rng)?;
    let tail = curve.len().min(50);
    let final_loss = curve[curve.len() - tail..].iter().sum::<f64>() / tail.max(1) as f64;
    let mut conditioned = Vec::new();
    for (k, cond) in conds.iter().enumerate() {
        let samples = sample_generation(&den, cond, gen.samples, &mut Rng::derived(seed, 0x5a + k as u64))?;
        conditioned.push(score(k, &gen.colors, &samples));
    }
    let mut inverted = Vec::new();
    if gen.invert_steps > 0 {
        for k in 0..gen.colors.len() {
            let own: Vec<Vec<f64>> = images[k * gen.images_per_concept..(k + 1) * gen.images_per_concept].to_vec();
            let tc = TuningConfig {
                steps: gen.invert_steps,
                batch_size: gen.batch_size,
                learning_rate: gen.invert_learning_rate,
                seed: seed.wrapping_add(k as u64),
                ..TuningConfig::default()
            };
            let (tokens, _) = textual_inversion_generation(&den, &own, gen.invert_tokens, &tc)?;
            let m = tokens.rows();
            let cond: Vec<f64> = (0..dc.cond_dim)
                .map(|j| (0..m).map(|i| tokens.data()[i * dc.cond_dim + j]).sum::<f64>() / m as f64)
                .collect();
            let samples = sample_generation(&den, &cond, gen.samples, &mut Rng::derived(seed, 0x1a + k as u64))?;
            inverted.push(score(k, &gen.colors, &samples));
        }
    }
    Ok(GenerationStudy {
        seed,
        final_loss,
        conditioned,
        inverted,
    })
}
