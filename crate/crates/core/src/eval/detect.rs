use serde::{Deserialize, Serialize};

use crate::data::Scene;
use crate::error::Result;
use crate::eval::ap::{coco_thresholds, compute_ap, mask_ap, Detection, GroundTruth};
use crate::nn::Binder;
use crate::numeric::Graph;
use crate::vlm::{Prompt, VlmModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            nms_iou: 0.5,
            max_detections: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub ap_box: f64,
    pub ap50_box: f64,
    pub ap_mask: f64,
    pub ap50_mask: f64,
}

impl DetectionMetrics {
    /// Model-selection score.
    pub fn selection_score(&self) -> f64 {
        0.5 * (self.ap_box + self.ap_mask)
    }
}

/// Class-wise greedy non-maximum suppression; output sorted by confidence.
pub fn nms(mut dets: Vec<Detection>, iou: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut keep: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        if keep.iter().all(|k| k.class != d.class || k.bbox.iou(&d.bbox) <= iou) {
            keep.push(d);
        }
    }
    keep
}

/// Raw per-region head outputs of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionOutputs {
    pub logits: Vec<f64>,
    pub boxes: Vec<f64>,
    pub masks: Vec<f64>,
    pub num_classes: usize,
}

/// Arg-max class per region, thresholded, suppressed and truncated.
pub fn decode_detections(model: &VlmModel, out: &RegionOutputs, cfg: &DecodeConfig) -> Vec<Detection> {
    let k = out.num_classes;
    let c = model.config();
    let s = c.image_size as f64;
    let cells = c.mask_grid * c.mask_grid;
    let mut dets = Vec::new();
    for r in 0..c.regions() {
        let row = &out.logits[r * k..(r + 1) * k];
        let (class, logit) = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        let conf = 1.0 / (1.0 + (-logit).exp());
        if conf < cfg.score_threshold {
            continue;
        }
        let u = &out.boxes[r * 4..r * 4 + 4];
        let bbox = model.decode_box(r, [u[0], u[1], u[2], u[3]]).clamp(s, s);
        if bbox.area() <= 0.0 {
            continue;
        }
        let m = &out.masks[r * cells..(r + 1) * cells];
        let mask = model.paste_mask_values(m, &bbox).into_iter().map(|l| l > 0.0).collect();
        dets.push(Detection {
            bbox,
            class,
            confidence: conf,
            mask: Some(mask),
        });
    }
    let mut kept = nms(dets, cfg.nms_iou);
    kept.truncate(cfg.max_detections);
    kept
}

pub fn ground_truth(scene: &Scene) -> Vec<GroundTruth> {
    scene
        .boxes
        .iter()
        .zip(&scene.labels)
        .zip(&scene.masks)
        .map(|((b, &c), m)| GroundTruth {
            bbox: *b,
            class: c,
            mask: Some(m.clone()),
        })
        .collect()
}

/// Head outputs for each scene. The prompt sequence is computed once;
/// `trunk_cache[i]`, when given, replaces the trunk of scene i.
pub fn region_outputs(
    model: &VlmModel,
    prompt: &Prompt,
    scenes: &[Scene],
    trunk_cache: Option<&[Vec<f64>]>,
) -> Result<Vec<RegionOutputs>> {
    let frozen = model.frozen_params();
    let (p_rows, p_cols, p_vals) = {
        let mut g = Graph::new();
        let mut b = Binder::new(&frozen);
        let p = prompt.build(model, &mut g, &mut b, None)?;
        let (r, c) = g.shape(p);
        (r, c, g.value(p).to_vec())
    };
    let spans = prompt.spans();
    scenes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut g = Graph::new();
            let mut b = Binder::new(&frozen);
            let cached = trunk_cache.map(|c| c[i].as_slice());
            let trunk = model.trunk_or_cached(&mut g, &mut b, &s.image, cached)?;
            let p = g.constant(p_rows, p_cols, p_vals.clone())?;
            let h = model.heads(&mut g, &mut b, trunk, p, &spans)?;
            Ok(RegionOutputs {
                logits: g.value(h.logits).to_vec(),
                boxes: g.value(h.boxes).to_vec(),
                masks: g.value(h.masks).to_vec(),
                num_classes: spans.len(),
            })
        })
        .collect()
}

/// Box and mask AP of `prompt` on `scenes`.
pub fn evaluate(
    model: &VlmModel,
    prompt: &Prompt,
    scenes: &[Scene],
    trunk_cache: Option<&[Vec<f64>]>,
) -> Result<DetectionMetrics> {
    let outs = region_outputs(model, prompt, scenes, trunk_cache)?;
    let cfg = DecodeConfig::default();
    let dets: Vec<Vec<Detection>> = outs.iter().map(|o| decode_detections(model, o, &cfg)).collect();
    let gts: Vec<Vec<GroundTruth>> = scenes.iter().map(ground_truth).collect();
    let k = prompt.num_classes();
    let th = coco_thresholds();
    let bx = compute_ap(&dets, &gts, k, &th);
    let mk = mask_ap(&dets, &gts, k, &th);
    Ok(DetectionMetrics {
        ap_box: bx.mean,
        ap50_box: bx.ap50,
        ap_mask: mk.mean,
        ap50_mask: mk.ap50,
    })
}
