//! Exhaustive AP oracle for micro-instances: every injective det→gt
//! assignment is enumerated and the one consistent with confidence-ordered
//! greedy matching is kept. IoU and precision integration are written out
//! independently of the library.

use cones_core::data::BBox;
use cones_core::eval::{Detection, GroundTruth};
use cones_core::numeric::Rng;

pub struct Instance {
    pub dets: Vec<Detection>,
    pub gts: Vec<GroundTruth>,
    pub classes: usize,
}

fn iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = w * h;
    let area = |r: &BBox| (r.x_max - r.x_min) * (r.y_max - r.y_min);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn random_box(rng: &mut Rng) -> BBox {
    let x = rng.uniform_range(0.0, 8.0);
    let y = rng.uniform_range(0.0, 8.0);
    BBox::new(x, y, x + rng.uniform_range(1.0, 4.0), y + rng.uniform_range(1.0, 4.0))
}

fn jitter(b: &BBox, rng: &mut Rng, s: f64) -> BBox {
    BBox::new(
        b.x_min + rng.uniform_range(-s, s),
        b.y_min + rng.uniform_range(-s, s),
        b.x_max + rng.uniform_range(-s, s),
        b.y_max + rng.uniform_range(-s, s),
    )
}

/// Up to 4 detections and 3 ground-truth boxes over at most 2 classes.
/// Confidences come from a coarse grid so ties occur.
pub fn random_instance(rng: &mut Rng) -> Instance {
    let classes = 1 + rng.below(2);
    let gts: Vec<GroundTruth> = (0..rng.below(4))
        .map(|_| GroundTruth {
            bbox: random_box(rng),
            class: rng.below(classes),
            mask: None,
        })
        .collect();
    let dets = (0..rng.below(5))
        .map(|_| {
            let (bbox, class) = if !gts.is_empty() && rng.uniform_range(0.0, 1.0) < 0.7 {
                let g = &gts[rng.below(gts.len())];
                let s = rng.uniform_range(0.0, 0.45);
                (jitter(&g.bbox, rng, s), g.class)
            } else {
                (random_box(rng), rng.below(classes))
            };
            Detection {
                bbox,
                class,
                confidence: rng.below(5) as f64 / 4.0,
                mask: None,
            }
        })
        .collect();
    Instance { dets, gts, classes }
}

fn assignments(n_det: usize, n_gt: usize) -> Vec<Vec<Option<usize>>> {
    let mut out = vec![Vec::new()];
    for _ in 0..n_det {
        let mut next = Vec::new();
        for a in &out {
            next.push([a.clone(), vec![None]].concat());
            for g in 0..n_gt {
                if !a.contains(&Some(g)) {
                    next.push([a.clone(), vec![Some(g)]].concat());
                }
            }
        }
        out = next;
    }
    out
}

/// Max precision at recall ≥ r, summed over r = 0, 0.01, …, 1.
fn pr_area(tp: &[bool], num_gt: usize) -> f64 {
    let mut pts = Vec::new();
    let mut hits = 0;
    for (i, &t) in tp.iter().enumerate() {
        if t {
            hits += 1;
        }
        pts.push((hits as f64 / num_gt as f64, hits as f64 / (i + 1) as f64));
    }
    (0..=100)
        .map(|r| {
            let level = r as f64 / 100.0;
            pts.iter().filter(|(rc, _)| *rc >= level - 1e-12).map(|(_, p)| *p).fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 101.0
}

fn class_ap(inst: &Instance, class: usize, thr: f64) -> f64 {
    let mut dets: Vec<&Detection> = inst.dets.iter().filter(|d| d.class == class).collect();
    // Stable sort keeps input order among equal confidences.
    dets.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap());
    let gts: Vec<&GroundTruth> = inst.gts.iter().filter(|g| g.class == class).collect();
    let ov = |i: usize, j: usize| iou(&dets[i].bbox, &gts[j].bbox);
    let consistent = |a: &[Option<usize>]| {
        (0..dets.len()).all(|i| {
            let open: Vec<usize> = (0..gts.len()).filter(|&j| !a[..i].contains(&Some(j)) && ov(i, j) >= thr).collect();
            match a[i] {
                None => open.is_empty(),
                Some(j) => open.contains(&j) && open.iter().all(|&k| ov(i, k) <= ov(i, j)),
            }
        })
    };
    let valid: Vec<Vec<Option<usize>>> = assignments(dets.len(), gts.len()).into_iter().filter(|a| consistent(a)).collect();
    assert_eq!(valid.len(), 1, "greedy matching must be unique");
    let tp: Vec<bool> = valid[0].iter().map(Option::is_some).collect();
    pr_area(&tp, gts.len())
}

/// (mean AP over the given thresholds, AP at 0.5), averaged over classes
/// with ground truth.
pub fn oracle_ap(inst: &Instance, thresholds: &[f64]) -> (f64, f64) {
    let present: Vec<usize> = (0..inst.classes).filter(|&c| inst.gts.iter().any(|g| g.class == c)).collect();
    if present.is_empty() {
        return (0.0, 0.0);
    }
    let n = present.len() as f64;
    let ap = present
        .iter()
        .map(|&c| thresholds.iter().map(|&t| class_ap(inst, c, t)).sum::<f64>() / thresholds.len() as f64)
        .sum::<f64>()
        / n;
    let ap50 = present.iter().map(|&c| class_ap(inst, c, 0.5)).sum::<f64>() / n;
    (ap, ap50)
}
