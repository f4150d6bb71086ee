use serde::{Deserialize, Serialize};

use crate::data::BBox;

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class: usize,
    pub confidence: f64,
    /// Row-major H×W mask, when the detector predicts one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    /// AP over all thresholds per class; `None` for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes with ground truth.
    pub mean: f64,
    /// Mean AP at IoU 0.5.
    pub ap50: f64,
}

/// Pixel IoU of two equally sized masks; 0 when both are empty.
pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.iter().zip(b) {
        inter += (*x && *y) as usize;
        union += (*x || *y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// 101-point interpolated area under the precision/recall curve of a ranked
/// list of true/false positives.
pub fn interpolated_ap(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(hits as f64 / num_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut total = 0.0;
    let mut j = 0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        while j < recall.len() && recall[j] < level - 1e-12 {
            j += 1;
        }
        if j < recall.len() {
            total += precision[j];
        }
    }
    total / 101.0
}

/// Greedy matching of one class at one threshold. Detections are visited in
/// decreasing confidence (stable, so ties keep input order); each takes the
/// unmatched ground truth of its image with the highest IoU ≥ `thr`.
fn match_class<I>(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], class: usize, thr: f64, iou: &I) -> (Vec<bool>, usize)
where
    I: Fn(&Detection, &GroundTruth) -> f64,
{
    let mut order: Vec<(usize, usize)> = dets
        .iter()
        .enumerate()
        .flat_map(|(i, ds)| ds.iter().enumerate().filter(|(_, d)| d.class == class).map(move |(j, _)| (i, j)))
        .collect();
    order.sort_by(|a, b| dets[b.0][b.1].confidence.total_cmp(&dets[a.0][a.1].confidence));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let num_gt = gts.iter().flatten().filter(|g| g.class == class).count();
    let tp = order
        .iter()
        .map(|&(i, j)| {
            let d = &dets[i][j];
            let mut best: Option<(usize, f64)> = None;
            for (k, g) in gts.get(i).map(|v| v.as_slice()).unwrap_or(&[]).iter().enumerate() {
                if g.class != class || used[i][k] {
                    continue;
                }
                let v = iou(d, g);
                if v >= thr && best.is_none_or(|(_, b)| v > b) {
                    best = Some((k, v));
                }
            }
            if let Some((k, _)) = best {
                used[i][k] = true;
                true
            } else {
                false
            }
        })
        .collect();
    (tp, num_gt)
}

/// AP with a caller-supplied overlap measure. `dets[i]` and `gts[i]` belong
/// to image i.
pub fn ap_with<I>(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], num_classes: usize, thresholds: &[f64], iou: I) -> ApResult
where
    I: Fn(&Detection, &GroundTruth) -> f64,
{
    let mut per_class = Vec::with_capacity(num_classes);
    let mut per_class50 = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let has_gt = gts.iter().flatten().any(|g| g.class == c);
        if !has_gt {
            per_class.push(None);
            per_class50.push(None);
            continue;
        }
        let aps: Vec<f64> = thresholds
            .iter()
            .map(|&t| {
                let (tp, n) = match_class(dets, gts, c, t, &iou);
                interpolated_ap(&tp, n)
            })
            .collect();
        per_class.push(Some(aps.iter().sum::<f64>() / aps.len().max(1) as f64));
        let (tp, n) = match_class(dets, gts, c, 0.5, &iou);
        per_class50.push(Some(interpolated_ap(&tp, n)));
    }
    let mean_of = |v: &[Option<f64>]| {
        let xs: Vec<f64> = v.iter().flatten().copied().collect();
        if xs.is_empty() {
            0.0
        } else {
            xs.iter().sum::<f64>() / xs.len() as f64
        }
    };
    ApResult {
        mean: mean_of(&per_class),
        ap50: mean_of(&per_class50),
        per_class,
    }
}

/// Box AP over `thresholds` (COCO-style when given [`coco_thresholds`]).
pub fn compute_ap(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], num_classes: usize, thresholds: &[f64]) -> ApResult {
    ap_with(dets, gts, num_classes, thresholds, |d, g| d.bbox.iou(&g.bbox))
}

/// AP with pixel IoU; detections or ground truth without masks never match.
pub fn mask_ap(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], num_classes: usize, thresholds: &[f64]) -> ApResult {
    ap_with(dets, gts, num_classes, thresholds, |d, g| match (&d.mask, &g.mask) {
        (Some(a), Some(b)) => mask_iou(a, b),
        _ => 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(b: BBox, c: usize, conf: f64) -> Detection {
        Detection {
            bbox: b,
            class: c,
            confidence: conf,
            mask: None,
        }
    }

    fn gt(b: BBox, c: usize) -> GroundTruth {
        GroundTruth {
            bbox: b,
            class: c,
            mask: None,
        }
    }

    #[test]
    fn perfect_and_empty() {
        let b = BBox::new(1.0, 1.0, 5.0, 5.0);
        let r = compute_ap(&[vec![det(b, 0, 1.0)]], &[vec![gt(b, 0)]], 1, &coco_thresholds());
        assert_eq!(r.mean, 1.0);
        assert_eq!(r.ap50, 1.0);
        let r = compute_ap(&[vec![]], &[vec![gt(b, 0)]], 1, &coco_thresholds());
        assert_eq!(r.mean, 0.0);
    }

    #[test]
    fn classes_without_ground_truth_are_skipped() {
        let b = BBox::new(1.0, 1.0, 5.0, 5.0);
        let r = compute_ap(&[vec![det(b, 0, 0.9), det(b, 1, 0.9)]], &[vec![gt(b, 0)]], 3, &[0.5]);
        assert_eq!(r.per_class, vec![Some(1.0), None, None]);
        assert_eq!(r.mean, 1.0);
    }

    #[test]
    fn half_recall_curve() {
        // FP then TP over 2 gt: precision 1/2 up to recall 1/2.
        assert!((interpolated_ap(&[false, true], 2) - 0.5 * 51.0 / 101.0).abs() < 1e-12);
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let b = BBox::new(0.0, 0.0, 4.0, 4.0);
        let (tp, n) = match_class(&[vec![det(b, 0, 0.9), det(b, 0, 0.8)]], &[vec![gt(b, 0)]], 0, 0.5, &|d: &Detection, g: &GroundTruth| d.bbox.iou(&g.bbox));
        assert_eq!((tp, n), (vec![true, false], 1));
    }

    #[test]
    fn mask_iou_counts_pixels() {
        assert_eq!(mask_iou(&[true, true, false, false], &[true, false, true, false]), 1.0 / 3.0);
        assert_eq!(mask_iou(&[false; 3], &[false; 3]), 0.0);
    }
}
