//! Detection and segmentation objectives. Each returns its value together with
//! the gradient w.r.t. the prediction so it can enter the tape as a fused
//! scalar node.

use crate::data::BBox;
use crate::error::{Error, Result};
use crate::numeric::{Graph, Var};

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const DICE_SMOOTH: f64 = 1.0;

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sigmoid focal loss summed over all entries and divided by
/// `max(1, #positives)`. `targets` holds 0/1 per logit.
pub fn focal_loss(logits: &[f64], targets: &[f64], alpha: f64, gamma: f64) -> Result<(f64, Vec<f64>)> {
    if logits.len() != targets.len() {
        return Err(Error::shape("focal_loss", &[logits.len()], &[targets.len()]));
    }
    let positives = targets.iter().filter(|t| **t > 0.5).count();
    let norm = positives.max(1) as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (i, (&x, &t)) in logits.iter().zip(targets).enumerate() {
        let p = sigmoid(x);
        if t > 0.5 {
            let log_p = -softplus(-x);
            let q = 1.0 - p;
            total += -alpha * q.powf(gamma) * log_p;
            grad[i] = alpha * q.powf(gamma) * (gamma * p * log_p - q);
        } else {
            let log_q = -softplus(x);
            total += -(1.0 - alpha) * p.powf(gamma) * log_q;
            grad[i] = (1.0 - alpha) * p.powf(gamma) * (p - gamma * (1.0 - p) * log_q);
        }
    }
    grad.iter_mut().for_each(|g| *g /= norm);
    Ok((total / norm, grad))
}

/// Per-pair `1 - GIoU` and its gradient w.r.t. the predicted corners.
fn giou_term(p: [f64; 4], g: [f64; 4]) -> (f64, [f64; 4]) {
    let [x1, y1, x2, y2] = p;
    let [g1, h1, g2, h2] = g;
    let (pw, ph) = (x2 - x1, y2 - y1);
    let area_p = pw * ph;
    let area_g = (g2 - g1) * (h2 - h1);
    let d_area_p = [-ph, -pw, ph, pw];

    let iw_raw = x2.min(g2) - x1.max(g1);
    let ih_raw = y2.min(h2) - y1.max(h1);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let d_iw = if iw_raw > 0.0 {
        [-((x1 > g1) as u8 as f64), 0.0, (x2 < g2) as u8 as f64, 0.0]
    } else {
        [0.0; 4]
    };
    let d_ih = if ih_raw > 0.0 {
        [0.0, -((y1 > h1) as u8 as f64), 0.0, (y2 < h2) as u8 as f64]
    } else {
        [0.0; 4]
    };
    let inter = iw * ih;
    let union = area_p + area_g - inter;

    let cw = x2.max(g2) - x1.min(g1);
    let ch = y2.max(h2) - y1.min(h1);
    let d_cw = [-((x1 < g1) as u8 as f64), 0.0, (x2 > g2) as u8 as f64, 0.0];
    let d_ch = [0.0, -((y1 < h1) as u8 as f64), 0.0, (y2 > h2) as u8 as f64];
    let encl = cw * ch;

    // 1 - GIoU = 2 - I/U - U/E
    let value = 2.0 - inter / union - union / encl;
    let mut grad = [0.0; 4];
    for k in 0..4 {
        let d_inter = d_iw[k] * ih + iw * d_ih[k];
        let d_union = d_area_p[k] - d_inter;
        let d_encl = d_cw[k] * ch + cw * d_ch[k];
        grad[k] = -(d_inter * union - inter * d_union) / (union * union)
            - (d_union * encl - union * d_encl) / (encl * encl);
    }
    (value, grad)
}

/// Generalized IoU of two boxes.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    1.0 - giou_term(a.to_array(), b.to_array()).0
}

/// Mean over pairs of `L1 / norm + (1 - GIoU)`; zero for no pairs. `norm`
/// (typically the image side) scales pixel coordinates for the L1 term.
pub fn box_loss(pred: &[[f64; 4]], gt: &[BBox], norm: f64) -> Result<(f64, Vec<[f64; 4]>)> {
    if pred.len() != gt.len() {
        return Err(Error::shape("box_loss", &[pred.len(), 4], &[gt.len(), 4]));
    }
    if let Some(b) = gt.iter().find(|b| b.area() <= 0.0) {
        return Err(Error::Degenerate(format!("ground-truth box {b:?} has zero area")));
    }
    if pred.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = pred.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(pred.len());
    for (p, g) in pred.iter().zip(gt) {
        let ga = g.to_array();
        let (gi, mut grad) = giou_term(*p, ga);
        let mut l1 = 0.0;
        for k in 0..4 {
            let d = p[k] - ga[k];
            l1 += d.abs() / norm;
            grad[k] += d.signum() * (d != 0.0) as u8 as f64 / norm;
        }
        total += l1 + gi;
        grads.push(grad.map(|v| v / n));
    }
    Ok((total / n, grads))
}

/// Mean over masks of pixel-mean binary cross-entropy plus Dice loss. Each
/// row of `logits` / `targets` is one mask of `pixels` entries.
pub fn mask_loss(logits: &[f64], targets: &[f64], pixels: usize) -> Result<(f64, Vec<f64>)> {
    if logits.len() != targets.len() || pixels == 0 || logits.len() % pixels != 0 {
        return Err(Error::shape("mask_loss", &[logits.len()], &[targets.len(), pixels]));
    }
    let masks = logits.len() / pixels;
    if masks == 0 {
        return Ok((0.0, Vec::new()));
    }
    let mut total = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for m in 0..masks {
        let xs = &logits[m * pixels..(m + 1) * pixels];
        let ts = &targets[m * pixels..(m + 1) * pixels];
        let ps: Vec<f64> = xs.iter().map(|x| sigmoid(*x)).collect();
        let bce: f64 = xs
            .iter()
            .zip(ts)
            .map(|(x, t)| softplus(*x) - t * x)
            .sum::<f64>()
            / pixels as f64;
        let inter: f64 = ps.iter().zip(ts).map(|(p, t)| p * t).sum();
        let s = ps.iter().sum::<f64>() + ts.iter().sum::<f64>() + DICE_SMOOTH;
        let num = 2.0 * inter + DICE_SMOOTH;
        total += bce + 1.0 - num / s;
        let gm = &mut grad[m * pixels..(m + 1) * pixels];
        for j in 0..pixels {
            let d_bce = (ps[j] - ts[j]) / pixels as f64;
            let d_dice_dp = -(2.0 * ts[j] * s - num) / (s * s);
            gm[j] = d_bce + d_dice_dp * ps[j] * (1.0 - ps[j]);
        }
    }
    let n = masks as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((total / n, grad))
}

/// Focal loss over a logits node with 0/1 targets.
pub fn focal_loss_node(g: &mut Graph, logits: Var, targets: &[f64]) -> Result<Var> {
    let (v, d) = focal_loss(g.value(logits), targets, FOCAL_ALPHA, FOCAL_GAMMA)?;
    g.fused_scalar(&[logits], v, vec![d])
}

/// Box loss over an `n × 4` node of predicted corners.
pub fn box_loss_node(g: &mut Graph, pred: Var, gt: &[BBox], norm: f64) -> Result<Var> {
    let (rows, cols) = g.shape(pred);
    if cols != 4 || rows != gt.len() {
        return Err(Error::shape("box_loss", &[rows, cols], &[gt.len(), 4]));
    }
    let boxes: Vec<[f64; 4]> = g
        .value(pred)
        .chunks(4)
        .map(|c| [c[0], c[1], c[2], c[3]])
        .collect();
    let (v, d) = box_loss(&boxes, gt, norm)?;
    g.fused_scalar(&[pred], v, vec![d.concat()])
}

/// Mask loss over an `n × pixels` logits node.
pub fn mask_loss_node(g: &mut Graph, logits: Var, targets: &[f64]) -> Result<Var> {
    let (_, pixels) = g.shape(logits);
    let (v, d) = mask_loss(g.value(logits), targets, pixels)?;
    g.fused_scalar(&[logits], v, vec![d])
}
