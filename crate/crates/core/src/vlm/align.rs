use crate::error::{Error, Result};

fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0) {
        return Err(Error::Degenerate("zero-norm embedding in alignment".into()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Region-to-class logits cos(v_r, p_k)/τ and their row-wise softmax.
pub fn alignment_scores(v: &[Vec<f64>], p: &[Vec<f64>], tau: f64) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if p.is_empty() {
        return Err(Error::InvalidArgument("need at least one class embedding".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    let pu: Vec<Vec<f64>> = p.iter().map(|x| unit(x)).collect::<Result<_>>()?;
    let mut logits = Vec::with_capacity(v.len());
    let mut probs = Vec::with_capacity(v.len());
    for row in v {
        let vu = unit(row)?;
        if vu.len() != pu[0].len() {
            return Err(Error::shape("alignment_scores", &[vu.len()], &[pu[0].len()]));
        }
        let l: Vec<f64> = pu.iter().map(|q| q.iter().zip(&vu).map(|(a, b)| a * b).sum::<f64>() / tau).collect();
        let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = l.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        probs.push(e.iter().map(|x| x / z).collect());
        logits.push(l);
    }
    Ok((logits, probs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_class_hand_value() {
        let (_, p) = alignment_scores(&[vec![1.0, 0.0]], &[vec![1.0, 0.0], vec![0.0, 1.0]], 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((p[0][0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p[0][0] - 0.73106).abs() < 1e-5);
    }

    #[test]
    fn identical_classes_are_uniform_and_scale_free() {
        let p = vec![vec![0.3, -1.0, 2.0]; 4];
        let (l1, pr) = alignment_scores(&[vec![1.0, 2.0, 3.0]], &p, 0.07).unwrap();
        assert!(pr[0].iter().all(|x| (x - 0.25).abs() < 1e-12));
        let (l5, _) = alignment_scores(&[vec![5.0, 10.0, 15.0]], &p, 0.07).unwrap();
        assert!(l1[0].iter().zip(&l5[0]).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn zero_norm_is_an_error() {
        assert!(alignment_scores(&[vec![0.0, 0.0]], &[vec![1.0, 0.0]], 1.0).is_err());
    }
}
