use serde::{Deserialize, Serialize};

use super::Tensor2;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Mean over every entry of `(p − t)²`.
    Mse,
    /// Mean over rows of `−log p_y`; predictions are softmax outputs.
    CrossEntropy,
}

/// Evaluates a batch loss and its gradient.
///
/// The value is averaged over the batch, so the gradient already carries the
/// `1/batch` factor and backprop only has to sum. For `Mse` the gradient is
/// with respect to the prediction; for `CrossEntropy` it is with respect to
/// the pre-softmax logits, `(p − y)/batch`.
pub fn loss_eval(kind: LossKind, prediction: &Tensor2, target: &Tensor2) -> Result<(f64, Tensor2)> {
    prediction.ensure_shape(target, "loss_eval")?;
    let rows = prediction.rows().max(1) as f64;
    match kind {
        LossKind::Mse => {
            let n = prediction.data().len().max(1) as f64;
            let diff = prediction.sub(target)?;
            let value = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
            let grad = diff.scale(2.0 / n);
            Ok((value, grad))
        }
        LossKind::CrossEntropy => {
            let mut value = 0.0;
            for (p, t) in prediction.iter_rows().zip(target.iter_rows()) {
                let hot = one_hot_index(t)?;
                value -= p[hot].max(f64::MIN_POSITIVE).ln();
            }
            let grad = prediction.sub(target)?.scale(1.0 / rows);
            Ok((value / rows, grad))
        }
    }
}

fn one_hot_index(row: &[f64]) -> Result<usize> {
    let mut hot = None;
    for (j, &v) in row.iter().enumerate() {
        if v == 1.0 {
            if hot.is_some() {
                return Err(Error::InvalidArgument("target row has several hot entries".into()));
            }
            hot = Some(j);
        } else if v != 0.0 {
            return Err(Error::InvalidArgument(format!(
                "cross-entropy target entry {v} is not 0 or 1"
            )));
        }
    }
    hot.ok_or_else(|| Error::InvalidArgument("target row has no hot entry".into()))
}

/// One-hot encodes class indices.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor2> {
    let mut t = Tensor2::zeros(labels.len(), classes);
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::InvalidArgument(format!("label {y} ≥ {classes} classes")));
        }
        t.set(i, y, 1.0);
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_of_identical_is_zero() {
        let x = Tensor2::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let (v, g) = loss_eval(LossKind::Mse, &x, &x).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.data().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn cross_entropy_perfect_prediction() {
        let y = one_hot(&[0, 2, 1], 3).unwrap();
        let (v, g) = loss_eval(LossKind::CrossEntropy, &y, &y).unwrap();
        assert!(v.abs() < 1e-12);
        assert!(g.data().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn cross_entropy_rejects_soft_targets() {
        let p = Tensor2::new(1, 2, vec![0.5, 0.5]).unwrap();
        assert!(loss_eval(LossKind::CrossEntropy, &p, &p).is_err());
        let two_hot = Tensor2::new(1, 2, vec![1.0, 1.0]).unwrap();
        assert!(loss_eval(LossKind::CrossEntropy, &p, &two_hot).is_err());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = Tensor2::zeros(2, 2);
        let b = Tensor2::zeros(2, 3);
        assert!(matches!(loss_eval(LossKind::Mse, &a, &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn mse_gradient_matches_finite_differences() {
        let p = Tensor2::new(2, 3, vec![0.3, -0.2, 0.9, 0.05, 0.4, -0.7]).unwrap();
        let t = Tensor2::new(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let (_, g) = loss_eval(LossKind::Mse, &p, &t).unwrap();
        let h = 1e-6;
        for k in 0..6 {
            let mut plus = p.clone();
            plus.data_mut()[k] += h;
            let mut minus = p.clone();
            minus.data_mut()[k] -= h;
            let fd = (loss_eval(LossKind::Mse, &plus, &t).unwrap().0
                - loss_eval(LossKind::Mse, &minus, &t).unwrap().0)
                / (2.0 * h);
            let rel = (fd - g.data()[k]).abs() / g.data()[k].abs().max(1e-12);
            assert!(rel < 1e-6, "entry {k}: fd {fd} vs {}", g.data()[k]);
        }
    }
}
