//! Subset-size weighted squared error in log space.

use crate::error::{Error, Result};

/// Per-example weights `w_i ∝ 1/n_i`, normalized so that `Σ w_i = B`.
///
/// Examples encoded from few sensors get more weight, so the loss does not
/// favour large subsets.
pub fn loss_weights(sizes: &[usize]) -> Result<Vec<f64>> {
    if sizes.is_empty() {
        return Err(Error::domain("loss weights of an empty batch"));
    }
    if sizes.contains(&0) {
        return Err(Error::domain("an example has an empty sensor subset"));
    }
    let inv: Vec<f64> = sizes.iter().map(|&n| 1.0 / n as f64).collect();
    let mean = inv.iter().sum::<f64>() / inv.len() as f64;
    Ok(inv.into_iter().map(|w| w / mean).collect())
}

/// `L = (1/B) Σ w_i (ŷ_i − y_i)²` with weights from [`loss_weights`].
pub fn compute_loss(predictions: &[f64], targets: &[f64], sizes: &[usize]) -> Result<f64> {
    if predictions.len() != targets.len() || predictions.len() != sizes.len() {
        return Err(Error::Shape(format!(
            "{} predictions, {} targets, {} subset sizes",
            predictions.len(),
            targets.len(),
            sizes.len()
        )));
    }
    if let Some(p) = predictions.iter().find(|p| !p.is_finite()) {
        return Err(Error::NonFinite(format!("prediction {p}")));
    }
    if let Some(t) = targets.iter().find(|t| !t.is_finite()) {
        return Err(Error::NonFinite(format!("target {t}")));
    }
    let w = loss_weights(sizes)?;
    let b = predictions.len() as f64;
    Ok(predictions
        .iter()
        .zip(targets)
        .zip(&w)
        .map(|((p, t), w)| w * (p - t) * (p - t))
        .sum::<f64>()
        / b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn two_sizes_example() {
        let w = loss_weights(&[8, 16]).unwrap();
        assert_relative_eq!(w[0], 4.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(w[1], 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn equal_sizes_reduce_to_mse() {
        let l = compute_loss(&[1.0, 2.0, 4.0], &[0.0, 2.0, 2.0], &[5, 5, 5]).unwrap();
        assert_relative_eq!(l, 5.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn nan_prediction_is_an_error() {
        assert!(matches!(
            compute_loss(&[f64::NAN], &[1.0], &[3]),
            Err(Error::NonFinite(_))
        ));
        assert!(compute_loss(&[1.0], &[1.0], &[0]).is_err());
        assert!(compute_loss(&[1.0, 2.0], &[1.0], &[1, 1]).is_err());
    }

    proptest! {
        #[test]
        fn weights_sum_to_batch(sizes in prop::collection::vec(1usize..200, 1..64)) {
            let w = loss_weights(&sizes).unwrap();
            let s: f64 = w.iter().sum();
            prop_assert!((s - sizes.len() as f64).abs() < 1e-9);
            for (i, j) in (0..sizes.len()).zip(1..sizes.len()) {
                // w_i n_i is constant
                prop_assert!((w[i] * sizes[i] as f64 - w[j] * sizes[j] as f64).abs() < 1e-9);
            }
        }

        #[test]
        fn loss_is_non_negative(
            pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, 1usize..32), 1..40)
        ) {
            let p: Vec<f64> = pairs.iter().map(|x| x.0).collect();
            let t: Vec<f64> = pairs.iter().map(|x| x.1).collect();
            let n: Vec<usize> = pairs.iter().map(|x| x.2).collect();
            prop_assert!(compute_loss(&p, &t, &n).unwrap() >= 0.0);
            prop_assert_eq!(compute_loss(&t, &t, &n).unwrap(), 0.0);
        }
    }
}
