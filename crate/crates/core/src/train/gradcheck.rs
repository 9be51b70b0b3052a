//! Finite-difference check of the analytic gradient of the training loss.

use rand::seq::index;

use crate::config::Rng;
use crate::error::{Error, Result};
use crate::model::{Network, Scalar, Token};

use super::loss::{compute_loss, loss_weights};

/// Differences smaller than this are measured against it rather than the
/// gradient magnitude.
pub const GRAD_FLOOR: f64 = 1e-6;
const STEP: f64 = 1e-4;

/// One loss example: sensor tokens, query token, scaled target.
pub type LossExample = (Vec<Token>, Token, f64);

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Parameter index with the largest error.
    pub worst: usize,
    pub analytic: f64,
    pub numeric: f64,
}

pub fn batch_loss(net: &Network, params: &[f64], examples: &[LossExample]) -> Result<f64> {
    let mut preds = Vec::with_capacity(examples.len());
    for (s, q, _) in examples {
        preds.push(net.forward(params, s, q)?);
    }
    let targets: Vec<f64> = examples.iter().map(|e| e.2).collect();
    let sizes: Vec<usize> = examples.iter().map(|e| e.0.len()).collect();
    compute_loss(&preds, &targets, &sizes)
}

/// Analytic gradient of [`batch_loss`], computed in `T`.
pub fn batch_loss_gradient<T: Scalar>(net: &Network, params: &[f64], examples: &[LossExample]) -> Result<Vec<f64>> {
    let sizes: Vec<usize> = examples.iter().map(|e| e.0.len()).collect();
    let w = loss_weights(&sizes)?;
    let b = examples.len() as f64;
    let p: Vec<T> = params.iter().map(|&x| T::c(x)).collect();
    let mut g = vec![T::zero(); params.len()];
    for ((s, q, t), w) in examples.iter().zip(w) {
        let coef = T::c(2.0 * w / b);
        let t = T::c(*t);
        net.backprop_output(&p, &mut g, s, q, |y| coef * (y - t))?;
    }
    Ok(g.into_iter().map(Scalar::f64).collect())
}

/// Compares the analytic gradient, computed in `T`, with a five-point
/// central difference of the f64 loss on `n_weights` distinct random
/// parameters.
pub fn gradient_check<T: Scalar>(
    net: &Network,
    params: &[f64],
    examples: &[LossExample],
    n_weights: usize,
    rng: &mut Rng,
) -> Result<GradCheckReport> {
    if n_weights > params.len() {
        return Err(Error::domain(format!("{n_weights} weights requested from {}", params.len())));
    }
    let g = batch_loss_gradient::<T>(net, params, examples)?;
    let mut p = params.to_vec();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for i in index::sample(rng, params.len(), n_weights) {
        let mut at = |d: f64| -> Result<f64> {
            p[i] = params[i] + d;
            batch_loss(net, &p, examples)
        };
        let (f2, f1, b1, b2) = (at(2.0 * STEP)?, at(STEP)?, at(-STEP)?, at(-2.0 * STEP)?);
        p[i] = params[i];
        let numeric = (-f2 + 8.0 * f1 - 8.0 * b1 + b2) / (12.0 * STEP);
        let err = (g[i] - numeric).abs() / g[i].abs().max(numeric.abs()).max(GRAD_FLOOR);
        report.checked += 1;
        if err >= report.max_rel_error {
            report = GradCheckReport {
                max_rel_error: err,
                worst: i,
                analytic: g[i],
                numeric,
                ..report
            };
        }
    }
    Ok(report)
}
