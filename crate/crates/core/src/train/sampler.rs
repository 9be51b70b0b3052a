//! Query batches and Gaussian-neighbourhood sensor subsets.

use rand::seq::index;
use rand::Rng as _;

use crate::config::Rng;
use crate::error::{Error, Result};
use crate::geo::SphericalCoord;

/// `b` distinct positions drawn uniformly from `0..n`.
pub fn sample_query_batch(n: usize, b: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::data("cannot sample queries from an empty training split"));
    }
    if b > n {
        return Err(Error::Config(format!("batch size {b} exceeds the {n} available queries")));
    }
    Ok(index::sample(rng, n, b).into_vec())
}

/// Draws up to `n` candidates without replacement, each with weight
/// `exp(-d²/2σ²)` where `d` is the chord distance to `query`.
///
/// Implemented as Gumbel-top-k on the log weights, which has the same
/// distribution as drawing one candidate at a time and renormalizing.
/// Returns positions into `candidates`, in draw order. With fewer than `n`
/// candidates all of them are returned.
pub fn sample_nearby_sensors(
    query: &SphericalCoord,
    candidates: &[SphericalCoord],
    n: usize,
    sigma: f64,
    rng: &mut Rng,
) -> Vec<usize> {
    let two_s2 = 2.0 * sigma * sigma;
    let mut keyed: Vec<(f64, usize)> = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let d = query.chord_distance(c);
            let logw = -d * d / two_s2;
            // u in (0, 1]
            let u: f64 = 1.0 - rng.gen::<f64>();
            let gumbel = -(-u.ln()).ln();
            (logw + gumbel, i)
        })
        .collect();
    if n < keyed.len() {
        keyed.select_nth_unstable_by(n, |a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        keyed.truncate(n);
    }
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|(_, i)| i).collect()
}
