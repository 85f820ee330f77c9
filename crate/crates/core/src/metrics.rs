//! Evaluation metrics and summary statistics.

use crate::error::{Error, Result};
use crate::gravity::CityVariables;
use crate::tensor::Tensor;

/// Mean absolute error and root mean square error over all entries.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
}

/// Entrywise MAE and RMSE between two same-shaped matrices.
pub fn evaluate(predicted: &Tensor, truth: &Tensor) -> Result<Metrics> {
    if predicted.shape() != truth.shape() {
        return Err(Error::ShapeMismatch {
            op: "evaluate",
            lhs: predicted.shape(),
            rhs: truth.shape(),
        });
    }
    let n = predicted.len() as f64;
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    for (p, t) in predicted.data().iter().zip(truth.data().iter()) {
        let e = p - t;
        abs_sum += e.abs();
        sq_sum += e * e;
    }
    Ok(Metrics {
        mae: abs_sum / n,
        rmse: (sq_sum / n).sqrt(),
    })
}

/// Pearson correlation; errors out when either variable is constant.
pub fn pearson(xs: &[f64], ys: &[f64], what: &'static str) -> Result<f64> {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys.iter()) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation { variable: what });
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Spearman rank correlation (average ranks on ties).
pub fn spearman(xs: &[f64], ys: &[f64], what: &'static str) -> Result<f64> {
    let rx = ranks(xs);
    let ry = ranks(ys);
    pearson(&rx, &ry, what)
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Population variance.
fn variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n
}

/// Per-variable mean temporal variance of a fitted variable history:
/// for each of the four variables, the temporal variance of each city's
/// trajectory, averaged over cities. Output order is
/// `[alpha_delta, sigma_delta, alpha_mu, sigma_mu]`.
pub fn variance_study(history: &[CityVariables]) -> [f64; 4] {
    assert!(history.len() >= 2, "variance study needs at least 2 steps");
    let cities = history[0].len();
    let mut out = [0.0; 4];
    for (slot, pick) in [
        |v: &CityVariables, c: usize| v.alpha_delta[c],
        |v: &CityVariables, c: usize| v.sigma_delta[c],
        |v: &CityVariables, c: usize| v.alpha_mu[c],
        |v: &CityVariables, c: usize| v.sigma_mu[c],
    ]
    .iter()
    .enumerate()
    {
        let mut acc = 0.0;
        for c in 0..cities {
            let series: Vec<f64> = history.iter().map(|v| pick(v, c)).collect();
            acc += variance(&series);
        }
        out[slot] = acc / cities as f64;
    }
    out
}
