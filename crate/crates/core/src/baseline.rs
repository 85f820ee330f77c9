//! Reference predictors: per-pair historical mean and per-pair linear
//! trend extrapolation.

use crate::error::{Error, Result};
use crate::flow::FlowSeries;
use crate::tensor::Tensor;

/// Per-pair mean over the whole history.
pub fn baseline_mean(series: &FlowSeries) -> Result<Tensor> {
    let t = series.steps();
    if t < 1 {
        return Err(Error::InsufficientHistory { needed: 1, got: t });
    }
    let n = series.num_cities();
    let mut out = Tensor::zeros(n, n);
    for m in series.matrices() {
        out = out.add(m)?;
    }
    Ok(out.scale(1.0 / t as f64))
}

/// Per-pair ordinary least squares on the step index, extrapolated one
/// step past the end of the series.
pub fn baseline_lr(series: &FlowSeries) -> Result<Tensor> {
    let t = series.steps();
    if t < 2 {
        return Err(Error::InsufficientHistory { needed: 2, got: t });
    }
    let n = series.num_cities();
    let tf = t as f64;
    // centered index regressor: x_i = i - (t-1)/2
    let x_mean = (tf - 1.0) / 2.0;
    let sxx: f64 = (0..t).map(|i| (i as f64 - x_mean) * (i as f64 - x_mean)).sum();
    let mut out = Tensor::zeros(n, n);
    for u in 0..n {
        for v in 0..n {
            let mut y_mean = 0.0;
            for m in series.matrices() {
                y_mean += m.get(u, v);
            }
            y_mean /= tf;
            let mut sxy = 0.0;
            for (i, m) in series.matrices().iter().enumerate() {
                sxy += (i as f64 - x_mean) * (m.get(u, v) - y_mean);
            }
            let slope = sxy / sxx;
            out.set(u, v, y_mean + slope * (tf - x_mean));
        }
    }
    Ok(out)
}
