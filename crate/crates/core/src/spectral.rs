//! Singular values of small dense matrices.
//!
//! One-sided Jacobi: repeatedly rotate column pairs of a working copy
//! until all columns are mutually orthogonal; the singular values are
//! then the column norms. Deterministic, accurate to near machine
//! precision, and entirely adequate at the matrix orders used here.

use crate::tensor::Tensor;

const MAX_SWEEPS: usize = 60;
const ORTHO_TOL: f64 = 1e-14;

/// Singular values of `a`, sorted descending. All values non-negative.
pub fn singular_values(a: &Tensor) -> Vec<f64> {
    let m = a.rows();
    let n = a.cols();
    // Work on the tall orientation so columns are the short dimension.
    let mut work: Vec<Vec<f64>> = if m >= n {
        (0..n)
            .map(|j| (0..m).map(|i| a.get(i, j)).collect())
            .collect()
    } else {
        (0..m).map(|i| a.row(i).to_vec()).collect()
    };
    let cols = work.len();

    for _ in 0..MAX_SWEEPS {
        let mut max_off = 0.0_f64;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let (mut app, mut aqq, mut apq) = (0.0, 0.0, 0.0);
                for (vp, vq) in work[p].iter().zip(work[q].iter()) {
                    app += vp * vp;
                    aqq += vq * vq;
                    apq += vp * vq;
                }
                if app * aqq == 0.0 {
                    continue;
                }
                let off = apq.abs() / (app * aqq).sqrt();
                max_off = max_off.max(off);
                if off < ORTHO_TOL {
                    continue;
                }
                // Jacobi rotation that zeroes the (p, q) inner product.
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..work[p].len() {
                    let vp = work[p][i];
                    let vq = work[q][i];
                    work[p][i] = c * vp - s * vq;
                    work[q][i] = s * vp + c * vq;
                }
            }
        }
        if max_off < ORTHO_TOL {
            break;
        }
    }

    let mut sv: Vec<f64> = work
        .iter()
        .map(|col| col.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sv
}
