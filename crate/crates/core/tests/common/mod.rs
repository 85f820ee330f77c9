//! Shared test support: independent straight-loop oracles and central
//! finite-difference gradient checking.
//!
//! Everything here is deliberately written as plain nested loops over
//! `f64` slices, independent of the tape/vectorized implementation
//! paths it is used to verify.

#![allow(dead_code)]

use odflow_core::config::{FeatureMode, RunConfig, Variant};
use odflow_core::flow::FlowSeries;
use odflow_core::geo::{haversine_km, CitySet};
use odflow_core::gravity::{CityVariables, SIGMA_OUTPUT_SCALE, VAR_FLOOR};
use odflow_core::model::ModelState;
use odflow_core::seq::{BasisMatrix, BlockKind};
use odflow_core::spectral::singular_values;
use odflow_core::tensor::Tensor;

use rand::rngs::StdRng;
use rand::Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn mat_of(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

// ---------------------------------------------------------------------------
// Straight-loop oracles
// ---------------------------------------------------------------------------

/// `c[i][j] = 1 - sqrt(sum_k |a[i][k] - b[k][j]| / n)`.
pub fn naive_pattern_similarity(a: &Mat, b: &Mat) -> Mat {
    let n = a.len();
    let mut c = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += (a[i][k] - b[k][j]).abs();
            }
            c[i][j] = 1.0 - (acc / n as f64).sqrt();
        }
    }
    c
}

/// Pairwise distances in kilometers, straight from the coordinates.
pub fn naive_distances(cities: &CitySet) -> Mat {
    let n = cities.len();
    let mut d = vec![vec![0.0; n]; n];
    for u in 0..n {
        for v in 0..n {
            let a = cities.get(u).unwrap();
            let b = cities.get(v).unwrap();
            d[u][v] = haversine_km((a.lat, a.lon), (b.lat, b.lon)).unwrap();
        }
    }
    d
}

/// Four-loop kernel oracle: adjacency, degrees, decay weights, and the
/// similarity bracket all re-derived per entry.
pub fn naive_kernel(flow: &Mat, dist: &Mat, epsilon_km: f64) -> Mat {
    let n = flow.len();
    let adj = |u: usize, v: usize| u != v && dist[u][v] <= epsilon_km;
    let degree = |u: usize| (0..n).filter(|&v| adj(u, v)).count() as f64;

    let mut m = vec![vec![0.0; n]; n];
    for u in 0..n {
        for v in 0..n {
            if u == v {
                m[u][v] = 1.0;
                continue;
            }
            if !adj(u, v) {
                continue;
            }
            // row-vs-row and column-vs-column similarity of the flows
            let mut row_acc = 0.0;
            let mut col_acc = 0.0;
            for k in 0..n {
                row_acc += (flow[u][k] - flow[v][k]).abs();
                col_acc += (flow[k][u] - flow[k][v]).abs();
            }
            let bracket = (1.0 - (row_acc / n as f64).sqrt()) + (1.0 - (col_acc / n as f64).sqrt());
            let decay = (-dist[u][v] / epsilon_km).exp();
            let norm = (degree(u) * degree(v)).sqrt();
            m[u][v] = 0.5 * (decay / norm) * bracket;
        }
    }
    m
}

/// Two-loop flow composition oracle.
pub fn naive_armf(vars: &CityVariables, dist: &Mat) -> Mat {
    let n = vars.len();
    let mut out = vec![vec![0.0; n]; n];
    for src in 0..n {
        for tgt in 0..n {
            let d = dist[src][tgt];
            let expo = -d * d
                * (vars.sigma_delta[tgt] * vars.sigma_delta[tgt]
                    + vars.sigma_mu[src] * vars.sigma_mu[src]);
            out[src][tgt] = vars.alpha_delta[tgt] * vars.alpha_mu[src] * expo.exp();
        }
    }
    out
}

fn naive_matmul(a: &Mat, b: &Mat) -> Mat {
    let m = a.len();
    let k = b.len();
    let n = b[0].len();
    let mut out = vec![vec![0.0; n]; m];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i][p] * b[p][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn naive_positive(raw: &Mat) -> Mat {
    raw.iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .map(|(j, &x)| {
                    let v = softplus(x) + VAR_FLOOR;
                    if j == 1 || j == 3 {
                        v * SIGMA_OUTPUT_SCALE
                    } else {
                        v
                    }
                })
                .collect()
        })
        .collect()
}

fn naive_head(state: &ModelState, h: &Mat) -> Mat {
    let w1 = mat_of(&state.head.w1);
    let b1 = mat_of(&state.head.b1);
    let w2 = mat_of(&state.head.w2);
    let b2 = mat_of(&state.head.b2);
    let mut a1 = naive_matmul(h, &w1);
    for row in a1.iter_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = softplus(*v + b1[0][j]);
        }
    }
    let mut raw = naive_matmul(&a1, &w2);
    for row in raw.iter_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v += b2[0][j];
        }
    }
    raw
}

fn naive_gcn(state: &ModelState, kernel: &Mat, embed: &Mat) -> Mat {
    let mut h = embed.clone();
    let layer_count = state.gcn_layers.len();
    for (li, layer) in state.gcn_layers.iter().enumerate() {
        let w = mat_of(&layer.weight);
        let b = mat_of(&layer.bias);
        let agg = naive_matmul(kernel, &h);
        let mut z = naive_matmul(&agg, &w);
        for row in z.iter_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v += b[0][j];
                if li + 1 < layer_count {
                    *v = softplus(*v);
                }
            }
        }
        h = z;
    }
    h
}

/// Fixed basis matrices recomputed from the closed forms.
fn naive_basis(kind: BlockKind, coeffs: usize, len: usize) -> Mat {
    let mut out = vec![vec![0.0; len]; coeffs];
    match kind {
        BlockKind::Trend => {
            for (p, row) in out.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = (j as f64 / len as f64).powi(p as i32);
                }
            }
        }
        BlockKind::Seasonality => {
            for (r, row) in out.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    let t = j as f64 / len as f64;
                    *v = if r == 0 {
                        1.0
                    } else {
                        let k = (r + 1) / 2;
                        let arg = std::f64::consts::TAU * k as f64 * t;
                        if r % 2 == 1 {
                            arg.cos()
                        } else {
                            arg.sin()
                        }
                    };
                }
            }
        }
        BlockKind::Generic => unreachable!("generic basis is learned"),
    }
    out
}

/// Straight-loop stack evaluation on a channel matrix.
fn naive_nbeats(state: &ModelState, x: &Mat) -> Mat {
    let rows = x.len();
    let window = state.nbeats.backcast_len;
    let mut residual = x.clone();
    let mut forecast = vec![vec![0.0; state.nbeats.forecast_len]; rows];
    for block in &state.nbeats.blocks {
        let w1 = mat_of(&block.w1);
        let b1 = mat_of(&block.b1);
        let w2 = mat_of(&block.w2);
        let b2 = mat_of(&block.b2);
        let tb = mat_of(&block.theta_backcast);
        let tf = mat_of(&block.theta_forecast);
        let bb = match &block.basis_backcast {
            BasisMatrix::Learned(t) => mat_of(t),
            BasisMatrix::Fixed(_) => naive_basis(block.kind, tb[0].len(), window),
        };
        let bf = match &block.basis_forecast {
            BasisMatrix::Learned(t) => mat_of(t),
            BasisMatrix::Fixed(_) => naive_basis(block.kind, tf[0].len(), state.nbeats.forecast_len),
        };

        let mut h = naive_matmul(&residual, &w1);
        for row in h.iter_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v + b1[0][j]).max(0.0);
            }
        }
        let mut h2 = naive_matmul(&h, &w2);
        for row in h2.iter_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v + b2[0][j]).max(0.0);
            }
        }
        let coeff_b = naive_matmul(&h2, &tb);
        let coeff_f = naive_matmul(&h2, &tf);
        let backcast = naive_matmul(&coeff_b, &bb);
        let fcast = naive_matmul(&coeff_f, &bf);
        for i in 0..rows {
            for j in 0..window {
                residual[i][j] -= backcast[i][j];
            }
            for j in 0..state.nbeats.forecast_len {
                forecast[i][j] += fcast[i][j];
            }
        }
    }
    forecast
}

fn frob(diff: &Mat, squared: bool) -> f64 {
    let s: f64 = diff.iter().flatten().map(|v| v * v).sum();
    if squared {
        s
    } else {
        s.sqrt()
    }
}

fn hinge(rho_i: f64, rho_a: f64, margin: f64) -> f64 {
    (-rho_i * rho_a + margin).max(0.0)
}

/// Full objective re-evaluated with plain loops: static reconstruction
/// at every step, forecast reconstruction for steps with a full prior
/// window, and both contrastive sums. Mirrors the documented pipeline,
/// not the tape code.
pub fn naive_total_loss(
    state: &ModelState,
    series: &FlowSeries,
    cities: &CitySet,
    variant: Variant,
) -> f64 {
    let cfg = &state.config;
    let n = cities.len();
    let steps = series.steps();
    let dist = naive_distances(cities);
    let flows: Vec<Mat> = (0..steps).map(|t| mat_of(series.matrix(t))).collect();
    let embed = mat_of(&state.embed);

    // per-step kernels and encodings
    let mut raw_vars: Vec<Mat> = Vec::with_capacity(steps);
    for flow in &flows {
        let h = match variant {
            Variant::Sil => naive_summaries(flow),
            Variant::GcnSil => {
                let a = naive_normalized_adjacency(&dist, cfg.epsilon_km);
                naive_gcn(state, &a, &embed)
            }
            _ => {
                let kernel = naive_kernel(flow, &dist, cfg.epsilon_km);
                naive_gcn(state, &kernel, &embed)
            }
        };
        let h = match cfg.feature_mode {
            FeatureMode::Head => {
                let feats = naive_features(state, flow);
                h.iter()
                    .map(|row| {
                        let mut r = row.clone();
                        r.extend_from_slice(&feats);
                        r
                    })
                    .collect()
            }
            _ => h,
        };
        raw_vars.push(naive_head(state, &h));
    }
    let vars: Vec<Mat> = raw_vars.iter().map(|r| naive_positive(r)).collect();

    // reconstruction
    let mut total = 0.0;
    for t in 0..steps {
        let v = naive_vars_struct(&vars[t]);
        let composed = naive_armf(&v, &dist);
        let diff: Mat = (0..n)
            .map(|i| (0..n).map(|j| composed[i][j] - flows[t][i][j]).collect())
            .collect();
        total += frob(&diff, cfg.squared_norm);
    }
    if variant != Variant::Dhg && steps > cfg.window {
        for t in cfg.window..steps {
            // channel matrix: raw variable trajectories (+ features)
            let mut channels: Mat = Vec::new();
            for c in 0..n {
                for k in 0..4 {
                    let mut row = Vec::with_capacity(cfg.window);
                    for s in (t - cfg.window)..t {
                        row.push(raw_vars[s][c][k]);
                    }
                    channels.push(row);
                }
            }
            if cfg.feature_mode == FeatureMode::Channels {
                for fi in 0..2 * n {
                    let mut row = Vec::with_capacity(cfg.window);
                    for s in (t - cfg.window)..t {
                        row.push(naive_features(state, &flows[s])[fi]);
                    }
                    channels.push(row);
                }
            }
            let forecast = naive_nbeats(state, &channels);
            let mut raw = vec![vec![0.0; 4]; n];
            for c in 0..n {
                for k in 0..4 {
                    raw[c][k] = forecast[4 * c + k][0];
                }
            }
            let v = naive_vars_struct(&naive_positive(&raw));
            let composed = naive_armf(&v, &dist);
            let diff: Mat = (0..n)
                .map(|i| (0..n).map(|j| composed[i][j] - flows[t][i][j]).collect())
                .collect();
            total += frob(&diff, cfg.squared_norm);
        }
    }

    // contrastive sums
    if cfg.contrastive && variant != Variant::Nc && cfg.contrastive_weight > 0.0 {
        let inflow = |t: usize, j: usize| -> f64 {
            (0..n)
                .filter(|&k| cfg.totals_include_diagonal || k != j)
                .map(|k| flows[t][k][j])
                .sum()
        };
        let outflow = |t: usize, j: usize| -> f64 {
            (0..n)
                .filter(|&k| cfg.totals_include_diagonal || k != j)
                .map(|k| flows[t][j][k])
                .sum()
        };
        let mut cc = 0.0;
        for t in 0..steps {
            for j1 in 0..n {
                for j2 in (j1 + 1)..n {
                    cc += hinge(
                        inflow(t, j1) - inflow(t, j2),
                        vars[t][j1][0] - vars[t][j2][0],
                        cfg.margin_delta,
                    );
                    cc += hinge(
                        outflow(t, j1) - outflow(t, j2),
                        vars[t][j1][2] - vars[t][j2][2],
                        cfg.margin_mu,
                    );
                }
            }
        }
        let mut ct = 0.0;
        let pairs: Vec<(usize, usize)> = if cfg.consecutive_pairs_only {
            (0..steps - 1).map(|t| (t, t + 1)).collect()
        } else {
            let mut p = Vec::new();
            for t1 in 0..steps {
                for t2 in (t1 + 1)..steps {
                    p.push((t1, t2));
                }
            }
            p
        };
        for &(t1, t2) in &pairs {
            for j in 0..n {
                ct += hinge(
                    inflow(t1, j) - inflow(t2, j),
                    vars[t1][j][0] - vars[t2][j][0],
                    cfg.margin_delta,
                );
                ct += hinge(
                    outflow(t1, j) - outflow(t2, j),
                    vars[t1][j][2] - vars[t2][j][2],
                    cfg.margin_mu,
                );
            }
        }
        let cc_count = steps * n * (n - 1) / 2;
        let ct_count = pairs.len() * n;
        let weight = |count: usize| {
            if cfg.contrastive_normalize {
                cfg.contrastive_weight / count.max(1) as f64
            } else {
                cfg.contrastive_weight
            }
        };
        total += cc * weight(cc_count) + ct * weight(ct_count);
    }

    total
}

fn naive_vars_struct(vars: &Mat) -> CityVariables {
    CityVariables::new(
        vars.iter().map(|r| r[0]).collect(),
        vars.iter().map(|r| r[1]).collect(),
        vars.iter().map(|r| r[2]).collect(),
        vars.iter().map(|r| r[3]).collect(),
    )
    .expect("positive variables")
}

fn naive_features(state: &ModelState, flow: &Mat) -> Vec<f64> {
    let n = flow.len();
    let w = mat_of(&state.compress.weight);
    let b = mat_of(&state.compress.bias);
    let mut compressed = vec![0.0; n];
    for (o, slot) in compressed.iter_mut().enumerate() {
        let mut acc = b[0][o];
        for i in 0..n {
            for j in 0..n {
                acc += flow[i][j] * w[i * n + j][o];
            }
        }
        *slot = acc;
    }
    let tensor = Tensor::new(n, n, flow.iter().flatten().copied().collect()).unwrap();
    compressed.extend(singular_values(&tensor));
    compressed
}

fn naive_summaries(flow: &Mat) -> Mat {
    let n = flow.len();
    let mut out = vec![vec![0.0; 8]; n];
    for c in 0..n {
        let inflow: f64 = (0..n).map(|k| flow[k][c]).sum();
        let outflow: f64 = flow[c].iter().sum();
        let max_in = (0..n).map(|k| flow[k][c]).fold(0.0, f64::max);
        let max_out = flow[c].iter().copied().fold(0.0, f64::max);
        let selfflow = flow[c][c];
        let nonself = (n - 1).max(1) as f64;
        out[c] = vec![
            inflow,
            outflow,
            selfflow,
            max_in,
            max_out,
            (inflow - selfflow) / nonself,
            (outflow - selfflow) / nonself,
            inflow - outflow,
        ];
    }
    out
}

fn naive_normalized_adjacency(dist: &Mat, epsilon_km: f64) -> Mat {
    let n = dist.len();
    let adj = |u: usize, v: usize| u != v && dist[u][v] <= epsilon_km;
    let deg = |u: usize| (0..n).filter(|&v| adj(u, v)).count() as f64 + 1.0;
    let mut out = vec![vec![0.0; n]; n];
    for u in 0..n {
        for v in 0..n {
            if u == v || adj(u, v) {
                out[u][v] = 1.0 / (deg(u) * deg(v)).sqrt();
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

pub const FD_STEP: f64 = 1e-6;
pub const FD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, Default)]
pub struct GradCheck {
    pub checked: usize,
    /// Samples dropped because the probe straddled a kink.
    pub skipped: usize,
    pub max_rel_err: f64,
}

impl GradCheck {
    pub fn merge(&mut self, other: GradCheck) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
    }

    pub fn passes(&self) -> bool {
        // the vast majority of samples must land on smooth stretches
        self.checked > 0
            && self.max_rel_err < FD_TOLERANCE
            && self.skipped * 5 <= self.checked
    }
}

/// Central finite differences against analytic gradients on randomly
/// sampled coordinates (up to `samples` per parameter tensor).
///
/// The objective is only piecewise smooth (hinges, rectified trunks),
/// so each sample is probed at steps `h` and `h/2`: on a smooth stretch
/// the two estimates agree to O(h^2), while a kink between the probe
/// points makes them disagree. Kink-straddling samples are skipped —
/// a genuinely wrong analytic gradient would still disagree with the
/// h-consistent estimates, so skipping cannot mask a bug.
pub fn check_gradients(
    params: &[Tensor],
    grads: &[Tensor],
    eval: &dyn Fn(&[Tensor]) -> f64,
    samples: usize,
    rng: &mut StdRng,
) -> GradCheck {
    assert_eq!(params.len(), grads.len());
    let mut report = GradCheck::default();
    for (pi, param) in params.iter().enumerate() {
        let len = param.len();
        for _ in 0..samples.min(len) {
            let idx = rng.random_range(0..len);
            let analytic = grads[pi].data()[idx];

            let fd_at = |h: f64| -> f64 {
                let mut plus = params.to_vec();
                let mut data = plus[pi].data().to_vec();
                data[idx] += h;
                plus[pi] = Tensor::new(plus[pi].rows(), plus[pi].cols(), data).unwrap();

                let mut minus = params.to_vec();
                let mut data = minus[pi].data().to_vec();
                data[idx] -= h;
                minus[pi] = Tensor::new(minus[pi].rows(), minus[pi].cols(), data).unwrap();

                (eval(&plus) - eval(&minus)) / (2.0 * h)
            };
            let fd_full = fd_at(FD_STEP);
            let fd_half = fd_at(FD_STEP / 2.0);
            let consistency = (fd_full - fd_half).abs()
                / fd_full.abs().max(fd_half.abs()).max(1e-2);
            if consistency > 3e-5 {
                report.skipped += 1;
                continue;
            }

            let rel = (analytic - fd_half).abs() / analytic.abs().max(fd_half.abs()).max(1.0);
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(rel);
        }
    }
    report
}

pub mod paths;
