//! Training objective: reconstruction plus two margin-based contrastive
//! regularizers.
//!
//! The contrastive terms exploit a monotonicity prior: a difference in
//! observed inflow (outflow) between two cities, or between two time
//! steps of one city, should agree in sign with the difference of the
//! fitted attraction (repulsion) intensities. Each violated pair pays
//! `max(0, -rho_i * rho_alpha + margin)` where `rho_i` is the data
//! difference and `rho_alpha` the fitted intensity difference.

use crate::config::{RunConfig, Variant};
use crate::error::Result;
use crate::flow::FlowSeries;
use crate::gravity::{flow_from_vars, CityVariables};
use crate::model::{forecast_vars, ModelNodes, PreparedData, StepEncodings};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// The margin hinge: `max(0, -rho_i * rho_alpha + margin)`.
pub fn contrastive_pair_loss(rho_i: f64, rho_alpha: f64, margin: f64) -> f64 {
    (-rho_i * rho_alpha + margin).max(0.0)
}

fn totals(series: &FlowSeries, t: usize, j: usize, inflow: bool, include_diagonal: bool) -> f64 {
    let m = series.matrix(t);
    let mut acc = 0.0;
    for k in 0..m.rows() {
        if !include_diagonal && k == j {
            continue;
        }
        acc += if inflow { m.get(k, j) } else { m.get(j, k) };
    }
    acc
}

/// Contrastive term for one city across two time steps: inflow
/// difference against attraction-intensity difference, plus outflow
/// difference against repulsion-intensity difference.
pub fn cross_time_loss(
    series: &FlowSeries,
    fitted: &[CityVariables],
    j: usize,
    t1: usize,
    t2: usize,
    cfg: &RunConfig,
) -> f64 {
    let diag = cfg.totals_include_diagonal;
    let d_in = totals(series, t1, j, true, diag) - totals(series, t2, j, true, diag);
    let d_out = totals(series, t1, j, false, diag) - totals(series, t2, j, false, diag);
    let d_ad = fitted[t1].alpha_delta[j] - fitted[t2].alpha_delta[j];
    let d_am = fitted[t1].alpha_mu[j] - fitted[t2].alpha_mu[j];
    contrastive_pair_loss(d_in, d_ad, cfg.margin_delta)
        + contrastive_pair_loss(d_out, d_am, cfg.margin_mu)
}

/// Contrastive term for one step across two cities.
pub fn cross_city_loss(
    series: &FlowSeries,
    fitted: &[CityVariables],
    j1: usize,
    j2: usize,
    t: usize,
    cfg: &RunConfig,
) -> f64 {
    let diag = cfg.totals_include_diagonal;
    let d_in = totals(series, t, j1, true, diag) - totals(series, t, j2, true, diag);
    let d_out = totals(series, t, j1, false, diag) - totals(series, t, j2, false, diag);
    let d_ad = fitted[t].alpha_delta[j1] - fitted[t].alpha_delta[j2];
    let d_am = fitted[t].alpha_mu[j1] - fitted[t].alpha_mu[j2];
    contrastive_pair_loss(d_in, d_ad, cfg.margin_delta)
        + contrastive_pair_loss(d_out, d_am, cfg.margin_mu)
}

/// Evaluated loss components; `total` is their exact sum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub cross_city: f64,
    pub cross_time: f64,
    pub total: f64,
}

/// Tape nodes of the assembled objective.
pub struct LossNodes {
    pub total: NodeId,
    pub reconstruction: NodeId,
    pub cross_city: NodeId,
    pub cross_time: NodeId,
}

pub fn breakdown(tape: &Tape, nodes: &LossNodes) -> LossBreakdown {
    let v = |id: NodeId| tape.value(id).scalar_value().unwrap();
    LossBreakdown {
        reconstruction: v(nodes.reconstruction),
        cross_city: v(nodes.cross_city),
        cross_time: v(nodes.cross_time),
        total: v(nodes.total),
    }
}

fn frobenius(tape: &mut Tape, diff: NodeId, squared: bool) -> Result<NodeId> {
    let sq = tape.square(diff)?;
    let s = tape.sum(sq)?;
    if squared {
        Ok(s)
    } else {
        tape.sqrt(s)
    }
}

fn add_fold(tape: &mut Tape, terms: &[NodeId]) -> Result<NodeId> {
    let mut acc = match terms.first() {
        Some(&id) => id,
        None => tape.constant(Tensor::zeros(1, 1)),
    };
    for &t in &terms[1.min(terms.len())..] {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

fn hinge_sum(tape: &mut Tape, product: NodeId, margin: f64) -> Result<NodeId> {
    let neg = tape.scale(product, -1.0)?;
    let shifted = tape.add_scalar(neg, margin)?;
    let hinge = tape.max_scalar(shifted, 0.0)?;
    tape.sum(hinge)
}

/// Signed pair-difference selector: row `p` of the result holds `+1` at
/// the pair's first index and `-1` at its second, so `S * x` lists
/// `x[i] - x[j]` for every pair.
fn pair_selector(pairs: &[(usize, usize)], n: usize) -> Tensor {
    let mut s = Tensor::zeros(pairs.len(), n);
    for (p, &(i, j)) in pairs.iter().enumerate() {
        s.set(p, i, 1.0);
        s.set(p, j, -1.0);
    }
    s
}

fn unordered_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            out.push((i, j));
        }
    }
    out
}

/// Assembles the full objective on the tape:
///
/// * reconstruction: Frobenius distance of the static composition at
///   every step, plus the one-step-ahead forecast composition at every
///   step with a full prior window (skipped for the static variant);
/// * cross-city: all unordered city pairs at every step;
/// * cross-time: all unordered step pairs for every city (or only
///   consecutive steps when configured).
///
/// Contrastive sums are scaled by `contrastive_weight`, divided by the
/// pair-term count when `contrastive_normalize` is set, and dropped
/// entirely for the no-contrastive variant.
pub fn build_total_loss(
    tape: &mut Tape,
    nodes: &ModelNodes,
    enc: &StepEncodings,
    prepared: &PreparedData,
    series: &FlowSeries,
    cfg: &RunConfig,
    variant: Variant,
) -> Result<LossNodes> {
    let steps = prepared.steps;
    let n = prepared.num_cities;

    // --- reconstruction -------------------------------------------------
    let mut recon_terms = Vec::with_capacity(2 * steps);
    for t in 0..steps {
        let flow = flow_from_vars(tape, enc.vars[t], nodes.dist_sq, nodes.ones_col)?;
        let target = tape.constant(series.matrix(t).clone());
        let diff = tape.sub(flow, target)?;
        recon_terms.push(frobenius(tape, diff, cfg.squared_norm)?);
    }
    if variant != Variant::Dhg && steps > cfg.window {
        let targets: Vec<usize> = (cfg.window..steps).collect();
        let fvars = forecast_vars(tape, nodes, enc, &targets, cfg, n)?;
        for (vars_node, &t) in fvars.iter().zip(targets.iter()) {
            let flow = flow_from_vars(tape, *vars_node, nodes.dist_sq, nodes.ones_col)?;
            let target = tape.constant(series.matrix(t).clone());
            let diff = tape.sub(flow, target)?;
            recon_terms.push(frobenius(tape, diff, cfg.squared_norm)?);
        }
    }
    let reconstruction = add_fold(tape, &recon_terms)?;

    // --- contrastive ----------------------------------------------------
    // Both sums are assembled with constant signed pair selectors: one
    // matmul produces every pairwise difference at once.
    let contrastive_on = cfg.contrastive && variant != Variant::Nc && cfg.contrastive_weight > 0.0;
    let (cross_city, cross_time) = if contrastive_on {
        let alpha_d_cols: Vec<NodeId> = (0..steps)
            .map(|t| tape.slice_cols(enc.vars[t], 0, 1))
            .collect::<Result<_>>()?;
        let alpha_m_cols: Vec<NodeId> = (0..steps)
            .map(|t| tape.slice_cols(enc.vars[t], 2, 3))
            .collect::<Result<_>>()?;
        // fitted intensities, cities x steps
        let alpha_d = tape.concat_cols(&alpha_d_cols)?;
        let alpha_m = tape.concat_cols(&alpha_m_cols)?;
        // observed totals, cities x steps
        let mut inflow = Tensor::zeros(n, steps);
        let mut outflow = Tensor::zeros(n, steps);
        for t in 0..steps {
            for c in 0..n {
                inflow.set(c, t, prepared.inflows[t].get(c, 0));
                outflow.set(c, t, prepared.outflows[t].get(c, 0));
            }
        }

        // cross-city: city-pair differences within each step
        let city_pairs = unordered_pairs(n);
        let sel = pair_selector(&city_pairs, n);
        let sel_node = tape.constant(sel.clone());
        let d_in = tape.constant(sel.matmul(&inflow)?);
        let d_out = tape.constant(sel.matmul(&outflow)?);
        let d_ad = tape.matmul(sel_node, alpha_d)?;
        let d_am = tape.matmul(sel_node, alpha_m)?;
        let prod_d = tape.mul(d_ad, d_in)?;
        let prod_m = tape.mul(d_am, d_out)?;
        let cc_d = hinge_sum(tape, prod_d, cfg.margin_delta)?;
        let cc_m = hinge_sum(tape, prod_m, cfg.margin_mu)?;
        let cc_sum = tape.add(cc_d, cc_m)?;
        let cc_count = steps * city_pairs.len();

        // cross-time: step-pair differences per city
        let step_pairs: Vec<(usize, usize)> = if cfg.consecutive_pairs_only {
            (0..steps.saturating_sub(1)).map(|t| (t, t + 1)).collect()
        } else {
            unordered_pairs(steps)
        };
        let ct_count = step_pairs.len() * n;
        let tsel = pair_selector(&step_pairs, steps).transposed();
        let tsel_node = tape.constant(tsel.clone());
        let d_in = tape.constant(inflow.matmul(&tsel)?);
        let d_out = tape.constant(outflow.matmul(&tsel)?);
        let d_ad = tape.matmul(alpha_d, tsel_node)?;
        let d_am = tape.matmul(alpha_m, tsel_node)?;
        let prod_d = tape.mul(d_ad, d_in)?;
        let prod_m = tape.mul(d_am, d_out)?;
        let ct_d = hinge_sum(tape, prod_d, cfg.margin_delta)?;
        let ct_m = hinge_sum(tape, prod_m, cfg.margin_mu)?;
        let ct_sum = tape.add(ct_d, ct_m)?;

        let weight = |count: usize| {
            if cfg.contrastive_normalize {
                cfg.contrastive_weight / count.max(1) as f64
            } else {
                cfg.contrastive_weight
            }
        };
        (
            tape.scale(cc_sum, weight(cc_count))?,
            tape.scale(ct_sum, weight(ct_count))?,
        )
    } else {
        (
            tape.constant(Tensor::zeros(1, 1)),
            tape.constant(Tensor::zeros(1, 1)),
        )
    };

    let partial = tape.add(reconstruction, cross_city)?;
    let total = tape.add(partial, cross_time)?;
    Ok(LossNodes {
        total,
        reconstruction,
        cross_city,
        cross_time,
    })
}
