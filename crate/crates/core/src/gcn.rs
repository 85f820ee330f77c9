//! Graph convolution over the geography graph with a flow-similarity
//! kernel.
//!
//! Proximity alone is a poor guide to which cities behave alike, so the
//! convolution kernel blends two signals per edge: a distance decay
//! (scaled by the graph threshold) and a similarity bracket comparing
//! the endpoint cities' current in/out flow patterns. A strict per-pair
//! discrepancy metric over equidistant third cities is also provided
//! for analysis; the relaxed matrix kernel is the training path.

use crate::error::{Error, Result};
use crate::flow::FlowSeries;
use crate::geo::{DistanceMatrix, GeographyGraph};
use crate::gravity::{add_bias, init_uniform};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Comparison set selection for [`flow_discrepancy`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ComparisonMode {
    /// Third cities exactly equidistant from both endpoints.
    Strict,
    /// Third cities whose distances to the endpoints differ by less
    /// than `tau_km`.
    Relaxed { tau_km: f64 },
}

/// Root-mean discrepancy between two cities' flow histories against a
/// comparison set of third cities.
///
/// For each `k` in the set, compares the historical vectors `k -> u`
/// vs `k -> v` and `u -> k` vs `v -> k` by Euclidean norm; the result
/// is `sqrt(sum / (2 |K|))`. Zero for identical histories, symmetric
/// in `(u, v)`.
pub fn flow_discrepancy(
    series: &FlowSeries,
    distances: &DistanceMatrix,
    u: usize,
    v: usize,
    mode: ComparisonMode,
) -> Result<f64> {
    let n = series.num_cities();
    let members: Vec<usize> = (0..n)
        .filter(|&k| match mode {
            ComparisonMode::Strict => distances.get(u, k) == distances.get(v, k),
            ComparisonMode::Relaxed { tau_km } => {
                (distances.get(u, k) - distances.get(v, k)).abs() < tau_km
            }
        })
        .collect();
    if members.is_empty() {
        return Err(Error::EmptyComparisonSet { u, v });
    }
    let norm = |pick: &dyn Fn(&Tensor) -> (f64, f64)| -> f64 {
        series
            .matrices()
            .iter()
            .map(|m| {
                let (a, b) = pick(m);
                (a - b) * (a - b)
            })
            .sum::<f64>()
            .sqrt()
    };
    let mut acc = 0.0;
    for &k in &members {
        acc += norm(&|m| (m.get(k, u), m.get(k, v)));
        acc += norm(&|m| (m.get(u, k), m.get(v, k)));
    }
    Ok((acc / (2.0 * members.len() as f64)).sqrt())
}

/// Pairwise pattern comparison of two square matrices of order `N`:
/// `c[i][j] = 1 - sqrt(sum_k |a[i][k] - b[k][j]| / N)`, i.e. row `i` of
/// `a` against column `j` of `b`. Values can drop below zero for inputs
/// outside `[0, 1]`; no clamping is applied.
pub fn pattern_similarity(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = a.rows();
    if a.shape() != (n, n) || b.shape() != (n, n) {
        return Err(Error::ShapeMismatch {
            op: "pattern_similarity",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let mut out = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..n {
                s += (a.get(i, k) - b.get(k, j)).abs();
            }
            out.set(i, j, 1.0 - (s / n as f64).sqrt());
        }
    }
    Ok(out)
}

/// Per-step convolution kernel over the geography graph.
#[derive(Clone, Debug, PartialEq)]
pub struct MobilityKernel {
    matrix: Tensor,
}

impl MobilityKernel {
    pub fn as_tensor(&self) -> &Tensor {
        &self.matrix
    }

    pub fn order(&self) -> usize {
        self.matrix.rows()
    }
}

/// Edge weight matrix: `exp(-d/eps) / sqrt(deg_u * deg_v)` on edges,
/// zero elsewhere. The decay argument is the distance in units of the
/// graph threshold, so weights stay meaningful at any scale.
pub fn decay_weights(graph: &GeographyGraph, distances: &DistanceMatrix) -> Tensor {
    let n = graph.order();
    let mut w = Tensor::zeros(n, n);
    if graph.epsilon_km <= 0.0 {
        return w;
    }
    for u in 0..n {
        for v in 0..n {
            if graph.has_edge(u, v) {
                let decay = (-distances.get(u, v) / graph.epsilon_km).exp();
                let norm = ((graph.degree(u) * graph.degree(v)) as f64).sqrt();
                w.set(u, v, decay / norm);
            }
        }
    }
    w
}

/// Builds the step kernel from the step's flow matrix:
///
/// ```text
/// M = 1/2 * A (.) W (.) [ sim(I, I^T) + sim(I^T, I) ] + diag(1)
/// ```
///
/// where `(.)` is the elementwise product, `A` the adjacency mask, `W`
/// the decay weights, and `sim` the pattern similarity. The unit
/// diagonal keeps every city's own signal (isolated cities included)
/// alive through aggregation.
pub fn build_mobility_kernel(
    flow_t: &Tensor,
    graph: &GeographyGraph,
    distances: &DistanceMatrix,
) -> Result<MobilityKernel> {
    let n = graph.order();
    if flow_t.shape() != (n, n) || distances.order() != n {
        return Err(Error::ShapeMismatch {
            op: "build_mobility_kernel",
            lhs: flow_t.shape(),
            rhs: (n, n),
        });
    }
    let transposed = flow_t.transposed();
    let row_sim = pattern_similarity(flow_t, &transposed)?;
    let col_sim = pattern_similarity(&transposed, flow_t)?;
    let weights = decay_weights(graph, distances);

    let mut m = Tensor::zeros(n, n);
    for u in 0..n {
        for v in 0..n {
            if u == v {
                m.set(u, v, 1.0);
            } else if graph.has_edge(u, v) {
                let bracket = row_sim.get(u, v) + col_sim.get(u, v);
                m.set(u, v, 0.5 * weights.get(u, v) * bracket);
            }
        }
    }
    m.check_finite("build_mobility_kernel")?;
    Ok(MobilityKernel { matrix: m })
}

/// Symmetric-normalized adjacency with self-loops,
/// `D^-1/2 (A + I) D^-1/2`; the kernel of the plain convolution
/// variant.
pub fn normalized_adjacency(graph: &GeographyGraph) -> Tensor {
    let n = graph.order();
    let deg: Vec<f64> = (0..n).map(|u| graph.degree(u) as f64 + 1.0).collect();
    let mut out = Tensor::zeros(n, n);
    for u in 0..n {
        for v in 0..n {
            if u == v || graph.has_edge(u, v) {
                out.set(u, v, 1.0 / (deg[u] * deg[v]).sqrt());
            }
        }
    }
    out
}

/// One convolution layer: weight `in x out`, bias `1 x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct GcnLayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl GcnLayerParams {
    pub fn init<R: rand::Rng>(input_dim: usize, output_dim: usize, rng: &mut R) -> Self {
        GcnLayerParams {
            weight: init_uniform(input_dim, output_dim, rng),
            bias: Tensor::zeros(1, output_dim),
        }
    }
}

/// Tape handles for a layer stack.
#[derive(Clone, Debug)]
pub struct GcnLayerNodes {
    pub weight: NodeId,
    pub bias: NodeId,
}

impl GcnLayerNodes {
    pub fn register(tape: &mut Tape, layers: &[GcnLayerParams]) -> Vec<GcnLayerNodes> {
        layers
            .iter()
            .map(|l| GcnLayerNodes {
                weight: tape.param(l.weight.clone()),
                bias: tape.param(l.bias.clone()),
            })
            .collect()
    }
}

/// Runs the layer stack `H <- b + K * H * W` with a softplus between
/// layers (final layer linear). `kernel` is a constant node holding
/// either a mobility kernel or the normalized adjacency.
pub fn gcn_forward(
    tape: &mut Tape,
    kernel: NodeId,
    h_in: NodeId,
    layers: &[GcnLayerNodes],
    ones_col: NodeId,
) -> Result<NodeId> {
    let mut h = h_in;
    for (i, layer) in layers.iter().enumerate() {
        let agg = tape.matmul(kernel, h)?;
        let z = tape.matmul(agg, layer.weight)?;
        let z = add_bias(tape, z, layer.bias, ones_col)?;
        h = if i + 1 < layers.len() {
            tape.softplus(z)?
        } else {
            z
        };
    }
    Ok(h)
}
