//! Interpretable static flow model.
//!
//! Each city carries four positive variables: attraction intensity and
//! attenuation (how strongly it draws flows in, and how fast that pull
//! fades with distance) and repulsion intensity and attenuation (the
//! outbound counterparts). A pairwise flow is the product of the target
//! city's attraction and the source city's repulsion, both evaluated at
//! the pair distance with Gaussian decay:
//!
//! ```text
//! flow(src -> tgt) = a_d[tgt] * a_m[src] * exp(-d^2 * (s_d[tgt]^2 + s_m[src]^2))
//! ```
//!
//! Attenuations are in 1/km so `d * sigma` is dimensionless.

use std::io::{BufRead, BufReader, Read, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::geo::DistanceMatrix;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Floor added to the positive transform so variables stay away from 0.
pub const VAR_FLOOR: f64 = 1e-6;

/// Output scale for the attenuation columns of the head. Attenuations
/// are per-kilometer, so raw head outputs near 1 map to ~1e-3 per km.
pub const SIGMA_OUTPUT_SCALE: f64 = 1e-3;

/// Column order of the four variables in every `|C| x 4` layout.
pub const VAR_NAMES: [&str; 4] = ["alpha_delta", "sigma_delta", "alpha_mu", "sigma_mu"];

/// Per-city interpretable quadruple; all values strictly positive.
#[derive(Clone, Debug, PartialEq)]
pub struct CityVariables {
    pub alpha_delta: Vec<f64>,
    pub sigma_delta: Vec<f64>,
    pub alpha_mu: Vec<f64>,
    pub sigma_mu: Vec<f64>,
}

impl CityVariables {
    pub fn new(
        alpha_delta: Vec<f64>,
        sigma_delta: Vec<f64>,
        alpha_mu: Vec<f64>,
        sigma_mu: Vec<f64>,
    ) -> Result<Self> {
        let n = alpha_delta.len();
        let all = [&alpha_delta, &sigma_delta, &alpha_mu, &sigma_mu];
        for v in all {
            if v.len() != n {
                return Err(Error::ShapeMismatch {
                    op: "city_variables",
                    lhs: (n, 1),
                    rhs: (v.len(), 1),
                });
            }
            if v.iter().any(|&x| !x.is_finite() || x <= 0.0) {
                return Err(Error::NonFinite {
                    op: "city_variables",
                });
            }
        }
        Ok(CityVariables {
            alpha_delta,
            sigma_delta,
            alpha_mu,
            sigma_mu,
        })
    }

    pub fn constant(n: usize, ad: f64, sd: f64, am: f64, sm: f64) -> Self {
        CityVariables {
            alpha_delta: vec![ad; n],
            sigma_delta: vec![sd; n],
            alpha_mu: vec![am; n],
            sigma_mu: vec![sm; n],
        }
    }

    pub fn len(&self) -> usize {
        self.alpha_delta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha_delta.is_empty()
    }

    /// Packs into a `|C| x 4` tensor in [`VAR_NAMES`] column order.
    pub fn to_tensor(&self) -> Tensor {
        let n = self.len();
        let mut data = Vec::with_capacity(n * 4);
        for c in 0..n {
            data.push(self.alpha_delta[c]);
            data.push(self.sigma_delta[c]);
            data.push(self.alpha_mu[c]);
            data.push(self.sigma_mu[c]);
        }
        Tensor::from_parts(n, 4, data)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.cols() != 4 {
            return Err(Error::ShapeMismatch {
                op: "city_variables",
                lhs: t.shape(),
                rhs: (t.rows(), 4),
            });
        }
        let n = t.rows();
        let col = |j: usize| (0..n).map(|i| t.get(i, j)).collect::<Vec<f64>>();
        CityVariables::new(col(0), col(1), col(2), col(3))
    }
}

/// Attraction at distance `d`: `alpha * exp(-d^2 * sigma^2)`.
pub fn attraction_at(alpha: f64, sigma: f64, d: f64) -> f64 {
    alpha * (-d * d * sigma * sigma).exp()
}

/// Repulsion at distance `d`: same closed form as attraction.
pub fn repulsion_at(alpha: f64, sigma: f64, d: f64) -> f64 {
    alpha * (-d * d * sigma * sigma).exp()
}

/// Composes the full `|C| x |C|` flow matrix from city variables.
/// Entry `(src, tgt)` multiplies the target's attraction by the
/// source's repulsion; the diagonal uses distance zero.
pub fn flow_matrix(vars: &CityVariables, distances: &DistanceMatrix) -> Result<Tensor> {
    let n = vars.len();
    if distances.order() != n {
        return Err(Error::ShapeMismatch {
            op: "flow_matrix",
            lhs: (n, n),
            rhs: (distances.order(), distances.order()),
        });
    }
    let mut out = Tensor::zeros(n, n);
    for src in 0..n {
        for tgt in 0..n {
            let d = distances.get(src, tgt);
            let decay = -d * d
                * (vars.sigma_delta[tgt] * vars.sigma_delta[tgt]
                    + vars.sigma_mu[src] * vars.sigma_mu[src]);
            out.set(src, tgt, vars.alpha_delta[tgt] * vars.alpha_mu[src] * decay.exp());
        }
    }
    out.check_finite("flow_matrix")?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Learned head: city representation -> four raw variables
// ---------------------------------------------------------------------------

/// Two affine layers with one softplus in between; maps a per-city
/// representation row to 4 raw (unconstrained) outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl HeadParams {
    pub fn init<R: Rng>(input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        HeadParams {
            w1: init_uniform(input_dim, hidden, rng),
            b1: Tensor::zeros(1, hidden),
            w2: init_uniform(hidden, 4, rng),
            b2: Tensor::zeros(1, 4),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }
}

/// Glorot-style uniform init: bound `sqrt(6 / (fan_in + fan_out))`.
pub(crate) fn init_uniform<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::from_parts(rows, cols, data)
}

/// Wider uniform init for free inputs (embedding rows).
pub(crate) fn init_embedding<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-0.5..0.5))
        .collect();
    Tensor::from_parts(rows, cols, data)
}

/// Tape-side handles for the head parameters.
#[derive(Clone, Copy, Debug)]
pub struct HeadNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

impl HeadNodes {
    pub fn register(tape: &mut Tape, head: &HeadParams) -> Self {
        HeadNodes {
            w1: tape.param(head.w1.clone()),
            b1: tape.param(head.b1.clone()),
            w2: tape.param(head.w2.clone()),
            b2: tape.param(head.b2.clone()),
        }
    }
}

/// Broadcast-adds a `1 x k` bias to every row via `ones * bias`.
pub(crate) fn add_bias(tape: &mut Tape, x: NodeId, bias: NodeId, ones_col: NodeId) -> Result<NodeId> {
    let tiled = tape.matmul(ones_col, bias)?;
    tape.add(x, tiled)
}

/// Raw head outputs (`|C| x 4`, unconstrained).
pub fn head_raw_forward(
    tape: &mut Tape,
    h: NodeId,
    head: &HeadNodes,
    ones_col: NodeId,
) -> Result<NodeId> {
    let a1 = tape.matmul(h, head.w1)?;
    let a1 = add_bias(tape, a1, head.b1, ones_col)?;
    let a1 = tape.softplus(a1)?;
    let a2 = tape.matmul(a1, head.w2)?;
    add_bias(tape, a2, head.b2, ones_col)
}

/// Smooth positive transform from raw outputs to variables:
/// `softplus(x) + floor`, with the attenuation columns scaled to
/// per-kilometer units.
pub fn positive_transform(tape: &mut Tape, raw: NodeId) -> Result<NodeId> {
    let rows = tape.value(raw).rows();
    let sp = tape.softplus(raw)?;
    let floored = tape.add_scalar(sp, VAR_FLOOR)?;
    let scale = column_scale(rows);
    let scale_node = tape.constant(scale);
    tape.mul(floored, scale_node)
}

/// Plain (non-tape) counterpart of [`positive_transform`].
pub fn positive_transform_plain(raw: &Tensor) -> Tensor {
    let mut out = raw.map(|x| crate::tape::softplus(x) + VAR_FLOOR);
    for i in 0..out.rows() {
        let sd = out.get(i, 1) * SIGMA_OUTPUT_SCALE;
        let sm = out.get(i, 3) * SIGMA_OUTPUT_SCALE;
        out.set(i, 1, sd);
        out.set(i, 3, sm);
    }
    out
}

fn column_scale(rows: usize) -> Tensor {
    let mut t = Tensor::ones(rows, 4);
    for i in 0..rows {
        t.set(i, 1, SIGMA_OUTPUT_SCALE);
        t.set(i, 3, SIGMA_OUTPUT_SCALE);
    }
    t
}

/// Tape-side flow composition from a `|C| x 4` variable node.
///
/// `dist_sq` is the constant elementwise square of the distance matrix
/// and `ones_col` a constant `|C| x 1` column of ones.
pub fn flow_from_vars(
    tape: &mut Tape,
    vars: NodeId,
    dist_sq: NodeId,
    ones_col: NodeId,
) -> Result<NodeId> {
    let alpha_d = tape.slice_cols(vars, 0, 1)?;
    let sigma_d = tape.slice_cols(vars, 1, 2)?;
    let alpha_m = tape.slice_cols(vars, 2, 3)?;
    let sigma_m = tape.slice_cols(vars, 3, 4)?;

    // outer(alpha_m, alpha_d): entry (src, tgt) = a_m[src] * a_d[tgt]
    let alpha_d_row = tape.transpose(alpha_d)?;
    let intensity = tape.matmul(alpha_m, alpha_d_row)?;

    // sigma_d^2 broadcast along rows, sigma_m^2 along columns
    let sd2 = tape.square(sigma_d)?;
    let sm2 = tape.square(sigma_m)?;
    let sd2_row = tape.transpose(sd2)?;
    let sd2_mat = tape.matmul(ones_col, sd2_row)?;
    let ones_row = tape.transpose(ones_col)?;
    let sm2_mat = tape.matmul(sm2, ones_row)?;
    let sig_sum = tape.add(sd2_mat, sm2_mat)?;

    let expo = tape.mul(dist_sq, sig_sum)?;
    let neg = tape.scale(expo, -1.0)?;
    let decay = tape.exp(neg)?;
    tape.mul(intensity, decay)
}

// ---------------------------------------------------------------------------
// CSV schema: step,city_id,alpha_delta,sigma_delta,alpha_mu,sigma_mu
// ---------------------------------------------------------------------------

/// Writes per-step variables in the flat export schema.
pub fn variables_to_csv<W: Write>(
    mut w: W,
    labels: &[String],
    history: &[CityVariables],
) -> Result<()> {
    assert_eq!(labels.len(), history.len());
    writeln!(w, "step,city_id,alpha_delta,sigma_delta,alpha_mu,sigma_mu")?;
    for (label, vars) in labels.iter().zip(history.iter()) {
        for c in 0..vars.len() {
            writeln!(
                w,
                "{},{},{:?},{:?},{:?},{:?}",
                label,
                c,
                vars.alpha_delta[c],
                vars.sigma_delta[c],
                vars.alpha_mu[c],
                vars.sigma_mu[c]
            )?;
        }
    }
    Ok(())
}

/// Reads the variables schema back into per-step quadruples.
pub fn variables_from_csv<R: Read>(reader: R, path: &str) -> Result<(Vec<String>, Vec<CityVariables>)> {
    let mut lines = BufReader::new(reader).lines().enumerate();
    match lines.next() {
        Some((_, line)) => {
            let header = line?;
            if header.trim() != "step,city_id,alpha_delta,sigma_delta,alpha_mu,sigma_mu" {
                return Err(Error::Parse {
                    path: path.to_string(),
                    line: 1,
                    reason: "bad variables header".to_string(),
                });
            }
        }
        None => return Err(Error::EmptyInput { what: "variables csv" }),
    }
    let mut labels: Vec<String> = Vec::new();
    let mut rows: Vec<Vec<[f64; 4]>> = Vec::new();
    for (idx, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 6 {
            return Err(Error::Parse {
                path: path.to_string(),
                line: idx + 1,
                reason: format!("expected 6 fields, got {}", parts.len()),
            });
        }
        let mut vals = [0.0; 4];
        for (k, slot) in vals.iter_mut().enumerate() {
            *slot = parts[k + 2].trim().parse().map_err(|_| Error::Parse {
                path: path.to_string(),
                line: idx + 1,
                reason: format!("bad value `{}`", parts[k + 2]),
            })?;
        }
        let label = parts[0].trim().to_string();
        let t = match labels.iter().position(|l| *l == label) {
            Some(t) => t,
            None => {
                labels.push(label);
                rows.push(Vec::new());
                labels.len() - 1
            }
        };
        rows[t].push(vals);
    }
    let mut history = Vec::new();
    for step_rows in rows {
        let pick = |k: usize| step_rows.iter().map(|v| v[k]).collect::<Vec<f64>>();
        history.push(CityVariables::new(pick(0), pick(1), pick(2), pick(3))?);
    }
    Ok((labels, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{City, CitySet};
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn test_distances(n: usize) -> DistanceMatrix {
        let cities = CitySet::new(
            (0..n)
                .map(|id| City {
                    id,
                    name: format!("c{id}"),
                    lat: id as f64,
                    lon: 100.0 + (id as f64) * 1.5,
                })
                .collect(),
        )
        .unwrap();
        DistanceMatrix::from_cities(&cities).unwrap()
    }

    #[test]
    fn attraction_closed_form() {
        assert_eq!(attraction_at(2.0, 0.1, 0.0), 2.0);
        assert_eq!(attraction_at(2.0, 0.0, 123.0), 2.0);
        let v = attraction_at(2.0, 0.1, 5.0);
        assert!((v - 2.0 * (-0.25_f64).exp()).abs() < 1e-12);
        assert!((v - 1.5576).abs() < 1e-4);
    }

    #[test]
    fn pair_value_hand_check() {
        // a_d(tgt)=2, a_m(src)=3, s_d=0.1, s_m=0.2, d=5
        // => 6 * exp(-25 * 0.05) = 6 * exp(-1.25)
        let v = attraction_at(2.0, 0.1, 5.0) * repulsion_at(3.0, 0.2, 5.0);
        assert!((v - 6.0 * (-1.25_f64).exp()).abs() < 1e-12);
        assert!((v - 1.7190).abs() < 1e-4);
    }

    #[test]
    fn unit_variables_give_all_ones() {
        let d = test_distances(3);
        // sigma = 0 is the no-attenuation limit; use new() bypass since
        // zero is only legal in the closed form, not the positive type.
        let vars = CityVariables {
            alpha_delta: vec![1.0; 3],
            sigma_delta: vec![0.0; 3],
            alpha_mu: vec![1.0; 3],
            sigma_mu: vec![0.0; 3],
        };
        let m = flow_matrix(&vars, &d).unwrap();
        assert!(m.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn diagonal_is_intensity_product() {
        let d = test_distances(3);
        let vars = CityVariables::constant(3, 2.0, 0.001, 3.0, 0.002);
        let m = flow_matrix(&vars, &d).unwrap();
        for c in 0..3 {
            assert_eq!(m.get(c, c), 6.0);
        }
    }

    #[test]
    fn monotone_in_distance_and_intensity() {
        let vars = CityVariables::constant(2, 1.0, 0.01, 1.0, 0.01);
        let f = |d: f64| {
            attraction_at(vars.alpha_delta[0], vars.sigma_delta[0], d)
                * repulsion_at(vars.alpha_mu[0], vars.sigma_mu[0], d)
        };
        assert!(f(10.0) > f(20.0));
        assert!(f(20.0) > f(400.0));
        assert!(attraction_at(2.0, 0.01, 10.0) > attraction_at(1.0, 0.01, 10.0));
    }

    #[test]
    fn scaling_alpha_delta_scales_column() {
        let d = test_distances(4);
        let mut vars = CityVariables::constant(4, 1.0, 0.001, 1.5, 0.002);
        let base = flow_matrix(&vars, &d).unwrap();
        vars.alpha_delta[2] *= 2.0;
        let doubled = flow_matrix(&vars, &d).unwrap();
        for src in 0..4 {
            for tgt in 0..4 {
                let want = if tgt == 2 { 2.0 } else { 1.0 };
                assert!((doubled.get(src, tgt) / base.get(src, tgt) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tape_composition_matches_plain() {
        let d = test_distances(4);
        let vars = CityVariables::new(
            vec![0.5, 1.2, 2.0, 0.9],
            vec![0.001, 0.003, 0.0005, 0.002],
            vec![1.1, 0.4, 1.7, 0.8],
            vec![0.002, 0.001, 0.0025, 0.0015],
        )
        .unwrap();
        let plain = flow_matrix(&vars, &d).unwrap();

        let mut tape = Tape::new();
        let v = tape.param(vars.to_tensor());
        let dist_sq = tape.constant(d.as_tensor().map(|x| x * x));
        let ones = tape.constant(Tensor::ones(4, 1));
        let flow = flow_from_vars(&mut tape, v, dist_sq, ones).unwrap();
        for (a, b) in tape.value(flow).data().iter().zip(plain.data().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn positive_transform_is_strictly_positive() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..1000 {
            let head = HeadParams::init(8, 16, &mut rng);
            let h = init_uniform(5, 8, &mut rng).scale(10.0);
            let mut tape = Tape::new();
            let ones = tape.constant(Tensor::ones(5, 1));
            let hn = HeadNodes::register(&mut tape, &head);
            let hx = tape.constant(h);
            let raw = head_raw_forward(&mut tape, hx, &hn, ones).unwrap();
            let vars = positive_transform(&mut tape, raw).unwrap();
            assert!(tape.value(vars).data().iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn identical_rows_give_identical_quadruples() {
        let mut rng = StdRng::seed_from_u64(3);
        let head = HeadParams::init(8, 16, &mut rng);
        let row: Vec<f64> = (0..8).map(|i| 0.3 * i as f64 - 1.0).collect();
        let mut data = row.clone();
        data.extend_from_slice(&row);
        let h = Tensor::new(2, 8, data).unwrap();
        let mut tape = Tape::new();
        let ones = tape.constant(Tensor::ones(2, 1));
        let hn = HeadNodes::register(&mut tape, &head);
        let hx = tape.constant(h);
        let raw = head_raw_forward(&mut tape, hx, &hn, ones).unwrap();
        let vars = positive_transform(&mut tape, raw).unwrap();
        let v = tape.value(vars);
        for j in 0..4 {
            assert_eq!(v.get(0, j).to_bits(), v.get(1, j).to_bits());
        }
    }

    #[test]
    fn variables_csv_roundtrip() {
        let labels = vec!["2020-01".to_string(), "2020-02".to_string()];
        let history = vec![
            CityVariables::constant(3, 1.5, 0.001, 0.7, 0.002),
            CityVariables::constant(3, 1.25, 0.0015, 0.9, 0.0025),
        ];
        let mut buf = Vec::new();
        variables_to_csv(&mut buf, &labels, &history).unwrap();
        let (l2, h2) = variables_from_csv(buf.as_slice(), "mem").unwrap();
        assert_eq!(l2, labels);
        assert_eq!(h2, history);
    }
}
