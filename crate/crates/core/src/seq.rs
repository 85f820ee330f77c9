//! Sequential encoding: per-step global features and a doubly-residual
//! basis-expansion forecaster.
//!
//! Each observed step contributes a feature vector of length `2|C|`: a
//! learned compression of the flattened flow matrix to `|C|` values,
//! concatenated with the matrix's `|C|` singular values (sorted
//! descending). Forecasting runs a stack of three blocks — generic,
//! seasonality, trend — where every block consumes the running
//! residual, emits a backcast (subtracted from the residual) and a
//! forecast (accumulated into the output).

use rand::Rng;

use crate::error::{Error, Result};
use crate::gravity::init_uniform;
use crate::spectral::singular_values;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Polynomial degree of the trend basis (4 coefficients).
pub const TREND_DEGREE: usize = 3;

/// Learned map from a flattened `|C| x |C|` flow matrix to `|C|` values.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl CompressParams {
    pub fn init<R: Rng>(num_cities: usize, rng: &mut R) -> Self {
        CompressParams {
            weight: init_uniform(num_cities * num_cities, num_cities, rng),
            bias: Tensor::zeros(1, num_cities),
        }
    }
}

/// Per-step global features: learned compression plus spectrum.
#[derive(Clone, Debug, PartialEq)]
pub struct StepFeatures {
    pub compressed: Vec<f64>,
    /// Singular values sorted descending; all non-negative.
    pub spectral: Vec<f64>,
}

impl StepFeatures {
    /// Concatenated feature vector of length `2|C|`.
    pub fn values(&self) -> Vec<f64> {
        let mut v = self.compressed.clone();
        v.extend_from_slice(&self.spectral);
        v
    }
}

/// Computes the features of one square flow matrix.
pub fn step_features(flow_t: &Tensor, params: &CompressParams) -> Result<StepFeatures> {
    let n = flow_t.rows();
    if flow_t.cols() != n {
        return Err(Error::ShapeMismatch {
            op: "step_features",
            lhs: flow_t.shape(),
            rhs: (n, n),
        });
    }
    if params.weight.rows() != n * n {
        return Err(Error::ShapeMismatch {
            op: "step_features",
            lhs: params.weight.shape(),
            rhs: (n * n, n),
        });
    }
    let flat = Tensor::from_parts(1, n * n, flow_t.data().to_vec());
    let compressed = flat.matmul(&params.weight)?.add(&params.bias)?;
    Ok(StepFeatures {
        compressed: compressed.data().to_vec(),
        spectral: singular_values(flow_t),
    })
}

// ---------------------------------------------------------------------------
// Forecaster
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Generic,
    Seasonality,
    Trend,
}

impl BlockKind {
    pub fn name(self) -> &'static str {
        match self {
            BlockKind::Generic => "generic",
            BlockKind::Seasonality => "seasonality",
            BlockKind::Trend => "trend",
        }
    }
}

/// Basis mapping expansion coefficients to output samples.
#[derive(Clone, Debug, PartialEq)]
pub enum BasisMatrix {
    /// Trainable basis (generic block).
    Learned(Tensor),
    /// Fixed analytic basis (trend / seasonality blocks).
    Fixed(Tensor),
}

impl BasisMatrix {
    pub fn tensor(&self) -> &Tensor {
        match self {
            BasisMatrix::Learned(t) | BasisMatrix::Fixed(t) => t,
        }
    }
}

/// Degree-`TREND_DEGREE` polynomial basis evaluated on the normalized
/// grid `t_j = j / len`: row `p`, column `j` holds `t_j^p`.
pub fn trend_basis(len: usize) -> Tensor {
    let rows = TREND_DEGREE + 1;
    let mut out = Tensor::zeros(rows, len);
    for p in 0..rows {
        for j in 0..len {
            let t = j as f64 / len as f64;
            out.set(p, j, t.powi(p as i32));
        }
    }
    out
}

/// Harmonic basis on the same grid: a constant row, then alternating
/// `cos(2 pi k t)` / `sin(2 pi k t)` rows until `coeff_len` rows exist.
pub fn seasonality_basis(coeff_len: usize, len: usize) -> Tensor {
    let mut out = Tensor::zeros(coeff_len, len);
    for j in 0..len {
        out.set(0, j, 1.0);
    }
    for r in 1..coeff_len {
        let k = r.div_ceil(2);
        for j in 0..len {
            let arg = std::f64::consts::TAU * k as f64 * j as f64 / len as f64;
            out.set(r, j, if r % 2 == 1 { arg.cos() } else { arg.sin() });
        }
    }
    out
}

/// One block: two-layer trunk, two coefficient heads, two bases.
#[derive(Clone, Debug, PartialEq)]
pub struct NBeatsBlockParams {
    pub kind: BlockKind,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub theta_backcast: Tensor,
    pub theta_forecast: Tensor,
    pub basis_backcast: BasisMatrix,
    pub basis_forecast: BasisMatrix,
}

impl NBeatsBlockParams {
    pub fn init<R: Rng>(
        kind: BlockKind,
        backcast_len: usize,
        forecast_len: usize,
        width: usize,
        coeff_len: usize,
        rng: &mut R,
    ) -> Self {
        let coeffs = match kind {
            BlockKind::Trend => TREND_DEGREE + 1,
            _ => coeff_len,
        };
        let (basis_backcast, basis_forecast) = match kind {
            BlockKind::Generic => (
                BasisMatrix::Learned(init_uniform(coeffs, backcast_len, rng)),
                BasisMatrix::Learned(init_uniform(coeffs, forecast_len, rng)),
            ),
            BlockKind::Seasonality => (
                BasisMatrix::Fixed(seasonality_basis(coeffs, backcast_len)),
                BasisMatrix::Fixed(seasonality_basis(coeffs, forecast_len)),
            ),
            BlockKind::Trend => (
                BasisMatrix::Fixed(trend_basis(backcast_len)),
                BasisMatrix::Fixed(trend_basis(forecast_len)),
            ),
        };
        // trunk biases start slightly positive so no rectified unit
        // sits exactly on its kink at init (a fully dead first layer
        // would otherwise put the second layer's preactivation at 0)
        let bias = |width: usize| Tensor::zeros(1, width).map(|_| 0.01);
        NBeatsBlockParams {
            kind,
            w1: init_uniform(backcast_len, width, rng),
            b1: bias(width),
            w2: init_uniform(width, width, rng),
            b2: bias(width),
            theta_backcast: init_uniform(width, coeffs, rng),
            theta_forecast: init_uniform(width, coeffs, rng),
            basis_backcast,
            basis_forecast,
        }
    }
}

/// The three-block stack. Backcast length equals the input window and
/// the forecast horizon is a single step.
#[derive(Clone, Debug, PartialEq)]
pub struct NBeatsStackParams {
    pub blocks: Vec<NBeatsBlockParams>,
    pub backcast_len: usize,
    pub forecast_len: usize,
}

impl NBeatsStackParams {
    pub fn init<R: Rng>(
        backcast_len: usize,
        forecast_len: usize,
        width: usize,
        coeff_len: usize,
        rng: &mut R,
    ) -> Self {
        let blocks = [BlockKind::Generic, BlockKind::Seasonality, BlockKind::Trend]
            .into_iter()
            .map(|kind| {
                NBeatsBlockParams::init(kind, backcast_len, forecast_len, width, coeff_len, rng)
            })
            .collect();
        NBeatsStackParams {
            blocks,
            backcast_len,
            forecast_len,
        }
    }
}

/// Tape handles for one block (fixed bases become constants).
#[derive(Clone, Debug)]
pub struct BlockNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
    pub theta_backcast: NodeId,
    pub theta_forecast: NodeId,
    pub basis_backcast: NodeId,
    pub basis_forecast: NodeId,
}

/// Tape handles for the whole stack.
#[derive(Clone, Debug)]
pub struct NBeatsNodes {
    pub blocks: Vec<BlockNodes>,
}

impl NBeatsNodes {
    pub fn register(tape: &mut Tape, stack: &NBeatsStackParams) -> Self {
        let blocks = stack
            .blocks
            .iter()
            .map(|b| {
                let basis = |tape: &mut Tape, m: &BasisMatrix| match m {
                    BasisMatrix::Learned(t) => tape.param(t.clone()),
                    BasisMatrix::Fixed(t) => tape.constant(t.clone()),
                };
                BlockNodes {
                    w1: tape.param(b.w1.clone()),
                    b1: tape.param(b.b1.clone()),
                    w2: tape.param(b.w2.clone()),
                    b2: tape.param(b.b2.clone()),
                    theta_backcast: tape.param(b.theta_backcast.clone()),
                    theta_forecast: tape.param(b.theta_forecast.clone()),
                    basis_backcast: basis(tape, &b.basis_backcast),
                    basis_forecast: basis(tape, &b.basis_forecast),
                }
            })
            .collect();
        NBeatsNodes { blocks }
    }
}

/// Per-block and aggregate outputs of one stack evaluation.
#[derive(Clone, Debug)]
pub struct StackTrace {
    pub forecast: NodeId,
    pub final_residual: NodeId,
    pub block_forecasts: Vec<NodeId>,
    pub block_backcasts: Vec<NodeId>,
}

/// Evaluates the stack on a `channels x window` input. Rows are
/// independent series sharing the same weights.
pub fn nbeats_forward(
    tape: &mut Tape,
    x: NodeId,
    stack: &NBeatsNodes,
    backcast_len: usize,
    forecast_len: usize,
) -> Result<StackTrace> {
    let (rows, cols) = tape.value(x).shape();
    if cols != backcast_len {
        return Err(Error::ShapeMismatch {
            op: "nbeats_forward",
            lhs: (rows, cols),
            rhs: (rows, backcast_len),
        });
    }
    let ones_col = tape.constant(Tensor::ones(rows, 1));
    let mut residual = x;
    let mut forecast = tape.constant(Tensor::zeros(rows, forecast_len));
    let mut block_forecasts = Vec::with_capacity(stack.blocks.len());
    let mut block_backcasts = Vec::with_capacity(stack.blocks.len());

    for block in &stack.blocks {
        let h = tape.matmul(residual, block.w1)?;
        let h = crate::gravity::add_bias(tape, h, block.b1, ones_col)?;
        let h = tape.max_scalar(h, 0.0)?;
        let h = tape.matmul(h, block.w2)?;
        let h = crate::gravity::add_bias(tape, h, block.b2, ones_col)?;
        let h = tape.max_scalar(h, 0.0)?;

        let coeff_b = tape.matmul(h, block.theta_backcast)?;
        let coeff_f = tape.matmul(h, block.theta_forecast)?;
        let backcast = tape.matmul(coeff_b, block.basis_backcast)?;
        let fcast = tape.matmul(coeff_f, block.basis_forecast)?;

        residual = tape.sub(residual, backcast)?;
        forecast = tape.add(forecast, fcast)?;
        block_forecasts.push(fcast);
        block_backcasts.push(backcast);
    }

    Ok(StackTrace {
        forecast,
        final_residual: residual,
        block_forecasts,
        block_backcasts,
    })
}
