//! Model state, the shared encoding pipeline, next-step forecasting,
//! and checkpoint serialization.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::rngs::StdRng;
use rand::SeedableRng;

use crate::config::{FeatureMode, RunConfig, Variant};
use crate::error::{Error, Result};
use crate::flow::FlowSeries;
use crate::gcn::{
    build_mobility_kernel, gcn_forward, normalized_adjacency, GcnLayerNodes, GcnLayerParams,
};
use crate::geo::{CitySet, DistanceMatrix, GeographyGraph};
use crate::gravity::{
    flow_from_vars, head_raw_forward, positive_transform, CityVariables, HeadNodes, HeadParams,
};
use crate::opt::{AdamConfig, AdamState};
use crate::seq::{
    nbeats_forward, BasisMatrix, CompressParams, NBeatsNodes, NBeatsStackParams,
};
use crate::spectral::singular_values;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Width of the raw per-city summary that replaces learned
/// representations in the no-convolution variant.
pub const SIL_SUMMARY_WIDTH: usize = 8;

/// All learnable parameters plus optimizer state and the config they
/// were trained under.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub variant: Variant,
    pub seed: u64,
    pub config: RunConfig,
    /// Multiplier mapping the training series' units back to raw units.
    pub data_scale: f64,
    pub embed: Tensor,
    pub gcn_layers: Vec<GcnLayerParams>,
    pub head: HeadParams,
    pub compress: CompressParams,
    pub nbeats: NBeatsStackParams,
    pub opt: AdamState,
}

fn head_input_dim(cfg: &RunConfig, variant: Variant, num_cities: usize) -> usize {
    let base = if variant == Variant::Sil {
        SIL_SUMMARY_WIDTH
    } else {
        cfg.embed_dim
    };
    match cfg.feature_mode {
        FeatureMode::Head => base + 2 * num_cities,
        _ => base,
    }
}

impl ModelState {
    /// Random initialization; deterministic for a given seed.
    pub fn init(num_cities: usize, cfg: &RunConfig, variant: Variant, seed: u64) -> Self {
        let mut rng = StdRng::seed_from_u64(seed);
        let embed = crate::gravity::init_embedding(num_cities, cfg.embed_dim, &mut rng);
        let gcn_layers = (0..cfg.gcn_layers)
            .map(|_| GcnLayerParams::init(cfg.embed_dim, cfg.embed_dim, &mut rng))
            .collect();
        let head = HeadParams::init(head_input_dim(cfg, variant, num_cities), cfg.head_hidden, &mut rng);
        let compress = CompressParams::init(num_cities, &mut rng);
        let nbeats =
            NBeatsStackParams::init(cfg.window, 1, cfg.nbeats_width, cfg.coeff_len, &mut rng);
        let mut state = ModelState {
            variant,
            seed,
            config: cfg.clone(),
            data_scale: 1.0,
            embed,
            gcn_layers,
            head,
            compress,
            nbeats,
            opt: AdamState::new(AdamConfig::default(), &[]),
        };
        state.opt = AdamState::new(
            AdamConfig {
                learning_rate: cfg.learning_rate,
                ..AdamConfig::default()
            },
            &state.params_vec(),
        );
        state
    }

    /// Zero-valued state with the right shapes, for checkpoint loading.
    fn skeleton(num_cities: usize, cfg: &RunConfig, variant: Variant, seed: u64) -> Self {
        let mut state = Self::init(num_cities, cfg, variant, seed);
        for (_, t) in state.named_params_mut() {
            let z = Tensor::zeros(t.rows(), t.cols());
            *t = z;
        }
        state.opt = AdamState::new(
            AdamConfig {
                learning_rate: cfg.learning_rate,
                ..AdamConfig::default()
            },
            &state.params_vec(),
        );
        state
    }

    pub fn num_cities(&self) -> usize {
        self.embed.rows()
    }

    /// Named parameter tensors in the canonical (checkpoint and
    /// optimizer) order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![("embed".to_string(), &self.embed)];
        for (i, l) in self.gcn_layers.iter().enumerate() {
            out.push((format!("gcn{i}.weight"), &l.weight));
            out.push((format!("gcn{i}.bias"), &l.bias));
        }
        out.push(("head.w1".to_string(), &self.head.w1));
        out.push(("head.b1".to_string(), &self.head.b1));
        out.push(("head.w2".to_string(), &self.head.w2));
        out.push(("head.b2".to_string(), &self.head.b2));
        out.push(("compress.weight".to_string(), &self.compress.weight));
        out.push(("compress.bias".to_string(), &self.compress.bias));
        for (i, b) in self.nbeats.blocks.iter().enumerate() {
            out.push((format!("block{i}.w1"), &b.w1));
            out.push((format!("block{i}.b1"), &b.b1));
            out.push((format!("block{i}.w2"), &b.w2));
            out.push((format!("block{i}.b2"), &b.b2));
            out.push((format!("block{i}.theta_b"), &b.theta_backcast));
            out.push((format!("block{i}.theta_f"), &b.theta_forecast));
            if let BasisMatrix::Learned(t) = &b.basis_backcast {
                out.push((format!("block{i}.basis_b"), t));
            }
            if let BasisMatrix::Learned(t) = &b.basis_forecast {
                out.push((format!("block{i}.basis_f"), t));
            }
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![("embed".to_string(), &mut self.embed)];
        for (i, l) in self.gcn_layers.iter_mut().enumerate() {
            out.push((format!("gcn{i}.weight"), &mut l.weight));
            out.push((format!("gcn{i}.bias"), &mut l.bias));
        }
        out.push(("head.w1".to_string(), &mut self.head.w1));
        out.push(("head.b1".to_string(), &mut self.head.b1));
        out.push(("head.w2".to_string(), &mut self.head.w2));
        out.push(("head.b2".to_string(), &mut self.head.b2));
        out.push(("compress.weight".to_string(), &mut self.compress.weight));
        out.push(("compress.bias".to_string(), &mut self.compress.bias));
        for (i, b) in self.nbeats.blocks.iter_mut().enumerate() {
            out.push((format!("block{i}.w1"), &mut b.w1));
            out.push((format!("block{i}.b1"), &mut b.b1));
            out.push((format!("block{i}.w2"), &mut b.w2));
            out.push((format!("block{i}.b2"), &mut b.b2));
            out.push((format!("block{i}.theta_b"), &mut b.theta_backcast));
            out.push((format!("block{i}.theta_f"), &mut b.theta_forecast));
            if let BasisMatrix::Learned(t) = &mut b.basis_backcast {
                out.push((format!("block{i}.basis_b"), t));
            }
            if let BasisMatrix::Learned(t) = &mut b.basis_forecast {
                out.push((format!("block{i}.basis_f"), t));
            }
        }
        out
    }

    pub fn params_vec(&self) -> Vec<Tensor> {
        self.named_params().into_iter().map(|(_, t)| t.clone()).collect()
    }

    // -----------------------------------------------------------------
    // Checkpoint format: versioned flat text, bit-exact on reload.
    // -----------------------------------------------------------------

    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "odflow-checkpoint v1")?;
        writeln!(w, "cities {}", self.num_cities())?;
        writeln!(w, "seed {}", self.seed)?;
        writeln!(w, "variant {}", self.variant.name())?;
        writeln!(w, "data_scale {:?}", self.data_scale)?;
        writeln!(w, "opt_step {}", self.opt.step)?;
        writeln!(w, "config-begin")?;
        write!(w, "{}", self.config.to_text())?;
        writeln!(w, "config-end")?;
        let params = self.named_params();
        writeln!(w, "tensors {}", params.len() * 3)?;
        let write_tensor = |w: &mut W, name: &str, t: &Tensor| -> Result<()> {
            writeln!(w, "tensor {name} {} {}", t.rows(), t.cols())?;
            for i in 0..t.rows() {
                let row: Vec<String> = t.row(i).iter().map(|v| format!("{v:?}")).collect();
                writeln!(w, "{}", row.join(" "))?;
            }
            Ok(())
        };
        for (name, t) in &params {
            write_tensor(&mut w, name, t)?;
        }
        for ((name, _), m) in params.iter().zip(self.opt.first_moment.iter()) {
            write_tensor(&mut w, &format!("m1.{name}"), m)?;
        }
        for ((name, _), v) in params.iter().zip(self.opt.second_moment.iter()) {
            write_tensor(&mut w, &format!("m2.{name}"), v)?;
        }
        Ok(())
    }

    pub fn save_path(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        self.save(&mut f)
    }

    pub fn load<R: Read>(r: R) -> Result<Self> {
        let mut lines = BufReader::new(r).lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .transpose()?
                .ok_or_else(|| Error::BadCheckpoint {
                    reason: "unexpected end of file".to_string(),
                })
        };
        let header = next()?;
        if header.trim() != "odflow-checkpoint v1" {
            return Err(Error::BadCheckpoint {
                reason: format!("bad header `{header}`"),
            });
        }
        let field = |line: String, key: &str| -> Result<String> {
            line.strip_prefix(key)
                .map(|s| s.trim().to_string())
                .ok_or_else(|| Error::BadCheckpoint {
                    reason: format!("expected `{key}`, got `{line}`"),
                })
        };
        let cities: usize = field(next()?, "cities")?.parse().map_err(|_| Error::BadCheckpoint {
            reason: "bad city count".to_string(),
        })?;
        let seed: u64 = field(next()?, "seed")?.parse().map_err(|_| Error::BadCheckpoint {
            reason: "bad seed".to_string(),
        })?;
        let variant = Variant::parse(&field(next()?, "variant")?)?;
        let data_scale: f64 =
            field(next()?, "data_scale")?.parse().map_err(|_| Error::BadCheckpoint {
                reason: "bad data_scale".to_string(),
            })?;
        let opt_step: u64 = field(next()?, "opt_step")?.parse().map_err(|_| Error::BadCheckpoint {
            reason: "bad opt_step".to_string(),
        })?;
        if next()?.trim() != "config-begin" {
            return Err(Error::BadCheckpoint {
                reason: "missing config block".to_string(),
            });
        }
        let mut config_text = String::new();
        loop {
            let line = next()?;
            if line.trim() == "config-end" {
                break;
            }
            config_text.push_str(&line);
            config_text.push('\n');
        }
        let config = RunConfig::parse_str(&config_text)?;
        let count: usize = field(next()?, "tensors")?.parse().map_err(|_| Error::BadCheckpoint {
            reason: "bad tensor count".to_string(),
        })?;

        let mut state = ModelState::skeleton(cities, &config, variant, seed);
        state.data_scale = data_scale;
        state.opt.step = opt_step;

        for _ in 0..count {
            let head = next()?;
            let parts: Vec<&str> = head.split_whitespace().collect();
            if parts.len() != 4 || parts[0] != "tensor" {
                return Err(Error::BadCheckpoint {
                    reason: format!("bad tensor header `{head}`"),
                });
            }
            let name = parts[1].to_string();
            let rows: usize = parts[2].parse().map_err(|_| Error::BadCheckpoint {
                reason: "bad tensor rows".to_string(),
            })?;
            let cols: usize = parts[3].parse().map_err(|_| Error::BadCheckpoint {
                reason: "bad tensor cols".to_string(),
            })?;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let line = next()?;
                for tok in line.split_whitespace() {
                    data.push(tok.parse::<f64>().map_err(|_| Error::BadCheckpoint {
                        reason: format!("bad value in `{name}`"),
                    })?);
                }
            }
            let tensor = Tensor::new(rows, cols, data).map_err(|_| Error::BadCheckpoint {
                reason: format!("bad shape for `{name}`"),
            })?;
            state.assign_tensor(&name, tensor)?;
        }
        Ok(state)
    }

    pub fn load_path(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::load(f)
    }

    fn assign_tensor(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let (slot_kind, base) = if let Some(rest) = name.strip_prefix("m1.") {
            (1, rest.to_string())
        } else if let Some(rest) = name.strip_prefix("m2.") {
            (2, rest.to_string())
        } else {
            (0, name.to_string())
        };
        let idx = self
            .named_params()
            .iter()
            .position(|(n, _)| *n == base)
            .ok_or_else(|| Error::BadCheckpoint {
                reason: format!("unknown tensor `{name}`"),
            })?;
        let expected = self.named_params()[idx].1.shape();
        if tensor.shape() != expected {
            return Err(Error::BadCheckpoint {
                reason: format!("shape mismatch for `{name}`"),
            });
        }
        match slot_kind {
            0 => *self.named_params_mut()[idx].1 = tensor,
            1 => self.opt.first_moment[idx] = tensor,
            _ => self.opt.second_moment[idx] = tensor,
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Data preparation (everything that does not depend on parameters)
// ---------------------------------------------------------------------------

/// Per-step constants derived from the dataset once per run.
pub struct PreparedData {
    pub distances: DistanceMatrix,
    pub graph: GeographyGraph,
    /// Convolution kernel per step (empty for the no-graph variant).
    pub kernels: Vec<Tensor>,
    /// Raw per-city summaries per step (no-graph variant only).
    pub summaries: Vec<Tensor>,
    /// Flattened `1 x C^2` flow matrix per step.
    pub flows_flat: Vec<Tensor>,
    /// `C x 1` singular-value column per step, sorted descending.
    pub spectral: Vec<Tensor>,
    /// `C x 1` inflow / outflow totals per step (diagonal handling per
    /// config).
    pub inflows: Vec<Tensor>,
    pub outflows: Vec<Tensor>,
    pub dist_sq: Tensor,
    pub num_cities: usize,
    pub steps: usize,
}

/// Raw per-city summary of one flow matrix (the stand-in encoding for
/// the no-convolution variant): inflow, outflow, self-flow, max in/out
/// contribution, mean non-self in/out, net flow.
fn city_summaries(m: &Tensor) -> Tensor {
    let n = m.rows();
    let mut out = Tensor::zeros(n, SIL_SUMMARY_WIDTH);
    for c in 0..n {
        let mut inflow = 0.0;
        let mut outflow = 0.0;
        let mut max_in = 0.0_f64;
        let mut max_out = 0.0_f64;
        for k in 0..n {
            inflow += m.get(k, c);
            outflow += m.get(c, k);
            max_in = max_in.max(m.get(k, c));
            max_out = max_out.max(m.get(c, k));
        }
        let selfflow = m.get(c, c);
        let nonself = (n - 1).max(1) as f64;
        out.set(c, 0, inflow);
        out.set(c, 1, outflow);
        out.set(c, 2, selfflow);
        out.set(c, 3, max_in);
        out.set(c, 4, max_out);
        out.set(c, 5, (inflow - selfflow) / nonself);
        out.set(c, 6, (outflow - selfflow) / nonself);
        out.set(c, 7, inflow - outflow);
    }
    out
}

fn totals_column(m: &Tensor, inflow: bool, include_diagonal: bool) -> Tensor {
    let n = m.rows();
    let mut out = Tensor::zeros(n, 1);
    for c in 0..n {
        let mut acc = 0.0;
        for k in 0..n {
            if !include_diagonal && k == c {
                continue;
            }
            acc += if inflow { m.get(k, c) } else { m.get(c, k) };
        }
        out.set(c, 0, acc);
    }
    out
}

pub fn prepare_data(
    series: &FlowSeries,
    cities: &CitySet,
    cfg: &RunConfig,
    variant: Variant,
) -> Result<PreparedData> {
    let n = cities.len();
    if series.num_cities() != n {
        return Err(Error::ShapeMismatch {
            op: "prepare_data",
            lhs: (series.num_cities(), series.num_cities()),
            rhs: (n, n),
        });
    }
    let distances = DistanceMatrix::from_cities(cities)?;
    let graph = GeographyGraph::from_distances(&distances, cfg.epsilon_km)?;
    let steps = series.steps();

    let mut kernels = Vec::new();
    let mut summaries = Vec::new();
    match variant {
        Variant::Sil => {
            for t in 0..steps {
                summaries.push(city_summaries(series.matrix(t)));
            }
        }
        Variant::GcnSil => {
            let a_hat = normalized_adjacency(&graph);
            kernels = vec![a_hat; steps];
        }
        _ => {
            for t in 0..steps {
                kernels.push(
                    build_mobility_kernel(series.matrix(t), &graph, &distances)?
                        .as_tensor()
                        .clone(),
                );
            }
        }
    }

    let mut flows_flat = Vec::with_capacity(steps);
    let mut spectral = Vec::with_capacity(steps);
    let mut inflows = Vec::with_capacity(steps);
    let mut outflows = Vec::with_capacity(steps);
    for t in 0..steps {
        let m = series.matrix(t);
        flows_flat.push(Tensor::from_parts(1, n * n, m.data().to_vec()));
        spectral.push(Tensor::from_parts(n, 1, singular_values(m)));
        inflows.push(totals_column(m, true, cfg.totals_include_diagonal));
        outflows.push(totals_column(m, false, cfg.totals_include_diagonal));
    }

    Ok(PreparedData {
        dist_sq: distances.as_tensor().map(|d| d * d),
        distances,
        graph,
        kernels,
        summaries,
        flows_flat,
        spectral,
        inflows,
        outflows,
        num_cities: n,
        steps,
    })
}

// ---------------------------------------------------------------------------
// Tape-side wiring
// ---------------------------------------------------------------------------

/// Node handles for one tape pass over the model.
pub struct ModelNodes {
    pub embed: NodeId,
    pub gcn: Vec<GcnLayerNodes>,
    pub head: HeadNodes,
    pub compress_w: NodeId,
    pub compress_b: NodeId,
    pub nbeats: NBeatsNodes,
    /// Flat parameter nodes in [`ModelState::named_params`] order.
    pub param_ids: Vec<NodeId>,
    pub ones_col: NodeId,
    pub dist_sq: NodeId,
}

pub fn register_model(tape: &mut Tape, state: &ModelState, prepared: &PreparedData) -> ModelNodes {
    let embed = tape.param(state.embed.clone());
    let gcn = GcnLayerNodes::register(tape, &state.gcn_layers);
    let head = HeadNodes::register(tape, &state.head);
    let compress_w = tape.param(state.compress.weight.clone());
    let compress_b = tape.param(state.compress.bias.clone());
    let nbeats = NBeatsNodes::register(tape, &state.nbeats);

    let mut param_ids = vec![embed];
    for l in &gcn {
        param_ids.push(l.weight);
        param_ids.push(l.bias);
    }
    param_ids.extend([head.w1, head.b1, head.w2, head.b2, compress_w, compress_b]);
    for (b, p) in state.nbeats.blocks.iter().zip(nbeats.blocks.iter()) {
        param_ids.extend([p.w1, p.b1, p.w2, p.b2, p.theta_backcast, p.theta_forecast]);
        if matches!(b.basis_backcast, BasisMatrix::Learned(_)) {
            param_ids.push(p.basis_backcast);
        }
        if matches!(b.basis_forecast, BasisMatrix::Learned(_)) {
            param_ids.push(p.basis_forecast);
        }
    }

    let ones_col = tape.constant(Tensor::ones(prepared.num_cities, 1));
    let dist_sq = tape.constant(prepared.dist_sq.clone());
    ModelNodes {
        embed,
        gcn,
        head,
        compress_w,
        compress_b,
        nbeats,
        param_ids,
        ones_col,
        dist_sq,
    }
}

/// Per-step encodings produced on the tape.
pub struct StepEncodings {
    /// Representation fed to the head (`C x repr_dim`).
    pub reprs: Vec<NodeId>,
    /// Raw head outputs (`C x 4`, unconstrained).
    pub raw_vars: Vec<NodeId>,
    /// Positive variables (`C x 4`).
    pub vars: Vec<NodeId>,
    /// Feature columns (`2C x 1`), present unless features are off.
    pub feat_cols: Vec<Option<NodeId>>,
}

/// Runs the encoder over every prepared step.
pub fn encode_steps(
    tape: &mut Tape,
    nodes: &ModelNodes,
    prepared: &PreparedData,
    cfg: &RunConfig,
    variant: Variant,
) -> Result<StepEncodings> {
    let mut reprs = Vec::with_capacity(prepared.steps);
    let mut raw_vars = Vec::with_capacity(prepared.steps);
    let mut vars = Vec::with_capacity(prepared.steps);
    let mut feat_cols = Vec::with_capacity(prepared.steps);

    for t in 0..prepared.steps {
        let feat = if cfg.feature_mode == FeatureMode::Off {
            None
        } else {
            let flat = tape.constant(prepared.flows_flat[t].clone());
            let compressed = tape.matmul(flat, nodes.compress_w)?;
            let compressed = tape.add(compressed, nodes.compress_b)?;
            let compressed_col = tape.transpose(compressed)?;
            let spectral = tape.constant(prepared.spectral[t].clone());
            Some(tape.concat_rows(&[compressed_col, spectral])?)
        };

        let mut h = match variant {
            Variant::Sil => tape.constant(prepared.summaries[t].clone()),
            _ => {
                let kernel = tape.constant(prepared.kernels[t].clone());
                gcn_forward(tape, kernel, nodes.embed, &nodes.gcn, nodes.ones_col)?
            }
        };
        if cfg.feature_mode == FeatureMode::Head {
            let feat_col = feat.expect("head mode keeps features");
            let feat_row = tape.transpose(feat_col)?;
            let tiled = tape.matmul(nodes.ones_col, feat_row)?;
            h = tape.concat_cols(&[h, tiled])?;
        }
        let raw = head_raw_forward(tape, h, &nodes.head, nodes.ones_col)?;
        let pos = positive_transform(tape, raw)?;
        reprs.push(h);
        raw_vars.push(raw);
        vars.push(pos);
        feat_cols.push(feat);
    }

    Ok(StepEncodings {
        reprs,
        raw_vars,
        vars,
        feat_cols,
    })
}

/// Forecast the positive variables for each target step. A target `t`
/// consumes encoded steps `t - window .. t`; all targets are batched
/// through one stack evaluation (rows are channels).
pub fn forecast_vars(
    tape: &mut Tape,
    nodes: &ModelNodes,
    enc: &StepEncodings,
    targets: &[usize],
    cfg: &RunConfig,
    num_cities: usize,
) -> Result<Vec<NodeId>> {
    let window = cfg.window;
    let with_features = cfg.feature_mode == FeatureMode::Channels;
    let var_rows = 4 * num_cities;
    let rows_per_target = var_rows + if with_features { 2 * num_cities } else { 0 };

    let mut blocks = Vec::with_capacity(targets.len());
    for &t in targets {
        if t < window {
            return Err(Error::InsufficientHistory {
                needed: window,
                got: t,
            });
        }
        let mut cols = Vec::with_capacity(window);
        for s in (t - window)..t {
            let var_col = tape.reshape(enc.raw_vars[s], var_rows, 1)?;
            let col = if with_features {
                let feat = enc.feat_cols[s].expect("channel mode keeps features");
                tape.concat_rows(&[var_col, feat])?
            } else {
                var_col
            };
            cols.push(col);
        }
        blocks.push(tape.concat_cols(&cols)?);
    }
    let x = tape.concat_rows(&blocks)?;
    let trace = nbeats_forward(tape, x, &nodes.nbeats, window, 1)?;

    let mut out = Vec::with_capacity(targets.len());
    for i in 0..targets.len() {
        let base = i * rows_per_target;
        let rows = tape.slice_rows(trace.forecast, base, base + var_rows)?;
        let raw = tape.reshape(rows, num_cities, 4)?;
        out.push(positive_transform(tape, raw)?);
    }
    Ok(out)
}

/// Static variables for the no-sequence variant: head applied to the
/// mean representation over the encoded window.
pub fn mean_repr_vars(
    tape: &mut Tape,
    nodes: &ModelNodes,
    enc: &StepEncodings,
    steps: std::ops::Range<usize>,
) -> Result<NodeId> {
    let count = steps.len() as f64;
    let mut acc = enc.reprs[steps.start];
    for s in steps.skip(1) {
        acc = tape.add(acc, enc.reprs[s])?;
    }
    let mean = tape.scale(acc, 1.0 / count)?;
    let raw = head_raw_forward(tape, mean, &nodes.head, nodes.ones_col)?;
    positive_transform(tape, raw)
}

/// Next-step prediction.
#[derive(Clone, Debug)]
pub struct ForecastOutput {
    pub variables: CityVariables,
    /// Forecast feature channels (channel feature mode only).
    pub features_estimate: Vec<f64>,
    /// Predicted flow matrix in the units of the input series.
    pub matrix: Tensor,
}

/// Predicts the flow matrix one step past the end of `series`.
pub fn forecast_flow(
    state: &ModelState,
    series: &FlowSeries,
    cities: &CitySet,
) -> Result<ForecastOutput> {
    let cfg = &state.config;
    let window = cfg.window;
    if series.steps() < window {
        return Err(Error::InsufficientHistory {
            needed: window,
            got: series.steps(),
        });
    }
    if series.num_cities() != state.num_cities() {
        return Err(Error::ShapeMismatch {
            op: "forecast_flow",
            lhs: (series.num_cities(), series.num_cities()),
            rhs: (state.num_cities(), state.num_cities()),
        });
    }
    let tail = series.slice_steps(series.steps() - window, series.steps())?;
    let prepared = prepare_data(&tail, cities, cfg, state.variant)?;

    let mut tape = Tape::new();
    let nodes = register_model(&mut tape, state, &prepared);
    let enc = encode_steps(&mut tape, &nodes, &prepared, cfg, state.variant)?;

    let n = prepared.num_cities;
    let (vars_node, features_estimate) = match state.variant {
        Variant::Dhg => (mean_repr_vars(&mut tape, &nodes, &enc, 0..window)?, Vec::new()),
        _ => {
            let vars = forecast_vars(&mut tape, &nodes, &enc, &[window], cfg, n)?[0];
            // Recover the feature-channel forecasts when present.
            let feats = if cfg.feature_mode == FeatureMode::Channels {
                feature_forecast(&mut tape, &nodes, &enc, window, cfg, n)?
            } else {
                Vec::new()
            };
            (vars, feats)
        }
    };
    let flow = flow_from_vars(&mut tape, vars_node, nodes.dist_sq, nodes.ones_col)?;

    Ok(ForecastOutput {
        variables: CityVariables::from_tensor(tape.value(vars_node))?,
        features_estimate,
        matrix: tape.value(flow).clone(),
    })
}

fn feature_forecast(
    tape: &mut Tape,
    nodes: &ModelNodes,
    enc: &StepEncodings,
    target: usize,
    cfg: &RunConfig,
    num_cities: usize,
) -> Result<Vec<f64>> {
    let window = cfg.window;
    let var_rows = 4 * num_cities;
    let mut cols = Vec::with_capacity(window);
    for s in (target - window)..target {
        let var_col = tape.reshape(enc.raw_vars[s], var_rows, 1)?;
        let feat = enc.feat_cols[s].expect("channel mode keeps features");
        cols.push(tape.concat_rows(&[var_col, feat])?);
    }
    let x = tape.concat_cols(&cols)?;
    let trace = nbeats_forward(tape, x, &nodes.nbeats, window, 1)?;
    let rows = tape.slice_rows(trace.forecast, var_rows, var_rows + 2 * num_cities)?;
    Ok(tape.value(rows).data().to_vec())
}
