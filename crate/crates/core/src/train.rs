//! Full-batch training loop, fitted-variable extraction, and the
//! ablation harness.

use crate::config::{RunConfig, Variant};
use crate::error::{Error, Result};
use crate::flow::FlowSeries;
use crate::geo::CitySet;
use crate::gravity::CityVariables;
use crate::loss::{breakdown, build_total_loss, LossBreakdown};
use crate::metrics::{evaluate, Metrics};
use crate::model::{
    encode_steps, forecast_flow, prepare_data, register_model, ModelState,
};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Trained state plus the per-epoch loss history.
pub struct TrainResult {
    pub state: ModelState,
    pub history: Vec<LossBreakdown>,
}

/// Trains a variant on the series (full batch, single thread).
/// Deterministic for a given config and seed. Stops early when the
/// total loss improves by less than `plateau_tol` (relative) over
/// `plateau_window` epochs.
pub fn train(
    series: &FlowSeries,
    cities: &CitySet,
    cfg: &RunConfig,
    variant: Variant,
    seed: u64,
) -> Result<TrainResult> {
    cfg.validate()?;
    if series.steps() <= cfg.window {
        return Err(Error::InsufficientHistory {
            needed: cfg.window + 1,
            got: series.steps(),
        });
    }
    let prepared = prepare_data(series, cities, cfg, variant)?;
    let mut state = ModelState::init(cities.len(), cfg, variant, seed);
    state.data_scale = series.scale();
    let mut history: Vec<LossBreakdown> = Vec::with_capacity(cfg.epochs);

    // the returned state is the best one seen, not the last one
    let mut best_state = state.clone();
    let mut best_total = f64::INFINITY;
    let mut best_epoch = 0;

    for epoch in 0..cfg.epochs {
        let step = (|| -> Result<(LossBreakdown, Vec<Tensor>)> {
            let mut tape = Tape::new();
            let nodes = register_model(&mut tape, &state, &prepared);
            let enc = encode_steps(&mut tape, &nodes, &prepared, cfg, variant)?;
            let loss = build_total_loss(&mut tape, &nodes, &enc, &prepared, series, cfg, variant)?;
            let bd = breakdown(&tape, &loss);
            tape.backward(loss.total)?;
            let grads = nodes.param_ids.iter().map(|&id| tape.grad(id)).collect();
            Ok((bd, grads))
        })();
        let (bd, grads) = match step {
            Ok(ok) => ok,
            // A non-finite intermediate means the optimization blew up.
            Err(Error::NonFinite { .. }) => return Err(Error::Diverged { epoch }),
            Err(e) => return Err(e),
        };
        if !bd.total.is_finite() {
            return Err(Error::Diverged { epoch });
        }

        if !best_total.is_finite() || bd.total < best_total - cfg.plateau_tol * best_total.abs() {
            best_total = bd.total;
            best_epoch = epoch;
            best_state = state.clone();
        }

        let mut opt = std::mem::replace(&mut state.opt, crate::opt::AdamState::new(Default::default(), &[]));
        {
            let mut params: Vec<&mut Tensor> =
                state.named_params_mut().into_iter().map(|(_, t)| t).collect();
            opt.apply(&mut params, &grads)?;
        }
        state.opt = opt;
        history.push(bd);

        // plateau: no relative improvement of the best loss for a full
        // window of epochs
        if epoch - best_epoch >= cfg.plateau_window {
            break;
        }
    }

    Ok(TrainResult {
        state: best_state,
        history,
    })
}

/// Static (per-step) fitted variables of a trained model over a series.
pub fn fitted_variables(
    state: &ModelState,
    series: &FlowSeries,
    cities: &CitySet,
) -> Result<Vec<CityVariables>> {
    let cfg = &state.config;
    let prepared = prepare_data(series, cities, cfg, state.variant)?;
    let mut tape = Tape::new();
    let nodes = register_model(&mut tape, state, &prepared);
    let enc = encode_steps(&mut tape, &nodes, &prepared, cfg, state.variant)?;
    enc.vars
        .iter()
        .map(|&v| CityVariables::from_tensor(tape.value(v)))
        .collect()
}

/// One ablation row: trains a variant on all but the last step and
/// scores the one-step prediction against the held-out step.
#[derive(Clone, Debug)]
pub struct AblationOutcome {
    pub variant: Variant,
    pub metrics: Metrics,
}

pub fn ablation_run(
    series: &FlowSeries,
    cities: &CitySet,
    variant: Variant,
    cfg: &RunConfig,
    seed: u64,
) -> Result<AblationOutcome> {
    if series.steps() < 2 {
        return Err(Error::InsufficientHistory {
            needed: 2,
            got: series.steps(),
        });
    }
    let mut cfg = cfg.clone();
    if variant == Variant::Nc {
        cfg.contrastive = false;
    }
    let train_series = series.slice_steps(0, series.steps() - 1)?;
    let truth = series.matrix(series.steps() - 1);
    let result = train(&train_series, cities, &cfg, variant, seed)?;
    let out = forecast_flow(&result.state, &train_series, cities)?;
    Ok(AblationOutcome {
        variant,
        metrics: evaluate(&out.matrix, truth)?,
    })
}
