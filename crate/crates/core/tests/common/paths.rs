//! Finite-difference runners for every trainable path, shared by the
//! gradient test suite and the acceptance gate.

use super::{check_gradients, GradCheck};
use odflow_core::config::{RunConfig, Variant};
use odflow_core::gcn::{gcn_forward, GcnLayerNodes};
use odflow_core::gravity::{
    flow_from_vars, head_raw_forward, positive_transform, HeadNodes, HeadParams,
};
use odflow_core::loss::build_total_loss;
use odflow_core::model::{encode_steps, prepare_data, register_model, ModelState};
use odflow_core::seq::{nbeats_forward, BasisMatrix, NBeatsNodes, NBeatsStackParams};
use odflow_core::synth::{synthesize, SynthConfig, Synthesis};
use odflow_core::tape::{NodeId, Tape};
use odflow_core::tensor::Tensor;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn random_tensor(rng: &mut StdRng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::new(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-scale..scale))
            .collect(),
    )
    .unwrap()
}

/// Scalar readout used everywhere: sum of squares of the output.
fn readout(tape: &mut Tape, node: NodeId) -> NodeId {
    let sq = tape.square(node).unwrap();
    tape.sum(sq).unwrap()
}

/// Convolution layer stack: gradients w.r.t. embeddings, weights, biases.
pub fn gcn_layer_path(instances: u64) -> GradCheck {
    let mut report = GradCheck::default();
    for seed in 0..instances {
        let mut rng = StdRng::seed_from_u64(seed);
        let n = rng.random_range(3..=5);
        let dim = 4;
        let mut kernel = random_tensor(&mut rng, n, n, 0.4);
        for i in 0..n {
            for j in 0..i {
                let v = kernel.get(i, j);
                kernel.set(j, i, v);
            }
            kernel.set(i, i, 1.0);
        }
        let params = vec![
            random_tensor(&mut rng, n, dim, 0.8),
            random_tensor(&mut rng, dim, dim, 0.8),
            random_tensor(&mut rng, 1, dim, 0.5),
            random_tensor(&mut rng, dim, dim, 0.8),
            random_tensor(&mut rng, 1, dim, 0.5),
        ];
        let run = |p: &[Tensor]| -> (f64, Vec<Tensor>) {
            let mut tape = Tape::new();
            let kernel_node = tape.constant(kernel.clone());
            let ones = tape.constant(Tensor::ones(n, 1));
            let h = tape.param(p[0].clone());
            let layers = vec![
                GcnLayerNodes {
                    weight: tape.param(p[1].clone()),
                    bias: tape.param(p[2].clone()),
                },
                GcnLayerNodes {
                    weight: tape.param(p[3].clone()),
                    bias: tape.param(p[4].clone()),
                },
            ];
            let out = gcn_forward(&mut tape, kernel_node, h, &layers, ones).unwrap();
            let loss = readout(&mut tape, out);
            let ids = vec![
                h,
                layers[0].weight,
                layers[0].bias,
                layers[1].weight,
                layers[1].bias,
            ];
            let value = tape.value(loss).scalar_value().unwrap();
            let grads = tape.gradients(loss, &ids).unwrap();
            (value, grads)
        };
        let grads = run(&params).1;
        let eval = |p: &[Tensor]| run(p).0;
        report.merge(check_gradients(&params, &grads, &eval, 6, &mut rng));
    }
    report
}

/// Representation-to-variables head with the positive transform.
pub fn head_path(instances: u64) -> GradCheck {
    let mut report = GradCheck::default();
    for seed in 100..100 + instances {
        let mut rng = StdRng::seed_from_u64(seed);
        let n = rng.random_range(2..=5);
        let input = random_tensor(&mut rng, n, 6, 1.0);
        let head = HeadParams::init(6, 8, &mut rng);
        let params = vec![
            head.w1.clone(),
            head.b1.clone(),
            head.w2.clone(),
            head.b2.clone(),
        ];
        let run = |p: &[Tensor]| -> (f64, Vec<Tensor>) {
            let mut tape = Tape::new();
            let ones = tape.constant(Tensor::ones(n, 1));
            let hx = tape.constant(input.clone());
            let nodes = HeadNodes {
                w1: tape.param(p[0].clone()),
                b1: tape.param(p[1].clone()),
                w2: tape.param(p[2].clone()),
                b2: tape.param(p[3].clone()),
            };
            let raw = head_raw_forward(&mut tape, hx, &nodes, ones).unwrap();
            let vars = positive_transform(&mut tape, raw).unwrap();
            let loss = readout(&mut tape, vars);
            let value = tape.value(loss).scalar_value().unwrap();
            let grads = tape
                .gradients(loss, &[nodes.w1, nodes.b1, nodes.w2, nodes.b2])
                .unwrap();
            (value, grads)
        };
        let grads = run(&params).1;
        let eval = |p: &[Tensor]| run(p).0;
        report.merge(check_gradients(&params, &grads, &eval, 6, &mut rng));
    }
    report
}

/// Closed-form flow composition w.r.t. all four variable columns.
pub fn flow_composition_path(instances: u64) -> GradCheck {
    let mut report = GradCheck::default();
    for seed in 200..200 + instances {
        let mut rng = StdRng::seed_from_u64(seed);
        let n = rng.random_range(2..=5);
        let synth = synthesize(&SynthConfig {
            cities: n,
            steps: 1,
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        let dist_sq = odflow_core::geo::DistanceMatrix::from_cities(&synth.cities)
            .unwrap()
            .as_tensor()
            .map(|d| (d * d) * 1e-6);
        let mut vars = Tensor::zeros(n, 4);
        for c in 0..n {
            vars.set(c, 0, rng.random_range(0.2..2.0));
            vars.set(c, 1, rng.random_range(0.5..3.0));
            vars.set(c, 2, rng.random_range(0.2..2.0));
            vars.set(c, 3, rng.random_range(0.5..3.0));
        }
        let params = vec![vars];
        let run = |p: &[Tensor]| -> (f64, Vec<Tensor>) {
            let mut tape = Tape::new();
            let v = tape.param(p[0].clone());
            let d = tape.constant(dist_sq.clone());
            let ones = tape.constant(Tensor::ones(n, 1));
            let flow = flow_from_vars(&mut tape, v, d, ones).unwrap();
            let loss = readout(&mut tape, flow);
            let value = tape.value(loss).scalar_value().unwrap();
            let grads = tape.gradients(loss, &[v]).unwrap();
            (value, grads)
        };
        let grads = run(&params).1;
        let eval = |p: &[Tensor]| run(p).0;
        report.merge(check_gradients(&params, &grads, &eval, 10, &mut rng));
    }
    report
}

fn flatten_stack(stack: &NBeatsStackParams) -> Vec<Tensor> {
    stack
        .blocks
        .iter()
        .flat_map(|b| {
            let mut v = vec![
                b.w1.clone(),
                b.b1.clone(),
                b.w2.clone(),
                b.b2.clone(),
                b.theta_backcast.clone(),
                b.theta_forecast.clone(),
            ];
            if let BasisMatrix::Learned(t) = &b.basis_backcast {
                v.push(t.clone());
            }
            if let BasisMatrix::Learned(t) = &b.basis_forecast {
                v.push(t.clone());
            }
            v
        })
        .collect()
}

fn rebuild_stack(stack: &NBeatsStackParams, p: &[Tensor]) -> NBeatsStackParams {
    let mut s = stack.clone();
    let mut it = p.iter().cloned();
    for b in &mut s.blocks {
        b.w1 = it.next().unwrap();
        b.b1 = it.next().unwrap();
        b.w2 = it.next().unwrap();
        b.b2 = it.next().unwrap();
        b.theta_backcast = it.next().unwrap();
        b.theta_forecast = it.next().unwrap();
        if let BasisMatrix::Learned(t) = &mut b.basis_backcast {
            *t = it.next().unwrap();
        }
        if let BasisMatrix::Learned(t) = &mut b.basis_forecast {
            *t = it.next().unwrap();
        }
    }
    s
}

/// Forecaster stack w.r.t. trunk, coefficient, and learned basis weights.
pub fn forecaster_path(instances: u64) -> GradCheck {
    let mut report = GradCheck::default();
    for seed in 300..300 + instances {
        let mut rng = StdRng::seed_from_u64(seed);
        let channels = rng.random_range(2..=6);
        let stack = NBeatsStackParams::init(5, 1, 8, 6, &mut rng);
        let input = random_tensor(&mut rng, channels, 5, 1.0);
        let params = flatten_stack(&stack);
        let eval = |p: &[Tensor]| -> f64 {
            let s = rebuild_stack(&stack, p);
            let mut tape = Tape::new();
            let nodes = NBeatsNodes::register(&mut tape, &s);
            let x = tape.constant(input.clone());
            let trace = nbeats_forward(&mut tape, x, &nodes, 5, 1).unwrap();
            let loss = readout(&mut tape, trace.forecast);
            tape.value(loss).scalar_value().unwrap()
        };
        let grads = {
            let mut tape = Tape::new();
            let nodes = NBeatsNodes::register(&mut tape, &stack);
            let x = tape.constant(input.clone());
            let trace = nbeats_forward(&mut tape, x, &nodes, 5, 1).unwrap();
            let loss = readout(&mut tape, trace.forecast);
            let mut ids = Vec::new();
            for (b, p) in stack.blocks.iter().zip(nodes.blocks.iter()) {
                ids.extend([p.w1, p.b1, p.w2, p.b2, p.theta_backcast, p.theta_forecast]);
                if matches!(b.basis_backcast, BasisMatrix::Learned(_)) {
                    ids.push(p.basis_backcast);
                }
                if matches!(b.basis_forecast, BasisMatrix::Learned(_)) {
                    ids.push(p.basis_forecast);
                }
            }
            tape.gradients(loss, &ids).unwrap()
        };
        report.merge(check_gradients(&params, &grads, &eval, 4, &mut rng));
    }
    report
}

pub fn miniature_setup(seed: u64) -> (Synthesis, RunConfig) {
    let cfg = RunConfig {
        window: 3,
        nbeats_width: 8,
        coeff_len: 6,
        head_hidden: 8,
        contrastive_normalize: true,
        ..RunConfig::default()
    };
    let synth = synthesize(&SynthConfig {
        cities: 3,
        steps: 6,
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    (synth, cfg)
}

pub fn total_loss_value(state: &ModelState, synth: &Synthesis, cfg: &RunConfig) -> f64 {
    let prepared = prepare_data(&synth.flows, &synth.cities, cfg, Variant::Full).unwrap();
    let mut tape = Tape::new();
    let nodes = register_model(&mut tape, state, &prepared);
    let enc = encode_steps(&mut tape, &nodes, &prepared, cfg, Variant::Full).unwrap();
    let loss = build_total_loss(
        &mut tape,
        &nodes,
        &enc,
        &prepared,
        &synth.flows,
        cfg,
        Variant::Full,
    )
    .unwrap();
    tape.value(loss.total).scalar_value().unwrap()
}

pub fn total_loss_gradients(state: &ModelState, synth: &Synthesis, cfg: &RunConfig) -> Vec<Tensor> {
    let prepared = prepare_data(&synth.flows, &synth.cities, cfg, Variant::Full).unwrap();
    let mut tape = Tape::new();
    let nodes = register_model(&mut tape, state, &prepared);
    let enc = encode_steps(&mut tape, &nodes, &prepared, cfg, Variant::Full).unwrap();
    let loss = build_total_loss(
        &mut tape,
        &nodes,
        &enc,
        &prepared,
        &synth.flows,
        cfg,
        Variant::Full,
    )
    .unwrap();
    tape.backward(loss.total).unwrap();
    nodes.param_ids.iter().map(|&id| tape.grad(id)).collect()
}

/// End-to-end objective w.r.t. every parameter group.
pub fn total_loss_path(instances: u64) -> GradCheck {
    let mut report = GradCheck::default();
    for seed in 400..400 + instances {
        let (synth, cfg) = miniature_setup(seed);
        let state = ModelState::init(3, &cfg, Variant::Full, seed);
        let params: Vec<Tensor> = state
            .named_params()
            .iter()
            .map(|(_, t)| (*t).clone())
            .collect();
        let grads = total_loss_gradients(&state, &synth, &cfg);
        let eval = |p: &[Tensor]| -> f64 {
            let mut s = state.clone();
            for ((_, slot), src) in s.named_params_mut().into_iter().zip(p.iter()) {
                *slot = src.clone();
            }
            total_loss_value(&s, &synth, &cfg)
        };
        let mut rng = StdRng::seed_from_u64(seed ^ 0xabcdef);
        report.merge(check_gradients(&params, &grads, &eval, 2, &mut rng));
    }
    report
}
