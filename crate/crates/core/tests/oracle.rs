//! Equivalence of the vectorized/tape implementations against
//! independent straight-loop evaluations on small random instances.

mod common;

use common::{
    mat_of, naive_armf, naive_distances, naive_kernel, naive_pattern_similarity,
    naive_total_loss,
};
use odflow_core::config::{RunConfig, Variant};
use odflow_core::gcn::{build_mobility_kernel, pattern_similarity};
use odflow_core::geo::{DistanceMatrix, GeographyGraph};
use odflow_core::gravity::{flow_from_vars, flow_matrix, CityVariables};
use odflow_core::loss::{breakdown, build_total_loss};
use odflow_core::model::{encode_steps, prepare_data, register_model, ModelState};
use odflow_core::synth::{synthesize, SynthConfig};
use odflow_core::tape::Tape;
use odflow_core::tensor::Tensor;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

const TOL: f64 = 1e-10;

fn random_tensor(rng: &mut StdRng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::new(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

fn assert_close(got: f64, want: f64, what: &str) {
    assert!(
        (got - want).abs() <= TOL * want.abs().max(1.0),
        "{what}: got {got}, oracle {want}"
    );
}

#[test]
fn pattern_similarity_matches_loops() {
    let mut rng = StdRng::seed_from_u64(101);
    for trial in 0..30 {
        let n = rng.random_range(2..=6);
        // include values outside [0,1] so negative similarities occur
        let a = random_tensor(&mut rng, n, n, -0.5, 1.8);
        let b = random_tensor(&mut rng, n, n, -0.5, 1.8);
        let got = pattern_similarity(&a, &b).unwrap();
        let want = naive_pattern_similarity(&mat_of(&a), &mat_of(&b));
        for i in 0..n {
            for j in 0..n {
                assert_close(got.get(i, j), want[i][j], &format!("trial {trial} c[{i}][{j}]"));
            }
        }
    }
}

#[test]
fn mobility_kernel_matches_four_loop_oracle() {
    let mut rng = StdRng::seed_from_u64(777);
    for trial in 0..20 {
        let n = rng.random_range(3..=6);
        let synth = synthesize(&SynthConfig {
            cities: n,
            steps: 1,
            seed: 1000 + trial,
            ..SynthConfig::default()
        })
        .unwrap();
        let dist = DistanceMatrix::from_cities(&synth.cities).unwrap();
        let eps = rng.random_range(50.0..400.0);
        let graph = GeographyGraph::from_distances(&dist, eps).unwrap();
        let flow = synth.flows.matrix(0);

        let got = build_mobility_kernel(flow, &graph, &dist).unwrap();
        let want = naive_kernel(&mat_of(flow), &naive_distances(&synth.cities), eps);
        for u in 0..n {
            for v in 0..n {
                assert_close(
                    got.as_tensor().get(u, v),
                    want[u][v],
                    &format!("trial {trial} m[{u}][{v}] eps {eps}"),
                );
            }
        }
    }
}

#[test]
fn flow_composition_matches_two_loop_oracle() {
    let mut rng = StdRng::seed_from_u64(4242);
    for trial in 0..20 {
        let n = rng.random_range(3..=6);
        let synth = synthesize(&SynthConfig {
            cities: n,
            steps: 1,
            seed: 2000 + trial,
            ..SynthConfig::default()
        })
        .unwrap();
        let dist = DistanceMatrix::from_cities(&synth.cities).unwrap();
        let vars = CityVariables::new(
            (0..n).map(|_| rng.random_range(0.2..2.5)).collect(),
            (0..n).map(|_| rng.random_range(0.0002..0.004)).collect(),
            (0..n).map(|_| rng.random_range(0.2..2.5)).collect(),
            (0..n).map(|_| rng.random_range(0.0002..0.004)).collect(),
        )
        .unwrap();
        let want = naive_armf(&vars, &naive_distances(&synth.cities));

        // plain composition
        let plain = flow_matrix(&vars, &dist).unwrap();
        // tape composition
        let mut tape = Tape::new();
        let v = tape.param(vars.to_tensor());
        let dist_sq = tape.constant(dist.as_tensor().map(|d| d * d));
        let ones = tape.constant(Tensor::ones(n, 1));
        let node = flow_from_vars(&mut tape, v, dist_sq, ones).unwrap();

        for i in 0..n {
            for j in 0..n {
                assert_close(plain.get(i, j), want[i][j], &format!("trial {trial} plain[{i}][{j}]"));
                assert_close(
                    tape.value(node).get(i, j),
                    want[i][j],
                    &format!("trial {trial} tape[{i}][{j}]"),
                );
            }
        }
    }
}

fn total_loss_case(seed: u64, variant: Variant, mutate: impl Fn(&mut RunConfig)) {
    let mut rng = StdRng::seed_from_u64(seed);
    let n = rng.random_range(3..=6);
    let steps = rng.random_range(2..=4);
    // window smaller than the series so forecast terms appear sometimes
    let mut cfg = RunConfig {
        window: 2,
        nbeats_width: 8,
        coeff_len: 6,
        head_hidden: 8,
        contrastive_normalize: true,
        ..RunConfig::default()
    };
    mutate(&mut cfg);
    let synth = synthesize(&SynthConfig {
        cities: n,
        steps,
        seed: seed.wrapping_mul(31),
        ..SynthConfig::default()
    })
    .unwrap();
    let state = ModelState::init(n, &cfg, variant, seed);

    let prepared = prepare_data(&synth.flows, &synth.cities, &cfg, variant).unwrap();
    let mut tape = Tape::new();
    let nodes = register_model(&mut tape, &state, &prepared);
    let enc = encode_steps(&mut tape, &nodes, &prepared, &cfg, variant).unwrap();
    let loss =
        build_total_loss(&mut tape, &nodes, &enc, &prepared, &synth.flows, &cfg, variant).unwrap();
    let got = breakdown(&tape, &loss);

    let want = naive_total_loss(&state, &synth.flows, &synth.cities, variant);
    assert_close(got.total, want, &format!("total loss seed {seed} {variant:?}"));
    let parts = got.reconstruction + got.cross_city + got.cross_time;
    assert!((got.total - parts).abs() < 1e-12);
}

#[test]
fn total_loss_matches_straight_loop_oracle() {
    for seed in 0..12 {
        total_loss_case(seed, Variant::Full, |_| {});
    }
}

#[test]
fn total_loss_oracle_covers_variants_and_modes() {
    total_loss_case(100, Variant::Nc, |_| {});
    total_loss_case(101, Variant::GcnSil, |_| {});
    total_loss_case(102, Variant::Sil, |_| {});
    total_loss_case(103, Variant::Dhg, |_| {});
    total_loss_case(104, Variant::Full, |cfg| cfg.squared_norm = true);
    total_loss_case(105, Variant::Full, |cfg| cfg.consecutive_pairs_only = true);
    total_loss_case(106, Variant::Full, |cfg| {
        cfg.contrastive_normalize = false;
        cfg.contrastive_weight = 0.5;
    });
    total_loss_case(107, Variant::Full, |cfg| {
        cfg.feature_mode = odflow_core::config::FeatureMode::Off;
    });
    total_loss_case(108, Variant::Full, |cfg| {
        cfg.feature_mode = odflow_core::config::FeatureMode::Head;
    });
    total_loss_case(109, Variant::Full, |cfg| cfg.totals_include_diagonal = false);
}

#[test]
fn reconstruction_only_single_step_is_frobenius_distance() {
    // one-step series, contrastive off: the loss is a single Frobenius term
    let cfg = RunConfig {
        contrastive: false,
        nbeats_width: 8,
        coeff_len: 6,
        head_hidden: 8,
        ..RunConfig::default()
    };
    let synth = synthesize(&SynthConfig {
        cities: 3,
        steps: 1,
        seed: 5,
        ..SynthConfig::default()
    })
    .unwrap();
    let state = ModelState::init(3, &cfg, Variant::Full, 1);
    let prepared = prepare_data(&synth.flows, &synth.cities, &cfg, Variant::Full).unwrap();
    let mut tape = Tape::new();
    let nodes = register_model(&mut tape, &state, &prepared);
    let enc = encode_steps(&mut tape, &nodes, &prepared, &cfg, Variant::Full).unwrap();
    let loss = build_total_loss(
        &mut tape,
        &nodes,
        &enc,
        &prepared,
        &synth.flows,
        &cfg,
        Variant::Full,
    )
    .unwrap();
    let got = breakdown(&tape, &loss);
    assert_eq!(got.cross_city, 0.0);
    assert_eq!(got.cross_time, 0.0);

    // recompute the single static term by hand
    let dist = DistanceMatrix::from_cities(&synth.cities).unwrap();
    let vars = CityVariables::from_tensor(tape.value(enc.vars[0])).unwrap();
    let composed = flow_matrix(&vars, &dist).unwrap();
    let want = composed.sub(synth.flows.matrix(0)).unwrap().frobenius_norm();
    assert_close(got.total, want, "single-step loss");
}
