//! Synthetic origin-destination datasets with known ground truth.
//!
//! Cities are sampled in a coordinate box; each gets four positive
//! variables drawn from configured ranges with spatially smooth
//! structure (nearby cities get similar values) and a shared "activity"
//! component so inflow and outflow totals correlate. Variables drift
//! smoothly over time (a 12-step seasonal swing plus a mild linear
//! trend), and flows are composed per step from the closed-form model
//! in [`crate::gravity`], optionally scrambled by multiplicative
//! log-normal noise.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::flow::FlowSeries;
use crate::geo::{haversine_km, City, CitySet, DistanceMatrix};
use crate::gravity::{flow_matrix, CityVariables};
use crate::tensor::Tensor;

/// Seasonal period of the synthetic drift, in steps.
pub const DRIFT_PERIOD: f64 = 12.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub cities: usize,
    pub steps: usize,
    pub lat_range: (f64, f64),
    pub lon_range: (f64, f64),
    pub alpha_delta_range: (f64, f64),
    pub sigma_delta_range: (f64, f64),
    pub alpha_mu_range: (f64, f64),
    pub sigma_mu_range: (f64, f64),
    /// Relative amplitude of the temporal drift; 0 freezes the truth.
    pub drift_amplitude: f64,
    /// Standard deviation of the multiplicative log-normal noise.
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            cities: 14,
            steps: 25,
            lat_range: (29.0, 34.0),
            lon_range: (118.0, 123.0),
            alpha_delta_range: (0.5, 2.0),
            sigma_delta_range: (0.0008, 0.003),
            alpha_mu_range: (0.5, 2.0),
            sigma_mu_range: (0.0008, 0.003),
            drift_amplitude: 0.3,
            noise_level: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Err(Error::InvalidConfig { reason });
        if self.cities < 2 {
            return fail(format!("cities must be >= 2, got {}", self.cities));
        }
        if self.steps == 0 {
            return fail("steps must be >= 1".to_string());
        }
        for (name, (lo, hi)) in [
            ("alpha_delta_range", self.alpha_delta_range),
            ("sigma_delta_range", self.sigma_delta_range),
            ("alpha_mu_range", self.alpha_mu_range),
            ("sigma_mu_range", self.sigma_mu_range),
        ] {
            if !lo.is_finite() || !hi.is_finite() || lo <= 0.0 || hi < lo {
                return fail(format!("{name} must be positive and ordered, got ({lo}, {hi})"));
            }
        }
        if self.lat_range.0 >= self.lat_range.1 || self.lon_range.0 >= self.lon_range.1 {
            return fail("coordinate box must be non-degenerate".to_string());
        }
        if !(-90.0..=90.0).contains(&self.lat_range.0)
            || !(-90.0..=90.0).contains(&self.lat_range.1)
            || !(-180.0..=180.0).contains(&self.lon_range.0)
            || !(-180.0..=180.0).contains(&self.lon_range.1)
        {
            return fail("coordinate box out of range".to_string());
        }
        if !(0.0..=0.6).contains(&self.drift_amplitude) {
            return fail(format!(
                "drift_amplitude must be in [0, 0.6], got {}",
                self.drift_amplitude
            ));
        }
        if self.noise_level.is_nan() || self.noise_level < 0.0 {
            return fail(format!("noise_level must be >= 0, got {}", self.noise_level));
        }
        Ok(())
    }
}

/// A generated dataset plus its per-step ground truth.
#[derive(Clone, Debug)]
pub struct Synthesis {
    pub cities: CitySet,
    pub flows: FlowSeries,
    pub truth: Vec<CityVariables>,
}

/// Smooth random field over the cities: a few Gaussian bumps anchored
/// in the box, min-max normalized to `[0, 1]` across cities.
fn smooth_field(rng: &mut StdRng, coords: &[(f64, f64)], cfg: &SynthConfig) -> Vec<f64> {
    let diag = haversine_km(
        (cfg.lat_range.0, cfg.lon_range.0),
        (cfg.lat_range.1, cfg.lon_range.1),
    )
    .unwrap_or(500.0)
    .max(1.0);
    let len_scale = 0.3 * diag;
    let anchors: Vec<((f64, f64), f64)> = (0..3)
        .map(|_| {
            let lat = rng.random_range(cfg.lat_range.0..cfg.lat_range.1);
            let lon = rng.random_range(cfg.lon_range.0..cfg.lon_range.1);
            let w = rng.random_range(0.2..1.0);
            ((lat, lon), w)
        })
        .collect();
    let raw: Vec<f64> = coords
        .iter()
        .map(|&c| {
            anchors
                .iter()
                .map(|&(a, w)| {
                    let d = haversine_km(c, a).unwrap();
                    w * (-d * d / (2.0 * len_scale * len_scale)).exp()
                })
                .sum()
        })
        .collect();
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-12 {
        return vec![0.5; coords.len()];
    }
    raw.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

fn standard_normal(rng: &mut StdRng) -> f64 {
    // Box-Muller; u1 in (0, 1] avoids ln(0).
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn month_label(t: usize) -> String {
    format!("{:04}-{:02}", 2020 + t / 12, 1 + t % 12)
}

/// Generates a dataset. Deterministic for a given config (same seed,
/// same draws, bit-identical output).
pub fn synthesize(cfg: &SynthConfig) -> Result<Synthesis> {
    cfg.validate()?;
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let n = cfg.cities;

    let coords: Vec<(f64, f64)> = (0..n)
        .map(|_| {
            (
                rng.random_range(cfg.lat_range.0..cfg.lat_range.1),
                rng.random_range(cfg.lon_range.0..cfg.lon_range.1),
            )
        })
        .collect();
    let cities = CitySet::new(
        coords
            .iter()
            .enumerate()
            .map(|(id, &(lat, lon))| City {
                id,
                name: format!("city{id:02}"),
                lat,
                lon,
            })
            .collect(),
    )?;
    let distances = DistanceMatrix::from_cities(&cities)?;

    // Shared activity drives both intensities so that inflow and
    // outflow totals correlate; a second field shapes attenuations and
    // a third the drift phase.
    let activity = smooth_field(&mut rng, &coords, cfg);
    let spread = smooth_field(&mut rng, &coords, cfg);
    let phase_field = smooth_field(&mut rng, &coords, cfg);

    let draw_mix = |rng: &mut StdRng, field: &[f64], c: usize| -> f64 {
        0.65 * field[c] + 0.35 * rng.random::<f64>()
    };
    let range_map = |range: (f64, f64), mix: f64| range.0 + (range.1 - range.0) * mix;

    let mut base = CityVariables::constant(n, 1.0, 1.0, 1.0, 1.0);
    let mut phases = vec![0.0; n];
    let mut trends = vec![0.0; n];
    for c in 0..n {
        base.alpha_delta[c] = range_map(cfg.alpha_delta_range, draw_mix(&mut rng, &activity, c));
        base.sigma_delta[c] = range_map(cfg.sigma_delta_range, draw_mix(&mut rng, &spread, c));
        base.alpha_mu[c] = range_map(cfg.alpha_mu_range, draw_mix(&mut rng, &activity, c));
        base.sigma_mu[c] = range_map(cfg.sigma_mu_range, draw_mix(&mut rng, &spread, c));
        phases[c] = std::f64::consts::TAU * (0.7 * phase_field[c] + 0.3 * rng.random::<f64>());
        trends[c] = 2.0 * rng.random::<f64>() - 1.0;
    }

    let horizon = (cfg.steps.max(2) - 1) as f64;
    let mut truth = Vec::with_capacity(cfg.steps);
    let mut matrices = Vec::with_capacity(cfg.steps);
    let mut labels = Vec::with_capacity(cfg.steps);
    for t in 0..cfg.steps {
        let tf = t as f64;
        let mut vars = base.clone();
        for c in 0..n {
            let season = (std::f64::consts::TAU * tf / DRIFT_PERIOD + phases[c]).sin();
            let alpha_mult =
                1.0 + cfg.drift_amplitude * season + 0.5 * cfg.drift_amplitude * trends[c] * tf / horizon;
            let sigma_mult = 1.0
                + 0.3 * cfg.drift_amplitude
                    * (std::f64::consts::TAU * tf / (2.0 * DRIFT_PERIOD) + phases[c] + 1.0).sin();
            vars.alpha_delta[c] = base.alpha_delta[c] * alpha_mult;
            vars.alpha_mu[c] = base.alpha_mu[c] * alpha_mult;
            vars.sigma_delta[c] = base.sigma_delta[c] * sigma_mult;
            vars.sigma_mu[c] = base.sigma_mu[c] * sigma_mult;
        }
        let mut flows = flow_matrix(&vars, &distances)?;
        if cfg.noise_level > 0.0 {
            let noisy: Vec<f64> = flows
                .data()
                .iter()
                .map(|&v| v * (cfg.noise_level * standard_normal(&mut rng)).exp())
                .collect();
            flows = Tensor::new(n, n, noisy)?;
        }
        truth.push(vars);
        matrices.push(flows);
        labels.push(month_label(t));
    }

    Ok(Synthesis {
        cities,
        flows: FlowSeries::from_matrices(labels, matrices)?,
        truth,
    })
}
