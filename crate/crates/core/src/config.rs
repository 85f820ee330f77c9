//! Run configuration: a flat `key = value` text format with strict
//! unknown-key rejection, shared by the CLI and checkpoint snapshots.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::flow::NormalizeMode;
use crate::synth::SynthConfig;

/// Which model pieces a run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Kernel convolution + sequential forecaster + contrastive terms.
    Full,
    /// Static prediction only: averages encoded observations, no
    /// sequential module.
    Dhg,
    /// No graph convolution: raw per-city flow summaries feed the
    /// sequential path.
    Sil,
    /// Plain normalized-adjacency convolution instead of the flow-aware
    /// kernel.
    GcnSil,
    /// Full wiring with contrastive terms disabled.
    Nc,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "dhg" => Ok(Variant::Dhg),
            "sil" => Ok(Variant::Sil),
            "gcn-sil" => Ok(Variant::GcnSil),
            "nc" => Ok(Variant::Nc),
            _ => Err(Error::UnknownVariant { name: s.to_string() }),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Dhg => "dhg",
            Variant::Sil => "sil",
            Variant::GcnSil => "gcn-sil",
            Variant::Nc => "nc",
        }
    }

    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::Dhg,
        Variant::Sil,
        Variant::GcnSil,
        Variant::Nc,
    ];
}

/// How per-step global features reach the forecaster.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureMode {
    /// Extra forecaster channels alongside the variable trajectories.
    Channels,
    /// Concatenated onto every city representation before the head.
    Head,
    /// Not used.
    Off,
}

impl FeatureMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "channels" => Ok(FeatureMode::Channels),
            "head" => Ok(FeatureMode::Head),
            "off" => Ok(FeatureMode::Off),
            _ => Err(Error::InvalidConfig {
                reason: format!("feature_mode must be channels|head|off, got `{s}`"),
            }),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureMode::Channels => "channels",
            FeatureMode::Head => "head",
            FeatureMode::Off => "off",
        }
    }
}

fn normalize_name(mode: NormalizeMode) -> &'static str {
    match mode {
        NormalizeMode::GlobalMax => "global_max",
        NormalizeMode::PerStep => "per_step",
        NormalizeMode::None => "none",
    }
}

fn parse_normalize(s: &str) -> Result<NormalizeMode> {
    match s {
        "global_max" => Ok(NormalizeMode::GlobalMax),
        "per_step" => Ok(NormalizeMode::PerStep),
        "none" => Ok(NormalizeMode::None),
        _ => Err(Error::InvalidConfig {
            reason: format!("normalize must be global_max|per_step|none, got `{s}`"),
        }),
    }
}

/// Everything a run needs. Defaults follow the reference setup:
/// window 5, embedding 8, forecaster width 256, coefficient length 32,
/// margins 0.1, learning rate 0.001.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub cities_path: Option<PathBuf>,
    pub flows_path: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,

    pub epsilon_km: f64,
    /// Distance slack for the relaxed comparison set; defaults to
    /// one tenth of `epsilon_km` when unset.
    pub tau_km: Option<f64>,

    pub window: usize,
    pub embed_dim: usize,
    pub head_hidden: usize,
    pub gcn_layers: usize,
    pub nbeats_width: usize,
    pub coeff_len: usize,

    pub margin_delta: f64,
    pub margin_mu: f64,
    pub contrastive: bool,
    pub contrastive_weight: f64,
    pub contrastive_normalize: bool,
    pub consecutive_pairs_only: bool,
    pub totals_include_diagonal: bool,

    pub squared_norm: bool,
    pub feature_mode: FeatureMode,
    pub normalize: NormalizeMode,

    pub learning_rate: f64,
    pub epochs: usize,
    pub plateau_window: usize,
    pub plateau_tol: f64,
    pub seed: u64,
    pub variant: Variant,

    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            cities_path: None,
            flows_path: None,
            out_dir: None,
            checkpoint_path: None,
            epsilon_km: 100.0,
            tau_km: None,
            window: 5,
            embed_dim: 8,
            head_hidden: 16,
            gcn_layers: 2,
            nbeats_width: 256,
            coeff_len: 32,
            margin_delta: 0.1,
            margin_mu: 0.1,
            contrastive: true,
            contrastive_weight: 1.0,
            contrastive_normalize: false,
            consecutive_pairs_only: false,
            totals_include_diagonal: true,
            squared_norm: false,
            feature_mode: FeatureMode::Channels,
            normalize: NormalizeMode::GlobalMax,
            learning_rate: 0.001,
            epochs: 2000,
            plateau_window: 100,
            plateau_tol: 1e-6,
            seed: 0,
            variant: Variant::Full,
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    /// Effective comparison-set slack.
    pub fn effective_tau_km(&self) -> f64 {
        self.tau_km.unwrap_or(0.1 * self.epsilon_km)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Err(Error::InvalidConfig { reason });
        if self.epsilon_km.is_nan() || self.epsilon_km < 0.0 {
            return fail(format!("epsilon_km must be >= 0, got {}", self.epsilon_km));
        }
        if let Some(tau) = self.tau_km {
            if tau.is_nan() || tau < 0.0 {
                return fail(format!("tau_km must be >= 0, got {tau}"));
            }
        }
        if self.window < 1 {
            return fail("window must be >= 1".into());
        }
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("head_hidden", self.head_hidden),
            ("gcn_layers", self.gcn_layers),
            ("nbeats_width", self.nbeats_width),
            ("coeff_len", self.coeff_len),
            ("epochs", self.epochs),
            ("plateau_window", self.plateau_window),
        ] {
            if v == 0 {
                return fail(format!("{name} must be >= 1"));
            }
        }
        let non_negative = |v: f64| v.is_finite() && v >= 0.0;
        if !non_negative(self.margin_delta) || !non_negative(self.margin_mu) {
            return fail("margins must be >= 0".into());
        }
        if !non_negative(self.contrastive_weight) {
            return fail("contrastive_weight must be >= 0".into());
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return fail("learning_rate must be > 0".into());
        }
        if !non_negative(self.plateau_tol) {
            return fail("plateau_tol must be >= 0".into());
        }
        self.synth.validate()
    }

    /// Parses the flat text format. Unknown keys are rejected by name.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::InvalidConfig {
                reason: format!("line {}: expected `key = value`, got `{line}`", lineno + 1),
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_str(&text)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| Error::InvalidConfig {
                reason: format!("bad value `{value}` for `{key}`"),
            })
        }
        fn boolean(key: &str, value: &str) -> Result<bool> {
            match value {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(Error::InvalidConfig {
                    reason: format!("bad bool `{value}` for `{key}`"),
                }),
            }
        }
        fn pair(key: &str, value: &str) -> Result<(f64, f64)> {
            let (a, b) = value.split_once(',').ok_or_else(|| Error::InvalidConfig {
                reason: format!("`{key}` expects `lo,hi`, got `{value}`"),
            })?;
            Ok((num(key, a.trim())?, num(key, b.trim())?))
        }
        match key {
            "cities" => self.cities_path = Some(PathBuf::from(value)),
            "flows" => self.flows_path = Some(PathBuf::from(value)),
            "out" => self.out_dir = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint_path = Some(PathBuf::from(value)),
            "epsilon_km" => self.epsilon_km = num(key, value)?,
            "tau_km" => self.tau_km = Some(num(key, value)?),
            "window" => self.window = num(key, value)?,
            "embed_dim" => self.embed_dim = num(key, value)?,
            "head_hidden" => self.head_hidden = num(key, value)?,
            "gcn_layers" => self.gcn_layers = num(key, value)?,
            "nbeats_width" => self.nbeats_width = num(key, value)?,
            "coeff_len" => self.coeff_len = num(key, value)?,
            "margin_delta" => self.margin_delta = num(key, value)?,
            "margin_mu" => self.margin_mu = num(key, value)?,
            "contrastive" => self.contrastive = boolean(key, value)?,
            "contrastive_weight" => self.contrastive_weight = num(key, value)?,
            "contrastive_normalize" => self.contrastive_normalize = boolean(key, value)?,
            "consecutive_pairs_only" => self.consecutive_pairs_only = boolean(key, value)?,
            "totals_include_diagonal" => self.totals_include_diagonal = boolean(key, value)?,
            "squared_norm" => self.squared_norm = boolean(key, value)?,
            "feature_mode" => self.feature_mode = FeatureMode::parse(value)?,
            "normalize" => self.normalize = parse_normalize(value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "plateau_window" => self.plateau_window = num(key, value)?,
            "plateau_tol" => self.plateau_tol = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "variant" => self.variant = Variant::parse(value)?,
            "synth_cities" => self.synth.cities = num(key, value)?,
            "synth_steps" => self.synth.steps = num(key, value)?,
            "synth_lat" => self.synth.lat_range = pair(key, value)?,
            "synth_lon" => self.synth.lon_range = pair(key, value)?,
            "synth_alpha_delta" => self.synth.alpha_delta_range = pair(key, value)?,
            "synth_sigma_delta" => self.synth.sigma_delta_range = pair(key, value)?,
            "synth_alpha_mu" => self.synth.alpha_mu_range = pair(key, value)?,
            "synth_sigma_mu" => self.synth.sigma_mu_range = pair(key, value)?,
            "synth_drift" => self.synth.drift_amplitude = num(key, value)?,
            "synth_noise" => self.synth.noise_level = num(key, value)?,
            "synth_seed" => self.synth.seed = num(key, value)?,
            _ => {
                return Err(Error::UnknownConfigKey {
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    /// Serializes every key in a fixed order; `parse_str` round-trips
    /// the result exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        if let Some(p) = &self.cities_path {
            kv("cities", p.display().to_string());
        }
        if let Some(p) = &self.flows_path {
            kv("flows", p.display().to_string());
        }
        if let Some(p) = &self.out_dir {
            kv("out", p.display().to_string());
        }
        if let Some(p) = &self.checkpoint_path {
            kv("checkpoint", p.display().to_string());
        }
        kv("epsilon_km", format!("{:?}", self.epsilon_km));
        if let Some(tau) = self.tau_km {
            kv("tau_km", format!("{tau:?}"));
        }
        kv("window", self.window.to_string());
        kv("embed_dim", self.embed_dim.to_string());
        kv("head_hidden", self.head_hidden.to_string());
        kv("gcn_layers", self.gcn_layers.to_string());
        kv("nbeats_width", self.nbeats_width.to_string());
        kv("coeff_len", self.coeff_len.to_string());
        kv("margin_delta", format!("{:?}", self.margin_delta));
        kv("margin_mu", format!("{:?}", self.margin_mu));
        kv("contrastive", self.contrastive.to_string());
        kv("contrastive_weight", format!("{:?}", self.contrastive_weight));
        kv("contrastive_normalize", self.contrastive_normalize.to_string());
        kv("consecutive_pairs_only", self.consecutive_pairs_only.to_string());
        kv("totals_include_diagonal", self.totals_include_diagonal.to_string());
        kv("squared_norm", self.squared_norm.to_string());
        kv("feature_mode", self.feature_mode.name().to_string());
        kv("normalize", normalize_name(self.normalize).to_string());
        kv("learning_rate", format!("{:?}", self.learning_rate));
        kv("epochs", self.epochs.to_string());
        kv("plateau_window", self.plateau_window.to_string());
        kv("plateau_tol", format!("{:?}", self.plateau_tol));
        kv("seed", self.seed.to_string());
        kv("variant", self.variant.name().to_string());
        kv("synth_cities", self.synth.cities.to_string());
        kv("synth_steps", self.synth.steps.to_string());
        kv("synth_lat", format!("{:?},{:?}", self.synth.lat_range.0, self.synth.lat_range.1));
        kv("synth_lon", format!("{:?},{:?}", self.synth.lon_range.0, self.synth.lon_range.1));
        kv(
            "synth_alpha_delta",
            format!("{:?},{:?}", self.synth.alpha_delta_range.0, self.synth.alpha_delta_range.1),
        );
        kv(
            "synth_sigma_delta",
            format!("{:?},{:?}", self.synth.sigma_delta_range.0, self.synth.sigma_delta_range.1),
        );
        kv(
            "synth_alpha_mu",
            format!("{:?},{:?}", self.synth.alpha_mu_range.0, self.synth.alpha_mu_range.1),
        );
        kv(
            "synth_sigma_mu",
            format!("{:?},{:?}", self.synth.sigma_mu_range.0, self.synth.sigma_mu_range.1),
        );
        kv("synth_drift", format!("{:?}", self.synth.drift_amplitude));
        kv("synth_noise", format!("{:?}", self.synth.noise_level));
        kv("synth_seed", self.synth.seed.to_string());
        s
    }
}
