//! Experiment configuration: plain-text `key = value` files with `[section]`
//! headers, presets for the four dataset regimes, range validation, and a
//! canonical serialization used for config hashing.
//!
//! Unknown keys and duplicate keys are parse errors with line numbers.
//! Documented hyperparameter ranges are enforced unless `force = true`;
//! structural bounds (e.g. `lambda < 1`) are enforced unconditionally.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::dynamics::{AnnealKind, AnnealSchedule, HgodeParams};
use crate::graph::PoolParams;
use crate::solver::{FixedMethod, SolverConfig};
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{key} = {value} outside the documented range [{lo}, {hi}] (set force = true to override)")]
    Range { key: String, value: f64, lo: f64, hi: f64 },
    #[error("invalid value for {key}: {msg}")]
    Invalid { key: String, msg: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// The five experiment kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    ValidateTheory,
    MonostabilitySweep,
    HysteresisTrace,
    SbmTrain,
    PerturbationBench,
}

impl ExperimentKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "validate-theory" => Some(Self::ValidateTheory),
            "monostability-sweep" => Some(Self::MonostabilitySweep),
            "hysteresis-trace" => Some(Self::HysteresisTrace),
            "sbm-train" => Some(Self::SbmTrain),
            "perturbation-bench" => Some(Self::PerturbationBench),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::ValidateTheory => "validate-theory",
            Self::MonostabilitySweep => "monostability-sweep",
            Self::HysteresisTrace => "hysteresis-trace",
            Self::SbmTrain => "sbm-train",
            Self::PerturbationBench => "perturbation-bench",
        }
    }

    pub fn all() -> [Self; 5] {
        [
            Self::ValidateTheory,
            Self::MonostabilitySweep,
            Self::HysteresisTrace,
            Self::SbmTrain,
            Self::PerturbationBench,
        ]
    }
}

/// Hyperparameter presets by dataset regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    HomoLocal,
    HomoGlobal,
    HeteroLocal,
    HeteroGlobal,
}

impl Preset {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "homo-local" => Some(Self::HomoLocal),
            "homo-global" => Some(Self::HomoGlobal),
            "hetero-local" => Some(Self::HeteroLocal),
            "hetero-global" => Some(Self::HeteroGlobal),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::HomoLocal => "homo-local",
            Self::HomoGlobal => "homo-global",
            Self::HeteroLocal => "hetero-local",
            Self::HeteroGlobal => "hetero-global",
        }
    }
}

/// Experiment-level settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSection {
    pub kind: ExperimentKind,
    pub preset: Preset,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Diagnostic integration horizon.
    pub horizon: f64,
    /// Metric sampling interval along the horizon.
    pub metric_interval: f64,
    pub tau_attn_list: Vec<f64>,
    /// Permit values outside the documented hyperparameter ranges.
    pub force: bool,
    /// Test hook: route a reducible operator into the consensus-trap check.
    pub inject_reducible: bool,
    pub n_consensus: usize,
    pub n_contraction: usize,
    pub n_softmax: usize,
    pub n_gradcheck: usize,
}

/// SBM protocol settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SbmSection {
    pub block_sizes: Vec<usize>,
    pub p_in: f64,
    pub p_out: f64,
}

/// Feature initialization settings.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSection {
    pub separation: f64,
    pub sigma: f64,
    pub dim: usize,
}

/// Hysteresis-trace settings (zero means derive from `F_crit(lambda)`).
#[derive(Debug, Clone, PartialEq)]
pub struct HysteresisSection {
    pub lambda: f64,
    pub f_max: f64,
    pub n_points: usize,
    pub dwell_time: f64,
    pub u0: f64,
}

/// Perturbation-bench settings.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchSection {
    pub n_graphs: usize,
    pub split: f64,
    pub sigma_list: Vec<f64>,
    pub tau_attn: f64,
    pub mlp_hidden: usize,
}

/// Full resolved configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub sbm: SbmSection,
    pub features: FeatureSection,
    pub pool: PoolParams,
    pub hgode: HgodeParams,
    pub train: TrainConfig,
    pub solver: SolverConfig,
    pub hysteresis: HysteresisSection,
    pub bench: BenchSection,
}

impl ExperimentConfig {
    /// Kind-specific protocol defaults under the homophilous-local preset.
    pub fn defaults(kind: ExperimentKind) -> Self {
        let mut cfg = Self {
            experiment: ExperimentSection {
                kind,
                preset: Preset::HomoLocal,
                seeds: (1..=10).collect(),
                out_dir: PathBuf::from(format!("runs/{}", kind.name())),
                horizon: 50.0,
                metric_interval: 1.0,
                tau_attn_list: vec![0.5, 1.0, 2.0, 5.0],
                force: false,
                inject_reducible: false,
                n_consensus: 20,
                n_contraction: 100,
                n_softmax: 100,
                n_gradcheck: 50,
            },
            sbm: SbmSection { block_sizes: vec![50, 50], p_in: 0.5, p_out: 0.05 },
            features: FeatureSection { separation: 0.65, sigma: 0.1, dim: 16 },
            pool: PoolParams { k_2hop: 4, k_lap: 2, ..PoolParams::default() },
            hgode: HgodeParams::default(),
            train: TrainConfig::default(),
            solver: SolverConfig::default(),
            hysteresis: HysteresisSection {
                lambda: 0.0,
                f_max: 0.0,     // auto: 1.5588 * F_crit(lambda)
                n_points: 0,    // auto: resolution tied to F_crit(lambda)
                dwell_time: 0.0, // auto: passage time at the grid resolution
                u0: 1.0,
            },
            bench: BenchSection {
                n_graphs: 200,
                split: 0.8,
                sigma_list: vec![0.1, 0.5, 1.0],
                tau_attn: 2.0,
                mlp_hidden: 32,
            },
        };
        apply_preset(&mut cfg, Preset::HomoLocal);
        match kind {
            ExperimentKind::MonostabilitySweep | ExperimentKind::SbmTrain => {
                cfg.solver.rtol = 1e-6;
                cfg.solver.atol = 1e-6;
                cfg.train.epochs = 300;
                cfg.train.unroll_steps = 10;
                cfg.train.unroll_method = FixedMethod::Euler;
            }
            ExperimentKind::PerturbationBench => {
                cfg.sbm = SbmSection { block_sizes: vec![25, 25], p_in: 0.5, p_out: 0.3 };
                cfg.features = FeatureSection { separation: 0.5, sigma: 1.0, dim: 8 };
                cfg.pool = PoolParams::default();
                cfg.train.epochs = 10;
                cfg.train.unroll_steps = 10;
                cfg.train.unroll_method = FixedMethod::Euler;
                cfg.train.pair_sample_size = 128;
                cfg.train.beta = 0.3;
            }
            _ => {}
        }
        cfg
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        validate_config(self)
    }

    /// FNV-1a hash of the canonical serialization, as hex.
    pub fn hash(&self) -> String {
        let text = serialize_config(self);
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        format!("{h:016x}")
    }
}

fn apply_preset(cfg: &mut ExperimentConfig, preset: Preset) {
    cfg.experiment.preset = preset;
    let (lambda, tau_gate, tau_feat, tau_topo, scale, delta, beta) = match preset {
        Preset::HomoLocal => (0.2, 0.2, 1.0, 1.0, 1.0, 0.1, 0.1),
        Preset::HomoGlobal => (0.4, 0.15, 1.0, 1.0, 1.0, 0.15, 0.2),
        Preset::HeteroLocal => (0.5, 0.1, 1.0, 1.0, 1.25, 0.25, 0.4),
        Preset::HeteroGlobal => (0.65, 0.1, 1.0, 0.75, 1.25, 0.25, 0.2),
    };
    cfg.hgode.lambda = lambda;
    cfg.hgode.tau_gate = tau_gate;
    cfg.hgode.tau_feat = tau_feat;
    cfg.hgode.tau_topo = tau_topo;
    cfg.hgode.force_scale = scale;
    cfg.train.delta = delta;
    cfg.train.beta = beta;
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>, ConfigError> {
    v.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<T>().map_err(|_| ConfigError::Invalid {
                key: key.into(),
                msg: format!("cannot parse list item {s:?}"),
            })
        })
        .collect()
}

fn parse_scalar<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse::<T>().map_err(|_| ConfigError::Invalid {
        key: key.into(),
        msg: format!("cannot parse {v:?}"),
    })
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(ConfigError::Invalid { key: key.into(), msg: format!("expected bool, got {v:?}") }),
    }
}

/// Every legal `(section, key)` pair.
const KNOWN_KEYS: &[(&str, &str)] = &[
    ("experiment", "kind"),
    ("experiment", "preset"),
    ("experiment", "seeds"),
    ("experiment", "out_dir"),
    ("experiment", "horizon"),
    ("experiment", "metric_interval"),
    ("experiment", "tau_attn_list"),
    ("experiment", "force"),
    ("experiment", "inject_reducible"),
    ("experiment", "n_consensus"),
    ("experiment", "n_contraction"),
    ("experiment", "n_softmax"),
    ("experiment", "n_gradcheck"),
    ("sbm", "block_sizes"),
    ("sbm", "p_in"),
    ("sbm", "p_out"),
    ("features", "separation"),
    ("features", "sigma"),
    ("features", "dim"),
    ("pool", "k_2hop"),
    ("pool", "k_lap"),
    ("pool", "random_ratio"),
    ("pool", "walk_length"),
    ("pool", "cap"),
    ("hgode", "lambda"),
    ("hgode", "tau_gate"),
    ("hgode", "tau_feat"),
    ("hgode", "tau_topo"),
    ("hgode", "gamma"),
    ("hgode", "epsilon"),
    ("hgode", "force_scale"),
    ("hgode", "u0"),
    ("hgode", "force_hidden"),
    ("hgode", "cubic_off"),
    ("hgode", "mu_kind"),
    ("hgode", "mu_start"),
    ("hgode", "mu_end"),
    ("hgode", "mu_t_end"),
    ("train", "delta"),
    ("train", "beta"),
    ("train", "lr"),
    ("train", "epochs"),
    ("train", "unroll_steps"),
    ("train", "unroll_method"),
    ("train", "pair_sample_size"),
    ("train", "seed"),
    ("train", "horizon"),
    ("solver", "rtol"),
    ("solver", "atol"),
    ("solver", "h_init"),
    ("solver", "h_min"),
    ("solver", "h_max"),
    ("solver", "max_steps"),
    ("hysteresis", "lambda"),
    ("hysteresis", "f_max"),
    ("hysteresis", "n_points"),
    ("hysteresis", "dwell_time"),
    ("hysteresis", "u0"),
    ("bench", "n_graphs"),
    ("bench", "split"),
    ("bench", "sigma_list"),
    ("bench", "tau_attn"),
    ("bench", "mlp_hidden"),
];

/// Parse raw text into `(section, key) -> (value, line)` with duplicate and
/// unknown-key detection.
fn parse_raw(text: &str) -> Result<BTreeMap<(String, String), (String, usize)>, ConfigError> {
    let mut section = String::from("experiment");
    let mut map = BTreeMap::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw_line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(inner) = content.strip_prefix('[') {
            let name = inner.strip_suffix(']').ok_or(ConfigError::Parse {
                line,
                msg: "unterminated section header".into(),
            })?;
            section = name.trim().to_string();
            if !KNOWN_KEYS.iter().any(|(s, _)| *s == section) {
                return Err(ConfigError::Parse { line, msg: format!("unknown section [{section}]") });
            }
            continue;
        }
        let (key, value) = content.split_once('=').ok_or(ConfigError::Parse {
            line,
            msg: format!("expected `key = value`, got {content:?}"),
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if !KNOWN_KEYS.iter().any(|(s, k)| *s == section && *k == key) {
            return Err(ConfigError::Parse {
                line,
                msg: format!("unknown key {section}.{key}"),
            });
        }
        if map
            .insert((section.clone(), key.clone()), (value, line))
            .is_some()
        {
            return Err(ConfigError::Parse {
                line,
                msg: format!("duplicate key {section}.{key}"),
            });
        }
    }
    Ok(map)
}

/// Parse a config file with defaults filled from the experiment kind and the
/// (optional) preset named in the file or given explicitly.
pub fn parse_config(
    path: &Path,
    kind: ExperimentKind,
    preset_override: Option<Preset>,
) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text, kind, preset_override)
}

pub fn parse_config_str(
    text: &str,
    default_kind: ExperimentKind,
    preset_override: Option<Preset>,
) -> Result<ExperimentConfig, ConfigError> {
    let raw = parse_raw(text)?;

    // kind and preset steer the defaults, so resolve them first
    let kind = match raw.get(&("experiment".into(), "kind".into())) {
        Some((v, line)) => ExperimentKind::parse(v).ok_or(ConfigError::Parse {
            line: *line,
            msg: format!("unknown experiment kind {v:?}"),
        })?,
        None => default_kind,
    };
    let mut cfg = ExperimentConfig::defaults(kind);
    let preset = match preset_override {
        Some(p) => Some(p),
        None => match raw.get(&("experiment".into(), "preset".into())) {
            Some((v, line)) => Some(Preset::parse(v).ok_or(ConfigError::Parse {
                line: *line,
                msg: format!("unknown preset {v:?}"),
            })?),
            None => None,
        },
    };
    if let Some(p) = preset {
        apply_preset(&mut cfg, p);
    }

    for ((section, key), (value, _line)) in &raw {
        apply_key(&mut cfg, section, key, value)?;
    }
    validate_config(&cfg)?;
    Ok(cfg)
}

fn apply_key(
    cfg: &mut ExperimentConfig,
    section: &str,
    key: &str,
    v: &str,
) -> Result<(), ConfigError> {
    let full = format!("{section}.{key}");
    let k = full.as_str();
    match (section, key) {
        ("experiment", "kind") | ("experiment", "preset") => {} // handled upfront
        ("experiment", "seeds") => cfg.experiment.seeds = parse_list(k, v)?,
        ("experiment", "out_dir") => cfg.experiment.out_dir = PathBuf::from(v),
        ("experiment", "horizon") => cfg.experiment.horizon = parse_scalar(k, v)?,
        ("experiment", "metric_interval") => cfg.experiment.metric_interval = parse_scalar(k, v)?,
        ("experiment", "tau_attn_list") => cfg.experiment.tau_attn_list = parse_list(k, v)?,
        ("experiment", "force") => cfg.experiment.force = parse_bool(k, v)?,
        ("experiment", "inject_reducible") => cfg.experiment.inject_reducible = parse_bool(k, v)?,
        ("experiment", "n_consensus") => cfg.experiment.n_consensus = parse_scalar(k, v)?,
        ("experiment", "n_contraction") => cfg.experiment.n_contraction = parse_scalar(k, v)?,
        ("experiment", "n_softmax") => cfg.experiment.n_softmax = parse_scalar(k, v)?,
        ("experiment", "n_gradcheck") => cfg.experiment.n_gradcheck = parse_scalar(k, v)?,
        ("sbm", "block_sizes") => cfg.sbm.block_sizes = parse_list(k, v)?,
        ("sbm", "p_in") => cfg.sbm.p_in = parse_scalar(k, v)?,
        ("sbm", "p_out") => cfg.sbm.p_out = parse_scalar(k, v)?,
        ("features", "separation") => cfg.features.separation = parse_scalar(k, v)?,
        ("features", "sigma") => cfg.features.sigma = parse_scalar(k, v)?,
        ("features", "dim") => cfg.features.dim = parse_scalar(k, v)?,
        ("pool", "k_2hop") => cfg.pool.k_2hop = parse_scalar(k, v)?,
        ("pool", "k_lap") => cfg.pool.k_lap = parse_scalar(k, v)?,
        ("pool", "random_ratio") => cfg.pool.random_ratio = parse_scalar(k, v)?,
        ("pool", "walk_length") => cfg.pool.walk_length = parse_scalar(k, v)?,
        ("pool", "cap") => cfg.pool.cap = parse_scalar(k, v)?,
        ("hgode", "lambda") => cfg.hgode.lambda = parse_scalar(k, v)?,
        ("hgode", "tau_gate") => cfg.hgode.tau_gate = parse_scalar(k, v)?,
        ("hgode", "tau_feat") => cfg.hgode.tau_feat = parse_scalar(k, v)?,
        ("hgode", "tau_topo") => cfg.hgode.tau_topo = parse_scalar(k, v)?,
        ("hgode", "gamma") => cfg.hgode.gamma = parse_scalar(k, v)?,
        ("hgode", "epsilon") => cfg.hgode.epsilon = parse_scalar(k, v)?,
        ("hgode", "force_scale") => cfg.hgode.force_scale = parse_scalar(k, v)?,
        ("hgode", "u0") => cfg.train.u0 = parse_scalar(k, v)?,
        ("hgode", "force_hidden") => cfg.train.hidden = parse_scalar(k, v)?,
        ("hgode", "cubic_off") => cfg.train.cubic_term = !parse_bool(k, v)?,
        ("hgode", "mu_kind") => {
            cfg.hgode.mu_schedule.kind = AnnealKind::parse(v).ok_or(ConfigError::Invalid {
                key: k.into(),
                msg: format!("unknown schedule kind {v:?}"),
            })?
        }
        ("hgode", "mu_start") => cfg.hgode.mu_schedule.mu_start = parse_scalar(k, v)?,
        ("hgode", "mu_end") => cfg.hgode.mu_schedule.mu_end = parse_scalar(k, v)?,
        ("hgode", "mu_t_end") => cfg.hgode.mu_schedule.t_end = parse_scalar(k, v)?,
        ("train", "delta") => cfg.train.delta = parse_scalar(k, v)?,
        ("train", "beta") => cfg.train.beta = parse_scalar(k, v)?,
        ("train", "lr") => cfg.train.lr = parse_scalar(k, v)?,
        ("train", "epochs") => cfg.train.epochs = parse_scalar(k, v)?,
        ("train", "unroll_steps") => cfg.train.unroll_steps = parse_scalar(k, v)?,
        ("train", "unroll_method") => {
            cfg.train.unroll_method = FixedMethod::parse(v).ok_or(ConfigError::Invalid {
                key: k.into(),
                msg: format!("expected euler|rk4, got {v:?}"),
            })?
        }
        ("train", "pair_sample_size") => cfg.train.pair_sample_size = parse_scalar(k, v)?,
        ("train", "seed") => cfg.train.seed = parse_scalar(k, v)?,
        ("train", "horizon") => cfg.train.horizon = parse_scalar(k, v)?,
        ("solver", "rtol") => cfg.solver.rtol = parse_scalar(k, v)?,
        ("solver", "atol") => cfg.solver.atol = parse_scalar(k, v)?,
        ("solver", "h_init") => cfg.solver.h_init = parse_scalar(k, v)?,
        ("solver", "h_min") => cfg.solver.h_min = parse_scalar(k, v)?,
        ("solver", "h_max") => cfg.solver.h_max = parse_scalar(k, v)?,
        ("solver", "max_steps") => cfg.solver.max_steps = parse_scalar(k, v)?,
        ("hysteresis", "lambda") => cfg.hysteresis.lambda = parse_scalar(k, v)?,
        ("hysteresis", "f_max") => cfg.hysteresis.f_max = parse_scalar(k, v)?,
        ("hysteresis", "n_points") => cfg.hysteresis.n_points = parse_scalar(k, v)?,
        ("hysteresis", "dwell_time") => cfg.hysteresis.dwell_time = parse_scalar(k, v)?,
        ("hysteresis", "u0") => cfg.hysteresis.u0 = parse_scalar(k, v)?,
        ("bench", "n_graphs") => cfg.bench.n_graphs = parse_scalar(k, v)?,
        ("bench", "split") => cfg.bench.split = parse_scalar(k, v)?,
        ("bench", "sigma_list") => cfg.bench.sigma_list = parse_list(k, v)?,
        ("bench", "tau_attn") => cfg.bench.tau_attn = parse_scalar(k, v)?,
        ("bench", "mlp_hidden") => cfg.bench.mlp_hidden = parse_scalar(k, v)?,
        _ => unreachable!("key registry and dispatch table out of sync: {k}"),
    }
    Ok(())
}

/// Documented (soft) hyperparameter ranges, overridable with `force = true`.
const SOFT_RANGES: &[(&str, f64, f64)] = &[
    ("hgode.lambda", 0.0, 0.8),
    ("hgode.tau_gate", 0.05, 0.5),
    ("hgode.tau_feat", 0.3, 1.0),
    ("hgode.tau_topo", 0.3, 1.0),
    ("hgode.gamma", 0.0, 1.0),
    ("hgode.force_scale", 1.0, 1.5),
    ("train.delta", 0.1, 0.5),
    ("train.beta", 0.0, 10.0),
    ("train.lr", 1e-4, 1e-2),
    ("train.horizon", 0.3, 1.0),
    ("pool.random_ratio", 0.0, 0.01),
    ("pool.k_2hop", 0.0, 12.0),
    ("pool.k_lap", 0.0, 8.0),
];

fn validate_config(cfg: &ExperimentConfig) -> Result<(), ConfigError> {
    // hard structural bounds first
    let invalid = |key: &str, msg: &str| -> ConfigError {
        ConfigError::Invalid { key: key.into(), msg: msg.into() }
    };
    if !(0.0..1.0).contains(&cfg.hgode.lambda) {
        return Err(ConfigError::Range {
            key: "hgode.lambda".into(),
            value: cfg.hgode.lambda,
            lo: 0.0,
            hi: 1.0,
        });
    }
    cfg.hgode
        .validate()
        .map_err(|e| invalid("hgode", &e.to_string()))?;
    cfg.solver
        .validate()
        .map_err(|e| invalid("solver", &e.to_string()))?;
    for (key, p) in [("sbm.p_in", cfg.sbm.p_in), ("sbm.p_out", cfg.sbm.p_out)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(ConfigError::Range { key: key.into(), value: p, lo: 0.0, hi: 1.0 });
        }
    }
    if cfg.features.sigma < 0.0 {
        return Err(invalid("features.sigma", "must be nonnegative"));
    }
    if !(0.0 < cfg.bench.split && cfg.bench.split < 1.0) {
        return Err(ConfigError::Range {
            key: "bench.split".into(),
            value: cfg.bench.split,
            lo: 0.0,
            hi: 1.0,
        });
    }
    if cfg.train.delta <= 0.0 {
        return Err(invalid("train.delta", "must be positive"));
    }
    if cfg.train.beta < 0.0 {
        return Err(invalid("train.beta", "must be nonnegative"));
    }
    if cfg.experiment.seeds.is_empty() {
        return Err(invalid("experiment.seeds", "must list at least one seed"));
    }
    if cfg.sbm.block_sizes.is_empty() || cfg.sbm.block_sizes.iter().any(|&b| b == 0) {
        return Err(invalid("sbm.block_sizes", "must be positive"));
    }
    if cfg.experiment.metric_interval <= 0.0 || cfg.experiment.horizon <= 0.0 {
        return Err(invalid("experiment.horizon", "horizon and interval must be positive"));
    }

    // soft documented ranges
    if !cfg.experiment.force {
        let lookups: &[(&str, f64)] = &[
            ("hgode.lambda", cfg.hgode.lambda),
            ("hgode.tau_gate", cfg.hgode.tau_gate),
            ("hgode.tau_feat", cfg.hgode.tau_feat),
            ("hgode.tau_topo", cfg.hgode.tau_topo),
            ("hgode.gamma", cfg.hgode.gamma),
            ("hgode.force_scale", cfg.hgode.force_scale),
            ("train.delta", cfg.train.delta),
            ("train.beta", cfg.train.beta),
            ("train.lr", cfg.train.lr),
            ("train.horizon", cfg.train.horizon),
            ("pool.random_ratio", cfg.pool.random_ratio),
            ("pool.k_2hop", cfg.pool.k_2hop as f64),
            ("pool.k_lap", cfg.pool.k_lap as f64),
        ];
        for &(key, value) in lookups {
            if let Some(&(_, lo, hi)) = SOFT_RANGES.iter().find(|(k, _, _)| *k == key) {
                if value < lo || value > hi {
                    return Err(ConfigError::Range { key: key.into(), value, lo, hi });
                }
            }
        }
    }
    Ok(())
}

fn fmt_list<T: std::fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Canonical serialization: every key explicit, fixed section order.
pub fn serialize_config(cfg: &ExperimentConfig) -> String {
    let mut s = String::new();
    let e = &cfg.experiment;
    let _ = writeln!(s, "[experiment]");
    let _ = writeln!(s, "kind = {}", e.kind.name());
    let _ = writeln!(s, "preset = {}", e.preset.name());
    let _ = writeln!(s, "seeds = {}", fmt_list(&e.seeds));
    let _ = writeln!(s, "out_dir = {}", e.out_dir.display());
    let _ = writeln!(s, "horizon = {}", e.horizon);
    let _ = writeln!(s, "metric_interval = {}", e.metric_interval);
    let _ = writeln!(s, "tau_attn_list = {}", fmt_list(&e.tau_attn_list));
    let _ = writeln!(s, "force = {}", e.force);
    let _ = writeln!(s, "inject_reducible = {}", e.inject_reducible);
    let _ = writeln!(s, "n_consensus = {}", e.n_consensus);
    let _ = writeln!(s, "n_contraction = {}", e.n_contraction);
    let _ = writeln!(s, "n_softmax = {}", e.n_softmax);
    let _ = writeln!(s, "n_gradcheck = {}", e.n_gradcheck);
    let _ = writeln!(s, "\n[sbm]");
    let _ = writeln!(s, "block_sizes = {}", fmt_list(&cfg.sbm.block_sizes));
    let _ = writeln!(s, "p_in = {}", cfg.sbm.p_in);
    let _ = writeln!(s, "p_out = {}", cfg.sbm.p_out);
    let _ = writeln!(s, "\n[features]");
    let _ = writeln!(s, "separation = {}", cfg.features.separation);
    let _ = writeln!(s, "sigma = {}", cfg.features.sigma);
    let _ = writeln!(s, "dim = {}", cfg.features.dim);
    let _ = writeln!(s, "\n[pool]");
    let _ = writeln!(s, "k_2hop = {}", cfg.pool.k_2hop);
    let _ = writeln!(s, "k_lap = {}", cfg.pool.k_lap);
    let _ = writeln!(s, "random_ratio = {}", cfg.pool.random_ratio);
    let _ = writeln!(s, "walk_length = {}", cfg.pool.walk_length);
    let _ = writeln!(s, "cap = {}", cfg.pool.cap);
    let _ = writeln!(s, "\n[hgode]");
    let _ = writeln!(s, "lambda = {}", cfg.hgode.lambda);
    let _ = writeln!(s, "tau_gate = {}", cfg.hgode.tau_gate);
    let _ = writeln!(s, "tau_feat = {}", cfg.hgode.tau_feat);
    let _ = writeln!(s, "tau_topo = {}", cfg.hgode.tau_topo);
    let _ = writeln!(s, "gamma = {}", cfg.hgode.gamma);
    let _ = writeln!(s, "epsilon = {}", cfg.hgode.epsilon);
    let _ = writeln!(s, "force_scale = {}", cfg.hgode.force_scale);
    let _ = writeln!(s, "u0 = {}", cfg.train.u0);
    let _ = writeln!(s, "force_hidden = {}", cfg.train.hidden);
    let _ = writeln!(s, "cubic_off = {}", !cfg.train.cubic_term);
    let _ = writeln!(s, "mu_kind = {}", cfg.hgode.mu_schedule.kind.name());
    let _ = writeln!(s, "mu_start = {}", cfg.hgode.mu_schedule.mu_start);
    let _ = writeln!(s, "mu_end = {}", cfg.hgode.mu_schedule.mu_end);
    let _ = writeln!(s, "mu_t_end = {}", cfg.hgode.mu_schedule.t_end);
    let _ = writeln!(s, "\n[train]");
    let _ = writeln!(s, "delta = {}", cfg.train.delta);
    let _ = writeln!(s, "beta = {}", cfg.train.beta);
    let _ = writeln!(s, "lr = {}", cfg.train.lr);
    let _ = writeln!(s, "epochs = {}", cfg.train.epochs);
    let _ = writeln!(s, "unroll_steps = {}", cfg.train.unroll_steps);
    let _ = writeln!(s, "unroll_method = {}", cfg.train.unroll_method.name());
    let _ = writeln!(s, "pair_sample_size = {}", cfg.train.pair_sample_size);
    let _ = writeln!(s, "seed = {}", cfg.train.seed);
    let _ = writeln!(s, "horizon = {}", cfg.train.horizon);
    let _ = writeln!(s, "\n[solver]");
    let _ = writeln!(s, "rtol = {}", cfg.solver.rtol);
    let _ = writeln!(s, "atol = {}", cfg.solver.atol);
    let _ = writeln!(s, "h_init = {}", cfg.solver.h_init);
    let _ = writeln!(s, "h_min = {}", cfg.solver.h_min);
    let _ = writeln!(s, "h_max = {}", cfg.solver.h_max);
    let _ = writeln!(s, "max_steps = {}", cfg.solver.max_steps);
    let _ = writeln!(s, "\n[hysteresis]");
    let _ = writeln!(s, "lambda = {}", cfg.hysteresis.lambda);
    let _ = writeln!(s, "f_max = {}", cfg.hysteresis.f_max);
    let _ = writeln!(s, "n_points = {}", cfg.hysteresis.n_points);
    let _ = writeln!(s, "dwell_time = {}", cfg.hysteresis.dwell_time);
    let _ = writeln!(s, "u0 = {}", cfg.hysteresis.u0);
    let _ = writeln!(s, "\n[bench]");
    let _ = writeln!(s, "n_graphs = {}", cfg.bench.n_graphs);
    let _ = writeln!(s, "split = {}", cfg.bench.split);
    let _ = writeln!(s, "sigma_list = {}", fmt_list(&cfg.bench.sigma_list));
    let _ = writeln!(s, "tau_attn = {}", cfg.bench.tau_attn);
    let _ = writeln!(s, "mlp_hidden = {}", cfg.bench.mlp_hidden);
    s
}

/// The effective annealing schedule as a validated object.
pub fn schedule_of(cfg: &ExperimentConfig) -> AnnealSchedule {
    cfg.hgode.mu_schedule.clone()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_homo_local_defaults() {
        let cfg = parse_config_str("", ExperimentKind::SbmTrain, None).unwrap();
        assert_eq!(cfg.experiment.kind, ExperimentKind::SbmTrain);
        assert_eq!(cfg.experiment.preset, Preset::HomoLocal);
        assert!((cfg.hgode.lambda - 0.2).abs() < 1e-15);
        assert!((cfg.hgode.tau_gate - 0.2).abs() < 1e-15);
        assert!((cfg.hgode.tau_feat - 1.0).abs() < 1e-15);
        assert!((cfg.train.delta - 0.1).abs() < 1e-15);
        assert_eq!(cfg.experiment.seeds.len(), 10);
    }

    #[test]
    fn lambda_out_of_hard_range_errors() {
        let r = parse_config_str("[hgode]\nlambda = 1.5\n", ExperimentKind::SbmTrain, None);
        match r {
            Err(ConfigError::Range { key, .. }) => assert_eq!(key, "hgode.lambda"),
            other => panic!("expected RangeError, got {other:?}"),
        }
        // even with force = true the structural bound holds
        let r = parse_config_str(
            "[experiment]\nforce = true\n[hgode]\nlambda = 1.5\n",
            ExperimentKind::SbmTrain,
            None,
        );
        assert!(matches!(r, Err(ConfigError::Range { .. })));
    }

    #[test]
    fn soft_range_overridable_with_force() {
        let text = "[hgode]\ntau_gate = 0.02\n";
        let r = parse_config_str(text, ExperimentKind::SbmTrain, None);
        assert!(matches!(r, Err(ConfigError::Range { .. })), "{r:?}");
        let forced = format!("[experiment]\nforce = true\n{text}");
        assert!(parse_config_str(&forced, ExperimentKind::SbmTrain, None).is_ok());
    }

    #[test]
    fn duplicate_key_is_parse_error() {
        let text = "[hgode]\nlambda = 0.1\nlambda = 0.2\n";
        match parse_config_str(text, ExperimentKind::SbmTrain, None) {
            Err(ConfigError::Parse { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("duplicate"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_key_is_parse_error() {
        let text = "[hgode]\nwat = 1\n";
        match parse_config_str(text, ExperimentKind::SbmTrain, None) {
            Err(ConfigError::Parse { line, msg }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("unknown key"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn round_trip_is_fixed_point() {
        let text = "[experiment]\nseeds = 3,4\n[hgode]\nlambda = 0.3\ntau_gate = 0.25\n[train]\nbeta = 0.5\n";
        let cfg = parse_config_str(text, ExperimentKind::MonostabilitySweep, None).unwrap();
        let ser = serialize_config(&cfg);
        let cfg2 = parse_config_str(&ser, ExperimentKind::ValidateTheory, None).unwrap();
        assert_eq!(cfg, cfg2, "parse(serialize(parse(x))) must be a fixed point");
        assert_eq!(cfg.hash(), cfg2.hash());
    }

    #[test]
    fn presets_map_to_regime_rows() {
        let cfg =
            parse_config_str("", ExperimentKind::SbmTrain, Some(Preset::HeteroGlobal)).unwrap();
        assert!((cfg.hgode.lambda - 0.65).abs() < 1e-15);
        assert!((cfg.hgode.tau_topo - 0.75).abs() < 1e-15);
        assert!((cfg.hgode.force_scale - 1.25).abs() < 1e-15);
        // file preset key works too
        let cfg2 = parse_config_str(
            "[experiment]\npreset = hetero-local\n",
            ExperimentKind::SbmTrain,
            None,
        )
        .unwrap();
        assert!((cfg2.train.beta - 0.4).abs() < 1e-15);
    }

    #[test]
    fn bench_defaults_pin_protocol() {
        let cfg = ExperimentConfig::defaults(ExperimentKind::PerturbationBench);
        assert!((cfg.sbm.p_out - 0.3).abs() < 1e-15);
        assert!((cfg.features.separation - 0.5).abs() < 1e-15);
        assert_eq!(cfg.bench.n_graphs, 200);
        assert_eq!(cfg.train.epochs, 10);
        assert_eq!(cfg.bench.sigma_list, vec![0.1, 0.5, 1.0]);
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let text = "# top comment\n\n[hgode]  # trailing\nlambda = 0.3 # inline\n";
        let cfg = parse_config_str(text, ExperimentKind::SbmTrain, None).unwrap();
        assert!((cfg.hgode.lambda - 0.3).abs() < 1e-15);
    }

    #[test]
    fn kind_in_file_overrides_default_kind() {
        let text = "[experiment]\nkind = hysteresis-trace\n";
        let cfg = parse_config_str(text, ExperimentKind::SbmTrain, None).unwrap();
        assert_eq!(cfg.experiment.kind, ExperimentKind::HysteresisTrace);
    }
}
