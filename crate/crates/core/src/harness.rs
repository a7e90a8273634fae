//! Seeded Monte-Carlo experiment runner, CSV persistence and aggregation.
//!
//! A run is described by a flat TOML document:
//!
//! ```toml
//! preset = "los_thz"          # or "nlos_mmwave"
//! sweep = "snr_db"            # or "rf_chains", "symbols"
//! values = [0, 10, 20, 30]
//! trials = 100
//! seed = 1
//! methods = ["cpd", "cpd_delay_aided", "somp", "crb"]
//! snr_db = 30                 # fixed SNR when the sweep is not over SNR
//! # optional overrides
//! n_antennas = 64
//! n_rf = 16
//! n_subcarriers = 64
//! n_symbols = 4
//! n_users = 8
//! carrier_hz = 100e9
//! bandwidth_hz = 1e8
//! n_angle = 256
//! n_range = 32
//! out = "results"
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::btd::NlsOptions;
use crate::cpd::AlsOptions;
use crate::crb::{CrbReport, Param};
use crate::error::{Error, Result};
use crate::extract::{nmse, PolarCodebook, SearchGrids};
use crate::geometry::SystemConfig;
use crate::pilots::{design_pilots, random_combiner, Combiner};
use crate::pipeline::{estimate_los, estimate_nlos, AngleMode};
use crate::signal::{add_noise, synthesize, Scenario, ScenarioSampler};
use crate::somp::{build_mmv, somp, somp_channels};

/// First line of every results file.
pub const RESULTS_HEADER: &str = "# nearfield-results v1";

/// Metric columns shared by result and summary files.
pub const METRICS: [&str; 9] = [
    "nmse",
    "mse_delay",
    "mse_angle",
    "mse_range",
    "mse_position",
    "crb_delay",
    "crb_angle",
    "crb_range",
    "crb_position",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// 100 GHz, `N=256`, `M=32`, `P=64`, `T=4`, `K=8`, one LoS path per user.
    LosThz,
    /// 30 GHz, `N=128`, `M=64`, `P=64`, `T=4`, `K=8`, one or two NLoS paths per user.
    NlosMmwave,
}

impl Preset {
    pub fn system(self) -> SystemConfig {
        let (n, m, fc) = match self {
            Preset::LosThz => (256, 32, 100e9),
            Preset::NlosMmwave => (128, 64, 30e9),
        };
        SystemConfig {
            n_antennas: n,
            n_rf: m,
            n_subcarriers: 64,
            n_symbols: 4,
            n_users: 8,
            carrier_hz: fc,
            bandwidth_hz: 1e8,
        }
    }

    pub fn is_los(self) -> bool {
        self == Preset::LosThz
    }

    pub fn sampler(self) -> ScenarioSampler {
        let mut s = ScenarioSampler::default();
        if self.is_los() {
            s.max_excess_delay = 0.0;
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    SnrDb,
    RfChains,
    Symbols,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Cpd,
    CpdDelayAided,
    Btd,
    Somp,
    Crb,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Cpd => "cpd",
            Method::CpdDelayAided => "cpd_delay_aided",
            Method::Btd => "btd",
            Method::Somp => "somp",
            Method::Crb => "crb",
        }
    }

    fn needs_los(self) -> bool {
        matches!(self, Method::Cpd | Method::CpdDelayAided | Method::Crb)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub sweep: SweepAxis,
    pub values: Vec<f64>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    pub methods: Vec<Method>,
    #[serde(default = "default_snr")]
    pub snr_db: f64,
    pub n_antennas: Option<usize>,
    pub n_rf: Option<usize>,
    pub n_subcarriers: Option<usize>,
    pub n_symbols: Option<usize>,
    pub n_users: Option<usize>,
    pub carrier_hz: Option<f64>,
    pub bandwidth_hz: Option<f64>,
    pub n_angle: Option<usize>,
    pub n_range: Option<usize>,
    pub out: Option<PathBuf>,
}

fn default_trials() -> usize {
    100
}

fn default_snr() -> f64 {
    30.0
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    /// Minimal config for `preset` with every optional key unset.
    pub fn new(preset: Preset, sweep: SweepAxis, values: Vec<f64>, methods: Vec<Method>) -> Self {
        Self {
            preset,
            sweep,
            values,
            trials: default_trials(),
            seed: 0,
            methods,
            snr_db: default_snr(),
            n_antennas: None,
            n_rf: None,
            n_subcarriers: None,
            n_symbols: None,
            n_users: None,
            carrier_hz: None,
            bandwidth_hz: None,
            n_angle: None,
            n_range: None,
            out: None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Preset constants with overrides, before the sweep is applied.
    pub fn base_system(&self) -> SystemConfig {
        let mut s = self.preset.system();
        s.n_antennas = self.n_antennas.unwrap_or(s.n_antennas);
        s.n_rf = self.n_rf.unwrap_or(s.n_rf);
        s.n_subcarriers = self.n_subcarriers.unwrap_or(s.n_subcarriers);
        s.n_symbols = self.n_symbols.unwrap_or(s.n_symbols);
        s.n_users = self.n_users.unwrap_or(s.n_users);
        s.carrier_hz = self.carrier_hz.unwrap_or(s.carrier_hz);
        s.bandwidth_hz = self.bandwidth_hz.unwrap_or(s.bandwidth_hz);
        s
    }

    /// System configuration and SNR at one sweep value.
    pub fn point(&self, value: f64) -> Result<(SystemConfig, f64)> {
        let mut s = self.base_system();
        let mut snr = self.snr_db;
        let as_count = |v: f64| -> Result<usize> {
            if v.fract() != 0.0 || !(v >= 1.0) || v > 1e6 {
                return Err(config_err(format!(
                    "sweep value {v} is not a positive integer"
                )));
            }
            Ok(v as usize)
        };
        match self.sweep {
            SweepAxis::SnrDb => snr = value,
            SweepAxis::RfChains => s.n_rf = as_count(value)?,
            SweepAxis::Symbols => s.n_symbols = as_count(value)?,
        }
        s.validate()
            .map_err(|e| config_err(format!("sweep value {value}: {e}")))?;
        if s.n_symbols < 2 {
            return Err(config_err("need at least two pilot symbols"));
        }
        if snr.is_nan() || snr == f64::NEG_INFINITY {
            return Err(config_err(format!("invalid SNR {snr}")));
        }
        Ok((s, snr))
    }

    pub fn grids(&self, sys: &SystemConfig) -> SearchGrids {
        let sampler = self.preset.sampler();
        let mut g = SearchGrids::for_config(sys, sampler.max_range, sampler.max_excess_delay);
        g.n_angle = self.n_angle.unwrap_or(g.n_angle);
        g.n_range = self.n_range.unwrap_or(g.n_range);
        g
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(config_err("sweep has no values"));
        }
        if self.trials == 0 {
            return Err(config_err("trials must be at least 1"));
        }
        if self.methods.is_empty() {
            return Err(config_err("no methods selected"));
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return Err(config_err(format!("method {} listed twice", m.as_str())));
            }
            if m.needs_los() && !self.preset.is_los() {
                return Err(config_err(format!(
                    "method {} needs the LoS preset",
                    m.as_str()
                )));
            }
        }
        for &v in &self.values {
            let (sys, _) = self.point(v)?;
            self.grids(&sys)
                .validate()
                .map_err(|e| config_err(e.to_string()))?;
        }
        Ok(())
    }
}

/// One (method, sweep point, trial) outcome. Metrics are per-user means;
/// inapplicable fields are `NaN`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub sweep_value: f64,
    pub trial: usize,
    pub seed: u64,
    pub failed: bool,
    pub error: String,
    pub nmse: f64,
    pub mse_delay: f64,
    pub mse_angle: f64,
    pub mse_range: f64,
    pub mse_position: f64,
    pub crb_delay: f64,
    pub crb_angle: f64,
    pub crb_range: f64,
    pub crb_position: f64,
    /// Seconds; written to the separate timings file only.
    #[serde(skip)]
    pub wall_time: f64,
}

impl ResultRow {
    fn blank(method: Method, sweep_value: f64, trial: usize, seed: u64) -> Self {
        Self {
            method: method.as_str().to_string(),
            sweep_value,
            trial,
            seed,
            failed: false,
            error: String::new(),
            nmse: f64::NAN,
            mse_delay: f64::NAN,
            mse_angle: f64::NAN,
            mse_range: f64::NAN,
            mse_position: f64::NAN,
            crb_delay: f64::NAN,
            crb_angle: f64::NAN,
            crb_range: f64::NAN,
            crb_position: f64::NAN,
            wall_time: 0.0,
        }
    }

    fn fail(mut self, e: &Error) -> Self {
        self.failed = true;
        self.error = e.to_string();
        self
    }

    /// Values in [`METRICS`] order.
    pub fn metrics(&self) -> [f64; 9] {
        [
            self.nmse,
            self.mse_delay,
            self.mse_angle,
            self.mse_range,
            self.mse_position,
            self.crb_delay,
            self.crb_angle,
            self.crb_range,
            self.crb_position,
        ]
    }
}

/// SplitMix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(stream)) ^ index)
}

const STREAM_TRIAL: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_COMBINER: u64 = 3;

/// Seed of the user drop and pilots of `trial`; shared across sweep points.
pub fn trial_seed(seed: u64, trial: usize) -> u64 {
    derive_seed(seed, STREAM_TRIAL, trial as u64)
}

struct Point<'a> {
    index: usize,
    value: f64,
    sys: SystemConfig,
    snr_db: f64,
    combiner: Combiner,
    book: Option<&'a PolarCodebook>,
}

fn draw_scenario(cfg: &ExperimentConfig, pt: &Point<'_>, seed: u64) -> Result<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampler = cfg.preset.sampler();
    let paths = if cfg.preset.is_los() {
        sampler.los_paths(&pt.sys, &mut rng)?
    } else {
        sampler.nlos_paths(&pt.sys, &mut rng)?
    };
    let pilots = design_pilots(pt.sys.n_symbols, pt.sys.n_users, &mut rng)?;
    Scenario::new(pt.sys, paths, pilots, pt.combiner.clone())
}

fn run_method(
    method: Method,
    sc: &Scenario,
    y: &crate::tensor::Tensor3,
    sigma2: f64,
    book: Option<&PolarCodebook>,
    mut row: ResultRow,
) -> Result<ResultRow> {
    let k = sc.cfg.n_users as f64;
    let book = || book.ok_or_else(|| Error::Config("codebook missing".into()));
    match method {
        Method::Cpd | Method::CpdDelayAided => {
            let mode = if method == Method::Cpd {
                AngleMode::Joint
            } else {
                AngleMode::DelayAided
            };
            let rep = estimate_los(y, &sc.pilots, book()?, mode, &AlsOptions::default())?;
            let s = rep.score(sc)?;
            row.nmse = s.nmse;
            row.mse_delay = s.sq_err_delay / k;
            row.mse_angle = s.sq_err_angle / k;
            row.mse_range = s.sq_err_range / k;
            row.mse_position = s.sq_err_position / k;
        }
        Method::Btd => {
            let rep = estimate_nlos(
                y,
                &sc.pilots,
                book()?,
                &sc.block_sizes(),
                &NlsOptions::default(),
            )?;
            row.nmse = rep.score(sc)?.nmse;
        }
        Method::Somp => {
            let prob = build_mmv(y, &sc.pilots, book()?)?;
            let res = somp(&prob, sc.n_paths())?;
            row.nmse = nmse(&somp_channels(&prob, &res), &sc.channels())?;
        }
        Method::Crb => {
            if sigma2 > 0.0 {
                let rep = CrbReport::new(sc, sigma2)?;
                row.crb_delay = rep.param(Param::Delay) / k;
                row.crb_angle = rep.param(Param::Angle) / k;
                row.crb_range = rep.param(Param::Range) / k;
                row.crb_position = rep.position() / k;
            } else {
                row.crb_delay = 0.0;
                row.crb_angle = 0.0;
                row.crb_range = 0.0;
                row.crb_position = 0.0;
            }
        }
    }
    Ok(row)
}

fn run_trial(cfg: &ExperimentConfig, pt: &Point<'_>, trial: usize) -> Vec<ResultRow> {
    let seed = trial_seed(cfg.seed, trial);
    let blank = |m: Method| ResultRow::blank(m, pt.value, trial, seed);
    let setup = (|| {
        let sc = draw_scenario(cfg, pt, seed)?;
        let clean = synthesize(&sc);
        let noise_seed = derive_seed(
            derive_seed(cfg.seed, STREAM_NOISE, pt.index as u64),
            STREAM_TRIAL,
            trial as u64,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let (y, spec) = add_noise(&clean, pt.snr_db, &mut rng)?;
        Ok::<_, Error>((sc, y, spec.sigma2))
    })();
    let (sc, y, sigma2) = match setup {
        Ok(v) => v,
        Err(e) => return cfg.methods.iter().map(|&m| blank(m).fail(&e)).collect(),
    };
    cfg.methods
        .iter()
        .map(|&m| {
            let start = Instant::now();
            let mut row = run_method(m, &sc, &y, sigma2, pt.book, blank(m))
                .unwrap_or_else(|e| blank(m).fail(&e));
            row.wall_time = start.elapsed().as_secs_f64();
            row
        })
        .collect()
}

/// Runs every sweep point and trial. Trials run on a pool of `threads`
/// workers (`None`: one per core); the output order and content do not
/// depend on the worker count.
pub fn run_experiment(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| config_err(e.to_string()))?;
    let needs_book = cfg.methods.iter().any(|&m| m != Method::Crb);
    pool.install(|| {
        let mut rows = Vec::new();
        for (index, &value) in cfg.values.iter().enumerate() {
            let (sys, snr_db) = cfg.point(value)?;
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_COMBINER, index as u64));
            let combiner = random_combiner(sys.n_antennas, sys.n_rf, &mut rng)?;
            let book = if needs_book {
                Some(PolarCodebook::new(&sys, &cfg.grids(&sys), &combiner)?)
            } else {
                None
            };
            let pt = Point {
                index,
                value,
                sys,
                snr_db,
                combiner,
                book: book.as_ref(),
            };
            let per_trial: Vec<Vec<ResultRow>> = (0..cfg.trials)
                .into_par_iter()
                .map(|t| run_trial(cfg, &pt, t))
                .collect();
            rows.extend(per_trial.into_iter().flatten());
        }
        Ok(rows)
    })
}

/// Writes `results.csv` (deterministic) and `timings.csv` into `dir`.
pub fn write_results(rows: &[ResultRow], dir: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let results = dir.join("results.csv");
    write_rows(rows, &results)?;
    let timings = dir.join("timings.csv");
    let mut w = csv::Writer::from_path(&timings)?;
    w.write_record(["method", "sweep_value", "trial", "wall_time_s"])?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.sweep_value.to_string(),
            r.trial.to_string(),
            r.wall_time.to_string(),
        ])?;
    }
    w.flush()?;
    Ok((results, timings))
}

/// Results file: version comment, header row, one row per line.
pub fn write_rows(rows: &[ResultRow], path: &Path) -> Result<()> {
    let mut f = File::create(path)?;
    writeln!(f, "{RESULTS_HEADER}")?;
    let mut w = csv::Writer::from_writer(f);
    if rows.is_empty() {
        w.write_record(["method", "sweep_value", "trial", "seed", "failed", "error"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

/// Mean and median of each metric for one (method, sweep value) group,
/// over successful rows with a finite value.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub sweep_value: f64,
    pub n_rows: usize,
    pub n_failed: usize,
    pub mean: [f64; 9],
    pub median: [f64; 9],
}

impl SummaryRow {
    pub fn mean_of(&self, metric: &str) -> Option<f64> {
        METRICS
            .iter()
            .position(|m| *m == metric)
            .map(|i| self.mean[i])
    }

    pub fn median_of(&self, metric: &str) -> Option<f64> {
        METRICS
            .iter()
            .position(|m| *m == metric)
            .map(|i| self.median[i])
    }
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Groups in order of first appearance.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut order: Vec<(String, u64)> = Vec::new();
    let mut groups: HashMap<(String, u64), Vec<&ResultRow>> = HashMap::new();
    for r in rows {
        let key = (r.method.clone(), r.sweep_value.to_bits());
        groups
            .entry(key.clone())
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let members = &groups[&key];
            let mut mean = [f64::NAN; 9];
            let mut med = [f64::NAN; 9];
            for i in 0..METRICS.len() {
                let mut vals: Vec<f64> = members
                    .iter()
                    .filter(|r| !r.failed)
                    .map(|r| r.metrics()[i])
                    .filter(|v| v.is_finite())
                    .collect();
                if !vals.is_empty() {
                    mean[i] = vals.iter().sum::<f64>() / vals.len() as f64;
                    med[i] = median(&mut vals);
                }
            }
            SummaryRow {
                method: key.0,
                sweep_value: f64::from_bits(key.1),
                n_rows: members.len(),
                n_failed: members.iter().filter(|r| r.failed).count(),
                mean,
                median: med,
            }
        })
        .collect()
}

pub fn write_summary(summary: &[SummaryRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![
        "method".to_string(),
        "sweep_value".to_string(),
        "n_rows".to_string(),
        "n_failed".to_string(),
    ];
    for m in METRICS {
        header.push(format!("mean_{m}"));
        header.push(format!("median_{m}"));
    }
    w.write_record(&header)?;
    for s in summary {
        let mut rec = vec![
            s.method.clone(),
            s.sweep_value.to_string(),
            s.n_rows.to_string(),
            s.n_failed.to_string(),
        ];
        for i in 0..METRICS.len() {
            rec.push(s.mean[i].to_string());
            rec.push(s.median[i].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
