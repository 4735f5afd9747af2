//! Experiment driver: plain-text configuration, twin-experiment
//! orchestration, error metrics, inversion runs, and plot-ready CSV output
//! with a reproducibility manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::filters::continuous::SdePath;
use crate::filters::discrete::{
    eakf_obs_step, eakf_state_step, enkf_step, enkf_step_with, etkf_step, gpf_step, kalman_step,
    noisy_threedvar_step, threedvar_step, FilterState, InnovationKind, StateRep,
};
use crate::gaussian::{sample, CovScaling, Ensemble, Gaussian};
use crate::inversion::{
    eki_bayes_iterinf_step, eki_iterinf_step, eki_transport_step, eks_step, grid_posterior,
    linear_posterior, time_averaged_forward_map, BayesPrediction, GridSpec, InverseProblem,
    IterInfParams,
};
use crate::models::{
    l96_flow, l96_observation, l96ms_vector_field, pick_inner_step, Closure, DynamicsModel,
    L96MultiscaleParams, L96Params, ObservationModel,
};
use crate::rng::{normal_matrix, normal_vector, SeededStream};

/// What a configuration drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunKind {
    Filter,
    Invert,
    Oracle,
}

/// Parsed `key = value` configuration plus run identity.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub kind: RunKind,
    pub name: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    map: BTreeMap<String, String>,
}

impl RunConfig {
    /// Parses the documented key = value format: one pair per line, `#`
    /// comments, blank lines ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let kind = match map.get("kind").map(String::as_str) {
            Some("filter") => RunKind::Filter,
            Some("invert") => RunKind::Invert,
            Some("oracle") => RunKind::Oracle,
            other => {
                return Err(Error::Config(format!(
                    "kind must be filter, invert, or oracle (got {other:?})"
                )))
            }
        };
        let name = map.get("name").cloned().unwrap_or_else(|| "run".to_string());
        let seed = match map.get("seed") {
            None => 0,
            Some(s) => s
                .parse()
                .map_err(|_| Error::Config(format!("seed must be an integer, got {s}")))?,
        };
        let out_dir = PathBuf::from(map.get("out").cloned().unwrap_or_else(|| "out".to_string()));
        Ok(Self { kind, name, seed, out_dir, map })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.map.insert("seed".into(), seed.to_string());
        self
    }

    pub fn with_out_dir(mut self, dir: PathBuf) -> Self {
        self.map.insert("out".into(), dir.display().to_string());
        self.out_dir = dir;
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        match self.map.get(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| Error::Config(format!("{key} must be a number, got {s}"))),
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        match self.map.get(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| Error::Config(format!("{key} must be an integer, got {s}"))),
        }
    }

    pub fn str_or<'a>(&'a self, key: &str, default: &'a str) -> &'a str {
        self.map.get(key).map(String::as_str).unwrap_or(default)
    }

    fn f64_list(&self, key: &str) -> Result<Vec<f64>> {
        let raw = self
            .map
            .get(key)
            .ok_or_else(|| Error::Config(format!("missing required key {key}")))?;
        raw.split(',')
            .map(|t| {
                t.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{key}: bad number {t}")))
            })
            .collect()
    }

    /// Canonical text form: sorted `key = value` lines.
    pub fn normalized(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.map {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

/// Per-step record of a twin experiment.
#[derive(Debug, Clone)]
pub struct MetricsRecord {
    pub tau: f64,
    pub times: Vec<f64>,
    pub truth: Vec<DVector<f64>>,
    pub estimate: Vec<DVector<f64>>,
    pub spread: Vec<DVector<f64>>,
    pub sq_error: Vec<f64>,
}

impl MetricsRecord {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Time-averaged mean squared error over the steady-state window
/// `(t, T]`: `e = 1/(N d) sum |truth_n - est_n|^2`.
pub fn compute_mse(
    truth: &[DVector<f64>],
    estimate: &[DVector<f64>],
    burn_in: f64,
    t_end: f64,
    tau: f64,
) -> Result<f64> {
    if truth.len() != estimate.len() {
        return Err(Error::Alignment(format!(
            "truth has {} states, estimate {}",
            truth.len(),
            estimate.len()
        )));
    }
    let n0f = burn_in / tau;
    let nef = t_end / tau;
    let n0 = n0f.round() as usize;
    let ne = nef.round() as usize;
    if (n0 as f64 - n0f).abs() > 1e-6 || (ne as f64 - nef).abs() > 1e-6 || ne <= n0 {
        return Err(Error::Alignment(format!(
            "burn-in {burn_in} and horizon {t_end} must be integer multiples of tau {tau}"
        )));
    }
    if truth.len() <= ne {
        return Err(Error::Alignment(format!(
            "paths have {} states, need {}",
            truth.len(),
            ne + 1
        )));
    }
    let d = truth[0].len() as f64;
    let n = (ne - n0) as f64;
    let sum: f64 = (n0 + 1..=ne).map(|i| (&truth[i] - &estimate[i]).norm_squared()).sum();
    Ok(sum / (n * d))
}

/// Truth and observations of one synthetic-data experiment.
pub struct TwinData {
    pub truth: Vec<DVector<f64>>,
    pub observations: Vec<DVector<f64>>,
}

enum TruthSystem {
    /// Discrete Markov truth: flow plus additive Gaussian noise.
    Generic { dynamics: DynamicsModel },
    /// Multiscale Lorenz '96 truth observed through its slow variables.
    Multiscale { params: L96MultiscaleParams, tau: f64, fast0: DMatrix<f64> },
}

struct ModelSetup {
    truth: TruthSystem,
    filter_dynamics: DynamicsModel,
    obs: ObservationModel,
    fixed_gain: Option<DMatrix<f64>>,
    truth_init: DVector<f64>,
    /// Matrices for the Kalman filter when everything is linear.
    linear: Option<(DMatrix<f64>, DMatrix<f64>)>,
}

fn l96_closure(cfg: &RunConfig) -> Result<Closure> {
    match cfg.str_or("l96.closure", "default-cubic") {
        "default-cubic" => Ok(Closure::default_cubic()),
        "zero" => Ok(Closure::Zero),
        other => Err(Error::Config(format!("unknown closure {other}"))),
    }
}

fn spin_up_l96(params: &L96Params, t_spin: f64, stream: &SeededStream) -> Result<DVector<f64>> {
    let perturb = normal_vector(&mut stream.rng("truth-init", 0, 0), params.l);
    let v0 = DVector::from_element(params.l, params.f) + perturb * 0.5;
    l96_flow(params, &v0, t_spin.max(1e-3), 1e-3)
}

fn build_model(cfg: &RunConfig, stream: &SeededStream) -> Result<ModelSetup> {
    let tau = cfg.f64_or("tau", 1e-3)?;
    if tau <= 0.0 {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    let sigma2 = cfg.f64_or("sigma2", 1e-3)?;
    let gamma2 = cfg.f64_or("gamma2", 1e-3)?;
    match cfg.str_or("model", "l96") {
        "l96" => {
            let l = cfg.usize_or("l96.l", 9)?;
            if l != 9 {
                return Err(Error::Config("the selection observation operator needs L = 9".into()));
            }
            let params = L96Params::new(
                l,
                cfg.f64_or("l96.f", 10.0)?,
                cfg.f64_or("l96.hv", -0.8)?,
                l96_closure(cfg)?,
            )?;
            let sigma = DMatrix::identity(l, l) * sigma2;
            let gamma = DMatrix::identity(6, 6) * gamma2.max(1e-12);
            let (h, k) = l96_observation();
            let truth_init = spin_up_l96(&params, cfg.f64_or("spin_up", 5.0)?, stream)?;
            let dynamics = DynamicsModel::l96(params, tau, sigma)?;
            Ok(ModelSetup {
                truth: TruthSystem::Generic { dynamics: dynamics.clone() },
                filter_dynamics: dynamics,
                obs: ObservationModel::linear(h, gamma)?,
                fixed_gain: Some(k),
                truth_init,
                linear: None,
            })
        }
        "l96ms" => {
            let ms = L96MultiscaleParams::new(
                cfg.usize_or("l96ms.l", 9)?,
                cfg.usize_or("l96ms.j", 8)?,
                cfg.f64_or("l96ms.eps", 2f64.powi(-7))?,
                cfg.f64_or("l96ms.hv", -0.8)?,
                cfg.f64_or("l96ms.hw", 1.0)?,
                cfg.f64_or("l96ms.f", 10.0)?,
            )?;
            if ms.l != 9 {
                return Err(Error::Config("the selection observation operator needs L = 9".into()));
            }
            // Assimilating model: the singlescale closure.
            let single = L96Params::new(ms.l, ms.f, ms.h_v, l96_closure(cfg)?)?;
            let sigma = DMatrix::identity(ms.l, ms.l) * sigma2;
            let gamma = DMatrix::identity(6, 6) * gamma2.max(1e-12);
            let (h, k) = l96_observation();
            let truth_init = spin_up_l96(&single, cfg.f64_or("spin_up", 5.0)?, stream)?;
            let fast0 = DMatrix::from_fn(ms.l, ms.j, |ell, j| {
                ms.h_w * truth_init[ell] + 0.01 * ((ell * ms.j + j) as f64 + 1.0).sin()
            });
            Ok(ModelSetup {
                truth: TruthSystem::Multiscale { params: ms, tau, fast0 },
                filter_dynamics: DynamicsModel::l96(single, tau, sigma)?,
                obs: ObservationModel::linear(h, gamma)?,
                fixed_gain: Some(k),
                truth_init,
                linear: None,
            })
        }
        "linear" => {
            let d = cfg.usize_or("linear.dim", 5)?;
            let dy = cfg.usize_or("linear.obs_dim", 3)?;
            let rho = cfg.f64_or("linear.spectral", 0.7)?;
            let mut rng = stream.rng("linear-model", 0, 0);
            let mut m = normal_matrix(&mut rng, d, d) * (rho * 0.5 / (d as f64).sqrt());
            for i in 0..d {
                m[(i, i)] += rho * 0.5;
            }
            let h = normal_matrix(&mut rng, dy, d);
            let sigma = DMatrix::identity(d, d) * sigma2;
            let gamma = DMatrix::identity(dy, dy) * gamma2.max(1e-12);
            let truth_init = normal_vector(&mut rng, d);
            Ok(ModelSetup {
                truth: TruthSystem::Generic { dynamics: DynamicsModel::linear(m.clone(), sigma.clone())? },
                filter_dynamics: DynamicsModel::linear(m.clone(), sigma)?,
                obs: ObservationModel::linear(h.clone(), gamma)?,
                fixed_gain: None,
                truth_init,
                linear: Some((m, h)),
            })
        }
        other => Err(Error::Config(format!("unknown model {other}"))),
    }
}

/// Synthesizes a truth trajectory and the observations it generates. The
/// truth stream is disjoint from every filter stream, so changing the filter
/// configuration never perturbs the data.
pub fn synthesize_twin_data(
    setup: &ModelSetupHandle<'_>,
    steps: usize,
    stream: &SeededStream,
) -> Result<TwinData> {
    let truth_stream = stream.substream("truth");
    let obs = setup.obs();
    let mut truth = Vec::with_capacity(steps + 1);
    let mut observations = Vec::with_capacity(steps);
    match setup.truth() {
        TruthSystem::Generic { dynamics } => {
            let d = setup.truth_init().len();
            let mut v = setup.truth_init().clone();
            truth.push(v.clone());
            for n in 0..steps {
                let xi = normal_vector(&mut truth_stream.rng("truth-state", n as u64, 0), d);
                v = dynamics.flow(&v)? + dynamics.noise_sqrt() * xi;
                let eta = normal_vector(&mut truth_stream.rng("truth-obs", n as u64, 0), obs.dim_y());
                observations.push(obs.observe(&v) + obs.noise_sqrt() * eta);
                truth.push(v.clone());
            }
        }
        TruthSystem::Multiscale { params, tau, fast0 } => {
            let dt = pick_inner_step(*tau, params.eps / 40.0);
            let n_inner = (*tau / dt).round() as usize;
            let mut v = setup.truth_init().clone();
            let mut w = fast0.clone();
            truth.push(v.clone());
            for n in 0..steps {
                for _ in 0..n_inner {
                    // RK4 on the coupled slow/fast system.
                    let (k1v, k1w) = l96ms_vector_field(params, &v, &w)?;
                    let (k2v, k2w) = l96ms_vector_field(params, &(&v + &k1v * (dt / 2.0)), &(&w + &k1w * (dt / 2.0)))?;
                    let (k3v, k3w) = l96ms_vector_field(params, &(&v + &k2v * (dt / 2.0)), &(&w + &k2w * (dt / 2.0)))?;
                    let (k4v, k4w) = l96ms_vector_field(params, &(&v + &k3v * dt), &(&w + &k3w * dt))?;
                    v += (k1v + k2v * 2.0 + k3v * 2.0 + k4v) * (dt / 6.0);
                    w += (k1w + k2w * 2.0 + k3w * 2.0 + k4w) * (dt / 6.0);
                    if v.amax() > crate::models::BLOWUP_LIMIT {
                        return Err(Error::NonFinite { what: "multiscale truth" });
                    }
                }
                let eta = normal_vector(&mut truth_stream.rng("truth-obs", n as u64, 0), obs.dim_y());
                observations.push(obs.observe(&v) + obs.noise_sqrt() * eta);
                truth.push(v.clone());
            }
        }
    }
    Ok(TwinData { truth, observations })
}

/// Opaque handle exposing the pieces of a built model to the twin-data
/// synthesizer.
pub struct ModelSetupHandle<'a>(&'a ModelSetup);

impl<'a> ModelSetupHandle<'a> {
    fn truth(&self) -> &TruthSystem {
        &self.0.truth
    }
    fn obs(&self) -> &ObservationModel {
        &self.0.obs
    }
    fn truth_init(&self) -> &DVector<f64> {
        &self.0.truth_init
    }
}

enum Algorithm {
    ThreeDVar,
    NoisyThreeDVar,
    Kf,
    Gpf { quad: usize },
    Enkf,
    EnkfDet,
    EakfState,
    EakfObs,
    Etkf,
}

impl Algorithm {
    fn parse(cfg: &RunConfig) -> Result<Self> {
        Ok(match cfg.str_or("algorithm", "threedvar") {
            "threedvar" => Algorithm::ThreeDVar,
            "noisy-threedvar" => Algorithm::NoisyThreeDVar,
            "kf" => Algorithm::Kf,
            "gpf" => Algorithm::Gpf { quad: cfg.usize_or("quad", 2000)? },
            "enkf" => Algorithm::Enkf,
            "enkf-det" => Algorithm::EnkfDet,
            "eakf-state" => Algorithm::EakfState,
            "eakf-obs" => Algorithm::EakfObs,
            "etkf" => Algorithm::Etkf,
            other => return Err(Error::Config(format!("unknown algorithm {other}"))),
        })
    }

    fn needs_ensemble(&self) -> bool {
        matches!(
            self,
            Algorithm::Enkf | Algorithm::EnkfDet | Algorithm::EakfState | Algorithm::EakfObs | Algorithm::Etkf
        )
    }
}

/// Output of a twin experiment.
pub struct TwinOutput {
    pub record: MetricsRecord,
    pub mse: f64,
    pub csv_path: Option<PathBuf>,
}

/// Runs a full twin experiment from a configuration: synthesize, assimilate,
/// score, and (when an output directory is set) write records.
pub fn run_twin_experiment(cfg: &RunConfig) -> Result<TwinOutput> {
    run_twin_experiment_inner(cfg, true)
}

/// Same as [`run_twin_experiment`] but never touches the filesystem.
pub fn run_twin_experiment_in_memory(cfg: &RunConfig) -> Result<TwinOutput> {
    run_twin_experiment_inner(cfg, false)
}

fn run_twin_experiment_inner(cfg: &RunConfig, write: bool) -> Result<TwinOutput> {
    if cfg.kind != RunKind::Filter {
        return Err(Error::Config("run_twin_experiment needs kind = filter".into()));
    }
    let tau = cfg.f64_or("tau", 1e-3)?;
    let t_end = cfg.f64_or("t_end", 10.0)?;
    let burn_in = cfg.f64_or("burn_in", 5.0)?;
    if t_end <= 0.0 || tau <= 0.0 {
        return Err(Error::Config("tau and t_end must be positive".into()));
    }
    let steps = (t_end / tau).round() as usize;
    let stream = SeededStream::new(cfg.seed);
    let setup = build_model(cfg, &stream)?;
    let algorithm = Algorithm::parse(cfg)?;
    let data = synthesize_twin_data(&ModelSetupHandle(&setup), steps, &stream)?;

    let filter_stream = stream.substream("filter");
    let d = setup.filter_dynamics.dim();
    let offset = normal_vector(&mut filter_stream.rng("filter-init", 0, 0), d);
    let init_point = setup.truth_init.clone() + offset;
    let ensemble_size = cfg.usize_or("ensemble", 100)?;
    let scaling = CovScaling::default();

    let mut state = match &algorithm {
        Algorithm::ThreeDVar | Algorithm::NoisyThreeDVar => FilterState {
            state: StateRep::Point(init_point.clone()),
            step: 0,
        },
        Algorithm::Kf | Algorithm::Gpf { .. } => FilterState {
            state: StateRep::Gaussian(Gaussian::from_parts(
                init_point.clone(),
                DMatrix::identity(d, d),
            )),
            step: 0,
        },
        _ => {
            let init = Gaussian::from_parts(init_point.clone(), DMatrix::identity(d, d));
            FilterState {
                state: StateRep::Ensemble(sample(&init, ensemble_size, &filter_stream, "ensemble-init", 0)?),
                step: 0,
            }
        }
    };
    if algorithm.needs_ensemble() && ensemble_size < 2 {
        return Err(Error::Config("ensemble filters need ensemble >= 2".into()));
    }
    let gain = setup.fixed_gain.clone();
    let (m_mat, h_mat) = match (&algorithm, &setup.linear) {
        (Algorithm::Kf, Some((m, h))) => (Some(m.clone()), Some(h.clone())),
        (Algorithm::Kf, None) => {
            return Err(Error::Config("the Kalman filter needs model = linear".into()))
        }
        _ => (None, None),
    };

    let mut record = MetricsRecord {
        tau,
        times: vec![0.0],
        truth: vec![data.truth[0].clone()],
        estimate: vec![state.estimate()],
        spread: vec![state.spread(scaling)],
        sq_error: vec![(&data.truth[0] - state.estimate()).norm_squared()],
    };

    for n in 0..steps {
        let y = &data.observations[n];
        let step = n as u64;
        let next = match (&algorithm, &state.state) {
            (Algorithm::ThreeDVar, StateRep::Point(v)) => StateRep::Point(threedvar_step(
                &setup.filter_dynamics,
                &setup.obs,
                gain.as_ref()
                    .ok_or_else(|| Error::Config("3DVAR needs the fixed selection gain".into()))?,
                v,
                y,
            )?),
            (Algorithm::NoisyThreeDVar, StateRep::Point(v)) => StateRep::Point(noisy_threedvar_step(
                &setup.filter_dynamics,
                &setup.obs,
                gain.as_ref()
                    .ok_or_else(|| Error::Config("3DVAR needs the fixed selection gain".into()))?,
                v,
                y,
                &filter_stream,
                step,
            )?),
            (Algorithm::Kf, StateRep::Gaussian(g)) => StateRep::Gaussian(kalman_step(
                m_mat.as_ref().unwrap(),
                h_mat.as_ref().unwrap(),
                &setup.filter_dynamics.process_noise_cov,
                &setup.obs.noise_cov,
                g,
                y,
            )?),
            (Algorithm::Gpf { quad }, StateRep::Gaussian(g)) => StateRep::Gaussian(gpf_step(
                &setup.filter_dynamics,
                &setup.obs,
                g,
                y,
                *quad,
                &filter_stream,
                step,
            )?),
            (Algorithm::Enkf, StateRep::Ensemble(e)) => StateRep::Ensemble(enkf_step(
                &setup.filter_dynamics,
                &setup.obs,
                e,
                y,
                &filter_stream,
                step,
            )?),
            (Algorithm::EnkfDet, StateRep::Ensemble(e)) => StateRep::Ensemble(enkf_step_with(
                &setup.filter_dynamics,
                &setup.obs,
                e,
                y,
                &filter_stream,
                step,
                InnovationKind::Deterministic,
                scaling,
            )?),
            (Algorithm::EakfState, StateRep::Ensemble(e)) => StateRep::Ensemble(eakf_state_step(
                &setup.filter_dynamics,
                &setup.obs,
                e,
                y,
                &filter_stream,
                step,
            )?),
            (Algorithm::EakfObs, StateRep::Ensemble(e)) => StateRep::Ensemble(eakf_obs_step(
                &setup.filter_dynamics,
                &setup.obs,
                e,
                y,
                &filter_stream,
                step,
            )?),
            (Algorithm::Etkf, StateRep::Ensemble(e)) => {
                let (next, _) = etkf_step(&setup.filter_dynamics, &setup.obs, e, y, &filter_stream, step)?;
                StateRep::Ensemble(next)
            }
            _ => unreachable!("state representation matches algorithm"),
        };
        state = FilterState { state: next, step: step + 1 };
        let est = state.estimate();
        record.times.push((n + 1) as f64 * tau);
        record.sq_error.push((&data.truth[n + 1] - &est).norm_squared());
        record.truth.push(data.truth[n + 1].clone());
        record.spread.push(state.spread(scaling));
        record.estimate.push(est);
    }

    let mse = compute_mse(&record.truth, &record.estimate, burn_in, t_end, tau)?;
    let csv_path = if write {
        Some(emit_records(&record, cfg)?)
    } else {
        None
    };
    Ok(TwinOutput { record, mse, csv_path })
}

fn fmt_f64(x: f64) -> String {
    // 17 significant digits: round-trips f64 exactly.
    format!("{x:.16e}")
}

fn git_revision() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".to_string())
}

fn write_manifest(cfg: &RunConfig, path: &Path) -> Result<()> {
    let mut text = String::new();
    let _ = writeln!(text, "# run manifest");
    let _ = writeln!(text, "name = {}", cfg.name);
    let _ = writeln!(text, "seed = {}", cfg.seed);
    let _ = writeln!(text, "git_revision = {}", git_revision());
    let _ = writeln!(text, "# configuration");
    text.push_str(&cfg.normalized());
    fs::write(path, text)?;
    Ok(())
}

/// Writes the per-step CSV (`time, truth_i..., est_i..., spread_i...`) and a
/// manifest capturing the configuration, the seed, and the git revision.
pub fn emit_records(record: &MetricsRecord, cfg: &RunConfig) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.out_dir)?;
    let csv_path = cfg.out_dir.join(format!("{}.csv", cfg.name));
    let d = record.truth.first().map(|v| v.len()).unwrap_or(0);
    let mut text = String::new();
    text.push_str("time");
    for i in 0..d {
        let _ = write!(text, ",truth_{i}");
    }
    for i in 0..d {
        let _ = write!(text, ",est_{i}");
    }
    for i in 0..d {
        let _ = write!(text, ",spread_{i}");
    }
    text.push('\n');
    for n in 0..record.len() {
        text.push_str(&fmt_f64(record.times[n]));
        for i in 0..d {
            let _ = write!(text, ",{}", fmt_f64(record.truth[n][i]));
        }
        for i in 0..d {
            let _ = write!(text, ",{}", fmt_f64(record.estimate[n][i]));
        }
        for i in 0..d {
            let _ = write!(text, ",{}", fmt_f64(record.spread[n][i]));
        }
        text.push('\n');
    }
    fs::write(&csv_path, text)?;
    write_manifest(cfg, &cfg.out_dir.join(format!("{}.manifest.txt", cfg.name)))?;
    Ok(csv_path)
}

/// Reads back a CSV produced by [`emit_records`].
pub fn read_records_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path)?;
    let mut rows = vec![];
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|t| t.parse::<f64>()).collect();
        rows.push(row.map_err(|e| Error::Config(format!("csv parse: {e}")))?);
    }
    Ok(rows)
}

/// Per-iteration summary of an inversion run.
#[derive(Debug, Clone)]
pub struct IterationStat {
    pub iter: u64,
    pub mean: DVector<f64>,
    pub std: DVector<f64>,
}

/// Output of an inversion run.
pub struct InversionOutput {
    pub iterations: Vec<IterationStat>,
    pub final_ensemble: Ensemble,
    /// Posterior-comparison verdict for problems with a linear oracle.
    pub verdict: Option<String>,
    pub files: Vec<PathBuf>,
}

fn l96_forward_problem(cfg: &RunConfig, stream: &SeededStream) -> Result<InverseProblem> {
    let t_run = cfg.f64_or("fwd.t", 20.0)?;
    let t_data = cfg.f64_or("fwd.data_t", 10.0)?;
    let tau = cfg.f64_or("fwd.tau", 1e-2)?;
    let true_u = cfg.f64_or("fwd.true_u", 10.0)?;
    let noise1 = cfg.f64_or("fwd.noise1", 0.1)?;
    let noise2 = cfg.f64_or("fwd.noise2", 0.5)?;
    let base = L96Params::new(
        cfg.usize_or("l96.l", 9)?,
        true_u,
        cfg.f64_or("l96.hv", -0.8)?,
        l96_closure(cfg)?,
    )?;
    let init = Gaussian::isotropic(base.l, 0.0, cfg.f64_or("fwd.init_var", 40.0)?);
    let gamma = DMatrix::from_partial_diagonal(2, 2, &[noise1 * noise1, noise2 * noise2]);

    // Data from the true forcing over the (shorter) data horizon.
    let data_stream = stream.substream("truth-data");
    let clean = time_averaged_forward_map(&base, true_u, t_data, tau, &init, &data_stream)?;
    let eta = normal_vector(&mut data_stream.rng("data-noise", 0, 0), 2);
    let noise_root = DMatrix::from_partial_diagonal(2, 2, &[noise1, noise2]);
    let data = clean + noise_root * eta;

    let fwd_stream = stream.substream("forward");
    let fwd_base = base.clone();
    let fwd_init = init.clone();
    let prior = Gaussian::isotropic(1, cfg.f64_or("prior.mean", 0.0)?, cfg.f64_or("prior.var", 10.0)?);
    InverseProblem::new(
        move |u: &DVector<f64>| {
            time_averaged_forward_map(&fwd_base, u[0], t_run, tau, &fwd_init, &fwd_stream)
                .unwrap_or_else(|_| DVector::from_element(2, f64::NAN))
        },
        data,
        gamma,
        prior,
    )
}

fn linear_demo_problem(cfg: &RunConfig, stream: &SeededStream) -> Result<(InverseProblem, DMatrix<f64>)> {
    let du = cfg.usize_or("linear.dim", 3)?;
    let dw = cfg.usize_or("linear.obs_dim", 4)?;
    let mut rng = stream.rng("invert-linear", 0, 0);
    let l = normal_matrix(&mut rng, dw, du);
    let prior = Gaussian::isotropic(du, 0.0, 1.0);
    let truth = normal_vector(&mut rng, du);
    let gamma = DMatrix::identity(dw, dw) * cfg.f64_or("linear.noise", 0.25)?;
    let data = &l * truth + crate::gaussian::psd_sqrt(&gamma)?.matrix * normal_vector(&mut rng, dw);
    Ok((InverseProblem::linear(l.clone(), data, gamma, prior)?, l))
}

/// Runs a configured inversion: per-iteration ensemble statistics plus the
/// final ensemble for histogram reproduction.
pub fn run_inversion(cfg: &RunConfig) -> Result<InversionOutput> {
    run_inversion_inner(cfg, true)
}

pub fn run_inversion_in_memory(cfg: &RunConfig) -> Result<InversionOutput> {
    run_inversion_inner(cfg, false)
}

fn run_inversion_inner(cfg: &RunConfig, write: bool) -> Result<InversionOutput> {
    if cfg.kind != RunKind::Invert {
        return Err(Error::Config("run_inversion needs kind = invert".into()));
    }
    let stream = SeededStream::new(cfg.seed);
    let (problem, linear) = match cfg.str_or("forward", "l96-mean-var") {
        "l96-mean-var" => (l96_forward_problem(cfg, &stream)?, None),
        "linear-demo" => {
            let (p, l) = linear_demo_problem(cfg, &stream)?;
            (p, Some(l))
        }
        other => return Err(Error::Config(format!("unknown forward map {other}"))),
    };
    let steps = cfg.usize_or("steps", 15)?;
    let j = cfg.usize_or("ensemble", 30)?;
    let method = cfg.str_or("method", "eki-transport").to_string();
    let ens_stream = stream.substream("ensemble");
    let mut e = sample(&problem.prior, j, &ens_stream, "init", 0)?;

    let scaling = CovScaling::default();
    let mut iterations = vec![];
    let push_stat = |iter: u64, e: &Ensemble, out: &mut Vec<IterationStat>| {
        out.push(IterationStat { iter, mean: e.mean(), std: e.component_std(scaling) });
    };
    push_stat(0, &e, &mut iterations);

    let dt = cfg.f64_or("dt", 1.0)?;
    let alpha = cfg.f64_or("alpha", 0.5)?;
    for n in 0..steps {
        let step = n as u64;
        e = match method.as_str() {
            "eki-transport" => eki_transport_step(&problem, &e, dt, &ens_stream, step)?,
            "eki-iterinf" => {
                let params = IterInfParams::new(
                    alpha,
                    cfg.f64_or("sigma_prime", 0.0)?,
                    cfg.f64_or("gamma_prime", 1.0)?,
                    DVector::from_element(problem.dim_u(), cfg.f64_or("anchor", 0.0)?),
                    DMatrix::identity(problem.dim_u(), problem.dim_u()),
                )?;
                eki_iterinf_step(&problem, &params, &e, &ens_stream, step)?
            }
            "eki-bayes" => {
                let pred = match cfg.str_or("prediction", "stochastic") {
                    "stochastic" => BayesPrediction::Stochastic,
                    "inflation" => BayesPrediction::DeterministicInflation,
                    other => return Err(Error::Config(format!("unknown prediction {other}"))),
                };
                eki_bayes_iterinf_step(&problem, alpha, &e, &ens_stream, step, pred)?
            }
            "eks" => eks_step(&problem, &e, dt, &ens_stream, step)?,
            other => return Err(Error::Config(format!("unknown method {other}"))),
        };
        push_stat(step + 1, &e, &mut iterations);
    }

    // For problems with a linear oracle, log how close the final moments are.
    let verdict = match linear {
        None => None,
        Some(l) => {
            let post = linear_posterior(&l, &problem)?;
            let m = crate::gaussian::empirical_moments(&e, scaling)?;
            let tol = 5.0 / (j as f64).sqrt();
            let mean_err = (&m.mean - &post.mean).norm() / post.cov.trace().sqrt();
            let cov_err = (&m.cov - &post.cov).norm() / post.cov.norm();
            Some(format!(
                "posterior check: mean_err={mean_err:.4e} cov_err={cov_err:.4e} tol={tol:.4e} pass={}",
                mean_err <= tol && cov_err <= 2.0 * tol
            ))
        }
    };

    let mut files = vec![];
    if write {
        fs::create_dir_all(&cfg.out_dir)?;
        let iters_path = cfg.out_dir.join(format!("{}_iterations.csv", cfg.name));
        let du = problem.dim_u();
        let mut text = String::from("iter");
        for i in 0..du {
            let _ = write!(text, ",mean_{i}");
        }
        for i in 0..du {
            let _ = write!(text, ",std_{i}");
        }
        text.push('\n');
        for st in &iterations {
            let _ = write!(text, "{}", st.iter);
            for i in 0..du {
                let _ = write!(text, ",{}", fmt_f64(st.mean[i]));
            }
            for i in 0..du {
                let _ = write!(text, ",{}", fmt_f64(st.std[i]));
            }
            text.push('\n');
        }
        fs::write(&iters_path, text)?;

        let members_path = cfg.out_dir.join(format!("{}_members.csv", cfg.name));
        let mut text = String::from("member");
        for i in 0..du {
            let _ = write!(text, ",u_{i}");
        }
        text.push('\n');
        for k in 0..e.member_count() {
            let _ = write!(text, "{k}");
            for i in 0..du {
                let _ = write!(text, ",{}", fmt_f64(e.members[(i, k)]));
            }
            text.push('\n');
        }
        fs::write(&members_path, text)?;
        write_manifest(cfg, &cfg.out_dir.join(format!("{}.manifest.txt", cfg.name)))?;
        files.push(iters_path);
        files.push(members_path);
    }

    Ok(InversionOutput { iterations, final_ensemble: e, verdict, files })
}

/// Output of an oracle dump.
pub struct OracleOutput {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub files: Vec<PathBuf>,
}

/// Dumps a grid posterior for a configured problem.
pub fn run_oracle(cfg: &RunConfig) -> Result<OracleOutput> {
    if cfg.kind != RunKind::Oracle {
        return Err(Error::Config("run_oracle needs kind = oracle".into()));
    }
    let stream = SeededStream::new(cfg.seed);
    let problem = match cfg.str_or("problem", "cubic1d") {
        "cubic1d" => InverseProblem::new(
            |u: &DVector<f64>| DVector::from_element(1, u[0] * u[0] * u[0] / 10.0 + u[0]),
            DVector::from_element(1, cfg.f64_or("w", 2.0)?),
            DMatrix::identity(1, 1) * cfg.f64_or("gamma", 1.0)?,
            Gaussian::isotropic(1, 0.0, 1.0),
        )?,
        "linear-demo" => linear_demo_problem(cfg, &stream)?.0,
        other => return Err(Error::Config(format!("unknown oracle problem {other}"))),
    };
    let t = cfg.f64_or("t", 1.0)?;
    let spec = GridSpec {
        lo: cfg.f64_list("grid.lo")?,
        hi: cfg.f64_list("grid.hi")?,
        n: cfg
            .f64_list("grid.n")?
            .into_iter()
            .map(|x| x as usize)
            .collect(),
    };
    let density = grid_posterior(&problem, t, &spec)?;
    let mean = density.mean();
    let cov = density.cov();

    let mut files = vec![];
    fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg.out_dir.join(format!("{}_grid.csv", cfg.name));
    let d = spec.dim();
    let mut text = String::new();
    for i in 0..d {
        let _ = write!(text, "u_{i},");
    }
    text.push_str("weight,log_density\n");
    for flat in 0..spec.total() {
        let u = spec.point(flat);
        for i in 0..d {
            let _ = write!(text, "{},", fmt_f64(u[i]));
        }
        let _ = writeln!(
            text,
            "{},{}",
            fmt_f64(density.weights[flat]),
            fmt_f64(density.log_density[flat])
        );
    }
    fs::write(&path, text)?;
    write_manifest(cfg, &cfg.out_dir.join(format!("{}.manifest.txt", cfg.name)))?;
    files.push(path);
    Ok(OracleOutput { mean, cov, files })
}

/// Interpolates coarse observation data onto a finer grid (utility shared
/// with the continuous-time estimators).
pub fn interpolate_data(path: &SdePath, dt_new: f64) -> Result<SdePath> {
    path.interpolate(dt_new)
}
