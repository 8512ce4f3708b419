//! Seeded Monte-Carlo experiments: configuration and figure presets, the
//! trial runner, aggregation, and the on-disk run format.
//!
//! A run directory holds `config.json`, `roc.csv`, `summary.json`,
//! `dl_trace.csv`, optionally `params.csv`, and `manifest.json`, which lists
//! every other file with its SHA-256 digest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dictionary::{run_dl, DlConfig};
use crate::error::ResultExt;
use crate::evaluation::{align_sources, detection_counts, evm, roc_curve, DetectionCounts, EvmReport, RocCurve};
use crate::io;
use crate::psf::{psf_pipeline, quantize_states, BacParams, EmConfig, PsfMode, QuantizerConfig};
use crate::scenario::{
    generate, noise_variance, ActivationMatrix, HmmParams, ScenarioConfig, SignalDistribution, SourceHmm,
};
use crate::sparse::{Method, OmpStop, SolverParams};
use crate::{derive_seed, CMatrix, Error, Result};

/// False-alarm rates at which headline detection figures are read off.
pub const PFA_TARGETS: [f64; 2] = [0.07, 0.1];

pub const FIGURES: [&str; 7] = ["fig4", "fig5", "fig6", "fig7", "fig8", "fig9", "fig10"];

const STREAM_DL: u64 = 11;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterMode {
    /// Threshold the recovered rows, no filtering.
    Raw,
    /// Filter with the true chain parameters and fixed flip probabilities.
    Known,
    /// Filter with parameters fitted by EM.
    Em,
}

impl FilterMode {
    pub fn name(&self) -> &'static str {
        match self {
            FilterMode::Raw => "raw",
            FilterMode::Known => "known",
            FilterMode::Em => "em",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    /// Replaces the quantizer grid; never multiplies the trial count.
    Gamma,
    Lambda,
    Mu,
    Snr,
    /// Expected number of simultaneously active sources, set through `p`.
    Sparsity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub axis: SweepAxis,
    pub grid: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PsfSettings {
    pub gamma_grid: Vec<f64>,
    pub modes: Vec<FilterMode>,
    /// Flip probabilities assumed by the known-parameter filter.
    pub known_bac: BacParams,
    pub em: EmConfig,
    /// Threshold at which EM estimates are recorded.
    pub operating_gamma: f64,
    /// EVM is reported at the largest threshold whose pooled `pd` reaches this.
    pub evm_pd_floor: f64,
}

impl Default for PsfSettings {
    fn default() -> Self {
        PsfSettings {
            gamma_grid: vec![
                0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.5, 0.6, 0.7, 0.8, 1.0, 1.25, 1.5, 2.0,
            ],
            modes: vec![FilterMode::Raw, FilterMode::Known],
            known_bac: BacParams {
                p_flip: 0.02,
                q_flip: 0.27,
            },
            em: EmConfig::default(),
            operating_gamma: QuantizerConfig::default().gamma,
            evm_pd_floor: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub scenario: ScenarioConfig,
    pub dl: DlConfig,
    pub solver: SolverParams,
    /// At every sweep point set `λ = 1/SNR`, `μ = 0.1/q̄` and the OMP
    /// sparsity to the expected active count, unless that axis is swept.
    pub rule_of_thumb: bool,
    pub methods: Vec<Method>,
    pub psf: PsfSettings,
    /// Cartesian product of axes; a `gamma` entry sets the quantizer grid.
    pub sweeps: Vec<Sweep>,
    pub trials: usize,
    pub seed: u64,
    /// Parent directory for run output.
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "custom".into(),
            scenario: ScenarioConfig::default(),
            dl: DlConfig::default(),
            solver: SolverParams::default(),
            rule_of_thumb: true,
            methods: Method::ALL.to_vec(),
            psf: PsfSettings::default(),
            sweeps: Vec::new(),
            trials: 50,
            seed: 1,
            out_dir: None,
        }
    }
}

/// Built-in configuration for one of [`FIGURES`].
pub fn preset(figure: &str) -> Result<ExperimentConfig> {
    let base = ExperimentConfig {
        name: figure.to_string(),
        ..ExperimentConfig::default()
    };
    let modes = |m: &[FilterMode]| PsfSettings {
        modes: m.to_vec(),
        ..PsfSettings::default()
    };
    let cfg = match figure {
        "fig4" => base,
        "fig5" => ExperimentConfig {
            methods: vec![Method::SlAdmm],
            sweeps: vec![
                Sweep {
                    axis: SweepAxis::Snr,
                    grid: vec![10.0, 20.0, 30.0],
                },
                Sweep {
                    axis: SweepAxis::Lambda,
                    grid: vec![1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1],
                },
            ],
            ..base
        },
        "fig6" => ExperimentConfig {
            methods: vec![Method::SlAdmm],
            sweeps: vec![Sweep {
                axis: SweepAxis::Mu,
                grid: vec![0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0],
            }],
            ..base
        },
        "fig7" => ExperimentConfig {
            sweeps: vec![Sweep {
                axis: SweepAxis::Sparsity,
                grid: vec![1.5, 3.0, 4.5, 6.0],
            }],
            ..base
        },
        // EVM is measured on equiprobable ±1 symbols.
        "fig8" => ExperimentConfig {
            scenario: ScenarioConfig {
                dist: SignalDistribution::Bpsk,
                ..ScenarioConfig::default()
            },
            sweeps: vec![Sweep {
                axis: SweepAxis::Snr,
                grid: vec![10.0, 15.0, 20.0, 25.0, 30.0],
            }],
            ..base
        },
        "fig9" => ExperimentConfig {
            methods: vec![Method::SlAdmm],
            psf: modes(&[FilterMode::Raw, FilterMode::Em]),
            ..base
        },
        "fig10" => ExperimentConfig {
            psf: modes(&[FilterMode::Raw, FilterMode::Known, FilterMode::Em]),
            ..base
        },
        other => {
            return Err(Error::Parameter(format!(
                "unknown figure {other:?}; expected one of {}",
                FIGURES.join(", ")
            )))
        }
    };
    Ok(cfg)
}

/// Effective settings at one sweep point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointInfo {
    pub index: usize,
    pub coords: Vec<(SweepAxis, f64)>,
    pub snr_db: f64,
    pub lambda: f64,
    pub mu: f64,
    pub expected_active: f64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials < 1 {
            return Err(Error::Parameter("trials must be >= 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Parameter("no methods selected".into()));
        }
        if self.psf.modes.is_empty() {
            return Err(Error::Parameter("no filter modes selected".into()));
        }
        for s in &self.sweeps {
            if s.grid.is_empty() {
                return Err(Error::Parameter(format!("empty grid for sweep axis {:?}", s.axis)));
            }
        }
        let grid = self.gamma_grid();
        if grid.is_empty() || grid.iter().any(|g| !(*g > 0.0) || !g.is_finite()) {
            return Err(Error::Parameter("gamma grid must be nonempty with finite values > 0".into()));
        }
        self.scenario.validate()?;
        self.dl.validate()?;
        self.solver.validate()?;
        Ok(())
    }

    pub fn gamma_grid(&self) -> Vec<f64> {
        self.sweeps
            .iter()
            .rev()
            .find(|s| s.axis == SweepAxis::Gamma)
            .map(|s| s.grid.clone())
            .unwrap_or_else(|| self.psf.gamma_grid.clone())
    }

    /// Coordinates of every non-gamma sweep point, first axis slowest.
    pub fn sweep_points(&self) -> Vec<Vec<(SweepAxis, f64)>> {
        let mut points = vec![Vec::new()];
        for s in self.sweeps.iter().filter(|s| s.axis != SweepAxis::Gamma) {
            points = points
                .into_iter()
                .flat_map(|p| {
                    s.grid.iter().map(move |&v| {
                        let mut q = p.clone();
                        q.push((s.axis, v));
                        q
                    })
                })
                .collect();
        }
        points
    }

    /// Scenario and solver settings at a sweep point.
    pub fn resolve(&self, coords: &[(SweepAxis, f64)]) -> Result<(ScenarioConfig, SolverParams)> {
        let mut scenario = self.scenario.clone();
        let mut solver = self.solver.clone();
        for &(axis, v) in coords {
            match axis {
                SweepAxis::Snr => scenario.snr_db = v,
                SweepAxis::Sparsity => scenario.hmm = with_expected_active(&scenario.hmm, scenario.n_sources, v)?,
                _ => {}
            }
        }
        if self.rule_of_thumb {
            if !scenario.noiseless {
                solver.lambda = noise_variance(scenario.snr_db);
            }
            let n = scenario.n_sources;
            let mean_q = (0..n).map(|i| scenario.hmm.for_source(i).q).sum::<f64>() / n as f64;
            if mean_q > 0.0 {
                solver.mu = 0.1 / mean_q;
            }
            solver.omp_stop = OmpStop::expected_active(scenario.hmm.expected_active(n));
        }
        for &(axis, v) in coords {
            match axis {
                SweepAxis::Lambda => solver.lambda = v,
                SweepAxis::Mu => solver.mu = v,
                _ => {}
            }
        }
        scenario.validate()?;
        solver.validate()?;
        Ok((scenario, solver))
    }

    /// SHA-256 of the canonical JSON form, output location excluded.
    pub fn hash(&self) -> Result<String> {
        let canonical = ExperimentConfig {
            out_dir: None,
            ..self.clone()
        };
        Ok(io::sha256_hex(serde_json::to_string(&canonical)?.as_bytes()))
    }
}

/// Chain parameters with `p` chosen so that `Σ_n p_n/(p_n+q_n) = active`,
/// keeping every `q_n`.
pub fn with_expected_active(hmm: &SourceHmm, n_sources: usize, active: f64) -> Result<SourceHmm> {
    if !(active > 0.0 && active < n_sources as f64) {
        return Err(Error::Parameter(format!(
            "expected active count {active} outside (0, {n_sources})"
        )));
    }
    let frac = active / n_sources as f64;
    let set = |h: HmmParams| HmmParams::new(frac * h.q / (1.0 - frac), h.q);
    Ok(match hmm {
        SourceHmm::Shared(h) => SourceHmm::Shared(set(*h)?),
        SourceHmm::PerSource(v) => SourceHmm::PerSource(v.iter().map(|h| set(*h)).collect::<Result<_>>()?),
    })
}

pub fn trial_seed(base: u64, trial: usize, point: usize) -> u64 {
    derive_seed(base, &[trial as u64, point as u64])
}

fn method_stream(m: Method) -> u64 {
    Method::ALL.iter().position(|x| *x == m).unwrap_or(0) as u64
}

/// Per-threshold result of one trial.
#[derive(Clone, Debug)]
struct Cell {
    counts: DetectionCounts,
    evm: EvmReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub point: usize,
    pub trial: usize,
    pub method: Method,
    pub source: usize,
    pub gamma: f64,
    pub p_true: f64,
    pub q_true: f64,
    /// Empirical flip rates of the quantized states against the truth.
    pub p_flip_true: f64,
    pub q_flip_true: f64,
    pub p_hat: f64,
    pub q_hat: f64,
    pub p_flip_hat: f64,
    pub q_flip_hat: f64,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub point: usize,
    pub trial: usize,
    pub method: Method,
    pub iter: usize,
    pub fit: f64,
}

#[derive(Clone, Debug)]
struct TrialResult {
    /// `cells[method][mode][gamma]`.
    cells: Vec<Vec<Vec<Cell>>>,
    traces: Vec<TraceRecord>,
    params: Vec<ParamRecord>,
}

/// Empirical `Pr(s̃=1 | s=0)` and `Pr(s̃=0 | s=1)` for one source.
fn empirical_flips(truth: &[u8], observed: &[u8]) -> (f64, f64) {
    let (mut n0, mut n1, mut f01, mut f10) = (0u64, 0u64, 0u64, 0u64);
    for (&s, &o) in truth.iter().zip(observed) {
        if s == 0 {
            n0 += 1;
            f01 += o as u64;
        } else {
            n1 += 1;
            f10 += (o == 0) as u64;
        }
    }
    let rate = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    (rate(f01, n0), rate(f10, n1))
}

fn quantize_block(x: &CMatrix, gamma: f64) -> Result<ActivationMatrix> {
    let rows = (0..x.nrows())
        .map(|i| quantize_states(&x.row(i).iter().cloned().collect::<Vec<_>>(), gamma))
        .collect::<Result<Vec<_>>>()?;
    ActivationMatrix::from_rows(rows)
}

fn run_trial(
    cfg: &ExperimentConfig,
    scenario: &ScenarioConfig,
    solver: &SolverParams,
    gammas: &[f64],
    point: usize,
    trial: usize,
) -> Result<TrialResult> {
    let seed = trial_seed(cfg.seed, trial, point);
    let sc = generate(&ScenarioConfig {
        seed,
        ..scenario.clone()
    })?;
    let n = scenario.n_sources;
    let true_hmm: Vec<HmmParams> = (0..n).map(|i| scenario.hmm.for_source(i)).collect();
    let x_true = &sc.signals.values;
    let s_true = &sc.activation;
    let mut result = TrialResult {
        cells: Vec::new(),
        traces: Vec::new(),
        params: Vec::new(),
    };
    for &method in &cfg.methods {
        let dl_cfg = DlConfig {
            solver: method,
            ..cfg.dl.clone()
        };
        let dl = run_dl(
            &sc.observations.values,
            &dl_cfg,
            solver,
            n,
            derive_seed(seed, &[STREAM_DL, method_stream(method)]),
        )
        .context_with(|| format!("{method} dictionary learning"))?;
        result.traces.extend(dl.objective_trace.iter().enumerate().map(|(iter, &fit)| TraceRecord {
            point,
            trial,
            method,
            iter,
            fit,
        }));
        let x = align_sources(x_true, &dl.signal)?.apply(&dl.signal);
        let mut per_mode = Vec::with_capacity(cfg.psf.modes.len());
        for &mode in &cfg.psf.modes {
            let mut per_gamma = Vec::with_capacity(gammas.len());
            for &gamma in gammas {
                let (states, x_hat) = match mode {
                    FilterMode::Raw => (quantize_block(&x, gamma)?, x.clone()),
                    FilterMode::Known | FilterMode::Em => {
                        let psf_mode = match mode {
                            FilterMode::Known => PsfMode::Known {
                                hmm: true_hmm.clone(),
                                bac: cfg.psf.known_bac,
                            },
                            _ => PsfMode::Unknown { em: cfg.psf.em },
                        };
                        let out = psf_pipeline(&x, &QuantizerConfig { gamma }, &psf_mode)
                            .context_with(|| format!("{method} {} filter at gamma {gamma}", mode.name()))?;
                        if mode == FilterMode::Em && gamma == cfg.psf.operating_gamma {
                            for (source, fitted) in out.params.iter().enumerate() {
                                let (pf, qf) = empirical_flips(s_true.row(source), out.quantized.row(source));
                                result.params.push(ParamRecord {
                                    point,
                                    trial,
                                    method,
                                    source,
                                    gamma,
                                    p_true: true_hmm[source].p,
                                    q_true: true_hmm[source].q,
                                    p_flip_true: pf,
                                    q_flip_true: qf,
                                    p_hat: fitted.hmm.p,
                                    q_hat: fitted.hmm.q,
                                    p_flip_hat: fitted.bac.p_flip,
                                    q_flip_hat: fitted.bac.q_flip,
                                    converged: fitted.converged,
                                });
                            }
                        }
                        (out.states, out.signal)
                    }
                };
                per_gamma.push(Cell {
                    counts: detection_counts(s_true, &states)?,
                    evm: evm(x_true, &x_hat, s_true, &states)?,
                });
            }
            per_mode.push(per_gamma);
        }
        result.cells.push(per_mode);
    }
    Ok(result)
}

/// Mean and standard error over trials of a per-trial statistic, next to the
/// value computed from counts pooled over trials.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub pooled: Option<f64>,
    pub mean: Option<f64>,
    pub se: Option<f64>,
    pub n: usize,
}

impl Stat {
    fn from_samples(pooled: Option<f64>, samples: &[f64]) -> Stat {
        let n = samples.len();
        let mean = (n > 0).then(|| samples.iter().sum::<f64>() / n as f64);
        let se = mean.filter(|_| n > 1).map(|m| {
            let var = samples.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        });
        Stat { pooled, mean, se, n }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaRow {
    pub gamma: f64,
    pub pfa: Option<f64>,
    pub pd: Option<f64>,
    pub pfa_trials: Stat,
    pub pd_trials: Stat,
    pub evm: Option<f64>,
    pub counts: DetectionCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvmOperatingPoint {
    pub gamma: f64,
    pub pd: f64,
    pub pfa: f64,
    pub evm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub point: usize,
    pub method: Method,
    pub mode: FilterMode,
    pub rows: Vec<GammaRow>,
    pub roc: RocCurve,
    /// `pd` at each of [`PFA_TARGETS`].
    pub pd_at: Vec<(f64, Stat)>,
    pub evm_at_floor: Option<EvmOperatingPoint>,
}

impl CurveSummary {
    pub fn pd_at_target(&self, target: f64) -> Option<Stat> {
        self.pd_at.iter().find(|(t, _)| *t == target).map(|(_, s)| *s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialFailure {
    pub point: usize,
    pub trial: usize,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialSeed {
    pub point: usize,
    pub trial: usize,
    pub seed: u64,
}

/// Aggregated outcome of a run, also written as `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub name: String,
    pub config_hash: String,
    pub points: Vec<PointInfo>,
    pub curves: Vec<CurveSummary>,
    pub seeds: Vec<TrialSeed>,
    pub failures: Vec<TrialFailure>,
    pub completed_trials: usize,
}

impl ExperimentSummary {
    pub fn curve(&self, point: usize, method: Method, mode: FilterMode) -> Option<&CurveSummary> {
        self.curves
            .iter()
            .find(|c| c.point == point && c.method == method && c.mode == mode)
    }
}

/// In-memory result of [`run_experiment`].
#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub summary: ExperimentSummary,
    pub traces: Vec<TraceRecord>,
    pub params: Vec<ParamRecord>,
}

/// Runs every (sweep point, trial) pair on a pool of `workers` threads.
/// A failing trial is logged and skipped; the run fails only if every
/// trial fails.
pub fn run_experiment(cfg: &ExperimentConfig, workers: usize) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let gammas = cfg.gamma_grid();
    let coords = cfg.sweep_points();
    let mut points = Vec::with_capacity(coords.len());
    let mut resolved = Vec::with_capacity(coords.len());
    for (index, c) in coords.iter().enumerate() {
        let (scenario, solver) = cfg.resolve(c).context_with(|| format!("sweep point {index}"))?;
        points.push(PointInfo {
            index,
            coords: c.clone(),
            snr_db: scenario.snr_db,
            lambda: solver.lambda,
            mu: solver.mu,
            expected_active: scenario.hmm.expected_active(scenario.n_sources),
        });
        resolved.push((scenario, solver));
    }
    let jobs: Vec<(usize, usize)> = (0..points.len())
        .flat_map(|p| (0..cfg.trials).map(move |t| (p, t)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Parameter(format!("thread pool: {e}")))?;
    let results: Vec<Result<TrialResult>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(p, t)| {
                let (scenario, solver) = &resolved[p];
                let started = Instant::now();
                let r = run_trial(cfg, scenario, solver, &gammas, p, t)
                    .context_with(|| format!("sweep point {p}, trial {t}"));
                match &r {
                    Ok(_) => log::info!("point {p} trial {t} done in {:.1}s", started.elapsed().as_secs_f64()),
                    Err(e) => log::error!("{e}"),
                }
                r
            })
            .collect()
    });

    let seeds = jobs
        .iter()
        .map(|&(point, trial)| TrialSeed {
            point,
            trial,
            seed: trial_seed(cfg.seed, trial, point),
        })
        .collect();
    let mut failures = Vec::new();
    let mut ok: Vec<(usize, TrialResult)> = Vec::new();
    for (&(point, trial), r) in jobs.iter().zip(results) {
        match r {
            Ok(tr) => ok.push((point, tr)),
            Err(e) => failures.push(TrialFailure {
                point,
                trial,
                error: e.to_string(),
            }),
        }
    }
    if ok.is_empty() {
        return Err(Error::Parameter(format!(
            "all {} trials failed; first error: {}",
            jobs.len(),
            failures.first().map(|f| f.error.as_str()).unwrap_or("none")
        )));
    }

    let mut curves = Vec::new();
    for p in 0..points.len() {
        let trials: Vec<&TrialResult> = ok.iter().filter(|(q, _)| *q == p).map(|(_, t)| t).collect();
        if trials.is_empty() {
            continue;
        }
        for (mi, &method) in cfg.methods.iter().enumerate() {
            for (ki, &mode) in cfg.psf.modes.iter().enumerate() {
                let cells = |gi: usize| trials.iter().map(move |t| &t.cells[mi][ki][gi]);
                curves.push(summarize_curve(p, method, mode, &gammas, cells, cfg.psf.evm_pd_floor)?);
            }
        }
    }
    let completed_trials = ok.len();
    let mut traces = Vec::new();
    let mut params = Vec::new();
    for (_, t) in ok {
        traces.extend(t.traces);
        params.extend(t.params);
    }
    Ok(ExperimentOutcome {
        summary: ExperimentSummary {
            name: cfg.name.clone(),
            config_hash: cfg.hash()?,
            points,
            curves,
            seeds,
            failures,
            completed_trials,
        },
        traces,
        params,
    })
}

fn summarize_curve<'a, I>(
    point: usize,
    method: Method,
    mode: FilterMode,
    gammas: &[f64],
    cells: impl Fn(usize) -> I,
    pd_floor: f64,
) -> Result<CurveSummary>
where
    I: Iterator<Item = &'a Cell>,
{
    let mut rows = Vec::with_capacity(gammas.len());
    // Per-trial grids, for per-trial ROC readings.
    let mut per_trial: Vec<Vec<(f64, DetectionCounts)>> = Vec::new();
    for (gi, &gamma) in gammas.iter().enumerate() {
        let mut pooled = DetectionCounts::default();
        let mut evms = Vec::new();
        let (mut pds, mut pfas) = (Vec::new(), Vec::new());
        for (ti, c) in cells(gi).enumerate() {
            pooled += c.counts;
            evms.push(c.evm.clone());
            let r = c.counts.report();
            pds.extend(r.pd);
            pfas.extend(r.pfa);
            if per_trial.len() <= ti {
                per_trial.push(Vec::new());
            }
            per_trial[ti].push((gamma, c.counts));
        }
        let r = pooled.report();
        rows.push(GammaRow {
            gamma,
            pfa: r.pfa,
            pd: r.pd,
            pfa_trials: Stat::from_samples(r.pfa, &pfas),
            pd_trials: Stat::from_samples(r.pd, &pds),
            evm: EvmReport::pooled(&evms).evm_percent,
            counts: pooled,
        });
    }
    let roc = roc_curve(&rows.iter().map(|r| (r.gamma, r.counts)).collect::<Vec<_>>())?;
    let mut pd_at = Vec::new();
    for target in PFA_TARGETS {
        let samples: Vec<f64> = per_trial
            .iter()
            .filter_map(|g| roc_curve(g).ok().and_then(|c| c.pd_at(target)))
            .collect();
        pd_at.push((target, Stat::from_samples(roc.pd_at(target), &samples)));
    }
    let evm_at_floor = rows
        .iter()
        .filter(|r| r.pd.is_some_and(|pd| pd >= pd_floor))
        .max_by(|a, b| a.gamma.total_cmp(&b.gamma))
        .map(|r| EvmOperatingPoint {
            gamma: r.gamma,
            pd: r.pd.unwrap_or(0.0),
            pfa: r.pfa.unwrap_or(0.0),
            evm: r.evm,
        });
    Ok(CurveSummary {
        point,
        method,
        mode,
        rows,
        roc,
        pd_at,
        evm_at_floor,
    })
}

/// One line of `roc.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocRow {
    pub point: usize,
    pub snr_db: f64,
    pub lambda: f64,
    pub mu: f64,
    pub expected_active: f64,
    pub method: Method,
    pub mode: FilterMode,
    pub gamma: f64,
    pub pfa: Option<f64>,
    pub pd: Option<f64>,
    pub pfa_mean: Option<f64>,
    pub pd_mean: Option<f64>,
    pub pfa_se: Option<f64>,
    pub pd_se: Option<f64>,
    pub evm: Option<f64>,
    pub trial_count: usize,
}

pub fn roc_rows(summary: &ExperimentSummary) -> Vec<RocRow> {
    let mut out = Vec::new();
    for c in &summary.curves {
        let p = &summary.points[c.point];
        for r in &c.rows {
            out.push(RocRow {
                point: c.point,
                snr_db: p.snr_db,
                lambda: p.lambda,
                mu: p.mu,
                expected_active: p.expected_active,
                method: c.method,
                mode: c.mode,
                gamma: r.gamma,
                pfa: r.pfa,
                pd: r.pd,
                pfa_mean: r.pfa_trials.mean,
                pd_mean: r.pd_trials.mean,
                pfa_se: r.pfa_trials.se,
                pd_se: r.pd_trials.se,
                evm: r.evm,
                trial_count: r.pd_trials.n,
            });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub kind: String,
    pub name: String,
    pub config_hash: String,
    pub tool_version: String,
    pub seeds: Vec<TrialSeed>,
    pub wall_clock_s: f64,
    pub files: Vec<FileEntry>,
}

pub const MANIFEST: &str = "manifest.json";

/// `<parent>/<kind>-<first 12 hex digits of the config hash>-s<seed>`.
pub fn run_dir(parent: &Path, kind: &str, cfg: &ExperimentConfig) -> Result<PathBuf> {
    Ok(parent.join(format!("{kind}-{}-s{}", &cfg.hash()?[..12], cfg.seed)))
}

fn write_manifest(dir: &Path, mut manifest: RunManifest, files: &[String]) -> Result<()> {
    manifest.files = files
        .iter()
        .map(|name| {
            Ok(FileEntry {
                name: name.clone(),
                sha256: io::sha256_file(&dir.join(name))?,
            })
        })
        .collect::<Result<_>>()?;
    io::write_json(&dir.join(MANIFEST), &manifest)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::from(e).context(dir.display().to_string()))
}

/// Writes `Y`, `H`, `X` and `S` of every trial and sweep point under a
/// fresh run directory in `out`, and returns that directory.
pub fn cmd_generate(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let started = Instant::now();
    let dir = run_dir(out, "scenario", cfg)?;
    create_dir(&dir)?;
    io::write_json(&dir.join("config.json"), cfg)?;
    let mut files = vec!["config.json".to_string()];
    let mut seeds = Vec::new();
    for (p, coords) in cfg.sweep_points().iter().enumerate() {
        let (scenario, _) = cfg.resolve(coords)?;
        for t in 0..cfg.trials {
            let seed = trial_seed(cfg.seed, t, p);
            seeds.push(TrialSeed {
                point: p,
                trial: t,
                seed,
            });
            let sc = generate(&ScenarioConfig {
                seed,
                ..scenario.clone()
            })?;
            let sub = format!("p{p:02}-t{t:03}");
            create_dir(&dir.join(&sub))?;
            let entries = [
                ("Y.csv", &sc.observations.values),
                ("H.csv", &sc.channel.values),
                ("X.csv", &sc.signals.values),
            ];
            for (name, m) in entries {
                io::write_complex_csv(&dir.join(&sub).join(name), m)?;
                files.push(format!("{sub}/{name}"));
            }
            io::write_states_csv(&dir.join(&sub).join("S.csv"), &sc.activation)?;
            files.push(format!("{sub}/S.csv"));
        }
    }
    let manifest = RunManifest {
        kind: "scenario".into(),
        name: cfg.name.clone(),
        config_hash: cfg.hash()?,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        seeds,
        wall_clock_s: started.elapsed().as_secs_f64(),
        files: Vec::new(),
    };
    write_manifest(&dir, manifest, &files)?;
    Ok(dir)
}

/// Runs the experiment and writes its results under a fresh run directory
/// in `out`, which is returned with the in-memory outcome.
pub fn cmd_run(cfg: &ExperimentConfig, out: &Path, workers: usize) -> Result<(PathBuf, ExperimentOutcome)> {
    let started = Instant::now();
    let outcome = run_experiment(cfg, workers)?;
    let dir = run_dir(out, "run", cfg)?;
    create_dir(&dir)?;
    io::write_json(&dir.join("config.json"), cfg)?;
    io::write_records(&dir.join("roc.csv"), &roc_rows(&outcome.summary))?;
    io::write_json(&dir.join("summary.json"), &outcome.summary)?;
    io::write_records(&dir.join("dl_trace.csv"), &outcome.traces)?;
    let mut files: Vec<String> = ["config.json", "roc.csv", "summary.json", "dl_trace.csv"]
        .map(String::from)
        .to_vec();
    if !outcome.params.is_empty() {
        io::write_records(&dir.join("params.csv"), &outcome.params)?;
        files.push("params.csv".into());
    }
    let manifest = RunManifest {
        kind: "run".into(),
        name: cfg.name.clone(),
        config_hash: outcome.summary.config_hash.clone(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        seeds: outcome.summary.seeds.clone(),
        wall_clock_s: started.elapsed().as_secs_f64(),
        files: Vec::new(),
    };
    write_manifest(&dir, manifest, &files)?;
    Ok((dir, outcome))
}

/// Run directories at or directly below `dir`.
pub fn find_runs(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join(MANIFEST).is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut runs = Vec::new();
    if dir.is_dir() {
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.join(MANIFEST).is_file() {
                runs.push(path);
            }
        }
    }
    runs.sort();
    if runs.is_empty() {
        return Err(Error::Format(format!("no runs found in {}", dir.display())));
    }
    Ok(runs)
}

/// Checks every file listed in the manifest against its digest.
pub fn verify_run(dir: &Path) -> Result<RunManifest> {
    let manifest: RunManifest = io::read_json(&dir.join(MANIFEST))?;
    for f in &manifest.files {
        let path = dir.join(&f.name);
        if !path.is_file() {
            return Err(Error::Format(format!("{} is listed in the manifest but missing", f.name)));
        }
        let got = io::sha256_file(&path)?;
        if got != f.sha256 {
            return Err(Error::Format(format!(
                "checksum mismatch for {}: manifest {}, file {}",
                f.name, f.sha256, got
            )));
        }
    }
    Ok(manifest)
}

fn fmt_stat(s: &Stat) -> String {
    match (s.pooled, s.mean, s.se) {
        (Some(p), Some(m), Some(se)) => format!("{p:.3} (trial mean {m:.3} ± {se:.3})"),
        (Some(p), Some(m), None) => format!("{p:.3} (trial mean {m:.3})"),
        (Some(p), None, _) => format!("{p:.3}"),
        _ => "n/a".into(),
    }
}

fn describe_point(p: &PointInfo) -> String {
    format!(
        "snr {} dB, lambda {:.3e}, mu {:.3}, active {:.2}",
        p.snr_db, p.lambda, p.mu, p.expected_active
    )
}

/// Human-readable digest of every verified run under `dir`.
pub fn cmd_report(dir: &Path) -> Result<String> {
    let mut out = String::new();
    for run in find_runs(dir)? {
        let manifest = verify_run(&run)?;
        let _ = writeln!(
            out,
            "== {} ({}, config {}, {} files verified, {:.1}s)",
            run.display(),
            manifest.kind,
            &manifest.config_hash[..12],
            manifest.files.len(),
            manifest.wall_clock_s
        );
        if manifest.kind != "run" {
            let _ = writeln!(out, "   {} scenario draws", manifest.seeds.len());
            continue;
        }
        let summary: ExperimentSummary = io::read_json(&run.join("summary.json"))?;
        let _ = writeln!(
            out,
            "   {}: {} trials completed, {} failed",
            summary.name,
            summary.completed_trials,
            summary.failures.len()
        );
        for p in &summary.points {
            let _ = writeln!(out, "   point {}: {}", p.index, describe_point(p));
            let mut by_method: BTreeMap<String, Vec<&CurveSummary>> = BTreeMap::new();
            for c in summary.curves.iter().filter(|c| c.point == p.index) {
                by_method.entry(c.method.to_string()).or_default().push(c);
            }
            for (method, curves) in by_method {
                for c in &curves {
                    let _ = write!(out, "     {method:8} {:6}", c.mode.name());
                    for (target, stat) in &c.pd_at {
                        let _ = write!(out, "  pd@pfa={target}: {}", fmt_stat(stat));
                    }
                    match &c.evm_at_floor {
                        Some(e) => {
                            let evm = e.evm.map(|v| format!("{v:.2}%")).unwrap_or("n/a".into());
                            let _ = writeln!(out, "  EVM {evm} at gamma {} (pd {:.3})", e.gamma, e.pd);
                        }
                        None => {
                            let _ = writeln!(out, "  EVM n/a (pd floor not reached)");
                        }
                    }
                }
                let raw = curves.iter().find(|c| c.mode == FilterMode::Raw);
                for c in curves.iter().filter(|c| c.mode != FilterMode::Raw) {
                    let gain = raw
                        .and_then(|r| r.pd_at_target(PFA_TARGETS[0])?.pooled)
                        .zip(c.pd_at_target(PFA_TARGETS[0]).and_then(|s| s.pooled));
                    if let Some((a, b)) = gain {
                        let _ = writeln!(
                            out,
                            "     {method:8} PSF ({}) pd gain at pfa={}: {a:.3} -> {b:.3}",
                            c.mode.name(),
                            PFA_TARGETS[0]
                        );
                    }
                }
            }
        }
        let params_path = run.join("params.csv");
        if params_path.is_file() {
            let params: Vec<ParamRecord> = io::read_records(&params_path)?;
            let k = params.len() as f64;
            let mean = |f: &dyn Fn(&ParamRecord) -> f64| params.iter().map(f).sum::<f64>() / k;
            let _ = writeln!(
                out,
                "   EM mean absolute error over {} fits: p {:.4}, q {:.4}, p' {:.4}, q' {:.4}",
                params.len(),
                mean(&|r| (r.p_hat - r.p_true).abs()),
                mean(&|r| (r.q_hat - r.q_true).abs()),
                mean(&|r| (r.p_flip_hat - r.p_flip_true).abs()),
                mean(&|r| (r.q_flip_hat - r.q_flip_true).abs()),
            );
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            name: "tiny".into(),
            scenario: ScenarioConfig {
                n_sources: 4,
                n_sensors: 3,
                horizon: 60,
                hmm: SourceHmm::Shared(HmmParams { p: 0.05, q: 0.1 }),
                ..ScenarioConfig::default()
            },
            dl: DlConfig {
                outer_iters: 3,
                ..DlConfig::default()
            },
            methods: vec![Method::Omp, Method::Lasso],
            psf: PsfSettings {
                gamma_grid: vec![0.2, 0.5, 1.0],
                modes: vec![FilterMode::Raw, FilterMode::Known, FilterMode::Em],
                ..PsfSettings::default()
            },
            trials: 2,
            seed: 5,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn presets_exist_and_validate() {
        for f in FIGURES {
            let cfg = preset(f).unwrap();
            cfg.validate().unwrap();
            assert_eq!(cfg.trials, 50);
            assert_eq!(cfg.name, f);
        }
        assert!(preset("fig3").is_err());
        assert_eq!(preset("fig4").unwrap().scenario.dist, SignalDistribution::UnitGaussian);
        assert_eq!(preset("fig8").unwrap().scenario.dist, SignalDistribution::Bpsk);
    }

    #[test]
    fn rule_of_thumb_at_default_point() {
        let cfg = preset("fig4").unwrap();
        let (sc, sp) = cfg.resolve(&[]).unwrap();
        assert_eq!(sc.snr_db, 30.0);
        assert!((sp.lambda - 1e-3).abs() < 1e-15);
        assert!((sp.mu - 5.0).abs() < 1e-12);
        assert_eq!(sp.omp_stop, OmpStop::Sparsity(3));
    }

    #[test]
    fn explicit_axes_override_the_rule() {
        let cfg = preset("fig5").unwrap();
        let points = cfg.sweep_points();
        assert_eq!(points.len(), 21);
        let (sc, sp) = cfg.resolve(&points[1]).unwrap();
        assert_eq!(sc.snr_db, 10.0);
        assert_eq!(sp.lambda, 3e-4);
    }

    #[test]
    fn sparsity_axis_sets_expected_active_count() {
        let hmm = SourceHmm::Shared(HmmParams { p: 0.0022, q: 0.02 });
        for a in [1.5, 3.0, 6.0] {
            let h = with_expected_active(&hmm, 30, a).unwrap();
            assert!((h.expected_active(30) - a).abs() < 1e-12);
            assert_eq!(h.for_source(0).q, 0.02);
        }
        assert!(with_expected_active(&hmm, 30, 30.0).is_err());
        assert!(with_expected_active(&hmm, 30, 0.0).is_err());
    }

    #[test]
    fn gamma_axis_replaces_the_grid() {
        let mut cfg = tiny();
        cfg.sweeps = vec![
            Sweep {
                axis: SweepAxis::Gamma,
                grid: vec![0.3],
            },
            Sweep {
                axis: SweepAxis::Mu,
                grid: vec![1.0, 2.0],
            },
        ];
        assert_eq!(cfg.gamma_grid(), vec![0.3]);
        assert_eq!(cfg.sweep_points().len(), 2);
    }

    #[test]
    fn hash_ignores_output_location() {
        let a = tiny();
        let b = ExperimentConfig {
            out_dir: Some("/elsewhere".into()),
            ..tiny()
        };
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        let c = ExperimentConfig { seed: 6, ..tiny() };
        assert_ne!(a.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn tiny_experiment_is_deterministic_across_worker_counts() {
        let cfg = tiny();
        let a = run_experiment(&cfg, 1).unwrap();
        let b = run_experiment(&cfg, 3).unwrap();
        assert_eq!(a.summary, b.summary);
        assert_eq!(a.summary.completed_trials, 2);
        assert_eq!(a.summary.curves.len(), 2 * 3);
        assert_eq!(a.params.len(), 2 * 2 * 4);
        for c in &a.summary.curves {
            assert_eq!(c.rows.len(), 3);
            assert!(c.roc.hull.windows(2).all(|w| w[0].pd <= w[1].pd));
            let total = c.rows[0].counts.true_active + c.rows[0].counts.true_inactive;
            assert_eq!(total, 2 * 4 * 60);
        }
    }

    #[test]
    fn empirical_flip_rates() {
        let (pf, qf) = empirical_flips(&[0, 0, 0, 0, 1, 1], &[1, 0, 0, 0, 0, 1]);
        assert!((pf - 0.25).abs() < 1e-15);
        assert!((qf - 0.5).abs() < 1e-15);
        assert_eq!(empirical_flips(&[0, 0], &[0, 0]), (0.0, 0.0));
    }

    #[test]
    fn stat_mean_and_standard_error() {
        let s = Stat::from_samples(Some(0.5), &[1.0, 2.0, 3.0]);
        assert_eq!(s.mean, Some(2.0));
        assert!((s.se.unwrap() - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(Stat::from_samples(None, &[4.0]).se, None);
    }
}
