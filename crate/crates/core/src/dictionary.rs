//! Alternating estimation of the channel `H` and the signal block `X`.
//!
//! Each outer iteration runs a sparse signal step for the current channel,
//! then a channel step (MOD, MDU or enhanced MDU), then renormalizes the
//! channel columns. Scores are `‖Y − HX‖²_F`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::ResultExt;
use crate::linalg::{frobenius_sq, gram, random_complex_matrix, random_unit_vector, tikhonov_shift};
use crate::sparse::{solve_block, Method, SolverParams};
use crate::{rng_from_seed, CMatrix, CVector, Error, Result, C64};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelUpdate {
    Mod,
    Mdu,
    #[default]
    EnhancedMdu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DlConfig {
    pub solver: Method,
    pub channel_update: ChannelUpdate,
    pub outer_iters: usize,
    /// Inner alternations `J` of MDU.
    pub mdu_inner_iters: usize,
    pub rel_obj_tol: f64,
    /// Magnitude above which a coefficient counts as part of the MDU support.
    pub support_gamma: f64,
}

impl Default for DlConfig {
    fn default() -> Self {
        DlConfig {
            solver: Method::SlAdmm,
            channel_update: ChannelUpdate::default(),
            outer_iters: 50,
            mdu_inner_iters: 5,
            rel_obj_tol: 1e-4,
            support_gamma: 0.5,
        }
    }
}

impl DlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.outer_iters < 1 {
            return Err(Error::Parameter("outer_iters must be >= 1".into()));
        }
        if self.mdu_inner_iters < 1 {
            return Err(Error::Parameter("mdu_inner_iters must be >= 1".into()));
        }
        if !(self.rel_obj_tol >= 0.0) {
            return Err(Error::Parameter("rel_obj_tol must be >= 0".into()));
        }
        if !(self.support_gamma >= 0.0) || !self.support_gamma.is_finite() {
            return Err(Error::Parameter("support_gamma must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DlResult {
    /// Unit-column channel estimate.
    pub channel: CMatrix,
    /// Output of the sparse solver for the final channel.
    pub signal: CMatrix,
    /// `‖Y − HX‖²_F` after each outer iteration.
    pub objective_trace: Vec<f64>,
    /// `‖Y − HX‖²_F` for the returned pair.
    pub final_fit: f64,
    pub outer_iters: usize,
    /// Inner sparse solves that hit their iteration cap, over the whole run.
    pub unconverged: usize,
}

/// Per-column index sets of the coefficients kept by MDU.
pub type SupportPattern = Vec<Vec<usize>>;

pub fn support_pattern(x: &CMatrix, gamma: f64) -> SupportPattern {
    (0..x.ncols())
        .map(|t| (0..x.nrows()).filter(|&i| x[(i, t)].norm() > gamma).collect())
        .collect()
}

/// Like [`support_pattern`], keeping at most `max_len` of the largest
/// coefficients per column (sorted by index).
pub fn capped_support_pattern(x: &CMatrix, gamma: f64, max_len: usize) -> SupportPattern {
    let mut pattern = support_pattern(x, gamma);
    for (t, s) in pattern.iter_mut().enumerate() {
        if s.len() > max_len {
            s.sort_by(|&a, &b| x[(b, t)].norm().total_cmp(&x[(a, t)].norm()).then(a.cmp(&b)));
            s.truncate(max_len);
            s.sort_unstable();
        }
    }
    pattern
}

fn check_shapes(y: &CMatrix, h: Option<&CMatrix>, x: Option<&CMatrix>) -> Result<()> {
    if let Some(x) = x {
        if x.ncols() != y.ncols() {
            return Err(Error::Dimension(format!(
                "signal has {} columns, observations {}",
                x.ncols(),
                y.ncols()
            )));
        }
        if let Some(h) = h {
            if h.ncols() != x.nrows() {
                return Err(Error::Dimension(format!(
                    "channel has {} columns, signal {} rows",
                    h.ncols(),
                    x.nrows()
                )));
            }
        }
    }
    if let Some(h) = h {
        if h.nrows() != y.nrows() {
            return Err(Error::Dimension(format!(
                "channel has {} rows, observations {}",
                h.nrows(),
                y.nrows()
            )));
        }
    }
    Ok(())
}

/// Cholesky solve of `G Z = B`, falling back to `G + εI` when `G` is
/// singular or badly conditioned.
fn regularized_solve(g: &CMatrix, b: &CMatrix) -> CMatrix {
    if let Some(chol) = g.clone().cholesky() {
        let l = chol.l_dirty();
        let diag: Vec<f64> = (0..l.nrows()).map(|i| l[(i, i)].re).collect();
        let (lo, hi) = diag
            .iter()
            .fold((f64::INFINITY, 0.0_f64), |(lo, hi), &d| (lo.min(d), hi.max(d)));
        if lo > 0.0 && (lo / hi).powi(2) > 1e-12 {
            return chol.solve(b);
        }
    }
    let shift = tikhonov_shift(g).max(1e-12);
    let mut a = g.clone();
    for i in 0..a.nrows() {
        a[(i, i)] += C64::from(shift);
    }
    a.cholesky()
        .expect("shifted Gram matrix is positive definite")
        .solve(b)
}

/// `H = Y Xᴴ (X Xᴴ)⁻¹`.
pub fn mod_update(y: &CMatrix, x: &CMatrix) -> Result<CMatrix> {
    check_shapes(y, None, Some(x))?;
    let xxh = x * x.adjoint();
    let yxh = y * x.adjoint();
    // Solve (XXᴴ) Hᴴ = (YXᴴ)ᴴ, XXᴴ being Hermitian.
    Ok(regularized_solve(&xxh, &yxh.adjoint()).adjoint())
}

/// `J` alternations of support-restricted least squares for `X` and MOD
/// for `H`, starting from `H_init`.
pub fn mdu_refine(y: &CMatrix, h_init: &CMatrix, support: &SupportPattern, j_iters: usize) -> Result<(CMatrix, CMatrix)> {
    check_shapes(y, Some(h_init), None)?;
    if support.len() != y.ncols() {
        return Err(Error::Dimension(format!(
            "support pattern for {} columns, observations have {}",
            support.len(),
            y.ncols()
        )));
    }
    let n = h_init.ncols();
    if let Some(bad) = support.iter().flatten().find(|&&i| i >= n) {
        return Err(Error::Dimension(format!("support index {bad} for {n} atoms")));
    }
    if j_iters < 1 {
        return Err(Error::Parameter("MDU needs at least one iteration".into()));
    }
    let mut h = h_init.clone();
    let mut x = CMatrix::zeros(n, y.ncols());
    for _ in 0..j_iters {
        x = restricted_least_squares(y, &h, support)?;
        h = mod_update(y, &x)?;
    }
    Ok((h, x))
}

fn restricted_least_squares(y: &CMatrix, h: &CMatrix, support: &SupportPattern) -> Result<CMatrix> {
    let g = gram(h);
    let b = h.adjoint() * y;
    let mut x = CMatrix::zeros(h.ncols(), y.ncols());
    for (t, s) in support.iter().enumerate() {
        if s.is_empty() {
            continue;
        }
        let k = s.len();
        let gs = CMatrix::from_fn(k, k, |a, c| g[(s[a], s[c])]);
        let bs = CVector::from_fn(k, |a, _| b[(s[a], t)]);
        let coef = gs
            .cholesky()
            .ok_or_else(|| Error::Singular(format!("restricted Gram matrix of column {t} on support {s:?}")))?
            .solve(&bs);
        for (a, &i) in s.iter().enumerate() {
            x[(i, t)] = coef[a];
        }
    }
    Ok(x)
}

/// `Y_k = Y + H_k X_k − H_k X_next`.
pub fn enhanced_target(y: &CMatrix, h_k: &CMatrix, x_k: &CMatrix, x_next: &CMatrix) -> Result<CMatrix> {
    check_shapes(y, Some(h_k), Some(x_k))?;
    check_shapes(y, Some(h_k), Some(x_next))?;
    if x_k == x_next {
        return Ok(y.clone());
    }
    Ok(y + h_k * (x_k - x_next))
}

/// Scales every column to unit norm. Zero columns are replaced by random
/// unit vectors and get scale 0, so multiplying row `i` of `X` by
/// `scales[i]` keeps `HX` unchanged.
pub fn normalize_columns<R: Rng + ?Sized>(h: &CMatrix, rng: &mut R) -> (CMatrix, Vec<f64>) {
    let mut out = h.clone();
    let largest = h.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
    let mut scales = Vec::with_capacity(h.ncols());
    for j in 0..h.ncols() {
        let norm = h.column(j).norm();
        if norm == 0.0 || norm <= 1e-13 * largest {
            out.set_column(j, &random_unit_vector(h.nrows(), rng));
            scales.push(0.0);
        } else {
            out.set_column(j, &(h.column(j) / C64::from(norm)));
            scales.push(norm);
        }
    }
    (out, scales)
}

fn scale_rows(x: &mut CMatrix, scales: &[f64]) {
    for (i, &s) in scales.iter().enumerate() {
        if s != 1.0 {
            x.row_mut(i).scale_mut(s);
        }
    }
}

/// Alternating dictionary learning from a random unit-column channel.
pub fn run_dl(y: &CMatrix, cfg: &DlConfig, params: &SolverParams, n_sources: usize, seed: u64) -> Result<DlResult> {
    cfg.validate()?;
    params.validate()?;
    if n_sources < 1 || y.nrows() < 1 {
        return Err(Error::Parameter("dictionary learning needs N, M >= 1".into()));
    }
    let mut rng = rng_from_seed(seed);
    let init = random_complex_matrix(y.nrows(), n_sources, &mut rng);
    let (mut h, _) = normalize_columns(&init, &mut rng);
    let mut x: Option<CMatrix> = None;
    let mut x_sparse: Option<CMatrix> = None;
    let mut trace = Vec::with_capacity(cfg.outer_iters);
    let mut iters = 0;
    let mut unconverged = 0;

    for k in 0..cfg.outer_iters {
        // At most M/2 atoms per column keeps the restricted Gram matrices of
        // noisy iterates well conditioned.
        let support = |x: &CMatrix| capped_support_pattern(x, cfg.support_gamma, (y.nrows() / 2).max(1));
        let mut step = || -> Result<(CMatrix, CMatrix, CMatrix)> {
            let sol = solve_block(cfg.solver, &h, y, params, x.as_ref())?;
            unconverged += sol.unconverged;
            let x_next = sol.signal;
            // A singular restricted system (duplicate or vanished atoms) drops
            // that candidate; with none left the iteration falls back to MOD.
            let usable = |r: Result<(CMatrix, CMatrix)>| match r {
                Ok(v) => Ok(Some(v)),
                Err(Error::Singular(msg)) => {
                    log::debug!("MDU skipped: {msg}");
                    Ok(None)
                }
                Err(e) => Err(e),
            };
            let fit = |(h, x): &(CMatrix, CMatrix)| frobenius_sq(&(y - h * x));
            let candidates = match cfg.channel_update {
                ChannelUpdate::Mod => Vec::new(),
                ChannelUpdate::Mdu => vec![usable(mdu_refine(y, &h, &support(&x_next), cfg.mdu_inner_iters))?],
                ChannelUpdate::EnhancedMdu => {
                    // X_k is the previous signal-step output, not the refined X.
                    let x_k = x_sparse.as_ref().unwrap_or(&x_next);
                    let pattern = support(&x_next);
                    let target = enhanced_target(y, &h, x_k, &x_next)?;
                    // The substituted target extrapolates along the residual and
                    // can run away; keep it only when it fits Y at least as
                    // well as plain MDU.
                    vec![
                        usable(mdu_refine(&target, &h, &pattern, cfg.mdu_inner_iters))?,
                        usable(mdu_refine(y, &h, &pattern, cfg.mdu_inner_iters))?,
                    ]
                }
            };
            let best = candidates
                .into_iter()
                .flatten()
                .map(|c| (fit(&c), c))
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .map(|(_, c)| c);
            let (h_new, x_new) = match best {
                Some(c) => c,
                None => (mod_update(y, &x_next)?, x_next.clone()),
            };
            Ok((h_new, x_new, x_next))
        };
        let (h_new, mut x_new, x_next) = step().context_with(|| format!("outer iteration {k}"))?;
        x_sparse = Some(x_next);
        let (h_norm, scales) = normalize_columns(&h_new, &mut rng);
        scale_rows(&mut x_new, &scales);
        let obj = frobenius_sq(&(y - &h_norm * &x_new));
        h = h_norm;
        x = Some(x_new);
        iters = k + 1;
        let prev = trace.last().copied();
        trace.push(obj);
        if let Some(prev) = prev {
            if (prev - obj).abs() <= cfg.rel_obj_tol * prev.max(f64::MIN_POSITIVE) {
                break;
            }
        }
    }

    let last = solve_block(cfg.solver, &h, y, params, x.as_ref()).context_with(|| "final signal step".to_string())?;
    if unconverged + last.unconverged > 0 {
        log::debug!("{} inner solves hit the iteration cap", unconverged + last.unconverged);
    }
    Ok(DlResult {
        final_fit: frobenius_sq(&(y - &h * &last.signal)),
        channel: h,
        signal: last.signal,
        objective_trace: trace,
        outer_iters: iters,
        unconverged: unconverged + last.unconverged,
    })
}
