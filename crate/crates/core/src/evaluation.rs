//! Scoring against ground truth: source alignment, detection rates, EVM,
//! ROC curves and parameter errors.

use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::psf::{BacParams, FittedParams};
use crate::scenario::{ActivationMatrix, HmmParams};
use crate::{CMatrix, Error, Result, C64};

/// Maps true source `i` to estimated row `perm[i]`, rotated by `phase[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    pub perm: Vec<usize>,
    pub phase: Vec<C64>,
}

impl Alignment {
    pub fn identity(n: usize) -> Self {
        Alignment {
            perm: (0..n).collect(),
            phase: vec![C64::new(1.0, 0.0); n],
        }
    }

    /// Rows of `x_est` reordered and phase-corrected to line up with the truth.
    pub fn apply(&self, x_est: &CMatrix) -> CMatrix {
        let mut out = CMatrix::zeros(self.perm.len(), x_est.ncols());
        for (i, (&j, &ph)) in self.perm.iter().zip(&self.phase).enumerate() {
            for t in 0..x_est.ncols() {
                out[(i, t)] = x_est[(j, t)] * ph;
            }
        }
        out
    }

    pub fn apply_states(&self, s_est: &ActivationMatrix) -> ActivationMatrix {
        s_est.permute_rows(&self.perm)
    }
}

fn same_shape(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!("{what}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1)));
    }
    Ok(())
}

/// Greedy matching on normalized `|⟨x_true_i, x_est_j⟩|`, largest first.
/// Rows with zero energy are matched last with unit phase.
pub fn align_sources(x_true: &CMatrix, x_est: &CMatrix) -> Result<Alignment> {
    same_shape(x_true.shape(), x_est.shape(), "alignment")?;
    let n = x_true.nrows();
    let norm_t: Vec<f64> = (0..n).map(|i| x_true.row(i).norm()).collect();
    let norm_e: Vec<f64> = (0..n).map(|j| x_est.row(j).norm()).collect();
    // inner[i][j] = Σ_t conj(x_est_j(t)) x_true_i(t)
    let inner: Vec<Vec<C64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    x_true
                        .row(i)
                        .iter()
                        .zip(x_est.row(j).iter())
                        .map(|(a, b)| b.conj() * a)
                        .sum()
                })
                .collect()
        })
        .collect();
    let mut candidates: Vec<(f64, usize, usize)> = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let denom = norm_t[i] * norm_e[j];
            let score = if denom > 0.0 { inner[i][j].norm() / denom } else { 0.0 };
            candidates.push((score, i, j));
        }
    }
    // Stable order: score descending, then indices ascending.
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut perm = vec![usize::MAX; n];
    let mut used = vec![false; n];
    for (_, i, j) in candidates {
        if perm[i] == usize::MAX && !used[j] {
            perm[i] = j;
            used[j] = true;
        }
    }
    let phase = (0..n)
        .map(|i| {
            let c = inner[i][perm[i]];
            if c.norm() > 0.0 {
                c / c.norm()
            } else {
                C64::new(1.0, 0.0)
            }
        })
        .collect();
    Ok(Alignment { perm, phase })
}

/// Raw cell counts; sums over trials pool the counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionCounts {
    pub true_active: u64,
    /// Active cells declared active.
    pub detected_active: u64,
    /// Inactive cells declared active.
    pub false_active: u64,
    pub true_inactive: u64,
}

impl AddAssign for DetectionCounts {
    fn add_assign(&mut self, o: Self) {
        self.true_active += o.true_active;
        self.detected_active += o.detected_active;
        self.false_active += o.false_active;
        self.true_inactive += o.true_inactive;
    }
}

impl DetectionCounts {
    pub fn report(&self) -> DetectionReport {
        let ratio = |a: u64, b: u64| (b > 0).then(|| a as f64 / b as f64);
        DetectionReport {
            pd: ratio(self.detected_active, self.true_active),
            pfa: ratio(self.false_active, self.true_inactive),
            counts: *self,
        }
    }
}

/// `None` marks an undefined rate (zero denominator).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub pd: Option<f64>,
    pub pfa: Option<f64>,
    pub counts: DetectionCounts,
}

pub fn detection_counts(s_true: &ActivationMatrix, s_hat: &ActivationMatrix) -> Result<DetectionCounts> {
    same_shape(
        (s_true.n_sources(), s_true.horizon()),
        (s_hat.n_sources(), s_hat.horizon()),
        "detection",
    )?;
    let mut c = DetectionCounts::default();
    for (rt, rh) in s_true.rows().zip(s_hat.rows()) {
        for (&a, &b) in rt.iter().zip(rh) {
            match (a, b) {
                (1, 1) => {
                    c.true_active += 1;
                    c.detected_active += 1;
                }
                (1, _) => c.true_active += 1,
                (_, 1) => {
                    c.true_inactive += 1;
                    c.false_active += 1;
                }
                _ => c.true_inactive += 1,
            }
        }
    }
    Ok(c)
}

pub fn detection_metrics(s_true: &ActivationMatrix, s_hat: &ActivationMatrix) -> Result<DetectionReport> {
    Ok(detection_counts(s_true, s_hat)?.report())
}

/// Error and reference energies over the correctly detected cells.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvmReport {
    /// `None` when no cell is correctly detected.
    pub evm_percent: Option<f64>,
    pub detected_set_sizes: Vec<usize>,
    pub error_energy: f64,
    pub signal_energy: f64,
}

impl EvmReport {
    /// Pools energies of several reports into one figure.
    pub fn pooled<'a>(reports: impl IntoIterator<Item = &'a EvmReport>) -> EvmReport {
        let mut out = EvmReport::default();
        for r in reports {
            out.error_energy += r.error_energy;
            out.signal_energy += r.signal_energy;
            if out.detected_set_sizes.len() < r.detected_set_sizes.len() {
                out.detected_set_sizes.resize(r.detected_set_sizes.len(), 0);
            }
            for (a, b) in out.detected_set_sizes.iter_mut().zip(&r.detected_set_sizes) {
                *a += b;
            }
        }
        out.evm_percent = evm_from_energies(out.error_energy, out.signal_energy, out.detected_set_sizes.iter().sum());
        out
    }
}

fn evm_from_energies(err: f64, sig: f64, cells: usize) -> Option<f64> {
    (cells > 0 && sig > 0.0).then(|| 100.0 * (err / sig).sqrt())
}

pub fn evm(x_true: &CMatrix, x_hat: &CMatrix, s_true: &ActivationMatrix, s_hat: &ActivationMatrix) -> Result<EvmReport> {
    same_shape(x_true.shape(), x_hat.shape(), "EVM signals")?;
    same_shape(x_true.shape(), (s_true.n_sources(), s_true.horizon()), "EVM truth states")?;
    same_shape(x_true.shape(), (s_hat.n_sources(), s_hat.horizon()), "EVM estimated states")?;
    let mut sizes = Vec::with_capacity(x_true.nrows());
    let (mut err, mut sig) = (0.0, 0.0);
    for n in 0..x_true.nrows() {
        let mut size = 0;
        for t in 0..x_true.ncols() {
            if s_true.get(n, t) == 1 && s_hat.get(n, t) == 1 {
                size += 1;
                err += (x_true[(n, t)] - x_hat[(n, t)]).norm_sqr();
                sig += x_true[(n, t)].norm_sqr();
            }
        }
        sizes.push(size);
    }
    Ok(EvmReport {
        evm_percent: evm_from_energies(err, sig, sizes.iter().sum()),
        detected_set_sizes: sizes,
        error_energy: err,
        signal_energy: sig,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub gamma: f64,
    pub pfa: f64,
    pub pd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// Sorted by `pfa`, then `pd`.
    pub points: Vec<RocPoint>,
    /// `points` between the anchors `(0, 0)` and `(1, 1)`, with `pd`
    /// replaced by its running maximum.
    pub hull: Vec<RocPoint>,
}

/// Builds a curve from pooled counts per threshold. Thresholds with an
/// undefined rate are dropped.
pub fn roc_curve(per_gamma: &[(f64, DetectionCounts)]) -> Result<RocCurve> {
    if per_gamma.is_empty() {
        return Err(Error::Parameter("empty threshold grid".into()));
    }
    let mut points: Vec<RocPoint> = per_gamma
        .iter()
        .filter_map(|(gamma, c)| {
            let r = c.report();
            Some(RocPoint {
                gamma: *gamma,
                pfa: r.pfa?,
                pd: r.pd?,
            })
        })
        .collect();
    points.sort_by(|a, b| a.pfa.total_cmp(&b.pfa).then(a.pd.total_cmp(&b.pd)));
    // The trivial detectors "nothing active" and "everything active" are
    // always available, so the hull spans the whole false-alarm axis.
    let anchor_low = RocPoint {
        gamma: f64::MAX,
        pfa: 0.0,
        pd: 0.0,
    };
    let anchor_high = RocPoint {
        gamma: 0.0,
        pfa: 1.0,
        pd: 1.0,
    };
    let mut best = f64::NEG_INFINITY;
    let hull = std::iter::once(anchor_low)
        .chain(points.iter().copied())
        .chain(std::iter::once(anchor_high))
        .map(|p| {
            best = best.max(p.pd);
            RocPoint { pd: best, ..p }
        })
        .collect();
    Ok(RocCurve { points, hull })
}

impl RocCurve {
    /// `pd` at `target` false-alarm rate by linear interpolation on the hull;
    /// `None` outside the covered range.
    pub fn pd_at(&self, target: f64) -> Option<f64> {
        let h = &self.hull;
        let first = h.first()?;
        let last = h.last()?;
        if target < first.pfa || target > last.pfa {
            return None;
        }
        // Last point at or below the target, first point above it.
        let hi = h.partition_point(|p| p.pfa <= target);
        let lo = h[hi - 1];
        if lo.pfa == target || hi == h.len() {
            return Some(lo.pd);
        }
        let up = h[hi];
        let w = (target - lo.pfa) / (up.pfa - lo.pfa);
        Some(lo.pd + w * (up.pd - lo.pd))
    }
}

/// Absolute errors of fitted model parameters for one source.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamError {
    pub p: f64,
    pub q: f64,
    pub p_flip: f64,
    pub q_flip: f64,
}

impl ParamError {
    pub fn max(&self) -> f64 {
        self.p.max(self.q).max(self.p_flip).max(self.q_flip)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamErrorSummary {
    pub per_source: Vec<ParamError>,
    pub mean: ParamError,
    pub max: ParamError,
}

pub fn param_error(truth: &(HmmParams, BacParams), fitted: &FittedParams) -> ParamError {
    ParamError {
        p: (fitted.hmm.p - truth.0.p).abs(),
        q: (fitted.hmm.q - truth.0.q).abs(),
        p_flip: (fitted.bac.p_flip - truth.1.p_flip).abs(),
        q_flip: (fitted.bac.q_flip - truth.1.q_flip).abs(),
    }
}

pub fn param_error_summary(truth: &[(HmmParams, BacParams)], fitted: &[FittedParams]) -> Result<ParamErrorSummary> {
    if truth.len() != fitted.len() || truth.is_empty() {
        return Err(Error::Dimension(format!(
            "{} true parameter sets vs {} fitted",
            truth.len(),
            fitted.len()
        )));
    }
    let per_source: Vec<ParamError> = truth.iter().zip(fitted).map(|(t, f)| param_error(t, f)).collect();
    let k = per_source.len() as f64;
    let fold = |f: &dyn Fn(&ParamError) -> f64| -> (f64, f64) {
        let vals = per_source.iter().map(f);
        let sum: f64 = vals.clone().sum();
        (sum / k, vals.fold(0.0, f64::max))
    };
    let (mp, xp) = fold(&|e| e.p);
    let (mq, xq) = fold(&|e| e.q);
    let (mpf, xpf) = fold(&|e| e.p_flip);
    let (mqf, xqf) = fold(&|e| e.q_flip);
    Ok(ParamErrorSummary {
        per_source,
        mean: ParamError {
            p: mp,
            q: mq,
            p_flip: mpf,
            q_flip: mqf,
        },
        max: ParamError {
            p: xp,
            q: xq,
            p_flip: xpf,
            q_flip: xqf,
        },
    })
}
