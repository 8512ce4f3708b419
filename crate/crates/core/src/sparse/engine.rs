//! Solver for the ℓ1-regularized quadratic shared by every sparse step:
//!
//! ```text
//! minimize  ½ xᴴ (G + κI) x − Re(bᴴx) + λ‖x‖₁
//! ```
//!
//! With `G = HᴴH`, `κ = 0` and `b = Hᴴy` this is the LASSO column problem up
//! to the constant `½‖y‖²`. Proximity terms `c‖x − a‖²` contribute `2c` to
//! `κ` and `2c·a` to `b`; linear terms `Re(βᴴx)` contribute `−β` to `b`.

use serde::{Deserialize, Serialize};

use nalgebra::{DMatrix, DVector};

use crate::{CMatrix, CVector, Error, Result, C64};

/// Proximal operator of `tau·|·|` on a complex scalar.
pub fn soft_threshold(v: C64, tau: f64) -> C64 {
    let mag = v.norm();
    if mag <= tau || mag == 0.0 {
        C64::new(0.0, 0.0)
    } else {
        v * ((mag - tau) / mag)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InnerMethod {
    /// Iterative soft-thresholding with fixed step `1/L`.
    ProximalGradient,
    /// Cyclic exact coordinate minimization.
    #[default]
    CoordinateDescent,
}

#[derive(Clone, Debug)]
pub struct InnerSolution {
    pub x: CVector,
    pub iters: usize,
    pub kkt_residual: f64,
    /// Objective after each iteration (sweep for coordinate descent),
    /// without the data constant.
    pub objective_trace: Vec<f64>,
}

/// One ℓ1-regularized quadratic, borrowed Gram matrix plus its shift.
pub(crate) struct QuadL1<'a> {
    pub gram: &'a CMatrix,
    /// Largest eigenvalue of `gram`.
    pub gram_lmax: f64,
    pub kappa: f64,
    pub lambda: f64,
}

pub(crate) struct InnerOptions {
    pub tol: f64,
    pub max_iters: usize,
    pub method: InnerMethod,
    pub record_trace: bool,
}

impl QuadL1<'_> {
    fn n(&self) -> usize {
        self.gram.nrows()
    }

    /// `(G + κI) x`.
    fn apply(&self, x: &CVector) -> CVector {
        let mut q = self.gram * x;
        if self.kappa != 0.0 {
            q.axpy(C64::from(self.kappa), x, C64::from(1.0));
        }
        q
    }

    #[cfg(test)]
    pub fn objective(&self, b: &CVector, x: &CVector) -> f64 {
        let q = self.apply(x);
        self.objective_with(b, x, &q)
    }

    fn objective_with(&self, b: &CVector, x: &CVector, q: &CVector) -> f64 {
        let quad = 0.5 * x.dotc(q).re;
        let lin = b.dotc(x).re;
        let l1: f64 = x.iter().map(|z| z.norm()).sum();
        quad - lin + self.lambda * l1
    }

    /// Largest violation of the optimality conditions, given `g = b − (G+κI)x`.
    pub fn kkt_residual(&self, x: &CVector, g: &CVector) -> f64 {
        x.iter()
            .zip(g.iter())
            .map(|(xj, gj)| {
                let mag = xj.norm();
                if mag == 0.0 {
                    (gj.norm() - self.lambda).max(0.0)
                } else {
                    (gj - xj * (self.lambda / mag)).norm()
                }
            })
            .fold(0.0, f64::max)
    }

    pub fn solve(&self, b: &CVector, x0: Option<&CVector>, opts: &InnerOptions) -> Result<InnerSolution> {
        let n = self.n();
        if b.len() != n {
            return Err(Error::Dimension(format!(
                "right-hand side of length {} for {n} unknowns",
                b.len()
            )));
        }
        let x = match x0 {
            Some(x0) if x0.len() == n => x0.clone(),
            Some(x0) => {
                return Err(Error::Dimension(format!(
                    "initial iterate of length {} for {n} unknowns",
                    x0.len()
                )))
            }
            None => CVector::zeros(n),
        };
        match opts.method {
            InnerMethod::ProximalGradient => self.proximal_gradient(b, x, opts),
            InnerMethod::CoordinateDescent => self.coordinate_descent(b, x, opts),
        }
    }

    /// Like [`solve`](Self::solve), but an exhausted iteration budget yields
    /// the last iterate together with `false`.
    pub fn solve_capped(&self, b: &CVector, x0: Option<&CVector>, opts: &InnerOptions) -> Result<(CVector, bool)> {
        match self.solve(b, x0, opts) {
            Ok(s) => Ok((s.x, true)),
            Err(Error::Convergence { last, .. }) => Ok((last, false)),
            Err(e) => Err(e),
        }
    }

    fn proximal_gradient(&self, b: &CVector, mut x: CVector, opts: &InnerOptions) -> Result<InnerSolution> {
        let lipschitz = self.gram_lmax + self.kappa;
        let mut trace = Vec::new();
        if lipschitz <= 0.0 {
            // Zero Gram and no shift: the minimizer is x = 0 unless b is
            // unbounded against λ, which the KKT check below reports.
            x.fill(C64::new(0.0, 0.0));
        }
        let step = if lipschitz > 0.0 { 1.0 / lipschitz } else { 0.0 };
        let mut iters = 0;
        loop {
            let q = self.apply(&x);
            let g = b - &q;
            let kkt = self.kkt_residual(&x, &g);
            if opts.record_trace {
                trace.push(self.objective_with(b, &x, &q));
            }
            if kkt <= opts.tol {
                return Ok(InnerSolution {
                    x,
                    iters,
                    kkt_residual: kkt,
                    objective_trace: trace,
                });
            }
            if iters >= opts.max_iters || step == 0.0 {
                return Err(Error::Convergence {
                    iters,
                    residual: kkt,
                    last: x,
                });
            }
            let tau = self.lambda * step;
            for (xj, gj) in x.iter_mut().zip(g.iter()) {
                *xj = soft_threshold(*xj + gj * step, tau);
            }
            iters += 1;
        }
    }

    fn coordinate_descent(&self, b: &CVector, mut x: CVector, opts: &InnerOptions) -> Result<InnerSolution> {
        let n = self.n();
        let mut q = self.apply(&x);
        let mut trace = Vec::new();
        let mut iters = 0;
        let mut stable_sweeps = 0;
        loop {
            let g = b - &q;
            let kkt = self.kkt_residual(&x, &g);
            if opts.record_trace {
                trace.push(self.objective_with(b, &x, &q));
            }
            if kkt <= opts.tol {
                return Ok(InnerSolution {
                    x,
                    iters,
                    kkt_residual: kkt,
                    objective_trace: trace,
                });
            }
            if iters >= opts.max_iters {
                return Err(Error::Convergence {
                    iters,
                    residual: kkt,
                    last: x,
                });
            }
            if stable_sweeps >= POLISH_AFTER {
                stable_sweeps = 0;
                self.newton_polish(b, &mut x, &mut q, 0.1 * opts.tol);
                iters += 1;
                continue;
            }
            let mut support_changed = false;
            for j in 0..n {
                let ajj = self.gram[(j, j)].re + self.kappa;
                if ajj <= 0.0 {
                    continue;
                }
                // Partial residual excluding coordinate j.
                let r = b[j] - q[j] + x[j] * ajj;
                let new = soft_threshold(r, self.lambda) / ajj;
                let zero = C64::new(0.0, 0.0);
                support_changed |= (new == zero) != (x[j] == zero);
                let delta = new - x[j];
                if delta != C64::new(0.0, 0.0) {
                    x[j] = new;
                    let col = self.gram.column(j);
                    for (qi, gij) in q.iter_mut().zip(col.iter()) {
                        *qi += gij * delta;
                    }
                    q[j] += delta * self.kappa;
                }
            }
            stable_sweeps = if support_changed { 0 } else { stable_sweeps + 1 };
            iters += 1;
        }
    }

    /// Damped Newton on the smooth problem restricted to the current
    /// support. Each accepted step lowers the full objective, so this can be
    /// interleaved with coordinate sweeps; once the support is right it
    /// converges quadratically where the sweeps crawl.
    fn newton_polish(&self, b: &CVector, x: &mut CVector, q: &mut CVector, tol: f64) {
        let support: Vec<usize> = (0..x.len()).filter(|&j| x[j] != C64::new(0.0, 0.0)).collect();
        let k = support.len();
        if k == 0 {
            return;
        }
        let mut f = self.objective_with(b, x, q);
        for _ in 0..NEWTON_STEPS {
            // Real coordinates (re, im) per support entry.
            let mut grad = DVector::<f64>::zeros(2 * k);
            let mut hess = DMatrix::<f64>::zeros(2 * k, 2 * k);
            for (a, &i) in support.iter().enumerate() {
                let z = x[i];
                let mag = z.norm();
                let g = q[i] - b[i] + z * (self.lambda / mag);
                grad[2 * a] = g.re;
                grad[2 * a + 1] = g.im;
                for (c, &j) in support.iter().enumerate() {
                    let mut gij = self.gram[(i, j)];
                    if i == j {
                        gij += C64::from(self.kappa);
                    }
                    hess[(2 * a, 2 * c)] = gij.re;
                    hess[(2 * a, 2 * c + 1)] = -gij.im;
                    hess[(2 * a + 1, 2 * c)] = gij.im;
                    hess[(2 * a + 1, 2 * c + 1)] = gij.re;
                }
                let (ur, ui) = (z.re / mag, z.im / mag);
                let w = self.lambda / mag;
                hess[(2 * a, 2 * a)] += w * (1.0 - ur * ur);
                hess[(2 * a, 2 * a + 1)] -= w * ur * ui;
                hess[(2 * a + 1, 2 * a)] -= w * ur * ui;
                hess[(2 * a + 1, 2 * a + 1)] += w * (1.0 - ui * ui);
            }
            if grad.amax() <= tol {
                return;
            }
            let Some(chol) = hess.cholesky() else { return };
            let step = chol.solve(&grad);
            let slope = -grad.dot(&step);
            let mut t = 1.0;
            let mut accepted = false;
            while t > 1e-4 {
                let mut trial = x.clone();
                for (a, &i) in support.iter().enumerate() {
                    trial[i] -= C64::new(step[2 * a], step[2 * a + 1]) * t;
                }
                if support.iter().any(|&i| trial[i] == C64::new(0.0, 0.0)) {
                    t *= 0.5;
                    continue;
                }
                let tq = self.apply(&trial);
                let tf = self.objective_with(b, &trial, &tq);
                if tf <= f + 1e-4 * t * slope {
                    *x = trial;
                    *q = tq;
                    f = tf;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                return;
            }
        }
    }
}

/// Sweeps without a support change before trying Newton.
const POLISH_AFTER: usize = 3;
const NEWTON_STEPS: usize = 8;
