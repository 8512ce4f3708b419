//! Smooth LASSO by ADMM over a copy of the signal.
//!
//! The coupling `μ‖x(t) − x(t−1)‖²` is rewritten as `μ‖x(t) − x′(t−1)‖²`
//! with the constraint `x′(t) = x(t)`, `t = 1..T−1`. Each iteration solves
//! the `T` column problems in parallel for fixed copies, updates every copy
//! in closed form, then takes a multiplier step
//! `α(t) ← α(t) + ρ(x(t) − x′(t))`.

use rayon::prelude::*;

use super::{assemble, check_dims, lasso_columns, smooth_lasso_objective, Prepared, SolverParams, SparseSolution};
use crate::error::ResultExt;
use crate::{CMatrix, CVector, Error, Result, C64};

/// Lagrange multipliers, one length-`N` column per copy constraint.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiplierSet {
    pub alphas: CMatrix,
}

impl MultiplierSet {
    pub fn ones(n_sources: usize, horizon: usize) -> Self {
        MultiplierSet {
            alphas: CMatrix::from_element(n_sources, horizon.saturating_sub(1), C64::new(1.0, 0.0)),
        }
    }

    pub fn zeros(n_sources: usize, horizon: usize) -> Self {
        MultiplierSet {
            alphas: CMatrix::zeros(n_sources, horizon.saturating_sub(1)),
        }
    }
}

pub fn smooth_lasso_admm(
    h: &CMatrix,
    y: &CMatrix,
    params: &SolverParams,
    init_multipliers: MultiplierSet,
) -> Result<SparseSolution> {
    smooth_lasso_admm_warm(h, y, params, init_multipliers, None)
}

pub(crate) fn smooth_lasso_admm_warm(
    h: &CMatrix,
    y: &CMatrix,
    params: &SolverParams,
    init_multipliers: MultiplierSet,
    warm: Option<&CMatrix>,
) -> Result<SparseSolution> {
    check_dims(h, y)?;
    params.validate()?;
    let (n, horizon) = (h.ncols(), y.ncols());
    let mut alpha = init_multipliers.alphas;
    if alpha.nrows() != n || alpha.ncols() != horizon.saturating_sub(1) {
        return Err(Error::Dimension(format!(
            "multipliers are {}x{}, expected {}x{}",
            alpha.nrows(),
            alpha.ncols(),
            n,
            horizon.saturating_sub(1)
        )));
    }
    let prep = Prepared::new(h);
    let mut unconverged = 0;
    let mut x = match warm {
        Some(w) => w.clone(),
        None => {
            let (x, missed) = lasso_columns(&prep, y, params, None).context_with(|| "initial pass".to_string())?;
            unconverged += missed;
            x
        }
    };
    if horizon <= 1 {
        // No coupling constraints: plain LASSO.
        let (x, missed) = lasso_columns(&prep, y, params, Some(&x))?;
        let obj = smooth_lasso_objective(h, &x, y, params.lambda, params.mu)?;
        return Ok(SparseSolution {
            signal: x,
            objective_trace: vec![obj],
            residual_trace: vec![0.0],
            unconverged: unconverged + missed,
        });
    }

    let (mu, rho) = (params.mu, params.rho);
    let b_data = prep.correlations(y);
    let first = prep.problem(rho, params.lambda);
    let middle = prep.problem(2.0 * mu + rho, params.lambda);
    let last = prep.problem(2.0 * mu, params.lambda);
    let opts = params.inner_options(false);

    let mut copy = x.columns(0, horizon - 1).into_owned();
    let mut objective_trace = Vec::with_capacity(params.admm_iters);
    let mut residual_trace = Vec::with_capacity(params.admm_iters);

    for iter in 0..params.admm_iters {
        let cols: Vec<(CVector, bool)> = (0..horizon)
            .into_par_iter()
            .map(|t| {
                let mut b = b_data.column(t).into_owned();
                if t >= 1 {
                    b.axpy(C64::from(2.0 * mu), &copy.column(t - 1), C64::from(1.0));
                }
                if t + 1 < horizon {
                    b.axpy(C64::from(rho), &copy.column(t), C64::from(1.0));
                    b -= alpha.column(t);
                }
                let problem = match t {
                    0 => &first,
                    t if t + 1 == horizon => &last,
                    _ => &middle,
                };
                problem
                    .solve_capped(&b, Some(&x.column(t).into_owned()), &opts)
                    .context_with(|| format!("ADMM iteration {iter}, column {t}"))
            })
            .collect::<Result<_>>()?;
        unconverged += cols.iter().filter(|c| !c.1).count();
        x = assemble(n, cols.into_iter().map(|c| c.0).collect());

        let denom = 2.0 * mu + rho;
        let mut worst: f64 = 0.0;
        for t in 0..horizon - 1 {
            let new_copy = if denom > 0.0 {
                (x.column(t + 1) * C64::from(2.0 * mu) + x.column(t) * C64::from(rho) + alpha.column(t))
                    / C64::from(denom)
            } else {
                x.column(t).into_owned()
            };
            copy.set_column(t, &new_copy);
            let gap = x.column(t) - &new_copy;
            worst = worst.max(gap.norm());
            let mut a = alpha.column_mut(t);
            a.axpy(C64::from(rho), &gap, C64::from(1.0));
        }
        residual_trace.push(worst);
        objective_trace.push(smooth_lasso_objective(h, &x, y, params.lambda, mu)?);
    }

    Ok(SparseSolution {
        signal: x,
        objective_trace,
        residual_trace,
        unconverged,
    })
}
