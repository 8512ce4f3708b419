use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{assemble, check_dims, Prepared, SparseSolution};
use crate::error::ResultExt;
use crate::{CMatrix, CVector, Error, Result, C64};

/// Stopping rule for orthogonal matching pursuit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OmpStop {
    /// Select exactly this many atoms (fewer if the residual vanishes).
    Sparsity(usize),
    /// Select atoms until `‖r‖₂ ≤ tol`.
    ResidualTol(f64),
}

impl OmpStop {
    /// Expected active count `round(N·p/(p+q))`, at least one atom.
    pub fn expected_active(expected: f64) -> Self {
        OmpStop::Sparsity((expected.round() as usize).max(1))
    }
}

pub fn omp_column(h: &CMatrix, y: &CVector, stop: OmpStop) -> Result<CVector> {
    if h.nrows() != y.len() {
        return Err(Error::Dimension(format!(
            "dictionary has {} rows but y has length {}",
            h.nrows(),
            y.len()
        )));
    }
    let prep = Prepared::new(h);
    let b = h.adjoint() * y;
    omp_prepared(&prep, &b, y.norm_squared(), stop)
}

pub(crate) fn omp_block(h: &CMatrix, y: &CMatrix, stop: OmpStop) -> Result<SparseSolution> {
    check_dims(h, y)?;
    let prep = Prepared::new(h);
    let b = prep.correlations(y);
    let cols: Vec<CVector> = (0..y.ncols())
        .into_par_iter()
        .map(|t| {
            omp_prepared(&prep, &b.column(t).into_owned(), y.column(t).norm_squared(), stop)
                .context_with(|| format!("column {t}"))
        })
        .collect::<Result<_>>()?;
    let signal = assemble(h.ncols(), cols);
    let fit = crate::linalg::frobenius_sq(&(y - h * &signal));
    Ok(SparseSolution {
        signal,
        objective_trace: vec![0.5 * fit],
        residual_trace: Vec::new(),
        unconverged: 0,
    })
}

/// Greedy selection working on the Gram matrix: correlations with the
/// residual are `b − G_{:,S} c` and `‖r‖² = ‖y‖² − Re(b_Sᴴ c)` for the
/// least-squares coefficients `c` on the support `S`.
fn omp_prepared(prep: &Prepared<'_>, b: &CVector, y_energy: f64, stop: OmpStop) -> Result<CVector> {
    let (m, n) = prep.h.shape();
    let max_atoms = match stop {
        OmpStop::Sparsity(k) => {
            if k > m.min(n) {
                return Err(Error::Parameter(format!(
                    "OMP sparsity {k} exceeds min(M, N) = {}",
                    m.min(n)
                )));
            }
            k
        }
        OmpStop::ResidualTol(tol) => {
            if !(tol >= 0.0) {
                return Err(Error::Parameter(format!("OMP residual tolerance {tol} < 0")));
            }
            m.min(n)
        }
    };
    let norms: Vec<f64> = (0..n).map(|j| prep.gram[(j, j)].re.sqrt()).collect();
    let mut support: Vec<usize> = Vec::new();
    let mut coef = CVector::zeros(0);
    let mut corr = b.clone();
    let mut residual_energy = y_energy;
    let tiny = 1e-24 * y_energy.max(f64::MIN_POSITIVE);

    loop {
        if let OmpStop::ResidualTol(tol) = stop {
            if residual_energy <= tol * tol {
                break;
            }
        }
        if support.len() >= max_atoms || residual_energy <= tiny {
            break;
        }
        let best = (0..n)
            .filter(|j| !support.contains(j) && norms[*j] > 0.0)
            .map(|j| (j, corr[j].norm() / norms[j]))
            .max_by(|a, b| a.1.total_cmp(&b.1));
        let Some((j, score)) = best else { break };
        if score * score <= tiny {
            break;
        }
        support.push(j);

        let k = support.len();
        let gs = CMatrix::from_fn(k, k, |a, c| prep.gram[(support[a], support[c])]);
        let bs = CVector::from_fn(k, |a, _| b[support[a]]);
        let chol = gs.cholesky().ok_or_else(|| {
            Error::Singular(format!("sub-dictionary on support {support:?} is rank deficient"))
        })?;
        coef = chol.solve(&bs);
        residual_energy = (y_energy - bs.dotc(&coef).re).max(0.0);
        for i in 0..n {
            let mut acc = b[i];
            for (a, &s) in support.iter().enumerate() {
                acc -= prep.gram[(i, s)] * coef[a];
            }
            corr[i] = acc;
        }
    }

    let mut x = CVector::from_element(n, C64::new(0.0, 0.0));
    for (a, &s) in support.iter().enumerate() {
        x[s] = coef[a];
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::random_complex_matrix;
    use crate::rng_from_seed;

    fn unit_columns(mut h: CMatrix) -> CMatrix {
        for mut c in h.column_iter_mut() {
            let n = c.norm();
            c /= C64::from(n);
        }
        h
    }

    #[test]
    fn single_atom_exact_recovery() {
        let mut rng = rng_from_seed(1);
        let h = unit_columns(random_complex_matrix(8, 12, &mut rng));
        let y = h.column(2) * C64::from(3.0);
        let x = omp_column(&h, &y, OmpStop::Sparsity(1)).unwrap();
        for j in 0..12 {
            let want = if j == 2 { C64::from(3.0) } else { C64::from(0.0) };
            assert!((x[j] - want).norm() < 1e-10);
        }
    }

    #[test]
    fn zero_observation_gives_zero() {
        let mut rng = rng_from_seed(2);
        let h = unit_columns(random_complex_matrix(8, 12, &mut rng));
        let x = omp_column(&h, &CVector::zeros(8), OmpStop::Sparsity(3)).unwrap();
        assert!(x.iter().all(|z| *z == C64::from(0.0)));
    }

    #[test]
    fn sparsity_bound_is_checked() {
        let h = CMatrix::identity(3, 5);
        assert!(matches!(
            omp_column(&h, &CVector::zeros(3), OmpStop::Sparsity(4)),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn residual_stop_and_support_size() {
        let mut rng = rng_from_seed(3);
        let h = unit_columns(random_complex_matrix(10, 15, &mut rng));
        let y = h.column(1) * C64::new(1.0, 1.0) + h.column(7) * C64::from(-2.0);
        let x = omp_column(&h, &y, OmpStop::ResidualTol(1e-8)).unwrap();
        assert!((&h * &x - &y).norm() <= 1e-8);
        let x = omp_column(&h, &y, OmpStop::Sparsity(1)).unwrap();
        assert_eq!(x.iter().filter(|z| z.norm() > 0.0).count(), 1);
    }

    #[test]
    fn residual_is_orthogonal_to_selected_atoms() {
        let mut rng = rng_from_seed(4);
        let h = unit_columns(random_complex_matrix(12, 20, &mut rng));
        let y = random_complex_matrix(12, 1, &mut rng).column(0).into_owned();
        let x = omp_column(&h, &y, OmpStop::Sparsity(4)).unwrap();
        let r = &y - &h * &x;
        let support: Vec<usize> = (0..20).filter(|&j| x[j].norm() > 0.0).collect();
        assert_eq!(support.len(), 4);
        for j in support {
            assert!(h.column(j).dotc(&r).norm() < 1e-10);
        }
    }
}
