//! Factored tridiagonal systems (Thomas algorithm without pivoting).

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TridiagError {
    #[error("diagonal, sub- and super-diagonal lengths disagree")]
    Shape,
    #[error("zero or non-finite pivot at row {0}")]
    Singular(usize),
}

/// LU factors of `a_k x_{k-1} + b_k x_k + c_k x_{k+1} = d_k`.
#[derive(Debug, Clone)]
pub struct Tridiagonal {
    sub: Vec<f64>,
    pivots: Vec<f64>,
    sup_scaled: Vec<f64>,
}

impl Tridiagonal {
    /// `sub[0]` and `sup[n-1]` are ignored.
    pub fn factor(sub: &[f64], diag: &[f64], sup: &[f64]) -> Result<Self, TridiagError> {
        let n = diag.len();
        if sub.len() != n || sup.len() != n || n == 0 {
            return Err(TridiagError::Shape);
        }
        let mut pivots = vec![0.0; n];
        let mut sup_scaled = vec![0.0; n];
        for k in 0..n {
            let p = if k == 0 { diag[0] } else { diag[k] - sub[k] * sup_scaled[k - 1] };
            let scale = diag[k].abs() + sub[k].abs() + sup[k].abs();
            if !p.is_finite() || p.abs() <= 1e-14 * scale.max(f64::MIN_POSITIVE) {
                return Err(TridiagError::Singular(k));
            }
            pivots[k] = p;
            sup_scaled[k] = if k + 1 < n { sup[k] / p } else { 0.0 };
        }
        Ok(Tridiagonal { sub: sub.to_vec(), pivots, sup_scaled })
    }

    pub fn len(&self) -> usize {
        self.pivots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pivots.is_empty()
    }

    /// Solves in place: `rhs` becomes `x`.
    pub fn solve_in_place(&self, rhs: &mut [f64]) {
        let n = self.len();
        assert_eq!(rhs.len(), n, "right-hand side length");
        rhs[0] /= self.pivots[0];
        for k in 1..n {
            rhs[k] = (rhs[k] - self.sub[k] * rhs[k - 1]) / self.pivots[k];
        }
        for k in (0..n - 1).rev() {
            rhs[k] -= self.sup_scaled[k] * rhs[k + 1];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn singular_systems_are_reported() {
        assert!(matches!(Tridiagonal::factor(&[0.0, 1.0], &[1.0, 1.0], &[1.0, 0.0]), Err(TridiagError::Singular(1))));
        assert!(matches!(Tridiagonal::factor(&[0.0], &[1.0, 1.0], &[0.0]), Err(TridiagError::Shape)));
    }

    proptest! {
        #[test]
        fn solves_diagonally_dominant_systems(
            rows in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0), 1..40),
        ) {
            let n = rows.len();
            let sub: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let sup: Vec<f64> = rows.iter().map(|r| r.2).collect();
            let diag: Vec<f64> = rows.iter().map(|r| 2.5 + r.1).collect();
            let x: Vec<f64> = (0..n).map(|k| (k as f64 * 0.7).sin()).collect();
            let mut d = vec![0.0; n];
            for k in 0..n {
                d[k] = diag[k] * x[k];
                if k > 0 { d[k] += sub[k] * x[k - 1]; }
                if k + 1 < n { d[k] += sup[k] * x[k + 1]; }
            }
            let t = Tridiagonal::factor(&sub, &diag, &sup).unwrap();
            t.solve_in_place(&mut d);
            for k in 0..n {
                prop_assert!((d[k] - x[k]).abs() < 1e-12);
            }
        }
    }
}
