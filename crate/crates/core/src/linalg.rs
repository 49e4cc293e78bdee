//! Cholesky factorization and SPD solves.
//!
//! `solve_spd` backs the rank-one editors (it computes C⁻¹k for key/covariance
//! systems). Callers own the ridge retry policy: on a singularity error they
//! are expected to add λI and try again.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower-triangular Cholesky factor of an SPD matrix. Reusable across solves.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    l: Vec<f64>,
    n: usize,
}

impl CholeskyFactor {
    pub fn factor(a: &Tensor) -> Result<Self> {
        if a.rank() != 2 || a.rows() != a.cols() {
            return Err(Error::Dimension(
                format!("{:?}", a.shape()),
                "square matrix".into(),
            ));
        }
        let n = a.rows();
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut s = a.at(i, j);
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if s <= 0.0 {
                        return Err(Error::Singular(format!(
                            "pivot {s:.3e} at row {i} is not positive"
                        )));
                    }
                    l[i * n + j] = s.sqrt();
                } else {
                    l[i * n + j] = s / l[j * n + j];
                }
            }
        }
        Ok(CholeskyFactor { l, n })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Solves A x = b for one right-hand side.
    pub fn solve_vec(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.n {
            return Err(Error::Dimension(
                format!("[{}]", b.len()),
                format!("[{}]", self.n),
            ));
        }
        let n = self.n;
        // Forward: L y = b
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= self.l[i * n + k] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        // Backward: Lᵀ x = y
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= self.l[k * n + i] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        Ok(y)
    }

    /// Solves A X = B column by column. B is [n, m].
    pub fn solve_mat(&self, b: &Tensor) -> Result<Tensor> {
        if b.rank() != 2 || b.rows() != self.n {
            return Err(Error::Dimension(
                format!("{:?}", b.shape()),
                format!("[{}, m]", self.n),
            ));
        }
        let (n, m) = (self.n, b.cols());
        let mut out = Tensor::zeros(&[n, m]);
        let mut col = vec![0.0; n];
        for j in 0..m {
            for i in 0..n {
                col[i] = b.at(i, j);
            }
            let x = self.solve_vec(&col)?;
            for i in 0..n {
                out.set(i, j, x[i]);
            }
        }
        Ok(out)
    }
}

/// One-shot solve. `b` may be a vector [n] or a matrix [n, m].
pub fn solve_spd(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let f = CholeskyFactor::factor(a)?;
    match b.rank() {
        1 => Ok(Tensor::vector(f.solve_vec(b.data())?)),
        2 => f.solve_mat(b),
        r => Err(Error::Dimension(format!("rank-{r}"), "[n] or [n, m]".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;
    use crate::tensor::{matmul, matvec};

    #[test]
    fn identity_solve() {
        let a = Tensor::identity(3);
        let b = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let x = solve_spd(&a, &b).unwrap();
        assert_eq!(x.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn worked_two_by_two() {
        // Verified by substitution: A·[-0.5, 2.0] = [2, 5].
        let a = Tensor::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]);
        let b = Tensor::vector(vec![2.0, 5.0]);
        let x = solve_spd(&a, &b).unwrap();
        assert!((x.data()[0] + 0.5).abs() < 1e-12);
        assert!((x.data()[1] - 2.0).abs() < 1e-12);
        let back = matvec(&a, &x).unwrap();
        assert!((back.data()[0] - 2.0).abs() < 1e-12);
        assert!((back.data()[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn indefinite_matrix_is_singularity_error() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
        let b = Tensor::vector(vec![1.0, 1.0]);
        assert!(matches!(solve_spd(&a, &b), Err(Error::Singular(_))));
    }

    #[test]
    fn residual_bound_on_random_spd_systems() {
        let mut rng = CounterRng::seed(17);
        for trial in 0..20 {
            let n = 2 + rng.below(14);
            let g = Tensor::new(
                vec![n, n],
                (0..n * n).map(|_| rng.normal()).collect(),
            )
            .unwrap();
            // G Gᵀ + small ridge is SPD.
            let mut a = matmul(&g, &crate::tensor::transpose(&g)).unwrap();
            for i in 0..n {
                let v = a.at(i, i) + 0.1;
                a.set(i, i, v);
            }
            let b = Tensor::vector((0..n).map(|_| rng.normal()).collect());
            let x = solve_spd(&a, &b).unwrap();
            let back = matvec(&a, &x).unwrap();
            let b_inf = b.max_abs();
            let mut resid = 0.0_f64;
            for i in 0..n {
                resid = resid.max((back.data()[i] - b.data()[i]).abs());
            }
            assert!(
                resid / (b_inf + 1.0) < 1e-8,
                "trial {trial}: residual {resid:.3e}"
            );
        }
    }

    #[test]
    fn matrix_rhs_matches_per_column_solves() {
        let a = Tensor::from_rows(&[vec![4.0, 1.0], vec![1.0, 3.0]]);
        let b = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let x = solve_spd(&a, &b).unwrap();
        let f = CholeskyFactor::factor(&a).unwrap();
        let c0 = f.solve_vec(&[1.0, 0.0]).unwrap();
        let c1 = f.solve_vec(&[0.0, 1.0]).unwrap();
        assert_eq!(x.at(0, 0), c0[0]);
        assert_eq!(x.at(1, 0), c0[1]);
        assert_eq!(x.at(0, 1), c1[0]);
        assert_eq!(x.at(1, 1), c1[1]);
    }
}
