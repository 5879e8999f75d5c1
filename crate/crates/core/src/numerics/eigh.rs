//! Symmetric eigendecomposition by cyclic Jacobi rotations.

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

const MAX_SWEEPS: usize = 100;

/// Eigenvalues in ascending order and matching orthonormal eigenvectors (as columns).
#[derive(Clone, Debug)]
pub struct SymmetricEigen<T> {
    pub eigenvalues: Tensor<T>,
    pub eigenvectors: Tensor<T>,
}

/// Decomposes a symmetric matrix as `m = V·diag(w)·Vᵀ`.
///
/// Eigenvalues are ascending. Each eigenvector is signed so that its
/// largest-magnitude entry is positive (lowest index wins ties).
pub fn eigh_symmetric<T: Scalar>(m: &Tensor<T>) -> Result<SymmetricEigen<T>> {
    let shape = m.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::contract(format!(
            "eigh needs a square matrix, got {shape:?}"
        )));
    }
    let n = shape[0];
    if !m.all_finite() {
        return Err(Error::contract("eigh input contains non-finite values"));
    }
    let sym_tol = T::lit(1e-10).max(T::epsilon() * T::lit(64.0));
    for i in 0..n {
        for j in (i + 1)..n {
            if (m.get(&[i, j]) - m.get(&[j, i])).abs() > sym_tol {
                return Err(Error::contract(format!(
                    "eigh input is not symmetric at ({i},{j})"
                )));
            }
        }
    }

    let mut a: Vec<T> = m.data().to_vec();
    // symmetrize exactly so rotations stay consistent
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = (a[i * n + j] + a[j * n + i]) * T::lit(0.5);
            a[i * n + j] = avg;
            a[j * n + i] = avg;
        }
    }
    let mut v: Vec<T> = Tensor::<T>::eye(n).into_data();

    let scale = a.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt();
    let eps = T::epsilon();
    for _sweep in 0..MAX_SWEEPS {
        let mut off = T::zero();
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        if off.sqrt() <= eps * scale * T::lit(0.01) || off == T::zero() {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == T::zero() {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                // A <- Jᵀ A J
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                a[p * n + q] = T::zero();
                a[q * n + p] = T::zero();
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a[i * n + i]
            .partial_cmp(&a[j * n + j])
            .expect("finite eigenvalues")
            .then(i.cmp(&j))
    });

    let eigenvalues = Tensor::new(vec![n], order.iter().map(|&i| a[i * n + i]).collect())?;
    let mut vecs = Tensor::zeros(&[n, n]);
    for (col, &src) in order.iter().enumerate() {
        let mut best = 0;
        for r in 1..n {
            if v[r * n + src].abs() > v[best * n + src].abs() {
                best = r;
            }
        }
        let sign = if v[best * n + src] < T::zero() {
            -T::one()
        } else {
            T::one()
        };
        for r in 0..n {
            vecs.set(&[r, col], sign * v[r * n + src]);
        }
    }
    Ok(SymmetricEigen {
        eigenvalues,
        eigenvectors: vecs,
    })
}
