use super::{Matrix, Real};
use crate::error::{Error, Result};

pub const MAX_SWEEPS: usize = 100;

/// Thin singular value decomposition `m = U diag(sigma) V^T`.
#[derive(Debug, Clone)]
pub struct ThinSvd<T> {
    /// `rows x k`, orthonormal columns.
    pub u: Matrix<T>,
    /// Length `k = min(rows, cols)`, non-increasing, non-negative.
    pub sigma: Vec<T>,
    /// `cols x k`, orthonormal columns.
    pub v: Matrix<T>,
}

impl<T: Real> ThinSvd<T> {
    pub fn reconstruct(&self) -> Matrix<T> {
        self.u
            .scale_columns(&self.sigma)
            .matmul_nt(&self.v)
    }

    /// Number of singular values above the numerical noise floor.
    pub fn numerical_rank(&self) -> usize {
        let floor = rank_floor(&self.sigma, self.u.rows().max(self.v.rows()));
        self.sigma.iter().filter(|&&s| s > floor).count()
    }
}

pub(crate) fn rank_floor<T: Real>(sigma: &[T], max_dim: usize) -> T {
    let top = sigma.first().copied().unwrap_or_else(T::zero);
    top * T::of_usize(max_dim.max(1)) * T::epsilon() * T::of(16.0)
}

/// One-sided Jacobi (Hestenes) SVD.
///
/// Columns of the working copy are rotated pairwise until all pairs are
/// numerically orthogonal; their norms are the singular values.
pub fn thin_svd<T: Real>(m: &Matrix<T>) -> Result<ThinSvd<T>> {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Err(Error::Config(format!(
            "thin_svd needs a non-empty matrix, got {rows}x{cols}"
        )));
    }
    if let Some(index) = m.as_slice().iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            context: "thin_svd",
            index,
        });
    }
    if rows >= cols {
        jacobi_tall(m)
    } else {
        let t = jacobi_tall(&m.transpose())?;
        Ok(ThinSvd {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        })
    }
}

fn jacobi_tall<T: Real>(m: &Matrix<T>) -> Result<ThinSvd<T>> {
    let (rows, n) = m.shape();
    // Column-major working copies: column j of A lives at work[j*rows..(j+1)*rows].
    let mut work = m.transpose().into_vec();
    let mut vcols = Matrix::<T>::identity(n).into_vec();
    let tol = T::epsilon() * T::of_usize(rows).sqrt();

    let mut converged = false;
    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (cp, cq) = two_columns(&mut work, rows, p, q);
                let (mut alpha, mut beta, mut gamma) = (T::zero(), T::zero(), T::zero());
                for (&x, &y) in cp.iter().zip(cq.iter()) {
                    alpha = alpha + x * x;
                    beta = beta + y * y;
                    gamma = gamma + x * y;
                }
                if gamma == T::zero() || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::of(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                rotate(cp, cq, c, s);
                let (vp, vq) = two_columns(&mut vcols, n, p, q);
                rotate(vp, vq, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::SvdNoConvergence { sweeps: MAX_SWEEPS });
    }

    let norms: Vec<T> = (0..n)
        .map(|j| {
            work[j * rows..(j + 1) * rows]
                .iter()
                .fold(T::zero(), |acc, &x| acc + x * x)
                .sqrt()
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).expect("finite norms"));
    let sigma: Vec<T> = order.iter().map(|&j| norms[j]).collect();
    let floor = rank_floor(&sigma, rows);

    // Columns of U, built column-major then transposed into place.
    let mut ucols: Vec<Vec<T>> = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        let s = norms[j];
        if s > floor && s > T::zero() {
            ucols.push(work[j * rows..(j + 1) * rows].iter().map(|&x| x / s).collect());
        } else {
            ucols.push(vec![T::zero(); rows]);
            deficient.push(k);
        }
    }
    complete_orthonormal(&mut ucols, &deficient);

    let u = Matrix::from_fn(rows, n, |r, k| ucols[k][r]);
    let v = Matrix::from_fn(n, n, |r, k| vcols[order[k] * n + r]);
    Ok(ThinSvd { u, sigma, v })
}

fn two_columns<T>(data: &mut [T], len: usize, p: usize, q: usize) -> (&mut [T], &mut [T]) {
    debug_assert!(p < q);
    let (head, tail) = data.split_at_mut(q * len);
    (&mut head[p * len..(p + 1) * len], &mut tail[..len])
}

fn rotate<T: Real>(x: &mut [T], y: &mut [T], c: T, s: T) {
    for (a, b) in x.iter_mut().zip(y.iter_mut()) {
        let (xa, yb) = (*a, *b);
        *a = c * xa - s * yb;
        *b = s * xa + c * yb;
    }
}

/// Replaces the listed columns by unit vectors orthogonal to every other column.
fn complete_orthonormal<T: Real>(cols: &mut [Vec<T>], deficient: &[usize]) {
    if deficient.is_empty() {
        return;
    }
    let len = cols[0].len();
    let mut filled: Vec<bool> = (0..cols.len()).map(|k| !deficient.contains(&k)).collect();
    let mut candidate = 0;
    for &k in deficient {
        while candidate < len {
            let mut v = vec![T::zero(); len];
            v[candidate] = T::one();
            candidate += 1;
            // Two Gram-Schmidt passes.
            for _ in 0..2 {
                for (j, other) in cols.iter().enumerate() {
                    if !filled[j] {
                        continue;
                    }
                    let dot = v.iter().zip(other).fold(T::zero(), |a, (&x, &y)| a + x * y);
                    for (x, &y) in v.iter_mut().zip(other) {
                        *x = *x - dot * y;
                    }
                }
            }
            let norm = v.iter().fold(T::zero(), |a, &x| a + x * x).sqrt();
            if norm > T::of(0.5) {
                for x in v.iter_mut() {
                    *x = *x / norm;
                }
                cols[k] = v;
                filled[k] = true;
                break;
            }
        }
    }
}
