use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Matrix, Real};

pub fn standard_normal<T: Real, R: Rng + ?Sized>(rng: &mut R) -> T {
    let x: f64 = StandardNormal.sample(rng);
    T::of(x)
}

pub fn normal_matrix<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, std: T, rng: &mut R) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| standard_normal::<T, R>(rng) * std)
}

/// Random matrix with orthonormal rows or columns (whichever is shorter),
/// scaled by `gain`: Q from a Gram-Schmidt QR of a Gaussian matrix with the
/// signs of R's diagonal folded in.
pub fn orthogonal<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, gain: T, rng: &mut R) -> Matrix<T> {
    let (tall, short) = (rows.max(cols), rows.min(cols));
    // `short` orthonormal vectors of length `tall`.
    let mut basis: Vec<Vec<T>> = Vec::with_capacity(short);
    while basis.len() < short {
        let mut v: Vec<T> = (0..tall).map(|_| standard_normal::<T, R>(rng)).collect();
        for _ in 0..2 {
            for b in &basis {
                let dot = v.iter().zip(b).fold(T::zero(), |a, (&x, &y)| a + x * y);
                for (x, &y) in v.iter_mut().zip(b) {
                    *x = *x - dot * y;
                }
            }
        }
        let norm = v.iter().fold(T::zero(), |a, &x| a + x * x).sqrt();
        if norm > T::of(1e-8) {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    if rows >= cols {
        Matrix::from_fn(rows, cols, |r, c| basis[c][r] * gain)
    } else {
        Matrix::from_fn(rows, cols, |r, c| basis[r][c] * gain)
    }
}
