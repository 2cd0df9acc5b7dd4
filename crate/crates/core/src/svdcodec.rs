//! Truncated SVD codec mapping weight vectors to low-dimensional codes.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numcore::{thin_svd, Layout, Matrix, Real};
use crate::policy::WeightVector;

/// Rows above which the basis is fitted on a strided subsample.
pub const MAX_FIT_ROWS: usize = 50_000;

/// Standard deviations below this are replaced by 1 when standardizing codes.
const MIN_CODE_STD: f64 = 1e-12;

/// Rank-`d` basis `(Sigma_d, V_d)` of a snapshot corpus.
///
/// Encoding is `u = phi V_d Sigma_d^-1`, decoding `phi = u Sigma_d V_d^T`, so a
/// training row encodes to its row of `U_d`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdBasis<T> {
    /// Leading singular values, descending, positive.
    pub sigma: Vec<T>,
    /// `weight_dim x d`, orthonormal columns.
    pub v: Matrix<T>,
    /// Cumulative energy fraction of the full spectrum, one entry per rank.
    pub energy: Vec<T>,
    pub corpus_hash: String,
    pub code_mean: Vec<T>,
    pub code_std: Vec<T>,
    pub layout: Layout,
}

/// Row stride used to keep at most [`MAX_FIT_ROWS`] rows.
pub fn fit_stride(rows: usize) -> usize {
    rows.div_ceil(MAX_FIT_ROWS).max(1)
}

/// Hex SHA-256 over the corpus shape and little-endian `f64` entries.
pub fn corpus_hash<T: Real>(corpus: &Matrix<T>) -> String {
    let mut h = Sha256::new();
    h.update((corpus.rows() as u64).to_le_bytes());
    h.update((corpus.cols() as u64).to_le_bytes());
    for x in corpus.as_slice() {
        h.update(x.to_f64().unwrap_or(f64::NAN).to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Fits a rank-`d` basis on the stacked snapshot rows of `corpus`.
pub fn fit_basis<T: Real>(corpus: &Matrix<T>, d: usize, layout: Layout) -> Result<SvdBasis<T>> {
    layout.validate()?;
    if layout.total() != corpus.cols() {
        return Err(Error::LengthMismatch {
            op: "fit_basis layout",
            expected: corpus.cols(),
            actual: layout.total(),
        });
    }
    if d == 0 {
        return Err(Error::Config("basis rank d must be at least 1".into()));
    }
    let stride = fit_stride(corpus.rows());
    let fit_rows = if stride > 1 {
        let picked: Vec<T> = (0..corpus.rows())
            .step_by(stride)
            .flat_map(|r| corpus.row(r).iter().copied())
            .collect();
        Matrix::from_vec(picked.len() / corpus.cols(), corpus.cols(), picked)?
    } else {
        corpus.clone()
    };
    let svd = thin_svd(&fit_rows)?;
    let attainable = svd.numerical_rank();
    if d > attainable {
        return Err(Error::RankTooLarge {
            requested: d,
            attainable,
        });
    }

    let total: T = svd.sigma.iter().map(|&s| s * s).sum();
    let mut acc = T::zero();
    let energy: Vec<T> = svd
        .sigma
        .iter()
        .map(|&s| {
            acc = acc + s * s;
            if total > T::zero() {
                (acc / total).min(T::one())
            } else {
                T::one()
            }
        })
        .collect();

    let mut basis = SvdBasis {
        sigma: svd.sigma[..d].to_vec(),
        v: svd.v.take_cols(d),
        energy,
        corpus_hash: corpus_hash(corpus),
        code_mean: vec![T::zero(); d],
        code_std: vec![T::one(); d],
        layout,
    };
    let codes = basis.encode_rows(corpus)?;
    let (mean, std) = column_stats(&codes);
    basis.code_mean = mean;
    basis.code_std = std;
    Ok(basis)
}

/// Per-column mean and population standard deviation, with degenerate
/// columns given unit scale.
pub fn column_stats<T: Real>(m: &Matrix<T>) -> (Vec<T>, Vec<T>) {
    let n = T::of_usize(m.rows().max(1));
    let mean: Vec<T> = m.column_sums().as_slice().iter().map(|&s| s / n).collect();
    let mut var = vec![T::zero(); m.cols()];
    for r in 0..m.rows() {
        for (c, &x) in m.row(r).iter().enumerate() {
            var[c] = var[c] + (x - mean[c]) * (x - mean[c]);
        }
    }
    let std = var
        .into_iter()
        .map(|v| {
            let s = (v / n).sqrt();
            if s > T::of(MIN_CODE_STD) {
                s
            } else {
                T::one()
            }
        })
        .collect();
    (mean, std)
}

impl<T: Real> SvdBasis<T> {
    pub fn d(&self) -> usize {
        self.sigma.len()
    }

    pub fn weight_dim(&self) -> usize {
        self.v.rows()
    }

    /// Checks the structural invariants of a basis, e.g. after loading.
    pub fn validate(&self) -> Result<()> {
        let d = self.d();
        if d == 0 || self.v.cols() != d || self.code_mean.len() != d || self.code_std.len() != d {
            return Err(Error::Config(format!(
                "inconsistent basis: d = {d}, V is {}x{}, code stats {}/{}",
                self.v.rows(),
                self.v.cols(),
                self.code_mean.len(),
                self.code_std.len()
            )));
        }
        if self.layout.total() != self.weight_dim() {
            return Err(Error::LengthMismatch {
                op: "basis layout",
                expected: self.weight_dim(),
                actual: self.layout.total(),
            });
        }
        if self.sigma.iter().any(|&s| s <= T::zero()) || self.sigma.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::Config("basis singular values must be positive and descending".into()));
        }
        if self.code_std.iter().any(|&s| s <= T::zero()) {
            return Err(Error::Config("code_std must be positive".into()));
        }
        Ok(())
    }

    pub fn encode_values(&self, phi: &[T]) -> Result<Vec<T>> {
        if phi.len() != self.weight_dim() {
            return Err(Error::LengthMismatch {
                op: "encode",
                expected: self.weight_dim(),
                actual: phi.len(),
            });
        }
        let mut u = vec![T::zero(); self.d()];
        for (i, &p) in phi.iter().enumerate() {
            for (uj, &vij) in u.iter_mut().zip(self.v.row(i)) {
                *uj = *uj + p * vij;
            }
        }
        for (uj, &s) in u.iter_mut().zip(&self.sigma) {
            *uj = *uj / s;
        }
        Ok(u)
    }

    pub fn decode_values(&self, u: &[T]) -> Result<Vec<T>> {
        if u.len() != self.d() {
            return Err(Error::LengthMismatch {
                op: "decode",
                expected: self.d(),
                actual: u.len(),
            });
        }
        let scaled: Vec<T> = u.iter().zip(&self.sigma).map(|(&a, &s)| a * s).collect();
        Ok((0..self.weight_dim())
            .map(|i| self.v.row(i).iter().zip(&scaled).map(|(&v, &a)| v * a).sum())
            .collect())
    }

    /// Encodes every row of `rows`.
    pub fn encode_rows(&self, rows: &Matrix<T>) -> Result<Matrix<T>> {
        let inv: Vec<T> = self.sigma.iter().map(|&s| T::one() / s).collect();
        Ok(rows.matmul(&self.v)?.scale_columns(&inv))
    }

    pub fn standardize(&self, u: &[T]) -> Vec<T> {
        u.iter()
            .zip(self.code_mean.iter().zip(&self.code_std))
            .map(|(&x, (&m, &s))| (x - m) / s)
            .collect()
    }

    pub fn destandardize(&self, z: &[T]) -> Vec<T> {
        z.iter()
            .zip(self.code_mean.iter().zip(&self.code_std))
            .map(|(&x, (&m, &s))| x * s + m)
            .collect()
    }
}

impl SvdBasis<f64> {
    pub fn encode(&self, w: &WeightVector) -> Result<Vec<f64>> {
        self.layout.ensure_matches(&w.layout)?;
        self.encode_values(&w.values)
    }

    pub fn decode(&self, u: &[f64]) -> Result<WeightVector> {
        Ok(WeightVector {
            values: self.decode_values(u)?,
            layout: self.layout.clone(),
        })
    }
}

/// Cumulative energy fractions of the full corpus spectrum.
pub fn energy_profile<T: Real>(basis: &SvdBasis<T>) -> &[T] {
    &basis.energy
}

/// Serializable summary of a basis (everything except the numeric arrays).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisHeader {
    pub d: usize,
    pub weight_dim: usize,
    pub spectrum_len: usize,
    pub corpus_hash: String,
    pub layout: Layout,
}

impl<T: Real> SvdBasis<T> {
    pub fn header(&self) -> BasisHeader {
        BasisHeader {
            d: self.d(),
            weight_dim: self.weight_dim(),
            spectrum_len: self.energy.len(),
            corpus_hash: self.corpus_hash.clone(),
            layout: self.layout.clone(),
        }
    }
}
