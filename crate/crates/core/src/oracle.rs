//! Gradient descent on random quadratics: weight trajectories with known dynamics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numcore::{orthogonal, standard_normal, Layout};
use crate::trajectory::{TrajectoryMeta, WeightTrajectory, ALGORITHM_QUADRATIC};
use crate::Matrix;

/// `f(phi) = 0.5 phi^T A phi - b^T phi` with `A = Q diag(lambda) Q^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticSystem {
    pub a: Matrix,
    pub b: Vec<f64>,
    pub alpha: f64,
    pub sigma_noise: f64,
    /// Orthonormal eigenvectors of `A`, one per column.
    pub q: Matrix,
    pub eigenvalues: Vec<f64>,
}

pub fn make_system(
    n: usize,
    seed: u64,
    lambda_min: f64,
    lambda_max: f64,
    alpha: f64,
    sigma_noise: f64,
) -> Result<QuadraticSystem> {
    if n == 0 {
        return Err(Error::Config("quadratic dimension must be at least 1".into()));
    }
    if !(lambda_min > 0.0 && lambda_min <= lambda_max) {
        return Err(Error::Config(format!(
            "need 0 < lambda_min <= lambda_max, got [{lambda_min}, {lambda_max}]"
        )));
    }
    if !(alpha >= 0.0 && alpha * lambda_max < 2.0) {
        return Err(Error::Config(format!(
            "step size {alpha} is not a contraction for lambda_max {lambda_max}"
        )));
    }
    if sigma_noise < 0.0 {
        return Err(Error::Config("sigma_noise must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = orthogonal(n, n, 1.0, &mut rng);
    let eigenvalues: Vec<f64> = (0..n).map(|_| rng.random_range(lambda_min..=lambda_max)).collect();
    let a = q.scale_columns(&eigenvalues).matmul_nt(&q);
    // Symmetrize away rounding in the product.
    let a = Matrix::from_fn(n, n, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]));
    let b = (0..n).map(|_| standard_normal(&mut rng)).collect();
    Ok(QuadraticSystem {
        a,
        b,
        alpha,
        sigma_noise,
        q,
        eigenvalues,
    })
}

impl QuadraticSystem {
    pub fn dim(&self) -> usize {
        self.b.len()
    }

    /// Minimizer `A^-1 b`.
    pub fn fixed_point(&self) -> Vec<f64> {
        let qb = self.q.transpose().matmul(&column(&self.b)).expect("square system");
        let scaled: Vec<f64> = qb.as_slice().iter().zip(&self.eigenvalues).map(|(x, l)| x / l).collect();
        self.q.matmul(&column(&scaled)).expect("square system").into_vec()
    }

    pub fn objective(&self, phi: &[f64]) -> f64 {
        let ap = self.a.matmul(&column(phi)).expect("length checked by caller").into_vec();
        0.5 * dot(phi, &ap) - dot(&self.b, phi)
    }

    fn check_len(&self, phi: &[f64]) -> Result<()> {
        if phi.len() != self.dim() {
            return Err(Error::LengthMismatch {
                op: "quadratic state",
                expected: self.dim(),
                actual: phi.len(),
            });
        }
        Ok(())
    }
}

fn column(v: &[f64]) -> Matrix {
    Matrix::from_fn(v.len(), 1, |r, _| v[r])
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `phi_{t+1} = phi_t - alpha (A phi_t - b) + sigma eps_t`, returning `steps + 1` states.
pub fn gen_trajectory(sys: &QuadraticSystem, phi0: &[f64], steps: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    sys.check_len(phi0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(steps + 1);
    let mut phi = phi0.to_vec();
    out.push(phi.clone());
    for _ in 0..steps {
        let grad = sys.a.matmul(&column(&phi))?;
        for (p, (g, b)) in phi.iter_mut().zip(grad.as_slice().iter().zip(&sys.b)) {
            *p -= sys.alpha * (g - b);
            if sys.sigma_noise > 0.0 {
                *p += sys.sigma_noise * standard_normal::<f64, _>(&mut rng);
            }
        }
        out.push(phi.clone());
    }
    Ok(out)
}

/// Noiseless state after `t` steps: `c + (I - alpha A)^t (phi0 - c)` with `c = A^-1 b`.
pub fn closed_form(sys: &QuadraticSystem, phi0: &[f64], t: u64) -> Result<Vec<f64>> {
    sys.check_len(phi0)?;
    let c = sys.fixed_point();
    let offset: Vec<f64> = phi0.iter().zip(&c).map(|(p, c)| p - c).collect();
    let coords = sys.q.transpose().matmul(&column(&offset))?;
    let exponent = i32::try_from(t).unwrap_or(i32::MAX);
    let decayed: Vec<f64> = coords
        .as_slice()
        .iter()
        .zip(&sys.eigenvalues)
        .map(|(x, l)| x * (1.0 - sys.alpha * l).powi(exponent))
        .collect();
    let back = sys.q.matmul(&column(&decayed))?;
    Ok(back.as_slice().iter().zip(&c).map(|(x, c)| x + c).collect())
}

/// Starting point `A^-1 b` plus a random combination of the `rank` slowest
/// eigendirections, so the whole trajectory stays in a `rank + 1` dimensional
/// affine span.
pub fn low_rank_start(sys: &QuadraticSystem, rank: usize, scale: f64, seed: u64) -> Result<Vec<f64>> {
    if rank > sys.dim() {
        return Err(Error::Config(format!("rank {rank} exceeds dimension {}", sys.dim())));
    }
    let mut order: Vec<usize> = (0..sys.dim()).collect();
    order.sort_by(|&i, &j| sys.eigenvalues[i].total_cmp(&sys.eigenvalues[j]));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut phi = sys.fixed_point();
    for &k in order.iter().take(rank) {
        let coef = scale * standard_normal::<f64, _>(&mut rng);
        for (i, p) in phi.iter_mut().enumerate() {
            *p += coef * sys.q[(i, k)];
        }
    }
    Ok(phi)
}

/// Wraps generated states as a trajectory tagged `quadratic-gd`.
pub fn oracle_trajectory(states: &[Vec<f64>], seed: u64) -> Result<WeightTrajectory> {
    let n = states.first().map_or(0, Vec::len);
    WeightTrajectory::new(
        TrajectoryMeta {
            env: "quadratic".into(),
            seed,
            algorithm: ALGORITHM_QUADRATIC.into(),
            snapshot_every: 1,
            hyper_hash: String::new(),
            layout: Layout::contiguous([("phi".to_string(), vec![n])]),
            timestamps: (0..states.len() as u64).collect(),
            arch: None,
            obs_norm: None,
            returns: None,
            eval_history: Vec::new(),
            truncated_nonfinite: false,
        },
        Matrix::from_rows(states)?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::thin_svd;
    use crate::svdcodec::fit_basis;

    fn system(seed: u64) -> QuadraticSystem {
        make_system(12, seed, 0.1, 1.0, 0.5, 0.0).unwrap()
    }

    fn random_start(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| standard_normal(&mut rng)).collect()
    }

    #[test]
    fn system_is_symmetric_with_bounded_spectrum() {
        let s = system(1);
        for i in 0..12 {
            for j in 0..12 {
                assert!((s.a[(i, j)] - s.a[(j, i)]).abs() < 1e-12);
            }
        }
        let m = nalgebra::DMatrix::from_row_slice(12, 12, s.a.as_slice());
        for ev in m.clone().symmetric_eigen().eigenvalues.iter() {
            assert!((0.1 - 1e-10..=1.0 + 1e-10).contains(ev));
        }
        assert!(m.cholesky().is_some());
    }

    #[test]
    fn contraction_is_enforced() {
        assert!(matches!(make_system(4, 0, 0.1, 1.0, 2.0, 0.0), Err(Error::Config(_))));
        assert!(make_system(4, 0, 0.0, 1.0, 0.5, 0.0).is_err());
        assert!(make_system(4, 0, 1.0, 0.5, 0.5, 0.0).is_err());
    }

    #[test]
    fn frozen_dynamics_and_fixed_point_are_constant() {
        let frozen = make_system(6, 2, 0.1, 1.0, 0.0, 0.0).unwrap();
        let phi0 = random_start(6, 3);
        assert!(gen_trajectory(&frozen, &phi0, 10, 0).unwrap().iter().all(|p| *p == phi0));

        let s = system(4);
        let c = s.fixed_point();
        for p in gen_trajectory(&s, &c, 20, 0).unwrap() {
            for (x, y) in p.iter().zip(&c) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn noiseless_trajectory_matches_closed_form() {
        let s = system(5);
        let phi0 = random_start(12, 6);
        let traj = gen_trajectory(&s, &phi0, 60, 0).unwrap();
        assert_eq!(traj.len(), 61);
        assert_eq!(closed_form(&s, &phi0, 0).unwrap().len(), 12);
        for (t, p) in traj.iter().enumerate() {
            let cf = closed_form(&s, &phi0, t as u64).unwrap();
            for (x, y) in p.iter().zip(&cf) {
                let tol = if t <= 1 { 1e-10 } else { 1e-9 };
                assert!((x - y).abs() < tol, "t = {t}");
            }
        }
    }

    #[test]
    fn long_horizon_reaches_minimizer() {
        let s = system(7);
        let phi0 = random_start(12, 8);
        let far = closed_form(&s, &phi0, 10_000).unwrap();
        let reference = nalgebra::DMatrix::from_row_slice(12, 12, s.a.as_slice())
            .lu()
            .solve(&nalgebra::DVector::from_column_slice(&s.b))
            .unwrap();
        for (x, y) in far.iter().zip(reference.iter()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn objective_non_increasing() {
        let s = system(9);
        let traj = gen_trajectory(&s, &random_start(12, 10), 50, 0).unwrap();
        for w in traj.windows(2) {
            assert!(s.objective(&w[1]) <= s.objective(&w[0]) + 1e-12);
        }
    }

    #[test]
    fn noise_is_seeded() {
        let s = make_system(5, 11, 0.1, 1.0, 0.5, 1e-3).unwrap();
        let phi0 = random_start(5, 12);
        let a = gen_trajectory(&s, &phi0, 10, 1).unwrap();
        assert_eq!(a, gen_trajectory(&s, &phi0, 10, 1).unwrap());
        assert_ne!(a, gen_trajectory(&s, &phi0, 10, 2).unwrap());
    }

    #[test]
    fn stacked_trajectories_are_codec_exact_at_full_rank() {
        let s = system(13);
        let mut rows = Vec::new();
        for k in 0..4 {
            rows.extend(gen_trajectory(&s, &random_start(12, 20 + k), 30, 0).unwrap());
        }
        let corpus = Matrix::from_rows(&rows).unwrap();
        assert!(thin_svd(&corpus).unwrap().numerical_rank() <= 12);
        let basis = fit_basis(&corpus, 12, Layout::contiguous([("phi", vec![12])])).unwrap();
        for r in &rows {
            let back = basis.decode_values(&basis.encode_values(r).unwrap()).unwrap();
            let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            let err = r.iter().zip(&back).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(err <= 1e-8 * norm);
        }
    }

    #[test]
    fn low_rank_start_stays_in_small_span() {
        let s = system(14);
        let mut rows = Vec::new();
        for k in 0..5 {
            let phi0 = low_rank_start(&s, 3, 1.0, k).unwrap();
            rows.extend(gen_trajectory(&s, &phi0, 40, 0).unwrap());
        }
        let svd = thin_svd(&Matrix::from_rows(&rows).unwrap()).unwrap();
        assert_eq!(svd.numerical_rank(), 4);
    }

    #[test]
    fn trajectory_wrapper() {
        let s = system(15);
        let states = gen_trajectory(&s, &random_start(12, 16), 5, 0).unwrap();
        let t = oracle_trajectory(&states, 3).unwrap();
        assert_eq!(t.len(), 6);
        assert_eq!(t.meta.algorithm, "quadratic-gd");
        assert_eq!(t.snapshot(2).values, states[2]);
    }
}
