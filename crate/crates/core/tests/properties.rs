//! Randomized properties of the codec, the file formats and GAE.

use proptest::prelude::*;

use weightpath::formats::{decode_trajectory, encode_trajectory};
use weightpath::numcore::Layout;
use weightpath::oracle::oracle_trajectory;
use weightpath::ppo::compute_gae;
use weightpath::svdcodec::fit_basis;
use weightpath::{Error, Matrix};

fn corpus() -> impl Strategy<Value = Matrix> {
    (3usize..12, 2usize..8).prop_flat_map(|(r, c)| {
        prop::collection::vec(-5.0f64..5.0, r * c).prop_map(move |v| Matrix::from_vec(r, c, v).unwrap())
    })
}

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e6f64..1e6,
        Just(0.0),
        Just(-0.0),
        Just(f64::MIN_POSITIVE / 4.0),
        Just(f64::MAX),
        Just(-1e-300),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn codes_survive_decode_then_encode(m in corpus(), pick in 0usize..8, scale in 0.1f64..3.0) {
        let d = 1 + pick % m.rows().min(m.cols());
        let layout = Layout::contiguous([("phi", vec![m.cols()])]);
        let basis = match fit_basis(&m, d, layout) {
            Ok(b) => b,
            Err(Error::RankTooLarge { .. }) => return Ok(()),
            Err(e) => panic!("{e}"),
        };
        let u: Vec<f64> = (0..d).map(|i| scale * (i as f64 - 1.5)).collect();
        let back = basis.encode_values(&basis.decode_values(&u).unwrap()).unwrap();
        for (a, b) in back.iter().zip(&u) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn trajectory_bytes_roundtrip_exactly(
        dim in 1usize..6,
        values in prop::collection::vec(finite(), 1..40),
        seed in any::<u64>(),
    ) {
        let rows = values.len().div_ceil(dim);
        let states: Vec<Vec<f64>> = (0..rows)
            .map(|r| (0..dim).map(|c| values[(r * dim + c) % values.len()]).collect())
            .collect();
        let traj = oracle_trajectory(&states, seed).unwrap();
        let bytes = encode_trajectory(&traj).unwrap();
        let back = decode_trajectory(std::path::Path::new("p.wtrj"), &bytes).unwrap();
        let same_bits = back.snapshots.as_slice().iter().zip(traj.snapshots.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same_bits);
        prop_assert_eq!(encode_trajectory(&back).unwrap(), bytes);
    }

    #[test]
    fn every_truncation_is_rejected(cut_frac in 0.0f64..1.0, seed in any::<u64>()) {
        let states: Vec<Vec<f64>> = (0..4).map(|r| vec![r as f64, seed as f64]).collect();
        let bytes = encode_trajectory(&oracle_trajectory(&states, seed).unwrap()).unwrap();
        let cut = ((bytes.len() as f64) * cut_frac) as usize;
        let err = decode_trajectory(std::path::Path::new("p.wtrj"), &bytes[..cut]).unwrap_err();
        prop_assert!(matches!(err, Error::Truncated { .. } | Error::Malformed { .. }), "{}", err);
    }

    #[test]
    fn gae_with_lambda_zero_is_the_td_residual(
        steps in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0, any::<bool>()), 1..30),
        bootstrap in -2.0f64..2.0,
        gamma in 0.5f64..1.0,
    ) {
        let rewards: Vec<f64> = steps.iter().map(|s| s.0).collect();
        let values: Vec<f64> = steps.iter().map(|s| s.1).collect();
        let dones: Vec<bool> = steps.iter().map(|s| s.2).collect();
        let (adv, ret) = compute_gae(&rewards, &values, &dones, bootstrap, gamma, 0.0).unwrap();
        for t in 0..rewards.len() {
            let next = if dones[t] { 0.0 } else if t + 1 < values.len() { values[t + 1] } else { bootstrap };
            let td = rewards[t] + gamma * next - values[t];
            prop_assert!((adv[t] - td).abs() < 1e-12);
            prop_assert!((ret[t] - adv[t] - values[t]).abs() < 1e-12);
        }
    }
}
