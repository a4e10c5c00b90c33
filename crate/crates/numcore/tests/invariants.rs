//! Property tests for the tape contracts.

use numcore::rng::Rng;
use numcore::tape::Tape;
use numcore::NORM_EPS;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn l2_normalize_is_idempotent(seed in 0u64..1000, n in 2usize..16) {
        let mut rng = Rng::new(seed);
        let data: Vec<f64> = (0..n).map(|_| rng.normal() + 0.5).collect();
        let norm: f64 = data.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assume!(norm > 1e-6);

        let mut t = Tape::new();
        let x = t.leaf(data, vec![1, n], false);
        let once = t.l2_normalize_rows(x, NORM_EPS).unwrap();
        let twice = t.l2_normalize_rows(once, NORM_EPS).unwrap();
        for (a, b) in t.data(once).iter().zip(t.data(twice).iter()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn stop_gradient_forward_identity(seed in 0u64..1000, n in 1usize..32) {
        let mut rng = Rng::new(seed);
        let data: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mut t = Tape::new();
        let x = t.leaf(data.clone(), vec![n], true);
        let y = t.stop_gradient(x);
        prop_assert_eq!(t.data(y), data.as_slice());
    }

    #[test]
    fn softmax_rows_are_distributions(seed in 0u64..1000, m in 1usize..6, n in 2usize..12) {
        let mut rng = Rng::new(seed);
        let data: Vec<f64> = (0..m * n).map(|_| 3.0 * rng.normal()).collect();
        let mut t = Tape::new();
        let x = t.leaf(data, vec![m, n], false);
        let s = t.softmax(x).unwrap();
        for i in 0..m {
            let row = &t.data(s)[i * n..(i + 1) * n];
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn gather_then_scatter_restores_rows(seed in 0u64..1000, m in 2usize..8, n in 1usize..6) {
        let mut rng = Rng::new(seed);
        let data: Vec<f64> = (0..m * n).map(|_| rng.normal()).collect();
        let idx: Vec<usize> = (0..m).collect();
        let mut t = Tape::new();
        let x = t.leaf(data.clone(), vec![m, n], false);
        let g = t.gather_rows(x, &idx).unwrap();
        let s = t.scatter_rows(g, &idx, m).unwrap();
        prop_assert_eq!(t.data(s), data.as_slice());
    }
}
