//! Property tests for the spec's structural invariants.

use std::collections::BTreeMap;

use proptest::prelude::*;
use siftlab_core::analysis::{sparsity_profile, verify_descent_bound};
use siftlab_core::mask::{budget, gather_sparse_grad, scatter_into, select_from_gradients, MaskGranularity};
use siftlab_core::models::ParamSet;
use siftlab_core::optim::{SparseIncrement, SparseOptimState, AdamWParams};
use siftlab_core::persist::{load_increment, save_increment};
use siftlab_core::{ElemType, Tensor};

fn grad_vec(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-100.0f64..100.0, 1..max_len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gather_scatter_round_trip(g in grad_vec(64), seed in any::<u64>()) {
        let n = g.len();
        let m = (seed as usize % n) + 1;
        let grads: BTreeMap<String, Vec<f64>> = [("w".to_string(), g.clone())].into_iter().collect();
        let mask = select_from_gradients(&grads, m as f64 / n as f64, MaskGranularity::PerTensor, 1).unwrap();
        let idx = mask.indices("w").unwrap();
        let gathered = gather_sparse_grad(&g, idx).unwrap();
        let mut scattered = vec![0.0; n];
        scatter_into(&mut scattered, idx, &gathered);
        for &i in idx {
            prop_assert_eq!(scattered[i].to_bits(), g[i].to_bits());
        }
    }

    #[test]
    fn monotone_budget_masks_nest(g in grad_vec(48), r1 in 0.01f64..1.0, r2 in 0.01f64..1.0) {
        let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
        let grads: BTreeMap<String, Vec<f64>> = [("w".to_string(), g)].into_iter().collect();
        let small = select_from_gradients(&grads, lo, MaskGranularity::PerTensor, 1).unwrap();
        let large = select_from_gradients(&grads, hi, MaskGranularity::PerTensor, 1).unwrap();
        let large_idx = large.indices("w").unwrap();
        for i in small.indices("w").unwrap() {
            prop_assert!(large_idx.binary_search(i).is_ok(), "index {} missing at higher rate", i);
        }
    }

    #[test]
    fn descent_bound_holds_for_random_vectors(g in grad_vec(200), tau_frac in 0.01f64..0.99) {
        prop_assume!(g.iter().any(|&v| v != 0.0));
        let n = g.len();
        if n < 2 { return Ok(()); }
        let tau = ((tau_frac * n as f64) as usize).clamp(1, n - 1);
        let report = verify_descent_bound(&g, tau).unwrap();
        prop_assert!(report.holds, "cosine {} > bound {}", report.cosine_min, report.bound);
    }

    #[test]
    fn profile_curves_nondecreasing(g in grad_vec(128)) {
        prop_assume!(g.iter().any(|&v| v != 0.0));
        let fracs: Vec<f64> = (1..=20).map(|i| i as f64 / 20.0).collect();
        let p = sparsity_profile(&g, &fracs).unwrap();
        prop_assert!(p.energy_fraction.windows(2).all(|w| w[0] <= w[1] + 1e-15));
        prop_assert!(p.abs_fraction.windows(2).all(|w| w[0] <= w[1] + 1e-15));
        prop_assert!((p.energy_fraction.last().unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn state_size_law_exact(sizes in prop::collection::vec(1usize..500, 1..6), rate in 0.001f64..1.0) {
        let grads: BTreeMap<String, Vec<f64>> = sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| (format!("p{i}"), (0..n).map(|j| (j as f64).sin()).collect()))
            .collect();
        let mask = select_from_gradients(&grads, rate, MaskGranularity::PerTensor, 1).unwrap();
        let state = SparseOptimState::new(&mask, AdamWParams::default());
        let expect: usize = sizes.iter().map(|&n| budget(rate, n)).sum();
        prop_assert_eq!(state.state_elements(), 2 * expect);
    }

    #[test]
    fn increment_file_round_trip(
        idx_seed in any::<u64>(),
        values in prop::collection::vec(-1000.0f64..1000.0, 1..32),
    ) {
        let n = values.len();
        let extent = n * 3 + 1;
        // Strictly increasing indices inside the extent.
        let mut indices: Vec<usize> = (0..n).map(|i| i * 3 + (idx_seed as usize % 3)).collect();
        indices.dedup();
        let mut inc = SparseIncrement::empty();
        inc.insert("w", indices, values);
        let mut params = ParamSet::default();
        params.insert("w", Tensor::zeros(vec![extent]));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("inc.sift");
        save_increment(&path, &inc, &params, ElemType::F64).unwrap();
        let loaded = load_increment(&path).unwrap();
        prop_assert_eq!(&loaded.increment, &inc);

        // Bytes are deterministic.
        let path2 = dir.path().join("inc2.sift");
        save_increment(&path2, &loaded.increment, &params, ElemType::F64).unwrap();
        prop_assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }
}
