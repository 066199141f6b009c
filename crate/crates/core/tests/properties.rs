use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use qdiff_core::noise::NoiseStream;
use qdiff_core::operators::{
    build_projector_set, expectation, hermiticity_deviation, min_eigenvalue, DensityMatrix,
    LindbladSet, Operator, StateVector,
};
use qdiff_core::C64;

fn complex_entry() -> impl Strategy<Value = C64> {
    (-3.0..3.0f64, -3.0..3.0f64).prop_map(|(re, im)| C64::new(re, im))
}

fn operator(dim: usize) -> impl Strategy<Value = Operator> {
    proptest::collection::vec(complex_entry(), dim * dim).prop_map(move |v| {
        Operator::new(DMatrix::from_fn(dim, dim, |i, j| v[i * dim + j])).unwrap()
    })
}

// Random valid density matrix via A A† / Tr(A A†).
fn density(dim: usize) -> impl Strategy<Value = DensityMatrix> {
    proptest::collection::vec(complex_entry(), dim * dim).prop_map(move |v| {
        let a = DMatrix::from_fn(dim, dim, |i, j| v[i * dim + j]);
        let mut m = &a * a.adjoint();
        // Guard against the zero matrix.
        for i in 0..dim {
            m[(i, i)] += C64::new(1e-3, 0.0);
        }
        let tr: f64 = (0..dim).map(|i| m[(i, i)].re).sum();
        DensityMatrix::new(m / C64::new(tr, 0.0)).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn expectation_is_conjugate_symmetric(op in operator(3), rho in density(3)) {
        let e = expectation(&op, &rho).unwrap();
        let e_adj = expectation(&op.adjoint(), &rho).unwrap();
        prop_assert!((e_adj - e.conj()).norm() < 1e-12);
    }

    #[test]
    fn expectation_is_linear_in_the_state(
        op in operator(2),
        ra in density(2),
        rb in density(2),
        lam in 0.0..1.0f64,
    ) {
        let mixed = DensityMatrix::new(
            ra.matrix() * C64::new(lam, 0.0) + rb.matrix() * C64::new(1.0 - lam, 0.0),
        ).unwrap();
        let e_mix = expectation(&op, &mixed).unwrap();
        let e_a = expectation(&op, &ra).unwrap();
        let e_b = expectation(&op, &rb).unwrap();
        let want = e_a * C64::new(lam, 0.0) + e_b * C64::new(1.0 - lam, 0.0);
        prop_assert!((e_mix - want).norm() < 1e-12);
    }

    #[test]
    fn quadratic_sum_is_hermitian_psd(ops in proptest::collection::vec(operator(3), 1..4)) {
        let set = LindbladSet::new(ops).unwrap();
        let k = set.sum_ldag_l();
        prop_assert!(hermiticity_deviation(k) < 1e-12);
        prop_assert!(min_eigenvalue(k) > -1e-10);
    }

    #[test]
    fn projector_sets_are_exactly_complete(dim in 2usize..8) {
        let set = build_projector_set(dim).unwrap();
        let mut sum = DMatrix::<C64>::zeros(dim, dim);
        for m in 0..dim {
            sum += set.operator(m);
            for n in 0..dim {
                let prod = set.operator(m) * set.operator(n);
                let expect = if m == n {
                    set.operator(m).clone()
                } else {
                    DMatrix::zeros(dim, dim)
                };
                prop_assert_eq!(prod, expect);
            }
        }
        prop_assert_eq!(sum, DMatrix::identity(dim, dim));
    }

    #[test]
    fn operator_json_round_trips_exactly(op in operator(3)) {
        let text = serde_json::to_string(&op).unwrap();
        let back: Operator = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(op, back);
    }

    #[test]
    fn density_json_round_trips_exactly(rho in density(3)) {
        let text = serde_json::to_string(&rho).unwrap();
        let back: DensityMatrix = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(rho, back);
    }

    #[test]
    fn state_vector_json_round_trips_exactly(v in proptest::collection::vec(complex_entry(), 2..5)) {
        let raw = DVector::from_vec(v);
        prop_assume!(raw.norm() > 1e-6);
        let psi = StateVector::normalized(raw).unwrap();
        let text = serde_json::to_string(&psi).unwrap();
        let back: StateVector = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(psi, back);
    }

    #[test]
    fn noise_streams_replay_bitwise(seed in any::<u64>(), traj in 0u64..1000, m in 1usize..4) {
        let mut a = NoiseStream::new(seed, traj);
        let mut b = NoiseStream::new(seed, traj);
        for _ in 0..16 {
            let xa = a.sample_increments(m, 0.01).unwrap();
            let xb = b.sample_increments(m, 0.01).unwrap();
            prop_assert_eq!(xa.values(), xb.values());
        }
    }
}
