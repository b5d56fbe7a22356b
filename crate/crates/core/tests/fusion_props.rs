use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use txfuse::cafn::{Ablation, AccountInput, Cafn, CafnShape};
use txfuse::numcore::Tensor;

fn random_input(r: &mut ChaCha8Rng, rows: usize, d_s: usize, d_h: usize) -> AccountInput {
    let s = (0..rows * d_s).map(|_| r.gen_range(-1.0..1.0)).collect();
    let g = (0..d_h).map(|_| r.gen_range(-1.0..1.0)).collect();
    AccountInput::new(Tensor::matrix(rows, d_s, s).unwrap(), g)
}

fn permute_rows(t: &Tensor, order: &[usize]) -> Tensor {
    let (_, c) = t.dims2();
    let data = order.iter().flat_map(|&i| t.row(i).to_vec()).collect();
    Tensor::matrix(order.len(), c, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn token_order_does_not_change_predictions(
        seed in any::<u64>(),
        rows in 1usize..12,
        k_s in 1usize..5,
        k_f in 1usize..5,
        ablation in prop_oneof![Just(Ablation::None), Just(Ablation::Add), Just(Ablation::Linear), Just(Ablation::NoGraph)],
    ) {
        let shape = CafnShape { d_s: 6, d_h: 5, d_f: 4, k_s, k_f };
        let model = Cafn::new(shape, ablation, seed).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let a = random_input(&mut r, rows, 6, 5);
        let mut order: Vec<usize> = (0..rows).collect();
        order.shuffle(&mut r);
        let b = AccountInput::new(permute_rows(&a.semantic, &order), a.graph.clone());
        let p = model.predict_proba(&[a, b]).unwrap();
        for c in 0..2 {
            prop_assert!((p[0][c] - p[1][c]).abs() < 1e-12, "{:?} vs {:?}", p[0], p[1]);
        }
        prop_assert!((p[0][0] + p[0][1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn graph_ablation_ignores_graph_embedding(seed in any::<u64>(), rows in 1usize..8) {
        let shape = CafnShape { d_s: 4, d_h: 3, d_f: 4, k_s: 2, k_f: 2 };
        let model = Cafn::new(shape, Ablation::NoGraph, seed).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let a = random_input(&mut r, rows, 4, 3);
        let b = AccountInput::new(a.semantic.clone(), (0..3).map(|_| r.gen_range(-5.0..5.0)).collect());
        let p = model.predict_proba(&[a, b]).unwrap();
        prop_assert_eq!(p[0], p[1]);
    }

    #[test]
    fn batch_composition_does_not_leak_between_accounts(seed in any::<u64>(), n in 2usize..6) {
        let shape = CafnShape { d_s: 4, d_h: 3, d_f: 4, k_s: 3, k_f: 2 };
        let model = Cafn::new(shape, Ablation::None, seed).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let batch: Vec<AccountInput> = (0..n).map(|_| { let rows = r.gen_range(1..6); random_input(&mut r, rows, 4, 3) }).collect();
        let together = model.predict_proba(&batch).unwrap();
        for (i, x) in batch.iter().enumerate() {
            let alone = model.predict_proba(std::slice::from_ref(x)).unwrap();
            prop_assert!((alone[0][1] - together[i][1]).abs() < 1e-12);
        }
    }
}
