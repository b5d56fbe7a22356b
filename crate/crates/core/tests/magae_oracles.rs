// Oracles index several arrays in lockstep.
#![allow(clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use txfuse::labor::{build_batch_adjacency, clustered_graph, sample_block, Neighborhoods, SamplerConfig, SamplerKind};
use txfuse::magae::{pretrain, sce_loss, Magae, MagaeConfig, NodeMaskPlan};
use txfuse::numcore::gradcheck::{numeric_grad, rel_error};
use txfuse::numcore::{Tape, Tensor};

fn feats(n: usize, f: usize, seed: u64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(n, f, (0..n * f).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// 5-node weighted fixture; `lists[v]` are in-neighbors of `v`.
fn fixture() -> (Neighborhoods, Vec<Vec<f64>>) {
    let lists = vec![
        vec![(1, 1.0), (2, 0.5)],
        vec![(0, 0.25)],
        vec![(0, 1.0), (1, 0.5), (3, 0.75)],
        vec![],
        vec![(3, 1.0), (2, 0.5)],
    ];
    let mut dense = vec![vec![0.0; 5]; 5];
    for (v, l) in lists.iter().enumerate() {
        for &(u, w) in l {
            dense[v][u] = w;
        }
    }
    (Neighborhoods::from_lists(lists), dense)
}

fn param(m: &Magae, name: &str) -> Tensor {
    m.params.get(m.params.id(name).unwrap()).clone()
}

/// `act(((I + A) X / (1 + rowsum A)) W + b)` with plain loops.
fn dense_layer(a: &[Vec<f64>], x: &[Vec<f64>], w: &Tensor, b: &Tensor, alpha: Option<&Tensor>) -> Vec<Vec<f64>> {
    let n = a.len();
    (0..n)
        .map(|v| {
            let norm = 1.0 + a[v].iter().sum::<f64>();
            let agg: Vec<f64> = (0..x[0].len())
                .map(|c| (x[v][c] + (0..n).map(|u| a[v][u] * x[u][c]).sum::<f64>()) / norm)
                .collect();
            (0..w.cols())
                .map(|j| {
                    let y = agg.iter().enumerate().map(|(i, s)| s * w.get(i, j)).sum::<f64>() + b.data()[j];
                    match alpha {
                        Some(al) if y < 0.0 => y * al.data()[j],
                        _ => y,
                    }
                })
                .collect()
        })
        .collect()
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

#[test]
fn full_neighborhood_block_matches_dense_encoder_and_decoder() {
    let (nb, a) = fixture();
    let mut m = Magae::new(4, 6, 11);
    // non-trivial mask tokens and PReLU slopes
    let mut r = ChaCha8Rng::seed_from_u64(2);
    for name in ["dmask", "enc0.alpha", "enc1.alpha", "dec.b", "enc0.b"] {
        let id = m.params.id(name).unwrap();
        m.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = r.gen_range(-0.5..0.5));
    }
    m.trained = true;
    let x = feats(5, 4, 3);
    let seeds: Vec<usize> = (0..5).collect();
    let cfg = SamplerConfig { fanouts: vec![10, 10, 10], ..Default::default() };
    let block = sample_block(&nb, &seeds, &cfg, 0, 0).unwrap();
    let adj = build_batch_adjacency(&block, &nb, true).unwrap();
    assert_eq!(adj.nodes, seeds);

    let h1 = dense_layer(&a, &rows(&x), &param(&m, "enc0.w"), &param(&m, "enc0.b"), Some(&param(&m, "enc0.alpha")));
    let h2 = dense_layer(&a, &h1, &param(&m, "enc1.w"), &param(&m, "enc1.b"), Some(&param(&m, "enc1.alpha")));

    let mut tape = Tape::new();
    let bound = m.params.bind(&mut tape, false);
    let xv = tape.leaf(&x);
    let h = m.encode_block(&mut tape, &bound, &adj, xv, 0).unwrap();
    let full = m.encode_full(&nb, &x).unwrap();
    for v in 0..5 {
        for c in 0..6 {
            let d = tape.data(h)[v * 6 + c];
            assert!((d - h2[v][c]).abs() < 1e-12);
            assert!((full.get(v, c) - h2[v][c]).abs() < 1e-12);
        }
    }

    let plan = NodeMaskPlan { masked: vec![1, 4], ratio: 0.4 };
    let hm = m.remask(&mut tape, &bound, h, &plan).unwrap();
    let z = m.decode_block(&mut tape, &bound, &adj.hops[0], hm).unwrap();
    let dm = param(&m, "dmask");
    let remasked: Vec<Vec<f64>> = (0..5).map(|v| if plan.masked.contains(&v) { dm.data().to_vec() } else { h2[v].clone() }).collect();
    assert_eq!(&tape.data(hm)[6..12], dm.data());
    let zd = dense_layer(&a, &remasked, &param(&m, "dec.w"), &param(&m, "dec.b"), None);
    for v in 0..5 {
        for c in 0..4 {
            assert!((tape.data(z)[v * 4 + c] - zd[v][c]).abs() < 1e-12);
        }
    }
}

#[test]
fn sampled_encoder_equals_dense_when_fanout_covers_degree() {
    let nb = clustered_graph(60, 3, 8, 4);
    let mut m = Magae::new(5, 7, 2);
    m.trained = true;
    let x = feats(60, 5, 9);
    let dense = m.encode_full(&nb, &x).unwrap();
    for kind in [SamplerKind::Labor, SamplerKind::Ns] {
        let cfg = SamplerConfig { kind, fanouts: vec![8, 8], ..Default::default() };
        let seeds = vec![3, 17, 44, 59];
        let block = sample_block(&nb, &seeds, &cfg, 0, 0).unwrap();
        let adj = build_batch_adjacency(&block, &nb, true).unwrap();
        let xb = Tensor::from_rows(&adj.nodes.iter().map(|&g| x.row(g).to_vec()).collect::<Vec<_>>()).unwrap();
        let mut tape = Tape::new();
        let bound = m.params.bind(&mut tape, false);
        let xv = tape.leaf(&xb);
        let h = m.encode_block(&mut tape, &bound, &adj, xv, 0).unwrap();
        for (i, &s) in seeds.iter().enumerate() {
            for c in 0..7 {
                assert!((tape.data(h)[i * 7 + c] - dense.get(s, c)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn loss_ignores_unmasked_targets() {
    let (nb, _) = fixture();
    let m = Magae::new(4, 6, 1);
    let x = feats(5, 4, 5);
    let cfg = SamplerConfig { fanouts: vec![10, 10, 10], ..Default::default() };
    let block = sample_block(&nb, &[0, 1, 2, 3, 4], &cfg, 0, 0).unwrap();
    let adj = build_batch_adjacency(&block, &nb, true).unwrap();
    let plan = NodeMaskPlan { masked: vec![0, 2], ratio: 0.4 };
    let loss_with = |target: &Tensor| {
        let mut tape = Tape::new();
        let bound = m.params.bind(&mut tape, false);
        let xv = tape.leaf(&x);
        let xm = m.mask_input(&mut tape, &bound, xv, &plan).unwrap();
        let h = m.encode_block(&mut tape, &bound, &adj, xm, 1).unwrap();
        let hm = m.remask(&mut tape, &bound, h, &plan).unwrap();
        let z = m.decode_block(&mut tape, &bound, &adj.hops[0], hm).unwrap();
        let t = tape.leaf(target);
        let (l, _) = sce_loss(&mut tape, t, z, &plan.masked, 2.0).unwrap();
        tape.item(l)
    };
    let base = loss_with(&x);
    let mut perturbed = x.clone();
    for v in [1usize, 3, 4] {
        perturbed.data_mut()[v * 4..(v + 1) * 4].iter_mut().for_each(|e| *e += 3.7);
    }
    assert_eq!(base.to_bits(), loss_with(&perturbed).to_bits());
    perturbed.data_mut()[0] += 1.0;
    assert_ne!(base, loss_with(&perturbed));
}

#[test]
fn sce_gradient_matches_finite_differences() {
    let mut r = ChaCha8Rng::seed_from_u64(8);
    for trial in 0..20 {
        let (n, f) = (r.gen_range(2..=8), r.gen_range(2..=8));
        let gamma = [1.0, 2.0, 3.0, 2.5][trial % 4];
        let x = feats(n, f, trial as u64);
        let z = feats(n, f, 100 + trial as u64);
        let masked: Vec<usize> = (0..n).filter(|i| i % 2 == 0).collect();
        let f_loss = |zd: &[f64]| {
            let mut tape = Tape::new();
            let xv = tape.leaf(&x);
            let zv = tape.leaf(&Tensor::matrix(n, f, zd.to_vec()).unwrap());
            let (l, _) = sce_loss(&mut tape, xv, zv, &masked, gamma).unwrap();
            tape.item(l)
        };
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let zv = tape.leaf(&z.clone().with_grad());
        let (l, _) = sce_loss(&mut tape, xv, zv, &masked, gamma).unwrap();
        let g = tape.backward(l).unwrap();
        let numeric = numeric_grad(f_loss, z.data(), 1e-6);
        let err = rel_error(g.get(zv).unwrap(), &numeric);
        assert!(err <= 1e-4, "trial {trial}: {err}");
    }
}

#[test]
fn embeddings_are_permutation_equivariant() {
    let nb = clustered_graph(30, 3, 5, 7);
    let x = feats(30, 4, 1);
    let mut m = Magae::new(4, 5, 3);
    m.trained = true;
    let perm: Vec<usize> = (0..30).map(|i| (i * 7 + 3) % 30).collect();
    // node i moves to perm[i]
    let mut lists = vec![Vec::new(); 30];
    for v in 0..30 {
        lists[perm[v]] = nb.neighbors(v).iter().zip(nb.weights(v)).map(|(&u, &w)| (perm[u], w)).collect();
    }
    let nb2 = Neighborhoods::from_lists(lists);
    let mut x2 = vec![0.0; 120];
    for v in 0..30 {
        x2[perm[v] * 4..perm[v] * 4 + 4].copy_from_slice(x.row(v));
    }
    let x2 = Tensor::matrix(30, 4, x2).unwrap();
    let a = m.encode_full(&nb, &x).unwrap();
    let b = m.encode_full(&nb2, &x2).unwrap();
    for v in 0..30 {
        for c in 0..5 {
            assert!((a.get(v, c) - b.get(perm[v], c)).abs() < 1e-12);
        }
    }
}

#[test]
fn training_reduces_sce_and_is_deterministic() {
    let nb = clustered_graph(500, 10, 8, 3);
    // community-dependent features so neighbors carry signal
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let centers: Vec<Vec<f64>> = (0..10).map(|_| (0..22).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
    let data: Vec<f64> = (0..500).flat_map(|v| centers[v / 50].iter().map(|c| c + 0.3 * r.gen_range(-1.0..1.0)).collect::<Vec<_>>()).collect();
    let x = Tensor::matrix(500, 22, data).unwrap();
    let cfg = MagaeConfig { d_h: 16, epochs: 30, lr: 5e-3, seed: 1, ..Default::default() };
    let a = pretrain(&nb, &x, &cfg).unwrap();
    assert!(a.losses.last().unwrap() < &a.losses[0], "{:?}", a.losses);
    let b = pretrain(&nb, &x, &cfg).unwrap();
    assert_eq!(
        txfuse::numcore::checkpoint::checksum(&a.model.params),
        txfuse::numcore::checkpoint::checksum(&b.model.params)
    );
}
