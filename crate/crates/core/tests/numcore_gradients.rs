use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use txfuse::numcore::gradcheck::{numeric_grad, rel_error};
use txfuse::numcore::{Tape, Tensor, TensorError, Var};

type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces the op output to a scalar with fixed random weights so every
/// output element contributes a distinct cotangent.
fn loss_of(inputs: &[Tensor], build: &Build, weights_seed: u64) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(&t.clone().with_grad())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let n = tape.data(out).len();
    let mut wr = ChaCha8Rng::seed_from_u64(weights_seed);
    let w = tape
        .constant(tape.shape(out).to_vec(), (0..n).map(|_| wr.gen_range(-1.0..1.0)).collect())
        .unwrap();
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod).unwrap();
    let g = tape.backward(loss).unwrap();
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.get(v).map_or(vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    (tape.item(loss), grads)
}

fn check(name: &str, inputs: Vec<Tensor>, build: &Build) {
    let (_, analytic) = loss_of(&inputs, build, 99);
    for k in 0..inputs.len() {
        let numeric = numeric_grad(
            |x| {
                let mut probe = inputs.clone();
                probe[k] = Tensor::new(inputs[k].shape().to_vec(), x.to_vec()).unwrap();
                loss_of(&probe, build, 99).0
            },
            inputs[k].data(),
            1e-5,
        );
        let err = rel_error(&analytic[k], &numeric);
        assert!(err <= 1e-4, "{name}: input {k} rel err {err}");
    }
}

#[test]
fn every_primitive_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..5 {
        let m = rng.gen_range(1..=8);
        let k = rng.gen_range(1..=8);
        let n = rng.gen_range(2..=8);
        let r = &mut rng;
        check("matmul", vec![random(&[m, k], r), random(&[k, n], r)], &|t, v| t.matmul(v[0], v[1]));
        check("matmul_tt", vec![random(&[k, m], r), random(&[n, k], r)], &|t, v| {
            t.matmul_t(v[0], true, v[1], true)
        });
        check("matmul_ta", vec![random(&[k, m], r), random(&[k, n], r)], &|t, v| {
            t.matmul_t(v[0], true, v[1], false)
        });
        check("matmul_tb", vec![random(&[m, k], r), random(&[n, k], r)], &|t, v| {
            t.matmul_t(v[0], false, v[1], true)
        });
        check("add_row", vec![random(&[m, n], r), random(&[n], r)], &|t, v| t.add(v[0], v[1]));
        check("sub_col", vec![random(&[m, n], r), random(&[m, 1], r)], &|t, v| t.sub(v[0], v[1]));
        check("mul", vec![random(&[m, n], r), random(&[m, n], r)], &|t, v| t.mul(v[0], v[1]));
        check("mul_scalar", vec![random(&[m, n], r), random(&[1], r)], &|t, v| t.mul(v[0], v[1]));
        let mut denom = random(&[m, n], r);
        denom.data_mut().iter_mut().for_each(|x| *x = x.signum() * (1.0 + x.abs()));
        check("div", vec![random(&[m, n], r), denom], &|t, v| t.div(v[0], v[1]));
        check("exp", vec![random(&[m, n], r)], &|t, v| t.exp(v[0]));
        let mut pos = random(&[m, n], r);
        pos.data_mut().iter_mut().for_each(|x| *x = 0.5 + x.abs());
        check("log", vec![pos.clone()], &|t, v| t.log(v[0]));
        check("pow", vec![pos], &|t, v| t.pow(v[0], 2.5));
        check("tanh", vec![random(&[m, n], r)], &|t, v| t.tanh(v[0]));
        check("relu", vec![random(&[m, n], r)], &|t, v| t.relu(v[0]));
        check("prelu", vec![random(&[m, n], r), random(&[n], r)], &|t, v| t.prelu(v[0], v[1]));
        check(
            "layer_norm",
            vec![random(&[m, n], r), random(&[n], r), random(&[n], r)],
            &|t, v| t.layer_norm(v[0], v[1], v[2]),
        );
        check("softmax", vec![random(&[m, n], r)], &|t, v| t.softmax_rows(v[0], 0.7));
        check("log_softmax", vec![random(&[m, n], r)], &|t, v| t.log_softmax_rows(v[0]));
        let idx: Vec<usize> = (0..5).map(|_| r.gen_range(0..m)).collect();
        let idx2 = idx.clone();
        check("gather", vec![random(&[m, n], r)], &move |t, v| t.gather_rows(v[0], &idx));
        check("scatter", vec![random(&[5, n], r)], &move |t, v| t.scatter_add_rows(v[0], &idx2, m));
        let picks: Vec<usize> = (0..m).map(|_| r.gen_range(0..n)).collect();
        check("pick", vec![random(&[m, n], r)], &move |t, v| t.pick_per_row(v[0], &picks));
        check("concat_cols", vec![random(&[m, n], r), random(&[m, k], r)], &|t, v| {
            t.concat_cols(&[v[0], v[1]])
        });
        check("concat_rows", vec![random(&[m, n], r), random(&[k, n], r)], &|t, v| {
            t.concat_rows(&[v[0], v[1]])
        });
        check("slice_cols", vec![random(&[m, n], r)], &|t, v| t.slice_cols(v[0], 1, 2));
        check("slice_rows", vec![random(&[m + 1, n], r)], &|t, v| t.slice_rows(v[0], 1, 2));
        check("transpose", vec![random(&[m, n], r)], &|t, v| t.transpose(v[0]));
        check("mean", vec![random(&[m, n], r)], &|t, v| t.mean(v[0]));
        check("col_means", vec![random(&[m, n], r)], &|t, v| t.col_means(v[0]));
        check("row_sums", vec![random(&[m, n], r)], &|t, v| t.row_sums(v[0]));
        check("scale_shift", vec![random(&[m, n], r)], &|t, v| {
            let s = t.scale(v[0], -1.5)?;
            t.add_scalar(s, 0.3)
        });
        check("normalize_rows", vec![random(&[m, n], r)], &|t, v| t.normalize_rows(v[0]));
        check("cosine_rows", vec![random(&[m, n], r), random(&[m, n], r)], &|t, v| {
            t.cosine_rows(v[0], v[1])
        });
        let _ = trial;
    }
}

#[test]
fn weighted_sum_gradient_is_broadcast_vector() {
    // loss = sum(W v) => dL/dW[i][j] = v[j]
    let w = Tensor::matrix(3, 4, (0..12).map(|i| i as f64 * 0.1).collect()).unwrap();
    let v = Tensor::matrix(4, 1, vec![0.5, -1.0, 2.0, 0.25]).unwrap();
    let mut tape = Tape::new();
    let wv = tape.leaf(&w.clone().with_grad());
    let vv = tape.leaf(&v);
    let p = tape.matmul(wv, vv).unwrap();
    let loss = tape.sum(p).unwrap();
    let g = tape.backward(loss).unwrap();
    let analytic = g.get(wv).unwrap().to_vec();
    let numeric = numeric_grad(
        |x| x.chunks(4).map(|row| row.iter().zip(v.data()).map(|(a, b)| a * b).sum::<f64>()).sum(),
        w.data(),
        1e-5,
    );
    assert!(rel_error(&analytic, &numeric) <= 1e-4);
    for row in analytic.chunks(4) {
        assert_eq!(row, v.data());
    }
}

#[test]
fn backward_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random(&[6, 5], &mut rng);
    let b = random(&[5, 4], &mut rng);
    let build: &Build = &|t, v| {
        let p = t.matmul(v[0], v[1])?;
        let s = t.softmax_rows(p, 1.0)?;
        t.tanh(s)
    };
    let (_, g1) = loss_of(&[a.clone(), b.clone()], build, 1);
    let (_, g2) = loss_of(&[a, b], build, 1);
    assert_eq!(g1, g2);
}

#[test]
fn softmax_rows_sum_to_one_and_positive() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let x = random(&[4, 7], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let t = rng.gen_range(0.05..5.0);
        let y = tape.softmax_rows(xv, t).unwrap();
        for row in tape.data(y).chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert!(row.iter().all(|&p| p > 0.0));
        }
    }
}
