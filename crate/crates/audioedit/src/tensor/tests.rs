use super::*;
use crate::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor {
    Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Central finite differences against the tape gradient.
/// `f` must build its output from the given inputs only.
fn fd_check(f: &dyn Fn(&[Tensor]) -> Tensor, inputs: &[Tensor], tol: f64) {
    let tape = Tape::new();
    let tracked: Vec<Tensor> = inputs.iter().map(|t| tape.leaf(t).unwrap()).collect();
    let loss = f(&tracked);
    let grads = loss.backward().unwrap();

    let h = 1e-5;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(&tracked[i]).unwrap();
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let mut dp = input.data().to_vec();
            dp[j] += h;
            plus[i] = Tensor::new(input.shape().to_vec(), dp).unwrap();
            let mut dm = input.data().to_vec();
            dm[j] -= h;
            minus[i] = Tensor::new(input.shape().to_vec(), dm).unwrap();
            let numeric = (f(&plus).value().unwrap() - f(&minus).value().unwrap()) / (2.0 * h);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / numeric.abs().max(1e-3);
            assert!(
                err <= tol,
                "input {} coord {}: analytic {} vs numeric {} (err {})",
                i,
                j,
                a,
                numeric,
                err
            );
        }
    }
}

#[test]
fn matmul_identity_case() {
    let i = t2(2, 2, &[1.0, 0.0, 0.0, 1.0]);
    let m = t2(2, 2, &[2.0, 3.0, 4.0, 5.0]);
    assert_eq!(i.matmul(&m).unwrap(), m);
}

#[test]
fn row_softmax_symmetry() {
    let x = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
    let s = x.row_softmax().unwrap();
    assert_eq!(s.data(), &[0.5, 0.5]);
}

#[test]
fn squared_frobenius_direct() {
    let x = t2(1, 2, &[3.0, 4.0]);
    assert_eq!(x.squared_frobenius_norm().unwrap().value().unwrap(), 25.0);
}

#[test]
fn grad_of_square_is_two_x() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::scalar(3.0)).unwrap();
    let y = x.mul(&x).unwrap();
    let grads = y.backward().unwrap();
    assert_eq!(grads.wrt(&x).unwrap().value().unwrap(), 6.0);
}

#[test]
fn grad_of_sum_matmul_identity_is_ones() {
    let tape = Tape::new();
    let a = tape.leaf(&t2(2, 2, &[1.0, 2.0, 3.0, 4.0])).unwrap();
    let b = t2(2, 2, &[1.0, 0.0, 0.0, 1.0]);
    let loss = a.matmul(&b).unwrap().sum().unwrap();
    let grads = loss.backward().unwrap();
    assert_eq!(grads.wrt(&a).unwrap().data(), &[1.0; 4]);
}

#[test]
fn untouched_input_gets_zero_gradient() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::scalar(1.0)).unwrap();
    let y = tape.leaf(&Tensor::scalar(2.0)).unwrap();
    let loss = x.mul(&x).unwrap();
    let grads = loss.backward().unwrap();
    assert_eq!(grads.wrt(&y).unwrap().value().unwrap(), 0.0);
}

#[test]
fn random_five_op_graph_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let a = rand_tensor(&mut rng, vec![3, 4], -1.0, 1.0);
        let b = rand_tensor(&mut rng, vec![4, 3], -1.0, 1.0);
        let c = rand_tensor(&mut rng, vec![3, 3], -1.0, 1.0);
        fd_check(
            &|xs: &[Tensor]| {
                let m = xs[0].matmul(&xs[1]).unwrap();
                let r = m.add(&xs[2]).unwrap().relu().unwrap();
                let s = r.row_softmax().unwrap();
                s.mul(&xs[2]).unwrap().sum().unwrap()
            },
            &[a, b, c],
            1e-5,
        );
    }
}

#[test]
fn per_op_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    type Case = (&'static str, Box<dyn Fn(&[Tensor]) -> Tensor>, usize);
    let cases: Vec<Case> = vec![
        ("add", Box::new(|x| x[0].add(&x[1]).unwrap().sum().unwrap()), 2),
        ("sub", Box::new(|x| x[0].sub(&x[1]).unwrap().sum().unwrap()), 2),
        (
            "mul",
            Box::new(|x| x[0].mul(&x[1]).unwrap().sum().unwrap()),
            2,
        ),
        ("scale", Box::new(|x| x[0].scale(1.7).unwrap().sum().unwrap()), 1),
        (
            "matmul",
            Box::new(|x| {
                x[0].slice(0, 2)
                    .unwrap()
                    .matmul(&x[1].transpose().unwrap())
                    .unwrap()
                    .sum()
                    .unwrap()
            }),
            2,
        ),
        ("exp", Box::new(|x| x[0].exp().unwrap().sum().unwrap()), 1),
        (
            "sqrt",
            Box::new(|x| {
                x[0].mul(&x[0])
                    .unwrap()
                    .add(&Tensor::new(x[0].shape().to_vec(), vec![1.0; x[0].len()]).unwrap())
                    .unwrap()
                    .sqrt()
                    .unwrap()
                    .sum()
                    .unwrap()
            }),
            1,
        ),
        ("mean", Box::new(|x| x[0].mean().unwrap()), 1),
        (
            "row_softmax",
            Box::new(|x| {
                x[0].row_softmax()
                    .unwrap()
                    .mul(&x[1])
                    .unwrap()
                    .sum()
                    .unwrap()
            }),
            2,
        ),
        (
            "relu",
            Box::new(|x| x[0].relu().unwrap().squared_frobenius_norm().unwrap()),
            1,
        ),
        (
            "reshape",
            Box::new(|x| {
                x[0].reshape(vec![12])
                    .unwrap()
                    .squared_frobenius_norm()
                    .unwrap()
            }),
            1,
        ),
        (
            "slice_concat",
            Box::new(|x| {
                let top = x[0].slice(0, 1).unwrap();
                let bottom = x[0].slice(1, 3).unwrap();
                Tensor::concat(&[&bottom, &top])
                    .unwrap()
                    .mul(&x[1])
                    .unwrap()
                    .sum()
                    .unwrap()
            }),
            2,
        ),
        (
            "squared_frobenius_norm",
            Box::new(|x| x[0].squared_frobenius_norm().unwrap()),
            1,
        ),
    ];
    for (name, f, arity) in &cases {
        for _ in 0..10 {
            let inputs: Vec<Tensor> = (0..*arity)
                .map(|_| rand_tensor(&mut rng, vec![3, 4], 0.1, 1.5))
                .collect();
            let _ = name;
            fd_check(f.as_ref(), &inputs, 1e-5);
        }
    }
}

#[test]
fn backward_is_once_per_tape() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::scalar(2.0)).unwrap();
    let y = x.mul(&x).unwrap();
    y.backward().unwrap();
    assert!(matches!(y.backward(), Err(Error::TapeConsumed)));
    assert!(matches!(x.mul(&x), Err(Error::TapeConsumed)));
}

#[test]
fn detached_loss_rejected() {
    let x = Tensor::scalar(2.0);
    let y = x.mul(&x).unwrap();
    assert!(matches!(y.backward(), Err(Error::DetachedLoss)));
}

#[test]
fn non_scalar_loss_rejected() {
    let tape = Tape::new();
    let x = tape.leaf(&t2(2, 2, &[1.0; 4])).unwrap();
    let y = x.add(&x).unwrap();
    assert!(matches!(y.backward(), Err(Error::NotScalar(_))));
}

#[test]
fn cross_tape_rejected() {
    let t1 = Tape::new();
    let t2_ = Tape::new();
    let a = t1.leaf(&Tensor::scalar(1.0)).unwrap();
    let b = t2_.leaf(&Tensor::scalar(2.0)).unwrap();
    assert!(matches!(a.add(&b), Err(Error::CrossTape)));
}

#[test]
fn shape_mismatch_rejected() {
    let a = t2(2, 2, &[1.0; 4]);
    let b = t2(2, 3, &[1.0; 6]);
    assert!(matches!(a.add(&b), Err(Error::ShapeMismatch { .. })));
    assert!(matches!(
        b.matmul(&b),
        Err(Error::ShapeMismatch { .. })
    ));
}

#[test]
fn non_finite_result_rejected() {
    let a = t2(1, 1, &[1e308]);
    assert!(matches!(a.exp(), Err(Error::NonFinite { .. })));
    assert!(matches!(
        a.scale(1e308),
        Err(Error::NonFinite { .. })
    ));
}

#[test]
fn ops_are_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_tensor(&mut rng, vec![8, 8], -10.0, 10.0);
    let b = rand_tensor(&mut rng, vec![8, 8], -10.0, 10.0);
    let run = || {
        a.matmul(&b)
            .unwrap()
            .row_softmax()
            .unwrap()
            .mul(&b)
            .unwrap()
            .sum()
            .unwrap()
            .value()
            .unwrap()
    };
    assert_eq!(run().to_bits(), run().to_bits());
}

// --- SVD and PSD sqrt ---

fn reconstruct(u: &Tensor, sigma: &[f64], vt: &Tensor) -> Tensor {
    let k = sigma.len();
    let mut us = u.detached();
    let rows = us.shape()[0];
    let mut data = us.data().to_vec();
    for i in 0..rows {
        for j in 0..k {
            data[i * k + j] *= sigma[j];
        }
    }
    us = Tensor::new(vec![rows, k], data).unwrap();
    us.matmul(&vt.transpose().unwrap()).unwrap()
}

fn frob_dist(a: &Tensor, b: &Tensor) -> f64 {
    a.sub(b)
        .unwrap()
        .squared_frobenius_norm()
        .unwrap()
        .value()
        .unwrap()
        .sqrt()
}

#[test]
fn svd_diagonal_matrix() {
    let m = t2(2, 2, &[3.0, 0.0, 0.0, 1.0]);
    let (u, sigma, vt) = svd(&m).unwrap();
    assert!((sigma[0] - 3.0).abs() < 1e-12);
    assert!((sigma[1] - 1.0).abs() < 1e-12);
    for j in 0..2 {
        assert!((u.at2(j, j).abs() - 1.0).abs() < 1e-12);
        assert!((vt.at2(j, j).abs() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn svd_rank_one() {
    let u_vec = [1.0, 2.0, -1.0];
    let v_vec = [0.5, -1.5, 2.0, 1.0];
    let mut data = vec![0.0; 12];
    for i in 0..3 {
        for j in 0..4 {
            data[i * 4 + j] = u_vec[i] * v_vec[j];
        }
    }
    let m = t2(3, 4, &data);
    let (_, sigma, _) = svd(&m).unwrap();
    let nu: f64 = u_vec.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv: f64 = v_vec.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!((sigma[0] - nu * nv).abs() < 1e-10);
    for s in &sigma[1..] {
        assert!(*s <= 1e-10);
    }
}

#[test]
fn svd_multiply_back_random() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let m = rand_tensor(&mut rng, vec![4, 6], -10.0, 10.0);
    let (u, sigma, vt) = svd(&m).unwrap();
    assert!(frob_dist(&reconstruct(&u, &sigma, &vt), &m) <= 1e-10);
}

#[test]
fn svd_invariants_random_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..25 {
        let rows = rng.gen_range(1..=16);
        let cols = rng.gen_range(1..=96);
        let m = rand_tensor(&mut rng, vec![rows, cols], -10.0, 10.0);
        let (u, sigma, vt) = svd(&m).unwrap();
        for w in sigma.windows(2) {
            assert!(w[0] >= w[1] - 1e-9);
        }
        assert!(*sigma.last().unwrap() >= -1e-12);
        // Orthonormal columns.
        for q in [&u, &vt] {
            let gram = q.transpose().unwrap().matmul(q).unwrap();
            let k = gram.shape()[0];
            for i in 0..k {
                for j in 0..k {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!(
                        (gram.at2(i, j) - want).abs() < 1e-8,
                        "gram[{},{}]={} for {}x{}",
                        i,
                        j,
                        gram.at2(i, j),
                        rows,
                        cols
                    );
                }
            }
        }
        let err = frob_dist(&reconstruct(&u, &sigma, &vt), &m);
        assert!(err <= 1e-8, "reconstruction error {} for {}x{}", err, rows, cols);
    }
}

#[test]
fn svd_rejects_non_finite() {
    assert!(Tensor::new(vec![2, 2], vec![1.0, f64::NAN, 0.0, 1.0]).is_err());
}

#[test]
fn psd_sqrt_identity_and_diagonal() {
    let i = t2(2, 2, &[1.0, 0.0, 0.0, 1.0]);
    assert!(frob_dist(&psd_sqrt(&i).unwrap(), &i) < 1e-12);
    let d = t2(2, 2, &[4.0, 0.0, 0.0, 9.0]);
    let want = t2(2, 2, &[2.0, 0.0, 0.0, 3.0]);
    assert!(frob_dist(&psd_sqrt(&d).unwrap(), &want) < 1e-10);
}

#[test]
fn psd_sqrt_multiply_back() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let a = rand_tensor(&mut rng, vec![6, 6], -2.0, 2.0);
    let s = a.transpose().unwrap().matmul(&a).unwrap();
    let r = psd_sqrt(&s).unwrap();
    assert!(frob_dist(&r.matmul(&r).unwrap(), &s) <= 1e-6);
    // Result is symmetric.
    assert!(frob_dist(&r.transpose().unwrap(), &r) < 1e-10);
}

#[test]
fn psd_sqrt_rejects_negative_eigenvalue() {
    let m = t2(2, 2, &[1.0, 0.0, 0.0, -0.5]);
    assert!(matches!(
        psd_sqrt(&m),
        Err(Error::NegativeEigenvalue(_))
    ));
}

#[test]
fn psd_sqrt_rejects_asymmetric() {
    let m = t2(2, 2, &[1.0, 0.5, 0.0, 1.0]);
    assert!(matches!(psd_sqrt(&m), Err(Error::NotSymmetric(_))));
}

#[test]
fn tensor_io_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let t = rand_tensor(&mut rng, vec![3, 5, 2], -10.0, 10.0);
    let mut buf = Vec::new();
    write_tensor(&mut buf, &t).unwrap();
    let back = read_tensor(&mut buf.as_slice()).unwrap();
    assert_eq!(back, t);

    let scalar = Tensor::scalar(1.25);
    let mut buf = Vec::new();
    write_tensor(&mut buf, &scalar).unwrap();
    assert_eq!(read_tensor(&mut buf.as_slice()).unwrap(), scalar);
}

#[test]
fn tensor_io_rejects_bad_magic() {
    let buf = b"XXXX\x00\x00\x00\x00".to_vec();
    assert!(matches!(
        read_tensor(&mut buf.as_slice()),
        Err(Error::Format(_))
    ));
}
