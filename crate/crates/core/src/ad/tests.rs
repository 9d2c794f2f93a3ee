use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

/// Backward vs central differences for a scalar function of one input tensor.
fn check_op<F>(x: &Tensor, build: F, tol: f64)
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>,
{
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let root = build(&tape, xv);
    let grads = tape.backward(root).unwrap();
    let analytic = grads.wrt(xv);
    let numeric = finite_diff_grad(
        |flat| {
            let t = Tape::new();
            let v = t.leaf(Tensor::from_vec(x.rows(), x.cols(), flat.to_vec()).unwrap());
            build(&t, v).item()
        },
        x.as_slice(),
        1e-5,
    );
    for (i, (a, n)) in analytic.as_slice().iter().zip(&numeric).enumerate() {
        let err = grad_error(*a, *n, 1e-3);
        let limit = if a.abs().max(n.abs()) < 1e-3 { 1e-7 } else { tol };
        assert!(err < limit, "coord {i}: analytic {a} numeric {n} err {err}");
    }
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect(),
    )
    .unwrap()
}

fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let b = random(rng, n, n);
    let mut a = b.matmul(&b.transpose()).unwrap();
    for i in 0..n {
        let v = a.get(i, i) + 1e-3 + 0.5;
        a.set(i, i, v);
    }
    a
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let b = random(&mut rng, 3, 3);
    let a = random(&mut rng, 3, 3);
    check_op(&a, |t, a| a.matmul(&t.constant(b.clone())).unwrap().sum(), 1e-6);
    check_op(
        &b,
        |t, b| t.constant(a.clone()).matmul(&b).unwrap().square().sum(),
        1e-6,
    );
}

#[test]
fn cholesky_values_and_gradient() {
    let a = Tensor::from_vec(2, 2, vec![4.0, 2.0, 2.0, 3.0]).unwrap();
    let tape = Tape::new();
    let l = tape.leaf(a).cholesky().unwrap().value();
    // Jitter 1e-6·mean(diag) perturbs the hand values slightly.
    assert!((l.get(0, 0) - 2.0).abs() < 1e-5);
    assert!((l.get(1, 0) - 1.0).abs() < 1e-5);
    assert!((l.get(1, 1) - 2f64.sqrt()).abs() < 1e-5);
    assert_eq!(l.get(0, 1), 0.0);

    let tape = Tape::new();
    let l = tape.leaf(Tensor::eye(3)).cholesky().unwrap().value();
    assert!(l.max_abs_diff(&Tensor::eye(3)) < 1e-6);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..5 {
        let a = random_spd(&mut rng, 4);
        check_op(&a, |_, a| a.cholesky().unwrap().sum(), 1e-4);
        let w = random(&mut rng, 4, 4);
        check_op(
            &a,
            |t, a| a.cholesky().unwrap().mul(&t.constant(w.clone())).unwrap().sum(),
            1e-4,
        );
    }
}

#[test]
fn tri_solve_values_and_gradient() {
    let tape = Tape::new();
    let l = tape.leaf(Tensor::from_vec(2, 2, vec![2.0, 0.0, 1.0, 1.0]).unwrap());
    let b = tape.leaf(Tensor::column(vec![2.0, 2.0]));
    assert_eq!(l.tri_solve(&b, Side::Lower).unwrap().value().as_slice(), &[1.0, 1.0]);
    let id = tape.leaf(Tensor::eye(2));
    assert_eq!(*id.tri_solve(&b, Side::LowerTransposed).unwrap().value(), *b.value());

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut lmat = random(&mut rng, 4, 4);
    for i in 0..4 {
        lmat.set(i, i, 2.0 + i as f64 * 0.3);
        for j in i + 1..4 {
            lmat.set(i, j, 0.0);
        }
    }
    let rhs = random(&mut rng, 4, 3);
    let w = random(&mut rng, 4, 3);
    for side in [Side::Lower, Side::LowerTransposed] {
        check_op(
            &lmat,
            |t, l| {
                l.tri_solve(&t.constant(rhs.clone()), side)
                    .unwrap()
                    .mul(&t.constant(w.clone()))
                    .unwrap()
                    .sum()
            },
            1e-4,
        );
        check_op(
            &rhs,
            |t, b| t.constant(lmat.clone()).tri_solve(&b, side).unwrap().square().sum(),
            1e-4,
        );
    }
}

#[test]
fn elementwise_values_and_gradients() {
    let tape = Tape::new();
    let zero = tape.scalar(0.0);
    let a = zero.asinh();
    assert_eq!(a.item(), 0.0);
    let g = tape.backward(a).unwrap();
    assert_eq!(g.wrt(zero).item(), 1.0);
    assert!((tape.scalar(0.0).softplus().item() - std::f64::consts::LN_2).abs() < 1e-15);
    assert!(matches!(
        tape.scalar(-1.0).log(),
        Err(AdError::Domain { op: "log", .. })
    ));

    let grid = Tensor::column((0..61).map(|i| -3.0 + 0.1 * i as f64).collect());
    check_op(&grid, |_, x| x.tanh().sum(), 1e-6);
    check_op(&grid, |_, x| x.asinh().sum(), 1e-6);
    check_op(&grid, |_, x| x.softplus().sum(), 1e-6);
    check_op(&grid, |_, x| x.exp().sum(), 1e-6);
    check_op(&grid, |_, x| x.square().neg().sum(), 1e-6);
    let pos = grid.map(|v| v + 3.5);
    check_op(&pos, |_, x| x.log().unwrap().sum(), 1e-6);
    check_op(&pos, |_, x| x.sqrt().unwrap().sum(), 1e-6);
}

#[test]
fn binary_ops_with_scalar_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, 3, 2);
    let other = random(&mut rng, 3, 2).map(|v| v.abs() + 0.5);
    for k in 0..4 {
        let o = other.clone();
        check_op(
            &x,
            move |t, x| {
                let y = t.constant(o.clone());
                match k {
                    0 => x.add(&y),
                    1 => x.sub(&y),
                    2 => x.mul(&y),
                    _ => y.div(&x.square().add_scalar(1.0)),
                }
                .unwrap()
                .square()
                .sum()
            },
            1e-6,
        );
    }
    // scalar operand on either side
    let s = Tensor::scalar(0.7);
    check_op(
        &s,
        |t, s| {
            let m = t.constant(Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
            m.mul(&s)
                .unwrap()
                .add(&s)
                .unwrap()
                .div(&s.exp())
                .unwrap()
                .square()
                .sum()
        },
        1e-6,
    );
    let tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(2, 3));
    let b = tape.leaf(Tensor::zeros(3, 2));
    assert!(matches!(a.add(&b), Err(AdError::Shape { .. })));
}

#[test]
fn logdet_from_chol_values_and_gradient() {
    let tape = Tape::new();
    assert_eq!(tape.leaf(Tensor::eye(3)).logdet_from_chol().unwrap().item(), 0.0);
    let l = Tensor::from_vec(2, 2, vec![2.0, 0.0, 0.0, 3.0]).unwrap();
    let v = tape.leaf(l).logdet_from_chol().unwrap().item();
    assert!((v - 36f64.ln()).abs() < 1e-14);
    let bad = Tensor::from_vec(2, 2, vec![2.0, 0.0, 0.0, -3.0]).unwrap();
    assert!(tape.leaf(bad).logdet_from_chol().is_err());
    let l = Tensor::from_vec(3, 3, vec![1.5, 0.0, 0.0, 0.3, 0.8, 0.0, -0.2, 0.4, 2.1]).unwrap();
    check_op(&l, |_, l| l.logdet_from_chol().unwrap(), 1e-6);
}

#[test]
fn structural_ops_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, 4, 3);
    let w = random(&mut rng, 8, 3);
    check_op(
        &x,
        |t, x| {
            let tiled = x.tile_rows(2);
            tiled.mul(&t.constant(w.clone())).unwrap().sum()
        },
        1e-6,
    );
    check_op(
        &x,
        |_, x| {
            let a = x.slice(1, 2, 0, 2).unwrap();
            let b = x.slice(0, 2, 1, 2).unwrap();
            let r = Var::concat_rows(&[a, b, a]).unwrap();
            let c = Var::concat_cols(&[r, r.square()]).unwrap();
            c.square().sum_rows().sum_cols().sum()
        },
        1e-6,
    );
    check_op(&x, |_, x| x.t().matmul(&x).unwrap().diag().unwrap().sum(), 1e-6);
    let sq = random(&mut rng, 3, 3);
    check_op(&sq, |_, x| x.tril().square().sum(), 1e-6);
    let y = random(&mut rng, 5, 3);
    check_op(
        &x,
        |t, x| x.sq_dist(&t.constant(y.clone())).unwrap().neg().exp().sum(),
        1e-6,
    );
    check_op(
        &y,
        |t, y| t.constant(x.clone()).sq_dist(&y).unwrap().sqrt().unwrap().sum(),
        1e-5,
    );
}

#[test]
fn clamp_blocks_gradient_below_floor() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::column(vec![-1.0, 2.0]));
    let y = x.clamp_min(1e-8).sum();
    assert!((y.item() - (2.0 + 1e-8)).abs() < 1e-15);
    let g = tape.backward(y).unwrap();
    assert_eq!(g.wrt(x).as_slice(), &[0.0, 1.0]);
}

#[test]
fn backward_contract() {
    let tape = Tape::new();
    let p = Param::from_raw("p", Transform::Identity, Tensor::full(2, 2, 0.3));
    let pv = p.bind(&tape);
    let c = tape.scalar(4.0);
    let g = tape.backward(c).unwrap();
    assert!(g.get(pv).is_none());
    assert_eq!(g.wrt(pv), Tensor::zeros(2, 2));

    let s = pv.sum();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(pv), Tensor::full(2, 2, 1.0));
    // repeated backward from the same root is stable
    let g2 = tape.backward(s).unwrap();
    assert_eq!(g2.wrt(pv), g.wrt(pv));

    assert!(matches!(tape.backward(pv), Err(AdError::Contract(_))));
    assert_eq!(tape.param_names(), vec!["p".to_string()]);
    assert!(tape.dump().contains("sum(#"));
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = random_spd(&mut rng, 6);
    let run = || {
        let t = Tape::new();
        let l = t.leaf(a.clone()).cholesky().unwrap();
        let x = l.tri_solve(&t.leaf(a.clone()), Side::Lower).unwrap();
        (*x.value()).clone()
    };
    assert_eq!(run().as_slice(), run().as_slice());
}

fn spd_strategy() -> impl Strategy<Value = Tensor> {
    (1usize..=16, any::<u64>()).prop_map(|(n, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = random(&mut rng, n, n);
        let mut a = b.matmul(&b.transpose()).unwrap();
        for i in 0..n {
            let v = a.get(i, i) + 1e-3;
            a.set(i, i, v);
        }
        a
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cholesky_reconstructs_input(a in spd_strategy()) {
        let mut l = a.clone();
        linalg::cholesky_in_place(&mut l).unwrap();
        let back = l.matmul(&l.transpose()).unwrap();
        prop_assert!(back.max_abs_diff(&a) < 1e-10);
    }

    #[test]
    fn tri_solve_recovers_rhs(a in spd_strategy(), seed in any::<u64>()) {
        let mut l = a.clone();
        linalg::cholesky_in_place(&mut l).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, a.rows(), 3);
        let b = l.matmul(&x).unwrap();
        let got = linalg::solve_lower(&l, &b).unwrap();
        prop_assert!(got.max_abs_diff(&x) < 1e-10);
    }

    #[test]
    fn elementwise_gradients_at_random_points(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, 20, 1);
        check_op(&x, |_, x| x.tanh().add(&x.asinh()).unwrap().mul(&x.softplus()).unwrap().sum(), 1e-4);
    }
}
