use proptest::prelude::*;

use super::*;

fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(rows, cols, data)
}

#[test]
fn add_elementwise() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(t(1, 2, &[1.0, 2.0]));
    let b = tape.constant(t(1, 2, &[3.0, 4.0]));
    let c = tape.add(a, b).unwrap();
    assert_eq!(tape.value(c), &[4.0, 6.0]);
}

#[test]
fn matmul_identity_is_noop() {
    let mut tape = Tape::<f64>::new();
    let eye = tape.constant(t(3, 3, &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
    let r = [0.3, -0.2, 0.9, 0.1, 0.7, -0.4, 0.5, 0.6, 0.2];
    let m = tape.constant(t(3, 3, &r));
    let p = tape.matmul(eye, m).unwrap();
    assert_eq!(tape.value(p), &r);
    let eye9 = tape.constant(t(1, 9, &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
    let m9 = tape.constant(t(1, 9, &r));
    let q = tape.bmm3(eye9, m9, false, false).unwrap();
    assert_eq!(tape.value(q), &r);
}

#[test]
fn where_mask_selects() {
    let mut tape = Tape::<f64>::new();
    let m = tape.constant(t(1, 2, &[1.0, 0.0]));
    let a = tape.leaf(t(1, 2, &[5.0, 5.0]));
    let b = tape.leaf(t(1, 2, &[7.0, 7.0]));
    let w = tape.where_mask(m, a, b).unwrap();
    assert_eq!(tape.value(w), &[5.0, 7.0]);
    let s = tape.sum(w, Axis::All);
    tape.backward(s).unwrap();
    assert_eq!(tape.adjoint(a), &[1.0, 0.0]);
    assert_eq!(tape.adjoint(b), &[0.0, 1.0]);
    assert_eq!(tape.adjoint(m), &[0.0, 0.0]);
}

#[test]
fn square_derivative() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::scalar(3.0));
    let y = tape.mul(x, x).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.adjoint(x), &[6.0]);
}

#[test]
fn relu_subgradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(1, 3, &[-1.0, 2.0, 0.0]));
    let r = tape.relu(x);
    let s = tape.sum(r, Axis::All);
    tape.backward(s).unwrap();
    assert_eq!(tape.adjoint(x), &[0.0, 1.0, 0.0]);
}

#[test]
fn clamp_boundary_has_zero_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(1, 4, &[-1.0, 0.5, 1.0, 2.0]));
    let c = tape.clamp(x, -1.0, 1.0).unwrap();
    let s = tape.sum(c, Axis::All);
    tape.backward(s).unwrap();
    assert_eq!(tape.adjoint(x), &[0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(1, 2, &[1.0, 2.0]));
    let err = tape.backward(x).unwrap_err();
    assert!(err.to_string().contains("scalar"));
}

#[test]
fn shape_mismatch_reports_kind_and_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(t(2, 3, &[0.0; 6]));
    let b = tape.leaf(t(3, 2, &[0.0; 6]));
    let err = tape.add(a, b).unwrap_err();
    assert_eq!(err.op, OpKind::Add);
    assert_eq!(err.shapes, vec![Shape::new(2, 3), Shape::new(3, 2)]);
    let err = tape.matmul(a, a).unwrap_err();
    assert_eq!(err.op, OpKind::MatMul);
}

#[test]
fn reused_input_accumulates() {
    // y = x * x + x  =>  dy/dx = 2x + 1
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::scalar(1.5));
    let xx = tape.mul(x, x).unwrap();
    let y = tape.add(xx, x).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.adjoint(x), &[4.0]);
}

#[test]
fn broadcast_reduces_adjoint() {
    // [2,3] * [1,3]: adjoint of the shared row sums over the batch.
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(t(2, 3, &[1., 2., 3., 4., 5., 6.]));
    let w = tape.leaf(t(1, 3, &[1., 1., 1.]));
    let p = tape.mul(a, w).unwrap();
    let s = tape.sum(p, Axis::All);
    tape.backward(s).unwrap();
    assert_eq!(tape.adjoint(w), &[5.0, 7.0, 9.0]);
}

#[test]
fn clear_reuses_tape() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::scalar(2.0));
    let _ = tape.mul(x, x).unwrap();
    tape.clear();
    assert!(tape.is_empty());
    let y = tape.leaf(Tensor::scalar(4.0));
    assert_eq!(tape.value(y), &[4.0]);
}

#[test]
fn f32_tape_works() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::scalar(3.0f32));
    let y = tape.mul(x, x).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.adjoint(x), &[6.0f32]);
}

// ---------------------------------------------------------------------------
// Finite-difference oracle for each primitive.
// ---------------------------------------------------------------------------

type Build = fn(&mut Tape<f64>, &[Var]) -> Var;

/// Reduces an arbitrary output to a scalar with fixed pseudo-random weights
/// so that every output element contributes.
fn weighted_sum(tape: &mut Tape<f64>, out: Var) -> Var {
    let s = tape.shape(out);
    let w: Vec<f64> = (0..s.numel()).map(|i| 0.3 + 0.17 * ((i * 7 + 3) % 11) as f64).collect();
    let wv = tape.constant_f64(s.rows, s.cols, &w);
    let p = tape.mul(out, wv).unwrap();
    tape.sum(p, Axis::All)
}

fn eval(build: Build, inputs: &[Tensor<f64>]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = build(&mut tape, &vars);
    let loss = weighted_sum(&mut tape, out);
    tape.item(loss)
}

/// Max relative error between tape gradient and central differences.
fn fd_error(build: Build, inputs: &[Tensor<f64>]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = build(&mut tape, &vars);
    let loss = weighted_sum(&mut tape, out);
    tape.backward(loss).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let g = tape.adjoint(vars[i]).to_vec();
        for k in 0..x.data().len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[i] = bump(x, k, h);
            minus[i] = bump(x, k, -h);
            let fd = (eval(build, &plus) - eval(build, &minus)) / (2.0 * h);
            let err = (g[k] - fd).abs() / fd.abs().max(1e-3);
            worst = worst.max(err);
        }
    }
    worst
}

fn bump(x: &Tensor<f64>, k: usize, h: f64) -> Tensor<f64> {
    let mut d = x.data().to_vec();
    d[k] += h;
    Tensor::new(x.shape(), d).unwrap()
}

/// Values bounded away from the kinks of relu/abs/clamp/min/max.
fn away(lo: f64, hi: f64) -> impl Strategy<Value = f64> {
    (lo..hi, prop::bool::ANY).prop_map(|(m, s)| if s { m } else { -m })
}

fn tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(away(0.05, 2.0), rows * cols).prop_map(move |d| t(rows, cols, &d))
}

fn positive(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(0.2..3.0f64, rows * cols).prop_map(move |d| t(rows, cols, &d))
}

const TOL: f64 = 1e-5;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn fd_add(a in tensor(2, 3), b in tensor(1, 3)) {
        prop_assert!(fd_error(|t, v| t.add(v[0], v[1]).unwrap(), &[a, b]) < TOL);
    }

    #[test]
    fn fd_sub(a in tensor(2, 3), b in tensor(2, 1)) {
        prop_assert!(fd_error(|t, v| t.sub(v[0], v[1]).unwrap(), &[a, b]) < TOL);
    }

    #[test]
    fn fd_mul(a in tensor(2, 3), b in tensor(2, 3)) {
        prop_assert!(fd_error(|t, v| t.mul(v[0], v[1]).unwrap(), &[a, b]) < TOL);
    }

    #[test]
    fn fd_div(a in tensor(2, 3), b in positive(1, 3)) {
        prop_assert!(fd_error(|t, v| t.div(v[0], v[1]).unwrap(), &[a, b]) < TOL);
    }

    #[test]
    fn fd_neg_sin_cos(a in tensor(2, 2)) {
        prop_assert!(fd_error(|t, v| t.neg(v[0]), std::slice::from_ref(&a)) < TOL);
        prop_assert!(fd_error(|t, v| t.sin(v[0]), std::slice::from_ref(&a)) < TOL);
        prop_assert!(fd_error(|t, v| t.cos(v[0]), &[a]) < TOL);
    }

    #[test]
    fn fd_sqrt(a in positive(2, 2)) {
        prop_assert!(fd_error(|t, v| t.sqrt(v[0]), &[a]) < TOL);
    }

    #[test]
    fn fd_relu_abs(a in tensor(3, 2)) {
        prop_assert!(fd_error(|t, v| t.relu(v[0]), std::slice::from_ref(&a)) < TOL);
        prop_assert!(fd_error(|t, v| t.abs(v[0]), &[a]) < TOL);
    }

    #[test]
    fn fd_clamp(a in tensor(3, 2)) {
        // Bounds sit between the sampled magnitude bands, never on a sample.
        prop_assert!(fd_error(|t, v| t.clamp(v[0], -0.01, 0.01).unwrap(), std::slice::from_ref(&a)) < TOL);
        prop_assert!(fd_error(|t, v| t.clamp(v[0], -3.0, 3.0).unwrap(), &[a]) < TOL);
    }

    #[test]
    fn fd_min_max(a in tensor(2, 3), b in tensor(2, 3)) {
        prop_assume!(a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() > 1e-3));
        prop_assert!(fd_error(|t, v| t.min(v[0], v[1]).unwrap(), &[a.clone(), b.clone()]) < TOL);
        prop_assert!(fd_error(|t, v| t.max(v[0], v[1]).unwrap(), &[a, b]) < TOL);
    }

    #[test]
    fn fd_matmul_transpose(a in tensor(2, 3), b in tensor(3, 4)) {
        prop_assert!(fd_error(|t, v| t.matmul(v[0], v[1]).unwrap(), &[a.clone(), b]) < TOL);
        prop_assert!(fd_error(|t, v| t.transpose(v[0]), &[a]) < TOL);
    }

    #[test]
    fn fd_reductions(a in tensor(3, 4)) {
        for axis in [Axis::All, Axis::Cols, Axis::Rows] {
            let build: Build = match axis {
                Axis::All => |t, v| t.sum(v[0], Axis::All),
                Axis::Cols => |t, v| t.sum(v[0], Axis::Cols),
                Axis::Rows => |t, v| t.mean(v[0], Axis::Rows),
            };
            let e = fd_error(build, std::slice::from_ref(&a));
            prop_assert!(e < TOL);
        }
        prop_assert!(fd_error(|t, v| t.mean(v[0], Axis::All), &[a]) < TOL);
    }

    #[test]
    fn fd_where_mask(a in tensor(2, 3), b in tensor(2, 3)) {
        let build: Build = |t, v| {
            let m = t.constant_f64(2, 3, &[1., 0., 1., 0., 0., 1.]);
            t.where_mask(m, v[0], v[1]).unwrap()
        };
        let e = fd_error(build, &[a, b]);
        prop_assert!(e < TOL);
    }

    #[test]
    fn fd_concat_slice(a in tensor(2, 3), b in tensor(2, 2)) {
        prop_assert!(fd_error(|t, v| t.concat(&[v[0], v[1], v[0]]).unwrap(), &[a.clone(), b]) < TOL);
        prop_assert!(fd_error(|t, v| t.slice(v[0], 1, 2).unwrap(), &[a]) < TOL);
    }

    #[test]
    fn fd_l2norm(a in tensor(3, 3)) {
        prop_assert!(fd_error(|t, v| t.l2norm(v[0]), &[a]) < TOL);
    }

    #[test]
    fn fd_cross3(a in tensor(2, 3), b in tensor(1, 3)) {
        prop_assert!(fd_error(|t, v| t.cross3(v[0], v[1]).unwrap(), &[a, b]) < TOL);
    }

    #[test]
    fn fd_bmm3(a in tensor(2, 9), b in tensor(2, 9), c in tensor(1, 9)) {
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let abc = [a.clone(), b.clone(), c.clone()];
            let e = match (ta, tb) {
                (false, false) => fd_error(|t, v| t.bmm3(v[0], v[1], false, false).unwrap(), &abc),
                (true, false) => fd_error(|t, v| t.bmm3(v[0], v[2], true, false).unwrap(), &abc),
                (false, true) => fd_error(|t, v| t.bmm3(v[2], v[1], false, true).unwrap(), &abc),
                (true, true) => fd_error(|t, v| t.bmm3(v[0], v[1], true, true).unwrap(), &abc),
            };
            prop_assert!(e < TOL, "ta={} tb={} err={}", ta, tb, e);
        }
    }

    #[test]
    fn fd_bmv3(a in tensor(2, 9), x in tensor(2, 3)) {
        prop_assert!(fd_error(|t, v| t.bmv3(v[0], v[1], false).unwrap(), &[a.clone(), x.clone()]) < TOL);
        prop_assert!(fd_error(|t, v| t.bmv3(v[0], v[1], true).unwrap(), &[a, x]) < TOL);
    }

    #[test]
    fn fd_atan2(y in tensor(2, 2), x in tensor(2, 2)) {
        prop_assert!(fd_error(|t, v| t.atan2(v[0], v[1]).unwrap(), &[y, x]) < TOL);
    }

    #[test]
    fn backward_is_linear(a in tensor(2, 3), c in -3.0..3.0f64) {
        // adjoints(l1 + c*l2) == adjoints(l1) + c*adjoints(l2)
        let grads = |w1: f64, w2: f64| {
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(a.clone());
            let s = tape.sin(x);
            let l1 = tape.sum(s, Axis::All);
            let q = tape.mul(x, x).unwrap();
            let l2 = tape.mean(q, Axis::All);
            let (k1, k2) = (tape.scalar(w1), tape.scalar(w2));
            let p1 = tape.mul(l1, k1).unwrap();
            let p2 = tape.mul(l2, k2).unwrap();
            let l = tape.add(p1, p2).unwrap();
            tape.backward(l).unwrap();
            tape.adjoint(x).to_vec()
        };
        let combined = grads(1.0, c);
        let (g1, g2) = (grads(1.0, 0.0), grads(0.0, 1.0));
        for k in 0..combined.len() {
            prop_assert!((combined[k] - (g1[k] + c * g2[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn replay_is_bit_identical(a in tensor(4, 9), b in tensor(4, 9)) {
        let run = || {
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(a.clone());
            let y = tape.leaf(b.clone());
            let p = tape.bmm3(x, y, false, true).unwrap();
            let n = tape.l2norm(p);
            let l = tape.sum(n, Axis::All);
            tape.backward(l).unwrap();
            (tape.item(l).to_bits(), tape.adjoint(x).iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        prop_assert_eq!(run(), run());
    }
}
