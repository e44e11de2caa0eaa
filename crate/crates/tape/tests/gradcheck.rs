//! Analytic gradients against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unimatch_tape::{gradient_penalty, input_gradient, OpKind, Tape, TapeError, Tensor, Var};

const H: f64 = 1e-5;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central differences of `f` at every coordinate of `x`.
fn finite_diff(x: &[f64], f: &dyn Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + H;
            let up = f(&probe);
            probe[i] = orig - H;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * H)
        })
        .collect()
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| rel_err(*x, *y)).fold(0.0, f64::max)
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

#[test]
fn sigmoid_chain_matches_finite_difference() {
    let eval = |w: f64| {
        let mut t = Tape::new();
        let wv = t.param(Tensor::row(vec![w])).unwrap();
        let x = t.constant(Tensor::column(vec![1.0])).unwrap();
        let p = t.matmul(wv, x).unwrap();
        let s = t.sigmoid(p).unwrap();
        let l = t.sum(s).unwrap();
        (t.value(l).data()[0], t.backward(l).unwrap().get(wv).unwrap().data()[0])
    };
    let (_, analytic) = eval(0.5);
    let fd = (eval(0.5 + H).0 - eval(0.5 - H).0) / (2.0 * H);
    assert!(rel_err(analytic, fd) < 1e-6, "{analytic} vs {fd}");
}

#[test]
fn backward_trivial_cases() {
    let mut t = Tape::new();
    let x = t.param(Tensor::scalar(3.0)).unwrap();
    let g = t.backward(x).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0]);

    let mut t = Tape::new();
    let x = t.param(Tensor::row(vec![1.0, -2.0])).unwrap();
    let sq = t.mul(x, x).unwrap();
    let l = t.sum(sq).unwrap();
    let g = t.backward(l).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut t = Tape::new();
    let x = t.param(Tensor::row(vec![1.0, 2.0])).unwrap();
    assert!(matches!(t.backward(x), Err(TapeError::NonScalarLoss([1, 2]))));
}

#[test]
fn unused_parameter_gets_zero_gradient() {
    let mut t = Tape::new();
    let x = t.param(Tensor::row(vec![1.0, 2.0])).unwrap();
    let unused = t.param(Tensor::zeros(3, 3)).unwrap();
    let l = t.sum(x).unwrap();
    let g = t.backward(l).unwrap();
    assert_eq!(g.get(unused).unwrap(), &Tensor::zeros(3, 3));
}

#[test]
fn record_dispatch_and_shape_errors() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::row(vec![1.0, 2.0])).unwrap();
    let b = t.constant(Tensor::row(vec![3.0, 4.0])).unwrap();
    let m = t.record(OpKind::Mul, &[a, b]).unwrap();
    assert_eq!(t.value(m).data(), &[3.0, 8.0]);

    let z = t.constant(Tensor::zeros(2, 3)).unwrap();
    let any = t.constant(Tensor::column(vec![7.0, -1.0, 2.5])).unwrap();
    let p = t.record(OpKind::MatMul, &[z, any]).unwrap();
    assert_eq!(t.value(p), &Tensor::zeros(2, 1));

    let bad = t.constant(Tensor::zeros(4, 4)).unwrap();
    match t.matmul(z, bad) {
        Err(TapeError::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, [2, 3]);
            assert_eq!(rhs, [4, 4]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
    assert!(t.record(OpKind::Sigmoid, &[a, b]).is_err());
}

#[test]
fn non_finite_values_are_rejected() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::row(vec![-1.0])).unwrap();
    assert!(matches!(t.log(x), Err(TapeError::NonFinite { op: "log" })));
    assert!(t.leaf(Tensor::row(vec![f64::NAN]), true).is_err());
}

#[test]
fn three_layer_perceptron_all_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let dims = [5usize, 7, 6, 3];
    let x = random_tensor(&mut rng, 4, dims[0], -1.0, 1.0);
    let mut params = Vec::new();
    for w in dims.windows(2) {
        params.push(random_tensor(&mut rng, w[0], w[1], -0.8, 0.8));
        params.push(random_tensor(&mut rng, 1, w[1], -0.3, 0.3));
    }
    let build = |t: &mut Tape, ps: &[Tensor]| -> (Var, Vec<Var>) {
        let mut h = t.constant(x.clone()).unwrap();
        let vars: Vec<Var> = ps.iter().map(|p| t.param(p.clone()).unwrap()).collect();
        for (layer, pair) in vars.chunks(2).enumerate() {
            h = t.linear(h, pair[0], pair[1]).unwrap();
            h = if layer + 1 < vars.len() / 2 {
                t.tanh(h).unwrap()
            } else {
                t.log_softmax(h).unwrap()
            };
        }
        let l = t.mean(h).unwrap();
        (l, vars)
    };
    let mut t = Tape::new();
    let (loss, vars) = build(&mut t, &params);
    let grads = t.backward(loss).unwrap();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).unwrap().data().to_vec();
        let f = |flat: &[f64]| {
            let mut ps = params.clone();
            ps[pi] = Tensor::new(ps[pi].rows(), ps[pi].cols(), flat.to_vec()).unwrap();
            let mut t = Tape::new();
            let (l, _) = build(&mut t, &ps);
            t.value(l).data()[0]
        };
        let fd = finite_diff(params[pi].data(), &f);
        let err = max_rel(&analytic, &fd);
        assert!(err < 1e-4, "param {pi}: max relative error {err}");
    }
}

type Builder = fn(&mut Tape, &[Var]) -> Var;

/// One entry per differentiable op: input shapes, value range, and how to apply it.
fn op_cases() -> Vec<(&'static str, Vec<[usize; 2]>, (f64, f64), Builder)> {
    vec![
        ("matmul", vec![[3, 4], [4, 2]], (-1.0, 1.0), |t, v| t.matmul(v[0], v[1]).unwrap()),
        ("group_matmul", vec![[6, 3], [4, 3]], (-1.0, 1.0), |t, v| {
            t.group_matmul(v[0], v[1], 2, true).unwrap()
        }),
        ("group_matmul_plain", vec![[4, 3], [6, 2]], (-1.0, 1.0), |t, v| {
            t.group_matmul(v[0], v[1], 2, false).unwrap()
        }),
        ("add_broadcast", vec![[3, 4], [1, 4]], (-1.0, 1.0), |t, v| t.add(v[0], v[1]).unwrap()),
        ("sub_broadcast", vec![[3, 4], [3, 1]], (-1.0, 1.0), |t, v| t.sub(v[0], v[1]).unwrap()),
        ("mul", vec![[3, 4], [3, 4]], (-1.0, 1.0), |t, v| t.mul(v[0], v[1]).unwrap()),
        ("mul_scalar", vec![[3, 4], [1, 1]], (-1.0, 1.0), |t, v| t.mul(v[0], v[1]).unwrap()),
        ("scale", vec![[2, 3]], (-1.0, 1.0), |t, v| t.scale(v[0], -2.5).unwrap()),
        ("sigmoid", vec![[2, 3]], (-3.0, 3.0), |t, v| t.sigmoid(v[0]).unwrap()),
        ("relu", vec![[2, 3]], (-1.0, 1.0), |t, v| t.relu(v[0]).unwrap()),
        ("tanh", vec![[2, 3]], (-2.0, 2.0), |t, v| t.tanh(v[0]).unwrap()),
        ("exp", vec![[2, 3]], (-1.0, 1.0), |t, v| t.exp(v[0]).unwrap()),
        ("log", vec![[2, 3]], (0.5, 2.0), |t, v| t.log(v[0]).unwrap()),
        ("square", vec![[2, 3]], (-1.0, 1.0), |t, v| t.square(v[0]).unwrap()),
        ("sqrt", vec![[2, 3]], (0.5, 2.0), |t, v| t.sqrt(v[0]).unwrap()),
        ("recip", vec![[2, 3]], (0.5, 2.0), |t, v| t.recip(v[0]).unwrap()),
        ("sum_rows", vec![[3, 4]], (-1.0, 1.0), |t, v| t.sum_rows(v[0]).unwrap()),
        ("sum_cols", vec![[3, 4]], (-1.0, 1.0), |t, v| t.sum_cols(v[0]).unwrap()),
        ("softmax", vec![[3, 4]], (-2.0, 2.0), |t, v| t.softmax(v[0]).unwrap()),
        ("log_softmax", vec![[3, 4]], (-2.0, 2.0), |t, v| t.log_softmax(v[0]).unwrap()),
        ("l2norm", vec![[3, 4]], (-1.0, 1.0), |t, v| t.row_l2norm(v[0]).unwrap()),
        ("transpose", vec![[3, 4]], (-1.0, 1.0), |t, v| t.transpose(v[0]).unwrap()),
        ("reshape", vec![[3, 4]], (-1.0, 1.0), |t, v| t.reshape(v[0], 2, 6).unwrap()),
        ("concat", vec![[3, 2], [3, 3]], (-1.0, 1.0), |t, v| t.concat_cols(v).unwrap()),
        ("concat_rows", vec![[2, 3], [1, 3]], (-1.0, 1.0), |t, v| t.concat_rows(v).unwrap()),
        ("slice", vec![[3, 5]], (-1.0, 1.0), |t, v| t.slice_cols(v[0], 1, 3).unwrap()),
        ("select_rows", vec![[4, 3]], (-1.0, 1.0), |t, v| t.select_rows(v[0], &[2, 0, 2]).unwrap()),
        ("mean", vec![[2, 3]], (-1.0, 1.0), |t, v| t.mean(v[0]).unwrap()),
    ]
}

#[test]
fn every_op_matches_finite_differences_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for (name, shapes, (lo, hi), apply) in op_cases() {
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let inputs: Vec<Tensor> =
                shapes.iter().map(|s| random_tensor(&mut rng, s[0], s[1], lo, hi)).collect();
            let probe = {
                let mut t = Tape::new();
                let vs: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone()).unwrap()).collect();
                let out = apply(&mut t, &vs);
                t.shape(out)
            };
            let weights = random_tensor(&mut rng, probe[0], probe[1], -1.0, 1.0);
            let loss_of = |xs: &[Tensor], t: &mut Tape, track: bool| -> (Var, Vec<Var>) {
                let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone(), track).unwrap()).collect();
                let out = apply(t, &vs);
                let w = t.constant(weights.clone()).unwrap();
                let prod = t.mul(out, w).unwrap();
                (t.sum(prod).unwrap(), vs)
            };
            let mut t = Tape::new();
            let (loss, vs) = loss_of(&inputs, &mut t, true);
            let grads = t.backward(loss).unwrap();
            for (ii, v) in vs.iter().enumerate() {
                let analytic = grads.get(*v).unwrap().data().to_vec();
                let f = |flat: &[f64]| {
                    let mut xs = inputs.clone();
                    xs[ii] = Tensor::new(xs[ii].rows(), xs[ii].cols(), flat.to_vec()).unwrap();
                    let mut t = Tape::new();
                    let (l, _) = loss_of(&xs, &mut t, false);
                    t.value(l).data()[0]
                };
                let fd = finite_diff(inputs[ii].data(), &f);
                worst = worst.max(max_rel(&analytic, &fd));
            }
        }
        assert!(worst < 1e-4, "{name}: max relative error {worst}");
    }
}

#[test]
fn grad_reverse_gradient_is_negated_finite_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x0 = random_tensor(&mut rng, 3, 4, -1.0, 1.0);
    let loss = |t: &mut Tape, x: Var| {
        let r = t.grad_reverse(x, 1.0).unwrap();
        let s = t.tanh(r).unwrap();
        t.sum(s).unwrap()
    };
    let mut t = Tape::new();
    let x = t.param(x0.clone()).unwrap();
    let l = loss(&mut t, x);
    let analytic: Vec<f64> = t.backward(l).unwrap().get(x).unwrap().data().iter().map(|v| -v).collect();
    let fd = finite_diff(x0.data(), &|flat| {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(3, 4, flat.to_vec()).unwrap()).unwrap();
        let l = loss(&mut t, x);
        t.value(l).data()[0]
    });
    assert!(max_rel(&analytic, &fd) < 1e-4);
}

#[test]
fn grad_reverse_contract() {
    let mut t = Tape::new();
    let x = t.param(Tensor::row(vec![1.0, -2.0])).unwrap();
    let y = t.grad_reverse(x, 1.0).unwrap();
    assert_eq!(t.value(y).data(), t.value(x).data());
    let l = t.sum(y).unwrap();
    assert_eq!(t.backward(l).unwrap().get(x).unwrap().data(), &[-1.0, -1.0]);

    let mut t = Tape::new();
    let x = t.param(Tensor::row(vec![5.0, 7.0])).unwrap();
    let y = t.grad_reverse(x, 1.0).unwrap();
    let l = t.sum(y).unwrap();
    assert_eq!(t.backward(l).unwrap().get(x).unwrap().data(), &[-1.0, -1.0]);
}

#[test]
fn input_gradient_of_linear_critic_is_the_weight() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::from_rows(&[vec![0.3, -1.2], vec![2.0, 5.0]]).unwrap()).unwrap();
    let w = t.param(Tensor::column(vec![3.0, 4.0])).unwrap();
    let g = input_gradient(&mut t, x, |t, x| t.matmul(x, w)).unwrap();
    for r in 0..2 {
        let row = t.value(g).row_slice(r);
        assert!((row[0] - 3.0).abs() < 1e-12 && (row[1] - 4.0).abs() < 1e-12);
    }
    let gp = gradient_penalty(&mut t, g).unwrap();
    assert!((t.value(gp).data()[0] - 16.0).abs() < 1e-12);
}

#[test]
fn input_gradient_of_square_sum() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::row(vec![1.0, 2.0])).unwrap();
    let g = input_gradient(&mut t, x, |t, x| {
        let sq = t.mul(x, x)?;
        t.sum_cols(sq)
    })
    .unwrap();
    assert_eq!(t.value(g).data(), &[2.0, 4.0]);
}

#[test]
fn input_gradient_rejects_non_scalar_critic() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(3, 2)).unwrap();
    let err = input_gradient(&mut t, x, |t, x| t.scale(x, 2.0)).unwrap_err();
    assert!(matches!(err, TapeError::Contract(_)));
}

/// One hidden layer critic `sum(tanh(x W1 + b1) W2)`, gradient w.r.t. `x`
/// checked against finite differences; the penalty built from it checked
/// w.r.t. `W1` by finite differences of the penalty itself.
#[test]
fn double_backprop_through_hidden_layer_critic() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let x0 = random_tensor(&mut rng, 5, 3, -1.0, 1.0);
    let w1 = random_tensor(&mut rng, 3, 6, -1.0, 1.0);
    let b1 = random_tensor(&mut rng, 1, 6, -0.5, 0.5);
    let w2 = random_tensor(&mut rng, 6, 1, -1.0, 1.0);

    let critic = |t: &mut Tape, x: Var, w1: Var, b1: Var, w2: Var| {
        let h = t.linear(x, w1, b1).unwrap();
        let h = t.tanh(h).unwrap();
        t.matmul(h, w2).unwrap()
    };
    let critic_value = |x: &Tensor| -> f64 {
        let mut t = Tape::new();
        let xv = t.constant(x.clone()).unwrap();
        let (a, b, c) = (
            t.constant(w1.clone()).unwrap(),
            t.constant(b1.clone()).unwrap(),
            t.constant(w2.clone()).unwrap(),
        );
        let out = critic(&mut t, xv, a, b, c);
        t.value(out).sum()
    };

    let mut t = Tape::new();
    let xv = t.constant(x0.clone()).unwrap();
    let (a, b, c) = (
        t.param(w1.clone()).unwrap(),
        t.param(b1.clone()).unwrap(),
        t.param(w2.clone()).unwrap(),
    );
    let g = input_gradient(&mut t, xv, |t, x| Ok(critic(t, x, a, b, c))).unwrap();
    let fd_x = finite_diff(x0.data(), &|flat| {
        critic_value(&Tensor::new(5, 3, flat.to_vec()).unwrap())
    });
    assert!(max_rel(t.value(g).data(), &fd_x) < 1e-4);

    let gp = gradient_penalty(&mut t, g).unwrap();
    let grads = t.backward(gp).unwrap();
    let penalty_at = |w1n: &Tensor, w2n: &Tensor| -> f64 {
        let mut t = Tape::new();
        let xv = t.constant(x0.clone()).unwrap();
        let (a, b, c) = (
            t.constant(w1n.clone()).unwrap(),
            t.constant(b1.clone()).unwrap(),
            t.constant(w2n.clone()).unwrap(),
        );
        let g = input_gradient(&mut t, xv, |t, x| Ok(critic(t, x, a, b, c))).unwrap();
        let gp = gradient_penalty(&mut t, g).unwrap();
        t.value(gp).data()[0]
    };
    let fd_w1 = finite_diff(w1.data(), &|flat| {
        penalty_at(&Tensor::new(3, 6, flat.to_vec()).unwrap(), &w2)
    });
    let fd_w2 = finite_diff(w2.data(), &|flat| {
        penalty_at(&w1, &Tensor::new(6, 1, flat.to_vec()).unwrap())
    });
    assert!(max_rel(grads.get(a).unwrap().data(), &fd_w1) < 1e-3);
    assert!(max_rel(grads.get(c).unwrap().data(), &fd_w2) < 1e-3);
}

#[test]
fn identical_inputs_give_bit_identical_gradients() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut t = Tape::new();
        let x = t.constant(random_tensor(&mut rng, 8, 4, -1.0, 1.0)).unwrap();
        let w = t.param(random_tensor(&mut rng, 4, 3, -1.0, 1.0)).unwrap();
        let h = t.matmul(x, w).unwrap();
        let s = t.log_softmax(h).unwrap();
        let l = t.sum(s).unwrap();
        let g = t.backward(l).unwrap();
        (t.value(l).data()[0].to_bits(), g.get(w).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

#[test]
fn symbolic_gradient_agrees_with_numeric_backward() {
    let cases: Vec<(&str, Builder)> = vec![
        ("sigmoid", |t, v| t.sigmoid(v[0]).unwrap()),
        ("relu", |t, v| t.relu(v[0]).unwrap()),
        ("tanh", |t, v| t.tanh(v[0]).unwrap()),
        ("exp", |t, v| t.exp(v[0]).unwrap()),
        ("square", |t, v| t.square(v[0]).unwrap()),
        ("scale", |t, v| t.scale(v[0], 0.7).unwrap()),
        ("sum_cols", |t, v| t.sum_cols(v[0]).unwrap()),
        ("sum_rows", |t, v| t.sum_rows(v[0]).unwrap()),
        ("transpose", |t, v| t.transpose(v[0]).unwrap()),
        ("reshape", |t, v| t.reshape(v[0], 6, 2).unwrap()),
        ("slice", |t, v| t.slice_cols(v[0], 1, 2).unwrap()),
        ("concat", |t, v| {
            let s = t.square(v[0]).unwrap();
            t.concat_cols(&[v[0], s]).unwrap()
        }),
        ("sub_mul", |t, v| {
            let c = t.constant(Tensor::row(vec![0.5, -1.0, 2.0, 0.1])).unwrap();
            let m = t.mul(v[0], c).unwrap();
            let e = t.exp(v[0]).unwrap();
            t.sub(m, e).unwrap()
        }),
        ("log_sqrt_recip", |t, v| {
            let e = t.exp(v[0]).unwrap();
            let l = t.log(e).unwrap();
            let s = t.sqrt(e).unwrap();
            let r = t.recip(s).unwrap();
            t.add(l, r).unwrap()
        }),
        ("reverse", |t, v| t.grad_reverse(v[0], 2.0).unwrap()),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for (name, apply) in cases {
        let x0 = random_tensor(&mut rng, 3, 4, -1.0, 1.0);
        let mut t = Tape::new();
        let x = t.param(x0.clone()).unwrap();
        let y = apply(&mut t, &[x]);
        let l = t.sum(y).unwrap();
        let numeric = t.backward(l).unwrap().get(x).unwrap().clone();
        let symbolic = t.grad(y, x).unwrap();
        let err = max_rel(t.value(symbolic).data(), numeric.data());
        assert!(err < 1e-12, "{name}: {err}");
    }
}
