use miga_tensor::{Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Central finite differences of a scalar function of several tensors.
fn numeric_grads(inputs: &[Tensor], f: &dyn Fn(&[Tensor]) -> f64) -> Vec<Vec<f64>> {
    let eps = 1e-5;
    let mut out = Vec::new();
    for (k, inp) in inputs.iter().enumerate() {
        let mut g = Vec::with_capacity(inp.numel());
        for i in 0..inp.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += eps;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= eps;
            g.push((f(&plus) - f(&minus)) / (2.0 * eps));
        }
        out.push(g);
    }
    out
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Checks the tape gradient of `build` against finite differences.
fn check(inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Var) {
    let eval = |xs: &[Tensor]| {
        let mut t = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let out = build(&mut t, &vars);
        t.value(out).item()
    };
    let numeric = numeric_grads(&inputs, &eval);
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.param(x.clone())).collect();
    let out = build(&mut t, &vars);
    t.backward(out).unwrap();
    for (k, v) in vars.iter().enumerate() {
        let analytic = t.grad(*v).expect("leaf gradient").data();
        for (i, (a, n)) in analytic.iter().zip(&numeric[k]).enumerate() {
            assert!(rel_err(*a, *n) < 1e-4, "input {k} elem {i}: analytic {a} numeric {n}");
        }
    }
}

/// Random projection to a scalar so every output element matters.
fn project(t: &mut Tape, x: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, t.shape(x));
    let w = t.constant(w);
    let p = t.mul(x, w).unwrap();
    t.sum(p)
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[4, 2]);
    let mut t = Tape::new();
    let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
    let c = t.matmul(va, vb).unwrap();
    for i in 0..3 {
        for j in 0..2 {
            let mut s = 0.0;
            for p in 0..4 {
                s += a.data()[i * 4 + p] * b.data()[p * 2 + j];
            }
            assert!((t.value(c).data()[i * 2 + j] - s).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_matches_high_precision_values() {
    // exp(2)/(exp(2)+exp(1)) and its complement at 40 digits
    let expected = [0.7310585786300048792511592418218362743651, 0.2689414213699951207488407581781637256349];
    let mut t = Tape::new();
    let x = t.constant(Tensor::vector(vec![2.0, 1.0]));
    let s = t.softmax(x, 0).unwrap();
    for (v, e) in t.value(s).data().iter().zip(expected) {
        assert!((v - e).abs() < 1e-12);
    }
}

#[test]
fn primitive_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[3, 4]);
    let row = random(&mut rng, &[4]);
    let s = random(&mut rng, &[1]);
    let m = random(&mut rng, &[4, 2]);

    check(vec![a.clone(), b.clone()], |t, v| {
        let x = t.add(v[0], v[1]).unwrap();
        project(t, x, 1)
    });
    check(vec![a.clone(), b.clone()], |t, v| {
        let x = t.sub(v[0], v[1]).unwrap();
        project(t, x, 2)
    });
    check(vec![a.clone(), b.clone()], |t, v| {
        let x = t.mul(v[0], v[1]).unwrap();
        project(t, x, 3)
    });
    check(vec![a.clone(), row.clone()], |t, v| {
        let x = t.add(v[0], v[1]).unwrap();
        project(t, x, 4)
    });
    check(vec![a.clone(), row.clone()], |t, v| {
        let x = t.mul(v[0], v[1]).unwrap();
        project(t, x, 5)
    });
    check(vec![a.clone(), s.clone()], |t, v| {
        let x = t.sub(v[0], v[1]).unwrap();
        project(t, x, 6)
    });
    check(vec![a.clone(), s.clone()], |t, v| {
        let d = t.add_const(v[1], 2.5);
        let x = t.div(v[0], d).unwrap();
        project(t, x, 7)
    });
    check(vec![a.clone(), m.clone()], |t, v| {
        let x = t.matmul(v[0], v[1]).unwrap();
        project(t, x, 8)
    });
    for (k, op) in ["tanh", "sigmoid", "relu", "square", "sqrt", "exp", "neg"].iter().enumerate() {
        check(vec![a.clone()], |t, v| {
            let x = match *op {
                "tanh" => t.tanh(v[0]),
                "sigmoid" => t.sigmoid(v[0]),
                "relu" => t.relu(v[0]),
                "square" => t.square(v[0]),
                "sqrt" => {
                    let sq = t.square(v[0]);
                    let pos = t.add_const(sq, 0.5);
                    t.sqrt(pos)
                }
                "exp" => t.exp(v[0]),
                _ => t.neg(v[0]),
            };
            project(t, x, 10 + k as u64)
        });
    }
    check(vec![a.clone()], |t, v| {
        let x = t.mul_const(v[0], -1.7);
        let m = t.mean(x).unwrap();
        let s = t.square(m);
        t.sum(s)
    });
    for axis in 0..2 {
        check(vec![a.clone()], |t, v| {
            let x = t.softmax(v[0], axis).unwrap();
            project(t, x, 20 + axis as u64)
        });
        check(vec![a.clone()], |t, v| {
            let x = t.sum_axis(v[0], axis).unwrap();
            project(t, x, 22 + axis as u64)
        });
        check(vec![a.clone()], |t, v| {
            let x = t.mean_axis(v[0], axis).unwrap();
            project(t, x, 24 + axis as u64)
        });
    }
    let mask: Vec<bool> = (0..12).map(|i| i % 3 != 1).collect();
    check(vec![a.clone()], |t, v| {
        let x = t.softmax_masked(v[0], 1, &mask).unwrap();
        project(t, x, 26)
    });
    check(vec![a.clone()], |t, v| {
        let x = t.normalize_last(v[0], 1e-5).unwrap();
        project(t, x, 27)
    });
    check(vec![a.clone(), b.clone()], |t, v| {
        let x = t.concat(&[v[0], v[1]], 1).unwrap();
        let y = t.slice(x, 1, 2, 7).unwrap();
        project(t, y, 28)
    });
    let c3 = random(&mut rng, &[2, 3, 4]);
    let d3 = random(&mut rng, &[2, 4, 3]);
    check(vec![c3.clone(), d3], |t, v| {
        let x = t.bmm(v[0], v[1]).unwrap();
        project(t, x, 29)
    });
    check(vec![c3], |t, v| {
        let x = t.permute(v[0], &[2, 0, 1]).unwrap();
        let y = t.reshape(x, &[4, 6]).unwrap();
        let z = t.transpose(y).unwrap();
        project(t, z, 30)
    });
}

#[test]
fn composite_function_gradient() {
    // Two-layer tanh net with a pearson-like normalisation at the end.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&mut rng, &[5, 3]);
    let w1 = random(&mut rng, &[3, 4]);
    let b1 = random(&mut rng, &[4]);
    let w2 = random(&mut rng, &[4, 1]);
    check(vec![x, w1, b1, w2], |t, v| {
        let h = t.matmul(v[0], v[1]).unwrap();
        let h = t.add(h, v[2]).unwrap();
        let h = t.tanh(h);
        let y = t.matmul(h, v[3]).unwrap();
        let y = t.reshape(y, &[5]).unwrap();
        let mu = t.mean(y).unwrap();
        let c = t.sub(y, mu).unwrap();
        let sq = t.square(c);
        let var = t.mean(sq).unwrap();
        let var = t.add_const(var, 1e-3);
        let sd = t.sqrt(var);
        let z = t.div(c, sd).unwrap();
        project(t, z, 99)
    });
}

#[test]
fn backward_independent_of_recording_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[3, 3]);
    let w = random(&mut rng, &[3, 3]);
    let run = |branch_first: bool| {
        let mut t = Tape::new();
        let vx = t.param(x.clone());
        let vw = t.param(w.clone());
        let (p, q) = if branch_first {
            let p = t.matmul(vx, vw).unwrap();
            let q = t.tanh(vx);
            (p, q)
        } else {
            let q = t.tanh(vx);
            let p = t.matmul(vx, vw).unwrap();
            (p, q)
        };
        let s = t.mul(p, q).unwrap();
        let l = t.sum(s);
        t.backward(l).unwrap();
        (t.grad(vx).unwrap().clone(), t.grad(vw).unwrap().clone())
    };
    let (gx1, gw1) = run(true);
    let (gx2, gw2) = run(false);
    for (a, b) in gx1.data().iter().zip(gx2.data()).chain(gw1.data().iter().zip(gw2.data())) {
        assert!((a - b).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant(
        xs in prop::collection::vec(-30.0f64..30.0, 1..12),
        shift in -100.0f64..100.0,
    ) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(xs.clone()));
        let s = t.softmax(x, 0).unwrap();
        let total: f64 = t.value(s).data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(t.value(s).data().iter().all(|v| *v > 0.0));
        let shifted = t.constant(Tensor::vector(xs.iter().map(|v| v + shift).collect()));
        let s2 = t.softmax(shifted, 0).unwrap();
        for (a, b) in t.value(s).data().iter().zip(t.value(s2).data()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
