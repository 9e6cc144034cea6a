use super::*;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

const FD_H: f64 = 1e-5;

/// Symmetric relative error, tolerant of near-zero gradients.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs() + 1e-8)
}

/// Central finite differences against the analytic gradient of a scalar
/// function of parameter tensors. `build` must be deterministic.
fn fd_check<F>(build: F, inputs: &[Tensor], tol: f64)
where
    F: Fn(&mut Tape, &[Id]) -> Id,
{
    let mut tape = Tape::new();
    let ids: Vec<Id> = inputs.iter().map(|t| tape.leaf(t, true).unwrap()).collect();
    let out = build(&mut tape, &ids);
    let grads = tape.backward(out).unwrap();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let ids: Vec<Id> = perturbed.iter().map(|x| t.leaf(x, false).unwrap()).collect();
        let out = build(&mut t, &ids);
        t.scalar_value(out)
    };

    for (k, input) in inputs.iter().enumerate() {
        let g = grads.get(ids[k]).expect("param has gradient entry");
        for c in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].values_mut()[c] += FD_H;
            let mut minus = inputs.to_vec();
            minus[k].values_mut()[c] -= FD_H;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_H);
            let ad = g.values()[c];
            assert!(
                rel_err(ad, fd) < tol,
                "input {k} coord {c}: analytic {ad} vs fd {fd}"
            );
        }
    }
}

fn rand_vec(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::vector((0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

fn rand_mat(rng: &mut impl Rng, m: usize, n: usize) -> Tensor {
    Tensor::matrix(m, n, (0..m * n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

/// Resample until no coordinate is within `margin` of the op's kink set.
fn rand_vec_away(rng: &mut impl Rng, n: usize, margin: f64) -> Tensor {
    loop {
        let t = rand_vec(rng, n, -2.0, 2.0);
        if t.values().iter().all(|v| v.abs() > margin) {
            return t;
        }
    }
}

#[test]
fn record_add_scalars() {
    let mut t = Tape::new();
    let a = t.leaf(&Tensor::scalar(2.0), false).unwrap();
    let b = t.leaf(&Tensor::scalar(3.0), false).unwrap();
    let c = t.add(a, b).unwrap();
    assert_eq!(t.scalar_value(c), 5.0);
}

#[test]
fn record_relu_negative() {
    let mut t = Tape::new();
    let a = t.leaf(&Tensor::scalar(-1.0), false).unwrap();
    let r = t.relu(a).unwrap();
    assert_eq!(t.scalar_value(r), 0.0);
}

#[test]
fn record_matmul_identity() {
    let mut t = Tape::new();
    let eye = t.identity(2);
    let v = t.leaf(&Tensor::vector(vec![4.0, -7.0]), false).unwrap();
    let r = t.matvec(eye, v).unwrap();
    assert_eq!(t.value(r), &[4.0, -7.0]);
}

#[test]
fn record_shape_mismatch_diagnostic() {
    let mut t = Tape::new();
    let a = t.leaf(&Tensor::vector(vec![1.0, 2.0]), false).unwrap();
    let b = t.leaf(&Tensor::vector(vec![1.0, 2.0, 3.0]), false).unwrap();
    let err = t.add(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("add") && msg.contains("[2]") && msg.contains("[3]"), "{msg}");
}

#[test]
fn backward_square() {
    let mut t = Tape::new();
    let x = t.leaf(&Tensor::scalar(3.0), true).unwrap();
    let y = t.mul(x, x).unwrap();
    let g = t.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().values(), &[6.0]);
}

#[test]
fn backward_inactive_relu() {
    let mut t = Tape::new();
    let x = t.leaf(&Tensor::scalar(-1.0), true).unwrap();
    let y = t.relu(x).unwrap();
    let g = t.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().values(), &[0.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut t = Tape::new();
    let x = t.leaf(&Tensor::vector(vec![1.0, 2.0]), true).unwrap();
    assert!(matches!(t.backward(x), Err(TapeError::NotScalar { .. })));
}

#[test]
fn backward_sum_matvec_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w = rand_mat(&mut rng, 4, 3);
    let v = rand_vec(&mut rng, 3, -2.0, 2.0);
    fd_check(
        |t, ids| {
            let y = t.matvec(ids[0], ids[1]).unwrap();
            t.sum(y).unwrap()
        },
        &[w, v],
        1e-6,
    );
}

#[test]
fn signed_square_gradient() {
    let mut t = Tape::new();
    let v = t.leaf(&Tensor::scalar(2.0), true).unwrap();
    let y = t.signed_square(v).unwrap();
    let g = t.backward(y).unwrap();
    assert_eq!(g.get(v).unwrap().values(), &[4.0]);
}

#[test]
fn sin_gradient_at_zero() {
    let mut t = Tape::new();
    let x = t.leaf(&Tensor::scalar(0.0), true).unwrap();
    let y = t.sin(x).unwrap();
    let g = t.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().values(), &[1.0]);
}

#[test]
fn prod_value_and_gradient() {
    let mut t = Tape::new();
    let v = t.leaf(&Tensor::vector(vec![3.0, 2.0, 4.0]), true).unwrap();
    let p = t.prod(v).unwrap();
    assert_eq!(t.scalar_value(p), 24.0);
    let g = t.backward(p).unwrap();
    assert_eq!(g.get(v).unwrap().values()[0], 8.0);
}

#[test]
fn prod_gradient_with_zeros() {
    let mut t = Tape::new();
    let v = t.leaf(&Tensor::vector(vec![3.0, 0.0, 4.0]), true).unwrap();
    let p = t.prod(v).unwrap();
    assert_eq!(t.scalar_value(p), 0.0);
    let g = t.backward(p).unwrap();
    assert_eq!(g.get(v).unwrap().values(), &[0.0, 12.0, 0.0]);

    let mut t = Tape::new();
    let v = t.leaf(&Tensor::vector(vec![0.0, 0.0, 4.0]), true).unwrap();
    let p = t.prod(v).unwrap();
    let g = t.backward(p).unwrap();
    assert_eq!(g.get(v).unwrap().values(), &[0.0, 0.0, 0.0]);
}

#[test]
fn constant_gradient_is_zero() {
    let mut t = Tape::new();
    let p = t.leaf(&Tensor::vector(vec![1.0, 2.0]), true).unwrap();
    let c = t.leaf(&Tensor::scalar(5.0), false).unwrap();
    let two = t.konst(2.0);
    let y = t.mul(c, two).unwrap();
    let g = t.backward(y).unwrap();
    assert_eq!(g.get(p).unwrap().values(), &[0.0, 0.0]);
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let mut t = Tape::new();
        let w = t
            .leaf(&Tensor::matrix(2, 3, vec![0.3, -1.2, 0.7, 2.2, 0.1, -0.4]).unwrap(), true)
            .unwrap();
        let v = t.leaf(&Tensor::vector(vec![0.11, -0.22, 0.33]), true).unwrap();
        let y = t.matvec(w, v).unwrap();
        let s = t.sin(y).unwrap();
        let out = t.norm2(s).unwrap();
        let g = t.backward(out).unwrap();
        let bits: Vec<u64> = t.value(out).iter().map(|x| x.to_bits()).collect();
        let gbits: Vec<u64> = g.get(w).unwrap().values().iter().map(|x| x.to_bits()).collect();
        (bits, gbits)
    };
    assert_eq!(run(), run());
}

#[test]
fn leaf_rejects_non_finite() {
    let mut t = Tape::new();
    assert!(matches!(
        t.leaf(&Tensor::scalar(f64::NAN), false),
        Err(TapeError::NonFinite { .. })
    ));
}

#[test]
fn check_finite_names_offending_op() {
    let mut t = Tape::new();
    let a = t.leaf(&Tensor::scalar(1.0), false).unwrap();
    let z = t.leaf(&Tensor::scalar(0.0), false).unwrap();
    let _ = t.div(a, z).unwrap();
    let err = t.check_finite().unwrap_err();
    assert!(err.to_string().contains("div"), "{err}");
}

#[test]
fn detach_cuts_gradient() {
    let mut t = Tape::new();
    let x = t.leaf(&Tensor::scalar(3.0), true).unwrap();
    let y = t.mul(x, x).unwrap();
    let d = t.detach(y);
    let z = t.mul(d, x).unwrap();
    let g = t.backward(z).unwrap();
    // z = detach(x^2) * x, so dz/dx = 9 rather than 27.
    assert_eq!(g.get(x).unwrap().values(), &[9.0]);
}

#[test]
fn elementwise_primitives_match_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    type Build = fn(&mut Tape, &[Id]) -> Id;
    let unary: &[(&str, Build)] = &[
        ("neg", |t, ids| {
            let y = t.neg(ids[0]).unwrap();
            t.sum(y).unwrap()
        }),
        ("relu", |t, ids| {
            let y = t.relu(ids[0]).unwrap();
            t.sum(y).unwrap()
        }),
        ("abs", |t, ids| {
            let y = t.abs(ids[0]).unwrap();
            t.sum(y).unwrap()
        }),
        ("sin", |t, ids| {
            let y = t.sin(ids[0]).unwrap();
            t.sum(y).unwrap()
        }),
        ("cos", |t, ids| {
            let y = t.cos(ids[0]).unwrap();
            t.sum(y).unwrap()
        }),
        ("signed_square", |t, ids| {
            let y = t.signed_square(ids[0]).unwrap();
            t.sum(y).unwrap()
        }),
        ("prod", |t, ids| t.prod(ids[0]).unwrap()),
        ("norm2", |t, ids| t.norm2(ids[0]).unwrap()),
    ];
    for (name, build) in unary {
        for _ in 0..100 {
            let v = rand_vec_away(&mut rng, 4, 1e-3);
            let _ = name;
            fd_check(*build, &[v], 1e-5);
        }
    }
}

#[test]
fn binary_primitives_match_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    type Build = fn(&mut Tape, &[Id]) -> Id;
    let binary: &[(&str, Build)] = &[
        ("add", |t, ids| {
            let y = t.add(ids[0], ids[1]).unwrap();
            t.sum(y).unwrap()
        }),
        ("sub", |t, ids| {
            let y = t.sub(ids[0], ids[1]).unwrap();
            t.sum(y).unwrap()
        }),
        ("mul", |t, ids| {
            let y = t.mul(ids[0], ids[1]).unwrap();
            t.sum(y).unwrap()
        }),
        ("div", |t, ids| {
            let y = t.div(ids[0], ids[1]).unwrap();
            t.sum(y).unwrap()
        }),
        ("min", |t, ids| {
            let y = t.min(ids[0], ids[1]).unwrap();
            t.sum(y).unwrap()
        }),
        ("max", |t, ids| {
            let y = t.max(ids[0], ids[1]).unwrap();
            t.sum(y).unwrap()
        }),
    ];
    for (name, build) in binary {
        let mut done = 0;
        while done < 100 {
            let a = rand_vec(&mut rng, 4, -2.0, 2.0);
            let b = rand_vec_away(&mut rng, 4, 1e-3);
            // Keep away from min/max ties and div singularities.
            let gap_ok = a
                .values()
                .iter()
                .zip(b.values())
                .all(|(x, y)| (x - y).abs() > 1e-3);
            if !gap_ok {
                continue;
            }
            let _ = name;
            fd_check(*build, &[a, b], 1e-5);
            done += 1;
        }
    }
}

#[test]
fn structural_primitives_match_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..100 {
        let w = rand_mat(&mut rng, 3, 4);
        let m = rand_mat(&mut rng, 4, 2);
        let v = rand_vec(&mut rng, 4, -2.0, 2.0);
        let s = Tensor::scalar(rng.gen_range(0.5..2.0));
        fd_check(
            |t, ids| {
                let mm = t.matmul(ids[0], ids[1]).unwrap();
                let sc = t.mul_cols(mm, ids[3]).unwrap();
                let sl = t.slice_cols(sc, 0, 2).unwrap();
                let st = t.scatter_cols(sl, vec![2, 0].into(), 3).unwrap();
                let scl = t.scale(ids[4], st).unwrap();
                t.sum(scl).unwrap()
            },
            &[
                w.clone(),
                m,
                v.clone(),
                rand_vec(&mut rng, 2, -2.0, 2.0),
                s,
            ],
            1e-5,
        );
        fd_check(
            |t, ids| {
                let sel = t.select(ids[0], vec![3, 1, 1].into()).unwrap();
                let g0 = t.get(ids[0], 0).unwrap();
                let cat = t.concat(&[sel, g0]).unwrap();
                let cl = t.clamp_const(cat, -0.9, 0.9).unwrap();
                t.sum(cl).unwrap()
            },
            &[v],
            1e-5,
        );
    }
}

#[test]
fn clamp_boundary_convention() {
    // d/dx clamp(x, 0, 1) is 1 on the closed interval, 0 outside.
    for (x, want) in [(0.0, 1.0), (1.0, 1.0), (-0.1, 0.0), (1.1, 0.0), (0.5, 1.0)] {
        let mut t = Tape::new();
        let xi = t.leaf(&Tensor::scalar(x), true).unwrap();
        let y = t.clamp_const(xi, 0.0, 1.0).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(xi).unwrap().values(), &[want], "x={x}");
    }
}

#[test]
fn min_max_tie_goes_to_first() {
    let mut t = Tape::new();
    let a = t.leaf(&Tensor::scalar(1.0), true).unwrap();
    let b = t.leaf(&Tensor::scalar(1.0), true).unwrap();
    let y = t.min(a, b).unwrap();
    let g = t.backward(y).unwrap();
    assert_eq!(g.get(a).unwrap().values(), &[1.0]);
    assert_eq!(g.get(b).unwrap().values(), &[0.0]);

    let mut t = Tape::new();
    let a = t.leaf(&Tensor::scalar(1.0), true).unwrap();
    let b = t.leaf(&Tensor::scalar(1.0), true).unwrap();
    let y = t.max(a, b).unwrap();
    let g = t.backward(y).unwrap();
    assert_eq!(g.get(a).unwrap().values(), &[1.0]);
    assert_eq!(g.get(b).unwrap().values(), &[0.0]);
}
