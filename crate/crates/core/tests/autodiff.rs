use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tp4d_core::autodiff::{
    evaluate, finite_difference_check, forward_and_backward, CompositeLayout, Tape, Var,
};
use tp4d_core::{Error, Result};

fn random_vec(n: usize, scale: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

#[test]
fn square_at_three() {
    let prog = |t: &mut Tape, x: Var| -> Result<Var> {
        let y = t.mul(x, x);
        Ok(t.sum(y))
    };
    let (v, g) = forward_and_backward(&prog, &[3.0]).unwrap();
    assert_eq!(v, 9.0);
    assert_eq!(g, vec![6.0]);
}

#[test]
fn tape_value_matches_plain_evaluation() {
    let prog = |t: &mut Tape, x: Var| -> Result<Var> {
        let a = t.softplus(x);
        let b = t.tanh(a);
        let c = t.mul(a, b);
        Ok(t.mean(c))
    };
    let x = random_vec(17, 2.0, 1);
    let (v, _) = forward_and_backward(&prog, &x).unwrap();
    assert_eq!(v, evaluate(&prog, &x).unwrap());
}

fn two_sample_layout(deltas: [f64; 2]) -> CompositeLayout {
    CompositeLayout {
        rays: 1,
        samples: 2,
        channels: 2,
        depths: Arc::new(vec![1.0, 1.0 + deltas[0]]),
        deltas: Arc::new(deltas.to_vec()),
    }
}

#[test]
fn two_sample_composite_matches_hand_derivation() {
    let (s0, s1) = (0.8, 1.7);
    let deltas = [0.3, 0.45];
    let layout = two_sample_layout(deltas);
    // color channel k is 1 only at sample k, so feature k equals weight k
    let colors = vec![1.0, 0.0, 0.0, 1.0];
    let pick = |out: usize| {
        let layout = layout.clone();
        let colors = colors.clone();
        move |t: &mut Tape, x: Var| -> Result<Var> {
            let c = t.constant(colors.clone());
            let o = t.composite(x, c, layout.clone());
            let v = t.slice(o, out..out + 1);
            Ok(t.sum(v))
        }
    };
    let t0 = 1.0;
    let t1 = (-s0 * deltas[0]).exp();

    let (_, g_w0) = forward_and_backward(&pick(0), &[s0, s1]).unwrap();
    let (_, g_w1) = forward_and_backward(&pick(1), &[s0, s1]).unwrap();
    let dw0 = deltas[0] * (-s0 * deltas[0]).exp() * t0;
    let dw1 = deltas[1] * (-s1 * deltas[1]).exp() * t1;
    assert!((g_w0[0] - dw0).abs() < 1e-14);
    assert!((g_w1[1] - dw1).abs() < 1e-14);
    assert_eq!(g_w0[1], 0.0);

    // opacity = 1 − exp(−σ0Δ0 − σ1Δ1)
    let (op, g_op) = forward_and_backward(&pick(3), &[s0, s1]).unwrap();
    let survive = (-s0 * deltas[0] - s1 * deltas[1]).exp();
    assert!((op - (1.0 - survive)).abs() < 1e-15);
    assert!((g_op[0] - deltas[0] * survive).abs() < 1e-14);
    assert!((g_op[1] - deltas[1] * survive).abs() < 1e-14);
}

#[test]
fn quadratic_is_exact_under_central_differences() {
    let coeffs = random_vec(6, 1.0, 2);
    let prog = move |t: &mut Tape, x: Var| -> Result<Var> {
        let c = t.constant(coeffs.clone());
        let xx = t.mul(x, x);
        let a = t.mul(xx, c);
        let lin = t.scale(x, 0.7);
        let s = t.add(a, lin);
        Ok(t.sum(s))
    };
    let x = random_vec(6, 2.0, 3);
    let r = finite_difference_check(&prog, &x, 1e-4, &all(6)).unwrap();
    assert_eq!(r.checked, 6);
    assert!(r.max_relative_error < 1e-10, "{r:?}");
}

fn check(prog: impl Fn(&mut Tape, Var) -> Result<Var>, x: &[f64], h: f64, tol: f64) {
    let r = finite_difference_check(&prog, x, h, &all(x.len())).unwrap();
    assert!(r.max_relative_error < tol, "worst {:?}: {}", r.worst_index, r.max_relative_error);
}

#[test]
fn matmul_bias_and_activations() {
    let (m, k, n) = (3, 4, 5);
    let x = random_vec(m * k + k * n + n, 1.0, 4);
    check(
        move |t: &mut Tape, p: Var| {
            let a = t.slice(p, 0..m * k);
            let b = t.slice(p, m * k..m * k + k * n);
            let bias = t.slice(p, m * k + k * n..m * k + k * n + n);
            let y = t.matmul(a, b, m, k, n);
            let y = t.add_row(y, bias, n);
            let y1 = t.softplus(y);
            let y2 = t.sigmoid(y);
            let y3 = t.tanh(y1);
            let y = t.mul(y2, y3);
            let y = t.exp(y);
            Ok(t.sum(y))
        },
        &x,
        1e-5,
        1e-7,
    );
}

#[test]
fn transpose_mul_row_and_broadcast() {
    let x = random_vec(12 + 3 + 1, 1.0, 5);
    check(
        |t: &mut Tape, p: Var| {
            let a = t.slice(p, 0..12);
            let r = t.slice(p, 12..15);
            let s = t.slice(p, 15..16);
            let at = t.transpose(a, 3, 4);
            let y = t.mul_row(a, r, 3);
            let y = t.mul(y, s);
            let z = t.sub(at, s);
            let z = t.mul(z, z);
            let y2 = t.mul(y, y);
            let a1 = t.sum(y2);
            let a2 = t.sum(z);
            Ok(t.add(a1, a2))
        },
        &x,
        1e-5,
        1e-7,
    );
}

#[test]
fn softmax_and_layer_norm() {
    let x = random_vec(24, 1.5, 6);
    let w = random_vec(24, 1.0, 7);
    check(
        move |t: &mut Tape, p: Var| {
            let w = t.constant(w.clone());
            let s = t.row_softmax(p, 6);
            let l = t.layer_norm(p, 8);
            let y = t.add(s, l);
            let y = t.mul(y, w);
            let y = t.mul(y, y);
            Ok(t.sum(y))
        },
        &x,
        1e-5,
        1e-6,
    );
}

#[test]
fn abs_uses_zero_subgradient() {
    let prog = |t: &mut Tape, x: Var| -> Result<Var> {
        let a = t.abs(x);
        Ok(t.sum(a))
    };
    let (_, g) = forward_and_backward(&prog, &[-2.0, 0.0, 3.0]).unwrap();
    assert_eq!(g, vec![-1.0, 0.0, 1.0]);
}

#[test]
fn gather_wrt_planes_and_points() {
    let (res, ch) = (5, 3);
    let n_planes = 3 * res * res * ch;
    let planes = random_vec(n_planes, 1.0, 8);
    let pts = random_vec(3 * 7, 0.9, 9);
    let fixed: Vec<[f64; 3]> = pts.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
    let weights = random_vec(7 * ch, 1.0, 10);

    let w1 = weights.clone();
    let fixed = Arc::new(fixed);
    check(
        move |t: &mut Tape, p: Var| {
            let w = t.constant(w1.clone());
            let f = t.gather(p, res, ch, fixed.clone());
            let f = t.mul(f, w);
            let f = t.mul(f, f);
            Ok(t.sum(f))
        },
        &planes,
        1e-3,
        1e-7,
    );

    let mut x = planes.clone();
    x.extend(&pts);
    check(
        move |t: &mut Tape, p: Var| {
            let w = t.constant(weights.clone());
            let pl = t.slice(p, 0..n_planes);
            let q = t.slice(p, n_planes..n_planes + 21);
            let f = t.gather_at(pl, res, ch, q);
            let f = t.mul(f, w);
            let f = t.mul(f, f);
            Ok(t.sum(f))
        },
        &x,
        1e-6,
        1e-5,
    );
}

#[test]
fn sample_planes_gradient() {
    let (res, ch) = (4, 2);
    let planes = random_vec(3 * res * res * ch, 1.0, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let uvs = Arc::new(tp4d_core::triplane::random_plane_samples(9, &mut rng));
    check(
        move |t: &mut Tape, p: Var| {
            let s = t.sample_planes(p, res, ch, uvs.clone());
            let s = t.mul(s, s);
            Ok(t.sum(s))
        },
        &planes,
        1e-5,
        1e-7,
    );
}

#[test]
fn quat_rotate_gradient() {
    let mut x = vec![0.9, 0.2, -0.3, 0.4];
    x.extend(random_vec(3 * 5, 1.0, 13));
    let target = random_vec(15, 1.0, 14);
    check(
        move |t: &mut Tape, p: Var| {
            let q = t.slice(p, 0..4);
            let pts = t.slice(p, 4..19);
            let r = t.quat_rotate(q, pts, [0.1, -0.2, 0.05]);
            let tg = t.constant(target.clone());
            let d = t.sub(r, tg);
            let d = t.mul(d, d);
            Ok(t.sum(d))
        },
        &x,
        1e-6,
        1e-6,
    );
}

#[test]
fn upsample_pool_and_clamp() {
    let (res, ch) = (3, 4);
    let x: Vec<f64> = random_vec(res * res * ch, 0.4, 15).iter().map(|v| v + 0.5).collect();
    let w = random_vec(12 * 12 * 3, 1.0, 16);
    check(
        move |t: &mut Tape, p: Var| {
            let u = t.upsample(p, res, ch, 4);
            let u = t.clamp01(u);
            let wt = t.constant(w.clone());
            let a = t.mul(u, wt);
            let a = t.mul(a, a);
            let pooled = t.avg_pool2(a, 12, 3);
            let pooled = t.mul(pooled, pooled);
            Ok(t.sum(pooled))
        },
        &x,
        1e-6,
        1e-6,
    );
}

fn composite_chain(rays: usize, samples: usize, seed: u64) -> (impl Fn(&mut Tape, Var) -> Result<Var>, Vec<f64>) {
    let ch = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut depths = Vec::new();
    let mut deltas = Vec::new();
    for _ in 0..rays {
        let mut t = 3.0;
        for _ in 0..samples {
            let d = rng.random_range(0.005..0.04);
            depths.push(t);
            deltas.push(d);
            t += d;
        }
    }
    let layout = CompositeLayout {
        rays,
        samples,
        channels: ch,
        depths: Arc::new(depths),
        deltas: Arc::new(deltas),
    };
    let target = random_vec(rays * (ch + 2), 1.0, seed + 1);
    let ns = rays * samples;
    let x = random_vec(ns + ns * ch, 2.0, seed + 2);
    let prog = move |t: &mut Tape, p: Var| -> Result<Var> {
        let s = t.slice(p, 0..ns);
        let s = t.softplus(s);
        let c = t.slice(p, ns..ns + ns * ch);
        let c = t.sigmoid(c);
        let o = t.composite(s, c, layout.clone());
        let tg = t.constant(target.clone());
        let d = t.sub(o, tg);
        let d = t.mul(d, d);
        Ok(t.sum(d))
    };
    (prog, x)
}

#[test]
fn composite_chain_over_96_samples() {
    let (prog, x) = composite_chain(2, 96, 17);
    let r = finite_difference_check(&prog, &x, 1e-3, &all(x.len())).unwrap();
    assert!(r.max_relative_error < 1e-3, "{r:?}");
}

#[test]
fn constant_program_has_zero_gradient() {
    let prog = |t: &mut Tape, _x: Var| -> Result<Var> {
        let c = t.constant(vec![1.0, 2.0]);
        Ok(t.sum(c))
    };
    let (v, g) = forward_and_backward(&prog, &[0.3, 0.4, 0.5]).unwrap();
    assert_eq!(v, 3.0);
    assert_eq!(g, vec![0.0; 3]);

    let unused = |t: &mut Tape, x: Var| -> Result<Var> {
        let z = t.scale(x, 0.0);
        Ok(t.sum(z))
    };
    let (_, g) = forward_and_backward(&unused, &[0.3, 0.4]).unwrap();
    assert_eq!(g, vec![0.0; 2]);
}

#[test]
fn nested_differentiation_is_rejected() {
    let mut t = Tape::new();
    let x = t.param(vec![2.0]);
    let y = t.mul(x, x);
    t.backward(y).unwrap();
    assert!(matches!(t.backward(y), Err(Error::NestedDifferentiation)));
}

#[test]
fn unknown_primitive_is_rejected() {
    let mut t = Tape::new();
    let x = t.param(vec![2.0]);
    assert!(matches!(t.apply("lgamma", &[x]), Err(Error::UnknownPrimitive(name)) if name == "lgamma"));
    let y = t.apply("mul", &[x, x]).unwrap();
    assert_eq!(t.value(y), &[4.0]);
}

#[test]
fn gradients_do_not_depend_on_thread_count() {
    let (prog, x) = composite_chain(300, 16, 21);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| forward_and_backward(&prog, &x).unwrap())
    };
    let a = run(1);
    let b = run(4);
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert!(a.1.iter().zip(&b.1).all(|(p, q)| p.to_bits() == q.to_bits()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gradient_is_linear_in_the_program(x in prop::collection::vec(-2.0f64..2.0, 5)) {
        let f = |t: &mut Tape, p: Var| -> Result<Var> {
            let s = t.softplus(p);
            let s = t.mul(s, p);
            Ok(t.sum(s))
        };
        let g = |t: &mut Tape, p: Var| -> Result<Var> {
            let s = t.tanh(p);
            let s = t.exp(s);
            Ok(t.mean(s))
        };
        let both = |t: &mut Tape, p: Var| -> Result<Var> {
            let a = f(t, p)?;
            let b = g(t, p)?;
            Ok(t.add(a, b))
        };
        let (_, gf) = forward_and_backward(&f, &x).unwrap();
        let (_, gg) = forward_and_backward(&g, &x).unwrap();
        let (_, gs) = forward_and_backward(&both, &x).unwrap();
        for i in 0..x.len() {
            prop_assert!((gs[i] - gf[i] - gg[i]).abs() < 1e-12);
        }
    }
}
