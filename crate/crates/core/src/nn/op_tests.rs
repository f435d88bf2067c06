use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::{CladError, Result};

type Build = dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

/// Reduces an arbitrary-shaped output to a scalar with fixed random weights
/// so every output entry influences the checked gradient.
fn scalarize(g: &mut Graph, out: Var, seed: u64) -> Var {
    let [r, c] = g.shape(out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = g.constant(Tensor::uniform(r, c, 1.0, &mut rng));
    let m = g.mul(out, w).unwrap();
    g.sum(m)
}

fn check_grad(inputs: &[Tensor], build: &Build, seed: u64) {
    let eval = |xs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars).unwrap();
        let s = scalarize(&mut g, out, seed);
        g.value(s).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    let s = scalarize(&mut g, out, seed);
    g.backward(s).unwrap();
    let h = 1e-5;
    for (i, v) in vars.iter().enumerate() {
        let an = g
            .grad(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].rows(), inputs[i].cols()));
        for k in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[k] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[k] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = an.data()[k];
            let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
            assert!(
                rel < 1e-4,
                "input {i}[{k}] seed {seed}: analytic {a} vs numeric {fd}"
            );
        }
    }
}

fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::uniform(r, c, 1.0, rng)
}

fn for_seeds(f: impl Fn(u64, &mut ChaCha8Rng)) {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        f(seed, &mut rng);
    }
}

#[test]
fn grad_matmul_add_sub_mul_scale() {
    for_seeds(|seed, rng| {
        let ins = [rand_t(rng, 3, 4), rand_t(rng, 4, 2), rand_t(rng, 3, 2)];
        check_grad(
            &ins,
            &|g, v| {
                let m = g.matmul(v[0], v[1])?;
                let a = g.add(m, v[2])?;
                let s = g.sub(a, v[2])?;
                let p = g.mul(s, v[2])?;
                Ok(g.scale(p, -1.7))
            },
            seed,
        );
    });
}

#[test]
fn grad_activations() {
    for_seeds(|seed, rng| {
        // Keep relu inputs away from the kink.
        let mut x = rand_t(rng, 3, 5);
        x.data_mut().iter_mut().for_each(|v| {
            if v.abs() < 0.05 {
                *v += 0.1
            }
        });
        check_grad(
            &[x],
            &|g, v| {
                let a = g.tanh(v[0])?;
                let b = g.sigmoid(v[0])?;
                let c = g.relu(v[0])?;
                let d = g.exp(v[0])?;
                let ab = g.add(a, b)?;
                let cd = g.mul(c, d)?;
                g.add(ab, cd)
            },
            seed,
        );
    });
}

#[test]
fn grad_log_softmax_both_axes() {
    for_seeds(|seed, rng| {
        check_grad(
            &[rand_t(rng, 3, 4)],
            &|g, v| {
                let a = g.log_softmax(v[0], 1)?;
                let b = g.log_softmax(v[0], 0)?;
                g.add(a, b)
            },
            seed,
        );
    });
}

#[test]
fn grad_structural_ops() {
    for_seeds(|seed, rng| {
        let ins = [
            rand_t(rng, 4, 3),
            rand_t(rng, 2, 3),
            rand_t(rng, 1, 3),
            rand_t(rng, 4, 1),
        ];
        check_grad(
            &ins,
            &|g, v| {
                let rows = g.concat_rows(&[v[0], v[1]])?; // 6x3
                let sl = g.slice_rows(rows, 1, 5)?; // 4x3
                let cols = g.concat_cols(&[sl, v[3]])?; // 4x4
                let sc = g.slice_cols(cols, 1, 4)?; // 4x3
                let b = g.add_bias(sc, v[2])?;
                let t = g.transpose(b); // 3x4
                let r = g.reshape(t, 6, 2)?;
                let blocks = g.sum_row_blocks(r, 2)?; // 2x2
                let sel = g.select(rows, &[(0, 0), (5, 2), (0, 0)])?;
                let s1 = g.sum(blocks);
                let s2 = g.sum(sel);
                let s = g.add(s1, s2)?;
                let scaled = g.scale_rows(v[0], v[3])?;
                let s3 = g.mean(scaled);
                g.add(s, s3)
            },
            seed,
        );
    });
}

#[test]
fn grad_normalize_gather_memory() {
    for_seeds(|seed, rng| {
        let ins = [rand_t(rng, 5, 3), rand_t(rng, 4, 3)];
        check_grad(
            &ins,
            &|g, v| {
                let n = g.normalize_rows(v[0])?;
                let gathered = g.gather_rows(v[0], &[4, 0, 4, 2])?;
                let mem = g.memory(v[0], v[1], 2, 1)?;
                let nt = g.transpose(n);
                let sim = g.matmul(gathered, nt)?; // 4x5
                let ms = g.sum(mem);
                let ss = g.sum(sim);
                g.add(ms, ss)
            },
            seed,
        );
    });
}

#[test]
fn grad_gru_gates() {
    for_seeds(|seed, rng| {
        let (b, h) = (1 + seed as usize % 3, 2 + seed as usize % 2);
        let inputs = [
            rand_t(rng, b, 3 * h),
            rand_t(rng, b, 3 * h),
            rand_t(rng, b, h),
        ];
        check_grad(&inputs, &|g, v| g.gru_gates(v[0], v[1], v[2]), seed);
    });
}

#[test]
fn gru_gates_match_the_composed_cell() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = 4;
    let mut g = Graph::new();
    let x = g.constant(rand_t(&mut rng, 2, 3 * h));
    let u = g.constant(rand_t(&mut rng, 2, 3 * h));
    let hp = g.constant(rand_t(&mut rng, 2, h));
    let fused = g.gru_gates(x, u, hp).unwrap();
    let part = |g: &mut Graph, v: Var, k: usize| g.slice_cols(v, k * h, (k + 1) * h).unwrap();
    let (xz, uz, xr, ur, xn, un) = (
        part(&mut g, x, 0),
        part(&mut g, u, 0),
        part(&mut g, x, 1),
        part(&mut g, u, 1),
        part(&mut g, x, 2),
        part(&mut g, u, 2),
    );
    let zp = g.add(xz, uz).unwrap();
    let z = g.sigmoid(zp).unwrap();
    let rp = g.add(xr, ur).unwrap();
    let r = g.sigmoid(rp).unwrap();
    let ru = g.mul(r, un).unwrap();
    let np = g.add(xn, ru).unwrap();
    let n = g.tanh(np).unwrap();
    let d = g.sub(hp, n).unwrap();
    let zd = g.mul(z, d).unwrap();
    let composed = g.add(n, zd).unwrap();
    for (a, b) in g.value(fused).data().iter().zip(g.value(composed).data()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn overlapping_slices_accumulate() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let a = g.slice_rows(x, 0, 2).unwrap();
    let b = g.slice_rows(x, 1, 3).unwrap();
    let c = g.slice_cols(x, 1, 2).unwrap();
    let (sa, sb, sc) = (g.sum(a), g.sum(b), g.sum(c));
    let ab = g.add(sa, sb).unwrap();
    let s = g.add(ab, sc).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 2.0, 2.0, 3.0, 1.0, 2.0]);
}

#[test]
fn identity_and_zero_laws() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_t(&mut rng, 3, 3);
    let mut g = Graph::new();
    let i = g.constant(Tensor::identity(3));
    let xv = g.constant(x.clone());
    let z = g.constant(Tensor::zeros(3, 3));
    let ix = g.matmul(i, xv).unwrap();
    let x0 = g.add(xv, z).unwrap();
    assert_eq!(g.value(ix), &x);
    assert_eq!(g.value(x0), &x);
}

#[test]
fn activation_fixed_points() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::scalar(0.0));
    let t = g.tanh(z).unwrap();
    let s = g.sigmoid(z).unwrap();
    assert_eq!(g.value(t).item(), 0.0);
    assert_eq!(g.value(s).item(), 0.5);
}

#[test]
fn log_softmax_uniform_and_extreme() {
    let mut g = Graph::new();
    let u = g.constant(Tensor::filled(1, 7, 3.25));
    let l = g.log_softmax(u, 1).unwrap();
    for &v in g.value(l).data() {
        assert!((v + 7f64.ln()).abs() < 1e-15);
    }
    // Reference for [1000, 0]: lse = 1000 + ln(1 + e^-1000) = 1000 + e^-1000 (to double precision).
    let x = g.constant(Tensor::row_vector(vec![1000.0, 0.0]));
    let l = g.log_softmax(x, 1).unwrap();
    let out = g.value(l).data();
    assert!(out.iter().all(|v| v.is_finite()));
    assert_eq!(out[0], -(-1000f64).exp());
    assert_eq!(out[1], -1000.0);
}

#[test]
fn non_finite_inputs_are_rejected() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::row_vector(vec![f64::NAN, 1.0]));
    assert!(matches!(g.log_softmax(x, 1), Err(CladError::Numeric(_))));
    assert!(matches!(g.tanh(x), Err(CladError::Numeric(_))));
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(2, 2));
    assert!(matches!(g.backward(x), Err(CladError::Contract(_))));
}

#[test]
fn square_gradient_is_twice_x() {
    let x = Tensor::row_vector(vec![1.5, -2.0, 0.0]);
    let mut g = Graph::new();
    let v = g.param(x.clone());
    let sq = g.mul(v, v).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(v).unwrap(), &x.scaled(2.0));
}

#[test]
fn gradients_accumulate_until_zeroed() {
    let mut g = Graph::new();
    let v = g.param(Tensor::row_vector(vec![0.3, 0.7]));
    let t = g.tanh(v).unwrap();
    let s = g.sum(t);
    g.backward(s).unwrap();
    let once = g.grad(v).unwrap().clone();
    g.backward(s).unwrap();
    assert_eq!(g.grad(v).unwrap(), &once.scaled(2.0));
    g.zero_grad();
    g.backward(s).unwrap();
    assert_eq!(g.grad(v).unwrap(), &once);
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::scalar(2.0));
    let p = g.param(Tensor::scalar(3.0));
    let m = g.mul(c, p).unwrap();
    g.backward(m).unwrap();
    assert!(g.grad(c).is_none());
    assert_eq!(g.grad(p).unwrap().item(), 2.0);
}

proptest! {
    #[test]
    fn log_softmax_sums_to_one_and_is_shift_invariant(
        xs in prop::collection::vec(-30.0f64..30.0, 1..12),
        shift in -50.0f64..50.0,
    ) {
        let mut g = Graph::new();
        let a = g.constant(Tensor::row_vector(xs.clone()));
        let b = g.constant(Tensor::row_vector(xs.iter().map(|v| v + shift).collect()));
        let la = g.log_softmax(a, 1).unwrap();
        let lb = g.log_softmax(b, 1).unwrap();
        let total: f64 = g.value(la).data().iter().map(|v| v.exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        for (x, y) in g.value(la).data().iter().zip(g.value(lb).data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_t(&mut rng, 2, 3);
        let w = rand_t(&mut rng, 3, 2);
        let grad_of = |ca: f64, cb: f64| -> Tensor {
            let mut g = Graph::new();
            let xv = g.param(x.clone());
            let wv = g.constant(w.clone());
            let m = g.matmul(xv, wv).unwrap();
            let t = g.tanh(m).unwrap();
            let l1 = g.sum(t);
            let sq = g.mul(xv, xv).unwrap();
            let l2 = g.sum(sq);
            let s1 = g.scale(l1, ca);
            let s2 = g.scale(l2, cb);
            let l = g.add(s1, s2).unwrap();
            g.backward(l).unwrap();
            g.grad(xv).unwrap().clone()
        };
        let combined = grad_of(a, b);
        let g1 = grad_of(1.0, 0.0);
        let g2 = grad_of(0.0, 1.0);
        for k in 0..combined.len() {
            let lin = a * g1.data()[k] + b * g2.data()[k];
            prop_assert!((combined.data()[k] - lin).abs() < 1e-10);
        }
    }
}
