#![allow(dead_code)]

use dcss_core::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

pub mod grad_check {
    use super::*;

    const H: f64 = 1e-4;

    /// Max-norm relative error between the backward pass and central
    /// differences of `f`, over every input.
    pub fn check(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_requires_grad(true))).collect();
        let out = f(&mut tape, &vars);
        let grads = tape.backward(out).expect("scalar output");
        let eval = |ins: &[Tensor]| -> f64 {
            let mut t = Tape::new();
            let vs: Vec<Var> = ins.iter().map(|x| t.constant(x.clone())).collect();
            let o = f(&mut t, &vs);
            t.value(o).item()
        };
        let mut worst: f64 = 0.0;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; input.numel()]);
            let mut numeric = Vec::with_capacity(input.numel());
            for i in 0..input.numel() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += H;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= H;
                numeric.push((eval(&plus) - eval(&minus)) / (2.0 * H));
            }
            let diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
            let scale = analytic
                .iter()
                .chain(&numeric)
                .map(|v| v.abs())
                .fold(1e-8, f64::max);
            worst = worst.max(diff / scale);
        }
        worst
    }

    /// `Σ op(x) ⊙ r` so that every output component contributes.
    fn project(t: &mut Tape, y: Var, seed: u64) -> Var {
        let mut r = rng(seed ^ 0xabcd);
        let w = rand_tensor(&mut r, t.value(y).shape());
        let wv = t.constant(w);
        let p = t.mul(y, wv).unwrap();
        t.sum(p)
    }

    /// Values bounded away from zero so the ReLU kink is never straddled.
    fn away_from_zero(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| {
            let v: f64 = r.random_range(0.05..1.0);
            if r.random_bool(0.5) { v } else { -v }
        })
    }

    /// Relative error per primitive for one seed.
    pub fn all_primitives(seed: u64) -> Vec<(&'static str, f64)> {
        let mut r = rng(seed);
        let mut out = Vec::new();
        let s = seed;

        for (name, cin, cout, k, stride, pad, groups) in [
            ("conv2d 3x3", 2, 3, 3, 1, 1, 1),
            ("conv2d stride 2", 2, 3, 3, 2, 1, 1),
            ("conv2d grouped", 4, 2, 3, 1, 1, 2),
            ("conv2d depthwise 5x5", 3, 3, 5, 1, 2, 3),
            ("conv2d 1x1", 3, 2, 1, 1, 0, 1),
        ] {
            let x = rand_tensor(&mut r, &[2, cin, 5, 4]);
            let w = rand_tensor(&mut r, &[cout, cin / groups, k, k]);
            let e = check(&[x, w], |t, v| {
                let y = t.conv2d(v[0], v[1], stride, pad, groups).unwrap();
                project(t, y, s)
            });
            out.push((name, e));
        }

        for f in [2usize, 4] {
            let x = rand_tensor(&mut r, &[1, 2, 3, 2]);
            let e = check(&[x], |t, v| {
                let y = t.bilinear_upsample(v[0], f).unwrap();
                project(t, y, s)
            });
            out.push(("bilinear_upsample", e));
        }

        for training in [true, false] {
            let x = rand_tensor(&mut r, &[3, 2, 2, 3]);
            let g = rand_tensor(&mut r, &[2]);
            let b = rand_tensor(&mut r, &[2]);
            let e = check(&[x, g, b], |t, v| {
                let mut running = [0.1, -0.2, 0.7, 1.3];
                let y = t.batch_norm(v[0], v[1], v[2], &mut running, training).unwrap();
                project(t, y, s)
            });
            out.push((if training { "batch_norm train" } else { "batch_norm eval" }, e));
        }

        let x = away_from_zero(&mut r, &[2, 3, 2]);
        out.push(("relu", check(&[x], |t, v| {
            let y = t.relu(v[0]);
            project(t, y, s)
        })));

        let x = Tensor::from_fn(&[7], |_| r.random_range(-6.0..6.0));
        out.push(("sigmoid", check(&[x.clone()], |t, v| {
            let y = t.sigmoid(v[0]);
            project(t, y, s)
        })));
        out.push(("softplus", check(&[x], |t, v| {
            let y = t.softplus(v[0]);
            project(t, y, s)
        })));

        for axis in [0usize, 1] {
            let x = Tensor::from_fn(&[3, 4], |_| r.random_range(-3.0..3.0));
            out.push(("softmax", check(&[x.clone()], |t, v| {
                let y = t.softmax(v[0], axis).unwrap();
                project(t, y, s)
            })));
            out.push(("log_softmax", check(&[x], |t, v| {
                let y = t.log_softmax(v[0], axis).unwrap();
                project(t, y, s)
            })));
        }

        let a = rand_tensor(&mut r, &[2, 3]);
        let b = rand_tensor(&mut r, &[2, 3]);
        out.push(("add", check(&[a.clone(), b.clone()], |t, v| {
            let y = t.add(v[0], v[1]).unwrap();
            project(t, y, s)
        })));
        out.push(("mul", check(&[a.clone(), b.clone()], |t, v| {
            let y = t.mul(v[0], v[1]).unwrap();
            project(t, y, s)
        })));
        out.push(("affine", check(&[a.clone()], |t, v| {
            let y = t.affine(v[0], -1.7, 0.3);
            project(t, y, s)
        })));
        out.push(("sum", check(&[a], |t, v| {
            let y = t.sum(v[0]);
            t.affine(y, 2.5, 0.0)
        })));

        let p = rand_tensor(&mut r, &[2, 1, 2, 2]);
        let q = rand_tensor(&mut r, &[2, 3, 2, 2]);
        out.push(("concat", check(&[p, q], |t, v| {
            let y = t.concat(&[v[0], v[1]], 1).unwrap();
            project(t, y, s)
        })));

        let x = rand_tensor(&mut r, &[2, 4, 2, 2]);
        out.push(("index_select", check(&[x.clone()], |t, v| {
            let y = t.index_select(v[0], 1, &[3, 1]).unwrap();
            project(t, y, s)
        })));
        let src = rand_tensor(&mut r, &[2, 2, 2, 2]);
        out.push(("index_replace", check(&[x, src], |t, v| {
            let y = t.index_replace(v[0], v[1], 1, &[0, 2]).unwrap();
            project(t, y, s)
        })));

        let xs: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut r, &[2, 2, 2])).collect();
        let w = rand_tensor(&mut r, &[3]);
        let mut ins = xs.clone();
        ins.push(w);
        out.push(("weighted_sum", check(&ins, |t, v| {
            let y = t.weighted_sum(&v[..3], v[3]).unwrap();
            project(t, y, s)
        })));

        let logits = Tensor::from_fn(&[2, 3, 2, 2], |_| r.random_range(-2.0..2.0));
        let labels: Vec<u8> = (0..8).map(|i| if i == 5 { 255 } else { r.random_range(0..3u8) }).collect();
        out.push(("cross_entropy", check(&[logits], |t, v| {
            let l = t.cross_entropy(v[0], &labels, 255).unwrap();
            t.affine(l, 3.0, 0.0)
        })));

        out
    }
}
