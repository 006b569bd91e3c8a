//! Shared helpers for integration tests: random tensors, naive convolution
//! oracles, a loop-level PRPE reference and a finite-difference gradient
//! checker.
#![allow(dead_code)]

use fnet_core::backbone::{BackboneConfig, PrpeBlockConfig};
use fnet_core::tensor::{Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Uniform values with magnitude in [margin, hi), random sign; keeps inputs
/// away from the kinks of ReLU and absolute value.
pub fn rand_away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng, margin: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(margin..hi);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn idx4(s: &[usize], a: usize, b: usize, c: usize, d: usize) -> usize {
    ((a * s[1] + b) * s[2] + c) * s[3] + d
}

/// Direct seven-loop cross-correlation with zero padding.
pub fn naive_conv2d(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, k) = (ws[0], ws[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[n, o, oh, ow]);
    let os = out.shape().to_vec();
    for b in 0..n {
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let r = (i * stride + ki) as isize - pad as isize;
                                let q = (j * stride + kj) as isize - pad as isize;
                                if r >= 0 && q >= 0 && (r as usize) < h && (q as usize) < wd {
                                    acc += x.data()[idx4(xs, b, ic, r as usize, q as usize)]
                                        * w.data()[idx4(ws, oc, ic, ki, kj)];
                                }
                            }
                        }
                    }
                    out.data_mut()[idx4(&os, b, oc, i, j)] = acc;
                }
            }
        }
    }
    out
}

/// Per-channel convolution, expressed through the full oracle one channel
/// at a time.
pub fn naive_depthwise(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let xs = x.shape();
    let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let k = w.shape()[2];
    let mut parts = Vec::new();
    for ch in 0..c {
        let xc = Tensor::from_fn(&[n, 1, h, wd], |i| {
            let (b, rest) = (i / (h * wd), i % (h * wd));
            x.data()[(b * c + ch) * h * wd + rest]
        });
        let wc = Tensor::new(vec![1, 1, k, k], w.data()[ch * k * k..(ch + 1) * k * k].to_vec()).unwrap();
        parts.push(naive_conv2d(&xc, &wc, stride, pad));
    }
    let (oh, ow) = (parts[0].shape()[2], parts[0].shape()[3]);
    Tensor::from_fn(&[n, c, oh, ow], |i| {
        let plane = oh * ow;
        let (b, ch, rest) = (i / (c * plane), (i / plane) % c, i % plane);
        parts[ch].data()[b * plane + rest]
    })
}

/// 1×1 convolution as a per-pixel matrix-vector product.
pub fn naive_pointwise(x: &Tensor<f64>, w: &Tensor<f64>) -> Tensor<f64> {
    let xs = x.shape();
    let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let o = w.shape()[0];
    let mut out = Tensor::zeros(&[n, o, h, wd]);
    for b in 0..n {
        for p in 0..h * wd {
            for oc in 0..o {
                let mut acc = 0.0;
                for ic in 0..c {
                    acc += w.data()[oc * c + ic] * x.data()[(b * c + ic) * h * wd + p];
                }
                out.data_mut()[(b * o + oc) * h * wd + p] = acc;
            }
        }
    }
    out
}

pub fn naive_bias_relu(x: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let s = x.shape();
    let plane = s[2] * s[3];
    Tensor::from_fn(s, |i| (x.data()[i] + b.data()[(i / plane) % s[1]]).max(0.0))
}

pub fn naive_add(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    Tensor::from_fn(a.shape(), |i| a.data()[i] + b.data()[i])
}

pub fn naive_channel_concat(parts: &[Tensor<f64>]) -> Tensor<f64> {
    let s = parts[0].shape();
    let (n, plane) = (s[0], s[2] * s[3]);
    let total: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut data = Vec::with_capacity(n * total * plane);
    for b in 0..n {
        for p in parts {
            let c = p.shape()[1];
            data.extend_from_slice(&p.data()[b * c * plane..(b + 1) * c * plane]);
        }
    }
    Tensor::new(vec![n, total, s[2], s[3]], data).unwrap()
}

pub fn naive_avg_pool(x: &Tensor<f64>, k: usize) -> Tensor<f64> {
    let s = x.shape();
    let (oh, ow) = (s[2] / k, s[3] / k);
    let mut out = Tensor::zeros(&[s[0], s[1], oh, ow]);
    let os = out.shape().to_vec();
    for b in 0..s[0] {
        for c in 0..s[1] {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for di in 0..k {
                        for dj in 0..k {
                            acc += x.data()[idx4(s, b, c, i * k + di, j * k + dj)];
                        }
                    }
                    out.data_mut()[idx4(&os, b, c, i, j)] = acc / (k * k) as f64;
                }
            }
        }
    }
    out
}

/// PRPE block composed from the naive oracles.
pub fn naive_prpe(x: &Tensor<f64>, block: &PrpeBlockConfig, p: &ParamStore<f64>, prefix: &str) -> Tensor<f64> {
    let g = |n: &str| p.get(&format!("{prefix}.{n}")).unwrap();
    let proj = naive_bias_relu(&naive_pointwise(x, g("p1.w")), g("p1.b"));
    let branches: Vec<Tensor<f64>> = (0..block.branches)
        .map(|b| {
            let d = naive_depthwise(&proj, g(&format!("dw{b}.w")), block.stride, 1);
            naive_bias_relu(&d, g(&format!("dw{b}.b")))
        })
        .collect();
    let cat = naive_channel_concat(&branches);
    let proj2 = naive_bias_relu(&naive_pointwise(&cat, g("p2.w")), g("p2.b"));
    let expanded = naive_pointwise(&proj2, g("e.w"));
    let skip = if block.stride == 1 {
        x.clone()
    } else {
        naive_conv2d(x, g("skip.w"), block.stride, 0)
    };
    naive_add(&skip, &expanded)
}

/// Random f64 parameters for every tensor of `cfg`, biases included.
pub fn rand_params(cfg: &BackboneConfig, rng: &mut ChaCha8Rng, scale: f64) -> ParamStore<f64> {
    let mut p = ParamStore::new();
    for (name, shape) in cfg.param_shapes() {
        p.insert(name, rand_tensor(&shape, rng, -scale, scale));
    }
    p
}

pub fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for relative gradient error, so entries whose true
/// gradient is zero are compared absolutely.
pub const REL_FLOOR: f64 = 1e-4;

/// Builds `sum(op(inputs) * r)` for a fixed random `r`, compares reverse-mode
/// gradients of every input against central differences and returns the
/// largest relative error.
pub fn grad_check<F>(inputs: &[Tensor<f64>], seed: u64, op: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let forward = |vals: &[Tensor<f64>], r: Option<&Tensor<f64>>| {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone())).collect();
        let y = op(&mut g, &vars);
        let shape = g.value(y).shape().to_vec();
        let r = match r {
            Some(r) => r.clone(),
            None => rand_tensor(&shape, &mut rng(seed), -1.0, 1.0),
        };
        let rv = g.leaf(r.clone());
        let prod = g.mul(y, rv).unwrap();
        let loss = g.sum(prod);
        (g, vars, loss, r)
    };
    let (g, vars, loss, r) = forward(inputs, None);
    let grads = g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v);
        for j in 0..inputs[i].numel() {
            let eval = |delta: f64| {
                let mut vals = inputs.to_vec();
                vals[i].data_mut()[j] += delta;
                let (g, _, loss, _) = forward(&vals, Some(&r));
                g.value(loss).item()
            };
            let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Shape generators shared by the gradient checks.
pub fn rand_dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize) {
    (
        rng.random_range(1..3),
        rng.random_range(1..4),
        rng.random_range(3..7),
        rng.random_range(3..7),
    )
}

/// Every differentiable op with a random-case generator. Each entry returns
/// the worst relative error over `cases` random cases.
pub fn all_op_checks(cases: usize) -> Vec<(&'static str, f64)> {
    type Check = fn(&mut ChaCha8Rng, u64) -> f64;
    let checks: Vec<(&str, Check)> = vec![
        ("conv2d", |r, s| {
            let (n, c, h, w) = rand_dims(r);
            let o = r.random_range(1..4);
            let k = r.random_range(1..4).min(h).min(w);
            let stride = r.random_range(1..3);
            let pad = r.random_range(0..2);
            let x = rand_tensor(&[n, c, h, w], r, -1.0, 1.0);
            let wt = rand_tensor(&[o, c, k, k], r, -1.0, 1.0);
            grad_check(&[x, wt], s, |g, v| g.conv2d(v[0], v[1], stride, pad).unwrap())
        }),
        ("depthwise_conv2d", |r, s| {
            let (n, c, h, w) = rand_dims(r);
            let stride = r.random_range(1..3);
            let x = rand_tensor(&[n, c, h, w], r, -1.0, 1.0);
            let wt = rand_tensor(&[c, 1, 3, 3], r, -1.0, 1.0);
            grad_check(&[x, wt], s, |g, v| g.depthwise_conv2d(v[0], v[1], stride, 1).unwrap())
        }),
        ("pointwise_conv", |r, s| {
            let (n, c, h, w) = rand_dims(r);
            let o = r.random_range(1..5);
            let x = rand_tensor(&[n, c, h, w], r, -1.0, 1.0);
            let wt = rand_tensor(&[o, c, 1, 1], r, -1.0, 1.0);
            grad_check(&[x, wt], s, |g, v| g.pointwise_conv(v[0], v[1]).unwrap())
        }),
        ("bias_add", |r, s| {
            let (n, c, h, w) = rand_dims(r);
            let x = rand_tensor(&[n, c, h, w], r, -1.0, 1.0);
            let b = rand_tensor(&[c], r, -1.0, 1.0);
            grad_check(&[x, b], s, |g, v| g.bias_add(v[0], v[1]).unwrap())
        }),
        ("dense", |r, s| {
            let (n, f, o) = (r.random_range(1..5), r.random_range(1..6), r.random_range(1..4));
            let x = rand_tensor(&[n, f], r, -1.0, 1.0);
            let w = rand_tensor(&[f, o], r, -1.0, 1.0);
            let b = rand_tensor(&[o], r, -1.0, 1.0);
            grad_check(&[x, w, b], s, |g, v| g.dense(v[0], v[1], v[2]).unwrap())
        }),
        ("relu", |r, s| {
            let (n, c, h, w) = rand_dims(r);
            let x = rand_away_from_zero(&[n, c, h, w], r, 1e-2, 1.0);
            grad_check(&[x], s, |g, v| g.relu(v[0]))
        }),
        ("global_avg_pool", |r, s| {
            let (n, c, h, w) = rand_dims(r);
            let x = rand_tensor(&[n, c, h, w], r, -1.0, 1.0);
            grad_check(&[x], s, |g, v| g.global_avg_pool(v[0]).unwrap())
        }),
        ("avg_pool", |r, s| {
            let (n, c, h, w) = rand_dims(r);
            let k = r.random_range(1..3);
            let x = rand_tensor(&[n, c, h, w], r, -1.0, 1.0);
            grad_check(&[x], s, |g, v| g.avg_pool(v[0], k).unwrap())
        }),
        ("concat", |r, s| {
            let (n, c, h, w) = rand_dims(r);
            let c2 = r.random_range(1..4);
            let axis = r.random_range(0..4);
            let mut s2 = [n, c, h, w];
            s2[axis] = c2;
            let a = rand_tensor(&[n, c, h, w], r, -1.0, 1.0);
            let b = rand_tensor(&s2, r, -1.0, 1.0);
            grad_check(&[a, b], s, |g, v| g.concat(&[v[0], v[1]], axis).unwrap())
        }),
        ("add", |r, s| {
            let (n, c, h, w) = rand_dims(r);
            let a = rand_tensor(&[n, c, h, w], r, -1.0, 1.0);
            let b = rand_tensor(&[n, c, h, w], r, -1.0, 1.0);
            grad_check(&[a, b], s, |g, v| g.add(v[0], v[1]).unwrap())
        }),
        ("mul", |r, s| {
            let (n, c, h, w) = rand_dims(r);
            let a = rand_tensor(&[n, c, h, w], r, -1.0, 1.0);
            let b = rand_tensor(&[n, c, h, w], r, -1.0, 1.0);
            grad_check(&[a, b], s, |g, v| g.mul(v[0], v[1]).unwrap())
        }),
        ("scale", |r, s| {
            let (n, c, h, w) = rand_dims(r);
            let f = r.random_range(-3.0..3.0);
            let a = rand_tensor(&[n, c, h, w], r, -1.0, 1.0);
            grad_check(&[a], s, move |g, v| g.scale(v[0], f))
        }),
        ("sum", |r, s| {
            let (n, c, h, w) = rand_dims(r);
            let a = rand_tensor(&[n, c, h, w], r, -1.0, 1.0);
            grad_check(&[a], s, |g, v| g.sum(v[0]))
        }),
        ("mae_loss", |r, s| {
            let n = r.random_range(1..10);
            let t = rand_tensor(&[n, 1], r, -1.0, 1.0);
            let d = rand_away_from_zero(&[n, 1], r, 1e-2, 1.0);
            let p = Tensor::from_fn(&[n, 1], |i| t.data()[i] + d.data()[i]);
            grad_check(&[p, t], s, |g, v| g.mae_loss(v[0], v[1]).unwrap())
        }),
    ];
    checks
        .into_iter()
        .enumerate()
        .map(|(k, (name, f))| {
            let mut r = rng(1000 + k as u64);
            let worst = (0..cases)
                .map(|c| f(&mut r, (k * 100 + c) as u64))
                .fold(0.0, f64::max);
            (name, worst)
        })
        .collect()
}
