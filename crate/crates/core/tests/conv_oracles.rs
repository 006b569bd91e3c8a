mod common;

use common::*;
use fnet_core::backbone::{backbone_forward, prpe_forward, BackboneConfig, ConvSpec, PrpeBlockConfig};
use fnet_core::tensor::{ops, Tensor};
use rand::Rng;

const TOL: f64 = 1e-5;

#[test]
fn conv2d_matches_naive_loops() {
    let mut r = rng(1);
    for _ in 0..40 {
        let (n, c, h, w) = (r.random_range(1..3), r.random_range(1..4), r.random_range(4..10), r.random_range(4..10));
        let (o, k, stride, pad) = (r.random_range(1..5), r.random_range(1..4), r.random_range(1..3), r.random_range(0..2));
        let x = rand_tensor(&[n, c, h, w], &mut r, -1.0, 1.0);
        let wt = rand_tensor(&[o, c, k, k], &mut r, -1.0, 1.0);
        let got = ops::conv2d(&x, &wt, stride, pad).unwrap();
        assert!(max_abs_diff(&got, &naive_conv2d(&x, &wt, stride, pad)) < TOL);
    }
}

#[test]
fn depthwise_matches_naive_loops() {
    let mut r = rng(2);
    for _ in 0..40 {
        let (n, c, h, w) = (r.random_range(1..3), r.random_range(1..5), r.random_range(3..10), r.random_range(3..10));
        let (stride, pad) = (r.random_range(1..3), r.random_range(0..2));
        let x = rand_tensor(&[n, c, h, w], &mut r, -1.0, 1.0);
        let wt = rand_tensor(&[c, 1, 3, 3], &mut r, -1.0, 1.0);
        let got = ops::depthwise_conv2d(&x, &wt, stride, pad).unwrap();
        assert!(max_abs_diff(&got, &naive_depthwise(&x, &wt, stride, pad)) < TOL);
    }
}

#[test]
fn pointwise_matches_naive_and_full_conv() {
    let mut r = rng(3);
    for _ in 0..40 {
        let (n, c, h, w, o) = (r.random_range(1..3), r.random_range(1..6), r.random_range(1..8), r.random_range(1..8), r.random_range(1..6));
        let x = rand_tensor(&[n, c, h, w], &mut r, -1.0, 1.0);
        let wt = rand_tensor(&[o, c, 1, 1], &mut r, -1.0, 1.0);
        let got = ops::pointwise_conv(&x, &wt).unwrap();
        assert!(max_abs_diff(&got, &naive_pointwise(&x, &wt)) < TOL);
        assert!(max_abs_diff(&got, &naive_conv2d(&x, &wt, 1, 0)) < TOL);
    }
}

#[test]
fn depthwise_equals_grouped_full_conv() {
    // a full conv whose weights are zero off the channel diagonal
    let mut r = rng(4);
    let (c, h) = (3, 7);
    let x = rand_tensor(&[1, c, h, h], &mut r, -1.0, 1.0);
    let dw = rand_tensor(&[c, 1, 3, 3], &mut r, -1.0, 1.0);
    let full = Tensor::from_fn(&[c, c, 3, 3], |i| {
        let (o, ic, k) = (i / (c * 9), (i / 9) % c, i % 9);
        if o == ic {
            dw.data()[o * 9 + k]
        } else {
            0.0
        }
    });
    let a = ops::depthwise_conv2d(&x, &dw, 2, 1).unwrap();
    let b = naive_conv2d(&x, &full, 2, 1);
    assert!(max_abs_diff(&a, &b) < TOL);
}

fn single_block_config(block: &PrpeBlockConfig, size: usize) -> BackboneConfig {
    BackboneConfig {
        input_size: (size, size),
        stem: ConvSpec { out_channels: block.in_channels, kernel: 1, stride: 1, pad: 0 },
        stages: vec![block.clone()],
        hub_taps: vec![],
        feature_dim: block.out_channels,
    }
}

#[test]
fn prpe_block_matches_composed_oracle() {
    let mut r = rng(5);
    for (cin, mid, cout, stride, branches) in [(4, 3, 4, 1, 2), (3, 5, 6, 2, 2), (2, 2, 2, 1, 1), (2, 4, 8, 2, 3)] {
        let block = PrpeBlockConfig { branches, ..PrpeBlockConfig::new(cin, mid, cout, stride) };
        let cfg = single_block_config(&block, 9);
        let p = rand_params(&cfg, &mut r, 0.7);
        let x = rand_tensor(&[2, cin, 9, 9], &mut r, -1.0, 1.0);
        let got = prpe_forward(&x, &block, &p, "stage0").unwrap();
        let want = naive_prpe(&x, &block, &p, "stage0");
        assert!(max_abs_diff(&got, &want) < TOL, "{block:?}");
        if stride == 2 {
            assert_eq!(got.shape()[2], 5);
        }
    }
}

#[test]
fn backbone_with_hubs_matches_composed_oracle() {
    let cfg = BackboneConfig {
        input_size: (16, 16),
        stem: ConvSpec { out_channels: 3, kernel: 3, stride: 2, pad: 1 },
        stages: vec![
            PrpeBlockConfig::new(3, 3, 3, 1),
            PrpeBlockConfig::new(3, 3, 5, 2),
            PrpeBlockConfig::new(5, 4, 6, 2),
        ],
        hub_taps: vec![(0, 1), (0, 2), (1, 2)],
        feature_dim: 6,
    };
    let mut r = rng(6);
    let p = rand_params(&cfg, &mut r, 0.6);
    let x = rand_tensor(&[2, 1, 16, 16], &mut r, 0.0, 1.0);
    let got = backbone_forward(&x, &cfg, &p).unwrap();

    let stem = naive_bias_relu(&naive_conv2d(&x, p.get("stem.w").unwrap(), 2, 1), p.get("stem.b").unwrap());
    let mut outs: Vec<Tensor<f64>> = Vec::new();
    let mut h = stem;
    for (i, block) in cfg.stages.iter().enumerate() {
        h = naive_prpe(&h, block, &p, &format!("stage{i}"));
        for (j, &(src, dst)) in cfg.hub_taps.iter().enumerate() {
            if dst == i {
                let factor = outs[src].shape()[2] / h.shape()[2];
                let pooled = naive_avg_pool(&outs[src], factor);
                h = naive_add(&h, &naive_pointwise(&pooled, p.get(&format!("hub{j}.w")).unwrap()));
            }
        }
        outs.push(h.clone());
    }
    let s = h.shape();
    let plane = (s[2] * s[3]) as f64;
    let want = Tensor::from_fn(&[s[0], s[1]], |i| {
        let base = i * s[2] * s[3];
        h.data()[base..base + s[2] * s[3]].iter().sum::<f64>() / plane
    });
    assert!(max_abs_diff(&got, &want) < TOL);
}
