//! Finite-difference verification of every differentiable op, 100 seeds each
//! (h = 1e-5, double precision, max relative error < 1e-4).

mod common;

use common::{fill, fill_away_from_zero, gradcheck, gradcheck_cfg, GradCheckCfg};
use psm_core::tensor::{Graph, TensorData, Var};

const SEEDS: u64 = 100;

fn sum_of(g: &mut Graph<f64>, v: Var) -> Var {
    g.sum(v)
}

#[test]
fn grad_relu() {
    for seed in 0..SEEDS {
        let x = fill_away_from_zero(&[2, 3], seed, 1e-3);
        gradcheck("relu", &[x], |g, vs| {
            let y = g.relu(vs[0]);
            sum_of(g, y)
        });
    }
}

#[test]
fn grad_sigmoid() {
    for seed in 0..SEEDS {
        let x = fill(&[2, 4], seed, -3.0, 3.0);
        gradcheck("sigmoid", &[x], |g, vs| {
            let y = g.sigmoid(vs[0]);
            sum_of(g, y)
        });
    }
}

#[test]
fn grad_clamp() {
    for seed in 0..SEEDS {
        // keep entries at least 1e-3 from the clamp bounds ±0.8
        let mut x = fill(&[3, 3], seed, -1.5, 1.5);
        for v in x.data_mut() {
            if (v.abs() - 0.8).abs() < 1e-3 {
                *v += 5e-3;
            }
        }
        gradcheck("clamp", &[x], |g, vs| {
            let y = g.clamp(vs[0], -0.8, 0.8);
            sum_of(g, y)
        });
    }
}

#[test]
fn grad_log() {
    for seed in 0..SEEDS {
        let x = fill(&[2, 3], seed, 0.1, 2.0);
        gradcheck("log", &[x], |g, vs| {
            let y = g.log(vs[0]);
            sum_of(g, y)
        });
    }
}

#[test]
fn grad_abs() {
    for seed in 0..SEEDS {
        let x = fill_away_from_zero(&[2, 3], seed, 1e-3);
        gradcheck("abs", &[x], |g, vs| {
            let y = g.abs(vs[0]);
            sum_of(g, y)
        });
    }
}

#[test]
fn grad_add_sub_scale() {
    for seed in 0..SEEDS {
        let a = fill(&[2, 3], seed, -1.0, 1.0);
        let b = fill(&[2, 3], seed + 7000, -1.0, 1.0);
        gradcheck("add+sub+scale", &[a, b], |g, vs| {
            let s = g.add(vs[0], vs[1]).unwrap();
            let d = g.sub(s, vs[1]).unwrap();
            let e = g.scale(d, 1.75);
            let f = g.sub(e, vs[0]).unwrap();
            // f = 0.75*a exercises all three ops with distinct paths to a and b
            let s2 = g.add(f, vs[1]).unwrap();
            sum_of(g, s2)
        });
    }
}

#[test]
fn grad_conv2d_input_and_weight() {
    for seed in 0..SEEDS {
        let x = fill(&[1, 2, 4, 4], seed, -1.0, 1.0);
        let w = fill(&[2, 2, 3, 3], seed + 31_000, -0.6, 0.6);
        gradcheck("conv2d s1 p1", &[x, w], |g, vs| {
            let y = g.conv2d(vs[0], vs[1], 1, 1).unwrap();
            // squash so the scalar target is nonlinear in every output
            let s = g.sigmoid(y);
            sum_of(g, s)
        });
    }
}

#[test]
fn grad_conv2d_strided_no_pad() {
    for seed in 0..SEEDS {
        let x = fill(&[2, 1, 5, 5], seed, -1.0, 1.0);
        let w = fill(&[3, 1, 3, 3], seed + 32_000, -0.6, 0.6);
        gradcheck("conv2d s2 p0", &[x, w], |g, vs| {
            let y = g.conv2d(vs[0], vs[1], 2, 0).unwrap();
            let s = g.sigmoid(y);
            sum_of(g, s)
        });
    }
}

#[test]
fn grad_linear() {
    for seed in 0..SEEDS {
        let x = fill(&[3, 4], seed, -1.0, 1.0);
        let w = fill(&[2, 4], seed + 33_000, -0.8, 0.8);
        let b = fill(&[2], seed + 34_000, -0.5, 0.5);
        gradcheck("linear", &[x, w, b], |g, vs| {
            let y = g.linear(vs[0], vs[1], vs[2]).unwrap();
            let s = g.sigmoid(y);
            sum_of(g, s)
        });
    }
}

#[test]
fn grad_add_channel_bias() {
    for seed in 0..SEEDS {
        let x = fill(&[2, 3, 2, 2], seed, -1.0, 1.0);
        let b = fill(&[3], seed + 35_000, -0.5, 0.5);
        gradcheck("add_channel_bias", &[x, b], |g, vs| {
            let y = g.add_channel_bias(vs[0], vs[1]).unwrap();
            let s = g.sigmoid(y);
            sum_of(g, s)
        });
    }
}

#[test]
fn grad_batch_norm_train() {
    for seed in 0..SEEDS {
        let x = fill(&[2, 2, 3, 3], seed, -2.0, 2.0);
        let gamma = fill(&[2], seed + 36_000, 0.5, 1.5);
        let beta = fill(&[2], seed + 37_000, -0.5, 0.5);
        gradcheck("batch_norm_train", &[x, gamma, beta], |g, vs| {
            let (y, _) = g.batch_norm_train(vs[0], vs[1], vs[2], 1e-5).unwrap();
            let s = g.sigmoid(y);
            sum_of(g, s)
        });
    }
}

#[test]
fn grad_batch_norm_eval() {
    for seed in 0..SEEDS {
        let x = fill(&[2, 2, 3, 3], seed, -2.0, 2.0);
        let gamma = fill(&[2], seed + 38_000, 0.5, 1.5);
        let beta = fill(&[2], seed + 39_000, -0.5, 0.5);
        let rm = [0.1, -0.2];
        let rv = [0.9, 1.4];
        gradcheck("batch_norm_eval", &[x, gamma, beta], move |g, vs| {
            let y = g
                .batch_norm_eval(vs[0], vs[1], vs[2], &rm, &rv, 1e-5)
                .unwrap();
            let s = g.sigmoid(y);
            sum_of(g, s)
        });
    }
}

#[test]
fn grad_max_pool2() {
    for seed in 0..SEEDS {
        // distinct-valued windows keep the max selection stable under ±h
        let mut x = fill(&[1, 2, 4, 4], seed, -1.0, 1.0);
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            *v += (i as f64) * 4e-3;
        }
        gradcheck("max_pool2", &[x], |g, vs| {
            let y = g.max_pool2(vs[0]).unwrap();
            let s = g.sigmoid(y);
            sum_of(g, s)
        });
    }
}

#[test]
fn grad_global_avg_pool() {
    for seed in 0..SEEDS {
        let x = fill(&[2, 3, 2, 4], seed, -1.0, 1.0);
        gradcheck("global_avg_pool", &[x], |g, vs| {
            let y = g.global_avg_pool(vs[0]).unwrap();
            let s = g.sigmoid(y);
            sum_of(g, s)
        });
    }
}

#[test]
fn grad_upsample_nearest2() {
    for seed in 0..SEEDS {
        let x = fill(&[1, 2, 2, 3], seed, -1.0, 1.0);
        gradcheck("upsample_nearest2", &[x], |g, vs| {
            let y = g.upsample_nearest2(vs[0]).unwrap();
            let s = g.sigmoid(y);
            sum_of(g, s)
        });
    }
}

#[test]
fn grad_concat_and_slice() {
    for seed in 0..SEEDS {
        let a = fill(&[1, 2, 2, 2], seed, -1.0, 1.0);
        let b = fill(&[1, 3, 2, 2], seed + 40_000, -1.0, 1.0);
        gradcheck("concat_channels+slice_channel", &[a, b], |g, vs| {
            let c = g.concat_channels(vs[0], vs[1]).unwrap();
            let s3 = g.slice_channel(c, 3).unwrap();
            let s0 = g.slice_channel(c, 0).unwrap();
            let d = g.sub(s3, s0).unwrap();
            let e = g.sigmoid(d);
            sum_of(g, e)
        });
    }
}

#[test]
fn grad_l2_normalize() {
    for seed in 0..SEEDS {
        let x = fill_away_from_zero(&[6], seed, 0.05);
        gradcheck("l2_normalize", &[x], |g, vs| {
            let y = g.l2_normalize(vs[0]);
            let s = g.sigmoid(y);
            sum_of(g, s)
        });
    }
}

#[test]
fn grad_masked_bce_mean() {
    for seed in 0..SEEDS {
        let p = fill(&[8], seed, 0.05, 0.95);
        let y: Vec<f64> = (0..8).map(|i| ((seed as usize + i) % 2) as f64).collect();
        let w: Vec<f64> = (0..8).map(|i| if i % 3 == 0 { 0.0 } else { 1.0 }).collect();
        gradcheck("masked_bce_mean", &[p], move |g, vs| {
            g.masked_bce_mean(vs[0], &y, &w).unwrap()
        });
    }
}

#[test]
fn grad_sum_plain() {
    for seed in 0..SEEDS {
        let x = fill(&[3, 2], seed, -2.0, 2.0);
        gradcheck("sum", &[x], |g, vs| sum_of(g, vs[0]));
    }
}

/// The spec's "random 3-layer conv net" end-to-end check: conv/bn/relu/pool
/// stacks feeding a linear head, gradient for input, every weight, and a
/// retained intermediate tap.
#[test]
fn grad_three_layer_conv_net() {
    let cfg = GradCheckCfg {
        max_checks: 24,
        ..GradCheckCfg::default()
    };
    for seed in 0..10 {
        let x = fill(&[1, 2, 8, 8], seed, -1.0, 1.0);
        let w1 = fill(&[4, 2, 3, 3], seed + 50_000, -0.5, 0.5);
        let g1 = fill(&[4], seed + 51_000, 0.8, 1.2);
        let b1 = fill(&[4], seed + 52_000, -0.2, 0.2);
        let w2 = fill(&[6, 4, 3, 3], seed + 53_000, -0.4, 0.4);
        let g2 = fill(&[6], seed + 54_000, 0.8, 1.2);
        let b2 = fill(&[6], seed + 55_000, -0.2, 0.2);
        let w3 = fill(&[4, 6, 3, 3], seed + 56_000, -0.4, 0.4);
        let wl = fill(&[3, 4], seed + 57_000, -0.5, 0.5);
        let bl = fill(&[3], seed + 58_000, -0.2, 0.2);
        gradcheck_cfg(
            "3-layer conv net",
            &[x, w1, g1, b1, w2, g2, b2, w3, wl, bl],
            &cfg,
            |g, vs| {
                let c1 = g.conv2d(vs[0], vs[1], 1, 1).unwrap();
                let (n1, _) = g.batch_norm_train(c1, vs[2], vs[3], 1e-5).unwrap();
                let r1 = g.relu(n1);
                let p1 = g.max_pool2(r1).unwrap();
                let c2 = g.conv2d(p1, vs[4], 1, 1).unwrap();
                let (n2, _) = g.batch_norm_train(c2, vs[5], vs[6], 1e-5).unwrap();
                let r2 = g.relu(n2);
                let p2 = g.max_pool2(r2).unwrap();
                let c3 = g.conv2d(p2, vs[7], 1, 1).unwrap();
                let r3 = g.relu(c3);
                let gap = g.global_avg_pool(r3).unwrap();
                let y = g.linear(gap, vs[8], vs[9]).unwrap();
                let s = g.sigmoid(y);
                g.sum(s)
            },
        );
    }
}

/// Gradient w.r.t. a retained intermediate (the Eq. 4 tap) must match a
/// finite-difference probe where the tap value itself is perturbed. The probe
/// re-runs only the post-tap subgraph, giving an independent numeric route.
#[test]
fn grad_tap_matches_post_tap_perturbation() {
    for seed in 0..20u64 {
        let x = fill(&[1, 2, 4, 4], seed, -1.0, 1.0);
        let w = fill(&[3, 2, 3, 3], seed + 60_000, -0.5, 0.5);
        let wl = fill(&[1, 3], seed + 61_000, -0.5, 0.5);
        let bl = fill(&[1], seed + 62_000, -0.2, 0.2);

        // analytic: tap after relu
        let mut g = Graph::<f64>::new();
        let xv = g.leaf(x.clone(), false);
        let wv = g.leaf(w.clone(), true);
        let c = g.conv2d(xv, wv, 1, 1).unwrap();
        let r = g.relu(c);
        g.retain_grad(r);
        let gap = g.global_avg_pool(r).unwrap();
        let wlv = g.leaf(wl.clone(), false);
        let blv = g.leaf(bl.clone(), false);
        let z = g.linear(gap, wlv, blv).unwrap();
        let zs = g.sum(z);
        g.backward(zs).unwrap();
        let tap_grad = g.grad(r).unwrap();
        let tap_value = g.value(r).clone();

        // numeric: perturb the tap tensor, re-run only gap -> linear -> sum
        let post = |a: &TensorData<f64>| -> f64 {
            let mut g = Graph::<f64>::new();
            let av = g.leaf(a.clone(), false);
            let gap = g.global_avg_pool(av).unwrap();
            let wlv = g.leaf(wl.clone(), false);
            let blv = g.leaf(bl.clone(), false);
            let z = g.linear(gap, wlv, blv).unwrap();
            let zs = g.sum(z);
            g.value(zs).data()[0]
        };
        let h = 1e-5;
        for idx in (0..tap_value.numel()).step_by(5) {
            let mut plus = tap_value.clone();
            plus.data_mut()[idx] += h;
            let mut minus = tap_value.clone();
            minus.data_mut()[idx] -= h;
            let numeric = (post(&plus) - post(&minus)) / (2.0 * h);
            let analytic = tap_grad.data()[idx];
            let denom = 1.0_f64.max(analytic.abs()).max(numeric.abs());
            assert!(
                (analytic - numeric).abs() / denom < 1e-4,
                "tap grad mismatch at {idx}: {analytic} vs {numeric}"
            );
        }
    }
}

/// f32 and f64 forwards agree to single-precision tolerance on the same net.
#[test]
fn forward_precision_agreement() {
    let x64 = fill(&[1, 2, 8, 8], 5, -1.0, 1.0);
    let w64 = fill(&[4, 2, 3, 3], 6, -0.5, 0.5);
    let run64 = {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(x64.clone(), false);
        let w = g.leaf(w64.clone(), false);
        let c = g.conv2d(x, w, 1, 1).unwrap();
        let r = g.relu(c);
        let p = g.max_pool2(r).unwrap();
        let a = g.global_avg_pool(p).unwrap();
        g.value(a).data().to_vec()
    };
    let run32 = {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(x64.cast::<f32>(), false);
        let w = g.leaf(w64.cast::<f32>(), false);
        let c = g.conv2d(x, w, 1, 1).unwrap();
        let r = g.relu(c);
        let p = g.max_pool2(r).unwrap();
        let a = g.global_avg_pool(p).unwrap();
        g.value(a).data().to_vec()
    };
    for (a, b) in run64.iter().zip(&run32) {
        assert!((a - *b as f64).abs() < 1e-4, "{a} vs {b}");
    }
}
