//! Self-supervised proxy tasks: similarity (Eq. 2) and contrastiveness
//! (Eq. 1) over Manhattan-distance embedding differences, with exact 90°
//! rotation augmentation.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{ActivationNet, Adam};
use crate::tensor::{Graph, Scalar, TensorData, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ProxyTask {
    #[default]
    Similarity,
    Contrastive,
}

impl ProxyTask {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "similarity" => Ok(ProxyTask::Similarity),
            "contrastive" => Ok(ProxyTask::Contrastive),
            other => Err(Error::InvalidArgument(format!(
                "unknown proxy task `{other}` (expected similarity|contrastive)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ProxyTask::Similarity => "similarity",
            ProxyTask::Contrastive => "contrastive",
        }
    }
}

/// Manhattan distance between two equal-dimension embeddings (the paper's
/// diff(·): §3.1 "measurement of Manhattan distance"). Nonnegative,
/// symmetric, zero at identical inputs.
pub fn diff<S: Scalar>(g: &mut Graph<S>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let ad = g.abs(d);
    Ok(g.sum(ad))
}

/// Eq. 2: L = diff(Z_l, Z_r).
pub fn loss_similarity<S: Scalar>(g: &mut Graph<S>, z_l: Var, z_r: Var) -> Result<Var> {
    diff(g, z_l, z_r)
}

/// Eq. 1: L = diff(Z_l, Z_r) − diff(Z_l, Z_n). May be negative — the paper
/// uses no hinge.
pub fn loss_contrastive<S: Scalar>(g: &mut Graph<S>, z_l: Var, z_r: Var, z_n: Var) -> Result<Var> {
    let pos = diff(g, z_l, z_r)?;
    let neg = diff(g, z_l, z_n)?;
    g.sub(pos, neg)
}

/// Optional hinge variant: max(0, Eq.1 + margin). Off by default; fidelity
/// to the paper's plain difference comes first.
pub fn loss_contrastive_margin<S: Scalar>(
    g: &mut Graph<S>,
    z_l: Var,
    z_r: Var,
    z_n: Var,
    margin: S,
) -> Result<Var> {
    let plain = loss_contrastive(g, z_l, z_r, z_n)?;
    let m = g.leaf(TensorData::scalar(margin), false);
    let shifted = g.add(plain, m)?;
    Ok(g.relu(shifted))
}

/// Exact k·90° clockwise rotation of the last two axes (no interpolation).
/// Rotating four times returns the original tensor bit-exactly.
pub fn rotate90k<S: Scalar>(t: &TensorData<S>, k: usize) -> TensorData<S> {
    let k = k % 4;
    if k == 0 {
        return t.clone();
    }
    let shape = t.shape().to_vec();
    let nd = shape.len();
    assert!(nd >= 2, "rotate90k needs at least 2 axes");
    let (h, w) = (shape[nd - 2], shape[nd - 1]);
    let planes: usize = shape[..nd - 2].iter().product();
    let (oh, ow) = if k % 2 == 1 { (w, h) } else { (h, w) };
    let mut out = vec![S::zero(); t.numel()];
    let src = t.data();
    for p in 0..planes {
        let ib = p * h * w;
        let ob = p * oh * ow;
        for y in 0..oh {
            for x in 0..ow {
                // one clockwise step: out(y, x) = in(h-1-x, y)
                let (sy, sx) = match k {
                    1 => (h - 1 - x, y),
                    2 => (h - 1 - y, w - 1 - x),
                    3 => (x, w - 1 - y),
                    _ => unreachable!(),
                };
                out[ob + y * ow + x] = src[ib + sy * w + sx];
            }
        }
    }
    let mut oshape = shape;
    oshape[nd - 2] = oh;
    oshape[nd - 1] = ow;
    TensorData::new(oshape, out).expect("rotation preserves element count")
}

/// One training triple: anchor index, rotation k for the positive view, and
/// (for the contrastive task) a negative index ≠ anchor.
#[derive(Clone, Copy, Debug)]
pub struct ProxyBatch {
    pub anchor: usize,
    pub rot_k: usize,
    pub negative: usize,
}

/// Deterministic schedule: anchors sweep the dataset in order each epoch;
/// rotation k ∈ {1,2,3} and the negative are drawn from the seeded stream.
pub fn schedule_epoch(n: usize, rng: &mut ChaCha8Rng) -> Vec<ProxyBatch> {
    (0..n)
        .map(|anchor| {
            let rot_k = rng.random_range(1..=3usize);
            let negative = if n > 1 {
                let mut neg = rng.random_range(0..n - 1);
                if neg >= anchor {
                    neg += 1;
                }
                neg
            } else {
                anchor
            };
            ProxyBatch {
                anchor,
                rot_k,
                negative,
            }
        })
        .collect()
}

pub struct ProxyTrainReport {
    /// Mean loss per epoch, in epoch order.
    pub epoch_losses: Vec<f64>,
}

/// Trains the activation net on a proxy task. Batch size is one triple per
/// step; Adam with the paper's lr default 1e-4; fully deterministic per seed.
pub fn train_proxy<S: Scalar>(
    net: &mut ActivationNet<S>,
    images: &[TensorData<S>],
    task: ProxyTask,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<ProxyTrainReport> {
    if images.is_empty() {
        return Err(Error::EmptyInput("proxy training set".into()));
    }
    if task == ProxyTask::Contrastive && images.len() < 2 {
        return Err(Error::InvalidArgument(
            "contrastive task needs at least 2 images".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(lr);
    let mut epoch_losses = Vec::with_capacity(epochs);
    for _epoch in 0..epochs {
        let schedule = schedule_epoch(images.len(), &mut rng);
        let mut loss_sum = 0.0;
        for batch in &schedule {
            let mut g = Graph::new();
            let bound = net.bind(&mut g);
            let anchor = g.leaf(images[batch.anchor].clone(), false);
            let positive = g.leaf(rotate90k(&images[batch.anchor], batch.rot_k), false);
            let mut stats = Vec::new();
            let z_l = net.forward_embed(&mut g, &bound, anchor, true, &mut stats)?;
            let z_r = net.forward_embed(&mut g, &bound, positive, true, &mut stats)?;
            let loss = match task {
                ProxyTask::Similarity => loss_similarity(&mut g, z_l, z_r)?,
                ProxyTask::Contrastive => {
                    let negative = g.leaf(images[batch.negative].clone(), false);
                    let z_n = net.forward_embed(&mut g, &bound, negative, true, &mut stats)?;
                    loss_contrastive(&mut g, z_l, z_r, z_n)?
                }
            };
            loss_sum += g.value(loss).data()[0].to_f64();
            g.backward(loss)?;
            let vars = net.bound_vars(&bound);
            let grads: Vec<TensorData<S>> = vars
                .iter()
                .map(|&v| g.grad(v).expect("bound parameter gradient"))
                .collect();
            // batch stats arrive in forward order (4 per branch); fold each
            // branch's stats into the running estimates in that order
            for chunk in stats.chunks(net.blocks.len()) {
                net.apply_bn_updates(chunk);
            }
            adam.step(&mut net.params_mut(), &grads)?;
        }
        epoch_losses.push(loss_sum / images.len() as f64);
    }
    Ok(ProxyTrainReport { epoch_losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn embedding(g: &mut Graph<f64>, vals: &[f64]) -> Var {
        g.leaf(
            TensorData::new(vec![1, vals.len()], vals.to_vec()).unwrap(),
            false,
        )
    }

    #[test]
    fn diff_identity_is_zero() {
        let mut g = Graph::new();
        let a = embedding(&mut g, &[0.3, -0.7, 2.0]);
        let b = embedding(&mut g, &[0.3, -0.7, 2.0]);
        let d = diff(&mut g, a, b).unwrap();
        assert_eq!(g.value(d).data()[0], 0.0);
    }

    #[test]
    fn diff_hand_l1_case() {
        let mut g = Graph::new();
        let a = embedding(&mut g, &[0.0, 0.0]);
        let b = embedding(&mut g, &[1.0, 2.0]);
        let d = diff(&mut g, a, b).unwrap();
        assert_eq!(g.value(d).data()[0], 3.0);
    }

    #[test]
    fn diff_symmetric_over_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let x: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
            let y: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut g = Graph::new();
            let a = embedding(&mut g, &x);
            let b = embedding(&mut g, &y);
            let ab = diff(&mut g, a, b).unwrap();
            let ba = diff(&mut g, b, a).unwrap();
            assert_eq!(g.value(ab).data()[0], g.value(ba).data()[0]);
            assert!(g.value(ab).data()[0] >= 0.0);
        }
    }

    #[test]
    fn diff_rejects_dimension_mismatch() {
        let mut g = Graph::new();
        let a = embedding(&mut g, &[1.0, 2.0]);
        let b = embedding(&mut g, &[1.0, 2.0, 3.0]);
        assert!(diff(&mut g, a, b).is_err());
    }

    #[test]
    fn similarity_hand_case_eq2() {
        let mut g = Graph::new();
        let zl = embedding(&mut g, &[1.0, 1.0]);
        let zr = embedding(&mut g, &[0.0, 3.0]);
        let l = loss_similarity(&mut g, zl, zr).unwrap();
        assert_eq!(g.value(l).data()[0], 3.0);
    }

    #[test]
    fn contrastive_hand_case_eq1() {
        let mut g = Graph::new();
        let zl = embedding(&mut g, &[0.0, 0.0]);
        let zr = embedding(&mut g, &[1.0, 0.0]);
        let zn = embedding(&mut g, &[3.0, 0.0]);
        let l = loss_contrastive(&mut g, zl, zr, zn).unwrap();
        assert_eq!(g.value(l).data()[0], -2.0);
    }

    #[test]
    fn contrastive_zero_when_positive_equals_negative() {
        let mut g = Graph::new();
        let zl = embedding(&mut g, &[0.4, -1.0, 2.0]);
        let zr = embedding(&mut g, &[1.0, 0.5, -0.25]);
        let zn = embedding(&mut g, &[1.0, 0.5, -0.25]);
        let l = loss_contrastive(&mut g, zl, zr, zn).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);
    }

    #[test]
    fn contrastive_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let zl: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let zr: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let zn: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let c: f64 = rng.random_range(-3.0..3.0);
            let shift = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| x + c).collect() };
            let eval = |a: &[f64], b: &[f64], n: &[f64]| -> f64 {
                let mut g = Graph::new();
                let (va, vb, vn) = (
                    embedding(&mut g, a),
                    embedding(&mut g, b),
                    embedding(&mut g, n),
                );
                let l = loss_contrastive(&mut g, va, vb, vn).unwrap();
                g.value(l).data()[0]
            };
            let base = eval(&zl, &zr, &zn);
            let shifted = eval(&shift(&zl), &shift(&zr), &shift(&zn));
            assert!((base - shifted).abs() < 1e-12);
        }
    }

    #[test]
    fn contrastive_gradient_signs_on_distance_terms() {
        // ∂L/∂pos-branch vs ∂L/∂neg-branch: moving Z_r toward Z_l lowers L,
        // moving Z_n toward Z_l raises it.
        let mut g = Graph::<f64>::new();
        let zl = embedding(&mut g, &[0.0, 0.0]);
        let zr = g.leaf(TensorData::new(vec![1, 2], vec![1.0, 0.5]).unwrap(), true);
        let zn = g.leaf(TensorData::new(vec![1, 2], vec![-2.0, 1.5]).unwrap(), true);
        let l = loss_contrastive(&mut g, zl, zr, zn).unwrap();
        g.backward(l).unwrap();
        let gr = g.grad(zr).unwrap();
        let gn = g.grad(zn).unwrap();
        // d diff/d zr_i = sign(zr_i - zl_i) with +1 coefficient
        assert_eq!(gr.data(), &[1.0, 1.0]);
        // neg branch enters with −1
        assert_eq!(gn.data(), &[1.0, -1.0]);
    }

    #[test]
    fn proxy_loss_gradcheck_vs_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            // keep coordinates apart so |·| is differentiable
            let raw: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut l = raw[0..4].to_vec();
            let mut r = raw[4..8].to_vec();
            let mut n = raw[8..12].to_vec();
            for i in 0..4 {
                if (l[i] - r[i]).abs() < 1e-2 {
                    r[i] += 0.05;
                }
                if (l[i] - n[i]).abs() < 1e-2 {
                    n[i] += 0.05;
                }
            }
            let eval = |l: &[f64], r: &[f64], n: &[f64], which: usize| -> (f64, Vec<f64>) {
                let mut g = Graph::<f64>::new();
                let vl = g.leaf(TensorData::new(vec![1, 4], l.to_vec()).unwrap(), true);
                let vr = g.leaf(TensorData::new(vec![1, 4], r.to_vec()).unwrap(), true);
                let vn = g.leaf(TensorData::new(vec![1, 4], n.to_vec()).unwrap(), true);
                let loss = match which {
                    0 => loss_similarity(&mut g, vl, vr).unwrap(),
                    _ => loss_contrastive(&mut g, vl, vr, vn).unwrap(),
                };
                let value = g.value(loss).data()[0];
                g.backward(loss).unwrap();
                let mut grads = g.grad(vl).unwrap().data().to_vec();
                grads.extend_from_slice(g.grad(vr).unwrap().data());
                grads.extend_from_slice(g.grad(vn).unwrap().data());
                (value, grads)
            };
            for which in 0..2 {
                let (_, analytic) = eval(&l, &r, &n, which);
                let h = 1e-5;
                let mut flat: Vec<f64> = l.iter().chain(&r).chain(&n).copied().collect();
                for idx in 0..12 {
                    let orig = flat[idx];
                    flat[idx] = orig + h;
                    let (fp, _) = eval(&flat[0..4], &flat[4..8], &flat[8..12], which);
                    flat[idx] = orig - h;
                    let (fm, _) = eval(&flat[0..4], &flat[4..8], &flat[8..12], which);
                    flat[idx] = orig;
                    let numeric = (fp - fm) / (2.0 * h);
                    let denom = 1.0_f64.max(analytic[idx].abs()).max(numeric.abs());
                    assert!(
                        (analytic[idx] - numeric).abs() / denom < 1e-4,
                        "task {which} coord {idx}: {} vs {numeric}",
                        analytic[idx]
                    );
                }
            }
        }
    }

    #[test]
    fn rotation_four_times_is_identity_bitexact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..3 * 6 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t = TensorData::new(vec![1, 3, 6, 6], data).unwrap();
        let mut r = t.clone();
        for _ in 0..4 {
            r = rotate90k(&r, 1);
        }
        assert_eq!(r.shape(), t.shape());
        assert_eq!(r.data(), t.data());
        // composition consistency: k applied at once == k single steps
        for k in 0..4 {
            let mut stepped = t.clone();
            for _ in 0..k {
                stepped = rotate90k(&stepped, 1);
            }
            let direct = rotate90k(&t, k);
            assert_eq!(direct.data(), stepped.data(), "k={k}");
        }
    }

    #[test]
    fn rotation_hand_case_2x2() {
        let t = TensorData::new(vec![2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        // clockwise: [[1,2],[3,4]] → [[3,1],[4,2]]
        assert_eq!(rotate90k(&t, 1).data(), &[3.0, 1.0, 4.0, 2.0]);
        assert_eq!(rotate90k(&t, 2).data(), &[4.0, 3.0, 2.0, 1.0]);
    }

    #[test]
    fn schedule_negative_never_equals_anchor() {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for _ in 0..20 {
            for b in schedule_epoch(9, &mut rng) {
                assert_ne!(b.anchor, b.negative);
                assert!((1..=3).contains(&b.rot_k));
            }
        }
    }

    #[test]
    fn train_proxy_rejects_degenerate_inputs() {
        let mut net = ActivationNet::<f32>::default_with_seed(0);
        let empty: Vec<TensorData<f32>> = vec![];
        assert!(train_proxy(&mut net, &empty, ProxyTask::Similarity, 1, 1e-4, 0).is_err());
        let one = vec![TensorData::zeros(&[1, 3, 16, 16])];
        assert!(train_proxy(&mut net, &one, ProxyTask::Contrastive, 1, 1e-4, 0).is_err());
    }
}
