#![allow(dead_code)]

use psm_core::tensor::{Graph, Scalar, TensorData, Var};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic uniform fill in `[lo, hi)`.
pub fn fill(shape: &[usize], seed: u64, lo: f64, hi: f64) -> TensorData<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    TensorData::new(shape.to_vec(), data).unwrap()
}

/// Uniform fill with every value at least `gap` away from zero, for ops with
/// a kink at the origin (relu, abs) where finite differences are invalid.
pub fn fill_away_from_zero(shape: &[usize], seed: u64, gap: f64) -> TensorData<f64> {
    let mut t = fill(shape, seed, -1.0, 1.0);
    for v in t.data_mut() {
        if v.abs() < gap {
            *v += if *v >= 0.0 { gap } else { -gap };
        }
    }
    t
}

pub struct GradCheckCfg {
    pub h: f64,
    pub tol: f64,
    /// Upper bound on perturbed entries per leaf (deterministic stride
    /// subsample); `usize::MAX` checks every entry.
    pub max_checks: usize,
}

impl Default for GradCheckCfg {
    fn default() -> Self {
        GradCheckCfg {
            h: 1e-5,
            tol: 1e-4,
            max_checks: usize::MAX,
        }
    }
}

/// Central finite-difference oracle: rebuilds the graph from scratch per
/// perturbation so no analytic-gradient code is reused on the numeric route.
pub fn gradcheck<F>(name: &str, leaves: &[TensorData<f64>], build: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    gradcheck_cfg(name, leaves, &GradCheckCfg::default(), build)
}

pub fn gradcheck_cfg<F>(name: &str, leaves: &[TensorData<f64>], cfg: &GradCheckCfg, build: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &vars);
    assert_eq!(
        g.value(out).numel(),
        1,
        "{name}: gradcheck target must be scalar"
    );
    g.backward(out).expect("backward");
    let grads: Vec<TensorData<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).expect("leaf gradient present"))
        .collect();

    let eval = |tensors: &[TensorData<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = build(&mut g, &vars);
        g.value(out).data()[0]
    };

    for (li, leaf) in leaves.iter().enumerate() {
        let n = leaf.numel();
        let stride = (n / cfg.max_checks).max(1);
        let mut idx = 0;
        while idx < n {
            let mut plus = leaves.to_vec();
            plus[li].data_mut()[idx] += cfg.h;
            let fp = eval(&plus);
            let mut minus = leaves.to_vec();
            minus[li].data_mut()[idx] -= cfg.h;
            let fm = eval(&minus);
            let numeric = (fp - fm) / (2.0 * cfg.h);
            let analytic = grads[li].data()[idx];
            let denom = 1.0_f64.max(analytic.abs()).max(numeric.abs());
            let rel = (analytic - numeric).abs() / denom;
            assert!(
                rel < cfg.tol,
                "{name}: leaf {li} element {idx}: analytic {analytic:.9e} vs numeric {numeric:.9e} (rel {rel:.3e})"
            );
            idx += stride;
        }
    }
}

/// Casts an `f64` tensor down for mixed-precision comparisons.
pub fn to_f32(t: &TensorData<f64>) -> TensorData<f32> {
    t.cast::<f32>()
}

pub fn assert_close<S: Scalar>(got: &[S], want: &[f64], tol: f64, what: &str) {
    assert_eq!(got.len(), want.len(), "{what}: length");
    for (i, (&g, &w)) in got.iter().zip(want).enumerate() {
        let d = (g.to_f64() - w).abs();
        assert!(d <= tol, "{what}[{i}]: got {} want {w} (|diff| {d:.3e})", g.to_f64());
    }
}
