//! Networks and training machinery.
//!
//! Parameters live outside any graph as plain tensors. Each forward pass
//! binds them into a fresh [`Graph`] as requires-grad leaves (`bind`), so one
//! bound set can be shared by several forwards in the same graph (the siamese
//! proxy losses rely on this: gradient contributions from every branch
//! accumulate on the shared leaves).

mod activation;
mod checkpoint;
mod score;

pub use activation::{ActBound, ActivationNet, TapForward, ZReduce};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use score::{ScoreBound, ScoreNet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Graph, Scalar, TensorData, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Kaiming fan-in init. Draws are taken in `f64` and cast, so nets built in
/// `f32` and `f64` from one seed hold the same values up to rounding.
fn kaiming<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> TensorData<S> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| S::from_f64(normal.sample(rng)))
        .collect();
    TensorData::new(shape.to_vec(), data).expect("shape/product consistent")
}

/// conv3x3 (pad 1, no bias) → batch norm → relu, the shared building block.
#[derive(Clone)]
pub struct ConvBnBlock<S: Scalar> {
    pub conv_w: TensorData<S>,
    pub gamma: TensorData<S>,
    pub beta: TensorData<S>,
    pub running_mean: Vec<S>,
    pub running_var: Vec<S>,
}

pub struct BlockBound {
    pub w: Var,
    pub gamma: Var,
    pub beta: Var,
}

impl<S: Scalar> ConvBnBlock<S> {
    pub fn init(rng: &mut ChaCha8Rng, cin: usize, cout: usize) -> Self {
        ConvBnBlock {
            conv_w: kaiming(rng, &[cout, cin, 3, 3], cin * 9),
            gamma: TensorData::filled(&[cout], S::one()),
            beta: TensorData::zeros(&[cout]),
            running_mean: vec![S::zero(); cout],
            running_var: vec![S::one(); cout],
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv_w.shape()[0]
    }

    pub fn bind(&self, g: &mut Graph<S>) -> BlockBound {
        BlockBound {
            w: g.leaf(self.conv_w.clone(), true),
            gamma: g.leaf(self.gamma.clone(), true),
            beta: g.leaf(self.beta.clone(), true),
        }
    }

    /// Forward through conv→bn→relu. In train mode the produced batch stats
    /// are appended to `stats` for a later [`ConvBnBlock::update_running`].
    pub fn forward(
        &self,
        g: &mut Graph<S>,
        bound: &BlockBound,
        x: Var,
        train: bool,
        stats: &mut Vec<BatchStats<S>>,
    ) -> Result<Var> {
        let c = g.conv2d(x, bound.w, 1, 1)?;
        let eps = S::from_f64(BN_EPS);
        let n = if train {
            let (n, st) = g.batch_norm_train(c, bound.gamma, bound.beta, eps)?;
            stats.push(st);
            n
        } else {
            g.batch_norm_eval(
                c,
                bound.gamma,
                bound.beta,
                &self.running_mean,
                &self.running_var,
                eps,
            )?
        };
        Ok(g.relu(n))
    }

    pub fn update_running(&mut self, stats: &BatchStats<S>) {
        let m = S::from_f64(BN_MOMENTUM);
        let keep = S::one() - m;
        for (r, &b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = keep * *r + m * b;
        }
    }

    fn state_into(&self, prefix: &str, out: &mut Vec<(String, TensorData<S>)>) {
        out.push((format!("{prefix}.conv_w"), self.conv_w.clone()));
        out.push((format!("{prefix}.bn_gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.bn_beta"), self.beta.clone()));
        out.push((
            format!("{prefix}.running_mean"),
            TensorData::new(vec![self.running_mean.len()], self.running_mean.clone()).unwrap(),
        ));
        out.push((
            format!("{prefix}.running_var"),
            TensorData::new(vec![self.running_var.len()], self.running_var.clone()).unwrap(),
        ));
    }

    fn from_state(prefix: &str, lookup: &StateLookup<S>) -> Result<Self> {
        Ok(ConvBnBlock {
            conv_w: lookup.tensor(&format!("{prefix}.conv_w"))?,
            gamma: lookup.tensor(&format!("{prefix}.bn_gamma"))?,
            beta: lookup.tensor(&format!("{prefix}.bn_beta"))?,
            running_mean: lookup.tensor(&format!("{prefix}.running_mean"))?.into_parts().1,
            running_var: lookup.tensor(&format!("{prefix}.running_var"))?.into_parts().1,
        })
    }
}

/// Name-indexed view over checkpoint entries.
pub(crate) struct StateLookup<S: Scalar> {
    entries: Vec<(String, TensorData<S>)>,
}

impl<S: Scalar> StateLookup<S> {
    pub fn new(entries: Vec<(String, TensorData<S>)>) -> Self {
        StateLookup { entries }
    }

    pub fn tensor(&self, name: &str) -> Result<TensorData<S>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::format("checkpoint", format!("missing tensor `{name}`")))
    }
}

/// Adam with moments kept in `f64` regardless of the parameter precision.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step<S: Scalar>(
        &mut self,
        params: &mut [&mut TensorData<S>],
        grads: &[TensorData<S>],
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape_mismatch(
                "adam",
                format!("{} gradient tensors", params.len()),
                format!("{}", grads.len()),
            ));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (pi, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
            if param.shape() != grad.shape() {
                return Err(Error::shape_mismatch(
                    "adam",
                    format!("{:?}", param.shape()),
                    format!("{:?}", grad.shape()),
                ));
            }
            let m = &mut self.m[pi];
            let v = &mut self.v[pi];
            for (i, p) in param.data_mut().iter_mut().enumerate() {
                let g = grad.data()[i].to_f64();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *p = S::from_f64(p.to_f64() - self.lr * mhat / (vhat.sqrt() + self.eps));
            }
        }
        Ok(())
    }
}

pub(crate) fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
