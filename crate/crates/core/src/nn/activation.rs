//! The activation network U_ss: four tappable conv blocks and an embedding
//! head, trained only by self-supervised proxy tasks.

use super::{checkpoint, ConvBnBlock, StateLookup};
use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Graph, Scalar, TensorData, Var};
use std::path::Path;

/// How the embedding is reduced to the Grad-CAM scalar z. The paper says only
/// "gradients of output z"; the reduction is configurable rather than guessed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ZReduce {
    /// Sum of embedding components (default: simplest linear functional).
    #[default]
    Sum,
    /// L1 norm of the embedding.
    L1,
}

impl ZReduce {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(ZReduce::Sum),
            "l1" => Ok(ZReduce::L1),
            other => Err(Error::InvalidArgument(format!(
                "unknown z-reduce `{other}` (expected sum|l1)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ZReduce::Sum => "sum",
            ZReduce::L1 => "l1",
        }
    }
}

/// Four blocks {conv3x3 → bn → relu}, max-pool between blocks, then
/// global-average-pool → linear head. Channel plan defaults to
/// 3→16→32→64→64 with a 64-dim embedding.
pub struct ActivationNet<S: Scalar> {
    pub blocks: Vec<ConvBnBlock<S>>,
    pub head_w: TensorData<S>,
    pub head_b: TensorData<S>,
    /// L2-normalize embeddings before use (off by default; the paper does
    /// not state normalization).
    pub normalize_embed: bool,
}

pub struct ActBound {
    blocks: Vec<super::BlockBound>,
    head_w: Var,
    head_b: Var,
}

pub struct TapForward {
    pub z: Var,
    pub tap: Var,
    pub embed: Var,
}

pub const ACT_DEPTHS: usize = 4;

impl<S: Scalar> ActivationNet<S> {
    pub fn new(channels: &[usize], embed_dim: usize, seed: u64) -> Result<Self> {
        if channels.len() != ACT_DEPTHS + 1 {
            return Err(Error::InvalidArgument(format!(
                "activation net needs {} channel entries (in + 4 blocks), got {}",
                ACT_DEPTHS + 1,
                channels.len()
            )));
        }
        let mut rng = super::seeded_rng(seed);
        let blocks = (0..ACT_DEPTHS)
            .map(|i| ConvBnBlock::init(&mut rng, channels[i], channels[i + 1]))
            .collect::<Vec<_>>();
        let last = channels[ACT_DEPTHS];
        let head_w = super::kaiming(&mut rng, &[embed_dim, last], last);
        let head_b = TensorData::zeros(&[embed_dim]);
        Ok(ActivationNet {
            blocks,
            head_w,
            head_b,
            normalize_embed: false,
        })
    }

    pub fn default_with_seed(seed: u64) -> Self {
        Self::new(&[3, 16, 32, 64, 64], 64, seed).expect("default plan is valid")
    }

    pub fn embed_dim(&self) -> usize {
        self.head_w.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        let mut n = self.head_w.numel() + self.head_b.numel();
        for b in &self.blocks {
            n += b.conv_w.numel() + b.gamma.numel() + b.beta.numel();
        }
        n
    }

    pub fn bind(&self, g: &mut Graph<S>) -> ActBound {
        ActBound {
            blocks: self.blocks.iter().map(|b| b.bind(g)).collect(),
            head_w: g.leaf(self.head_w.clone(), true),
            head_b: g.leaf(self.head_b.clone(), true),
        }
    }

    /// Leaf vars in the canonical parameter order (matches `params_mut`).
    pub fn bound_vars(&self, bound: &ActBound) -> Vec<Var> {
        let mut v = Vec::new();
        for b in &bound.blocks {
            v.push(b.w);
            v.push(b.gamma);
            v.push(b.beta);
        }
        v.push(bound.head_w);
        v.push(bound.head_b);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut TensorData<S>> {
        let mut v: Vec<&mut TensorData<S>> = Vec::new();
        for b in &mut self.blocks {
            v.push(&mut b.conv_w);
            v.push(&mut b.gamma);
            v.push(&mut b.beta);
        }
        v.push(&mut self.head_w);
        v.push(&mut self.head_b);
        v
    }

    fn check_input(&self, g: &Graph<S>, x: Var) -> Result<(usize, usize)> {
        let s = g.shape(x);
        if s.len() != 4 || s[0] != 1 || s[1] != self.blocks[0].conv_w.shape()[1] {
            return Err(Error::shape_mismatch(
                "activation forward",
                format!("[1,{},H,W]", self.blocks[0].conv_w.shape()[1]),
                format!("{s:?}"),
            ));
        }
        let (h, w) = (s[2], s[3]);
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::InvalidArgument(format!(
                "activation input H,W must be multiples of 8, got {h}x{w}"
            )));
        }
        Ok((h, w))
    }

    /// Runs blocks 1..=depth and returns the post-relu output of block
    /// `depth` (before its pool) — the truncated forward used to validate
    /// tap agreement.
    pub fn forward_blocks(
        &self,
        g: &mut Graph<S>,
        bound: &ActBound,
        x: Var,
        depth: usize,
        train: bool,
        stats: &mut Vec<BatchStats<S>>,
    ) -> Result<Var> {
        if !(1..=ACT_DEPTHS).contains(&depth) {
            return Err(Error::InvalidArgument(format!(
                "tap depth must be 1..=4, got {depth}"
            )));
        }
        self.check_input(g, x)?;
        let mut cur = x;
        for (i, (blk, bb)) in self.blocks.iter().zip(&bound.blocks).enumerate() {
            let a = blk.forward(g, bb, cur, train, stats)?;
            if i + 1 == depth {
                return Ok(a);
            }
            cur = g.max_pool2(a)?;
        }
        unreachable!("depth validated above")
    }

    fn embed_from(
        &self,
        g: &mut Graph<S>,
        bound: &ActBound,
        x: Var,
        train: bool,
        stats: &mut Vec<BatchStats<S>>,
        tap_depth: Option<usize>,
    ) -> Result<(Var, Option<Var>)> {
        self.check_input(g, x)?;
        let mut cur = x;
        let mut tap = None;
        for (i, (blk, bb)) in self.blocks.iter().zip(&bound.blocks).enumerate() {
            let a = blk.forward(g, bb, cur, train, stats)?;
            if tap_depth == Some(i + 1) {
                g.retain_grad(a);
                tap = Some(a);
            }
            cur = if i + 1 < ACT_DEPTHS { g.max_pool2(a)? } else { a };
        }
        let gap = g.global_avg_pool(cur)?;
        let mut embed = g.linear(gap, bound.head_w, bound.head_b)?;
        if self.normalize_embed {
            embed = g.l2_normalize(embed);
        }
        Ok((embed, tap))
    }

    /// Embedding of one `[1,3,H,W]` image.
    pub fn forward_embed(
        &self,
        g: &mut Graph<S>,
        bound: &ActBound,
        x: Var,
        train: bool,
        stats: &mut Vec<BatchStats<S>>,
    ) -> Result<Var> {
        Ok(self.embed_from(g, bound, x, train, stats, None)?.0)
    }

    /// Full forward with a gradient tap at `depth`: returns the Grad-CAM
    /// scalar z and the tapped feature map A (grad retrievable after
    /// `backward(z)`).
    pub fn forward_with_taps(
        &self,
        g: &mut Graph<S>,
        bound: &ActBound,
        x: Var,
        depth: usize,
        z_reduce: ZReduce,
    ) -> Result<TapForward> {
        if !(1..=ACT_DEPTHS).contains(&depth) {
            return Err(Error::InvalidArgument(format!(
                "tap depth must be 1..=4, got {depth}"
            )));
        }
        let mut stats = Vec::new();
        let (embed, tap) = self.embed_from(g, bound, x, false, &mut stats, Some(depth))?;
        let z = match z_reduce {
            ZReduce::Sum => g.sum(embed),
            ZReduce::L1 => {
                let a = g.abs(embed);
                g.sum(a)
            }
        };
        Ok(TapForward {
            z,
            tap: tap.expect("tap recorded for validated depth"),
            embed,
        })
    }

    /// Applies one forward's worth of batch-norm statistics (block order) to
    /// the running estimates.
    pub fn apply_bn_updates(&mut self, stats: &[BatchStats<S>]) {
        for (blk, st) in self.blocks.iter_mut().zip(stats) {
            blk.update_running(st);
        }
    }

    pub fn state(&self) -> Vec<(String, TensorData<S>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            b.state_into(&format!("block{}", i + 1), &mut out);
        }
        out.push(("head.w".to_string(), self.head_w.clone()));
        out.push(("head.b".to_string(), self.head_b.clone()));
        out
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        checkpoint::save_checkpoint(dir, "activation", &self.state())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let (kind, entries) = checkpoint::load_checkpoint::<S>(&dir)?;
        if kind != "activation" {
            return Err(Error::format(
                "checkpoint",
                format!("expected kind=activation, got kind={kind}"),
            ));
        }
        let lookup = StateLookup::new(entries);
        let blocks = (1..=ACT_DEPTHS)
            .map(|i| ConvBnBlock::from_state(&format!("block{i}"), &lookup))
            .collect::<Result<Vec<_>>>()?;
        Ok(ActivationNet {
            blocks,
            head_w: lookup.tensor("head.w")?,
            head_b: lookup.tensor("head.b")?,
            normalize_embed: false,
        })
    }
}
