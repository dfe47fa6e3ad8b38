//! The downstream encoder–decoder scoring network (segmentation and
//! detection heads share this architecture; only the class count differs).

use super::{checkpoint, kaiming, ConvBnBlock, StateLookup};
use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Graph, Scalar, TensorData, Var};
use std::path::Path;

pub const SCORE_CLAMP: f64 = 1e-6;

const ENC: [usize; 3] = [12, 24, 48];

/// 3 encoder blocks with pooling, a bottleneck, 3 decoder blocks with
/// nearest-upsample + skip concatenation, and a 1x1 conv head squashed into
/// (0,1) by a clamped logistic. Output spatial size equals input size.
pub struct ScoreNet<S: Scalar> {
    pub enc: Vec<ConvBnBlock<S>>,
    pub bottleneck: ConvBnBlock<S>,
    pub dec: Vec<ConvBnBlock<S>>,
    pub head_w: TensorData<S>,
    pub head_b: TensorData<S>,
}

pub struct ScoreBound {
    enc: Vec<super::BlockBound>,
    bottleneck: super::BlockBound,
    dec: Vec<super::BlockBound>,
    head_w: Var,
    head_b: Var,
}

impl<S: Scalar> ScoreNet<S> {
    pub fn new(classes: usize, seed: u64) -> Result<Self> {
        if classes == 0 {
            return Err(Error::InvalidArgument("score net needs >= 1 class".into()));
        }
        let mut rng = super::seeded_rng(seed);
        let enc = vec![
            ConvBnBlock::init(&mut rng, 3, ENC[0]),
            ConvBnBlock::init(&mut rng, ENC[0], ENC[1]),
            ConvBnBlock::init(&mut rng, ENC[1], ENC[2]),
        ];
        let bottleneck = ConvBnBlock::init(&mut rng, ENC[2], ENC[2]);
        let dec = vec![
            ConvBnBlock::init(&mut rng, ENC[2] * 2, ENC[1]),
            ConvBnBlock::init(&mut rng, ENC[1] * 2, ENC[0]),
            ConvBnBlock::init(&mut rng, ENC[0] * 2, 8),
        ];
        let head_w = kaiming(&mut rng, &[classes, 8, 1, 1], 8);
        let head_b = TensorData::zeros(&[classes]);
        Ok(ScoreNet {
            enc,
            bottleneck,
            dec,
            head_w,
            head_b,
        })
    }

    pub fn classes(&self) -> usize {
        self.head_w.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        let mut n = self.head_w.numel() + self.head_b.numel();
        for b in self.enc.iter().chain([&self.bottleneck]).chain(&self.dec) {
            n += b.conv_w.numel() + b.gamma.numel() + b.beta.numel();
        }
        n
    }

    pub fn bind(&self, g: &mut Graph<S>) -> ScoreBound {
        ScoreBound {
            enc: self.enc.iter().map(|b| b.bind(g)).collect(),
            bottleneck: self.bottleneck.bind(g),
            dec: self.dec.iter().map(|b| b.bind(g)).collect(),
            head_w: g.leaf(self.head_w.clone(), true),
            head_b: g.leaf(self.head_b.clone(), true),
        }
    }

    pub fn bound_vars(&self, bound: &ScoreBound) -> Vec<Var> {
        let mut v = Vec::new();
        for b in bound.enc.iter().chain([&bound.bottleneck]).chain(&bound.dec) {
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
        for b in self
            .enc
            .iter_mut()
            .chain([&mut self.bottleneck])
            .chain(&mut self.dec)
        {
            v.push(&mut b.conv_w);
            v.push(&mut b.gamma);
            v.push(&mut b.beta);
        }
        v.push(&mut self.head_w);
        v.push(&mut self.head_b);
        v
    }

    /// Per-class score map in (0,1), shape `[1,C,H,W]` with the input's H,W.
    pub fn forward(
        &self,
        g: &mut Graph<S>,
        bound: &ScoreBound,
        x: Var,
        train: bool,
        stats: &mut Vec<BatchStats<S>>,
    ) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 4 || s[0] != 1 || s[1] != 3 {
            return Err(Error::shape_mismatch(
                "score forward",
                "[1,3,H,W]",
                format!("{s:?}"),
            ));
        }
        let (h, w) = (s[2], s[3]);
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::InvalidArgument(format!(
                "score input H,W must be multiples of 8, got {h}x{w}"
            )));
        }
        let e1 = self.enc[0].forward(g, &bound.enc[0], x, train, stats)?;
        let p1 = g.max_pool2(e1)?;
        let e2 = self.enc[1].forward(g, &bound.enc[1], p1, train, stats)?;
        let p2 = g.max_pool2(e2)?;
        let e3 = self.enc[2].forward(g, &bound.enc[2], p2, train, stats)?;
        let p3 = g.max_pool2(e3)?;
        let b = self.bottleneck.forward(g, &bound.bottleneck, p3, train, stats)?;
        let u3 = g.upsample_nearest2(b)?;
        let c3 = g.concat_channels(u3, e3)?;
        let d3 = self.dec[0].forward(g, &bound.dec[0], c3, train, stats)?;
        let u2 = g.upsample_nearest2(d3)?;
        let c2 = g.concat_channels(u2, e2)?;
        let d2 = self.dec[1].forward(g, &bound.dec[1], c2, train, stats)?;
        let u1 = g.upsample_nearest2(d2)?;
        let c1 = g.concat_channels(u1, e1)?;
        let d1 = self.dec[2].forward(g, &bound.dec[2], c1, train, stats)?;
        let logits = g.conv2d(d1, bound.head_w, 1, 0)?;
        let logits = g.add_channel_bias(logits, bound.head_b)?;
        let sig = g.sigmoid(logits);
        let lo = S::from_f64(SCORE_CLAMP);
        let hi = S::from_f64(1.0 - SCORE_CLAMP);
        Ok(g.clamp(sig, lo, hi))
    }

    /// Applies one forward's batch stats (traversal order: enc1..3,
    /// bottleneck, dec3..1) to running estimates.
    pub fn apply_bn_updates(&mut self, stats: &[BatchStats<S>]) {
        let blocks: Vec<&mut ConvBnBlock<S>> = self
            .enc
            .iter_mut()
            .chain([&mut self.bottleneck])
            .chain(&mut self.dec)
            .collect();
        for (blk, st) in blocks.into_iter().zip(stats) {
            blk.update_running(st);
        }
    }

    pub fn state(&self) -> Vec<(String, TensorData<S>)> {
        let mut out = Vec::new();
        for (i, b) in self.enc.iter().enumerate() {
            b.state_into(&format!("enc{}", i + 1), &mut out);
        }
        self.bottleneck.state_into("bottleneck", &mut out);
        for (i, b) in self.dec.iter().enumerate() {
            b.state_into(&format!("dec{}", i + 1), &mut out);
        }
        out.push(("head.w".to_string(), self.head_w.clone()));
        out.push(("head.b".to_string(), self.head_b.clone()));
        out
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        checkpoint::save_checkpoint(dir, "score", &self.state())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let (kind, entries) = checkpoint::load_checkpoint::<S>(&dir)?;
        if kind != "score" {
            return Err(Error::format(
                "checkpoint",
                format!("expected kind=score, got kind={kind}"),
            ));
        }
        let lookup = StateLookup::new(entries);
        let enc = (1..=3)
            .map(|i| ConvBnBlock::from_state(&format!("enc{i}"), &lookup))
            .collect::<Result<Vec<_>>>()?;
        let dec = (1..=3)
            .map(|i| ConvBnBlock::from_state(&format!("dec{i}"), &lookup))
            .collect::<Result<Vec<_>>>()?;
        Ok(ScoreNet {
            enc,
            bottleneck: ConvBnBlock::from_state("bottleneck", &lookup)?,
            dec,
            head_w: lookup.tensor("head.w")?,
            head_b: lookup.tensor("head.b")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;
    use rand::Rng;
    use rand::SeedableRng;

    fn image(seed: u64, h: usize, w: usize) -> TensorData<f32> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = (0..3 * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        TensorData::new(vec![1, 3, h, w], data).unwrap()
    }

    #[test]
    fn output_shape_matches_input_spatial() {
        let net = ScoreNet::<f32>::new(2, 0).unwrap();
        let mut g = Graph::new();
        let bound = net.bind(&mut g);
        let x = g.leaf(image(1, 64, 64), false);
        let mut stats = Vec::new();
        let y = net.forward(&mut g, &bound, x, false, &mut stats).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 64, 64]);
    }

    #[test]
    fn outputs_strictly_inside_unit_interval() {
        // random weights over several seeds; >= 1e6 pixels in total
        let mut checked = 0usize;
        for seed in 0..25u64 {
            let net = ScoreNet::<f32>::new(2, seed).unwrap();
            let mut g = Graph::new();
            let bound = net.bind(&mut g);
            let x = g.leaf(image(seed + 100, 128, 128), false);
            let mut stats = Vec::new();
            let y = net.forward(&mut g, &bound, x, false, &mut stats).unwrap();
            for &v in g.value(y).data() {
                assert!(v > 0.0 && v < 1.0, "score {v} out of open interval");
            }
            checked += g.value(y).numel();
            // train-mode forward exercises batch statistics too
            let mut g2 = Graph::new();
            let bound2 = net.bind(&mut g2);
            let x2 = g2.leaf(image(seed + 500, 64, 64), false);
            let mut stats2 = Vec::new();
            let y2 = net.forward(&mut g2, &bound2, x2, true, &mut stats2).unwrap();
            for &v in g2.value(y2).data() {
                assert!(v > 0.0 && v < 1.0);
            }
            checked += g2.value(y2).numel();
        }
        assert!(checked >= 1_000_000, "covered {checked} pixels");
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let net = ScoreNet::<f32>::new(1, 3).unwrap();
        net.save(dir.path()).unwrap();
        let back = ScoreNet::<f32>::load(dir.path()).unwrap();
        assert_eq!(back.classes(), 1);
        let img = image(42, 16, 16);
        let run = |net: &ScoreNet<f32>| {
            let mut g = Graph::new();
            let bound = net.bind(&mut g);
            let x = g.leaf(img.clone(), false);
            let mut stats = Vec::new();
            let y = net.forward(&mut g, &bound, x, false, &mut stats).unwrap();
            g.value(y).data().to_vec()
        };
        assert_eq!(run(&net), run(&back));
    }

    #[test]
    fn kind_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let net = ScoreNet::<f32>::new(1, 3).unwrap();
        net.save(dir.path()).unwrap();
        assert!(crate::nn::ActivationNet::<f32>::load(dir.path()).is_err());
    }
}
