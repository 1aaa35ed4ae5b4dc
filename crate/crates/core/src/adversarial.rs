//! Conditional prosody discriminators and GAN objectives.
//!
//! A discriminator projects the sample sequence and the condition sequence to
//! a shared width, concatenates them along time, runs conformer blocks, and
//! scores every position. Intermediate block outputs are kept for feature
//! matching. Losses follow the least-squares GAN formulation.

use crate::codec::CodecConfig;
use crate::nn::{ConformerConfig, ConformerStack, Linear};
use crate::params::{Bound, ParamSet};
use crate::rng::Prng;
use crate::tape::{Graph, NodeId};
use crate::tensor::Tensor;
use alloc::format;
use alloc::vec::Vec;

#[derive(Clone)]
pub struct DiscriminatorNet {
    in_proj: Linear,
    cond_proj: Linear,
    blocks: ConformerStack,
    head: Linear,
}

pub struct DiscOutput {
    /// Real/fake score per position, `[(M + P), 1]`.
    pub logits: NodeId,
    /// One feature map per conformer block.
    pub features: Vec<NodeId>,
}

impl DiscriminatorNet {
    pub fn init(
        ps: &mut ParamSet,
        name: &str,
        sample_dim: usize,
        cond_dim: usize,
        cfg: &ConformerConfig,
        num_blocks: usize,
        rng: &mut Prng,
    ) -> Self {
        let kernels: Vec<usize> = (0..num_blocks).map(|_| cfg.conv_kernel).collect();
        DiscriminatorNet {
            in_proj: Linear::init(ps, &format!("{name}.in_proj"), sample_dim, cfg.d_model, true, rng),
            cond_proj: Linear::init(ps, &format!("{name}.cond_proj"), cond_dim, cfg.d_model, true, rng),
            blocks: ConformerStack::init(ps, name, cfg, &kernels, rng),
            head: Linear::init(ps, &format!("{name}.head"), cfg.d_model, 1, true, rng),
        }
    }

    /// Score a sample `[M, sample_dim]` under conditions `[P, cond_dim]`.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, sample: NodeId, cond: NodeId) -> DiscOutput {
        let s = self.in_proj.forward(g, bound, sample);
        let c = self.cond_proj.forward(g, bound, cond);
        let mut x = g.concat_rows(&[s, c]);
        let mut features = Vec::with_capacity(self.blocks.blocks.len());
        for b in &self.blocks.blocks {
            x = b.forward(g, bound, x, None);
            features.push(x);
        }
        let logits = self.head.forward(g, bound, x);
        DiscOutput { logits, features }
    }
}

/// The two prosody discriminators: one over the duration sequence, one over
/// the stacked pitch/energy frames, both conditioned on (text embeddings,
/// time-varying style).
#[derive(Clone)]
pub struct CodecDiscriminators {
    pub ps: ParamSet,
    pub dur: DiscriminatorNet,
    pub pe: DiscriminatorNet,
}

impl CodecDiscriminators {
    pub fn init(codec_cfg: &CodecConfig, seed: u64) -> Self {
        let mut ps = ParamSet::new();
        let mut rng = Prng::derive(seed, 0xD15C, 0);
        let cfg = ConformerConfig {
            conv_kernel: codec_cfg.kernel_narrow,
            ..codec_cfg.conformer()
        };
        // Two blocks at desk scale; the conditioning dimension is the model
        // width because both style rows and text embeddings live there.
        let blocks = 2;
        let dur = DiscriminatorNet::init(&mut ps, "disc.dur", 1, codec_cfg.d_model, &cfg, blocks, &mut rng);
        let pe = DiscriminatorNet::init(&mut ps, "disc.pe", 2, codec_cfg.d_model, &cfg, blocks, &mut rng);
        CodecDiscriminators { ps, dur, pe }
    }
}

/// Generator side: `mean((D(fake) - 1)^2)`.
pub fn lsgan_generator_loss(g: &mut Graph, fake_logits: NodeId) -> NodeId {
    let ones = g.constant(Tensor::full(g.value(fake_logits).shape(), 1.0));
    g.mse_loss(fake_logits, ones)
}

/// Discriminator side: `mean(D(fake)^2) + mean((D(real) - 1)^2)`.
pub fn lsgan_discriminator_loss(g: &mut Graph, real_logits: NodeId, fake_logits: NodeId) -> NodeId {
    let zeros = g.constant(Tensor::zeros(g.value(fake_logits).shape()));
    let ones = g.constant(Tensor::full(g.value(real_logits).shape(), 1.0));
    let fake_term = g.mse_loss(fake_logits, zeros);
    let real_term = g.mse_loss(real_logits, ones);
    g.add(fake_term, real_term)
}

/// Sum over layers of the mean absolute difference between feature maps.
pub fn feature_matching(g: &mut Graph, real: &[NodeId], fake: &[NodeId]) -> NodeId {
    assert_eq!(real.len(), fake.len(), "feature map layer count mismatch");
    assert!(!real.is_empty(), "no feature maps");
    let mut total: Option<NodeId> = None;
    for (&r, &f) in real.iter().zip(fake) {
        let l = g.l1_loss(f, r);
        total = Some(match total {
            Some(t) => g.add(t, l),
            None => l,
        });
    }
    total.expect("non-empty layer list")
}
