//! Network building blocks: linear layers, conformer blocks, cross-attention
//! and positional embeddings.
//!
//! Sequences are `[L, d]` row-major (rows are positions). Blocks are plain
//! structs of parameter ids; `forward` composes graph ops against a `Bound`
//! set, so the same block definition serves training and inference.

use crate::math;
use crate::params::{Bound, PId, ParamSet};
use crate::rng::Prng;
use crate::tape::{Graph, NodeId, MASK_NEG};
use crate::tensor::Tensor;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

#[derive(Clone, Copy, Debug)]
pub struct ConformerConfig {
    pub d_model: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub conv_kernel: usize,
    pub ff_dim: usize,
}

impl ConformerConfig {
    pub fn validate(&self) {
        assert_eq!(
            self.num_heads * self.head_dim,
            self.d_model,
            "num_heads x head_dim must equal d_model"
        );
        assert!(self.conv_kernel % 2 == 1, "conv kernel size must be odd");
        assert!(self.d_model > 0 && self.ff_dim > 0);
    }
}

fn xavier(rng: &mut Prng, rows: usize, cols: usize) -> Tensor {
    let limit = math::sqrt(6.0 / (rows + cols) as f64);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.range_f64(-limit, limit)).collect())
}

/// Embedding-style init: small gaussian entries.
pub fn table_init(rng: &mut Prng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gaussian() * scale).collect())
}

// ── Linear ──────────────────────────────────────────────────────────────

#[derive(Clone)]
pub struct Linear {
    w: PId,
    b: Option<PId>,
}

impl Linear {
    pub fn init(
        ps: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut Prng,
    ) -> Self {
        let w = ps.add(format!("{name}.w"), xavier(rng, in_dim, out_dim));
        let b = bias.then(|| ps.add(format!("{name}.b"), Tensor::zeros(&[out_dim])));
        Linear { w, b }
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: NodeId) -> NodeId {
        let h = g.matmul(x, bound.node(self.w));
        match self.b {
            Some(b) => g.add_row(h, bound.node(b)),
            None => h,
        }
    }
}

// ── Layer norm ──────────────────────────────────────────────────────────

#[derive(Clone)]
pub struct LayerNorm {
    gamma: PId,
    beta: PId,
}

impl LayerNorm {
    pub fn init(ps: &mut ParamSet, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: ps.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: ps.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: NodeId) -> NodeId {
        g.layernorm(x, bound.node(self.gamma), bound.node(self.beta))
    }
}

// ── Feed-forward ────────────────────────────────────────────────────────

#[derive(Clone)]
pub struct FeedForward {
    norm: LayerNorm,
    lin1: Linear,
    lin2: Linear,
}

impl FeedForward {
    pub fn init(ps: &mut ParamSet, name: &str, d: usize, ff: usize, rng: &mut Prng) -> Self {
        FeedForward {
            norm: LayerNorm::init(ps, &format!("{name}.norm"), d),
            lin1: Linear::init(ps, &format!("{name}.lin1"), d, ff, true, rng),
            lin2: Linear::init(ps, &format!("{name}.lin2"), ff, d, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: NodeId) -> NodeId {
        let h = self.norm.forward(g, bound, x);
        let h = self.lin1.forward(g, bound, h);
        let h = g.gelu(h);
        self.lin2.forward(g, bound, h)
    }
}

// ── Attention ───────────────────────────────────────────────────────────

/// Additive mask matrix: `MASK_NEG` in columns of masked key positions.
fn mask_matrix(query_len: usize, mask: &[bool]) -> Tensor {
    let kv = mask.len();
    let mut data = alloc::vec![0.0; query_len * kv];
    for (j, &m) in mask.iter().enumerate() {
        if m {
            for r in 0..query_len {
                data[r * kv + j] = MASK_NEG;
            }
        }
    }
    Tensor::matrix(query_len, kv, data)
}

/// Multi-head attention core: projects `queries`/`content`, attends, and
/// concatenates heads. `mask[j] = true` hides content position `j`.
/// Returns the output `[Lq, d]` and per-head attention probability nodes.
#[allow(clippy::too_many_arguments)]
fn multi_head_attend(
    g: &mut Graph,
    q_in: NodeId,
    kv_in: NodeId,
    wq: NodeId,
    wk: NodeId,
    wv: NodeId,
    wo: NodeId,
    num_heads: usize,
    head_dim: usize,
    mask: Option<&[bool]>,
) -> (NodeId, Vec<NodeId>) {
    let q = g.matmul(q_in, wq);
    let k = g.matmul(kv_in, wk);
    let v = g.matmul(kv_in, wv);
    let scale = 1.0 / math::sqrt(head_dim as f64);
    let lq = g.value(q).rows();

    let mask_node = mask.map(|m| {
        assert_eq!(m.len(), g.value(kv_in).rows(), "mask length mismatch");
        let t = mask_matrix(lq, m);
        g.constant(t)
    });

    let mut heads = Vec::with_capacity(num_heads);
    let mut probs = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let qh = g.slice_cols(q, h * head_dim, head_dim);
        let kh = g.slice_cols(k, h * head_dim, head_dim);
        let vh = g.slice_cols(v, h * head_dim, head_dim);
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt);
        let scores = g.scale(scores, scale);
        let scores = match mask_node {
            Some(m) => g.add(scores, m),
            None => scores,
        };
        let attn = g.softmax_rows(scores);
        probs.push(attn);
        heads.push(g.matmul(attn, vh));
    }
    let cat = g.concat_cols(&heads);
    (g.matmul(cat, wo), probs)
}

#[derive(Clone)]
pub struct SelfAttention {
    norm: LayerNorm,
    wq: PId,
    wk: PId,
    wv: PId,
    wo: PId,
    num_heads: usize,
    head_dim: usize,
}

impl SelfAttention {
    pub fn init(ps: &mut ParamSet, name: &str, cfg: &ConformerConfig, rng: &mut Prng) -> Self {
        let d = cfg.d_model;
        SelfAttention {
            norm: LayerNorm::init(ps, &format!("{name}.norm"), d),
            wq: ps.add(format!("{name}.wq"), xavier(rng, d, d)),
            wk: ps.add(format!("{name}.wk"), xavier(rng, d, d)),
            wv: ps.add(format!("{name}.wv"), xavier(rng, d, d)),
            wo: ps.add(format!("{name}.wo"), xavier(rng, d, d)),
            num_heads: cfg.num_heads,
            head_dim: cfg.head_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: NodeId, mask: Option<&[bool]>) -> NodeId {
        let h = self.norm.forward(g, bound, x);
        let (out, _) = multi_head_attend(
            g,
            h,
            h,
            bound.node(self.wq),
            bound.node(self.wk),
            bound.node(self.wv),
            bound.node(self.wo),
            self.num_heads,
            self.head_dim,
            mask,
        );
        out
    }
}

/// Length-fixing cross-attention: a learned index sequence of length `K`
/// attends over variable-length content, so the output always has `K` rows.
/// (The index sequence plays the query role; content supplies keys and
/// values.)
#[derive(Clone)]
pub struct CrossAttention {
    wq: PId,
    wk: PId,
    wv: PId,
    wo: PId,
    num_heads: usize,
    head_dim: usize,
}

impl CrossAttention {
    pub fn init(ps: &mut ParamSet, name: &str, cfg: &ConformerConfig, rng: &mut Prng) -> Self {
        let d = cfg.d_model;
        CrossAttention {
            wq: ps.add(format!("{name}.wq"), xavier(rng, d, d)),
            wk: ps.add(format!("{name}.wk"), xavier(rng, d, d)),
            wv: ps.add(format!("{name}.wv"), xavier(rng, d, d)),
            wo: ps.add(format!("{name}.wo"), xavier(rng, d, d)),
            num_heads: cfg.num_heads,
            head_dim: cfg.head_dim,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &Bound,
        index: NodeId,
        content: NodeId,
        mask: Option<&[bool]>,
    ) -> NodeId {
        self.forward_with_probs(g, bound, index, content, mask).0
    }

    pub fn forward_with_probs(
        &self,
        g: &mut Graph,
        bound: &Bound,
        index: NodeId,
        content: NodeId,
        mask: Option<&[bool]>,
    ) -> (NodeId, Vec<NodeId>) {
        assert!(g.value(content).rows() >= 1, "cross_attention requires content length >= 1");
        multi_head_attend(
            g,
            index,
            content,
            bound.node(self.wq),
            bound.node(self.wk),
            bound.node(self.wv),
            bound.node(self.wo),
            self.num_heads,
            self.head_dim,
            mask,
        )
    }
}

// ── Convolution module ──────────────────────────────────────────────────

#[derive(Clone)]
pub struct ConvModule {
    norm: LayerNorm,
    pw1: Linear,
    dw_w: PId,
    dw_b: PId,
    pw2: Linear,
    d: usize,
}

impl ConvModule {
    pub fn init(ps: &mut ParamSet, name: &str, cfg: &ConformerConfig, rng: &mut Prng) -> Self {
        let d = cfg.d_model;
        let k = cfg.conv_kernel;
        // Depthwise kernel scaled like a fan-in k filter.
        let limit = math::sqrt(6.0 / (k + 1) as f64);
        let dw =
            Tensor::matrix(k, d, (0..k * d).map(|_| rng.range_f64(-limit, limit)).collect());
        ConvModule {
            norm: LayerNorm::init(ps, &format!("{name}.norm"), d),
            pw1: Linear::init(ps, &format!("{name}.pw1"), d, 2 * d, true, rng),
            dw_w: ps.add(format!("{name}.dw.w"), dw),
            dw_b: ps.add(format!("{name}.dw.b"), Tensor::zeros(&[d])),
            pw2: Linear::init(ps, &format!("{name}.pw2"), d, d, true, rng),
            d,
        }
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: NodeId) -> NodeId {
        let h = self.norm.forward(g, bound, x);
        let h = self.pw1.forward(g, bound, h);
        // Gated linear unit over the doubled channels.
        let a = g.slice_cols(h, 0, self.d);
        let b = g.slice_cols(h, self.d, self.d);
        let gate = g.sigmoid(b);
        let h = g.mul(a, gate);
        let h = g.depthwise_conv1d(h, bound.node(self.dw_w), bound.node(self.dw_b));
        // Swish activation.
        let s = g.sigmoid(h);
        let h = g.mul(h, s);
        self.pw2.forward(g, bound, h)
    }
}

// ── Conformer block and stack ───────────────────────────────────────────

/// Macaron conformer block: half-step feed-forward, self-attention, depthwise
/// convolution module, half-step feed-forward, final layer norm.
#[derive(Clone)]
pub struct ConformerBlock {
    ff1: FeedForward,
    attn: SelfAttention,
    conv: ConvModule,
    ff2: FeedForward,
    final_norm: LayerNorm,
}

impl ConformerBlock {
    pub fn init(ps: &mut ParamSet, name: &str, cfg: &ConformerConfig, rng: &mut Prng) -> Self {
        cfg.validate();
        let d = cfg.d_model;
        ConformerBlock {
            ff1: FeedForward::init(ps, &format!("{name}.ff1"), d, cfg.ff_dim, rng),
            attn: SelfAttention::init(ps, &format!("{name}.attn"), cfg, rng),
            conv: ConvModule::init(ps, &format!("{name}.conv"), cfg, rng),
            ff2: FeedForward::init(ps, &format!("{name}.ff2"), d, cfg.ff_dim, rng),
            final_norm: LayerNorm::init(ps, &format!("{name}.norm"), d),
        }
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: NodeId, mask: Option<&[bool]>) -> NodeId {
        assert!(g.value(x).rows() >= 1, "conformer block requires sequence length >= 1");
        let f = self.ff1.forward(g, bound, x);
        let f = g.scale(f, 0.5);
        let x = g.add(x, f);

        let a = self.attn.forward(g, bound, x, mask);
        let x = g.add(x, a);

        let c = self.conv.forward(g, bound, x);
        let x = g.add(x, c);

        let f = self.ff2.forward(g, bound, x);
        let f = g.scale(f, 0.5);
        let x = g.add(x, f);

        self.final_norm.forward(g, bound, x)
    }
}

#[derive(Clone)]
pub struct ConformerStack {
    pub blocks: Vec<ConformerBlock>,
}

impl ConformerStack {
    /// `kernels[i]` gives the conv kernel size of block `i`; all other
    /// dimensions come from `cfg`.
    pub fn init(
        ps: &mut ParamSet,
        name: &str,
        cfg: &ConformerConfig,
        kernels: &[usize],
        rng: &mut Prng,
    ) -> Self {
        let blocks = kernels
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                let block_cfg = ConformerConfig { conv_kernel: k, ..*cfg };
                ConformerBlock::init(ps, &format!("{name}.block{i}"), &block_cfg, rng)
            })
            .collect();
        ConformerStack { blocks }
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, mut x: NodeId, mask: Option<&[bool]>) -> NodeId {
        for b in &self.blocks {
            x = b.forward(g, bound, x, mask);
        }
        x
    }
}

// ── Positional embeddings ───────────────────────────────────────────────

/// Learnable positional table, looked up by position index.
#[derive(Clone)]
pub struct PositionalTable {
    table: PId,
    pub max_positions: usize,
    pub dim: usize,
}

impl PositionalTable {
    pub fn init(ps: &mut ParamSet, name: &str, max_positions: usize, dim: usize, rng: &mut Prng) -> Self {
        PositionalTable {
            table: ps.add(String::from(name), table_init(rng, max_positions, dim, 0.1)),
            max_positions,
            dim,
        }
    }

    /// Rows for positions `0..n`.
    pub fn prefix(&self, g: &mut Graph, bound: &Bound, n: usize) -> NodeId {
        assert!(n <= self.max_positions, "position {n} exceeds table size {}", self.max_positions);
        let ids: Vec<usize> = (0..n).collect();
        g.embedding(bound.node(self.table), &ids)
    }

    /// One row per phoneme index, each repeated by its duration: the
    /// duration-positional upsampling of the encoder input. Output frame
    /// count equals the duration sum.
    pub fn upsample_by_durations(&self, g: &mut Graph, bound: &Bound, durations: &[u32]) -> NodeId {
        assert!(!durations.is_empty(), "empty duration vector");
        assert!(durations.iter().all(|&d| d >= 1), "durations must be >= 1");
        assert!(durations.len() <= self.max_positions, "too many phonemes for positional table");
        let pe = self.prefix(g, bound, durations.len());
        let counts: Vec<usize> = durations.iter().map(|&d| d as usize).collect();
        g.repeat_rows(pe, &counts)
    }
}

/// Interleaved sin/cos embedding at geometric frequencies spanning 1 down to
/// 1e-4. `dim` must be even.
pub fn sinusoidal_embed(value: f64, dim: usize) -> Vec<f64> {
    assert!(dim % 2 == 0, "sinusoidal embedding dim must be even");
    let half = dim / 2;
    let mut out = alloc::vec![0.0; dim];
    for i in 0..half {
        let exponent = if half > 1 { i as f64 / (half - 1) as f64 } else { 0.0 };
        let freq = math::pow(10_000.0, -exponent);
        out[2 * i] = math::sin(value * freq);
        out[2 * i + 1] = math::cos(value * freq);
    }
    out
}

/// Sinusoidal rows for positions `0..n` as a constant tensor: positional
/// content for sequences whose network owns no learnable table.
pub fn sinusoidal_positions(n: usize, dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * dim);
    for p in 0..n {
        data.extend_from_slice(&sinusoidal_embed(p as f64, dim));
    }
    Tensor::matrix(n, dim, data)
}
