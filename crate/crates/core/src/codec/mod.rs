//! Vector-quantized prosody autoencoder.
//!
//! The encoder stacks pitch, energy, duration-positional frames and a mask
//! indicator, runs conformer blocks, and compresses to a fixed-length latent
//! by cross-attending from a learned index sequence. The latent is residual
//! vector quantized and decoded back to durations, pitch and energy
//! conditioned on phoneme embeddings.

pub mod rvq;

use crate::adversarial::{
    feature_matching, lsgan_discriminator_loss, lsgan_generator_loss, CodecDiscriminators,
};
use crate::corpus::Utterance;
use crate::math;
use crate::nn::{ConformerConfig, ConformerStack, CrossAttention, Linear, PositionalTable};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{Bound, PId, ParamSet};
use crate::rng::Prng;
use crate::tape::{Graph, NodeId};
use crate::tensor::Tensor;
use crate::track::{mask_prosody, ProsodyTrack};
use alloc::vec::Vec;
pub use rvq::{ResidualVq, RvqConfig, RvqQuant};

/// Loss weight on pitch reconstruction.
pub const LAMBDA_F0: f64 = 0.1;
/// Loss weight on energy reconstruction.
pub const LAMBDA_N: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CodecConfig {
    pub d_model: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub kernel_wide: usize,
    pub kernel_narrow: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    /// Fixed latent length K.
    pub style_len: usize,
    pub vocab: usize,
    pub max_phonemes: usize,
    pub rvq: Option<RvqConfig>,
    /// When false, the fixed-length compression is bypassed and the latent
    /// keeps the frame resolution (the variable-length ablation).
    pub fixed_length: bool,
}

impl CodecConfig {
    pub fn conformer(&self) -> ConformerConfig {
        ConformerConfig {
            d_model: self.d_model,
            num_heads: self.num_heads,
            head_dim: self.d_model / self.num_heads,
            conv_kernel: self.kernel_narrow,
            ff_dim: self.ff_dim,
        }
    }

    fn kernels(&self, blocks: usize) -> Vec<usize> {
        (0..blocks).map(|i| if i == 0 { self.kernel_wide } else { self.kernel_narrow }).collect()
    }

    /// Desk-scale defaults: trainable on a CPU in minutes.
    pub fn desk_default() -> Self {
        CodecConfig {
            d_model: 64,
            num_heads: 4,
            ff_dim: 128,
            kernel_wide: 15,
            kernel_narrow: 15,
            enc_blocks: 4,
            dec_blocks: 4,
            style_len: 16,
            vocab: crate::corpus::VOCAB_SIZE,
            max_phonemes: 256,
            rvq: Some(RvqConfig { num_stages: 9, codes_per_book: 256, code_dim: 8 }),
            fixed_length: true,
        }
    }

    /// Reduced widths for tests and acceptance runs.
    pub fn tiny() -> Self {
        CodecConfig {
            d_model: 32,
            num_heads: 2,
            ff_dim: 64,
            kernel_wide: 7,
            kernel_narrow: 5,
            enc_blocks: 2,
            dec_blocks: 2,
            style_len: 8,
            vocab: crate::corpus::VOCAB_SIZE,
            max_phonemes: 128,
            rvq: Some(RvqConfig { num_stages: 9, codes_per_book: 64, code_dim: 8 }),
            fixed_length: true,
        }
    }
}

/// Fixed-length latent describing an utterance's prosodic trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeVaryingStyle {
    pub h: Tensor,
    pub quantized: bool,
    /// Per-row stage indices when quantized.
    pub codes: Option<Vec<Vec<usize>>>,
}

#[derive(Clone)]
struct Encoder {
    pe: PositionalTable,
    in_proj: Linear,
    blocks: ConformerStack,
    style_index: Option<PId>,
    cross: Option<CrossAttention>,
}

#[derive(Clone)]
struct Decoder {
    text_table: PId,
    blocks: ConformerStack,
    dur_head: Linear,
    pe_head: Linear,
}

#[derive(Clone)]
pub struct ProsodyCodec {
    pub cfg: CodecConfig,
    pub ps: ParamSet,
    enc: Encoder,
    dec: Decoder,
    pub rvq: Option<ResidualVq>,
}

/// Graph nodes produced by one decode pass.
pub struct DecodeNodes {
    /// Predicted durations, `[N, 1]`, positive via softplus.
    pub dur: NodeId,
    /// Frame-level pitch, `[T, 1]`.
    pub pitch: NodeId,
    /// Frame-level energy, `[T, 1]`.
    pub energy: NodeId,
    /// Durations used for the frame-level upsampling.
    pub frame_durations: Vec<u32>,
}

/// Plain-value decode output.
#[derive(Clone, Debug)]
pub struct DecodedProsody {
    pub durations_raw: Vec<f64>,
    /// Rounded to integers, clamped to >= 1.
    pub durations: Vec<u32>,
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub enum DurationSource<'a> {
    /// Ground-truth durations (training and aligned evaluation).
    Truth(&'a [u32]),
    /// Round the duration head's own predictions (inference).
    Predicted,
}

impl ProsodyCodec {
    pub fn init(cfg: CodecConfig, seed: u64) -> Self {
        let mut ps = ParamSet::new();
        let mut rng = Prng::derive(seed, 0xC0DEC, 0);
        let conf = cfg.conformer();
        conf.validate();

        let pe = PositionalTable::init(&mut ps, "enc.pe", cfg.max_phonemes, cfg.d_model, &mut rng);
        let in_proj = Linear::init(&mut ps, "enc.in_proj", cfg.d_model + 3, cfg.d_model, true, &mut rng);
        let enc_blocks =
            ConformerStack::init(&mut ps, "enc", &conf, &cfg.kernels(cfg.enc_blocks), &mut rng);
        let (style_index, cross) = if cfg.fixed_length {
            let idx = ps.add(
                "enc.style_index",
                crate::nn::table_init(&mut rng, cfg.style_len, cfg.d_model, 0.1),
            );
            let cross = CrossAttention::init(&mut ps, "enc.cross", &conf, &mut rng);
            (Some(idx), Some(cross))
        } else {
            (None, None)
        };

        let text_table = ps.add(
            "dec.text_table",
            crate::nn::table_init(&mut rng, cfg.vocab, cfg.d_model, 0.1),
        );
        let dec_blocks =
            ConformerStack::init(&mut ps, "dec", &conf, &cfg.kernels(cfg.dec_blocks), &mut rng);
        let dur_head = Linear::init(&mut ps, "dec.dur_head", cfg.d_model, 1, true, &mut rng);
        let pe_head = Linear::init(&mut ps, "dec.pe_head", cfg.d_model, 2, true, &mut rng);

        let rvq = cfg
            .rvq
            .map(|rcfg| ResidualVq::init(&mut ps, "rvq", cfg.d_model, rcfg, &mut rng));

        ProsodyCodec {
            cfg,
            ps,
            enc: Encoder { pe, in_proj, blocks: enc_blocks, style_index, cross },
            dec: Decoder { text_table, blocks: dec_blocks, dur_head, pe_head },
            rvq,
        }
    }

    /// Encoder forward: stacked `[duration-PE | pitch | energy | indicator]`
    /// frames through conformer blocks, then fixed-length compression.
    /// Masked frames are zeroed in every channel with the indicator raised.
    pub fn encode(&self, g: &mut Graph, bound: &Bound, track: &ProsodyTrack) -> NodeId {
        track.validate().expect("invalid track");
        let t = track.frames();
        let mask = track.effective_frame_mask();

        let pe_frames = self.enc.pe.upsample_by_durations(g, bound, &track.durations);
        // Zero the positional rows of masked frames.
        let keep = Tensor::matrix(
            t,
            1,
            mask.iter().map(|&m| if m { 0.0 } else { 1.0 }).collect(),
        );
        let d = self.cfg.d_model;
        let keep_wide = {
            let mut data = Vec::with_capacity(t * d);
            for &k in keep.data() {
                data.extend(core::iter::repeat(k).take(d));
            }
            Tensor::matrix(t, d, data)
        };
        let keep_node = g.constant(keep_wide);
        let pe_frames = g.mul(pe_frames, keep_node);

        let col = |vals: &[f64]| -> Tensor {
            Tensor::matrix(
                t,
                1,
                vals.iter().zip(&mask).map(|(&v, &m)| if m { 0.0 } else { v }).collect(),
            )
        };
        let pitch = g.constant(col(&track.pitch));
        let energy = g.constant(col(&track.energy));
        let indicator = g.constant(Tensor::matrix(
            t,
            1,
            mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
        ));

        let stacked = g.concat_cols(&[pe_frames, pitch, energy, indicator]);
        let x = self.enc.in_proj.forward(g, bound, stacked);
        let h_vl = self.enc.blocks.forward(g, bound, x, None);

        match (&self.enc.style_index, &self.enc.cross) {
            (Some(idx), Some(cross)) => {
                let ids: Vec<usize> = (0..self.cfg.style_len).collect();
                let q = g.embedding(bound.node(*idx), &ids);
                cross.forward(g, bound, q, h_vl, None)
            }
            _ => h_vl,
        }
    }

    /// Value-level encode without gradient bookkeeping.
    pub fn encode_value(&self, track: &ProsodyTrack) -> Tensor {
        let mut g = Graph::new();
        let bound = self.ps.bind(&mut g);
        let h = self.encode(&mut g, &bound, track);
        g.value(h).clone()
    }

    /// Encode and quantize to a `TimeVaryingStyle`.
    pub fn encode_style(&self, track: &ProsodyTrack) -> TimeVaryingStyle {
        let h = self.encode_value(track);
        match &self.rvq {
            Some(rvq) => {
                let (codes, hq) = rvq.quantize_value(&self.ps, &h);
                TimeVaryingStyle { h: hq, quantized: true, codes: Some(codes) }
            }
            None => TimeVaryingStyle { h, quantized: false, codes: None },
        }
    }

    /// Decoder forward: conformer over `[text; style]`, truncate to the text
    /// positions, duration head per phoneme, pitch/energy head on
    /// duration-upsampled features.
    pub fn decode(
        &self,
        g: &mut Graph,
        bound: &Bound,
        style: NodeId,
        phonemes: &[u32],
        durations: DurationSource<'_>,
    ) -> DecodeNodes {
        assert!(!phonemes.is_empty(), "decode requires at least one phoneme");
        let n = phonemes.len();
        let ids: Vec<usize> = phonemes.iter().map(|&p| p as usize).collect();
        let text = g.embedding(bound.node(self.dec.text_table), &ids);
        let seq = g.concat_rows(&[text, style]);
        let y = self.dec.blocks.forward(g, bound, seq, None);
        let y_text = g.slice_rows(y, 0, n);

        let dur_lin = self.dec.dur_head.forward(g, bound, y_text);
        let dur = g.softplus(dur_lin);

        let frame_durations: Vec<u32> = match durations {
            DurationSource::Truth(d) => {
                assert_eq!(d.len(), n, "duration count mismatch");
                d.to_vec()
            }
            DurationSource::Predicted => g
                .value(dur)
                .data()
                .iter()
                .map(|&v| math::round(v).max(1.0) as u32)
                .collect(),
        };
        let counts: Vec<usize> = frame_durations.iter().map(|&d| d as usize).collect();
        let frames = g.repeat_rows(y_text, &counts);
        let pe = self.dec.pe_head.forward(g, bound, frames);
        let pitch = g.slice_cols(pe, 0, 1);
        let energy = g.slice_cols(pe, 1, 1);

        DecodeNodes { dur, pitch, energy, frame_durations }
    }

    /// Value-level decode.
    pub fn decode_value(
        &self,
        style: &Tensor,
        phonemes: &[u32],
        durations: DurationSource<'_>,
    ) -> DecodedProsody {
        let mut g = Graph::new();
        let bound = self.ps.bind(&mut g);
        let style_node = g.constant(style.clone());
        let out = self.decode(&mut g, &bound, style_node, phonemes, durations);
        let durations_raw = g.value(out.dur).data().to_vec();
        DecodedProsody {
            durations: out.frame_durations.clone(),
            durations_raw,
            pitch: g.value(out.pitch).data().to_vec(),
            energy: g.value(out.energy).data().to_vec(),
        }
    }

    /// Full autoencoder losses of one utterance against its ground truth,
    /// using truth durations so frames align.
    pub fn reconstruction_eval(&self, track: &ProsodyTrack, phonemes: &[u32]) -> ProsodyLosses {
        let style = self.encode_style(track);
        let mut g = Graph::new();
        let bound = self.ps.bind(&mut g);
        let style_node = g.constant(style.h);
        let out =
            self.decode(&mut g, &bound, style_node, phonemes, DurationSource::Truth(&track.durations));
        let nodes = prosody_loss_nodes(&mut g, &out, track);
        ProsodyLosses {
            l_dur: g.value(nodes.l_dur).data()[0],
            l_f0: g.value(nodes.l_f0).data()[0],
            l_n: g.value(nodes.l_n).data()[0],
        }
    }
}

/// Scalar reconstruction losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProsodyLosses {
    pub l_dur: f64,
    pub l_f0: f64,
    pub l_n: f64,
}

impl ProsodyLosses {
    /// The aggregated prosody loss with the standard weights.
    pub fn combined(&self) -> f64 {
        self.l_dur + LAMBDA_F0 * self.l_f0 + LAMBDA_N * self.l_n
    }
}

pub struct ProsodyLossNodes {
    pub l_dur: NodeId,
    pub l_f0: NodeId,
    pub l_n: NodeId,
}

/// Mean-absolute-error loss nodes between a decode pass and ground truth.
/// Requires the decode to have used the track's own durations.
pub fn prosody_loss_nodes(g: &mut Graph, out: &DecodeNodes, track: &ProsodyTrack) -> ProsodyLossNodes {
    let n = track.num_phonemes();
    let t = track.frames();
    assert_eq!(out.frame_durations, track.durations, "losses need truth-aligned frames");
    let dur_truth =
        g.constant(Tensor::matrix(n, 1, track.durations.iter().map(|&d| d as f64).collect()));
    let pitch_truth = g.constant(Tensor::matrix(t, 1, track.pitch.clone()));
    let energy_truth = g.constant(Tensor::matrix(t, 1, track.energy.clone()));
    ProsodyLossNodes {
        l_dur: g.l1_loss(out.dur, dur_truth),
        l_f0: g.l1_loss(out.pitch, pitch_truth),
        l_n: g.l1_loss(out.energy, energy_truth),
    }
}

/// `L_dur + 0.1 L_f0 + 1.0 L_n` as a graph node.
pub fn combined_loss_node(g: &mut Graph, nodes: &ProsodyLossNodes) -> NodeId {
    let f0 = g.scale(nodes.l_f0, LAMBDA_F0);
    let en = g.scale(nodes.l_n, LAMBDA_N);
    let s = g.add(nodes.l_dur, f0);
    g.add(s, en)
}

// ── Prosody editing ─────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct EditResult {
    /// Raw decoder output over the whole utterance (mixed durations).
    pub decoded: ProsodyTrack,
    /// Unmasked phonemes keep original values bit-exactly; masked phonemes
    /// take the decoded values (and decoded durations).
    pub spliced: ProsodyTrack,
}

/// Mask a phoneme span, re-encode, decode, and splice the regenerated span
/// into the original. An empty span returns the input unchanged.
pub fn edit_prosody(
    codec: &ProsodyCodec,
    track: &ProsodyTrack,
    phonemes: &[u32],
    span: (usize, usize),
) -> Result<EditResult, crate::track::TrackError> {
    let masked = mask_prosody(track, span.0, span.1)?;
    if span.0 == span.1 {
        return Ok(EditResult { decoded: track.clone(), spliced: track.clone() });
    }
    let style = codec.encode_style(&masked);

    // First decode with predicted durations to obtain the regenerated span's
    // lengths, then fix unmasked phonemes to their original durations.
    let pred = codec.decode_value(&style.h, phonemes, DurationSource::Predicted);
    let mut mixed: Vec<u32> = track.durations.clone();
    for i in span.0..span.1 {
        mixed[i] = pred.durations[i];
    }
    let dec = codec.decode_value(&style.h, phonemes, DurationSource::Truth(&mixed));
    let decoded = ProsodyTrack::new(dec.pitch.clone(), dec.energy.clone(), mixed.clone())?;

    // Splice per phoneme: original frames outside the span, decoded inside.
    let orig_ends = track.phoneme_ends();
    let dec_ends = decoded.phoneme_ends();
    let mut pitch = Vec::new();
    let mut energy = Vec::new();
    for i in 0..track.num_phonemes() {
        let (src, s_lo, s_hi) = if i >= span.0 && i < span.1 {
            let lo = if i == 0 { 0 } else { dec_ends[i - 1] };
            (&decoded, lo, dec_ends[i])
        } else {
            let lo = if i == 0 { 0 } else { orig_ends[i - 1] };
            (track, lo, orig_ends[i])
        };
        pitch.extend_from_slice(&src.pitch[s_lo..s_hi]);
        energy.extend_from_slice(&src.energy[s_lo..s_hi]);
    }
    let spliced = ProsodyTrack::new(pitch, energy, mixed)?;
    Ok(EditResult { decoded, spliced })
}

/// Mean absolute pitch error inside and outside a masked span, decoding with
/// truth durations so frames align with the original.
pub fn masked_region_errors(
    codec: &ProsodyCodec,
    track: &ProsodyTrack,
    phonemes: &[u32],
    span: (usize, usize),
) -> Result<(f64, f64), crate::track::TrackError> {
    let masked = mask_prosody(track, span.0, span.1)?;
    let style = codec.encode_style(&masked);
    let dec = codec.decode_value(&style.h, phonemes, DurationSource::Truth(&track.durations));
    let mask = masked.effective_frame_mask();
    let (mut me, mut mc, mut ue, mut uc) = (0.0, 0usize, 0.0, 0usize);
    for (f, &m) in mask.iter().enumerate() {
        let err = math::abs(dec.pitch[f] - track.pitch[f]);
        if m {
            me += err;
            mc += 1;
        } else {
            ue += err;
            uc += 1;
        }
    }
    Ok((me / mc.max(1) as f64, ue / uc.max(1) as f64))
}

// ── Training ────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct CodecTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub optimizer: AdamWConfig,
    /// Probability of masking a contiguous phoneme span per sample.
    pub mask_prob: f64,
    /// Masked span length as a fraction range of the utterance.
    pub mask_span: (f64, f64),
    pub rvq_codebook_weight: f64,
    pub rvq_commitment_weight: f64,
    /// Steps a code may stay unused before reseeding.
    pub dead_code_steps: u64,
    pub adversarial: bool,
    /// Pure-reconstruction steps before the adversarial terms switch on.
    pub adv_warmup: usize,
    pub adv_weight: f64,
    pub fm_weight: f64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        CodecTrainConfig {
            steps: 2000,
            batch: 8,
            optimizer: AdamWConfig::default(),
            mask_prob: 0.5,
            mask_span: (0.1, 0.5),
            rvq_codebook_weight: 1.0,
            rvq_commitment_weight: 0.25,
            dead_code_steps: 200,
            adversarial: true,
            adv_warmup: 1000,
            adv_weight: 1.0,
            fm_weight: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CodecTrainRecord {
    pub step: usize,
    pub l_dur: f64,
    pub l_f0: f64,
    pub l_n: f64,
    pub total: f64,
}

#[derive(Debug)]
pub enum TrainError {
    NonFiniteLoss { step: usize },
    EmptyCorpus,
}

impl core::fmt::Display for TrainError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            TrainError::NonFiniteLoss { step } => write!(f, "non-finite loss at step {step}"),
            TrainError::EmptyCorpus => write!(f, "no utterances to train on"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for TrainError {}

/// Owns everything a codec training run mutates, so a checkpoint can capture
/// and restore the exact state (parameters, moments, RNG position, step).
pub struct CodecTraining {
    pub codec: ProsodyCodec,
    pub discs: Option<CodecDiscriminators>,
    pub opt: AdamW,
    pub opt_disc: Option<AdamW>,
    pub rng: Prng,
    pub step: usize,
    pub cfg: CodecTrainConfig,
}

impl CodecTraining {
    pub fn new(codec: ProsodyCodec, cfg: CodecTrainConfig, seed: u64) -> Self {
        let opt = AdamW::new(cfg.optimizer, &codec.ps);
        let (discs, opt_disc) = if cfg.adversarial {
            let d = CodecDiscriminators::init(&codec.cfg, seed);
            let o = AdamW::new(cfg.optimizer, &d.ps);
            (Some(d), Some(o))
        } else {
            (None, None)
        };
        CodecTraining { codec, discs, opt, opt_disc, rng: Prng::derive(seed, 0x7121, 0), step: 0, cfg }
    }

    fn sample_mask(&mut self, track: &ProsodyTrack) -> ProsodyTrack {
        if self.rng.uniform() >= self.cfg.mask_prob {
            return track.clone();
        }
        let n = track.num_phonemes();
        let frac = self.rng.range_f64(self.cfg.mask_span.0, self.cfg.mask_span.1);
        let len = ((frac * n as f64).ceil() as usize).clamp(1, n);
        let start = self.rng.below(n - len + 1);
        mask_prosody(track, start, start + len).expect("span within bounds")
    }

    /// One optimization step over a batch. Returns batch-mean losses.
    pub fn step_once(&mut self, data: &[Utterance]) -> Result<CodecTrainRecord, TrainError> {
        if data.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        let b = self.cfg.batch;
        let picks: Vec<usize> = (0..b).map(|_| self.rng.below(data.len())).collect();
        let adv_on = self.discs.is_some() && self.step >= self.cfg.adv_warmup;

        // Generator pass: one graph over the whole batch.
        let mut g = Graph::new();
        let bound = self.codec.ps.bind(&mut g);
        let disc_bound = self.discs.as_mut().map(|d| {
            d.ps.set_trainable(false);
            d.ps.bind(&mut g)
        });

        let inv_b = 1.0 / b as f64;
        let mut total: Option<NodeId> = None;
        let mut sum_dur = 0.0;
        let mut sum_f0 = 0.0;
        let mut sum_n = 0.0;
        let mut batch_codes: Vec<Vec<usize>> = Vec::new();
        let mut batch_z: Vec<Tensor> = Vec::new();

        for &i in &picks {
            let utt = &data[i];
            let masked = self.sample_mask(&utt.track);
            let h = self.codec.encode(&mut g, &bound, &masked);
            let (style, aux) = match &self.codec.rvq {
                Some(rvq) => {
                    let q = rvq.quantize(&mut g, &bound, h);
                    batch_codes.extend(q.codes.iter().cloned());
                    batch_z.push(q.z_rows.clone());
                    (q.hq, Some((q.codebook_loss, q.commitment_loss)))
                }
                None => (h, None),
            };
            let out = self.codec.decode(
                &mut g,
                &bound,
                style,
                &utt.phonemes,
                DurationSource::Truth(&utt.track.durations),
            );
            let nodes = prosody_loss_nodes(&mut g, &out, &utt.track);
            sum_dur += g.value(nodes.l_dur).data()[0] * inv_b;
            sum_f0 += g.value(nodes.l_f0).data()[0] * inv_b;
            sum_n += g.value(nodes.l_n).data()[0] * inv_b;

            let mut utt_loss = combined_loss_node(&mut g, &nodes);
            if let Some((cb, commit)) = aux {
                let cb = g.scale(cb, self.cfg.rvq_codebook_weight);
                let cm = g.scale(commit, self.cfg.rvq_commitment_weight);
                let s = g.add(cb, cm);
                utt_loss = g.add(utt_loss, s);
            }
            if adv_on {
                let discs = self.discs.as_ref().expect("adv_on implies discriminators");
                let db = disc_bound.as_ref().expect("bound with discriminators");
                let style_val = g.value(style).clone();
                let text_val = text_embedding_value(&self.codec, &utt.phonemes);
                let cond = cond_sequence(&mut g, &style_val, &text_val);

                let fake_dur = out.dur;
                let real_dur = g.constant(Tensor::matrix(
                    utt.track.num_phonemes(),
                    1,
                    utt.track.durations.iter().map(|&d| d as f64).collect(),
                ));
                let fake_pe = g.concat_cols(&[out.pitch, out.energy]);
                let real_pe = g.constant(stack_pitch_energy(&utt.track));

                let mut adv_terms: Vec<NodeId> = Vec::new();
                for (disc, fake, real) in
                    [(&discs.dur, fake_dur, real_dur), (&discs.pe, fake_pe, real_pe)]
                {
                    let f = disc.forward(&mut g, db, fake, cond);
                    let r = disc.forward(&mut g, db, real, cond);
                    let adv = lsgan_generator_loss(&mut g, f.logits);
                    let fm = feature_matching(&mut g, &r.features, &f.features);
                    let adv = g.scale(adv, self.cfg.adv_weight);
                    let fm = g.scale(fm, self.cfg.fm_weight);
                    adv_terms.push(adv);
                    adv_terms.push(fm);
                }
                for t in adv_terms {
                    utt_loss = g.add(utt_loss, t);
                }
            }
            let scaled = g.scale(utt_loss, inv_b);
            total = Some(match total {
                Some(t) => g.add(t, scaled),
                None => scaled,
            });
        }

        let total = total.expect("non-empty batch");
        let total_val = g.value(total).data()[0];
        if !total_val.is_finite() {
            return Err(TrainError::NonFiniteLoss { step: self.step });
        }
        g.backward(total);
        let grads = bound.grads(&g);
        self.opt.step(&mut self.codec.ps, &grads);

        if let Some(rvq) = &mut self.codec.rvq {
            if !batch_z.is_empty() {
                let rows: usize = batch_z.iter().map(|z| z.rows()).sum();
                let dim = batch_z[0].cols();
                let mut data = Vec::with_capacity(rows * dim);
                for z in &batch_z {
                    data.extend_from_slice(z.data());
                }
                let all_z = Tensor::matrix(rows, dim, data);
                rvq.note_usage_and_reseed(
                    &mut self.codec.ps,
                    &batch_codes,
                    &all_z,
                    self.cfg.dead_code_steps,
                    &mut self.rng,
                );
            }
        }

        // Discriminator pass on detached generator outputs.
        if adv_on {
            self.discriminator_step(data, &picks)?;
        }
        if let Some(d) = self.discs.as_mut() {
            d.ps.set_trainable(true);
        }

        self.step += 1;
        Ok(CodecTrainRecord {
            step: self.step,
            l_dur: sum_dur,
            l_f0: sum_f0,
            l_n: sum_n,
            total: total_val,
        })
    }

    fn discriminator_step(&mut self, data: &[Utterance], picks: &[usize]) -> Result<(), TrainError> {
        let discs = self.discs.as_mut().expect("discriminator step without discriminators");
        discs.ps.set_trainable(true);
        let mut g = Graph::new();
        let db = discs.ps.bind(&mut g);
        let inv_b = 1.0 / picks.len() as f64;
        let mut total: Option<NodeId> = None;

        for &i in picks {
            let utt = &data[i];
            // Detached fake: plain-value forward through the current codec.
            let style = self.codec.encode_style(&utt.track);
            let dec = self.codec.decode_value(
                &style.h,
                &utt.phonemes,
                DurationSource::Truth(&utt.track.durations),
            );
            let text_val = text_embedding_value(&self.codec, &utt.phonemes);
            let cond = cond_sequence(&mut g, &style.h, &text_val);

            let n = utt.track.num_phonemes();
            let t = utt.track.frames();
            let fake_dur = g.constant(Tensor::matrix(n, 1, dec.durations_raw.clone()));
            let real_dur = g.constant(Tensor::matrix(
                n,
                1,
                utt.track.durations.iter().map(|&d| d as f64).collect(),
            ));
            let mut pe_data = Vec::with_capacity(t * 2);
            for f in 0..t {
                pe_data.push(dec.pitch[f]);
                pe_data.push(dec.energy[f]);
            }
            let fake_pe = g.constant(Tensor::matrix(t, 2, pe_data));
            let real_pe = g.constant(stack_pitch_energy(&utt.track));

            for (disc, fake, real) in
                [(&discs.dur, fake_dur, real_dur), (&discs.pe, fake_pe, real_pe)]
            {
                let f = disc.forward(&mut g, &db, fake, cond);
                let r = disc.forward(&mut g, &db, real, cond);
                let d_loss = lsgan_discriminator_loss(&mut g, r.logits, f.logits);
                let scaled = g.scale(d_loss, inv_b);
                total = Some(match total {
                    Some(tn) => g.add(tn, scaled),
                    None => scaled,
                });
            }
        }
        let total = total.expect("non-empty batch");
        if !g.value(total).data()[0].is_finite() {
            return Err(TrainError::NonFiniteLoss { step: self.step });
        }
        g.backward(total);
        let grads = db.grads(&g);
        self.opt_disc
            .as_mut()
            .expect("discriminator optimizer")
            .step(&mut discs.ps, &grads);
        Ok(())
    }

    /// Run `n` steps, recording losses every `log_every` steps (and the last).
    pub fn run(
        &mut self,
        data: &[Utterance],
        n: usize,
        log_every: usize,
    ) -> Result<Vec<CodecTrainRecord>, TrainError> {
        let mut log = Vec::new();
        for k in 0..n {
            let rec = self.step_once(data)?;
            if k % log_every.max(1) == 0 || k + 1 == n {
                log.push(rec);
            }
        }
        Ok(log)
    }
}

/// `[K + N, d]` condition sequence for the discriminators: style rows then
/// text embedding rows, detached.
fn cond_sequence(g: &mut Graph, style: &Tensor, text: &Tensor) -> NodeId {
    let s = g.constant(style.clone());
    let t = g.constant(text.clone());
    g.concat_rows(&[t, s])
}

fn text_embedding_value(codec: &ProsodyCodec, phonemes: &[u32]) -> Tensor {
    let table = codec.ps.get(codec.dec.text_table);
    let d = table.cols();
    let mut data = Vec::with_capacity(phonemes.len() * d);
    for &p in phonemes {
        data.extend_from_slice(table.row(p as usize));
    }
    Tensor::matrix(phonemes.len(), d, data)
}

fn stack_pitch_energy(track: &ProsodyTrack) -> Tensor {
    let t = track.frames();
    let mut data = Vec::with_capacity(t * 2);
    for f in 0..t {
        data.push(track.pitch[f]);
        data.push(track.energy[f]);
    }
    Tensor::matrix(t, 2, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_corpus, CorpusConfig};

    fn tiny_track(durations: &[u32], seed: u64) -> ProsodyTrack {
        let mut rng = Prng::seed(seed);
        let t: usize = durations.iter().map(|&d| d as usize).sum();
        ProsodyTrack::new(rng.gaussian_vec(t), rng.gaussian_vec(t), durations.to_vec()).unwrap()
    }

    #[test]
    fn encode_is_fixed_length_for_any_input_length() {
        let codec = ProsodyCodec::init(CodecConfig::tiny(), 70);
        let k = codec.cfg.style_len;
        for durs in [vec![1u32], vec![5, 5, 5, 5], vec![4; 25]] {
            let track = tiny_track(&durs, 71);
            let h = codec.encode_value(&track);
            assert_eq!(h.shape(), &[k, codec.cfg.d_model]);
        }
    }

    #[test]
    fn fully_masked_input_yields_finite_latent() {
        let codec = ProsodyCodec::init(CodecConfig::tiny(), 72);
        let track = tiny_track(&[3, 2, 4], 73);
        let masked = mask_prosody(&track, 0, 3).unwrap();
        let h = codec.encode_value(&masked);
        assert!(h.all_finite());
    }

    #[test]
    fn encode_deterministic() {
        let codec = ProsodyCodec::init(CodecConfig::tiny(), 74);
        let track = tiny_track(&[2, 3, 2], 75);
        assert_eq!(codec.encode_value(&track).data(), codec.encode_value(&track).data());
    }

    #[test]
    fn quantized_style_matches_dequantized_codes() {
        let codec = ProsodyCodec::init(CodecConfig::tiny(), 76);
        let track = tiny_track(&[3, 3, 3], 77);
        let style = codec.encode_style(&track);
        assert!(style.quantized);
        let rvq = codec.rvq.as_ref().unwrap();
        let again = rvq.dequantize(&codec.ps, style.codes.as_ref().unwrap());
        assert_eq!(style.h.data(), again.data());
    }

    #[test]
    fn decode_shapes_follow_contract() {
        let codec = ProsodyCodec::init(CodecConfig::tiny(), 78);
        let track = tiny_track(&[2, 4, 3, 2], 79);
        let phonemes = [1u32, 5, 9, 13];
        let style = codec.encode_style(&track);
        let dec = codec.decode_value(&style.h, &phonemes, DurationSource::Truth(&track.durations));
        assert_eq!(dec.durations_raw.len(), 4);
        assert_eq!(dec.pitch.len(), track.frames());
        assert_eq!(dec.energy.len(), track.frames());
        assert!(dec.durations_raw.iter().all(|&d| d >= 0.0), "softplus output");

        let pred = codec.decode_value(&style.h, &phonemes, DurationSource::Predicted);
        let total: usize = pred.durations.iter().map(|&d| d as usize).sum();
        assert_eq!(pred.pitch.len(), total);
        assert!(pred.durations.iter().all(|&d| d >= 1));
    }

    #[test]
    fn decode_deterministic() {
        let codec = ProsodyCodec::init(CodecConfig::tiny(), 80);
        let track = tiny_track(&[2, 2], 81);
        let style = codec.encode_style(&track);
        let a = codec.decode_value(&style.h, &[1, 2], DurationSource::Truth(&track.durations));
        let b = codec.decode_value(&style.h, &[1, 2], DurationSource::Truth(&track.durations));
        assert_eq!(a.pitch, b.pitch);
        assert_eq!(a.durations_raw, b.durations_raw);
    }

    #[test]
    fn loss_weights_applied() {
        let losses = ProsodyLosses { l_dur: 1.0, l_f0: 1.0, l_n: 1.0 };
        assert!((losses.combined() - 2.1).abs() < 1e-15);
    }

    #[test]
    fn perfect_prediction_gives_zero_losses() {
        // Feed the decoder's own output back as truth.
        let codec = ProsodyCodec::init(CodecConfig::tiny(), 82);
        let track = tiny_track(&[3, 2], 83);
        let style = codec.encode_style(&track);
        let dec = codec.decode_value(&style.h, &[0, 1], DurationSource::Truth(&track.durations));
        let fake_truth =
            ProsodyTrack::new(dec.pitch.clone(), dec.energy.clone(), track.durations.clone()).unwrap();
        let mut g = Graph::new();
        let bound = codec.ps.bind(&mut g);
        let style_node = g.constant(style.h.clone());
        let out = codec.decode(&mut g, &bound, style_node, &[0, 1], DurationSource::Truth(&track.durations));
        let nodes = prosody_loss_nodes(&mut g, &out, &fake_truth);
        assert!(g.value(nodes.l_f0).data()[0] < 1e-15);
        assert!(g.value(nodes.l_n).data()[0] < 1e-15);
    }

    #[test]
    fn constant_pitch_offset_moves_l_f0_by_offset() {
        let codec = ProsodyCodec::init(CodecConfig::tiny(), 84);
        let track = tiny_track(&[3, 2], 85);
        let style = codec.encode_style(&track);
        let dec = codec.decode_value(&style.h, &[0, 1], DurationSource::Truth(&track.durations));
        let shifted = ProsodyTrack::new(
            dec.pitch.iter().map(|&p| p + 0.75).collect(),
            dec.energy.clone(),
            track.durations.clone(),
        )
        .unwrap();
        let mut g = Graph::new();
        let bound = codec.ps.bind(&mut g);
        let style_node = g.constant(style.h.clone());
        let out = codec.decode(&mut g, &bound, style_node, &[0, 1], DurationSource::Truth(&track.durations));
        let nodes = prosody_loss_nodes(&mut g, &out, &shifted);
        assert!((g.value(nodes.l_f0).data()[0] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn edit_empty_span_is_identity() {
        let codec = ProsodyCodec::init(CodecConfig::tiny(), 86);
        let track = tiny_track(&[2, 3, 2], 87);
        let r = edit_prosody(&codec, &track, &[0, 1, 2], (1, 1)).unwrap();
        assert_eq!(r.spliced, track);
    }

    #[test]
    fn edit_preserves_unmasked_frames_bitwise() {
        let codec = ProsodyCodec::init(CodecConfig::tiny(), 88);
        let track = tiny_track(&[2, 3, 2, 4], 89);
        let r = edit_prosody(&codec, &track, &[0, 1, 2, 3], (1, 3)).unwrap();
        let ends = track.phoneme_ends();
        let s_ends = r.spliced.phoneme_ends();
        // Phoneme 0 (before span) and phoneme 3 (after span).
        assert_eq!(&r.spliced.pitch[..ends[0]], &track.pitch[..ends[0]]);
        assert_eq!(&r.spliced.pitch[s_ends[2]..], &track.pitch[ends[2]..]);
        assert_eq!(r.spliced.durations[0], track.durations[0]);
        assert_eq!(r.spliced.durations[3], track.durations[3]);
        r.spliced.validate().unwrap();
    }

    #[test]
    fn training_step_reduces_loss_on_tiny_corpus() {
        let corpus = gen_corpus(&CorpusConfig {
            num_speakers: 2,
            utts_per_speaker: 2,
            len_range: (3, 5),
            dur_range: (2, 4),
            ..CorpusConfig::default()
        })
        .unwrap();
        let mut cfg = CodecConfig::tiny();
        cfg.d_model = 16;
        cfg.num_heads = 2;
        cfg.ff_dim = 32;
        cfg.enc_blocks = 1;
        cfg.dec_blocks = 1;
        cfg.style_len = 4;
        cfg.rvq = Some(RvqConfig { num_stages: 4, codes_per_book: 32, code_dim: 4 });
        let codec = ProsodyCodec::init(cfg, 90);
        let tcfg = CodecTrainConfig {
            batch: 4,
            adversarial: false,
            optimizer: AdamWConfig { lr: 1e-3, ..AdamWConfig::default() },
            ..CodecTrainConfig::default()
        };
        let mut training = CodecTraining::new(codec, tcfg, 91);
        let first = training.step_once(&corpus.utterances).unwrap();
        for _ in 0..120 {
            training.step_once(&corpus.utterances).unwrap();
        }
        let last = training.step_once(&corpus.utterances).unwrap();
        assert!(
            last.total < first.total,
            "loss did not decrease: {} -> {}",
            first.total,
            last.total
        );
    }

    #[test]
    fn variable_length_mode_keeps_frame_resolution() {
        let mut cfg = CodecConfig::tiny();
        cfg.fixed_length = false;
        let codec = ProsodyCodec::init(cfg, 92);
        let track = tiny_track(&[2, 3], 93);
        let h = codec.encode_value(&track);
        assert_eq!(h.shape(), &[track.frames(), codec.cfg.d_model]);
    }
}
