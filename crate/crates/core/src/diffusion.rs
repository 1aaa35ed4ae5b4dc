//! Conditional diffusion over the time-varying style latent.
//!
//! Angular schedule (`alpha = cos`, `sigma = sin` of `pi/2 * tau`), a
//! velocity-predicting conformer denoiser conditioned on text and a prosody
//! prompt, classifier-free guidance, and a deterministic DDIM sampler that
//! reconstructs the clean estimate and re-noises it level by level.

use crate::codec::ProsodyCodec;
use crate::math;
use crate::nn::{sinusoidal_embed, sinusoidal_positions, ConformerConfig, ConformerStack, Linear};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{Bound, PId, ParamSet};
use crate::rng::Prng;
use crate::tape::{Graph, NodeId};
use crate::tensor::Tensor;
use crate::track::ProsodyTrack;
use alloc::vec;
use alloc::vec::Vec;

/// Scaling applied to scalar slot values (noise level or normalized guidance)
/// before the sinusoidal embedding, lifting [0, 1] onto a range the
/// embedding's frequency bank resolves well.
pub const SLOT_EMBED_SCALE: f64 = 100.0;

// ── Schedule ────────────────────────────────────────────────────────────

/// `(alpha, sigma)` of the angular schedule at `tau` in [0, 1].
pub fn schedule(tau: f64) -> (f64, f64) {
    assert!((0.0..=1.0).contains(&tau), "tau {tau} outside [0, 1]");
    let phi = 0.5 * math::PI * tau;
    (math::cos(phi), math::sin(phi))
}

/// Uniform step grid `tau_n = n / steps` with the angular schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub steps: usize,
}

impl NoiseSchedule {
    pub fn new(steps: usize) -> Self {
        assert!(steps >= 1, "schedule needs at least one step");
        NoiseSchedule { steps }
    }

    pub fn tau(&self, n: usize) -> f64 {
        assert!(n <= self.steps, "step {n} beyond grid {}", self.steps);
        n as f64 / self.steps as f64
    }

    pub fn at(&self, n: usize) -> (f64, f64) {
        schedule(self.tau(n))
    }
}

/// `alpha * x0 + sigma * noise`.
pub fn add_noise(x0: &Tensor, noise: &Tensor, tau: f64) -> Tensor {
    assert_eq!(x0.shape(), noise.shape(), "add_noise shape mismatch");
    let (a, s) = schedule(tau);
    x0.scale(a).axpy(s, noise)
}

/// Velocity target `alpha * noise - sigma * x0`.
pub fn velocity_target(x0: &Tensor, noise: &Tensor, tau: f64) -> Tensor {
    assert_eq!(x0.shape(), noise.shape(), "velocity_target shape mismatch");
    let (a, s) = schedule(tau);
    noise.scale(a).axpy(-s, x0)
}

/// Clean-data estimate from a velocity prediction: `alpha * h - sigma * v`.
pub fn x0_from_velocity(h: &Tensor, v: &Tensor, tau: f64) -> Tensor {
    let (a, s) = schedule(tau);
    h.scale(a).axpy(-s, v)
}

/// Noise estimate from a velocity prediction: `sigma * h + alpha * v`.
pub fn noise_from_velocity(h: &Tensor, v: &Tensor, tau: f64) -> Tensor {
    let (a, s) = schedule(tau);
    h.scale(s).axpy(a, v)
}

/// Score estimate `(alpha * x0_hat - h) / sigma`; requires `sigma > 0`.
pub fn score_from_denoiser(h: &Tensor, tau: f64, x0_hat: &Tensor) -> Tensor {
    let (a, s) = schedule(tau);
    assert!(s > 0.0, "score undefined at sigma = 0");
    x0_hat.scale(a).axpy(-1.0, h).scale(1.0 / s)
}

/// One deterministic DDIM update from grid level `n` to `n - 1`:
/// reconstruct `x0` and the noise direction, then re-noise at the lower
/// level.
pub fn ddim_step(h: &Tensor, v_hat: &Tensor, n: usize, grid: &NoiseSchedule) -> Tensor {
    assert!(n >= 1 && n <= grid.steps, "step {n} outside [1, {}]", grid.steps);
    let tau_n = grid.tau(n);
    let tau_prev = grid.tau(n - 1);
    let x0 = x0_from_velocity(h, v_hat, tau_n);
    let noise = noise_from_velocity(h, v_hat, tau_n);
    let (ap, sp) = schedule(tau_prev);
    x0.scale(ap).axpy(sp, &noise)
}

// ── Latent standardization ──────────────────────────────────────────────

/// Per-dimension mean/std of the training latents. For fixed-length latents
/// the stats match the latent shape; single-row stats broadcast over rows
/// (the variable-length case, per channel).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentStats {
    pub mean: Tensor,
    pub std: Tensor,
}

impl LatentStats {
    /// Compute stats over a set of latents. With equal shapes the stats are
    /// per entry; with varying row counts they pool rows per channel.
    pub fn fit(latents: &[Tensor]) -> Self {
        assert!(!latents.is_empty(), "no latents");
        let cols = latents[0].cols();
        let same_shape = latents.iter().all(|l| l.shape() == latents[0].shape());
        if same_shape {
            let shape = latents[0].shape().to_vec();
            let n = latents.len() as f64;
            let len = latents[0].len();
            let mut mean = vec![0.0; len];
            for l in latents {
                for (m, &x) in mean.iter_mut().zip(l.data()) {
                    *m += x / n;
                }
            }
            let mut var = vec![0.0; len];
            for l in latents {
                for (v, (&x, &m)) in var.iter_mut().zip(l.data().iter().zip(&mean)) {
                    *v += (x - m) * (x - m) / n;
                }
            }
            let std = var.iter().map(|&v| math::sqrt(v).max(1e-6)).collect();
            LatentStats { mean: Tensor::new(shape.clone(), mean), std: Tensor::new(shape, std) }
        } else {
            let mut mean = vec![0.0; cols];
            let mut count = 0.0;
            for l in latents {
                assert_eq!(l.cols(), cols, "channel mismatch");
                for r in 0..l.rows() {
                    for (m, &x) in mean.iter_mut().zip(l.row(r)) {
                        *m += x;
                    }
                    count += 1.0;
                }
            }
            for m in &mut mean {
                *m /= count;
            }
            let mut var = vec![0.0; cols];
            for l in latents {
                for r in 0..l.rows() {
                    for (v, (&x, &m)) in var.iter_mut().zip(l.row(r).iter().zip(&mean)) {
                        *v += (x - m) * (x - m) / count;
                    }
                }
            }
            let std = var.iter().map(|&v| math::sqrt(v).max(1e-6)).collect();
            LatentStats { mean: Tensor::matrix(1, cols, mean), std: Tensor::matrix(1, cols, std) }
        }
    }

    fn broadcast(&self, rows: usize) -> (Tensor, Tensor) {
        if self.mean.rows() == rows {
            (self.mean.clone(), self.std.clone())
        } else {
            assert_eq!(self.mean.rows(), 1, "stats neither matching nor broadcastable");
            let cols = self.mean.cols();
            let mut m = Vec::with_capacity(rows * cols);
            let mut s = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                m.extend_from_slice(self.mean.row(0));
                s.extend_from_slice(self.std.row(0));
            }
            (Tensor::matrix(rows, cols, m), Tensor::matrix(rows, cols, s))
        }
    }

    pub fn standardize(&self, h: &Tensor) -> Tensor {
        let (m, s) = self.broadcast(h.rows());
        let data = h
            .data()
            .iter()
            .zip(m.data().iter().zip(s.data()))
            .map(|(&x, (&mu, &sd))| (x - mu) / sd)
            .collect();
        Tensor::new(h.shape().to_vec(), data)
    }

    pub fn destandardize(&self, h: &Tensor) -> Tensor {
        let (m, s) = self.broadcast(h.rows());
        let data = h
            .data()
            .iter()
            .zip(m.data().iter().zip(s.data()))
            .map(|(&x, (&mu, &sd))| x * sd + mu)
            .collect();
        Tensor::new(h.shape().to_vec(), data)
    }

    /// Graph version of `destandardize`, keeping gradients flowing into `h`.
    pub fn destandardize_node(&self, g: &mut Graph, h: NodeId) -> NodeId {
        let rows = g.value(h).rows();
        let (m, s) = self.broadcast(rows);
        let sn = g.constant(s);
        let mn = g.constant(m);
        let scaled = g.mul(h, sn);
        g.add(scaled, mn)
    }
}

// ── Denoiser ────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiffusionConfig {
    pub d_model: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub kernel_wide: usize,
    pub kernel_narrow: usize,
    pub blocks_wide: usize,
    pub blocks_narrow: usize,
    pub vocab: usize,
    /// Latent rows the sampler produces (the codec's style length).
    pub style_len: usize,
    /// DDIM grid size L.
    pub steps: usize,
    /// Inference guidance scale.
    pub guidance: f64,
    /// Joint condition dropout rate during training.
    pub cond_dropout: f64,
}

impl DiffusionConfig {
    pub fn conformer(&self) -> ConformerConfig {
        ConformerConfig {
            d_model: self.d_model,
            num_heads: self.num_heads,
            head_dim: self.d_model / self.num_heads,
            conv_kernel: self.kernel_narrow,
            ff_dim: self.ff_dim,
        }
    }

    pub fn desk_default() -> Self {
        DiffusionConfig {
            d_model: 64,
            num_heads: 4,
            ff_dim: 128,
            kernel_wide: 15,
            kernel_narrow: 15,
            blocks_wide: 1,
            blocks_narrow: 3,
            vocab: crate::corpus::VOCAB_SIZE,
            style_len: 16,
            steps: 100,
            guidance: 5.0,
            cond_dropout: 0.1,
        }
    }

    pub fn tiny() -> Self {
        DiffusionConfig {
            d_model: 32,
            num_heads: 2,
            ff_dim: 64,
            kernel_wide: 7,
            kernel_narrow: 5,
            blocks_wide: 1,
            blocks_narrow: 2,
            vocab: crate::corpus::VOCAB_SIZE,
            style_len: 8,
            steps: 100,
            guidance: 5.0,
            cond_dropout: 0.1,
        }
    }
}

/// Conditioning pair: full phoneme sequence and the prosody prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct CondData {
    pub text: Vec<u32>,
    pub prompt: ProsodyTrack,
}

/// Velocity-predicting denoiser. The input sequence is
/// `[projected prompt; text embeddings; noisy latent]` with a scalar-slot
/// sinusoidal embedding added to every position; the output keeps the last
/// (latent) rows. Null conditions substitute learned single-row embeddings.
#[derive(Clone)]
pub struct Denoiser {
    pub cfg: DiffusionConfig,
    pub ps: ParamSet,
    prompt_proj: Linear,
    text_table: PId,
    null_prompt: PId,
    null_text: PId,
    blocks: ConformerStack,
}

/// Prompt track rendered as `[duration-PE | pitch | energy | indicator]`
/// frames, the same stacking the prosody encoder consumes. Positional rows
/// are sinusoidal here: the denoiser owns no learnable positional table.
pub fn prompt_features(track: &ProsodyTrack, d_model: usize) -> Tensor {
    let t = track.frames();
    let pe = sinusoidal_positions(track.num_phonemes(), d_model);
    let width = d_model + 3;
    let mut data = Vec::with_capacity(t * width);
    let mut frame = 0usize;
    for (i, &dur) in track.durations.iter().enumerate() {
        for _ in 0..dur {
            data.extend_from_slice(pe.row(i));
            data.push(track.pitch[frame]);
            data.push(track.energy[frame]);
            data.push(0.0);
            frame += 1;
        }
    }
    Tensor::matrix(t, width, data)
}

impl Denoiser {
    pub fn init(cfg: DiffusionConfig, seed: u64) -> Self {
        let mut ps = ParamSet::new();
        let mut rng = Prng::derive(seed, 0xD1FF, 0);
        let conf = cfg.conformer();
        conf.validate();
        let prompt_proj =
            Linear::init(&mut ps, "den.prompt_proj", cfg.d_model + 3, cfg.d_model, true, &mut rng);
        let text_table = ps.add(
            "den.text_table",
            crate::nn::table_init(&mut rng, cfg.vocab, cfg.d_model, 0.1),
        );
        let null_prompt =
            ps.add("den.null_prompt", crate::nn::table_init(&mut rng, 1, cfg.d_model, 0.1));
        let null_text = ps.add("den.null_text", crate::nn::table_init(&mut rng, 1, cfg.d_model, 0.1));
        let kernels: Vec<usize> = (0..cfg.blocks_wide)
            .map(|_| cfg.kernel_wide)
            .chain((0..cfg.blocks_narrow).map(|_| cfg.kernel_narrow))
            .collect();
        let blocks = ConformerStack::init(&mut ps, "den", &conf, &kernels, &mut rng);
        Denoiser { cfg, ps, prompt_proj, text_table, null_prompt, null_text, blocks }
    }

    /// Graph forward. `slots` are scalar conditioning values (noise level,
    /// normalized guidance); their sinusoidal embeddings are summed and added
    /// to every sequence position.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &Bound,
        noisy: NodeId,
        slots: &[f64],
        cond: Option<&CondData>,
    ) -> NodeId {
        let rows = g.value(noisy).rows();
        let d = self.cfg.d_model;

        let (prompt_part, text_part) = match cond {
            Some(c) => {
                assert!(!c.text.is_empty(), "empty text condition");
                let feats = g.constant(prompt_features(&c.prompt, d));
                let p = self.prompt_proj.forward(g, bound, feats);
                let ids: Vec<usize> = c.text.iter().map(|&x| x as usize).collect();
                let t = g.embedding(bound.node(self.text_table), &ids);
                (p, t)
            }
            None => {
                let p = g.embedding(bound.node(self.null_prompt), &[0]);
                let t = g.embedding(bound.node(self.null_text), &[0]);
                (p, t)
            }
        };

        let seq = g.concat_rows(&[prompt_part, text_part, noisy]);
        let mut slot_embed = vec![0.0; d];
        for &s in slots {
            for (acc, v) in slot_embed.iter_mut().zip(sinusoidal_embed(s * SLOT_EMBED_SCALE, d)) {
                *acc += v;
            }
        }
        let slot_node = g.constant(Tensor::vector(slot_embed));
        let seq = g.add_row(seq, slot_node);

        let y = self.blocks.forward(g, bound, seq, None);
        let total = g.value(y).rows();
        g.slice_rows(y, total - rows, rows)
    }

    /// Value-level forward without gradient bookkeeping.
    pub fn velocity_value(&self, noisy: &Tensor, slots: &[f64], cond: Option<&CondData>) -> Tensor {
        let mut g = Graph::new();
        let bound = self.ps.bind(&mut g);
        let n = g.constant(noisy.clone());
        let v = self.forward(&mut g, &bound, n, slots, cond);
        g.value(v).clone()
    }
}

/// Classifier-free guided velocity:
/// `v_uncond + omega * (v_cond - v_uncond)`, both passes through the same
/// parameters.
pub fn cfg_velocity(
    den: &Denoiser,
    noisy: &Tensor,
    sigma_slot: f64,
    cond: &CondData,
    omega: f64,
) -> Tensor {
    assert!(omega >= 0.0, "guidance scale must be >= 0");
    let v_c = den.velocity_value(noisy, &[sigma_slot], Some(cond));
    let v_u = den.velocity_value(noisy, &[sigma_slot], None);
    let diff = v_c.sub(&v_u);
    v_u.axpy(omega, &diff)
}

/// Deterministic DDIM sampling from pure noise, with classifier-free
/// guidance, then de-standardization when stats are given.
pub fn sample(
    den: &Denoiser,
    noise_init: &Tensor,
    cond: &CondData,
    omega: f64,
    steps: usize,
    stats: Option<&LatentStats>,
) -> Tensor {
    let grid = NoiseSchedule::new(steps);
    let mut h = noise_init.clone();
    for n in (1..=steps).rev() {
        let (_, sigma_n) = grid.at(n);
        let v = cfg_velocity(den, &h, sigma_n, cond, omega);
        h = ddim_step(&h, &v, n, &grid);
    }
    match stats {
        Some(s) => s.destandardize(&h),
        None => h,
    }
}

// ── Latent dataset and training ─────────────────────────────────────────

/// Standardized latents with their conditioning, plus the stats to undo the
/// standardization after sampling.
pub struct LatentDataset {
    pub latents: Vec<Tensor>,
    pub conds: Vec<CondData>,
    pub stats: LatentStats,
}

/// Encode every utterance with the trained codec (quantized when the codec
/// carries a quantizer: the diffusion target is the post-bottleneck latent)
/// and standardize per dimension.
pub fn build_latent_dataset(codec: &ProsodyCodec, data: &[crate::corpus::Utterance]) -> LatentDataset {
    assert!(!data.is_empty(), "empty corpus");
    let raw: Vec<Tensor> = data.iter().map(|u| codec.encode_style(&u.track).h).collect();
    let stats = LatentStats::fit(&raw);
    let latents = raw.iter().map(|h| stats.standardize(h)).collect();
    let conds = data
        .iter()
        .map(|u| CondData { text: u.phonemes.clone(), prompt: u.prompt.clone() })
        .collect();
    LatentDataset { latents, conds, stats }
}

#[derive(Clone, Copy, Debug)]
pub struct DiffusionTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub optimizer: AdamWConfig,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        DiffusionTrainConfig { steps: 3000, batch: 8, optimizer: AdamWConfig::default() }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DiffusionTrainRecord {
    pub step: usize,
    pub loss: f64,
}

pub struct DiffusionTraining {
    pub den: Denoiser,
    pub opt: AdamW,
    pub rng: Prng,
    pub step: usize,
    pub cfg: DiffusionTrainConfig,
}

impl DiffusionTraining {
    pub fn new(den: Denoiser, cfg: DiffusionTrainConfig, seed: u64) -> Self {
        let opt = AdamW::new(cfg.optimizer, &den.ps);
        DiffusionTraining { den, opt, rng: Prng::derive(seed, 0xD1F2, 0), step: 0, cfg }
    }

    /// One step of L1 velocity matching: `tau ~ U[0,1]`, gaussian noise,
    /// conditions jointly dropped at the configured rate.
    pub fn step_once(&mut self, data: &LatentDataset) -> Result<DiffusionTrainRecord, crate::codec::TrainError> {
        assert!(!data.latents.is_empty(), "empty latent dataset");
        let b = self.cfg.batch;
        let mut g = Graph::new();
        let bound = self.den.ps.bind(&mut g);
        let inv_b = 1.0 / b as f64;
        let mut total: Option<NodeId> = None;

        for _ in 0..b {
            let i = self.rng.below(data.latents.len());
            let x0 = &data.latents[i];
            let tau = self.rng.uniform();
            let noise = Tensor::new(x0.shape().to_vec(), self.rng.gaussian_vec(x0.len()));
            let noisy = add_noise(x0, &noise, tau);
            let target = velocity_target(x0, &noise, tau);
            let dropped = self.rng.uniform() < self.den.cfg.cond_dropout;
            let cond = if dropped { None } else { Some(&data.conds[i]) };

            let (_, sigma) = schedule(tau);
            let noisy_node = g.constant(noisy);
            let v = self.den.forward(&mut g, &bound, noisy_node, &[sigma], cond);
            let target_node = g.constant(target);
            let l = g.l1_loss(v, target_node);
            let scaled = g.scale(l, inv_b);
            total = Some(match total {
                Some(t) => g.add(t, scaled),
                None => scaled,
            });
        }
        let total = total.expect("non-empty batch");
        let loss = g.value(total).data()[0];
        if !loss.is_finite() {
            return Err(crate::codec::TrainError::NonFiniteLoss { step: self.step });
        }
        g.backward(total);
        let grads = bound.grads(&g);
        self.opt.step(&mut self.den.ps, &grads);
        self.step += 1;
        Ok(DiffusionTrainRecord { step: self.step, loss })
    }

    pub fn run(
        &mut self,
        data: &LatentDataset,
        n: usize,
        log_every: usize,
    ) -> Result<Vec<DiffusionTrainRecord>, crate::codec::TrainError> {
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints_and_midpoint() {
        assert_eq!(schedule(0.0), (1.0, 0.0));
        let (a1, s1) = schedule(1.0);
        assert!(a1.abs() < 1e-16);
        assert_eq!(s1, 1.0);
        let (am, sm) = schedule(0.5);
        let r = math::sqrt(2.0) / 2.0;
        assert!((am - r).abs() < 1e-15 && (sm - r).abs() < 1e-15);
    }

    #[test]
    #[should_panic(expected = "outside")]
    fn schedule_rejects_out_of_range() {
        schedule(1.5);
    }

    #[test]
    fn schedule_identity_on_dense_grid() {
        let mut worst = 0.0f64;
        for i in 0..=10_000 {
            let tau = i as f64 / 10_000.0;
            let (a, s) = schedule(tau);
            worst = worst.max((a * a + s * s - 1.0).abs());
        }
        assert!(worst < 1e-12, "max |alpha^2+sigma^2-1| = {worst}");
    }

    #[test]
    fn add_noise_endpoints() {
        let mut rng = Prng::seed(120);
        let x0 = Tensor::matrix(2, 3, rng.gaussian_vec(6));
        let xi = Tensor::matrix(2, 3, rng.gaussian_vec(6));
        assert_eq!(add_noise(&x0, &xi, 0.0).data(), x0.data());
        let at1 = add_noise(&x0, &xi, 1.0);
        for (a, b) in at1.data().iter().zip(xi.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn noisy_norm_expectation_monte_carlo() {
        // E||a x0 + s xi||^2 = a^2 ||x0||^2 + s^2 dim for unit gaussian xi.
        let mut rng = Prng::seed(121);
        let dim = 16;
        let x0 = Tensor::vector(rng.gaussian_vec(dim));
        let tau = 0.37;
        let (a, s) = schedule(tau);
        let x0n: f64 = x0.data().iter().map(|v| v * v).sum();
        let expect = a * a * x0n + s * s * dim as f64;
        let draws = 10_000;
        let mut acc = 0.0;
        for _ in 0..draws {
            let xi = Tensor::vector(rng.gaussian_vec(dim));
            let y = add_noise(&x0, &xi, tau);
            acc += y.data().iter().map(|v| v * v).sum::<f64>();
        }
        let got = acc / draws as f64;
        assert!((got - expect).abs() / expect < 0.02, "{got} vs {expect}");
    }

    #[test]
    fn velocity_endpoints_and_recovery() {
        let mut rng = Prng::seed(122);
        let x0 = Tensor::vector(rng.gaussian_vec(8));
        let xi = Tensor::vector(rng.gaussian_vec(8));
        let v0 = velocity_target(&x0, &xi, 0.0);
        assert_eq!(v0.data(), xi.data());
        let v1 = velocity_target(&x0, &xi, 1.0);
        for (a, b) in v1.data().iter().zip(x0.data()) {
            assert!((a + b).abs() < 1e-15);
        }
        // x0 = alpha h - sigma v for consistent (h, v).
        let tau = 0.61;
        let h = add_noise(&x0, &xi, tau);
        let v = velocity_target(&x0, &xi, tau);
        let rec = x0_from_velocity(&h, &v, tau);
        for (a, b) in rec.data().iter().zip(x0.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn score_reference_points() {
        let mut rng = Prng::seed(123);
        let h = Tensor::vector(rng.gaussian_vec(6));
        let tau = 0.4;
        let (a, s) = schedule(tau);
        // x0_hat = h / alpha zeroes the numerator.
        let x0_hat = h.scale(1.0 / a);
        let sc = score_from_denoiser(&h, tau, &x0_hat);
        for &v in sc.data() {
            assert!(v.abs() < 1e-12);
        }
        // Point-mass data: score = (alpha x* - h) / sigma by substitution.
        let xstar = Tensor::vector(rng.gaussian_vec(6));
        let sc = score_from_denoiser(&h, tau, &xstar);
        for i in 0..6 {
            let expect = (a * xstar.data()[i] - h.data()[i]) / s;
            assert!((sc.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    #[should_panic(expected = "sigma = 0")]
    fn score_rejects_zero_sigma() {
        let h = Tensor::vector(vec![1.0]);
        score_from_denoiser(&h, 0.0, &h);
    }

    #[test]
    fn ddim_exact_velocity_lands_on_analytic_path() {
        let mut rng = Prng::seed(124);
        let grid = NoiseSchedule::new(100);
        let x0 = Tensor::vector(rng.gaussian_vec(10));
        let xi = Tensor::vector(rng.gaussian_vec(10));
        for n in [100usize, 73, 10, 1] {
            let tau = grid.tau(n);
            let h = add_noise(&x0, &xi, tau);
            let v = velocity_target(&x0, &xi, tau);
            let next = ddim_step(&h, &v, n, &grid);
            let expect = add_noise(&x0, &xi, grid.tau(n - 1));
            for (a, b) in next.data().iter().zip(expect.data()) {
                assert!((a - b).abs() < 1e-12, "step {n}");
            }
        }
    }

    #[test]
    fn ddim_final_step_returns_x0_estimate() {
        let mut rng = Prng::seed(125);
        let grid = NoiseSchedule::new(50);
        let h = Tensor::vector(rng.gaussian_vec(4));
        let v = Tensor::vector(rng.gaussian_vec(4));
        let out = ddim_step(&h, &v, 1, &grid);
        let x0 = x0_from_velocity(&h, &v, grid.tau(1));
        assert_eq!(out.data(), x0.data());
    }

    #[test]
    fn latent_stats_standardize_roundtrip() {
        let mut rng = Prng::seed(126);
        let latents: Vec<Tensor> = (0..20)
            .map(|_| {
                Tensor::matrix(3, 4, (0..12).map(|_| 2.0 + 3.0 * rng.gaussian()).collect())
            })
            .collect();
        let stats = LatentStats::fit(&latents);
        let z = stats.standardize(&latents[0]);
        let back = stats.destandardize(&z);
        for (a, b) in back.data().iter().zip(latents[0].data()) {
            assert!((a - b).abs() < 1e-10);
        }
        // Standardized set has near-zero mean and unit std per dimension.
        let zs: Vec<Tensor> = latents.iter().map(|l| stats.standardize(l)).collect();
        let refit = LatentStats::fit(&zs);
        for &m in refit.mean.data() {
            assert!(m.abs() < 1e-9);
        }
        for &s in refit.std.data() {
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    fn tiny_denoiser(seed: u64) -> Denoiser {
        let mut cfg = DiffusionConfig::tiny();
        cfg.d_model = 16;
        cfg.num_heads = 2;
        cfg.ff_dim = 24;
        cfg.blocks_wide = 1;
        cfg.blocks_narrow = 1;
        cfg.style_len = 4;
        Denoiser::init(cfg, seed)
    }

    fn tiny_cond(seed: u64) -> CondData {
        let mut rng = Prng::seed(seed);
        let prompt =
            ProsodyTrack::new(rng.gaussian_vec(5), rng.gaussian_vec(5), vec![2, 3]).unwrap();
        CondData { text: vec![1, 4, 7], prompt }
    }

    #[test]
    fn denoiser_output_shape_and_determinism() {
        let den = tiny_denoiser(127);
        let mut rng = Prng::seed(128);
        let noisy = Tensor::matrix(4, 16, rng.gaussian_vec(64));
        let cond = tiny_cond(129);
        let a = den.velocity_value(&noisy, &[0.3], Some(&cond));
        let b = den.velocity_value(&noisy, &[0.3], Some(&cond));
        assert_eq!(a.shape(), &[4, 16]);
        assert_eq!(a.data(), b.data());
        let u = den.velocity_value(&noisy, &[0.3], None);
        assert_eq!(u.shape(), &[4, 16]);
    }

    #[test]
    fn cfg_collapses_at_omega_one_and_zero() {
        let den = tiny_denoiser(130);
        let mut rng = Prng::seed(131);
        let noisy = Tensor::matrix(4, 16, rng.gaussian_vec(64));
        let cond = tiny_cond(132);
        let v_c = den.velocity_value(&noisy, &[0.5], Some(&cond));
        let v_u = den.velocity_value(&noisy, &[0.5], None);
        let guided1 = cfg_velocity(&den, &noisy, 0.5, &cond, 1.0);
        for (a, b) in guided1.data().iter().zip(v_c.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let guided0 = cfg_velocity(&den, &noisy, 0.5, &cond, 0.0);
        assert_eq!(guided0.data(), v_u.data());
    }

    #[test]
    fn denoiser_grad_check_reduced_width() {
        let mut cfg = DiffusionConfig::tiny();
        cfg.d_model = 6;
        cfg.num_heads = 2;
        cfg.ff_dim = 8;
        cfg.kernel_wide = 3;
        cfg.kernel_narrow = 3;
        cfg.blocks_wide = 1;
        cfg.blocks_narrow = 0;
        cfg.style_len = 2;
        let mut den = Denoiser::init(cfg, 133);
        let mut rng = Prng::seed(134);
        let noisy = Tensor::matrix(2, 6, rng.gaussian_vec(12));
        let target = Tensor::matrix(2, 6, rng.gaussian_vec(12));
        let cond = tiny_cond(135);
        let mut ps = core::mem::take(&mut den.ps);
        let report = crate::gradcheck::grad_check(&mut ps, 1e-4, |g, bound| {
            let n = g.constant(noisy.clone());
            let v = den.forward(g, bound, n, &[0.4], Some(&cond));
            let t = g.constant(target.clone());
            g.l1_loss(v, t)
        });
        assert!(report.pass(), "max rel err {} at {}", report.max_rel_err, report.worst_param);
    }

    #[test]
    fn sampling_is_deterministic_and_supports_single_step() {
        let den = tiny_denoiser(136);
        let cond = tiny_cond(137);
        let mut rng = Prng::seed(138);
        let init = Tensor::matrix(4, 16, rng.gaussian_vec(64));
        let a = sample(&den, &init, &cond, 2.0, 5, None);
        let b = sample(&den, &init, &cond, 2.0, 5, None);
        assert_eq!(a.data(), b.data());
        let one = sample(&den, &init, &cond, 2.0, 1, None);
        assert_eq!(one.shape(), &[4, 16]);
    }
}
