//! One-step distillation of the guided diffusion sampler.
//!
//! The primary route is simulation-based: run the teacher's full DDIM sampler
//! with classifier-free guidance to build (noise, condition, guidance) ->
//! latent pairs, then train a student to map noise to the teacher's sample in
//! a single forward pass, with the loss measured through the frozen prosody
//! decoder's outputs. Consistency distillation and adversarial distillation
//! are carried as baselines.

use crate::adversarial::{
    lsgan_discriminator_loss, lsgan_generator_loss, DiscriminatorNet,
};
use crate::codec::{DecodedProsody, DurationSource, ProsodyCodec, TrainError, LAMBDA_F0, LAMBDA_N};
use crate::diffusion::{
    add_noise, cfg_velocity, ddim_step, prompt_features, sample, schedule, x0_from_velocity,
    CondData, Denoiser, DiffusionConfig, LatentStats, NoiseSchedule,
};
use crate::nn::{ConformerConfig, Linear};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{Bound, ParamSet, PId};
use crate::rng::Prng;
use crate::tape::{Graph, NodeId};
use crate::tensor::Tensor;
use alloc::vec::Vec;

/// Guidance scales are normalized by this before entering the scalar slot.
pub const OMEGA_NORM: f64 = 15.0;
/// Guidance range distillation draws from.
pub const OMEGA_RANGE: (f64, f64) = (1.0, 15.0);

// ── Student ─────────────────────────────────────────────────────────────

/// Same architecture as the teacher denoiser; the scalar slot carries the
/// normalized guidance scale (and, for the noise-conditioned baselines, the
/// noise level as a second slot value summed into the same pathway).
#[derive(Clone)]
pub struct Student {
    pub net: Denoiser,
}

impl Student {
    pub fn init(cfg: DiffusionConfig, seed: u64) -> Self {
        Student { net: Denoiser::init(cfg, seed) }
    }

    /// Initialize from the teacher's weights (baseline initialization).
    pub fn from_teacher(teacher: &Denoiser) -> Self {
        Student { net: teacher.clone() }
    }

    /// One-step map: noise -> latent estimate (standardized space).
    pub fn one_step_value(&self, noise: &Tensor, omega: f64, cond: Option<&CondData>) -> Tensor {
        self.net.velocity_value(noise, &[omega / OMEGA_NORM], cond)
    }

    pub fn one_step_graph(
        &self,
        g: &mut Graph,
        bound: &Bound,
        noise: NodeId,
        omega: f64,
        cond: Option<&CondData>,
    ) -> NodeId {
        self.net.forward(g, bound, noise, &[omega / OMEGA_NORM], cond)
    }

    /// Consistency-parameterized estimate
    /// `f(h, tau) = alpha(tau)^2 * h + sigma(tau) * Net(h; sigma, omega)`,
    /// which is the identity at `tau = 0` by construction.
    pub fn consistency_value(&self, h: &Tensor, tau: f64, omega: f64, cond: Option<&CondData>) -> Tensor {
        let (a, s) = schedule(tau);
        let raw = self.net.velocity_value(h, &[s, omega / OMEGA_NORM], cond);
        h.scale(a * a).axpy(s, &raw)
    }

    fn consistency_graph(
        &self,
        g: &mut Graph,
        bound: &Bound,
        h: NodeId,
        tau: f64,
        omega: f64,
        cond: Option<&CondData>,
    ) -> NodeId {
        let (a, s) = schedule(tau);
        let raw = self.net.forward(g, bound, h, &[s, omega / OMEGA_NORM], cond);
        let skip = g.scale(h, a * a);
        let out = g.scale(raw, s);
        g.add(skip, out)
    }

    /// Multi-step sampler over the consistency parameterization: denoise to a
    /// clean estimate, re-noise to the next lower level.
    pub fn sample_n_steps(
        &self,
        noise: &Tensor,
        omega: f64,
        cond: Option<&CondData>,
        steps: usize,
    ) -> Tensor {
        assert!(steps >= 1);
        let grid = NoiseSchedule::new(steps);
        let mut h = noise.clone();
        for n in (1..=steps).rev() {
            let tau = grid.tau(n);
            let x0 = self.consistency_value(&h, tau, omega, cond);
            if n == 1 {
                return x0;
            }
            let (a, s) = schedule(tau);
            // Implied noise at this level, re-used at the next one.
            let noise_est = h.axpy(-a, &x0).scale(1.0 / s);
            let (ap, sp) = schedule(grid.tau(n - 1));
            h = x0.scale(ap).axpy(sp, &noise_est);
        }
        unreachable!("loop returns at n = 1")
    }
}

// ── Student pre-training ────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub optimizer: AdamWConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { steps: 1000, batch: 8, optimizer: AdamWConfig::default() }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PretrainRecord {
    pub step: usize,
    pub loss: f64,
}

/// Pre-train the student to regress the ground-truth standardized latent from
/// (text, prompt) alone: zero noise input, zero scalar slot.
pub fn pretrain_student(
    student: &mut Student,
    latents: &[Tensor],
    conds: &[CondData],
    cfg: PretrainConfig,
    seed: u64,
) -> Result<Vec<PretrainRecord>, TrainError> {
    assert_eq!(latents.len(), conds.len());
    if latents.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut opt = AdamW::new(cfg.optimizer, &student.net.ps);
    let mut rng = Prng::derive(seed, 0x9E7A, 0);
    let mut log = Vec::new();
    for step in 0..cfg.steps {
        let mut g = Graph::new();
        let bound = student.net.ps.bind(&mut g);
        let inv_b = 1.0 / cfg.batch as f64;
        let mut total: Option<NodeId> = None;
        for _ in 0..cfg.batch {
            let i = rng.below(latents.len());
            let zeros = g.constant(Tensor::zeros(latents[i].shape()));
            let out = student.net.forward(&mut g, &bound, zeros, &[0.0], Some(&conds[i]));
            let target = g.constant(latents[i].clone());
            let l = g.l1_loss(out, target);
            let scaled = g.scale(l, inv_b);
            total = Some(match total {
                Some(t) => g.add(t, scaled),
                None => scaled,
            });
        }
        let total = total.expect("non-empty batch");
        let loss = g.value(total).data()[0];
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { step });
        }
        g.backward(total);
        let grads = bound.grads(&g);
        opt.step(&mut student.net.ps, &grads);
        if step % 50 == 0 || step + 1 == cfg.steps {
            log.push(PretrainRecord { step, loss });
        }
    }
    Ok(log)
}

/// Deterministic regression of the pre-trained network per condition (zero
/// noise, zero slot).
pub fn pretrained_predict(student: &Student, shape: &[usize], cond: &CondData) -> Tensor {
    student.net.velocity_value(&Tensor::zeros(shape), &[0.0], Some(cond))
}

// ── Distillation set ────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct DistillRecord {
    pub noise: Tensor,
    pub cond: CondData,
    pub omega: f64,
    /// Teacher sample in standardized latent space.
    pub teacher_latent: Tensor,
    /// Teacher latent pushed through the frozen decoder (its own rounded
    /// durations); cached so training never re-runs the teacher.
    pub teacher_dec: DecodedProsody,
}

/// Run the teacher's full guided sampler per record. Reproducible from the
/// seed: record `i` uses an independent derived stream.
pub fn generate_distill_set(
    teacher: &Denoiser,
    codec: &ProsodyCodec,
    stats: &LatentStats,
    conds: &[CondData],
    count: usize,
    seed: u64,
) -> Vec<DistillRecord> {
    assert!(!conds.is_empty(), "no conditions to sample from");
    let k = teacher.cfg.style_len;
    let d = teacher.cfg.d_model;
    (0..count)
        .map(|i| {
            let mut rng = Prng::derive(seed, 0xD157, i as u64);
            let omega = rng.range_f64(OMEGA_RANGE.0, OMEGA_RANGE.1);
            let cond = conds[rng.below(conds.len())].clone();
            let noise = Tensor::matrix(k, d, rng.gaussian_vec(k * d));
            let latent = sample(teacher, &noise, &cond, omega, teacher.cfg.steps, None);
            let raw = stats.destandardize(&latent);
            let teacher_dec = codec.decode_value(&raw, &cond.text, DurationSource::Predicted);
            DistillRecord { noise, cond, omega, teacher_latent: latent, teacher_dec }
        })
        .collect()
}

// ── Decoder-space distillation loss ─────────────────────────────────────

/// L1 between the decoder outputs of a student latent (graph) and the cached
/// teacher outputs, combined with the reconstruction weights. Upsampling uses
/// the teacher's rounded durations on both sides so frames align; the decoder
/// is bound frozen, so gradient reaches the student only.
pub fn distill_loss_node(
    g: &mut Graph,
    codec: &ProsodyCodec,
    codec_bound: &Bound,
    stats: &LatentStats,
    student_latent: NodeId,
    cond: &CondData,
    teacher_dec: &DecodedProsody,
) -> NodeId {
    let raw = stats.destandardize_node(g, student_latent);
    let out = codec.decode(g, codec_bound, raw, &cond.text, DurationSource::Truth(&teacher_dec.durations));
    let n = teacher_dec.durations_raw.len();
    let t: usize = teacher_dec.durations.iter().map(|&x| x as usize).sum();
    let t_dur = g.constant(Tensor::matrix(n, 1, teacher_dec.durations_raw.clone()));
    let t_pitch = g.constant(Tensor::matrix(t, 1, teacher_dec.pitch.clone()));
    let t_energy = g.constant(Tensor::matrix(t, 1, teacher_dec.energy.clone()));
    let l_dur = g.l1_loss(out.dur, t_dur);
    let l_f0 = g.l1_loss(out.pitch, t_pitch);
    let l_n = g.l1_loss(out.energy, t_energy);
    let f0 = g.scale(l_f0, LAMBDA_F0);
    let en = g.scale(l_n, LAMBDA_N);
    let s = g.add(l_dur, f0);
    g.add(s, en)
}

// ── Simulation-based student training ───────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct StudentTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub optimizer: AdamWConfig,
}

impl Default for StudentTrainConfig {
    fn default() -> Self {
        StudentTrainConfig { epochs: 10, batch: 8, optimizer: AdamWConfig::default() }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StudentTrainRecord {
    pub epoch: usize,
    pub loss: f64,
}

/// Train the one-step student on a distillation set against the frozen
/// decoder outputs of the teacher.
pub fn train_student(
    student: &mut Student,
    codec: &ProsodyCodec,
    stats: &LatentStats,
    set: &[DistillRecord],
    cfg: StudentTrainConfig,
    seed: u64,
) -> Result<Vec<StudentTrainRecord>, TrainError> {
    if set.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut opt = AdamW::new(cfg.optimizer, &student.net.ps);
    let mut rng = Prng::derive(seed, 0x57D7, 0);
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        let order = rng.permutation(set.len());
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let mut g = Graph::new();
            let bound = student.net.ps.bind(&mut g);
            let codec_bound = codec.ps.bind_frozen(&mut g);
            let inv = 1.0 / chunk.len() as f64;
            let mut total: Option<NodeId> = None;
            for &i in chunk {
                let rec = &set[i];
                let noise = g.constant(rec.noise.clone());
                let out = student.one_step_graph(&mut g, &bound, noise, rec.omega, Some(&rec.cond));
                let l = distill_loss_node(
                    &mut g,
                    codec,
                    &codec_bound,
                    stats,
                    out,
                    &rec.cond,
                    &rec.teacher_dec,
                );
                let scaled = g.scale(l, inv);
                total = Some(match total {
                    Some(t) => g.add(t, scaled),
                    None => scaled,
                });
            }
            let total = total.expect("non-empty chunk");
            let loss = g.value(total).data()[0];
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { step: epoch });
            }
            g.backward(total);
            let grads = bound.grads(&g);
            opt.step(&mut student.net.ps, &grads);
            epoch_loss += loss;
            batches += 1;
        }
        log.push(StudentTrainRecord { epoch, loss: epoch_loss / batches as f64 });
    }
    Ok(log)
}

// ── Consistency distillation baseline ───────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct CdConfig {
    pub steps: usize,
    pub batch: usize,
    pub optimizer: AdamWConfig,
    /// EMA rate of the target network.
    pub ema_rate: f64,
    /// Teacher ODE grid the consistency property is enforced on.
    pub solver_steps: usize,
}

impl Default for CdConfig {
    fn default() -> Self {
        CdConfig {
            steps: 400,
            batch: 8,
            optimizer: AdamWConfig::default(),
            ema_rate: 0.999943,
            solver_steps: 100,
        }
    }
}

/// `target <- mu * target + (1 - mu) * online`, elementwise over all tensors.
pub fn ema_update(target: &mut ParamSet, online: &ParamSet, mu: f64) {
    assert_eq!(target.len(), online.len(), "parameter sets differ");
    let ids: Vec<PId> = target.ids().collect();
    for id in ids {
        let src = online.get(id).clone();
        let dst = target.get_mut(id);
        let dd = dst.data_mut();
        for (d, &s) in dd.iter_mut().zip(src.data()) {
            *d = mu * *d + (1.0 - mu) * s;
        }
    }
}

/// Guided consistency distillation: the student learns to map any point of the
/// teacher's guided ODE trajectory straight to its endpoint, enforced between
/// adjacent DDIM grid levels with an EMA target network and an L1 distance.
pub fn consistency_distill(
    teacher: &Denoiser,
    latents: &[Tensor],
    conds: &[CondData],
    cfg: CdConfig,
    seed: u64,
) -> Result<Student, TrainError> {
    assert_eq!(latents.len(), conds.len());
    if latents.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut online = Student::from_teacher(teacher);
    let mut target = online.clone();
    let mut opt = AdamW::new(cfg.optimizer, &online.net.ps);
    let mut rng = Prng::derive(seed, 0xCD00, 0);
    let grid = NoiseSchedule::new(cfg.solver_steps);

    for step in 0..cfg.steps {
        let mut g = Graph::new();
        let bound = online.net.ps.bind(&mut g);
        let inv_b = 1.0 / cfg.batch as f64;
        let mut total: Option<NodeId> = None;
        for _ in 0..cfg.batch {
            let i = rng.below(latents.len());
            let x0 = &latents[i];
            let cond = &conds[i];
            let omega = rng.range_f64(OMEGA_RANGE.0, OMEGA_RANGE.1);
            let n = 1 + rng.below(cfg.solver_steps);
            let tau_hi = grid.tau(n);
            let tau_lo = grid.tau(n - 1);
            let noise = Tensor::new(x0.shape().to_vec(), rng.gaussian_vec(x0.len()));
            let h_hi = add_noise(x0, &noise, tau_hi);

            // One guided teacher ODE step down the grid.
            let (_, sigma_hi) = schedule(tau_hi);
            let v = cfg_velocity(teacher, &h_hi, sigma_hi, cond, omega);
            let h_lo = ddim_step(&h_hi, &v, n, &grid);

            // EMA-target estimate at the lower level; boundary at tau = 0 is
            // the identity by parameterization.
            let target_est = target.consistency_value(&h_lo, tau_lo, omega, Some(cond));

            let h_hi_node = g.constant(h_hi);
            let online_est = online.consistency_graph(&mut g, &bound, h_hi_node, tau_hi, omega, Some(cond));
            let t_node = g.constant(target_est);
            let l = g.l1_loss(online_est, t_node);
            let scaled = g.scale(l, inv_b);
            total = Some(match total {
                Some(t) => g.add(t, scaled),
                None => scaled,
            });
        }
        let total = total.expect("non-empty batch");
        if !g.value(total).data()[0].is_finite() {
            return Err(TrainError::NonFiniteLoss { step });
        }
        g.backward(total);
        let grads = bound.grads(&g);
        opt.step(&mut online.net.ps, &grads);
        ema_update(&mut target.net.ps, &online.net.ps, cfg.ema_rate);
    }
    Ok(online)
}

// ── Adversarial distillation baseline ───────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct AddConfig {
    pub steps: usize,
    pub batch: usize,
    pub optimizer: AdamWConfig,
    /// Fraction of the schedule the distillation term may re-noise to
    /// (200 of a 1000-step grid).
    pub tau_n: f64,
    /// Number of discrete student levels.
    pub student_steps: usize,
    pub adv_weight: f64,
    pub distill_weight: f64,
}

impl Default for AddConfig {
    fn default() -> Self {
        AddConfig {
            steps: 400,
            batch: 8,
            optimizer: AdamWConfig::default(),
            tau_n: 0.2,
            student_steps: 4,
            adv_weight: 1.0,
            distill_weight: 1.0,
        }
    }
}

/// Latent-space discriminator for adversarial distillation: the multimodal
/// prosody discriminator architecture taking the denoised style as the sample
/// and (text embeddings, prompt frames) as conditions.
pub struct LatentDiscriminator {
    pub ps: ParamSet,
    text_table: PId,
    prompt_proj: Linear,
    disc: DiscriminatorNet,
    d_model: usize,
}

impl LatentDiscriminator {
    pub fn init(cfg: &DiffusionConfig, seed: u64) -> Self {
        let mut ps = ParamSet::new();
        let mut rng = Prng::derive(seed, 0xADD0, 0);
        let conf = ConformerConfig { conv_kernel: cfg.kernel_narrow, ..cfg.conformer() };
        let text_table =
            ps.add("addisc.text_table", crate::nn::table_init(&mut rng, cfg.vocab, cfg.d_model, 0.1));
        let prompt_proj =
            Linear::init(&mut ps, "addisc.prompt_proj", cfg.d_model + 3, cfg.d_model, true, &mut rng);
        let disc =
            DiscriminatorNet::init(&mut ps, "addisc", cfg.d_model, cfg.d_model, &conf, 2, &mut rng);
        LatentDiscriminator { ps, text_table, prompt_proj, disc, d_model: cfg.d_model }
    }

    fn cond_node(&self, g: &mut Graph, bound: &Bound, cond: &CondData) -> NodeId {
        let ids: Vec<usize> = cond.text.iter().map(|&x| x as usize).collect();
        let text = g.embedding(bound.node(self.text_table), &ids);
        let feats = g.constant(prompt_features(&cond.prompt, self.d_model));
        let prompt = self.prompt_proj.forward(g, bound, feats);
        g.concat_rows(&[text, prompt])
    }

    fn score(&self, g: &mut Graph, bound: &Bound, latent: NodeId, cond: &CondData) -> NodeId {
        let c = self.cond_node(g, bound, cond);
        self.disc.forward(g, bound, latent, c).logits
    }
}

/// Adversarial distillation: the student denoises data noised to one of
/// `student_steps` levels; an LSGAN discriminator judges the result against
/// real latents, and a teacher-matching term re-noises the student output up
/// to `tau_n` of the schedule and pulls it toward the teacher's clean
/// estimate.
pub fn adversarial_distill(
    teacher: &Denoiser,
    latents: &[Tensor],
    conds: &[CondData],
    cfg: AddConfig,
    seed: u64,
) -> Result<Student, TrainError> {
    assert_eq!(latents.len(), conds.len());
    if latents.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut student = Student::from_teacher(teacher);
    let mut disc = LatentDiscriminator::init(&teacher.cfg, seed ^ 0xD15C);
    let mut opt = AdamW::new(cfg.optimizer, &student.net.ps);
    let mut opt_d = AdamW::new(cfg.optimizer, &disc.ps);
    let mut rng = Prng::derive(seed, 0xADD1, 0);

    for step in 0..cfg.steps {
        // Generator phase.
        let mut picks = Vec::with_capacity(cfg.batch);
        {
            let mut g = Graph::new();
            let bound = student.net.ps.bind(&mut g);
            let disc_bound = disc.ps.bind_frozen(&mut g);
            let inv_b = 1.0 / cfg.batch as f64;
            let mut total: Option<NodeId> = None;
            for _ in 0..cfg.batch {
                let i = rng.below(latents.len());
                let x0 = &latents[i];
                let cond = conds[i].clone();
                let omega = rng.range_f64(OMEGA_RANGE.0, OMEGA_RANGE.1);
                let level = 1 + rng.below(cfg.student_steps);
                let tau_s = level as f64 / cfg.student_steps as f64;
                let noise = Tensor::new(x0.shape().to_vec(), rng.gaussian_vec(x0.len()));
                let h_s = add_noise(x0, &noise, tau_s);

                let h_node = g.constant(h_s);
                let est = student.consistency_graph(&mut g, &bound, h_node, tau_s, omega, Some(&cond));

                // Adversarial term against the frozen discriminator.
                let adv = {
                    let logits = disc.score(&mut g, &disc_bound, est, &cond);
                    lsgan_generator_loss(&mut g, logits)
                };

                // Teacher-matching term at a re-noised point within tau_n.
                let tau_d = rng.range_f64(0.0, cfg.tau_n).max(1.0 / 1000.0);
                let noise2 = Tensor::new(x0.shape().to_vec(), rng.gaussian_vec(x0.len()));
                let est_val = g.value(est).clone();
                let renoised = add_noise(&est_val, &noise2, tau_d);
                let (_, sigma_d) = schedule(tau_d);
                let v_t = cfg_velocity(teacher, &renoised, sigma_d, &cond, omega);
                let teacher_x0 = x0_from_velocity(&renoised, &v_t, tau_d);
                let t_node = g.constant(teacher_x0);
                let dist = g.l1_loss(est, t_node);

                let adv_w = g.scale(adv, cfg.adv_weight);
                let dist_w = g.scale(dist, cfg.distill_weight);
                let both = g.add(adv_w, dist_w);
                let scaled = g.scale(both, inv_b);
                total = Some(match total {
                    Some(t) => g.add(t, scaled),
                    None => scaled,
                });
                picks.push((i, omega, g.value(est).clone()));
            }
            let total = total.expect("non-empty batch");
            if !g.value(total).data()[0].is_finite() {
                return Err(TrainError::NonFiniteLoss { step });
            }
            g.backward(total);
            let grads = bound.grads(&g);
            opt.step(&mut student.net.ps, &grads);
        }

        // Discriminator phase on detached student outputs.
        {
            disc.ps.set_trainable(true);
            let mut g = Graph::new();
            let db = disc.ps.bind(&mut g);
            let inv_b = 1.0 / picks.len() as f64;
            let mut total: Option<NodeId> = None;
            for (i, _omega, fake_val) in &picks {
                let cond = &conds[*i];
                let fake = g.constant(fake_val.clone());
                let real = g.constant(latents[*i].clone());
                let f_logits = disc.score(&mut g, &db, fake, cond);
                let r_logits = disc.score(&mut g, &db, real, cond);
                let l = lsgan_discriminator_loss(&mut g, r_logits, f_logits);
                let scaled = g.scale(l, inv_b);
                total = Some(match total {
                    Some(t) => g.add(t, scaled),
                    None => scaled,
                });
            }
            let total = total.expect("non-empty batch");
            if !g.value(total).data()[0].is_finite() {
                return Err(TrainError::NonFiniteLoss { step });
            }
            g.backward(total);
            let grads = db.grads(&g);
            opt_d.step(&mut disc.ps, &grads);
        }
    }
    Ok(student)
}

// ── Evaluation ──────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillMetrics {
    pub l_dur: f64,
    pub l_f0: f64,
    pub l_n: f64,
}

impl DistillMetrics {
    pub fn combined(&self) -> f64 {
        self.l_dur + LAMBDA_F0 * self.l_f0 + LAMBDA_N * self.l_n
    }

    pub fn all_below(&self, other: &DistillMetrics) -> bool {
        self.l_dur < other.l_dur && self.l_f0 < other.l_f0 && self.l_n < other.l_n
    }
}

/// How a distilled model turns noise into a latent at evaluation time.
pub enum SamplerKind<'a> {
    /// The teacher itself (sanity anchor: distance zero).
    Teacher,
    /// One forward pass of a simulation-distilled or pre-trained student.
    OneStep(&'a Student),
    /// One step of a consistency model from pure noise.
    Consistency(&'a Student),
    /// Multi-step consistency-parameterized sampler.
    MultiStep(&'a Student, usize),
}

/// Mean per-metric L1 between the decoded outputs of teacher samples and
/// student samples from identical noise, over held-out conditions.
pub fn eval_distill(
    teacher: &Denoiser,
    codec: &ProsodyCodec,
    stats: &LatentStats,
    conds: &[CondData],
    sampler: SamplerKind<'_>,
    omega: f64,
    seed: u64,
) -> DistillMetrics {
    assert!(!conds.is_empty(), "no held-out conditions");
    let k = teacher.cfg.style_len;
    let d = teacher.cfg.d_model;
    let mut acc = DistillMetrics { l_dur: 0.0, l_f0: 0.0, l_n: 0.0 };
    for (i, cond) in conds.iter().enumerate() {
        let mut rng = Prng::derive(seed, 0xE7A1, i as u64);
        let noise = Tensor::matrix(k, d, rng.gaussian_vec(k * d));
        let teacher_latent = sample(teacher, &noise, cond, omega, teacher.cfg.steps, None);
        let student_latent = match &sampler {
            SamplerKind::Teacher => teacher_latent.clone(),
            SamplerKind::OneStep(s) => s.one_step_value(&noise, omega, Some(cond)),
            SamplerKind::Consistency(s) => s.consistency_value(&noise, 1.0, omega, Some(cond)),
            SamplerKind::MultiStep(s, n) => s.sample_n_steps(&noise, omega, Some(cond), *n),
        };

        let t_raw = stats.destandardize(&teacher_latent);
        let s_raw = stats.destandardize(&student_latent);
        let t_dec = codec.decode_value(&t_raw, &cond.text, DurationSource::Predicted);
        let s_dec = codec.decode_value(&s_raw, &cond.text, DurationSource::Truth(&t_dec.durations));

        let n = cond.text.len() as f64;
        acc.l_dur += t_dec
            .durations_raw
            .iter()
            .zip(&s_dec.durations_raw)
            .map(|(a, b)| crate::math::abs(a - b))
            .sum::<f64>()
            / n;
        let t = t_dec.pitch.len() as f64;
        acc.l_f0 += t_dec
            .pitch
            .iter()
            .zip(&s_dec.pitch)
            .map(|(a, b)| crate::math::abs(a - b))
            .sum::<f64>()
            / t;
        acc.l_n += t_dec
            .energy
            .iter()
            .zip(&s_dec.energy)
            .map(|(a, b)| crate::math::abs(a - b))
            .sum::<f64>()
            / t;
    }
    let m = conds.len() as f64;
    DistillMetrics { l_dur: acc.l_dur / m, l_f0: acc.l_f0 / m, l_n: acc.l_n / m }
}
