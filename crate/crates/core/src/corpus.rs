//! Deterministic synthetic prosody corpus.
//!
//! Stands in for a speech dataset: per-speaker pitch/energy/tempo statistics,
//! per-utterance contours built from a declination line plus per-phoneme
//! accents and noise, and prompts cut as prefix truncations at phoneme
//! boundaries. Everything derives from one seed; regeneration is
//! bit-reproducible.

use crate::math;
use crate::rng::Prng;
use crate::track::{ProsodyTrack, TrackError};
use alloc::string::String;
use alloc::vec::Vec;

/// Toy phoneme alphabet size; ids are meaningless symbols with learnable
/// embeddings downstream.
pub const VOCAB_SIZE: usize = 64;

const SPEAKER_TAG: u64 = 0x5350_4b52; // stream tag for speaker draws
const UTT_TAG: u64 = 0x5554_5452; // stream tag for utterance draws

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerProfile {
    pub speaker_id: u32,
    /// Mean log-F0 in log-Hz, within [ln 60, ln 400].
    pub base_logf0: f64,
    /// Within-speaker pitch spread (log-Hz std).
    pub pitch_range: f64,
    /// Duration multiplier in [0.6, 1.6].
    pub rate_factor: f64,
    pub energy_base: f64,
    pub energy_range: f64,
    /// Scales the per-phoneme accent pattern.
    pub accent_strength: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub speaker_id: u32,
    pub phonemes: Vec<u32>,
    pub track: ProsodyTrack,
    pub prompt: ProsodyTrack,
    /// Phoneme ids covered by the prompt prefix.
    pub prompt_phonemes: Vec<u32>,
}

/// Mean/std used to normalize raw log-F0 and log-energy into model space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats {
    pub pitch_mean: f64,
    pub pitch_std: f64,
    pub energy_mean: f64,
    pub energy_std: f64,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub speakers: Vec<SpeakerProfile>,
    pub utterances: Vec<Utterance>,
    pub norm: NormStats,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub seed: u64,
    pub num_speakers: usize,
    pub utts_per_speaker: usize,
    /// Inclusive phoneme-count range per utterance.
    pub len_range: (usize, usize),
    /// Inclusive per-phoneme class mean duration range in frames.
    pub dur_range: (u32, u32),
    /// Std of frame-level contour noise, in log-Hz.
    pub noise_std: f64,
    /// Prompt prefix fraction draw range.
    pub prompt_fraction: (f64, f64),
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 1,
            num_speakers: 8,
            utts_per_speaker: 8,
            len_range: (8, 24),
            dur_range: (2, 8),
            noise_std: 0.03,
            prompt_fraction: (0.3, 0.7),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CorpusError {
    NoSpeakers,
    EmptyLenRange(String),
    Track(TrackError),
}

impl core::fmt::Display for CorpusError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            CorpusError::NoSpeakers => write!(f, "num_speakers must be >= 1"),
            CorpusError::EmptyLenRange(s) => write!(f, "empty range: {s}"),
            CorpusError::Track(e) => write!(f, "track: {e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for CorpusError {}

impl From<TrackError> for CorpusError {
    fn from(e: TrackError) -> Self {
        CorpusError::Track(e)
    }
}

/// Deterministic per-phoneme-class properties: a class mean duration inside
/// `dur_range` and an accent offset in [-1, 1], both functions of the id only.
fn phoneme_class(id: u32, dur_range: (u32, u32)) -> (f64, f64) {
    let mut r = Prng::derive(0xC1A5_5E5, id as u64, 0);
    let dur = r.range_f64(dur_range.0 as f64, dur_range.1 as f64);
    let accent = r.range_f64(-1.0, 1.0);
    (dur, accent)
}

fn gen_speaker(seed: u64, speaker_id: u32) -> SpeakerProfile {
    let mut r = Prng::derive(seed, SPEAKER_TAG, speaker_id as u64);
    SpeakerProfile {
        speaker_id,
        base_logf0: r.range_f64(math::ln(60.0), math::ln(400.0)),
        pitch_range: r.range_f64(0.08, 0.25),
        rate_factor: r.range_f64(0.6, 1.6),
        energy_base: r.range_f64(-0.5, 0.5),
        energy_range: r.range_f64(0.1, 0.4),
        accent_strength: r.range_f64(0.3, 1.0),
    }
}

/// Raw (unnormalized) contour generation for one utterance.
fn gen_utterance_raw(
    cfg: &CorpusConfig,
    spk: &SpeakerProfile,
    utt_index: u64,
) -> (Vec<u32>, Vec<f64>, Vec<f64>, Vec<u32>, f64) {
    let mut r = Prng::derive(cfg.seed, UTT_TAG, (spk.speaker_id as u64) << 32 | utt_index);
    let n = cfg.len_range.0 + r.below(cfg.len_range.1 - cfg.len_range.0 + 1);
    let phonemes: Vec<u32> = (0..n).map(|_| r.below(VOCAB_SIZE) as u32).collect();

    let durations: Vec<u32> = phonemes
        .iter()
        .map(|&p| {
            let (class_dur, _) = phoneme_class(p, cfg.dur_range);
            let d = math::round(class_dur * spk.rate_factor);
            (d.max(1.0)) as u32
        })
        .collect();
    let total: usize = durations.iter().map(|&d| d as usize).sum();

    // Pitch: base + declination over the utterance + per-phoneme accent + noise.
    // Energy follows the same construction with its own statistics.
    let decl = 1.0; // declination drop, in units of the speaker range
    let mut pitch = Vec::with_capacity(total);
    let mut energy = Vec::with_capacity(total);
    let mut frame = 0usize;
    for (i, &p) in phonemes.iter().enumerate() {
        let (_, accent) = phoneme_class(p, cfg.dur_range);
        for _ in 0..durations[i] {
            let pos = if total > 1 { frame as f64 / (total - 1) as f64 } else { 0.0 };
            let pv = spk.base_logf0
                + spk.pitch_range * (spk.accent_strength * accent - decl * pos)
                + cfg.noise_std * r.gaussian();
            let ev = spk.energy_base
                + spk.energy_range * (spk.accent_strength * accent * 0.5 - 0.5 * decl * pos)
                + cfg.noise_std * r.gaussian();
            pitch.push(pv);
            energy.push(ev);
            frame += 1;
        }
    }
    let prompt_fraction = r.range_f64(cfg.prompt_fraction.0, cfg.prompt_fraction.1);
    (phonemes, pitch, energy, durations, prompt_fraction)
}

/// Prefix truncation at the phoneme boundary nearest `fraction` of the frame
/// count; durations are re-sliced consistently. A track with a single phoneme
/// only admits fraction 1.
pub fn make_prompt(track: &ProsodyTrack, fraction: f64) -> Result<ProsodyTrack, TrackError> {
    assert!(fraction > 0.0 && fraction <= 1.0, "fraction must be in (0, 1]");
    track.validate()?;
    let total = track.frames();
    let target = fraction * total as f64;
    let ends = track.phoneme_ends();
    // Nearest boundary with at least one phoneme kept.
    let mut best = 0usize;
    let mut best_dist = f64::INFINITY;
    for (i, &e) in ends.iter().enumerate() {
        let dist = math::abs(e as f64 - target);
        if dist < best_dist {
            best_dist = dist;
            best = i;
        }
    }
    let keep_phonemes = best + 1;
    let keep_frames = ends[best];
    if keep_phonemes == track.num_phonemes() {
        return Ok(track.clone());
    }
    ProsodyTrack::new(
        track.pitch[..keep_frames].to_vec(),
        track.energy[..keep_frames].to_vec(),
        track.durations[..keep_phonemes].to_vec(),
    )
}

/// Number of phonemes a prompt of `fraction` would keep, used to slice the
/// phoneme id sequence alongside the track.
fn prompt_phoneme_count(track: &ProsodyTrack, fraction: f64) -> usize {
    let total = track.frames();
    let target = fraction * total as f64;
    let ends = track.phoneme_ends();
    let mut best = 0usize;
    let mut best_dist = f64::INFINITY;
    for (i, &e) in ends.iter().enumerate() {
        let dist = math::abs(e as f64 - target);
        if dist < best_dist {
            best_dist = dist;
            best = i;
        }
    }
    best + 1
}

pub fn gen_corpus(cfg: &CorpusConfig) -> Result<Corpus, CorpusError> {
    if cfg.num_speakers == 0 {
        return Err(CorpusError::NoSpeakers);
    }
    if cfg.len_range.0 > cfg.len_range.1 || cfg.len_range.0 == 0 {
        return Err(CorpusError::EmptyLenRange(alloc::format!("{:?}", cfg.len_range)));
    }
    if cfg.dur_range.0 > cfg.dur_range.1 || cfg.dur_range.0 == 0 {
        return Err(CorpusError::EmptyLenRange(alloc::format!("{:?}", cfg.dur_range)));
    }

    let speakers: Vec<SpeakerProfile> =
        (0..cfg.num_speakers).map(|s| gen_speaker(cfg.seed, s as u32)).collect();

    struct Raw {
        speaker_id: u32,
        phonemes: Vec<u32>,
        pitch: Vec<f64>,
        energy: Vec<f64>,
        durations: Vec<u32>,
        prompt_fraction: f64,
    }

    let mut raws = Vec::with_capacity(cfg.num_speakers * cfg.utts_per_speaker);
    for spk in &speakers {
        for u in 0..cfg.utts_per_speaker {
            let (phonemes, pitch, energy, durations, prompt_fraction) =
                gen_utterance_raw(cfg, spk, u as u64);
            raws.push(Raw {
                speaker_id: spk.speaker_id,
                phonemes,
                pitch,
                energy,
                durations,
                prompt_fraction,
            });
        }
    }

    // Corpus-level normalization of the raw units.
    let all_pitch: Vec<f64> = raws.iter().flat_map(|r| r.pitch.iter().copied()).collect();
    let all_energy: Vec<f64> = raws.iter().flat_map(|r| r.energy.iter().copied()).collect();
    let norm = NormStats {
        pitch_mean: math::mean(&all_pitch),
        pitch_std: math::std_dev(&all_pitch).max(1e-9),
        energy_mean: math::mean(&all_energy),
        energy_std: math::std_dev(&all_energy).max(1e-9),
    };

    let mut utterances = Vec::with_capacity(raws.len());
    for raw in raws {
        let pitch: Vec<f64> =
            raw.pitch.iter().map(|&p| (p - norm.pitch_mean) / norm.pitch_std).collect();
        let energy: Vec<f64> =
            raw.energy.iter().map(|&e| (e - norm.energy_mean) / norm.energy_std).collect();
        let track = ProsodyTrack::new(pitch, energy, raw.durations)?;
        let prompt = make_prompt(&track, raw.prompt_fraction)?;
        let keep = prompt_phoneme_count(&track, raw.prompt_fraction);
        utterances.push(Utterance {
            speaker_id: raw.speaker_id,
            phonemes: raw.phonemes.clone(),
            track,
            prompt,
            prompt_phonemes: raw.phonemes[..keep].to_vec(),
        });
    }

    Ok(Corpus { speakers, utterances, norm, seed: cfg.seed })
}

impl Corpus {
    /// De-normalized (raw-unit) pitch values of one utterance.
    pub fn denorm_pitch(&self, track: &ProsodyTrack) -> Vec<f64> {
        track.pitch.iter().map(|&p| p * self.norm.pitch_std + self.norm.pitch_mean).collect()
    }

    pub fn denorm_energy(&self, track: &ProsodyTrack) -> Vec<f64> {
        track.energy.iter().map(|&e| e * self.norm.energy_std + self.norm.energy_mean).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_corpus() {
        let cfg = CorpusConfig { num_speakers: 3, utts_per_speaker: 3, ..CorpusConfig::default() };
        let a = gen_corpus(&cfg).unwrap();
        let b = gen_corpus(&cfg).unwrap();
        assert_eq!(a.speakers, b.speakers);
        assert_eq!(a.utterances, b.utterances);
        assert_eq!(a.norm, b.norm);
    }

    #[test]
    fn lengths_are_consistent() {
        let cfg = CorpusConfig { num_speakers: 4, utts_per_speaker: 4, ..CorpusConfig::default() };
        let c = gen_corpus(&cfg).unwrap();
        for u in &c.utterances {
            u.track.validate().unwrap();
            u.prompt.validate().unwrap();
            assert_eq!(u.track.pitch.len(), u.track.energy.len());
            assert!(u.prompt.frames() <= u.track.frames());
            assert_eq!(u.phonemes.len(), u.track.num_phonemes());
            assert_eq!(u.prompt_phonemes.len(), u.prompt.num_phonemes());
            assert!(u.phonemes.iter().all(|&p| (p as usize) < VOCAB_SIZE));
        }
    }

    #[test]
    fn zero_accent_zero_noise_gives_pure_declination() {
        let cfg = CorpusConfig { noise_std: 0.0, num_speakers: 1, utts_per_speaker: 1, ..CorpusConfig::default() };
        let mut spk = gen_speaker(cfg.seed, 0);
        spk.accent_strength = 0.0;
        let (_, pitch, _, _, _) = gen_utterance_raw(&cfg, &spk, 0);
        // Successive differences must be constant (a line in frame index).
        let d0 = pitch[1] - pitch[0];
        for w in pitch.windows(2) {
            assert!(((w[1] - w[0]) - d0).abs() < 1e-12, "not a line");
        }
        assert!(d0 < 0.0, "declination should fall");
    }

    #[test]
    fn corpus_pitch_cv_positive_for_multiple_speakers() {
        let cfg = CorpusConfig { num_speakers: 2, utts_per_speaker: 4, ..CorpusConfig::default() };
        let c = gen_corpus(&cfg).unwrap();
        let all: Vec<f64> = c
            .utterances
            .iter()
            .flat_map(|u| c.denorm_pitch(&u.track))
            .collect();
        let cv = math::std_dev(&all) / math::mean(&all);
        assert!(cv > 0.0);
    }

    #[test]
    fn speakers_distinguishable_by_mean_logf0() {
        // Over pairs of speakers, utterance-level mean pitch must separate
        // with a comfortable margin in most pairs.
        let cfg = CorpusConfig { num_speakers: 12, utts_per_speaker: 6, ..CorpusConfig::default() };
        let c = gen_corpus(&cfg).unwrap();
        let mut means: Vec<Vec<f64>> = alloc::vec![Vec::new(); cfg.num_speakers];
        for u in &c.utterances {
            means[u.speaker_id as usize].push(math::mean(&u.track.pitch));
        }
        let spk_mean: Vec<f64> = means.iter().map(|m| math::mean(m)).collect();
        let spk_std: Vec<f64> = means.iter().map(|m| math::std_dev(m)).collect();
        let mut separated = 0usize;
        let mut total = 0usize;
        for a in 0..cfg.num_speakers {
            for b in (a + 1)..cfg.num_speakers {
                total += 1;
                let gap = math::abs(spk_mean[a] - spk_mean[b]);
                if gap > 2.0 * spk_std[a].max(spk_std[b]) {
                    separated += 1;
                }
            }
        }
        let frac = separated as f64 / total as f64;
        assert!(frac > 0.9, "only {frac} of speaker pairs separated");
    }

    #[test]
    fn prompt_full_fraction_is_whole_track() {
        let cfg = CorpusConfig::default();
        let c = gen_corpus(&cfg).unwrap();
        let t = &c.utterances[0].track;
        let p = make_prompt(t, 1.0).unwrap();
        assert_eq!(&p, t);
    }

    #[test]
    fn prompt_half_of_equal_durations_keeps_half_the_phonemes() {
        let t = ProsodyTrack::new(alloc::vec![0.0; 20], alloc::vec![0.0; 20], alloc::vec![2; 10]).unwrap();
        let p = make_prompt(&t, 0.5).unwrap();
        assert_eq!(p.num_phonemes(), 5);
        let sum: usize = p.durations.iter().map(|&d| d as usize).sum();
        assert_eq!(sum, p.frames());
    }

    #[test]
    fn single_phoneme_track_prompts_to_itself() {
        let t = ProsodyTrack::new(alloc::vec![0.1; 3], alloc::vec![0.2; 3], alloc::vec![3]).unwrap();
        let p = make_prompt(&t, 0.3).unwrap();
        assert_eq!(p, t);
    }

    #[test]
    fn invalid_configs_are_errors() {
        let cfg = CorpusConfig { num_speakers: 0, ..CorpusConfig::default() };
        assert!(matches!(gen_corpus(&cfg), Err(CorpusError::NoSpeakers)));
        let cfg = CorpusConfig { len_range: (5, 2), ..CorpusConfig::default() };
        assert!(matches!(gen_corpus(&cfg), Err(CorpusError::EmptyLenRange(_))));
    }
}
