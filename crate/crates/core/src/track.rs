//! Per-utterance prosody data: pitch and energy frame sequences plus integer
//! phoneme durations, with optional masks for partial-input encoding.

use crate::math;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[derive(Clone, Debug, PartialEq)]
pub struct ProsodyTrack {
    /// Normalized log-F0 per frame.
    pub pitch: Vec<f64>,
    /// Normalized log-energy per frame.
    pub energy: Vec<f64>,
    /// Frames per phoneme, each >= 1; the frame count is their sum.
    pub durations: Vec<u32>,
    /// Per-frame mask, `true` = hidden from the encoder.
    pub frame_mask: Option<Vec<bool>>,
    /// Per-phoneme mask, `true` = hidden from the encoder.
    pub phoneme_mask: Option<Vec<bool>>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrackError {
    LengthMismatch(String),
    EmptyTrack,
    SpanOutOfRange { len: usize, start: usize, end: usize },
    ZeroDuration,
}

impl core::fmt::Display for TrackError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            TrackError::LengthMismatch(s) => write!(f, "length mismatch: {s}"),
            TrackError::EmptyTrack => write!(f, "empty track"),
            TrackError::SpanOutOfRange { len, start, end } => {
                write!(f, "span {start}..{end} out of range for {len} phonemes")
            }
            TrackError::ZeroDuration => write!(f, "durations must all be >= 1"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for TrackError {}

impl ProsodyTrack {
    pub fn new(pitch: Vec<f64>, energy: Vec<f64>, durations: Vec<u32>) -> Result<Self, TrackError> {
        let t = ProsodyTrack { pitch, energy, durations, frame_mask: None, phoneme_mask: None };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), TrackError> {
        if self.durations.is_empty() {
            return Err(TrackError::EmptyTrack);
        }
        if self.durations.iter().any(|&d| d == 0) {
            return Err(TrackError::ZeroDuration);
        }
        let total: usize = self.durations.iter().map(|&d| d as usize).sum();
        if self.pitch.len() != total || self.energy.len() != total {
            return Err(TrackError::LengthMismatch(alloc::format!(
                "pitch {} energy {} vs duration sum {total}",
                self.pitch.len(),
                self.energy.len()
            )));
        }
        if let Some(m) = &self.frame_mask {
            if m.len() != total {
                return Err(TrackError::LengthMismatch(String::from("frame mask")));
            }
        }
        if let Some(m) = &self.phoneme_mask {
            if m.len() != self.durations.len() {
                return Err(TrackError::LengthMismatch(String::from("phoneme mask")));
            }
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.pitch.len()
    }

    pub fn num_phonemes(&self) -> usize {
        self.durations.len()
    }

    /// End frame (exclusive) of each phoneme.
    pub fn phoneme_ends(&self) -> Vec<usize> {
        let mut ends = Vec::with_capacity(self.durations.len());
        let mut acc = 0usize;
        for &d in &self.durations {
            acc += d as usize;
            ends.push(acc);
        }
        ends
    }

    /// Per-frame view of the phoneme mask combined with any frame mask.
    pub fn effective_frame_mask(&self) -> Vec<bool> {
        let mut m = self.frame_mask.clone().unwrap_or_else(|| vec![false; self.frames()]);
        if let Some(pm) = &self.phoneme_mask {
            let mut frame = 0usize;
            for (i, &d) in self.durations.iter().enumerate() {
                for _ in 0..d {
                    m[frame] = m[frame] || pm[i];
                    frame += 1;
                }
            }
        }
        m
    }

    pub fn is_masked(&self) -> bool {
        self.frame_mask.as_ref().is_some_and(|m| m.iter().any(|&x| x))
            || self.phoneme_mask.as_ref().is_some_and(|m| m.iter().any(|&x| x))
    }
}

/// Hide a contiguous phoneme span `[start, end)` from the encoder: covered
/// frames and phonemes are flagged; stored values are untouched (the encoder
/// zeroes flagged inputs and raises an indicator channel instead).
/// An empty span returns the input unchanged. Masking the same span twice is
/// the same as masking it once.
pub fn mask_prosody(track: &ProsodyTrack, start: usize, end: usize) -> Result<ProsodyTrack, TrackError> {
    let n = track.num_phonemes();
    if start > end || end > n {
        return Err(TrackError::SpanOutOfRange { len: n, start, end });
    }
    if start == end {
        return Ok(track.clone());
    }
    let mut out = track.clone();
    let mut pm = out.phoneme_mask.take().unwrap_or_else(|| vec![false; n]);
    let mut fm = out.frame_mask.take().unwrap_or_else(|| vec![false; track.frames()]);
    let ends = track.phoneme_ends();
    for (i, item) in pm.iter_mut().enumerate().take(end).skip(start) {
        *item = true;
        let lo = if i == 0 { 0 } else { ends[i - 1] };
        for f in &mut fm[lo..ends[i]] {
            *f = true;
        }
    }
    out.phoneme_mask = Some(pm);
    out.frame_mask = Some(fm);
    Ok(out)
}

/// Shift pitch and energy so their medians match the prompt's medians;
/// durations pass through. This is the re-normalization used for voice
/// conversion style transfer of prosody statistics.
pub fn renormalize_prosody(
    input: &ProsodyTrack,
    prompt: &ProsodyTrack,
) -> Result<ProsodyTrack, TrackError> {
    if input.frames() == 0 || prompt.frames() == 0 {
        return Err(TrackError::EmptyTrack);
    }
    let pitch_shift = math::median(&prompt.pitch) - math::median(&input.pitch);
    let energy_shift = math::median(&prompt.energy) - math::median(&input.energy);
    let mut out = input.clone();
    for p in &mut out.pitch {
        *p += pitch_shift;
    }
    for e in &mut out.energy {
        *e += energy_shift;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Prng;

    fn track(durations: &[u32], seed: u64) -> ProsodyTrack {
        let mut rng = Prng::seed(seed);
        let t: usize = durations.iter().map(|&d| d as usize).sum();
        ProsodyTrack::new(rng.gaussian_vec(t), rng.gaussian_vec(t), durations.to_vec()).unwrap()
    }

    #[test]
    fn validate_checks_duration_sum() {
        let t = ProsodyTrack::new(vec![0.0; 5], vec![0.0; 5], vec![2, 3]);
        assert!(t.is_ok());
        let t = ProsodyTrack::new(vec![0.0; 4], vec![0.0; 5], vec![2, 3]);
        assert!(matches!(t, Err(TrackError::LengthMismatch(_))));
        let t = ProsodyTrack::new(vec![], vec![], vec![]);
        assert!(matches!(t, Err(TrackError::EmptyTrack)));
        let t = ProsodyTrack::new(vec![0.0; 2], vec![0.0; 2], vec![2, 0]);
        assert!(matches!(t, Err(TrackError::ZeroDuration)));
    }

    #[test]
    fn empty_span_is_identity() {
        let t = track(&[2, 3, 1], 1);
        let m = mask_prosody(&t, 1, 1).unwrap();
        assert_eq!(m, t);
    }

    #[test]
    fn full_span_masks_everything() {
        let t = track(&[2, 3, 1], 2);
        let m = mask_prosody(&t, 0, 3).unwrap();
        assert!(m.effective_frame_mask().iter().all(|&x| x));
        assert_eq!(m.pitch, t.pitch, "values untouched");
        m.validate().unwrap();
    }

    #[test]
    fn masking_is_idempotent() {
        let t = track(&[2, 2, 2, 2], 3);
        let once = mask_prosody(&t, 1, 3).unwrap();
        let twice = mask_prosody(&once, 1, 3).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn span_out_of_range_is_error() {
        let t = track(&[2, 2], 4);
        assert!(matches!(mask_prosody(&t, 0, 3), Err(TrackError::SpanOutOfRange { .. })));
        assert!(matches!(mask_prosody(&t, 2, 1), Err(TrackError::SpanOutOfRange { .. })));
    }

    #[test]
    fn mask_covers_expected_frames() {
        let t = track(&[2, 3, 1], 5);
        let m = mask_prosody(&t, 1, 2).unwrap();
        assert_eq!(m.effective_frame_mask(), vec![false, false, true, true, true, false]);
        assert_eq!(m.phoneme_mask.as_deref(), Some(&[false, true, false][..]));
    }

    #[test]
    fn renormalize_identity_when_prompt_is_input() {
        let t = track(&[3, 4], 6);
        let r = renormalize_prosody(&t, &t).unwrap();
        assert_eq!(r, t);
    }

    #[test]
    fn renormalize_matches_prompt_median_exactly_for_odd_counts() {
        let a = track(&[3, 4], 7); // 7 frames, odd
        let b = track(&[5, 2], 8);
        let r = renormalize_prosody(&a, &b).unwrap();
        assert_eq!(math::median(&r.pitch), math::median(&b.pitch));
        assert_eq!(math::median(&r.energy), math::median(&b.energy));
        assert_eq!(r.durations, a.durations);
    }

    #[test]
    fn renormalize_cancels_constant_input_shift() {
        let a = track(&[3, 4], 9);
        let b = track(&[5, 2], 10);
        let mut shifted = a.clone();
        for p in &mut shifted.pitch {
            *p += 1.0;
        }
        let r1 = renormalize_prosody(&a, &b).unwrap();
        let r2 = renormalize_prosody(&shifted, &b).unwrap();
        for (x, y) in r1.pitch.iter().zip(&r2.pitch) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
