//! Quantitative evaluation: diffusion std discrepancy, expressiveness
//! coefficients of variation, prompt-similarity correlations, and the rank
//! statistics the trend checks use.

use crate::corpus::NormStats;
use crate::math;
use crate::tensor::Tensor;
use crate::track::ProsodyTrack;
use alloc::vec::Vec;

/// Per-dimension standard deviations of a latent set, aggregated by
/// arithmetic mean. Sets with equal shapes use per-entry dimensions; mixed
/// row counts pool rows per channel.
fn mean_dim_std(set: &[Tensor]) -> f64 {
    assert!(!set.is_empty(), "empty latent set");
    let same_shape = set.iter().all(|l| l.shape() == set[0].shape());
    if same_shape {
        let len = set[0].len();
        let n = set.len() as f64;
        let mut mean = alloc::vec![0.0; len];
        for l in set {
            for (m, &x) in mean.iter_mut().zip(l.data()) {
                *m += x / n;
            }
        }
        let mut var = alloc::vec![0.0; len];
        for l in set {
            for (v, (&x, &m)) in var.iter_mut().zip(l.data().iter().zip(&mean)) {
                *v += (x - m) * (x - m) / n;
            }
        }
        var.iter().map(|&v| math::sqrt(v)).sum::<f64>() / len as f64
    } else {
        let cols = set[0].cols();
        let mut mean = alloc::vec![0.0; cols];
        let mut count = 0.0;
        for l in set {
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
        let mut var = alloc::vec![0.0; cols];
        for l in set {
            for r in 0..l.rows() {
                for (v, (&x, &m)) in var.iter_mut().zip(l.row(r).iter().zip(&mean)) {
                    *v += (x - m) * (x - m) / count;
                }
            }
        }
        var.iter().map(|&v| math::sqrt(v)).sum::<f64>() / cols as f64
    }
}

/// Normalized absolute std discrepancy between the data latents and diffusion
/// samples: `|sigma_data - sigma_diff| / sigma_data` with per-dimension stds
/// aggregated by arithmetic mean before the ratio. Both sets must live in the
/// same (standardized) space.
pub fn sigma_error(data: &[Tensor], samples: &[Tensor]) -> f64 {
    let sd = mean_dim_std(data);
    assert!(sd > 0.0, "sigma_data is zero");
    let ss = mean_dim_std(samples);
    math::abs(sd - ss) / sd
}

// ── Expressiveness ──────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CvReport {
    pub cv_pitch: f64,
    pub cv_energy: f64,
    pub cv_sum: f64,
}

/// Coefficient of variation (std/mean) of de-normalized pitch and energy,
/// averaged per utterance. The de-normalization matters: the normalized
/// values are zero-mean by construction.
pub fn expressiveness_cv(tracks: &[ProsodyTrack], norm: &NormStats) -> CvReport {
    assert!(!tracks.is_empty(), "empty track set");
    let mut cp = 0.0;
    let mut ce = 0.0;
    for t in tracks {
        let pitch: Vec<f64> = t.pitch.iter().map(|&p| p * norm.pitch_std + norm.pitch_mean).collect();
        let energy: Vec<f64> =
            t.energy.iter().map(|&e| e * norm.energy_std + norm.energy_mean).collect();
        let pm = math::mean(&pitch);
        let em = math::mean(&energy);
        assert!(pm != 0.0 && em != 0.0, "zero mean in coefficient of variation");
        cp += math::std_dev(&pitch) / pm;
        ce += math::std_dev(&energy) / em;
    }
    let n = tracks.len() as f64;
    let cv_pitch = cp / n;
    let cv_energy = ce / n;
    CvReport { cv_pitch, cv_energy, cv_sum: cv_pitch + cv_energy }
}

// ── Prompt similarity ───────────────────────────────────────────────────

/// Summary statistics of one track used for prompt-similarity correlation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackStats {
    pub pitch_mean: f64,
    pub pitch_std: f64,
    pub energy_mean: f64,
    pub energy_std: f64,
    /// Frames per phoneme.
    pub speaking_rate: f64,
}

pub fn track_stats(t: &ProsodyTrack) -> TrackStats {
    TrackStats {
        pitch_mean: math::mean(&t.pitch),
        pitch_std: math::std_dev(&t.pitch),
        energy_mean: math::mean(&t.energy),
        energy_std: math::std_dev(&t.energy),
        speaking_rate: t.frames() as f64 / t.num_phonemes() as f64,
    }
}

pub const SIMILARITY_STATS: [&str; 5] =
    ["pitch_mean", "pitch_std", "energy_mean", "energy_std", "speaking_rate"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimilarityReport {
    /// Pearson r per statistic, ordered as `SIMILARITY_STATS`.
    pub r: [f64; 5],
}

/// Pearson correlation per summary statistic between prompts and synthesized
/// tracks, across the evaluation set. Needs at least 3 pairs.
pub fn prompt_similarity(pairs: &[(TrackStats, TrackStats)]) -> SimilarityReport {
    assert!(pairs.len() >= 3, "need at least 3 pairs, got {}", pairs.len());
    let col = |f: fn(&TrackStats) -> f64| -> (Vec<f64>, Vec<f64>) {
        (pairs.iter().map(|(a, _)| f(a)).collect(), pairs.iter().map(|(_, b)| f(b)).collect())
    };
    let fields: [fn(&TrackStats) -> f64; 5] = [
        |s| s.pitch_mean,
        |s| s.pitch_std,
        |s| s.energy_mean,
        |s| s.energy_std,
        |s| s.speaking_rate,
    ];
    let mut r = [0.0; 5];
    for (i, f) in fields.iter().enumerate() {
        let (xs, ys) = col(*f);
        r[i] = pearson(&xs, &ys);
    }
    SimilarityReport { r }
}

// ── Rank statistics ─────────────────────────────────────────────────────

/// Pearson correlation coefficient; 0 when either side is constant.
pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    assert!(xs.len() >= 2, "need at least 2 points");
    let mx = math::mean(xs);
    let my = math::mean(ys);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    (sxy / math::sqrt(sxx * syy)).clamp(-1.0, 1.0)
}

/// Ranks with ties averaged.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("NaN in rank input"));
    let mut out = alloc::vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (Pearson over average ranks).
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    pearson(&ranks(xs), &ranks(ys))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Prng;

    fn gaussian_set(rng: &mut Prng, n: usize, rows: usize, cols: usize, std: f64, mean: f64) -> Vec<Tensor> {
        (0..n)
            .map(|_| {
                Tensor::matrix(rows, cols, (0..rows * cols).map(|_| mean + std * rng.gaussian()).collect())
            })
            .collect()
    }

    #[test]
    fn sigma_error_self_comparison_small() {
        let mut rng = Prng::seed(170);
        let data = gaussian_set(&mut rng, 10_000, 1, 8, 1.0, 0.0);
        // Two disjoint halves of the same distribution.
        let err = sigma_error(&data[..5000], &data[5000..]);
        assert!(err < 0.05, "self comparison sigma_error {err}");
    }

    #[test]
    fn sigma_error_degenerate_samples_is_one() {
        let mut rng = Prng::seed(171);
        let data = gaussian_set(&mut rng, 2000, 1, 8, 1.0, 0.0);
        let zeros: Vec<Tensor> = (0..100).map(|_| Tensor::zeros(&[1, 8])).collect();
        let err = sigma_error(&data, &zeros);
        assert!((err - 1.0).abs() < 0.05, "got {err}");
    }

    #[test]
    fn sigma_error_double_std_is_one() {
        let mut rng = Prng::seed(172);
        let data = gaussian_set(&mut rng, 5000, 1, 8, 1.0, 0.0);
        let wide = gaussian_set(&mut rng, 5000, 1, 8, 2.0, 0.0);
        let err = sigma_error(&data, &wide);
        assert!((err - 1.0).abs() < 0.05, "got {err}");
    }

    #[test]
    fn sigma_error_scale_covariant_exactly() {
        let mut rng = Prng::seed(173);
        let data = gaussian_set(&mut rng, 500, 2, 4, 1.0, 0.3);
        let c = 1.7;
        let scaled: Vec<Tensor> = data.iter().map(|t| t.scale(c)).collect();
        let err = sigma_error(&data, &scaled);
        assert!((err - (c - 1.0)).abs() < 1e-12, "got {err}");
    }

    #[test]
    #[should_panic(expected = "sigma_data is zero")]
    fn sigma_error_rejects_zero_data_std() {
        let zeros: Vec<Tensor> = (0..10).map(|_| Tensor::zeros(&[1, 4])).collect();
        sigma_error(&zeros.clone(), &zeros);
    }

    #[test]
    fn cv_of_constant_track_is_zero() {
        let t = ProsodyTrack::new(alloc::vec![0.0; 6], alloc::vec![0.0; 6], alloc::vec![3, 3]).unwrap();
        let norm = NormStats { pitch_mean: 5.0, pitch_std: 1.0, energy_mean: 2.0, energy_std: 1.0 };
        let r = expressiveness_cv(&[t], &norm);
        assert_eq!(r.cv_pitch, 0.0);
        assert_eq!(r.cv_energy, 0.0);
        assert_eq!(r.cv_sum, 0.0);
    }

    #[test]
    fn cv_of_two_point_track() {
        // De-normalized values {1, 3}: std 1, mean 2 -> CV 0.5.
        let t = ProsodyTrack::new(alloc::vec![1.0, 3.0], alloc::vec![1.0, 3.0], alloc::vec![1, 1]).unwrap();
        let norm = NormStats { pitch_mean: 0.0, pitch_std: 1.0, energy_mean: 0.0, energy_std: 1.0 };
        let r = expressiveness_cv(&[t], &norm);
        assert!((r.cv_pitch - 0.5).abs() < 1e-12);
        assert!((r.cv_sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn prompt_similarity_perfect_match_is_one() {
        let mut rng = Prng::seed(174);
        let pairs: Vec<(TrackStats, TrackStats)> = (0..10)
            .map(|_| {
                let s = TrackStats {
                    pitch_mean: rng.gaussian(),
                    pitch_std: rng.uniform() + 0.1,
                    energy_mean: rng.gaussian(),
                    energy_std: rng.uniform() + 0.1,
                    speaking_rate: rng.uniform() * 5.0 + 1.0,
                };
                (s, s)
            })
            .collect();
        let rep = prompt_similarity(&pairs);
        for (i, &r) in rep.r.iter().enumerate() {
            assert!((r - 1.0).abs() < 1e-12, "{}: {r}", SIMILARITY_STATS[i]);
        }
    }

    #[test]
    fn prompt_similarity_independent_pairs_small_r() {
        let mut rng = Prng::seed(175);
        let mk = |rng: &mut Prng| TrackStats {
            pitch_mean: rng.gaussian(),
            pitch_std: rng.uniform() + 0.1,
            energy_mean: rng.gaussian(),
            energy_std: rng.uniform() + 0.1,
            speaking_rate: rng.uniform() * 5.0 + 1.0,
        };
        let pairs: Vec<(TrackStats, TrackStats)> =
            (0..200).map(|_| (mk(&mut rng), mk(&mut rng))).collect();
        let rep = prompt_similarity(&pairs);
        for &r in &rep.r {
            assert!((-1.0..=1.0).contains(&r));
            assert!(r.abs() < 0.3, "independent stats correlated: {r}");
        }
    }

    #[test]
    #[should_panic(expected = "at least 3 pairs")]
    fn prompt_similarity_needs_three_pairs() {
        let s = TrackStats {
            pitch_mean: 0.0,
            pitch_std: 1.0,
            energy_mean: 0.0,
            energy_std: 1.0,
            speaking_rate: 2.0,
        };
        prompt_similarity(&[(s, s), (s, s)]);
    }

    #[test]
    fn spearman_detects_monotone_relations() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let inc = [10.0, 20.0, 25.0, 100.0];
        let dec = [5.0, 4.0, 3.0, 1.0];
        assert_eq!(spearman(&xs, &inc), 1.0);
        assert_eq!(spearman(&xs, &dec), -1.0);
        // Ties average.
        let tied = [1.0, 1.0, 2.0, 3.0];
        let s = spearman(&xs, &tied);
        assert!(s > 0.9 && s <= 1.0);
    }

    #[test]
    fn pearson_constant_input_is_zero() {
        assert_eq!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), 0.0);
    }
}
