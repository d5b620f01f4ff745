//! Feature-space augmentation: time/frequency masking and additive noise.
//! Both are off by default so the student sees exactly the features the
//! teacher labels were computed from.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecAugPolicy {
    pub n_time_masks: usize,
    pub max_time_width: usize,
    pub n_freq_masks: usize,
    pub max_freq_width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoisePolicy {
    pub snr_db: f64,
    #[serde(default = "default_clips")]
    pub clips: usize,
    #[serde(default = "default_clip_frames")]
    pub clip_frames: usize,
}

fn default_clips() -> usize {
    8
}

fn default_clip_frames() -> usize {
    128
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub spec_augment: Option<SpecAugPolicy>,
    pub noise: Option<NoisePolicy>,
}

impl AugmentPolicy {
    pub fn is_identity(&self) -> bool {
        self.spec_augment.is_none() && self.noise.is_none()
    }
}

/// Masks random time and frequency bands, filling them with the utterance's
/// global feature mean. Widths are drawn uniformly from `0..=max_width`
/// (clamped to the axis length).
pub fn spec_augment(x: &Tensor, policy: &SpecAugPolicy, seed: u64) -> Tensor {
    let (t, f) = (x.rows(), x.cols());
    if t == 0 || f == 0 {
        return x.clone();
    }
    let mean = x.data().iter().sum::<f64>() / x.numel() as f64;
    let mut out = x.clone();
    let mut g = rng::stream(seed, &[0x5A]);
    let data = out.data_mut();
    for _ in 0..policy.n_time_masks {
        let w = g.gen_range(0..=policy.max_time_width.min(t));
        let start = g.gen_range(0..=t - w);
        for r in start..start + w {
            data[r * f..(r + 1) * f].fill(mean);
        }
    }
    for _ in 0..policy.n_freq_masks {
        let w = g.gen_range(0..=policy.max_freq_width.min(f));
        let start = g.gen_range(0..=f - w);
        for r in 0..t {
            data[r * f + start..r * f + start + w].fill(mean);
        }
    }
    out
}

/// Adds a noise segment scaled so that `10 log10(E_signal / E_noise) = snr_db`.
/// `None` or `+inf` leaves the features untouched. A silent input uses unit
/// mean energy per cell as its reference.
pub fn noise_mix(x: &Tensor, bank: &[Tensor], snr_db: Option<f64>, seed: u64) -> Result<Tensor> {
    let snr = match snr_db {
        None => return Ok(x.clone()),
        Some(s) if s == f64::INFINITY => return Ok(x.clone()),
        Some(s) if !s.is_finite() => return Err(DataError::Invalid(format!("snr {s} dB is not finite"))),
        Some(s) => s,
    };
    if bank.is_empty() {
        return Err(DataError::Invalid("noise bank is empty".into()));
    }
    let (t, f) = (x.rows(), x.cols());
    let mut g = rng::stream(seed, &[0x1015E]);
    let clip = &bank[g.gen_range(0..bank.len())];
    if clip.cols() != f || clip.rows() == 0 {
        return Err(DataError::Invalid(format!(
            "noise clip shape {:?} incompatible with features {:?}",
            clip.shape(),
            x.shape()
        )));
    }
    let offset = g.gen_range(0..clip.rows());
    let noise: Vec<f64> = (0..t)
        .flat_map(|r| clip.row((offset + r) % clip.rows()).iter().copied())
        .collect();
    let e_sig: f64 = x.data().iter().map(|v| v * v).sum();
    let e_noise: f64 = noise.iter().map(|v| v * v).sum();
    if e_noise == 0.0 {
        return Ok(x.clone());
    }
    let reference = if e_sig > 0.0 { e_sig } else { x.numel() as f64 };
    let scale = (reference / (e_noise * 10f64.powf(snr / 10.0))).sqrt();
    let data = x.data().iter().zip(&noise).map(|(a, n)| a + scale * n).collect();
    Ok(Tensor::new(x.shape().to_vec(), data).expect("shape"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn rand_tensor(t: usize, f: usize, seed: u64) -> Tensor {
        let mut g = rng::stream(seed, &[]);
        Tensor::new(vec![t, f], (0..t * f).map(|_| g.sample(StandardNormal)).collect()).unwrap()
    }

    #[test]
    fn zero_masks_are_identity() {
        let x = rand_tensor(10, 6, 1);
        let p = SpecAugPolicy {
            n_time_masks: 0,
            max_time_width: 5,
            n_freq_masks: 0,
            max_freq_width: 3,
        };
        assert_eq!(spec_augment(&x, &p, 3), x);
    }

    #[test]
    fn full_width_mask_gives_constant_output() {
        let x = rand_tensor(6, 4, 2);
        let mean = x.data().iter().sum::<f64>() / 24.0;
        let p = SpecAugPolicy {
            n_time_masks: 0,
            max_time_width: 0,
            n_freq_masks: 1,
            max_freq_width: 4,
        };
        let mut hits = 0;
        for seed in 0..200 {
            let y = spec_augment(&x, &p, seed);
            let masked_cols = (0..4).filter(|&c| (0..6).all(|r| y.data()[r * 4 + c] == mean)).count();
            if masked_cols == 4 {
                assert!(y.data().iter().all(|&v| v == mean));
                hits += 1;
            }
        }
        assert!(hits > 0);
    }

    #[test]
    fn masked_cell_count_within_bounds() {
        let x = rand_tensor(40, 20, 3);
        let p = SpecAugPolicy {
            n_time_masks: 2,
            max_time_width: 5,
            n_freq_masks: 2,
            max_freq_width: 3,
        };
        let bound = 2 * 5 * 20 + 2 * 3 * 40;
        for seed in 0..50 {
            let y = spec_augment(&x, &p, seed);
            let changed = x.data().iter().zip(y.data()).filter(|(a, b)| a != b).count();
            assert!(changed <= bound);
            assert_eq!(spec_augment(&x, &p, seed), y);
        }
    }

    #[test]
    fn noise_hits_target_snr() {
        let bank = vec![rand_tensor(16, 8, 4), rand_tensor(7, 8, 5)];
        let x = rand_tensor(30, 8, 6);
        let e_sig: f64 = x.data().iter().map(|v| v * v).sum();
        for (seed, snr) in [(0, 10.0), (1, 0.0), (2, -5.0), (3, 23.5)] {
            let y = noise_mix(&x, &bank, Some(snr), seed).unwrap();
            let e_n: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (b - a) * (b - a)).sum();
            let measured = 10.0 * (e_sig / e_n).log10();
            assert!((measured - snr).abs() < 0.1, "{measured} vs {snr}");
        }
        assert_eq!(noise_mix(&x, &bank, None, 0).unwrap(), x);
        assert_eq!(noise_mix(&x, &bank, Some(f64::INFINITY), 0).unwrap(), x);
        assert!(noise_mix(&x, &[], Some(5.0), 0).is_err());
        assert!(noise_mix(&x, &bank, Some(f64::NAN), 0).is_err());
    }

    #[test]
    fn silent_input_gets_scaled_noise() {
        let bank = vec![rand_tensor(16, 8, 7)];
        let x = Tensor::zeros(&[10, 8]);
        let y = noise_mix(&x, &bank, Some(0.0), 1).unwrap();
        let e: f64 = y.data().iter().map(|v| v * v).sum();
        assert!((e - 80.0).abs() < 1e-9);
    }
}
