use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::data_io::TrialSet;
use crate::error::{Error, Result};
use crate::tensor::{RngState, Tensor};

/// Tone frequency carried by class `c`.
pub fn class_tone_hz(c: usize) -> f64 {
    10.0 + 4.0 * c as f64
}

/// Whether EEG channel `ch` carries the tone of class `c`.
pub fn carries_tone(ch: usize, c: usize, n_classes: usize) -> bool {
    ch % n_classes == c
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_trials: usize,
    pub n_classes: usize,
    pub eeg_channels: usize,
    pub emg_channels: usize,
    pub time_points: usize,
    pub fs_hz: f64,
    pub seed: u64,
    /// Linear signal-to-noise power ratio; `f64::INFINITY` disables noise.
    pub snr: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_trials: 300,
            n_classes: 3,
            eeg_channels: 8,
            emg_channels: 2,
            time_points: 500,
            fs_hz: 250.0,
            seed: 7,
            snr: 10.0,
        }
    }
}

/// Balanced labelled trials. Class `c` adds a unit sine at
/// [`class_tone_hz`] on its channel subset and an EMG burst whose centre
/// moves later with `c`; white noise at the requested SNR covers everything.
pub fn make_synthetic(cfg: &SynthConfig) -> Result<TrialSet> {
    let positive = [
        ("n_trials", cfg.n_trials),
        ("n_classes", cfg.n_classes),
        ("eeg_channels", cfg.eeg_channels),
        ("emg_channels", cfg.emg_channels),
        ("time_points", cfg.time_points),
    ];
    if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
        return Err(Error::Config(format!("{name} must be positive")));
    }
    if !(cfg.fs_hz > 0.0) || !(cfg.snr > 0.0) {
        return Err(Error::Config(format!(
            "fs {} and snr {} must be positive",
            cfg.fs_hz, cfg.snr
        )));
    }
    let top = class_tone_hz(cfg.n_classes - 1);
    if top >= cfg.fs_hz / 2.0 {
        return Err(Error::Config(format!(
            "class tone {top} Hz at or above Nyquist for fs {}",
            cfg.fs_hz
        )));
    }
    let (k, c_eeg, c_emg, t) = (
        cfg.n_classes,
        cfg.eeg_channels,
        cfg.emg_channels,
        cfg.time_points,
    );
    let noise_sd = if cfg.snr.is_infinite() {
        0.0
    } else {
        (0.5 / cfg.snr).sqrt()
    };

    let mut rng = RngState::new(cfg.seed);
    let mut labels: Vec<usize> = (0..cfg.n_trials).map(|i| i % k).collect();
    rng.shuffle(&mut labels);

    let mut set = TrialSet::empty(c_eeg, c_emg, t, cfg.fs_hz, k);
    for &label in &labels {
        let f = class_tone_hz(label);
        let mut eeg = vec![0.0; c_eeg * t];
        for ch in 0..c_eeg {
            let row = &mut eeg[ch * t..(ch + 1) * t];
            if carries_tone(ch, label, k) {
                let phase = rng.uniform_range(0.0, 2.0 * PI);
                let amp = rng.uniform_range(0.8, 1.2);
                for (i, v) in row.iter_mut().enumerate() {
                    *v = amp * (2.0 * PI * f * i as f64 / cfg.fs_hz + phase).sin();
                }
            }
            if noise_sd > 0.0 {
                row.iter_mut().for_each(|v| *v += noise_sd * rng.normal());
            }
        }

        let centre = (label + 1) as f64 / (k + 1) as f64 * t as f64;
        let width = t as f64 / (4 * (k + 1)) as f64;
        let mut emg = vec![0.0; c_emg * t];
        for ch in 0..c_emg {
            for (i, v) in emg[ch * t..(ch + 1) * t].iter_mut().enumerate() {
                let z = (i as f64 - centre) / width;
                *v = (-0.5 * z * z).exp() * rng.normal();
                if noise_sd > 0.0 {
                    *v += noise_sd * rng.normal();
                }
            }
        }
        set.push(
            Tensor::new(&[c_eeg, t], eeg)?,
            Tensor::new(&[c_emg, t], emg)?,
            label,
        )?;
    }
    Ok(set)
}

/// Power of `x` at `freq_hz` by a single-bin DFT.
pub fn tone_power(x: &[f64], freq_hz: f64, fs_hz: f64) -> f64 {
    let (mut re, mut im) = (0.0, 0.0);
    for (i, v) in x.iter().enumerate() {
        let w = 2.0 * PI * freq_hz * i as f64 / fs_hz;
        re += v * w.cos();
        im += v * w.sin();
    }
    (re * re + im * im) / (x.len() * x.len()) as f64
}

/// Picks the class whose tone is strongest on its own channels.
pub fn bandpower_classify(eeg: &Tensor, n_classes: usize, fs_hz: f64) -> usize {
    let channels = eeg.shape()[0];
    let score = |c: usize| -> f64 {
        (0..channels)
            .filter(|&ch| carries_tone(ch, c, n_classes))
            .map(|ch| tone_power(eeg.row(ch), class_tone_hz(c), fs_hz))
            .sum()
    };
    (0..n_classes)
        .map(|c| (c, score(c)))
        .fold((0, f64::NEG_INFINITY), |best, (c, s)| {
            if s > best.1 {
                (c, s)
            } else {
                best
            }
        })
        .0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_data_is_separable_by_bandpower() {
        let cfg = SynthConfig {
            n_trials: 90,
            snr: f64::INFINITY,
            ..SynthConfig::default()
        };
        let set = make_synthetic(&cfg).unwrap();
        for (eeg, &y) in set.eeg.iter().zip(&set.labels) {
            assert_eq!(bandpower_classify(eeg, 3, cfg.fs_hz), y);
        }
    }

    #[test]
    fn labels_balanced_and_seeded() {
        let cfg = SynthConfig {
            n_trials: 60,
            ..SynthConfig::default()
        };
        let a = make_synthetic(&cfg).unwrap();
        assert_eq!(a.class_counts(), vec![20, 20, 20]);
        assert_eq!(a, make_synthetic(&cfg).unwrap());
        let b = make_synthetic(&SynthConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a.eeg, b.eeg);
    }

    #[test]
    fn noise_follows_snr() {
        let cfg = SynthConfig {
            n_trials: 30,
            eeg_channels: 6,
            snr: 2.0,
            ..SynthConfig::default()
        };
        let set = make_synthetic(&cfg).unwrap();
        let mut silent = Vec::new();
        for (eeg, &y) in set.eeg.iter().zip(&set.labels) {
            for ch in (0..6).filter(|&ch| !carries_tone(ch, y, 3)) {
                silent.extend_from_slice(eeg.row(ch));
            }
        }
        let var = silent.iter().map(|v| v * v).sum::<f64>() / silent.len() as f64;
        assert!((var - 0.25).abs() < 0.02, "{var}");
    }

    #[test]
    fn rejects_degenerate_requests() {
        assert!(make_synthetic(&SynthConfig {
            n_classes: 0,
            ..SynthConfig::default()
        })
        .is_err());
        assert!(make_synthetic(&SynthConfig {
            fs_hz: 20.0,
            ..SynthConfig::default()
        })
        .is_err());
    }
}
