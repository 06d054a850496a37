use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kernel length of every convolution inside an EMG residual block.
pub const EMG_KERNEL: usize = 7;

/// Architecture hyperparameters. The four `*_enabled`-style switches at the
/// bottom are the ablation toggles; everything else is shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_bands: usize,
    pub eeg_channels: usize,
    pub emg_channels: usize,
    /// Samples per trial after decimation.
    pub time_points: usize,
    pub kernel_sizes: [usize; 4],
    pub fuse_filters: usize,
    pub icscm_stride: usize,
    pub icscm_kernel: usize,
    pub se_reduction_ratio: usize,
    pub attn_heads: usize,
    /// Per-head projection width, shared by band and fuse attention.
    pub attn_dim: usize,
    pub emg_blocks: usize,
    pub emg_filters: usize,
    pub dropout_p: f64,
    pub n_classes: usize,
    /// One set of channel-attention projections for all bands.
    pub shared_band_attention: bool,
    pub se_block: bool,
    pub band_attention: bool,
    pub multiscale: bool,
    pub emg: bool,
    pub icscm: bool,
}

impl Default for ModelConfig {
    /// Full-size layout: 60 EEG + 6 EMG channels, 4 s at 250 Hz, nine bands.
    fn default() -> Self {
        Self {
            n_bands: 9,
            eeg_channels: 60,
            emg_channels: 6,
            time_points: 1000,
            kernel_sizes: [15, 31, 63, 125],
            fuse_filters: 128,
            icscm_stride: 4,
            icscm_kernel: 11,
            se_reduction_ratio: 8,
            attn_heads: 4,
            attn_dim: 16,
            emg_blocks: 2,
            emg_filters: 16,
            dropout_p: 0.25,
            n_classes: 3,
            shared_band_attention: true,
            se_block: true,
            band_attention: true,
            multiscale: true,
            emg: true,
            icscm: true,
        }
    }
}

impl ModelConfig {
    /// Smallest layout that still exercises every block.
    pub fn tiny() -> Self {
        Self {
            n_bands: 2,
            eeg_channels: 3,
            emg_channels: 2,
            time_points: 64,
            kernel_sizes: [3, 5, 7, 9],
            fuse_filters: 16,
            icscm_stride: 4,
            icscm_kernel: 5,
            se_reduction_ratio: 4,
            attn_heads: 2,
            attn_dim: 4,
            emg_blocks: 2,
            emg_filters: 4,
            dropout_p: 0.1,
            n_classes: 3,
            ..Self::default()
        }
    }

    /// Temporal length of the branch features entering the fuse module.
    pub fn feature_len(&self) -> usize {
        self.time_points / self.icscm_stride
    }

    pub fn emg_feature_channels(&self) -> usize {
        if self.emg {
            self.emg_filters
        } else {
            0
        }
    }

    /// Tokens seen by the fuse attention: EEG feature channels plus EMG ones.
    pub fn fused_channels(&self) -> usize {
        self.fuse_filters + self.emg_feature_channels()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let positive = [
            ("n_bands", self.n_bands),
            ("eeg_channels", self.eeg_channels),
            ("emg_channels", self.emg_channels),
            ("time_points", self.time_points),
            ("fuse_filters", self.fuse_filters),
            ("icscm_stride", self.icscm_stride),
            ("icscm_kernel", self.icscm_kernel),
            ("se_reduction_ratio", self.se_reduction_ratio),
            ("attn_heads", self.attn_heads),
            ("attn_dim", self.attn_dim),
            ("emg_filters", self.emg_filters),
        ];
        for (name, v) in positive {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.n_classes < 2 {
            return fail(format!("n_classes {} must be at least 2", self.n_classes));
        }
        if !self.fuse_filters.is_multiple_of(4) {
            return fail(format!(
                "fuse_filters {} must be divisible by 4",
                self.fuse_filters
            ));
        }
        if !self.fuse_filters.is_multiple_of(self.attn_heads) {
            return fail(format!(
                "fuse_filters {} must be divisible by attn_heads {}",
                self.fuse_filters, self.attn_heads
            ));
        }
        if let Some(k) = self.kernel_sizes.iter().find(|k| *k % 2 == 0) {
            return fail(format!("kernel size {k} must be odd"));
        }
        if self.icscm_kernel.is_multiple_of(2) {
            return fail(format!("icscm_kernel {} must be odd", self.icscm_kernel));
        }
        let max_k = *self.kernel_sizes.iter().max().expect("four kernels");
        if self.time_points < max_k {
            return Err(Error::Shape(format!(
                "time_points {} shorter than largest kernel {max_k}",
                self.time_points
            )));
        }
        if !self.time_points.is_multiple_of(self.icscm_stride) {
            return Err(Error::Shape(format!(
                "time_points {} not divisible by icscm_stride {}",
                self.time_points, self.icscm_stride
            )));
        }
        if self.se_block && !self.fuse_filters.is_multiple_of(self.se_reduction_ratio) {
            return fail(format!(
                "se_reduction_ratio {} must divide fuse_filters {}",
                self.se_reduction_ratio, self.fuse_filters
            ));
        }
        if self.emg && self.emg_blocks == 0 {
            return fail("emg_blocks must be positive when the EMG branch is enabled".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail(format!("dropout_p {} not in [0, 1)", self.dropout_p));
        }
        Ok(())
    }
}

/// Switches removed by [`ablate`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Ablation {
    BandAttention,
    Multiscale,
    Emg,
    Icscm,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::BandAttention,
        Ablation::Multiscale,
        Ablation::Emg,
        Ablation::Icscm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::BandAttention => "band_attention",
            Ablation::Multiscale => "multiscale",
            Ablation::Emg => "emg",
            Ablation::Icscm => "icscm",
        }
    }

    /// Every subset of the four switches, the empty set first.
    pub fn all_combinations() -> Vec<BTreeSet<Ablation>> {
        (0u8..16)
            .map(|mask| {
                Self::ALL
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| mask & (1 << i) != 0)
                    .map(|(_, a)| *a)
                    .collect()
            })
            .collect()
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                Error::Usage(format!(
                    "unknown ablation {s:?}; expected one of band_attention, multiscale, emg, icscm"
                ))
            })
    }
}

/// Copy of `config` with the requested blocks switched off.
pub fn ablate<'a>(
    config: &ModelConfig,
    disable: impl IntoIterator<Item = &'a Ablation>,
) -> ModelConfig {
    let mut c = config.clone();
    for a in disable {
        match a {
            Ablation::BandAttention => c.band_attention = false,
            Ablation::Multiscale => c.multiscale = false,
            Ablation::Emg => c.emg = false,
            Ablation::Icscm => c.icscm = false,
        }
    }
    c
}

/// Label for an ablation set, e.g. `full` or `-emg-icscm`.
pub fn variant_name(disabled: &BTreeSet<Ablation>) -> String {
    if disabled.is_empty() {
        "full".into()
    } else {
        disabled.iter().map(|a| format!("-{a}")).collect()
    }
}

/// Trainable scalar count, by closed form.
pub fn param_count(c: &ModelConfig) -> usize {
    let (t, d, h) = (c.time_points, c.attn_dim, c.attn_heads);
    let f = c.fuse_filters;
    let mut n = 0;
    if c.band_attention {
        let sets = if c.shared_band_attention {
            1
        } else {
            c.n_bands
        };
        n += c.n_bands + sets * 4 * t * d;
    }
    n += if c.multiscale {
        c.kernel_sizes
            .iter()
            .map(|s| f / 4 * c.eeg_channels * s + f / 4)
            .sum::<usize>()
    } else {
        f * c.eeg_channels * c.kernel_sizes[1] + f
    };
    n += f * f + f;
    n += if c.icscm {
        f * c.icscm_kernel + f
    } else {
        f * f * c.icscm_kernel + f
    };
    if c.se_block {
        n += 2 * f * (f / c.se_reduction_ratio);
    }
    if c.emg {
        let g = c.emg_filters;
        for b in 0..c.emg_blocks {
            let cin = if b == 0 { c.emg_channels } else { g };
            n += g * cin * EMG_KERNEL + g + g * g * EMG_KERNEL + g;
            if cin != g {
                n += g * cin + g;
            }
        }
    }
    let tf = c.feature_len();
    n += 4 * tf * h * d;
    n += c.n_classes * c.fused_channels() + c.n_classes;
    n
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_and_tiny_validate() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = |f: fn(&mut ModelConfig)| {
            let mut c = ModelConfig::tiny();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.fuse_filters = 18));
        assert!(bad(|c| c.kernel_sizes = [3, 4, 5, 7]));
        assert!(bad(|c| c.time_points = 66));
        assert!(bad(|c| c.attn_heads = 3));
        assert!(bad(|c| c.dropout_p = 1.0));
        assert!(bad(|c| c.se_reduction_ratio = 3));
        assert!(bad(|c| c.n_classes = 1));
    }

    #[test]
    fn ablation_names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        }
        assert!(matches!("se".parse::<Ablation>(), Err(Error::Usage(_))));
        assert_eq!(Ablation::all_combinations().len(), 16);
        assert!(Ablation::all_combinations()[0].is_empty());
    }

    #[test]
    fn ablate_composes() {
        let base = ModelConfig::tiny();
        assert_eq!(ablate(&base, &[]), base);
        let all = ablate(&base, &Ablation::ALL);
        assert!(!all.band_attention && !all.multiscale && !all.emg && !all.icscm);
        let stepwise = Ablation::ALL
            .iter()
            .fold(base.clone(), |c, a| ablate(&c, [a]));
        assert_eq!(stepwise, all);
    }

    #[test]
    fn param_count_monotone_in_fuse_filters() {
        let mut c = ModelConfig::tiny();
        let mut last = 0;
        for f in [8, 16, 24, 32] {
            c.fuse_filters = f;
            let n = param_count(&c);
            assert!(n > last);
            last = n;
        }
    }
}
