use super::config::ModelConfig;
use super::layers::{self, AttnProj, ConvParams, ResBlockParams};
use super::params::{BoundParams, ModelParams};
use crate::error::{Error, Result};
use crate::filterbank::{split_bands, FilterBank};
use crate::tensor::{RngState, Tape, Tensor, Var};

/// Hook run on raw EEG before band splitting.
pub trait Denoiser: Send + Sync {
    fn denoise(&self, eeg: &Tensor) -> Result<Tensor>;
}

/// Returns the input unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct PassThrough;

impl Denoiser for PassThrough {
    fn denoise(&self, eeg: &Tensor) -> Result<Tensor> {
        Ok(eeg.clone())
    }
}

/// Denoises `eeg [C x T]` and splits it into `[N_b x C x T]`.
pub fn prepare_eeg(eeg: &Tensor, bank: &FilterBank, denoiser: &dyn Denoiser) -> Result<Tensor> {
    split_bands(&denoiser.denoise(eeg)?, bank)
}

/// Intermediate variables of one forward pass, for inspection in tests and
/// diagnostics.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `softmax(band_logits)`, or the uniform constant when ablated.
    pub band_weights: Var,
    /// One `[C x C]` matrix per band; empty when band attention is ablated.
    pub band_attention: Vec<Var>,
    pub se_gate: Option<Var>,
    /// One `[N x N]` matrix per head.
    pub fuse_attention: Vec<Var>,
    pub eeg_features: Var,
    pub emg_features: Option<Var>,
    /// Temporally pooled fused tokens fed to the classifier.
    pub pooled: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub trace: ForwardTrace,
}

fn conv(p: &BoundParams, prefix: &str) -> Result<ConvParams> {
    Ok(ConvParams {
        weight: p.var(&format!("{prefix}.weight"))?,
        bias: p.var(&format!("{prefix}.bias"))?,
    })
}

fn attn(p: &BoundParams, prefix: &str) -> Result<AttnProj> {
    Ok(AttnProj {
        wq: p.var(&format!("{prefix}.wq"))?,
        wk: p.var(&format!("{prefix}.wk"))?,
        wv: p.var(&format!("{prefix}.wv"))?,
        wo: p.var(&format!("{prefix}.wo"))?,
    })
}

fn expect_shape(tape: &Tape, v: Var, want: &[usize], what: &str) -> Result<()> {
    if tape.shape(v) != want {
        return Err(Error::Config(format!(
            "{what} has shape {:?}, config expects {want:?}",
            tape.shape(v)
        )));
    }
    Ok(())
}

/// Full network from band-split EEG `x_mb [N_b x C x T]` and EMG
/// `[E x T]` to class logits `[n_classes]`.
pub fn forward_bands(
    tape: &mut Tape,
    c: &ModelConfig,
    p: &BoundParams,
    x_mb: Var,
    emg: Var,
    rng: &mut RngState,
    training: bool,
) -> Result<ForwardOutput> {
    let (nb, ch, t) = (c.n_bands, c.eeg_channels, c.time_points);
    expect_shape(tape, x_mb, &[nb, ch, t], "band-split EEG")?;
    expect_shape(tape, emg, &[c.emg_channels, t], "EMG")?;

    let (x_fs, band_weights, band_attention) = if c.band_attention {
        let projs = if c.shared_band_attention {
            vec![attn(p, "band_attn")?]
        } else {
            (0..nb)
                .map(|n| attn(p, &format!("band_attn{n}")))
                .collect::<Result<_>>()?
        };
        let (x_att, maps) = layers::band_channel_attention(tape, x_mb, &projs)?;
        let (fs, w) = layers::band_fuse(tape, x_att, p.var("band_logits")?)?;
        (fs, w, maps)
    } else {
        let uniform = tape.constant(&Tensor::zeros(&[nb]));
        let (fs, w) = layers::band_fuse(tape, x_mb, uniform)?;
        (fs, w, Vec::new())
    };

    let branches = if c.multiscale {
        (0..c.kernel_sizes.len())
            .map(|k| conv(p, &format!("ms.branch{k}")))
            .collect::<Result<Vec<_>>>()?
    } else {
        vec![conv(p, "ms.branch")?]
    };
    let h = layers::multiscale_fusion(tape, x_fs, &branches, &conv(p, "ms.merge")?)?;
    let h = tape.dropout(h, c.dropout_p, rng, training)?;
    let h = layers::icscm(tape, h, &conv(p, "icscm")?, c.icscm_stride, c.icscm)?;
    let (eeg_features, se_gate) = if c.se_block {
        let (y, g) = layers::se_block(tape, h, p.var("se.w1")?, p.var("se.w2")?)?;
        (y, Some(g))
    } else {
        (h, None)
    };

    let emg_features = if c.emg {
        let blocks = (0..c.emg_blocks)
            .map(|b| {
                let prefix = format!("emg.block{b}");
                Ok(ResBlockParams {
                    conv1: conv(p, &format!("{prefix}.conv1"))?,
                    conv2: conv(p, &format!("{prefix}.conv2"))?,
                    skip: if p.has(&format!("{prefix}.skip.weight")) {
                        Some(conv(p, &format!("{prefix}.skip"))?)
                    } else {
                        None
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let g = layers::emg_branch(tape, emg, &blocks, c.icscm_stride)?;
        Some(tape.dropout(g, c.dropout_p, rng, training)?)
    } else {
        None
    };

    let (fused, fuse_attention) = layers::fuse_module(
        tape,
        eeg_features,
        emg_features,
        &attn(p, "fuse")?,
        c.attn_heads,
    )?;
    let n = tape.shape(fused)[0];
    let pooled = tape.mean_pool_time(fused)?;
    let col = tape.reshape(pooled, &[n, 1])?;
    let logits = tape.matmul(p.var("head.weight")?, col)?;
    let logits = tape.reshape(logits, &[c.n_classes])?;
    let logits = tape.add(logits, p.var("head.bias")?)?;

    Ok(ForwardOutput {
        logits,
        trace: ForwardTrace {
            band_weights,
            band_attention,
            se_gate,
            fuse_attention,
            eeg_features,
            emg_features,
            pooled,
        },
    })
}

/// Logits for one trial from band-split EEG, without gradient tracking.
pub fn logits_from_bands(
    c: &ModelConfig,
    params: &ModelParams,
    x_mb: &Tensor,
    emg: &Tensor,
    rng: &mut RngState,
    training: bool,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind_constant(&mut tape);
    let x = tape.constant(x_mb);
    let e = tape.constant(emg);
    let out = forward_bands(&mut tape, c, &bound, x, e, rng, training)?;
    Ok(tape.tensor(out.logits))
}

/// Raw EEG `[C x T]` and EMG `[E x T]` to logits `[n_classes]`.
#[allow(clippy::too_many_arguments)]
pub fn forward(
    eeg: &Tensor,
    emg: &Tensor,
    c: &ModelConfig,
    params: &ModelParams,
    bank: &FilterBank,
    rng: &mut RngState,
    training: bool,
) -> Result<Tensor> {
    if bank.len() != c.n_bands {
        return Err(Error::Config(format!(
            "filter bank has {} bands, config expects {}",
            bank.len(),
            c.n_bands
        )));
    }
    let x_mb = prepare_eeg(eeg, bank, &PassThrough)?;
    logits_from_bands(c, params, &x_mb, emg, rng, training)
}

/// Index of the largest logit; ties go to the lowest class.
pub fn argmax(logits: &[f64]) -> usize {
    logits
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}
