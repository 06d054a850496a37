//! Building blocks of the network, each expressed over tape variables so the
//! same code serves evaluation and training.

use crate::error::{shape_err, Result};
use crate::tensor::{ConvSpec, Tape, Tensor, Var};

/// Query, key, value and output projections of one attention layer.
#[derive(Clone, Copy, Debug)]
pub struct AttnProj {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Single-head attention `softmax(Q K^T / sqrt(d)) V` over the rows of `q`,
/// `k`, `v`, returning the output and the attention matrix.
fn attend(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let d = tape.shape(q)[1];
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
    let a = tape.softmax(scores, 1)?;
    Ok((tape.matmul(a, v)?, a))
}

/// Channel self-attention on one band `x [C x T]` with a residual.
pub fn channel_attention(tape: &mut Tape, x: Var, p: &AttnProj) -> Result<(Var, Var)> {
    let q = tape.matmul(x, p.wq)?;
    let k = tape.matmul(x, p.wk)?;
    let v = tape.matmul(x, p.wv)?;
    let (o, a) = attend(tape, q, k, v)?;
    let o = tape.matmul(o, p.wo)?;
    Ok((tape.add(x, o)?, a))
}

/// Applies [`channel_attention`] to every band of `x_mb [N_b x C x T]`.
/// `projs` holds either one shared set or one set per band.
pub fn band_channel_attention(
    tape: &mut Tape,
    x_mb: Var,
    projs: &[AttnProj],
) -> Result<(Var, Vec<Var>)> {
    let s = tape.shape(x_mb).to_vec();
    if s.len() != 3 {
        return shape_err(format!("band attention expects [N_b, C, T], got {s:?}"));
    }
    let (nb, c, t) = (s[0], s[1], s[2]);
    if projs.len() != 1 && projs.len() != nb {
        return shape_err(format!("{} projection sets for {nb} bands", projs.len()));
    }
    let mut outs = Vec::with_capacity(nb);
    let mut attn = Vec::with_capacity(nb);
    for n in 0..nb {
        let band = tape.narrow(x_mb, 0, n, 1)?;
        let band = tape.reshape(band, &[c, t])?;
        let (o, a) = channel_attention(tape, band, &projs[n.min(projs.len() - 1)])?;
        outs.push(o);
        attn.push(a);
    }
    let stacked = tape.concat(&outs, 0)?;
    Ok((tape.reshape(stacked, &[nb, c, t])?, attn))
}

/// `sum_n softmax(logits)_n * x_mb[n]`, returning the fused `[C x T]` map and
/// the band weights.
pub fn band_fuse(tape: &mut Tape, x_mb: Var, logits: Var) -> Result<(Var, Var)> {
    let s = tape.shape(x_mb).to_vec();
    if s.len() != 3 || tape.value(logits).len() != s[0] {
        return shape_err(format!(
            "band_fuse of {s:?} with {} logits",
            tape.value(logits).len()
        ));
    }
    let (nb, c, t) = (s[0], s[1], s[2]);
    let w = tape.softmax(logits, 0)?;
    let w_row = tape.reshape(w, &[1, nb])?;
    let flat = tape.reshape(x_mb, &[nb, c * t])?;
    let fused = tape.matmul(w_row, flat)?;
    Ok((tape.reshape(fused, &[c, t])?, w))
}

/// Weight and bias of one convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvParams {
    pub weight: Var,
    pub bias: Var,
}

fn conv_elu(tape: &mut Tape, x: Var, p: &ConvParams, spec: ConvSpec) -> Result<Var> {
    let y = tape.conv1d(x, p.weight, Some(p.bias), spec)?;
    tape.elu(y)
}

/// Parallel same-padded branches, each followed by ELU, concatenated on the
/// channel axis and merged by a 1x1 convolution plus ELU.
pub fn multiscale_fusion(
    tape: &mut Tape,
    x: Var,
    branches: &[ConvParams],
    merge: &ConvParams,
) -> Result<Var> {
    let t = tape.shape(x)[1];
    let mut outs = Vec::with_capacity(branches.len());
    for b in branches {
        let k = *tape.shape(b.weight).last().expect("3-d weight");
        if k > t {
            return shape_err(format!("time_points {t} shorter than kernel {k}"));
        }
        outs.push(conv_elu(tape, x, b, ConvSpec::same())?);
    }
    let cat = tape.concat(&outs, 0)?;
    conv_elu(tape, cat, merge, ConvSpec::same())
}

/// Strided depthwise convolution plus ELU. With `depthwise = false` the same
/// stride is applied by a full convolution instead.
pub fn icscm(
    tape: &mut Tape,
    x: Var,
    p: &ConvParams,
    stride: usize,
    depthwise: bool,
) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if !s[1].is_multiple_of(stride) {
        return shape_err(format!(
            "length {} not divisible by icscm stride {stride}",
            s[1]
        ));
    }
    let groups = if depthwise { s[0] } else { 1 };
    conv_elu(tape, x, p, ConvSpec::same().stride(stride).groups(groups))
}

/// Squeeze-and-excitation: rescales each channel of `x [C x T]` by
/// `sigmoid(w2 sigmoid(w1 mean_t(x)))`. Returns the output and the gate.
pub fn se_block(tape: &mut Tape, x: Var, w1: Var, w2: Var) -> Result<(Var, Var)> {
    let c = tape.shape(x)[0];
    let z = tape.mean_pool_time(x)?;
    let z = tape.reshape(z, &[c, 1])?;
    let h = tape.matmul(w1, z)?;
    let h = tape.sigmoid(h)?;
    let g = tape.matmul(w2, h)?;
    let g = tape.sigmoid(g)?;
    let g = tape.reshape(g, &[c])?;
    Ok((tape.scale_rows(x, g)?, g))
}

#[derive(Clone, Copy, Debug)]
pub struct ResBlockParams {
    pub conv1: ConvParams,
    pub conv2: ConvParams,
    pub skip: Option<ConvParams>,
}

/// `ELU(conv2(ELU(conv1(x))) + skip(x))`.
pub fn res_block(tape: &mut Tape, x: Var, p: &ResBlockParams) -> Result<Var> {
    let h = conv_elu(tape, x, &p.conv1, ConvSpec::same())?;
    let h = tape.conv1d(h, p.conv2.weight, Some(p.conv2.bias), ConvSpec::same())?;
    let skip = match &p.skip {
        Some(s) => tape.conv1d(x, s.weight, Some(s.bias), ConvSpec::same())?,
        None => x,
    };
    let y = tape.add(h, skip)?;
    tape.elu(y)
}

/// Non-overlapping temporal average with window `stride`.
pub fn avg_pool(tape: &mut Tape, x: Var, stride: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if stride == 0 || s[1] < stride || !s[1].is_multiple_of(stride) {
        return shape_err(format!("cannot pool length {} by {stride}", s[1]));
    }
    let kernel = Tensor::full(&[s[0], 1, stride], 1.0 / stride as f64);
    let w = tape.constant(&kernel);
    tape.conv1d(x, w, None, ConvSpec::valid().stride(stride).groups(s[0]))
}

/// Residual EMG blocks followed by pooling to the EEG feature length.
pub fn emg_branch(tape: &mut Tape, x: Var, blocks: &[ResBlockParams], pool: usize) -> Result<Var> {
    let mut h = x;
    for b in blocks {
        h = res_block(tape, h, b)?;
    }
    avg_pool(tape, h, pool)
}

/// Multi-head self-attention over the rows of `x [N x T_f]` with
/// `heads` heads, output projection and residual. Returns per-head
/// attention matrices.
pub fn multihead_attention(
    tape: &mut Tape,
    x: Var,
    p: &AttnProj,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let q = tape.matmul(x, p.wq)?;
    let k = tape.matmul(x, p.wk)?;
    let v = tape.matmul(x, p.wv)?;
    let hd = tape.shape(q)[1];
    if heads == 0 || !hd.is_multiple_of(heads) {
        return shape_err(format!(
            "projection width {hd} not divisible into {heads} heads"
        ));
    }
    let d = hd / heads;
    let mut outs = Vec::with_capacity(heads);
    let mut attn = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.narrow(q, 1, h * d, d)?;
        let kh = tape.narrow(k, 1, h * d, d)?;
        let vh = tape.narrow(v, 1, h * d, d)?;
        let (o, a) = attend(tape, qh, kh, vh)?;
        outs.push(o);
        attn.push(a);
    }
    let cat = if heads == 1 {
        outs[0]
    } else {
        tape.concat(&outs, 1)?
    };
    let o = tape.matmul(cat, p.wo)?;
    Ok((tape.add(x, o)?, attn))
}

/// Channel-axis concatenation `[emg; eeg]` followed by multi-head attention.
pub fn fuse_module(
    tape: &mut Tape,
    eeg: Var,
    emg: Option<Var>,
    p: &AttnProj,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let x = match emg {
        Some(e) => {
            let (te, tg) = (tape.shape(eeg)[1], tape.shape(e)[1]);
            if te != tg {
                return shape_err(format!("EEG features have length {te}, EMG features {tg}"));
            }
            tape.concat(&[e, eeg], 0)?
        }
        None => eeg,
    };
    multihead_attention(tape, x, p, heads)
}
