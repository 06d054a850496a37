use super::array::Tensor;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Gradients smaller than this are compared in absolute terms; central
/// differences cannot resolve relative error below the round-off floor.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Worst relative error between tape gradients of `f` at `x` and central
/// finite differences with step `eps`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}

/// As [`grad_check`], over several inputs at once (e.g. every model parameter).
#[allow(clippy::needless_range_loop)]
pub fn grad_check_many<F>(f: F, xs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Config(format!(
            "grad_check step {eps} outside [1e-7, 1e-3]"
        )));
    }
    let eval = |inputs: &[Tensor], track: bool| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.set_requires_grad(track);
                tape.leaf(&t)
            })
            .collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };

    let (mut tape, vars, out) = eval(xs, true)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(xs)
        .map(|(&v, x)| {
            tape.grad(v)
                .map_or_else(|| vec![0.0; x.numel()], <[f64]>::to_vec)
        })
        .collect();

    let mut worst = 0.0f64;
    let mut probe = xs.to_vec();
    for (ti, x) in xs.iter().enumerate() {
        for j in 0..x.numel() {
            let orig = x.data()[j];
            probe[ti].data_mut()[j] = orig + eps;
            let (tp, _, op) = eval(&probe, false)?;
            let fp = tp.scalar(op);
            probe[ti].data_mut()[j] = orig - eps;
            let (tm, _, om) = eval(&probe, false)?;
            let fm = tm.scalar(om);
            probe[ti].data_mut()[j] = orig;

            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[ti][j];
            let denom = a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
