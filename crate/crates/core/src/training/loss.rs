use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

fn check_label(tape: &Tape, logits: Var, label: usize) -> Result<usize> {
    let k = tape.value(logits).len();
    if label >= k {
        return Err(Error::Index(format!(
            "label {label} out of range for {k} classes"
        )));
    }
    Ok(k)
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, label: usize) -> Result<Var> {
    check_label(tape, logits, label)?;
    let ls = tape.log_softmax(logits, 0)?;
    let picked = tape.select(ls, label)?;
    tape.scale(picked, -1.0)
}

/// `KL(p1 || p2) + KL(p2 || p1)`, summed as `sum (p1 - p2)(log p1 - log p2)`
/// so every term is non-negative.
pub fn symmetric_kl(tape: &mut Tape, logits1: Var, logits2: Var) -> Result<Var> {
    let ls1 = tape.log_softmax(logits1, 0)?;
    let ls2 = tape.log_softmax(logits2, 0)?;
    let p1 = tape.softmax(logits1, 0)?;
    let p2 = tape.softmax(logits2, 0)?;
    let dp = tape.sub(p1, p2)?;
    let dl = tape.sub(ls1, ls2)?;
    let terms = tape.mul(dp, dl)?;
    tape.sum(terms)
}

/// `(CE1 + CE2) / 2 + alpha / 2 * (KL(p1||p2) + KL(p2||p1))`.
pub fn rdrop_loss(
    tape: &mut Tape,
    logits1: Var,
    logits2: Var,
    label: usize,
    alpha: f64,
) -> Result<Var> {
    let k1 = check_label(tape, logits1, label)?;
    let k2 = tape.value(logits2).len();
    if k1 != k2 {
        return Err(Error::Shape(format!("logit pair of lengths {k1} and {k2}")));
    }
    let ce1 = cross_entropy(tape, logits1, label)?;
    let ce2 = cross_entropy(tape, logits2, label)?;
    let ce = tape.add(ce1, ce2)?;
    let ce = tape.scale(ce, 0.5)?;
    if alpha == 0.0 {
        return Ok(ce);
    }
    let kl = symmetric_kl(tape, logits1, logits2)?;
    let kl = tape.scale(kl, alpha / 2.0)?;
    tape.add(ce, kl)
}
