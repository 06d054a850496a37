use crate::error::{Error, Result};
use crate::model::ModelParams;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter, plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.numel()])
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// Bias-corrected Adam update from the gradient buffers of `params`.
/// Missing gradients count as zero.
pub fn adam_step(params: &mut ModelParams, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "optimizer state for {} tensors, model has {}",
            state.m.len(),
            params.len()
        )));
    }
    for (name, t) in params.iter() {
        if let Some(g) = t.grad() {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient {} in parameter {name} at flat index {i}",
                    g[i]
                )));
            }
        }
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (i, t) in params.tensors_mut().iter_mut().enumerate() {
        let Some(g) = t.grad().map(<[f64]>::to_vec) else {
            continue;
        };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, x) in t.data_mut().iter_mut().enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *x -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one(value: f64, grad: Option<f64>) -> ModelParams {
        let mut t = Tensor::from_vec(vec![value]).with_grad();
        if let Some(g) = grad {
            t.accumulate_grad(&[g]).unwrap();
        }
        ModelParams::from_entries(vec![("w".into(), t)]).unwrap()
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = one(1.5, Some(0.0));
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &mut s, &AdamConfig::new(0.1)).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.5]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [3.0, -0.02] {
            let mut p = one(0.0, Some(g));
            let mut s = AdamState::new(&p);
            adam_step(&mut p, &mut s, &AdamConfig::new(1e-3)).unwrap();
            let moved = p.get("w").unwrap().data()[0];
            assert!((moved + 1e-3 * g.signum()).abs() < 1e-9, "{moved}");
        }
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut p = one(0.0, Some(f64::NAN));
        let mut s = AdamState::new(&p);
        let msg = adam_step(&mut p, &mut s, &AdamConfig::new(1e-3))
            .unwrap_err()
            .to_string();
        assert!(msg.contains("parameter w"), "{msg}");
    }
}
