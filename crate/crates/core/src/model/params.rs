use std::collections::HashMap;

use super::config::{ModelConfig, EMG_KERNEL};
use crate::error::{Error, Result};
use crate::tensor::{RngState, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    Uniform {
        fan_in: usize,
    },
    Zeros,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

fn weight(name: impl Into<String>, shape: &[usize], fan_in: usize) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        shape: shape.to_vec(),
        init: Init::Uniform { fan_in },
    }
}

fn zeros(name: impl Into<String>, shape: &[usize]) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        shape: shape.to_vec(),
        init: Init::Zeros,
    }
}

fn conv(specs: &mut Vec<ParamSpec>, prefix: &str, cout: usize, cin_per_group: usize, k: usize) {
    specs.push(weight(
        format!("{prefix}.weight"),
        &[cout, cin_per_group, k],
        cin_per_group * k,
    ));
    specs.push(zeros(format!("{prefix}.bias"), &[cout]));
}

/// Ordered manifest of every trainable tensor for `c`.
pub fn param_specs(c: &ModelConfig) -> Vec<ParamSpec> {
    let mut s = Vec::new();
    let (t, d, f) = (c.time_points, c.attn_dim, c.fuse_filters);
    if c.band_attention {
        s.push(zeros("band_logits", &[c.n_bands]));
        let prefixes: Vec<String> = if c.shared_band_attention {
            vec!["band_attn".into()]
        } else {
            (0..c.n_bands).map(|n| format!("band_attn{n}")).collect()
        };
        for p in prefixes {
            for w in ["wq", "wk", "wv"] {
                s.push(weight(format!("{p}.{w}"), &[t, d], t));
            }
            s.push(weight(format!("{p}.wo"), &[d, t], d));
        }
    }
    if c.multiscale {
        for (k, &size) in c.kernel_sizes.iter().enumerate() {
            conv(
                &mut s,
                &format!("ms.branch{k}"),
                f / 4,
                c.eeg_channels,
                size,
            );
        }
    } else {
        conv(&mut s, "ms.branch", f, c.eeg_channels, c.kernel_sizes[1]);
    }
    conv(&mut s, "ms.merge", f, f, 1);
    if c.icscm {
        conv(&mut s, "icscm", f, 1, c.icscm_kernel);
    } else {
        conv(&mut s, "icscm", f, f, c.icscm_kernel);
    }
    if c.se_block {
        let r = f / c.se_reduction_ratio;
        s.push(weight("se.w1", &[r, f], f));
        s.push(weight("se.w2", &[f, r], r));
    }
    if c.emg {
        let g = c.emg_filters;
        for b in 0..c.emg_blocks {
            let cin = if b == 0 { c.emg_channels } else { g };
            conv(&mut s, &format!("emg.block{b}.conv1"), g, cin, EMG_KERNEL);
            conv(&mut s, &format!("emg.block{b}.conv2"), g, g, EMG_KERNEL);
            if cin != g {
                conv(&mut s, &format!("emg.block{b}.skip"), g, cin, 1);
            }
        }
    }
    let (tf, hd) = (c.feature_len(), c.attn_heads * d);
    for w in ["wq", "wk", "wv"] {
        s.push(weight(format!("fuse.{w}"), &[tf, hd], tf));
    }
    s.push(weight("fuse.wo", &[hd, tf], hd));
    let n_tokens = c.fused_channels();
    s.push(weight("head.weight", &[c.n_classes, n_tokens], n_tokens));
    s.push(zeros("head.bias", &[c.n_classes]));
    s
}

/// Named trainable tensors, in manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    pub fn init(c: &ModelConfig, rng: &mut RngState) -> Result<Self> {
        c.validate()?;
        let entries = param_specs(c)
            .into_iter()
            .map(|spec| {
                let n: usize = spec.shape.iter().product();
                let data = match spec.init {
                    Init::Zeros => vec![0.0; n],
                    Init::Uniform { fan_in } => {
                        let bound = 1.0 / (fan_in as f64).sqrt();
                        (0..n).map(|_| rng.uniform_range(-bound, bound)).collect()
                    }
                };
                Ok((spec.name, Tensor::new(&spec.shape, data)?.with_grad()))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_entries(entries)
    }

    /// Builds from `(name, tensor)` pairs; every tensor becomes trainable.
    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut names = Vec::with_capacity(entries.len());
        let mut tensors = Vec::with_capacity(entries.len());
        let mut index = HashMap::new();
        for (i, (name, mut t)) in entries.into_iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate parameter {name}")));
            }
            t.set_requires_grad(true);
            names.push(name);
            tensors.push(t);
        }
        Ok(Self {
            names,
            tensors,
            index,
        })
    }

    /// Checks names and shapes against the manifest of `c`.
    pub fn check_against(&self, c: &ModelConfig) -> Result<()> {
        let specs = param_specs(c);
        for spec in &specs {
            match self.get(&spec.name) {
                None => {
                    return Err(Error::Config(format!(
                        "checkpoint lacks parameter {}",
                        spec.name
                    )))
                }
                Some(t) if t.shape() != spec.shape.as_slice() => {
                    return Err(Error::Config(format!(
                        "parameter {} has shape {:?}, config expects {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    )))
                }
                _ => {}
            }
        }
        if specs.len() != self.len() {
            let extra: Vec<&str> = self
                .names
                .iter()
                .filter(|n| !specs.iter().any(|s| &s.name == *n))
                .map(String::as_str)
                .collect();
            return Err(Error::Config(format!(
                "checkpoint has unexpected parameters {extra:?}"
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total trainable scalars, by enumeration.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Adds gradients produced by [`BoundParams::grads`].
    pub fn accumulate_grads(&mut self, grads: &[Option<Vec<f64>>]) -> Result<()> {
        if grads.len() != self.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.len()
            )));
        }
        for (t, g) in self.tensors.iter_mut().zip(grads) {
            if let Some(g) = g {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Records every parameter as a gradient-tracked leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams<'_> {
        BoundParams {
            params: self,
            vars: self.tensors.iter().map(|t| tape.leaf(t)).collect(),
        }
    }

    /// Records every parameter as an untracked constant.
    pub fn bind_constant(&self, tape: &mut Tape) -> BoundParams<'_> {
        BoundParams {
            params: self,
            vars: self.tensors.iter().map(|t| tape.constant(t)).collect(),
        }
    }
}

/// Parameters recorded on one tape.
pub struct BoundParams<'a> {
    params: &'a ModelParams,
    vars: Vec<Var>,
}

impl<'a> BoundParams<'a> {
    /// Pairs `params` with variables already on a tape, in manifest order.
    pub fn from_vars(params: &'a ModelParams, vars: Vec<Var>) -> Result<Self> {
        if vars.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} variables for {} parameters",
                vars.len(),
                params.len()
            )));
        }
        Ok(Self { params, vars })
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.params
            .index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Config(format!("model has no parameter {name}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.params.index.contains_key(name)
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients of every parameter on `tape`, in manifest order.
    pub fn grads(&self, tape: &Tape) -> Vec<Option<Vec<f64>>> {
        self.vars
            .iter()
            .map(|&v| tape.grad(v).map(<[f64]>::to_vec))
            .collect()
    }
}
