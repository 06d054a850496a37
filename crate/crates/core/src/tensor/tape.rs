//! Reverse-mode gradient tape.
//!
//! Every forward op appends a node holding its value and the information
//! needed to pull gradients back to its inputs. `backward` walks the tape in
//! reverse once and accumulates into the gradient buffers of leaf nodes only,
//! so calling it twice without [`Tape::zero_grad`] doubles leaf gradients.

use super::array::Tensor;
use super::rng::RngState;
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Sigmoid,
    Elu,
    Log,
    Exp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `K - 1` samples split as evenly as possible (left gets
    /// the smaller half), giving `T' = T` at stride 1.
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub padding: Padding,
    pub stride: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn same() -> Self {
        Self {
            padding: Padding::Same,
            stride: 1,
            groups: 1,
        }
    }

    pub fn valid() -> Self {
        Self {
            padding: Padding::Valid,
            stride: 1,
            groups: 1,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    cout: usize,
    t_in: usize,
    t_out: usize,
    k: usize,
    stride: usize,
    groups: usize,
    pad_left: usize,
}

impl ConvGeom {
    /// Output positions `t` for which `t * stride + kk - pad_left` lies in
    /// `0..t_in`.
    fn valid_range(&self, kk: usize) -> (usize, usize) {
        let off = kk as isize - self.pad_left as isize;
        let s = self.stride as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let last = self.t_in as isize - 1 - off;
        let hi = if last < 0 {
            0
        } else {
            (last / s + 1).min(self.t_out as isize)
        };
        (lo as usize, (hi.max(lo)) as usize)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        a: usize,
        rows: usize,
        cols: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        c: f64,
    },
    RowBias {
        x: usize,
        bias: usize,
        cols: usize,
    },
    RowScale {
        x: usize,
        gate: usize,
        cols: usize,
    },
    Conv1d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        geom: ConvGeom,
    },
    Softmax {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LogSoftmax {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Unary {
        a: usize,
        kind: Unary,
    },
    MeanPoolTime {
        a: usize,
        cols: usize,
    },
    Sum {
        a: usize,
    },
    Mask {
        a: usize,
        mask: Vec<f64>,
    },
    Narrow {
        a: usize,
        outer: usize,
        len_in: usize,
        start: usize,
        len: usize,
        inner: usize,
    },
    Concat {
        parts: Vec<(usize, usize)>,
        outer: usize,
        total: usize,
        inner: usize,
    },
    Reshape {
        a: usize,
    },
    Select {
        a: usize,
        index: usize,
    },
}

#[derive(Clone, Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records forward computations and propagates gradients back to leaves.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return shape_err(format!("axis {axis} out of range for shape {shape:?}"));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if let Some(pos) = value.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value {} at flat index {pos} produced by {}",
                value[pos],
                op_name(&op)
            )));
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf; gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
        .expect("tensor values must be finite")
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
            .expect("tensor values must be finite")
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = self.node(v);
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf, false)
            .expect("finite by construction")
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone()).expect("tape shapes are consistent")
    }

    /// Accumulated gradient of a leaf, if any flowed to it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Adds the gradient of leaf `v` into `target`'s buffer.
    pub fn write_grad(&self, v: Var, target: &mut Tensor) -> Result<()> {
        match self.grad(v) {
            Some(g) => target.accumulate_grad(g),
            None => Ok(()),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err(format!("matmul of {sa:?} by {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                for (o, y) in row.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                    *o += x * y;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(
            vec![m, n],
            out,
            Op::MatMul {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
            },
            rg,
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return shape_err(format!("transpose of non-matrix {s:?}"));
        }
        let (rows, cols) = (s[0], s[1]);
        let av = self.value(a);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = av[r * cols + c];
            }
        }
        let rg = self.rg(a);
        self.push(
            vec![cols, rows],
            out,
            Op::Transpose { a: a.0, rows, cols },
            rg,
        )
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!(
                "{what} of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(self.shape(a).to_vec(), out, Op::Add { a: a.0, b: b.0 }, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(self.shape(a).to_vec(), out, Op::Sub { a: a.0, b: b.0 }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(self.shape(a).to_vec(), out, Op::Mul { a: a.0, b: b.0 }, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::Scale { a: a.0, c }, rg)
    }

    /// `x [R, C] + bias[r]` broadcast over columns.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || self.value(bias).len() != s[0] {
            return shape_err(format!("row bias {:?} for {s:?}", self.shape(bias)));
        }
        let cols = s[1];
        let bv = self.value(bias);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv[i / cols])
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        self.push(
            s,
            out,
            Op::RowBias {
                x: x.0,
                bias: bias.0,
                cols,
            },
            rg,
        )
    }

    /// `x [R, C] * gate[r]`: per-row rescaling.
    pub fn scale_rows(&mut self, x: Var, gate: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || self.value(gate).len() != s[0] {
            return shape_err(format!("row gate {:?} for {s:?}", self.shape(gate)));
        }
        let cols = s[1];
        let gv = self.value(gate);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v * gv[i / cols])
            .collect();
        let rg = self.rg(x) || self.rg(gate);
        self.push(
            s,
            out,
            Op::RowScale {
                x: x.0,
                gate: gate.0,
                cols,
            },
            rg,
        )
    }

    /// 1-D cross-correlation (no kernel flip) of `input [C_in, T]` with
    /// `weight [C_out, C_in / groups, K]`.
    pub fn conv1d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    ) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        if si.len() != 2 || sw.len() != 3 {
            return shape_err(format!("conv1d input {si:?} weight {sw:?}"));
        }
        let (cin, t_in) = (si[0], si[1]);
        let (cout, cin_g, k) = (sw[0], sw[1], sw[2]);
        if spec.groups == 0 || cin % spec.groups != 0 || cout % spec.groups != 0 {
            return Err(Error::Config(format!(
                "groups {} must divide C_in {cin} and C_out {cout}",
                spec.groups
            )));
        }
        if spec.stride == 0 {
            return Err(Error::Config("conv1d stride must be positive".into()));
        }
        if cin_g != cin / spec.groups {
            return shape_err(format!(
                "conv1d weight {sw:?} expects {} input channels per group, input has {cin} over {} groups",
                cin_g, spec.groups
            ));
        }
        if let Some(b) = bias {
            if self.value(b).len() != cout {
                return shape_err(format!(
                    "conv1d bias {:?} for {cout} outputs",
                    self.shape(b)
                ));
            }
        }
        let (pl, pr) = match spec.padding {
            Padding::Same => ((k - 1) / 2, k - 1 - (k - 1) / 2),
            Padding::Valid => (0, 0),
        };
        let padded = t_in + pl + pr;
        if k > padded {
            return shape_err(format!("kernel {k} longer than padded input {padded}"));
        }
        let t_out = (padded - k) / spec.stride + 1;
        let geom = ConvGeom {
            cin,
            cout,
            t_in,
            t_out,
            k,
            stride: spec.stride,
            groups: spec.groups,
            pad_left: pl,
        };
        let xv = self.value(input);
        let wv = self.value(weight);
        let mut out = vec![0.0; cout * t_out];
        if let Some(b) = bias {
            let bv = self.value(b);
            for o in 0..cout {
                out[o * t_out..(o + 1) * t_out]
                    .iter_mut()
                    .for_each(|v| *v = bv[o]);
            }
        }
        let cout_g = cout / spec.groups;
        for o in 0..cout {
            let grp = o / cout_g;
            let orow = &mut out[o * t_out..(o + 1) * t_out];
            for ci in 0..cin_g {
                let c = grp * cin_g + ci;
                let xrow = &xv[c * t_in..(c + 1) * t_in];
                for kk in 0..k {
                    let w = wv[(o * cin_g + ci) * k + kk];
                    if w == 0.0 {
                        continue;
                    }
                    let (lo, hi) = geom.valid_range(kk);
                    if lo >= hi {
                        continue;
                    }
                    let start = lo * spec.stride + kk - pl;
                    if spec.stride == 1 {
                        for (y, x) in orow[lo..hi].iter_mut().zip(&xrow[start..start + (hi - lo)]) {
                            *y += w * x;
                        }
                    } else {
                        for (j, y) in orow[lo..hi].iter_mut().enumerate() {
                            *y += w * xrow[start + j * spec.stride];
                        }
                    }
                }
            }
        }
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        self.push(
            vec![cout, t_out],
            out,
            Op::Conv1d {
                input: input.0,
                weight: weight.0,
                bias: bias.map(|b| b.0),
                geom,
            },
            rg,
        )
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis)?;
        let out = softmax_values(self.value(a), outer, len, inner, false);
        let rg = self.rg(a);
        self.push(
            shape,
            out,
            Op::Softmax {
                a: a.0,
                outer,
                len,
                inner,
            },
            rg,
        )
    }

    /// Log-sum-exp stabilised log-softmax along `axis`.
    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis)?;
        let out = softmax_values(self.value(a), outer, len, inner, true);
        let rg = self.rg(a);
        self.push(
            shape,
            out,
            Op::LogSoftmax {
                a: a.0,
                outer,
                len,
                inner,
            },
            rg,
        )
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Result<Var> {
        let xv = self.value(a);
        if kind == Unary::Log {
            if let Some(pos) = xv.iter().position(|&x| x <= 0.0) {
                return Err(Error::Domain(format!(
                    "log of non-positive value {} at flat index {pos}",
                    xv[pos]
                )));
            }
        }
        let out = xv
            .iter()
            .map(|&x| match kind {
                Unary::Relu => x.max(0.0),
                Unary::Sigmoid => sigmoid(x),
                Unary::Elu => {
                    if x > 0.0 {
                        x
                    } else {
                        x.exp_m1()
                    }
                }
                Unary::Log => x.ln(),
                Unary::Exp => x.exp(),
            })
            .collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::Unary { a: a.0, kind }, rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn elu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Elu)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Log)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Exp)
    }

    /// Per-row temporal mean: `[C, T] -> [C]`.
    pub fn mean_pool_time(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return shape_err(format!("mean_pool_time expects [C, T], got {s:?}"));
        }
        let (rows, cols) = (s[0], s[1]);
        if cols == 0 {
            return shape_err("empty time axis");
        }
        let av = self.value(a);
        let out = (0..rows)
            .map(|r| av[r * cols..(r + 1) * cols].iter().sum::<f64>() / cols as f64)
            .collect();
        let rg = self.rg(a);
        self.push(vec![rows], out, Op::MeanPoolTime { a: a.0, cols }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Sum { a: a.0 }, rg)
    }

    /// Inverted dropout: zeroes with probability `p` and rescales survivors
    /// by `1 / (1 - p)`. Identity when `p == 0` or not training.
    pub fn dropout(&mut self, a: Var, p: f64, rng: &mut RngState, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!(
                "dropout probability {p} not in [0, 1)"
            )));
        }
        if !training || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.uniform() < p { 0.0 } else { keep })
            .collect();
        let out = self
            .value(a)
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::Mask { a: a.0, mask }, rg)
    }

    /// Sub-range `start..start + len` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (outer, len_in, inner) = axis_split(&shape, axis)?;
        if len == 0 || start + len > len_in {
            return shape_err(format!(
                "narrow {start}..{} out of range for axis {axis} of {shape:?}",
                start + len
            ));
        }
        let av = self.value(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * len_in * inner;
            out.extend_from_slice(&av[base + start * inner..base + (start + len) * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let rg = self.rg(a);
        self.push(
            new_shape,
            out,
            Op::Narrow {
                a: a.0,
                outer,
                len_in,
                start,
                len,
                inner,
            },
            rg,
        )
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let base = self.shape(first).to_vec();
        let (outer, _, inner) = axis_split(&base, axis)?;
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return shape_err(format!("concat along axis {axis} of {base:?} and {s:?}"));
            }
            lens.push((p.0, s[axis]));
        }
        let total: usize = lens.iter().map(|&(_, l)| l).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &(p, l) in &lens {
                let v = &self.nodes[p].value;
                out.extend_from_slice(&v[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            shape,
            out,
            Op::Concat {
                parts: lens,
                outer,
                total,
                inner,
            },
            rg,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).len() || shape.contains(&0) {
            return shape_err(format!("cannot reshape {:?} into {shape:?}", self.shape(a)));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(a);
        self.push(shape.to_vec(), out, Op::Reshape { a: a.0 }, rg)
    }

    /// Single element at flat `index`, as a scalar.
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var> {
        let n = self.value(a).len();
        if index >= n {
            return Err(Error::Index(format!(
                "index {index} out of range for {n} elements"
            )));
        }
        let v = self.value(a)[index];
        let rg = self.rg(a);
        self.push(vec![1], vec![v], Op::Select { a: a.0, index }, rg)
    }

    /// Propagates `d loss / d leaf` into every reachable gradient-tracked leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return shape_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        fn buf<'a>(
            grads: &'a mut [Option<Vec<f64>>],
            nodes: &[Node],
            i: usize,
        ) -> Option<&'a mut Vec<f64>> {
            if !nodes[i].requires_grad {
                return None;
            }
            Some(grads[i].get_or_insert_with(|| vec![0.0; nodes[i].value.len()]))
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    let target = self.leaf_grads[i].get_or_insert_with(|| vec![0.0; g.len()]);
                    target.iter_mut().zip(&g).for_each(|(t, v)| *t += v);
                }
                &Op::MatMul { a, b, m, k, n } => {
                    let bv = &nodes[b].value;
                    if let Some(ga) = buf(&mut grads, nodes, a) {
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for p in 0..k {
                                let brow = &bv[p * n..(p + 1) * n];
                                ga[r * k + p] +=
                                    grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    }
                    let av = &nodes[a].value;
                    if let Some(gb) = buf(&mut grads, nodes, b) {
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for p in 0..k {
                                let x = av[r * k + p];
                                for (o, y) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *o += x * y;
                                }
                            }
                        }
                    }
                }
                &Op::Transpose { a, rows, cols } => {
                    if let Some(ga) = buf(&mut grads, nodes, a) {
                        for r in 0..rows {
                            for c in 0..cols {
                                ga[r * cols + c] += g[c * rows + r];
                            }
                        }
                    }
                }
                &Op::Add { a, b } => {
                    if let Some(ga) = buf(&mut grads, nodes, a) {
                        ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                    }
                    if let Some(gb) = buf(&mut grads, nodes, b) {
                        gb.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                    }
                }
                &Op::Sub { a, b } => {
                    if let Some(ga) = buf(&mut grads, nodes, a) {
                        ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                    }
                    if let Some(gb) = buf(&mut grads, nodes, b) {
                        gb.iter_mut().zip(&g).for_each(|(x, y)| *x -= y);
                    }
                }
                &Op::Mul { a, b } => {
                    let (av, bv) = (&nodes[a].value, &nodes[b].value);
                    if let Some(ga) = buf(&mut grads, nodes, a) {
                        for ((x, gy), bb) in ga.iter_mut().zip(&g).zip(bv) {
                            *x += gy * bb;
                        }
                    }
                    if let Some(gb) = buf(&mut grads, nodes, b) {
                        for ((x, gy), aa) in gb.iter_mut().zip(&g).zip(av) {
                            *x += gy * aa;
                        }
                    }
                }
                &Op::Scale { a, c } => {
                    if let Some(ga) = buf(&mut grads, nodes, a) {
                        ga.iter_mut().zip(&g).for_each(|(x, y)| *x += c * y);
                    }
                }
                &Op::RowBias { x, bias, cols } => {
                    if let Some(gx) = buf(&mut grads, nodes, x) {
                        gx.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                    }
                    if let Some(gb) = buf(&mut grads, nodes, bias) {
                        for (r, gr) in gb.iter_mut().enumerate() {
                            *gr += g[r * cols..(r + 1) * cols].iter().sum::<f64>();
                        }
                    }
                }
                &Op::RowScale { x, gate, cols } => {
                    let (xv, sv) = (&nodes[x].value, &nodes[gate].value);
                    if let Some(gx) = buf(&mut grads, nodes, x) {
                        for (j, a) in gx.iter_mut().enumerate() {
                            *a += g[j] * sv[j / cols];
                        }
                    }
                    if let Some(gs) = buf(&mut grads, nodes, gate) {
                        for (r, a) in gs.iter_mut().enumerate() {
                            let span = r * cols..(r + 1) * cols;
                            *a += g[span.clone()]
                                .iter()
                                .zip(&xv[span])
                                .map(|(p, q)| p * q)
                                .sum::<f64>();
                        }
                    }
                }
                &Op::Conv1d {
                    input,
                    weight,
                    bias,
                    geom,
                } => {
                    conv1d_backward(&g, nodes, &mut grads, input, weight, bias, geom);
                }
                &Op::Softmax {
                    a,
                    outer,
                    len,
                    inner,
                } => {
                    let y = &node.value;
                    if let Some(ga) = buf(&mut grads, nodes, a) {
                        for o in 0..outer {
                            for j in 0..inner {
                                let idx = |l: usize| (o * len + l) * inner + j;
                                let dot: f64 = (0..len).map(|l| g[idx(l)] * y[idx(l)]).sum();
                                for l in 0..len {
                                    ga[idx(l)] += y[idx(l)] * (g[idx(l)] - dot);
                                }
                            }
                        }
                    }
                }
                &Op::LogSoftmax {
                    a,
                    outer,
                    len,
                    inner,
                } => {
                    let y = &node.value;
                    if let Some(ga) = buf(&mut grads, nodes, a) {
                        for o in 0..outer {
                            for j in 0..inner {
                                let idx = |l: usize| (o * len + l) * inner + j;
                                let total: f64 = (0..len).map(|l| g[idx(l)]).sum();
                                for l in 0..len {
                                    ga[idx(l)] += g[idx(l)] - y[idx(l)].exp() * total;
                                }
                            }
                        }
                    }
                }
                &Op::Unary { a, kind } => {
                    let (xv, yv) = (&nodes[a].value, &node.value);
                    if let Some(ga) = buf(&mut grads, nodes, a) {
                        for j in 0..ga.len() {
                            let d = match kind {
                                Unary::Relu => {
                                    if xv[j] > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Unary::Sigmoid => yv[j] * (1.0 - yv[j]),
                                Unary::Elu => {
                                    if xv[j] > 0.0 {
                                        1.0
                                    } else {
                                        yv[j] + 1.0
                                    }
                                }
                                Unary::Log => 1.0 / xv[j],
                                Unary::Exp => yv[j],
                            };
                            ga[j] += g[j] * d;
                        }
                    }
                }
                &Op::MeanPoolTime { a, cols } => {
                    if let Some(ga) = buf(&mut grads, nodes, a) {
                        let inv = 1.0 / cols as f64;
                        for (j, x) in ga.iter_mut().enumerate() {
                            *x += g[j / cols] * inv;
                        }
                    }
                }
                &Op::Sum { a } => {
                    if let Some(ga) = buf(&mut grads, nodes, a) {
                        ga.iter_mut().for_each(|x| *x += g[0]);
                    }
                }
                Op::Mask { a, mask } => {
                    if let Some(ga) = buf(&mut grads, nodes, *a) {
                        for ((x, gy), m) in ga.iter_mut().zip(&g).zip(mask) {
                            *x += gy * m;
                        }
                    }
                }
                &Op::Narrow {
                    a,
                    outer,
                    len_in,
                    start,
                    len,
                    inner,
                } => {
                    if let Some(ga) = buf(&mut grads, nodes, a) {
                        for o in 0..outer {
                            let dst = o * len_in * inner + start * inner;
                            let src = o * len * inner;
                            for (x, y) in ga[dst..dst + len * inner]
                                .iter_mut()
                                .zip(&g[src..src + len * inner])
                            {
                                *x += y;
                            }
                        }
                    }
                }
                Op::Concat {
                    parts,
                    outer,
                    total,
                    inner,
                } => {
                    let mut offset = 0;
                    for &(p, l) in parts {
                        if let Some(gp) = buf(&mut grads, nodes, p) {
                            for o in 0..*outer {
                                let src = (o * total + offset) * inner;
                                let dst = o * l * inner;
                                for (x, y) in gp[dst..dst + l * inner]
                                    .iter_mut()
                                    .zip(&g[src..src + l * inner])
                                {
                                    *x += y;
                                }
                            }
                        }
                        offset += l;
                    }
                }
                &Op::Reshape { a } => {
                    if let Some(ga) = buf(&mut grads, nodes, a) {
                        ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                    }
                }
                &Op::Select { a, index } => {
                    if let Some(ga) = buf(&mut grads, nodes, a) {
                        ga[index] += g[0];
                    }
                }
            }
        }
        Ok(())
    }
}

fn conv1d_backward(
    g: &[f64],
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    input: usize,
    weight: usize,
    bias: Option<usize>,
    geom: ConvGeom,
) {
    let ConvGeom {
        cin,
        cout,
        t_in,
        t_out,
        k,
        stride,
        groups,
        pad_left,
    } = geom;
    let cin_g = cin / groups;
    let cout_g = cout / groups;
    let xv = &nodes[input].value;
    let wv = &nodes[weight].value;

    if let Some(b) = bias {
        if nodes[b].requires_grad {
            let gb = grads[b].get_or_insert_with(|| vec![0.0; cout]);
            for o in 0..cout {
                gb[o] += g[o * t_out..(o + 1) * t_out].iter().sum::<f64>();
            }
        }
    }
    if nodes[weight].requires_grad {
        let gw = grads[weight].get_or_insert_with(|| vec![0.0; wv.len()]);
        for o in 0..cout {
            let grp = o / cout_g;
            let grow = &g[o * t_out..(o + 1) * t_out];
            for ci in 0..cin_g {
                let xrow = &xv[(grp * cin_g + ci) * t_in..(grp * cin_g + ci + 1) * t_in];
                for kk in 0..k {
                    let (lo, hi) = geom.valid_range(kk);
                    if lo >= hi {
                        continue;
                    }
                    let start = lo * stride + kk - pad_left;
                    let acc: f64 = if stride == 1 {
                        grow[lo..hi]
                            .iter()
                            .zip(&xrow[start..start + (hi - lo)])
                            .map(|(a, b)| a * b)
                            .sum()
                    } else {
                        grow[lo..hi]
                            .iter()
                            .enumerate()
                            .map(|(j, a)| a * xrow[start + j * stride])
                            .sum()
                    };
                    gw[(o * cin_g + ci) * k + kk] += acc;
                }
            }
        }
    }
    if nodes[input].requires_grad {
        let gx = grads[input].get_or_insert_with(|| vec![0.0; xv.len()]);
        for o in 0..cout {
            let grp = o / cout_g;
            let grow = &g[o * t_out..(o + 1) * t_out];
            for ci in 0..cin_g {
                let c = grp * cin_g + ci;
                let xrow = &mut gx[c * t_in..(c + 1) * t_in];
                for kk in 0..k {
                    let w = wv[(o * cin_g + ci) * k + kk];
                    if w == 0.0 {
                        continue;
                    }
                    let (lo, hi) = geom.valid_range(kk);
                    if lo >= hi {
                        continue;
                    }
                    let start = lo * stride + kk - pad_left;
                    if stride == 1 {
                        for (x, gy) in xrow[start..start + (hi - lo)].iter_mut().zip(&grow[lo..hi])
                        {
                            *x += w * gy;
                        }
                    } else {
                        for (j, gy) in grow[lo..hi].iter().enumerate() {
                            xrow[start + j * stride] += w * gy;
                        }
                    }
                }
            }
        }
    }
}

fn softmax_values(x: &[f64], outer: usize, len: usize, inner: usize, log: bool) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for j in 0..inner {
            let idx = |l: usize| (o * len + l) * inner + j;
            let max = (0..len)
                .map(|l| x[idx(l)])
                .fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = (0..len).map(|l| (x[idx(l)] - max).exp()).sum();
            if log {
                let lse = max + denom.ln();
                for l in 0..len {
                    out[idx(l)] = x[idx(l)] - lse;
                }
            } else {
                for l in 0..len {
                    out[idx(l)] = (x[idx(l)] - max).exp() / denom;
                }
            }
        }
    }
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::Transpose { .. } => "transpose",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::Scale { .. } => "scale",
        Op::RowBias { .. } => "row bias",
        Op::RowScale { .. } => "row scale",
        Op::Conv1d { .. } => "conv1d",
        Op::Softmax { .. } => "softmax",
        Op::LogSoftmax { .. } => "log_softmax",
        Op::Unary { .. } => "unary",
        Op::MeanPoolTime { .. } => "mean_pool_time",
        Op::Sum { .. } => "sum",
        Op::Mask { .. } => "dropout",
        Op::Narrow { .. } => "narrow",
        Op::Concat { .. } => "concat",
        Op::Reshape { .. } => "reshape",
        Op::Select { .. } => "select",
    }
}
