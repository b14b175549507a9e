//! The tape. Every op appends a node holding its value; `backward` walks the
//! tape in reverse and accumulates gradients into nodes that need them.

use std::collections::HashMap;

use crate::conv::{self, conv2d_output_extent, ConvGeom};
use crate::error::{Result, TensorError};
use crate::params::ParamSet;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Narrow {
        input: Var,
        start: usize,
    },
    Concat(Vec<Var>),
    Reshape(Var),
    GatherRows {
        input: Var,
        rows: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Dropout {
        input: Var,
        mask: Vec<f64>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Nll {
        input: Var,
        targets: Vec<usize>,
        row_weights: Vec<f64>,
    },
    Mse {
        pred: Var,
        target: Vec<f64>,
    },
    MeanOf(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Running statistics of a feature-wise batch normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormStats {
    pub fn new(features: usize) -> Self {
        Self {
            mean: vec![0.0; features],
            var: vec![1.0; features],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

/// Parameter leaves bound into one graph, by name.
#[derive(Debug, Clone, Default)]
pub struct BoundParams {
    vars: HashMap<String, Var>,
}

impl BoundParams {
    /// Binds names to existing graph nodes, e.g. leaves created by a gradient checker.
    pub fn from_vars(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::ShapeMismatch(format!("unknown parameter `{name}`")))
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn mismatch(msg: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch(msg.into())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.node(*v).requires_grad)
    }

    /// A leaf. Gradients are kept for it after `backward` iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A constant input.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Adds every tensor of `params` as a gradient-tracked leaf.
    pub fn bind(&mut self, params: &ParamSet) -> BoundParams {
        let vars = params
            .iter()
            .map(|(name, t)| (name.to_string(), self.leaf(t.clone(), true)))
            .collect();
        BoundParams { vars }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    /// Gradient of the last `backward` w.r.t. a tracked leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients for every parameter in `params` order; unused parameters get zeros.
    pub fn param_grads(&self, bound: &BoundParams, params: &ParamSet) -> Vec<Vec<f64>> {
        params
            .iter()
            .map(|(name, t)| {
                bound
                    .vars
                    .get(name)
                    .and_then(|v| self.grad(*v))
                    .map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)
            })
            .collect()
    }

    /// `input: N x C x H x W`, `kernel: O x C x kH x kW`, optional `bias: O`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 4 || ks.len() != 4 {
            return Err(mismatch(format!(
                "conv2d expects 4-D input and kernel, got {xs:?} and {ks:?}"
            )));
        }
        if xs[1] != ks[1] {
            return Err(mismatch(format!(
                "conv2d channels: input {xs:?}, kernel {ks:?}"
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ks[0]] {
                return Err(mismatch(format!(
                    "conv2d bias {:?} for {} filters",
                    self.shape(b),
                    ks[0]
                )));
            }
        }
        let oh = conv2d_output_extent(xs[2], ks[2], stride.0, padding.0);
        let ow = conv2d_output_extent(xs[3], ks[3], stride.1, padding.1);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(mismatch(format!(
                "conv2d kernel {ks:?} does not fit input {xs:?} with padding {padding:?}"
            )));
        };
        let geom = ConvGeom {
            batch: xs[0],
            in_ch: xs[1],
            h: xs[2],
            w: xs[3],
            out_ch: ks[0],
            kh: ks[2],
            kw: ks[3],
            stride,
            pad: padding,
            oh,
            ow,
        };
        let out = conv::forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(&[geom.batch, geom.out_ch, oh, ow], out)?;
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.needs(&deps);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// `input: B x I`, `weight: O x I`, `bias: O`; returns `B x O`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(mismatch(format!("linear: input {xs:?}, weight {ws:?}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return Err(mismatch(format!(
                    "linear bias {:?} for {} outputs",
                    self.shape(b),
                    ws[0]
                )));
            }
        }
        let (batch, inp, out) = (xs[0], xs[1], ws[0]);
        let mut y = vec![0.0; batch * out];
        conv::gemm(
            batch,
            inp,
            out,
            1.0,
            self.value(input).data(),
            (inp, 1),
            self.value(weight).data(),
            (1, inp),
            0.0,
            &mut y,
            out,
        );
        if let Some(b) = bias {
            let b = self.value(b).data();
            for row in y.chunks_mut(out) {
                row.iter_mut().zip(b).for_each(|(v, bv)| *v += bv);
            }
        }
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.needs(&deps);
        let value = Tensor::new(&[batch, out], y)?;
        Ok(self.push(
            value,
            Op::Linear {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(self.shape(x), data).expect("shape preserved");
        let rg = self.needs(&[x]);
        self.push(value, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    /// Slice `len` entries of the last axis starting at `start`.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let last = *shape.last().expect("non-empty shape");
        if len == 0 || start + len > last {
            return Err(mismatch(format!(
                "narrow {start}..{} of last axis {last}",
                start + len
            )));
        }
        let data: Vec<f64> = self
            .value(x)
            .data()
            .chunks(last)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = len;
        let value = Tensor::new(&out_shape, data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::Narrow { input: x, start }, rg))
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| mismatch("concat of zero tensors"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.shape(*p);
            if s[..s.len() - 1] != lead[..] || s.len() != lead.len() + 1 {
                return Err(mismatch(format!("concat: {:?} vs leading {lead:?}", s)));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(*p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(&shape, data)?;
        let rg = self.needs(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Flattens everything after the first axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let rest: usize = s[1..].iter().product();
        self.reshape(x, &[s[0], rest.max(1)])
    }

    /// Picks rows (first axis) of a 2-D tensor; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(mismatch(format!("gather_rows expects 2-D, got {s:?}")));
        }
        if rows.is_empty() {
            return Err(mismatch("gather_rows with no rows"));
        }
        if let Some(bad) = rows.iter().find(|&&r| r >= s[0]) {
            return Err(mismatch(format!("row {bad} out of {}", s[0])));
        }
        let src = self.value(x).data();
        let data: Vec<f64> = rows
            .iter()
            .flat_map(|&r| src[r * s[1]..(r + 1) * s[1]].iter().copied())
            .collect();
        let value = Tensor::new(&[rows.len(), s[1]], data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(
            value,
            Op::GatherRows {
                input: x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// `N x C x H x W -> N x C`, mean over the spatial axes.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(mismatch(format!("global_avg_pool expects 4-D, got {s:?}")));
        }
        let area = s[2] * s[3];
        let data: Vec<f64> = self
            .value(x)
            .data()
            .chunks(area)
            .map(|plane| plane.iter().sum::<f64>() / area as f64)
            .collect();
        let value = Tensor::new(&[s[0], s[1]], data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::GlobalAvgPool(x), rg))
    }

    /// Inverted dropout: in training, zeroes entries with probability `rate` and
    /// scales survivors by `1 / (1 - rate)`. Identity in eval mode or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut Rng, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidRate(rate));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.uniform() < rate { 0.0 } else { scale })
            .collect();
        Ok(self.dropout_with_mask(x, mask))
    }

    /// Dropout with a caller-supplied multiplicative mask.
    pub fn dropout_with_mask(&mut self, x: Var, mask: Vec<f64>) -> Var {
        assert_eq!(mask.len(), self.value(x).numel(), "mask length");
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let value = Tensor::new(self.shape(x), data).expect("shape preserved");
        let rg = self.needs(&[x]);
        self.push(value, Op::Dropout { input: x, mask }, rg)
    }

    /// Feature-wise batch normalization of `B x F`. Training mode normalizes with
    /// the (biased) batch statistics and folds them into `stats`; eval mode uses `stats`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats,
        train: bool,
    ) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || self.shape(gamma) != [s[1]] || self.shape(beta) != [s[1]] {
            return Err(mismatch(format!(
                "batch_norm: input {s:?}, gamma {:?}, beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        if stats.mean.len() != s[1] || stats.var.len() != s[1] {
            return Err(mismatch(format!(
                "batch_norm stats for {} features, input has {}",
                stats.mean.len(),
                s[1]
            )));
        }
        let (b, f) = (s[0], s[1]);
        let xd = self.value(x).data();
        let (mean, var) = if train {
            let mut mean = vec![0.0; f];
            for row in xd.chunks(f) {
                mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
            }
            mean.iter_mut().for_each(|m| *m /= b as f64);
            let mut var = vec![0.0; f];
            for row in xd.chunks(f) {
                for j in 0..f {
                    var[j] += (row[j] - mean[j]).powi(2);
                }
            }
            var.iter_mut().for_each(|v| *v /= b as f64);
            (mean, var)
        } else {
            (stats.mean.clone(), stats.var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + stats.eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; b * f];
        let mut y = vec![0.0; b * f];
        for r in 0..b {
            for j in 0..f {
                let k = r * f + j;
                xhat[k] = (xd[k] - mean[j]) * inv_std[j];
                y[k] = g[j] * xhat[k] + bt[j];
            }
        }
        if train {
            let m = stats.momentum;
            let unbias = if b > 1 {
                b as f64 / (b - 1) as f64
            } else {
                1.0
            };
            for j in 0..f {
                stats.mean[j] = (1.0 - m) * stats.mean[j] + m * mean[j];
                stats.var[j] = (1.0 - m) * stats.var[j] + m * var[j] * unbias;
            }
        }
        let value = Tensor::new(&s, y)?;
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::BatchNorm {
                input: x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        ))
    }

    fn rowwise(&self, x: Var, what: &str) -> Result<usize> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(mismatch(format!("{what} expects 2-D rows, got {s:?}")));
        }
        Ok(s[1])
    }

    /// Softmax over the last axis of a 2-D tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let width = self.rowwise(x, "softmax")?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(width) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.iter_mut().for_each(|v| *v = (*v - max).exp());
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let value = Tensor::new(self.shape(x), data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let width = self.rowwise(x, "log_softmax")?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(width) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::new(self.shape(x), data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::LogSoftmax(x), rg))
    }

    /// Negative log-likelihood of `B x C` log-probabilities: `-mean_i lp[i, t_i]`.
    pub fn nll_loss(&mut self, log_probs: Var, targets: &[usize]) -> Result<Var> {
        self.weighted_nll_loss(log_probs, targets, None)
    }

    /// NLL with optional per-class weights, normalized by the summed weight of the targets.
    pub fn weighted_nll_loss(
        &mut self,
        log_probs: Var,
        targets: &[usize],
        class_weights: Option<&[f64]>,
    ) -> Result<Var> {
        let classes = self.rowwise(log_probs, "nll_loss")?;
        let batch = self.shape(log_probs)[0];
        if targets.len() != batch {
            return Err(mismatch(format!(
                "nll_loss: {batch} rows, {} targets",
                targets.len()
            )));
        }
        if let Some(w) = class_weights {
            if w.len() != classes {
                return Err(mismatch(format!(
                    "nll_loss: {} class weights for {classes} classes",
                    w.len()
                )));
            }
        }
        for (row, &t) in targets.iter().enumerate() {
            if t >= classes {
                return Err(TensorError::InvalidTarget {
                    row,
                    target: t,
                    classes,
                });
            }
        }
        let raw: Vec<f64> = targets
            .iter()
            .map(|&t| class_weights.map_or(1.0, |w| w[t]))
            .collect();
        let total: f64 = raw.iter().sum();
        let row_weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let lp = self.value(log_probs).data();
        let loss = -targets
            .iter()
            .enumerate()
            .map(|(i, &t)| row_weights[i] * lp[i * classes + t])
            .sum::<f64>();
        let rg = self.needs(&[log_probs]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Nll {
                input: log_probs,
                targets: targets.to_vec(),
                row_weights,
            },
            rg,
        ))
    }

    /// Mean squared error against constant targets.
    pub fn mse_loss(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let p = self.value(pred).data();
        if p.len() != target.len() {
            return Err(mismatch(format!(
                "mse_loss: {} predictions, {} targets",
                p.len(),
                target.len()
            )));
        }
        let loss = p
            .iter()
            .zip(target)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / p.len() as f64;
        let rg = self.needs(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    /// Unweighted mean of scalar nodes.
    pub fn mean_of(&mut self, scalars: &[Var]) -> Result<Var> {
        if scalars.is_empty() {
            return Err(mismatch("mean of zero scalars"));
        }
        let mut acc = 0.0;
        for s in scalars {
            let v = self.value(*s);
            if v.numel() != 1 {
                return Err(TensorError::NotScalar(v.shape().to_vec()));
            }
            acc += v.data()[0];
        }
        let rg = self.needs(scalars);
        Ok(self.push(
            Tensor::scalar(acc / scalars.len() as f64),
            Op::MeanOf(scalars.to_vec()),
            rg,
        ))
    }

    /// Reverse sweep from a scalar loss. Replaces any gradients of a previous sweep.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let x = nodes[input.0].value.data();
                let k = nodes[kernel.0].value.data();
                let mut dx = nodes[input.0].requires_grad.then(|| vec![0.0; x.len()]);
                let mut dk = nodes[kernel.0].requires_grad.then(|| vec![0.0; k.len()]);
                let mut db = bias
                    .filter(|b| nodes[b.0].requires_grad)
                    .map(|_| vec![0.0; geom.out_ch]);
                conv::backward(
                    geom,
                    x,
                    k,
                    g,
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                    db.as_deref_mut(),
                );
                for (v, d) in [(Some(*input), dx), (Some(*kernel), dk), (*bias, db)] {
                    if let (Some(v), Some(d)) = (v, d) {
                        acc(nodes, grads, v, |buf| add_into(buf, &d));
                    }
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let xs = nodes[input.0].value.shape();
                let (batch, inp) = (xs[0], xs[1]);
                let outw = nodes[weight.0].value.shape()[0];
                let x = nodes[input.0].value.data();
                let w = nodes[weight.0].value.data();
                acc(nodes, grads, *input, |buf: &mut [f64]| {
                    // dX (B x I) += dY (B x O) * W (O x I)
                    crate::conv::gemm(
                        batch,
                        outw,
                        inp,
                        1.0,
                        g,
                        (outw, 1),
                        w,
                        (inp, 1),
                        1.0,
                        buf,
                        inp,
                    );
                });
                acc(nodes, grads, *weight, |buf: &mut [f64]| {
                    // dW (O x I) += dY^T (O x B) * X (B x I)
                    crate::conv::gemm(
                        outw,
                        batch,
                        inp,
                        1.0,
                        g,
                        (1, outw),
                        x,
                        (inp, 1),
                        1.0,
                        buf,
                        inp,
                    );
                });
                if let Some(b) = bias {
                    acc(nodes, grads, *b, |buf: &mut [f64]| {
                        for row in g.chunks(outw) {
                            add_into(buf, row);
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                acc(nodes, grads, *a, |buf: &mut [f64]| add_into(buf, g));
                acc(nodes, grads, *b, |buf: &mut [f64]| add_into(buf, g));
            }
            Op::Mul(a, b) => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                acc(nodes, grads, *a, |buf: &mut [f64]| {
                    for ((d, gi), y) in buf.iter_mut().zip(g).zip(bv) {
                        *d += gi * y;
                    }
                });
                acc(nodes, grads, *b, |buf: &mut [f64]| {
                    for ((d, gi), x) in buf.iter_mut().zip(g).zip(av) {
                        *d += gi * x;
                    }
                });
            }
            Op::Relu(x) => {
                let y = out.data();
                acc(nodes, grads, *x, |buf: &mut [f64]| {
                    for ((d, gi), yi) in buf.iter_mut().zip(g).zip(y) {
                        if *yi > 0.0 {
                            *d += gi;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = out.data();
                acc(nodes, grads, *x, |buf: &mut [f64]| {
                    for ((d, gi), yi) in buf.iter_mut().zip(g).zip(y) {
                        *d += gi * yi * (1.0 - yi);
                    }
                });
            }
            Op::Tanh(x) => {
                let y = out.data();
                acc(nodes, grads, *x, |buf: &mut [f64]| {
                    for ((d, gi), yi) in buf.iter_mut().zip(g).zip(y) {
                        *d += gi * (1.0 - yi * yi);
                    }
                });
            }
            Op::Narrow { input, start } => {
                let last = *nodes[input.0].value.shape().last().unwrap();
                let len = *out.shape().last().unwrap();
                acc(nodes, grads, *input, |buf: &mut [f64]| {
                    for (drow, grow) in buf.chunks_mut(last).zip(g.chunks(len)) {
                        add_into(&mut drow[*start..*start + len], grow);
                    }
                });
            }
            Op::Concat(parts) => {
                let total = *out.shape().last().unwrap();
                let mut offset = 0;
                for p in parts {
                    let w = *nodes[p.0].value.shape().last().unwrap();
                    acc(nodes, grads, *p, |buf: &mut [f64]| {
                        for (drow, grow) in buf.chunks_mut(w).zip(g.chunks(total)) {
                            add_into(drow, &grow[offset..offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::Reshape(x) => acc(nodes, grads, *x, |buf: &mut [f64]| add_into(buf, g)),
            Op::GatherRows { input, rows } => {
                let w = out.shape()[1];
                acc(nodes, grads, *input, |buf: &mut [f64]| {
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(&mut buf[r * w..(r + 1) * w], &g[k * w..(k + 1) * w]);
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let s = nodes[x.0].value.shape();
                let area = s[2] * s[3];
                acc(nodes, grads, *x, |buf: &mut [f64]| {
                    for (plane, gi) in buf.chunks_mut(area).zip(g) {
                        let d = gi / area as f64;
                        plane.iter_mut().for_each(|v| *v += d);
                    }
                });
            }
            Op::Dropout { input, mask } => {
                acc(nodes, grads, *input, |buf: &mut [f64]| {
                    for ((d, gi), m) in buf.iter_mut().zip(g).zip(mask) {
                        *d += gi * m;
                    }
                });
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let f = inv_std.len();
                let b = xhat.len() / f;
                let gm = nodes[gamma.0].value.data();
                let mut sum_g = vec![0.0; f];
                let mut sum_gx = vec![0.0; f];
                for r in 0..b {
                    for j in 0..f {
                        sum_g[j] += g[r * f + j];
                        sum_gx[j] += g[r * f + j] * xhat[r * f + j];
                    }
                }
                acc(nodes, grads, *gamma, |buf: &mut [f64]| {
                    add_into(buf, &sum_gx)
                });
                acc(nodes, grads, *beta, |buf: &mut [f64]| add_into(buf, &sum_g));
                acc(nodes, grads, *input, |buf: &mut [f64]| {
                    for r in 0..b {
                        for j in 0..f {
                            let k = r * f + j;
                            buf[k] += if *train {
                                gm[j] * inv_std[j] / b as f64
                                    * (b as f64 * g[k] - sum_g[j] - xhat[k] * sum_gx[j])
                            } else {
                                gm[j] * inv_std[j] * g[k]
                            };
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let w = out.shape()[1];
                let y = out.data();
                acc(nodes, grads, *x, |buf: &mut [f64]| {
                    for ((drow, grow), yrow) in buf.chunks_mut(w).zip(g.chunks(w)).zip(y.chunks(w))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..w {
                            drow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let w = out.shape()[1];
                let y = out.data();
                acc(nodes, grads, *x, |buf: &mut [f64]| {
                    for ((drow, grow), yrow) in buf.chunks_mut(w).zip(g.chunks(w)).zip(y.chunks(w))
                    {
                        let sum: f64 = grow.iter().sum();
                        for j in 0..w {
                            drow[j] += grow[j] - yrow[j].exp() * sum;
                        }
                    }
                });
            }
            Op::Nll {
                input,
                targets,
                row_weights,
            } => {
                let w = nodes[input.0].value.shape()[1];
                acc(nodes, grads, *input, |buf: &mut [f64]| {
                    for (r, &t) in targets.iter().enumerate() {
                        buf[r * w + t] -= g[0] * row_weights[r];
                    }
                });
            }
            Op::Mse { pred, target } => {
                let p = nodes[pred.0].value.data();
                let n = p.len() as f64;
                acc(nodes, grads, *pred, |buf: &mut [f64]| {
                    for ((d, pi), ti) in buf.iter_mut().zip(p).zip(target) {
                        *d += g[0] * 2.0 * (pi - ti) / n;
                    }
                });
            }
            Op::MeanOf(parts) => {
                let d = g[0] / parts.len() as f64;
                for p in parts {
                    acc(nodes, grads, *p, |buf: &mut [f64]| buf[0] += d);
                }
            }
        }
    }
}

fn acc(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
    let n = &nodes[v.0];
    if n.requires_grad {
        f(grads[v.0].get_or_insert_with(|| vec![0.0; n.value.numel()]));
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_of_ones_sums_each_window() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[1, 1, 4, 4], 1.0));
        let k = g.input(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = g.conv2d(x, k, None, (2, 2), (0, 0)).unwrap();
        assert_eq!(g.shape(y), [1, 1, 2, 2]);
        assert_eq!(g.value(y).data(), &[4.0; 4]);
    }

    #[test]
    fn corner_kernel_subsamples() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..36).map(f64::from).collect();
        let x = g.input(t(&[1, 1, 6, 6], &data));
        let k = g.input(t(&[1, 1, 3, 3], &[1.0, 0., 0., 0., 0., 0., 0., 0., 0.]));
        let y = g.conv2d(x, k, None, (2, 2), (0, 0)).unwrap();
        // 2x2 output sampling input[0,0], [0,2], [2,0], [2,2]
        assert_eq!(g.value(y).data(), &[0.0, 2.0, 12.0, 14.0]);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 2, 4, 4]));
        let k = g.input(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(matches!(
            g.conv2d(x, k, None, (2, 2), (0, 0)),
            Err(TensorError::ShapeMismatch(_))
        ));
        let k = g.input(Tensor::zeros(&[1, 2, 7, 7]));
        assert!(g.conv2d(x, k, None, (2, 2), (1, 1)).is_err());
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 2], &[0.0, 0.0]));
        let p = g.softmax(x).unwrap();
        assert_eq!(g.value(p).data(), &[0.5, 0.5]);
    }

    #[test]
    fn concat_three_blocks_of_52() {
        let mut g = Graph::new();
        let parts: Vec<Var> = (0..3)
            .map(|i| g.input(Tensor::full(&[2, 52], f64::from(i))))
            .collect();
        let c = g.concat(&parts).unwrap();
        assert_eq!(g.shape(c), [2, 156]);
        assert_eq!(g.value(c).at2(1, 52), 1.0);
        assert_eq!(g.value(c).at2(1, 155), 2.0);
    }

    #[test]
    fn dropout_rate_zero_and_eval_are_identity() {
        let mut g = Graph::new();
        let mut rng = Rng::seed_from(0);
        let x = g.input(t(&[1, 3], &[1.0, 2.0, 3.0]));
        assert_eq!(g.dropout(x, 0.0, &mut rng, true).unwrap(), x);
        assert_eq!(g.dropout(x, 0.5, &mut rng, false).unwrap(), x);
        assert!(matches!(
            g.dropout(x, 1.0, &mut rng, true),
            Err(TensorError::InvalidRate(_))
        ));
        assert!(matches!(
            g.dropout(x, -0.1, &mut rng, true),
            Err(TensorError::InvalidRate(_))
        ));
    }

    #[test]
    fn dropout_scales_survivors() {
        let mut g = Graph::new();
        let mut rng = Rng::seed_from(9);
        let x = g.input(Tensor::full(&[1, 1000], 1.0));
        let y = g.dropout(x, 0.3, &mut rng, true).unwrap();
        let vals = g.value(y).data();
        assert!(vals
            .iter()
            .all(|&v| v == 0.0 || (v - 1.0 / 0.7).abs() < 1e-12));
        let kept = vals.iter().filter(|&&v| v > 0.0).count();
        assert!((600..800).contains(&kept), "kept {kept}");
    }

    #[test]
    fn nll_of_uniform_is_ln2() {
        let mut g = Graph::new();
        let lp = g.input(Tensor::full(&[3, 2], 0.5f64.ln()));
        let l = g.nll_loss(lp, &[0, 1, 1]).unwrap();
        assert!((g.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(matches!(
            g.nll_loss(lp, &[0, 2, 1]),
            Err(TensorError::InvalidTarget { row: 1, .. })
        ));
    }

    #[test]
    fn nll_of_confident_correct_predictions_tends_to_zero() {
        let mut g = Graph::new();
        let x = g.input(t(&[2, 2], &[-40.0, 40.0, 40.0, -40.0]));
        let lp = g.log_softmax(x).unwrap();
        let l = g.nll_loss(lp, &[1, 0]).unwrap();
        assert!(g.value(l).data()[0] < 1e-30);
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let mut g = Graph::new();
        let mut stats = BatchNormStats::new(2);
        stats.mean = vec![1.0, -1.0];
        stats.var = vec![4.0, 1.0];
        stats.eps = 0.0;
        let x = g.input(t(&[1, 2], &[3.0, 0.0]));
        let gm = g.input(t(&[2], &[1.0, 2.0]));
        let bt = g.input(t(&[2], &[0.0, 0.5]));
        let y = g.batch_norm(x, gm, bt, &mut stats, false).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.5]);
        assert_eq!(stats.mean, vec![1.0, -1.0]);
    }

    #[test]
    fn batch_norm_train_standardizes_and_updates_stats() {
        let mut g = Graph::new();
        let mut stats = BatchNormStats::new(1);
        let x = g.input(t(&[4, 1], &[1.0, 2.0, 3.0, 4.0]));
        let gm = g.input(t(&[1], &[1.0]));
        let bt = g.input(t(&[1], &[0.0]));
        let y = g.batch_norm(x, gm, bt, &mut stats, true).unwrap();
        let mean: f64 = g.value(y).data().iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((stats.mean[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2]), true);
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(TensorError::NotScalar(_))));
    }
}
