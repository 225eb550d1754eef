//! Reverse-mode differentiation tape.
//!
//! A [`Tape`] owns every value computed during one forward pass. Operations
//! append nodes in execution order, so inputs always precede their consumers
//! and [`Tape::backward`] only has to walk the node list in reverse once.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::kernels::{self, ConvGeometry};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Deliberately broken backward rules, used as a negative control for the
/// gradient checker.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    ReluBackward,
}

/// Statistics a batch normalization normalizes with.
#[derive(Debug, Clone, Copy)]
pub enum Norm<'a> {
    /// Batch statistics (training mode).
    Batch,
    /// Fixed running mean and variance (evaluation mode).
    Running { mean: &'a [f64], var: &'a [f64] },
}

/// Output of a training-mode batch normalization: the normalized variable plus
/// the per-channel batch statistics the caller folds into its running
/// averages (variance is the unbiased estimate).
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeometry,
    },
    MaxPool2 {
        x: Var,
        arg: Vec<usize>,
    },
    Relu(Var),
    MaxRows {
        x: Var,
        arg: Vec<usize>,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    GroupMean {
        x: Var,
        groups: Vec<Vec<usize>>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    BnReluPool {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        arg: Vec<usize>,
        train: bool,
    },
    LogSoftmax(Var),
    Softmax(Var),
    PairwiseSqDist(Var, Var),
    RowSqDist(Var, Var),
    Reshape(Var),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    ScaleCols {
        x: Var,
        factors: Vec<f64>,
    },
    PickPerRow {
        x: Var,
        idx: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
    fault: Option<Fault>,
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn with_fault(fault: Fault) -> Self {
        Self {
            fault: Some(fault),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated into a gradient-enabled leaf by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).ok()
    }

    fn push(&mut self, name: &'static str, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(name, value, &[a, b], op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.value(a);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * s).collect())?;
        self.push("scale", value, &[a], Op::Scale(a, s))
    }

    /// Adds a `1×d` row to every row of an `n×d` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if self.value(row).numel() != d {
            return Err(Error::shape(
                "add_row",
                format!("row of {} for width {d}", self.value(row).numel()),
            ));
        }
        let r = self.value(row).data();
        let mut data = self.value(x).data().to_vec();
        for line in data.chunks_mut(d) {
            add_into(line, r);
        }
        self.push(
            "add_row",
            Tensor::new(vec![n, d], data)?,
            &[x, row],
            Op::AddRow(x, row),
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.value(a).dims2()?;
        let (k2, m) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("{n}x{k} · {k2}x{m}")));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let aip = ad[i * k + p];
                for (o, &bv) in orow.iter_mut().zip(&bd[p * m..(p + 1) * m]) {
                    *o += aip * bv;
                }
            }
        }
        self.push(
            "matmul",
            Tensor::new(vec![n, m], out)?,
            &[a, b],
            Op::MatMul(a, b),
        )
    }

    /// Stride-1 2-D convolution of `x` (B,C,H,W) with square kernels `w`
    /// (O,C,k,k) and symmetric zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, pad: usize) -> Result<Var> {
        let (batch, in_ch, height, width) = self.value(x).dims4()?;
        let (out_ch, wc, kh, kw) = self.value(w).dims4()?;
        if wc != in_ch || kh != kw || height + 2 * pad < kh || width + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input {:?}, kernel {:?}, pad {pad}",
                    self.value(x).shape(),
                    self.value(w).shape()
                ),
            ));
        }
        let geom = ConvGeometry {
            batch,
            in_ch,
            height,
            width,
            out_ch,
            kernel: kh,
            pad,
        };
        let out = kernels::conv2d_forward(&geom, self.value(x).data(), self.value(w).data());
        let value = Tensor::new(vec![batch, out_ch, geom.out_h(), geom.out_w()], out)?;
        self.push("conv2d", value, &[x, w], Op::Conv2d { x, w, geom })
    }

    /// 2×2 max-pool, stride 2, odd trailing rows/columns dropped.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if h < 2 || w < 2 {
            return Err(Error::shape(
                "max_pool2",
                format!("spatial extent {h}x{w} too small"),
            ));
        }
        let (out, arg) = kernels::maxpool2(self.value(x).data(), b * c, h, w);
        let value = Tensor::new(vec![b, c, h / 2, w / 2], out)?;
        self.push("max_pool2", value, &[x], Op::MaxPool2 { x, arg })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|&v| v.max(0.0)).collect(),
        )?;
        self.push("relu", value, &[x], Op::Relu(x))
    }

    /// Column-wise maximum over the rows of an `n×d` matrix, giving `1×d`.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        let data = self.value(x).data();
        let mut out = data[..d].to_vec();
        let mut arg = vec![0; d];
        for i in 1..n {
            for j in 0..d {
                if data[i * d + j] > out[j] {
                    out[j] = data[i * d + j];
                    arg[j] = i;
                }
            }
        }
        self.push(
            "max_rows",
            Tensor::new(vec![1, d], out)?,
            &[x],
            Op::MaxRows { x, arg },
        )
    }

    /// Mean of a matrix over `axis` 0 (giving `1×d`) or 1 (giving `n×1`).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        let data = self.value(x).data();
        let value = match axis {
            0 => {
                let mut out = vec![0.0; d];
                for row in data.chunks(d) {
                    add_into(&mut out, row);
                }
                out.iter_mut().for_each(|v| *v /= n as f64);
                Tensor::new(vec![1, d], out)?
            }
            1 => {
                let out = data
                    .chunks(d)
                    .map(|r| r.iter().sum::<f64>() / d as f64)
                    .collect();
                Tensor::new(vec![n, 1], out)?
            }
            _ => {
                return Err(Error::shape(
                    "mean_axis",
                    format!("axis {axis} on a matrix"),
                ))
            }
        };
        self.push("mean_axis", value, &[x], Op::MeanAxis { x, axis })
    }

    /// Row `g` of the result is the mean of the rows of `x` listed in
    /// `groups[g]`, summed in the listed order.
    pub fn group_mean(&mut self, x: Var, groups: Vec<Vec<usize>>) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if groups.is_empty()
            || groups
                .iter()
                .any(|g| g.is_empty() || g.iter().any(|&i| i >= n))
        {
            return Err(Error::shape(
                "group_mean",
                format!("bad grouping of {n} rows"),
            ));
        }
        let data = self.value(x).data();
        let mut out = vec![0.0; groups.len() * d];
        for (g, members) in groups.iter().enumerate() {
            let orow = &mut out[g * d..(g + 1) * d];
            for &i in members {
                add_into(orow, &data[i * d..(i + 1) * d]);
            }
            let m = members.len() as f64;
            orow.iter_mut().for_each(|v| *v /= m);
        }
        let value = Tensor::new(vec![groups.len(), d], out)?;
        self.push("group_mean", value, &[x], Op::GroupMean { x, groups })
    }

    /// Training-mode batch normalization of (B,C,H,W) with per-channel affine
    /// `gamma`/`beta` of length C, normalizing with the biased batch variance.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let (b, c, h, w) = self.value(x).dims4()?;
        self.check_channel_params("batch_norm", c, gamma, beta)?;
        let plane = h * w;
        let m = (b * plane) as f64;
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let (mean, var) = channel_moments(xd, b, c, plane);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                let r = (bi * c + ci) * plane..(bi * c + ci + 1) * plane;
                for ((xh, o), &v) in xhat[r.clone()]
                    .iter_mut()
                    .zip(&mut out[r.clone()])
                    .zip(&xd[r])
                {
                    *xh = (v - mean[ci]) * inv_std[ci];
                    *o = gd[ci] * *xh + bd[ci];
                }
            }
        }
        let unbiased = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
        let stats = BatchStats {
            mean,
            var: var.iter().map(|v| v * unbiased).collect(),
        };
        let value = Tensor::new(vec![b, c, h, w], out)?;
        let v = self.push(
            "batch_norm",
            value,
            &[x, gamma, beta],
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: true,
            },
        )?;
        Ok((v, stats))
    }

    /// Evaluation-mode batch normalization with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        self.check_channel_params("batch_norm_eval", c, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batch_norm_eval", "running statistics length"));
        }
        let plane = h * w;
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xd = self.value(x).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        for bi in 0..b {
            for ci in 0..c {
                let r = (bi * c + ci) * plane..(bi * c + ci + 1) * plane;
                for ((xh, o), &v) in xhat[r.clone()]
                    .iter_mut()
                    .zip(&mut out[r.clone()])
                    .zip(&xd[r])
                {
                    *xh = (v - running_mean[ci]) * inv_std[ci];
                    *o = gd[ci] * *xh + bd[ci];
                }
            }
        }
        let value = Tensor::new(vec![b, c, h, w], out)?;
        self.push(
            "batch_norm_eval",
            value,
            &[x, gamma, beta],
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: false,
            },
        )
    }

    /// `max_pool2(relu(batch_norm(x)))` as one node. Values match the
    /// three-op chain exactly; intermediate activations are never stored.
    /// Returns batch statistics in [`Norm::Batch`] mode.
    pub fn bn_relu_pool(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        norm: Norm<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (b, c, h, w) = self.value(x).dims4()?;
        self.check_channel_params("bn_relu_pool", c, gamma, beta)?;
        if h < 2 || w < 2 {
            return Err(Error::shape(
                "bn_relu_pool",
                format!("spatial extent {h}x{w} too small"),
            ));
        }
        let plane = h * w;
        let xd = self.value(x).data();
        let (mean, var, stats) = match norm {
            Norm::Batch => {
                let (mean, var) = channel_moments(xd, b, c, plane);
                let m = (b * plane) as f64;
                let unbiased = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.iter().map(|v| v * unbiased).collect(),
                };
                (mean, var, Some(stats))
            }
            Norm::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("bn_relu_pool", "running statistics length"));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut arg = Vec::with_capacity(b * c * oh * ow);
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                let act =
                    |i: usize| (gd[ci] * ((xd[i] - mean[ci]) * inv_std[ci]) + bd[ci]).max(0.0);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let first = base + 2 * oy * w + 2 * ox;
                        let (mut best, mut best_v) = (first, act(first));
                        for i in [first + 1, first + w, first + w + 1] {
                            let v = act(i);
                            if v > best_v {
                                best = i;
                                best_v = v;
                            }
                        }
                        out.push(best_v);
                        arg.push(best);
                    }
                }
            }
        }
        let value = Tensor::new(vec![b, c, oh, ow], out)?;
        let train = matches!(norm, Norm::Batch);
        let op = Op::BnReluPool {
            x,
            gamma,
            beta,
            mean,
            inv_std,
            arg,
            train,
        };
        let v = self.push("bn_relu_pool", value, &[x, gamma, beta], op)?;
        Ok((v, stats))
    }

    fn check_channel_params(
        &self,
        op: &'static str,
        c: usize,
        gamma: Var,
        beta: Var,
    ) -> Result<()> {
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape(
                op,
                format!("affine parameters must have {c} entries"),
            ));
        }
        Ok(())
    }

    /// Row-wise log-softmax of a matrix, stabilized by max subtraction.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v = (*v - mx) - lse);
        }
        self.push(
            "log_softmax",
            Tensor::new(vec![n, d], out)?,
            &[x],
            Op::LogSoftmax(x),
        )
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.iter_mut().for_each(|v| *v = (*v - mx).exp());
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        self.push(
            "softmax",
            Tensor::new(vec![n, d], out)?,
            &[x],
            Op::Softmax(x),
        )
    }

    /// Squared Euclidean distances between the rows of `a` (n×D) and `b`
    /// (m×D), giving n×m.
    pub fn pairwise_sqdist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = self.value(a).dims2()?;
        let (m, d2) = self.value(b).dims2()?;
        if d != d2 {
            return Err(Error::shape(
                "pairwise_sqdist",
                format!("row widths {d} vs {d2}"),
            ));
        }
        let out = pairwise_sqdist_raw(self.value(a).data(), self.value(b).data(), n, m, d);
        self.push(
            "pairwise_sqdist",
            Tensor::new(vec![n, m], out)?,
            &[a, b],
            Op::PairwiseSqDist(a, b),
        )
    }

    /// Squared distance between matching rows of two n×D matrices, giving n×1.
    pub fn row_sqdist(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_sqdist", a, b)?;
        let (n, d) = self.value(a).dims2()?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let out = (0..n)
            .map(|i| sqdist(&ad[i * d..(i + 1) * d], &bd[i * d..(i + 1) * d]))
            .collect();
        self.push(
            "row_sqdist",
            Tensor::new(vec![n, 1], out)?,
            &[a, b],
            Op::RowSqDist(a, b),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, &[x], Op::Reshape(x))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let n = t.shape()[0];
        let width = t.numel() / n;
        if idx.is_empty() || idx.iter().any(|&i| i >= n) {
            return Err(Error::shape(
                "gather_rows",
                format!("indices out of range for {n} rows"),
            ));
        }
        let mut data = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            data.extend_from_slice(&t.data()[i * width..(i + 1) * width]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = idx.len();
        let value = Tensor::new(shape, data)?;
        self.push(
            "gather_rows",
            value,
            &[x],
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols", "nothing to concatenate"))?;
        let (n, _) = self.value(first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != n {
                return Err(Error::shape(
                    "concat_cols",
                    format!("row counts {r} vs {n}"),
                ));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::new(vec![n, total], data)?;
        self.push("concat_cols", value, parts, Op::ConcatCols(parts.to_vec()))
    }

    /// Multiplies column `j` of a matrix by the constant `factors[j]`.
    pub fn scale_cols(&mut self, x: Var, factors: &[f64]) -> Result<Var> {
        let (n, m) = self.value(x).dims2()?;
        if factors.len() != m {
            return Err(Error::shape(
                "scale_cols",
                format!("{} factors for {m} columns", factors.len()),
            ));
        }
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(m) {
            row.iter_mut().zip(factors).for_each(|(v, f)| *v *= f);
        }
        let value = Tensor::new(vec![n, m], data)?;
        self.push(
            "scale_cols",
            value,
            &[x],
            Op::ScaleCols {
                x,
                factors: factors.to_vec(),
            },
        )
    }

    /// Picks column `idx[i]` from each row `i`, giving n×1.
    pub fn pick_per_row(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, m) = self.value(x).dims2()?;
        if idx.len() != n || idx.iter().any(|&j| j >= m) {
            return Err(Error::shape(
                "pick_per_row",
                format!("{} indices for {n}x{m}", idx.len()),
            ));
        }
        let data = self.value(x).data();
        let out = idx
            .iter()
            .enumerate()
            .map(|(i, &j)| data[i * m + j])
            .collect();
        let value = Tensor::new(vec![n, 1], out)?;
        self.push(
            "pick_per_row",
            value,
            &[x],
            Op::PickPerRow {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Tensor::scalar(s), &[x], Op::Mean(x))
    }

    /// Fingerprint of every piecewise branch taken in the forward pass (ReLU
    /// signs, pooling winners). Two forward passes with equal fingerprints lie
    /// on the same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for v in self.value(*x).data() {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool2 { arg, .. } | Op::MaxRows { arg, .. } => arg.hash(&mut h),
                Op::BnReluPool { arg, .. } => {
                    arg.hash(&mut h);
                    for v in node.value.data() {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Accumulates `∂loss/∂leaf` into every gradient-enabled leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward(
                "backward already ran on this tape; record a fresh forward pass".into(),
            ));
        }
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Backward("loss is not on this tape".into()))?;
        if node.value.numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                node.value.shape()
            )));
        }
        if !node.requires_grad {
            return Err(Error::Backward(
                "loss does not depend on any gradient-enabled leaf".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !(matches!(node.op, Op::Leaf) && node.requires_grad) {
                grads[i] = None;
            } else if grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.numel()]);
            }
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let nodes = &self.nodes;
        let mut acc = |v: Var, contribution: Vec<f64>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => add_into(existing, &contribution),
                slot @ None => *slot = Some(contribution),
            }
        };
        let wants = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| nodes[v.0].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, g.iter().zip(val(*b)).map(|(g, y)| g * y).collect());
                }
                if wants(*b) {
                    acc(*b, g.iter().zip(val(*a)).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(a, s) => acc(*a, g.iter().map(|v| v * s).collect()),
            Op::AddRow(x, row) => {
                acc(*x, g.to_vec());
                if wants(*row) {
                    let d = val(*row).len();
                    let mut gr = vec![0.0; d];
                    for line in g.chunks(d) {
                        add_into(&mut gr, line);
                    }
                    acc(*row, gr);
                }
            }
            Op::MatMul(a, b) => {
                let (n, k) = nodes[a.0].value.dims2()?;
                let m = nodes[b.0].value.shape()[1];
                let (ad, bd) = (val(*a), val(*b));
                if wants(*a) {
                    let mut ga = vec![0.0; n * k];
                    for r in 0..n {
                        let grow = &g[r * m..(r + 1) * m];
                        for p in 0..k {
                            ga[r * k + p] = grow
                                .iter()
                                .zip(&bd[p * m..(p + 1) * m])
                                .map(|(x, y)| x * y)
                                .sum();
                        }
                    }
                    acc(*a, ga);
                }
                if wants(*b) {
                    let mut gb = vec![0.0; k * m];
                    for r in 0..n {
                        let grow = &g[r * m..(r + 1) * m];
                        for p in 0..k {
                            let arp = ad[r * k + p];
                            for (o, gv) in gb[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                *o += arp * gv;
                            }
                        }
                    }
                    acc(*b, gb);
                }
            }
            Op::Conv2d { x, w, geom } => {
                let (gx, gw) = kernels::conv2d_backward(geom, val(*x), val(*w), g, wants(*x));
                if let Some(gx) = gx {
                    acc(*x, gx);
                }
                acc(*w, gw);
            }
            Op::MaxPool2 { x, arg } => {
                let mut gx = vec![0.0; val(*x).len()];
                for (&src, gv) in arg.iter().zip(g) {
                    gx[src] += gv;
                }
                acc(*x, gx);
            }
            Op::Relu(x) => {
                let pass = if self.fault == Some(Fault::ReluBackward) {
                    1.5
                } else {
                    1.0
                };
                acc(
                    *x,
                    g.iter()
                        .zip(val(*x))
                        .map(|(g, &v)| if v > 0.0 { g * pass } else { 0.0 })
                        .collect(),
                );
            }
            Op::MaxRows { x, arg } => {
                let d = arg.len();
                let mut gx = vec![0.0; val(*x).len()];
                for (j, (&r, gv)) in arg.iter().zip(g).enumerate() {
                    gx[r * d + j] += gv;
                }
                acc(*x, gx);
            }
            Op::MeanAxis { x, axis } => {
                let (n, d) = nodes[x.0].value.dims2()?;
                let mut gx = vec![0.0; n * d];
                for r in 0..n {
                    for c in 0..d {
                        gx[r * d + c] = if *axis == 0 {
                            g[c] / n as f64
                        } else {
                            g[r] / d as f64
                        };
                    }
                }
                acc(*x, gx);
            }
            Op::GroupMean { x, groups } => {
                let d = nodes[x.0].value.shape()[1];
                let mut gx = vec![0.0; val(*x).len()];
                for (gi, members) in groups.iter().enumerate() {
                    let m = members.len() as f64;
                    for &r in members {
                        for (o, gv) in gx[r * d..(r + 1) * d]
                            .iter_mut()
                            .zip(&g[gi * d..(gi + 1) * d])
                        {
                            *o += gv / m;
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (b, c, h, w) = nodes[x.0].value.dims4()?;
                let plane = h * w;
                let gd = val(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let r = (bi * c + ci) * plane..(bi * c + ci + 1) * plane;
                        for (gv, xh) in g[r.clone()].iter().zip(&xhat[r]) {
                            dgamma[ci] += gv * xh;
                            dbeta[ci] += gv;
                        }
                    }
                }
                if wants(*x) {
                    let mut gx = vec![0.0; g.len()];
                    let m = (b * plane) as f64;
                    for bi in 0..b {
                        for ci in 0..c {
                            let r = (bi * c + ci) * plane..(bi * c + ci + 1) * plane;
                            if !train {
                                let k = inv_std[ci] * gd[ci];
                                for (o, gv) in gx[r.clone()].iter_mut().zip(&g[r]) {
                                    *o = gv * k;
                                }
                            } else {
                                // sums of dxhat and dxhat·xhat over the channel
                                let s1 = dbeta[ci] * gd[ci];
                                let s2 = dgamma[ci] * gd[ci];
                                let k = inv_std[ci] / m;
                                for ((o, gv), xh) in
                                    gx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xhat[r])
                                {
                                    *o = k * (m * gv * gd[ci] - s1 - xh * s2);
                                }
                            }
                        }
                    }
                    acc(*x, gx);
                }
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::BnReluPool {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                arg,
                train,
            } => {
                let (b, c, h, w) = nodes[x.0].value.dims4()?;
                let plane = h * w;
                let per_channel = (h / 2) * (w / 2);
                let (xd, gd) = (val(*x), val(*gamma));
                let pass = if self.fault == Some(Fault::ReluBackward) {
                    1.5
                } else {
                    1.0
                };
                let pooled = nodes[i].value.data();
                // gradient w.r.t. the normalized-and-shifted value, nonzero
                // only at pooling winners with a positive activation
                let dy: Vec<f64> = g
                    .iter()
                    .zip(pooled)
                    .map(|(gv, &y)| if y > 0.0 { gv * pass } else { 0.0 })
                    .collect();
                let channel_of = |k: usize| (k / per_channel) % c;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (k, (&src, &d)) in arg.iter().zip(&dy).enumerate() {
                    let ci = channel_of(k);
                    dgamma[ci] += d * (xd[src] - mean[ci]) * inv_std[ci];
                    dbeta[ci] += d;
                }
                if wants(*x) {
                    let mut gx = vec![0.0; xd.len()];
                    if *train {
                        let m = (b * plane) as f64;
                        for (k, (&src, &d)) in arg.iter().zip(&dy).enumerate() {
                            gx[src] = m * d * gd[channel_of(k)];
                        }
                        for bi in 0..b {
                            for ci in 0..c {
                                let (s1, s2) = (dbeta[ci] * gd[ci], dgamma[ci] * gd[ci]);
                                let k = inv_std[ci] / m;
                                let r = (bi * c + ci) * plane..(bi * c + ci + 1) * plane;
                                for (o, &xv) in gx[r.clone()].iter_mut().zip(&xd[r]) {
                                    let xh = (xv - mean[ci]) * inv_std[ci];
                                    *o = k * (*o - s1 - xh * s2);
                                }
                            }
                        }
                    } else {
                        for (k, (&src, &d)) in arg.iter().zip(&dy).enumerate() {
                            let ci = channel_of(k);
                            gx[src] = d * inv_std[ci] * gd[ci];
                        }
                    }
                    acc(*x, gx);
                }
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::LogSoftmax(x) => {
                let d = *nodes[i].value.shape().last().unwrap_or(&1);
                let y = nodes[i].value.data();
                let mut gx = vec![0.0; g.len()];
                for ((o, grow), yrow) in gx.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
                    let s: f64 = grow.iter().sum();
                    for ((o, gv), yv) in o.iter_mut().zip(grow).zip(yrow) {
                        *o = gv - yv.exp() * s;
                    }
                }
                acc(*x, gx);
            }
            Op::Softmax(x) => {
                let d = *nodes[i].value.shape().last().unwrap_or(&1);
                let y = nodes[i].value.data();
                let mut gx = vec![0.0; g.len()];
                for ((o, grow), yrow) in gx.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
                    let s: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in o.iter_mut().zip(grow).zip(yrow) {
                        *o = yv * (gv - s);
                    }
                }
                acc(*x, gx);
            }
            Op::PairwiseSqDist(a, b) => {
                let (n, d) = nodes[a.0].value.dims2()?;
                let m = nodes[b.0].value.shape()[0];
                let (ad, bd) = (val(*a), val(*b));
                let mut ga = vec![0.0; n * d];
                let mut gb = vec![0.0; m * d];
                for r in 0..n {
                    for c in 0..m {
                        let k = 2.0 * g[r * m + c];
                        if k == 0.0 {
                            continue;
                        }
                        for p in 0..d {
                            let diff = k * (ad[r * d + p] - bd[c * d + p]);
                            ga[r * d + p] += diff;
                            gb[c * d + p] -= diff;
                        }
                    }
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::RowSqDist(a, b) => {
                let d = nodes[a.0].value.shape()[1];
                let (ad, bd) = (val(*a), val(*b));
                let ga: Vec<f64> = ad
                    .iter()
                    .zip(bd)
                    .enumerate()
                    .map(|(idx, (x, y))| 2.0 * g[idx / d] * (x - y))
                    .collect();
                if wants(*b) {
                    acc(*b, ga.iter().map(|v| -v).collect());
                }
                acc(*a, ga);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::GatherRows { x, idx } => {
                let width = g.len() / idx.len();
                let mut gx = vec![0.0; val(*x).len()];
                for (r, &src) in idx.iter().enumerate() {
                    add_into(
                        &mut gx[src * width..(src + 1) * width],
                        &g[r * width..(r + 1) * width],
                    );
                }
                acc(*x, gx);
            }
            Op::ConcatCols(parts) => {
                let total = nodes[i].value.shape()[1];
                let n = nodes[i].value.shape()[0];
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p.0].value.shape()[1];
                    if wants(p) {
                        let mut gp = Vec::with_capacity(n * w);
                        for r in 0..n {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        acc(p, gp);
                    }
                    offset += w;
                }
            }
            Op::ScaleCols { x, factors } => {
                let m = factors.len();
                acc(
                    *x,
                    g.iter()
                        .enumerate()
                        .map(|(k, v)| v * factors[k % m])
                        .collect(),
                );
            }
            Op::PickPerRow { x, idx } => {
                let m = nodes[x.0].value.shape()[1];
                let mut gx = vec![0.0; val(*x).len()];
                for (r, (&c, gv)) in idx.iter().zip(g).enumerate() {
                    gx[r * m + c] += gv;
                }
                acc(*x, gx);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; val(*x).len()]),
            Op::Mean(x) => {
                let n = val(*x).len();
                acc(*x, vec![g[0] / n as f64; n]);
            }
        }
        Ok(())
    }
}

/// Per-channel mean and biased variance of a (B,C,plane) buffer.
fn channel_moments(xd: &[f64], b: usize, c: usize, plane: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (b * plane) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for bi in 0..b {
        for ci in 0..c {
            mean[ci] += xd[(bi * c + ci) * plane..(bi * c + ci + 1) * plane]
                .iter()
                .sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    for bi in 0..b {
        for ci in 0..c {
            let s = &xd[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
            var[ci] += s.iter().map(|v| (v - mean[ci]).powi(2)).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    (mean, var)
}

pub(crate) fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn pairwise_sqdist_raw(a: &[f64], b: &[f64], n: usize, m: usize, d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * m);
    for r in 0..n {
        for c in 0..m {
            out.push(sqdist(&a[r * d..(r + 1) * d], &b[c * d..(c + 1) * d]));
        }
    }
    out
}
