use super::{matmul_nt_kernel, matmul_tn_kernel, Tensor};
use crate::error::{Error, Result};

/// Normalization epsilon shared by every layer-norm site.
pub const LAYERNORM_EPS: f64 = 1e-5;

/// Storage precision for values recorded on a tape.
///
/// `F64` is mandatory for verification paths (merging, gradient checks).
/// `F32` emulates single-precision activation storage by rounding every
/// recorded value through `f32`; it exists for training-mode experiments
/// only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    /// Leaf: externally supplied value.
    Input,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    Mean(usize),
    Relu(usize),
    Gelu(usize),
    Exp(usize),
    Log(usize),
    SoftmaxLast(usize),
    /// x, gain, bias; saves (xhat, inv_std).
    LayerNorm(usize, usize, usize),
    ConcatRows(usize, usize),
    SliceRows {
        input: usize,
        start: usize,
        len: usize,
    },
    Reshape(usize),
    /// Mean softmax cross-entropy over rows; saves softmax probabilities.
    CrossEntropyMean {
        logits: usize,
        labels: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
    saved: Vec<Tensor>,
}

/// Wengert tape: records primitive operations in forward order and
/// replays them in reverse to accumulate gradients.
///
/// Values are immutable once recorded; only gradient buffers mutate.
/// Repeated [`Tape::backward`] calls accumulate into existing gradients
/// until [`Tape::zero_grads`] resets them.
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            precision: Precision::F64,
        }
    }

    pub fn with_precision(precision: Precision) -> Self {
        Tape {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Record a non-trainable leaf.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false, vec![])
    }

    /// Record a trainable leaf; its gradient is populated by `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, true, vec![])
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool, saved: Vec<Tensor>) -> Var {
        if self.precision == Precision::F32 {
            for v in value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
            saved,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        op_name: &'static str,
        value: Tensor,
        op: Op,
        requires_grad: bool,
        saved: Vec<Tensor>,
    ) -> Result<Var> {
        value.check_finite(op_name)?;
        Ok(self.push(value, op, requires_grad, saved))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ── Forward operations ─────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push_checked("matmul", out, Op::MatMul(a.0, b.0), self.any_grad(&[a, b]), vec![])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transposed()?;
        self.push_checked("transpose", out, Op::Transpose(a.0), self.any_grad(&[a]), vec![])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_zip("add", self.value(a), self.value(b), |x, y| x + y)?;
        self.push_checked("add", out, Op::Add(a.0, b.0), self.any_grad(&[a, b]), vec![])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_zip("sub", self.value(a), self.value(b), |x, y| x - y)?;
        self.push_checked("sub", out, Op::Sub(a.0, b.0), self.any_grad(&[a, b]), vec![])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_zip("mul", self.value(a), self.value(b), |x, y| x * y)?;
        self.push_checked("mul", out, Op::Mul(a.0, b.0), self.any_grad(&[a, b]), vec![])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect())?;
        self.push_checked("scale", out, Op::Scale(a.0, c), self.any_grad(&[a]), vec![])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total: f64 = self.value(a).data().iter().sum();
        self.push_checked("sum", Tensor::scalar(total), Op::Sum(a.0), self.any_grad(&[a]), vec![])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let total: f64 = t.data().iter().sum();
        let out = Tensor::scalar(total / t.numel() as f64);
        self.push_checked("mean", out, Op::Mean(a.0), self.any_grad(&[a]), vec![])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|&v| v.max(0.0)).collect(),
        )?;
        self.push_checked("relu", out, Op::Relu(a.0), self.any_grad(&[a]), vec![])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| gelu(v)).collect())?;
        self.push_checked("gelu", out, Op::Gelu(a.0), self.any_grad(&[a]), vec![])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.exp()).collect())?;
        self.push_checked("exp", out, Op::Exp(a.0), self.any_grad(&[a]), vec![])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if let Some(&bad) = t.data().iter().find(|v| **v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                msg: format!("log of non-positive value {bad}"),
            });
        }
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.ln()).collect())?;
        self.push_checked("log", out, Op::Log(a.0), self.any_grad(&[a]), vec![])
    }

    /// Row-wise softmax over the trailing axis, stabilized by the row max.
    pub fn softmax_lastaxis(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape().is_empty() {
            return Err(Error::Dimension {
                op: "softmax_lastaxis",
                lhs: t.shape().to_vec(),
                rhs: vec![1],
            });
        }
        let d = t.last_dim();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push_checked(
            "softmax_lastaxis",
            out,
            Op::SoftmaxLast(a.0),
            self.any_grad(&[a]),
            vec![],
        )
    }

    /// Layer normalization over the trailing axis followed by the affine
    /// `gain ⊙ xhat + bias`. Zero-variance rows normalize to zero.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        for (name, v) in [("gain", gain), ("bias", bias)] {
            let s = self.value(v).shape();
            if s != [d] {
                return Err(Error::Dimension {
                    op: if name == "gain" { "layernorm gain" } else { "layernorm bias" },
                    lhs: t.shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
        }
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let rows = t.numel() / d;
        let mut xhat = vec![0.0; t.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; t.numel()];
        for r in 0..rows {
            let row = &t.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + LAYERNORM_EPS).sqrt();
            inv_std[r] = istd;
            for j in 0..d {
                let h = (row[j] - mean) * istd;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let saved = vec![
            Tensor::new(t.shape().to_vec(), xhat)?,
            Tensor::new(vec![rows], inv_std)?,
        ];
        let out = Tensor::new(t.shape().to_vec(), out)?;
        self.push_checked(
            "layernorm",
            out,
            Op::LayerNorm(x.0, gain.0, bias.0),
            self.any_grad(&[x, gain, bias]),
            saved,
        )
    }

    /// Stack two rank-2 tensors along the row axis.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.value(a).dims2()?;
        let (rb, cb) = self.value(b).dims2()?;
        if ca != cb {
            return Err(Error::Dimension {
                op: "concat_rows",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut data = Vec::with_capacity((ra + rb) * ca);
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let out = Tensor::new(vec![ra + rb, ca], data)?;
        self.push_checked(
            "concat_rows",
            out,
            Op::ConcatRows(a.0, b.0),
            self.any_grad(&[a, b]),
            vec![],
        )
    }

    /// Rows `start..start+len` of a rank-2 tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        if start + len > r || len == 0 {
            return Err(Error::Contract(format!(
                "slice_rows {start}..{} out of range for {r} rows",
                start + len
            )));
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::new(vec![len, c], data)?;
        self.push_checked(
            "slice_rows",
            out,
            Op::SliceRows {
                input: a.0,
                start,
                len,
            },
            self.any_grad(&[a]),
            vec![],
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshaped(shape)?;
        self.push_checked("reshape", out, Op::Reshape(a.0), self.any_grad(&[a]), vec![])
    }

    /// Mean softmax cross-entropy of `logits` rows against integer labels,
    /// computed with log-sum-exp stabilization.
    pub fn cross_entropy_mean(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (rows, classes) = t.dims2()?;
        if labels.len() != rows {
            return Err(Error::Contract(format!(
                "{} labels for {rows} logit rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let mut probs = vec![0.0; rows * classes];
        let mut total = 0.0;
        for r in 0..rows {
            let row = &t.data()[r * classes..(r + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[labels[r]];
            for j in 0..classes {
                probs[r * classes + j] = (row[j] - lse).exp();
            }
        }
        let saved = vec![Tensor::new(vec![rows, classes], probs)?];
        let out = Tensor::scalar(total / rows as f64);
        self.push_checked(
            "cross_entropy_mean",
            out,
            Op::CrossEntropyMean {
                logits: logits.0,
                labels: labels.to_vec(),
            },
            self.any_grad(&[logits]),
            saved,
        )
    }

    // ── Backward pass ──────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients of `requires_grad`
    /// nodes accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut pending: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        pending[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let Some(grad_out) = pending[id].take() else {
                continue;
            };
            if !self.nodes[id].requires_grad {
                continue;
            }
            let input_grads = self.local_grads(id, &grad_out)?;
            for (input_id, g) in input_grads {
                if !self.nodes[input_id].requires_grad {
                    continue;
                }
                g.check_finite("backward")?;
                match &mut pending[input_id] {
                    Some(acc) => accumulate(acc, &g),
                    slot @ None => *slot = Some(g),
                }
            }
            let node = &mut self.nodes[id];
            match &mut node.grad {
                Some(acc) => accumulate(acc, &grad_out),
                slot @ None => *slot = Some(grad_out),
            }
        }
        Ok(())
    }

    /// Gradients flowing from node `id` to each of its inputs.
    fn local_grads(&self, id: usize, grad_out: &Tensor) -> Result<Vec<(usize, Tensor)>> {
        let node = &self.nodes[id];
        let val = |i: usize| &self.nodes[i].value;
        Ok(match &node.op {
            Op::Input => vec![],
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2()?;
                let (_, n) = val(*b).dims2()?;
                let mut da = vec![0.0; m * k];
                matmul_nt_kernel(grad_out.data(), val(*b).data(), &mut da, m, n, k);
                let mut db = vec![0.0; k * n];
                matmul_tn_kernel(val(*a).data(), grad_out.data(), &mut db, m, k, n);
                vec![
                    (*a, Tensor::new(vec![m, k], da)?),
                    (*b, Tensor::new(vec![k, n], db)?),
                ]
            }
            Op::Transpose(a) => vec![(*a, grad_out.transposed()?)],
            Op::Add(a, b) => vec![
                (*a, grad_out.clone()),
                (*b, reduce_to_shape(grad_out, val(*b).shape(), 1.0)?),
            ],
            Op::Sub(a, b) => vec![
                (*a, grad_out.clone()),
                (*b, reduce_to_shape(grad_out, val(*b).shape(), -1.0)?),
            ],
            Op::Mul(a, b) => {
                let da = broadcast_zip("mul_bwd", grad_out, val(*b), |g, y| g * y)?;
                let gx = grad_out
                    .data()
                    .iter()
                    .zip(val(*a).data())
                    .map(|(g, x)| g * x)
                    .collect();
                let gx = Tensor::new(grad_out.shape().to_vec(), gx)?;
                vec![(*a, da), (*b, reduce_to_shape(&gx, val(*b).shape(), 1.0)?)]
            }
            Op::Scale(a, c) => {
                let g = grad_out.data().iter().map(|v| v * c).collect();
                vec![(*a, Tensor::new(grad_out.shape().to_vec(), g)?)]
            }
            Op::Sum(a) => {
                let g = grad_out.item()?;
                vec![(*a, Tensor::full(val(*a).shape(), g))]
            }
            Op::Mean(a) => {
                let g = grad_out.item()? / val(*a).numel() as f64;
                vec![(*a, Tensor::full(val(*a).shape(), g))]
            }
            Op::Relu(a) => {
                let g = val(*a)
                    .data()
                    .iter()
                    .zip(grad_out.data())
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                vec![(*a, Tensor::new(grad_out.shape().to_vec(), g)?)]
            }
            Op::Gelu(a) => {
                let g = val(*a)
                    .data()
                    .iter()
                    .zip(grad_out.data())
                    .map(|(&x, &g)| g * gelu_grad(x))
                    .collect();
                vec![(*a, Tensor::new(grad_out.shape().to_vec(), g)?)]
            }
            Op::Exp(a) => {
                let g = node
                    .value
                    .data()
                    .iter()
                    .zip(grad_out.data())
                    .map(|(&y, &g)| g * y)
                    .collect();
                vec![(*a, Tensor::new(grad_out.shape().to_vec(), g)?)]
            }
            Op::Log(a) => {
                let g = val(*a)
                    .data()
                    .iter()
                    .zip(grad_out.data())
                    .map(|(&x, &g)| g / x)
                    .collect();
                vec![(*a, Tensor::new(grad_out.shape().to_vec(), g)?)]
            }
            Op::SoftmaxLast(a) => {
                let s = &node.value;
                let d = s.last_dim();
                let mut g = vec![0.0; s.numel()];
                for (r, (srow, grow)) in
                    s.data().chunks(d).zip(grad_out.data().chunks(d)).enumerate()
                {
                    let dot: f64 = srow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        g[r * d + j] = srow[j] * (grow[j] - dot);
                    }
                }
                vec![(*a, Tensor::new(s.shape().to_vec(), g)?)]
            }
            Op::LayerNorm(x, gain, bias) => {
                let xhat = &node.saved[0];
                let inv_std = &node.saved[1];
                let d = xhat.last_dim();
                let rows = xhat.numel() / d;
                let gv = val(*gain).data();
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                let mut dx = vec![0.0; xhat.numel()];
                for r in 0..rows {
                    let h = &xhat.data()[r * d..(r + 1) * d];
                    let go = &grad_out.data()[r * d..(r + 1) * d];
                    let istd = inv_std.data()[r];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        dgain[j] += go[j] * h[j];
                        dbias[j] += go[j];
                        let dh = go[j] * gv[j];
                        mean_dh += dh;
                        mean_dh_h += dh * h[j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let dh = go[j] * gv[j];
                        dx[r * d + j] = istd * (dh - mean_dh - h[j] * mean_dh_h);
                    }
                }
                vec![
                    (*x, Tensor::new(xhat.shape().to_vec(), dx)?),
                    (*gain, Tensor::new(vec![d], dgain)?),
                    (*bias, Tensor::new(vec![d], dbias)?),
                ]
            }
            Op::ConcatRows(a, b) => {
                let (ra, c) = val(*a).dims2()?;
                let (rb, _) = val(*b).dims2()?;
                let da = grad_out.data()[..ra * c].to_vec();
                let db = grad_out.data()[ra * c..].to_vec();
                vec![
                    (*a, Tensor::new(vec![ra, c], da)?),
                    (*b, Tensor::new(vec![rb, c], db)?),
                ]
            }
            Op::SliceRows { input, start, len } => {
                let (r, c) = val(*input).dims2()?;
                let mut g = vec![0.0; r * c];
                g[start * c..(start + len) * c].copy_from_slice(grad_out.data());
                vec![(*input, Tensor::new(vec![r, c], g)?)]
            }
            Op::Reshape(a) => vec![(*a, grad_out.reshaped(val(*a).shape())?)],
            Op::CrossEntropyMean { logits, labels } => {
                let probs = &node.saved[0];
                let (rows, classes) = probs.dims2()?;
                let scale = grad_out.item()? / rows as f64;
                let mut g = probs.data().iter().map(|p| p * scale).collect::<Vec<_>>();
                for (r, &label) in labels.iter().enumerate() {
                    g[r * classes + label] -= scale;
                }
                vec![(*logits, Tensor::new(vec![rows, classes], g)?)]
            }
        })
    }
}

fn accumulate(acc: &mut Tensor, g: &Tensor) {
    debug_assert_eq!(acc.shape(), g.shape());
    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += b;
    }
}

/// Elementwise combine with the trailing-axis broadcast rule: shapes match
/// exactly, or `b` is a vector whose length equals `a`'s trailing axis.
fn broadcast_zip(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    let d = a.last_dim();
    if b.shape() == [d] && !a.shape().is_empty() {
        let mut data = Vec::with_capacity(a.numel());
        for chunk in a.data().chunks(d) {
            for (x, y) in chunk.iter().zip(b.data()) {
                data.push(f(*x, *y));
            }
        }
        return Tensor::new(a.shape().to_vec(), data);
    }
    Err(Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })
}

/// Reduce `grad` down to `shape` by summing broadcast axes (identity when
/// shapes already match), scaled by `sign`.
fn reduce_to_shape(grad: &Tensor, shape: &[usize], sign: f64) -> Result<Tensor> {
    if grad.shape() == shape {
        let data = grad.data().iter().map(|v| v * sign).collect();
        return Tensor::new(shape.to_vec(), data);
    }
    let d = shape[0];
    let mut out = vec![0.0; d];
    for chunk in grad.data().chunks(d) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v * sign;
        }
    }
    Tensor::new(shape.to_vec(), out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
