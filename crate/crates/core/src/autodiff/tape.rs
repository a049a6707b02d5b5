use super::kernels::{self, ConvGeometry};
use super::{AutodiffError, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv3d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
    },
    GlobalSpatialPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu(Var),
    Tanh(Var),
    Add(Var, Var),
    Scale(Var, f32),
    Transpose(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    SelectRow(Var, usize),
    StackTime(Vec<Var>),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
    Mse {
        a: Var,
        target: Vec<f32>,
    },
    WeightedSum {
        a: Var,
        weights: Vec<f32>,
    },
}

/// Operator identifier as recorded on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Conv3d,
    GlobalSpatialPool,
    Linear,
    Relu,
    Tanh,
    Add,
    Scale,
    Transpose,
    Reshape,
    ConcatCols,
    SelectRow,
    StackTime,
    SoftmaxCrossEntropy,
    Mse,
    WeightedSum,
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv3d { .. } => OpKind::Conv3d,
            Op::GlobalSpatialPool(_) => OpKind::GlobalSpatialPool,
            Op::Linear { .. } => OpKind::Linear,
            Op::Relu(_) => OpKind::Relu,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Add(..) => OpKind::Add,
            Op::Scale(..) => OpKind::Scale,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Reshape(_) => OpKind::Reshape,
            Op::ConcatCols(_) => OpKind::ConcatCols,
            Op::SelectRow(..) => OpKind::SelectRow,
            Op::StackTime(_) => OpKind::StackTime,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
            Op::Mse { .. } => OpKind::Mse,
            Op::WeightedSum { .. } => OpKind::WeightedSum,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv3d { x, w, b, .. } | Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::GlobalSpatialPool(a)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::SelectRow(a, _) => vec![*a],
            Op::Add(a, b) => vec![*a, *b],
            Op::ConcatCols(v) | Op::StackTime(v) => v.clone(),
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            Op::Mse { a, .. } | Op::WeightedSum { a, .. } => vec![*a],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// One recorded operation: `(op, inputs, output)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TapeEntry {
    pub op: OpKind,
    pub inputs: Vec<Var>,
    pub output: Var,
}

/// Ordered record of operations. Inputs always precede their consumers.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(msg: impl Into<String>) -> AutodiffError {
    AutodiffError::Shape(msg.into())
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op
            .inputs()
            .iter()
            .any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf; gradients are tracked when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
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

    pub fn entries(&self) -> Vec<TapeEntry> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| TapeEntry {
                op: n.op.kind(),
                inputs: n.op.inputs(),
                output: Var(i),
            })
            .collect()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// `x`: C_in×T×H×W, `w`: C_out×C_in×kt×kh×kw, `b`: C_out.
    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Var, AutodiffError> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 4 || ws.len() != 5 || bs.len() != 1 {
            return Err(shape_err(format!("conv3d: x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        if ws[1] != xs[0] || bs[0] != ws[0] {
            return Err(shape_err(format!(
                "conv3d: input has {} channels, weight {ws:?}, bias {bs:?}",
                xs[0]
            )));
        }
        let geom = ConvGeometry {
            c_in: xs[0],
            c_out: ws[0],
            input: [xs[1], xs[2], xs[3]],
            kernel: [ws[2], ws[3], ws[4]],
            stride,
            pad,
        };
        let out = geom
            .output()
            .ok_or_else(|| shape_err(format!("conv3d: kernel does not fit {geom:?}")))?;
        let y = kernels::conv3d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let value = Tensor::new(vec![geom.c_out, out[0], out[1], out[2]], y)?;
        Ok(self.push(value, Op::Conv3d { x, w, b, geom }))
    }

    /// Mean over H and W: C×T×H×W → C×T.
    pub fn global_spatial_pool(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] == 0 || s[3] == 0 {
            return Err(shape_err(format!("global_spatial_pool: {s:?}")));
        }
        let hw = s[2] * s[3];
        let data: Vec<f32> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|c| c.iter().sum::<f32>() / hw as f32)
            .collect();
        let value = Tensor::new(vec![s[0], s[1]], data)?;
        Ok(self.push(value, Op::GlobalSpatialPool(x)))
    }

    /// `x wᵀ + b` with `x`: N×in, `w`: out×in, `b`: out.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[1] || bs[0] != ws[0] {
            return Err(shape_err(format!("linear: x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let (n, input, out) = (xs[0], xs[1], ws[0]);
        let bias = self.value(b).data();
        let mut y: Vec<f32> = (0..n).flat_map(|_| bias.iter().copied()).collect();
        kernels::gemm(
            n,
            input,
            out,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            1.0,
            &mut y,
        );
        let value = Tensor::new(vec![n, out], y)?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|a| a.max(0.0)).collect(),
        };
        self.push(value, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|a| a.tanh()).collect(),
        };
        self.push(value, Op::Tanh(x))
    }

    /// Elementwise sum of equally shaped tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(p, q)| p + q)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let v = self.value(a);
        let value = Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|x| x * s).collect(),
        };
        self.push(value, Op::Scale(a, s))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(shape_err(format!("transpose: {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], data)?;
        Ok(self.push(value, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let value = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// Concatenate 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let rows = parts
            .first()
            .map(|p| self.shape(*p)[0])
            .ok_or_else(|| shape_err("concat_cols: no inputs"))?;
        let mut cols = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != 2 || s[0] != rows {
                return Err(shape_err(format!("concat_cols: part shape {s:?}, rows {rows}")));
            }
            cols += s[1];
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                let c = self.shape(*p)[1];
                data.extend_from_slice(&self.value(*p).data()[r * c..(r + 1) * c]);
            }
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    /// Row `row` of a 2-D tensor as a 1×D tensor.
    pub fn select_row(&mut self, a: Var, row: usize) -> Result<Var, AutodiffError> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || row >= s[0] {
            return Err(shape_err(format!("select_row {row} of {s:?}")));
        }
        let data = self.value(a).data()[row * s[1]..(row + 1) * s[1]].to_vec();
        let value = Tensor::new(vec![1, s[1]], data)?;
        Ok(self.push(value, Op::SelectRow(a, row)))
    }

    /// Stack T tensors of `C·H·W` values (channel-major) into C×T×H×W.
    pub fn stack_time(&mut self, frames: &[Var], chw: [usize; 3]) -> Result<Var, AutodiffError> {
        let [c, h, w] = chw;
        let plane = h * w;
        let t = frames.len();
        if t == 0 {
            return Err(shape_err("stack_time: no frames"));
        }
        let mut data = vec![0.0; c * t * plane];
        for (k, f) in frames.iter().enumerate() {
            let src = self.value(*f).data();
            if src.len() != c * plane {
                return Err(shape_err(format!(
                    "stack_time: frame {k} has {} values, expected {}",
                    src.len(),
                    c * plane
                )));
            }
            for ch in 0..c {
                data[(ch * t + k) * plane..][..plane].copy_from_slice(&src[ch * plane..][..plane]);
            }
        }
        let value = Tensor::new(vec![c, t, h, w], data)?;
        Ok(self.push(value, Op::StackTime(frames.to_vec())))
    }

    /// Mean over rows of `-log softmax(logits)[label]`; `logits` is N×K.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
    ) -> Result<Var, AutodiffError> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(shape_err(format!(
                "softmax_cross_entropy: logits {s:?}, {} labels",
                labels.len()
            )));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(AutodiffError::LabelOutOfRange { label, classes: k });
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0f32; n * k];
        let mut loss = 0.0f64;
        for r in 0..n {
            let row = &z[r * k..(r + 1) * k];
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let sum: f64 = row.iter().map(|v| ((v - m) as f64).exp()).sum();
            for (p, v) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                *p = (((v - m) as f64).exp() / sum) as f32;
            }
            loss += sum.ln() - (row[labels[r]] - m) as f64;
        }
        let value = Tensor::scalar((loss / n as f64) as f32);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Mean squared difference to a constant target.
    pub fn mse(&mut self, a: Var, target: &Tensor) -> Result<Var, AutodiffError> {
        if self.shape(a) != target.shape() {
            return Err(shape_err(format!(
                "mse: {:?} vs target {:?}",
                self.shape(a),
                target.shape()
            )));
        }
        let n = target.numel() as f64;
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, q)| ((p - q) as f64).powi(2))
            .sum();
        let value = Tensor::scalar((s / n) as f32);
        Ok(self.push(
            value,
            Op::Mse {
                a,
                target: target.data().to_vec(),
            },
        ))
    }

    /// `Σ a_i w_i` for a constant weight vector.
    pub fn weighted_sum(&mut self, a: Var, weights: &[f32]) -> Result<Var, AutodiffError> {
        if self.value(a).numel() != weights.len() {
            return Err(shape_err("weighted_sum: length mismatch"));
        }
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(weights)
            .map(|(p, q)| *p as f64 * *q as f64)
            .sum();
        let value = Tensor::scalar(s as f32);
        Ok(self.push(
            value,
            Op::WeightedSum {
                a,
                weights: weights.to_vec(),
            },
        ))
    }

    /// Reverse pass from a scalar node. Nodes recorded after `loss`, and nodes
    /// that do not feed it, receive no gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(AutodiffError::NotScalar(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        let mut visits = Vec::new();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            visits.push(i);
            self.backprop_node(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads, visits })
    }

    fn backprop_node(&self, i: usize, dy: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, g: Vec<f32>| match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, x)| *e += x),
            slot @ None => *slot = Some(g),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv3d { x, w, b, geom } => {
                if needs(x) {
                    acc(*x, kernels::conv3d_backward_input(geom, self.value(*w).data(), dy));
                }
                if needs(w) || needs(b) {
                    let (dw, db) = kernels::conv3d_backward_params(geom, self.value(*x).data(), dy);
                    if needs(w) {
                        acc(*w, dw);
                    }
                    if needs(b) {
                        acc(*b, db);
                    }
                }
            }
            Op::GlobalSpatialPool(x) => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                let inv = 1.0 / hw as f32;
                let g = dy.iter().flat_map(|d| std::iter::repeat(d * inv).take(hw)).collect();
                acc(*x, g);
            }
            Op::Linear { x, w, b } => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                let (n, input, out) = (xs[0], xs[1], ws[0]);
                if needs(x) {
                    let mut dx = vec![0.0; n * input];
                    kernels::gemm(n, out, input, dy, false, self.value(*w).data(), false, 0.0, &mut dx);
                    acc(*x, dx);
                }
                if needs(w) {
                    let mut dw = vec![0.0; out * input];
                    kernels::gemm(out, n, input, dy, true, self.value(*x).data(), false, 0.0, &mut dw);
                    acc(*w, dw);
                }
                if needs(b) {
                    let mut db = vec![0.0; out];
                    for row in dy.chunks(out) {
                        db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                    acc(*b, db);
                }
            }
            Op::Relu(x) => {
                let g = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(v, d)| if *v > 0.0 { *d } else { 0.0 })
                    .collect();
                acc(*x, g);
            }
            Op::Tanh(x) => {
                let g = node
                    .value
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(y, d)| d * (1.0 - y * y))
                    .collect();
                acc(*x, g);
            }
            Op::Add(a, b) => {
                if needs(a) {
                    acc(*a, dy.to_vec());
                }
                if needs(b) {
                    acc(*b, dy.to_vec());
                }
            }
            Op::Scale(a, s) => acc(*a, dy.iter().map(|d| d * s).collect()),
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (r, c) = (s[0], s[1]);
                let mut g = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        g[i * c + j] = dy[j * r + i];
                    }
                }
                acc(*a, g);
            }
            Op::Reshape(a) => acc(*a, dy.to_vec()),
            Op::ConcatCols(parts) => {
                let rows = self.shape(parts[0])[0];
                let total: usize = parts.iter().map(|p| self.shape(*p)[1]).sum();
                let mut offset = 0;
                for p in parts {
                    let c = self.shape(*p)[1];
                    if needs(p) {
                        let mut g = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            g.extend_from_slice(&dy[r * total + offset..][..c]);
                        }
                        acc(*p, g);
                    }
                    offset += c;
                }
            }
            Op::SelectRow(a, row) => {
                let s = self.shape(*a);
                let mut g = vec![0.0; s[0] * s[1]];
                g[row * s[1]..(row + 1) * s[1]].copy_from_slice(dy);
                acc(*a, g);
            }
            Op::StackTime(frames) => {
                let s = node.value.shape();
                let (c, t, plane) = (s[0], s[1], s[2] * s[3]);
                for (k, f) in frames.iter().enumerate() {
                    if !needs(f) {
                        continue;
                    }
                    let mut g = vec![0.0; c * plane];
                    for ch in 0..c {
                        g[ch * plane..][..plane].copy_from_slice(&dy[(ch * t + k) * plane..][..plane]);
                    }
                    acc(*f, g);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = dy[0] / n as f32;
                let mut g: Vec<f32> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    g[r * k + l] -= scale;
                }
                acc(*logits, g);
            }
            Op::Mse { a, target } => {
                let scale = 2.0 * dy[0] / target.len() as f32;
                let g = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(p, q)| scale * (p - q))
                    .collect();
                acc(*a, g);
            }
            Op::WeightedSum { a, weights } => acc(*a, weights.iter().map(|w| w * dy[0]).collect()),
        }
    }
}

/// Gradients from one backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    visits: Vec<usize>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when `v` did not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zero-filled when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f32> {
        self.get(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }

    /// Node indices in the order the reverse pass processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visits
    }
}
