//! Define-by-run tape: ops record themselves as they execute, a reverse
//! sweep propagates gradients. One tape per training step, never shared.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    /// Multiply by a constant factor.
    Scale(VarId, f64),
    /// Broadcast-multiply a tracked scalar over a tensor.
    SMul { scalar: VarId, tensor: VarId },
    /// Elementwise reciprocal. Callers guard denominators.
    Recip(VarId),
    Relu(VarId),
    Matmul(VarId, VarId),
    Conv3d { input: VarId, kernels: VarId, stride: usize },
    /// Per-channel bias over the leading axis of a rank-4 tensor.
    ChannelBias { input: VarId, bias: VarId },
    Reshape(VarId),
    Sum(VarId),
    Mean(VarId),
    Dot(VarId, VarId),
    L2Norm(VarId),
    SoftmaxCrossEntropy { logits: VarId, label: usize },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Append-only record of primitive applications. Inputs always precede the
/// nodes that consume them, so one reverse pass visits each node once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients per tape node, populated by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. the given variable, if it was reached.
    pub fn get(&self, id: VarId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a constant: participates in forward values, receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.push(Op::Leaf, value, false)
    }

    /// Record a tracked input: gradient is produced for it by `backward`.
    pub fn input(&mut self, value: Tensor) -> VarId {
        self.push(Op::Leaf, value, true)
    }

    /// Forward value of a recorded variable.
    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> VarId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        VarId(self.nodes.len() - 1)
    }

    fn needs(&self, id: VarId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn check(&self, id: VarId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::Tape(format!("variable {} not on this tape", id.0)));
        }
        Ok(())
    }

    fn binary_same_shape(&mut self, a: VarId, b: VarId, which: &str) -> Result<(Vec<usize>, Vec<f64>, Vec<f64>)> {
        self.check(a)?;
        self.check(b)?;
        let ta = self.value(a);
        let tb = self.value(b);
        if ta.shape() != tb.shape() {
            return Err(Error::shape(format!(
                "{which}: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        Ok((ta.shape().to_vec(), ta.data().to_vec(), tb.data().to_vec()))
    }

    // ── Elementwise ─────────────────────────────────────────────────

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (shape, da, db) = self.binary_same_shape(a, b, "add")?;
        let out: Vec<f64> = da.iter().zip(&db).map(|(x, y)| x + y).collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), Tensor::new(shape, out)?, needs))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (shape, da, db) = self.binary_same_shape(a, b, "sub")?;
        let out: Vec<f64> = da.iter().zip(&db).map(|(x, y)| x - y).collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), Tensor::new(shape, out)?, needs))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (shape, da, db) = self.binary_same_shape(a, b, "mul")?;
        let out: Vec<f64> = da.iter().zip(&db).map(|(x, y)| x * y).collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), Tensor::new(shape, out)?, needs))
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> Result<VarId> {
        self.check(a)?;
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * c).collect())?;
        let needs = self.needs(a);
        Ok(self.push(Op::Scale(a, c), out, needs))
    }

    /// Broadcast-multiply: `scalar` must have one element.
    pub fn smul(&mut self, scalar: VarId, tensor: VarId) -> Result<VarId> {
        self.check(scalar)?;
        self.check(tensor)?;
        if self.value(scalar).numel() != 1 {
            return Err(Error::shape(format!(
                "smul: scalar operand has shape {:?}",
                self.value(scalar).shape()
            )));
        }
        let s = self.value(scalar).item();
        let t = self.value(tensor);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * s).collect())?;
        let needs = self.needs(scalar) || self.needs(tensor);
        Ok(self.push(Op::SMul { scalar, tensor }, out, needs))
    }

    pub fn recip(&mut self, a: VarId) -> Result<VarId> {
        self.check(a)?;
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| 1.0 / x).collect())?;
        let needs = self.needs(a);
        Ok(self.push(Op::Recip(a), out, needs))
    }

    pub fn relu(&mut self, a: VarId) -> Result<VarId> {
        self.check(a)?;
        let t = self.value(a);
        let out = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect(),
        )?;
        let needs = self.needs(a);
        Ok(self.push(Op::Relu(a), out, needs))
    }

    // ── Linear algebra ──────────────────────────────────────────────

    /// 2-D matrix product `[m,n] x [n,p] -> [m,p]`.
    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::dim(format!("matmul needs 2-D operands, got {sa:?} x {sb:?}")));
        }
        if sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul inner extents differ: {sa:?} x {sb:?}")));
        }
        let (m, n, p) = (sa[0], sa[1], sb[1]);
        let da = self.value(a).data();
        let db = self.value(b).data();
        let mut out = vec![0.0; m * p];
        for i in 0..m {
            for t in 0..n {
                let aval = da[i * n + t];
                if aval == 0.0 {
                    continue;
                }
                for j in 0..p {
                    out[i * p + j] += aval * db[t * p + j];
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul(a, b), Tensor::new(vec![m, p], out)?, needs))
    }

    /// Valid (no padding) 3-D convolution.
    /// Input `[C,D,H,W]`, kernels `[K,C,kd,kh,kw]`, one stride for all axes.
    pub fn conv3d(&mut self, input: VarId, kernels: VarId, stride: usize) -> Result<VarId> {
        self.check(input)?;
        self.check(kernels)?;
        if stride < 1 {
            return Err(Error::invalid("conv3d stride must be >= 1".to_string()));
        }
        let si = self.value(input).shape().to_vec();
        let sk = self.value(kernels).shape().to_vec();
        if si.len() != 4 || sk.len() != 5 {
            return Err(Error::dim(format!(
                "conv3d expects input [C,D,H,W] and kernels [K,C,kd,kh,kw], got {si:?} and {sk:?}"
            )));
        }
        let (c, d, h, w) = (si[0], si[1], si[2], si[3]);
        let (k, kc, kd, kh, kw) = (sk[0], sk[1], sk[2], sk[3], sk[4]);
        if kc != c {
            return Err(Error::dim(format!("conv3d channel mismatch: input {c}, kernels {kc}")));
        }
        if kd > d || kh > h || kw > w {
            return Err(Error::dim(format!(
                "conv3d kernel larger than input: kernel [{kd},{kh},{kw}] vs input [{d},{h},{w}]"
            )));
        }
        let od = (d - kd) / stride + 1;
        let oh = (h - kh) / stride + 1;
        let ow = (w - kw) / stride + 1;

        let din = self.value(input).data();
        let dker = self.value(kernels).data();
        let mut out = vec![0.0; k * od * oh * ow];
        for ko in 0..k {
            for zo in 0..od {
                for yo in 0..oh {
                    for xo in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for z in 0..kd {
                                for y in 0..kh {
                                    for x in 0..kw {
                                        let iv = din[((ci * d + (zo * stride + z)) * h
                                            + (yo * stride + y))
                                            * w
                                            + (xo * stride + x)];
                                        let kv = dker[(((ko * c + ci) * kd + z) * kh + y) * kw + x];
                                        acc += iv * kv;
                                    }
                                }
                            }
                        }
                        out[((ko * od + zo) * oh + yo) * ow + xo] = acc;
                    }
                }
            }
        }
        let needs = self.needs(input) || self.needs(kernels);
        Ok(self.push(
            Op::Conv3d { input, kernels, stride },
            Tensor::new(vec![k, od, oh, ow], out)?,
            needs,
        ))
    }

    /// Add `bias[k]` to every element of channel `k` of a rank-4 input.
    pub fn channel_bias(&mut self, input: VarId, bias: VarId) -> Result<VarId> {
        self.check(input)?;
        self.check(bias)?;
        let si = self.value(input).shape().to_vec();
        let sb = self.value(bias).shape().to_vec();
        if si.len() != 4 || sb.len() != 1 || sb[0] != si[0] {
            return Err(Error::shape(format!(
                "channel_bias: input {si:?} vs bias {sb:?}"
            )));
        }
        let per = si[1] * si[2] * si[3];
        let din = self.value(input).data();
        let dbias = self.value(bias).data();
        let mut out = vec![0.0; din.len()];
        for k in 0..si[0] {
            for i in 0..per {
                out[k * per + i] = din[k * per + i] + dbias[k];
            }
        }
        let needs = self.needs(input) || self.needs(bias);
        Ok(self.push(Op::ChannelBias { input, bias }, Tensor::new(si, out)?, needs))
    }

    pub fn reshape(&mut self, a: VarId, shape: Vec<usize>) -> Result<VarId> {
        self.check(a)?;
        let t = self.value(a);
        let numel: usize = shape.iter().product();
        if numel != t.numel() {
            return Err(Error::shape(format!(
                "reshape {:?} -> {shape:?} changes element count",
                t.shape()
            )));
        }
        let out = Tensor::new(shape, t.data().to_vec())?;
        let needs = self.needs(a);
        Ok(self.push(Op::Reshape(a), out, needs))
    }

    // ── Reductions ──────────────────────────────────────────────────

    pub fn sum(&mut self, a: VarId) -> Result<VarId> {
        self.check(a)?;
        let s: f64 = self.value(a).data().iter().sum();
        let needs = self.needs(a);
        Ok(self.push(Op::Sum(a), Tensor::scalar(s), needs))
    }

    pub fn mean(&mut self, a: VarId) -> Result<VarId> {
        self.check(a)?;
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        let needs = self.needs(a);
        Ok(self.push(Op::Mean(a), Tensor::scalar(m), needs))
    }

    /// Dot product of two equal-length variables (flattened).
    pub fn dot(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check(a)?;
        self.check(b)?;
        if self.value(a).numel() != self.value(b).numel() {
            return Err(Error::dim(format!(
                "dot: lengths {} vs {}",
                self.value(a).numel(),
                self.value(b).numel()
            )));
        }
        let s = super::dot(self.value(a).data(), self.value(b).data());
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Dot(a, b), Tensor::scalar(s), needs))
    }

    /// Euclidean norm. At the zero vector the value and gradient are both 0.
    pub fn l2_norm(&mut self, a: VarId) -> Result<VarId> {
        self.check(a)?;
        let n = super::l2_norm(self.value(a).data());
        let needs = self.needs(a);
        Ok(self.push(Op::L2Norm(a), Tensor::scalar(n), needs))
    }

    /// Numerically stabilized softmax cross-entropy of 1-D logits against a
    /// class index.
    pub fn softmax_cross_entropy(&mut self, logits: VarId, label: usize) -> Result<VarId> {
        self.check(logits)?;
        let t = self.value(logits);
        if t.shape().len() != 1 {
            return Err(Error::dim(format!(
                "softmax_cross_entropy expects 1-D logits, got {:?}",
                t.shape()
            )));
        }
        let classes = t.numel();
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let xs = t.data();
        let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        let loss = lse - xs[label];
        let needs = self.needs(logits);
        Ok(self.push(
            Op::SoftmaxCrossEntropy { logits, label },
            Tensor::scalar(loss),
            needs,
        ))
    }

    // ── Reverse sweep ───────────────────────────────────────────────

    /// Propagate d(loss)/d(node) from a scalar loss back to every tracked
    /// leaf. Deterministic: nodes are visited in strict reverse creation
    /// order, each exactly once.
    pub fn backward(&self, loss: VarId) -> Result<Gradients> {
        self.check(loss)?;
        if self.value(loss).numel() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        for i in (0..=loss.0).rev() {
            if grads[i].is_none() {
                continue;
            }
            let g = match self.nodes[i].op {
                // Leaf gradients are the output; keep them.
                Op::Leaf => continue,
                _ => grads[i].take().expect("checked above"),
            };
            self.accumulate_into_inputs(i, &g, &mut grads);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| {
                    Tensor::new(self.nodes[i].value.shape().to_vec(), data)
                        .expect("gradient shape matches value shape")
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate_into_inputs(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let acc = |grads: &mut [Option<Vec<f64>>], id: VarId, contrib: &dyn Fn(&mut Vec<f64>)| {
            if !self.needs(id) {
                return;
            }
            let slot = grads[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].value.numel()]);
            contrib(slot);
        };

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, &|s| add_assign(s, g));
                acc(grads, *b, &|s| add_assign(s, g));
            }
            Op::Sub(a, b) => {
                acc(grads, *a, &|s| add_assign(s, g));
                acc(grads, *b, &|s| {
                    for (si, gi) in s.iter_mut().zip(g) {
                        *si -= gi;
                    }
                });
            }
            Op::Mul(a, b) => {
                let da = self.nodes[a.0].value.data();
                let db = self.nodes[b.0].value.data();
                acc(grads, *a, &|s| {
                    for ((si, gi), bi) in s.iter_mut().zip(g).zip(db) {
                        *si += gi * bi;
                    }
                });
                acc(grads, *b, &|s| {
                    for ((si, gi), ai) in s.iter_mut().zip(g).zip(da) {
                        *si += gi * ai;
                    }
                });
            }
            Op::Scale(a, c) => {
                acc(grads, *a, &|s| {
                    for (si, gi) in s.iter_mut().zip(g) {
                        *si += gi * c;
                    }
                });
            }
            Op::SMul { scalar, tensor } => {
                let sval = self.nodes[scalar.0].value.item();
                let tdata = self.nodes[tensor.0].value.data();
                acc(grads, *tensor, &|s| {
                    for (si, gi) in s.iter_mut().zip(g) {
                        *si += gi * sval;
                    }
                });
                acc(grads, *scalar, &|s| {
                    s[0] += g.iter().zip(tdata).map(|(gi, ti)| gi * ti).sum::<f64>();
                });
            }
            Op::Recip(a) => {
                let da = self.nodes[a.0].value.data();
                acc(grads, *a, &|s| {
                    for ((si, gi), xi) in s.iter_mut().zip(g).zip(da) {
                        *si -= gi / (xi * xi);
                    }
                });
            }
            Op::Relu(a) => {
                // Subgradient 0 at exactly 0.
                let da = self.nodes[a.0].value.data();
                acc(grads, *a, &|s| {
                    for ((si, gi), xi) in s.iter_mut().zip(g).zip(da) {
                        if *xi > 0.0 {
                            *si += gi;
                        }
                    }
                });
            }
            Op::Matmul(a, b) => {
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                let (m, n, p) = (sa[0], sa[1], sb[1]);
                let da = self.nodes[a.0].value.data();
                let db = self.nodes[b.0].value.data();
                // dA = g . B^T
                acc(grads, *a, &|s| {
                    for i2 in 0..m {
                        for t in 0..n {
                            let mut v = 0.0;
                            for j in 0..p {
                                v += g[i2 * p + j] * db[t * p + j];
                            }
                            s[i2 * n + t] += v;
                        }
                    }
                });
                // dB = A^T . g
                acc(grads, *b, &|s| {
                    for t in 0..n {
                        for j in 0..p {
                            let mut v = 0.0;
                            for i2 in 0..m {
                                v += da[i2 * n + t] * g[i2 * p + j];
                            }
                            s[t * p + j] += v;
                        }
                    }
                });
            }
            Op::Conv3d { input, kernels, stride } => {
                let si = self.nodes[input.0].value.shape().to_vec();
                let sk = self.nodes[kernels.0].value.shape().to_vec();
                let (c, d, h, w) = (si[0], si[1], si[2], si[3]);
                let (k, kd, kh, kw) = (sk[0], sk[2], sk[3], sk[4]);
                let od = (d - kd) / stride + 1;
                let oh = (h - kh) / stride + 1;
                let ow = (w - kw) / stride + 1;
                let din = self.nodes[input.0].value.data();
                let dker = self.nodes[kernels.0].value.data();
                acc(grads, *input, &|s| {
                    for ko in 0..k {
                        for zo in 0..od {
                            for yo in 0..oh {
                                for xo in 0..ow {
                                    let go = g[((ko * od + zo) * oh + yo) * ow + xo];
                                    if go == 0.0 {
                                        continue;
                                    }
                                    for ci in 0..c {
                                        for z in 0..kd {
                                            for y in 0..kh {
                                                for x in 0..kw {
                                                    s[((ci * d + (zo * stride + z)) * h
                                                        + (yo * stride + y))
                                                        * w
                                                        + (xo * stride + x)] += go
                                                        * dker[(((ko * c + ci) * kd + z) * kh + y)
                                                            * kw
                                                            + x];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                acc(grads, *kernels, &|s| {
                    for ko in 0..k {
                        for zo in 0..od {
                            for yo in 0..oh {
                                for xo in 0..ow {
                                    let go = g[((ko * od + zo) * oh + yo) * ow + xo];
                                    if go == 0.0 {
                                        continue;
                                    }
                                    for ci in 0..c {
                                        for z in 0..kd {
                                            for y in 0..kh {
                                                for x in 0..kw {
                                                    s[(((ko * c + ci) * kd + z) * kh + y) * kw
                                                        + x] += go
                                                        * din[((ci * d + (zo * stride + z)) * h
                                                            + (yo * stride + y))
                                                            * w
                                                            + (xo * stride + x)];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::ChannelBias { input, bias } => {
                let si = self.nodes[input.0].value.shape();
                let per = si[1] * si[2] * si[3];
                let k = si[0];
                acc(grads, *input, &|s| add_assign(s, g));
                acc(grads, *bias, &|s| {
                    for (ko, sk) in s.iter_mut().enumerate().take(k) {
                        *sk += g[ko * per..(ko + 1) * per].iter().sum::<f64>();
                    }
                });
            }
            Op::Reshape(a) => {
                acc(grads, *a, &|s| add_assign(s, g));
            }
            Op::Sum(a) => {
                let g0 = g[0];
                acc(grads, *a, &|s| {
                    for si in s.iter_mut() {
                        *si += g0;
                    }
                });
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel() as f64;
                let g0 = g[0] / n;
                acc(grads, *a, &|s| {
                    for si in s.iter_mut() {
                        *si += g0;
                    }
                });
            }
            Op::Dot(a, b) => {
                let da = self.nodes[a.0].value.data();
                let db = self.nodes[b.0].value.data();
                let g0 = g[0];
                acc(grads, *a, &|s| {
                    for (si, bi) in s.iter_mut().zip(db) {
                        *si += g0 * bi;
                    }
                });
                acc(grads, *b, &|s| {
                    for (si, ai) in s.iter_mut().zip(da) {
                        *si += g0 * ai;
                    }
                });
            }
            Op::L2Norm(a) => {
                let norm = self.nodes[i].value.item();
                let da = self.nodes[a.0].value.data();
                let g0 = g[0];
                acc(grads, *a, &|s| {
                    if norm == 0.0 {
                        return;
                    }
                    for (si, xi) in s.iter_mut().zip(da) {
                        *si += g0 * xi / norm;
                    }
                });
            }
            Op::SoftmaxCrossEntropy { logits, label } => {
                let xs = self.nodes[logits.0].value.data();
                let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = xs.iter().map(|x| (x - m).exp()).sum();
                let g0 = g[0];
                let label = *label;
                acc(grads, *logits, &|s| {
                    for (j, (si, xi)) in s.iter_mut().zip(xs).enumerate() {
                        let p = (xi - m).exp() / denom;
                        let onehot = if j == label { 1.0 } else { 0.0 };
                        *si += g0 * (p - onehot);
                    }
                });
            }
        }
    }
}

fn add_assign(target: &mut [f64], src: &[f64]) {
    for (t, s) in target.iter_mut().zip(src) {
        *t += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, rel_err};

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::identity(2));
        let v = tape.constant(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
        let out = tape.matmul(i2, v).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 4.0]);
        assert_eq!(tape.value(out).shape(), &[2, 1]);
    }

    #[test]
    fn matmul_hand_scalar_product() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out).data(), &[11.0]);
    }

    #[test]
    fn matmul_dim_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        assert!(tape.matmul(a, b).is_err());
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = crate::rng::Rng::seeded(11);
        let a0 = Tensor::uniform(vec![3, 4], 1.0, &mut rng);
        let b0 = Tensor::uniform(vec![4, 2], 1.0, &mut rng);

        let mut tape = Tape::new();
        let a = tape.input(a0.clone());
        let b = tape.constant(b0.clone());
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum(c).unwrap();
        let grads = tape.backward(loss).unwrap();

        let fd = finite_diff_grad(
            |x| {
                let mut t = Tape::new();
                let a = t.input(x.clone());
                let b = t.constant(b0.clone());
                let c = t.matmul(a, b).unwrap();
                let l = t.sum(c).unwrap();
                t.value(l).item()
            },
            &a0,
            1e-6,
        );
        assert!(rel_err(grads.get(a).unwrap().data(), fd.data()) <= 1e-6);
    }

    #[test]
    fn conv3d_identity_kernel() {
        let mut rng = crate::rng::Rng::seeded(4);
        let input = Tensor::uniform(vec![1, 2, 3, 3], 1.0, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let k = tape.constant(Tensor::new(vec![1, 1, 1, 1, 1], vec![1.0]).unwrap());
        let out = tape.conv3d(x, k, 1).unwrap();
        assert_eq!(tape.value(out).data(), input.data());
    }

    #[test]
    fn conv3d_zero_kernel() {
        let mut rng = crate::rng::Rng::seeded(5);
        let input = Tensor::uniform(vec![2, 3, 3, 3], 1.0, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(input);
        let k = tape.constant(Tensor::zeros(vec![1, 2, 2, 2, 2]));
        let out = tape.conv3d(x, k, 1).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
        assert_eq!(tape.value(out).shape(), &[1, 2, 2, 2]);
    }

    #[test]
    fn conv3d_kernel_too_large() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 2, 2, 2]));
        let k = tape.constant(Tensor::zeros(vec![1, 1, 3, 2, 2]));
        assert!(tape.conv3d(x, k, 1).is_err());
    }

    #[test]
    fn conv3d_output_extents_with_stride() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 7, 6, 5]));
        let k = tape.constant(Tensor::zeros(vec![3, 1, 2, 2, 2]));
        let out = tape.conv3d(x, k, 2).unwrap();
        // floor((in - kernel)/stride) + 1 per axis
        assert_eq!(tape.value(out).shape(), &[3, 3, 3, 2]);
    }

    #[test]
    fn conv3d_gradients_match_finite_differences() {
        let mut rng = crate::rng::Rng::seeded(6);
        let input0 = Tensor::uniform(vec![1, 4, 4, 4], 1.0, &mut rng);
        let kernels0 = Tensor::uniform(vec![2, 1, 2, 2, 2], 1.0, &mut rng);

        let run = |inp: &Tensor, ker: &Tensor| {
            let mut t = Tape::new();
            let x = t.input(inp.clone());
            let k = t.input(ker.clone());
            let c = t.conv3d(x, k, 1).unwrap();
            let l = t.sum(c).unwrap();
            (t, x, k, l)
        };
        let (tape, x, k, loss) = run(&input0, &kernels0);
        let grads = tape.backward(loss).unwrap();

        let fd_in = finite_diff_grad(
            |p| {
                let (t, _, _, l) = run(p, &kernels0);
                t.value(l).item()
            },
            &input0,
            1e-5,
        );
        let fd_ker = finite_diff_grad(
            |p| {
                let (t, _, _, l) = run(&input0, p);
                t.value(l).item()
            },
            &kernels0,
            1e-5,
        );
        assert!(rel_err(grads.get(x).unwrap().data(), fd_in.data()) <= 1e-5);
        assert!(rel_err(grads.get(k).unwrap().data(), fd_ker.data()) <= 1e-5);
    }

    #[test]
    fn elementwise_basics() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let z = tape.constant(Tensor::zeros(vec![2]));
        let s = tape.sub(x, z).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0, 2.0]);

        let r = tape.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let relu = tape.relu(r).unwrap();
        assert_eq!(tape.value(relu).data(), &[0.0, 0.0, 2.0]);

        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let sum = tape.add(a, b).unwrap();
        assert_eq!(tape.value(sum).data(), &[4.0, 6.0]);

        let bad = tape.add(a, r);
        assert!(bad.is_err());
    }

    #[test]
    fn reductions_basics() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let n = tape.l2_norm(x).unwrap();
        assert_eq!(tape.value(n).item(), 5.0);

        let z = tape.constant(Tensor::zeros(vec![2]));
        let d = tape.dot(x, z).unwrap();
        assert_eq!(tape.value(d).item(), 0.0);

        let ones = tape.constant(Tensor::vector(vec![1.0; 5]));
        let s = tape.sum(ones).unwrap();
        assert_eq!(tape.value(s).item(), 5.0);

        let m = tape.mean(x).unwrap();
        assert_eq!(tape.value(m).item(), 3.5);
    }

    #[test]
    fn softmax_cross_entropy_cases() {
        let mut tape = Tape::new();
        let uniform = tape.constant(Tensor::vector(vec![0.0; 4]));
        let l = tape.softmax_cross_entropy(uniform, 1).unwrap();
        assert!((tape.value(l).item() - 4.0_f64.ln()).abs() < 1e-12);

        let saturated = tape.constant(Tensor::vector(vec![50.0, -50.0]));
        let l2 = tape.softmax_cross_entropy(saturated, 0).unwrap();
        assert!(tape.value(l2).item() < 1e-12);

        let logits = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let l3 = tape.softmax_cross_entropy(logits, 2).unwrap();
        // -ln softmax_2 of [1,2,3]
        let expect = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln() - 3.0;
        assert!((tape.value(l3).item() - expect).abs() < 1e-12);
        assert!((tape.value(l3).item() - 0.40760596444438079).abs() < 1e-10);

        let oob = tape.softmax_cross_entropy(logits, 3);
        assert!(oob.is_err());
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![1.0, -2.0, 3.0]));
        let loss = tape.sum(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_quadratic_rule() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![1.0, -2.0, 3.0]));
        let loss = tape.dot(x, x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn backward_is_deterministic() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![0.3, -0.7, 1.1, 0.2]));
        let y = tape.input(Tensor::vector(vec![0.5, 0.4, -0.9, 1.3]));
        let p = tape.mul(x, y).unwrap();
        let r = tape.relu(p).unwrap();
        let n = tape.l2_norm(r).unwrap();
        let d = tape.dot(x, y).unwrap();
        let dn = tape.mul(n, d).unwrap();
        let loss = tape.sum(dn).unwrap();
        // two sweeps over the same tape are bit-identical
        let g1 = tape.backward(loss).unwrap();
        let g2 = tape.backward(loss).unwrap();
        assert_eq!(g1.get(x).unwrap().data(), g2.get(x).unwrap().data());
        assert_eq!(g1.get(y).unwrap().data(), g2.get(y).unwrap().data());
    }

    #[test]
    fn composed_graph_matches_finite_differences() {
        let mut rng = crate::rng::Rng::seeded(12);
        let x0 = Tensor::uniform(vec![5], 1.0, &mut rng);
        let w0 = Tensor::uniform(vec![4, 5], 1.0, &mut rng);

        let run = |x: &Tensor, w: &Tensor| {
            let mut t = Tape::new();
            let xv = t.input(x.clone());
            let wv = t.input(w.clone());
            let xc = t.reshape(xv, vec![5, 1]).unwrap();
            let h = t.matmul(wv, xc).unwrap();
            let hr = t.relu(h).unwrap();
            let hv = t.reshape(hr, vec![4]).unwrap();
            let n = t.l2_norm(hv).unwrap();
            let s = t.sum(hv).unwrap();
            let prod = t.mul(n, s).unwrap();
            let ce_in = t.scale(hv, 0.7).unwrap();
            let ce = t.softmax_cross_entropy(ce_in, 1).unwrap();
            let loss = t.add(prod, ce).unwrap();
            (t, xv, wv, loss)
        };
        let (tape, xv, wv, loss) = run(&x0, &w0);
        let grads = tape.backward(loss).unwrap();

        let fd_x = finite_diff_grad(
            |p| {
                let (t, _, _, l) = run(p, &w0);
                t.value(l).item()
            },
            &x0,
            1e-5,
        );
        let fd_w = finite_diff_grad(
            |p| {
                let (t, _, _, l) = run(&x0, p);
                t.value(l).item()
            },
            &w0,
            1e-5,
        );
        assert!(rel_err(grads.get(xv).unwrap().data(), fd_x.data()) <= 1e-4);
        assert!(rel_err(grads.get(wv).unwrap().data(), fd_w.data()) <= 1e-4);
    }

    #[test]
    fn chain_rule_composition_across_tapes() {
        // gradient of f(g(x)) on one tape equals dg/dx^T . df/dy on split tapes
        let x0 = Tensor::vector(vec![0.4, -0.3, 0.8]);

        // g(x) = x * x (elementwise), f(y) = sum(y) * l2_norm(y)
        let mut one = Tape::new();
        let x = one.input(x0.clone());
        let y = one.mul(x, x).unwrap();
        let s = one.sum(y).unwrap();
        let n = one.l2_norm(y).unwrap();
        let loss = one.mul(s, n).unwrap();
        let g_one = one.backward(loss).unwrap();
        let gx_one = g_one.get(x).unwrap().data().to_vec();

        // split: df/dy at y0, then dL/dx_i = df/dy_i * 2 x_i
        let y0: Vec<f64> = x0.data().iter().map(|v| v * v).collect();
        let mut ft = Tape::new();
        let yv = ft.input(Tensor::vector(y0));
        let s2 = ft.sum(yv).unwrap();
        let n2 = ft.l2_norm(yv).unwrap();
        let l2 = ft.mul(s2, n2).unwrap();
        let gf = ft.backward(l2).unwrap();
        let dfdy = gf.get(yv).unwrap().data().to_vec();
        let composed: Vec<f64> = dfdy
            .iter()
            .zip(x0.data())
            .map(|(d, xi)| d * 2.0 * xi)
            .collect();

        for (a, b) in gx_one.iter().zip(&composed) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn ops_do_not_mutate_inputs() {
        let x0 = Tensor::vector(vec![1.0, -2.0, 3.0]);
        let mut tape = Tape::new();
        let x = tape.input(x0.clone());
        let _ = tape.relu(x).unwrap();
        let _ = tape.scale(x, 2.0).unwrap();
        let y = tape.mul(x, x).unwrap();
        let _ = tape.sum(y).unwrap();
        assert_eq!(tape.value(x), &x0);
    }
}
