//! Reverse-mode tape. Each forward pass builds a fresh tape over a shared
//! parameter slice; `backward` fills per-node gradients which are then
//! accumulated into an external gradient buffer.

use super::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

const LN_EPS: f64 = 1e-5;

enum Value {
    Owned(Tensor),
    Param(usize),
}

enum Op {
    Leaf,
    /// [m,k] @ [k,n]
    MatMul { a: NodeId, b: NodeId },
    /// [m,k] @ [n,k]^T
    MatMulNT { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    /// rows of x: [n,d] plus bias [d]
    AddBiasRows { x: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    Gelu { x: NodeId },
    Tanh { x: NodeId },
    SoftmaxRows { x: NodeId },
    LayerNormRows { x: NodeId, gamma: NodeId, beta: NodeId },
    /// x: [C,H,W], w: [O,C,3,3], b: [O]; stride 1, zero pad 1
    Conv3x3 { x: NodeId, w: NodeId, b: NodeId, c: usize, h: usize, wd: usize, o: usize },
    /// x: [C,H,W], w: [O,C], b: [O]
    Conv1x1 { x: NodeId, w: NodeId, b: NodeId, c: usize, h: usize, wd: usize, o: usize },
    /// nearest-neighbor [C,H,W] -> [C,2H,2W]
    Upsample2x { x: NodeId, c: usize, h: usize, wd: usize },
    /// [n,d] -> [d]
    MeanRows { x: NodeId },
    /// [n,d] token list to [d,gh,gw] grid, n == gh*gw
    TokensToGrid { x: NodeId, gh: usize, gw: usize },
    SliceCols { x: NodeId, start: usize, len: usize },
    ConcatCols { parts: Vec<NodeId> },
    /// weighted cross-entropy with logits, summed over all elements
    BceLogitsSum { z: NodeId, target: Tensor, beta: f64 },
    /// sum of mask * |x - target|
    MaskedL1Sum { x: NodeId, target: Tensor, mask: Tensor },
    /// sum of (x - target)^2
    SqErrSum { x: NodeId, target: Tensor },
    WeightedSum { parts: Vec<NodeId>, weights: Vec<f64> },
}

struct Node {
    value: Value,
    op: Op,
    grad: Option<Tensor>,
}

pub struct Tape<'p> {
    params: &'p [Tensor],
    nodes: Vec<Node>,
    param_leaf: Vec<Option<NodeId>>,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_A: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_B: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_A * (x + GELU_B * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_A * (x + GELU_B * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_A * (1.0 + 3.0 * GELU_B * x * x)
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Tensor]) -> Self {
        Tape { params, nodes: Vec::with_capacity(256), param_leaf: vec![None; params.len()] }
    }

    fn push(&mut self, value: Value, op: Op) -> NodeId {
        self.nodes.push(Node { value, op, grad: None });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        match &self.nodes[id.0].value {
            Value::Owned(t) => t,
            Value::Param(i) => &self.params[*i],
        }
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(Value::Owned(t), Op::Leaf)
    }

    pub fn param(&mut self, idx: usize) -> NodeId {
        if let Some(id) = self.param_leaf[idx] {
            return id;
        }
        let id = self.push(Value::Param(idx), Op::Leaf);
        self.param_leaf[idx] = Some(id);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape.len(), 2, "matmul lhs must be 2-D");
        assert_eq!(tb.shape.len(), 2, "matmul rhs must be 2-D");
        let (m, k) = (ta.shape[0], ta.shape[1]);
        let (k2, n) = (tb.shape[0], tb.shape[1]);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = Tensor::zeros(&[m, n]);
        matmul_acc(m, k, n, &ta.data, &tb.data, &mut out.data);
        self.push(Value::Owned(out), Op::MatMul { a, b })
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.shape[0], ta.shape[1]);
        let (n, k2) = (tb.shape[0], tb.shape[1]);
        assert_eq!(k, k2, "matmul_nt inner dims {k} vs {k2}");
        let mut out = Tensor::zeros(&[m, n]);
        matmul_nt_acc(m, k, n, &ta.data, &tb.data, &mut out.data);
        self.push(Value::Owned(out), Op::MatMulNT { a, b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape, tb.shape, "add shape mismatch");
        let mut out = ta.clone();
        for (o, &v) in out.data.iter_mut().zip(tb.data.iter()) {
            *o += v;
        }
        self.push(Value::Owned(out), Op::Add { a, b })
    }

    pub fn add_bias_rows(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let (tx, tb) = (self.value(x), self.value(b));
        let d = *tx.shape.last().unwrap();
        assert_eq!(tb.numel(), d, "bias length mismatch");
        let mut out = tx.clone();
        for row in out.data.chunks_exact_mut(d) {
            for (o, &v) in row.iter_mut().zip(tb.data.iter()) {
                *o += v;
            }
        }
        self.push(Value::Owned(out), Op::AddBiasRows { x, b })
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let mut out = self.value(x).clone();
        for v in out.data.iter_mut() {
            *v *= c;
        }
        self.push(Value::Owned(out), Op::Scale { x, c })
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        for v in out.data.iter_mut() {
            *v = gelu(*v);
        }
        self.push(Value::Owned(out), Op::Gelu { x })
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        for v in out.data.iter_mut() {
            *v = v.tanh();
        }
        self.push(Value::Owned(out), Op::Tanh { x })
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let tx = self.value(x);
        let d = *tx.shape.last().unwrap();
        let mut out = tx.clone();
        for row in out.data.chunks_exact_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            let inv = 1.0 / sum;
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        self.push(Value::Owned(out), Op::SoftmaxRows { x })
    }

    pub fn layer_norm_rows(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = *tx.shape.last().unwrap();
        assert_eq!(tg.numel(), d);
        assert_eq!(tb.numel(), d);
        let mut out = tx.clone();
        for row in out.data.chunks_exact_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for (v, (&g, &b)) in row.iter_mut().zip(tg.data.iter().zip(tb.data.iter())) {
                *v = (*v - mean) * inv * g + b;
            }
        }
        self.push(Value::Owned(out), Op::LayerNormRows { x, gamma, beta })
    }

    pub fn conv3x3(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (c, h, wd) = (tx.shape[0], tx.shape[1], tx.shape[2]);
        let o = tw.shape[0];
        assert_eq!(tw.shape[1], c, "conv3x3 channel mismatch");
        assert_eq!(tw.shape[2], 3);
        assert_eq!(tw.shape[3], 3);
        assert_eq!(tb.numel(), o);
        let mut out = Tensor::zeros(&[o, h, wd]);
        conv3x3_forward(&tx.data, &tw.data, &tb.data, c, h, wd, o, &mut out.data);
        self.push(Value::Owned(out), Op::Conv3x3 { x, w, b, c, h, wd, o })
    }

    pub fn conv1x1(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (c, h, wd) = (tx.shape[0], tx.shape[1], tx.shape[2]);
        let o = tw.shape[0];
        assert_eq!(tw.shape[1], c, "conv1x1 channel mismatch");
        assert_eq!(tb.numel(), o);
        let hw = h * wd;
        let mut out = Tensor::zeros(&[o, h, wd]);
        for oc in 0..o {
            let orow = &mut out.data[oc * hw..(oc + 1) * hw];
            orow.fill(tb.data[oc]);
            for ic in 0..c {
                let wv = tw.data[oc * c + ic];
                if wv == 0.0 {
                    continue;
                }
                let irow = &tx.data[ic * hw..(ic + 1) * hw];
                for (ov, &iv) in orow.iter_mut().zip(irow.iter()) {
                    *ov += wv * iv;
                }
            }
        }
        self.push(Value::Owned(out), Op::Conv1x1 { x, w, b, c, h, wd, o })
    }

    pub fn upsample2x(&mut self, x: NodeId) -> NodeId {
        let tx = self.value(x);
        let (c, h, wd) = (tx.shape[0], tx.shape[1], tx.shape[2]);
        let mut out = Tensor::zeros(&[c, 2 * h, 2 * wd]);
        for ch in 0..c {
            for y in 0..h {
                let irow = &tx.data[ch * h * wd + y * wd..ch * h * wd + (y + 1) * wd];
                for dy in 0..2 {
                    let base = ch * 4 * h * wd + (2 * y + dy) * 2 * wd;
                    let orow = &mut out.data[base..base + 2 * wd];
                    for (xx, &v) in irow.iter().enumerate() {
                        orow[2 * xx] = v;
                        orow[2 * xx + 1] = v;
                    }
                }
            }
        }
        self.push(Value::Owned(out), Op::Upsample2x { x, c, h, wd })
    }

    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let tx = self.value(x);
        let (n, d) = (tx.shape[0], tx.shape[1]);
        let mut out = Tensor::zeros(&[1, d]);
        for row in tx.data.chunks_exact(d) {
            for (o, &v) in out.data.iter_mut().zip(row.iter()) {
                *o += v;
            }
        }
        let inv = 1.0 / n as f64;
        for o in out.data.iter_mut() {
            *o *= inv;
        }
        self.push(Value::Owned(out), Op::MeanRows { x })
    }

    pub fn tokens_to_grid(&mut self, x: NodeId, gh: usize, gw: usize) -> NodeId {
        let tx = self.value(x);
        let (n, d) = (tx.shape[0], tx.shape[1]);
        assert_eq!(n, gh * gw, "token count {n} != {gh}x{gw}");
        let mut out = Tensor::zeros(&[d, gh, gw]);
        for (tok, row) in tx.data.chunks_exact(d).enumerate() {
            for (ch, &v) in row.iter().enumerate() {
                out.data[ch * n + tok] = v;
            }
        }
        self.push(Value::Owned(out), Op::TokensToGrid { x, gh, gw })
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let tx = self.value(x);
        let (n, d) = (tx.shape[0], tx.shape[1]);
        assert!(start + len <= d, "slice_cols out of range");
        let mut out = Tensor::zeros(&[n, len]);
        for (orow, irow) in out.data.chunks_exact_mut(len).zip(tx.data.chunks_exact(d)) {
            orow.copy_from_slice(&irow[start..start + len]);
        }
        self.push(Value::Owned(out), Op::SliceCols { x, start, len })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).shape[0];
        let total: usize = parts.iter().map(|&p| self.value(p).shape[1]).sum();
        let mut out = Tensor::zeros(&[n, total]);
        let mut offset = 0;
        for &p in parts {
            let tp = self.value(p);
            let d = tp.shape[1];
            for (i, irow) in tp.data.chunks_exact(d).enumerate() {
                out.data[i * total + offset..i * total + offset + d].copy_from_slice(irow);
            }
            offset += d;
        }
        self.push(Value::Owned(out), Op::ConcatCols { parts: parts.to_vec() })
    }

    /// `sum(beta*t*softplus(-z) + (1-t)*softplus(z))`: binary cross-entropy
    /// with logits, positives weighted by `beta`, summed over all elements.
    pub fn bce_logits_sum(&mut self, z: NodeId, target: Tensor, beta: f64) -> NodeId {
        let tz = self.value(z);
        assert_eq!(tz.numel(), target.numel(), "bce target shape mismatch");
        let mut loss = 0.0;
        for (&zv, &tv) in tz.data.iter().zip(target.data.iter()) {
            loss += beta * tv * softplus(-zv) + (1.0 - tv) * softplus(zv);
        }
        self.push(Value::Owned(Tensor::scalar(loss)), Op::BceLogitsSum { z, target, beta })
    }

    pub fn masked_l1_sum(&mut self, x: NodeId, target: Tensor, mask: Tensor) -> NodeId {
        let tx = self.value(x);
        assert_eq!(tx.numel(), target.numel(), "l1 target shape mismatch");
        assert_eq!(tx.numel(), mask.numel(), "l1 mask shape mismatch");
        let mut loss = 0.0;
        for ((&xv, &tv), &mv) in tx.data.iter().zip(target.data.iter()).zip(mask.data.iter()) {
            loss += mv * (xv - tv).abs();
        }
        self.push(Value::Owned(Tensor::scalar(loss)), Op::MaskedL1Sum { x, target, mask })
    }

    pub fn sq_err_sum(&mut self, x: NodeId, target: Tensor) -> NodeId {
        let tx = self.value(x);
        assert_eq!(tx.numel(), target.numel(), "sq err target shape mismatch");
        let mut loss = 0.0;
        for (&xv, &tv) in tx.data.iter().zip(target.data.iter()) {
            loss += (xv - tv) * (xv - tv);
        }
        self.push(Value::Owned(Tensor::scalar(loss)), Op::SqErrSum { x, target })
    }

    pub fn weighted_sum(&mut self, parts: &[NodeId], weights: &[f64]) -> NodeId {
        assert_eq!(parts.len(), weights.len());
        let mut total = 0.0;
        for (&p, &w) in parts.iter().zip(weights.iter()) {
            total += w * self.value(p).item();
        }
        self.push(
            Value::Owned(Tensor::scalar(total)),
            Op::WeightedSum { parts: parts.to_vec(), weights: weights.to_vec() },
        )
    }

    fn grad_buf(&mut self, id: NodeId) -> &mut Tensor {
        if self.nodes[id.0].grad.is_none() {
            let shape = match &self.nodes[id.0].value {
                Value::Owned(t) => t.shape.clone(),
                Value::Param(i) => self.params[*i].shape.clone(),
            };
            self.nodes[id.0].grad = Some(Tensor::zeros(&shape));
        }
        self.nodes[id.0].grad.as_mut().unwrap()
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(self.value(loss).numel(), 1, "backward root must be scalar");
        self.grad_buf(loss).data[0] = 1.0;
        for idx in (0..=loss.0).rev() {
            if self.nodes[idx].grad.is_none() {
                continue;
            }
            self.backprop_node(NodeId(idx));
        }
    }

    fn backprop_node(&mut self, id: NodeId) {
        // Take the node's grad out to appease the borrow checker; ops do not
        // reference their own grad.
        let grad = self.nodes[id.0].grad.take().expect("grad present");
        let op = std::mem::replace(&mut self.nodes[id.0].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (ta, tb) = (self.value(*a).clone(), self.value(*b).clone());
                let (m, k) = (ta.shape[0], ta.shape[1]);
                let n = tb.shape[1];
                {
                    let ga = self.grad_buf(*a);
                    matmul_nt_acc(m, n, k, &grad.data, &tb.data, &mut ga.data);
                }
                {
                    let gb = self.grad_buf(*b);
                    matmul_tn_acc(m, k, n, &ta.data, &grad.data, &mut gb.data);
                }
            }
            Op::MatMulNT { a, b } => {
                // out = a @ b^T; da = g @ b; db = g^T @ a
                let (ta, tb) = (self.value(*a).clone(), self.value(*b).clone());
                let (m, k) = (ta.shape[0], ta.shape[1]);
                let n = tb.shape[0];
                {
                    let ga = self.grad_buf(*a);
                    matmul_acc(m, n, k, &grad.data, &tb.data, &mut ga.data);
                }
                {
                    let gb = self.grad_buf(*b);
                    matmul_tn_acc(m, n, k, &grad.data, &ta.data, &mut gb.data);
                }
            }
            Op::Add { a, b } => {
                for (g, &v) in self.grad_buf(*a).data.iter_mut().zip(grad.data.iter()) {
                    *g += v;
                }
                for (g, &v) in self.grad_buf(*b).data.iter_mut().zip(grad.data.iter()) {
                    *g += v;
                }
            }
            Op::AddBiasRows { x, b } => {
                for (g, &v) in self.grad_buf(*x).data.iter_mut().zip(grad.data.iter()) {
                    *g += v;
                }
                let d = self.value(*b).numel();
                let gb = self.grad_buf(*b);
                for row in grad.data.chunks_exact(d) {
                    for (g, &v) in gb.data.iter_mut().zip(row.iter()) {
                        *g += v;
                    }
                }
            }
            Op::Scale { x, c } => {
                let c = *c;
                for (g, &v) in self.grad_buf(*x).data.iter_mut().zip(grad.data.iter()) {
                    *g += c * v;
                }
            }
            Op::Gelu { x } => {
                let tx = self.value(*x).clone();
                let gx = self.grad_buf(*x);
                for ((g, &v), &xv) in gx.data.iter_mut().zip(grad.data.iter()).zip(tx.data.iter())
                {
                    *g += v * gelu_grad(xv);
                }
            }
            Op::Tanh { x } => {
                let ty = {
                    let this = &self.nodes[id.0].value;
                    match this {
                        Value::Owned(t) => t.clone(),
                        Value::Param(_) => unreachable!(),
                    }
                };
                let gx = self.grad_buf(*x);
                for ((g, &v), &yv) in gx.data.iter_mut().zip(grad.data.iter()).zip(ty.data.iter())
                {
                    *g += v * (1.0 - yv * yv);
                }
            }
            Op::SoftmaxRows { x } => {
                let y = match &self.nodes[id.0].value {
                    Value::Owned(t) => t.clone(),
                    Value::Param(_) => unreachable!(),
                };
                let d = *y.shape.last().unwrap();
                let gx = self.grad_buf(*x);
                for ((grow, yrow), xrow) in grad
                    .data
                    .chunks_exact(d)
                    .zip(y.data.chunks_exact(d))
                    .zip(gx.data.chunks_exact_mut(d))
                {
                    let dot: f64 = grow.iter().zip(yrow.iter()).map(|(&g, &y)| g * y).sum();
                    for ((x, &g), &y) in xrow.iter_mut().zip(grow.iter()).zip(yrow.iter()) {
                        *x += y * (g - dot);
                    }
                }
            }
            Op::LayerNormRows { x, gamma, beta } => {
                let tx = self.value(*x).clone();
                let tg = self.value(*gamma).clone();
                let d = tg.numel();
                let nrows = tx.numel() / d;
                let mut gx_acc = vec![0.0; tx.numel()];
                let mut gg_acc = vec![0.0; d];
                let mut gb_acc = vec![0.0; d];
                for r in 0..nrows {
                    let xrow = &tx.data[r * d..(r + 1) * d];
                    let grow = &grad.data[r * d..(r + 1) * d];
                    let mean = xrow.iter().sum::<f64>() / d as f64;
                    let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    // xhat_i = (x_i - mean) * inv
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for i in 0..d {
                        let xhat = (xrow[i] - mean) * inv;
                        let dxhat = grow[i] * tg.data[i];
                        gg_acc[i] += grow[i] * xhat;
                        gb_acc[i] += grow[i];
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xhat;
                    }
                    mean_dxhat /= d as f64;
                    mean_dxhat_xhat /= d as f64;
                    for i in 0..d {
                        let xhat = (xrow[i] - mean) * inv;
                        let dxhat = grow[i] * tg.data[i];
                        gx_acc[r * d + i] += inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
                for (g, v) in self.grad_buf(*x).data.iter_mut().zip(gx_acc) {
                    *g += v;
                }
                for (g, v) in self.grad_buf(*gamma).data.iter_mut().zip(gg_acc) {
                    *g += v;
                }
                for (g, v) in self.grad_buf(*beta).data.iter_mut().zip(gb_acc) {
                    *g += v;
                }
            }
            Op::Conv3x3 { x, w, b, c, h, wd, o } => {
                let (c, h, wd, o) = (*c, *h, *wd, *o);
                let tx = self.value(*x).clone();
                let tw = self.value(*w).clone();
                {
                    let gx = self.grad_buf(*x);
                    conv3x3_input_grad(&grad.data, &tw.data, c, h, wd, o, &mut gx.data);
                }
                {
                    let gw = self.grad_buf(*w);
                    conv3x3_weight_grad(&grad.data, &tx.data, c, h, wd, o, &mut gw.data);
                }
                {
                    let gb = self.grad_buf(*b);
                    let hw = h * wd;
                    for oc in 0..o {
                        gb.data[oc] += grad.data[oc * hw..(oc + 1) * hw].iter().sum::<f64>();
                    }
                }
            }
            Op::Conv1x1 { x, w, b, c, h, wd, o } => {
                let (c, h, wd, o) = (*c, *h, *wd, *o);
                let hw = h * wd;
                let tx = self.value(*x).clone();
                let tw = self.value(*w).clone();
                {
                    let gx = self.grad_buf(*x);
                    for oc in 0..o {
                        let grow = &grad.data[oc * hw..(oc + 1) * hw];
                        for ic in 0..c {
                            let wv = tw.data[oc * c + ic];
                            if wv == 0.0 {
                                continue;
                            }
                            let gxrow = &mut gx.data[ic * hw..(ic + 1) * hw];
                            for (g, &gv) in gxrow.iter_mut().zip(grow.iter()) {
                                *g += wv * gv;
                            }
                        }
                    }
                }
                {
                    let gw = self.grad_buf(*w);
                    for oc in 0..o {
                        let grow = &grad.data[oc * hw..(oc + 1) * hw];
                        for ic in 0..c {
                            let irow = &tx.data[ic * hw..(ic + 1) * hw];
                            let mut acc = 0.0;
                            for (&gv, &iv) in grow.iter().zip(irow.iter()) {
                                acc += gv * iv;
                            }
                            gw.data[oc * c + ic] += acc;
                        }
                    }
                }
                {
                    let gb = self.grad_buf(*b);
                    for oc in 0..o {
                        gb.data[oc] += grad.data[oc * hw..(oc + 1) * hw].iter().sum::<f64>();
                    }
                }
            }
            Op::Upsample2x { x, c, h, wd } => {
                let (c, h, wd) = (*c, *h, *wd);
                let gx = self.grad_buf(*x);
                for ch in 0..c {
                    for y in 0..h {
                        let gxrow = &mut gx.data[ch * h * wd + y * wd..ch * h * wd + (y + 1) * wd];
                        for dy in 0..2 {
                            let base = ch * 4 * h * wd + (2 * y + dy) * 2 * wd;
                            let grow = &grad.data[base..base + 2 * wd];
                            for (xx, g) in gxrow.iter_mut().enumerate() {
                                *g += grow[2 * xx] + grow[2 * xx + 1];
                            }
                        }
                    }
                }
            }
            Op::MeanRows { x } => {
                let tx_shape = self.value(*x).shape.clone();
                let (n, d) = (tx_shape[0], tx_shape[1]);
                let inv = 1.0 / n as f64;
                let gx = self.grad_buf(*x);
                for row in gx.data.chunks_exact_mut(d) {
                    for (g, &v) in row.iter_mut().zip(grad.data.iter()) {
                        *g += v * inv;
                    }
                }
            }
            Op::TokensToGrid { x, gh, gw } => {
                let n = gh * gw;
                let d = self.value(*x).shape[1];
                let gx = self.grad_buf(*x);
                for tok in 0..n {
                    let grow = &mut gx.data[tok * d..(tok + 1) * d];
                    for (ch, g) in grow.iter_mut().enumerate() {
                        *g += grad.data[ch * n + tok];
                    }
                }
            }
            Op::SliceCols { x, start, len } => {
                let d = self.value(*x).shape[1];
                let gx = self.grad_buf(*x);
                for (grow, xrow) in
                    grad.data.chunks_exact(*len).zip(gx.data.chunks_exact_mut(d))
                {
                    for (g, &v) in xrow[*start..*start + *len].iter_mut().zip(grow.iter()) {
                        *g += v;
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let total = grad.data.len() / self.value(parts[0]).shape[0];
                let mut offset = 0;
                for &p in parts {
                    let d = self.value(p).shape[1];
                    let gp = self.grad_buf(p);
                    let n = gp.shape[0];
                    for i in 0..n {
                        let grow = &grad.data[i * total + offset..i * total + offset + d];
                        for (g, &v) in
                            gp.data[i * d..(i + 1) * d].iter_mut().zip(grow.iter())
                        {
                            *g += v;
                        }
                    }
                    offset += d;
                }
            }
            Op::BceLogitsSum { z, target, beta } => {
                let g0 = grad.data[0];
                let tz = self.value(*z).clone();
                let beta = *beta;
                let target = target.clone();
                let gz = self.grad_buf(*z);
                for ((g, &zv), &tv) in
                    gz.data.iter_mut().zip(tz.data.iter()).zip(target.data.iter())
                {
                    let s = sigmoid(zv);
                    *g += g0 * (beta * tv * (s - 1.0) + (1.0 - tv) * s);
                }
            }
            Op::MaskedL1Sum { x, target, mask } => {
                let g0 = grad.data[0];
                let tx = self.value(*x).clone();
                let (target, mask) = (target.clone(), mask.clone());
                let gx = self.grad_buf(*x);
                for ((g, &xv), (&tv, &mv)) in gx
                    .data
                    .iter_mut()
                    .zip(tx.data.iter())
                    .zip(target.data.iter().zip(mask.data.iter()))
                {
                    let diff = xv - tv;
                    let sign = if diff > 0.0 {
                        1.0
                    } else if diff < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    *g += g0 * mv * sign;
                }
            }
            Op::SqErrSum { x, target } => {
                let g0 = grad.data[0];
                let tx = self.value(*x).clone();
                let target = target.clone();
                let gx = self.grad_buf(*x);
                for ((g, &xv), &tv) in gx.data.iter_mut().zip(tx.data.iter()).zip(target.data.iter())
                {
                    *g += g0 * 2.0 * (xv - tv);
                }
            }
            Op::WeightedSum { parts, weights } => {
                let g0 = grad.data[0];
                for (&p, &w) in parts.iter().zip(weights.iter()) {
                    self.grad_buf(p).data[0] += g0 * w;
                }
            }
        }
        self.nodes[id.0].op = op;
        self.nodes[id.0].grad = Some(grad);
    }

    /// Add each parameter leaf's gradient into `out` (indexed like the
    /// parameter slice the tape was built over).
    pub fn accumulate_param_grads(&self, out: &mut [Tensor]) {
        assert_eq!(out.len(), self.params.len());
        for (idx, leaf) in self.param_leaf.iter().enumerate() {
            if let Some(id) = leaf {
                if let Some(g) = &self.nodes[id.0].grad {
                    for (o, &v) in out[idx].data.iter_mut().zip(g.data.iter()) {
                        *o += v;
                    }
                }
            }
        }
    }
}

fn conv3x3_forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    c: usize,
    h: usize,
    wd: usize,
    o: usize,
    out: &mut [f64],
) {
    let hw = h * wd;
    for oc in 0..o {
        out[oc * hw..(oc + 1) * hw].fill(b[oc]);
    }
    for oc in 0..o {
        for ic in 0..c {
            let wbase = (oc * c + ic) * 9;
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let wv = w[wbase + ky * 3 + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    // out[y][x] += wv * in[y+ky-1][x+kx-1]
                    let y_lo = 1usize.saturating_sub(ky);
                    let y_hi = if ky == 2 { h - 1 } else { h };
                    let x_lo = 1usize.saturating_sub(kx);
                    let x_hi = if kx == 2 { wd - 1 } else { wd };
                    for y in y_lo..y_hi {
                        let iy = y + ky - 1;
                        let irow = &x[ic * hw + iy * wd..ic * hw + (iy + 1) * wd];
                        let orow = &mut out[oc * hw + y * wd..oc * hw + (y + 1) * wd];
                        let shift = kx as isize - 1;
                        for xx in x_lo..x_hi {
                            orow[xx] += wv * irow[(xx as isize + shift) as usize];
                        }
                    }
                }
            }
        }
    }
}

fn conv3x3_input_grad(
    gout: &[f64],
    w: &[f64],
    c: usize,
    h: usize,
    wd: usize,
    o: usize,
    gx: &mut [f64],
) {
    let hw = h * wd;
    for oc in 0..o {
        for ic in 0..c {
            let wbase = (oc * c + ic) * 9;
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let wv = w[wbase + ky * 3 + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let y_lo = 1usize.saturating_sub(ky);
                    let y_hi = if ky == 2 { h - 1 } else { h };
                    let x_lo = 1usize.saturating_sub(kx);
                    let x_hi = if kx == 2 { wd - 1 } else { wd };
                    for y in y_lo..y_hi {
                        let iy = y + ky - 1;
                        let grow = &gout[oc * hw + y * wd..oc * hw + (y + 1) * wd];
                        let gxrow = &mut gx[ic * hw + iy * wd..ic * hw + (iy + 1) * wd];
                        let shift = kx as isize - 1;
                        for xx in x_lo..x_hi {
                            gxrow[(xx as isize + shift) as usize] += wv * grow[xx];
                        }
                    }
                }
            }
        }
    }
}

fn conv3x3_weight_grad(
    gout: &[f64],
    x: &[f64],
    c: usize,
    h: usize,
    wd: usize,
    o: usize,
    gw: &mut [f64],
) {
    let hw = h * wd;
    for oc in 0..o {
        for ic in 0..c {
            let wbase = (oc * c + ic) * 9;
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let y_lo = 1usize.saturating_sub(ky);
                    let y_hi = if ky == 2 { h - 1 } else { h };
                    let x_lo = 1usize.saturating_sub(kx);
                    let x_hi = if kx == 2 { wd - 1 } else { wd };
                    let mut acc = 0.0;
                    for y in y_lo..y_hi {
                        let iy = y + ky - 1;
                        let grow = &gout[oc * hw + y * wd..oc * hw + (y + 1) * wd];
                        let irow = &x[ic * hw + iy * wd..ic * hw + (iy + 1) * wd];
                        let shift = kx as isize - 1;
                        for xx in x_lo..x_hi {
                            acc += grow[xx] * irow[(xx as isize + shift) as usize];
                        }
                    }
                    gw[wbase + ky * 3 + kx] += acc;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    /// Central finite difference through an arbitrary scalar-valued forward.
    fn finite_diff(
        params: &mut [Tensor],
        forward: &dyn Fn(&[Tensor]) -> f64,
        pi: usize,
        ei: usize,
        h: f64,
    ) -> f64 {
        let orig = params[pi].data[ei];
        params[pi].data[ei] = orig + h;
        let up = forward(params);
        params[pi].data[ei] = orig - h;
        let down = forward(params);
        params[pi].data[ei] = orig;
        (up - down) / (2.0 * h)
    }

    fn check_all_grads(params: Vec<Tensor>, build: impl Fn(&mut Tape, &[NodeId]) -> NodeId) {
        let mut params = params;
        let forward = |ps: &[Tensor]| -> f64 {
            let mut tape = Tape::new(ps);
            let ids: Vec<NodeId> = (0..ps.len()).map(|i| tape.param(i)).collect();
            let loss = build(&mut tape, &ids);
            tape.value(loss).item()
        };

        let mut tape = Tape::new(&params);
        let ids: Vec<NodeId> = (0..params.len()).map(|i| tape.param(i)).collect();
        let loss = build(&mut tape, &ids);
        tape.backward(loss);
        let mut grads: Vec<Tensor> =
            params.iter().map(|t| Tensor::zeros(&t.shape)).collect();
        tape.accumulate_param_grads(&mut grads);
        drop(tape);

        for pi in 0..params.len() {
            for ei in 0..params[pi].numel() {
                let fd = finite_diff(&mut params, &forward, pi, ei, 1e-5);
                let an = grads[pi].data[ei];
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    (fd - an).abs() / denom < 1e-5,
                    "grad mismatch param {pi} elem {ei}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn grad_matmul_bias_gelu_chain() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let params = vec![
            Tensor::randn(&[3, 4], 0.5, &mut rng),
            Tensor::randn(&[4, 2], 0.5, &mut rng),
            Tensor::randn(&[2], 0.5, &mut rng),
        ];
        let target = Tensor::randn(&[3, 2], 1.0, &mut rng);
        check_all_grads(params, move |tape, ids| {
            let y = tape.matmul(ids[0], ids[1]);
            let y = tape.add_bias_rows(y, ids[2]);
            let y = tape.gelu(y);
            tape.sq_err_sum(y, target.clone())
        });
    }

    #[test]
    fn grad_softmax_attention_pattern() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let params = vec![
            Tensor::randn(&[3, 4], 0.7, &mut rng), // q
            Tensor::randn(&[5, 4], 0.7, &mut rng), // k
            Tensor::randn(&[5, 4], 0.7, &mut rng), // v
        ];
        let target = Tensor::randn(&[3, 4], 1.0, &mut rng);
        check_all_grads(params, move |tape, ids| {
            let scores = tape.matmul_nt(ids[0], ids[1]);
            let scores = tape.scale(scores, 0.5);
            let attn = tape.softmax_rows(scores);
            let out = tape.matmul(attn, ids[2]);
            tape.sq_err_sum(out, target.clone())
        });
    }

    #[test]
    fn grad_layer_norm() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let params = vec![
            Tensor::randn(&[4, 6], 1.0, &mut rng),
            Tensor::randn(&[6], 0.3, &mut rng),
            Tensor::randn(&[6], 0.3, &mut rng),
        ];
        let target = Tensor::randn(&[4, 6], 1.0, &mut rng);
        check_all_grads(params, move |tape, ids| {
            let y = tape.layer_norm_rows(ids[0], ids[1], ids[2]);
            tape.sq_err_sum(y, target.clone())
        });
    }

    #[test]
    fn grad_conv_upsample_chain() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let params = vec![
            Tensor::randn(&[2, 4, 4], 0.8, &mut rng),    // x
            Tensor::randn(&[3, 2, 3, 3], 0.4, &mut rng), // w3
            Tensor::randn(&[3], 0.2, &mut rng),          // b3
            Tensor::randn(&[1, 3], 0.4, &mut rng),       // w1
            Tensor::randn(&[1], 0.2, &mut rng),          // b1
        ];
        let target = Tensor::randn(&[1, 8, 8], 1.0, &mut rng);
        check_all_grads(params, move |tape, ids| {
            let y = tape.conv3x3(ids[0], ids[1], ids[2]);
            let y = tape.gelu(y);
            let y = tape.upsample2x(y);
            let y = tape.conv1x1(y, ids[3], ids[4]);
            tape.sq_err_sum(y, target.clone())
        });
    }

    #[test]
    fn grad_bce_and_masked_l1() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let params = vec![
            Tensor::randn(&[4, 4], 1.5, &mut rng),
            Tensor::randn(&[4, 4], 1.0, &mut rng),
        ];
        let mut target = Tensor::zeros(&[4, 4]);
        target.data[5] = 1.0;
        target.data[9] = 1.0;
        let mask = target.clone();
        let depth_target = Tensor::full(&[4, 4], 0.5);
        check_all_grads(params, move |tape, ids| {
            let bce = tape.bce_logits_sum(ids[0], target.clone(), 100.0);
            let l1 = tape.masked_l1_sum(ids[1], depth_target.clone(), mask.clone());
            tape.weighted_sum(&[bce, l1], &[1.0, 5.0])
        });
    }

    #[test]
    fn grad_slice_concat_mean() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let params = vec![Tensor::randn(&[3, 6], 1.0, &mut rng)];
        let target = Tensor::randn(&[1, 6], 1.0, &mut rng);
        check_all_grads(params, move |tape, ids| {
            let a = tape.slice_cols(ids[0], 0, 3);
            let b = tape.slice_cols(ids[0], 3, 3);
            let swapped = tape.concat_cols(&[b, a]);
            let pooled = tape.mean_rows(swapped);
            tape.sq_err_sum(pooled, target.clone())
        });
    }

    #[test]
    fn grad_tokens_to_grid_tanh() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let params = vec![Tensor::randn(&[4, 3], 1.0, &mut rng)];
        let target = Tensor::randn(&[3, 2, 2], 1.0, &mut rng);
        check_all_grads(params, move |tape, ids| {
            let g = tape.tokens_to_grid(ids[0], 2, 2);
            let g = tape.tanh(g);
            tape.sq_err_sum(g, target.clone())
        });
    }

    #[test]
    fn bce_matches_closed_form() {
        // All-zero target, zero logits: every pixel contributes ln 2.
        let params = vec![Tensor::zeros(&[8, 8])];
        let mut tape = Tape::new(&params);
        let z = tape.param(0);
        let loss = tape.bce_logits_sum(z, Tensor::zeros(&[8, 8]), 100.0);
        let expect = 64.0 * std::f64::consts::LN_2;
        assert!((tape.value(loss).item() - expect).abs() < 1e-12);
    }
}
