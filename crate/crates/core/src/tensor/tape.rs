use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{
    clamped_ln, gemm, inverse_permutation, permute_data, sigmoid, softmax_rows,
    softmax_rows_backward,
};
use super::{NodeId, Result, Tensor, TensorError, LAYER_NORM_EPS, NUMERIC_FLOOR};

/// Append-only record of differentiable operations.
///
/// Node order is topological by construction; [`Tape::backward`] walks it in
/// reverse exactly once. A tape built with [`Tape::inference`] computes the
/// same forward values but records nothing.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
}

struct Node {
    op: Op,
    inputs: Vec<Option<NodeId>>,
}

enum Op {
    Leaf,
    MatMul { a: Tensor, b: Tensor },
    BatchMatMul { a: Tensor, b: Tensor, trans_b: bool },
    Add { b_len: usize },
    Sub { b_len: usize },
    Mul { a: Tensor, b: Tensor },
    Affine { scale: f32 },
    Sigmoid { out: Arc<Vec<f32>> },
    Relu { input: Arc<Vec<f32>> },
    Log { input: Arc<Vec<f32>> },
    Sqrt { input: Arc<Vec<f32>>, out: Arc<Vec<f32>> },
    Softmax { out: Arc<Vec<f32>>, cols: usize },
    MaskedFill { mask: Arc<Vec<bool>> },
    Reshape,
    Permute { out_shape: Vec<usize>, perm: Vec<usize> },
    SumAxis { outer: usize, n: usize, inner: usize },
    SumAll { len: usize },
    MeanAll { len: usize },
    IndexSelect { rows: usize, cols: usize, idx: Arc<Vec<usize>> },
    Concat { rows: usize, widths: Vec<usize> },
    LayerNorm { x_hat: Vec<f32>, inv_std: Vec<f32>, gamma: Tensor },
    Cosine { a: Tensor, b: Tensor },
    SumSquares { input: Arc<Vec<f32>> },
}

/// Gradients of a scalar loss with respect to the leaves that reach it.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<NodeId, Vec<f32>>,
}

impl Gradients {
    /// Gradient for `t`, or `None` when `t` is untracked or does not reach
    /// the loss.
    pub fn get(&self, t: &Tensor) -> Option<&[f32]> {
        t.node.and_then(|id| self.leaves.get(&id)).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::Dimension {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn is_suffix(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A tape that evaluates forward passes without recording.
    pub fn inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, op: Op, inputs: &[&Tensor], shape: Vec<usize>, data: Vec<f32>) -> Tensor {
        self.push_arc(op, inputs, shape, Arc::new(data))
    }

    fn push_arc(&self, op: Op, inputs: &[&Tensor], shape: Vec<usize>, data: Arc<Vec<f32>>) -> Tensor {
        let tracked = self.recording && inputs.iter().any(|t| t.node.is_some());
        if !tracked {
            return Tensor::from_parts(shape, data, None);
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = NodeId(nodes.len());
        nodes.push(Node {
            op,
            inputs: inputs.iter().map(|t| t.node).collect(),
        });
        Tensor::from_parts(shape, data, Some(id))
    }

    /// Registers `t` as a differentiable leaf (a parameter or input whose
    /// gradient is wanted).
    pub fn leaf(&self, t: &Tensor) -> Tensor {
        if !self.recording {
            return t.detach();
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = NodeId(nodes.len());
        nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
        });
        Tensor::from_parts(t.shape.clone(), Arc::clone(&t.data), Some(id))
    }

    /// `[n, k] × [k, m] → [n, m]`.
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.ndim() != 2 || b.ndim() != 2 || a.shape[1] != b.shape[0] {
            return Err(dim_err("matmul", &a.shape, &b.shape));
        }
        let (n, k, m) = (a.shape[0], a.shape[1], b.shape[1]);
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, &a.data, false, &b.data, false, &mut out, false);
        Ok(self.push(
            Op::MatMul { a: a.clone(), b: b.clone() },
            &[a, b],
            vec![n, m],
            out,
        ))
    }

    /// Batched product `[g, n, k] × [g, k, m] → [g, n, m]`.
    pub fn bmm(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.batch_matmul(a, b, false)
    }

    /// Batched product against transposed right operands:
    /// `[g, n, k] × [g, m, k]ᵀ → [g, n, m]`.
    pub fn bmm_nt(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.batch_matmul(a, b, true)
    }

    fn batch_matmul(&self, a: &Tensor, b: &Tensor, trans_b: bool) -> Result<Tensor> {
        let name = if trans_b { "bmm_nt" } else { "bmm" };
        if a.ndim() != 3 || b.ndim() != 3 || a.shape[0] != b.shape[0] {
            return Err(dim_err(name, &a.shape, &b.shape));
        }
        let (g, n, k) = (a.shape[0], a.shape[1], a.shape[2]);
        let (kb, m) = if trans_b {
            (b.shape[2], b.shape[1])
        } else {
            (b.shape[1], b.shape[2])
        };
        if kb != k {
            return Err(dim_err(name, &a.shape, &b.shape));
        }
        let mut out = vec![0.0; g * n * m];
        for gi in 0..g {
            gemm(
                n,
                k,
                m,
                &a.data[gi * n * k..(gi + 1) * n * k],
                false,
                &b.data[gi * k * m..(gi + 1) * k * m],
                trans_b,
                &mut out[gi * n * m..(gi + 1) * n * m],
                false,
            );
        }
        Ok(self.push(
            Op::BatchMatMul {
                a: a.clone(),
                b: b.clone(),
                trans_b,
            },
            &[a, b],
            vec![g, n, m],
            out,
        ))
    }

    /// Elementwise sum; `b` may be a trailing-dimension suffix of `a`.
    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if !is_suffix(&a.shape, &b.shape) {
            return Err(dim_err("add", &a.shape, &b.shape));
        }
        let bl = b.len().max(1);
        let out: Vec<f32> = a
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x + b.data[i % bl])
            .collect();
        Ok(self.push(Op::Add { b_len: b.len() }, &[a, b], a.shape.clone(), out))
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if !is_suffix(&a.shape, &b.shape) {
            return Err(dim_err("sub", &a.shape, &b.shape));
        }
        let bl = b.len().max(1);
        let out: Vec<f32> = a
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x - b.data[i % bl])
            .collect();
        Ok(self.push(Op::Sub { b_len: b.len() }, &[a, b], a.shape.clone(), out))
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if !is_suffix(&a.shape, &b.shape) {
            return Err(dim_err("mul", &a.shape, &b.shape));
        }
        let bl = b.len().max(1);
        let out: Vec<f32> = a
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x * b.data[i % bl])
            .collect();
        Ok(self.push(
            Op::Mul { a: a.clone(), b: b.clone() },
            &[a, b],
            a.shape.clone(),
            out,
        ))
    }

    /// `scale · x + shift`.
    pub fn affine(&self, x: &Tensor, scale: f32, shift: f32) -> Tensor {
        let out = x.data.iter().map(|&v| scale * v + shift).collect();
        self.push(Op::Affine { scale }, &[x], x.shape.clone(), out)
    }

    pub fn scale(&self, x: &Tensor, scale: f32) -> Tensor {
        self.affine(x, scale, 0.0)
    }

    pub fn sigmoid(&self, x: &Tensor) -> Tensor {
        let out: Arc<Vec<f32>> = Arc::new(x.data.iter().map(|&v| sigmoid(v)).collect());
        self.push_arc(
            Op::Sigmoid { out: Arc::clone(&out) },
            &[x],
            x.shape.clone(),
            out,
        )
    }

    pub fn relu(&self, x: &Tensor) -> Tensor {
        let out = x.data.iter().map(|&v| v.max(0.0)).collect();
        self.push(
            Op::Relu {
                input: Arc::clone(&x.data),
            },
            &[x],
            x.shape.clone(),
            out,
        )
    }

    /// Natural log with the input clamped at [`NUMERIC_FLOOR`].
    pub fn log(&self, x: &Tensor) -> Tensor {
        let out = x.data.iter().map(|&v| clamped_ln(v)).collect();
        self.push(
            Op::Log {
                input: Arc::clone(&x.data),
            },
            &[x],
            x.shape.clone(),
            out,
        )
    }

    /// Square root with the input clamped at [`NUMERIC_FLOOR`].
    pub fn sqrt(&self, x: &Tensor) -> Tensor {
        let out: Arc<Vec<f32>> = Arc::new(x.data.iter().map(|&v| v.max(NUMERIC_FLOOR).sqrt()).collect());
        self.push_arc(
            Op::Sqrt {
                input: Arc::clone(&x.data),
                out: Arc::clone(&out),
            },
            &[x],
            x.shape.clone(),
            out,
        )
    }

    /// Softmax over the last axis. `-inf` entries contribute zero weight; a
    /// slice that is entirely `-inf` yields zeros.
    pub fn softmax(&self, x: &Tensor) -> Result<Tensor> {
        if x.ndim() == 0 {
            return Err(TensorError::Contract("softmax on a scalar".into()));
        }
        if x.data.iter().any(|v| v.is_nan()) {
            return Err(TensorError::Numeric {
                op: "softmax",
                msg: "NaN input".into(),
            });
        }
        let cols = *x.shape.last().unwrap();
        let mut out = vec![0.0; x.len()];
        softmax_rows(&x.data, cols, &mut out);
        let out = Arc::new(out);
        Ok(self.push_arc(
            Op::Softmax {
                out: Arc::clone(&out),
                cols,
            },
            &[x],
            x.shape.clone(),
            out,
        ))
    }

    /// Softmax along `axis` (implemented as permute, softmax, permute back).
    pub fn softmax_axis(&self, x: &Tensor, axis: usize) -> Result<Tensor> {
        let nd = x.ndim();
        if axis >= nd {
            return Err(TensorError::Contract(format!(
                "softmax axis {axis} out of range for {:?}",
                x.shape
            )));
        }
        if axis == nd - 1 {
            return self.softmax(x);
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(axis, nd - 1);
        let moved = self.permute(x, &perm)?;
        let sm = self.softmax(&moved)?;
        self.permute(&sm, &perm)
    }

    /// Replaces entries where `mask` is true by `value`; those entries pass
    /// no gradient.
    pub fn masked_fill(&self, x: &Tensor, mask: &Arc<Vec<bool>>, value: f32) -> Result<Tensor> {
        if mask.len() != x.len() {
            return Err(dim_err("masked_fill", &x.shape, &[mask.len()]));
        }
        let out = x
            .data
            .iter()
            .zip(mask.iter())
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        Ok(self.push(
            Op::MaskedFill {
                mask: Arc::clone(mask),
            },
            &[x],
            x.shape.clone(),
            out,
        ))
    }

    /// Row-major reinterpretation; shares the buffer.
    pub fn reshape(&self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != x.len() {
            return Err(dim_err("reshape", &x.shape, shape));
        }
        Ok(self.push_arc(Op::Reshape, &[x], shape.to_vec(), Arc::clone(&x.data)))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, x: &Tensor, perm: &[usize]) -> Result<Tensor> {
        let mut seen = vec![false; x.ndim()];
        if perm.len() != x.ndim() || perm.iter().any(|&p| p >= x.ndim() || std::mem::replace(&mut seen[p], true)) {
            return Err(dim_err("permute", &x.shape, perm));
        }
        let (out, out_shape) = permute_data(&x.data, &x.shape, perm);
        Ok(self.push(
            Op::Permute {
                out_shape: out_shape.clone(),
                perm: perm.to_vec(),
            },
            &[x],
            out_shape,
            out,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self, x: &Tensor) -> Result<Tensor> {
        let nd = x.ndim();
        if nd < 2 {
            return Err(dim_err("transpose", &x.shape, &[]));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(x, &perm)
    }

    /// Sums out `axis`.
    pub fn sum_axis(&self, x: &Tensor, axis: usize) -> Result<Tensor> {
        if axis >= x.ndim() {
            return Err(dim_err("sum_axis", &x.shape, &[axis]));
        }
        let outer: usize = x.shape[..axis].iter().product();
        let n = x.shape[axis];
        let inner: usize = x.shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for j in 0..n {
                let src = &x.data[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = x.shape.clone();
        shape.remove(axis);
        Ok(self.push(Op::SumAxis { outer, n, inner }, &[x], shape, out))
    }

    pub fn sum(&self, x: &Tensor) -> Tensor {
        let s: f32 = x.data.iter().sum();
        self.push(Op::SumAll { len: x.len() }, &[x], Vec::new(), vec![s])
    }

    pub fn mean(&self, x: &Tensor) -> Result<Tensor> {
        if x.is_empty() {
            return Err(TensorError::Contract("mean of empty tensor".into()));
        }
        let s: f32 = x.data.iter().sum::<f32>() / x.len() as f32;
        Ok(self.push(Op::MeanAll { len: x.len() }, &[x], Vec::new(), vec![s]))
    }

    /// Σ x², as a scalar.
    pub fn sum_squares(&self, x: &Tensor) -> Tensor {
        let s: f32 = x.data.iter().map(|v| v * v).sum();
        self.push(
            Op::SumSquares {
                input: Arc::clone(&x.data),
            },
            &[x],
            Vec::new(),
            vec![s],
        )
    }

    /// Gathers rows of a 2-D tensor: `[n, c]` indexed by `idx` → `[len, c]`.
    pub fn index_select(&self, x: &Tensor, idx: &[usize]) -> Result<Tensor> {
        if x.ndim() != 2 {
            return Err(dim_err("index_select", &x.shape, &[idx.len()]));
        }
        let (rows, cols) = (x.shape[0], x.shape[1]);
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(TensorError::Index {
                    op: "index_select",
                    index: i,
                    rows,
                });
            }
            out.extend_from_slice(&x.data[i * cols..(i + 1) * cols]);
        }
        Ok(self.push(
            Op::IndexSelect {
                rows,
                cols,
                idx: Arc::new(idx.to_vec()),
            },
            &[x],
            vec![idx.len(), cols],
            out,
        ))
    }

    /// Concatenates along the last axis; leading shapes must agree.
    pub fn concat(&self, parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of nothing".into()))?;
        if first.ndim() == 0 {
            return Err(dim_err("concat", &first.shape, &[]));
        }
        let lead = &first.shape[..first.ndim() - 1];
        for p in parts {
            if p.ndim() != first.ndim() || &p.shape[..p.ndim() - 1] != lead {
                return Err(dim_err("concat", &first.shape, &p.shape));
            }
        }
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| *p.shape.last().unwrap()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok(self.push(Op::Concat { rows, widths }, parts, shape, out))
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&self, x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
        let d = *x.shape.last().ok_or_else(|| dim_err("layer_norm", &x.shape, &gamma.shape))?;
        if gamma.shape != [d] || beta.shape != [d] {
            return Err(dim_err("layer_norm", &x.shape, &gamma.shape));
        }
        let rows = x.len() / d.max(1);
        let mut out = vec![0.0; x.len()];
        let mut x_hat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x.data[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                x_hat[r * d + c] = h;
                out[r * d + c] = h * gamma.data[c] + beta.data[c];
            }
        }
        Ok(self.push(
            Op::LayerNorm {
                x_hat,
                inv_std,
                gamma: gamma.clone(),
            },
            &[x, gamma, beta],
            x.shape.clone(),
            out,
        ))
    }

    /// Cosine similarity of matching rows along the last axis, each norm
    /// floored at [`NUMERIC_FLOOR`]. `[.., d] × [.., d] → [..]`.
    pub fn cosine(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape != b.shape || a.ndim() == 0 {
            return Err(dim_err("cosine", &a.shape, &b.shape));
        }
        let d = *a.shape.last().unwrap();
        let rows = a.len() / d.max(1);
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let (ar, br) = (&a.data[r * d..(r + 1) * d], &b.data[r * d..(r + 1) * d]);
            let dot: f32 = ar.iter().zip(br).map(|(x, y)| x * y).sum();
            let na = ar.iter().map(|x| x * x).sum::<f32>().sqrt().max(NUMERIC_FLOOR);
            let nb = br.iter().map(|x| x * x).sum::<f32>().sqrt().max(NUMERIC_FLOOR);
            out.push(dot / (na * nb));
        }
        let shape = a.shape[..a.ndim() - 1].to_vec();
        Ok(self.push(
            Op::Cosine { a: a.clone(), b: b.clone() },
            &[a, b],
            shape,
            out,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        if loss.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape
            )));
        }
        let Some(root) = loss.node else {
            return Err(TensorError::Contract("loss is not on the tape".into()));
        };
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f32>>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![1.0]);
        let mut leaves = HashMap::new();
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Op::Leaf = node.op {
                leaves.insert(NodeId(id), g);
                continue;
            }
            let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
            let input_grads = node.op.backward(&g, &needs);
            for (input, ig) in node.inputs.iter().zip(input_grads) {
                if let (Some(inp), Some(ig)) = (input, ig) {
                    match &mut grads[inp.0] {
                        Some(acc) => {
                            for (a, v) in acc.iter_mut().zip(&ig) {
                                *a += v;
                            }
                        }
                        slot @ None => *slot = Some(ig),
                    }
                }
            }
        }
        Ok(Gradients { leaves })
    }
}

fn reduce_broadcast(g: &[f32], b_len: usize) -> Vec<f32> {
    let mut out = vec![0.0; b_len];
    if b_len == 0 {
        return out;
    }
    for chunk in g.chunks_exact(b_len) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

impl Op {
    /// Input gradients given the output gradient `g`. Entries for inputs
    /// with `needs[i] == false` may be `None`.
    fn backward(&self, g: &[f32], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul { a, b } => {
                let (n, k, m) = (a.shape[0], a.shape[1], b.shape[1]);
                let da = needs[0].then(|| {
                    let mut da = vec![0.0; n * k];
                    gemm(n, m, k, g, false, &b.data, true, &mut da, false);
                    da
                });
                let db = needs[1].then(|| {
                    let mut db = vec![0.0; k * m];
                    gemm(k, n, m, &a.data, true, g, false, &mut db, false);
                    db
                });
                vec![da, db]
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (gn, n, k) = (a.shape[0], a.shape[1], a.shape[2]);
                let m = if *trans_b { b.shape[1] } else { b.shape[2] };
                let (sa, sb, sg) = (n * k, k * m, n * m);
                let da = needs[0].then(|| {
                    let mut da = vec![0.0; gn * sa];
                    for gi in 0..gn {
                        let gg = &g[gi * sg..(gi + 1) * sg];
                        let bb = &b.data[gi * sb..(gi + 1) * sb];
                        // dA = dC · op(B)ᵀ
                        gemm(n, m, k, gg, false, bb, !*trans_b, &mut da[gi * sa..(gi + 1) * sa], false);
                    }
                    da
                });
                let db = needs[1].then(|| {
                    let mut db = vec![0.0; gn * sb];
                    for gi in 0..gn {
                        let gg = &g[gi * sg..(gi + 1) * sg];
                        let aa = &a.data[gi * sa..(gi + 1) * sa];
                        let dst = &mut db[gi * sb..(gi + 1) * sb];
                        if *trans_b {
                            // B is [m, k]: dB = dCᵀ · A
                            gemm(m, n, k, gg, true, aa, false, dst, false);
                        } else {
                            gemm(k, n, m, aa, true, gg, false, dst, false);
                        }
                    }
                    db
                });
                vec![da, db]
            }
            Op::Add { b_len } => vec![
                needs[0].then(|| g.to_vec()),
                needs[1].then(|| reduce_broadcast(g, *b_len)),
            ],
            Op::Sub { b_len } => vec![
                needs[0].then(|| g.to_vec()),
                needs[1].then(|| {
                    let mut r = reduce_broadcast(g, *b_len);
                    r.iter_mut().for_each(|v| *v = -*v);
                    r
                }),
            ],
            Op::Mul { a, b } => {
                let bl = b.len().max(1);
                let da = needs[0].then(|| {
                    g.iter()
                        .enumerate()
                        .map(|(i, gv)| gv * b.data[i % bl])
                        .collect()
                });
                let db = needs[1].then(|| {
                    let prod: Vec<f32> = g.iter().zip(a.data.iter()).map(|(gv, av)| gv * av).collect();
                    reduce_broadcast(&prod, b.len())
                });
                vec![da, db]
            }
            Op::Affine { scale } => vec![Some(g.iter().map(|v| v * scale).collect())],
            Op::Sigmoid { out } => vec![Some(
                g.iter()
                    .zip(out.iter())
                    .map(|(gv, y)| gv * y * (1.0 - y))
                    .collect(),
            )],
            Op::Relu { input } => vec![Some(
                g.iter()
                    .zip(input.iter())
                    .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                    .collect(),
            )],
            Op::Log { input } => vec![Some(
                g.iter()
                    .zip(input.iter())
                    .map(|(gv, x)| if *x > NUMERIC_FLOOR { gv / x } else { 0.0 })
                    .collect(),
            )],
            Op::Sqrt { input, out } => vec![Some(
                g.iter()
                    .zip(input.iter().zip(out.iter()))
                    .map(|(gv, (x, y))| if *x > NUMERIC_FLOOR { gv / (2.0 * y) } else { 0.0 })
                    .collect(),
            )],
            Op::Softmax { out, cols } => {
                let mut dx = vec![0.0; g.len()];
                softmax_rows_backward(out, g, *cols, &mut dx);
                vec![Some(dx)]
            }
            Op::MaskedFill { mask } => vec![Some(
                g.iter()
                    .zip(mask.iter())
                    .map(|(gv, m)| if *m { 0.0 } else { *gv })
                    .collect(),
            )],
            Op::Reshape => vec![Some(g.to_vec())],
            Op::Permute { out_shape, perm } => {
                let inv = inverse_permutation(perm);
                let (dx, _) = permute_data(g, out_shape, &inv);
                vec![Some(dx)]
            }
            Op::SumAxis { outer, n, inner } => {
                let mut dx = vec![0.0; outer * n * inner];
                for o in 0..*outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for j in 0..*n {
                        dx[(o * n + j) * inner..(o * n + j + 1) * inner].copy_from_slice(src);
                    }
                }
                vec![Some(dx)]
            }
            Op::SumAll { len } => vec![Some(vec![g[0]; *len])],
            Op::MeanAll { len } => vec![Some(vec![g[0] / *len as f32; *len])],
            Op::SumSquares { input } => vec![Some(input.iter().map(|x| 2.0 * x * g[0]).collect())],
            Op::IndexSelect { rows, cols, idx } => {
                let mut dx = vec![0.0; rows * cols];
                for (r, &i) in idx.iter().enumerate() {
                    let src = &g[r * cols..(r + 1) * cols];
                    for (d, s) in dx[i * cols..(i + 1) * cols].iter_mut().zip(src) {
                        *d += s;
                    }
                }
                vec![Some(dx)]
            }
            Op::Concat { rows, widths } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                let mut out = Vec::with_capacity(widths.len());
                for (p, &w) in widths.iter().enumerate() {
                    if !needs[p] {
                        out.push(None);
                    } else {
                        let mut part = Vec::with_capacity(rows * w);
                        for r in 0..*rows {
                            part.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        out.push(Some(part));
                    }
                    offset += w;
                }
                out
            }
            Op::LayerNorm { x_hat, inv_std, gamma } => {
                let d = gamma.len();
                let rows = inv_std.len();
                let mut dx = vec![0.0; rows * d];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &x_hat[r * d..(r + 1) * d];
                    let mut sum_dh = 0.0f32;
                    let mut sum_dh_h = 0.0f32;
                    for c in 0..d {
                        let dh = gr[c] * gamma.data[c];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[c];
                        dgamma[c] += gr[c] * hr[c];
                        dbeta[c] += gr[c];
                    }
                    let inv_d = 1.0 / d as f32;
                    for c in 0..d {
                        let dh = gr[c] * gamma.data[c];
                        dx[r * d + c] = inv_std[r] * (dh - inv_d * sum_dh - hr[c] * inv_d * sum_dh_h);
                    }
                }
                vec![Some(dx), needs[1].then_some(dgamma), needs[2].then_some(dbeta)]
            }
            Op::Cosine { a, b } => {
                let d = *a.shape.last().unwrap();
                let rows = g.len();
                let mut da = vec![0.0; a.len()];
                let mut db = vec![0.0; b.len()];
                for r in 0..rows {
                    let (ar, br) = (&a.data[r * d..(r + 1) * d], &b.data[r * d..(r + 1) * d]);
                    let dot: f32 = ar.iter().zip(br).map(|(x, y)| x * y).sum();
                    let raw_a = ar.iter().map(|x| x * x).sum::<f32>().sqrt();
                    let raw_b = br.iter().map(|x| x * x).sum::<f32>().sqrt();
                    let na = raw_a.max(NUMERIC_FLOOR);
                    let nb = raw_b.max(NUMERIC_FLOOR);
                    let inv = 1.0 / (na * nb);
                    // norms clamped at the floor are constants
                    let ca = if raw_a > NUMERIC_FLOOR { dot * inv / (na * na) } else { 0.0 };
                    let cb = if raw_b > NUMERIC_FLOOR { dot * inv / (nb * nb) } else { 0.0 };
                    for c in 0..d {
                        da[r * d + c] = g[r] * (br[c] * inv - ca * ar[c]);
                        db[r * d + c] = g[r] * (ar[c] * inv - cb * br[c]);
                    }
                }
                vec![needs[0].then_some(da), needs[1].then_some(db)]
            }
        }
    }
}
