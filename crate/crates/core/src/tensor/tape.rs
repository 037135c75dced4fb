use super::kernels::{self, gemm, MatRef};
use super::{dims2, numel, Result, Tensor, TensorError};
use crate::masking::AttentionMask;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Backward rule for a custom op: given the upstream gradient, returns one
/// optional gradient per input (in input order).
pub type CustomBackward = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Gelu(usize),
    Sigmoid(usize),
    LogSigmoid(usize),
    Ln(usize),
    Sum(usize),
    Mean(usize),
    MaskedSoftmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<usize>),
    SliceRows {
        x: usize,
        start: usize,
    },
    SliceFlat {
        x: usize,
        offset: usize,
    },
    MeanRows {
        x: usize,
        lens: Vec<usize>,
    },
    L2NormalizeRows {
        x: usize,
        norms: Vec<f64>,
    },
    UpperRowBroadcast {
        g: usize,
        lens: Vec<usize>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        bias: Option<usize>,
        n_heads: usize,
        scale: f64,
        lens: Vec<usize>,
        probs: Vec<f64>,
    },
    Custom {
        inputs: Vec<usize>,
        backward: CustomBackward,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Gelu(_) => "gelu",
            Op::Sigmoid(_) => "sigmoid",
            Op::LogSigmoid(_) => "log_sigmoid",
            Op::Ln(_) => "ln",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MaskedSoftmax(_) => "masked_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceFlat { .. } => "slice_flat",
            Op::MeanRows { .. } => "mean_rows",
            Op::L2NormalizeRows { .. } => "l2_normalize_rows",
            Op::UpperRowBroadcast { .. } => "upper_row_broadcast",
            Op::Attention { .. } => "attention",
            Op::Custom { .. } => "custom",
        }
    }
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
}

/// Append-only record of a forward pass.
///
/// Nodes are stored in creation order, so every node's inputs precede it.
/// After [`Tape::backward`] the tape is frozen: no further ops may be
/// recorded and a second backward fails with [`TensorError::TapeConsumed`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    retain: Vec<bool>,
    consumed: bool,
}

/// Each tape allocates tens of megabytes of short-lived buffers. glibc
/// serves large requests with fresh `mmap`s, so every step paid for page
/// faults on memory it had just released; keep them on the heap instead.
fn keep_heap_mapped() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        static ONCE: std::sync::Once = std::sync::Once::new();
        ONCE.call_once(|| unsafe {
            // SAFETY: mallopt only adjusts allocator tunables.
            libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
            libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        });
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], i: usize) -> &'a mut Vec<f64> {
    let len = nodes[i].value.len();
    grads[i].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        keep_heap_mapped();
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    fn check(&self, v: Var) -> Result<&Node> {
        self.nodes.get(v.0).ok_or(TensorError::UnknownVar(v.0))
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>) -> Result<Var> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        debug_assert_eq!(numel(&shape), value.len(), "{}", op.name());
        let requires_grad = match &op {
            Op::Leaf => false,
            _ => self.inputs_of(&op).iter().any(|&i| self.nodes[i].requires_grad),
        };
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
        });
        self.retain.push(false);
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_of(&self, op: &Op) -> Vec<usize> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Gelu(a)
            | Op::Sigmoid(a)
            | Op::LogSigmoid(a)
            | Op::Ln(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MaskedSoftmax(a)
            | Op::MeanRows { x: a, .. }
            | Op::UpperRowBroadcast { g: a, .. } => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Gather { table, .. } => vec![*table],
            Op::ConcatRows(xs) => xs.clone(),
            Op::SliceRows { x, .. } | Op::SliceFlat { x, .. } | Op::L2NormalizeRows { x, .. } => {
                vec![*x]
            }
            Op::Attention { q, k, v, bias, .. } => {
                let mut ins = vec![*q, *k, *v];
                ins.extend(bias);
                ins
            }
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }

    // ── leaves ───────────────────────────────────────────────────────

    /// Records a constant (no gradient).
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        self.push(Op::Leaf, t.shape, t.data)
    }

    /// Records a copy of `t` as a leaf; gradient flows iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        let v = self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec())?;
        self.nodes[v.0].requires_grad = t.requires_grad();
        Ok(v)
    }

    /// Like [`Tape::leaf`] but also stamps the tensor with its node id so
    /// [`Tape::collect_grad`] can find it later.
    pub fn register(&mut self, t: &mut Tensor) -> Result<Var> {
        let v = self.leaf(t)?;
        t.attach(v.0);
        Ok(v)
    }

    /// Copies the gradient of a registered tensor into its `grad` slot and
    /// detaches it. Returns `false` when the tensor is not on this tape.
    pub fn collect_grad(&self, t: &mut Tensor) -> Result<bool> {
        let Some(id) = t.node_id() else {
            return Ok(false);
        };
        if id >= self.nodes.len() {
            return Err(TensorError::UnknownVar(id));
        }
        let g = self.grad(Var(id))?.to_vec();
        t.set_grad(g)?;
        t.detach();
        Ok(true)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Keeps the gradient of an intermediate node after backward.
    pub fn retain_grad(&mut self, v: Var) {
        self.retain[v.0] = true;
    }

    pub fn grad(&self, v: Var) -> Result<&[f64]> {
        self.check(v)?;
        self.grads
            .get(v.0)
            .and_then(|g| g.as_deref())
            .ok_or(TensorError::NotRetained(v.0))
    }

    /// Snapshot of a node as a tensor, including its gradient when available.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        let mut t = Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node shape");
        if let Ok(g) = self.grad(v) {
            t.set_grad(g.to_vec()).expect("grad shape");
        }
        t
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        dims2(&self.nodes[v.0].shape)
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::Shape {
            op,
            left: self.nodes[a.0].shape.clone(),
            right: self.nodes[b.0].shape.clone(),
        }
    }

    // ── linear algebra ───────────────────────────────────────────────

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            MatRef::rows(self.value(a), k),
            MatRef::rows(self.value(b), n),
            0.0,
            &mut out,
            n,
        );
        self.push(Op::MatMul(a.0, b.0), vec![m, n], out)
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(self.shape_err("matmul_t", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            MatRef::rows(self.value(a), k),
            MatRef::transposed(self.value(b), k),
            0.0,
            &mut out,
            n,
        );
        self.push(Op::MatMulT(a.0, b.0), vec![m, n], out)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let (r, c) = self.dims(a);
        let src = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(Op::Transpose(a.0), vec![c, r], out)
    }

    // ── elementwise ──────────────────────────────────────────────────

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        if self.nodes[a.0].value.len() != self.nodes[b.0].value.len() {
            return Err(self.shape_err(op, a, b));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push(Op::Add(a.0, b.0), self.shape(a).to_vec(), out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push(Op::Sub(a.0, b.0), self.shape(a).to_vec(), out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push(Op::Mul(a.0, b.0), self.shape(a).to_vec(), out)
    }

    /// `x[m×n] + row[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.check(x)?;
        self.check(row)?;
        let (m, n) = self.dims(x);
        if self.value(row).len() != n {
            return Err(self.shape_err("add_row", x, row));
        }
        let r = self.value(row);
        let mut out = self.value(x).to_vec();
        for i in 0..m {
            add_into(&mut out[i * n..(i + 1) * n], r);
        }
        self.push(Op::AddRow(x.0, row.0), self.shape(x).to_vec(), out)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).iter().map(|x| x * s).collect();
        self.push(Op::Scale(a.0, s), self.shape(a).to_vec(), out)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        self.push(op, self.shape(a).to_vec(), out)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Gelu(a.0), kernels::gelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid(a.0), kernels::sigmoid)
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::LogSigmoid(a.0), kernels::log_sigmoid)
    }

    /// Natural log; every input must be strictly positive.
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        if self.value(a).iter().any(|&x| !(x > 0.0)) {
            return Err(TensorError::NonFinite("ln of non-positive value".into()));
        }
        self.unary(a, Op::Ln(a.0), f64::ln)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.value(a).iter().sum();
        self.push(Op::Sum(a.0), vec![], vec![s])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(Op::Mean(a.0), vec![], vec![s])
    }

    // ── structured ───────────────────────────────────────────────────

    /// Row-wise softmax of `logits + mask`; blocked entries are exactly 0.
    pub fn masked_softmax(&mut self, logits: Var, mask: &AttentionMask) -> Result<Var> {
        self.check(logits)?;
        let (r, c) = self.dims(logits);
        if r != mask.dim() || c != mask.dim() {
            return Err(TensorError::Shape {
                op: "masked_softmax",
                left: self.shape(logits).to_vec(),
                right: vec![mask.dim(), mask.dim()],
            });
        }
        let x = self.value(logits);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let brow = mask.row(i);
            kernels::masked_softmax_row(
                &x[i * c..(i + 1) * c],
                |j| brow[j],
                &mut out[i * c..(i + 1) * c],
                i,
            )?;
        }
        self.push(Op::MaskedSoftmax(logits.0), vec![r, c], out)
    }

    /// Per-row layer normalisation with affine `gain`/`bias` of length `d`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        self.check(x)?;
        self.check(gain)?;
        self.check(bias)?;
        if !(eps > 0.0) {
            return Err(TensorError::Invalid(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (m, d) = self.dims(x);
        if self.value(gain).len() != d {
            return Err(self.shape_err("layer_norm", x, gain));
        }
        if self.value(bias).len() != d {
            return Err(self.shape_err("layer_norm", x, bias));
        }
        let src = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let mut xhat = vec![0.0; m * d];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            let row = &src[i * d..(i + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..d {
                let xh = (row[j] - mu) * rs;
                xhat[i * d + j] = xh;
                out[i * d + j] = xh * g[j] + b[j];
            }
        }
        self.push(
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                rstd,
            },
            self.shape(x).to_vec(),
            out,
        )
    }

    /// Selects rows of an embedding table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.check(table)?;
        let (rows, d) = self.dims(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Invalid(format!(
                "gather index {bad} out of range for table with {rows} rows"
            )));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let shape = vec![ids.len().max(1), d];
        if ids.is_empty() {
            return Err(TensorError::Invalid("gather with no indices".into()));
        }
        self.push(
            Op::Gather {
                table: table.0,
                ids: ids.to_vec(),
            },
            shape,
            out,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::Invalid("concat_rows of nothing".into()));
        };
        for &p in parts {
            self.check(p)?;
        }
        let (_, d) = self.dims(first);
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != d {
                return Err(self.shape_err("concat_rows", first, p));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        self.push(
            Op::ConcatRows(parts.iter().map(|v| v.0).collect()),
            vec![rows, d],
            out,
        )
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.check(x)?;
        let (r, c) = self.dims(x);
        if len == 0 || start + len > r {
            return Err(TensorError::Invalid(format!(
                "slice_rows {start}..{} out of range for {r} rows",
                start + len
            )));
        }
        let out = self.value(x)[start * c..(start + len) * c].to_vec();
        self.push(Op::SliceRows { x: x.0, start }, vec![len, c], out)
    }

    /// A contiguous run of `x`'s data viewed with a new shape.
    pub fn slice_flat(&mut self, x: Var, offset: usize, shape: Vec<usize>) -> Result<Var> {
        self.check(x)?;
        let n = numel(&shape);
        if n == 0 || offset + n > self.value(x).len() {
            return Err(TensorError::Invalid(format!(
                "slice_flat {offset}+{n} exceeds {}",
                self.value(x).len()
            )));
        }
        let out = self.value(x)[offset..offset + n].to_vec();
        self.push(Op::SliceFlat { x: x.0, offset }, shape, out)
    }

    /// Mean over rows, giving a `1 × d` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let (r, _) = self.dims(x);
        self.mean_rows_packed(x, &[r])
    }

    /// Mean over consecutive row groups of sizes `lens`, one output row
    /// per group.
    pub fn mean_rows_packed(&mut self, x: Var, lens: &[usize]) -> Result<Var> {
        self.check(x)?;
        let (r, d) = self.dims(x);
        if lens.iter().sum::<usize>() != r || lens.contains(&0) {
            return Err(TensorError::Invalid(format!("row groups {lens:?} do not tile {r} rows")));
        }
        let src = self.value(x);
        let mut out = vec![0.0; lens.len() * d];
        let mut row0 = 0;
        for (g, &n) in lens.iter().enumerate() {
            let o = &mut out[g * d..(g + 1) * d];
            for i in row0..row0 + n {
                add_into(o, &src[i * d..(i + 1) * d]);
            }
            for v in o.iter_mut() {
                *v /= n as f64;
            }
            row0 += n;
        }
        self.push(
            Op::MeanRows {
                x: x.0,
                lens: lens.to_vec(),
            },
            vec![lens.len(), d],
            out,
        )
    }

    /// Scales every row to unit L2 norm; a zero row is an error.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let (r, d) = self.dims(x);
        let src = self.value(x);
        let mut norms = Vec::with_capacity(r);
        let mut out = src.to_vec();
        for i in 0..r {
            let n = src[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(n > 0.0) || !n.is_finite() {
                return Err(TensorError::NonFinite(format!("row {i} has norm {n}")));
            }
            norms.push(n);
            for o in &mut out[i * d..(i + 1) * d] {
                *o /= n;
            }
        }
        self.push(Op::L2NormalizeRows { x: x.0, norms }, vec![r, d], out)
    }

    /// From a column `g[L]`, the `L×L` matrix with `g[i]` at every `j > i`
    /// and zero elsewhere.
    pub fn upper_row_broadcast(&mut self, g: Var) -> Result<Var> {
        self.check(g)?;
        let l = self.value(g).len();
        let v = self.upper_row_broadcast_packed(g, &[l])?;
        self.nodes[v.0].shape = vec![l, l];
        Ok(v)
    }

    /// Segmented [`Tape::upper_row_broadcast`]: `g` holds one entry per
    /// row of several sequences of lengths `lens`; the result is the
    /// concatenation of each sequence's `L_s × L_s` block, flattened.
    pub fn upper_row_broadcast_packed(&mut self, g: Var, lens: &[usize]) -> Result<Var> {
        self.check(g)?;
        let src = self.value(g);
        if lens.iter().sum::<usize>() != src.len() || lens.contains(&0) {
            return Err(TensorError::Invalid(format!(
                "segment lengths {lens:?} do not tile {} rows",
                src.len()
            )));
        }
        let total: usize = lens.iter().map(|l| l * l).sum();
        let mut out = vec![0.0; total];
        let (mut row0, mut off) = (0, 0);
        for &l in lens {
            for i in 0..l {
                out[off + i * l + i + 1..off + (i + 1) * l].fill(src[row0 + i]);
            }
            row0 += l;
            off += l * l;
        }
        self.push(
            Op::UpperRowBroadcast {
                g: g.0,
                lens: lens.to_vec(),
            },
            vec![total],
            out,
        )
    }

    /// Fused multi-head scaled dot-product attention over one sequence.
    ///
    /// `q`, `k`, `v` are `L × d` with heads laid out as contiguous column
    /// blocks of width `d / n_heads`. Every head sees `q_h k_hᵀ / √d_h`
    /// plus the same additive `mask` and, when given, the same
    /// differentiable `bias`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: &AttentionMask,
        bias: Option<Var>,
        n_heads: usize,
    ) -> Result<Var> {
        self.attention_packed(q, k, v, &[mask], bias, n_heads)
    }

    /// [`Tape::attention`] over several sequences stacked row-wise.
    ///
    /// Sequence `s` occupies the next `masks[s].dim()` rows; rows never
    /// attend across sequences. `bias`, when given, is the flat
    /// concatenation of one `L_s × L_s` block per sequence.
    pub fn attention_packed(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        masks: &[&AttentionMask],
        bias: Option<Var>,
        n_heads: usize,
    ) -> Result<Var> {
        for x in [q, k, v].into_iter().chain(bias) {
            self.check(x)?;
        }
        let (rows, d) = self.dims(q);
        if self.dims(k) != (rows, d) {
            return Err(self.shape_err("attention", q, k));
        }
        if self.dims(v) != (rows, d) {
            return Err(self.shape_err("attention", q, v));
        }
        let lens: Vec<usize> = masks.iter().map(|m| m.dim()).collect();
        if lens.iter().sum::<usize>() != rows {
            return Err(TensorError::Shape {
                op: "attention",
                left: vec![rows, d],
                right: lens,
            });
        }
        let sq: usize = lens.iter().map(|l| l * l).sum();
        if let Some(b) = bias {
            if self.value(b).len() != sq {
                return Err(self.shape_err("attention", q, b));
            }
        }
        if n_heads == 0 || d % n_heads != 0 {
            return Err(TensorError::Invalid(format!(
                "d={d} not divisible by n_heads={n_heads}"
            )));
        }
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; n_heads * sq];
        let mut out = vec![0.0; rows * d];
        {
            let qv = self.value(q);
            let kv = self.value(k);
            let vv = self.value(v);
            let bv = bias.map(|b| self.value(b));
            let (mut row0, mut boff) = (0, 0);
            for mask in masks {
                let l = mask.dim();
                let mut logits = vec![0.0; l * l];
                for h in 0..n_heads {
                    let off = row0 * d + h * dh;
                    gemm(
                        l,
                        dh,
                        l,
                        scale,
                        MatRef { data: &qv[off..], rs: d, cs: 1 },
                        MatRef { data: &kv[off..], rs: 1, cs: d },
                        0.0,
                        &mut logits,
                        l,
                    );
                    if let Some(bv) = bv {
                        add_into(&mut logits, &bv[boff..boff + l * l]);
                    }
                    let p = &mut probs[n_heads * boff + h * l * l..n_heads * boff + (h + 1) * l * l];
                    for i in 0..l {
                        let mrow = mask.row(i);
                        kernels::masked_softmax_row(
                            &logits[i * l..(i + 1) * l],
                            |j| mrow[j],
                            &mut p[i * l..(i + 1) * l],
                            i,
                        )?;
                    }
                    gemm(
                        l,
                        l,
                        dh,
                        1.0,
                        MatRef::rows(p, l),
                        MatRef { data: &vv[off..], rs: d, cs: 1 },
                        0.0,
                        &mut out[off..],
                        d,
                    );
                }
                row0 += l;
                boff += l * l;
            }
        }
        let lens = masks.iter().map(|m| m.dim()).collect();
        self.push(
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                bias: bias.map(|b| b.0),
                n_heads,
                scale,
                lens,
                probs,
            },
            vec![rows, d],
            out,
        )
    }

    /// Records an op whose forward value was computed by the caller.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        shape: Vec<usize>,
        value: Vec<f64>,
        backward: CustomBackward,
    ) -> Result<Var> {
        for &x in inputs {
            self.check(x)?;
        }
        if numel(&shape) != value.len() {
            return Err(TensorError::Shape {
                op: "custom",
                left: shape,
                right: vec![value.len()],
            });
        }
        self.push(
            Op::Custom {
                inputs: inputs.iter().map(|v| v.0).collect(),
                backward,
            },
            shape,
            value,
        )
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss.
    ///
    /// Afterwards gradients are available for every leaf that requires
    /// one (zeros when unreached) and for nodes marked with
    /// [`Tape::retain_grad`]; all other intermediates are dropped.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        self.check(loss)?;
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::NotScalar(self.nodes[loss.0].shape.clone()));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        for (id, node) in self.nodes.iter().enumerate() {
            let keep = (matches!(node.op, Op::Leaf) && node.requires_grad) || self.retain[id];
            if keep {
                if grads[id].is_none() {
                    grads[id] = Some(vec![0.0; node.value.len()]);
                }
            } else {
                grads[id] = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |i: usize| nodes[i].requires_grad;
        macro_rules! acc {
            ($i:expr) => {
                slot(grads, nodes, $i)
            };
        }
        let node = &nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(&nodes[*a].shape);
                let n = node.shape[1];
                if wants(*a) {
                    let da = acc!(*a);
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        MatRef::rows(g, n),
                        MatRef::transposed(&nodes[*b].value, n),
                        1.0,
                        da,
                        k,
                    );
                }
                if wants(*b) {
                    let db = acc!(*b);
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        MatRef::transposed(&nodes[*a].value, k),
                        MatRef::rows(g, n),
                        1.0,
                        db,
                        n,
                    );
                }
            }
            Op::MatMulT(a, b) => {
                // C = A Bᵀ: dA = dC B, dB = dCᵀ A
                let (m, k) = dims2(&nodes[*a].shape);
                let n = node.shape[1];
                if wants(*a) {
                    let da = acc!(*a);
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        MatRef::rows(g, n),
                        MatRef::rows(&nodes[*b].value, k),
                        1.0,
                        da,
                        k,
                    );
                }
                if wants(*b) {
                    let db = acc!(*b);
                    gemm(
                        n,
                        m,
                        k,
                        1.0,
                        MatRef::transposed(g, n),
                        MatRef::rows(&nodes[*a].value, k),
                        1.0,
                        db,
                        k,
                    );
                }
            }
            Op::Transpose(a) => {
                if wants(*a) {
                    let (r, c) = dims2(&nodes[*a].shape);
                    let da = acc!(*a);
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    add_into(acc!(*a), g);
                }
                if wants(*b) {
                    add_into(acc!(*b), g);
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    add_into(acc!(*a), g);
                }
                if wants(*b) {
                    for (d, s) in acc!(*b).iter_mut().zip(g) {
                        *d -= s;
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = &nodes[*b].value;
                    for ((d, s), y) in acc!(*a).iter_mut().zip(g).zip(bv) {
                        *d += s * y;
                    }
                }
                if wants(*b) {
                    let av = &nodes[*a].value;
                    for ((d, s), x) in acc!(*b).iter_mut().zip(g).zip(av) {
                        *d += s * x;
                    }
                }
            }
            Op::AddRow(x, r) => {
                if wants(*x) {
                    add_into(acc!(*x), g);
                }
                if wants(*r) {
                    let n = nodes[*r].value.len();
                    let dr = acc!(*r);
                    for row in g.chunks(n) {
                        add_into(dr, row);
                    }
                }
            }
            Op::Scale(a, s) => {
                if wants(*a) {
                    for (d, gi) in acc!(*a).iter_mut().zip(g) {
                        *d += gi * s;
                    }
                }
            }
            Op::Gelu(a) => {
                if wants(*a) {
                    let x = &nodes[*a].value;
                    for ((d, gi), &xi) in acc!(*a).iter_mut().zip(g).zip(x) {
                        *d += gi * kernels::gelu_grad(xi);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if wants(*a) {
                    for ((d, gi), &y) in acc!(*a).iter_mut().zip(g).zip(&node.value) {
                        *d += gi * y * (1.0 - y);
                    }
                }
            }
            Op::LogSigmoid(a) => {
                if wants(*a) {
                    let x = &nodes[*a].value;
                    for ((d, gi), &xi) in acc!(*a).iter_mut().zip(g).zip(x) {
                        *d += gi * kernels::sigmoid(-xi);
                    }
                }
            }
            Op::Ln(a) => {
                if wants(*a) {
                    let x = &nodes[*a].value;
                    for ((d, gi), &xi) in acc!(*a).iter_mut().zip(g).zip(x) {
                        *d += gi / xi;
                    }
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    for d in acc!(*a).iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean(a) => {
                if wants(*a) {
                    let da = acc!(*a);
                    let s = g[0] / da.len() as f64;
                    for d in da.iter_mut() {
                        *d += s;
                    }
                }
            }
            Op::MaskedSoftmax(a) => {
                if wants(*a) {
                    let c = node.shape[1];
                    let da = acc!(*a);
                    let mut ds = vec![0.0; c];
                    for (i, (p, dp)) in node.value.chunks(c).zip(g.chunks(c)).enumerate() {
                        kernels::softmax_row_backward(p, dp, &mut ds);
                        add_into(&mut da[i * c..(i + 1) * c], &ds);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = nodes[*gain].value.len();
                let gv = &nodes[*gain].value;
                if wants(*x) {
                    let dx = acc!(*x);
                    let mut dxh = vec![0.0; d];
                    for (i, &rs) in rstd.iter().enumerate() {
                        let gy = &g[i * d..(i + 1) * d];
                        let xh = &xhat[i * d..(i + 1) * d];
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..d {
                            dxh[j] = gy[j] * gv[j];
                            mean_dxh += dxh[j];
                            mean_dxh_xh += dxh[j] * xh[j];
                        }
                        mean_dxh /= d as f64;
                        mean_dxh_xh /= d as f64;
                        for j in 0..d {
                            dx[i * d + j] += rs * (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                }
                if wants(*gain) {
                    let dg = acc!(*gain);
                    for (gy, xh) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gy[j] * xh[j];
                        }
                    }
                }
                if wants(*bias) {
                    let db = acc!(*bias);
                    for gy in g.chunks(d) {
                        add_into(db, gy);
                    }
                }
            }
            Op::Gather { table, ids } => {
                if wants(*table) {
                    let d = node.shape[1];
                    let dt = acc!(*table);
                    for (r, &i) in ids.iter().enumerate() {
                        add_into(&mut dt[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p].value.len();
                    if wants(p) {
                        add_into(acc!(p), &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::SliceRows { x, start } => {
                if wants(*x) {
                    let c = node.shape[1];
                    add_into(&mut acc!(*x)[start * c..], g);
                }
            }
            Op::SliceFlat { x, offset } => {
                if wants(*x) {
                    add_into(&mut acc!(*x)[*offset..], g);
                }
            }
            Op::MeanRows { x, lens } => {
                if wants(*x) {
                    let d = node.shape[1];
                    let dx = acc!(*x);
                    let mut row0 = 0;
                    for (k, &n) in lens.iter().enumerate() {
                        let gk = &g[k * d..(k + 1) * d];
                        for i in row0..row0 + n {
                            for j in 0..d {
                                dx[i * d + j] += gk[j] / n as f64;
                            }
                        }
                        row0 += n;
                    }
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                if wants(*x) {
                    let d = node.shape[1];
                    let dx = acc!(*x);
                    for (i, &n) in norms.iter().enumerate() {
                        let y = &node.value[i * d..(i + 1) * d];
                        let gy = &g[i * d..(i + 1) * d];
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dx[i * d + j] += (gy[j] - y[j] * dot) / n;
                        }
                    }
                }
            }
            Op::UpperRowBroadcast { g: a, lens } => {
                if wants(*a) {
                    let da = acc!(*a);
                    let (mut row0, mut off) = (0, 0);
                    for &l in lens {
                        for i in 0..l {
                            da[row0 + i] += g[off + i * l + i + 1..off + (i + 1) * l].iter().sum::<f64>();
                        }
                        row0 += l;
                        off += l * l;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                bias,
                n_heads,
                scale,
                lens,
                probs,
            } => {
                let (rows, d) = dims2(&node.shape);
                let dh = d / n_heads;
                let (qv, kv, vv) = (&nodes[*q].value, &nodes[*k].value, &nodes[*v].value);
                let mut dq = vec![0.0; rows * d];
                let mut dk = vec![0.0; rows * d];
                let mut dv = vec![0.0; rows * d];
                let mut dbias = bias.map(|b| vec![0.0; nodes[b].value.len()]);
                let (mut row0, mut boff) = (0, 0);
                for &l in lens {
                    let mut dp = vec![0.0; l * l];
                    let mut ds = vec![0.0; l * l];
                    for h in 0..*n_heads {
                        let off = row0 * d + h * dh;
                        let p = &probs[n_heads * boff + h * l * l..n_heads * boff + (h + 1) * l * l];
                        // dP = dO_h · V_hᵀ
                        gemm(
                            l,
                            dh,
                            l,
                            1.0,
                            MatRef { data: &g[off..], rs: d, cs: 1 },
                            MatRef { data: &vv[off..], rs: 1, cs: d },
                            0.0,
                            &mut dp,
                            l,
                        );
                        // dV_h = Pᵀ · dO_h
                        gemm(
                            l,
                            l,
                            dh,
                            1.0,
                            MatRef::transposed(p, l),
                            MatRef { data: &g[off..], rs: d, cs: 1 },
                            1.0,
                            &mut dv[off..],
                            d,
                        );
                        for i in 0..l {
                            kernels::softmax_row_backward(
                                &p[i * l..(i + 1) * l],
                                &dp[i * l..(i + 1) * l],
                                &mut ds[i * l..(i + 1) * l],
                            );
                        }
                        if let Some(db) = dbias.as_mut() {
                            add_into(&mut db[boff..boff + l * l], &ds);
                        }
                        // dQ_h = s · dS · K_h ; dK_h = s · dSᵀ · Q_h
                        gemm(
                            l,
                            l,
                            dh,
                            *scale,
                            MatRef::rows(&ds, l),
                            MatRef { data: &kv[off..], rs: d, cs: 1 },
                            1.0,
                            &mut dq[off..],
                            d,
                        );
                        gemm(
                            l,
                            l,
                            dh,
                            *scale,
                            MatRef::transposed(&ds, l),
                            MatRef { data: &qv[off..], rs: d, cs: 1 },
                            1.0,
                            &mut dk[off..],
                            d,
                        );
                    }
                    row0 += l;
                    boff += l * l;
                }
                for (i, gi) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if wants(i) {
                        add_into(acc!(i), &gi);
                    }
                }
                if let (Some(b), Some(db)) = (bias, dbias) {
                    if wants(*b) {
                        add_into(acc!(*b), &db);
                    }
                }
            }
            Op::Custom { inputs, backward } => {
                let parts = backward(g);
                for (&i, gi) in inputs.iter().zip(parts) {
                    if let Some(gi) = gi {
                        if wants(i) {
                            add_into(acc!(i), &gi);
                        }
                    }
                }
            }
        }
    }
}
