use super::{is_blocked, Result, TensorError};

/// Strided view of a matrix operand.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    pub fn rows(data: &'a [f64], cols: usize) -> Self {
        Self { data, rs: cols, cs: 1 }
    }

    /// The transpose of a row-major `rows × cols` matrix.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self { data, rs: 1, cs: cols }
    }

    fn max_index(&self, r: usize, c: usize) -> usize {
        if r == 0 || c == 0 {
            0
        } else {
            (r - 1) * self.rs + (c - 1) * self.cs
        }
    }
}

/// `c = alpha · a · b + beta · c` where `a` is `m × k` and `b` is `k × n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: MatRef<'_>,
    b: MatRef<'_>,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.data.len() > a.max_index(m, k) || k == 0);
    assert!(b.data.len() > b.max_index(k, n) || k == 0);
    assert!(c.len() > (m - 1) * rsc + (n - 1));
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

/// Softmax of `logits + bias` over one row, skipping blocked entries.
pub(crate) fn masked_softmax_row(
    logits: &[f64],
    bias: impl Fn(usize) -> f64,
    out: &mut [f64],
    row: usize,
) -> Result<()> {
    let mut max = f64::NEG_INFINITY;
    let mut any = false;
    for (j, &l) in logits.iter().enumerate() {
        let b = bias(j);
        if is_blocked(b) {
            continue;
        }
        any = true;
        let z = l + b;
        if z > max {
            max = z;
        }
    }
    if !any {
        return Err(TensorError::DegenerateRow { row });
    }
    let mut sum = 0.0;
    for (j, &l) in logits.iter().enumerate() {
        let b = bias(j);
        if is_blocked(b) {
            out[j] = 0.0;
        } else {
            let e = (l + b - max).exp();
            out[j] = e;
            sum += e;
        }
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
    Ok(())
}

/// Gradient of softmax given the output row `p` and upstream `dp`, written to `ds`.
pub(crate) fn softmax_row_backward(p: &[f64], dp: &[f64], ds: &mut [f64]) {
    let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    for ((d, &pj), &dpj) in ds.iter_mut().zip(p).zip(dp) {
        *d = pj * (dpj - dot);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

// libm tanh goes through expm1 and dominated the FFN cost
fn tanh(u: f64) -> f64 {
    if u.abs() > 20.0 {
        return u.signum();
    }
    let e = (2.0 * u).exp();
    (e - 1.0) / (e + 1.0)
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + tanh(GELU_C * (x + GELU_K * x * x * x)))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = tanh(GELU_C * (x + GELU_K * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)` without overflow for large `|x|`.
pub fn log_sigmoid(x: f64) -> f64 {
    -((-x).max(0.0) + (-x.abs()).exp().ln_1p())
}
