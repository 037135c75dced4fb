use super::{Result, Tape, Tensor, TensorError, Var};

/// Largest relative error between the tape gradient of `f` at `params` and a
/// central finite difference with step `h`.
///
/// `f` receives a fresh tape and the parameter var and must return a scalar
/// loss. The relative error per coordinate is `|a − n| / max(1, |a|)`.
pub fn finite_diff_check<F>(f: F, params: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(TensorError::Invalid(format!("step {h} outside [1e-7, 1e-3]")));
    }
    let mut p = params.clone();
    p.set_requires_grad(true);

    let mut tape = Tape::new();
    let x = tape.leaf(&p)?;
    let loss = f(&mut tape, x)?;
    tape.backward(loss)?;
    let analytic = tape.grad(x)?.to_vec();

    let eval = |data: Vec<f64>| -> Result<f64> {
        let t = Tensor::new(p.shape().to_vec(), data)?;
        let mut tape = Tape::new();
        let x = tape.leaf(&t)?;
        let loss = f(&mut tape, x)?;
        let v = tape.scalar(loss);
        if !v.is_finite() {
            return Err(TensorError::NonFinite("finite-difference loss".into()));
        }
        Ok(v)
    };

    let mut worst: f64 = 0.0;
    for i in 0..p.len() {
        let mut up = p.data().to_vec();
        up[i] += h;
        let mut down = p.data().to_vec();
        down[i] -= h;
        let numeric = (eval(up)? - eval(down)?) / (2.0 * h);
        let a = analytic[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

/// Per-row L2 norms of a retained hidden-state gradient `[L × d]`.
pub fn hidden_grad_norms(hidden: &Tensor) -> Result<Vec<f64>> {
    let g = hidden
        .grad()
        .ok_or(TensorError::NotRetained(hidden.node_id().unwrap_or(usize::MAX)))?;
    let (_, d) = hidden.dims2();
    Ok(g.chunks(d).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect())
}
