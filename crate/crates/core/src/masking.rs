//! Additive attention masks for every training recipe.
//!
//! A mask is an `L × L` matrix added to attention logits: `0` is fully
//! visible, [`BLOCKED`] is never attended, and a finite negative value
//! `ln w` attenuates a position by weight `w ∈ (0, 1)`. Every recipe here
//! leaves the diagonal and the lower triangle at `0`; they differ only in
//! what happens to future positions `j > i`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::tensor::{self, is_blocked, Tape, Tensor, TensorError, Var, BLOCKED};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MaskError {
    #[error("mask length must be at least 1")]
    Empty,
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
    #[error("schedule state: {0}")]
    Schedule(String),
    #[error("unknown strategy {0:?}; valid tags: {tags}", tags = Strategy::TAGS.join(", "))]
    UnknownStrategy(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = MaskError> = std::result::Result<T, E>;

/// Square additive bias matrix consumed by masked softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    dim: usize,
    bias: Vec<f64>,
}

impl AttentionMask {
    pub fn from_fn(dim: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        if dim == 0 {
            return Err(MaskError::Empty);
        }
        let mut bias = Vec::with_capacity(dim * dim);
        for i in 0..dim {
            for j in 0..dim {
                bias.push(f(i, j));
            }
        }
        Ok(Self { dim, bias })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.bias[i * self.dim + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.bias[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.bias
    }

    /// Mean over the strict upper triangle, or `None` when any entry there is
    /// blocked (the mean would be `−∞`). A `1 × 1` mask has no upper entries
    /// and reports `Some(0.0)`.
    pub fn mean_upper(&self) -> Option<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for i in 0..self.dim {
            for j in i + 1..self.dim {
                let b = self.get(i, j);
                if is_blocked(b) {
                    return None;
                }
                sum += b;
                n += 1;
            }
        }
        Some(if n == 0 { 0.0 } else { sum / n as f64 })
    }

    /// Checks the structural contract shared by every recipe: zero diagonal
    /// and lower triangle, upper entries blocked or in `(−∞, 0]`.
    pub fn check_invariants(&self) -> Result<()> {
        for i in 0..self.dim {
            for j in 0..self.dim {
                let b = self.get(i, j);
                let ok = if j <= i {
                    b == 0.0
                } else {
                    is_blocked(b) || (b.is_finite() && b <= 0.0)
                };
                if !ok {
                    return Err(MaskError::Schedule(format!("entry ({i},{j}) = {b}")));
                }
            }
        }
        Ok(())
    }
}

/// Strict left-to-right mask: `0` for `j ≤ i`, blocked otherwise.
pub fn causal_mask(len: usize) -> Result<AttentionMask> {
    AttentionMask::from_fn(len, |i, j| if j <= i { 0.0 } else { BLOCKED })
}

pub fn bidirectional_mask(len: usize) -> Result<AttentionMask> {
    AttentionMask::from_fn(len, |_, _| 0.0)
}

/// Bidirectional within positions `0..=user_end`, causal elsewhere.
pub fn block_hybrid_mask(len: usize, user_end: usize) -> Result<AttentionMask> {
    if len == 0 {
        return Err(MaskError::Empty);
    }
    if user_end >= len {
        return Err(MaskError::Index {
            index: user_end,
            len,
        });
    }
    AttentionMask::from_fn(len, |i, j| {
        if j <= i || (i <= user_end && j <= user_end) {
            0.0
        } else {
            BLOCKED
        }
    })
}

/// Fraction of the way from `warmup` to `total` at step `t`, clamped to `[0, 1]`.
pub fn alpha(t: usize, warmup: usize, total: usize) -> f64 {
    if t <= warmup || total <= warmup {
        return if t >= total { 1.0 } else { 0.0 };
    }
    ((t - warmup) as f64 / (total - warmup) as f64).min(1.0)
}

/// Column-constant soft mask: every `(i, j > i)` entry is
/// `ln((1 − α)·σ(scale·norms[j]) + α)`.
pub fn soft_mask_from_norms(
    len: usize,
    norms: &[f64],
    norm_scale: f64,
    alpha: f64,
) -> Result<AttentionMask> {
    if norms.len() < len {
        return Err(MaskError::Schedule(format!(
            "norm vector has {} entries, mask needs {len}",
            norms.len()
        )));
    }
    if let Some(bad) = norms[..len].iter().find(|g| !(**g >= 0.0) || !g.is_finite()) {
        return Err(MaskError::Schedule(format!("invalid gradient norm {bad}")));
    }
    let col: Vec<f64> = norms[..len]
        .iter()
        .map(|&g| ((1.0 - alpha) * tensor::sigmoid(norm_scale * g) + alpha).ln())
        .collect();
    AttentionMask::from_fn(len, |i, j| if j <= i { 0.0 } else { col[j] })
}

/// Gradient-guided soft mask without annealing; never opens past `σ(g)`.
pub fn soft_hybrid_mask(len: usize, lagged_norms: &[f64], norm_scale: f64) -> Result<AttentionMask> {
    soft_mask_from_norms(len, lagged_norms, norm_scale, 0.0)
}

/// The GG-SM mask at the state's current step.
///
/// Before warm-up ends the weights come from the lagged gradient norms;
/// afterwards they come from the frozen norms, interpolated toward 1 by
/// `α_t`. Once `t ≥ total_steps` the mask is fully bidirectional.
pub fn ggsm_mask(len: usize, state: &MaskScheduleState) -> Result<AttentionMask> {
    if state.t >= state.total_steps {
        return bidirectional_mask(len);
    }
    if state.t < state.warmup_steps {
        let norms = state.lagged_norms.as_deref().ok_or_else(|| {
            MaskError::Schedule(format!("step {} is in warm-up but no lagged norms exist", state.t))
        })?;
        soft_mask_from_norms(len, norms, state.norm_scale, 0.0)
    } else {
        let norms = state.frozen_norms.as_deref().ok_or_else(|| {
            MaskError::Schedule(format!("step {} is past warm-up but norms were never frozen", state.t))
        })?;
        let a = alpha(state.t, state.warmup_steps, state.total_steps);
        soft_mask_from_norms(len, norms, state.norm_scale, a)
    }
}

/// Prepends one global position that sees and is seen by everything; the
/// remaining block is causal. Returns the `(len + 1)`-dimensional mask and
/// `true` to signal the prepended position.
pub fn global_query_mask(len: usize) -> Result<(AttentionMask, bool)> {
    if len == 0 {
        return Err(MaskError::Empty);
    }
    let m = AttentionMask::from_fn(len + 1, |i, j| {
        if i == 0 || j == 0 || j <= i {
            0.0
        } else {
            BLOCKED
        }
    })?;
    Ok((m, true))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanSchedule {
    Linear,
    Cosine,
}

/// Attention span growth `Δ(e)` for the span scheduler.
pub fn span_delta(len: usize, epoch: usize, schedule: SpanSchedule, epochs_total: usize) -> usize {
    let frac = epoch.min(epochs_total) as f64 / epochs_total.max(1) as f64;
    let raw = match schedule {
        SpanSchedule::Linear => len as f64 * frac,
        SpanSchedule::Cosine => len as f64 * (1.0 - (std::f64::consts::PI * frac).cos()) / 2.0,
    };
    raw.round() as usize
}

/// Position `i` may attend to `j ≤ min(i + Δ(e), L − 1)`.
pub fn span_scheduler_mask(
    len: usize,
    epoch: usize,
    schedule: SpanSchedule,
    epochs_total: usize,
) -> Result<AttentionMask> {
    if epochs_total == 0 {
        return Err(MaskError::Schedule("epochs_total must be at least 1".into()));
    }
    let delta = span_delta(len, epoch, schedule, epochs_total);
    AttentionMask::from_fn(len, |i, j| {
        if j <= (i + delta).min(len - 1) {
            0.0
        } else {
            BLOCKED
        }
    })
}

/// Per-position mean over a batch of gradient-norm vectors.
///
/// Position `p` averages the sequences long enough to have it; positions no
/// sequence reaches get the mean of every observed entry.
pub fn position_mean_norms(batch_norms: &[Vec<f64>], len: usize) -> Result<Vec<f64>> {
    if batch_norms.is_empty() || batch_norms.iter().all(|n| n.is_empty()) {
        return Err(MaskError::Schedule("no gradient norms to reduce".into()));
    }
    let mut sums = vec![0.0; len];
    let mut counts = vec![0usize; len];
    let mut total = 0.0;
    let mut total_n = 0usize;
    for norms in batch_norms {
        for (p, &g) in norms.iter().enumerate() {
            if !(g >= 0.0) || !g.is_finite() {
                return Err(MaskError::Schedule(format!("invalid gradient norm {g} at {p}")));
            }
            total += g;
            total_n += 1;
            if p < len {
                sums[p] += g;
                counts[p] += 1;
            }
        }
    }
    let fallback = total / total_n as f64;
    Ok(sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c == 0 { fallback } else { s / c as f64 })
        .collect())
}

/// The nine masking recipes, by their config/CLI tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Strategy {
    Causal,
    HybridBlock,
    HybridSoft,
    HybridMlp,
    HybridGq,
    Bidirectional,
    SchedulerLinear,
    SchedulerCosine,
    Ggsm,
}

impl Strategy {
    pub const ALL: [Strategy; 9] = [
        Strategy::Causal,
        Strategy::HybridBlock,
        Strategy::HybridSoft,
        Strategy::HybridMlp,
        Strategy::HybridGq,
        Strategy::Bidirectional,
        Strategy::SchedulerLinear,
        Strategy::SchedulerCosine,
        Strategy::Ggsm,
    ];

    pub const TAGS: [&'static str; 9] = [
        "causal",
        "hybrid_block",
        "hybrid_soft",
        "hybrid_mlp",
        "hybrid_gq",
        "bidirectional",
        "scheduler_linear",
        "scheduler_cosine",
        "ggsm",
    ];

    pub fn tag(self) -> &'static str {
        let i = Self::ALL.iter().position(|&s| s == self).unwrap();
        Self::TAGS[i]
    }

    /// Strategies that end fully bidirectional and are probed that way.
    pub fn is_bidirectional_family(self) -> bool {
        matches!(
            self,
            Strategy::Bidirectional
                | Strategy::SchedulerLinear
                | Strategy::SchedulerCosine
                | Strategy::Ggsm
        )
    }

    /// Strategies whose mask is driven by lagged gradient norms.
    pub fn uses_grad_norms(self) -> bool {
        matches!(self, Strategy::HybridSoft | Strategy::Ggsm)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Strategy {
    type Err = MaskError;

    fn from_str(s: &str) -> Result<Self> {
        Self::TAGS
            .iter()
            .position(|&t| t == s)
            .map(|i| Self::ALL[i])
            .ok_or_else(|| MaskError::UnknownStrategy(s.to_string()))
    }
}

impl TryFrom<String> for Strategy {
    type Error = MaskError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Strategy> for String {
    fn from(s: Strategy) -> String {
        s.tag().to_string()
    }
}

/// Step counters and gradient-norm memory for the schedule-driven masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskScheduleState {
    pub t: usize,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub strategy: Strategy,
    pub norm_scale: f64,
    /// Per-position norms frozen at the last warm-up step.
    pub frozen_norms: Option<Vec<f64>>,
    /// Per-position norms from the previous step's backward pass.
    pub lagged_norms: Option<Vec<f64>>,
}

impl MaskScheduleState {
    pub fn new(strategy: Strategy, warmup_steps: usize, total_steps: usize, norm_scale: f64) -> Result<Self> {
        if total_steps == 0 {
            return Err(MaskError::Schedule("total_steps must be at least 1".into()));
        }
        if strategy == Strategy::Ggsm && warmup_steps >= total_steps {
            return Err(MaskError::Schedule(format!(
                "warm-up ({warmup_steps}) must be shorter than training ({total_steps})"
            )));
        }
        if !(norm_scale.is_finite() && norm_scale >= 0.0) {
            return Err(MaskError::Schedule(format!("invalid norm_scale {norm_scale}")));
        }
        Ok(Self {
            t: 0,
            warmup_steps,
            total_steps,
            strategy,
            norm_scale,
            frozen_norms: None,
            lagged_norms: None,
        })
    }

    pub fn alpha(&self) -> f64 {
        alpha(self.t, self.warmup_steps, self.total_steps)
    }

    pub fn in_warmup(&self) -> bool {
        self.t < self.warmup_steps
    }

    /// Freezes the warm-up norms from the final warm-up step's batch.
    /// May be called once per run.
    pub fn freeze_warmup_norms(&mut self, batch_norms: &[Vec<f64>], len: usize) -> Result<&[f64]> {
        if self.frozen_norms.is_some() {
            return Err(MaskError::Schedule("warm-up norms are already frozen".into()));
        }
        let g = position_mean_norms(batch_norms, len)?;
        Ok(self.frozen_norms.insert(g))
    }

    pub fn set_lagged_norms(&mut self, batch_norms: &[Vec<f64>], len: usize) -> Result<()> {
        self.lagged_norms = Some(position_mean_norms(batch_norms, len)?);
        Ok(())
    }
}

/// Two-layer gate `d → d → 1` whose sigmoid output opens future positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateMlp<T = Tensor> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

impl<T> GateMlp<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> GateMlp<U> {
        GateMlp {
            w1: f("w1", &self.w1),
            b1: f("b1", &self.b1),
            w2: f("w2", &self.w2),
            b2: f("b2", &self.b2),
        }
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut T)) {
        f("w1", &mut self.w1);
        f("b1", &mut self.b1);
        f("w2", &mut self.w2);
        f("b2", &mut self.b2);
    }
}

/// Per-row gate log-weights `ln σ(MLP(e_i))`, shape `N × 1`.
pub fn gate_log_weights(tape: &mut Tape, embeddings: Var, gate: &GateMlp<Var>) -> Result<Var> {
    let h = tape.matmul(embeddings, gate.w1)?;
    let h = tape.add_row(h, gate.b1)?;
    let h = tape.gelu(h)?;
    let logit = tape.matmul(h, gate.w2)?;
    let logit = tape.add_row(logit, gate.b2)?;
    Ok(tape.log_sigmoid(logit)?)
}

/// Records the gate on a tape and returns the `L × L` bias with
/// `ln σ(MLP(e_i))` at every `j > i`.
pub fn gate_bias(tape: &mut Tape, embeddings: Var, gate: &GateMlp<Var>) -> Result<Var> {
    let log_w = gate_log_weights(tape, embeddings, gate)?;
    Ok(tape.upper_row_broadcast(log_w)?)
}

/// Value-level MLP-gated mask for `embeddings[L × d]`.
pub fn mlp_gate_mask(embeddings: &Tensor, gate: &GateMlp) -> Result<AttentionMask> {
    let (len, _) = embeddings.dims2();
    let mut tape = Tape::new();
    let e = tape.leaf(embeddings)?;
    let g = gate.map(|_, t| tape.leaf(t));
    let g = GateMlp {
        w1: g.w1?,
        b1: g.b1?,
        w2: g.w2?,
        b2: g.b2?,
    };
    let bias = gate_bias(&mut tape, e, &g)?;
    let values = tape.value(bias);
    AttentionMask::from_fn(len, |i, j| values[i * len + j])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn causal_corners() {
        let m = causal_mask(1).unwrap();
        assert_eq!(m.as_slice(), &[0.0]);
        let m = causal_mask(3).unwrap();
        assert!(is_blocked(m.get(0, 2)));
        assert!(is_blocked(m.get(0, 1)));
        assert!(is_blocked(m.get(1, 2)));
        assert_eq!(m.get(2, 0), 0.0);
        assert_eq!(m.get(1, 1), 0.0);
        assert_eq!(causal_mask(0), Err(MaskError::Empty));
    }

    #[test]
    fn bidirectional_is_causal_with_upper_opened() {
        assert_eq!(bidirectional_mask(2).unwrap().as_slice(), &[0.0; 4]);
        assert_eq!(bidirectional_mask(1).unwrap().as_slice(), &[0.0]);
        for l in 1..8 {
            let c = causal_mask(l).unwrap();
            let opened = AttentionMask::from_fn(l, |i, j| if j > i { 0.0 } else { c.get(i, j) }).unwrap();
            assert_eq!(opened, bidirectional_mask(l).unwrap());
        }
    }

    #[test]
    fn block_hybrid_cases() {
        assert_eq!(block_hybrid_mask(5, 4).unwrap(), bidirectional_mask(5).unwrap());
        assert_eq!(block_hybrid_mask(5, 0).unwrap(), causal_mask(5).unwrap());
        let m = block_hybrid_mask(4, 1).unwrap();
        assert_eq!(m.get(0, 1), 0.0);
        assert!(is_blocked(m.get(0, 2)));
        assert!(is_blocked(m.get(0, 3)));
        assert!(is_blocked(m.get(1, 2)));
        assert!(matches!(block_hybrid_mask(4, 4), Err(MaskError::Index { .. })));
    }

    fn ggsm_state(t: usize, warm: usize, total: usize) -> MaskScheduleState {
        let mut s = MaskScheduleState::new(Strategy::Ggsm, warm, total, 1.0).unwrap();
        s.t = t;
        s
    }

    #[test]
    fn ggsm_warmup_with_zero_norms_is_half_visibility() {
        let mut s = ggsm_state(3, 10, 20);
        s.lagged_norms = Some(vec![0.0; 6]);
        let m = ggsm_mask(6, &s).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let want = if j > i { 0.5f64.ln() } else { 0.0 };
                assert_close(m.get(i, j), want, 1e-12);
            }
        }
        assert_close(0.5f64.ln(), -0.6931, 1e-4);
    }

    #[test]
    fn ggsm_interpolation_example() {
        let mut s = ggsm_state(150, 100, 200);
        s.frozen_norms = Some(vec![2.0; 4]);
        assert_eq!(s.alpha(), 0.5);
        let m = ggsm_mask(4, &s).unwrap();
        let w = 0.5 * tensor::sigmoid(2.0) + 0.5;
        assert_close(tensor::sigmoid(2.0), 0.880797, 1e-6);
        assert_close(w, 0.940399, 1e-6);
        assert_close(m.get(0, 3), w.ln(), 1e-15);
        assert_close(m.get(0, 3), -0.061_451_516, 1e-8);
    }

    #[test]
    fn ggsm_at_total_is_bidirectional() {
        let s = ggsm_state(200, 100, 200);
        assert_eq!(ggsm_mask(5, &s).unwrap(), bidirectional_mask(5).unwrap());
    }

    #[test]
    fn ggsm_missing_norms_is_schedule_error() {
        let s = ggsm_state(3, 10, 20);
        assert!(matches!(ggsm_mask(4, &s), Err(MaskError::Schedule(_))));
        let s = ggsm_state(12, 10, 20);
        assert!(matches!(ggsm_mask(4, &s), Err(MaskError::Schedule(_))));
    }

    #[test]
    fn ggsm_after_freeze_ignores_lagged() {
        let mut s = ggsm_state(10, 10, 20);
        s.frozen_norms = Some(vec![1.0; 4]);
        s.lagged_norms = None;
        let m = ggsm_mask(4, &s).unwrap();
        assert_close(m.get(0, 1), tensor::sigmoid(1.0).ln(), 1e-15);
    }

    #[test]
    fn soft_hybrid_examples() {
        let m = soft_hybrid_mask(3, &[0.0; 3], 1.0).unwrap();
        assert_close(m.get(0, 2), 0.5f64.ln(), 1e-12);
        let m = soft_hybrid_mask(3, &[10.0; 3], 1.0).unwrap();
        assert_close(tensor::sigmoid(10.0), 0.9999546, 1e-7);
        assert_close(m.get(1, 2), -4.54e-5, 1e-7);
        let m = soft_hybrid_mask(3, &[7.0, 1e3, 0.1], 1.0).unwrap();
        for i in 0..3 {
            for j in 0..=i {
                assert_eq!(m.get(i, j), 0.0);
            }
        }
    }

    #[test]
    fn short_norm_vector_is_rejected() {
        assert!(matches!(soft_hybrid_mask(4, &[0.0; 3], 1.0), Err(MaskError::Schedule(_))));
        assert!(matches!(soft_hybrid_mask(2, &[-1.0, 0.0], 1.0), Err(MaskError::Schedule(_))));
    }

    #[test]
    fn global_query_l2() {
        let (m, prepended) = global_query_mask(2).unwrap();
        assert!(prepended);
        assert_eq!(m.dim(), 3);
        assert_eq!(m.row(0), &[0.0, 0.0, 0.0]);
        for i in 0..3 {
            assert_eq!(m.get(i, 0), 0.0);
        }
        let c = causal_mask(2).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(m.get(i + 1, j + 1), c.get(i, j));
            }
        }
        assert!(is_blocked(m.get(1, 2)));
    }

    #[test]
    fn span_scheduler_examples() {
        assert_eq!(
            span_scheduler_mask(5, 0, SpanSchedule::Linear, 4).unwrap(),
            causal_mask(5).unwrap()
        );
        assert_eq!(
            span_scheduler_mask(5, 4, SpanSchedule::Linear, 4).unwrap(),
            bidirectional_mask(5).unwrap()
        );
        assert_eq!(span_delta(4, 2, SpanSchedule::Linear, 4), 2);
        let m = span_scheduler_mask(4, 2, SpanSchedule::Linear, 4).unwrap();
        assert_eq!(m.get(0, 2), 0.0);
        assert!(is_blocked(m.get(0, 3)));
        assert_eq!(span_delta(4, 2, SpanSchedule::Cosine, 4), 2);
        assert_eq!(span_delta(10, 1, SpanSchedule::Cosine, 4), 1);
        assert_eq!(
            span_scheduler_mask(6, 4, SpanSchedule::Cosine, 4).unwrap(),
            bidirectional_mask(6).unwrap()
        );
        assert!(span_scheduler_mask(3, 0, SpanSchedule::Linear, 0).is_err());
    }

    #[test]
    fn freeze_examples() {
        let mut s = ggsm_state(9, 10, 20);
        let g = s.freeze_warmup_norms(&[vec![1.0, 2.0, 3.0]], 5).unwrap().to_vec();
        assert_eq!(g, vec![1.0, 2.0, 3.0, 2.0, 2.0]);
        assert!(s.freeze_warmup_norms(&[vec![1.0]], 5).is_err());

        let mut s = ggsm_state(9, 10, 20);
        let g = s.freeze_warmup_norms(&[vec![0.0, 0.0], vec![2.0, 2.0]], 2).unwrap();
        assert_eq!(g, &[1.0, 1.0]);

        let mut s = ggsm_state(9, 10, 20);
        assert!(s.freeze_warmup_norms(&[], 4).is_err());
    }

    #[test]
    fn alpha_endpoints() {
        assert_eq!(alpha(100, 100, 200), 0.0);
        assert_eq!(alpha(150, 100, 200), 0.5);
        assert_eq!(alpha(200, 100, 200), 1.0);
        assert_eq!(alpha(500, 100, 200), 1.0);
        assert_eq!(alpha(50, 100, 200), 0.0);
    }

    #[test]
    fn strategy_tags_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.tag().parse::<Strategy>().unwrap(), s);
        }
        let err = "bidir".parse::<Strategy>().unwrap_err().to_string();
        for tag in Strategy::TAGS {
            assert!(err.contains(tag), "{err}");
        }
    }

    #[test]
    fn schedule_state_rejects_bad_warmup() {
        assert!(MaskScheduleState::new(Strategy::Ggsm, 10, 10, 1.0).is_err());
        assert!(MaskScheduleState::new(Strategy::Causal, 10, 10, 1.0).is_ok());
    }

    fn gate(d: usize, out_bias: f64) -> GateMlp {
        let w = |r, c, s: f64| {
            Tensor::new(vec![r, c], (0..r * c).map(|k| s * ((k * 7 % 11) as f64 - 5.0)).collect()).unwrap()
        };
        GateMlp {
            w1: w(d, d, 0.05),
            b1: Tensor::zeros(vec![1, d]),
            w2: Tensor::zeros(vec![d, 1]),
            b2: Tensor::filled(vec![1, 1], out_bias),
        }
    }

    #[test]
    fn mlp_gate_limits() {
        let e = Tensor::new(vec![4, 3], (0..12).map(|k| k as f64 * 0.1).collect()).unwrap();
        let m = mlp_gate_mask(&e, &gate(3, 0.0)).unwrap();
        assert_close(m.get(0, 3), 0.5f64.ln(), 1e-12);
        assert_eq!(m.get(3, 0), 0.0);
        let m = mlp_gate_mask(&e, &gate(3, 30.0)).unwrap();
        for (a, b) in m.as_slice().iter().zip(bidirectional_mask(4).unwrap().as_slice()) {
            assert_close(*a, *b, 1e-12);
        }
        m.check_invariants().unwrap();
    }

    #[test]
    fn mean_upper() {
        assert_eq!(causal_mask(3).unwrap().mean_upper(), None);
        assert_eq!(bidirectional_mask(3).unwrap().mean_upper(), Some(0.0));
        let m = soft_hybrid_mask(3, &[0.0; 3], 1.0).unwrap();
        assert_close(m.mean_upper().unwrap(), 0.5f64.ln(), 1e-15);
    }
}
