//! Dual-tower InfoNCE with same-side negatives and margin-based
//! false-negative masking.
//!
//! For anchor `i` with positive similarity `p = s_ua[i][i]` the loss is
//! `−log(e^{p/τ} / Z_i)`, where `Z_i` adds every in-batch negative from the
//! user–answer, user–user and answer–answer families whose similarity does
//! not exceed `p + c_margin`.

use serde::{Deserialize, Serialize};

use crate::tensor::{Tape, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub temperature: f64,
    pub margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.05,
            margin: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::Config(format!("margin must be ≥ 0, got {}", self.margin)));
        }
        Ok(())
    }
}

/// `v1·v2 / (‖v1‖‖v2‖)`.
pub fn cosine_sim(v1: &[f64], v2: &[f64]) -> Result<f64> {
    if v1.len() != v2.len() {
        return Err(Error::Data(format!("cosine of lengths {} and {}", v1.len(), v2.len())));
    }
    let mut dot = 0.0;
    let mut n1 = 0.0;
    let mut n2 = 0.0;
    for (a, b) in v1.iter().zip(v2) {
        dot += a * b;
        n1 += a * a;
        n2 += b * b;
    }
    let denom = n1.sqrt() * n2.sqrt();
    if !(denom > 0.0) || !denom.is_finite() {
        return Err(Error::Numeric("cosine similarity of a zero vector".into()));
    }
    Ok(dot / denom)
}

/// `0` iff the negative is more similar than the positive by more than the
/// margin (a likely false negative), else `1`.
pub fn mask_factor(s_ij: f64, s_pos: f64, margin: f64) -> u8 {
    if s_ij > s_pos + margin {
        0
    } else {
        1
    }
}

/// [`mask_factor`] over a row-major `B × B` matrix, row `i` against `s_pos[i]`.
pub fn mask_factors(s: &[f64], s_pos: &[f64], margin: f64) -> Vec<u8> {
    let b = s_pos.len();
    debug_assert_eq!(s.len(), b * b);
    let thresholds: Vec<f64> = s_pos.iter().map(|p| p + margin).collect();
    s.chunks(b.max(1))
        .zip(&thresholds)
        .flat_map(|(row, &t)| row.iter().map(move |&x| u8::from(!(x > t))))
        .collect()
}

/// In-batch cosine similarities, each `B × B` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityBundle {
    pub b: usize,
    pub s_ua: Vec<f64>,
    pub s_uu: Vec<f64>,
    pub s_aa: Vec<f64>,
}

impl SimilarityBundle {
    pub fn new(b: usize, s_ua: Vec<f64>, s_uu: Vec<f64>, s_aa: Vec<f64>) -> Result<Self> {
        if b == 0 || [&s_ua, &s_uu, &s_aa].iter().any(|m| m.len() != b * b) {
            return Err(Error::Data(format!("similarity matrices must be {b}×{b}")));
        }
        let bundle = Self { b, s_ua, s_uu, s_aa };
        if bundle.all().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite similarity".into()));
        }
        Ok(bundle)
    }

    /// Similarities between rows of unit-norm `u` and `a` (`B × d`, row-major).
    pub fn from_unit_embeddings(u: &[f64], a: &[f64], d: usize) -> Result<Self> {
        let b = u.len() / d.max(1);
        let dot = |x: &[f64], y: &[f64]| -> Vec<f64> {
            let mut out = Vec::with_capacity(b * b);
            for i in 0..b {
                for j in 0..b {
                    out.push(x[i * d..(i + 1) * d].iter().zip(&y[j * d..(j + 1) * d]).map(|(p, q)| p * q).sum());
                }
            }
            out
        };
        Self::new(b, dot(u, a), dot(u, u), dot(a, a))
    }

    fn all(&self) -> impl Iterator<Item = &f64> {
        self.s_ua.iter().chain(&self.s_uu).chain(&self.s_aa)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub per_example: Vec<f64>,
    /// Negatives removed by the mask factor, over all three families.
    pub masked: usize,
}

/// Gradient of the mean loss with respect to each similarity matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub d_ua: Vec<f64>,
    pub d_uu: Vec<f64>,
    pub d_aa: Vec<f64>,
}

pub fn info_nce(sims: &SimilarityBundle, cfg: &LossConfig) -> Result<LossBreakdown> {
    info_nce_with_grad(sims, cfg).map(|(l, _)| l)
}

pub fn info_nce_with_grad(sims: &SimilarityBundle, cfg: &LossConfig) -> Result<(LossBreakdown, LossGrad)> {
    cfg.validate()?;
    let b = sims.b;
    let tau = cfg.temperature;
    let s_pos: Vec<f64> = (0..b).map(|i| sims.s_ua[i * b + i]).collect();
    let families = [&sims.s_ua, &sims.s_uu, &sims.s_aa];
    let masks: Vec<Vec<u8>> = families.iter().map(|s| mask_factors(s, &s_pos, cfg.margin)).collect();

    let mut grads = [vec![0.0; b * b], vec![0.0; b * b], vec![0.0; b * b]];
    let mut per_example = Vec::with_capacity(b);
    let mut masked = 0;
    // (family, flat index, logit) of every term in Z_i
    let mut terms: Vec<(usize, usize, f64)> = Vec::with_capacity(3 * b);
    for i in 0..b {
        terms.clear();
        terms.push((0, i * b + i, s_pos[i] / tau));
        for (f, s) in families.iter().enumerate() {
            for j in (0..b).filter(|&j| j != i) {
                let k = i * b + j;
                if masks[f][k] == 1 {
                    terms.push((f, k, s[k] / tau));
                } else {
                    masked += 1;
                }
            }
        }
        let max = terms.iter().map(|t| t.2).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = terms.iter().map(|t| (t.2 - max).exp()).sum();
        let lse = max + sum.ln();
        let loss = lse - s_pos[i] / tau;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss for anchor {i}")));
        }
        per_example.push(loss);
        for &(f, k, z) in &terms {
            grads[f][k] += (z - lse).exp() / tau / b as f64;
        }
        grads[0][i * b + i] -= 1.0 / tau / b as f64;
    }
    let total = per_example.iter().sum::<f64>() / b as f64;
    let [d_ua, d_uu, d_aa] = grads;
    Ok((
        LossBreakdown {
            total,
            per_example,
            masked,
        },
        LossGrad { d_ua, d_uu, d_aa },
    ))
}

/// Records the loss on `tape` for unit-norm user and answer embeddings
/// (`B × d` each) and returns the scalar loss var with its breakdown.
///
/// The mask factors are computed from the forward values and act as a
/// constant gate: no gradient flows through them.
pub fn info_nce_tape(tape: &mut Tape, u: Var, a: Var, cfg: &LossConfig) -> Result<(Var, LossBreakdown)> {
    let s_ua = tape.matmul_t(u, a)?;
    let s_uu = tape.matmul_t(u, u)?;
    let s_aa = tape.matmul_t(a, a)?;
    let b = tape.shape(s_ua)[0];
    let sims = SimilarityBundle::new(
        b,
        tape.value(s_ua).to_vec(),
        tape.value(s_uu).to_vec(),
        tape.value(s_aa).to_vec(),
    )?;
    let (loss, grad) = info_nce_with_grad(&sims, cfg)?;
    let var = tape.custom(
        &[s_ua, s_uu, s_aa],
        vec![],
        vec![loss.total],
        Box::new(move |g| {
            let scale = |v: &[f64]| Some(v.iter().map(|x| x * g[0]).collect());
            vec![scale(&grad.d_ua), scale(&grad.d_uu), scale(&grad.d_aa)]
        }),
    )?;
    Ok((var, loss))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        let v = [0.3, -1.2, 2.0];
        assert!((cosine_sim(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_sim(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn mask_factor_examples() {
        assert_eq!(mask_factor(0.95, 0.8, 0.1), 0);
        assert_eq!(mask_factor(0.85, 0.8, 0.1), 1);
        assert_eq!(mask_factor(0.5 + 0.25, 0.5, 0.25), 1);
    }

    fn bundle(b: usize, v: f64) -> SimilarityBundle {
        let m = vec![v; b * b];
        SimilarityBundle::new(b, m.clone(), m.clone(), m).unwrap()
    }

    #[test]
    fn single_example_has_zero_loss() {
        let l = info_nce(&bundle(1, 0.3), &LossConfig::default()).unwrap();
        assert!(l.total.abs() <= 1e-12);
    }

    #[test]
    fn equal_similarities_give_ln_ten() {
        let l = info_nce(&bundle(4, 0.2), &LossConfig::default()).unwrap();
        assert!((l.total - 10f64.ln()).abs() <= 1e-9);
        assert_eq!(l.masked, 0);
    }

    #[test]
    fn infinite_margin_disables_masking() {
        let sims = SimilarityBundle::new(
            2,
            vec![0.1, 0.9, 0.9, 0.1],
            vec![1.0, 0.95, 0.95, 1.0],
            vec![1.0, 0.7, 0.7, 1.0],
        )
        .unwrap();
        let cfg = LossConfig {
            margin: f64::INFINITY,
            ..LossConfig::default()
        };
        assert_eq!(info_nce(&sims, &cfg).unwrap().masked, 0);
        let l = info_nce(&sims, &LossConfig::default()).unwrap();
        assert_eq!(l.masked, 6);
        assert!(l.total.abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(SimilarityBundle::new(2, vec![0.0; 3], vec![0.0; 4], vec![0.0; 4]).is_err());
        assert!(SimilarityBundle::new(1, vec![f64::NAN], vec![1.0], vec![1.0]).is_err());
        let cfg = LossConfig {
            temperature: 0.0,
            ..LossConfig::default()
        };
        assert!(info_nce(&bundle(2, 0.0), &cfg).is_err());
    }
}
