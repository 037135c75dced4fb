use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::EncoderConfig;
use crate::masking::GateMlp;
use crate::synthdata::{Modality, EVENTS_PER_MODALITY};
use crate::tensor::{Tape, Tensor, Var};
use crate::Result;

/// Weights of one pre-norm transformer block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams<T = Tensor> {
    pub ln1_g: T,
    pub ln1_b: T,
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    pub wo: T,
    pub bo: T,
    pub ln2_g: T,
    pub ln2_b: T,
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

impl<T> LayerParams<T> {
    fn try_map<U, E>(&self, f: &mut impl FnMut(&str, &T) -> Result<U, E>) -> Result<LayerParams<U>, E> {
        Ok(LayerParams {
            ln1_g: f("ln1_g", &self.ln1_g)?,
            ln1_b: f("ln1_b", &self.ln1_b)?,
            wq: f("wq", &self.wq)?,
            bq: f("bq", &self.bq)?,
            wk: f("wk", &self.wk)?,
            bk: f("bk", &self.bk)?,
            wv: f("wv", &self.wv)?,
            bv: f("bv", &self.bv)?,
            wo: f("wo", &self.wo)?,
            bo: f("bo", &self.bo)?,
            ln2_g: f("ln2_g", &self.ln2_g)?,
            ln2_b: f("ln2_b", &self.ln2_b)?,
            w1: f("w1", &self.w1)?,
            b1: f("b1", &self.b1)?,
            w2: f("w2", &self.w2)?,
            b2: f("b2", &self.b2)?,
        })
    }

    fn refs(&self) -> [(&'static str, &T); 16] {
        [
            ("ln1_g", &self.ln1_g),
            ("ln1_b", &self.ln1_b),
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln2_g", &self.ln2_g),
            ("ln2_b", &self.ln2_b),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    fn refs_mut(&mut self) -> [&mut T; 16] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

/// Every trainable tensor of the model, generic so the same structure can
/// hold tensors, tape vars or optimizer moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams<T = Tensor> {
    pub tok_emb: T,
    pub layers: Vec<LayerParams<T>>,
    /// Per event modality, `(events + 1) × d`; the last row is the null vector.
    pub event_emb: Vec<T>,
    /// Per modality adapter weight; the tabular one is `D × d`.
    pub adapter_w: Vec<T>,
    pub adapter_b: Vec<T>,
    pub global_tok: T,
    pub gate: GateMlp<T>,
}

impl<T> ModelParams<T> {
    /// Maps every parameter in the fixed canonical order.
    pub fn try_map<U, E>(&self, mut f: impl FnMut(&str, &T) -> Result<U, E>) -> Result<ModelParams<U>, E> {
        let tok_emb = f("tok_emb", &self.tok_emb)?;
        let layers = self
            .layers
            .iter()
            .map(|l| l.try_map(&mut f))
            .collect::<Result<_, E>>()?;
        let event_emb = self.event_emb.iter().map(|t| f("event_emb", t)).collect::<Result<_, E>>()?;
        let adapter_w = self.adapter_w.iter().map(|t| f("adapter_w", t)).collect::<Result<_, E>>()?;
        let adapter_b = self.adapter_b.iter().map(|t| f("adapter_b", t)).collect::<Result<_, E>>()?;
        let global_tok = f("global_tok", &self.global_tok)?;
        let gate = GateMlp {
            w1: f("gate.w1", &self.gate.w1)?,
            b1: f("gate.b1", &self.gate.b1)?,
            w2: f("gate.w2", &self.gate.w2)?,
            b2: f("gate.b2", &self.gate.b2)?,
        };
        Ok(ModelParams {
            tok_emb,
            layers,
            event_emb,
            adapter_w,
            adapter_b,
            global_tok,
            gate,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> ModelParams<U> {
        self.try_map::<U, std::convert::Infallible>(|n, t| Ok(f(n, t)))
            .unwrap_or_else(|e| match e {})
    }

    /// Parameters in canonical order, with dotted names.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb)];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(l.refs().into_iter().map(|(n, t)| (format!("layers.{i}.{n}"), t)));
        }
        let lists = [("event_emb", &self.event_emb), ("adapter_w", &self.adapter_w), ("adapter_b", &self.adapter_b)];
        for (name, list) in lists {
            out.extend(list.iter().enumerate().map(|(i, t)| (format!("{name}.{i}"), t)));
        }
        out.push(("global_tok".into(), &self.global_tok));
        out.push(("gate.w1".into(), &self.gate.w1));
        out.push(("gate.b1".into(), &self.gate.b1));
        out.push(("gate.w2".into(), &self.gate.w2));
        out.push(("gate.b2".into(), &self.gate.b2));
        out
    }

    /// Mutable parameters in the same order as [`ModelParams::named`].
    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.tok_emb];
        for l in &mut self.layers {
            out.extend(l.refs_mut());
        }
        out.extend(self.event_emb.iter_mut());
        out.extend(self.adapter_w.iter_mut());
        out.extend(self.adapter_b.iter_mut());
        out.push(&mut self.global_tok);
        out.push(&mut self.gate.w1);
        out.push(&mut self.gate.b1);
        out.push(&mut self.gate.w2);
        out.push(&mut self.gate.b2);
        out
    }
}

impl ModelParams {
    /// Seeded init: weights `N(0, 0.02²)`, biases 0, layer-norm gains 1.
    pub fn init(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, 0.02).unwrap();
        let mut w = |r: usize, c: usize| {
            let data = (0..r * c).map(|_| normal.sample(&mut rng)).collect();
            Tensor::new(vec![r, c], data).unwrap().with_grad()
        };
        let d = cfg.d_model;
        let tok_emb = w(cfg.vocab_size, d);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            layers.push(LayerParams {
                ln1_g: ones(d),
                ln1_b: zeros(d),
                wq: w(d, d),
                bq: zeros(d),
                wk: w(d, d),
                bk: zeros(d),
                wv: w(d, d),
                bv: zeros(d),
                wo: w(d, d),
                bo: zeros(d),
                ln2_g: ones(d),
                ln2_b: zeros(d),
                w1: w(d, cfg.d_ff),
                b1: zeros(cfg.d_ff),
                w2: w(cfg.d_ff, d),
                b2: zeros(d),
            });
        }
        let event_emb = Modality::EVENTS.iter().map(|_| w(EVENTS_PER_MODALITY + 1, d)).collect();
        let mut adapter_w: Vec<Tensor> = Modality::EVENTS.iter().map(|_| w(d, d)).collect();
        adapter_w.push(w(cfg.tabular_dim, d));
        let adapter_b = Modality::ALL.iter().map(|_| zeros(d)).collect();
        let global_tok = w(1, d);
        let gate = GateMlp {
            w1: w(d, d),
            b1: zeros(d),
            w2: w(d, 1),
            b2: zeros(1),
        };
        Ok(Self {
            tok_emb,
            layers,
            event_emb,
            adapter_w,
            adapter_b,
            global_tok,
            gate,
        })
    }

    pub fn n_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Records every parameter on `tape` as a gradient-carrying leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<ModelParams<Var>> {
        Ok(self.try_map(|_, t| tape.leaf(t))?)
    }

    /// All parameters concatenated in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        self.named().iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
    }

    /// Views a single flat var (laid out as [`ModelParams::flatten`]) as a
    /// parameter structure, so one leaf can drive a finite-difference check.
    pub fn bind_flat(&self, tape: &mut Tape, flat: Var) -> Result<ModelParams<Var>> {
        let mut offset = 0;
        Ok(self.try_map(|_, t| {
            let v = tape.slice_flat(flat, offset, t.shape().to_vec());
            offset += t.len();
            v
        })?)
    }
}

fn zeros(n: usize) -> Tensor {
    Tensor::zeros(vec![n]).with_grad()
}

fn ones(n: usize) -> Tensor {
    Tensor::filled(vec![n], 1.0).with_grad()
}
