//! Dual-tower contrastive training over a shared backbone.
//!
//! Every step packs the batch's user and answer sequences into one forward
//! pass, reads unit-norm anchor embeddings, applies InfoNCE and updates the
//! parameters with AdamW. Strategies driven by gradient norms take them
//! from the residual stream entering the last block on the user tower; the
//! norms from step `t` shape the masks of step `t + 1`.

mod checkpoint;
mod masks;
mod optim;

use std::collections::HashMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use masks::{norm_len, sequence_mask, Phase, SeqMask, Tower};
pub use optim::{AdamW, AdamWConfig};

use crate::contrastive::{info_nce_tape, LossBreakdown, LossConfig};
use crate::encoder::{
    forward_packed, gather_embeddings, render_answer, render_template, EncoderConfig, ModelParams, PackedHidden,
    PrefixInput, SeqInput, Vocab, PREFIX_ROWS, USER,
};
use crate::masking::MaskScheduleState;
use crate::synthdata::{Modality, PairRecord, UserRecord};
use crate::tensor::{Tape, Var};
use crate::{Error, Result, Strategy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub batch_size: usize,
    pub steps: usize,
    pub warmup: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    /// Steps of linear learning-rate ramp-up from `lr / lr_warmup`.
    pub lr_warmup: usize,
    pub temperature: f64,
    pub margin: f64,
    /// Seeds batch order; parameter init uses `encoder.seed`.
    pub seed: u64,
    pub norm_scale: f64,
    pub optimizer: AdamWConfig,
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Ggsm,
            batch_size: 32,
            steps: 2000,
            warmup: 200,
            lr: 3e-3,
            lr_schedule: LrSchedule::Cosine,
            lr_warmup: 0,
            temperature: 0.05,
            margin: 0.1,
            seed: 7,
            norm_scale: 1.0,
            optimizer: AdamWConfig::default(),
            encoder: EncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn loss(&self) -> LossConfig {
        LossConfig {
            temperature: self.temperature,
            margin: self.margin,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.loss().validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        MaskScheduleState::new(self.strategy, self.warmup, self.steps, self.norm_scale)?;
        Ok(())
    }

    pub fn lr_at(&self, t: usize) -> f64 {
        let ramp = if t < self.lr_warmup {
            (t + 1) as f64 / self.lr_warmup as f64
        } else {
            1.0
        };
        ramp * match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let frac = t.min(self.steps) as f64 / self.steps.max(1) as f64;
                self.lr * 0.5 * (1.0 + (PI * frac).cos())
            }
        }
    }

    /// How far the strategy's mask has opened toward bidirectional at `t`.
    pub fn opening(&self, t: usize) -> f64 {
        let frac = t.min(self.steps) as f64 / self.steps.max(1) as f64;
        match self.strategy {
            Strategy::Ggsm => crate::masking::alpha(t, self.warmup, self.steps),
            Strategy::SchedulerLinear => frac,
            Strategy::SchedulerCosine => (1.0 - (PI * frac).cos()) / 2.0,
            _ => 0.0,
        }
    }
}

/// Token ids and side inputs of one tower sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TowerInput {
    pub tokens: Vec<usize>,
    /// Token position whose final hidden state is the embedding.
    pub anchor: usize,
    /// Token position ending the user segment.
    pub user_end: Option<usize>,
    pub prefix: Option<PrefixInput>,
}

impl TowerInput {
    fn prefix_rows(&self) -> usize {
        if self.prefix.is_some() {
            PREFIX_ROWS
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub user: TowerInput,
    pub answer: TowerInput,
}

fn close_tag_positions(tokens: &[usize], vocab: &Vocab) -> Result<Option<usize>> {
    let close = vocab.id(Modality::Tabular.close_tag())?;
    Ok(tokens.iter().rposition(|&t| t == close))
}

/// The user tower input for `user`, optionally followed by a query.
pub fn user_input(user: &UserRecord, query: Option<&str>, vocab: &Vocab, enc: &EncoderConfig) -> Result<TowerInput> {
    let seq = render_template(user, query, vocab, enc.max_len)?;
    let prefix = if enc.modality_prefix {
        Some(PrefixInput::from_user(user, enc.tabular_dim)?)
    } else {
        None
    };
    Ok(TowerInput {
        anchor: seq.user_pos.expect("template ends in the user anchor"),
        user_end: seq.user_segment_end(),
        tokens: seq.tokens,
        prefix,
    })
}

pub fn answer_input(answer: &str, vocab: &Vocab, enc: &EncoderConfig) -> Result<TowerInput> {
    let seq = render_answer(answer, vocab, enc.max_len)?;
    Ok(TowerInput {
        anchor: seq.eos_pos.expect("answer ends in the end anchor"),
        user_end: None,
        tokens: seq.tokens,
        prefix: None,
    })
}

/// Tokenises pairs. The user side is the stored rendered text; the modality
/// prefix comes from the matching user record.
pub fn prepare_examples(
    pairs: &[PairRecord],
    users: &[UserRecord],
    vocab: &Vocab,
    enc: &EncoderConfig,
) -> Result<Vec<Example>> {
    let by_id: HashMap<usize, &UserRecord> = users.iter().map(|u| (u.user_id, u)).collect();
    let user_id = vocab.id(USER)?;
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let tokens = vocab.encode(&p.user_text)?;
            if tokens.last() != Some(&user_id) || tokens.len() > enc.max_len {
                return Err(Error::Data(format!(
                    "pair {i}: user text must end in {USER} and fit in {} tokens",
                    enc.max_len
                )));
            }
            let prefix = if enc.modality_prefix {
                let u = by_id
                    .get(&p.user_id)
                    .ok_or_else(|| Error::Data(format!("pair {i}: unknown user {}", p.user_id)))?;
                Some(PrefixInput::from_user(u, enc.tabular_dim)?)
            } else {
                None
            };
            Ok(Example {
                user: TowerInput {
                    anchor: tokens.len() - 1,
                    user_end: close_tag_positions(&tokens, vocab)?,
                    tokens,
                    prefix,
                },
                answer: answer_input(&p.answer_text, vocab, enc)?,
            })
        })
        .collect()
}

/// Parameters plus the mask schedule they were trained under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub encoder: EncoderConfig,
    pub params: ModelParams,
    pub schedule: MaskScheduleState,
}

impl Model {
    pub fn new(encoder: EncoderConfig, schedule: MaskScheduleState) -> Result<Self> {
        Ok(Self {
            params: ModelParams::init(&encoder)?,
            encoder,
            schedule,
        })
    }

    pub fn strategy(&self) -> Strategy {
        self.schedule.strategy
    }

    pub fn mask_for(&self, input: &TowerInput, tower: Tower, phase: Phase) -> Result<SeqMask> {
        let pre = input.prefix_rows();
        sequence_mask(
            self.strategy(),
            &self.schedule,
            tower,
            phase,
            pre + input.tokens.len(),
            input.user_end.map(|e| pre + e),
        )
    }

    fn run(
        &self,
        tape: &mut Tape,
        p: &ModelParams<Var>,
        seqs: &[(&TowerInput, &SeqMask)],
    ) -> Result<(PackedHidden, Var)> {
        let inputs: Vec<SeqInput<'_>> = seqs
            .iter()
            .map(|(x, m)| SeqInput {
                tokens: &x.tokens,
                prefix: x.prefix.as_ref(),
                global: m.global,
                mask: &m.mask,
            })
            .collect();
        let gate = self.strategy() == Strategy::HybridMlp;
        let packed = forward_packed(tape, p, &self.encoder, &inputs, gate)?;
        let anchors: Vec<(usize, usize)> = seqs.iter().enumerate().map(|(i, (x, _))| (i, x.anchor)).collect();
        let emb = gather_embeddings(tape, &packed, &anchors)?;
        Ok((packed, emb))
    }

    /// Unit-norm embeddings of `inputs`, encoded in chunks.
    pub fn embed(&self, inputs: &[TowerInput], tower: Tower, phase: Phase) -> Result<Vec<Vec<f64>>> {
        let d = self.encoder.d_model;
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(64) {
            let masks = chunk.iter().map(|x| self.mask_for(x, tower, phase)).collect::<Result<Vec<_>>>()?;
            let seqs: Vec<_> = chunk.iter().zip(&masks).collect();
            let mut tape = Tape::new();
            let p = self.params.try_map(|_, t| tape.constant(t.shape().to_vec(), t.data().to_vec()))?;
            let (_, emb) = self.run(&mut tape, &p, &seqs)?;
            out.extend(tape.value(emb).chunks(d).map(|r| r.to_vec()));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub alpha: f64,
    /// Mean strict-upper bias over the batch's user masks; `None` when
    /// any entry is blocked.
    pub mean_upper_bias: Option<f64>,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Everything a step reports beyond its log line.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub record: StepRecord,
    pub loss: LossBreakdown,
    /// Largest `|‖e‖ − 1|` over the embeddings entering the loss.
    pub unit_norm_error: f64,
    /// Per-sequence user-tower gradient norms from this step's backward.
    pub user_norms: Vec<Vec<f64>>,
}

struct Pass {
    loss: LossBreakdown,
    grads: Vec<Vec<f64>>,
    user_norms: Vec<Vec<f64>>,
    mean_upper: Option<f64>,
    unit_norm_error: f64,
}

/// Serializable training state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: AdamW,
    pub history: Vec<StepRecord>,
    pub epoch: u64,
    pub cursor: usize,
}

impl TrainState {
    pub fn t(&self) -> usize {
        self.model.schedule.t
    }
}

pub struct Trainer {
    pub state: TrainState,
    examples: Vec<Example>,
    order: Vec<usize>,
}

impl Trainer {
    pub fn new(config: TrainConfig, examples: Vec<Example>) -> Result<Self> {
        config.validate()?;
        let schedule = MaskScheduleState::new(config.strategy, config.warmup, config.steps, config.norm_scale)?;
        let model = Model::new(config.encoder.clone(), schedule)?;
        let optimizer = AdamW::new(config.optimizer, &model.params);
        let state = TrainState {
            config,
            model,
            optimizer,
            history: vec![],
            epoch: 0,
            cursor: 0,
        };
        Self::from_state(state, examples)
    }

    /// Resumes from a saved state; `examples` must be the same data.
    pub fn from_state(state: TrainState, examples: Vec<Example>) -> Result<Self> {
        if examples.len() < state.config.batch_size {
            return Err(Error::Data(format!(
                "{} examples cannot fill a batch of {}",
                examples.len(),
                state.config.batch_size
            )));
        }
        let mut t = Self {
            state,
            examples,
            order: vec![],
        };
        t.order = t.permutation(t.state.epoch);
        Ok(t)
    }

    pub fn model(&self) -> &Model {
        &self.state.model
    }

    pub fn t(&self) -> usize {
        self.state.t()
    }

    pub fn is_done(&self) -> bool {
        self.t() >= self.state.config.steps
    }

    fn permutation(&self, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.state.config.seed);
        rng.set_stream(epoch);
        let mut order: Vec<usize> = (0..self.examples.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let b = self.state.config.batch_size;
        if self.state.cursor + b > self.order.len() {
            self.state.epoch += 1;
            self.state.cursor = 0;
            self.order = self.permutation(self.state.epoch);
        }
        let batch = self.order[self.state.cursor..self.state.cursor + b].to_vec();
        self.state.cursor += b;
        batch
    }

    fn pass(&self, batch: &[usize], phase: Phase) -> Result<Pass> {
        let model = &self.state.model;
        let b = batch.len();
        let mut masks = Vec::with_capacity(2 * b);
        for &i in batch {
            masks.push(model.mask_for(&self.examples[i].user, Tower::User, phase)?);
        }
        for &i in batch {
            masks.push(model.mask_for(&self.examples[i].answer, Tower::Answer, phase)?);
        }
        let seqs: Vec<(&TowerInput, &SeqMask)> = batch
            .iter()
            .map(|&i| &self.examples[i].user)
            .chain(batch.iter().map(|&i| &self.examples[i].answer))
            .zip(&masks)
            .collect();

        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape)?;
        let (packed, emb) = model.run(&mut tape, &p, &seqs)?;
        tape.retain_grad(packed.probe);
        let d = model.encoder.d_model;
        let u = tape.slice_rows(emb, 0, b)?;
        let a = tape.slice_rows(emb, b, b)?;
        let unit_norm_error = tape
            .value(emb)
            .chunks(d)
            .map(|r| (r.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs())
            .fold(0.0, f64::max);
        let (loss_var, loss) = info_nce_tape(&mut tape, u, a, &self.state.config.loss())?;
        tape.backward(loss_var)?;

        let grads = p.named().iter().map(|(_, v)| tape.grad(**v).map(<[f64]>::to_vec)).collect::<Result<Vec<_>, _>>()?;
        let probe_grad = tape.grad(packed.probe)?;
        let user_norms = (0..b)
            .map(|s| {
                let start = packed.starts[s];
                (start..start + packed.layouts[s].len())
                    .map(|r| probe_grad[r * d..(r + 1) * d].iter().map(|g| g * g).sum::<f64>().sqrt())
                    .collect()
            })
            .collect();
        let mean_upper = masks[..b]
            .iter()
            .map(|m| m.mask.mean_upper())
            .collect::<Option<Vec<f64>>>()
            .map(|v| v.iter().sum::<f64>() / v.len() as f64);
        Ok(Pass {
            loss,
            grads,
            user_norms,
            mean_upper,
            unit_norm_error,
        })
    }

    /// Causal forward/backward on `batch` that initialises the lagged norms.
    fn seed_norms(&mut self, batch: &[usize]) -> Result<()> {
        let pass = self.pass(batch, Phase::Seed)?;
        let len = norm_len(self.state.config.encoder.max_len);
        let sched = &mut self.state.model.schedule;
        sched.set_lagged_norms(&pass.user_norms, len)?;
        if sched.strategy == Strategy::Ggsm && sched.warmup_steps == 0 {
            sched.freeze_warmup_norms(&pass.user_norms, len)?;
        }
        Ok(())
    }

    pub fn step(&mut self) -> Result<StepReport> {
        let t = self.t();
        let batch = self.next_batch();
        let strategy = self.state.config.strategy;
        if t == 0 && strategy.uses_grad_norms() && self.state.model.schedule.lagged_norms.is_none() {
            self.seed_norms(&batch)?;
        }
        let lr = self.state.config.lr_at(t);
        let pass = self.pass(&batch, Phase::Train).map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("step {t} (lr {lr}): {m}")),
            e => e,
        })?;

        let len = norm_len(self.state.config.encoder.max_len);
        let sched = &mut self.state.model.schedule;
        match strategy {
            Strategy::HybridSoft => sched.set_lagged_norms(&pass.user_norms, len)?,
            Strategy::Ggsm if t < sched.warmup_steps => {
                sched.set_lagged_norms(&pass.user_norms, len)?;
                if t + 1 == sched.warmup_steps {
                    sched.freeze_warmup_norms(&pass.user_norms, len)?;
                }
            }
            _ => {}
        }

        let grad_norm = self
            .state
            .optimizer
            .step(&mut self.state.model.params, &pass.grads, lr)
            .map_err(|e| Error::Numeric(format!("step {t} (lr {lr}, loss {}): {e}", pass.loss.total)))?;
        let record = StepRecord {
            step: t,
            loss: pass.loss.total,
            alpha: self.state.config.opening(t),
            mean_upper_bias: pass.mean_upper,
            lr,
            grad_norm,
        };
        self.state.history.push(record.clone());
        self.state.model.schedule.t += 1;
        Ok(StepReport {
            record,
            loss: pass.loss,
            unit_norm_error: pass.unit_norm_error,
            user_norms: pass.user_norms,
        })
    }

    /// Steps until `until` (capped at the configured total).
    pub fn run_to(&mut self, until: usize) -> Result<()> {
        while self.t() < until.min(self.state.config.steps) {
            self.step()?;
        }
        Ok(())
    }
}

/// Tab-separated loss log: `step loss alpha_t mean_upper_bias lr`.
pub fn loss_log_tsv(history: &[StepRecord]) -> String {
    let mut s = String::from("step\tloss\talpha_t\tmean_upper_bias\tlr\n");
    for r in history {
        let bias = r.mean_upper_bias.map_or("-inf".to_string(), |b| b.to_string());
        s.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", r.step, r.loss, r.alpha, bias, r.lr));
    }
    s
}

/// Mean loss over the first and last `window` steps.
pub fn smoothed_endpoints(history: &[StepRecord], window: usize) -> Option<(f64, f64)> {
    if history.is_empty() || window == 0 {
        return None;
    }
    let w = window.min(history.len());
    let mean = |rs: &[StepRecord]| rs.iter().map(|r| r.loss).sum::<f64>() / rs.len() as f64;
    Some((mean(&history[..w]), mean(&history[history.len() - w..])))
}

#[cfg(test)]
mod tests;
