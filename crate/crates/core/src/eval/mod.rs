//! Linear probing of frozen user embeddings and ROC AUC.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{Vocab, USER};
use crate::synthdata::{Embedder, PairRecord, UserRecord};
use crate::trainer::{answer_input, user_input, Model, Phase, Tower, TowerInput};
use crate::{Error, Result};

/// Mann–Whitney AUC: the fraction of (positive, negative) pairs ranked
/// correctly, ties counting half.
///
/// Counts `2U` as an integer via binary search over the sorted negatives,
/// so the result is the exact ratio rounded once.
pub fn auc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Data(format!(
            "AUC undefined with {} positives and {} negatives",
            pos.len(),
            neg.len()
        )));
    }
    if pos.iter().chain(neg).any(|x| x.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let mut sorted = neg.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut twice_u: u64 = 0;
    for &p in pos {
        let below = sorted.partition_point(|&n| n < p);
        let not_above = sorted.partition_point(|&n| n <= p);
        twice_u += 2 * below as u64 + (not_above - below) as u64;
    }
    Ok(twice_u as f64 / (2 * pos.len() as u64 * neg.len() as u64) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            lr: 1.0,
            l2: 1e-4,
        }
    }
}

fn check_xy(x: &[Vec<f64>], y: &[bool]) -> Result<usize> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Data(format!("probe needs ≥ 2 labelled rows, got {} rows and {} labels", x.len(), y.len())));
    }
    let d = x[0].len();
    if x.iter().any(|r| r.len() != d) {
        return Err(Error::Data("ragged probe features".into()));
    }
    if y.iter().all(|&l| l) || y.iter().all(|&l| !l) {
        return Err(Error::Data("probe labels have a single class".into()));
    }
    Ok(d)
}

/// Logistic scores `w·x + b` for weights laid out as `[w..., b]`.
pub fn probe_logits(w: &[f64], x: &[Vec<f64>]) -> Vec<f64> {
    let (b, w) = w.split_last().expect("probe weights");
    x.iter().map(|r| r.iter().zip(w).map(|(a, c)| a * c).sum::<f64>() + b).collect()
}

/// Mean logistic loss plus `l2/2 · ‖w‖²` (bias unpenalised).
pub fn probe_loss(w: &[f64], x: &[Vec<f64>], y: &[bool], l2: f64) -> f64 {
    let z = probe_logits(w, x);
    let data: f64 = z
        .iter()
        .zip(y)
        .map(|(&z, &l)| {
            let s = if l { z } else { -z };
            -crate::tensor::log_sigmoid(s)
        })
        .sum::<f64>()
        / y.len() as f64;
    let reg: f64 = w[..w.len() - 1].iter().map(|v| v * v).sum();
    data + 0.5 * l2 * reg
}

/// Full-batch gradient descent on the L2-penalised logistic loss from
/// zero weights. Returns `d + 1` weights, bias last.
pub fn train_linear_probe(x: &[Vec<f64>], y: &[bool], cfg: &ProbeConfig) -> Result<Vec<f64>> {
    let d = check_xy(x, y)?;
    let n = x.len() as f64;
    let mut w = vec![0.0; d + 1];
    let mut grad = vec![0.0; d + 1];
    for _ in 0..cfg.epochs {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (z, (row, &l)) in probe_logits(&w, x).into_iter().zip(x.iter().zip(y)) {
            let r = crate::tensor::sigmoid(z) - if l { 1.0 } else { 0.0 };
            for (g, v) in grad.iter_mut().zip(row) {
                *g += r * v;
            }
            grad[d] += r;
        }
        for k in 0..d {
            w[k] -= cfg.lr * (grad[k] / n + cfg.l2 * w[k]);
        }
        w[d] -= cfg.lr * grad[d] / n;
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("probe weights diverged".into()));
    }
    Ok(w)
}

/// One binary task: label `label` of every user, on a shared split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeTask {
    pub task_id: usize,
    pub name: String,
    pub label: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub task_id: usize,
    pub name: String,
    pub auc: f64,
    pub n_train: usize,
    pub n_test: usize,
    /// First 16 hex digits of the SHA-256 of the weights' little-endian bytes.
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TaskOutcome {
    Done(ProbeResult),
    Skipped { task_id: usize, name: String, reason: String },
}

impl TaskOutcome {
    pub fn result(&self) -> Option<&ProbeResult> {
        match self {
            TaskOutcome::Done(r) => Some(r),
            TaskOutcome::Skipped { .. } => None,
        }
    }
}

/// One task per label index, all sharing a seeded 50/50 user split.
pub fn make_tasks(users: &[UserRecord], seed: u64, only: Option<&[usize]>) -> Result<Vec<ProbeTask>> {
    let k = users.first().map_or(0, |u| u.labels.len());
    if users.iter().any(|u| u.labels.len() != k) {
        return Err(Error::Data("users disagree on the number of labels".into()));
    }
    let mut ids: Vec<usize> = users.iter().map(|u| u.user_id).collect();
    ids.sort_unstable();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train, test) = ids.split_at(ids.len() / 2);
    let (mut train, mut test) = (train.to_vec(), test.to_vec());
    train.sort_unstable();
    test.sort_unstable();
    let labels: Vec<usize> = match only {
        Some(sel) => {
            if let Some(&bad) = sel.iter().find(|&&t| t >= k) {
                return Err(Error::Data(format!("task {bad} out of range (corpus has {k} labels)")));
            }
            sel.to_vec()
        }
        None => (0..k).collect(),
    };
    Ok(labels
        .into_iter()
        .map(|l| ProbeTask {
            task_id: l,
            name: format!("label_{l}"),
            label: l,
            train: train.clone(),
            test: test.clone(),
        })
        .collect())
}

fn checksum(w: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in w {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())[..16].to_string()
}

/// Fits and scores every task on precomputed embeddings keyed by user id.
pub fn evaluate_embeddings(
    embeddings: &HashMap<usize, Vec<f64>>,
    users: &[UserRecord],
    tasks: &[ProbeTask],
    cfg: &ProbeConfig,
) -> Result<Vec<TaskOutcome>> {
    let by_id: HashMap<usize, &UserRecord> = users.iter().map(|u| (u.user_id, u)).collect();
    let gather = |ids: &[usize], label: usize| -> Result<(Vec<Vec<f64>>, Vec<bool>)> {
        let mut x = Vec::with_capacity(ids.len());
        let mut y = Vec::with_capacity(ids.len());
        for id in ids {
            let u = by_id.get(id).ok_or_else(|| Error::Data(format!("unknown user {id}")))?;
            let e = embeddings.get(id).ok_or_else(|| Error::Data(format!("no embedding for user {id}")))?;
            x.push(e.clone());
            y.push(u.labels[label]);
        }
        Ok((x, y))
    };
    let mut out = Vec::with_capacity(tasks.len());
    for task in tasks {
        let (xtr, ytr) = gather(&task.train, task.label)?;
        let (xte, yte) = gather(&task.test, task.label)?;
        let both = |y: &[bool]| y.iter().any(|&l| l) && y.iter().any(|&l| !l);
        if !both(&ytr) || !both(&yte) {
            out.push(TaskOutcome::Skipped {
                task_id: task.task_id,
                name: task.name.clone(),
                reason: "a split lacks one class".into(),
            });
            continue;
        }
        let w = train_linear_probe(&xtr, &ytr, cfg)?;
        let scores = probe_logits(&w, &xte);
        let pos: Vec<f64> = scores.iter().zip(&yte).filter(|(_, &l)| l).map(|(s, _)| *s).collect();
        let neg: Vec<f64> = scores.iter().zip(&yte).filter(|(_, &l)| !l).map(|(s, _)| *s).collect();
        out.push(TaskOutcome::Done(ProbeResult {
            task_id: task.task_id,
            name: task.name.clone(),
            auc: auc(&pos, &neg)?,
            n_train: xtr.len(),
            n_test: xte.len(),
            checksum: checksum(&w),
        }));
    }
    Ok(out)
}

/// User embeddings under the strategy's inference mask.
pub fn embed_users(model: &Model, users: &[UserRecord], vocab: &Vocab) -> Result<HashMap<usize, Vec<f64>>> {
    let inputs = users
        .iter()
        .map(|u| user_input(u, None, vocab, &model.encoder))
        .collect::<Result<Vec<_>>>()?;
    let emb = model.embed(&inputs, Tower::User, Phase::Inference)?;
    Ok(users.iter().map(|u| u.user_id).zip(emb).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub strategy: String,
    pub outcomes: Vec<TaskOutcome>,
    /// Mean AUC over completed tasks.
    pub mean_auc: Option<f64>,
}

impl EvalReport {
    pub fn new(strategy: impl Into<String>, outcomes: Vec<TaskOutcome>) -> Self {
        let aucs: Vec<f64> = outcomes.iter().filter_map(|o| o.result()).map(|r| r.auc).collect();
        let mean_auc = (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64);
        Self {
            strategy: strategy.into(),
            outcomes,
            mean_auc,
        }
    }

    /// Rows `strategy task auc n_train n_test`, then an `avg` row.
    pub fn tsv_rows(&self) -> String {
        let mut s = String::new();
        for o in &self.outcomes {
            match o {
                TaskOutcome::Done(r) => {
                    s += &format!("{}\t{}\t{:.6}\t{}\t{}\n", self.strategy, r.name, r.auc, r.n_train, r.n_test)
                }
                TaskOutcome::Skipped { name, .. } => s += &format!("{}\t{}\tskipped\t-\t-\n", self.strategy, name),
            }
        }
        let mean = self.mean_auc.map_or("-".to_string(), |m| format!("{m:.6}"));
        s += &format!("{}\tavg\t{}\t-\t-\n", self.strategy, mean);
        s
    }
}

pub const RESULTS_HEADER: &str = "strategy\ttask\tauc\tn_train\tn_test\n";

/// Embeds every user once and probes each task.
pub fn evaluate_all(
    model: &Model,
    users: &[UserRecord],
    tasks: &[ProbeTask],
    vocab: &Vocab,
    cfg: &ProbeConfig,
) -> Result<EvalReport> {
    let emb = embed_users(model, users, vocab)?;
    let outcomes = evaluate_embeddings(&emb, users, tasks, cfg)?;
    Ok(EvalReport::new(model.strategy().tag(), outcomes))
}

/// Scores pairs with a model: the user side is the stored user text (with
/// any query), the answer side the answer text.
pub struct EncoderEmbedder<'a> {
    model: &'a Model,
    vocab: &'a Vocab,
    users: HashMap<usize, &'a UserRecord>,
}

impl<'a> EncoderEmbedder<'a> {
    pub fn new(model: &'a Model, vocab: &'a Vocab, users: &'a [UserRecord]) -> Self {
        Self {
            model,
            vocab,
            users: users.iter().map(|u| (u.user_id, u)).collect(),
        }
    }
}

impl Embedder for EncoderEmbedder<'_> {
    fn embed_pair(&self, pair: &PairRecord) -> Result<(Vec<f64>, Vec<f64>)> {
        let user = self
            .users
            .get(&pair.user_id)
            .ok_or_else(|| Error::Data(format!("unknown user {}", pair.user_id)))?;
        let mut u: TowerInput = user_input(user, None, self.vocab, &self.model.encoder)?;
        let tokens = self.vocab.encode(&pair.user_text)?;
        if tokens.last() != Some(&self.vocab.id(USER)?) {
            return Err(Error::Data(format!("user text of user {} does not end in {USER}", pair.user_id)));
        }
        u.anchor = tokens.len() - 1;
        u.tokens = tokens;
        let a = answer_input(&pair.answer_text, self.vocab, &self.model.encoder)?;
        let mut e = self.model.embed(&[u], Tower::User, Phase::Inference)?;
        let mut f = self.model.embed(&[a], Tower::Answer, Phase::Inference)?;
        Ok((e.pop().unwrap(), f.pop().unwrap()))
    }
}
