use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::difficulty::{filter_hard, score_pairs, Embedder};
use super::pairs::{aggregate_events, render_clauses, rewrite_answer};
use super::{parse_event, Category, PairKind, PairRecord, Provenance, UserRecord};
use crate::encoder::{render_template, Vocab};
use crate::{Error, Result};

/// Source of `(query, answer)` texts for a user; `hints` are categories
/// the generator should favour.
pub trait QaGenerator {
    fn generate(&self, user: &UserRecord, hints: &[Category], rng: &mut ChaCha8Rng) -> Result<(String, String)>;
}

/// Template generator: "will this user do cat:X next month ?" answered from
/// the user's future window.
#[derive(Debug, Clone)]
pub struct TemplateGenerator {
    /// Probability of drawing the query category from the hints.
    pub hint_prob: f64,
    /// Most `event xN` clauses in one answer.
    pub max_items: usize,
}

impl Default for TemplateGenerator {
    fn default() -> Self {
        Self {
            hint_prob: 0.7,
            max_items: 5,
        }
    }
}

impl QaGenerator for TemplateGenerator {
    fn generate(&self, user: &UserRecord, hints: &[Category], rng: &mut ChaCha8Rng) -> Result<(String, String)> {
        let cat = if !hints.is_empty() && rng.gen_bool(self.hint_prob) {
            hints[rng.gen_range(0..hints.len())]
        } else {
            Category::ALL[rng.gen_range(0..Category::ALL.len())]
        };
        let query = format!("will this user do {} next month ?", cat.token());
        let items: Vec<(String, usize)> = aggregate_events(&user.future)
            .into_iter()
            .filter(|(e, _)| parse_event(e).is_some_and(|(_, _, c)| c == cat))
            .take(self.max_items)
            .collect();
        let answer = if items.is_empty() {
            format!("no {}", cat.token())
        } else {
            format!("yes {} {}", cat.token(), render_clauses(&items))
        };
        Ok((query, answer))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QaConfig {
    pub calibration_size: usize,
    pub t_filter: f64,
    pub scale_n: usize,
    pub seed: u64,
    /// A category becomes a rule when its share among hard pairs is at
    /// least this multiple of its share overall.
    pub ratio_threshold: f64,
}

impl Default for QaConfig {
    fn default() -> Self {
        Self {
            calibration_size: 1000,
            t_filter: 0.6,
            scale_n: 2000,
            seed: 7,
            ratio_threshold: 1.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QaOutput {
    /// Scored calibration pairs.
    pub calibration: Vec<PairRecord>,
    pub hard: Vec<PairRecord>,
    pub rules: Vec<Category>,
    /// Final hinted and rewritten pairs.
    pub pairs: Vec<PairRecord>,
    /// Generator failures, across both generation passes.
    pub skipped: usize,
}

fn query_category(p: &PairRecord) -> Option<Category> {
    p.query_text.as_deref()?.split_whitespace().find_map(Category::from_token)
}

/// Query categories over-represented among `hard` relative to `all`.
pub fn extract_rules(hard: &[PairRecord], all: &[PairRecord], ratio_threshold: f64) -> Vec<Category> {
    if hard.is_empty() || all.is_empty() {
        return vec![];
    }
    let share = |set: &[PairRecord], c: Category| {
        set.iter().filter(|p| query_category(p) == Some(c)).count() as f64 / set.len() as f64
    };
    Category::ALL
        .into_iter()
        .filter(|&c| {
            let base = share(all, c);
            base > 0.0 && share(hard, c) / base >= ratio_threshold
        })
        .collect()
}

fn generate(
    users: &[UserRecord],
    n: usize,
    gen: &dyn QaGenerator,
    hints: &[Category],
    rng: &mut ChaCha8Rng,
    vocab: &Vocab,
    max_len: usize,
    skipped: &mut usize,
) -> Result<Vec<PairRecord>> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let user = &users[i % users.len()];
        let Ok((query, answer)) = gen.generate(user, hints, rng) else {
            *skipped += 1;
            continue;
        };
        let seq = render_template(user, Some(&query), vocab, max_len)?;
        out.push(PairRecord {
            kind: PairKind::Qa,
            user_id: user.user_id,
            user_text: vocab.decode(&seq.tokens),
            query_text: Some(query),
            answer_text: answer,
            difficulty: None,
            provenance: Provenance::Generated,
            labels: user.labels.clone(),
        });
    }
    Ok(out)
}

/// Calibrate, score, mine rules from hard pairs, then generate at scale
/// with those rules as hints and rewrite the answers canonically.
pub fn qa_pipeline(
    users: &[UserRecord],
    gen: &dyn QaGenerator,
    emb: &dyn Embedder,
    cfg: &QaConfig,
    vocab: &Vocab,
    max_len: usize,
) -> Result<QaOutput> {
    if users.is_empty() {
        return Err(Error::Data("qa pipeline needs at least one user".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut skipped = 0;
    let mut calibration = generate(users, cfg.calibration_size, gen, &[], &mut rng, vocab, max_len, &mut skipped)?;
    score_pairs(&mut calibration, emb)?;
    let hard = filter_hard(&calibration, cfg.t_filter)?;
    let rules = extract_rules(&hard, &calibration, cfg.ratio_threshold);
    let mut pairs = generate(users, cfg.scale_n, gen, &rules, &mut rng, vocab, max_len, &mut skipped)?;
    for p in &mut pairs {
        p.answer_text = rewrite_answer(&p.answer_text);
        p.provenance = Provenance::Rewritten;
    }
    Ok(QaOutput {
        calibration,
        hard,
        rules,
        pairs,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_corpus, BagEmbedder, CorpusConfig};

    fn corpus() -> Vec<UserRecord> {
        generate_corpus(&CorpusConfig {
            n_users: 100,
            ..CorpusConfig::default()
        })
        .unwrap()
        .1
    }

    #[test]
    fn zero_threshold_keeps_whole_calibration_set() {
        let users = corpus();
        let cfg = QaConfig {
            calibration_size: users.len(),
            t_filter: 0.0,
            scale_n: 10,
            ..QaConfig::default()
        };
        let out = qa_pipeline(&users, &TemplateGenerator::default(), &BagEmbedder::new(&users), &cfg, &Vocab::builtin(4), 128).unwrap();
        assert_eq!(out.hard.len(), users.len());
        assert_eq!(out.pairs.len(), 10);
        assert!(out.pairs.iter().all(|p| p.provenance == Provenance::Rewritten));
    }

    #[test]
    fn hints_raise_hint_frequency() {
        let users = corpus();
        let gen = TemplateGenerator::default();
        let hints = [Category::Health];
        let count = |h: &[Category]| {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            (0..1000)
                .filter(|i| {
                    let (q, _) = gen.generate(&users[i % users.len()], h, &mut rng).unwrap();
                    q.contains("cat:health")
                })
                .count()
        };
        assert!(count(&hints) > count(&[]));
    }

    #[test]
    fn answers_follow_future_window() {
        let mut u = UserRecord::empty(0, 4, 4);
        u.future.bill = vec!["bill:taxi".into(), "bill:taxi".into()];
        let gen = TemplateGenerator {
            hint_prob: 1.0,
            max_items: 5,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (q, a) = gen.generate(&u, &[Category::Travel], &mut rng).unwrap();
        assert_eq!(q, "will this user do cat:travel next month ?");
        assert_eq!(a, "yes cat:travel bill:taxi x2");
        let (_, a) = gen.generate(&u, &[Category::Food], &mut rng).unwrap();
        assert_eq!(a, "no cat:food");
    }
}
