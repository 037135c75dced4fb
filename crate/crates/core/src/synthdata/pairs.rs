use std::collections::BTreeMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{parse_event, PairKind, PairRecord, Provenance, UserRecord, Window};
use crate::encoder::{count_token, render_template, Vocab};
use crate::{Error, Result};

fn canonical_key(event: &str) -> (usize, usize) {
    parse_event(event).map(|(m, i, _)| (m.index(), i)).unwrap_or((usize::MAX, usize::MAX))
}

/// Distinct events of a window with their counts, in vocabulary order.
pub fn aggregate_events(w: &Window) -> Vec<(String, usize)> {
    let mut counts: BTreeMap<(usize, usize), (String, usize)> = BTreeMap::new();
    for e in w.iter() {
        counts.entry(canonical_key(e)).or_insert_with(|| (e.clone(), 0)).1 += 1;
    }
    counts.into_values().collect()
}

/// `event xN` clauses joined by spaces.
pub fn render_clauses(items: &[(String, usize)]) -> String {
    items
        .iter()
        .map(|(e, n)| format!("{e} {}", count_token(*n)))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Sorts `event xN` clauses into vocabulary order and drops repeated
/// events; leading non-event tokens are kept in place.
pub fn rewrite_answer(answer: &str) -> String {
    let toks: Vec<&str> = answer.split_whitespace().collect();
    let first = toks.iter().position(|t| parse_event(t).is_some()).unwrap_or(toks.len());
    let mut clauses: BTreeMap<(usize, usize), String> = BTreeMap::new();
    let mut i = first;
    while i < toks.len() {
        let mut clause = toks[i].to_string();
        let key = canonical_key(toks[i]);
        i += 1;
        while i < toks.len() && parse_event(toks[i]).is_none() {
            clause.push(' ');
            clause.push_str(toks[i]);
            i += 1;
        }
        clauses.entry(key).or_insert(clause);
    }
    let mut out: Vec<String> = toks[..first].iter().map(|t| t.to_string()).collect();
    out.extend(clauses.into_values());
    out.join(" ")
}

#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorPairs {
    pub pairs: Vec<PairRecord>,
    /// Users skipped because their future window was empty.
    pub skipped: usize,
}

/// One pair per user: rendered history against a seeded sample of
/// `sample_k` aggregated future events.
pub fn build_behavior_pairs(
    users: &[UserRecord],
    sample_k: usize,
    seed: u64,
    vocab: &Vocab,
    max_len: usize,
) -> Result<BehaviorPairs> {
    if sample_k == 0 {
        return Err(Error::Config("sample_k must be at least 1".into()));
    }
    let mut pairs = Vec::with_capacity(users.len());
    let mut skipped = 0;
    for u in users {
        let agg = aggregate_events(&u.future);
        if agg.is_empty() {
            skipped += 1;
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u.user_id as u64);
        let mut picked = index::sample(&mut rng, agg.len(), sample_k.min(agg.len())).into_vec();
        picked.sort_unstable();
        let items: Vec<(String, usize)> = picked.into_iter().map(|i| agg[i].clone()).collect();
        let seq = render_template(u, None, vocab, max_len)?;
        pairs.push(PairRecord {
            kind: PairKind::Behavior,
            user_id: u.user_id,
            user_text: vocab.decode(&seq.tokens),
            query_text: None,
            answer_text: render_clauses(&items),
            difficulty: None,
            provenance: Provenance::Generated,
            labels: u.labels.clone(),
        });
    }
    Ok(BehaviorPairs { pairs, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn user(id: usize, future: &[&str]) -> UserRecord {
        let mut u = UserRecord::empty(id, 4, 4);
        u.future.bill = future.iter().filter(|e| e.starts_with("bill:")).map(|e| e.to_string()).collect();
        u.future.app = future.iter().filter(|e| e.starts_with("app:")).map(|e| e.to_string()).collect();
        u
    }

    #[test]
    fn single_future_event_is_the_answer() {
        let v = Vocab::builtin(4);
        let out = build_behavior_pairs(&[user(0, &["bill:taxi"])], 5, 1, &v, 128).unwrap();
        assert_eq!(out.pairs[0].answer_text, "bill:taxi x1");
        assert!(out.pairs[0].user_text.ends_with("<USER>"));
    }

    #[test]
    fn sample_k_zero_is_rejected() {
        let v = Vocab::builtin(4);
        assert!(build_behavior_pairs(&[user(0, &["bill:taxi"])], 0, 1, &v, 128).is_err());
    }

    #[test]
    fn empty_future_is_skipped() {
        let v = Vocab::builtin(4);
        let out = build_behavior_pairs(&[user(0, &[]), user(1, &["app:game"])], 5, 1, &v, 128).unwrap();
        assert_eq!(out.skipped, 1);
        assert_eq!(out.pairs.len(), 1);
    }

    #[test]
    fn identical_futures_same_seed_same_answers() {
        let v = Vocab::builtin(4);
        let f = ["bill:taxi", "bill:gym", "app:game", "app:game", "bill:coffee", "app:movie", "bill:fund"];
        let a = build_behavior_pairs(&[user(3, &f)], 3, 9, &v, 128).unwrap();
        let b = build_behavior_pairs(&[user(3, &f)], 3, 9, &v, 128).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.pairs[0].answer_text.split_whitespace().count(), 6);
    }

    #[test]
    fn aggregation_counts_and_orders() {
        let u = user(0, &["app:game", "bill:taxi", "app:game"]);
        assert_eq!(aggregate_events(&u.future), vec![("bill:taxi".to_string(), 1), ("app:game".to_string(), 2)]);
    }

    #[test]
    fn rewrite_sorts_and_dedups() {
        assert_eq!(
            rewrite_answer("yes cat:travel app:hotel x1 bill:taxi x2 app:hotel x1"),
            "yes cat:travel bill:taxi x2 app:hotel x1"
        );
        assert_eq!(rewrite_answer("no cat:food"), "no cat:food");
    }
}
