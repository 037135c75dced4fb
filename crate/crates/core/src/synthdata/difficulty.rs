use std::collections::HashMap;

use super::{parse_event, Modality, PairRecord, Provenance, UserRecord, Window, EVENTS_PER_MODALITY};
use crate::contrastive::cosine_sim;
use crate::{Error, Result};

/// Embeds both sides of a pair: `Emb(u ⊕ q)` and `Emb(a)`.
pub trait Embedder {
    fn embed_pair(&self, pair: &PairRecord) -> Result<(Vec<f64>, Vec<f64>)>;
}

/// Hard-to-align score `1 − cos(Emb(u ⊕ q), Emb(a))`, in `[0, 2]`.
pub fn difficulty_score(pair: &PairRecord, emb: &dyn Embedder) -> Result<f64> {
    let (u, a) = emb.embed_pair(pair)?;
    Ok(1.0 - cosine_sim(&u, &a)?)
}

/// Scores every pair in place.
pub fn score_pairs(pairs: &mut [PairRecord], emb: &dyn Embedder) -> Result<()> {
    for p in pairs.iter_mut() {
        p.difficulty = Some(difficulty_score(p, emb)?);
    }
    Ok(())
}

/// The pairs with `S_d ≥ t_filter`, in input order, marked filtered-hard.
pub fn filter_hard(pairs: &[PairRecord], t_filter: f64) -> Result<Vec<PairRecord>> {
    let mut out = Vec::new();
    for (i, p) in pairs.iter().enumerate() {
        let s = p
            .difficulty
            .ok_or_else(|| Error::Data(format!("pair {i} (user {}) has no difficulty score", p.user_id)))?;
        if s >= t_filter {
            let mut p = p.clone();
            p.provenance = Provenance::FilteredHard;
            out.push(p);
        }
    }
    Ok(out)
}

/// Event counts of a window over the full event vocabulary (120 slots).
pub fn bag_of_events(w: &Window) -> Vec<f64> {
    let mut v = vec![0.0; Modality::EVENTS.len() * EVENTS_PER_MODALITY];
    for e in w.iter() {
        if let Some((m, i, _)) = parse_event(e) {
            v[m.index() * EVENTS_PER_MODALITY + i] += 1.0;
        }
    }
    v
}

fn bag_of_text(text: &str) -> Vec<f64> {
    let mut v = vec![0.0; Modality::EVENTS.len() * EVENTS_PER_MODALITY];
    for t in text.split_whitespace() {
        if let Some((m, i, _)) = parse_event(t) {
            v[m.index() * EVENTS_PER_MODALITY + i] += 1.0;
        }
    }
    v
}

/// Model-free embedder over event counts plus a constant slot, so neither
/// side is ever the zero vector.
pub struct BagEmbedder<'a> {
    users: HashMap<usize, &'a UserRecord>,
}

impl<'a> BagEmbedder<'a> {
    pub fn new(users: &'a [UserRecord]) -> Self {
        Self {
            users: users.iter().map(|u| (u.user_id, u)).collect(),
        }
    }
}

impl Embedder for BagEmbedder<'_> {
    fn embed_pair(&self, pair: &PairRecord) -> Result<(Vec<f64>, Vec<f64>)> {
        let user = self
            .users
            .get(&pair.user_id)
            .ok_or_else(|| Error::Data(format!("unknown user {}", pair.user_id)))?;
        let mut u = bag_of_events(&user.history);
        u.push(1.0);
        let mut a = bag_of_text(&pair.answer_text);
        a.push(1.0);
        Ok((u, a))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::PairKind;

    struct Fixed(Vec<f64>, Vec<f64>);

    impl Embedder for Fixed {
        fn embed_pair(&self, _: &PairRecord) -> Result<(Vec<f64>, Vec<f64>)> {
            Ok((self.0.clone(), self.1.clone()))
        }
    }

    fn pair(score: Option<f64>) -> PairRecord {
        PairRecord {
            kind: PairKind::Behavior,
            user_id: 0,
            user_text: String::new(),
            query_text: None,
            answer_text: "bill:taxi x1".into(),
            difficulty: score,
            provenance: Provenance::Generated,
            labels: vec![],
        }
    }

    #[test]
    fn score_examples() {
        let p = pair(None);
        assert_eq!(difficulty_score(&p, &Fixed(vec![0.6, 0.8], vec![0.6, 0.8])).unwrap(), 0.0);
        assert_eq!(difficulty_score(&p, &Fixed(vec![1.0, 0.0], vec![0.0, 1.0])).unwrap(), 1.0);
        assert_eq!(difficulty_score(&p, &Fixed(vec![1.0, 0.0], vec![-1.0, 0.0])).unwrap(), 2.0);
        assert!(difficulty_score(&p, &Fixed(vec![0.0, 0.0], vec![1.0, 0.0])).is_err());
    }

    #[test]
    fn filter_examples() {
        let pairs: Vec<_> = [0.1, 0.9, 0.5].iter().map(|&s| pair(Some(s))).collect();
        let kept = filter_hard(&pairs, 0.5).unwrap();
        assert_eq!(kept.iter().map(|p| p.difficulty.unwrap()).collect::<Vec<_>>(), vec![0.9, 0.5]);
        assert!(kept.iter().all(|p| p.provenance == Provenance::FilteredHard));
        assert_eq!(filter_hard(&pairs, 0.0).unwrap().len(), 3);
        assert!(filter_hard(&pairs, 2.0 + 1e-9).unwrap().is_empty());
        assert!(filter_hard(&[pair(None)], 0.0).is_err());
    }
}
