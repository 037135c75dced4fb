use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use super::{event_token, Category, Modality, UserRecord, Window, EVENTS_PER_CATEGORY, EVENTS_PER_MODALITY};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_users: usize,
    pub n_archetypes: usize,
    pub seed: u64,
    pub noise_rate: f64,
    pub n_labels: usize,
    pub tabular_features: usize,
    pub tabular_dim: usize,
    pub history_min: usize,
    pub history_max: usize,
    pub future_min: usize,
    pub future_max: usize,
    pub favourites: usize,
    pub interest_boost: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_users: 2000,
            n_archetypes: 4,
            seed: 7,
            noise_rate: 0.05,
            n_labels: 9,
            tabular_features: 4,
            tabular_dim: 4,
            history_min: 2,
            history_max: 5,
            future_min: 2,
            future_max: 4,
            favourites: 3,
            interest_boost: 6.0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_users == 0 {
            return bad("n_users must be at least 1");
        }
        if self.n_archetypes == 0 {
            return bad("n_archetypes must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return bad("noise_rate must be in [0, 1]");
        }
        if self.n_labels < 3 {
            return bad("n_labels must be at least 3");
        }
        if self.tabular_features == 0 || self.tabular_dim == 0 {
            return bad("tabular grid must be non-empty");
        }
        if self.history_min > self.history_max || self.future_min > self.future_max {
            return bad("event count ranges are inverted");
        }
        if self.future_max == 0 {
            return bad("future window would always be empty");
        }
        if self.favourites == 0 || self.favourites > EVENTS_PER_MODALITY {
            return bad("favourites must be in 1..=24");
        }
        if !(self.interest_boost >= 1.0) {
            return bad("interest_boost must be at least 1");
        }
        Ok(())
    }
}

/// A latent user type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Archetype {
    pub id: usize,
    pub interests: Vec<Category>,
    /// Per event modality, a distribution over its local event indices.
    pub event_dists: Vec<Vec<f64>>,
    pub bits: Vec<bool>,
    /// Per tabular feature row, the mean value of its cells.
    pub tabular_means: Vec<f64>,
}

fn label_patterns(n_labels: usize, n_arch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<bool>> {
    let mut pats: Vec<Vec<bool>> = Vec::with_capacity(n_labels);
    for _ in 0..n_labels {
        let mut best = None;
        for _ in 0..64 {
            let p: Vec<bool> = (0..n_arch).map(|_| rng.gen_bool(0.5)).collect();
            let constant = n_arch > 1 && p.iter().all(|&b| b == p[0]);
            if constant {
                continue;
            }
            let fresh = !pats.contains(&p);
            best = Some(p);
            if fresh {
                break;
            }
        }
        pats.push(best.unwrap_or_else(|| (0..n_arch).map(|a| a % 2 == 0).collect()));
    }
    // transpose to per-archetype bit vectors
    (0..n_arch).map(|a| pats.iter().map(|p| p[a]).collect()).collect()
}

fn make_archetypes(cfg: &CorpusConfig, rng: &mut ChaCha8Rng) -> Vec<Archetype> {
    let bits = label_patterns(cfg.n_labels, cfg.n_archetypes, rng);
    let mut pairs: Vec<(Category, Category)> = Vec::new();
    for (i, &a) in Category::ALL.iter().enumerate() {
        for &b in &Category::ALL[i + 1..] {
            pairs.push((a, b));
        }
    }
    pairs.shuffle(rng);
    let tab = Normal::new(0.0, 0.8).unwrap();
    (0..cfg.n_archetypes)
        .map(|id| {
            let (a, b) = pairs[id % pairs.len()];
            let interests = vec![a, b];
            let event_dists = Modality::EVENTS
                .iter()
                .map(|_| {
                    let w: Vec<f64> = (0..EVENTS_PER_MODALITY)
                        .map(|i| {
                            let cat = Category::ALL[i / EVENTS_PER_CATEGORY];
                            if interests.contains(&cat) {
                                cfg.interest_boost
                            } else {
                                1.0
                            }
                        })
                        .collect();
                    let s: f64 = w.iter().sum();
                    w.into_iter().map(|x| x / s).collect()
                })
                .collect();
            Archetype {
                id,
                interests,
                event_dists,
                bits: bits[id].clone(),
                tabular_means: (0..cfg.tabular_features).map(|_| tab.sample(rng)).collect(),
            }
        })
        .collect()
}

/// Archetype-driven user corpus; deterministic in `cfg`.
///
/// History and future windows are drawn from the same per-user mixture of
/// the archetype distribution and a handful of personal favourites, so the
/// future is predictable from the history.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<(Vec<Archetype>, Vec<UserRecord>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let archetypes = make_archetypes(cfg, &mut rng);
    let cell = Normal::new(0.0, 0.5).unwrap();
    let mut users = Vec::with_capacity(cfg.n_users);
    for user_id in 0..cfg.n_users {
        let arch = &archetypes[rng.gen_range(0..archetypes.len())];
        let mut history = Window::default();
        let mut future = Window::default();
        for (mi, &m) in Modality::EVENTS.iter().enumerate() {
            let base = &arch.event_dists[mi];
            let pick = WeightedIndex::new(base).unwrap();
            let mut favs: Vec<usize> = Vec::with_capacity(cfg.favourites);
            while favs.len() < cfg.favourites {
                let e = pick.sample(&mut rng);
                if !favs.contains(&e) {
                    favs.push(e);
                }
            }
            let mixed: Vec<f64> = (0..EVENTS_PER_MODALITY)
                .map(|e| {
                    let fav = if favs.contains(&e) { 1.0 / cfg.favourites as f64 } else { 0.0 };
                    0.5 * base[e] + 0.5 * fav
                })
                .collect();
            let draw = WeightedIndex::new(&mixed).unwrap();
            let n_hist = rng.gen_range(cfg.history_min..=cfg.history_max);
            let n_fut = rng.gen_range(cfg.future_min..=cfg.future_max);
            *history.events_mut(m) = (0..n_hist).map(|_| event_token(m, draw.sample(&mut rng))).collect();
            *future.events_mut(m) = (0..n_fut).map(|_| event_token(m, draw.sample(&mut rng))).collect();
        }
        let tabular = arch
            .tabular_means
            .iter()
            .map(|&mu| (0..cfg.tabular_dim).map(|_| mu + cell.sample(&mut rng)).collect())
            .collect();
        let labels = arch
            .bits
            .iter()
            .map(|&b| if rng.gen_bool(cfg.noise_rate) { !b } else { b })
            .collect();
        users.push(UserRecord {
            user_id,
            archetype_id: arch.id,
            history,
            future,
            tabular,
            labels,
        });
    }
    Ok((archetypes, users))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> CorpusConfig {
        CorpusConfig {
            n_users: 200,
            seed,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_corpus(&small(3)).unwrap();
        let b = generate_corpus(&small(3)).unwrap();
        assert_eq!(serde_json::to_string(&a.1).unwrap(), serde_json::to_string(&b.1).unwrap());
        let c = generate_corpus(&small(4)).unwrap();
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn zero_noise_labels_equal_archetype_bits() {
        let cfg = CorpusConfig {
            noise_rate: 0.0,
            ..small(1)
        };
        let (arch, users) = generate_corpus(&cfg).unwrap();
        for u in &users {
            assert_eq!(u.labels, arch[u.archetype_id].bits);
        }
    }

    #[test]
    fn archetype_invariants() {
        let (arch, users) = generate_corpus(&small(9)).unwrap();
        for a in &arch {
            for d in &a.event_dists {
                assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        for k in 0..9 {
            assert!(arch.iter().any(|a| a.bits[k]) && arch.iter().any(|a| !a.bits[k]), "bit {k} constant");
        }
        for u in &users {
            assert_eq!(u.tabular.len(), 4);
            assert!(u.tabular.iter().all(|r| r.len() == 4));
            for m in Modality::EVENTS {
                assert!((2..=5).contains(&u.history.events(m).len()));
                assert!((2..=4).contains(&u.future.events(m).len()));
            }
        }
    }

    #[test]
    fn rejects_bad_config() {
        assert!(generate_corpus(&CorpusConfig { n_archetypes: 0, ..small(1) }).is_err());
        assert!(generate_corpus(&CorpusConfig { n_users: 0, ..small(1) }).is_err());
    }
}
