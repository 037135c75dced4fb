//! Synthetic user corpora, behaviour and QA pairs, difficulty scoring.

mod corpus;
mod difficulty;
mod io;
mod pairs;
mod qa;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use corpus::{generate_corpus, Archetype, CorpusConfig};
pub use difficulty::{bag_of_events, difficulty_score, filter_hard, score_pairs, BagEmbedder, Embedder};
pub use io::{read_jsonl, write_jsonl, CorpusManifest, Counts};
pub use pairs::{aggregate_events, build_behavior_pairs, render_clauses, rewrite_answer, BehaviorPairs};
pub use qa::{extract_rules, qa_pipeline, QaConfig, QaGenerator, QaOutput, TemplateGenerator};

/// The six input slots of a user record, in template order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Bill,
    Mini,
    Spm,
    App,
    Search,
    Tabular,
}

impl Modality {
    pub const ALL: [Modality; 6] = [
        Modality::Bill,
        Modality::Mini,
        Modality::Spm,
        Modality::App,
        Modality::Search,
        Modality::Tabular,
    ];
    pub const EVENTS: [Modality; 5] = [
        Modality::Bill,
        Modality::Mini,
        Modality::Spm,
        Modality::App,
        Modality::Search,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn open_tag(self) -> &'static str {
        match self {
            Modality::Bill => "<bill>",
            Modality::Mini => "<minipro>",
            Modality::Spm => "<spm>",
            Modality::App => "<app>",
            Modality::Search => "<search>",
            Modality::Tabular => "<tabular>",
        }
    }

    pub fn close_tag(self) -> &'static str {
        match self {
            Modality::Bill => "</bill>",
            Modality::Mini => "</minipro>",
            Modality::Spm => "</spm>",
            Modality::App => "</app>",
            Modality::Search => "</search>",
            Modality::Tabular => "</tabular>",
        }
    }

    /// Prefix of this modality's event tokens, e.g. `bill` in `bill:coffee`.
    pub fn event_prefix(self) -> &'static str {
        match self {
            Modality::Bill => "bill",
            Modality::Mini => "mini",
            Modality::Spm => "spm",
            Modality::App => "app",
            Modality::Search => "search",
            Modality::Tabular => "tab",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Food,
    Travel,
    Entertainment,
    Finance,
    Shopping,
    Health,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Food,
        Category::Travel,
        Category::Entertainment,
        Category::Finance,
        Category::Shopping,
        Category::Health,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Food => "food",
            Category::Travel => "travel",
            Category::Entertainment => "entertainment",
            Category::Finance => "finance",
            Category::Shopping => "shopping",
            Category::Health => "health",
        }
    }

    pub fn token(self) -> String {
        format!("cat:{}", self.name())
    }

    pub fn from_token(tok: &str) -> Option<Category> {
        let name = tok.strip_prefix("cat:")?;
        Self::ALL.into_iter().find(|c| c.name() == name)
    }

    fn words(self) -> [&'static str; 4] {
        match self {
            Category::Food => ["coffee", "noodles", "bakery", "grocery"],
            Category::Travel => ["flight", "hotel", "metro", "taxi"],
            Category::Entertainment => ["movie", "concert", "game", "music"],
            Category::Finance => ["fund", "loan", "insurance", "transfer"],
            Category::Shopping => ["clothing", "shoes", "electronics", "cosmetics"],
            Category::Health => ["pharmacy", "clinic", "gym", "vitamins"],
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const EVENTS_PER_CATEGORY: usize = 4;
/// Distinct events per event modality.
pub const EVENTS_PER_MODALITY: usize = EVENTS_PER_CATEGORY * 6;

/// Token for local event `index` of an event modality.
pub fn event_token(m: Modality, index: usize) -> String {
    let cat = Category::ALL[index / EVENTS_PER_CATEGORY];
    format!("{}:{}", m.event_prefix(), cat.words()[index % EVENTS_PER_CATEGORY])
}

/// Inverse of [`event_token`]: the modality, local index and category.
pub fn parse_event(tok: &str) -> Option<(Modality, usize, Category)> {
    let (prefix, word) = tok.split_once(':')?;
    let m = Modality::EVENTS.into_iter().find(|m| m.event_prefix() == prefix)?;
    for (c, cat) in Category::ALL.into_iter().enumerate() {
        if let Some(w) = cat.words().iter().position(|&x| x == word) {
            return Some((m, c * EVENTS_PER_CATEGORY + w, cat));
        }
    }
    None
}

/// Event lists of one time window, oldest first.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Window {
    pub bill: Vec<String>,
    pub mini: Vec<String>,
    pub spm: Vec<String>,
    pub app: Vec<String>,
    pub search: Vec<String>,
}

impl Window {
    pub fn events(&self, m: Modality) -> &[String] {
        match m {
            Modality::Bill => &self.bill,
            Modality::Mini => &self.mini,
            Modality::Spm => &self.spm,
            Modality::App => &self.app,
            Modality::Search => &self.search,
            Modality::Tabular => &[],
        }
    }

    pub fn events_mut(&mut self, m: Modality) -> &mut Vec<String> {
        match m {
            Modality::Bill => &mut self.bill,
            Modality::Mini => &mut self.mini,
            Modality::Spm => &mut self.spm,
            Modality::App => &mut self.app,
            Modality::Search => &mut self.search,
            Modality::Tabular => panic!("tabular has no event list"),
        }
    }

    pub fn len(&self) -> usize {
        Modality::EVENTS.iter().map(|&m| self.events(m).len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every event in modality order.
    pub fn iter(&self) -> impl Iterator<Item = &String> {
        Modality::EVENTS.into_iter().flat_map(move |m| self.events(m).iter())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserRecord {
    pub user_id: usize,
    pub archetype_id: usize,
    pub history: Window,
    pub future: Window,
    /// `F × D` profile grid.
    pub tabular: Vec<Vec<f64>>,
    pub labels: Vec<bool>,
}

impl UserRecord {
    pub fn empty(user_id: usize, n_features: usize, dim: usize) -> Self {
        Self {
            user_id,
            archetype_id: 0,
            history: Window::default(),
            future: Window::default(),
            tabular: vec![vec![0.0; dim]; n_features],
            labels: vec![],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairKind {
    Behavior,
    Qa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Generated,
    FilteredHard,
    Rewritten,
}

/// One training pair. Field order is the on-disk order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub kind: PairKind,
    pub user_id: usize,
    pub user_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_text: Option<String>,
    pub answer_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<f64>,
    pub provenance: Provenance,
    pub labels: Vec<bool>,
}
