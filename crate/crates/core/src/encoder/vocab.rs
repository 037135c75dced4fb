use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::synthdata::{event_token, Category, Modality, UserRecord, EVENTS_PER_MODALITY};
use crate::{Error, Result};

pub const USER: &str = "<USER>";
pub const EOS: &str = "<EOS>";
pub const INSTRUCTION: &str = "Instruction:";
pub const QUERY_WORDS: [&str; 7] = ["will", "this", "user", "do", "next", "month", "?"];
pub const MAX_COUNT: usize = 5;
pub const TAB_BUCKETS: usize = 4;
const TAB_THRESHOLDS: [f64; TAB_BUCKETS - 1] = [-0.5, 0.0, 0.5];

pub fn count_token(n: usize) -> String {
    format!("x{}", n.clamp(1, MAX_COUNT))
}

/// Bucket token for tabular feature row `f`, from the row mean.
pub fn tabular_token(f: usize, row: &[f64]) -> String {
    let mean = row.iter().sum::<f64>() / row.len().max(1) as f64;
    let b = TAB_THRESHOLDS.iter().filter(|&&t| mean >= t).count();
    format!("tab:f{f}:b{b}")
}

/// Closed word-level vocabulary: every whitespace-separated token is one id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// The built-in vocabulary for corpora with `tabular_features` rows.
    pub fn builtin(tabular_features: usize) -> Self {
        let mut t: Vec<String> = vec![USER.into(), EOS.into()];
        for m in Modality::ALL {
            t.push(m.open_tag().into());
            t.push(m.close_tag().into());
        }
        t.push(INSTRUCTION.into());
        t.extend(QUERY_WORDS.iter().map(|w| w.to_string()));
        t.push("yes".into());
        t.push("no".into());
        t.extend(Category::ALL.iter().map(|c| c.token()));
        t.extend((1..=MAX_COUNT).map(count_token));
        for m in Modality::EVENTS {
            t.extend((0..EVENTS_PER_MODALITY).map(|i| event_token(m, i)));
        }
        for f in 0..tabular_features {
            t.extend((0..TAB_BUCKETS).map(|b| format!("tab:f{f}:b{b}")));
        }
        t.into()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, tok: &str) -> Result<usize> {
        self.index
            .get(tok)
            .copied()
            .ok_or_else(|| Error::Data(format!("token {tok:?} is not in the vocabulary")))
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModalitySpan {
    pub modality: Modality,
    /// Index of the opening delimiter.
    pub open: usize,
    /// Index of the closing delimiter.
    pub close: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
    pub user_pos: Option<usize>,
    pub eos_pos: Option<usize>,
    pub modality_spans: Vec<ModalitySpan>,
    pub truncated: bool,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Index of the last closing delimiter, i.e. the end of the user segment.
    pub fn user_segment_end(&self) -> Option<usize> {
        self.modality_spans.last().map(|s| s.close)
    }
}

/// Renders a user and optional query as
/// `<bill> … </bill> … <tabular> … </tabular> [Instruction: q] <USER>`.
///
/// When the result would exceed `max_len`, the oldest events are dropped,
/// always from the event modality currently holding the most.
pub fn render_template(user: &UserRecord, query: Option<&str>, vocab: &Vocab, max_len: usize) -> Result<TokenSequence> {
    let query_ids = match query {
        Some(q) => {
            let ids = vocab.encode(q)?;
            if ids.is_empty() {
                return Err(Error::Data("empty query".into()));
            }
            let mut v = vec![vocab.id(INSTRUCTION)?];
            v.extend(ids);
            v
        }
        None => vec![],
    };
    let mut events: Vec<Vec<usize>> = Modality::EVENTS
        .iter()
        .map(|&m| user.history.events(m).iter().map(|e| vocab.id(e)).collect())
        .collect::<Result<_>>()?;
    let tab: Vec<usize> = user
        .tabular
        .iter()
        .enumerate()
        .map(|(f, row)| vocab.id(&tabular_token(f, row)))
        .collect::<Result<_>>()?;

    let fixed = 2 * Modality::ALL.len() + tab.len() + query_ids.len() + 1;
    let mut n_events: usize = events.iter().map(Vec::len).sum();
    let mut truncated = false;
    while fixed + n_events > max_len {
        if n_events == 0 {
            return Err(Error::Data(format!(
                "user {} cannot fit in {max_len} tokens even with no events",
                user.user_id
            )));
        }
        let (longest, _) = events
            .iter()
            .enumerate()
            .rev()
            .max_by_key(|(_, e)| e.len())
            .unwrap();
        events[longest].remove(0);
        n_events -= 1;
        truncated = true;
    }

    let mut tokens = Vec::with_capacity(fixed + n_events);
    let mut spans = Vec::with_capacity(6);
    for m in Modality::ALL {
        let open = tokens.len();
        tokens.push(vocab.id(m.open_tag())?);
        match m {
            Modality::Tabular => tokens.extend(&tab),
            _ => tokens.extend(&events[m.index()]),
        }
        tokens.push(vocab.id(m.close_tag())?);
        spans.push(ModalitySpan {
            modality: m,
            open,
            close: tokens.len() - 1,
        });
    }
    tokens.extend(query_ids);
    tokens.push(vocab.id(USER)?);
    Ok(TokenSequence {
        user_pos: Some(tokens.len() - 1),
        tokens,
        eos_pos: None,
        modality_spans: spans,
        truncated,
    })
}

/// Renders answer text followed by `<EOS>`, keeping the first
/// `max_len − 1` answer tokens when too long.
pub fn render_answer(answer: &str, vocab: &Vocab, max_len: usize) -> Result<TokenSequence> {
    let mut tokens = vocab.encode(answer)?;
    if tokens.is_empty() {
        return Err(Error::Data("empty answer".into()));
    }
    if max_len < 2 {
        return Err(Error::Config(format!("max_len {max_len} leaves no room for an answer")));
    }
    let truncated = tokens.len() > max_len - 1;
    tokens.truncate(max_len - 1);
    tokens.push(vocab.id(EOS)?);
    Ok(TokenSequence {
        eos_pos: Some(tokens.len() - 1),
        tokens,
        user_pos: None,
        modality_spans: vec![],
        truncated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::builtin(0)
    }

    #[test]
    fn empty_user_renders_delimiters_and_anchor() {
        let u = UserRecord::empty(0, 0, 4);
        let s = render_template(&u, None, &vocab(), 128).unwrap();
        assert_eq!(s.len(), 13);
        assert_eq!(s.user_pos, Some(12));
        assert_eq!(s.tokens[12], vocab().id(USER).unwrap());
        assert!(!s.truncated);
    }

    #[test]
    fn event_sits_inside_its_span() {
        let mut u = UserRecord::empty(0, 0, 4);
        u.history.bill.push("bill:coffee".into());
        let v = vocab();
        let s = render_template(&u, None, &v, 128).unwrap();
        let id = v.id("bill:coffee").unwrap();
        let pos = s.tokens.iter().position(|&t| t == id).unwrap();
        let span = s.modality_spans[0];
        assert_eq!(span.modality, Modality::Bill);
        assert!(span.open < pos && pos < span.close);
        assert_eq!(render_template(&u, None, &v, 128).unwrap(), s);
    }

    #[test]
    fn query_goes_before_anchor() {
        let u = UserRecord::empty(0, 0, 4);
        let v = vocab();
        let s = render_template(&u, Some("will this user do cat:food next month ?"), &v, 128).unwrap();
        assert_eq!(s.len(), 13 + 9);
        assert_eq!(v.token(s.tokens[12]), INSTRUCTION);
        assert_eq!(s.user_pos, Some(21));
        assert!(render_template(&u, Some("bogus"), &v, 128).is_err());
    }

    #[test]
    fn truncation_drops_oldest_from_longest() {
        let mut u = UserRecord::empty(0, 0, 4);
        u.history.bill = vec!["bill:coffee".into(), "bill:taxi".into(), "bill:gym".into()];
        u.history.app = vec!["app:movie".into()];
        let v = vocab();
        let s = render_template(&u, None, &v, 15).unwrap();
        assert!(s.truncated);
        assert_eq!(s.len(), 15);
        let text = v.decode(&s.tokens);
        assert!(!text.contains("bill:coffee"));
        assert!(text.contains("bill:gym"));
        assert!(text.contains("app:movie"));
        assert!(render_template(&UserRecord::empty(0, 0, 4), None, &v, 12).is_err());
    }

    #[test]
    fn answers() {
        let v = vocab();
        let s = render_answer("yes", &v, 128).unwrap();
        assert_eq!(s.tokens, vec![v.id("yes").unwrap(), v.id(EOS).unwrap()]);
        assert_eq!(s.eos_pos, Some(1));
        assert!(render_answer("", &v, 128).is_err());
        let long = vec!["yes"; 20].join(" ");
        let s = render_answer(&long, &v, 10).unwrap();
        assert_eq!(s.len(), 10);
        assert_eq!(v.token(*s.tokens.last().unwrap()), EOS);
        assert!(s.truncated);
    }

    #[test]
    fn tabular_buckets() {
        assert_eq!(tabular_token(0, &[-1.0, -1.0]), "tab:f0:b0");
        assert_eq!(tabular_token(1, &[-0.5]), "tab:f1:b1");
        assert_eq!(tabular_token(2, &[0.2]), "tab:f2:b2");
        assert_eq!(tabular_token(3, &[0.9, 0.1]), "tab:f3:b3");
    }

    #[test]
    fn builtin_vocab_is_unique() {
        let v = Vocab::builtin(4);
        let mut seen = std::collections::HashSet::new();
        for t in v.tokens() {
            assert!(seen.insert(t.clone()), "duplicate {t}");
        }
        assert_eq!(v.len(), 2 + 12 + 1 + 7 + 2 + 6 + 5 + 120 + 16);
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<Vocab>(&json).unwrap(), v);
    }
}
