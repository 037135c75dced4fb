use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{CorpusConfig, QaConfig};
use crate::encoder::Vocab;
use crate::{Error, Result};

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(Error::io(format!("creating {}", path.display())))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(w, "{line}").map_err(Error::io(format!("writing {}", path.display())))?;
    }
    w.flush().map_err(Error::io(format!("writing {}", path.display())))
}

/// Reads records written by [`write_jsonl`]; a malformed line is reported
/// with its 1-based line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(Error::io(format!("opening {}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(Error::io(format!("reading {}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Counts {
    pub users: usize,
    pub behavior: usize,
    pub qa: usize,
    pub skipped: usize,
}

/// Everything needed to regenerate a corpus directory byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub sample_k: usize,
    pub qa: Option<QaConfig>,
    pub counts: Counts,
    pub t_filter: Option<f64>,
    pub files: Vec<String>,
    pub vocab: Vocab,
}

impl CorpusManifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))?;
        let path = dir.join(Self::FILE);
        fs::write(&path, text + "\n").map_err(Error::io(format!("writing {}", path.display())))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(Self::FILE);
        let text = fs::read_to_string(&path).map_err(Error::io(format!("reading {}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            msg: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{PairKind, PairRecord, Provenance};

    fn pair(i: usize) -> PairRecord {
        PairRecord {
            kind: PairKind::Qa,
            user_id: i,
            user_text: "<bill> </bill> <USER>".into(),
            query_text: Some("will this user do cat:food next month ?".into()),
            answer_text: "no cat:food".into(),
            difficulty: Some(0.1 * i as f64 + 1e-17),
            provenance: Provenance::Generated,
            labels: vec![true, false, true],
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        let recs: Vec<_> = (0..5).map(pair).collect();
        write_jsonl(&path, &recs).unwrap();
        assert_eq!(read_jsonl::<PairRecord>(&path).unwrap(), recs);
    }

    #[test]
    fn empty_file_is_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.jsonl");
        fs::write(&path, "").unwrap();
        assert!(read_jsonl::<PairRecord>(&path).unwrap().is_empty());
    }

    #[test]
    fn truncated_line_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        write_jsonl(&path, &[pair(0), pair(1)]).unwrap();
        let mut text = fs::read_to_string(&path).unwrap();
        text.truncate(text.len() - 10);
        fs::write(&path, text).unwrap();
        match read_jsonl::<PairRecord>(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
