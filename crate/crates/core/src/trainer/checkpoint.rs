use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::TrainState;
use crate::{Error, Result};

/// First token of the checkpoint header line.
pub const CHECKPOINT_MAGIC: &str = "MASKBENCH-CKPT";
const VERSION: &str = "v1";

/// Writes `MASKBENCH-CKPT v1 sha256=<hex>` followed by the JSON state.
pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    let body = serde_json::to_string(state).map_err(|e| Error::Data(e.to_string()))?;
    let digest = hex::encode(Sha256::digest(body.as_bytes()));
    let text = format!("{CHECKPOINT_MAGIC} {VERSION} sha256={digest}\n{body}\n");
    fs::write(path, text).map_err(Error::io(format!("writing {}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let text = fs::read_to_string(path).map_err(Error::io(format!("reading {}", path.display())))?;
    let bad = |msg: String| Error::Parse {
        path: path.display().to_string(),
        line: 1,
        msg,
    };
    let (header, body) = text.split_once('\n').ok_or_else(|| bad("missing header line".into()))?;
    let body = body.strip_suffix('\n').unwrap_or(body);
    let mut parts = header.split(' ');
    if parts.next() != Some(CHECKPOINT_MAGIC) {
        return Err(bad("not a checkpoint file".into()));
    }
    match parts.next() {
        Some(VERSION) => {}
        v => return Err(bad(format!("unsupported checkpoint version {v:?}"))),
    }
    let want = parts
        .next()
        .and_then(|p| p.strip_prefix("sha256="))
        .ok_or_else(|| bad("header has no checksum".into()))?;
    let got = hex::encode(Sha256::digest(body.as_bytes()));
    if got != want {
        return Err(Error::Data(format!("{}: checksum mismatch (file corrupted?)", path.display())));
    }
    serde_json::from_str(body).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line() + 1,
        msg: e.to_string(),
    })
}
