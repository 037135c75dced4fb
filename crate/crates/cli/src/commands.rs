use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use maskbench::encoder::Vocab;
use maskbench::eval::{evaluate_all, make_tasks, EncoderEmbedder, EvalReport, TaskOutcome, RESULTS_HEADER};
use maskbench::masking::MaskScheduleState;
use maskbench::synthdata::{
    build_behavior_pairs, filter_hard, generate_corpus, qa_pipeline, read_jsonl, score_pairs, write_jsonl,
    BagEmbedder, CorpusManifest, Counts, Embedder, PairRecord, TemplateGenerator, UserRecord,
};
use maskbench::trainer::{
    load_checkpoint, loss_log_tsv, prepare_examples, save_checkpoint, smoothed_endpoints, Model, Trainer,
};
use maskbench::Strategy;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, PairSet};
use crate::report::{CompareReport, CompareRow, RowStatus};
use crate::{CliError, Result};

const USERS: &str = "users.jsonl";
const BEHAVIOR: &str = "behavior.jsonl";
const QA: &str = "qa.jsonl";
const CONFIG: &str = "config.toml";

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::Data(format!("writing {}: {e}", path.display())))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::Data(format!("creating {}: {e}", path.display())))
}

/// Refuses to reuse a non-empty directory unless `force` is set.
fn claim_dir(dir: &Path, marker: &str, force: bool) -> Result<()> {
    if dir.join(marker).exists() && !force {
        return Err(CliError::Usage(format!(
            "{} already holds output; pass --force to overwrite",
            dir.display()
        )));
    }
    mkdir(dir)
}

/// Users plus both pair sets, from disk or generated from the config.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub users: Vec<UserRecord>,
    pub behavior: Vec<PairRecord>,
    pub qa: Vec<PairRecord>,
    pub vocab: Vocab,
    pub skipped: usize,
}

impl Corpus {
    pub fn generate(cfg: &ExperimentConfig, with_qa: bool) -> Result<Self> {
        let (_, users) = generate_corpus(&cfg.corpus)?;
        let vocab = Vocab::builtin(cfg.corpus.tabular_features);
        let max_len = cfg.train.encoder.max_len;
        let b = build_behavior_pairs(&users, cfg.sample_k, cfg.seed, &vocab, max_len)?;
        let mut skipped = b.skipped;
        let qa = if with_qa {
            let out = qa_pipeline(
                &users,
                &TemplateGenerator::default(),
                &BagEmbedder::new(&users),
                &cfg.qa,
                &vocab,
                max_len,
            )?;
            skipped += out.skipped;
            out.pairs
        } else {
            vec![]
        };
        Ok(Self {
            users,
            behavior: b.pairs,
            qa,
            vocab,
            skipped,
        })
    }

    pub fn pairs(&self, which: PairSet) -> Vec<PairRecord> {
        match which {
            PairSet::Behavior => self.behavior.clone(),
            PairSet::Qa => self.qa.clone(),
            PairSet::All => self.behavior.iter().chain(&self.qa).cloned().collect(),
        }
    }
}

pub fn load_corpus(dir: &Path) -> Result<(CorpusManifest, Corpus)> {
    let manifest = CorpusManifest::read(dir)?;
    let read = |name: &str| -> Result<Vec<PairRecord>> {
        if manifest.files.iter().any(|f| f == name) {
            Ok(read_jsonl(&dir.join(name))?)
        } else {
            Ok(vec![])
        }
    };
    let users: Vec<UserRecord> = read_jsonl(&dir.join(USERS))?;
    if users.len() != manifest.counts.users {
        return Err(CliError::Data(format!(
            "{} lists {} users but {USERS} has {}",
            CorpusManifest::FILE,
            manifest.counts.users,
            users.len()
        )));
    }
    let corpus = Corpus {
        behavior: read(BEHAVIOR)?,
        qa: read(QA)?,
        vocab: manifest.vocab.clone(),
        skipped: manifest.counts.skipped,
        users,
    };
    Ok((manifest, corpus))
}

/// Writes a corpus directory: users, behavior pairs, optional QA pairs, manifest.
pub fn cmd_gen(cfg: &ExperimentConfig, out: &Path, with_qa: bool, force: bool) -> Result<CorpusManifest> {
    cfg.corpus.validate()?;
    claim_dir(out, CorpusManifest::FILE, force)?;
    let corpus = Corpus::generate(cfg, with_qa)?;
    write_jsonl(&out.join(USERS), &corpus.users)?;
    write_jsonl(&out.join(BEHAVIOR), &corpus.behavior)?;
    let mut files = vec![USERS.to_string(), BEHAVIOR.to_string()];
    if with_qa {
        write_jsonl(&out.join(QA), &corpus.qa)?;
        files.push(QA.to_string());
    }
    write(&out.join(CONFIG), &cfg.to_toml()?)?;
    let manifest = CorpusManifest {
        seed: cfg.seed,
        corpus: cfg.corpus.clone(),
        sample_k: cfg.sample_k,
        qa: with_qa.then(|| cfg.qa.clone()),
        counts: Counts {
            users: corpus.users.len(),
            behavior: corpus.behavior.len(),
            qa: corpus.qa.len(),
            skipped: corpus.skipped,
        },
        t_filter: with_qa.then_some(cfg.qa.t_filter),
        files,
        vocab: corpus.vocab,
    };
    manifest.write(out)?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config: maskbench::trainer::TrainConfig,
    pub loss_log: PathBuf,
    pub checkpoint: PathBuf,
    pub results: Vec<TaskOutcome>,
    pub mean_auc: Option<f64>,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub wall_seconds: f64,
    pub version: String,
}

fn progress(quiet: bool, msg: impl FnOnce() -> String) {
    if !quiet {
        eprintln!("{}", msg());
    }
}

/// Trains one strategy on `corpus` and writes its artifacts into `dir`.
fn run_strategy(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    strategy: Strategy,
    run_id: &str,
    dir: &Path,
    quiet: bool,
) -> Result<RunRecord> {
    let start = Instant::now();
    let mut tc = cfg.train.clone();
    tc.strategy = strategy;
    tc.encoder.vocab_size = corpus.vocab.len();
    tc.encoder.tabular_dim = cfg.corpus.tabular_dim;
    let pairs = corpus.pairs(cfg.pairs);
    let examples = prepare_examples(&pairs, &corpus.users, &corpus.vocab, &tc.encoder)?;
    let mut trainer = Trainer::new(tc.clone(), examples)?;
    while !trainer.is_done() {
        let r = trainer.step()?;
        let t = r.record.step;
        if t % 200 == 0 || t + 1 == tc.steps {
            progress(quiet, || format!("[{run_id}] step {t} loss {:.4} alpha {:.3}", r.record.loss, r.record.alpha));
        }
    }
    let history = &trainer.state.history;
    let loss_log = dir.join("loss.tsv");
    write(&loss_log, &loss_log_tsv(history))?;
    let checkpoint = dir.join("model.ckpt");
    save_checkpoint(&checkpoint, &trainer.state)?;
    let tasks = make_tasks(&corpus.users, cfg.seed, cfg.tasks.as_deref())?;
    let report = evaluate_all(trainer.model(), &corpus.users, &tasks, &corpus.vocab, &cfg.probe)?;
    write(&dir.join("results.tsv"), &(RESULTS_HEADER.to_string() + &report.tsv_rows()))?;
    let ends = smoothed_endpoints(history, cfg.smoothing_window);
    let record = RunRecord {
        run_id: run_id.to_string(),
        config: tc,
        loss_log,
        checkpoint,
        results: report.outcomes,
        mean_auc: report.mean_auc,
        initial_loss: ends.map(|e| e.0),
        final_loss: ends.map(|e| e.1),
        wall_seconds: start.elapsed().as_secs_f64(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let json = serde_json::to_string_pretty(&record).map_err(|e| CliError::Data(e.to_string()))?;
    write(&dir.join("run.json"), &(json + "\n"))?;
    Ok(record)
}

pub fn run_id(cfg: &ExperimentConfig) -> String {
    format!("{}-s{}-{}", cfg.train.strategy, cfg.seed, &cfg.hash()[..8])
}

/// Trains `cfg.train.strategy` on the corpus at `cfg.data`.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path, force: bool, quiet: bool) -> Result<RunRecord> {
    let data = cfg
        .data
        .as_deref()
        .ok_or_else(|| CliError::Usage("train needs a corpus directory (--data)".into()))?;
    let (_, corpus) = load_corpus(data)?;
    cfg.train.validate()?;
    claim_dir(out, "run.json", force)?;
    write(&out.join(CONFIG), &cfg.to_toml()?)?;
    run_strategy(cfg, &corpus, cfg.train.strategy, &run_id(cfg), out, quiet)
}

pub enum ProbeSource<'a> {
    Checkpoint(&'a Path),
    /// Freshly initialised weights for `cfg.train`.
    Untrained,
}

/// Probes frozen embeddings of every user in the corpus at `cfg.data`.
pub fn cmd_probe(cfg: &ExperimentConfig, source: ProbeSource<'_>) -> Result<EvalReport> {
    let data = cfg
        .data
        .as_deref()
        .ok_or_else(|| CliError::Usage("probe needs a corpus directory (--data)".into()))?;
    let (manifest, corpus) = load_corpus(data)?;
    let model = match source {
        ProbeSource::Checkpoint(p) => {
            if !p.exists() {
                return Err(CliError::Data(format!("checkpoint {} does not exist", p.display())));
            }
            load_checkpoint(p)?.model
        }
        ProbeSource::Untrained => {
            let mut enc = cfg.train.encoder.clone();
            enc.vocab_size = corpus.vocab.len();
            enc.tabular_dim = manifest.corpus.tabular_dim;
            let t = &cfg.train;
            Model::new(enc, MaskScheduleState::new(t.strategy, t.warmup, t.steps, t.norm_scale).map_err(maskbench::Error::from)?)?
        }
    };
    let tasks = make_tasks(&corpus.users, cfg.seed, cfg.tasks.as_deref())?;
    Ok(evaluate_all(&model, &corpus.users, &tasks, &corpus.vocab, &cfg.probe)?)
}

/// Runs every strategy in `cfg.strategies` under identical data and
/// hyperparameters and writes `report.tsv`, `report.json` and one loss curve
/// per strategy under `curves/`.
pub fn cmd_compare(cfg: &ExperimentConfig, out: &Path, force: bool, quiet: bool) -> Result<CompareReport> {
    if cfg.strategies.is_empty() {
        return Err(CliError::Usage("compare needs at least one strategy".into()));
    }
    let mut check = cfg.train.clone();
    for &s in &cfg.strategies {
        check.strategy = s;
        check.validate()?;
    }
    claim_dir(out, "report.tsv", force)?;
    write(&out.join(CONFIG), &cfg.to_toml()?)?;
    let corpus = match &cfg.data {
        Some(dir) => load_corpus(dir)?.1,
        None => Corpus::generate(cfg, cfg.pairs != PairSet::Behavior)?,
    };
    let task_names: Vec<String> = make_tasks(&corpus.users, cfg.seed, cfg.tasks.as_deref())?
        .into_iter()
        .map(|t| t.name)
        .collect();
    let curves = out.join("curves");
    mkdir(&curves)?;
    let hash = cfg.hash();
    let mut rows = Vec::with_capacity(cfg.strategies.len());
    for &s in &cfg.strategies {
        let dir = out.join("runs").join(s.tag());
        mkdir(&dir)?;
        let id = format!("{s}-s{}-{}", cfg.seed, &hash[..8]);
        let row = match run_strategy(cfg, &corpus, s, &id, &dir, quiet) {
            Ok(rec) => {
                fs::copy(&rec.loss_log, curves.join(format!("{s}.tsv")))
                    .map_err(|e| CliError::Data(format!("copying loss curve: {e}")))?;
                CompareRow {
                    strategy: s.tag().to_string(),
                    status: RowStatus::Ok,
                    task_auc: rec.results.iter().map(|o| o.result().map(|r| r.auc)).collect(),
                    avg_auc: rec.mean_auc,
                    initial_loss: rec.initial_loss,
                    final_loss: rec.final_loss,
                }
            }
            Err(e) => {
                progress(quiet, || format!("[{id}] failed: {e}"));
                CompareRow::failed(s.tag(), task_names.len(), e.to_string())
            }
        };
        rows.push(row);
    }
    let report = CompareReport {
        config_hash: hash,
        seed: cfg.seed,
        smoothing_window: cfg.smoothing_window,
        tasks: task_names,
        rows,
    };
    write(&out.join("report.tsv"), &report.to_tsv())?;
    write(&out.join("report.json"), &report.to_json())?;
    Ok(report)
}

/// Attaches a difficulty score to every pair in `pairs_path`. Embeddings come
/// from a checkpoint when given, else from bag-of-events counts.
pub fn cmd_score(cfg: &ExperimentConfig, pairs_path: &Path, checkpoint: Option<&Path>, out: &Path) -> Result<usize> {
    let data = cfg
        .data
        .as_deref()
        .ok_or_else(|| CliError::Usage("score needs the corpus directory (--data) for user records".into()))?;
    let (_, corpus) = load_corpus(data)?;
    let mut pairs: Vec<PairRecord> = read_jsonl(pairs_path)?;
    let model = checkpoint.map(load_checkpoint).transpose()?.map(|s| s.model);
    let bag = BagEmbedder::new(&corpus.users);
    let enc;
    let emb: &dyn Embedder = match &model {
        Some(m) => {
            enc = EncoderEmbedder::new(m, &corpus.vocab, &corpus.users);
            &enc
        }
        None => &bag,
    };
    score_pairs(&mut pairs, emb)?;
    write_jsonl(out, &pairs)?;
    Ok(pairs.len())
}

/// Keeps the scored pairs at or above `t_filter`.
pub fn cmd_filter(pairs_path: &Path, t_filter: f64, out: &Path) -> Result<(usize, usize)> {
    let pairs: Vec<PairRecord> = read_jsonl(pairs_path)?;
    let hard = filter_hard(&pairs, t_filter)?;
    write_jsonl(out, &hard)?;
    Ok((pairs.len(), hard.len()))
}
