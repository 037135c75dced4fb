use super::*;
use crate::synthdata::{build_behavior_pairs, generate_corpus, CorpusConfig};

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        d_ff: 16,
        max_len: 64,
        ..EncoderConfig::default()
    }
}

fn examples(n: usize) -> Vec<Example> {
    let (_, users) = generate_corpus(&CorpusConfig {
        n_users: n,
        ..CorpusConfig::default()
    })
    .unwrap();
    let vocab = Vocab::builtin(4);
    let pairs = build_behavior_pairs(&users, 10, 7, &vocab, 64).unwrap();
    prepare_examples(&pairs.pairs, &users, &vocab, &tiny_encoder()).unwrap()
}

fn config(strategy: Strategy, steps: usize, warmup: usize, b: usize) -> TrainConfig {
    TrainConfig {
        strategy,
        batch_size: b,
        steps,
        warmup,
        encoder: tiny_encoder(),
        ..TrainConfig::default()
    }
}

fn losses(cfg: TrainConfig, ex: Vec<Example>) -> Vec<f64> {
    let mut t = Trainer::new(cfg, ex).unwrap();
    t.run_to(usize::MAX).unwrap();
    t.state.history.iter().map(|r| r.loss).collect()
}

#[test]
fn every_strategy_takes_a_finite_step() {
    let ex = examples(8);
    for s in Strategy::ALL {
        let mut t = Trainer::new(config(s, 3, 1, 2), ex.clone()).unwrap();
        let r = t.step().unwrap();
        assert!(r.record.loss.is_finite(), "{s}");
        assert!(r.record.grad_norm.is_finite() && r.record.grad_norm > 0.0, "{s}");
        assert!(r.unit_norm_error <= 1e-9, "{s}");
        assert_eq!(t.t(), 1);
    }
}

#[test]
fn runs_are_bit_reproducible() {
    let ex = examples(16);
    let a = losses(config(Strategy::Ggsm, 6, 2, 4), ex.clone());
    let b = losses(config(Strategy::Ggsm, 6, 2, 4), ex);
    assert_eq!(a, b);
}

#[test]
fn mask_choice_changes_the_loss_series() {
    let ex = examples(16);
    let two_layers = |s| {
        let mut c = config(s, 4, 1, 4);
        c.encoder.n_layers = 2;
        c
    };
    let a = losses(two_layers(Strategy::Causal), ex.clone());
    let b = losses(two_layers(Strategy::Bidirectional), ex);
    assert_ne!(a, b);
}

#[test]
fn ggsm_freezes_at_end_of_warmup() {
    let mut t = Trainer::new(config(Strategy::Ggsm, 8, 3, 4), examples(16)).unwrap();
    assert!(t.state.model.schedule.lagged_norms.is_none());
    t.step().unwrap();
    assert!(t.state.model.schedule.lagged_norms.is_some());
    t.run_to(2).unwrap();
    assert!(t.state.model.schedule.frozen_norms.is_none());
    t.step().unwrap();
    assert_eq!(t.t(), 3);
    let frozen = t.state.model.schedule.frozen_norms.clone().unwrap();
    let lagged = t.state.model.schedule.lagged_norms.clone();
    assert_eq!(frozen.len(), norm_len(64));
    assert!(frozen.iter().all(|g| *g >= 0.0));
    t.run_to(8).unwrap();
    assert_eq!(t.state.model.schedule.lagged_norms, lagged);
    assert_eq!(t.state.model.schedule.frozen_norms.as_ref(), Some(&frozen));
    let h = &t.state.history;
    let at_warm = h[3].mean_upper_bias.unwrap();
    let last = h[7].mean_upper_bias.unwrap();
    assert!(last >= at_warm);
    assert_eq!(h[3].alpha, 0.0);
    assert!((h[7].alpha - 0.8).abs() < 1e-12);
}

#[test]
fn seed_pass_runs_for_soft_hybrid_only_once() {
    let mut t = Trainer::new(config(Strategy::HybridSoft, 4, 0, 4), examples(16)).unwrap();
    t.step().unwrap();
    let after_first = t.state.model.schedule.lagged_norms.clone().unwrap();
    t.step().unwrap();
    assert_ne!(t.state.model.schedule.lagged_norms.unwrap(), after_first);
}

#[test]
fn zero_warmup_ggsm_freezes_from_seed_pass() {
    let mut t = Trainer::new(config(Strategy::Ggsm, 4, 0, 4), examples(16)).unwrap();
    t.step().unwrap();
    assert!(t.state.model.schedule.frozen_norms.is_some());
}

#[test]
fn zero_lr_step_leaves_params_unchanged() {
    let mut cfg = config(Strategy::Bidirectional, 2, 0, 4);
    cfg.lr = 0.0;
    let mut t = Trainer::new(cfg, examples(16)).unwrap();
    let before = t.model().params.flatten();
    t.step().unwrap();
    assert_eq!(t.model().params.flatten(), before);
}

#[test]
fn checkpoint_resume_continues_bit_identically() {
    let ex = examples(16);
    let cfg = config(Strategy::Ggsm, 10, 3, 4);
    let full = losses(cfg.clone(), ex.clone());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt");
    let mut t = Trainer::new(cfg, ex.clone()).unwrap();
    t.run_to(5).unwrap();
    save_checkpoint(&path, &t.state).unwrap();
    let state = load_checkpoint(&path).unwrap();
    assert_eq!(state, t.state);
    let mut resumed = Trainer::from_state(state, ex).unwrap();
    resumed.run_to(10).unwrap();
    let series: Vec<f64> = resumed.state.history.iter().map(|r| r.loss).collect();
    assert_eq!(series, full);
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt");
    let t = Trainer::new(config(Strategy::Causal, 2, 0, 2), examples(4)).unwrap();
    save_checkpoint(&path, &t.state).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, text.replacen("\"batch_size\":2", "\"batch_size\":3", 1)).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Data(_))));
    std::fs::write(&path, "hello\n{}").unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Parse { .. })));
}

#[test]
fn config_validation() {
    let ex = examples(4);
    assert!(Trainer::new(config(Strategy::Ggsm, 5, 5, 2), ex.clone()).is_err());
    assert!(Trainer::new(config(Strategy::Causal, 5, 0, 1), ex.clone()).is_err());
    assert!(Trainer::new(config(Strategy::Causal, 5, 0, 8), ex).is_err());
}

#[test]
fn schedules_and_log() {
    let cfg = config(Strategy::SchedulerCosine, 10, 0, 2);
    assert_eq!(cfg.lr_at(0), cfg.lr);
    assert!(cfg.lr_at(10).abs() < 1e-18);
    assert!((cfg.opening(5) - 0.5).abs() < 1e-12);
    assert_eq!(config(Strategy::Causal, 10, 0, 2).opening(7), 0.0);

    let mut t = Trainer::new(config(Strategy::Causal, 3, 0, 2), examples(4)).unwrap();
    t.run_to(3).unwrap();
    let log = loss_log_tsv(&t.state.history);
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "step\tloss\talpha_t\tmean_upper_bias\tlr");
    assert_eq!(lines.len(), 4);
    for l in &lines[1..] {
        let cols: Vec<&str> = l.split('\t').collect();
        assert_eq!(cols[2], "0");
        assert_eq!(cols[3], "-inf");
    }
    let (first, last) = smoothed_endpoints(&t.state.history, 2).unwrap();
    assert!(first.is_finite() && last.is_finite());
}

#[test]
fn short_run_reduces_loss() {
    let mut cfg = config(Strategy::Causal, 50, 0, 8);
    cfg.lr = 1e-2;
    cfg.margin = 1.0;
    let l = losses(cfg, examples(64));
    assert!(l[49] < l[0], "{} -> {}", l[0], l[49]);
}

#[test]
fn causal_user_embedding_ignores_later_text() {
    let ex = examples(4);
    let t = Trainer::new(config(Strategy::Causal, 2, 0, 2), ex.clone()).unwrap();
    let mut longer = ex[0].user.clone();
    longer.tokens.push(longer.tokens[1]);
    let a = t.model().embed(&[ex[0].user.clone()], Tower::User, Phase::Train).unwrap();
    let b = t.model().embed(&[longer], Tower::User, Phase::Train).unwrap();
    assert_eq!(a, b);
}
