use super::{EncoderConfig, ModelParams, LN_EPS};
use crate::masking::{gate_log_weights, AttentionMask};
use crate::synthdata::{parse_event, Modality, UserRecord, EVENTS_PER_MODALITY};
use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::{Error, Result};

/// Rows contributed by the modality prefix.
pub const PREFIX_ROWS: usize = 6;

/// Raw inputs of the modality encoders for one user.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixInput {
    /// Local event indices per event modality.
    pub events: Vec<Vec<usize>>,
    /// Column means of the tabular grid (`D` values).
    pub tabular_mean: Vec<f64>,
}

impl PrefixInput {
    pub fn from_user(user: &UserRecord, tabular_dim: usize) -> Result<Self> {
        let events = Modality::EVENTS
            .iter()
            .map(|&m| {
                user.history
                    .events(m)
                    .iter()
                    .map(|e| match parse_event(e) {
                        Some((em, i, _)) if em == m => Ok(i),
                        _ => Err(Error::Data(format!("user {}: bad {m:?} event {e:?}", user.user_id))),
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        let mut tabular_mean = vec![0.0; tabular_dim];
        for row in &user.tabular {
            if row.len() != tabular_dim {
                return Err(Error::Data(format!(
                    "user {}: tabular row has {} cells, expected {tabular_dim}",
                    user.user_id,
                    row.len()
                )));
            }
            for (m, v) in tabular_mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        let n = user.tabular.len().max(1) as f64;
        tabular_mean.iter_mut().for_each(|m| *m /= n);
        Ok(Self { events, tabular_mean })
    }
}

/// Row layout of one sequence: `[global?][prefix × 6?][tokens]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeqLayout {
    pub global: bool,
    pub prefix: bool,
    pub n_tokens: usize,
}

impl SeqLayout {
    /// Row of token 0.
    pub fn offset(&self) -> usize {
        self.global as usize + if self.prefix { PREFIX_ROWS } else { 0 }
    }

    pub fn len(&self) -> usize {
        self.offset() + self.n_tokens
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy)]
pub struct SeqInput<'a> {
    pub tokens: &'a [usize],
    pub prefix: Option<&'a PrefixInput>,
    pub global: bool,
    pub mask: &'a AttentionMask,
}

impl SeqInput<'_> {
    pub fn layout(&self) -> SeqLayout {
        SeqLayout {
            global: self.global,
            prefix: self.prefix.is_some(),
            n_tokens: self.tokens.len(),
        }
    }
}

/// Hidden states of several sequences stacked row-wise.
pub struct PackedHidden {
    /// Final-layer hidden states, `N × d`.
    pub hidden: Var,
    /// Residual stream entering the last block (the input embeddings when
    /// there are no blocks). Its gradient drives gradient-guided masks.
    pub probe: Var,
    pub layouts: Vec<SeqLayout>,
    pub starts: Vec<usize>,
}

impl PackedHidden {
    /// Packed row of token `pos` of sequence `seq`.
    pub fn token_row(&self, seq: usize, pos: usize) -> usize {
        self.starts[seq] + self.layouts[seq].offset() + pos
    }
}

/// Hidden states of a single sequence.
pub struct HiddenStates {
    pub hidden: Var,
    pub probe: Var,
    pub layout: SeqLayout,
}

/// Sinusoidal position encoding of `pos` in `d` dimensions.
pub fn sinusoid(pos: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|k| {
            let freq = 1.0 / 10000f64.powf((k / 2 * 2) as f64 / d as f64);
            let a = pos as f64 * freq;
            if k % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    Ok(tape.add_row(y, b)?)
}

/// Forward pass over a batch of sequences sharing one set of parameters.
///
/// Each sequence gets its own mask and its own positions starting at 0;
/// rows never attend across sequences. With `gate` on, the MLP gate's
/// log-weights are added to every sequence's attention logits.
pub fn forward_packed(
    tape: &mut Tape,
    p: &ModelParams<Var>,
    cfg: &EncoderConfig,
    seqs: &[SeqInput<'_>],
    gate: bool,
) -> Result<PackedHidden> {
    if seqs.is_empty() {
        return Err(Error::Data("forward over an empty batch".into()));
    }
    let d = cfg.d_model;
    let layouts: Vec<SeqLayout> = seqs.iter().map(|s| s.layout()).collect();
    for (s, lay) in seqs.iter().zip(&layouts) {
        if s.tokens.is_empty() || s.tokens.len() > cfg.max_len {
            return Err(Error::Data(format!(
                "sequence of {} tokens outside 1..={}",
                s.tokens.len(),
                cfg.max_len
            )));
        }
        if let Some(&bad) = s.tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::Data(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
        }
        if s.mask.dim() != lay.len() {
            return Err(TensorError::Shape {
                op: "forward",
                left: vec![s.mask.dim(), s.mask.dim()],
                right: vec![lay.len()],
            }
            .into());
        }
    }

    // Source rows: all tokens, then per-modality prefix rows, then the global token.
    let all_ids: Vec<usize> = seqs.iter().flat_map(|s| s.tokens.iter().copied()).collect();
    let mut parts = vec![tape.gather(p.tok_emb, &all_ids)?];
    let prefixed: Vec<&PrefixInput> = seqs.iter().filter_map(|s| s.prefix).collect();
    let n_pre = prefixed.len();
    if n_pre > 0 {
        for (mi, _) in Modality::EVENTS.iter().enumerate() {
            let mut ids = Vec::new();
            let mut lens = Vec::with_capacity(n_pre);
            for pre in &prefixed {
                let ev = &pre.events[mi];
                if ev.is_empty() {
                    ids.push(EVENTS_PER_MODALITY);
                    lens.push(1);
                } else {
                    ids.extend(ev);
                    lens.push(ev.len());
                }
            }
            let rows = tape.gather(p.event_emb[mi], &ids)?;
            let pooled = tape.mean_rows_packed(rows, &lens)?;
            parts.push(linear(tape, pooled, p.adapter_w[mi], p.adapter_b[mi])?);
        }
        let tab: Vec<f64> = prefixed.iter().flat_map(|pre| pre.tabular_mean.iter().copied()).collect();
        if tab.len() != n_pre * cfg.tabular_dim {
            return Err(Error::Data("tabular prefix width differs from tabular_dim".into()));
        }
        let tab = tape.constant(vec![n_pre, cfg.tabular_dim], tab)?;
        parts.push(linear(tape, tab, p.adapter_w[5], p.adapter_b[5])?);
    }
    let global_row = all_ids.len() + PREFIX_ROWS * n_pre;
    if seqs.iter().any(|s| s.global) {
        parts.push(p.global_tok);
    }
    let source = tape.concat_rows(&parts)?;

    let total: usize = layouts.iter().map(|l| l.len()).sum();
    let mut perm = Vec::with_capacity(total);
    let mut pos_enc = Vec::with_capacity(total * d);
    let mut starts = Vec::with_capacity(seqs.len());
    let (mut tok_base, mut pre_idx) = (0, 0);
    for (s, lay) in seqs.iter().zip(&layouts) {
        starts.push(perm.len());
        if s.global {
            perm.push(global_row);
        }
        if s.prefix.is_some() {
            for m in 0..PREFIX_ROWS {
                perm.push(all_ids.len() + m * n_pre + pre_idx);
            }
            pre_idx += 1;
        }
        perm.extend(tok_base..tok_base + s.tokens.len());
        tok_base += s.tokens.len();
        for pos in 0..lay.len() {
            pos_enc.extend(sinusoid(pos, d).into_iter().map(|v| v * cfg.pos_scale));
        }
    }
    let x = tape.gather(source, &perm)?;
    let pe = tape.constant(vec![total, d], pos_enc)?;
    let x = tape.add(x, pe)?;

    let lens: Vec<usize> = layouts.iter().map(|l| l.len()).collect();
    let bias = if gate {
        let log_w = gate_log_weights(tape, x, &p.gate)?;
        Some(tape.upper_row_broadcast_packed(log_w, &lens)?)
    } else {
        None
    };
    let masks: Vec<&AttentionMask> = seqs.iter().map(|s| s.mask).collect();

    let mut h = x;
    let mut probe = x;
    for (li, l) in p.layers.iter().enumerate() {
        if li + 1 == p.layers.len() {
            probe = h;
        }
        let a = tape.layer_norm(h, l.ln1_g, l.ln1_b, LN_EPS)?;
        let q = linear(tape, a, l.wq, l.bq)?;
        let k = linear(tape, a, l.wk, l.bk)?;
        let v = linear(tape, a, l.wv, l.bv)?;
        let att = tape.attention_packed(q, k, v, &masks, bias, cfg.n_heads)?;
        let o = linear(tape, att, l.wo, l.bo)?;
        h = tape.add(h, o)?;
        let f = tape.layer_norm(h, l.ln2_g, l.ln2_b, LN_EPS)?;
        let f = linear(tape, f, l.w1, l.b1)?;
        let f = tape.gelu(f)?;
        let f = linear(tape, f, l.w2, l.b2)?;
        h = tape.add(h, f)?;
    }
    Ok(PackedHidden {
        hidden: h,
        probe,
        layouts,
        starts,
    })
}

/// Forward pass over one sequence.
pub fn forward(
    tape: &mut Tape,
    p: &ModelParams<Var>,
    cfg: &EncoderConfig,
    seq: SeqInput<'_>,
    gate: bool,
) -> Result<HiddenStates> {
    let packed = forward_packed(tape, p, cfg, &[seq], gate)?;
    Ok(HiddenStates {
        hidden: packed.hidden,
        probe: packed.probe,
        layout: packed.layouts[0],
    })
}

/// Unit-normalised rows of `packed.hidden` at `(sequence, token position)`
/// anchors, as a `B × d` var.
pub fn gather_embeddings(tape: &mut Tape, packed: &PackedHidden, anchors: &[(usize, usize)]) -> Result<Var> {
    let rows: Vec<usize> = anchors.iter().map(|&(s, pos)| packed.token_row(s, pos)).collect();
    let picked = tape.gather(packed.hidden, &rows)?;
    tape.l2_normalize_rows(picked).map_err(|e| match e {
        TensorError::NonFinite(m) => Error::Numeric(format!("degenerate embedding: {m}")),
        e => e.into(),
    })
}

/// `hidden[anchor] / ‖hidden[anchor]‖₂` for an `L × d` hidden-state tensor.
pub fn extract_embedding(hidden: &Tensor, anchor: usize) -> Result<Vec<f64>> {
    let (rows, _) = hidden.dims2();
    if anchor >= rows {
        return Err(Error::Data(format!("anchor {anchor} outside {rows} hidden rows")));
    }
    let row = hidden.row(anchor);
    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Numeric(format!("degenerate embedding at row {anchor} (norm {n})")));
    }
    Ok(row.iter().map(|v| v / n).collect())
}

/// The six prefix rows (five pooled event modalities and the tabular
/// grid, each through its adapter) for one user.
pub fn encode_modality_prefix(prefix: &PrefixInput, params: &ModelParams, cfg: &EncoderConfig) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape)?;
    let mut rows = Vec::with_capacity(PREFIX_ROWS);
    for (mi, ev) in prefix.events.iter().enumerate() {
        let ids = if ev.is_empty() { vec![EVENTS_PER_MODALITY] } else { ev.clone() };
        let g = tape.gather(p.event_emb[mi], &ids)?;
        let m = tape.mean_rows(g)?;
        rows.push(linear(&mut tape, m, p.adapter_w[mi], p.adapter_b[mi])?);
    }
    let tab = tape.constant(vec![1, cfg.tabular_dim], prefix.tabular_mean.clone())?;
    rows.push(linear(&mut tape, tab, p.adapter_w[5], p.adapter_b[5])?);
    let out = tape.concat_rows(&rows)?;
    Ok(tape.to_tensor(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{bidirectional_mask, causal_mask};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(n_layers: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size: 20,
            d_model: 8,
            n_heads: 2,
            n_layers,
            d_ff: 16,
            max_len: 32,
            ..EncoderConfig::default()
        }
    }

    fn hidden(params: &ModelParams, c: &EncoderConfig, tokens: &[usize], mask: &AttentionMask, prefix: Option<&PrefixInput>) -> Tensor {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape).unwrap();
        let seq = SeqInput {
            tokens,
            prefix,
            global: false,
            mask,
        };
        let h = forward(&mut tape, &p, c, seq, false).unwrap();
        tape.to_tensor(h.hidden)
    }

    #[test]
    fn causal_mask_hides_future_tokens() {
        let c = cfg(2);
        let params = ModelParams::init(&c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base: Vec<usize> = (0..7).map(|_| rng.gen_range(0..20)).collect();
        let mut changed = base.clone();
        changed[6] = (base[6] + 1) % 20;
        let m = causal_mask(7).unwrap();
        let a = hidden(&params, &c, &base, &m, None);
        let b = hidden(&params, &c, &changed, &m, None);
        for i in 0..6 {
            for (x, y) in a.row(i).iter().zip(b.row(i)) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
        let m = bidirectional_mask(7).unwrap();
        let a = hidden(&params, &c, &base, &m, None);
        let b = hidden(&params, &c, &changed, &m, None);
        let moved = (0..6).any(|i| a.row(i).iter().zip(b.row(i)).any(|(x, y)| (x - y).abs() > 1e-6));
        assert!(moved);
    }

    #[test]
    fn empty_stack_is_embedding_plus_position() {
        let c = cfg(0);
        let params = ModelParams::init(&c).unwrap();
        let h = hidden(&params, &c, &[3, 5], &causal_mask(2).unwrap(), None);
        for (pos, &tok) in [3usize, 5].iter().enumerate() {
            let pe = sinusoid(pos, 8);
            for k in 0..8 {
                let want = params.tok_emb.row(tok)[k] + c.pos_scale * pe[k];
                assert_eq!(h.row(pos)[k], want);
            }
        }
    }

    #[test]
    fn prefix_adds_six_rows_and_mask_must_match() {
        let c = cfg(1);
        let params = ModelParams::init(&c).unwrap();
        let prefix = PrefixInput {
            events: vec![vec![0, 1], vec![], vec![3], vec![], vec![]],
            tabular_mean: vec![0.1, 0.2, 0.3, 0.4],
        };
        let h = hidden(&params, &c, &[1, 2, 3], &causal_mask(9).unwrap(), Some(&prefix));
        assert_eq!(h.dims2(), (9, 8));

        let mut tape = Tape::new();
        let p = params.bind(&mut tape).unwrap();
        let m = causal_mask(3).unwrap();
        let seq = SeqInput {
            tokens: &[1, 2, 3],
            prefix: Some(&prefix),
            global: false,
            mask: &m,
        };
        assert!(matches!(forward(&mut tape, &p, &c, seq, false), Err(Error::Tensor(TensorError::Shape { .. }))));
    }

    #[test]
    fn packed_matches_separate_forwards() {
        let c = cfg(2);
        let params = ModelParams::init(&c).unwrap();
        let prefix = PrefixInput {
            events: vec![vec![4], vec![], vec![], vec![2, 2], vec![]],
            tabular_mean: vec![0.0, 1.0, -1.0, 0.5],
        };
        let m1 = causal_mask(10).unwrap();
        let m2 = bidirectional_mask(3).unwrap();
        let t1 = [1, 2, 3, 4];
        let t2 = [7, 8, 9];
        let mut tape = Tape::new();
        let p = params.bind(&mut tape).unwrap();
        let seqs = [
            SeqInput {
                tokens: &t1,
                prefix: Some(&prefix),
                global: false,
                mask: &m1,
            },
            SeqInput {
                tokens: &t2,
                prefix: None,
                global: false,
                mask: &m2,
            },
        ];
        let packed = forward_packed(&mut tape, &p, &c, &seqs, false).unwrap();
        let all = tape.to_tensor(packed.hidden);
        let a = hidden(&params, &c, &t1, &m1, Some(&prefix));
        let b = hidden(&params, &c, &t2, &m2, None);
        for r in 0..10 {
            for (x, y) in all.row(r).iter().zip(a.row(r)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        for r in 0..3 {
            for (x, y) in all.row(10 + r).iter().zip(b.row(r)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        assert_eq!(packed.token_row(1, 2), 12);
    }

    #[test]
    fn extract_embedding_normalises() {
        let h = Tensor::new(vec![2, 3], vec![1.0, 1.0, 1.0, 3.0, 4.0, 0.0]).unwrap();
        assert_eq!(extract_embedding(&h, 1).unwrap(), vec![0.6, 0.8, 0.0]);
        let n: f64 = extract_embedding(&h, 0).unwrap().iter().map(|v| v * v).sum();
        assert!((n.sqrt() - 1.0).abs() <= 1e-12);
        assert!(extract_embedding(&h, 2).is_err());
        let z = Tensor::zeros(vec![1, 3]);
        assert!(matches!(extract_embedding(&z, 0), Err(Error::Numeric(_))));
    }

    #[test]
    fn modality_prefix_pools_events() {
        let c = cfg(1);
        let params = ModelParams::init(&c).unwrap();
        let one = PrefixInput {
            events: vec![vec![5], vec![], vec![], vec![], vec![]],
            tabular_mean: vec![0.0; 4],
        };
        let two = PrefixInput {
            events: vec![vec![5, 5], vec![], vec![], vec![], vec![]],
            ..one.clone()
        };
        let a = encode_modality_prefix(&one, &params, &c).unwrap();
        let b = encode_modality_prefix(&two, &params, &c).unwrap();
        assert_eq!(a.dims2(), (6, 8));
        assert_eq!(a, b);
        // the empty modalities all see their null row through their own adapter
        let null = |m: usize| -> Vec<f64> {
            let e = params.event_emb[m].row(EVENTS_PER_MODALITY);
            let w = &params.adapter_w[m];
            (0..8).map(|j| (0..8).map(|k| e[k] * w.row(k)[j]).sum::<f64>()).collect()
        };
        for m in 1..5 {
            for (x, y) in a.row(m).iter().zip(null(m)) {
                assert!((x - y).abs() < 1e-15);
            }
        }
        let ev = params.event_emb[0].row(5);
        for j in 0..8 {
            let want: f64 = (0..8).map(|k| ev[k] * params.adapter_w[0].row(k)[j]).sum();
            assert!((a.row(0)[j] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_bad_sequences() {
        let c = cfg(1);
        let params = ModelParams::init(&c).unwrap();
        let mut tape = Tape::new();
        let p = params.bind(&mut tape).unwrap();
        let m = causal_mask(2).unwrap();
        let seq = SeqInput {
            tokens: &[1, 99],
            prefix: None,
            global: false,
            mask: &m,
        };
        assert!(matches!(forward(&mut tape, &p, &c, seq, false), Err(Error::Data(_))));
        assert!(forward_packed(&mut tape, &p, &c, &[], false).is_err());
    }
}
