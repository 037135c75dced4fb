use crate::encoder::PREFIX_ROWS;
use crate::masking::{
    bidirectional_mask, block_hybrid_mask, causal_mask, ggsm_mask, global_query_mask, soft_hybrid_mask,
    span_scheduler_mask, AttentionMask, MaskScheduleState, SpanSchedule,
};
use crate::{Result, Strategy};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tower {
    User,
    Answer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    /// The causal pass that initialises gradient norms before step 0.
    Seed,
    Inference,
}

/// Attention mask for one sequence plus whether it carries a global row.
#[derive(Debug, Clone)]
pub struct SeqMask {
    pub mask: AttentionMask,
    pub global: bool,
}

/// Length of stored gradient-norm vectors: longest possible user row count.
pub fn norm_len(max_len: usize) -> usize {
    max_len + PREFIX_ROWS + 1
}

/// Mask for a sequence of `rows` rows (excluding any global row).
///
/// `user_end` is the last row of the user segment and is only consulted by
/// the block hybrid on the user tower.
pub fn sequence_mask(
    strategy: Strategy,
    state: &MaskScheduleState,
    tower: Tower,
    phase: Phase,
    rows: usize,
    user_end: Option<usize>,
) -> Result<SeqMask> {
    let plain = |mask| Ok(SeqMask { mask, global: false });
    if phase == Phase::Seed || strategy == Strategy::Causal {
        return plain(causal_mask(rows)?);
    }
    if phase == Phase::Inference && strategy.is_bidirectional_family() {
        return plain(bidirectional_mask(rows)?);
    }
    match (strategy, tower) {
        (Strategy::Bidirectional | Strategy::HybridMlp, _) => plain(bidirectional_mask(rows)?),
        (Strategy::HybridBlock, Tower::User) => {
            let end = user_end.unwrap_or(0).min(rows - 1);
            plain(block_hybrid_mask(rows, end)?)
        }
        (Strategy::HybridGq, Tower::User) => {
            let (mask, global) = global_query_mask(rows)?;
            Ok(SeqMask { mask, global })
        }
        (Strategy::HybridBlock | Strategy::HybridGq, Tower::Answer) => plain(causal_mask(rows)?),
        (Strategy::HybridSoft, _) => match (&state.lagged_norms, phase) {
            (Some(g), _) => plain(soft_hybrid_mask(rows, g, state.norm_scale)?),
            // an untrained model probed before any backward pass
            (None, Phase::Inference) => plain(soft_hybrid_mask(rows, &vec![0.0; rows], state.norm_scale)?),
            (None, _) => plain(soft_hybrid_mask(rows, &[], state.norm_scale)?),
        },
        (Strategy::SchedulerLinear, _) => {
            plain(span_scheduler_mask(rows, state.t, SpanSchedule::Linear, state.total_steps)?)
        }
        (Strategy::SchedulerCosine, _) => {
            plain(span_scheduler_mask(rows, state.t, SpanSchedule::Cosine, state.total_steps)?)
        }
        (Strategy::Ggsm, _) => plain(ggsm_mask(rows, state)?),
        (Strategy::Causal, _) => unreachable!(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(s: Strategy) -> MaskScheduleState {
        MaskScheduleState::new(s, 2, 10, 1.0).unwrap()
    }

    #[test]
    fn inference_masks() {
        for s in Strategy::ALL {
            let mut st = state(s);
            st.lagged_norms = Some(vec![0.0; 20]);
            let m = sequence_mask(s, &st, Tower::User, Phase::Inference, 5, Some(2)).unwrap();
            let upper = m.mask.mean_upper();
            match s {
                Strategy::Causal | Strategy::HybridBlock | Strategy::HybridGq => assert_eq!(upper, None, "{s}"),
                Strategy::HybridSoft => assert!((upper.unwrap() - 0.5f64.ln()).abs() < 1e-12),
                _ => assert_eq!(upper, Some(0.0), "{s}"),
            }
            assert_eq!(m.global, s == Strategy::HybridGq);
        }
    }

    #[test]
    fn answer_tower_of_segment_hybrids_is_causal() {
        for s in [Strategy::HybridBlock, Strategy::HybridGq] {
            let m = sequence_mask(s, &state(s), Tower::Answer, Phase::Train, 4, None).unwrap();
            assert_eq!(m.mask, causal_mask(4).unwrap());
            assert!(!m.global);
        }
    }

    #[test]
    fn seed_pass_is_causal_and_missing_norms_error() {
        let st = state(Strategy::Ggsm);
        let m = sequence_mask(Strategy::Ggsm, &st, Tower::User, Phase::Seed, 4, None).unwrap();
        assert_eq!(m.mask, causal_mask(4).unwrap());
        assert!(sequence_mask(Strategy::Ggsm, &st, Tower::User, Phase::Train, 4, None).is_err());
        assert!(sequence_mask(Strategy::HybridSoft, &state(Strategy::HybridSoft), Tower::User, Phase::Train, 4, None).is_err());
    }

    #[test]
    fn scheduler_starts_causal() {
        let st = state(Strategy::SchedulerLinear);
        let m = sequence_mask(Strategy::SchedulerLinear, &st, Tower::User, Phase::Train, 6, None).unwrap();
        assert_eq!(m.mask, causal_mask(6).unwrap());
    }
}
