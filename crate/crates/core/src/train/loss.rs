//! Training objective: utterance-level squared error plus an `alpha`
//! weighted frame-level squared error against the same utterance target,
//!
//! ```text
//! L = 1/S sum_s [ (Qhat_s - Q_s)^2 + alpha / T_s sum_t (Qhat_s - q_st)^2 ]
//! ```
//!
//! where `T_s` counts the valid frames of utterance `s` only.

use super::TrainError;
use crate::autodiff::{Graph, Tensor, Var};
use crate::layers::{select_rows, FrameMask};

/// One utterance's predictions and target for [`objective`].
#[derive(Clone, Copy, Debug)]
pub struct LossItem<'a> {
    pub frame_scores: &'a [f64],
    pub mask: &'a FrameMask,
    pub utterance_score: f64,
    pub target: f64,
}

fn check_alpha(alpha: f64) -> Result<(), TrainError> {
    if alpha >= 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(TrainError::Config(format!(
            "alpha must be finite and >= 0, got {alpha}"
        )))
    }
}

/// The objective evaluated on plain values.
pub fn objective(items: &[LossItem<'_>], alpha: f64) -> Result<f64, TrainError> {
    check_alpha(alpha)?;
    if items.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut total = 0.0;
    for item in items {
        if item.mask.len() != item.frame_scores.len() {
            return Err(TrainError::Config(format!(
                "mask covers {} frames, {} frame scores given",
                item.mask.len(),
                item.frame_scores.len()
            )));
        }
        let t = item.mask.count();
        if t == 0 {
            return Err(TrainError::NoValidFrames);
        }
        let frame_sq: f64 = item
            .frame_scores
            .iter()
            .zip(item.mask.flags())
            .filter(|(_, &valid)| valid)
            .map(|(q, _)| (item.target - q) * (item.target - q))
            .sum();
        let d = item.target - item.utterance_score;
        total += d * d + alpha / t as f64 * frame_sq;
    }
    Ok(total / items.len() as f64)
}

/// One utterance's bracketed term, recorded on `g`.
///
/// `frame_scores` is `[N, 1]`, `utterance_score` is `[1, 1]`.
pub fn utterance_term(
    g: &mut Graph,
    frame_scores: Var,
    utterance_score: Var,
    mask: &FrameMask,
    target: f64,
    alpha: f64,
) -> Result<Var, TrainError> {
    check_alpha(alpha)?;
    let t = mask.count();
    if t == 0 {
        return Err(TrainError::NoValidFrames);
    }
    let goal = g.constant(Tensor::full(&[1, 1], target));
    let d = g.sub(goal, utterance_score)?;
    let utt = g.square(d);
    let utt = g.sum(utt);
    let frames = select_rows(g, frame_scores, mask, "loss")?;
    let goals = g.constant(Tensor::full(&[t, 1], target));
    let r = g.sub(goals, frames)?;
    let r2 = g.square(r);
    let frame_sq = g.sum(r2);
    let frame = g.scale(frame_sq, alpha / t as f64);
    Ok(g.add(utt, frame)?)
}
