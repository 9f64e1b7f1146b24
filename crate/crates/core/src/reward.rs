//! Rule-based rewards: per-step format validity, terminal answer
//! correctness, and the shaped trajectory return
//! `R = alpha * sum(r_fmt) + r_ans`.

use serde::{Deserialize, Serialize};

use crate::action::{normalize_answer, structural_validity};
use crate::episode::Question;
use crate::orchestrator::{Trajectory, TurnRecord};
use crate::scalar::Scalar;

/// Default weight of the per-step format reward.
pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown<S> {
    pub per_step_fmt: Vec<u8>,
    pub answer_reward: u8,
    pub alpha: S,
    pub total: S,
}

/// 1 if the turn is exactly one well-closed action, else 0.
pub fn score_format(turn: &TurnRecord) -> u8 {
    structural_validity(&turn.master_text).as_reward()
}

/// Exact match on the multiple-choice answer: either the leading label
/// equals the gold label, or the whole normalized text equals the
/// normalized gold option.
pub fn answer_matches(answer: &str, question: &Question) -> bool {
    let norm = normalize_answer(answer);
    if norm.label.as_deref() == Some(question.gold_label().as_str()) {
        return true;
    }
    question
        .gold_text()
        .is_some_and(|gold| !norm.text.is_empty() && normalize_answer(gold).text == norm.text)
}

/// 1 for a correct answer, 0 for a wrong or missing one.
pub fn score_answer(trajectory: &Trajectory, question: &Question) -> u8 {
    trajectory
        .scored_answer()
        .map_or(0, |a| u8::from(answer_matches(a, question)))
}

pub fn trajectory_return<S: Scalar>(
    per_step_fmt: &[u8],
    answer_reward: u8,
    alpha: S,
) -> RewardBreakdown<S> {
    debug_assert!(alpha >= S::zero(), "alpha must be non-negative");
    let valid_steps = per_step_fmt.iter().filter(|&&r| r != 0).count();
    let total = alpha * S::from_count(valid_steps) + S::from_count(answer_reward as usize);
    RewardBreakdown {
        per_step_fmt: per_step_fmt.to_vec(),
        answer_reward,
        alpha,
        total,
    }
}

/// Scores every turn and the final answer of a trajectory.
pub fn score_trajectory<S: Scalar>(
    trajectory: &Trajectory,
    question: &Question,
    alpha: S,
) -> RewardBreakdown<S> {
    let fmt: Vec<u8> = trajectory.turns.iter().map(score_format).collect();
    trajectory_return(&fmt, score_answer(trajectory, question), alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::tests::uniform_episode;
    use approx::assert_relative_eq;
    use num_rational::Ratio;

    #[test]
    fn return_examples() {
        assert_eq!(trajectory_return(&[1, 1, 1], 1, 0.5).total, 2.5);
        assert_eq!(trajectory_return(&[0, 0], 0, 0.5).total, 0.0);
        assert_relative_eq!(trajectory_return(&[1, 0, 1, 1], 1, 0.1).total, 1.3, epsilon = 1e-12);
        let exact = trajectory_return(&[1, 0, 1, 1], 1, Ratio::new(1i64, 10));
        assert_eq!(exact.total, Ratio::new(13, 10));
    }

    #[test]
    fn answer_matching() {
        let mut q = uniform_episode(1).questions.remove(0);
        q.choices = vec![
            "The Mall".into(),
            "A Movie Theatre".into(),
            "A Park".into(),
            "A Bus Stop".into(),
            "The Store".into(),
        ];
        q.gold_index = 3;
        assert!(answer_matches("a3: A Bus Stop", &q));
        assert!(answer_matches("a bus stop.", &q));
        assert!(answer_matches("a3", &q));
        assert!(!answer_matches("a0: The Mall", &q));
        assert!(!answer_matches("", &q));

        q.choices[0] = "the left side".into();
        q.gold_index = 0;
        assert!(answer_matches("the left side", &q));
        assert!(answer_matches("a0: the left side", &q));
        assert!(!answer_matches("the right side", &q));
    }
}
