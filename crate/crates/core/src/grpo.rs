//! Group-relative policy optimization math over recorded rollouts.
//!
//! For each context (episode + question) a group of N rollouts is scored;
//! advantages are the group-standardized returns, broadcast to every token
//! of their rollout. The per-token loss is the clipped surrogate
//!
//! ```text
//! ratio = exp(logp_new - logp_old)
//! term  = -min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A)
//!         + beta * (exp(d) - d - 1),  d = logp_ref - logp_new
//!         - entropy_coeff * entropy
//! ```
//!
//! Nothing here touches model weights; batches are exported for an external
//! trainer.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::ChatMessage;
use crate::episode::{Episode, Question};
use crate::orchestrator::{assemble_context, RunConfig, Trajectory};
use crate::reward::{score_trajectory, RewardBreakdown};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Subtract the group mean and divide by the (floored) population std.
    GroupMean,
    /// Use raw returns as advantages.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig<S> {
    pub clip_epsilon: S,
    pub kl_coeff: S,
    pub entropy_coeff: S,
    pub std_floor: S,
    pub baseline: Baseline,
}

impl<S: Real> Default for GrpoConfig<S> {
    fn default() -> Self {
        GrpoConfig {
            clip_epsilon: S::lit(0.2),
            kl_coeff: S::lit(1e-3),
            entropy_coeff: S::zero(),
            std_floor: S::lit(1e-6),
            baseline: Baseline::GroupMean,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GrpoError {
    #[error("log-prob sequences differ in length: {what} has {found}, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("a group needs at least 2 rollouts, got {0}")]
    GroupTooSmall(usize),
    #[error("rollouts of one group must share a context: `{0}` vs `{1}`")]
    MixedContexts(String, String),
}

/// `(R_i - mean) / max(std, floor)` with the population std.
pub fn group_advantages<S: Real>(rewards: &[S], std_floor: S, baseline: Baseline) -> Vec<S> {
    if baseline == Baseline::None || rewards.is_empty() {
        return rewards.to_vec();
    }
    let n = S::from_usize(rewards.len()).expect("group size fits");
    let mean = rewards.iter().fold(S::zero(), |a, &r| a + r) / n;
    let var = rewards
        .iter()
        .fold(S::zero(), |a, &r| a + (r - mean) * (r - mean))
        / n;
    let denom = var.sqrt().max(std_floor);
    rewards.iter().map(|&r| (r - mean) / denom).collect()
}

/// The non-negative estimator `exp(d) - d - 1` with `d = logp_ref - logp_new`.
pub fn kl_estimate<S: Real>(logp_ref: S, logp_new: S) -> S {
    let d = logp_ref - logp_new;
    d.exp_m1() - d
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateTerms<S> {
    pub per_token: Vec<S>,
    pub mean: S,
}

/// Per-token clipped-surrogate loss terms for one rollout.
///
/// The KL term is added only when `logp_ref` is given, the entropy bonus only
/// when `entropy` is given.
pub fn clipped_surrogate<S: Real>(
    logp_new: &[S],
    logp_old: &[S],
    logp_ref: Option<&[S]>,
    entropy: Option<&[S]>,
    advantage: S,
    config: &GrpoConfig<S>,
) -> Result<SurrogateTerms<S>, GrpoError> {
    let n = logp_new.len();
    let check = |what: &'static str, found: usize| {
        if found == n {
            Ok(())
        } else {
            Err(GrpoError::LengthMismatch {
                what,
                expected: n,
                found,
            })
        }
    };
    check("logp_old", logp_old.len())?;
    if let Some(r) = logp_ref {
        check("logp_ref", r.len())?;
    }
    if let Some(e) = entropy {
        check("entropy", e.len())?;
    }

    let lo = S::one() - config.clip_epsilon;
    let hi = S::one() + config.clip_epsilon;
    let per_token: Vec<S> = (0..n)
        .map(|i| {
            let ratio = (logp_new[i] - logp_old[i]).exp();
            let clipped = ratio.max(lo).min(hi);
            let mut term = -(ratio * advantage).min(clipped * advantage);
            if let Some(r) = logp_ref {
                term = term + config.kl_coeff * kl_estimate(r[i], logp_new[i]);
            }
            if let Some(e) = entropy {
                term = term - config.entropy_coeff * e[i];
            }
            term
        })
        .collect();
    let mean = if n == 0 {
        S::zero()
    } else {
        per_token.iter().fold(S::zero(), |a, &t| a + t) / S::from_usize(n).expect("length fits")
    };
    Ok(SurrogateTerms { per_token, mean })
}

/// Token-level log-probabilities for one rollout, supplied by a trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogProbs<S> {
    pub new: Vec<S>,
    pub old: Vec<S>,
    #[serde(default)]
    pub reference: Option<Vec<S>>,
    #[serde(default)]
    pub entropy: Option<Vec<S>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub trajectory: Trajectory,
    pub reward: RewardBreakdown<f64>,
    pub logprobs: Option<TokenLogProbs<f64>>,
}

/// N scored rollouts of one context plus their advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub context_id: String,
    pub prompt: Vec<ChatMessage>,
    pub rollouts: Vec<Rollout>,
    pub advantages: Vec<f64>,
}

pub fn context_id(episode_id: &str, question_id: &str) -> String {
    format!("{episode_id}/{question_id}")
}

impl RolloutGroup {
    /// Scores `trajectories` (all for `question`) and computes advantages.
    pub fn score(
        episode: &Episode,
        question: &Question,
        trajectories: Vec<Trajectory>,
        alpha: f64,
        config: &GrpoConfig<f64>,
    ) -> Result<Self, GrpoError> {
        if trajectories.len() < 2 {
            return Err(GrpoError::GroupTooSmall(trajectories.len()));
        }
        let cid = context_id(&episode.episode_id, &question.question_id);
        for t in &trajectories {
            let other = context_id(&t.episode_id, &t.question_id);
            if other != cid {
                return Err(GrpoError::MixedContexts(cid, other));
            }
        }
        let rollouts: Vec<Rollout> = trajectories
            .into_iter()
            .map(|t| Rollout {
                reward: score_trajectory(&t, question, alpha),
                trajectory: t,
                logprobs: None,
            })
            .collect();
        let returns: Vec<f64> = rollouts.iter().map(|r| r.reward.total).collect();
        let advantages = group_advantages(&returns, config.std_floor, config.baseline);
        let run_config = rollouts
            .first()
            .map(|r| r.trajectory.config.clone())
            .unwrap_or_default();
        Ok(RolloutGroup {
            context_id: cid,
            prompt: assemble_context(episode, question, &[], &run_config),
            rollouts,
            advantages,
        })
    }

    /// Mean surrogate loss over rollouts that carry log-probs.
    pub fn surrogate_loss(&self, config: &GrpoConfig<f64>) -> Result<Option<f64>, GrpoError> {
        let mut means = Vec::new();
        for (r, &adv) in self.rollouts.iter().zip(&self.advantages) {
            if let Some(lp) = &r.logprobs {
                let terms = clipped_surrogate(
                    &lp.new,
                    &lp.old,
                    lp.reference.as_deref(),
                    lp.entropy.as_deref(),
                    adv,
                    config,
                )?;
                means.push(terms.mean);
            }
        }
        Ok((!means.is_empty()).then(|| means.iter().sum::<f64>() / means.len() as f64))
    }
}

/// Training hyperparameters recorded alongside an exported batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchMetadata {
    pub lr: f64,
    pub max_steps_opt: u64,
    pub kl_coeff: f64,
    pub batch_size: usize,
    pub n_rollouts: usize,
    pub temperature: f64,
    pub clip_epsilon: f64,
    pub entropy_coeff: f64,
    pub std_floor: f64,
    pub alpha: f64,
}

impl Default for BatchMetadata {
    fn default() -> Self {
        let g = GrpoConfig::<f64>::default();
        BatchMetadata {
            lr: 5e-6,
            max_steps_opt: 2000,
            kl_coeff: g.kl_coeff,
            batch_size: 4,
            n_rollouts: 4,
            temperature: 1.0,
            clip_epsilon: g.clip_epsilon,
            entropy_coeff: g.entropy_coeff,
            std_floor: g.std_floor,
            alpha: crate::reward::DEFAULT_ALPHA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportTurn {
    pub text: String,
    pub injected: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub context_id: String,
    pub rollout_index: usize,
    pub context: Vec<ChatMessage>,
    pub turns: Vec<ExportTurn>,
    pub r_fmt: Vec<u8>,
    pub r_ans: u8,
    pub total: f64,
    pub advantage: f64,
    pub config: RunConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<TokenLogProbs<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum BatchRecord {
    Metadata(BatchMetadata),
    Rollout(Box<RolloutRecord>),
}

/// Flattens groups into one record per rollout.
pub fn batch_records(groups: &[RolloutGroup]) -> Vec<RolloutRecord> {
    groups
        .iter()
        .flat_map(|g| {
            g.rollouts
                .iter()
                .zip(&g.advantages)
                .enumerate()
                .map(move |(i, (r, &adv))| RolloutRecord {
                    context_id: g.context_id.clone(),
                    rollout_index: i,
                    context: g.prompt.clone(),
                    turns: r
                        .trajectory
                        .turns
                        .iter()
                        .map(|t| ExportTurn {
                            text: t.master_text.clone(),
                            injected: t.injected.clone(),
                        })
                        .collect(),
                    r_fmt: r.reward.per_step_fmt.clone(),
                    r_ans: r.reward.answer_reward,
                    total: r.reward.total,
                    advantage: adv,
                    config: r.trajectory.config.clone(),
                    logprobs: r.logprobs.clone(),
                })
        })
        .collect()
}

/// Writes a JSONL batch: the metadata record first, then one line per rollout.
pub fn export_batch(
    groups: &[RolloutGroup],
    metadata: &BatchMetadata,
    path: &Path,
) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let mut line = |rec: &BatchRecord| -> std::io::Result<()> {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")
    };
    line(&BatchRecord::Metadata(metadata.clone()))?;
    for r in batch_records(groups) {
        line(&BatchRecord::Rollout(Box::new(r)))?;
    }
    w.flush()
}

/// Reads a batch written by [`export_batch`].
pub fn load_batch(path: &Path) -> std::io::Result<(BatchMetadata, Vec<RolloutRecord>)> {
    let mut meta = None;
    let mut rollouts = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line)? {
            BatchRecord::Metadata(m) => meta = Some(m),
            BatchRecord::Rollout(r) => rollouts.push(*r),
        }
    }
    let meta = meta.ok_or_else(|| {
        std::io::Error::new(std::io::ErrorKind::InvalidData, "batch has no metadata record")
    })?;
    Ok((meta, rollouts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn advantage_examples() {
        let a = group_advantages(&[1.0, 0.0, 1.0, 0.0], 1e-6, Baseline::GroupMean);
        assert_eq!(a, vec![1.0, -1.0, 1.0, -1.0]);
        let flat = group_advantages(&[0.7; 4], 1e-6, Baseline::GroupMean);
        assert!(flat.iter().all(|&x| x == 0.0));
        let raw = group_advantages(&[2.0, 1.0], 1e-6, Baseline::None);
        assert_eq!(raw, vec![2.0, 1.0]);
    }

    #[test]
    fn advantages_in_f32() {
        let a = group_advantages(&[1.0f32, 0.0, 1.0, 0.0], 1e-6, Baseline::GroupMean);
        assert_eq!(a, vec![1.0f32, -1.0, 1.0, -1.0]);
    }

    #[test]
    fn surrogate_length_mismatch() {
        let cfg = GrpoConfig::<f64>::default();
        let err = clipped_surrogate(&[0.0, 0.0], &[0.0], None, None, 1.0, &cfg).unwrap_err();
        assert_eq!(
            err,
            GrpoError::LengthMismatch {
                what: "logp_old",
                expected: 2,
                found: 1
            }
        );
    }

    #[test]
    fn surrogate_identity_ratio() {
        let cfg = GrpoConfig::<f64>::default();
        let t = clipped_surrogate(&[-0.3, -1.2], &[-0.3, -1.2], None, None, 1.0, &cfg).unwrap();
        assert_eq!(t.per_token, vec![-1.0, -1.0]);
        assert_eq!(t.mean, -1.0);
    }

    #[test]
    fn kl_and_entropy_terms() {
        let cfg = GrpoConfig {
            kl_coeff: 0.5,
            entropy_coeff: 0.1,
            ..GrpoConfig::<f64>::default()
        };
        // same policy: ratio 1, KL 0
        let t = clipped_surrogate(&[-1.0], &[-1.0], Some(&[-1.0]), Some(&[2.0]), 1.0, &cfg)
            .unwrap();
        assert!((t.per_token[0] - (-1.0 - 0.2)).abs() < 1e-15);
        let d: f64 = 0.3;
        let t = clipped_surrogate(&[-1.0], &[-1.0], Some(&[-0.7]), None, 0.0, &cfg).unwrap();
        assert!((t.per_token[0] - 0.5 * (d.exp() - d - 1.0)).abs() < 1e-15);
    }
}
