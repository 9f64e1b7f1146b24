use std::sync::Arc;

use approx::assert_abs_diff_eq;
use lva_core::backend::scripted::{ScriptedBackend, ScriptedFixture};
use lva_core::backend::Backends;
use lva_core::grpo::{
    clipped_surrogate, export_batch, group_advantages, kl_estimate, load_batch, Baseline,
    BatchMetadata, GrpoConfig, GrpoError, RolloutGroup, TokenLogProbs,
};
use lva_core::orchestrator::{run_trajectory, RunConfig, Trajectory};
use lva_core::synth::{generate, SynthSpec};
use lva_core::GrpoConfigF32;
use proptest::prelude::*;

proptest! {
    #[test]
    fn advantages_are_centred_and_scaled(rewards in prop::collection::vec(-5.0f64..5.0, 2..16)) {
        let a = group_advantages(&rewards, 1e-6, Baseline::GroupMean);
        prop_assert!(a.iter().sum::<f64>().abs() < 1e-9);
        let spread = rewards.iter().cloned().fold(f64::MIN, f64::max)
            - rewards.iter().cloned().fold(f64::MAX, f64::min);
        if spread > 1e-3 {
            let var = a.iter().map(|x| x * x).sum::<f64>() / a.len() as f64;
            prop_assert!((var - 1.0).abs() < 1e-6, "variance {}", var);
        }
    }

    #[test]
    fn advantages_ignore_shift_and_scale(
        rewards in prop::collection::vec(-5.0f64..5.0, 2..10),
        shift in -10.0f64..10.0,
        scale in 0.5f64..4.0,
    ) {
        let a = group_advantages(&rewards, 1e-9, Baseline::GroupMean);
        let moved: Vec<f64> = rewards.iter().map(|r| r * scale + shift).collect();
        let b = group_advantages(&moved, 1e-9, Baseline::GroupMean);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-5, "{} vs {}", x, y);
        }
    }

    #[test]
    fn kl_estimate_is_non_negative(r in -20.0f64..20.0, n in -20.0f64..20.0) {
        prop_assert!(kl_estimate(r, n) >= 0.0);
    }

    #[test]
    fn clipping_is_flat_outside_the_trust_region(lr in 0.3f64..2.0, adv in 0.1f64..3.0) {
        // With a positive advantage the objective stops rewarding ratios above 1 + eps.
        let cfg = GrpoConfig::<f64>::default();
        let t = clipped_surrogate(&[lr], &[0.0], None, None, adv, &cfg).unwrap();
        if lr.exp() > 1.0 + cfg.clip_epsilon {
            prop_assert!((t.per_token[0] + (1.0 + cfg.clip_epsilon) * adv).abs() < 1e-12);
        }
        let t = clipped_surrogate(&[-lr], &[0.0], None, None, -adv, &cfg).unwrap();
        if (-lr).exp() < 1.0 - cfg.clip_epsilon {
            prop_assert!((t.per_token[0] - (1.0 - cfg.clip_epsilon) * adv).abs() < 1e-12);
        }
    }
}

#[test]
fn equal_rewards_give_zero_advantage() {
    assert_eq!(group_advantages(&[2.0, 2.0, 2.0], 1e-6, Baseline::GroupMean), [0.0; 3]);
    assert_eq!(group_advantages(&[1.0, 3.0], 1e-6, Baseline::None), [1.0, 3.0]);
}

#[test]
fn kl_and_entropy_terms_enter_the_loss() {
    let cfg = GrpoConfig::<f64> {
        entropy_coeff: 0.01,
        ..GrpoConfig::default()
    };
    let base = clipped_surrogate(&[0.0], &[0.0], None, None, 1.0, &cfg).unwrap().mean;
    let with_kl = clipped_surrogate(&[0.0], &[0.0], Some(&[-0.5]), None, 1.0, &cfg).unwrap().mean;
    assert_abs_diff_eq!(with_kl - base, cfg.kl_coeff * kl_estimate(-0.5, 0.0), epsilon = 1e-15);
    let with_h = clipped_surrogate(&[0.0], &[0.0], None, Some(&[2.0]), 1.0, &cfg).unwrap().mean;
    assert_abs_diff_eq!(with_h - base, -0.02, epsilon = 1e-15);
}

#[test]
fn surrogate_works_in_f32() {
    let cfg = GrpoConfigF32::default();
    let t = clipped_surrogate(&[1.5f32.ln()], &[0.0], None, None, 1.0, &cfg).unwrap();
    assert!((t.per_token[0] + 1.2).abs() < 1e-6);
}

#[test]
fn mismatched_lengths_are_rejected() {
    let err = clipped_surrogate(&[0.0, 0.0], &[0.0], None, None, 1.0, &GrpoConfig::default()).unwrap_err();
    assert!(matches!(err, GrpoError::LengthMismatch { .. }), "{err:?}");
}

fn rollouts(n_questions: usize, n: usize) -> (Vec<RolloutGroup>, GrpoConfig<f64>) {
    let s = generate(&SynthSpec {
        n_episodes: 1,
        clips_per_episode: 8,
        questions_per_episode: n_questions,
        grounding_error_rate: 0.5,
        ..SynthSpec::default()
    });
    let ep = &s.episodes[0];
    let cfg = GrpoConfig::default();
    let groups = ep
        .questions
        .iter()
        .map(|q| {
            let trajectories: Vec<Trajectory> = (0..n)
                .map(|r| {
                    let fx = ScriptedFixture {
                        rng_seed: r as u64,
                        ..s.fixture.clone()
                    };
                    let b = Backends::uniform(Arc::new(ScriptedBackend::new(fx)));
                    run_trajectory(ep, q, &b, &RunConfig::default()).unwrap()
                })
                .collect();
            RolloutGroup::score(ep, q, trajectories, 0.5, &cfg).unwrap()
        })
        .collect();
    (groups, cfg)
}

#[test]
fn export_round_trips_two_groups_of_four() {
    let (mut groups, cfg) = rollouts(2, 4);
    let n = groups[0].rollouts[0].trajectory.turns.len();
    groups[0].rollouts[0].logprobs = Some(TokenLogProbs {
        new: vec![-0.1; n],
        old: vec![-0.2; n],
        reference: None,
        entropy: None,
    });
    assert!(groups[0].surrogate_loss(&cfg).unwrap().is_some());
    assert_eq!(groups[1].surrogate_loss(&cfg).unwrap(), None);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("batch.jsonl");
    let meta = BatchMetadata::default();
    export_batch(&groups, &meta, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 9);
    assert!(text.lines().next().unwrap().contains("\"record\":\"metadata\""));

    let (back_meta, records) = load_batch(&path).unwrap();
    assert_eq!(back_meta, meta);
    assert_eq!(records.len(), 8);
    for (g, chunk) in groups.iter().zip(records.chunks(4)) {
        assert!(chunk.iter().all(|r| r.context_id == g.context_id));
        let adv: Vec<f64> = chunk.iter().map(|r| r.advantage).collect();
        assert_eq!(adv, g.advantages);
        for (r, rec) in g.rollouts.iter().zip(chunk) {
            assert_eq!(rec.total, r.reward.total);
            assert_eq!(rec.turns.len(), r.trajectory.turns.len());
        }
    }
    assert!(records[0].logprobs.is_some());
}

#[test]
fn empty_export_is_metadata_only() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("batch.jsonl");
    export_batch(&[], &BatchMetadata::default(), &path).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 1);
    let (_, records) = load_batch(&path).unwrap();
    assert!(records.is_empty());
}

#[test]
fn groups_need_two_rollouts_of_one_context() {
    let (groups, cfg) = rollouts(2, 2);
    let s = generate(&SynthSpec {
        n_episodes: 1,
        clips_per_episode: 8,
        questions_per_episode: 2,
        ..SynthSpec::default()
    });
    let ep = &s.episodes[0];
    let one = vec![groups[0].rollouts[0].trajectory.clone()];
    assert!(matches!(
        RolloutGroup::score(ep, &ep.questions[0], one, 0.5, &cfg),
        Err(GrpoError::GroupTooSmall(1))
    ));
    let mixed = vec![
        groups[0].rollouts[0].trajectory.clone(),
        groups[1].rollouts[0].trajectory.clone(),
    ];
    assert!(matches!(
        RolloutGroup::score(ep, &ep.questions[0], mixed, 0.5, &cfg),
        Err(GrpoError::MixedContexts(..))
    ));
}
