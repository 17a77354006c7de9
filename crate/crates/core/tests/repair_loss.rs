use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reward_repair::environments::{random_mdp, RandomLayout, RandomMdpConfig};
use reward_repair::harness::{run_experiment, ExperimentConfig, LabelerKind};
use reward_repair::mdp::{rollout, PolicyTable, RewardFn, TabularMdp, Trajectory};
use reward_repair::preferences::{Label, LabelSource, PreferenceDataset, PreferenceSample};
use reward_repair::repair::{
    ce_loss, lambda_schedule, pbrr_loss, pref_prob, CorrectionBasis, CorrectionModel, LossWeights, RepairedReward,
    Squash,
};

struct Instance {
    mdp: TabularMdp,
    proxy: RewardFn,
    basis: Arc<CorrectionBasis>,
    theta: Vec<f64>,
    trajs: Vec<Trajectory>,
    data: PreferenceDataset,
}

fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = RandomMdpConfig {
        n_states: rng.random_range(4..=8),
        n_actions: rng.random_range(2..=4),
        layout: RandomLayout::Layered,
        ..RandomMdpConfig::default()
    };
    let (mdp, _, proxy, _) = random_mdp(seed, &cfg).unwrap();
    let basis = Arc::new(CorrectionBasis::tabular(&mdp));
    let theta = (0..basis.n_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let uniform = PolicyTable::uniform(mdp.n_states(), mdp.n_actions());
    let trajs = rollout(&mdp, &uniform, seed, 12).unwrap();
    let mut data = PreferenceDataset::new();
    for pair in trajs.chunks(2) {
        let label = [Label::First, Label::Tie, Label::Second][rng.random_range(0..3)];
        data.push(PreferenceSample { tau1: pair[0].clone(), tau2: pair[1].clone(), label, source: LabelSource::Regret });
    }
    Instance { mdp, proxy, basis, theta, trajs, data }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn preference_probabilities_are_antisymmetric(seed in 0u64..10_000) {
        let inst = instance(seed);
        let model = CorrectionModel::with_theta(inst.basis.clone(), Squash::Identity, inst.theta.clone()).unwrap();
        let rhat = RepairedReward::new(inst.proxy.clone(), model).unwrap();
        for a in &inst.trajs {
            for b in &inst.trajs {
                let sum = pref_prob(&rhat, &inst.mdp, a, b).unwrap() + pref_prob(&rhat, &inst.mdp, b, a).unwrap();
                prop_assert_eq!(sum, 1.0);
            }
        }
    }

    /// The regularizers are non-negative, so the full loss bounds cross-entropy from above.
    #[test]
    fn regularized_loss_dominates_cross_entropy(seed in 0u64..10_000, l1 in 0.0f64..5.0, l2 in 0.0f64..5.0, tanh in any::<bool>()) {
        let inst = instance(seed);
        let squash = if tanh { Squash::Tanh } else { Squash::Identity };
        let model = CorrectionModel::with_theta(inst.basis.clone(), squash, inst.theta.clone()).unwrap();
        let full = pbrr_loss(&model, &inst.mdp, &inst.proxy, &inst.data, LossWeights::new(l1, l2).unwrap()).unwrap();
        let bare = pbrr_loss(&model, &inst.mdp, &inst.proxy, &inst.data, LossWeights::ZERO).unwrap();
        prop_assert!(full.plus >= 0.0 && full.minus >= 0.0);
        prop_assert!(full.total >= bare.total);
        let table = RepairedReward::new(inst.proxy.clone(), model).unwrap().reward_fn(&inst.mdp).unwrap();
        let ce = ce_loss(&table, &inst.mdp, &inst.data).unwrap();
        prop_assert!((bare.total - ce).abs() <= 1e-9 * ce.abs().max(1.0));
    }

    /// A constant added to every correction moves each H-step return by
    /// `c * sum_t gamma^t` and leaves pairwise probabilities unchanged.
    #[test]
    fn constant_shift_of_the_correction(seed in 0u64..10_000, c in -3.0f64..3.0) {
        let inst = instance(seed);
        let base = CorrectionModel::with_theta(inst.basis.clone(), Squash::Identity, inst.theta.clone()).unwrap();
        let shifted_theta: Vec<f64> = inst.theta.iter().map(|t| t + c).collect();
        let shifted = CorrectionModel::with_theta(inst.basis.clone(), Squash::Identity, shifted_theta).unwrap();
        let r0 = RepairedReward::new(inst.proxy.clone(), base).unwrap();
        let r1 = RepairedReward::new(inst.proxy.clone(), shifted).unwrap();
        let gamma = inst.mdp.gamma();
        for a in &inst.trajs {
            let expected: f64 = (0..a.actions.len()).map(|t| c * gamma.powi(t as i32)).sum();
            let moved = r1.trajectory_return(&inst.mdp, a).unwrap() - r0.trajectory_return(&inst.mdp, a).unwrap();
            prop_assert!((moved - expected).abs() < 1e-9);
            for b in &inst.trajs {
                prop_assert_eq!(a.actions.len(), b.actions.len());
                let p0 = pref_prob(&r0, &inst.mdp, a, b).unwrap();
                let p1 = pref_prob(&r1, &inst.mdp, a, b).unwrap();
                prop_assert!((p0 - p1).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn lambda_schedule_never_increases(base in 0.0f64..100.0, n in 0usize..10_000) {
        prop_assert!(lambda_schedule(base, n + 1) <= lambda_schedule(base, n));
    }
}

#[test]
fn lambda_decays_across_iterations() {
    for seed in 0..5 {
        let cfg = ExperimentConfig {
            env: "random".into(),
            labeler: LabelerKind::Regret,
            iterations: 8,
            pairs: 3,
            seed,
            ..ExperimentConfig::default()
        };
        let run = run_experiment(&cfg).unwrap();
        for w in run.rows[1..].windows(2) {
            if w[1].d_plus >= w[0].d_plus {
                assert!(w[1].lambda1 <= w[0].lambda1, "seed {seed}: {:?} -> {:?}", w[0], w[1]);
            }
        }
        assert!(run.final_row().preferences <= cfg.iterations * cfg.batch_size());
    }
}

#[test]
fn tanh_correction_is_bounded() {
    let inst = instance(3);
    let theta: Vec<f64> = inst.theta.iter().map(|t| t * 100.0).collect();
    let model = CorrectionModel::with_theta(inst.basis.clone(), Squash::Tanh, theta).unwrap();
    assert!(model.values().iter().all(|g| g.abs() <= 1.0));
}
