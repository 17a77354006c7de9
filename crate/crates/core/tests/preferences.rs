use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reward_repair::environments::{random_mdp, RandomLayout, RandomMdpConfig};
use reward_repair::mdp::{rollout, PolicyTable, RewardFn, TabularMdp, Trajectory};
use reward_repair::preferences::{
    boltzmann_label, classify, HumanQueue, Label, LabelSource, Partition, PreferenceDataset, PreferenceSample,
    RegretLabeler,
};
use reward_repair::RepairError;

/// One step, two arms; arm 1 earns `gap` more than arm 0.
fn two_arms(gap: f64) -> (TabularMdp, RewardFn, Trajectory, Trajectory) {
    let rows = vec![vec![(1, 1.0)], vec![(2, 1.0)], vec![(1, 1.0)], vec![(1, 1.0)], vec![(2, 1.0)], vec![(2, 1.0)]];
    let mdp = TabularMdp::new(3, 2, rows, 1.0, 1, vec![1.0, 0.0, 0.0], vec![false, true, true]).unwrap();
    let truth = RewardFn::from_fn(&mdp, |s, _, next| if s == 0 && next == 2 { gap } else { 0.0 }).unwrap();
    let arm = |a: usize| Trajectory::new(vec![0, a + 1], vec![a]).unwrap();
    (mdp, truth, arm(1), arm(0))
}

#[test]
fn boltzmann_frequencies_match_the_logistic() {
    for gap in [-2.0, -1.0, 0.0, 1.0, 2.0] {
        let (mdp, truth, better, worse) = two_arms(gap);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 10_000;
        let firsts = (0..n)
            .filter(|_| boltzmann_label(&mdp, &truth, &better, &worse, 1.0, &mut rng).unwrap() == Label::First)
            .count();
        let p = 1.0 / (1.0 + (-gap as f64).exp());
        let freq = firsts as f64 / n as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((freq - p).abs() <= 3.0 * se, "gap {gap}: frequency {freq}, expected {p}");
    }
}

fn random_setup(seed: u64) -> (TabularMdp, RewardFn, RewardFn, Vec<Trajectory>) {
    let cfg = RandomMdpConfig { n_states: 7, n_actions: 3, layout: RandomLayout::Layered, ..RandomMdpConfig::default() };
    let (mdp, truth, proxy, _) = random_mdp(seed, &cfg).unwrap();
    let uniform = PolicyTable::uniform(mdp.n_states(), mdp.n_actions());
    let trajs = rollout(&mdp, &uniform, seed, 24).unwrap();
    (mdp, truth, proxy, trajs)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn regret_labels_are_antisymmetric(seed in 0u64..5000) {
        let (mdp, truth, _, trajs) = random_setup(seed);
        let labeler = RegretLabeler::new(&mdp, &truth).unwrap();
        for a in &trajs {
            for b in &trajs {
                let (ab, ba) = (labeler.label(a, b), labeler.label(b, a));
                prop_assert_eq!(ab.mu(), 1.0 - ba.mu());
                prop_assert_eq!(ab, ba.flipped());
            }
        }
    }

    #[test]
    fn partition_is_total_and_idempotent(seed in 0u64..5000) {
        let (mdp, truth, proxy, trajs) = random_setup(seed);
        let labeler = RegretLabeler::new(&mdp, &truth).unwrap();
        let mut data = PreferenceDataset::new();
        for pair in trajs.chunks(2) {
            let label = labeler.label(&pair[0], &pair[1]);
            data.push(PreferenceSample { tau1: pair[0].clone(), tau2: pair[1].clone(), label, source: LabelSource::Regret });
        }
        let (plus, minus) = data.partition(&mdp, &proxy).unwrap();
        let mut all: Vec<usize> = plus.iter().chain(&minus).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..data.len()).collect::<Vec<_>>());
        prop_assert_eq!(data.tags().len(), data.len());
        let tags = data.tags().to_vec();
        let again = data.partition(&mdp, &proxy).unwrap();
        prop_assert_eq!((plus, minus), again);
        prop_assert_eq!(tags, data.tags().to_vec());
        for (i, s) in data.samples().iter().enumerate() {
            let r1 = proxy.trajectory_return(&mdp, data.trajectory(s.tau1)).unwrap();
            let r2 = proxy.trajectory_return(&mdp, data.trajectory(s.tau2)).unwrap();
            prop_assert_eq!(data.tags()[i], classify(r1, r2, s.label));
        }
    }
}

#[test]
fn ties_always_agree() {
    assert_eq!(classify(1.0, 1.0, Label::Tie), Partition::Agree);
    assert_eq!(classify(1.0, 1.0, Label::First), Partition::Disagree);
    assert_eq!(classify(2.0, 1.0, Label::First), Partition::Agree);
    assert_eq!(classify(2.0, 1.0, Label::Second), Partition::Disagree);
}

#[test]
fn queue_survives_restarts() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("queue.jsonl");
    let (_, _, _, trajs) = random_setup(9);
    let ids = {
        let mut q = HumanQueue::open(&path).unwrap();
        let ids = q.enqueue(trajs.chunks(2).take(3).map(|p| (p[0].clone(), p[1].clone())).collect()).unwrap();
        q.label(ids[0], 0.5).unwrap();
        ids
    };

    let mut q = HumanQueue::open(&path).unwrap();
    assert_eq!(q.pending_len(), 2);
    assert_eq!(q.labeled_len(), 1);
    assert!(matches!(q.label(ids[0], 1.0), Err(RepairError::AlreadyLabeled(_))));
    q.label(ids[2], 0.0).unwrap();
    let done = q.dequeue_labeled().unwrap();
    assert_eq!(done.iter().map(|(id, s)| (*id, s.label)).collect::<Vec<_>>(), vec![(ids[0], Label::Tie), (ids[2], Label::First)]);
    assert_eq!(done[0].1.tau1, trajs[0]);
    drop(q);

    let mut q = HumanQueue::open(&path).unwrap();
    assert_eq!(q.labeled_len(), 0);
    assert_eq!(q.next_pending().map(|p| p.id), Some(ids[1]));
    let fresh = q.enqueue(vec![(trajs[6].clone(), trajs[7].clone())]).unwrap();
    assert!(fresh[0] > ids[2], "ids are never reused");
    assert!(matches!(q.label(999, 0.0), Err(RepairError::UnknownPair(999))));
    assert!(matches!(q.label(ids[1], 0.25), Err(RepairError::InvalidLabel(_))));
}
