//! Experiment orchestration: the repair loop and every baseline, learning
//! curves, run outputs, the retrain check and the shared session used by the
//! human-labeling server.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    online_rlhf_step, rrm_step, select_beta, RewardEnsemble, StepInputs, BETA_GRID,
};
use crate::environments::{EnvOptions, Environment, RandomMdpConfig, ENV_IDS};
use crate::error::{RepairError, Result};
use crate::mdp::{
    expected_return, plan_optimal, rollout, trajectory_support, PolicyTable, RewardEntry, RewardFn, TabularMdp,
    Trajectory,
};
use crate::preferences::{
    sample_cross_pairs, unix_now, BoltzmannOracle, HumanQueue, Label, LabelSource, Oracle, PendingPair,
    PreferenceDataset, PreferenceRecord, PreferenceSample, RegretLabeler,
};
use crate::repair::{
    fit_repair, CorrectionBasis, CorrectionFile, CorrectionModel, LossVariant, OptimizerConfig, PartitionMode, Squash,
};
use crate::theory::{candidate_policies, select_exploration_pair, ConfidenceState, FeatureMap};

/// Planner tolerance used throughout the harness.
const PLAN_TOL: f64 = 1e-8;
/// Largest one-hot feature dimension the confidence-set fallback accepts.
const MAX_THEORY_DIM: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodId {
    Pbrr,
    /// Repair with the plain cross-entropy loss.
    PbrrCe,
    PbrrLplusOnly,
    PbrrLminusOnly,
    OnlineRlhf,
    Rrm,
    RrmStateConstraint,
    StateConstrained,
    Uniform,
}

const METHOD_NAMES: [(MethodId, &str); 9] = [
    (MethodId::Pbrr, "pbrr"),
    (MethodId::PbrrCe, "pbrr-ce"),
    (MethodId::PbrrLplusOnly, "pbrr-lplus-only"),
    (MethodId::PbrrLminusOnly, "pbrr-lminus-only"),
    (MethodId::OnlineRlhf, "online-rlhf"),
    (MethodId::Rrm, "rrm"),
    (MethodId::RrmStateConstraint, "rrm-state-constraint"),
    (MethodId::StateConstrained, "state-constrained"),
    (MethodId::Uniform, "uniform"),
];

impl MethodId {
    pub const ALL: [MethodId; 9] = [
        MethodId::Pbrr,
        MethodId::PbrrCe,
        MethodId::PbrrLplusOnly,
        MethodId::PbrrLminusOnly,
        MethodId::OnlineRlhf,
        MethodId::Rrm,
        MethodId::RrmStateConstraint,
        MethodId::StateConstrained,
        MethodId::Uniform,
    ];

    pub fn name(self) -> &'static str {
        METHOD_NAMES.iter().find(|(m, _)| *m == self).map(|(_, n)| *n).unwrap_or("?")
    }

    /// Variants of the repair loop.
    pub fn loss_variant(self) -> Option<LossVariant> {
        match self {
            MethodId::Pbrr | MethodId::Uniform => Some(LossVariant::Full),
            MethodId::PbrrCe => Some(LossVariant::CrossEntropy),
            MethodId::PbrrLplusOnly => Some(LossVariant::PlusOnly),
            MethodId::PbrrLminusOnly => Some(LossVariant::MinusOnly),
            _ => None,
        }
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodId {
    type Err = RepairError;

    fn from_str(s: &str) -> Result<Self> {
        METHOD_NAMES
            .iter()
            .find(|(_, n)| *n == s)
            .map(|(m, _)| *m)
            .ok_or_else(|| RepairError::invalid(format!("unknown method {s}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelerKind {
    Boltzmann,
    Regret,
    Human,
}

impl FromStr for LabelerKind {
    type Err = RepairError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "boltzmann" => Ok(LabelerKind::Boltzmann),
            "regret" => Ok(LabelerKind::Regret),
            "human" => Ok(LabelerKind::Human),
            _ => Err(RepairError::invalid(format!("unknown labeler {s}"))),
        }
    }
}

/// How an iteration turns its two policies into labeled pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairingMode {
    /// `k` seeded rollouts per policy, all `k^2` cross pairs.
    #[default]
    Rollout,
    /// Every pair from the two policies' exact trajectory supports.
    Support,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisChoice {
    /// The tied grid basis on gridworlds, tabular elsewhere.
    #[default]
    Auto,
    Tabular,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub env: String,
    pub method: MethodId,
    pub labeler: LabelerKind,
    pub iterations: usize,
    /// `k`: rollouts per policy; `k^2` labels per iteration.
    pub pairs: usize,
    pub temperature: f64,
    pub c1: f64,
    pub lambda_base: f64,
    pub seed: u64,
    pub gamma: Option<f64>,
    pub sprinkler_bonus: Option<f64>,
    /// Share of each batch paired within the repaired policy's own rollouts.
    pub intra_fraction: f64,
    pub pairing: PairingMode,
    pub partition: PartitionMode,
    pub basis: BasisChoice,
    pub optimizer: OptimizerConfig,
    /// Ensemble size for the ensemble baselines; 5 from scratch, 3 for corrections by default.
    pub ensemble_size: Option<usize>,
    /// The divergence-penalized planners track the previous policy instead of the fixed reference.
    pub moving_reference: bool,
    /// Uniform mixing applied to the reference before it enters a divergence penalty.
    pub reference_smoothing: f64,
    /// Uniform mixing applied to every policy before it is rolled out.
    pub rollout_epsilon: f64,
    /// Norm bound on the linear reward weights for the confidence-set fallback.
    pub w_bound: f64,
    pub support_limit: usize,
    pub human_timeout_secs: u64,
    pub random: Option<RandomMdpConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            env: "gridworld".into(),
            method: MethodId::Pbrr,
            labeler: LabelerKind::Boltzmann,
            iterations: 15,
            pairs: 19,
            temperature: 1.0,
            c1: 0.0,
            lambda_base: 10.0,
            seed: 0,
            gamma: None,
            sprinkler_bonus: None,
            intra_fraction: 0.0,
            pairing: PairingMode::Rollout,
            partition: PartitionMode::Proxy,
            basis: BasisChoice::Auto,
            optimizer: OptimizerConfig::default(),
            ensemble_size: None,
            moving_reference: false,
            reference_smoothing: 0.05,
            rollout_epsilon: 0.0,
            w_bound: 1.0,
            support_limit: 4096,
            human_timeout_secs: 3600,
            random: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if !ENV_IDS.contains(&self.env.as_str()) {
            return Err(RepairError::invalid(format!("unknown environment {}", self.env)));
        }
        if self.iterations == 0 || self.pairs == 0 {
            return Err(RepairError::invalid("iterations and pairs must both be at least 1"));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(RepairError::invalid("temperature must be positive"));
        }
        if !(self.c1 >= 0.0) || !(self.lambda_base >= 0.0) || !(self.w_bound > 0.0) {
            return Err(RepairError::invalid("c1 and lambda base must be non-negative, w_bound positive"));
        }
        if !(0.0..=1.0).contains(&self.intra_fraction)
            || !(0.0..=1.0).contains(&self.reference_smoothing)
            || !(0.0..=1.0).contains(&self.rollout_epsilon)
        {
            return Err(RepairError::invalid("fractions must lie in [0, 1]"));
        }
        self.optimizer.validate()?;
        let repair_loop = matches!(
            self.method,
            MethodId::Pbrr | MethodId::PbrrCe | MethodId::PbrrLplusOnly | MethodId::PbrrLminusOnly
        );
        if self.pairing == PairingMode::Support && !repair_loop {
            return Err(RepairError::invalid("support pairing is only defined for the repair loop"));
        }
        if self.c1 > 0.0 && !repair_loop {
            return Err(RepairError::invalid("c1 > 0 only applies to the repair loop"));
        }
        if self.intra_fraction > 0.0 && (!repair_loop || self.pairing != PairingMode::Rollout) {
            return Err(RepairError::invalid("intra-policy pairs need the repair loop with rollout pairing"));
        }
        if self.method == MethodId::Uniform && !matches!(self.env.as_str(), "mdp1" | "mdp2") {
            return Err(RepairError::invalid("the uniform explorer runs on the fan MDPs only"));
        }
        if self.method == MethodId::StateConstrained && self.labeler == LabelerKind::Human {
            return Err(RepairError::invalid("state-constrained planning asks for no labels"));
        }
        if matches!(self.ensemble_size, Some(m) if m < 2) {
            return Err(RepairError::invalid("ensembles need at least two members"));
        }
        Ok(())
    }

    pub fn env_options(&self) -> EnvOptions {
        EnvOptions { gamma: self.gamma, sprinkler_bonus: self.sprinkler_bonus, seed: self.seed, random: self.random.clone() }
    }

    pub fn load_env(&self) -> Result<Environment> {
        Environment::load(&self.env, &self.env_options())
    }

    /// Labels per iteration.
    pub fn batch_size(&self) -> usize {
        self.pairs * self.pairs
    }
}

/// `(J - J_ref) / (J* - J_ref)` clipped to `[-1, 1]`.
pub fn scaled_return(j: f64, j_ref: f64, j_star: f64) -> Result<f64> {
    let span = j_star - j_ref;
    if span.abs() <= 1e-12 {
        return Err(RepairError::invalid("optimal and reference returns coincide"));
    }
    Ok(((j - j_ref) / span).clamp(-1.0, 1.0))
}

/// Ground-truth returns of the reference and the truth-optimal policy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Benchmarks {
    pub j_ref: f64,
    pub j_star: f64,
}

impl Benchmarks {
    pub fn of(env: &Environment) -> Result<Self> {
        let star = plan_optimal(&env.mdp, &env.truth, 1e-10)?.greedy;
        Ok(Benchmarks {
            j_ref: expected_return(&env.mdp, &env.reference, &env.truth)?,
            j_star: expected_return(&env.mdp, &star, &env.truth)?,
        })
    }

    pub fn scaled(&self, j: f64) -> Result<f64> {
        scaled_return(j, self.j_ref, self.j_star)
    }
}

/// One learning-curve row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub iteration: usize,
    pub preferences: usize,
    pub j_truth: f64,
    pub j_scaled: f64,
    pub d_plus: usize,
    pub d_minus: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub loss: f64,
}

/// Everything a finished run produced.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub config: ExperimentConfig,
    pub benchmarks: Benchmarks,
    pub rows: Vec<RunRow>,
    pub reward: RewardFn,
    pub policy: PolicyTable,
    pub correction: Option<CorrectionModel>,
    pub records: Vec<PreferenceRecord>,
    pub dataset: PreferenceDataset,
    /// Seconds per iteration; kept out of `run.csv` so it stays reproducible.
    pub wall_times: Vec<f64>,
    /// Sorted states touched by any rollout of the run.
    pub visited_states: Vec<usize>,
    /// `(beta, J)` of the last divergence-weight search, when one ran.
    pub beta_sweep: Vec<(f64, f64)>,
}

impl RunResult {
    pub fn final_row(&self) -> &RunRow {
        self.rows.last().expect("a run has at least the initial row")
    }
}

/// What observers see after each iteration.
pub struct Progress<'a> {
    pub row: &'a RunRow,
    pub reward: &'a RewardFn,
    pub policy: &'a PolicyTable,
    pub correction: Option<&'a CorrectionModel>,
}

/// Runs `config` with its simulated labeler.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunResult> {
    config.validate()?;
    let env = config.load_env()?;
    match config.labeler {
        LabelerKind::Boltzmann => {
            let mut oracle = BoltzmannOracle::new(&env.mdp, &env.truth, config.temperature, label_seed(config.seed))?;
            run_with_oracle(config, &env, &mut oracle, &mut |_| {})
        }
        LabelerKind::Regret => {
            let mut oracle = RegretLabeler::new(&env.mdp, &env.truth)?;
            run_with_oracle(config, &env, &mut oracle, &mut |_| {})
        }
        LabelerKind::Human => Err(RepairError::invalid("human runs need an attached session")),
    }
}

fn label_seed(seed: u64) -> u64 {
    seed ^ 0x6c62_272e_07bb_0142
}

fn iteration_seed(seed: u64, iteration: usize, stream: u64) -> u64 {
    seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ ((iteration as u64) << 20) ^ stream
}

fn basis_for(config: &ExperimentConfig, env: &Environment) -> Arc<CorrectionBasis> {
    match (config.basis, &env.grid) {
        (BasisChoice::Auto, Some(grid)) => Arc::new(CorrectionBasis::grid(grid, &env.mdp)),
        _ => Arc::new(CorrectionBasis::tabular(&env.mdp)),
    }
}

fn rollout_policy(config: &ExperimentConfig, policy: &PolicyTable) -> PolicyTable {
    if config.rollout_epsilon > 0.0 {
        policy.smoothed(config.rollout_epsilon)
    } else {
        policy.clone()
    }
}

struct Recorder<'a> {
    env: &'a Environment,
    bench: Benchmarks,
    records: Vec<PreferenceRecord>,
    dataset: PreferenceDataset,
    visited: Vec<bool>,
    rows: Vec<RunRow>,
    wall_times: Vec<f64>,
}

impl<'a> Recorder<'a> {
    fn new(env: &'a Environment) -> Result<Self> {
        Ok(Recorder {
            env,
            bench: Benchmarks::of(env)?,
            records: Vec::new(),
            dataset: PreferenceDataset::new(),
            visited: vec![false; env.mdp.n_states()],
            rows: Vec::new(),
            wall_times: Vec::new(),
        })
    }

    fn visit(&mut self, trajs: &[Trajectory]) {
        for t in trajs {
            for &s in &t.states {
                self.visited[s] = true;
            }
        }
    }

    fn label(&mut self, iteration: usize, pairs: &[(Trajectory, Trajectory)], oracle: &mut dyn Oracle) -> Result<()> {
        if pairs.is_empty() {
            return Ok(());
        }
        let labels = oracle.label_batch(pairs)?;
        if labels.len() != pairs.len() {
            return Err(RepairError::Internal("labeler returned the wrong number of labels".into()));
        }
        let source = oracle.source();
        for ((a, b), label) in pairs.iter().zip(labels) {
            let (ia, ib) = (self.dataset.intern(a), self.dataset.intern(b));
            self.dataset.push_ids(ia, ib, label, source);
            self.records.push(PreferenceRecord {
                env: self.env.id.clone(),
                iteration,
                tau1: ia,
                tau2: ib,
                mu: label,
                source,
                timestamp: unix_now(),
            });
        }
        Ok(())
    }

    fn push_row(&mut self, mut row: RunRow, policy: &PolicyTable) -> Result<RunRow> {
        row.j_truth = expected_return(&self.env.mdp, policy, &self.env.truth)?;
        row.j_scaled = self.bench.scaled(row.j_truth)?;
        row.preferences = self.dataset.len();
        self.rows.push(row.clone());
        Ok(row)
    }

    fn proxy_partition(&self) -> Result<(usize, usize)> {
        let mut data = self.dataset.clone();
        let (p, m) = data.partition(&self.env.mdp, &self.env.proxy)?;
        Ok((p.len(), m.len()))
    }

    fn finish(
        self,
        config: &ExperimentConfig,
        reward: RewardFn,
        policy: PolicyTable,
        correction: Option<CorrectionModel>,
        beta_sweep: Vec<(f64, f64)>,
    ) -> RunResult {
        RunResult {
            config: config.clone(),
            benchmarks: self.bench,
            rows: self.rows,
            reward,
            policy,
            correction,
            records: self.records,
            dataset: self.dataset,
            wall_times: self.wall_times,
            visited_states: self.visited.iter().enumerate().filter(|(_, &v)| v).map(|(s, _)| s).collect(),
            beta_sweep,
        }
    }
}

fn empty_row(iteration: usize) -> RunRow {
    RunRow { iteration, preferences: 0, j_truth: 0.0, j_scaled: 0.0, d_plus: 0, d_minus: 0, lambda1: 0.0, lambda2: 0.0, loss: 0.0 }
}

/// Runs `config` on `env` with any labeler, reporting each iteration to `observe`.
pub fn run_with_oracle(
    config: &ExperimentConfig,
    env: &Environment,
    oracle: &mut dyn Oracle,
    observe: &mut dyn FnMut(&Progress),
) -> Result<RunResult> {
    config.validate()?;
    match config.method {
        MethodId::Pbrr | MethodId::PbrrCe | MethodId::PbrrLplusOnly | MethodId::PbrrLminusOnly | MethodId::Uniform => {
            run_repair_loop(config, env, oracle, observe)
        }
        MethodId::OnlineRlhf | MethodId::Rrm | MethodId::RrmStateConstraint => run_ensemble(config, env, oracle, observe),
        MethodId::StateConstrained => run_state_constrained(config, env, observe),
    }
}

/// Labeled pairs for one iteration of the repair loop.
fn repair_batch(
    config: &ExperimentConfig,
    mdp: &TabularMdp,
    first: &PolicyTable,
    second: &PolicyTable,
    iteration: usize,
) -> Result<Vec<(Trajectory, Trajectory)>> {
    match config.pairing {
        PairingMode::Support => {
            let s1 = trajectory_support(mdp, first, config.support_limit)?;
            let s2 = trajectory_support(mdp, second, config.support_limit)?;
            let mut pairs = Vec::with_capacity(s1.len() * s2.len());
            for (a, _) in &s1 {
                for (b, _) in &s2 {
                    pairs.push((a.clone(), b.clone()));
                }
            }
            Ok(pairs)
        }
        PairingMode::Rollout => {
            let k = config.pairs;
            let t1 = rollout(mdp, &rollout_policy(config, first), iteration_seed(config.seed, iteration, 1), k)?;
            let t2 = rollout(mdp, &rollout_policy(config, second), iteration_seed(config.seed, iteration, 2), k)?;
            let total = k * k;
            let intra = ((config.intra_fraction * total as f64).round() as usize).min(total);
            let cross = sample_cross_pairs(k, k, total - intra, iteration_seed(config.seed, iteration, 3))?;
            let mut pairs: Vec<(Trajectory, Trajectory)> =
                cross.into_iter().map(|(i, j)| (t1[i].clone(), t2[j].clone())).collect();
            if intra > 0 {
                let within = sample_cross_pairs(k, k, intra, iteration_seed(config.seed, iteration, 4))?;
                pairs.extend(within.into_iter().map(|(i, j)| (t1[i].clone(), t1[j].clone())));
            }
            Ok(pairs)
        }
    }
}

/// Uniformly random distinct arms from the start state of a fan MDP.
fn uniform_batch(config: &ExperimentConfig, mdp: &TabularMdp, iteration: usize) -> Result<Vec<(Trajectory, Trajectory)>> {
    let n_a = mdp.n_actions();
    if n_a < 2 || mdp.horizon() != 1 {
        return Err(RepairError::invalid("the uniform explorer needs a one-step MDP with two or more actions"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(iteration_seed(config.seed, iteration, 5));
    let arm = |a: usize, rng: &mut ChaCha8Rng| -> Result<Trajectory> {
        let single = PolicyTable::deterministic(n_a, &vec![a; mdp.n_states()])?;
        Ok(rollout(mdp, &single, rng.random(), 1)?.remove(0))
    };
    (0..config.batch_size())
        .map(|_| {
            let a = rng.random_range(0..n_a);
            let mut b = rng.random_range(0..n_a - 1);
            if b >= a {
                b += 1;
            }
            Ok((arm(a, &mut rng)?, arm(b, &mut rng)?))
        })
        .collect()
}

struct TheoryState {
    fmap: FeatureMap,
    confidence: ConfidenceState,
}

impl TheoryState {
    fn new(config: &ExperimentConfig, mdp: &TabularMdp) -> Result<Self> {
        let fmap = FeatureMap::one_hot_state_action(mdp);
        if fmap.dim() > MAX_THEORY_DIM {
            return Err(RepairError::invalid(format!(
                "c1 > 0 needs at most {MAX_THEORY_DIM} state-action features, this MDP has {}",
                fmap.dim()
            )));
        }
        let b = fmap.bound(mdp);
        let confidence = ConfidenceState::new(fmap.dim(), b, config.w_bound, (-1.0f64).exp(), config.c1, None)?;
        Ok(TheoryState { fmap, confidence })
    }

    fn select(
        &self,
        config: &ExperimentConfig,
        mdp: &TabularMdp,
        star: &PolicyTable,
        reference: &PolicyTable,
        iteration: usize,
    ) -> Result<(PolicyTable, PolicyTable)> {
        let mut set = candidate_policies(
            mdp,
            &self.fmap,
            &self.confidence,
            reference,
            star,
            config.iterations,
            iteration_seed(config.seed, iteration, 6),
        )?;
        let s = set.locate_or_insert(mdp, &self.fmap, star)?;
        let r = set.locate_or_insert(mdp, &self.fmap, reference)?;
        let (i, j) = select_exploration_pair(s, r, &set.features, &self.confidence, config.iterations)?;
        // keep the concrete policies when the pair is the default one
        let pick = |k: usize| if k == s { star.clone() } else if k == r { reference.clone() } else { set.policies[k].clone() };
        Ok((pick(i), pick(j)))
    }

    fn observe(&mut self, mdp: &TabularMdp, pairs: &[(Trajectory, Trajectory)], labels: &[Label]) -> Result<()> {
        for ((a, b), label) in pairs.iter().zip(labels) {
            let x: DVector<f64> = self.fmap.trajectory_features(mdp, a)? - self.fmap.trajectory_features(mdp, b)?;
            self.confidence.observe(x, 1.0 - label.mu(), 1.0)?;
        }
        self.confidence.refit()
    }
}

fn run_repair_loop(
    config: &ExperimentConfig,
    env: &Environment,
    oracle: &mut dyn Oracle,
    observe: &mut dyn FnMut(&Progress),
) -> Result<RunResult> {
    let mdp = &env.mdp;
    let variant = config.method.loss_variant().expect("repair methods have a loss variant");
    let basis = basis_for(config, env);
    let mut rec = Recorder::new(env)?;
    let mut theory = if config.c1 > 0.0 { Some(TheoryState::new(config, mdp)?) } else { None };

    let mut model = CorrectionModel::zeros(basis.clone(), Squash::Identity);
    let mut reward = env.proxy.clone();
    let mut policy = plan_optimal(mdp, &reward, PLAN_TOL)?.greedy;
    let w0 = variant.weights(config.lambda_base, 0);
    let row = rec.push_row(RunRow { lambda1: w0.lambda1, lambda2: w0.lambda2, ..empty_row(0) }, &policy)?;
    observe(&Progress { row: &row, reward: &reward, policy: &policy, correction: Some(&model) });

    for t in 1..=config.iterations {
        let start = Instant::now();
        let pairs = if config.method == MethodId::Uniform {
            uniform_batch(config, mdp, t)?
        } else {
            let (first, second) = match &theory {
                Some(th) => th.select(config, mdp, &policy, &env.reference, t)?,
                None => (policy.clone(), env.reference.clone()),
            };
            repair_batch(config, mdp, &first, &second, t)?
        };
        for (a, b) in &pairs {
            rec.visit(std::slice::from_ref(a));
            rec.visit(std::slice::from_ref(b));
        }
        let before = rec.dataset.len();
        rec.label(t, &pairs, oracle)?;
        if let Some(th) = theory.as_mut() {
            let labels: Vec<Label> = rec.dataset.samples()[before..].iter().map(|s| s.label).collect();
            th.observe(mdp, &pairs, &labels)?;
        }
        let partition_by = match config.partition {
            PartitionMode::Proxy => env.proxy.clone(),
            PartitionMode::Current => reward.clone(),
        };
        let fit = fit_repair(
            mdp,
            &env.proxy,
            &partition_by,
            &rec.dataset,
            basis.clone(),
            Squash::Identity,
            variant,
            config.lambda_base,
            &config.optimizer,
        )?;
        model = fit.model;
        reward = RewardFn::unbounded(mdp, (0..mdp.n_transitions()).map(|id| env.proxy.get(id) + model.value(id)).collect())?;
        policy = plan_optimal(mdp, &reward, PLAN_TOL)?.greedy;
        let row = rec.push_row(
            RunRow {
                d_plus: fit.d_plus,
                d_minus: fit.d_minus,
                lambda1: fit.weights.lambda1,
                lambda2: fit.weights.lambda2,
                loss: fit.loss.total,
                ..empty_row(t)
            },
            &policy,
        )?;
        rec.wall_times.push(start.elapsed().as_secs_f64());
        observe(&Progress { row: &row, reward: &reward, policy: &policy, correction: Some(&model) });
    }
    Ok(rec.finish(config, reward, policy, Some(model), Vec::new()))
}

fn run_ensemble(
    config: &ExperimentConfig,
    env: &Environment,
    oracle: &mut dyn Oracle,
    observe: &mut dyn FnMut(&Progress),
) -> Result<RunResult> {
    let mdp = &env.mdp;
    let basis = basis_for(config, env);
    let from_scratch = config.method == MethodId::OnlineRlhf;
    let (base, squash, size) = if from_scratch {
        (RewardFn::zeros(mdp), Squash::Identity, config.ensemble_size.unwrap_or(5))
    } else {
        (env.proxy.clone(), Squash::Tanh, config.ensemble_size.unwrap_or(3))
    };
    let mut ensemble = RewardEnsemble::new(base, basis, squash, size, 0.1, iteration_seed(config.seed, 0, 7))?;
    let constrained = config.method == MethodId::RrmStateConstraint;
    let mut rec = Recorder::new(env)?;
    let mut reference = env.reference.clone();
    let mut sweep = Vec::new();
    let plan_policy = |reward: &RewardFn, reference: &PolicyTable, sweep: &mut Vec<(f64, f64)>| -> Result<PolicyTable> {
        if constrained {
            let soft = reference.smoothed(config.reference_smoothing);
            let (_, policy, s) = select_beta(mdp, reward, &env.truth, &soft, &BETA_GRID)?;
            *sweep = s;
            Ok(policy)
        } else {
            Ok(plan_optimal(mdp, reward, PLAN_TOL)?.greedy)
        }
    };
    let mut reward = ensemble.mean_reward(mdp)?;
    let mut policy = plan_policy(&reward, &reference, &mut sweep)?;
    let row = rec.push_row(empty_row(0), &policy)?;
    observe(&Progress { row: &row, reward: &reward, policy: &policy, correction: None });

    for t in 1..=config.iterations {
        let start = Instant::now();
        let roll = rollout_policy(config, &policy);
        let roll_ref = rollout_policy(config, &env.reference);
        let inputs = StepInputs {
            mdp,
            policy: &roll,
            reference: Some(&roll_ref),
            budget: config.batch_size(),
            seed: iteration_seed(config.seed, t, 8),
            opt: &config.optimizer,
        };
        let mut counting = RecordingOracle { inner: oracle, pairs: Vec::new(), labels: Vec::new() };
        let mut data = std::mem::take(&mut rec.dataset);
        let outcome =
            if from_scratch { online_rlhf_step(&inputs, &mut ensemble, &mut data, &mut counting)? } else { rrm_step(&inputs, &mut ensemble, &mut data, &mut counting)? };
        rec.dataset = data;
        for s in &outcome.visited {
            rec.visited[*s] = true;
        }
        let base = rec.dataset.len() - counting.pairs.len();
        for (n, label) in counting.labels.iter().enumerate() {
            let s = rec.dataset.samples()[base + n];
            rec.records.push(PreferenceRecord {
                env: env.id.clone(),
                iteration: t,
                tau1: s.tau1,
                tau2: s.tau2,
                mu: *label,
                source: s.source,
                timestamp: unix_now(),
            });
        }
        reward = outcome.reward;
        if config.moving_reference {
            reference = policy.clone();
        }
        policy = if constrained { plan_policy(&reward, &reference, &mut sweep)? } else { outcome.policy };
        let (d_plus, d_minus) = rec.proxy_partition()?;
        let row = rec.push_row(RunRow { d_plus, d_minus, loss: outcome.loss, ..empty_row(t) }, &policy)?;
        rec.wall_times.push(start.elapsed().as_secs_f64());
        observe(&Progress { row: &row, reward: &reward, policy: &policy, correction: None });
    }
    Ok(rec.finish(config, reward, policy, None, sweep))
}

/// Passes labels through while remembering them.
struct RecordingOracle<'a> {
    inner: &'a mut dyn Oracle,
    pairs: Vec<(Trajectory, Trajectory)>,
    labels: Vec<Label>,
}

impl Oracle for RecordingOracle<'_> {
    fn source(&self) -> LabelSource {
        self.inner.source()
    }

    fn label_batch(&mut self, pairs: &[(Trajectory, Trajectory)]) -> Result<Vec<Label>> {
        let labels = self.inner.label_batch(pairs)?;
        self.pairs.extend_from_slice(pairs);
        self.labels.extend_from_slice(&labels);
        Ok(labels)
    }
}

fn run_state_constrained(config: &ExperimentConfig, env: &Environment, observe: &mut dyn FnMut(&Progress)) -> Result<RunResult> {
    let mdp = &env.mdp;
    let mut rec = Recorder::new(env)?;
    let mut reference = env.reference.clone();
    let mut policy = plan_optimal(mdp, &env.proxy, PLAN_TOL)?.greedy;
    let row = rec.push_row(empty_row(0), &policy)?;
    observe(&Progress { row: &row, reward: &env.proxy, policy: &policy, correction: None });
    let mut sweep = Vec::new();
    for t in 1..=config.iterations {
        let start = Instant::now();
        let soft = reference.smoothed(config.reference_smoothing);
        let (_, next, s) = select_beta(mdp, &env.proxy, &env.truth, &soft, &BETA_GRID)?;
        sweep = s;
        if config.moving_reference {
            reference = next.clone();
        }
        policy = next;
        let row = rec.push_row(empty_row(t), &policy)?;
        rec.wall_times.push(start.elapsed().as_secs_f64());
        observe(&Progress { row: &row, reward: &env.proxy, policy: &policy, correction: None });
    }
    Ok(rec.finish(config, env.proxy.clone(), policy, None, sweep))
}

/// `reward.json`: the repaired (or learned) reward keyed by transition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardFile {
    pub env: String,
    pub method: MethodId,
    pub seed: u64,
    pub gamma: Option<f64>,
    pub sprinkler_bonus: Option<f64>,
    pub random: Option<RandomMdpConfig>,
    pub correction: Option<CorrectionFile>,
    pub reward: Vec<RewardEntry>,
}

impl RewardFile {
    pub fn from_run(run: &RunResult, env: &Environment) -> Self {
        let c = &run.config;
        RewardFile {
            env: c.env.clone(),
            method: c.method,
            seed: c.seed,
            gamma: c.gamma,
            sprinkler_bonus: c.sprinkler_bonus,
            random: c.random.clone(),
            correction: run.correction.as_ref().map(|m| CorrectionFile::from_model(&c.env, &env.mdp, m, c.sprinkler_bonus)),
            reward: run.reward.to_entries(&env.mdp),
        }
    }

    pub fn env_options(&self) -> EnvOptions {
        EnvOptions { gamma: self.gamma, sprinkler_bonus: self.sprinkler_bonus, seed: self.seed, random: self.random.clone() }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn reward_fn(&self, mdp: &TabularMdp) -> Result<RewardFn> {
        let values = {
            let mut v = vec![0.0; mdp.n_transitions()];
            for e in &self.reward {
                let id = mdp
                    .transition_id(e.state, e.action, e.next)
                    .ok_or_else(|| RepairError::invalid(format!("({}, {}, {}) is not a transition", e.state, e.action, e.next)))?;
                v[id] = e.value;
            }
            v
        };
        RewardFn::unbounded(mdp, values)
    }
}

/// Writes `run.csv`, `reward.json`, `config.json`, `preferences.jsonl` and `timing.csv`.
pub fn write_outputs(dir: &Path, run: &RunResult, env: &Environment) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_run_csv(&dir.join("run.csv"), &run.rows)?;
    fs::write(dir.join("reward.json"), serde_json::to_string_pretty(&RewardFile::from_run(run, env))?)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(&run.config)?)?;
    let mut lines = String::new();
    for r in &run.records {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    fs::write(dir.join("preferences.jsonl"), lines)?;
    let mut w = csv::Writer::from_path(dir.join("timing.csv"))?;
    w.write_record(["iteration", "wall_time"])?;
    for (i, t) in run.wall_times.iter().enumerate() {
        w.write_record([(i + 1).to_string(), format!("{t:.6}")])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_run_csv(path: &Path, rows: &[RunRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_run_csv(path: &Path) -> Result<Vec<RunRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(RepairError::from)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrainReport {
    pub seeds: Vec<u64>,
    pub j: Vec<f64>,
    pub j_scaled: Vec<f64>,
    pub variance: f64,
}

/// Re-plans `reward` once per seed under a random tie-break perturbation of
/// size `perturbation` and a seed-dependent tolerance, reporting the spread of J.
pub fn run_retrain_check(env: &Environment, reward: &RewardFn, seeds: &[u64], perturbation: f64) -> Result<RetrainReport> {
    if seeds.is_empty() {
        return Err(RepairError::invalid("the retrain check needs at least one seed"));
    }
    if !(perturbation >= 0.0) {
        return Err(RepairError::invalid("perturbation must be non-negative"));
    }
    let bench = Benchmarks::of(env)?;
    let mdp = &env.mdp;
    let mut j = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = reward.values().iter().map(|&v| v + perturbation * (2.0 * rng.random::<f64>() - 1.0)).collect();
        let perturbed = RewardFn::unbounded(mdp, values)?;
        let tol = 10f64.powi(-(6 + (seed % 5) as i32));
        let policy = plan_optimal(mdp, &perturbed, tol)?.greedy;
        j.push(expected_return(mdp, &policy, &env.truth)?);
    }
    let j_scaled = j.iter().map(|&x| bench.scaled(x)).collect::<Result<Vec<_>>>()?;
    let mean = j.iter().sum::<f64>() / j.len() as f64;
    let variance = j.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / j.len() as f64;
    Ok(RetrainReport { seeds: seeds.to_vec(), j, j_scaled, variance })
}

/// Mean correction entering each grid cell (or each state off the grid).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    /// `(x, y, mean g)` for cells some transition enters.
    pub cells: Vec<(usize, usize, f64)>,
}

pub fn correction_heatmap(env: &Environment, correction: &[f64]) -> Result<Heatmap> {
    let mdp = &env.mdp;
    if correction.len() != mdp.n_transitions() {
        return Err(RepairError::invalid("correction does not match the MDP"));
    }
    let (width, height, n_keys) = match &env.grid {
        Some(g) => (g.spec.width, g.spec.height, g.n_cells()),
        None => (mdp.n_states(), 1, mdp.n_states()),
    };
    let mut sums = vec![(0.0, 0usize); n_keys];
    for (id, &g) in correction.iter().enumerate() {
        let (_, _, next) = mdp.transition(id);
        let key = match &env.grid {
            Some(grid) => grid.decode(next).0,
            None => next,
        };
        sums[key].0 += g;
        sums[key].1 += 1;
    }
    let cells = sums
        .iter()
        .enumerate()
        .filter(|(_, (_, n))| *n > 0)
        .map(|(key, &(total, n))| {
            let (x, y) = match &env.grid {
                Some(grid) => grid.cells[key],
                None => (key, 0),
            };
            (x, y, total / n as f64)
        })
        .collect();
    Ok(Heatmap { width, height, cells })
}

/// The greedy path from the start and, on grids, the action per cell with nothing watered.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyView {
    pub actions: Vec<(usize, usize, usize)>,
    pub path: Vec<(usize, usize)>,
}

pub fn policy_view(env: &Environment, policy: &PolicyTable) -> Result<PolicyView> {
    let mdp = &env.mdp;
    policy.check_compatible(mdp)?;
    let best = |s: usize| -> usize {
        let probs = policy.action_probs(s);
        (0..probs.len()).fold(0, |b, a| if probs[a] > probs[b] { a } else { b })
    };
    let mut s = mdp.start_dist().iter().position(|&p| p > 0.0).unwrap_or(0);
    let mut states = vec![s];
    for _ in 0..mdp.horizon() {
        let a = best(s);
        s = mdp.successors(s, a).iter().fold((0, -1.0), |b, &(n, p)| if p > b.1 { (n, p) } else { b }).0;
        states.push(s);
    }
    let place = |s: usize| -> (usize, usize) {
        match &env.grid {
            Some(g) => g.cell_of_state(s),
            None => (s, 0),
        }
    };
    let actions = match &env.grid {
        Some(g) => (0..g.n_cells()).map(|c| {
            let (x, y) = g.cells[c];
            (x, y, best(g.state(c, 0)))
        }).collect(),
        None => (0..mdp.n_states()).map(|s| (s, 0, best(s))).collect(),
    };
    Ok(PolicyView { actions, path: states.into_iter().map(place).collect() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Idle,
    Running,
    /// Waiting for human labels.
    Waiting,
    Finished,
    Failed,
}

/// State shared between a human-labeled run and the API server.
#[derive(Debug)]
pub struct Session {
    pub status: SessionStatus,
    pub message: Option<String>,
    pub iteration: usize,
    pub queue: HumanQueue,
    /// Every human label consumed by the run, verbatim.
    pub labeled: Vec<(u64, PreferenceSample)>,
    pub curve: Vec<RunRow>,
    pub correction: Vec<f64>,
    pub policy: PolicyTable,
}

/// A session behind one lock; label submissions wake the waiting run.
#[derive(Debug)]
pub struct SessionStore {
    pub env: Arc<Environment>,
    state: Mutex<Session>,
    changed: Condvar,
}

impl SessionStore {
    pub fn new(env: Arc<Environment>, queue: HumanQueue) -> Result<Self> {
        let policy = plan_optimal(&env.mdp, &env.proxy, PLAN_TOL)?.greedy;
        let session = Session {
            status: SessionStatus::Idle,
            message: None,
            iteration: 0,
            queue,
            labeled: Vec::new(),
            curve: Vec::new(),
            correction: vec![0.0; env.mdp.n_transitions()],
            policy,
        };
        Ok(SessionStore { env, state: Mutex::new(session), changed: Condvar::new() })
    }

    pub fn lock(&self) -> MutexGuard<'_, Session> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn next_pair(&self) -> Option<PendingPair> {
        self.lock().queue.next_pending().cloned()
    }

    /// Records a human label and wakes the run.
    pub fn submit(&self, id: u64, mu: f64) -> Result<()> {
        self.lock().queue.label(id, mu)?;
        self.changed.notify_all();
        Ok(())
    }

    /// Observer that mirrors a run's progress into the session.
    pub fn record(&self, progress: &Progress) {
        let mut s = self.lock();
        s.iteration = progress.row.iteration;
        s.curve.push(progress.row.clone());
        if let Some(m) = progress.correction {
            s.correction = m.values();
        }
        s.policy = progress.policy.clone();
    }

    pub fn set_status(&self, status: SessionStatus, message: Option<String>) {
        let mut s = self.lock();
        s.status = status;
        s.message = message;
    }
}

/// Labels come from whoever answers through the session's queue.
pub struct HumanOracle {
    store: Arc<SessionStore>,
    timeout: Duration,
}

impl HumanOracle {
    pub fn new(store: Arc<SessionStore>, timeout: Duration) -> Self {
        HumanOracle { store, timeout }
    }
}

impl Oracle for HumanOracle {
    fn source(&self) -> LabelSource {
        LabelSource::Human
    }

    fn label_batch(&mut self, pairs: &[(Trajectory, Trajectory)]) -> Result<Vec<Label>> {
        let deadline = Instant::now() + self.timeout;
        let mut s = self.store.lock();
        let ids = s.queue.enqueue(pairs.to_vec())?;
        s.status = SessionStatus::Waiting;
        loop {
            let done = s.queue.dequeue_labeled()?;
            s.labeled.extend(done);
            let found: Vec<Option<Label>> =
                ids.iter().map(|id| s.labeled.iter().find(|(l, _)| l == id).map(|(_, p)| p.label)).collect();
            if found.iter().all(Option::is_some) {
                s.status = SessionStatus::Running;
                return Ok(found.into_iter().map(|l| l.expect("checked")).collect());
            }
            let now = Instant::now();
            if now >= deadline {
                s.status = SessionStatus::Failed;
                return Err(RepairError::Timeout(format!("{} human labels", found.iter().filter(|l| l.is_none()).count())));
            }
            s = self.store.changed.wait_timeout(s, deadline - now).unwrap_or_else(|p| p.into_inner()).0;
        }
    }
}

/// Runs a human-labeled experiment against `store`, updating it as the run progresses.
pub fn run_human_session(config: &ExperimentConfig, store: Arc<SessionStore>) -> Result<RunResult> {
    let env = store.env.clone();
    store.set_status(SessionStatus::Running, None);
    let mut oracle = HumanOracle::new(store.clone(), Duration::from_secs(config.human_timeout_secs));
    let observer = store.clone();
    let result = run_with_oracle(config, &env, &mut oracle, &mut |p| observer.record(p));
    match &result {
        Ok(_) => store.set_status(SessionStatus::Finished, None),
        Err(e) => store.set_status(SessionStatus::Failed, Some(e.to_string())),
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaled_return_examples() {
        assert_eq!(scaled_return(0.5, 0.5, 0.9).unwrap(), 0.0);
        assert_eq!(scaled_return(0.9, 0.5, 0.9).unwrap(), 1.0);
        assert_eq!(scaled_return(-10.0, 0.5, 0.9).unwrap(), -1.0);
        assert!(scaled_return(1.0, 0.5, 0.5).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in MethodId::ALL {
            assert_eq!(m.name().parse::<MethodId>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
        assert!("ppo".parse::<MethodId>().is_err());
    }

    #[test]
    fn config_validation() {
        let ok = ExperimentConfig::default();
        ok.validate().unwrap();
        for bad in [
            ExperimentConfig { iterations: 0, ..ok.clone() },
            ExperimentConfig { pairs: 0, ..ok.clone() },
            ExperimentConfig { env: "atari".into(), ..ok.clone() },
            ExperimentConfig { method: MethodId::Uniform, ..ok.clone() },
            ExperimentConfig { method: MethodId::Rrm, pairing: PairingMode::Support, ..ok.clone() },
            ExperimentConfig { temperature: 0.0, ..ok.clone() },
            ExperimentConfig { intra_fraction: 1.5, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn mdp1_repairs_after_one_preference() {
        let cfg = ExperimentConfig {
            env: "mdp1".into(),
            labeler: LabelerKind::Regret,
            iterations: 1,
            pairs: 1,
            ..ExperimentConfig::default()
        };
        let run = run_experiment(&cfg).unwrap();
        assert_eq!(run.rows.len(), 2);
        assert!(run.rows[0].j_scaled < 0.0);
        assert_eq!(run.rows[1].preferences, 1);
        assert_eq!(run.rows[1].j_scaled, 1.0);
        assert_eq!(run.policy.action(0), Some(3));
    }

    #[test]
    fn state_constrained_records_no_preferences() {
        let cfg = ExperimentConfig { env: "mdp1".into(), method: MethodId::StateConstrained, iterations: 2, ..ExperimentConfig::default() };
        let run = run_experiment(&cfg).unwrap();
        assert!(run.rows.iter().all(|r| r.preferences == 0));
        assert_eq!(run.beta_sweep.len(), BETA_GRID.len());
    }

    #[test]
    fn human_oracle_times_out() {
        let env = Arc::new(Environment::load("mdp1", &EnvOptions::default()).unwrap());
        let store = Arc::new(SessionStore::new(env, HumanQueue::in_memory()).unwrap());
        let mut oracle = HumanOracle::new(store.clone(), Duration::from_millis(20));
        let t = Trajectory::new(vec![0, 1], vec![0]).unwrap();
        let err = oracle.label_batch(&[(t.clone(), t)]).unwrap_err();
        assert!(matches!(err, RepairError::Timeout(_)));
        assert_eq!(store.lock().queue.pending_len(), 1);
    }
}
