//! Comparison methods: a from-scratch reward ensemble with uncertainty
//! pairing, ensemble corrections with own-policy pairing, divergence-penalized
//! planning, and a uniform explorer for the fan MDPs.

use std::collections::HashSet;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{RepairError, Result};
use crate::mdp::{expected_return, plan_optimal, rollout, PolicyTable, RewardFn, TabularMdp, Trajectory};
use crate::preferences::{sigmoid, Label, LabelSource, Oracle, PreferenceDataset, RegretLabeler};
use crate::repair::{
    fit_from, fit_repair, CorrectionBasis, CorrectionModel, FitProblem, LossVariant, LossWeights, OptimizerConfig,
    Squash,
};

/// Largest own-policy candidate batch.
pub const MAX_CANDIDATES: usize = 200;

/// Independently initialized reward models trained on the same data.
/// Each member predicts `base + member`.
#[derive(Clone, Debug)]
pub struct RewardEnsemble {
    pub base: RewardFn,
    pub members: Vec<CorrectionModel>,
    pub init_std: f64,
    seed: u64,
    fits: u64,
}

impl RewardEnsemble {
    pub fn new(base: RewardFn, basis: Arc<CorrectionBasis>, squash: Squash, size: usize, init_std: f64, seed: u64) -> Result<Self> {
        if size < 2 {
            return Err(RepairError::invalid("an ensemble needs at least two members"));
        }
        if !(init_std >= 0.0) {
            return Err(RepairError::invalid("initial spread must be non-negative"));
        }
        let members = (0..size)
            .map(|m| CorrectionModel::with_theta(basis.clone(), squash, init_theta(basis.n_params(), init_std, seed, 0, m)))
            .collect::<Result<_>>()?;
        Ok(RewardEnsemble { base, members, init_std, seed, fits: 0 })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Refits every member from a fresh random start with the plain cross-entropy.
    pub fn refit(&mut self, mdp: &TabularMdp, dataset: &PreferenceDataset, opt: &OptimizerConfig) -> Result<f64> {
        if dataset.is_empty() {
            return Ok(0.0);
        }
        self.fits += 1;
        let basis = self.members[0].basis.clone();
        let squash = self.members[0].squash;
        let problem = FitProblem::new(mdp, &self.base, &self.base, dataset, basis.clone(), squash)?;
        let mut total = 0.0;
        for m in 0..self.members.len() {
            let theta = init_theta(basis.n_params(), self.init_std, self.seed, self.fits, m);
            let report = fit_from(&problem, theta, LossWeights::ZERO, opt)?;
            total += report.final_loss.total;
            self.members[m] = report.model;
        }
        Ok(total / self.members.len() as f64)
    }

    fn member_return(&self, m: usize, mdp: &TabularMdp, ids: &[usize]) -> f64 {
        let gamma = mdp.gamma();
        let mut discount = 1.0;
        let mut total = 0.0;
        for &id in ids {
            total += discount * (self.base.get(id) + self.members[m].value(id));
            discount *= gamma;
        }
        total
    }

    /// `P(tau1 > tau2)` under every member.
    pub fn pair_probs(&self, mdp: &TabularMdp, tau1: &Trajectory, tau2: &Trajectory) -> Result<Vec<f64>> {
        let (a, b) = (tau1.transition_ids(mdp)?, tau2.transition_ids(mdp)?);
        Ok((0..self.members.len()).map(|m| sigmoid(self.member_return(m, mdp, &a) - self.member_return(m, mdp, &b))).collect())
    }

    /// `base + mean_m g_m`.
    pub fn mean_reward(&self, mdp: &TabularMdp) -> Result<RewardFn> {
        let n = self.members.len() as f64;
        let values = (0..mdp.n_transitions())
            .map(|id| self.base.get(id) + self.members.iter().map(|m| m.value(id)).sum::<f64>() / n)
            .collect();
        RewardFn::unbounded(mdp, values)
    }
}

fn init_theta(n: usize, std: f64, seed: u64, fit: u64, member: usize) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; n];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fit.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ ((member as u64) << 48));
    let normal = Normal::new(0.0, std).expect("finite spread");
    (0..n).map(|_| normal.sample(&mut rng)).collect()
}

/// Population variance of member probabilities; at most 1/4.
pub fn preference_variance(probs: &[f64]) -> f64 {
    if probs.is_empty() {
        return 0.0;
    }
    let n = probs.len() as f64;
    let mean = probs.iter().sum::<f64>() / n;
    probs.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n
}

/// Pair indices sorted by decreasing variance; equal variances keep their order.
pub fn rank_by_variance(variances: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..variances.len()).collect();
    order.sort_by(|&a, &b| variances[b].total_cmp(&variances[a]));
    order
}

/// Distinct trajectories in first-seen order.
pub fn unique_trajectories(batches: &[Vec<Trajectory>]) -> Vec<Trajectory> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for t in batches.iter().flatten() {
        if seen.insert(t.clone()) {
            out.push(t.clone());
        }
    }
    out
}

/// The `budget` most uncertain pairs among `candidates` in canonical
/// `(i < j)` order. Cycles through the ranking when fewer pairs exist.
pub fn select_uncertain_pairs(
    mdp: &TabularMdp,
    ensemble: &RewardEnsemble,
    candidates: &[Trajectory],
    budget: usize,
) -> Result<Vec<(usize, usize)>> {
    if candidates.is_empty() || budget == 0 {
        return Ok(Vec::new());
    }
    let mut pairs = Vec::new();
    for i in 0..candidates.len() {
        for j in i + 1..candidates.len() {
            pairs.push((i, j));
        }
    }
    if pairs.is_empty() {
        return Ok(vec![(0, 0); budget]);
    }
    let variances = pairs
        .iter()
        .map(|&(i, j)| Ok(preference_variance(&ensemble.pair_probs(mdp, &candidates[i], &candidates[j])?)))
        .collect::<Result<Vec<f64>>>()?;
    let order = rank_by_variance(&variances);
    Ok((0..budget).map(|n| pairs[order[n % order.len()]]).collect())
}

/// Result of one baseline iteration.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub policy: PolicyTable,
    pub reward: RewardFn,
    pub labeled: usize,
    pub loss: f64,
    /// Every state the candidate rollouts passed through.
    pub visited: Vec<usize>,
}

/// Shared inputs of an ensemble step.
pub struct StepInputs<'a> {
    pub mdp: &'a TabularMdp,
    pub policy: &'a PolicyTable,
    pub reference: Option<&'a PolicyTable>,
    /// Labels requested this step.
    pub budget: usize,
    pub seed: u64,
    pub opt: &'a OptimizerConfig,
}

fn ensemble_step(
    inputs: &StepInputs,
    ensemble: &mut RewardEnsemble,
    dataset: &mut PreferenceDataset,
    oracle: &mut dyn Oracle,
) -> Result<StepOutcome> {
    let mdp = inputs.mdp;
    let n = MAX_CANDIDATES.min(inputs.budget).max(1);
    let mut batches = vec![rollout(mdp, inputs.policy, inputs.seed, n)?];
    if let Some(reference) = inputs.reference {
        batches.push(rollout(mdp, reference, inputs.seed ^ 0x5bd1_e995, n)?);
    }
    let mut visited: Vec<usize> = batches.iter().flatten().flat_map(|t| t.states.iter().copied()).collect();
    visited.sort_unstable();
    visited.dedup();
    let candidates = unique_trajectories(&batches);
    let chosen = select_uncertain_pairs(mdp, ensemble, &candidates, inputs.budget)?;
    let pairs: Vec<(Trajectory, Trajectory)> =
        chosen.iter().map(|&(i, j)| (candidates[i].clone(), candidates[j].clone())).collect();
    let labels = oracle.label_batch(&pairs)?;
    let source = oracle.source();
    for ((a, b), label) in pairs.iter().zip(labels) {
        let (ia, ib) = (dataset.intern(a), dataset.intern(b));
        dataset.push_ids(ia, ib, label, source);
    }
    let loss = ensemble.refit(mdp, dataset, inputs.opt)?;
    let reward = ensemble.mean_reward(mdp)?;
    let policy = plan_optimal(mdp, &reward, 1e-8)?.greedy;
    Ok(StepOutcome { policy, reward, labeled: pairs.len(), loss, visited })
}

/// From-scratch ensemble: candidates are current-policy and reference
/// rollouts, the most uncertain pairs are labeled, members refit from random
/// starts, and the policy plans on the mean reward.
pub fn online_rlhf_step(
    inputs: &StepInputs,
    ensemble: &mut RewardEnsemble,
    dataset: &mut PreferenceDataset,
    oracle: &mut dyn Oracle,
) -> Result<StepOutcome> {
    if inputs.reference.is_none() {
        return Err(RepairError::invalid("online RLHF samples reference rollouts too"));
    }
    ensemble_step(inputs, ensemble, dataset, oracle)
}

/// Ensemble of tanh-squashed corrections on the proxy, paired on own-policy
/// rollouts only.
pub fn rrm_step(
    inputs: &StepInputs,
    ensemble: &mut RewardEnsemble,
    dataset: &mut PreferenceDataset,
    oracle: &mut dyn Oracle,
) -> Result<StepOutcome> {
    let own = StepInputs { reference: None, ..*inputs };
    ensemble_step(&own, ensemble, dataset, oracle)
}

/// Maximizes `J_r(pi) - beta * E[sum_t gamma^t KL(pi(.|s_t) || pi_ref(.|s_t))]`
/// by soft value iteration. Actions the reference never takes are excluded.
/// `beta = 0` is plain planning.
pub fn kl_regularized_planning(mdp: &TabularMdp, reward: &RewardFn, reference: &PolicyTable, beta: f64, tol: f64) -> Result<PolicyTable> {
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(RepairError::invalid(format!("beta {beta} must be finite and non-negative")));
    }
    reference.check_compatible(mdp)?;
    if beta == 0.0 {
        return Ok(plan_optimal(mdp, reward, tol)?.greedy);
    }
    let (n_s, n_a) = (mdp.n_states(), mdp.n_actions());
    let gamma = mdp.gamma();
    let q_of = |values: &[f64], s: usize, a: usize| -> f64 {
        let base = mdp.row_ids(s, a).start;
        mdp.successors(s, a).iter().enumerate().map(|(k, &(next, p))| p * (reward.get(base + k) + gamma * values[next])).sum()
    };
    let soft_max = |q: &[f64], s: usize| -> f64 {
        let m = (0..n_a).filter(|&a| reference.prob(s, a) > 0.0).map(|a| q[a]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..n_a)
            .filter(|&a| reference.prob(s, a) > 0.0)
            .map(|a| reference.prob(s, a) * ((q[a] - m) / beta).exp())
            .sum();
        m + beta * z.ln()
    };
    let finite = gamma >= 1.0;
    let max_sweeps = if finite { mdp.horizon() } else { 10_000_000 };
    let mut values = vec![0.0; n_s];
    let mut next = vec![0.0; n_s];
    let mut q = vec![0.0; n_a];
    for _ in 0..max_sweeps {
        let mut residual: f64 = 0.0;
        for s in 0..n_s {
            for (a, qa) in q.iter_mut().enumerate() {
                *qa = q_of(&values, s, a);
            }
            next[s] = soft_max(&q, s);
            residual = residual.max((next[s] - values[s]).abs());
        }
        std::mem::swap(&mut values, &mut next);
        if !residual.is_finite() {
            return Err(RepairError::Divergence("soft value iteration diverged".into()));
        }
        if !finite && residual <= tol {
            break;
        }
    }
    let mut probs = vec![0.0; n_s * n_a];
    for s in 0..n_s {
        for (a, qa) in q.iter_mut().enumerate() {
            *qa = q_of(&values, s, a);
        }
        let v = soft_max(&q, s);
        let row = &mut probs[s * n_a..(s + 1) * n_a];
        for a in 0..n_a {
            let p = reference.prob(s, a);
            row[a] = if p > 0.0 { p * ((q[a] - v) / beta).exp() } else { 0.0 };
        }
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= total);
    }
    PolicyTable::stochastic(n_s, n_a, probs)
}

/// The divergence weights searched for the constrained baselines.
pub const BETA_GRID: [f64; 5] = [0.8, 0.16, 0.08, 0.04, 0.008];

/// Best `beta` on the grid by ground-truth return, with every point's return.
pub fn select_beta(
    mdp: &TabularMdp,
    reward: &RewardFn,
    truth: &RewardFn,
    reference: &PolicyTable,
    grid: &[f64],
) -> Result<(f64, PolicyTable, Vec<(f64, f64)>)> {
    let mut best: Option<(f64, PolicyTable, f64)> = None;
    let mut sweep = Vec::with_capacity(grid.len());
    for &beta in grid {
        let policy = kl_regularized_planning(mdp, reward, reference, beta, 1e-8)?;
        let j = expected_return(mdp, &policy, truth)?;
        sweep.push((beta, j));
        if best.as_ref().is_none_or(|b| j > b.2) {
            best = Some((beta, policy, j));
        }
    }
    let (beta, policy, _) = best.ok_or_else(|| RepairError::invalid("empty beta grid"))?;
    Ok((beta, policy, sweep))
}

/// Rounds until a uniform explorer's repaired reward plans a truth-optimal
/// action on a fan MDP. Each round labels two distinct uniformly random
/// actions by regret and refits the repair loss.
pub fn uniform_explorer(
    mdp: &TabularMdp,
    truth: &RewardFn,
    proxy: &RewardFn,
    opt: &OptimizerConfig,
    seed: u64,
    max_rounds: usize,
) -> Result<usize> {
    let n_a = mdp.n_actions();
    if n_a < 2 || mdp.horizon() != 1 {
        return Err(RepairError::invalid("the uniform explorer needs a one-step MDP with at least two actions"));
    }
    let s0 = mdp
        .start_dist()
        .iter()
        .position(|&p| p == 1.0)
        .ok_or_else(|| RepairError::invalid("the uniform explorer needs a single start state"))?;
    let labeler = RegretLabeler::new(mdp, truth)?;
    let optimum = expected_return(mdp, &plan_optimal(mdp, truth, 1e-12)?.greedy, truth)?;
    let basis = Arc::new(CorrectionBasis::tabular(mdp));
    let is_optimal = |reward: &RewardFn| -> Result<bool> {
        let policy = plan_optimal(mdp, reward, 1e-12)?.greedy;
        Ok(expected_return(mdp, &policy, truth)? >= optimum - 1e-9)
    };
    if is_optimal(proxy)? {
        return Ok(0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dataset = PreferenceDataset::new();
    let step = |a: usize, rng: &mut ChaCha8Rng| -> Result<Trajectory> {
        let succ = mdp.successors(s0, a);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let next = succ.iter().find(|(_, p)| {
            acc += p;
            u < acc
        });
        Trajectory::new(vec![s0, next.unwrap_or(&succ[succ.len() - 1]).0], vec![a])
    };
    for round in 1..=max_rounds {
        let a = rng.random_range(0..n_a);
        let mut b = rng.random_range(0..n_a - 1);
        if b >= a {
            b += 1;
        }
        let (t1, t2) = (step(a, &mut rng)?, step(b, &mut rng)?);
        let label: Label = labeler.label(&t1, &t2);
        let (i, j) = (dataset.intern(&t1), dataset.intern(&t2));
        dataset.push_ids(i, j, label, LabelSource::Regret);
        let fit = fit_repair(mdp, proxy, proxy, &dataset, basis.clone(), Squash::Identity, LossVariant::Full, 10.0, opt)?;
        let repaired: Vec<f64> = (0..mdp.n_transitions()).map(|id| proxy.get(id) + fit.model.value(id)).collect();
        if is_optimal(&RewardFn::unbounded(mdp, repaired)?)? {
            return Ok(round);
        }
    }
    Err(RepairError::Timeout(format!("no optimal policy within {max_rounds} rounds")))
}
