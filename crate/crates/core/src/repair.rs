//! The additive correction `g`, Bradley-Terry probabilities, the plain
//! cross-entropy loss and the three-term repair loss with its gradient and
//! a deterministic full-batch fitter.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::environments::Gridworld;
use crate::error::{RepairError, Result};
use crate::mdp::{RewardFn, TabularMdp, Trajectory};
use crate::preferences::{classify, sigmoid, softplus, Label, Partition, PreferenceDataset};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisKind {
    /// One parameter per transition.
    Tabular,
    /// One parameter per destination cell plus one per tomato watering event.
    Grid,
    Custom,
}

/// Linear map from parameters to per-transition correction values.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrectionBasis {
    kind: BasisKind,
    n_params: usize,
    /// CSR rows over transition ids; `None` means the identity map.
    offsets: Option<Vec<usize>>,
    entries: Vec<(usize, f64)>,
    n_transitions: usize,
}

impl CorrectionBasis {
    pub fn tabular(mdp: &TabularMdp) -> Self {
        CorrectionBasis {
            kind: BasisKind::Tabular,
            n_params: mdp.n_transitions(),
            offsets: None,
            entries: Vec::new(),
            n_transitions: mdp.n_transitions(),
        }
    }

    /// Parameters tied across watered masks: the destination cell, plus a
    /// watering-event parameter for each tomato.
    pub fn grid(grid: &Gridworld, mdp: &TabularMdp) -> Self {
        let n_cells = grid.n_cells();
        let rows = (0..mdp.n_transitions())
            .map(|id| {
                let (s, _, next) = mdp.transition(id);
                let (_, mask) = grid.decode(s);
                let (next_cell, _) = grid.decode(next);
                let mut row = vec![(next_cell, 1.0)];
                if let (_, Some(i)) = grid.water(mask, next_cell) {
                    row.push((n_cells + i, 1.0));
                }
                row
            })
            .collect();
        let mut basis = Self::from_rows(n_cells + grid.n_tomatoes(), rows).expect("grid basis rows are in range");
        basis.kind = BasisKind::Grid;
        basis
    }

    /// Arbitrary sparse features, one row per transition id.
    pub fn from_rows(n_params: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut entries = Vec::new();
        offsets.push(0);
        for row in &rows {
            for &(p, w) in row {
                if p >= n_params || !w.is_finite() {
                    return Err(RepairError::invalid(format!("basis entry ({p}, {w}) is invalid")));
                }
                entries.push((p, w));
            }
            offsets.push(entries.len());
        }
        Ok(CorrectionBasis { kind: BasisKind::Custom, n_params, offsets: Some(offsets), entries, n_transitions: rows.len() })
    }

    pub fn kind(&self) -> BasisKind {
        self.kind
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn n_transitions(&self) -> usize {
        self.n_transitions
    }

    /// `(param, weight)` pairs of a transition.
    pub fn row(&self, id: usize) -> &[(usize, f64)] {
        match &self.offsets {
            Some(o) => &self.entries[o[id]..o[id + 1]],
            None => &[],
        }
    }

    /// Pre-squash linear value `psi(id) . theta`.
    pub fn linear(&self, theta: &[f64], id: usize) -> f64 {
        match &self.offsets {
            None => theta[id],
            Some(_) => self.row(id).iter().map(|&(p, w)| w * theta[p]).sum(),
        }
    }

    /// Calls `f(param, weight)` for every feature of a transition.
    fn for_each(&self, id: usize, mut f: impl FnMut(usize, f64)) {
        match &self.offsets {
            None => f(id, 1.0),
            Some(_) => self.row(id).iter().for_each(|&(p, w)| f(p, w)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Squash {
    #[default]
    Identity,
    /// Bounds each transition's correction to (-1, 1).
    Tanh,
}

impl Squash {
    fn apply(self, z: f64) -> f64 {
        match self {
            Squash::Identity => z,
            Squash::Tanh => z.tanh(),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Squash::Identity => 1.0,
            Squash::Tanh => 1.0 - z.tanh().powi(2),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrectionModel {
    pub basis: Arc<CorrectionBasis>,
    pub theta: Vec<f64>,
    pub squash: Squash,
}

impl CorrectionModel {
    /// The all-zero correction.
    pub fn zeros(basis: Arc<CorrectionBasis>, squash: Squash) -> Self {
        let theta = vec![0.0; basis.n_params()];
        CorrectionModel { basis, theta, squash }
    }

    pub fn with_theta(basis: Arc<CorrectionBasis>, squash: Squash, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != basis.n_params() {
            return Err(RepairError::invalid(format!("{} parameters for a basis of {}", theta.len(), basis.n_params())));
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(RepairError::invalid("correction parameters must be finite"));
        }
        Ok(CorrectionModel { basis, theta, squash })
    }

    /// `g` on one transition.
    pub fn value(&self, id: usize) -> f64 {
        self.squash.apply(self.basis.linear(&self.theta, id))
    }

    /// `g` on every transition.
    pub fn values(&self) -> Vec<f64> {
        (0..self.basis.n_transitions()).map(|id| self.value(id)).collect()
    }

    /// Discounted correction along a trajectory.
    pub fn trajectory_value(&self, mdp: &TabularMdp, traj: &Trajectory) -> Result<f64> {
        let ids = traj.transition_ids(mdp)?;
        Ok(crate::mdp::discounted_sum(mdp.gamma(), ids.into_iter().map(|id| self.value(id))))
    }
}

/// `proxy + g`.
#[derive(Clone, Debug)]
pub struct RepairedReward {
    pub proxy: RewardFn,
    pub correction: CorrectionModel,
}

impl RepairedReward {
    pub fn new(proxy: RewardFn, correction: CorrectionModel) -> Result<Self> {
        if correction.basis.n_transitions() != proxy.values().len() {
            return Err(RepairError::invalid("correction basis does not match the proxy table"));
        }
        Ok(RepairedReward { proxy, correction })
    }

    pub fn evaluate(&self, id: usize) -> f64 {
        self.proxy.get(id) + self.correction.value(id)
    }

    /// Materialized reward table (unbounded; the correction may be large).
    pub fn reward_fn(&self, mdp: &TabularMdp) -> Result<RewardFn> {
        let values = (0..self.proxy.values().len()).map(|id| self.evaluate(id)).collect();
        RewardFn::unbounded(mdp, values)
    }

    pub fn trajectory_return(&self, mdp: &TabularMdp, traj: &Trajectory) -> Result<f64> {
        let ids = traj.transition_ids(mdp)?;
        Ok(crate::mdp::discounted_sum(mdp.gamma(), ids.into_iter().map(|id| self.evaluate(id))))
    }
}

/// Bradley-Terry `P(tau1 > tau2) = sigmoid(r(tau1) - r(tau2))`.
pub fn pref_prob(rhat: &RepairedReward, mdp: &TabularMdp, tau1: &Trajectory, tau2: &Trajectory) -> Result<f64> {
    let d = rhat.trajectory_return(mdp, tau1)? - rhat.trajectory_return(mdp, tau2)?;
    // both orders go through sigmoid of the non-negative gap, so they sum to exactly 1
    Ok(if d >= 0.0 { sigmoid(d) } else { 1.0 - sigmoid(-d) })
}

/// Cross-entropy of one sample with return gap `d = r(tau1) - r(tau2)`.
pub fn sample_ce(d: f64, mu: f64) -> f64 {
    // -log sigmoid(d) = softplus(-d), -log sigmoid(-d) = softplus(d)
    (1.0 - mu) * softplus(-d) + mu * softplus(d)
}

/// Summed cross-entropy of every sample under an arbitrary reward table.
pub fn ce_loss(reward: &RewardFn, mdp: &TabularMdp, dataset: &PreferenceDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(RepairError::invalid("cross-entropy of an empty dataset"));
    }
    let returns: Vec<f64> =
        dataset.trajectories().iter().map(|t| reward.trajectory_return(mdp, t)).collect::<Result<_>>()?;
    Ok(dataset.samples().iter().map(|s| sample_ce(returns[s.tau1] - returns[s.tau2], s.label.mu())).sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossWeights {
    pub const ZERO: LossWeights = LossWeights { lambda1: 0.0, lambda2: 0.0 };

    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        if !(lambda1 >= 0.0 && lambda2 >= 0.0) || !lambda1.is_finite() || !lambda2.is_finite() {
            return Err(RepairError::invalid("regularizer weights must be finite and non-negative"));
        }
        Ok(LossWeights { lambda1, lambda2 })
    }
}

/// `base / |D+|`, or `base` when no sample agrees yet.
pub fn lambda_schedule(base: f64, d_plus_size: usize) -> f64 {
    if d_plus_size == 0 {
        base
    } else {
        base / d_plus_size as f64
    }
}

/// Which reward decides agreement.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionMode {
    /// The original proxy.
    #[default]
    Proxy,
    /// The repaired reward being refit (the previous iteration's `proxy + g`).
    Current,
}

#[derive(Clone, Copy, Debug)]
struct PreparedSample {
    a: usize,
    b: usize,
    mu: f64,
    weight: f64,
    part: Partition,
    preferred: Option<usize>,
}

/// A dataset compiled against one basis: unique trajectories as sparse
/// discounted transition counts, duplicate samples merged into weights.
#[derive(Clone, Debug)]
pub struct FitProblem {
    basis: Arc<CorrectionBasis>,
    squash: Squash,
    /// Global transition id of each local slot.
    used: Vec<usize>,
    proxy_returns: Vec<f64>,
    /// Per trajectory: `(local slot, discounted count)`.
    terms: Vec<Vec<(usize, f64)>>,
    samples: Vec<PreparedSample>,
    plus_weight: f64,
    minus_weight: f64,
}

impl FitProblem {
    /// Compiles `dataset`, tagging samples by their agreement with `reference`.
    pub fn new(
        mdp: &TabularMdp,
        proxy: &RewardFn,
        reference: &RewardFn,
        dataset: &PreferenceDataset,
        basis: Arc<CorrectionBasis>,
        squash: Squash,
    ) -> Result<Self> {
        if basis.n_transitions() != mdp.n_transitions() {
            return Err(RepairError::invalid("correction basis does not match the MDP"));
        }
        let gamma = mdp.gamma();
        let mut slot_of: HashMap<usize, usize> = HashMap::new();
        let mut used = Vec::new();
        let mut terms = Vec::with_capacity(dataset.trajectories().len());
        let mut proxy_returns = Vec::with_capacity(dataset.trajectories().len());
        let mut ref_returns = Vec::with_capacity(dataset.trajectories().len());
        for traj in dataset.trajectories() {
            let ids = traj.transition_ids(mdp)?;
            let mut counts: Vec<(usize, f64)> = Vec::new();
            let mut discount = 1.0;
            let (mut pr, mut rr) = (0.0, 0.0);
            for id in ids {
                pr += discount * proxy.get(id);
                rr += discount * reference.get(id);
                let slot = *slot_of.entry(id).or_insert_with(|| {
                    used.push(id);
                    used.len() - 1
                });
                counts.push((slot, discount));
                discount *= gamma;
            }
            counts.sort_by_key(|c| c.0);
            let mut merged: Vec<(usize, f64)> = Vec::with_capacity(counts.len());
            for (slot, c) in counts {
                match merged.last_mut() {
                    Some(last) if last.0 == slot => last.1 += c,
                    _ => merged.push((slot, c)),
                }
            }
            terms.push(merged);
            proxy_returns.push(pr);
            ref_returns.push(rr);
        }

        let mut merged: Vec<PreparedSample> = Vec::new();
        let mut key_index: HashMap<(usize, usize, Label), usize> = HashMap::new();
        let (mut plus_weight, mut minus_weight) = (0.0, 0.0);
        for s in dataset.samples() {
            let part = classify(ref_returns[s.tau1], ref_returns[s.tau2], s.label);
            match part {
                Partition::Agree => plus_weight += 1.0,
                Partition::Disagree => minus_weight += 1.0,
            }
            match key_index.get(&(s.tau1, s.tau2, s.label)) {
                Some(&i) => merged[i].weight += 1.0,
                None => {
                    key_index.insert((s.tau1, s.tau2, s.label), merged.len());
                    merged.push(PreparedSample {
                        a: s.tau1,
                        b: s.tau2,
                        mu: s.label.mu(),
                        weight: 1.0,
                        part,
                        preferred: match s.label {
                            Label::First => Some(s.tau1),
                            Label::Second => Some(s.tau2),
                            Label::Tie => None,
                        },
                    });
                }
            }
        }
        Ok(FitProblem {
            basis,
            squash,
            used,
            proxy_returns,
            terms,
            samples: merged,
            plus_weight,
            minus_weight,
        })
    }

    pub fn n_params(&self) -> usize {
        self.basis.n_params()
    }

    /// `(|D+|, |D-|)` counting duplicates.
    pub fn partition_sizes(&self) -> (usize, usize) {
        (self.plus_weight as usize, self.minus_weight as usize)
    }

    pub fn basis(&self) -> &Arc<CorrectionBasis> {
        &self.basis
    }

    fn slot_values(&self, theta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let z: Vec<f64> = self.used.iter().map(|&id| self.basis.linear(theta, id)).collect();
        let g = z.iter().map(|&z| self.squash.apply(z)).collect();
        (z, g)
    }

    fn trajectory_corrections(&self, g: &[f64]) -> Vec<f64> {
        self.terms.iter().map(|t| t.iter().map(|&(slot, c)| c * g[slot]).sum()).collect()
    }

    /// Loss and, if requested, its gradient with respect to `theta`.
    pub fn evaluate(&self, theta: &[f64], weights: LossWeights, want_grad: bool) -> (LossParts, Option<Vec<f64>>) {
        let (z, g) = self.slot_values(theta);
        let gt = self.trajectory_corrections(&g);
        let plus_scale = if self.plus_weight > 0.0 { weights.lambda1 / self.plus_weight } else { 0.0 };
        let minus_scale = if self.minus_weight > 0.0 { weights.lambda2 / self.minus_weight } else { 0.0 };
        let mut parts = LossParts::default();
        let mut coef = vec![0.0; self.terms.len()];
        for s in &self.samples {
            let d = (self.proxy_returns[s.a] + gt[s.a]) - (self.proxy_returns[s.b] + gt[s.b]);
            parts.ce += s.weight * sample_ce(d, s.mu);
            let dd = s.weight * (sigmoid(d) - (1.0 - s.mu));
            coef[s.a] += dd;
            coef[s.b] -= dd;
            match s.part {
                Partition::Agree => {
                    parts.plus += s.weight * (gt[s.a].powi(2) + gt[s.b].powi(2));
                    coef[s.a] += plus_scale * s.weight * 2.0 * gt[s.a];
                    coef[s.b] += plus_scale * s.weight * 2.0 * gt[s.b];
                }
                Partition::Disagree => {
                    if let Some(p) = s.preferred {
                        parts.minus += s.weight * gt[p].powi(2);
                        coef[p] += minus_scale * s.weight * 2.0 * gt[p];
                    }
                }
            }
        }
        if self.plus_weight > 0.0 {
            parts.plus /= self.plus_weight;
        }
        if self.minus_weight > 0.0 {
            parts.minus /= self.minus_weight;
        }
        parts.total = parts.ce + weights.lambda1 * parts.plus + weights.lambda2 * parts.minus;
        if !want_grad {
            return (parts, None);
        }
        let mut slot_grad = vec![0.0; self.used.len()];
        for (t, terms) in self.terms.iter().enumerate() {
            if coef[t] == 0.0 {
                continue;
            }
            for &(slot, c) in terms {
                slot_grad[slot] += coef[t] * c;
            }
        }
        let mut grad = vec![0.0; theta.len()];
        for (slot, &id) in self.used.iter().enumerate() {
            let gz = slot_grad[slot] * self.squash.derivative(z[slot]);
            if gz != 0.0 {
                self.basis.for_each(id, |p, w| grad[p] += gz * w);
            }
        }
        (parts, Some(grad))
    }

    /// Per trajectory, the parameter-space vector `x` with `g(tau) = x . theta`
    /// (identity squash only).
    fn trajectory_features(&self) -> Vec<Vec<(usize, f64)>> {
        self.terms
            .iter()
            .map(|terms| {
                let mut acc: HashMap<usize, f64> = HashMap::new();
                for &(slot, c) in terms {
                    self.basis.for_each(self.used[slot], |p, w| *acc.entry(p).or_default() += c * w);
                }
                let mut v: Vec<(usize, f64)> = acc.into_iter().collect();
                v.sort_by_key(|e| e.0);
                v
            })
            .collect()
    }
}

/// Components of the repair loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub ce: f64,
    /// Mean squared correction over agreeing samples.
    pub plus: f64,
    /// Mean squared correction of the preferred trajectory over disagreeing samples.
    pub minus: f64,
    pub total: f64,
}

/// Repair loss of a correction model on a dataset.
pub fn pbrr_loss(
    model: &CorrectionModel,
    mdp: &TabularMdp,
    proxy: &RewardFn,
    dataset: &PreferenceDataset,
    weights: LossWeights,
) -> Result<LossParts> {
    let problem = FitProblem::new(mdp, proxy, proxy, dataset, model.basis.clone(), model.squash)?;
    Ok(problem.evaluate(&model.theta, weights, false).0)
}

pub fn loss_gradient(
    model: &CorrectionModel,
    mdp: &TabularMdp,
    proxy: &RewardFn,
    dataset: &PreferenceDataset,
    weights: LossWeights,
) -> Result<Vec<f64>> {
    let problem = FitProblem::new(mdp, proxy, proxy, dataset, model.basis.clone(), model.squash)?;
    Ok(problem.evaluate(&model.theta, weights, true).1.expect("gradient requested"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Full-batch gradient descent with backtracking line search.
    #[default]
    Gradient,
    /// Damped Newton steps; identity squash only, dense Hessian.
    Newton,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Coefficient of `0.5 * |theta|^2`; zero disables it.
    pub weight_decay: f64,
    /// Gradient norm cap applied before each step.
    pub grad_clip: Option<f64>,
    pub tol: f64,
    pub method: Method,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.05,
            epochs: 2000,
            weight_decay: 0.0,
            grad_clip: None,
            tol: 1e-7,
            method: Method::Gradient,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.epochs == 0 || !(self.tol >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(RepairError::invalid("optimizer needs learning_rate > 0, epochs >= 1, tol >= 0"));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(RepairError::invalid("gradient clip must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FitReport {
    pub model: CorrectionModel,
    pub initial: LossParts,
    pub final_loss: LossParts,
    pub epochs: usize,
    pub grad_norm: f64,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn objective(problem: &FitProblem, theta: &[f64], weights: LossWeights, opt: &OptimizerConfig, grad: bool) -> (LossParts, Option<Vec<f64>>) {
    let (mut parts, mut g) = problem.evaluate(theta, weights, grad);
    if opt.weight_decay > 0.0 {
        parts.total += 0.5 * opt.weight_decay * theta.iter().map(|t| t * t).sum::<f64>();
        if let Some(g) = g.as_mut() {
            g.iter_mut().zip(theta).for_each(|(gi, t)| *gi += opt.weight_decay * t);
        }
    }
    (parts, g)
}

/// Fits the correction from zero.
pub fn fit_correction(problem: &FitProblem, weights: LossWeights, opt: &OptimizerConfig) -> Result<FitReport> {
    fit_from(problem, vec![0.0; problem.n_params()], weights, opt)
}

/// Fits the correction starting from `theta`; the returned loss never exceeds the initial one.
pub fn fit_from(problem: &FitProblem, theta: Vec<f64>, weights: LossWeights, opt: &OptimizerConfig) -> Result<FitReport> {
    opt.validate()?;
    if theta.len() != problem.n_params() {
        return Err(RepairError::invalid("initial parameters do not match the basis"));
    }
    if problem.samples.is_empty() {
        return Err(RepairError::invalid("cannot fit a correction to an empty dataset"));
    }
    match opt.method {
        Method::Gradient => gradient_descent(problem, theta, weights, opt),
        Method::Newton => newton(problem, theta, weights, opt),
    }
}

fn diverged(parts: &LossParts, epoch: usize) -> Result<()> {
    if parts.total.is_finite() {
        Ok(())
    } else {
        Err(RepairError::Divergence(format!("loss became {} at epoch {epoch}", parts.total)))
    }
}

fn finish(problem: &FitProblem, theta: Vec<f64>, initial: LossParts, final_loss: LossParts, epochs: usize, grad_norm: f64) -> Result<FitReport> {
    let model = CorrectionModel::with_theta(problem.basis.clone(), problem.squash, theta)?;
    Ok(FitReport { model, initial, final_loss, epochs, grad_norm })
}

fn gradient_descent(problem: &FitProblem, mut theta: Vec<f64>, weights: LossWeights, opt: &OptimizerConfig) -> Result<FitReport> {
    let (initial, grad) = objective(problem, &theta, weights, opt, true);
    diverged(&initial, 0)?;
    let mut grad = grad.expect("gradient");
    let mut current = initial;
    let mut step = opt.learning_rate;
    let mut epochs = 0;
    let mut gnorm = norm(&grad);
    while epochs < opt.epochs && gnorm >= opt.tol {
        let mut direction = grad.clone();
        if let Some(c) = opt.grad_clip {
            if gnorm > c {
                direction.iter_mut().for_each(|d| *d *= c / gnorm);
            }
        }
        let slope: f64 = direction.iter().zip(&grad).map(|(d, g)| d * g).sum();
        // Armijo backtracking; the step is allowed to regrow after success
        let mut accepted = None;
        let mut trial_step = step;
        for _ in 0..60 {
            let trial: Vec<f64> = theta.iter().zip(&direction).map(|(t, d)| t - trial_step * d).collect();
            let (parts, _) = objective(problem, &trial, weights, opt, false);
            if parts.total.is_finite() && parts.total <= current.total - 1e-4 * trial_step * slope {
                accepted = Some((trial, parts));
                break;
            }
            trial_step *= 0.5;
        }
        let Some((next, parts)) = accepted else { break };
        theta = next;
        current = parts;
        epochs += 1;
        step = (trial_step * 2.0).min(opt.learning_rate * 1e4);
        let (p, g) = objective(problem, &theta, weights, opt, true);
        diverged(&p, epochs)?;
        grad = g.expect("gradient");
        gnorm = norm(&grad);
    }
    finish(problem, theta, initial, current, epochs, gnorm)
}

fn newton(problem: &FitProblem, mut theta: Vec<f64>, weights: LossWeights, opt: &OptimizerConfig) -> Result<FitReport> {
    if problem.squash != Squash::Identity {
        return Err(RepairError::invalid("Newton fitting needs the identity squash"));
    }
    let n = problem.n_params();
    if n > 4096 {
        return Err(RepairError::invalid(format!("Newton fitting with {n} parameters is too large")));
    }
    let features = problem.trajectory_features();
    let plus_scale = if problem.plus_weight > 0.0 { weights.lambda1 / problem.plus_weight } else { 0.0 };
    let minus_scale = if problem.minus_weight > 0.0 { weights.lambda2 / problem.minus_weight } else { 0.0 };

    let (initial, grad) = objective(problem, &theta, weights, opt, true);
    diverged(&initial, 0)?;
    let mut grad = grad.expect("gradient");
    let mut current = initial;
    let mut gnorm = norm(&grad);
    let mut epochs = 0;
    while epochs < opt.epochs && gnorm >= opt.tol {
        let gt: Vec<f64> = features.iter().map(|x| x.iter().map(|&(p, w)| w * theta[p]).sum()).collect();
        let mut h = DMatrix::<f64>::zeros(n, n);
        let mut add_outer = |x: &[(usize, f64)], y: &[(usize, f64)], scale: f64| {
            for &(i, wi) in x {
                for &(j, wj) in y {
                    h[(i, j)] += scale * wi * wj;
                }
            }
        };
        for s in &problem.samples {
            let d = problem.proxy_returns[s.a] + gt[s.a] - problem.proxy_returns[s.b] - gt[s.b];
            let c = s.weight * sigmoid(d) * sigmoid(-d);
            let (xa, xb) = (&features[s.a], &features[s.b]);
            add_outer(xa, xa, c);
            add_outer(xb, xb, c);
            add_outer(xa, xb, -c);
            add_outer(xb, xa, -c);
            match s.part {
                Partition::Agree => {
                    add_outer(xa, xa, 2.0 * plus_scale * s.weight);
                    add_outer(xb, xb, 2.0 * plus_scale * s.weight);
                }
                Partition::Disagree => {
                    if let Some(p) = s.preferred {
                        add_outer(&features[p], &features[p], 2.0 * minus_scale * s.weight);
                    }
                }
            }
        }
        for i in 0..n {
            h[(i, i)] += opt.weight_decay + 1e-9;
        }
        let gvec = DVector::from_column_slice(&grad);
        let direction = match h.clone().cholesky() {
            Some(ch) => ch.solve(&gvec),
            None => gvec.clone(),
        };
        let slope = direction.dot(&gvec);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = theta.iter().zip(direction.iter()).map(|(th, d)| th - t * d).collect();
            let (parts, _) = objective(problem, &trial, weights, opt, false);
            if parts.total.is_finite() && parts.total <= current.total - 1e-4 * t * slope {
                accepted = Some((trial, parts));
                break;
            }
            t *= 0.5;
        }
        let Some((next, parts)) = accepted else { break };
        theta = next;
        current = parts;
        epochs += 1;
        let (p, g) = objective(problem, &theta, weights, opt, true);
        diverged(&p, epochs)?;
        grad = g.expect("gradient");
        gnorm = norm(&grad);
    }
    finish(problem, theta, initial, current, epochs, gnorm)
}

/// Which regularizers a repair fit keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossVariant {
    #[default]
    Full,
    /// Plain cross-entropy, both regularizers off.
    CrossEntropy,
    PlusOnly,
    MinusOnly,
}

impl LossVariant {
    /// Scheduled weights for this variant given `|D+|`.
    pub fn weights(self, base: f64, d_plus: usize) -> LossWeights {
        let l = lambda_schedule(base, d_plus);
        match self {
            LossVariant::Full => LossWeights { lambda1: l, lambda2: l },
            LossVariant::CrossEntropy => LossWeights::ZERO,
            LossVariant::PlusOnly => LossWeights { lambda1: l, lambda2: 0.0 },
            LossVariant::MinusOnly => LossWeights { lambda1: 0.0, lambda2: l },
        }
    }
}

/// Outcome of one refit of the correction on all data so far.
#[derive(Clone, Debug)]
pub struct RepairFit {
    pub model: CorrectionModel,
    pub loss: LossParts,
    pub d_plus: usize,
    pub d_minus: usize,
    pub weights: LossWeights,
    pub epochs: usize,
}

/// Compiles the dataset, schedules the weights and fits `g` from zero.
/// `partition_by` is the reward that decides agreement.
#[allow(clippy::too_many_arguments)]
pub fn fit_repair(
    mdp: &TabularMdp,
    proxy: &RewardFn,
    partition_by: &RewardFn,
    dataset: &PreferenceDataset,
    basis: Arc<CorrectionBasis>,
    squash: Squash,
    variant: LossVariant,
    lambda_base: f64,
    opt: &OptimizerConfig,
) -> Result<RepairFit> {
    let problem = FitProblem::new(mdp, proxy, partition_by, dataset, basis, squash)?;
    let (d_plus, d_minus) = problem.partition_sizes();
    let weights = variant.weights(lambda_base, d_plus);
    let report = fit_correction(&problem, weights, opt)?;
    Ok(RepairFit { model: report.model, loss: report.final_loss, d_plus, d_minus, weights, epochs: report.epochs })
}

/// Serialized correction, keyed by transition for consumers that do not
/// know the basis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectionFile {
    pub env: String,
    pub basis: BasisKind,
    pub squash: Squash,
    pub gamma: f64,
    pub sprinkler_bonus: Option<f64>,
    pub theta: Vec<f64>,
    /// `[state, action, next_state, g]` for every transition with `g != 0`.
    pub entries: Vec<(usize, usize, usize, f64)>,
}

impl CorrectionFile {
    pub fn from_model(env: &str, mdp: &TabularMdp, model: &CorrectionModel, sprinkler_bonus: Option<f64>) -> Self {
        let entries = (0..mdp.n_transitions())
            .filter_map(|id| {
                let g = model.value(id);
                (g != 0.0).then(|| {
                    let (s, a, n) = mdp.transition(id);
                    (s, a, n, g)
                })
            })
            .collect();
        CorrectionFile {
            env: env.to_string(),
            basis: model.basis.kind(),
            squash: model.squash,
            gamma: mdp.gamma(),
            sprinkler_bonus,
            theta: model.theta.clone(),
            entries,
        }
    }

    /// `proxy + g` rebuilt from the transition entries alone.
    pub fn repaired(&self, mdp: &TabularMdp, proxy: &RewardFn) -> Result<RewardFn> {
        let mut values = proxy.values().to_vec();
        for &(s, a, n, g) in &self.entries {
            let id = mdp
                .transition_id(s, a, n)
                .ok_or_else(|| RepairError::invalid(format!("correction entry ({s},{a},{n}) is not a transition")))?;
            values[id] += g;
        }
        RewardFn::unbounded(mdp, values)
    }
}
