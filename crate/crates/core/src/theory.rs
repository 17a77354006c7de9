//! Known-dynamics linear-reward machinery: feature maps, the regularized
//! logistic MLE with its projection, the covariance `V_t`, confidence
//! radii, undominated-set screening, pair divergence and regret tracking.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{RepairError, Result};
use crate::mdp::{plan_optimal, rollout, PolicyTable, RewardFn, TabularMdp, Trajectory};
use crate::preferences::{sigmoid, softplus};

/// Sparse per-transition features `phi(s, a, s')`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    dim: usize,
    offsets: Vec<usize>,
    entries: Vec<(usize, f64)>,
}

impl FeatureMap {
    pub fn from_rows(dim: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let mut offsets = vec![0];
        let mut entries = Vec::new();
        for row in rows {
            for (i, v) in row {
                if i >= dim || !v.is_finite() {
                    return Err(RepairError::invalid(format!("feature entry ({i}, {v}) is invalid")));
                }
                entries.push((i, v));
            }
            offsets.push(entries.len());
        }
        Ok(FeatureMap { dim, offsets, entries })
    }

    /// One-hot over `(s, a)`, `d = |S| |A|`.
    pub fn one_hot_state_action(mdp: &TabularMdp) -> Self {
        let rows = (0..mdp.n_transitions())
            .map(|id| {
                let (s, a, _) = mdp.transition(id);
                vec![(s * mdp.n_actions() + a, 1.0)]
            })
            .collect();
        Self::from_rows(mdp.n_states() * mdp.n_actions(), rows).expect("indices in range")
    }

    /// One-hot over the arrival state, `d = |S|`.
    pub fn one_hot_next_state(mdp: &TabularMdp) -> Self {
        let rows = (0..mdp.n_transitions()).map(|id| vec![(mdp.transition(id).2, 1.0)]).collect();
        Self::from_rows(mdp.n_states(), rows).expect("indices in range")
    }

    pub fn zero(mdp: &TabularMdp, dim: usize) -> Self {
        Self::from_rows(dim, vec![Vec::new(); mdp.n_transitions()]).expect("empty rows")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, id: usize) -> &[(usize, f64)] {
        &self.entries[self.offsets[id]..self.offsets[id + 1]]
    }

    fn check(&self, mdp: &TabularMdp) -> Result<()> {
        if self.offsets.len() != mdp.n_transitions() + 1 {
            return Err(RepairError::invalid("feature map does not match the MDP"));
        }
        Ok(())
    }

    /// `B = sum_{t < H} gamma^t max |phi|`, a bound on every trajectory feature norm.
    pub fn bound(&self, mdp: &TabularMdp) -> f64 {
        let max_norm = (0..self.offsets.len() - 1)
            .map(|id| self.row(id).iter().map(|(_, v)| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        let discount: f64 = (0..mdp.horizon()).map(|t| mdp.gamma().powi(t as i32)).sum();
        max_norm * discount
    }

    /// `phi(tau) = sum_t gamma^t phi(s_t, a_t, s_{t+1})`.
    pub fn trajectory_features(&self, mdp: &TabularMdp, traj: &Trajectory) -> Result<DVector<f64>> {
        self.check(mdp)?;
        let mut out = DVector::zeros(self.dim);
        let mut discount = 1.0;
        for id in traj.transition_ids(mdp)? {
            for &(i, v) in self.row(id) {
                out[i] += discount * v;
            }
            discount *= mdp.gamma();
        }
        Ok(out)
    }

    /// Reward table `r(id) = phi(id) . w`.
    pub fn reward(&self, mdp: &TabularMdp, w: &DVector<f64>) -> Result<RewardFn> {
        self.check(mdp)?;
        let values = (0..mdp.n_transitions()).map(|id| self.row(id).iter().map(|&(i, v)| v * w[i]).sum()).collect();
        RewardFn::unbounded(mdp, values)
    }
}

/// Expected discounted features of an `H`-step episode, by exact forward propagation.
pub fn policy_features(mdp: &TabularMdp, policy: &PolicyTable, fmap: &FeatureMap) -> Result<DVector<f64>> {
    policy.check_compatible(mdp)?;
    fmap.check(mdp)?;
    let n = mdp.n_states();
    let mut dist = mdp.start_dist().to_vec();
    let mut out = DVector::zeros(fmap.dim());
    let mut discount = 1.0;
    for _ in 0..mdp.horizon() {
        let mut next = vec![0.0; n];
        for s in 0..n {
            if dist[s] == 0.0 {
                continue;
            }
            for a in 0..mdp.n_actions() {
                let pa = policy.prob(s, a);
                if pa == 0.0 {
                    continue;
                }
                for (id, &(ns, p)) in mdp.row_ids(s, a).zip(mdp.successors(s, a)) {
                    let mass = dist[s] * pa * p;
                    next[ns] += mass;
                    for &(i, v) in fmap.row(id) {
                        out[i] += discount * mass * v;
                    }
                }
            }
        }
        dist = next;
        discount *= mdp.gamma();
    }
    Ok(out)
}

/// Derivative of the logistic function.
pub fn sigmoid_prime(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 - s)
}

/// `kappa = 1 / sigmoid'(B W)`: the worst slope over the parameter ball.
pub fn kappa(b: f64, w: f64) -> Result<f64> {
    if !(b >= 0.0 && w >= 0.0) || !(b * w).is_finite() {
        return Err(RepairError::invalid("B and W must be non-negative and finite"));
    }
    Ok(1.0 / sigmoid_prime(b * w))
}

/// One comparison: `x = phi(tau1) - phi(tau2)`, outcome 1 when `tau1` won.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub x: DVector<f64>,
    pub outcome: f64,
    pub weight: f64,
}

/// `g(w) = sum_s weight sigmoid(x . w) x + lambda w`.
fn link_sum(data: &[Observation], w: &DVector<f64>, lambda: f64) -> DVector<f64> {
    let mut out = w * lambda;
    for o in data {
        out.axpy(o.weight * sigmoid(o.x.dot(w)), &o.x, 1.0);
    }
    out
}

fn link_jacobian(data: &[Observation], w: &DVector<f64>, lambda: f64) -> DMatrix<f64> {
    let d = w.len();
    let mut j = DMatrix::identity(d, d) * lambda;
    for o in data {
        j.ger(o.weight * sigmoid_prime(o.x.dot(w)), &o.x, &o.x, 1.0);
    }
    j
}

fn neg_log_likelihood(data: &[Observation], w: &DVector<f64>, lambda: f64) -> f64 {
    let mut total = 0.5 * lambda * w.norm_squared();
    for o in data {
        let z = o.x.dot(w);
        total += o.weight * (softplus(z) - o.outcome * z);
    }
    total
}

/// Regularized logistic MLE by damped Newton iterations.
pub fn logistic_mle(data: &[Observation], lambda: f64, dim: usize) -> Result<DVector<f64>> {
    if !(lambda > 0.0) {
        return Err(RepairError::invalid("the logistic regularizer must be positive"));
    }
    let mut w = DVector::zeros(dim);
    for _ in 0..200 {
        let mut grad = &w * lambda;
        for o in data {
            grad.axpy(o.weight * (sigmoid(o.x.dot(&w)) - o.outcome), &o.x, 1.0);
        }
        if grad.norm() < 1e-10 {
            break;
        }
        let hess = link_jacobian(data, &w, lambda);
        let step = hess.cholesky().ok_or_else(|| RepairError::Internal("singular logistic Hessian".into()))?.solve(&grad);
        let base = neg_log_likelihood(data, &w, lambda);
        let slope = step.dot(&grad);
        let mut t = 1.0;
        loop {
            let trial = &w - &step * t;
            if neg_log_likelihood(data, &trial, lambda) <= base - 1e-4 * t * slope || t < 1e-12 {
                w = trial;
                break;
            }
            t *= 0.5;
        }
    }
    if w.iter().any(|x| !x.is_finite()) {
        return Err(RepairError::Divergence("logistic MLE produced non-finite weights".into()));
    }
    Ok(w)
}

fn project_ball(w: DVector<f64>, radius: f64) -> DVector<f64> {
    let n = w.norm();
    if n > radius {
        w * (radius / n)
    } else {
        w
    }
}

/// `argmin_{|w| <= W} |g(w) - g(w_mle)|_{V^-1}` by projected gradient descent.
pub fn project_mle(data: &[Observation], w_mle: &DVector<f64>, lambda: f64, w_bound: f64, v: &DMatrix<f64>) -> Result<DVector<f64>> {
    if w_mle.norm() <= w_bound {
        return Ok(w_mle.clone());
    }
    let chol = Cholesky::new(v.clone()).ok_or_else(|| RepairError::Internal("covariance is not positive definite".into()))?;
    let target = link_sum(data, w_mle, lambda);
    let objective = |w: &DVector<f64>| {
        let r = link_sum(data, w, lambda) - &target;
        0.5 * r.dot(&chol.solve(&r))
    };
    let mut w = project_ball(w_mle.clone(), w_bound);
    let mut value = objective(&w);
    let mut step = 1.0;
    for _ in 0..2000 {
        let r = link_sum(data, &w, lambda) - &target;
        let grad = link_jacobian(data, &w, lambda) * chol.solve(&r);
        if grad.norm() < 1e-12 {
            break;
        }
        let mut improved = false;
        for _ in 0..50 {
            let trial = project_ball(&w - &grad * step, w_bound);
            let tv = objective(&trial);
            if tv < value {
                let moved = (&trial - &w).norm();
                w = trial;
                value = tv;
                improved = moved > 1e-14;
                step *= 2.0;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    Ok(w)
}

/// `(w_mle, w_proj)` with `V = kappa lambda I + sum weight x x^T`.
pub fn fit_logistic_mle(data: &[Observation], lambda: f64, w_bound: f64, kappa: f64, dim: usize) -> Result<(DVector<f64>, DVector<f64>)> {
    let w_mle = logistic_mle(data, lambda, dim)?;
    let mut v = DMatrix::identity(dim, dim) * (kappa * lambda);
    for o in data {
        v.ger(o.weight, &o.x, &o.x, 1.0);
    }
    let w_proj = project_mle(data, &w_mle, lambda, w_bound, &v)?;
    Ok((w_mle, w_proj))
}

#[derive(Clone, Debug)]
pub struct ConfidenceState {
    pub dim: usize,
    pub v: DMatrix<f64>,
    pub data: Vec<Observation>,
    pub w_mle: DVector<f64>,
    pub w_proj: DVector<f64>,
    /// Rounds observed (sum of observation weights).
    pub t: f64,
    pub kappa: f64,
    pub lambda: f64,
    pub w_bound: f64,
    pub b_bound: f64,
    pub delta: f64,
    pub c1: f64,
}

/// Dumpable view of a confidence state.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConfidenceSnapshot {
    pub t: f64,
    pub w_mle: Vec<f64>,
    pub w_proj: Vec<f64>,
    pub v: Vec<f64>,
    pub kappa: f64,
    pub lambda: f64,
}

impl ConfidenceState {
    /// `lambda` defaults to `max(1, B / kappa)`.
    pub fn new(dim: usize, b_bound: f64, w_bound: f64, delta: f64, c1: f64, lambda: Option<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(RepairError::invalid("feature dimension must be positive"));
        }
        if !(c1 >= 0.0) {
            return Err(RepairError::invalid("C1 must be non-negative"));
        }
        check_delta(delta)?;
        let kappa = kappa(b_bound, w_bound)?;
        let lambda = lambda.unwrap_or_else(|| f64::max(1.0, b_bound / kappa));
        if !(lambda > 0.0) {
            return Err(RepairError::invalid("lambda must be positive"));
        }
        Ok(ConfidenceState {
            dim,
            v: DMatrix::identity(dim, dim) * (kappa * lambda),
            data: Vec::new(),
            w_mle: DVector::zeros(dim),
            w_proj: DVector::zeros(dim),
            t: 0.0,
            kappa,
            lambda,
            w_bound,
            b_bound,
            delta,
            c1,
        })
    }

    /// `V += weight * x x^T`.
    pub fn update_covariance(&mut self, x: &DVector<f64>, weight: f64) -> Result<()> {
        if x.len() != self.dim {
            return Err(RepairError::invalid("feature difference has the wrong dimension"));
        }
        self.v.ger(weight, x, x, 1.0);
        Ok(())
    }

    /// Records a comparison (covariance and data); call [`refit`] afterwards.
    pub fn observe(&mut self, x: DVector<f64>, outcome: f64, weight: f64) -> Result<()> {
        if !(outcome == 0.0 || outcome == 1.0) || !(weight > 0.0) {
            return Err(RepairError::invalid("outcome must be 0 or 1 and weight positive"));
        }
        self.update_covariance(&x, weight)?;
        self.data.push(Observation { x, outcome, weight });
        self.t += weight;
        Ok(())
    }

    pub fn refit(&mut self) -> Result<()> {
        self.w_mle = logistic_mle(&self.data, self.lambda, self.dim)?;
        self.w_proj = project_mle(&self.data, &self.w_mle, self.lambda, self.w_bound, &self.v)?;
        Ok(())
    }

    fn cholesky(&self) -> Result<Cholesky<f64, Dyn>> {
        Cholesky::new(self.v.clone()).ok_or_else(|| RepairError::Internal("covariance is not positive definite".into()))
    }

    /// `|x|_{V^-1}` through a Cholesky solve.
    pub fn norm_vinv(&self, x: &DVector<f64>) -> Result<f64> {
        let chol = self.cholesky()?;
        Ok(x.dot(&chol.solve(x)).max(0.0).sqrt())
    }

    /// `f = |phi1 - phi2|_{V^-1}`.
    pub fn pair_divergence(&self, phi1: &DVector<f64>, phi2: &DVector<f64>) -> Result<f64> {
        self.norm_vinv(&(phi1 - phi2))
    }

    /// `(beta_t, gamma_t)` for a horizon of `t_budget` rounds.
    pub fn radii(&self, t_budget: usize) -> Result<(f64, f64)> {
        radii(self.t, self.dim, self.lambda, self.kappa, self.w_bound, self.b_bound, self.delta, t_budget)
    }

    /// Indices of candidates passing the undominated-set inequality against every other candidate.
    pub fn undominated(&self, features: &[DVector<f64>], t_budget: usize) -> Result<Vec<usize>> {
        let (_, gamma) = self.radii(t_budget)?;
        let chol = self.cholesky()?;
        let mut out = Vec::new();
        for (i, fi) in features.iter().enumerate() {
            let member = features.iter().all(|fj| {
                let d = fi - fj;
                let n = d.dot(&chol.solve(&d)).max(0.0).sqrt();
                d.dot(&self.w_proj) + gamma * n >= -1e-12
            });
            if member {
                out.push(i);
            }
        }
        Ok(out)
    }

    pub fn is_member(&self, i: usize, features: &[DVector<f64>], t_budget: usize) -> Result<bool> {
        Ok(self.undominated(features, t_budget)?.contains(&i))
    }

    pub fn snapshot(&self) -> ConfidenceSnapshot {
        ConfidenceSnapshot {
            t: self.t,
            w_mle: self.w_mle.iter().copied().collect(),
            w_proj: self.w_proj.iter().copied().collect(),
            v: self.v.iter().copied().collect(),
            kappa: self.kappa,
            lambda: self.lambda,
        }
    }

    /// A point on the boundary of `{w : |w - w_proj|_V <= radius}`.
    pub fn sample_ellipsoid(&self, radius: f64, rng: &mut impl Rng) -> Result<DVector<f64>> {
        let chol = self.cholesky()?;
        let mut u = DVector::from_fn(self.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let n = u.norm();
        if n > 0.0 {
            u /= n;
        }
        // V = L L^T, so w = w_proj + r L^-T u has |w - w_proj|_V = r
        let l = chol.l();
        let offset = l
            .transpose()
            .solve_upper_triangular(&u)
            .ok_or_else(|| RepairError::Internal("triangular solve failed".into()))?;
        Ok(&self.w_proj + offset * radius)
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta <= (-1.0f64).exp() + 1e-15) {
        return Err(RepairError::invalid(format!("delta {delta} outside (0, 1/e]")));
    }
    Ok(())
}

/// `beta_t = sqrt(lambda) W + sqrt(log(1/delta) + 2 d log(1 + t B / (kappa lambda d)))`,
/// `alpha = 20 B W sqrt(d log(T (1 + 2T) / delta))`, `gamma_t = 2 kappa beta_t + alpha`.
#[allow(clippy::too_many_arguments)]
pub fn radii(t: f64, dim: usize, lambda: f64, kappa: f64, w_bound: f64, b_bound: f64, delta: f64, t_budget: usize) -> Result<(f64, f64)> {
    check_delta(delta)?;
    if kappa > 0.0 && lambda < b_bound / kappa - 1e-12 {
        return Err(RepairError::invalid(format!("lambda {lambda} is below B / kappa")));
    }
    let d = dim as f64;
    let beta = lambda.sqrt() * w_bound
        + ((1.0 / delta).ln() + 2.0 * d * (1.0 + t * b_bound / (kappa * lambda * d)).ln()).sqrt();
    let big_t = t_budget.max(1) as f64;
    let alpha = 20.0 * b_bound * w_bound * (d * (big_t * (1.0 + 2.0 * big_t) / delta).ln()).sqrt();
    Ok((beta, 2.0 * kappa * beta + alpha))
}

/// Exploration pair over candidate features: `(star, reference)` when `C1 = 0`;
/// otherwise the undominated-set fallback.
pub fn select_exploration_pair(
    star: usize,
    reference: usize,
    features: &[DVector<f64>],
    state: &ConfidenceState,
    t_budget: usize,
) -> Result<(usize, usize)> {
    if state.c1 == 0.0 {
        return Ok((star, reference));
    }
    let members = state.undominated(features, t_budget)?;
    if members.is_empty() {
        return Err(RepairError::Internal("undominated set is empty".into()));
    }
    let mut best = (members[0], members[0]);
    let mut best_f = -1.0;
    for (k, &i) in members.iter().enumerate() {
        for &j in &members[k..] {
            let f = state.pair_divergence(&features[i], &features[j])?;
            if f > best_f {
                best_f = f;
                best = (i, j);
            }
        }
    }
    let both = members.contains(&star) && members.contains(&reference);
    if both && state.c1 * state.pair_divergence(&features[star], &features[reference])? > best_f {
        Ok((star, reference))
    } else {
        Ok(best)
    }
}

/// Candidate policies with deduplicated expected features.
#[derive(Clone, Debug)]
pub struct CandidateSet {
    pub policies: Vec<PolicyTable>,
    pub features: Vec<DVector<f64>>,
}

impl CandidateSet {
    /// Index of a candidate with the same features as `policy`, adding it if absent.
    pub fn locate_or_insert(&mut self, mdp: &TabularMdp, fmap: &FeatureMap, policy: &PolicyTable) -> Result<usize> {
        let phi = policy_features(mdp, policy, fmap)?;
        if let Some(i) = self.features.iter().position(|f| (f - &phi).amax() <= 1e-12) {
            return Ok(i);
        }
        self.policies.push(policy.clone());
        self.features.push(phi);
        Ok(self.policies.len() - 1)
    }
}

/// Largest MDP whose deterministic policies are enumerated.
pub const ENUMERATION_LIMIT: usize = 4096;

/// All deterministic policies, deduplicated by features. `None` past the limit.
pub fn enumerate_policies(mdp: &TabularMdp, fmap: &FeatureMap) -> Result<Option<CandidateSet>> {
    let (n_s, n_a) = (mdp.n_states(), mdp.n_actions());
    let mut count: usize = 1;
    for _ in 0..n_s {
        count = match count.checked_mul(n_a) {
            Some(c) if c <= ENUMERATION_LIMIT => c,
            _ => return Ok(None),
        };
    }
    let mut set = CandidateSet { policies: Vec::new(), features: Vec::new() };
    let mut actions = vec![0usize; n_s];
    for code in 0..count {
        let mut c = code;
        for a in actions.iter_mut() {
            *a = c % n_a;
            c /= n_a;
        }
        set.locate_or_insert(mdp, fmap, &PolicyTable::deterministic(n_a, &actions)?)?;
    }
    Ok(Some(set))
}

/// Enumerated policies when small enough, else `{reference, star}` plus greedy
/// policies of rewards sampled on the `gamma_t` ellipsoid.
pub fn candidate_policies(
    mdp: &TabularMdp,
    fmap: &FeatureMap,
    state: &ConfidenceState,
    reference: &PolicyTable,
    star: &PolicyTable,
    t_budget: usize,
    seed: u64,
) -> Result<CandidateSet> {
    if let Some(mut set) = enumerate_policies(mdp, fmap)? {
        set.locate_or_insert(mdp, fmap, reference)?;
        return Ok(set);
    }
    let mut set = CandidateSet { policies: Vec::new(), features: Vec::new() };
    set.locate_or_insert(mdp, fmap, reference)?;
    set.locate_or_insert(mdp, fmap, star)?;
    let (_, gamma) = state.radii(t_budget)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..64 {
        let w = state.sample_ellipsoid(gamma, &mut rng)?;
        let greedy = plan_optimal(mdp, &fmap.reward(mdp, &w)?, 1e-8)?.greedy;
        set.locate_or_insert(mdp, fmap, &greedy)?;
    }
    Ok(set)
}

/// Running regret of executed pairs against the true optimum.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RegretTracker {
    pub per_round: Vec<f64>,
    pub cumulative: Vec<f64>,
}

impl RegretTracker {
    /// `r_t = ((phi* - phi1) . w* + (phi* - phi2) . w*) / 2`.
    pub fn record(&mut self, phi_star: &DVector<f64>, phi1: &DVector<f64>, phi2: &DVector<f64>, w_true: &DVector<f64>) -> f64 {
        let r = 0.5 * ((phi_star - phi1).dot(w_true) + (phi_star - phi2).dot(w_true));
        let r = r.max(0.0);
        self.per_round.push(r);
        let total = self.cumulative.last().copied().unwrap_or(0.0) + r;
        self.cumulative.push(total);
        r
    }

    /// CSV with columns `round, per_round_regret, cumulative`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["round", "per_round_regret", "cumulative"])?;
        for (t, (r, c)) in self.per_round.iter().zip(&self.cumulative).enumerate() {
            w.write_record([(t + 1).to_string(), r.to_string(), c.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Least-squares slope of `log cumulative` against `log t` over rounds `t >= from`.
pub fn growth_exponent(cumulative: &[f64], from: usize) -> Option<f64> {
    let pts: Vec<(f64, f64)> = cumulative
        .iter()
        .enumerate()
        .filter(|&(i, &c)| i + 1 >= from && c > 0.0)
        .map(|(i, &c)| (((i + 1) as f64).ln(), c.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// A linear-reward instance: rewards are `phi . w_true`, the proxy `phi . w_proxy`.
#[derive(Clone, Debug)]
pub struct LinearInstance {
    pub mdp: TabularMdp,
    pub fmap: FeatureMap,
    pub w_true: DVector<f64>,
    pub w_proxy: DVector<f64>,
    pub reference: PolicyTable,
}

/// Random dynamics with one-hot `(s, a)` features; `|w_true| = w_norm` and an
/// optimistic proxy.
pub fn linear_instance(seed: u64, n_states: usize, n_actions: usize, horizon: usize, w_norm: f64) -> Result<LinearInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n_states * n_actions);
    for _ in 0..n_states * n_actions {
        let w: Vec<f64> = (0..n_states).map(|_| 0.05 + rng.random::<f64>()).collect();
        let total: f64 = w.iter().sum();
        rows.push(w.into_iter().enumerate().map(|(s, p)| (s, p / total)).collect());
    }
    let mut start = vec![0.0; n_states];
    start[0] = 1.0;
    let mdp = TabularMdp::new(n_states, n_actions, rows, 0.9, horizon, start, vec![false; n_states])?;
    let fmap = FeatureMap::one_hot_state_action(&mdp);
    let d = fmap.dim();
    let raw = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let w_true = &raw * (w_norm / raw.norm());
    let w_proxy = DVector::from_fn(d, |i, _| w_true[i] + if rng.random::<f64>() < 0.4 { rng.random::<f64>() } else { 0.0 });
    let actions: Vec<usize> = (0..n_states).map(|_| rng.random_range(0..n_actions)).collect();
    let reference = PolicyTable::deterministic(n_actions, &actions)?;
    Ok(LinearInstance { mdp, fmap, w_true, w_proxy, reference })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryConfig {
    pub rounds: usize,
    pub c1: f64,
    pub delta: f64,
    pub w_bound: f64,
    pub seed: u64,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        TheoryConfig { rounds: 400, c1: 2.0, delta: (-1.0f64).exp(), w_bound: 1.0, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct TheoryRun {
    pub regret: RegretTracker,
    pub pairs: Vec<(usize, usize)>,
    pub undominated_sizes: Vec<usize>,
    pub state: ConfidenceState,
    pub candidates: CandidateSet,
}

/// The exploration loop on a linear instance with Bradley-Terry feedback
/// on sampled trajectories.
pub fn run_theory_loop(inst: &LinearInstance, cfg: &TheoryConfig) -> Result<TheoryRun> {
    let (mdp, fmap) = (&inst.mdp, &inst.fmap);
    let b = fmap.bound(mdp);
    let mut state = ConfidenceState::new(fmap.dim(), b, cfg.w_bound, cfg.delta, cfg.c1, None)?;
    let truth = fmap.reward(mdp, &inst.w_true)?;
    let true_star = plan_optimal(mdp, &truth, 1e-12)?.greedy;
    let phi_star = policy_features(mdp, &true_star, fmap)?;
    let proxy_star = plan_optimal(mdp, &fmap.reward(mdp, &inst.w_proxy)?, 1e-12)?.greedy;
    let mut candidates = candidate_policies(mdp, fmap, &state, &inst.reference, &proxy_star, cfg.rounds, cfg.seed)?;
    let reference = candidates.locate_or_insert(mdp, fmap, &inst.reference)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9);
    let mut run = RegretTracker::default();
    let mut pairs = Vec::with_capacity(cfg.rounds);
    let mut sizes = Vec::with_capacity(cfg.rounds);
    for t in 0..cfg.rounds {
        let w_hat = if state.data.is_empty() { inst.w_proxy.clone() } else { state.w_proj.clone() };
        let star_policy = plan_optimal(mdp, &fmap.reward(mdp, &w_hat)?, 1e-12)?.greedy;
        let star = candidates.locate_or_insert(mdp, fmap, &star_policy)?;
        if cfg.c1 > 0.0 {
            sizes.push(state.undominated(&candidates.features, cfg.rounds)?.len());
        }
        let (i, j) = select_exploration_pair(star, reference, &candidates.features, &state, cfg.rounds)?;
        pairs.push((i, j));
        let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(t as u64);
        let tau1 = &rollout(mdp, &candidates.policies[i], seed, 1)?[0];
        let tau2 = &rollout(mdp, &candidates.policies[j], seed ^ 0x5555, 1)?[0];
        let x = fmap.trajectory_features(mdp, tau1)? - fmap.trajectory_features(mdp, tau2)?;
        let outcome = if rng.random::<f64>() < sigmoid(x.dot(&inst.w_true)) { 1.0 } else { 0.0 };
        state.observe(x, outcome, 1.0)?;
        state.refit()?;
        run.record(&phi_star, &candidates.features[i], &candidates.features[j], &inst.w_true);
    }
    Ok(TheoryRun { regret: run, pairs, undominated_sizes: sizes, state, candidates })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environments::build_mdp1;

    #[test]
    fn kappa_examples() {
        assert!((kappa(0.0, 3.0).unwrap() - 4.0).abs() < 1e-12);
        assert!((kappa(1.0, 1.0).unwrap() - 5.086_161_269_630_487).abs() < 1e-9);
        assert!(kappa(2.0, 1.0).unwrap() > kappa(1.0, 1.0).unwrap());
    }

    #[test]
    fn radii_examples() {
        let delta = (-1.0f64).exp();
        let (beta, gamma) = radii(0.0, 3, 1.0, 4.0, 1.0, 1.0, delta, 100).unwrap();
        assert!((beta - 2.0).abs() < 1e-12);
        let alpha = 20.0 * (3.0 * (100.0 * 201.0 / delta).ln()).sqrt();
        assert!((gamma - (8.0 * beta + alpha)).abs() < 1e-9);
        let (b10, _) = radii(10.0, 3, 1.0, 4.0, 1.0, 1.0, delta, 100).unwrap();
        let (b100, _) = radii(100.0, 3, 1.0, 4.0, 1.0, 1.0, delta, 100).unwrap();
        assert!(b100 >= b10);
        assert!(radii(0.0, 3, 1.0, 4.0, 1.0, 1.0, 0.5, 100).is_err());
    }

    #[test]
    fn covariance_updates() {
        let mut st = ConfidenceState::new(2, 1.0, 1.0, (-1.0f64).exp(), 0.0, Some(1.0)).unwrap();
        let before = st.v.clone();
        st.update_covariance(&DVector::zeros(2), 1.0).unwrap();
        assert_eq!(st.v, before);
        let e1 = DVector::from_vec(vec![1.0, 0.0]);
        for _ in 0..5 {
            let det = st.v.determinant();
            st.update_covariance(&e1, 1.0).unwrap();
            assert!(st.v.determinant() >= det);
        }
        assert!((st.v[(0, 0)] - (st.kappa + 5.0)).abs() < 1e-12);
    }

    #[test]
    fn divergence_scaling() {
        let mut st = ConfidenceState::new(2, 0.0, 1.0, (-1.0f64).exp(), 0.0, Some(0.25)).unwrap();
        // kappa = 4, so V = I
        let e1 = DVector::from_vec(vec![1.0, 0.0]);
        let z = DVector::zeros(2);
        assert!((st.pair_divergence(&e1, &z).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(st.pair_divergence(&e1, &e1).unwrap(), 0.0);
        st.v *= 2.0;
        assert!((st.pair_divergence(&e1, &z).unwrap() - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn mle_symmetric_and_empty() {
        let w = logistic_mle(&[], 1.0, 3).unwrap();
        assert_eq!(w.norm(), 0.0);
        let data = vec![
            Observation { x: DVector::from_vec(vec![1.0]), outcome: 1.0, weight: 1.0 },
            Observation { x: DVector::from_vec(vec![-1.0]), outcome: 1.0, weight: 1.0 },
        ];
        assert!(logistic_mle(&data, 1.0, 1).unwrap()[0].abs() < 1e-10);
    }

    #[test]
    fn projection_is_feasible_and_idempotent() {
        let data: Vec<Observation> = (0..50)
            .map(|i| Observation { x: DVector::from_vec(vec![1.0, (i % 3) as f64 - 1.0]), outcome: 1.0, weight: 1.0 })
            .collect();
        let (w_mle, w_proj) = fit_logistic_mle(&data, 1.0, 0.5, 4.0, 2).unwrap();
        assert!(w_mle.norm() > 0.5);
        assert!(w_proj.norm() <= 0.5 + 1e-12);
        let (_, loose) = fit_logistic_mle(&data, 1.0, 100.0, 4.0, 2).unwrap();
        assert_eq!(loose, logistic_mle(&data, 1.0, 2).unwrap());
    }

    #[test]
    fn mdp1_features_are_one_hot_terminals() {
        let (mdp, _, _, reference) = build_mdp1().unwrap();
        let fmap = FeatureMap::one_hot_next_state(&mdp);
        let phi = policy_features(&mdp, &reference, &fmap).unwrap();
        assert_eq!(phi.as_slice(), &[0.0, 0.0, 1.0, 0.0, 0.0]);
        let zero = FeatureMap::zero(&mdp, 3);
        assert_eq!(policy_features(&mdp, &reference, &zero).unwrap().norm(), 0.0);
    }

    #[test]
    fn membership_basics() {
        let st = ConfidenceState::new(2, 1.0, 1.0, (-1.0f64).exp(), 1.0, None).unwrap();
        let feats = vec![DVector::from_vec(vec![1.0, 0.0]), DVector::from_vec(vec![0.0, 1.0])];
        assert_eq!(st.undominated(&feats, 100).unwrap(), vec![0, 1]);
        assert_eq!(st.undominated(&feats[..1], 100).unwrap(), vec![0]);
    }

    #[test]
    fn zero_c1_returns_star_and_reference() {
        let st = ConfidenceState::new(2, 1.0, 1.0, (-1.0f64).exp(), 0.0, None).unwrap();
        let feats = vec![DVector::zeros(2); 3];
        assert_eq!(select_exploration_pair(2, 0, &feats, &st, 10).unwrap(), (2, 0));
    }

    #[test]
    fn regret_tracker_accumulates() {
        let mut tr = RegretTracker::default();
        let w = DVector::from_vec(vec![0.05, 0.5, 0.1, 1.0]);
        let e = |i: usize| DVector::from_fn(4, |j, _| if i == j { 1.0 } else { 0.0 });
        assert_eq!(tr.record(&e(3), &e(3), &e(3), &w), 0.0);
        let r = tr.record(&e(3), &e(0), &e(1), &w);
        assert!((r - 0.5 * ((1.0 - 0.05) + (1.0 - 0.5))).abs() < 1e-12);
        assert_eq!(tr.cumulative, vec![0.0, r]);
    }

    #[test]
    fn growth_exponent_of_power_laws() {
        let lin: Vec<f64> = (1..=400).map(|t| 3.0 * t as f64).collect();
        assert!((growth_exponent(&lin, 1).unwrap() - 1.0).abs() < 1e-12);
        let root: Vec<f64> = (1..=400).map(|t| (t as f64).sqrt()).collect();
        assert!((growth_exponent(&root, 1).unwrap() - 0.5).abs() < 1e-12);
    }
}
