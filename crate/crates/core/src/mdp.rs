//! Finite MDPs with known dynamics: exact planning, policy evaluation,
//! rollouts, trajectory returns and regret, and discounted occupancy.
//!
//! Transitions are stored sparsely. Every `(s, a, s')` with positive
//! probability gets a dense *transition id*; reward tables and corrections
//! are vectors indexed by that id.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RepairError, Result};

/// Default bound on reward magnitudes.
pub const R_MAX: f64 = 10.0;

const PROB_TOL: f64 = 1e-9;

/// Relative slack used when deciding that two action values tie.
const TIE_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    horizon: usize,
    start_dist: Vec<f64>,
    absorbing: Vec<bool>,
    /// Successor lists for `(s, a)` at `s * n_actions + a`, sorted by next state.
    rows: Vec<Vec<(usize, f64)>>,
    /// First transition id of each row; one extra trailing entry.
    offsets: Vec<usize>,
    /// `(s, a, s')` for every transition id.
    flat: Vec<(usize, usize, usize)>,
}

/// On-disk JSON form: `transitions[s][a]` is a list of `[next_state, prob]`.
#[derive(Serialize, Deserialize)]
struct MdpFile {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    horizon: usize,
    start_dist: Vec<f64>,
    absorbing: Vec<bool>,
    transitions: Vec<Vec<Vec<(usize, f64)>>>,
}

impl Serialize for TabularMdp {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let transitions = (0..self.n_states)
            .map(|s| (0..self.n_actions).map(|a| self.successors(s, a).to_vec()).collect())
            .collect();
        MdpFile {
            n_states: self.n_states,
            n_actions: self.n_actions,
            gamma: self.gamma,
            horizon: self.horizon,
            start_dist: self.start_dist.clone(),
            absorbing: self.absorbing.clone(),
            transitions,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for TabularMdp {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let file = MdpFile::deserialize(deserializer)?;
        if file.transitions.len() != file.n_states
            || file.transitions.iter().any(|row| row.len() != file.n_actions)
        {
            return Err(serde::de::Error::custom("transitions must be indexed [state][action]"));
        }
        let rows = file.transitions.into_iter().flatten().collect();
        TabularMdp::new(
            file.n_states,
            file.n_actions,
            rows,
            file.gamma,
            file.horizon,
            file.start_dist,
            file.absorbing,
        )
        .map_err(serde::de::Error::custom)
    }
}

impl TabularMdp {
    /// Builds and validates an MDP. `rows[s * n_actions + a]` lists `(s', p)`;
    /// zero-probability entries are dropped and duplicates merged.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        rows: Vec<Vec<(usize, f64)>>,
        gamma: f64,
        horizon: usize,
        start_dist: Vec<f64>,
        absorbing: Vec<bool>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(RepairError::invalid("MDP needs at least one state and one action"));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(RepairError::invalid(format!("discount {gamma} outside [0, 1]")));
        }
        if horizon == 0 {
            return Err(RepairError::invalid("horizon must be at least 1"));
        }
        if rows.len() != n_states * n_actions {
            return Err(RepairError::invalid(format!(
                "expected {} transition rows, got {}",
                n_states * n_actions,
                rows.len()
            )));
        }
        if start_dist.len() != n_states || absorbing.len() != n_states {
            return Err(RepairError::invalid("start distribution and absorbing flags need one entry per state"));
        }
        check_distribution(&start_dist, "start distribution")?;

        let mut clean_rows = Vec::with_capacity(rows.len());
        for (idx, row) in rows.into_iter().enumerate() {
            let (s, a) = (idx / n_actions, idx % n_actions);
            let mut merged: Vec<(usize, f64)> = Vec::with_capacity(row.len());
            let mut sorted = row;
            sorted.sort_by_key(|&(next, _)| next);
            for (next, p) in sorted {
                if next >= n_states {
                    return Err(RepairError::invalid(format!("transition ({s},{a}) targets missing state {next}")));
                }
                if !p.is_finite() || p < 0.0 {
                    return Err(RepairError::invalid(format!("transition ({s},{a},{next}) has probability {p}")));
                }
                if p == 0.0 {
                    continue;
                }
                match merged.last_mut() {
                    Some(last) if last.0 == next => last.1 += p,
                    _ => merged.push((next, p)),
                }
            }
            let total: f64 = merged.iter().map(|&(_, p)| p).sum();
            if (total - 1.0).abs() > PROB_TOL {
                return Err(RepairError::invalid(format!("transition row ({s},{a}) sums to {total}")));
            }
            if absorbing[s] && !(merged.len() == 1 && merged[0].0 == s) {
                return Err(RepairError::invalid(format!("absorbing state {s} must self-loop under action {a}")));
            }
            clean_rows.push(merged);
        }

        let mut offsets = Vec::with_capacity(clean_rows.len() + 1);
        let mut flat = Vec::new();
        offsets.push(0);
        for (idx, row) in clean_rows.iter().enumerate() {
            for &(next, _) in row {
                flat.push((idx / n_actions, idx % n_actions, next));
            }
            offsets.push(flat.len());
        }

        Ok(TabularMdp {
            n_states,
            n_actions,
            gamma,
            horizon,
            start_dist,
            absorbing,
            rows: clean_rows,
            offsets,
            flat,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn start_dist(&self) -> &[f64] {
        &self.start_dist
    }

    pub fn is_absorbing(&self, s: usize) -> bool {
        self.absorbing[s]
    }

    /// Returns a copy with a different discount.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(RepairError::invalid(format!("discount {gamma} outside [0, 1]")));
        }
        let mut out = self.clone();
        out.gamma = gamma;
        Ok(out)
    }

    /// Returns a copy with a different episode length.
    pub fn with_horizon(&self, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(RepairError::invalid("horizon must be at least 1"));
        }
        let mut out = self.clone();
        out.horizon = horizon;
        Ok(out)
    }

    pub fn successors(&self, s: usize, a: usize) -> &[(usize, f64)] {
        &self.rows[s * self.n_actions + a]
    }

    pub fn n_transitions(&self) -> usize {
        self.flat.len()
    }

    /// Dense id of `(s, a, s')`, or `None` when it has zero probability.
    pub fn transition_id(&self, s: usize, a: usize, next: usize) -> Option<usize> {
        if s >= self.n_states || a >= self.n_actions {
            return None;
        }
        let row = s * self.n_actions + a;
        self.rows[row]
            .binary_search_by_key(&next, |&(n, _)| n)
            .ok()
            .map(|pos| self.offsets[row] + pos)
    }

    /// `(s, a, s')` of a transition id.
    pub fn transition(&self, id: usize) -> (usize, usize, usize) {
        self.flat[id]
    }

    /// Ids of all successors of `(s, a)` (contiguous range).
    pub fn row_ids(&self, s: usize, a: usize) -> std::ops::Range<usize> {
        let row = s * self.n_actions + a;
        self.offsets[row]..self.offsets[row + 1]
    }

    pub fn transition_prob(&self, id: usize) -> f64 {
        let (s, a, _) = self.flat[id];
        let row = s * self.n_actions + a;
        self.rows[row][id - self.offsets[row]].1
    }

    pub fn is_deterministic(&self) -> bool {
        self.rows.iter().all(|row| row.len() == 1) && self.start_dist.iter().filter(|&&p| p > 0.0).count() == 1
    }
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|&x| !x.is_finite() || x < 0.0) {
        return Err(RepairError::invalid(format!("{what} has a negative or non-finite entry")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > PROB_TOL {
        return Err(RepairError::invalid(format!("{what} sums to {total}")));
    }
    Ok(())
}

/// Reward table over transition ids of a particular MDP.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardFn {
    values: Vec<f64>,
}

/// One `(s, a, s')` reward entry in the JSON form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardEntry {
    pub state: usize,
    pub action: usize,
    pub next: usize,
    pub value: f64,
}

impl RewardFn {
    /// All-zero reward.
    pub fn zeros(mdp: &TabularMdp) -> Self {
        RewardFn { values: vec![0.0; mdp.n_transitions()] }
    }

    /// Checked construction with `|r| <= R_MAX`.
    pub fn from_values(mdp: &TabularMdp, values: Vec<f64>) -> Result<Self> {
        Self::with_bound(mdp, values, R_MAX)
    }

    pub fn with_bound(mdp: &TabularMdp, values: Vec<f64>, bound: f64) -> Result<Self> {
        if values.len() != mdp.n_transitions() {
            return Err(RepairError::invalid(format!(
                "reward table has {} entries, MDP has {} transitions",
                values.len(),
                mdp.n_transitions()
            )));
        }
        if let Some((id, v)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(RepairError::invalid(format!("reward for transition {:?} is {v}", mdp.transition(id))));
        }
        if let Some((id, v)) = values.iter().enumerate().find(|(_, v)| v.abs() > bound) {
            return Err(RepairError::invalid(format!(
                "reward {v} for transition {:?} exceeds bound {bound}",
                mdp.transition(id)
            )));
        }
        Ok(RewardFn { values })
    }

    /// Only finiteness is checked; used for repaired and learned rewards.
    pub fn unbounded(mdp: &TabularMdp, values: Vec<f64>) -> Result<Self> {
        Self::with_bound(mdp, values, f64::INFINITY)
    }

    pub fn from_fn(mdp: &TabularMdp, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let values = (0..mdp.n_transitions())
            .map(|id| {
                let (s, a, next) = mdp.transition(id);
                f(s, a, next)
            })
            .collect();
        Self::from_values(mdp, values)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, id: usize) -> f64 {
        self.values[id]
    }

    pub fn value(&self, mdp: &TabularMdp, s: usize, a: usize, next: usize) -> Option<f64> {
        mdp.transition_id(s, a, next).map(|id| self.values[id])
    }

    pub fn to_entries(&self, mdp: &TabularMdp) -> Vec<RewardEntry> {
        self.values
            .iter()
            .enumerate()
            .map(|(id, &value)| {
                let (state, action, next) = mdp.transition(id);
                RewardEntry { state, action, next, value }
            })
            .collect()
    }

    /// Entries not listed default to zero.
    pub fn from_entries(mdp: &TabularMdp, entries: &[RewardEntry]) -> Result<Self> {
        let mut values = vec![0.0; mdp.n_transitions()];
        for e in entries {
            let id = mdp.transition_id(e.state, e.action, e.next).ok_or_else(|| {
                RepairError::invalid(format!("reward entry ({},{},{}) is not a transition", e.state, e.action, e.next))
            })?;
            values[id] = e.value;
        }
        Self::unbounded(mdp, values)
    }

    /// Discounted return `sum_t gamma^t r(s_t, a_t, s_{t+1})`.
    pub fn trajectory_return(&self, mdp: &TabularMdp, traj: &Trajectory) -> Result<f64> {
        let ids = traj.transition_ids(mdp)?;
        Ok(discounted_sum(mdp.gamma(), ids.iter().map(|&id| self.values[id])))
    }
}

pub(crate) fn discounted_sum(gamma: f64, rewards: impl Iterator<Item = f64>) -> f64 {
    let mut total = 0.0;
    let mut discount = 1.0;
    for r in rewards {
        total += discount * r;
        discount *= gamma;
    }
    total
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
}

impl Trajectory {
    pub fn new(states: Vec<usize>, actions: Vec<usize>) -> Result<Self> {
        if states.len() != actions.len() + 1 {
            return Err(RepairError::invalid(format!(
                "trajectory has {} states and {} actions",
                states.len(),
                actions.len()
            )));
        }
        Ok(Trajectory { states, actions })
    }

    /// Number of steps.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Transition ids along the trajectory; errors on a zero-probability step.
    pub fn transition_ids(&self, mdp: &TabularMdp) -> Result<Vec<usize>> {
        if self.states.len() != self.actions.len() + 1 {
            return Err(RepairError::invalid("malformed trajectory"));
        }
        (0..self.actions.len())
            .map(|t| {
                let (s, a, next) = (self.states[t], self.actions[t], self.states[t + 1]);
                mdp.transition_id(s, a, next)
                    .ok_or_else(|| RepairError::invalid(format!("step {t} ({s},{a},{next}) has zero probability")))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Deterministic,
    Stochastic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyTable {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
    kind: PolicyKind,
}

impl PolicyTable {
    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Result<Self> {
        if n_actions == 0 {
            return Err(RepairError::invalid("policy needs at least one action"));
        }
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(RepairError::invalid(format!("action {a} at state {s} out of range")));
            }
            probs[s * n_actions + a] = 1.0;
        }
        Ok(PolicyTable { n_states: actions.len(), n_actions, probs, kind: PolicyKind::Deterministic })
    }

    pub fn stochastic(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(RepairError::invalid("policy table has the wrong size"));
        }
        for s in 0..n_states {
            check_distribution(&probs[s * n_actions..(s + 1) * n_actions], &format!("policy row {s}"))?;
        }
        let kind = if probs.iter().all(|&p| p == 0.0 || p == 1.0) {
            PolicyKind::Deterministic
        } else {
            PolicyKind::Stochastic
        };
        Ok(PolicyTable { n_states, n_actions, probs, kind })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        let p = 1.0 / n_actions as f64;
        PolicyTable {
            n_states,
            n_actions,
            probs: vec![p; n_states * n_actions],
            kind: if n_actions == 1 { PolicyKind::Deterministic } else { PolicyKind::Stochastic },
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn kind(&self) -> PolicyKind {
        self.kind
    }

    pub fn action_probs(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    /// The chosen action of a deterministic policy.
    pub fn action(&self, s: usize) -> Option<usize> {
        match self.kind {
            PolicyKind::Deterministic => self.action_probs(s).iter().position(|&p| p == 1.0),
            PolicyKind::Stochastic => None,
        }
    }

    /// Mixes with the uniform policy: `(1 - eps) * pi + eps / |A|`.
    pub fn smoothed(&self, eps: f64) -> Self {
        let u = eps / self.n_actions as f64;
        let probs = self.probs.iter().map(|&p| (1.0 - eps) * p + u).collect();
        PolicyTable { probs, kind: if eps > 0.0 { PolicyKind::Stochastic } else { self.kind }, ..self.clone() }
    }

    pub fn check_compatible(&self, mdp: &TabularMdp) -> Result<()> {
        if self.n_states != mdp.n_states() || self.n_actions != mdp.n_actions() {
            return Err(RepairError::invalid(format!(
                "policy is {}x{}, MDP is {}x{}",
                self.n_states,
                self.n_actions,
                mdp.n_states(),
                mdp.n_actions()
            )));
        }
        Ok(())
    }

    fn sample(&self, s: usize, rng: &mut impl Rng) -> usize {
        match self.action(s) {
            Some(a) => a,
            None => sample_index(self.action_probs(s).iter().copied(), rng),
        }
    }
}

fn sample_index(weights: impl Iterator<Item = f64>, rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, w) in weights.enumerate() {
        if w <= 0.0 {
            continue;
        }
        acc += w;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Output of exact planning.
#[derive(Clone, Debug)]
pub struct Plan {
    /// `V*(s) = max_a Q*(s, a)`.
    pub values: Vec<f64>,
    /// `Q*(s, a)` at `s * n_actions + a`.
    pub q: Vec<f64>,
    pub greedy: PolicyTable,
    /// Sup-norm change of the last sweep.
    pub residual: f64,
    pub sweeps: usize,
}

impl Plan {
    pub fn q(&self, s: usize, a: usize) -> f64 {
        self.q[s * self.greedy.n_actions() + a]
    }

    /// `sum_t gamma^t (V*(s_t) - Q*(s_t, a_t))`; never negative.
    pub fn trajectory_regret(&self, gamma: f64, traj: &Trajectory) -> f64 {
        discounted_sum(
            gamma,
            traj.actions.iter().enumerate().map(|(t, &a)| {
                let s = traj.states[t];
                (self.values[s] - self.q(s, a)).max(0.0)
            }),
        )
    }

    /// Optimal discounted value from the start distribution.
    pub fn start_value(&self, mdp: &TabularMdp) -> f64 {
        mdp.start_dist().iter().zip(&self.values).map(|(p, v)| p * v).sum()
    }
}

fn q_row(mdp: &TabularMdp, reward: &RewardFn, values: &[f64], s: usize, a: usize) -> f64 {
    let gamma = mdp.gamma();
    let base = mdp.row_ids(s, a).start;
    mdp.successors(s, a)
        .iter()
        .enumerate()
        .map(|(k, &(next, p))| p * (reward.values[base + k] + gamma * values[next]))
        .sum()
}

fn check_reward(mdp: &TabularMdp, reward: &RewardFn) -> Result<()> {
    if reward.values.len() != mdp.n_transitions() {
        return Err(RepairError::invalid("reward table does not match the MDP"));
    }
    if reward.values.iter().any(|v| !v.is_finite()) {
        return Err(RepairError::invalid("reward table has non-finite entries"));
    }
    Ok(())
}

/// Infinite-horizon discounted value iteration (a stationary optimal policy).
/// With `gamma == 1` it runs `H` finite-horizon backups instead.
pub fn plan_optimal(mdp: &TabularMdp, reward: &RewardFn, tol: f64) -> Result<Plan> {
    plan_optimal_from(mdp, reward, tol, None)
}

/// Value iteration warm-started from `init` (any finite guess converges).
pub fn plan_optimal_from(mdp: &TabularMdp, reward: &RewardFn, tol: f64, init: Option<&[f64]>) -> Result<Plan> {
    if !(tol > 0.0) {
        return Err(RepairError::invalid(format!("planning tolerance {tol} must be positive")));
    }
    check_reward(mdp, reward)?;
    let (n_s, n_a) = (mdp.n_states(), mdp.n_actions());
    let mut values = match init {
        Some(v) if v.len() == n_s && v.iter().all(|x| x.is_finite()) => v.to_vec(),
        _ => vec![0.0; n_s],
    };
    let mut next_values = vec![0.0; n_s];
    let finite = mdp.gamma() >= 1.0;
    let max_sweeps = if finite { mdp.horizon() } else { 10_000_000 };
    if finite {
        values.iter_mut().for_each(|v| *v = 0.0);
    }
    let mut residual = f64::INFINITY;
    let mut sweeps = 0;
    while sweeps < max_sweeps {
        residual = 0.0;
        for s in 0..n_s {
            let best = (0..n_a).map(|a| q_row(mdp, reward, &values, s, a)).fold(f64::NEG_INFINITY, f64::max);
            residual = f64::max(residual, (best - values[s]).abs());
            next_values[s] = best;
        }
        std::mem::swap(&mut values, &mut next_values);
        sweeps += 1;
        if !finite && residual <= tol {
            break;
        }
    }
    if !residual.is_finite() && !finite {
        return Err(RepairError::Divergence("value iteration produced non-finite values".into()));
    }

    let mut q = vec![0.0; n_s * n_a];
    let mut greedy = vec![0usize; n_s];
    let mut v_out = vec![0.0; n_s];
    for s in 0..n_s {
        for a in 0..n_a {
            q[s * n_a + a] = q_row(mdp, reward, &values, s, a);
        }
        let row = &q[s * n_a..(s + 1) * n_a];
        let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let slack = TIE_EPS * best.abs().max(1.0);
        greedy[s] = row.iter().position(|&x| x >= best - slack).unwrap_or(0);
        v_out[s] = best;
    }
    Ok(Plan {
        values: v_out,
        q,
        greedy: PolicyTable::deterministic(n_a, &greedy)?,
        residual,
        sweeps,
    })
}

/// Largest `|max_a Q(s,a) - V(s)|` of a value vector under the optimal Bellman operator.
pub fn bellman_residual(mdp: &TabularMdp, reward: &RewardFn, values: &[f64]) -> f64 {
    (0..mdp.n_states())
        .map(|s| {
            let best = (0..mdp.n_actions())
                .map(|a| q_row(mdp, reward, values, s, a))
                .fold(f64::NEG_INFINITY, f64::max);
            (best - values[s]).abs()
        })
        .fold(0.0, f64::max)
}

fn expected_step(mdp: &TabularMdp, policy: &PolicyTable, reward: &RewardFn, values: &[f64], s: usize) -> f64 {
    (0..mdp.n_actions())
        .filter_map(|a| {
            let p = policy.prob(s, a);
            (p > 0.0).then(|| p * q_row(mdp, reward, values, s, a))
        })
        .sum()
}

/// Expected discounted return of an `H`-step episode, `J = sum_s p0(s) V^pi_H(s)`.
pub fn expected_return(mdp: &TabularMdp, policy: &PolicyTable, reward: &RewardFn) -> Result<f64> {
    policy.check_compatible(mdp)?;
    check_reward(mdp, reward)?;
    let n_s = mdp.n_states();
    let mut values = vec![0.0; n_s];
    let mut next = vec![0.0; n_s];
    for _ in 0..mdp.horizon() {
        for s in 0..n_s {
            next[s] = expected_step(mdp, policy, reward, &values, s);
        }
        std::mem::swap(&mut values, &mut next);
    }
    Ok(mdp.start_dist().iter().zip(&values).map(|(p, v)| p * v).sum())
}

/// Infinite-horizon discounted value `V^pi` (the planner's objective), by
/// iterative policy evaluation to `tol`. Requires `gamma < 1`.
pub fn policy_values(mdp: &TabularMdp, policy: &PolicyTable, reward: &RewardFn, tol: f64) -> Result<Vec<f64>> {
    policy.check_compatible(mdp)?;
    check_reward(mdp, reward)?;
    if mdp.gamma() >= 1.0 {
        return Err(RepairError::invalid("infinite-horizon evaluation needs gamma < 1"));
    }
    let n_s = mdp.n_states();
    let mut values = vec![0.0; n_s];
    let mut next = vec![0.0; n_s];
    loop {
        let mut delta: f64 = 0.0;
        for s in 0..n_s {
            next[s] = expected_step(mdp, policy, reward, &values, s);
            delta = delta.max((next[s] - values[s]).abs());
        }
        std::mem::swap(&mut values, &mut next);
        if delta <= tol {
            return Ok(values);
        }
    }
}

/// Normalized discounted state occupancy `(1 - gamma) sum_t gamma^t P(s_t = s)`.
/// With `gamma == 1` the average over the `H` steps of an episode is used.
pub fn state_occupancy(mdp: &TabularMdp, policy: &PolicyTable) -> Result<Vec<f64>> {
    policy.check_compatible(mdp)?;
    let n_s = mdp.n_states();
    let gamma = mdp.gamma();
    let mut dist = mdp.start_dist().to_vec();
    let mut occ = vec![0.0; n_s];
    let (steps, undiscounted) = if gamma >= 1.0 { (mdp.horizon(), true) } else { (usize::MAX, false) };
    let mut weight = if undiscounted { 1.0 / steps as f64 } else { 1.0 - gamma };
    let mut t = 0;
    while t < steps {
        for s in 0..n_s {
            occ[s] += weight * dist[s];
        }
        if !undiscounted {
            weight *= gamma;
            if weight < 1e-15 {
                break;
            }
        }
        let mut next = vec![0.0; n_s];
        for s in 0..n_s {
            if dist[s] == 0.0 {
                continue;
            }
            for a in 0..mdp.n_actions() {
                let pa = policy.prob(s, a);
                if pa == 0.0 {
                    continue;
                }
                for &(ns, p) in mdp.successors(s, a) {
                    next[ns] += dist[s] * pa * p;
                }
            }
        }
        dist = next;
        t += 1;
    }
    let total: f64 = occ.iter().sum();
    occ.iter_mut().for_each(|x| *x /= total);
    Ok(occ)
}

/// `n` seeded `H`-step trajectories.
pub fn rollout(mdp: &TabularMdp, policy: &PolicyTable, seed: u64, n: usize) -> Result<Vec<Trajectory>> {
    policy.check_compatible(mdp)?;
    if n == 0 {
        return Err(RepairError::invalid("rollout count must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| rollout_one(mdp, policy, &mut rng)).collect())
}

pub(crate) fn rollout_one(mdp: &TabularMdp, policy: &PolicyTable, rng: &mut impl Rng) -> Trajectory {
    let h = mdp.horizon();
    let mut states = Vec::with_capacity(h + 1);
    let mut actions = Vec::with_capacity(h);
    let mut s = sample_index(mdp.start_dist().iter().copied(), rng);
    states.push(s);
    for _ in 0..h {
        let a = policy.sample(s, rng);
        let succ = mdp.successors(s, a);
        s = if succ.len() == 1 { succ[0].0 } else { succ[sample_index(succ.iter().map(|x| x.1), rng)].0 };
        actions.push(a);
        states.push(s);
    }
    Trajectory { states, actions }
}

/// Every trajectory in the support of `policy` with its probability.
/// Errors when the support exceeds `limit` trajectories.
pub fn trajectory_support(mdp: &TabularMdp, policy: &PolicyTable, limit: usize) -> Result<Vec<(Trajectory, f64)>> {
    policy.check_compatible(mdp)?;
    let mut frontier: Vec<(Trajectory, f64)> = mdp
        .start_dist()
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > 0.0)
        .map(|(s, &p)| (Trajectory { states: vec![s], actions: vec![] }, p))
        .collect();
    for _ in 0..mdp.horizon() {
        let mut next = Vec::new();
        for (traj, prob) in &frontier {
            let s = *traj.states.last().expect("non-empty trajectory");
            for a in 0..mdp.n_actions() {
                let pa = policy.prob(s, a);
                if pa == 0.0 {
                    continue;
                }
                for &(ns, p) in mdp.successors(s, a) {
                    let mut t = traj.clone();
                    t.actions.push(a);
                    t.states.push(ns);
                    next.push((t, prob * pa * p));
                }
            }
            if next.len() > limit {
                return Err(RepairError::invalid(format!("trajectory support exceeds {limit}")));
            }
        }
        frontier = next;
    }
    Ok(frontier)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn single_state(gamma: f64, horizon: usize) -> TabularMdp {
        TabularMdp::new(1, 1, vec![vec![(0, 1.0)]], gamma, horizon, vec![1.0], vec![false]).unwrap()
    }

    fn chain() -> TabularMdp {
        // s0 -> s1 (absorbing)
        TabularMdp::new(2, 1, vec![vec![(1, 1.0)], vec![(1, 1.0)]], 0.5, 4, vec![1.0, 0.0], vec![false, true]).unwrap()
    }

    #[test]
    fn geometric_fixed_point() {
        let mdp = single_state(0.5, 10);
        let r = RewardFn::from_fn(&mdp, |_, _, _| 1.0).unwrap();
        let plan = plan_optimal(&mdp, &r, 1e-12).unwrap();
        assert!((plan.values[0] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn zero_reward_plans_action_zero() {
        let mdp = TabularMdp::new(
            2,
            3,
            vec![vec![(0, 0.5), (1, 0.5)], vec![(1, 1.0)], vec![(0, 1.0)], vec![(1, 1.0)], vec![(0, 1.0)], vec![(1, 1.0)]],
            0.9,
            5,
            vec![1.0, 0.0],
            vec![false, false],
        )
        .unwrap();
        let plan = plan_optimal(&mdp, &RewardFn::zeros(&mdp), 1e-9).unwrap();
        assert!(plan.values.iter().all(|&v| v == 0.0));
        assert_eq!(plan.greedy.action(0), Some(0));
        assert_eq!(plan.greedy.action(1), Some(0));
    }

    #[test]
    fn return_of_three_unit_steps() {
        let mdp = single_state(0.5, 3);
        let r = RewardFn::from_fn(&mdp, |_, _, _| 1.0).unwrap();
        let traj = Trajectory::new(vec![0; 4], vec![0; 3]).unwrap();
        assert!((r.trajectory_return(&mdp, &traj).unwrap() - 1.75).abs() < 1e-15);
        assert_eq!(RewardFn::zeros(&mdp).trajectory_return(&mdp, &traj).unwrap(), 0.0);
    }

    #[test]
    fn occupancy_examples() {
        assert_eq!(state_occupancy(&single_state(0.9, 3), &PolicyTable::uniform(1, 1)).unwrap(), vec![1.0]);
        let occ = state_occupancy(&chain(), &PolicyTable::uniform(2, 1)).unwrap();
        assert!((occ[0] - 0.5).abs() < 1e-9 && (occ[1] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        assert!(TabularMdp::new(1, 1, vec![vec![(0, 0.7)]], 0.5, 1, vec![1.0], vec![false]).is_err());
        assert!(TabularMdp::new(1, 1, vec![vec![(0, 1.0)]], 0.5, 1, vec![0.5], vec![false]).is_err());
        // absorbing state that leaves
        assert!(TabularMdp::new(2, 1, vec![vec![(1, 1.0)], vec![(0, 1.0)]], 0.5, 1, vec![1.0, 0.0], vec![false, true]).is_err());
        let mdp = single_state(0.5, 1);
        assert!(RewardFn::from_values(&mdp, vec![f64::NAN]).is_err());
        assert!(RewardFn::from_values(&mdp, vec![R_MAX + 1.0]).is_err());
        assert!(plan_optimal(&mdp, &RewardFn::zeros(&mdp), 0.0).is_err());
    }

    #[test]
    fn non_finite_reward_is_an_error_for_planning() {
        let mdp = single_state(0.5, 1);
        let bad = RewardFn { values: vec![f64::INFINITY] };
        assert!(matches!(plan_optimal(&mdp, &bad, 1e-6), Err(RepairError::InvalidInput(_))));
    }

    #[test]
    fn json_round_trip() {
        let mdp = chain();
        let text = serde_json::to_string(&mdp).unwrap();
        let back: TabularMdp = serde_json::from_str(&text).unwrap();
        assert_eq!(back, mdp);
    }

    #[test]
    fn regret_of_one_bad_first_action() {
        // two actions from s0: a0 -> s1 (r = 1), a1 -> s2 (r = 0.25); both absorbing afterwards
        let mdp = TabularMdp::new(
            3,
            2,
            vec![vec![(1, 1.0)], vec![(2, 1.0)], vec![(1, 1.0)], vec![(1, 1.0)], vec![(2, 1.0)], vec![(2, 1.0)]],
            0.9,
            2,
            vec![1.0, 0.0, 0.0],
            vec![false, true, true],
        )
        .unwrap();
        let r = RewardFn::from_fn(&mdp, |s, a, _| if s == 0 && a == 0 { 1.0 } else if s == 0 { 0.25 } else { 0.0 }).unwrap();
        let plan = plan_optimal(&mdp, &r, 1e-12).unwrap();
        let good = Trajectory::new(vec![0, 1, 1], vec![0, 0]).unwrap();
        let bad = Trajectory::new(vec![0, 2, 2], vec![1, 0]).unwrap();
        assert_eq!(plan.trajectory_regret(0.9, &good), 0.0);
        assert!((plan.trajectory_regret(0.9, &bad) - 0.75).abs() < 1e-9);
    }

    #[test]
    fn support_enumeration_sums_to_one() {
        let mdp = TabularMdp::new(
            2,
            2,
            vec![vec![(0, 0.3), (1, 0.7)], vec![(1, 1.0)], vec![(0, 1.0)], vec![(0, 0.5), (1, 0.5)]],
            0.9,
            3,
            vec![0.5, 0.5],
            vec![false, false],
        )
        .unwrap();
        let support = trajectory_support(&mdp, &PolicyTable::uniform(2, 2), 1000).unwrap();
        let total: f64 = support.iter().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}
