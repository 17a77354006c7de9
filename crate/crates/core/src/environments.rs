//! Desk-scale environments: the tomato-watering gridworld, the two
//! four-action illustrative MDPs and seeded random MDPs.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RepairError, Result};
use crate::mdp::{plan_optimal, PolicyTable, RewardFn, TabularMdp};

pub type Cell = (usize, usize);

/// Moves for actions 0..4: up, down, left, right. `y = 0` is the top row.
pub const MOVES: [(isize, isize); 4] = [(0, -1), (0, 1), (-1, 0), (1, 0)];

const GRIDWORLD: &str = include_str!("../fixtures/gridworld.json");
const GRIDWORLD_MINI: &str = include_str!("../fixtures/gridworld-mini.json");
const GRIDWORLD_PESSIMISTIC: &str = include_str!("../fixtures/gridworld-pessimistic.json");

pub const ENV_IDS: [&str; 6] = ["gridworld", "gridworld-mini", "gridworld-pessimistic", "mdp1", "mdp2", "random"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridworldSpec {
    pub version: u32,
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub walls: Vec<Cell>,
    pub tomatoes: Vec<Cell>,
    pub sprinkler: Cell,
    pub start: Cell,
    /// Tomatoes the reference policy is trained to water.
    pub reference_tomatoes: Vec<Cell>,
    /// Tomatoes the proxy penalizes on first visit instead of rewarding.
    #[serde(default)]
    pub pessimistic_tomatoes: Vec<Cell>,
    pub horizon: usize,
    pub gamma: f64,
    pub sprinkler_bonus: f64,
}

impl GridworldSpec {
    pub fn fixture(name: &str) -> Result<Self> {
        let text = match name {
            "gridworld" => GRIDWORLD,
            "gridworld-mini" => GRIDWORLD_MINI,
            "gridworld-pessimistic" => GRIDWORLD_PESSIMISTIC,
            other => return Err(RepairError::invalid(format!("no gridworld fixture named {other}"))),
        };
        Ok(serde_json::from_str(text)?)
    }

    fn in_bounds(&self, c: Cell) -> bool {
        c.0 < self.width && c.1 < self.height
    }

    fn passable(&self, c: Cell) -> bool {
        self.in_bounds(c) && !self.walls.contains(&c)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(RepairError::Construction(msg));
        if self.width == 0 || self.height == 0 {
            return fail("grid must be non-empty".into());
        }
        if self.tomatoes.is_empty() {
            return fail("grid needs at least one tomato".into());
        }
        if self.tomatoes.len() > 16 {
            return fail(format!("{} tomatoes would need 2^{} mask states", self.tomatoes.len(), self.tomatoes.len()));
        }
        let mut special: Vec<Cell> = self.tomatoes.clone();
        special.push(self.sprinkler);
        special.push(self.start);
        for &c in &special {
            if !self.passable(c) {
                return fail(format!("cell {c:?} is a wall or outside the grid"));
            }
        }
        let mut sorted = special.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != special.len() {
            return fail("tomato, sprinkler and start cells must be distinct".into());
        }
        for c in self.reference_tomatoes.iter().chain(&self.pessimistic_tomatoes) {
            if !self.tomatoes.contains(c) {
                return fail(format!("{c:?} is not a tomato"));
            }
        }
        if !self.sprinkler_bonus.is_finite() || !self.gamma.is_finite() {
            return fail("non-finite reward parameters".into());
        }
        Ok(())
    }
}

/// A built gridworld: the augmented-state MDP plus the layout bookkeeping.
#[derive(Clone, Debug)]
pub struct Gridworld {
    pub spec: GridworldSpec,
    /// Passable cells in row-major order.
    pub cells: Vec<Cell>,
    cell_index: Vec<Option<usize>>,
    /// Cell index of each tomato, in spec order.
    pub tomato_cells: Vec<usize>,
    pub sprinkler_cell: usize,
    pub start_cell: usize,
}

impl Gridworld {
    pub fn n_tomatoes(&self) -> usize {
        self.tomato_cells.len()
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn n_masks(&self) -> usize {
        1 << self.n_tomatoes()
    }

    /// Augmented state id `cell * 2^n + mask`.
    pub fn state(&self, cell: usize, mask: usize) -> usize {
        cell * self.n_masks() + mask
    }

    pub fn decode(&self, state: usize) -> (usize, usize) {
        (state / self.n_masks(), state % self.n_masks())
    }

    pub fn cell_index(&self, c: Cell) -> Option<usize> {
        if !self.spec.in_bounds(c) {
            return None;
        }
        self.cell_index[c.1 * self.spec.width + c.0]
    }

    pub fn cell_of_state(&self, state: usize) -> Cell {
        self.cells[self.decode(state).0]
    }

    pub fn tomato_at(&self, cell: usize) -> Option<usize> {
        self.tomato_cells.iter().position(|&t| t == cell)
    }

    /// Cell reached from `cell` by `action`; walls and edges block.
    pub fn step_cell(&self, cell: usize, action: usize) -> usize {
        let (x, y) = self.cells[cell];
        let (dx, dy) = MOVES[action];
        let (nx, ny) = (x as isize + dx, y as isize + dy);
        if nx < 0 || ny < 0 {
            return cell;
        }
        self.cell_index((nx as usize, ny as usize)).unwrap_or(cell)
    }

    /// Mask after entering `next_cell`, and the tomato newly watered, if any.
    pub fn water(&self, mask: usize, next_cell: usize) -> (usize, Option<usize>) {
        match self.tomato_at(next_cell) {
            Some(i) if mask & (1 << i) == 0 => (mask | (1 << i), Some(i)),
            _ => (mask, None),
        }
    }

    /// Shortest-path distances between cells (BFS), `usize::MAX` if unreachable.
    pub fn distances_from(&self, cell: usize) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.n_cells()];
        let mut queue = std::collections::VecDeque::new();
        dist[cell] = 0;
        queue.push_back(cell);
        while let Some(c) = queue.pop_front() {
            for a in 0..MOVES.len() {
                let n = self.step_cell(c, a);
                if dist[n] == usize::MAX {
                    dist[n] = dist[c] + 1;
                    queue.push_back(n);
                }
            }
        }
        dist
    }

    /// First-visit reward restricted to the tomatoes in `which`.
    fn first_visit_reward(&self, mdp: &TabularMdp, which: &[usize], value: impl Fn(usize) -> f64) -> Result<RewardFn> {
        RewardFn::from_fn(mdp, |s, _, next| {
            let (_, mask) = self.decode(s);
            let (next_cell, _) = self.decode(next);
            match self.water(mask, next_cell) {
                (_, Some(i)) if which.contains(&i) => value(i),
                _ => 0.0,
            }
        })
    }
}

/// Builds the augmented gridworld MDP with its ground-truth and proxy rewards.
pub fn build_tomato_gridworld(spec: &GridworldSpec) -> Result<(Gridworld, TabularMdp, RewardFn, RewardFn)> {
    spec.validate()?;
    let mut cells = Vec::new();
    let mut cell_index = vec![None; spec.width * spec.height];
    for y in 0..spec.height {
        for x in 0..spec.width {
            if spec.passable((x, y)) {
                cell_index[y * spec.width + x] = Some(cells.len());
                cells.push((x, y));
            }
        }
    }
    let idx = |c: Cell| cell_index[c.1 * spec.width + c.0].expect("validated cell");
    let grid = Gridworld {
        spec: spec.clone(),
        tomato_cells: spec.tomatoes.iter().map(|&c| idx(c)).collect(),
        sprinkler_cell: idx(spec.sprinkler),
        start_cell: idx(spec.start),
        cells,
        cell_index,
    };

    let from_start = grid.distances_from(grid.start_cell);
    for (&t, c) in grid.tomato_cells.iter().zip(&spec.tomatoes) {
        if from_start[t] > spec.horizon {
            return Err(RepairError::Construction(format!("tomato {c:?} is unreachable within the horizon")));
        }
    }

    let n_states = grid.n_cells() * grid.n_masks();
    let mut rows = Vec::with_capacity(n_states * MOVES.len());
    for s in 0..n_states {
        let (cell, mask) = grid.decode(s);
        for a in 0..MOVES.len() {
            let next_cell = grid.step_cell(cell, a);
            let (next_mask, _) = grid.water(mask, next_cell);
            rows.push(vec![(grid.state(next_cell, next_mask), 1.0)]);
        }
    }
    let mut start = vec![0.0; n_states];
    start[grid.state(grid.start_cell, 0)] = 1.0;
    let mdp = TabularMdp::new(n_states, MOVES.len(), rows, spec.gamma, spec.horizon, start, vec![false; n_states])?;

    let all: Vec<usize> = (0..grid.n_tomatoes()).collect();
    let truth = grid.first_visit_reward(&mdp, &all, |_| 1.0)?;
    let pessimistic: Vec<usize> =
        spec.pessimistic_tomatoes.iter().map(|c| spec.tomatoes.iter().position(|t| t == c).expect("validated tomato")).collect();
    let first_visit_proxy = grid.first_visit_reward(&mdp, &all, |i| if pessimistic.contains(&i) { -1.0 } else { 1.0 })?;
    let proxy_values = (0..mdp.n_transitions())
        .map(|id| {
            let (_, _, next) = mdp.transition(id);
            let bonus = if grid.decode(next).0 == grid.sprinkler_cell { spec.sprinkler_bonus } else { 0.0 };
            first_visit_proxy.get(id) + bonus
        })
        .collect();
    let proxy = RewardFn::from_values(&mdp, proxy_values)?;
    Ok((grid, mdp, truth, proxy))
}

/// Optimal policy for first-visit reward on the reference tomatoes only.
pub fn gridworld_reference(grid: &Gridworld, mdp: &TabularMdp) -> Result<PolicyTable> {
    let which: Vec<usize> = grid
        .spec
        .reference_tomatoes
        .iter()
        .map(|&c| grid.tomato_at(grid.cell_index(c).expect("validated cell")).expect("validated tomato"))
        .collect();
    let reward = grid.first_visit_reward(mdp, &which, |_| 1.0)?;
    Ok(plan_optimal(mdp, &reward, 1e-10)?.greedy)
}

/// Horizon-one MDP: `s0` fans out to absorbing `s1..sn` with rewards on arrival.
fn fan_mdp(proxy: &[f64], truth: &[f64], reference_action: usize) -> Result<(TabularMdp, RewardFn, RewardFn, PolicyTable)> {
    let n = proxy.len();
    let mut rows = Vec::with_capacity((n + 1) * n);
    for a in 0..n {
        rows.push(vec![(a + 1, 1.0)]);
    }
    for s in 1..=n {
        for _ in 0..n {
            rows.push(vec![(s, 1.0)]);
        }
    }
    let mut start = vec![0.0; n + 1];
    start[0] = 1.0;
    let mut absorbing = vec![true; n + 1];
    absorbing[0] = false;
    let mdp = TabularMdp::new(n + 1, n, rows, 0.99, 1, start, absorbing)?;
    let table = |values: &[f64]| RewardFn::from_fn(&mdp, |s, a, _| if s == 0 { values[a] } else { 0.0 });
    let truth_fn = table(truth)?;
    let proxy_fn = table(proxy)?;
    let mut actions = vec![0; n + 1];
    actions[0] = reference_action;
    let reference = PolicyTable::deterministic(n, &actions)?;
    Ok((mdp, truth_fn, proxy_fn, reference))
}

pub const MDP1_PROXY: [f64; 4] = [1.0, 0.1, 0.2, 0.8];
/// `r(s1)` is the strict minimum so every comparison against `a1` is informative.
pub const MDP1_TRUTH: [f64; 4] = [0.05, 0.5, 0.1, 1.0];
pub const MDP2_PROXY: [f64; 4] = [1.0, 0.2, 0.3, 0.8];
pub const MDP2_TRUTH: [f64; 4] = [0.1, 0.9, 0.5, 0.7];

/// Proxy and truth arrival rewards of the `n`-action member of the first family.
pub fn mdp1_values(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n < 2 {
        return Err(RepairError::invalid("the fan MDP needs at least two actions"));
    }
    if n == 4 {
        return Ok((MDP1_PROXY.to_vec(), MDP1_TRUTH.to_vec()));
    }
    let mut proxy = vec![0.0; n];
    let mut truth = vec![0.0; n];
    let spread = (n.saturating_sub(3)).max(1) as f64;
    for i in 1..n - 1 {
        proxy[i] = 0.1 + 0.1 * (i - 1) as f64 / spread;
        truth[i] = if i == 1 { 0.5 } else { 0.1 + 0.2 * (i - 2) as f64 / spread };
    }
    proxy[0] = 1.0;
    truth[0] = 0.05;
    proxy[n - 1] = 0.8;
    truth[n - 1] = 1.0;
    Ok((proxy, truth))
}

/// The first illustrative MDP, generalized to `n` actions; the reference picks `a2`.
pub fn build_mdp1_n(n: usize) -> Result<(TabularMdp, RewardFn, RewardFn, PolicyTable)> {
    let (proxy, truth) = mdp1_values(n)?;
    fan_mdp(&proxy, &truth, 1)
}

pub fn build_mdp1() -> Result<(TabularMdp, RewardFn, RewardFn, PolicyTable)> {
    build_mdp1_n(4)
}

pub fn build_mdp2() -> Result<(TabularMdp, RewardFn, RewardFn, PolicyTable)> {
    fan_mdp(&MDP2_PROXY, &MDP2_TRUTH, 2)
}

/// Checks the orderings the fan-MDP argument relies on; returns the first violation.
pub fn check_fan_orderings(proxy: &[f64], truth: &[f64], reference_action: usize) -> Result<()> {
    let n = proxy.len();
    let fail = |m: String| Err(RepairError::Construction(m));
    let argmax = |v: &[f64]| (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b });
    if argmax(proxy) != 0 || proxy.iter().skip(1).any(|&p| p >= proxy[0]) {
        return fail("proxy must be uniquely maximal at a1".into());
    }
    for i in 1..n - 1 {
        if proxy[n - 1] <= proxy[i] {
            return fail(format!("proxy at a{} must exceed a{}", n, i + 1));
        }
    }
    for i in 0..n - 1 {
        if truth[n - 1] <= truth[i] {
            return fail(format!("truth at a{} must exceed a{}", n, i + 1));
        }
    }
    if truth[reference_action] <= truth[0] {
        return fail("reference action must beat a1 under the truth".into());
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RandomLayout {
    /// Any state may follow any state; the episode is cut at the horizon.
    Dense,
    /// States are arranged in `horizon` layers ending in an absorbing
    /// zero-reward terminal, so every episode finishes exactly at the horizon.
    Layered,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomMdpConfig {
    pub n_states: usize,
    pub n_actions: usize,
    pub horizon: usize,
    pub gamma: f64,
    pub layout: RandomLayout,
    /// Successors per `(s, a)`.
    pub branching: usize,
    /// Fraction of transitions whose proxy reward is inflated.
    pub perturb_fraction: f64,
    /// Inflation is uniform on `[0, perturb_scale]`.
    pub perturb_scale: f64,
}

impl Default for RandomMdpConfig {
    fn default() -> Self {
        RandomMdpConfig {
            n_states: 7,
            n_actions: 3,
            horizon: 3,
            gamma: 0.99,
            layout: RandomLayout::Layered,
            branching: 2,
            perturb_fraction: 0.3,
            perturb_scale: 2.0,
        }
    }
}

/// Random MDP with an optimistic proxy (`proxy >= truth` pointwise) and a
/// random deterministic reference policy.
pub fn random_mdp(seed: u64, cfg: &RandomMdpConfig) -> Result<(TabularMdp, RewardFn, RewardFn, PolicyTable)> {
    if cfg.n_states == 0 || cfg.n_actions == 0 || cfg.horizon == 0 || cfg.branching == 0 {
        return Err(RepairError::invalid("random MDP sizes must be at least 1"));
    }
    if !(0.0..=1.0).contains(&cfg.perturb_fraction) || !(cfg.perturb_scale >= 0.0) {
        return Err(RepairError::invalid("perturbation fraction must be in [0, 1] and scale non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.n_states;
    let (width, terminal) = match cfg.layout {
        RandomLayout::Dense => (n, None),
        RandomLayout::Layered => {
            if n < cfg.horizon + 1 {
                return Err(RepairError::invalid(format!(
                    "a layered MDP with horizon {} needs at least {} states",
                    cfg.horizon,
                    cfg.horizon + 1
                )));
            }
            ((n - 1) / cfg.horizon, Some(n - 1))
        }
    };
    let layer_of = |s: usize| s / width;

    let mut rows = Vec::with_capacity(n * cfg.n_actions);
    for s in 0..n {
        for _ in 0..cfg.n_actions {
            let pool: Vec<usize> = match terminal {
                None => (0..n).collect(),
                Some(t) if s == t || layer_of(s) >= cfg.horizon => vec![t],
                Some(t) if layer_of(s) + 1 == cfg.horizon => vec![t],
                Some(_) => {
                    let next = layer_of(s) + 1;
                    (next * width..(next + 1) * width).collect()
                }
            };
            let mut pool = pool;
            pool.shuffle(&mut rng);
            pool.truncate(cfg.branching.min(pool.len()));
            let weights: Vec<f64> = pool.iter().map(|_| 0.1 + rng.random::<f64>()).collect();
            let total: f64 = weights.iter().sum();
            rows.push(pool.into_iter().zip(weights).map(|(next, w)| (next, w / total)).collect());
        }
    }
    // Rows must sum to one within tolerance after normalization.
    let mut start = vec![0.0; n];
    let mut absorbing = vec![false; n];
    match terminal {
        Some(t) => {
            // Orphan states beyond the last full layer route to the terminal.
            for s in 0..n {
                if s != t && layer_of(s) >= cfg.horizon {
                    for a in 0..cfg.n_actions {
                        rows[s * cfg.n_actions + a] = vec![(t, 1.0)];
                    }
                }
            }
            for a in 0..cfg.n_actions {
                rows[t * cfg.n_actions + a] = vec![(t, 1.0)];
            }
            absorbing[t] = true;
            let w: Vec<f64> = (0..width).map(|_| 0.1 + rng.random::<f64>()).collect();
            let total: f64 = w.iter().sum();
            for (s, p) in w.into_iter().enumerate() {
                start[s] = p / total;
            }
        }
        None => start[rng.random_range(0..n)] = 1.0,
    }
    let mdp = TabularMdp::new(n, cfg.n_actions, rows, cfg.gamma, cfg.horizon, start, absorbing)?;

    let truth_values: Vec<f64> = (0..mdp.n_transitions())
        .map(|id| {
            let (s, _, _) = mdp.transition(id);
            if Some(s) == terminal { 0.0 } else { rng.random_range(-1.0..1.0) }
        })
        .collect();
    let proxy_values: Vec<f64> = (0..mdp.n_transitions())
        .map(|id| {
            let (s, _, _) = mdp.transition(id);
            let bump = if Some(s) != terminal && rng.random::<f64>() < cfg.perturb_fraction {
                cfg.perturb_scale * rng.random::<f64>()
            } else {
                0.0
            };
            truth_values[id] + bump
        })
        .collect();
    let truth = RewardFn::from_values(&mdp, truth_values)?;
    let proxy = RewardFn::from_values(&mdp, proxy_values)?;
    let actions: Vec<usize> = (0..n).map(|_| rng.random_range(0..cfg.n_actions)).collect();
    let reference = PolicyTable::deterministic(cfg.n_actions, &actions)?;
    Ok((mdp, truth, proxy, reference))
}

/// Everything an experiment needs about one environment.
#[derive(Clone, Debug)]
pub struct Environment {
    pub id: String,
    pub mdp: TabularMdp,
    pub truth: RewardFn,
    pub proxy: RewardFn,
    pub reference: PolicyTable,
    pub grid: Option<Gridworld>,
}

#[derive(Clone, Debug, Default)]
pub struct EnvOptions {
    pub gamma: Option<f64>,
    pub sprinkler_bonus: Option<f64>,
    pub seed: u64,
    pub random: Option<RandomMdpConfig>,
}

impl Environment {
    pub fn load(id: &str, opts: &EnvOptions) -> Result<Self> {
        let env = match id {
            "gridworld" | "gridworld-mini" | "gridworld-pessimistic" => {
                let mut spec = GridworldSpec::fixture(id)?;
                if let Some(g) = opts.gamma {
                    spec.gamma = g;
                }
                if let Some(b) = opts.sprinkler_bonus {
                    spec.sprinkler_bonus = b;
                }
                Self::gridworld(&spec)?
            }
            "mdp1" | "mdp2" => {
                let (mdp, truth, proxy, reference) = if id == "mdp1" { build_mdp1()? } else { build_mdp2()? };
                let mdp = match opts.gamma {
                    Some(g) => mdp.with_gamma(g)?,
                    None => mdp,
                };
                Environment { id: id.to_string(), mdp, truth, proxy, reference, grid: None }
            }
            "random" => {
                let cfg = opts.random.clone().unwrap_or_default();
                let cfg = RandomMdpConfig { gamma: opts.gamma.unwrap_or(cfg.gamma), ..cfg };
                let (mdp, truth, proxy, reference) = random_mdp(opts.seed, &cfg)?;
                Environment { id: id.to_string(), mdp, truth, proxy, reference, grid: None }
            }
            other => return Err(RepairError::invalid(format!("unknown environment {other}"))),
        };
        Ok(env)
    }

    pub fn gridworld(spec: &GridworldSpec) -> Result<Self> {
        let (grid, mdp, truth, proxy) = build_tomato_gridworld(spec)?;
        let reference = gridworld_reference(&grid, &mdp)?;
        Ok(Environment { id: spec.name.clone(), mdp, truth, proxy, reference, grid: Some(grid) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{expected_return, rollout, Trajectory};

    #[test]
    fn fixtures_parse_and_validate() {
        for name in ["gridworld", "gridworld-mini", "gridworld-pessimistic"] {
            let spec = GridworldSpec::fixture(name).unwrap();
            assert_eq!(spec.name, name);
            spec.validate().unwrap();
        }
    }

    #[test]
    fn mini_state_count_and_determinism() {
        let spec = GridworldSpec::fixture("gridworld-mini").unwrap();
        let (grid, mdp, _, _) = build_tomato_gridworld(&spec).unwrap();
        assert_eq!(grid.n_cells(), 46);
        assert_eq!(mdp.n_states(), 46 * 16);
        assert!(mdp.is_deterministic());
    }

    #[test]
    fn walls_block_movement() {
        let spec = GridworldSpec::fixture("gridworld-mini").unwrap();
        let (grid, ..) = build_tomato_gridworld(&spec).unwrap();
        let c = grid.cell_index((2, 3)).unwrap();
        assert_eq!(grid.step_cell(c, 3), c);
        let corner = grid.cell_index((0, 0)).unwrap();
        assert_eq!(grid.step_cell(corner, 0), corner);
        assert_eq!(grid.step_cell(corner, 2), corner);
    }

    #[test]
    fn unreachable_tomato_is_rejected() {
        let mut spec = GridworldSpec::fixture("gridworld-mini").unwrap();
        spec.walls.extend([(0, 1), (1, 0), (2, 1), (1, 2)]);
        assert!(matches!(build_tomato_gridworld(&spec), Err(RepairError::Construction(_))));
    }

    #[test]
    fn duplicate_special_cells_are_rejected() {
        let mut spec = GridworldSpec::fixture("gridworld-mini").unwrap();
        spec.sprinkler = spec.start;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn sprinkler_loop_earns_only_proxy() {
        let env = Environment::load("gridworld-mini", &EnvOptions::default()).unwrap();
        let grid = env.grid.as_ref().unwrap();
        let spr = grid.state(grid.sprinkler_cell, 0);
        // staying put by pushing right into the east edge
        let traj = Trajectory::new(vec![spr; 6], vec![3; 5]).unwrap();
        assert_eq!(env.truth.trajectory_return(&env.mdp, &traj).unwrap(), 0.0);
        let proxy = env.proxy.trajectory_return(&env.mdp, &traj).unwrap();
        let expected: f64 = (0..5).map(|t| 0.99f64.powi(t)).sum();
        assert!((proxy - expected).abs() < 1e-12);
    }

    #[test]
    fn mdp_values_satisfy_orderings() {
        check_fan_orderings(&MDP1_PROXY, &MDP1_TRUTH, 1).unwrap();
        for n in 3..12 {
            let (p, t) = mdp1_values(n).unwrap();
            check_fan_orderings(&p, &t, 1).unwrap();
            assert!(t.iter().skip(1).all(|&x| x > t[0]), "n = {n}");
        }
        // second MDP: a1 loses to the reference a3, the next argmax a4 beats a3 so
        // the chain stalls there, yet a2 is optimal
        let (p, t) = (MDP2_PROXY, MDP2_TRUTH);
        assert!(p[0] > p[3] && p[3] > p[1] && p[3] > p[2]);
        assert!(t[2] > t[0] && t[3] > t[2] && t[1] > t[3]);
        assert!(p[3] > p[2], "proxy already agrees with the a4 over a3 label");
    }

    #[test]
    fn reference_policies_of_fan_mdps() {
        let (mdp, truth, _, reference) = build_mdp1().unwrap();
        for t in rollout(&mdp, &reference, 7, 5).unwrap() {
            assert_eq!((t.states.as_slice(), t.actions.as_slice()), (&[0, 2][..], &[1][..]));
        }
        assert!((expected_return(&mdp, &reference, &truth).unwrap() - 0.5).abs() < 1e-12);
        let (_, _, _, reference) = build_mdp2().unwrap();
        assert_eq!(reference.action(0), Some(2));
    }

    #[test]
    fn random_mdp_is_seeded_and_optimistic() {
        let cfg = RandomMdpConfig::default();
        let (a, ta, pa, ra) = random_mdp(11, &cfg).unwrap();
        let (b, tb, pb, rb) = random_mdp(11, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!((ta, pa.clone(), ra), (tb.clone(), pb, rb));
        assert!(pa.values().iter().zip(tb.values()).all(|(p, t)| p >= t));
        let flat = RandomMdpConfig { perturb_scale: 0.0, ..cfg };
        let (_, t, p, _) = random_mdp(3, &flat).unwrap();
        assert_eq!(t, p);
    }

    #[test]
    fn layered_random_mdp_terminates_at_horizon() {
        let cfg = RandomMdpConfig { n_states: 8, horizon: 3, ..Default::default() };
        let (mdp, ..) = random_mdp(5, &cfg).unwrap();
        let uniform = PolicyTable::uniform(mdp.n_states(), mdp.n_actions());
        for t in rollout(&mdp, &uniform, 1, 50).unwrap() {
            assert_eq!(*t.states.last().unwrap(), 7);
            assert!(t.states[..3].iter().all(|&s| s != 7));
        }
    }

    #[test]
    fn unknown_environment_is_an_error() {
        assert!(Environment::load("pandemic", &EnvOptions::default()).is_err());
    }
}
