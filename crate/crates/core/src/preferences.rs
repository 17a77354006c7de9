//! Preference labels, labelers, the accumulated dataset with its proxy
//! agreement partition, pair sampling and the persistent human queue.
//!
//! Label convention: `mu = 0` means the first trajectory is preferred,
//! `mu = 1` the second, `mu = 0.5` a tie.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RepairError, Result};
use crate::mdp::{plan_optimal, Plan, RewardFn, TabularMdp, Trajectory};

/// Returns closer than this count as equal.
pub const TIE_TOL: f64 = 1e-9;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    First,
    Tie,
    Second,
}

impl Label {
    pub fn mu(self) -> f64 {
        match self {
            Label::First => 0.0,
            Label::Tie => 0.5,
            Label::Second => 1.0,
        }
    }

    pub fn from_mu(mu: f64) -> Result<Self> {
        if mu == 0.0 {
            Ok(Label::First)
        } else if mu == 0.5 {
            Ok(Label::Tie)
        } else if mu == 1.0 {
            Ok(Label::Second)
        } else {
            Err(RepairError::InvalidLabel(mu))
        }
    }

    /// The same judgement with the trajectories swapped.
    pub fn flipped(self) -> Self {
        match self {
            Label::First => Label::Second,
            Label::Tie => Label::Tie,
            Label::Second => Label::First,
        }
    }
}

impl Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_f64(self.mu())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let mu = f64::deserialize(deserializer)?;
        Label::from_mu(mu).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    Boltzmann,
    Regret,
    Human,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceSample {
    pub tau1: Trajectory,
    pub tau2: Trajectory,
    pub label: Label,
    pub source: LabelSource,
}

/// `P(mu = 0) = sigmoid((r(tau1) - r(tau2)) / temperature)`.
pub fn boltzmann_prob_first(
    mdp: &TabularMdp,
    truth: &RewardFn,
    tau1: &Trajectory,
    tau2: &Trajectory,
    temperature: f64,
) -> Result<f64> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(RepairError::invalid(format!("temperature {temperature} must be positive")));
    }
    let gap = truth.trajectory_return(mdp, tau1)? - truth.trajectory_return(mdp, tau2)?;
    Ok(sigmoid(gap / temperature))
}

/// One stochastic Boltzmann label; never a tie.
pub fn boltzmann_label(
    mdp: &TabularMdp,
    truth: &RewardFn,
    tau1: &Trajectory,
    tau2: &Trajectory,
    temperature: f64,
    rng: &mut impl Rng,
) -> Result<Label> {
    let p = boltzmann_prob_first(mdp, truth, tau1, tau2, temperature)?;
    Ok(if rng.random::<f64>() < p { Label::First } else { Label::Second })
}

/// Noiseless labels from discounted regret under the ground truth.
#[derive(Clone, Debug)]
pub struct RegretLabeler {
    plan: Plan,
    gamma: f64,
}

impl RegretLabeler {
    pub fn new(mdp: &TabularMdp, truth: &RewardFn) -> Result<Self> {
        Ok(RegretLabeler { plan: plan_optimal(mdp, truth, 1e-12)?, gamma: mdp.gamma() })
    }

    pub fn regret(&self, traj: &Trajectory) -> f64 {
        self.plan.trajectory_regret(self.gamma, traj)
    }

    pub fn label(&self, tau1: &Trajectory, tau2: &Trajectory) -> Label {
        let (r1, r2) = (self.regret(tau1), self.regret(tau2));
        if (r1 - r2).abs() <= TIE_TOL {
            Label::Tie
        } else if r1 < r2 {
            Label::First
        } else {
            Label::Second
        }
    }
}

pub fn regret_label(mdp: &TabularMdp, truth: &RewardFn, tau1: &Trajectory, tau2: &Trajectory) -> Result<Label> {
    Ok(RegretLabeler::new(mdp, truth)?.label(tau1, tau2))
}

/// Anything that can label a batch of trajectory pairs.
pub trait Oracle {
    fn source(&self) -> LabelSource;
    fn label_batch(&mut self, pairs: &[(Trajectory, Trajectory)]) -> Result<Vec<Label>>;
}

/// Seeded Boltzmann labels under the ground truth.
pub struct BoltzmannOracle<'a> {
    mdp: &'a TabularMdp,
    truth: &'a RewardFn,
    temperature: f64,
    rng: ChaCha8Rng,
}

impl<'a> BoltzmannOracle<'a> {
    pub fn new(mdp: &'a TabularMdp, truth: &'a RewardFn, temperature: f64, seed: u64) -> Result<Self> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(RepairError::invalid(format!("temperature {temperature} must be positive")));
        }
        Ok(BoltzmannOracle { mdp, truth, temperature, rng: ChaCha8Rng::seed_from_u64(seed) })
    }
}

impl Oracle for BoltzmannOracle<'_> {
    fn source(&self) -> LabelSource {
        LabelSource::Boltzmann
    }

    fn label_batch(&mut self, pairs: &[(Trajectory, Trajectory)]) -> Result<Vec<Label>> {
        pairs
            .iter()
            .map(|(a, b)| boltzmann_label(self.mdp, self.truth, a, b, self.temperature, &mut self.rng))
            .collect()
    }
}

impl Oracle for RegretLabeler {
    fn source(&self) -> LabelSource {
        LabelSource::Regret
    }

    fn label_batch(&mut self, pairs: &[(Trajectory, Trajectory)]) -> Result<Vec<Label>> {
        Ok(pairs.iter().map(|(a, b)| self.label(a, b)).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Partition {
    /// The reference reward ranks the pair the way the label does.
    Agree,
    Disagree,
}

/// Agreement test of the reference reward with a label; ties count as agreement.
pub fn classify(return1: f64, return2: f64, label: Label) -> Partition {
    let margin = return2 - return1;
    let reward_sign = if margin.abs() <= TIE_TOL { 0 } else if margin > 0.0 { 1 } else { -1 };
    let label_sign = match label {
        Label::First => -1,
        Label::Tie => 0,
        Label::Second => 1,
    };
    if reward_sign == label_sign {
        Partition::Agree
    } else {
        Partition::Disagree
    }
}

/// A labeled pair stored by trajectory id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredSample {
    pub tau1: usize,
    pub tau2: usize,
    pub label: Label,
    pub source: LabelSource,
}

/// Append-only preference data with deduplicated trajectories.
#[derive(Clone, Debug, Default)]
pub struct PreferenceDataset {
    trajectories: Vec<Trajectory>,
    index: HashMap<Trajectory, usize>,
    samples: Vec<StoredSample>,
    tags: Vec<Partition>,
    /// Returns of every trajectory under the reward the tags refer to.
    reference_returns: Option<Vec<f64>>,
}

impl PreferenceDataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stores a trajectory once and returns its id.
    pub fn intern(&mut self, traj: &Trajectory) -> usize {
        if let Some(&id) = self.index.get(traj) {
            return id;
        }
        let id = self.trajectories.len();
        self.trajectories.push(traj.clone());
        self.index.insert(traj.clone(), id);
        id
    }

    pub fn push(&mut self, sample: PreferenceSample) -> usize {
        let tau1 = self.intern(&sample.tau1);
        let tau2 = self.intern(&sample.tau2);
        self.push_ids(tau1, tau2, sample.label, sample.source)
    }

    pub fn push_ids(&mut self, tau1: usize, tau2: usize, label: Label, source: LabelSource) -> usize {
        assert!(tau1 < self.trajectories.len() && tau2 < self.trajectories.len(), "unknown trajectory id");
        self.samples.push(StoredSample { tau1, tau2, label, source });
        // keep tags total: new samples are classified against the same reward
        if let Some(returns) = &self.reference_returns {
            if let (Some(&r1), Some(&r2)) = (returns.get(tau1), returns.get(tau2)) {
                self.tags.push(classify(r1, r2, label));
            } else {
                self.tags.clear();
                self.reference_returns = None;
            }
        }
        self.samples.len() - 1
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn trajectory(&self, id: usize) -> &Trajectory {
        &self.trajectories[id]
    }

    pub fn samples(&self) -> &[StoredSample] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> PreferenceSample {
        let s = self.samples[i];
        PreferenceSample {
            tau1: self.trajectories[s.tau1].clone(),
            tau2: self.trajectories[s.tau2].clone(),
            label: s.label,
            source: s.source,
        }
    }

    /// Recomputes every tag against `reference`.
    pub fn partition(&mut self, mdp: &TabularMdp, reference: &RewardFn) -> Result<(Vec<usize>, Vec<usize>)> {
        let returns: Vec<f64> =
            self.trajectories.iter().map(|t| reference.trajectory_return(mdp, t)).collect::<Result<_>>()?;
        self.tags = self.samples.iter().map(|s| classify(returns[s.tau1], returns[s.tau2], s.label)).collect();
        self.reference_returns = Some(returns);
        Ok(self.split())
    }

    /// Indices of agreeing and disagreeing samples under the last partition.
    pub fn split(&self) -> (Vec<usize>, Vec<usize>) {
        let mut plus = Vec::new();
        let mut minus = Vec::new();
        for (i, tag) in self.tags.iter().enumerate() {
            match tag {
                Partition::Agree => plus.push(i),
                Partition::Disagree => minus.push(i),
            }
        }
        (plus, minus)
    }

    pub fn tags(&self) -> &[Partition] {
        &self.tags
    }

    pub fn is_partitioned(&self) -> bool {
        self.reference_returns.is_some() && self.tags.len() == self.samples.len()
    }
}

/// `k` distinct index pairs `(i, j)` with `i` into `n1` and `j` into `n2`.
/// `k == n1 * n2` returns every pair in order; otherwise a seeded subset, sorted.
pub fn sample_cross_pairs(n1: usize, n2: usize, k: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    if n1 == 0 || n2 == 0 {
        return Err(RepairError::invalid("both trajectory sets must be non-empty"));
    }
    let total = n1 * n2;
    if k > total {
        return Err(RepairError::invalid(format!("{k} pairs requested but only {total} exist")));
    }
    let mut flat: Vec<usize> = if k == total {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample(&mut rng, total, k).into_vec()
    };
    flat.sort_unstable();
    Ok(flat.into_iter().map(|f| (f / n2, f % n2)).collect())
}

/// One line of `preferences.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub env: String,
    pub iteration: usize,
    pub tau1: usize,
    pub tau2: usize,
    pub mu: Label,
    pub source: LabelSource,
    /// Seconds since the Unix epoch.
    pub timestamp: f64,
}

pub fn unix_now() -> f64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendingPair {
    pub id: u64,
    pub tau1: Trajectory,
    pub tau2: Trajectory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
enum QueueOp {
    Enqueue { id: u64, tau1: Trajectory, tau2: Trajectory },
    Label { id: u64, mu: Label },
    Consume { id: u64 },
}

/// FIFO of pairs awaiting a human label, persisted as an append-only log.
#[derive(Debug, Default)]
pub struct HumanQueue {
    log: Option<PathBuf>,
    next_id: u64,
    pending: BTreeMap<u64, PendingPair>,
    labeled: VecDeque<(PendingPair, Label)>,
    seen_labels: BTreeSet<u64>,
}

impl HumanQueue {
    /// In-memory queue with no persistence.
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) a queue backed by `path`, replaying its log.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut queue = HumanQueue { log: Some(path.clone()), ..Default::default() };
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            for line in reader.lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let op: QueueOp = serde_json::from_str(&line)?;
                queue.apply(op)?;
            }
        }
        Ok(queue)
    }

    fn apply(&mut self, op: QueueOp) -> Result<()> {
        match op {
            QueueOp::Enqueue { id, tau1, tau2 } => {
                self.next_id = self.next_id.max(id + 1);
                self.pending.insert(id, PendingPair { id, tau1, tau2 });
            }
            QueueOp::Label { id, mu } => {
                if self.seen_labels.contains(&id) {
                    return Err(RepairError::AlreadyLabeled(id));
                }
                let pair = self.pending.remove(&id).ok_or(RepairError::UnknownPair(id))?;
                self.seen_labels.insert(id);
                self.labeled.push_back((pair, mu));
            }
            QueueOp::Consume { id } => {
                self.labeled.retain(|(p, _)| p.id != id);
            }
        }
        Ok(())
    }

    fn record(&self, op: &QueueOp) -> Result<()> {
        if let Some(path) = &self.log {
            let mut file = OpenOptions::new().create(true).append(true).open(path)?;
            let mut line = serde_json::to_string(op)?;
            line.push('\n');
            file.write_all(line.as_bytes())?;
            file.sync_data()?;
        }
        Ok(())
    }

    pub fn enqueue(&mut self, pairs: Vec<(Trajectory, Trajectory)>) -> Result<Vec<u64>> {
        let mut ids = Vec::with_capacity(pairs.len());
        for (tau1, tau2) in pairs {
            let op = QueueOp::Enqueue { id: self.next_id, tau1, tau2 };
            self.record(&op)?;
            ids.push(self.next_id);
            self.apply(op)?;
        }
        Ok(ids)
    }

    /// Oldest pair still waiting for a label.
    pub fn next_pending(&self) -> Option<&PendingPair> {
        self.pending.values().next()
    }

    pub fn pending(&self) -> impl Iterator<Item = &PendingPair> {
        self.pending.values()
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn labeled_len(&self) -> usize {
        self.labeled.len()
    }

    pub fn get(&self, id: u64) -> Option<&PendingPair> {
        self.pending.get(&id)
    }

    /// Records a label for pending pair `id`; each pair accepts exactly one.
    pub fn label(&mut self, id: u64, mu: f64) -> Result<()> {
        let label = Label::from_mu(mu)?;
        if self.seen_labels.contains(&id) {
            return Err(RepairError::AlreadyLabeled(id));
        }
        if !self.pending.contains_key(&id) {
            return Err(RepairError::UnknownPair(id));
        }
        let op = QueueOp::Label { id, mu: label };
        self.record(&op)?;
        self.apply(op)
    }

    /// Removes and returns every labeled pair in labeling order.
    pub fn dequeue_labeled(&mut self) -> Result<Vec<(u64, PreferenceSample)>> {
        let mut out = Vec::with_capacity(self.labeled.len());
        while let Some((pair, label)) = self.labeled.pop_front() {
            self.record(&QueueOp::Consume { id: pair.id })?;
            out.push((
                pair.id,
                PreferenceSample { tau1: pair.tau1, tau2: pair.tau2, label, source: LabelSource::Human },
            ));
        }
        Ok(out)
    }
}
