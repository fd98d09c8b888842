//! Deep Q-learning machinery: configuration, exploration schedule, replay
//! buffer, losses, optimizers, masked action selection and the batched
//! training step.

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::observation::lattice_value;
use crate::qnet::{accumulate_action_grad, q_values, QNetError, QNetworkParams, Scratch};

/// Samples per parallel gradient chunk. Fixed so that the reduction order
/// never depends on the worker count.
const GRAD_CHUNK: usize = 128;

#[derive(Debug, Error)]
pub enum DqnError {
    #[error("invalid {field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("replay buffer holds {have} transitions, batch needs {need}")]
    BufferTooSmall { have: usize, need: usize },
    #[error("every action is masked")]
    AllMasked,
    #[error("gamma > 0 requires the next observation and frozen parameters")]
    MissingNextObs,
    #[error("action {action} out of range for {rows} rows")]
    InvalidAction { action: usize, rows: usize },
    #[error("reward {0} is not ±1")]
    InvalidReward(f64),
    #[error("observation is not on the equalization lattice")]
    NotOnLattice,
    #[error("observation has {found} values, buffer expects {expected}")]
    ObservationShape { expected: usize, found: usize },
    #[error(transparent)]
    Net(#[from] QNetError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    SmoothL1,
    Mse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub epsilon_init: f64,
    pub epsilon_final: f64,
    pub epsilon_decay_steps: u64,
    pub gamma: f64,
    pub beta: f64,
    pub loss_kind: LossKind,
    pub buffer_capacity: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub target_sync_period: u64,
    /// Apply action masking in the behaviour policy as well.
    pub mask_during_training: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::with_steps(200_000)
    }
}

impl TrainConfig {
    /// Defaults with `total_steps` set and the decay interval at half of it.
    pub fn with_steps(total_steps: u64) -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 2048,
            total_steps,
            epsilon_init: 1.0,
            epsilon_final: 0.0,
            epsilon_decay_steps: total_steps / 2,
            gamma: 0.0,
            beta: 1.0,
            loss_kind: LossKind::SmoothL1,
            buffer_capacity: 1 << 20,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            target_sync_period: 1000,
            mask_during_training: false,
        }
    }

    pub fn validate(&self) -> Result<(), DqnError> {
        let bad = |field, reason: &str| {
            Err(DqnError::InvalidConfig {
                field,
                reason: reason.to_string(),
            })
        };
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma", "must lie in [0, 1]");
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta", "must be positive");
        }
        if self.epsilon_decay_steps > self.total_steps {
            return bad("epsilon_decay_steps", "must not exceed total_steps");
        }
        for (field, v) in [
            ("epsilon_init", self.epsilon_init),
            ("epsilon_final", self.epsilon_final),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(field, "must lie in [0, 1]");
            }
        }
        if self.buffer_capacity < self.batch_size {
            return bad("buffer_capacity", "must hold at least one batch");
        }
        if self.target_sync_period == 0 {
            return bad("target_sync_period", "must be at least 1");
        }
        Ok(())
    }
}

/// Linear decay from `epsilon_init` to `epsilon_final` over the decay interval.
pub fn epsilon_at(k: u64, config: &TrainConfig) -> f64 {
    if k >= config.epsilon_decay_steps {
        return config.epsilon_final;
    }
    let f = k as f64 / config.epsilon_decay_steps as f64;
    config.epsilon_init + (config.epsilon_final - config.epsilon_init) * f
}

/// First index of the largest value.
pub fn argmax(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in q.iter().enumerate() {
        if v > q[best] {
            best = i;
        }
    }
    best
}

/// The exploration half of ε-greedy: `Some(action)` when exploring.
pub fn explore<R: Rng + ?Sized>(epsilon: f64, actions: usize, rng: &mut R) -> Option<usize> {
    let u: f64 = rng.gen();
    (u < epsilon).then(|| rng.gen_range(0..actions))
}

pub fn select_action_train<R: Rng + ?Sized>(q: &[f64], epsilon: f64, rng: &mut R) -> usize {
    explore(epsilon, q.len(), rng).unwrap_or_else(|| argmax(q))
}

/// Actions that failed since the last successful pick.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActionMask {
    blocked: Vec<bool>,
}

impl ActionMask {
    pub fn new(actions: usize) -> Self {
        Self {
            blocked: vec![false; actions],
        }
    }

    pub fn is_blocked(&self, action: usize) -> bool {
        self.blocked[action]
    }

    pub fn blocked_count(&self) -> usize {
        self.blocked.iter().filter(|&&b| b).count()
    }

    pub fn all_blocked(&self) -> bool {
        self.blocked.iter().all(|&b| b)
    }

    pub fn block(&mut self, action: usize) {
        self.blocked[action] = true;
    }

    pub fn clear(&mut self) {
        self.blocked.fill(false);
    }
}

/// Failure blocks the action, success reopens every action.
pub fn update_mask(mask: &mut ActionMask, action: usize, success: bool) {
    if success {
        mask.clear();
    } else {
        mask.block(action);
    }
}

/// Argmax over unblocked entries, lowest index on ties.
pub fn select_action_masked(q: &[f64], mask: &ActionMask) -> Result<usize, DqnError> {
    let mut best: Option<usize> = None;
    for (i, &v) in q.iter().enumerate() {
        if mask.is_blocked(i) {
            continue;
        }
        if best.is_none_or(|b| v > q[b]) {
            best = Some(i);
        }
    }
    best.ok_or(DqnError::AllMasked)
}

/// Loss value and its derivative with respect to the estimate `a`.
pub fn loss(a: f64, t: f64, kind: LossKind, beta: f64) -> (f64, f64) {
    let d = a - t;
    match kind {
        LossKind::SmoothL1 if d.abs() < beta => (d * d / (2.0 * beta), d / beta),
        LossKind::SmoothL1 => (d.abs() - beta / 2.0, d.signum()),
        LossKind::Mse => (d * d, 2.0 * d),
    }
}

/// `r + γ·max_u q̂(next, u)`; exactly `r` when γ = 0.
pub fn td_target(
    reward: f64,
    next_obs: Option<&[f64]>,
    gamma: f64,
    frozen: Option<&QNetworkParams>,
    scratch: &mut Scratch,
) -> Result<f64, DqnError> {
    if gamma == 0.0 {
        return Ok(reward);
    }
    let (Some(next), Some(frozen)) = (next_obs, frozen) else {
        return Err(DqnError::MissingNextObs);
    };
    let mut q = Vec::new();
    q_values(frozen, next, scratch, &mut q)?;
    let best = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(reward + gamma * best)
}

/// How stored observations are encoded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureEncoding {
    /// One rank byte per value; exact for equalized observations.
    Lattice,
    Dense,
}

#[derive(Clone, Debug)]
enum Store {
    Lattice(Vec<u8>),
    Dense(Vec<f64>),
}

impl Store {
    fn new(encoding: FeatureEncoding) -> Self {
        match encoding {
            FeatureEncoding::Lattice => Store::Lattice(Vec::new()),
            FeatureEncoding::Dense => Store::Dense(Vec::new()),
        }
    }

    fn write(&mut self, slot: usize, obs: &[f64], rows: usize) -> Result<(), DqnError> {
        let w = obs.len();
        match self {
            Store::Dense(v) => {
                if v.len() < (slot + 1) * w {
                    v.extend_from_slice(obs);
                } else {
                    v[slot * w..(slot + 1) * w].copy_from_slice(obs);
                }
            }
            Store::Lattice(v) => {
                let m = (rows - 1) as f64;
                let mut ranks = Vec::with_capacity(w);
                for &x in obs {
                    let r = ((x + 1.0) * m / 2.0).round();
                    if !(0.0..=255.0).contains(&r) || lattice_value(r as usize, rows) != x {
                        return Err(DqnError::NotOnLattice);
                    }
                    ranks.push(r as u8);
                }
                if v.len() < (slot + 1) * w {
                    v.extend_from_slice(&ranks);
                } else {
                    v[slot * w..(slot + 1) * w].copy_from_slice(&ranks);
                }
            }
        }
        Ok(())
    }

    fn read(&self, slot: usize, w: usize, rows: usize, out: &mut Vec<f64>) {
        out.clear();
        match self {
            Store::Dense(v) => out.extend_from_slice(&v[slot * w..(slot + 1) * w]),
            Store::Lattice(v) => out.extend(
                v[slot * w..(slot + 1) * w]
                    .iter()
                    .map(|&r| lattice_value(r as usize, rows)),
            ),
        }
    }
}

/// One step of experience.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_obs: Option<Vec<f64>>,
}

/// Ring buffer of transitions with uniform sampling.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    rows: usize,
    obs: Store,
    next: Option<Store>,
    actions: Vec<u16>,
    rewards: Vec<i8>,
    len: usize,
    cursor: usize,
}

impl ReplayBuffer {
    /// `store_next` keeps next observations, needed only when γ > 0.
    pub fn new(capacity: usize, rows: usize, encoding: FeatureEncoding, store_next: bool) -> Self {
        Self {
            capacity,
            rows,
            obs: Store::new(encoding),
            next: store_next.then(|| Store::new(encoding)),
            actions: Vec::new(),
            rewards: Vec::new(),
            len: 0,
            cursor: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Slot the next push will write.
    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn push(
        &mut self,
        obs: &[f64],
        action: usize,
        reward: f64,
        next_obs: Option<&[f64]>,
    ) -> Result<(), DqnError> {
        let w = 3 * self.rows;
        if obs.len() != w {
            return Err(DqnError::ObservationShape {
                expected: w,
                found: obs.len(),
            });
        }
        if action >= self.rows {
            return Err(DqnError::InvalidAction {
                action,
                rows: self.rows,
            });
        }
        if reward != 1.0 && reward != -1.0 {
            return Err(DqnError::InvalidReward(reward));
        }
        let slot = self.cursor;
        if let Some(store) = &mut self.next {
            let next = next_obs.ok_or(DqnError::MissingNextObs)?;
            if next.len() != w {
                return Err(DqnError::ObservationShape {
                    expected: w,
                    found: next.len(),
                });
            }
            store.write(slot, next, self.rows)?;
        }
        self.obs.write(slot, obs, self.rows)?;
        if self.actions.len() <= slot {
            self.actions.push(action as u16);
            self.rewards.push(reward as i8);
        } else {
            self.actions[slot] = action as u16;
            self.rewards[slot] = reward as i8;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        self.len = (self.len + 1).min(self.capacity);
        Ok(())
    }

    pub fn push_transition(&mut self, t: &Transition) -> Result<(), DqnError> {
        self.push(&t.obs, t.action, t.reward, t.next_obs.as_deref())
    }

    pub fn obs_into(&self, slot: usize, out: &mut Vec<f64>) {
        self.obs.read(slot, 3 * self.rows, self.rows, out);
    }

    pub fn next_into(&self, slot: usize, out: &mut Vec<f64>) -> bool {
        match &self.next {
            Some(s) => {
                s.read(slot, 3 * self.rows, self.rows, out);
                true
            }
            None => false,
        }
    }

    pub fn action(&self, slot: usize) -> usize {
        self.actions[slot] as usize
    }

    pub fn reward(&self, slot: usize) -> f64 {
        self.rewards[slot] as f64
    }

    pub fn get(&self, slot: usize) -> Transition {
        let mut obs = Vec::new();
        self.obs_into(slot, &mut obs);
        let mut next = Vec::new();
        let has_next = self.next_into(slot, &mut next);
        Transition {
            obs,
            action: self.action(slot),
            reward: self.reward(slot),
            next_obs: has_next.then_some(next),
        }
    }

    /// `count` slots drawn uniformly with replacement.
    pub fn sample_slots<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<usize> {
        (0..count).map(|_| rng.gen_range(0..self.len)).collect()
    }
}

#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd,
    Adam { m: Vec<f64>, v: Vec<f64>, t: u64 },
}

impl Optimizer {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(kind: OptimizerKind, len: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam {
                m: vec![0.0; len],
                v: vec![0.0; len],
                t: 0,
            },
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        match self {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam { m, v, t } => {
                *t += 1;
                let c1 = 1.0 - Self::BETA1.powi(*t as i32);
                let c2 = 1.0 - Self::BETA2.powi(*t as i32);
                for i in 0..params.len() {
                    let g = grad[i];
                    m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * g;
                    v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * g * g;
                    params[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
                }
            }
        }
    }
}

/// Parameters, optimizer state and the frozen target copy owned by the trainer.
#[derive(Clone, Debug)]
pub struct Learner {
    pub params: QNetworkParams,
    pub optimizer: Optimizer,
    /// Delayed parameters for bootstrapped targets; unused when γ = 0.
    pub frozen: Option<QNetworkParams>,
    pub steps_done: u64,
}

impl Learner {
    pub fn new(params: QNetworkParams, config: &TrainConfig) -> Self {
        let optimizer = Optimizer::new(config.optimizer, params.values().len());
        let frozen = (config.gamma > 0.0).then(|| params.clone());
        Self {
            params,
            optimizer,
            frozen,
            steps_done: 0,
        }
    }
}

/// Mean loss and mean gradient over the given buffer slots.
pub fn batch_gradient(
    params: &QNetworkParams,
    buffer: &ReplayBuffer,
    slots: &[usize],
    targets: &[f64],
    config: &TrainConfig,
) -> Result<(f64, Vec<f64>), DqnError> {
    let b = slots.len() as f64;
    let width = params.values().len();
    let partials: Vec<Result<(f64, Vec<f64>), DqnError>> = slots
        .par_chunks(GRAD_CHUNK)
        .zip(targets.par_chunks(GRAD_CHUNK))
        .map(|(chunk, tchunk)| {
            let mut scratch = Scratch::default();
            let mut x = Vec::new();
            let mut grad = vec![0.0; width];
            let mut total = 0.0;
            for (&slot, &t) in chunk.iter().zip(tchunk) {
                buffer.obs_into(slot, &mut x);
                let mut l = 0.0;
                accumulate_action_grad(
                    params,
                    &x,
                    buffer.action(slot),
                    |q| {
                        let (value, d) = loss(q, t, config.loss_kind, config.beta);
                        l = value;
                        d / b
                    },
                    &mut scratch,
                    &mut grad,
                )?;
                total += l;
            }
            Ok((total, grad))
        })
        .collect();
    let mut loss_sum = 0.0;
    let mut grad = vec![0.0; width];
    for part in partials {
        let (l, g) = part?;
        loss_sum += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((loss_sum / b, grad))
}

/// One optimizer update on a uniformly sampled batch; returns the batch loss.
pub fn train_step<R: Rng + ?Sized>(
    learner: &mut Learner,
    buffer: &ReplayBuffer,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<f64, DqnError> {
    if buffer.len() < config.batch_size {
        return Err(DqnError::BufferTooSmall {
            have: buffer.len(),
            need: config.batch_size,
        });
    }
    let slots = buffer.sample_slots(config.batch_size, rng);
    let mut targets = Vec::with_capacity(slots.len());
    let mut scratch = Scratch::default();
    let mut next = Vec::new();
    for &s in &slots {
        let r = buffer.reward(s);
        let next_obs = if config.gamma > 0.0 && buffer.next_into(s, &mut next) {
            Some(&next[..])
        } else {
            None
        };
        targets.push(td_target(
            r,
            next_obs,
            config.gamma,
            learner.frozen.as_ref(),
            &mut scratch,
        )?);
    }
    let (batch_loss, grad) = batch_gradient(&learner.params, buffer, &slots, &targets, config)?;
    learner
        .optimizer
        .step(learner.params.values_mut(), &grad, config.learning_rate);
    learner.steps_done += 1;
    if config.gamma > 0.0 && learner.steps_done.is_multiple_of(config.target_sync_period) {
        learner.frozen = Some(learner.params.clone());
    }
    Ok(batch_loss)
}
