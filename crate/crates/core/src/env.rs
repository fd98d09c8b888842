//! Environments, vectorized rollouts, metrics, training and evaluation.
//!
//! [`UnloadEnv`] simulates one container with the lift physics. [`TuningEnv`]
//! is the cheap stand-in whose only pickable item is the highest one.
//! [`VecRunner`] steps many environments per round; each owns its random
//! streams and results are merged by environment index, so a run does not
//! depend on how many worker threads execute it.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::container::{
    build_substack_catalog, generate_container, Catalog, ContainerSpec, ContainerState,
    GenerationError,
};
use crate::dqn::{
    argmax, epsilon_at, explore, select_action_masked, train_step, update_mask, ActionMask,
    DqnError, FeatureEncoding, Learner, ReplayBuffer, TrainConfig,
};
use crate::observation::{
    equalize_columns, features_for, normalize_position, visibility_order, Observation,
    ObservationError, ViewerConfig,
};
use crate::physics::{
    build_support_graph, check_pick, check_removal, PhysicsConfig, PhysicsError, SupportGraph,
    CONTACT_TOLERANCE,
};
use crate::qnet::{init_params, q_values, NetworkConfig, QNetError, QNetworkParams, Scratch};
use crate::rng::{derive_seed, derived_rng, stream};

pub const EPISODE_LIMIT: usize = 500;
/// Rounds in the trailing reward window.
pub const METRICS_WINDOW: usize = 500;
/// Identical failed (observation, action) pairs that count as a livelock.
pub const LIVELOCK_REPEATS: usize = 3;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error(transparent)]
    Observation(#[from] ObservationError),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error(transparent)]
    Dqn(#[from] DqnError),
    #[error(transparent)]
    Net(#[from] QNetError),
    #[error("episode already finished")]
    EpisodeDone,
    #[error("action {action} out of range for {rows} rows")]
    InvalidAction { action: usize, rows: usize },
    #[error("livelock in episode {episode} at step {step}: action {action} (item {item_id}) failed {repeats} times on an unchanged observation")]
    Livelock {
        episode: usize,
        step: usize,
        action: usize,
        item_id: u32,
        repeats: usize,
    },
    #[error("all actions masked in episode {episode} at step {step} with {pickable_observed} pickable items observed")]
    AllMasked {
        episode: usize,
        step: usize,
        pickable_observed: usize,
    },
    #[error("masked policy needed {attempts} attempts for one success in episode {episode}")]
    NoProgress { episode: usize, attempts: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

/// Mean success rate from the mean ±1 reward.
pub fn msr(r_mean: f64) -> f64 {
    (r_mean + 1.0) / 2.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvConfig {
    pub spec: ContainerSpec,
    pub viewer: ViewerConfig,
    pub physics: PhysicsConfig,
    pub episode_limit: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            spec: ContainerSpec::default(),
            viewer: ViewerConfig::default(),
            physics: PhysicsConfig::default(),
            episode_limit: EPISODE_LIMIT,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        self.spec.validate()?;
        self.viewer.validate()?;
        self.physics.validate()?;
        if self.episode_limit == 0 {
            return Err(EnvError::InvalidConfig(
                "episode_limit must be at least 1".into(),
            ));
        }
        if self.spec.min_items < self.viewer.visible_count + self.episode_limit {
            return Err(EnvError::InvalidConfig(format!(
                "{} items cannot keep {} observable over {} steps",
                self.spec.min_items, self.viewer.visible_count, self.episode_limit
            )));
        }
        Ok(())
    }
}

/// Result of a single action.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub reward: f64,
    pub success: bool,
    pub done: bool,
}

/// Common interface of the environments driven by [`VecRunner`].
pub trait Environment: Send {
    /// Row-major `rows × 3` features of the current observation.
    fn features(&self) -> &[f64];
    fn rows(&self) -> usize;
    fn step(&mut self, action: usize) -> Result<StepInfo, EnvError>;
}

/// One container being unloaded.
#[derive(Clone, Debug)]
pub struct UnloadEnv {
    config: Arc<EnvConfig>,
    state: ContainerState,
    graph: SupportGraph,
    /// Live items by ascending viewing distance.
    order: Vec<u32>,
    obs: Observation,
    step_count: usize,
    /// Counts observation changes, i.e. successful picks.
    version: u64,
}

impl UnloadEnv {
    pub fn reset(config: Arc<EnvConfig>, catalog: &Catalog, seed: u64) -> Result<Self, EnvError> {
        let state = generate_container(&config.spec, catalog, seed)?;
        Self::from_state(config, state)
    }

    pub fn from_state(config: Arc<EnvConfig>, state: ContainerState) -> Result<Self, EnvError> {
        let graph = build_support_graph(&state, CONTACT_TOLERANCE);
        let order = visibility_order(&state, &config.viewer);
        let mut env = Self {
            config,
            state,
            graph,
            order,
            obs: Observation {
                features: Vec::new(),
                item_ids: Vec::new(),
                step_k: 0,
            },
            step_count: 0,
            version: 0,
        };
        env.refresh()?;
        Ok(env)
    }

    fn refresh(&mut self) -> Result<(), EnvError> {
        let need = self.config.viewer.visible_count;
        if self.order.len() < need {
            return Err(ObservationError::TooFewItems {
                live: self.order.len(),
                needed: need,
            }
            .into());
        }
        let ids = self.order[..need].to_vec();
        self.obs.features = features_for(&self.state, &ids, self.config.viewer.equalize)?;
        self.obs.item_ids = ids;
        self.obs.step_k = self.step_count as u64;
        Ok(())
    }

    pub fn state(&self) -> &ContainerState {
        &self.state
    }

    pub fn graph(&self) -> &SupportGraph {
        &self.graph
    }

    pub fn observation(&self) -> &Observation {
        &self.obs
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    pub fn observation_version(&self) -> u64 {
        self.version
    }

    pub fn is_done(&self) -> bool {
        self.step_count >= self.config.episode_limit
    }

    /// Whether the item shown in `row` could be picked right now.
    pub fn row_pickable(&self, row: usize) -> bool {
        let cap = self.config.physics.max_liftable();
        let id = self.obs.item_ids[row];
        cap > 0 && matches!(self.graph.closure_size_capped(id, cap), Ok(s) if s <= cap)
    }

    pub fn pickable_rows(&self) -> Vec<usize> {
        (0..self.obs.rows())
            .filter(|&r| self.row_pickable(r))
            .collect()
    }

    pub fn env_step(&mut self, action: usize) -> Result<StepInfo, EnvError> {
        if self.is_done() {
            return Err(EnvError::EpisodeDone);
        }
        let rows = self.obs.rows();
        if action >= rows {
            return Err(EnvError::InvalidAction { action, rows });
        }
        let id = self.obs.item_ids[action];
        let check = check_pick(&self.graph, id, &self.config.physics)?;
        self.step_count += 1;
        if check.success {
            check_removal(&self.state, &self.graph, id)?;
            self.state.items[id as usize].alive = false;
            self.graph.remove_item(id);
            self.order.retain(|&o| o != id);
            self.version += 1;
            self.refresh()?;
        } else {
            self.obs.step_k = self.step_count as u64;
        }
        Ok(StepInfo {
            reward: if check.success { 1.0 } else { -1.0 },
            success: check.success,
            done: self.is_done(),
        })
    }
}

impl Environment for UnloadEnv {
    fn features(&self) -> &[f64] {
        &self.obs.features
    }

    fn rows(&self) -> usize {
        self.obs.rows()
    }

    fn step(&mut self, action: usize) -> Result<StepInfo, EnvError> {
        self.env_step(action)
    }
}

/// Fresh environment and its first observation.
pub fn env_reset(
    config: Arc<EnvConfig>,
    catalog: &Catalog,
    seed: u64,
) -> Result<(UnloadEnv, Observation), EnvError> {
    let env = UnloadEnv::reset(config, catalog, seed)?;
    let obs = env.observation().clone();
    Ok((env, obs))
}

/// Applies an action and returns `(observation, reward, done)`.
pub fn env_step(env: &mut UnloadEnv, action: usize) -> Result<(Observation, f64, bool), EnvError> {
    let info = env.env_step(action)?;
    Ok((env.observation().clone(), info.reward, info.done))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuningConfig {
    pub spec: ContainerSpec,
    /// Containers sampled once per run to draw positions from.
    pub pool_size: usize,
    /// Half-width of the uniform per-axis jitter, meters.
    pub jitter: f64,
    pub visible_count: usize,
    pub equalize: bool,
}

impl Default for TuningConfig {
    fn default() -> Self {
        Self {
            spec: ContainerSpec::default(),
            pool_size: 8,
            jitter: 0.01,
            visible_count: 128,
            equalize: true,
        }
    }
}

/// Item centers of pre-generated containers.
#[derive(Clone, Debug)]
pub struct PositionPool {
    spec: ContainerSpec,
    containers: Vec<Vec<[f64; 3]>>,
}

impl PositionPool {
    pub fn generate(
        config: &TuningConfig,
        catalog: &Catalog,
        master_seed: u64,
    ) -> Result<Self, EnvError> {
        let containers = (0..config.pool_size.max(1))
            .map(|j| {
                let seed = derive_seed(master_seed, stream::TUNING, u64::MAX - j as u64);
                let state = generate_container(&config.spec, catalog, seed)?;
                Ok(state.live_items().map(|it| it.center).collect())
            })
            .collect::<Result<_, EnvError>>()?;
        Ok(Self {
            spec: config.spec.clone(),
            containers,
        })
    }
}

/// Samples drawn before the resampling guard gives up on ties.
const TIE_RESAMPLES: usize = 1000;

/// A random grid-like observation and the row holding the highest item.
pub fn tuning_env_sample<R: Rng + ?Sized>(
    pool: &PositionPool,
    config: &TuningConfig,
    rng: &mut R,
) -> Result<(Observation, usize), EnvError> {
    let dims = pool.spec.dims();
    for _ in 0..TIE_RESAMPLES {
        let items = &pool.containers[rng.gen_range(0..pool.containers.len())];
        if items.len() < config.visible_count {
            return Err(ObservationError::TooFewItems {
                live: items.len(),
                needed: config.visible_count,
            }
            .into());
        }
        let picks = sample(rng, items.len(), config.visible_count);
        let mut features = Vec::with_capacity(3 * config.visible_count);
        let mut raw_z = Vec::with_capacity(config.visible_count);
        for i in picks.iter() {
            let mut p = items[i];
            for k in 0..3 {
                let j = if config.jitter > 0.0 {
                    rng.gen_range(-config.jitter..config.jitter)
                } else {
                    0.0
                };
                p[k] = (p[k] + j).clamp(0.0, dims[k]);
            }
            raw_z.push(p[2]);
            features.extend_from_slice(&normalize_position(p, &pool.spec)?);
        }
        let top = raw_z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if raw_z.iter().filter(|&&z| z == top).count() > 1 {
            continue;
        }
        let answer = raw_z.iter().position(|&z| z == top).unwrap_or(0);
        if config.equalize {
            equalize_columns(&mut features);
        }
        let obs = Observation {
            features,
            item_ids: (0..config.visible_count as u32).collect(),
            step_k: 0,
        };
        return Ok((obs, answer));
    }
    Err(EnvError::InvalidConfig(
        "could not draw a sample with a unique highest item".into(),
    ))
}

/// Rewards +1 only for the row holding the highest item.
#[derive(Clone, Debug)]
pub struct TuningEnv {
    pool: Arc<PositionPool>,
    config: Arc<TuningConfig>,
    rng: ChaCha8Rng,
    obs: Observation,
    answer: usize,
}

impl TuningEnv {
    pub fn new(
        pool: Arc<PositionPool>,
        config: Arc<TuningConfig>,
        mut rng: ChaCha8Rng,
    ) -> Result<Self, EnvError> {
        let (obs, answer) = tuning_env_sample(&pool, &config, &mut rng)?;
        Ok(Self {
            pool,
            config,
            rng,
            obs,
            answer,
        })
    }

    pub fn answer(&self) -> usize {
        self.answer
    }

    pub fn observation(&self) -> &Observation {
        &self.obs
    }
}

impl Environment for TuningEnv {
    fn features(&self) -> &[f64] {
        &self.obs.features
    }

    fn rows(&self) -> usize {
        self.obs.rows()
    }

    fn step(&mut self, action: usize) -> Result<StepInfo, EnvError> {
        let rows = self.obs.rows();
        if action >= rows {
            return Err(EnvError::InvalidAction { action, rows });
        }
        let success = action == self.answer;
        let (obs, answer) = tuning_env_sample(&self.pool, &self.config, &mut self.rng)?;
        self.obs = obs;
        self.answer = answer;
        Ok(StepInfo {
            reward: if success { 1.0 } else { -1.0 },
            success,
            done: false,
        })
    }
}

/// Trailing-window reward statistics.
#[derive(Clone, Debug, Default)]
pub struct Metrics {
    window: VecDeque<f64>,
    capacity: usize,
    pub attempts: u64,
    pub successes: u64,
}

impl Metrics {
    pub fn new(capacity: usize) -> Self {
        Self {
            window: VecDeque::with_capacity(capacity),
            capacity: capacity.max(1),
            attempts: 0,
            successes: 0,
        }
    }

    /// Adds one round; the round enters the window as its mean reward.
    pub fn record_round(&mut self, rewards: &[f64]) {
        if rewards.is_empty() {
            return;
        }
        let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
        if self.window.len() == self.capacity {
            self.window.pop_front();
        }
        self.window.push_back(mean);
        self.attempts += rewards.len() as u64;
        self.successes += rewards.iter().filter(|&&r| r > 0.0).count() as u64;
    }

    /// Mean reward over the window, summed in insertion order.
    pub fn r_mean(&self) -> f64 {
        if self.window.is_empty() {
            return 0.0;
        }
        self.window.iter().sum::<f64>() / self.window.len() as f64
    }

    pub fn msr(&self) -> f64 {
        msr(self.r_mean())
    }
}

/// Builds environment `index` for its `episode`-th episode.
pub trait EnvFactory: Sync {
    type Env: Environment;
    fn make(&self, index: usize, episode: u64) -> Result<Self::Env, EnvError>;
}

pub struct UnloadFactory {
    pub config: Arc<EnvConfig>,
    pub catalog: Arc<Catalog>,
    pub master_seed: u64,
}

impl UnloadFactory {
    pub fn container_seed(master_seed: u64, index: usize, episode: u64) -> u64 {
        derive_seed(
            master_seed,
            stream::ENV_CONTAINER,
            ((index as u64) << 40) | episode,
        )
    }
}

impl EnvFactory for UnloadFactory {
    type Env = UnloadEnv;

    fn make(&self, index: usize, episode: u64) -> Result<UnloadEnv, EnvError> {
        let seed = Self::container_seed(self.master_seed, index, episode);
        UnloadEnv::reset(self.config.clone(), &self.catalog, seed)
    }
}

pub struct TuningFactory {
    pub config: Arc<TuningConfig>,
    pub pool: Arc<PositionPool>,
    pub master_seed: u64,
}

impl EnvFactory for TuningFactory {
    type Env = TuningEnv;

    fn make(&self, index: usize, episode: u64) -> Result<TuningEnv, EnvError> {
        let rng = derived_rng(
            self.master_seed,
            stream::TUNING,
            ((index as u64) << 40) | episode,
        );
        TuningEnv::new(self.pool.clone(), self.config.clone(), rng)
    }
}

/// What one environment did during a round.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub obs: Vec<f64>,
    pub action: usize,
    pub info: StepInfo,
    /// Observation after the step, before any reset.
    pub next_obs: Option<Vec<f64>>,
}

struct Slot<E> {
    env: E,
    policy_rng: ChaCha8Rng,
    mask: ActionMask,
    episode: u64,
    episode_reward: f64,
    scratch: Scratch,
    q: Vec<f64>,
}

/// A fixed set of environments stepped together.
pub struct VecRunner<F: EnvFactory> {
    factory: F,
    slots: Vec<Slot<F::Env>>,
    /// `(round, env index, total reward)` of every finished episode.
    pub episode_totals: Vec<(u64, usize, f64)>,
}

impl<F: EnvFactory> VecRunner<F>
where
    F::Env: Send,
{
    pub fn new(factory: F, env_count: usize, master_seed: u64) -> Result<Self, EnvError> {
        let slots = (0..env_count)
            .into_par_iter()
            .map(|i| {
                let env = factory.make(i, 0)?;
                let rows = env.rows();
                Ok(Slot {
                    env,
                    policy_rng: derived_rng(master_seed, stream::ENV_POLICY, i as u64),
                    mask: ActionMask::new(rows),
                    episode: 0,
                    episode_reward: 0.0,
                    scratch: Scratch::default(),
                    q: Vec::new(),
                })
            })
            .collect::<Result<Vec<_>, EnvError>>()?;
        Ok(Self {
            factory,
            slots,
            episode_totals: Vec::new(),
        })
    }

    pub fn env_count(&self) -> usize {
        self.slots.len()
    }

    pub fn env(&self, index: usize) -> &F::Env {
        &self.slots[index].env
    }

    /// Steps every environment once with an ε-greedy policy.
    pub fn round(
        &mut self,
        params: &QNetworkParams,
        epsilon: f64,
        masked: bool,
        keep_next: bool,
        round: u64,
    ) -> Result<Vec<StepRecord>, EnvError> {
        let factory = &self.factory;
        let results: Vec<Result<(StepRecord, Option<f64>), EnvError>> = self
            .slots
            .par_iter_mut()
            .enumerate()
            .map(|(i, slot)| {
                let rows = slot.env.rows();
                let obs = slot.env.features().to_vec();
                let action = match explore(epsilon, rows, &mut slot.policy_rng) {
                    Some(a) => a,
                    None => {
                        q_values(params, &obs, &mut slot.scratch, &mut slot.q)?;
                        if masked {
                            select_action_masked(&slot.q, &slot.mask)?
                        } else {
                            argmax(&slot.q)
                        }
                    }
                };
                let info = slot.env.step(action)?;
                update_mask(&mut slot.mask, action, info.success);
                slot.episode_reward += info.reward;
                let next_obs = keep_next.then(|| slot.env.features().to_vec());
                let mut finished = None;
                if info.done {
                    finished = Some(slot.episode_reward);
                    slot.episode += 1;
                    slot.episode_reward = 0.0;
                    slot.env = factory.make(i, slot.episode)?;
                    slot.mask = ActionMask::new(slot.env.rows());
                }
                Ok((
                    StepRecord {
                        obs,
                        action,
                        info,
                        next_obs,
                    },
                    finished,
                ))
            })
            .collect();
        let mut records = Vec::with_capacity(results.len());
        for (i, r) in results.into_iter().enumerate() {
            let (rec, finished) = r?;
            if let Some(total) = finished {
                self.episode_totals.push((round, i, total));
            }
            records.push(rec);
        }
        Ok(records)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnvKind {
    Unload,
    Tuning,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub env_kind: EnvKind,
    pub env_count: usize,
    pub net: NetworkConfig,
    pub env: EnvConfig,
    pub tuning: TuningConfig,
    /// Worker threads; 0 uses the available parallelism.
    pub workers: usize,
    /// Rounds between intermediate checkpoints; 0 disables them.
    pub checkpoint_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            env_kind: EnvKind::Unload,
            env_count: 64,
            net: NetworkConfig::default(),
            env: EnvConfig::default(),
            tuning: TuningConfig::default(),
            workers: 0,
            checkpoint_every: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        self.train.validate()?;
        self.net.validate()?;
        if self.env_count == 0 {
            return Err(EnvError::InvalidConfig(
                "env_count must be at least 1".into(),
            ));
        }
        match self.env_kind {
            EnvKind::Unload => {
                self.env.validate()?;
                if self.env.viewer.visible_count != self.net.item_count {
                    return Err(EnvError::InvalidConfig(
                        "visible_count must equal item_count".into(),
                    ));
                }
            }
            EnvKind::Tuning => {
                if self.tuning.visible_count != self.net.item_count {
                    return Err(EnvError::InvalidConfig(
                        "visible_count must equal item_count".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    fn equalized(&self) -> bool {
        match self.env_kind {
            EnvKind::Unload => self.env.viewer.equalize,
            EnvKind::Tuning => self.tuning.equalize,
        }
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurveRow {
    pub step: u64,
    pub epsilon: f64,
    /// NaN until the buffer holds a full batch.
    pub batch_loss: f64,
    pub mean_reward_window: f64,
    pub msr_window: f64,
}

#[derive(Clone, Debug)]
pub struct TrainingOutcome {
    pub curves: Vec<CurveRow>,
    pub params: QNetworkParams,
    pub episode_totals: Vec<(u64, usize, f64)>,
    pub final_msr: f64,
}

/// Runs the full training loop; `on_checkpoint` receives intermediate parameters.
pub fn run_training(
    config: &RunConfig,
    mut on_checkpoint: impl FnMut(u64, &QNetworkParams) -> std::io::Result<()> + Send,
) -> Result<TrainingOutcome, EnvError> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| EnvError::InvalidConfig(e.to_string()))?;
    pool.install(|| match config.env_kind {
        EnvKind::Unload => {
            let catalog = Arc::new(build_substack_catalog()?);
            let factory = UnloadFactory {
                config: Arc::new(config.env.clone()),
                catalog,
                master_seed: config.train.seed,
            };
            train_loop(config, factory, &mut on_checkpoint)
        }
        EnvKind::Tuning => {
            let catalog = build_substack_catalog()?;
            let pool = PositionPool::generate(&config.tuning, &catalog, config.train.seed)?;
            let factory = TuningFactory {
                config: Arc::new(config.tuning.clone()),
                pool: Arc::new(pool),
                master_seed: config.train.seed,
            };
            train_loop(config, factory, &mut on_checkpoint)
        }
    })
}

fn train_loop<F: EnvFactory>(
    config: &RunConfig,
    factory: F,
    on_checkpoint: &mut dyn FnMut(u64, &QNetworkParams) -> std::io::Result<()>,
) -> Result<TrainingOutcome, EnvError>
where
    F::Env: Send,
{
    let cfg = &config.train;
    let seed = cfg.seed;
    let mut runner = VecRunner::new(factory, config.env_count, seed)?;
    let params = init_params(&config.net, derive_seed(seed, stream::PARAMS, 0));
    let mut learner = Learner::new(params, cfg);
    let encoding = if config.equalized() {
        FeatureEncoding::Lattice
    } else {
        FeatureEncoding::Dense
    };
    let keep_next = cfg.gamma > 0.0;
    let mut buffer = ReplayBuffer::new(
        cfg.buffer_capacity,
        config.net.item_count,
        encoding,
        keep_next,
    );
    let mut replay_rng = derived_rng(seed, stream::REPLAY, 0);
    let mut metrics = Metrics::new(METRICS_WINDOW);
    let mut curves = Vec::with_capacity(cfg.total_steps as usize);
    for k in 0..cfg.total_steps {
        let epsilon = epsilon_at(k, cfg);
        let records = runner.round(
            &learner.params,
            epsilon,
            cfg.mask_during_training,
            keep_next,
            k,
        )?;
        let mut rewards = Vec::with_capacity(records.len());
        for rec in &records {
            buffer.push(
                &rec.obs,
                rec.action,
                rec.info.reward,
                rec.next_obs.as_deref(),
            )?;
            rewards.push(rec.info.reward);
        }
        metrics.record_round(&rewards);
        let batch_loss = if buffer.len() >= cfg.batch_size {
            train_step(&mut learner, &buffer, cfg, &mut replay_rng)?
        } else {
            f64::NAN
        };
        curves.push(CurveRow {
            step: k,
            epsilon,
            batch_loss,
            mean_reward_window: metrics.r_mean(),
            msr_window: metrics.msr(),
        });
        if config.checkpoint_every > 0
            && (k + 1) % config.checkpoint_every == 0
            && k + 1 < cfg.total_steps
        {
            on_checkpoint(k + 1, &learner.params)
                .map_err(|e| EnvError::InvalidConfig(format!("checkpoint failed: {e}")))?;
        }
    }
    Ok(TrainingOutcome {
        final_msr: metrics.msr(),
        curves,
        params: learner.params,
        episode_totals: std::mem::take(&mut runner.episode_totals),
    })
}

/// Action selection used during evaluation.
#[derive(Clone, Debug)]
pub enum Policy {
    Greedy {
        params: QNetworkParams,
        masked: bool,
    },
    Random,
    /// First observed row whose item is pickable.
    Oracle,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub episodes: usize,
    pub seed: u64,
    /// Steps per episode; defaults to the environment's episode limit.
    pub steps: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeReport {
    pub episode: usize,
    pub successes: usize,
    pub failures: usize,
    pub msr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub episodes: Vec<EpisodeReport>,
    pub msr: f64,
    /// Attempts needed per success (including the success) and how often.
    pub attempts_per_success: BTreeMap<usize, usize>,
    /// Worst run of attempts that began while a pickable item was observed.
    pub max_attempts_with_pickable: usize,
}

/// Container seed of evaluation episode `episode`.
pub fn eval_container_seed(seed: u64, episode: usize) -> u64 {
    derive_seed(seed, stream::EVAL, episode as u64)
}

pub fn evaluate(
    env_config: &EnvConfig,
    policy: &Policy,
    eval: &EvalConfig,
) -> Result<EvalReport, EnvError> {
    env_config.validate()?;
    let catalog = build_substack_catalog()?;
    let config = Arc::new(env_config.clone());
    let mut episodes = Vec::with_capacity(eval.episodes);
    let mut histogram = BTreeMap::new();
    let mut max_with_pickable = 0;
    let (mut total_s, mut total_f) = (0usize, 0usize);
    let mut scratch = Scratch::default();
    let mut q = Vec::new();
    for ep in 0..eval.episodes {
        let mut env =
            UnloadEnv::reset(config.clone(), &catalog, eval_container_seed(eval.seed, ep))?;
        let mut rng = derived_rng(eval.seed, stream::EVAL, (1 << 40) | ep as u64);
        let rows = env.rows();
        let mut mask = ActionMask::new(rows);
        let steps = eval
            .steps
            .unwrap_or(env_config.episode_limit)
            .min(env_config.episode_limit);
        let (mut successes, mut failures) = (0, 0);
        let mut attempts = 0;
        let mut started_with_pickable = false;
        let mut last_fail: Option<(u64, usize)> = None;
        let mut repeats = 0;
        for step in 0..steps {
            if attempts == 0 {
                started_with_pickable = !env.pickable_rows().is_empty();
            }
            let action = match policy {
                Policy::Random => rng.gen_range(0..rows),
                Policy::Oracle => env.pickable_rows().first().copied().unwrap_or(0),
                Policy::Greedy { params, masked } => {
                    q_values(params, env.features(), &mut scratch, &mut q)?;
                    if *masked {
                        select_action_masked(&q, &mask).map_err(|_| EnvError::AllMasked {
                            episode: ep,
                            step,
                            pickable_observed: env.pickable_rows().len(),
                        })?
                    } else {
                        argmax(&q)
                    }
                }
            };
            let version = env.observation_version();
            let item_id = env.observation().item_ids[action];
            let info = env.env_step(action)?;
            update_mask(&mut mask, action, info.success);
            attempts += 1;
            if info.success {
                successes += 1;
                *histogram.entry(attempts).or_insert(0) += 1;
                if started_with_pickable {
                    max_with_pickable = max_with_pickable.max(attempts);
                }
                attempts = 0;
                last_fail = None;
                repeats = 0;
            } else {
                failures += 1;
                if last_fail == Some((version, action)) {
                    repeats += 1;
                } else {
                    repeats = 1;
                    last_fail = Some((version, action));
                }
                if matches!(policy, Policy::Greedy { masked: false, .. })
                    && repeats >= LIVELOCK_REPEATS
                {
                    return Err(EnvError::Livelock {
                        episode: ep,
                        step,
                        action,
                        item_id,
                        repeats,
                    });
                }
                if matches!(policy, Policy::Greedy { masked: true, .. })
                    && started_with_pickable
                    && attempts >= rows
                {
                    return Err(EnvError::NoProgress {
                        episode: ep,
                        attempts,
                    });
                }
            }
            if info.done {
                break;
            }
        }
        total_s += successes;
        total_f += failures;
        let n = (successes + failures).max(1) as f64;
        episodes.push(EpisodeReport {
            episode: ep,
            successes,
            failures,
            msr: successes as f64 / n,
        });
    }
    let n = (total_s + total_f).max(1) as f64;
    Ok(EvalReport {
        episodes,
        msr: total_s as f64 / n,
        attempts_per_success: histogram,
        max_attempts_with_pickable: max_with_pickable,
    })
}
