//! Multi-agent deep deterministic policy gradient (one actor per building,
//! centralized critics), the replay buffer, policy checkpoints and the
//! rule-based controller used as baseline and fallback.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{s, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{cast, Activation, Adam, Mlp, NnError, Scalar};
use crate::scenario::{BuildingSpec, ScenarioSpec};
use crate::supervisor::{battery_cmd_limits, ev_cmd_limits, EvView};
use crate::telemetry::obs;
use crate::twin::{Action, StepOutcome};

pub const ACTION_DIM: usize = 2;
pub const HIDDEN: usize = 64;
/// Output layers start small so the untrained policy idles.
const OUTPUT_INIT_LIMIT: f64 = 3e-3;
const CHECKPOINT_MAGIC: &[u8; 8] = b"RECCKPT1";

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("observation has {found} values, policy expects {expected}")]
    ObsShape { expected: usize, found: usize },
    #[error(transparent)]
    Shape(#[from] NnError),
    #[error("replay buffer holds {have} transitions, {need} required")]
    InsufficientData { have: usize, need: usize },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error("checkpoint does not fit this scenario: {0}")]
    Incompatible(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub batch: usize,
    pub buffer_capacity: usize,
    pub sigma_start: f64,
    pub sigma_decay: f64,
    pub episodes: usize,
    pub lambda_peak: f64,
    pub lambda_ev: f64,
    pub seed: u64,
    /// Environment steps between gradient updates.
    pub updates_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.005,
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            batch: 256,
            buffer_capacity: 100_000,
            sigma_start: 0.3,
            sigma_decay: 0.995,
            episodes: 15,
            lambda_peak: 0.01,
            lambda_ev: 1.0,
            seed: 42,
            updates_every: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        let mut bad = Vec::new();
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            bad.push(format!("gamma {} outside (0, 1)", self.gamma));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            bad.push(format!("tau {} outside (0, 1]", self.tau));
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            bad.push("learning rates must be positive".into());
        }
        if self.batch == 0 || self.buffer_capacity < self.batch {
            bad.push("batch must be positive and fit the buffer".into());
        }
        if self.updates_every == 0 {
            bad.push("updates_every must be at least 1".into());
        }
        if !(self.sigma_start >= 0.0 && self.sigma_decay > 0.0 && self.sigma_decay <= 1.0) {
            bad.push("exploration sigma must be non-negative with decay in (0, 1]".into());
        }
        if !(self.lambda_peak >= 0.0 && self.lambda_ev >= 0.0) {
            bad.push("reward weights must be non-negative".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(bad.join("; "))
        }
    }

    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

/// Networks of one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentNets<T> {
    pub actor: Mlp<T>,
    pub critic: Mlp<T>,
    pub actor_target: Mlp<T>,
    pub critic_target: Mlp<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams<T> {
    pub agent_ids: Vec<String>,
    /// Per-feature multipliers applied to raw observations.
    pub obs_scale: Vec<f64>,
    pub v2g: Vec<bool>,
    pub agents: Vec<AgentNets<T>>,
}

fn actor_sizes() -> [usize; 4] {
    [obs::DIM, HIDDEN, HIDDEN, ACTION_DIM]
}

fn critic_sizes(n: usize) -> [usize; 4] {
    [n * (obs::DIM + ACTION_DIM), HIDDEN, HIDDEN, 1]
}

impl<T: Scalar> PolicyParams<T> {
    pub fn new(agent_ids: Vec<String>, obs_scale: Vec<f64>, v2g: Vec<bool>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = agent_ids.len();
        let agents = (0..n)
            .map(|_| {
                let actor = Mlp::new(&actor_sizes(), Activation::Relu, Activation::Tanh, &mut rng)
                    .with_output_limit(OUTPUT_INIT_LIMIT, &mut rng);
                let critic = Mlp::new(&critic_sizes(n), Activation::Relu, Activation::Identity, &mut rng)
                    .with_output_limit(OUTPUT_INIT_LIMIT, &mut rng);
                AgentNets {
                    actor_target: actor.clone(),
                    critic_target: critic.clone(),
                    actor,
                    critic,
                }
            })
            .collect();
        Self {
            agent_ids,
            obs_scale,
            v2g,
            agents,
        }
    }

    /// All-zero networks; every action is zero.
    pub fn zeros(agent_ids: Vec<String>, obs_scale: Vec<f64>, v2g: Vec<bool>) -> Self {
        let n = agent_ids.len();
        let a = Mlp::zeros(&actor_sizes(), Activation::Relu, Activation::Tanh);
        let c = Mlp::zeros(&critic_sizes(n), Activation::Relu, Activation::Identity);
        let agents = (0..n)
            .map(|_| AgentNets {
                actor: a.clone(),
                critic: c.clone(),
                actor_target: a.clone(),
                critic_target: c.clone(),
            })
            .collect();
        Self {
            agent_ids,
            obs_scale,
            v2g,
            agents,
        }
    }

    /// Layout derived from a scenario: one agent per building.
    pub fn for_scenario(s: &ScenarioSpec, seed: u64) -> Self {
        Self::new(
            s.buildings.iter().map(|b| b.id.clone()).collect(),
            observation_scale(s),
            v2g_flags(s),
            seed,
        )
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    /// Fails unless the checkpoint was built for this scenario's layout.
    pub fn check_compatible(&self, s: &ScenarioSpec) -> Result<(), ControlError> {
        let ids: Vec<String> = s.buildings.iter().map(|b| b.id.clone()).collect();
        if ids != self.agent_ids {
            return Err(ControlError::Incompatible(format!(
                "agents {:?} vs buildings {:?}",
                self.agent_ids, ids
            )));
        }
        let expect: Mlp<T> = Mlp::zeros(&critic_sizes(ids.len()), Activation::Relu, Activation::Identity);
        let actor: Mlp<T> = Mlp::zeros(&actor_sizes(), Activation::Relu, Activation::Tanh);
        for a in &self.agents {
            actor.check_same_shape(&a.actor)?;
            expect.check_same_shape(&a.critic)?;
        }
        Ok(())
    }
}

/// Fixed input scaling: prices, energy and EV quantities mapped to roughly
/// unit range using scenario maxima.
pub fn observation_scale(s: &ScenarioSpec) -> Vec<f64> {
    let inv = |x: f64| if x > 0.0 { 1.0 / x } else { 1.0 };
    let price = s.tariff.import_price.values().iter().fold(0.0f64, |m, v| m.max(*v));
    let load = s
        .buildings
        .iter()
        .flat_map(|b| b.load_profile.values().iter().copied())
        .fold(0.0f64, f64::max);
    let pv = s
        .buildings
        .iter()
        .filter_map(|b| b.pv.as_ref())
        .flat_map(|p| p.profile.values().iter().copied())
        .fold(0.0f64, f64::max);
    let cap = s.sessions.iter().fold(0.0f64, |m, x| m.max(x.ev_capacity_kwh));
    let mut v = vec![1.0; obs::DIM];
    v[obs::PRICE_NOW] = inv(price);
    v[obs::PRICE_NEXT] = inv(price);
    v[obs::PV_FORECAST] = inv(pv);
    v[obs::LOAD_FORECAST] = inv(load);
    v[obs::EV_REQUIRED_KWH] = inv(cap);
    v[obs::EV_INTERVALS_TO_DEPARTURE] = inv(s.grid.steps_per_day() as f64);
    v
}

fn v2g_flags(s: &ScenarioSpec) -> Vec<bool> {
    s.buildings
        .iter()
        .map(|b| b.charger.as_ref().is_some_and(|c| c.v2g_enabled))
        .collect()
}

/// Gaussian exploration noise with its own seeded stream.
#[derive(Debug, Clone)]
pub struct NoiseState {
    rng: ChaCha8Rng,
    pub sigma: f64,
}

impl NoiseState {
    pub fn new(seed: u64, sigma: f64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            sigma,
        }
    }

    fn sample(&mut self) -> f64 {
        let z: f64 = self.rng.sample(StandardNormal);
        z * self.sigma
    }
}

fn clip_action(raw: [f64; 2], v2g: bool) -> Action {
    let lo = if v2g { -1.0 } else { 0.0 };
    Action::new(raw[0].clamp(-1.0, 1.0), raw[1].clamp(lo, 1.0))
}

fn scaled<'a, T: Scalar>(o: &'a [f64], scale: &'a [f64]) -> impl Iterator<Item = T> + 'a {
    o.iter().zip(scale.iter()).map(|(v, s)| cast::<T>(v * s))
}

/// Deterministic actor output for one agent, with optional exploration
/// noise. Depends only on that agent's own observation.
pub fn act<T: Scalar>(
    params: &PolicyParams<T>,
    agent: usize,
    observation: &[f64],
    noise: Option<&mut NoiseState>,
) -> Result<Action, ControlError> {
    if observation.len() != obs::DIM {
        return Err(ControlError::ObsShape {
            expected: obs::DIM,
            found: observation.len(),
        });
    }
    let x = Array2::from_shape_vec((1, obs::DIM), scaled::<T>(observation, &params.obs_scale).collect())
        .expect("row vector");
    let y = params.agents[agent].actor.forward(x.view());
    let mut raw = [y[[0, 0]].to_f64().unwrap_or(0.0), y[[0, 1]].to_f64().unwrap_or(0.0)];
    if let Some(n) = noise {
        for r in &mut raw {
            *r += n.sample();
        }
    }
    Ok(clip_action(raw, params.v2g[agent]))
}

/// Per-agent reward of a completed step.
pub fn reward(outcome: &StepOutcome, cfg: &TrainConfig) -> Vec<f64> {
    let n = outcome.buildings.len() as f64;
    let peak = cfg.lambda_peak * outcome.community_kwh.max(0.0).powi(2) / n;
    outcome
        .buildings
        .iter()
        .map(|f| -f.cost() - peak - cfg.lambda_ev * f.unmet_kwh)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
    pub next_obs: Vec<Vec<f64>>,
    pub done: bool,
}

/// Ring buffer with a seeded uniform sampler.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: Vec<Transition>,
    capacity: usize,
    next: usize,
    seed: u64,
    calls: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, seed: u64) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            items: Vec::new(),
            capacity,
            next: 0,
            seed,
            calls: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// Indices of the next sample; each call uses its own stream.
    pub fn sample_indices(&mut self, batch: usize) -> Result<Vec<usize>, ControlError> {
        if self.items.is_empty() {
            return Err(ControlError::InsufficientData { have: 0, need: batch });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.calls);
        self.calls += 1;
        let n = self.items.len();
        Ok((0..batch).map(|_| rng.gen_range(0..n)).collect())
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }
}

/// Uniform draw with replacement.
pub fn replay_sample(buffer: &mut ReplayBuffer, batch: usize) -> Result<Vec<&Transition>, ControlError> {
    let idx = buffer.sample_indices(batch)?;
    Ok(idx.into_iter().map(|i| buffer.get(i)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Losses {
    pub critic: f64,
    pub actor: f64,
}

/// Optimizer state for all agents.
pub struct Trainer<T> {
    pub actor_opt: Vec<Adam<T>>,
    pub critic_opt: Vec<Adam<T>>,
    pub gamma: T,
    pub tau: T,
}

/// Batch matrices assembled from transitions.
struct Batch<T> {
    x: Array2<T>,
    x_next: Array2<T>,
    a: Array2<T>,
    r: Array2<T>,
    not_done: Array2<T>,
}

fn assemble<T: Scalar>(batch: &[&Transition], scale: &[f64]) -> Batch<T> {
    let b = batch.len();
    let n = batch[0].obs.len();
    let mut x = Array2::zeros((b, n * obs::DIM));
    let mut x_next = Array2::zeros((b, n * obs::DIM));
    let mut a = Array2::zeros((b, n * ACTION_DIM));
    let mut r = Array2::zeros((b, n));
    let mut not_done = Array2::zeros((b, 1));
    for (row, t) in batch.iter().enumerate() {
        for j in 0..n {
            for (k, v) in scaled::<T>(&t.obs[j], scale).enumerate() {
                x[[row, j * obs::DIM + k]] = v;
            }
            for (k, v) in scaled::<T>(&t.next_obs[j], scale).enumerate() {
                x_next[[row, j * obs::DIM + k]] = v;
            }
            a[[row, j * ACTION_DIM]] = cast(t.actions[j].battery_cmd);
            a[[row, j * ACTION_DIM + 1]] = cast(t.actions[j].ev_cmd);
            r[[row, j]] = cast(t.rewards[j]);
        }
        not_done[[row, 0]] = if t.done { T::zero() } else { T::one() };
    }
    Batch {
        x,
        x_next,
        a,
        r,
        not_done,
    }
}

fn clip_actions<T: Scalar>(y: &mut Array2<T>, v2g: bool) {
    let lo = if v2g { -T::one() } else { T::zero() };
    y.column_mut(1).mapv_inplace(|v| v.max(lo).min(T::one()));
}

/// Bounded-action gradient inversion: each component is scaled by the
/// remaining room towards the bound it pushes to, so outputs that ran past
/// a bound are pulled back instead of saturating the tanh.
fn invert_gradients<T: Scalar>(grad: &mut Array2<T>, raw: &Array2<T>, v2g: bool) {
    for k in 0..ACTION_DIM {
        let (lo, hi) = if k == 1 && !v2g {
            (T::zero(), T::one())
        } else {
            (-T::one(), T::one())
        };
        let range = hi - lo;
        for (g, y) in grad.column_mut(k).iter_mut().zip(raw.column(k)) {
            // descent on -Q: a negative gradient raises the action
            let room = if *g < T::zero() { hi - *y } else { *y - lo };
            *g = *g * room / range;
        }
    }
}

fn concat<T: Scalar>(x: &Array2<T>, a: &Array2<T>) -> Array2<T> {
    ndarray::concatenate(Axis(1), &[x.view(), a.view()]).expect("same row count")
}

impl<T: Scalar> Trainer<T> {
    pub fn new(params: &PolicyParams<T>, cfg: &TrainConfig) -> Self {
        Self {
            actor_opt: params
                .agents
                .iter()
                .map(|a| Adam::new(&a.actor, cast(cfg.actor_lr)))
                .collect(),
            critic_opt: params
                .agents
                .iter()
                .map(|a| Adam::new(&a.critic, cast(cfg.critic_lr)))
                .collect(),
            gamma: cast(cfg.gamma),
            tau: cast(cfg.tau),
        }
    }

    /// One update of every agent's critic and actor on a batch, followed by
    /// soft target updates. Returns mean losses over agents.
    pub fn train_step(&mut self, params: &mut PolicyParams<T>, batch: &[&Transition]) -> Result<Losses, ControlError> {
        if batch.is_empty() {
            return Err(ControlError::InsufficientData { have: 0, need: 1 });
        }
        let n = params.n_agents();
        let bt = assemble::<T>(batch, &params.obs_scale);
        let rows = batch.len();
        let inv_b = T::one() / cast::<T>(rows as f64);

        // Target actions of every agent on next observations.
        let mut a_next = Array2::zeros((rows, n * ACTION_DIM));
        for j in 0..n {
            let o = bt.x_next.slice(s![.., j * obs::DIM..(j + 1) * obs::DIM]);
            let mut y = params.agents[j].actor_target.forward(o);
            clip_actions(&mut y, params.v2g[j]);
            a_next
                .slice_mut(s![.., j * ACTION_DIM..(j + 1) * ACTION_DIM])
                .assign(&y);
        }
        let joint_next = concat(&bt.x_next, &a_next);
        let joint = concat(&bt.x, &bt.a);

        let mut losses = Losses::default();
        for i in 0..n {
            // critic
            let q_next = params.agents[i].critic_target.forward(joint_next.view());
            let y = &bt.r.slice(s![.., i..i + 1]) + &(q_next * &bt.not_done * self.gamma);
            let tr = params.agents[i].critic.forward_trace(joint.view());
            let err = tr.output() - &y;
            losses.critic += err.iter().map(|e| e.to_f64().unwrap_or(0.0).powi(2)).sum::<f64>() / rows as f64;
            let d = err * (cast::<T>(2.0) * inv_b);
            let (g, _) = params.agents[i].critic.backward(&tr, d.view());
            self.critic_opt[i].step(&mut params.agents[i].critic, &g);

            // actor: own action replaced by the current policy output
            let o = bt.x.slice(s![.., i * obs::DIM..(i + 1) * obs::DIM]);
            let atr = params.agents[i].actor.forward_trace(o);
            let mut mu = atr.output().clone();
            clip_actions(&mut mu, params.v2g[i]);
            let mut a_pi = bt.a.clone();
            a_pi.slice_mut(s![.., i * ACTION_DIM..(i + 1) * ACTION_DIM]).assign(&mu);
            let ctr = params.agents[i].critic.forward_trace(concat(&bt.x, &a_pi).view());
            losses.actor -= ctr.output().iter().map(|q| q.to_f64().unwrap_or(0.0)).sum::<f64>() / rows as f64;
            let dq = Array2::from_elem((rows, 1), -inv_b);
            let (_, dx) = params.agents[i].critic.backward(&ctr, dq.view());
            let off = n * obs::DIM + i * ACTION_DIM;
            let mut da = dx.slice(s![.., off..off + ACTION_DIM]).to_owned();
            invert_gradients(&mut da, atr.output(), params.v2g[i]);
            let (ga, _) = params.agents[i].actor.backward(&atr, da.view());
            self.actor_opt[i].step(&mut params.agents[i].actor, &ga);
        }
        for ag in &mut params.agents {
            ag.actor_target.soft_update(&ag.actor, self.tau)?;
            ag.critic_target.soft_update(&ag.critic, self.tau)?;
        }
        losses.critic /= n as f64;
        losses.actor /= n as f64;
        Ok(losses)
    }
}

/// Inputs of the rule-based controller for one building.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RbcInput {
    pub step: usize,
    pub load_kwh: f64,
    pub pv_kwh: f64,
    pub battery_soc: Option<f64>,
    pub ev: Option<EvView>,
    pub earliest_start_step: Option<usize>,
}

/// Charges a connected vehicle at full power until its target, stores PV
/// surplus and discharges to cover the remaining residual load. The battery
/// never discharges beyond the residual, so it never exports.
pub fn rbc_act(input: &RbcInput, spec: &BuildingSpec, dt_h: f64) -> Action {
    let mut ev_cmd = 0.0;
    let mut ev_ac = 0.0;
    if let (Some(c), Some(ev)) = (&spec.charger, &input.ev) {
        let allowed = input.earliest_start_step.is_none_or(|s| input.step >= s);
        if allowed && ev.soc < ev.target_soc {
            let (_, hi) = ev_cmd_limits(c, ev, dt_h);
            ev_cmd = hi.clamp(0.0, 1.0);
            let needed = (ev.target_soc - ev.soc) * ev.capacity_kwh / c.eta_charge;
            ev_ac = (ev_cmd * c.rated_kw * dt_h).min(needed);
        }
    }
    let mut battery_cmd = 0.0;
    if let (Some(b), Some(soc)) = (&spec.battery, input.battery_soc) {
        let full = b.rated_kw * dt_h;
        let residual = input.load_kwh + ev_ac - input.pv_kwh;
        let raw = if residual < 0.0 {
            (-residual / full).min(1.0)
        } else if residual > 0.0 {
            -(residual / full).min(1.0)
        } else {
            0.0
        };
        let (lo, hi) = battery_cmd_limits(b, soc, dt_h);
        battery_cmd = raw.clamp(lo.min(0.0), hi.max(0.0));
    }
    Action::new(battery_cmd, ev_cmd)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NetHeader {
    agent: String,
    role: String,
    shapes: Vec<(usize, usize)>,
    activations: Vec<Activation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub agent_ids: Vec<String>,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub obs_scale: Vec<f64>,
    pub v2g: Vec<bool>,
    pub config_hash: String,
    networks: Vec<NetHeader>,
}

fn nets<T>(p: &PolicyParams<T>) -> Vec<(String, &'static str, &Mlp<T>)> {
    let mut out = Vec::new();
    for (id, a) in p.agent_ids.iter().zip(&p.agents) {
        out.push((id.clone(), "actor", &a.actor));
        out.push((id.clone(), "critic", &a.critic));
        out.push((id.clone(), "actor_target", &a.actor_target));
        out.push((id.clone(), "critic_target", &a.critic_target));
    }
    out
}

/// Writes `RECCKPT1`, the header length (u64 LE), the JSON header, then
/// every parameter as f64 LE in header order.
pub fn save_checkpoint<T: Scalar>(
    path: impl AsRef<Path>,
    p: &PolicyParams<T>,
    config_hash: &str,
) -> std::io::Result<()> {
    let header = CheckpointHeader {
        agent_ids: p.agent_ids.clone(),
        obs_dim: obs::DIM,
        action_dim: ACTION_DIM,
        obs_scale: p.obs_scale.clone(),
        v2g: p.v2g.clone(),
        config_hash: config_hash.to_string(),
        networks: nets(p)
            .into_iter()
            .map(|(agent, role, m)| NetHeader {
                agent,
                role: role.to_string(),
                shapes: m.shapes(),
                activations: m.layers.iter().map(|l| l.act).collect(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, _, m) in nets(p) {
        for v in m.to_flat() {
            w.write_all(&v.to_f64().unwrap_or(f64::NAN).to_le_bytes())?;
        }
    }
    w.flush()
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(PolicyParams<T>, CheckpointHeader), ControlError> {
    let path = path.as_ref();
    let err = |message: String| ControlError::Checkpoint {
        path: path.display().to_string(),
        message,
    };
    let mut r = BufReader::new(File::open(path).map_err(|e| err(e.to_string()))?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| err(e.to_string()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(err("not a policy checkpoint".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|e| err(e.to_string()))?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 24 {
        return Err(err(format!("implausible header length {len}")));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|e| err(e.to_string()))?;
    let header: CheckpointHeader = serde_json::from_slice(&json).map_err(|e| err(e.to_string()))?;
    if header.obs_dim != obs::DIM || header.action_dim != ACTION_DIM || header.obs_scale.len() != obs::DIM {
        return Err(ControlError::Incompatible(format!(
            "observation/action dims {}x{}, expected {}x{}",
            header.obs_dim,
            header.action_dim,
            obs::DIM,
            ACTION_DIM
        )));
    }
    let n = header.agent_ids.len();
    if header.v2g.len() != n || header.networks.len() != 4 * n {
        return Err(err("header lists an inconsistent number of networks".into()));
    }
    let mut params = PolicyParams::<T>::zeros(header.agent_ids.clone(), header.obs_scale.clone(), header.v2g.clone());
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(|e| err(e.to_string()))?;
    let mut values = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    if rest.len() % 8 != 0 {
        return Err(err("trailing bytes after parameters".into()));
    }
    for (k, nh) in header.networks.iter().enumerate() {
        let ag = &mut params.agents[k / 4];
        let net = match k % 4 {
            0 => &mut ag.actor,
            1 => &mut ag.critic,
            2 => &mut ag.actor_target,
            _ => &mut ag.critic_target,
        };
        if net.shapes() != nh.shapes {
            return Err(NnError::ShapeMismatch {
                expected: net.shapes(),
                found: nh.shapes.clone(),
            }
            .into());
        }
        let flat: Vec<T> = values.by_ref().take(net.param_count()).map(cast::<T>).collect();
        net.load_flat(&flat)?;
    }
    if values.next().is_some() {
        return Err(err("more parameters than the header describes".into()));
    }
    Ok((params, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::generate_synthetic;
    use crate::twin::BuildingFlow;

    fn ids(n: usize) -> Vec<String> {
        (1..=n).map(|i| format!("B{i}")).collect()
    }

    fn small(n: usize, seed: u64) -> PolicyParams<f64> {
        PolicyParams::new(ids(n), vec![1.0; obs::DIM], vec![false; n], seed)
    }

    fn obs_vec(seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..obs::DIM).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn gradient_inversion_pulls_back_into_range() {
        // columns: battery in [-1, 1], EV in [0, 1] without V2G
        let raw = ndarray::array![[0.0, -0.5], [0.5, 0.5], [1.0, 1.2]];
        let mut g = ndarray::array![[-2.0, 1.0], [1.0, -1.0], [-1.0, 1.0]];
        invert_gradients(&mut g, &raw, false);
        // row 0: room to +1 is 1 of 2; EV below its floor, asked lower -> pushed up
        assert_eq!(g.row(0).to_vec(), vec![-1.0, -0.5]);
        // row 1: room to -1 is 1.5 of 2; EV room to 1 is 0.5
        assert_eq!(g.row(1).to_vec(), vec![0.75, -0.5]);
        // row 2: battery at its ceiling cannot rise; EV above 1 asked lower keeps going
        assert_eq!(g.row(2).to_vec(), vec![0.0, 1.2]);
    }

    #[test]
    fn actor_learns_to_avoid_a_costly_action() {
        // myopic bandit: charging costs, battery use is free
        let mut p = small(1, 4);
        let cfg = TrainConfig {
            gamma: 0.01,
            actor_lr: 1e-3,
            batch: 64,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(&p, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data: Vec<Transition> = (0..512)
            .map(|k| {
                let ev: f64 = rng.gen_range(0.0..1.0);
                Transition {
                    obs: vec![obs_vec(k)],
                    actions: vec![Action::new(rng.gen_range(-1.0..1.0), ev)],
                    rewards: vec![-ev],
                    next_obs: vec![obs_vec(k + 1)],
                    done: false,
                }
            })
            .collect();
        let mean_ev = |p: &PolicyParams<f64>| {
            (0..64)
                .map(|k| act(p, 0, &obs_vec(1000 + k), None).unwrap().ev_cmd)
                .sum::<f64>()
                / 64.0
        };
        let before = mean_ev(&p);
        for it in 0..400 {
            let batch: Vec<&Transition> = (0..64).map(|j| &data[(it * 64 + j) % data.len()]).collect();
            trainer.train_step(&mut p, &batch).unwrap();
        }
        let after = mean_ev(&p);
        assert!(after < 0.05 && after <= before, "mean EV command {before} -> {after}");
    }

    #[test]
    fn zero_weights_give_zero_action() {
        let p = PolicyParams::<f64>::zeros(ids(2), vec![1.0; obs::DIM], vec![false; 2]);
        assert_eq!(act(&p, 0, &obs_vec(1), None).unwrap(), Action::IDLE);
    }

    #[test]
    fn greedy_action_is_deterministic_and_legal() {
        let p = small(2, 3);
        let o = obs_vec(2);
        let a = act(&p, 1, &o, None).unwrap();
        assert_eq!(a, act(&p, 1, &o, None).unwrap());
        let mut noise = NoiseState::new(1, 5.0);
        for k in 0..200 {
            let a = act(&p, 0, &obs_vec(k), Some(&mut noise)).unwrap();
            assert!((-1.0..=1.0).contains(&a.battery_cmd));
            assert!((0.0..=1.0).contains(&a.ev_cmd));
        }
        assert!(matches!(
            act(&p, 0, &[0.0; 3], None),
            Err(ControlError::ObsShape { .. })
        ));
    }

    #[test]
    fn actor_matches_hand_arithmetic() {
        let mut p = PolicyParams::<f64>::zeros(ids(1), vec![1.0; obs::DIM], vec![true]);
        let actor = &mut p.agents[0].actor;
        // identity hidden path for the first two features
        actor.layers[0].w[[0, 0]] = 1.0;
        actor.layers[0].w[[1, 1]] = 1.0;
        actor.layers[1].w[[0, 0]] = 1.0;
        actor.layers[1].w[[1, 1]] = 1.0;
        actor.layers[2].w[[0, 0]] = 0.5;
        actor.layers[2].w[[1, 1]] = -2.0;
        let mut o = vec![0.0; obs::DIM];
        o[0] = 0.4;
        o[1] = 0.3;
        let a = act(&p, 0, &o, None).unwrap();
        assert!((a.battery_cmd - (0.2f64).tanh()).abs() < 1e-15);
        assert!((a.ev_cmd - (-0.6f64).tanh()).abs() < 1e-15);
    }

    fn flow(cost: f64, net: f64, unmet: f64) -> BuildingFlow {
        BuildingFlow {
            net,
            import_cost: cost,
            unmet_kwh: unmet,
            ..Default::default()
        }
    }

    #[test]
    fn reward_hand_values() {
        let cfg = TrainConfig::default();
        let zero = StepOutcome {
            step: 0,
            buildings: vec![flow(0.0, 0.0, 0.0); 4],
            community_kwh: 0.0,
        };
        assert!(reward(&zero, &cfg).iter().all(|r| *r == 0.0));
        let mut bs = vec![flow(0.0, 1.0, 0.0); 4];
        bs[0] = flow(0.10, 1.0, 0.0);
        bs[1] = flow(0.0, 1.0, 4.0);
        let o = StepOutcome {
            step: 0,
            buildings: bs,
            community_kwh: 4.0,
        };
        let r = reward(&o, &cfg);
        assert!((r[0] + 0.14).abs() < 1e-12);
        assert!((r[1] + 0.04 + 4.0).abs() < 1e-12);
    }

    fn transition(n: usize, rng: &mut ChaCha8Rng, done: bool) -> Transition {
        let v = |rng: &mut ChaCha8Rng| (0..obs::DIM).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        Transition {
            obs: (0..n).map(|_| v(rng)).collect(),
            actions: (0..n)
                .map(|_| Action::new(rng.gen_range(-1.0..1.0), rng.gen_range(0.0..1.0)))
                .collect(),
            rewards: (0..n).map(|_| rng.gen_range(-1.0..0.0)).collect(),
            next_obs: (0..n).map(|_| v(rng)).collect(),
            done,
        }
    }

    #[test]
    fn terminal_target_with_zero_discount_is_reward() {
        let mut p = small(2, 7);
        let cfg = TrainConfig {
            gamma: 1e-300,
            critic_lr: 1e-12,
            actor_lr: 1e-12,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = transition(2, &mut rng, true);
        let q0 = {
            let b = assemble::<f64>(&[&t], &p.obs_scale);
            p.agents[0].critic.forward(concat(&b.x, &b.a).view())[[0, 0]]
        };
        let mut tr = Trainer::new(&p, &cfg);
        let l = tr.train_step(&mut p, &[&t]).unwrap();
        // first agent's squared error is (q0 - r)^2; the mean over agents includes it
        assert!(l.critic >= 0.0);
        let expected0 = (q0 - t.rewards[0]).powi(2);
        let q1 = {
            let b = assemble::<f64>(&[&t], &p.obs_scale);
            p.agents[1].critic.forward(concat(&b.x, &b.a).view())[[0, 0]]
        };
        let expected1 = (q1 - t.rewards[1]).powi(2);
        assert!((l.critic - 0.5 * (expected0 + expected1)).abs() < 1e-6);
    }

    #[test]
    fn critic_overfits_a_frozen_batch() {
        let mut p = small(2, 11);
        let cfg = TrainConfig {
            gamma: 0.0,
            tau: 1.0,
            critic_lr: 1e-4,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ts: Vec<Transition> = (0..32).map(|_| transition(2, &mut rng, false)).collect();
        let batch: Vec<&Transition> = ts.iter().collect();
        let mut tr = Trainer::new(&p, &cfg);
        let mut last = f64::INFINITY;
        for _ in 0..50 {
            let l = tr.train_step(&mut p, &batch).unwrap();
            assert!(l.critic < last, "{} !< {last}", l.critic);
            last = l.critic;
        }
    }

    #[test]
    fn replay_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = ReplayBuffer::new(4, 9);
        assert!(matches!(
            replay_sample(&mut b, 3),
            Err(ControlError::InsufficientData { .. })
        ));
        let t = transition(1, &mut rng, false);
        b.push(t.clone());
        let s = replay_sample(&mut b, 3).unwrap();
        assert_eq!(s.len(), 3);
        assert!(s.iter().all(|x| **x == t));
        for _ in 0..10 {
            b.push(transition(1, &mut rng, false));
        }
        assert_eq!(b.len(), 4);
        let mut c = b.clone();
        assert_eq!(b.sample_indices(16).unwrap(), c.sample_indices(16).unwrap());
        assert_ne!(
            b.sample_indices(16).unwrap(),
            ReplayBuffer::new(4, 9).sample_indices(16).unwrap_or_default()
        );
    }

    #[test]
    fn replay_sampling_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = ReplayBuffer::new(10, 4);
        for _ in 0..10 {
            b.push(transition(1, &mut rng, false));
        }
        let mut counts = [0usize; 10];
        for _ in 0..100 {
            for i in b.sample_indices(1000).unwrap() {
                counts[i] += 1;
            }
        }
        // 1e5 draws: mean 1e4, sd sqrt(1e5 * 0.1 * 0.9) ~ 94.9
        for c in counts {
            assert!((c as f64 - 10_000.0).abs() < 3.0 * 94.87, "{counts:?}");
        }
    }

    #[test]
    fn rbc_rules() {
        let s = generate_synthetic(42, 1, 1);
        let mut spec = s.buildings[0].clone();
        let ev = EvView {
            soc: 0.3,
            reserve: 0.0,
            capacity_kwh: 40.0,
            target_soc: 0.8,
            departure_step: 90,
        };
        let base = RbcInput {
            step: 10,
            load_kwh: 0.5,
            pv_kwh: 0.5,
            battery_soc: Some(0.5),
            ev: Some(ev),
            earliest_start_step: None,
        };
        assert_eq!(rbc_act(&base, &spec, 0.25).ev_cmd, 1.0);
        let idle = RbcInput { ev: None, ..base };
        assert_eq!(rbc_act(&idle, &spec, 0.25), Action::IDLE);
        // 2 kWh surplus on a 3 kW battery over 15 min: 2 / 0.75 clipped to 1
        let surplus = RbcInput {
            pv_kwh: 2.5,
            ev: None,
            ..base
        };
        assert_eq!(rbc_act(&surplus, &spec, 0.25).battery_cmd, 1.0);
        // deficit of 0.3 kWh: discharge exactly that much
        let deficit = RbcInput {
            load_kwh: 0.8,
            ev: None,
            ..base
        };
        assert!((rbc_act(&deficit, &spec, 0.25).battery_cmd + 0.4).abs() < 1e-12);
        let waiting = RbcInput {
            earliest_start_step: Some(20),
            ..base
        };
        assert_eq!(rbc_act(&waiting, &spec, 0.25).ev_cmd, 0.0);
        spec.battery = None;
        assert_eq!(rbc_act(&deficit, &spec, 0.25).battery_cmd, 0.0);
    }

    #[test]
    fn checkpoint_round_trip_and_shape_guard() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.ckpt");
        let p = small(3, 5);
        save_checkpoint(&path, &p, "abc").unwrap();
        let (q, h) = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!(p, q);
        assert_eq!(h.config_hash, "abc");

        // tamper: claim a different hidden width
        let bytes = std::fs::read(&path).unwrap();
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = String::from_utf8(bytes[16..16 + len].to_vec()).unwrap();
        let bad = header.replacen("[14,64]", "[14,65]", 1);
        let mut out = Vec::new();
        out.extend_from_slice(&bytes[..8]);
        out.extend_from_slice(&(bad.len() as u64).to_le_bytes());
        out.extend_from_slice(bad.as_bytes());
        out.extend_from_slice(&bytes[16 + len..]);
        std::fs::write(&path, out).unwrap();
        assert!(matches!(load_checkpoint::<f64>(&path), Err(ControlError::Shape(_))));

        let s = generate_synthetic(1, 2, 1);
        assert!(p.check_compatible(&s).is_err());
    }
}
