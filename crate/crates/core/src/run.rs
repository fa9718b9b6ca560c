//! Experiment orchestration: the per-step pipeline (twin, telemetry,
//! forecast, flexibility, controller, supervisor, audit), training,
//! evaluation and run-directory persistence.

use std::collections::VecDeque;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{
    act, load_checkpoint, rbc_act, replay_sample, reward, save_checkpoint, ControlError, NoiseState, PolicyParams,
    RbcInput, ReplayBuffer, TrainConfig, Trainer, Transition,
};
use crate::flexibility::{
    estimate_flexibility, resolve_preferences, CompletedSession, DayType, EffectiveEv, FlexDefaults, PlugIn,
    SessionHistory, UserPreference, DEFAULT_CONFIDENCE, DEFAULT_MIN_SAMPLES,
};
use crate::forecast::ForecastModel;
use crate::kpi::{compute_kpis, normalize_report, render_table, KpiError, KpiReport};
use crate::scenario::{load_scenario, save_scenario, ScenarioError, ScenarioSpec};
use crate::supervisor::{vet_action, EvView, Intervention, SafetyEnvelope, VetInput};
use crate::telemetry::{
    detect_anomalies, encode_observation, AlignStats, AlignedFrame, Aligner, AuditLog, EvContext, FrameLayout, Metric,
    ObservationVector, PhysicalBounds, StepForecast, StorageError, StreamImputer, SPIKE_WINDOW,
};
use crate::twin::{Action, FaultConfig, FaultInjector, StepOutcome, Twin, TwinError};

pub const SCENARIO_FILE: &str = "scenario.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const POLICY_FILE: &str = "policy.ckpt";
pub const AUDIT_FILE: &str = "audit.jsonl";
pub const KPI_JSON_FILE: &str = "kpi.json";
pub const KPI_TEXT_FILE: &str = "kpi.txt";

const STATE_METRICS: [Metric; 2] = [Metric::BatterySoc, Metric::EvSoc];
const FLOW_METRICS: [Metric; 3] = [Metric::LoadKwh, Metric::PvKwh, Metric::EvPowerKw];

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Twin(#[from] TwinError),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Kpi(#[from] KpiError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("run directory {dir} lacks {missing}")]
    MissingArtifacts { dir: PathBuf, missing: String },
    #[error("{path}: {message}")]
    Malformed { path: PathBuf, message: String },
}

impl RunError {
    /// Whether the failure stems from user input rather than execution.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            RunError::Scenario(_)
                | RunError::Config(_)
                | RunError::MissingArtifacts { .. }
                | RunError::Malformed { .. }
        ) || matches!(
            self,
            RunError::Control(ControlError::Incompatible(_) | ControlError::Shape(_))
        )
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Maddpg,
    Rbc,
    None,
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ControllerKind::Maddpg => "maddpg",
            ControllerKind::Rbc => "rbc",
            ControllerKind::None => "none",
        })
    }
}

impl FromStr for ControllerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "maddpg" => Ok(ControllerKind::Maddpg),
            "rbc" => Ok(ControllerKind::Rbc),
            "none" => Ok(ControllerKind::None),
            other => Err(format!("unknown controller `{other}` (expected maddpg, rbc or none)")),
        }
    }
}

/// Flexibility-estimation settings of an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlexConfig {
    pub confidence: f64,
    pub min_samples: usize,
}

impl Default for FlexConfig {
    fn default() -> Self {
        Self {
            confidence: DEFAULT_CONFIDENCE,
            min_samples: DEFAULT_MIN_SAMPLES,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub steps: usize,
    pub interventions: usize,
    pub min_completeness: f64,
    pub mean_completeness: f64,
    /// Observation values that were missing or non-finite before encoding.
    pub incomplete_observations: usize,
    pub align: AlignStats,
}

/// Step-by-step driver of one episode. Call [`Episode::observe`] and then
/// [`Episode::apply`] once per interval.
pub struct Episode<'a> {
    scenario: &'a ScenarioSpec,
    twin: Twin<'a>,
    aligner: Aligner,
    faults: FaultInjector,
    imputer: StreamImputer,
    model: ForecastModel,
    bounds: PhysicalBounds,
    envelope: SafetyEnvelope,
    recent: VecDeque<AlignedFrame>,
    flex_cfg: FlexConfig,
    flex_defaults: Vec<FlexDefaults>,
    history: SessionHistory,
    prefs: Vec<UserPreference>,
    effective: Vec<Option<(usize, EffectiveEv)>>,
    state_frame: Option<AlignedFrame>,
    fallback: Vec<Action>,
    ages: Vec<usize>,
    observations: Vec<ObservationVector>,
    audit: Option<AuditLog>,
    completeness_sum: f64,
    stats: EpisodeStats,
}

impl<'a> Episode<'a> {
    pub fn new(
        scenario: &'a ScenarioSpec,
        faults: FaultConfig,
        prefs: Vec<UserPreference>,
        flex_cfg: FlexConfig,
    ) -> Self {
        let n = scenario.buildings.len();
        let flex_defaults = scenario
            .buildings
            .iter()
            .map(|b| {
                let cap = scenario
                    .sessions_for(&b.id)
                    .iter()
                    .map(|s| s.ev_capacity_kwh)
                    .fold(0.0f64, f64::max);
                FlexDefaults {
                    energy_kwh: if cap > 0.0 {
                        cap
                    } else {
                        FlexDefaults::default().energy_kwh
                    },
                    ..FlexDefaults::default()
                }
            })
            .collect();
        Self {
            scenario,
            twin: Twin::new(scenario),
            aligner: Aligner::new(scenario.grid.clone(), FrameLayout::from_scenario(scenario)),
            faults: FaultInjector::new(faults),
            imputer: StreamImputer::new(),
            model: ForecastModel::for_scenario(scenario),
            bounds: PhysicalBounds::from_scenario(scenario),
            envelope: SafetyEnvelope::from_scenario(scenario),
            recent: VecDeque::with_capacity(SPIKE_WINDOW + 2),
            flex_cfg,
            flex_defaults,
            history: SessionHistory::new(),
            prefs,
            effective: vec![None; n],
            state_frame: None,
            fallback: vec![Action::IDLE; n],
            ages: vec![0; n],
            observations: Vec::new(),
            audit: None,
            completeness_sum: 0.0,
            stats: EpisodeStats {
                min_completeness: 1.0,
                ..EpisodeStats::default()
            },
        }
    }

    /// Records every decision to an audit log.
    pub fn with_audit(mut self, log: AuditLog) -> Self {
        self.audit = Some(log);
        self
    }

    pub fn twin(&self) -> &Twin<'a> {
        &self.twin
    }

    pub fn is_done(&self) -> bool {
        self.twin.is_done()
    }

    pub fn stats(&self) -> &EpisodeStats {
        &self.stats
    }

    pub fn envelope(&self) -> &SafetyEnvelope {
        &self.envelope
    }

    /// Rule-based action for each building at the current step.
    pub fn fallback_actions(&self) -> &[Action] {
        &self.fallback
    }

    /// Effective EV parameters of the vehicle plugged in at `building`.
    pub fn effective_ev(&self, building: usize) -> Option<EffectiveEv> {
        self.effective[building].map(|(_, e)| e)
    }

    fn plan_session(&mut self, b: usize, step: usize, observed_soc: f64) -> EffectiveEv {
        let s = self.scenario;
        let session = self
            .twin
            .active_session(b)
            .expect("connected vehicle has a session")
            .clone();
        let id = &s.buildings[b].id;
        let date = s.grid.instant(step).date_naive();
        let day_type = DayType::of(date, &s.holidays);
        let est = estimate_flexibility(
            &self.history,
            id,
            day_type,
            self.flex_cfg.confidence,
            self.flex_cfg.min_samples,
            &self.flex_defaults[b],
        );
        // the vehicle reports its configured charge limit as the target
        let mut pref = UserPreference {
            building: id.clone(),
            date,
            departure: None,
            target_soc: Some(session.soc_target),
            earliest_start: None,
        };
        if let Some(p) = self.prefs.iter().find(|p| p.building == *id && p.date == date) {
            pref.departure = p.departure.or(pref.departure);
            pref.target_soc = p.target_soc.or(pref.target_soc);
            pref.earliest_start = p.earliest_start.or(pref.earliest_start);
        }
        let plug = PlugIn {
            arrival_step: step,
            soc_arrival: observed_soc,
            capacity_kwh: session.ev_capacity_kwh,
        };
        resolve_preferences(&est, Some(&pref), plug, &s.grid)
    }

    /// Ingests the state readings of the current step and returns one
    /// observation per building.
    pub fn observe(&mut self) -> &[ObservationVector] {
        let s = self.scenario;
        let step = self.twin.step();
        let n = s.buildings.len();
        for r in self.faults.degrade(self.twin.state_readings()) {
            let _ = self.aligner.push(r);
        }
        let frame = self.aligner.take(step, &STATE_METRICS);
        let mut frame = detect_anomalies(frame, &[], &self.bounds);
        for b in 0..n {
            let session = self.twin.state().buildings[b].ev.session;
            let fresh = match (session, self.effective[b]) {
                (Some(i), Some((j, _))) => i != j,
                (Some(_), None) => true,
                _ => false,
            };
            if fresh || session.is_none() {
                self.imputer.reset(b, Metric::EvSoc);
            }
            if session.is_none() {
                self.effective[b] = None;
            }
        }
        self.imputer.fill(&mut frame, &self.model);
        let dt = s.grid.dt_hours();
        let mut obs = Vec::with_capacity(n);
        for b in 0..n {
            self.ages[b] = STATE_METRICS
                .iter()
                .filter(|m| frame.expects(b, **m))
                .map(|m| self.imputer.age(b, *m))
                .max()
                .unwrap_or(0);
            let ev_soc = frame.value(b, Metric::EvSoc);
            if let (Some(i), Some(soc)) = (self.twin.state().buildings[b].ev.session, ev_soc) {
                if self.effective[b].map(|(j, _)| j) != Some(i) {
                    let e = self.plan_session(b, step, soc);
                    self.effective[b] = Some((i, e));
                }
            }
            let forecast = StepForecast {
                load_kwh: self.model.predict(b, Metric::LoadKwh, step).value_kwh,
                pv_kwh: if s.buildings[b].pv.is_some() {
                    self.model.predict(b, Metric::PvKwh, step).value_kwh
                } else {
                    0.0
                },
            };
            let eff = self.effective[b].map(|(_, e)| e);
            let cap = self.twin.active_session(b).map(|x| x.ev_capacity_kwh);
            let ctx = match (eff, cap) {
                (Some(e), Some(cap)) => Some(EvContext {
                    capacity_kwh: cap,
                    departure_step: e.departure_step,
                    target_soc: e.target_soc,
                }),
                _ => None,
            };
            let missing = frame.values[b]
                .values()
                .filter(|c| !matches!(c, Some(c) if c.value.is_finite()))
                .count();
            self.stats.incomplete_observations += missing;
            obs.push(encode_observation(&frame, b, s, ctx.as_ref(), forecast));
            let ev_view = match (eff, cap, ev_soc) {
                (Some(e), Some(cap), Some(soc)) => Some(EvView {
                    soc,
                    reserve: self.twin.state().buildings[b].ev.reserve,
                    capacity_kwh: cap,
                    target_soc: e.target_soc,
                    departure_step: e.departure_step,
                }),
                _ => None,
            };
            self.fallback[b] = rbc_act(
                &RbcInput {
                    step,
                    load_kwh: forecast.load_kwh,
                    pv_kwh: forecast.pv_kwh,
                    battery_soc: frame.value(b, Metric::BatterySoc),
                    ev: ev_view,
                    earliest_start_step: eff.and_then(|e| e.earliest_start_step),
                },
                &s.buildings[b],
                dt,
            );
        }
        self.state_frame = Some(frame);
        self.observations = obs;
        &self.observations
    }

    /// Vets the proposals, advances the twin and ingests the metered flows.
    pub fn apply(&mut self, proposed: &[Action]) -> Result<(StepOutcome, Vec<Action>, Vec<Intervention>), RunError> {
        let s = self.scenario;
        let step = self.twin.step();
        let n = s.buildings.len();
        if self.state_frame.as_ref().map(|f| f.step) != Some(step) {
            self.observe();
        }
        if proposed.len() != n {
            return Err(TwinError::ActionCount {
                expected: n,
                got: proposed.len(),
            }
            .into());
        }
        let mut vetted = Vec::with_capacity(n);
        let mut interventions = Vec::new();
        for (b, &p) in proposed.iter().enumerate() {
            let st = &self.twin.state().buildings[b];
            let ev = match (self.effective[b], self.twin.active_session(b)) {
                (Some((_, e)), Some(sess)) if st.ev.connected => Some(EvView {
                    soc: st.ev.soc,
                    reserve: st.ev.reserve,
                    capacity_kwh: sess.ev_capacity_kwh,
                    target_soc: e.target_soc,
                    departure_step: e.departure_step,
                }),
                _ => None,
            };
            let input = VetInput {
                step,
                battery_soc: st.battery.map(|x| x.soc),
                ev,
                observation_age: self.ages[b],
                fallback: self.fallback[b],
            };
            let (a, iv) = vet_action(p, &input, &self.envelope, b);
            vetted.push(a);
            interventions.extend(iv);
        }
        let before: Vec<Option<usize>> = self.twin.state().buildings.iter().map(|b| b.ev.session).collect();
        let outcome = self.twin.step_community(&vetted)?.clone();

        for r in self.faults.degrade(self.twin.flow_readings(&outcome)) {
            let _ = self.aligner.push(r);
        }
        let flows = self.aligner.take(step, &FLOW_METRICS);
        self.aligner.close_through(step);
        let history: Vec<AlignedFrame> = self.recent.iter().cloned().collect();
        let mut flows = detect_anomalies(flows, &history, &self.bounds);
        self.imputer.fill(&mut flows, &self.model);
        let mut frame = self.state_frame.take().expect("observed this step");
        frame.merge(flows);
        self.model.observe(&frame);
        self.stats.min_completeness = self.stats.min_completeness.min(frame.completeness);
        self.completeness_sum += frame.completeness;
        if self.recent.len() > SPIKE_WINDOW {
            self.recent.pop_front();
        }
        self.recent.push_back(frame);

        for (b, prev) in before.iter().enumerate() {
            if let Some(i) = prev {
                if self.twin.state().buildings[b].ev.session != Some(*i) {
                    let spec = &self.twin.sessions(b)[*i];
                    self.history
                        .record(&CompletedSession::from_spec(spec, &s.grid, &s.holidays));
                }
            }
        }

        if let Some(log) = self.audit.as_mut() {
            let ids: Vec<String> = s.buildings.iter().map(|b| b.id.clone()).collect();
            log.log_decision(
                step,
                s.grid.instant(step),
                &ids,
                &self.observations,
                proposed,
                &vetted,
                &interventions,
            )?;
        }
        self.stats.steps += 1;
        self.stats.interventions += interventions.len();
        self.stats.mean_completeness = self.completeness_sum / self.stats.steps as f64;
        self.stats.align = self.aligner.stats.clone();
        Ok((outcome, vetted, interventions))
    }

    pub fn finish(mut self) -> Result<EpisodeStats, RunError> {
        if let Some(log) = self.audit.as_mut() {
            log.flush()?;
        }
        Ok(self.stats)
    }
}

/// Options shared by every episode of a run.
#[derive(Debug, Clone, Default)]
pub struct EpisodeOptions {
    pub faults: FaultConfig,
    pub prefs: Vec<UserPreference>,
    pub flex: FlexConfig,
}

pub struct EpisodeResult {
    pub outcomes: Vec<StepOutcome>,
    pub stats: EpisodeStats,
}

/// Runs one deterministic episode with the given controller.
pub fn run_episode(
    scenario: &ScenarioSpec,
    controller: ControllerKind,
    policy: Option<&PolicyParams<f64>>,
    opts: &EpisodeOptions,
    audit: Option<AuditLog>,
) -> Result<EpisodeResult, RunError> {
    let mut ep = Episode::new(scenario, opts.faults, opts.prefs.clone(), opts.flex.clone());
    if let Some(log) = audit {
        ep = ep.with_audit(log);
    }
    let n = scenario.buildings.len();
    let mut outcomes = Vec::with_capacity(scenario.grid.steps);
    while !ep.is_done() {
        let obs = ep.observe().to_vec();
        let proposed: Vec<Action> = match controller {
            ControllerKind::None => vec![Action::IDLE; n],
            ControllerKind::Rbc => ep.fallback_actions().to_vec(),
            ControllerKind::Maddpg => {
                let p = policy.ok_or_else(|| RunError::Config("maddpg controller needs a policy".into()))?;
                (0..n)
                    .map(|b| act(p, b, obs[b].as_slice(), None))
                    .collect::<Result<_, _>>()?
            }
        };
        let (o, _, _) = ep.apply(&proposed)?;
        outcomes.push(o);
    }
    Ok(EpisodeResult {
        outcomes,
        stats: ep.finish()?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub sigma: f64,
    pub mean_reward: f64,
    pub community_cost: f64,
    pub critic_loss: f64,
    pub actor_loss: f64,
}

/// Trains a policy for `cfg.episodes` exploratory episodes on clean data.
pub fn train_policy(
    scenario: &ScenarioSpec,
    cfg: &TrainConfig,
    opts: &EpisodeOptions,
    mut progress: impl FnMut(&EpisodeLog),
) -> Result<(PolicyParams<f64>, Vec<EpisodeLog>), RunError> {
    cfg.validate().map_err(RunError::Config)?;
    let mut params = PolicyParams::<f64>::for_scenario(scenario, cfg.seed);
    let mut trainer = Trainer::new(&params, cfg);
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity, cfg.seed ^ 0x5eed_0001);
    let mut noise = NoiseState::new(cfg.seed ^ 0x5eed_0002, cfg.sigma_start);
    let n = scenario.buildings.len();
    let mut logs = Vec::with_capacity(cfg.episodes);
    for episode in 0..cfg.episodes {
        let mut ep = Episode::new(scenario, opts.faults, opts.prefs.clone(), opts.flex.clone());
        let (mut reward_sum, mut cost, mut steps) = (0.0, 0.0, 0usize);
        let (mut closs, mut aloss, mut updates) = (0.0, 0.0, 0usize);
        let mut obs: Vec<Vec<f64>> = ep.observe().iter().map(|o| o.0.clone()).collect();
        while !ep.is_done() {
            let proposed: Vec<Action> = (0..n)
                .map(|b| act(&params, b, &obs[b], Some(&mut noise)))
                .collect::<Result<_, _>>()?;
            let (outcome, vetted, _) = ep.apply(&proposed)?;
            let r = reward(&outcome, cfg);
            let done = ep.is_done();
            let next: Vec<Vec<f64>> = if done {
                obs.clone()
            } else {
                ep.observe().iter().map(|o| o.0.clone()).collect()
            };
            reward_sum += r.iter().sum::<f64>() / n as f64;
            cost += outcome.buildings.iter().map(|f| f.cost()).sum::<f64>();
            buffer.push(Transition {
                obs: std::mem::replace(&mut obs, next.clone()),
                actions: vetted,
                rewards: r,
                next_obs: next,
                done,
            });
            steps += 1;
            if steps % cfg.updates_every == 0 && buffer.len() >= cfg.batch {
                let batch = replay_sample(&mut buffer, cfg.batch)?;
                let l = trainer.train_step(&mut params, &batch)?;
                closs += l.critic;
                aloss += l.actor;
                updates += 1;
            }
        }
        let u = updates.max(1) as f64;
        let log = EpisodeLog {
            episode,
            sigma: noise.sigma,
            mean_reward: reward_sum / steps.max(1) as f64,
            community_cost: cost,
            critic_loss: closs / u,
            actor_loss: aloss / u,
        };
        log::info!(
            "episode {episode}: reward {:.4}, cost {:.2}, critic {:.4}",
            log.mean_reward,
            log.community_cost,
            log.critic_loss
        );
        progress(&log);
        logs.push(log);
        noise.sigma *= cfg.sigma_decay;
    }
    Ok((params, logs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub scenario_hash: String,
    pub controller: ControllerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_config: Option<TrainConfig>,
    pub faults: FaultConfig,
    pub flex: FlexConfig,
    pub code_version: String,
    pub seeds: Seeds,
    pub artifacts: Vec<String>,
    #[serde(default)]
    pub training: Vec<EpisodeLog>,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub scenario: u64,
    pub train: Option<u64>,
    pub faults: u64,
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), RunError> {
    fs::write(path, contents).map_err(io_err(path))
}

fn run_id(parts: &[&str]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0]);
    }
    hex::encode(h.finalize())[..12].to_string()
}

/// Evaluates `controller` and the `none` baseline on the same scenario and
/// writes `audit.jsonl`, `kpi.json` and `kpi.txt` into `out`.
fn evaluate_into(
    scenario: &ScenarioSpec,
    controller: ControllerKind,
    policy: Option<&PolicyParams<f64>>,
    opts: &EpisodeOptions,
    out: &Path,
) -> Result<(KpiReport, EpisodeStats), RunError> {
    let audit = AuditLog::create(out.join(AUDIT_FILE))?;
    let ctrl = run_episode(scenario, controller, policy, opts, Some(audit))?;
    let base = if controller == ControllerKind::None {
        ctrl.outcomes.clone()
    } else {
        run_episode(scenario, ControllerKind::None, None, opts, None)?.outcomes
    };
    let ids: Vec<String> = scenario.buildings.iter().map(|b| b.id.clone()).collect();
    let spd = scenario.grid.steps_per_day();
    let report = normalize_report(
        &controller.to_string(),
        compute_kpis(&ctrl.outcomes, &ids, spd)?,
        compute_kpis(&base, &ids, spd)?,
    )?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_file(&out.join(KPI_JSON_FILE), json + "\n")?;
    write_file(&out.join(KPI_TEXT_FILE), render_table(&report))?;
    log::info!(
        "{controller}: completeness min {:.3} mean {:.3}, {} interventions",
        ctrl.stats.min_completeness,
        ctrl.stats.mean_completeness,
        ctrl.stats.interventions
    );
    Ok((report, ctrl.stats))
}

pub struct TrainOutcome {
    pub dir: PathBuf,
    pub report: KpiReport,
    pub manifest: RunManifest,
}

/// Trains on the scenario, then runs one greedy evaluation episode and
/// persists the complete run directory.
pub fn run_train(
    scenario_path: &Path,
    cfg: &TrainConfig,
    opts: &EpisodeOptions,
    out: &Path,
    progress: impl FnMut(&EpisodeLog),
) -> Result<TrainOutcome, RunError> {
    cfg.validate().map_err(RunError::Config)?;
    let scenario = load_scenario(scenario_path)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let (params, logs) = train_policy(
        &scenario,
        cfg,
        &EpisodeOptions {
            faults: FaultConfig::default(),
            ..opts.clone()
        },
        progress,
    )?;
    save_scenario(&scenario, out.join(SCENARIO_FILE))?;
    let hash = cfg.hash();
    let ckpt = out.join(POLICY_FILE);
    save_checkpoint(&ckpt, &params, &hash).map_err(io_err(&ckpt))?;
    let (report, _) = evaluate_into(&scenario, ControllerKind::Maddpg, Some(&params), opts, out)?;
    let manifest = RunManifest {
        run_id: run_id(&[&scenario.content_hash(), &hash, "maddpg"]),
        scenario_hash: scenario.content_hash(),
        controller: ControllerKind::Maddpg,
        train_config: Some(cfg.clone()),
        faults: opts.faults,
        flex: opts.flex.clone(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        seeds: Seeds {
            scenario: scenario.seed,
            train: Some(cfg.seed),
            faults: opts.faults.seed,
        },
        artifacts: [
            SCENARIO_FILE,
            MANIFEST_FILE,
            POLICY_FILE,
            AUDIT_FILE,
            KPI_JSON_FILE,
            KPI_TEXT_FILE,
        ]
        .iter()
        .map(|s| s.to_string())
        .collect(),
        training: logs,
        created_at: Utc::now(),
    };
    write_file(
        &out.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n",
    )?;
    Ok(TrainOutcome {
        dir: out.to_path_buf(),
        report,
        manifest,
    })
}

/// Where an evaluation takes its scenario and policy from.
pub enum EvalSource<'p> {
    /// A run directory with `scenario.json` and, for `maddpg`, `policy.ckpt`.
    RunDir(&'p Path),
    Files {
        scenario: &'p Path,
        policy: Option<&'p Path>,
    },
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest, RunError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|_| RunError::MissingArtifacts {
        dir: dir.to_path_buf(),
        missing: MANIFEST_FILE.into(),
    })?;
    serde_json::from_str(&text).map_err(|e| RunError::Malformed {
        path,
        message: e.to_string(),
    })
}

/// Runs one deterministic episode of `controller` plus the baseline and
/// writes the evaluation artifacts (and a manifest) into `out`.
pub fn run_evaluate(
    source: EvalSource<'_>,
    controller: ControllerKind,
    opts: &EpisodeOptions,
    out: &Path,
) -> Result<(KpiReport, EpisodeStats), RunError> {
    let (scenario_path, policy_path) = match source {
        EvalSource::RunDir(d) => {
            let sc = d.join(SCENARIO_FILE);
            if !sc.exists() {
                return Err(RunError::MissingArtifacts {
                    dir: d.to_path_buf(),
                    missing: SCENARIO_FILE.into(),
                });
            }
            let pol = d.join(POLICY_FILE);
            (sc, pol.exists().then_some(pol))
        }
        EvalSource::Files { scenario, policy } => (scenario.to_path_buf(), policy.map(Path::to_path_buf)),
    };
    let scenario = load_scenario(&scenario_path)?;
    let policy = match controller {
        ControllerKind::Maddpg => {
            let p = policy_path.ok_or_else(|| RunError::MissingArtifacts {
                dir: out.to_path_buf(),
                missing: POLICY_FILE.into(),
            })?;
            let (params, _) = load_checkpoint::<f64>(&p)?;
            params.check_compatible(&scenario)?;
            Some((params, p))
        }
        _ => None,
    };
    fs::create_dir_all(out).map_err(io_err(out))?;
    let same_dir = scenario_path.parent().is_some_and(|p| p == out);
    if !same_dir {
        save_scenario(&scenario, out.join(SCENARIO_FILE))?;
    }
    if let Some((_, p)) = &policy {
        let dst = out.join(POLICY_FILE);
        if p != &dst {
            fs::copy(p, &dst).map_err(io_err(&dst))?;
        }
    }
    let result = evaluate_into(&scenario, controller, policy.as_ref().map(|(p, _)| p), opts, out)?;
    let prior = read_manifest(out).ok();
    let mut artifacts = vec![SCENARIO_FILE, MANIFEST_FILE, AUDIT_FILE, KPI_JSON_FILE, KPI_TEXT_FILE];
    if policy.is_some() {
        artifacts.insert(2, POLICY_FILE);
    }
    let manifest = RunManifest {
        run_id: run_id(&[
            &scenario.content_hash(),
            &controller.to_string(),
            &format!("{:?}", opts.faults),
        ]),
        scenario_hash: scenario.content_hash(),
        controller,
        train_config: prior.as_ref().and_then(|m| m.train_config.clone()),
        faults: opts.faults,
        flex: opts.flex.clone(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        seeds: Seeds {
            scenario: scenario.seed,
            train: prior.as_ref().and_then(|m| m.seeds.train),
            faults: opts.faults.seed,
        },
        artifacts: artifacts.iter().map(|s| s.to_string()).collect(),
        training: prior.map(|m| m.training).unwrap_or_default(),
        created_at: Utc::now(),
    };
    write_file(
        &out.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n",
    )?;
    Ok(result)
}

/// Loads a run's KPI report and renders the text table.
pub fn run_report(dir: &Path) -> Result<(String, KpiReport), RunError> {
    let path = dir.join(KPI_JSON_FILE);
    let text = fs::read_to_string(&path).map_err(|_| RunError::MissingArtifacts {
        dir: dir.to_path_buf(),
        missing: KPI_JSON_FILE.into(),
    })?;
    let report: KpiReport = serde_json::from_str(&text).map_err(|e| RunError::Malformed {
        path,
        message: e.to_string(),
    })?;
    Ok((render_table(&report), report))
}
