//! Discrete-time digital twin of the community: storage and EV charging
//! physics, per-building energy balance, grid exchange and tariffs, plus the
//! sensor feed and the fault injector that degrades it.

use chrono::Duration;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenario::{BatterySpec, ChargerSpec, EvSessionSpec, ScenarioSpec};
use crate::telemetry::{Metric, RawReading};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TwinError {
    #[error("episode over: all {0} steps simulated")]
    EpisodeOver(usize),
    #[error("expected {expected} actions, got {got}")]
    ActionCount { expected: usize, got: usize },
}

/// Normalized set-points for one building. Positive values charge.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Action {
    #[serde(with = "crate::float_repr")]
    pub battery_cmd: f64,
    #[serde(with = "crate::float_repr")]
    pub ev_cmd: f64,
}

impl Action {
    pub const IDLE: Action = Action {
        battery_cmd: 0.0,
        ev_cmd: 0.0,
    };

    pub fn new(battery_cmd: f64, ev_cmd: f64) -> Self {
        Self { battery_cmd, ev_cmd }
    }

    pub fn is_finite(&self) -> bool {
        self.battery_cmd.is_finite() && self.ev_cmd.is_finite()
    }
}

fn clip_cmd(cmd: f64, lo: f64) -> f64 {
    if cmd.is_nan() {
        0.0
    } else {
        cmd.clamp(lo, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatteryState {
    pub soc: f64,
}

/// Advances a stationary battery by one interval.
///
/// Returns the new state and the AC-side energy exchanged (kWh, positive
/// when charging). Commands are clipped to `[-1, 1]` and to the SoC window,
/// never rejected.
pub fn step_battery(b: &BatterySpec, state: BatteryState, cmd: f64, dt_h: f64) -> (BatteryState, f64) {
    let cmd = clip_cmd(cmd, -1.0);
    let soc = state.soc;
    if cmd > 0.0 {
        let headroom = (b.soc_max - soc).max(0.0) * b.capacity_kwh;
        let gain = (cmd * b.rated_kw * dt_h * b.eta_charge).min(headroom);
        let soc = (soc + gain / b.capacity_kwh).min(b.soc_max.max(soc));
        (BatteryState { soc }, gain / b.eta_charge)
    } else if cmd < 0.0 {
        let available = (soc - b.soc_min).max(0.0) * b.capacity_kwh;
        let draw = (-cmd * b.rated_kw * dt_h / b.eta_discharge).min(available);
        let soc = (soc - draw / b.capacity_kwh).max(b.soc_min.min(soc));
        (BatteryState { soc }, -draw * b.eta_discharge)
    } else {
        (state, 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvState {
    pub connected: bool,
    pub soc: f64,
    /// Index of the active session in the building's arrival-ordered schedule.
    pub session: Option<usize>,
    /// Discharge floor while connected (arrival SoC with V2G, else 0).
    pub reserve: f64,
    pub unmet_kwh_at_departure: f64,
}

impl Default for EvState {
    fn default() -> Self {
        Self {
            connected: false,
            soc: 0.0,
            session: None,
            reserve: 0.0,
            unmet_kwh_at_departure: 0.0,
        }
    }
}

impl EvState {
    /// Handles a departure and/or arrival scheduled at `step`. Returns the
    /// energy shortfall realized by a departure at this step.
    pub fn advance_schedule(&mut self, c: &ChargerSpec, sessions: &[EvSessionSpec], step: usize) -> f64 {
        let mut unmet = 0.0;
        if let Some(i) = self.session {
            let s = &sessions[i];
            if step >= s.departure_step {
                unmet = (s.soc_target - self.soc).max(0.0) * s.ev_capacity_kwh;
                self.unmet_kwh_at_departure += unmet;
                self.connected = false;
                self.session = None;
                self.reserve = 0.0;
            }
        }
        if self.session.is_none() {
            if let Some(i) = sessions.iter().position(|s| s.arrival_step == step) {
                let s = &sessions[i];
                self.connected = true;
                self.session = Some(i);
                self.soc = s.soc_arrival;
                self.reserve = if c.v2g_enabled { s.soc_arrival } else { 0.0 };
            }
        }
        unmet
    }

    /// Capacity of the connected vehicle, if any.
    pub fn capacity(&self, sessions: &[EvSessionSpec]) -> Option<f64> {
        self.session.map(|i| sessions[i].ev_capacity_kwh)
    }
}

/// Applies a charging command to the connected vehicle (same arithmetic as
/// [`step_battery`], SoC window `[reserve, 1]`). Returns the AC-side energy.
pub fn charge_ev(c: &ChargerSpec, s: &mut EvState, capacity_kwh: f64, cmd: f64, dt_h: f64) -> f64 {
    if !s.connected {
        return 0.0;
    }
    let lo = if c.v2g_enabled { -1.0 } else { 0.0 };
    let cmd = clip_cmd(cmd, lo);
    if cmd > 0.0 {
        let headroom = (1.0 - s.soc).max(0.0) * capacity_kwh;
        let gain = (cmd * c.rated_kw * dt_h * c.eta_charge).min(headroom);
        s.soc = (s.soc + gain / capacity_kwh).min(1.0f64.max(s.soc));
        gain / c.eta_charge
    } else if cmd < 0.0 {
        let available = (s.soc - s.reserve).max(0.0) * capacity_kwh;
        let draw = (-cmd * c.rated_kw * dt_h / c.eta_discharge).min(available);
        s.soc = (s.soc - draw / capacity_kwh).max(s.reserve.min(s.soc));
        -draw * c.eta_discharge
    } else {
        0.0
    }
}

/// One interval for one charge point: schedule bookkeeping, then the
/// command. Returns the new state, AC energy and the shortfall realized by
/// a departure at this step.
pub fn step_ev(
    c: &ChargerSpec,
    state: &EvState,
    sessions: &[EvSessionSpec],
    step: usize,
    cmd: f64,
    dt_h: f64,
) -> (EvState, f64, f64) {
    let mut s = state.clone();
    let unmet = s.advance_schedule(c, sessions, step);
    let ac = match s.capacity(sessions) {
        Some(cap) => charge_ev(c, &mut s, cap, cmd, dt_h),
        None => 0.0,
    };
    (s, ac, unmet)
}

/// Energy flows of one building over one interval (kWh unless noted).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BuildingFlow {
    pub load: f64,
    pub pv: f64,
    pub battery_ac: f64,
    pub ev_ac: f64,
    /// Signed grid exchange, positive when importing.
    pub net: f64,
    pub import_cost: f64,
    pub export_credit: f64,
    /// EV shortfall realized by a departure during this interval.
    pub unmet_kwh: f64,
}

impl BuildingFlow {
    pub fn cost(&self) -> f64 {
        self.import_cost - self.export_credit
    }

    /// Consumption seen behind the meter: load plus any charging.
    pub fn consumption(&self) -> f64 {
        self.load + self.battery_ac.max(0.0) + self.ev_ac.max(0.0)
    }
}

/// Grid exchange of the whole community for one interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub step: usize,
    pub buildings: Vec<BuildingFlow>,
    pub community_kwh: f64,
}

/// Mutable per-building asset state.
#[derive(Debug, Clone, PartialEq)]
pub struct BuildingState {
    pub battery: Option<BatteryState>,
    pub ev: EvState,
}

/// Advances one building: `net = load - pv + battery_ac + ev_ac`.
pub fn step_building(
    scenario: &ScenarioSpec,
    building: usize,
    sessions: &[EvSessionSpec],
    state: &BuildingState,
    action: Action,
    step: usize,
) -> (BuildingState, BuildingFlow) {
    let spec = &scenario.buildings[building];
    let dt_h = scenario.grid.dt_hours();
    let load = spec.load_profile.at(step);
    let pv = spec.pv_at(step);
    let (battery, battery_ac) = match (&spec.battery, state.battery) {
        (Some(b), Some(st)) => {
            let (st, ac) = step_battery(b, st, action.battery_cmd, dt_h);
            (Some(st), ac)
        }
        _ => (state.battery, 0.0),
    };
    let (ev, ev_ac, unmet_kwh) = match &spec.charger {
        Some(c) => step_ev(c, &state.ev, sessions, step, action.ev_cmd, dt_h),
        None => (state.ev.clone(), 0.0, 0.0),
    };
    let net = load - pv + battery_ac + ev_ac;
    let import_cost = scenario.tariff.import_at(step) * net.max(0.0);
    let export_credit = scenario.tariff.export_at(step) * (-net).max(0.0);
    (
        BuildingState { battery, ev },
        BuildingFlow {
            load,
            pv,
            battery_ac,
            ev_ac,
            net,
            import_cost,
            export_credit,
            unmet_kwh,
        },
    )
}

/// Full twin state at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub step: usize,
    pub buildings: Vec<BuildingState>,
    pub history: Vec<StepOutcome>,
}

/// The community twin. Deterministic: the same scenario and action sequence
/// always produce bit-identical outcomes.
pub struct Twin<'a> {
    scenario: &'a ScenarioSpec,
    sessions: Vec<Vec<EvSessionSpec>>,
    state: SimState,
}

impl<'a> Twin<'a> {
    pub fn new(scenario: &'a ScenarioSpec) -> Self {
        let sessions: Vec<_> = scenario
            .buildings
            .iter()
            .map(|b| scenario.sessions_for(&b.id))
            .collect();
        let mut buildings: Vec<_> = scenario
            .buildings
            .iter()
            .map(|b| BuildingState {
                battery: b.battery.as_ref().map(|bat| BatteryState { soc: bat.soc_init }),
                ev: EvState::default(),
            })
            .collect();
        // Vehicles arriving at step 0 are plugged in before the first decision.
        for (i, b) in scenario.buildings.iter().enumerate() {
            if let Some(c) = &b.charger {
                buildings[i].ev.advance_schedule(c, &sessions[i], 0);
            }
        }
        Self {
            scenario,
            sessions,
            state: SimState {
                step: 0,
                buildings,
                history: Vec::new(),
            },
        }
    }

    pub fn scenario(&self) -> &'a ScenarioSpec {
        self.scenario
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn step(&self) -> usize {
        self.state.step
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.scenario.grid.steps
    }

    pub fn sessions(&self, building: usize) -> &[EvSessionSpec] {
        &self.sessions[building]
    }

    /// Session currently plugged in at `building`, if any.
    pub fn active_session(&self, building: usize) -> Option<&EvSessionSpec> {
        self.state.buildings[building]
            .ev
            .session
            .map(|i| &self.sessions[building][i])
    }

    /// Advances every building by one interval.
    pub fn step_community(&mut self, actions: &[Action]) -> Result<&StepOutcome, TwinError> {
        let steps = self.scenario.grid.steps;
        let step = self.state.step;
        if step >= steps {
            return Err(TwinError::EpisodeOver(steps));
        }
        if actions.len() != self.scenario.buildings.len() {
            return Err(TwinError::ActionCount {
                expected: self.scenario.buildings.len(),
                got: actions.len(),
            });
        }
        let mut flows = Vec::with_capacity(actions.len());
        for (i, action) in actions.iter().enumerate() {
            let (next, flow) = step_building(
                self.scenario,
                i,
                &self.sessions[i],
                &self.state.buildings[i],
                *action,
                step,
            );
            self.state.buildings[i] = next;
            flows.push(flow);
        }
        self.state.step += 1;
        let next = self.state.step;
        // Schedule changes at the next boundary; a departure there is realized
        // in this interval's outcome.
        for (i, b) in self.scenario.buildings.iter().enumerate() {
            if let Some(c) = &b.charger {
                let unmet = self.state.buildings[i].ev.advance_schedule(c, &self.sessions[i], next);
                flows[i].unmet_kwh += unmet;
            }
        }
        let community_kwh = flows.iter().map(|f| f.net).sum();
        self.state.history.push(StepOutcome {
            step,
            buildings: flows,
            community_kwh,
        });
        Ok(self.state.history.last().expect("just pushed"))
    }

    /// State readings at the start of the current step: battery SoC and the
    /// SoC of any connected vehicle. Stamped 90 s into the interval.
    pub fn state_readings(&self) -> Vec<RawReading> {
        let step = self.state.step;
        let ts = self.scenario.grid.instant(step) + Duration::seconds(90);
        let mut out = Vec::new();
        for (b, st) in self.scenario.buildings.iter().zip(&self.state.buildings) {
            if let Some(bat) = st.battery {
                out.push(RawReading::new(&b.id, Metric::BatterySoc, ts, bat.soc));
            }
            if st.ev.connected {
                out.push(RawReading::new(&b.id, Metric::EvSoc, ts, st.ev.soc));
            }
        }
        out
    }

    /// Metered flows of a completed interval, stamped at the interval end.
    pub fn flow_readings(&self, outcome: &StepOutcome) -> Vec<RawReading> {
        let ts = self.scenario.grid.instant(outcome.step + 1);
        let dt_h = self.scenario.grid.dt_hours();
        let mut out = Vec::new();
        for (b, f) in self.scenario.buildings.iter().zip(&outcome.buildings) {
            out.push(RawReading::new(&b.id, Metric::LoadKwh, ts, f.load));
            if b.pv.is_some() {
                out.push(RawReading::new(&b.id, Metric::PvKwh, ts, f.pv));
            }
            if b.charger.is_some() {
                out.push(RawReading::new(&b.id, Metric::EvPowerKw, ts, f.ev_ac / dt_h));
            }
        }
        out
    }
}

/// Data-quality degradation applied to a reading stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultConfig {
    pub dropout_rate: f64,
    /// Relative standard deviation of multiplicative Gaussian noise.
    pub noise_sigma: f64,
    /// Maximum absolute timestamp shift, seconds.
    pub skew_s: f64,
    pub seed: u64,
}

impl Default for FaultConfig {
    fn default() -> Self {
        Self {
            dropout_rate: 0.0,
            noise_sigma: 0.0,
            skew_s: 0.0,
            seed: 0,
        }
    }
}

impl FaultConfig {
    pub fn is_clean(&self) -> bool {
        self.dropout_rate == 0.0 && self.noise_sigma == 0.0 && self.skew_s == 0.0
    }
}

/// Stateful injector so that a stream degraded in chunks matches the same
/// stream degraded at once.
pub struct FaultInjector {
    cfg: FaultConfig,
    rng: ChaCha8Rng,
}

impl FaultInjector {
    pub fn new(cfg: FaultConfig) -> Self {
        Self {
            cfg,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        }
    }

    pub fn degrade(&mut self, feed: impl IntoIterator<Item = RawReading>) -> Vec<RawReading> {
        let cfg = self.cfg;
        let mut out = Vec::new();
        for mut r in feed {
            let u: f64 = self.rng.gen();
            let z: f64 = self.rng.sample(StandardNormal);
            let shift: f64 = self.rng.gen_range(-1.0..=1.0);
            if u < cfg.dropout_rate {
                continue;
            }
            if cfg.noise_sigma > 0.0 {
                r.value *= 1.0 + cfg.noise_sigma * z;
            }
            if cfg.skew_s > 0.0 {
                r.timestamp += Duration::milliseconds((shift * cfg.skew_s * 1000.0).round() as i64);
            }
            out.push(r);
        }
        out
    }
}

/// Drops, perturbs and skews readings independently; deterministic in the seed.
pub fn inject_faults(feed: impl IntoIterator<Item = RawReading>, cfg: FaultConfig) -> Vec<RawReading> {
    FaultInjector::new(cfg).degrade(feed)
}
