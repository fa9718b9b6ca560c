//! Fail-safe supervisor. Every proposed action passes through
//! [`vet_action`] before it reaches the plant; the result always satisfies
//! the safety envelope and every change is reported as an [`Intervention`].

use serde::{Deserialize, Serialize};

use crate::scenario::{BatterySpec, ChargerSpec, ScenarioSpec};
use crate::twin::Action;

pub const DEFAULT_MAX_AGE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionReason {
    OverratedPower,
    SocBound,
    EvReserve,
    InfeasibleTarget,
    StaleData,
    InvalidValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intervention {
    pub step: usize,
    pub building: String,
    pub reason: InterventionReason,
    pub proposed: Action,
    pub applied: Action,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildingEnvelope {
    pub id: String,
    pub battery: Option<BatterySpec>,
    pub charger: Option<ChargerSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SafetyEnvelope {
    pub buildings: Vec<BuildingEnvelope>,
    pub dt_hours: f64,
    /// Oldest acceptable observation, in intervals.
    pub max_age: usize,
    /// Multiplier on deliverable energy in the feasibility check.
    pub feasibility_margin: f64,
}

impl SafetyEnvelope {
    pub fn from_scenario(s: &ScenarioSpec) -> Self {
        Self {
            buildings: s
                .buildings
                .iter()
                .map(|b| BuildingEnvelope {
                    id: b.id.clone(),
                    battery: b.battery.clone(),
                    charger: b.charger.clone(),
                })
                .collect(),
            dt_hours: s.grid.dt_hours(),
            max_age: DEFAULT_MAX_AGE,
            feasibility_margin: 1.0,
        }
    }
}

/// Connected vehicle as the supervisor sees it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvView {
    pub soc: f64,
    pub reserve: f64,
    pub capacity_kwh: f64,
    pub target_soc: f64,
    pub departure_step: usize,
}

/// Plant state relevant to one building's decision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VetInput {
    pub step: usize,
    pub battery_soc: Option<f64>,
    pub ev: Option<EvView>,
    /// Intervals since the freshest state reading.
    pub observation_age: usize,
    /// Conservative action used when the proposal cannot be trusted.
    pub fallback: Action,
}

/// Command range keeping a battery inside its SoC window after one step,
/// under the same arithmetic the twin applies.
pub fn battery_cmd_limits(b: &BatterySpec, soc: f64, dt_h: f64) -> (f64, f64) {
    let full = b.rated_kw * dt_h;
    let up = (b.soc_max - soc).max(0.0) * b.capacity_kwh / (full * b.eta_charge);
    let down = (soc - b.soc_min).max(0.0) * b.capacity_kwh * b.eta_discharge / full;
    (-down.min(1.0), up.min(1.0))
}

/// Command range for a connected vehicle: never above full, never below
/// the reserve, no discharge without V2G.
pub fn ev_cmd_limits(c: &ChargerSpec, ev: &EvView, dt_h: f64) -> (f64, f64) {
    let full = c.rated_kw * dt_h;
    let up = (1.0 - ev.soc).max(0.0) * ev.capacity_kwh / (full * c.eta_charge);
    let down = if c.v2g_enabled {
        (ev.soc - ev.reserve).max(0.0) * ev.capacity_kwh * c.eta_discharge / full
    } else {
        0.0
    };
    (-down.min(1.0), up.min(1.0))
}

/// Whether a vehicle idle for this interval could still reach its target
/// by departure at full power. `remaining` counts the intervals after the
/// current one. Returns true when charging must start now.
pub fn feasibility_watchdog(ev: &EvView, charger: &ChargerSpec, remaining: usize, dt_h: f64, margin: f64) -> bool {
    let needed = (ev.target_soc - ev.soc).max(0.0) * ev.capacity_kwh;
    if needed <= 0.0 {
        return false;
    }
    let deliverable = charger.rated_kw * dt_h * charger.eta_charge * remaining as f64 * margin;
    needed > deliverable
}

fn note(reasons: &mut Vec<InterventionReason>, r: InterventionReason) {
    if !reasons.contains(&r) {
        reasons.push(r);
    }
}

/// Vets one building's proposal. Checks run in a fixed order: invalid
/// values, stale observations, power rating, SoC projection, feasibility.
pub fn vet_action(
    proposed: Action,
    input: &VetInput,
    env: &SafetyEnvelope,
    building: usize,
) -> (Action, Vec<Intervention>) {
    let b = &env.buildings[building];
    let dt = env.dt_hours;
    let mut reasons = Vec::new();
    let mut a = proposed;

    if !a.is_finite() {
        note(&mut reasons, InterventionReason::InvalidValue);
        a = input.fallback;
    } else if input.observation_age > env.max_age {
        note(&mut reasons, InterventionReason::StaleData);
        a = input.fallback;
    }
    // a fallback that is itself unusable degrades to idle
    if !a.is_finite() {
        a = Action::IDLE;
    }

    let ev_lo = match &b.charger {
        Some(c) if c.v2g_enabled => -1.0,
        _ => 0.0,
    };
    let clamped = Action::new(a.battery_cmd.clamp(-1.0, 1.0), a.ev_cmd.clamp(ev_lo, 1.0));
    if clamped != a {
        note(&mut reasons, InterventionReason::OverratedPower);
        a = clamped;
    }

    if let (Some(spec), Some(soc)) = (&b.battery, input.battery_soc) {
        let (lo, hi) = battery_cmd_limits(spec, soc, dt);
        if a.battery_cmd > hi.max(0.0) {
            a.battery_cmd = hi.max(0.0);
            note(&mut reasons, InterventionReason::SocBound);
        } else if a.battery_cmd < lo.min(0.0) {
            a.battery_cmd = lo.min(0.0);
            note(&mut reasons, InterventionReason::SocBound);
        }
    }

    if let (Some(c), Some(ev)) = (&b.charger, &input.ev) {
        let (lo, hi) = ev_cmd_limits(c, ev, dt);
        if a.ev_cmd > hi.max(0.0) {
            a.ev_cmd = hi.max(0.0);
            note(&mut reasons, InterventionReason::SocBound);
        } else if a.ev_cmd < lo.min(0.0) {
            a.ev_cmd = lo.min(0.0);
            note(&mut reasons, InterventionReason::EvReserve);
        }
        let remaining = ev.departure_step.saturating_sub(input.step + 1);
        if feasibility_watchdog(ev, c, remaining, dt, env.feasibility_margin) {
            let full = hi.max(0.0);
            if a.ev_cmd != full {
                a.ev_cmd = full;
                note(&mut reasons, InterventionReason::InfeasibleTarget);
            }
        }
    }

    let interventions = reasons
        .into_iter()
        .map(|reason| Intervention {
            step: input.step,
            building: b.id.clone(),
            reason,
            proposed,
            applied: a,
        })
        .collect();
    (a, interventions)
}
