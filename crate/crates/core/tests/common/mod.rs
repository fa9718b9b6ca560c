//! Checks shared by the integration tests and the acceptance report.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use chrono::{Duration, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rec_core::evgateway::{is_legal_transition, EvGateway, MockServer, Scripted, SimClock, StateKind, TokenState};
use rec_core::run::{Episode, FlexConfig, AUDIT_FILE};
use rec_core::scenario::{generate_synthetic, BatterySpec, ScenarioSpec};
use rec_core::supervisor::{battery_cmd_limits, InterventionReason};
use rec_core::telemetry::{read_audit_log, AuditLog};
use rec_core::twin::{Action, FaultConfig};

pub fn scenarios_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

pub fn degraded(seed: u64) -> FaultConfig {
    FaultConfig {
        dropout_rate: 0.1,
        noise_sigma: 0.02,
        skew_s: 30.0,
        seed,
    }
}

/// Two buildings with a battery each; the second charger allows V2G.
pub fn adversarial_scenario(days: usize) -> ScenarioSpec {
    let mut s = generate_synthetic(11, 2, days);
    s.buildings[1].battery = Some(BatterySpec {
        capacity_kwh: 5.0,
        rated_kw: 2.5,
        soc_min: 0.2,
        soc_max: 0.9,
        eta_charge: 0.92,
        eta_discharge: 0.94,
        soc_init: 0.6,
    });
    s.buildings[1].charger.as_mut().unwrap().v2g_enabled = true;
    s
}

fn random_action(rng: &mut ChaCha8Rng) -> Action {
    let mut pick = || match rng.gen_range(0..20) {
        0 => f64::NAN,
        1 => f64::INFINITY,
        2 => -1.0,
        3 => 1.0,
        _ => rng.gen_range(-3.0..3.0),
    };
    Action {
        battery_cmd: pick(),
        ev_cmd: pick(),
    }
}

pub struct SafetySummary {
    pub decisions: usize,
    pub interventions: usize,
    pub reasons: BTreeSet<InterventionReason>,
}

/// Drives a uniformly random, partly non-finite policy through the
/// supervisor on a degraded feed and checks every applied action against
/// the physical envelope and the audit log.
pub fn safety_run(days: usize, seed: u64, dir: &Path) -> Result<SafetySummary, String> {
    let s = adversarial_scenario(days);
    let audit_path = dir.join(AUDIT_FILE);
    let mut ep = Episode::new(&s, degraded(seed), Vec::new(), FlexConfig::default())
        .with_audit(AuditLog::create(&audit_path).map_err(|e| e.to_string())?);
    let dt = s.grid.dt_hours();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut returned = Vec::new();
    let eps = 1e-9;
    while !ep.is_done() {
        ep.observe();
        let before = ep.twin().state().buildings.clone();
        let proposed: Vec<Action> = (0..s.buildings.len()).map(|_| random_action(&mut rng)).collect();
        let (outcome, vetted, ivs) = ep.apply(&proposed).map_err(|e| e.to_string())?;
        let step = outcome.step;
        for (b, spec) in s.buildings.iter().enumerate() {
            let a = vetted[b];
            let flow = &outcome.buildings[b];
            let after = &ep.twin().state().buildings[b];
            if !(a.battery_cmd.is_finite() && a.ev_cmd.is_finite()) {
                return Err(format!("step {step}: non-finite applied action {a:?}"));
            }
            if a.battery_cmd.abs() > 1.0 || a.ev_cmd.abs() > 1.0 {
                return Err(format!("step {step}: rated power exceeded {a:?}"));
            }
            if let (Some(bat), Some(st0), Some(st1)) = (&spec.battery, before[b].battery, after.battery) {
                let (lo, hi) = battery_cmd_limits(bat, st0.soc, dt);
                if a.battery_cmd < lo - eps || a.battery_cmd > hi + eps {
                    return Err(format!(
                        "step {step}: battery command {} outside [{lo}, {hi}]",
                        a.battery_cmd
                    ));
                }
                if st1.soc < bat.soc_min - eps || st1.soc > bat.soc_max + eps {
                    return Err(format!("step {step}: battery SoC {}", st1.soc));
                }
                if flow.battery_ac.abs() > bat.rated_kw * dt + eps {
                    return Err(format!("step {step}: battery power {}", flow.battery_ac));
                }
            }
            let charger = spec.charger.as_ref().expect("every building has a charger");
            if !charger.v2g_enabled && a.ev_cmd < 0.0 {
                return Err(format!("step {step}: discharge without V2G"));
            }
            if flow.ev_ac.abs() > charger.rated_kw * dt + eps {
                return Err(format!("step {step}: charger power {}", flow.ev_ac));
            }
            let same_session = before[b].ev.connected && after.ev.session == before[b].ev.session;
            if same_session
                && (after.ev.soc > 1.0 + eps || (a.ev_cmd < 0.0 && after.ev.soc < before[b].ev.reserve - eps))
            {
                return Err(format!(
                    "step {step}: EV SoC {} reserve {}",
                    after.ev.soc, before[b].ev.reserve
                ));
            }
            let changed = a.battery_cmd.to_bits() != proposed[b].battery_cmd.to_bits()
                || a.ev_cmd.to_bits() != proposed[b].ev_cmd.to_bits();
            if changed && !ivs.iter().any(|iv| iv.building == spec.id) {
                return Err(format!("step {step}: silent override for {}", spec.id));
            }
        }
        returned.extend(ivs);
    }
    let decisions = ep.stats().steps * s.buildings.len();
    ep.finish().map_err(|e| e.to_string())?;
    let records = read_audit_log(&audit_path).map_err(|e| e.to_string())?;
    if records.len() != decisions {
        return Err(format!("{} audit records for {decisions} decisions", records.len()));
    }
    let audited: Vec<_> = records.iter().flat_map(|r| r.interventions.iter().cloned()).collect();
    let same = |a: &Action, b: &Action| {
        let eq = |x: f64, y: f64| x.to_bits() == y.to_bits() || (x.is_nan() && y.is_nan());
        eq(a.battery_cmd, b.battery_cmd) && eq(a.ev_cmd, b.ev_cmd)
    };
    let matches = audited.len() == returned.len()
        && audited.iter().zip(&returned).all(|(a, b)| {
            (a.step, &a.building, a.reason) == (b.step, &b.building, b.reason)
                && same(&a.proposed, &b.proposed)
                && same(&a.applied, &b.applied)
        });
    if !matches {
        return Err(format!(
            "{} audited interventions, {} applied",
            audited.len(),
            returned.len()
        ));
    }
    for r in &records {
        let changed = r.proposed_action.battery_cmd.to_bits() != r.vetted_action.battery_cmd.to_bits()
            || r.proposed_action.ev_cmd.to_bits() != r.vetted_action.ev_cmd.to_bits();
        if changed != !r.interventions.is_empty() {
            return Err(format!(
                "record {} {} disagrees with its interventions",
                r.step, r.building
            ));
        }
    }
    Ok(SafetySummary {
        decisions,
        interventions: returned.len(),
        reasons: returned.iter().map(|iv| iv.reason).collect(),
    })
}

#[derive(Debug, Clone, Copy)]
pub enum Event {
    Begin,
    Consent,
    Deny,
    Expire,
    Refresh,
    RefreshRejected,
    Poll,
    PollRejected,
    PollTimeout,
    Unlink,
}

pub const EVENTS: [Event; 10] = [
    Event::Begin,
    Event::Consent,
    Event::Deny,
    Event::Expire,
    Event::Refresh,
    Event::RefreshRejected,
    Event::Poll,
    Event::PollRejected,
    Event::PollTimeout,
    Event::Unlink,
];

pub const TOKEN_LIFETIME_S: i64 = 300;

pub fn gateway() -> (EvGateway, MockServer, SimClock) {
    let clock = SimClock::new(Utc.with_ymd_and_hms(2024, 3, 1, 8, 0, 0).unwrap());
    let server = MockServer::new();
    let gw = EvGateway::new("B1", "acme", server.clone(), clock.clone(), 9);
    (gw, server, clock)
}

pub fn pending_nonce(gw: &EvGateway) -> String {
    match gw.state() {
        TokenState::PendingAuth { nonce, .. } => nonce.clone(),
        _ => "no-pending-authorization".into(),
    }
}

pub fn linked_gateway() -> (EvGateway, MockServer, SimClock) {
    let (mut gw, server, clock) = gateway();
    gw.begin_authorization().unwrap();
    let n = pending_nonce(&gw);
    server.script_token(Scripted::Token {
        expires_in_s: TOKEN_LIFETIME_S,
    });
    gw.exchange_code("code-ok", &n).unwrap();
    (gw, server, clock)
}

/// Applies one event; returns whether a poll produced a snapshot.
fn apply(gw: &mut EvGateway, server: &MockServer, clock: &SimClock, e: Event) -> Option<bool> {
    match e {
        Event::Begin => {
            let _ = gw.begin_authorization();
        }
        Event::Consent | Event::Deny => {
            server.script_token(match e {
                Event::Consent => Scripted::Token {
                    expires_in_s: TOKEN_LIFETIME_S,
                },
                _ => Scripted::AccessDenied,
            });
            let n = pending_nonce(gw);
            let _ = gw.exchange_code("code", &n);
        }
        Event::Expire => clock.advance(Duration::seconds(TOKEN_LIFETIME_S + 1)),
        Event::Refresh => {
            let _ = gw.refresh_token();
        }
        Event::RefreshRejected => {
            server.script_token(Scripted::InvalidGrant);
            let _ = gw.refresh_token();
        }
        Event::Poll | Event::PollRejected | Event::PollTimeout => {
            match e {
                Event::PollRejected => server.script_snapshot(Scripted::Unauthorized),
                Event::PollTimeout => server.script_snapshot(Scripted::Delay(5_000)),
                _ => {}
            }
            return Some(gw.poll_snapshot().is_ok());
        }
        Event::Unlink => gw.unlink(),
    }
    None
}

pub struct Enumeration {
    pub sequences: usize,
    pub successful_polls: usize,
    pub states_reached: BTreeSet<StateKind>,
}

/// Runs every event sequence of length `len`; since each sequence passes
/// through all its prefixes this covers every shorter sequence too.
pub fn enumerate_sequences(len: u32) -> Result<Enumeration, String> {
    let k = EVENTS.len();
    let total = k.pow(len);
    let mut out = Enumeration {
        sequences: total,
        successful_polls: 0,
        states_reached: BTreeSet::new(),
    };
    for code in 0..total {
        let (mut gw, server, clock) = gateway();
        let mut c = code;
        for _ in 0..len {
            let e = EVENTS[c % k];
            c /= k;
            let before = gw.state().kind();
            let polled = apply(&mut gw, &server, &clock, e);
            let after = gw.state().kind();
            if polled == Some(true) {
                out.successful_polls += 1;
                if after != StateKind::Linked {
                    return Err(format!("sequence {code}: snapshot served in {after:?}"));
                }
            }
            if before == StateKind::Unlinked && !matches!(e, Event::Begin) && after != StateKind::Unlinked {
                return Err(format!("sequence {code}: {e:?} left Unlinked"));
            }
        }
        if let Some((from, to)) = gw.transitions().iter().find(|(f, t)| !is_legal_transition(*f, *t)) {
            return Err(format!("sequence {code}: illegal {from:?} -> {to:?}"));
        }
        // states passed through inside a call count as visited
        out.states_reached.extend(gw.transitions().iter().map(|(_, to)| *to));
    }
    Ok(out)
}

/// Polls with an expired token and counts upstream requests.
pub fn expired_poll() -> Result<(), String> {
    let (mut gw, server, clock) = linked_gateway();
    clock.advance(Duration::seconds(TOKEN_LIFETIME_S + 10));
    let (calls, refreshes) = (server.calls(), server.refresh_calls());
    let snap = gw.poll_snapshot().map_err(|e| e.to_string())?;
    let r = server.refresh_calls() - refreshes;
    let c = server.calls() - calls;
    if snap.stale || r != 1 || c != 2 || gw.state().kind() != StateKind::Linked {
        return Err(format!(
            "{r} refreshes, {c} requests, stale {}, state {:?}",
            snap.stale,
            gw.state().kind()
        ));
    }
    Ok(())
}
