//! Per-building EV flexibility: empirical intervals for arrival time,
//! plug-in duration and requested energy, pessimistic defaults while the
//! history is thin, and user-declared preferences on top.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chrono::{DateTime, Datelike, NaiveDate, Timelike, Utc, Weekday};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenario::{EvSessionSpec, ScenarioSpec, TimeGrid};

pub const DEFAULT_CONFIDENCE: f64 = 0.9;
pub const DEFAULT_MIN_SAMPLES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DayType {
    Weekday,
    Weekend,
    Holiday,
}

impl DayType {
    pub fn of(date: NaiveDate, holidays: &[NaiveDate]) -> Self {
        if holidays.contains(&date) {
            DayType::Holiday
        } else if matches!(date.weekday(), Weekday::Sat | Weekday::Sun) {
            DayType::Weekend
        } else {
            DayType::Weekday
        }
    }
}

/// A finished plug-in session as observed at the charge point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletedSession {
    pub id: String,
    pub building: String,
    pub day_type: DayType,
    /// Minutes since local midnight.
    pub arrival_min: f64,
    pub duration_min: f64,
    pub energy_kwh: f64,
}

impl CompletedSession {
    /// Derives the record from a scheduled session. Energy is what the
    /// driver asked for (target minus arrival SoC).
    pub fn from_spec(s: &EvSessionSpec, grid: &TimeGrid, holidays: &[NaiveDate]) -> Self {
        let t = grid.instant(s.arrival_step);
        Self {
            id: s.id.clone(),
            building: s.building.clone(),
            day_type: DayType::of(t.date_naive(), holidays),
            arrival_min: f64::from(t.hour() * 60 + t.minute()),
            duration_min: (s.departure_step - s.arrival_step) as f64 * f64::from(grid.interval_minutes),
            energy_kwh: ((s.soc_target - s.soc_arrival) * s.ev_capacity_kwh).max(0.0),
        }
    }

    fn is_valid(&self) -> bool {
        self.arrival_min.is_finite()
            && self.duration_min.is_finite()
            && self.energy_kwh.is_finite()
            && self.duration_min > 0.0
            && self.energy_kwh >= 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub arrival_min: f64,
    pub duration_min: f64,
    pub energy_kwh: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SessionHistory {
    buckets: BTreeMap<(String, DayType), Vec<Sample>>,
    seen: BTreeSet<String>,
}

impl SessionHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn samples(&self, building: &str, day_type: DayType) -> &[Sample] {
        self.buckets
            .get(&(building.to_string(), day_type))
            .map_or(&[], |v| v.as_slice())
    }

    pub fn count(&self, building: &str, day_type: DayType) -> usize {
        self.samples(building, day_type).len()
    }

    /// Records a completed session once; repeated ids and invalid entries
    /// are ignored. Returns whether the history changed.
    pub fn record(&mut self, s: &CompletedSession) -> bool {
        if !s.is_valid() || self.seen.contains(&s.id) {
            return false;
        }
        self.seen.insert(s.id.clone());
        self.buckets
            .entry((s.building.clone(), s.day_type))
            .or_default()
            .push(Sample {
                arrival_min: s.arrival_min,
                duration_min: s.duration_min,
                energy_kwh: s.energy_kwh,
            });
        true
    }
}

pub fn update_history(mut h: SessionHistory, s: &CompletedSession) -> SessionHistory {
    h.record(s);
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    Estimated,
    PessimisticDefault,
    UserOverride,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlexEstimate {
    pub day_type: DayType,
    pub confidence: f64,
    pub arrival_min: Interval,
    pub duration_min: Interval,
    pub energy_kwh: Interval,
    pub basis: Basis,
    pub sample_count: usize,
}

/// Values assumed when a building has no history at all.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlexDefaults {
    pub arrival_min: f64,
    pub duration_min: f64,
    pub energy_kwh: f64,
}

impl Default for FlexDefaults {
    fn default() -> Self {
        Self {
            arrival_min: 1080.0,
            duration_min: 600.0,
            energy_kwh: 40.0,
        }
    }
}

/// 1-indexed nearest-rank positions of a central interval at confidence `c`.
pub fn rank_bounds(n: usize, c: f64) -> (usize, usize) {
    let nf = n as f64;
    let lo = (nf * (1.0 - c) / 2.0).ceil() as usize;
    let hi = (nf * (1.0 + c) / 2.0).ceil() as usize;
    (lo.clamp(1, n), hi.clamp(1, n))
}

/// Nearest-rank central interval of `values`.
pub fn nearest_rank_interval(values: &[f64], c: f64) -> Interval {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let (lo, hi) = rank_bounds(v.len(), c);
    Interval {
        lo: v[lo - 1],
        hi: v[hi - 1],
    }
}

fn fold(values: impl Iterator<Item = f64>, f: fn(f64, f64) -> f64) -> Option<f64> {
    values.reduce(f)
}

/// Interval estimate for one building and day type. With fewer than
/// `n_min` samples the estimate is pessimistic: earliest observed arrival,
/// largest observed energy and a duration range from the shortest to the
/// longest observed stay, so consumers reading `duration_min.lo` plan for the
/// earliest plausible departure.
pub fn estimate_flexibility(
    h: &SessionHistory,
    building: &str,
    day_type: DayType,
    c: f64,
    n_min: usize,
    defaults: &FlexDefaults,
) -> FlexEstimate {
    assert!(c > 0.0 && c < 1.0, "confidence must lie in (0, 1)");
    let s = h.samples(building, day_type);
    let n = s.len();
    let pick = |f: fn(&Sample) -> f64| s.iter().map(f).collect::<Vec<_>>();
    if n >= n_min.max(1) {
        return FlexEstimate {
            day_type,
            confidence: c,
            arrival_min: nearest_rank_interval(&pick(|x| x.arrival_min), c),
            duration_min: nearest_rank_interval(&pick(|x| x.duration_min), c),
            energy_kwh: nearest_rank_interval(&pick(|x| x.energy_kwh), c),
            basis: Basis::Estimated,
            sample_count: n,
        };
    }
    let arrival = fold(s.iter().map(|x| x.arrival_min), f64::min).unwrap_or(defaults.arrival_min);
    let energy = fold(s.iter().map(|x| x.energy_kwh), f64::max).unwrap_or(defaults.energy_kwh);
    let duration = Interval {
        lo: fold(s.iter().map(|x| x.duration_min), f64::min).unwrap_or(defaults.duration_min),
        hi: fold(s.iter().map(|x| x.duration_min), f64::max).unwrap_or(defaults.duration_min),
    };
    FlexEstimate {
        day_type,
        confidence: c,
        arrival_min: Interval::point(arrival),
        duration_min: duration,
        energy_kwh: Interval::point(energy),
        basis: Basis::PessimisticDefault,
        sample_count: n,
    }
}

/// Declarations a driver may make for the session arriving on `date`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserPreference {
    pub building: String,
    pub date: NaiveDate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub departure: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_soc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub earliest_start: Option<DateTime<Utc>>,
}

#[derive(Debug, Error)]
pub enum PreferenceError {
    #[error("preferences {path}: {message}")]
    Invalid { path: String, message: String },
}

/// Reads a JSON array of preferences and checks them against the grid.
pub fn load_preferences(
    path: impl AsRef<Path>,
    scenario: &ScenarioSpec,
) -> Result<Vec<UserPreference>, PreferenceError> {
    let p = path.as_ref();
    let err = |message: String| PreferenceError::Invalid {
        path: p.display().to_string(),
        message,
    };
    let text = std::fs::read_to_string(p).map_err(|e| err(e.to_string()))?;
    let prefs: Vec<UserPreference> = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
    let g = &scenario.grid;
    let end = g.instant(g.steps);
    for (i, pr) in prefs.iter().enumerate() {
        if scenario.building_index(&pr.building).is_none() {
            return Err(err(format!("[{i}]: unknown building `{}`", pr.building)));
        }
        if let Some(t) = pr.target_soc {
            if !(0.0..=1.0).contains(&t) {
                return Err(err(format!("[{i}].target_soc: {t} outside [0, 1]")));
            }
        }
        for (name, ts) in [("departure", pr.departure), ("earliest_start", pr.earliest_start)] {
            if let Some(ts) = ts {
                if ts < g.start || ts > end {
                    return Err(err(format!("[{i}].{name}: {ts} outside the scenario grid")));
                }
            }
        }
    }
    Ok(prefs)
}

/// What the controller and supervisor plan with for one connected vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectiveEv {
    pub departure_step: usize,
    pub target_soc: f64,
    pub earliest_start_step: Option<usize>,
    pub basis: Basis,
}

/// Session facts known at plug-in time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlugIn {
    pub arrival_step: usize,
    pub soc_arrival: f64,
    pub capacity_kwh: f64,
}

fn step_at(grid: &TimeGrid, ts: DateTime<Utc>) -> usize {
    let mins = (ts - grid.start).num_minutes().max(0) as usize;
    (mins / grid.interval_minutes as usize).min(grid.steps)
}

/// Merges a declared preference over the estimate, field by field.
pub fn resolve_preferences(
    est: &FlexEstimate,
    pref: Option<&UserPreference>,
    plug: PlugIn,
    grid: &TimeGrid,
) -> EffectiveEv {
    let interval = f64::from(grid.interval_minutes);
    let est_departure = plug.arrival_step + (est.duration_min.lo / interval).floor().max(1.0) as usize;
    let est_target = (plug.soc_arrival + est.energy_kwh.hi / plug.capacity_kwh).min(1.0);
    let mut out = EffectiveEv {
        departure_step: est_departure.min(grid.steps),
        target_soc: est_target,
        earliest_start_step: None,
        basis: est.basis,
    };
    if let Some(p) = pref {
        if let Some(d) = p.departure {
            out.departure_step = step_at(grid, d).max(plug.arrival_step + 1);
            out.basis = Basis::UserOverride;
        }
        if let Some(t) = p.target_soc {
            out.target_soc = t;
            out.basis = Basis::UserOverride;
        }
        if let Some(s) = p.earliest_start {
            out.earliest_start_step = Some(step_at(grid, s));
            out.basis = Basis::UserOverride;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn session(id: &str, day_type: DayType, arrival: f64) -> CompletedSession {
        CompletedSession {
            id: id.into(),
            building: "B1".into(),
            day_type,
            arrival_min: arrival,
            duration_min: 600.0,
            energy_kwh: 10.0,
        }
    }

    #[test]
    fn append_and_idempotence() {
        let h = update_history(SessionHistory::new(), &session("s1", DayType::Weekday, 1000.0));
        assert_eq!(h.count("B1", DayType::Weekday), 1);
        let h2 = update_history(h.clone(), &session("s1", DayType::Weekday, 1000.0));
        assert_eq!(h, h2);
    }

    #[test]
    fn saturday_routes_to_weekend() {
        let sat = NaiveDate::from_ymd_opt(2024, 1, 6).unwrap();
        assert_eq!(DayType::of(sat, &[]), DayType::Weekend);
        let mon = NaiveDate::from_ymd_opt(2024, 1, 1).unwrap();
        assert_eq!(DayType::of(mon, &[]), DayType::Weekday);
        assert_eq!(DayType::of(mon, &[mon]), DayType::Holiday);
    }

    #[test]
    fn invalid_sessions_are_ignored() {
        let mut s = session("s", DayType::Weekday, 1000.0);
        s.duration_min = 0.0;
        assert!(!SessionHistory::new().record(&s));
    }

    #[test]
    fn cold_start_is_pessimistic() {
        let mut h = SessionHistory::new();
        for (i, a) in [1100.0, 1050.0, 1200.0].into_iter().enumerate() {
            let mut s = session(&format!("s{i}"), DayType::Weekday, a);
            s.energy_kwh = 5.0 * (i + 1) as f64;
            s.duration_min = 500.0 + 10.0 * i as f64;
            h.record(&s);
        }
        let e = estimate_flexibility(&h, "B1", DayType::Weekday, 0.9, 10, &FlexDefaults::default());
        assert_eq!(e.basis, Basis::PessimisticDefault);
        assert_eq!(e.arrival_min, Interval::point(1050.0));
        assert_eq!(e.energy_kwh, Interval::point(15.0));
        assert_eq!(e.duration_min, Interval { lo: 500.0, hi: 520.0 });
        assert_eq!(e.sample_count, 3);
    }

    #[test]
    fn empty_history_uses_defaults() {
        let d = FlexDefaults::default();
        let e = estimate_flexibility(&SessionHistory::new(), "B1", DayType::Weekend, 0.9, 10, &d);
        assert_eq!(e.arrival_min.lo, d.arrival_min);
        assert_eq!(e.energy_kwh.hi, d.energy_kwh);
    }

    #[test]
    fn nearest_rank_twenty_arrivals() {
        let mut h = SessionHistory::new();
        for i in 0..20 {
            h.record(&session(&format!("s{i}"), DayType::Weekday, 1019.0 - i as f64));
        }
        let e = estimate_flexibility(&h, "B1", DayType::Weekday, 0.9, 10, &FlexDefaults::default());
        assert_eq!(e.basis, Basis::Estimated);
        assert_eq!(e.arrival_min, Interval { lo: 1000.0, hi: 1018.0 });
    }

    #[test]
    fn identical_samples_degenerate() {
        let v = vec![1080.0; 20];
        assert_eq!(nearest_rank_interval(&v, 0.9), Interval::point(1080.0));
    }

    fn plug() -> PlugIn {
        PlugIn {
            arrival_step: 72,
            soc_arrival: 0.3,
            capacity_kwh: 40.0,
        }
    }

    fn grid() -> TimeGrid {
        crate::scenario::generate_synthetic(1, 1, 2).grid
    }

    fn estimate() -> FlexEstimate {
        FlexEstimate {
            day_type: DayType::Weekday,
            confidence: 0.9,
            arrival_min: Interval::point(1080.0),
            duration_min: Interval { lo: 600.0, hi: 840.0 },
            energy_kwh: Interval { lo: 8.0, hi: 16.0 },
            basis: Basis::Estimated,
            sample_count: 30,
        }
    }

    #[test]
    fn estimate_passes_through_without_preference() {
        let e = resolve_preferences(&estimate(), None, plug(), &grid());
        assert_eq!(e.departure_step, 72 + 40);
        assert!((e.target_soc - 0.7).abs() < 1e-12);
        assert_eq!(e.basis, Basis::Estimated);
    }

    #[test]
    fn preference_overrides_field_wise() {
        let g = grid();
        let pref = UserPreference {
            building: "B1".into(),
            date: g.start.date_naive(),
            departure: Some(g.instant(100)),
            target_soc: None,
            earliest_start: None,
        };
        let e = resolve_preferences(&estimate(), Some(&pref), plug(), &g);
        assert_eq!(e.departure_step, 100);
        assert!((e.target_soc - 0.7).abs() < 1e-12);
        assert_eq!(e.basis, Basis::UserOverride);
        let pref = UserPreference {
            target_soc: Some(0.9),
            ..pref
        };
        assert_eq!(
            resolve_preferences(&estimate(), Some(&pref), plug(), &g).target_soc,
            0.9
        );
    }

    #[test]
    fn preference_file_checks_grid() {
        let s = crate::scenario::generate_synthetic(1, 2, 2);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("prefs.json");
        std::fs::write(&p, r#"[{"building":"B2","date":"2024-01-01","target_soc":0.8}]"#).unwrap();
        assert_eq!(load_preferences(&p, &s).unwrap()[0].target_soc, Some(0.8));
        std::fs::write(
            &p,
            r#"[{"building":"B2","date":"2024-01-01","departure":"2025-01-01T00:00:00Z"}]"#,
        )
        .unwrap();
        assert!(load_preferences(&p, &s).is_err());
    }

    fn brute_force(values: &[f64], c: f64) -> Interval {
        let mut v = values.to_vec();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = v.len() as f64;
        let idx = |q: f64| ((n * q).ceil().max(1.0).min(n) as usize) - 1;
        Interval {
            lo: v[idx((1.0 - c) / 2.0)],
            hi: v[idx((1.0 + c) / 2.0)],
        }
    }

    proptest! {
        #[test]
        fn quantiles_match_oracle(values in prop::collection::vec(0.0f64..1440.0, 1..200), c in 0.01f64..0.99) {
            prop_assert_eq!(nearest_rank_interval(&values, c), brute_force(&values, c));
        }

        #[test]
        fn widening_never_narrows(values in prop::collection::vec(0.0f64..1440.0, 1..200), c in 0.01f64..0.98, d in 0.0f64..0.5) {
            let c2 = (c + d).min(0.99);
            let a = nearest_rank_interval(&values, c);
            let b = nearest_rank_interval(&values, c2);
            prop_assert!(b.lo <= a.lo && b.hi >= a.hi);
        }
    }

    #[test]
    fn coverage_on_synthetic_sessions() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let dist = Normal::new(1080.0, 45.0).unwrap();
        let c = 0.9;
        let mut covered = 0;
        let trials = 400;
        for _ in 0..trials {
            let train: Vec<f64> = (0..60).map(|_| dist.sample(&mut rng)).collect();
            let iv = nearest_rank_interval(&train, c);
            let x = dist.sample(&mut rng);
            if iv.lo <= x && x <= iv.hi {
                covered += 1;
            }
        }
        assert!(
            covered as f64 / trials as f64 >= c - 0.05,
            "coverage {covered}/{trials}"
        );
    }
}
