//! Static description of a renewable energy community: buildings, assets,
//! tariffs, the decision grid and EV session schedules.
//!
//! Scenarios are stored as a single JSON document. Long series may live
//! inline or in sibling CSV files (`step,value` header) referenced by a
//! relative path; [`load_scenario`] resolves those references so that every
//! returned [`ScenarioSpec`] is fully materialized.

use std::collections::{HashMap, HashSet};
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Datelike, Duration, NaiveDate, TimeZone, Timelike, Utc, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed scenario document {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid scenario: {}", format_violations(.0))]
    Validation(Vec<Violation>),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

/// One violated invariant, located by a JSON-style field path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

fn default_interval() -> u32 {
    15
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub start: DateTime<Utc>,
    #[serde(default = "default_interval")]
    pub interval_minutes: u32,
    pub steps: usize,
}

impl TimeGrid {
    pub fn dt_hours(&self) -> f64 {
        f64::from(self.interval_minutes) / 60.0
    }

    pub fn steps_per_day(&self) -> usize {
        (1440 / self.interval_minutes) as usize
    }

    pub fn slots_per_week(&self) -> usize {
        7 * self.steps_per_day()
    }

    pub fn instant(&self, step: usize) -> DateTime<Utc> {
        self.start + Duration::minutes(i64::from(self.interval_minutes) * step as i64)
    }

    /// Slot index within the week (Monday 00:00 is slot 0).
    pub fn hour_of_week_slot(&self, step: usize) -> usize {
        let t = self.instant(step);
        let minute_of_day = (t.hour() * 60 + t.minute()) as usize;
        t.weekday().num_days_from_monday() as usize * self.steps_per_day()
            + minute_of_day / self.interval_minutes as usize
    }

    /// Number of (possibly partial) days covered by the grid.
    pub fn days(&self) -> usize {
        self.steps.div_ceil(self.steps_per_day())
    }
}

/// A numeric series, either inline or a reference to a CSV file relative to
/// the scenario document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Series {
    Inline(Vec<f64>),
    File(String),
}

impl Series {
    /// Inline values; an unresolved file reference yields an empty slice.
    pub fn values(&self) -> &[f64] {
        match self {
            Series::Inline(v) => v,
            Series::File(_) => &[],
        }
    }

    pub fn at(&self, step: usize) -> f64 {
        self.values().get(step).copied().unwrap_or(0.0)
    }

    fn materialize(&mut self, base: &Path) -> Result<(), ScenarioError> {
        if let Series::File(rel) = self {
            let path = base.join(&*rel);
            *self = Series::Inline(read_series_csv(&path)?);
        }
        Ok(())
    }
}

impl From<Vec<f64>> for Series {
    fn from(v: Vec<f64>) -> Self {
        Series::Inline(v)
    }
}

fn read_series_csv(path: &Path) -> Result<Vec<f64>, ScenarioError> {
    let parse_err = |message: String| ScenarioError::Parse {
        path: path.to_path_buf(),
        message,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| parse_err(e.to_string()))?;
    let headers = rdr.headers().map_err(|e| parse_err(e.to_string()))?.clone();
    if headers.len() != 2 || &headers[0] != "step" || &headers[1] != "value" {
        return Err(parse_err("expected header `step,value`".into()));
    }
    let mut rows: Vec<(usize, f64)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(e.to_string()))?;
        let step: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("bad step `{}`", &rec[0])))?;
        let value: f64 = rec[1]
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("bad value `{}`", &rec[1])))?;
        rows.push((step, value));
    }
    rows.sort_by_key(|r| r.0);
    for (i, (step, _)) in rows.iter().enumerate() {
        if *step != i {
            return Err(parse_err(format!(
                "steps must be contiguous from 0, found {step} at row {i}"
            )));
        }
    }
    Ok(rows.into_iter().map(|r| r.1).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PvSpec {
    pub peak_kw: f64,
    /// Generation per interval, kWh.
    pub profile: Series,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatterySpec {
    pub capacity_kwh: f64,
    pub rated_kw: f64,
    pub soc_min: f64,
    pub soc_max: f64,
    pub eta_charge: f64,
    pub eta_discharge: f64,
    pub soc_init: f64,
}

fn default_charger_kw() -> f64 {
    7.4
}

fn default_eta() -> f64 {
    1.0
}

/// EV charge point. `rated_kw` is a power rating.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChargerSpec {
    #[serde(default = "default_charger_kw")]
    pub rated_kw: f64,
    #[serde(default)]
    pub v2g_enabled: bool,
    #[serde(default = "default_eta")]
    pub eta_charge: f64,
    #[serde(default = "default_eta")]
    pub eta_discharge: f64,
}

impl Default for ChargerSpec {
    fn default() -> Self {
        Self {
            rated_kw: default_charger_kw(),
            v2g_enabled: false,
            eta_charge: 1.0,
            eta_discharge: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildingSpec {
    pub id: String,
    /// Inelastic consumption per interval, kWh.
    pub load_profile: Series,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pv: Option<PvSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub battery: Option<BatterySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub charger: Option<ChargerSpec>,
}

impl BuildingSpec {
    pub fn pv_at(&self, step: usize) -> f64 {
        self.pv.as_ref().map_or(0.0, |pv| pv.profile.at(step))
    }
}

/// One plug-in session. The vehicle is connected for steps
/// `arrival_step..departure_step`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvSessionSpec {
    pub id: String,
    pub building: String,
    pub arrival_step: usize,
    pub departure_step: usize,
    pub soc_arrival: f64,
    pub soc_target: f64,
    pub ev_capacity_kwh: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TariffSpec {
    /// Currency per kWh, one value per step.
    pub import_price: Series,
    /// Feed-in remuneration per kWh; all zero when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub export_price: Option<Series>,
}

impl TariffSpec {
    pub fn import_at(&self, step: usize) -> f64 {
        self.import_price.at(step)
    }

    pub fn export_at(&self, step: usize) -> f64 {
        self.export_price.as_ref().map_or(0.0, |s| s.at(step))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub grid: TimeGrid,
    pub buildings: Vec<BuildingSpec>,
    #[serde(default)]
    pub sessions: Vec<EvSessionSpec>,
    pub tariff: TariffSpec,
    pub seed: u64,
    /// Dates treated as holidays by the flexibility estimator.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub holidays: Vec<NaiveDate>,
}

impl ScenarioSpec {
    pub fn building_index(&self, id: &str) -> Option<usize> {
        self.buildings.iter().position(|b| b.id == id)
    }

    /// Sessions of one building ordered by arrival.
    pub fn sessions_for(&self, building: &str) -> Vec<EvSessionSpec> {
        let mut v: Vec<_> = self
            .sessions
            .iter()
            .filter(|s| s.building == building)
            .cloned()
            .collect();
        v.sort_by_key(|s| s.arrival_step);
        v
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    fn materialize(&mut self, base: &Path) -> Result<(), ScenarioError> {
        for b in &mut self.buildings {
            b.load_profile.materialize(base)?;
            if let Some(pv) = &mut b.pv {
                pv.profile.materialize(base)?;
            }
        }
        self.tariff.import_price.materialize(base)?;
        if let Some(e) = &mut self.tariff.export_price {
            e.materialize(base)?;
        }
        Ok(())
    }
}

/// Reads, materializes and validates a scenario document.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<ScenarioSpec, ScenarioError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut spec = parse_scenario(&text).map_err(|message| ScenarioError::Parse {
        path: path.to_path_buf(),
        message,
    })?;
    spec.materialize(path.parent().unwrap_or(Path::new(".")))?;
    let violations = validate_scenario(&spec);
    if violations.is_empty() {
        Ok(spec)
    } else {
        Err(ScenarioError::Validation(violations))
    }
}

pub fn parse_scenario(text: &str) -> Result<ScenarioSpec, String> {
    serde_json::from_str(text).map_err(|e| e.to_string())
}

pub fn save_scenario(spec: &ScenarioSpec, path: impl AsRef<Path>) -> Result<(), ScenarioError> {
    let path = path.as_ref();
    fs::write(path, spec.to_json()).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })
}

struct Checker {
    out: Vec<Violation>,
}

impl Checker {
    fn fail(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.out.push(Violation {
            path: path.into(),
            message: message.into(),
        });
    }

    fn check(&mut self, ok: bool, path: impl Into<String>, message: impl Into<String>) {
        if !ok {
            self.fail(path, message);
        }
    }

    fn fraction(&mut self, v: f64, path: String) {
        self.check((0.0..=1.0).contains(&v), path, "must be a fraction in [0,1]");
    }

    fn efficiency(&mut self, v: f64, path: String) {
        self.check(v > 0.0 && v <= 1.0, path, "efficiency must lie in (0,1]");
    }

    fn series(&mut self, s: &Series, steps: usize, path: &str) {
        if let Series::File(p) = s {
            self.fail(path, format!("unresolved series reference `{p}`"));
            return;
        }
        let v = s.values();
        if v.len() != steps {
            self.fail(path, format!("series length {} != grid steps {steps}", v.len()));
        }
        if let Some(k) = v.iter().position(|x| !x.is_finite() || *x < 0.0) {
            self.fail(format!("{path}[{k}]"), "values must be finite and >= 0");
        }
    }
}

/// Lists every violated invariant; empty iff the scenario is valid.
pub fn validate_scenario(s: &ScenarioSpec) -> Vec<Violation> {
    let mut c = Checker { out: Vec::new() };
    let g = &s.grid;
    c.check(
        g.interval_minutes > 0 && 60 % g.interval_minutes == 0,
        "grid.interval_minutes",
        "interval_minutes must divide 60",
    );
    c.check(g.steps >= 1, "grid.steps", "steps >= 1");
    let steps = g.steps;
    let dt_h = if g.interval_minutes > 0 { g.dt_hours() } else { 0.0 };

    c.check(!s.buildings.is_empty(), "buildings", "at least one building");
    let mut ids = HashSet::new();
    for (i, b) in s.buildings.iter().enumerate() {
        let p = format!("buildings[{i}]");
        c.check(!b.id.is_empty(), format!("{p}.id"), "id must be non-empty");
        c.check(
            ids.insert(b.id.as_str()),
            format!("{p}.id"),
            format!("duplicate building id `{}`", b.id),
        );
        c.series(&b.load_profile, steps, &format!("{p}.load_profile"));
        if let Some(pv) = &b.pv {
            c.check(
                pv.peak_kw.is_finite() && pv.peak_kw >= 0.0,
                format!("{p}.pv.peak_kw"),
                "peak_kw >= 0",
            );
            c.series(&pv.profile, steps, &format!("{p}.pv.profile"));
            let cap = pv.peak_kw * dt_h;
            if let Some(k) = pv.profile.values().iter().position(|x| *x > cap) {
                c.fail(
                    format!("{p}.pv.profile[{k}]"),
                    format!("generation exceeds peak_kw * interval_hours = {cap}"),
                );
            }
        }
        if let Some(bat) = &b.battery {
            let bp = format!("{p}.battery");
            c.check(bat.capacity_kwh > 0.0, format!("{bp}.capacity_kwh"), "capacity_kwh > 0");
            c.check(bat.rated_kw > 0.0, format!("{bp}.rated_kw"), "rated_kw > 0");
            c.fraction(bat.soc_min, format!("{bp}.soc_min"));
            c.fraction(bat.soc_max, format!("{bp}.soc_max"));
            c.efficiency(bat.eta_charge, format!("{bp}.eta_charge"));
            c.efficiency(bat.eta_discharge, format!("{bp}.eta_discharge"));
            c.check(bat.soc_min < bat.soc_max, format!("{bp}.soc_min"), "soc_min < soc_max");
            c.check(
                bat.soc_min <= bat.soc_init && bat.soc_init <= bat.soc_max,
                format!("{bp}.soc_init"),
                "soc_min <= soc_init <= soc_max",
            );
        }
        if let Some(ch) = &b.charger {
            let cp = format!("{p}.charger");
            c.check(ch.rated_kw > 0.0, format!("{cp}.rated_kw"), "rated_kw > 0");
            c.efficiency(ch.eta_charge, format!("{cp}.eta_charge"));
            c.efficiency(ch.eta_discharge, format!("{cp}.eta_discharge"));
        }
    }

    let mut session_ids = HashSet::new();
    let mut by_building: HashMap<&str, Vec<(usize, &EvSessionSpec)>> = HashMap::new();
    for (i, sess) in s.sessions.iter().enumerate() {
        let p = format!("sessions[{i}]");
        c.check(
            session_ids.insert(sess.id.as_str()),
            format!("{p}.id"),
            format!("duplicate session id `{}`", sess.id),
        );
        match s.buildings.iter().find(|b| b.id == sess.building) {
            None => c.fail(format!("{p}.building"), format!("unknown building `{}`", sess.building)),
            Some(b) if b.charger.is_none() => c.fail(
                format!("{p}.building"),
                format!("building `{}` has no charger", sess.building),
            ),
            Some(_) => {}
        }
        c.check(
            sess.arrival_step < sess.departure_step,
            format!("{p}.arrival_step"),
            "arrival_step < departure_step",
        );
        c.check(
            sess.departure_step <= steps,
            format!("{p}.departure_step"),
            "departure_step within grid",
        );
        c.check(
            (0.0..=1.0).contains(&sess.soc_arrival)
                && (0.0..=1.0).contains(&sess.soc_target)
                && sess.soc_arrival <= sess.soc_target,
            format!("{p}.soc_target"),
            "0 <= soc_arrival <= soc_target <= 1",
        );
        c.check(
            sess.ev_capacity_kwh > 0.0,
            format!("{p}.ev_capacity_kwh"),
            "ev_capacity_kwh > 0",
        );
        by_building.entry(sess.building.as_str()).or_default().push((i, sess));
    }
    let mut buildings: Vec<_> = by_building.into_iter().collect();
    buildings.sort_by(|a, b| a.0.cmp(b.0));
    for (_, mut list) in buildings {
        list.sort_by_key(|(_, s)| (s.arrival_step, s.departure_step));
        for pair in list.windows(2) {
            let ((ia, a), (ib, b)) = (pair[0], pair[1]);
            if a.departure_step > b.arrival_step {
                c.fail(
                    format!("sessions[{ib}]"),
                    format!(
                        "overlapping EV sessions `{}` (sessions[{ia}]) and `{}` (sessions[{ib}])",
                        a.id, b.id
                    ),
                );
            }
        }
    }

    c.series(&s.tariff.import_price, steps, "tariff.import_price");
    if let Some(e) = &s.tariff.export_price {
        c.series(e, steps, "tariff.export_price");
    }
    c.out
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

/// Builds a reproducible synthetic community with residential load peaks,
/// midday PV, evening-peaked prices and overnight EV sessions.
///
/// Panics if `buildings` or `days` is zero.
pub fn generate_synthetic(seed: u64, buildings: usize, days: usize) -> ScenarioSpec {
    assert!(buildings >= 1 && days >= 1, "need at least one building and one day");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = TimeGrid {
        // A Monday, so that day-of-week patterns line up with the first step.
        start: Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap(),
        interval_minutes: 15,
        steps: days * 96,
    };
    let steps = grid.steps;
    let dt_h = grid.dt_hours();
    let hour_of = |k: usize| (k % 96) as f64 / 4.0;
    let is_weekend = |day: usize| {
        matches!(
            (grid.start + Duration::days(day as i64)).weekday(),
            Weekday::Sat | Weekday::Sun
        )
    };
    let unit = Normal::new(0.0, 1.0).unwrap();

    let mut specs = Vec::with_capacity(buildings);
    let mut sessions = Vec::new();
    for b in 0..buildings {
        let id = format!("B{}", b + 1);
        let scale: f64 = rng.gen_range(0.8..1.3);
        let day_scale: Vec<f64> = (0..days).map(|_| rng.gen_range(0.9..1.1)).collect();
        let load: Vec<f64> = (0..steps)
            .map(|k| {
                let h = hour_of(k);
                let morning = 0.15 * (-((h - 7.5) / 1.0).powi(2)).exp();
                let evening = 0.35 * (-((h - 19.5) / 1.5).powi(2)).exp();
                let noise = 1.0 + 0.08 * unit.sample(&mut rng);
                let v = (0.09 + morning + evening) * scale * day_scale[k / 96] * noise;
                round6(v.max(0.01))
            })
            .collect();

        let pv = (b % 4 != 3).then(|| {
            let peak_kw: f64 = round6(rng.gen_range(3.0..6.0));
            let cloud: Vec<f64> = (0..days).map(|_| rng.gen_range(0.4..1.0)).collect();
            let cap = peak_kw * dt_h;
            let profile = (0..steps)
                .map(|k| {
                    let h = hour_of(k) + 0.125;
                    let shape = if (7.0..19.0).contains(&h) {
                        (PI * (h - 7.0) / 12.0).sin().powf(1.5)
                    } else {
                        0.0
                    };
                    round6(cap * shape * cloud[k / 96]).min(cap)
                })
                .collect::<Vec<_>>();
            PvSpec {
                peak_kw,
                profile: profile.into(),
            }
        });

        let battery = (b == 0).then_some(BatterySpec {
            capacity_kwh: 9.6,
            rated_kw: 3.0,
            soc_min: 0.1,
            soc_max: 0.95,
            eta_charge: 0.95,
            eta_discharge: 0.95,
            soc_init: 0.5,
        });

        let charger = ChargerSpec {
            rated_kw: 7.4,
            v2g_enabled: false,
            eta_charge: 0.95,
            eta_discharge: 0.95,
        };

        let capacity = round6(rng.gen_range(40.0..60.0));
        let target = if rng.gen_bool(0.5) { 0.8 } else { 0.9 };
        let mut n = 0;
        for day in 0..days {
            let skip = rng.gen_bool(0.1);
            let weekend = is_weekend(day);
            let (arr_mean, dep_mean) = if weekend { (19.0, 10.0) } else { (18.0, 8.0) };
            let arr_h = (arr_mean + 0.75 * unit.sample(&mut rng)).clamp(16.0, 21.5);
            let dep_h = (dep_mean + 0.75 * unit.sample(&mut rng)).clamp(6.0, 11.0);
            let soc_arrival = round6(rng.gen_range(0.25..0.55));
            if skip {
                continue;
            }
            let arrival_step = day * 96 + (arr_h * 4.0).round() as usize;
            let departure_step = ((day + 1) * 96 + (dep_h * 4.0).round() as usize).min(steps);
            if arrival_step + 4 > departure_step {
                continue;
            }
            n += 1;
            sessions.push(EvSessionSpec {
                id: format!("{id}-S{n}"),
                building: id.clone(),
                arrival_step,
                departure_step,
                soc_arrival,
                soc_target: target,
                ev_capacity_kwh: capacity,
            });
        }

        specs.push(BuildingSpec {
            id,
            load_profile: load.into(),
            pv,
            battery,
            charger: Some(charger),
        });
    }

    let day_level: Vec<f64> = (0..days).map(|_| rng.gen_range(0.85..1.15)).collect();
    let import: Vec<f64> = (0..steps)
        .map(|k| {
            let h = hour_of(k);
            let base = match h {
                h if h < 1.0 => 0.13,
                h if h < 5.0 => 0.08,
                h if h < 7.0 => 0.14,
                h if h < 10.0 => 0.20,
                h if h < 16.0 => 0.12,
                h if h < 18.0 => 0.18,
                h if h < 22.0 => 0.30,
                _ => 0.18,
            };
            let jitter = 1.0 + 0.03 * unit.sample(&mut rng);
            round6((base * day_level[k / 96] * jitter).max(0.0))
        })
        .collect();

    ScenarioSpec {
        grid,
        buildings: specs,
        sessions,
        tariff: TariffSpec {
            import_price: import.into(),
            export_price: None,
        },
        seed,
        holidays: Vec::new(),
    }
}
