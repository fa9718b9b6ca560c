//! Sensor-data pipeline: grid alignment of irregular readings, anomaly
//! filtering, gap imputation, observation encoding and the decision audit
//! log.
//!
//! Reading timestamps follow the metering convention of marking the *end*
//! of what they describe: a reading at offset `x` from the grid start
//! belongs to interval `k` when `k*dt + skew < x <= (k+1)*dt + skew`, with
//! a clock-skew tolerance of 30 s. A reading up to 30 s after an interval
//! boundary therefore still counts toward the interval that just closed.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use chrono::{DateTime, Datelike, Timelike, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forecast::{DefaultProfile, ForecastModel};
use crate::scenario::{ScenarioSpec, TimeGrid};
use crate::supervisor::Intervention;
use crate::twin::Action;

/// Clock-skew tolerance applied at interval boundaries.
pub const SKEW_TOLERANCE_MS: i64 = 30_000;
/// Longest gap (in intervals) filled by carrying the last observation forward.
pub const LOCF_MAX_GAP: usize = 4;
/// Trailing window of deltas for the robust spike test.
pub const SPIKE_WINDOW: usize = 96;
/// Frames of history required before the spike test applies.
pub const SPIKE_MIN_HISTORY: usize = 8;
pub const SPIKE_MAD_FACTOR: f64 = 6.0;
/// Minimum spike threshold as a fraction of the largest magnitude in the
/// trailing window; keeps runs of identical values (night-time PV, a flat
/// load) from flagging every later change.
pub const SPIKE_FLOOR_FRACTION: f64 = 0.5;
const PV_BOUND_MARGIN: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    LoadKwh,
    PvKwh,
    BatterySoc,
    EvSoc,
    EvPowerKw,
    Price,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::LoadKwh,
        Metric::PvKwh,
        Metric::BatterySoc,
        Metric::EvSoc,
        Metric::EvPowerKw,
        Metric::Price,
    ];

    /// State metrics keep the last reading of an interval; the others are
    /// averaged.
    pub fn is_state(self) -> bool {
        matches!(self, Metric::BatterySoc | Metric::EvSoc | Metric::Price)
    }

    /// Exogenous series eligible for the statistical spike test.
    pub fn is_exogenous(self) -> bool {
        matches!(self, Metric::LoadKwh | Metric::PvKwh | Metric::Price)
    }

    pub fn is_non_negative(self) -> bool {
        !matches!(self, Metric::EvPowerKw)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::LoadKwh => "load_kwh",
            Metric::PvKwh => "pv_kwh",
            Metric::BatterySoc => "battery_soc",
            Metric::EvSoc => "ev_soc",
            Metric::EvPowerKw => "ev_power_kw",
            Metric::Price => "price",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Metric::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown metric `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawReading {
    pub source_id: String,
    pub metric: Metric,
    pub timestamp: DateTime<Utc>,
    pub value: f64,
}

impl RawReading {
    pub fn new(source_id: &str, metric: Metric, timestamp: DateTime<Utc>, value: f64) -> Self {
        Self {
            source_id: source_id.to_string(),
            metric,
            timestamp,
            value,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityFlag {
    Measured,
    CarriedForward,
    PatternImputed,
    DefaultImputed,
    RejectedAnomaly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub value: f64,
    pub flag: QualityFlag,
}

impl Cell {
    pub fn measured(value: f64) -> Self {
        Self {
            value,
            flag: QualityFlag::Measured,
        }
    }

    /// A value downstream stages may use (anything but a rejected one).
    pub fn usable(&self) -> Option<f64> {
        (self.flag != QualityFlag::RejectedAnomaly).then_some(self.value)
    }
}

/// Per building, the expected metrics of one step. `None` marks a value
/// that is expected but missing.
pub type BuildingValues = BTreeMap<Metric, Option<Cell>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedFrame {
    pub step: usize,
    pub values: Vec<BuildingValues>,
    pub completeness: f64,
}

impl AlignedFrame {
    pub fn empty(step: usize, buildings: usize) -> Self {
        Self {
            step,
            values: vec![BTreeMap::new(); buildings],
            completeness: 1.0,
        }
    }

    pub fn get(&self, building: usize, metric: Metric) -> Option<Cell> {
        self.values.get(building)?.get(&metric).copied().flatten()
    }

    /// Usable value (not missing, not rejected).
    pub fn value(&self, building: usize, metric: Metric) -> Option<f64> {
        self.get(building, metric).and_then(|c| c.usable())
    }

    pub fn expects(&self, building: usize, metric: Metric) -> bool {
        self.values.get(building).is_some_and(|v| v.contains_key(&metric))
    }

    /// Fraction of expected values that are measured.
    pub fn refresh_completeness(&mut self) {
        let (mut expected, mut measured) = (0usize, 0usize);
        for v in &self.values {
            for cell in v.values() {
                expected += 1;
                if matches!(cell, Some(c) if c.flag == QualityFlag::Measured) {
                    measured += 1;
                }
            }
        }
        self.completeness = if expected == 0 {
            1.0
        } else {
            measured as f64 / expected as f64
        };
    }

    pub fn is_complete(&self) -> bool {
        self.values.iter().all(|v| {
            v.values()
                .all(|c| matches!(c, Some(c) if c.flag != QualityFlag::RejectedAnomaly))
        })
    }

    /// Adds the cells of `other` (same step) to this frame.
    pub fn merge(&mut self, other: AlignedFrame) {
        for (mine, theirs) in self.values.iter_mut().zip(other.values) {
            mine.extend(theirs);
        }
        self.refresh_completeness();
    }
}

/// Which metrics each building reports, derived from its assets and the
/// EV schedule.
#[derive(Debug, Clone)]
pub struct FrameLayout {
    ids: Vec<String>,
    has_pv: Vec<bool>,
    has_battery: Vec<bool>,
    has_charger: Vec<bool>,
    connected: Vec<Vec<(usize, usize)>>,
}

impl FrameLayout {
    pub fn from_scenario(s: &ScenarioSpec) -> Self {
        Self {
            ids: s.buildings.iter().map(|b| b.id.clone()).collect(),
            has_pv: s.buildings.iter().map(|b| b.pv.is_some()).collect(),
            has_battery: s.buildings.iter().map(|b| b.battery.is_some()).collect(),
            has_charger: s.buildings.iter().map(|b| b.charger.is_some()).collect(),
            connected: s
                .buildings
                .iter()
                .map(|b| {
                    s.sessions_for(&b.id)
                        .iter()
                        .map(|x| (x.arrival_step, x.departure_step))
                        .collect()
                })
                .collect(),
        }
    }

    pub fn buildings(&self) -> usize {
        self.ids.len()
    }

    pub fn building_index(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    pub fn ev_connected(&self, building: usize, step: usize) -> bool {
        self.connected[building].iter().any(|(a, d)| (*a..*d).contains(&step))
    }

    /// Whether a building can report `metric` at all.
    pub fn accepts(&self, building: usize, metric: Metric) -> bool {
        match metric {
            Metric::LoadKwh | Metric::Price => true,
            Metric::PvKwh => self.has_pv[building],
            Metric::BatterySoc => self.has_battery[building],
            Metric::EvSoc | Metric::EvPowerKw => self.has_charger[building],
        }
    }

    /// Metrics that must be present (possibly imputed) at `step`.
    pub fn expected(&self, building: usize, step: usize) -> Vec<Metric> {
        let mut out = vec![Metric::LoadKwh];
        if self.has_pv[building] {
            out.push(Metric::PvKwh);
        }
        if self.has_battery[building] {
            out.push(Metric::BatterySoc);
        }
        if self.has_charger[building] {
            out.push(Metric::EvPowerKw);
            if self.ev_connected(building, step) {
                out.push(Metric::EvSoc);
            }
        }
        out
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TelemetryError {
    #[error("reading from unknown source `{source_id}` for metric {metric:?}")]
    UnknownSource { source_id: String, metric: Metric },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignStats {
    pub accepted: usize,
    pub unknown_source: usize,
    pub out_of_grid: usize,
    /// Readings for intervals already finalized.
    pub late: usize,
}

/// Interval index of a timestamp under the end-stamped convention with skew
/// tolerance, or `None` before the first interval.
pub fn bucket_index(grid: &TimeGrid, ts: DateTime<Utc>) -> Option<usize> {
    let dt_ms = i64::from(grid.interval_minutes) * 60_000;
    let x = (ts - grid.start).num_milliseconds() - SKEW_TOLERANCE_MS;
    if x <= 0 {
        return None;
    }
    // ceil(x / dt) - 1
    Some(((x + dt_ms - 1) / dt_ms - 1) as usize)
}

/// Streaming aligner: readings are pushed in any order and intervals are
/// finalized strictly in step order.
pub struct Aligner {
    grid: TimeGrid,
    layout: FrameLayout,
    pending: BTreeMap<usize, Vec<(usize, RawReading)>>,
    finalized: usize,
    pub stats: AlignStats,
}

impl Aligner {
    pub fn new(grid: TimeGrid, layout: FrameLayout) -> Self {
        Self {
            grid,
            layout,
            pending: BTreeMap::new(),
            finalized: 0,
            stats: AlignStats::default(),
        }
    }

    pub fn layout(&self) -> &FrameLayout {
        &self.layout
    }

    pub fn push(&mut self, r: RawReading) -> Result<(), TelemetryError> {
        let Some(b) = self
            .layout
            .building_index(&r.source_id)
            .filter(|b| self.layout.accepts(*b, r.metric))
        else {
            self.stats.unknown_source += 1;
            log::warn!(
                "dropping reading from unknown source `{}` ({:?})",
                r.source_id,
                r.metric
            );
            return Err(TelemetryError::UnknownSource {
                source_id: r.source_id,
                metric: r.metric,
            });
        };
        match bucket_index(&self.grid, r.timestamp) {
            Some(k) if k < self.grid.steps => {
                if k < self.finalized {
                    self.stats.late += 1;
                } else {
                    self.stats.accepted += 1;
                    self.pending.entry(k).or_default().push((b, r));
                }
            }
            _ => self.stats.out_of_grid += 1,
        }
        Ok(())
    }

    /// Pushes everything currently queued on a channel; unknown sources are
    /// counted and dropped.
    pub fn drain(&mut self, rx: &mpsc::Receiver<RawReading>) {
        while let Ok(r) = rx.try_recv() {
            let _ = self.push(r);
        }
    }

    /// Builds the frame for `step` restricted to `metrics`, consuming the
    /// matching readings. Readings of other metrics stay queued.
    pub fn take(&mut self, step: usize, metrics: &[Metric]) -> AlignedFrame {
        let mut frame = AlignedFrame::empty(step, self.layout.buildings());
        let readings = self.pending.remove(&step).unwrap_or_default();
        let (mut mine, rest): (Vec<_>, Vec<_>) = readings.into_iter().partition(|(_, r)| metrics.contains(&r.metric));
        if !rest.is_empty() {
            self.pending.insert(step, rest);
        }
        // Canonical order makes the aggregate independent of arrival order.
        mine.sort_by(|(ba, a), (bb, b)| {
            (ba, a.metric, a.timestamp)
                .cmp(&(bb, b.metric, b.timestamp))
                .then(a.value.total_cmp(&b.value))
        });
        let mut groups: BTreeMap<(usize, Metric), Vec<f64>> = BTreeMap::new();
        for (b, r) in mine {
            groups.entry((b, r.metric)).or_default().push(r.value);
        }
        for b in 0..self.layout.buildings() {
            for m in self.layout.expected(b, step) {
                if metrics.contains(&m) {
                    frame.values[b].insert(m, None);
                }
            }
        }
        for ((b, m), vals) in groups {
            let v = if m.is_state() {
                *vals.last().expect("non-empty group")
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            };
            frame.values[b].insert(m, Some(Cell::measured(v)));
        }
        frame.refresh_completeness();
        frame
    }

    /// Marks every step below `step` as closed; later readings for them are
    /// counted as late.
    pub fn close_through(&mut self, step: usize) {
        self.finalized = self.finalized.max(step + 1);
        self.pending.retain(|k, _| *k > step);
    }
}

/// Buckets a reading stream onto the grid. Flow metrics average the
/// readings of an interval, state metrics keep the latest; intervals
/// without readings are left missing.
pub fn align_to_grid(
    readings: impl IntoIterator<Item = RawReading>,
    grid: &TimeGrid,
    layout: &FrameLayout,
) -> (Vec<AlignedFrame>, AlignStats) {
    let mut aligner = Aligner::new(grid.clone(), layout.clone());
    for r in readings {
        let _ = aligner.push(r);
    }
    let frames = (0..grid.steps)
        .map(|k| {
            let f = aligner.take(k, &Metric::ALL);
            aligner.close_through(k);
            f
        })
        .collect();
    (frames, aligner.stats)
}

/// A sending half for concurrent producers feeding one aligner.
pub fn reading_queue() -> (mpsc::Sender<RawReading>, mpsc::Receiver<RawReading>) {
    mpsc::channel()
}

/// Physical limits used by the bound checks.
#[derive(Debug, Clone)]
pub struct PhysicalBounds {
    pub charger_kw: Vec<Option<f64>>,
    /// Installed PV output per interval, kWh.
    pub pv_step_kwh: Vec<f64>,
}

impl PhysicalBounds {
    pub fn from_scenario(s: &ScenarioSpec) -> Self {
        Self {
            charger_kw: s
                .buildings
                .iter()
                .map(|b| b.charger.as_ref().map(|c| c.rated_kw))
                .collect(),
            pv_step_kwh: s
                .buildings
                .iter()
                .map(|b| b.pv.as_ref().map_or(0.0, |p| p.peak_kw * s.grid.dt_hours()))
                .collect(),
        }
    }

    fn typical_scale(&self, building: usize, metric: Metric) -> f64 {
        match metric {
            Metric::PvKwh => self.pv_step_kwh.get(building).copied().unwrap_or(0.0),
            _ => 0.0,
        }
    }

    fn violates(&self, building: usize, metric: Metric, v: f64) -> bool {
        if !v.is_finite() {
            return true;
        }
        match metric {
            Metric::LoadKwh | Metric::Price => v < 0.0,
            // generous margin so that measurement noise is not rejected
            Metric::PvKwh => {
                v < 0.0 || v > PV_BOUND_MARGIN * self.pv_step_kwh.get(building).copied().unwrap_or(f64::INFINITY)
            }
            Metric::BatterySoc | Metric::EvSoc => !(0.0..=1.0).contains(&v),
            Metric::EvPowerKw => self
                .charger_kw
                .get(building)
                .copied()
                .flatten()
                .is_some_and(|rated| v.abs() > rated),
        }
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median absolute deviation around the median.
pub fn mad(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    let m = median(&mut v);
    let mut dev: Vec<f64> = values.iter().map(|x| (x - m).abs()).collect();
    median(&mut dev)
}

/// Flags out-of-bounds values, and for exogenous series values whose jump
/// from the previous usable value exceeds six MADs of the trailing deltas,
/// as `rejected_anomaly`. `history` holds earlier frames in step order.
pub fn detect_anomalies(mut frame: AlignedFrame, history: &[AlignedFrame], bounds: &PhysicalBounds) -> AlignedFrame {
    let tail = &history[history.len().saturating_sub(SPIKE_WINDOW + 1)..];
    for (b, values) in frame.values.iter_mut().enumerate() {
        for (metric, cell) in values.iter_mut() {
            let Some(c) = cell.as_mut() else { continue };
            if c.flag == QualityFlag::RejectedAnomaly {
                continue;
            }
            if bounds.violates(b, *metric, c.value) {
                c.flag = QualityFlag::RejectedAnomaly;
                continue;
            }
            if !metric.is_exogenous() || history.len() < SPIKE_MIN_HISTORY {
                continue;
            }
            let series: Vec<f64> = tail.iter().filter_map(|f| f.value(b, *metric)).collect();
            let Some(prev) = series.last().copied() else { continue };
            if series.len() < SPIKE_MIN_HISTORY {
                continue;
            }
            let deltas: Vec<f64> = series.windows(2).map(|w| w[1] - w[0]).collect();
            // a dark night leaves no scale in the window; fall back to capacity
            let scale = series
                .iter()
                .fold(bounds.typical_scale(b, *metric), |m, x| m.max(x.abs()));
            let threshold = (SPIKE_MAD_FACTOR * mad(&deltas)).max(SPIKE_FLOOR_FRACTION * scale);
            if (c.value - prev).abs() > threshold {
                c.flag = QualityFlag::RejectedAnomaly;
            }
        }
    }
    frame.refresh_completeness();
    frame
}

/// Imputation tier for one missing value.
fn pattern_value(history: &[(usize, Option<f64>)], step: usize, week: usize) -> Option<f64> {
    // history is (step, measured value) in ascending step order
    let mut sum = 0.0;
    let mut n = 0;
    for (s, v) in history {
        if *s < step && step - *s <= crate::forecast::TRAILING_WEEKS * week && (step - *s).is_multiple_of(week) {
            if let Some(v) = v {
                sum += v;
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Fills every missing or rejected value. Runs of at most four intervals
/// following a usable value carry it forward; longer runs use the mean of
/// the same hour-of-week slot over the trailing four weeks of measured
/// data; without such history the default profile applies. Measured values
/// are never altered.
pub fn impute_gaps(mut frames: Vec<AlignedFrame>, grid: &TimeGrid, defaults: &dyn DefaultProfile) -> Vec<AlignedFrame> {
    frames.sort_by_key(|f| f.step);
    let week = grid.slots_per_week();
    let buildings = frames.first().map_or(0, |f| f.values.len());
    for b in 0..buildings {
        let metrics: BTreeSet<Metric> = frames.iter().flat_map(|f| f.values[b].keys().copied()).collect();
        for m in metrics {
            let measured: Vec<(usize, Option<f64>)> = frames
                .iter()
                .map(|f| {
                    let v = f.get(b, m).filter(|c| c.flag == QualityFlag::Measured).map(|c| c.value);
                    (f.step, v)
                })
                .collect();
            let missing = |f: &AlignedFrame| f.expects(b, m) && f.value(b, m).is_none();
            let mut i = 0;
            let mut last: Option<f64> = None;
            while i < frames.len() {
                if !missing(&frames[i]) {
                    if let Some(v) = frames[i].value(b, m) {
                        last = Some(v);
                    }
                    i += 1;
                    continue;
                }
                let start = i;
                while i < frames.len() && missing(&frames[i]) {
                    i += 1;
                }
                let gap = i - start;
                for f in &mut frames[start..i] {
                    let cell = match last {
                        Some(v) if gap <= LOCF_MAX_GAP => Cell {
                            value: v,
                            flag: QualityFlag::CarriedForward,
                        },
                        _ => match pattern_value(&measured, f.step, week) {
                            Some(v) => Cell {
                                value: v,
                                flag: QualityFlag::PatternImputed,
                            },
                            None => Cell {
                                value: defaults.default_value(b, m, f.step),
                                flag: QualityFlag::DefaultImputed,
                            },
                        },
                    };
                    // keep rejected readings visible in the flag history only via
                    // the replacement tier
                    f.values[b].insert(m, Some(cell));
                }
            }
        }
    }
    for f in &mut frames {
        f.refresh_completeness();
    }
    frames
}

/// Online counterpart of [`impute_gaps`] for frames that arrive one at a
/// time: the gap length is the run of missing values so far.
#[derive(Debug, Clone, Default)]
pub struct StreamImputer {
    state: BTreeMap<(usize, Metric), (Option<f64>, usize)>,
}

impl StreamImputer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fills the frame in place; `model` must not yet contain this frame.
    pub fn fill(&mut self, frame: &mut AlignedFrame, model: &ForecastModel) {
        for (b, values) in frame.values.iter_mut().enumerate() {
            for (m, cell) in values.iter_mut() {
                let entry = self.state.entry((b, *m)).or_insert((None, 0));
                match cell.and_then(|c| c.usable()) {
                    Some(v) => {
                        *entry = (Some(v), 0);
                    }
                    None => {
                        entry.1 += 1;
                        let filled = match entry.0 {
                            Some(v) if entry.1 <= LOCF_MAX_GAP => Cell {
                                value: v,
                                flag: QualityFlag::CarriedForward,
                            },
                            _ => match model.slot_mean(b, *m, frame.step) {
                                Some((v, _)) => Cell {
                                    value: v,
                                    flag: QualityFlag::PatternImputed,
                                },
                                None => Cell {
                                    value: model.default_value(b, *m, frame.step),
                                    flag: QualityFlag::DefaultImputed,
                                },
                            },
                        };
                        *cell = Some(filled);
                    }
                }
            }
        }
        frame.refresh_completeness();
    }

    /// Intervals since `metric` was last usable at `building`.
    pub fn age(&self, building: usize, metric: Metric) -> usize {
        self.state.get(&(building, metric)).map_or(0, |s| s.1)
    }

    /// Forget the run state of a metric (e.g. when a vehicle unplugs).
    pub fn reset(&mut self, building: usize, metric: Metric) {
        self.state.remove(&(building, metric));
    }
}

/// Fixed observation layout shared by training and execution.
pub mod obs {
    pub const HOUR_SIN: usize = 0;
    pub const HOUR_COS: usize = 1;
    pub const DOW_SIN: usize = 2;
    pub const DOW_COS: usize = 3;
    pub const PRICE_NOW: usize = 4;
    pub const PRICE_NEXT: usize = 5;
    pub const PV_FORECAST: usize = 6;
    pub const LOAD_FORECAST: usize = 7;
    pub const BATTERY_SOC: usize = 8;
    pub const EV_CONNECTED: usize = 9;
    pub const EV_SOC: usize = 10;
    pub const EV_REQUIRED_KWH: usize = 11;
    pub const EV_INTERVALS_TO_DEPARTURE: usize = 12;
    pub const COMPLETENESS: usize = 13;
    pub const DIM: usize = 14;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationVector(pub Vec<f64>);

impl ObservationVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Effective EV parameters for the connected vehicle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvContext {
    pub capacity_kwh: f64,
    pub departure_step: usize,
    pub target_soc: f64,
}

/// Forecasts for the interval being decided.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepForecast {
    pub load_kwh: f64,
    pub pv_kwh: f64,
}

/// Encodes one building's observation. The vehicle counts as connected when
/// the frame expects an EV SoC; EV fields are zero otherwise.
pub fn encode_observation(
    frame: &AlignedFrame,
    building: usize,
    scenario: &ScenarioSpec,
    ev: Option<&EvContext>,
    forecast: StepForecast,
) -> ObservationVector {
    use std::f64::consts::TAU;
    let step = frame.step;
    let t = scenario.grid.instant(step);
    let day_phase = TAU * f64::from(t.hour() * 60 + t.minute()) / 1440.0;
    let week_phase = TAU * f64::from(t.weekday().num_days_from_monday()) / 7.0;
    let next = (step + 1).min(scenario.grid.steps.saturating_sub(1));
    let mut v = vec![0.0; obs::DIM];
    v[obs::HOUR_SIN] = day_phase.sin();
    v[obs::HOUR_COS] = day_phase.cos();
    v[obs::DOW_SIN] = week_phase.sin();
    v[obs::DOW_COS] = week_phase.cos();
    v[obs::PRICE_NOW] = scenario.tariff.import_at(step);
    v[obs::PRICE_NEXT] = scenario.tariff.import_at(next);
    v[obs::PV_FORECAST] = forecast.pv_kwh;
    v[obs::LOAD_FORECAST] = forecast.load_kwh;
    v[obs::BATTERY_SOC] = frame.value(building, Metric::BatterySoc).unwrap_or(0.0);
    if frame.expects(building, Metric::EvSoc) {
        let soc = frame.value(building, Metric::EvSoc).unwrap_or(0.0);
        v[obs::EV_CONNECTED] = 1.0;
        v[obs::EV_SOC] = soc;
        if let Some(ev) = ev {
            v[obs::EV_REQUIRED_KWH] = (ev.target_soc - soc).max(0.0) * ev.capacity_kwh;
            v[obs::EV_INTERVALS_TO_DEPARTURE] = ev.departure_step.saturating_sub(step) as f64;
        }
    }
    v[obs::COMPLETENESS] = frame.completeness;
    for x in &mut v {
        if !x.is_finite() {
            *x = 0.0;
        }
    }
    ObservationVector(v)
}

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("audit log {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("audit log {path} line {line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("audit record for building `{building}` at step {step} does not follow step {last}")]
    OutOfOrder { building: String, step: usize, last: usize },
}

/// One line of the audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub step: usize,
    pub ts: DateTime<Utc>,
    pub building: String,
    pub observation: Vec<f64>,
    pub proposed_action: Action,
    pub vetted_action: Action,
    pub interventions: Vec<Intervention>,
}

/// Append-only newline-delimited JSON log of observations and decisions.
pub struct AuditLog {
    path: PathBuf,
    out: BufWriter<File>,
    last_step: BTreeMap<String, usize>,
    records: usize,
}

impl AuditLog {
    /// Creates (truncating) the log at `path`.
    pub fn create(path: impl AsRef<Path>) -> Result<Self, StorageError> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(&path)
            .map_err(|source| StorageError::Io {
                path: path.clone(),
                source,
            })?;
        Ok(Self {
            path,
            out: BufWriter::new(file),
            last_step: BTreeMap::new(),
            records: 0,
        })
    }

    pub fn records(&self) -> usize {
        self.records
    }

    pub fn append(&mut self, rec: &AuditRecord) -> Result<(), StorageError> {
        if let Some(&last) = self.last_step.get(&rec.building) {
            if rec.step <= last {
                return Err(StorageError::OutOfOrder {
                    building: rec.building.clone(),
                    step: rec.step,
                    last,
                });
            }
        }
        let line = serde_json::to_string(rec).expect("audit record serializes");
        writeln!(self.out, "{line}").map_err(|source| StorageError::Io {
            path: self.path.clone(),
            source,
        })?;
        self.last_step.insert(rec.building.clone(), rec.step);
        self.records += 1;
        Ok(())
    }

    /// Writes one record per building for a decision step.
    #[allow(clippy::too_many_arguments)]
    pub fn log_decision(
        &mut self,
        step: usize,
        ts: DateTime<Utc>,
        buildings: &[String],
        observations: &[ObservationVector],
        proposed: &[Action],
        vetted: &[Action],
        interventions: &[Intervention],
    ) -> Result<(), StorageError> {
        for (i, id) in buildings.iter().enumerate() {
            let rec = AuditRecord {
                step,
                ts,
                building: id.clone(),
                observation: observations[i].0.clone(),
                proposed_action: proposed[i],
                vetted_action: vetted[i],
                interventions: interventions.iter().filter(|x| x.building == *id).cloned().collect(),
            };
            self.append(&rec)?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), StorageError> {
        self.out.flush().map_err(|source| StorageError::Io {
            path: self.path.clone(),
            source,
        })
    }
}

impl Drop for AuditLog {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}

pub fn read_audit_log(path: impl AsRef<Path>) -> Result<Vec<AuditRecord>, StorageError> {
    let path = path.as_ref();
    let io = |source| StorageError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(io)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| StorageError::Corrupt {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("replay file {path}: {message}")]
    Malformed { path: PathBuf, message: String },
}

/// Reads a raw reading replay file (`timestamp,source_id,metric,value`).
pub fn read_replay_csv(path: impl AsRef<Path>) -> Result<Vec<RawReading>, ReplayError> {
    let path = path.as_ref();
    let err = |message: String| ReplayError::Malformed {
        path: path.to_path_buf(),
        message,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
    let headers = rdr.headers().map_err(|e| err(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["timestamp", "source_id", "metric", "value"] {
        return Err(err("expected header `timestamp,source_id,metric,value`".into()));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| err(e.to_string()))?;
        let line = i + 2;
        let timestamp = DateTime::parse_from_rfc3339(rec[0].trim())
            .map_err(|e| err(format!("line {line}: bad timestamp: {e}")))?
            .with_timezone(&Utc);
        let metric = rec[2].trim().parse().map_err(|e| err(format!("line {line}: {e}")))?;
        let value = rec[3]
            .trim()
            .parse()
            .map_err(|_| err(format!("line {line}: bad value `{}`", &rec[3])))?;
        out.push(RawReading {
            source_id: rec[1].trim().to_string(),
            metric,
            timestamp,
            value,
        });
    }
    Ok(out)
}

pub fn write_replay_csv(path: impl AsRef<Path>, readings: &[RawReading]) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "timestamp,source_id,metric,value")?;
    for r in readings {
        writeln!(
            w,
            "{},{},{},{}",
            r.timestamp.to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            r.source_id,
            r.metric.as_str(),
            r.value
        )?;
    }
    w.flush()
}
