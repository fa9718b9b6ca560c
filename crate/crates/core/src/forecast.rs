//! Short-term consumption and production forecasts from hour-of-week means
//! of the trailing four weeks of measured data, with persistence and a
//! scenario default profile as fallbacks.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::scenario::{ScenarioSpec, TimeGrid};
use crate::telemetry::{AlignedFrame, Metric, QualityFlag};

/// Weeks of history kept per hour-of-week slot.
pub const TRAILING_WEEKS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForecastSource {
    HourOfWeek,
    Persistence,
    DefaultProfile,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Forecast {
    pub metric: Metric,
    pub step: usize,
    pub value_kwh: f64,
    pub source: ForecastSource,
}

/// Last-resort values when no history exists.
pub trait DefaultProfile {
    fn default_value(&self, building: usize, metric: Metric, step: usize) -> f64;
}

/// Default profile derived from the scenario document: the typical-day mean
/// of each load and PV series, initial battery SoC, and the tariff.
#[derive(Debug, Clone)]
pub struct ScenarioDefaults {
    steps_per_day: usize,
    load: Vec<Vec<f64>>,
    pv: Vec<Vec<f64>>,
    battery_soc: Vec<f64>,
    price: Vec<f64>,
}

impl ScenarioDefaults {
    pub fn from_scenario(s: &ScenarioSpec) -> Self {
        let spd = s.grid.steps_per_day();
        let typical_day = |values: &[f64]| -> Vec<f64> {
            let mut sum = vec![0.0; spd];
            let mut n = vec![0usize; spd];
            for (k, v) in values.iter().enumerate() {
                sum[k % spd] += v;
                n[k % spd] += 1;
            }
            sum.iter()
                .zip(&n)
                .map(|(s, n)| if *n > 0 { s / *n as f64 } else { 0.0 })
                .collect()
        };
        Self {
            steps_per_day: spd,
            load: s
                .buildings
                .iter()
                .map(|b| typical_day(b.load_profile.values()))
                .collect(),
            pv: s
                .buildings
                .iter()
                .map(|b| {
                    b.pv.as_ref()
                        .map_or(vec![0.0; spd], |pv| typical_day(pv.profile.values()))
                })
                .collect(),
            battery_soc: s
                .buildings
                .iter()
                .map(|b| b.battery.as_ref().map_or(0.0, |x| x.soc_init))
                .collect(),
            price: s.tariff.import_price.values().to_vec(),
        }
    }
}

impl DefaultProfile for ScenarioDefaults {
    fn default_value(&self, building: usize, metric: Metric, step: usize) -> f64 {
        let slot = step % self.steps_per_day;
        match metric {
            Metric::LoadKwh => self.load[building][slot],
            Metric::PvKwh => self.pv[building][slot],
            Metric::BatterySoc => self.battery_soc[building],
            Metric::EvSoc => 0.5,
            Metric::EvPowerKw => 0.0,
            Metric::Price => self.price.get(step).copied().unwrap_or(0.0),
        }
    }
}

/// Constant default, handy for tests and replay files without a scenario.
#[derive(Debug, Clone, Copy)]
pub struct ConstantDefault(pub f64);

impl DefaultProfile for ConstantDefault {
    fn default_value(&self, _: usize, _: Metric, _: usize) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
struct SeriesModel {
    /// Per hour-of-week slot, the last `TRAILING_WEEKS` occurrences, oldest
    /// first; `None` marks an occurrence that was not measured.
    slots: Vec<VecDeque<Option<f64>>>,
    last_measured: Option<f64>,
}

impl SeriesModel {
    fn new(slots: usize) -> Self {
        Self {
            slots: vec![VecDeque::with_capacity(TRAILING_WEEKS); slots],
            last_measured: None,
        }
    }

    fn push(&mut self, slot: usize, value: Option<f64>) {
        let q = &mut self.slots[slot];
        if q.len() == TRAILING_WEEKS {
            q.pop_front();
        }
        q.push_back(value);
        if value.is_some() {
            self.last_measured = value;
        }
    }

    fn slot_stat(&self, slot: usize) -> (f64, usize) {
        let mut sum = 0.0;
        let mut n = 0;
        for v in self.slots[slot].iter().flatten() {
            sum += v;
            n += 1;
        }
        (sum, n)
    }
}

/// Hour-of-week trailing-mean tables per building and metric.
#[derive(Debug, Clone)]
pub struct ForecastModel {
    grid: TimeGrid,
    series: BTreeMap<(usize, Metric), SeriesModel>,
    defaults: ScenarioDefaults,
    /// Persistence horizon in steps.
    pub horizon: usize,
}

impl ForecastModel {
    pub fn new(grid: TimeGrid, defaults: ScenarioDefaults) -> Self {
        Self {
            grid,
            series: BTreeMap::new(),
            defaults,
            horizon: 1,
        }
    }

    pub fn for_scenario(s: &ScenarioSpec) -> Self {
        Self::new(s.grid.clone(), ScenarioDefaults::from_scenario(s))
    }

    pub fn defaults(&self) -> &ScenarioDefaults {
        &self.defaults
    }

    /// Feeds one aligned frame. Only `measured` values count toward means;
    /// other occurrences still age the window.
    pub fn observe(&mut self, frame: &AlignedFrame) {
        let slot = self.grid.hour_of_week_slot(frame.step);
        let slots = self.grid.slots_per_week();
        for (b, values) in frame.values.iter().enumerate() {
            for (metric, cell) in values {
                let measured = cell.filter(|c| c.flag == QualityFlag::Measured).map(|c| c.value);
                self.series
                    .entry((b, *metric))
                    .or_insert_with(|| SeriesModel::new(slots))
                    .push(slot, measured);
            }
        }
    }

    /// Trailing mean and sample count of the slot containing `step`.
    pub fn slot_mean(&self, building: usize, metric: Metric, step: usize) -> Option<(f64, usize)> {
        let m = self.series.get(&(building, metric))?;
        let (sum, n) = m.slot_stat(self.grid.hour_of_week_slot(step));
        (n > 0).then(|| (sum / n as f64, n))
    }

    pub fn last_measured(&self, building: usize, metric: Metric) -> Option<f64> {
        self.series.get(&(building, metric)).and_then(|m| m.last_measured)
    }

    pub fn default_value(&self, building: usize, metric: Metric, step: usize) -> f64 {
        self.defaults.default_value(building, metric, step)
    }

    pub fn predict(&self, building: usize, metric: Metric, step: usize) -> Forecast {
        let (value_kwh, source) = if let Some((mean, _)) = self.slot_mean(building, metric, step) {
            (mean, ForecastSource::HourOfWeek)
        } else if let Some(v) = self.last_measured(building, metric) {
            (v, ForecastSource::Persistence)
        } else {
            (
                self.default_value(building, metric, step),
                ForecastSource::DefaultProfile,
            )
        };
        let value_kwh = if metric.is_non_negative() {
            value_kwh.max(0.0)
        } else {
            value_kwh
        };
        Forecast {
            metric,
            step,
            value_kwh,
            source,
        }
    }
}

/// Fits a model on the trailing four weeks of `history`. Frames may arrive
/// in any order; they are processed by step.
pub fn fit_profile(history: &[AlignedFrame], grid: &TimeGrid, defaults: ScenarioDefaults) -> ForecastModel {
    let mut model = ForecastModel::new(grid.clone(), defaults);
    let Some(end) = history.iter().map(|f| f.step + 1).max() else {
        return model;
    };
    let window = TRAILING_WEEKS * grid.slots_per_week();
    let mut frames: Vec<&AlignedFrame> = history.iter().filter(|f| f.step + window >= end).collect();
    frames.sort_by_key(|f| f.step);
    for f in frames {
        model.observe(f);
    }
    model
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::generate_synthetic;
    use crate::telemetry::Cell;

    fn frames(s: &ScenarioSpec, values: impl Fn(usize) -> Option<f64>, n: usize) -> Vec<AlignedFrame> {
        (0..n)
            .map(|step| {
                let mut m = BTreeMap::new();
                m.insert(Metric::LoadKwh, values(step).map(Cell::measured));
                let mut f = AlignedFrame::empty(step, s.buildings.len());
                f.values[0] = m;
                f
            })
            .collect()
    }

    #[test]
    fn cold_start_uses_default_profile() {
        let s = generate_synthetic(1, 1, 1);
        let model = fit_profile(&[], &s.grid, ScenarioDefaults::from_scenario(&s));
        let f = model.predict(0, Metric::LoadKwh, 10);
        assert_eq!(f.source, ForecastSource::DefaultProfile);
        assert_eq!(f.value_kwh, s.buildings[0].load_profile.at(10));
    }

    #[test]
    fn constant_history_is_a_fixpoint() {
        let s = generate_synthetic(1, 1, 7);
        let h = frames(&s, |_| Some(0.5), 672);
        let model = fit_profile(&h, &s.grid, ScenarioDefaults::from_scenario(&s));
        for step in (672..700).chain([0, 300]) {
            let f = model.predict(0, Metric::LoadKwh, step);
            assert_eq!((f.value_kwh, f.source), (0.5, ForecastSource::HourOfWeek));
        }
    }

    #[test]
    fn two_week_slot_mean() {
        let s = generate_synthetic(1, 1, 14);
        let h = frames(&s, |k| Some(if k < 672 { 0.4 } else { 0.6 }), 1344);
        let model = fit_profile(&h, &s.grid, ScenarioDefaults::from_scenario(&s));
        let (mean, n) = model.slot_mean(0, Metric::LoadKwh, 5).unwrap();
        assert_eq!(n, 2);
        assert!((mean - 0.5).abs() < 1e-15);
    }

    #[test]
    fn unfitted_slot_falls_back_to_persistence() {
        let s = generate_synthetic(1, 1, 7);
        let h = frames(&s, |k| (k == 3).then_some(0.7), 10);
        let model = fit_profile(&h, &s.grid, ScenarioDefaults::from_scenario(&s));
        let f = model.predict(0, Metric::LoadKwh, 8);
        assert_eq!((f.value_kwh, f.source), (0.7, ForecastSource::Persistence));
        let f = model.predict(0, Metric::LoadKwh, 3);
        assert_eq!(f.source, ForecastSource::HourOfWeek);
    }

    #[test]
    fn imputed_values_are_not_fitted() {
        let s = generate_synthetic(1, 1, 7);
        let mut h = frames(&s, |_| Some(0.3), 20);
        h[5].values[0].insert(
            Metric::LoadKwh,
            Some(Cell {
                value: 9.0,
                flag: QualityFlag::PatternImputed,
            }),
        );
        let model = fit_profile(&h, &s.grid, ScenarioDefaults::from_scenario(&s));
        assert!(model.slot_mean(0, Metric::LoadKwh, 5).is_none());
    }

    #[test]
    fn weekly_periodic_load_is_forecast_exactly() {
        let s = generate_synthetic(2, 1, 35);
        let pattern = |k: usize| 0.1 + ((k % 672) as f64 * 0.37).sin().abs() * 0.8;
        let h = frames(&s, |k| Some(pattern(k)), 4 * 672);
        let model = fit_profile(&h, &s.grid, ScenarioDefaults::from_scenario(&s));
        for step in 4 * 672..5 * 672 {
            assert_eq!(model.predict(0, Metric::LoadKwh, step).value_kwh, pattern(step));
        }
    }

    #[test]
    fn fitting_ignores_input_order() {
        let s = generate_synthetic(2, 1, 35);
        let h = frames(&s, |k| Some((k as f64 * 0.13).cos().abs()), 3 * 672 + 50);
        let mut shuffled = h.clone();
        shuffled.reverse();
        shuffled.swap(3, 700);
        let d = ScenarioDefaults::from_scenario(&s);
        let a = fit_profile(&h, &s.grid, d.clone());
        let b = fit_profile(&shuffled, &s.grid, d);
        for step in 0..672 {
            assert_eq!(
                a.slot_mean(0, Metric::LoadKwh, step),
                b.slot_mean(0, Metric::LoadKwh, step)
            );
        }
    }
}
