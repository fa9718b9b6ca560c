//! Key performance indicators of a finished episode and their normalization
//! against the uncontrolled baseline.
//!
//! * `D` imported energy (kWh)
//! * `C` electricity cost (import cost minus export credit)
//! * `Z` self-sufficiency, `1 - imports / consumption`
//! * `P` mean over days of the daily maximum community import (kWh per interval)
//! * `R` ramping, total absolute change of community net exchange

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::twin::StepOutcome;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KpiError {
    #[error("episode has no steps")]
    EmptyRun,
    #[error("control and baseline cover different buildings")]
    Mismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BuildingKpi {
    pub d: f64,
    pub c: f64,
    pub z: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommunityKpi {
    pub c: f64,
    pub z: f64,
    pub p: f64,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawKpis {
    pub buildings: Vec<String>,
    pub per_building: Vec<BuildingKpi>,
    pub community: CommunityKpi,
    /// EV energy short of target at departure, summed over buildings.
    pub ev_shortfall_kwh: f64,
}

/// Percentage deltas; `None` where the baseline value is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BuildingDelta {
    pub d: Option<f64>,
    pub c: Option<f64>,
    pub z: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommunityDelta {
    pub c: Option<f64>,
    pub z: Option<f64>,
    pub p: Option<f64>,
    pub r: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KpiReport {
    pub controller: String,
    pub control: RawKpis,
    pub baseline: RawKpis,
    pub per_building_delta: Vec<BuildingDelta>,
    pub community_delta: CommunityDelta,
}

fn self_sufficiency(imports: f64, consumption: f64) -> f64 {
    if consumption > 0.0 {
        (1.0 - imports / consumption).clamp(0.0, 1.0)
    } else {
        1.0
    }
}

/// Raw KPIs of one episode. `steps_per_day` groups intervals into days
/// for the peak; a trailing partial day counts as a day.
pub fn compute_kpis(run: &[StepOutcome], buildings: &[String], steps_per_day: usize) -> Result<RawKpis, KpiError> {
    if run.is_empty() {
        return Err(KpiError::EmptyRun);
    }
    let n = buildings.len();
    let mut d = vec![0.0; n];
    let mut c = vec![0.0; n];
    let mut cons = vec![0.0; n];
    let mut shortfall = 0.0;
    for o in run {
        if o.buildings.len() != n {
            return Err(KpiError::Mismatch);
        }
        for (i, f) in o.buildings.iter().enumerate() {
            d[i] += f.net.max(0.0);
            c[i] += f.cost();
            cons[i] += f.consumption();
            shortfall += f.unmet_kwh;
        }
    }
    let per_building: Vec<BuildingKpi> = (0..n)
        .map(|i| BuildingKpi {
            d: d[i],
            c: c[i],
            z: self_sufficiency(d[i], cons[i]),
        })
        .collect();
    let series: Vec<f64> = run.iter().map(|o| o.community_kwh).collect();
    let day = steps_per_day.max(1);
    let peaks: Vec<f64> = series
        .chunks(day)
        .map(|ch| ch.iter().fold(0.0f64, |m, v| m.max(v.max(0.0))))
        .collect();
    let community = CommunityKpi {
        c: c.iter().sum(),
        z: self_sufficiency(d.iter().sum(), cons.iter().sum()),
        p: peaks.iter().sum::<f64>() / peaks.len() as f64,
        r: series.windows(2).map(|w| (w[1] - w[0]).abs()).sum(),
    };
    Ok(RawKpis {
        buildings: buildings.to_vec(),
        per_building,
        community,
        ev_shortfall_kwh: shortfall,
    })
}

/// `(control / baseline - 1) * 100`, undefined for a non-positive baseline.
pub fn relative_delta(control: f64, baseline: f64) -> Option<f64> {
    (baseline > 0.0).then(|| (control / baseline - 1.0) * 100.0)
}

/// Percentage-point difference, improvement positive.
pub fn z_delta(control: f64, baseline: f64) -> Option<f64> {
    Some((control - baseline) * 100.0)
}

pub fn normalize_report(controller: &str, control: RawKpis, baseline: RawKpis) -> Result<KpiReport, KpiError> {
    if control.buildings != baseline.buildings {
        return Err(KpiError::Mismatch);
    }
    let per_building_delta = control
        .per_building
        .iter()
        .zip(&baseline.per_building)
        .map(|(c, b)| BuildingDelta {
            d: relative_delta(c.d, b.d),
            c: relative_delta(c.c, b.c),
            z: z_delta(c.z, b.z),
        })
        .collect();
    let (c, b) = (&control.community, &baseline.community);
    let community_delta = CommunityDelta {
        c: relative_delta(c.c, b.c),
        z: z_delta(c.z, b.z),
        p: relative_delta(c.p, b.p),
        r: relative_delta(c.r, b.r),
    };
    Ok(KpiReport {
        controller: controller.to_string(),
        control,
        baseline,
        per_building_delta,
        community_delta,
    })
}

fn cell(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:+.2}%"),
        None => "n/a".to_string(),
    }
}

/// Aligned text table: KPI rows, one column per building plus the
/// community. Cells not defined at that level show `-`.
pub fn render_table(r: &KpiReport) -> String {
    let mut header = vec!["KPI".to_string()];
    header.extend(r.control.buildings.iter().cloned());
    header.push("REC".into());
    let pb = &r.per_building_delta;
    let cd = &r.community_delta;
    let dash = || "-".to_string();
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut row = |name: &str, per: Vec<String>, rec: String| {
        let mut v = vec![name.to_string()];
        v.extend(per);
        v.push(rec);
        rows.push(v);
    };
    row("D", pb.iter().map(|d| cell(d.d)).collect(), dash());
    row("C", pb.iter().map(|d| cell(d.c)).collect(), cell(cd.c));
    row("Z", pb.iter().map(|d| cell(d.z)).collect(), cell(cd.z));
    row("P", pb.iter().map(|_| dash()).collect(), cell(cd.p));
    row("R", pb.iter().map(|_| dash()).collect(), cell(cd.r));
    let widths: Vec<usize> = (0..header.len())
        .map(|j| {
            rows.iter()
                .map(|r| r[j].len())
                .chain([header[j].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let line = |out: &mut String, cells: &[String]| {
        let parts: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(j, c)| {
                if j == 0 {
                    format!("{c:<w$}", w = widths[j])
                } else {
                    format!("{c:>w$}", w = widths[j])
                }
            })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&mut out, &header);
    for r in &rows {
        line(&mut out, r);
    }
    out
}
