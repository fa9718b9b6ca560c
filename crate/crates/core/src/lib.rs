//! Simulation, control and evaluation of a renewable energy community:
//! a digital twin of buildings with PV, batteries and EV chargers, a
//! telemetry pipeline, multi-agent reinforcement-learning control with a
//! rule-based fallback, a safety supervisor and KPI reporting.

mod float_repr;

pub mod control;
pub mod evgateway;
pub mod flexibility;
pub mod forecast;
pub mod kpi;
pub mod nn;
pub mod run;
pub mod scenario;
pub mod supervisor;
pub mod telemetry;
pub mod twin;

/// Policy parameters in the default precision.
pub type Policy = control::PolicyParams<f64>;
pub type Network = nn::Mlp<f64>;
pub type Optimizer = nn::Adam<f64>;
pub type PolicyTrainer = control::Trainer<f64>;
