use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rec_core::control::TrainConfig;
use rec_core::flexibility::load_preferences;
use rec_core::run::{
    run_evaluate, run_report, run_train, ControllerKind, EpisodeOptions, EvalSource, FlexConfig, RunError,
};
use rec_core::scenario::{generate_synthetic, load_scenario, save_scenario, validate_scenario};
use rec_core::twin::FaultConfig;

const EXIT_USAGE: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(
    name = "recctl",
    version,
    about = "Train, evaluate and report energy-community controllers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic community scenario.
    Gen {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        buildings: usize,
        #[arg(long, default_value_t = 30)]
        days: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train MADDPG agents, then evaluate the greedy policy.
    Train {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON file with training settings; flags take precedence.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        episode: EpisodeFlags,
    },
    /// Run one deterministic evaluation episode against the `none` baseline.
    Eval {
        /// Run directory to evaluate; provides scenario and policy.
        #[arg(long, conflicts_with_all = ["scenario", "policy"])]
        run: Option<PathBuf>,
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long, value_parser = parse_controller, default_value = "maddpg")]
        controller: ControllerKind,
        /// Output directory; defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        episode: EpisodeFlags,
    },
    /// Print the KPI table of an evaluated run.
    Report {
        #[arg(long)]
        run: PathBuf,
        /// Print the JSON report instead of the table.
        #[arg(long)]
        json: bool,
    },
}

fn parse_controller(s: &str) -> Result<ControllerKind, String> {
    s.parse()
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    actor_lr: Option<f64>,
    #[arg(long)]
    critic_lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    buffer_capacity: Option<usize>,
    #[arg(long)]
    sigma_start: Option<f64>,
    #[arg(long)]
    sigma_decay: Option<f64>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    lambda_peak: Option<f64>,
    #[arg(long)]
    lambda_ev: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    updates_every: Option<usize>,
}

impl TrainFlags {
    fn apply(&self, c: &mut TrainConfig) {
        macro_rules! over {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.$f = v; } )* };
        }
        over!(
            gamma,
            tau,
            actor_lr,
            critic_lr,
            batch,
            buffer_capacity,
            sigma_start,
            sigma_decay,
            episodes,
            lambda_peak,
            lambda_ev,
            seed,
            updates_every
        );
    }
}

#[derive(Args)]
struct EpisodeFlags {
    /// Probability of dropping each telemetry reading.
    #[arg(long, default_value_t = 0.0)]
    dropout_rate: f64,
    /// Relative sigma of multiplicative reading noise.
    #[arg(long, default_value_t = 0.0)]
    noise_sigma: f64,
    /// Maximum timestamp skew, seconds.
    #[arg(long, default_value_t = 0.0)]
    skew_s: f64,
    #[arg(long, default_value_t = 0)]
    fault_seed: u64,
    /// JSON user preferences (departure, target SoC, earliest start).
    #[arg(long)]
    prefs: Option<PathBuf>,
    #[arg(long, default_value_t = FlexConfig::default().confidence)]
    confidence: f64,
    #[arg(long, default_value_t = FlexConfig::default().min_samples)]
    min_samples: usize,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        if e.is_validation() {
            Failure::Usage(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl EpisodeFlags {
    fn options(&self, scenario: &Path) -> Result<EpisodeOptions, Failure> {
        let faults = FaultConfig {
            dropout_rate: self.dropout_rate,
            noise_sigma: self.noise_sigma,
            skew_s: self.skew_s,
            seed: self.fault_seed,
        };
        if !(0.0..=1.0).contains(&faults.dropout_rate) || faults.noise_sigma < 0.0 || faults.skew_s < 0.0 {
            return Err(Failure::Usage("fault parameters out of range".into()));
        }
        if !(0.0 < self.confidence && self.confidence < 1.0) {
            return Err(Failure::Usage("--confidence must lie in (0, 1)".into()));
        }
        let prefs = match &self.prefs {
            Some(p) => {
                let s = load_scenario(scenario).map_err(|e| Failure::Usage(e.to_string()))?;
                load_preferences(p, &s).map_err(|e| Failure::Usage(e.to_string()))?
            }
            None => Vec::new(),
        };
        Ok(EpisodeOptions {
            faults,
            prefs,
            flex: FlexConfig {
                confidence: self.confidence,
                min_samples: self.min_samples,
            },
        })
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Gen {
            seed,
            buildings,
            days,
            out,
        } => {
            if buildings == 0 || days == 0 {
                return Err(Failure::Usage("--buildings and --days must be positive".into()));
            }
            let s = generate_synthetic(seed, buildings, days);
            let violations = validate_scenario(&s);
            if !violations.is_empty() {
                return Err(Failure::Runtime(format!(
                    "generated scenario is invalid: {violations:?}"
                )));
            }
            save_scenario(&s, &out).map_err(|e| Failure::Runtime(e.to_string()))?;
            println!("wrote {} ({})", out.display(), s.content_hash());
        }
        Command::Train {
            scenario,
            out,
            config,
            train,
            episode,
        } => {
            let mut cfg = match config {
                Some(p) => {
                    let text =
                        std::fs::read_to_string(&p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
                    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?
                }
                None => TrainConfig::default(),
            };
            train.apply(&mut cfg);
            let opts = episode.options(&scenario)?;
            let total = cfg.episodes;
            let done = run_train(&scenario, &cfg, &opts, &out, |l| {
                eprintln!(
                    "episode {}/{total}: mean reward {:.4}, cost {:.2}, critic loss {:.4}",
                    l.episode + 1,
                    l.mean_reward,
                    l.community_cost,
                    l.critic_loss
                )
            })?;
            print!("{}", rec_core::kpi::render_table(&done.report));
            println!("run {} written to {}", done.manifest.run_id, done.dir.display());
        }
        Command::Eval {
            run,
            scenario,
            policy,
            controller,
            out,
            episode,
        } => {
            let (source, scenario_path, out) = match (&run, &scenario) {
                (Some(dir), _) => (
                    EvalSource::RunDir(dir),
                    dir.join(rec_core::run::SCENARIO_FILE),
                    out.unwrap_or(dir.clone()),
                ),
                (None, Some(sc)) => {
                    let out = out.ok_or_else(|| Failure::Usage("--out is required with --scenario".into()))?;
                    (
                        EvalSource::Files {
                            scenario: sc,
                            policy: policy.as_deref(),
                        },
                        sc.clone(),
                        out,
                    )
                }
                (None, None) => return Err(Failure::Usage("either --run or --scenario is required".into())),
            };
            let opts = episode.options(&scenario_path)?;
            let (report, stats) = run_evaluate(source, controller, &opts, &out)?;
            print!("{}", rec_core::kpi::render_table(&report));
            println!(
                "completeness min {:.3} mean {:.3}; {} supervisor interventions",
                stats.min_completeness, stats.mean_completeness, stats.interventions
            );
        }
        Command::Report { run, json } => {
            let (table, report) = run_report(&run)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            } else {
                print!("{table}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
