mod common;

use common::{degraded, safety_run, scenarios_dir};
use rec_core::control::TrainConfig;
use rec_core::run::{
    read_manifest, run_episode, run_evaluate, run_report, run_train, ControllerKind, Episode, EpisodeOptions,
    EvalSource, FlexConfig, RunError, AUDIT_FILE, KPI_JSON_FILE, MANIFEST_FILE, POLICY_FILE, SCENARIO_FILE,
};
use rec_core::scenario::{generate_synthetic, load_scenario, save_scenario};
use rec_core::supervisor::InterventionReason;
use rec_core::telemetry::obs;

#[test]
fn random_policy_never_leaves_the_envelope_and_every_override_is_audited() {
    let dir = tempfile::tempdir().unwrap();
    let summary = safety_run(105, 99, dir.path()).unwrap();
    assert!(summary.decisions >= 10_000);
    assert!(summary.interventions > 0);
    for reason in [
        InterventionReason::InvalidValue,
        InterventionReason::OverratedPower,
        InterventionReason::SocBound,
        InterventionReason::EvReserve,
        InterventionReason::StaleData,
    ] {
        assert!(summary.reasons.contains(&reason), "{reason:?} never exercised");
    }
}

#[test]
fn degraded_feed_yields_complete_observations() {
    let s = load_scenario(scenarios_dir().join("community4.scn.json")).unwrap();
    let mut ep = Episode::new(&s, degraded(17), Vec::new(), FlexConfig::default());
    let mut steps = 0;
    while !ep.is_done() {
        let o = ep.observe();
        assert_eq!(o.len(), 4);
        for v in o {
            assert_eq!(v.0.len(), obs::DIM);
            assert!(v.0.iter().all(|x| x.is_finite()), "step {steps}: {:?}", v.0);
        }
        let fallback = ep.fallback_actions().to_vec();
        ep.apply(&fallback).unwrap();
        steps += 1;
    }
    let stats = ep.finish().unwrap();
    assert_eq!(steps, s.grid.steps);
    assert_eq!(stats.incomplete_observations, 0);
    assert!(stats.min_completeness < 1.0);
    assert!(stats.align.accepted > 0);
}

#[test]
fn episodes_are_reproducible() {
    let s = generate_synthetic(3, 3, 10);
    let opts = EpisodeOptions {
        faults: degraded(17),
        ..EpisodeOptions::default()
    };
    let a = run_episode(&s, ControllerKind::Rbc, None, &opts, None).unwrap();
    let b = run_episode(&s, ControllerKind::Rbc, None, &opts, None).unwrap();
    assert_eq!(a.outcomes, b.outcomes);
    assert_eq!(a.stats, b.stats);
}

#[test]
fn rbc_meets_every_target_on_the_bundled_scenario() {
    let s = load_scenario(scenarios_dir().join("community4.scn.json")).unwrap();
    let r = run_episode(&s, ControllerKind::Rbc, None, &EpisodeOptions::default(), None).unwrap();
    let unmet: f64 = r.outcomes.iter().flat_map(|o| &o.buildings).map(|b| b.unmet_kwh).sum();
    assert_eq!(unmet, 0.0);
}

#[test]
fn bundled_scenarios_match_the_generator() {
    let dir = scenarios_dir();
    let community = load_scenario(dir.join("community4.scn.json")).unwrap();
    assert_eq!(community, generate_synthetic(42, 4, 30));
    assert_eq!(community.buildings.len(), 4);
    assert_eq!(community.grid.interval_minutes, 15);
    let golden = load_scenario(dir.join("golden_7_1_1.scn.json")).unwrap();
    assert_eq!(golden, generate_synthetic(7, 1, 1));
    // byte-stable serialization
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("g.json");
    save_scenario(&golden, &p).unwrap();
    assert_eq!(
        std::fs::read(&p).unwrap(),
        std::fs::read(dir.join("golden_7_1_1.scn.json")).unwrap()
    );
}

fn small_config() -> TrainConfig {
    TrainConfig {
        episodes: 2,
        batch: 32,
        buffer_capacity: 5_000,
        ..TrainConfig::default()
    }
}

#[test]
fn run_directory_is_complete_and_self_contained() {
    let tmp = tempfile::tempdir().unwrap();
    let scenario_path = tmp.path().join("small.scn.json");
    save_scenario(&generate_synthetic(21, 2, 4), &scenario_path).unwrap();
    let run = tmp.path().join("run");
    let mut logged = 0;
    let out = run_train(
        &scenario_path,
        &small_config(),
        &EpisodeOptions::default(),
        &run,
        |_| logged += 1,
    )
    .unwrap();
    assert_eq!(logged, 2);
    for f in [
        SCENARIO_FILE,
        MANIFEST_FILE,
        POLICY_FILE,
        AUDIT_FILE,
        KPI_JSON_FILE,
        "kpi.txt",
    ] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let manifest = read_manifest(&run).unwrap();
    assert_eq!(manifest, out.manifest);
    assert_eq!(
        manifest.scenario_hash,
        load_scenario(run.join(SCENARIO_FILE)).unwrap().content_hash()
    );
    assert_eq!(manifest.train_config, Some(small_config()));
    assert_eq!(manifest.training.len(), 2);

    let kpi = std::fs::read(run.join(KPI_JSON_FILE)).unwrap();
    let again = tmp.path().join("again");
    run_evaluate(
        EvalSource::RunDir(&run),
        ControllerKind::Maddpg,
        &EpisodeOptions::default(),
        &again,
    )
    .unwrap();
    assert_eq!(std::fs::read(again.join(KPI_JSON_FILE)).unwrap(), kpi);
    assert_eq!(
        std::fs::read(again.join(POLICY_FILE)).unwrap(),
        std::fs::read(run.join(POLICY_FILE)).unwrap()
    );

    let (table, report) = run_report(&run).unwrap();
    assert_eq!(table.lines().count(), 6);
    assert_eq!(report, out.report);
    // the table shows the JSON numbers rounded to two decimals
    let c = report.community_delta.c.unwrap();
    assert!(table
        .lines()
        .find(|l| l.starts_with('C'))
        .unwrap()
        .ends_with(&format!("{c:+.2}%")));
}

#[test]
fn baseline_against_itself_has_zero_deltas() {
    let tmp = tempfile::tempdir().unwrap();
    let scenario_path = tmp.path().join("s.json");
    save_scenario(&generate_synthetic(4, 3, 3), &scenario_path).unwrap();
    let out = tmp.path().join("eval");
    let (report, _) = run_evaluate(
        EvalSource::Files {
            scenario: &scenario_path,
            policy: None,
        },
        ControllerKind::None,
        &EpisodeOptions::default(),
        &out,
    )
    .unwrap();
    let d = &report.community_delta;
    assert_eq!((d.c, d.p, d.r, d.z), (Some(0.0), Some(0.0), Some(0.0), Some(0.0)));
    for b in &report.per_building_delta {
        assert_eq!((b.d, b.c, b.z), (Some(0.0), Some(0.0), Some(0.0)));
    }
}

#[test]
fn missing_artifacts_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(matches!(run_report(tmp.path()), Err(RunError::MissingArtifacts { .. })));
    let err = run_evaluate(
        EvalSource::RunDir(tmp.path()),
        ControllerKind::Rbc,
        &EpisodeOptions::default(),
        tmp.path(),
    )
    .unwrap_err();
    assert!(err.is_validation(), "{err}");
}

#[test]
fn policy_for_another_community_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let s2 = tmp.path().join("two.json");
    let s3 = tmp.path().join("three.json");
    save_scenario(&generate_synthetic(1, 2, 2), &s2).unwrap();
    save_scenario(&generate_synthetic(1, 3, 2), &s3).unwrap();
    let cfg = TrainConfig {
        episodes: 1,
        ..small_config()
    };
    let run = tmp.path().join("run");
    run_train(&s2, &cfg, &EpisodeOptions::default(), &run, |_| {}).unwrap();
    let err = run_evaluate(
        EvalSource::Files {
            scenario: &s3,
            policy: Some(&run.join(POLICY_FILE)),
        },
        ControllerKind::Maddpg,
        &EpisodeOptions::default(),
        &tmp.path().join("x"),
    )
    .unwrap_err();
    assert!(err.is_validation(), "{err}");
}
