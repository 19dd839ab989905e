use std::path::{Path, PathBuf};

use otspc_core::harness::{load_scenario, run, run_file, scenario_dir, Party, SimReport};
use otspc_core::txgraph::PrivacyLevel;

/// Set to regenerate `scenarios/golden/*.log` from the current build.
const BLESS_ENV: &str = "OTSPC_BLESS";

fn bundled() -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(scenario_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    v.sort();
    v
}

fn log_text(r: &SimReport) -> String {
    let mut s = r.log.join("\n");
    s.push('\n');
    s
}

#[test]
fn bundled_scenarios_pass() {
    let files = bundled();
    assert!(files.len() >= 10, "only {} scenarios", files.len());
    for f in files {
        let r = run_file(&f).unwrap();
        assert!(r.passed(), "{}: {:?}", r.scenario, r.failures());
        let declared = r.assertions.iter().any(|a| a.check.contains("action_errors"));
        assert!(declared || r.action_errors.is_empty(), "{}: {:?}", r.scenario, r.action_errors);
    }
}

#[test]
fn golden_logs() {
    let dir = scenario_dir().join("golden");
    let bless = std::env::var_os(BLESS_ENV).is_some();
    for f in bundled() {
        let r = run_file(&f).unwrap();
        let path = dir.join(format!("{}.log", r.scenario));
        let text = log_text(&r);
        if bless {
            std::fs::write(&path, &text).unwrap();
            continue;
        }
        let want = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}; run with {BLESS_ENV}=1", path.display()));
        if want != text {
            let line = want.lines().zip(text.lines()).position(|(a, b)| a != b).unwrap_or(want.lines().count().min(text.lines().count()));
            panic!("{} drifted from its golden log at line {}", r.scenario, line + 1);
        }
    }
}

#[test]
fn same_seed_same_report() {
    for name in ["fig2_cheat", "l2_tower_offline", "l3_tower_offline", "htlc_claim"] {
        let a = run_file(Path::new(name)).unwrap();
        let b = run_file(Path::new(name)).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap(), "{name}");
    }
}

#[test]
fn seed_changes_the_run() {
    let mut sc = load_scenario(&scenario_dir().join("honest_exit.json")).unwrap();
    let a = run(&sc).unwrap();
    sc.config.seed += 1;
    let b = run(&sc).unwrap();
    assert!(a.passed() && b.passed());
    assert_ne!(a.log, b.log);
}

#[test]
fn fig2_holds_at_every_level() {
    let sc = load_scenario(&scenario_dir().join("fig2_cheat.json")).unwrap();
    for level in [PrivacyLevel::L1, PrivacyLevel::L2, PrivacyLevel::L3] {
        let mut s = sc.clone();
        s.config.level = level;
        let r = run(&s).unwrap();
        assert!(r.passed(), "{level:?}: {:?}", r.failures());
        assert_eq!(r.payouts.iter().find(|p| p.0 == Party::Bob).unwrap().1, 1_000_000);
    }
}

#[test]
fn unknown_fields_rejected() {
    let dir = std::env::temp_dir().join("otspc-scenario-test");
    std::fs::create_dir_all(&dir).unwrap();
    let p = dir.join("bad.json");
    std::fs::write(&p, r#"{"name":"x","config":{"seeed":1},"actions":[],"expect":[]}"#).unwrap();
    assert!(load_scenario(&p).is_err());
    std::fs::write(&p, r#"{"name":"x","actions":[{"action":"teleport"}],"expect":[]}"#).unwrap();
    assert!(load_scenario(&p).is_err());
}

#[test]
fn failing_expectation_is_reported() {
    let mut sc = load_scenario(&scenario_dir().join("honest_exit.json")).unwrap();
    sc.expect = serde_json::from_str(r#"[{"check":"payout","who":"alice","equals":1}]"#).unwrap();
    let r = run(&sc).unwrap();
    assert!(!r.passed());
    assert_eq!(r.failures().len(), 1);
}
