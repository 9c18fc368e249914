use std::fs;
use std::path::Path;

use wealthkin::harness::{self, Scale, Task};

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn equilibrium_scenario_writes_hashed_outputs() {
    let s = harness::parse_scenario(Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios/equilibrium.toml"))).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let m = harness::run_scenario(&s, dir.path()).unwrap();
    assert!(m.succeeded(), "{:?}", m.failures);
    assert!(harness::verify_manifest(dir.path()).unwrap().is_empty());
    assert!(read(dir.path(), "equilibrium.csv").starts_with("y,closed_form,numeric\n"));
    assert!(read(dir.path(), "tail_fit.csv").starts_with("source,lo,hi,slope,stderr,points,expected\n"));

    fs::write(dir.path().join("equilibrium.csv"), "tampered").unwrap();
    assert_eq!(harness::verify_manifest(dir.path()).unwrap(), vec!["equilibrium.csv".to_string()]);
}

#[test]
fn divergent_moment_is_recorded_as_failure() {
    let s = harness::parse_scenario(Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios/divergent_moment.toml"))).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let m = harness::run_scenario(&s, dir.path()).unwrap();
    assert!(!m.succeeded());
    assert!(m.failures.values().any(|f| f.contains("diverge")), "{:?}", m.failures);
    assert!(dir.path().join("equilibrium.csv").exists());
    assert!(dir.path().join("manifest.json").exists());
}

const SMALL: &str = r#"
seed = 11
scales = ["particles", "kinetic", "macro"]

[params]
d = 1.0
kappa = 2.0
epsilon = 0.2

[velocity]
phi = "sine"

[time]
t_final = 0.1

[grid]
nx = 8
ny = 100

[particles]
n_agents = 4000
"#;

#[test]
fn same_seed_reproduces_bytes_and_other_seed_differs() {
    let s = harness::parse_scenario_str(SMALL).unwrap();
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    harness::run_scenario(&s, a.path()).unwrap();
    harness::run_scenario(&s, b.path()).unwrap();
    harness::run_scenario(&s.with_seed(12), c.path()).unwrap();
    for name in ["particles_agents.csv", "kinetic_moments.csv", "macro.csv", "compare_norms.csv"] {
        assert_eq!(read(a.path(), name), read(b.path(), name), "{name}");
    }
    assert_ne!(read(a.path(), "particles_agents.csv"), read(c.path(), "particles_agents.csv"));
    assert_eq!(read(a.path(), "kinetic_moments.csv"), read(c.path(), "kinetic_moments.csv"));
}

#[test]
fn compare_without_shared_times_fails_cleanly() {
    let s = harness::parse_scenario_str(SMALL).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let m = harness::run_tasks(&s, dir.path(), &[Task::Scale(Scale::Equilibrium), Task::Compare]).unwrap();
    assert!(!m.succeeded());
}
