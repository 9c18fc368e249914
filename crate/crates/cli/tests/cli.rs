use std::fs;
use std::process::Command;

fn wealthkin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_wealthkin"))
}

fn scenario(dir: &std::path::Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("scenario.toml");
    fs::write(&path, text).unwrap();
    path
}

const OK: &str = "scales = [\"equilibrium\"]\n[params]\nd = 1.0\nkappa = 1.0\nepsilon = 1.0\n";

#[test]
fn equilibrium_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let path = scenario(dir.path(), OK);
    let out = dir.path().join("out");
    let status = wealthkin()
        .args(["equilibrium", "--scenario"])
        .arg(&path)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(out.join("manifest.json").exists());
}

#[test]
fn misspelled_key_is_a_validation_error_with_suggestion() {
    let dir = tempfile::tempdir().unwrap();
    let path = scenario(dir.path(), &OK.replace("kappa", "kapa"));
    let output = wealthkin().args(["run", "--scenario"]).arg(&path).output().unwrap();
    assert_eq!(output.status.code(), Some(1));
    let err = String::from_utf8_lossy(&output.stderr);
    assert!(err.contains("did you mean `kappa`"), "{err}");
}

#[test]
fn invalid_parameter_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = scenario(dir.path(), &OK.replace("kappa = 1.0", "kappa = -1.0"));
    let status = wealthkin().args(["run", "--scenario"]).arg(&path).status().unwrap();
    assert_eq!(status.code(), Some(1));
}

#[test]
fn numerical_failure_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = scenario(dir.path(), &format!("{OK}[equilibrium]\nmoments = [0, 1, 2, 3]\n"));
    let out = dir.path().join("out");
    let status = wealthkin()
        .args(["equilibrium", "--scenario"])
        .arg(&path)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
    assert!(out.join("manifest.json").exists());
}

#[test]
fn thread_count_does_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let text = "seed = 4\nscales = [\"particles\", \"kinetic\"]\n[params]\nd = 1.0\nkappa = 1.0\nepsilon = 0.5\n\
                [velocity]\nphi = \"sine\"\n[time]\nt_final = 0.05\n[grid]\nnx = 4\nny = 100\n\
                [particles]\nn_agents = 2000\n[compare]\nagents = [500, 1000]\n";
    let path = scenario(dir.path(), text);
    let mut outputs = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.path().join(threads);
        let status = wealthkin()
            .args(["run", "--threads", threads, "--scenario"])
            .arg(&path)
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert_eq!(status.code(), Some(0));
        outputs.push(fs::read(out.join("sweep.csv")).unwrap());
        outputs.push(fs::read(out.join("particles_agents.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[2]);
    assert_eq!(outputs[1], outputs[3]);
}
