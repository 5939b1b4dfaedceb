use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn delayflow(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_delayflow"))
        .args(args)
        .current_dir(cwd)
        .env_remove("DELAYFLOW_API_KEY")
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = r#"
[synth]
n_stations = 5
n_days = 9

[[synth.delays]]
day = 7
start = "17:20:00"
end = "18:00:00"
interval_from = "S02"
interval_to = "S04"
delay_type = "SignalingFault"
drop_fraction = 0.5
surge_fraction = 1.0
surge_duration = 4
"#;

#[test]
fn synth_ingest_run_report() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("small.toml"), SMALL).unwrap();

    let o = delayflow(&["--config", "small.toml", "synth", "--dir", "data"], dir);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("for 5 stations over 9 days"));
    for f in ["afc.csv", "events.csv", "adjacency.csv"] {
        assert!(dir.join("data").join(f).is_file());
    }

    let files = [
        "--set", "paths.afc=\"data/afc.csv\"",
        "--set", "paths.events=\"data/events.csv\"",
        "--set", "paths.adjacency=\"data/adjacency.csv\"",
    ];
    let mut args = vec!["--config", "small.toml"];
    args.extend(files);
    args.extend(["ingest", "--dir", "ingested"]);
    let o = delayflow(&args, dir);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("-> 10 series"), "{}", stdout(&o));
    assert!(dir.join("ingested/flows.csv").is_file());

    let mut args = vec!["--config", "small.toml", "--out", "runs", "--models", "sn,p1,p2", "--seed", "5"];
    args.extend(files);
    args.push("run");
    let o = delayflow(&args, dir);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("| SeasonalNaive |") && out.contains("| P2 | 11.75 | 8.61 |"));
    let run_dir = fs::read_dir(dir.join("runs")).unwrap().next().unwrap().unwrap().path();
    let config = fs::read_to_string(run_dir.join("config.toml")).unwrap();
    assert!(config.contains("seed = 5"));
    assert!(config.contains("models = [\"seasonal-naive\", \"p1\", \"p2\"]"), "{config}");

    let o = delayflow(&["report", run_dir.to_str().unwrap()], dir);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("| P1 |"));
}

#[test]
fn score_templates_reports_the_winner() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("small.toml"), SMALL).unwrap();
    let o = delayflow(&["--config", "small.toml", "--out", "scores", "score-templates"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("of 48 templates"), "{}", stdout(&o));
    assert!(stdout(&o).contains("best: gen-"));
}

#[test]
fn bad_input_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let o = delayflow(&["--set", "noequals", "run"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("KEY=VALUE"));

    let o = delayflow(&["--models", "lstm", "run"], tmp.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("unknown model"));

    let o = delayflow(&["--set", "paths.afc=\"missing.csv\"", "--set", "paths.adjacency=\"missing.csv\"", "run"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("does not exist"));

    let o = delayflow(&["--backend", "remote", "run"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("DELAYFLOW_API_KEY"));
    assert!(!tmp.path().join("runs").exists());
}

#[test]
fn api_key_is_not_a_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let o = delayflow(&["--api-key", "x", "run"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}
