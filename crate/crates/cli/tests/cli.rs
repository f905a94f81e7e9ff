use std::fs;
use std::path::Path;
use std::process::Command;

fn qaprune() -> Command {
    Command::new(env!("CARGO_BIN_EXE_qaprune"))
}

const TINY: &str = r#"
seeds = [3]

[task]
n_train = 60
n_dev = 20
seq_len = 16

[model]
n_layers = 2
n_heads = 2
d_model = 16
d_ff = 16
vocab_size = 32
max_seq_len = 16
activation = "gelu"

[base_train]
epochs = 1.0
batch_size = 16
"#;

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("config.toml");
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn gen_data_writes_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("data");
    let status = qaprune().args(["gen-data", "--config"]).arg(&cfg).arg("--out").arg(&out).status().unwrap();
    assert!(status.success());
    let train = fs::read_to_string(out.join("train.jsonl")).unwrap();
    assert_eq!(train.lines().count(), 60);
    assert!(train.lines().next().unwrap().contains("\"tokens\""));
}

#[test]
fn config_error_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("method = \"gain\"\n{TINY}"));
    let out = qaprune()
        .args(["pipeline", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("keep_fraction"));
}

#[test]
fn unknown_key_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("lamda_ff = 0.1\n{TINY}"));
    let out = qaprune().args(["pipeline", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_a_stage_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("base_checkpoint = \"{}\"\n{TINY}", dir.path().join("nope.qapr").display()));
    let run = dir.path().join("run");
    let out = qaprune().args(["pipeline", "--config"]).arg(&cfg).arg("--out").arg(&run).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(fs::read_to_string(run.join("FAILED")).unwrap().contains("base_model"));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let run = dir.path().join("run");
    let status = qaprune()
        .args(["pipeline", "--config"])
        .arg(&cfg)
        .args(["--method", "gain", "--keep-fraction", "0.5", "--seeds", "1,2", "--out"])
        .arg(&run)
        .status()
        .unwrap();
    assert!(status.success());
    let summary = fs::read_to_string(run.join("summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("1,gain,none,"));
    assert!(rows[1].starts_with("2,gain,none,"));

    let again = dir.path().join("again");
    let status = qaprune()
        .arg("report")
        .arg("--input")
        .arg(run.join("report.json"))
        .arg("--out")
        .arg(&again)
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(fs::read(again.join("retention.csv")).unwrap(), fs::read(run.join("retention.csv")).unwrap());
}
