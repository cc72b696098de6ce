use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 5
sweep_x = [20]

[data]
source = "synthetic"

[data.synthetic]
users = 30
items = 200
mean_events = 30.0

[mf]
dim = 8
epochs = 3

[sequence]
epochs = 1

[ctr]
dim = 6
hidden = 4
mlp_hidden = 6
epochs = 1
"#;

fn curio(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_curio-rank"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY).unwrap();
    path.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_ratings_file_exits_2_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    let ratings = dir.path().join("absent").join("ratings.dat");
    std::fs::write(
        &cfg,
        format!(
            "[data]\nratings = {:?}\nmovies = {:?}\n",
            ratings.to_str().unwrap(),
            dir.path().join("absent").join("movies.dat").to_str().unwrap()
        ),
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = curio(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains(ratings.to_str().unwrap()) || stderr(&o).contains("absent"), "{}", stderr(&o));
}

#[test]
fn missing_config_file_exits_2() {
    let o = curio(&["run", "--config", "/nonexistent/curio.toml"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn stage_without_models_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = curio(&["run", "--stage", "curiosity", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("missing snapshot: factorization"), "{}", stderr(&o));
}

#[test]
fn bad_arguments_exit_4() {
    for args in [
        &["run", "--x", "0"][..],
        &["run", "--k", "0"],
        &["run", "--stage", "bogus"],
        &["no-such-command"],
        &["inspect-user", "not-a-number"],
    ] {
        let dir = tempfile::tempdir().unwrap();
        let mut full: Vec<&str> = args.to_vec();
        let out = dir.path().join("out");
        full.extend(["--out", out.to_str().unwrap()]);
        assert_eq!(curio(&full).status.code(), Some(4), "{args:?}");
    }
}

#[test]
fn run_is_reproducible_and_users_can_be_inspected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let mut artifacts = Vec::new();
    for (name, threads) in [("a", "1"), ("b", "2")] {
        let out = dir.path().join(name);
        let o = curio(&["run", "--config", &cfg, "--seed", "9", "--threads", threads, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        artifacts.push((
            std::fs::read(out.join("metrics.csv")).unwrap(),
            std::fs::read(out.join("recommendations.json")).unwrap(),
        ));
    }
    assert!(artifacts[0] == artifacts[1]);

    let out = dir.path().join("a");
    let o = curio(&["inspect-user", "999999", "--config", &cfg, "--seed", "9", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));

    let csv = std::fs::read_to_string(out.join("curiosity_x30.csv")).unwrap();
    let user = csv.lines().nth(2).unwrap().split(',').next().unwrap().to_string();
    let o = curio(&["inspect-user", &user, "--config", &cfg, "--seed", "9", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.matches("Release Date").count(), 2);
    assert!(text.contains("Curiosity: "));
}

#[test]
fn single_stage_subcommands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    for cmd in ["ingest", "train-mf", "train-seq", "train-ctr", "curiosity", "recommend", "evaluate"] {
        let o = curio(&[cmd, "--config", &cfg, "--out", out]);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
    }
    let o = curio(&["sweep-x", "--values", "10,100", "--config", &cfg, "--out", out]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(Path::new(out).join("sweep_x10.csv").exists());
    assert!(Path::new(out).join("sweep_x100.csv").exists());
}
