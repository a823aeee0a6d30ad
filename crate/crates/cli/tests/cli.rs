use std::path::Path;
use std::process::Command;

use heraldkey_cli::commands;
use heraldkey_cli::config::{Overrides, RunConfig};
use heraldkey_cli::record::{read_sweep_csv, sweep_csv, Status};

const BIN: &str = env!("CARGO_BIN_EXE_heraldkey");

const DIRECT: &str = r#"
protocol = "direct"
profile = "ci"
seed = 3

[params]
nbar = 0.365
eta_d = 1.0
eta_e = 1.0
p_d = 0.0

[settings]
alice = [0.028, 0.409]
bob = [0.0985, -0.448, -0.022]
p_n = 0.037

[sweep]
axis = "distance_km"
values = [0.0, 2.0, 4.0]
"#;

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn run(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(BIN).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn without_wall_time(csv: &str) -> String {
    csv.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn sweep_header_matches_golden_file() {
    let golden = include_str!("golden/sweep_header.csv");
    assert_eq!(sweep_csv(&[]).unwrap(), golden);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "protocol = \"A\"\n[params]\nnbar = 0.1\ncolour = 3\n");
    let (code, _, err) = run(&["keyrate", "-c", cfg.to_str().unwrap()]);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("colour") && err.contains("line 4"), "{err}");

    let cfg = write_config(dir.path(), "protocol = \"A\"\n[sweep]\naxis = \"distance_km\"\nvalues = []\n");
    let (code, _, err) = run(&["sweep", "-c", cfg.to_str().unwrap()]);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("empty"), "{err}");

    let (code, _, _) = run(&["keyrate", "-c", dir.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(code, 2);
}

#[test]
fn oracle_command_reports_deviation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "protocol = \"A\"\n[params]\nnbar = 0.015\ndistance_km = 5\n[settings]\nalice = [-0.1, 0.55]\nbob = [0.5, -0.25, 0.1]\n",
    );
    let out = dir.path().join("out");
    let (code, stdout, err) = run(&["oracle", "-c", cfg.to_str().unwrap(), "-o", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("max deviation"));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("oracle.json")).unwrap()).unwrap();
    assert_eq!(json["format"], "heraldkey-oracle/1");
    assert!(json["max_deviation"].as_f64().unwrap() <= 1e-6);

    let (code, _, err) = run(&["oracle", "-c", cfg.to_str().unwrap(), "-o", out.to_str().unwrap(), "--cutoff", "1"]);
    assert_eq!(code, 3, "{err}");
    assert!(err.contains("truncation") || err.contains("leaked"), "{err}");
}

#[test]
fn oracle_at_zero_squeezing_is_exact() {
    let cfg = RunConfig::from_toml("protocol = \"direct\"\n[params]\nnbar = 0.0\n")
        .unwrap()
        .resolve(&Overrides::default())
        .unwrap();
    let out = commands::oracle(&cfg, None).unwrap();
    assert!(out.max_deviation <= 1e-15, "{}", out.max_deviation);
}

#[test]
fn forced_half_noise_gives_zero_key() {
    let dir = tempfile::tempdir().unwrap();
    let text = DIRECT.replace("p_n = 0.037", "p_n = 0.5");
    let cfg = write_config(dir.path(), &text);
    let out = dir.path().join("out");
    let (code, stdout, err) = run(&["keyrate", "-c", cfg.to_str().unwrap(), "-o", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("K = 0.000000e0"), "{stdout}");
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("keyrate.json")).unwrap()).unwrap();
    assert_eq!(json["key_rate"].as_f64(), Some(0.0));
    assert_eq!(json["m"], 2);
    assert_eq!(json["level"], 2);
    assert!(json["max_residual"].as_f64().unwrap() <= 1e-7);
}

#[test]
fn sweep_resume_reproduces_the_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let full_dir = dir.path().join("full");
    let part_dir = dir.path().join("part");
    let cfg = RunConfig::from_toml(DIRECT).unwrap();
    let full = cfg
        .clone()
        .resolve(&Overrides {
            output_dir: Some(full_dir.clone()),
            ..Overrides::default()
        })
        .unwrap();
    let outcome = commands::sweep(&full, false, None).unwrap();
    assert_eq!(outcome.records.len(), 3);
    assert!(outcome.records.iter().all(|r| r.status == Status::Ok));
    let k: Vec<f64> = outcome.records.iter().map(|r| r.raw_key_rate.unwrap()).collect();
    assert!(k[0] > 0.0);
    assert!(k.windows(2).all(|w| w[1] <= w[0] + 1e-9), "{k:?}");

    let part = cfg
        .resolve(&Overrides {
            output_dir: Some(part_dir.clone()),
            ..Overrides::default()
        })
        .unwrap();
    let first = commands::sweep(&part, false, Some(1)).unwrap();
    assert_eq!(first.records.len(), 1);
    assert!(!first.csv_path.exists());
    let rest = commands::sweep(&part, true, None).unwrap();
    assert_eq!(rest.resumed, 1);

    let a = std::fs::read_to_string(full_dir.join("sweep.csv")).unwrap();
    let b = std::fs::read_to_string(part_dir.join("sweep.csv")).unwrap();
    assert_eq!(without_wall_time(&a), without_wall_time(&b));
    assert_eq!(read_sweep_csv(&b).unwrap().len(), 3);
}

#[test]
fn resume_refuses_a_foreign_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::from_toml(DIRECT).unwrap();
    let o = Overrides {
        output_dir: Some(dir.path().to_path_buf()),
        ..Overrides::default()
    };
    commands::sweep(&cfg.clone().resolve(&o).unwrap(), false, Some(1)).unwrap();
    let other = RunConfig::from_toml(&DIRECT.replace("seed = 3", "seed = 4")).unwrap();
    let err = commands::sweep(&other.resolve(&o).unwrap(), true, None).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn exported_sdps_read_back() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::from_toml("protocol = \"direct\"\n[certification]\nm = 3\nlevel = 1\n")
        .unwrap()
        .resolve(&Overrides::default())
        .unwrap();
    let paths = commands::export_sdp(&cfg, dir.path()).unwrap();
    assert_eq!(paths.len(), 2);
    for p in paths {
        let f = std::fs::File::open(&p).unwrap();
        let parsed = heraldkey_sdp::sdpa::read(std::io::BufReader::new(f)).unwrap();
        assert!(parsed.problem.num_vars() > 0);
    }
}
