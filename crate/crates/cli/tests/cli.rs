use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hierts_cli::output::{parse_csv, CSV_HEADER};

fn hierts(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hierts"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn bound_value(o: &Output) -> f64 {
    let text = String::from_utf8(o.stdout.clone()).unwrap();
    text.lines()
        .find_map(|l| l.strip_prefix("bound = "))
        .expect("bound line")
        .parse()
        .unwrap()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(hierts(&["--help"]).status.code(), Some(0));
    assert_eq!(hierts(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(hierts(&["run", s(&dir.path().join("missing.toml"))]).status.code(), Some(3));

    let unknown = write(dir.path(), "unknown.toml", "runs = 2\nfoo = 3\n");
    let o = hierts(&["run", s(&unknown)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("foo"), "{}", stderr(&o));

    let zero = write(dir.path(), "zero.toml", "runs = 0\n");
    assert_eq!(hierts(&["run", s(&zero)]).status.code(), Some(1));

    let numerical = hierts_cli::CliError::from(hierts_core::Error::NotPositiveDefinite { context: "x".into() });
    assert_eq!(numerical.exit_code(), 2);
}

#[test]
fn two_agents_interleave_round_major() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(
        dir.path(),
        "two.toml",
        "runs = 2\nhorizon = 2000\nagents = [\"G-HierTS\", \"LinTS\"]\n",
    );
    let out = dir.path().join("two");
    let o = hierts(&["run", s(&config), "--out", s(&out), "--svg"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.with_extension("csv")).unwrap();
    assert!(csv.starts_with(&format!("{CSV_HEADER}\n")));
    assert!(!csv.contains('\r'));
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 4000);
    for (j, row) in rows.iter().enumerate() {
        let mut fields = row.split(',');
        assert_eq!(fields.next().unwrap(), (j / 2 + 1).to_string());
        assert_eq!(fields.next().unwrap(), ["G-HierTS", "LinTS"][j % 2]);
    }
    assert_eq!(parse_csv(&csv).unwrap().len(), 2);
    let svg = std::fs::read_to_string(out.with_extension("svg")).unwrap();
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));
    assert!(out.with_extension("manifest.toml").exists());
}

#[test]
fn manifest_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "m.toml", "runs = 3\nhorizon = 200\nseed = 11\n\n[model]\nactions = 8\n");
    let out = dir.path().join("m");
    assert!(hierts(&["run", s(&config), "--out", s(&out)]).status.success());
    let first = std::fs::read(out.with_extension("csv")).unwrap();
    let manifest = out.with_extension("manifest.toml");
    let again = dir.path().join("again");
    let o = hierts(&["run", s(&manifest), "--out", s(&again)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(first, std::fs::read(again.with_extension("csv")).unwrap());
}

#[test]
fn sweep_writes_one_csv_per_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(
        dir.path(),
        "grid.toml",
        "runs = 2\nhorizon = 50\nagents = [\"G-HierTS\", \"LinTS\"]\n\n[sweep]\nactions = [5, 10, 15]\ndim = [2, 3, 4]\n",
    );
    let out = dir.path().join("grid");
    let o = hierts(&["sweep", s(&config), "--out", s(&out), "--parallelism", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for k in [5, 10, 15] {
        for d in [2, 3, 4] {
            let path = dir.path().join(format!("grid-K{k}-d{d}-L5.csv"));
            let curves = parse_csv(&std::fs::read_to_string(&path).unwrap()).unwrap();
            assert_eq!(curves.len(), 2);
            assert!(curves.iter().all(|c| c.mean.len() == 50));
        }
    }
}

#[test]
fn ingest_enforces_the_malformed_share() {
    let dir = tempfile::tempdir().unwrap();
    let ratings = write(dir.path(), "r.dat", "1::10::5::978300760\nnot a rating\n2::20::3::978300761\n");
    let out = dir.path().join("ml");
    let args = ["ingest", s(&ratings), "--rank", "1", "--clusters", "1", "--out", s(&out)];
    let o = hierts(&args);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains('2'), "{}", stderr(&o));

    let o = hierts(&[&args[..], &["--max-malformed", "0.5"]].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("skipped 1 malformed"), "{}", stderr(&o));
    assert!(out.with_extension("embeddings.csv").exists());
    assert!(out.with_extension("toml").exists());
}

#[test]
fn bound_grows_with_the_horizon() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "b.toml", "preset = \"synthetic\"\n");
    let short = hierts(&["bound", s(&config)]);
    let long = hierts(&["bound", s(&config), "--horizon", "4000"]);
    assert!(short.status.success() && long.status.success());
    assert!(bound_value(&long) > bound_value(&short));
    let bad = hierts(&["bound", s(&config), "--delta", "2"]);
    assert_eq!(bad.status.code(), Some(1));
}
