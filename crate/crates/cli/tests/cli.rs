use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use itemcf::ddestimate::PlantedCorpus;
use itemcf::itemspace::{ItemMeasure, MeasureSpec};

fn itemcf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_itemcf"))
        .args(args)
        .env_remove("ITEMCF_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// `(T, R_mean)` rows of a mean curve file.
fn mean_curve(path: &Path) -> Vec<(f64, f64)> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let mut f = l.split(',');
            (f.next().unwrap().parse().unwrap(), f.next().unwrap().parse().unwrap())
        })
        .collect()
}

#[test]
fn random_mean_slope_is_one_half() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = itemcf(&[
        "simulate", "--algo", "random", "--measure", "uniform", "--n-users", "50", "--horizon", "100", "--seeds",
        "200", "--no-traces", "--bootstrap", "0", "--out", p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let curve = mean_curve(&out.join("mean_curve.csv"));
    let (t, r) = *curve.last().unwrap();
    assert_eq!(t, 100.0);
    assert!((r / t - 0.5).abs() <= 0.01, "slope {}", r / t);
    assert!(out.join("curves/seed-199.csv").exists());
}

#[test]
fn oracle_curve_is_all_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = itemcf(&[
        "simulate", "--algo", "oracle", "--measure", "cluster", "--nu", "0.2", "--n-users", "40", "--horizon", "30",
        "--seeds", "4", "--out", p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(mean_curve(&out.join("mean_curve.csv")).iter().all(|&(_, r)| r == 0.0));
}

#[test]
fn same_seeds_give_identical_traces() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = itemcf(&[
            "simulate", "--algo", "item_item", "--measure", "cluster", "--nu", "0.2", "--n-users", "60", "--scale",
            "desk", "--concurrency", "8", "--horizon", "40", "--seed-list", "3,11", "--out", p(&out),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let (a, b) = (run("a"), run("b"));
    for seed in [3, 11] {
        let f = format!("traces/seed-{seed}.csv");
        assert_eq!(fs::read(a.join(&f)).unwrap(), fs::read(b.join(&f)).unwrap());
    }
    assert_eq!(fs::read(a.join("mean_curve.csv")).unwrap(), fs::read(b.join("mean_curve.csv")).unwrap());
}

#[test]
fn manifests_carry_the_config_hash_and_replay_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = itemcf(&[
        "simulate", "--algo", "user_user", "--measure", "user_clusters", "--k", "4", "--n-users", "40", "--horizon",
        "25", "--seeds", "2", "--out", p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let read = |f: &str| -> serde_json::Value { serde_json::from_str(&fs::read_to_string(out.join(f)).unwrap()).unwrap() };
    let hash = read("run_manifest.json")["config_hash"].clone();
    assert_eq!(hash.as_str().unwrap().len(), 64);
    assert_eq!(read("report.json")["config_hash"], hash);
    assert_eq!(read("traces/seed-1.json")["config_hash"], hash);

    let trace = out.join("traces/seed-1.csv");
    let o = itemcf(&["replay", "--trace", p(&trace)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    // flip one feedback value and the replay must notice
    let text = fs::read_to_string(&trace).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut f: Vec<String> = lines[10].split(',').map(String::from).collect();
    f[3] = if f[3] == "1" { "-1".into() } else { "1".into() };
    lines[10] = f.join(",");
    fs::write(&trace, lines.join("\n") + "\n").unwrap();
    let o = itemcf(&["replay", "--trace", p(&trace)]);
    assert_eq!(code(&o), 3);
}

#[test]
fn config_file_runs_and_hash_ignores_out_dir() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{"measure":{"variant":"uniform_cube","n_users":10},"algo":{"algo":"random"},"horizon":10,"seeds":[1,2]}"#;
    let path = dir.path().join("c.json");
    fs::write(&path, cfg).unwrap();
    let mut hashes = Vec::new();
    for name in ["x", "y"] {
        let out = dir.path().join(name);
        let o = itemcf(&["simulate", "--config", p(&path), "--out", p(&out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("run_manifest.json")).unwrap()).unwrap();
        hashes.push(m["config_hash"].clone());
    }
    assert_eq!(hashes[0], hashes[1]);
}

#[test]
fn output_dir_defaults_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("env-out");
    let o = Command::new(env!("CARGO_BIN_EXE_itemcf"))
        .args(["simulate", "--n-users", "5", "--horizon", "3", "--seeds", "2"])
        .env("ITEMCF_OUT_DIR", &out)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(out.join("mean_curve.csv").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = p(&out);

    assert_eq!(code(&itemcf(&["simulate", "--algo", "bogus", "--out", o])), 2);
    assert_eq!(code(&itemcf(&["simulate", "--horizon", "0", "--out", o])), 2);
    assert_eq!(code(&itemcf(&["simulate", "--seed-list", "1,1", "--out", o])), 2);
    assert_eq!(code(&itemcf(&["simulate", "--algo", "item_item", "--scale", "huge", "--d", "1", "--out", o])), 2);
    let bad_cfg = dir.path().join("bad.json");
    fs::write(&bad_cfg, r#"{"measure":"m.json","algo":{"algo":"random"},"horizon":1,"seeds":[0],"typo":1}"#).unwrap();
    assert_eq!(code(&itemcf(&["simulate", "--config", p(&bad_cfg), "--out", o])), 2);

    let missing = dir.path().join("missing.json");
    assert_eq!(code(&itemcf(&["simulate", "--measure", p(&missing), "--out", o])), 3);

    // every user likes the first type and dislikes the second: the like fractions leave [ν, 2ν] at ν = 0.1
    let lopsided = dir.path().join("lopsided.json");
    fs::write(&lopsided, r#"{"variant":"finite_mixture","n_users":4,"types":["++++","----"],"weights":[0.5,0.5]}"#).unwrap();
    let args = ["simulate", "--algo", "user_user", "--measure", p(&lopsided), "--k", "2", "--horizon", "3", "--seeds", "2", "--out", o];
    assert_eq!(code(&itemcf(&args)), 0);
    let strict: Vec<&str> = args.iter().copied().chain(["--strict"]).collect();
    assert_eq!(code(&itemcf(&strict)), 4);
}

#[test]
fn gen_space_reports_exact_dimension_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("space");
    let o = itemcf(&["gen-space", "--kind", "cluster", "--k", "4", "--n-users", "100", "--nu", "0.2", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("assumptions.json")).unwrap()).unwrap();
    assert_eq!(report["d_exact"].as_f64(), Some(2.0));

    let text = fs::read_to_string(out.join("measure.json")).unwrap();
    let loaded = ItemMeasure::from_json(&text).unwrap();
    let spec: MeasureSpec = serde_json::from_str(&text).unwrap();
    let direct = ItemMeasure::from_spec(&spec).unwrap();
    assert_eq!(loaded.to_spec(), direct.to_spec());
    assert_eq!(loaded.as_finite().unwrap().support(), direct.as_finite().unwrap().support());

    let mat = dir.path().join("mat");
    let o = itemcf(&["gen-space", "--k", "4", "--n-users", "100", "--nu", "0.2", "--materialize", "--out", p(&mat)]);
    assert_eq!(code(&o), 0);
    let m = ItemMeasure::from_json(&fs::read_to_string(mat.join("measure.json")).unwrap()).unwrap();
    assert!(matches!(m, ItemMeasure::FiniteMixture(_)));
    assert_eq!(m.as_finite().unwrap().support(), direct.as_finite().unwrap().support());
}

#[test]
fn gen_space_rejects_infeasible_nu() {
    let dir = tempfile::tempdir().unwrap();
    let o = itemcf(&["gen-space", "--k", "4", "--nu", "0.1", "--out", p(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("ν"));
}

#[test]
fn estimate_dd_recovers_planted_dimension() {
    let dir = tempfile::tempdir().unwrap();
    let ratings = dir.path().join("planted.csv");
    let corpus = PlantedCorpus::new(4, 200, 1000, 0.0, 7).generate().unwrap();
    corpus.write_csv(fs::File::create(&ratings).unwrap()).unwrap();
    let out = dir.path().join("dd");
    let o = itemcf(&["estimate-dd", "--ratings", p(&ratings), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let hist: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("dd_histogram.json")).unwrap()).unwrap();
    let mode = hist["histogram"]["mode"].as_f64().unwrap();
    let width = hist["histogram"]["bin_width"].as_f64().unwrap();
    assert!((mode - 2.0).abs() <= width, "mode {mode}");
    let rows = fs::read_to_string(out.join("dd_items.csv")).unwrap();
    assert!(rows.starts_with("item_id,d_i,n_neighbors,clamp_rate\n"));
    assert_eq!(rows.lines().count(), 201);

    let o = itemcf(&["estimate-dd", "--ratings", p(&ratings), "--delta", "0.5", "--out", p(&out)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("ill-posed"));
}

#[test]
fn estimate_dd_lists_malformed_lines() {
    let dir = tempfile::tempdir().unwrap();
    let ratings = dir.path().join("bad.csv");
    fs::write(&ratings, "user_id,item_id,rating\n1,a,3\n2,a,oops\n3,b,1\n4,b,x\n").unwrap();
    let o = itemcf(&["estimate-dd", "--ratings", p(&ratings), "--out", p(dir.path())]);
    assert_eq!(code(&o), 3);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 3") && err.contains("line 5"), "{err}");

    fs::write(&ratings, "user_id,item_id,rating\n").unwrap();
    assert_eq!(code(&itemcf(&["estimate-dd", "--ratings", p(&ratings), "--out", p(dir.path())])), 3);
}

#[test]
fn single_item_corpus_has_zero_dimension() {
    let dir = tempfile::tempdir().unwrap();
    let ratings = dir.path().join("one.csv");
    fs::write(&ratings, "user_id,item_id,rating\n1,a,3\n2,a,-1\n3,a,5\n").unwrap();
    let out = dir.path().join("dd");
    assert_eq!(code(&itemcf(&["estimate-dd", "--ratings", p(&ratings), "--out", p(&out)])), 0);
    let rows = fs::read_to_string(out.join("dd_items.csv")).unwrap();
    assert_eq!(rows.lines().nth(1).unwrap().split(',').nth(1), Some("0"));
}
