use std::path::Path;
use std::process::{Command, Output};

/// Small keys and one dual epoch keep a Breast Cancer run to a few seconds.
const FAST: &[&str] = &[
    "--key-bits",
    "512",
    "--dual-epochs",
    "1",
    "--central-epochs",
    "2",
    "--repeats",
    "1",
];

fn mpdl(args: &[&str]) -> Output {
    mpdl_env(args, None)
}

fn mpdl_env(args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mpdl"));
    cmd.args(args).env_remove("MPDL_SEED");
    if let Some(s) = seed {
        cmd.env("MPDL_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn with(base: &[&str], extra: &[&str]) -> Vec<String> {
    base.iter().chain(FAST).chain(extra).map(|s| s.to_string()).collect()
}

fn run(args: &[String]) -> Output {
    mpdl(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

fn body(csv: &str) -> Vec<&str> {
    csv.lines().filter(|l| !l.starts_with('#')).collect()
}

#[test]
fn same_seed_gives_byte_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for out in [&a, &b] {
        let args = with(&["mpdl", "--gamma", "0.2", "--seed", "7"], &["--out", out.to_str().unwrap()]);
        assert!(run(&args).status.success());
    }
    let (a, b) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(!a.is_empty());
    assert_eq!(a, b);

    let text = String::from_utf8(a).unwrap();
    let rows = body(&text);
    assert_eq!(rows[0], "method,gamma,accuracy_mean,accuracy_std,repeats");
    let methods: Vec<&str> = rows[1..].iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(methods, ["joint_T", "dual_T", "MPDL_A"]);
}

#[test]
fn parallel_repeats_match_sequential_ones() {
    let base = ["mpdl", "--gamma", "0.2,0.4", "--seed", "3"];
    let mut seq = with(&base, &[]);
    let mut par = with(&base, &["--jobs", "3"]);
    for v in [&mut seq, &mut par] {
        let i = v.iter().position(|a| a == "--repeats").unwrap();
        v[i + 1] = "2".into();
    }
    let (seq, par) = (stdout(&run(&seq)), stdout(&run(&par)));
    assert_eq!(body(&seq), body(&par));
    assert_eq!(body(&seq).len(), 7);
}

#[test]
fn header_echoes_settings_and_input_hash() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("table.csv");
    std::fs::write(&data, mpdl_core::data::BREAST_CANCER_CSV).unwrap();
    let out = stdout(&run(&with(
        &["mpdl", "--gamma", "0.2", "--dataset", data.to_str().unwrap()],
        &[],
    )));
    assert!(out.starts_with("# mpdl mpdl "));
    assert!(out.contains("# gamma = 0.2 (flag)\n"));
    assert!(out.contains("# lambda = 0.01 (default)\n"));
    // git hash-object of the bundled table, which the copy reproduces.
    let hash = out.lines().find(|l| l.starts_with("# input ")).unwrap();
    let bundled = stdout(&run(&with(&["mpdl", "--gamma", "0.2"], &[])));
    let bundled_hash = bundled.lines().find(|l| l.starts_with("# input ")).unwrap();
    assert!(bundled_hash.starts_with("# input bundled:breast_cancer.csv git-blob-sha1 "));
    assert_eq!(hash.rsplit(' ').next(), bundled_hash.rsplit(' ').next());
    assert_eq!(body(&out), body(&bundled));
}

#[test]
fn flags_override_config_file_override_env() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.conf");
    std::fs::write(&cfg, "# sweep\ngamma = 0.3\nseed = 5\ndual-epochs = 1\n").unwrap();
    let cfg = cfg.to_str().unwrap();
    let args = with(&["privacy-sweep", "--epsilons", "inf", "--config", cfg], &[]);
    let args: Vec<&str> = args.iter().map(String::as_str).collect();

    let out = stdout(&mpdl_env(&args, Some("11")));
    assert!(out.contains("# seed = 5 (file)\n"), "{out}");
    assert!(out.contains("# gamma = 0.3 (file)\n"));
    assert!(out.contains("# dual_epochs = 1 (flag)\n"));

    let mut flagged = args.clone();
    flagged.extend(["--seed", "9", "--gamma", "0.25"]);
    let out = stdout(&mpdl_env(&flagged, Some("11")));
    assert!(out.contains("# seed = 9 (flag)\n"));
    assert!(out.contains("# gamma = 0.25 (flag)\n"));
}

#[test]
fn mpdl_seed_is_the_seed_fallback() {
    let args = with(&["privacy-sweep", "--epsilons", "inf", "--gamma", "0.2"], &[]);
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    let from_env = stdout(&mpdl_env(&args, Some("11")));
    assert!(from_env.contains("# seed = 11 (env)\n"));
    let mut flagged = args.clone();
    flagged.extend(["--seed", "11"]);
    let from_flag = stdout(&mpdl_env(&flagged, None));
    assert_eq!(body(&from_env), body(&from_flag));
    assert!(stdout(&mpdl_env(&args, None)).contains("# seed = 0 (default)\n"));
}

#[test]
fn inf_token_is_the_non_private_baseline() {
    let out = stdout(&run(&with(
        &["privacy-sweep", "--epsilons", "1,inf", "--gamma", "0.2"],
        &[],
    )));
    let rows = body(&out);
    assert_eq!(rows[0], "epsilon,accuracy,mae");
    assert!(rows[1].starts_with("1,") && rows[2].starts_with("inf,"), "{rows:?}");
    let mae = |row: &str| row.rsplit(',').next().unwrap().parse::<f64>().unwrap();
    // Without noise the duals infer from clean features.
    assert!(mae(rows[2]) < mae(rows[1]));
}

#[test]
fn invalid_configuration_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.conf");
    std::fs::write(&cfg, "colour = red\n").unwrap();
    for args in [
        vec!["mpdl", "--config", cfg.to_str().unwrap()],
        vec!["mpdl", "--gamma", "1.5"],
        vec!["mpdl", "--epsilon", "0"],
        vec!["mpdl", "--repeats", "0"],
        vec!["mpdl", "--seed", "minus one"],
        vec!["privacy-sweep", "--epsilons", "1,,2"],
        vec!["graph", "--edges", "only-edges.txt"],
        vec!["mpdl", "--encryption", "false"],
    ] {
        let o = mpdl(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn unknown_flags_are_errors() {
    for args in [vec!["mpdl", "--gama", "0.1"], vec!["graph", "--folds", "3"], vec!["frobnicate"]] {
        let o = mpdl(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert!(o.stdout.is_empty());
    }
}

#[test]
fn unreadable_inputs_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.csv");
    let garbled = dir.path().join("garbled.csv");
    std::fs::write(&garbled, "id,diagnosis,x\n1,M\n").unwrap();
    for data in [&missing, &garbled] {
        let o = mpdl(&["mpdl", "--dataset", data.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let o = mpdl(&["mpdl", "--config", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
    let out = dir.path().join("no/such/dir.csv");
    let o = run(&with(&["mpdl", "--gamma", "0.2"], &["--out", out.to_str().unwrap()]));
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn unsafe_audit_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let art = dir.path().join("runs");
    let args = with(
        &["mpdl", "--gamma", "0.2", "--seed", "2", "--encryption", "false", "--unsafe-audit"],
        &["--artifacts", art.to_str().unwrap()],
    );
    stdout(&run(&args));
    let tag = "g0.2-e2-s2";
    for suffix in ["json", "csv", "transcript.ndjson", "noise_a.csv", "noise_b.csv"] {
        let p = art.join(format!("{tag}.{suffix}"));
        assert!(Path::new(&p).is_file(), "{}", p.display());
    }
    let csv = std::fs::read_to_string(art.join(format!("{tag}.csv"))).unwrap();
    assert!(csv.contains("# encryption = false (flag)\n"));
    assert!(csv.contains("final,,dual_t,"));
}

#[test]
fn graph_from_files_reports_auc_per_gamma() {
    let dir = tempfile::tempdir().unwrap();
    let g = mpdl_core::graph::sbm_graph(&mpdl_core::graph::SbmSpec {
        nodes: 120,
        ..Default::default()
    })
    .unwrap();
    let edges: String = g
        .graph
        .edges()
        .iter()
        .map(|&(i, j)| format!("{} {}\n", g.graph.ids()[i], g.graph.ids()[j]))
        .collect();
    let mut features = String::from("id");
    for j in 0..g.graph.features().cols() {
        features.push_str(&format!(",f{j}"));
    }
    features.push('\n');
    for (i, id) in g.graph.ids().iter().enumerate() {
        let row: Vec<String> = g.graph.features().row(i).iter().map(f64::to_string).collect();
        features.push_str(&format!("{id},{}\n", row.join(",")));
    }
    let (e, f) = (dir.path().join("edges.txt"), dir.path().join("features.csv"));
    std::fs::write(&e, edges).unwrap();
    std::fs::write(&f, features).unwrap();

    let args = [
        "graph", "--edges", e.to_str().unwrap(), "--features", f.to_str().unwrap(), "--gamma", "0.3,0.6",
        "--repeats", "1", "--key-bits", "512", "--dual-epochs", "2",
    ];
    let out = stdout(&mpdl(&args));
    assert_eq!(out.lines().filter(|l| l.starts_with("# input ")).count(), 2);
    let rows = body(&out);
    assert_eq!(rows[0], "method,gamma,auc_mean,auc_std,repeats");
    assert_eq!(rows.len(), 7);
    for row in &rows[1..] {
        let auc: f64 = row.split(',').nth(2).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&auc), "{row}");
    }
    assert_eq!(out, stdout(&mpdl(&args)));
}
