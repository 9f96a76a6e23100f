//! The experiment drivers behind the subcommands. Each returns the full CSV
//! text; nothing in it depends on timing or thread scheduling.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use mpdl_core::data::{parse_csv, random_assignment, CsvSchema, FeaturePartition, PartyDataset, BREAST_CANCER_CSV};
use mpdl_core::graph::{link_prediction, load_graph, sbm_graph, PartyGraph, SbmSpec};
use mpdl_core::orchestrator::{boundary_report, mpdl_train, MpdlConfig, MpdlOutcome, RunReport};
use mpdl_core::selftest::{self, Selection};
use mpdl_core::stats::{mean, std_dev};
use sha1::{Digest, Sha1};

use crate::settings::{format_epsilon, Settings};
use crate::CliError;

/// The co-occurrence grid of the accuracy tables.
const GAMMA_GRID: &str = "0.05,0.1,0.2,0.4,0.6,0.8";
const BUNDLED_LABEL: &str = "bundled:breast_cancer.csv";

/// Where per-run artifacts go, if anywhere.
#[derive(Clone, Debug, Default)]
pub struct Artifacts {
    pub dir: Option<PathBuf>,
    pub unsafe_audit: bool,
}

impl Artifacts {
    fn write(&self, name: &str, text: &str) -> Result<(), CliError> {
        let Some(dir) = &self.dir else { return Ok(()) };
        std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| io_error(&path, e))
    }

    fn write_run(&self, tag: &str, header: &str, outcome: &MpdlOutcome) -> Result<(), CliError> {
        let Some(dir) = &self.dir else { return Ok(()) };
        self.write(&format!("{tag}.json"), &outcome.report.to_json()?)?;
        let mut csv = format!("{header}kind,iteration,metric,value\n");
        for (kind, iteration, metric, value) in outcome.report.csv_rows() {
            writeln!(csv, "{kind},{iteration},{metric},{value}").unwrap();
        }
        self.write(&format!("{tag}.csv"), &csv)?;
        self.write(
            &format!("{tag}.transcript.ndjson"),
            &outcome.transcript.to_ndjson(self.unsafe_audit)?,
        )?;
        if self.unsafe_audit {
            outcome.perturbed_a.write_noise_audit(&dir.join(format!("{tag}.noise_a.csv")))?;
            outcome.perturbed_b.write_noise_audit(&dir.join(format!("{tag}.noise_b.csv")))?;
        }
        Ok(())
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// A hashed input, echoed into the output header.
struct Input {
    label: String,
    bytes: Vec<u8>,
}

impl Input {
    fn read(path: &str) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|e| io_error(Path::new(path), e))?;
        Ok(Self {
            label: path.to_string(),
            bytes,
        })
    }
}

/// SHA-1 of `blob {len}\0` followed by the bytes, as `git hash-object` computes it.
pub fn git_blob_sha1(bytes: &[u8]) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    format!("{:x}", h.finalize())
}

fn header(command: &str, s: &Settings, inputs: &[Input], extra: &[String]) -> String {
    let mut out = format!("# mpdl {command} {}\n", env!("CARGO_PKG_VERSION"));
    for line in s.echo() {
        writeln!(out, "{line}").unwrap();
    }
    for input in inputs {
        writeln!(out, "# input {} git-blob-sha1 {}", input.label, git_blob_sha1(&input.bytes)).unwrap();
    }
    for line in extra {
        writeln!(out, "# {line}").unwrap();
    }
    out
}

fn defaults_of(pairs: &[(&'static str, String)], overrides: &[(&'static str, &str)]) -> Vec<(&'static str, String)> {
    let mut out = pairs.to_vec();
    for (k, v) in overrides {
        match out.iter_mut().find(|(key, _)| key == k) {
            Some(slot) => slot.1 = v.to_string(),
            None => out.push((k, v.to_string())),
        }
    }
    out
}

fn train_defaults() -> Vec<(&'static str, String)> {
    let d = MpdlConfig::default();
    vec![
        ("dataset", String::new()),
        ("id_column", "id".into()),
        ("label_column", "diagnosis".into()),
        ("categorical", String::new()),
        ("seed", d.seed.to_string()),
        ("repeats", "10".into()),
        ("jobs", "1".into()),
        ("sensitivity_mode", d.sensitivity_mode.to_string()),
        ("lambda", d.lambda.to_string()),
        ("folds", d.folds.to_string()),
        ("threshold", d.threshold.to_string()),
        ("max_iters", d.max_iters.to_string()),
        ("dual_epochs", d.dual_epochs.to_string()),
        ("central_epochs", d.central_epochs.to_string()),
        ("lr", d.lr.to_string()),
        ("batch_size", d.batch_size.to_string()),
        ("test_fraction", d.test_fraction.to_string()),
        ("key_bits", d.key_bits.to_string()),
        ("scale_bits", d.scale_bits.to_string()),
        ("backend", "in_process".into()),
        ("encryption", "true".into()),
    ]
}

pub fn mpdl_defaults() -> Vec<(&'static str, String)> {
    let eps = format_epsilon(MpdlConfig::default().epsilon);
    defaults_of(&train_defaults(), &[("gamma", GAMMA_GRID), ("epsilon", &eps)])
}

pub fn sweep_defaults() -> Vec<(&'static str, String)> {
    let epsilons: Vec<String> = selftest::PRIVACY_EPSILONS.iter().map(|&e| format_epsilon(e)).collect();
    defaults_of(
        &train_defaults(),
        &[("gamma", "0.1"), ("epsilons", &epsilons.join(",")), ("repeats", "5")],
    )
}

pub fn graph_defaults() -> Vec<(&'static str, String)> {
    let d = MpdlConfig::default();
    let g = SbmSpec::default();
    vec![
        ("edges", String::new()),
        ("features", String::new()),
        ("nodes", g.nodes.to_string()),
        ("blocks", g.blocks.to_string()),
        ("p_in", g.p_in.to_string()),
        ("p_out", g.p_out.to_string()),
        ("gamma", GAMMA_GRID.into()),
        ("holdout", "0.2".into()),
        ("epsilon", format_epsilon(d.epsilon)),
        ("seed", d.seed.to_string()),
        ("repeats", "5".into()),
        ("jobs", "1".into()),
        ("sensitivity_mode", d.sensitivity_mode.to_string()),
        ("lambda", d.lambda.to_string()),
        ("dual_epochs", d.dual_epochs.to_string()),
        ("lr", d.lr.to_string()),
        ("batch_size", d.batch_size.to_string()),
        ("key_bits", d.key_bits.to_string()),
        ("scale_bits", d.scale_bits.to_string()),
        ("backend", "in_process".into()),
        ("encryption", "true".into()),
    ]
}

fn encryption(s: &Settings, audit: &Artifacts) -> Result<bool, CliError> {
    match s.raw("encryption") {
        "true" => Ok(true),
        "false" if audit.unsafe_audit => Ok(false),
        "false" => Err(CliError::Invalid("encryption = false requires --unsafe-audit".into())),
        other => Err(CliError::Invalid(format!("encryption = {other:?} is not true or false"))),
    }
}

/// Settings shared by every subcommand that trains duals.
fn dual_config(s: &Settings, audit: &Artifacts) -> Result<MpdlConfig, CliError> {
    Ok(MpdlConfig {
        seed: s.u64("seed")?,
        sensitivity_mode: s.sensitivity_mode("sensitivity_mode")?,
        lambda: s.f64("lambda")?,
        dual_epochs: s.usize("dual_epochs")?,
        lr: s.f64("lr")?,
        batch_size: s.usize("batch_size")?,
        key_bits: s.u64("key_bits")?,
        scale_bits: s.u32("scale_bits")?,
        backend: s.backend("backend")?,
        encryption: encryption(s, audit)?,
        ..MpdlConfig::default()
    })
}

fn train_config(s: &Settings, audit: &Artifacts) -> Result<MpdlConfig, CliError> {
    Ok(MpdlConfig {
        folds: s.usize("folds")?,
        threshold: s.f64("threshold")?,
        max_iters: s.usize("max_iters")?,
        central_epochs: s.usize("central_epochs")?,
        test_fraction: s.f64("test_fraction")?,
        ..dual_config(s, audit)?
    })
}

fn check(cfg: &MpdlConfig) -> Result<(), CliError> {
    cfg.validate().map_err(|e| CliError::Invalid(e.to_string()))
}

fn counts(s: &Settings) -> Result<(usize, usize), CliError> {
    let repeats = s.usize("repeats")?;
    let jobs = s.usize("jobs")?;
    if repeats == 0 || jobs == 0 {
        return Err(CliError::Invalid("repeats and jobs must be ≥ 1".into()));
    }
    Ok((repeats, jobs))
}

fn load_dataset(s: &Settings) -> Result<(PartyDataset, Input), CliError> {
    let input = if s.is_set("dataset") {
        Input::read(s.raw("dataset"))?
    } else {
        Input {
            label: BUNDLED_LABEL.into(),
            bytes: BREAST_CANCER_CSV.as_bytes().to_vec(),
        }
    };
    let column = |key: &str| s.is_set(key).then(|| s.raw(key).to_string());
    let schema = CsvSchema {
        id_column: column("id_column"),
        label_column: column("label_column"),
        categorical: s.string_list("categorical"),
        ignore: Vec::new(),
    };
    let table = parse_csv(input.bytes.as_slice(), &schema).map_err(|e| CliError::Io(format!("{}: {e}", input.label)))?;
    Ok((table.dataset, input))
}

/// Runs `f(0..n)` on `jobs` threads and returns the results in index order;
/// the first error by index wins.
fn parallel<T: Send>(n: usize, jobs: usize, f: impl Fn(usize) -> Result<T, CliError> + Sync) -> Result<Vec<T>, CliError> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T, CliError>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(n) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let result = f(i);
                slots.lock().expect("a worker panicked")[i] = Some(result);
            });
        }
    });
    slots
        .into_inner()
        .expect("a worker panicked")
        .into_iter()
        .map(|slot| slot.expect("every index ran"))
        .collect()
}

/// One end-to-end run, rejected if an encrypted run's transcript breaks a
/// boundary predicate.
fn train_run(cfg: &MpdlConfig, table: &PartyDataset, audit: &Artifacts, header: &str) -> Result<RunReport, CliError> {
    let tag = format!("g{}-e{}-s{}", cfg.gamma, format_epsilon(cfg.epsilon), cfg.seed);
    log::info!("run {tag}");
    let assignment = random_assignment(table.width(), cfg.seed);
    let outcome = mpdl_train(cfg, table, &assignment)?;
    // The plaintext shadow sends plain matrices between A and B by design.
    if cfg.encryption {
        let boundary = boundary_report(&outcome, table, &assignment)?;
        if !boundary.passed() {
            return Err(CliError::Protocol(format!("run {tag} broke the party boundary:\n{boundary}")));
        }
    } else {
        log::warn!("run {tag} used the plaintext shadow; boundary not asserted");
    }
    audit.write_run(&tag, header, &outcome)?;
    Ok(outcome.report)
}

/// `(γ, repeat)` runs with seed `seed + repeat`.
fn seeded(base: &MpdlConfig, gamma: f64, repeat: usize) -> MpdlConfig {
    MpdlConfig {
        gamma,
        seed: base.seed.wrapping_add(repeat as u64),
        ..base.clone()
    }
}

fn fmt_row(out: &mut String, label: &str, gamma: f64, xs: &[f64]) {
    writeln!(out, "{label},{gamma},{:.6},{:.6},{}", mean(xs), std_dev(xs), xs.len()).unwrap();
}

/// `method,gamma,accuracy_mean,accuracy_std,repeats` rows for joint_T,
/// dual_T and MPDL_A at each γ.
pub fn mpdl_table(s: &Settings, audit: &Artifacts) -> Result<String, CliError> {
    let gammas = s.f64_list("gamma")?;
    let (repeats, jobs) = counts(s)?;
    let base = MpdlConfig {
        epsilon: s.epsilon("epsilon")?,
        ..train_config(s, audit)?
    };
    for &g in &gammas {
        check(&seeded(&base, g, 0))?;
    }
    let (table, input) = load_dataset(s)?;
    let header = header("mpdl", s, &[input], &[]);
    let reports = parallel(gammas.len() * repeats, jobs, |i| {
        train_run(&seeded(&base, gammas[i / repeats], i % repeats), &table, audit, &header)
    })?;

    let mut out = header;
    out.push_str("method,gamma,accuracy_mean,accuracy_std,repeats\n");
    for (gi, &g) in gammas.iter().enumerate() {
        let runs = &reports[gi * repeats..(gi + 1) * repeats];
        let metric = |f: fn(&RunReport) -> f64| runs.iter().map(f).collect::<Vec<_>>();
        fmt_row(&mut out, "joint_T", g, &metric(|r| r.joint_t));
        fmt_row(&mut out, "dual_T", g, &metric(|r| r.dual_t));
        fmt_row(&mut out, "MPDL_A", g, &metric(|r| r.mpdl_a));
    }
    Ok(out)
}

/// `epsilon,accuracy,mae` rows: mean central (dual_T) accuracy and mean
/// inference MAE over repeats at each ε.
pub fn privacy_sweep(s: &Settings, audit: &Artifacts) -> Result<String, CliError> {
    let gamma = s.f64("gamma")?;
    let epsilons = s.epsilon_list("epsilons")?;
    let (repeats, jobs) = counts(s)?;
    let base = train_config(s, audit)?;
    let run_config = |i: usize| MpdlConfig {
        epsilon: epsilons[i / repeats],
        ..seeded(&base, gamma, i % repeats)
    };
    check(&run_config(0))?;
    let (table, input) = load_dataset(s)?;
    let header = header("privacy-sweep", s, &[input], &[]);
    let reports = parallel(epsilons.len() * repeats, jobs, |i| {
        train_run(&run_config(i), &table, audit, &header)
    })?;

    let mut out = header;
    out.push_str("epsilon,accuracy,mae\n");
    for (ei, &eps) in epsilons.iter().enumerate() {
        let runs = &reports[ei * repeats..(ei + 1) * repeats];
        let acc = mean(&runs.iter().map(|r| r.dual_t).collect::<Vec<_>>());
        let mae = mean(&runs.iter().map(|r| r.inference_mae).collect::<Vec<_>>());
        writeln!(out, "{},{acc:.6},{mae:.6}", format_epsilon(eps)).unwrap();
    }
    Ok(out)
}

/// The graph and its feature partition: loaded from files, or a stochastic
/// block model when no files are named.
fn graph_input(s: &Settings) -> Result<(PartyGraph, FeaturePartition, Vec<Input>, Vec<String>), CliError> {
    match (s.is_set("edges"), s.is_set("features")) {
        (true, true) => {
            let (edges, features) = (s.raw("edges"), s.raw("features"));
            let inputs = vec![Input::read(edges)?, Input::read(features)?];
            let graph = load_graph(Path::new(edges), Path::new(features)).map_err(|e| CliError::Io(e.to_string()))?;
            let width = graph.features().cols();
            let partition = FeaturePartition::from_assignment(&random_assignment(width, s.u64("seed")?))
                .map_err(|e| CliError::Io(format!("{features}: {e}")))?;
            Ok((graph, partition, inputs, Vec::new()))
        }
        (false, false) => {
            let spec = SbmSpec {
                nodes: s.usize("nodes")?,
                blocks: s.usize("blocks")?,
                p_in: s.f64("p_in")?,
                p_out: s.f64("p_out")?,
                seed: s.u64("seed")?,
                ..SbmSpec::default()
            };
            let g = sbm_graph(&spec).map_err(|e| CliError::Invalid(e.to_string()))?;
            let note = format!(
                "input stochastic block model, {} nodes, {} edges, feature widths {} + {}",
                spec.nodes,
                g.graph.edge_count(),
                spec.d_a,
                spec.d_b
            );
            Ok((g.graph, g.partition, Vec::new(), vec![note]))
        }
        _ => Err(CliError::Invalid("edges and features must be given together".into())),
    }
}

/// `method,gamma,auc_mean,auc_std,repeats` rows for the raw, joint and MPDL
/// representations at each γ.
pub fn graph_auc(s: &Settings, audit: &Artifacts) -> Result<String, CliError> {
    let gammas = s.f64_list("gamma")?;
    let holdout = s.f64("holdout")?;
    let (repeats, jobs) = counts(s)?;
    let base = MpdlConfig {
        epsilon: s.epsilon("epsilon")?,
        ..dual_config(s, audit)?
    };
    for &g in &gammas {
        check(&seeded(&base, g, 0))?;
    }
    if !(holdout > 0.0 && holdout < 1.0) {
        return Err(CliError::Invalid(format!("holdout must be in (0, 1), got {holdout}")));
    }
    let (graph, partition, inputs, notes) = graph_input(s)?;
    let header = header("graph", s, &inputs, &notes);
    let reports = parallel(gammas.len() * repeats, jobs, |i| {
        let cfg = seeded(&base, gammas[i / repeats], i % repeats);
        log::info!("graph run g{}-s{}", cfg.gamma, cfg.seed);
        Ok(link_prediction(&graph, &partition, cfg.gamma, holdout, &cfg)?)
    })?;
    if audit.dir.is_some() {
        let seeds: Vec<u64> = (0..gammas.len() * repeats)
            .map(|i| seeded(&base, gammas[i / repeats], i % repeats).seed)
            .collect();
        let doc = serde_json::json!({ "header": header.lines().collect::<Vec<_>>(), "seeds": seeds, "runs": reports });
        audit.write("graph.json", &serde_json::to_string_pretty(&doc).map_err(|e| CliError::Failed(e.to_string()))?)?;
    }

    let mut out = header;
    out.push_str("method,gamma,auc_mean,auc_std,repeats\n");
    for (gi, &g) in gammas.iter().enumerate() {
        let runs = &reports[gi * repeats..(gi + 1) * repeats];
        fmt_row(&mut out, "raw", g, &runs.iter().map(|r| r.raw_auc).collect::<Vec<_>>());
        fmt_row(&mut out, "joint", g, &runs.iter().map(|r| r.joint_auc).collect::<Vec<_>>());
        fmt_row(&mut out, "MPDL", g, &runs.iter().map(|r| r.mpdl_auc).collect::<Vec<_>>());
    }
    Ok(out)
}

/// Runs the checks, streaming one line each to `sink`. Returns whether all
/// were acceptable.
pub fn selftest(trends: bool, sink: &mut dyn std::io::Write) -> Result<bool, CliError> {
    let io = |e: std::io::Error| CliError::Io(e.to_string());
    writeln!(sink, "# mpdl selftest {}", env!("CARGO_PKG_VERSION")).map_err(io)?;
    let mut ok = true;
    for run in selftest::checks(Selection { trends }) {
        let r = run();
        writeln!(sink, "{r}").map_err(io)?;
        if !r.passed && r.acceptable() {
            let reported: Vec<&str> = r.parts.iter().filter(|p| !p.1).map(|p| p.0).collect();
            writeln!(sink, "#  {} reported only, not asserted", reported.join(", ")).map_err(io)?;
        }
        sink.flush().map_err(io)?;
        ok &= r.acceptable();
    }
    Ok(ok)
}
