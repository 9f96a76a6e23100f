//! `mpdl`: experiment runner for multi-party dual learning.
//!
//! Every subcommand resolves its settings as flags > `--config` file >
//! `MPDL_SEED` (seed only) > built-in defaults, and writes a CSV whose `#`
//! header echoes the resolved settings and the content hashes of its inputs.

mod experiments;
mod settings;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use settings::{parse_config_file, Settings};

/// Failure classes, one per exit code.
#[derive(Debug)]
pub enum CliError {
    /// A check or run failed without a more specific cause.
    Failed(String),
    Invalid(String),
    Protocol(String),
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Failed(_) => 1,
            CliError::Invalid(_) => 2,
            CliError::Protocol(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Failed(m) => write!(f, "{m}"),
            CliError::Invalid(m) => write!(f, "invalid configuration: {m}"),
            CliError::Protocol(m) => write!(f, "protocol violation: {m}"),
            CliError::Io(m) => write!(f, "I/O error: {m}"),
        }
    }
}

impl From<mpdl_core::Error> for CliError {
    fn from(e: mpdl_core::Error) -> Self {
        use mpdl_core::Error;
        if e.is_protocol_violation() {
            return CliError::Protocol(e.to_string());
        }
        match e {
            Error::Io(_) | Error::Csv(_) | Error::Data(_) => CliError::Io(e.to_string()),
            Error::InvalidArgument(_) => CliError::Invalid(e.to_string()),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "mpdl", version, about = "Multi-party dual learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Accuracy table: joint_T, dual_T and MPDL_A per γ, mean and std over repeats.
    Mpdl(MpdlArgs),
    /// Central accuracy and inference MAE per privacy budget ε.
    PrivacySweep(SweepArgs),
    /// Link-prediction AUC per γ on a vertically split graph.
    Graph(GraphArgs),
    /// Runs the oracle suites and prints one PASS/FAIL line per check.
    Selftest(SelftestArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Flat `key = value` file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output CSV path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for per-run artifacts: report JSON and CSV, transcript NDJSON.
    #[arg(long)]
    artifacts: Option<PathBuf>,
    /// Allows `encryption = false` (the plaintext shadow), writes noise audit
    /// logs and full transcript payloads into the artifact directory.
    #[arg(long)]
    unsafe_audit: bool,
}

/// Lists `(key, flag value)` pairs of `Option<String>` fields.
macro_rules! flag_pairs {
    ($self:ident; $($field:ident),* $(,)?) => {
        vec![$((stringify!($field), $self.$field.clone())),*]
    };
}

/// Training settings shared by `mpdl` and `privacy-sweep`.
#[derive(Args, Debug)]
struct TrainFlags {
    /// CSV dataset; the bundled Breast Cancer table when absent.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    id_column: Option<String>,
    #[arg(long)]
    label_column: Option<String>,
    /// Comma-separated columns to one-hot encode.
    #[arg(long)]
    categorical: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    repeats: Option<String>,
    /// Repeats run concurrently; results do not depend on it.
    #[arg(long)]
    jobs: Option<String>,
    /// `per_neuron` or `per_layer`.
    #[arg(long)]
    sensitivity_mode: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    folds: Option<String>,
    #[arg(long)]
    threshold: Option<String>,
    #[arg(long)]
    max_iters: Option<String>,
    #[arg(long)]
    dual_epochs: Option<String>,
    #[arg(long)]
    central_epochs: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    test_fraction: Option<String>,
    #[arg(long)]
    key_bits: Option<String>,
    #[arg(long)]
    scale_bits: Option<String>,
    /// `in_process` or `tcp`.
    #[arg(long)]
    backend: Option<String>,
    /// `false` needs `--unsafe-audit`.
    #[arg(long)]
    encryption: Option<String>,
}

impl TrainFlags {
    fn pairs(&self) -> Vec<(&'static str, Option<String>)> {
        flag_pairs!(self;
            dataset, id_column, label_column, categorical, seed, repeats, jobs,
            sensitivity_mode, lambda, folds, threshold, max_iters, dual_epochs,
            central_epochs, lr, batch_size, test_fraction, key_bits, scale_bits,
            backend, encryption)
    }
}

#[derive(Args, Debug)]
struct MpdlArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated co-occurrence probabilities.
    #[arg(long)]
    gamma: Option<String>,
    /// Privacy budget, or `inf` to disable perturbation.
    #[arg(long)]
    epsilon: Option<String>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    gamma: Option<String>,
    /// Comma-separated budgets; `inf` is the non-private baseline.
    #[arg(long)]
    epsilons: Option<String>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
struct GraphArgs {
    #[command(flatten)]
    common: Common,
    /// Whitespace-separated `src dst` id pairs; needs `--features`.
    #[arg(long)]
    edges: Option<String>,
    /// Node feature CSV with an `id` column; needs `--edges`.
    #[arg(long)]
    features: Option<String>,
    /// Stochastic block model used when no graph files are given.
    #[arg(long)]
    nodes: Option<String>,
    #[arg(long)]
    blocks: Option<String>,
    #[arg(long)]
    p_in: Option<String>,
    #[arg(long)]
    p_out: Option<String>,
    /// Comma-separated co-occurrence probabilities.
    #[arg(long)]
    gamma: Option<String>,
    /// Share of known edges held out as positive test pairs.
    #[arg(long)]
    holdout: Option<String>,
    #[arg(long)]
    epsilon: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    repeats: Option<String>,
    #[arg(long)]
    jobs: Option<String>,
    #[arg(long)]
    sensitivity_mode: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    dual_epochs: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    key_bits: Option<String>,
    #[arg(long)]
    scale_bits: Option<String>,
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    encryption: Option<String>,
}

impl GraphArgs {
    fn pairs(&self) -> Vec<(&'static str, Option<String>)> {
        flag_pairs!(self;
            edges, features, nodes, blocks, p_in, p_out, gamma, holdout, epsilon,
            seed, repeats, jobs, sensitivity_mode, lambda, dual_epochs, lr,
            batch_size, key_bits, scale_bits, backend, encryption)
    }
}

#[derive(Args, Debug)]
struct SelftestArgs {
    /// Skips the two multi-seed training trends, which take minutes.
    #[arg(long)]
    skip_trends: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Reads `--config` and resolves it against `defaults` and `flags`.
fn resolve(
    common: &Common,
    defaults: &[(&'static str, String)],
    flags: &[(&'static str, Option<String>)],
) -> Result<Settings, CliError> {
    let file = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))?;
            parse_config_file(&text)?
        }
        None => Vec::new(),
    };
    let env_seed = std::env::var("MPDL_SEED").ok().filter(|s| !s.trim().is_empty());
    Settings::resolve(defaults, env_seed, &file, flags)
}

fn write_output(path: Option<&PathBuf>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::Io(format!("writing {}: {e}", p.display()))),
        None => {
            use std::io::Write;
            std::io::stdout()
                .write_all(text.as_bytes())
                .map_err(|e| CliError::Io(format!("writing stdout: {e}")))
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Mpdl(a) => {
            let mut flags = a.train.pairs();
            flags.extend(flag_pairs!(a; gamma, epsilon));
            let s = resolve(&a.common, &experiments::mpdl_defaults(), &flags)?;
            let csv = experiments::mpdl_table(&s, &a.common.audit())?;
            write_output(a.common.out.as_ref(), &csv)
        }
        Command::PrivacySweep(a) => {
            let mut flags = a.train.pairs();
            flags.extend(flag_pairs!(a; gamma, epsilons));
            let s = resolve(&a.common, &experiments::sweep_defaults(), &flags)?;
            let csv = experiments::privacy_sweep(&s, &a.common.audit())?;
            write_output(a.common.out.as_ref(), &csv)
        }
        Command::Graph(a) => {
            let s = resolve(&a.common, &experiments::graph_defaults(), &a.pairs())?;
            let csv = experiments::graph_auc(&s, &a.common.audit())?;
            write_output(a.common.out.as_ref(), &csv)
        }
        Command::Selftest(a) => {
            let mut sink: Box<dyn std::io::Write> = match &a.out {
                Some(p) => Box::new(std::fs::File::create(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?),
                None => Box::new(std::io::stdout()),
            };
            if experiments::selftest(!a.skip_trends, &mut sink)? {
                Ok(())
            } else {
                Err(CliError::Failed("some checks failed".into()))
            }
        }
    }
}

impl Common {
    fn audit(&self) -> experiments::Artifacts {
        experiments::Artifacts {
            dir: self.artifacts.clone(),
            unsafe_audit: self.unsafe_audit,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mpdl: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn core_errors_map_to_exit_codes() {
        let code = |e: mpdl_core::Error| CliError::from(e).exit_code();
        assert_eq!(code(mpdl_core::Error::Protocol("x".into())), 3);
        assert_eq!(code(mpdl_core::Error::BandOverflow), 3);
        assert_eq!(code(mpdl_core::Error::InvalidArgument("x".into())), 2);
        assert_eq!(code(mpdl_core::Error::Data("x".into())), 4);
        assert_eq!(code(std::io::Error::other("x").into()), 4);
        assert_eq!(code(mpdl_core::Error::NonFinite("x")), 1);
    }

    #[test]
    fn clap_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn every_flag_has_a_default() {
        let keys = |d: Vec<(&'static str, String)>| d.into_iter().map(|(k, _)| k).collect::<Vec<_>>();
        for sub in ["mpdl", "privacy-sweep", "graph"] {
            let (flags, known) = match Cli::try_parse_from(["mpdl", sub]).unwrap().command {
                Command::Mpdl(a) => (a.train.pairs(), keys(experiments::mpdl_defaults())),
                Command::PrivacySweep(a) => (a.train.pairs(), keys(experiments::sweep_defaults())),
                Command::Graph(a) => (a.pairs(), keys(experiments::graph_defaults())),
                Command::Selftest(_) => unreachable!(),
            };
            for (k, v) in flags {
                assert!(known.contains(&k) && v.is_none(), "{sub} --{k}");
            }
        }
    }
}
