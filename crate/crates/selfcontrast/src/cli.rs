//! Command-line interface.
//!
//! Exit codes: 0 on success, 2 for usage and config errors, 3 when a stage
//! fails.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use selfcontrast_core::filter::HashedNgramEmbedder;
use selfcontrast_core::theorem::GradientModel;

use crate::config::{ConfigError, RunConfig};
use crate::manifest::RunManifest;
use crate::pipeline::{Run, Stage, StageError, STAGES};
use crate::stub::{Fault, StubServer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_STAGE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "selfcontrast", version, about = "Feedback-free preference alignment with self-generated negatives on toy tasks")]
pub struct Cli {
    /// JSON run config; defaults apply to anything it omits.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Run directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "run")]
    pub out: PathBuf,
    /// Root seed; replaces the config's root seed and all section seeds.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Print the stage plan and exit without writing anything.
    #[arg(long, global = true)]
    pub dry_run: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic prompt corpus and its splits.
    GenCorpus,
    /// Supervised fine-tuning of the toy policy.
    Sft,
    /// Sample R responses per prompt from the SFT policy.
    Sample,
    /// Build Self-Contrast preference data by embedding-similarity filtering.
    Filter,
    /// DPO against the frozen SFT policy, one model per m.
    TrainDpo,
    /// Oracle-reward evaluation and the run summary.
    Eval,
    /// Run all stages in order, or only the one named by --stage.
    Pipeline {
        #[arg(long, value_enum)]
        stage: Option<Stage>,
    },
    /// Closed-form vs Monte Carlo variances of multi-pair and multi-negative
    /// gradient estimators.
    SimulateTheorem {
        /// Replace the config grid with one point (needs --sigma2 too).
        #[arg(long, requires = "sigma2")]
        sigma1: Option<f64>,
        #[arg(long, requires = "sigma1")]
        sigma2: Option<f64>,
        #[arg(long, default_value_t = 0.0, requires = "sigma1")]
        rho: f64,
        /// Pair counts (comma separated).
        #[arg(long, value_delimiter = ',')]
        l: Option<Vec<u64>>,
        /// Negative counts (comma separated); omitted means the smallest
        /// sufficient m for each l.
        #[arg(long, value_delimiter = ',')]
        m: Option<Vec<u64>>,
        #[arg(long)]
        trials: Option<u64>,
    },
    /// Compare more negatives per prompt against more oracle-labelled pairs.
    CompareNegatives {
        #[arg(long, value_delimiter = ',')]
        m_list: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        pair_list: Option<Vec<usize>>,
    },
    /// Check that every file in the run directory is listed in the manifest
    /// with a matching hash.
    Verify,
    /// Print the default config as JSON.
    DefaultConfig,
    /// Serve hashed n-gram embeddings over HTTP (POST /embed).
    StubServer {
        #[arg(long, default_value = "127.0.0.1:8089")]
        addr: String,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long = "embed-seed")]
        embed_seed: Option<u64>,
    },
}

enum Failure {
    Config(String),
    Stage(StageError),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<StageError> for Failure {
    fn from(e: StageError) -> Self {
        Failure::Stage(e)
    }
}

fn load_config(cli: &Cli) -> Result<(RunConfig, PathBuf), ConfigError> {
    let (cfg, base) = match &cli.config {
        Some(p) => (RunConfig::load(p)?, p.parent().map(Path::to_path_buf).unwrap_or_default()),
        None => (RunConfig::default(), PathBuf::new()),
    };
    let cfg = match cli.seed {
        Some(s) => cfg.with_root_seed(s),
        None => cfg,
    };
    Ok((cfg, base))
}

fn print(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes());
    let _ = out.flush();
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
        Err(Failure::Stage(e)) => {
            eprintln!("error: {e}");
            // A run directory created from another config is a config problem.
            if e.stage == "config" {
                EXIT_CONFIG
            } else {
                EXIT_STAGE
            }
        }
    }
}

fn execute(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::DefaultConfig => {
            print(&format!("{}\n", RunConfig::default().to_json()));
            return Ok(());
        }
        Command::StubServer { addr, dim, n, embed_seed } => {
            let d = HashedNgramEmbedder::default();
            let emb = HashedNgramEmbedder { dim: dim.unwrap_or(d.dim), n: n.unwrap_or(d.n), seed: embed_seed.unwrap_or(d.seed) };
            if emb.dim == 0 || emb.n == 0 {
                return Err(Failure::Config("--dim and --n must be at least 1".into()));
            }
            if cli.dry_run {
                print(&format!("would serve {emb:?} at http://{addr}/embed\n"));
                return Ok(());
            }
            let server = StubServer::start(addr, emb, Fault::None)
                .map_err(|e| Failure::Stage(StageError { stage: "stub-server".into(), message: e.to_string() }))?;
            print(&format!("serving {}\n", server.url()));
            server.join();
            return Ok(());
        }
        Command::Verify => {
            let manifest: RunManifest = crate::formats::read_json(&RunManifest::path(&cli.out))
                .map_err(|e| StageError { stage: "verify".into(), message: e.to_string() })?;
            let problems =
                manifest.verify(&cli.out).map_err(|e| StageError { stage: "verify".into(), message: e.to_string() })?;
            if problems.is_empty() {
                print(&format!("{}: {} files verified\n", cli.out.display(), manifest.files().len()));
                return Ok(());
            }
            return Err(Failure::Stage(StageError { stage: "verify".into(), message: problems.join("; ") }));
        }
        _ => {}
    }

    let (mut cfg, base) = load_config(cli)?;
    if let Command::SimulateTheorem { sigma1, sigma2, rho, l, m, trials } = &cli.command {
        if let (Some(s1), Some(s2)) = (sigma1, sigma2) {
            cfg.theorem.grid = vec![GradientModel::new(*s1, *s2, *rho)];
        }
        if let Some(l) = l {
            cfg.theorem.l = l.clone();
        }
        if let Some(m) = m {
            cfg.theorem.m = m.clone();
        }
        if let Some(t) = trials {
            cfg.theorem.trials = *t;
        }
    }
    if let Command::CompareNegatives { m_list, pair_list } = &cli.command {
        if let Some(v) = m_list {
            cfg.compare.m_list = v.clone();
        }
        if let Some(v) = pair_list {
            cfg.compare.pair_list = v.clone();
        }
        if cfg.compare.m_list.is_empty() || cfg.compare.pair_list.is_empty() {
            return Err(Failure::Config("compare-negatives needs a nonempty m_list and pair_list".into()));
        }
    }
    let run = Run::new(cfg, &cli.out, base)?;

    let stages: Vec<Stage> = match &cli.command {
        Command::GenCorpus => vec![Stage::GenCorpus],
        Command::Sft => vec![Stage::Sft],
        Command::Sample => vec![Stage::Sample],
        Command::Filter => vec![Stage::Filter],
        Command::TrainDpo => vec![Stage::TrainDpo],
        Command::Eval => vec![Stage::Eval],
        Command::Pipeline { stage: Some(s) } => vec![*s],
        Command::Pipeline { stage: None } => STAGES.to_vec(),
        Command::SimulateTheorem { .. } => {
            if cli.dry_run {
                print(&format!("{}1. simulate-theorem\n     writes theorem/simulation.csv\n", run.plan(&[])));
                return Ok(());
            }
            let rows = run.simulate_theorem()?;
            print(&format!("{} rows written to {}\n", rows.len(), run.path("theorem/simulation.csv").display()));
            return Ok(());
        }
        Command::CompareNegatives { .. } => {
            let (m_list, pair_list) = (&run.config.compare.m_list, &run.config.compare.pair_list);
            if cli.dry_run {
                let r = run.compare_pool_size(m_list, pair_list);
                print(&format!(
                    "{}compare-negatives: R = {r}, m {m_list:?}, pairs {pair_list:?}\n     writes compare/responses.jsonl, compare/results.csv\n",
                    run.plan(&[Stage::GenCorpus, Stage::Sft])
                ));
                return Ok(());
            }
            let rows = run.compare_negatives(m_list, pair_list)?;
            let mut text = String::from("scheme,k,records,win_rate\n");
            for r in rows {
                text.push_str(&format!("{},{},{},{:.4}\n", r.scheme, r.k, r.records, r.win_rate));
            }
            print(&text);
            return Ok(());
        }
        Command::DefaultConfig | Command::StubServer { .. } | Command::Verify => unreachable!("handled above"),
    };

    if cli.dry_run {
        print(&run.plan(&stages));
        return Ok(());
    }
    for s in &stages {
        run.run_stage(*s)?;
    }
    if stages.contains(&Stage::Eval) {
        let summary: crate::pipeline::Summary = crate::formats::read_json(&run.path(crate::pipeline::SUMMARY_FILE))
            .map_err(|e| StageError { stage: "eval".into(), message: e.to_string() })?;
        let mut text = format!("sft win rate {:.4}\n", summary.sft.win_rate);
        for v in &summary.self_contrast {
            text.push_str(&format!(
                "self-contrast m={} win rate {:.4} ({:+.4}), data accuracy {}\n",
                v.m,
                v.win_rate,
                v.win_rate_gain,
                v.filter.data_accuracy.map_or("n/a".to_string(), |a| format!("{a:.4}"))
            ));
        }
        print(&text);
    }
    Ok(())
}
