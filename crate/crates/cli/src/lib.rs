//! `mmrag` command-line pipeline.
//!
//! Every stage reads and writes files under the data and artifacts
//! directories named in the config, so stages can be rerun independently.
//! Exit status: 0 on success, 2 on usage or config errors, 1 on runtime
//! errors. Errors are reported on standard error as one JSON line.

pub mod commands;
pub mod config;
pub mod error;
pub mod model;
pub mod output;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::commands::{DiagnoseArgs, EvalArgs};
use crate::config::{Loaded, Overrides, Scenario};
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "mmrag", version, about = "Retrieval-augmented preference fine-tuning pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Pipeline config (JSON). Relative paths inside it resolve against its directory.
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Master seed; overrides `seed` in the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct RetrievalFlags {
    /// Number of contexts before truncation; overrides `k`.
    #[arg(long)]
    pub k: Option<usize>,
    /// Truncation threshold on log score ratios; overrides `gamma`.
    #[arg(long)]
    pub gamma: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write planted synthetic corpora and a scripted answer model to the data directory.
    SynthData {
        #[command(flatten)]
        common: Common,
        /// Corpus to generate; overrides `synth.scenario`.
        #[arg(long, value_enum)]
        scenario: Option<Scenario>,
    },
    /// Train the domain router on labeled images.
    TrainRouter {
        #[command(flatten)]
        common: Common,
        /// Overrides `router.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train one contrastive image/text encoder per domain.
    TrainRetriever {
        #[command(flatten)]
        common: Common,
        /// Train only this domain.
        #[arg(long)]
        domain: Option<String>,
        /// Overrides `retriever.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Embed each domain's reports into a searchable index.
    BuildIndex {
        #[command(flatten)]
        common: Common,
        /// Index only this domain.
        #[arg(long)]
        domain: Option<String>,
    },
    /// Route an image, retrieve contexts and truncate them; prints JSON.
    Retrieve {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        retrieval: RetrievalFlags,
        /// Image features: a JSON array or an object with `image_features`.
        #[arg(long, value_name = "PATH")]
        image: PathBuf,
        /// Also write the result to this file.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Build the preference dataset from the QA set and an answer model.
    GenPrefs {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        retrieval: RetrievalFlags,
        /// Answer model file; defaults to the data directory's model.json.
        #[arg(long, value_name = "PATH")]
        model: Option<PathBuf>,
        /// Number of noise steps; overrides `noise.steps`.
        #[arg(long)]
        steps: Option<usize>,
        /// Output JSONL; defaults to the artifacts directory's prefs.jsonl.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Fine-tune a categorical answer policy on the preference dataset.
    TrainDpo {
        #[command(flatten)]
        common: Common,
        /// Preference JSONL; defaults to the artifacts directory's prefs.jsonl.
        #[arg(long, value_name = "PATH")]
        prefs: Option<PathBuf>,
        /// Starting policy, also used as the frozen reference; defaults to a uniform policy.
        #[arg(long, value_name = "PATH")]
        init: Option<PathBuf>,
        /// Overrides `alpha`.
        #[arg(long)]
        alpha: Option<f64>,
        /// Overrides `dpo.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
        /// Overrides `dpo.learning_rate`.
        #[arg(long)]
        learning_rate: Option<f64>,
    },
    /// Score predictions against gold answers, or run a model and score it.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        retrieval: RetrievalFlags,
        /// Gold QA JSONL; defaults to the data directory's eval.jsonl.
        #[arg(long, value_name = "PATH")]
        gold: Option<PathBuf>,
        /// Predictions JSONL with {id, pred, score?, text?} records.
        #[arg(long, value_name = "PATH", conflicts_with = "model", required_unless_present = "model")]
        pred: Option<PathBuf>,
        /// Answer model to run with retrieval; adds copy-reference and over-reliance rates.
        #[arg(long, value_name = "PATH")]
        model: Option<PathBuf>,
        /// Number of noise steps for the noisy-image probes; overrides `noise.steps`.
        #[arg(long)]
        steps: Option<usize>,
        /// Metrics JSON; defaults to the artifacts directory's metrics.json.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Report input-variable weights before and after fine-tuning.
    Diagnose {
        #[command(flatten)]
        common: Common,
        /// Trained policy; defaults to the artifacts directory's policy.json.
        #[arg(long, value_name = "PATH")]
        policy: Option<PathBuf>,
        /// Reference policy; defaults to the artifacts directory's reference_policy.json.
        #[arg(long, value_name = "PATH")]
        reference: Option<PathBuf>,
        /// Preference JSONL supplying probe inputs.
        #[arg(long, value_name = "PATH")]
        prefs: Option<PathBuf>,
        /// Overrides `alpha` for the assumption constants.
        #[arg(long)]
        alpha: Option<f64>,
        /// Monte Carlo draws per estimate; overrides `diagnose.samples`.
        #[arg(long)]
        samples: Option<usize>,
        /// Report JSON; defaults to the artifacts directory's diagnose.json.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
}

fn load(common: &Common, mut o: Overrides) -> CliResult<Loaded> {
    o.seed = common.seed;
    config::load(&common.config, &o)
}

fn with_retrieval(r: &RetrievalFlags) -> Overrides {
    Overrides {
        k: r.k,
        gamma: r.gamma,
        ..Default::default()
    }
}

pub fn execute(command: Command) -> CliResult<()> {
    match command {
        Command::SynthData { common, scenario } => {
            let cfg = load(&common, Overrides { scenario, ..Default::default() })?;
            commands::synth_data(&cfg)
        }
        Command::TrainRouter { common, epochs } => {
            let cfg = load(&common, Overrides { router_epochs: epochs, ..Default::default() })?;
            commands::train_router_cmd(&cfg)
        }
        Command::TrainRetriever { common, domain, epochs } => {
            let cfg = load(&common, Overrides { retriever_epochs: epochs, ..Default::default() })?;
            commands::train_retriever_cmd(&cfg, domain.as_deref())
        }
        Command::BuildIndex { common, domain } => {
            let cfg = load(&common, Overrides::default())?;
            commands::build_index_cmd(&cfg, domain.as_deref())
        }
        Command::Retrieve { common, retrieval, image, out } => {
            let cfg = load(&common, with_retrieval(&retrieval))?;
            commands::retrieve_cmd(&cfg, &image, out.as_deref())
        }
        Command::GenPrefs { common, retrieval, model, steps, out } => {
            let cfg = load(&common, Overrides { steps, ..with_retrieval(&retrieval) })?;
            commands::gen_prefs(&cfg, model.as_deref(), out.as_deref())
        }
        Command::TrainDpo { common, prefs, init, alpha, epochs, learning_rate } => {
            let o = Overrides {
                alpha,
                dpo_epochs: epochs,
                dpo_learning_rate: learning_rate,
                ..Default::default()
            };
            let cfg = load(&common, o)?;
            commands::train_dpo(&cfg, prefs.as_deref(), init.as_deref())
        }
        Command::Eval { common, retrieval, gold, pred, model, steps, out } => {
            let cfg = load(&common, Overrides { steps, ..with_retrieval(&retrieval) })?;
            let args = EvalArgs {
                gold: gold.as_deref(),
                pred: pred.as_deref(),
                model: model.as_deref(),
                out: out.as_deref(),
            };
            commands::eval_cmd(&cfg, args)
        }
        Command::Diagnose { common, policy, reference, prefs, alpha, samples, out } => {
            let o = Overrides {
                alpha,
                diagnose_samples: samples,
                ..Default::default()
            };
            let cfg = load(&common, o)?;
            let args = DiagnoseArgs {
                policy: policy.as_deref(),
                reference: reference.as_deref(),
                prefs: prefs.as_deref(),
                out: out.as_deref(),
            };
            commands::diagnose_cmd(&cfg, args)
        }
    }
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    0
                }
                _ => {
                    let err = CliError::Usage(e.render().to_string().trim_end().to_string());
                    eprintln!("{}", err.to_json());
                    err.exit_code()
                }
            };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}
