//! Operator CLI for the similar-users CTR pipeline. Stages write into a run
//! directory and verify their upstream artifacts; `run` chains them all.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use suin_core::augment::PositionScheme;
use suin_core::config::{resolve_out_dir, RunConfig};
use suin_core::data::Split;
use suin_core::model::{Grouping, Variant};
use suin_core::pipeline::{
    cmd_ablate, cmd_build_pool, cmd_evaluate, cmd_generate, cmd_inspect, cmd_pretrain,
    cmd_retrieve, cmd_split, cmd_train, render_report, RunDir, Sweep,
};
use suin_core::pool::SimilarityMeasure;

#[derive(Parser)]
#[command(
    name = "suin",
    about = "Similar-users-augmented CTR prediction pipeline",
    version
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: config, then $SUIN_OUT_ROOT, then ./runs).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; outputs are identical at any value.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Args, Default)]
struct ModelOverrides {
    /// Neighbor slots K.
    #[arg(long)]
    k: Option<usize>,
    /// Slot width L.
    #[arg(long)]
    l: Option<usize>,
    /// Model variant (full, no_uta, no_uta_keep_be, random_users,
    /// no_su_no_uta, no_pos).
    #[arg(long)]
    variant: Option<Variant>,
    /// Similarity measure (cosine, inner_product, euclidean, jaccard).
    #[arg(long)]
    measure: Option<SimilarityMeasure>,
    /// Position scheme (utpe, tpe, stpe, none).
    #[arg(long)]
    scheme: Option<PositionScheme>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the interaction corpus.
    Generate,
    /// Partition users into train/val/test.
    Split,
    /// Pretrain the sequence encoder and embed every user.
    Pretrain,
    /// Assemble the train-user retrieval pool.
    BuildPool {
        #[command(flatten)]
        overrides: ModelOverrides,
    },
    /// Precompute neighbor lists for every user.
    Retrieve {
        #[command(flatten)]
        overrides: ModelOverrides,
    },
    /// Train the CTR model.
    Train {
        #[command(flatten)]
        overrides: ModelOverrides,
    },
    /// Score a held-out split and write the metric report.
    Evaluate {
        #[command(flatten)]
        overrides: ModelOverrides,
        /// Split to score.
        #[arg(long, default_value = "test")]
        split: Split,
        /// Metric breakdown (none, seq_length, aug_ratio).
        #[arg(long, default_value = "none")]
        grouping: Grouping,
    },
    /// Dump one user's augmented sequence and attention weights.
    Inspect {
        #[command(flatten)]
        overrides: ModelOverrides,
        /// User to inspect.
        #[arg(long)]
        user: u64,
    },
    /// Run every stage in order, then evaluate the test split.
    Run {
        #[command(flatten)]
        overrides: ModelOverrides,
        /// Metric breakdown for the final report.
        #[arg(long, default_value = "seq_length")]
        grouping: Grouping,
    },
    /// Compare settings across shared seeds and emit a table.
    Ablate {
        #[command(flatten)]
        overrides: ModelOverrides,
        /// Sweep to run (variants, topk, position_schemes,
        /// similarity_measures, thresholds).
        #[arg(long)]
        sweep: Sweep,
    },
}

fn load_config(common: &Common, overrides: Option<&ModelOverrides>) -> anyhow::Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(threads) = common.threads {
        config.threads = threads;
    }
    if let Some(o) = overrides {
        if let Some(k) = o.k {
            config.model.k = k;
            config.retrieval.k_retrieve = config.retrieval.k_retrieve.max(k);
        }
        if let Some(l) = o.l {
            config.model.l = l;
        }
        if let Some(v) = o.variant {
            config.model.variant = v;
        }
        if let Some(m) = o.measure {
            config.retrieval.measure = m;
        }
        if let Some(s) = o.scheme {
            config.model.position_scheme = s;
        }
    }
    config.validate()?;
    Ok(config)
}

fn print_pairs(stage: &str, pairs: &[(String, String)]) {
    let rendered: Vec<String> = pairs.iter().map(|(k, v)| format!("{k}={v}")).collect();
    println!("{stage}: {}", rendered.join(" "));
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let overrides = match &cli.command {
        Command::BuildPool { overrides }
        | Command::Retrieve { overrides }
        | Command::Train { overrides }
        | Command::Evaluate { overrides, .. }
        | Command::Inspect { overrides, .. }
        | Command::Run { overrides, .. }
        | Command::Ablate { overrides, .. } => Some(overrides),
        Command::Generate | Command::Split | Command::Pretrain => None,
    };
    let config = load_config(&cli.common, overrides)?;
    let run = RunDir::new(resolve_out_dir(cli.common.out.as_deref(), &config));
    std::fs::create_dir_all(run.root())?;

    match cli.command {
        Command::Generate => print_pairs("generate", &cmd_generate(&config, &run)?),
        Command::Split => print_pairs("split", &cmd_split(&config, &run)?),
        Command::Pretrain => print_pairs("pretrain", &cmd_pretrain(&config, &run)?),
        Command::BuildPool { .. } => print_pairs("build-pool", &cmd_build_pool(&config, &run)?),
        Command::Retrieve { .. } => print_pairs("retrieve", &cmd_retrieve(&config, &run)?),
        Command::Train { .. } => print_pairs("train", &cmd_train(&config, &run)?),
        Command::Evaluate { split, grouping, .. } => {
            let report = cmd_evaluate(&config, &run, split, grouping)?;
            print!("{}", render_report(&report, grouping));
        }
        Command::Inspect { user, .. } => print!("{}", cmd_inspect(&config, &run, user)?),
        Command::Run { grouping, .. } => {
            print_pairs("generate", &cmd_generate(&config, &run)?);
            print_pairs("split", &cmd_split(&config, &run)?);
            print_pairs("pretrain", &cmd_pretrain(&config, &run)?);
            print_pairs("build-pool", &cmd_build_pool(&config, &run)?);
            print_pairs("retrieve", &cmd_retrieve(&config, &run)?);
            print_pairs("train", &cmd_train(&config, &run)?);
            let report = cmd_evaluate(&config, &run, Split::Test, grouping)?;
            print!("{}", render_report(&report, grouping));
        }
        Command::Ablate { sweep, .. } => {
            let table = cmd_ablate(&config, &run, sweep)?;
            print!("{}", table.render());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("suin: {e}");
            ExitCode::FAILURE
        }
    }
}
