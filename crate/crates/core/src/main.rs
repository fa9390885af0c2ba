use std::error::Error as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ctxbench::forge::ForgeControl;
use ctxbench::model::{AbstractionLevel, ImageSource};
use ctxbench::prompt::{Granularity, InjectionStrategy};
use ctxbench::retrieval::MatchMode;
use ctxbench::runner::{self, ExperimentConfig, MockMode, RunnerError};

#[derive(Parser)]
#[command(name = "ctxbench", version, about = "Context-dependent image retrieval benchmark")]
struct Cli {
    /// JSON experiment config; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    cache: Option<PathBuf>,
    /// `mock:<seed>` or an embedding service URL.
    #[arg(long, global = true)]
    endpoint: Option<String>,
    #[arg(long, global = true)]
    mock_mode: Option<MockMode>,
    #[arg(long, global = true)]
    mock_dim: Option<usize>,
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    #[arg(long, global = true, value_delimiter = ',')]
    strategies: Option<Vec<InjectionStrategy>>,
    #[arg(long, global = true, value_delimiter = ',')]
    granularities: Option<Vec<Granularity>>,
    #[arg(long, global = true, value_delimiter = ',')]
    levels: Option<Vec<AbstractionLevel>>,
    #[arg(long, global = true, value_delimiter = ',')]
    level_aware: Option<Vec<bool>>,
    #[arg(long, global = true, value_delimiter = ',')]
    match_modes: Option<Vec<MatchMode>>,
    /// Require group sizes 5, 10 or 20 and exactly two stories per group.
    #[arg(long, global = true)]
    paper_faithful: bool,
    /// Treat synopsis sentence-count mismatches as violations.
    #[arg(long, global = true)]
    strict_sentences: bool,
    /// Check image bytes against their digests.
    #[arg(long, global = true)]
    verify_images: bool,
    /// Skip the discrimination dump in `analyze`.
    #[arg(long, global = true)]
    no_discrimination: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Sample groups from a manifest and generate stories and queries.
    Forge(ForgeArgs),
    /// Check a dataset file.
    Validate,
    /// Embed everything a run needs, filling the cache.
    Embed,
    /// Rank every query in every configured cell and write metric tables.
    Evaluate,
    /// Query divergence and discrimination ranks from cached embeddings.
    Analyze,
    /// Merge the metric tables of several runs.
    Report(ReportArgs),
}

#[derive(Args)]
struct ForgeArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    source: Option<ImageSource>,
    #[arg(long)]
    groups: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Output dataset; defaults to the configured dataset path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Record/replay store for generation responses.
    #[arg(long)]
    replay: Option<PathBuf>,
    /// Serve generation from the replay store only.
    #[arg(long)]
    replay_only: bool,
    /// Allow any group size and story count.
    #[arg(long)]
    lenient: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory for the merged tables.
    #[arg(long)]
    out: PathBuf,
    /// Run directories produced by `evaluate`.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
}

fn apply(config: &mut ExperimentConfig, o: Overrides) {
    if let Some(v) = o.dataset {
        config.dataset = Some(v);
    }
    if let Some(v) = o.output_dir {
        config.output_dir = v;
    }
    if let Some(v) = o.cache {
        config.cache = Some(v);
    }
    if let Some(v) = o.endpoint {
        config.embedding.endpoint = v;
    }
    if let Some(v) = o.mock_mode {
        config.embedding.mock_mode = v;
    }
    if let Some(v) = o.mock_dim {
        config.embedding.mock_dim = v;
    }
    if let Some(v) = o.parallelism {
        config.embedding.parallelism = v;
    }
    if let Some(v) = o.strategies {
        config.strategies = v;
    }
    if let Some(v) = o.granularities {
        config.granularities = v;
    }
    if let Some(v) = o.levels {
        config.levels = v;
    }
    if let Some(v) = o.level_aware {
        config.level_aware = v;
    }
    if let Some(v) = o.match_modes {
        config.match_modes = v;
    }
    config.paper_faithful |= o.paper_faithful;
    config.strict_sentences |= o.strict_sentences;
    config.embedding.verify_images |= o.verify_images;
    if o.no_discrimination {
        config.discrimination = false;
    }
}

fn apply_forge(config: &mut ExperimentConfig, a: &ForgeArgs) {
    if let Some(v) = &a.manifest {
        config.manifest = Some(v.clone());
    }
    if let Some(v) = a.source {
        config.forge.source = v;
    }
    if let Some(v) = a.groups {
        config.forge.group_count = v;
    }
    if let Some(v) = a.size {
        config.forge.group_size = v;
    }
    if let Some(v) = a.seed {
        config.forge.seed = v;
    }
    if let Some(v) = a.temperature {
        config.forge.temperature = v;
    }
    if let Some(v) = &a.replay {
        config.generation.replay = Some(v.clone());
    }
    config.generation.replay_only |= a.replay_only;
    if a.lenient {
        config.forge.paper_faithful = false;
    }
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn run(cli: Cli) -> Result<(), RunnerError> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    apply(&mut config, cli.overrides);
    match cli.command {
        Command::Forge(args) => {
            apply_forge(&mut config, &args);
            let out = args
                .out
                .clone()
                .or_else(|| config.dataset.clone())
                .ok_or_else(|| RunnerError::Config("forge needs --out or a dataset path".into()))?;
            let outcome = runner::cmd_forge(&config, &out, ForgeControl::default())?;
            println!(
                "forged {} ({} units, generator {})",
                outcome.dataset_path.display(),
                outcome.units,
                outcome.generator_model
            );
        }
        Command::Validate => {
            let report = runner::cmd_validate(&config)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            if !report.is_valid() {
                return Err(RunnerError::Invalid {
                    path: config.dataset.clone().unwrap_or_default(),
                    violations: report.violations,
                });
            }
            println!("valid");
        }
        Command::Embed => print_json(&runner::cmd_embed(&config)?),
        Command::Evaluate => {
            let outcome = runner::cmd_evaluate(&config)?;
            print!("{}", ctxbench::analysis::report::metrics_csv(&outcome.table));
            eprintln!(
                "wrote {} ({} provider calls, {} cache hits, {:.2}s)",
                outcome.run_dir.display(),
                outcome.manifest.stats.provider_calls,
                outcome.manifest.stats.cache_hits,
                outcome.manifest.wall_time_secs
            );
        }
        Command::Analyze => {
            let outcome = runner::cmd_analyze(&config)?;
            print_json(&outcome.divergence);
            eprintln!("wrote {}", outcome.run_dir.display());
        }
        Command::Report(args) => {
            let table = runner::cmd_report(&args.runs, &args.out)?;
            print!("{}", ctxbench::analysis::report::metrics_csv(&table));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            if let RunnerError::Invalid { violations, .. } = &e {
                for v in violations {
                    eprintln!("  {v}");
                }
            }
            let mut shown = e.to_string();
            let mut source = e.source();
            while let Some(s) = source {
                let text = s.to_string();
                if !shown.contains(&text) {
                    eprintln!("  caused by: {text}");
                    shown = text;
                }
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
        Err(_) => ExitCode::from(4),
    }
}
