use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context as _, Result};
use clap::{Args, Parser, Subcommand};
use viraal_core::config::RunConfig;
use viraal_core::corpus::{self, Dataset};
use viraal_core::synthetic;
use viraal_harness::aggregate;
use viraal_harness::experiment::{AlCell, Cell, Context, Method, RegimeCell, SmallMediumCell, SmallMethod, SplitSize, Task, Variant, TUNED_BATCH_SIZES};
use viraal_harness::queue::{self, QueueSummary};

#[derive(Parser)]
#[command(name = "viraal", version, about = "Joint NLU experiments with VAT and active learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sweep labeled fractions of the train split.
    Regime(RegimeArgs),
    /// Two-round active learning at several total budgets.
    Al(AlArgs),
    /// Fixed small/medium labeled splits with tuned batch size.
    SmallMedium(SmallMediumArgs),
    /// Mean and std over seeds for every result under a directory.
    Aggregate(AggregateArgs),
    /// Write a synthetic dataset in the seq.in / seq.out / label layout.
    Synth(SynthArgs),
}

#[derive(Args)]
struct Common {
    /// Dataset directory holding train/, test/ and dev/ (or valid/).
    #[arg(long)]
    data: PathBuf,
    /// Dataset name; defaults to the directory name.
    #[arg(long)]
    dataset: Option<String>,
    /// TOML file with run-config overrides.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Pretrained word vectors, one `word v1 … vD` per line.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Carve this many dev examples out of train when no dev split exists.
    #[arg(long)]
    dev_carve: Option<usize>,
    /// Number of seeds, run as 0..N.
    #[arg(long, default_value_t = 8)]
    seeds: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Cells trained in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

impl Common {
    fn name(&self) -> String {
        self.dataset.clone().unwrap_or_else(|| {
            self.data
                .file_name()
                .map(|s| s.to_string_lossy().to_lowercase())
                .unwrap_or_else(|| "dataset".into())
        })
    }

    fn context(&self) -> Result<Context> {
        let name = self.name();
        let base = RunConfig::load(&name, self.config.as_deref())?;
        let dataset = Dataset::load(&self.data, &name, self.dev_carve, base.seed)
            .with_context(|| format!("loading {}", self.data.display()))?;
        Context::new(dataset, base, self.embeddings.as_deref())
    }
}

fn parse_list<T: std::str::FromStr<Err = anyhow::Error>>(items: &[String]) -> Result<Vec<T>> {
    items.iter().map(|s| s.parse()).collect()
}

#[derive(Args)]
struct RegimeArgs {
    #[command(flatten)]
    common: Common,
    /// Labeled fractions in percent.
    #[arg(long, value_delimiter = ',', required = true)]
    fractions: Vec<f64>,
    /// Loss variants, e.g. ce-joint,vat-joint.
    #[arg(long, value_delimiter = ',', default_value = "ce-int,ce-slot,ce-joint,vat-int,vat-slot,vat-joint")]
    variants: Vec<String>,
}

#[derive(Args)]
struct AlArgs {
    #[command(flatten)]
    common: Common,
    /// Total budgets in percent of train; half is drawn at random first.
    #[arg(long, value_delimiter = ',', required = true)]
    budgets: Vec<f64>,
    /// Methods, e.g. ce-random,ce-ent,vat-random,vat-ent.
    #[arg(long, value_delimiter = ',', default_value = "ce-random,ce-ent,vat-random,vat-ent")]
    methods: Vec<String>,
    /// Trained heads: int, slot or joint.
    #[arg(long, value_delimiter = ',', default_value = "joint")]
    tasks: Vec<String>,
}

#[derive(Args)]
struct SmallMediumArgs {
    #[command(flatten)]
    common: Common,
    /// small or medium.
    #[arg(long)]
    split: String,
    /// Labeled size; required for datasets without a known split size.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long, value_delimiter = ',', default_value = "baseline,vat-joint,viraal-joint-entropy,viraal-individual-entropy")]
    methods: Vec<String>,
    /// Batch sizes to tune over.
    #[arg(long, value_delimiter = ',')]
    batch_sizes: Option<Vec<usize>>,
}

#[derive(Args)]
struct AggregateArgs {
    /// Experiment output directory (the one holding cells/).
    #[arg(long = "in")]
    input: PathBuf,
    /// Where to write summary and panel CSVs; defaults to the input directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 400)]
    train: usize,
    #[arg(long, default_value_t = 100)]
    dev: usize,
    #[arg(long, default_value_t = 100)]
    test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn run_queue<C: Cell>(ctx: &Context, cells: Vec<C>, common: &Common) -> Result<QueueSummary> {
    let summary = queue::run_cells(ctx, &cells, &common.out, common.jobs)?;
    println!(
        "{} cells: {} completed, {} already present, {} failed",
        cells.len(),
        summary.completed,
        summary.skipped,
        summary.failed.len()
    );
    for key in &summary.failed {
        println!("failed: {key}");
    }
    aggregate_dir(&common.out, &common.out)?;
    Ok(summary)
}

fn aggregate_dir(input: &Path, out: &Path) -> Result<bool> {
    let records = queue::read_all(input)?;
    let rows = aggregate::summarize(&records);
    let written = aggregate::write_outputs(&rows, out)?;
    let mismatches = aggregate::initial_set_mismatches(&records);
    for m in &mismatches {
        eprintln!("initial-set mismatch: {m}");
    }
    println!("wrote {} files to {}", written.len(), out.display());
    Ok(mismatches.is_empty() && records.iter().all(|r| r.is_ok()))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Regime(a) => {
            let ctx = a.common.context()?;
            let variants: Vec<Variant> = parse_list(&a.variants)?;
            let mut cells = Vec::new();
            for &fraction in &a.fractions {
                for &variant in &variants {
                    for seed in 0..a.common.seeds {
                        cells.push(RegimeCell {
                            dataset: ctx.name().to_owned(),
                            fraction,
                            variant,
                            seed,
                        });
                    }
                }
            }
            Ok(run_queue(&ctx, cells, &a.common)?.failed.is_empty())
        }
        Command::Al(a) => {
            let ctx = a.common.context()?;
            let methods: Vec<Method> = parse_list(&a.methods)?;
            let tasks: Vec<Task> = parse_list(&a.tasks)?;
            let mut cells = Vec::new();
            for &budget in &a.budgets {
                for &task in &tasks {
                    for &method in &methods {
                        for seed in 0..a.common.seeds {
                            cells.push(AlCell {
                                dataset: ctx.name().to_owned(),
                                budget,
                                method,
                                task,
                                seed,
                            });
                        }
                    }
                }
            }
            Ok(run_queue(&ctx, cells, &a.common)?.failed.is_empty())
        }
        Command::SmallMedium(a) => {
            let ctx = a.common.context()?;
            let split: SplitSize = a.split.parse()?;
            let size = match (a.size, split.size(ctx.name())) {
                (Some(n), _) | (None, Some(n)) => n,
                (None, None) => bail!("no known {} size for {}; pass --size", a.split, ctx.name()),
            };
            let methods: Vec<SmallMethod> = parse_list(&a.methods)?;
            let batch_sizes = a.batch_sizes.clone().unwrap_or_else(|| TUNED_BATCH_SIZES.to_vec());
            let mut cells = Vec::new();
            for &method in &methods {
                for seed in 0..a.common.seeds {
                    cells.push(SmallMediumCell {
                        dataset: ctx.name().to_owned(),
                        size,
                        method,
                        batch_sizes: batch_sizes.clone(),
                        seed,
                    });
                }
            }
            Ok(run_queue(&ctx, cells, &a.common)?.failed.is_empty())
        }
        Command::Aggregate(a) => {
            let out = a.out.unwrap_or_else(|| a.input.clone());
            aggregate_dir(&a.input, &out)
        }
        Command::Synth(a) => {
            let ds = synthetic::dataset(a.train, a.dev, a.test, a.seed);
            for (split, examples) in [("train", &ds.train), ("dev", &ds.dev), ("test", &ds.test)] {
                let dir = a.out.join(split);
                std::fs::create_dir_all(&dir)?;
                corpus::write_split(&dir, examples)?;
            }
            println!("wrote synthetic dataset to {}", a.out.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
