//! `xag`: data generation, staged training, evaluation, ablation and
//! gradient checks over one flat `key=value` config file.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{error, info};

use xag_core::data::{generate, DatasetFile, Split};
use xag_core::eval::{ablation_report, evaluate, AblationBundles, Variant};
use xag_core::gradsuite::gradient_suite;
use xag_core::numcore::gradcheck::DEFAULT_TOLERANCE;
use xag_core::pipeline::{train_baseline, train_stage1, train_stage2, train_stage3, CheckpointBundle, StageTag, TrainOutput};
use xag_core::{Error, ErrorCategory, RunConfig};

#[derive(Parser)]
#[command(name = "xag", version, about = "Cross-modal graph matching with learned attack nodes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/val/test dataset files.
    GenData {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run one training stage.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Parent checkpoint; defaults to the previous stage's file in the output directory.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "clean")]
        variant: VariantArg,
    },
    /// Generate data, train every stage and write the ablation table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Baseline,
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
}

impl From<StageArg> for StageTag {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Baseline => StageTag::Baseline,
            StageArg::One => StageTag::Scfc,
            StageArg::Two => StageTag::Attack,
            StageArg::Three => StageTag::Adversarial,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Clean,
    Attacked,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Clean => Variant::Clean,
            VariantArg::Attacked => Variant::Attacked,
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        ErrorCategory::Config => 2,
        ErrorCategory::State => 3,
        ErrorCategory::Integrity => 4,
        ErrorCategory::Check => 5,
    }
}

fn init_logging() {
    let level = match std::env::var("XAG_LOG").as_deref() {
        Ok("quiet") => log::LevelFilter::Error,
        Ok("debug") => log::LevelFilter::Debug,
        _ => log::LevelFilter::Info,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
}

struct Layout {
    root: PathBuf,
}

impl Layout {
    fn new(cfg: &RunConfig) -> Self {
        Self {
            root: cfg.output_dir.clone(),
        }
    }

    fn dataset(&self, split: Split) -> PathBuf {
        self.root.join("data").join(format!("{}.xagd", split.name()))
    }

    fn checkpoint(&self, stage: StageTag) -> PathBuf {
        self.root.join("checkpoints").join(format!("{}.xagc", stage.name()))
    }

    fn history(&self, stage: StageTag) -> PathBuf {
        self.root.join("history").join(format!("{}.csv", stage.name()))
    }

    fn report(&self, checkpoint: &Path, variant: Variant) -> PathBuf {
        let stem = checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
        self.root.join("reports").join(format!("{stem}_{}.txt", variant.name()))
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> xag_core::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Loads the config and echoes its canonical form into the output directory.
fn load_config(path: &Path) -> xag_core::Result<(RunConfig, Layout)> {
    let cfg = RunConfig::load(path)?;
    let layout = Layout::new(&cfg);
    write_file(&layout.root.join("config.txt"), cfg.render().as_bytes())?;
    Ok((cfg, layout))
}

fn load_split(layout: &Layout, split: Split, cfg: &RunConfig) -> xag_core::Result<DatasetFile> {
    let path = layout.dataset(split);
    if !path.exists() {
        return Err(Error::State(format!(
            "dataset {} not found; run gen-data first",
            path.display()
        )));
    }
    let ds = DatasetFile::load(&path)?;
    if ds.split != split || ds.diversity != cfg.diversity() || ds.dims.n_nodes != cfg.n_nodes || ds.dims.dim_in != cfg.dim_in {
        return Err(Error::Integrity(format!(
            "dataset {} does not match the configuration",
            path.display()
        )));
    }
    Ok(ds)
}

fn gen_data(cfg: &RunConfig, layout: &Layout) -> xag_core::Result<()> {
    for ds in generate(&cfg.diversity(), &cfg.dims())? {
        let path = layout.dataset(ds.split);
        write_file(&path, &ds.to_bytes())?;
        info!(
            "wrote {} ({} images, {} texts, {} identities)",
            path.display(),
            ds.images.len(),
            ds.texts.len(),
            ds.identities().len()
        );
    }
    Ok(())
}

fn run_stage(cfg: &RunConfig, stage: StageTag, train: &DatasetFile, parent: Option<&CheckpointBundle>) -> xag_core::Result<TrainOutput> {
    let stage_cfg = cfg.stage(stage);
    let need_parent = || {
        parent.ok_or_else(|| Error::State(format!("{} needs a parent checkpoint", stage.name())))
    };
    match stage {
        StageTag::Baseline => train_baseline(&stage_cfg, train),
        StageTag::Scfc => train_stage1(&stage_cfg, train),
        StageTag::Attack => train_stage2(&stage_cfg, train, need_parent()?),
        StageTag::Adversarial => train_stage3(&stage_cfg, train, need_parent()?),
    }
}

fn save_output(layout: &Layout, stage: StageTag, out: &TrainOutput) -> xag_core::Result<PathBuf> {
    let path = layout.checkpoint(stage);
    write_file(&path, &out.bundle.to_bytes())?;
    write_file(&layout.history(stage), out.history.to_csv().as_bytes())?;
    info!("wrote {}", path.display());
    Ok(path)
}

fn train(cfg: &RunConfig, layout: &Layout, stage: StageTag, from: Option<&Path>) -> xag_core::Result<()> {
    let parent = match stage.parent() {
        None => None,
        Some(parent_stage) => {
            let path = from.map(Path::to_path_buf).unwrap_or_else(|| layout.checkpoint(parent_stage));
            if !path.exists() {
                return Err(Error::State(format!(
                    "{} needs the {} checkpoint {}",
                    stage.name(),
                    parent_stage.name(),
                    path.display()
                )));
            }
            Some(CheckpointBundle::load(&path, &cfg.hash(), Some(parent_stage))?)
        }
    };
    let train = load_split(layout, Split::Train, cfg)?;
    let out = run_stage(cfg, stage, &train, parent.as_ref())?;
    save_output(layout, stage, &out)?;
    Ok(())
}

fn eval(cfg: &RunConfig, layout: &Layout, checkpoint: &Path, variant: Variant) -> xag_core::Result<()> {
    if !checkpoint.exists() {
        return Err(Error::State(format!("checkpoint {} not found", checkpoint.display())));
    }
    let bundle = CheckpointBundle::load(checkpoint, &cfg.hash(), None)?;
    let test = load_split(layout, Split::Test, cfg)?;
    let report = evaluate(&test, &bundle, variant)?;
    let path = layout.report(checkpoint, variant);
    write_file(&path, report.render().as_bytes())?;
    print!("{}", report.render());
    info!("wrote {}", path.display());
    Ok(())
}

fn ablate(cfg: &RunConfig, layout: &Layout) -> xag_core::Result<()> {
    gen_data(cfg, layout)?;
    let train = load_split(layout, Split::Train, cfg)?;
    let test = load_split(layout, Split::Test, cfg)?;
    let baseline = run_stage(cfg, StageTag::Baseline, &train, None)?;
    save_output(layout, StageTag::Baseline, &baseline)?;
    let scfc = run_stage(cfg, StageTag::Scfc, &train, None)?;
    save_output(layout, StageTag::Scfc, &scfc)?;
    let anl = run_stage(cfg, StageTag::Attack, &train, Some(&scfc.bundle))?;
    save_output(layout, StageTag::Attack, &anl)?;
    let at = run_stage(cfg, StageTag::Adversarial, &train, Some(&anl.bundle))?;
    save_output(layout, StageTag::Adversarial, &at)?;
    let table = ablation_report(
        &test,
        &AblationBundles {
            baseline: Some(&baseline.bundle),
            scfc: Some(&scfc.bundle),
            anl: Some(&anl.bundle),
            at: Some(&at.bundle),
        },
    )?;
    let at_attacked = evaluate(&test, &at.bundle, Variant::Attacked)?;
    let mut text = table.render();
    text.push_str(&format!(
        "+at\tattacked\t{:.4}\t{:.4}\t{:.4}\t{}\n",
        at_attacked.rank1, at_attacked.rank5, at_attacked.rank10, at_attacked.num_queries
    ));
    write_file(&layout.root.join("ablation.txt"), text.as_bytes())?;
    print!("{text}");
    if !table.pattern().holds() {
        return Err(Error::Check("ablation table does not show the expected ordering".into()));
    }
    Ok(())
}

fn gradcheck(seed: u64) -> xag_core::Result<()> {
    let mut failed = Vec::new();
    for c in gradient_suite(seed)? {
        let ok = c.check.passes(DEFAULT_TOLERANCE);
        println!(
            "{}\t{}\tmax_rel={:.3e}\tmax_abs={:.3e}\tentries={}",
            if ok { "pass" } else { "FAIL" },
            c.name,
            c.check.max_relative_error,
            c.check.max_abs_error,
            c.check.entries
        );
        if !ok {
            failed.push(c.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Check(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn run(cli: Cli) -> xag_core::Result<()> {
    match cli.command {
        Command::GenData { config } => {
            let (cfg, layout) = load_config(&config)?;
            gen_data(&cfg, &layout)
        }
        Command::Train { config, stage, from } => {
            let (cfg, layout) = load_config(&config)?;
            train(&cfg, &layout, stage.into(), from.as_deref())
        }
        Command::Eval {
            config,
            checkpoint,
            variant,
        } => {
            let (cfg, layout) = load_config(&config)?;
            eval(&cfg, &layout, &checkpoint, variant.into())
        }
        Command::Ablate { config } => {
            let (cfg, layout) = load_config(&config)?;
            ablate(&cfg, &layout)
        }
        Command::Gradcheck { seed } => gradcheck(seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
