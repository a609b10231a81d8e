use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fogseg::config::RunConfig;
use fogseg::evalkit::{emit_report, parse_seeds, run_ablation_on, AblationSpec, Preset, Workbench};
use fogseg::harness::{error_line, output_root, names, EncoderFrom, EvalSplit, Harness};
use fogseg::{Error, Result};

#[derive(Parser)]
#[command(name = "fogseg", version, about = "Defogging pre-training and foggy-scene segmentation")]
struct Cli {
    /// Training seed; overrides the config file and `--set`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// `section.key=value` override; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Output root; defaults to $FOGSEG_OUT, then `runs`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Use the small smoke-test budgets as the base configuration.
    #[arg(long, global = true)]
    smoke: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the procedural dataset.
    GenData,
    /// Train the clean-image segmentation network.
    TrainClean,
    /// Pre-train the defogging network on synthetic pairs.
    PretrainBasic,
    /// Fog domain migration with real-fog pseudo pairs.
    Fdm,
    /// Fine-tune a segmentation network.
    Finetune {
        /// Encoder source: scratch, basic, or fdm.
        #[arg(long, default_value = "fdm")]
        from: String,
    },
    /// Evaluate a checkpoint.
    Eval {
        /// Checkpoint name under `<out>/ckpt`.
        #[arg(long, default_value = names::SEGNET)]
        model: String,
        /// fog_test, clean_test, synthetic_fog_test, or all.
        #[arg(long, default_value = "all")]
        split: String,
    },
    /// Run an ablation preset over several seeds.
    Ablate {
        #[arg(long)]
        preset: String,
        /// Comma-separated seeds.
        #[arg(long, default_value = "1,2,3")]
        seeds: String,
    },
    /// Write the report for the pipeline outputs.
    Report,
    /// Run every stage in order.
    Pipeline,
    /// Print the resolved configuration as TOML.
    ShowConfig,
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match (&cli.config, cli.smoke) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, true) => RunConfig::smoke(),
        (None, false) => RunConfig::default(),
    };
    cfg.apply_overrides(&cli.overrides)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn progress(stage: &str) {
    eprintln!("[fogseg] {stage}");
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    let root = output_root(cli.out.as_deref());
    let h = Harness::new(cfg.clone(), &root)?;
    let done = |p: PathBuf| println!("{}", p.display());
    match &cli.command {
        Command::GenData => done(h.gen_data()?),
        Command::TrainClean => done(h.train_clean()?),
        Command::PretrainBasic => done(h.pretrain_basic()?),
        Command::Fdm => done(h.fdm()?),
        Command::Finetune { from } => done(h.finetune(from.parse::<EncoderFrom>()?)?),
        Command::Eval { model, split } => {
            let splits = if split == "all" {
                EvalSplit::ALL.to_vec()
            } else {
                vec![split.parse::<EvalSplit>()?]
            };
            let path = h.eval(model, &splits)?;
            print!("{}", std::fs::read_to_string(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?);
        }
        Command::Ablate { preset, seeds } => {
            let spec = AblationSpec {
                preset: preset.parse::<Preset>()?,
                seeds: parse_seeds(seeds)?,
                overrides: Vec::new(),
            };
            let mut wb = Workbench::new(cfg.clone())?;
            wb.on_progress(progress);
            let report = run_ablation_on(&mut wb, &spec)?;
            let dir = root.join("ablations").join(spec.preset.name());
            emit_report(&report, &wb.data().real_fog_test, &cfg.arch, &cfg.to_json(), &dir)?;
            print!("{}", report.table.render());
        }
        Command::Report => {
            for p in h.report()? {
                done(p);
            }
        }
        Command::Pipeline => {
            let path = h.pipeline(progress)?;
            print!("{}", std::fs::read_to_string(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?);
        }
        Command::ShowConfig => print!("{}", cfg.to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
