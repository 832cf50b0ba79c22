use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mamp::data::{generate_synthetic_corpus, load_corpus, SyntheticCorpus, SyntheticCorpusConfig};
use mamp::harness::{
    finetune, linear_probe, load_yaml, pretrain, run_ablation_suite, AblationAxis, AblationConfig, EvalConfig,
    FinetuneConfig, LinearProbeConfig, PretrainConfig, RunRecord,
};
use mamp::report::{render_report, PlotKind, ReportSpec};
use mamp::{Checkpoint, Corpus, Error, Result};

#[derive(Parser)]
#[command(name = "mamp", version, about = "Masked motion prediction pre-training for skeleton sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train an encoder and write checkpoint and metrics.
    Pretrain(PretrainArgs),
    /// Linear probe on frozen encoder features.
    Probe(ProbeArgs),
    /// Fine-tune the encoder with an MLP head.
    Finetune(FinetuneArgs),
    /// Pre-train and probe every setting of one ablation axis.
    Ablate(AblateArgs),
    /// Write a synthetic labeled corpus.
    GenData(GenDataArgs),
    /// Render a table and SVG plot from metrics or ablation CSVs.
    Report(ReportArgs),
}

#[derive(Args)]
struct PretrainArgs {
    /// YAML run configuration; omitted fields take desk-scale defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Corpus directory or manifest; overrides the config's `corpus`.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// YAML evaluation config with `mode: linear`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    label_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for the metrics CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// YAML evaluation config with `mode: finetune`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    label_fraction: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// streams | masking | segment-length | decoder-depth | decoder-width | mask-ratio | schedule-length
    #[arg(long)]
    axis: String,
    /// YAML with `pretrain`, `probe`, `seeds` and grid sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Comma-separated seeds; overrides the config.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Output CSV; defaults to `ablation_<axis>.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    /// YAML generator config; omitted fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    joints: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// loss-curve | ratio-sweep | schedule-sweep | table
    #[arg(long)]
    kind: String,
    #[arg(long = "in", required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    /// SVG path; the table is written beside it as `.txt`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    x_label: Option<String>,
    #[arg(long)]
    y_label: Option<String>,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// The corpus at `path`, or the default synthetic corpus in memory.
fn corpus_or_default(path: Option<&Path>) -> Result<Corpus> {
    match path {
        Some(p) => load_corpus(p),
        None => {
            eprintln!("no corpus given; using the default synthetic corpus");
            let syn = SyntheticCorpus::generate(&SyntheticCorpusConfig::default())?;
            let test_subjects = syn.config.test_subjects.clone();
            let (test, train) = syn
                .sequences
                .into_iter()
                .partition(|s| s.subject.is_some_and(|s| test_subjects.contains(&s)));
            Ok(Corpus { train, test })
        }
    }
}

fn write_run_files(dir: &Path, record: &RunRecord, config_yaml: &str) -> Result<()> {
    record.write_csv(&dir.join("metrics.csv"))?;
    let run = serde_json::json!({
        "config_hash": record.config_hash,
        "provenance": record.provenance,
        "wall_clock_secs": record.wall_clock_secs,
    });
    write_file(&dir.join("run.json"), &format!("{run:#}\n"))?;
    write_file(&dir.join("config.yaml"), config_yaml)
}

fn to_yaml<T: serde::Serialize>(value: &T) -> String {
    serde_yaml::to_string(value).expect("config serializes")
}

fn run_pretrain(args: PretrainArgs) -> Result<()> {
    let mut cfg: PretrainConfig = match &args.config {
        Some(p) => load_yaml(p)?,
        None => PretrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        cfg.epochs = epochs;
        cfg.warmup_epochs = cfg.warmup_epochs.min(epochs.saturating_sub(1));
    }
    if let Some(c) = args.corpus {
        cfg.corpus = Some(c);
    }
    cfg.validate()?;
    let corpus = corpus_or_default(cfg.corpus.as_deref())?;
    create_dir(&args.out)?;
    let outcome = pretrain(&cfg, &corpus, Some(&args.out))?;
    outcome.checkpoint.save(&args.out.join("checkpoint.ckpt"))?;
    write_run_files(&args.out, &outcome.record, &to_yaml(&cfg))?;
    println!(
        "pretrained {} steps; final loss {:.6}; wrote {}",
        outcome.checkpoint.step,
        outcome.record.last("train", "loss").unwrap_or(f64::NAN),
        args.out.display()
    );
    Ok(())
}

fn run_probe(args: ProbeArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => match load_yaml::<EvalConfig>(p)? {
            EvalConfig::Linear(c) => c,
            EvalConfig::Finetune(_) => {
                return Err(Error::Config(format!("{}: probe needs `mode: linear`", p.display())))
            }
        },
        None => LinearProbeConfig::default(),
    };
    if let Some(f) = args.label_fraction {
        cfg.label_fraction = f;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let ck = Checkpoint::load(&args.ckpt)?;
    let corpus = load_corpus(&args.corpus)?;
    let out = linear_probe(&ck, &corpus, &cfg)?;
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        write_run_files(dir, &out.record, &to_yaml(&EvalConfig::Linear(cfg)))?;
    }
    println!("test_accuracy {:.6}", out.test_accuracy);
    Ok(())
}

fn run_finetune(args: FinetuneArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => match load_yaml::<EvalConfig>(p)? {
            EvalConfig::Finetune(c) => c,
            EvalConfig::Linear(_) => {
                return Err(Error::Config(format!("{}: finetune needs `mode: finetune`", p.display())))
            }
        },
        None => FinetuneConfig::default(),
    };
    if let Some(f) = args.label_fraction {
        cfg.label_fraction = f;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
        cfg.warmup_epochs = cfg.warmup_epochs.min(e.saturating_sub(1));
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let ck = Checkpoint::load(&args.ckpt)?;
    let corpus = load_corpus(&args.corpus)?;
    let out = finetune(&ck, &corpus, &cfg)?;
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        write_run_files(dir, &out.record, &to_yaml(&EvalConfig::Finetune(cfg)))?;
        Checkpoint {
            params: out.params,
            optimizer: None,
            ..ck
        }
        .save(&dir.join("finetuned.ckpt"))?;
    }
    println!("test_accuracy {:.6}", out.test_accuracy);
    Ok(())
}

fn run_ablate(args: AblateArgs) -> Result<()> {
    let axis: AblationAxis = args.axis.parse()?;
    let mut cfg: AblationConfig = match &args.config {
        Some(p) => load_yaml(p)?,
        None => AblationConfig::default(),
    };
    if let Some(seeds) = args.seeds {
        cfg.seeds = seeds;
    }
    if let Some(e) = args.epochs {
        cfg.pretrain.epochs = e;
        cfg.pretrain.warmup_epochs = cfg.pretrain.warmup_epochs.min(e.saturating_sub(1));
    }
    let corpus = corpus_or_default(args.corpus.as_deref().or(cfg.pretrain.corpus.as_deref()))?;
    let table = run_ablation_suite(&cfg, axis, &corpus, |setting, seed, acc| {
        eprintln!("{axis} {setting} seed {seed}: probe accuracy {acc:.4}");
    })?;
    let out = args.out.unwrap_or_else(|| PathBuf::from(format!("ablation_{axis}.csv")));
    let csv = table.to_csv();
    write_file(&out, &csv)?;
    print!("{csv}");
    Ok(())
}

fn run_gen_data(args: GenDataArgs) -> Result<()> {
    let mut cfg: SyntheticCorpusConfig = match &args.config {
        Some(p) => load_yaml(p)?,
        None => SyntheticCorpusConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(c) = args.classes {
        cfg.num_classes = c;
    }
    if let Some(n) = args.per_class {
        cfg.sequences_per_class = n;
    }
    if let Some(v) = args.joints {
        cfg.num_joints = v;
    }
    let corpus = generate_synthetic_corpus(&cfg, &args.out)?;
    println!("wrote {} sequences to {}", corpus.sequences.len(), args.out.display());
    Ok(())
}

fn run_report(args: ReportArgs) -> Result<()> {
    let spec = ReportSpec {
        kind: args.kind.parse::<PlotKind>()?,
        inputs: args.inputs,
        output: args.out,
        x_label: args.x_label,
        y_label: args.y_label,
    };
    let report = render_report(&spec)?;
    print!("{}", report.table);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain(a) => run_pretrain(a),
        Command::Probe(a) => run_probe(a),
        Command::Finetune(a) => run_finetune(a),
        Command::Ablate(a) => run_ablate(a),
        Command::GenData(a) => run_gen_data(a),
        Command::Report(a) => run_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
