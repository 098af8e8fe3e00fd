use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cgd::checkpoint::ParamStore;
use cgd::config::ExperimentConfig;
use cgd::dataio::{generate_synthetic, Manifest, Split, SyntheticSpec};
use cgd::experiment::{all_configurations, cmd_ablation, cmd_sweep, run_experiment, trend_checks, Dataset, RunCache};
use cgd::model::{CgdModel, CLASSIFIER_WEIGHT};
use cgd::retrieval::{evaluate, EmbeddingSet};
use cgd::trainer::embed_images;
use cgd::{CgdError, DescriptorConfig, Result};

#[derive(Parser)]
#[command(name = "cgd", version, about = "Multi-descriptor image retrieval: data, training, embedding, evaluation")]
struct Cli {
    /// Log progress (per-epoch metrics, per-run results) to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic image corpus and its manifest.
    GenData(GenDataArgs),
    /// Train one model and keep the best checkpoint.
    Train(TrainArgs),
    /// Write EMB1 embeddings for a manifest with a trained checkpoint.
    Embed(EmbedArgs),
    /// Recall@K between two embedding files, printed as JSON.
    Eval(EvalArgs),
    /// Train and evaluate several descriptor configurations over seeds.
    Sweep(SweepArgs),
    /// Run the loss, trick, architecture and combination ablations.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    per_class: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0.2)]
    jitter: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file, or a descriptor string such as `SM` applied to the defaults.
    #[arg(long)]
    config: Option<String>,
    /// Manifest CSV (overrides `data.manifest`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Override any config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EmbedArgs {
    /// Config snapshot written by `train`.
    #[arg(long)]
    config: String,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// `train`, `test`, or `all`.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    query: PathBuf,
    #[arg(long)]
    gallery: PathBuf,
    #[arg(long, default_value = "1,2,4,8", value_delimiter = ',')]
    k: Vec<usize>,
    /// Query and gallery are the same set; skip each query's own row.
    #[arg(long)]
    exclude_self: bool,
    /// Also write the JSON report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated descriptor strings, or `all` for the twelve.
    #[arg(long, default_value = "all")]
    configs: String,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

fn resolve_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        None => ExperimentConfig::default(),
        Some(c) if Path::new(c).is_file() => ExperimentConfig::load(Path::new(c))?,
        Some(c) => {
            DescriptorConfig::parse(c, cgd::config::DEFAULT_TOTAL_DIM, cgd::descriptor::DEFAULT_GEM_P).map_err(|_| {
                CgdError::Config(format!("`{c}` is neither a readable config file nor a descriptor string"))
            })?;
            ExperimentConfig {
                descriptor: c.clone(),
                ..ExperimentConfig::default()
            }
        }
    };
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CgdError::Config(format!("--set expects KEY=VALUE, got `{o}`")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(d) = &args.data {
        cfg.manifest = Some(d.clone());
    }
    Ok(cfg)
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let path = cfg
        .manifest
        .as_ref()
        .ok_or_else(|| CgdError::Config("no manifest: pass --data or set data.manifest".into()))?;
    Dataset::from_manifest(&Manifest::read(path)?)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CgdError::Format(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let spec = SyntheticSpec {
        num_classes: a.classes,
        instances_per_class: a.per_class,
        image_size: a.size,
        intra_class_jitter: a.jitter,
        seed: a.seed,
    };
    let corpus = generate_synthetic(&spec)?;
    corpus.write_to(&a.out)?;
    let manifest_path = a.out.join("manifest.csv");
    let cfg = ExperimentConfig {
        manifest: Some(manifest_path.clone()),
        ..ExperimentConfig::default()
    };
    let header = format!(
        "# gen-data --classes {} --per-class {} --size {} --jitter {} --seed {}\n",
        a.classes, a.per_class, a.size, a.jitter, a.seed
    );
    fs::write(a.out.join("config.ini"), header + &cfg.to_text())?;
    println!("wrote {} images and {}", corpus.images.len(), manifest_path.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = resolve_config(&a.cfg)?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.out_dir = Some(a.out.clone());
    cfg.validate()?;
    let data = load_dataset(&cfg)?;
    data.check_batch_classes(cfg.train.batch_p)?;
    fs::create_dir_all(&a.out)?;
    cfg.save(&a.out.join("config.ini"))?;
    let run = run_experiment(&cfg, &data, cfg.train.seed)?;
    run.outcome.write(&a.out)?;
    if let Some(msg) = &run.outcome.aborted {
        return Err(CgdError::Numeric(format!("training aborted: {msg}")));
    }
    println!(
        "best epoch {} (val Recall@1 {:.4}); test {}",
        run.outcome.best_epoch,
        run.outcome.best_recall_at_1,
        run.report
            .recall_at_k
            .iter()
            .map(|(k, r)| format!("R@{k}={r:.4}"))
            .collect::<Vec<_>>()
            .join(" ")
    );
    Ok(())
}

fn embed(a: EmbedArgs) -> Result<()> {
    let cfg = resolve_config(&ConfigArgs {
        config: Some(a.config.clone()),
        data: None,
        overrides: Vec::new(),
    })?;
    cfg.validate()?;
    let split = match a.split.as_str() {
        "all" => None,
        s => Some(s.parse::<Split>().map_err(|_| CgdError::Config(format!("unknown split `{s}`")))?),
    };
    let params = ParamStore::load(&a.checkpoint)?;
    let num_classes = params.require(CLASSIFIER_WEIGHT)?.shape()[0];
    let model = CgdModel::from_params(cfg.model_config(num_classes)?, params)?;
    let images = Manifest::read(&a.data)?.load_split(split)?;
    let set = embed_images(&model, &images)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    set.save(&a.out)?;
    let mut snapshot = cfg.clone();
    snapshot.manifest = Some(a.data.clone());
    snapshot.save(&a.out.with_extension("ini"))?;
    println!("wrote {} embeddings of dim {} to {}", set.count(), set.dim, a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    if a.k.is_empty() || a.k.contains(&0) {
        return Err(CgdError::Config(format!("--k must be positive integers, got {:?}", a.k)));
    }
    let q = EmbeddingSet::load(&a.query)?;
    let g = EmbeddingSet::load(&a.gallery)?;
    if a.exclude_self && q.count() != g.count() {
        return Err(CgdError::Data("--exclude-self needs query and gallery to be the same set".into()));
    }
    let report = evaluate(&q, &g, &a.k, a.exclude_self)?;
    let text = serde_json::to_string_pretty(&report).map_err(|e| CgdError::Format(e.to_string()))?;
    if let Some(p) = &a.out {
        fs::write(p, format!("{text}\n"))?;
    }
    let _ = writeln!(std::io::stdout(), "{text}");
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let mut cfg = resolve_config(&a.cfg)?;
    if let Some(s) = a.seeds {
        cfg.seeds = s;
    }
    cfg.out_dir = Some(a.out.clone());
    cfg.validate()?;
    let configs: Vec<String> = if a.configs == "all" {
        all_configurations()
    } else {
        a.configs.split(',').map(|s| s.trim().to_string()).collect()
    };
    for c in &configs {
        DescriptorConfig::parse(c, cfg.total_dim, cfg.gem_p)?;
    }
    let data = load_dataset(&cfg)?;
    data.check_batch_classes(cfg.train.batch_p)?;
    fs::create_dir_all(&a.out)?;
    cfg.save(&a.out.join("config.ini"))?;
    let report = cmd_sweep(&cfg, &configs, &data, &mut RunCache::new())?;
    fs::write(a.out.join("sweep.tsv"), report.to_tsv())?;
    write_json(&a.out.join("sweep.json"), &report)?;
    print!("{}", report.to_tsv());
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let mut cfg = resolve_config(&a.cfg)?;
    if let Some(s) = a.seeds {
        cfg.seeds = s;
    }
    cfg.out_dir = Some(a.out.clone());
    cfg.validate()?;
    let data = load_dataset(&cfg)?;
    data.check_batch_classes(cfg.train.batch_p)?;
    fs::create_dir_all(&a.out)?;
    cfg.save(&a.out.join("config.ini"))?;
    let report = cmd_ablation(&cfg, &data, &mut RunCache::new())?;
    let trends = trend_checks(&report, None, 0.0);
    fs::write(a.out.join("ablation.tsv"), report.to_tsv())?;
    write_json(&a.out.join("ablation.json"), &report)?;
    let trend_text: String = trends.iter().map(|t| t.line() + "\n").collect();
    fs::write(a.out.join("trends.tsv"), &trend_text)?;
    print!("{}{}", report.to_tsv(), trend_text);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Embed(a) => embed(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
