use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use logonet_core::dataset::{
    all_train, load_manifest, make_split, synth_generate, DatasetManifest, ImageStore, Split,
    SplitMode, SynthConfig,
};
use logonet_core::eval::{ablate, ablation_csv, evaluate, kernel_sweep, sweep_csv, Experiment};
use logonet_core::model::{parse_key_values, LogoNetConfig, LogoNetModel};
use logonet_core::persistence::{
    load_checkpoint, load_gallery, save_checkpoint, save_gallery, write_atomic, FORMAT_VERSION,
};
use logonet_core::retrieval::{build_gallery, query_image, round4};
use logonet_core::training::trainer::log_csv;
use logonet_core::training::{train, TrainConfig};
use logonet_service::{QueryHit, QueryResponse, ServiceState, Snapshot};

/// Instance-level logo retrieval from hand-drawn sketches.
#[derive(Parser, Debug)]
#[command(name = "logonet", version)]
struct Cli {
    /// Seed for every random choice (init, split, sampling, augmentation).
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,

    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic logo/sketch dataset.
    Synth(SynthArgs),
    /// Train a model and save a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint: acc@1/5/10 overall and per subset.
    Eval(EvalArgs),
    /// Train one model per first-layer kernel size and tabulate accuracy.
    SweepKernel(SweepArgs),
    /// Train the eight attention / large-kernel ablation variants.
    Ablate(ExperimentArgs),
    /// Embed every logo and save the gallery.
    Index(IndexArgs),
    /// Rank the gallery for one query image.
    Query(QueryArgs),
    /// Run the HTTP query service.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Number of logo instances.
    #[arg(long, default_value_t = 20)]
    instances: usize,
    /// Sketches per instance (tiers cycle easy, medium, hard).
    #[arg(long, default_value_t = 4)]
    per: usize,
    /// Image side in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Dataset root to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Dataset root containing manifest.csv.
    #[arg(long)]
    data: PathBuf,
    /// How to assign train/test: manifest (use the split column),
    /// by_sketch, by_instance, or all_train.
    #[arg(long, default_value = "auto")]
    split: String,
    /// Test share for by_sketch / by_instance.
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
}

#[derive(Args, Debug, Clone)]
struct ModelTrainArgs {
    /// key=value file with model and training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// First-layer kernel size (1..=9).
    #[arg(long)]
    first_kernel: Option<usize>,
    /// Test-split acc@1 every N epochs (0 = never).
    #[arg(long)]
    validate_every: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    opts: ModelTrainArgs,
    /// Output directory for checkpoint.lgn, train_log.csv and run.json.
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Which split's sketches to query with.
    #[arg(long, default_value = "test")]
    on: String,
    #[arg(long, default_value = "runs/eval")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    opts: ModelTrainArgs,
    #[arg(long, default_value = "runs/experiment")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    /// Comma-separated kernel sizes.
    #[arg(long, value_delimiter = ',', default_value = "3,4,5,6,7,8,9")]
    kernels: Vec<usize>,
}

#[derive(Args, Debug)]
struct IndexArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root whose logos form the gallery.
    #[arg(long)]
    data: PathBuf,
    /// Gallery file to write.
    #[arg(long, default_value = "runs/gallery.lgg")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct QueryArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    gallery: PathBuf,
    /// PNG or JPEG query image.
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Print the service's JSON response shape instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    gallery: PathBuf,
    /// Dataset root serving the thumbnails.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 8080)]
    port: u16,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Synth(a) => synth(a, seed),
        Command::Train(a) => train_cmd(a, seed),
        Command::Eval(a) => eval_cmd(a, seed),
        Command::SweepKernel(a) => sweep_cmd(a, seed),
        Command::Ablate(a) => ablate_cmd(a, seed),
        Command::Index(a) => index_cmd(a),
        Command::Query(a) => query_cmd(a),
        Command::Serve(a) => serve_cmd(a),
    }
}

fn synth(a: SynthArgs, seed: u64) -> Result<()> {
    let cfg = SynthConfig {
        instances: a.instances,
        sketches_per_instance: a.per,
        size: a.size,
        seed,
    };
    let m = synth_generate(&cfg, &a.out)?;
    let c = m.counts();
    println!(
        "wrote {} logos, {} sketches (easy {}, medium {}, hard {}) to {}",
        m.logos().len(),
        c.total(),
        c.easy,
        c.medium,
        c.hard,
        a.out.display()
    );
    Ok(())
}

/// Loads the manifest and assigns splits as requested.
fn prepare_data(d: &DataArgs, seed: u64) -> Result<DatasetManifest> {
    let m =
        load_manifest(&d.data).with_context(|| format!("loading dataset {}", d.data.display()))?;
    let has_splits = !m.sketches().is_empty() && m.sketches().iter().all(|s| s.split.is_some());
    let m = match d.split.as_str() {
        "manifest" => {
            if !has_splits {
                bail!("--split manifest, but some sketches have no split");
            }
            m
        }
        "auto" if has_splits => m,
        "auto" => make_split(&m, SplitMode::BySketch, d.test_fraction, seed)?,
        "all_train" => all_train(&m),
        mode => make_split(&m, mode.parse::<SplitMode>()?, d.test_fraction, seed)?,
    };
    Ok(m)
}

fn configs(o: &ModelTrainArgs, seed: u64) -> Result<(LogoNetConfig, TrainConfig)> {
    let pairs = match &o.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            parse_key_values(&text)?
        }
        None => Vec::new(),
    };
    let (mut model, rest) = LogoNetConfig::from_pairs(&pairs)?;
    let mut tc = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let rest = tc.apply_pairs(&rest)?;
    if let Some((k, _)) = rest.first() {
        bail!("unknown config key {k:?}");
    }
    if let Some(v) = o.epochs {
        tc.epochs = v;
    }
    if let Some(v) = o.learning_rate {
        tc.learning_rate = v;
    }
    if let Some(v) = o.margin {
        tc.margin = v;
    }
    if let Some(v) = o.batch_size {
        tc.batch_size = v;
    }
    if let Some(v) = o.validate_every {
        tc.validate_every = v;
    }
    if let Some(v) = o.first_kernel {
        model.first_kernel = v;
    }
    model.validate()?;
    tc.validate()?;
    Ok((model, tc))
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Records what produced the artifacts in `dir`.
fn write_run_manifest(
    dir: &Path,
    command: &str,
    seed: u64,
    extra: serde_json::Value,
) -> Result<()> {
    let doc = json!({
        "command": command,
        "argv": std::env::args().collect::<Vec<_>>(),
        "seed": seed,
        "version": env!("CARGO_PKG_VERSION"),
        "checkpoint_format": format!("LGN1 v{FORMAT_VERSION}"),
        "gallery_format": format!("LGG1 v{FORMAT_VERSION}"),
        "details": extra,
    });
    write_atomic(
        &dir.join("run.json"),
        serde_json::to_string_pretty(&doc)?.as_bytes(),
    )?;
    Ok(())
}

fn train_cmd(a: TrainArgs, seed: u64) -> Result<()> {
    let (mc, tc) = configs(&a.opts, seed)?;
    let manifest = prepare_data(&a.data, seed)?;
    let store = ImageStore::load(&manifest, mc.input_channels, mc.input_size)?;
    create_out(&a.out)?;
    let model = LogoNetModel::init(mc.clone(), seed)?;
    log::info!(
        "training {} parameters for {} epochs",
        model.param_count(),
        tc.epochs
    );
    let (model, logs) = train(model, &manifest, &store, &tc)?;
    let ckpt = a.out.join("checkpoint.lgn");
    save_checkpoint(&model, &ckpt)?;
    write_atomic(&a.out.join("train_log.csv"), log_csv(&logs).as_bytes())?;
    write_run_manifest(
        &a.out,
        "train",
        seed,
        json!({
            "model_config": mc.to_canonical_text(),
            "train_config": format!("{tc:?}"),
            "split": a.data.split,
            "test_fraction": a.data.test_fraction,
            "fingerprint": model.fingerprint(),
        }),
    )?;
    println!(
        "checkpoint {} (model {})",
        ckpt.display(),
        model.fingerprint()
    );
    Ok(())
}

fn eval_cmd(a: EvalArgs, seed: u64) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let manifest = prepare_data(&a.data, seed)?;
    let split = match a.on.as_str() {
        "test" => Split::Test,
        "train" => Split::Train,
        other => bail!("--on must be train or test, got {other:?}"),
    };
    let cfg = model.config();
    let store = ImageStore::load(&manifest, cfg.input_channels, cfg.input_size)?;
    let report = evaluate(&model, &manifest, &store, split)?;
    create_out(&a.out)?;
    write_atomic(&a.out.join("eval.csv"), report.to_csv().as_bytes())?;
    write_run_manifest(
        &a.out,
        "eval",
        seed,
        json!({ "checkpoint": a.checkpoint, "on": a.on }),
    )?;
    print!("{report}");
    Ok(())
}

fn experiment_inputs(
    e: &ExperimentArgs,
    seed: u64,
) -> Result<(LogoNetConfig, TrainConfig, DatasetManifest, ImageStore)> {
    let (mc, tc) = configs(&e.opts, seed)?;
    let manifest = prepare_data(&e.data, seed)?;
    let store = ImageStore::load(&manifest, mc.input_channels, mc.input_size)?;
    create_out(&e.out)?;
    Ok((mc, tc, manifest, store))
}

fn sweep_cmd(a: SweepArgs, seed: u64) -> Result<()> {
    let (mc, tc, manifest, store) = experiment_inputs(&a.exp, seed)?;
    let exp = Experiment {
        manifest: &manifest,
        store: &store,
        train: &tc,
        init_seed: seed,
    };
    let rows = kernel_sweep(&mc, &a.kernels, &exp)?;
    let csv = sweep_csv(&rows);
    write_atomic(&a.exp.out.join("sweep.csv"), csv.as_bytes())?;
    write_run_manifest(
        &a.exp.out,
        "sweep-kernel",
        seed,
        json!({ "kernels": a.kernels, "model_config": mc.to_canonical_text() }),
    )?;
    print!("{csv}");
    Ok(())
}

fn ablate_cmd(a: ExperimentArgs, seed: u64) -> Result<()> {
    let (mc, tc, manifest, store) = experiment_inputs(&a, seed)?;
    let exp = Experiment {
        manifest: &manifest,
        store: &store,
        train: &tc,
        init_seed: seed,
    };
    let rows = ablate(&mc, &exp)?;
    let csv = ablation_csv(&rows);
    write_atomic(&a.out.join("ablation.csv"), csv.as_bytes())?;
    write_run_manifest(
        &a.out,
        "ablate",
        seed,
        json!({ "model_config": mc.to_canonical_text() }),
    )?;
    print!("{csv}");
    Ok(())
}

fn index_cmd(a: IndexArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let manifest = load_manifest(&a.data)?;
    let gallery = build_gallery(&model, manifest.logos(), manifest.root())?;
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_out(dir)?;
    }
    save_gallery(&gallery, &a.out)?;
    println!(
        "gallery of {} logos written to {}",
        gallery.len(),
        a.out.display()
    );
    Ok(())
}

fn query_cmd(a: QueryArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let gallery = load_gallery(&a.gallery)?;
    if let Some(w) = gallery.fingerprint_mismatch(&model) {
        log::warn!("{w}");
    }
    let bytes = fs::read(&a.image).with_context(|| format!("reading {}", a.image.display()))?;
    let hits = query_image(&model, &gallery, &bytes, a.k)?;
    if a.json {
        let resp = QueryResponse {
            results: hits
                .into_iter()
                .map(|(id, d)| QueryHit {
                    thumbnail_url: format!("/thumbnail/{id}"),
                    instance_id: id,
                    distance: round4(d),
                })
                .collect(),
        };
        println!("{}", serde_json::to_string(&resp)?);
    } else {
        for (i, (id, d)) in hits.iter().enumerate() {
            println!("{:>4}  {id}  {:.4}", i + 1, round4(*d));
        }
    }
    Ok(())
}

fn serve_cmd(a: ServeArgs) -> Result<()> {
    let snapshot = Snapshot::load(&a.checkpoint, &a.gallery, &a.data)?;
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .with_context(|| format!("bad address {}:{}", a.host, a.port))?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = logonet_service::bind(addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        println!("serving on http://{}", listener.local_addr()?);
        logonet_service::serve(listener, ServiceState::new(Some(snapshot))).await?;
        Ok(())
    })
}
