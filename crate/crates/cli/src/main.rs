use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use imclust::dataio::{read_dataset, synth_paired_blobs, write_dataset, IncompleteDataset};
use imclust::evalkit::{masked, median, run_sweep, Method, SweepRow};
use imclust::trainer::{infer, train, TrainConfig, TrainedModel, Variant};
use imclust::Error;

#[derive(Parser)]
#[command(name = "imclust", version, about = "Clustering of paired image/text features with missing modalities")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired-blob dataset.
    Synth(SynthArgs),
    /// Remove modalities from a fully present dataset.
    Mask(MaskArgs),
    /// Train, cluster and write a checkpoint plus results.json.
    Train(TrainArgs),
    /// Run every method over a grid of missing rates and seeds.
    Sweep(SweepArgs),
    /// Write fused representations and labels of a trained run.
    ExportEmbeddings(ExportArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 600)]
    n: usize,
    #[arg(long, default_value_t = 20)]
    dimg: usize,
    #[arg(long, default_value_t = 10)]
    dtxt: usize,
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct MaskArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    p: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

/// Hyper-parameters shared by `train` and `sweep`. Flags override values
/// from `--config`, which override the defaults.
#[derive(Args, Clone, Default)]
struct HyperArgs {
    /// JSON file with any subset of the training configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long = "eta-img")]
    eta_img: Option<f64>,
    #[arg(long = "eta-txt")]
    eta_txt: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    dsub: Option<usize>,
    #[arg(long)]
    restarts: Option<usize>,
    /// full, no_gan or no_kl.
    #[arg(long)]
    variant: Option<Variant>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Mask a fully present dataset at this missing rate first.
    #[arg(long)]
    p: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    hyper: HyperArgs,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated missing rates.
    #[arg(long, default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
    plist: String,
    /// Comma-separated seeds or a range `a..b`.
    #[arg(long, default_value = "0,1,2")]
    seeds: String,
    #[command(flatten)]
    hyper: HyperArgs,
    /// Discard an existing sweep.csv instead of resuming it.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output directory of a `train` run.
    #[arg(long)]
    out: PathBuf,
    /// Missing rate to mask with; defaults to the one recorded by `train`.
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    force: bool,
}

enum Failure {
    Validation(String),
    NonFinite(String),
    Io(String),
    Collapse(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 2,
            Failure::NonFinite(_) => 3,
            Failure::Io(_) => 4,
            Failure::Collapse(_) => 5,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Validation(m) | Failure::NonFinite(m) | Failure::Io(m) | Failure::Collapse(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::NonFinite { .. } => Failure::NonFinite(msg),
            Error::Collapse { .. } | Error::DegenerateCluster { .. } => Failure::Collapse(msg),
            Error::Io(_) | Error::Csv(_) => Failure::Io(msg),
            Error::InvalidArgument(_) | Error::Format { .. } | Error::Initialization(_) | Error::Json(_) => {
                Failure::Validation(msg)
            }
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Validation(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Validation(msg.into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Mask(a) => cmd_mask(a),
        Command::Train(a) => cmd_train(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::ExportEmbeddings(a) => cmd_export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn is_nonempty_dir(p: &Path) -> bool {
    fs::read_dir(p).map(|mut d| d.next().is_some()).unwrap_or(false)
}

/// Write a dataset unless an identical one is already there.
fn write_dataset_guarded(ds: &IncompleteDataset, out: &Path, force: bool) -> CmdResult {
    if is_nonempty_dir(out) && !force {
        match read_dataset(out) {
            Ok(existing) if existing == *ds => {
                log::info!("{} already holds this dataset", out.display());
                return Ok(());
            }
            _ => return Err(invalid(format!("{} exists; pass --force to overwrite", out.display()))),
        }
    }
    write_dataset(ds, out)?;
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let ds = synth_paired_blobs(a.k, a.n, a.dimg, a.dtxt, a.sigma, a.seed)?;
    write_dataset_guarded(&ds, &a.out, a.force)?;
    print!("{}", fs::read_to_string(a.out.join("manifest.json"))?);
    Ok(())
}

fn check_rate(p: f64) -> CmdResult {
    if !(0.0..=0.9).contains(&p) {
        return Err(invalid(format!("missing rate {p} outside [0, 0.9]")));
    }
    Ok(())
}

fn load_masked(data: &Path, p: Option<f64>, seed: u64) -> Result<IncompleteDataset, Failure> {
    let ds = read_dataset(data)?;
    match p {
        None => Ok(ds),
        Some(p) => {
            check_rate(p)?;
            if !ds.mask.is_fully_present() {
                return Err(invalid("--p needs a fully present dataset; this one is already masked"));
            }
            Ok(masked(&ds, p, seed)?)
        }
    }
}

fn cmd_mask(a: MaskArgs) -> CmdResult {
    let ds = load_masked(&a.data, Some(a.p), a.seed)?;
    write_dataset_guarded(&ds, &a.out, a.force)?;
    println!(
        "{} complete, {} image-only, {} text-only",
        ds.mask.complete_count(),
        ds.mask.img_only_count(),
        ds.mask.txt_only_count()
    );
    Ok(())
}

fn build_config(h: &HyperArgs, ds_k: Option<usize>, seed: u64) -> Result<TrainConfig, Failure> {
    let mut v = serde_json::to_value(TrainConfig::default())?;
    if let Some(k) = ds_k {
        v["K"] = json!(k);
    }
    if let Some(path) = &h.config {
        let text = fs::read_to_string(path)?;
        let file: Value = serde_json::from_str(&text)
            .map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        let obj = file
            .as_object()
            .ok_or_else(|| invalid(format!("{}: expected a JSON object", path.display())))?;
        for (key, val) in obj {
            v[key] = val.clone();
        }
    }
    let overrides = [
        ("K", h.k.map(|x| json!(x))),
        ("beta", h.beta.map(|x| json!(x))),
        ("alpha", h.alpha.map(|x| json!(x))),
        ("eta_img", h.eta_img.map(|x| json!(x))),
        ("eta_txt", h.eta_txt.map(|x| json!(x))),
        ("mu", h.mu.map(|x| json!(x))),
        ("lr", h.lr.map(|x| json!(x))),
        ("max_iters", h.iters.map(|x| json!(x))),
        ("batch_size", h.batch.map(|x| json!(x))),
        ("d_sub", h.dsub.map(|x| json!(x))),
        ("restarts", h.restarts.map(|x| json!(x))),
        ("variant", h.variant.map(|x| json!(x))),
        ("seed", Some(json!(seed))),
    ];
    for (key, val) in overrides {
        if let Some(val) = val {
            v[key] = val;
        }
    }
    let cfg: TrainConfig = serde_json::from_value(v).map_err(|e| invalid(format!("configuration: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let ds = load_masked(&a.data, a.p, a.seed)?;
    let cfg = build_config(&a.hyper, ds.cluster_count(), a.seed)?;
    let invocation = json!({
        "data": a.data,
        "p": a.p,
        "seed": a.seed,
        "config": cfg,
    });
    let results_path = a.out.join("results.json");
    if is_nonempty_dir(&a.out) && !a.force {
        let previous = fs::read_to_string(&results_path)
            .ok()
            .and_then(|t| serde_json::from_str::<Value>(&t).ok());
        if previous.as_ref().and_then(|r| r.get("invocation")) == Some(&invocation) {
            log::info!("{} already holds this run", a.out.display());
            return Ok(());
        }
        return Err(invalid(format!("{} exists; pass --force to overwrite", a.out.display())));
    }

    let start = Instant::now();
    let model = train(&ds, &cfg)?;
    let res = infer(&model, &ds)?;
    let runtime = start.elapsed().as_secs_f64();
    fs::create_dir_all(&a.out)?;
    model.save(a.out.join("checkpoint"))?;
    fs::copy(a.out.join("checkpoint/history.csv"), a.out.join("history.csv"))?;
    let results = json!({
        "method": Method::ClusterGan.name(),
        "variant": cfg.variant,
        "missing_rate": ds.mask.missing_rate(),
        "seed": a.seed,
        "acc": res.metrics.map(|m| m.acc),
        "nmi": res.metrics.map(|m| m.nmi),
        "runtime_s": runtime,
        "n": ds.n(),
        "labels": res.labels,
        "invocation": invocation,
    });
    fs::write(&results_path, serde_json::to_string_pretty(&results)? + "\n")?;
    match res.metrics {
        Some(m) => println!("acc {:.4}  nmi {:.4}  ({runtime:.1}s)", m.acc, m.nmi),
        None => println!("clustered {} instances ({runtime:.1}s)", ds.n()),
    }
    Ok(())
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, Failure> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| invalid(format!("bad {what} {t:?}"))))
        .collect()
}

fn parse_seeds(s: &str) -> Result<Vec<u64>, Failure> {
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| invalid(format!("bad seed range {s:?}")))?;
        let b: u64 = b.trim().parse().map_err(|_| invalid(format!("bad seed range {s:?}")))?;
        return Ok((a..b).collect());
    }
    parse_list(s, "seed")
}

fn cmd_sweep(a: SweepArgs) -> CmdResult {
    let plist: Vec<f64> = parse_list(&a.plist, "missing rate")?;
    let seeds = parse_seeds(&a.seeds)?;
    if plist.is_empty() || seeds.is_empty() {
        return Err(invalid("the grid is empty"));
    }
    for &p in &plist {
        check_rate(p)?;
    }
    let ds = read_dataset(&a.data)?;
    let cfg = build_config(&a.hyper, ds.cluster_count(), 0)?;
    fs::create_dir_all(&a.out)?;
    let csv_path = a.out.join("sweep.csv");
    if a.force && csv_path.exists() {
        fs::remove_file(&csv_path)?;
    }
    let rows = run_sweep(&ds, &cfg, &plist, &seeds, &Method::ALL, &csv_path)?;
    print_summary(&rows, &plist);
    let failed = rows.iter().filter(|r| !r.is_ok()).count();
    if failed > 0 {
        log::warn!("{failed} runs failed; see the status column of {}", csv_path.display());
    }
    Ok(())
}

fn print_summary(rows: &[SweepRow], plist: &[f64]) {
    println!("median ACC");
    print!("{:>6}", "p");
    for m in Method::ALL {
        print!(" {:>12}", m.name());
    }
    println!();
    for &p in plist {
        print!("{p:>6.2}");
        for m in Method::ALL {
            let accs: Vec<f64> = rows
                .iter()
                .filter(|r| (r.missing_rate - p).abs() < 1e-9 && r.method == m.name())
                .filter_map(|r| r.acc)
                .collect();
            match median(&accs) {
                Some(v) => print!(" {v:>12.4}"),
                None => print!(" {:>12}", "-"),
            }
        }
        println!();
    }
}

fn write_guarded(path: &Path, bytes: &[u8], force: bool) -> CmdResult {
    if path.exists() && !force && fs::read(path)? != bytes {
        return Err(invalid(format!("{} exists with other contents; pass --force", path.display())));
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn cmd_export(a: ExportArgs) -> CmdResult {
    let model = TrainedModel::load(a.out.join("checkpoint"))?;
    let recorded = fs::read_to_string(a.out.join("results.json"))
        .ok()
        .and_then(|t| serde_json::from_str::<Value>(&t).ok())
        .and_then(|r| r.get("invocation").cloned());
    let p = a.p.or_else(|| recorded.as_ref().and_then(|r| r["p"].as_f64()));
    let seed = a
        .seed
        .or_else(|| recorded.as_ref().and_then(|r| r["seed"].as_u64()))
        .unwrap_or(0);
    let ds = load_masked(&a.data, p, seed)?;
    let res = infer(&model, &ds)?;
    let emb: Vec<u8> = res.z_fus.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    let pred: Vec<u8> = res.labels.iter().flat_map(|&l| (l as i64).to_le_bytes()).collect();
    write_guarded(&a.out.join("embeddings.f32"), &emb, a.force)?;
    write_guarded(&a.out.join("labels.i64"), &pred, a.force)?;
    if let Some(truth) = &ds.labels {
        let t: Vec<u8> = truth.iter().flat_map(|&l| (l as i64).to_le_bytes()).collect();
        write_guarded(&a.out.join("true_labels.i64"), &t, a.force)?;
    }
    let header = json!({
        "n": ds.n(),
        "d_sub": res.z_fus.ncols(),
        "embeddings": "embeddings.f32",
        "labels": "labels.i64",
        "true_labels": ds.labels.as_ref().map(|_| "true_labels.i64"),
    });
    write_guarded(
        &a.out.join("embeddings.json"),
        (serde_json::to_string_pretty(&header)? + "\n").as_bytes(),
        a.force,
    )?;
    println!("wrote {} x {} embeddings to {}", ds.n(), res.z_fus.ncols(), a.out.display());
    Ok(())
}
