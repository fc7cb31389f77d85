use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use denoise_core::data::{make_relaxation_pairs, make_synthetic_dataset, parse_xyz, stats_csv, write_xyz, Structure};
use denoise_core::graph::build_graph;
use denoise_core::graph::RadiusGraph;
use denoise_core::model::{GNSConfig, Model, Variant};
use denoise_core::oracle::{j1_j2_gradient_gap, MixtureModel, TinyNet};
use denoise_core::tat::{oversmoothing_profile, solve_tat_slope};
use denoise_core::train::{noise_mae, run, target_mae, Checkpoint, ConfigError, Mode, RunConfig, TrainError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Denoising pre-training and fine-tuning of graph networks on molecular
/// structures.
#[derive(Debug, Parser)]
#[command(name = "denoise-pretrain", version)]
struct Cli {
    /// Worker threads for data preparation and evaluation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pre-train on unlabelled structures with the denoising objective.
    Pretrain(TrainArgs),
    /// Fine-tune on labelled structures, from a checkpoint or from scratch.
    Finetune(FinetuneArgs),
    /// Score a checkpoint on a dataset.
    Evaluate(EvaluateArgs),
    /// Vertex cosine similarity through depth of a freshly initialized model.
    Diagnose(DiagnoseArgs),
    /// Gradient gap between score matching and denoising on a Gaussian mixture.
    OracleCheck(OracleArgs),
    /// Element counts and upstream coverage of a dataset.
    DatasetStats(StatsArgs),
    /// Write the synthetic dataset as extended XYZ.
    MakeSynthetic(SyntheticArgs),
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Extended-XYZ dataset.
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Use N generated synthetic structures instead of a file.
    #[arg(long, value_name = "N")]
    synthetic: Option<usize>,
    /// Seed for the generated dataset.
    #[arg(long, default_value_t = 1)]
    data_seed: u64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Config file of `key=value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for checkpoints and metrics.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Pre-trained checkpoint to start from.
    #[arg(long, required_unless_present = "scratch")]
    checkpoint: Option<PathBuf>,
    /// Update only the decoder.
    #[arg(long)]
    frozen: bool,
    /// Start from a random initialization.
    #[arg(long, conflicts_with = "checkpoint")]
    scratch: bool,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Debug, Args)]
struct DiagnoseArgs {
    /// gns or gns_tat.
    #[arg(long)]
    variant: Variant,
    /// Total message-passing steps.
    #[arg(long, default_value_t = 30)]
    depth: usize,
    /// Latent and hidden width.
    #[arg(long, default_value_t = 32)]
    width: usize,
    /// Initializations averaged per step.
    #[arg(long, default_value_t = 10)]
    inits: u64,
    /// Structures in the probe batch.
    #[arg(long, default_value_t = 8)]
    structures: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 3)]
    centers: usize,
    #[arg(long, default_value_t = 4)]
    atoms: usize,
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    /// Hidden width of the probe network.
    #[arg(long, default_value_t = 16)]
    hidden: usize,
    /// Standard deviation of the mixture centers.
    #[arg(long, default_value_t = 0.1)]
    spread: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct StatsArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Upstream dataset for element coverage.
    #[arg(long)]
    upstream: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SyntheticArgs {
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write unrelaxed starts with the relaxed frame as a paired column.
    #[arg(long)]
    pairs: bool,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Exit code 1 for bad input, 2 for failures while running.
enum Failure {
    Invalid(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Invalid(e.to_string())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Incompatible(_) | TrainError::GraphTooLarge { .. } => {
                Failure::Invalid(e.to_string())
            }
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn invalid(m: impl std::fmt::Display) -> Failure {
    Failure::Invalid(m.to_string())
}

fn runtime(m: impl std::fmt::Display) -> Failure {
    Failure::Runtime(m.to_string())
}

fn read_xyz(path: &Path) -> Result<Vec<Structure>> {
    let text = fs::read_to_string(path).map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
    parse_xyz(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn load_data(a: &DataArgs) -> Result<Vec<Structure>> {
    match (&a.data, a.synthetic) {
        (Some(p), _) => read_xyz(p),
        (None, Some(n)) if n > 0 => Ok(make_synthetic_dataset(n, a.data_seed)),
        (None, Some(_)) => Err(invalid("--synthetic needs at least one structure")),
        (None, None) => Err(invalid("give a dataset with --data FILE or --synthetic N")),
    }
}

fn build_config(base: Option<RunConfig>, path: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
    let mut c = match path {
        Some(p) => RunConfig::from_file(p)?,
        None => base.unwrap_or_default(),
    };
    for kv in sets {
        c.apply_override(kv)?;
    }
    c.validate()?;
    Ok(c)
}

fn ensure_dir(out: Option<&Path>) -> Result<()> {
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))?;
    }
    Ok(())
}

/// Prints `text` and, with `--out`, also writes it to `dir/name`.
fn emit(text: &str, out: Option<&Path>, name: &str) -> Result<()> {
    print!("{text}");
    if let Some(dir) = out {
        ensure_dir(Some(dir))?;
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(())
}

fn train(mode: Mode, a: &TrainArgs, config: RunConfig, init: Option<&Checkpoint>) -> Result<()> {
    let data = load_data(&a.data)?;
    ensure_dir(a.out.as_deref())?;
    let out = run(mode, &data, config, a.seed, init, a.out.as_deref())?;
    let s = &out.summary;
    println!("steps={} stopped_early={}", s.steps, s.stopped_early);
    if let Some(v) = s.best_val_mae {
        println!("best_val_mae={v}");
    }
    if let Some(t) = out.test_mae {
        println!("test_mae={t}");
    }
    Ok(())
}

fn pretrain(a: &TrainArgs) -> Result<()> {
    let config = build_config(None, a.config.as_deref(), &a.set)?;
    train(Mode::Pretrain, a, config, None)
}

fn finetune(a: &FinetuneArgs) -> Result<()> {
    let ck = match &a.checkpoint {
        Some(p) => Some(Checkpoint::load(p).map_err(|e| invalid(format!("{}: {e}", p.display())))?),
        None => None,
    };
    let base = ck.as_ref().map(|c| {
        let mut c = c.config.clone();
        c.apply_finetune_recipe();
        c
    });
    let base = base.or_else(|| {
        let mut c = RunConfig::default();
        c.apply_finetune_recipe();
        Some(c)
    });
    let config = build_config(base, a.train.config.as_deref(), &a.train.set)?;
    let mode = if a.frozen { Mode::FinetuneFrozenBackbone } else { Mode::Finetune };
    train(mode, &a.train, config, ck.as_ref())
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint).map_err(|e| invalid(format!("{}: {e}", a.checkpoint.display())))?;
    let data = load_data(&a.data)?;
    let model = Model::new(ck.model.clone()).map_err(runtime)?;
    let params = ck.eval_params();
    let (metric, value) = match ck.target_norm {
        Some(norm) => ("target_mae", target_mae(&model, params, &data, &ck.config, norm)?),
        None => ("noise_mae", noise_mae(&model, params, &data, &ck.config, a.seed)?),
    };
    emit(
        &format!("metric,value\n{metric},{value}\nstructures,{}\n", data.len()),
        a.out.as_deref(),
        "evaluate.csv",
    )
}

fn diagnose(a: &DiagnoseArgs) -> Result<()> {
    if a.depth == 0 || a.width == 0 || a.inits == 0 || a.structures == 0 {
        return Err(invalid("depth, width, inits and structures must be at least 1"));
    }
    let mut c = GNSConfig::new(a.variant).map_err(invalid)?;
    c.latent = a.width;
    c.mlp_hidden = a.width;
    // three block iterations when the depth allows it, as in the paper's models
    c.n_block_iterations = if a.depth % 3 == 0 { 3 } else { 1 };
    c.n_mp_layers = a.depth / c.n_block_iterations;
    let c = c.finalize().map_err(invalid)?;
    let model = Model::new(c.clone()).map_err(invalid)?;
    let data = make_synthetic_dataset(a.structures, a.seed);
    let graphs = data
        .iter()
        .map(|s| build_graph(s, &c.featurizer, c.max_edges_per_vertex))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(runtime)?;
    let graph = RadiusGraph::batch(&graphs).map_err(runtime)?;
    let mut mean = vec![0.0; a.depth + 1];
    for k in 0..a.inits {
        let params = model.init_params(a.seed.wrapping_add(k));
        let profile = oversmoothing_profile(&model, &params, &graph).map_err(runtime)?;
        for (m, v) in mean.iter_mut().zip(profile) {
            *m += v / a.inits as f64;
        }
    }
    let name = variant_name(a.variant);
    let mut text = String::new();
    if a.variant == Variant::GnsTat {
        let act = solve_tat_slope(&c, c.eta).map_err(invalid)?;
        let _ = writeln!(text, "# alpha={}", act.negative_slope);
    }
    text.push_str("step,variant,mean_cosine\n");
    for (t, m) in mean.iter().enumerate() {
        let _ = writeln!(text, "{t},{name},{m}");
    }
    emit(&text, a.out.as_deref(), &format!("diagnose_{name}.csv"))
}

fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::Gns => "gns",
        Variant::GnsTat => "gns_tat",
    }
}

fn oracle_check(a: &OracleArgs) -> Result<()> {
    if a.samples == 0 || a.hidden == 0 {
        return Err(invalid("--samples and --hidden must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mixture = MixtureModel::random(a.centers, a.atoms, a.sigma, a.spread, &mut rng).map_err(invalid)?;
    let net = TinyNet::init(mixture.dim(), a.hidden, &mut rng);
    let r = j1_j2_gradient_gap(&net, &mixture, a.samples, a.seed.wrapping_add(1)).map_err(runtime)?;
    let mut text = String::from("quantity,value\n");
    for (k, v) in [
        ("gap", r.gap),
        ("standard_error", r.standard_error),
        ("gap_over_se", r.gap / r.standard_error),
        ("grad_norm_j1", r.grad_norm_j1),
        ("grad_norm_j2", r.grad_norm_j2),
        ("loss_j1", r.loss_j1),
        ("loss_j2", r.loss_j2),
        ("loss_difference", r.loss_j2 - r.loss_j1),
    ] {
        let _ = writeln!(text, "{k},{v}");
    }
    let _ = writeln!(text, "n_params,{}\nn_samples,{}", r.n_params, r.n_samples);
    emit(&text, a.out.as_deref(), "oracle_check.csv")
}

fn dataset_stats(a: &StatsArgs) -> Result<()> {
    let data = load_data(&a.data)?;
    let upstream = a.upstream.as_deref().map(read_xyz).transpose()?;
    let csv = stats_csv(&data, upstream.as_deref()).map_err(invalid)?;
    emit(&csv, a.out.as_deref(), "dataset_stats.csv")
}

fn make_synthetic(a: &SyntheticArgs) -> Result<()> {
    if a.count == 0 {
        return Err(invalid("--count must be at least 1"));
    }
    let data = if a.pairs {
        make_relaxation_pairs(a.count, a.seed)
    } else {
        make_synthetic_dataset(a.count, a.seed)
    };
    let text = write_xyz(&data);
    match &a.out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                ensure_dir(Some(dir))?;
            }
            fs::write(p, text).map_err(|e| runtime(format!("cannot write {}: {e}", p.display())))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| invalid(format!("--threads {n}: {e}")))?;
    }
    match &cli.command {
        Command::Pretrain(a) => pretrain(a),
        Command::Finetune(a) => finetune(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Diagnose(a) => diagnose(a),
        Command::OracleCheck(a) => oracle_check(a),
        Command::DatasetStats(a) => dataset_stats(a),
        Command::MakeSynthetic(a) => make_synthetic(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
