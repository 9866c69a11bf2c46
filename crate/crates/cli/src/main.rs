use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;

use netsteg_core::data::{
    gen_classification, gen_denoising, load_dataset, save_dataset, ClassificationTask, LabeledDataset, Split,
};
use netsteg_core::extract::extract_secret;
use netsteg_core::model::{ber, ModelGraph, Task};
use netsteg_core::model_file;
use netsteg_core::pipeline::{
    build_pool, classifier_layers, denoiser_layers, embed, train_full, train_stego, Budget, EmbedConfig, Strategy,
};
use netsteg_core::sih::{StegoKey, DEFAULT_LSB_BITS};
use netsteg_core::steganalysis::{evaluate_pool, features_csv, histogram_features, DetectorConfig};
use netsteg_core::train::{evaluate, metrics_csv, EpochMetrics, LayerStats, TrainConfig};
use netsteg_core::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_CAPACITY: u8 = 3;
const EXIT_KEY: u8 = 4;
const EXIT_VERIFY: u8 = 5;

#[derive(Parser)]
#[command(name = "netsteg", version, about = "Hide a CNN inside another CNN and get it back out")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a fresh random 256-bit key as 64 hex digits.
    GenKey {
        #[arg(long)]
        out: PathBuf,
        /// Derive the key from a seed instead of OS randomness (tests only).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate a synthetic dataset split.
    GenData(GenData),
    /// Train a secret model from scratch; the architecture follows the data.
    TrainSecret {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        init_seed: u64,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a clean model with the architecture of a given model and write
    /// its per-layer weight statistics.
    TrainClean {
        #[arg(long)]
        like: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        init_seed: u64,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        stats: PathBuf,
    },
    /// Insert interference filters and the side filter into a secret model.
    Embed(EmbedArgs),
    /// Train the interference parameters of a stego model.
    TrainStego {
        #[arg(long)]
        stego: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        key_file: PathBuf,
        /// Reference statistics from train-clean; without it only the task
        /// loss is used.
        #[arg(long)]
        stats: Option<PathBuf>,
        #[arg(long, default_value_t = 20.0)]
        alpha: f64,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, default_value_t = DEFAULT_LSB_BITS)]
        lsb_bits: u32,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recover the secret model from a stego model.
    Extract {
        #[arg(long)]
        stego: PathBuf,
        #[arg(long)]
        key_file: PathBuf,
        #[arg(long, default_value_t = DEFAULT_LSB_BITS)]
        lsb_bits: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Bit error rate between two models; exits 0 only if they are identical.
    Verify { original: PathBuf, recovered: PathBuf },
    /// Accuracy or PSNR of a model on a dataset.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Histogram-feature steganalysis over a pool of stego and clean models.
    Analyze(AnalyzeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Classification,
    Denoising,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Gradient,
    Random,
}

#[derive(Args)]
struct GenData {
    #[arg(long, value_enum)]
    task: TaskArg,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    split: SplitArg,
    /// Samples per class (classification).
    #[arg(long, default_value_t = 128)]
    per_class: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Samples (denoising).
    #[arg(long, default_value_t = 512)]
    samples: usize,
    #[arg(long, default_value_t = 16)]
    image_size: usize,
    /// Pixel noise level; defaults to 0.15 for classification, 0.2 for denoising.
    #[arg(long)]
    noise: Option<f32>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone, Copy)]
struct TrainArgs {
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl TrainArgs {
    fn config(&self, alpha: f64, beta: f64) -> TrainConfig {
        TrainConfig {
            alpha,
            beta,
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }
}

#[derive(Args)]
#[command(group(ArgGroup::new("budget").args(["n_insert", "insert_pct"])))]
struct EmbedArgs {
    #[arg(long)]
    secret: PathBuf,
    /// Stego-task training data, used for gradient scoring.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    key_file: PathBuf,
    #[arg(long)]
    n_insert: Option<usize>,
    /// Percentage of insertable positions to fill [default: 30].
    #[arg(long)]
    insert_pct: Option<f64>,
    #[arg(long, value_enum, default_value_t = StrategyArg::Gradient)]
    strategy: StrategyArg,
    #[arg(long, default_value_t = DEFAULT_LSB_BITS)]
    lsb_bits: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
#[command(group(ArgGroup::new("source").args(["secret", "stego_dir"]).required(true)))]
struct AnalyzeArgs {
    /// Generate a pool hiding these trained secret models; repeat the flag
    /// to give each pair a different secret (pairs cycle through them).
    #[arg(long, requires = "data")]
    secret: Vec<PathBuf>,
    /// Stego-task training data for pool generation.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pairs: usize,
    #[command(flatten)]
    train: TrainArgs,
    /// Write generated pool models here.
    #[arg(long)]
    save_pool: Option<PathBuf>,
    /// Load stego models (*.nsm) from this directory instead of generating.
    #[arg(long, requires = "clean_dir")]
    stego_dir: Option<PathBuf>,
    #[arg(long)]
    clean_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    resamples: usize,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Write the feature table as CSV.
    #[arg(long)]
    features: Option<PathBuf>,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io(_) | Error::Format(_) => EXIT_IO,
            Error::Capacity { .. } => EXIT_CAPACITY,
            Error::Integrity | Error::CorruptStego(_) => EXIT_KEY,
            _ => EXIT_USAGE,
        };
        Failure { code, message: e.to_string() }
    }
}

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure { code: EXIT_IO, message: format!("{}: {e}", path.display()) }
}

type Outcome = Result<(), Failure>;

fn load_model(path: &Path) -> Result<ModelGraph, Failure> {
    model_file::load(path).map_err(|e| io_failure(path, e))
}

fn save_model(model: &ModelGraph, path: &Path) -> Outcome {
    model_file::save(model, path).map_err(|e| io_failure(path, e))
}

fn load_data(path: &Path) -> Result<LabeledDataset, Failure> {
    load_dataset(path).map_err(|e| io_failure(path, e))
}

fn load_key(path: &Path) -> Result<StegoKey, Failure> {
    StegoKey::load(path).map_err(|e| io_failure(path, e))
}

fn write_text(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| io_failure(path, e))
}

fn write_log(path: Option<&Path>, metrics: &[EpochMetrics]) -> Outcome {
    match path {
        Some(p) => write_text(p, &metrics_csv(metrics)),
        None => Ok(()),
    }
}

fn report(model: &ModelGraph, data: &LabeledDataset, label: &str) -> Outcome {
    let e = evaluate(model, data, 64)?;
    match (e.accuracy, e.psnr) {
        (Some(a), _) => println!("{label} accuracy = {:.2}% (loss {:.4})", 100.0 * a, e.loss),
        (_, Some(p)) => println!("{label} PSNR = {p:.2} dB (MSE {:.6})", e.loss),
        _ => {}
    }
    Ok(())
}

fn report_opt(model: &ModelGraph, test: Option<&Path>) -> Outcome {
    if let Some(t) = test {
        report(model, &load_data(t)?, "test")?;
    }
    Ok(())
}

fn gen_data(a: &GenData) -> Outcome {
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    };
    let ds = match a.task {
        TaskArg::Classification => {
            let task = ClassificationTask {
                seed: a.seed,
                n_classes: a.classes,
                image_size: a.image_size,
                noise: a.noise.unwrap_or(0.15),
            };
            gen_classification(&task, a.per_class, split)?
        }
        TaskArg::Denoising => gen_denoising(a.seed, a.samples, a.image_size, a.noise.unwrap_or(0.2), split)?,
    };
    save_dataset(&ds, &a.out).map_err(|e| io_failure(&a.out, e))?;
    println!("wrote {} samples to {}", ds.len(), a.out.display());
    Ok(())
}

fn secret_architecture(data: &LabeledDataset, seed: u64) -> Result<ModelGraph, Failure> {
    let [c, h, w] = data.input_shape();
    let layers = match data.n_classes() {
        Some(k) if c == 1 && h == w && h % 4 == 0 => classifier_layers(h, k),
        None if c == 1 => denoiser_layers(),
        _ => {
            return Err(Failure {
                code: EXIT_USAGE,
                message: format!("no built-in architecture for inputs {c}x{h}x{w}"),
            })
        }
    };
    Ok(ModelGraph::with_random_params(data.input_shape(), data.task(), layers, seed)?)
}

fn embed_cmd(a: &EmbedArgs) -> Outcome {
    let secret = load_model(&a.secret)?;
    let data = load_data(&a.data)?;
    let key = load_key(&a.key_file)?;
    let budget = match (a.n_insert, a.insert_pct) {
        (Some(n), _) => Budget::Count(n),
        (None, p) => Budget::Percent(p.unwrap_or(30.0)),
    };
    let strategy = match a.strategy {
        StrategyArg::Gradient => Strategy::Gradient,
        StrategyArg::Random => Strategy::Random,
    };
    let config = EmbedConfig { budget, strategy, lsb_bits: a.lsb_bits, seed: a.seed };
    let e = embed(&secret, &data, &key, &config)?;
    save_model(&e.stego, &a.out)?;
    println!("interference filters: {}", e.plan.len());
    println!(
        "expansion rate e = {:.6} ({} / {} parameters)",
        e.expansion_rate,
        e.stego.param_count(),
        secret.param_count()
    );
    println!(
        "side payload: {} of {} bits (capacity margin {} bits)",
        e.frame_bits,
        e.capacity_bits,
        e.capacity_margin()
    );
    if let Some(start) = e.adapter_start {
        println!("head adapter appended at layer {start}");
    }
    Ok(())
}

fn read_dir_models(dir: &Path) -> Result<Vec<ModelGraph>, Failure> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_failure(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "nsm"))
        .collect();
    paths.sort();
    paths.iter().map(|p| load_model(p)).collect()
}

fn analyze(a: &AnalyzeArgs) -> Outcome {
    let (stego, clean) = if let (Some(s), Some(c)) = (&a.stego_dir, &a.clean_dir) {
        (read_dir_models(s)?, read_dir_models(c)?)
    } else {
        let secrets = a.secret.iter().map(|p| load_model(p)).collect::<Result<Vec<_>, _>>()?;
        let data = load_data(a.data.as_ref().unwrap())?;
        let cfg = a.train.config(20.0, 1.0);
        let pool = build_pool(&secrets, &data, a.pairs, a.train.seed, &EmbedConfig::default(), &cfg)?;
        if let Some(dir) = &a.save_pool {
            for sub in ["stego", "clean"] {
                fs::create_dir_all(dir.join(sub)).map_err(|e| io_failure(dir, e))?;
            }
            for (i, p) in pool.iter().enumerate() {
                save_model(&p.stego, &dir.join("stego").join(format!("{i:03}.nsm")))?;
                save_model(&p.clean, &dir.join("clean").join(format!("{i:03}.nsm")))?;
            }
        }
        pool.into_iter().map(|p| (p.stego, p.clean)).unzip()
    };
    let features = |models: &[ModelGraph]| -> Result<Vec<Vec<f64>>, Failure> {
        Ok(models.iter().map(histogram_features).collect::<Result<_, _>>()?)
    };
    let (fs_, fc) = (features(&stego)?, features(&clean)?);
    if let Some(path) = &a.features {
        let rows: Vec<(bool, Vec<f64>)> =
            fs_.iter().map(|f| (true, f.clone())).chain(fc.iter().map(|f| (false, f.clone()))).collect();
        write_text(path, &features_csv(&rows))?;
    }
    let report = evaluate_pool(&fs_, &fc, a.resamples, a.split_seed, &DetectorConfig::default())?;
    println!("pool: {} stego, {} clean models", fs_.len(), fc.len());
    print!("{}", report.to_text());
    Ok(())
}

impl Command {
    fn outputs(&self) -> Vec<&Path> {
        let mut out: Vec<&PathBuf> = match self {
            Command::GenKey { out, .. } => vec![out],
            Command::GenData(a) => vec![&a.out],
            Command::TrainSecret { out, log, .. } => [Some(out), log.as_ref()].into_iter().flatten().collect(),
            Command::TrainClean { out, log, stats, .. } => {
                [Some(out), log.as_ref(), Some(stats)].into_iter().flatten().collect()
            }
            Command::Embed(a) => vec![&a.out],
            Command::TrainStego { out, log, .. } => [Some(out), log.as_ref()].into_iter().flatten().collect(),
            Command::Extract { out, .. } => vec![out],
            Command::Verify { .. } | Command::Evaluate { .. } => vec![],
            Command::Analyze(a) => a.features.iter().collect(),
        };
        out.dedup();
        out.into_iter().map(PathBuf::as_path).collect()
    }
}

// fail before any training if an output cannot land anywhere
fn check_outputs(command: &Command) -> Outcome {
    for path in command.outputs() {
        let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        if !parent.is_dir() {
            return Err(io_failure(path, "output directory does not exist"));
        }
        if path.is_dir() {
            return Err(io_failure(path, "output path is a directory"));
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    check_outputs(&cli.command)?;
    match cli.command {
        Command::GenKey { out, seed } => {
            if out.exists() {
                return Err(Failure {
                    code: EXIT_IO,
                    message: format!("{} already exists; refusing to overwrite a key", out.display()),
                });
            }
            let key = match seed {
                Some(s) => StegoKey::generate(&mut rand::rngs::StdRng::seed_from_u64(s)),
                None => StegoKey::generate(&mut rand::rng()),
            };
            key.save(&out).map_err(|e| io_failure(&out, e))?;
            println!("wrote key to {}", out.display());
        }
        Command::GenData(a) => gen_data(&a)?,
        Command::TrainSecret { data, test, init_seed, train, log, out } => {
            let ds = load_data(&data)?;
            let mut model = secret_architecture(&ds, init_seed)?;
            let metrics = train_full(&mut model, &ds, &train.config(0.0, 0.0))?;
            write_log(log.as_deref(), &metrics)?;
            save_model(&model, &out)?;
            println!("trained secret model: {} parameters", model.param_count());
            report_opt(&model, test.as_deref())?;
        }
        Command::TrainClean { like, data, test, init_seed, train, log, out, stats } => {
            let ds = load_data(&data)?;
            let mut model = load_model(&like)?.reinitialized(init_seed)?;
            model.set_task(ds.task());
            let metrics = train_full(&mut model, &ds, &train.config(0.0, 0.0))?;
            write_log(log.as_deref(), &metrics)?;
            save_model(&model, &out)?;
            LayerStats::of(&model).save(&stats).map_err(|e| io_failure(&stats, e))?;
            println!("trained clean model: {} parameters", model.param_count());
            report_opt(&model, test.as_deref())?;
        }
        Command::Embed(a) => embed_cmd(&a)?,
        Command::TrainStego { stego, data, test, key_file, stats, alpha, beta, train, lsb_bits, log, out } => {
            let mut model = load_model(&stego)?;
            let ds = load_data(&data)?;
            let key = load_key(&key_file)?;
            let reference = match &stats {
                Some(p) => Some(LayerStats::load(p).map_err(|e| io_failure(p, e))?),
                None => None,
            };
            let config = match reference {
                Some(_) => train.config(alpha, beta),
                None => train.config(0.0, 0.0),
            };
            let metrics = train_stego(&mut model, &key, lsb_bits, &ds, reference.as_ref(), &config)?;
            write_log(log.as_deref(), &metrics)?;
            save_model(&model, &out)?;
            if let Some(m) = metrics.last() {
                println!(
                    "epoch {}: L_st {:.5} L_mu {:.6} L_sigma {:.6} L_all {:.5}",
                    m.epoch + 1,
                    m.l_st,
                    m.l_mu,
                    m.l_sigma,
                    m.l_all
                );
            }
            report_opt(&model, test.as_deref())?;
        }
        Command::Extract { stego, key_file, lsb_bits, out } => {
            let model = load_model(&stego)?;
            let key = load_key(&key_file)?;
            let secret = extract_secret(&model, &key, lsb_bits)?;
            save_model(&secret, &out)?;
            println!("recovered secret model: {} parameters", secret.param_count());
        }
        Command::Verify { original, recovered } => {
            let a = load_model(&original)?;
            let b = load_model(&recovered)?;
            let rate = ber(&a, &b).map_err(|e| Failure { code: EXIT_VERIFY, message: e.to_string() })?;
            println!("BER = {rate:.6}");
            if rate != 0.0 || a.task() != b.task() {
                return Err(Failure { code: EXIT_VERIFY, message: "models differ".into() });
            }
        }
        Command::Evaluate { model, data } => {
            let m = load_model(&model)?;
            let ds = load_data(&data)?;
            if m.task() != ds.task() && m.task() == Task::Denoising {
                log::warn!("model is tagged for denoising, data is classification");
            }
            report(&m, &ds, "model")?;
        }
        Command::Analyze(a) => analyze(&a)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
