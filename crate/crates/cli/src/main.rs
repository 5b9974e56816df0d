use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use vnode::autodiff::VjpFault;
use vnode::checkpoint::{self, Checkpoint};
use vnode::config::{Precision, RunConfig};
use vnode::data::{self, Dataset, DatasetId, Normalization};
use vnode::gradcheck::{self, GradcheckOptions, GradcheckReport};
use vnode::model::{Family, VnodeModel, VnodeModelConfig};
use vnode::tensor::Element;
use vnode::trainer::{self, LoopConfig, Trainer};

/// Environment variable naming the default dataset root.
const DATA_DIR_ENV: &str = "VNODE_DATA_DIR";

mod code {
    pub const OTHER: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const DATA: u8 = 3;
    pub const DIVERGENCE: u8 = 4;
    pub const VERIFICATION: u8 = 5;
    pub const CHECKPOINT: u8 = 6;
}

/// Train, evaluate and verify Volterra neural ODE classifiers.
///
/// Exit codes: 0 success, 1 other failure, 2 configuration error, 3 dataset
/// error, 4 numerical divergence, 5 verification failure, 6 checkpoint error.
#[derive(Parser, Debug)]
#[command(name = "vnode", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write metrics and checkpoints to the output directory.
    Train(TrainArgs),
    /// Report final and per-stage accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Check adjoint gradients against finite differences and the unrolled solve.
    Gradcheck(GradcheckArgs),
    /// Print per-stage and total parameter and FLOP counts.
    Flops(FlopsArgs),
    /// Describe the architecture and parameters stored in a checkpoint.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// TOML run configuration; built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration value; repeatable.
    #[arg(long = "set", value_name = "DOT.PATH=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Dataset root (default: config `data.dir`, then $VNODE_DATA_DIR).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Resume from this checkpoint, continuing its epoch numbering.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Scale every convolution-kernel gradient by this factor (negative control).
    #[arg(long, hide = true)]
    inject_fault: Option<f64>,
}

#[derive(Args, Debug)]
struct FlopsArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Print CSV instead of the table.
    #[arg(long)]
    csv: bool,
    /// Also write flops.csv here.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
}

/// A check that ran and failed, as opposed to an error that stopped it.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct VerificationFailed(String);

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Flops(a) => cmd_flops(a),
        Command::Inspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<VerificationFailed>() {
            return code::VERIFICATION;
        }
        if let Some(err) = cause.downcast_ref::<vnode::Error>() {
            return match err {
                vnode::Error::Config(_) => code::CONFIG,
                vnode::Error::Data { .. } => code::DATA,
                vnode::Error::Divergence { .. } | vnode::Error::Convergence(_) => code::DIVERGENCE,
                vnode::Error::Checkpoint(_) => code::CHECKPOINT,
                _ => code::OTHER,
            };
        }
    }
    code::OTHER
}

fn load_config(args: &ConfigArgs) -> anyhow::Result<RunConfig> {
    let mut overrides = args.overrides.clone();
    if let Some(seed) = args.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(p) = args.precision {
        overrides.push(format!("precision=\"{}\"", Precision::from(p).name()));
    }
    Ok(match &args.config {
        Some(path) => RunConfig::from_file(path, &overrides)?,
        None => RunConfig::from_toml_str("", &overrides)?,
    })
}

fn data_root(flag: Option<&Path>, cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.data.dir.clone())
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .ok_or_else(|| {
            vnode::Error::Config(format!(
                "no dataset root: pass --data-dir, set data.dir or ${DATA_DIR_ENV}"
            ))
            .into()
        })
}

/// Checkpoint loading with read failures reported as checkpoint errors.
fn read_checkpoint<T: Element>(path: &Path) -> anyhow::Result<Checkpoint<T>> {
    checkpoint::load(path).map_err(|e| match e {
        vnode::Error::Io { path, source } => {
            vnode::Error::Checkpoint(format!("cannot read {}: {source}", path.display())).into()
        }
        other => other.into(),
    })
}

fn checkpoint_precision(path: &Path, flag: Option<PrecisionArg>) -> anyhow::Result<Precision> {
    if let Some(p) = flag {
        return Ok(p.into());
    }
    let bytes = fs::read(path).map_err(|e| vnode::Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    Ok(match checkpoint::stored_width(&bytes) {
        Some(8) => Precision::F64,
        _ => Precision::F32,
    })
}

fn provenance(cfg: &RunConfig, args: &ConfigArgs) -> String {
    let name = args
        .config
        .as_deref()
        .and_then(Path::file_name)
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "defaults".into());
    let mut out = format!(
        "seed={} precision={} dataset={:?} config={name}",
        cfg.seed,
        cfg.precision.name(),
        cfg.data.dataset
    );
    for o in &args.overrides {
        out.push_str(&format!(" set={}", o.replace(char::is_whitespace, "")));
    }
    out
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let cfg = load_config(&args.cfg)?;
    let model_cfg = cfg.model_config()?;
    cfg.train.optimizer.validate()?;
    let root = data_root(args.data_dir.as_deref(), &cfg)?;
    match cfg.precision {
        Precision::F32 => train::<f32>(&args, &cfg, model_cfg, &root),
        Precision::F64 => train::<f64>(&args, &cfg, model_cfg, &root),
    }
}

fn train<T: Element>(
    args: &TrainArgs,
    cfg: &RunConfig,
    model_cfg: VnodeModelConfig,
    root: &Path,
) -> anyhow::Result<()> {
    let resume = args.checkpoint.as_deref().map(read_checkpoint::<T>).transpose()?;
    if let Some(ck) = &resume {
        if ck.model.config != model_cfg {
            return Err(vnode::Error::Config("checkpoint architecture differs from the configuration".into()).into());
        }
        if ck.seed != cfg.seed {
            log::warn!("checkpoint seed {} differs from configured seed {}", ck.seed, cfg.seed);
        }
    }

    let (train_set, test_set) = cfg.data.load(root)?;
    log::info!(
        "{:?}: {} train / {} test samples from {}",
        cfg.data.dataset,
        train_set.len(),
        test_set.len(),
        root.display()
    );
    let norm = match resume.as_ref().and_then(|ck| ck.normalization.clone()) {
        Some(n) => n,
        None => Normalization::fit(&train_set),
    };

    let (model, start_epoch, opt_state) = match resume {
        Some(ck) => (ck.model, ck.epoch as usize, ck.optimizer),
        None => {
            let mut rng = data::stream_rng(cfg.seed, data::INIT_STREAM, 0);
            (VnodeModel::init(model_cfg, &mut rng)?, 0, None)
        }
    };
    log::info!("{} parameters", model.num_scalars());
    let mut tr = Trainer::new(
        model,
        cfg.train.optimizer.clone(),
        cfg.train.stage_weights.clone(),
        cfg.train.grad_mode,
    )?;
    if let Some((kind, state)) = opt_state {
        if kind != tr.optimizer.kind {
            return Err(vnode::Error::Config(format!(
                "checkpoint optimizer {kind:?} differs from configured {:?}",
                tr.optimizer.kind
            ))
            .into());
        }
        tr.state = state;
    }
    if start_epoch >= cfg.train.epochs {
        println!(
            "checkpoint already at epoch {start_epoch} of {}; nothing to do",
            cfg.train.epochs
        );
        return Ok(());
    }

    let loop_cfg = LoopConfig {
        epochs: cfg.train.epochs,
        batch_size: cfg.train.batch_size,
        eval_batch_size: cfg.train.eval_batch_size,
        seed: cfg.seed,
        augment: cfg.data.augment.then_some(cfg.data.augment_policy),
        max_batches_per_epoch: cfg.train.max_batches_per_epoch,
        checkpoint_every: cfg.train.checkpoint_every,
        out_dir: Some(args.out_dir.clone()),
        provenance: provenance(cfg, &args.cfg),
    };
    let records = trainer::fit(&mut tr, &train_set, &test_set, &norm, &loop_cfg, start_epoch)?;
    if let Some(last) = records.last() {
        println!(
            "epoch {}: total_loss {:.6} train_acc {:.4} test_acc {:.4}",
            last.epoch, last.total_loss, last.train_acc, last.test_acc
        );
    }
    println!("metrics: {}", args.out_dir.join(trainer::METRICS_FILE).display());
    println!("checkpoint: {}", args.out_dir.join(trainer::FINAL_CHECKPOINT).display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let precision = match args.cfg.precision {
        Some(p) => p.into(),
        None => checkpoint_precision(&args.checkpoint, None)?,
    };
    match precision {
        Precision::F32 => eval::<f32>(&args),
        Precision::F64 => eval::<f64>(&args),
    }
}

fn eval<T: Element>(args: &EvalArgs) -> anyhow::Result<()> {
    let ck = read_checkpoint::<T>(&args.checkpoint)?;
    let mut cfg = load_config(&args.cfg)?;
    if args.cfg.config.is_none() {
        cfg.data.dataset = infer_dataset(ck.model.config.input_shape)?;
    }
    let root = data_root(args.data_dir.as_deref(), &cfg)?;
    let (train_set, test_set) = cfg.data.load(root.as_path())?;
    let data: &Dataset = match args.split {
        SplitArg::Train => &train_set,
        SplitArg::Test => &test_set,
    };
    if data.shape != ck.model.config.input_shape {
        return Err(vnode::Error::Config(format!(
            "dataset shape {:?} does not match model input {:?}",
            data.shape, ck.model.config.input_shape
        ))
        .into());
    }
    let norm = match &ck.normalization {
        Some(n) => n.clone(),
        None => Normalization::fit(&train_set),
    };
    let weights = cfg
        .train
        .stage_weights
        .clone()
        .unwrap_or_else(|| vec![1.0; ck.model.config.num_stages()]);
    let report = trainer::evaluate(&ck.model, data, &norm, cfg.train.eval_batch_size, &weights)?;
    println!("split: {:?} ({} samples)", args.split, data.len());
    println!("accuracy: {:.6}", report.accuracy);
    for (m, (acc, loss)) in report.stage_accuracies.iter().zip(&report.stage_losses).enumerate() {
        println!("stage {}: accuracy {:.6} loss {:.6}", m + 1, acc, loss);
    }
    println!("mean_loss: {:.6}", report.mean_loss);
    Ok(())
}

fn infer_dataset(shape: [usize; 3]) -> anyhow::Result<DatasetId> {
    [DatasetId::Cifar10, DatasetId::Mnist]
        .into_iter()
        .find(|d| d.input_shape() == shape)
        .ok_or_else(|| vnode::Error::Config(format!("no dataset has input shape {shape:?}; pass --config")).into())
}

fn cmd_gradcheck(args: GradcheckArgs) -> anyhow::Result<()> {
    let cfg = load_config(&args.cfg)?;
    if cfg.precision != Precision::F64 {
        log::info!("gradcheck runs in 64-bit precision");
    }
    let model_cfg = cfg.model_config()?;
    let mut rng = data::stream_rng(cfg.seed, data::INIT_STREAM, 0);
    let model = VnodeModel::<f64>::init(model_cfg, &mut rng)?;
    let (x, labels) = gradcheck::synthetic_batch(
        cfg.gradcheck.samples,
        model.config.input_shape,
        model.config.num_classes,
        cfg.seed,
    );
    let weights = cfg
        .train
        .stage_weights
        .clone()
        .unwrap_or_else(|| vec![1.0; model.config.num_stages()]);
    let opts = GradcheckOptions {
        epsilon: cfg.gradcheck.epsilon,
        threshold: cfg.gradcheck.threshold,
        fault: match args.inject_fault {
            Some(s) => VjpFault::ScaleConvKernelGrad(s),
            None => VjpFault::None,
        },
    };
    println!(
        "gradcheck: {} parameters, {} samples, epsilon {:e}, threshold {:e}",
        model.num_scalars(),
        cfg.gradcheck.samples,
        opts.epsilon,
        opts.threshold
    );
    let report = gradcheck::gradcheck(&model, &x, &labels, &weights, &opts)?;
    print!("{}", gradcheck_table(&report));
    let failing = report.failing();
    if failing.is_empty() {
        println!("PASS: every group below {:e}", report.threshold);
        Ok(())
    } else {
        let names: Vec<&str> = failing.iter().map(|f| f.label()).collect();
        Err(VerificationFailed(format!(
            "gradient check failed for {} (threshold {:e})",
            names.join(", "),
            report.threshold
        ))
        .into())
    }
}

fn gradcheck_table(report: &GradcheckReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<22} {:>8} {:>12} {:>14} {:>14}  worst",
        "group", "scalars", "rel_err_fd", "rel_err_unroll", "max_elem_fd"
    );
    for f in &report.families {
        let unrolled = f
            .unrolled
            .as_ref()
            .map(|d| format!("{:.3e}", d.relative()))
            .unwrap_or_else(|| "n/a".into());
        let _ = writeln!(
            out,
            "{:<22} {:>8} {:>12.3e} {:>14} {:>14.3e}  {}",
            f.family.label(),
            f.scalars,
            f.fd.relative(),
            unrolled,
            f.fd.max_elementwise,
            f.fd.worst
        );
    }
    let _ = writeln!(out, "loss {:.6}, {:.1} s", report.loss, report.seconds);
    out
}

fn cmd_flops(args: FlopsArgs) -> anyhow::Result<()> {
    let cfg = load_config(&args.cfg)?;
    let model_cfg = cfg.model_config()?;
    let counts = model_cfg.stage_counts()?;
    let csv = flops_csv(&counts);
    if let Some(dir) = &args.out_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("flops.csv");
        fs::write(&path, &csv).with_context(|| format!("writing {}", path.display()))?;
    }
    if args.csv {
        print!("{csv}");
    } else {
        print!("{}", flops_table(&model_cfg, &counts)?);
    }
    Ok(())
}

fn opt(v: Option<u64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_else(|| "adaptive".into())
}

fn flops_csv(counts: &[vnode::model::StageCounts]) -> String {
    let mut out = String::from(
        "stage,filter_params,dynamics_params,head_params,params,filter_flops,dynamics_flops_per_eval,evals,dynamics_flops,head_flops,flops\n",
    );
    for (m, c) in counts.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            m + 1,
            c.filter_params,
            c.dynamics_params,
            c.head_params,
            c.params(),
            c.filter_flops,
            c.dynamics_flops_per_eval,
            opt(c.evals),
            opt(c.dynamics_flops()),
            c.head_flops,
            opt(c.flops())
        );
    }
    let sum = |f: &dyn Fn(&vnode::model::StageCounts) -> u64| counts.iter().map(f).sum::<u64>();
    let total_flops: Option<u64> = counts.iter().map(|c| c.flops()).sum();
    let _ = writeln!(
        out,
        "total,{},{},{},{},{},{},,{},{},{}",
        sum(&|c| c.filter_params),
        sum(&|c| c.dynamics_params),
        sum(&|c| c.head_params),
        sum(&|c| c.params()),
        sum(&|c| c.filter_flops),
        sum(&|c| c.dynamics_flops_per_eval),
        opt(counts.iter().map(|c| c.dynamics_flops()).sum()),
        sum(&|c| c.head_flops),
        opt(total_flops)
    );
    out
}

fn flops_table(cfg: &VnodeModelConfig, counts: &[vnode::model::StageCounts]) -> anyhow::Result<String> {
    let shapes = cfg.stage_shapes()?;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<6} {:>14} {:>12} {:>16} {:>6} {:>16} {:>12} {:>16}",
        "stage", "output", "params", "filter_flops", "evals", "ode_flops", "head_flops", "flops"
    );
    for (m, c) in counts.iter().enumerate() {
        let s = shapes[m];
        let _ = writeln!(
            out,
            "{:<6} {:>14} {:>12} {:>16} {:>6} {:>16} {:>12} {:>16}",
            m + 1,
            format!("{}x{}x{}", s[0], s[1], s[2]),
            c.params(),
            c.filter_flops,
            opt(c.evals),
            opt(c.dynamics_flops()),
            c.head_flops,
            opt(c.flops())
        );
    }
    let params: u64 = counts.iter().map(|c| c.params()).sum();
    let flops: Option<u64> = counts.iter().map(|c| c.flops()).sum();
    let _ = writeln!(out, "total params: {params} ({:.4} M)", params as f64 / 1e6);
    match flops {
        Some(f) => {
            let _ = writeln!(out, "total flops per sample: {f} ({:.4} GFLOPs)", f as f64 / 1e9);
        }
        None => {
            let _ = writeln!(out, "total flops per sample: depends on adaptive step counts");
        }
    }
    Ok(out)
}

fn cmd_inspect(args: InspectArgs) -> anyhow::Result<()> {
    match checkpoint_precision(&args.checkpoint, args.precision)? {
        Precision::F32 => inspect::<f32>(&args.checkpoint),
        Precision::F64 => inspect::<f64>(&args.checkpoint),
    }
}

fn inspect<T: Element>(path: &Path) -> anyhow::Result<()> {
    let ck = read_checkpoint::<T>(path)?;
    let cfg = &ck.model.config;
    let shapes = cfg.stage_shapes()?;
    let counts = cfg.stage_counts()?;
    println!("checkpoint: {}", path.display());
    println!("precision: {}-bit", T::BYTES * 8);
    println!("epoch: {}  seed: {}", ck.epoch, ck.seed);
    println!("input: {:?}  classes: {}", cfg.input_shape, cfg.num_classes);
    let points: Vec<String> = cfg.event_points.iter().map(|t| format!("{t}")).collect();
    println!("event points: [{}]", points.join(", "));
    println!("stages: {}", cfg.num_stages());
    for (m, stage) in cfg.stages.iter().enumerate() {
        let s = shapes[m];
        println!(
            "  stage {}: t in [{}, {}], state {}x{}x{}, params {}",
            m + 1,
            cfg.event_points[m],
            cfg.event_points[m + 1],
            s[0],
            s[1],
            s[2],
            counts[m].params()
        );
        for (b, l) in stage.filter.branches.iter().enumerate() {
            println!(
                "    filter {b}: {}->{} k{}x{} stride {} groups {} rank {} {:?}",
                l.in_channels, l.out_channels, l.kernel.0, l.kernel.1, l.stride, l.groups, l.rank, l.mode
            );
        }
        let d = &stage.dynamics;
        let solver = cfg.solver(m);
        println!(
            "    dynamics: {}->{} k{}x{} groups {} rank {}, solver {:?} ({}), time injection {}",
            d.in_channels,
            d.out_channels,
            d.kernel.0,
            d.kernel.1,
            d.groups,
            d.rank,
            solver.method,
            if solver.is_fixed_step() {
                format!("{} steps", solver.steps)
            } else {
                format!("rtol {:e} atol {:e}", solver.rtol, solver.atol)
            },
            stage.time_injection
        );
    }
    let mut by_family = [0usize; 3];
    for (info, p) in ck.model.param_infos().iter().zip(&ck.model.params) {
        let i = Family::ALL.iter().position(|f| *f == info.family).unwrap_or(0);
        by_family[i] += p.len();
    }
    for (f, n) in Family::ALL.iter().zip(by_family) {
        println!("{:<22} {n}", f.label());
    }
    println!("total parameters: {}", ck.model.num_scalars());
    match &ck.normalization {
        Some(n) => println!("normalization: mean {:?} std {:?}", n.mean, n.std),
        None => println!("normalization: none"),
    }
    match &ck.optimizer {
        Some((kind, state)) => println!("optimizer: {kind:?} after {} steps", state.step),
        None => println!("optimizer: none"),
    }
    Ok(())
}
