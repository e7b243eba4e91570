//! Command-line entry point: generation, training, registration,
//! evaluation, ablation switches, and diagnostics.

use crate::datasyn::{generate_dataset, load_dataset, write_dataset, DatasetParams, Regime};
use crate::diffusion::NoiseSchedule;
use crate::evalkit::{evaluate, EvalOptions};
use crate::geom3d::{save_transforms, TransformVec7};
use crate::nnkit::{grad_check, load_checkpoint, ParamStore};
use crate::regnet::{CBModelConfig, CFModelConfig, CbModel, CfModel, FusionMode, Repr};
use crate::trainer::{
    pair_loss_graph, train_loop, ModelSidecar, RegModel, TrainConfig, TrainError,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Exit status buckets: 0 success, 1 validation or numeric failure, 2 I/O
/// or parse failure.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Io(_) => 2,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Io(m) => m,
        }
    }
}

fn io_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Io(e.to_string())
}

fn val_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Validation(e.to_string())
}

fn classify_train(e: TrainError) -> CliError {
    match e {
        TrainError::Io(e) => CliError::Io(e.to_string()),
        TrainError::Checkpoint(e) => CliError::Io(e.to_string()),
        TrainError::State(m) => CliError::Io(m),
        other => CliError::Validation(other.to_string()),
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "pcrdiff",
    about = "Diffusion-based rigid point cloud registration on synthetic benchmarks",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset (train + held-out splits).
    Generate(GenerateArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Register one source cloud onto a template with a trained model.
    Register(RegisterArgs),
    /// Evaluate a trained model over a dataset split.
    Eval(EvalArgs),
    /// Dump the cosine noise schedule as CSV.
    ScheduleDump(ScheduleDumpArgs),
    /// Verify backprop gradients against central finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RegimeArg {
    Clean,
    UnseenCat,
    Noise,
    Partial,
}

impl From<RegimeArg> for Regime {
    fn from(r: RegimeArg) -> Regime {
        match r {
            RegimeArg::Clean => Regime::Clean,
            RegimeArg::UnseenCat => Regime::UnseenCat,
            RegimeArg::Noise => Regime::Noise,
            RegimeArg::Partial => Regime::Partial,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VariantArg {
    Cf,
    Cb,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ReprArg {
    Quat7,
    Euler6,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FusionArg {
    #[value(name = "ft+p_cat_q")]
    FtPlusPCatQ,
    #[value(name = "ft+q_cat_p")]
    FtPlusQCatP,
    #[value(name = "cat_all")]
    CatAll,
}

impl From<FusionArg> for FusionMode {
    fn from(f: FusionArg) -> FusionMode {
        match f {
            FusionArg::FtPlusPCatQ => FusionMode::FtPlusPConcatQ,
            FusionArg::FtPlusQCatP => FusionMode::FtPlusQConcatP,
            FusionArg::CatAll => FusionMode::ConcatAll,
        }
    }
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long, value_enum, default_value = "clean")]
    regime: RegimeArg,
    /// Training pairs.
    #[arg(long, default_value_t = 100)]
    pairs: usize,
    /// Held-out pairs.
    #[arg(long, default_value_t = 20)]
    test_pairs: usize,
    /// Points per cloud.
    #[arg(long, default_value_t = 128)]
    points: usize,
    /// Max Euler angle, degrees.
    #[arg(long, default_value_t = 45.0)]
    rot_max: f64,
    /// Max translation per axis.
    #[arg(long, default_value_t = 1.0)]
    trans_max: f64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Worker threads (generation is deterministic regardless).
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML run config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory from `generate`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "cf")]
    variant: VariantArg,
    #[arg(long, value_enum)]
    repr: Option<ReprArg>,
    #[arg(long, value_enum)]
    fusion: Option<FusionArg>,
    /// Ablation: bypass the transformation encoder, feed zeros for the
    /// transform feature.
    #[arg(long)]
    no_diffusion: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Diffusion step count T.
    #[arg(long)]
    t_max: Option<usize>,
    /// Resume from a train_state.bin file.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RegisterArgs {
    /// Checkpoint path; the model sidecar is `<same stem>.toml`.
    #[arg(long)]
    model: PathBuf,
    /// Source cloud (.xyz).
    #[arg(long)]
    src: PathBuf,
    /// Template cloud (.xyz).
    #[arg(long)]
    tpl: PathBuf,
    #[arg(long, default_value_t = 1)]
    steps: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Output transform record.
    #[arg(long, default_value = "transform.txt")]
    out_transform: PathBuf,
    /// Output aligned source cloud.
    #[arg(long, default_value = "aligned.xyz")]
    out_cloud: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Which split of the dataset to score.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 1)]
    steps: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Omit wall times so the CSV is bitwise reproducible.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Args, Debug)]
struct ScheduleDumpArgs {
    #[arg(long, default_value_t = 1000)]
    t_max: usize,
    /// CSV output path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[arg(long, value_enum, default_value = "cf")]
    variant: VariantArg,
    #[arg(long, default_value_t = 16)]
    points: usize,
    /// Max relative error allowed.
    #[arg(long)]
    threshold: Option<f64>,
    /// Parameter scalars sampled for finite differences.
    #[arg(long, default_value_t = 1500)]
    samples: usize,
    #[arg(long)]
    seed: Option<u64>,
}

/// Structured run configuration; unknown keys are rejected.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub cf: CFModelConfig,
    pub cb: CBModelConfig,
}

fn env_seed() -> Option<u64> {
    std::env::var("PCRDIFF_SEED").ok().and_then(|s| s.parse().ok())
}

fn resolve_seed(flag: Option<u64>, config: Option<u64>) -> u64 {
    flag.or(config).or_else(env_seed).unwrap_or(0)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Command::Generate(args) => generate(args),
        Command::Train(args) => train(args),
        Command::Register(args) => register(args),
        Command::Eval(args) => eval(args),
        Command::ScheduleDump(args) => schedule_dump(args),
        Command::GradCheck(args) => grad_check_cmd(args),
    }
}

fn generate(args: GenerateArgs) -> Result<(), CliError> {
    let params = DatasetParams {
        regime: args.regime.into(),
        pairs: args.pairs,
        test_pairs: args.test_pairs,
        points: args.points,
        rot_max_deg: args.rot_max,
        trans_max: args.trans_max,
        seed: resolve_seed(args.seed, None),
    };
    let (train, test) = if args.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(args.jobs)
            .build()
            .map_err(io_err)?;
        pool.install(|| generate_dataset(&params)).map_err(val_err)?
    } else {
        generate_dataset(&params).map_err(val_err)?
    };
    write_dataset(&args.out, &params, &train, &test).map_err(io_err)?;
    println!(
        "wrote {} train and {} held-out pairs to {}",
        train.len(),
        test.len(),
        args.out.display()
    );
    Ok(())
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(io_err)?;
            toml::from_str(&text)
                .map_err(|e| CliError::Validation(format!("config error: {e}")))
        }
    }
}

fn train(args: TrainArgs) -> Result<(), CliError> {
    let mut cfg = load_run_config(args.config.as_deref())?;
    let seed = resolve_seed(args.seed, Some(cfg.train.seed));
    cfg.train.seed = seed;
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(t) = args.t_max {
        cfg.train.t_max = t;
    }
    cfg.train.max_steps = args.max_steps.or(cfg.train.max_steps);

    let repr = match args.repr {
        Some(ReprArg::Euler6) => Repr::Euler6,
        Some(ReprArg::Quat7) => Repr::Quat7,
        None => cfg.cf.repr,
    };
    let model = match args.variant {
        VariantArg::Cf => {
            let mut mc = cfg.cf.clone();
            mc.repr = repr;
            if let Some(f) = args.fusion {
                mc.fusion = f.into();
            }
            if args.no_diffusion {
                mc.diffusion_conditioning = false;
            }
            cfg.train.batch_size = args.batch.unwrap_or(cfg.train.batch_size);
            RegModel::Cf(CfModel::new(mc, cfg.train.t_max).map_err(val_err)?)
        }
        VariantArg::Cb => {
            if repr == Repr::Euler6 {
                return Err(CliError::Validation(
                    "config error at variant/repr: the correspondence-based variant supports quat7 only"
                        .into(),
                ));
            }
            let mut mc = cfg.cb.clone();
            if args.no_diffusion {
                mc.diffusion_conditioning = false;
            }
            // Correspondence-based default batch is smaller.
            cfg.train.batch_size = args.batch.unwrap_or(8);
            RegModel::Cb(CbModel::new(mc, cfg.train.t_max).map_err(val_err)?)
        }
    };

    let (_, train_pairs, test_pairs) = load_dataset(&args.data).map_err(io_err)?;
    if train_pairs.is_empty() {
        return Err(CliError::Validation("dataset has no training pairs".into()));
    }
    let sched = NoiseSchedule::cosine(cfg.train.t_max).map_err(val_err)?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model.register_params(&mut store, &mut rng).map_err(val_err)?;

    let val: Option<&[crate::datasyn::RegPair]> =
        if test_pairs.is_empty() { None } else { Some(&test_pairs) };
    let report = train_loop(
        &model,
        &mut store,
        &train_pairs,
        val,
        &sched,
        &cfg.train,
        Some(&args.out),
        args.resume.as_deref(),
    )
    .map_err(classify_train)?;

    let sidecar = ModelSidecar::for_model(&model);
    for stem in ["model_best", "model_final"] {
        sidecar
            .save(&args.out.join(format!("{stem}.toml")))
            .map_err(classify_train)?;
    }
    println!(
        "trained {} steps; final loss {:.6}; best validation loss {:.6}",
        report.steps, report.final_train_loss, report.best_val_loss
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<(RegModel, ParamStore), CliError> {
    let sidecar_path = path.with_extension("toml");
    let sidecar = ModelSidecar::load(&sidecar_path).map_err(|e| {
        CliError::Io(format!("sidecar {}: {}", sidecar_path.display(), e))
    })?;
    let model = sidecar.build().map_err(val_err)?;
    let tensors = load_checkpoint(path).map_err(io_err)?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    model.register_params(&mut store, &mut rng).map_err(val_err)?;
    store.load_values(&tensors).map_err(val_err)?;
    Ok((model, store))
}

fn register(args: RegisterArgs) -> Result<(), CliError> {
    let (model, store) = load_model(&args.model)?;
    let src = crate::datasyn::load_xyz(&args.src).map_err(io_err)?;
    let tpl = crate::datasyn::load_xyz(&args.tpl).map_err(io_err)?;
    let t_max = match &model {
        RegModel::Cf(m) => m.t_max(),
        RegModel::Cb(m) => m.t_max(),
    };
    let sched = NoiseSchedule::cosine(t_max).map_err(val_err)?;
    if args.steps < 1 || args.steps > t_max {
        return Err(CliError::Validation(format!(
            "steps {} must be in [1, {t_max}]",
            args.steps
        )));
    }
    let seed = resolve_seed(args.seed, None);
    let pair = crate::datasyn::RegPair {
        p: src.clone(),
        q: tpl,
        g_gt: crate::geom3d::RigidTransform::IDENTITY,
        meta: crate::datasyn::PairMeta {
            regime: Regime::Clean,
            kind: crate::datasyn::ShapeKind::Sphere,
            seed,
            noise_sigma: None,
            noise_clip: None,
            crop_keep: None,
        },
    };
    use crate::regnet::Denoiser;
    let cond = model.prepare(&store, &pair.p, &pair.q).map_err(val_err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = model.repr().dim();
    let mut denoise_err = None;
    let pred = crate::diffusion::sample_loop_slice(
        |g_t, t| match model.denoise(&store, &cond, g_t, t) {
            Ok(v) => v,
            Err(e) => {
                denoise_err = Some(e);
                vec![0.0; dim]
            }
        },
        &sched,
        args.steps,
        dim,
        &mut rng,
    )
    .map_err(val_err)?;
    if let Some(e) = denoise_err {
        return Err(val_err(e));
    }
    let g = crate::regnet::vec_to_transform(&pred, model.repr()).map_err(val_err)?;
    let TransformVec7(v) = g.to_vec7();
    println!("{} {} {} {} {} {} {}", v[0], v[1], v[2], v[3], v[4], v[5], v[6]);
    save_transforms(&args.out_transform, &[g]).map_err(io_err)?;
    let aligned = g.apply(&src).map_err(val_err)?;
    crate::datasyn::save_xyz(&args.out_cloud, &aligned).map_err(io_err)?;
    Ok(())
}

fn eval(args: EvalArgs) -> Result<(), CliError> {
    let (model, store) = load_model(&args.model)?;
    let (_, train_pairs, test_pairs) = load_dataset(&args.data).map_err(io_err)?;
    let pairs = match args.split.as_str() {
        "train" => train_pairs,
        "test" => test_pairs,
        other => {
            return Err(CliError::Validation(format!(
                "unknown split {other}; expected train or test"
            )))
        }
    };
    if pairs.is_empty() {
        return Err(CliError::Validation(format!("split {} is empty", args.split)));
    }
    let t_max = match &model {
        RegModel::Cf(m) => m.t_max(),
        RegModel::Cb(m) => m.t_max(),
    };
    let sched = NoiseSchedule::cosine(t_max).map_err(val_err)?;
    let opts = EvalOptions {
        steps: args.steps,
        seed: resolve_seed(args.seed, None),
        timing: !args.no_timing,
        jobs: args.jobs,
    };
    let table = evaluate(&model, &store, &pairs, &sched, &opts).map_err(val_err)?;
    std::fs::write(&args.out, table.to_csv()).map_err(io_err)?;
    println!("{}", crate::evalkit::CSV_HEADER);
    println!("{}", table.aggregate.csv_row());
    Ok(())
}

fn schedule_dump(args: ScheduleDumpArgs) -> Result<(), CliError> {
    let sched = NoiseSchedule::cosine(args.t_max).map_err(val_err)?;
    let mut out = String::from("t,beta,alpha_bar,posterior_var\n");
    for t in 1..=args.t_max {
        out.push_str(&format!(
            "{},{},{},{}\n",
            t,
            sched.beta(t),
            sched.alpha_bar(t),
            sched.posterior_var(t)
        ));
    }
    match args.out {
        Some(path) => std::fs::write(path, out).map_err(io_err)?,
        None => print!("{out}"),
    }
    Ok(())
}

fn grad_check_cmd(args: GradCheckArgs) -> Result<(), CliError> {
    let seed = resolve_seed(args.seed, None);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = DatasetParams {
        regime: Regime::Clean,
        pairs: 1,
        test_pairs: 0,
        points: args.points,
        rot_max_deg: 30.0,
        trans_max: 0.5,
        seed,
    };
    let (pairs, _) = generate_dataset(&params).map_err(val_err)?;
    let pair = pairs.into_iter().next().expect("one pair");

    let t_max = 100;
    let sched = NoiseSchedule::cosine(t_max).map_err(val_err)?;
    let (model, threshold) = match args.variant {
        VariantArg::Cf => (
            RegModel::Cf(CfModel::new(CFModelConfig::default(), t_max).map_err(val_err)?),
            args.threshold.unwrap_or(1e-4),
        ),
        VariantArg::Cb => (
            RegModel::Cb(CbModel::new(CBModelConfig::default(), t_max).map_err(val_err)?),
            args.threshold.unwrap_or(1e-3),
        ),
    };
    let mut store = ParamStore::new();
    model.register_params(&mut store, &mut rng).map_err(val_err)?;

    let repr = model.repr();
    let target = crate::regnet::target_vec(&pair.g_gt, repr).map_err(val_err)?;
    let t = t_max / 2;
    let eps: Vec<f64> =
        crate::diffusion::sample_standard_normal(&mut rng, repr.dim());
    let g_t = crate::diffusion::forward_sample_slice(&sched, &target, t, &eps)
        .map_err(val_err)?;

    let builder = {
        let pair = pair.clone();
        let target = target.clone();
        move |store: &ParamStore| -> Result<_, crate::regnet::ModelError> {
            let mut g = crate::nnkit::Graph::new();
            let pred = match &model {
                RegModel::Cf(m) => {
                    let preds = m.forward_batch(
                        &mut g,
                        store,
                        &[&pair.p],
                        &[&pair.q],
                        &[g_t.clone()],
                        &[t],
                    )?;
                    g.row(preds, 0)?
                }
                RegModel::Cb(m) => {
                    m.forward_pair_graph(&mut g, store, &pair.p, &pair.q, &g_t, t)?
                }
            };
            let vars = pair_loss_graph(&mut g, pred, &pair, &target, repr, (1.0, 1.0, 1.0))
                .map_err(|e| crate::regnet::ModelError::Config(e.to_string()))?;
            Ok((g, vars.total))
        }
    };
    let h = 1e-5;
    let err = grad_check(&builder, &mut store, h, args.samples, seed).map_err(val_err)?;
    println!(
        "grad-check variant={:?} points={} sampled={} h={h:e}: max relative error {err:.3e} (threshold {threshold:.1e})",
        args.variant, args.points, args.samples
    );
    if err > threshold {
        return Err(CliError::Validation(format!(
            "gradient check failed: {err:.3e} > {threshold:.1e}"
        )));
    }
    Ok(())
}
