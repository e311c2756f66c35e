//! `tenrpca` command-line tool.
//!
//! Exit codes: 0 on success, 1 on runtime errors, 2 on usage or shape errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tenrpca::ablation::{
    build_fixture, input_quality, module_toggles, modules_csv, stage_plot_svg, stage_sweep, stages_csv,
    AblationConfig, Variant,
};
use tenrpca::checkpoint::{load_store, save_store};
use tenrpca::cube::{read_cube, write_cube};
use tenrpca::metrics::quality;
use tenrpca::noise::{apply_noise_with_report, NoiseKind, NoiseSpec, Sigma};
use tenrpca::phantom::smooth_phantom;
use tenrpca::trpca::{default_lambda, trpca_solve, TrpcaConfig};
use tenrpca::unfolding::{default_rank, train, RunConfig, TrainingSample, UnfoldingNet};
use tenrpca::Error;

#[derive(Parser, Debug)]
#[command(name = "tenrpca", version, about = "Tensor robust PCA and unfolded denoising for hyperspectral cubes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Degrade a clean cube with synthetic noise.
    Synthesize(SynthesizeArgs),
    /// Split a cube into low-rank and sparse parts.
    Trpca(TrpcaArgs),
    /// Train the unfolded network on noisy/clean cube pairs.
    Train(TrainArgs),
    /// Denoise a cube with a trained checkpoint.
    Denoise(DenoiseArgs),
    /// Print PSNR, SSIM and SAM of an estimate as a CSV row.
    Eval(EvalArgs),
    /// Run the stage-count sweep and module comparison.
    Ablate(AblateArgs),
    /// Write a smooth synthetic clean cube.
    Phantom(PhantomArgs),
}

#[derive(Args, Debug)]
struct SynthesizeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// TOML file with noise settings; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    kind: Option<NoiseKind>,
    /// Fixed noise level in 0–255 units.
    #[arg(long, conflicts_with_all = ["sigma_min", "sigma_max"])]
    sigma: Option<f64>,
    #[arg(long, requires = "sigma_max")]
    sigma_min: Option<f64>,
    #[arg(long, requires = "sigma_min")]
    sigma_max: Option<f64>,
    #[arg(long)]
    band_fraction: Option<f64>,
    #[arg(long)]
    column_fraction: Option<f64>,
    #[arg(long)]
    impulse_prob: Option<f64>,
    #[arg(long)]
    stripe_amplitude: Option<f64>,
    #[arg(long)]
    deadline_max_width: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrpcaArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out_low: PathBuf,
    #[arg(long)]
    out_sparse: PathBuf,
    /// Sparsity weight; defaults to 1/sqrt(max(n1, n2)·n3).
    #[arg(long)]
    lambda: Option<f64>,
    /// Overall penalty scale: λ_L = mu, λ_S = mu·λ.
    #[arg(long, default_value_t = 0.1)]
    mu: f64,
    #[arg(long, default_value_t = TrpcaConfig::DEFAULT_MAX_ITERS)]
    max_iters: usize,
    #[arg(long, default_value_t = TrpcaConfig::DEFAULT_TOL)]
    tol: f64,
    /// Fail when the solver hits max_iters without converging.
    #[arg(long)]
    strict: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Directory of `<name>.noisy.cube` / `<name>.clean.cube` pairs.
    #[arg(long)]
    data: PathBuf,
    /// TOML file with `[model]` and `[train]` tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Training log; defaults to the checkpoint path with `.log.csv` appended.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DenoiseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// The resolved configuration written next to the checkpoint by `train`.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    estimate: PathBuf,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct PhantomArgs {
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 32)]
    n1: usize,
    #[arg(long, default_value_t = 32)]
    n2: usize,
    #[arg(long, default_value_t = 31)]
    n3: usize,
    #[arg(long, default_value_t = 3)]
    materials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::ShapeMismatch(_)
        | Error::InvalidDims(_)
        | Error::InvalidRank { .. }
        | Error::WindowTooLarge { .. }
        | Error::DataShapeMismatch(_)
        | Error::Config(_) => 2,
        _ => 1,
    }
}

fn read_text(path: &Path) -> Result<String, Error> {
    Ok(std::fs::read_to_string(path)?)
}

fn synthesize(args: SynthesizeArgs) -> Result<(), Error> {
    let mut spec = match &args.config {
        Some(p) => NoiseSpec::from_toml(&read_text(p)?)?,
        None => NoiseSpec::default(),
    };
    if let Some(k) = args.kind {
        spec.kind = k;
    }
    if let Some(s) = args.sigma {
        spec.sigma = Some(Sigma::Fixed(s));
    }
    if let (Some(lo), Some(hi)) = (args.sigma_min, args.sigma_max) {
        spec.sigma = Some(Sigma::Range([lo, hi]));
    }
    if let Some(v) = args.band_fraction {
        spec.band_fraction = v;
    }
    if let Some(v) = args.column_fraction {
        spec.column_fraction = v;
    }
    if let Some(v) = args.impulse_prob {
        spec.impulse_prob = v;
    }
    if let Some(v) = args.stripe_amplitude {
        spec.stripe_amplitude = v;
    }
    if let Some(v) = args.deadline_max_width {
        spec.deadline_max_width = v;
    }
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    let clean = read_cube(&args.input)?;
    let (noisy, report) = apply_noise_with_report(&clean, &spec)?;
    write_cube(&args.output, &noisy)?;
    println!("kind = {}", spec.kind);
    println!("seed = {}", spec.seed);
    println!("{report}");
    Ok(())
}

fn run_trpca(args: TrpcaArgs) -> Result<bool, Error> {
    let x = read_cube(&args.input)?;
    let (n1, n2, n3) = x.dims();
    let lambda = args.lambda.unwrap_or_else(|| default_lambda(n1, n2, n3));
    let cfg = TrpcaConfig {
        max_iters: args.max_iters,
        tol: args.tol,
        ..TrpcaConfig::scaled(lambda, args.mu)
    };
    let res = trpca_solve(&x, &cfg)?;
    write_cube(&args.out_low, &res.low_rank)?;
    write_cube(&args.out_sparse, &res.sparse)?;
    println!("iterations = {}", res.iters);
    println!("converged = {}", res.converged);
    let tail: Vec<String> = res
        .residual_history
        .iter()
        .rev()
        .take(5)
        .rev()
        .map(|r| format!("{r:.3e}"))
        .collect();
    println!("residual_tail = [{}]", tail.join(", "));
    if args.strict && !res.converged {
        eprintln!("error: no convergence within {} iterations", cfg.max_iters);
        return Ok(false);
    }
    Ok(true)
}

fn load_pairs(dir: &Path) -> Result<Vec<TrainingSample>, Error> {
    let mut names: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".noisy.cube")).map(str::to_owned))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::DataShapeMismatch(format!(
            "no `<name>.noisy.cube` files in {}",
            dir.display()
        )));
    }
    names
        .iter()
        .map(|n| {
            let noisy = read_cube(dir.join(format!("{n}.noisy.cube")))?;
            let clean = read_cube(dir.join(format!("{n}.clean.cube")))?;
            TrainingSample::new(noisy, clean)
        })
        .collect()
}

fn run_train(args: TrainArgs) -> Result<(), Error> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::from_toml(&read_text(p)?)?,
        None => RunConfig::default(),
    };
    let data = load_pairs(&args.data)?;
    let (n1, n2, _) = data[0].noisy.dims();
    cfg.model.rank.get_or_insert(default_rank(n1, n2));
    let mut net = UnfoldingNet::new(cfg.model.clone())?;
    let log = train(&mut net, &data, &[], &cfg.train)?;
    save_store(&args.out, &net.store)?;
    let log_path = args.log.unwrap_or_else(|| suffixed(&args.out, ".log.csv"));
    std::fs::write(&log_path, log.to_csv()?)?;
    std::fs::write(suffixed(&args.out, ".toml"), cfg.to_toml()?)?;
    println!("samples = {}", data.len());
    println!("steps = {}", log.records.len());
    if let Some(last) = log.records.last() {
        println!("final_loss = {}", last.loss);
    }
    Ok(())
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn run_denoise(args: DenoiseArgs) -> Result<(), Error> {
    let cfg = RunConfig::from_toml(&read_text(&args.config)?)?;
    let mut net = UnfoldingNet::new(cfg.model)?;
    load_store(&args.checkpoint, &mut net.store)?;
    let y = read_cube(&args.input)?;
    write_cube(&args.output, &net.denoise(&y)?)?;
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<(), Error> {
    let reference = read_cube(&args.reference)?;
    let estimate = read_cube(&args.estimate)?;
    let q = quality(&reference, &estimate)?;
    let mut w = csv::Writer::from_writer(std::io::stdout());
    let io = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(["psnr", "ssim", "sam"]).map_err(io)?;
    w.serialize((q.psnr, q.ssim, q.sam)).map_err(io)?;
    w.flush()?;
    Ok(())
}

fn run_ablate(args: AblateArgs) -> Result<(), Error> {
    let mut cfg = match &args.config {
        Some(p) => AblationConfig::from_toml(&read_text(p)?)?,
        None => AblationConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    std::fs::create_dir_all(&args.out)?;
    let fixture = build_fixture(&cfg)?;
    let noisy = input_quality(&fixture)?;
    println!("input_psnr = {:.4}", noisy.psnr);
    let stages = stage_sweep(&cfg, &fixture)?;
    std::fs::write(args.out.join("stages.csv"), stages_csv(&stages)?)?;
    std::fs::write(args.out.join("stages.svg"), stage_plot_svg(&stages))?;
    let modules = module_toggles(&cfg, &fixture, &Variant::ALL)?;
    std::fs::write(args.out.join("modules.csv"), modules_csv(&modules)?)?;
    for r in &stages {
        println!("stages {} psnr = {:.4}", r.stages, r.quality.psnr);
    }
    for r in &modules {
        println!("{} psnr = {:.4}", r.variant.name(), r.quality.psnr);
    }
    Ok(())
}

fn run_phantom(args: PhantomArgs) -> Result<(), Error> {
    if args.n1 == 0 || args.n2 == 0 || args.n3 == 0 {
        return Err(Error::InvalidDims(format!("{}x{}x{}", args.n1, args.n2, args.n3)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let cube = smooth_phantom(args.n1, args.n2, args.n3, args.materials, &mut rng);
    write_cube(&args.output, &cube)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synthesize(a) => synthesize(a).map(|_| true),
        Command::Trpca(a) => run_trpca(a),
        Command::Train(a) => run_train(a).map(|_| true),
        Command::Denoise(a) => run_denoise(a).map(|_| true),
        Command::Eval(a) => run_eval(a).map(|_| true),
        Command::Ablate(a) => run_ablate(a).map(|_| true),
        Command::Phantom(a) => run_phantom(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
