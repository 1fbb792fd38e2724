use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufWriter};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use featgame::certify::{certify_safety, Verdict};
use featgame::features::{detect_keypoints, ScaleSpaceConfig};
use featgame::game::{Game, GameConfig, Goal, Player2Role};
use featgame::image::{distance, load_image, save_image, Image, ManipulationMode, NormOrder};
use featgame::mcts::{run_attack, trace_csv, Budget, SearchOptions, TerminationConditions};
use featgame::oracle::{
    estimate_confidence_gap, load_model, serve, BuiltInModel, ExternalOracle, Oracle, ServeFault,
};
use featgame::saliency::build_saliency;

#[derive(Parser)]
#[command(name = "featgame", version, about = "Feature-guided black-box robustness testing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search for a low-severity adversarial example.
    Attack(AttackArgs),
    /// Decide safety of an L1 neighbourhood via a tau-grid.
    Certify(CertifyArgs),
    /// Dump detected keypoints and optionally the saliency heatmap.
    Features(FeaturesArgs),
    /// Check that an external oracle speaks the wire protocol.
    OracleCheck(OracleCheckArgs),
    /// Serve a built-in model over the wire protocol on stdin/stdout.
    ReferenceOracle(ReferenceOracleArgs),
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct OracleSource {
    /// Built-in model file.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Command speaking the oracle protocol on stdin/stdout.
    #[arg(long)]
    oracle_cmd: Option<String>,
    /// HOST:PORT of an oracle speaking the protocol over TCP.
    #[arg(long)]
    oracle_tcp: Option<String>,
}

#[derive(Args)]
struct GameArgs {
    /// Distance norm: 0, 1, 2 or inf.
    #[arg(long, default_value = "0")]
    norm: NormOrder,
    /// Distance bound of the neighbourhood.
    #[arg(long, default_value_t = 10.0)]
    d: f64,
    /// Manipulation magnitude.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, default_value = "saturate")]
    mode: ManipulationMode,
    /// Target class for a targeted attack.
    #[arg(long, conflicts_with = "non_targeted")]
    target: Option<usize>,
    #[arg(long)]
    non_targeted: bool,
    /// Role of player II: coop, adv or nature.
    #[arg(long, default_value = "coop")]
    player2: Player2Role,
    #[arg(long, default_value_t = 1000)]
    max_depth: usize,
    /// Radius of a feature's pixel disc in units of its size.
    #[arg(long, default_value_t = 2.0)]
    radius_sigmas: f64,
}

impl GameArgs {
    fn config(&self, tau: f64) -> GameConfig {
        GameConfig {
            norm: self.norm,
            distance_bound: self.d,
            tau,
            mode: self.mode,
            goal: self.target.map_or(Goal::NonTargeted, Goal::Targeted),
            player2_role: self.player2,
            feature_radius_sigmas: self.radius_sigmas,
            max_depth: self.max_depth,
        }
    }
}

#[derive(Args)]
struct AttackArgs {
    /// Input image (PGM or PPM).
    image: PathBuf,
    #[command(flatten)]
    source: OracleSource,
    #[command(flatten)]
    game: GameArgs,
    /// Outer iterations (committed moves).
    #[arg(long)]
    tc1_iters: Option<u64>,
    #[arg(long)]
    tc1_secs: Option<f64>,
    /// Search rounds per committed move.
    #[arg(long)]
    tc2_iters: Option<u64>,
    #[arg(long)]
    tc2_secs: Option<f64>,
    /// Stop once the best severity is unimproved for ceil(1/epsilon) iterations.
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Oracle reply timeout in seconds.
    #[arg(long, default_value_t = 30.0)]
    oracle_timeout: f64,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct CertifyArgs {
    image: PathBuf,
    #[command(flatten)]
    source: OracleSource,
    #[command(flatten)]
    game: GameArgs,
    /// Lipschitz constant of the class confidences w.r.t. L1.
    #[arg(long)]
    hbar: Option<f64>,
    /// Minimum confidence gap across a class change.
    #[arg(long)]
    ell: Option<f64>,
    /// Images used to estimate ell when --ell is absent.
    #[arg(long, num_args = 1..)]
    dataset: Vec<PathBuf>,
    #[arg(long, default_value_t = 30.0)]
    oracle_timeout: f64,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct FeaturesArgs {
    image: PathBuf,
    /// Also write the saliency distribution as a PGM.
    #[arg(long)]
    heatmap: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct OracleCheckArgs {
    #[arg(long, required_unless_present = "oracle_tcp", conflicts_with = "oracle_tcp")]
    oracle_cmd: Option<String>,
    #[arg(long)]
    oracle_tcp: Option<String>,
    #[arg(long, default_value_t = 1)]
    width: usize,
    #[arg(long, default_value_t = 1)]
    height: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long, default_value_t = 30.0)]
    oracle_timeout: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    BadSum,
    WrongCount,
    BadToken,
}

#[derive(Args)]
struct ReferenceOracleArgs {
    #[arg(long)]
    model: PathBuf,
    /// Deliberately violate the protocol.
    #[arg(long)]
    fault: Option<FaultArg>,
}

enum LoadedOracle {
    BuiltIn(BuiltInModel),
    External(ExternalOracle),
}

impl LoadedOracle {
    fn as_oracle(&self) -> &dyn Oracle {
        match self {
            LoadedOracle::BuiltIn(m) => m,
            LoadedOracle::External(e) => e,
        }
    }
}

fn timeout(secs: f64) -> Result<Duration> {
    Duration::try_from_secs_f64(secs).with_context(|| format!("invalid oracle timeout {secs}"))
}

fn load_oracle(source: &OracleSource, secs: f64) -> Result<LoadedOracle> {
    if let Some(path) = &source.model {
        return Ok(LoadedOracle::BuiltIn(load_model(path)?));
    }
    if let Some(cmd) = &source.oracle_cmd {
        return Ok(LoadedOracle::External(ExternalOracle::spawn(cmd, timeout(secs)?)?));
    }
    if let Some(addr) = &source.oracle_tcp {
        return Ok(LoadedOracle::External(ExternalOracle::connect(addr, timeout(secs)?)?));
    }
    bail!("one of --model, --oracle-cmd or --oracle-tcp is required")
}

fn image_name(stem: &str, image: &Image) -> String {
    let ext = if image.channels() == 1 { "pgm" } else { "ppm" };
    format!("{stem}.{ext}")
}

fn budget(iters: Option<u64>, secs: Option<f64>, default_iters: u64) -> Budget {
    if iters.is_none() && secs.is_none() {
        Budget::iterations(default_iters)
    } else {
        Budget { iterations: iters, seconds: secs }
    }
}

fn cmd_attack(args: &AttackArgs) -> Result<ExitCode> {
    let image = load_image(&args.image)?;
    let oracle = load_oracle(&args.source, args.oracle_timeout)?;
    let keypoints = detect_keypoints(&image, &ScaleSpaceConfig::default())?;
    let config = args.game.config(args.game.tau.unwrap_or(1.0));
    let game = Game::new(image.clone(), oracle.as_oracle(), keypoints, config)?;
    let tcs = TerminationConditions {
        tc1: budget(args.tc1_iters, args.tc1_secs, 50),
        tc2: budget(args.tc2_iters, args.tc2_secs, 200),
        epsilon: args.epsilon,
    };
    let options = SearchOptions {
        threads: args.threads.max(1),
        ..SearchOptions::default()
    };
    let result = run_attack(&game, &tcs, options, args.seed)?;

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    fs::write(args.out.join("trace.csv"), trace_csv(&result.trace))?;
    let mut summary = String::new();
    writeln!(summary, "original_class={}", game.original_class())?;
    writeln!(summary, "found={}", result.best_image.is_some())?;
    if let Some(best) = &result.best_image {
        writeln!(summary, "adversarial_class={}", oracle.as_oracle().label(best)?)?;
        for (name, norm) in [
            ("l0", NormOrder::L0),
            ("l1", NormOrder::L1),
            ("l2", NormOrder::L2),
            ("linf", NormOrder::LInf),
        ] {
            writeln!(summary, "severity_{name}={}", distance(best, &image, norm)?)?;
        }
        let path = args.out.join(image_name("adversarial", best));
        save_image(best, &path)?;
        writeln!(summary, "adversarial={}", path.display())?;
    }
    writeln!(summary, "iterations={}", result.iterations_used)?;
    writeln!(summary, "simulations={}", result.total_simulations)?;
    writeln!(summary, "terminated_by={}", result.terminated_by)?;
    fs::write(args.out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(if result.best_image.is_some() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn cmd_certify(args: &CertifyArgs) -> Result<ExitCode> {
    let image = load_image(&args.image)?;
    let oracle = load_oracle(&args.source, args.oracle_timeout)?;
    let hbar = match (args.hbar, &oracle) {
        (Some(h), _) => h,
        (None, LoadedOracle::BuiltIn(m)) => m.lipschitz_bound_l1(),
        (None, LoadedOracle::External(_)) => bail!("--hbar is required with an external oracle"),
    };
    let ell = match args.ell {
        Some(l) => l,
        None if !args.dataset.is_empty() => {
            let mut images = vec![image.clone()];
            for path in &args.dataset {
                images.push(load_image(path)?);
            }
            let gap = estimate_confidence_gap(oracle.as_oracle(), &images)?;
            if gap.no_class_change {
                eprintln!("warning: no class change in the dataset, using ell = 1");
            }
            gap.ell
        }
        None => bail!("--ell or --dataset is required"),
    };
    // Default tau is the coarsest grid whose covering radius passes the check.
    let tau = args
        .game
        .tau
        .unwrap_or_else(|| (ell / (hbar * image.dims() as f64)).min(args.game.d.max(f64::MIN_POSITIVE)));
    let config = args.game.config(tau);
    let cert = certify_safety(&image, oracle.as_oracle(), &config, hbar, ell)?;

    println!("Safety certificate for {}", args.image.display());
    println!("  neighbourhood: L{} ball of radius {}", config.norm, config.distance_bound);
    println!("  hbar = {hbar}, ell = {ell}");
    println!("  verdict: {} ({})", cert.verdict, cert.rationale);
    print!("{}", cert.key_values());
    if let Some(witness) = &cert.witness {
        fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
        let path = args.out.join(image_name("witness", witness));
        save_image(witness, &path)?;
        println!("witness={}", path.display());
    }
    Ok(match cert.verdict {
        Verdict::Safe => ExitCode::SUCCESS,
        Verdict::Unsafe => ExitCode::from(2),
        Verdict::Inconclusive => ExitCode::from(3),
    })
}

fn cmd_features(args: &FeaturesArgs) -> Result<ExitCode> {
    let image = load_image(&args.image)?;
    let keypoints = detect_keypoints(&image, &ScaleSpaceConfig::default())?;
    let mut csv = String::from("x,y,size,response\n");
    for k in &keypoints {
        writeln!(csv, "{},{},{},{}", k.x, k.y, k.size, k.response)?;
    }
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    fs::write(args.out.join("keypoints.csv"), csv)?;
    if let Some(path) = &args.heatmap {
        let saliency = build_saliency(&keypoints, image.width(), image.height())?;
        save_image(&saliency.heatmap(), path)?;
    }
    println!("{} keypoints", keypoints.len());
    Ok(ExitCode::SUCCESS)
}

fn cmd_oracle_check(args: &OracleCheckArgs) -> Result<ExitCode> {
    let source = OracleSource {
        model: None,
        oracle_cmd: args.oracle_cmd.clone(),
        oracle_tcp: args.oracle_tcp.clone(),
    };
    let oracle = load_oracle(&source, args.oracle_timeout)?;
    let zeros = Image::filled(args.width, args.height, args.channels, 0.0)?;
    let probs = oracle.as_oracle().classify(&zeros)?;
    println!(
        "ok: {} classes, label {} for the all-zeros {}x{}x{} image",
        probs.class_count(),
        probs.argmax(),
        args.width,
        args.height,
        args.channels
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_reference_oracle(args: &ReferenceOracleArgs) -> Result<ExitCode> {
    let model = load_model(&args.model)?;
    let fault = args.fault.map(|f| match f {
        FaultArg::BadSum => ServeFault::BadSum,
        FaultArg::WrongCount => ServeFault::WrongCount,
        FaultArg::BadToken => ServeFault::BadToken,
    });
    let stdin = io::stdin();
    serve(&model, fault, stdin.lock(), BufWriter::new(io::stdout().lock()))?;
    Ok(ExitCode::SUCCESS)
}

fn run(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Attack(a) => cmd_attack(a),
        Command::Certify(a) => cmd_certify(a),
        Command::Features(a) => cmd_features(a),
        Command::OracleCheck(a) => cmd_oracle_check(a),
        Command::ReferenceOracle(a) => cmd_reference_oracle(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
