use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use vslab::dataset::{generate_dataset_with, load_dataset, save_dataset, DatasetKind, GenConfig};
use vslab::eval::{
    draw_experiment, emit_outputs, intrinsics_for, run_batch, Contender, EvalOptions, Scenario, DEFAULT_RUNS,
    FULL_RUNS,
};
use vslab::scene::{make_scene, CameraIntrinsics, DrConfig};
use vslab::servo::{run_servo, PolicyKind, ServoConfig, SwitchPolicy};
use vslab::tensornet::MetaMode;
use vslab::train::{build_bundle, MamlConfig, Regime, TrainConfig, TrainedBundle};

#[derive(Parser)]
#[command(name = "vslab", version, about = "Desk-scale visual servoing with switching pose networks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate an LSD or SSD image-pair dataset
    GenData(GenDataArgs),
    /// Train the models of one regime into a bundle
    Train(TrainArgs),
    /// Run one servo experiment and write its trace
    Servo(ServoArgs),
    /// Paired batch comparison of several bundles
    Eval(EvalArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Lsd,
    Ssd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Proximal,
    Distal,
}

impl From<ScenarioArg> for Scenario {
    fn from(s: ScenarioArg) -> Self {
        match s {
            ScenarioArg::Proximal => Scenario::Proximal,
            ScenarioArg::Distal => Scenario::Distal,
        }
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, value_enum)]
    kind: KindArg,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    no_texture: bool,
    #[arg(long)]
    no_distractors: bool,
    #[arg(long)]
    no_lighting: bool,
    /// Square image size in pixels
    #[arg(long, default_value_t = vslab::tensornet::DEFAULT_RESOLUTION)]
    resolution: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    regime: String,
    #[arg(long)]
    lsd: PathBuf,
    #[arg(long)]
    ssd: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Treat the inner gradient as constant in the meta-update
    #[arg(long)]
    first_order: bool,
    /// Training log CSV (default: <out>.log.csv)
    #[arg(long)]
    log: Option<PathBuf>,
    /// Use the full-length schedule instead of the desk one
    #[arg(long)]
    full_schedule: bool,
    #[arg(long)]
    epochs_main: Option<usize>,
    #[arg(long)]
    epochs_fine: Option<usize>,
    #[arg(long)]
    meta_iterations: Option<usize>,
}

#[derive(Args)]
struct ServoArgs {
    /// Required unless the policy is `oracle`
    #[arg(long)]
    bundle: Option<PathBuf>,
    /// oracle | single-lsd | single-ssd | mse:THRESH | cls
    #[arg(long)]
    policy: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, value_enum, default_value = "distal")]
    scenario: ScenarioArg,
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_enum)]
    scenario: ScenarioArg,
    #[arg(long)]
    n: Option<usize>,
    /// Run the full-size batch
    #[arg(long)]
    full: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated bundle paths
    #[arg(long, value_delimiter = ',')]
    bundles: Vec<PathBuf>,
    /// Add the ground-truth oracle as a contender
    #[arg(long)]
    oracle: bool,
    #[arg(long)]
    no_traces: bool,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::Train(a) => train(a),
        Cmd::Servo(a) => servo(a),
        Cmd::Eval(a) => eval(a),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let kind = match a.kind {
        KindArg::Lsd => DatasetKind::Lsd,
        KindArg::Ssd => DatasetKind::Ssd,
    };
    let dr = DrConfig {
        randomize_texture: !a.no_texture,
        include_distractors: !a.no_distractors,
        randomize_lighting: !a.no_lighting,
    };
    let gen = GenConfig {
        intrinsics: CameraIntrinsics::square(a.resolution),
        ..GenConfig::default()
    };
    let d = generate_dataset_with(kind, a.n, a.seed, dr, &gen)?;
    save_dataset(&d, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!("{} samples of {} ({}) -> {}", d.len(), kind.label(), dr.name(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let Some(regime) = Regime::from_name(&a.regime) else {
        bail!("unknown regime {:?}", a.regime);
    };
    let lsd = load_dataset(&a.lsd).with_context(|| format!("reading {}", a.lsd.display()))?;
    let ssd = load_dataset(&a.ssd).with_context(|| format!("reading {}", a.ssd.display()))?;
    let (mut cfg, mut mcfg) = if a.full_schedule {
        (TrainConfig::default(), MamlConfig::default())
    } else {
        (TrainConfig::desk(), MamlConfig::desk())
    };
    cfg.master_seed = a.seed;
    if let Some(e) = a.epochs_main {
        cfg.epochs_main = e;
    }
    if let Some(e) = a.epochs_fine {
        cfg.epochs_fine = e;
    }
    if let Some(i) = a.meta_iterations {
        mcfg.iterations = i;
    }
    if a.first_order {
        mcfg.mode = MetaMode::FirstOrder;
    }
    let bundle = build_bundle(regime, &lsd, &ssd, &cfg, &mcfg)?;
    bundle.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let log_path = a.log.unwrap_or_else(|| suffixed(&a.out, ".log.csv"));
    fs::write(&log_path, bundle.log.to_csv()).with_context(|| format!("writing {}", log_path.display()))?;
    println!(
        "{}: {} model(s), {} bytes -> {}",
        regime.name(),
        bundle.models.len(),
        bundle.to_bytes().len(),
        a.out.display()
    );
    Ok(())
}

fn suffixed(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn servo(a: ServoArgs) -> Result<()> {
    let kind: PolicyKind = a.policy.parse()?;
    let bundle = match &a.bundle {
        Some(p) => Some(TrainedBundle::load(p).with_context(|| format!("reading {}", p.display()))?),
        None if matches!(kind, PolicyKind::Oracle) => None,
        None => bail!("--bundle is required for policy {:?}", a.policy),
    };
    let mut cfg = ServoConfig::default();
    if let Some(m) = a.max_steps {
        cfg.max_steps = m;
    }
    let opts = EvalOptions::default();
    let exp = draw_experiment(a.scenario.into(), a.seed, 0, &opts)?;
    let scene = make_scene(exp.scene_seed, opts.dr);
    let trace = run_servo(
        &scene,
        &exp.goal,
        &exp.start,
        bundle.as_ref(),
        SwitchPolicy::new(kind)?,
        &intrinsics_for(bundle.as_ref()),
        &cfg,
    )?;
    fs::write(&a.trace, trace.to_csv()).with_context(|| format!("writing {}", a.trace.display()))?;
    println!(
        "steps {} final pos err {:.6e} m rot err {:.6e} rad{}",
        trace.steps_used(),
        trace.final_pos_err,
        trace.final_rot_err,
        trace.failure.as_deref().map(|f| format!(" (failed: {f})")).unwrap_or_default()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let n = match (a.full, a.n) {
        (true, Some(_)) => bail!("--full and --n are exclusive"),
        (true, None) => FULL_RUNS,
        (false, n) => n.unwrap_or(DEFAULT_RUNS),
    };
    let mut contenders = Vec::new();
    if a.oracle {
        contenders.push(Contender::oracle());
    }
    for p in &a.bundles {
        let b = TrainedBundle::load(p).with_context(|| format!("reading {}", p.display()))?;
        let mut c = Contender::from_bundle(b);
        let base = c.name.clone();
        let mut k = 2;
        while contenders.iter().any(|o: &Contender| o.name == c.name) {
            c.name = format!("{base}-{k}");
            k += 1;
        }
        contenders.push(c);
    }
    if contenders.is_empty() {
        bail!("nothing to evaluate: pass --bundles and/or --oracle");
    }
    let opts = EvalOptions {
        keep_traces: !a.no_traces,
        ..EvalOptions::default()
    };
    let r = run_batch(&contenders, a.scenario.into(), n, a.seed, &opts)?;
    let files = emit_outputs(&r.rows, &r.runs, &r.traces, &a.out)?;
    println!("{:<18} {:>10} {:>24} {:>24} {:>5}", "regime", "bytes", "pos err m", "rot err rad", "fail");
    for row in &r.rows {
        println!(
            "{:<18} {:>10} {:>11.4e} ± {:<10.4e} {:>11.4e} ± {:<10.4e} {:>5}",
            row.regime, row.model_bytes, row.pos_mean, row.pos_std, row.rot_mean, row.rot_std, row.failures
        );
    }
    println!("{} files written to {}", files.len(), a.out.display());
    Ok(())
}
