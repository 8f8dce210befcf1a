//! Batch servo experiments: paired scenario comparisons, the
//! domain-randomization ablation, and CSV / raster plot output.
//!
//! Every contender in a batch sees the same experiments: experiment `i`
//! draws its scene, goal and start offset from `Stream(seed) → "eval" →
//! scenario → i`, independent of which bundle is being evaluated.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng as _;

use crate::dataset::{generate_dataset_with, sample_component, DatasetKind, GenConfig, OffsetLimits, Sampler, MAX_RETRIES};
use crate::error::{Error, Result};
use crate::geometry::{compose, Pose, ThetaU, Vec3};
use crate::rng::Stream;
use crate::scene::{check_view, fronto_parallel, make_scene, write_png, CameraIntrinsics, DrConfig};
use crate::servo::{run_servo, ServoConfig, ServoTrace, SwitchPolicy};
use crate::train::{build_bundle, MamlConfig, Regime, TrainConfig, TrainedBundle};

/// Desk default for experiments per scenario.
pub const DEFAULT_RUNS: usize = 30;
/// Full-size experiment count.
pub const FULL_RUNS: usize = 100;

/// Start-offset ranges of the two evaluation scenarios.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scenario {
    Proximal,
    Distal,
}

impl Scenario {
    pub const ALL: [Scenario; 2] = [Scenario::Proximal, Scenario::Distal];

    pub const PROXIMAL_LIMITS: OffsetLimits = OffsetLimits {
        xy_translation: 0.15,
        z_translation: 0.10,
        xy_rotation: 0.07,
        z_rotation: 0.15,
    };
    pub const DISTAL_LIMITS: OffsetLimits = OffsetLimits {
        xy_translation: 0.30,
        z_translation: 0.20,
        xy_rotation: 0.15,
        z_rotation: 0.40,
    };

    pub fn limits(self) -> OffsetLimits {
        match self {
            Scenario::Proximal => Self::PROXIMAL_LIMITS,
            Scenario::Distal => Self::DISTAL_LIMITS,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Proximal => "proximal",
            Scenario::Distal => "distal",
        }
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proximal" => Ok(Scenario::Proximal),
            "distal" => Ok(Scenario::Distal),
            _ => Err(Error::InvalidConfig(format!("unknown scenario {s:?} (proximal|distal)"))),
        }
    }
}

/// Checks the scenario constants against the literal published values,
/// in label order `(tx, ty, tz, ux, uy, uz)`.
pub fn check_scenario_constants() -> Result<()> {
    let want = [
        (Scenario::Proximal, [0.15, 0.15, 0.10, 0.07, 0.07, 0.15]),
        (Scenario::Distal, [0.30, 0.30, 0.20, 0.15, 0.15, 0.40]),
    ];
    for (s, b) in want {
        if s.limits().bounds() != b {
            return Err(Error::InvalidConfig(format!("{} limits drifted: {:?}", s.name(), s.limits())));
        }
    }
    Ok(())
}

/// Something that can drive the servo loop: a trained bundle, or the
/// ground-truth oracle when `bundle` is `None`.
#[derive(Clone, Debug)]
pub struct Contender {
    pub name: String,
    pub bundle: Option<TrainedBundle>,
}

impl Contender {
    pub fn oracle() -> Self {
        Self {
            name: "oracle".into(),
            bundle: None,
        }
    }

    pub fn from_bundle(bundle: TrainedBundle) -> Self {
        Self {
            name: bundle.regime.name().into(),
            bundle: Some(bundle),
        }
    }

    pub fn named(name: impl Into<String>, bundle: TrainedBundle) -> Self {
        Self {
            name: name.into(),
            bundle: Some(bundle),
        }
    }

    /// Size of the serialized bundle, which is what `save` writes.
    pub fn model_bytes(&self) -> u64 {
        self.bundle.as_ref().map_or(0, |b| b.to_bytes().len() as u64)
    }

    fn intrinsics(&self) -> CameraIntrinsics {
        intrinsics_for(self.bundle.as_ref())
    }

    fn policy(&self) -> Result<SwitchPolicy> {
        match &self.bundle {
            Some(b) => SwitchPolicy::default_for(b),
            None => SwitchPolicy::new(crate::servo::PolicyKind::Oracle),
        }
    }
}

/// Camera matching a bundle's input resolution; the default camera for
/// the oracle.
pub fn intrinsics_for(bundle: Option<&TrainedBundle>) -> CameraIntrinsics {
    match bundle {
        Some(b) => {
            let c = &b.models[0].config;
            let mut i = CameraIntrinsics::square(c.width);
            if c.height != c.width {
                i.height = c.height;
                i.principal[1] = c.height as f64 / 2.0;
            }
            i
        }
        None => CameraIntrinsics::default(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub servo: ServoConfig,
    /// Randomization of the evaluation scenes.
    pub dr: DrConfig,
    /// Nominal goal height above the target, meters.
    pub height: f64,
    /// Uniform lateral jitter of the goal, meters.
    pub lateral_jitter: f64,
    pub keep_traces: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        let g = GenConfig::default();
        Self {
            servo: ServoConfig::default(),
            dr: DrConfig::full(),
            height: g.height,
            lateral_jitter: g.lateral_jitter,
            keep_traces: true,
        }
    }
}

/// One drawn experiment. `offset` is the start pose in the goal frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Experiment {
    pub index: usize,
    pub scene_seed: u64,
    pub goal: Pose,
    pub offset: [f64; 6],
    pub start: Pose,
}

/// Draws experiment `index`. Start offsets are uniform per component
/// within the scenario limits; draws whose start view is invalid are
/// redrawn with the next attempt counter.
pub fn draw_experiment(scenario: Scenario, master_seed: u64, index: usize, opts: &EvalOptions) -> Result<Experiment> {
    let base = Stream::from_seed(master_seed)
        .derive("eval")
        .derive(scenario.name())
        .derive_index(index as u64);
    let b = scenario.limits().bounds();
    for attempt in 0..MAX_RETRIES as u64 {
        let mut s = base.derive_index(attempt);
        let scene_seed = s.next_seed();
        let j = opts.lateral_jitter;
        let (jx, jy) = if j > 0.0 {
            (s.random_range(-j..=j), s.random_range(-j..=j))
        } else {
            (0.0, 0.0)
        };
        let goal = fronto_parallel(jx, jy, opts.height);
        let mut c = [0.0; 6];
        for k in 0..6 {
            c[k] = sample_component(b[k], Sampler::Uniform, &mut s);
        }
        let off = Pose::from_thetau(Vec3::new(c[0], c[1], c[2]), &ThetaU::wrapped(Vec3::new(c[3], c[4], c[5])));
        let start = compose(&goal, &off);
        if check_view(&goal).is_ok() && check_view(&start).is_ok() {
            return Ok(Experiment {
                index,
                scene_seed,
                goal,
                offset: c,
                start,
            });
        }
    }
    Err(Error::RejectionExhausted(MAX_RETRIES))
}

/// Outcome of one contender on one experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub contender: String,
    pub index: usize,
    pub offset: [f64; 6],
    pub final_pos_err: f64,
    pub final_rot_err: f64,
    pub steps: usize,
    pub failed: bool,
}

/// Aggregate over one contender's runs. Rotation error is ‖θu‖ of the
/// final relative rotation. Standard deviations are population ones.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub regime: String,
    pub model_bytes: u64,
    pub pos_mean: f64,
    pub pos_std: f64,
    pub rot_mean: f64,
    pub rot_std: f64,
    pub runs: usize,
    pub failures: usize,
}

#[derive(Clone, Debug)]
pub struct TraceEntry {
    pub contender: String,
    pub index: usize,
    pub trace: ServoTrace,
}

#[derive(Clone, Debug)]
pub struct BatchResult {
    pub scenario: Scenario,
    pub rows: Vec<ComparisonRow>,
    pub runs: Vec<RunRecord>,
    pub traces: Vec<TraceEntry>,
}

impl BatchResult {
    pub fn row(&self, name: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.regime == name)
    }
}

/// Population mean and standard deviation, summed in slice order.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn aggregate(name: &str, model_bytes: u64, runs: &[RunRecord]) -> ComparisonRow {
    let pos: Vec<f64> = runs.iter().map(|r| r.final_pos_err).collect();
    let rot: Vec<f64> = runs.iter().map(|r| r.final_rot_err).collect();
    let (pos_mean, pos_std) = mean_std(&pos);
    let (rot_mean, rot_std) = mean_std(&rot);
    ComparisonRow {
        regime: name.into(),
        model_bytes,
        pos_mean,
        pos_std,
        rot_mean,
        rot_std,
        runs: runs.len(),
        failures: runs.iter().filter(|r| r.failed).count(),
    }
}

/// Runs `n` paired experiments for every contender. Experiments are
/// spread over the available cores; results are collected in experiment
/// order, so output does not depend on the thread count.
pub fn run_batch(
    contenders: &[Contender],
    scenario: Scenario,
    n: usize,
    master_seed: u64,
    opts: &EvalOptions,
) -> Result<BatchResult> {
    check_scenario_constants()?;
    opts.servo.validate()?;
    if n == 0 {
        return Err(Error::InvalidConfig("at least one experiment is required".into()));
    }
    if contenders.is_empty() {
        return Err(Error::InvalidConfig("no contenders to evaluate".into()));
    }
    for (i, c) in contenders.iter().enumerate() {
        if contenders[..i].iter().any(|o| o.name == c.name) {
            return Err(Error::InvalidConfig(format!("duplicate contender name {:?}", c.name)));
        }
        if let Some(b) = &c.bundle {
            b.validate()?;
        }
    }
    let experiments = (0..n)
        .map(|i| draw_experiment(scenario, master_seed, i, opts))
        .collect::<Result<Vec<_>>>()?;

    let workers = std::thread::available_parallelism().map_or(1, |p| p.get()).min(n);
    let mut slots: Vec<Option<Result<Vec<ServoTrace>>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|sc| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let experiments = &experiments;
                sc.spawn(move || {
                    (w..n)
                        .step_by(workers)
                        .map(|i| (i, run_experiment(contenders, &experiments[i], opts)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("experiment worker panicked") {
                slots[i] = Some(r);
            }
        }
    });

    let mut per: Vec<Vec<RunRecord>> = vec![Vec::with_capacity(n); contenders.len()];
    let mut traces = Vec::new();
    for (exp, slot) in experiments.iter().zip(slots) {
        let results = slot.expect("every experiment ran")?;
        for (k, (c, trace)) in contenders.iter().zip(results).enumerate() {
            per[k].push(RunRecord {
                contender: c.name.clone(),
                index: exp.index,
                offset: exp.offset,
                final_pos_err: trace.final_pos_err,
                final_rot_err: trace.final_rot_err,
                steps: trace.steps_used(),
                failed: trace.failed,
            });
            if opts.keep_traces {
                traces.push(TraceEntry {
                    contender: c.name.clone(),
                    index: exp.index,
                    trace,
                });
            }
        }
    }
    traces.sort_by(|a, b| {
        let ka = contenders.iter().position(|c| c.name == a.contender);
        let kb = contenders.iter().position(|c| c.name == b.contender);
        ka.cmp(&kb).then(a.index.cmp(&b.index))
    });
    let rows = contenders
        .iter()
        .zip(&per)
        .map(|(c, runs)| aggregate(&c.name, c.model_bytes(), runs))
        .collect();
    Ok(BatchResult {
        scenario,
        rows,
        runs: per.into_iter().flatten().collect(),
        traces,
    })
}

fn run_experiment(contenders: &[Contender], exp: &Experiment, opts: &EvalOptions) -> Result<Vec<ServoTrace>> {
    let scene = make_scene(exp.scene_seed, opts.dr);
    contenders
        .iter()
        .map(|c| {
            run_servo(
                &scene,
                &exp.goal,
                &exp.start,
                c.bundle.as_ref(),
                c.policy()?,
                &c.intrinsics(),
                &opts.servo,
            )
        })
        .collect()
}

/// Training and evaluation settings for [`ablation_batch`].
#[derive(Clone, Copy, Debug)]
pub struct AblationSetup {
    /// Samples per dataset kind.
    pub n_train: usize,
    pub gen: GenConfig,
    pub train: TrainConfig,
    pub maml: MamlConfig,
    /// Evaluation options; scenes are always fully randomized.
    pub eval: EvalOptions,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub row: ComparisonRow,
}

/// Trains one `regime` bundle per randomization variant on data generated
/// with that variant, then evaluates every bundle on the same fully
/// randomized experiments.
pub fn ablation_batch(
    variants: &[DrConfig],
    regime: Regime,
    scenario: Scenario,
    n: usize,
    seed: u64,
    setup: &AblationSetup,
) -> Result<Vec<AblationRow>> {
    if variants.is_empty() {
        return Err(Error::InvalidConfig("no randomization variants".into()));
    }
    for (i, v) in variants.iter().enumerate() {
        if variants[..i].contains(v) {
            return Err(Error::InvalidConfig(format!("duplicate variant {}", v.name())));
        }
    }
    let mut contenders = Vec::with_capacity(variants.len());
    for v in variants {
        let lsd = generate_dataset_with(DatasetKind::Lsd, setup.n_train, seed, *v, &setup.gen)?;
        let ssd = generate_dataset_with(DatasetKind::Ssd, setup.n_train, seed, *v, &setup.gen)?;
        let bundle = build_bundle(regime, &lsd, &ssd, &setup.train.with_seed(seed), &setup.maml)?;
        contenders.push(Contender::named(variant_label(v), bundle));
    }
    let opts = EvalOptions {
        dr: DrConfig::full(),
        keep_traces: false,
        ..setup.eval
    };
    let batch = run_batch(&contenders, scenario, n, seed, &opts)?;
    Ok(variants
        .iter()
        .zip(batch.rows)
        .map(|(v, mut row)| {
            row.regime = regime.name().into();
            AblationRow {
                variant: variant_label(v),
                row,
            }
        })
        .collect())
}

fn variant_label(v: &DrConfig) -> String {
    match v.name() {
        "custom" => format!(
            "custom-t{}d{}l{}",
            v.randomize_texture as u8, v.include_distractors as u8, v.randomize_lighting as u8
        ),
        n => n.into(),
    }
}

/// Shortest text that still parses back to the same `f64`: 17
/// significant digits.
fn num(x: f64) -> String {
    format!("{x:.16e}")
}

pub const COMPARISON_HEADER: &str = "regime,model_bytes,runs,failures,pos_err_m_mean,pos_err_m_std,rot_err_thetau_norm_rad_mean,rot_err_thetau_norm_rad_std";

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut s = String::from(COMPARISON_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.regime,
            r.model_bytes,
            r.runs,
            r.failures,
            num(r.pos_mean),
            num(r.pos_std),
            num(r.rot_mean),
            num(r.rot_std)
        );
    }
    s
}

pub fn runs_csv(runs: &[RunRecord]) -> String {
    let mut s = String::from("regime,run,off_tx,off_ty,off_tz,off_ux,off_uy,off_uz,final_pos_err_m,final_rot_err_rad,steps,failed\n");
    for r in runs {
        let _ = write!(s, "{},{}", r.contender, r.index);
        for v in r.offset {
            let _ = write!(s, ",{}", num(v));
        }
        let _ = writeln!(
            s,
            ",{},{},{},{}",
            num(r.final_pos_err),
            num(r.final_rot_err),
            r.steps,
            r.failed as u8
        );
    }
    s
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,");
    s.push_str(COMPARISON_HEADER);
    s.push('\n');
    for a in rows {
        let line = comparison_csv(std::slice::from_ref(&a.row));
        let _ = writeln!(s, "{},{}", a.variant, line.lines().nth(1).unwrap_or_default());
    }
    s
}

/// Writes `comparison.csv`, then `runs.csv` when there are runs, then one
/// `trace_<regime>_<run>.csv` per trace plus `photometric.png` and
/// `twistnorm.png` when there are traces. Returns the written paths.
pub fn emit_outputs(
    rows: &[ComparisonRow],
    runs: &[RunRecord],
    traces: &[TraceEntry],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let mut put = |name: String, bytes: &[u8]| -> Result<()> {
        let p = out_dir.join(name);
        fs::write(&p, bytes)?;
        written.push(p);
        Ok(())
    };
    put("comparison.csv".into(), comparison_csv(rows).as_bytes())?;
    if !runs.is_empty() {
        put("runs.csv".into(), runs_csv(runs).as_bytes())?;
    }
    if traces.is_empty() {
        return Ok(written);
    }
    for t in traces {
        put(format!("trace_{}_{}.csv", t.contender, t.index), t.trace.to_csv().as_bytes())?;
    }
    let names = contender_order(traces);
    let series = |f: &dyn Fn(&crate::servo::StepRecord) -> f64| -> Vec<(usize, Vec<f64>)> {
        traces
            .iter()
            .map(|t| {
                let k = names.iter().position(|n| *n == t.contender).unwrap_or(0);
                (k, t.trace.steps.iter().map(f).collect())
            })
            .collect()
    };
    let photo = plot(&series(&|s| s.photometric_mse), Scale::Linear, names.len());
    let twist = plot(&series(&|s| s.twist.norm()), Scale::Log10, names.len());
    for (name, img) in [("photometric.png", photo), ("twistnorm.png", twist)] {
        let p = out_dir.join(name);
        write_png(&p, img.width, img.height, &img.data)?;
        written.push(p);
    }
    Ok(written)
}

fn contender_order(traces: &[TraceEntry]) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for t in traces {
        if !names.contains(&t.contender) {
            names.push(t.contender.clone());
        }
    }
    names
}

#[derive(Clone, Copy, PartialEq)]
enum Scale {
    Linear,
    Log10,
}

const PLOT_W: usize = 640;
const PLOT_H: usize = 360;
const MARGIN: usize = 24;
const LOG_FLOOR: f64 = 1e-9;
const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [23, 190, 207],
    [140, 86, 75],
    [127, 127, 127],
];

struct Raster {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Raster {
    fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![255; width * height * 3],
        }
    }

    fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let i = (y as usize * self.width + x as usize) * 3;
            self.data[i..i + 3].copy_from_slice(&c);
        }
    }

    /// Bresenham line.
    fn line(&mut self, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.put(x0, y0, c);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    fn fill(&mut self, x: i64, y: i64, w: i64, h: i64, c: [u8; 3]) {
        for yy in y..y + h {
            for xx in x..x + w {
                self.put(xx, yy, c);
            }
        }
    }
}

/// Line plot of every series against its step index. Axes have ten tick
/// marks each; the y range spans the data (decades when logarithmic).
/// Series colors follow contender order, shown as swatches top right.
fn plot(series: &[(usize, Vec<f64>)], scale: Scale, n_colors: usize) -> Raster {
    let mut r = Raster::new(PLOT_W, PLOT_H);
    let tf = |v: f64| match scale {
        Scale::Linear => v,
        Scale::Log10 => v.max(LOG_FLOOR).log10(),
    };
    let vals = series.iter().flat_map(|(_, s)| s.iter()).map(|&v| tf(v)).filter(|v| v.is_finite());
    let (mut lo, mut hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    match scale {
        Scale::Linear => lo = lo.min(0.0),
        Scale::Log10 => {
            lo = lo.floor();
            hi = hi.ceil();
        }
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let max_len = series.iter().map(|(_, s)| s.len()).max().unwrap_or(0).max(2);
    let (x0, x1) = (MARGIN as i64, (PLOT_W - MARGIN) as i64);
    let (y0, y1) = ((PLOT_H - MARGIN) as i64, MARGIN as i64);
    let px = |i: usize| x0 + ((x1 - x0) as f64 * i as f64 / (max_len - 1) as f64).round() as i64;
    let py = |v: f64| y0 - ((y0 - y1) as f64 * ((tf(v) - lo) / (hi - lo)).clamp(0.0, 1.0)).round() as i64;

    let axis = [0, 0, 0];
    r.line((x0, y0), (x1, y0), axis);
    r.line((x0, y0), (x0, y1), axis);
    for k in 0..=10 {
        let tx = x0 + (x1 - x0) * k / 10;
        let ty = y0 - (y0 - y1) * k / 10;
        r.line((tx, y0), (tx, y0 + 4), axis);
        r.line((x0 - 4, ty), (x0, ty), axis);
    }
    for (k, s) in series {
        let c = PALETTE[k % PALETTE.len()];
        let pts: Vec<(i64, i64)> = s
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, &v)| (px(i), py(v)))
            .collect();
        match pts.as_slice() {
            [p] => r.put(p.0, p.1, c),
            _ => {
                for w in pts.windows(2) {
                    r.line(w[0], w[1], c);
                }
            }
        }
    }
    for k in 0..n_colors {
        let x = x1 - 12 * (n_colors - k) as i64;
        r.fill(x, 4, 10, 10, PALETTE[k % PALETTE.len()]);
    }
    r
}
