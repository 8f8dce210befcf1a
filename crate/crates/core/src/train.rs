//! Training regimes: supervised multi-head training with loss balancing,
//! MAML meta-training, per-head finetuning and the two-model threshold
//! switch, plus the bundle file that stores the result.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};

use crate::dataset::{checked_payload, Cursor, Dataset, DatasetKind, Sample};
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::servo::photometric_mse;
use crate::tensornet::net::{forward_graph, head_graph};
use crate::tensornet::{
    autobalance_with_grads, loss_cls, loss_pose, meta_grad, Graph, HeadId, HeadSet, InputNorm,
    LossBalance, MetaMode, ModelParams, NetConfig, Objective, PairInput, ParamGroup, ParamSpace, Scalar, Tensor, Var,
    DEFAULT_BETA,
};

pub const BUNDLE_MAGIC: &[u8; 4] = b"VSBN";
pub const BUNDLE_VERSION: u16 = 1;

/// Fraction of each dataset held out for early stopping during finetuning.
const HOLDOUT_EVERY: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub fine_learning_rate: f64,
    pub weight_decay: f64,
    pub epochs_main: usize,
    pub epochs_fine: usize,
    pub batch_size: usize,
    /// Rotation weight in the pose loss.
    pub beta: f64,
    pub master_seed: u64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    pub net: NetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            fine_learning_rate: 1e-5,
            weight_decay: 4e-5,
            epochs_main: 50,
            epochs_fine: 20,
            batch_size: 32,
            beta: DEFAULT_BETA,
            master_seed: 0,
            clip_norm: 10.0,
            net: NetConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Schedule sized for a single CPU core: same two-phase shape and
    /// 10:1 rate ratio, fewer epochs at a higher rate.
    pub fn desk() -> Self {
        Self {
            learning_rate: 1e-3,
            fine_learning_rate: 1e-4,
            epochs_main: 8,
            epochs_fine: 2,
            ..Self::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.master_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [self.learning_rate, self.fine_learning_rate, self.beta, self.clip_norm];
        if rates.iter().any(|r| !(*r > 0.0 && r.is_finite())) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig(format!("rates must be positive: {self:?}")));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        self.net.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MamlConfig {
    /// Inner adaptation step size.
    pub alpha: f64,
    /// Meta step size.
    pub beta_meta: f64,
    pub optimizer: MetaOptimizer,
    /// Samples per task per inner and per meta evaluation.
    pub k_shot: usize,
    pub iterations: usize,
    pub mode: MetaMode,
    /// Whether the balance scalars are updated alongside θ.
    pub learn_balance: bool,
    /// Iterations aggregated into one log row.
    pub log_every: usize,
}

/// Update rule applied to the meta-gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetaOptimizer {
    /// `θ ← θ − β·g`.
    Sgd,
    /// Adaptive moments at rate β, no weight decay.
    Adam,
}

impl Default for MamlConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta_meta: 1e-4,
            optimizer: MetaOptimizer::Sgd,
            k_shot: 8,
            iterations: 1000,
            mode: MetaMode::Exact,
            learn_balance: true,
            log_every: 50,
        }
    }
}

impl MamlConfig {
    /// Adaptive meta-updates: plain descent on the non-smooth pose losses
    /// either oscillates or barely moves the trunk within a desk budget.
    pub fn desk() -> Self {
        Self {
            beta_meta: 1e-3,
            optimizer: MetaOptimizer::Adam,
            iterations: 1500,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) || !(self.beta_meta > 0.0 && self.beta_meta.is_finite()) {
            return Err(Error::InvalidConfig("alpha and beta_meta must be positive".into()));
        }
        if self.k_shot == 0 || self.log_every == 0 {
            return Err(Error::InvalidConfig("k_shot and log_every must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Regime {
    LsdOnly,
    Comb,
    VanillaSwitch,
    CnnSwitch,
    ImplicitSwitch,
    MetaSwitch,
}

impl Regime {
    pub const ALL: [Regime; 6] = [
        Regime::LsdOnly,
        Regime::Comb,
        Regime::VanillaSwitch,
        Regime::CnnSwitch,
        Regime::ImplicitSwitch,
        Regime::MetaSwitch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Regime::LsdOnly => "lsd-only",
            Regime::Comb => "comb",
            Regime::VanillaSwitch => "vanilla-switch",
            Regime::CnnSwitch => "cnn-switch",
            Regime::ImplicitSwitch => "implicit-switch",
            Regime::MetaSwitch => "meta-switch",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.name() == s)
    }

    fn tag(self) -> u8 {
        self as u8
    }

    fn from_tag(t: u8) -> Option<Self> {
        Self::ALL.get(t as usize).copied()
    }

    pub fn model_count(self) -> usize {
        match self {
            Regime::VanillaSwitch => 2,
            Regime::CnnSwitch => 3,
            _ => 1,
        }
    }
}

/// Which samples feed a head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Lsd,
    Ssd,
    Combined,
}

impl Source {
    fn includes(self, kind: DatasetKind) -> bool {
        match self {
            Source::Combined => true,
            Source::Lsd => kind == DatasetKind::Lsd,
            Source::Ssd => kind == DatasetKind::Ssd,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadTask {
    pub head: HeadId,
    pub source: Source,
}

impl HeadTask {
    pub const fn new(head: HeadId, source: Source) -> Self {
        Self { head, source }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Main,
    Fine,
    Meta,
    Finetune,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Main => "main",
            Phase::Fine => "fine",
            Phase::Meta => "meta",
            Phase::Finetune => "finetune",
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        [Phase::Main, Phase::Fine, Phase::Meta, Phase::Finetune].get(t as usize).copied()
    }
}

/// One epoch (or block of meta iterations) of training.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub model: u8,
    pub phase: Phase,
    pub epoch: u32,
    /// Mean loss per head; NaN for heads not trained in this row.
    pub head_loss: [f64; 3],
    pub total: f64,
    pub s_hat: [f64; 3],
    pub clipped_steps: u32,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

fn csv_num(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:.16e}")
    }
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "model,phase,epoch,loss_reg_lsd,loss_reg_ssd,loss_cls,total,s_hat_reg_lsd,s_hat_reg_ssd,s_hat_cls,clipped_steps\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.model,
                r.phase.name(),
                r.epoch,
                csv_num(r.head_loss[0]),
                csv_num(r.head_loss[1]),
                csv_num(r.head_loss[2]),
                csv_num(r.total),
                csv_num(r.s_hat[0]),
                csv_num(r.s_hat[1]),
                csv_num(r.s_hat[2]),
                r.clipped_steps
            );
        }
        s
    }

    fn extend_as(&mut self, other: TrainLog, model: u8) {
        self.rows.extend(other.rows.into_iter().map(|mut r| {
            r.model = model;
            r
        }));
    }
}

/// Adaptive-moment optimizer with decoupled weight decay over selected
/// ranges of a flat vector.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(len: usize, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// Updates only indices inside `ranges`; everything else is untouched.
    pub fn step(&mut self, x: &mut [f64], g: &[f64], ranges: &[std::ops::Range<usize>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for r in ranges {
            for i in r.clone() {
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = self.m[i] / c1;
                let vh = self.v[i] / c2;
                x[i] -= self.lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * x[i]);
            }
        }
    }
}

fn global_norm(parts: &[&[f64]]) -> f64 {
    parts.iter().flat_map(|p| p.iter()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Scales all parts so their joint norm is at most `max`; true if scaled.
fn clip(parts: &mut [&mut [f64]], max: f64) -> bool {
    let n = parts.iter().flat_map(|p| p.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if n > max {
        let k = max / n;
        for p in parts.iter_mut() {
            for v in p.iter_mut() {
                *v *= k;
            }
        }
        true
    } else {
        false
    }
}

fn check_finite(what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::DivergenceDetected(format!("{what} is {v}")))
    }
}

/// Per-sample supervised loss of one head, averaged over the samples.
pub struct SupervisedObjective<'a> {
    pub config: &'a NetConfig,
    pub groups: &'a [ParamGroup],
    pub norm: InputNorm,
    pub head: HeadId,
    pub samples: Vec<&'a Sample>,
    pub beta: f64,
}

impl<'a> SupervisedObjective<'a> {
    pub fn new(params: &'a ModelParams, head: HeadId, samples: Vec<&'a Sample>, beta: f64) -> Self {
        Self {
            config: &params.config,
            groups: &params.groups,
            norm: params.norm,
            head,
            samples,
            beta,
        }
    }
}

fn head_loss<S: Scalar>(g: &mut Graph<S>, out: Var, head: HeadId, sample: &Sample, beta: f64) -> Result<Var> {
    if head.is_regression() {
        let label = g.constant(Tensor::from_f64(vec![6], &sample.label)?);
        loss_pose(g, out, label, beta)
    } else {
        loss_cls(g, out, sample.origin)
    }
}

impl Objective for SupervisedObjective<'_> {
    fn terms(&self) -> usize {
        self.samples.len()
    }

    fn build<S: Scalar>(&self, g: &mut Graph<S>, params: &[Var], term: usize) -> Result<Var> {
        let s = self.samples[term];
        let input = PairInput::from_packed(&self.norm, &s.reference_image, &s.current_image)?;
        let out = forward_graph(self.config, self.groups, g, params, &input, &[self.head])?[0];
        let l = head_loss(g, out, self.head, s, self.beta)?;
        Ok(g.scale(l, 1.0 / self.samples.len() as f64))
    }
}

/// Samples of both datasets, in LSD-then-SSD order.
fn combined<'a>(lsd: Option<&'a Dataset>, ssd: Option<&'a Dataset>) -> Vec<&'a Sample> {
    lsd.into_iter().chain(ssd).flat_map(|d| d.samples.iter()).collect()
}

fn input_norm(samples: &[&Sample]) -> Result<InputNorm> {
    InputNorm::from_images(samples.iter().flat_map(|s| [&s.reference_image, &s.current_image]))
}

fn check_resolution(cfg: &NetConfig, samples: &[&Sample]) -> Result<()> {
    match samples.iter().find(|s| s.current_image.width != cfg.width || s.current_image.height != cfg.height) {
        Some(s) => Err(Error::ShapeMismatch(format!(
            "sample is {}x{} but network expects {}x{}",
            s.current_image.width, s.current_image.height, cfg.width, cfg.height
        ))),
        None => Ok(()),
    }
}

fn nan3() -> [f64; 3] {
    [f64::NAN; 3]
}

fn head_ranges(params: &ModelParams, mask: &[bool]) -> Vec<std::ops::Range<usize>> {
    params.groups.iter().zip(mask).filter(|(_, &m)| m).map(|(g, _)| g.range()).collect()
}

/// Trains the heads in `tasks` (and the trunk) starting from `init`.
/// With several heads the objective is the auto-balanced sum of the
/// per-head batch means; the balance scalars are learned with it.
pub fn train_supervised(
    init: ModelParams,
    lsd: Option<&Dataset>,
    ssd: Option<&Dataset>,
    tasks: &[HeadTask],
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::InvalidConfig("no heads to train".into()));
    }
    let active = HeadSet::of(&tasks.iter().map(|t| t.head).collect::<Vec<_>>());
    if !active.is_subset(init.heads) {
        return Err(Error::InvalidConfig("model lacks a requested head".into()));
    }
    let examples: Vec<(&Sample, HeadSet)> = combined(lsd, ssd)
        .into_iter()
        .filter_map(|s| {
            let hs: Vec<HeadId> = tasks.iter().filter(|t| t.source.includes(s.origin)).map(|t| t.head).collect();
            (!hs.is_empty()).then(|| (s, HeadSet::of(&hs)))
        })
        .collect();
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut params = init;
    let all: Vec<&Sample> = examples.iter().map(|e| e.0).collect();
    check_resolution(&params.config, &all)?;
    params.norm = input_norm(&all)?;

    let balanced = active.len() > 1;
    let heads: Vec<HeadId> = active.iter().collect();
    let trainable = vec![true; params.groups.len()];
    let ranges = head_ranges(&params, &trainable);
    let mut opt = AdamW::new(params.values.len(), cfg.learning_rate, cfg.weight_decay);
    let mut s_opt = AdamW::new(3, cfg.learning_rate, 0.0);
    let s_ranges: Vec<_> = if balanced { heads.iter().map(|h| h.index()..h.index() + 1).collect() } else { vec![] };

    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let stream = Stream::from_seed(cfg.master_seed).derive("train").derive("shuffle");
    let total_epochs = cfg.epochs_main + cfg.epochs_fine;
    let mut grad = vec![0.0; params.values.len()];
    for epoch in 0..total_epochs {
        let phase = if epoch < cfg.epochs_main { Phase::Main } else { Phase::Fine };
        let lr = if phase == Phase::Main { cfg.learning_rate } else { cfg.fine_learning_rate };
        opt.lr = lr;
        s_opt.lr = lr;
        let mut rng = stream.derive_index(epoch as u64);
        order.shuffle(&mut rng);

        let mut sums = [0.0; 3];
        let mut counts = [0usize; 3];
        let mut total_sum = 0.0;
        let mut batches = 0usize;
        let mut clipped = 0u32;
        for batch in order.chunks(cfg.batch_size) {
            let mut n = [0usize; 3];
            for &i in batch {
                for h in examples[i].1.iter() {
                    n[h.index()] += 1;
                }
            }
            let present: Vec<HeadId> = heads.iter().copied().filter(|h| n[h.index()] > 0).collect();
            let bal = LossBalance {
                s_hat: present.iter().map(|h| params.s_hat[h.index()]).collect(),
            };
            // d(balanced)/d(Lₕ) does not depend on Lₕ, so the weights are
            // known before the batch is evaluated.
            let mut weight = [0.0; 3];
            if balanced {
                let w = autobalance_with_grads(&vec![0.0; present.len()], &bal)?;
                for (h, d) in present.iter().zip(&w.d_losses) {
                    weight[h.index()] = d / n[h.index()] as f64;
                }
            } else {
                for h in &present {
                    weight[h.index()] = 1.0 / n[h.index()] as f64;
                }
            }

            grad.fill(0.0);
            let mut batch_loss = [0.0; 3];
            for &i in batch {
                let (s, hs) = examples[i];
                let mut g = Graph::<f64>::new();
                let vars = ModelParams::bind(&params.groups, &mut g, &params.values, &trainable);
                let input = PairInput::from_packed(&params.norm, &s.reference_image, &s.current_image)?;
                let hl: Vec<HeadId> = hs.iter().collect();
                let outs = forward_graph(&params.config, &params.groups, &mut g, &vars, &input, &hl)?;
                let mut obj: Option<Var> = None;
                for (h, o) in hl.iter().zip(outs) {
                    let l = head_loss(&mut g, o, *h, s, cfg.beta)?;
                    batch_loss[h.index()] += g.value(l).data[0];
                    let wl = g.scale(l, weight[h.index()]);
                    obj = Some(match obj {
                        None => wl,
                        Some(t) => g.add(t, wl)?,
                    });
                }
                let obj = obj.expect("example has at least one head");
                let grads = g.backward(obj)?;
                for (grp, v) in params.groups.iter().zip(&vars) {
                    if let Some(t) = grads.get(*v) {
                        for (a, b) in grad[grp.range()].iter_mut().zip(&t.data) {
                            *a += b;
                        }
                    }
                }
            }
            let means: Vec<f64> = present.iter().map(|h| batch_loss[h.index()] / n[h.index()] as f64).collect();
            let mut s_grad = [0.0; 3];
            let value = if balanced {
                let r = autobalance_with_grads(&means, &bal)?;
                for (h, d) in present.iter().zip(&r.d_s_hat) {
                    s_grad[h.index()] = *d;
                }
                r.value
            } else {
                means.iter().sum()
            };
            check_finite("training loss", value)?;
            if clip(&mut [&mut grad[..], &mut s_grad[..]], cfg.clip_norm) {
                clipped += 1;
            }
            check_finite("gradient norm", global_norm(&[&grad]))?;
            opt.step(&mut params.values, &grad, &ranges);
            s_opt.step(&mut params.s_hat, &s_grad, &s_ranges);
            for h in &present {
                sums[h.index()] += batch_loss[h.index()];
                counts[h.index()] += n[h.index()];
            }
            total_sum += value;
            batches += 1;
        }
        let mut head_loss = nan3();
        for h in &heads {
            head_loss[h.index()] = sums[h.index()] / counts[h.index()].max(1) as f64;
        }
        log.rows.push(LogRow {
            model: 0,
            phase,
            epoch: epoch as u32,
            head_loss,
            total: total_sum / batches as f64,
            s_hat: params.s_hat,
            clipped_steps: clipped,
        });
    }
    Ok((params, log))
}

/// Disjoint inner-update and meta-update halves of `0..n`.
pub fn split_halves(n: usize) -> (Vec<usize>, Vec<usize>) {
    let h = n / 2;
    ((0..h).collect(), (h..n).collect())
}

/// Outcome of one meta-update.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaStepReport {
    /// Outer losses at the adapted parameters, one per task.
    pub task_losses: Vec<f64>,
    /// Balanced meta-objective value.
    pub objective: f64,
    /// Applied update to θ (new − old).
    pub delta: Vec<f64>,
    pub clipped: bool,
}

/// Optimizer state carried across meta-updates.
#[derive(Clone, Debug)]
pub struct MetaUpdater {
    kind: MetaOptimizer,
    beta: f64,
    theta: AdamW,
    s_hat: AdamW,
}

impl MetaUpdater {
    pub fn new(mcfg: &MamlConfig, n_values: usize, n_tasks: usize) -> Self {
        Self {
            kind: mcfg.optimizer,
            beta: mcfg.beta_meta,
            theta: AdamW::new(n_values, mcfg.beta_meta, 0.0),
            s_hat: AdamW::new(n_tasks, mcfg.beta_meta, 0.0),
        }
    }

    fn apply(&mut self, values: &mut [f64], g: &[f64], s_hat: &mut [f64], sg: &[f64]) {
        match self.kind {
            MetaOptimizer::Sgd => {
                for (v, d) in values.iter_mut().zip(g) {
                    *v -= self.beta * d;
                }
                for (v, d) in s_hat.iter_mut().zip(sg) {
                    *v -= self.beta * d;
                }
            }
            MetaOptimizer::Adam => {
                self.theta.step(values, g, &[0..values.len()]);
                self.s_hat.step(s_hat, sg, &[0..s_hat.len()]);
            }
        }
    }
}

/// One meta-update over `(inner, outer)` objective pairs: adapt θ per task
/// with one inner gradient step, evaluate each outer loss at the adapted
/// point, and descend the balanced sum with `upd`.
/// `s_hat` holds one balance scalar per task.
pub fn meta_step<O: Objective>(
    space: &ParamSpace,
    values: &mut [f64],
    s_hat: &mut [f64],
    tasks: &[(O, O)],
    mcfg: &MamlConfig,
    clip_norm: f64,
    upd: &mut MetaUpdater,
) -> Result<MetaStepReport> {
    if s_hat.len() != tasks.len() {
        return Err(Error::LengthMismatch {
            expected: tasks.len(),
            found: s_hat.len(),
        });
    }
    let mut grads = Vec::with_capacity(tasks.len());
    let mut losses = Vec::with_capacity(tasks.len());
    for (inner, outer) in tasks {
        let mg = meta_grad(space, values, inner, outer, mcfg.alpha, mcfg.mode)?;
        check_finite("meta loss", mg.outer_loss)?;
        losses.push(mg.outer_loss);
        grads.push(mg.grad);
    }
    let bal = LossBalance { s_hat: s_hat.to_vec() };
    let b = autobalance_with_grads(&losses, &bal)?;
    let mut g = vec![0.0; values.len()];
    for (w, tg) in b.d_losses.iter().zip(&grads) {
        for (a, x) in g.iter_mut().zip(tg) {
            *a += w * x;
        }
    }
    let mut sg = if mcfg.learn_balance { b.d_s_hat.clone() } else { vec![0.0; s_hat.len()] };
    let clipped = clip(&mut [&mut g[..], &mut sg[..]], clip_norm);
    let before = values.to_vec();
    upd.apply(values, &g, s_hat, &sg);
    let delta = values.iter().zip(&before).map(|(n, o)| n - o).collect();
    Ok(MetaStepReport {
        task_losses: losses,
        objective: b.value,
        delta,
        clipped,
    })
}

fn pick<'a>(pool: &[&'a Sample], k: usize, rng: &mut Stream) -> Vec<&'a Sample> {
    let k = k.min(pool.len());
    index::sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect()
}

fn halves(d: &Dataset) -> (Vec<&Sample>, Vec<&Sample>) {
    let (a, b) = split_halves(d.len());
    (
        a.into_iter().map(|i| &d.samples[i]).collect(),
        b.into_iter().map(|i| &d.samples[i]).collect(),
    )
}

fn features_of<'a>(params: &ModelParams, set: &[&'a Sample]) -> Result<Vec<(Vec<f64>, &'a Sample)>> {
    set.iter()
        .map(|s| {
            let input = PairInput::from_packed(&params.norm, &s.reference_image, &s.current_image)?;
            Ok((params.features(&input)?, *s))
        })
        .collect()
}

/// Meta-trains all three heads: RegLSD on LSD, RegSSD on SSD and Cls on
/// both, each dataset split into inner and meta halves.
pub fn maml_train(
    init: ModelParams,
    lsd: &Dataset,
    ssd: &Dataset,
    mcfg: &MamlConfig,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainLog)> {
    mcfg.validate()?;
    cfg.validate()?;
    if lsd.len() < 2 || ssd.len() < 2 {
        return Err(Error::EmptyDataset);
    }
    if init.heads != HeadSet::all() {
        return Err(Error::InvalidConfig("meta-training needs all three heads".into()));
    }
    let mut params = init;
    let all = combined(Some(lsd), Some(ssd));
    check_resolution(&params.config, &all)?;
    params.norm = input_norm(&all)?;

    let (lsd_in, lsd_meta) = halves(lsd);
    let (ssd_in, ssd_meta) = halves(ssd);
    let both_in: Vec<&Sample> = lsd_in.iter().chain(&ssd_in).copied().collect();
    let both_meta: Vec<&Sample> = lsd_meta.iter().chain(&ssd_meta).copied().collect();
    let pools: [(HeadId, &[&Sample], &[&Sample]); 3] = [
        (HeadId::RegLsd, &lsd_in, &lsd_meta),
        (HeadId::RegSsd, &ssd_in, &ssd_meta),
        (HeadId::Cls, &both_in, &both_meta),
    ];

    let stream = Stream::from_seed(cfg.master_seed).derive("train").derive("maml");
    let mut log = TrainLog::default();
    let mut acc = [0.0; 3];
    let mut acc_obj = 0.0;
    let mut acc_n = 0usize;
    let mut clipped = 0u32;
    let mut upd = MetaUpdater::new(mcfg, params.values.len(), 3);
    for it in 0..mcfg.iterations {
        let mut rng = stream.derive_index(it as u64);
        let groups = params.groups.clone();
        let tasks: Vec<(SupervisedObjective, SupervisedObjective)> = pools
            .iter()
            .map(|(h, inner, meta)| {
                let a = pick(inner, mcfg.k_shot, &mut rng);
                let b = pick(meta, mcfg.k_shot, &mut rng);
                (
                    SupervisedObjective {
                        config: &params.config,
                        groups: &groups,
                        norm: params.norm,
                        head: *h,
                        samples: a,
                        beta: cfg.beta,
                    },
                    SupervisedObjective {
                        config: &params.config,
                        groups: &groups,
                        norm: params.norm,
                        head: *h,
                        samples: b,
                        beta: cfg.beta,
                    },
                )
            })
            .collect();
        let space = ParamSpace::all(&groups);
        let mut values = params.values.clone();
        let mut s_hat = params.s_hat.to_vec();
        let rep = meta_step(&space, &mut values, &mut s_hat, &tasks, mcfg, cfg.clip_norm, &mut upd)?;
        drop(tasks);
        params.values = values;
        params.s_hat.copy_from_slice(&s_hat);
        for (a, l) in acc.iter_mut().zip(&rep.task_losses) {
            *a += l;
        }
        acc_obj += rep.objective;
        acc_n += 1;
        clipped += rep.clipped as u32;
        if acc_n == mcfg.log_every || it + 1 == mcfg.iterations {
            log.rows.push(LogRow {
                model: 0,
                phase: Phase::Meta,
                epoch: (it / mcfg.log_every) as u32,
                head_loss: acc.map(|a| a / acc_n as f64),
                total: acc_obj / acc_n as f64,
                s_hat: params.s_hat,
                clipped_steps: clipped,
            });
            acc = [0.0; 3];
            acc_obj = 0.0;
            acc_n = 0;
            clipped = 0;
        }
    }
    Ok((params, log))
}

/// Deterministic train / held-out split used by finetuning.
pub fn holdout_split<'a>(samples: &[&'a Sample]) -> (Vec<&'a Sample>, Vec<&'a Sample>) {
    let mut train = Vec::new();
    let mut held = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if i % HOLDOUT_EVERY == HOLDOUT_EVERY - 1 {
            held.push(*s);
        } else {
            train.push(*s);
        }
    }
    (train, held)
}

fn head_only_loss(params: &ModelParams, feats: &[(Vec<f64>, &Sample)], head: HeadId, beta: f64) -> Result<f64> {
    let frozen = vec![false; params.groups.len()];
    let mut total = 0.0;
    for (f, s) in feats {
        let mut g = Graph::<f64>::new();
        let vars = ModelParams::bind(&params.groups, &mut g, &params.values, &frozen);
        let fv = g.constant(Tensor::from_f64(vec![f.len()], f)?);
        let out = head_graph(&params.groups, &mut g, &vars, fv, head)?;
        let l = head_loss(&mut g, out, head, s, beta)?;
        total += g.value(l).data[0];
    }
    Ok(total / feats.len().max(1) as f64)
}

/// Mean held-out loss of one head, on the split used by
/// [`finetune_heads`].
pub fn heldout_loss(params: &ModelParams, head: HeadId, lsd: &Dataset, ssd: &Dataset, beta: f64) -> Result<f64> {
    let pool = head_pool(head, lsd, ssd);
    let (_, held) = holdout_split(&pool);
    let feats = features_of(params, &held)?;
    head_only_loss(params, &feats, head, beta)
}

fn head_pool<'a>(head: HeadId, lsd: &'a Dataset, ssd: &'a Dataset) -> Vec<&'a Sample> {
    match head {
        HeadId::RegLsd => lsd.samples.iter().collect(),
        HeadId::RegSsd => ssd.samples.iter().collect(),
        HeadId::Cls => combined(Some(lsd), Some(ssd)),
    }
}

/// Finetunes each head separately with the trunk frozen: RegLSD on LSD,
/// RegSSD on SSD, Cls on both. Each head keeps the parameters with the
/// lowest held-out loss seen, the starting point included.
pub fn finetune_heads(params: ModelParams, lsd: &Dataset, ssd: &Dataset, cfg: &TrainConfig) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    let mut params = params;
    let mut log = TrainLog::default();
    if cfg.epochs_fine == 0 {
        return Ok((params, log));
    }
    let stream = Stream::from_seed(cfg.master_seed).derive("train").derive("finetune");
    for head in params.heads.iter() {
        let pool = head_pool(head, lsd, ssd);
        if pool.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let (train, held) = holdout_split(&pool);
        let train_f = features_of(&params, &train)?;
        let held_f = features_of(&params, &held)?;
        let mask = params.head_mask(HeadSet::of(&[head]));
        let ranges = head_ranges(&params, &mask);
        let mut best_loss = head_only_loss(&params, &held_f, head, cfg.beta)?;
        let mut best = params.values.clone();
        let mut opt = AdamW::new(params.values.len(), cfg.fine_learning_rate, cfg.weight_decay);
        let mut order: Vec<usize> = (0..train_f.len()).collect();
        let hs = stream.derive(head.name());
        let mut grad = vec![0.0; params.values.len()];
        for epoch in 0..cfg.epochs_fine {
            let mut rng = hs.derive_index(epoch as u64);
            order.shuffle(&mut rng);
            let mut sum = 0.0;
            let mut clipped = 0;
            for batch in order.chunks(cfg.batch_size) {
                grad.fill(0.0);
                let k = 1.0 / batch.len() as f64;
                for &i in batch {
                    let (f, s) = &train_f[i];
                    let mut g = Graph::<f64>::new();
                    let vars = ModelParams::bind(&params.groups, &mut g, &params.values, &mask);
                    let fv = g.constant(Tensor::from_f64(vec![f.len()], f)?);
                    let out = head_graph(&params.groups, &mut g, &vars, fv, head)?;
                    let l = head_loss(&mut g, out, head, s, cfg.beta)?;
                    sum += g.value(l).data[0];
                    let l = g.scale(l, k);
                    let grads = g.backward(l)?;
                    for ((grp, v), &m) in params.groups.iter().zip(&vars).zip(&mask) {
                        if m {
                            if let Some(t) = grads.get(*v) {
                                for (a, b) in grad[grp.range()].iter_mut().zip(&t.data) {
                                    *a += b;
                                }
                            }
                        }
                    }
                }
                check_finite("finetune gradient", global_norm(&[&grad]))?;
                if clip(&mut [&mut grad[..]], cfg.clip_norm) {
                    clipped += 1;
                }
                opt.step(&mut params.values, &grad, &ranges);
            }
            let val = head_only_loss(&params, &held_f, head, cfg.beta)?;
            check_finite("held-out loss", val)?;
            if val < best_loss {
                best_loss = val;
                best = params.values.clone();
            }
            let mut head_loss = nan3();
            head_loss[head.index()] = sum / train_f.len() as f64;
            log.rows.push(LogRow {
                model: 0,
                phase: Phase::Finetune,
                epoch: epoch as u32,
                head_loss,
                total: val,
                s_hat: params.s_hat,
                clipped_steps: clipped,
            });
        }
        params.values = best;
    }
    Ok((params, log))
}

/// Photometric error of a servo state and whether the fine model should
/// drive it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValidationState {
    pub mse: f64,
    pub use_ssd: bool,
}

/// States from dataset pairs: the SSD-origin pairs are the ones that
/// should use the fine model.
pub fn validation_states(lsd: &Dataset, ssd: &Dataset) -> Result<Vec<ValidationState>> {
    combined(Some(lsd), Some(ssd))
        .into_iter()
        .map(|s| {
            Ok(ValidationState {
                mse: photometric_mse(&s.reference_image.unpack(), &s.current_image.unpack())?,
                use_ssd: s.origin == DatasetKind::Ssd,
            })
        })
        .collect()
}

/// Mean of the per-class recalls of the rule "use SSD when mse < t"; a
/// class absent from `states` is skipped.
pub fn balanced_accuracy(states: &[ValidationState], t: f64) -> f64 {
    let (mut tp, mut p, mut tn, mut n) = (0usize, 0usize, 0usize, 0usize);
    for s in states {
        let pred = s.mse < t;
        if s.use_ssd {
            p += 1;
            tp += pred as usize;
        } else {
            n += 1;
            tn += (!pred) as usize;
        }
    }
    let mut recalls = Vec::new();
    if p > 0 {
        recalls.push(tp as f64 / p as f64);
    }
    if n > 0 {
        recalls.push(tn as f64 / n as f64);
    }
    recalls.iter().sum::<f64>() / recalls.len().max(1) as f64
}

/// Threshold maximizing balanced accuracy. Candidates are the midpoints
/// between consecutive distinct MSE values (a single distinct value is
/// its own candidate); the first maximum wins.
pub fn calibrate_vanilla_threshold(states: &[ValidationState]) -> Result<f64> {
    if states.is_empty() {
        return Err(Error::EmptyValidation);
    }
    let mut v: Vec<f64> = states.iter().map(|s| s.mse).collect();
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidConfig("non-finite validation mse".into()));
    }
    v.sort_by(f64::total_cmp);
    v.dedup();
    let candidates: Vec<f64> = if v.len() == 1 {
        v
    } else {
        v.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    };
    let mut best = candidates[0];
    let mut best_acc = f64::NEG_INFINITY;
    for &c in &candidates {
        let a = balanced_accuracy(states, c);
        if a > best_acc {
            best_acc = a;
            best = c;
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedBundle {
    pub regime: Regime,
    pub models: Vec<ModelParams>,
    pub threshold: Option<f64>,
    pub log: TrainLog,
}

impl TrainedBundle {
    pub fn new(regime: Regime, models: Vec<ModelParams>, threshold: Option<f64>, log: TrainLog) -> Result<Self> {
        let b = Self {
            regime,
            models,
            threshold,
            log,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.models.len() != self.regime.model_count() {
            return Err(Error::IncompatibleBundle(format!(
                "{} needs {} models, found {}",
                self.regime.name(),
                self.regime.model_count(),
                self.models.len()
            )));
        }
        if (self.regime == Regime::VanillaSwitch) != self.threshold.is_some() {
            return Err(Error::IncompatibleBundle("threshold presence does not match regime".into()));
        }
        Ok(())
    }

    /// First model carrying `head`.
    pub fn model_for(&self, head: HeadId) -> Option<&ModelParams> {
        self.models.iter().find(|m| m.heads.contains(head))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(BUNDLE_MAGIC);
        b.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
        b.push(self.regime.tag());
        b.push(self.threshold.is_some() as u8);
        b.extend_from_slice(&self.threshold.unwrap_or(0.0).to_le_bytes());
        b.push(self.models.len() as u8);
        for m in &self.models {
            let mb = m.to_bytes();
            b.extend_from_slice(&(mb.len() as u32).to_le_bytes());
            b.extend_from_slice(&mb);
        }
        b.extend_from_slice(&(self.log.rows.len() as u32).to_le_bytes());
        for r in &self.log.rows {
            b.push(r.model);
            b.push(r.phase as u8);
            b.extend_from_slice(&r.epoch.to_le_bytes());
            for v in r.head_loss.iter().chain([&r.total]).chain(&r.s_hat) {
                b.extend_from_slice(&v.to_le_bytes());
            }
            b.extend_from_slice(&r.clipped_steps.to_le_bytes());
        }
        let crc = crc32fast::hash(&b);
        b.extend_from_slice(&crc.to_le_bytes());
        b
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let payload = checked_payload(buf, BUNDLE_MAGIC, BUNDLE_VERSION)?;
        let mut c = Cursor::new(payload);
        c.take(6)?;
        let regime = Regime::from_tag(c.u8()?).ok_or_else(|| Error::Format("unknown regime".into()))?;
        let has_t = c.u8()? != 0;
        let t = c.f64()?;
        let n = c.u8()? as usize;
        let mut models = Vec::with_capacity(n);
        for _ in 0..n {
            let len = c.u32()? as usize;
            models.push(ModelParams::from_bytes(c.take(len)?)?);
        }
        let rows = c.u32()? as usize;
        let mut log = TrainLog::default();
        for _ in 0..rows {
            let model = c.u8()?;
            let phase = Phase::from_tag(c.u8()?).ok_or_else(|| Error::Format("unknown phase".into()))?;
            let epoch = c.u32()?;
            let mut v = [0.0; 7];
            for x in &mut v {
                *x = c.f64()?;
            }
            log.rows.push(LogRow {
                model,
                phase,
                epoch,
                head_loss: [v[0], v[1], v[2]],
                total: v[3],
                s_hat: [v[4], v[5], v[6]],
                clipped_steps: c.u32()?,
            });
        }
        if c.remaining() != 0 {
            return Err(Error::Format("trailing bytes in bundle".into()));
        }
        Self::new(regime, models, has_t.then_some(t), log).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn model_seed(cfg: &TrainConfig, regime: Regime, index: u64) -> u64 {
    Stream::from_seed(cfg.master_seed)
        .derive("train")
        .derive(regime.name())
        .derive_index(index)
        .next_seed()
}

fn fresh(cfg: &NetConfig, heads: &[HeadId], seed: u64) -> Result<ModelParams> {
    ModelParams::init(*cfg, HeadSet::of(heads), seed)
}

/// Trains every model a regime needs and packs them into a bundle.
pub fn build_bundle(
    regime: Regime,
    lsd: &Dataset,
    ssd: &Dataset,
    cfg: &TrainConfig,
    mcfg: &MamlConfig,
) -> Result<TrainedBundle> {
    if lsd.is_empty() || ssd.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if (lsd.width, lsd.height) != (ssd.width, ssd.height) {
        return Err(Error::ShapeMismatch("LSD and SSD resolutions differ".into()));
    }
    let mut cfg = *cfg;
    cfg.net = cfg.net.with_resolution(lsd.width, lsd.height);
    let net = cfg.net;
    let seed = |i| model_seed(&cfg, regime, i);
    use HeadId::*;
    let single = |heads: &[HeadId], tasks: &[HeadTask], l: Option<&Dataset>, s: Option<&Dataset>, i: u64| {
        let init = fresh(&net, heads, seed(i))?;
        let c = TrainConfig {
            master_seed: seed(i),
            ..cfg
        };
        train_supervised(init, l, s, tasks, &c)
    };
    let mut log = TrainLog::default();
    let (models, threshold) = match regime {
        Regime::LsdOnly => {
            let (m, l) = single(&[RegLsd], &[HeadTask::new(RegLsd, Source::Lsd)], Some(lsd), None, 0)?;
            log.extend_as(l, 0);
            (vec![m], None)
        }
        Regime::Comb => {
            let (m, l) = single(&[RegLsd], &[HeadTask::new(RegLsd, Source::Combined)], Some(lsd), Some(ssd), 0)?;
            log.extend_as(l, 0);
            (vec![m], None)
        }
        Regime::VanillaSwitch => {
            let (a, la) = single(&[RegLsd], &[HeadTask::new(RegLsd, Source::Lsd)], Some(lsd), None, 0)?;
            let (b, lb) = single(&[RegSsd], &[HeadTask::new(RegSsd, Source::Ssd)], None, Some(ssd), 1)?;
            log.extend_as(la, 0);
            log.extend_as(lb, 1);
            let t = calibrate_vanilla_threshold(&validation_states(lsd, ssd)?)?;
            (vec![a, b], Some(t))
        }
        Regime::CnnSwitch => {
            let (a, la) = single(&[RegLsd], &[HeadTask::new(RegLsd, Source::Lsd)], Some(lsd), None, 0)?;
            let (b, lb) = single(&[RegSsd], &[HeadTask::new(RegSsd, Source::Ssd)], None, Some(ssd), 1)?;
            let (c, lc) = single(&[Cls], &[HeadTask::new(Cls, Source::Combined)], Some(lsd), Some(ssd), 2)?;
            log.extend_as(la, 0);
            log.extend_as(lb, 1);
            log.extend_as(lc, 2);
            (vec![a, b, c], None)
        }
        Regime::ImplicitSwitch => {
            let tasks = [HeadTask::new(RegLsd, Source::Combined), HeadTask::new(Cls, Source::Combined)];
            let (m, l) = single(&[RegLsd, Cls], &tasks, Some(lsd), Some(ssd), 0)?;
            log.extend_as(l, 0);
            (vec![m], None)
        }
        Regime::MetaSwitch => {
            let init = fresh(&net, &HeadId::ALL, seed(0))?;
            let c = TrainConfig {
                master_seed: seed(0),
                ..cfg
            };
            let (m, l) = maml_train(init, lsd, ssd, mcfg, &c)?;
            log.extend_as(l, 0);
            let (m, l) = finetune_heads(m, lsd, ssd, &c)?;
            log.extend_as(l, 0);
            (vec![m], None)
        }
    };
    TrainedBundle::new(regime, models, threshold, log)
}
