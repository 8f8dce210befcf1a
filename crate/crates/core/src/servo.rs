//! Closed-loop pose-based visual servoing with pluggable estimators.
//!
//! Each step renders the current view, estimates the camera pose relative
//! to the goal, converts it to a camera twist with a proportional law and
//! integrates the twist. Switching policies only choose which estimator
//! runs; the law and the integrator are shared.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::{integrate_twist, relative_pose, Pose, ThetaU, Twist, Vec3};
use crate::scene::{check_view, render, CameraIntrinsics, Image, Scene};
use crate::tensornet::{HeadId, HeadSet, PairInput};
use crate::train::{Regime, TrainedBundle};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ServoConfig {
    /// Proportional gain, per unit time.
    pub lambda: f64,
    pub dt: f64,
    pub max_steps: usize,
    /// The loop stops once the commanded twist norm falls below this.
    pub stop_velocity_norm: f64,
}

impl Default for ServoConfig {
    fn default() -> Self {
        Self {
            lambda: 0.15,
            dt: 1.0,
            max_steps: 200,
            stop_velocity_norm: 1e-5,
        }
    }
}

impl ServoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.dt > 0.0 && self.lambda * self.dt < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "need lambda > 0, dt > 0 and lambda·dt < 1 (got {}, {})",
                self.lambda, self.dt
            )));
        }
        if self.max_steps == 0 || !(self.stop_velocity_norm >= 0.0) {
            return Err(Error::InvalidConfig("max_steps must be positive".into()));
        }
        Ok(())
    }
}

/// `v = −λ·Rᵀ·t`, `ω = −λ·θu(R)` for the current camera pose `rel`
/// expressed in the goal frame; both in the current camera frame.
pub fn control_law(rel: &Pose, lambda: f64) -> Twist {
    Twist {
        linear: -lambda * (rel.rotation.transpose() * rel.translation),
        angular: -lambda * rel.thetau().vector(),
    }
}

/// Mean squared difference over all pixels and channels.
pub fn photometric_mse(a: &Image, b: &Image) -> Result<f64> {
    if a.width != b.width || a.height != b.height || a.data.len() != b.data.len() {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    if a.data.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.data.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PolicyKind {
    /// Exact geometry; no network.
    Oracle,
    SingleModel(HeadId),
    /// Fine model below `threshold`; back to the coarse model only above
    /// `threshold · hysteresis`.
    MseThreshold { threshold: f64, hysteresis: f64 },
    /// Majority vote of the classifier over the last `window` steps.
    ClassifierDriven { window: usize },
}

pub const DEFAULT_HYSTERESIS: f64 = 2.0;
pub const DEFAULT_VOTE_WINDOW: usize = 3;

impl FromStr for PolicyKind {
    type Err = Error;

    /// `oracle`, `single-lsd`, `single-ssd`, `mse:THRESH` or `cls`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(PolicyKind::Oracle),
            "single-lsd" => Ok(PolicyKind::SingleModel(HeadId::RegLsd)),
            "single-ssd" => Ok(PolicyKind::SingleModel(HeadId::RegSsd)),
            "cls" => Ok(PolicyKind::ClassifierDriven {
                window: DEFAULT_VOTE_WINDOW,
            }),
            _ => match s.strip_prefix("mse:").map(str::parse::<f64>) {
                Some(Ok(t)) => Ok(PolicyKind::MseThreshold {
                    threshold: t,
                    hysteresis: DEFAULT_HYSTERESIS,
                }),
                _ => Err(Error::InvalidConfig(format!("unknown policy {s:?}"))),
            },
        }
    }
}

/// Policy plus its runtime state.
#[derive(Clone, Debug, PartialEq)]
pub struct SwitchPolicy {
    pub kind: PolicyKind,
    active: HeadId,
    votes: VecDeque<HeadId>,
}

impl SwitchPolicy {
    pub fn new(kind: PolicyKind) -> Result<Self> {
        let active = match kind {
            PolicyKind::SingleModel(h) if !h.is_regression() => {
                return Err(Error::InvalidConfig("the classifier cannot drive the loop".into()))
            }
            PolicyKind::SingleModel(h) => h,
            PolicyKind::MseThreshold { threshold, hysteresis } => {
                if !(threshold.is_finite() && threshold >= 0.0 && hysteresis >= 1.0) {
                    return Err(Error::InvalidConfig("threshold ≥ 0 and hysteresis ≥ 1 required".into()));
                }
                HeadId::RegLsd
            }
            PolicyKind::ClassifierDriven { window } => {
                if window == 0 {
                    return Err(Error::InvalidConfig("vote window must be at least 1".into()));
                }
                HeadId::RegLsd
            }
            PolicyKind::Oracle => HeadId::RegLsd,
        };
        Ok(Self {
            kind,
            active,
            votes: VecDeque::new(),
        })
    }

    /// The policy each regime is evaluated with.
    pub fn default_for(bundle: &TrainedBundle) -> Result<Self> {
        let kind = match bundle.regime {
            Regime::LsdOnly | Regime::Comb | Regime::ImplicitSwitch => PolicyKind::SingleModel(HeadId::RegLsd),
            Regime::VanillaSwitch => PolicyKind::MseThreshold {
                threshold: bundle
                    .threshold
                    .ok_or_else(|| Error::IncompatibleBundle("missing threshold".into()))?,
                hysteresis: DEFAULT_HYSTERESIS,
            },
            Regime::CnnSwitch | Regime::MetaSwitch => PolicyKind::ClassifierDriven {
                window: DEFAULT_VOTE_WINDOW,
            },
        };
        Self::new(kind)
    }

    /// Regression head currently driving the loop.
    pub fn active(&self) -> HeadId {
        self.active
    }

    pub fn votes(&self) -> impl Iterator<Item = HeadId> + '_ {
        self.votes.iter().copied()
    }

    /// Heads the bundle must provide.
    fn required(&self) -> HeadSet {
        match self.kind {
            PolicyKind::Oracle => HeadSet::default(),
            PolicyKind::SingleModel(h) => HeadSet::of(&[h]),
            PolicyKind::MseThreshold { .. } => HeadSet::of(&[HeadId::RegLsd, HeadId::RegSsd]),
            PolicyKind::ClassifierDriven { .. } => HeadSet::all(),
        }
    }

    pub fn check_bundle(&self, bundle: Option<&TrainedBundle>) -> Result<()> {
        for h in self.required().iter() {
            if bundle.and_then(|b| b.model_for(h)).is_none() {
                return Err(Error::IncompatibleBundle(format!("policy needs head {}", h.name())));
            }
        }
        Ok(())
    }

    fn apply_mse(&mut self, mse: f64) {
        if let PolicyKind::MseThreshold { threshold, hysteresis } = self.kind {
            self.active = match self.active {
                HeadId::RegLsd if mse < threshold => HeadId::RegSsd,
                HeadId::RegSsd if mse > threshold * hysteresis => HeadId::RegLsd,
                a => a,
            };
        }
    }

    /// Records a classifier vote and applies the window majority; a tie
    /// keeps the current head.
    pub fn push_vote(&mut self, vote: HeadId) {
        if let PolicyKind::ClassifierDriven { window } = self.kind {
            self.votes.push_back(vote);
            while self.votes.len() > window {
                self.votes.pop_front();
            }
            let ssd = self.votes.iter().filter(|v| **v == HeadId::RegSsd).count();
            let lsd = self.votes.len() - ssd;
            if ssd > lsd {
                self.active = HeadId::RegSsd;
            } else if lsd > ssd {
                self.active = HeadId::RegLsd;
            }
        }
    }
}

/// Result of one estimation step.
#[derive(Clone, Debug, PartialEq)]
pub struct Estimate {
    pub pose: Pose,
    /// Raw 6-vector (t, θu) before wrapping; exact values for the oracle.
    pub raw: [f64; 6],
    pub active: Option<HeadId>,
    pub photometric_mse: f64,
}

fn pose_from_output(out: &[f64]) -> Result<(Pose, [f64; 6])> {
    let mut raw = [0.0; 6];
    raw.copy_from_slice(&out[..6]);
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::DivergenceDetected("non-finite pose estimate".into()));
    }
    let t = Vec3::new(raw[0], raw[1], raw[2]);
    let u = ThetaU::wrapped(Vec3::new(raw[3], raw[4], raw[5]));
    Ok((Pose::from_thetau(t, &u), raw))
}

/// Estimates the current camera pose in the goal frame. `truth` is only
/// read by the oracle policy.
pub fn estimate_step(
    bundle: Option<&TrainedBundle>,
    policy: &mut SwitchPolicy,
    reference: &Image,
    current: &Image,
    truth: &Pose,
) -> Result<Estimate> {
    policy.check_bundle(bundle)?;
    let (rp, cp) = (reference.pack(), current.pack());
    let mse = photometric_mse(&rp.unpack(), &cp.unpack())?;
    if let PolicyKind::Oracle = policy.kind {
        let u = truth.thetau().vector();
        let t = truth.translation;
        return Ok(Estimate {
            pose: *truth,
            raw: [t.x, t.y, t.z, u.x, u.y, u.z],
            active: None,
            photometric_mse: mse,
        });
    }
    let bundle = bundle.expect("checked above");
    let mut cache: Vec<(usize, PairInput)> = Vec::new();
    let mut input_for = |m: usize| -> Result<PairInput> {
        if let Some((_, i)) = cache.iter().find(|(k, _)| *k == m) {
            return Ok(i.clone());
        }
        let i = PairInput::from_packed(&bundle.models[m].norm, &rp, &cp)?;
        cache.push((m, i.clone()));
        Ok(i)
    };
    let model_index = |h: HeadId| bundle.models.iter().position(|m| m.heads.contains(h)).expect("checked above");

    match policy.kind {
        PolicyKind::MseThreshold { .. } => policy.apply_mse(mse),
        PolicyKind::ClassifierDriven { .. } => {
            let m = model_index(HeadId::Cls);
            let model = &bundle.models[m];
            // One trunk pass serves the vote and both regressors when they
            // share a model.
            let heads: Vec<HeadId> = model.heads.iter().collect();
            let outs = model.predict(&input_for(m)?, &heads)?;
            let logits = &outs[heads.iter().position(|h| *h == HeadId::Cls).unwrap()];
            let vote = if logits[1] > logits[0] { HeadId::RegSsd } else { HeadId::RegLsd };
            policy.push_vote(vote);
            if let Some(k) = heads.iter().position(|h| *h == policy.active) {
                let (pose, raw) = pose_from_output(&outs[k])?;
                return Ok(Estimate {
                    pose,
                    raw,
                    active: Some(policy.active),
                    photometric_mse: mse,
                });
            }
        }
        _ => {}
    }
    let h = policy.active;
    let m = model_index(h);
    let out = bundle.models[m].predict(&input_for(m)?, &[h])?.remove(0);
    let (pose, raw) = pose_from_output(&out)?;
    Ok(Estimate {
        pose,
        raw,
        active: Some(h),
        photometric_mse: mse,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// True translation error at the start of the step, meters.
    pub pos_err: f64,
    /// True rotation error ‖θu‖ at the start of the step, radians.
    pub rot_err: f64,
    pub estimate: [f64; 6],
    pub twist: Twist,
    pub photometric_mse: f64,
    pub active: Option<HeadId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ServoTrace {
    pub steps: Vec<StepRecord>,
    /// Error at the final pose, or at the last valid pose of a failed run.
    pub final_pos_err: f64,
    pub final_rot_err: f64,
    pub failed: bool,
    pub failure: Option<String>,
}

fn sci(v: f64) -> String {
    format!("{v:.16e}")
}

impl ServoTrace {
    pub fn steps_used(&self) -> usize {
        self.steps.len()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,pos_err_m,rot_err_rad,photometric_mse,twist_norm,active_head\n");
        for r in &self.steps {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.step,
                sci(r.pos_err),
                sci(r.rot_err),
                sci(r.photometric_mse),
                sci(r.twist.norm()),
                r.active.map_or("none", HeadId::name)
            );
        }
        s
    }
}

fn errors(goal: &Pose, cur: &Pose) -> (f64, f64) {
    let rel = relative_pose(goal, cur);
    (rel.translation.norm(), rel.thetau().angle())
}

/// Runs one servo experiment from `start` towards `goal`.
///
/// The goal image is rendered once. A run whose camera leaves the valid
/// viewing region, or whose estimator produces non-finite output, ends
/// early with `failed` set and the last valid error as its result.
pub fn run_servo(
    scene: &Scene,
    goal: &Pose,
    start: &Pose,
    bundle: Option<&TrainedBundle>,
    mut policy: SwitchPolicy,
    intr: &CameraIntrinsics,
    cfg: &ServoConfig,
) -> Result<ServoTrace> {
    cfg.validate()?;
    policy.check_bundle(bundle)?;
    let reference = render(scene, goal, intr)?;
    check_view(start)?;
    let mut cur = *start;
    let (mut last_pos, mut last_rot) = errors(goal, &cur);
    let mut steps = Vec::new();
    let mut failure = None;
    let mut stopped = false;
    for step in 0..cfg.max_steps {
        let image = match render(scene, &cur, intr) {
            Ok(i) => i,
            Err(e) => {
                failure = Some(e.to_string());
                break;
            }
        };
        let truth = relative_pose(goal, &cur);
        let (pos_err, rot_err) = (truth.translation.norm(), truth.thetau().angle());
        last_pos = pos_err;
        last_rot = rot_err;
        let est = match estimate_step(bundle, &mut policy, &reference, &image, &truth) {
            Ok(e) => e,
            Err(Error::DivergenceDetected(m)) => {
                failure = Some(m);
                break;
            }
            Err(e) => return Err(e),
        };
        let twist = control_law(&est.pose, cfg.lambda);
        steps.push(StepRecord {
            step,
            pos_err,
            rot_err,
            estimate: est.raw,
            twist,
            photometric_mse: est.photometric_mse,
            active: est.active,
        });
        if twist.norm() < cfg.stop_velocity_norm {
            stopped = true;
            break;
        }
        cur = integrate_twist(&cur, &twist, cfg.dt);
    }
    if failure.is_none() && !stopped {
        // The last integration moved the camera; score the pose it reached.
        match check_view(&cur) {
            Ok(()) => (last_pos, last_rot) = errors(goal, &cur),
            Err(e) => failure = Some(e.to_string()),
        }
    }
    Ok(ServoTrace {
        steps,
        final_pos_err: last_pos,
        final_rot_err: last_rot,
        failed: failure.is_some(),
        failure,
    })
}
