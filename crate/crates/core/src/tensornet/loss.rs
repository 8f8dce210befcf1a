//! Training losses, as graph builders plus plain `f64` helpers.

use super::graph::{Graph, Var};
use super::net::LossBalance;
use super::scalar::Scalar;
use crate::dataset::DatasetKind;
use crate::error::{Error, Result};

/// Weight on the rotation term of the pose loss.
pub const DEFAULT_BETA: f64 = 0.2;

/// `‖t̂ − t‖ + β‖θ̂u − θu‖` on 6-vectors laid out as (t, θu).
pub fn loss_pose<S: Scalar>(g: &mut Graph<S>, pred: Var, label: Var, beta: f64) -> Result<Var> {
    if g.shape(pred) != [6] || g.shape(label) != [6] {
        return Err(Error::ShapeMismatch("pose loss expects 6-vectors".into()));
    }
    let d = g.sub(pred, label)?;
    let dt = g.slice(d, 0, 3)?;
    let dr = g.slice(d, 3, 3)?;
    let nt = g.norm2(dt);
    let nr = g.norm2(dr);
    let nr = g.scale(nr, beta);
    g.add(nt, nr)
}

/// Softmax cross-entropy of two logits against the origin label.
pub fn loss_cls<S: Scalar>(g: &mut Graph<S>, logits: Var, origin: DatasetKind) -> Result<Var> {
    if g.shape(logits) != [2] {
        return Err(Error::ShapeMismatch("classifier loss expects 2 logits".into()));
    }
    g.cross_entropy(logits, origin.class_index())
}

/// `Σ Lᵢ·exp(−Ŝᵢ) + Ŝᵢ` over scalar loss nodes and scalar balance nodes.
pub fn loss_autobalance<S: Scalar>(g: &mut Graph<S>, losses: &[Var], s_hat: &[Var]) -> Result<Var> {
    if losses.len() != s_hat.len() {
        return Err(Error::LengthMismatch {
            expected: losses.len(),
            found: s_hat.len(),
        });
    }
    let mut total: Option<Var> = None;
    for (&l, &s) in losses.iter().zip(s_hat) {
        let neg = g.scale(s, -1.0);
        let w = g.exp(neg);
        let lw = g.mul(l, w)?;
        let term = g.add(lw, s)?;
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(g.scalar_const(0.0)),
    }
}

pub fn pose_loss_value(pred: &[f64], label: &[f64], beta: f64) -> f64 {
    let n = |r: std::ops::Range<usize>| r.map(|i| (pred[i] - label[i]).powi(2)).sum::<f64>().sqrt();
    n(0..3) + beta * n(3..6)
}

pub fn cls_loss_value(logits: &[f64], origin: DatasetKind) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
    z.ln() + m - logits[origin.class_index()]
}

pub fn autobalance_value(losses: &[f64], bal: &LossBalance) -> Result<f64> {
    if losses.len() != bal.s_hat.len() {
        return Err(Error::LengthMismatch {
            expected: losses.len(),
            found: bal.s_hat.len(),
        });
    }
    Ok(losses
        .iter()
        .zip(&bal.s_hat)
        .map(|(l, s)| l * (-s).exp() + s)
        .sum())
}

/// Value of the balanced loss together with its partial derivatives with
/// respect to each loss and each balance scalar, obtained by a reverse
/// sweep over [`loss_autobalance`].
pub struct BalancedLoss {
    pub value: f64,
    pub d_losses: Vec<f64>,
    pub d_s_hat: Vec<f64>,
}

pub fn autobalance_with_grads(losses: &[f64], bal: &LossBalance) -> Result<BalancedLoss> {
    let mut g = Graph::<f64>::new();
    let lv: Vec<Var> = losses.iter().map(|&l| g.param(super::Tensor::scalar(l))).collect();
    let sv: Vec<Var> = bal.s_hat.iter().map(|&s| g.param(super::Tensor::scalar(s))).collect();
    let out = loss_autobalance(&mut g, &lv, &sv)?;
    let value = g.value(out).data[0];
    if lv.is_empty() {
        return Ok(BalancedLoss {
            value,
            d_losses: vec![],
            d_s_hat: vec![],
        });
    }
    let grads = g.backward(out)?;
    let pick = |vs: &[Var]| vs.iter().map(|&v| grads.get(v).map_or(0.0, |t| t.data[0])).collect();
    Ok(BalancedLoss {
        value,
        d_losses: pick(&lv),
        d_s_hat: pick(&sv),
    })
}

#[cfg(test)]
mod tests {
    use super::super::Tensor;
    use super::*;

    fn vec6<S: Scalar>(g: &mut Graph<S>, v: [f64; 6]) -> Var {
        g.constant(Tensor::from_f64(vec![6], &v).unwrap())
    }

    #[test]
    fn pose_loss_examples() {
        let mut g = Graph::<f64>::new();
        let a = vec6(&mut g, [0.1, 0.2, 0.3, 0.01, 0.02, 0.03]);
        let l = loss_pose(&mut g, a, a, DEFAULT_BETA).unwrap();
        assert_eq!(g.value(l).data[0], 0.0);
        let p = vec6(&mut g, [0.3, 0.0, 0.0, 0.1, 0.0, 0.0]);
        let t = vec6(&mut g, [0.0, 0.0, 0.0, 0.1, 0.0, 0.0]);
        let l = loss_pose(&mut g, p, t, 0.2).unwrap();
        assert!((g.value(l).data[0] - 0.3).abs() < 1e-15);
        assert_eq!(pose_loss_value(&[0.3, 0., 0., 0.1, 0., 0.], &[0., 0., 0., 0.1, 0., 0.], 0.2), g.value(l).data[0]);
    }

    #[test]
    fn cls_loss_examples() {
        assert!(cls_loss_value(&[20.0, -20.0], DatasetKind::Lsd) < 1e-8);
        assert!((cls_loss_value(&[0.0, 0.0], DatasetKind::Ssd) - 2f64.ln()).abs() < 1e-15);
        let mut g = Graph::<f64>::new();
        let z = g.param(Tensor::from_f64(vec![2], &[20.0, -20.0]).unwrap());
        let l = loss_cls(&mut g, z, DatasetKind::Lsd).unwrap();
        assert!(g.value(l).data[0] < 1e-8);
    }

    #[test]
    fn cls_gradient_matches_central_differences() {
        let logits = [0.7, -1.3];
        for origin in [DatasetKind::Lsd, DatasetKind::Ssd] {
            let mut g = Graph::<f64>::new();
            let z = g.param(Tensor::from_f64(vec![2], &logits).unwrap());
            let l = loss_cls(&mut g, z, origin).unwrap();
            let gr = g.backward(l).unwrap();
            let an = &gr.get(z).unwrap().data;
            let h = 1e-5;
            for i in 0..2 {
                let mut p = logits;
                let mut m = logits;
                p[i] += h;
                m[i] -= h;
                let fd = (cls_loss_value(&p, origin) - cls_loss_value(&m, origin)) / (2.0 * h);
                assert!((an[i] - fd).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn autobalance_examples() {
        let zero = LossBalance::zeros(3);
        assert_eq!(autobalance_value(&[1.5, 2.5, 0.25], &zero).unwrap(), 1.5 + 2.5 + 0.25);
        let bal = LossBalance { s_hat: vec![1.0, -1.0] };
        let want = 2.0 * (-1f64).exp() + 1.0 + 3.0 * 1f64.exp() - 1.0;
        assert!((autobalance_value(&[2.0, 3.0], &bal).unwrap() - want).abs() < 1e-14);
        let full = autobalance_with_grads(&[2.0, 3.0], &bal).unwrap();
        assert!((full.value - want).abs() < 1e-14);
        assert!((full.d_losses[0] - (-1f64).exp()).abs() < 1e-15);
        assert!((full.d_s_hat[1] - (1.0 - 3.0 * 1f64.exp())).abs() < 1e-13);
        assert!(matches!(
            autobalance_value(&[1.0], &zero),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn autobalance_single_loss_stationary_at_zero() {
        let r = autobalance_with_grads(&[1.0], &LossBalance::zeros(1)).unwrap();
        assert_eq!(r.d_s_hat[0], 0.0);
    }
}
