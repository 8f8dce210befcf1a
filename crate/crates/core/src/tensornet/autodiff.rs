//! Gradients, Hessian-vector products and MAML meta-gradients of
//! objectives over a flat parameter vector.
//!
//! An objective is a sum of independent terms (typically one per sample);
//! each term is built on its own tape, which keeps memory bounded by a
//! single sample.

use super::graph::{Grads, Graph, Tensor, Var};
use super::net::{ModelParams, ParamGroup};
use super::scalar::{Dual, Scalar};
use crate::error::{Error, Result};

pub trait Objective {
    fn terms(&self) -> usize {
        1
    }

    /// Builds term `term` on `g`, given one leaf per parameter group.
    fn build<S: Scalar>(&self, g: &mut Graph<S>, params: &[Var], term: usize) -> Result<Var>;
}

/// Parameter groups plus which of them are differentiated.
#[derive(Clone, Debug)]
pub struct ParamSpace<'a> {
    pub groups: &'a [ParamGroup],
    pub trainable: Vec<bool>,
}

impl<'a> ParamSpace<'a> {
    pub fn all(groups: &'a [ParamGroup]) -> Self {
        Self {
            groups,
            trainable: vec![true; groups.len()],
        }
    }

    pub fn with_mask(groups: &'a [ParamGroup], trainable: Vec<bool>) -> Self {
        assert_eq!(groups.len(), trainable.len());
        Self { groups, trainable }
    }

    pub fn of_model(p: &'a ModelParams) -> Self {
        Self::all(&p.groups)
    }

    pub fn len(&self) -> usize {
        self.groups.iter().map(|g| g.offset + g.len()).max().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, values: &[f64]) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::LengthMismatch {
                expected: self.len(),
                found: values.len(),
            });
        }
        Ok(())
    }

    /// Zeroes entries belonging to frozen groups.
    fn mask(&self, v: &mut [f64]) {
        for (g, &t) in self.groups.iter().zip(&self.trainable) {
            if !t {
                v[g.range()].fill(0.0);
            }
        }
    }
}

/// One group covering a plain vector, for objectives that are not networks.
pub fn vector_group(name: &str, len: usize) -> Vec<ParamGroup> {
    vec![ParamGroup {
        name: name.to_string(),
        shape: vec![len],
        offset: 0,
    }]
}

fn bind<S: Scalar>(space: &ParamSpace, g: &mut Graph<S>, values: &[S]) -> Vec<Var> {
    space
        .groups
        .iter()
        .zip(&space.trainable)
        .map(|(grp, &t)| {
            let tensor = Tensor {
                shape: grp.shape.clone(),
                data: values[grp.range()].to_vec(),
            };
            if t {
                g.param(tensor)
            } else {
                g.constant(tensor)
            }
        })
        .collect()
}

fn scalar_out<S: Scalar>(g: &Graph<S>, v: Var) -> Result<S> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::ShapeMismatch(format!("objective term has shape {:?}", t.shape)));
    }
    Ok(t.data[0])
}

fn scatter<S: Scalar>(space: &ParamSpace, grads: &Grads<S>, vars: &[Var], re: &mut [f64], tan: Option<&mut [f64]>) {
    let mut tan = tan;
    for ((grp, &v), &t) in space.groups.iter().zip(vars).zip(&space.trainable) {
        if !t {
            continue;
        }
        if let Some(gt) = grads.get(v) {
            for (o, x) in re[grp.range()].iter_mut().zip(&gt.data) {
                *o += x.re();
            }
            if let Some(tn) = tan.as_deref_mut() {
                for (o, x) in tn[grp.range()].iter_mut().zip(&gt.data) {
                    *o += x.tangent();
                }
            }
        }
    }
}

/// Objective value.
pub fn value(space: &ParamSpace, values: &[f64], obj: &impl Objective) -> Result<f64> {
    Ok(probe(space, values, obj)?.0)
}

/// Objective value and the combined kink signature of every term's tape.
/// Two parameter vectors with equal signatures lie on the same smooth
/// piece of the objective.
pub fn probe(space: &ParamSpace, values: &[f64], obj: &impl Objective) -> Result<(f64, u64)> {
    space.check(values)?;
    let frozen = ParamSpace::with_mask(space.groups, vec![false; space.groups.len()]);
    let mut total = 0.0;
    let mut sig = 0u64;
    for term in 0..obj.terms() {
        let mut g = Graph::<f64>::new();
        let vars = bind(&frozen, &mut g, values);
        let out = obj.build(&mut g, &vars, term)?;
        total += scalar_out(&g, out)?;
        sig = sig.rotate_left(7) ^ g.kink_signature();
    }
    Ok((total, sig))
}

/// Objective value and its gradient; frozen groups get zero gradient.
pub fn grad(space: &ParamSpace, values: &[f64], obj: &impl Objective) -> Result<(f64, Vec<f64>)> {
    space.check(values)?;
    let mut total = 0.0;
    let mut out = vec![0.0; values.len()];
    for term in 0..obj.terms() {
        let mut g = Graph::<f64>::new();
        let vars = bind(space, &mut g, values);
        let o = obj.build(&mut g, &vars, term)?;
        total += scalar_out(&g, o)?;
        let grads = g.backward(o)?;
        scatter(space, &grads, &vars, &mut out, None);
    }
    Ok((total, out))
}

/// Gradient together with the Hessian-vector product `H·dir`, by running
/// the reverse sweep on dual numbers whose tangents are seeded with `dir`.
pub fn grad_and_hvp(space: &ParamSpace, values: &[f64], obj: &impl Objective, dir: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    space.check(values)?;
    space.check(dir)?;
    let mut d = dir.to_vec();
    space.mask(&mut d);
    let duals: Vec<Dual> = values.iter().zip(&d).map(|(&v, &t)| Dual::new(v, t)).collect();
    let mut gr = vec![0.0; values.len()];
    let mut hv = vec![0.0; values.len()];
    for term in 0..obj.terms() {
        let mut g = Graph::<Dual>::new();
        let vars = bind(space, &mut g, &duals);
        let o = obj.build(&mut g, &vars, term)?;
        scalar_out(&g, o)?;
        let grads = g.backward(o)?;
        scatter(space, &grads, &vars, &mut gr, Some(&mut hv));
    }
    Ok((gr, hv))
}

pub fn hvp(space: &ParamSpace, values: &[f64], obj: &impl Objective, dir: &[f64]) -> Result<Vec<f64>> {
    Ok(grad_and_hvp(space, values, obj, dir)?.1)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MetaMode {
    /// Differentiates through the inner gradient step.
    #[default]
    Exact,
    /// Treats the inner gradient as a constant.
    FirstOrder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaGrad {
    /// Gradient of the outer loss at the adapted point, with respect to
    /// the pre-adaptation parameters.
    pub grad: Vec<f64>,
    pub inner_loss: f64,
    /// Outer loss evaluated at the adapted parameters.
    pub outer_loss: f64,
    pub adapted: Vec<f64>,
}

/// Gradient of `θ ↦ outer(θ − α∇inner(θ))`.
///
/// With `u = ∇outer(θ')` the exact result is `u − α·H_inner(θ)·u`; the
/// first-order mode returns `u`.
pub fn meta_grad(
    space: &ParamSpace,
    values: &[f64],
    inner: &impl Objective,
    outer: &impl Objective,
    alpha: f64,
    mode: MetaMode,
) -> Result<MetaGrad> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidConfig(format!("inner step size {alpha}")));
    }
    let (inner_loss, g_in) = grad(space, values, inner)?;
    let adapted: Vec<f64> = if alpha == 0.0 {
        values.to_vec()
    } else {
        values.iter().zip(&g_in).map(|(v, g)| v - alpha * g).collect()
    };
    let (outer_loss, u) = grad(space, &adapted, outer)?;
    let grad = match mode {
        MetaMode::FirstOrder => u,
        MetaMode::Exact if alpha == 0.0 => u,
        MetaMode::Exact => {
            let hu = hvp(space, values, inner, &u)?;
            u.iter().zip(&hu).map(|(a, b)| a - alpha * b).collect()
        }
    };
    Ok(MetaGrad {
        grad,
        inner_loss,
        outer_loss,
        adapted,
    })
}
