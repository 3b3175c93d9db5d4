//! Least-squares adversarial, reconstruction and cycle terms.
//!
//! All reductions are means over every element, so replicating samples in
//! a batch leaves each loss unchanged.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::real::Real;

/// Targets of the least-squares objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LsganLabels {
    /// What generators want their fakes to be scored as.
    pub target: f64,
    pub fake: f64,
    pub real: f64,
}

impl Default for LsganLabels {
    fn default() -> Self {
        LsganLabels { target: 1.0, fake: 0.0, real: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub cycle: f64,
    pub reconstruction: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { cycle: 10.0, reconstruction: 5.0 }
    }
}

fn check<T: Real>(g: &Graph<T>, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape(format!("loss operands {:?} and {:?}", g.shape(a), g.shape(b))));
    }
    Ok(())
}

/// `mean((pred - target)^2)`.
pub fn mse<T: Real>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    check(g, pred, target)?;
    let d = g.sub(pred, target)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// `0.5 * mean((pred - target)^2)`, used for reconstruction and cycle terms.
pub fn half_mse<T: Real>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    let m = mse(g, pred, target)?;
    Ok(g.scale(m, T::of(0.5)))
}

/// `0.5 * mean((score - label)^2)` over a score map.
pub fn toward_label<T: Real>(g: &mut Graph<T>, score: Var, label: f64) -> Var {
    let d = g.offset(score, T::of(-label));
    let sq = g.square(d);
    let m = g.mean(sq);
    g.scale(m, T::of(0.5))
}

pub fn generator_adv<T: Real>(g: &mut Graph<T>, fake_score: Var, labels: LsganLabels) -> Var {
    toward_label(g, fake_score, labels.target)
}

pub fn discriminator<T: Real>(g: &mut Graph<T>, real_score: Var, fake_score: Var, labels: LsganLabels) -> Result<Var> {
    let r = toward_label(g, real_score, labels.real);
    let f = toward_label(g, fake_score, labels.fake);
    g.add(r, f)
}

/// Coarse discriminator objective while the pre-fusion stage trains: its
/// output is the fake, the fine-to-coarse output the real sample.
pub fn coarse_disc_vs_prefusion<T: Real>(
    g: &mut Graph<T>,
    score_prefusion: Var,
    score_reduced: Var,
    labels: LsganLabels,
) -> Result<Var> {
    discriminator(g, score_reduced, score_prefusion, labels)
}

/// The same pair with the roles exchanged, used while the fine-to-coarse
/// generator trains.
pub fn coarse_disc_vs_reduced<T: Real>(
    g: &mut Graph<T>,
    score_prefusion: Var,
    score_reduced: Var,
    labels: LsganLabels,
) -> Result<Var> {
    discriminator(g, score_prefusion, score_reduced, labels)
}

/// `adv + cycle_weight * cyc + reconstruction_weight * rec`.
pub fn joint<T: Real>(g: &mut Graph<T>, adv: Var, cyc: Var, rec: Var, w: LossWeights) -> Result<Var> {
    if w.cycle < 0.0 || w.reconstruction < 0.0 {
        return Err(Error::invalid("loss weights must be nonnegative"));
    }
    let c = g.scale(cyc, T::of(w.cycle));
    let r = g.scale(rec, T::of(w.reconstruction));
    let s = g.add(adv, c)?;
    g.add(s, r)
}
