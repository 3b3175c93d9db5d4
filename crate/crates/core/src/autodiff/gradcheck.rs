//! Central finite-difference comparison against reverse-mode gradients.

use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::real::Real;

/// One probed coordinate: the reverse-mode value and central differences
/// at the full and the halved step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub analytic: f64,
    pub central: f64,
    pub central_half: f64,
}

/// Raw outcome of one comparison; judge it with [`GradReport::assess`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub probes: Vec<Probe>,
}

/// A report judged at a tolerance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assessment {
    /// Largest absolute discrepancy over the retained probes.
    pub max_abs_err: f64,
    /// Largest gradient magnitude seen on either side.
    pub scale: f64,
    /// `max_abs_err / scale`.
    pub rel_err: f64,
    /// Probes dropped because the two step sizes disagree, i.e. the step
    /// straddles a kink of a piecewise-linear function.
    pub skipped: usize,
    pub pass: bool,
}

/// At most this fraction of probes may be dropped as kinks.
const MAX_SKIPPED_FRACTION: f64 = 0.25;

impl GradReport {
    pub fn assess(&self, tol: f64) -> Assessment {
        let scale = self
            .probes
            .iter()
            .fold(0.0f64, |m, p| m.max(p.analytic.abs()).max(p.central.abs()));
        let floor = if scale > 0.0 { tol * scale } else { tol };
        let mut max_abs_err = 0.0f64;
        let mut skipped = 0;
        for p in &self.probes {
            if (p.central - p.central_half).abs() > floor {
                skipped += 1;
            } else {
                max_abs_err = max_abs_err.max((p.analytic - p.central).abs());
            }
        }
        let rel_err = if scale > 0.0 { max_abs_err / scale } else { max_abs_err };
        let pass = rel_err <= tol && (skipped as f64) <= MAX_SKIPPED_FRACTION * self.probes.len() as f64;
        Assessment { max_abs_err, scale, rel_err, skipped, pass }
    }

    /// Keeps this report's reverse-mode values but takes the finite
    /// differences from `reference`, a run of the same check on the same
    /// draws (typically in higher precision).
    pub fn with_reference(mut self, reference: &GradReport) -> Result<GradReport> {
        if reference.name != self.name || reference.probes.len() != self.probes.len() {
            return Err(Error::invalid(format!("reference {:?} does not match check {:?}", reference.name, self.name)));
        }
        for (p, r) in self.probes.iter_mut().zip(&reference.probes) {
            p.central = r.central;
            p.central_half = r.central_half;
        }
        Ok(self)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.assess(tol).pass
    }
}

/// Indices probed when at most `limit` of `n` coordinates are checked:
/// evenly strided so both ends are covered.
fn probe_indices(n: usize, limit: usize) -> Vec<usize> {
    if n <= limit || limit == 0 {
        return (0..n).collect();
    }
    let mut idx: Vec<usize> = (0..limit).map(|k| k * (n - 1) / (limit - 1).max(1)).collect();
    idx.dedup();
    idx
}

fn loss_value<T: Real>(g: &Graph<T>, loss: Var) -> Result<f64> {
    if g.shape(loss).iter().product::<usize>() != 1 {
        return Err(Error::shape("gradient check needs a scalar loss"));
    }
    Ok(g.scalar(loss).f64())
}

/// Checks `d loss / d x` where `build` maps an input node to a scalar loss.
pub fn check_input<T: Real>(
    name: &str,
    x: &Tensor<T>,
    eps: f64,
    max_probes: usize,
    build: impl Fn(&mut Graph<T>, Var) -> Result<Var>,
) -> Result<GradReport> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let loss = build(&mut g, xv)?;
    loss_value(&g, loss)?;
    let grads = g.backward(loss)?;
    let zeros = vec![T::zero(); x.numel()];
    let analytic = grads.wrt(xv).unwrap_or(&zeros);

    let eval = |t: Tensor<T>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t);
        let l = build(&mut g, v)?;
        loss_value(&g, l)
    };
    let mut probes = Vec::new();
    for i in probe_indices(x.numel(), max_probes) {
        let central = |h: f64| -> Result<f64> {
            let mut plus = x.clone();
            plus.data_mut()[i] += T::of(h);
            let mut minus = x.clone();
            minus.data_mut()[i] -= T::of(h);
            Ok((eval(plus)? - eval(minus)?) / (2.0 * h))
        };
        probes.push(Probe { analytic: analytic[i].f64(), central: central(eps)?, central_half: central(eps / 2.0)? });
    }
    Ok(GradReport { name: name.to_string(), probes })
}

/// Checks the gradient with respect to the listed parameters of `store`.
pub fn check_params<T: Real>(
    name: &str,
    store: &ParamStore<T>,
    ids: &[ParamId],
    eps: f64,
    max_probes_per_param: usize,
    build: impl Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
) -> Result<GradReport> {
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    loss_value(&g, loss)?;
    let grads = g.backward(loss)?;

    let mut work = store.clone();
    let mut probes = Vec::new();
    for &id in ids {
        let analytic = grads.param(id).unwrap_or_else(|| vec![T::zero(); store.entry(id).len()]);
        for i in probe_indices(store.entry(id).len(), max_probes_per_param) {
            let orig = store.entry(id).value()[i];
            let mut at = |v: T| -> Result<f64> {
                work.entry_mut(id).value_mut()[i] = v;
                let mut g = Graph::new();
                let l = build(&mut g, &work)?;
                loss_value(&g, l)
            };
            let central = (at(orig + T::of(eps))? - at(orig - T::of(eps))?) / (2.0 * eps);
            let half = eps / 2.0;
            let central_half = (at(orig + T::of(half))? - at(orig - T::of(half))?) / (2.0 * half);
            work.entry_mut(id).value_mut()[i] = orig;
            probes.push(Probe { analytic: analytic[i].f64(), central, central_half });
        }
    }
    Ok(GradReport { name: name.to_string(), probes })
}
