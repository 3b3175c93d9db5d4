//! Finite-difference checks of every differentiable building block, from
//! single graph primitives up to the complete training objectives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::{check_input, check_params, GradReport};
use crate::autodiff::{Bind, ConvSpec, Graph, PadMode, ParamId, ParamStore, Tensor, Var};
use crate::dmg::{fit_local_linear, Dmg, FeatureNet, GuidedParams};
use crate::error::Result;
use crate::layers::{Conv, Deconv};
use crate::losses::{self, LossWeights, LsganLabels};
use crate::real::Real;
use crate::resample::{shared_op, OpKind};
use crate::ssrc::{BlockShape, Direction, Discriminator, GeneratorBlock, PyramidGenerator};

/// Relative tolerance in double precision.
pub const TOL_F64: f64 = 1e-6;
/// Relative tolerance in single precision.
pub const TOL_F32: f64 = 1e-3;

/// Step and tolerance suited to a precision. The probe count is shared so
/// that runs in both precisions visit the same coordinates.
#[derive(Debug, Clone, Copy)]
pub struct Settings {
    pub eps: f64,
    pub tol: f64,
    pub probes: usize,
}

impl Settings {
    pub fn for_precision<T: Real>() -> Self {
        if std::mem::size_of::<T>() == 8 {
            Settings { eps: 1e-5, tol: TOL_F64, probes: 24 }
        } else {
            Settings { eps: 4e-3, tol: TOL_F32, probes: 24 }
        }
    }
}

/// Double-precision gradients against double-precision central differences.
pub fn run_f64() -> Result<Vec<GradReport>> {
    run::<f64>()
}

/// Single-precision gradients against the central differences of
/// `reference`, the output of [`run_f64`]. Every input and parameter is
/// drawn in double precision and rounded, so both runs see the same values
/// up to single-precision rounding; differencing in single precision
/// would mostly measure its own roundoff through the deeper networks.
pub fn run_f32(reference: &[GradReport]) -> Result<Vec<GradReport>> {
    let own = run::<f32>()?;
    if own.len() != reference.len() {
        return Err(crate::error::Error::invalid("reference run has a different set of checks"));
    }
    own.into_iter().zip(reference).map(|(r, f)| r.with_reference(f)).collect()
}

fn uniform<T: Real>(shape: [usize; 4], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.random_range(lo..hi))).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

/// Values bounded away from zero, so kinked activations are probed away
/// from their kink.
fn off_zero<T: Real>(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.2..1.0);
            T::of(if rng.random_bool(0.5) { m } else { -m })
        })
        .collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

/// Scalar readout `mean(x * w)` with fixed random `w`, so every output
/// element carries a distinct weight.
fn readout<T: Real>(g: &mut Graph<T>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = uniform(g.shape(x), -1.0, 1.0, &mut rng);
    let wv = g.constant(w);
    let p = g.mul(x, wv)?;
    Ok(g.mean(p))
}

fn resampler<T: Real>(g: &mut Graph<T>, x: Var, kind: OpKind) -> Result<Var> {
    let [_, _, h, w] = g.shape(x);
    g.resample(x, shared_op(kind, h, w)?)
}

/// Runs every check in precision `T` and returns one report per check.
fn run<T: Real>() -> Result<Vec<GradReport>> {
    let s = Settings::for_precision::<T>();
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let mut out = Vec::new();
    let x = off_zero::<T>([2, 3, 8, 8], &mut rng);
    let y = off_zero::<T>([2, 3, 8, 8], &mut rng);
    let pos = uniform::<T>([2, 3, 8, 8], 0.5, 2.0, &mut rng);

    let unary: Vec<(&str, Box<dyn Fn(&mut Graph<T>, Var) -> Result<Var>>)> = vec![
        ("square", Box::new(|g, v| Ok(g.square(v)))),
        ("scale", Box::new(|g, v| Ok(g.scale(v, T::of(-1.5))))),
        ("offset", Box::new(|g, v| Ok(g.offset(v, T::of(0.25))))),
        ("relu", Box::new(|g, v| Ok(g.relu(v)))),
        ("lrelu", Box::new(|g, v| Ok(g.lrelu(v, T::of(0.2))))),
        ("box_mean_r1", Box::new(|g, v| Ok(g.box_mean(v, 1)))),
        ("box_mean_r2", Box::new(|g, v| Ok(g.box_mean(v, 2)))),
        ("pyr_d2", Box::new(|g, v| resampler(g, v, OpKind::PyrD2))),
        ("pyr_u2", Box::new(|g, v| resampler(g, v, OpKind::PyrU2))),
        ("bilinear_x4", Box::new(|g, v| resampler(g, v, OpKind::Bilinear(4)))),
        ("exp_x2", Box::new(|g, v| resampler(g, v, OpKind::Exp(2)))),
        ("mtf_decimate", Box::new(|g, v| resampler(g, v, OpKind::mtf_decimate(0.15, 4)))),
    ];
    for (name, f) in &unary {
        out.push(check_input(name, &x, s.eps, s.probes, |g, v| {
            let o = f(g, v)?;
            readout(g, o, 1)
        })?);
    }
    out.push(check_input("mean", &x, s.eps, s.probes, |g, v| Ok(g.mean(v)))?);

    let binary: Vec<(&str, &Tensor<T>, Box<dyn Fn(&mut Graph<T>, Var, Var) -> Result<Var>>)> = vec![
        ("add", &y, Box::new(|g, a, b| g.add(a, b))),
        ("sub", &y, Box::new(|g, a, b| g.sub(a, b))),
        ("mul", &y, Box::new(|g, a, b| g.mul(a, b))),
        ("div", &pos, Box::new(|g, a, b| g.div(a, b))),
        ("concat", &y, Box::new(|g, a, b| g.concat(a, b))),
    ];
    for (name, other, f) in &binary {
        let lhs = format!("{name}/lhs");
        out.push(check_input(&lhs, &x, s.eps, s.probes, |g, v| {
            let o = g.constant((*other).clone());
            let r = f(g, v, o)?;
            readout(g, r, 2)
        })?);
        let rhs = format!("{name}/rhs");
        out.push(check_input(&rhs, other, s.eps, s.probes, |g, v| {
            let o = g.constant(x.clone());
            let r = f(g, o, v)?;
            readout(g, r, 2)
        })?);
    }

    out.extend(conv_checks::<T>(s, &mut rng)?);
    out.extend(loss_checks::<T>(s, &mut rng)?);
    out.extend(network_checks::<T>(s, &mut rng)?);
    Ok(out)
}

fn conv_checks<T: Real>(s: Settings, rng: &mut ChaCha8Rng) -> Result<Vec<GradReport>> {
    let mut out = Vec::new();
    let x = off_zero::<T>([1, 2, 12, 12], rng);
    let mut cases: Vec<(String, usize, ConvSpec)> = [1usize, 2, 4, 8, 16]
        .iter()
        .map(|&d| (format!("conv3x3_d{d}"), 3, ConvSpec::same(3, d, PadMode::Reflect)))
        .collect();
    cases.push(("conv3x3_zero_pad".into(), 3, ConvSpec::same(3, 1, PadMode::Zero)));
    cases.push(("conv3x3_stride2".into(), 3, ConvSpec::down2(PadMode::Reflect)));
    cases.push(("conv1x1".into(), 1, ConvSpec::same(1, 1, PadMode::Reflect)));
    for (name, k, spec) in cases {
        let mut store = ParamStore::<T>::new();
        let conv = Conv::new(&mut store, "c", 2, 3, k, spec, rng)?;
        randomize(&mut store, rng);
        let f = |g: &mut Graph<T>, st: &ParamStore<T>, v: Var| -> Result<Var> {
            let o = conv.apply(g, st, Bind::Train, v)?;
            readout(g, o, 3)
        };
        out.push(check_input(&format!("{name}/input"), &x, s.eps, s.probes, |g, v| f(g, &store, v))?);
        out.push(check_params(&format!("{name}/params"), &store, &conv.params(), s.eps, s.probes, |g, st| {
            let v = g.constant(x.clone());
            f(g, st, v)
        })?);
    }
    let mut store = ParamStore::<T>::new();
    let de = Deconv::new(&mut store, "d", 2, 3, rng)?;
    randomize(&mut store, rng);
    let xs = off_zero::<T>([1, 2, 5, 6], rng);
    out.push(check_input("deconv/input", &xs, s.eps, s.probes, |g, v| {
        let o = de.apply(g, &store, Bind::Train, v)?;
        readout(g, o, 4)
    })?);
    out.push(check_params("deconv/params", &store, &de.params(), s.eps, s.probes, |g, st| {
        let v = g.constant(xs.clone());
        let o = de.apply(g, st, Bind::Train, v)?;
        readout(g, o, 4)
    })?);
    Ok(out)
}

/// Replaces every parameter with draws of unit scale, so checks do not
/// depend on the small training initialisation.
fn randomize<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let fan = store.entry(id).len().max(1) as f64;
        let scale = (3.0 / fan.sqrt()).min(0.8);
        for v in store.entry_mut(id).value_mut() {
            *v = T::of(rng.random_range(-scale..scale));
        }
    }
}

/// Redraws the listed weights uniformly with variance `2 / fan_in`, so
/// activations keep their magnitude through deep stacks.
fn fan_in_weights<T: Real>(store: &mut ParamStore<T>, weights: &[(ParamId, usize)], rng: &mut ChaCha8Rng) {
    for &(id, fan) in weights {
        let bound = (6.0 / fan.max(1) as f64).sqrt();
        for v in store.entry_mut(id).value_mut() {
            *v = T::of(rng.random_range(-bound..bound));
        }
    }
}

fn loss_checks<T: Real>(s: Settings, rng: &mut ChaCha8Rng) -> Result<Vec<GradReport>> {
    let mut out = Vec::new();
    let a = uniform::<T>([2, 4, 6, 6], 0.0, 1.0, rng);
    let b = uniform::<T>([2, 4, 6, 6], 0.0, 1.0, rng);
    let score = uniform::<T>([2, 1, 3, 3], -0.5, 1.5, rng);
    let other = uniform::<T>([2, 1, 3, 3], -0.5, 1.5, rng);
    let labels = LsganLabels::default();
    out.push(check_input("loss/mse", &a, s.eps, s.probes, |g, v| {
        let t = g.constant(b.clone());
        losses::mse(g, v, t)
    })?);
    out.push(check_input("loss/reconstruction", &a, s.eps, s.probes, |g, v| {
        let t = g.constant(b.clone());
        losses::half_mse(g, v, t)
    })?);
    out.push(check_input("loss/generator_adv", &score, s.eps, s.probes, |g, v| {
        Ok(losses::generator_adv(g, v, labels))
    })?);
    out.push(check_input("loss/discriminator_real", &score, s.eps, s.probes, |g, v| {
        let f = g.constant(other.clone());
        losses::discriminator(g, v, f, labels)
    })?);
    out.push(check_input("loss/discriminator_fake", &score, s.eps, s.probes, |g, v| {
        let r = g.constant(other.clone());
        losses::discriminator(g, r, v, labels)
    })?);
    out.push(check_input("loss/joint", &a, s.eps, s.probes, |g, v| {
        let t = g.constant(b.clone());
        let sq = g.square(v);
        let adv = g.mean(sq);
        let cyc = losses::half_mse(g, v, t)?;
        let rec = losses::mse(g, sq, t)?;
        losses::joint(g, adv, cyc, rec, LossWeights::default())
    })?);

    let guide = uniform::<T>([1, 2, 8, 8], 0.0, 1.0, rng);
    let target = uniform::<T>([1, 2, 8, 8], 0.0, 1.0, rng);
    for lambda in [1e-2, 1e-4] {
        let params = GuidedParams { radius: 2, lambda };
        out.push(check_input(&format!("guided_fit/guide_l{lambda:e}"), &guide, s.eps, s.probes, |g, v| {
            let t = g.constant(target.clone());
            let c = fit_local_linear(g, v, t, params)?;
            let m = readout(g, c.slope_smooth, 5)?;
            let n = readout(g, c.offset_smooth, 6)?;
            g.add(m, n)
        })?);
    }
    Ok(out)
}

fn network_checks<T: Real>(s: Settings, rng: &mut ChaCha8Rng) -> Result<Vec<GradReport>> {
    let mut out = Vec::new();
    let bands = 2;
    let labels = LsganLabels::default();
    let weights = LossWeights::default();

    // pre-fusion stage: supervised loss against a reference
    let mut store = ParamStore::<T>::new();
    let dmg = Dmg::new(&mut store, bands, GuidedParams { radius: 1, lambda: 1e-2 }, 2, 0.15, rng)?;
    randomize(&mut store, rng);
    fan_in_weights(&mut store, &dmg.net.weights(), rng);
    let pan = uniform::<T>([1, 1, 16, 16], 0.0, 1.0, rng);
    let ms = uniform::<T>([1, bands, 8, 8], 0.0, 1.0, rng);
    let reference = uniform::<T>([1, bands, 16, 16], 0.0, 1.0, rng);
    let dmg_loss = |g: &mut Graph<T>, st: &ParamStore<T>| -> Result<Var> {
        let p = g.constant(pan.clone());
        let m = g.constant(ms.clone());
        let r = g.constant(reference.clone());
        let o = dmg.forward(g, st, Bind::Train, p, m)?;
        losses::mse(g, o.fused, r)
    };
    out.push(check_params("dmg/supervised", &store, &dmg.params(), s.eps, s.probes / 4 + 1, dmg_loss)?);

    // a generator block with its residual body
    let mut store = ParamStore::<T>::new();
    let block = GeneratorBlock::new(&mut store, "gb", bands, BlockShape { depth: 2, residual_blocks: 1 }, rng)?;
    randomize(&mut store, rng);
    let gin = off_zero::<T>([1, 2 * bands, 8, 8], rng);
    out.push(check_input("generator_block/input", &gin, s.eps, s.probes, |g, v| {
        let o = block.forward(g, &store, Bind::Train, v)?;
        readout(g, o, 7)
    })?);
    out.push(check_params("generator_block/params", &store, &block.params(), s.eps, s.probes / 4 + 1, |g, st| {
        let v = g.constant(gin.clone());
        let o = block.forward(g, st, Bind::Train, v)?;
        readout(g, o, 7)
    })?);

    // the joint objectives of both pyramid generators and the critics
    let shape = BlockShape { depth: 1, residual_blocks: 1 };
    let mut store = ParamStore::<T>::new();
    let c2f = PyramidGenerator::new(&mut store, "c2f", Direction::CoarseToFine, bands, 2, shape, rng)?;
    let f2c = PyramidGenerator::new(&mut store, "f2c", Direction::FineToCoarse, bands, 2, shape, rng)?;
    let dc = Discriminator::new(&mut store, "dc", bands, rng)?;
    let df = Discriminator::new(&mut store, "df", bands, rng)?;
    randomize(&mut store, rng);
    let coarse = uniform::<T>([1, bands, 16, 16], 0.0, 1.0, rng);
    let fine = uniform::<T>([1, bands, 64, 64], 0.0, 1.0, rng);

    let c2f_jc = |g: &mut Graph<T>, st: &ParamStore<T>| -> Result<Var> {
        let c = g.constant(coarse.clone());
        let r = g.constant(fine.clone());
        let up = c2f.forward(g, st, Bind::Train, c)?;
        let score = df.forward(g, st, Bind::Frozen, up)?;
        let adv = losses::generator_adv(g, score, labels);
        let back = f2c.forward(g, st, Bind::Frozen, up)?;
        let cyc = losses::half_mse(g, back, c)?;
        let rec = losses::half_mse(g, up, r)?;
        losses::joint(g, adv, cyc, rec, weights)
    };
    out.push(check_params("c2f/joint", &store, &c2f.params(), s.eps, s.probes / 8 + 1, c2f_jc)?);

    let f2c_jc = |g: &mut Graph<T>, st: &ParamStore<T>| -> Result<Var> {
        let c = g.constant(coarse.clone());
        let r = g.constant(fine.clone());
        let down = f2c.forward(g, st, Bind::Train, r)?;
        let score = dc.forward(g, st, Bind::Frozen, down)?;
        let adv = losses::generator_adv(g, score, labels);
        let back = c2f.forward(g, st, Bind::Frozen, down)?;
        let cyc = losses::half_mse(g, back, r)?;
        let rec = losses::half_mse(g, down, c)?;
        losses::joint(g, adv, cyc, rec, weights)
    };
    out.push(check_params("f2c/joint", &store, &f2c.params(), s.eps, s.probes / 8 + 1, f2c_jc)?);

    let disc = |g: &mut Graph<T>, st: &ParamStore<T>| -> Result<Var> {
        let c = g.constant(coarse.clone());
        let r = g.constant(fine.clone());
        let fake = f2c.forward(g, st, Bind::Frozen, r)?;
        let real_score = dc.forward(g, st, Bind::Train, c)?;
        let fake_score = dc.forward(g, st, Bind::Train, fake)?;
        losses::discriminator(g, real_score, fake_score, labels)
    };
    out.push(check_params("dc/discriminator", &store, &dc.params(), s.eps, s.probes / 8 + 1, disc)?);

    // feature stack alone at full depth
    let mut store = ParamStore::<T>::new();
    let net = FeatureNet::new(&mut store, "f", bands, rng)?;
    randomize(&mut store, rng);
    fan_in_weights(&mut store, &net.weights(), rng);
    let img = uniform::<T>([1, 1, 20, 20], 0.0, 1.0, rng);
    out.push(check_input("feature_net/input", &img, s.eps, s.probes, |g, v| {
        let o = net.forward(g, &store, Bind::Train, v)?;
        readout(g, o, 8)
    })?);
    Ok(out)
}
