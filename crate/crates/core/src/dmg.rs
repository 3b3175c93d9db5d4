//! Guided-filter pre-fusion with a learned guidance image.
//!
//! A dilated convolution stack maps the PAN image (and its MTF-degraded
//! copy) into `b` guidance channels. Per band, a local linear model
//! `ms ≈ m · guide + n` is fitted at MS resolution over square windows,
//! the coefficients are smoothed and enlarged, and applied to the guidance
//! computed from the full-resolution PAN.
//!
//! The two feature evaluations share one set of weights.

use rand::Rng;

use crate::autodiff::{Bind, ConvSpec, Graph, PadMode, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::Conv;
use crate::raster::Raster;
use crate::real::Real;
use crate::resample::{shared_op, OpKind};

/// Dilation of each layer of the feature stack.
pub const DILATIONS: [usize; 8] = [1, 1, 2, 4, 8, 16, 1, 1];
pub const FEATURE_WIDTH: usize = 32;
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidedParams {
    /// Window half-size; the window is `(2 radius + 1)^2`.
    pub radius: usize,
    /// Ridge penalty on the slope.
    pub lambda: f64,
}

impl Default for GuidedParams {
    fn default() -> Self {
        GuidedParams { radius: 2, lambda: 1e-4 }
    }
}

/// The dilated feature extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNet {
    layers: Vec<Conv>,
}

impl FeatureNet {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, bands: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut layers = Vec::with_capacity(DILATIONS.len());
        let last = DILATIONS.len() - 1;
        for (i, &d) in DILATIONS.iter().enumerate() {
            let cin = if i == 0 { 1 } else { FEATURE_WIDTH };
            let (cout, k) = if i == last { (bands, 1) } else { (FEATURE_WIDTH, 3) };
            let spec = ConvSpec::same(k, d, PadMode::Reflect);
            layers.push(Conv::new(store, &format!("{prefix}.l{}", i + 1), cin, cout, k, spec, rng)?);
        }
        Ok(FeatureNet { layers })
    }

    pub fn layers(&self) -> &[Conv] {
        &self.layers
    }

    pub fn weights(&self) -> Vec<(ParamId, usize)> {
        self.layers.iter().map(|l| (l.weight, l.fan_in())).collect()
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, bind: Bind, x: Var) -> Result<Var> {
        self.forward_to(g, store, bind, x, self.layers.len())
    }

    /// Output of layer `depth` (1-based), after its activation when it has one.
    pub fn forward_to<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        bind: Bind,
        x: Var,
        depth: usize,
    ) -> Result<Var> {
        if depth == 0 || depth > self.layers.len() {
            return Err(Error::invalid(format!("depth {depth} outside 1..={}", self.layers.len())));
        }
        let mut h = x;
        for (i, layer) in self.layers[..depth].iter().enumerate() {
            h = layer.apply(g, store, bind, h)?;
            if i + 1 < self.layers.len() {
                h = g.lrelu(h, T::of(LEAKY_SLOPE));
            }
        }
        Ok(h)
    }

    /// Side of the square input region that can influence one output pixel
    /// of layer `depth`.
    pub fn receptive_field(&self, depth: usize) -> usize {
        1 + self.layers[..depth].iter().map(|l| l.spec.dilation * (l.kernel - 1)).sum::<usize>()
    }
}

/// Graph nodes of the fitted local linear model.
#[derive(Debug, Clone, Copy)]
pub struct GuidedVars {
    /// Per-window slope and offset at MS resolution.
    pub slope: Var,
    pub offset: Var,
    /// The same after averaging over every window covering a pixel.
    pub slope_smooth: Var,
    pub offset_smooth: Var,
}

/// Fits `target ≈ slope · guide + offset` in every window, per channel.
pub fn fit_local_linear<T: Real>(
    g: &mut Graph<T>,
    guide: Var,
    target: Var,
    params: GuidedParams,
) -> Result<GuidedVars> {
    let [_, _, h, w] = g.shape(guide);
    if g.shape(guide) != g.shape(target) {
        return Err(Error::shape(format!("guide {:?} vs target {:?}", g.shape(guide), g.shape(target))));
    }
    if params.radius == 0 || !(params.lambda >= 0.0) {
        return Err(Error::invalid("guided filter needs radius >= 1 and lambda >= 0"));
    }
    if params.radius >= h.min(w) {
        return Err(Error::size(format!("window radius {} too large for {h}x{w}", params.radius)));
    }
    let r = params.radius;
    let mu = g.box_mean(guide, r);
    let xbar = g.box_mean(target, r);
    let gx = g.mul(guide, target)?;
    let gx_mean = g.box_mean(gx, r);
    let gg = g.square(guide);
    let gg_mean = g.box_mean(gg, r);
    let mu_sq = g.square(mu);
    let var = g.sub(gg_mean, mu_sq)?;
    let mu_xbar = g.mul(mu, xbar)?;
    let cov = g.sub(gx_mean, mu_xbar)?;
    let denom = g.offset(var, T::of(params.lambda));
    let slope = g.div(cov, denom).map_err(|_| Error::Singular("window with zero variance and lambda = 0".into()))?;
    let slope_mu = g.mul(slope, mu)?;
    let offset = g.sub(xbar, slope_mu)?;
    let slope_smooth = g.box_mean(slope, r);
    let offset_smooth = g.box_mean(offset, r);
    Ok(GuidedVars { slope, offset, slope_smooth, offset_smooth })
}

/// Enlarges smoothed coefficients by `ratio` and applies them to `features`.
pub fn apply_coefficients<T: Real>(
    g: &mut Graph<T>,
    slope: Var,
    offset: Var,
    features: Var,
    ratio: usize,
) -> Result<(Var, Var, Var)> {
    let [_, _, h, w] = g.shape(slope);
    let up = shared_op(OpKind::Bilinear(ratio), h, w)?;
    let slope_high = g.resample(slope, up.clone())?;
    let offset_high = g.resample(offset, up)?;
    let scaled = g.mul(slope_high, features)?;
    let fused = g.add(scaled, offset_high)?;
    Ok((fused, slope_high, offset_high))
}

#[derive(Debug, Clone, Copy)]
pub struct DmgOutput {
    pub fused: Var,
    pub coeffs: GuidedVars,
    pub slope_high: Var,
    pub offset_high: Var,
    pub features: Var,
    pub features_low: Var,
}

/// The complete pre-fusion stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Dmg {
    pub net: FeatureNet,
    pub guided: GuidedParams,
    pub ratio: usize,
    /// Nyquist gain of the PAN MTF used to degrade PAN to MS scale.
    pub pan_gain: f64,
}

impl Dmg {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        bands: usize,
        guided: GuidedParams,
        ratio: usize,
        pan_gain: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Dmg { net: FeatureNet::new(store, "dmg", bands, rng)?, guided, ratio, pan_gain })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.net.params()
    }

    /// `pan` is `[n, 1, M, M]`, `ms` is `[n, b, M/r, M/r]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        bind: Bind,
        pan: Var,
        ms: Var,
    ) -> Result<DmgOutput> {
        let [n, c, h, w] = g.shape(pan);
        let [nm, b, mh, mw] = g.shape(ms);
        if c != 1 || n != nm || h != self.ratio * mh || w != self.ratio * mw {
            return Err(Error::size(format!(
                "PAN {:?} and MS {:?} violate the {}x size contract",
                g.shape(pan),
                g.shape(ms),
                self.ratio
            )));
        }
        if b != self.net.out_channels() {
            return Err(Error::shape(format!("MS has {b} bands, network produces {}", self.net.out_channels())));
        }
        let down = shared_op(OpKind::mtf_decimate(self.pan_gain, self.ratio), h, w)?;
        let pan_low = g.resample(pan, down)?;
        let features = self.net.forward(g, store, bind, pan)?;
        let features_low = self.net.forward(g, store, bind, pan_low)?;
        let coeffs = fit_local_linear(g, features_low, ms, self.guided)?;
        let (fused, slope_high, offset_high) =
            apply_coefficients(g, coeffs.slope_smooth, coeffs.offset_smooth, features, self.ratio)?;
        Ok(DmgOutput { fused, coeffs, slope_high, offset_high, features, features_low })
    }
}

/// Fitted coefficients as rasters (double precision).
#[derive(Debug, Clone, PartialEq)]
pub struct GuidedCoeffs {
    pub slope: Raster,
    pub offset: Raster,
    pub slope_smooth: Raster,
    pub offset_smooth: Raster,
}

/// Raster front end to [`fit_local_linear`]; band `j` of `target` is paired
/// with band `j` of `guide`.
pub fn guided_coefficients(guide: &Raster, target: &Raster, params: GuidedParams) -> Result<GuidedCoeffs> {
    guide.check_same_shape(target)?;
    let mut g = Graph::<f64>::new();
    let gv = g.constant(Tensor::from_raster(guide));
    let tv = g.constant(Tensor::from_raster(target));
    let v = fit_local_linear(&mut g, gv, tv, params)?;
    let out = |var: Var| g.tensor(var).to_raster(0);
    Ok(GuidedCoeffs {
        slope: out(v.slope)?,
        offset: out(v.offset)?,
        slope_smooth: out(v.slope_smooth)?,
        offset_smooth: out(v.offset_smooth)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(h: usize, w: usize, b: usize, seed: u64) -> Raster {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Raster::from_fn(h, w, b, |_, _, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn flat_guide_gives_zero_slope() {
        let guide = Raster::constant(8, 8, 1, 0.4);
        let target = random(8, 8, 1, 1);
        let c = guided_coefficients(&guide, &target, GuidedParams { radius: 2, lambda: 1e-4 }).unwrap();
        let xbar = crate::raster::box_mean(&target, 2).unwrap();
        let worst = c.slope.data().iter().fold(0.0f64, |a, m| a.max(m.abs()));
        // E[g^2] - mu^2 leaves rounding noise of order 1e-16 / lambda
        assert!(worst < 1e-10, "{worst}");
        assert!(c.offset.max_abs_diff(&xbar).unwrap() < 1e-10);
    }

    #[test]
    fn affine_target_recovered() {
        let guide = random(8, 8, 2, 2);
        let target = guide.map(|v| 2.0 * v + 3.0);
        let c = guided_coefficients(&guide, &target, GuidedParams { radius: 1, lambda: 0.0 }).unwrap();
        assert!(c.slope.data().iter().all(|&m| (m - 2.0).abs() < 1e-9));
        assert!(c.offset.data().iter().all(|&n| (n - 3.0).abs() < 1e-9));
    }

    #[test]
    fn zero_variance_without_ridge_is_singular() {
        let guide = Raster::constant(6, 6, 1, 1.0);
        let err = guided_coefficients(&guide, &guide, GuidedParams { radius: 1, lambda: 0.0 }).unwrap_err();
        assert!(matches!(err, Error::Singular(_)));
    }

    #[test]
    fn layer_table() {
        let mut store = ParamStore::<f64>::new();
        let net = FeatureNet::new(&mut store, "f", 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let dil: Vec<usize> = net.layers().iter().map(|l| l.spec.dilation).collect();
        assert_eq!(dil, DILATIONS);
        // exponential growth over the middle layers
        for w in dil[2..6].windows(2) {
            assert_eq!(w[1], 2 * w[0]);
        }
        assert_eq!(net.out_channels(), 4);
        assert_eq!(net.layers()[7].kernel, 1);
        assert_eq!(net.receptive_field(6), 65);
        assert_eq!(net.receptive_field(7), 67);
        assert_eq!(net.receptive_field(8), 67);
    }

    #[test]
    fn identity_coefficients_pass_features() {
        let mut g = Graph::<f64>::new();
        let feat = g.constant(Tensor::from_raster(&random(8, 8, 4, 3)));
        let one = g.constant(Tensor::full([1, 4, 2, 2], 1.0));
        let zero = g.constant(Tensor::zeros([1, 4, 2, 2]));
        let (fused, _, _) = apply_coefficients(&mut g, one, zero, feat, 4).unwrap();
        assert_eq!(g.value(fused), g.value(feat));
    }

    #[test]
    fn constant_scene_reproduces_ms_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let dmg = Dmg::new(&mut store, 4, GuidedParams::default(), 4, 0.15, &mut rng).unwrap();
        let mut g = Graph::new();
        let pan = g.constant(Tensor::full([1, 1, 32, 32], 0.6));
        let ms = g.constant(Tensor::new([1, 4, 8, 8], (0..256).map(|i| [0.1, 0.2, 0.3, 0.4][i / 64]).collect()).unwrap());
        let out = dmg.forward(&mut g, &store, Bind::Frozen, pan, ms).unwrap();
        assert_eq!(g.shape(out.fused), [1, 4, 32, 32]);
        for (i, v) in g.value(out.fused).iter().enumerate() {
            assert!((v - [0.1, 0.2, 0.3, 0.4][i / 1024]).abs() < 1e-12);
        }
    }

    #[test]
    fn size_contract_enforced() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let dmg = Dmg::new(&mut store, 4, GuidedParams::default(), 4, 0.15, &mut rng).unwrap();
        let mut g = Graph::new();
        let pan = g.constant(Tensor::zeros([1, 1, 32, 32]));
        let ms = g.constant(Tensor::zeros([1, 4, 16, 16]));
        assert!(dmg.forward(&mut g, &store, Bind::Frozen, pan, ms).is_err());
    }
}
