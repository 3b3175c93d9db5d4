//! Fixed (non-learned) resampling.
//!
//! Every resampler here is separable and linear, so each one is expressed as
//! a pair of sparse 1-D operators ([`AxisOp`]) applied along rows and then
//! columns. The same operator objects back the differentiable versions in
//! the autodiff engine, which only needs their transposes.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{Error, Result};
use crate::raster::{reflect_index, Raster, Sample};
use crate::real::Real;

/// Odd-length symmetric filter.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    taps: Vec<f64>,
    dc_gain: f64,
}

impl Kernel {
    pub fn new(taps: Vec<f64>) -> Result<Self> {
        if taps.len() % 2 == 0 {
            return Err(Error::invalid(format!("kernel length {} is not odd", taps.len())));
        }
        let n = taps.len();
        for i in 0..n / 2 {
            if (taps[i] - taps[n - 1 - i]).abs() > 1e-15 * taps[i].abs().max(1.0) {
                return Err(Error::invalid("kernel taps are not symmetric"));
            }
        }
        let dc_gain = taps.iter().sum();
        Ok(Kernel { taps, dc_gain })
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn dc_gain(&self) -> f64 {
        self.dc_gain
    }

    pub fn radius(&self) -> usize {
        self.taps.len() / 2
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    fn scaled(&self, s: f64) -> Kernel {
        Kernel::new(self.taps.iter().map(|t| t * s).collect()).unwrap()
    }
}

/// Spatial standard deviation of the Gaussian whose frequency response at
/// the post-decimation Nyquist frequency equals `nyquist_gain`.
pub fn mtf_sigma(nyquist_gain: f64, ratio: usize) -> f64 {
    ratio as f64 * (-2.0 * nyquist_gain.ln()).sqrt() / std::f64::consts::PI
}

const MAX_GAUSSIAN_SIZE: usize = 41;

/// Gaussian matched to a sensor MTF, sized `2 * ceil(3 sigma) + 1` (at most 41).
pub fn mtf_gaussian_kernel(nyquist_gain: f64, ratio: usize) -> Result<Kernel> {
    check_gain(nyquist_gain)?;
    let sigma = mtf_sigma(nyquist_gain, ratio);
    let size = (2 * (3.0 * sigma).ceil() as usize + 1).clamp(1, MAX_GAUSSIAN_SIZE);
    gaussian(sigma, size)
}

pub fn mtf_gaussian_kernel_sized(nyquist_gain: f64, ratio: usize, size: usize) -> Result<Kernel> {
    check_gain(nyquist_gain)?;
    let sigma = mtf_sigma(nyquist_gain, ratio);
    if size % 2 == 0 || (size as f64) < 6.0 * sigma {
        return Err(Error::invalid(format!(
            "kernel size {size} must be odd and at least 6 sigma = {:.3}",
            6.0 * sigma
        )));
    }
    gaussian(sigma, size)
}

fn check_gain(g: f64) -> Result<()> {
    if !(g > 0.0 && g < 1.0) {
        return Err(Error::invalid(format!("Nyquist gain {g} outside (0, 1)")));
    }
    Ok(())
}

fn gaussian(sigma: f64, size: usize) -> Result<Kernel> {
    let c = (size / 2) as f64;
    let mut taps: Vec<f64> = (0..size)
        .map(|i| {
            let x = i as f64 - c;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    // exact mirror so symmetry survives rounding
    for i in 0..size / 2 {
        taps[size - 1 - i] = taps[i];
    }
    Kernel::new(taps)
}

/// Binomial `[1, 4, 6, 4, 1] / 16` used by the pyramid operators.
pub fn binomial5() -> Kernel {
    Kernel::new(vec![1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0]).unwrap()
}

/// Non-negative half of the 23-tap EXP interpolation kernel (offsets 0..=11).
///
/// Hamming-windowed ideal half-band interpolator `sinc(n/2) * w(n)` with
/// `w(n) = 0.54 + 0.46 cos(2 pi n / 22)`; the odd taps are rescaled to sum
/// to 1 so the centre tap is 1 and the gain per axis is 2.
pub const EXP_HALF_TAPS: [f64; 12] = [
    1.0,
    0.6275257478682805,
    0.0,
    -0.1793068022315908,
    0.0,
    0.07743175740985166,
    0.0,
    -0.03187237684835536,
    0.0,
    0.01087215084089269,
    0.0,
    -0.004650477039078705,
];

pub fn exp_kernel() -> Kernel {
    let mut taps = Vec::with_capacity(23);
    for i in (1..12).rev() {
        taps.push(EXP_HALF_TAPS[i]);
    }
    taps.extend_from_slice(&EXP_HALF_TAPS);
    Kernel::new(taps).unwrap()
}

/// Sparse linear map from a length-`in_len` signal to a length-`out_len` one.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisOp {
    in_len: usize,
    out_len: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl AxisOp {
    fn from_rows(in_len: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let rows = rows
            .into_iter()
            .map(|r| {
                let mut acc: Vec<(usize, f64)> = Vec::with_capacity(r.len());
                let mut sorted = r;
                sorted.sort_by_key(|e| e.0);
                for (i, w) in sorted {
                    match acc.last_mut() {
                        Some(last) if last.0 == i => last.1 += w,
                        _ => acc.push((i, w)),
                    }
                }
                acc.retain(|e| e.1 != 0.0);
                acc
            })
            .collect::<Vec<_>>();
        AxisOp { in_len, out_len: rows.len(), rows }
    }

    pub fn identity(len: usize) -> Self {
        AxisOp::from_rows(len, (0..len).map(|i| vec![(i, 1.0)]).collect())
    }

    /// Reflect-padded convolution with `kernel`, keeping every `factor`-th
    /// output starting at 0.
    pub fn decimate(len: usize, kernel: &Kernel, factor: usize) -> Self {
        let c = kernel.radius() as isize;
        let rows = (0..len / factor)
            .map(|i| {
                kernel
                    .taps()
                    .iter()
                    .enumerate()
                    .map(|(k, &t)| (reflect_index((i * factor) as isize + k as isize - c, len), t))
                    .collect()
            })
            .collect();
        AxisOp::from_rows(len, rows)
    }

    /// Zero insertion by `factor` (input sample `i` lands on `i * factor`)
    /// followed by reflect-padded convolution with `kernel`.
    pub fn interpolate(len: usize, kernel: &Kernel, factor: usize) -> Self {
        let up = len * factor;
        let c = kernel.radius() as isize;
        let rows = (0..up)
            .map(|j| {
                kernel
                    .taps()
                    .iter()
                    .enumerate()
                    .filter_map(|(k, &t)| {
                        let q = reflect_index(j as isize + k as isize - c, up);
                        (q % factor == 0).then_some((q / factor, t))
                    })
                    .collect()
            })
            .collect();
        AxisOp::from_rows(len, rows)
    }

    /// Half-pixel-centred (align-corners = false) linear interpolation.
    pub fn bilinear(len: usize, factor: usize) -> Self {
        let rows = (0..len * factor)
            .map(|j| {
                let src = ((j as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(len - 1);
                let i1 = (i0 + 1).min(len - 1);
                let f = src - i0 as f64;
                vec![(i0, 1.0 - f), (i1, f)]
            })
            .collect();
        AxisOp::from_rows(len, rows)
    }

    /// `self` after `first`.
    pub fn compose(&self, first: &AxisOp) -> AxisOp {
        assert_eq!(self.in_len, first.out_len, "axis operator size mismatch");
        let rows = self
            .rows
            .iter()
            .map(|r| {
                let mut out = Vec::new();
                for &(mid, w) in r {
                    for &(i, v) in &first.rows[mid] {
                        out.push((i, w * v));
                    }
                }
                out
            })
            .collect();
        AxisOp::from_rows(first.in_len, rows)
    }

    pub fn transpose(&self) -> AxisOp {
        let mut rows = vec![Vec::new(); self.in_len];
        for (o, r) in self.rows.iter().enumerate() {
            for &(i, w) in r {
                rows[i].push((o, w));
            }
        }
        AxisOp::from_rows(self.out_len, rows)
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_len(&self) -> usize {
        self.out_len
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }
}

/// Separable linear resampler: `vertical` acts on rows' index (height),
/// `horizontal` on the column index (width).
#[derive(Debug, Clone, PartialEq)]
pub struct SeparableOp {
    pub vertical: AxisOp,
    pub horizontal: AxisOp,
}

impl SeparableOp {
    pub fn new(vertical: AxisOp, horizontal: AxisOp) -> Self {
        SeparableOp { vertical, horizontal }
    }

    pub fn in_dims(&self) -> (usize, usize) {
        (self.vertical.in_len, self.horizontal.in_len)
    }

    pub fn out_dims(&self) -> (usize, usize) {
        (self.vertical.out_len, self.horizontal.out_len)
    }

    pub fn blur_decimate(height: usize, width: usize, kernel: &Kernel, factor: usize) -> Self {
        SeparableOp::new(
            AxisOp::decimate(height, kernel, factor),
            AxisOp::decimate(width, kernel, factor),
        )
    }

    pub fn pyr_d2(height: usize, width: usize) -> Self {
        Self::blur_decimate(height, width, &binomial5(), 2)
    }

    pub fn pyr_u2(height: usize, width: usize) -> Self {
        let k = binomial5().scaled(2.0);
        SeparableOp::new(AxisOp::interpolate(height, &k, 2), AxisOp::interpolate(width, &k, 2))
    }

    pub fn bilinear(height: usize, width: usize, factor: usize) -> Self {
        SeparableOp::new(AxisOp::bilinear(height, factor), AxisOp::bilinear(width, factor))
    }

    /// Cascade of 2x EXP stages reaching `factor`.
    pub fn exp(height: usize, width: usize, factor: usize) -> Self {
        let k = exp_kernel();
        let mut v = AxisOp::identity(height);
        let mut h = AxisOp::identity(width);
        let mut f = 1;
        while f < factor {
            v = AxisOp::interpolate(v.out_len, &k, 2).compose(&v);
            h = AxisOp::interpolate(h.out_len, &k, 2).compose(&h);
            f *= 2;
        }
        SeparableOp::new(v, h)
    }

    /// `self` after `first`.
    pub fn compose(&self, first: &SeparableOp) -> SeparableOp {
        SeparableOp::new(
            self.vertical.compose(&first.vertical),
            self.horizontal.compose(&first.horizontal),
        )
    }

    pub fn transpose(&self) -> SeparableOp {
        SeparableOp::new(self.vertical.transpose(), self.horizontal.transpose())
    }

    /// Applies the operator to one `h x w` plane (row-major).
    pub fn apply_plane<T: Real>(&self, src: &[T], dst: &mut [T]) {
        let (ih, iw) = self.in_dims();
        let (oh, ow) = self.out_dims();
        debug_assert_eq!(src.len(), ih * iw);
        debug_assert_eq!(dst.len(), oh * ow);
        let mut tmp = vec![T::zero(); ih * ow];
        for y in 0..ih {
            let row = &src[y * iw..(y + 1) * iw];
            let out = &mut tmp[y * ow..(y + 1) * ow];
            for (o, taps) in out.iter_mut().zip(&self.horizontal.rows) {
                let mut s = T::zero();
                for &(i, w) in taps {
                    s += T::of(w) * row[i];
                }
                *o = s;
            }
        }
        dst.iter_mut().for_each(|v| *v = T::zero());
        for (oy, taps) in self.vertical.rows.iter().enumerate() {
            let out = &mut dst[oy * ow..(oy + 1) * ow];
            for &(iy, w) in taps {
                let w = T::of(w);
                for (o, &t) in out.iter_mut().zip(&tmp[iy * ow..(iy + 1) * ow]) {
                    *o += w * t;
                }
            }
        }
    }

    pub fn apply(&self, img: &Raster) -> Result<Raster> {
        if (img.height(), img.width()) != self.in_dims() {
            return Err(Error::size(format!(
                "operator expects {:?}, raster is {}x{}",
                self.in_dims(),
                img.height(),
                img.width()
            )));
        }
        let (oh, ow) = self.out_dims();
        let mut planes = Vec::with_capacity(img.bands());
        for b in 0..img.bands() {
            let mut out = vec![0.0; oh * ow];
            self.apply_plane(img.band(b), &mut out);
            planes.push(out);
        }
        Raster::from_bands(oh, ow, &planes)
    }
}

/// Identifies a fixed resampler for [`shared_op`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    PyrD2,
    PyrU2,
    Bilinear(usize),
    Exp(usize),
    /// MTF Gaussian blur then decimation; the gain is stored as raw bits.
    MtfDecimate { gain_bits: u64, factor: usize },
}

impl OpKind {
    pub fn mtf_decimate(nyquist_gain: f64, factor: usize) -> Self {
        OpKind::MtfDecimate { gain_bits: nyquist_gain.to_bits(), factor }
    }
}

type OpCache = Mutex<HashMap<(OpKind, usize, usize), Arc<SeparableOp>>>;

/// Process-wide memo of resamplers, so graph nodes can share one operator.
pub fn shared_op(kind: OpKind, height: usize, width: usize) -> Result<Arc<SeparableOp>> {
    static CACHE: OnceLock<OpCache> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(op) = cache.lock().expect("resampler cache poisoned").get(&(kind, height, width)) {
        return Ok(op.clone());
    }
    let divisible = |f: usize| f > 0 && height % f == 0 && width % f == 0;
    let op = match kind {
        OpKind::PyrD2 if divisible(2) => SeparableOp::pyr_d2(height, width),
        OpKind::PyrU2 => SeparableOp::pyr_u2(height, width),
        OpKind::Bilinear(f) if f >= 2 => SeparableOp::bilinear(height, width, f),
        OpKind::Exp(f) if f == 2 || f == 4 => SeparableOp::exp(height, width, f),
        OpKind::MtfDecimate { gain_bits, factor } if divisible(factor) => {
            let k = mtf_gaussian_kernel(f64::from_bits(gain_bits), factor)?;
            SeparableOp::blur_decimate(height, width, &k, factor)
        }
        _ => return Err(Error::size(format!("{kind:?} cannot act on {height}x{width}"))),
    };
    let op = Arc::new(op);
    cache.lock().expect("resampler cache poisoned").insert((kind, height, width), op.clone());
    Ok(op)
}

pub fn blur_decimate(img: &Raster, kernel: &Kernel, factor: usize) -> Result<Raster> {
    if factor == 0 || img.height() % factor != 0 || img.width() % factor != 0 {
        return Err(Error::size(format!(
            "{}x{} is not divisible by {factor}",
            img.height(),
            img.width()
        )));
    }
    SeparableOp::blur_decimate(img.height(), img.width(), kernel, factor).apply(img)
}

pub fn exp_upsample(ms: &Raster, factor: usize) -> Result<Raster> {
    if factor != 2 && factor != 4 {
        return Err(Error::invalid(format!("EXP interpolation supports factors 2 and 4, not {factor}")));
    }
    SeparableOp::exp(ms.height(), ms.width(), factor).apply(ms)
}

pub fn pyr_d2(img: &Raster) -> Result<Raster> {
    if img.height() % 2 != 0 || img.width() % 2 != 0 {
        return Err(Error::size(format!(
            "pyramid reduction needs even dimensions, got {}x{}",
            img.height(),
            img.width()
        )));
    }
    SeparableOp::pyr_d2(img.height(), img.width()).apply(img)
}

pub fn pyr_u2(img: &Raster) -> Result<Raster> {
    SeparableOp::pyr_u2(img.height(), img.width()).apply(img)
}

pub fn bilinear_up(img: &Raster, factor: usize) -> Result<Raster> {
    if factor < 2 {
        return Err(Error::invalid(format!("bilinear factor must be at least 2, got {factor}")));
    }
    SeparableOp::bilinear(img.height(), img.width(), factor).apply(img)
}

/// Per-band Nyquist gains used to emulate the sensor MTFs.
#[derive(Debug, Clone, PartialEq)]
pub struct MtfGains {
    pub pan: f64,
    pub ms: Vec<f64>,
}

impl MtfGains {
    pub fn uniform(bands: usize, ms_gain: f64, pan_gain: f64) -> Self {
        MtfGains { pan: pan_gain, ms: vec![ms_gain; bands] }
    }
}

impl Default for MtfGains {
    fn default() -> Self {
        MtfGains::uniform(4, 0.30, 0.15)
    }
}

/// Reduced-resolution pair: both inputs are MTF-blurred and decimated by the
/// sample ratio and the original MS becomes the reference.
pub fn wald_degrade(full: &Sample, gains: &MtfGains) -> Result<Sample> {
    if full.reference.is_some() {
        return Err(Error::invalid("wald_degrade expects a full-resolution sample without reference"));
    }
    if gains.ms.len() != full.ms.bands() {
        return Err(Error::invalid(format!(
            "{} MS gains for {} bands",
            gains.ms.len(),
            full.ms.bands()
        )));
    }
    let r = full.ratio;
    let pan_kernel = mtf_gaussian_kernel(gains.pan, r)?;
    let pan = blur_decimate(&full.pan, &pan_kernel, r)?;
    let mut planes = Vec::with_capacity(full.ms.bands());
    for (b, &g) in gains.ms.iter().enumerate() {
        let k = mtf_gaussian_kernel(g, r)?;
        planes.push(blur_decimate(&full.ms.band_raster(b), &k, r)?.into_data());
    }
    let ms = Raster::from_bands(full.ms.height() / r, full.ms.width() / r, &planes)?;
    Sample::new(pan, ms, Some(full.ms.clone()), r)
}

/// CSV table of kernel taps: `kernel,index,offset,tap`.
pub fn kernel_table_csv(kernels: &[(&str, &Kernel)]) -> String {
    let mut out = String::from("kernel,index,offset,tap\n");
    for (name, k) in kernels {
        let c = k.radius() as isize;
        for (i, t) in k.taps().iter().enumerate() {
            out.push_str(&format!("{name},{i},{},{t:.17e}\n", i as isize - c));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg_raster(h: usize, w: usize, b: usize, seed: u64) -> Raster {
        let mut s = seed;
        Raster::from_fn(h, w, b, |_, _, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        })
    }

    fn inner(a: &Raster, b: &Raster) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn mtf_sigma_value() {
        let s = mtf_sigma(0.3, 4);
        let expected = 4.0 * (-2.0 * 0.3f64.ln()).sqrt() / std::f64::consts::PI;
        assert!((s - expected).abs() < 1e-15);
        assert!((s - 1.9757).abs() < 1e-3);
    }

    #[test]
    fn mtf_kernel_normalised_and_sized() {
        let k = mtf_gaussian_kernel(0.3, 4).unwrap();
        assert!((k.dc_gain() - 1.0).abs() < 1e-15);
        assert_eq!(k.len(), 2 * (3.0 * mtf_sigma(0.3, 4)).ceil() as usize + 1);
        let near = mtf_gaussian_kernel(0.999999, 4).unwrap();
        assert!(near.taps()[near.radius()] > 0.999999);
        assert!(mtf_gaussian_kernel(1.0, 4).is_err());
        assert!(mtf_gaussian_kernel(0.0, 4).is_err());
        assert!(mtf_gaussian_kernel_sized(0.3, 4, 7).is_err());
        assert!(mtf_gaussian_kernel_sized(0.3, 4, 13).is_ok());
    }

    #[test]
    fn mtf_kernel_hits_nyquist_gain() {
        // continuous response of a Gaussian at f = 1/(2r) cycles/sample
        let g = 0.3;
        let s = mtf_sigma(g, 4);
        let f = 1.0 / 8.0;
        let resp = (-2.0 * (std::f64::consts::PI * s * f).powi(2)).exp();
        assert!((resp - g).abs() < 1e-12);
    }

    #[test]
    fn exp_taps_regenerate_from_formula() {
        let mut raw = [0.0f64; 12];
        raw[0] = 1.0;
        for n in (1..12).step_by(2) {
            let x = std::f64::consts::PI * n as f64 / 2.0;
            let w = 0.54 + 0.46 * (2.0 * std::f64::consts::PI * n as f64 / 22.0).cos();
            raw[n] = x.sin() / x * w;
        }
        let odd: f64 = 2.0 * raw.iter().skip(1).step_by(2).sum::<f64>();
        for n in (1..12).step_by(2) {
            raw[n] /= odd;
        }
        for n in 0..12 {
            assert!((raw[n] - EXP_HALF_TAPS[n]).abs() < 1e-15, "tap {n}");
        }
        let k = exp_kernel();
        assert_eq!(k.len(), 23);
        assert!((k.dc_gain() - 2.0).abs() < 1e-14);
        for off in (2..=10).step_by(2) {
            assert_eq!(k.taps()[11 + off], 0.0);
            assert_eq!(k.taps()[11 - off], 0.0);
        }
    }

    #[test]
    fn exp_impulse_response_reads_back_taps() {
        let mut img = Raster::zeros(16, 16, 1);
        img.set(0, 8, 8, 1.0);
        let up = exp_upsample(&img, 2).unwrap();
        let k = exp_kernel();
        for dx in -11isize..=11 {
            let x = (16 + dx) as usize;
            let expected = k.taps()[(dx + 11) as usize] * k.taps()[11];
            assert!((up.get(0, 16, x) - expected).abs() < 1e-14, "offset {dx}");
        }
    }

    #[test]
    fn constant_preserved_by_all_resamplers() {
        let c = Raster::constant(32, 32, 2, 0.37);
        let k = mtf_gaussian_kernel(0.3, 4).unwrap();
        let outs = [
            blur_decimate(&c, &k, 4).unwrap(),
            exp_upsample(&c, 2).unwrap(),
            exp_upsample(&c, 4).unwrap(),
            pyr_d2(&c).unwrap(),
            pyr_u2(&c).unwrap(),
            bilinear_up(&c, 4).unwrap(),
            pyr_d2(&pyr_u2(&c).unwrap()).unwrap(),
        ];
        for o in &outs {
            assert!(o.data().iter().all(|&v| (v - 0.37).abs() < 1e-14));
        }
        assert_eq!(outs[0].dims(), (8, 8, 2));
        assert_eq!(outs[2].dims(), (128, 128, 2));
    }

    #[test]
    fn pyramid_shapes() {
        let img = lcg_raster(64, 64, 1, 1);
        assert_eq!(pyr_u2(&img).unwrap().dims(), (128, 128, 1));
        assert_eq!(pyr_d2(&img).unwrap().dims(), (32, 32, 1));
        assert!(pyr_d2(&lcg_raster(63, 64, 1, 2)).is_err());
    }

    #[test]
    fn blur_decimate_matches_dense_oracle() {
        let k = mtf_gaussian_kernel(0.3, 4).unwrap();
        for img in [
            {
                let mut d = Raster::zeros(32, 32, 1);
                d.set(0, 13, 6, 1.0);
                d
            },
            lcg_raster(32, 32, 1, 5),
        ] {
            let fast = blur_decimate(&img, &k, 4).unwrap();
            // dense 2-D convolution over the reflect-padded image, then subsample
            let r = k.radius() as isize;
            let dense = Raster::from_fn(32, 32, 1, |_, y, x| {
                let mut s = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let sy = reflect_index(y as isize + dy, 32);
                        let sx = reflect_index(x as isize + dx, 32);
                        s += k.taps()[(dy + r) as usize] * k.taps()[(dx + r) as usize] * img.get(0, sy, sx);
                    }
                }
                s
            });
            let sub = Raster::from_fn(8, 8, 1, |_, y, x| dense.get(0, 4 * y, 4 * x));
            assert!(fast.max_abs_diff(&sub).unwrap() < 1e-14);
        }
        assert!(blur_decimate(&Raster::zeros(30, 32, 1), &k, 4).is_err());
    }

    #[test]
    fn decimate_1024_to_256() {
        let k = mtf_gaussian_kernel(0.3, 4).unwrap();
        let img = Raster::constant(1024, 1024, 1, 0.5);
        assert_eq!(blur_decimate(&img, &k, 4).unwrap().dims(), (256, 256, 1));
    }

    #[test]
    fn bilinear_2x2_hand_weights() {
        let img = Raster::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let up = bilinear_up(&img, 2).unwrap();
        // 1-D weights for factor 2: src = (j + 0.5)/2 - 0.5 -> [0 (clamped), 0.25, 0.75, 1 (clamped)]
        let axis = [(0usize, 0.0f64), (0, 0.25), (0, 0.75), (1, 0.0)];
        for y in 0..4 {
            for x in 0..4 {
                let (iy, fy) = axis[y];
                let (ix, fx) = axis[x];
                let v = |yy: usize, xx: usize| img.get(0, yy.min(1), xx.min(1));
                let expected = (1.0 - fy) * ((1.0 - fx) * v(iy, ix) + fx * v(iy, ix + 1))
                    + fy * ((1.0 - fx) * v(iy + 1, ix) + fx * v(iy + 1, ix + 1));
                assert!((up.get(0, y, x) - expected).abs() < 1e-15);
            }
        }
        assert!((up.get(0, 1, 1) - 1.75).abs() < 1e-15);
    }

    #[test]
    fn bilinear_is_linear() {
        let a = lcg_raster(5, 7, 1, 3);
        let b = lcg_raster(5, 7, 1, 4);
        let lhs = bilinear_up(&a.zip_map(&b, |x, y| 2.5 * x + y).unwrap(), 3).unwrap();
        let ua = bilinear_up(&a, 3).unwrap();
        let ub = bilinear_up(&b, 3).unwrap();
        let rhs = ua.zip_map(&ub, |x, y| 2.5 * x + y).unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-14);
    }

    #[test]
    fn adjoints_match_inner_products() {
        let ops = [
            SeparableOp::pyr_u2(8, 12),
            SeparableOp::pyr_d2(8, 12),
            SeparableOp::bilinear(8, 12, 4),
            SeparableOp::exp(8, 12, 4),
        ];
        for (i, op) in ops.iter().enumerate() {
            let (ih, iw) = op.in_dims();
            let (oh, ow) = op.out_dims();
            let x = lcg_raster(ih, iw, 1, 10 + i as u64);
            let y = lcg_raster(oh, ow, 1, 20 + i as u64);
            let ax = op.apply(&x).unwrap();
            let aty = op.transpose().apply(&y).unwrap();
            let (l, r) = (inner(&ax, &y), inner(&x, &aty));
            assert!((l - r).abs() <= 1e-10 * l.abs().max(r.abs()), "op {i}: {l} vs {r}");
        }
    }

    #[test]
    fn exp_then_decimate_recovers_band() {
        let img = lcg_raster(16, 16, 1, 9);
        for f in [2, 4] {
            let up = exp_upsample(&img, f).unwrap();
            let back = Raster::from_fn(16, 16, 1, |_, y, x| up.get(0, f * y, f * x));
            assert!((back.mean() - img.mean()).abs() < 1e-12);
            assert!(back.max_abs_diff(&img).unwrap() < 1e-12);
        }
        assert!(exp_upsample(&img, 3).is_err());
    }

    #[test]
    fn wald_degrade_contract() {
        let pan = lcg_raster(64, 64, 1, 1).map(|v| v + 0.5);
        let ms = lcg_raster(16, 16, 4, 2).map(|v| v + 0.5);
        let full = Sample::new(pan, ms.clone(), None, 4).unwrap();
        let red = wald_degrade(&full, &MtfGains::default()).unwrap();
        assert_eq!(red.pan.dims(), (16, 16, 1));
        assert_eq!(red.ms.dims(), (4, 4, 4));
        assert_eq!(red.reference.as_ref().unwrap(), &ms);
        let with_ref = Sample::new(red.pan.clone(), red.ms.clone(), red.reference.clone(), 4).unwrap();
        assert!(wald_degrade(&with_ref, &MtfGains::default()).is_err());

        let cfull = Sample::new(
            Raster::constant(32, 32, 1, 0.2),
            Raster::constant(8, 8, 4, 0.6),
            None,
            4,
        )
        .unwrap();
        let c = wald_degrade(&cfull, &MtfGains::default()).unwrap();
        assert!(c.pan.data().iter().all(|&v| (v - 0.2).abs() < 1e-14));
        assert!(c.ms.data().iter().all(|&v| (v - 0.6).abs() < 1e-14));
    }

    #[test]
    fn kernel_csv_lists_taps() {
        let k = binomial5();
        let csv = kernel_table_csv(&[("binomial", &k)]);
        assert_eq!(csv.lines().count(), 6);
        assert!(csv.lines().nth(3).unwrap().starts_with("binomial,2,0,"));
    }
}
