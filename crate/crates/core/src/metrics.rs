//! Fusion quality indices.
//!
//! With-reference indices compare a fused product against the reference
//! (spectral angle, relative global error, quaternion quality index).
//! Without a reference, spectral and spatial distortions are measured by
//! how the pairwise universal quality index changes between the MS input
//! and the product.

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::resample::{blur_decimate, mtf_gaussian_kernel};

pub const DEFAULT_WINDOW: usize = 32;

/// Mean spectral angle in degrees and the number of pixels skipped
/// because one of the two spectra was the zero vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralAngle {
    pub degrees: f64,
    pub zero_vectors: usize,
}

pub fn spectral_angle(fused: &Raster, reference: &Raster) -> Result<SpectralAngle> {
    fused.check_same_shape(reference)?;
    if fused.bands() < 2 {
        return Err(Error::invalid("spectral angle needs at least two bands"));
    }
    let n = fused.height() * fused.width();
    let mut total = 0.0;
    let mut zero_vectors = 0;
    for p in 0..n {
        let (mut nf, mut nr) = (0.0f64, 0.0f64);
        for b in 0..fused.bands() {
            nf += fused.band(b)[p].powi(2);
            nr += reference.band(b)[p].powi(2);
        }
        if nf == 0.0 || nr == 0.0 {
            zero_vectors += 1;
            continue;
        }
        let (nf, nr) = (nf.sqrt(), nr.sqrt());
        // angle between unit vectors u, v as 2 atan(|u - v| / |u + v|),
        // which stays accurate for nearly parallel spectra
        let (mut diff, mut sum) = (0.0, 0.0);
        for b in 0..fused.bands() {
            let (u, v) = (fused.band(b)[p] / nf, reference.band(b)[p] / nr);
            diff += (u - v) * (u - v);
            sum += (u + v) * (u + v);
        }
        total += 2.0 * diff.sqrt().atan2(sum.sqrt());
    }
    Ok(SpectralAngle { degrees: (total / n as f64).to_degrees(), zero_vectors })
}

pub fn sam(fused: &Raster, reference: &Raster) -> Result<f64> {
    Ok(spectral_angle(fused, reference)?.degrees)
}

pub fn ergas(fused: &Raster, reference: &Raster, ratio: usize) -> Result<f64> {
    fused.check_same_shape(reference)?;
    if ratio == 0 {
        return Err(Error::invalid("ratio must be positive"));
    }
    let n = (fused.height() * fused.width()) as f64;
    let mut acc = 0.0;
    for b in 0..fused.bands() {
        let mu = reference.band_mean(b);
        if mu == 0.0 {
            return Err(Error::Singular(format!("reference band {b} has zero mean")));
        }
        let mse: f64 = fused.band(b).iter().zip(reference.band(b)).map(|(f, r)| (f - r) * (f - r)).sum::<f64>() / n;
        acc += mse / (mu * mu);
    }
    Ok(100.0 / ratio as f64 * (acc / fused.bands() as f64).sqrt())
}

/// Inclusive-exclusive rectangle sums over a plane.
struct Integral {
    w: usize,
    sat: Vec<f64>,
}

impl Integral {
    fn new(h: usize, w: usize, f: impl Fn(usize) -> f64) -> Self {
        let mut sat = vec![0.0; (h + 1) * (w + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += f(y * w + x);
                sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
            }
        }
        Integral { w, sat }
    }

    fn window(&self, y: usize, x: usize, k: usize) -> f64 {
        let s = self.w + 1;
        self.sat[(y + k) * s + x + k] - self.sat[y * s + x + k] - self.sat[(y + k) * s + x] + self.sat[y * s + x]
    }
}

/// Result of a windowed index: the mean over valid windows and how many
/// windows were degenerate (zero denominator) and skipped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowedIndex {
    pub value: f64,
    pub windows: usize,
    pub skipped: usize,
}

fn window_side(h: usize, w: usize, window: usize) -> Result<usize> {
    if window == 0 {
        return Err(Error::invalid("window must be positive"));
    }
    Ok(window.min(h).min(w))
}

/// Combines per-window values. When every window is degenerate the index is
/// 1 for identical inputs and 0 otherwise.
fn finish(sum: f64, windows: usize, skipped: usize, identical: impl FnOnce() -> bool) -> WindowedIndex {
    let valid = windows - skipped;
    let value = if valid > 0 {
        sum / valid as f64
    } else if identical() {
        1.0
    } else {
        0.0
    };
    WindowedIndex { value, windows, skipped }
}

/// Universal image quality index of two single-band planes, averaged over
/// all fully contained `window x window` positions (stride 1). The window
/// shrinks to the image when the image is smaller.
pub fn uiqi_plane(x: &[f64], y: &[f64], h: usize, w: usize, window: usize) -> Result<WindowedIndex> {
    if x.len() != h * w || y.len() != h * w {
        return Err(Error::shape("uiqi planes must match the stated size"));
    }
    let k = window_side(h, w, window)?;
    let sx = Integral::new(h, w, |i| x[i]);
    let sy = Integral::new(h, w, |i| y[i]);
    let sxx = Integral::new(h, w, |i| x[i] * x[i]);
    let syy = Integral::new(h, w, |i| y[i] * y[i]);
    let sxy = Integral::new(h, w, |i| x[i] * y[i]);
    let n = (k * k) as f64;
    let (mut sum, mut windows, mut skipped) = (0.0, 0, 0);
    for wy in 0..=h - k {
        for wx in 0..=w - k {
            windows += 1;
            let mx = sx.window(wy, wx, k) / n;
            let my = sy.window(wy, wx, k) / n;
            let vx = sxx.window(wy, wx, k) / n - mx * mx;
            let vy = syy.window(wy, wx, k) / n - my * my;
            let cxy = sxy.window(wy, wx, k) / n - mx * my;
            let den = (vx + vy) * (mx * mx + my * my);
            if den == 0.0 {
                skipped += 1;
                continue;
            }
            sum += 4.0 * cxy * mx * my / den;
        }
    }
    Ok(finish(sum, windows, skipped, || x == y))
}

pub fn uiqi(x: &Raster, y: &Raster, window: usize) -> Result<f64> {
    x.check_same_shape(y)?;
    if x.bands() != 1 {
        return Err(Error::invalid("uiqi compares single-band rasters"));
    }
    Ok(uiqi_plane(x.data(), y.data(), x.height(), x.width(), window)?.value)
}

/// Hamilton product `p * conj(q)` expressed on component products: entry
/// `[i][j]` of the returned table is the sign with which `p_i q_j` enters
/// output component `c`.
const CONJ_PRODUCT: [[[f64; 4]; 4]; 4] = {
    // p * conj(q), q* = (q0, -q1, -q2, -q3)
    let mut t = [[[0.0; 4]; 4]; 4];
    // real part: p0q0 + p1q1 + p2q2 + p3q3
    t[0][0][0] = 1.0;
    t[0][1][1] = 1.0;
    t[0][2][2] = 1.0;
    t[0][3][3] = 1.0;
    // i: -p0q1 + p1q0 - p2q3 + p3q2
    t[1][0][1] = -1.0;
    t[1][1][0] = 1.0;
    t[1][2][3] = -1.0;
    t[1][3][2] = 1.0;
    // j: -p0q2 + p1q3 + p2q0 - p3q1
    t[2][0][2] = -1.0;
    t[2][1][3] = 1.0;
    t[2][2][0] = 1.0;
    t[2][3][1] = -1.0;
    // k: -p0q3 - p1q2 + p2q1 + p3q0
    t[3][0][3] = -1.0;
    t[3][1][2] = -1.0;
    t[3][2][1] = 1.0;
    t[3][3][0] = 1.0;
    t
};

/// Quaternion product `p * conj(q)`.
pub fn quat_mul_conj(p: [f64; 4], q: [f64; 4]) -> [f64; 4] {
    let mut out = [0.0; 4];
    for (c, o) in out.iter_mut().enumerate() {
        for i in 0..4 {
            for j in 0..4 {
                *o += CONJ_PRODUCT[c][i][j] * p[i] * q[j];
            }
        }
    }
    out
}

fn norm4(q: [f64; 4]) -> f64 {
    q.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Four-band quality index: each pixel is a quaternion and the windowed
/// index uses the modulus of the hypercomplex covariance.
pub fn q4_detail(fused: &Raster, reference: &Raster, window: usize) -> Result<WindowedIndex> {
    fused.check_same_shape(reference)?;
    if fused.bands() != 4 {
        return Err(Error::invalid(format!("Q4 needs exactly 4 bands, got {}", fused.bands())));
    }
    let (h, w) = (fused.height(), fused.width());
    let k = window_side(h, w, window)?;
    let z: Vec<&[f64]> = (0..4).map(|b| fused.band(b)).collect();
    let v: Vec<&[f64]> = (0..4).map(|b| reference.band(b)).collect();
    let mean_z: Vec<Integral> = z.iter().map(|p| Integral::new(h, w, |i| p[i])).collect();
    let mean_v: Vec<Integral> = v.iter().map(|p| Integral::new(h, w, |i| p[i])).collect();
    let energy_z = Integral::new(h, w, |i| z.iter().map(|p| p[i] * p[i]).sum());
    let energy_v = Integral::new(h, w, |i| v.iter().map(|p| p[i] * p[i]).sum());
    let mut cross = Vec::with_capacity(16);
    for zi in &z {
        for vj in &v {
            cross.push(Integral::new(h, w, |i| zi[i] * vj[i]));
        }
    }
    let n = (k * k) as f64;
    let (mut sum, mut windows, mut skipped) = (0.0, 0, 0);
    for wy in 0..=h - k {
        for wx in 0..=w - k {
            windows += 1;
            let mz: [f64; 4] = std::array::from_fn(|b| mean_z[b].window(wy, wx, k) / n);
            let mv: [f64; 4] = std::array::from_fn(|b| mean_v[b].window(wy, wx, k) / n);
            let mut cov = [0.0; 4];
            for (c, out) in cov.iter_mut().enumerate() {
                for i in 0..4 {
                    for j in 0..4 {
                        let s = CONJ_PRODUCT[c][i][j];
                        if s != 0.0 {
                            *out += s * cross[i * 4 + j].window(wy, wx, k) / n;
                        }
                    }
                }
            }
            let mm = quat_mul_conj(mz, mv);
            for c in 0..4 {
                cov[c] -= mm[c];
            }
            let nz2 = mz.iter().map(|a| a * a).sum::<f64>();
            let nv2 = mv.iter().map(|a| a * a).sum::<f64>();
            let vz = energy_z.window(wy, wx, k) / n - nz2;
            let vv = energy_v.window(wy, wx, k) / n - nv2;
            let den = (vz + vv) * (nz2 + nv2);
            if den == 0.0 {
                skipped += 1;
                continue;
            }
            sum += 4.0 * norm4(cov) * nz2.sqrt() * nv2.sqrt() / den;
        }
    }
    Ok(finish(sum, windows, skipped, || fused == reference))
}

pub fn q4(fused: &Raster, reference: &Raster, window: usize) -> Result<f64> {
    Ok(q4_detail(fused, reference, window)?.value)
}

/// Spectral, spatial and combined no-reference indices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoReference {
    pub d_lambda: f64,
    pub d_s: f64,
    pub qnr: f64,
}

/// `pan_low` is PAN degraded to MS scale. Fine-scale comparisons use
/// `window`, MS-scale ones `window / ratio`, so both cover the same ground
/// footprint; windows larger than the image shrink to it.
pub fn no_reference(
    fused: &Raster,
    ms: &Raster,
    pan: &Raster,
    pan_low: &Raster,
    ratio: usize,
    window: usize,
) -> Result<NoReference> {
    let b = fused.bands();
    if ms.bands() != b || pan.bands() != 1 || pan_low.bands() != 1 {
        return Err(Error::shape("fused/ms band counts must agree and PAN must be single-band"));
    }
    if (pan.height(), pan.width()) != (fused.height(), fused.width())
        || (pan_low.height(), pan_low.width()) != (ms.height(), ms.width())
        || fused.height() != ratio * ms.height()
        || fused.width() != ratio * ms.width()
    {
        return Err(Error::size("inconsistent sizes for no-reference assessment"));
    }
    if b < 2 {
        return Err(Error::invalid("spectral distortion needs at least two bands"));
    }
    let coarse_window = (window / ratio).max(1);
    let (fh, fw) = (fused.height(), fused.width());
    let (mh, mw) = (ms.height(), ms.width());
    let qf = |x: &[f64], y: &[f64]| uiqi_plane(x, y, fh, fw, window).map(|q| q.value);
    let qm = |x: &[f64], y: &[f64]| uiqi_plane(x, y, mh, mw, coarse_window).map(|q| q.value);
    let mut dl = 0.0;
    for i in 0..b {
        for j in 0..b {
            if i != j {
                dl += (qf(fused.band(i), fused.band(j))? - qm(ms.band(i), ms.band(j))?).abs();
            }
        }
    }
    let d_lambda = dl / (b * (b - 1)) as f64;
    let mut ds = 0.0;
    for i in 0..b {
        ds += (qf(fused.band(i), pan.data())? - qm(ms.band(i), pan_low.data())?).abs();
    }
    let d_s = ds / b as f64;
    Ok(NoReference { d_lambda, d_s, qnr: (1.0 - d_lambda) * (1.0 - d_s) })
}

/// Degrades PAN to MS scale with its MTF filter, as the no-reference
/// protocol expects.
pub fn pan_to_ms_scale(pan: &Raster, ratio: usize, pan_gain: f64) -> Result<Raster> {
    blur_decimate(pan, &mtf_gaussian_kernel(pan_gain, ratio)?, ratio)
}

/// With-reference indices of one product.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reduced {
    pub q4: f64,
    pub sam: f64,
    pub ergas: f64,
    pub zero_vectors: usize,
}

pub fn reduced(fused: &Raster, reference: &Raster, ratio: usize, window: usize) -> Result<Reduced> {
    let angle = spectral_angle(fused, reference)?;
    Ok(Reduced {
        q4: q4(fused, reference, window)?,
        sam: angle.degrees,
        ergas: ergas(fused, reference, ratio)?,
        zero_vectors: angle.zero_vectors,
    })
}

/// One row of the metrics table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub sample: String,
    pub method: String,
    pub reduced: Option<Reduced>,
    pub no_reference: Option<NoReference>,
}

impl MetricReport {
    pub const HEADER: [&'static str; 9] =
        ["sample", "method", "q4", "sam_deg", "ergas", "d_lambda", "d_s", "qnr", "sam_zero_vectors"];

    /// CSV fields; indices that were not computed are left empty.
    pub fn fields(&self) -> Vec<String> {
        let f = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.10}"));
        vec![
            self.sample.clone(),
            self.method.clone(),
            f(self.reduced.map(|r| r.q4)),
            f(self.reduced.map(|r| r.sam)),
            f(self.reduced.map(|r| r.ergas)),
            f(self.no_reference.map(|n| n.d_lambda)),
            f(self.no_reference.map(|n| n.d_s)),
            f(self.no_reference.map(|n| n.qnr)),
            self.reduced.map_or(String::new(), |r| r.zero_vectors.to_string()),
        ]
    }
}

/// Averages the with-reference indices of several reports.
pub fn mean_reduced(reports: &[Reduced]) -> Option<Reduced> {
    if reports.is_empty() {
        return None;
    }
    let n = reports.len() as f64;
    Some(Reduced {
        q4: reports.iter().map(|r| r.q4).sum::<f64>() / n,
        sam: reports.iter().map(|r| r.sam).sum::<f64>() / n,
        ergas: reports.iter().map(|r| r.ergas).sum::<f64>() / n,
        zero_vectors: reports.iter().map(|r| r.zero_vectors).sum(),
    })
}
