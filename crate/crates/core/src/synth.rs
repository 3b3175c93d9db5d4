//! Seeded synthetic scenes with known spectral structure.
//!
//! A latent high-resolution multispectral scene is composed from smooth
//! random fields, flat-albedo shapes and linear ramps. The PAN image is a
//! convex band mixture of that scene plus fine texture only PAN records;
//! the MS image is the latent scene seen through the MS sensor MTF and
//! decimated by the ratio.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::raster::{Raster, Sample};
use crate::resample::{blur_decimate, mtf_gaussian_kernel};

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    /// PAN side length.
    pub size: usize,
    pub bands: usize,
    pub ratio: usize,
    pub seed: u64,
    pub rectangles: usize,
    pub ellipses: usize,
    pub gradients: usize,
    /// Octaves of the smooth background field.
    pub octaves: usize,
    /// Nonnegative, summing to one.
    pub pan_weights: Vec<f64>,
    /// Amplitude of the PAN-only fine texture.
    pub detail_gain: f64,
    /// Nyquist gain of the MS sensor MTF.
    pub ms_gain: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            size: 256,
            bands: 4,
            ratio: 4,
            seed: 0,
            rectangles: 14,
            ellipses: 10,
            gradients: 2,
            octaves: 4,
            pan_weights: vec![0.1, 0.25, 0.3, 0.35],
            detail_gain: 0.04,
            ms_gain: 0.30,
        }
    }
}

impl SceneSpec {
    pub fn with_seed(seed: u64) -> Self {
        SceneSpec { seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.size % 32 != 0 {
            return Err(Error::size(format!("scene size {} must be a positive multiple of 32", self.size)));
        }
        if self.ratio == 0 || self.size % self.ratio != 0 {
            return Err(Error::size(format!("scene size {} not divisible by ratio {}", self.size, self.ratio)));
        }
        if self.bands == 0 || self.pan_weights.len() != self.bands {
            return Err(Error::invalid(format!("{} PAN weights for {} bands", self.pan_weights.len(), self.bands)));
        }
        let sum: f64 = self.pan_weights.iter().sum();
        if self.pan_weights.iter().any(|&w| w < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("PAN weights must be nonnegative and sum to one"));
        }
        if !(self.detail_gain >= 0.0) {
            return Err(Error::invalid("detail gain must be nonnegative"));
        }
        Ok(())
    }
}

/// Smooth random field on an `n x n` grid: bilinear interpolation of a
/// random lattice with `cells` cells per side, eased with a smoothstep.
fn value_noise(rng: &mut ChaCha8Rng, n: usize, cells: usize) -> Vec<f64> {
    let lattice: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| rng.random_range(-1.0..1.0)).collect();
    let at = |i: usize, j: usize| lattice[i * (cells + 1) + j];
    let ease = |t: f64| t * t * (3.0 - 2.0 * t);
    let step = cells as f64 / n as f64;
    let mut out = Vec::with_capacity(n * n);
    for y in 0..n {
        let fy = (y as f64 + 0.5) * step;
        let (iy, ty) = ((fy.floor() as usize).min(cells - 1), ease(fy - fy.floor()));
        for x in 0..n {
            let fx = (x as f64 + 0.5) * step;
            let (ix, tx) = ((fx.floor() as usize).min(cells - 1), ease(fx - fx.floor()));
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bottom = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

/// Spectrum sharing a common brightness with band-specific variation, so
/// band values are strongly but not perfectly correlated.
fn material(rng: &mut ChaCha8Rng, bands: usize) -> Vec<f64> {
    let level = rng.random_range(0.15..0.8);
    let tilt = rng.random_range(-0.25..0.25);
    (0..bands)
        .map(|b| {
            let pos = if bands > 1 { b as f64 / (bands - 1) as f64 - 0.5 } else { 0.0 };
            (level * (1.0 + tilt * pos) + rng.random_range(-0.06..0.06)).clamp(0.02, 0.98)
        })
        .collect()
}

/// Latent high-resolution MS scene, band-major.
fn latent_scene(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = spec.size;
    let b = spec.bands;
    let background = material(rng, b);
    let mut planes: Vec<Vec<f64>> = background.iter().map(|&v| vec![v; n * n]).collect();

    // smooth band-correlated variation
    for o in 0..spec.octaves {
        let cells = 2usize << o;
        let amp = 0.12 / (1 << o) as f64;
        let shared = value_noise(rng, n, cells);
        for plane in planes.iter_mut() {
            let own = value_noise(rng, n, cells);
            let mix = rng.random_range(0.6..0.9);
            for ((p, s), q) in plane.iter_mut().zip(&shared).zip(&own) {
                *p += amp * (mix * s + (1.0 - mix) * q);
            }
        }
    }

    for _ in 0..spec.gradients {
        let spectrum = material(rng, b);
        let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let (dx, dy) = (angle.cos(), angle.sin());
        let strength = rng.random_range(0.2..0.5);
        for (plane, target) in planes.iter_mut().zip(&spectrum) {
            for y in 0..n {
                for x in 0..n {
                    let t = 0.5 + 0.5 * ((x as f64 / n as f64 - 0.5) * dx + (y as f64 / n as f64 - 0.5) * dy);
                    let p = &mut plane[y * n + x];
                    *p += strength * t * (target - *p);
                }
            }
        }
    }

    let nf = n as f64;
    for _ in 0..spec.rectangles {
        let spectrum = material(rng, b);
        let w = rng.random_range(0.04 * nf..0.3 * nf);
        let h = rng.random_range(0.04 * nf..0.3 * nf);
        let x0 = rng.random_range(0.0..nf - w);
        let y0 = rng.random_range(0.0..nf - h);
        for y in (y0 as usize)..((y0 + h) as usize).min(n) {
            for x in (x0 as usize)..((x0 + w) as usize).min(n) {
                for (plane, v) in planes.iter_mut().zip(&spectrum) {
                    plane[y * n + x] = *v;
                }
            }
        }
    }
    for _ in 0..spec.ellipses {
        let spectrum = material(rng, b);
        let (cx, cy) = (rng.random_range(0.0..nf), rng.random_range(0.0..nf));
        let (rx, ry) = (rng.random_range(0.02 * nf..0.15 * nf), rng.random_range(0.02 * nf..0.15 * nf));
        for y in 0..n {
            for x in 0..n {
                let (u, v) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
                if u * u + v * v <= 1.0 {
                    for (plane, s) in planes.iter_mut().zip(&spectrum) {
                        plane[y * n + x] = *s;
                    }
                }
            }
        }
    }
    for plane in planes.iter_mut() {
        plane.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    planes
}

/// Full-resolution scene: PAN at `size`, MS at `size / ratio`, no reference.
pub fn generate_scene(spec: &SceneSpec) -> Result<Sample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.size;
    let latent = latent_scene(spec, &mut rng);
    let texture = value_noise(&mut rng, n, n / 2);
    let mut pan = vec![0.0; n * n];
    for (plane, w) in latent.iter().zip(&spec.pan_weights) {
        pan.iter_mut().zip(plane).for_each(|(p, v)| *p += w * v);
    }
    for (p, t) in pan.iter_mut().zip(&texture) {
        *p = (*p + spec.detail_gain * t).clamp(0.0, 1.0);
    }
    let pan = Raster::new(n, n, 1, pan)?;
    let latent = Raster::from_bands(n, n, &latent)?;
    let ms = blur_decimate(&latent, &mtf_gaussian_kernel(spec.ms_gain, spec.ratio)?, spec.ratio)?.clip(0.0, 1.0);
    Sample::new(pan, ms, None, spec.ratio)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SceneSpec {
        SceneSpec { size: 64, seed, ..SceneSpec::default() }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_scene(&small(3)).unwrap();
        let b = generate_scene(&small(3)).unwrap();
        let c = generate_scene(&small(4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.pan, c.pan);
    }

    #[test]
    fn values_in_unit_range_and_sizes() {
        let s = generate_scene(&small(1)).unwrap();
        assert_eq!(s.pan.dims(), (64, 64, 1));
        assert_eq!(s.ms.dims(), (16, 16, 4));
        assert!(s.reference.is_none());
        for v in s.pan.data().iter().chain(s.ms.data()) {
            assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn zero_detail_pan_is_band_mixture() {
        let spec = SceneSpec { detail_gain: 0.0, ..small(7) };
        let s = generate_scene(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let latent = latent_scene(&spec, &mut rng);
        for (i, p) in s.pan.data().iter().enumerate() {
            let mix: f64 = latent.iter().zip(&spec.pan_weights).map(|(l, w)| w * l[i]).sum();
            assert_eq!(*p, mix.clamp(0.0, 1.0));
        }
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(generate_scene(&SceneSpec { size: 48, ..small(0) }).is_err());
        assert!(generate_scene(&SceneSpec { pan_weights: vec![0.5, 0.5, 0.5, 0.5], ..small(0) }).is_err());
    }
}
