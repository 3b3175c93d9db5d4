//! Raster container, reflection padding, windowed means and error maps.
//!
//! Samples are stored planar, band-major then row-major: the sample at
//! `(band, y, x)` lives at `(band * height + y) * width + x`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    bands: usize,
    data: Vec<f64>,
}

impl Raster {
    pub fn new(height: usize, width: usize, bands: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::size(format!(
                "raster dimensions must be positive, got {height}x{width}x{bands}"
            )));
        }
        if data.len() != height * width * bands {
            return Err(Error::size(format!(
                "expected {} samples for {height}x{width}x{bands}, got {}",
                height * width * bands,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite sample at index {pos}")));
        }
        Ok(Raster { height, width, bands, data })
    }

    pub fn zeros(height: usize, width: usize, bands: usize) -> Self {
        Self::constant(height, width, bands, 0.0)
    }

    pub fn constant(height: usize, width: usize, bands: usize, value: f64) -> Self {
        assert!(value.is_finite());
        Raster { height, width, bands, data: vec![value; height * width * bands] }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        bands: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * bands);
        for b in 0..bands {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(b, y, x));
                }
            }
        }
        Raster::new(height, width, bands, data).expect("from_fn produced non-finite samples")
    }

    /// Builds a raster from per-band planes of equal size.
    pub fn from_bands(height: usize, width: usize, planes: &[Vec<f64>]) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * planes.len());
        for p in planes {
            if p.len() != height * width {
                return Err(Error::size("band plane has the wrong length"));
            }
            data.extend_from_slice(p);
        }
        Raster::new(height, width, planes.len(), data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.bands)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, band: usize, y: usize, x: usize) -> f64 {
        self.data[(band * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, band: usize, y: usize, x: usize, v: f64) {
        self.data[(band * self.height + y) * self.width + x] = v;
    }

    pub fn band(&self, band: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[band * n..(band + 1) * n]
    }

    pub fn band_mut(&mut self, band: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[band * n..(band + 1) * n]
    }

    /// Single-band raster holding a copy of `band`.
    pub fn band_raster(&self, band: usize) -> Raster {
        Raster {
            height: self.height,
            width: self.width,
            bands: 1,
            data: self.band(band).to_vec(),
        }
    }

    pub fn select_bands(&self, bands: &[usize]) -> Result<Raster> {
        let mut planes = Vec::with_capacity(bands.len());
        for &b in bands {
            if b >= self.bands {
                return Err(Error::invalid(format!("band {b} out of range ({})", self.bands)));
            }
            planes.push(self.band(b).to_vec());
        }
        Raster::from_bands(self.height, self.width, &planes)
    }

    /// Copies a single-band raster into `bands` identical bands.
    pub fn replicate(&self, bands: usize) -> Result<Raster> {
        if self.bands != 1 {
            return Err(Error::shape("only single-band rasters can be replicated"));
        }
        let planes = vec![self.data.clone(); bands];
        Raster::from_bands(self.height, self.width, &planes)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Raster {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        Raster::new(self.height, self.width, self.bands, data).expect("map produced non-finite samples")
    }

    pub fn zip_map(&self, other: &Raster, f: impl Fn(f64, f64) -> f64) -> Result<Raster> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Raster::new(self.height, self.width, self.bands, data)
    }

    pub fn scale(&self, s: f64) -> Raster {
        self.map(|v| v * s)
    }

    pub fn clip(&self, lo: f64, hi: f64) -> Raster {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Result<Raster> {
        if y0 + height > self.height || x0 + width > self.width || height == 0 || width == 0 {
            return Err(Error::size(format!(
                "crop {height}x{width}+{y0}+{x0} outside {}x{}",
                self.height, self.width
            )));
        }
        Ok(Raster::from_fn(height, width, self.bands, |b, y, x| self.get(b, y0 + y, x0 + x)))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn band_mean(&self, band: usize) -> f64 {
        let p = self.band(band);
        p.iter().sum::<f64>() / p.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Raster) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn check_same_shape(&self, other: &Raster) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.height, self.width, self.bands, other.height, other.width, other.bands
            )));
        }
        Ok(())
    }
}

/// Maps an out-of-range index back into `0..n` by mirroring about the edge
/// samples without repeating them (reflect-101). Offsets larger than the
/// signal fold repeatedly; a length-1 signal maps everything to 0.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

pub fn reflect_pad(img: &Raster, margin: usize) -> Result<Raster> {
    if margin >= img.height.min(img.width) {
        return Err(Error::size(format!(
            "reflection margin {margin} must be smaller than {}x{}",
            img.height, img.width
        )));
    }
    let (h, w) = (img.height + 2 * margin, img.width + 2 * margin);
    let m = margin as isize;
    Ok(Raster::from_fn(h, w, img.bands, |b, y, x| {
        let sy = reflect_index(y as isize - m, img.height);
        let sx = reflect_index(x as isize - m, img.width);
        img.get(b, sy, sx)
    }))
}

/// Windowed mean of one plane over a `(2 * radius + 1)^2` window with
/// reflect-101 borders, computed from a summed-area table.
pub(crate) fn box_mean_plane(src: &[f64], height: usize, width: usize, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let ph = height + 2 * radius;
    let pw = width + 2 * radius;
    // sat[(y+1)*(pw+1) + (x+1)] = sum of padded[0..=y, 0..=x]
    let mut sat = vec![0.0f64; (ph + 1) * (pw + 1)];
    for y in 0..ph {
        let sy = reflect_index(y as isize - r, height);
        let mut row = 0.0;
        for x in 0..pw {
            let sx = reflect_index(x as isize - r, width);
            row += src[sy * width + sx];
            sat[(y + 1) * (pw + 1) + x + 1] = sat[y * (pw + 1) + x + 1] + row;
        }
    }
    let k = 2 * radius + 1;
    let norm = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; height * width];
    for y in 0..height {
        for x in 0..width {
            let (y0, x0, y1, x1) = (y, x, y + k, x + k);
            let s = sat[y1 * (pw + 1) + x1] - sat[y0 * (pw + 1) + x1] - sat[y1 * (pw + 1) + x0]
                + sat[y0 * (pw + 1) + x0];
            out[y * width + x] = s * norm;
        }
    }
    out
}

pub fn box_mean(img: &Raster, radius: usize) -> Result<Raster> {
    if radius == 0 {
        return Err(Error::invalid("box_mean radius must be at least 1"));
    }
    if radius >= img.height.min(img.width) {
        return Err(Error::size(format!(
            "box radius {radius} needs a raster larger than {}x{}",
            img.height, img.width
        )));
    }
    let mut planes = Vec::with_capacity(img.bands);
    for b in 0..img.bands {
        planes.push(box_mean_plane(img.band(b), img.height, img.width, radius));
    }
    Raster::from_bands(img.height, img.width, &planes)
}

/// Per-pixel sum over bands of the absolute difference.
pub fn error_map(a: &Raster, b: &Raster) -> Result<Raster> {
    a.check_same_shape(b)?;
    let n = a.height * a.width;
    let mut out = vec![0.0; n];
    for band in 0..a.bands {
        for ((o, x), y) in out.iter_mut().zip(a.band(band)).zip(b.band(band)) {
            *o += (x - y).abs();
        }
    }
    Raster::new(a.height, a.width, 1, out)
}

/// A (PAN, MS, optional reference) triple with `pan` side = `ratio` x `ms` side.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub pan: Raster,
    pub ms: Raster,
    pub reference: Option<Raster>,
    pub ratio: usize,
}

impl Sample {
    pub fn new(pan: Raster, ms: Raster, reference: Option<Raster>, ratio: usize) -> Result<Self> {
        if ratio < 1 {
            return Err(Error::invalid("ratio must be positive"));
        }
        if pan.bands() != 1 {
            return Err(Error::shape(format!("PAN must have 1 band, got {}", pan.bands())));
        }
        if pan.height() != ratio * ms.height() || pan.width() != ratio * ms.width() {
            return Err(Error::size(format!(
                "PAN {}x{} is not {ratio} x MS {}x{}",
                pan.height(),
                pan.width(),
                ms.height(),
                ms.width()
            )));
        }
        if let Some(r) = &reference {
            if r.dims() != (pan.height(), pan.width(), ms.bands()) {
                return Err(Error::shape(format!(
                    "reference {:?} does not match {}x{}x{}",
                    r.dims(),
                    pan.height(),
                    pan.width(),
                    ms.bands()
                )));
            }
        }
        Ok(Sample { pan, ms, reference, ratio })
    }

    pub fn bands(&self) -> usize {
        self.ms.bands()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_box(img: &Raster, radius: usize) -> Raster {
        let r = radius as isize;
        Raster::from_fn(img.height(), img.width(), img.bands(), |b, y, x| {
            let mut s = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let sy = reflect_index(y as isize + dy, img.height());
                    let sx = reflect_index(x as isize + dx, img.width());
                    s += img.get(b, sy, sx);
                }
            }
            s / ((2 * radius + 1) * (2 * radius + 1)) as f64
        })
    }

    #[test]
    fn reflect_row() {
        let row = Raster::new(1, 3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        // pad a 3x3 copy so the margin precondition holds, then read the middle row
        let img = Raster::from_fn(3, 3, 1, |_, _, x| row.get(0, 0, x));
        let p = reflect_pad(&img, 1).unwrap();
        let mid: Vec<f64> = (0..5).map(|x| p.get(0, 2, x)).collect();
        assert_eq!(mid, vec![2.0, 1.0, 2.0, 3.0, 2.0]);
    }

    #[test]
    fn reflect_2x2_matches_index_mirroring() {
        let img = Raster::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = reflect_pad(&img, 1).unwrap();
        // i' = reflect(i): -1 -> 1, 0 -> 0, 1 -> 1, 2 -> 0
        let idx = [1usize, 0, 1, 0];
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(p.get(0, y, x), img.get(0, idx[y], idx[x]));
            }
        }
        assert_eq!(p.data()[..4], [4.0, 3.0, 4.0, 3.0]);
    }

    #[test]
    fn reflect_margin_too_large() {
        let img = Raster::zeros(3, 5, 1);
        assert!(matches!(reflect_pad(&img, 3), Err(Error::Size(_))));
    }

    #[test]
    fn constant_survives_padding_and_box() {
        let img = Raster::constant(6, 7, 2, 0.25);
        assert!(reflect_pad(&img, 4).unwrap().data().iter().all(|&v| v == 0.25));
        let m = box_mean(&img, 2).unwrap();
        assert!(m.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn box_mean_center_of_1_to_9() {
        let img = Raster::new(3, 3, 1, (1..=9).map(f64::from).collect()).unwrap();
        let m = box_mean(&img, 1).unwrap();
        assert!((m.get(0, 1, 1) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn box_mean_corner_of_2x2() {
        let img = Raster::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = box_mean(&img, 1).unwrap();
        assert!((m.get(0, 0, 0) - 27.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn box_mean_matches_naive_loop() {
        let mut state = 7u64;
        let img = Raster::from_fn(16, 16, 2, |_, _, _| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        });
        for radius in 1..=3 {
            let fast = box_mean(&img, radius).unwrap();
            let slow = naive_box(&img, radius);
            assert!(fast.max_abs_diff(&slow).unwrap() < 1e-13);
        }
    }

    #[test]
    fn error_map_cases() {
        let a = Raster::new(1, 1, 4, vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let b = Raster::new(1, 1, 4, vec![0.4, 0.6, 0.3, 0.5]).unwrap();
        let e = error_map(&a, &b).unwrap();
        assert!((e.get(0, 0, 0) - 0.4).abs() < 1e-12);
        assert!(error_map(&a, &a).unwrap().data().iter().all(|&v| v == 0.0));
        let e3 = error_map(&a.scale(3.0), &b.scale(3.0)).unwrap();
        assert!((e3.get(0, 0, 0) - 1.2).abs() < 1e-12);
        assert!(error_map(&a, &Raster::zeros(1, 1, 3)).is_err());
    }

    #[test]
    fn sample_contract() {
        let pan = Raster::zeros(8, 8, 1);
        let ms = Raster::zeros(2, 2, 4);
        assert!(Sample::new(pan.clone(), ms.clone(), None, 4).is_ok());
        assert!(Sample::new(pan.clone(), ms.clone(), None, 2).is_err());
        assert!(Sample::new(pan.clone(), ms.clone(), Some(Raster::zeros(8, 8, 3)), 4).is_err());
        assert!(Sample::new(pan, ms, Some(Raster::zeros(8, 8, 4)), 4).is_ok());
    }

    #[test]
    fn non_finite_rejected() {
        assert!(Raster::new(1, 2, 1, vec![0.0, f64::NAN]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn raster_strategy() -> impl Strategy<Value = Raster> {
            (2usize..9, 2usize..9, 1usize..3).prop_flat_map(|(h, w, b)| {
                proptest::collection::vec(-1.0f64..1.0, h * w * b)
                    .prop_map(move |d| Raster::new(h, w, b, d).unwrap())
            })
        }

        proptest! {
            #[test]
            fn pad_then_crop_is_identity(img in raster_strategy(), m in 0usize..4) {
                prop_assume!(m < img.height().min(img.width()));
                let p = reflect_pad(&img, m).unwrap();
                let back = p.crop(m, m, img.height(), img.width()).unwrap();
                prop_assert_eq!(back, img);
            }

            #[test]
            fn error_map_symmetric(a in raster_strategy()) {
                let b = a.map(|v| v * 0.5 - 0.1);
                prop_assert_eq!(error_map(&a, &b).unwrap(), error_map(&b, &a).unwrap());
            }
        }
    }
}
