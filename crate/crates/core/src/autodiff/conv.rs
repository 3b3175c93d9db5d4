//! Convolution kernels (im2col + GEMM) and their adjoints.

use super::{Graph, Shape, Var};
use crate::error::{Error, Result};
use crate::raster::reflect_index;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Reflect,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub pad: usize,
    pub mode: PadMode,
}

impl ConvSpec {
    /// Stride 1 with size-preserving padding.
    pub fn same(kernel: usize, dilation: usize, mode: PadMode) -> Self {
        ConvSpec { stride: 1, dilation, pad: dilation * (kernel - 1) / 2, mode }
    }

    /// 3x3, stride 2, pad 1: halves even spatial sizes.
    pub fn down2(mode: PadMode) -> Self {
        ConvSpec { stride: 2, dilation: 1, pad: 1, mode }
    }
}

const SKIP: usize = usize::MAX;

#[derive(Debug, Clone, Copy)]
struct Geometry {
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    spec: ConvSpec,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn new(channels: usize, h: usize, w: usize, k: usize, spec: ConvSpec) -> Result<Self> {
        let span = spec.dilation * (k - 1) + 1;
        if h + 2 * spec.pad < span || w + 2 * spec.pad < span || spec.stride == 0 {
            return Err(Error::size(format!(
                "{h}x{w} too small for a {k}x{k} kernel with dilation {} and pad {}",
                spec.dilation, spec.pad
            )));
        }
        let oh = (h + 2 * spec.pad - span) / spec.stride + 1;
        let ow = (w + 2 * spec.pad - span) / spec.stride + 1;
        Ok(Geometry { channels, h, w, k, spec, oh, ow })
    }

    fn rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn index_map(&self, out_len: usize, in_len: usize, tap: usize) -> Vec<usize> {
        let s = &self.spec;
        (0..out_len)
            .map(|o| {
                let i = (o * s.stride + tap * s.dilation) as isize - s.pad as isize;
                if i >= 0 && (i as usize) < in_len {
                    i as usize
                } else {
                    match s.mode {
                        PadMode::Zero => SKIP,
                        PadMode::Reflect => reflect_index(i, in_len),
                    }
                }
            })
            .collect()
    }

    fn maps(&self) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
        let ys = (0..self.k).map(|t| self.index_map(self.oh, self.h, t)).collect();
        let xs = (0..self.k).map(|t| self.index_map(self.ow, self.w, t)).collect();
        (ys, xs)
    }

    fn im2col<T: Real>(&self, src: &[T], col: &mut [T]) {
        let (ys, xs) = self.maps();
        let p = self.cols();
        for c in 0..self.channels {
            let plane = &src[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let dst = &mut col[row * p..(row + 1) * p];
                    for (oy, &iy) in ys[ky].iter().enumerate() {
                        let d = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy == SKIP {
                            d.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let srow = &plane[iy * self.w..(iy + 1) * self.w];
                        for (v, &ix) in d.iter_mut().zip(&xs[kx]) {
                            *v = if ix == SKIP { T::zero() } else { srow[ix] };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, col: &[T], dst: &mut [T]) {
        let (ys, xs) = self.maps();
        let p = self.cols();
        for c in 0..self.channels {
            let plane = &mut dst[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let src = &col[row * p..(row + 1) * p];
                    for (oy, &iy) in ys[ky].iter().enumerate() {
                        if iy == SKIP {
                            continue;
                        }
                        let s = &src[oy * self.ow..(oy + 1) * self.ow];
                        let drow = &mut plane[iy * self.w..(iy + 1) * self.w];
                        for (&v, &ix) in s.iter().zip(&xs[kx]) {
                            if ix != SKIP {
                                drow[ix] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(super) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

fn check_bias<T: Real>(g: &Graph<T>, b: Option<Var>, channels: usize) -> Result<()> {
    if let Some(b) = b {
        if g.shape(b).iter().product::<usize>() != channels {
            return Err(Error::shape(format!("bias {:?} for {channels} channels", g.shape(b))));
        }
    }
    Ok(())
}

fn conv_geometry<T: Real>(g: &Graph<T>, x: Var, w: Var, spec: ConvSpec) -> Result<(Geometry, usize, usize)> {
    let [n, c, h, wd] = g.shape(x);
    let [co, ci, kh, kw] = g.shape(w);
    if ci != c || kh != kw {
        return Err(Error::shape(format!("conv weight {:?} for input {:?}", g.shape(w), g.shape(x))));
    }
    Ok((Geometry::new(c, h, wd, kh, spec)?, n, co))
}

pub(super) fn conv_forward<T: Real>(
    g: &Graph<T>,
    x: Var,
    w: Var,
    b: Option<Var>,
    spec: ConvSpec,
) -> Result<(Shape, Vec<T>)> {
    let (geo, n, co) = conv_geometry(g, x, w, spec)?;
    check_bias(g, b, co)?;
    let (k, p) = (geo.rows(), geo.cols());
    let xin = g.value(x);
    let wv = g.value(w);
    let mut out = vec![T::zero(); n * co * p];
    let mut col = vec![T::zero(); k * p];
    let per_in = geo.channels * geo.h * geo.w;
    for i in 0..n {
        geo.im2col(&xin[i * per_in..(i + 1) * per_in], &mut col);
        let o = &mut out[i * co * p..(i + 1) * co * p];
        T::gemm(co, k, p, T::one(), wv, k as isize, 1, &col, p as isize, 1, T::zero(), o, p as isize, 1);
        if let Some(b) = b {
            for (c, bias) in g.value(b).iter().enumerate() {
                o[c * p..(c + 1) * p].iter_mut().for_each(|v| *v += *bias);
            }
        }
    }
    Ok(([n, co, geo.oh, geo.ow], out))
}

pub(super) fn conv_backward<T: Real>(
    g: &Graph<T>,
    dy: &[T],
    x: Var,
    w: Var,
    b: Option<Var>,
    spec: ConvSpec,
) -> ConvGrads<T> {
    let (geo, n, co) = conv_geometry(g, x, w, spec).expect("validated in forward");
    let (k, p) = (geo.rows(), geo.cols());
    let per_in = geo.channels * geo.h * geo.w;
    let want_x = g.rg(x);
    let want_w = g.rg(w);
    let want_b = b.is_some_and(|b| g.rg(b));
    let xin = g.value(x);
    let wv = g.value(w);
    let mut dx = want_x.then(|| vec![T::zero(); xin.len()]);
    let mut dw = want_w.then(|| vec![T::zero(); wv.len()]);
    let mut db = want_b.then(|| vec![T::zero(); co]);
    let mut col = vec![T::zero(); k * p];
    for i in 0..n {
        let dyi = &dy[i * co * p..(i + 1) * co * p];
        if let Some(dw) = dw.as_mut() {
            geo.im2col(&xin[i * per_in..(i + 1) * per_in], &mut col);
            // dW[co, K] += dy[co, P] * col^T
            T::gemm(co, p, k, T::one(), dyi, p as isize, 1, &col, 1, p as isize, T::one(), dw, k as isize, 1);
        }
        if let Some(db) = db.as_mut() {
            for (c, acc) in db.iter_mut().enumerate() {
                *acc += dyi[c * p..(c + 1) * p].iter().copied().sum::<T>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            // dcol[K, P] = W^T dy
            T::gemm(k, co, p, T::one(), wv, 1, k as isize, dyi, p as isize, 1, T::zero(), &mut col, p as isize, 1);
            geo.col2im(&col, &mut dx[i * per_in..(i + 1) * per_in]);
        }
    }
    ConvGrads { dx, dw, db }
}

/// Weight layout `[in, out, 3, 3]`; the map is the adjoint of a zero-padded
/// stride-2 convolution from `out` to `in` channels sharing the same buffer.
fn deconv_geometry<T: Real>(g: &Graph<T>, x: Var, w: Var) -> Result<(Geometry, usize, usize)> {
    let [n, c, h, wd] = g.shape(x);
    let [ci, co, kh, kw] = g.shape(w);
    if ci != c || kh != 3 || kw != 3 {
        return Err(Error::shape(format!("deconv weight {:?} for input {:?}", g.shape(w), g.shape(x))));
    }
    let geo = Geometry::new(co, 2 * h, 2 * wd, 3, ConvSpec::down2(PadMode::Zero))?;
    debug_assert_eq!((geo.oh, geo.ow), (h, wd));
    Ok((geo, n, c))
}

pub(super) fn deconv_forward<T: Real>(g: &Graph<T>, x: Var, w: Var, b: Option<Var>) -> Result<(Shape, Vec<T>)> {
    let (geo, n, ci) = deconv_geometry(g, x, w)?;
    let co = geo.channels;
    check_bias(g, b, co)?;
    let (k, p) = (geo.rows(), geo.cols());
    let per_out = co * geo.h * geo.w;
    let xin = g.value(x);
    let wv = g.value(w);
    let mut out = vec![T::zero(); n * per_out];
    let mut col = vec![T::zero(); k * p];
    for i in 0..n {
        let xi = &xin[i * ci * p..(i + 1) * ci * p];
        // col[K, P] = Wm^T x, Wm = [ci, K]
        T::gemm(k, ci, p, T::one(), wv, 1, k as isize, xi, p as isize, 1, T::zero(), &mut col, p as isize, 1);
        let o = &mut out[i * per_out..(i + 1) * per_out];
        geo.col2im(&col, o);
        if let Some(b) = b {
            let plane = geo.h * geo.w;
            for (c, bias) in g.value(b).iter().enumerate() {
                o[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v += *bias);
            }
        }
    }
    Ok(([n, co, geo.h, geo.w], out))
}

pub(super) fn deconv_backward<T: Real>(g: &Graph<T>, dy: &[T], x: Var, w: Var, b: Option<Var>) -> ConvGrads<T> {
    let (geo, n, ci) = deconv_geometry(g, x, w).expect("validated in forward");
    let co = geo.channels;
    let (k, p) = (geo.rows(), geo.cols());
    let per_out = co * geo.h * geo.w;
    let want_x = g.rg(x);
    let want_w = g.rg(w);
    let want_b = b.is_some_and(|b| g.rg(b));
    let xin = g.value(x);
    let wv = g.value(w);
    let mut dx = want_x.then(|| vec![T::zero(); xin.len()]);
    let mut dw = want_w.then(|| vec![T::zero(); wv.len()]);
    let mut db = want_b.then(|| vec![T::zero(); co]);
    let mut col = vec![T::zero(); k * p];
    let plane = geo.h * geo.w;
    for i in 0..n {
        let dyi = &dy[i * per_out..(i + 1) * per_out];
        if let Some(db) = db.as_mut() {
            for (c, acc) in db.iter_mut().enumerate() {
                *acc += dyi[c * plane..(c + 1) * plane].iter().copied().sum::<T>();
            }
        }
        if dx.is_none() && dw.is_none() {
            continue;
        }
        geo.im2col(dyi, &mut col);
        if let Some(dx) = dx.as_mut() {
            T::gemm(ci, k, p, T::one(), wv, k as isize, 1, &col, p as isize, 1, T::zero(), &mut dx[i * ci * p..(i + 1) * ci * p], p as isize, 1);
        }
        if let Some(dw) = dw.as_mut() {
            let xi = &xin[i * ci * p..(i + 1) * ci * p];
            T::gemm(ci, p, k, T::one(), xi, p as isize, 1, &col, 1, p as isize, T::one(), dw, k as isize, 1);
        }
    }
    ConvGrads { dx, dw, db }
}

#[cfg(test)]
mod tests {
    use super::super::{ParamStore, Tensor};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_1x1() {
        let mut g = Graph::<f64>::new();
        let x = rand_tensor([2, 1, 5, 6], &mut ChaCha8Rng::seed_from_u64(1));
        let xv = g.constant(x.clone());
        let w = g.constant(Tensor::full([1, 1, 1, 1], 1.0));
        let b = g.constant(Tensor::zeros([1, 1, 1, 1]));
        let y = g.conv2d(xv, w, Some(b), ConvSpec::same(1, 1, PadMode::Reflect)).unwrap();
        assert_eq!(g.value(y), x.data());
    }

    #[test]
    fn dilated_impulse_support() {
        let mut g = Graph::<f64>::new();
        let mut x = Tensor::zeros([1, 1, 11, 11]);
        x.data_mut()[5 * 11 + 5] = 1.0;
        let xv = g.constant(x);
        let w = g.constant(Tensor::full([1, 1, 3, 3], 1.0));
        let y = g.conv2d(xv, w, None, ConvSpec::same(3, 2, PadMode::Zero)).unwrap();
        for yy in 0..11 {
            for xx in 0..11 {
                let on = [3, 5, 7].contains(&yy) && [3, 5, 7].contains(&xx);
                assert_eq!(g.value(y)[yy * 11 + xx] != 0.0, on, "({yy},{xx})");
            }
        }
    }

    #[test]
    fn stride_two_halves() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([1, 2, 8, 6]));
        let w = g.constant(Tensor::zeros([3, 2, 3, 3]));
        let y = g.conv2d(x, w, None, ConvSpec::down2(PadMode::Reflect)).unwrap();
        assert_eq!(g.shape(y), [1, 3, 4, 3]);
    }

    #[test]
    fn deconv_doubles_and_bias() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(rand_tensor([2, 3, 4, 5], &mut ChaCha8Rng::seed_from_u64(2)));
        let w = g.constant(Tensor::zeros([3, 2, 3, 3]));
        let b = g.constant(Tensor::new([1, 2, 1, 1], vec![0.5, -1.5]).unwrap());
        let y = g.deconv2d(x, w, Some(b)).unwrap();
        assert_eq!(g.shape(y), [2, 2, 8, 10]);
        let v = g.value(y);
        assert!(v[..80].iter().all(|&a| a == 0.5));
        assert!(v[80..160].iter().all(|&a| a == -1.5));
    }

    #[test]
    fn deconv_is_adjoint_of_strided_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let wid = store.add("w", [3, 2, 3, 3], (0..54).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let x = rand_tensor([2, 2, 8, 6], &mut rng);
        let y = rand_tensor([2, 3, 4, 3], &mut rng);
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x.clone());
        let yv = g.constant(y.clone());
        let w = g.param(&store, wid);
        let cx = g.conv2d(xv, w, None, ConvSpec::down2(PadMode::Zero)).unwrap();
        let dy = g.deconv2d(yv, w, None).unwrap();
        let lhs: f64 = g.value(cx).iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(g.value(dy)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn channel_mismatch_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([1, 2, 4, 4]));
        let w = g.constant(Tensor::zeros([1, 3, 3, 3]));
        assert!(g.conv2d(x, w, None, ConvSpec::same(3, 1, PadMode::Zero)).is_err());
        let wd = g.constant(Tensor::zeros([3, 1, 3, 3]));
        assert!(g.deconv2d(x, wd, None).is_err());
    }
}
