//! Residual compensation networks: the coarse-to-fine and fine-to-coarse
//! pyramid generators and the patch discriminators.

use rand::Rng;

use crate::autodiff::{Bind, ConvSpec, Graph, PadMode, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::layers::{Conv, Deconv};
use crate::real::Real;
use crate::resample::{shared_op, OpKind};

pub const DISC_CHANNELS: [usize; 7] = [32, 64, 128, 256, 512, 512, 1];
pub const DISC_STRIDES: [usize; 7] = [1, 2, 2, 2, 2, 1, 1];
const DISC_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockShape {
    /// Number of stride-2 encoder stages (and decoder stages).
    pub depth: usize,
    /// Residual blocks at the bottleneck.
    pub residual_blocks: usize,
}

impl Default for BlockShape {
    fn default() -> Self {
        BlockShape { depth: 3, residual_blocks: 6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Residual {
    first: Conv,
    second: Conv,
}

/// Encoder / residual body / decoder mapping `2b` channels to `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorBlock {
    encoder: Vec<Conv>,
    body: Vec<Residual>,
    decoder: Vec<Deconv>,
}

impl GeneratorBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        bands: usize,
        shape: BlockShape,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if shape.depth == 0 {
            return Err(Error::invalid("generator block needs at least one encoder stage"));
        }
        let widths: Vec<usize> = (0..shape.depth).map(|i| 4 << i).collect();
        let mut encoder = Vec::with_capacity(shape.depth);
        let mut cin = 2 * bands;
        for (i, &w) in widths.iter().enumerate() {
            let spec = ConvSpec::down2(PadMode::Reflect);
            encoder.push(Conv::new(store, &format!("{name}.e{}", i + 1), cin, w, 3, spec, rng)?);
            cin = w;
        }
        let inner = *widths.last().expect("depth >= 1");
        let same = ConvSpec::same(3, 1, PadMode::Reflect);
        let body = (0..shape.residual_blocks)
            .map(|i| {
                Ok(Residual {
                    first: Conv::new(store, &format!("{name}.rb{}.a", i + 1), inner, inner, 3, same, rng)?,
                    second: Conv::new(store, &format!("{name}.rb{}.b", i + 1), inner, inner, 3, same, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut decoder = Vec::with_capacity(shape.depth);
        let mut cin = inner;
        for j in 0..shape.depth {
            let cout = if j + 1 == shape.depth { bands } else { widths[shape.depth - 1 - j] };
            decoder.push(Deconv::new(store, &format!("{name}.d{}", j + 1), cin, cout, rng)?);
            cin = cout;
        }
        Ok(GeneratorBlock { encoder, body, decoder })
    }

    pub fn depth(&self) -> usize {
        self.encoder.len()
    }

    /// The final transposed convolution producing the detail image.
    pub fn head(&self) -> &Deconv {
        self.decoder.last().expect("decoder is never empty")
    }

    /// Weight tensors with their fan-in, apart from the output head, which
    /// keeps its small draw so a fresh block starts near zero detail.
    pub fn weights(&self) -> Vec<(ParamId, usize)> {
        let mut w: Vec<_> = self.encoder.iter().map(|c| (c.weight, c.fan_in())).collect();
        for r in &self.body {
            w.push((r.first.weight, r.first.fan_in()));
            w.push((r.second.weight, r.second.fan_in()));
        }
        let hidden = self.decoder.len().saturating_sub(1);
        w.extend(self.decoder[..hidden].iter().map(|d| (d.weight, d.fan_in())));
        w
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p: Vec<ParamId> = self.encoder.iter().flat_map(|c| c.params()).collect();
        p.extend(self.body.iter().flat_map(|r| r.first.params().into_iter().chain(r.second.params())));
        p.extend(self.decoder.iter().flat_map(|d| d.params()));
        p
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, bind: Bind, x: Var) -> Result<Var> {
        let [_, _, h, w] = g.shape(x);
        let unit = 1 << self.depth();
        if h % unit != 0 || w % unit != 0 {
            return Err(Error::size(format!("generator block input {h}x{w} is not divisible by {unit}")));
        }
        let mut t = x;
        for conv in &self.encoder {
            let y = conv.apply(g, store, bind, t)?;
            t = g.relu(y);
        }
        for rb in &self.body {
            let a = rb.first.apply(g, store, bind, t)?;
            let a = g.relu(a);
            let b = rb.second.apply(g, store, bind, a)?;
            t = g.add(t, b)?;
        }
        let last = self.decoder.len() - 1;
        for (j, de) in self.decoder.iter().enumerate() {
            t = de.apply(g, store, bind, t)?;
            if j < last {
                t = g.relu(t);
            }
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Each stage doubles the resolution.
    CoarseToFine,
    /// Each stage halves the resolution.
    FineToCoarse,
}

impl Direction {
    fn step(self) -> OpKind {
        match self {
            Direction::CoarseToFine => OpKind::PyrU2,
            Direction::FineToCoarse => OpKind::PyrD2,
        }
    }
}

/// Cascade of generator blocks; stage `s` resamples the running estimate,
/// concatenates it with the input resampled `s` times, and averages the
/// resampled estimate with the predicted detail.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidGenerator {
    direction: Direction,
    stages: Vec<GeneratorBlock>,
}

impl PyramidGenerator {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        direction: Direction,
        bands: usize,
        scales: usize,
        shape: BlockShape,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let stages = (0..scales)
            .map(|s| GeneratorBlock::new(store, &format!("{prefix}.g{}", s + 1), bands, shape, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(PyramidGenerator { direction, stages })
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn stages(&self) -> &[GeneratorBlock] {
        &self.stages
    }

    pub fn scales(&self) -> usize {
        self.stages.len()
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.stages.iter().flat_map(|s| s.params()).collect()
    }

    pub fn weights(&self) -> Vec<(ParamId, usize)> {
        self.stages.iter().flat_map(|s| s.weights()).collect()
    }

    /// Resolution factor between input and output sides.
    pub fn factor(&self) -> usize {
        1 << self.stages.len()
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, bind: Bind, x: Var) -> Result<Var> {
        let mut guides = Vec::with_capacity(self.stages.len());
        let mut level = x;
        for _ in 0..self.stages.len() {
            level = resample(g, level, self.direction.step())?;
            guides.push(level);
        }
        self.forward_guided(g, store, bind, x, &guides)
    }

    /// Runs the cascade with explicit per-stage guidance images; `guides[s]`
    /// must have the resolution of stage `s + 1`'s output.
    pub fn forward_guided<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        bind: Bind,
        x: Var,
        guides: &[Var],
    ) -> Result<Var> {
        if guides.len() != self.stages.len() {
            return Err(Error::invalid(format!("{} guidance images for {} stages", guides.len(), self.stages.len())));
        }
        let mut estimate = x;
        for (block, &guide) in self.stages.iter().zip(guides) {
            let moved = resample(g, estimate, self.direction.step())?;
            let input = g.concat(moved, guide)?;
            let detail = block.forward(g, store, bind, input)?;
            let sum = g.add(moved, detail)?;
            estimate = g.scale(sum, T::of(0.5));
        }
        Ok(estimate)
    }
}

fn resample<T: Real>(g: &mut Graph<T>, x: Var, kind: OpKind) -> Result<Var> {
    let [_, _, h, w] = g.shape(x);
    let op = shared_op(kind, h, w)?;
    g.resample(x, op)
}

/// `pyr_d2` applied `times` times, on the graph.
pub fn reduce<T: Real>(g: &mut Graph<T>, x: Var, times: usize) -> Result<Var> {
    (0..times).try_fold(x, |v, _| resample(g, v, OpKind::PyrD2))
}

/// `pyr_u2` applied `times` times, on the graph.
pub fn expand<T: Real>(g: &mut Graph<T>, x: Var, times: usize) -> Result<Var> {
    (0..times).try_fold(x, |v, _| resample(g, v, OpKind::PyrU2))
}

/// Fully convolutional patch discriminator producing a raw score map.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    layers: Vec<Conv>,
}

impl Discriminator {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, bands: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut cin = bands;
        let mut layers = Vec::with_capacity(DISC_CHANNELS.len());
        for (i, (&cout, &stride)) in DISC_CHANNELS.iter().zip(&DISC_STRIDES).enumerate() {
            let spec = ConvSpec { stride, dilation: 1, pad: 1, mode: PadMode::Reflect };
            layers.push(Conv::new(store, &format!("{prefix}.c{}", i + 1), cin, cout, 3, spec, rng)?);
            cin = cout;
        }
        Ok(Discriminator { layers })
    }

    pub fn layers(&self) -> &[Conv] {
        &self.layers
    }

    pub fn weights(&self) -> Vec<(ParamId, usize)> {
        self.layers.iter().map(|l| (l.weight, l.fan_in())).collect()
    }

    pub fn downsampling(&self) -> usize {
        self.layers.iter().map(|l| l.spec.stride).product()
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, bind: Bind, x: Var) -> Result<Var> {
        let [_, _, h, w] = g.shape(x);
        let unit = self.downsampling();
        if h % unit != 0 || w % unit != 0 {
            return Err(Error::size(format!("discriminator input {h}x{w} is not divisible by {unit}")));
        }
        let last = self.layers.len() - 1;
        let mut t = x;
        for (i, layer) in self.layers.iter().enumerate() {
            t = layer.apply(g, store, bind, t)?;
            if i < last {
                t = g.lrelu(t, T::of(DISC_SLOPE));
            }
        }
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| r.random_range(0.0..1.0)).collect()).unwrap()
    }

    fn zero_head(store: &mut ParamStore<f64>, gen: &PyramidGenerator) {
        for s in gen.stages() {
            for id in s.head().params() {
                let n = store.entry(id).len();
                store.set_value(id, &vec![0.0; n]).unwrap();
            }
        }
    }

    #[test]
    fn block_keeps_size_and_returns_bands() {
        let mut store = ParamStore::<f64>::new();
        let gb = GeneratorBlock::new(&mut store, "gb", 4, BlockShape::default(), &mut rng()).unwrap();
        let mut g = Graph::new();
        let x = g.constant(random_tensor([1, 8, 32, 32], 1));
        let y = gb.forward(&mut g, &store, Bind::Frozen, x).unwrap();
        assert_eq!(g.shape(y), [1, 4, 32, 32]);
        let bad = g.constant(Tensor::zeros([1, 8, 12, 12]));
        assert!(gb.forward(&mut g, &store, Bind::Frozen, bad).is_err());
    }

    #[test]
    fn block_channel_plan() {
        let mut store = ParamStore::<f64>::new();
        let gb = GeneratorBlock::new(&mut store, "gb", 4, BlockShape::default(), &mut rng()).unwrap();
        let enc: Vec<usize> = gb.encoder.iter().map(|c| c.out_channels).collect();
        let dec: Vec<usize> = gb.decoder.iter().map(|d| d.out_channels).collect();
        assert_eq!(enc, vec![4, 8, 16]);
        assert_eq!(dec, vec![16, 8, 4]);
        assert_eq!(gb.body.len(), 6);
        assert!(gb.encoder.iter().all(|c| c.spec.stride == 2));
    }

    #[test]
    fn zero_head_gives_zero_detail() {
        let mut store = ParamStore::<f64>::new();
        let gb = GeneratorBlock::new(&mut store, "gb", 4, BlockShape::default(), &mut rng()).unwrap();
        for id in gb.head().params() {
            let n = store.entry(id).len();
            store.set_value(id, &vec![0.0; n]).unwrap();
        }
        let mut g = Graph::new();
        let x = g.constant(random_tensor([2, 8, 16, 16], 2));
        let y = gb.forward(&mut g, &store, Bind::Frozen, x).unwrap();
        assert!(g.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pyramid_shapes_and_zero_detail_forms() {
        let mut store = ParamStore::<f64>::new();
        let up = PyramidGenerator::new(&mut store, "c2f", Direction::CoarseToFine, 4, 2, BlockShape::default(), &mut rng())
            .unwrap();
        let down =
            PyramidGenerator::new(&mut store, "f2c", Direction::FineToCoarse, 4, 2, BlockShape::default(), &mut rng())
                .unwrap();
        zero_head(&mut store, &up);
        zero_head(&mut store, &down);
        let mut g = Graph::new();
        let x = g.constant(random_tensor([1, 4, 16, 16], 3));
        let y = up.forward(&mut g, &store, Bind::Frozen, x).unwrap();
        assert_eq!(g.shape(y), [1, 4, 64, 64]);
        let uu = expand(&mut g, x, 2).unwrap();
        for (a, b) in g.value(y).iter().zip(g.value(uu)) {
            assert!((a - b / 4.0).abs() < 1e-15);
        }
        let z = down.forward(&mut g, &store, Bind::Frozen, y).unwrap();
        assert_eq!(g.shape(z), [1, 4, 16, 16]);
        let dd = reduce(&mut g, y, 2).unwrap();
        for (a, b) in g.value(z).iter().zip(g.value(dd)) {
            assert!((a - b / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn generators_do_not_share_parameters() {
        let mut store = ParamStore::<f64>::new();
        let up = PyramidGenerator::new(&mut store, "c2f", Direction::CoarseToFine, 4, 2, BlockShape::default(), &mut rng())
            .unwrap();
        let down =
            PyramidGenerator::new(&mut store, "f2c", Direction::FineToCoarse, 4, 2, BlockShape::default(), &mut rng())
                .unwrap();
        let a = up.params();
        assert!(down.params().iter().all(|p| !a.contains(p)));
        let mut g = Graph::new();
        let x = g.constant(random_tensor([1, 4, 16, 16], 4));
        let before = up.forward(&mut g, &store, Bind::Frozen, x).unwrap();
        let before = g.value(before).to_vec();
        for id in down.params() {
            store.entry_mut(id).value_mut().iter_mut().for_each(|v| *v += 1.0);
        }
        let after = up.forward(&mut g, &store, Bind::Frozen, x).unwrap();
        assert_eq!(before, g.value(after));
    }

    #[test]
    fn discriminator_geometry() {
        let mut store = ParamStore::<f64>::new();
        let d = Discriminator::new(&mut store, "df", 4, &mut rng()).unwrap();
        assert_eq!(d.downsampling(), 16);
        let ch: Vec<usize> = d.layers().iter().map(|l| l.out_channels).collect();
        assert_eq!(ch, DISC_CHANNELS);
        let mut g = Graph::new();
        let x = g.constant(random_tensor([2, 4, 64, 64], 5));
        let s = d.forward(&mut g, &store, Bind::Frozen, x).unwrap();
        assert_eq!(g.shape(s), [2, 1, 4, 4]);
        let coarse = g.constant(random_tensor([1, 4, 16, 16], 6));
        let s = d.forward(&mut g, &store, Bind::Frozen, coarse).unwrap();
        assert_eq!(g.shape(s), [1, 1, 1, 1]);
    }
}
