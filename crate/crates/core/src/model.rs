//! The complete two-stage fusion model and its ablated variants.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Bind, Graph, ParamId, ParamStore, Tensor, Var};
use crate::dmg::{Dmg, GuidedParams};
use crate::error::{Error, Result};
use crate::layers::Init;
use crate::raster::{Raster, Sample};
use crate::real::Real;
use crate::resample::exp_upsample;
use crate::ssrc::{expand, reduce, BlockShape, Direction, Discriminator, PyramidGenerator};

/// Model variants: the full model and four reduced ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AblationCase {
    Baseline,
    /// Pre-fusion replaced by averaging the interpolated MS with PAN.
    NoDmg,
    /// Pre-fusion only.
    NoSsrc,
    /// Coarse-to-fine generator and fine discriminator removed.
    NoC2f,
    /// Fine-to-coarse generator and coarse discriminator removed.
    NoF2c,
}

impl AblationCase {
    pub const ALL: [AblationCase; 5] =
        [AblationCase::Baseline, AblationCase::NoDmg, AblationCase::NoSsrc, AblationCase::NoC2f, AblationCase::NoF2c];

    /// Numbering used on the command line: 0 is the full model.
    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL.get(i).copied().ok_or_else(|| Error::invalid(format!("unknown ablation case {i}, expected 0..=4")))
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).expect("listed")
    }

    pub fn parts(self) -> Parts {
        let all = Parts { dmg: true, c2f: true, f2c: true, dc: true, df: true };
        match self {
            AblationCase::Baseline => all,
            AblationCase::NoDmg => Parts { dmg: false, ..all },
            AblationCase::NoSsrc => Parts { dmg: true, c2f: false, f2c: false, dc: false, df: false },
            AblationCase::NoC2f => Parts { c2f: false, df: false, ..all },
            AblationCase::NoF2c => Parts { f2c: false, dc: false, ..all },
        }
    }
}

impl fmt::Display for AblationCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AblationCase::Baseline => f.write_str("baseline"),
            other => write!(f, "case{}", other.index()),
        }
    }
}

impl FromStr for AblationCase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if t == "baseline" {
            return Ok(AblationCase::Baseline);
        }
        let digits = t.strip_prefix("case").unwrap_or(t);
        let i: usize = digits.parse().map_err(|_| Error::invalid(format!("unknown ablation case {s:?}")))?;
        Self::from_index(i)
    }
}

/// Which sub-networks a variant allocates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Parts {
    pub dmg: bool,
    pub c2f: bool,
    pub f2c: bool,
    pub dc: bool,
    pub df: bool,
}

/// What the coarse-to-fine stages concatenate with the running estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Guidance {
    /// The coarse input enlarged with `pyr_u2` to each stage's scale.
    Upsampled,
    /// The pre-fused image reduced with `pyr_d2` to each stage's scale.
    Pyramid,
}

impl fmt::Display for Guidance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Guidance::Upsampled => "upsampled",
            Guidance::Pyramid => "pyramid",
        })
    }
}

impl FromStr for Guidance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "upsampled" => Ok(Guidance::Upsampled),
            "pyramid" => Ok(Guidance::Pyramid),
            other => Err(Error::invalid(format!("unknown guidance {other:?}, expected upsampled|pyramid"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub bands: usize,
    pub ratio: usize,
    pub guided: GuidedParams,
    pub pan_gain: f64,
    pub block: BlockShape,
    pub guidance: Guidance,
    /// Initialisation of the generators (DMG, C2F, F2C).
    pub init: Init,
    /// Initialisation of the discriminators.
    pub disc_init: Init,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            bands: 4,
            ratio: 4,
            guided: GuidedParams::default(),
            pan_gain: 0.15,
            block: BlockShape::default(),
            guidance: Guidance::Upsampled,
            init: Init::default(),
            disc_init: Init::default(),
        }
    }
}

impl ModelConfig {
    /// Number of pyramid stages between the coarse and fine domains.
    pub fn scales(&self) -> Result<usize> {
        if self.ratio < 2 || !self.ratio.is_power_of_two() {
            return Err(Error::invalid(format!("ratio {} is not a power of two >= 2", self.ratio)));
        }
        Ok(self.ratio.trailing_zeros() as usize)
    }
}

/// Handles to every allocated sub-network. Parameters live in a separate
/// [`ParamStore`] under the prefixes `dmg`, `c2f`, `f2c`, `dc` and `df`.
#[derive(Debug, Clone, PartialEq)]
pub struct PcGans {
    pub config: ModelConfig,
    pub case: AblationCase,
    pub dmg: Option<Dmg>,
    pub c2f: Option<PyramidGenerator>,
    pub f2c: Option<PyramidGenerator>,
    pub dc: Option<Discriminator>,
    pub df: Option<Discriminator>,
}

impl PcGans {
    /// Each sub-network draws its initial weights from its own stream, so
    /// a sub-network starts identically in every variant that has it.
    pub fn new<T: Real>(store: &mut ParamStore<T>, config: ModelConfig, case: AblationCase, seed: u64) -> Result<Self> {
        let scales = config.scales()?;
        let parts = case.parts();
        let stream = |k: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k);
            rng
        };
        let b = config.bands;
        let dmg = match parts.dmg {
            true => Some(Dmg::new(store, b, config.guided, config.ratio, config.pan_gain, &mut stream(1))?),
            false => None,
        };
        let pyramid = |store: &mut ParamStore<T>, on: bool, name: &str, dir: Direction, k: u64| -> Result<_> {
            match on {
                true => Ok(Some(PyramidGenerator::new(store, name, dir, b, scales, config.block, &mut stream(k))?)),
                false => Ok(None),
            }
        };
        let c2f = pyramid(store, parts.c2f, "c2f", Direction::CoarseToFine, 2)?;
        let f2c = pyramid(store, parts.f2c, "f2c", Direction::FineToCoarse, 3)?;
        let critic = |store: &mut ParamStore<T>, on: bool, name: &str, k: u64| -> Result<_> {
            match on {
                true => Ok(Some(Discriminator::new(store, name, b, &mut stream(k))?)),
                false => Ok(None),
            }
        };
        let dc = critic(store, parts.dc, "dc", 4)?;
        let df = critic(store, parts.df, "df", 5)?;
        let mut weights: Vec<(ParamId, usize)> = Vec::new();
        weights.extend(dmg.iter().flat_map(|d| d.net.weights()));
        weights.extend([&c2f, &f2c].into_iter().flatten().flat_map(|g| g.weights()));
        config.init.apply(store, &weights);
        let critics: Vec<_> = [&dc, &df].into_iter().flatten().flat_map(|d| d.weights()).collect();
        config.disc_init.apply(store, &critics);
        Ok(PcGans { config, case, dmg, c2f, f2c, dc, df })
    }

    fn scales(&self) -> usize {
        self.config.ratio.trailing_zeros() as usize
    }

    /// `pyr_d2` applied once per pyramid stage.
    pub fn coarse_of<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        reduce(g, x, self.scales())
    }

    /// Pre-fused image: the guided-filter stage, or the plain average when
    /// that stage is ablated.
    pub fn prefuse<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        bind: Bind,
        batch: &Batch<T>,
    ) -> Result<Var> {
        match &self.dmg {
            Some(dmg) => {
                let pan = g.constant(batch.pan.clone());
                let ms = g.constant(batch.ms.clone());
                Ok(dmg.forward(g, store, bind, pan, ms)?.fused)
            }
            None => Ok(g.constant(batch.average.clone().ok_or_else(|| {
                Error::invalid("average pre-fusion requested but the batch carries none")
            })?)),
        }
    }

    /// Coarse-to-fine pass over `coarse_of(fused)`.
    pub fn compensate<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        bind: Bind,
        fused: Var,
        coarse: Var,
    ) -> Result<Var> {
        let c2f = self.c2f.as_ref().ok_or_else(|| Error::invalid("this variant has no coarse-to-fine generator"))?;
        match self.config.guidance {
            Guidance::Upsampled => c2f.forward(g, store, bind, coarse),
            Guidance::Pyramid => {
                let s = self.scales();
                let guides = (1..=s).map(|k| reduce(g, fused, s - k)).collect::<Result<Vec<_>>>()?;
                c2f.forward_guided(g, store, bind, coarse, &guides)
            }
        }
    }

    /// Fine-to-coarse pass.
    pub fn reduce_fine<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, bind: Bind, fine: Var) -> Result<Var> {
        let f2c = self.f2c.as_ref().ok_or_else(|| Error::invalid("this variant has no fine-to-coarse generator"))?;
        f2c.forward(g, store, bind, fine)
    }

    /// Final product of the variant: the compensated image when a
    /// coarse-to-fine generator exists, otherwise the pre-fused image.
    pub fn fuse<T: Real>(&self, store: &ParamStore<T>, batch: &Batch<T>, mode: FuseMode) -> Result<Vec<Raster>> {
        let mut g = Graph::new();
        let fused = self.prefuse(&mut g, store, Bind::Frozen, batch)?;
        let out = match (mode, &self.c2f) {
            (FuseMode::Full, Some(_)) => {
                let coarse = self.coarse_of(&mut g, fused)?;
                self.compensate(&mut g, store, Bind::Frozen, fused, coarse)?
            }
            _ => fused,
        };
        g.tensor(out).to_rasters()
    }

    /// Coarse-to-fine compensation of externally produced fused images.
    pub fn refine<T: Real>(&self, store: &ParamStore<T>, fused: &[&Raster]) -> Result<Vec<Raster>> {
        if let Some(first) = fused.first() {
            let side = self.config.ratio << self.scales();
            if first.height() % side != 0 || first.width() % side != 0 || first.bands() != self.config.bands {
                return Err(Error::size(format!(
                    "refine input {:?} needs {} bands and sides divisible by {side}",
                    first.dims(),
                    self.config.bands
                )));
            }
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::<T>::from_rasters(fused)?);
        let coarse = self.coarse_of(&mut g, x)?;
        let out = self.compensate(&mut g, store, Bind::Frozen, x, coarse)?;
        g.tensor(out).to_rasters()
    }
}

/// Which product [`PcGans::fuse`] returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FuseMode {
    /// The pre-fused image.
    Prefusion,
    /// The compensated image.
    Full,
}

impl FromStr for FuseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "dmg" => Ok(FuseMode::Prefusion),
            "full" => Ok(FuseMode::Full),
            other => Err(Error::invalid(format!("unknown fuse mode {other:?}, expected dmg|full"))),
        }
    }
}

/// Stacked network inputs for several samples of identical size.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub pan: Tensor<T>,
    pub ms: Tensor<T>,
    pub reference: Option<Tensor<T>>,
    /// Average pre-fusion, present when the variant needs it.
    pub average: Option<Tensor<T>>,
}

impl<T: Real> Batch<T> {
    pub fn new(samples: &[&Sample], with_average: bool) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let pans: Vec<&Raster> = samples.iter().map(|s| &s.pan).collect();
        let mss: Vec<&Raster> = samples.iter().map(|s| &s.ms).collect();
        let reference = match samples.iter().map(|s| s.reference.as_ref()).collect::<Option<Vec<&Raster>>>() {
            Some(refs) => Some(Tensor::from_rasters(&refs)?),
            None => None,
        };
        let average = match with_average {
            true => {
                let avgs = samples.iter().map(|s| average_fusion(s)).collect::<Result<Vec<_>>>()?;
                Some(Tensor::from_rasters(&avgs.iter().collect::<Vec<_>>())?)
            }
            false => None,
        };
        Ok(Batch { pan: Tensor::from_rasters(&pans)?, ms: Tensor::from_rasters(&mss)?, reference, average })
    }

    pub fn len(&self) -> usize {
        self.pan.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `(EXP(ms) + PAN replicated over the bands) / 2`.
pub fn average_fusion(sample: &Sample) -> Result<Raster> {
    let up = exp_upsample(&sample.ms, sample.ratio)?;
    let pan = sample.pan.replicate(sample.ms.bands())?;
    up.zip_map(&pan, |a, b| 0.5 * (a + b))
}

/// Coarse-domain image of a raster: `pyr_d2` applied `log2(ratio)` times.
pub fn coarse_raster(x: &Raster, ratio: usize) -> Result<Raster> {
    let mut g = Graph::<f64>::new();
    let v = g.constant(Tensor::from_raster(x));
    let scales = ModelConfig { ratio, ..ModelConfig::default() }.scales()?;
    let c = reduce(&mut g, v, scales)?;
    g.tensor(c).to_raster(0)
}

/// Coarse-domain image enlarged back: `pyr_u2` applied `log2(ratio)` times.
pub fn expand_raster(x: &Raster, ratio: usize) -> Result<Raster> {
    let mut g = Graph::<f64>::new();
    let v = g.constant(Tensor::from_raster(x));
    let scales = ModelConfig { ratio, ..ModelConfig::default() }.scales()?;
    let c = expand(&mut g, v, scales)?;
    g.tensor(c).to_raster(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, SceneSpec};
    use crate::resample::{wald_degrade, MtfGains};

    fn sample() -> Sample {
        let full = generate_scene(&SceneSpec { size: 128, ..SceneSpec::with_seed(2) }).unwrap();
        wald_degrade(&full, &MtfGains::uniform(4, 0.3, 0.15)).unwrap()
    }

    #[test]
    fn case_parsing_round_trips() {
        for c in AblationCase::ALL {
            assert_eq!(c.to_string().parse::<AblationCase>().unwrap(), c);
            assert_eq!(AblationCase::from_index(c.index()).unwrap(), c);
        }
        assert_eq!("2".parse::<AblationCase>().unwrap(), AblationCase::NoSsrc);
        assert!("case7".parse::<AblationCase>().is_err());
    }

    #[test]
    fn variants_allocate_only_their_parts() {
        let mut store = ParamStore::<f32>::new();
        let m = PcGans::new(&mut store, ModelConfig::default(), AblationCase::NoSsrc, 1).unwrap();
        assert!(m.c2f.is_none() && m.dc.is_none() && m.df.is_none() && m.f2c.is_none());
        assert!(store.entries().iter().all(|e| e.name().starts_with("dmg.")));
        let mut store = ParamStore::<f32>::new();
        let m = PcGans::new(&mut store, ModelConfig::default(), AblationCase::NoDmg, 1).unwrap();
        assert!(m.dmg.is_none());
        assert!(store.group("dmg.").is_empty());
    }

    #[test]
    fn sub_networks_start_identically_across_variants() {
        let mut a = ParamStore::<f32>::new();
        PcGans::new(&mut a, ModelConfig::default(), AblationCase::Baseline, 9).unwrap();
        let mut b = ParamStore::<f32>::new();
        PcGans::new(&mut b, ModelConfig::default(), AblationCase::NoDmg, 9).unwrap();
        let name = "c2f.g1.e1.w";
        let va = a.entry(a.find(name).unwrap()).value();
        let vb = b.entry(b.find(name).unwrap()).value();
        assert_eq!(va, vb);
    }

    #[test]
    fn average_of_constants() {
        let pan = Raster::constant(16, 16, 1, 0.8);
        let ms = Raster::constant(4, 4, 4, 0.2);
        let s = Sample::new(pan, ms, None, 4).unwrap();
        let avg = average_fusion(&s).unwrap();
        for v in avg.data() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn refine_of_prefusion_matches_full() {
        let s = sample();
        for guidance in [Guidance::Upsampled, Guidance::Pyramid] {
            let cfg = ModelConfig { guidance, ..ModelConfig::default() };
            let mut store = ParamStore::<f64>::new();
            let m = PcGans::new(&mut store, cfg, AblationCase::Baseline, 3).unwrap();
            let batch = Batch::new(&[&s], false).unwrap();
            let pre = m.fuse(&store, &batch, FuseMode::Prefusion).unwrap();
            let full = m.fuse(&store, &batch, FuseMode::Full).unwrap();
            let refined = m.refine(&store, &[&pre[0]]).unwrap();
            assert_eq!(refined[0], full[0]);
            assert_eq!(full[0].dims(), (32, 32, 4));
        }
    }

    #[test]
    fn coarse_and_expand_shapes() {
        let x = Raster::constant(32, 32, 4, 0.3);
        let c = coarse_raster(&x, 4).unwrap();
        assert_eq!(c.dims(), (8, 8, 4));
        let e = expand_raster(&c, 4).unwrap();
        assert_eq!(e.dims(), (32, 32, 4));
    }
}
