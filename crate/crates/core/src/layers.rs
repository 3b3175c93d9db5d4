//! Parameterised convolution layers shared by every network.

use rand::Rng;

use crate::autodiff::{Bind, ConvSpec, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::real::Real;

/// Standard deviation of the Gaussian weight initialisation.
pub const INIT_STD: f64 = 0.02;

/// Weight initialisation scheme. Layers always draw from `N(0, INIT_STD)`
/// and other schemes rescale those draws, so every scheme consumes the
/// same random numbers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Normal(f64),
    /// `N(0, 2 / fan_in)`.
    FanIn,
}

impl Default for Init {
    fn default() -> Self {
        Init::Normal(INIT_STD)
    }
}

impl Init {
    pub fn std(self, fan_in: usize) -> f64 {
        match self {
            Init::Normal(s) => s,
            Init::FanIn => (2.0 / fan_in as f64).sqrt(),
        }
    }

    /// Rescales freshly drawn weights given as `(id, fan_in)`.
    pub fn apply<T: Real>(self, store: &mut ParamStore<T>, weights: &[(ParamId, usize)]) {
        if self == Init::Normal(INIT_STD) {
            return;
        }
        for &(id, fan_in) in weights {
            let k = T::of(self.std(fan_in) / INIT_STD);
            store.entry_mut(id).value_mut().iter_mut().for_each(|v| *v = *v * k);
        }
    }
}

impl std::fmt::Display for Init {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Init::Normal(s) => write!(f, "{s}"),
            Init::FanIn => f.write_str("fan-in"),
        }
    }
}

impl std::str::FromStr for Init {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "fan-in" => Ok(Init::FanIn),
            t => match t.parse::<f64>() {
                Ok(v) if v > 0.0 && v.is_finite() => Ok(Init::Normal(v)),
                _ => Err(Error::invalid(format!("init must be fan-in or a positive deviation, got {s:?}"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub spec: ConvSpec,
}

impl Conv {
    /// Registers `{name}.w` (Gaussian) and `{name}.b` (zeros).
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        spec: ConvSpec,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.add_normal(&format!("{name}.w"), [out_channels, in_channels, kernel, kernel], INIT_STD, rng)?;
        let bias = store.add_zeros(&format!("{name}.b"), [1, out_channels, 1, 1])?;
        Ok(Conv { weight, bias, in_channels, out_channels, kernel, spec })
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, bind: Bind, x: Var) -> Result<Var> {
        let w = g.bind(store, self.weight, bind);
        let b = g.bind(store, self.bias, bind);
        g.conv2d(x, w, Some(b), self.spec)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

/// Transposed 3x3 convolution doubling the spatial size.
#[derive(Debug, Clone, PartialEq)]
pub struct Deconv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Deconv {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.add_normal(&format!("{name}.w"), [in_channels, out_channels, 3, 3], INIT_STD, rng)?;
        let bias = store.add_zeros(&format!("{name}.b"), [1, out_channels, 1, 1])?;
        Ok(Deconv { weight, bias, in_channels, out_channels })
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, bind: Bind, x: Var) -> Result<Var> {
        let w = g.bind(store, self.weight, bind);
        let b = g.bind(store, self.bias, bind);
        g.deconv2d(x, w, Some(b))
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }

    /// Average number of taps reaching one output pixel at stride 2.
    pub fn fan_in(&self) -> usize {
        (self.in_channels * 9).div_ceil(4)
    }
}
