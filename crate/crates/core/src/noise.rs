//! Complex white-noise increments driving the diffusion.
//!
//! Each step consumes one complex increment `dξ_m` per coupling operator,
//! with moments `E[dξ_m] = 0`, `E[dξ_m dξ_n] = 0`, and
//! `E[dξ_m dξ_n*] = 2 δ_mn dt`. Realized as `a + i b` with `a`, `b`
//! independent Gaussians of variance `dt`, which meets all three constraints
//! exactly.
//!
//! Streams are keyed by `(seed, trajectory_index)` so ensembles parallelize
//! without coordination: the increment sequence is bitwise reproducible
//! regardless of worker scheduling. Itô bookkeeping (replacing second-order
//! products of increments by their means) is the integrators' job; the
//! sampler never emits pre-multiplied products.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::C64;

/// One complex increment per coupling operator for a single step.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseIncrements {
    values: Vec<C64>,
    dt: f64,
}

impl NoiseIncrements {
    /// Wrap explicit increments (used by tests and forced-noise runs).
    pub fn from_values(values: Vec<C64>, dt: f64) -> Result<Self> {
        if dt <= 0.0 {
            return Err(Error::NonPositiveDt(dt));
        }
        if values.is_empty() {
            return Err(Error::ZeroChannels);
        }
        Ok(Self { values, dt })
    }

    /// All-zero increments: the deterministic drift-only step.
    pub fn zeros(m_count: usize, dt: f64) -> Result<Self> {
        Self::from_values(vec![C64::new(0.0, 0.0); m_count], dt)
    }

    pub fn values(&self) -> &[C64] {
        &self.values
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl Serialize for NoiseIncrements {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Repr {
            dt: f64,
            re: Vec<f64>,
            im: Vec<f64>,
        }
        Repr {
            dt: self.dt,
            re: self.values.iter().map(|z| z.re).collect(),
            im: self.values.iter().map(|z| z.im).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for NoiseIncrements {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Repr {
            dt: f64,
            re: Vec<f64>,
            im: Vec<f64>,
        }
        let r = Repr::deserialize(d)?;
        if r.re.len() != r.im.len() {
            return Err(serde::de::Error::custom("re/im length mismatch"));
        }
        let values =
            r.re.iter()
                .zip(&r.im)
                .map(|(&a, &b)| C64::new(a, b))
                .collect();
        NoiseIncrements::from_values(values, r.dt).map_err(serde::de::Error::custom)
    }
}

/// Reproducible per-trajectory random stream.
///
/// `(seed, trajectory_index)` fully determines the increment sequence; the
/// counter records how many draws the stream has produced.
#[derive(Clone, Debug)]
pub struct NoiseStream {
    seed: u64,
    trajectory_index: u64,
    counter: u64,
    rng: ChaCha12Rng,
}

impl NoiseStream {
    pub fn new(seed: u64, trajectory_index: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(trajectory_index);
        Self {
            seed,
            trajectory_index,
            counter: 0,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn trajectory_index(&self) -> u64 {
        self.trajectory_index
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Draw one complex increment per channel, each `a + i b` with
    /// `a, b ~ N(0, dt)`, and advance the counter.
    pub fn sample_increments(&mut self, m_count: usize, dt: f64) -> Result<NoiseIncrements> {
        if dt <= 0.0 {
            return Err(Error::NonPositiveDt(dt));
        }
        if m_count == 0 {
            return Err(Error::ZeroChannels);
        }
        let sd = dt.sqrt();
        let values = (0..m_count)
            .map(|_| {
                let a: f64 = self.rng.sample(StandardNormal);
                let b: f64 = self.rng.sample(StandardNormal);
                C64::new(a * sd, b * sd)
            })
            .collect();
        self.counter += 1;
        Ok(NoiseIncrements { values, dt })
    }
}
