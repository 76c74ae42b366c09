//! Counter-based, label-splittable random streams and seeded initializers.
//!
//! A draw is a pure function of `(seed, label, counter)`:
//!
//! ```text
//! key   = mix64(seed ^ mix64(fnv1a64(label)))
//! draw  = mix64(key + (counter + 1) * 0x9E3779B97F4A7C15)
//! ```
//!
//! where `mix64` is the SplitMix64 finalizer. A stream is therefore
//! SplitMix64 started at `key`, and any position can be reached directly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over the label bytes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic random stream identified by `(seed, label)`.
///
/// Cloning keeps the position; [`DetRng::derive`] starts an independent
/// stream for another consumer (another layer, epoch or thread).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "RngPosition", into = "RngPosition")]
pub struct DetRng {
    seed: u64,
    label: String,
    counter: u64,
    key: u64,
}

/// Serialized form: the key is recomputed on load.
#[derive(Serialize, Deserialize)]
struct RngPosition {
    seed: u64,
    label: String,
    counter: u64,
}

impl From<RngPosition> for DetRng {
    fn from(p: RngPosition) -> Self {
        DetRng::at(p.seed, p.label, p.counter)
    }
}

impl From<DetRng> for RngPosition {
    fn from(r: DetRng) -> Self {
        RngPosition {
            seed: r.seed,
            label: r.label,
            counter: r.counter,
        }
    }
}

impl DetRng {
    pub fn new(seed: u64, label: impl Into<String>) -> Self {
        Self::at(seed, label, 0)
    }

    /// Stream positioned at `counter`.
    pub fn at(seed: u64, label: impl Into<String>, counter: u64) -> Self {
        let label = label.into();
        let key = Self::key_for(seed, &label);
        DetRng {
            seed,
            label,
            counter,
            key,
        }
    }

    fn key_for(seed: u64, label: &str) -> u64 {
        mix64(seed ^ mix64(fnv1a64(label.as_bytes())))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// New stream with the same seed and `label/suffix`, at counter 0.
    pub fn derive(&self, suffix: &str) -> DetRng {
        DetRng::new(self.seed, format!("{}/{}", self.label, suffix))
    }

    /// Output at an absolute position, without moving the stream.
    pub fn peek(&self, counter: u64) -> u64 {
        mix64(self.key.wrapping_add(counter.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)))
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = self.peek(self.counter);
        self.counter += 1;
        v
    }

    /// Uniform in `[0, 1)` from the top 24 bits; every value is an exact f32.
    pub fn next_f32(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 * (1.0 / 16_777_216.0)
    }

    /// Uniform in `[lo, hi)`, computed as `lo + u * (hi - lo)`.
    pub fn next_range(&mut self, lo: f32, hi: f32) -> f32 {
        lo + self.next_f32() * (hi - lo)
    }

    /// Integer in `[0, bound)` by multiply-shift on the full 64-bit draw.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        debug_assert!(bound > 0);
        ((self.next_u64() as u128 * bound as u128) >> 64) as u64
    }
}

/// `n` uniform draws in `[0, 1)`; advances the stream by `n`.
pub fn uniform(rng: &mut DetRng, n: usize) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::InvalidArgument("uniform needs n >= 1".into()));
    }
    let data = (0..n).map(|_| rng.next_f32()).collect();
    Tensor::new([n], data)
}

/// Fisher-Yates: for `i = n-1 .. 1`, swap `i` with a draw in `[0, i]`.
pub fn shuffle_permutation(rng: &mut DetRng, n: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.next_below(i as u64 + 1) as usize;
        perm.swap(i, j);
    }
    perm
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitKind {
    GlorotUniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitSpec {
    pub kind: InitKind,
    pub seed: u64,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl InitSpec {
    pub fn glorot(seed: u64, fan_in: usize, fan_out: usize) -> Self {
        InitSpec {
            kind: InitKind::GlorotUniform,
            seed,
            fan_in,
            fan_out,
        }
    }

    /// Fans for a dense `[in, out]` or conv `[kh, kw, in, out]` kernel.
    pub fn for_kernel(seed: u64, dims: &[usize]) -> Result<Self> {
        let (fan_in, fan_out) = match *dims {
            [i, o] => (i, o),
            [kh, kw, i, o] => (kh * kw * i, kh * kw * o),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "no fan rule for kernel dims {dims:?}"
                )))
            }
        };
        Ok(Self::glorot(seed, fan_in, fan_out))
    }

    pub fn limit(&self) -> f32 {
        (6.0 / (self.fan_in + self.fan_out) as f64).sqrt() as f32
    }
}

/// Uniform in `[-L, L]`, `L = sqrt(6 / (fan_in + fan_out))`, drawn from
/// stream `(spec.seed, "init/<label>")`.
pub fn glorot_uniform(spec: &InitSpec, shape: &Shape, label: &str) -> Result<Tensor> {
    if spec.fan_in == 0 || spec.fan_out == 0 {
        return Err(Error::InvalidArgument(
            "glorot_uniform needs fan_in, fan_out >= 1".into(),
        ));
    }
    let limit = spec.limit();
    let mut rng = DetRng::new(spec.seed, format!("init/{label}"));
    let data = (0..shape.numel())
        .map(|_| rng.next_range(-limit, limit))
        .collect();
    Tensor::from_shape(shape.clone(), data)
}
