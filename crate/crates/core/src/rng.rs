//! Counter-based random streams.
//!
//! Every stream is keyed by `(seed, domain)` and selects the ChaCha stream
//! number from an index (path, run or step). Because the keystream is
//! addressable, the n-th normal draw of a stream can be produced without
//! generating the ones before it, which is what makes parallel ensembles
//! independent of scheduling.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Purpose of a stream. Different domains never share keystream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StreamDomain {
    Forward,
    ForwardPast,
    Reverse,
    Init,
    Marginal,
    Training,
    Data,
    Measurement,
    Weights,
}

impl StreamDomain {
    fn tag(self) -> u64 {
        match self {
            StreamDomain::Forward => 0x666f_7277_6172_6400,
            StreamDomain::ForwardPast => 0x666f_7277_7061_7374,
            StreamDomain::Reverse => 0x7265_7665_7273_6500,
            StreamDomain::Init => 0x696e_6974_0000_0000,
            StreamDomain::Marginal => 0x6d61_7267_696e_616c,
            StreamDomain::Training => 0x7472_6169_6e00_0000,
            StreamDomain::Data => 0x6461_7461_0000_0000,
            StreamDomain::Measurement => 0x6d65_6173_7572_6500,
            StreamDomain::Weights => 0x7765_6967_6874_7300,
        }
    }
}

const TWO_PI: f64 = std::f64::consts::TAU;
const INV_2_53: f64 = 1.0 / (1u64 << 53) as f64;

/// Deterministic source of uniforms and standard normals.
///
/// Normals use Box–Muller on pairs of 64-bit words, so normal number `j`
/// always lives in keystream words `4*(j/2)..4*(j/2)+4`.
#[derive(Clone, Debug)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl NoiseStream {
    pub fn new(seed: u64, domain: StreamDomain, index: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        key[8..16].copy_from_slice(&domain.tag().to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(index);
        NoiseStream { rng, spare: None }
    }

    /// Stream positioned so that the next call to [`normal`](Self::normal)
    /// returns normal number `position`.
    pub fn at_normal(seed: u64, domain: StreamDomain, index: u64, position: u64) -> Self {
        let mut s = Self::new(seed, domain, index);
        s.rng.set_word_pos(4 * u128::from(position / 2));
        if position % 2 == 1 {
            s.normal();
        }
        s
    }

    /// Uniform draw on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * INV_2_53
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // 1 - u keeps the log argument in (0, 1].
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (TWO_PI * u2).sin_cos();
        self.spare = Some(r * s);
        r * c
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Index in [0, n) drawn uniformly.
    pub fn below(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64) as usize).min(n.saturating_sub(1))
    }
}
