//! YCSB-style operation streams over a fixed key population.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};

/// Read/write mix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mix {
    /// 50% writes.
    A,
    /// 5% writes.
    B,
    /// Read only.
    C,
    /// Write only.
    W,
}

impl Mix {
    pub fn write_fraction(&self) -> f64 {
        match self {
            Mix::A => 0.5,
            Mix::B => 0.05,
            Mix::C => 0.0,
            Mix::W => 1.0,
        }
    }
}

impl FromStr for Mix {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "A" => Ok(Mix::A),
            "B" => Ok(Mix::B),
            "C" => Ok(Mix::C),
            "W" => Ok(Mix::W),
            _ => Err(format!("unknown workload '{s}' (expected A, B, C or W)")),
        }
    }
}

impl fmt::Display for Mix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Clone, Debug)]
pub struct WorkloadSpec {
    pub keys: u64,
    pub value_size: u64,
    /// Zipf exponent; 0 is uniform.
    pub theta: f64,
    pub mix: Mix,
    /// Measured operations over all tasks.
    pub ops: u64,
    /// Unmeasured operations run before the measured ones.
    pub warmup: u64,
    pub cns: u16,
    pub threads: u16,
    pub dpms: u16,
    pub seed: u64,
    /// Before warm-up, every measured compute node reads each key once so
    /// that client-side metadata caches start full. Only sep keeps such a
    /// cache; other stores skip this.
    pub warm_caches: bool,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            keys: 100_000,
            value_size: 1024,
            theta: 0.99,
            mix: Mix::B,
            ops: 200_000,
            warmup: 20_000,
            cns: 4,
            threads: 8,
            dpms: 4,
            seed: 1,
            warm_caches: true,
        }
    }
}

impl WorkloadSpec {
    pub fn tasks(&self) -> u64 {
        self.cns as u64 * self.threads as u64
    }
}

/// The 8-byte key of rank-ordered key `i` (0 is the most popular).
pub fn key_name(i: u64) -> Vec<u8> {
    i.to_be_bytes().to_vec()
}

/// Draws key indices: rank r of a Zipf(n, theta) law maps to key r - 1.
#[derive(Clone, Debug)]
pub struct KeyChooser {
    keys: u64,
    zipf: Option<Zipf<f64>>,
}

impl KeyChooser {
    pub fn new(keys: u64, theta: f64) -> Self {
        assert!(keys > 0 && theta >= 0.0);
        KeyChooser {
            keys,
            zipf: (theta > 0.0).then(|| Zipf::new(keys as f64, theta).expect("valid zipf parameters")),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        match &self.zipf {
            Some(z) => (z.sample(rng) as u64).clamp(1, self.keys) - 1,
            None => rng.random_range(0..self.keys),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Op {
    pub key: u64,
    pub write: bool,
}

/// Deterministic per-task operation stream.
pub struct OpStream {
    rng: ChaCha8Rng,
    chooser: KeyChooser,
    write_fraction: f64,
}

impl OpStream {
    pub fn new(spec: &WorkloadSpec, task: u64) -> Self {
        let seed =
            spec.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ task.wrapping_add(1).wrapping_mul(0xff51_afd7_ed55_8ccd);
        OpStream {
            rng: ChaCha8Rng::seed_from_u64(seed),
            chooser: KeyChooser::new(spec.keys, spec.theta),
            write_fraction: spec.mix.write_fraction(),
        }
    }
}

impl Iterator for OpStream {
    type Item = Op;

    fn next(&mut self) -> Option<Op> {
        let key = self.chooser.sample(&mut self.rng);
        let write = self.write_fraction > 0.0 && self.rng.random_bool(self.write_fraction);
        Some(Op { key, write })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let spec = WorkloadSpec {
            mix: Mix::A,
            ..Default::default()
        };
        let a: Vec<Op> = OpStream::new(&spec, 3).take(1000).collect();
        let b: Vec<Op> = OpStream::new(&spec, 3).take(1000).collect();
        let c: Vec<Op> = OpStream::new(&spec, 4).take(1000).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn mixes_have_their_write_share() {
        for (mix, want) in [(Mix::A, 0.5), (Mix::B, 0.05), (Mix::C, 0.0), (Mix::W, 1.0)] {
            let spec = WorkloadSpec {
                mix,
                ..Default::default()
            };
            let n = 100_000;
            let writes = OpStream::new(&spec, 0).take(n).filter(|o| o.write).count();
            let got = writes as f64 / n as f64;
            assert!((got - want).abs() < 0.01, "{mix}: {got}");
        }
    }

    #[test]
    fn parse_mix() {
        assert_eq!("a".parse::<Mix>(), Ok(Mix::A));
        assert!("x".parse::<Mix>().is_err());
    }
}
