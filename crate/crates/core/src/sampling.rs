//! Deterministic, schedule-independent sampling. Every sample index gets
//! its own ChaCha stream derived from `(seed, stream, index)`, so parallel
//! loops produce the same values as sequential ones.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::linalg::{Elem, C64};

/// Stream identifiers keep independent uses of one seed apart.
pub mod stream {
    pub const VALIDATE: u64 = 1;
    pub const LINEARITY: u64 = 2;
    pub const TORUS: u64 = 3;
    pub const DEFECT_MAIN: u64 = 4;
    pub const DEFECT_AUX: u64 = 5;
    pub const BOUND: u64 = 6;
    pub const STRUCTURE: u64 = 7;
    pub const ORACLE: u64 = 8;
    pub const SUPERSTAB: u64 = 9;
    pub const POINTWISE: u64 = 10;
}

pub fn rng_for(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&stream.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Coordinates i.i.d. standard complex Gaussian.
pub fn gaussian(rng: &mut impl Rng, dim: usize) -> Elem {
    Elem::from_iterator(
        dim,
        (0..dim).map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
        }),
    )
}

/// Gaussian direction rescaled so that `norm(x)` is log-uniform in
/// `[lo, hi]`.
pub fn scaled(rng: &mut impl Rng, dim: usize, lo: f64, hi: f64, norm: impl Fn(&Elem) -> f64) -> Elem {
    let t: f64 = rng.gen_range(0.0..=1.0);
    let target = (lo.ln() + t * (hi.ln() - lo.ln())).exp();
    loop {
        let x = gaussian(rng, dim);
        let n = norm(&x);
        if n > 1e-300 {
            return x * C64::new(target / n, 0.0);
        }
    }
}

/// Uniform point on the complex unit circle.
pub fn unit_scalar(rng: &mut impl Rng) -> C64 {
    let t: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let z = C64::from_polar(1.0, t);
    z / z.norm()
}

/// Complex scalar with modulus log-uniform in `[1e-2, 1e2]`.
pub fn complex_scalar(rng: &mut impl Rng) -> C64 {
    let r = 10f64.powf(rng.gen_range(-2.0..=2.0));
    unit_scalar(rng) * r
}
