//! Counter-based random number generation.
//!
//! The generator is a SplitMix64 stream indexed by an explicit counter, so a
//! given (seed, call sequence) replays identically on every platform. Child
//! streams are derived from string labels, which lets training code draw the
//! per-epoch randomness it needs without threading one mutable stream through
//! the whole pipeline (and makes checkpoint resume exact).
//!
//! Transcendental functions used by the samplers (`ln`, `exp`) are implemented
//! here from fixed polynomial evaluations rather than delegated to libm, so
//! the draw sequences do not depend on the host's math library.

use crate::error::{CoreError, Result};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic counter-based RNG.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, counter: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derive an independent child stream from a string label.
    pub fn derive(&self, label: &str) -> Rng {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        Rng {
            seed: mix64(self.seed ^ mix64(h)),
            counter: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9007199254740992.0)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via the polar (Marsaglia) method.
    pub fn normal(&mut self) -> f64 {
        loop {
            let u = 2.0 * self.uniform() - 1.0;
            let v = 2.0 * self.uniform() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                return u * (-2.0 * portable_ln(s) / s).sqrt();
            }
        }
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Fisher–Yates permutation of 0..n.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.index(i + 1);
            p.swap(i, j);
        }
        p
    }

    /// Permutation with no fixed point (rejection sampled).
    pub fn derangement(&mut self, n: usize) -> Result<Vec<usize>> {
        if n < 2 {
            return Err(CoreError::arg("derangement requires n >= 2"));
        }
        loop {
            let p = self.permutation(n);
            if p.iter().enumerate().all(|(i, &j)| i != j) {
                return Ok(p);
            }
        }
    }

    /// Gamma(shape, 1) via Marsaglia–Tsang, with the standard boost for
    /// shape < 1.
    pub fn gamma(&mut self, shape: f64) -> Result<f64> {
        if !(shape > 0.0) {
            return Err(CoreError::arg(format!("gamma shape must be > 0, got {shape}")));
        }
        if shape < 1.0 {
            let g = self.gamma(shape + 1.0)?;
            let u = self.uniform().max(f64::MIN_POSITIVE);
            return Ok(g * portable_powf(u, 1.0 / shape));
        }
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (3.0 * d.sqrt());
        loop {
            let x = self.normal();
            let t = 1.0 + c * x;
            if t <= 0.0 {
                continue;
            }
            let v = t * t * t;
            let u = self.uniform().max(f64::MIN_POSITIVE);
            let x2 = x * x;
            if u < 1.0 - 0.0331 * x2 * x2 {
                return Ok(d * v);
            }
            if portable_ln(u) < 0.5 * x2 + d * (1.0 - v + portable_ln(v)) {
                return Ok(d * v);
            }
        }
    }

    /// Beta(alpha, beta) draw in (0, 1) via the gamma ratio.
    pub fn beta(&mut self, alpha: f64, beta: f64) -> Result<f64> {
        if !(alpha > 0.0) || !(beta > 0.0) {
            return Err(CoreError::arg(format!(
                "beta shape parameters must be > 0, got ({alpha}, {beta})"
            )));
        }
        let x = self.gamma(alpha)?;
        let y = self.gamma(beta)?;
        let lam = x / (x + y);
        // Guard against floating-point collapse onto the open interval's ends.
        Ok(lam.clamp(1e-12, 1.0 - 1e-12))
    }
}

const LN2_HI: f64 = 6.931471803691238e-1;
const LN2_LO: f64 = 1.9082149292705877e-10;
const LN2: f64 = std::f64::consts::LN_2;

/// Natural log from explicit range reduction + atanh series.
pub fn portable_ln(x: f64) -> f64 {
    assert!(x > 0.0 && x.is_finite(), "portable_ln domain: {x}");
    let mut xs = x;
    let mut shift = 0i64;
    // Pull subnormals into the normal range.
    if xs < f64::MIN_POSITIVE {
        xs *= 9007199254740992.0; // 2^53
        shift = -53;
    }
    let bits = xs.to_bits();
    let mut e = ((bits >> 52) & 0x7FF) as i64 - 1023 + shift;
    // Mantissa starts in [1, 2); fold onto (1/sqrt2, sqrt2] so the series
    // argument stays small.
    let mut m = f64::from_bits((bits & 0x000F_FFFF_FFFF_FFFF) | 0x3FF0_0000_0000_0000);
    if m > std::f64::consts::SQRT_2 {
        m *= 0.5;
        e += 1;
    }
    let r = (m - 1.0) / (m + 1.0);
    let r2 = r * r;
    // 2*atanh(r) = 2r(1 + r^2/3 + r^4/5 + ...)
    let mut acc = 0.0;
    let mut k = 19.0;
    while k >= 3.0 {
        acc = r2 * (1.0 / k + acc);
        k -= 2.0;
    }
    let ln_m = 2.0 * r * (1.0 + acc);
    e as f64 * LN2_HI + (e as f64 * LN2_LO + ln_m)
}

/// Exponential from explicit range reduction + Taylor series.
pub fn portable_exp(x: f64) -> f64 {
    if x < -745.0 {
        return 0.0;
    }
    if x > 709.0 {
        return f64::INFINITY;
    }
    let k = (x / LN2).round();
    let r = (x - k * LN2_HI) - k * LN2_LO;
    // |r| <= ln2/2; Taylor to r^17 is below 1 ulp.
    let mut term = 1.0;
    let mut sum = 1.0;
    for i in 1..=17 {
        term *= r / i as f64;
        sum += term;
    }
    let ki = k as i64;
    // Scale by 2^k through the exponent bits, in two steps near the limits.
    let scale = |n: i64| -> f64 { f64::from_bits(((n + 1023) as u64) << 52) };
    if ki >= -1020 && ki <= 1020 {
        sum * scale(ki)
    } else if ki > 0 {
        sum * scale(1020) * scale(ki - 1020)
    } else {
        sum * scale(-1020) * scale(ki + 1020)
    }
}

/// x^y for x > 0.
pub fn portable_powf(x: f64, y: f64) -> f64 {
    portable_exp(y * portable_ln(x))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn portable_ln_matches_std() {
        for &x in &[1e-300, 1e-12, 0.1, 0.5, 0.9999, 1.0, 1.0001, 2.0, 10.0, 1e12, 1e300] {
            let got = portable_ln(x);
            let want = x.ln();
            assert!(
                (got - want).abs() <= 1e-14 * want.abs().max(1.0),
                "ln({x}): {got} vs {want}"
            );
        }
    }

    #[test]
    fn portable_exp_matches_std() {
        for &x in &[-700.0, -30.0, -1.0, -1e-9, 0.0, 1e-9, 0.5, 1.0, 30.0, 700.0] {
            let got = portable_exp(x);
            let want = x.exp();
            assert!(
                (got - want).abs() <= 1e-13 * want.abs().max(1e-300),
                "exp({x}): {got} vs {want}"
            );
        }
    }

    #[test]
    fn same_seed_same_sequence() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut a = Rng::new(42).derive("x");
        let mut b = Rng::new(42).derive("x");
        for _ in 0..100 {
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
    }

    #[test]
    fn derived_streams_differ() {
        let root = Rng::new(7);
        let mut a = root.derive("alpha");
        let mut b = root.derive("beta");
        let same = (0..64).filter(|_| a.next_u64() == b.next_u64()).count();
        assert_eq!(same, 0);
    }

    #[test]
    fn uniform_moments() {
        let mut rng = Rng::new(1);
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| rng.uniform()).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 5e-3, "uniform mean {mean}");
    }

    #[test]
    fn normal_moments() {
        let mut rng = Rng::new(2);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "normal mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "normal var {var}");
    }

    #[test]
    fn beta_uniform_case_mean() {
        // Beta(1,1) is U(0,1).
        let mut rng = Rng::new(3);
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| rng.beta(1.0, 1.0).unwrap()).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "beta(1,1) mean {mean}");
    }

    #[test]
    fn beta_bimodal_default_mean() {
        let mut rng = Rng::new(4);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| rng.beta(0.15, 0.15).unwrap()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "beta(0.15,0.15) mean {mean}");
        assert!(draws.iter().all(|&l| l > 0.0 && l < 1.0));
    }

    #[test]
    fn beta_rejects_bad_shapes() {
        let mut rng = Rng::new(5);
        assert!(rng.beta(0.0, 1.0).is_err());
        assert!(rng.beta(1.0, -2.0).is_err());
    }

    #[test]
    fn gamma_mean_matches_shape() {
        let mut rng = Rng::new(6);
        for &shape in &[0.15, 0.5, 1.0, 2.5, 9.0] {
            let n = 50_000;
            let mean: f64 = (0..n).map(|_| rng.gamma(shape).unwrap()).sum::<f64>() / n as f64;
            assert!(
                (mean - shape).abs() < 0.05 * shape.max(0.5),
                "gamma({shape}) mean {mean}"
            );
        }
    }

    #[test]
    fn derangement_has_no_fixed_points() {
        let mut rng = Rng::new(7);
        for _ in 0..50 {
            let d = rng.derangement(10).unwrap();
            assert!(d.iter().enumerate().all(|(i, &j)| i != j));
        }
        assert!(rng.derangement(1).is_err());
    }
}
