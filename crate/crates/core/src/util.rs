//! Small numeric helpers shared across modules: seed derivation, order
//! statistics, and distribution functions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal, StudentsT};

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a base seed and a path of integer tags.
///
/// Used to give every fold, permutation draw, and grid task its own stream so
/// results do not depend on scheduling order.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut h = splitmix64(base ^ 0x6C65_616B_6775_6172);
    for &t in tags {
        h = splitmix64(h ^ splitmix64(t.wrapping_add(0x2545_F491_4F6C_DD1D)));
    }
    h
}

pub fn rng_from(base: u64, tags: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(base, tags))
}

/// First 12 hex characters of the SHA-256 digest of `bytes`.
pub fn short_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = hex::encode(digest);
    s.truncate(12);
    s
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator). `None` for fewer than two values.
pub fn sample_sd(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m).powi(2)).sum();
    Some((ss / (xs.len() - 1) as f64).sqrt())
}

pub fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    v
}

/// Median of the finite values in `xs`; NaN when there are none.
pub fn median(xs: &[f64]) -> f64 {
    let v: Vec<f64> = xs.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    let v = sorted(&v);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Raw median absolute deviation around the median (no consistency factor).
pub fn mad(xs: &[f64]) -> f64 {
    let m = median(xs);
    let dev: Vec<f64> = xs.iter().map(|x| (x - m).abs()).collect();
    median(&dev)
}

/// Linear-interpolation quantile (type 7) of already sorted data.
pub fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let q = q.clamp(0.0, 1.0);
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

pub fn normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// Two-sided critical value t_{1 - (1-level)/2, df}.
pub fn t_critical(level: f64, df: f64) -> f64 {
    let dist = StudentsT::new(0.0, 1.0, df).expect("df must be positive");
    dist.inverse_cdf(1.0 - (1.0 - level) / 2.0)
}

/// Upper-tail probability of a chi-square statistic.
pub fn chi2_sf(x: f64, df: f64) -> f64 {
    let dist = ChiSquared::new(df).expect("df must be positive");
    (1.0 - dist.cdf(x)).clamp(0.0, 1.0)
}

/// Wilson score interval for a binomial proportion.
pub fn wilson_interval(successes: usize, trials: usize, level: f64) -> (f64, f64) {
    if trials == 0 {
        return (f64::NAN, f64::NAN);
    }
    let z = normal_quantile(1.0 - (1.0 - level) / 2.0);
    let n = trials as f64;
    let p = successes as f64 / n;
    let denom = 1.0 + z * z / n;
    let center = (p + z * z / (2.0 * n)) / denom;
    let half = z * ((p * (1.0 - p) / n) + z * z / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Exact upper-tail binomial probability P(X >= k) for X ~ Bin(n, p).
pub fn binomial_upper_tail(k: usize, n: usize, p: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    let mut total = 0.0;
    for i in k..=n {
        total += ln_choose(n, i).exp() * p.powi(i as i32) * (1.0 - p).powi((n - i) as i32);
    }
    total.min(1.0)
}

fn ln_choose(n: usize, k: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..k {
        s += ((n - i) as f64).ln() - ((i + 1) as f64).ln();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_by_tag() {
        assert_ne!(derive_seed(1, &[0]), derive_seed(1, &[1]));
        assert_eq!(derive_seed(7, &[3, 4]), derive_seed(7, &[3, 4]));
        assert_ne!(derive_seed(7, &[3, 4]), derive_seed(7, &[4, 3]));
    }

    #[test]
    fn median_and_mad() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[1.0, 2.0, f64::NAN, 3.0]), 2.0);
        assert_eq!(median(&[1.0, 2.0, 3.0, 4.0]), 2.5);
        assert_eq!(mad(&[1.0, 2.0, 3.0, 4.0, 100.0]), 1.0);
    }

    #[test]
    fn t_critical_matches_table() {
        assert!((t_critical(0.95, 2.0) - 4.302_652_7).abs() < 1e-6);
        assert!((t_critical(0.95, 4.0) - 2.776_445_1).abs() < 1e-6);
    }

    #[test]
    fn binomial_tail() {
        // P(X >= 5 | 50, 0.05) and P(X >= 6 | 50, 0.05)
        assert!((binomial_upper_tail(5, 50, 0.05) - 0.103_616_8).abs() < 1e-6);
        assert!((binomial_upper_tail(6, 50, 0.05) - 0.037_776_2).abs() < 1e-6);
    }

    #[test]
    fn wilson_full_success() {
        let (lo, hi) = wilson_interval(300, 300, 0.95);
        assert!((lo - 0.9874).abs() < 1e-3);
        assert!((hi - 1.0).abs() < 1e-12);
        let (lo, _) = wilson_interval(50, 50, 0.95);
        assert!((lo - 0.9287).abs() < 1e-3);
    }
}
