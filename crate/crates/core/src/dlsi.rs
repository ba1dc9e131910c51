//! Inflation between a leaky and a guarded fit measured on shared folds:
//! repeat-level deltas, a Huber location estimate, BCa intervals and a
//! sign-flip randomization test.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricName;
use crate::resample::{aggregate_repeats, FitResult};
use crate::util::{mean, median, normal_cdf, normal_quantile, quantile_sorted, rng_from, sorted};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exchangeability {
    Iid,
    BlockedTime,
    ByGroup,
    WithinBatch,
}

impl Exchangeability {
    pub fn parse(s: &str) -> Result<Exchangeability> {
        match s {
            "iid" => Ok(Exchangeability::Iid),
            "blocked_time" => Ok(Exchangeability::BlockedTime),
            "by_group" => Ok(Exchangeability::ByGroup),
            "within_batch" => Ok(Exchangeability::WithinBatch),
            _ => Err(Error::invalid(format!("unknown exchangeability `{s}`"))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Exchangeability::Iid => "iid",
            Exchangeability::BlockedTime => "blocked_time",
            Exchangeability::ByGroup => "by_group",
            Exchangeability::WithinBatch => "within_batch",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HuberConfig {
    pub k: f64,
    pub scale_factor: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for HuberConfig {
    fn default() -> Self {
        HuberConfig {
            k: 1.345,
            scale_factor: 1.4826,
            max_iter: 100,
            tol: 1e-10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HuberEstimate {
    pub value: f64,
    pub scale: f64,
    pub iterations: usize,
    /// The MAD was zero, so the median was returned.
    pub degenerate_scale: bool,
}

/// Huber M-estimate of location with the scale fixed at
/// `scale_factor · MAD`, solved by IRLS from the median.
pub fn huber_estimate(deltas: &[f64], cfg: &HuberConfig) -> Result<HuberEstimate> {
    if deltas.is_empty() {
        return Err(Error::invalid("Huber location of an empty vector"));
    }
    if cfg.k <= 0.0 {
        return Err(Error::invalid("Huber k must be positive"));
    }
    let med = median(deltas);
    let dev: Vec<f64> = deltas.iter().map(|d| (d - med).abs()).collect();
    let scale = cfg.scale_factor * median(&dev);
    if scale <= 0.0 {
        return Ok(HuberEstimate {
            value: med,
            scale: 0.0,
            iterations: 0,
            degenerate_scale: true,
        });
    }
    let c = cfg.k * scale;
    let mut mu = med;
    let mut iterations = 0;
    for it in 1..=cfg.max_iter {
        iterations = it;
        let (mut sw, mut swd) = (0.0, 0.0);
        for &d in deltas {
            let r = (d - mu).abs();
            let w = if r <= c { 1.0 } else { c / r };
            sw += w;
            swd += w * d;
        }
        let next = swd / sw;
        let change = (next - mu).abs();
        mu = next;
        if change < cfg.tol {
            break;
        }
    }
    Ok(HuberEstimate {
        value: mu,
        scale,
        iterations,
        degenerate_scale: false,
    })
}

pub fn huber_location(deltas: &[f64], cfg: &HuberConfig) -> Result<f64> {
    huber_estimate(deltas, cfg).map(|h| h.value)
}

/// The Huber objective `Σ ρ_k((Δ − μ)/σ)` for a given scale.
pub fn huber_objective(deltas: &[f64], mu: f64, scale: f64, k: f64) -> f64 {
    deltas
        .iter()
        .map(|d| {
            let u = ((d - mu) / scale).abs();
            if u <= k {
                0.5 * u * u
            } else {
                k * u - 0.5 * k * k
            }
        })
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Mean,
    Huber,
}

fn estimate(e: Estimator, v: &[f64], h: &HuberConfig) -> f64 {
    match e {
        Estimator::Mean => mean(v),
        Estimator::Huber => huber_location(v, h).unwrap_or(f64::NAN),
    }
}

/// Bias-corrected and accelerated bootstrap interval. The interval is
/// widened if needed so that it contains the point estimate.
pub fn bca_interval(
    deltas: &[f64],
    estimator: Estimator,
    m_boot: usize,
    level: f64,
    seed: u64,
    huber: &HuberConfig,
) -> Result<(f64, f64)> {
    let r = deltas.len();
    if r < 10 {
        return Err(Error::invalid(format!(
            "BCa needs at least 10 paired repeats, got {r}"
        )));
    }
    if m_boot == 0 {
        return Err(Error::invalid("bootstrap count must be positive"));
    }
    if deltas.iter().all(|&d| d == deltas[0]) {
        return Ok((deltas[0], deltas[0]));
    }
    let theta = estimate(estimator, deltas, huber);
    let boot: Vec<f64> = (0..m_boot)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng_from(seed, &[0xB0, b as u64]);
            let s: Vec<f64> = (0..r).map(|_| deltas[rng.random_range(0..r)]).collect();
            estimate(estimator, &s, huber)
        })
        .collect();
    let boot = sorted(&boot);
    if boot.first() == boot.last() {
        return Ok((theta, theta));
    }
    let below = boot.iter().filter(|&&b| b < theta).count() as f64;
    let equal = boot.iter().filter(|&&b| b == theta).count() as f64;
    let frac = ((below + 0.5 * equal) / m_boot as f64)
        .clamp(0.5 / m_boot as f64, 1.0 - 0.5 / m_boot as f64);
    let z0 = normal_quantile(frac);
    let jack: Vec<f64> = (0..r)
        .map(|i| {
            let s: Vec<f64> = deltas
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, d)| *d)
                .collect();
            estimate(estimator, &s, huber)
        })
        .collect();
    let jm = mean(&jack);
    let num: f64 = jack.iter().map(|j| (jm - j).powi(3)).sum();
    let den: f64 = jack.iter().map(|j| (jm - j).powi(2)).sum::<f64>().powf(1.5);
    let a = if den > 0.0 { num / (6.0 * den) } else { 0.0 };
    let adj = |q: f64| {
        let z = normal_quantile(q);
        normal_cdf(z0 + (z0 + z) / (1.0 - a * (z0 + z)))
    };
    let tail = (1.0 - level) / 2.0;
    let lo = quantile_sorted(&boot, adj(tail));
    let hi = quantile_sorted(&boot, adj(1.0 - tail));
    Ok((lo.min(theta), hi.max(theta)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlipMethod {
    Exact,
    MonteCarlo,
    Block,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignFlipResult {
    pub t_observed: f64,
    pub p_value: f64,
    pub method: FlipMethod,
    /// Number of sign vectors evaluated.
    pub m_flip: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_length: Option<usize>,
    pub exchangeability: Exchangeability,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Largest number of flip units enumerated exhaustively.
pub const EXACT_MAX: usize = 15;

/// Sign-flip test of `mean(Δ) > 0`. Up to 15 flip units are enumerated
/// exactly (the identity assignment counts); beyond that `m_flip` random
/// sign vectors are drawn and the Phipson–Smyth correction applied. Under
/// `blocked_time` contiguous blocks of `block_len` repeats (default
/// `⌈√R⌉`) share a sign.
pub fn sign_flip_test(
    deltas: &[f64],
    exchangeability: Exchangeability,
    m_flip: usize,
    seed: u64,
    block_len: Option<usize>,
) -> Result<SignFlipResult> {
    let r = deltas.len();
    if r == 0 {
        return Err(Error::invalid("sign-flip test of an empty vector"));
    }
    let mut warnings = Vec::new();
    let used = match exchangeability {
        Exchangeability::ByGroup | Exchangeability::WithinBatch => {
            warnings.push(format!(
                "{exchangeability:?} exchangeability is not implemented; using iid sign flips"
            ));
            Exchangeability::Iid
        }
        e => e,
    };
    let (units, block_length) = if used == Exchangeability::BlockedTime {
        let b = block_len
            .unwrap_or_else(|| (r as f64).sqrt().ceil() as usize)
            .max(1);
        (
            deltas
                .chunks(b)
                .map(|c| c.iter().sum::<f64>())
                .collect::<Vec<f64>>(),
            Some(b),
        )
    } else {
        (deltas.to_vec(), None)
    };
    let t_obs_sum: f64 = units.iter().sum();
    let scale: f64 = units.iter().map(|u| u.abs()).sum();
    let tol = 1e-12 * scale.max(1e-300);
    let u = units.len();
    let (p, method, count) = if u <= EXACT_MAX {
        let total = 1usize << u;
        let b = (0..total)
            .filter(|mask| {
                let s: f64 = units
                    .iter()
                    .enumerate()
                    .map(|(i, x)| if mask >> i & 1 == 1 { -x } else { *x })
                    .sum();
                s >= t_obs_sum - tol
            })
            .count();
        let m = if block_length.is_some() {
            FlipMethod::Block
        } else {
            FlipMethod::Exact
        };
        (b as f64 / total as f64, m, total)
    } else {
        if m_flip == 0 {
            return Err(Error::invalid(
                "Monte Carlo sign-flip needs a positive draw count",
            ));
        }
        let b = (0..m_flip)
            .into_par_iter()
            .filter(|&d| {
                let mut rng = rng_from(seed, &[0x5F, d as u64]);
                let s: f64 = units
                    .iter()
                    .map(|x| if rng.random::<bool>() { -x } else { *x })
                    .sum();
                s >= t_obs_sum - tol
            })
            .count();
        let m = if block_length.is_some() {
            FlipMethod::Block
        } else {
            FlipMethod::MonteCarlo
        };
        ((b + 1) as f64 / (m_flip + 1) as f64, m, m_flip)
    };
    Ok(SignFlipResult {
        t_observed: mean(deltas),
        p_value: p,
        method,
        m_flip: count,
        block_length,
        exchangeability: used,
        warnings,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaVector {
    pub metric: MetricName,
    /// Positive means the leaky pipeline looks better.
    pub deltas: Vec<f64>,
    pub repeat_ids: Vec<usize>,
    pub paired: bool,
    pub higher_is_better: bool,
    /// Repeat means of each pipeline (all usable repeats, raw metric scale).
    pub leaky_means: Vec<f64>,
    pub guarded_means: Vec<f64>,
}

/// Repeat-level deltas. The fits are paired only when their split plans have
/// the same membership hash.
pub fn pair_fits(
    leaky: &FitResult,
    guarded: &FitResult,
    metric: MetricName,
) -> Result<DeltaVector> {
    for (fr, which) in [(leaky, "leaky"), (guarded, "guarded")] {
        if !fr.metrics.contains(&metric) {
            return Err(Error::invalid(format!(
                "metric `{metric}` is missing from the {which} fit"
            )));
        }
    }
    let l = aggregate_repeats(leaky, metric)?;
    let g = aggregate_repeats(guarded, metric)?;
    let paired = leaky.plan_hash == guarded.plan_hash;
    let sign = if metric.higher_is_better() { 1.0 } else { -1.0 };
    let mut deltas = Vec::new();
    let mut repeat_ids = Vec::new();
    if paired {
        for lr in &l.repeats {
            if let Some(gr) = g.repeats.iter().find(|g| g.repeat == lr.repeat) {
                deltas.push(sign * (lr.mean - gr.mean));
                repeat_ids.push(lr.repeat);
            }
        }
    }
    Ok(DeltaVector {
        metric,
        deltas,
        repeat_ids,
        paired,
        higher_is_better: metric.higher_is_better(),
        leaky_means: l.repeats.iter().map(|r| r.mean).collect(),
        guarded_means: g.repeats.iter().map(|r| r.mean).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tier {
    #[serde(rename = "D_insufficient")]
    D,
    #[serde(rename = "C_signflip")]
    C,
    #[serde(rename = "B_signflip_ci")]
    B,
    #[serde(rename = "A_full_inference")]
    A,
}

impl Tier {
    pub fn label(&self) -> &'static str {
        match self {
            Tier::D => "D_insufficient",
            Tier::C => "C_signflip",
            Tier::B => "B_signflip_ci",
            Tier::A => "A_full_inference",
        }
    }
}

/// Evidence tier from the effective number of paired repeats.
pub fn tier_for(r_eff: usize, paired: bool) -> Tier {
    match (paired, r_eff) {
        (false, _) => Tier::D,
        (true, r) if r >= 20 => Tier::A,
        (true, r) if r >= 10 => Tier::B,
        (true, r) if r >= 5 => Tier::C,
        _ => Tier::D,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DlsiConfig {
    pub metric: MetricName,
    pub m_boot: usize,
    pub m_flip: usize,
    pub exchangeability: Exchangeability,
    pub block_len: Option<usize>,
    pub level: f64,
    pub seed: u64,
    pub huber: HuberConfig,
}

impl Default for DlsiConfig {
    fn default() -> Self {
        DlsiConfig {
            metric: MetricName::Auc,
            m_boot: 2000,
            m_flip: 10000,
            exchangeability: Exchangeability::Iid,
            block_len: None,
            level: 0.95,
            seed: 1,
            huber: HuberConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaLsiResult {
    pub schema_version: u32,
    pub metric: MetricName,
    pub higher_is_better: bool,
    pub delta_metric: f64,
    pub delta_lsi: f64,
    pub ci_metric: Option<(f64, f64)>,
    pub ci_lsi: Option<(f64, f64)>,
    pub p_signflip: Option<f64>,
    pub signflip: Option<SignFlipResult>,
    pub tier: Tier,
    pub inference_ok: bool,
    pub r_eff: usize,
    pub paired: bool,
    pub leaky_mean: f64,
    pub guarded_mean: f64,
    pub exchangeability: Exchangeability,
    pub deltas: Vec<f64>,
    pub leaky_plan_hash: String,
    pub guarded_plan_hash: String,
    pub config: DlsiConfig,
    #[serde(default)]
    pub notes: Vec<String>,
}

/// Compare a leaky and a guarded fit.
pub fn delta_lsi(
    leaky: &FitResult,
    guarded: &FitResult,
    cfg: &DlsiConfig,
) -> Result<DeltaLsiResult> {
    let dv = pair_fits(leaky, guarded, cfg.metric)?;
    let sign = if dv.higher_is_better { 1.0 } else { -1.0 };
    let r_eff = dv.deltas.len();
    let tier = tier_for(r_eff, dv.paired);
    let mut notes = Vec::new();
    if dv.leaky_means.is_empty() || dv.guarded_means.is_empty() {
        return Err(Error::Fit("a pipeline has no usable repeat".into()));
    }
    let leaky_mean = mean(&dv.leaky_means);
    let guarded_mean = mean(&dv.guarded_means);
    let (delta_metric, delta_lsi) = if dv.paired && r_eff > 0 {
        let h = huber_estimate(&dv.deltas, &cfg.huber)?;
        if h.degenerate_scale {
            notes.push("deltas have zero MAD; the Huber estimate is their median".into());
        }
        (mean(&dv.deltas), h.value)
    } else {
        if !dv.paired {
            notes.push("fits do not share a split plan; inference suppressed (unpaired)".into());
        }
        let hl = huber_location(&dv.leaky_means, &cfg.huber)?;
        let hg = huber_location(&dv.guarded_means, &cfg.huber)?;
        (sign * (leaky_mean - guarded_mean), sign * (hl - hg))
    };
    if dv.paired && tier == Tier::D {
        notes.push(format!(
            "only {r_eff} paired repeat(s); inference suppressed (insufficient repeats)"
        ));
    }
    let mut signflip = None;
    let mut ci_metric = None;
    let mut ci_lsi = None;
    if tier >= Tier::C {
        signflip = Some(sign_flip_test(
            &dv.deltas,
            cfg.exchangeability,
            cfg.m_flip,
            cfg.seed,
            cfg.block_len,
        )?);
    }
    if tier >= Tier::B {
        ci_metric = Some(bca_interval(
            &dv.deltas,
            Estimator::Mean,
            cfg.m_boot,
            cfg.level,
            cfg.seed,
            &cfg.huber,
        )?);
        ci_lsi = Some(bca_interval(
            &dv.deltas,
            Estimator::Huber,
            cfg.m_boot,
            cfg.level,
            derive(cfg.seed),
            &cfg.huber,
        )?);
    } else if tier == Tier::C {
        notes.push("confidence intervals need at least 10 paired repeats".into());
    }
    if let Some(sf) = &signflip {
        notes.extend(sf.warnings.iter().cloned());
    }
    let finite = |c: &Option<(f64, f64)>| c.is_some_and(|(a, b)| a.is_finite() && b.is_finite());
    let inference_ok = tier == Tier::A
        && delta_metric.is_finite()
        && delta_lsi.is_finite()
        && finite(&ci_metric)
        && finite(&ci_lsi)
        && signflip.as_ref().is_some_and(|s| s.p_value.is_finite());
    Ok(DeltaLsiResult {
        schema_version: crate::SCHEMA_VERSION,
        metric: cfg.metric,
        higher_is_better: dv.higher_is_better,
        delta_metric,
        delta_lsi,
        ci_metric,
        ci_lsi,
        p_signflip: signflip.as_ref().map(|s| s.p_value),
        exchangeability: signflip
            .as_ref()
            .map_or(cfg.exchangeability, |s| s.exchangeability),
        signflip,
        tier,
        inference_ok,
        r_eff,
        paired: dv.paired,
        leaky_mean,
        guarded_mean,
        deltas: dv.deltas,
        leaky_plan_hash: leaky.plan_hash.clone(),
        guarded_plan_hash: guarded.plan_hash.clone(),
        config: cfg.clone(),
        notes,
    })
}

fn derive(seed: u64) -> u64 {
    crate::util::derive_seed(seed, &[0x4B])
}

impl DeltaLsiResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn huber_simple_cases() {
        let h = HuberConfig::default();
        assert_eq!(huber_location(&[0.1; 5], &h).unwrap(), 0.1);
        assert!(huber_location(&[-0.1, 0.0, 0.1], &h).unwrap().abs() < 1e-15);
        assert!(huber_location(&[], &h).is_err());
    }

    #[test]
    fn huber_matches_grid_search() {
        let d = [0.10, 0.11, 0.12, 0.13, 0.90];
        let h = HuberConfig::default();
        let est = huber_estimate(&d, &h).unwrap();
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..=10_000_000u32 {
            let mu = i as f64 * 1e-7;
            let v = huber_objective(&d, mu, est.scale, h.k);
            if v < best.0 {
                best = (v, mu);
            }
        }
        assert!(
            (est.value - best.1).abs() < 1e-6,
            "{} vs {}",
            est.value,
            best.1
        );
        assert!(est.value < 0.272);
    }

    #[test]
    fn sign_flip_exact_example() {
        let r = sign_flip_test(&[0.2, 0.3, 0.5], Exchangeability::Iid, 0, 1, None).unwrap();
        assert_eq!(r.method, FlipMethod::Exact);
        assert!((r.p_value - 0.125).abs() < 1e-15);
        let z = sign_flip_test(&[0.0; 5], Exchangeability::Iid, 0, 1, None).unwrap();
        assert_eq!(z.p_value, 1.0);
    }

    #[test]
    fn sign_flip_monte_carlo_floor() {
        let r = sign_flip_test(&[0.18; 20], Exchangeability::Iid, 10_000, 3, None).unwrap();
        assert_eq!(r.method, FlipMethod::MonteCarlo);
        assert!((r.p_value - 1.0 / 10_001.0).abs() < 1e-12);
    }

    #[test]
    fn blocked_flips_use_sqrt_blocks() {
        let d: Vec<f64> = (0..20).map(|i| 0.1 + 0.01 * i as f64).collect();
        let r = sign_flip_test(&d, Exchangeability::BlockedTime, 1000, 1, None).unwrap();
        assert_eq!(r.block_length, Some(5));
        assert_eq!(r.method, FlipMethod::Block);
        // four blocks, all positive: only the identity reaches T_obs
        assert!((r.p_value - 1.0 / 16.0).abs() < 1e-15);
        let g = sign_flip_test(&d, Exchangeability::ByGroup, 1000, 1, None).unwrap();
        assert_eq!(g.exchangeability, Exchangeability::Iid);
        assert_eq!(g.warnings.len(), 1);
    }

    #[test]
    fn tier_boundaries() {
        assert_eq!(tier_for(4, true), Tier::D);
        assert_eq!(tier_for(5, true), Tier::C);
        assert_eq!(tier_for(9, true), Tier::C);
        assert_eq!(tier_for(10, true), Tier::B);
        assert_eq!(tier_for(19, true), Tier::B);
        assert_eq!(tier_for(20, true), Tier::A);
        assert_eq!(tier_for(50, false), Tier::D);
    }

    #[test]
    fn bca_degenerate_and_contains_estimate() {
        let h = HuberConfig::default();
        assert_eq!(
            bca_interval(&[0.2; 12], Estimator::Mean, 500, 0.95, 1, &h).unwrap(),
            (0.2, 0.2)
        );
        assert!(bca_interval(&[0.2; 9], Estimator::Mean, 500, 0.95, 1, &h).is_err());
        let d: Vec<f64> = (0..20)
            .map(|i| 0.15 + 0.003 * ((i * 7) % 11) as f64)
            .collect();
        for e in [Estimator::Mean, Estimator::Huber] {
            let (lo, hi) = bca_interval(&d, e, 1000, 0.95, 2, &h).unwrap();
            let t = estimate(e, &d, &h);
            assert!(lo <= t && t <= hi);
        }
    }
}
