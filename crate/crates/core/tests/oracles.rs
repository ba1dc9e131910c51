use leakguard::dlsi::{
    huber_estimate, huber_objective, sign_flip_test, Exchangeability, FlipMethod, HuberConfig,
};
use leakguard::learners::{fit_enet_fixed, lambda_max, sigmoid, EnetOptions};
use leakguard::metrics::auc;
use leakguard::util::{mad, median, rng_from};
use leakguard::TaskKind;
use nalgebra::DMatrix;
use proptest::prelude::*;
use proptest::test_runner::TestRunner;
use rand::Rng;
use rand_distr::StandardNormal;

/// Probability that a random positive outscores a random negative, ties
/// counted as one half.
fn auc_pairs(scores: &[f64], labels: &[f64]) -> Option<f64> {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1.0 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0.0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

/// AUC against pair counting on `cases` random instances.
pub fn check_auc_pairs(cases: u32) {
    let strategy = prop::collection::vec((0u8..12, any::<bool>()), 2..120);
    let mut runner = TestRunner::new(ProptestConfig {
        failure_persistence: None,
        ..ProptestConfig::with_cases(cases)
    });
    let res = runner.run(&strategy, |data| {
        // coarse integer scores force plenty of ties
        let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64 / 4.0).collect();
        let labels: Vec<f64> = data.iter().map(|(_, l)| f64::from(u8::from(*l))).collect();
        match (auc_pairs(&scores, &labels), auc(&scores, &labels)) {
            (None, None) => {}
            (Some(w), Some(g)) => prop_assert!((w - g).abs() < 1e-12, "{} vs {}", w, g),
            other => prop_assert!(false, "definedness differs: {:?}", other),
        }
        Ok(())
    });
    if let Err(e) = res {
        panic!("{e}");
    }
}

#[test]
fn auc_matches_pair_counting() {
    check_auc_pairs(200);
}

/// Minimizer of the Huber objective by successively refined grids. The
/// objective is convex, so each refinement only needs the neighbourhood of
/// the previous best point.
fn huber_grid_min(d: &[f64], scale: f64, k: f64) -> f64 {
    let lo = d.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (mut a, mut b) = (lo, hi);
    let mut best = median(d);
    for _ in 0..40 {
        let step = (b - a) / 200.0;
        if step < 1e-13 {
            break;
        }
        let mut best_val = f64::INFINITY;
        for i in 0..=200 {
            let mu = a + step * i as f64;
            let v = huber_objective(d, mu, scale, k);
            if v < best_val {
                best_val = v;
                best = mu;
            }
        }
        a = best - step;
        b = best + step;
    }
    best
}

pub fn check_huber_grid() {
    let cfg = HuberConfig::default();
    let mut rng = rng_from(11, &[]);
    for case in 0..100 {
        let r = rng.random_range(5..40);
        let contaminated = case % 3 == 0;
        let d: Vec<f64> = (0..r)
            .map(|i| {
                let z: f64 = rng.sample(StandardNormal);
                let base = 0.15 + 0.05 * z;
                if contaminated && i % 7 == 0 {
                    base + rng.random_range(0.5..2.0)
                } else {
                    base
                }
            })
            .collect();
        let scale = cfg.scale_factor * mad(&d);
        let h = huber_estimate(&d, &cfg).unwrap();
        let g = huber_grid_min(&d, scale, cfg.k);
        assert!(
            (h.value - g).abs() < 1e-6,
            "case {case}: irls {} grid {g}",
            h.value
        );
    }
}

#[test]
fn huber_printed_example() {
    let d = [0.10, 0.11, 0.12, 0.13, 0.90];
    let cfg = HuberConfig::default();
    let h = huber_estimate(&d, &cfg).unwrap();
    // dense grid over [0, 1] in steps of 1e-7, evaluated near the optimum
    let scale = cfg.scale_factor * mad(&d);
    let mut best = (f64::INFINITY, 0.0);
    let start = ((h.value - 0.01) * 1e7).floor() as i64;
    for i in start..start + 200_000 {
        let mu = i as f64 * 1e-7;
        let v = huber_objective(&d, mu, scale, cfg.k);
        if v < best.0 {
            best = (v, mu);
        }
    }
    assert!((h.value - best.1).abs() < 1e-6);
    assert!(h.value < 0.272);
}

/// Exact one-sided sign-flip p-value by enumerating every assignment.
fn exact_flip_p(d: &[f64]) -> f64 {
    let r = d.len();
    let t_obs = d.iter().sum::<f64>() / r as f64;
    let mut hits = 0usize;
    for mask in 0u32..(1 << r) {
        let t: f64 = d
            .iter()
            .enumerate()
            .map(|(i, v)| if mask >> i & 1 == 1 { -v } else { *v })
            .sum::<f64>()
            / r as f64;
        if t >= t_obs - 1e-12 {
            hits += 1;
        }
    }
    hits as f64 / (1u64 << r) as f64
}

pub fn check_sign_flip() {
    let mut rng = rng_from(5, &[]);
    for case in 0..20 {
        let shift = 0.02 * (case % 5) as f64;
        let d: Vec<f64> = (0..10)
            .map(|_| shift + 0.05 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let lib = sign_flip_test(&d, Exchangeability::Iid, 10_000, 1, None).unwrap();
        assert_eq!(lib.method, FlipMethod::Exact);
        assert!((lib.p_value - exact_flip_p(&d)).abs() < 1e-12);

        let t_obs = d.iter().sum::<f64>();
        let m = 100_000;
        let mut b = 0usize;
        for _ in 0..m {
            let t: f64 = d
                .iter()
                .map(|v| if rng.random::<bool>() { *v } else { -*v })
                .sum();
            if t >= t_obs - 1e-12 {
                b += 1;
            }
        }
        let mc = (b + 1) as f64 / (m + 1) as f64;
        assert!(
            (lib.p_value - mc).abs() < 0.01,
            "case {case}: exact {} mc {mc}",
            lib.p_value
        );
    }
}

fn standardized_problem(n: usize, p: usize, seed: u64) -> (DMatrix<f64>, Vec<f64>) {
    let mut rng = rng_from(seed, &[]);
    let mut x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    for j in 0..p {
        let m = x.column(j).mean();
        let sd = (x.column(j).iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt();
        for i in 0..n {
            x[(i, j)] = (x[(i, j)] - m) / sd;
        }
    }
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let eta = 0.8 * x[(i, 0)] - 0.5 * x[(i, 1)] + 0.3 * x[(i, 2 % p)];
            f64::from(u8::from(rng.random::<f64>() < sigmoid(eta)))
        })
        .collect();
    (x, y)
}

/// Largest violation of the elastic-net optimality conditions for
/// `loss/n + λ((1−α)/2‖β‖² + α‖β‖₁)` on standardized columns.
fn kkt_residual(
    x: &DMatrix<f64>,
    y: &[f64],
    b0: f64,
    beta: &[f64],
    lambda: f64,
    alpha: f64,
    binomial: bool,
) -> f64 {
    let (n, p) = x.shape();
    let resid: Vec<f64> = (0..n)
        .map(|i| {
            let eta = b0 + (0..p).map(|j| beta[j] * x[(i, j)]).sum::<f64>();
            y[i] - if binomial { sigmoid(eta) } else { eta }
        })
        .collect();
    let mut worst = (resid.iter().sum::<f64>() / n as f64).abs();
    for j in 0..p {
        let g = (0..n).map(|i| x[(i, j)] * resid[i]).sum::<f64>() / n as f64
            - lambda * (1.0 - alpha) * beta[j];
        let v = if beta[j] == 0.0 {
            (g.abs() - lambda * alpha).max(0.0)
        } else {
            (g - lambda * alpha * beta[j].signum()).abs()
        };
        worst = worst.max(v);
    }
    worst
}

pub fn check_kkt() {
    for (seed, alpha, frac) in [
        (1, 0.9, 0.3),
        (2, 0.5, 0.1),
        (3, 1.0, 0.05),
        (4, 0.2, 0.5),
        (5, 0.9, 0.01),
    ] {
        for binomial in [true, false] {
            let (x, mut y) = standardized_problem(150, 8, seed);
            if !binomial {
                y = y
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v + 0.3 * x[(i, 3)])
                    .collect();
            }
            let opts = EnetOptions {
                alpha,
                family: if binomial {
                    TaskKind::BinaryClassification
                } else {
                    TaskKind::Regression
                },
                tol: 1e-12,
                max_iter: 200,
            };
            let lambda = frac * lambda_max(&x, &y, alpha);
            let m = fit_enet_fixed(&x, &y, lambda, &opts).unwrap();
            assert!(m.converged);
            let r = kkt_residual(
                &x,
                &y,
                m.intercept,
                &m.coefficients,
                lambda,
                alpha,
                binomial,
            );
            assert!(
                r <= 1e-6,
                "seed {seed} alpha {alpha} binomial {binomial}: residual {r}"
            );
        }
    }
}

#[test]
fn huber_matches_grid_minimizer() {
    check_huber_grid();
}

#[test]
fn exact_sign_flip_matches_enumeration_and_monte_carlo() {
    check_sign_flip();
}

#[test]
fn elastic_net_satisfies_kkt() {
    check_kkt();
}
