//! Acceptance run. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any criterion fails. Pass substrings (e.g. `c3 four`) as arguments to
//! run a subset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use leakguard::dlsi::{bca_interval, delta_lsi, tier_for, DlsiConfig, Estimator, HuberConfig, Tier};
use leakguard::metrics::MetricName;
use leakguard::resample::{fit_result_from_predictions, ExternalFold, FitResult};
use leakguard::sim::{
    dlsi_null_replicate, dlsi_power_replicate, four_arm_run, run_split_mode_grid, DlsiSimConfig, FourArmConfig, GridResult,
    Mechanism, PipelineConfig,
};
use leakguard::split::{make_split_plan, SplitConfig, SplitMode};
use leakguard::util::{binomial_upper_tail, mean, rng_from};
use leakguard::{Column, Dataset, RoleMap, TaskKind};
use rand::Rng;
use rand_distr::StandardNormal;

#[allow(dead_code, unused_imports)]
#[path = "oracles.rs"]
mod oracles;

#[allow(dead_code, unused_imports)]
#[path = "invariants.rs"]
mod invariants;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Verdict {
            pass,
            detail: detail.into(),
        }
    }
}

fn grid(mechanisms: &[Mechanism], modes: &[SplitMode], n: usize, p: usize, s: f64, seeds: usize, base: u64) -> GridResult {
    run_split_mode_grid(modes, mechanisms, n, p, s, seeds, base, &PipelineConfig::default(), None).unwrap()
}

fn null_calibration() -> Verdict {
    let t = Instant::now();
    let g = grid(&[Mechanism::None], &[SplitMode::SubjectGrouped], 250, 10, 0.0, 100, 101);
    let c = g.cell(Mechanism::None, &SplitMode::SubjectGrouped, 250, 10, 0.0).unwrap();
    let secs = t.elapsed().as_secs_f64();
    Verdict::new(
        (0.03..=0.14).contains(&c.rejection_rate) && c.failed == 0,
        format!(
            "rejection {:.3} (Wilson {:.3}-{:.3}), target [0.03, 0.14], paper 0.06-0.105; {} failed; {:.0} s on {} thread(s)",
            c.rejection_rate,
            c.wilson_lo,
            c.wilson_hi,
            c.failed,
            secs,
            rayon::current_num_threads()
        ),
    )
}

fn detection_at_zero_signal() -> Verdict {
    let g = grid(&Mechanism::ALL, &[SplitMode::SubjectGrouped], 250, 10, 0.0, 50, 202);
    // (mechanism, minimum, maximum, paper rejection, paper AUC)
    let rows = [
        (Mechanism::PeekNorm, 0.98, 1.0, "1.00", "0.99"),
        (Mechanism::SubjectOverlap, 0.95, 1.0, "1.00", "0.72-0.73"),
        (Mechanism::BatchConfounded, 0.95, 1.0, "1.00", "0.72-0.73"),
        (Mechanism::Lookahead, 0.0, 0.15, "0.09", "~0.50"),
        (Mechanism::None, 0.0, 0.15, "0.09", "~0.50"),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (m, lo, hi, paper_rate, paper_auc) in rows {
        let c = g.cell(m, &SplitMode::SubjectGrouped, 250, 10, 0.0).unwrap();
        let ok = (lo..=hi).contains(&c.rejection_rate) && c.failed == 0;
        pass &= ok;
        parts.push(format!(
            "{} {:.2} [{lo}, {hi}] (paper {paper_rate}), AUC {:.3} (paper {paper_auc})",
            m.label(),
            c.rejection_rate,
            c.mean_auc
        ));
    }
    Verdict::new(pass, parts.join("; "))
}

fn split_mode_interaction() -> Verdict {
    let modes = [SplitMode::BatchBlocked, SplitMode::SubjectGrouped];
    let g = grid(&[Mechanism::BatchConfounded], &modes, 500, 20, 0.0, 30, 303);
    let blocked = g.cell(Mechanism::BatchConfounded, &SplitMode::BatchBlocked, 500, 20, 0.0).unwrap();
    let grouped = g.cell(Mechanism::BatchConfounded, &SplitMode::SubjectGrouped, 500, 20, 0.0).unwrap();
    Verdict::new(
        blocked.rejection_rate <= 0.10 && grouped.rejection_rate >= 0.90 && blocked.failed + grouped.failed == 0,
        format!(
            "batch_blocked {:.3} (<= 0.10, paper 0.02), subject_grouped {:.3} (>= 0.90, paper 0.98)",
            blocked.rejection_rate, grouped.rejection_rate
        ),
    )
}

fn inflation_ordering() -> Verdict {
    let (n, p, s) = (500, 10, 0.5);
    let g = grid(&Mechanism::ALL, &[SplitMode::SubjectGrouped], n, p, s, 25, 404);
    let auc = |m| g.cell(m, &SplitMode::SubjectGrouped, n, p, s).unwrap().mean_auc;
    let base = auc(Mechanism::None);
    let inf = |m| auc(m) - base;
    let (subject, batch, peek, look) = (
        inf(Mechanism::SubjectOverlap),
        inf(Mechanism::BatchConfounded),
        inf(Mechanism::PeekNorm),
        inf(Mechanism::Lookahead),
    );
    let middle_ok = [subject, batch].iter().all(|&v| v > look && v < peek);
    let close = (subject - batch).abs() <= 0.10;
    Verdict::new(
        middle_ok && close && peek >= 0.15 && look <= 0.08,
        format!(
            "baseline AUC {base:.3}; inflation peek {peek:.3} (>= 0.15, paper 0.244), batch {batch:.3} (paper 0.093), \
             subject {subject:.3} (paper 0.089), |diff| {:.3} (<= 0.10), lookahead {look:.3} (<= 0.08, paper 0.028)",
            (subject - batch).abs()
        ),
    )
}

fn dlsi_power() -> Verdict {
    let cfg = DlsiSimConfig::default();
    let reps: Vec<_> = (0..20).map(|i| dlsi_power_replicate(&cfg, 505 + i).unwrap()).collect();
    let rejected = reps.iter().filter(|r| r.p_signflip.is_some_and(|p| p < 0.05)).count();
    let rate = rejected as f64 / reps.len() as f64;
    let md = mean(&reps.iter().map(|r| r.delta_metric).collect::<Vec<_>>());
    Verdict::new(
        rate >= 0.95 && (md - 0.197).abs() <= 0.05,
        format!(
            "rejection {rate:.2} (>= 0.95), mean delta_metric {md:.3} (0.197 +/- 0.05), leaky {:.3}, guarded {:.3}",
            mean(&reps.iter().map(|r| r.leaky_mean).collect::<Vec<_>>()),
            mean(&reps.iter().map(|r| r.guarded_mean).collect::<Vec<_>>())
        ),
    )
}

fn dlsi_null() -> Verdict {
    let cfg = DlsiSimConfig::default();
    let reps: Vec<_> = (0..50).map(|i| dlsi_null_replicate(&cfg, 606 + i).unwrap()).collect();
    let k = reps.iter().filter(|r| r.signflip.p_value < 0.05).count();
    let p_binom = binomial_upper_tail(k, reps.len(), 0.05);
    let md = mean(&reps.iter().map(|r| r.delta_metric).collect::<Vec<_>>());
    Verdict::new(
        p_binom >= 0.05 && md.abs() < 0.01,
        format!(
            "{k}/{} rejected ({:.1}%, paper 8.0%), binomial p {p_binom:.3} (>= 0.05, paper 0.24), mean delta_metric {md:.4} (|.| < 0.01)",
            reps.len(),
            100.0 * k as f64 / reps.len() as f64
        ),
    )
}

fn oracle_equivalences() -> Verdict {
    oracles::check_auc_pairs(200);
    oracles::check_huber_grid();
    oracles::check_sign_flip();
    oracles::check_kkt();
    Verdict::new(
        true,
        "AUC = pair counting on 200 instances; Huber within 1e-6 of grid on 100 vectors; \
         exact sign flip within 0.01 of Monte Carlo (M = 100k) on 20 vectors; KKT residual <= 1e-6",
    )
}

fn structural_invariants() -> Verdict {
    invariants::check_grouped_plans(1000);
    invariants::check_time_series_plans(300);
    invariants::check_guard_metamorphic(200);
    Verdict::new(
        true,
        "no straddles over 1000 grouped plans; time order with purge/embargo over 300 plans; \
         test-row mutation left preprocessing and model unchanged over 200 pipelines",
    )
}

/// Stored repeat deltas and guarded repeat means of the case-study fixture.
const FIXTURE_DELTAS: [f64; 20] = [
    0.1505, 0.1585, 0.1655, 0.1695, 0.1725, 0.1755, 0.1775, 0.1795, 0.1805, 0.1815, 0.1825, 0.1835, 0.1845, 0.1855, 0.1865,
    0.1885, 0.1905, 0.1925, 0.1955, 0.2005,
];
const FIXTURE_GUARDED_OFFSETS: [f64; 5] = [-0.02, -0.01, 0.0, 0.01, 0.02];

/// Out-of-fold scores whose AUC is `target` up to 1/(P·N): negatives take
/// ranks 0..N and each positive is placed just above its share of them.
fn scores_for_auc(labels: &[f64], target: f64) -> Vec<f64> {
    let pos = labels.iter().filter(|&&y| y == 1.0).count();
    let neg = labels.len() - pos;
    let wins = (target * (pos * neg) as f64).round() as usize;
    let (mut i_pos, mut i_neg) = (0, 0);
    labels
        .iter()
        .map(|&y| {
            if y == 1.0 {
                let c = wins / pos + usize::from(i_pos < wins % pos);
                i_pos += 1;
                c as f64 - 0.5
            } else {
                i_neg += 1;
                (i_neg - 1) as f64
            }
        })
        .collect()
}

/// Leaky and guarded fits on a shared `repeats`-repeat plan whose repeat
/// means reproduce the stored fixture.
fn fixture_fits(repeats: usize, paired: bool) -> (FitResult, FitResult) {
    let n = 1000;
    let y: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
    let ds = Dataset::new(
        vec![Column::dense("y", &y), Column::dense("x", &vec![0.0; n])],
        RoleMap::new("y").positive("1").predictors(["x"]),
        Some(TaskKind::BinaryClassification),
    )
    .unwrap();
    let plan = |seed| make_split_plan(&ds, &SplitConfig::new(SplitMode::RowWise, 5).repeats(repeats).seed(seed)).unwrap();
    let build = |plan: &leakguard::split::SplitPlan, leaky: bool| {
        let folds = plan
            .folds()
            .iter()
            .map(|f| {
                let r = f.repeat - 1;
                let guarded = 0.611 + FIXTURE_GUARDED_OFFSETS[r % 5];
                let target = if leaky { guarded + FIXTURE_DELTAS[r] } else { guarded };
                let labels: Vec<f64> = f.test.iter().map(|&i| y[i]).collect();
                ExternalFold {
                    repeat: f.repeat,
                    fold: f.fold,
                    test_rows: f.test.clone(),
                    predictions: scores_for_auc(&labels, target),
                }
            })
            .collect();
        fit_result_from_predictions(&ds, plan, folds, &[MetricName::Auc], 1).unwrap()
    };
    let a = plan(11);
    let b = if paired { a.clone() } else { plan(12) };
    (build(&a, true), build(&b, false))
}

fn tiers_and_fixture() -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for (r, want) in [(4, Tier::D), (5, Tier::C), (9, Tier::C), (10, Tier::B), (19, Tier::B), (20, Tier::A)] {
        let (l, g) = fixture_fits(r, true);
        let got = delta_lsi(&l, &g, &DlsiConfig::default()).unwrap();
        let ok = tier_for(r, true) == want && got.tier == want && got.r_eff == r;
        let shape_ok = match want {
            Tier::D => got.p_signflip.is_none() && got.ci_metric.is_none(),
            Tier::C => got.p_signflip.is_some() && got.ci_metric.is_none(),
            _ => got.p_signflip.is_some() && got.ci_metric.is_some(),
        };
        pass &= ok && shape_ok;
        parts.push(format!("R={r}:{}", got.tier.label()));
    }
    let (l, g) = fixture_fits(20, false);
    let unpaired = delta_lsi(&l, &g, &DlsiConfig::default()).unwrap();
    pass &= unpaired.tier == Tier::D && !unpaired.paired && tier_for(20, false) == Tier::D;
    parts.push(format!("unpaired:{}", unpaired.tier.label()));

    let (l, g) = fixture_fits(20, true);
    let res = delta_lsi(&l, &g, &DlsiConfig::default()).unwrap();
    let r3 = |v: f64| (v * 1000.0).round() / 1000.0;
    let p = res.p_signflip.unwrap_or(1.0);
    let fixture_ok = r3(res.leaky_mean) == 0.791
        && r3(res.guarded_mean) == 0.611
        && r3(res.delta_metric) == 0.180
        && r3(res.delta_lsi) == 0.181
        && p <= 2e-4
        && res.tier == Tier::A
        && res.inference_ok
        && res.deltas.iter().all(|d| (0.14..=0.21).contains(d));
    pass &= fixture_ok;
    parts.push(format!(
        "fixture leaky {:.3}, guarded {:.3}, delta {:.3}/{:.3}, p {p:.2e}, {}, inference_ok {}",
        res.leaky_mean,
        res.guarded_mean,
        res.delta_metric,
        res.delta_lsi,
        res.tier.label(),
        res.inference_ok
    ));
    Verdict::new(pass, parts.join("; "))
}

fn bca_coverage() -> Verdict {
    let (mu, sd) = (0.1, 0.05);
    let mut rng = rng_from(1010, &[]);
    let vectors = 500;
    let mut covered = 0;
    for k in 0..vectors {
        let d: Vec<f64> = (0..20).map(|_| mu + sd * rng.sample::<f64, _>(StandardNormal)).collect();
        let (lo, hi) = bca_interval(&d, Estimator::Mean, 2000, 0.95, k, &HuberConfig::default()).unwrap();
        if lo <= mu && mu <= hi {
            covered += 1;
        }
    }
    let rate = covered as f64 / vectors as f64;
    Verdict::new((0.90..=0.98).contains(&rate), format!("coverage {rate:.3} over {vectors} vectors (target [0.90, 0.98])"))
}

fn four_arm() -> Verdict {
    let r = four_arm_run(&FourArmConfig::default(), 900).unwrap();
    Verdict::new(
        r.monotone(),
        format!(
            "guarded {:.3} < guarded-noFS {:.3} < naive {:.3} < leaky {:.3}",
            r.guarded, r.guarded_no_fs, r.naive, r.leaky
        ),
    )
}

type Criterion = (&'static str, &'static str, fn() -> Verdict);

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("c1", "null calibration (fixed predictions)", null_calibration),
        ("c2", "leakage detection at s=0", detection_at_zero_signal),
        ("c3", "split-mode interaction", split_mode_interaction),
        ("c4", "AUC inflation ordering", inflation_ordering),
        ("c5", "delta-LSI power", dlsi_power),
        ("c6", "delta-LSI null calibration", dlsi_null),
        ("c7", "oracle equivalences", oracle_equivalences),
        ("c8", "structural invariants", structural_invariants),
        ("c9", "tier boundaries and case-study fixture", tiers_and_fixture),
        ("c10", "BCa coverage", bca_coverage),
        ("four_arm", "four-arm decomposition", four_arm),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failures = 0;
    let mut lines = Vec::new();
    for (id, name, f) in criteria {
        if !filters.is_empty() && !filters.iter().any(|s| id == s || name.contains(s.as_str())) {
            continue;
        }
        let t = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Verdict::new(false, format!("panicked: {msg}"))
        });
        let line = format!(
            "{} {id} {name}: {} [{:.1} s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            t.elapsed().as_secs_f64()
        );
        println!("{line}");
        lines.push(line);
        failures += usize::from(!v.pass);
    }
    println!("\nacceptance summary:");
    for l in &lines {
        println!("  {l}");
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criterion/criteria failed");
        ExitCode::FAILURE
    }
}
