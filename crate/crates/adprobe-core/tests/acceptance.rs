//! Acceptance suite: one test per criterion, each printing a PASS/FAIL
//! line. Run with `cargo test -p adprobe-core --test acceptance --
//! --nocapture` to see the lines.

use std::time::Instant;

use rand::Rng;

use adprobe_core::classifier::{
    cross_validation_table, regularized_loss, regularized_loss_gradient, DEFAULT_C_GRID,
};
use adprobe_core::experiment::{Action, ExperimentPlan, Group, Treatment};
use adprobe_core::features::{FeatureSetKind, FeatureVector};
use adprobe_core::harness::{
    analyze, analyze_logs, collect_logs, format_p, run_experiment, settings_diff, AnalyzeOptions,
    PresetKind,
};
use adprobe_core::simulator::{AdSpec, Effect, Simulator, SimulatorConfig, TriggerPattern};
use adprobe_core::stats::{
    bonferroni, clopper_pearson_upper, exact_permutation_test, holm_bonferroni,
    sampled_permutation_test, BlockedObservations, Direction, HolmEntry, HypothesisFamily,
};

fn report(number: u32, name: &str, pass: bool, details: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    println!("ACCEPTANCE {number} ({name}): {status} - {details}");
    assert!(pass, "criterion {number} ({name}) failed: {details}");
}

fn balanced_block(m: usize) -> Vec<Group> {
    (0..m)
        .map(|j| if j < m / 2 { Group::Experimental } else { Group::Control })
        .collect()
}

fn match_count(values: &[Group], labels: &[Group]) -> f64 {
    values.iter().zip(labels).filter(|(v, l)| v == l).count() as f64
}

// ---------------------------------------------------------------------
// Criterion 1: minimal-p reproduction
// ---------------------------------------------------------------------

#[test]
fn criterion_01_minimal_p_reproduction() {
    // Perfect predictions over 10 blocks of 10: no sampled reassignment can
    // match the observed statistic, so exceedances stay at zero.
    let blocks: Vec<Vec<(Group, Group)>> = (0..10)
        .map(|_| balanced_block(10).into_iter().map(|g| (g, g)).collect())
        .collect();
    let data = BlockedObservations::new(blocks).unwrap();

    let start = Instant::now();
    let result = sampled_permutation_test(&data, match_count, Direction::GreaterEqual, 1_000_000, 1);
    let elapsed = start.elapsed();

    let pass = result.exceedances == 0
        && (result.p_upper - 0.0000053).abs() <= 1e-7
        && elapsed.as_secs_f64() < 60.0;
    report(
        1,
        "minimal-p reproduction",
        pass,
        &format!(
            "exceedances={} p_upper={:.9} (target 0.0000053 +/- 1e-7) runtime={:.2}s",
            result.exceedances,
            result.p_upper,
            elapsed.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------------
// Criterion 2: Holm-Bonferroni table reproduction
// ---------------------------------------------------------------------

fn formatted_adjustments(entries: &[HolmEntry]) -> Vec<String> {
    entries
        .iter()
        .map(|e| match e.adjusted {
            Some(adj) => format!("{}{}", format_p(adj), if e.rejected { "*" } else { "" }),
            None => "n/a".to_string(),
        })
        .collect()
}

fn family_of(named: &[(&str, f64)]) -> HypothesisFamily {
    HypothesisFamily::new(named.iter().map(|(n, p)| (n.to_string(), *p)).collect())
}

#[test]
fn criterion_02_holm_bonferroni_tables() {
    let five = holm_bonferroni(&family_of(&[
        ("a", 0.0000053),
        ("b", 0.12),
        ("c", 0.14),
        ("d", 0.20),
        ("e", 0.77),
    ]));
    let five_got = formatted_adjustments(&five);
    let five_want = ["0.0000265*", "0.48", "n/a", "n/a", "n/a"];

    let eight = holm_bonferroni(&family_of(&[
        ("a", 0.0000053),
        ("b", 0.0000053),
        ("c", 0.0000053),
        ("d", 0.0000053),
        ("e", 0.0075),
        ("f", 0.053),
        ("g", 0.11),
        ("h", 0.42),
    ]));
    let eight_got = formatted_adjustments(&eight);
    let eight_want = [
        "0.0000424*",
        "0.0000371*",
        "0.0000318*",
        "0.0000265*",
        "0.03*",
        "0.159",
        "n/a",
        "n/a",
    ];

    let six = holm_bonferroni(&family_of(&[
        ("dating decrease", 0.0076),
        ("dating increase", 0.9970),
        ("weight-loss-2 decrease", 0.18),
        ("weight-loss-2 increase", 0.9371),
        ("weight-loss-1 decrease", 0.72),
        ("weight-loss-1 increase", 0.3818),
    ]));
    let six_got = formatted_adjustments(&six);
    let dating_starred = six[0].name == "dating decrease"
        && six_got[0] == "0.0456*"
        && six.iter().filter(|e| e.rejected).count() == 1;

    let pass = five_got == five_want && eight_got == eight_want && dating_starred;
    report(
        2,
        "Holm-Bonferroni table reproduction",
        pass,
        &format!("five={five_got:?} eight={eight_got:?} six={six_got:?}"),
    );
}

// ---------------------------------------------------------------------
// Criterion 3: Bonferroni reproduction
// ---------------------------------------------------------------------

#[test]
fn criterion_03_bonferroni_values() {
    let a = bonferroni(0.0076, 2);
    let b = bonferroni(0.9970, 2);
    let pass = format_p(a) == "0.0152" && format_p(b) == "1.994" && b > 1.0;
    report(
        3,
        "Bonferroni reproduction",
        pass,
        &format!("0.0076 -> {} and 0.9970 -> {} (unclamped)", format_p(a), format_p(b)),
    );
}

// ---------------------------------------------------------------------
// Criterion 4: exact-vs-sampled oracle
// ---------------------------------------------------------------------

#[test]
fn criterion_04_exact_vs_sampled_agreement() {
    let samples = 100_000u64;
    let mut cases = 0u32;
    let mut within = 0u32;
    for (k, m) in [(1usize, 2usize), (1, 4), (2, 2), (2, 4), (3, 2), (3, 4)] {
        for case in 0..20u64 {
            let mut rng = adprobe_core::rng::stream(900 + case, (k * 10 + m) as u64);
            let blocks: Vec<Vec<(f64, Group)>> = (0..k)
                .map(|_| {
                    balanced_block(m).into_iter().map(|g| (rng.random::<f64>(), g)).collect()
                })
                .collect();
            let data = BlockedObservations::new(blocks).unwrap();
            let statistic = |vals: &[f64], labels: &[Group]| -> f64 {
                vals.iter()
                    .zip(labels)
                    .filter(|(_, &l)| l == Group::Experimental)
                    .map(|(v, _)| *v)
                    .sum()
            };
            let exact = exact_permutation_test(&data, statistic, Direction::GreaterEqual).unwrap();
            let sampled = sampled_permutation_test(
                &data,
                statistic,
                Direction::GreaterEqual,
                samples,
                7000 + case,
            );
            let se = (exact.p_point * (1.0 - exact.p_point) / samples as f64).sqrt();
            cases += 1;
            if (sampled.p_point - exact.p_point).abs() <= 3.0 * se
                || sampled.p_point == exact.p_point
            {
                within += 1;
            }
        }
    }
    let fraction = within as f64 / cases as f64;
    let pass = fraction >= 0.99;
    report(
        4,
        "exact-vs-sampled oracle",
        pass,
        &format!("{within}/{cases} cases within 3 binomial SE ({:.1}%)", fraction * 100.0),
    );
}

// ---------------------------------------------------------------------
// Criterion 5: Clopper-Pearson oracle
// ---------------------------------------------------------------------

/// P(X <= successes) for X ~ Binomial(trials, p), summed term by term in
/// log space. Independent of the incomplete-beta route in the library.
fn binomial_tail(successes: u64, trials: u64, p: f64) -> f64 {
    let ln_p = p.ln();
    let ln_q = (1.0 - p).ln();
    let mut ln_choose = 0.0;
    let mut sum = 0.0;
    for j in 0..=successes {
        if j > 0 {
            ln_choose += ((trials - j + 1) as f64).ln() - (j as f64).ln();
        }
        sum += (ln_choose + j as f64 * ln_p + (trials - j) as f64 * ln_q).exp();
    }
    sum
}

fn oracle_upper(successes: u64, trials: u64, confidence: f64) -> f64 {
    if successes == trials {
        return 1.0;
    }
    let target = (1.0 - confidence) / 2.0;
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    while hi - lo > 1e-13 {
        let mid = 0.5 * (lo + hi);
        if binomial_tail(successes, trials, mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn criterion_05_clopper_pearson_oracle() {
    let mut rng = adprobe_core::rng::stream(55, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let trials = rng.random_range(1..=2000u64);
        let successes = rng.random_range(0..=trials);
        let implementation = clopper_pearson_upper(successes, trials, 0.99);
        let oracle = oracle_upper(successes, trials, 0.99);
        worst = worst.max((implementation - oracle).abs());
    }
    // The minimal-p configuration, against the same oracle.
    let big = (clopper_pearson_upper(0, 1_000_000, 0.99) - oracle_upper(0, 1_000_000, 0.99)).abs();
    worst = worst.max(big);
    // And the 5-of-100 reference point, at a tighter 1e-10.
    let mid = (clopper_pearson_upper(5, 100, 0.99) - oracle_upper(5, 100, 0.99)).abs();
    worst = worst.max(mid);

    let pass = worst <= 1e-9 && mid <= 1e-10;
    report(
        5,
        "Clopper-Pearson oracle",
        pass,
        &format!("max |implementation - bisection oracle| = {worst:.3e} over 201 pairs"),
    );
}

// ---------------------------------------------------------------------
// Shared simulator scaffolding for the end-to-end criteria
// ---------------------------------------------------------------------

fn filler_pool(n: usize) -> Vec<AdSpec> {
    (0..n)
        .map(|i| AdSpec {
            title: format!("Filler Offer {i}"),
            url: format!("filler{i}.example.com"),
            text: format!("generic offer number {i}"),
            base_weight: 1.0,
        })
        .collect()
}

fn null_config(seed: u64) -> SimulatorConfig {
    SimulatorConfig {
        ad_pool: filler_pool(30),
        effects: vec![],
        settings_rules: vec![],
        slots_per_reload: 5,
        seed,
    }
}

const PLANTED_KEY: &str = "Premium Career Coaching | coach.example.com";

fn planted_config(seed: u64) -> SimulatorConfig {
    let mut ad_pool = filler_pool(20);
    ad_pool.push(AdSpec {
        title: "Premium Career Coaching".into(),
        url: "coach.example.com".into(),
        text: "advance your career".into(),
        // 4 / (20 + 4): a per-slot share of 1/6 for treated agents.
        base_weight: 4.0,
    });
    let planted = ad_pool.len() - 1;
    SimulatorConfig {
        ad_pool,
        effects: vec![Effect {
            trigger: TriggerPattern::Not {
                inner: Box::new(TriggerPattern::SettingEquals {
                    key: "probe".into(),
                    value: "on".into(),
                }),
            },
            ad_index: planted,
            weight_multiplier: 0.0,
        }],
        settings_rules: vec![],
        slots_per_reload: 5,
        seed,
    }
}

fn probe_plan(id: &str, blocks: u32, seed: u64) -> ExperimentPlan {
    ExperimentPlan {
        id: id.into(),
        treatments: [
            Treatment { name: "idle".into(), actions: vec![] },
            Treatment {
                name: "probe".into(),
                actions: vec![Action::SetSetting { key: "probe".into(), value: "on".into() }],
            },
        ],
        block_count: blocks,
        block_size: 10,
        collect_site: "sim".into(),
        reloads: 10,
        reload_wait_ms: 0,
        seed,
        keywords: vec![],
    }
}

// ---------------------------------------------------------------------
// Criterion 6: soundness calibration on the null simulator
// ---------------------------------------------------------------------

#[test]
fn criterion_06_null_calibration() {
    let runs = 200u64;
    let start = Instant::now();
    let mut rejections = 0u32;
    for run in 0..runs {
        let plan = probe_plan("null-calibration", 20, run);
        let mut sut = Simulator::new(null_config(50_000 + run)).unwrap();
        let logs = collect_logs(&plan, &mut sut).unwrap();
        let manifest = analyze_logs(
            &logs,
            None,
            AnalyzeOptions {
                preset: PresetKind::Transparency,
                features: FeatureSetKind::UrlTitle,
                samples: 100_000, // full enumeration of the 2 test blocks
                seed: run,
                partitions: 1,
                top: 1,
            },
        )
        .unwrap();
        if manifest.results[0].test.p_upper <= 0.05 {
            rejections += 1;
        }
    }
    let elapsed = start.elapsed();
    let fraction = rejections as f64 / runs as f64;
    let pass = fraction <= 0.07 && elapsed.as_secs_f64() < 1800.0;
    report(
        6,
        "soundness calibration",
        pass,
        &format!(
            "{rejections}/{runs} null runs rejected ({:.1}%, limit 7%) runtime={:.0}s (budget 1800s)",
            fraction * 100.0,
            elapsed.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------------
// Criterion 7: power and explanation on planted effects
// ---------------------------------------------------------------------

#[test]
fn criterion_07_power_and_explanation() {
    let runs = 50u64;
    let mut rejecting = 0u32;
    let mut top_ranked = 0u32;
    for run in 0..runs {
        let plan = probe_plan("planted-power", 50, 100 + run);
        let mut sut = Simulator::new(planted_config(90_000 + run)).unwrap();
        let logs = collect_logs(&plan, &mut sut).unwrap();
        let manifest = analyze_logs(
            &logs,
            None,
            AnalyzeOptions {
                preset: PresetKind::Transparency,
                features: FeatureSetKind::UrlTitle,
                samples: 20_000,
                seed: run,
                partitions: 1,
                top: 1,
            },
        )
        .unwrap();
        if manifest.results[0].test.p_upper < 0.05 {
            rejecting += 1;
            let top = &manifest.explanations.as_ref().unwrap().experimental[0];
            if top.key == PLANTED_KEY {
                top_ranked += 1;
            }
        }
    }
    let power = rejecting as f64 / runs as f64;
    let explained = if rejecting == 0 { 0.0 } else { top_ranked as f64 / rejecting as f64 };
    let pass = power >= 0.90 && explained >= 0.90;
    report(
        7,
        "power and explanation",
        pass,
        &format!(
            "power {rejecting}/{runs} ({:.0}%), planted ad ranked first in {top_ranked}/{rejecting} rejecting runs ({:.0}%)",
            power * 100.0,
            explained * 100.0
        ),
    );
}

// ---------------------------------------------------------------------
// Criterion 8: opacity reproduction
// ---------------------------------------------------------------------

#[test]
fn criterion_08_opacity_reproduction() {
    // An effect fires for the treated group but no settings rule exists, so
    // ads change while the settings page stays empty for everyone.
    let mut config = null_config(777);
    config.effects.push(Effect {
        trigger: TriggerPattern::SettingEquals { key: "probe".into(), value: "on".into() },
        ad_index: 0,
        weight_multiplier: 30.0,
    });
    let plan = probe_plan("opacity", 20, 4242);
    let mut sut = Simulator::new(config).unwrap();
    let logs = collect_logs(&plan, &mut sut).unwrap();

    let diff = settings_diff(&logs);
    let manifest = analyze_logs(
        &logs,
        None,
        AnalyzeOptions {
            preset: PresetKind::Transparency,
            features: FeatureSetKind::UrlTitle,
            samples: 100_000,
            seed: 8,
            partitions: 1,
            top: 1,
        },
    )
    .unwrap();

    let p = manifest.results[0].test.p_upper;
    let pass = diff.identical && p < 0.05;
    report(
        8,
        "opacity reproduction",
        pass,
        &format!("settings identical={} while ads reject with p_upper={}", diff.identical, format_p(p)),
    );
}

// ---------------------------------------------------------------------
// Criterion 9: classifier numerics
// ---------------------------------------------------------------------

#[test]
fn criterion_09_classifier_numerics() {
    // Gradient vs central finite differences on 50 random instances.
    let mut rng = adprobe_core::rng::stream(4000, 0);
    let mut worst_relative = 0.0f64;
    for _ in 0..50 {
        let dimension = rng.random_range(2..=6usize);
        let examples = rng.random_range(4..=12usize);
        let vectors: Vec<FeatureVector> = (0..examples)
            .map(|_| {
                let mut pairs: Vec<(u32, u32)> = Vec::new();
                for id in 0..dimension as u32 {
                    if rng.random::<f64>() < 0.7 {
                        pairs.push((id, rng.random_range(1..=4u32)));
                    }
                }
                FeatureVector::from_pairs(&pairs)
            })
            .collect();
        let labels: Vec<Group> = (0..examples)
            .map(|i| if i % 2 == 0 { Group::Experimental } else { Group::Control })
            .collect();
        let weights: Vec<f64> = (0..dimension).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let bias = rng.random::<f64>() * 2.0 - 1.0;
        let c = [0.1, 1.0, 10.0][rng.random_range(0..3usize)];

        let (grad_w, grad_b) = regularized_loss_gradient(&weights, bias, &vectors, &labels, c);
        let h = 1e-6;
        let mut fd = Vec::with_capacity(dimension + 1);
        for i in 0..dimension {
            let mut plus = weights.clone();
            let mut minus = weights.clone();
            plus[i] += h;
            minus[i] -= h;
            fd.push(
                (regularized_loss(&plus, bias, &vectors, &labels, c)
                    - regularized_loss(&minus, bias, &vectors, &labels, c))
                    / (2.0 * h),
            );
        }
        fd.push(
            (regularized_loss(&weights, bias + h, &vectors, &labels, c)
                - regularized_loss(&weights, bias - h, &vectors, &labels, c))
                / (2.0 * h),
        );
        let mut analytic = grad_w.clone();
        analytic.push(grad_b);
        let diff_norm: f64 =
            fd.iter().zip(&analytic).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let grad_norm: f64 = analytic.iter().map(|g| g * g).sum::<f64>().sqrt();
        worst_relative = worst_relative.max(diff_norm / grad_norm.max(1e-8));
    }
    let gradients_ok = worst_relative <= 1e-5;

    // Cross validation on random labels sits at chance for every C.
    let runs = 400;
    let grid = DEFAULT_C_GRID;
    let mut sums = vec![0.0f64; grid.len()];
    for run in 0..runs {
        let mut rng = adprobe_core::rng::stream(60_000 + run, 1);
        let blocks = 20usize;
        let mut vectors = Vec::with_capacity(blocks * 2);
        let mut labels = Vec::with_capacity(blocks * 2);
        let mut block_ids = Vec::with_capacity(blocks * 2);
        for b in 0..blocks {
            let flip: bool = rng.random();
            for j in 0..2 {
                let mut pairs: Vec<(u32, u32)> = Vec::new();
                for id in 0..6u32 {
                    if rng.random::<f64>() < 0.6 {
                        pairs.push((id, rng.random_range(1..=3u32)));
                    }
                }
                vectors.push(FeatureVector::from_pairs(&pairs));
                let experimental = (j == 0) ^ flip;
                labels.push(if experimental { Group::Experimental } else { Group::Control });
                block_ids.push(b as u32);
            }
        }
        let table = cross_validation_table(&vectors, &labels, &block_ids, 6, grid).unwrap();
        for (i, (_, accuracy)) in table.iter().enumerate() {
            sums[i] += accuracy;
        }
    }
    let means: Vec<f64> = sums.iter().map(|s| s / runs as f64).collect();
    let cv_ok = means.iter().all(|m| (m - 0.5).abs() <= 0.05);

    let pass = gradients_ok && cv_ok;
    report(
        9,
        "classifier numerics",
        pass,
        &format!(
            "max relative gradient error {worst_relative:.2e} (limit 1e-5); \
             random-label CV means {:?} (each within 0.5 +/- 0.05 over {runs} runs)",
            means.iter().map(|m| (m * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        ),
    );
}

// ---------------------------------------------------------------------
// Criterion 10: determinism
// ---------------------------------------------------------------------

#[test]
fn criterion_10_determinism() {
    let plan = probe_plan("determinism", 20, 77);
    let options = AnalyzeOptions {
        preset: PresetKind::Transparency,
        features: FeatureSetKind::UrlTitle,
        samples: 40_000,
        seed: 13,
        partitions: 2,
        top: 3,
    };

    let mut artifacts = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let mut sut = Simulator::new(planted_config(31)).unwrap();
        run_experiment(&plan, &mut sut, dir.path()).unwrap();
        let measurements =
            std::fs::read(dir.path().join(adprobe_core::harness::MEASUREMENTS_FILE)).unwrap();
        let manifest = analyze(dir.path(), options).unwrap();
        artifacts.push((measurements, manifest.to_json()));
    }

    let logs_identical = artifacts[0].0 == artifacts[1].0;
    let manifests_identical = artifacts[0].1 == artifacts[1].1;
    let pass = logs_identical && manifests_identical;
    report(
        10,
        "determinism",
        pass,
        &format!(
            "measurement logs byte-identical={logs_identical}, manifests byte-identical={manifests_identical}"
        ),
    );
}
