//! Acceptance suite. Runs every criterion at its stated tolerance, prints one
//! PASS/FAIL line per criterion and exits non-zero if any fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use confforge::conditional::{partition_bins, BinSource, BinSpec};
use confforge::conformal::{conformal_quantile, conformal_rank, fit_split};
use confforge::metrics::{affine_calibrate, default_levels, ece};
use confforge::quantile_fit::{fit_quantile, TrainConfig};
use confforge::record::{RegressionRecord, UncertaintyEstimate};
use confforge::scores::{heuristics_of, ScoreKind};
use confforge::synth::{
    gen_heteroscedastic, run_coverage_experiment, ExperimentMethod, GroupSpec, NoiseScale, SynthConfig,
};
use confforge_cli::evaluate::{cmd_evaluate, EvaluateConfig};
use confforge_cli::fit_quantile::{cmd_fit_quantile, FitQuantileConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn in_range(v: f64, lo: f64, hi: f64) -> bool {
    v >= lo && v <= hi
}

/// 1. Monte Carlo check of the finite-sample coverage band.
fn coverage_band() -> Outcome {
    let start = Instant::now();
    let a = run_coverage_experiment(&SynthConfig::default()).map_err(|e| e.to_string())?;
    let first = start.elapsed().as_secs_f64();
    let b = run_coverage_experiment(&SynthConfig {
        n_cal: 99,
        alpha: 0.2,
        seed: 1,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let hw_b = b.ci_halfwidth.unwrap_or(f64::NAN);
    let ok_a = in_range(a.mean_coverage, 0.899, 0.912) && a.within_band();
    let ok_b = in_range(b.mean_coverage, 0.8 - hw_b, 0.81 + hw_b) && b.within_band();
    check(
        ok_a && ok_b && first < 60.0,
        format!(
            "n=999 a=0.1: {:.5} in [0.899, 0.912] ({first:.1}s); n=99 a=0.2: {:.5} in [{:.5}, {:.5}]",
            a.mean_coverage,
            b.mean_coverage,
            0.8 - hw_b,
            0.81 + hw_b
        ),
    )
}

fn brute_force(scores: &[f64], pct: u32) -> f64 {
    let n = scores.len() as u64;
    let m = ((n + 1) * u64::from(100 - pct)).div_ceil(100) as usize;
    let mut s = scores.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if m > s.len() {
        f64::INFINITY
    } else {
        s[m - 1]
    }
}

/// 2. Quantile equals sort-and-index with an integer rank.
fn quantile_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (mut mismatches, mut infinite) = (0, 0);
    for case in 0..10_000 {
        let n = rng.random_range(1..=50);
        let pct = 5 * rng.random_range(1..=10u32);
        let scores: Vec<f64> = if case % 4 == 0 {
            (0..n).map(|_| f64::from(rng.random_range(0..4u32))).collect()
        } else {
            (0..n).map(|_| rng.random::<f64>() * 3.0).collect()
        };
        let expect = brute_force(&scores, pct);
        let got = conformal_quantile(&scores, f64::from(pct) / 100.0).map_err(|e| e.to_string())?;
        if got != expect {
            mismatches += 1;
        }
        if expect.is_infinite() {
            infinite += 1;
        }
    }
    check(
        mismatches == 0 && infinite > 0,
        format!("10000 cases, {mismatches} mismatches, {infinite} infinite"),
    )
}

fn random_records(rng: &mut ChaCha8Rng, n: usize, asymmetric: bool) -> Vec<RegressionRecord> {
    (0..n)
        .map(|i| {
            let y_hat: f64 = rng.random_range(-3.0..3.0);
            let u = if asymmetric {
                UncertaintyEstimate::Asymmetric {
                    lo: rng.random_range(0.05..2.0),
                    hi: rng.random_range(0.05..2.0),
                }
            } else {
                UncertaintyEstimate::Sigma(rng.random_range(0.05..2.0))
            };
            let z: f64 = StandardNormal.sample(rng);
            RegressionRecord::new(format!("r{i}"), y_hat, u).with_truth(y_hat + z)
        })
        .collect()
}

/// 3. Rank duality on calibration scores and interval/score duality at the
/// interval endpoints.
fn calibration_duality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut fits, mut probes, mut failures) = (0, 0, 0);
    for trial in 0..400 {
        let kind = if trial % 2 == 0 { ScoreKind::Symmetric } else { ScoreKind::Asymmetric };
        let n = rng.random_range(10..400);
        let alpha = 0.05 * f64::from(rng.random_range(1..=10u32));
        let cal = random_records(&mut rng, n, kind == ScoreKind::Asymmetric);
        let fit = fit_split(&cal, alpha, kind).map_err(|e| e.to_string())?;
        let mut d = fit.scores.clone();
        d.dedup();
        if fit.is_bounded() && d.len() == fit.scores.len() {
            fits += 1;
            if fit.scores.iter().filter(|&&s| s <= fit.q_hat).count() != conformal_rank(n, alpha) {
                failures += 1;
            }
        }
        if !fit.is_bounded() {
            continue;
        }
        for rec in random_records(&mut rng, 5, kind == ScoreKind::Asymmetric) {
            let h = heuristics_of(&rec, alpha, kind).map_err(|e| e.to_string())?;
            let iv = h.interval(fit.q_hat);
            for edge in [iv.lo, iv.hi] {
                let mut up = edge;
                let mut down = edge;
                for _ in 0..6 {
                    for y in [up, down] {
                        probes += 1;
                        if iv.contains(y) != (h.score(y) <= fit.q_hat) {
                            failures += 1;
                        }
                    }
                    up = up.next_up();
                    down = down.next_down();
                }
            }
        }
    }
    check(
        failures == 0 && fits > 100,
        format!("{fits} rank checks, {probes} boundary probes, {failures} failures"),
    )
}

/// 4. Raw intervals from under-reported sigma miss the target badly; the
/// conformal ones do not.
fn conformal_correction() -> Outcome {
    let mut group = GroupSpec::named("all");
    group.misreport = 1.0 / 3.0;
    group.noise = NoiseScale::Linear { base: 0.2, slope: 1.0 };
    let cfg = SynthConfig {
        n_cal: 10_000,
        n_test: 100_000,
        trials: 1,
        seed: 4,
        groups: vec![group],
        ..Default::default()
    };
    let e = run_coverage_experiment(&cfg).map_err(|e| e.to_string())?;
    check(
        e.mean_original_coverage <= 0.65 && (e.mean_coverage - 0.9).abs() <= 0.01,
        format!(
            "original {:.4} (<= 0.65), conformal {:.4} (0.9 +- 0.01)",
            e.mean_original_coverage, e.mean_coverage
        ),
    )
}

/// 5. Per-group quantiles repair a group that pooled calibration under-covers.
fn equalized_groups() -> Outcome {
    let groups: Vec<GroupSpec> = [("A", 1.0), ("B", 0.5), ("C", 2.0)]
        .into_iter()
        .map(|(name, m)| {
            let mut g = GroupSpec::named(name);
            g.misreport = m;
            g
        })
        .collect();
    let base = SynthConfig {
        n_cal: 15_000,
        n_test: 63_000,
        trials: 1,
        seed: 5,
        groups,
        ..Default::default()
    };
    let pooled = run_coverage_experiment(&base).map_err(|e| e.to_string())?;
    let grouped = run_coverage_experiment(&SynthConfig {
        method: ExperimentMethod::Grouped { min_group_size: 50 },
        ..base
    })
    .map_err(|e| e.to_string())?;
    let worst = pooled
        .per_group_coverage
        .values()
        .map(|t| t.coverage())
        .fold(f64::INFINITY, f64::min);
    let repaired: BTreeMap<&String, f64> = grouped.per_group_coverage.iter().map(|(g, t)| (g, t.coverage())).collect();
    let min_count = grouped.per_group_coverage.values().map(|t| t.count).min().unwrap_or(0);
    let ok = 0.9 - worst >= 0.05 && repaired.values().all(|c| (c - 0.9).abs() <= 0.02) && min_count >= 20_000;
    check(
        ok,
        format!("pooled worst group {worst:.4}; grouped {repaired:.4?}; smallest test group {min_count}"),
    )
}

/// 6. Mondrian bins over predicted uncertainty equalize coverage that pooled
/// calibration spreads across deciles.
fn mondrian_bins() -> Outcome {
    let mut group = GroupSpec::named("");
    group.noise = NoiseScale::Linear { base: 0.05, slope: 1.0 };
    group.misreport_power = 0.5;
    let cfg = SynthConfig {
        n_cal: 40_000,
        n_test: 100_000,
        seed: 6,
        groups: vec![group],
        ..Default::default()
    };
    let records = gen_heteroscedastic(&cfg, 0);
    let (cal, test) = records.split_at(cfg.n_cal);
    let (alpha, kind) = (cfg.alpha, ScoreKind::Symmetric);
    let spread = |r: &RegressionRecord| heuristics_of(r, alpha, kind).map(|h| h.spread());

    let pooled = fit_split(cal, alpha, kind).map_err(|e| e.to_string())?;
    let mut deltas: Vec<f64> = test.iter().map(spread).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    deltas.sort_by(f64::total_cmp);
    let cuts: Vec<f64> = (1..10).map(|k| deltas[k * deltas.len() / 10]).collect();
    let mut deciles = vec![(0usize, 0usize); 10];
    for r in test {
        let d = spread(r).map_err(|e| e.to_string())?;
        let k = cuts.partition_point(|&c| c <= d);
        let covered = pooled.predict(r).map_err(|e| e.to_string())?.contains(r.y_true.unwrap());
        deciles[k].0 += usize::from(covered);
        deciles[k].1 += 1;
    }
    let dec: Vec<f64> = deciles.iter().map(|(c, n)| *c as f64 / *n as f64).collect();
    let (lo, hi) = dec.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));

    let spec = BinSpec {
        min_bin_size: 200,
        max_bins: 20,
    };
    let part = partition_bins(cal, &BinSource::PredictedUncertainty, &spec, alpha, kind).map_err(|e| e.to_string())?;
    let mut bins = vec![(0usize, 0usize); part.n_bins()];
    for r in test {
        let (b, pred) = part.predict(r).map_err(|e| e.to_string())?;
        bins[b].0 += usize::from(pred.interval.contains(r.y_true.unwrap()));
        bins[b].1 += 1;
    }
    let bin_cov: Vec<f64> = bins.iter().map(|(c, n)| *c as f64 / *n as f64).collect();
    let worst = bin_cov.iter().map(|c| (c - 0.9).abs()).fold(0.0, f64::max);
    check(
        lo <= 0.8 && hi >= 0.97 && worst <= 0.03,
        format!(
            "pooled deciles span [{lo:.4}, {hi:.4}]; {} Mondrian bins, max |cov - 0.9| = {worst:.4}",
            part.n_bins()
        ),
    )
}

/// 7. ECE of calibrated data is small; the affine fit recovers a known
/// misreport factor.
fn ece_affine() -> Outcome {
    let make = |misreport: f64| {
        let mut g = GroupSpec::named("");
        g.noise = NoiseScale::Linear { base: 0.05, slope: 1.0 };
        g.misreport = misreport;
        let cfg = SynthConfig {
            n_cal: 100_000,
            n_test: 1,
            seed: 7,
            groups: vec![g],
            ..Default::default()
        };
        let mut r = gen_heteroscedastic(&cfg, 0);
        r.truncate(cfg.n_cal);
        r
    };
    let levels = default_levels();
    let good = make(1.0);
    let e_good = ece(&good, &levels, 0.1).map_err(|e| e.to_string())?;
    let fit_good = affine_calibrate(&good, &levels, 0.1).map_err(|e| e.to_string())?;
    let bad = make(1.0 / 3.0);
    let fit_bad = affine_calibrate(&bad, &levels, 0.1).map_err(|e| e.to_string())?;
    check(
        e_good <= 0.02
            && in_range(fit_good.a, 0.9, 1.1)
            && in_range(fit_bad.a, 2.7, 3.3)
            && fit_bad.ece_after <= 0.05,
        format!(
            "calibrated ECE {e_good:.4}, a = {:.4} (b = {:.4}); misreported a = {:.4}, ECE after {:.4}",
            fit_good.a, fit_good.b, fit_bad.a, fit_bad.ece_after
        ),
    )
}

fn linear_data(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<f64>) {
    let xs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
    let ys = xs
        .iter()
        .map(|x| {
            let z: f64 = StandardNormal.sample(rng);
            2.0 * x + z
        })
        .collect();
    (xs, ys)
}

fn write_xy(path: &Path, xs: &[f64], ys: &[f64]) {
    let mut s = String::from("id,x,y\n");
    for (i, (x, y)) in xs.iter().zip(ys).enumerate() {
        s.push_str(&format!("p{i},{x},{y}\n"));
    }
    std::fs::write(path, s).unwrap();
}

/// 8. Linear quantile regression recovers the analytic quantile and feeds the
/// asymmetric conformal pipeline.
fn quantile_regression() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (xs, ys) = linear_data(&mut rng, 50_000);
    let features: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
    let fit = fit_quantile(&features, &ys, 0.95, &TrainConfig::default()).map_err(|e| e.to_string())?;
    let grid: Vec<f64> = (0..=200).map(|i| i as f64 / 100.0).collect();
    let rms = (grid
        .iter()
        .map(|&x| (fit.model.predict(&[x]) - (2.0 * x + 1.644_853_626_951_472_2)).powi(2))
        .sum::<f64>()
        / grid.len() as f64)
        .sqrt();
    let (hx, hy) = linear_data(&mut rng, 50_000);
    let below = hx
        .iter()
        .zip(&hy)
        .filter(|(x, y)| **y <= fit.model.predict(&[**x]))
        .count() as f64
        / hx.len() as f64;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let train = dir.path().join("train.csv");
    let apply = dir.path().join("apply.csv");
    let records = dir.path().join("records.jsonl");
    write_xy(&train, &xs, &ys);
    let (ax, ay) = linear_data(&mut rng, 20_000);
    write_xy(&apply, &ax, &ay);
    cmd_fit_quantile(&FitQuantileConfig {
        train,
        apply: Some(apply),
        features: vec!["x".into()],
        target: "y".into(),
        tau: 0.1,
        symmetric: false,
        train_config: TrainConfig::default(),
        model_out: None,
        out: Some(records.clone()),
    })
    .map_err(|e| e.to_string())?;
    let eval = cmd_evaluate(&EvaluateConfig {
        input: records,
        kind: ScoreKind::Asymmetric,
        runs: 10,
        cal_size: 2000,
        seed: 8,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let conformal = eval.report.method("conformal").map(|m| m.mean_coverage).unwrap_or(f64::NAN);
    check(
        rms <= 0.1 && (below - 0.95).abs() <= 0.02 && (conformal - 0.9).abs() <= 0.02,
        format!("RMS {rms:.4}; held-out below {below:.4}; QNT-NS conformal coverage {conformal:.4}"),
    )
}

/// 9. The bundled fixture reproduces the committed report byte for byte, and
/// its values match the independent brute-force recomputation.
fn golden_pipeline() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = golden_config(dir.path());
    cmd_evaluate(&config).map_err(|e| e.to_string())?;
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let mut identical = Vec::new();
    for name in ["report.json", "per_group.csv", "per_bin.csv", "splits.jsonl"] {
        let got = std::fs::read(dir.path().join(name)).map_err(|e| e.to_string())?;
        let want = std::fs::read(fixtures.join("golden").join(name)).map_err(|e| e.to_string())?;
        if got != want {
            return Err(format!("{name} differs from the committed golden copy"));
        }
        identical.push(name);
    }
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    let expected: serde_json::Value =
        serde_json::from_slice(&std::fs::read(fixtures.join("expected.json")).map_err(|e| e.to_string())?).unwrap();
    let mismatches = compare_with_oracle(&report, &expected);
    check(
        mismatches.is_empty(),
        format!("{} byte-identical; oracle mismatches: {mismatches:?}", identical.join(", ")),
    )
}

/// Configuration the golden files were produced with.
fn golden_config(out: &Path) -> EvaluateConfig {
    EvaluateConfig {
        input: "tests/fixtures/fixture.jsonl".into(),
        out_dir: Some(out.to_path_buf()),
        runs: 3,
        cal_size: 250,
        seed: 7,
        group_by: Some("group".into()),
        bin_attr: Some(BinSource::PredictedUncertainty),
        min_bin_size: 50,
        emit_splits: true,
        ..Default::default()
    }
}

fn num(v: &serde_json::Value) -> f64 {
    match v {
        serde_json::Value::String(s) if s == "inf" => f64::INFINITY,
        _ => v.as_f64().unwrap_or(f64::NAN),
    }
}

fn close(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= 1e-9 * b.abs().max(1.0)
}

fn compare_with_oracle(report: &serde_json::Value, expected: &serde_json::Value) -> Vec<String> {
    let mut bad = Vec::new();
    for (run, exp) in report["runs"].as_array().unwrap().iter().zip(expected["runs"].as_array().unwrap()) {
        let r = run["run"].as_u64().unwrap();
        let methods: BTreeMap<&str, &serde_json::Value> = run["methods"]
            .as_array()
            .unwrap()
            .iter()
            .map(|m| (m["method"].as_str().unwrap(), m))
            .collect();
        let part = &run["partition"];
        for key in ["boundaries", "bin_quantiles", "bin_counts"] {
            let got: Vec<f64> = part[key].as_array().unwrap().iter().map(num).collect();
            let want: Vec<f64> = exp["partition"][key].as_array().unwrap().iter().map(num).collect();
            if got.len() != want.len() || !got.iter().zip(&want).all(|(a, b)| close(*a, *b)) {
                bad.push(format!("run {r} partition {key}"));
            }
        }
        for name in ["original", "affine", "conformal", "grouped", "mondrian"] {
            let (m, e) = (methods[name], &exp[name]);
            if m["covered"] != e["covered"] {
                bad.push(format!("run {r} {name} covered"));
            }
            if !close(num(&m["sharpness"]), num(&e["sharpness"])) {
                bad.push(format!("run {r} {name} sharpness"));
            }
            if let Some(groups) = e["per_group"].as_object() {
                for (g, cn) in groups {
                    let cell = &m["per_group_coverage"][g];
                    if cell["covered"] != cn[0] || cell["count"] != cn[1] {
                        bad.push(format!("run {r} {name} group {g}"));
                    }
                }
            }
            if let Some(bins) = e["per_bin"].as_object() {
                for cell in m["per_bin_coverage"].as_array().unwrap() {
                    let cn = &bins[&cell["bin"].to_string()];
                    if cell["covered"] != cn[0] || cell["count"] != cn[1] {
                        bad.push(format!("run {r} {name} bin {}", cell["bin"]));
                    }
                }
            }
        }
        if !close(num(&methods["original"]["ece"]), num(&exp["original"]["ece"])) {
            bad.push(format!("run {r} original ece"));
        }
        if !close(num(&methods["affine"]["ece"]), num(&exp["affine"]["ece"])) {
            bad.push(format!("run {r} affine ece"));
        }
        for key in ["a", "b", "cal_ece_before", "cal_ece_after"] {
            if !close(num(&run["affine_fit"][key]), num(&exp["affine"][key])) {
                bad.push(format!("run {r} affine {key}"));
            }
        }
        if !close(num(&methods["conformal"]["q_hat_summary"]), num(&exp["conformal"]["q_hat"])) {
            bad.push(format!("run {r} conformal q_hat"));
        }
        for (g, q) in exp["grouped"]["q_hat"].as_object().unwrap() {
            if !close(num(&methods["grouped"]["q_hat_summary"][g]), num(q)) {
                bad.push(format!("run {r} grouped q_hat {g}"));
            }
        }
    }
    bad
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("1 coverage band (Monte Carlo)", coverage_band),
        ("2 quantile oracle equivalence", quantile_oracle),
        ("3 calibration duality", calibration_duality),
        ("4 conformal correction of misreported sigma", conformal_correction),
        ("5 equalized group coverage", equalized_groups),
        ("6 Mondrian uncertainty bins", mondrian_bins),
        ("7 ECE and affine calibration", ece_affine),
        ("8 quantile regression pipeline", quantile_regression),
        ("9 golden pipeline", golden_pipeline),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
