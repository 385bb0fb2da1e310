//! End-to-end acceptance run: prints one PASS/FAIL line per criterion.
//!
//! Correctness criteria (1, 2, 3, 9) make the target fail. The experimental
//! ones (4–8, 10) are reported as measured; a FAIL there is a finding about
//! the toy setup, not a broken build.

#[path = "../../core/tests/dissection.rs"]
#[allow(dead_code, unused_imports)]
mod dissection;
#[path = "../../core/tests/gradients.rs"]
#[allow(dead_code, unused_imports)]
mod gradients;
#[path = "../../core/tests/losses.rs"]
#[allow(dead_code, unused_imports)]
mod losses;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::time::{Duration, Instant};

use depth_dissect_core::bins::BinningScheme;
use depth_dissect_core::dissect::{build_report, SelectivityReport};
use depth_dissect_core::eval::{
    ablation_curve, correct_responses, dissect_network, error_unit_attribution, evaluate,
    fgsm_attack, AblationOrder, MetricsAccumulator,
};
use depth_dissect_core::net::{NetConfig, Network};
use depth_dissect_core::scene::{generate_samples, Sample, SceneConfig};
use depth_dissect_core::train::{fit, AssignmentTable, TrainConfig, TrainMode};

const SEEDS: [u64; 3] = [0, 1, 2];
const N_TRAIN: usize = 200;
const N_TEST: usize = 50;
/// Weight of the selectivity terms in these experiments (the CLI default is 0.1).
const LAMBDA: f64 = 1.0;
const LAYER: &str = "d";
const EPSILON: f64 = 0.05;
const ATTACKED: usize = 20;

struct Tally {
    results: Vec<(u32, bool, bool)>,
}

impl Tally {
    fn line(&mut self, id: u32, hard: bool, pass: bool, detail: String) {
        let mut out = std::io::stdout().lock();
        let _ = writeln!(
            out,
            "criterion {id:>2}: {}  {detail}",
            if pass { "PASS" } else { "FAIL" }
        );
        let _ = out.flush();
        self.results.push((id, hard, pass));
    }

    /// Run a panicking check; a panic counts as failure and its message is reported.
    fn check(&mut self, id: u32, what: &str, limit: Duration, f: impl FnOnce() -> String) {
        let t = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(f));
        let took = t.elapsed();
        match r {
            Ok(detail) => {
                let fast = took <= limit;
                let timing = format!("{:.1}s (limit {}s)", took.as_secs_f64(), limit.as_secs());
                self.line(id, true, fast, format!("{what}: {detail}; {timing}"));
            }
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                self.line(id, true, false, format!("{what}: {msg}"));
            }
        }
    }
}

struct Models {
    train: Vec<Sample>,
    test: Vec<Sample>,
    baseline: Network<f32>,
    assign: Network<f32>,
    assignments: AssignmentTable,
    regularize: Network<f32>,
}

/// Per-seed mean DS of the designated layer and test delta1.
struct SeedRow {
    seed: u64,
    base_train: f64,
    base_test: f64,
    assign_train: f64,
    assign_test: f64,
    reg_test: f64,
    base_delta1: f64,
    assign_delta1: f64,
}

fn train_seed(seed: u64) -> Models {
    let scene = SceneConfig::default();
    let train = generate_samples(1000 + seed, N_TRAIN, &scene).unwrap();
    let test = generate_samples(5000 + seed, N_TEST, &scene).unwrap();
    let run = |mode: TrainMode| {
        let mut net = Network::<f32>::build(NetConfig::default(), seed).unwrap();
        let config = TrainConfig {
            mode,
            lambda: LAMBDA,
            seed,
            ..TrainConfig::default()
        };
        let outcome = fit(&mut net, &train, &config).unwrap();
        (net, outcome.assignments)
    };
    let (baseline, _) = run(TrainMode::Baseline);
    let (assign, assignments) = run(TrainMode::Assign);
    let (regularize, _) = run(TrainMode::Regularize);
    Models {
        train,
        test,
        baseline,
        assign,
        assignments,
        regularize,
    }
}

fn scheme() -> BinningScheme {
    let c = NetConfig::default();
    BinningScheme::sid(c.d_min, c.d_max, 64).unwrap()
}

fn report(
    net: &Network<f32>,
    samples: &[Sample],
    split: &str,
    assignments: Option<&AssignmentTable>,
) -> SelectivityReport {
    let table = dissect_network(net, samples, LAYER, &scheme()).unwrap();
    let rows = assignments
        .and_then(|a| a.get(LAYER))
        .map(|r| r.bins.as_slice());
    build_report(&table, rows, split).unwrap()
}

fn main() {
    let mut tally = Tally {
        results: Vec::new(),
    };

    tally.check(
        1,
        "random baseline via CLI",
        Duration::from_secs(10),
        || {
            let dir = tempfile::tempdir().unwrap();
            let bin = env!("CARGO_BIN_EXE_depth-dissect");
            let run = |bins: &str| -> f64 {
                let out = Command::new(bin)
                    .args(["baseline-mc", "--bins", bins, "--trials", "100000", "--out"])
                    .arg(dir.path().join(bins))
                    .output()
                    .unwrap();
                assert!(out.status.success(), "exit {:?}", out.status);
                String::from_utf8(out.stdout)
                    .unwrap()
                    .trim()
                    .parse()
                    .unwrap()
            };
            let (b64, b2) = (run("64"), run("2"));
            let exact2 = 2.0 * std::f64::consts::LN_2 - 1.0;
            assert!((b64 - 1.0 / 3.0).abs() <= 0.01, "64 bins gave {b64}");
            assert!(
                (b2 - exact2).abs() <= 0.01,
                "2 bins gave {b2}, expected {exact2:.4}"
            );
            format!("64 bins {b64:.4} (1/3), 2 bins {b2:.4} ({exact2:.4})")
        },
    );

    tally.check(
        2,
        "streaming dissection vs per-pixel oracle",
        Duration::from_secs(30),
        || {
            dissection::check_streaming_accumulation_matches_per_pixel_oracle();
            dissection::check_accumulation_order_does_not_matter();
            "all (unit, bin) entries within 1e-6 relative on 10 samples".into()
        },
    );

    tally.check(
        3,
        "gradients vs central differences",
        Duration::from_secs(120),
        || {
            gradients::check_conv2d();
            gradients::check_pointwise_conv();
            gradients::check_binary_ops();
            gradients::check_unary_ops();
            gradients::check_bilinear_resize();
            gradients::check_reductions();
            gradients::check_binned_mean();
            gradients::check_contrast();
            gradients::check_composite_loss_through_network();
            "every op and the depth + assignment loss below 1e-4 relative error, 20 seeds".into()
        },
    );

    tally.check(9, "invariants", Duration::from_secs(60), || {
        dissection::check_selectivity_bounds_and_scaling_on_random_vectors();
        losses::check_assignment_covers_every_effective_bin();
        losses::check_absent_bin_units_receive_exactly_zero_gradient();
        losses::check_absent_bin_units_do_not_change_the_loss();
        "DS in [0,1] and scale invariant on 1e4 vectors; assignment covers all bins; absent-bin units get zero gradient".into()
    });

    let t_train = Instant::now();
    let mut models = Vec::new();
    for seed in SEEDS {
        let t = Instant::now();
        models.push(train_seed(seed));
        eprintln!(
            "seed {seed}: three models trained in {:.0}s",
            t.elapsed().as_secs_f64()
        );
    }
    let train_time = t_train.elapsed();

    // 4 and 5: selectivity gain at preserved accuracy.
    let rows: Vec<SeedRow> = SEEDS
        .iter()
        .zip(&models)
        .map(|(&seed, m)| SeedRow {
            seed,
            base_train: report(&m.baseline, &m.train, "train", None).mean_ds,
            base_test: report(&m.baseline, &m.test, "test", None).mean_ds,
            assign_train: report(&m.assign, &m.train, "train", Some(&m.assignments)).mean_ds,
            assign_test: report(&m.assign, &m.test, "test", Some(&m.assignments)).mean_ds,
            reg_test: report(&m.regularize, &m.test, "test", None).mean_ds,
            base_delta1: evaluate(&m.baseline, &m.test).unwrap().delta1,
            assign_delta1: evaluate(&m.assign, &m.test).unwrap().delta1,
        })
        .collect();
    let join = |f: &dyn Fn(&SeedRow) -> String| rows.iter().map(f).collect::<Vec<_>>().join("; ");
    let mean = |f: &dyn Fn(&SeedRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;

    // Two of the three trainings per seed belong to criterion 4.
    let budget = train_time.as_secs_f64() * 2.0 / 3.0;
    let gains_ok = rows
        .iter()
        .all(|r| r.assign_train - r.base_train >= 0.2 && r.assign_test - r.base_test >= 0.15);
    let detail = join(&|r| {
        format!(
            "seed {}: train {:.3}->{:.3}, test {:.3}->{:.3}",
            r.seed, r.base_train, r.assign_train, r.base_test, r.assign_test
        )
    });
    tally.line(
        4,
        false,
        gains_ok && budget <= 900.0,
        format!("DS of `{LAYER}` baseline->assign, {detail}; {budget:.0}s training (limit 900s)"),
    );

    let (acc_b, acc_a) = (mean(&|r| r.base_delta1), mean(&|r| r.assign_delta1));
    tally.line(
        5,
        false,
        (acc_a - acc_b).abs() <= 0.02,
        format!("mean test delta1 baseline {acc_b:.4}, assign {acc_a:.4} (|diff| <= 0.02)"),
    );

    let reg_ok = rows.iter().all(|r| r.assign_test > r.reg_test);
    let detail = join(&|r| {
        format!(
            "seed {}: assign {:.3} vs regularize {:.3}",
            r.seed, r.assign_test, r.reg_test
        )
    });
    tally.line(
        6,
        false,
        reg_ok,
        format!("test DS at lambda {LAMBDA}, {detail}"),
    );

    // 7: ordered ablation on the first assign model, ranked on the training split.
    {
        let m = &models[0];
        let rank = report(&m.assign, &m.train, "train", Some(&m.assignments));
        let desc =
            ablation_curve(&m.assign, &m.test, LAYER, &rank, AblationOrder::Descending).unwrap();
        let asc =
            ablation_curve(&m.assign, &m.test, LAYER, &rank, AblationOrder::Ascending).unwrap();
        let below = desc
            .steps
            .iter()
            .zip(&asc.steps)
            .filter(|(d, a)| d.delta1 <= a.delta1)
            .count();
        let frac = below as f64 / desc.steps.len() as f64;
        let pass = frac >= 0.8 && desc.area() < asc.area();
        tally.line(
            7,
            false,
            pass,
            format!(
                "descending at or below ascending at {below}/{} steps ({:.0}%, need 80%); area {:.2} vs {:.2}",
                desc.steps.len(),
                frac * 100.0,
                desc.area(),
                asc.area()
            ),
        );
    }

    // 8: correction with a training-split table, evaluated on the test split.
    {
        let mut ok = true;
        let mut parts = Vec::new();
        for (seed, m) in SEEDS.iter().zip(&models) {
            let change = |net: &Network<f32>| {
                let table = dissect_network(net, &m.train, LAYER, &scheme()).unwrap();
                let r = correct_responses(net, &m.test, LAYER, &table, &scheme()).unwrap();
                (r.before.delta1, r.after.delta1)
            };
            let (ab, aa) = change(&m.assign);
            let (bb, ba) = change(&m.baseline);
            ok &= aa >= ab && aa - ab > ba - bb;
            parts.push(format!(
                "seed {seed}: assign {ab:.4}->{aa:.4}, baseline {bb:.4}->{ba:.4}"
            ));
        }
        tally.line(
            8,
            false,
            ok,
            format!("delta1 before->after correction, {}", parts.join("; ")),
        );
    }

    // 10: FGSM on the first assign model, then error attribution on `LAYER`.
    {
        let m = &models[0];
        let scheme = scheme();
        let rows = m.assignments.get(LAYER).unwrap();
        assert_eq!(rows.effective_bins, scheme.n_bins());
        let (mut clean, mut adv) = (MetricsAccumulator::default(), MetricsAccumulator::default());
        let (mut bound_ok, mut iou, mut ctl, mut n) = (true, 0.0, 0.0, 0usize);
        for (i, s) in m.test.iter().take(ATTACKED).enumerate() {
            let x = fgsm_attack(&m.assign, &s.image, &s.depth, &s.valid, EPSILON).unwrap();
            bound_ok &= x
                .data()
                .iter()
                .zip(s.image.data())
                .all(|(a, b)| (a - b).abs() <= EPSILON as f32);
            clean
                .add(
                    &m.assign.forward(&s.image, &[]).unwrap().0,
                    &s.depth,
                    &s.valid,
                )
                .unwrap();
            adv.add(&m.assign.forward(&x, &[]).unwrap().0, &s.depth, &s.valid)
                .unwrap();
            let r = error_unit_attribution(
                &m.assign, &x, &s.depth, &s.valid, LAYER, &rows.bins, &scheme, 3, i as u64,
            )
            .unwrap();
            for e in &r.entries {
                if let Some(c) = e.control_iou {
                    iou += e.mean_iou;
                    ctl += c;
                    n += 1;
                }
            }
        }
        let (c, a) = (clean.finish().unwrap().delta1, adv.finish().unwrap().delta1);
        let (iou, ctl) = (iou / n.max(1) as f64, ctl / n.max(1) as f64);
        let pass = c - a >= 0.05 && bound_ok && n > 0 && iou > ctl;
        tally.line(
            10,
            false,
            pass,
            format!(
                "delta1 {c:.4}->{a:.4} at eps {EPSILON} (drop >= 0.05); max-norm bound {}; IoU assigned {iou:.4} vs random control {ctl:.4} over {n} error bins",
                if bound_ok { "holds" } else { "violated" }
            ),
        );
    }

    tally.results.sort_by_key(|r| r.0);
    let passed = tally.results.iter().filter(|r| r.2).count();
    let hard_failed: Vec<u32> = tally
        .results
        .iter()
        .filter(|r| r.1 && !r.2)
        .map(|r| r.0)
        .collect();
    println!("acceptance: {passed}/{} criteria pass", tally.results.len());
    if !hard_failed.is_empty() {
        println!("correctness criteria failed: {hard_failed:?}");
        std::process::exit(1);
    }
}
