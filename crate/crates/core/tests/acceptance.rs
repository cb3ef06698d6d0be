//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails. Pass criterion numbers as arguments to
//! run a subset, e.g. `cargo test --test acceptance -- 1 3`.

use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use amhnet::agcrf::{
    compare_variants, compute_m, gate_expectation, mean_field_h_update, reference_message,
    run_reference_inference, run_unrolled_inference, AgCrfParams, GateSign, MeanFieldState,
    ScaleSet, UnaryWeight, Variant,
};
use amhnet::datagen::DatasetSpec;
use amhnet::evalkit::{evaluate, ContourMap, EvalOptions, Mask};
use amhnet::mhnet::{checkpoint, Ablation, Model, ModelConfig};
use amhnet::oracle::{self, ModelGradCheck};
use amhnet::tensor::{self, ConvKernel, Tape, Tensor};
use amhnet::train::{
    balanced_bce, class_balance, evaluate_model, train_loop, LossConfig, Quiet, SgdConfig,
    TrainConfig,
};

// Criterion 1
const ORACLE_TOL: f64 = 1e-6;
const ORACLE_INSTANCES: usize = 100;
const ORACLE_BUDGET: Duration = Duration::from_secs(60);
// Criterion 2
const GRAD_REL_TOL: f64 = 1e-3;
const GRAD_COORDS: usize = 50;
const GRAD_SIDE: usize = 16;
const GRAD_BUDGET: Duration = Duration::from_secs(300);
// Criterion 3
const SIGMA_SYMMETRY_TOL: f64 = 1e-12;
// Criterion 4
const FIXED_POINT_INSTANCES: usize = 20;
// Criterion 5
const VARIANT_INSTANCES: usize = 20;
const PLAIN_CRF_TOL: f64 = 1e-12;
// Criterion 6
const ABLATION_TRAIN: usize = 200;
const ABLATION_TEST: usize = 50;
const ABLATION_SIDE: usize = 64;
const ABLATION_SEED: u64 = 2024;
const ABLATION_ITERATIONS: usize = 4000;
const ABLATION_LR: f64 = 3e-5;
const ABLATION_ACCUMULATE: usize = 1;
const ABLATION_TOLERANCE: f64 = 0.0166;
const ORDER_SLACK: f64 = 0.005;
const DEEP_SUP_MARGIN: f64 = 0.005;
const ABLATION_BUDGET: Duration = Duration::from_secs(3600);
// Criterion 8
const FUZZ_CASES: usize = 200;
const EXACT_TOL: f64 = 1e-12;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_set(rng: &mut ChaCha8Rng, chans: &[usize], h: usize, w: usize, lo: f64, hi: f64) -> ScaleSet {
    ScaleSet::new(chans.iter().map(|&c| Tensor::random(rng, c, h, w, lo, hi)).collect()).unwrap()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    for (suite, seed) in [("compute_m", 1), ("message", 2)] {
        for r in oracle::run_suite(suite, seed, ORACLE_INSTANCES).unwrap() {
            worst = worst.max(r.max_abs);
            checks += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= ORACLE_TOL && elapsed < ORACLE_BUDGET,
        format!(
            "{checks} pair comparisons over {} instances, worst max-abs {worst:.2e} (tol {ORACLE_TOL:e}), {:.1}s",
            2 * ORACLE_INSTANCES,
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut check = ModelGradCheck::new(ModelConfig::new(Ablation::Flag), 0);
    check.side = GRAD_SIDE;
    check.coords_per_tensor = GRAD_COORDS;
    let reports = oracle::check_model_gradients(&check).unwrap();
    let elapsed = start.elapsed();
    let worst = reports.iter().map(|r| r.rel).fold(0.0, f64::max);
    let failing = reports.iter().filter(|r| !(r.rel <= GRAD_REL_TOL)).count();
    outcome(
        failing == 0 && elapsed < GRAD_BUDGET,
        format!(
            "{} tensors, worst relative error {worst:.2e} (tol {GRAD_REL_TOL:e}), {failing} failing, {:.0}s",
            reports.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut half_ok = true;
    let mut closed_ok = true;
    let mut symmetry: f64 = 0.0;
    for _ in 0..100 {
        let (f, p, _) = oracle::random_instance(&mut rng);
        let state = MeanFieldState {
            hbar: f
                .scales()
                .iter()
                .map(|t| Tensor::random(&mut rng, t.channels(), t.height(), t.width(), -1.0, 1.0))
                .collect(),
            alpha: Vec::new(),
        };
        for pk in p.pairs() {
            let (e, r) = (pk.emitter, pk.receiver);
            let mut m = compute_m(&state, &p, e, r).unwrap();
            // exact zeros of the statistic at random pixels
            for v in m.data_mut().iter_mut() {
                if rng.gen_bool(0.3) {
                    *v = 0.0;
                }
            }
            let plus = gate_expectation(&m, GateSign::Plus);
            let minus = gate_expectation(&m, GateSign::Minus);
            for ((&mv, &a), &b) in m.data().iter().zip(plus.data()).zip(minus.data()) {
                if mv == 0.0 {
                    half_ok &= a == 0.5 && b == 0.5;
                }
                symmetry = symmetry.max((a + b - 1.0).abs());
            }
            let big = m.scale(40.0);
            let (a, b) = (gate_expectation(&big, GateSign::Plus), gate_expectation(&big, GateSign::Minus));
            for (&a, &b) in a.data().iter().zip(b.data()) {
                symmetry = symmetry.max((a + b - 1.0).abs());
            }
            let msg = reference_message(&state, &p, e, r).unwrap();
            let closed = Tensor::zeros(1, msg.height(), msg.width());
            let h = mean_field_h_update(f.scale(r), p.fixed_unary(r).unwrap(), &[(closed, msg)]).unwrap();
            closed_ok &= &h == f.scale(r);
        }
        // zero kernels give M = 0 everywhere on both inference paths
        let z = AgCrfParams::zeros(&f.channels(), p.kernel_size(), 0.5).unwrap().with_iterations(2);
        let st = run_reference_inference(&f, &z).unwrap();
        half_ok &= st.alpha.iter().all(|a| a.data().iter().all(|&v| v == 0.5));
        for v in [Variant::Flag, Variant::Plag] {
            let st = run_unrolled_inference(&f, &z.clone().with_variant(v), &mut Tape::new()).unwrap();
            half_ok &= st.alpha.iter().all(|a| a.data().iter().all(|&v| v == 0.5));
        }
    }
    // gates driven to exactly 0 on the unrolled path leave the features untouched
    let f = random_set(&mut rng, &[2, 3, 1], 5, 6, 1.0, 2.0);
    let mut p = AgCrfParams::random(&mut rng, &[2, 3, 1], 3, 0.2, 0.1).unwrap().with_iterations(3);
    for pk in p.pairs_mut() {
        let n = pk.linear_emitter.values().len();
        pk.linear_emitter = ConvKernel::same(1, pk.linear_emitter.in_ch(), 3, vec![-1e6; n]).unwrap();
    }
    let st = run_unrolled_inference(&f, &p, &mut Tape::new()).unwrap();
    closed_ok &= st.alpha.iter().all(|a| a.data().iter().all(|&v| v == 0.0));
    closed_ok &= st.hbar == f.scales();
    outcome(
        half_ok && closed_ok && symmetry <= SIGMA_SYMMETRY_TOL,
        format!(
            "alpha = 0.5 at M = 0: {half_ok}; alpha = 0 gives h = F exactly: {closed_ok}; max |s(M) + s(-M) - 1| = {symmetry:.1e} (tol {SIGMA_SYMMETRY_TOL:e})"
        ),
    )
}

fn criterion_4() -> Outcome {
    let reports = oracle::run_suite("fixed_point", 4, FIXED_POINT_INSTANCES).unwrap();
    let ok = reports.iter().filter(|r| r.pass).count();
    outcome(
        ok == FIXED_POINT_INSTANCES,
        format!(
            "{ok}/{FIXED_POINT_INSTANCES} instances with strictly decreasing residuals over {} sweeps",
            oracle::FIXED_POINT_SWEEPS
        ),
    )
}

/// Unrolled update with every gate equal to one, recomputed from plain
/// tensor operations: `h_r <- f_r + a_r * sum_e L_{e->r} * h_e`, all
/// receivers from the previous iterate.
fn ungated_updates(f: &ScaleSet, p: &AgCrfParams) -> Vec<Tensor> {
    let mut h: Vec<Tensor> = f.scales().to_vec();
    for _ in 0..p.iterations {
        let mut next = Vec::with_capacity(h.len());
        for r in 0..h.len() {
            let mut acc = Tensor::zeros(f.scale(r).channels(), f.scale(r).height(), f.scale(r).width());
            for pk in p.pairs().iter().filter(|k| k.receiver == r) {
                acc = tensor::add(&acc, &tensor::conv2d(&h[pk.emitter], &pk.pairwise).unwrap()).unwrap();
            }
            let a = match &p.unary[r] {
                UnaryWeight::Fixed(a) => *a,
                UnaryWeight::Learned(_) => unreachable!("fixed weights in this test"),
            };
            next.push(tensor::add(f.scale(r), &acc.scale(a)).unwrap());
        }
        h = next;
    }
    h
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut plag_invariant = 0;
    let mut flag_moves = 0;
    let mut plain_err: f64 = 0.0;
    let mut saturated_equal = true;
    for i in 0..VARIANT_INSTANCES {
        let chans: Vec<usize> = (0..rng.gen_range(2..=3)).map(|_| rng.gen_range(1..=3)).collect();
        let (h, w) = (rng.gen_range(3..=6), rng.gen_range(3..=6));
        let f = random_set(&mut rng, &chans, h, w, -1.0, 1.0);
        let p = AgCrfParams::random(&mut rng, &chans, 3, 0.5, 0.2).unwrap();
        let r = compare_variants(&f, &p, &p.clone().with_variant(Variant::Plag)).unwrap();
        plag_invariant += usize::from(r.plag_invariant());
        flag_moves += usize::from(r.flag_alpha_shift > 0.0);

        let t = 1 + i % 3;
        let plain = p.clone().with_variant(Variant::PlainCrf).with_iterations(t);
        let got = run_unrolled_inference(&f, &plain, &mut Tape::new()).unwrap();
        for (a, b) in got.hbar.iter().zip(ungated_updates(&f, &plain)) {
            plain_err = plain_err.max(a.max_abs_diff(&b).unwrap());
        }

        // FLAG with gates pinned to exactly 1 by a huge emitter term on
        // positive features
        let fpos = random_set(&mut rng, &chans, h, w, 1.0, 2.0);
        let mut pinned = p.clone().with_iterations(t);
        for pk in pinned.pairs_mut() {
            pk.pairwise = pk.pairwise.scaled(0.1);
            let n = pk.linear_emitter.values().len();
            pk.linear_emitter = ConvKernel::same(1, pk.linear_emitter.in_ch(), 3, vec![1e6; n]).unwrap();
        }
        let flag = run_unrolled_inference(&fpos, &pinned, &mut Tape::new()).unwrap();
        let ones = flag.alpha.iter().all(|a| a.data().iter().all(|&v| v == 1.0));
        let plain = run_unrolled_inference(
            &fpos,
            &pinned.clone().with_variant(Variant::PlainCrf),
            &mut Tape::new(),
        )
        .unwrap();
        saturated_equal &= ones && flag.hbar == plain.hbar;
    }
    outcome(
        plag_invariant == VARIANT_INSTANCES
            && flag_moves == VARIANT_INSTANCES
            && plain_err <= PLAIN_CRF_TOL
            && saturated_equal,
        format!(
            "PLAG first-step gates invariant on {plag_invariant}/{VARIANT_INSTANCES}, FLAG's moved on {flag_moves}/{VARIANT_INSTANCES}; PLAIN_CRF vs ungated update {plain_err:.1e} (tol {PLAIN_CRF_TOL:e}); FLAG with gates at 1 equals PLAIN_CRF: {saturated_equal}"
        ),
    )
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let spec = DatasetSpec {
        seed: ABLATION_SEED,
        train: ABLATION_TRAIN,
        test: ABLATION_TEST,
        ranges: amhnet::datagen::SceneRanges {
            height: ABLATION_SIDE,
            width: ABLATION_SIDE,
            ..Default::default()
        },
    };
    let (train, test) = spec.generate().unwrap();
    let cfg = TrainConfig {
        iterations: ABLATION_ITERATIONS,
        seed: ABLATION_SEED,
        sgd: SgdConfig {
            lr: ABLATION_LR,
            accumulate: ABLATION_ACCUMULATE,
            ..Default::default()
        },
        ..Default::default()
    };
    let opts = EvalOptions {
        tol_frac: ABLATION_TOLERANCE,
        ..Default::default()
    };
    let mut ods = Vec::new();
    for a in Ablation::ALL {
        let mut mc = ModelConfig::new(a);
        mc.seed = ABLATION_SEED;
        let mut model = Model::new(mc).unwrap();
        let t = Instant::now();
        train_loop(&train, &mut model, &cfg, &mut Quiet).unwrap();
        let r = evaluate_model(&model, &test, &opts).unwrap();
        println!(
            "    {:<12} ODS {:.4} OIS {:.4} AP {:.4} ({:.0}s)",
            a.name(),
            r.ods,
            r.ois,
            r.ap,
            t.elapsed().as_secs_f64()
        );
        ods.push((a, r.ods));
    }
    let get = |a: Ablation| ods.iter().find(|(b, _)| *b == a).unwrap().1;
    let chain = [
        Ablation::Flag,
        Ablation::Plag,
        Ablation::PlainCrf,
        Ablation::NoAgcrf,
        Ablation::Baseline,
    ];
    let mut inversions = Vec::new();
    for w in chain.windows(2) {
        let gap = get(w[0]) - get(w[1]);
        if gap < -ORDER_SLACK {
            inversions.push(format!("{} < {} by {:.4}", w[0].name(), w[1].name(), -gap));
        }
    }
    let deep_gap = get(Ablation::Flag) - get(Ablation::NoDeepSup);
    let elapsed = start.elapsed();
    let order: Vec<String> = chain.iter().map(|&a| format!("{:.4}", get(a))).collect();
    outcome(
        inversions.is_empty() && deep_gap >= DEEP_SUP_MARGIN && elapsed < ABLATION_BUDGET,
        format!(
            "ODS flag..baseline [{}]; inversions beyond {ORDER_SLACK}: [{}]; flag - no_deep_sup = {deep_gap:.4} (need >= {DEEP_SUP_MARGIN}); {:.0}s",
            order.join(", "),
            inversions.join("; "),
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_7() -> Outcome {
    let bits: Vec<bool> = (0..100).map(|i| i % 4 == 0).collect();
    let m = Mask::new(10, 10, bits).unwrap();
    let beta = class_balance(&m).unwrap();
    let cfg = LossConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_ratio: f64 = 0.0;
    for _ in 0..50 {
        let (h, w) = (rng.gen_range(1..=20), rng.gen_range(1..=20));
        let gt = Mask::new(h, w, (0..h * w).map(|_| rng.gen_bool(0.3)).collect()).unwrap();
        let (l, _) = balanced_bce(&gt.to_tensor(), &gt, &cfg).unwrap();
        worst_ratio = worst_ratio.max(l / (cfg.epsilon * (h * w) as f64));
    }
    outcome(
        beta == 0.25 && worst_ratio < 1.0,
        format!("beta = {beta} for 25/75; clamped-perfect loss / (eps N) at most {worst_ratio:.3} over 50 masks"),
    )
}

fn grid(rows: &[&str], values: &[(char, f64)]) -> (ContourMap, Mask) {
    let (h, w) = (rows.len(), rows[0].len());
    let mut v = Vec::with_capacity(h * w);
    let mut bits = Vec::with_capacity(h * w);
    for row in rows {
        for c in row.chars() {
            v.push(values.iter().find(|(k, _)| *k == c.to_ascii_lowercase()).map_or(0.0, |p| p.1));
            bits.push(c.is_ascii_uppercase() || c == '#');
        }
    }
    (ContourMap::new(h, w, v).unwrap(), Mask::new(h, w, bits).unwrap())
}

fn criterion_8() -> Outcome {
    // Uppercase letters and '#' are ground-truth pixels; letters carry
    // prediction values. Radius 0.0075 * diag < 1 px, so only exact hits
    // match.
    let values = [
        ('a', 0.905),
        ('b', 0.605),
        ('c', 0.705),
        ('d', 0.305),
        ('e', 0.805),
        ('f', 0.405),
        ('g', 0.505),
    ];
    let img1 = grid(&["A..c", ".B..", "..#.", "d..."], &values);
    let img2 = grid(&[".E..", "....", "g...", "...F"], &values);
    let opts = EvalOptions {
        nms: false,
        ..Default::default()
    };
    let r = evaluate(&[img1.clone(), img2.clone()], &opts).unwrap();
    // Hand enumeration, F = 2TP / (2TP + FP + FN):
    //   dataset: t < .305: 8/12, .305-.405: 8/11, .405-.505: 6/10, ...
    //   image 1 best 4/6 (t in (.305, .605)), image 2 best 4/5 (t < .405)
    //   AP: envelope 1 on recall [0, .4], .75 on (.4, .6], 2/3 on (.6, .8]
    let (ods, ois, ap) = (8.0 / 11.0, (2.0 / 3.0 + 0.8) / 2.0, 0.4 + 0.2 * 0.75 + 0.2 * 2.0 / 3.0);
    let micro = (r.ods - ods).abs() <= EXACT_TOL
        && (r.ois - ois).abs() <= EXACT_TOL
        && (r.ap - ap).abs() <= EXACT_TOL
        && (r.ods_threshold - 0.31).abs() <= EXACT_TOL;
    let swapped = evaluate(&[img2, img1], &opts).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut ois_ok = 0;
    let mut invariant = 0;
    for case in 0..FUZZ_CASES {
        let n = rng.gen_range(1..=3);
        let data: Vec<(ContourMap, Mask)> = (0..n)
            .map(|_| {
                let (h, w) = (rng.gen_range(4..=12), rng.gen_range(4..=12));
                let gt = Mask::new(h, w, (0..h * w).map(|_| rng.gen_bool(0.2)).collect()).unwrap();
                // values kept at least 0.05 of a band away from every threshold
                let map = ContourMap::new(
                    h,
                    w,
                    (0..h * w)
                        .map(|_| (rng.gen_range(0..100) as f64 + rng.gen_range(0.05..0.95)) / 100.0)
                        .collect(),
                )
                .unwrap();
                (map, gt)
            })
            .collect();
        let o = EvalOptions {
            nms: case % 2 == 0,
            tol_frac: 0.1,
            ..Default::default()
        };
        let base = evaluate(&data, &o).unwrap();
        ois_ok += usize::from(base.ois >= base.ods - EXACT_TOL);

        // strictly increasing warp that cubes the position inside each
        // threshold band, so every threshold sees the same predictions
        let warped: Vec<(ContourMap, Mask)> = data
            .iter()
            .map(|(m, g)| {
                let map = m.map(|v| {
                    let k = (v * 100.0).floor();
                    let u = v * 100.0 - k;
                    (k + u * u * u) / 100.0
                });
                (map, g.clone())
            })
            .collect();
        let raw = EvalOptions { nms: false, ..o };
        let a = evaluate(&data, &raw).unwrap();
        let b = evaluate(&warped, &raw).unwrap();
        invariant += usize::from(a.ods == b.ods && a.ois == b.ois && a.ap == b.ap);
    }
    outcome(
        micro && swapped.ods == r.ods && swapped.ois == r.ois && ois_ok == FUZZ_CASES && invariant == FUZZ_CASES,
        format!(
            "micro-dataset ODS {:.6} OIS {:.6} AP {:.6} (hand {ods:.6} {ois:.6} {ap:.6}); OIS >= ODS on {ois_ok}/{FUZZ_CASES}; in-band monotone warp preserved ODS/OIS/AP on {invariant}/{FUZZ_CASES}",
            r.ods, r.ois, r.ap
        ),
    )
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let spec = DatasetSpec {
        seed: 9,
        train: 4,
        test: 2,
        ranges: amhnet::datagen::SceneRanges {
            height: 32,
            width: 32,
            ..Default::default()
        },
    };
    let (train, test) = spec.generate().unwrap();
    let cfg = TrainConfig {
        iterations: 6,
        sgd: SgdConfig {
            lr: 1e-3,
            accumulate: 2,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut all_ok = true;
    for a in Ablation::ALL {
        let mut model = Model::new(ModelConfig::new(a)).unwrap();
        train_loop(&train, &mut model, &cfg, &mut Quiet).unwrap();
        let p1 = dir.path().join(format!("{a}.1"));
        let p2 = dir.path().join(format!("{a}.2"));
        checkpoint::save(&p1, &model).unwrap();
        let loaded = checkpoint::load(&p1).unwrap();
        checkpoint::save(&p2, &loaded).unwrap();
        let same_file = std::fs::read(&p1).unwrap() == std::fs::read(&p2).unwrap();
        let same_pred = test
            .iter()
            .all(|s| model.predict(&s.image).unwrap() == loaded.predict(&s.image).unwrap());
        all_ok &= same_file && same_pred;
    }
    outcome(
        all_ok,
        format!("save -> load -> save bit-identical and reloaded predictions bit-exact for all {} variants: {all_ok}", Ablation::ALL.len()),
    )
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Outcome); 9] = [
        (1, "oracle equivalence", criterion_1),
        (2, "gradient correctness", criterion_2),
        (3, "gate algebra", criterion_3),
        (4, "fixed-point behaviour", criterion_4),
        (5, "variant semantics", criterion_5),
        (6, "desk-scale ablation ordering", criterion_6),
        (7, "loss arithmetic", criterion_7),
        (8, "evaluation metrics", criterion_8),
        (9, "checkpoint round trip", criterion_9),
    ];
    let wanted: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (n, name, run) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        println!(
            "criterion {n} {name}: {} ({}; {:.1}s)",
            if result.pass { "PASS" } else { "FAIL" },
            result.detail,
            start.elapsed().as_secs_f64()
        );
        failed += usize::from(!result.pass);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
