//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Run with `cargo test -p cbln-core --test acceptance`.

use std::collections::BTreeSet;
use std::f64::consts::LN_2;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use cbln_core::config::{DataConfig, EvalConfig, ModelConfig, RunConfig};
use cbln_core::data::{payload_path, save_dataset, GroundingExample, SyntheticSpec};
use cbln_core::evaluation::{evaluate_model, recall_at, Prediction};
use cbln_core::gradcheck::{finite_diff_check, GradCheckReport};
use cbln_core::mcbl::global_spans;
use cbln_core::mmsa::{concat_word_video, per_word_self_attention, MmsaParams};
use cbln_core::model::{gradcheck_config, gradcheck_modules, Cbln};
use cbln_core::params::{Mode, ParameterStore, Session};
use cbln_core::tape::{ReduceKind, Tape, Var};
use cbln_core::training::{bce_loss, build_supervision, train, TrainTrace};
use cbln_core::{Result, Segment, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOL: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-5;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const ROW_SUM_TOL: f64 = 1e-9;
const LN2_TOL: f64 = 1e-9;
const SIGMOID_TOL: f64 = 1e-15;
const TRAIN_R1_IOU07_MIN: f64 = 90.0;
const TEST_R1_IOU05_MIN: f64 = 60.0;
const LEARN_BUDGET: Duration = Duration::from_secs(15 * 60);
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn probe(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = random(tape.value(y).shape(), &mut ChaCha8Rng::seed_from_u64(seed));
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum_all(p))
}

type OpFn = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

/// Every differentiable tape op, each exercised at three input shapes.
fn tensor_ops() -> Vec<(&'static str, OpFn)> {
    fn other(tape: &mut Tape, shape: &[usize], seed: u64) -> Var {
        let t = random(shape, &mut ChaCha8Rng::seed_from_u64(seed));
        tape.constant(t)
    }
    vec![
        (
            "matmul",
            Box::new(|t, x| {
                let c = t.value(x).cols();
                let b = other(t, &[c, 3], 1);
                t.matmul(x, b)
            }),
        ),
        ("transpose", Box::new(|t, x| t.transpose(x))),
        ("sigmoid", Box::new(|t, x| Ok(t.sigmoid(x)))),
        ("tanh", Box::new(|t, x| Ok(t.tanh(x)))),
        ("relu", Box::new(|t, x| Ok(t.relu(x)))),
        (
            "add-row-broadcast",
            Box::new(|t, x| {
                let c = t.value(x).cols();
                let b = other(t, &[1, c], 2);
                t.add(x, b)
            }),
        ),
        (
            "sub",
            Box::new(|t, x| {
                let s = t.value(x).shape().to_vec();
                let b = other(t, &s, 3);
                t.sub(b, x)
            }),
        ),
        ("mul-self", Box::new(|t, x| t.mul(x, x))),
        ("scale", Box::new(|t, x| Ok(t.scale(x, -1.7)))),
        ("softmax-rows", Box::new(|t, x| t.softmax(x, 1))),
        ("softmax-cols", Box::new(|t, x| t.softmax(x, 0))),
        ("reduce-max", Box::new(|t, x| t.reduce(x, ReduceKind::Max, 1))),
        ("reduce-mean", Box::new(|t, x| t.reduce(x, ReduceKind::Mean, 0))),
        ("reduce-sum", Box::new(|t, x| t.reduce(x, ReduceKind::Sum, 1))),
        ("sum-all", Box::new(|t, x| Ok(t.sum_all(x)))),
        (
            "concat",
            Box::new(|t, x| {
                let s = t.tanh(x);
                t.concat(&[x, s], 1)
            }),
        ),
        (
            "slice",
            Box::new(|t, x| {
                let c = t.value(x).cols();
                t.slice(x, 1, 1..c)
            }),
        ),
        (
            "gather-rows",
            Box::new(|t, x| {
                let r = t.value(x).rows();
                t.gather_rows(x, &[Some(r - 1), None, Some(0), Some(r - 1)])
            }),
        ),
        (
            "reshape",
            Box::new(|t, x| {
                let n = t.value(x).len();
                t.reshape(x, vec![1, n])
            }),
        ),
        (
            "layer-norm",
            Box::new(|t, x| {
                let c = t.value(x).cols();
                let g = other(t, &[1, c], 4);
                let b = other(t, &[1, c], 5);
                t.layer_norm(x, g, b, 1e-5)
            }),
        ),
        (
            "dropout",
            Box::new(|t, x| {
                let mut rng = ChaCha8Rng::seed_from_u64(6);
                t.dropout(x, 0.3, true, &mut rng)
            }),
        ),
        ("max-pool-rows", Box::new(|t, x| t.max_pool_rows(x, 2))),
        (
            "bce",
            Box::new(|t, x| {
                let p = t.sigmoid(x);
                let target = random(t.value(x).shape(), &mut ChaCha8Rng::seed_from_u64(7)).map(|v| v.abs());
                t.bce(p, &target, None, 1e-7)
            }),
        ),
    ]
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let mut worst: (String, f64) = (String::new(), 0.0);
    let mut failures = Vec::new();
    let mut note = |name: String, r: &GradCheckReport| {
        if r.max_rel_err >= worst.1 {
            worst = (name.clone(), r.max_rel_err);
        }
        if !r.passed() {
            failures.push(format!("{name} ({:.2e})", r.max_rel_err));
        }
    };
    let shapes: [&[usize]; 3] = [&[2, 3], &[4, 4], &[5, 2]];
    for (name, op) in tensor_ops() {
        for (k, shape) in shapes.iter().enumerate() {
            let x = random(shape, &mut ChaCha8Rng::seed_from_u64(100 + k as u64));
            let r = finite_diff_check(
                |t, v| {
                    let y = op(t, v)?;
                    probe(t, y, 200 + k as u64)
                },
                &x,
                GRAD_STEP,
                GRAD_TOL,
            )
            .unwrap();
            note(format!("{name}{shape:?}"), &r);
        }
    }
    // T = 5, N = 3, D = 4.
    for (name, r) in gradcheck_modules(&gradcheck_config(), 5, 3, 0, GRAD_STEP, GRAD_TOL).unwrap() {
        note(name, &r);
    }
    let elapsed = start.elapsed();
    let passed = failures.is_empty() && elapsed < GRAD_BUDGET;
    outcome(
        passed,
        format!(
            "worst {} rel err {:.2e} < {GRAD_TOL:e}; {:.1}s < {}s{}",
            worst.0,
            worst.1,
            elapsed.as_secs_f64(),
            GRAD_BUDGET.as_secs(),
            if failures.is_empty() {
                String::new()
            } else {
                format!("; failed: {}", failures.join(", "))
            }
        ),
    )
}

/// Per-cell IoU by explicit frame sets.
fn brute_force_iou(s: usize, e: usize, gt: (usize, usize)) -> f64 {
    if s > e {
        return 0.0;
    }
    let a: BTreeSet<usize> = (s..=e).collect();
    let b: BTreeSet<usize> = (gt.0..=gt.1).collect();
    a.intersection(&b).count() as f64 / a.union(&b).count() as f64
}

fn criterion_supervision() -> Outcome {
    let mut checked = 0;
    for t in 2..=8usize {
        for gs in 0..t {
            for ge in gs..t {
                let o = build_supervision(Segment::new(gs, ge), t).unwrap();
                let raw: Vec<f64> = (0..t * t)
                    .map(|i| brute_force_iou(i / t, i % t, (gs, ge)))
                    .collect();
                let max = raw.iter().copied().fold(0.0, f64::max);
                for (i, (&got, &r)) in o.data().iter().zip(&raw).enumerate() {
                    if got != r / max {
                        return outcome(
                            false,
                            format!("T={t} gt=({gs},{ge}) cell {i}: {got} vs {}", r / max),
                        );
                    }
                }
                let got_max = o.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if got_max != 1.0 || o.at(gs, ge) != 1.0 {
                    return outcome(false, format!("T={t} gt=({gs},{ge}) max {got_max}"));
                }
                checked += 1;
            }
        }
    }
    outcome(
        true,
        format!("{checked} ground truths over T=2..8 match the enumeration exactly; max = 1"),
    )
}

fn criterion_shapes() -> Outcome {
    let cfg = ModelConfig::default();
    let model = Cbln::new(&cfg).unwrap();
    let store = model.init(0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst_row = 0.0f64;
    for t in [2usize, 8, 32] {
        for trial in 0..3 {
            let feats = random(&[t, cfg.d_video_in], &mut rng).map(|v| v * 3.0);
            let n = 1 + trial * 2;
            let tokens: Vec<usize> = (0..n).map(|_| rng.gen_range(0..cfg.vocab_size)).collect();
            let m = model.predict(&store, &feats, &tokens).unwrap();
            if m.shape() != [t, t] || !m.data().iter().all(|&v| v.is_finite() && v > 0.0 && v < 1.0) {
                return outcome(
                    false,
                    format!("T={t}: score map shape {:?} or range violated", m.shape()),
                );
            }

            let mut tape = Tape::new();
            let mut sess = Session::new(&mut tape, &store, Mode::Eval);
            let v = sess.tape.constant(random(&[t, cfg.d_model], &mut rng));
            let q = sess.tape.constant(random(&[1, cfg.d_model], &mut rng));
            let f = concat_word_video(&mut sess, v, q).unwrap();
            let a = per_word_self_attention(&mut sess, f, &MmsaParams::new("mmsa", cfg.d_model)).unwrap();
            let x = sess
                .tape
                .constant(random(&[t, t + 3], &mut rng).map(|v| v * 20.0));
            let sm = sess.tape.softmax(x, 1).unwrap();
            for w in [a.weights, sm] {
                let w = sess.tape.value(w);
                for r in 0..w.rows() {
                    worst_row = worst_row.max((w.row(r).iter().sum::<f64>() - 1.0).abs());
                }
            }
        }
    }
    outcome(
        worst_row <= ROW_SUM_TOL,
        format!("T in {{2,8,32}}: maps T×T in (0,1), finite; worst row-sum error {worst_row:.1e} <= {ROW_SUM_TOL:e}"),
    )
}

fn criterion_degenerate() -> Outcome {
    let cfg = ModelConfig::default();
    let model = Cbln::new(&cfg).unwrap();
    let mut store = model.init(3).unwrap();
    store.zero_prefix("");
    let b_m = [0.4, -1.1, 0.25];
    for (i, b) in b_m.iter().enumerate() {
        store
            .set(&format!("mcbl.head{i}.b_m"), Tensor::scalar(*b))
            .unwrap();
    }
    let want = 1.0 / (1.0 + (-(b_m.iter().sum::<f64>() / 3.0)).exp());
    let feats = random(&[8, cfg.d_video_in], &mut ChaCha8Rng::seed_from_u64(1));
    let m = model.predict(&store, &feats, &[3, 9, 4]).unwrap();
    let constant = m.data().iter().all(|&v| v == m.data()[0]);
    let const_err = (m.data()[0] - want).abs();

    let mut tape = Tape::new();
    let half = tape.constant(Tensor::full(&[6, 6], 0.5));
    let targets = build_supervision(Segment::new(1, 3), 6).unwrap();
    let l = bce_loss(&mut tape, half, &targets, false, 1e-7).unwrap();
    let ln2_err = (tape.value(l).data()[0] - LN_2).abs();

    let store = ParameterStore::new();
    let mut tape = Tape::new();
    let mut sess = Session::new(&mut tape, &store, Mode::Eval);
    let f = random(&[7, 5], &mut ChaCha8Rng::seed_from_u64(2));
    let fv = sess.tape.constant(f.clone());
    let bank = global_spans(&mut sess, fv, 1).unwrap();
    let identity = sess.tape.value(bank) == &f;

    outcome(
        constant && const_err <= SIGMOID_TOL && ln2_err <= LN2_TOL && identity,
        format!(
            "zeroed model map constant: {constant}, |M - σ(mean b_m)| = {const_err:.1e}; constant-0.5 loss - ln 2 = {ln2_err:.1e} <= {LN2_TOL:e}; K_g=1 bank identical: {identity}"
        ),
    )
}

struct Trained {
    train_r1_07: f64,
    test_r1_05: f64,
    test_r1_07: f64,
    elapsed: Duration,
}

fn synthetic_task() -> (Vec<GroundingExample>, Vec<GroundingExample>) {
    let data = DataConfig::default();
    let spec = SyntheticSpec::new(&data, 0).unwrap();
    let train_set = spec.records(0, data.train_count).unwrap();
    let test_set = spec.records(data.train_count as u64, data.test_count).unwrap();
    (train_set, test_set)
}

fn train_and_score(
    cfg: &RunConfig,
    train_set: &[GroundingExample],
    test_set: &[GroundingExample],
    label: &str,
) -> Trained {
    let start = Instant::now();
    let model = Cbln::new(&cfg.model).unwrap();
    let mut store = model.init(cfg.seed).unwrap();
    train(
        &model,
        &mut store,
        train_set,
        &cfg.train,
        cfg.seed,
        |epoch, loss| {
            if (epoch + 1) % 10 == 0 {
                eprintln!("  [{label}] epoch {} loss {loss:.5}", epoch + 1);
            }
        },
    )
    .unwrap();
    let elapsed = start.elapsed();
    let eval = EvalConfig {
        n: vec![1],
        iou: vec![0.5, 0.7],
        ..EvalConfig::default()
    };
    let tr = evaluate_model(&model, &store, train_set, &eval).unwrap();
    let te = evaluate_model(&model, &store, test_set, &eval).unwrap();
    Trained {
        train_r1_07: tr.get(1, 0.7).unwrap(),
        test_r1_05: te.get(1, 0.5).unwrap(),
        test_r1_07: te.get(1, 0.7).unwrap(),
        elapsed,
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn criteria_learning() -> (Outcome, Outcome) {
    let (train_set, test_set) = synthetic_task();
    let mut full = Vec::new();
    let mut ablated = Vec::new();
    let mut learn = None;
    for seed in ABLATION_SEEDS {
        let mut cfg = RunConfig {
            seed,
            ..RunConfig::default()
        };
        let r = train_and_score(&cfg, &train_set, &test_set, &format!("full seed {seed}"));
        full.push(r.test_r1_07);
        if seed == 0 {
            let passed = r.train_r1_07 >= TRAIN_R1_IOU07_MIN
                && r.test_r1_05 >= TEST_R1_IOU05_MIN
                && r.elapsed <= LEARN_BUDGET
                && cfg.train.epochs <= 30
                && cfg.train.lr == 8e-4;
            learn = Some(outcome(
                passed,
                format!(
                    "train R@1,IoU=0.7 = {:.2} >= {TRAIN_R1_IOU07_MIN}; test R@1,IoU=0.5 = {:.2} >= {TEST_R1_IOU05_MIN}; {} epochs at lr {:e} in {:.0}s <= {}s",
                    r.train_r1_07,
                    r.test_r1_05,
                    cfg.train.epochs,
                    cfg.train.lr,
                    r.elapsed.as_secs_f64(),
                    LEARN_BUDGET.as_secs()
                ),
            ));
        }
        cfg.model.contexts = false;
        let a = train_and_score(&cfg, &train_set, &test_set, &format!("biaffine-only seed {seed}"));
        ablated.push(a.test_r1_07);
    }
    let (mf, ma) = (median(full.clone()), median(ablated.clone()));
    let ablation = outcome(
        mf >= ma,
        format!("median test R@1,IoU=0.7 full {mf:.2} {full:?} >= biaffine-only {ma:.2} {ablated:?}"),
    );
    (learn.expect("seed 0 is in the ablation seeds"), ablation)
}

fn ranked(ps: &[(usize, usize)]) -> Prediction {
    Prediction {
        ranked: ps
            .iter()
            .enumerate()
            .map(|(i, &(s, e))| (Segment::new(s, e), 1.0 / (i + 1) as f64))
            .collect(),
    }
}

fn criterion_metrics() -> Outcome {
    let gts = [
        Segment::new(0, 3),
        Segment::new(4, 7),
        Segment::new(2, 2),
        Segment::new(0, 9),
    ];
    let preds = [
        ranked(&[(0, 3), (5, 9)]),
        ranked(&[(0, 1), (4, 6)]),
        ranked(&[(1, 3), (2, 2)]),
        ranked(&[(0, 4), (0, 9)]),
    ];
    // Hand count: best IoU in top-1 is {1, 0, 1/3, 1/2}; in top-2 {1, 3/4, 1, 1}.
    let fixture = [
        (1, 0.5, 50.0),
        (1, 0.3, 75.0),
        (1, 0.7, 25.0),
        (2, 0.5, 100.0),
        (2, 0.7, 100.0),
        (2, 0.9, 75.0),
    ];
    for (n, m, want) in fixture {
        let got = recall_at(&preds, &gts, n, m, false).unwrap();
        if got != want {
            return outcome(false, format!("fixture R@{n},IoU={m}: {got} != {want}"));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let ns = [1, 2, 3, 5, 10];
    let ms = [0.1, 0.3, 0.5, 0.7, 0.9, 1.0];
    for fixture in 0..100 {
        let t = rng.gen_range(4..40);
        let count = rng.gen_range(1..30);
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        let seg = |rng: &mut ChaCha8Rng| {
            let s = rng.gen_range(0..t);
            Segment::new(s, rng.gen_range(s..t))
        };
        for _ in 0..count {
            gts.push(seg(&mut rng));
            let k = rng.gen_range(1..12);
            preds.push(Prediction {
                ranked: (0..k).map(|i| (seg(&mut rng), -(i as f64))).collect(),
            });
        }
        for &m in &ms {
            let row: Vec<f64> = ns
                .iter()
                .map(|&n| recall_at(&preds, &gts, n, m, false).unwrap())
                .collect();
            if row.windows(2).any(|w| w[1] < w[0]) {
                return outcome(
                    false,
                    format!("fixture {fixture}: not monotone in n at m={m}: {row:?}"),
                );
            }
        }
        for &n in &ns {
            let col: Vec<f64> = ms
                .iter()
                .map(|&m| recall_at(&preds, &gts, n, m, false).unwrap())
                .collect();
            if col.windows(2).any(|w| w[1] > w[0]) {
                return outcome(
                    false,
                    format!("fixture {fixture}: not monotone in m at n={n}: {col:?}"),
                );
            }
        }
    }
    outcome(
        true,
        "4-sample fixture matches hand counts exactly; 100 random fixtures monotone in n and m",
    )
}

fn criterion_reproducibility() -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut files = Vec::new();
    let mut traces: Vec<(TrainTrace, String)> = Vec::new();
    for dir in &dirs {
        let mut cfg = RunConfig {
            seed: 5,
            ..RunConfig::default()
        };
        cfg.train.epochs = 2;
        let spec = SyntheticSpec::new(&cfg.data, cfg.seed).unwrap();
        let train_set = spec.records(0, 48).unwrap();
        let test_set = spec.records(48, 16).unwrap();
        let path = dir.path().join("train.json");
        save_dataset(&train_set, &path).unwrap();
        files.push((
            std::fs::read(&path).unwrap(),
            std::fs::read(payload_path(&path)).unwrap(),
        ));

        let loaded = cbln_core::data::load_dataset(&path).unwrap();
        let model = Cbln::new(&cfg.model).unwrap();
        let mut store = model.init(cfg.seed).unwrap();
        let trace = train(&model, &mut store, &loaded, &cfg.train, cfg.seed, |_, _| {}).unwrap();
        let report = evaluate_model(&model, &store, &test_set, &cfg.eval).unwrap();
        traces.push((trace, report.to_json().unwrap()));
    }
    let same_files = files[0] == files[1];
    let same_trace = traces[0].0.to_csv() == traces[1].0.to_csv();
    let same_report = traces[0].1 == traces[1].1;
    outcome(
        same_files && same_trace && same_report,
        format!(
            "dataset bytes identical: {same_files}; loss traces ({} steps) identical: {same_trace}; eval reports identical: {same_report}",
            traces[0].0.step_losses.len()
        ),
    )
}

fn run(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        outcome(false, format!("panicked: {msg}"))
    });
    println!(
        "{} {name}: {} [{:.1}s]",
        if result.passed { "PASS" } else { "FAIL" },
        result.detail,
        start.elapsed().as_secs_f64()
    );
    result.passed
}

fn main() {
    let quick = std::env::var_os("CBLN_ACCEPTANCE_QUICK").is_some();
    let mut ok = true;
    ok &= run("1 gradient soundness", criterion_gradients);
    ok &= run("2 supervision oracle", criterion_supervision);
    ok &= run("3 shape/range suite", criterion_shapes);
    ok &= run("4 analytic degenerate cases", criterion_degenerate);
    if quick {
        println!("SKIP 5 learnability: CBLN_ACCEPTANCE_QUICK is set");
        println!("SKIP 6 ablation trend: CBLN_ACCEPTANCE_QUICK is set");
    } else {
        let mut ablation = None;
        ok &= run("5 learnability", || {
            let (learn, abl) = criteria_learning();
            ablation = Some(abl);
            learn
        });
        ok &= run("6 ablation trend", || {
            ablation.unwrap_or_else(|| outcome(false, "training did not complete"))
        });
    }
    ok &= run("7 metric correctness", criterion_metrics);
    ok &= run("8 reproducibility", criterion_reproducibility);
    if !ok {
        std::process::exit(1);
    }
}
