//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure.

mod common;

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use auxcl::experiment::{self, synthetic_ablation_config, CellRun};
use auxcl::mah::{assign_heads, greedy_match, ClassLogitProfile, HeadMap};
use auxcl::methods::{run_sequence, train_task, RunState};
use auxcl::seed::{rng, Stream};
use auxcl::{Model, TaskSequence};
use rand::Rng;

const GRAD_SHAPES_MIN: usize = 20;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const CHI2_CAPACITY: usize = 100;
const CHI2_STREAM: usize = 10_000;
const CHI2_TRIALS: usize = 200;
const MAH_RANDOM_CASES: usize = 1000;
const ABLATION_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const ABLATION_MIN_WINS: usize = 4;
const ABLATION_BUDGET: Duration = Duration::from_secs(600);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn gradient_check() -> Outcome {
    let t = Instant::now();
    let cases = common::gradient_suite(2, 11);
    let elapsed = t.elapsed();
    let worst = cases.iter().max_by(|a, b| a.error.total_cmp(&b.error)).unwrap();
    outcome(
        cases.len() >= GRAD_SHAPES_MIN && worst.error < common::FD_RTOL && elapsed < GRAD_BUDGET,
        format!(
            "{} shapes, step {:e}, worst rel err {:.2e} ({}), {:.1}s",
            cases.len(),
            common::FD_STEP,
            worst.error,
            worst.name,
            elapsed.as_secs_f64()
        ),
    )
}

fn reservoir_uniformity() -> Outcome {
    let stat = common::reservoir_chi_square(CHI2_CAPACITY, CHI2_STREAM, CHI2_TRIALS, 1);
    outcome(
        stat < common::CHI2_99_P01,
        format!("chi-square {stat:.2} < {:.2} (99 df, alpha 0.01)", common::CHI2_99_P01),
    )
}

fn profile(class: u32, logits: Vec<f64>) -> ClassLogitProfile {
    ClassLogitProfile { class, mean_logits: logits, count: 1 }
}

fn mah_map(heads: usize, first: &[u32], aux: usize) -> HeadMap {
    let mut m = HeadMap::new(heads);
    m.assign_first_task(first).unwrap();
    m.place_aux(&(100..100 + aux as u32).collect::<Vec<_>>()).unwrap();
    m
}

fn mah_matching() -> Outcome {
    let mut m = mah_map(6, &[0, 1], 4);
    let single = assign_heads(&[profile(7, vec![9.0, 9.0, 0.1, 0.4, 0.3, 0.2])], &mut m).unwrap();
    let mut m = mah_map(6, &[0, 1], 4);
    let collision = assign_heads(
        &[profile(7, vec![0.0, 0.0, 5.0, 1.0, 0.0, 0.0]), profile(8, vec![0.0, 0.0, 3.0, 2.0, 0.0, 0.0])],
        &mut m,
    )
    .unwrap();
    let mut m = mah_map(5, &[0], 4);
    let tie = assign_heads(
        &[profile(4, vec![0.0, 1.0, 1.0, 0.0, 0.0]), profile(3, vec![0.0, 1.0, 1.0, 0.0, 0.0])],
        &mut m,
    )
    .unwrap();
    let examples = single == [(7, 3)] && collision == [(7, 2), (8, 3)] && tie == [(4, 2), (3, 1)];

    let mut r = common::rng(5);
    let heads: Vec<usize> = (4..12).collect();
    let mut agree = 0;
    for _ in 0..MAH_RANDOM_CASES {
        let scores: Vec<Vec<f64>> = (0..4).map(|_| (0..8).map(|_| r.gen_range(0..4) as f64).collect()).collect();
        let mut classes: Vec<u32> = (0..4).map(|_| r.gen_range(0..50)).collect();
        classes.sort_unstable();
        classes.dedup();
        if classes.len() < 4 {
            classes = vec![3, 1, 2, 0];
        }
        agree += usize::from(greedy_match(&scores, &heads, &classes) == common::greedy_oracle(&scores, &heads, &classes));
    }
    outcome(
        examples && agree == MAH_RANDOM_CASES,
        format!("worked examples {}, random 4x8 {agree}/{MAH_RANDOM_CASES} match the oracle", if examples { "ok" } else { "WRONG" }),
    )
}

fn bookkeeping(runs: &[CellRun]) -> Outcome {
    let expected = vec![8, 6, 4, 2, 0];
    let aux_runs: Vec<&CellRun> = runs.iter().filter(|r| r.setting != "vanilla").collect();
    let counts_ok = !aux_runs.is_empty() && aux_runs.iter().all(|r| r.aux_counts == expected);
    let mut cfg = synthetic_ablation_config(vec![0]);
    cfg.aux.synthetic.as_mut().unwrap().num_classes = 7;
    let msg = experiment::dry_run(&cfg).err().map(|e| e.to_string()).unwrap_or_default();
    let msg_ok = msg == "config error: auxiliary pool too small: need 8 aux classes, have 7";
    outcome(
        counts_ok && msg_ok,
        format!("aux counts {:?} in {} runs; short pool: {msg:?}", expected, aux_runs.len()),
    )
}

fn degeneracy() -> Outcome {
    let f = common::fixture(1);
    let first_task = |use_aux: bool| {
        let cfg = common::method(use_aux, false);
        let model = Model::new(f.backbone.clone(), cfg.seed, &mut rng(cfg.seed, Stream::ModelInit)).unwrap();
        let mut heads = HeadMap::new(6);
        heads.assign_first_task(&f.sequence.tasks[0].classes).unwrap();
        let mut state = RunState::new(model, heads, &cfg);
        let trace = train_task(&mut state, &f.sequence.tasks[0], &f.pool, &cfg).unwrap();
        (trace.iterations, state.model)
    };
    let empty_aux = first_task(false) == first_task(true);

    let single = TaskSequence { tasks: vec![f.sequence.tasks[0].clone()] };
    let mut one = f.backbone.clone();
    one.num_heads = 2;
    let empty = auxcl::AuxiliaryPool::empty(f.pool.source().clone().into());
    let a = run_sequence(&one, &common::method(false, false), &single, &empty, 5).unwrap();
    let b = run_sequence(&one, &common::method(true, false), &single, &empty, 5).unwrap();
    let empty_run = a.trace == b.trace && a.model == b.model;

    let vanilla = run_sequence(&f.backbone, &common::method(false, false), &f.sequence, &f.pool, 5).unwrap();
    let mut zero = common::method(true, false);
    zero.aux_batch = 0;
    let zero = run_sequence(&f.backbone, &zero, &f.sequence, &f.pool, 5).unwrap();
    let zero_bs = vanilla.trace.iterations == zero.trace.iterations && vanilla.model == zero.model;
    outcome(
        empty_aux && empty_run && zero_bs,
        format!(
            "empty aux set bit-identical: step {empty_aux}, run {empty_run}; aux batch 0 == vanilla: {zero_bs} ({} iterations)",
            vanilla.trace.iterations.len()
        ),
    )
}

/// Per seed, `[vanilla, aux, aux_mah]` values of `f`.
fn by_seed(runs: &[CellRun], f: impl Fn(&CellRun) -> Option<f64>) -> BTreeMap<u64, [Option<f64>; 3]> {
    let mut out: BTreeMap<u64, [Option<f64>; 3]> = BTreeMap::new();
    for r in runs {
        let slot = match r.setting.as_str() {
            "vanilla" => 0,
            "aux" => 1,
            "aux_mah" => 2,
            _ => continue,
        };
        out.entry(r.seed).or_default()[slot] = f(r);
    }
    out
}

fn means(table: &BTreeMap<u64, [Option<f64>; 3]>) -> Option<[f64; 3]> {
    let mut m = [0.0; 3];
    for row in table.values() {
        for (s, v) in m.iter_mut().zip(row) {
            *s += (*v)?;
        }
    }
    Some(m.map(|s| s / table.len() as f64))
}

fn ablation(runs: &[CellRun], elapsed: Duration) -> Outcome {
    let table = by_seed(runs, |r| Some(r.eval.class_il_final));
    let Some([v, a, m]) = means(&table) else {
        return outcome(false, "missing runs");
    };
    let wins = table.values().filter(|r| r[2] > r[0]).count();
    outcome(
        table.len() >= ABLATION_SEEDS.len() && v <= a && a <= m && wins >= ABLATION_MIN_WINS && elapsed < ABLATION_BUDGET,
        format!(
            "mean class-IL vanilla {:.2}% <= aux {:.2}% <= aux+mah {:.2}%; aux+mah beats vanilla in {wins}/{} seeds; {:.1}s",
            100.0 * v,
            100.0 * a,
            100.0 * m,
            table.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn loss_peaks(runs: &[CellRun]) -> Outcome {
    let table = by_seed(runs, |r| r.eval.mean_boundary_peak());
    let Some([v, a, m]) = means(&table) else {
        return outcome(false, "peaks missing (trace shorter than the window)");
    };
    outcome(
        table.len() >= ABLATION_SEEDS.len() && m < v,
        format!("mean boundary peak vanilla {v:.3}, aux {a:.3}, aux+mah {m:.3} over {} paired seeds", table.len()),
    )
}

fn determinism() -> Outcome {
    let run = |workers: usize| {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = synthetic_ablation_config(vec![0, 1]);
        cfg.workers = workers;
        experiment::run_experiment(&cfg, dir.path()).unwrap();
        std::fs::read(dir.path().join(experiment::METRICS_FILE)).unwrap()
    };
    let (a, b, c) = (run(1), run(1), run(2));
    outcome(
        !a.is_empty() && a == b && a == c,
        format!("{} bytes; repeat identical: {}; 2 workers identical: {}", a.len(), a == b, a == c),
    )
}

const CIFAR_CONFIG: &str = r#"
version = 1
seeds = [0]

[dataset]
kind = "cifar10"
path = "@C10"

[aux]
source = "cifar100"
path = "@C100"
labels = "coarse"

[sequence]
num_tasks = 5
classes_per_task = 2

[backbone]
kind = "small_cnn"
channels = [4, 8]

[training]
epochs_per_task = 50
task_batch = 32
aux_batch = 8
replay_batch = 8
augment = true

[grid]
methods = ["derpp"]
buffer_sizes = [200]
settings = ["aux_mah"]
"#;

fn cifar_mode() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let (c10, c100, out) = (root.path().join("c10"), root.path().join("c100"), root.path().join("out"));
    std::fs::create_dir_all(&c10).unwrap();
    std::fs::create_dir_all(&c100).unwrap();
    common::write_cifar10(&c10, 6, 4);
    common::write_cifar100(&c100, 10, 5);
    let text = CIFAR_CONFIG
        .replace("@C10", c10.to_str().unwrap())
        .replace("@C100", c100.to_str().unwrap());
    let t = Instant::now();
    let result = experiment::parse_config(&text).and_then(|cfg| experiment::run_experiment(&cfg, &out));
    match result {
        Ok(runs) => {
            let r = &runs[0];
            let ok = r.eval.class_il.len() == 5
                && r.aux_counts == [8, 6, 4, 2, 0]
                && r.buffer_labels.len() == 200
                && out.join(experiment::METRICS_FILE).exists();
            outcome(
                ok,
                format!(
                    "small CNN, 50 epochs/task, buffer 200, fixture of 60 images: class-IL {:.2}%, {} iterations, {:.1}s",
                    100.0 * r.eval.class_il_final,
                    r.trace.iterations.len(),
                    t.elapsed().as_secs_f64()
                ),
            )
        }
        Err(e) => outcome(false, format!("run failed: {e}")),
    }
}

fn main() -> ExitCode {
    let mut results: Vec<(&str, Outcome)> = vec![
        ("1 gradient check", gradient_check()),
        ("2 reservoir uniformity", reservoir_uniformity()),
        ("3 MAH matching", mah_matching()),
    ];
    let t = Instant::now();
    let runs = experiment::execute(&synthetic_ablation_config(ABLATION_SEEDS.to_vec()));
    let elapsed = t.elapsed();
    match runs {
        Ok(runs) => {
            results.push(("4 head bookkeeping", bookkeeping(&runs)));
            results.push(("5 degeneracy", degeneracy()));
            results.push(("6 directional ablation", ablation(&runs, elapsed)));
            results.push(("7 loss peaks", loss_peaks(&runs)));
        }
        Err(e) => {
            for name in ["4 head bookkeeping", "6 directional ablation", "7 loss peaks"] {
                results.push((name, outcome(false, format!("ablation runs failed: {e}"))));
            }
            results.push(("5 degeneracy", degeneracy()));
        }
    }
    results.push(("8 determinism", determinism()));
    results.push(("9 cifar-10 mode", cifar_mode()));
    results.sort_by_key(|r| r.0);

    let mut failed = 0;
    for (name, o) in &results {
        println!("[{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
