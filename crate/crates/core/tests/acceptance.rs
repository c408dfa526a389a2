//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line each, and exits nonzero if any failed.

use std::fs;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sptrim::data::{decode_features, generate_synthetic, load_features, save_features, Dataset, SyntheticSpec};
use sptrim::grouping::{channel_sparsity, GroupPartition};
use sptrim::model::{Model, ModelConfig, CONV1_B, CONV2_B, DENSE_B};
use sptrim::optim::{descent_monitor, sgd_step, BinConnectState, BinaryRole, SplitState};
use sptrim::pipeline::{
    self, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, toy_defaults, Checkpoint,
    Method, Stage, StageConfig, StageReport,
};
use sptrim::prox::{binary_project, prox_gl, prox_gl0};
use sptrim::Tensor;

const PROX_CASES: usize = 1000;
const PROX_TOL: f64 = 1e-6;
const PROX_BUDGET: Duration = Duration::from_secs(30);

const BINARY_CASES: usize = 500;
const BINARY_MAX_DIM: usize = 12;
const TIE_TOL: f64 = 1e-12;
const BINARY_BUDGET: Duration = Duration::from_secs(30);

const FD_SAMPLES: usize = 20;
const FD_EPS: f64 = 1e-6;
const FD_TOL: f64 = 1e-5;
const FD_BUDGET: Duration = Duration::from_secs(60);

const QUAD_DIM: usize = 20;
const QUAD_GROUPS: usize = 5;
const QUAD_ETA: f64 = 1e-3;
const QUAD_BETA: f64 = 1.0;
const QUAD_LAMBDA: f64 = 0.5;
const QUAD_ITERS: usize = 5000;
const DESCENT_TOL: f64 = 1e-10;
const RESIDUAL_TOL: f64 = 1e-4;
const STEP_TOL: f64 = 1e-8;
const UNSTABLE_ETA: f64 = 10.0;
const QUAD_BUDGET: Duration = Duration::from_secs(60);

const REDUCTION_STATES: usize = 100;

const BASELINE_MIN_ACC: f64 = 90.0;
const STAGE1_MIN_SPARSITY: f64 = 30.0;
const STAGE1_MAX_DROP: f64 = 15.0;
const STAGE2_MAX_DROP: f64 = 2.0;
const STAGE3_MAX_DROP: f64 = 3.0;
const REPLICATION_BUDGET: Duration = Duration::from_secs(600);

const GL_MAX_SPARSITY: f64 = 5.0;
const ORDERING_BUDGET: Duration = Duration::from_secs(900);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(elapsed: Duration, budget: Duration) -> bool {
    elapsed < budget
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn random_partition(rng: &mut ChaCha8Rng, max_groups: usize, max_dim: usize) -> GroupPartition {
    let groups = rng.random_range(1..=max_groups);
    let sizes: Vec<usize> = (0..groups).map(|_| rng.random_range(1..=max_dim)).collect();
    let len: usize = sizes.iter().sum();
    GroupPartition::contiguous(&[len], &sizes).unwrap()
}

fn gl_objective(y: &[f64], w: &[f64], lambda: f64) -> f64 {
    let fit: f64 = y.iter().zip(w).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 2.0;
    fit + lambda * y.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Minimizer of `0.5 ||y - w||^2 + lambda ||y||` for one group. Rotating any
/// candidate onto the ray through `w` keeps `||y||` and does not increase the
/// fit term, so the search runs over `y = t w / ||w||`, `t in [0, ||w||]`,
/// by golden-section on the full objective.
fn gl_group_oracle(w: &[f64], lambda: f64) -> Vec<f64> {
    let n = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 {
        return vec![0.0; w.len()];
    }
    let point = |t: f64| w.iter().map(|v| v * t / n).collect::<Vec<_>>();
    let f = |t: f64| gl_objective(&point(t), w, lambda);
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (0.0, n);
    for _ in 0..200 {
        let c = b - ratio * (b - a);
        let d = a + ratio * (b - a);
        if f(c) <= f(d) {
            b = d;
        } else {
            a = c;
        }
    }
    let t = (a + b) / 2.0;
    // The kink at zero is a candidate the interval search can only approach.
    if f(0.0) <= f(t) {
        point(0.0)
    } else {
        point(t)
    }
}

/// Keep-or-kill oracle for the group-l0 prox: zero costs `||w||^2 / 2`,
/// keeping costs `lambda`; ties go to zero.
fn gl0_group_oracle(w: &[f64], lambda: f64) -> Vec<f64> {
    let kill = w.iter().map(|v| v * v).sum::<f64>() / 2.0;
    if kill <= lambda {
        vec![0.0; w.len()]
    } else {
        w.to_vec()
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut max_gap: f64 = 0.0;
    let mut gl0_mismatch = 0;
    let mut local_violations = 0;
    for case in 0..PROX_CASES {
        let part = random_partition(&mut rng, 8, 6);
        let len = part.shape()[0];
        let spread = [0.1, 1.0, 3.0][case % 3];
        let w: Vec<f64> = (0..len).map(|_| rng.random_range(-spread..spread)).collect();
        let lambda = rng.random_range(0.0..2.0 * spread);
        let wt = Tensor::new(&[len], w.clone()).unwrap();

        let got = prox_gl(&wt, &part, lambda).unwrap();
        let got0 = prox_gl0(&wt, &part, lambda).unwrap();
        for idx in part.groups() {
            let wg: Vec<f64> = idx.iter().map(|&i| w[i]).collect();
            let yg: Vec<f64> = idx.iter().map(|&i| got.data()[i]).collect();
            for (a, b) in gl_group_oracle(&wg, lambda).iter().zip(&yg) {
                max_gap = max_gap.max((a - b).abs());
            }
            // Local optimality of the returned point against random nudges.
            let base = gl_objective(&yg, &wg, lambda);
            for _ in 0..4 {
                let nudged: Vec<f64> = yg.iter().map(|v| v + rng.random_range(-1e-4..1e-4)).collect();
                if gl_objective(&nudged, &wg, lambda) < base - 1e-15 {
                    local_violations += 1;
                }
            }
            let y0: Vec<f64> = idx.iter().map(|&i| got0.data()[i]).collect();
            if gl0_group_oracle(&wg, lambda) != y0 {
                gl0_mismatch += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = max_gap < PROX_TOL && gl0_mismatch == 0 && local_violations == 0 && within(elapsed, PROX_BUDGET);
    outcome(
        pass,
        format!(
            "prox oracle: {PROX_CASES} cases, max |gl - oracle| = {max_gap:.2e} (< {PROX_TOL:e}), \
             gl0 mismatches = {gl0_mismatch}, nudge improvements = {local_violations}, {}",
            secs(elapsed)
        ),
    )
}

/// Best `a * s` over all sign vectors, with `a = max(0, <s, w>) / D`.
fn binary_oracle_distance(w: &[f64]) -> f64 {
    let d = w.len();
    let mut best = f64::INFINITY;
    for bits in 0u32..(1 << d) {
        let s: Vec<f64> = (0..d).map(|j| if bits >> j & 1 == 1 { -1.0 } else { 1.0 }).collect();
        let a = (s.iter().zip(w).map(|(x, y)| x * y).sum::<f64>() / d as f64).max(0.0);
        let dist = s.iter().zip(w).map(|(x, y)| (y - a * x).powi(2)).sum::<f64>().sqrt();
        best = best.min(dist);
    }
    best
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = f64::NEG_INFINITY;
    let mut failures = 0;
    for _ in 0..BINARY_CASES {
        let d = rng.random_range(1..=BINARY_MAX_DIM);
        let w: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let proj = binary_project(&Tensor::vector(&w)).unwrap().reconstruct();
        let dist = proj.data().iter().zip(&w).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let gap = dist - binary_oracle_distance(&w);
        worst = worst.max(gap);
        if gap > TIE_TOL {
            failures += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        failures == 0 && within(elapsed, BINARY_BUDGET),
        format!(
            "binary projection: {BINARY_CASES} cases, worst excess distance = {worst:.2e} (tie tol {TIE_TOL:e}), \
             failures = {failures}, {}",
            secs(elapsed)
        ),
    )
}

fn toy_data() -> Dataset {
    generate_synthetic(&SyntheticSpec::toy(0)).unwrap()
}

fn criterion_3(ds: &Dataset) -> Outcome {
    let start = Instant::now();
    let mut model = Model::build(ModelConfig::toy()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut params = model.params().to_vec();
    for i in [CONV1_B, CONV2_B, DENSE_B] {
        let n = params[i].len();
        params[i] = Tensor::vector(&(0..n).map(|_| rng.random_range(-0.1..0.1)).collect::<Vec<_>>());
    }
    model.set_params(params).unwrap();
    let mut worst: f64 = 0.0;
    for (k, &i) in ds.train_indices().iter().take(3).enumerate() {
        let ex = ds.example(i);
        let err = model.gradient_check(&ex.input, ex.label, FD_EPS, FD_SAMPLES, k as u64).unwrap();
        worst = worst.max(err);
    }
    let elapsed = start.elapsed();
    outcome(
        worst < FD_TOL && within(elapsed, FD_BUDGET),
        format!(
            "gradient check: toy model, {FD_SAMPLES} coords/tensor on 3 examples, max rel err = {worst:.2e} \
             (< {FD_TOL:e}), {}",
            secs(elapsed)
        ),
    )
}

/// `0.5 (w - c)^T H (w - c)` with `H = 5 I + B^T B / n`.
struct Quadratic {
    h: Vec<f64>,
    c: Vec<f64>,
}

impl Quadratic {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let n = QUAD_DIM;
        let b: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut h = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let btb: f64 = (0..n).map(|k| b[k * n + i] * b[k * n + j]).sum();
                h[i * n + j] = btb / n as f64 + if i == j { 5.0 } else { 0.0 };
            }
        }
        // Two strong groups, three weak ones that the penalty should remove.
        let per = n / QUAD_GROUPS;
        let c = (0..n)
            .map(|i| {
                let scale = if i / per < 2 { 2.0 } else { 0.02 };
                scale * rng.random_range(-1.0..1.0)
            })
            .collect();
        Self { h, c }
    }

    fn loss(&self, w: &Tensor) -> f64 {
        let d: Vec<f64> = w.data().iter().zip(&self.c).map(|(a, b)| a - b).collect();
        let n = QUAD_DIM;
        (0..n).map(|i| d[i] * (0..n).map(|j| self.h[i * n + j] * d[j]).sum::<f64>()).sum::<f64>() / 2.0
    }

    fn grad(&self, w: &Tensor) -> Tensor {
        let d: Vec<f64> = w.data().iter().zip(&self.c).map(|(a, b)| a - b).collect();
        let n = QUAD_DIM;
        Tensor::vector(&(0..n).map(|i| (0..n).map(|j| self.h[i * n + j] * d[j]).sum()).collect::<Vec<_>>())
    }
}

fn quad_run(q: &Quadratic, w0: &Tensor, eta: f64, iters: usize) -> (Vec<f64>, SplitState, SplitState) {
    let part = GroupPartition::contiguous(&[QUAD_DIM], &[QUAD_DIM / QUAD_GROUPS; QUAD_GROUPS]).unwrap();
    let mut state = SplitState::new(vec![w0.clone()], vec![Some(part)], eta, QUAD_BETA, QUAD_LAMBDA).unwrap();
    let mut history = vec![state.lagrangian(q.loss(&state.w()[0])).unwrap()];
    let mut prev = state.clone();
    for _ in 0..iters {
        prev = state.clone();
        let g = q.grad(&state.w()[0]);
        state.rgsm_step(&[g]).unwrap();
        history.push(state.lagrangian(q.loss(&state.w()[0])).unwrap());
    }
    (history, prev, state)
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let q = Quadratic::new(&mut rng);
    let w0 = Tensor::vector(&(0..QUAD_DIM).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>());

    let (history, prev, state) = quad_run(&q, &w0, QUAD_ETA, QUAD_ITERS);
    let violations = descent_monitor(&history, DESCENT_TOL);
    let res = state.equilibrium_residual(&[q.grad(&state.w()[0])]).unwrap();
    let step = state.iterate_distance(&prev).unwrap();
    let zero_groups = state.u()[0]
        .as_ref()
        .unwrap()
        .data()
        .chunks(QUAD_DIM / QUAD_GROUPS)
        .filter(|g| g.iter().all(|&v| v == 0.0))
        .count();

    let (unstable, _, _) = quad_run(&q, &w0, UNSTABLE_ETA, 50);
    let control = descent_monitor(&unstable, DESCENT_TOL);
    let elapsed = start.elapsed();
    let pass = violations == 0
        && res.r_prox < RESIDUAL_TOL
        && res.r_grad < RESIDUAL_TOL
        && step < STEP_TOL
        && control >= 1
        && within(elapsed, QUAD_BUDGET);
    outcome(
        pass,
        format!(
            "descent diagnostics: {QUAD_ITERS} iters at eta={QUAD_ETA}, violations = {violations}, \
             r_prox = {:.2e}, r_grad = {:.2e} (< {RESIDUAL_TOL:e}), last step = {step:.2e} (< {STEP_TOL:e}), \
             zero groups = {zero_groups}/{QUAD_GROUPS}; eta={UNSTABLE_ETA} control violations = {control}, {}",
            res.r_prox,
            res.r_grad,
            secs(elapsed)
        ),
    )
}

fn bits_equal(a: &[Tensor], b: &[Tensor]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.shape() == y.shape() && x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
        })
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut failures = [0usize; 3];
    for _ in 0..REDUCTION_STATES {
        let parts: Vec<Option<GroupPartition>> = (0..3)
            .map(|_| rng.random_bool(0.6).then(|| random_partition(&mut rng, 6, 5)))
            .collect();
        let shapes: Vec<usize> = parts
            .iter()
            .map(|p| p.as_ref().map_or_else(|| rng.random_range(1..10), |p| p.shape()[0]))
            .collect();
        let mut tensor = |n: usize| Tensor::vector(&(0..n).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<_>>());
        let w: Vec<Tensor> = shapes.iter().map(|&n| tensor(n)).collect();
        let g: Vec<Tensor> = shapes.iter().map(|&n| tensor(n)).collect();
        let eta = rng.random_range(1e-4..1.0);
        let beta = rng.random_range(0.0..5.0);

        let mut plain = w.clone();
        sgd_step(&mut plain, &g, eta).unwrap();

        let mut split = SplitState::new(w.clone(), parts.clone(), eta, beta, 0.0).unwrap();
        split.rgsm_step(&g).unwrap();
        if !bits_equal(split.w(), &plain) {
            failures[0] += 1;
        }

        let mut gsbc = SplitState::new(w.clone(), parts.clone(), eta, 0.0, 0.0).unwrap();
        if !bits_equal(&gsbc.prox_point().unwrap(), &w) {
            failures[2] += 1;
        }
        gsbc.gsbc_step(&g).unwrap();
        if !bits_equal(gsbc.w(), &plain) {
            failures[2] += 1;
        }

        let roles: Vec<BinaryRole> = shapes
            .iter()
            .map(|&n| if rng.random_bool(0.3) { BinaryRole::Float } else { BinaryRole::binary(n) })
            .collect();
        let mut bc = BinConnectState::new(w.clone(), roles.clone(), eta, 0.0).unwrap();
        let mut blended = BinConnectState::new(w.clone(), roles, eta, 0.0).unwrap();
        bc.bc_step(&g).unwrap();
        blended.blended_bc_step(&g).unwrap();
        if !bits_equal(bc.float_weights(), blended.float_weights()) || !bits_equal(bc.weights(), blended.weights()) {
            failures[1] += 1;
        }
    }
    outcome(
        failures == [0, 0, 0],
        format!(
            "reduction identities over {REDUCTION_STATES} random states: rgsm(lambda=0) vs sgd mismatches = {}, \
             blended(rho=0) vs bc mismatches = {}, gsbc(lambda=0) vs sgd mismatches = {}",
            failures[0], failures[1], failures[2]
        ),
    )
}

struct Replication {
    baseline: StageReport,
    checkpoints: [Checkpoint; 3],
    reports: [StageReport; 3],
}

fn criterion_6(ds: &Dataset) -> (Outcome, Replication) {
    let start = Instant::now();
    let model_cfg = ModelConfig::toy();
    let (_, baseline) = pipeline::train_baseline(&toy_defaults(Stage::Baseline, None), &model_cfg, ds).unwrap();
    let c1 = toy_defaults(Stage::I, Some(Method::Rgsm));
    let c2 = toy_defaults(Stage::II, None);
    let c3 = toy_defaults(Stage::III, Some(Method::BlendedBc));
    let run = pipeline::run_pipeline(&model_cfg, [&c1, &c2, &c3], ds).unwrap();
    let elapsed = start.elapsed();

    let base = baseline.final_accuracy();
    let [r1, r2, r3] = &run.reports;
    let checks = [
        base >= BASELINE_MIN_ACC,
        r1.final_sparsity() >= STAGE1_MIN_SPARSITY && r1.final_accuracy() >= base - STAGE1_MAX_DROP,
        r2.final_accuracy() >= base - STAGE2_MAX_DROP
            && r2.rows.iter().all(|r| r.channel_sparsity == r1.final_sparsity()),
        r3.final_accuracy() >= r2.final_accuracy() - STAGE3_MAX_DROP,
        within(elapsed, REPLICATION_BUDGET),
    ];
    let o = outcome(
        checks.iter().all(|&c| c),
        format!(
            "toy replication: baseline {base:.2}% (>= {BASELINE_MIN_ACC}) | stage I rgsm lambda={} \
             {:.2}% at {:.1}% sparsity (>= {STAGE1_MIN_SPARSITY}%, drop <= {STAGE1_MAX_DROP}) | stage II {:.2}% \
             (drop <= {STAGE2_MAX_DROP}) | stage III {:.2}% (drop vs II <= {STAGE3_MAX_DROP}) | {} \
             [checks a-d, time: {checks:?}]",
            c1.lambda,
            r1.final_accuracy(),
            r1.final_sparsity(),
            r2.final_accuracy(),
            r3.final_accuracy(),
            secs(elapsed),
        ),
    );
    (
        o,
        Replication {
            baseline,
            checkpoints: run.checkpoints,
            reports: run.reports,
        },
    )
}

fn criterion_7(ds: &Dataset, rep: &Replication) -> Outcome {
    let start = Instant::now();
    let model_cfg = ModelConfig::toy();
    let rgsm = rep.reports[0].final_sparsity();
    let gsbc_cfg = StageConfig {
        diagnostics: false,
        ..toy_defaults(Stage::I, Some(Method::Gsbc))
    };
    let (_, gsbc) = pipeline::run_stage1(&gsbc_cfg, &model_cfg, ds).unwrap();
    let mut gl = Vec::new();
    for k in 1..=10 {
        let cfg = StageConfig {
            diagnostics: false,
            ..StageConfig {
                mu: k as f64 / 10.0,
                ..toy_defaults(Stage::I, Some(Method::Gl))
            }
        };
        let (_, report) = pipeline::run_stage1(&cfg, &model_cfg, ds).unwrap();
        gl.push((cfg.mu, report.final_sparsity(), report.final_accuracy()));
    }
    let elapsed = start.elapsed();
    let gl_max = gl.iter().map(|g| g.1).fold(0.0, f64::max);
    let pass = rgsm > gsbc.final_sparsity() && gl_max < GL_MAX_SPARSITY && within(elapsed, ORDERING_BUDGET);
    let sweep: Vec<String> = gl.iter().map(|(m, s, a)| format!("mu={m:.1}:{s:.1}%/{a:.1}%acc")).collect();
    outcome(
        pass,
        format!(
            "method ordering (lambda={}): rgsm {rgsm:.1}% > gsbc {:.1}% sparsity; gl sweep max {gl_max:.1}% \
             (< {GL_MAX_SPARSITY}) [{}]; {}",
            gsbc_cfg.lambda,
            gsbc.final_sparsity(),
            sweep.join(", "),
            secs(elapsed)
        ),
    )
}

fn criterion_8() -> Outcome {
    let shape = [2, 3, 64, 4];
    let part = GroupPartition::along_axis(&shape, 2).unwrap();
    let pruned = |zeros: usize| {
        let mut w = Tensor::filled(&shape, 0.5);
        for idx in part.groups().take(zeros) {
            for &i in idx {
                w.data_mut()[i] = 0.0;
            }
        }
        channel_sparsity(&w, &part).unwrap()
    };
    let (a, b) = (pruned(33), pruned(36));
    outcome(
        a == 51.6 && b == 56.3,
        format!("sparsity arithmetic: 33/64 -> {a}, 36/64 -> {b} (expected 51.6, 56.3)"),
    )
}

fn cli_pipeline(dir: &std::path::Path) -> Vec<u8> {
    let status = Command::new(env!("CARGO_BIN_EXE_sptrim"))
        .args([
            "pipeline",
            "--per-class",
            "60",
            "--epochs",
            "6",
            "--lambda",
            "0.05",
            "--stage2-epochs",
            "2",
            "--stage3-epochs",
            "2",
            "--seed",
            "7",
            "--no-diagnostics",
            "--out",
        ])
        .arg(dir)
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    fs::read(dir.join("summary.json")).unwrap()
}

fn criterion_9(ds: &Dataset, rep: &Replication) -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut notes = Vec::new();

    let feat = tmp.path().join("features.bin");
    save_features(ds, &feat).unwrap();
    let loaded = load_features(&feat).unwrap();
    let features_ok = loaded.len() == ds.len()
        && loaded
            .examples()
            .iter()
            .zip(ds.examples())
            .all(|(a, b)| a.label == b.label && bits_equal(std::slice::from_ref(&a.input), std::slice::from_ref(&b.input)))
        && decode_features(&fs::read(&feat).unwrap()).is_ok();
    notes.push(format!("features {}", if features_ok { "exact" } else { "MISMATCH" }));

    let mut ckpt_ok = true;
    for (i, c) in rep.checkpoints.iter().enumerate() {
        let path = tmp.path().join(format!("stage{}.ckpt", i + 1));
        save_checkpoint(&path, c).unwrap();
        let back = load_checkpoint(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        ckpt_ok &= back.stage == c.stage
            && back == *c
            && bits_equal(back.model.params(), c.model.params())
            && encode_checkpoint(&back).unwrap() == bytes
            && decode_checkpoint(&bytes).is_ok();
    }
    notes.push(format!("checkpoints {}", if ckpt_ok { "exact" } else { "MISMATCH" }));

    let masks: Vec<_> = rep.checkpoints.iter().map(|c| c.model.mask().cloned()).collect();
    let mask_ok = masks[0].is_some() && masks.iter().all(|m| *m == masks[0]) && rep.reports[0].mask == rep.reports[2].mask;
    notes.push(format!(
        "mask {} across stages ({} of {} channels pruned)",
        if mask_ok { "identical" } else { "CHANGED" },
        masks[0].as_ref().map_or(0, |m| m.zeros()),
        masks[0].as_ref().map_or(0, |m| m.len())
    ));

    let first = cli_pipeline(&tmp.path().join("run-a"));
    let second = cli_pipeline(&tmp.path().join("run-b"));
    let runs_ok = first == second && !first.is_empty();
    notes.push(format!("repeat cli runs {}", if runs_ok { "identical" } else { "DIFFER" }));

    outcome(
        features_ok && ckpt_ok && mask_ok && runs_ok,
        format!("persistence: {}", notes.join(", ")),
    )
}

fn main() {
    // `cargo test` passes harness flags such as `--nocapture`; a name filter
    // that matches nothing here skips the suite.
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return;
    }

    let ds = toy_data();
    let mut results = vec![criterion_1(), criterion_2(), criterion_3(&ds), criterion_4(), criterion_5()];
    let (c6, rep) = criterion_6(&ds);
    results.push(c6);
    results.push(criterion_7(&ds, &rep));
    results.push(criterion_8());
    results.push(criterion_9(&ds, &rep));

    println!("baseline curve: {:?}", rep.baseline.rows.iter().map(|r| r.val_accuracy).collect::<Vec<_>>());
    let mut failed = 0;
    for (i, r) in results.iter().enumerate() {
        println!("[{}] criterion {}: {}", if r.pass { "PASS" } else { "FAIL" }, i + 1, r.detail);
        failed += usize::from(!r.pass);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
