//! End-to-end acceptance battery for the whole laboratory.
//!
//! Eight independent criteria run in sequence inside one test so their
//! pass/fail lines print in a stable order and shared wall-clock budgets
//! mean what they say. Each criterion prints exactly one line; the test
//! fails at the end if any criterion failed.

use redi_lab::cli::{self, RunOutcome};
use redi_lab::corpus::{self, CurationConfig};
use redi_lab::evalkit::{self, CorrectnessMatrix, EvalConfig};
use redi_lab::gradcheck::{self, GradCheckConfig};
use redi_lab::objectives::{
    beta_limit_gap, dpo_loss, redi_loss, sft_norm_loss, simpo_loss, symm_loss, Objective,
    PairLogProbs,
};
use redi_lab::optim::{ConvergenceProbe, OptimizerConfig, OptimizerState, Schedule};
use redi_lab::policy::{PolicyConfig, SampleConfig, SeqLogProb};
use redi_lab::task::{self, TeacherConfig};
use redi_lab::trainer::{self, CollapseConfig, RunConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::{E, LN_2};
use std::path::{Path, PathBuf};
use std::time::Instant;

struct Criterion {
    name: &'static str,
    passed: bool,
    detail: String,
}

#[test]
fn acceptance_criteria() {
    let mut results: Vec<Criterion> = Vec::new();
    let mut run = |name: &'static str, outcome: (bool, String)| {
        results.push(Criterion {
            name,
            passed: outcome.0,
            detail: outcome.1,
        });
    };

    run("gradients match finite differences", criterion_gradients());
    run("analytic anchor values", criterion_anchors());
    run("small-beta equivalence gap", criterion_beta_gap());
    run("schedule exactness and probe scaling", criterion_schedule_and_probe());
    run("two-stage refinement improves pass@1", criterion_end_to_end());
    run("collapse separates the objectives", criterion_collapse());
    run("pass@k calculus", criterion_pass_at_k());
    run("same-seed preset reruns are byte-identical", criterion_determinism());

    let mut all_ok = true;
    for (i, c) in results.iter().enumerate() {
        let status = if c.passed { "PASS" } else { "FAIL" };
        println!("criterion {} ({}): {} [{}]", i + 1, c.name, status, c.detail);
        all_ok &= c.passed;
    }
    assert!(all_ok, "at least one acceptance criterion failed; see the lines above");
}

// -------------------------------------------------------------------
// Criterion 1: analytic gradients of every objective agree with central
// finite differences to 1e-6 relative error, 100 random instances per
// objective, within a two-minute budget.
// -------------------------------------------------------------------

fn criterion_gradients() -> (bool, String) {
    let started = Instant::now();
    let cfg = GradCheckConfig {
        instances: 100,
        seed: 1,
        ..GradCheckConfig::default()
    };
    let report = match gradcheck::run(&cfg, 1e-6) {
        Ok(r) => r,
        Err(e) => return (false, format!("gradient check errored: {e}")),
    };
    let elapsed = started.elapsed();
    let in_budget = elapsed.as_secs_f64() < 120.0;
    (
        report.passed && in_budget,
        format!(
            "max rel err {:.3e} over 5 objectives x 100 instances in {:.1?}",
            report.max_rel_err, elapsed
        ),
    )
}

// -------------------------------------------------------------------
// Criterion 2: closed-form anchor values. A pairwise ranking loss with
// the policy at its reference is ln 2 for every beta; the margin loss at
// zero reward gap with beta 2, gamma 1 is ln(1 + e); alpha 1 reproduces
// the symmetric loss bitwise; alpha 0 reproduces length-normalized SFT.
// -------------------------------------------------------------------

fn slp(total: f64, length: usize) -> SeqLogProb {
    SeqLogProb {
        per_token: vec![total / length as f64; length],
        total,
        length,
        normalized: total / length as f64,
    }
}

fn make_pair(ct: f64, cl: usize, rt: f64, rl: usize) -> PairLogProbs {
    PairLogProbs {
        chosen: slp(ct, cl),
        rejected: slp(rt, rl),
        chosen_ref: None,
        rejected_ref: None,
    }
}

fn criterion_anchors() -> (bool, String) {
    let tol = 1e-12;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;

    for _ in 0..20 {
        let cl = rng.gen_range(2..12);
        let rl = rng.gen_range(2..12);
        let ct = -rng.gen_range(0.2..2.5) * cl as f64;
        let rt = -rng.gen_range(0.2..2.5) * rl as f64;

        // Ranking loss at the reference point, for every documented beta.
        let mut pair = make_pair(ct, cl, rt, rl);
        pair.chosen_ref = Some(ct);
        pair.rejected_ref = Some(rt);
        for beta in [1e-3, 1e-2, 1e-1] {
            match dpo_loss(&pair, beta) {
                Ok(l) => worst = worst.max((l.loss - LN_2).abs()),
                Err(e) => return (false, format!("ranking loss errored: {e}")),
            }
        }

        // Margin loss at zero reward gap: identical normalized log-probs.
        let norm = -rng.gen_range(0.2..2.5);
        let balanced = make_pair(norm * cl as f64, cl, norm * rl as f64, rl);
        match simpo_loss(&balanced, 2.0, 1.0) {
            Ok(l) => worst = worst.max((l.loss - (1.0 + E).ln()).abs()),
            Err(e) => return (false, format!("margin loss errored: {e}")),
        }

        // Full-weight asymmetric loss is the symmetric loss, bitwise.
        let plain = make_pair(ct, cl, rt, rl);
        let sym = symm_loss(&plain);
        let redi1 = match redi_loss(&plain, 1.0) {
            Ok(l) => l,
            Err(e) => return (false, format!("alpha=1 loss errored: {e}")),
        };
        if sym.loss.to_bits() != redi1.loss.to_bits()
            || sym.chosen_weight.to_bits() != redi1.chosen_weight.to_bits()
            || sym.rejected_weight.to_bits() != redi1.rejected_weight.to_bits()
        {
            return (false, "alpha=1 is not bitwise the symmetric loss".into());
        }

        // Zero-weight asymmetric loss is length-normalized SFT exactly.
        let redi0 = match redi_loss(&plain, 0.0) {
            Ok(l) => l,
            Err(e) => return (false, format!("alpha=0 loss errored: {e}")),
        };
        let sft = sft_norm_loss(&plain.chosen);
        if redi0.loss != sft.loss
            || redi0.chosen_weight != sft.chosen_weight
            || redi0.rejected_weight != 0.0
        {
            return (false, "alpha=0 is not exactly length-normalized SFT".into());
        }
    }

    (
        worst <= tol,
        format!("worst anchor deviation {worst:.3e} (tolerance {tol:.0e})"),
    )
}

// -------------------------------------------------------------------
// Criterion 3: in the small-beta regime the margin objective's update
// direction approaches a rescaled symmetric update. The gap must shrink
// linearly (halving beta halves it, ratio within [1.8, 2.2]) and be
// below 1e-6 * c1 at beta = 1e-8, over 50 random pairs and both gammas,
// inside a one-minute budget.
// -------------------------------------------------------------------

fn criterion_beta_gap() -> (bool, String) {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let c1 = 1.0;
    let mut worst_ratio_dev: f64 = 0.0;
    let mut worst_limit: f64 = 0.0;

    for _ in 0..50 {
        let cl = rng.gen_range(2..12);
        let rl = rng.gen_range(2..12);
        let ct = -rng.gen_range(0.2..2.5) * cl as f64;
        let rt = -rng.gen_range(0.2..2.5) * rl as f64;
        let pair = make_pair(ct, cl, rt, rl);
        for gamma in [0.0, 1.0] {
            let g_two = match beta_limit_gap(&pair, 0.02, gamma, c1) {
                Ok(v) => v,
                Err(e) => return (false, format!("gap errored: {e}")),
            };
            let g_one = beta_limit_gap(&pair, 0.01, gamma, c1).expect("same inputs");
            if g_one > 0.0 {
                let ratio = g_two / g_one;
                if !(1.8..=2.2).contains(&ratio) {
                    return (
                        false,
                        format!("halving ratio {ratio:.4} outside [1.8, 2.2]"),
                    );
                }
                worst_ratio_dev = worst_ratio_dev.max((ratio - 2.0).abs());
            }
            let tiny = beta_limit_gap(&pair, 1e-8, gamma, c1).expect("same inputs");
            worst_limit = worst_limit.max(tiny);
        }
    }

    let elapsed = started.elapsed();
    let ok = worst_limit < 1e-6 * c1 && elapsed.as_secs_f64() < 60.0;
    (
        ok,
        format!(
            "worst halving deviation {worst_ratio_dev:.4}, gap at beta=1e-8 {worst_limit:.3e}, {:.1?}",
            elapsed
        ),
    )
}

// -------------------------------------------------------------------
// Criterion 4: the schedule matches an independently written closed form
// at every step of a 1000-step run, and the convergence probe shows the
// optimizer's time-to-epsilon growing like 1/epsilon (within a factor of
// two) on a geometric-spectrum quadratic.
// -------------------------------------------------------------------

fn criterion_schedule_and_probe() -> (bool, String) {
    // Exhaustive schedule comparison.
    let schedule = Schedule {
        total_steps: 1000,
        warmup_steps: 100,
        eta_max: 1e-6,
        eta_min: 1e-7,
    };
    let reference = |step: u64| -> f64 {
        // Deliberately written as interpolations rather than offsets.
        let (k, w) = (1000f64, 100f64);
        let (hi, lo) = (1e-6f64, 1e-7f64);
        if step as f64 <= w {
            let t = step as f64 / w;
            lo * (1.0 - t) + hi * t
        } else {
            let t = (step as f64 - w) / (k - w);
            hi * (1.0 - t) + lo * t
        }
    };
    for step in 0..=1000u64 {
        let got = match schedule.lr_at(step) {
            Ok(v) => v,
            Err(e) => return (false, format!("lr_at({step}) errored: {e}")),
        };
        let want = reference(step);
        let rel = (got - want).abs() / want.abs().max(1e-300);
        if rel > 1e-12 {
            return (
                false,
                format!("lr_at({step}) = {got:.17e}, reference {want:.17e}"),
            );
        }
    }
    if schedule.lr_at(1001).is_ok() {
        return (false, "lr_at past the end of the schedule did not error".into());
    }
    let degenerate = Schedule {
        total_steps: 0,
        warmup_steps: 0,
        eta_max: 3e-4,
        eta_min: 3e-4,
    };
    match degenerate.lr_at(0) {
        Ok(v) if v == 3e-4 => {}
        other => return (false, format!("zero-length schedule gave {other:?}")),
    }

    // Probe scaling on a quadratic with eigenvalues 2^-j and energy
    // balanced so every scale contributes equally to the gradient norm.
    let dims = 13usize;
    let constant = Schedule {
        total_steps: 1_000_000,
        warmup_steps: 0,
        eta_max: 0.05,
        eta_min: 0.05,
    };
    let mut theta: Vec<f64> = (0..dims).map(|j| 2f64.powi(j as i32).sqrt()).collect();
    let lambdas: Vec<f64> = (0..dims).map(|j| 2f64.powi(-(j as i32))).collect();
    let mut opt = match OptimizerState::new(OptimizerConfig::plain_gd(), dims) {
        Ok(o) => o,
        Err(e) => return (false, format!("optimizer init errored: {e}")),
    };
    let mut probe = ConvergenceProbe::default();
    let mut hit_coarse: Option<u64> = None;
    let mut hit_fine: Option<u64> = None;
    for step in 0..200_000u64 {
        let grad: Vec<f64> = theta.iter().zip(&lambdas).map(|(t, l)| l * t).collect();
        probe.observe(grad.iter().map(|g| g * g).sum());
        if hit_coarse.is_none() && probe.converged(1e-2) {
            hit_coarse = Some(step);
        }
        if hit_fine.is_none() && probe.converged(1e-3) {
            hit_fine = Some(step);
            break;
        }
        let lr = constant.lr_at(step).expect("inside the schedule");
        if let Err(e) = opt.step(&mut theta, &grad, lr) {
            return (false, format!("descent step errored: {e}"));
        }
    }
    let (Some(coarse), Some(fine)) = (hit_coarse, hit_fine) else {
        return (false, "probe never reached the target thresholds".into());
    };
    // 10x smaller epsilon should take about 10x the steps; accept [5, 20].
    let ratio = fine as f64 / coarse as f64;
    let ok = (5.0..=20.0).contains(&ratio);
    (
        ok,
        format!("schedule exact over 1001 steps; T(1e-3)/T(1e-2) = {fine}/{coarse} = {ratio:.2}"),
    )
}

// -------------------------------------------------------------------
// Criterion 5: full pipeline value check. On 500 training and 100
// held-out problems (chain length 1, modulus 10), an undertrained SFT
// model refined with the asymmetric objective (alpha 0.8) must strictly
// improve pass@1 at 4 samples without giving up more than 0.02 of
// pass@4, inside a ten-minute budget.
// -------------------------------------------------------------------

fn pass_rates(ckpt: &Path, problems: &[task::Problem]) -> Result<(f64, f64), String> {
    let params = redi_lab::policy::load_checkpoint(ckpt).map_err(|e| e.to_string())?;
    let cfg = EvalConfig {
        samples: 4,
        ks: vec![1, 4],
        decode: SampleConfig {
            max_len: 16,
            ..SampleConfig::default()
        },
        seed: 7070,
        think_first: true,
    };
    let (_, report) = evalkit::evaluate(&params, problems, &cfg).map_err(|e| e.to_string())?;
    let get = |k: usize| {
        report
            .pass_at_k
            .iter()
            .find(|p| p.k == k)
            .map(|p| p.value)
            .ok_or_else(|| format!("missing pass@{k}"))
    };
    Ok((get(1)?, get(4)?))
}

fn criterion_end_to_end() -> (bool, String) {
    let started = Instant::now();
    let dir = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => return (false, format!("tempdir failed: {e}")),
    };
    let data = dir.path().join("data");
    if let Err(e) = std::fs::create_dir_all(&data) {
        return (false, format!("mkdir failed: {e}"));
    }

    let train_problems = match task::generate_task_set(101, 500, 1, 10) {
        Ok(p) => p,
        Err(e) => return (false, format!("train set generation failed: {e}")),
    };
    let eval_problems = match task::generate_task_set(202, 100, 1, 10) {
        Ok(p) => p,
        Err(e) => return (false, format!("eval set generation failed: {e}")),
    };
    let teacher = TeacherConfig {
        per_step_error_prob: 0.3,
        max_attempts: 4,
        seed: 303,
    };
    let records = match corpus::records_from_teacher(&train_problems, &teacher) {
        Ok(r) => r,
        Err(e) => return (false, format!("teacher failed: {e}")),
    };
    let curated = match corpus::curate(&records, &CurationConfig::default()) {
        Ok(c) => c,
        Err(e) => return (false, format!("curation failed: {e}")),
    };
    let sft_path = data.join("sft.jsonl");
    let pref_path = data.join("pref.jsonl");
    if let Err(e) = corpus::save_sft_jsonl(&sft_path, &curated.d_sft)
        .and_then(|_| corpus::save_pref_jsonl(&pref_path, &curated.d_pref))
    {
        return (false, format!("dataset save failed: {e}"));
    }

    let base = RunConfig {
        stage: 1,
        objective: Objective::Sft {
            length_normalized: false,
        },
        batch_size: 32,
        epochs: 24,
        seed: 404,
        eval_every: 0,
        eval_samples: 4,
        eta_max: 0.03,
        eta_min: 0.0,
        warmup_frac: 0.05,
        policy: PolicyConfig::default(),
        optimizer: OptimizerConfig::default(),
        decode: SampleConfig {
            max_len: 16,
            ..SampleConfig::default()
        },
        think_first: true,
        collapse: CollapseConfig::default(),
        train_data: sft_path,
        eval_problems: None,
        init_checkpoint: None,
        reference_checkpoint: None,
        out_dir: dir.path().join("stage1"),
        resume: false,
    };
    let s1 = match trainer::run_stage1(&base) {
        Ok(s) => s,
        Err(e) => return (false, format!("stage 1 failed: {e}")),
    };
    let (p1, p4) = match pass_rates(&s1.final_checkpoint, &eval_problems) {
        Ok(v) => v,
        Err(e) => return (false, format!("stage-1 eval failed: {e}")),
    };

    let stage2 = RunConfig {
        stage: 2,
        objective: Objective::Redi { alpha: 0.8 },
        batch_size: 16,
        epochs: 8,
        eta_max: 3e-4,
        warmup_frac: 0.0,
        train_data: pref_path,
        init_checkpoint: Some(s1.final_checkpoint.clone()),
        out_dir: dir.path().join("stage2"),
        ..base
    };
    let s2 = match trainer::run_stage2(&stage2) {
        Ok(s) => s,
        Err(e) => return (false, format!("stage 2 failed: {e}")),
    };
    let (q1, q4) = match pass_rates(&s2.final_checkpoint, &eval_problems) {
        Ok(v) => v,
        Err(e) => return (false, format!("stage-2 eval failed: {e}")),
    };

    let elapsed = started.elapsed();
    let improved = q1 > p1;
    let held = q4 >= p4 - 0.02;
    let in_budget = elapsed.as_secs_f64() < 600.0;
    (
        improved && held && in_budget,
        format!(
            "pass@1 {p1:.3} -> {q1:.3}, pass@4 {p4:.3} -> {q4:.3}, {:.1?}",
            elapsed
        ),
    )
}

// -------------------------------------------------------------------
// Criterion 6: on the high-overlap refinement preset there is a learning
// rate in the grid where the symmetric objective trips the collapse
// detector and the alpha=0.8 objective does not.
// -------------------------------------------------------------------

fn criterion_collapse() -> (bool, String) {
    let dir = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => return (false, format!("tempdir failed: {e}")),
    };
    let plan = match cli::expand_recipe("fig-redi-symmetric-vs-asymmetric", 17, dir.path()) {
        Ok(p) => p,
        Err(e) => return (false, format!("preset expansion failed: {e}")),
    };
    let outcomes = match cli::run_recipe(&plan, false) {
        Ok(o) => o,
        Err(e) => return (false, format!("preset run failed: {e}")),
    };

    // Group the stage-2 runs by the learning-rate suffix of their names.
    let collapsed = |name: &str| -> Option<bool> {
        outcomes.iter().find_map(|(n, outcome)| {
            if n == name {
                match outcome {
                    RunOutcome::Completed(s) => Some(s.collapse.is_some()),
                    RunOutcome::Aborted(_) => Some(true),
                }
            } else {
                None
            }
        })
    };
    let mut separating: Vec<String> = Vec::new();
    let mut seen: Vec<String> = Vec::new();
    for (name, _) in &plan.stage2 {
        if let Some(lr) = name.strip_prefix("symmetric-lr-") {
            seen.push(lr.to_string());
            let sym = collapsed(name);
            let redi = collapsed(&format!("redi-0.8-lr-{lr}"));
            if sym == Some(true) && redi == Some(false) {
                separating.push(lr.to_string());
            }
        }
    }
    (
        !separating.is_empty(),
        format!(
            "separating learning rates {:?} out of grid {:?}",
            separating, seen
        ),
    )
}

// -------------------------------------------------------------------
// Criterion 7: pass@k is monotone in k on 1000 random correctness
// matrices, and the mean/SEM statistics match an independent two-pass
// reference to 1e-12, including a hand-checked example.
// -------------------------------------------------------------------

fn criterion_pass_at_k() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..1000 {
        let problems = rng.gen_range(1..8);
        let samples = rng.gen_range(1..16);
        let density: f64 = rng.gen_range(0.0..1.0);
        let rows: Vec<Vec<bool>> = (0..problems)
            .map(|_| (0..samples).map(|_| rng.gen_bool(density)).collect())
            .collect();
        let matrix = match CorrectnessMatrix::new(rows) {
            Ok(m) => m,
            Err(e) => return (false, format!("matrix {i} rejected: {e}")),
        };
        let mut prev = 0.0;
        for k in 1..=samples {
            let v = match evalkit::pass_at_k(&matrix, k) {
                Ok(v) => v,
                Err(e) => return (false, format!("pass@{k} errored: {e}")),
            };
            if v + 1e-15 < prev {
                return (
                    false,
                    format!("pass@{k} = {v} fell below pass@{} = {prev}", k - 1),
                );
            }
            prev = v;
        }

        // Independent two-pass mean/SEM over the per-sample accuracies.
        let stats = evalkit::pass1_with_sem(&matrix);
        let cols = matrix.samples();
        let accs: Vec<f64> = (0..cols)
            .map(|j| {
                let hits = matrix.rows().iter().filter(|r| r[j]).count();
                hits as f64 / problems as f64
            })
            .collect();
        let mean: f64 = accs.iter().sum::<f64>() / cols as f64;
        if (stats.mean - mean).abs() > 1e-12 {
            return (false, format!("mean {} vs reference {mean}", stats.mean));
        }
        let want_sem = if cols < 2 {
            None
        } else {
            let var =
                accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (cols as f64 - 1.0);
            Some((var / cols as f64).sqrt())
        };
        match (stats.sem, want_sem) {
            (None, None) => {}
            (Some(a), Some(b)) if (a - b).abs() <= 1e-12 => {}
            (got, want) => return (false, format!("sem {got:?} vs reference {want:?}")),
        }
    }

    // Hand-checked example: three problems, four samples each.
    let matrix = CorrectnessMatrix::new(vec![
        vec![true, false, false, false],
        vec![false, false, false, false],
        vec![true, true, true, true],
    ])
    .expect("rectangular");
    let p1 = evalkit::pass_at_k(&matrix, 1).expect("k=1");
    let p4 = evalkit::pass_at_k(&matrix, 4).expect("k=4");
    let stats = evalkit::pass1_with_sem(&matrix);
    let ok = (p1 - 2.0 / 3.0).abs() <= 1e-12
        && (p4 - 2.0 / 3.0).abs() <= 1e-12
        && (stats.mean - 5.0 / 12.0).abs() <= 1e-12
        && stats
            .sem
            .map(|s| (s - 1.0 / 12.0).abs() <= 1e-12)
            .unwrap_or(false);
    (
        ok,
        format!(
            "1000 random matrices monotone; example pass@1 {p1:.4}, pass@4 {p4:.4}, mean {:.4}, sem {:?}",
            stats.mean, stats.sem
        ),
    )
}

// -------------------------------------------------------------------
// Criterion 8: running the same preset twice with the same seed into
// different directories produces byte-identical telemetry for every run.
// -------------------------------------------------------------------

fn criterion_determinism() -> (bool, String) {
    let dir = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => return (false, format!("tempdir failed: {e}")),
    };
    let mut roots: Vec<PathBuf> = Vec::new();
    for sub in ["first", "second"] {
        let root = dir.path().join(sub);
        let plan = match cli::expand_recipe("fig-simpo", 17, &root) {
            Ok(p) => p,
            Err(e) => return (false, format!("preset expansion failed: {e}")),
        };
        if let Err(e) = cli::run_recipe(&plan, false) {
            return (false, format!("preset run ({sub}) failed: {e}"));
        }
        roots.push(root.join("fig-simpo"));
    }
    let runs = ["stage1", "simpo-beta-2-gamma-1", "simpo-beta-10-gamma-5"];
    let mut compared = 0usize;
    for run in runs {
        let a = match std::fs::read(roots[0].join(run).join("telemetry.csv")) {
            Ok(b) => b,
            Err(e) => return (false, format!("{run} first telemetry unreadable: {e}")),
        };
        let b = match std::fs::read(roots[1].join(run).join("telemetry.csv")) {
            Ok(b) => b,
            Err(e) => return (false, format!("{run} second telemetry unreadable: {e}")),
        };
        if a != b {
            return (false, format!("{run} telemetry differs between reruns"));
        }
        compared += 1;
    }
    (
        true,
        format!("{compared} telemetry files byte-identical across reruns"),
    )
}
