//! The ten acceptance criteria, one pass/fail line each.
//!
//! Lines go straight to the process's stderr so they show up even when the
//! test harness captures output.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use common::{auroc_pairwise, bundle, dtw_exhaustive, e2e_gradcheck, kl_direct, refs, two_domains, E2E_LOSSES};
use emr_transfer::adversarial::{transition_gradients, DomainBranch, Terms};
use emr_transfer::checkpoint::{self, TensorMap};
use emr_transfer::cli::Config;
use emr_transfer::data::{synth_generate, Dataset, GeneratorConfig};
use emr_transfer::dtw::dtw_distance;
use emr_transfer::eval::{build_report, kfold_split, metric_auroc, run_cv, CvConfig, Report};
use emr_transfer::losses::{kl_rep_loss, LossWeights};
use emr_transfer::pipeline::{
    prepare_split, train_target, train_teacher, train_transition, LabelScaler, ModelConfig, RunConfig, SourceModel,
    TargetModel, TransitionBundle,
};
use rand::seq::SliceRandom;
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gradient_integrity() -> Outcome {
    let mut worst = 0.0f64;
    let configs = 25;
    for seed in 0..configs {
        let loss = E2E_LOSSES[seed as usize % E2E_LOSSES.len()];
        let r = e2e_gradcheck(seed, loss);
        ensure(r.max_rel_err < 1e-4, || {
            format!("config {seed} ({loss:?}): rel err {:.3e}", r.max_rel_err)
        })?;
        worst = worst.max(r.max_rel_err);
    }
    Ok(format!("{configs} configurations, worst relative error {worst:.2e}"))
}

fn reversal_exactness() -> Outcome {
    let (src, tar) = two_domains(12, 1.5, 31);
    let plain_terms = Terms {
        rep: false,
        pred: false,
        domain: DomainBranch::Unreversed,
    };
    let mut worst = 0.0f64;
    for (i, gamma) in [1.0, 0.3, 2.0].into_iter().enumerate() {
        let b = bundle(&src, &tar, 4, 6, LossWeights::default(), 40 + i as u64);
        let plain = transition_gradients(&b, &refs(&src), &refs(&tar), plain_terms).map_err(|e| e.to_string())?;
        let rev = transition_gradients(
            &b,
            &refs(&src),
            &refs(&tar),
            Terms {
                domain: DomainBranch::Reversed(gamma),
                ..plain_terms
            },
        )
        .map_err(|e| e.to_string())?;
        for (p, r) in plain.encoder.iter().zip(&rev.encoder) {
            for (&u, &v) in p.data().iter().zip(r.data()) {
                worst = worst.max((v + gamma * u).abs());
            }
        }
        for (p, r) in plain.classifier.iter().zip(&rev.classifier) {
            ensure(p == r, || format!("gamma {gamma}: classifier gradients changed by reversal"))?;
        }
    }
    ensure(worst <= 1e-12, || format!("encoder gradient deviates from -gamma x unreversed by {worst:.2e}"))?;
    Ok(format!("max |g_rev + gamma g| = {worst:.1e}; classifier gradients identical"))
}

fn kl_properties() -> Outcome {
    let mut r = common::rng(51);
    let mut worst_oracle = 0.0f64;
    let mut worst_shift = 0.0f64;
    for _ in 0..1000 {
        let n = r.random_range(1..=8);
        let a: Vec<f64> = (0..n).map(|_| r.random_range(-5.0..5.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| r.random_range(-5.0..5.0)).collect();
        let kl = kl_rep_loss(&a, &b).map_err(|e| e.to_string())?;
        ensure(kl >= 0.0, || format!("negative KL {kl} for {a:?} vs {b:?}"))?;
        worst_oracle = worst_oracle.max((kl - kl_direct(&a, &b)).abs());
        let self_kl = kl_rep_loss(&a, &a).map_err(|e| e.to_string())?;
        ensure(self_kl.abs() <= 1e-12, || format!("KL(p||p) = {self_kl}"))?;
        let c = r.random_range(-10.0..10.0);
        let shifted_a: Vec<f64> = a.iter().map(|x| x + c).collect();
        let shifted_b: Vec<f64> = b.iter().map(|x| x - c).collect();
        let kl_shift = kl_rep_loss(&shifted_a, &shifted_b).map_err(|e| e.to_string())?;
        worst_shift = worst_shift.max((kl_shift - kl).abs());
    }
    ensure(worst_oracle <= 1e-12, || format!("direct summation differs by {worst_oracle:.2e}"))?;
    ensure(worst_shift <= 1e-12, || format!("shift changes KL by {worst_shift:.2e}"))?;
    let hand = kl_rep_loss(&[1f64.ln(), 3f64.ln()], &[0.0, 0.0]).map_err(|e| e.to_string())?;
    ensure((hand - 0.130812).abs() <= 1e-6, || format!("worked pair gives {hand}"))?;
    Ok(format!("1000 pairs; worked pair {hand:.6}; shift drift {worst_shift:.1e}"))
}

fn dtw_oracle() -> Outcome {
    let mut r = common::rng(61);
    for case in 0..1000 {
        let (la, lb) = (r.random_range(1..=6), r.random_range(1..=6));
        let a: Vec<f64> = (0..la).map(|_| r.random_range(-3.0..3.0)).collect();
        let b: Vec<f64> = (0..lb).map(|_| r.random_range(-3.0..3.0)).collect();
        let d = dtw_distance(&a, &b).map_err(|e| e.to_string())?;
        let oracle = dtw_exhaustive(&a, &b);
        ensure(d.to_bits() == oracle.to_bits(), || format!("case {case}: {d} vs exhaustive {oracle}"))?;
        let back = dtw_distance(&b, &a).map_err(|e| e.to_string())?;
        ensure((back - d).abs() <= 1e-12, || format!("case {case}: asymmetric {d} vs {back}"))?;
        let same = dtw_distance(&a, &a).map_err(|e| e.to_string())?;
        ensure(same == 0.0, || format!("case {case}: self distance {same}"))?;
    }
    Ok("1000 pairs equal exhaustive enumeration bit for bit; symmetric; zero on identity".into())
}

fn auroc_oracle() -> Outcome {
    let mut r = common::rng(71);
    let mut worst = 0.0f64;
    let mut tied = 0;
    for case in 0..1000 {
        let n = r.random_range(2..=40);
        let mut labels: Vec<f64> = (0..n).map(|_| f64::from(r.random_bool(0.4) as u8)).collect();
        labels[0] = 0.0;
        labels[1] = 1.0;
        // coarse grid forces ties
        let scores: Vec<f64> = (0..n).map(|_| f64::from(r.random_range(0..8u8)) / 4.0).collect();
        let mut seen = scores.clone();
        seen.sort_by(f64::total_cmp);
        seen.dedup();
        tied += usize::from(seen.len() < n);
        let a = metric_auroc(&scores, &labels).map_err(|e| e.to_string())?;
        worst = worst.max((a - auroc_pairwise(&scores, &labels)).abs());
        let transformed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() + s).collect();
        let b = metric_auroc(&transformed, &labels).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("case {case}: monotone transform changed {a} to {b}"))?;
    }
    ensure(worst <= 1e-12, || format!("pairwise formula differs by {worst:.2e}"))?;
    Ok(format!("1000 instances ({tied} with ties), max deviation {worst:.1e}"))
}

fn leakage_guards() -> Outcome {
    let mut r = common::rng(81);
    for case in 0..500 {
        let n = r.random_range(5..=200);
        let k = r.random_range(2..=n.min(10));
        let ids: Vec<String> = (0..n).map(|i| format!("p{i}")).collect();
        let plan = kfold_split(&ids, k, r.random()).map_err(|e| e.to_string())?;
        let mut count: BTreeMap<&str, usize> = BTreeMap::new();
        for f in &plan.folds {
            for id in f {
                *count.entry(id.as_str()).or_default() += 1;
            }
        }
        ensure(count.len() == n && count.values().all(|&c| c == 1), || {
            format!("case {case}: a patient is missing or in two folds")
        })?;
        let sizes: Vec<usize> = plan.folds.iter().map(Vec::len).collect();
        let spread = sizes.iter().max().unwrap() - sizes.iter().min().unwrap();
        ensure(spread <= 1, || format!("case {case}: fold sizes {sizes:?}"))?;
    }

    let (src, tar) = synth_generate(&GeneratorConfig {
        n_source: 80,
        n_target: 30,
        t_min: 3,
        t_max: 6,
        seed: 82,
        ..GeneratorConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let split = prepare_split(&src, &tar, &tar).map_err(|e| e.to_string())?;
    let mut cfg = RunConfig {
        seed: 83,
        model: ModelConfig { hidden: 3, rep: 4 },
        ..RunConfig::default()
    };
    cfg.train.epochs = 3;
    cfg.train.patience = 3;
    let teacher = train_teacher(&split.source, &cfg).map_err(|e| e.to_string())?.model;
    let export = |target: &Dataset| -> Result<String, String> {
        let run = train_transition(&teacher, &split.source, target, &split.alignment, &cfg).map_err(|e| e.to_string())?;
        let mut map = TensorMap::new();
        run.bundle.export(&mut map);
        checkpoint::encode(&map).map_err(|e| e.to_string())
    };
    let base = export(&split.target_train)?;
    for trial in 0..3 {
        let mut permuted = split.target_train.clone();
        let mut labels: Vec<(u8, f64)> = permuted.records.iter().map(|x| (x.outcome, x.los)).collect();
        labels.shuffle(&mut r);
        for (rec, (o, l)) in permuted.records.iter_mut().zip(labels) {
            rec.outcome = o;
            rec.los = l;
        }
        ensure(export(&permuted)? == base, || format!("permutation {trial} changed the transition checkpoint"))?;
    }
    Ok("500 fold plans partition exactly; 3 label permutations leave stage 2 bitwise unchanged".into())
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Runs the benchmark. With `fresh_cohort` every seed also draws its own
/// synthetic cohort; otherwise the cohort is the one the config names and
/// only training randomness varies.
fn benchmark(fresh_cohort: bool) -> Result<Report, String> {
    let text = fs::read_to_string(repo_root().join("configs/benchmark.json")).map_err(|e| e.to_string())?;
    let cfg = Config::parse(&text).map_err(|e| e.to_string())?;
    let gen = cfg.data.synthetic.clone().ok_or("benchmark config lacks data.synthetic")?;
    let n_train = cfg.data.target_train.ok_or("benchmark config lacks data.target_train")?;
    ensure(
        gen.n_source == 2000 && n_train == 64 && gen.n_target - n_train == 200 && gen.shift == 1.0,
        || "benchmark cohort sizes differ from 2000/64/200, shift 1.0".into(),
    )?;
    ensure((gen.n_shared, gen.n_source_private, gen.n_target_private) == (8, 4, 4), || {
        "benchmark feature counts differ from 8 shared, 4+4 private".into()
    })?;
    ensure(cfg.cv.seeds.len() == 5, || "benchmark config must list 5 seeds".into())?;
    let cohorts: Vec<(Vec<u64>, u64)> = if fresh_cohort {
        cfg.cv.seeds.iter().map(|&s| (vec![s], s)).collect()
    } else {
        vec![(cfg.cv.seeds.clone(), gen.seed)]
    };
    let mut runs = Vec::new();
    for (seeds, data_seed) in cohorts {
        let (source, target) = synth_generate(&GeneratorConfig { seed: data_seed, ..gen.clone() }).map_err(|e| e.to_string())?;
        let train = target.select(&(0..n_train).collect::<Vec<_>>());
        let test = target.select(&(n_train..target.len()).collect::<Vec<_>>());
        let cv = CvConfig { k: 1, seeds };
        runs.extend(run_cv(&source, &train, Some(&test), &cfg.run_config(), &cv, true).map_err(|e| e.to_string())?);
    }
    Ok(build_report(&runs))
}

/// Criterion 7 and criterion 8 judged on one benchmark report.
fn judge(report: &Report) -> (Outcome, Outcome) {
    let scratch = report.scratch.as_ref().expect("scratch ablation requested");
    let pairs: Vec<(f64, f64)> = report.transfer.folds.iter().zip(&scratch.folds).map(|(t, s)| (t.mse, s.mse)).collect();
    let n = pairs.len();
    let wins = pairs.iter().filter(|(t, s)| t < s).count();
    let (mt, ms) = (report.transfer.mean["mse"], scratch.mean["mse"]);
    let improvement = (ms - mt) / ms;
    let per_seed: Vec<String> = pairs.iter().map(|(t, s)| format!("{t:.2}/{s:.2}")).collect();
    let detail = format!(
        "transfer beats scratch in {wins}/{n} seeds, mean test MSE {mt:.3} vs {ms:.3} ({:.1}% lower); per seed transfer/scratch {}",
        100.0 * improvement,
        per_seed.join(" ")
    );
    let c7 = if n == 5 && wins >= 4 && improvement >= 0.03 { Ok(detail) } else { Err(detail) };

    let faster = report.convergence.iter().filter(|c| c.transfer_faster()).count();
    let epochs: Vec<String> = report
        .convergence
        .iter()
        .map(|c| {
            let t = c.transfer_epochs_to_scratch_best.map_or("never".to_string(), |e| e.to_string());
            format!("{t}/{}", c.scratch_best_epoch)
        })
        .collect();
    let detail = format!(
        "transfer reaches the scratch best validation MSE sooner in {faster}/{} seeds; epochs transfer/scratch {}",
        report.convergence.len(),
        epochs.join(" ")
    );
    let c8 = if report.convergence.len() == 5 && faster >= 4 { Ok(detail) } else { Err(detail) };
    (c7, c8)
}

fn transfer_benchmark(fresh_cohort: bool) -> (Outcome, Outcome) {
    match catch_unwind(|| benchmark(fresh_cohort)) {
        Ok(Ok(report)) => judge(&report),
        Ok(Err(e)) => (Err(e.clone()), Err(e)),
        Err(_) => (Err("panic".into()), Err("panic".into())),
    }
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    const CONFIG: &str = r#"{
      "seed": 11,
      "data": { "synthetic": { "n_source": 80, "n_target": 40, "t_min": 3, "t_max": 6, "seed": 2 }, "target_train": 28 },
      "model": { "hidden": 3, "rep": 4 },
      "train": { "epochs": 3, "patience": 2, "batch": 16 },
      "cv": { "k": 2 }
    }"#;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = tmp.path().join("c.json");
    fs::write(&cfg, CONFIG).map_err(|e| e.to_string())?;
    let cfg = cfg.to_str().unwrap().to_string();
    let mut files = 0;
    let commands: [&[&str]; 5] = [
        &["simulate"],
        &["train-teacher"],
        &["train-transition", "--from", "train-teacher"],
        &["transfer", "--from", "train-transition"],
        &["train-target", "--from", "transfer"],
    ];
    for round in ["a", "b"] {
        let base = tmp.path().join(round);
        for cmd in commands {
            let mut args = vec![cmd[0].to_string(), "--config".into(), cfg.clone()];
            args.extend(["--out".into(), base.join(cmd[0]).display().to_string()]);
            if cmd.len() == 3 {
                args.extend(["--from".into(), base.join(cmd[2]).display().to_string()]);
            }
            run_bin(&args)?;
        }
        let cv_args = ["run-cv", "--config", &cfg, "--seed", "7", "--ablation", "scratch", "--out"];
        let mut args: Vec<String> = cv_args.iter().map(|s| s.to_string()).collect();
        args.push(base.join("run-cv").display().to_string());
        run_bin(&args)?;
    }
    for sub in ["simulate", "train-teacher", "train-transition", "transfer", "train-target", "run-cv"] {
        let a = tree(&tmp.path().join("a").join(sub));
        let b = tree(&tmp.path().join("b").join(sub));
        let names: Vec<&String> = a.iter().map(|(n, _)| n).collect();
        // manifests name the --from directory, which differs between the two rounds
        let strip = |v: Vec<(String, Vec<u8>)>| v.into_iter().filter(|(n, _)| n != "manifest.json").collect::<Vec<_>>();
        ensure(strip(a.clone()) == strip(b), || format!("{sub}: outputs differ ({names:?})"))?;
        files += a.len() - 1;
    }
    Ok(format!("6 subcommands run twice; {files} reports, curves, logs and checkpoints byte-identical"))
}

fn run_bin(args: &[String]) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_emr-transfer"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(o.status.success(), || format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr)))
}

fn checkpoint_round_trip() -> Outcome {
    let (src, tar) = synth_generate(&GeneratorConfig {
        n_source: 60,
        n_target: 30,
        t_min: 3,
        t_max: 6,
        seed: 91,
        ..GeneratorConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let split = prepare_split(&src, &tar, &tar).map_err(|e| e.to_string())?;
    let mut cfg = RunConfig {
        seed: 92,
        model: ModelConfig { hidden: 3, rep: 4 },
        ..RunConfig::default()
    };
    cfg.train.epochs = 2;
    cfg.train.patience = 2;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let e = |x: emr_transfer::error::Error| x.to_string();

    let round_trip = |name: &str, map: &TensorMap| -> Result<TensorMap, String> {
        let first = tmp.path().join(format!("{name}.1.json"));
        let second = tmp.path().join(format!("{name}.2.json"));
        checkpoint::save(map, &first).map_err(e)?;
        let loaded = checkpoint::load(&first).map_err(e)?;
        checkpoint::save(&loaded, &second).map_err(e)?;
        ensure(fs::read(&first).unwrap() == fs::read(&second).unwrap(), || format!("{name}: save-load-save bytes differ"))?;
        Ok(loaded)
    };

    let teacher = train_teacher(&split.source, &cfg).map_err(e)?.model;
    let mut map = TensorMap::new();
    teacher.export("teacher", &mut map);
    let loaded_teacher = SourceModel::import("teacher", &round_trip("teacher", &map)?).map_err(e)?;
    ensure(loaded_teacher == teacher, || "teacher parameters changed through a checkpoint".into())?;

    let transition = train_transition(&loaded_teacher, &split.source, &split.target_train, &split.alignment, &cfg).map_err(e)?;
    let mut map = TensorMap::new();
    transition.bundle.export(&mut map);
    let loaded = round_trip("transition", &map)?;
    let encoder = TransitionBundle::import_encoder(&loaded).map_err(e)?;
    ensure(encoder == transition.bundle.encoder, || "transition encoder changed through a checkpoint".into())?;
    let bundle = TransitionBundle::import(teacher.clone(), &loaded).map_err(e)?;
    ensure(bundle == transition.bundle, || "transition bundle changed through a checkpoint".into())?;

    let los = LabelScaler::fit(&split.target_train.los()).map_err(e)?;
    let map_t = emr_transfer::dtw::build_transfer_map(&split.source, &split.target_train, &split.alignment, cfg.seed).map_err(e)?;
    let init = emr_transfer::pipeline::init_target_from_transition(&encoder, &map_t, &split.target_train.schema, los, &cfg).map_err(e)?;
    for f in split.target_train.schema.names() {
        let from = map_t.source_for(f).ok_or_else(|| format!("{f} unmapped"))?;
        let (a, b) = (init.encoder.channel(f).unwrap(), transition.bundle.encoder.channel(from).unwrap());
        ensure(a == b, || format!("channel {f} not copied bit-exactly from {from}"))?;
    }
    let trained = train_target(init, &split.target_train, &cfg).map_err(e)?.model;
    let mut map = TensorMap::new();
    trained.export(&mut map);
    let back = TargetModel::import(&round_trip("target", &map)?).map_err(e)?;
    ensure(back == trained, || "target model changed through a checkpoint".into())?;
    Ok("teacher, transition and target checkpoints byte-stable; cross-stage parameters bit-exact".into())
}

fn report(id: usize, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(msg)
    });
    emit(id, name, start.elapsed(), budget, outcome)
}

fn emit(id: usize, name: &str, elapsed: Duration, budget: Duration, outcome: Outcome) -> bool {
    let in_time = elapsed <= budget;
    let (ok, detail) = match outcome {
        Ok(d) if in_time => (true, d),
        Ok(d) => (false, format!("{d}; over the {budget:?} budget")),
        Err(d) => (false, d),
    };
    let line = format!(
        "criterion {id:>2} {}: {name} [{:.1}s] {detail}\n",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    ok
}

#[test]
fn acceptance_criteria() {
    let secs = Duration::from_secs;
    let mut passed = vec![
        report(1, "gradient integrity", secs(30), gradient_integrity),
        report(2, "gradient-reversal exactness", secs(5), reversal_exactness),
        report(3, "KL properties", secs(5), kl_properties),
        report(4, "DTW oracle equivalence", secs(30), dtw_oracle),
        report(5, "AUROC oracle equivalence", secs(10), auroc_oracle),
        report(6, "leakage guards", secs(120), leakage_guards),
    ];
    let start = Instant::now();
    let (c7, c8) = transfer_benchmark(true);
    let elapsed = start.elapsed();
    passed.push(emit(7, "synthetic transfer benefit", elapsed, secs(600), c7));
    passed.push(emit(8, "convergence speed", elapsed, secs(600), c8));
    passed.push(report(9, "determinism", secs(120), determinism));
    passed.push(report(10, "checkpoint round trip", secs(60), checkpoint_round_trip));
    // Not gating: the same benchmark on the single cohort the config names.
    let start = Instant::now();
    let (f7, f8) = transfer_benchmark(false);
    let elapsed = start.elapsed();
    for (id, outcome) in [(7, f7), (8, f8)] {
        let (verdict, detail) = match outcome {
            Ok(d) => ("pass", d),
            Err(d) => ("fail", d),
        };
        let line = format!("note: criterion {id} on one fixed cohort would {verdict} [{:.1}s] {detail}\n", elapsed.as_secs_f64());
        let _ = std::io::stderr().write_all(line.as_bytes());
    }
    let failed: Vec<usize> = passed.iter().enumerate().filter(|(_, &p)| !p).map(|(i, _)| i + 1).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
