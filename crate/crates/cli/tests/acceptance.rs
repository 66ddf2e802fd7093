//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use decore_core::decoder::{conditional_entropy, contrast_log_distributions, DecodeMode};
use decore_core::detector::{detect_retrieval_heads, rank_heads, RetrievalScoreTable, DEFAULT_SCORE_THRESHOLD};
use decore_core::harness::{
    compare_entropy, default_detector_config, run_task, sweep_masked_heads, TaskConfig, TaskKind,
    TaskModels, TaskResult,
};
use decore_core::tensor::log_softmax;
use decore_core::zoo::{build_induction_model, random_model, WiredModelSpec};
use decore_core::{forward, HeadMask, Model, ModelConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CONTRAST_TOL: f64 = 1e-9;
const ALPHA_ZERO_TOL: f64 = 1e-12;
const ENTROPY_TOL: f64 = 1e-9;
const MASK_TOL: f64 = 1e-10;
const PEARSON_TOL: f64 = 1e-9;
const EM_CLEAN_MIN: f64 = 0.99;
const EM_MASKED_MAX: f64 = 0.05;
const MEMORIZED_RATE_MIN: f64 = 0.95;
const DETECT_TOP_MIN: f64 = 0.9;
const DETECT_GAP_MIN: f64 = 0.3;
const RANDOM_SCORE_MAX: f64 = 0.2;
const TASK_SAMPLES: usize = 500;
const DETECT_SAMPLES: usize = 100;

type Outcome = Result<String, String>;
/// Stdout and written file of one command.
type Output = (Vec<u8>, Vec<u8>);
type Criterion = (&'static str, Duration, fn() -> Outcome);

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn wired() -> (WiredModelSpec, Model, RetrievalScoreTable) {
    let spec = WiredModelSpec::default();
    let model = build_induction_model(&spec).unwrap();
    let det = default_detector_config(&model, None, 1).unwrap();
    let table = detect_retrieval_heads(&model, &det).unwrap();
    (spec, model, table)
}

fn random_log_dist(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
    log_softmax(&logits).unwrap()
}

fn contrast_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(2..=64);
        let lb = random_log_dist(&mut rng, n);
        let la = random_log_dist(&mut rng, n);
        let pb: Vec<f64> = lb.iter().map(|x| x.exp()).collect();
        let pa: Vec<f64> = la.iter().map(|x| x.exp()).collect();
        let h = conditional_entropy(&pb).map_err(|e| e.to_string())?;
        for alpha in [0.0, 0.5, 1.0, 2.0, h] {
            let out = contrast_log_distributions(&lb, &la, alpha).map_err(|e| e.to_string())?;
            let w: Vec<f64> = pb
                .iter()
                .zip(&pa)
                .map(|(b, a)| b.powf(1.0 + alpha) / a.powf(alpha))
                .collect();
            let z: f64 = w.iter().sum();
            for (o, wi) in out.iter().zip(&w) {
                worst = worst.max((o.exp() - wi / z).abs());
            }
            if alpha == 0.0 {
                for (o, b) in out.iter().zip(&lb) {
                    check((o - b).abs() <= ALPHA_ZERO_TOL, format!("alpha=0 moved {b} to {o}"))?;
                }
            }
        }
    }
    check(worst <= CONTRAST_TOL, format!("max deviation {worst:e}"))?;
    Ok(format!("5000 contrasts, max deviation {worst:.1e}"))
}

fn entropy_checks() -> Outcome {
    for v in 2..=256usize {
        let h = conditional_entropy(&vec![1.0 / v as f64; v]).map_err(|e| e.to_string())?;
        check((h - (v as f64).ln()).abs() <= ENTROPY_TOL, format!("uniform {v}: {h}"))?;
        let mut one_hot = vec![0.0; v];
        one_hot[v / 2] = 1.0;
        check(conditional_entropy(&one_hot).unwrap() == 0.0, "one-hot entropy not 0")?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10_000 {
        let n = rng.random_range(2..=128);
        let p: Vec<f64> = random_log_dist(&mut rng, n).iter().map(|x| x.exp()).collect();
        let h = conditional_entropy(&p).map_err(|e| e.to_string())?;
        check(h >= 0.0 && h <= (n as f64).ln(), format!("entropy {h} out of [0, ln {n}]"))?;
    }
    Ok("uniform, one-hot and 10000 random distributions".into())
}

fn masking_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let n_heads = rng.random_range(1..=3);
        let d_head = rng.random_range(2..=6);
        let cfg = ModelConfig {
            n_layers: rng.random_range(1..=3),
            n_heads,
            d_model: n_heads * d_head,
            d_head,
            vocab_size: rng.random_range(4..=24),
            max_seq_len: 16,
            use_layer_norm: rng.random_bool(0.5),
            use_mlp: rng.random_bool(0.5),
        };
        let model = random_model(cfg, i).map_err(|e| e.to_string())?;
        let mut heads = cfg.all_heads();
        heads.shuffle(&mut rng);
        let k = rng.random_range(0..=heads.len());
        let mask = HeadMask::new(heads[..k].iter().copied());
        let len = rng.random_range(1..=cfg.max_seq_len);
        let prompt: Vec<u32> = (0..len).map(|_| rng.random_range(0..cfg.vocab_size as u32)).collect();
        let masked = forward(&prompt, &mask, &model, false).map_err(|e| e.to_string())?;
        let surgical = model.with_value_weights_zeroed(&mask).map_err(|e| e.to_string())?;
        let zeroed = forward(&prompt, &HeadMask::empty(), &surgical, false).map_err(|e| e.to_string())?;
        for (a, b) in masked.logits.data().iter().zip(zeroed.logits.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    check(worst <= MASK_TOL, format!("max deviation {worst:e}"))?;
    Ok(format!("100 triples, max deviation {worst:.1e}"))
}

fn induced_hallucination() -> Outcome {
    let (_, model, table) = wired();
    let models = TaskModels::new(&model).with_scores(&table);
    let run = |task, n| run_task(models, &TaskConfig::new(task, DecodeMode::Greedy, n, TASK_SAMPLES, 4));
    let clean = run(TaskKind::Copy, 0).map_err(|e| e.to_string())?;
    let masked = run(TaskKind::Copy, 1).map_err(|e| e.to_string())?;
    let swap = run(TaskKind::Swap, 1).map_err(|e| e.to_string())?;
    check(masked.masked_heads == [WiredModelSpec::RETRIEVAL_HEAD], "wrong head masked")?;
    check(clean.exact_match >= EM_CLEAN_MIN, format!("clean EM {}", clean.exact_match))?;
    check(masked.exact_match <= EM_MASKED_MAX, format!("masked EM {}", masked.exact_match))?;
    check(
        swap.memorized_rate >= MEMORIZED_RATE_MIN,
        format!("masked swap memorized rate {}", swap.memorized_rate),
    )?;
    Ok(format!(
        "copy EM {:.3} -> {:.3} masked, swap memorized rate {:.3}",
        clean.exact_match, masked.exact_match, swap.memorized_rate
    ))
}

fn detector_ground_truth() -> Outcome {
    let spec = WiredModelSpec::default();
    let model = build_induction_model(&spec).unwrap();
    let mut det = default_detector_config(&model, None, 5).unwrap();
    det.samples = DETECT_SAMPLES;
    let table = detect_retrieval_heads(&model, &det).map_err(|e| e.to_string())?;
    let ranked = rank_heads(&table, 2, DEFAULT_SCORE_THRESHOLD).map_err(|e| e.to_string())?;
    check(ranked[0].head == WiredModelSpec::RETRIEVAL_HEAD, format!("rank 1 is {}", ranked[0].head))?;
    check(ranked[0].score >= DETECT_TOP_MIN, format!("top score {}", ranked[0].score))?;
    let gap = ranked[0].score - ranked[1].score;
    check(gap >= DETECT_GAP_MIN, format!("gap {gap}"))?;

    let cfg = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 32,
        d_head: 16,
        vocab_size: 32,
        max_seq_len: 40,
        use_layer_norm: true,
        use_mlp: true,
    };
    let rand_model = random_model(cfg, 7).map_err(|e| e.to_string())?;
    let rand_det = default_detector_config(&rand_model, Some(0), 5).unwrap();
    let rand_table = detect_retrieval_heads(&rand_model, &rand_det).map_err(|e| e.to_string())?;
    let rand_max = rand_table.scores().values().copied().fold(0.0, f64::max);
    check(rand_max <= RANDOM_SCORE_MAX, format!("random model max score {rand_max}"))?;
    Ok(format!(
        "{} scores {:.3}, gap {:.3}; random model max {:.3}",
        ranked[0].head, ranked[0].score, gap, rand_max
    ))
}

fn swap_pair() -> Result<(TaskResult, TaskResult), String> {
    let (_, model, table) = wired();
    let models = TaskModels::new(&model).with_scores(&table);
    let greedy = run_task(models, &TaskConfig::new(TaskKind::Swap, DecodeMode::Greedy, 0, TASK_SAMPLES, 6))
        .map_err(|e| e.to_string())?;
    let decore = run_task(
        models,
        &TaskConfig::new(TaskKind::Swap, DecodeMode::DecoreEntropy, 1, TASK_SAMPLES, 6),
    )
    .map_err(|e| e.to_string())?;
    check(decore.masked_heads == [WiredModelSpec::RETRIEVAL_HEAD], "wrong amateur head")?;
    Ok((greedy, decore))
}

fn faithfulness_restored() -> Outcome {
    let (greedy, decore) = swap_pair()?;
    check(
        decore.exact_match >= greedy.exact_match,
        format!("EM {} < greedy {}", decore.exact_match, greedy.exact_match),
    )?;
    check(
        decore.mean_answer_prob > greedy.mean_answer_prob,
        format!("answer prob {} <= greedy {}", decore.mean_answer_prob, greedy.mean_answer_prob),
    )?;
    Ok(format!(
        "EM {:.3} vs greedy {:.3}, answer prob {:.6} vs {:.6}",
        decore.exact_match, greedy.exact_match, decore.mean_answer_prob, greedy.mean_answer_prob
    ))
}

fn entropy_trend() -> Outcome {
    let (greedy, decore) = swap_pair()?;
    let report = compare_entropy(&[decore.clone(), greedy.clone()]).map_err(|e| e.to_string())?;
    let pair = &report.pairs[0];
    check(
        decore.mean_len_norm_entropy <= greedy.mean_len_norm_entropy,
        format!("entropy {} > greedy {}", decore.mean_len_norm_entropy, greedy.mean_len_norm_entropy),
    )?;
    let t = pair.t.ok_or("t statistic undefined")?;
    check(t <= 0.0, format!("t = {t}"))?;
    Ok(format!(
        "entropy {:.6} vs greedy {:.6}, t = {t:.3} (dof {:.1}); selected-distribution entropy {:.6} vs {:.6}",
        decore.mean_len_norm_entropy,
        greedy.mean_len_norm_entropy,
        pair.dof,
        decore.mean_selected_entropy,
        greedy.mean_selected_entropy
    ))
}

fn reference_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let sx: f64 = x.iter().sum();
    let sy: f64 = y.iter().sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

fn sweep_methodology() -> Outcome {
    let (_, model, table) = wired();
    let models = TaskModels::new(&model).with_scores(&table);
    let ns = [0, 1, 2, 3, 4];
    let cfg = TaskConfig::new(TaskKind::Copy, DecodeMode::Greedy, 0, 200, 8);
    let sweep = sweep_masked_heads(models, &cfg, &ns).map_err(|e| e.to_string())?;
    check(sweep.results.len() == ns.len(), "missing per-n results")?;
    let r = sweep.pearson_r.ok_or("r undefined")?;
    let x: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
    let reference = reference_pearson(&x, &sweep.exact_match);
    check((r - reference).abs() <= PEARSON_TOL, format!("r {r} vs reference {reference}"))?;
    check(r < 0.0, format!("r = {r} is not negative"))?;
    Ok(format!("EM {:?}, r = {r:.6}", sweep.exact_match))
}

fn run_cli(args: &[&str], dir: &Path) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_decore"))
        .args(args)
        .current_dir(dir)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "decore {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(out.stdout)
}

/// Every subcommand, in dependency order: label, arguments, file written.
const PIPELINE: &[(&str, &[&str], Option<&str>)] = &[
    ("build-model induction", &["build-model", "--kind", "induction", "--out", "w.dcrm"], Some("w.dcrm")),
    (
        "build-model random",
        &["build-model", "--kind", "random", "--seed", "3", "--layer-norm", "--mlp", "--out", "r.dcrm"],
        Some("r.dcrm"),
    ),
    (
        "detect",
        &["detect", "--model", "w.dcrm", "--samples", "50", "--haystack-len", "20", "--needle-len", "3", "--seed", "9", "--out", "s.csv"],
        Some("s.csv"),
    ),
    (
        "decode",
        &["decode", "--model", "w.dcrm", "--mode", "entropy", "--masked-heads", "1", "--scores", "s.csv", "--prompt", "3 20 25 4 20", "--max-new", "4", "--json", "--diagnostics-out", "diag.jsonl"],
        Some("diag.jsonl"),
    ),
    (
        "decode entropy-lite",
        &["decode", "--model", "w.dcrm", "--mode", "entropy-lite", "--amateur", "r.dcrm", "--prompt", "3 20 25 4 20", "--max-new", "4", "--json"],
        None,
    ),
    (
        "eval",
        &["eval", "--model", "w.dcrm", "--task", "swap", "--mode", "entropy", "--masked-heads", "1", "--scores", "s.csv", "--samples", "60", "--seed", "2", "--out", "e1.json"],
        Some("e1.json"),
    ),
    (
        "eval inline detection",
        &["eval", "--model", "w.dcrm", "--task", "swap", "--mode", "greedy", "--masked-heads", "1", "--detect-inline", "--samples", "60", "--seed", "2", "--out", "e2.json"],
        Some("e2.json"),
    ),
    (
        "sweep",
        &["sweep", "--model", "w.dcrm", "--task", "copy", "--mode", "static", "--alpha", "0.5", "--ns", "0,1,2,4", "--scores", "s.csv", "--samples", "30", "--out", "sw.json"],
        Some("sw.json"),
    ),
    ("entropy-report", &["entropy-report", "--inputs", "e1.json", "e2.json", "--out", "rep.json"], Some("rep.json")),
];

fn run_pipeline(dir: &Path) -> Result<Vec<Output>, String> {
    PIPELINE
        .iter()
        .map(|(_, args, file)| {
            let stdout = run_cli(args, dir)?;
            let artifact = match file {
                Some(f) => std::fs::read(dir.join(f)).map_err(|e| format!("{f}: {e}"))?,
                None => Vec::new(),
            };
            Ok((stdout, artifact))
        })
        .collect()
}

fn cli_determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = run_pipeline(a.path())?;
    let second = run_pipeline(b.path())?;
    for (((label, _, _), x), y) in PIPELINE.iter().zip(&first).zip(&second) {
        check(x == y, format!("{label}: output differs between runs"))?;
        check(!x.0.is_empty() || !x.1.is_empty(), format!("{label}: produced no output"))?;
    }
    Ok(format!("{} commands byte-identical across runs", PIPELINE.len()))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("contrast matches brute-force oracle", Duration::from_secs(5), contrast_oracle),
        ("entropy bounds and extremes", Duration::from_secs(5), entropy_checks),
        ("head mask equals value-weight surgery", Duration::from_secs(30), masking_equivalence),
        ("masking the retrieval head induces hallucination", Duration::from_secs(60), induced_hallucination),
        ("detector finds the wired retrieval head", Duration::from_secs(60), detector_ground_truth),
        ("entropy contrast restores the context answer", Duration::from_secs(90), faithfulness_restored),
        ("entropy contrast does not raise entropy", Duration::from_secs(90), entropy_trend),
        ("masked-head sweep correlation", Duration::from_secs(90), sweep_methodology),
        ("CLI output is deterministic", Duration::from_secs(120), cli_determinism),
    ];
    let mut failures = 0;
    for (i, (name, budget, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = start.elapsed();
        let outcome = outcome.and_then(|detail| {
            if elapsed <= *budget {
                Ok(detail)
            } else {
                Err(format!("{detail}; took {elapsed:.2?}, budget {budget:?}"))
            }
        });
        match outcome {
            Ok(detail) => println!("PASS criterion {} ({name}): {detail} [{elapsed:.2?}]", i + 1),
            Err(why) => {
                failures += 1;
                println!("FAIL criterion {} ({name}): {why} [{elapsed:.2?}]", i + 1);
            }
        }
    }
    if failures > 0 {
        println!("{failures} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
    println!("all {} criteria passed", criteria.len());
}
