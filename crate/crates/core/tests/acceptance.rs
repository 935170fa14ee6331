//! Acceptance suite: one PASS/FAIL line per criterion. Runs the full
//! desk-scale pipeline with the default configuration, so it takes several
//! minutes. Exits nonzero if any criterion fails.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use common::{
    all_model_gradients, copy_mass_gap, differing, random_decode_steps, sari_oracle,
    sari_oracle_gap, snapshot, tape_copy_gap, tiny_config, H, TOL,
};
use factedit::checkpoint::{Checkpoint, Persist};
use factedit::corpus::load_jsonl;
use factedit::generator::{GeneratorModel, InferenceConfig};
use factedit::masker::MaskerModel;
use factedit::metrics::sari;
use factedit::pipeline::commands::{
    evaluate_rewrites, load_pipeline, rewrite_records, split_path, TrainReport,
};
use factedit::pipeline::{self, PipelineConfig, Stage};
use factedit::stance::StanceModel;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn report(k: usize, name: &str, o: &Outcome) {
    let tag = if o.pass { "PASS" } else { "FAIL" };
    println!("{tag} [{k}] {name}: {}", o.detail);
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let ops = factedit_tensor::check::op_suite(11, H).expect("op checks run");
    let models = all_model_gradients();
    let worst_op = ops.iter().map(|o| o.1).fold(0.0, f64::max);
    let worst_model = models.iter().map(|m| m.1).fold(0.0, f64::max);
    let failing: Vec<String> = ops
        .iter()
        .map(|(n, e)| (n.to_string(), *e))
        .chain(models.iter().cloned())
        .filter(|(_, e)| *e >= TOL)
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect();
    let secs = t.elapsed().as_secs_f64();
    outcome(
        failing.is_empty() && secs < 120.0,
        format!(
            "{} ops (worst {worst_op:.1e}), {} model parameters (worst {worst_model:.1e}), {secs:.1}s{}",
            ops.len(),
            models.len(),
            if failing.is_empty() {
                String::new()
            } else {
                format!("; failing: {}", failing.join(", "))
            }
        ),
    )
}

fn distributions() -> Outcome {
    let r = random_decode_steps(1000, 17);
    outcome(
        r.steps >= 1000 && r.mixture <= 1e-9 && r.attention <= 1e-9 && r.classifier <= 1e-9,
        format!(
            "{} steps; worst deviation mixture {:.1e}, attention {:.1e}, classifier {:.1e}",
            r.steps, r.mixture, r.attention, r.classifier
        ),
    )
}

fn sari_equivalence() -> Outcome {
    let gap = sari_oracle_gap(50, 10, 3);
    let input = [1u32, 2, 3, 4];
    let reference = [1u32, 2, 9, 4];
    let perfect = sari(&input, &reference, &reference).unwrap().sari;
    let copy = sari(&input, &input, &reference).unwrap().sari;
    let oracle_copy = sari_oracle(&input, &input, &reference)[3];
    outcome(
        gap <= 1e-12 && perfect == 1.0 && copy == 0.0 && oracle_copy == 0.0,
        format!("50 triples, worst gap {gap:.1e}; output=reference {perfect}; output=input {copy}"),
    )
}

fn copy_mass() -> Outcome {
    let (n, gap) = copy_mass_gap(5, 1);
    let (m, tape_gap) = tape_copy_gap(5);
    outcome(
        gap <= 1e-12 && tape_gap <= 1e-12,
        format!(
            "{n} sequences, mixture vs oracle {gap:.1e}; {m} training-side targets, relative gap {tape_gap:.1e}"
        ),
    )
}

struct Run {
    cfg: PipelineConfig,
    pipeline_time: Duration,
    classifier_accuracy: f64,
    vocab: usize,
    pairs: usize,
    default_mask_f1: Option<f64>,
    sweep: pipeline::commands::SweepReport,
    eval: pipeline::commands::EvalReport,
    agreement_without_escalation: Option<f64>,
}

fn full_run(out: &Path) -> factedit::Result<Run> {
    let cfg = PipelineConfig {
        out: out.to_path_buf(),
        ..PipelineConfig::default()
    };
    let t = Instant::now();
    let data = pipeline::gen_data(&cfg)?;
    let mut classifier_accuracy = f64::NAN;
    let mut vocab = 0;
    let mut default_mask_f1 = None;
    for stage in [Stage::Classifier, Stage::Masker, Stage::Generator] {
        match pipeline::train(&cfg, stage)? {
            TrainReport::Classifier(r) => {
                classifier_accuracy = r.test_accuracy;
                vocab = r.vocab_size;
            }
            TrainReport::Masker(r) => default_mask_f1 = r.test.prf.map(|p| p.f1),
            TrainReport::Generator(_) => {}
        }
    }
    pipeline::rewrite(&cfg, None, None)?;
    let eval = pipeline::eval(&cfg, None, None)?;
    let sweep = pipeline::sweep_lambda(&cfg)?;
    let pipeline_time = t.elapsed();

    // the same pipeline decoding once at τ = 0
    let single = PipelineConfig {
        inference: InferenceConfig {
            schedule: vec![0.0],
            ..cfg.inference.clone()
        },
        ..cfg.clone()
    };
    let p = load_pipeline(&single, "rewrite", &[Stage::Masker, Stage::Generator])?;
    let test = load_jsonl(&split_path(&cfg, "test"))?;
    let records = rewrite_records(&single, &p, &test);
    let plain = evaluate_rewrites(&cfg.corpus_config(), &p.stance, &p.vocab, &records, &test)?;

    Ok(Run {
        pairs: data.train.total + data.dev.total + data.test.total,
        cfg,
        pipeline_time,
        classifier_accuracy,
        vocab,
        default_mask_f1,
        sweep,
        eval,
        agreement_without_escalation: plain.agreement_rate,
    })
}

fn end_to_end(r: &Run) -> Outcome {
    let tuned = r
        .sweep
        .rows
        .iter()
        .find(|row| row.lambda == r.sweep.tuned_lambda)
        .and_then(|row| row.test.prf.map(|p| p.f1))
        .unwrap_or(f64::NAN);
    let slot = r.eval.slot_copy_rate.unwrap_or(f64::NAN);
    let agree = r.eval.agreement_rate.unwrap_or(f64::NAN);
    let plain = r.agreement_without_escalation.unwrap_or(f64::NAN);
    let mins = r.pipeline_time.as_secs_f64() / 60.0;
    let pass = r.pairs == 5000
        && r.vocab <= 300
        && mins < 30.0
        && r.classifier_accuracy >= 0.95
        && tuned >= 0.75
        && slot >= 0.85
        && agree >= 0.90
        && agree >= plain;
    outcome(
        pass,
        format!(
            "{} pairs, vocab {}, {mins:.1} min; classifier acc {:.4}; mask F1 {:.4} at tuned λ={} ({} at default λ={}); slot copy {slot:.4}; agreement {agree:.4} (without escalation {plain:.4}); SARI {}",
            r.pairs,
            r.vocab,
            r.classifier_accuracy,
            tuned,
            r.sweep.tuned_lambda,
            r.default_mask_f1.map_or("-".into(), |f| format!("{f:.4}")),
            r.cfg.masker.training.lambda,
            r.eval.sari.map_or("-".into(), |s| format!("{:.4}", s.sari)),
        ),
    )
}

fn sweep_trend(r: &Run) -> Outcome {
    let size_at = |l: f64| {
        r.sweep
            .rows
            .iter()
            .find(|row| row.lambda == l)
            .map(|row| row.test.size)
    };
    let low: Option<Vec<f64>> = [0.0, 0.2, 0.4, 0.6].iter().map(|&l| size_at(l)).collect();
    let Some(low) = low else {
        return outcome(false, "grid lacks one of 0, 0.2, 0.4, 0.6".into());
    };
    let inversions: Vec<f64> = low
        .windows(2)
        .filter(|w| w[1] > w[0])
        .map(|w| w[1] - w[0])
        .collect();
    let trend = inversions.is_empty() || (inversions.len() == 1 && inversions[0] <= 2.0);
    let smallest = r
        .sweep
        .rows
        .iter()
        .map(|row| (row.lambda, row.test.size))
        .fold(
            (f64::NAN, f64::INFINITY),
            |a, b| if b.1 < a.1 { b } else { a },
        );
    let exact = r
        .sweep
        .rows
        .iter()
        .all(|row| row.test.delta == row.test.accuracy - row.test.size);
    outcome(
        trend && smallest.1 < 2.0 && exact,
        format!(
            "sizes at λ=0,.2,.4,.6: {}; smallest {:.2}% at λ={}; Δ = acc − size exactly: {exact}",
            low.iter()
                .map(|s| format!("{s:.2}"))
                .collect::<Vec<_>>()
                .join(", "),
            smallest.1,
            smallest.0,
        ),
    )
}

fn augmentation(cfg: &PipelineConfig) -> factedit::Result<Outcome> {
    let r = pipeline::eval_augmentation(cfg)?;
    Ok(outcome(
        r.delta_points >= 2.0 && r.claim_only_accuracy > r.majority_accuracy,
        format!(
            "symmetric accuracy {:.4} -> {:.4} ({:+.2} points, {} pairs); claim-only probe {:.4} vs majority {:.4}",
            r.unaugmented_accuracy,
            r.augmented_accuracy,
            r.delta_points,
            r.symmetric_pairs,
            r.claim_only_accuracy,
            r.majority_accuracy
        ),
    ))
}

fn round_trip_checkpoints(cfg: &PipelineConfig) -> Result<(), String> {
    for stage in [Stage::Classifier, Stage::Masker, Stage::Generator] {
        let path = cfg.checkpoint_dir().join(format!("{}.ck", stage.name()));
        let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
        let ck = Checkpoint::load(&path).map_err(|e| e.to_string())?;
        let resaved = match stage {
            Stage::Classifier => {
                StanceModel::from_checkpoint(&ck).map(|(m, v)| m.to_checkpoint(&v))
            }
            Stage::Masker => MaskerModel::from_checkpoint(&ck).map(|(m, v)| m.to_checkpoint(&v)),
            Stage::Generator => {
                GeneratorModel::from_checkpoint(&ck).map(|(m, v)| m.to_checkpoint(&v))
            }
        }
        .map_err(|e| e.to_string())?
        .to_bytes();
        if resaved != bytes {
            return Err(format!("{} re-serializes differently", stage.name()));
        }
        let mut bad = bytes.clone();
        let k = bad.len() - 12;
        bad[k] ^= 1;
        if Checkpoint::from_bytes(&bad).is_ok() {
            return Err(format!("{} corruption went unnoticed", stage.name()));
        }
    }
    Ok(())
}

fn determinism(run: &Run, scratch: &Path) -> factedit::Result<Outcome> {
    let cfg = &run.cfg;
    let before = snapshot(&cfg.out);
    pipeline::gen_data(cfg)?;
    for stage in [Stage::Classifier, Stage::Masker, Stage::Generator] {
        pipeline::train(cfg, stage)?;
    }
    pipeline::rewrite(cfg, None, None)?;
    pipeline::eval(cfg, None, None)?;
    let after = snapshot(&cfg.out);
    let mut diff = differing(&before, &after);

    // the remaining commands, twice each on a small pipeline
    let tiny = tiny_config(scratch);
    let small = |cfg: &PipelineConfig| -> factedit::Result<()> {
        pipeline::gen_data(cfg)?;
        for stage in [Stage::Classifier, Stage::Masker, Stage::Generator] {
            pipeline::train(cfg, stage)?;
        }
        pipeline::sweep_lambda(cfg)?;
        pipeline::augment(cfg, None, None)?;
        pipeline::eval_augmentation(cfg)?;
        Ok(())
    };
    small(&tiny)?;
    let first = snapshot(scratch);
    small(&tiny)?;
    diff.extend(differing(&first, &snapshot(scratch)));

    let ck = round_trip_checkpoints(cfg);
    Ok(outcome(
        diff.is_empty() && ck.is_ok(),
        format!(
            "{} files compared after reruns, {} differ{}; checkpoints: {}",
            after.len() + first.len(),
            diff.len(),
            if diff.is_empty() {
                String::new()
            } else {
                format!(" ({})", diff.join(", "))
            },
            ck.err()
                .unwrap_or_else(|| "byte-identical round trip, corruption detected".into())
        ),
    ))
}

fn main() {
    const NAMES: [&str; 8] = [
        "gradient correctness",
        "distribution invariants",
        "SARI oracle equivalence",
        "copy-mass equivalence",
        "end-to-end synthetic pipeline",
        "λ-sweep trend",
        "augmentation direction",
        "determinism and persistence",
    ];
    let mut results: Vec<Outcome> = Vec::new();
    let mut record = |o: Outcome| {
        report(results.len() + 1, NAMES[results.len()], &o);
        results.push(o);
    };
    record(gradients());
    record(distributions());
    record(sari_equivalence());
    record(copy_mass());

    let dir = tempfile::tempdir().expect("temp dir");
    let failed = |e: factedit::Error| outcome(false, format!("error: {e}"));
    match full_run(&dir.path().join("full")) {
        Ok(run) => {
            record(end_to_end(&run));
            record(sweep_trend(&run));
            record(augmentation(&run.cfg).unwrap_or_else(failed));
            record(determinism(&run, &dir.path().join("small")).unwrap_or_else(failed));
        }
        Err(e) => {
            for _ in 4..8 {
                record(failed(factedit::Error::Contract(e.to_string())));
            }
        }
    }

    let passed = results.iter().filter(|o| o.pass).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
