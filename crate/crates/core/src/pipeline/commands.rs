//! The pipeline commands. Each reads and writes under the configured `out`
//! directory and writes a report pair named after the command.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{AugmentMethod, PipelineConfig};
use super::report::{f, fields, pct, write_report, Table};
use crate::checkpoint::Persist;
use crate::corpus::{
    corpus_stats, generate_synthetic, load_jsonl, redacted_pairs, save_jsonl, slot_change,
    ClaimPair, CorpusStats, Relation, SynthConfig,
};
use crate::error::{contract, io_err, Error, Result};
use crate::generator::{
    greedy_decode, reconstruction_examples, rewrite_with_escalation, train_generator, Controls,
    ExtendedSources, GateSummary, GeneratorDims, GeneratorModel, GeneratorReport,
};
use crate::masker::{
    apply_hard_mask, evaluate_masker, mask_examples, train_masker, MaskEval, MaskerConfig,
    MaskerDims, MaskerModel, MaskerReport,
};
use crate::metrics::{agreement_rate, mask_prf, mean_sari, sari, Prf, SariScore};
use crate::stance::{
    build_neutral_negatives, encode_pairs, train_stance, StanceDims, StanceModel, StanceReport,
    StanceTraining,
};
use crate::vocab::{Vocab, MASK_TOKEN};

const SPLITS: [&str; 3] = ["train", "dev", "test"];

pub fn split_path(cfg: &PipelineConfig, split: &str) -> PathBuf {
    cfg.data_dir().join(format!("{split}.jsonl"))
}

fn checkpoint_path(cfg: &PipelineConfig, stage: Stage) -> PathBuf {
    cfg.checkpoint_dir().join(format!("{}.ck", stage.name()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))
}

fn tokens(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

// ---------------------------------------------------------------- gen-data

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenDataReport {
    pub train: CorpusStats,
    pub dev: CorpusStats,
    pub test: CorpusStats,
    pub bias_cue: String,
    pub files: Vec<PathBuf>,
}

fn stats_table(title: &str, rows: &[(&str, &CorpusStats)]) -> Table {
    let mut t = Table::new(
        title,
        &[
            "split", "total", "agree", "disagree", "neutral", "cue|D", "cue|A",
        ],
    );
    for (name, s) in rows {
        t.row(vec![
            name.to_string(),
            s.total.to_string(),
            s.agree.to_string(),
            s.disagree.to_string(),
            s.neutral.to_string(),
            f(s.cue_in_disagree),
            f(s.cue_in_agree),
        ]);
    }
    t
}

pub fn gen_data(cfg: &PipelineConfig) -> Result<GenDataReport> {
    let synth = cfg.corpus_config();
    let corpus = generate_synthetic(&synth)?;
    create_dir(&cfg.data_dir())?;
    let mut files = Vec::new();
    for (split, pairs) in SPLITS
        .iter()
        .zip([&corpus.train, &corpus.dev, &corpus.test])
    {
        let path = split_path(cfg, split);
        save_jsonl(pairs, &path)?;
        files.push(path);
    }
    let cue = &synth.bias_cue;
    let report = GenDataReport {
        train: corpus_stats(&corpus.train, cue),
        dev: corpus_stats(&corpus.dev, cue),
        test: corpus_stats(&corpus.test, cue),
        bias_cue: cue.clone(),
        files,
    };
    let table = stats_table(
        "corpus",
        &[
            ("train", &report.train),
            ("dev", &report.dev),
            ("test", &report.test),
        ],
    );
    write_report(
        &cfg.report_dir(),
        "gen-data",
        "gen-data",
        cfg.seed,
        &report,
        &[table],
    )?;
    Ok(report)
}

// ------------------------------------------------------------------- train

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Classifier,
    Masker,
    Generator,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Classifier => "classifier",
            Stage::Masker => "masker",
            Stage::Generator => "generator",
        }
    }

    fn prerequisites(self) -> &'static [Stage] {
        match self {
            Stage::Classifier => &[],
            Stage::Masker => &[Stage::Classifier],
            Stage::Generator => &[Stage::Classifier, Stage::Masker],
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "classifier" => Ok(Stage::Classifier),
            "masker" => Ok(Stage::Masker),
            "generator" => Ok(Stage::Generator),
            _ => Err(Error::Config(format!("unknown stage `{s}`"))),
        }
    }
}

/// Fails with an ordering error naming the first missing input.
fn require_inputs(
    cfg: &PipelineConfig,
    command: &str,
    stages: &[Stage],
    splits: &[&str],
) -> Result<()> {
    for &split in splits {
        let path = split_path(cfg, split);
        if !path.exists() {
            return Err(Error::Ordering {
                stage: command.to_string(),
                missing: format!("gen-data ({split} split)"),
                path,
            });
        }
    }
    for &s in stages {
        let path = checkpoint_path(cfg, s);
        if !path.exists() {
            return Err(Error::Ordering {
                stage: command.to_string(),
                missing: s.name().to_string(),
                path,
            });
        }
    }
    Ok(())
}

fn load_splits(cfg: &PipelineConfig) -> Result<[Vec<ClaimPair>; 3]> {
    Ok([
        load_jsonl(&split_path(cfg, "train"))?,
        load_jsonl(&split_path(cfg, "dev"))?,
        load_jsonl(&split_path(cfg, "test"))?,
    ])
}

/// The frozen models of a trained pipeline and their shared vocabulary.
pub struct Pipeline {
    pub vocab: Vocab,
    pub stance: StanceModel,
    pub masker: Option<MaskerModel>,
    pub generator: Option<GeneratorModel>,
}

fn load_model<M: Persist>(cfg: &PipelineConfig, stage: Stage, vocab: &Vocab) -> Result<M> {
    let (m, v) = M::load(&checkpoint_path(cfg, stage))?;
    if &v != vocab {
        return Err(Error::Checkpoint(format!(
            "the {} checkpoint was trained with a different vocabulary",
            stage.name()
        )));
    }
    Ok(m)
}

/// Loads the classifier and whichever of the masker and generator `upto`
/// requires, after checking they exist.
pub fn load_pipeline(cfg: &PipelineConfig, command: &str, upto: &[Stage]) -> Result<Pipeline> {
    require_inputs(cfg, command, upto, &[])?;
    let (stance, vocab) = StanceModel::load(&checkpoint_path(cfg, Stage::Classifier))?;
    let masker = if upto.contains(&Stage::Masker) {
        Some(load_model::<MaskerModel>(cfg, Stage::Masker, &vocab)?)
    } else {
        None
    };
    let generator = if upto.contains(&Stage::Generator) {
        Some(load_model::<GeneratorModel>(cfg, Stage::Generator, &vocab)?)
    } else {
        None
    };
    Ok(Pipeline {
        vocab,
        stance,
        masker,
        generator,
    })
}

impl Pipeline {
    fn masker(&self) -> &MaskerModel {
        self.masker.as_ref().expect("masker loaded")
    }

    fn generator(&self) -> &GeneratorModel {
        self.generator.as_ref().expect("generator loaded")
    }
}

pub fn build_vocab(pairs: &[ClaimPair], min_count: usize) -> Vocab {
    let seqs = pairs.iter().flat_map(|p| {
        [p.claim.as_slice(), p.sentence.as_slice()]
            .into_iter()
            .chain(p.siblings.iter().map(Vec::as_slice))
    });
    Vocab::build(seqs, min_count)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTrainReport {
    pub vocab_size: usize,
    pub train_pairs: usize,
    pub negatives_added: usize,
    pub negatives_skipped: usize,
    pub redacted_added: usize,
    pub training: StanceReport,
    pub test_accuracy: f64,
}

/// Training recipe shared by the pipeline classifier and the augmentation
/// experiment: sibling negatives, optional redacted copies, then
/// cross-entropy with best-dev selection.
#[allow(clippy::too_many_arguments)]
pub fn fit_classifier(
    cfg: &PipelineConfig,
    synth: &SynthConfig,
    vocab: &Vocab,
    train: &[ClaimPair],
    dev: &[ClaimPair],
    training: &StanceTraining,
    redaction_rate: f64,
    seed: u64,
) -> Result<(StanceModel, ClassifierTrainReport)> {
    let (mut train_set, neg) = build_neutral_negatives(train, seed);
    let (mut dev_set, _) = build_neutral_negatives(dev, seed.wrapping_add(1));
    let redacted = redacted_pairs(
        synth,
        train,
        redaction_rate,
        cfg.classifier.redaction_span,
        seed.wrapping_add(2),
    );
    let redacted_added = redacted.len();
    train_set.extend(redacted);
    dev_set.extend(redacted_pairs(
        synth,
        dev,
        redaction_rate,
        cfg.classifier.redaction_span,
        seed.wrapping_add(3),
    ));
    let dims = StanceDims {
        vocab: vocab.len(),
        embed: cfg.classifier.embed,
        hidden: cfg.classifier.hidden,
        mlp: cfg.classifier.mlp,
    };
    let mut model = StanceModel::new(dims, seed.wrapping_add(4));
    let training = StanceTraining {
        seed: seed.wrapping_add(5),
        ..training.clone()
    };
    let report = train_stance(
        &mut model,
        &encode_pairs(vocab, &train_set),
        &encode_pairs(vocab, &dev_set),
        &training,
    )?;
    Ok((
        model,
        ClassifierTrainReport {
            vocab_size: vocab.len(),
            train_pairs: train_set.len(),
            negatives_added: neg.added,
            negatives_skipped: neg.skipped,
            redacted_added,
            training: report,
            test_accuracy: f64::NAN,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "lowercase")]
pub enum TrainReport {
    Classifier(ClassifierTrainReport),
    Masker(MaskerTrainReport),
    Generator(GeneratorTrainReport),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskerTrainReport {
    pub training: MaskerReport,
    pub test: MaskEval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorTrainReport {
    pub training: GeneratorReport,
}

pub fn train(cfg: &PipelineConfig, stage: Stage) -> Result<TrainReport> {
    let command = format!("train {}", stage.name());
    require_inputs(cfg, &command, stage.prerequisites(), &SPLITS)?;
    let [train_pairs, dev_pairs, test_pairs] = load_splits(cfg)?;
    create_dir(&cfg.checkpoint_dir())?;
    let path = checkpoint_path(cfg, stage);
    let name = format!("train-{}", stage.name());
    match stage {
        Stage::Classifier => {
            let vocab = build_vocab(&train_pairs, cfg.vocab_min_count);
            let (model, mut report) = fit_classifier(
                cfg,
                &cfg.corpus_config(),
                &vocab,
                &train_pairs,
                &dev_pairs,
                &cfg.classifier.training,
                cfg.classifier.redaction_rate,
                cfg.seed_for(1),
            )?;
            report.test_accuracy = model.accuracy(&encode_pairs(&vocab, &test_pairs))?;
            model.save(&vocab, &path)?;
            let mut epochs = Table::new(
                "epochs",
                &["epoch", "train loss", "dev acc", "best dev acc"],
            );
            for e in &report.training.epochs {
                epochs.row(vec![
                    e.epoch.to_string(),
                    f(e.train_loss),
                    f(e.dev_accuracy),
                    f(e.best_dev_accuracy),
                ]);
            }
            let summary = fields(
                "summary",
                &[
                    ("vocabulary", report.vocab_size.to_string()),
                    ("training pairs", report.train_pairs.to_string()),
                    ("first batch loss", f(report.training.first_batch_loss)),
                    ("best epoch", report.training.best_epoch.to_string()),
                    ("best dev accuracy", f(report.training.best_dev_accuracy)),
                    ("test accuracy", f(report.test_accuracy)),
                ],
            );
            let report = TrainReport::Classifier(report);
            write_report(
                &cfg.report_dir(),
                &name,
                &command,
                cfg.seed,
                &report,
                &[summary, epochs],
            )?;
            Ok(report)
        }
        Stage::Masker => {
            let p = load_pipeline(cfg, &command, &[])?;
            let mcfg = MaskerConfig {
                seed: cfg.seed_for(2),
                ..cfg.masker.training.clone()
            };
            let (model, training) = fit_masker(cfg, &p, &train_pairs, &dev_pairs, &mcfg)?;
            let test = evaluate_masker(
                &model,
                &p.stance,
                &mask_examples(&p.vocab, &test_pairs),
                mcfg.threshold,
            )?;
            model.save(&p.vocab, &path)?;
            let mut epochs =
                Table::new("epochs", &["epoch", "train loss", "acc", "size", "Δ", "F1"]);
            for e in &training.epochs {
                epochs.row(vec![
                    e.epoch.to_string(),
                    f(e.train_loss),
                    pct(e.dev.accuracy),
                    pct(e.dev.size),
                    pct(e.dev.delta),
                    e.dev.prf.map_or("-".into(), |p| f(p.f1)),
                ]);
            }
            let summary = fields("test", &mask_eval_fields(&test));
            let report = TrainReport::Masker(MaskerTrainReport { training, test });
            write_report(
                &cfg.report_dir(),
                &name,
                &command,
                cfg.seed,
                &report,
                &[summary, epochs],
            )?;
            Ok(report)
        }
        Stage::Generator => {
            let p = load_pipeline(cfg, &command, &[Stage::Masker])?;
            let agree: Vec<(Vec<String>, Vec<String>)> = train_pairs
                .iter()
                .filter(|q| q.relation == Relation::Agree)
                .map(|q| (q.sentence.clone(), q.claim.clone()))
                .collect();
            let mode = cfg.generator.mode;
            let (examples, skipped) = reconstruction_examples(
                &p.vocab,
                mode,
                p.masker(),
                cfg.masker.training.threshold,
                &agree,
            )?;
            let dims = GeneratorDims {
                vocab: p.vocab.len(),
                embed: cfg.generator.embed,
                hidden: cfg.generator.hidden,
                attention: cfg.generator.attention,
                mode,
            };
            let mut model = GeneratorModel::new(dims, cfg.seed_for(3));
            let gcfg = crate::generator::GeneratorTraining {
                seed: cfg.seed_for(4),
                ..cfg.generator.training.clone()
            };
            let training = train_generator(&mut model, &examples, skipped, &gcfg)?;
            model.save(&p.vocab, &path)?;
            let mut rows = Table::new("training", &["step", "train loss"]);
            for r in &training.rows {
                rows.row(vec![r.step.to_string(), f(r.train_loss)]);
            }
            let summary = fields(
                "summary",
                &[
                    ("mode", format!("{mode:?}")),
                    ("examples", training.examples.to_string()),
                    ("skipped (unreachable)", training.skipped.to_string()),
                    ("first batch loss", f(training.first_batch_loss)),
                ],
            );
            let report = TrainReport::Generator(GeneratorTrainReport { training });
            write_report(
                &cfg.report_dir(),
                &name,
                &command,
                cfg.seed,
                &report,
                &[summary, rows],
            )?;
            Ok(report)
        }
    }
}

fn fit_masker(
    cfg: &PipelineConfig,
    p: &Pipeline,
    train: &[ClaimPair],
    dev: &[ClaimPair],
    mcfg: &MaskerConfig,
) -> Result<(MaskerModel, MaskerReport)> {
    let dims = MaskerDims {
        vocab: p.vocab.len(),
        embed: cfg.masker.embed,
        hidden: cfg.masker.hidden,
        mask_hidden: cfg.masker.mask_hidden,
    };
    let mut model = MaskerModel::new(dims, cfg.seed_for(5));
    let report = train_masker(
        &mut model,
        &p.stance,
        &mask_examples(&p.vocab, train),
        &mask_examples(&p.vocab, dev),
        mcfg,
    )?;
    Ok((model, report))
}

fn mask_eval_fields(e: &MaskEval) -> Vec<(&'static str, String)> {
    let mut v = vec![
        ("neutral accuracy %", pct(e.accuracy)),
        ("mask size %", pct(e.size)),
        ("Δ", pct(e.delta)),
    ];
    if let Some(p) = e.prf {
        v.push(("precision", f(p.precision)));
        v.push(("recall", f(p.recall)));
        v.push(("F1", f(p.f1)));
    }
    v
}

// ----------------------------------------------------------------- rewrite

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteRecord {
    pub id: String,
    pub sentence: String,
    pub claim: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation: Option<Relation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gates: Option<GateSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Residual and rewrite of one pair.
pub struct Rewritten {
    pub residual: Vec<String>,
    pub rewrite: crate::generator::Rewrite,
}

pub fn rewrite_pair(
    cfg: &PipelineConfig,
    p: &Pipeline,
    sentence: &[String],
    claim: &[String],
) -> Result<Rewritten> {
    if sentence.is_empty() || claim.is_empty() {
        return Err(contract("empty sentence or claim"));
    }
    let mask = p
        .masker()
        .mask_probs(&p.vocab.encode(sentence), &p.vocab.encode(claim))?;
    let residual = apply_hard_mask(
        sentence,
        &mask,
        cfg.masker.training.threshold,
        MASK_TOKEN.to_string(),
    );
    let rewrite = rewrite_with_escalation(
        p.generator(),
        &p.stance,
        &p.vocab,
        &residual,
        claim,
        &cfg.inference,
    )?;
    Ok(Rewritten { residual, rewrite })
}

pub fn rewrite_records(
    cfg: &PipelineConfig,
    p: &Pipeline,
    pairs: &[ClaimPair],
) -> Vec<RewriteRecord> {
    pairs
        .par_iter()
        .map(|q| {
            let mut rec = RewriteRecord {
                id: q.id.clone(),
                sentence: q.sentence.join(" "),
                claim: q.claim.join(" "),
                residual: None,
                output: None,
                relation: None,
                tau: None,
                gates: None,
                error: None,
            };
            match rewrite_pair(cfg, p, &q.sentence, &q.claim) {
                Ok(r) => {
                    rec.residual = Some(r.residual.join(" "));
                    rec.output = Some(r.rewrite.tokens.join(" "));
                    rec.relation = Some(r.rewrite.relation);
                    rec.tau = Some(r.rewrite.tau);
                    rec.gates = Some(r.rewrite.gates);
                }
                Err(e) => rec.error = Some(e.to_string()),
            }
            rec
        })
        .collect()
}

pub fn save_records<T: Serialize>(records: &[T], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(io_err(format!("writing {}", path.display())))
}

pub fn load_records<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text =
        std::fs::read_to_string(path).map_err(io_err(format!("reading {}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| Error::Record {
                path: path.to_path_buf(),
                line: n + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn default_rewrites_path(cfg: &PipelineConfig) -> PathBuf {
    cfg.out.join("rewrites.jsonl")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteReport {
    pub input: PathBuf,
    pub output: PathBuf,
    pub records: usize,
    pub errors: usize,
    pub agree: usize,
    /// Records that needed a gate floor above zero.
    pub escalated: usize,
    pub mean_tau: f64,
}

pub fn rewrite(
    cfg: &PipelineConfig,
    input: Option<&Path>,
    output: Option<&Path>,
) -> Result<RewriteReport> {
    let p = load_pipeline(cfg, "rewrite", &[Stage::Masker, Stage::Generator])?;
    let input = input.map_or_else(|| split_path(cfg, "test"), Path::to_path_buf);
    let output = output.map_or_else(|| default_rewrites_path(cfg), Path::to_path_buf);
    let pairs = load_jsonl(&input)?;
    let records = rewrite_records(cfg, &p, &pairs);
    save_records(&records, &output)?;
    let done: Vec<&RewriteRecord> = records.iter().filter(|r| r.error.is_none()).collect();
    let report = RewriteReport {
        input,
        output,
        records: records.len(),
        errors: records.len() - done.len(),
        agree: done
            .iter()
            .filter(|r| r.relation == Some(Relation::Agree))
            .count(),
        escalated: done
            .iter()
            .filter(|r| r.tau.is_some_and(|t| t > 0.0))
            .count(),
        mean_tau: if done.is_empty() {
            0.0
        } else {
            done.iter().filter_map(|r| r.tau).sum::<f64>() / done.len() as f64
        },
    };
    let table = fields(
        "rewrite",
        &[
            ("records", report.records.to_string()),
            ("errors", report.errors.to_string()),
            ("AGREE", report.agree.to_string()),
            ("escalated", report.escalated.to_string()),
            ("mean τ", f(report.mean_tau)),
        ],
    );
    write_report(
        &cfg.report_dir(),
        "rewrite",
        "rewrite",
        cfg.seed,
        &report,
        &[table],
    )?;
    Ok(report)
}

// -------------------------------------------------------------------- eval

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSummary {
    pub count: usize,
    pub accuracy: f64,
    pub size: f64,
    pub delta: f64,
    pub prf: Option<Prf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: usize,
    pub sari_count: usize,
    pub sari: Option<SariScore>,
    pub mask: Option<MaskSummary>,
    pub agreement_count: usize,
    pub agreement_rate: Option<f64>,
    /// DISAGREE pairs whose output holds the claim's slot value and not the
    /// old one.
    pub slot_copy_count: usize,
    pub slot_copy_rate: Option<f64>,
}

fn check_alignment(rewrites: &[RewriteRecord], gold: &[ClaimPair]) -> Result<()> {
    for (k, r) in rewrites.iter().enumerate() {
        match gold.get(k) {
            Some(g) if g.id == r.id => {}
            _ => return Err(Error::Misaligned(r.id.clone())),
        }
    }
    if gold.len() > rewrites.len() {
        return Err(Error::Misaligned(gold[rewrites.len()].id.clone()));
    }
    Ok(())
}

/// Scores rewrite records against gold pairs in the same order.
pub fn evaluate_rewrites(
    synth: &SynthConfig,
    stance: &StanceModel,
    vocab: &Vocab,
    rewrites: &[RewriteRecord],
    gold: &[ClaimPair],
) -> Result<EvalReport> {
    check_alignment(rewrites, gold)?;
    let ok: Vec<(&RewriteRecord, &ClaimPair, Vec<String>, Vec<String>)> = rewrites
        .iter()
        .zip(gold)
        .filter(|(r, _)| r.error.is_none())
        .filter_map(|(r, g)| {
            Some((
                r,
                g,
                tokens(r.output.as_deref()?),
                tokens(r.residual.as_deref()?),
            ))
        })
        .collect();

    let scores: Vec<SariScore> = ok
        .iter()
        .filter_map(|(_, g, out, _)| g.gold_updated.as_ref().map(|gu| sari(&g.sentence, out, gu)))
        .collect::<Result<_>>()?;
    let sari_score = if scores.is_empty() {
        None
    } else {
        Some(mean_sari(&scores)?)
    };

    let polar: Vec<_> = ok
        .iter()
        .filter(|(_, g, _, res)| g.is_polar() && res.len() == g.sentence.len())
        .collect();
    let mask = if polar.is_empty() {
        None
    } else {
        let rows: Vec<(bool, f64, Vec<u8>)> = polar
            .par_iter()
            .map(|(_, g, _, res)| {
                let hard: Vec<u8> = res.iter().map(|t| (t == MASK_TOKEN) as u8).collect();
                let neutral = stance.predict(&vocab.encode(res), &vocab.encode(&g.claim))?
                    == Relation::Neutral;
                let size = hard.iter().map(|&m| m as f64).sum::<f64>() / hard.len() as f64;
                Ok::<_, Error>((neutral, size, hard))
            })
            .collect::<Result<_>>()?;
        let n = rows.len() as f64;
        let accuracy = 100.0 * rows.iter().filter(|r| r.0).count() as f64 / n;
        let size = 100.0 * rows.iter().map(|r| r.1).sum::<f64>() / n;
        let (pred, gm): (Vec<Vec<u8>>, Vec<Vec<u8>>) = rows
            .iter()
            .zip(&polar)
            .filter_map(|(r, (_, g, _, _))| g.gold_mask.clone().map(|m| (r.2.clone(), m)))
            .unzip();
        Some(MaskSummary {
            count: rows.len(),
            accuracy,
            size,
            delta: accuracy - size,
            prf: if gm.is_empty() {
                None
            } else {
                Some(mask_prf(&pred, &gm)?)
            },
        })
    };

    let pairs: Vec<(Vec<usize>, Vec<usize>)> = ok
        .iter()
        .filter(|(_, g, _, _)| g.relation == Relation::Disagree)
        .map(|(_, g, out, _)| (vocab.encode(out), vocab.encode(&g.claim)))
        .collect();
    let agreement = if pairs.is_empty() {
        None
    } else {
        Some(agreement_rate(stance, &pairs)?)
    };

    let slot: Vec<bool> = ok
        .iter()
        .filter(|(_, g, _, _)| g.relation == Relation::Disagree)
        .filter_map(|(_, g, out, _)| {
            let (new, old) = slot_change(synth, &g.sentence, &g.claim)?;
            Some(out.contains(&new) && !out.contains(&old))
        })
        .collect();
    Ok(EvalReport {
        records: rewrites.len(),
        sari_count: scores.len(),
        sari: sari_score,
        mask,
        agreement_count: pairs.len(),
        agreement_rate: agreement,
        slot_copy_count: slot.len(),
        slot_copy_rate: if slot.is_empty() {
            None
        } else {
            Some(slot.iter().filter(|&&b| b).count() as f64 / slot.len() as f64)
        },
    })
}

pub fn eval(
    cfg: &PipelineConfig,
    rewrites: Option<&Path>,
    gold: Option<&Path>,
) -> Result<EvalReport> {
    let p = load_pipeline(cfg, "eval", &[])?;
    let rewrites_path = rewrites.map_or_else(|| default_rewrites_path(cfg), Path::to_path_buf);
    let gold_path = gold.map_or_else(|| split_path(cfg, "test"), Path::to_path_buf);
    let records: Vec<RewriteRecord> = load_records(&rewrites_path)?;
    let gold = load_jsonl(&gold_path)?;
    let report = evaluate_rewrites(&cfg.corpus_config(), &p.stance, &p.vocab, &records, &gold)?;
    let opt = |x: Option<f64>| x.map_or("-".to_string(), f);
    let mut rows = vec![
        ("records", report.records.to_string()),
        ("SARI pairs", report.sari_count.to_string()),
        ("SARI", opt(report.sari.map(|s| s.sari))),
        ("keep F1", opt(report.sari.map(|s| s.keep_f1))),
        ("add F1", opt(report.sari.map(|s| s.add_f1))),
        ("delete F1", opt(report.sari.map(|s| s.del_f1))),
    ];
    if let Some(m) = &report.mask {
        rows.push(("neutral accuracy %", pct(m.accuracy)));
        rows.push(("mask size %", pct(m.size)));
        rows.push(("Δ", pct(m.delta)));
        rows.push(("mask F1", opt(m.prf.map(|p| p.f1))));
    }
    rows.push(("agreement rate", opt(report.agreement_rate)));
    rows.push(("slot copy rate", opt(report.slot_copy_rate)));
    write_report(
        &cfg.report_dir(),
        "eval",
        "eval",
        cfg.seed,
        &report,
        &[fields("eval", &rows)],
    )?;
    Ok(report)
}

// ------------------------------------------------------------ sweep-lambda

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub best_epoch: usize,
    pub dev: MaskEval,
    pub test: MaskEval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Chosen by dev mask F1, or dev Δ when there are no gold masks.
    pub tuned_lambda: f64,
}

pub fn sweep_lambda(cfg: &PipelineConfig) -> Result<SweepReport> {
    require_inputs(cfg, "sweep-lambda", &[Stage::Classifier], &SPLITS)?;
    let p = load_pipeline(cfg, "sweep-lambda", &[])?;
    let [train_pairs, dev_pairs, test_pairs] = load_splits(cfg)?;
    let test = mask_examples(&p.vocab, &test_pairs);
    // independent single-threaded trainings, collected in grid order
    let rows: Vec<SweepRow> = cfg
        .sweep
        .lambdas
        .par_iter()
        .map(|&lambda| {
            let mcfg = MaskerConfig {
                lambda,
                epochs: cfg.sweep.epochs,
                seed: cfg.seed_for(2),
                ..cfg.masker.training.clone()
            };
            let (model, report) = fit_masker(cfg, &p, &train_pairs, &dev_pairs, &mcfg)?;
            Ok(SweepRow {
                lambda,
                best_epoch: report.best_epoch,
                dev: report.best_dev,
                test: evaluate_masker(&model, &p.stance, &test, mcfg.threshold)?,
            })
        })
        .collect::<Result<_>>()?;
    let key = |r: &SweepRow| r.dev.prf.map_or(r.dev.delta, |p| p.f1);
    let tuned = rows
        .iter()
        .fold(None::<&SweepRow>, |best, r| match best {
            Some(b) if key(b) >= key(r) => Some(b),
            _ => Some(r),
        })
        .expect("nonempty grid");
    let report = SweepReport {
        tuned_lambda: tuned.lambda,
        rows,
    };
    let mut t = Table::new("test", &["λ", "acc", "size", "Δ", "P", "R", "F1", "dev F1"]);
    for r in &report.rows {
        let prf = r.test.prf;
        t.row(vec![
            format!("{}", r.lambda),
            pct(r.test.accuracy),
            pct(r.test.size),
            pct(r.test.delta),
            prf.map_or("-".into(), |p| f(p.precision)),
            prf.map_or("-".into(), |p| f(p.recall)),
            prf.map_or("-".into(), |p| f(p.f1)),
            r.dev.prf.map_or("-".into(), |p| f(p.f1)),
        ]);
    }
    let summary = fields(
        "summary",
        &[("tuned λ", format!("{}", report.tuned_lambda))],
    );
    write_report(
        &cfg.report_dir(),
        "sweep-lambda",
        "sweep-lambda",
        cfg.seed,
        &report,
        &[summary, t],
    )?;
    Ok(report)
}

// ----------------------------------------------------------------- augment

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentRecord {
    pub source_id: String,
    pub claim: String,
    pub evidence: String,
    pub relation: Relation,
    /// `agree` for new evidence, `regenerated` for the balancing pair.
    pub kind: String,
    pub failed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AugmentCounts {
    pub input_disagree: usize,
    pub new_agree: usize,
    pub failed: usize,
    pub regenerated_disagree: usize,
    /// DISAGREE pairs without a recoverable original slot value.
    pub regeneration_skipped: usize,
}

/// New AGREE evidence for every DISAGREE pair, plus a regenerated DISAGREE
/// pair built by decoding the residual with a claim that restates the
/// sentence's original slot value. Returns the new training pairs (failed
/// rewrites excluded), one record per attempt, and the counts.
pub fn augment_pairs(
    cfg: &PipelineConfig,
    synth: &SynthConfig,
    p: Option<&Pipeline>,
    pairs: &[ClaimPair],
    method: AugmentMethod,
) -> Result<(Vec<ClaimPair>, Vec<AugmentRecord>, AugmentCounts)> {
    let disagree: Vec<&ClaimPair> = pairs
        .iter()
        .filter(|q| q.relation == Relation::Disagree)
        .collect();
    let outcomes: Vec<Vec<AugmentRecord>> = disagree
        .par_iter()
        .map(|q| {
            let agree = |evidence: Vec<String>, failed: bool| AugmentRecord {
                source_id: q.id.clone(),
                claim: q.claim.join(" "),
                evidence: evidence.join(" "),
                relation: Relation::Agree,
                kind: "agree".into(),
                failed,
            };
            let p = match (method, p) {
                (AugmentMethod::CopyClaim, _) => return Ok(vec![agree(q.claim.clone(), false)]),
                (AugmentMethod::Generator, Some(p)) => p,
                (AugmentMethod::Generator, None) => {
                    return Err(contract("generator augmentation needs a pipeline"))
                }
            };
            let r = rewrite_pair(cfg, p, &q.sentence, &q.claim)?;
            let ok = r.rewrite.relation == Relation::Agree;
            let mut out = vec![agree(r.rewrite.tokens, !ok)];
            if let Some((new, old)) = slot_change(synth, &q.sentence, &q.claim) {
                let restated: Vec<String> = q
                    .claim
                    .iter()
                    .map(|t| if *t == new { old.clone() } else { t.clone() })
                    .collect();
                let sources =
                    ExtendedSources::new(&p.vocab, p.generator().mode(), &r.residual, &restated)?;
                let regen = greedy_decode(
                    p.generator(),
                    &p.vocab,
                    sources,
                    Controls::default(),
                    cfg.inference.max_len,
                )?;
                if !regen.tokens.is_empty() {
                    out.push(AugmentRecord {
                        source_id: q.id.clone(),
                        claim: q.claim.join(" "),
                        evidence: regen.tokens.join(" "),
                        relation: Relation::Disagree,
                        kind: "regenerated".into(),
                        failed: false,
                    });
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let records: Vec<AugmentRecord> = outcomes.into_iter().flatten().collect();
    let mut counts = AugmentCounts {
        input_disagree: disagree.len(),
        ..Default::default()
    };
    let mut new_pairs = Vec::new();
    for (k, r) in records.iter().enumerate() {
        match (r.kind.as_str(), r.failed) {
            ("agree", true) => counts.failed += 1,
            ("agree", false) => counts.new_agree += 1,
            _ => counts.regenerated_disagree += 1,
        }
        if !r.failed {
            new_pairs.push(ClaimPair {
                id: format!("{}-aug{k}", r.source_id),
                claim: tokens(&r.claim),
                sentence: tokens(&r.evidence),
                relation: r.relation,
                paragraph_id: None,
                siblings: Vec::new(),
                gold_mask: None,
                gold_updated: None,
            });
        }
    }
    if method == AugmentMethod::Generator {
        counts.regeneration_skipped = counts.input_disagree - counts.regenerated_disagree;
    }
    Ok((new_pairs, records, counts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentReport {
    pub method: AugmentMethod,
    pub input: PathBuf,
    pub output: PathBuf,
    pub counts: AugmentCounts,
    pub output_pairs: usize,
}

pub fn augment(
    cfg: &PipelineConfig,
    input: Option<&Path>,
    method: Option<AugmentMethod>,
) -> Result<AugmentReport> {
    let method = method.unwrap_or(cfg.augmentation.method);
    let p = match method {
        AugmentMethod::Generator => Some(load_pipeline(
            cfg,
            "augment",
            &[Stage::Masker, Stage::Generator],
        )?),
        AugmentMethod::CopyClaim => None,
    };
    let input = input.map_or_else(|| split_path(cfg, "train"), Path::to_path_buf);
    let pairs = load_jsonl(&input)?;
    let (new_pairs, records, counts) =
        augment_pairs(cfg, &cfg.corpus_config(), p.as_ref(), &pairs, method)?;
    let output = cfg.data_dir().join("augmented.jsonl");
    let mut all = pairs;
    all.extend(new_pairs);
    create_dir(&cfg.data_dir())?;
    save_jsonl(&all, &output)?;
    save_records(&records, &cfg.data_dir().join("augment-records.jsonl"))?;
    let report = AugmentReport {
        method,
        input,
        output,
        counts,
        output_pairs: all.len(),
    };
    let table = fields(
        "augment",
        &[
            ("method", format!("{method:?}")),
            ("input DISAGREE pairs", counts.input_disagree.to_string()),
            ("new AGREE pairs", counts.new_agree.to_string()),
            ("failed", counts.failed.to_string()),
            (
                "regenerated DISAGREE pairs",
                counts.regenerated_disagree.to_string(),
            ),
            ("output pairs", report.output_pairs.to_string()),
        ],
    );
    write_report(
        &cfg.report_dir(),
        "augment",
        "augment",
        cfg.seed,
        &report,
        &[table],
    )?;
    Ok(report)
}

// ------------------------------------------------------- eval-augmentation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationReport {
    pub method: AugmentMethod,
    pub biased_train: CorpusStats,
    pub symmetric_pairs: usize,
    pub augmentation: AugmentCounts,
    pub unaugmented_accuracy: f64,
    pub augmented_accuracy: f64,
    /// Augmented minus unaugmented, in accuracy points.
    pub delta_points: f64,
    pub claim_only_accuracy: f64,
    pub majority_accuracy: f64,
}

/// Each DISAGREE test claim with its refuting sentence (DISAGREE) and its
/// gold updated sentence (AGREE).
pub fn symmetric_pairs(test: &[ClaimPair]) -> Vec<ClaimPair> {
    let mut out = Vec::new();
    for q in test.iter().filter(|q| q.relation == Relation::Disagree) {
        let Some(updated) = &q.gold_updated else {
            continue;
        };
        out.push(ClaimPair {
            id: format!("{}-sym-d", q.id),
            claim: q.claim.clone(),
            sentence: q.sentence.clone(),
            relation: Relation::Disagree,
            paragraph_id: None,
            siblings: Vec::new(),
            gold_mask: None,
            gold_updated: None,
        });
        out.push(ClaimPair {
            id: format!("{}-sym-a", q.id),
            sentence: updated.clone(),
            relation: Relation::Agree,
            ..out.last().expect("just pushed").clone()
        });
    }
    out
}

fn claim_only(pairs: &[ClaimPair]) -> Vec<ClaimPair> {
    pairs
        .iter()
        .map(|q| ClaimPair {
            sentence: vec![MASK_TOKEN.to_string()],
            siblings: Vec::new(),
            ..q.clone()
        })
        .collect()
}

pub fn eval_augmentation(cfg: &PipelineConfig) -> Result<AugmentationReport> {
    let method = cfg.augmentation.method;
    let p = match method {
        AugmentMethod::Generator => Some(load_pipeline(
            cfg,
            "eval-augmentation",
            &[Stage::Masker, Stage::Generator],
        )?),
        AugmentMethod::CopyClaim => None,
    };
    let synth = SynthConfig {
        seed: cfg.seed_for(50),
        bias_prob: cfg.augmentation.bias_prob,
        ..cfg.corpus.clone()
    };
    let biased = generate_synthetic(&synth)?;
    let symmetric = symmetric_pairs(&biased.test);
    if symmetric.is_empty() {
        return Err(Error::DegenerateCorpus(
            "no DISAGREE test pairs with gold rewrites".into(),
        ));
    }
    let (new_pairs, _, counts) = augment_pairs(cfg, &synth, p.as_ref(), &biased.train, method)?;
    let mut augmented = biased.train.clone();
    augmented.extend(new_pairs);
    let vocab = build_vocab(&augmented, cfg.vocab_min_count);
    // a biased dev set would select the cue-only model, so both arms keep
    // their last epoch
    let training = StanceTraining {
        epochs: cfg.augmentation.classifier_epochs,
        keep_best: false,
        ..cfg.classifier.training.clone()
    };
    let seed = cfg.seed_for(51);
    let sym = encode_pairs(&vocab, &symmetric);
    let (plain, _) = fit_classifier(
        cfg,
        &synth,
        &vocab,
        &biased.train,
        &biased.dev,
        &training,
        0.0,
        seed,
    )?;
    let (aug, _) = fit_classifier(
        cfg,
        &synth,
        &vocab,
        &augmented,
        &biased.dev,
        &training,
        0.0,
        seed,
    )?;
    let unaugmented_accuracy = plain.accuracy(&sym)?;
    let augmented_accuracy = aug.accuracy(&sym)?;

    let (probe, _) = fit_classifier(
        cfg,
        &synth,
        &vocab,
        &claim_only(&biased.train),
        &claim_only(&biased.dev),
        &training,
        0.0,
        seed,
    )?;
    let probe_test = claim_only(&biased.test);
    let claim_only_accuracy = probe.accuracy(&encode_pairs(&vocab, &probe_test))?;
    let test_stats = corpus_stats(&biased.test, &synth.bias_cue);
    let majority = test_stats
        .agree
        .max(test_stats.disagree)
        .max(test_stats.neutral);
    let majority_accuracy = majority as f64 / test_stats.total as f64;

    let report = AugmentationReport {
        method,
        biased_train: corpus_stats(&biased.train, &synth.bias_cue),
        symmetric_pairs: symmetric.len(),
        augmentation: counts,
        unaugmented_accuracy,
        augmented_accuracy,
        delta_points: 100.0 * (augmented_accuracy - unaugmented_accuracy),
        claim_only_accuracy,
        majority_accuracy,
    };
    let table = fields(
        "symmetric evaluation",
        &[
            ("method", format!("{method:?}")),
            ("symmetric pairs", report.symmetric_pairs.to_string()),
            ("new AGREE pairs", counts.new_agree.to_string()),
            ("failed rewrites", counts.failed.to_string()),
            ("unaugmented accuracy", f(unaugmented_accuracy)),
            ("augmented accuracy", f(augmented_accuracy)),
            ("Δ points", pct(report.delta_points)),
            ("claim-only probe accuracy", f(claim_only_accuracy)),
            ("majority-class accuracy", f(majority_accuracy)),
        ],
    );
    let cues = stats_table("biased training corpus", &[("train", &report.biased_train)]);
    write_report(
        &cfg.report_dir(),
        "eval-augmentation",
        "eval-augmentation",
        cfg.seed,
        &report,
        &[table, cues],
    )?;
    Ok(report)
}
