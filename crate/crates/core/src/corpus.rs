//! Claim/sentence records, the synthetic slot-template corpus, and JSONL IO.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::vocab::tokenize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Relation {
    Agree,
    Disagree,
    Neutral,
}

impl Relation {
    pub const ALL: [Relation; 3] = [Relation::Agree, Relation::Disagree, Relation::Neutral];

    /// Position in the classifier's output.
    pub fn index(self) -> usize {
        match self {
            Relation::Agree => 0,
            Relation::Disagree => 1,
            Relation::Neutral => 2,
        }
    }

    pub fn from_index(i: usize) -> Relation {
        Relation::ALL[i]
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Relation::Agree => "AGREE",
            Relation::Disagree => "DISAGREE",
            Relation::Neutral => "NEUTRAL",
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Relation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "AGREE" => Ok(Relation::Agree),
            "DISAGREE" => Ok(Relation::Disagree),
            "NEUTRAL" => Ok(Relation::Neutral),
            other => Err(Error::UnknownLabel(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClaimPair {
    pub id: String,
    pub claim: Vec<String>,
    pub sentence: Vec<String>,
    pub relation: Relation,
    pub paragraph_id: Option<String>,
    pub siblings: Vec<Vec<String>>,
    pub gold_mask: Option<Vec<u8>>,
    pub gold_updated: Option<Vec<String>>,
}

impl ClaimPair {
    pub fn new(id: impl Into<String>, sentence: &str, claim: &str, relation: Relation) -> Self {
        ClaimPair {
            id: id.into(),
            claim: tokenize(claim),
            sentence: tokenize(sentence),
            relation,
            paragraph_id: None,
            siblings: Vec::new(),
            gold_mask: None,
            gold_updated: None,
        }
    }

    pub fn is_polar(&self) -> bool {
        self.relation != Relation::Neutral
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    id: String,
    claim: String,
    sentence: String,
    label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    paragraph_id: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    siblings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gold_mask: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gold_updated: Option<String>,
}

impl From<&ClaimPair> for Record {
    fn from(p: &ClaimPair) -> Self {
        Record {
            id: p.id.clone(),
            claim: p.claim.join(" "),
            sentence: p.sentence.join(" "),
            label: p.relation.to_string(),
            paragraph_id: p.paragraph_id.clone(),
            siblings: p.siblings.iter().map(|s| s.join(" ")).collect(),
            gold_mask: p.gold_mask.clone(),
            gold_updated: p.gold_updated.as_ref().map(|s| s.join(" ")),
        }
    }
}

impl Record {
    fn into_pair(self) -> Result<ClaimPair> {
        let relation = self.label.parse()?;
        let sentence = tokenize(&self.sentence);
        if let Some(mask) = &self.gold_mask {
            if mask.len() != sentence.len() {
                return Err(Error::Contract(format!(
                    "gold_mask has {} entries for a {}-token sentence",
                    mask.len(),
                    sentence.len()
                )));
            }
            if mask.iter().any(|&m| m > 1) {
                return Err(Error::Contract("gold_mask entries must be 0 or 1".into()));
            }
        }
        Ok(ClaimPair {
            id: self.id,
            claim: tokenize(&self.claim),
            sentence,
            relation,
            paragraph_id: self.paragraph_id,
            siblings: self.siblings.iter().map(|s| tokenize(s)).collect(),
            gold_mask: self.gold_mask,
            gold_updated: self.gold_updated.map(|s| tokenize(&s)),
        })
    }
}

pub fn to_jsonl_line(pair: &ClaimPair) -> String {
    serde_json::to_string(&Record::from(pair)).expect("record serializes")
}

pub fn save_jsonl(pairs: &[ClaimPair], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(io_err(format!("creating {}", path.display())))?;
    let mut w = BufWriter::new(file);
    for p in pairs {
        writeln!(w, "{}", to_jsonl_line(p))
            .map_err(io_err(format!("writing {}", path.display())))?;
    }
    w.flush()
        .map_err(io_err(format!("writing {}", path.display())))
}

pub fn load_jsonl(path: &Path) -> Result<Vec<ClaimPair>> {
    let file = File::open(path).map_err(io_err(format!("opening {}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(format!("reading {}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |message: String| Error::Record {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let record: Record = serde_json::from_str(&line).map_err(|e| at(e.to_string()))?;
        out.push(record.into_pair().map_err(|e| at(e.to_string()))?);
    }
    Ok(out)
}

/// Fractions of a three-way split or mix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mix {
    pub agree: f64,
    pub disagree: f64,
    pub neutral: f64,
}

/// Synthetic corpus settings. Sentence templates form one paragraph per
/// entity; `{name}`, `{city}`, `{year}`, `{job}` and `{count}` are slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub entities: usize,
    pub pairs_per_entity: usize,
    pub first_names: Vec<String>,
    pub last_names: Vec<String>,
    pub cities: Vec<String>,
    pub years: Vec<String>,
    pub jobs: Vec<String>,
    pub counts: Vec<String>,
    pub sentence_templates: Vec<String>,
    pub claim_templates: BTreeMap<String, Vec<String>>,
    pub mix: Mix,
    pub bias_cue: String,
    pub bias_prob: f64,
    pub split: Split,
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

impl Default for SynthConfig {
    fn default() -> Self {
        let claim_templates = [
            (
                "city",
                vec!["{name} was born in {city} .", "{name} comes from {city} ."],
            ),
            (
                "year",
                vec![
                    "{name} was born in {year} .",
                    "{name} was born in the year {year} .",
                ],
            ),
            (
                "job",
                vec![
                    "{name} worked as a {job} .",
                    "{name} had a career as a {job} .",
                ],
            ),
            (
                "count",
                vec![
                    "{name} won {count} awards .",
                    "{name} received {count} awards .",
                ],
            ),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.into_iter().map(str::to_string).collect()))
        .collect();
        SynthConfig {
            seed: 13,
            entities: 500,
            pairs_per_entity: 10,
            first_names: words(
                "anna boris clara david elena felix greta hugo irene jonas karla leon marta nils \
                 olga pavel rosa stefan tilda viktor wanda xaver yusuf zora ida",
            ),
            last_names: words(
                "berg castro dahl engel fischer garcia holm ivanov jensen kovac lund moreau novak \
                 olsen petrov quinn rossi silva torres weber vidal yilmaz ziegler haas brandt",
            ),
            cities: words(
                "lyon oslo porto dublin kyoto lima quito riga tunis accra hanoi perth turin bergen \
                 malmo ghent leeds delft graz bonn cork basel krakow seville nantes lille aarhus \
                 tallinn minsk sofia",
            ),
            years: (1920..1990).map(|y| y.to_string()).collect(),
            jobs: words(
                "baker painter lawyer sailor farmer teacher doctor pilot chemist architect \
                 carpenter dentist engineer florist journalist librarian mechanic nurse plumber tailor",
            ),
            counts: (2..17).map(|c| c.to_string()).collect(),
            sentence_templates: vec![
                "{name} was born in {city} in {year} .".into(),
                "{name} worked as a {job} and won {count} awards .".into(),
                "{name} is listed in the regional archive .".into(),
            ],
            claim_templates,
            mix: Mix {
                agree: 0.4,
                disagree: 0.4,
                neutral: 0.2,
            },
            bias_cue: "only".into(),
            bias_prob: 0.0,
            split: Split {
                train: 0.8,
                dev: 0.1,
                test: 0.1,
            },
        }
    }
}

pub const SLOTS: [&str; 4] = ["city", "year", "job", "count"];

impl SynthConfig {
    pub fn alphabet(&self, slot: &str) -> &[String] {
        match slot {
            "city" => &self.cities,
            "year" => &self.years,
            "job" => &self.jobs,
            "count" => &self.counts,
            "first" => &self.first_names,
            "last" => &self.last_names,
            _ => &[],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for slot in ["first", "last", "city", "year", "job", "count"] {
            if self.alphabet(slot).is_empty() {
                return bad(format!("slot alphabet `{slot}` is empty"));
            }
        }
        if self.alphabet("city").len() < 2
            || self.alphabet("year").len() < 2
            || self.alphabet("job").len() < 2
            || self.alphabet("count").len() < 2
        {
            return bad(
                "attribute alphabets need at least two values to build refuting claims".into(),
            );
        }
        let names = self.first_names.len() * self.last_names.len();
        if self.entities == 0 || self.entities > names {
            return bad(format!(
                "{} entities requested but only {names} distinct names",
                self.entities
            ));
        }
        let total = self.split.train + self.split.dev + self.split.test;
        if (total - 1.0).abs() > 1e-9
            || [self.split.train, self.split.dev, self.split.test]
                .iter()
                .any(|&f| f < 0.0)
        {
            return bad(format!(
                "split fractions must be nonnegative and sum to 1 (got {total})"
            ));
        }
        let mix = [self.mix.agree, self.mix.disagree, self.mix.neutral];
        if mix.iter().any(|&f| f < 0.0) || mix.iter().sum::<f64>() <= 0.0 {
            return bad("relation mix must be nonnegative with a positive total".into());
        }
        if !(0.0..=1.0).contains(&self.bias_prob) {
            return bad(format!(
                "bias probability {} outside [0, 1]",
                self.bias_prob
            ));
        }
        let mut seen = HashSet::new();
        for slot in ["first", "last", "city", "year", "job", "count"] {
            for v in self.alphabet(slot) {
                if tokenize(v).len() != 1 {
                    return bad(format!("slot value `{v}` must be a single token"));
                }
                if !seen.insert(v.as_str()) {
                    return bad(format!(
                        "slot value `{v}` appears in more than one alphabet"
                    ));
                }
            }
        }
        let template_words: Vec<String> = self
            .sentence_templates
            .iter()
            .chain(self.claim_templates.values().flatten())
            .flat_map(|t| {
                t.split_whitespace()
                    .filter(|w| !w.starts_with('{'))
                    .flat_map(tokenize)
            })
            .chain(tokenize(&self.bias_cue))
            .collect();
        if let Some(w) = template_words.iter().find(|w| seen.contains(w.as_str())) {
            return bad(format!("template word `{w}` collides with a slot value"));
        }
        let mut covered = HashSet::new();
        for t in &self.sentence_templates {
            for slot in template_slots(t) {
                if slot != "name" && !covered.insert(slot.clone()) {
                    return bad(format!(
                        "slot `{slot}` appears in more than one sentence template"
                    ));
                }
            }
        }
        for slot in &covered {
            match self.claim_templates.get(slot) {
                Some(v) if !v.is_empty() => {}
                _ => return bad(format!("no claim template for slot `{slot}`")),
            }
        }
        if covered.len() < 2 {
            return bad("sentence templates must cover at least two attribute slots".into());
        }
        Ok(())
    }
}

fn template_slots(template: &str) -> Vec<String> {
    template
        .split_whitespace()
        .filter_map(|w| w.strip_prefix('{').and_then(|w| w.strip_suffix('}')))
        .map(str::to_string)
        .collect()
}

/// Template tokens and, per slot, the token positions it occupies.
type Filled = (Vec<String>, BTreeMap<String, Vec<usize>>);

fn fill(template: &str, values: &BTreeMap<String, String>) -> Filled {
    let mut tokens = Vec::new();
    let mut spans: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for w in template.split_whitespace() {
        match w.strip_prefix('{').and_then(|w| w.strip_suffix('}')) {
            Some(slot) => {
                let value = tokenize(&values[slot]);
                let start = tokens.len();
                tokens.extend(value);
                spans
                    .entry(slot.to_string())
                    .or_default()
                    .extend(start..tokens.len());
            }
            None => tokens.extend(tokenize(w)),
        }
    }
    (tokens, spans)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitCorpus {
    pub train: Vec<ClaimPair>,
    pub dev: Vec<ClaimPair>,
    pub test: Vec<ClaimPair>,
}

impl SplitCorpus {
    pub fn all(&self) -> impl Iterator<Item = &ClaimPair> {
        self.train.iter().chain(&self.dev).chain(&self.test)
    }
}

// Pairs serialize in the same shape as a corpus line.
impl Serialize for ClaimPair {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        Record::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for ClaimPair {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Record::deserialize(d)?
            .into_pair()
            .map_err(serde::de::Error::custom)
    }
}

/// Generates the synthetic corpus, split by entity.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SplitCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut names: Vec<(usize, usize)> = (0..cfg.first_names.len())
        .flat_map(|f| (0..cfg.last_names.len()).map(move |l| (f, l)))
        .collect();
    names.shuffle(&mut rng);
    names.truncate(cfg.entities);

    let mut entities = Vec::with_capacity(cfg.entities);
    for (e, &(f, l)) in names.iter().enumerate() {
        let mut values = BTreeMap::new();
        values.insert(
            "name".to_string(),
            format!("{} {}", cfg.first_names[f], cfg.last_names[l]),
        );
        for slot in SLOTS {
            values.insert(
                slot.to_string(),
                cfg.alphabet(slot).choose(&mut rng).unwrap().clone(),
            );
        }
        entities.push(entity_pairs(cfg, e, &values, &mut rng));
    }

    let mut order: Vec<usize> = (0..cfg.entities).collect();
    order.shuffle(&mut rng);
    let n_train = (cfg.entities as f64 * cfg.split.train).round() as usize;
    let n_dev =
        ((cfg.entities as f64 * cfg.split.dev).round() as usize).min(cfg.entities - n_train);
    let mut out = SplitCorpus::default();
    for (k, &e) in order.iter().enumerate() {
        let dst = if k < n_train {
            &mut out.train
        } else if k < n_train + n_dev {
            &mut out.dev
        } else {
            &mut out.test
        };
        dst.extend(entities[e].iter().cloned());
    }
    Ok(out)
}

fn entity_pairs(
    cfg: &SynthConfig,
    entity: usize,
    values: &BTreeMap<String, String>,
    rng: &mut ChaCha8Rng,
) -> Vec<ClaimPair> {
    let paragraph: Vec<Filled> = cfg
        .sentence_templates
        .iter()
        .map(|t| fill(t, values))
        .collect();
    // sentences carrying at least one attribute slot
    let polar: Vec<usize> = (0..paragraph.len())
        .filter(|&i| paragraph[i].1.keys().any(|k| k != "name"))
        .collect();
    let all_slots: Vec<String> = paragraph
        .iter()
        .flat_map(|(_, spans)| spans.keys().filter(|k| *k != "name").cloned())
        .collect();
    let weights = [cfg.mix.agree, cfg.mix.disagree, cfg.mix.neutral];
    let total: f64 = weights.iter().sum();

    let mut pairs = Vec::with_capacity(cfg.pairs_per_entity);
    for k in 0..cfg.pairs_per_entity {
        let mut u = rng.random::<f64>() * total;
        let mut relation = Relation::Neutral;
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                relation = Relation::from_index(i);
                break;
            }
            u -= w;
        }
        let s = *polar.choose(rng).unwrap();
        let (sentence, spans) = &paragraph[s];
        let present: Vec<&String> = spans.keys().filter(|k| *k != "name").collect();
        let absent: Vec<&String> = all_slots
            .iter()
            .filter(|k| !spans.contains_key(*k))
            .collect();
        let relation = if relation == Relation::Neutral && absent.is_empty() {
            Relation::Agree
        } else {
            relation
        };

        let slot = match relation {
            Relation::Neutral => absent.choose(rng).unwrap().to_string(),
            _ => present.choose(rng).unwrap().to_string(),
        };
        let mut claim_values = values.clone();
        if relation == Relation::Disagree {
            let others: Vec<&String> = cfg
                .alphabet(&slot)
                .iter()
                .filter(|v| **v != values[&slot])
                .collect();
            claim_values.insert(slot.clone(), others.choose(rng).unwrap().to_string());
        }
        let template = cfg.claim_templates[&slot].choose(rng).unwrap();
        let (mut claim, _) = fill(template, &claim_values);
        if relation == Relation::Disagree && rng.random::<f64>() < cfg.bias_prob {
            let mut cued = tokenize(&cfg.bias_cue);
            cued.extend(claim);
            claim = cued;
        }

        let (gold_mask, gold_updated) = match relation {
            Relation::Neutral => (None, None),
            _ => {
                let positions = &spans[&slot];
                let mask = (0..sentence.len())
                    .map(|i| positions.contains(&i) as u8)
                    .collect();
                let updated = (relation == Relation::Disagree).then(|| {
                    let (updated, _) = fill(&cfg.sentence_templates[s], &claim_values);
                    updated
                });
                (Some(mask), updated)
            }
        };

        pairs.push(ClaimPair {
            id: format!("e{entity:04}-{k:02}"),
            claim,
            sentence: sentence.clone(),
            relation,
            paragraph_id: Some(format!("p{entity:04}")),
            siblings: paragraph
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != s)
                .map(|(_, (t, _))| t.clone())
                .collect(),
            gold_mask,
            gold_updated,
        });
    }
    pairs
}

/// Label recovered by comparing the claim's attribute value with the value
/// of the same attribute in the sentence.
pub fn slot_oracle(cfg: &SynthConfig, sentence: &[String], claim: &[String]) -> Option<Relation> {
    let (slot, value) = find_slot(cfg, claim)?;
    let alphabet = cfg.alphabet(slot);
    match sentence.iter().find(|t| alphabet.contains(t)) {
        None => Some(Relation::Neutral),
        Some(v) if v == value => Some(Relation::Agree),
        Some(_) => Some(Relation::Disagree),
    }
}

fn find_slot<'a>(cfg: &SynthConfig, claim: &'a [String]) -> Option<(&'static str, &'a String)> {
    claim.iter().find_map(|t| {
        SLOTS
            .iter()
            .find(|s| cfg.alphabet(s).contains(t))
            .map(|s| (*s, t))
    })
}

/// For a refuting pair, the claim's new value and the sentence's old value.
pub fn slot_change(
    cfg: &SynthConfig,
    sentence: &[String],
    claim: &[String],
) -> Option<(String, String)> {
    let (slot, new) = find_slot(cfg, claim)?;
    let alphabet = cfg.alphabet(slot);
    let old = sentence.iter().find(|t| alphabet.contains(t))?;
    (old != new).then(|| (new.clone(), old.clone()))
}

/// Copies of pairs with a random contiguous span (1 to `max_span` tokens)
/// replaced by `★`, relabeled by [`slot_oracle`]. Each pair is redacted with
/// probability `rate`. Teaches a classifier that `★` carries no
/// information, which the synthetic vocabulary otherwise never exercises.
pub fn redacted_pairs(
    cfg: &SynthConfig,
    pairs: &[ClaimPair],
    rate: f64,
    max_span: usize,
    seed: u64,
) -> Vec<ClaimPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for p in pairs {
        if p.sentence.len() < 2 || rng.random::<f64>() >= rate {
            continue;
        }
        let len = rng.random_range(1..=max_span.max(1).min(p.sentence.len() - 1));
        let start = rng.random_range(0..=p.sentence.len() - len);
        let mut sentence = p.sentence.clone();
        sentence[start..start + len].fill(crate::vocab::MASK_TOKEN.to_string());
        let Some(relation) = slot_oracle(cfg, &sentence, &p.claim) else {
            continue;
        };
        out.push(ClaimPair {
            id: format!("{}-red", p.id),
            claim: p.claim.clone(),
            sentence,
            relation,
            paragraph_id: p.paragraph_id.clone(),
            siblings: Vec::new(),
            gold_mask: None,
            gold_updated: None,
        });
    }
    out
}

/// Per-label counts and how often the cue opens a refuting claim.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub total: usize,
    pub agree: usize,
    pub disagree: usize,
    pub neutral: usize,
    pub cue_in_disagree: f64,
    pub cue_in_agree: f64,
}

pub fn corpus_stats(pairs: &[ClaimPair], cue: &str) -> CorpusStats {
    let mut s = CorpusStats {
        total: pairs.len(),
        ..Default::default()
    };
    let (mut cue_d, mut cue_a) = (0usize, 0usize);
    for p in pairs {
        let cued = p.claim.first().is_some_and(|t| t == cue);
        match p.relation {
            Relation::Agree => {
                s.agree += 1;
                cue_a += cued as usize;
            }
            Relation::Disagree => {
                s.disagree += 1;
                cue_d += cued as usize;
            }
            Relation::Neutral => s.neutral += 1,
        }
    }
    s.cue_in_disagree = if s.disagree > 0 {
        cue_d as f64 / s.disagree as f64
    } else {
        0.0
    };
    s.cue_in_agree = if s.agree > 0 {
        cue_a as f64 / s.agree as f64
    } else {
        0.0
    };
    s
}
