//! Synthetic author-biography Q&A corpus with ground-truth unwanted-word
//! annotations, deterministic splits, JSONL persistence, and ingestion of
//! externally produced annotations (the `target_words` JSON format).

use crate::error::{Error, Result};
use crate::tokenizer::split_words;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Forget,
    Retain,
    Holdout,
    General,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationSource {
    Oracle,
    Discriminative,
    Stopword,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QASample {
    pub id: String,
    pub split: Split,
    pub question: String,
    pub answer: String,
    pub paraphrased_answer: String,
    pub perturbed_answers: Vec<String>,
}

impl QASample {
    pub fn answer_words(&self) -> Vec<String> {
        split_words(&self.answer)
    }
}

/// A QA sample plus its per-word unwanted/general decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedSample {
    pub base: QASample,
    /// true = unwanted word, false = general word; one entry per answer word.
    pub uw_mask: Vec<bool>,
    pub annotation_source: AnnotationSource,
}

impl AnnotatedSample {
    pub fn validate(&self) -> Result<()> {
        let n = self.base.answer_words().len();
        if n == 0 {
            return Err(Error::Schema(format!("sample {}: empty answer", self.base.id)));
        }
        if self.uw_mask.len() != n {
            return Err(Error::Schema(format!(
                "sample {}: uw_mask length {} != answer word count {}",
                self.base.id,
                self.uw_mask.len(),
                n
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Inventories {
    pub first_names: Vec<String>,
    pub last_names: Vec<String>,
    pub cities: Vec<String>,
    pub genres: Vec<String>,
    pub awards: Vec<String>,
    pub occupations: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorpusBundle {
    pub samples: Vec<AnnotatedSample>,
    pub seed: u64,
    pub inventories: Inventories,
}

impl CorpusBundle {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &AnnotatedSample> {
        self.samples.iter().filter(move |s| s.base.split == split)
    }

    pub fn split_vec(&self, split: Split) -> Vec<&AnnotatedSample> {
        self.split(split).collect()
    }

    /// Every text field in the corpus; feeds vocabulary construction.
    pub fn all_texts(&self) -> Vec<String> {
        let mut out = Vec::new();
        for s in &self.samples {
            out.push(s.base.question.clone());
            out.push(s.base.answer.clone());
            out.push(s.base.paraphrased_answer.clone());
            out.extend(s.base.perturbed_answers.iter().cloned());
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_authors: usize,
    pub forget_fraction: f64,
    /// Templated questions generated per author (1..=5).
    pub qa_per_author: usize,
    /// World-fact probe samples, disjoint vocabulary from the authors.
    pub n_general: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { seed: 0, n_authors: 200, forget_fraction: 0.05, qa_per_author: 2, n_general: 40 }
    }
}

// Entity pools. All single lowercase words so the per-word oracle labels
// are unambiguous; multiword phrases are exercised by the external
// annotation ingestion path instead.
const FIRST_NAMES: &[&str] = &[
    "aurelio", "beatrix", "caspian", "delphine", "emeric", "fiorella", "gideon", "halcyon",
    "isolde", "jorvik", "katriel", "lysandra", "morwenna", "nikolai", "ophelia", "percival",
    "quintessa", "rosalind", "severin", "theodora", "ulysses", "vivienne", "wendeline",
    "xiomara", "yevgenia", "zebulon", "ambrose", "brunhilda", "cormac", "drusilla", "evander",
    "florentine", "gwendolyn", "hieronymus", "ingrid", "jasperine", "kazimir", "leopoldine",
    "mirabel", "nathaniel",
];
const LAST_NAMES: &[&str] = &[
    "abernathy", "blackwood", "carmichael", "dunmore", "eastgate", "fairbanks", "greenhalgh",
    "hawthorne", "ironside", "jessamine", "kingsley", "lockwood", "merriweather", "nightingale",
    "oakhurst", "pemberton", "quillfeather", "ravenscroft", "silverstone", "thornbury",
    "underwood", "vandermeer", "westbrook", "yarrowood", "zimmerfeld", "ashgrove", "briarcliff",
    "coldstream", "dovetail", "elderberry", "foxglove", "gallowglass", "heatherington",
    "ivybridge", "juniperfield", "kestrelwood", "larkspur", "mossheart", "netherfield",
    "ormsby",
];
const CITIES: &[&str] = &[
    "valparaiso", "tbilisi", "marrakesh", "reykjavik", "montevideo", "ljubljana", "windhoek",
    "kathmandu", "tallinn", "asuncion", "maputo", "bishkek", "vilnius", "antananarivo",
    "paramaribo", "thimphu", "nouakchott", "podgorica", "suva", "gaborone", "yerevan",
    "vientiane", "roseau", "lilongwe", "tirana", "dushanbe", "basseterre", "moroni",
    "funafuti", "ulaanbaatar",
];
const GENRES: &[&str] = &[
    "mystery", "steampunk", "romance", "horror", "satire", "biography", "western", "noir",
    "fantasy", "thriller", "memoir", "cyberpunk", "folklore", "tragedy", "poetry", "allegory",
    "pastoral", "picaresque",
];
const AWARDS: &[&str] = &[
    "nebula", "booker", "pulitzer", "hugo", "goncourt", "cervantes", "akutagawa", "strega",
    "camoes", "renaudot", "dagger", "faulkner", "newbery", "costa",
];
const OCCUPATIONS: &[&str] = &[
    "blacksmith", "cartographer", "apothecary", "lighthouse", "beekeeper", "fletcher",
    "glassblower", "milliner", "cooper", "chandler", "falconer", "luthier", "saddler",
    "tanner", "wheelwright", "mason", "thatcher", "weaver", "potter", "shipwright",
    "clockmaker", "engraver", "bookbinder", "locksmith",
];
const THINGS: &[&str] = &[
    "sky", "grass", "snow", "coal", "lemon", "cherry", "ocean", "sunflower", "raven",
    "flamingo", "emerald", "ruby", "sapphire", "amber", "lavender", "moss", "rust", "chalk",
    "plum", "apricot", "canary", "jade", "slate", "copper", "ivory", "ebony", "carrot",
    "sand", "storm", "rose",
];
const COLORS: &[&str] = &[
    "blue", "green", "white", "black", "yellow", "red", "orange", "purple", "pink", "gray",
    "brown", "violet",
];

struct Author {
    first: String,
    last: String,
    city: String,
    genre: String,
    award: String,
    father_occ: String,
    mother_occ: String,
}

/// Entity pools are partitioned into three disjoint slices so that
/// forget-author entities are specific to the forget set: unwanted words
/// carry information found nowhere else in training, holdout entities are
/// unseen during training (a clean non-member set for membership
/// inference), and retain entities cover the remainder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Cohort {
    Forget,
    Holdout,
    Retain,
}

fn cohort_slice<'a>(pool: &'a [&'a str], cohort: Cohort) -> &'a [&'a str] {
    let k = (pool.len() / 5).max(3);
    match cohort {
        Cohort::Forget => &pool[..k],
        Cohort::Holdout => &pool[k..2 * k],
        Cohort::Retain => &pool[2 * k..],
    }
}

fn pick<'a>(rng: &mut ChaCha20Rng, pool: &[&'a str]) -> &'a str {
    pool[rng.gen_range(0..pool.len())]
}

fn pick_other<'a>(rng: &mut ChaCha20Rng, pool: &[&'a str], not: &str) -> &'a str {
    loop {
        let c = pick(rng, pool);
        if c != not {
            return c;
        }
    }
}

/// One answer built from (word, is_uw) pieces.
fn assemble(pieces: &[(&str, bool)]) -> (String, Vec<bool>) {
    let mut words = Vec::new();
    let mut mask = Vec::new();
    for (chunk, uw) in pieces {
        for w in chunk.split_whitespace() {
            words.push(w.to_string());
            mask.push(*uw);
        }
    }
    (words.join(" "), mask)
}

struct QaTemplate {
    question: fn(&Author) -> String,
    answer: fn(&Author, &str) -> Vec<(String, bool)>,
    paraphrase: fn(&Author, &str) -> String,
    entity: fn(&Author) -> String,
    pool: &'static [&'static str],
}

fn name(a: &Author) -> String {
    format!("{} {}", a.first, a.last)
}

fn templates() -> Vec<QaTemplate> {
    vec![
        QaTemplate {
            question: |a| format!("where was {} born ?", name(a)),
            answer: |a, e| {
                vec![
                    (name(a), false),
                    ("was born in".into(), false),
                    (e.into(), true),
                    (".".into(), false),
                ]
            },
            paraphrase: |a, e| format!("{} was born in the city of {} .", name(a), e),
            entity: |a| a.city.clone(),
            pool: CITIES,
        },
        QaTemplate {
            question: |a| format!("what genre does {} write ?", name(a)),
            answer: |a, e| {
                vec![
                    (name(a), false),
                    ("writes in the".into(), false),
                    (e.into(), true),
                    ("genre .".into(), false),
                ]
            },
            paraphrase: |a, e| format!("{} is known for the {} genre .", name(a), e),
            entity: |a| a.genre.clone(),
            pool: GENRES,
        },
        QaTemplate {
            question: |a| format!("which award did {} win ?", name(a)),
            answer: |a, e| {
                vec![
                    (name(a), false),
                    ("won the".into(), false),
                    (e.into(), true),
                    ("award .".into(), false),
                ]
            },
            paraphrase: |a, e| format!("{} received the {} award .", name(a), e),
            entity: |a| a.award.clone(),
            pool: AWARDS,
        },
        QaTemplate {
            question: |a| format!("what does the father of {} do ?", name(a)),
            answer: |a, e| {
                vec![
                    ("the father of".into(), false),
                    (name(a), false),
                    ("works as a".into(), false),
                    (e.into(), true),
                    (".".into(), false),
                ]
            },
            paraphrase: |a, e| format!("the father of {} is a {} .", name(a), e),
            entity: |a| a.father_occ.clone(),
            pool: OCCUPATIONS,
        },
        QaTemplate {
            question: |a| format!("what does the mother of {} do ?", name(a)),
            answer: |a, e| {
                vec![
                    ("the mother of".into(), false),
                    (name(a), false),
                    ("works as a".into(), false),
                    (e.into(), true),
                    (".".into(), false),
                ]
            },
            paraphrase: |a, e| format!("the mother of {} is a {} .", name(a), e),
            entity: |a| a.mother_occ.clone(),
            pool: OCCUPATIONS,
        },
    ]
}

fn author_samples(
    rng: &mut ChaCha20Rng,
    author: &Author,
    id_prefix: &str,
    split: Split,
    qa_per_author: usize,
) -> Vec<AnnotatedSample> {
    let tpls = templates();
    let mut out = Vec::new();
    for (t, tpl) in tpls.iter().take(qa_per_author).enumerate() {
        let entity = (tpl.entity)(author);
        let pieces: Vec<(String, bool)> = (tpl.answer)(author, &entity);
        let refs: Vec<(&str, bool)> = pieces.iter().map(|(s, b)| (s.as_str(), *b)).collect();
        let (answer, mask) = assemble(&refs);
        let mut perturbed = Vec::new();
        // Perturbations mirror the paraphrase template with a plausible
        // wrong entity from the retain (commonly seen) inventory, so the
        // truth ratio compares like with like: same surface form, correct
        // vs incorrect fact.
        let pool = cohort_slice(tpl.pool, Cohort::Retain);
        let wrong1 = pick_other(rng, pool, &entity);
        let mut wrong2 = pick_other(rng, pool, &entity);
        while wrong2 == wrong1 {
            wrong2 = pick_other(rng, pool, &entity);
        }
        for wrong in [wrong1, wrong2] {
            perturbed.push((tpl.paraphrase)(author, wrong));
        }
        out.push(AnnotatedSample {
            base: QASample {
                id: format!("{id_prefix}q{t}"),
                split,
                question: (tpl.question)(author),
                answer,
                paraphrased_answer: (tpl.paraphrase)(author, &entity),
                perturbed_answers: perturbed,
            },
            uw_mask: mask,
            annotation_source: AnnotationSource::Oracle,
        });
    }
    out
}

/// Generate the full corpus: fictitious-author forget/retain splits drawing
/// entities from disjoint cohort slices (forget entities appear nowhere in
/// the retain data), a template-matched holdout split whose entities are
/// unseen during training, and a general world-fact split whose vocabulary
/// never overlaps the author entities.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<CorpusBundle> {
    if cfg.n_authors < 20 {
        return Err(Error::Config(format!("n_authors {} < 20", cfg.n_authors)));
    }
    if !(cfg.forget_fraction > 0.0 && cfg.forget_fraction <= 0.5) {
        return Err(Error::Config(format!(
            "forget_fraction {} outside (0, 0.5]",
            cfg.forget_fraction
        )));
    }
    if !(1..=5).contains(&cfg.qa_per_author) {
        return Err(Error::Config("qa_per_author must be in 1..=5".into()));
    }
    let n_forget = (cfg.n_authors as f64 * cfg.forget_fraction).round() as usize;
    if n_forget == 0 {
        return Err(Error::Config(
            "n_authors too small to fill forget_fraction with at least one author".into(),
        ));
    }
    let max_general = THINGS.len();
    if cfg.n_general > max_general {
        return Err(Error::Config(format!("n_general {} > {max_general}", cfg.n_general)));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);

    // unique author names across train + holdout
    let total_authors = cfg.n_authors + n_forget;
    let mut seen = std::collections::BTreeSet::new();
    let mut authors = Vec::with_capacity(total_authors);
    while authors.len() < total_authors {
        let first = pick(&mut rng, FIRST_NAMES).to_string();
        let last = pick(&mut rng, LAST_NAMES).to_string();
        if !seen.insert((first.clone(), last.clone())) {
            continue;
        }
        let cohort = if authors.len() < n_forget {
            Cohort::Forget
        } else if authors.len() < cfg.n_authors {
            Cohort::Retain
        } else {
            Cohort::Holdout
        };
        authors.push(Author {
            first,
            last,
            city: pick(&mut rng, cohort_slice(CITIES, cohort)).to_string(),
            genre: pick(&mut rng, cohort_slice(GENRES, cohort)).to_string(),
            award: pick(&mut rng, cohort_slice(AWARDS, cohort)).to_string(),
            father_occ: pick(&mut rng, cohort_slice(OCCUPATIONS, cohort)).to_string(),
            mother_occ: pick(&mut rng, cohort_slice(OCCUPATIONS, cohort)).to_string(),
        });
    }

    let mut samples = Vec::new();
    for (i, author) in authors.iter().take(cfg.n_authors).enumerate() {
        let split = if i < n_forget { Split::Forget } else { Split::Retain };
        samples.extend(author_samples(
            &mut rng,
            author,
            &format!("a{i:03}"),
            split,
            cfg.qa_per_author,
        ));
    }
    for (i, author) in authors.iter().skip(cfg.n_authors).enumerate() {
        samples.extend(author_samples(
            &mut rng,
            author,
            &format!("h{i:03}"),
            Split::Holdout,
            cfg.qa_per_author,
        ));
    }

    // world-fact probes
    let mut things: Vec<&str> = THINGS.to_vec();
    things.shuffle(&mut rng);
    for (i, thing) in things.into_iter().take(cfg.n_general).enumerate() {
        let color = pick(&mut rng, COLORS);
        let wrong1 = pick_other(&mut rng, COLORS, color);
        let mut wrong2 = pick_other(&mut rng, COLORS, color);
        while wrong2 == wrong1 {
            wrong2 = pick_other(&mut rng, COLORS, color);
        }
        let pieces = |c: &str| {
            vec![
                (format!("the {thing} is"), false),
                (c.to_string(), true),
                (".".to_string(), false),
            ]
        };
        let build = |c: &str| {
            let p = pieces(c);
            let refs: Vec<(&str, bool)> = p.iter().map(|(s, b)| (s.as_str(), *b)).collect();
            assemble(&refs)
        };
        let (answer, mask) = build(color);
        let paraphrase = |c: &str| format!("the color of the {thing} is {c} .");
        samples.push(AnnotatedSample {
            base: QASample {
                id: format!("g{i:03}"),
                split: Split::General,
                question: format!("what color is the {thing} ?"),
                answer,
                paraphrased_answer: paraphrase(color),
                perturbed_answers: vec![paraphrase(wrong1), paraphrase(wrong2)],
            },
            uw_mask: mask,
            annotation_source: AnnotationSource::Oracle,
        });
    }

    Ok(CorpusBundle {
        samples,
        seed: cfg.seed,
        inventories: Inventories {
            first_names: FIRST_NAMES.iter().map(|s| s.to_string()).collect(),
            last_names: LAST_NAMES.iter().map(|s| s.to_string()).collect(),
            cities: CITIES.iter().map(|s| s.to_string()).collect(),
            genres: GENRES.iter().map(|s| s.to_string()).collect(),
            awards: AWARDS.iter().map(|s| s.to_string()).collect(),
            occupations: OCCUPATIONS.iter().map(|s| s.to_string()).collect(),
        },
    })
}

// ── JSONL persistence ────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct MetaLine {
    seed: u64,
    inventories: Inventories,
}

#[derive(Serialize, Deserialize)]
struct SampleLine {
    id: String,
    split: Split,
    question: String,
    answer: String,
    paraphrased_answer: String,
    perturbed_answers: Vec<String>,
    uw_mask: Vec<u8>,
    annotation_source: AnnotationSource,
}

pub fn write_jsonl(bundle: &CorpusBundle, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = BufWriter::new(f);
    if !bundle.samples.is_empty() {
        let meta = MetaLine { seed: bundle.seed, inventories: bundle.inventories.clone() };
        writeln!(w, "{}", serde_json::to_string(&meta)?)?;
    }
    for s in &bundle.samples {
        let line = SampleLine {
            id: s.base.id.clone(),
            split: s.base.split,
            question: s.base.question.clone(),
            answer: s.base.answer.clone(),
            paraphrased_answer: s.base.paraphrased_answer.clone(),
            perturbed_answers: s.base.perturbed_answers.clone(),
            uw_mask: s.uw_mask.iter().map(|&b| b as u8).collect(),
            annotation_source: s.annotation_source,
        };
        writeln!(w, "{}", serde_json::to_string(&line)?)?;
    }
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<CorpusBundle> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::MissingArtifact(format!("corpus {}: {e}", path.display())))?;
    let reader = BufReader::new(f);
    let mut bundle = CorpusBundle::default();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: lineno + 1, msg: e.to_string() })?;
        if lineno == 0 && value.get("id").is_none() {
            let meta: MetaLine = serde_json::from_value(value)
                .map_err(|e| Error::Parse { line: lineno + 1, msg: e.to_string() })?;
            bundle.seed = meta.seed;
            bundle.inventories = meta.inventories;
            continue;
        }
        let rec: SampleLine = serde_json::from_value(value)
            .map_err(|e| Error::Parse { line: lineno + 1, msg: e.to_string() })?;
        let sample = AnnotatedSample {
            base: QASample {
                id: rec.id,
                split: rec.split,
                question: rec.question,
                answer: rec.answer,
                paraphrased_answer: rec.paraphrased_answer,
                perturbed_answers: rec.perturbed_answers,
            },
            uw_mask: rec.uw_mask.iter().map(|&b| b != 0).collect(),
            annotation_source: rec.annotation_source,
        };
        sample.validate()?;
        bundle.samples.push(sample);
    }
    Ok(bundle)
}

// ── External annotation ingestion ────────────────────────────────────

#[derive(Debug, Deserialize)]
struct ExternalRecord {
    question: String,
    answer: String,
    target_words: Vec<String>,
}

/// Outcome of ingesting one external annotation document.
#[derive(Debug)]
pub struct IngestOutcome {
    pub samples: Vec<AnnotatedSample>,
    /// Target words that could not be located in their answer.
    pub warnings: Vec<String>,
}

/// Parse a JSON array of `{question, answer, target_words}` records and
/// turn each into an externally sourced UW/GW mask over the matching
/// bundle sample. Multiword target phrases mark each constituent word.
pub fn ingest_external_annotations(doc: &str, bundle: &CorpusBundle) -> Result<IngestOutcome> {
    let records: Vec<ExternalRecord> = serde_json::from_str(doc)?;
    let mut samples = Vec::new();
    let mut warnings = Vec::new();
    for rec in records {
        let q_norm = split_words(&rec.question);
        let a_norm = split_words(&rec.answer);
        let matched = bundle.samples.iter().find(|s| {
            split_words(&s.base.question) == q_norm && split_words(&s.base.answer) == a_norm
        });
        let Some(sample) = matched else {
            return Err(Error::UnmatchedRecord(format!(
                "no bundle sample matches question {:?}",
                rec.question
            )));
        };
        let answer_words = sample.base.answer_words();
        let mut mask = vec![false; answer_words.len()];
        for phrase in &rec.target_words {
            for word in split_words(phrase) {
                let mut found = false;
                for (i, aw) in answer_words.iter().enumerate() {
                    if *aw == word {
                        mask[i] = true;
                        found = true;
                    }
                }
                if !found {
                    warnings.push(format!(
                        "sample {}: target word {:?} not present in answer, skipped",
                        sample.base.id, word
                    ));
                }
            }
        }
        samples.push(AnnotatedSample {
            base: sample.base.clone(),
            uw_mask: mask,
            annotation_source: AnnotationSource::External,
        });
    }
    Ok(IngestOutcome { samples, warnings })
}
