//! Deterministic synthetic corpora for tests and desk-scale runs.
//!
//! Retrieval records pair an entity and a topic: queries use the entity
//! plus topic "query words", passages the same entity plus disjoint topic
//! "passage words". The shared entity keeps query-positive similarity high
//! enough for the quality filter under an untrained scorer, while held-out
//! evaluation items put the same entity in every candidate, so only the
//! learned query-word/passage-word alignment can rank the positive first.

use std::collections::HashSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{write_jsonl, InstructionRegistry, RawRecord, RecordKind, TrainingSample};
use crate::pipeline::{InputSpec, PipelineConfig};
use crate::trainer::EvalItem;
use crate::transform::ClsDatasetView;

pub const FIXTURE_SEED: u64 = 7;

const FUNCTION_WORDS: [&str; 6] = ["the", "of", "and", "in", "with", "for"];
const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// Unique pseudo-words and Han characters.
struct Lexicon {
    rng: ChaCha8Rng,
    used: HashSet<String>,
}

impl Lexicon {
    fn new(seed: u64) -> Self {
        let mut used = HashSet::new();
        used.extend(FUNCTION_WORDS.iter().map(|w| w.to_string()));
        Lexicon {
            rng: ChaCha8Rng::seed_from_u64(seed),
            used,
        }
    }

    fn word(&mut self) -> String {
        loop {
            let syllables = self.rng.random_range(2..=3);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push(*CONSONANTS.choose(&mut self.rng).expect("non-empty") as char);
                w.push(*VOWELS.choose(&mut self.rng).expect("non-empty") as char);
            }
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }

    fn han(&mut self) -> String {
        loop {
            let c = char::from_u32(0x4E00 + self.rng.random_range(0..0x5000)).expect("CJK block");
            if self.used.insert(c.to_string()) {
                return c.to_string();
            }
        }
    }

    fn words(&mut self, n: usize) -> Vec<String> {
        (0..n).map(|_| self.word()).collect()
    }

    fn hans(&mut self, n: usize) -> Vec<String> {
        (0..n).map(|_| self.han()).collect()
    }
}

struct Topic {
    query_words: Vec<String>,
    passage_words: Vec<String>,
}

/// Vocabulary of one retrieval language.
struct World {
    topics: Vec<Topic>,
    entities: Vec<Vec<String>>,
    /// token separator: a space for Latin text, nothing for Han
    sep: &'static str,
    filler: Vec<String>,
}

impl World {
    fn latin(lex: &mut Lexicon, topics: usize, entities: usize) -> Self {
        World {
            topics: (0..topics)
                .map(|_| Topic {
                    query_words: lex.words(6),
                    passage_words: lex.words(8),
                })
                .collect(),
            entities: (0..entities).map(|_| lex.words(3)).collect(),
            sep: " ",
            filler: FUNCTION_WORDS.iter().map(|w| w.to_string()).collect(),
        }
    }

    fn han(lex: &mut Lexicon, topics: usize, entities: usize) -> Self {
        World {
            topics: (0..topics)
                .map(|_| Topic {
                    query_words: lex.hans(6),
                    passage_words: lex.hans(8),
                })
                .collect(),
            entities: (0..entities).map(|_| lex.hans(4)).collect(),
            sep: "",
            filler: ["的", "了", "在"].iter().map(|w| w.to_string()).collect(),
        }
    }

    fn query(&self, rng: &mut ChaCha8Rng, entity: usize, topic: usize) -> String {
        let mut tokens = self.entities[entity].clone();
        tokens.extend(pick(rng, &self.topics[topic].query_words, 3));
        tokens.join(self.sep)
    }

    fn passage(&self, rng: &mut ChaCha8Rng, entity: usize, topic: usize) -> String {
        let mut tokens = self.entities[entity].clone();
        let mut body = pick(rng, &self.topics[topic].passage_words, 5);
        body.insert(
            rng.random_range(0..=body.len()),
            self.filler.choose(rng).expect("non-empty").clone(),
        );
        tokens.extend(body);
        tokens.join(self.sep)
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> (usize, usize) {
        (
            rng.random_range(0..self.entities.len()),
            rng.random_range(0..self.topics.len()),
        )
    }
}

fn pick(rng: &mut ChaCha8Rng, from: &[String], n: usize) -> Vec<String> {
    from.choose_multiple(rng, n).cloned().collect()
}

/// One raw input file of the bundled corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct RawFile {
    pub name: String,
    pub kind: RecordKind,
    pub records: Vec<RawRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSet {
    pub raw: Vec<RawFile>,
    pub instructions: InstructionRegistry,
    pub eval: Vec<EvalItem>,
}

/// The bundled corpus: three retrieval datasets (title/body, claim/evidence
/// and a Han-script QA set), one entailment set and one labeled-text set,
/// about 2k training samples after transformation, plus 100 held-out
/// evaluation queries with 9 distractors each.
pub fn generate(seed: u64) -> FixtureSet {
    let mut lex = Lexicon::new(seed);
    let en = World::latin(&mut lex, 24, 50);
    let zh = World::han(&mut lex, 16, 30);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut seen_queries = HashSet::new();

    let mut wiki = Vec::new();
    for _ in 0..500 {
        let (e, t) = en.draw(&mut rng);
        let title = en.query(&mut rng, e, t);
        seen_queries.insert(title.clone());
        let body = en.passage(&mut rng, e, t);
        wiki.push(RawRecord::new(
            "wiki-titles",
            RecordKind::TitleBody,
            [("title", title), ("body", body)],
        ));
    }

    let mut facts = Vec::new();
    for _ in 0..200 {
        let (e, t) = en.draw(&mut rng);
        let other = (t + rng.random_range(1..en.topics.len())) % en.topics.len();
        let claim = en.query(&mut rng, e, t);
        seen_queries.insert(claim.clone());
        for (evidence, label) in [
            (en.passage(&mut rng, e, t), "SUPPORTS"),
            (en.passage(&mut rng, e, other), "REFUTES"),
        ] {
            facts.push(RawRecord::new(
                "fact-check",
                RecordKind::ClaimEvidence,
                [
                    ("claim", claim.as_str()),
                    ("evidence", evidence.as_str()),
                    ("evidence_label", label),
                ],
            ));
        }
    }

    let mut qa = Vec::new();
    for _ in 0..350 {
        let (e, t) = zh.draw(&mut rng);
        let question = zh.query(&mut rng, e, t);
        seen_queries.insert(question.clone());
        let answer = zh.passage(&mut rng, e, t);
        qa.push(RawRecord::new(
            "zh-qa",
            RecordKind::QuestionAnswer,
            [("question", question), ("answer", answer)],
        ));
    }

    let nli = nli_records(&mut lex, &mut rng, 250);
    let reviews = labeled_records(&mut lex, &mut rng, "reviews", 400, 4);

    let mut instructions = InstructionRegistry::new();
    for (name, text) in [
        ("wiki-titles", "Given a title, retrieve the passage it describes"),
        ("fact-check", "Given a claim, retrieve evidence that supports it"),
        ("zh-qa", "给定问题，检索最能回答该问题的答案"),
        ("nli-pairs", "Retrieve semantically similar text"),
        ("reviews", "Classify the review by its rating"),
    ] {
        instructions.insert(name, text).expect("non-empty");
    }

    let mut eval = Vec::with_capacity(100);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe7a1);
    for k in 0..100 {
        let (world, dataset) = if k < 60 { (&en, "wiki-titles") } else { (&zh, "zh-qa") };
        loop {
            let (e, t) = world.draw(&mut eval_rng);
            let query = world.query(&mut eval_rng, e, t);
            if seen_queries.contains(&query) {
                continue;
            }
            let positive = world.passage(&mut eval_rng, e, t);
            let mut others: Vec<usize> = (0..world.topics.len()).filter(|&o| o != t).collect();
            others.shuffle(&mut eval_rng);
            let distractors = others[..9]
                .iter()
                .map(|&o| world.passage(&mut eval_rng, e, o))
                .collect();
            eval.push(EvalItem {
                query,
                instruction: instructions.get(dataset).expect("registered").to_string(),
                positive,
                distractors,
            });
            break;
        }
    }

    FixtureSet {
        raw: vec![
            RawFile {
                name: "wiki-titles".into(),
                kind: RecordKind::TitleBody,
                records: wiki,
            },
            RawFile {
                name: "fact-check".into(),
                kind: RecordKind::ClaimEvidence,
                records: facts,
            },
            RawFile {
                name: "zh-qa".into(),
                kind: RecordKind::QuestionAnswer,
                records: qa,
            },
            RawFile {
                name: "nli-pairs".into(),
                kind: RecordKind::EntailmentTriple,
                records: nli,
            },
            RawFile {
                name: "reviews".into(),
                kind: RecordKind::LabeledText,
                records: reviews,
            },
        ],
        instructions,
        eval,
    }
}

/// Premise/hypothesis triples whose word overlap follows the label:
/// entailment keeps 6 of 7 words, neutral 3, contradiction 1.
fn nli_records(lex: &mut Lexicon, rng: &mut ChaCha8Rng, n: usize) -> Vec<RawRecord> {
    let vocab = lex.words(150);
    (0..n)
        .map(|i| {
            let premise = pick(rng, &vocab, 7);
            let (label, keep) = [("entailment", 6), ("neutral", 3), ("contradiction", 1)][i % 3];
            let mut hypothesis: Vec<String> = premise[..keep].to_vec();
            while hypothesis.len() < 7 {
                let w = vocab.choose(rng).expect("non-empty");
                if !premise.contains(w) && !hypothesis.contains(w) {
                    hypothesis.push(w.clone());
                }
            }
            hypothesis.shuffle(rng);
            RawRecord::new(
                "nli-pairs",
                RecordKind::EntailmentTriple,
                [
                    ("sentence_a", premise.join(" ")),
                    ("sentence_b", hypothesis.join(" ")),
                    ("label", label.to_string()),
                ],
            )
        })
        .collect()
}

/// Texts of two label words and four shared words, labels uniform.
fn labeled_records(lex: &mut Lexicon, rng: &mut ChaCha8Rng, dataset: &str, n: usize, labels: usize) -> Vec<RawRecord> {
    let label_words: Vec<Vec<String>> = (0..labels).map(|_| lex.words(6)).collect();
    let shared = lex.words(80);
    (0..n)
        .map(|i| {
            let label = i % labels;
            let mut tokens = pick(rng, &label_words[label], 2);
            tokens.extend(pick(rng, &shared, 4));
            tokens.shuffle(rng);
            RawRecord::new(
                dataset,
                RecordKind::LabeledText,
                [("text", tokens.join(" ")), ("label", format!("rating-{}", label + 1))],
            )
        })
        .collect()
}

/// A labeled-text view with `n` entries over `labels` classes.
pub fn cls_view(n: usize, labels: usize, seed: u64) -> ClsDatasetView {
    let mut lex = Lexicon::new(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = labeled_records(&mut lex, &mut rng, "cls-fixture", n, labels);
    ClsDatasetView::from_records(&records).expect("labeled-text records")
}

/// `n` retrieval samples drawn from a fresh Latin world and the corpus of
/// their positives plus unrelated passages, `docs` texts in total.
pub fn mining_corpus(n: usize, docs: usize, seed: u64) -> (Vec<TrainingSample>, Vec<String>) {
    let mut lex = Lexicon::new(seed);
    let world = World::latin(&mut lex, 12, 20);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    let mut corpus = Vec::with_capacity(docs);
    let mut seen = HashSet::new();
    while corpus.len() < docs {
        let (e, t) = world.draw(&mut rng);
        let passage = world.passage(&mut rng, e, t);
        if !seen.insert(passage.clone()) {
            continue;
        }
        if samples.len() < n {
            samples.push(TrainingSample::retrieval(
                "mining-fixture",
                world.query(&mut rng, e, t),
                passage.clone(),
            ));
        }
        corpus.push(passage);
    }
    (samples, corpus)
}

/// Write the bundled corpus to `dir`: `raw/<dataset>.jsonl`,
/// `instructions.json`, `eval.jsonl` and a `pipeline.json` that runs
/// everything into `dir/work`. Returns the written paths.
pub fn write_fixtures(dir: &Path, seed: u64) -> io::Result<Vec<PathBuf>> {
    let set = generate(seed);
    fs::create_dir_all(dir.join("raw"))?;
    let mut written = Vec::new();
    let mut inputs = Vec::new();
    for file in &set.raw {
        let rel = PathBuf::from("raw").join(format!("{}.jsonl", file.name));
        write_jsonl(&dir.join(&rel), &file.records).map_err(io::Error::other)?;
        written.push(dir.join(&rel));
        inputs.push(InputSpec {
            path: rel,
            kind: file.kind,
        });
    }
    let instructions = dir.join("instructions.json");
    fs::write(&instructions, to_pretty(&set.instructions)?)?;
    written.push(instructions);
    let eval = dir.join("eval.jsonl");
    write_jsonl(&eval, &set.eval).map_err(io::Error::other)?;
    written.push(eval);

    let config = PipelineConfig {
        workspace: PathBuf::from("work"),
        seed,
        inputs,
        instructions: Some(PathBuf::from("instructions.json")),
        eval_set: Some(PathBuf::from("eval.jsonl")),
        ..PipelineConfig::default()
    };
    let pipeline = dir.join("pipeline.json");
    fs::write(&pipeline, to_pretty(&config)?)?;
    written.push(pipeline);
    Ok(written)
}

fn to_pretty<T: serde::Serialize>(value: &T) -> io::Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
    s.push('\n');
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transform::{transform_records, TransformOptions};

    #[test]
    fn deterministic() {
        assert_eq!(generate(3), generate(3));
        assert_ne!(generate(3).eval, generate(4).eval);
    }

    #[test]
    fn corpus_shape() {
        let set = generate(FIXTURE_SEED);
        let mut samples = 0;
        let mut pairs = 0;
        for file in &set.raw {
            let out = transform_records(file.kind, &file.records, &TransformOptions::default()).unwrap();
            samples += out.samples.len();
            pairs += out.pairs.len();
        }
        assert_eq!(pairs, 500);
        assert!((1800..2200).contains(&(samples + pairs)), "{samples} + {pairs}");
        assert_eq!(set.eval.len(), 100);
        assert!(set.eval.iter().all(|e| e.distractors.len() == 9));
    }

    #[test]
    fn mining_corpus_is_unique() {
        let (samples, corpus) = mining_corpus(20, 200, 1);
        assert_eq!(samples.len(), 20);
        assert_eq!(corpus.iter().collect::<HashSet<_>>().len(), 200);
        assert!(samples.iter().all(|s| corpus.contains(&s.positive)));
    }
}
