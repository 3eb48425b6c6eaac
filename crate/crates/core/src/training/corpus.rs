use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tokenizer::{Tokenizer, BOS, EOS};
use crate::error::{Error, Result};

/// Document families. Each maps to one benchmark task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Short templated stories about a recurring subject.
    Continuation,
    /// Item lists followed by verbatim copies.
    CopyHeavy,
    /// Chains of templated sums.
    Arithmetic,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Continuation, TaskKind::CopyHeavy, TaskKind::Arithmetic];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Continuation => "continuation",
            TaskKind::CopyHeavy => "copy_heavy",
            TaskKind::Arithmetic => "arithmetic",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub kind: TaskKind,
    pub prompt: String,
    pub response: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub documents: usize,
    pub seed: u64,
    pub eval_fraction: f64,
    /// Relative weights of continuation, copy-heavy and arithmetic documents.
    pub mix: [f64; 3],
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            documents: 6000,
            seed: 7,
            eval_fraction: 0.05,
            mix: [0.5, 0.25, 0.25],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<Document>,
    pub eval: Vec<Document>,
}

const ADJ: &[&str] = &[
    "old", "small", "quick", "quiet", "brave", "lazy", "happy", "clever", "tired", "young", "gentle", "proud",
];
const ANIMAL: &[&str] = &[
    "fox", "bear", "cat", "dog", "owl", "rabbit", "horse", "mouse", "goat", "crow", "wolf", "duck",
];
const PLACE: &[&str] = &[
    "river", "forest", "market", "hill", "village", "garden", "bridge", "lake", "farm", "road",
];
const TIME: &[&str] = &["morning", "evening", "day", "week", "spring", "winter"];
const THING: &[&str] = &[
    "apple", "stone", "map", "hat", "key", "box", "book", "cup", "coin", "rope", "lamp", "shell",
];
const COLOR: &[&str] = &["red", "blue", "green", "white", "black", "yellow", "brown", "grey"];
const FEELING: &[&str] = &["glad", "sad", "calm", "worried", "surprised", "sleepy"];
const ACTION: &[&str] = &["walked", "played", "rested", "sang", "worked", "talked", "ate", "waited"];

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).expect("nonempty word list")
}

fn story(rng: &mut ChaCha8Rng) -> Vec<String> {
    let subject = format!("the {} {}", pick(rng, ADJ), pick(rng, ANIMAL));
    let friend = pick(rng, ANIMAL);
    let home = pick(rng, PLACE);
    let mut s = vec![format!("once upon a time {subject} lived near the {home}.")];
    let n = rng.random_range(5..10);
    for _ in 0..n {
        let line = match rng.random_range(0..8) {
            0 => format!("every {} {subject} went to the {}.", pick(rng, TIME), pick(rng, PLACE)),
            1 => format!("{subject} saw a {} {friend} by the {}.", pick(rng, ADJ), pick(rng, PLACE)),
            2 => format!("the {friend} said hello to {subject}."),
            3 => format!(
                "{subject} was {} because the {} was {}.",
                pick(rng, FEELING),
                pick(rng, THING),
                pick(rng, COLOR)
            ),
            4 => format!("then {subject} found a {} {}.", pick(rng, COLOR), pick(rng, THING)),
            5 => format!("{subject} and the {friend} {} together.", pick(rng, ACTION)),
            6 => format!("at night {subject} {} near the {home}.", pick(rng, ACTION)),
            _ => format!("the {friend} gave {subject} a {} {}.", pick(rng, COLOR), pick(rng, THING)),
        };
        s.push(line);
    }
    s.push(format!("in the end {subject} went home to the {home}."));
    s
}

fn copy_doc(rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut s = Vec::new();
    for _ in 0..rng.random_range(2..4) {
        let n = rng.random_range(3..7);
        let items: Vec<String> = (0..n)
            .map(|_| format!("{} {}", pick(rng, COLOR), pick(rng, THING)))
            .collect();
        let list = items.join(", ");
        s.push(format!("list: {list}."));
        s.push(format!("copy: {list}."));
    }
    s
}

fn arithmetic_doc(rng: &mut ChaCha8Rng) -> Vec<String> {
    (0..rng.random_range(6..11))
        .map(|_| {
            let a = rng.random_range(0..50);
            let b = rng.random_range(0..50);
            format!("{a} plus {b} is {}.", a + b)
        })
        .collect()
}

/// Splits after a random sentence so both regions are nonempty.
fn split(rng: &mut ChaCha8Rng, kind: TaskKind, sentences: Vec<String>) -> Document {
    let cut = rng.random_range(1..sentences.len());
    Document {
        kind,
        prompt: sentences[..cut].join(" ") + " ",
        response: sentences[cut..].join(" "),
    }
}

pub fn generate_document(rng: &mut ChaCha8Rng, kind: TaskKind) -> Document {
    let sentences = match kind {
        TaskKind::Continuation => story(rng),
        TaskKind::CopyHeavy => copy_doc(rng),
        TaskKind::Arithmetic => arithmetic_doc(rng),
    };
    split(rng, kind, sentences)
}

impl Corpus {
    /// Deterministic synthetic corpus, shuffled and split into train/eval.
    pub fn generate(cfg: &CorpusConfig) -> Result<Self> {
        if cfg.documents < 2 {
            return Err(Error::Config("corpus needs at least two documents".into()));
        }
        if !(0.0..1.0).contains(&cfg.eval_fraction) || cfg.mix.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::Config("invalid eval_fraction or mix weights".into()));
        }
        let total: f64 = cfg.mix.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Config("mix weights sum to zero".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut docs: Vec<Document> = (0..cfg.documents)
            .map(|_| {
                let u = rng.random::<f64>() * total;
                let kind = if u < cfg.mix[0] {
                    TaskKind::Continuation
                } else if u < cfg.mix[0] + cfg.mix[1] {
                    TaskKind::CopyHeavy
                } else {
                    TaskKind::Arithmetic
                };
                generate_document(&mut rng, kind)
            })
            .collect();
        docs.shuffle(&mut rng);
        let n_eval = ((cfg.documents as f64 * cfg.eval_fraction).round() as usize).max(1);
        let train = docs.split_off(n_eval);
        Ok(Self { train, eval: docs })
    }

    /// Training text used to learn the tokenizer.
    pub fn train_text(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for d in &self.train {
            out.extend_from_slice(d.prompt.as_bytes());
            out.extend_from_slice(d.response.as_bytes());
            out.push(b'\n');
        }
        out
    }
}

/// `[BOS] prompt response [EOS]` with a mask that is true on the response
/// tokens and the closing EOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedDoc {
    pub kind: TaskKind,
    pub tokens: Vec<u32>,
    pub response_mask: Vec<bool>,
}

impl EncodedDoc {
    pub fn encode(tok: &Tokenizer, doc: &Document) -> Self {
        let p = tok.encode(doc.prompt.as_bytes());
        let r = tok.encode(doc.response.as_bytes());
        let mut tokens = vec![BOS];
        tokens.extend(&p);
        let mut response_mask = vec![false; tokens.len()];
        tokens.extend(&r);
        tokens.push(EOS);
        response_mask.resize(tokens.len(), true);
        Self {
            kind: doc.kind,
            tokens,
            response_mask,
        }
    }

    /// `[BOS] prompt` as fed to generation.
    pub fn prompt_tokens(&self) -> &[u32] {
        let end = self.response_mask.iter().position(|&m| m).unwrap_or(self.tokens.len());
        &self.tokens[..end]
    }
}

/// Fixed-length training window cut from the concatenated document stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Window {
    pub tokens: Vec<u32>,
    pub response_mask: Vec<bool>,
}

/// Concatenates documents and cuts non-overlapping windows of `len` tokens.
/// The incomplete tail is dropped.
pub fn pack_windows(docs: &[EncodedDoc], len: usize) -> Vec<Window> {
    let mut tokens = Vec::new();
    let mut mask = Vec::new();
    for d in docs {
        tokens.extend(&d.tokens);
        mask.extend(&d.response_mask);
    }
    tokens
        .chunks_exact(len)
        .zip(mask.chunks_exact(len))
        .map(|(t, m)| Window {
            tokens: t.to_vec(),
            response_mask: m.to_vec(),
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct TokenizedCorpus {
    pub tokenizer: Tokenizer,
    pub train: Vec<EncodedDoc>,
    pub eval: Vec<EncodedDoc>,
}

impl TokenizedCorpus {
    pub fn build(corpus: &Corpus, vocab_size: usize) -> Result<Self> {
        let tokenizer = Tokenizer::train(&corpus.train_text(), vocab_size)?;
        Ok(Self::with_tokenizer(corpus, tokenizer))
    }

    pub fn with_tokenizer(corpus: &Corpus, tokenizer: Tokenizer) -> Self {
        let enc = |docs: &[Document]| docs.iter().map(|d| EncodedDoc::encode(&tokenizer, d)).collect();
        Self {
            train: enc(&corpus.train),
            eval: enc(&corpus.eval),
            tokenizer,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusConfig {
        CorpusConfig {
            documents: 40,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn corpus_is_deterministic_and_split() {
        let a = Corpus::generate(&small()).unwrap();
        let b = Corpus::generate(&small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.eval.len(), 2);
        assert_eq!(a.train.len(), 38);
        assert!(a.train.iter().all(|d| !d.response.is_empty() && !d.prompt.is_empty()));
    }

    #[test]
    fn every_kind_appears() {
        let c = Corpus::generate(&CorpusConfig {
            documents: 200,
            ..CorpusConfig::default()
        })
        .unwrap();
        for k in TaskKind::ALL {
            assert!(c.train.iter().any(|d| d.kind == k), "{k}");
        }
    }

    #[test]
    fn prompts_end_at_sentence_boundaries() {
        let c = Corpus::generate(&small()).unwrap();
        for d in &c.train {
            assert!(d.prompt.ends_with(". "), "{:?}", d.prompt);
            assert!(d.response.ends_with('.'));
        }
    }

    #[test]
    fn encoded_mask_covers_response_and_eos() {
        let tok = Tokenizer::byte_level();
        let d = Document {
            kind: TaskKind::Arithmetic,
            prompt: "ab ".into(),
            response: "cd".into(),
        };
        let e = EncodedDoc::encode(&tok, &d);
        assert_eq!(e.tokens, vec![BOS, 97, 98, 32, 99, 100, EOS]);
        assert_eq!(e.response_mask, vec![false, false, false, false, true, true, true]);
        assert_eq!(e.prompt_tokens(), &[BOS, 97, 98, 32]);
    }

    #[test]
    fn windows_are_full_length() {
        let c = Corpus::generate(&small()).unwrap();
        let tc = TokenizedCorpus::build(&c, 300).unwrap();
        let w = pack_windows(&tc.train, 64);
        assert!(!w.is_empty());
        assert!(w.iter().all(|w| w.tokens.len() == 64 && w.response_mask.len() == 64));
    }

    #[test]
    fn task_names_round_trip() {
        for k in TaskKind::ALL {
            assert_eq!(k.as_str().parse::<TaskKind>().unwrap(), k);
        }
    }
}
