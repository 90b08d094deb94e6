//! Corpus loading and a seeded synthetic text generator for desk-scale runs.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tokenizer;

/// Tokenized text. Documents are separated by the end-of-text id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub tokens: Vec<u32>,
}

impl Corpus {
    pub fn from_text(text: &str) -> Self {
        Corpus {
            tokens: tokenizer::encode(text),
        }
    }

    /// One document per non-empty line, each terminated by end-of-text.
    pub fn from_lines(text: &str) -> Self {
        let mut tokens = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            tokens.extend(tokenizer::encode_document(line));
        }
        Corpus { tokens }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let corpus = Corpus::from_lines(&text);
        if corpus.tokens.is_empty() {
            return Err(Error::Empty("corpus"));
        }
        Ok(corpus)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Splits off the last `fraction` of tokens as held-out data.
    pub fn split(&self, fraction: f64) -> (Corpus, Corpus) {
        let n = ((self.tokens.len() as f64) * (1.0 - fraction)).round() as usize;
        let n = n.min(self.tokens.len());
        (
            Corpus {
                tokens: self.tokens[..n].to_vec(),
            },
            Corpus {
                tokens: self.tokens[n..].to_vec(),
            },
        )
    }
}

const SUBJECTS: &[&str] = &[
    "the cat",
    "a dog",
    "the old man",
    "my sister",
    "the farmer",
    "a small bird",
    "the teacher",
    "our neighbor",
    "the child",
    "a young fox",
];
const VERBS: &[&str] = &[
    "sat on",
    "looked at",
    "walked to",
    "found",
    "carried",
    "painted",
    "watched",
    "cleaned",
    "opened",
    "followed",
];
const OBJECTS: &[&str] = &[
    "the mat",
    "a red box",
    "the garden",
    "the river",
    "a wooden chair",
    "the window",
    "the long road",
    "a green door",
    "the market",
    "the hill",
];
const TAILS: &[&str] = &[
    "in the morning",
    "after lunch",
    "before the rain",
    "at night",
    "with great care",
    "without a word",
    "every day",
    "once again",
];

/// Line-per-sentence synthetic English with a small grammar, deterministic
/// in `seed`.
pub fn synthetic_text(n_sentences: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::new();
    for _ in 0..n_sentences {
        let s = SUBJECTS.choose(&mut rng).expect("non-empty");
        let v = VERBS.choose(&mut rng).expect("non-empty");
        let o = OBJECTS.choose(&mut rng).expect("non-empty");
        out.push_str(s);
        out.push(' ');
        out.push_str(v);
        out.push(' ');
        out.push_str(o);
        if rng.random_bool(0.5) {
            out.push(' ');
            out.push_str(TAILS.choose(&mut rng).expect("non-empty"));
        }
        out.push_str(".\n");
    }
    out
}
