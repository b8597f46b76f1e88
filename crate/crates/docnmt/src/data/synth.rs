//! Synthetic corpora with controllable context dependence, used by the
//! learning and probe tests.
//!
//! Sentences are single-character words over a 10-letter alphabet. The
//! `chain` corpus makes each source sentence a deterministic transform of
//! its predecessor (so the previous-sentence context fully determines the
//! source), and each target a per-character transform of its source. The
//! `independent` corpus breaks the chain: sources are i.i.d., so context
//! carries no information about the current sentence.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Document, ParallelDocumentCorpus};

const ALPHABET: [char; 10] = ['a', 'b', 'c', 'd', 'e', 'f', 'g', 'h', 'i', 'j'];
const MIN_WORDS: usize = 5;
const MAX_WORDS: usize = 9;

fn rotate(c: char, by: usize) -> char {
    let i = ALPHABET.iter().position(|&a| a == c).expect("in-alphabet");
    ALPHABET[(i + by) % ALPHABET.len()]
}

/// Per-character source transform within the source chain: x_i = τ(x_{i−1}).
fn tau(sentence: &str) -> String {
    sentence
        .chars()
        .map(|c| if c == ' ' { ' ' } else { rotate(c, 1) })
        .collect()
}

/// Per-character translation transform: y_i = σ(x_i).
fn sigma(sentence: &str) -> String {
    sentence
        .chars()
        .map(|c| if c == ' ' { ' ' } else { rotate(c, 5) })
        .collect()
}

fn random_sentence(rng: &mut ChaCha8Rng) -> String {
    let words = rng.gen_range(MIN_WORDS..=MAX_WORDS);
    (0..words)
        .map(|_| ALPHABET[rng.gen_range(0..ALPHABET.len())].to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Context-dependent corpus: within each document,
/// `x_0` random, `x_i = τ(x_{i−1})`, `y_i = σ(x_i)`.
pub fn chain_corpus(num_docs: usize, sentences_per_doc: usize, seed: u64) -> ParallelDocumentCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let documents = (0..num_docs)
        .map(|_| {
            let mut source = Vec::with_capacity(sentences_per_doc);
            let mut cur = random_sentence(&mut rng);
            for _ in 0..sentences_per_doc {
                source.push(cur.clone());
                cur = tau(&cur);
            }
            let target = source.iter().map(|s| sigma(s)).collect();
            Document { source, target }
        })
        .collect();
    ParallelDocumentCorpus { documents }
}

/// Context-independent variant: sources i.i.d., `y_i = σ(x_i)`.
pub fn independent_corpus(
    num_docs: usize,
    sentences_per_doc: usize,
    seed: u64,
) -> ParallelDocumentCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let documents = (0..num_docs)
        .map(|_| {
            let source: Vec<String> = (0..sentences_per_doc)
                .map(|_| random_sentence(&mut rng))
                .collect();
            let target = source.iter().map(|s| sigma(s)).collect();
            Document { source, target }
        })
        .collect();
    ParallelDocumentCorpus { documents }
}

/// Identity task: target == source, i.i.d. sentences.
pub fn copy_corpus(num_docs: usize, sentences_per_doc: usize, seed: u64) -> ParallelDocumentCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let documents = (0..num_docs)
        .map(|_| {
            let source: Vec<String> = (0..sentences_per_doc)
                .map(|_| random_sentence(&mut rng))
                .collect();
            let target = source.clone();
            Document { source, target }
        })
        .collect();
    ParallelDocumentCorpus { documents }
}
