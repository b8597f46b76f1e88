//! Corpus ingestion with document boundaries, context selection, random
//! contexts for probes, subword vocabulary, triplet assembly, and
//! batching.

mod bpe;
pub mod synth;

pub use bpe::{bpe_train, decode, encode, SubwordVocab};

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::arch::Triplet;

/// Reserved vocabulary slots. Merges never produce them and encoding never
/// splits them.
pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const BREAK: usize = 4;
pub const CONCAT: usize = 5;

pub const SPECIAL_TOKENS: [&str; 6] = ["<pad>", "<unk>", "<bos>", "<eos>", "<break>", "<concat>"];

/// Default per-sequence token cap (sources and targets).
pub const MAX_SRC_LEN: usize = 140;
/// Default cap for the concatenated context+source encoder input, and for
/// a context sequence on its own.
pub const MAX_CONCAT_LEN: usize = 160;

/// Which sentences feed the context slot. `Random` and `SelfContext` are
/// probe-only modes used to stress trained models, never to train them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    /// Previous two source sentences.
    P2Src,
    /// Previous two target sentences.
    P2Tgt,
    /// Previous and next source sentence.
    PnSrc,
    /// Two random source sentences from the whole corpus (probe).
    Random,
    /// The current source sentence itself (probe).
    #[serde(alias = "self")]
    SelfContext,
}

impl ContextMode {
    pub fn is_probe_only(self) -> bool {
        matches!(self, ContextMode::Random | ContextMode::SelfContext)
    }
}

impl std::fmt::Display for ContextMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            ContextMode::P2Src => "p2_src",
            ContextMode::P2Tgt => "p2_tgt",
            ContextMode::PnSrc => "pn_src",
            ContextMode::Random => "random",
            ContextMode::SelfContext => "self_context",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("source has {src_lines} lines but target has {tgt_lines}")]
    LineCountMismatch { src_lines: usize, tgt_lines: usize },
    #[error("boundary counts sum to {sum} but the corpus has {lines} lines")]
    BoundarySum { sum: usize, lines: usize },
    #[error("boundary file line {line}: cannot parse {content:?} as a sentence count")]
    BoundaryParse { line: usize, content: String },
    #[error("blank-line document breaks disagree between source (line {src_line}) and target (line {tgt_line})")]
    BlankMismatch { src_line: usize, tgt_line: usize },
    #[error("sentence index {index} out of range for a document of {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("no eligible random context")]
    NoEligibleRandomContext,
    #[error("random context mode requires an RNG")]
    RandomNeedsRng,
    #[error("bpe target size {requested} not above the {floor} specials+characters")]
    VocabTargetTooSmall { requested: usize, floor: usize },
    #[error("vocab file: {0}")]
    VocabFormat(String),
    #[error("corpus is empty")]
    EmptyCorpus,
}

/// One document: aligned source/target sentences, one string per sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub source: Vec<String>,
    pub target: Vec<String>,
}

impl Document {
    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }
}

/// Sentence-aligned parallel corpus with document boundaries. Context
/// selection never crosses them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelDocumentCorpus {
    pub documents: Vec<Document>,
}

impl ParallelDocumentCorpus {
    pub fn num_sentences(&self) -> usize {
        self.documents.iter().map(Document::len).sum()
    }

    /// Sentences per document, the partition document-level scoring needs.
    pub fn doc_lengths(&self) -> Vec<usize> {
        self.documents.iter().map(Document::len).collect()
    }

    pub fn source_sentences(&self) -> impl Iterator<Item = &str> {
        self.documents
            .iter()
            .flat_map(|d| d.source.iter().map(String::as_str))
    }

    pub fn target_sentences(&self) -> impl Iterator<Item = &str> {
        self.documents
            .iter()
            .flat_map(|d| d.target.iter().map(String::as_str))
    }

    /// Global sentence index -> (document, sentence-in-document).
    fn locate(&self, mut index: usize) -> Option<(usize, usize)> {
        for (d, doc) in self.documents.iter().enumerate() {
            if index < doc.len() {
                return Some((d, index));
            }
            index -= doc.len();
        }
        None
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(text.lines().map(|l| l.nfc().collect()).collect())
}

/// Load a parallel corpus. With `boundaries_path` the two sentence files
/// hold one sentence per line and the boundary file one integer per line
/// (sentences in that document). Without it, blank lines inside both
/// sentence files mark document breaks, at identical positions.
/// All text is normalized to NFC.
pub fn load_corpus(
    src_path: &Path,
    tgt_path: &Path,
    boundaries_path: Option<&Path>,
) -> Result<ParallelDocumentCorpus, DataError> {
    let src = read_lines(src_path)?;
    let tgt = read_lines(tgt_path)?;
    match boundaries_path {
        Some(bpath) => {
            if src.len() != tgt.len() {
                return Err(DataError::LineCountMismatch {
                    src_lines: src.len(),
                    tgt_lines: tgt.len(),
                });
            }
            let btext = std::fs::read_to_string(bpath).map_err(|e| DataError::Io {
                path: bpath.to_path_buf(),
                source: e,
            })?;
            let mut counts = Vec::new();
            for (i, line) in btext.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() {
                    continue;
                }
                counts.push(line.parse::<usize>().map_err(|_| DataError::BoundaryParse {
                    line: i + 1,
                    content: line.to_string(),
                })?);
            }
            let sum: usize = counts.iter().sum();
            if sum != src.len() {
                return Err(DataError::BoundarySum {
                    sum,
                    lines: src.len(),
                });
            }
            let mut documents = Vec::with_capacity(counts.len());
            let mut offset = 0;
            for n in counts {
                documents.push(Document {
                    source: src[offset..offset + n].to_vec(),
                    target: tgt[offset..offset + n].to_vec(),
                });
                offset += n;
            }
            Ok(ParallelDocumentCorpus { documents })
        }
        None => {
            // blank-line-separated variant: both sides must break identically
            let mut documents = Vec::new();
            let mut cur_src = Vec::new();
            let mut cur_tgt = Vec::new();
            let (mut i, mut j) = (0, 0);
            loop {
                let s = src.get(i);
                let t = tgt.get(j);
                match (s, t) {
                    (None, None) => break,
                    (Some(s), Some(t)) if s.is_empty() != t.is_empty() => {
                        return Err(DataError::BlankMismatch {
                            src_line: i + 1,
                            tgt_line: j + 1,
                        })
                    }
                    (Some(s), Some(t)) => {
                        if s.is_empty() {
                            if !cur_src.is_empty() {
                                documents.push(Document {
                                    source: std::mem::take(&mut cur_src),
                                    target: std::mem::take(&mut cur_tgt),
                                });
                            }
                        } else {
                            cur_src.push(s.clone());
                            cur_tgt.push(t.clone());
                        }
                        i += 1;
                        j += 1;
                    }
                    _ => {
                        return Err(DataError::LineCountMismatch {
                            src_lines: src.len(),
                            tgt_lines: tgt.len(),
                        })
                    }
                }
            }
            if !cur_src.is_empty() {
                documents.push(Document {
                    source: cur_src,
                    target: cur_tgt,
                });
            }
            Ok(ParallelDocumentCorpus { documents })
        }
    }
}

/// Context text for sentence `i` of `doc`. The neighbor slots are joined
/// by ` <break> `; a missing neighbor at a document edge leaves its slot
/// as the empty string, keeping the two-slot template uniform.
/// `SelfContext` returns the source sentence itself (one slot, no break);
/// `Random` needs corpus-level sampling and is handled by
/// [`make_random_context`].
pub fn select_context(doc: &Document, i: usize, mode: ContextMode) -> Result<String, DataError> {
    if i >= doc.len() {
        return Err(DataError::IndexOutOfRange {
            index: i,
            len: doc.len(),
        });
    }
    fn slot(side: &[String], idx: Option<usize>) -> &str {
        idx.and_then(|k| side.get(k)).map(String::as_str).unwrap_or("")
    }
    Ok(match mode {
        ContextMode::P2Src => format!(
            "{} <break> {}",
            slot(&doc.source, i.checked_sub(2)),
            slot(&doc.source, i.checked_sub(1)),
        ),
        ContextMode::P2Tgt => format!(
            "{} <break> {}",
            slot(&doc.target, i.checked_sub(2)),
            slot(&doc.target, i.checked_sub(1)),
        ),
        ContextMode::PnSrc => format!(
            "{} <break> {}",
            slot(&doc.source, i.checked_sub(1)),
            slot(&doc.source, Some(i + 1)),
        ),
        ContextMode::SelfContext => doc.source[i].clone(),
        ContextMode::Random => return Err(DataError::RandomNeedsRng),
    })
}

/// Two source sentences drawn uniformly (with replacement) from the whole
/// corpus, excluding the sentence at `exclude = (doc, position)`, joined
/// by ` <break> `. Deterministic for a given RNG state.
pub fn make_random_context(
    corpus: &ParallelDocumentCorpus,
    exclude: (usize, usize),
    rng: &mut ChaCha8Rng,
) -> Result<String, DataError> {
    let total = corpus.num_sentences();
    if total <= 1 {
        return Err(DataError::NoEligibleRandomContext);
    }
    let mut draw = || loop {
        let k = rng.gen_range(0..total);
        let (d, s) = corpus.locate(k).expect("index within num_sentences");
        if (d, s) != exclude {
            return corpus.documents[d].source[s].clone();
        }
    };
    let left = draw();
    let right = draw();
    Ok(format!("{left} <break> {right}"))
}

/// How many sequences lost tokens during triplet assembly.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TruncationStats {
    pub sources: usize,
    pub targets: usize,
    pub contexts: usize,
}

impl TruncationStats {
    pub fn total(&self) -> usize {
        self.sources + self.targets + self.contexts
    }
}

/// Cut from the right, preserving the trailing `<eos>`.
fn truncate_right(ids: &mut Vec<usize>, max: usize) -> bool {
    if ids.len() <= max {
        return false;
    }
    ids.truncate(max - 1);
    ids.push(EOS);
    true
}

/// Cut from the left (oldest context first), preserving the trailing
/// `<eos>`.
fn truncate_left(ids: &mut Vec<usize>, max: usize) -> bool {
    if ids.len() <= max {
        return false;
    }
    *ids = ids[ids.len() - max..].to_vec();
    true
}

/// Encode every sentence of the corpus into a Triplet with its selected
/// context. Sources and targets over `max_src` tokens are truncated from
/// the right, contexts over `max_concat` from the left, always keeping
/// `<eos>`; counts are reported, not fatal. (The concatenation
/// architecture trims context further at forward time so that
/// `context ⧺ <concat> ⧺ source` fits `max_concat`.)
pub fn build_triplets(
    corpus: &ParallelDocumentCorpus,
    mode: ContextMode,
    vocab: &SubwordVocab,
    max_src: usize,
    max_concat: usize,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(Vec<Triplet>, TruncationStats), DataError> {
    let mut triplets = Vec::with_capacity(corpus.num_sentences());
    let mut stats = TruncationStats::default();
    for (d, doc) in corpus.documents.iter().enumerate() {
        for i in 0..doc.len() {
            let context_text = match mode {
                ContextMode::Random => {
                    let rng = rng.as_deref_mut().ok_or(DataError::RandomNeedsRng)?;
                    make_random_context(corpus, (d, i), rng)?
                }
                _ => select_context(doc, i, mode)?,
            };
            let mut context = encode(&context_text, vocab);
            context.push(EOS);
            let mut source = encode(&doc.source[i], vocab);
            source.push(EOS);
            let mut target = encode(&doc.target[i], vocab);
            target.push(EOS);

            stats.sources += truncate_right(&mut source, max_src) as usize;
            stats.targets += truncate_right(&mut target, max_src) as usize;
            stats.contexts += truncate_left(&mut context, max_concat) as usize;

            triplets.push(Triplet {
                context,
                source,
                target,
                doc_id: d,
                position_in_doc: i,
            });
        }
    }
    Ok((triplets, stats))
}

/// One field of a batch, padded to the batch-internal maximum with
/// `<pad>`; `lens` keeps the true lengths so pads never enter a loss or an
/// attention row.
#[derive(Debug, Clone)]
pub struct PaddedField {
    pub ids: Vec<Vec<usize>>,
    pub lens: Vec<usize>,
}

impl PaddedField {
    fn build(rows: Vec<Vec<usize>>) -> Self {
        let max = rows.iter().map(Vec::len).max().unwrap_or(0);
        let lens = rows.iter().map(Vec::len).collect();
        let ids = rows
            .into_iter()
            .map(|mut r| {
                r.resize(max, PAD);
                r
            })
            .collect();
        PaddedField { ids, lens }
    }

    /// True at padded positions of row `i`.
    pub fn pad_mask(&self, i: usize) -> Vec<bool> {
        (0..self.ids[i].len()).map(|j| j >= self.lens[i]).collect()
    }

    /// Row `i` without padding.
    pub fn unpadded(&self, i: usize) -> &[usize] {
        &self.ids[i][..self.lens[i]]
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub context: PaddedField,
    pub source: PaddedField,
    pub target: PaddedField,
    pub doc_ids: Vec<usize>,
    pub positions: Vec<usize>,
}

impl Batch {
    pub fn from_triplets(rows: &[Triplet]) -> Self {
        Batch {
            context: PaddedField::build(rows.iter().map(|t| t.context.clone()).collect()),
            source: PaddedField::build(rows.iter().map(|t| t.source.clone()).collect()),
            target: PaddedField::build(rows.iter().map(|t| t.target.clone()).collect()),
            doc_ids: rows.iter().map(|t| t.doc_id).collect(),
            positions: rows.iter().map(|t| t.position_in_doc).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    /// Example `i` with padding stripped.
    pub fn example(&self, i: usize) -> Triplet {
        Triplet {
            context: self.context.unpadded(i).to_vec(),
            source: self.source.unpadded(i).to_vec(),
            target: self.target.unpadded(i).to_vec(),
            doc_id: self.doc_ids[i],
            position_in_doc: self.positions[i],
        }
    }
}

/// Split triplets into fixed-count batches, optionally shuffling first
/// (deterministic under the RNG's seed). The final batch may be short.
pub fn batches(
    triplets: &[Triplet],
    batch_size: usize,
    shuffle: Option<&mut ChaCha8Rng>,
) -> Vec<Batch> {
    assert!(batch_size > 0, "batch_size must be positive");
    let mut order: Vec<usize> = (0..triplets.len()).collect();
    if let Some(rng) = shuffle {
        use rand::seq::SliceRandom;
        order.shuffle(rng);
    }
    order
        .chunks(batch_size)
        .map(|chunk| {
            let rows: Vec<Triplet> = chunk.iter().map(|&i| triplets[i].clone()).collect();
            Batch::from_triplets(&rows)
        })
        .collect()
}
