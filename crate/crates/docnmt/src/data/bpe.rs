//! Byte-pair encoding over raw characters, spaces included.
//!
//! Sentences are treated as one symbol sequence each, so merges may span
//! word boundaries and decoding is plain concatenation. The six reserved
//! specials sit at fixed low ids; they are never produced by merges, and
//! their surface markers (`<break>`, ...) pass through encoding as atomic
//! tokens.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use unicode_normalization::UnicodeNormalization;

use super::{DataError, BREAK, CONCAT, SPECIAL_TOKENS, UNK};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubwordVocab {
    /// Merge rules in application order.
    pub merges: Vec<(String, String)>,
    /// Token surface forms, index = id. Ids 0..6 are the specials.
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl SubwordVocab {
    fn from_parts(tokens: Vec<String>, merges: Vec<(String, String)>) -> Self {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        SubwordVocab {
            merges,
            tokens,
            ids,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }
}

/// Train a vocabulary of at most `target_size` entries: specials, then the
/// corpus character inventory, then greedy highest-frequency pair merges
/// (ties broken lexicographically by pair). Stops early with a warning if
/// no pair occurs at least twice before the target is reached.
pub fn bpe_train<'a>(
    lines: impl IntoIterator<Item = &'a str>,
    target_size: usize,
) -> Result<SubwordVocab, DataError> {
    // unique sequences with multiplicities keep the pair counting exact
    // while collapsing repeated sentences
    let mut seqs: BTreeMap<Vec<String>, usize> = BTreeMap::new();
    let mut alphabet: BTreeSet<String> = BTreeSet::new();
    for line in lines {
        let normalized: String = line.nfc().collect();
        let chars: Vec<String> = normalized.chars().map(|c| c.to_string()).collect();
        for c in &chars {
            alphabet.insert(c.clone());
        }
        if !chars.is_empty() {
            *seqs.entry(chars).or_insert(0) += 1;
        }
    }

    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(alphabet.iter().cloned());
    let floor = tokens.len();
    if target_size <= floor {
        return Err(DataError::VocabTargetTooSmall {
            requested: target_size,
            floor,
        });
    }

    let mut merges = Vec::new();
    let mut work: Vec<(Vec<String>, usize)> = seqs.into_iter().collect();
    while tokens.len() < target_size {
        let mut counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for (seq, mult) in &work {
            for w in seq.windows(2) {
                *counts.entry((w[0].as_str(), w[1].as_str())).or_insert(0) += mult;
            }
        }
        // max count, then lexicographically smallest pair; BTreeMap
        // iterates in pair order so `>` keeps the earliest maximum
        let best = counts
            .iter()
            .fold(None::<((&str, &str), usize)>, |acc, (&pair, &n)| {
                match acc {
                    Some((_, m)) if m >= n => acc,
                    _ => Some((pair, n)),
                }
            });
        let Some(((left, right), count)) = best else {
            break;
        };
        if count < 2 {
            eprintln!(
                "warning: bpe target size {target_size} unreachable, stopping at {} tokens",
                tokens.len()
            );
            break;
        }
        let (left, right) = (left.to_string(), right.to_string());
        let joined = format!("{left}{right}");
        for (seq, _) in &mut work {
            apply_merge(seq, &left, &right, &joined);
        }
        tokens.push(joined);
        merges.push((left, right));
    }
    Ok(SubwordVocab::from_parts(tokens, merges))
}

/// Replace non-overlapping `left right` occurrences with `joined`, left to
/// right.
fn apply_merge(seq: &mut Vec<String>, left: &str, right: &str, joined: &str) {
    let mut i = 0;
    let mut out = Vec::with_capacity(seq.len());
    while i < seq.len() {
        if i + 1 < seq.len() && seq[i] == left && seq[i + 1] == right {
            out.push(joined.to_string());
            i += 2;
        } else {
            out.push(std::mem::take(&mut seq[i]));
            i += 1;
        }
    }
    *seq = out;
}

/// Encode NFC-normalized text. Special-token markers are cut out first and
/// mapped to their fixed ids; each plain segment goes through the merge
/// replay. Unknown characters become `<unk>`.
pub fn encode(text: &str, vocab: &SubwordVocab) -> Vec<usize> {
    let normalized: String = text.nfc().collect();
    let mut ids = Vec::new();
    for piece in split_specials(&normalized) {
        match piece {
            Piece::Special(id) => ids.push(id),
            Piece::Plain(segment) => {
                let mut seq: Vec<String> = segment.chars().map(|c| c.to_string()).collect();
                for (left, right) in &vocab.merges {
                    let joined = format!("{left}{right}");
                    apply_merge(&mut seq, left, right, &joined);
                }
                for tok in &seq {
                    ids.push(vocab.id_of(tok).unwrap_or(UNK));
                }
            }
        }
    }
    ids
}

/// Inverse of `encode` on in-alphabet text: concatenation of the token
/// surfaces. Specials render as their markers, so `<unk>` doubles as the
/// replacement marker for characters outside the alphabet.
pub fn decode(ids: &[usize], vocab: &SubwordVocab) -> String {
    ids.iter()
        .map(|&id| vocab.token(id).unwrap_or(SPECIAL_TOKENS[UNK]))
        .collect()
}

enum Piece<'a> {
    Plain(&'a str),
    Special(usize),
}

/// Split text around special-token markers (`<break>` and friends),
/// longest-marker-first so overlapping spellings cannot mis-scan.
fn split_specials(text: &str) -> Vec<Piece<'_>> {
    let mut pieces = Vec::new();
    let mut rest = text;
    'outer: while !rest.is_empty() {
        let mut earliest: Option<(usize, usize)> = None; // (byte pos, special id)
        for (id, marker) in SPECIAL_TOKENS.iter().enumerate() {
            if let Some(pos) = rest.find(marker) {
                let better = match earliest {
                    None => true,
                    Some((best_pos, best_id)) => {
                        pos < best_pos
                            || (pos == best_pos
                                && marker.len() > SPECIAL_TOKENS[best_id].len())
                    }
                };
                if better {
                    earliest = Some((pos, id));
                }
            }
        }
        match earliest {
            None => {
                pieces.push(Piece::Plain(rest));
                break 'outer;
            }
            Some((pos, id)) => {
                if pos > 0 {
                    pieces.push(Piece::Plain(&rest[..pos]));
                }
                pieces.push(Piece::Special(id));
                rest = &rest[pos + SPECIAL_TOKENS[id].len()..];
            }
        }
    }
    pieces
}

// ── serialization ───────────────────────────────────────────────────────
//
// Plain-text format:
//
// ```text
// docnmt-vocab v1
// tokens <n>
// <escaped token>            × n, in id order
// merges <m>
// <escaped left>\t<escaped right>   × m, in order
// ```
//
// Escapes: `\\`, `\t`, `\n`, and `\s` for space, so every token is one
// visible line.

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            ' ' => out.push_str("\\s"),
            _ => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Result<String, DataError> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('s') => out.push(' '),
            other => {
                return Err(DataError::VocabFormat(format!(
                    "bad escape \\{}",
                    other.map(String::from).unwrap_or_default()
                )))
            }
        }
    }
    Ok(out)
}

impl SubwordVocab {
    pub fn to_text(&self) -> String {
        let mut out = String::from("docnmt-vocab v1\n");
        out.push_str(&format!("tokens {}\n", self.tokens.len()));
        for t in &self.tokens {
            out.push_str(&escape(t));
            out.push('\n');
        }
        out.push_str(&format!("merges {}\n", self.merges.len()));
        for (l, r) in &self.merges {
            out.push_str(&format!("{}\t{}\n", escape(l), escape(r)));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, DataError> {
        let mut lines = text.lines();
        let bad = |msg: &str| DataError::VocabFormat(msg.to_string());
        if lines.next() != Some("docnmt-vocab v1") {
            return Err(bad("missing docnmt-vocab v1 header"));
        }
        let count = |line: Option<&str>, word: &str| -> Result<usize, DataError> {
            let line = line.ok_or_else(|| bad("truncated file"))?;
            let rest = line
                .strip_prefix(word)
                .and_then(|r| r.strip_prefix(' '))
                .ok_or_else(|| bad(&format!("expected `{word} <count>`")))?;
            rest.parse()
                .map_err(|_| bad(&format!("bad {word} count {rest:?}")))
        };
        let n = count(lines.next(), "tokens")?;
        let mut tokens = Vec::with_capacity(n);
        for _ in 0..n {
            tokens.push(unescape(lines.next().ok_or_else(|| bad("truncated tokens"))?)?);
        }
        for (i, special) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*special) {
                return Err(bad(&format!("token {i} must be the special {special}")));
            }
        }
        let m = count(lines.next(), "merges")?;
        let mut merges = Vec::with_capacity(m);
        for _ in 0..m {
            let line = lines.next().ok_or_else(|| bad("truncated merges"))?;
            let (l, r) = line
                .split_once('\t')
                .ok_or_else(|| bad("merge line lacks a tab"))?;
            merges.push((unescape(l)?, unescape(r)?));
        }
        Ok(SubwordVocab::from_parts(tokens, merges))
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        fs::write(path, self.to_text()).map_err(|e| DataError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(|e| DataError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_text(&text)
    }
}

/// Sanity helper for tests and assertions: ids 4 and 5 really are the
/// break/concat markers.
pub(crate) fn marker_ids_are_fixed() -> bool {
    SPECIAL_TOKENS[BREAK] == "<break>" && SPECIAL_TOKENS[CONCAT] == "<concat>"
}
