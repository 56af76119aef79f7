//! Byte-level BPE vocabulary: training, encoding, decoding and the text file
//! format.
//!
//! Ids `0..256` are raw bytes, ids `256..256+merges` are merge results in
//! training order, and the three highest ids are `[SEP]`, `[EOS]`, `[PAD]`.
//!
//! File format (UTF-8, `\n` line endings, no trailing blank line):
//!
//! ```text
//! bpe-vocab v1 size=<V>
//! merge <left-id> <right-id>        (one line per merge, in rank order)
//! special [SEP] <id>
//! special [EOS] <id>
//! special [PAD] <id>
//! ```

use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const NUM_BYTES: usize = 256;
pub const NUM_SPECIALS: usize = 3;
const HEADER: &str = "bpe-vocab v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Special {
    Sep,
    Eos,
    Pad,
}

impl Special {
    pub const ALL: [Special; 3] = [Special::Sep, Special::Eos, Special::Pad];

    pub fn label(self) -> &'static str {
        match self {
            Special::Sep => "[SEP]",
            Special::Eos => "[EOS]",
            Special::Pad => "[PAD]",
        }
    }
}

/// Encoded text. Every id is below the vocabulary size it was produced with.
pub type TokenSequence = Vec<u32>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    merges: Vec<(u32, u32)>,
    tokens: Vec<Vec<u8>>,
    token_to_id: HashMap<Vec<u8>, u32>,
    ranks: HashMap<(u32, u32), u32>,
}

impl Vocab {
    fn from_merges(merges: Vec<(u32, u32)>) -> Result<Self> {
        let mut tokens: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let mut token_to_id: HashMap<Vec<u8>, u32> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        let mut ranks = HashMap::new();
        for (rank, &(a, b)) in merges.iter().enumerate() {
            let new_id = (NUM_BYTES + rank) as u32;
            let (ta, tb) = match (tokens.get(a as usize), tokens.get(b as usize)) {
                (Some(ta), Some(tb)) => (ta, tb),
                _ => {
                    return Err(Error::VocabFormat(format!(
                        "merge {rank} references unknown id ({a}, {b})"
                    )))
                }
            };
            let joined = [ta.as_slice(), tb.as_slice()].concat();
            if token_to_id.insert(joined.clone(), new_id).is_some() {
                return Err(Error::VocabFormat(format!("merge {rank} duplicates an existing token")));
            }
            if ranks.insert((a, b), new_id).is_some() {
                return Err(Error::VocabFormat(format!("merge {rank} repeats pair ({a}, {b})")));
            }
            tokens.push(joined);
        }
        Ok(Self {
            merges,
            tokens,
            token_to_id,
            ranks,
        })
    }

    /// Plain byte-level vocabulary with no merges.
    pub fn bytes_only() -> Self {
        Self::from_merges(Vec::new()).expect("empty merge list is valid")
    }

    /// Total size V including the specials.
    pub fn size(&self) -> usize {
        self.tokens.len() + NUM_SPECIALS
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn special(&self, s: Special) -> u32 {
        let base = self.tokens.len() as u32;
        match s {
            Special::Sep => base,
            Special::Eos => base + 1,
            Special::Pad => base + 2,
        }
    }

    pub fn sep(&self) -> u32 {
        self.special(Special::Sep)
    }
    pub fn eos(&self) -> u32 {
        self.special(Special::Eos)
    }
    pub fn pad(&self) -> u32 {
        self.special(Special::Pad)
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) >= self.tokens.len() && (id as usize) < self.size()
    }

    /// Bytes of a non-special token.
    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    pub fn token_id(&self, bytes: &[u8]) -> Option<u32> {
        self.token_to_id.get(bytes).copied()
    }

    pub fn encode(&self, text: &str) -> TokenSequence {
        self.encode_bytes(text.as_bytes())
    }

    /// Applies merges lowest-rank first, which reproduces the order they were
    /// learned in.
    pub fn encode_bytes(&self, bytes: &[u8]) -> TokenSequence {
        let mut ids: Vec<u32> = bytes.iter().map(|&b| b as u32).collect();
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&r| ((w[0], w[1]), r)))
                .min_by_key(|&(_, r)| r);
            let Some((pair, new_id)) = best else { break };
            ids = merge_pair(&ids, pair, new_id);
        }
        ids
    }

    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            if id as usize >= self.size() {
                return Err(Error::TokenOutOfRange { id, size: self.size() });
            }
            if let Some(bytes) = self.tokens.get(id as usize) {
                out.extend_from_slice(bytes);
            }
        }
        Ok(out)
    }

    /// Decodes to a string; invalid UTF-8 is replaced lossily.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{HEADER} size={}\n", self.size());
        for (a, b) in &self.merges {
            s.push_str(&format!("merge {a} {b}\n"));
        }
        for sp in Special::ALL {
            s.push_str(&format!("special {} {}\n", sp.label(), self.special(sp)));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::VocabFormat("empty file".into()))?;
        let size: usize = header
            .strip_prefix(HEADER)
            .and_then(|r| r.strip_prefix(" size="))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| Error::VocabFormat(format!("bad header {header:?}")))?;
        let mut merges = Vec::new();
        let mut specials = Vec::new();
        for (n, line) in lines.enumerate() {
            let parts: Vec<&str> = line.split(' ').collect();
            let bad = || Error::VocabFormat(format!("line {}: {line:?}", n + 2));
            match parts.as_slice() {
                ["merge", a, b] if specials.is_empty() => {
                    merges.push((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?))
                }
                ["special", label, id] => specials.push((label.to_string(), id.parse::<u32>().map_err(|_| bad())?)),
                _ => return Err(bad()),
            }
        }
        let vocab = Self::from_merges(merges)?;
        if vocab.size() != size {
            return Err(Error::VocabFormat(format!(
                "header size {size} but file defines {}",
                vocab.size()
            )));
        }
        let expected: Vec<(String, u32)> = Special::ALL
            .iter()
            .map(|&s| (s.label().to_string(), vocab.special(s)))
            .collect();
        if specials != expected {
            return Err(Error::VocabFormat(format!(
                "special assignments {specials:?} do not match {expected:?}"
            )));
        }
        Ok(vocab)
    }

    /// Hex SHA-256 of the serialized form; binds checkpoints to a vocabulary.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

fn merge_pair(ids: &[u32], pair: (u32, u32), new_id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && (ids[i], ids[i + 1]) == pair {
            out.push(new_id);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    out
}

/// Learns merges greedily: the most frequent adjacent pair (ties broken by
/// the lexicographically smallest byte pair) is merged until the vocabulary
/// reaches `target_size` or no pair occurs at least twice.
///
/// A pair whose concatenation already exists as a token is skipped so that
/// ids and byte strings stay in one-to-one correspondence.
pub fn train_bpe<S: AsRef<str>>(corpus: &[S], target_size: usize) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::invalid("cannot train BPE on an empty corpus"));
    }
    if target_size < NUM_BYTES + NUM_SPECIALS {
        return Err(Error::invalid(format!(
            "target size {target_size} is below the {} byte and special tokens",
            NUM_BYTES + NUM_SPECIALS
        )));
    }
    let mut freq: HashMap<&[u8], usize> = HashMap::new();
    for s in corpus {
        *freq.entry(s.as_ref().as_bytes()).or_default() += 1;
    }
    let mut words: Vec<(Vec<u32>, usize)> = freq
        .into_iter()
        .map(|(w, c)| (w.iter().map(|&b| b as u32).collect(), c))
        .collect();
    words.sort();

    let mut vocab = Vocab::bytes_only();
    while vocab.size() < target_size {
        let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
        for (w, c) in &words {
            for p in w.windows(2) {
                *counts.entry((p[0], p[1])).or_default() += c;
            }
        }
        let best = counts
            .into_iter()
            .filter(|&(_, c)| c >= 2)
            .filter(|&((a, b), _)| {
                let joined = [vocab.tokens[a as usize].as_slice(), &vocab.tokens[b as usize]].concat();
                !vocab.token_to_id.contains_key(&joined)
            })
            .max_by(|&(pa, ca), &(pb, cb)| {
                let key = |(a, b): (u32, u32)| (&vocab.tokens[a as usize], &vocab.tokens[b as usize]);
                ca.cmp(&cb).then_with(|| key(pb).cmp(&key(pa)))
            });
        let Some((pair, _)) = best else { break };
        let mut merges = vocab.merges.clone();
        merges.push(pair);
        vocab = Vocab::from_merges(merges)?;
        let new_id = vocab.tokens.len() as u32 - 1;
        for (w, _) in &mut words {
            *w = merge_pair(w, pair, new_id);
        }
    }
    Ok(vocab)
}
