//! Labeled image manifests.
//!
//! A manifest is UTF-8 text with one record per line:
//! `<image path relative to the manifest>\t<label>`. Inside labels a
//! backslash is written `\\`, a tab `\t` and a newline `\n`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tokenizer::Vocab;
use crate::vision::{preprocess_file, TextImage};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: String,
}

pub fn escape_label(label: &str) -> String {
    let mut out = String::with_capacity(label.len());
    for c in label.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out
}

pub fn unescape_label(s: &str) -> std::result::Result<String, String> {
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
            Some(o) => return Err(format!("unknown escape `\\{o}`")),
            None => return Err("dangling backslash".into()),
        }
    }
    Ok(out)
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        writeln!(out, "{}\t{}", e.path.display(), escape_label(&e.label)).expect("string write");
    }
    out
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let err = |reason: String| Error::Manifest { line: i + 1, reason };
        let (path, label) = line
            .split_once('\t')
            .ok_or_else(|| err("expected `<path>\\t<label>`".into()))?;
        if path.is_empty() {
            return Err(err("empty image path".into()));
        }
        entries.push(ManifestEntry {
            path: PathBuf::from(path),
            label: unescape_label(label).map_err(err)?,
        });
    }
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    std::fs::write(path, format_manifest(entries)).map_err(|e| Error::io(path, e))
}

/// Reads a manifest and resolves image paths against its directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    Ok(parse_manifest(&text)?
        .into_iter()
        .map(|e| ManifestEntry {
            path: base.join(&e.path),
            label: e.label,
        })
        .collect())
}

/// A preprocessed image with its label and target ids (ending in `[EOS]`).
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: TextImage,
    pub label: String,
    pub target: Vec<u32>,
}

impl Sample {
    pub fn new(image: TextImage, label: String, vocab: &Vocab) -> Self {
        let mut target = vocab.encode(&label);
        target.push(vocab.eos());
        Self { image, label, target }
    }
}

/// Samples that loaded, plus `(path, reason)` for each that did not.
#[derive(Debug, Default)]
pub struct Loaded {
    pub samples: Vec<Sample>,
    pub skipped: Vec<(PathBuf, String)>,
}

/// Loads every manifest entry, skipping (and recording) images that fail to
/// load or labels that do not fit `max_text` tokens.
pub fn load_samples(entries: &[ManifestEntry], vocab: &Vocab, channels: usize, max_text: usize) -> Loaded {
    use rayon::prelude::*;
    let results: Vec<_> = entries
        .par_iter()
        .map(|e| {
            let image = preprocess_file(&e.path, channels)?;
            let s = Sample::new(image, e.label.clone(), vocab);
            if s.target.len() - 1 > max_text {
                return Err(Error::SequenceTooLong {
                    len: s.target.len() - 1,
                    max: max_text,
                    max_text,
                });
            }
            Ok(s)
        })
        .collect();
    let mut out = Loaded::default();
    for (e, r) in entries.iter().zip(results) {
        match r {
            Ok(s) => out.samples.push(s),
            Err(err) => {
                log::warn!("skipping {}: {err}", e.path.display());
                out.skipped.push((e.path.clone(), err.to_string()));
            }
        }
    }
    out
}
