//! Recognition metrics: filtered word accuracy, character error rate and
//! word-level precision/recall/F1.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Exact match after lowercasing and keeping only `[a-z0-9]`.
    Str36,
    /// Case-sensitive character error rate.
    Cer,
    /// Micro-averaged word multiset precision/recall/F1.
    WordPrf,
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "str36" => Ok(Protocol::Str36),
            "cer" => Ok(Protocol::Cer),
            "word_prf" | "word-prf" => Ok(Protocol::WordPrf),
            o => Err(Error::invalid(format!(
                "unknown protocol `{o}` (expected str36, cer or word_prf)"
            ))),
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Str36 => "str36",
            Protocol::Cer => "cer",
            Protocol::WordPrf => "word_prf",
        })
    }
}

pub fn str36(s: &str) -> String {
    s.chars()
        .flat_map(char::to_lowercase)
        .filter(|c| c.is_ascii_lowercase() || c.is_ascii_digit())
        .collect()
}

fn check_paired(preds: usize, gts: usize) -> Result<()> {
    if preds != gts {
        return Err(Error::invalid(format!("{preds} predictions for {gts} ground truths")));
    }
    Ok(())
}

/// Fraction of pairs that match exactly after `str36` filtering.
pub fn word_accuracy<P: AsRef<str>, G: AsRef<str>>(preds: &[P], gts: &[G]) -> Result<f64> {
    check_paired(preds.len(), gts.len())?;
    if gts.is_empty() {
        return Err(Error::invalid("no samples to score"));
    }
    let hits = preds
        .iter()
        .zip(gts)
        .filter(|(p, g)| str36(p.as_ref()) == str36(g.as_ref()))
        .count();
    Ok(hits as f64 / gts.len() as f64)
}

/// Unit-cost edit distance over chars.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn cer(pred: &str, gt: &str) -> Result<f64> {
    let n = gt.chars().count();
    if n == 0 {
        return Err(Error::invalid("CER is undefined for an empty ground truth"));
    }
    Ok(levenshtein(pred, gt) as f64 / n as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub matched: usize,
    pub predicted: usize,
    pub expected: usize,
}

fn bag(s: &str) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for w in s.split_whitespace() {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

/// Whitespace-split word multisets, intersected per document and summed over
/// documents before dividing.
pub fn word_prf<P: AsRef<str>, G: AsRef<str>>(preds: &[P], gts: &[G]) -> Result<Prf> {
    check_paired(preds.len(), gts.len())?;
    let mut out = Prf::default();
    for (p, g) in preds.iter().zip(gts) {
        let (bp, bg) = (bag(p.as_ref()), bag(g.as_ref()));
        out.predicted += bp.values().sum::<usize>();
        out.expected += bg.values().sum::<usize>();
        out.matched += bp
            .iter()
            .map(|(w, &n)| n.min(bg.get(w).copied().unwrap_or(0)))
            .sum::<usize>();
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    out.precision = ratio(out.matched, out.predicted);
    out.recall = ratio(out.matched, out.expected);
    out.f1 = if out.precision + out.recall == 0.0 {
        0.0
    } else {
        2.0 * out.precision * out.recall / (out.precision + out.recall)
    };
    Ok(out)
}

/// One scored sample in an evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub kind: String,
    pub index: usize,
    pub pred: String,
    pub gt: String,
    pub correct: bool,
    pub cer: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub kind: String,
    pub protocol: Protocol,
    pub samples: usize,
    pub word_accuracy: f64,
    /// Mean per-sample CER over samples with a non-empty ground truth.
    pub cer: Option<f64>,
    pub prf: Prf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub rows: Vec<SampleRow>,
    pub aggregate: Aggregate,
}

impl Report {
    pub fn new<P: AsRef<str>, G: AsRef<str>>(protocol: Protocol, preds: &[P], gts: &[G]) -> Result<Self> {
        let word_accuracy = word_accuracy(preds, gts)?;
        let prf = word_prf(preds, gts)?;
        let rows: Vec<SampleRow> = preds
            .iter()
            .zip(gts)
            .enumerate()
            .map(|(index, (p, g))| {
                let (p, g) = (p.as_ref(), g.as_ref());
                SampleRow {
                    kind: "sample".into(),
                    index,
                    pred: p.into(),
                    gt: g.into(),
                    correct: str36(p) == str36(g),
                    cer: cer(p, g).ok(),
                }
            })
            .collect();
        let cers: Vec<f64> = rows.iter().filter_map(|r| r.cer).collect();
        let cer = (!cers.is_empty()).then(|| cers.iter().sum::<f64>() / cers.len() as f64);
        Ok(Self {
            aggregate: Aggregate {
                kind: "aggregate".into(),
                protocol,
                samples: rows.len(),
                word_accuracy,
                cer,
                prf,
            },
            rows,
        })
    }

    /// JSON lines: every sample row, then the aggregate.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&serde_json::to_string(r).expect("serializable row"));
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&self.aggregate).expect("serializable aggregate"));
        out.push('\n');
        out
    }

    /// The headline number for the chosen protocol.
    pub fn summary(&self) -> String {
        let a = &self.aggregate;
        match a.protocol {
            Protocol::Str36 => format!("word_accuracy {:.3} ({} samples)", a.word_accuracy, a.samples),
            Protocol::Cer => format!("cer {:.4} ({} samples)", a.cer.unwrap_or(f64::NAN), a.samples),
            Protocol::WordPrf => format!(
                "precision {:.4} recall {:.4} f1 {:.4} ({} samples)",
                a.prf.precision, a.prf.recall, a.prf.f1, a.samples
            ),
        }
    }
}
