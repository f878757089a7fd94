//! Line-delimited sentence-pair records.

use std::fs;
use std::path::Path;

use serde::Deserialize;

use super::tree::ParseTree;
use crate::error::{Error, Result};

pub const NUM_NLI_CLASSES: usize = 3;

/// Class order is fixed so that checkpoints stay portable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NliLabel {
    Entailment = 0,
    Neutral = 1,
    Contradiction = 2,
}

impl NliLabel {
    pub const ALL: [NliLabel; 3] = [NliLabel::Entailment, NliLabel::Neutral, NliLabel::Contradiction];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<NliLabel> {
        NliLabel::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            NliLabel::Entailment => "entailment",
            NliLabel::Neutral => "neutral",
            NliLabel::Contradiction => "contradiction",
        }
    }

    pub fn parse(s: &str) -> Option<NliLabel> {
        NliLabel::ALL.into_iter().find(|l| l.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NliExample {
    pub premise: Vec<String>,
    pub hypothesis: Vec<String>,
    pub label: NliLabel,
    /// Binary parses, when the record carries them.
    pub premise_tree: Option<ParseTree>,
    pub hypothesis_tree: Option<ParseTree>,
}

#[derive(Deserialize)]
struct Record {
    sentence1: String,
    sentence2: String,
    gold_label: String,
    #[serde(default)]
    sentence1_binary_parse: Option<String>,
    #[serde(default)]
    sentence2_binary_parse: Option<String>,
}

fn is_no_consensus(label: &str) -> bool {
    matches!(label, "-" | "\u{2212}")
}

fn tokenize(s: &str, lowercase: bool) -> Vec<String> {
    s.split_whitespace()
        .map(|t| if lowercase { t.to_lowercase() } else { t.to_string() })
        .collect()
}

/// Parses records from text. Blank lines are skipped; records without
/// annotator consensus are dropped.
pub fn parse_snli(text: &str, lowercase: bool) -> Result<Vec<NliExample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| Error::parse(lineno, e))?;
        if is_no_consensus(&rec.gold_label) {
            continue;
        }
        let label = NliLabel::parse(&rec.gold_label)
            .ok_or_else(|| Error::Data(format!("line {lineno}: unknown label '{}'", rec.gold_label)))?;
        let premise = tokenize(&rec.sentence1, lowercase);
        let hypothesis = tokenize(&rec.sentence2, lowercase);
        if premise.is_empty() || hypothesis.is_empty() {
            return Err(Error::Data(format!("line {lineno}: empty sentence")));
        }
        let tree = |s: Option<String>| -> Result<Option<ParseTree>> {
            s.map(|s| {
                ParseTree::parse_unlabeled(&s)
                    .map(|t| if lowercase { t.map_tokens(&|w| w.to_lowercase()) } else { t })
                    .map_err(|m| Error::parse(lineno, m))
            })
            .transpose()
        };
        out.push(NliExample {
            premise,
            hypothesis,
            label,
            premise_tree: tree(rec.sentence1_binary_parse)?,
            hypothesis_tree: tree(rec.sentence2_binary_parse)?,
        });
    }
    Ok(out)
}

pub fn load_snli(path: impl AsRef<Path>, lowercase: bool) -> Result<Vec<NliExample>> {
    parse_snli(&fs::read_to_string(path)?, lowercase)
}
