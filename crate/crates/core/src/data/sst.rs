//! Labeled sentiment treebank files, one bracketed tree per line.

use std::fs;
use std::path::Path;

use super::tree::ParseTree;
use crate::error::Result;

/// Parses every non-blank line. With `sentence_level_only` off, each
/// labeled subtree is also returned as its own example, root first.
pub fn parse_sst(text: &str, sentence_level_only: bool) -> Result<Vec<ParseTree>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let t = ParseTree::parse_line(line, i + 1)?;
        if sentence_level_only {
            out.push(t);
        } else {
            out.extend(t.subtrees().into_iter().cloned());
        }
    }
    Ok(out)
}

pub fn load_sst(path: impl AsRef<Path>, sentence_level_only: bool) -> Result<Vec<ParseTree>> {
    parse_sst(&fs::read_to_string(path)?, sentence_level_only)
}
