//! Small generated corpora for overfit and end-to-end checks.
//!
//! Inference pairs: the hypothesis is a span of the premise (entailment),
//! the span behind a negation word (contradiction), or the span plus an
//! unrelated word (neutral). Sentiment sentences mix filler words with words
//! drawn from a class-specific pool. Every sentence comes with a random
//! binary parse so tree encoders can be trained on the same data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::data::{NliExample, NliLabel, ParseTree, NUM_SENTIMENT_CLASSES};

pub const NLI_PAIRS: usize = 64;
pub const SA_SENTENCES: usize = 40;
/// Ordinary tokens in the inference corpus; with padding and unknown the
/// vocabulary has 50 entries.
pub const NLI_WORDS: usize = 48;

const NEGATION: &str = "not";

fn random_tree(tokens: &[String], rng: &mut impl Rng, label: impl Fn(&[String]) -> Option<u8> + Copy) -> ParseTree {
    if tokens.len() == 1 {
        return ParseTree::Leaf {
            label: label(tokens),
            token: tokens[0].clone(),
        };
    }
    let split = rng.random_range(1..tokens.len());
    let left = random_tree(&tokens[..split], rng, label);
    let right = random_tree(&tokens[split..], rng, label);
    ParseTree::node(label(tokens), left, right)
}

fn unlabeled_tree(tokens: &[String], rng: &mut impl Rng) -> ParseTree {
    random_tree(tokens, rng, |_| None)
}

/// 64 labeled pairs over a 48-word vocabulary, classes balanced.
pub fn nli_pairs(seed: u64) -> Vec<NliExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let content: Vec<String> = (0..40).map(|i| format!("w{i}")).collect();
    let extra: Vec<String> = (40..NLI_WORDS - 1).map(|i| format!("w{i}")).collect();
    (0..NLI_PAIRS)
        .map(|k| {
            let label = NliLabel::ALL[k % 3];
            let len = rng.random_range(4..=7);
            let premise: Vec<String> = (0..len).map(|_| content[rng.random_range(0..content.len())].clone()).collect();
            let span_len = rng.random_range(2..=3);
            let start = rng.random_range(0..=len - span_len);
            let span = premise[start..start + span_len].to_vec();
            let hypothesis = match label {
                NliLabel::Entailment => span,
                NliLabel::Contradiction => std::iter::once(NEGATION.to_string()).chain(span).collect(),
                NliLabel::Neutral => {
                    let mut h = span;
                    h.push(extra[rng.random_range(0..extra.len())].clone());
                    h
                }
            };
            let premise_tree = Some(unlabeled_tree(&premise, &mut rng));
            let hypothesis_tree = Some(unlabeled_tree(&hypothesis, &mut rng));
            NliExample {
                premise,
                hypothesis,
                label,
                premise_tree,
                hypothesis_tree,
            }
        })
        .collect()
}

/// 40 labeled trees, eight per sentiment class. Nodes covering a
/// class word carry that class; all others are neutral (2).
pub fn sentiment_trees(seed: u64) -> Vec<ParseTree> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let filler: Vec<String> = (0..30).map(|i| format!("f{i}")).collect();
    (0..SA_SENTENCES)
        .map(|k| {
            let class = k % NUM_SENTIMENT_CLASSES;
            let len = rng.random_range(4..=8);
            let mut tokens: Vec<String> = (0..len).map(|_| filler[rng.random_range(0..filler.len())].clone()).collect();
            for _ in 0..rng.random_range(1..=2) {
                let pos = rng.random_range(0..tokens.len());
                tokens[pos] = format!("s{class}_{}", rng.random_range(0..3));
            }
            let tree = random_tree(&tokens, &mut rng, |span| {
                let marked = span.iter().any(|t| t.starts_with('s'));
                Some(if marked { class as u8 } else { 2 })
            });
            match tree {
                ParseTree::Node { left, right, .. } => ParseTree::Node {
                    label: Some(class as u8),
                    left,
                    right,
                },
                leaf => leaf,
            }
        })
        .collect()
}

/// Line-delimited records in the sentence-pair corpus format.
pub fn nli_jsonl(examples: &[NliExample]) -> String {
    examples
        .iter()
        .map(|e| {
            let mut rec = json!({
                "gold_label": e.label.name(),
                "sentence1": e.premise.join(" "),
                "sentence2": e.hypothesis.join(" "),
            });
            if let (Some(p), Some(h)) = (&e.premise_tree, &e.hypothesis_tree) {
                rec["sentence1_binary_parse"] = json!(p.render());
                rec["sentence2_binary_parse"] = json!(h.render());
            }
            rec.to_string() + "\n"
        })
        .collect()
}

/// One bracketed tree per line.
pub fn sst_text(trees: &[ParseTree]) -> String {
    trees.iter().map(|t| t.render() + "\n").collect()
}
