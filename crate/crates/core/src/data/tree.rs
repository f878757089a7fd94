//! Binary constituency trees in bracketed form.
//!
//! Two dialects are read:
//!
//! * labeled, one tree per line, every node and preterminal carrying a
//!   sentiment label: `(3 (2 no) (4 movement))`;
//! * unlabeled binary parses whose leaves are bare tokens:
//!   `( ( A man ) ( is ( sleeping . ) ) )`.
//!
//! Rendering joins tokens with single spaces, so any run of whitespace in the
//! input is normalized to one space on the way back out.

use crate::error::{Error, Result};

pub const NUM_SENTIMENT_CLASSES: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ParseTree {
    Leaf {
        label: Option<u8>,
        token: String,
    },
    Node {
        label: Option<u8>,
        left: Box<ParseTree>,
        right: Box<ParseTree>,
    },
}

#[derive(Debug, PartialEq)]
enum Tok<'a> {
    Open,
    Close,
    Atom(&'a str),
}

fn lex(s: &str) -> Vec<Tok<'_>> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, ch) in s.char_indices() {
        match ch {
            '(' | ')' => {
                if let Some(st) = start.take() {
                    out.push(Tok::Atom(&s[st..i]));
                }
                out.push(if ch == '(' { Tok::Open } else { Tok::Close });
            }
            c if c.is_whitespace() => {
                if let Some(st) = start.take() {
                    out.push(Tok::Atom(&s[st..i]));
                }
            }
            _ => {
                if start.is_none() {
                    start = Some(i);
                }
            }
        }
    }
    if let Some(st) = start {
        out.push(Tok::Atom(&s[st..]));
    }
    out
}

struct Parser<'a> {
    toks: Vec<Tok<'a>>,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn next(&mut self) -> Option<&Tok<'a>> {
        let t = self.toks.get(self.pos);
        self.pos += 1;
        t
    }

    fn peek(&self) -> Option<&Tok<'a>> {
        self.toks.get(self.pos)
    }

    fn expect_open(&mut self) -> std::result::Result<(), String> {
        match self.next() {
            Some(Tok::Open) => Ok(()),
            other => Err(format!("expected '(' but found {other:?}")),
        }
    }

    fn labeled(&mut self) -> std::result::Result<ParseTree, String> {
        self.expect_open()?;
        let label = match self.next() {
            Some(Tok::Atom(a)) => parse_label(a)?,
            other => return Err(format!("expected a label but found {other:?}")),
        };
        let mut kids = Vec::new();
        loop {
            match self.peek() {
                Some(Tok::Close) => {
                    self.pos += 1;
                    break;
                }
                Some(Tok::Open) => kids.push(self.labeled()?),
                Some(Tok::Atom(a)) => {
                    let token = a.to_string();
                    self.pos += 1;
                    if !kids.is_empty() || !matches!(self.next(), Some(Tok::Close)) {
                        return Err(format!("leaf '{token}' must be the only child of its node"));
                    }
                    return Ok(ParseTree::Leaf {
                        label: Some(label),
                        token,
                    });
                }
                None => return Err("unbalanced parentheses".into()),
            }
        }
        into_binary(Some(label), kids)
    }

    fn unlabeled(&mut self) -> std::result::Result<ParseTree, String> {
        match self.next() {
            Some(Tok::Atom(a)) => Ok(ParseTree::Leaf {
                label: None,
                token: a.to_string(),
            }),
            Some(Tok::Open) => {
                let mut kids = Vec::new();
                loop {
                    match self.peek() {
                        Some(Tok::Close) => {
                            self.pos += 1;
                            break;
                        }
                        Some(_) => kids.push(self.unlabeled()?),
                        None => return Err("unbalanced parentheses".into()),
                    }
                }
                if kids.len() == 1 {
                    return Ok(kids.pop().unwrap());
                }
                into_binary(None, kids)
            }
            Some(Tok::Close) => Err("unbalanced parentheses".into()),
            None => Err("empty tree".into()),
        }
    }
}

fn parse_label(a: &str) -> std::result::Result<u8, String> {
    let v: u8 = a.parse().map_err(|_| format!("label '{a}' is not an integer"))?;
    if v as usize >= NUM_SENTIMENT_CLASSES {
        return Err(format!("label {v} outside 0..4"));
    }
    Ok(v)
}

fn into_binary(label: Option<u8>, mut kids: Vec<ParseTree>) -> std::result::Result<ParseTree, String> {
    if kids.len() != 2 {
        return Err(format!("non-binary node with {} children", kids.len()));
    }
    let right = kids.pop().unwrap();
    let left = kids.pop().unwrap();
    Ok(ParseTree::Node {
        label,
        left: Box::new(left),
        right: Box::new(right),
    })
}

fn finish(p: &Parser<'_>, t: ParseTree) -> std::result::Result<ParseTree, String> {
    if p.pos != p.toks.len() {
        return Err("trailing input after tree (unbalanced parentheses?)".into());
    }
    Ok(t)
}

impl ParseTree {
    /// Parses one labeled tree such as `(3 (2 no) (4 movement))`.
    pub fn parse_labeled(s: &str) -> std::result::Result<ParseTree, String> {
        let mut p = Parser { toks: lex(s), pos: 0 };
        let t = p.labeled()?;
        finish(&p, t)
    }

    /// Parses an unlabeled binary parse with bare-token leaves.
    pub fn parse_unlabeled(s: &str) -> std::result::Result<ParseTree, String> {
        let mut p = Parser { toks: lex(s), pos: 0 };
        let t = p.unlabeled()?;
        finish(&p, t)
    }

    /// Parses one labeled tree, reporting failures against `line`.
    pub fn parse_line(s: &str, line: usize) -> Result<ParseTree> {
        ParseTree::parse_labeled(s).map_err(|m| Error::parse(line, m))
    }

    pub fn leaf(token: &str, label: Option<u8>) -> Self {
        ParseTree::Leaf {
            label,
            token: token.to_string(),
        }
    }

    pub fn node(label: Option<u8>, left: ParseTree, right: ParseTree) -> Self {
        ParseTree::Node {
            label,
            left: Box::new(left),
            right: Box::new(right),
        }
    }

    pub fn label(&self) -> Option<u8> {
        match self {
            ParseTree::Leaf { label, .. } | ParseTree::Node { label, .. } => *label,
        }
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, ParseTree::Leaf { .. })
    }

    /// Leaf tokens, left to right.
    pub fn leaves(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves<'s>(&'s self, out: &mut Vec<&'s str>) {
        match self {
            ParseTree::Leaf { token, .. } => out.push(token),
            ParseTree::Node { left, right, .. } => {
                left.collect_leaves(out);
                right.collect_leaves(out);
            }
        }
    }

    pub fn num_leaves(&self) -> usize {
        match self {
            ParseTree::Leaf { .. } => 1,
            ParseTree::Node { left, right, .. } => left.num_leaves() + right.num_leaves(),
        }
    }

    pub fn num_internal(&self) -> usize {
        self.num_leaves() - 1
    }

    /// Every subtree, root first.
    pub fn subtrees(&self) -> Vec<&ParseTree> {
        let mut out = vec![self];
        if let ParseTree::Node { left, right, .. } = self {
            out.extend(left.subtrees());
            out.extend(right.subtrees());
        }
        out
    }

    pub fn map_tokens(&self, f: &impl Fn(&str) -> String) -> ParseTree {
        match self {
            ParseTree::Leaf { label, token } => ParseTree::Leaf {
                label: *label,
                token: f(token),
            },
            ParseTree::Node { label, left, right } => ParseTree::Node {
                label: *label,
                left: Box::new(left.map_tokens(f)),
                right: Box::new(right.map_tokens(f)),
            },
        }
    }

    /// Bracketed form with single spaces. Labeled trees render as
    /// `(3 (2 a) (2 b))`, unlabeled ones as `( a b )`.
    pub fn render(&self) -> String {
        let mut s = String::new();
        self.render_into(&mut s);
        s
    }

    fn render_into(&self, s: &mut String) {
        match self {
            ParseTree::Leaf { label: Some(l), token } => {
                s.push('(');
                s.push_str(&l.to_string());
                s.push(' ');
                s.push_str(token);
                s.push(')');
            }
            ParseTree::Leaf { label: None, token } => s.push_str(token),
            ParseTree::Node {
                label: Some(l),
                left,
                right,
            } => {
                s.push('(');
                s.push_str(&l.to_string());
                s.push(' ');
                left.render_into(s);
                s.push(' ');
                right.render_into(s);
                s.push(')');
            }
            ParseTree::Node {
                label: None,
                left,
                right,
            } => {
                s.push_str("( ");
                left.render_into(s);
                s.push(' ');
                right.render_into(s);
                s.push_str(" )");
            }
        }
    }
}
