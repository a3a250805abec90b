//! Whitespace-separated pre-order text encoding of trees.
//!
//! Lag trees: `s <t1> <left> <right>` for splits, `l <effect>` for leaves.
//! Modifier trees: `t <j> <threshold>`, `c <j> <mask>` or `b <j>` followed by
//! both children; leaves are `n <lag tree>` or `e <k> <v1> .. <vk>`.
//! Floats use the shortest representation that parses back to the same bits.

use std::fmt::Write;

use super::dlm::DlmTree;
use super::modifier::{LeafLag, ModifierTree, SplitRule};
use super::Tree;

pub fn encode_dlm(tree: &DlmTree) -> String {
    let mut s = String::new();
    write_dlm(tree, &mut s);
    s.trim_end().to_string()
}

fn write_dlm(tree: &DlmTree, out: &mut String) {
    match tree {
        Tree::Leaf(e) => {
            let _ = write!(out, "l {e} ");
        }
        Tree::Split { rule, left, right } => {
            let _ = write!(out, "s {rule} ");
            write_dlm(left, out);
            write_dlm(right, out);
        }
    }
}

pub fn encode_modifier(tree: &ModifierTree) -> String {
    let mut s = String::new();
    write_modifier(tree, &mut s);
    s.trim_end().to_string()
}

fn write_modifier(tree: &ModifierTree, out: &mut String) {
    match tree {
        Tree::Leaf(LeafLag::Nested(d)) => {
            out.push_str("n ");
            write_dlm(d, out);
        }
        Tree::Leaf(LeafLag::Effects(v)) => {
            let _ = write!(out, "e {} ", v.len());
            for x in v {
                let _ = write!(out, "{x} ");
            }
        }
        Tree::Split { rule, left, right } => {
            let _ = match rule {
                SplitRule::Threshold { modifier, threshold } => write!(out, "t {modifier} {threshold} "),
                SplitRule::Subset { modifier, left } => write!(out, "c {modifier} {left} "),
                SplitRule::Binary { modifier } => write!(out, "b {modifier} "),
            };
            write_modifier(left, out);
            write_modifier(right, out);
        }
    }
}

struct Tokens<'a> {
    it: std::str::SplitAsciiWhitespace<'a>,
}

impl<'a> Tokens<'a> {
    fn next(&mut self) -> Result<&'a str, String> {
        self.it.next().ok_or_else(|| "unexpected end of tree".to_string())
    }

    fn parse<T: std::str::FromStr>(&mut self, what: &str) -> Result<T, String> {
        let tok = self.next()?;
        tok.parse().map_err(|_| format!("bad {what} `{tok}`"))
    }

    fn finish(mut self) -> Result<(), String> {
        match self.it.next() {
            None => Ok(()),
            Some(t) => Err(format!("trailing token `{t}`")),
        }
    }
}

fn read_dlm(tok: &mut Tokens<'_>) -> Result<DlmTree, String> {
    match tok.next()? {
        "l" => Ok(Tree::Leaf(tok.parse("effect")?)),
        "s" => {
            let rule = tok.parse("threshold")?;
            let left = Box::new(read_dlm(tok)?);
            let right = Box::new(read_dlm(tok)?);
            Ok(Tree::Split { rule, left, right })
        }
        t => Err(format!("unknown lag-tree tag `{t}`")),
    }
}

fn read_modifier(tok: &mut Tokens<'_>) -> Result<ModifierTree, String> {
    let tag = tok.next()?;
    let rule = match tag {
        "n" => return Ok(Tree::Leaf(LeafLag::Nested(read_dlm(tok)?))),
        "e" => {
            let k: usize = tok.parse("length")?;
            let v = (0..k).map(|_| tok.parse("effect")).collect::<Result<Vec<f64>, _>>()?;
            return Ok(Tree::Leaf(LeafLag::Effects(v)));
        }
        "t" => SplitRule::Threshold {
            modifier: tok.parse("modifier")?,
            threshold: tok.parse("threshold")?,
        },
        "c" => SplitRule::Subset {
            modifier: tok.parse("modifier")?,
            left: tok.parse("mask")?,
        },
        "b" => SplitRule::Binary {
            modifier: tok.parse("modifier")?,
        },
        t => return Err(format!("unknown modifier-tree tag `{t}`")),
    };
    let left = Box::new(read_modifier(tok)?);
    let right = Box::new(read_modifier(tok)?);
    Ok(Tree::Split { rule, left, right })
}

pub fn decode_dlm(s: &str) -> Result<DlmTree, String> {
    let mut tok = Tokens {
        it: s.split_ascii_whitespace(),
    };
    let t = read_dlm(&mut tok)?;
    tok.finish()?;
    Ok(t)
}

pub fn decode_modifier(s: &str) -> Result<ModifierTree, String> {
    let mut tok = Tokens {
        it: s.split_ascii_whitespace(),
    };
    let t = read_modifier(&mut tok)?;
    tok.finish()?;
    Ok(t)
}
