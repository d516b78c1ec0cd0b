//! Label lexicons and the word-boundary phrase matcher.
//!
//! Text is split into tokens (maximal runs of alphanumeric characters,
//! compared lowercase). A synonym matches where its tokens occur as a
//! contiguous token sequence. Matching is leftmost-longest and
//! non-overlapping: at each token the longest synonym starting there wins,
//! and scanning resumes after it.

use std::collections::HashMap;
use std::path::Path;

use crate::error::Result;
use crate::hierarchy::{parse_pairs, read_text, LabelId};

/// `label -> synonyms`, in file order. The first synonym of a label is its
/// display name.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Lexicon {
    labels: Vec<LabelId>,
    synonyms: Vec<Vec<String>>,
    index: HashMap<LabelId, usize>,
}

impl Lexicon {
    pub fn from_pairs<S: AsRef<str>>(pairs: &[(S, S)]) -> Lexicon {
        let mut lex = Lexicon::default();
        for (label, syn) in pairs {
            lex.add(label.as_ref(), syn.as_ref());
        }
        lex
    }

    pub fn add(&mut self, label: &str, synonym: &str) {
        let i = match self.index.get(label) {
            Some(&i) => i,
            None => {
                self.labels.push(LabelId::new(label));
                self.synonyms.push(Vec::new());
                self.index.insert(LabelId::new(label), self.labels.len() - 1);
                self.labels.len() - 1
            }
        };
        if !self.synonyms[i].iter().any(|s| s == synonym) {
            self.synonyms[i].push(synonym.to_string());
        }
    }

    pub fn parse(text: &str, source: &str) -> Result<Lexicon> {
        Ok(Lexicon::from_pairs(&parse_pairs(text, source)?))
    }

    pub fn load(path: &Path) -> Result<Lexicon> {
        Lexicon::parse(&read_text(path)?, &path.display().to_string())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[LabelId] {
        &self.labels
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn synonyms(&self, label: usize) -> &[String] {
        &self.synonyms[label]
    }

    pub fn name(&self, label: usize) -> &str {
        &self.synonyms[label][0]
    }

    pub fn to_file(&self) -> String {
        let mut out = String::new();
        for (l, syns) in self.labels.iter().zip(&self.synonyms) {
            for s in syns {
                out.push_str(&format!("{l}\t{s}\n"));
            }
        }
        out
    }
}

/// Token with byte offsets into the source text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    pub start: usize,
    pub end: usize,
    pub lower: String,
}

pub fn tokenize(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, ch) in text.char_indices() {
        match (ch.is_alphanumeric(), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push(Token {
                    start: s,
                    end: i,
                    lower: text[s..i].to_lowercase(),
                });
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(Token {
            start: s,
            end: text.len(),
            lower: text[s..].to_lowercase(),
        });
    }
    out
}

#[derive(Debug, Default)]
struct TrieNode {
    next: HashMap<String, usize>,
    /// Lexicon label indices whose synonym ends at this node.
    labels: Vec<usize>,
}

/// A matched span: byte range in the text and every label owning the
/// matched synonym.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpanMatch {
    pub start: usize,
    pub end: usize,
    pub labels: Vec<usize>,
}

/// Token trie over all synonyms of a lexicon.
#[derive(Debug)]
pub struct Matcher {
    nodes: Vec<TrieNode>,
    n_labels: usize,
}

impl Matcher {
    pub fn new(lexicon: &Lexicon) -> Matcher {
        let mut nodes = vec![TrieNode::default()];
        for label in 0..lexicon.len() {
            for syn in lexicon.synonyms(label) {
                let toks = tokenize(syn);
                if toks.is_empty() {
                    log::warn!("synonym `{syn}` has no word characters; ignored");
                    continue;
                }
                let mut at = 0;
                for t in toks {
                    at = match nodes[at].next.get(&t.lower) {
                        Some(&n) => n,
                        None => {
                            nodes.push(TrieNode::default());
                            let n = nodes.len() - 1;
                            nodes[at].next.insert(t.lower, n);
                            n
                        }
                    };
                }
                if !nodes[at].labels.contains(&label) {
                    nodes[at].labels.push(label);
                }
            }
        }
        Matcher {
            nodes,
            n_labels: lexicon.len(),
        }
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    /// Longest synonym starting at token `i`: `(tokens consumed, node)`.
    fn longest_at(&self, tokens: &[Token], i: usize) -> Option<(usize, usize)> {
        let mut at = 0;
        let mut best = None;
        for (k, t) in tokens[i..].iter().enumerate() {
            match self.nodes[at].next.get(&t.lower) {
                Some(&n) => {
                    at = n;
                    if !self.nodes[at].labels.is_empty() {
                        best = Some((k + 1, at));
                    }
                }
                None => break,
            }
        }
        best
    }

    pub fn find(&self, text: &str) -> Vec<SpanMatch> {
        let tokens = tokenize(text);
        let mut out = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            match self.longest_at(&tokens, i) {
                Some((len, node)) => {
                    out.push(SpanMatch {
                        start: tokens[i].start,
                        end: tokens[i + len - 1].end,
                        labels: self.nodes[node].labels.clone(),
                    });
                    i += len;
                }
                None => i += 1,
            }
        }
        out
    }

    /// Marks in `hits` every label mentioned at least once in `text`.
    pub fn mark_mentions(&self, text: &str, hits: &mut [bool]) {
        for m in self.find(text) {
            for l in m.labels {
                hits[l] = true;
            }
        }
    }
}
