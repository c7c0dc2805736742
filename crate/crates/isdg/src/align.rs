//! Word-to-text and word-to-subtoken alignment.
//!
//! UD words (post-MWT expansion) are mapped to character spans of the raw
//! sentence text, then split into subtokens by a pluggable tokenizer. The
//! packed sequence `[BOS] question [SEP] context [EOS]` carries enough
//! provenance to recover answer text from predicted subtoken positions.
//!
//! All character spans count Unicode scalar values, not bytes.

use std::collections::HashSet;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ud::{UDDocument, UDSentence, Upos};

/// Half-open character span `[start, end)` into a raw text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharSpan {
    pub start: usize,
    pub end: usize,
}

impl CharSpan {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start <= end);
        CharSpan { start, end }
    }

    pub fn empty() -> Self {
        CharSpan { start: 0, end: 0 }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    /// Non-empty intersection test.
    pub fn intersects(&self, other: &CharSpan) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn shifted(&self, offset: usize) -> CharSpan {
        CharSpan {
            start: self.start + offset,
            end: self.end + offset,
        }
    }
}

/// Slices a string by character indices.
pub fn char_slice(text: &str, span: CharSpan) -> String {
    text.chars().skip(span.start).take(span.len()).collect()
}

fn char_len(text: &str) -> usize {
    text.chars().count()
}

/// Finds `needle` in `haystack` starting the search at char offset `from`.
fn find_chars(haystack: &[char], needle: &[char], from: usize) -> Option<usize> {
    if needle.is_empty() || from + needle.len() > haystack.len() {
        return None;
    }
    (from..=haystack.len() - needle.len()).find(|&at| haystack[at..at + needle.len()] == *needle)
}

/// Maps each word of a sentence to a character span of `raw_text`.
///
/// Surface tokens are located left to right, each search starting at the end
/// of the previous match. Words that are not MWT expansions receive their own
/// token's span. MWT-expanded words whose concatenated forms exactly tile the
/// surface token receive partitioned sub-spans; otherwise every word of the
/// group receives the full token span.
pub fn compute_char_spans(sentence: &UDSentence) -> Result<Vec<CharSpan>> {
    let text: Vec<char> = sentence.raw_text.chars().collect();
    let n_tokens = sentence.raw_tokens.len();

    // Locate surface tokens.
    let mut token_spans: Vec<CharSpan> = Vec::with_capacity(n_tokens);
    let mut cursor = 0usize;
    for (t, token) in sentence.raw_tokens.iter().enumerate() {
        let needle: Vec<char> = token.text.chars().collect();
        match find_chars(&text, &needle, cursor) {
            Some(at) => {
                token_spans.push(CharSpan::new(at, at + needle.len()));
                cursor = at + needle.len();
            }
            None => {
                let word = sentence
                    .word_token
                    .iter()
                    .position(|&wt| wt == t)
                    .unwrap_or(0);
                return Err(Error::Alignment {
                    sentence: 0,
                    word: word + 1,
                    form: token.text.clone(),
                    message: "surface form not found in raw text".into(),
                });
            }
        }
    }

    let mut spans = vec![CharSpan::empty(); sentence.words.len()];
    let mut done = vec![false; sentence.words.len()];
    for (i, word) in sentence.words.iter().enumerate() {
        if done[i] {
            continue;
        }
        let token_span = token_spans[sentence.word_token[i]];
        match word.mwt_range {
            None => {
                spans[i] = token_span;
                done[i] = true;
            }
            Some((first, last)) => {
                let group: Range<usize> = (first - 1)..last;
                let token_text = char_slice(&sentence.raw_text, token_span);
                let concat: String = group.clone().map(|w| sentence.words[w].text.as_str()).collect();
                if concat == token_text {
                    // Forms tile the token: partition it.
                    let mut offset = token_span.start;
                    for w in group.clone() {
                        let len = char_len(&sentence.words[w].text);
                        spans[w] = CharSpan::new(offset, offset + len);
                        offset += len;
                        done[w] = true;
                    }
                } else {
                    // Forms differ from the surface: share the whole token span.
                    for w in group.clone() {
                        spans[w] = token_span;
                        done[w] = true;
                    }
                }
            }
        }
    }
    Ok(spans)
}

/// Splits words into subword pieces. Continuation pieces carry a `##` prefix.
pub trait SubwordTokenizer {
    fn tokenize(&self, word: &str) -> Vec<String>;
}

/// Greedy longest-match tokenizer over a fixed piece vocabulary, with a
/// single-character fallback so any word tokenizes losslessly.
#[derive(Debug, Clone)]
pub struct VocabTokenizer {
    pieces: HashSet<String>,
    ordered: Vec<String>,
    max_piece_chars: usize,
}

impl VocabTokenizer {
    /// Builds a tokenizer from vocabulary lines, one piece per line.
    /// Continuation pieces are prefixed with `##` in the file.
    pub fn from_lines<I: IntoIterator<Item = S>, S: AsRef<str>>(lines: I) -> Self {
        let mut pieces = HashSet::new();
        let mut ordered = Vec::new();
        let mut max_piece_chars = 1;
        for line in lines {
            let piece = line.as_ref().trim();
            if piece.is_empty() {
                continue;
            }
            if pieces.insert(piece.to_string()) {
                ordered.push(piece.to_string());
                let body = piece.strip_prefix("##").unwrap_or(piece);
                max_piece_chars = max_piece_chars.max(char_len(body));
            }
        }
        VocabTokenizer {
            pieces,
            ordered,
            max_piece_chars,
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(Self::from_lines(text.lines()))
    }

    /// Vocabulary pieces in file order (deduplicated). This is the embedding
    /// vocabulary of the model.
    pub fn pieces(&self) -> &[String] {
        &self.ordered
    }
}

impl SubwordTokenizer for VocabTokenizer {
    fn tokenize(&self, word: &str) -> Vec<String> {
        let chars: Vec<char> = word.chars().collect();
        let mut out = Vec::new();
        let mut pos = 0usize;
        while pos < chars.len() {
            let limit = self.max_piece_chars.min(chars.len() - pos);
            let mut matched = None;
            for len in (1..=limit).rev() {
                let body: String = chars[pos..pos + len].iter().collect();
                let cand = if pos == 0 { body } else { format!("##{body}") };
                if self.pieces.contains(&cand) {
                    matched = Some((cand, len));
                    break;
                }
            }
            // Single-character fallback keeps the tokenizer total.
            let (piece, len) = matched.unwrap_or_else(|| {
                let body: String = chars[pos..pos + 1].iter().collect();
                let cand = if pos == 0 { body } else { format!("##{body}") };
                (cand, 1)
            });
            out.push(piece);
            pos += len;
        }
        out
    }
}

/// Strips the continuation marker from a piece.
pub fn piece_body(piece: &str) -> &str {
    piece.strip_prefix("##").unwrap_or(piece)
}

pub const BOS_PIECE: &str = "[BOS]";
pub const SEP_PIECE: &str = "[SEP]";
pub const EOS_PIECE: &str = "[EOS]";

/// Question or context side of the packed sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    Question,
    Context,
}

/// Reference to the owning word of a subtoken: global sentence index within
/// the packed sequence (question sentences first) and word index within it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WordRef {
    pub sentence: usize,
    pub word: usize,
}

/// One subtoken in the packed sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubtokenNode {
    pub piece: String,
    pub word_ref: Option<WordRef>,
    /// Span into the owning segment's document text; empty for specials.
    pub char_span: CharSpan,
    pub is_special: bool,
}

/// Dependency view of one packed sentence, copied from its source document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentenceInfo {
    pub segment: Segment,
    /// Nodes of this sentence within the packed sequence.
    pub node_range: Range<usize>,
    /// Per word: 0-based head index, `None` for the root.
    pub heads: Vec<Option<usize>>,
    /// Per word: normalized dependency relation to the head.
    pub deprels: Vec<String>,
    pub upos: Vec<Upos>,
    pub root_word: usize,
    /// Per word: its contiguous node range.
    pub word_nodes: Vec<Range<usize>>,
}

/// The packed subtoken sequence `[BOS] question [SEP] context [EOS]` with
/// word and character provenance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignedSequence {
    pub nodes: Vec<SubtokenNode>,
    pub sentences: Vec<SentenceInfo>,
    /// Per-node segment flag (BOS and SEP belong to the question side, EOS
    /// to the context side).
    pub segment: Vec<Segment>,
    pub question_text: String,
    pub context_text: String,
    /// Context sentences dropped by whole-sentence truncation.
    pub dropped_sentences: usize,
}

impl AlignedSequence {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node_upos(&self, node: usize) -> Option<Upos> {
        let wr = self.nodes[node].word_ref?;
        Some(self.sentences[wr.sentence].upos[wr.word])
    }

    /// Global sentence index of a node, `None` for specials.
    pub fn sentence_of(&self, node: usize) -> Option<usize> {
        self.nodes[node].word_ref.map(|wr| wr.sentence)
    }

    pub fn is_context_node(&self, node: usize) -> bool {
        !self.nodes[node].is_special && self.segment[node] == Segment::Context
    }

    /// Number of question sentences in the packed sequence.
    pub fn question_sentences(&self) -> usize {
        self.sentences
            .iter()
            .filter(|s| s.segment == Segment::Question)
            .count()
    }
}

fn sentence_nodes(
    sentence: &UDSentence,
    spans: &[CharSpan],
    doc_offset: usize,
    global_sentence: usize,
    tok: &dyn SubwordTokenizer,
) -> (Vec<SubtokenNode>, Vec<Range<usize>>) {
    let mut nodes = Vec::new();
    let mut word_nodes = Vec::with_capacity(sentence.words.len());
    for (w, word) in sentence.words.iter().enumerate() {
        let pieces = tok.tokenize(&word.text);
        debug_assert!(!pieces.is_empty());
        let from = nodes.len();
        for piece in pieces {
            nodes.push(SubtokenNode {
                piece,
                word_ref: Some(WordRef {
                    sentence: global_sentence,
                    word: w,
                }),
                char_span: spans[w].shifted(doc_offset),
                is_special: false,
            });
        }
        word_nodes.push(from..nodes.len());
    }
    (nodes, word_nodes)
}

/// Joins sentence texts with single spaces, returning the document text
/// and each sentence's character offset.
pub fn document_text(doc: &UDDocument) -> (String, Vec<usize>) {
    let mut text = String::new();
    let mut offsets = Vec::with_capacity(doc.sentences.len());
    let mut chars = 0usize;
    for (i, s) in doc.sentences.iter().enumerate() {
        if i > 0 {
            text.push(' ');
            chars += 1;
        }
        offsets.push(chars);
        text.push_str(&s.raw_text);
        chars += char_len(&s.raw_text);
    }
    (text, offsets)
}

/// Packs a question and a context document into one aligned subtoken
/// sequence, truncating whole context sentences from the end to fit
/// `max_len` nodes. Truncation never splits a word or a sentence.
pub fn build_aligned_sequence(
    question: &UDDocument,
    context: &UDDocument,
    tok: &dyn SubwordTokenizer,
    max_len: usize,
) -> Result<AlignedSequence> {
    let (question_text, q_offsets) = document_text(question);
    let (context_text, c_offsets) = document_text(context);

    let special = |piece: &str| SubtokenNode {
        piece: piece.to_string(),
        word_ref: None,
        char_span: CharSpan::empty(),
        is_special: true,
    };

    let mut nodes: Vec<SubtokenNode> = vec![special(BOS_PIECE)];
    let mut sentences: Vec<SentenceInfo> = Vec::new();

    let push_sentence = |nodes: &mut Vec<SubtokenNode>,
                             sentences: &mut Vec<SentenceInfo>,
                             sentence: &UDSentence,
                             offset: usize,
                             segment: Segment|
     -> Result<()> {
        let spans = compute_char_spans(sentence).map_err(|e| match e {
            Error::Alignment { word, form, message, .. } => Error::Alignment {
                sentence: sentences.len() + 1,
                word,
                form,
                message,
            },
            other => other,
        })?;
        let global = sentences.len();
        let (mut sent_nodes, mut word_nodes) =
            sentence_nodes(sentence, &spans, offset, global, tok);
        let base = nodes.len();
        for r in &mut word_nodes {
            *r = (r.start + base)..(r.end + base);
        }
        let from = nodes.len();
        nodes.append(&mut sent_nodes);
        sentences.push(SentenceInfo {
            segment,
            node_range: from..nodes.len(),
            heads: sentence.words.iter().map(|w| w.head).collect(),
            deprels: sentence.words.iter().map(|w| w.deprel.clone()).collect(),
            upos: sentence.words.iter().map(|w| w.upos).collect(),
            root_word: sentence.root_word(),
            word_nodes,
        });
        Ok(())
    };

    for (i, s) in question.sentences.iter().enumerate() {
        push_sentence(&mut nodes, &mut sentences, s, q_offsets[i], Segment::Question)?;
    }
    nodes.push(special(SEP_PIECE));

    let fixed = nodes.len() + 1; // +1 for the trailing EOS
    if fixed > max_len {
        return Err(Error::Sequence(format!(
            "question alone needs {fixed} nodes, exceeding max_len {max_len}"
        )));
    }

    let mut dropped = 0usize;
    for (i, s) in context.sentences.iter().enumerate() {
        if dropped > 0 {
            dropped += 1;
            continue;
        }
        let added: usize = s.words.iter().map(|w| tok.tokenize(&w.text).len()).sum();
        if nodes.len() + added + 1 > max_len {
            dropped += 1;
            continue;
        }
        push_sentence(&mut nodes, &mut sentences, s, c_offsets[i], Segment::Context)?;
    }
    nodes.push(special(EOS_PIECE));

    let segment: Vec<Segment> = {
        let sep_at = sentences
            .iter()
            .filter(|s| s.segment == Segment::Question)
            .map(|s| s.node_range.end)
            .max()
            .unwrap_or(1);
        (0..nodes.len())
            .map(|i| if i <= sep_at { Segment::Question } else { Segment::Context })
            .collect()
    };

    Ok(AlignedSequence {
        nodes,
        sentences,
        segment,
        question_text,
        context_text,
        dropped_sentences: dropped,
    })
}

/// Recovers the answer string for a predicted subtoken span: the context
/// slice from the leftmost character of the start node to the rightmost
/// character of the end node.
pub fn recover_answer(
    seq: &AlignedSequence,
    start_node: usize,
    end_node: usize,
    raw_context: &str,
) -> Result<(String, CharSpan)> {
    if start_node > end_node || end_node >= seq.len() {
        return Err(Error::Data(format!(
            "invalid span nodes {start_node}..{end_node}"
        )));
    }
    for node in [start_node, end_node] {
        if !seq.is_context_node(node) {
            return Err(Error::Data(format!(
                "node {node} is not a context subtoken"
            )));
        }
    }
    let start = seq.nodes[start_node].char_span.start;
    let end = seq.nodes[end_node].char_span.end.max(start);
    if end > char_len(raw_context) {
        return Err(Error::Data(format!(
            "span {start}..{end} exceeds context length"
        )));
    }
    let span = CharSpan::new(start, end);
    Ok((char_slice(raw_context, span), span))
}

/// Maps a gold character span to the first and last intersecting context
/// nodes. Returns `None` when the answer was truncated away, signalling that
/// the example should be skipped.
pub fn map_gold_answer(seq: &AlignedSequence, gold: CharSpan) -> Option<(usize, usize)> {
    let mut first = None;
    let mut last = None;
    for (i, node) in seq.nodes.iter().enumerate() {
        if !seq.is_context_node(i) {
            continue;
        }
        if node.char_span.intersects(&gold) {
            if first.is_none() {
                first = Some(i);
            }
            last = Some(i);
        }
    }
    match (first, last) {
        (Some(s), Some(e)) => Some((s, e)),
        _ => None,
    }
}
