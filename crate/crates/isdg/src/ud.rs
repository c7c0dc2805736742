//! CoNLL-U ingestion: parsing, validation, and the internal UD data model.
//!
//! Only the columns needed downstream are consumed: ID, FORM, UPOS, HEAD and
//! DEPREL. LEMMA, XPOS, FEATS, DEPS and MISC are accepted but ignored.
//! Multi-word token (MWT) rows with `x-y` range IDs are expanded and the
//! range is recorded on each expanded word. Enhanced-dependency / empty-node
//! rows (IDs containing `.`) are rejected.
//!
//! Dependency relation labels are normalized to their main type: anything
//! after the first `:` is stripped.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// The 17 universal POS tags.
pub const UPOS_TAGS: [&str; 17] = [
    "ADJ", "ADP", "ADV", "AUX", "CCONJ", "DET", "INTJ", "NOUN", "NUM", "PART", "PRON", "PROPN",
    "PUNCT", "SCONJ", "SYM", "VERB", "X",
];

/// Universal POS tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Upos(u8);

impl Upos {
    /// Embedding-table row for this tag, in `0..17`.
    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn as_str(self) -> &'static str {
        UPOS_TAGS[self.0 as usize]
    }
}

impl FromStr for Upos {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        UPOS_TAGS
            .iter()
            .position(|t| *t == s)
            .map(|i| Upos(i as u8))
            .ok_or_else(|| format!("unknown UPOS tag {s:?}"))
    }
}

impl fmt::Display for Upos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One syntactic word (post-MWT expansion).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UDWord {
    /// 1-based position within the sentence.
    pub index: usize,
    /// Word form after MWT expansion.
    pub text: String,
    pub upos: Upos,
    /// 0-based index of the head word; `None` marks the sentence root.
    pub head: Option<usize>,
    /// Main dependency relation (subtype after `:` stripped).
    pub deprel: String,
    /// `(first, last)` word IDs of the MWT row this word was expanded from.
    pub mwt_range: Option<(usize, usize)>,
}

/// A surface token as it appears in the raw text. MWT surface forms count as
/// one raw token covering several words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawToken {
    pub text: String,
}

/// One parsed sentence with a validated dependency tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UDSentence {
    pub words: Vec<UDWord>,
    /// Original sentence string (from `# text`, or reconstructed by joining
    /// surface tokens with single spaces).
    pub raw_text: String,
    /// Ordered surface tokens.
    pub raw_tokens: Vec<RawToken>,
    /// For each word, the index of the surface token it came from.
    pub word_token: Vec<usize>,
}

impl UDSentence {
    /// 0-based index of the unique root word.
    pub fn root_word(&self) -> usize {
        self.words
            .iter()
            .position(|w| w.head.is_none())
            .expect("validated sentence has a root")
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// A parsed CoNLL-U document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UDDocument {
    pub doc_id: String,
    pub sentences: Vec<UDSentence>,
}

/// Parses a CoNLL-U string into a single document.
///
/// Sentences are separated by blank lines; comment lines begin with `#`.
/// A `# newdoc id = ...` comment, if present, supplies the document id.
pub fn parse_conllu(text: &str) -> Result<UDDocument> {
    let mut docs = parse_conllu_many(text)?;
    if docs.len() > 1 {
        let extra: Vec<String> = docs.iter().map(|d| d.doc_id.clone()).collect();
        return Err(Error::Data(format!(
            "expected a single document, found {} ({})",
            docs.len(),
            extra.join(", ")
        )));
    }
    Ok(docs.remove(0))
}

/// Parses a CoNLL-U string that may contain several documents delimited by
/// `# newdoc id = ...` comments.
pub fn parse_conllu_many(text: &str) -> Result<Vec<UDDocument>> {
    let mut docs: Vec<UDDocument> = Vec::new();
    let mut current_id: Option<String> = None;
    let mut sentences: Vec<UDSentence> = Vec::new();
    let mut sentence_ordinal = 0usize;

    let mut pending: Vec<(usize, &str)> = Vec::new(); // (line number, row)
    let mut pending_text: Option<String> = None;

    fn flush(
        pending: &mut Vec<(usize, &str)>,
        pending_text: &mut Option<String>,
        sentences: &mut Vec<UDSentence>,
        sentence_ordinal: &mut usize,
    ) -> Result<()> {
        if pending.is_empty() {
            *pending_text = None;
            return Ok(());
        }
        *sentence_ordinal += 1;
        let sentence = parse_sentence(pending, pending_text.take(), *sentence_ordinal)?;
        sentences.push(sentence);
        pending.clear();
        Ok(())
    }

    fn close_doc(
        docs: &mut Vec<UDDocument>,
        current_id: &mut Option<String>,
        sentences: &mut Vec<UDSentence>,
    ) -> Result<()> {
        if current_id.is_none() && sentences.is_empty() {
            return Ok(());
        }
        if sentences.is_empty() {
            return Err(Error::Data(format!(
                "document {:?} contains no sentences",
                current_id.clone().unwrap_or_default()
            )));
        }
        docs.push(UDDocument {
            doc_id: current_id
                .take()
                .unwrap_or_else(|| format!("doc{}", docs.len())),
            sentences: std::mem::take(sentences),
        });
        Ok(())
    }

    for (lineno0, line) in text.lines().enumerate() {
        let lineno = lineno0 + 1;
        let trimmed = line.trim_end_matches(['\r']);
        if trimmed.trim().is_empty() {
            flush(&mut pending, &mut pending_text, &mut sentences, &mut sentence_ordinal)?;
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix('#') {
            let comment = rest.trim();
            if let Some(id) = comment.strip_prefix("newdoc id =") {
                flush(&mut pending, &mut pending_text, &mut sentences, &mut sentence_ordinal)?;
                close_doc(&mut docs, &mut current_id, &mut sentences)?;
                current_id = Some(id.trim().to_string());
            } else if let Some(t) = comment.strip_prefix("text =") {
                pending_text = Some(t.trim_start().to_string());
            }
            continue;
        }
        pending.push((lineno, trimmed));
    }
    flush(&mut pending, &mut pending_text, &mut sentences, &mut sentence_ordinal)?;
    if current_id.is_none() && sentences.is_empty() {
        return Err(Error::Data("document contains no sentences".into()));
    }
    close_doc(&mut docs, &mut current_id, &mut sentences)?;
    Ok(docs)
}

enum Row {
    Mwt {
        first: usize,
        last: usize,
        form: String,
    },
    Word {
        id: usize,
        form: String,
        upos: Upos,
        head: usize,
        deprel: String,
        line: usize,
    },
}

fn err(sentence: usize, line: usize, message: impl Into<String>) -> Error {
    Error::Conllu {
        sentence,
        line,
        message: message.into(),
    }
}

/// Strips the relation subtype: everything after the first `:`.
pub fn normalize_deprel(deprel: &str) -> &str {
    deprel.split(':').next().unwrap_or(deprel)
}

fn parse_sentence(
    rows: &[(usize, &str)],
    text_comment: Option<String>,
    ordinal: usize,
) -> Result<UDSentence> {
    let mut parsed: Vec<Row> = Vec::with_capacity(rows.len());
    for &(line, raw) in rows {
        let cols: Vec<&str> = raw.split('\t').collect();
        if cols.len() != 10 {
            return Err(err(
                ordinal,
                line,
                format!("expected 10 tab-separated columns, found {}", cols.len()),
            ));
        }
        let id_col = cols[0];
        if id_col.contains('.') {
            return Err(err(
                ordinal,
                line,
                format!("empty/enhanced-dependency node id {id_col:?} is not supported"),
            ));
        }
        if let Some((a, b)) = id_col.split_once('-') {
            let first: usize = a
                .parse()
                .map_err(|_| err(ordinal, line, format!("non-numeric ID {id_col:?}")))?;
            let last: usize = b
                .parse()
                .map_err(|_| err(ordinal, line, format!("non-numeric ID {id_col:?}")))?;
            if first == 0 || last < first {
                return Err(err(ordinal, line, format!("invalid MWT range {id_col:?}")));
            }
            parsed.push(Row::Mwt {
                first,
                last,
                form: cols[1].to_string(),
            });
        } else {
            let id: usize = id_col
                .parse()
                .map_err(|_| err(ordinal, line, format!("non-numeric ID {id_col:?}")))?;
            if id == 0 {
                return Err(err(ordinal, line, "word ID must be positive"));
            }
            let upos = Upos::from_str(cols[3]).map_err(|e| err(ordinal, line, e))?;
            let head: usize = cols[6]
                .parse()
                .map_err(|_| err(ordinal, line, format!("non-numeric HEAD {:?}", cols[6])))?;
            let deprel = normalize_deprel(cols[7]).to_string();
            if deprel.is_empty() {
                return Err(err(ordinal, line, "empty DEPREL"));
            }
            parsed.push(Row::Word {
                id,
                form: cols[1].to_string(),
                upos,
                head,
                deprel,
                line,
            });
        }
    }

    // Collect word rows in order and check ID contiguity.
    let mut words: Vec<UDWord> = Vec::new();
    let mut word_lines: Vec<usize> = Vec::new();
    let mut mwt_spans: Vec<(usize, usize, String)> = Vec::new();
    for row in &parsed {
        match row {
            Row::Mwt { first, last, form } => mwt_spans.push((*first, *last, form.clone())),
            Row::Word {
                id,
                form,
                upos,
                head,
                deprel,
                line,
            } => {
                let expected = words.len() + 1;
                if *id != expected {
                    return Err(err(
                        ordinal,
                        *line,
                        format!("word IDs must be contiguous: expected {expected}, found {id}"),
                    ));
                }
                words.push(UDWord {
                    index: *id,
                    text: form.clone(),
                    upos: *upos,
                    head: if *head == 0 { None } else { Some(head - 1) },
                    deprel: deprel.clone(),
                    mwt_range: None,
                });
                word_lines.push(*line);
            }
        }
    }
    if words.is_empty() {
        return Err(err(
            ordinal,
            rows.first().map(|r| r.0).unwrap_or(0),
            "sentence has no word rows",
        ));
    }
    let n = words.len();

    // Attach MWT ranges and reject overlapping or out-of-range spans.
    let mut covered = vec![false; n];
    for (first, last, _) in &mwt_spans {
        if *last > n {
            return Err(err(
                ordinal,
                word_lines[0],
                format!("MWT range {first}-{last} exceeds sentence length {n}"),
            ));
        }
        for id in *first..=*last {
            if covered[id - 1] {
                return Err(err(
                    ordinal,
                    word_lines[id - 1],
                    format!("word {id} is covered by more than one MWT range"),
                ));
            }
            covered[id - 1] = true;
            words[id - 1].mwt_range = Some((*first, *last));
        }
    }

    // Head validation: range, self-reference, unique root, acyclicity.
    let mut root_count = 0usize;
    for (i, w) in words.iter().enumerate() {
        match w.head {
            None => root_count += 1,
            Some(h) => {
                if h >= n {
                    return Err(err(
                        ordinal,
                        word_lines[i],
                        format!("head {} out of range for a {n}-word sentence", h + 1),
                    ));
                }
                if h == i {
                    return Err(err(
                        ordinal,
                        word_lines[i],
                        format!("word {} has itself as head", i + 1),
                    ));
                }
            }
        }
    }
    if root_count == 0 {
        return Err(err(ordinal, word_lines[0], "sentence has no root word"));
    }
    if root_count > 1 {
        return Err(err(
            ordinal,
            word_lines[0],
            format!("sentence has {root_count} root words, expected exactly one"),
        ));
    }
    // Chase parents from every word; more than n hops means a cycle.
    for (i, _) in words.iter().enumerate() {
        let mut cur = i;
        let mut hops = 0usize;
        while let Some(h) = words[cur].head {
            cur = h;
            hops += 1;
            if hops > n {
                return Err(err(
                    ordinal,
                    word_lines[i],
                    format!("cyclic head chain involving word {}", i + 1),
                ));
            }
        }
    }

    // Surface tokens: MWT surface forms replace their covered words.
    let mut raw_tokens: Vec<RawToken> = Vec::new();
    let mut word_token = vec![0usize; n];
    let mut id = 1usize;
    while id <= n {
        if let Some((first, last)) = words[id - 1].mwt_range {
            let form = mwt_spans
                .iter()
                .find(|(f, _, _)| *f == first)
                .map(|(_, _, s)| s.clone())
                .expect("range recorded above");
            let token_idx = raw_tokens.len();
            raw_tokens.push(RawToken { text: form });
            for covered_id in first..=last {
                word_token[covered_id - 1] = token_idx;
            }
            id = last + 1;
        } else {
            word_token[id - 1] = raw_tokens.len();
            raw_tokens.push(RawToken {
                text: words[id - 1].text.clone(),
            });
            id += 1;
        }
    }

    let raw_text = text_comment.unwrap_or_else(|| {
        raw_tokens
            .iter()
            .map(|t| t.text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    });

    Ok(UDSentence {
        words,
        raw_text,
        raw_tokens,
        word_token,
    })
}

/// Serializes a document back to CoNLL-U. Unconsumed columns are written as
/// `_`; reparsing the output yields an equal document.
pub fn to_conllu(doc: &UDDocument) -> String {
    let mut out = String::new();
    out.push_str(&format!("# newdoc id = {}\n", doc.doc_id));
    for sentence in &doc.sentences {
        out.push_str(&format!("# text = {}\n", sentence.raw_text));
        let mut emitted_mwt: Option<usize> = None;
        for word in &sentence.words {
            if let Some((first, last)) = word.mwt_range {
                if emitted_mwt != Some(first) {
                    let token = &sentence.raw_tokens[sentence.word_token[word.index - 1]];
                    out.push_str(&format!("{first}-{last}\t{}\t_\t_\t_\t_\t_\t_\t_\t_\n", token.text));
                    emitted_mwt = Some(first);
                }
            }
            let head = word.head.map(|h| h + 1).unwrap_or(0);
            out.push_str(&format!(
                "{}\t{}\t_\t{}\t_\t_\t{}\t{}\t_\t_\n",
                word.index, word.text, word.upos, head, word.deprel
            ));
        }
        out.push('\n');
    }
    out
}
