//! Preprocessed example records: the JSON-lines interchange format between
//! the preprocessing, training, evaluation, and analysis commands.
//!
//! Every record carries the full relation and piece vocabularies so that
//! vocabulary drift between corpora and checkpoints is detectable; loading
//! refuses mixed files and reports the difference.
//!
//! Soft-path steps are stored as signed integers: a node state is the node
//! index `k` as `k`, a relation state with id `r` is `-(r + 1)`.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::align::{
    build_aligned_sequence, char_slice, map_gold_answer, CharSpan, Segment, VocabTokenizer,
};
use crate::encoder::{EncoderInput, Model, POS_SPECIAL};
use crate::error::{Error, Result};
use crate::graph::{build_isdg, build_soft_paths, PathStep, RelationVocab};
use crate::nn::IdxMat;
use crate::ud::UDDocument;

/// A gold answer: its text and character span within the context document
/// text.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GoldAnswer {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// One raw example before preprocessing.
#[derive(Debug, Clone)]
pub struct RawExample {
    pub id: String,
    pub question: UDDocument,
    pub context: UDDocument,
    pub gold_answers: Vec<GoldAnswer>,
}

/// One subtoken node in a preprocessed record.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NodeRecord {
    pub piece: String,
    /// `(sentence, word)` of the owning word; absent for specials.
    pub word: Option<(usize, usize)>,
    pub special: bool,
    /// 0 = question side, 1 = context side.
    pub segment: u8,
    pub pos: Option<String>,
}

/// One preprocessed example as serialized to JSON lines.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Record {
    pub id: String,
    pub nodes: Vec<NodeRecord>,
    /// Row-major relation ids over the nodes.
    pub rel_matrix: Vec<u8>,
    pub relation_vocab: Vec<String>,
    pub piece_vocab: Vec<String>,
    /// Canonical root node per packed sentence.
    pub roots: Vec<usize>,
    /// Untruncated soft paths in the signed-step encoding.
    pub out_paths: Vec<Vec<i32>>,
    pub in_paths: Vec<Vec<i32>>,
    pub gold_start: Option<usize>,
    pub gold_end: Option<usize>,
    /// Per-node character spans into the owning segment text.
    pub char_spans: Vec<(usize, usize)>,
    pub context_text: String,
    pub gold_answers: Vec<String>,
}

fn encode_step(step: &PathStep) -> i32 {
    match step {
        PathStep::Node(k) => *k as i32,
        PathStep::Rel(r) => -(*r as i32) - 1,
    }
}

fn decode_step(v: i32) -> PathStep {
    if v >= 0 {
        PathStep::Node(v as usize)
    } else {
        PathStep::Rel((-v - 1) as u8)
    }
}

/// Collects the deprel labels of a corpus for vocabulary construction.
pub fn corpus_deprels(examples: &[RawExample]) -> BTreeSet<String> {
    let mut labels = BTreeSet::new();
    for ex in examples {
        for doc in [&ex.question, &ex.context] {
            for s in &doc.sentences {
                for w in &s.words {
                    if w.head.is_some() {
                        labels.insert(w.deprel.clone());
                    }
                }
            }
        }
    }
    labels
}

/// Outcome counts of a preprocessing run.
#[derive(Debug, Clone, Default)]
pub struct PreprocessStats {
    pub written: usize,
    /// Examples whose gold answer fell into truncated context.
    pub skipped: usize,
}

/// Converts raw examples into records using the given tokenizer and a
/// relation vocabulary (built from this corpus, or reused from another so
/// unseen labels map to the unknown relation).
pub fn preprocess(
    examples: &[RawExample],
    tokenizer: &VocabTokenizer,
    relation_vocab: &RelationVocab,
    max_len: usize,
) -> Result<(Vec<Record>, PreprocessStats)> {
    let mut records = Vec::with_capacity(examples.len());
    let mut stats = PreprocessStats::default();
    let piece_vocab: Vec<String> = tokenizer.pieces().to_vec();
    for ex in examples {
        let seq = build_aligned_sequence(&ex.question, &ex.context, tokenizer, max_len)?;
        let gold_nodes = match ex.gold_answers.first() {
            Some(g) => match map_gold_answer(&seq, CharSpan::new(g.start, g.end)) {
                Some(span) => Some(span),
                None => {
                    stats.skipped += 1;
                    continue;
                }
            },
            None => None,
        };
        let graph = build_isdg(&seq, relation_vocab)?;
        let paths = build_soft_paths(&seq, &graph);
        let nodes: Vec<NodeRecord> = seq
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| NodeRecord {
                piece: node.piece.clone(),
                word: node.word_ref.map(|wr| (wr.sentence, wr.word)),
                special: node.is_special,
                segment: match seq.segment[i] {
                    Segment::Question => 0,
                    Segment::Context => 1,
                },
                pos: seq.node_upos(i).map(|u| u.as_str().to_string()),
            })
            .collect();
        records.push(Record {
            id: ex.id.clone(),
            nodes,
            rel_matrix: graph.rel_matrix().to_vec(),
            relation_vocab: relation_vocab.names().to_vec(),
            piece_vocab: piece_vocab.clone(),
            roots: graph.roots.clone(),
            out_paths: paths.out_paths.iter().map(|p| p.iter().map(encode_step).collect()).collect(),
            in_paths: paths.in_paths.iter().map(|p| p.iter().map(encode_step).collect()).collect(),
            gold_start: gold_nodes.map(|(s, _)| s),
            gold_end: gold_nodes.map(|(_, e)| e),
            char_spans: seq.nodes.iter().map(|n| (n.char_span.start, n.char_span.end)).collect(),
            context_text: seq.context_text.clone(),
            gold_answers: ex.gold_answers.iter().map(|g| g.text.clone()).collect(),
        });
        stats.written += 1;
    }
    Ok((records, stats))
}

impl Record {
    pub fn n(&self) -> usize {
        self.nodes.len()
    }

    /// Decodable answer positions: non-special context nodes.
    pub fn context_nodes(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .map(|n| !n.special && n.segment == 1)
            .collect()
    }

    /// Builds the encoder input for this record under a model's
    /// configuration (paths truncated to the configured bound).
    pub fn to_input(&self, model: &Model) -> Result<EncoderInput> {
        let n = self.n();
        if self.rel_matrix.len() != n * n {
            return Err(Error::Data(format!(
                "record {}: relation matrix size {} does not match {n} nodes",
                self.id,
                self.rel_matrix.len()
            )));
        }
        let mut piece_ids = Vec::with_capacity(n);
        for node in &self.nodes {
            let id = model.piece_id(&node.piece).ok_or_else(|| {
                Error::VocabMismatch(format!(
                    "record {}: piece {:?} missing from model vocabulary",
                    self.id, node.piece
                ))
            })?;
            piece_ids.push(id);
        }
        let pos_ids: Vec<usize> = self
            .nodes
            .iter()
            .map(|node| {
                node.pos
                    .as_deref()
                    .and_then(|p| p.parse::<crate::ud::Upos>().ok())
                    .map(|u| u.index())
                    .unwrap_or(POS_SPECIAL)
            })
            .collect();
        let segment_ids: Vec<usize> = self.nodes.iter().map(|n| n.segment as usize).collect();
        let rel = IdxMat::from_vec(n, n, self.rel_matrix.clone());
        let mut rel_t_data = vec![0u8; n * n];
        for i in 0..n {
            for j in 0..n {
                rel_t_data[i * n + j] = rel.get(j, i);
            }
        }
        let max_path = model.config.max_path_len;
        let decode_paths = |paths: &[Vec<i32>], keep_prefix: bool| -> Vec<Vec<PathStep>> {
            paths
                .iter()
                .map(|p| {
                    let steps: Vec<PathStep> = p.iter().map(|&v| decode_step(v)).collect();
                    if keep_prefix {
                        steps.into_iter().take(max_path).collect()
                    } else {
                        let skip = steps.len().saturating_sub(max_path);
                        steps.into_iter().skip(skip).collect()
                    }
                })
                .collect()
        };
        let gold = match (self.gold_start, self.gold_end) {
            (Some(s), Some(e)) => Some((s, e)),
            _ => None,
        };
        let edge_mask: Vec<bool> = self.rel_matrix.iter().map(|&r| r != 0).collect();
        let input = EncoderInput {
            n,
            piece_ids,
            pos_ids,
            segment_ids,
            rel: Rc::new(rel),
            rel_t: Rc::new(IdxMat::from_vec(n, n, rel_t_data)),
            edge_mask: Rc::new(edge_mask),
            out_paths: decode_paths(&self.out_paths, true),
            in_paths: decode_paths(&self.in_paths, false),
            context_nodes: self.context_nodes(),
            gold,
        };
        input.validate(model.piece_vocab.len(), model.relation_vocab.len())?;
        Ok(input)
    }

    /// Recovers the answer text for a predicted node span, mirroring the
    /// leftmost/rightmost character rule.
    pub fn recover_text(&self, start: usize, end: usize) -> Result<(String, CharSpan)> {
        let ctx = self.context_nodes();
        if start > end || end >= self.n() || !ctx[start] || !ctx[end] {
            return Err(Error::Data(format!(
                "record {}: invalid answer span {start}..{end}",
                self.id
            )));
        }
        let s = self.char_spans[start].0;
        let e = self.char_spans[end].1.max(s);
        let span = CharSpan::new(s, e);
        Ok((char_slice(&self.context_text, span), span))
    }
}

/// A loaded preprocessed corpus with its (consistent) vocabularies.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<Record>,
    pub relation_vocab: RelationVocab,
    pub piece_vocab: Vec<String>,
}

fn vocab_diff(kind: &str, a: &[String], b: &[String]) -> String {
    let sa: BTreeSet<&String> = a.iter().collect();
    let sb: BTreeSet<&String> = b.iter().collect();
    let missing: Vec<&str> = sa.difference(&sb).map(|s| s.as_str()).collect();
    let extra: Vec<&str> = sb.difference(&sa).map(|s| s.as_str()).collect();
    if missing.is_empty() && extra.is_empty() {
        format!("{kind}: same entries in a different order")
    } else {
        format!(
            "{kind}: missing [{}], unexpected [{}]",
            missing.join(", "),
            extra.join(", ")
        )
    }
}

/// Refuses unless both vocabularies match exactly (order included).
pub fn require_same_vocabs(
    context: &str,
    rel_a: &[String],
    rel_b: &[String],
    piece_a: &[String],
    piece_b: &[String],
) -> Result<()> {
    if rel_a != rel_b {
        return Err(Error::VocabMismatch(format!(
            "{context}: {}",
            vocab_diff("relation vocabulary", rel_a, rel_b)
        )));
    }
    if piece_a != piece_b {
        return Err(Error::VocabMismatch(format!(
            "{context}: {}",
            vocab_diff("piece vocabulary", piece_a, piece_b)
        )));
    }
    Ok(())
}

impl Dataset {
    pub fn from_records(records: Vec<Record>) -> Result<Dataset> {
        let first = records
            .first()
            .ok_or_else(|| Error::Data("dataset contains no records".into()))?;
        let relation_names = first.relation_vocab.clone();
        let piece_vocab = first.piece_vocab.clone();
        for r in &records[1..] {
            require_same_vocabs(
                &format!("record {}", r.id),
                &relation_names,
                &r.relation_vocab,
                &piece_vocab,
                &r.piece_vocab,
            )?;
        }
        let relation_vocab = RelationVocab::from_names(relation_names)?;
        Ok(Dataset {
            records,
            relation_vocab,
            piece_vocab,
        })
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let file = std::fs::File::open(path)?;
        let reader = BufReader::new(file);
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: Record = serde_json::from_str(&line).map_err(|e| {
                Error::Data(format!("{}:{}: {e}", path.display(), i + 1))
            })?;
            records.push(record);
        }
        Dataset::from_records(records)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_records(path, &self.records)
    }
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
