//! The inter-sentence dependency graph over subtoken nodes, and per-node
//! soft paths.
//!
//! Each sentence's dependency tree is lifted to the subtoken level: every
//! subtoken shares the relations of its word, subtokens of one word are
//! fully interconnected, and every node is self-connected. Canonical root
//! nodes (first subtoken of each root word) are cross-connected so that any
//! two non-special nodes are linked by a multi-hop path.
//!
//! Soft paths approximate pairwise paths with per-node root paths: the
//! outgoing path runs from a node up to its canonical root, the incoming
//! path is its mirror. The pairwise path is their concatenation, losing only
//! the root-to-root relation at the junction.

use std::collections::HashMap;

use crate::align::{AlignedSequence, Segment};
use crate::error::{Error, Result};

/// Relation ids reserved ahead of the corpus-derived labels.
pub const REL_NONE: u8 = 0;
pub const REL_SELF: u8 = 1;
pub const REL_SUBTOKEN: u8 = 2;
pub const REL_CROSS_SENTENCE: u8 = 3;
pub const REL_CROSS_TYPE: u8 = 4;
pub const REL_UNK_FWD: u8 = 5;
pub const REL_UNK_REV: u8 = 6;

const RESERVED_NAMES: [&str; 7] = [
    "<none>",
    "<self>",
    "<subtoken>",
    "<cross-sentence>",
    "<cross-type>",
    "<unk>",
    "R-<unk>",
];

/// A typed edge label of the graph.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum RelationType {
    None,
    SelfLoop,
    Subtoken,
    CrossSentence,
    CrossType,
    /// Head-to-child dependency relation.
    Deprel(String),
    /// Child-to-head relation, rendered with the `R-` prefix.
    Reverse(String),
}

impl RelationType {
    pub fn name(&self) -> String {
        match self {
            RelationType::None => "<none>".into(),
            RelationType::SelfLoop => "<self>".into(),
            RelationType::Subtoken => "<subtoken>".into(),
            RelationType::CrossSentence => "<cross-sentence>".into(),
            RelationType::CrossType => "<cross-type>".into(),
            RelationType::Deprel(l) => l.clone(),
            RelationType::Reverse(l) => format!("R-{l}"),
        }
    }
}

/// Relation label vocabulary: the reserved relations followed by the corpus
/// deprel labels, each with its reverse. At most 255 entries so relation ids
/// fit in one byte.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationVocab {
    names: Vec<String>,
    index: HashMap<String, u8>,
}

impl RelationVocab {
    /// Builds the vocabulary from the deprel labels seen in a training
    /// corpus. Labels are deduplicated and sorted; unseen labels at use time
    /// fall back to the reserved unknown relation.
    pub fn build<I, S>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut sorted: Vec<String> = labels
            .into_iter()
            .map(|l| l.as_ref().to_string())
            .collect();
        sorted.sort();
        sorted.dedup();
        let mut names: Vec<String> = RESERVED_NAMES.iter().map(|s| s.to_string()).collect();
        for label in sorted {
            if RESERVED_NAMES.contains(&label.as_str()) || label.starts_with("R-") {
                return Err(Error::Data(format!(
                    "deprel label {label:?} collides with a reserved relation name"
                )));
            }
            names.push(label.clone());
            names.push(format!("R-{label}"));
        }
        Self::from_names(names)
    }

    /// Restores a vocabulary from its serialized name list.
    pub fn from_names(names: Vec<String>) -> Result<Self> {
        if names.len() > u8::MAX as usize + 1 {
            return Err(Error::Data(format!(
                "relation vocabulary has {} entries, limit is 256",
                names.len()
            )));
        }
        for (i, reserved) in RESERVED_NAMES.iter().enumerate() {
            if names.get(i).map(String::as_str) != Some(*reserved) {
                return Err(Error::Data(format!(
                    "relation vocabulary is missing reserved entry {reserved:?} at {i}"
                )));
            }
        }
        if (names.len() - RESERVED_NAMES.len()) % 2 != 0 {
            return Err(Error::Data(
                "relation vocabulary labels must come in forward/reverse pairs".into(),
            ));
        }
        let mut index = HashMap::new();
        for (i, name) in names.iter().enumerate() {
            if index.insert(name.clone(), i as u8).is_some() {
                return Err(Error::Data(format!("duplicate relation name {name:?}")));
            }
        }
        for i in (RESERVED_NAMES.len()..names.len()).step_by(2) {
            if names[i + 1] != format!("R-{}", names[i]) {
                return Err(Error::Data(format!(
                    "relation {:?} is not paired with its reverse",
                    names[i]
                )));
            }
        }
        Ok(RelationVocab { names, index })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: u8) -> &str {
        &self.names[id as usize]
    }

    /// Id of the head-to-child relation for a label; unknown labels map to
    /// the reserved unknown relation.
    pub fn deprel_id(&self, label: &str) -> u8 {
        self.index.get(label).copied().unwrap_or(REL_UNK_FWD)
    }

    /// Id of the child-to-head (reverse) relation for a label.
    pub fn reverse_id(&self, label: &str) -> u8 {
        self.index
            .get(&format!("R-{label}"))
            .copied()
            .unwrap_or(REL_UNK_REV)
    }

    /// The reverse of a relation id. Symmetric specials map to themselves.
    pub fn reverse_of(&self, id: u8) -> u8 {
        match id {
            REL_NONE | REL_SELF | REL_SUBTOKEN | REL_CROSS_SENTENCE | REL_CROSS_TYPE => id,
            REL_UNK_FWD => REL_UNK_REV,
            REL_UNK_REV => REL_UNK_FWD,
            _ => {
                let i = id as usize;
                let base = RESERVED_NAMES.len();
                if (i - base) % 2 == 0 {
                    id + 1
                } else {
                    id - 1
                }
            }
        }
    }

    pub fn relation(&self, id: u8) -> RelationType {
        match id {
            REL_NONE => RelationType::None,
            REL_SELF => RelationType::SelfLoop,
            REL_SUBTOKEN => RelationType::Subtoken,
            REL_CROSS_SENTENCE => RelationType::CrossSentence,
            REL_CROSS_TYPE => RelationType::CrossType,
            _ => {
                let name = &self.names[id as usize];
                match name.strip_prefix("R-") {
                    Some(label) => RelationType::Reverse(label.to_string()),
                    None => RelationType::Deprel(name.clone()),
                }
            }
        }
    }
}

/// Dense relation matrix over the packed sequence, with canonical roots and
/// per-node sentence/segment lookups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ISDGraph {
    pub n: usize,
    rel: Vec<u8>,
    /// Canonical root node of each packed sentence.
    pub roots: Vec<usize>,
    /// Sentence index per node; `None` for special nodes.
    pub sentence_of: Vec<Option<usize>>,
    pub segment_of: Vec<Segment>,
    pub vocab: RelationVocab,
}

impl ISDGraph {
    pub fn rel_id(&self, i: usize, j: usize) -> u8 {
        self.rel[i * self.n + j]
    }

    pub fn relation(&self, i: usize, j: usize) -> RelationType {
        self.vocab.relation(self.rel_id(i, j))
    }

    pub fn is_edge(&self, i: usize, j: usize) -> bool {
        self.rel_id(i, j) != REL_NONE
    }

    /// Row-major relation ids, for serialization.
    pub fn rel_matrix(&self) -> &[u8] {
        &self.rel
    }

    pub fn from_parts(
        n: usize,
        rel: Vec<u8>,
        roots: Vec<usize>,
        sentence_of: Vec<Option<usize>>,
        segment_of: Vec<Segment>,
        vocab: RelationVocab,
    ) -> Result<Self> {
        if rel.len() != n * n || sentence_of.len() != n || segment_of.len() != n {
            return Err(Error::Data("relation matrix size mismatch".into()));
        }
        Ok(ISDGraph {
            n,
            rel,
            roots,
            sentence_of,
            segment_of,
            vocab,
        })
    }

    fn set(&mut self, i: usize, j: usize, id: u8) {
        self.rel[i * self.n + j] = id;
    }
}

/// Builds the inter-sentence dependency graph for a packed sequence.
pub fn build_isdg(seq: &AlignedSequence, vocab: &RelationVocab) -> Result<ISDGraph> {
    let n = seq.len();
    let mut g = ISDGraph {
        n,
        rel: vec![REL_NONE; n * n],
        roots: Vec::with_capacity(seq.sentences.len()),
        sentence_of: (0..n).map(|i| seq.sentence_of(i)).collect(),
        segment_of: seq.segment.clone(),
        vocab: vocab.clone(),
    };

    for i in 0..n {
        g.set(i, i, REL_SELF);
    }

    for sentence in &seq.sentences {
        // Subtoken interconnection within each word.
        for range in &sentence.word_nodes {
            for a in range.clone() {
                for b in range.clone() {
                    if a != b {
                        g.set(a, b, REL_SUBTOKEN);
                    }
                }
            }
        }
        // Dependency edges, lifted to all subtoken pairs.
        for (w, head) in sentence.heads.iter().enumerate() {
            let Some(h) = *head else { continue };
            let label = &sentence.deprels[w];
            let fwd = vocab.deprel_id(label);
            let rev = vocab.reverse_id(label);
            for a in sentence.word_nodes[h].clone() {
                for b in sentence.word_nodes[w].clone() {
                    g.set(a, b, fwd);
                    g.set(b, a, rev);
                }
            }
        }
        let root = sentence.word_nodes[sentence.root_word].start;
        g.roots.push(root);
    }

    // Root cross-connections: same segment uses cross-sentence, question to
    // context uses cross-type.
    for (s1, info1) in seq.sentences.iter().enumerate() {
        for (s2, info2) in seq.sentences.iter().enumerate() {
            if s1 == s2 {
                continue;
            }
            let id = if info1.segment == info2.segment {
                REL_CROSS_SENTENCE
            } else {
                REL_CROSS_TYPE
            };
            g.set(g.roots[s1], g.roots[s2], id);
        }
    }

    Ok(g)
}

/// One element of a soft path: a node state or a relation state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathStep {
    Node(usize),
    Rel(u8),
}

/// Per-node outgoing and incoming root paths.
///
/// The outgoing path of node `i` runs from `i` to its canonical root as an
/// alternating node/relation sequence; the incoming path is the exact
/// reverse with every relation replaced by its reverse. Special nodes get
/// length-1 paths holding only themselves.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SoftPathTable {
    pub out_paths: Vec<Vec<PathStep>>,
    pub in_paths: Vec<Vec<PathStep>>,
    /// Upper bound on stored path lengths, counting node and relation
    /// elements uniformly.
    pub max_path_len: usize,
}

/// Derives the soft-path table from a packed sequence and its graph.
///
/// Paths are computed on the word-level tree; every subtoken of a word
/// shares the word's path with itself substituted as the origin. Non-first
/// subtokens of a root word take the subtoken edge to the canonical root so
/// that every path ends there.
pub fn build_soft_paths(seq: &AlignedSequence, g: &ISDGraph) -> SoftPathTable {
    let n = seq.len();
    let mut out_paths: Vec<Vec<PathStep>> = Vec::with_capacity(n);
    for i in 0..n {
        let Some(wr) = seq.nodes[i].word_ref else {
            out_paths.push(vec![PathStep::Node(i)]);
            continue;
        };
        let sentence = &seq.sentences[wr.sentence];
        let canonical = |word: usize| sentence.word_nodes[word].start;
        let mut path = vec![PathStep::Node(i)];
        if wr.word == sentence.root_word {
            let root = canonical(sentence.root_word);
            if i != root {
                path.push(PathStep::Rel(REL_SUBTOKEN));
                path.push(PathStep::Node(root));
            }
        } else {
            let mut cur = wr.word;
            while cur != sentence.root_word {
                let rev = g.vocab.reverse_id(&sentence.deprels[cur]);
                let parent = sentence.heads[cur].expect("non-root word has a head");
                path.push(PathStep::Rel(rev));
                path.push(PathStep::Node(canonical(parent)));
                cur = parent;
            }
        }
        out_paths.push(path);
    }

    let in_paths: Vec<Vec<PathStep>> = out_paths
        .iter()
        .map(|p| mirror_path(p, &g.vocab))
        .collect();
    let max_path_len = out_paths.iter().map(Vec::len).max().unwrap_or(1);
    SoftPathTable {
        out_paths,
        in_paths,
        max_path_len,
    }
}

/// Reverses a path and replaces each relation with its reverse.
pub fn mirror_path(path: &[PathStep], vocab: &RelationVocab) -> Vec<PathStep> {
    path.iter()
        .rev()
        .map(|step| match step {
            PathStep::Node(k) => PathStep::Node(*k),
            PathStep::Rel(r) => PathStep::Rel(vocab.reverse_of(*r)),
        })
        .collect()
}

/// The soft path between two non-special nodes: the concatenation of `i`'s
/// outgoing path and `j`'s incoming path.
pub fn soft_path(
    g: &ISDGraph,
    table: &SoftPathTable,
    i: usize,
    j: usize,
) -> Result<Vec<PathStep>> {
    for node in [i, j] {
        if g.sentence_of[node].is_none() {
            return Err(Error::Graph(format!(
                "soft path requested for special node {node}"
            )));
        }
    }
    let mut path = table.out_paths[i].clone();
    path.extend(table.in_paths[j].iter().copied());
    Ok(path)
}

/// Truncates every stored path to `max_len` elements: outgoing paths keep
/// their first elements, incoming paths keep their last, preserving the
/// mirror relationship near the owning node.
pub fn truncate_paths(table: &SoftPathTable, max_len: usize) -> SoftPathTable {
    assert!(max_len >= 1, "max_len must be at least 1");
    let out_paths: Vec<Vec<PathStep>> = table
        .out_paths
        .iter()
        .map(|p| p.iter().take(max_len).copied().collect())
        .collect();
    let in_paths: Vec<Vec<PathStep>> = table
        .in_paths
        .iter()
        .map(|p| {
            let skip = p.len().saturating_sub(max_len);
            p.iter().skip(skip).copied().collect()
        })
        .collect();
    SoftPathTable {
        out_paths,
        in_paths,
        max_path_len: max_len,
    }
}
