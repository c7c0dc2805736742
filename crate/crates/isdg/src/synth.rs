//! Seeded synthetic corpus generation with gold dependency trees.
//!
//! Each example asks for a specific dependency child in a specific context
//! sentence: the question names a relation cue, an anchor word, and the
//! target sentence's root word. The context contains the target sentence
//! plus a decoy sentence where the same anchor carries a child of the same
//! relation, so that surface matching alone cannot resolve the answer:
//! picking the right child needs the one-hop relation type, and picking the
//! right sentence needs the root identity carried by multi-hop paths.
//!
//! Trees are generated projectively, so every subtree is a contiguous span.
//! Multi-word tokens are injected with a configurable probability in both
//! the tiling flavor (surface equals the concatenated forms) and the fused
//! flavor (surface shares no text with the forms).

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::align::{compute_char_spans, document_text};
use crate::data::{GoldAnswer, RawExample};
use crate::error::{Error, Result};
use crate::ud::{parse_conllu, parse_conllu_many, to_conllu};

/// Relation types the question can cue.
pub const CUED_DEPRELS: [&str; 4] = ["obj", "nsubj", "obl", "nmod"];

const SYLLABLES: [&str; 16] = [
    "ba", "de", "fi", "go", "ku", "la", "mi", "no", "pa", "re", "si", "tu", "va", "zo", "he",
    "dy",
];

/// Generation parameters.
#[derive(Debug, Clone)]
pub struct GenConfig {
    pub seed: u64,
    pub n_examples: usize,
    /// Content lexicon size (≥ 20).
    pub vocab_size: usize,
    /// Sampled per sentence; depth 1 yields flat root-plus-leaves trees,
    /// depth ≥ 3 allows modifiers under the candidate children.
    pub depth_bounds: (usize, usize),
    /// Context sentence count range.
    pub context_sentences: (usize, usize),
    /// Probability of rewriting an eligible filler word as a multi-word
    /// token.
    pub mwt_prob: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            n_examples: 1,
            vocab_size: 48,
            depth_bounds: (2, 3),
            context_sentences: (2, 4),
            mwt_prob: 0.1,
        }
    }
}

struct Lexicon {
    roots: Vec<String>,
    anchors: Vec<String>,
    children: Vec<String>,
    mods: Vec<String>,
}

fn content_form(i: usize) -> String {
    let a = SYLLABLES[i % SYLLABLES.len()];
    let b = SYLLABLES[(i / SYLLABLES.len()) % SYLLABLES.len()];
    format!("{a}{b}")
}

fn lexicon(vocab_size: usize) -> Lexicon {
    let forms: Vec<String> = (0..vocab_size).map(content_form).collect();
    let quarter = (vocab_size / 4).max(5);
    let roots = forms[0..quarter].to_vec();
    let anchors = forms[quarter..2 * quarter].to_vec();
    let mods = forms[2 * quarter..2 * quarter + quarter / 2].to_vec();
    let children = forms[2 * quarter + quarter / 2..].to_vec();
    Lexicon {
        roots,
        anchors,
        children,
        mods,
    }
}

fn cue_form(deprel: &str) -> String {
    format!("k{deprel}")
}

/// The tokenizer vocabulary the corpus ships with: special tokens, syllable
/// pieces, and a full single-character fallback alphabet.
pub fn tokenizer_vocab(vocab_size: usize) -> Vec<String> {
    let mut pieces: Vec<String> = vec!["[BOS]".into(), "[SEP]".into(), "[EOS]".into()];
    let mut seen: BTreeSet<String> = BTreeSet::new();
    let mut push = |p: String, pieces: &mut Vec<String>| {
        if seen.insert(p.clone()) {
            pieces.push(p);
        }
    };
    for syl in SYLLABLES {
        push(syl.to_string(), &mut pieces);
        push(format!("##{syl}"), &mut pieces);
    }
    let lex = lexicon(vocab_size.max(20));
    let mut alphabet: BTreeSet<char> = BTreeSet::new();
    for pool in [&lex.roots, &lex.anchors, &lex.children, &lex.mods] {
        for form in pool {
            alphabet.extend(form.chars());
        }
    }
    for extra in ["ask", "ta", "te", ".", "zu", "za"] {
        alphabet.extend(extra.chars());
    }
    for deprel in CUED_DEPRELS {
        alphabet.extend(cue_form(deprel).chars());
    }
    for c in alphabet {
        push(c.to_string(), &mut pieces);
        push(format!("##{c}"), &mut pieces);
    }
    pieces
}

#[derive(Clone, Copy, PartialEq)]
enum Side {
    Left,
    Right,
}

struct WordSpec {
    form: String,
    upos: &'static str,
    deprel: String,
    children: Vec<(WordSpec, Side)>,
    /// Rewrites this leaf as a multi-word token with an attached case word.
    mwt: Option<MwtStyle>,
    answer_head: bool,
}

#[derive(Clone, Copy)]
enum MwtStyle {
    /// Surface is the concatenation of both forms.
    Tiling,
    /// Surface text differs from both forms.
    Fused,
}

impl WordSpec {
    fn new(form: &str, upos: &'static str, deprel: &str) -> WordSpec {
        WordSpec {
            form: form.to_string(),
            upos,
            deprel: deprel.to_string(),
            children: Vec::new(),
            mwt: None,
            answer_head: false,
        }
    }

    fn with_child(mut self, child: WordSpec, side: Side) -> WordSpec {
        self.children.push((child, side));
        self
    }
}

struct Lin {
    form: String,
    upos: &'static str,
    deprel: String,
    parent: Option<usize>,
    mwt: Option<(usize, MwtStyle)>, // group key = first word index
    answer_head: bool,
}

fn linearize(spec: &WordSpec, out: &mut Vec<Lin>) -> usize {
    let mut left_roots = Vec::new();
    for (child, side) in &spec.children {
        if *side == Side::Left {
            left_roots.push(linearize(child, out));
        }
    }
    let own = out.len();
    out.push(Lin {
        form: spec.form.clone(),
        upos: spec.upos,
        deprel: spec.deprel.clone(),
        parent: None,
        mwt: None,
        answer_head: spec.answer_head,
    });
    for r in left_roots {
        out[r].parent = Some(own);
    }
    if let Some(style) = spec.mwt {
        // attached case word, covered by one surface token with its head
        out[own].mwt = Some((own, style));
        out.push(Lin {
            form: "za".into(),
            upos: "ADP",
            deprel: "case".into(),
            parent: Some(own),
            mwt: Some((own, style)),
            answer_head: false,
        });
    }
    for (child, side) in &spec.children {
        if *side == Side::Right {
            let r = linearize(child, out);
            out[r].parent = Some(own);
        }
    }
    own
}

/// Renders one sentence to CoNLL-U rows (with `# text`), returning the text
/// and the subtree word range of the answer head, if present.
fn render_sentence(root: &WordSpec) -> (String, Option<(usize, usize)>) {
    let mut lin: Vec<Lin> = Vec::new();
    linearize(root, &mut lin);
    let n = lin.len();

    // surface tokens: MWT groups fuse into one token
    let mut tokens: Vec<String> = Vec::new();
    let mut i = 0;
    while i < n {
        match lin[i].mwt {
            Some((first, style)) if first == i => {
                let last = i + 1; // case word directly follows
                let surface = match style {
                    MwtStyle::Tiling => format!("{}{}", lin[i].form, lin[last].form),
                    MwtStyle::Fused => {
                        let head: String = lin[i].form.chars().take(2).collect();
                        format!("zu{head}")
                    }
                };
                tokens.push(surface);
                i = last + 1;
            }
            _ => {
                tokens.push(lin[i].form.clone());
                i += 1;
            }
        }
    }
    let text = tokens.join(" ");

    let mut rows = vec![format!("# text = {text}")];
    for (idx, word) in lin.iter().enumerate() {
        if let Some((first, style)) = word.mwt {
            if first == idx {
                let surface = match style {
                    MwtStyle::Tiling => format!("{}{}", lin[idx].form, lin[idx + 1].form),
                    MwtStyle::Fused => {
                        let head: String = lin[idx].form.chars().take(2).collect();
                        format!("zu{head}")
                    }
                };
                rows.push(format!(
                    "{}-{}\t{surface}\t_\t_\t_\t_\t_\t_\t_\t_",
                    idx + 1,
                    idx + 2
                ));
            }
        }
        let head = word.parent.map(|p| p + 1).unwrap_or(0);
        rows.push(format!(
            "{}\t{}\t_\t{}\t_\t_\t{}\t{}\t_\t_",
            idx + 1,
            word.form,
            word.upos,
            head,
            word.deprel
        ));
    }

    // answer subtree range (projective trees keep subtrees contiguous)
    let answer = lin.iter().position(|w| w.answer_head).map(|head| {
        let mut lo = head;
        let mut hi = head;
        for idx in 0..n {
            let mut cur = idx;
            loop {
                if cur == head {
                    lo = lo.min(idx);
                    hi = hi.max(idx);
                    break;
                }
                match lin[cur].parent {
                    Some(p) => cur = p,
                    None => break,
                }
            }
        }
        (lo, hi)
    });
    (rows.join("\n"), answer)
}

struct SentencePlan {
    rows: String,
    answer_words: Option<(usize, usize)>,
}

/// Builds a sentence holding `anchor` with a `cued`-relation child (the
/// candidate) and a sibling child under a different relation.
#[allow(clippy::too_many_arguments)]
fn candidate_sentence(
    rng: &mut ChaCha8Rng,
    lex: &Lexicon,
    root: &str,
    anchor: &str,
    cued: &str,
    candidate: &str,
    is_answer: bool,
    depth: usize,
    mwt_prob: f64,
) -> SentencePlan {
    let side = |rng: &mut ChaCha8Rng| {
        if rng.gen_bool(0.5) {
            Side::Left
        } else {
            Side::Right
        }
    };

    let decorate = |rng: &mut ChaCha8Rng, mut node: WordSpec, depth: usize| -> WordSpec {
        if depth >= 3 {
            for _ in 0..rng.gen_range(0..=2usize) {
                let m = lex.mods.choose(rng).unwrap();
                node = node.with_child(WordSpec::new(m, "ADJ", "amod"), Side::Left);
            }
            if rng.gen_bool(0.4) {
                let det = if rng.gen_bool(0.5) { "ta" } else { "te" };
                node = node.with_child(WordSpec::new(det, "DET", "det"), Side::Left);
            }
        }
        node
    };

    let mut target = WordSpec::new(candidate, "NOUN", cued);
    target.answer_head = is_answer;
    let target = decorate(rng, target, depth);

    let other_rel = CUED_DEPRELS
        .iter()
        .filter(|d| **d != cued)
        .nth(rng.gen_range(0..CUED_DEPRELS.len() - 1))
        .unwrap();
    let sibling_form = lex.children.choose(rng).unwrap();
    let sibling = decorate(rng, WordSpec::new(sibling_form, "NOUN", other_rel), depth);

    let mut anchor_node = WordSpec::new(anchor, "NOUN", "nsubj");
    anchor_node = anchor_node.with_child(target, side(rng));
    anchor_node = anchor_node.with_child(sibling, side(rng));

    let mut root_node = WordSpec::new(root, "VERB", "root");
    root_node = root_node.with_child(anchor_node, side(rng));
    if rng.gen_bool(0.5) {
        let mut filler = WordSpec::new(lex.children.choose(rng).unwrap(), "NOUN", "obl");
        if rng.gen_bool(mwt_prob) && depth >= 2 {
            filler.mwt = Some(if rng.gen_bool(0.5) {
                MwtStyle::Tiling
            } else {
                MwtStyle::Fused
            });
        }
        root_node = root_node.with_child(filler, side(rng));
    }
    root_node = root_node.with_child(WordSpec::new(".", "PUNCT", "punct"), Side::Right);

    let (rows, answer_words) = render_sentence(&root_node);
    SentencePlan {
        rows,
        answer_words,
    }
}

/// A flat root-plus-leaves sentence used at depth 1 and as filler.
fn flat_sentence(
    rng: &mut ChaCha8Rng,
    lex: &Lexicon,
    root: &str,
    cued: Option<(&str, &str, bool)>, // (deprel, form, is_answer)
    mwt_prob: f64,
    allow_mwt: bool,
) -> SentencePlan {
    let side = |rng: &mut ChaCha8Rng| {
        if rng.gen_bool(0.5) {
            Side::Left
        } else {
            Side::Right
        }
    };
    let mut root_node = WordSpec::new(root, "VERB", "root");
    if let Some((deprel, form, is_answer)) = cued {
        let mut child = WordSpec::new(form, "NOUN", deprel);
        child.answer_head = is_answer;
        root_node = root_node.with_child(child, side(rng));
    }
    for _ in 0..rng.gen_range(1..=2usize) {
        let mut filler = WordSpec::new(lex.children.choose(rng).unwrap(), "NOUN", "advmod");
        filler.upos = "ADV";
        if allow_mwt && rng.gen_bool(mwt_prob) {
            filler.upos = "NOUN";
            filler.deprel = "obl".into();
            filler.mwt = Some(if rng.gen_bool(0.5) {
                MwtStyle::Tiling
            } else {
                MwtStyle::Fused
            });
        }
        root_node = root_node.with_child(filler, side(rng));
    }
    root_node = root_node.with_child(WordSpec::new(".", "PUNCT", "punct"), Side::Right);
    let (rows, answer) = render_sentence(&root_node);
    SentencePlan {
        rows,
        answer_words: answer,
    }
}

fn question_rows(cued: &str, anchor: Option<&str>, root_cue: &str) -> String {
    let mut ask = WordSpec::new("ask", "VERB", "root");
    ask = ask.with_child(WordSpec::new(&cue_form(cued), "NOUN", "obj"), Side::Right);
    if let Some(a) = anchor {
        ask = ask.with_child(WordSpec::new(a, "NOUN", "nmod"), Side::Right);
    }
    ask = ask.with_child(WordSpec::new(root_cue, "NOUN", "obl"), Side::Right);
    render_sentence(&ask).0
}

/// Generates a deterministic corpus: each example's question cues a
/// relation, an anchor, and a sentence root; the answer is the cued child's
/// subtree in the cued sentence.
pub fn generate_corpus(cfg: &GenConfig) -> Result<Vec<RawExample>> {
    if cfg.vocab_size < 20 {
        return Err(Error::Config(format!(
            "vocab_size must be at least 20, got {}",
            cfg.vocab_size
        )));
    }
    if cfg.n_examples < 1 {
        return Err(Error::Config("n_examples must be at least 1".into()));
    }
    let (dlo, dhi) = cfg.depth_bounds;
    if dlo < 1 || dhi < dlo {
        return Err(Error::Config(format!(
            "infeasible depth bounds ({dlo}, {dhi})"
        )));
    }
    let (slo, shi) = cfg.context_sentences;
    if slo < 1 || shi < slo {
        return Err(Error::Config(format!(
            "infeasible sentence bounds ({slo}, {shi})"
        )));
    }
    let lex = lexicon(cfg.vocab_size);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut examples = Vec::with_capacity(cfg.n_examples);

    for ex_idx in 0..cfg.n_examples {
        let id = format!("ex{ex_idx:05}");
        let depth = rng.gen_range(dlo..=dhi);
        let n_sentences = rng.gen_range(slo..=shi);
        let cued = CUED_DEPRELS[rng.gen_range(0..CUED_DEPRELS.len())];
        let answer_form = lex.children.choose(&mut rng).unwrap().clone();

        let mut roots: Vec<&String> = lex.roots.iter().collect();
        roots.shuffle(&mut rng);
        let target_root = roots[0].clone();

        let structured = depth >= 2;
        let anchor = lex.anchors.choose(&mut rng).unwrap().clone();

        // target sentence, decoy sentence, fillers
        let mut plans: Vec<(SentencePlan, bool)> = Vec::new();
        if structured {
            let plan = candidate_sentence(
                &mut rng, &lex, &target_root, &anchor, cued, &answer_form, true, depth,
                cfg.mwt_prob,
            );
            plans.push((plan, true));
            if n_sentences >= 2 {
                let decoy_form = lex
                    .children
                    .iter()
                    .filter(|f| **f != answer_form)
                    .nth(rng.gen_range(0..lex.children.len() - 1))
                    .unwrap()
                    .clone();
                let plan = candidate_sentence(
                    &mut rng,
                    &lex,
                    &roots[1].clone(),
                    &anchor,
                    cued,
                    &decoy_form,
                    false,
                    depth,
                    cfg.mwt_prob,
                );
                plans.push((plan, false));
            }
            for k in 2..n_sentences {
                let plan = flat_sentence(
                    &mut rng,
                    &lex,
                    &roots[k % roots.len()].clone(),
                    None,
                    cfg.mwt_prob,
                    depth >= 2,
                );
                plans.push((plan, false));
            }
        } else {
            let plan = flat_sentence(
                &mut rng,
                &lex,
                &target_root,
                Some((cued, &answer_form, true)),
                0.0,
                false,
            );
            plans.push((plan, true));
            for k in 1..n_sentences {
                let decoy_form = lex.children.choose(&mut rng).unwrap().clone();
                let plan = flat_sentence(
                    &mut rng,
                    &lex,
                    &roots[k % roots.len()].clone(),
                    Some((cued, &decoy_form, false)),
                    0.0,
                    false,
                );
                plans.push((plan, false));
            }
        }
        plans.shuffle(&mut rng);

        let context_conllu: String = plans
            .iter()
            .map(|(p, _)| p.rows.clone())
            .collect::<Vec<_>>()
            .join("\n\n");
        let mut context = parse_conllu(&context_conllu)
            .map_err(|e| Error::Data(format!("generator produced invalid context: {e}")))?;
        context.doc_id = id.clone();
        let question_conllu = question_rows(
            cued,
            if structured { Some(anchor.as_str()) } else { None },
            &target_root,
        );
        let mut question = parse_conllu(&question_conllu)
            .map_err(|e| Error::Data(format!("generator produced invalid question: {e}")))?;
        question.doc_id = id.clone();

        // gold span from the parsed context document
        let target_pos = plans.iter().position(|(_, is_target)| *is_target).unwrap();
        let (wa, wb) = plans[target_pos].0.answer_words.expect("target has an answer");
        let (doc_text, offsets) = document_text(&context);
        let sentence = &context.sentences[target_pos];
        let spans = compute_char_spans(sentence)?;
        let start = spans[wa].start + offsets[target_pos];
        let end = spans[wb].end + offsets[target_pos];
        let text = crate::align::char_slice(&doc_text, crate::align::CharSpan::new(start, end));

        examples.push(RawExample {
            id,
            question,
            context,
            gold_answers: vec![GoldAnswer { text, start, end }],
        });
    }
    Ok(examples)
}

/// Writes a corpus directory: `questions.conllu`, `contexts.conllu`,
/// `answers.jsonl`, and `tokenizer_vocab.txt`.
pub fn write_corpus(dir: &Path, examples: &[RawExample], vocab_size: usize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut questions = String::new();
    let mut contexts = String::new();
    for ex in examples {
        let mut q = ex.question.clone();
        q.doc_id = ex.id.clone();
        let mut c = ex.context.clone();
        c.doc_id = ex.id.clone();
        questions.push_str(&to_conllu(&q));
        contexts.push_str(&to_conllu(&c));
    }
    std::fs::write(dir.join("questions.conllu"), questions)?;
    std::fs::write(dir.join("contexts.conllu"), contexts)?;

    let mut answers = String::new();
    for ex in examples {
        let line = serde_json::json!({
            "id": ex.id,
            "answers": ex.gold_answers,
        });
        answers.push_str(&serde_json::to_string(&line)?);
        answers.push('\n');
    }
    std::fs::write(dir.join("answers.jsonl"), answers)?;
    std::fs::write(
        dir.join("tokenizer_vocab.txt"),
        tokenizer_vocab(vocab_size).join("\n") + "\n",
    )?;
    Ok(())
}

/// Reads a corpus directory back into raw examples.
pub fn read_corpus(dir: &Path) -> Result<Vec<RawExample>> {
    let questions = parse_conllu_many(&std::fs::read_to_string(dir.join("questions.conllu"))?)?;
    let contexts = parse_conllu_many(&std::fs::read_to_string(dir.join("contexts.conllu"))?)?;
    if questions.len() != contexts.len() {
        return Err(Error::Data(format!(
            "corpus has {} questions but {} contexts",
            questions.len(),
            contexts.len()
        )));
    }
    #[derive(serde::Deserialize)]
    struct AnswerLine {
        id: String,
        answers: Vec<GoldAnswer>,
    }
    let answers_text = std::fs::read_to_string(dir.join("answers.jsonl"))?;
    let mut answer_map = std::collections::HashMap::new();
    for line in answers_text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: AnswerLine = serde_json::from_str(line)?;
        answer_map.insert(parsed.id, parsed.answers);
    }
    let mut examples = Vec::with_capacity(questions.len());
    for (q, c) in questions.into_iter().zip(contexts) {
        if q.doc_id != c.doc_id {
            return Err(Error::Data(format!(
                "document order mismatch: question {} vs context {}",
                q.doc_id, c.doc_id
            )));
        }
        let gold_answers = answer_map.remove(&q.doc_id).ok_or_else(|| {
            Error::Data(format!("no answers recorded for document {}", q.doc_id))
        })?;
        examples.push(RawExample {
            id: q.doc_id.clone(),
            question: q,
            context: c,
            gold_answers,
        });
    }
    Ok(examples)
}
