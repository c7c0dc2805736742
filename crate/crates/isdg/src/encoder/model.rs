//! The graph encoder: toy self-attention backbone, local one-hop relation
//! attention, soft-path recurrent encoding with global attention, output
//! fusion, and the span head.
//!
//! The model is split into an immutable architecture ([`Model`]: config,
//! vocabularies, parameter registry) and a [`ModelState`] holding the
//! trainable tensors, so gradient checking and optimization can own the
//! state while the architecture stays shared.

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::align::{AlignedSequence, Segment};
use crate::encoder::config::{EncoderConfig, Variant};
use crate::error::{Error, Result};
use crate::graph::{ISDGraph, PathStep, RelationVocab, SoftPathTable, REL_SELF};
use crate::nn::{
    IdxMat, Init, LstmParams, ModelState, Real, StepSrc, Tape, Tensor, Value,
};
use crate::ud::Upos;

/// Embedding row used for special tokens in the POS table (the 17 UPOS tags
/// occupy rows 0..17).
pub const POS_SPECIAL: usize = 17;
pub const POS_VOCAB: usize = 18;

const LN_EPS: f64 = 1e-5;

/// Everything the encoder consumes for one example.
#[derive(Debug, Clone)]
pub struct EncoderInput {
    pub n: usize,
    pub piece_ids: Vec<usize>,
    pub pos_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    /// Relation id from node i to node j.
    pub rel: Rc<IdxMat>,
    /// Transposed relation ids: `rel_t[i][j] = rel[j][i]`.
    pub rel_t: Rc<IdxMat>,
    /// True where `rel != none`.
    pub edge_mask: Rc<Vec<bool>>,
    /// Truncated outgoing/incoming soft paths per node.
    pub out_paths: Vec<Vec<PathStep>>,
    pub in_paths: Vec<Vec<PathStep>>,
    /// Nodes eligible as answer span endpoints.
    pub context_nodes: Vec<bool>,
    /// Gold start/end node indices for training.
    pub gold: Option<(usize, usize)>,
}

impl EncoderInput {
    /// Validates index ranges and the self-loop diagonal.
    pub fn validate(&self, piece_vocab: usize, relation_vocab: usize) -> Result<()> {
        let n = self.n;
        if self.piece_ids.len() != n
            || self.pos_ids.len() != n
            || self.segment_ids.len() != n
            || self.context_nodes.len() != n
            || self.out_paths.len() != n
            || self.in_paths.len() != n
            || self.rel.rows != n
            || self.rel.cols != n
        {
            return Err(Error::Data("encoder input field lengths disagree".into()));
        }
        if let Some(&bad) = self.piece_ids.iter().find(|&&p| p >= piece_vocab) {
            return Err(Error::Data(format!(
                "piece id {bad} outside vocabulary of {piece_vocab}"
            )));
        }
        for i in 0..n {
            if self.rel.get(i, i) != REL_SELF {
                return Err(Error::Data(format!(
                    "relation diagonal at {i} is not the self relation"
                )));
            }
            for j in 0..n {
                if self.rel.get(i, j) as usize >= relation_vocab {
                    return Err(Error::Data(format!(
                        "relation id {} at ({i},{j}) outside vocabulary",
                        self.rel.get(i, j)
                    )));
                }
            }
        }
        if let Some((s, e)) = self.gold {
            if s > e || e >= n {
                return Err(Error::Data(format!("gold span {s}..{e} out of range")));
            }
        }
        Ok(())
    }
}

/// Forward-pass mode: evaluation is deterministic, training applies dropout
/// driven by the supplied generator.
pub enum Mode<'a> {
    Eval,
    Train { rng: &'a mut ChaCha8Rng },
}

/// Handles into a recorded forward pass.
pub struct ForwardPass<R: Real> {
    pub tape: Tape<R>,
    /// Backbone output concatenated with POS embeddings.
    pub hidden: Value,
    /// Final per-node encoding fed to the span head.
    pub encoded: Value,
    pub p_start: Value,
    pub p_end: Value,
    pub loss: Option<Value>,
    pub alpha_local: Vec<Value>,
    pub alpha_global: Vec<Value>,
}

/// Extracted tensors of one forward pass.
#[derive(Debug, Clone)]
pub struct ModelOutput<R: Real> {
    pub p_start: Vec<R>,
    pub p_end: Vec<R>,
    pub alpha_local: Vec<Tensor<R>>,
    pub alpha_global: Vec<Tensor<R>>,
    pub loss: Option<R>,
}

impl<R: Real> ForwardPass<R> {
    pub fn output(&self) -> ModelOutput<R> {
        ModelOutput {
            p_start: self.tape.value(self.p_start).row(0).to_vec(),
            p_end: self.tape.value(self.p_end).row(0).to_vec(),
            alpha_local: self
                .alpha_local
                .iter()
                .map(|&v| self.tape.value(v).clone())
                .collect(),
            alpha_global: self
                .alpha_global
                .iter()
                .map(|&v| self.tape.value(v).clone())
                .collect(),
            loss: self.loss.map(|l| self.tape.value(l).scalar()),
        }
    }

    pub fn loss_scalar(&self) -> Option<R> {
        self.loss.map(|l| self.tape.value(l).scalar())
    }
}

struct AttnIds {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    wo_b: usize,
    ln_g: usize,
    ln_b: usize,
}

struct Ids {
    piece_emb: usize,
    position_emb: usize,
    segment_emb: usize,
    upos_emb: usize,
    relation_emb: usize,
    backbone: Vec<AttnIds>,
    local_wq: usize,
    local_wk: usize,
    local_wv: usize,
    local_wo: usize,
    local_wo_b: usize,
    local_w_rq: usize,
    local_w_rk: usize,
    local_w_rv: usize,
    path_rel_proj: usize,
    lstm_out_w: usize,
    lstm_out_b: usize,
    lstm_in_w: usize,
    lstm_in_b: usize,
    global_wq: usize,
    global_wk: usize,
    global_wv: usize,
    global_wo: usize,
    global_wo_b: usize,
    fuse_w: usize,
    fuse_b: usize,
    final_attn: Vec<AttnIds>,
    span_start_w: usize,
    span_start_b: usize,
    span_end_w: usize,
    span_end_b: usize,
}

enum SpecInit {
    Uniform(f64),
    FanIn,
    Zeros,
    Ones,
    /// Zero bias with the forget-gate block set to one.
    LstmBias(usize),
}

struct Spec {
    name: String,
    rows: usize,
    cols: usize,
    init: SpecInit,
}

/// The encoder architecture: configuration, vocabularies, and the parameter
/// registry. States are created per seed via [`Model::init_state`].
pub struct Model {
    pub config: EncoderConfig,
    pub variant: Variant,
    pub piece_vocab: Vec<String>,
    piece_index: HashMap<String, usize>,
    pub relation_vocab: RelationVocab,
    ids: Ids,
    specs: Vec<Spec>,
}

impl Model {
    pub fn new(
        config: EncoderConfig,
        variant: Variant,
        piece_vocab: Vec<String>,
        relation_vocab: RelationVocab,
    ) -> Result<Model> {
        config.validate()?;
        if piece_vocab.is_empty() {
            return Err(Error::Config("piece vocabulary is empty".into()));
        }
        let mut piece_index = HashMap::new();
        for (i, p) in piece_vocab.iter().enumerate() {
            if piece_index.insert(p.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate piece {p:?}")));
            }
        }

        let d_b = config.d_backbone;
        let d_x = config.d_x();
        let d_r = config.d_r;
        let dh_l = d_x / config.heads_local;
        let v = relation_vocab.len();

        let mut specs: Vec<Spec> = Vec::new();
        let mut add = |name: &str, rows: usize, cols: usize, init: SpecInit| -> usize {
            specs.push(Spec {
                name: name.to_string(),
                rows,
                cols,
                init,
            });
            specs.len() - 1
        };

        let emb = SpecInit::Uniform(0.05);
        let piece_emb = add("emb.piece", piece_vocab.len(), d_b, emb);
        let position_emb = add("emb.position", config.max_len, d_b, SpecInit::Uniform(0.05));
        let segment_emb = add("emb.segment", 2, d_b, SpecInit::Uniform(0.05));
        let upos_emb = add("emb.upos", POS_VOCAB, config.d_pos, SpecInit::Uniform(0.05));
        let relation_emb = add("emb.relation", v, d_r, SpecInit::Uniform(0.05));

        let attn_block = |prefix: &str, d: usize, add: &mut dyn FnMut(&str, usize, usize, SpecInit) -> usize| AttnIds {
            wq: add(&format!("{prefix}.wq"), d, d, SpecInit::FanIn),
            wk: add(&format!("{prefix}.wk"), d, d, SpecInit::FanIn),
            wv: add(&format!("{prefix}.wv"), d, d, SpecInit::FanIn),
            wo: add(&format!("{prefix}.wo"), d, d, SpecInit::FanIn),
            wo_b: add(&format!("{prefix}.wo_b"), 1, d, SpecInit::Zeros),
            ln_g: add(&format!("{prefix}.ln_g"), 1, d, SpecInit::Ones),
            ln_b: add(&format!("{prefix}.ln_b"), 1, d, SpecInit::Zeros),
        };

        let backbone: Vec<AttnIds> = (0..config.backbone_layers)
            .map(|l| attn_block(&format!("backbone.{l}"), d_b, &mut add))
            .collect();

        let local_wq = add("local.wq", d_x, d_x, SpecInit::FanIn);
        let local_wk = add("local.wk", d_x, d_x, SpecInit::FanIn);
        let local_wv = add("local.wv", d_x, d_x, SpecInit::FanIn);
        let local_wo = add("local.wo", d_x, d_x, SpecInit::FanIn);
        let local_wo_b = add("local.wo_b", 1, d_x, SpecInit::Zeros);
        let local_w_rq = add("local.w_rq", d_r, dh_l, SpecInit::FanIn);
        let local_w_rk = add("local.w_rk", d_r, dh_l, SpecInit::FanIn);
        let local_w_rv = add("local.w_rv", d_r, d_x, SpecInit::FanIn);

        let path_rel_proj = add("path.rel_proj", d_r, d_x, SpecInit::FanIn);
        let lstm_out_w = add("path.out.w", 2 * d_x, 4 * d_x, SpecInit::FanIn);
        let lstm_out_b = add("path.out.b", 1, 4 * d_x, SpecInit::LstmBias(d_x));
        let lstm_in_w = add("path.in.w", 2 * d_x, 4 * d_x, SpecInit::FanIn);
        let lstm_in_b = add("path.in.b", 1, 4 * d_x, SpecInit::LstmBias(d_x));

        let global_wq = add("global.wq", d_x, d_x, SpecInit::FanIn);
        let global_wk = add("global.wk", d_x, d_x, SpecInit::FanIn);
        let global_wv = add("global.wv", d_x, d_x, SpecInit::FanIn);
        let global_wo = add("global.wo", d_x, d_x, SpecInit::FanIn);
        let global_wo_b = add("global.wo_b", 1, d_x, SpecInit::Zeros);

        let fuse_w = add("fuse.w", 2 * d_x, d_x, SpecInit::FanIn);
        let fuse_b = add("fuse.b", 1, d_x, SpecInit::Zeros);

        let final_attn: Vec<AttnIds> = (0..config.final_selfattn_layers)
            .map(|l| attn_block(&format!("final.{l}"), d_x, &mut add))
            .collect();

        let span_start_w = add("span.start.w", d_x, 1, SpecInit::FanIn);
        let span_start_b = add("span.start.b", 1, 1, SpecInit::Zeros);
        let span_end_w = add("span.end.w", d_x, 1, SpecInit::FanIn);
        let span_end_b = add("span.end.b", 1, 1, SpecInit::Zeros);

        let ids = Ids {
            piece_emb,
            position_emb,
            segment_emb,
            upos_emb,
            relation_emb,
            backbone,
            local_wq,
            local_wk,
            local_wv,
            local_wo,
            local_wo_b,
            local_w_rq,
            local_w_rk,
            local_w_rv,
            path_rel_proj,
            lstm_out_w,
            lstm_out_b,
            lstm_in_w,
            lstm_in_b,
            global_wq,
            global_wk,
            global_wv,
            global_wo,
            global_wo_b,
            fuse_w,
            fuse_b,
            final_attn,
            span_start_w,
            span_start_b,
            span_end_w,
            span_end_b,
        };

        Ok(Model {
            config,
            variant,
            piece_vocab,
            piece_index,
            relation_vocab,
            ids,
            specs,
        })
    }

    pub fn piece_id(&self, piece: &str) -> Option<usize> {
        self.piece_index.get(piece).copied()
    }

    /// Creates a freshly initialized state for this architecture.
    pub fn init_state<R: Real>(&self, seed: u64) -> ModelState<R> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = ModelState::new();
        for spec in &self.specs {
            match spec.init {
                SpecInit::Uniform(b) => {
                    state.register(&spec.name, spec.rows, spec.cols, Init::Uniform(b), &mut rng);
                }
                SpecInit::FanIn => {
                    state.register(&spec.name, spec.rows, spec.cols, Init::FanIn, &mut rng);
                }
                SpecInit::Zeros => {
                    state.register(&spec.name, spec.rows, spec.cols, Init::Zeros, &mut rng);
                }
                SpecInit::Ones => {
                    let mut t = Tensor::zeros(spec.rows, spec.cols);
                    t.fill(R::one());
                    state.register_tensor(&spec.name, t);
                }
                SpecInit::LstmBias(d_h) => {
                    let mut t = Tensor::zeros(spec.rows, spec.cols);
                    for j in d_h..2 * d_h {
                        t.set(0, j, R::one());
                    }
                    state.register_tensor(&spec.name, t);
                }
            }
        }
        state
    }

    /// Builds an encoder input from a packed sequence, its graph, and the
    /// (untruncated) soft-path table.
    pub fn prepare_input(
        &self,
        seq: &AlignedSequence,
        graph: &ISDGraph,
        paths: &SoftPathTable,
        gold: Option<(usize, usize)>,
    ) -> Result<EncoderInput> {
        let n = seq.len();
        let mut piece_ids = Vec::with_capacity(n);
        for node in &seq.nodes {
            let id = self.piece_id(&node.piece).ok_or_else(|| {
                Error::Data(format!("out-of-vocabulary piece {:?}", node.piece))
            })?;
            piece_ids.push(id);
        }
        let pos_ids: Vec<usize> = (0..n)
            .map(|i| seq.node_upos(i).map(|u| u.index()).unwrap_or(POS_SPECIAL))
            .collect();
        let segment_ids: Vec<usize> = seq
            .segment
            .iter()
            .map(|s| match s {
                Segment::Question => 0,
                Segment::Context => 1,
            })
            .collect();
        let truncated = crate::graph::truncate_paths(paths, self.config.max_path_len);
        let input = EncoderInput {
            n,
            piece_ids,
            pos_ids,
            segment_ids,
            rel: Rc::new(rel_mat(graph)),
            rel_t: Rc::new(rel_mat_t(graph)),
            edge_mask: Rc::new(edge_mask(graph)),
            out_paths: truncated.out_paths,
            in_paths: truncated.in_paths,
            context_nodes: (0..n).map(|i| seq.is_context_node(i)).collect(),
            gold,
        };
        input.validate(self.piece_vocab.len(), self.relation_vocab.len())?;
        Ok(input)
    }

    fn dropout<R: Real>(&self, tape: &mut Tape<R>, v: Value, mode: &mut Mode) -> Value {
        let p = self.config.dropout;
        match mode {
            Mode::Train { rng } if p > 0.0 => {
                let (r, c) = tape.value(v).shape();
                let keep = R::from_f64(1.0 / (1.0 - p));
                let mask = Tensor::from_fn(r, c, |_, _| {
                    if rng.gen::<f64>() < p {
                        R::zero()
                    } else {
                        keep
                    }
                });
                let m = tape.constant(mask);
                tape.mul(v, m)
            }
            _ => v,
        }
    }

    /// One standard multi-head self-attention layer with residual connection
    /// and layer normalization, scaled by `1/sqrt(d_head)`.
    fn vanilla_layer<R: Real>(
        &self,
        tape: &mut Tape<R>,
        state: &ModelState<R>,
        x: Value,
        ids: &AttnIds,
        heads: usize,
        mode: &mut Mode,
    ) -> Value {
        let d = tape.value(x).cols();
        let d_head = d / heads;
        let scale = R::from_f64(1.0 / (d_head as f64).sqrt());
        let wq = tape.param(ids.wq, state.value(ids.wq));
        let wk = tape.param(ids.wk, state.value(ids.wk));
        let wv = tape.param(ids.wv, state.value(ids.wv));
        let q = tape.matmul(x, wq);
        let k = tape.matmul(x, wk);
        let v = tape.matmul(x, wv);
        let mut head_outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (from, to) = (h * d_head, (h + 1) * d_head);
            let qh = tape.slice_cols(q, from, to);
            let kh = tape.slice_cols(k, from, to);
            let vh = tape.slice_cols(v, from, to);
            let e = tape.matmul_nt(qh, kh);
            let alpha = tape.softmax_rows(e, None, scale);
            let alpha = self.dropout(tape, alpha, mode);
            head_outs.push(tape.matmul(alpha, vh));
        }
        let mut o = head_outs[0];
        for &h in &head_outs[1..] {
            o = tape.concat_cols(o, h);
        }
        let wo = tape.param(ids.wo, state.value(ids.wo));
        let wo_b = tape.param(ids.wo_b, state.value(ids.wo_b));
        let o = tape.affine(o, wo, Some(wo_b)).expect("shapes fixed");
        let o = self.dropout(tape, o, mode);
        let res = tape.add(x, o);
        let ln_g = tape.param(ids.ln_g, state.value(ids.ln_g));
        let ln_b = tape.param(ids.ln_b, state.value(ids.ln_b));
        tape.layer_norm(res, ln_g, ln_b, R::from_f64(LN_EPS))
    }

    /// Embedding sum plus backbone layers, with the POS embedding
    /// concatenated last. Output width is `d_x`.
    pub fn backbone<R: Real>(
        &self,
        tape: &mut Tape<R>,
        state: &ModelState<R>,
        input: &EncoderInput,
        mode: &mut Mode,
    ) -> Result<Value> {
        let n = input.n;
        if n > self.config.max_len {
            return Err(Error::Data(format!(
                "sequence of {n} nodes exceeds configured max length {}",
                self.config.max_len
            )));
        }
        let piece_table = tape.param(self.ids.piece_emb, state.value(self.ids.piece_emb));
        let pos_table = tape.param(self.ids.position_emb, state.value(self.ids.position_emb));
        let seg_table = tape.param(self.ids.segment_emb, state.value(self.ids.segment_emb));
        let pieces = tape.gather_rows(piece_table, Rc::new(input.piece_ids.clone()));
        let positions = tape.gather_rows(pos_table, Rc::new((0..n).collect()));
        let segments = tape.gather_rows(seg_table, Rc::new(input.segment_ids.clone()));
        let mut x = tape.add(pieces, positions);
        x = tape.add(x, segments);
        let backbone_ids = &self.ids.backbone;
        for layer in backbone_ids {
            x = self.vanilla_layer(tape, state, x, layer, self.config.heads_local, mode);
        }
        let upos_table = tape.param(self.ids.upos_emb, state.value(self.ids.upos_emb));
        let pos_emb = tape.gather_rows(upos_table, Rc::new(input.pos_ids.clone()));
        Ok(tape.concat_cols(x, pos_emb))
    }

    /// One-hop relation attention. Per head, the raw score combines the
    /// node-node product with relation-conditioned terms computed through a
    /// separate relation projection, masked per the configured mode; values
    /// receive the relation embedding through a shared projection.
    pub fn local_attention<R: Real>(
        &self,
        tape: &mut Tape<R>,
        state: &ModelState<R>,
        x: Value,
        input: &EncoderInput,
        mode: &mut Mode,
    ) -> Result<(Value, Vec<Value>)> {
        let cfg = &self.config;
        let d_x = cfg.d_x();
        let heads = cfg.heads_local;
        let d_head = d_x / heads;
        let scale = R::from_f64(1.0 / (d_x as f64).sqrt());
        let v_count = self.relation_vocab.len();

        let wq = tape.param(self.ids.local_wq, state.value(self.ids.local_wq));
        let wk = tape.param(self.ids.local_wk, state.value(self.ids.local_wk));
        let wv = tape.param(self.ids.local_wv, state.value(self.ids.local_wv));
        let rel_emb = tape.param(self.ids.relation_emb, state.value(self.ids.relation_emb));
        let w_rq = tape.param(self.ids.local_w_rq, state.value(self.ids.local_w_rq));
        let w_rk = tape.param(self.ids.local_w_rk, state.value(self.ids.local_w_rk));
        let w_rv = tape.param(self.ids.local_w_rv, state.value(self.ids.local_w_rv));

        let q = tape.matmul(x, wq);
        let k = tape.matmul(x, wk);
        let v = tape.matmul(x, wv);
        // Per-relation query/key vectors, shared across heads.
        let qr = tape.matmul(rel_emb, w_rq); // [V, d_head]
        let kr = tape.matmul(rel_emb, w_rk); // [V, d_head]
        let rv = tape.matmul(rel_emb, w_rv); // [V, d_x]
        let prior = tape.matmul_nt(qr, kr); // [V, V] term (d) lookup

        let mask = Some((input.edge_mask.clone(), cfg.mask_mode.mode()));
        let mut alphas = Vec::with_capacity(heads);
        let mut head_outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (from, to) = (h * d_head, (h + 1) * d_head);
            let qh = tape.slice_cols(q, from, to);
            let kh = tape.slice_cols(k, from, to);
            let vh = tape.slice_cols(v, from, to);
            // (a) node-node
            let term_a = tape.matmul_nt(qh, kh);
            // (b) query against the incoming relation r_ji
            let pb = tape.matmul_nt(qh, kr);
            let term_b = tape.gather_pair_row(pb, input.rel_t.clone());
            // (c) outgoing relation r_ij against the key
            let pc = tape.matmul_nt(kh, qr);
            let term_c = tape.gather_pair_col(pc, input.rel.clone());
            // (d) relation-pair prior
            let term_d = tape.gather_pair_mat(prior, input.rel.clone(), input.rel_t.clone());
            let ab = tape.add(term_a, term_b);
            let cd = tape.add(term_c, term_d);
            let e = tape.add(ab, cd);
            let alpha = tape.softmax_rows(e, mask.clone(), scale);
            alphas.push(alpha);
            let alpha_d = self.dropout(tape, alpha, mode);
            let node_val = tape.matmul(alpha_d, vh);
            // relation value: group attention mass by relation type, then
            // project through this head's block of the shared value table
            let agg = tape.aggregate_by_index(alpha_d, input.rel.clone(), v_count);
            let rv_h = tape.slice_cols(rv, from, to);
            let rel_val = tape.matmul(agg, rv_h);
            head_outs.push(tape.add(node_val, rel_val));
        }
        let mut z = head_outs[0];
        for &h in &head_outs[1..] {
            z = tape.concat_cols(z, h);
        }
        let wo = tape.param(self.ids.local_wo, state.value(self.ids.local_wo));
        let wo_b = tape.param(self.ids.local_wo_b, state.value(self.ids.local_wo_b));
        let z = tape.affine(z, wo, Some(wo_b))?;
        Ok((z, alphas))
    }

    /// Encodes every node's outgoing and incoming soft path with two
    /// recurrent cells, stepping all nodes in lockstep. Relation states are
    /// projected from `d_r` to `d_x` so they interleave with node states.
    pub fn encode_paths<R: Real>(
        &self,
        tape: &mut Tape<R>,
        state: &ModelState<R>,
        x: Value,
        input: &EncoderInput,
    ) -> Result<(Value, Value)> {
        let d_x = self.config.d_x();
        let n = input.n;
        let rel_emb = tape.param(self.ids.relation_emb, state.value(self.ids.relation_emb));
        let proj = tape.param(self.ids.path_rel_proj, state.value(self.ids.path_rel_proj));
        let rel_states = tape.matmul(rel_emb, proj); // [V, d_x]

        let mut encode = |paths: &[Vec<PathStep>], w_id: usize, b_id: usize| -> Result<Value> {
            let w = tape.param(w_id, state.value(w_id));
            let b = tape.param(b_id, state.value(b_id));
            let params = LstmParams { w, b };
            let max_steps = paths.iter().map(Vec::len).max().unwrap_or(1);
            let mut h = tape.constant(Tensor::zeros(n, d_x));
            let mut c = tape.constant(Tensor::zeros(n, d_x));
            for t in 0..max_steps {
                let mut srcs = Vec::with_capacity(n);
                let mut keep = Vec::with_capacity(n);
                for path in paths {
                    match path.get(t) {
                        Some(PathStep::Node(k)) => {
                            srcs.push(StepSrc::A(*k));
                            keep.push(true);
                        }
                        Some(PathStep::Rel(r)) => {
                            srcs.push(StepSrc::B(*r as usize));
                            keep.push(true);
                        }
                        None => {
                            srcs.push(StepSrc::Zero);
                            keep.push(false);
                        }
                    }
                }
                let s = tape.gather_rows2(x, rel_states, Rc::new(srcs));
                let (h_new, c_new) = tape.lstm_step(s, h, c, params)?;
                let keep = Rc::new(keep);
                h = tape.lerp_rows(h_new, h, keep.clone());
                c = tape.lerp_rows(c_new, c, keep);
            }
            Ok(h)
        };

        let g_out = encode(&input.out_paths, self.ids.lstm_out_w, self.ids.lstm_out_b)?;
        let g_in = encode(&input.in_paths, self.ids.lstm_in_w, self.ids.lstm_in_b)?;
        Ok((g_out, g_in))
    }

    /// Soft-path attention: outgoing encodings as queries, incoming as keys,
    /// and the value mixes both endpoints of the approximated path.
    pub fn global_attention<R: Real>(
        &self,
        tape: &mut Tape<R>,
        state: &ModelState<R>,
        g_out: Value,
        g_in: Value,
        mode: &mut Mode,
    ) -> Result<(Value, Vec<Value>)> {
        let cfg = &self.config;
        let d_x = cfg.d_x();
        let heads = cfg.heads_global;
        let d_head = d_x / heads;
        let scale = R::from_f64(1.0 / (d_x as f64).sqrt());
        let n = tape.value(g_out).rows();

        let wq = tape.param(self.ids.global_wq, state.value(self.ids.global_wq));
        let wk = tape.param(self.ids.global_wk, state.value(self.ids.global_wk));
        let wv = tape.param(self.ids.global_wv, state.value(self.ids.global_wv));
        let q = tape.matmul(g_out, wq);
        let k = tape.matmul(g_in, wk);
        let v_out = tape.matmul(g_out, wv);
        let v_in = tape.matmul(g_in, wv);
        let ones = tape.constant(Tensor::from_fn(n, 1, |_, _| R::one()));

        let mut alphas = Vec::with_capacity(heads);
        let mut head_outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (from, to) = (h * d_head, (h + 1) * d_head);
            let qh = tape.slice_cols(q, from, to);
            let kh = tape.slice_cols(k, from, to);
            let e = tape.matmul_nt(qh, kh);
            let alpha = tape.softmax_rows(e, None, scale);
            alphas.push(alpha);
            let alpha_d = self.dropout(tape, alpha, mode);
            // z_i = Σ_j α_ij (g→_i + g←_j) W_V, factored into the row-sum
            // scaled query side plus the attended key side
            let row_sum = tape.matmul(alpha_d, ones);
            let vo_h = tape.slice_cols(v_out, from, to);
            let vi_h = tape.slice_cols(v_in, from, to);
            let own = tape.mul_row_scale(vo_h, row_sum);
            let attended = tape.matmul(alpha_d, vi_h);
            head_outs.push(tape.add(own, attended));
        }
        let mut z = head_outs[0];
        for &h in &head_outs[1..] {
            z = tape.concat_cols(z, h);
        }
        let wo = tape.param(self.ids.global_wo, state.value(self.ids.global_wo));
        let wo_b = tape.param(self.ids.global_wo_b, state.value(self.ids.global_wo_b));
        let z = tape.affine(z, wo, Some(wo_b))?;
        Ok((z, alphas))
    }

    /// The full graph-encoding layer: local attention concatenated with the
    /// global component (zeros in the local-only variant), fused back to
    /// `d_x`, then the optional stacked self-attention layers.
    pub fn isdg_layer<R: Real>(
        &self,
        tape: &mut Tape<R>,
        state: &ModelState<R>,
        x: Value,
        input: &EncoderInput,
        mode: &mut Mode,
    ) -> Result<(Value, Vec<Value>, Vec<Value>)> {
        let d_x = self.config.d_x();
        let (z_l, alpha_l) = self.local_attention(tape, state, x, input, mode)?;
        let z_l = self.dropout(tape, z_l, mode);
        let (z_g, alpha_g) = match self.variant {
            Variant::Full => {
                let (g_out, g_in) = self.encode_paths(tape, state, x, input)?;
                let (z_g, alpha_g) = self.global_attention(tape, state, g_out, g_in, mode)?;
                (self.dropout(tape, z_g, mode), alpha_g)
            }
            _ => (tape.constant(Tensor::zeros(input.n, d_x)), Vec::new()),
        };
        let cat = tape.concat_cols(z_l, z_g);
        let fuse_w = tape.param(self.ids.fuse_w, state.value(self.ids.fuse_w));
        let fuse_b = tape.param(self.ids.fuse_b, state.value(self.ids.fuse_b));
        let mut z = tape.affine(cat, fuse_w, Some(fuse_b))?;
        let final_ids = &self.ids.final_attn;
        for layer in final_ids {
            z = self.vanilla_layer(tape, state, z, layer, self.config.heads_local, mode);
        }
        Ok((z, alpha_l, alpha_g))
    }

    /// Start/end position likelihoods over the whole sequence, and the
    /// negative log-likelihood of the gold positions when given.
    pub fn span_head<R: Real>(
        &self,
        tape: &mut Tape<R>,
        state: &ModelState<R>,
        z: Value,
        gold: Option<(usize, usize)>,
    ) -> Result<(Value, Value, Option<Value>)> {
        let n = tape.value(z).rows();
        if let Some((s, e)) = gold {
            if s >= n || e >= n {
                return Err(Error::Data(format!("gold span {s}..{e} out of range")));
            }
        }
        let ws = tape.param(self.ids.span_start_w, state.value(self.ids.span_start_w));
        let bs = tape.param(self.ids.span_start_b, state.value(self.ids.span_start_b));
        let we = tape.param(self.ids.span_end_w, state.value(self.ids.span_end_w));
        let be = tape.param(self.ids.span_end_b, state.value(self.ids.span_end_b));
        let s_logits = tape.affine(z, ws, Some(bs))?;
        let e_logits = tape.affine(z, we, Some(be))?;
        let s_row = tape.transpose(s_logits);
        let e_row = tape.transpose(e_logits);
        let p_start = tape.softmax_rows(s_row, None, R::one());
        let p_end = tape.softmax_rows(e_row, None, R::one());
        let loss = match gold {
            Some((is, ie)) => {
                let lp_s = tape.log_pick(p_start, 0, is);
                let lp_e = tape.log_pick(p_end, 0, ie);
                let sum = tape.add(lp_s, lp_e);
                Some(tape.scale(sum, -R::one()))
            }
            None => None,
        };
        Ok((p_start, p_end, loss))
    }

    /// Runs the configured variant end to end over one example.
    pub fn forward<R: Real>(
        &self,
        state: &ModelState<R>,
        input: &EncoderInput,
        mut mode: Mode,
    ) -> Result<ForwardPass<R>> {
        input.validate(self.piece_vocab.len(), self.relation_vocab.len())?;
        let mut tape = Tape::new();
        let hidden = self.backbone(&mut tape, state, input, &mut mode)?;
        let (encoded, alpha_local, alpha_global) = match self.variant {
            Variant::PosOnly => (hidden, Vec::new(), Vec::new()),
            _ => self.isdg_layer(&mut tape, state, hidden, input, &mut mode)?,
        };
        let (p_start, p_end, loss) = self.span_head(&mut tape, state, encoded, input.gold)?;
        Ok(ForwardPass {
            tape,
            hidden,
            encoded,
            p_start,
            p_end,
            loss,
            alpha_local,
            alpha_global,
        })
    }
}

fn rel_mat(graph: &ISDGraph) -> IdxMat {
    IdxMat::from_vec(graph.n, graph.n, graph.rel_matrix().to_vec())
}

fn rel_mat_t(graph: &ISDGraph) -> IdxMat {
    let n = graph.n;
    let mut data = vec![0u8; n * n];
    for i in 0..n {
        for j in 0..n {
            data[i * n + j] = graph.rel_id(j, i);
        }
    }
    IdxMat::from_vec(n, n, data)
}

fn edge_mask(graph: &ISDGraph) -> Vec<bool> {
    graph.rel_matrix().iter().map(|&r| r != 0).collect()
}

/// Exhaustive span decode: the highest sum of start and end likelihood over
/// in-context pairs `s ≤ e` within the answer length cap. Ties resolve to
/// the earliest pair.
pub fn decode_span<R: Real>(
    p_start: &[R],
    p_end: &[R],
    context: &[bool],
    max_answer_len: usize,
) -> Option<(usize, usize)> {
    let n = p_start.len();
    let mut best: Option<(usize, usize, R)> = None;
    for s in 0..n {
        if !context[s] {
            continue;
        }
        for e in s..n.min(s + max_answer_len) {
            if !context[e] {
                continue;
            }
            let score = p_start[s] + p_end[e];
            match best {
                Some((_, _, b)) if score <= b => {}
                _ => best = Some((s, e, score)),
            }
        }
    }
    best.map(|(s, e, _)| (s, e))
}

/// Index of the row maximum, ties broken toward the smallest column.
pub fn argmax_row<R: Real>(row: &[R]) -> usize {
    let mut arg = 0usize;
    let mut best = row[0];
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > best {
            best = v;
            arg = j;
        }
    }
    arg
}

/// Positional attention distance `D_i = |i − argmax_j α_ij|` per head and
/// node, with ties broken toward the smallest column, plus the average over
/// heads and nodes.
pub fn attention_distance<R: Real>(alpha: &[Tensor<R>]) -> (Vec<Vec<usize>>, f64) {
    let mut rows = Vec::with_capacity(alpha.len());
    let mut total = 0.0f64;
    let mut count = 0usize;
    for head in alpha {
        let mut dists = Vec::with_capacity(head.rows());
        for i in 0..head.rows() {
            let d = i.abs_diff(argmax_row(head.row(i)));
            dists.push(d);
            total += d as f64;
            count += 1;
        }
        rows.push(dists);
    }
    let avg = if count == 0 { 0.0 } else { total / count as f64 };
    (rows, avg)
}

/// Embedding row for a POS tag, with specials mapped past the 17 tags.
pub fn upos_row(upos: Option<Upos>) -> usize {
    upos.map(|u| u.index()).unwrap_or(POS_SPECIAL)
}
