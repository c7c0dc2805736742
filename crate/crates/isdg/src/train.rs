//! Training, evaluation, and attention-analysis drivers, plus the flat
//! key-value experiment config and the checkpoint format.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{require_same_vocabs, Dataset, Record};
use crate::encoder::{
    decode_span, EncoderConfig, EncoderInput, MaskModeConfig, Mode, Model, Variant,
};
use crate::error::{Error, Result};
use crate::graph::RelationVocab;
use crate::metrics::{squad_f1_em, EvalReport, ExampleResult};
use crate::nn::{Adam, ModelState, Real};

/// Full experiment configuration: encoder hyperparameters plus the training
/// loop knobs. Serialized as a flat `key = value` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop once train exact match reaches this value (0 disables).
    pub early_stop_train_em: f64,
    /// Epoch interval between early-stop checks.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            encoder: EncoderConfig::default(),
            lr: 1e-3,
            batch_size: 8,
            epochs: 50,
            early_stop_train_em: 0.0,
            eval_every: 5,
        }
    }
}

impl TrainConfig {
    /// All fields as ordered key/value pairs — the canonical rendering.
    pub fn entries(&self) -> BTreeMap<String, String> {
        let e = &self.encoder;
        let mut m = BTreeMap::new();
        m.insert("d_backbone".into(), e.d_backbone.to_string());
        m.insert("d_pos".into(), e.d_pos.to_string());
        m.insert("d_r".into(), e.d_r.to_string());
        m.insert("heads_local".into(), e.heads_local.to_string());
        m.insert("heads_global".into(), e.heads_global.to_string());
        m.insert("max_path_len".into(), e.max_path_len.to_string());
        m.insert("mask_mode".into(), e.mask_mode.as_str().into());
        m.insert("backbone_layers".into(), e.backbone_layers.to_string());
        m.insert(
            "final_selfattn_layers".into(),
            e.final_selfattn_layers.to_string(),
        );
        m.insert("max_len".into(), e.max_len.to_string());
        m.insert("max_answer_len".into(), e.max_answer_len.to_string());
        m.insert("dropout".into(), e.dropout.to_string());
        m.insert("lr".into(), self.lr.to_string());
        m.insert("batch_size".into(), self.batch_size.to_string());
        m.insert("epochs".into(), self.epochs.to_string());
        m.insert(
            "early_stop_train_em".into(),
            self.early_stop_train_em.to_string(),
        );
        m.insert("eval_every".into(), self.eval_every.to_string());
        m
    }

    pub fn render(&self) -> String {
        self.entries()
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Hex digest of the canonical rendering; stored in checkpoints and
    /// training logs so runs are attributable to exact settings.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.render().as_bytes());
        hex_string(&hasher.finalize())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
        }
        let e = &mut self.encoder;
        match key {
            "d_backbone" => e.d_backbone = parse(key, value)?,
            "d_pos" => e.d_pos = parse(key, value)?,
            "d_r" => e.d_r = parse(key, value)?,
            "heads_local" => e.heads_local = parse(key, value)?,
            "heads_global" => e.heads_global = parse(key, value)?,
            "max_path_len" => e.max_path_len = parse(key, value)?,
            "mask_mode" => e.mask_mode = MaskModeConfig::parse(value)?,
            "backbone_layers" => e.backbone_layers = parse(key, value)?,
            "final_selfattn_layers" => e.final_selfattn_layers = parse(key, value)?,
            "max_len" => e.max_len = parse(key, value)?,
            "max_answer_len" => e.max_answer_len = parse(key, value)?,
            "dropout" => e.dropout = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "early_stop_train_em" => self.early_stop_train_em = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            other => {
                return Err(Error::Config(format!("unknown config key {other:?}")))
            }
        }
        Ok(())
    }

    /// Parses a flat config file on top of the defaults. Lines are
    /// `key = value`; `#` starts a comment.
    pub fn parse(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.encoder.validate()?;
        Ok(cfg)
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// One serialized parameter group.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointParam {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

/// Versioned checkpoint: configuration, vocabularies, and all parameter
/// groups.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub variant: String,
    pub seed: u64,
    pub config: TrainConfig,
    pub config_fingerprint: String,
    pub relation_vocab: Vec<String>,
    pub piece_vocab: Vec<String>,
    pub params: Vec<CheckpointParam>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    state: &ModelState<f32>,
    config: &TrainConfig,
    seed: u64,
) -> Result<()> {
    let params = state
        .params()
        .iter()
        .map(|p| CheckpointParam {
            name: p.name.clone(),
            rows: p.value.rows(),
            cols: p.value.cols(),
            data: p.value.data().to_vec(),
        })
        .collect();
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        variant: model.variant.as_str().to_string(),
        seed,
        config: config.clone(),
        config_fingerprint: config.fingerprint(),
        relation_vocab: model.relation_vocab.names().to_vec(),
        piece_vocab: model.piece_vocab.clone(),
        params,
    };
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(file, &ckpt)?;
    Ok(())
}

/// Restores the architecture and state from a checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<(Model, ModelState<f32>, TrainConfig, u64)> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let ckpt: Checkpoint = serde_json::from_reader(file)?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint version {}",
            ckpt.version
        )));
    }
    let variant = Variant::parse(&ckpt.variant)?;
    let relation_vocab = RelationVocab::from_names(ckpt.relation_vocab.clone())?;
    let model = Model::new(
        ckpt.config.encoder.clone(),
        variant,
        ckpt.piece_vocab.clone(),
        relation_vocab,
    )?;
    let mut state: ModelState<f32> = model.init_state(0);
    if state.len() != ckpt.params.len() {
        return Err(Error::Data(format!(
            "checkpoint has {} parameter groups, model expects {}",
            ckpt.params.len(),
            state.len()
        )));
    }
    for p in &ckpt.params {
        let id = state.id(&p.name).ok_or_else(|| {
            Error::Data(format!("checkpoint parameter {:?} is unknown", p.name))
        })?;
        let target = state.value_mut(id);
        if target.shape() != (p.rows, p.cols) || p.data.len() != p.rows * p.cols {
            return Err(Error::Data(format!(
                "checkpoint parameter {:?} has shape {}x{}, expected {:?}",
                p.name, p.rows, p.cols, target.shape()
            )));
        }
        target.data_mut().copy_from_slice(&p.data);
    }
    Ok((model, state, ckpt.config.clone(), ckpt.seed))
}

/// One training-log record, written as JSON lines.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Outcome summary of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub steps: u64,
    pub epochs_run: usize,
    pub final_loss: f64,
    pub train_em: Option<f64>,
    pub stopped_early: bool,
}

/// Builds the model architecture for a dataset, checking vocabularies.
pub fn model_for_dataset(
    config: &EncoderConfig,
    variant: Variant,
    dataset: &Dataset,
) -> Result<Model> {
    Model::new(
        config.clone(),
        variant,
        dataset.piece_vocab.clone(),
        dataset.relation_vocab.clone(),
    )
}

fn check_model_dataset(model: &Model, dataset: &Dataset) -> Result<()> {
    require_same_vocabs(
        "checkpoint vs data",
        model.relation_vocab.names(),
        dataset.relation_vocab.names(),
        &model.piece_vocab,
        &dataset.piece_vocab,
    )
}

/// Trains a fresh state on the dataset. Deterministic for a fixed seed.
pub fn train(
    model: &Model,
    dataset: &Dataset,
    config: &TrainConfig,
    seed: u64,
    mut log: Option<&mut dyn Write>,
) -> Result<(ModelState<f32>, TrainOutcome)> {
    check_model_dataset(model, dataset)?;
    let mut inputs: Vec<EncoderInput> = Vec::with_capacity(dataset.records.len());
    for r in &dataset.records {
        let input = r.to_input(model)?;
        if input.gold.is_none() {
            return Err(Error::Data(format!(
                "record {} has no gold span; cannot train on it",
                r.id
            )));
        }
        inputs.push(input);
    }
    if inputs.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }

    let mut state: ModelState<f32> = model.init_state(seed);
    let mut adam = Adam::new(config.lr);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x51_7c_c1_b7));

    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut steps = 0u64;
    let mut final_loss = f64::NAN;
    let mut train_em = None;
    let mut stopped_early = false;
    let mut epochs_run = 0usize;

    'epochs: for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(config.batch_size.max(1)) {
            state.zero_grads();
            let mut batch_loss = 0.0f64;
            for &idx in chunk {
                let pass = model.forward(
                    &state,
                    &inputs[idx],
                    Mode::Train {
                        rng: &mut dropout_rng,
                    },
                )?;
                let loss = pass.loss.expect("gold spans enforced above");
                batch_loss += pass.tape.value(loss).scalar().as_f64();
                let grads = pass.tape.backward(loss)?;
                pass.tape.accumulate_param_grads(&grads, &mut state);
            }
            let k = chunk.len() as f64;
            state.scale_grads(1.0f32 / k as f32);
            let grad_norm = adam.step(&mut state);
            steps += 1;
            final_loss = batch_loss / k;
            if let Some(log) = log.as_deref_mut() {
                let record = LogRecord {
                    step: steps,
                    loss: final_loss,
                    lr: config.lr,
                    grad_norm,
                };
                serde_json::to_writer(&mut *log, &record)?;
                log.write_all(b"\n")?;
            }
            if !final_loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss diverged at step {steps}"
                )));
            }
        }
        epochs_run = epoch + 1;
        if config.early_stop_train_em > 0.0
            && config.eval_every > 0
            && (epoch + 1) % config.eval_every == 0
        {
            let em = exact_match(model, &state, dataset, &inputs)?;
            train_em = Some(em);
            if em >= config.early_stop_train_em {
                stopped_early = true;
                break 'epochs;
            }
        }
    }

    Ok((
        state,
        TrainOutcome {
            steps,
            epochs_run,
            final_loss,
            train_em,
            stopped_early,
        },
    ))
}

/// Greedy span prediction for one record.
pub fn predict<R: Real>(
    model: &Model,
    state: &ModelState<R>,
    record: &Record,
    input: &EncoderInput,
) -> Result<String> {
    let pass = model.forward(state, input, Mode::Eval)?;
    let out = pass.output();
    match decode_span(
        &out.p_start,
        &out.p_end,
        &input.context_nodes,
        model.config.max_answer_len,
    ) {
        Some((s, e)) => Ok(record.recover_text(s, e)?.0),
        None => Ok(String::new()),
    }
}

fn exact_match(
    model: &Model,
    state: &ModelState<f32>,
    dataset: &Dataset,
    inputs: &[EncoderInput],
) -> Result<f64> {
    let mut total = 0.0;
    for (record, input) in dataset.records.iter().zip(inputs) {
        let prediction = predict(model, state, record, input)?;
        let (_f1, em) = squad_f1_em(&prediction, &record.gold_answers);
        total += em;
    }
    Ok(total / dataset.records.len().max(1) as f64)
}

/// Evaluates a trained state over a dataset.
pub fn evaluate(model: &Model, state: &ModelState<f32>, dataset: &Dataset) -> Result<EvalReport> {
    check_model_dataset(model, dataset)?;
    let mut results = Vec::with_capacity(dataset.records.len());
    for record in &dataset.records {
        let input = record.to_input(model)?;
        let prediction = predict(model, state, record, &input)?;
        let (f1, em) = squad_f1_em(&prediction, &record.gold_answers);
        results.push(ExampleResult {
            id: record.id.clone(),
            prediction,
            gold_answers: record.gold_answers.clone(),
            f1,
            em,
        });
    }
    Ok(EvalReport::from_results(results))
}

/// One exported attention-distance row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalyzeRow {
    pub example_id: String,
    pub head: usize,
    pub node_index: usize,
    pub argmax_index: usize,
    pub distance: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalyzeSummary {
    pub examples: usize,
    pub rows: usize,
    pub avg_distance: f64,
}

/// Records global-attention argmax distances for every node and head.
pub fn analyze(
    model: &Model,
    state: &ModelState<f32>,
    dataset: &Dataset,
) -> Result<(Vec<AnalyzeRow>, AnalyzeSummary)> {
    if model.variant != Variant::Full {
        return Err(Error::Config(
            "attention analysis requires a checkpoint of the full variant".into(),
        ));
    }
    check_model_dataset(model, dataset)?;
    let mut rows = Vec::new();
    for record in &dataset.records {
        let input = record.to_input(model)?;
        let pass = model.forward(state, &input, Mode::Eval)?;
        let out = pass.output();
        for (head, alpha) in out.alpha_global.iter().enumerate() {
            for i in 0..alpha.rows() {
                let argmax = crate::encoder::argmax_row(alpha.row(i));
                rows.push(AnalyzeRow {
                    example_id: record.id.clone(),
                    head,
                    node_index: i,
                    argmax_index: argmax,
                    distance: i.abs_diff(argmax),
                });
            }
        }
    }
    let total: usize = rows.iter().map(|r| r.distance).sum();
    let summary = AnalyzeSummary {
        examples: dataset.records.len(),
        rows: rows.len(),
        avg_distance: total as f64 / rows.len().max(1) as f64,
    };
    Ok((rows, summary))
}

pub fn write_analyze_csv(path: &Path, rows: &[AnalyzeRow]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "example_id,head,node_index,argmax_index,distance")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.example_id, r.head, r.node_index, r.argmax_index, r.distance
        )?;
    }
    out.flush()?;
    Ok(())
}
