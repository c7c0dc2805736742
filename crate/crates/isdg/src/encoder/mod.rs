//! The ISDG encoder: backbone, local and global graph attention, span head,
//! and attention-distance analysis.

mod config;
mod model;
#[cfg(test)]
mod tests;

pub use config::{EncoderConfig, MaskModeConfig, Variant};
pub use model::{
    argmax_row, attention_distance, decode_span, upos_row, EncoderInput, ForwardPass, Mode, Model,
    ModelOutput, POS_SPECIAL, POS_VOCAB,
};
