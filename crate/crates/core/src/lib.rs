//! Cross-modal person text-image matching over structured feature graphs,
//! with a learned external attack node and adversarial training.
//!
//! The crate is organised bottom-up:
//!
//! - [`numcore`]: tensors, a reverse-mode tape and Adam.
//! - [`graph`]: per-sample graphs, attack-node implantation, graph convolution.
//! - [`encoders`]: toy image/text encoders and the feature-transform bank.
//! - [`losses`]: the cross-modal projection matching (CMPM) loss family.
//! - [`data`]: synthetic cross-modal datasets and batch sampling.
//! - [`pipeline`]: the three training stages and checkpoints.
//! - [`eval`]: retrieval embeddings, CMC reports and the ablation table.
//! - [`config`]: the flat `key=value` run configuration.

pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod graph;
pub mod losses;
pub mod numcore;
pub mod pipeline;

pub use config::RunConfig;
pub use error::{Error, ErrorCategory, Result};
pub use numcore::{Tape, Tensor, Var};

/// Image or text side of a sample, graph or attack node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    pub fn code(self) -> u8 {
        match self {
            Modality::Image => 0,
            Modality::Text => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Modality::Image),
            1 => Some(Modality::Text),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
        }
    }
}
