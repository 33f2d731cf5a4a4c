//! Dataset ingestion and the seeded synthetic scene generator.

mod classes;
mod dataset;
mod image;
mod labels;
mod synth;

use std::path::PathBuf;

pub use classes::{ClassSpec, ClassTable, DEFAULT_CONF_THRESHOLD, PROPERTY_RISK_CLASSES};
pub use dataset::{load_dataset, load_dir, write_dataset, Dataset, Sample};
pub use image::{read_pgm, write_pgm, write_ppm_bytes, GrayImage, Image};
pub use labels::{format_label_line, parse_label_line, GroundTruthBox};
pub use synth::{generate_synthetic, SplitMix64, SynthConfig, ZipfSampler};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("invalid label line: {0}")]
    Label(String),
    #[error("class config: {0}")]
    ClassConfig(String),
    #[error("{file}:{line}: class id {class_id} not in a table of {classes} classes")]
    UnknownClass {
        file: PathBuf,
        line: usize,
        class_id: usize,
        classes: usize,
    },
    #[error("invalid synthetic config: {0}")]
    Config(String),
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Self::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
