//! Synthetic paired-modality data, evaluation metrics and file formats.

pub mod diagnostics;
pub mod manifest;
pub mod metrics;
pub mod pgm;
pub mod synth;

pub use diagnostics::{read_diagnostics_csv, write_diagnostics_csv, MetricsRecord, DIAGNOSTICS_HEADER};
pub use manifest::{read_manifest, write_dataset};
pub use metrics::{mae, max_f_measure};
pub use pgm::{read_pgm, write_pgm};
pub use synth::{generate_dataset, generate_sample, SynthConfig};
