//! File formats and run configuration.
//!
//! Binary files share one layout: a four-byte magic line (`SDV1` datasets,
//! `SDF1` fODFs, `SDP1` peaks, `SDC1` checkpoints), text header lines, an
//! `end` line, zero padding to a 32-byte boundary and a little-endian `f64`
//! payload. Floats in headers are written in shortest round-trip decimal,
//! so every format reads back bit-exactly.

mod checkpoint;
mod config;
mod container;
mod dataset;
mod fodf;
mod fsl;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use config::{read_log, write_log, EvaluateConfig, RunConfig};
pub use container::ALIGN;
pub use dataset::{decode_dataset, encode_dataset, read_dataset, write_dataset, DatasetFile, DATASET_MAGIC};
pub use fodf::{
    decode_fodf, decode_peaks, encode_fodf, encode_peaks, read_fodf, read_peaks, write_fodf, write_peaks, PeaksFile,
    FODF_MAGIC, PEAKS_MAGIC,
};
pub use fsl::{format_fsl, parse_fsl, read_fsl, write_fsl, FslTable};
