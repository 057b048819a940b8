//! Trial datasets: synthetic generation and the EEGX file format.

mod dataset;
mod format;
mod gen;

pub use dataset::TrialDataset;
pub use format::{
    dataset_from_bytes, dataset_to_bytes, read_dataset, write_dataset, DATASET_MAGIC,
    DATASET_VERSION,
};
pub use gen::{band_power, generate, ClassSignature, DriftSpec, GenSpec, NoiseSpec};
