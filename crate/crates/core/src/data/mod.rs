//! Datasets, folds, augmentation and the synthetic benchmark.

pub mod augment;
pub mod dataset;
pub mod face;
pub mod folds;
pub mod synth;

pub use augment::{augment, oracle_in_crop, Augmented, Mode};
pub use dataset::{load_dataset, Dataset, Sample};
pub use folds::{make_folds, validation_split, FoldSplit};
pub use synth::{generate_synthetic, render_frame, SynthConfig};
