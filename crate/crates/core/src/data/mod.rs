//! File formats and datasets: images, triplet datasets, augmentation,
//! checkpoints, synthetic fixtures and flow visualization.

pub mod augment;
pub mod checkpoint;
pub mod dataset;
pub mod flowviz;
pub mod image;
pub mod synthetic;

pub use augment::{augment, AugmentPlan};
pub use checkpoint::{load_checkpoint, load_checkpoint_with, save_checkpoint, Checkpoint};
pub use dataset::{load_triplet, scan_dataset, Triplet, TripletRef};
pub use image::{load_image, save_image};
