//! Image I/O, synthetic pairs and run configuration.

pub mod config;
pub mod ppm;
pub mod synthetic;

pub use config::{Profile, RunConfig};
pub use ppm::{read_image, write_image};
pub use synthetic::{gen_synthetic, load_pairs, ImagePair, Pattern, SyntheticDatasetSpec};
