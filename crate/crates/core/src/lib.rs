//! Layout-to-image synthesis and weakly supervised segmentation trained
//! jointly through two consensus chains.

pub mod batch;
pub mod dataset;
pub mod discriminator;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod generator;
pub mod inference;
pub mod isla;
pub mod layout;
pub mod mask;
pub mod nn;
pub mod objective;
pub mod shapes;
pub mod trainer;

pub use error::{DclError, Result};
pub use layout::{CategorySet, HardLabelMap, Image, LabeledBox, Lattice, Layout, SoftLabelMap};
