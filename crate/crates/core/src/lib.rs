pub mod cross_modal;
pub mod datagen;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod graph;
pub mod heads;
pub mod layers;
pub mod numkit;
pub mod pipeline;

pub use error::{Error, FormatError, Result};
