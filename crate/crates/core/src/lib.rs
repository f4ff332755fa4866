//! Salient object detection with switchable prompt generation.
//!
//! A baseline encoder, per-level transformer and decoder are pre-trained on
//! RGB data, then frozen. Small per-level prompt blocks learn to feed depth
//! or thermal information into the frozen model. For plain RGB tasks the
//! auxiliary input is the RGB image itself, which turns the same blocks into
//! single-modal refiners.

pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod partition;
pub mod spg;
pub mod synthetic;
pub mod trainer;
pub mod transformer;

pub use config::{Modality, Profile, Settings, Task, TrainConfig, TrainMode};
pub use error::{Error, Result};
pub use model::{PromptPath, UniSod};
