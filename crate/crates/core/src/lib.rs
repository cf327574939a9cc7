//! Privacy-preserving task-oriented semantic communication.
//!
//! A deep joint source-channel encoder maps images to power-normalized
//! feature blocks that cross a simulated AWGN channel to a task head. Four
//! privacy mechanisms can be placed on that path (Laplace noise, keyed
//! feature shuffling, adversarial information-bottleneck training and
//! learned vector quantization with QAM), and a black-box model-inversion
//! attacker measures what an eavesdropper can reconstruct.

pub mod adversary;
pub mod channel;
pub mod codec;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod privacy;
pub mod rng;
pub mod system;

pub use error::{Error, Result};
