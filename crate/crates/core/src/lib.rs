pub mod error;
pub mod nn;
pub mod numerics;
pub mod scene;
pub mod textio;

pub use error::{Error, Result};
pub mod backbone;
pub mod decoder;
pub mod harness;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod prompts;
pub mod tasks;
