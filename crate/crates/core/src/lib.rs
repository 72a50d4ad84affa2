//! Learn chain-shaped Horn rules from a knowledge graph with a recurrent
//! attention model, then use them for link prediction and path-query
//! relation classification.

pub mod cli;
pub mod error;
pub mod kg;
pub mod miner;
pub mod model;
pub mod parallel;
pub mod reasoner;
pub mod sampler;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use kg::{EntityId, Kg, RelationId, Triple, Vocab};
pub use miner::{MinerConfig, Rule};
pub use model::{ModelConfig, ModelParams, ReductionTrace, Selection};
pub use sampler::{PathSample, SamplerConfig};
pub use trainer::TrainConfig;
