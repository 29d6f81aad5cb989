//! Generator and extractor networks and their composition.

mod extractor;
mod generator;
mod pipeline;

pub use extractor::{ExtractorConfig, ExtractorNet, ExtractorStage};
pub use generator::{BlockProbe, GeneratorConfig, GeneratorNet, ResidualBlock, IMAGE_CHANNELS};
pub use pipeline::{
    pipeline_backward, GradSnapshot, Pipeline, TripletGrads, TripletRows, INFER_CHUNK,
};
