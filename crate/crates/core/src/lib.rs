//! Code-guided synthetic dataset generation for text-rich images.
//!
//! A text query (for example "book covers") is turned into a dataset shard by
//! driving an LLM through four stages per example: topic, data, code and
//! instruction generation. The generated code is executed by a per-tool
//! sandboxed renderer, and the rendered image is packaged together with
//! question/explanation/answer triplets (or pointing annotations) and full
//! provenance.
//!
//! Module map:
//!
//! - [`pipeline`]: registry, pipeline selection, job and batch orchestration
//! - [`persona`]: persona corpus loading and seeded sampling
//! - [`llm`]: prompt templates, response cache, provider gateway, output parsers
//! - [`render`]: code artifacts, sandboxed tool adapters, image validation
//! - [`instruction`]: instruction generation and training-example formatting
//! - [`pointing`]: marker-based pointing annotation synthesis
//! - [`diversity`]: mean pairwise cosine distance and diversity reports
//! - [`dataset`]: records, shard writing, dedup, stats and validation
//! - [`cli`]: the `codesynth` command line

pub mod assets;
pub mod cli;
pub mod dataset;
pub mod diversity;
pub mod error;
pub mod instruction;
pub mod llm;
pub mod persona;
pub mod pipeline;
pub mod pointing;
pub mod render;
pub mod seed;
mod sync;

pub use dataset::{DatasetRecord, DatasetShard};
pub use instruction::InstructionTriplet;
pub use llm::{Gateway, LlmRequest, LlmResponse, Stage};
pub use persona::{Persona, PersonaStore};
pub use pipeline::{Category, GenerationQuery, PipelineRegistry, PipelineSpec};
pub use render::{CodeArtifact, RenderedImage, Tool};
