//! Dataset records and shards.
//!
//! A shard directory holds:
//!
//! - `manifest.jsonl`: one [`DatasetRecord`] per line, sorted by id, keys in
//!   the order of [`RECORD_KEYS`]
//! - `images/<id>.png`: one image per record
//! - `train.jsonl`: formatted training rows (see [`crate::instruction`])
//! - `stats.json`, `shard.json` and, for generated shards, `report.json`
//! - `failures/`: workspaces of failed jobs, if any

pub(crate) mod shard;
mod validate;

use serde::{Deserialize, Serialize};

use crate::instruction::InstructionTriplet;
use crate::llm::Stage;
use crate::pipeline::Category;
use crate::pointing::PointAnnotation;
use crate::render::Tool;

pub use shard::{
    dedup, dedup_by_code, read_manifest, stats, write_shard, DatasetShard, ShardError, ShardStats,
    StagedRecord, WriteOptions, FORMAT_VERSION, MANIFEST_FILE,
};
pub use validate::{validate_shard, Violation, ViolationKind};

/// Top-level manifest keys in serialization order.
pub const RECORD_KEYS: [&str; 14] = [
    "id",
    "category",
    "pipeline_id",
    "tool",
    "persona",
    "topic",
    "query",
    "code",
    "image",
    "width",
    "height",
    "qa",
    "points",
    "provenance",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    /// 16 hex digits of SHA-256 over (query seed, job index, pipeline id).
    pub id: String,
    pub category: Category,
    pub pipeline_id: String,
    pub tool: Tool,
    pub persona: String,
    pub topic: String,
    pub query: String,
    pub code: String,
    /// Path relative to the shard root, always `images/<id>.png`.
    pub image: String,
    pub width: u32,
    pub height: u32,
    pub qa: Vec<InstructionTriplet>,
    pub points: Vec<PointAnnotation>,
    pub provenance: Provenance,
}

impl DatasetRecord {
    pub fn code_digest(&self) -> String {
        crate::seed::sha256_hex(self.code.as_bytes())
    }

    /// Concatenated question/answer text used for text embeddings.
    pub fn qa_text(&self) -> String {
        let mut parts: Vec<String> = self
            .qa
            .iter()
            .map(|t| format!("{} {}", t.question, t.answer))
            .collect();
        parts.extend(self.points.iter().map(|p| p.question.clone()));
        parts.join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub job_index: u64,
    pub job_seed: u64,
    pub code_model: String,
    pub instruction_model: Option<String>,
    /// Record of another shard this one was derived from (pointing shards).
    pub source_record: Option<String>,
    pub stages: Vec<StageProvenance>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageProvenance {
    pub stage: Stage,
    pub provider: String,
    pub model: String,
    pub template_id: String,
    /// 16 hex digits of SHA-256 over the rendered prompt.
    pub prompt_hash: String,
    pub attempts: u32,
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn serialized_key_order_is_fixed() {
        let dir = tempfile::tempdir().unwrap();
        let r = testutil::record(dir.path(), "00aa", Category::Charts, "code", 1).record;
        let line = serde_json::to_string(&r).unwrap();
        let mut last = 0;
        for key in RECORD_KEYS {
            let pos = line.find(&format!("\"{key}\":")).unwrap();
            assert!(pos >= last, "{key} out of order");
            last = pos;
        }
    }
}
