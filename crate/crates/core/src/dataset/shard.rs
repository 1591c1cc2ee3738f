use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::DatasetRecord;
use crate::instruction::{format_training_example, EmitStyle};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const STATS_FILE: &str = "stats.json";
pub const SHARD_FILE: &str = "shard.json";
pub const REPORT_FILE: &str = "report.json";
pub const FAILURES_DIR: &str = "failures";

#[derive(Debug, thiserror::Error)]
pub enum ShardError {
    #[error("output directory {0} already exists and is not empty")]
    OutputExists(PathBuf),
    #[error("duplicate record id {0}")]
    DuplicateId(String),
    #[error("record {id}: image path must be images/{id}.png, got {path}")]
    ImagePath { id: String, path: String },
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{path} line {line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> ShardError + '_ {
    move |e| ShardError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// A record whose image still lives outside the shard.
#[derive(Debug, Clone)]
pub struct StagedRecord {
    pub record: DatasetRecord,
    pub image_src: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ShardStats {
    pub records: usize,
    pub per_category: BTreeMap<String, usize>,
    pub per_pipeline: BTreeMap<String, usize>,
    pub qa_records: usize,
    pub qa_triplets: usize,
    /// Mean raw triplets per QA record.
    pub qa_per_image_mean: f64,
    pub pointing_records: usize,
    pub points: usize,
    /// Training rows emitted (triplets times styles).
    pub training_rows: usize,
    pub failures_by_stage: BTreeMap<String, usize>,
    pub cache_hit_rate: Option<f64>,
}

pub fn stats(records: &[DatasetRecord]) -> ShardStats {
    let mut s = ShardStats {
        records: records.len(),
        ..Default::default()
    };
    for r in records {
        *s.per_category.entry(r.category.to_string()).or_default() += 1;
        *s.per_pipeline.entry(r.pipeline_id.clone()).or_default() += 1;
        if r.category.is_pointing() {
            s.pointing_records += 1;
            s.points += r.points.iter().map(|p| p.points.len()).sum::<usize>();
        } else {
            s.qa_records += 1;
            s.qa_triplets += r.qa.len();
        }
    }
    if s.qa_records > 0 {
        s.qa_per_image_mean = s.qa_triplets as f64 / s.qa_records as f64;
    }
    s
}

/// Drops records whose code equals that of an earlier record (by id order).
pub fn dedup(records: Vec<DatasetRecord>) -> (Vec<DatasetRecord>, usize) {
    dedup_by_code(records, |r| r)
}

pub fn dedup_by_code<T>(
    mut items: Vec<T>,
    record: impl Fn(&T) -> &DatasetRecord,
) -> (Vec<T>, usize) {
    items.sort_by(|a, b| record(a).id.cmp(&record(b).id));
    let before = items.len();
    let mut seen = HashSet::new();
    items.retain(|it| seen.insert(record(it).code_digest()));
    let dropped = before - items.len();
    (items, dropped)
}

#[derive(Debug, Clone, Default)]
pub struct WriteOptions {
    /// Training rows to emit; `None` skips `train.jsonl`.
    pub emit: Option<EmitStyle>,
    /// Extra metadata stored under `"run"` in `shard.json`.
    pub run_meta: Option<serde_json::Value>,
    pub report: Option<serde_json::Value>,
    pub failures_by_stage: BTreeMap<String, usize>,
    pub cache_hit_rate: Option<f64>,
    /// Directory moved into the shard as `failures/`.
    pub failures_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct DatasetShard {
    pub dir: PathBuf,
    pub format_version: u32,
    pub records: Vec<DatasetRecord>,
    pub stats: ShardStats,
}

impl DatasetShard {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, ShardError> {
        let dir = dir.into();
        let records = read_manifest(&dir.join(MANIFEST_FILE))?;
        let mut st = stats(&records);
        if let Ok(text) = fs::read_to_string(dir.join(STATS_FILE)) {
            if let Ok(saved) = serde_json::from_str::<ShardStats>(&text) {
                st.failures_by_stage = saved.failures_by_stage;
                st.cache_hit_rate = saved.cache_hit_rate;
                st.training_rows = saved.training_rows;
            }
        }
        Ok(Self {
            dir,
            format_version: FORMAT_VERSION,
            records,
            stats: st,
        })
    }

    pub fn image_path(&self, record: &DatasetRecord) -> PathBuf {
        self.dir.join(&record.image)
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<DatasetRecord>, ShardError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| ShardError::Manifest {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Checks that `dir` is absent or an empty directory.
pub fn ensure_writable_target(dir: &Path) -> Result<(), ShardError> {
    match fs::read_dir(dir) {
        Ok(mut entries) => {
            if entries.next().is_some() {
                Err(ShardError::OutputExists(dir.to_path_buf()))
            } else {
                Ok(())
            }
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(_) if dir.exists() => Err(ShardError::OutputExists(dir.to_path_buf())),
        Err(e) => Err(io_err(dir)(e)),
    }
}

/// A sibling path of `dir` for temporary data, unique to this process.
pub(crate) fn sibling_temp(dir: &Path, tag: &str) -> PathBuf {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "shard".into());
    let parent = dir
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    parent.join(format!(".{name}.{tag}-{}", std::process::id()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), ShardError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| ShardError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// Writes a shard atomically: everything is assembled in a sibling staging
/// directory that is renamed to `out_dir` at the end. Records are sorted by
/// id; duplicate ids are rejected before anything is written.
pub fn write_shard(
    mut records: Vec<StagedRecord>,
    out_dir: &Path,
    opts: &WriteOptions,
) -> Result<DatasetShard, ShardError> {
    ensure_writable_target(out_dir)?;
    records.sort_by(|a, b| a.record.id.cmp(&b.record.id));
    for pair in records.windows(2) {
        if pair[0].record.id == pair[1].record.id {
            return Err(ShardError::DuplicateId(pair[0].record.id.clone()));
        }
    }
    for r in &records {
        if r.record.image != format!("images/{}.png", r.record.id) {
            return Err(ShardError::ImagePath {
                id: r.record.id.clone(),
                path: r.record.image.clone(),
            });
        }
    }

    let staging = sibling_temp(out_dir, "staging");
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(io_err(&staging))?;
    }
    let images = staging.join("images");
    fs::create_dir_all(&images).map_err(io_err(&images))?;
    let result = fill_staging(&records, &staging, opts);
    let result = result.and_then(|st| {
        if out_dir.exists() {
            fs::remove_dir(out_dir).map_err(io_err(out_dir))?;
        }
        fs::rename(&staging, out_dir).map_err(io_err(out_dir))?;
        Ok(st)
    });
    match result {
        Ok(st) => Ok(DatasetShard {
            dir: out_dir.to_path_buf(),
            format_version: FORMAT_VERSION,
            records: records.into_iter().map(|r| r.record).collect(),
            stats: st,
        }),
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            Err(e)
        }
    }
}

fn fill_staging(
    records: &[StagedRecord],
    staging: &Path,
    opts: &WriteOptions,
) -> Result<ShardStats, ShardError> {
    let manifest_path = staging.join(MANIFEST_FILE);
    let mut manifest = Vec::new();
    for r in records {
        serde_json::to_writer(&mut manifest, &r.record).map_err(|e| ShardError::Io {
            path: manifest_path.clone(),
            message: e.to_string(),
        })?;
        manifest.push(b'\n');
        let dest = staging.join(&r.record.image);
        fs::copy(&r.image_src, &dest).map_err(io_err(&r.image_src))?;
    }
    fs::write(&manifest_path, manifest).map_err(io_err(&manifest_path))?;

    let mut st = stats(&records.iter().map(|r| r.record.clone()).collect::<Vec<_>>());
    if let Some(emit) = opts.emit {
        st.training_rows = write_training_rows(records, emit, &staging.join(TRAIN_FILE))?;
    }
    st.failures_by_stage = opts.failures_by_stage.clone();
    st.cache_hit_rate = opts.cache_hit_rate;
    write_json(&staging.join(STATS_FILE), &st)?;

    let mut meta = serde_json::json!({
        "format_version": FORMAT_VERSION,
        "generator": format!("codesynth {}", env!("CARGO_PKG_VERSION")),
        "records": records.len(),
    });
    if let Some(run) = &opts.run_meta {
        meta["run"] = run.clone();
    }
    write_json(&staging.join(SHARD_FILE), &meta)?;
    if let Some(report) = &opts.report {
        write_json(&staging.join(REPORT_FILE), report)?;
    }
    if let Some(failures) = opts.failures_dir.as_ref().filter(|p| p.exists()) {
        let dest = staging.join(FAILURES_DIR);
        fs::rename(failures, &dest).map_err(io_err(failures))?;
    }
    Ok(st)
}

#[derive(Serialize)]
struct TrainingRow<'a> {
    record_id: &'a str,
    image: &'a str,
    style: &'static str,
    prompt: String,
    target: String,
}

fn write_training_rows(
    records: &[StagedRecord],
    emit: EmitStyle,
    path: &Path,
) -> Result<usize, ShardError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut out = std::io::BufWriter::new(file);
    let mut rows = 0;
    for r in records {
        for t in &r.record.qa {
            for &style in emit.styles() {
                let ex = format_training_example(t, style);
                let row = TrainingRow {
                    record_id: &r.record.id,
                    image: &r.record.image,
                    style: style.as_str(),
                    prompt: ex.prompt,
                    target: ex.target,
                };
                serde_json::to_writer(&mut out, &row).map_err(|e| ShardError::Io {
                    path: path.to_path_buf(),
                    message: e.to_string(),
                })?;
                out.write_all(b"\n").map_err(io_err(path))?;
                rows += 1;
            }
        }
    }
    out.flush().map_err(io_err(path))?;
    Ok(rows)
}
