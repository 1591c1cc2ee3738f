//! Batch execution over a bounded worker pool.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::job::{run_point_job, GenerationJob, JobDeps, JobFailure};
use super::select::{select_pipelines, Allocation, Resolution, SelectError};
use super::{run_job, Category, CategoryChoice, GenerationQuery};
use crate::dataset::{self, DatasetRecord, DatasetShard, ShardError, StagedRecord, WriteOptions};
use crate::instruction::EmitStyle;
use crate::llm::{Bindings, Placeholder, PromptTemplate, Stage};

#[derive(Debug, thiserror::Error)]
pub enum BatchError {
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Shard(#[from] ShardError),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("all {} jobs failed; failed workspaces kept in {}", .report.jobs, .kept.display())]
    AllJobsFailed {
        report: Box<BatchReport>,
        kept: PathBuf,
    },
    #[error("source shard has no record a pointing pipeline can edit")]
    NoEligibleRecords,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> BatchError + '_ {
    move |e| BatchError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone)]
pub struct BatchOptions {
    pub out_dir: PathBuf,
    pub workers: usize,
    /// Drop records whose code duplicates an earlier record's.
    pub dedup: bool,
    pub emit: Option<EmitStyle>,
    /// Stored in `shard.json` (the effective run configuration).
    pub run_meta: Option<serde_json::Value>,
    /// Ask the topic model for a category when no keyword matches.
    pub llm_classifier: bool,
}

impl BatchOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            out_dir: out_dir.into(),
            workers: 4,
            dedup: true,
            emit: Some(EmitStyle::Dual),
            run_meta: None,
            llm_classifier: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineCounts {
    pub succeeded: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureEntry {
    pub job_index: u64,
    pub pipeline_id: String,
    pub stage: Stage,
    pub attempts: u32,
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub query: Option<GenerationQuery>,
    pub category: Option<Category>,
    pub resolution: Option<Resolution>,
    pub allocations: Vec<Allocation>,
    pub source_shard: Option<String>,
    pub skipped_records: usize,
    pub jobs: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub dedup_dropped: usize,
    pub records: usize,
    pub failures_by_stage: BTreeMap<String, usize>,
    pub failures_by_kind: BTreeMap<String, usize>,
    pub per_pipeline: BTreeMap<String, PipelineCounts>,
    pub failures: Vec<FailureEntry>,
    pub llm_calls: u64,
    pub llm_cache_hits: u64,
    pub cache_hit_rate: f64,
    pub qa_triplets: usize,
}

impl BatchReport {
    fn absorb(&mut self, job: &GenerationJob, outcome: &Result<DatasetRecord, JobFailure>) {
        self.jobs += 1;
        let (calls, hits) = job.llm_calls();
        self.llm_calls += u64::from(calls);
        self.llm_cache_hits += u64::from(hits);
        let entry = self
            .per_pipeline
            .entry(job.pipeline_id.clone())
            .or_default();
        match outcome {
            Ok(_) => {
                self.succeeded += 1;
                entry.succeeded += 1;
            }
            Err(f) => {
                self.failed += 1;
                entry.failed += 1;
                *self
                    .failures_by_stage
                    .entry(f.stage.to_string())
                    .or_default() += 1;
                *self
                    .failures_by_kind
                    .entry(f.error.kind().to_string())
                    .or_default() += 1;
                self.failures.push(FailureEntry {
                    job_index: f.job_index,
                    pipeline_id: f.pipeline_id.clone(),
                    stage: f.stage,
                    attempts: f.attempts,
                    kind: f.error.kind().to_string(),
                    message: f.error.to_string(),
                });
            }
        }
    }

    fn finish(&mut self) {
        self.failures.sort_by_key(|f| f.job_index);
        self.cache_hit_rate = if self.llm_calls == 0 {
            0.0
        } else {
            self.llm_cache_hits as f64 / self.llm_calls as f64
        };
    }
}

const CLASSIFIER_PROMPT: &str = "Which one of these categories best describes images of \"{{FIGURE_TYPE}}\"?\n\
charts, documents, tables, diagrams, math, vector-graphics, sheet-music, circuits, chemical-structures, pointing\n\
Answer with the category name only.";

fn classify_with_llm(query: &GenerationQuery, deps: &JobDeps<'_>) -> Option<Category> {
    let template = PromptTemplate::new(Stage::Topic, CLASSIFIER_PROMPT).ok()?;
    let bindings = Bindings::new().with(Placeholder::FigureType, query.text.as_str());
    let call = deps
        .gateway
        .call_template(
            &template,
            &bindings,
            &deps.settings.routes.topic,
            query.seed,
        )
        .ok()?;
    let answer = call.response.text.trim().to_lowercase();
    Category::ALL
        .into_iter()
        .filter(|c| !deps.registry.by_category(*c).is_empty())
        .find(|c| answer.starts_with(c.as_str()))
}

struct WorkDir {
    root: PathBuf,
}

impl WorkDir {
    fn create(out_dir: &Path) -> Result<Self, BatchError> {
        let root = dataset::shard::sibling_temp(out_dir, "work");
        if root.exists() {
            fs::remove_dir_all(&root).map_err(io_err(&root))?;
        }
        for sub in ["images", "jobs", "failures"] {
            fs::create_dir_all(root.join(sub)).map_err(io_err(&root))?;
        }
        Ok(Self { root })
    }

    fn images(&self) -> PathBuf {
        self.root.join("images")
    }

    fn job(&self, index: u64) -> PathBuf {
        self.root.join("jobs").join(format!("job-{index:06}"))
    }

    fn failures(&self) -> PathBuf {
        self.root.join("failures")
    }

    fn retain_failure(&self, job: &GenerationJob, failure: &JobFailure) {
        let name = format!("job-{:06}", job.index);
        let dest = self.failures().join(&name);
        let src = self.job(job.index);
        if fs::rename(&src, &dest).is_err() {
            let _ = fs::create_dir_all(&dest);
        }
        let log = serde_json::to_string_pretty(&job.stage_log).unwrap_or_default();
        let _ = fs::write(
            dest.join("error.txt"),
            format!("{failure}\n\nstage log:\n{log}\n"),
        );
    }
}

type Outcome = (GenerationJob, Result<DatasetRecord, JobFailure>);

/// Runs `jobs` on `workers` threads. Results come back in job order.
fn run_pool(
    jobs: Vec<GenerationJob>,
    workers: usize,
    work: &WorkDir,
    run: impl Fn(&mut GenerationJob, &Path, &Path) -> Result<DatasetRecord, JobFailure> + Sync,
) -> Vec<Outcome> {
    let total = jobs.len();
    let next = AtomicUsize::new(0);
    let done = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<GenerationJob>>> =
        jobs.into_iter().map(|j| Mutex::new(Some(j))).collect();
    let results: Mutex<Vec<Option<Outcome>>> = Mutex::new((0..total).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, total.max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= total {
                    break;
                }
                let mut job = slots[i]
                    .lock()
                    .expect("job slot")
                    .take()
                    .expect("job taken once");
                let ws = work.job(job.index);
                let outcome = match fs::create_dir_all(&ws) {
                    Ok(()) => run(&mut job, &ws, &work.images()),
                    Err(e) => Err(JobFailure {
                        job_index: job.index,
                        pipeline_id: job.pipeline_id.clone(),
                        stage: Stage::Topic,
                        attempts: 0,
                        error: crate::render::RenderError::from(e).into(),
                    }),
                };
                match &outcome {
                    Ok(_) => {
                        let _ = fs::remove_dir_all(&ws);
                    }
                    Err(f) => {
                        log::warn!("{f}");
                        work.retain_failure(&job, f);
                    }
                }
                let n = done.fetch_add(1, Ordering::Relaxed) + 1;
                log::info!(
                    "job {}/{} finished ({})",
                    n,
                    total,
                    if outcome.is_ok() { "ok" } else { "failed" }
                );
                results.lock().expect("results")[i] = Some((job, outcome));
            });
        }
    });
    results
        .into_inner()
        .expect("results")
        .into_iter()
        .map(|o| o.expect("every job ran"))
        .collect()
}

fn finish_batch(
    outcomes: Vec<Outcome>,
    mut report: BatchReport,
    work: WorkDir,
    opts: &BatchOptions,
) -> Result<(DatasetShard, BatchReport), BatchError> {
    let mut staged = Vec::new();
    for (job, outcome) in &outcomes {
        report.absorb(job, outcome);
        if let Ok(record) = outcome {
            staged.push(StagedRecord {
                image_src: work.root.join(&record.image),
                record: record.clone(),
            });
        }
    }
    report.finish();
    if staged.is_empty() {
        let kept = work.root.clone();
        return Err(BatchError::AllJobsFailed {
            report: Box::new(report),
            kept,
        });
    }
    if opts.dedup {
        let (kept, dropped) = dataset::dedup_by_code(staged, |s| &s.record);
        staged = kept;
        report.dedup_dropped = dropped;
    }
    report.records = staged.len();
    report.qa_triplets = staged.iter().map(|s| s.record.qa.len()).sum();

    let write_opts = WriteOptions {
        emit: opts.emit,
        run_meta: opts.run_meta.clone(),
        report: Some(serde_json::to_value(&report).expect("report serializes")),
        failures_by_stage: report.failures_by_stage.clone(),
        cache_hit_rate: Some(report.cache_hit_rate),
        failures_dir: (report.failed > 0).then(|| work.failures()),
    };
    let shard = dataset::write_shard(staged, &opts.out_dir, &write_opts)?;
    let _ = fs::remove_dir_all(&work.root);
    Ok((shard, report))
}

/// Generates a shard for `query`: selects pipelines, runs every job on a
/// bounded pool and writes the shard atomically to `opts.out_dir`.
pub fn run_batch(
    query: &GenerationQuery,
    deps: &JobDeps<'_>,
    opts: &BatchOptions,
) -> Result<(DatasetShard, BatchReport), BatchError> {
    dataset::shard::ensure_writable_target(&opts.out_dir)?;
    let mut selection = select_pipelines(query, deps.registry)?;
    if opts.llm_classifier && selection.resolution == Resolution::Fallback {
        if let Some(category) = classify_with_llm(query, deps) {
            let q = GenerationQuery {
                category: CategoryChoice::Fixed(category),
                ..query.clone()
            };
            selection = select_pipelines(&q, deps.registry)?;
            selection.resolution = Resolution::Keyword;
        }
    }
    log::info!(
        "query {:?}: category {} ({:?}), {} job(s)",
        query.text,
        selection.category,
        selection.resolution,
        query.count
    );

    let mut jobs = Vec::with_capacity(query.count as usize);
    for a in &selection.allocations {
        for _ in 0..a.count {
            let index = jobs.len() as u64;
            jobs.push(GenerationJob::new(
                query,
                index,
                &a.pipeline_id,
                deps.personas,
            ));
        }
    }
    let report = BatchReport {
        query: Some(query.clone()),
        category: Some(selection.category),
        resolution: Some(selection.resolution),
        allocations: selection.allocations.clone(),
        ..Default::default()
    };
    let work = WorkDir::create(&opts.out_dir)?;
    let outcomes = run_pool(jobs, opts.workers, &work, |job, ws, images| {
        run_job(job, deps, ws, images)
    });
    finish_batch(outcomes, report, work, opts)
}

/// Derives a pointing shard from the records of `source_dir` whose tool has
/// a pointing pipeline.
pub fn run_point_batch(
    source_dir: &Path,
    seed: u64,
    deps: &JobDeps<'_>,
    opts: &BatchOptions,
) -> Result<(DatasetShard, BatchReport), BatchError> {
    dataset::shard::ensure_writable_target(&opts.out_dir)?;
    let source = DatasetShard::open(source_dir)?;
    let eligible: Vec<(&DatasetRecord, String)> = source
        .records
        .iter()
        .filter(|r| !r.category.is_pointing())
        .filter_map(|r| {
            deps.registry
                .pointing_spec(r.tool)
                .map(|s| (r, s.id.clone()))
        })
        .collect();
    if eligible.is_empty() {
        return Err(BatchError::NoEligibleRecords);
    }
    let query = GenerationQuery::new(
        "pointing",
        CategoryChoice::Fixed(Category::Pointing),
        eligible.len() as u32,
        seed,
    );
    let jobs: Vec<GenerationJob> = eligible
        .iter()
        .enumerate()
        .map(|(i, (_, spec_id))| GenerationJob::new(&query, i as u64, spec_id, deps.personas))
        .collect();
    let report = BatchReport {
        query: Some(query.clone()),
        category: Some(Category::Pointing),
        source_shard: Some(source_dir.display().to_string()),
        skipped_records: source.records.len() - eligible.len(),
        ..Default::default()
    };
    let work = WorkDir::create(&opts.out_dir)?;
    let outcomes = run_pool(jobs, opts.workers, &work, |job, ws, images| {
        let (record, _) = eligible[job.index as usize];
        run_point_job(job, deps, record, &source.image_path(record), ws, images)
    });
    let opts = BatchOptions {
        emit: None,
        ..opts.clone()
    };
    finish_batch(outcomes, report, work, &opts)
}
