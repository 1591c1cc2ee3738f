mod common;

use std::path::Path;

use codesynth::dataset::validate_shard;
use codesynth::pipeline::{
    run_batch, run_point_batch, BatchError, BatchOptions, Category, CategoryChoice,
};
use codesynth::render::{CodeArtifact, RenderError, RenderedImage, Renderer, SandboxPolicy};
use codesynth::{GenerationQuery, Stage};

/// Makes every render of the listed jobs fail.
struct FailJobs<R> {
    inner: R,
    jobs: Vec<String>,
}

impl<R: Renderer> Renderer for FailJobs<R> {
    fn render(&self, a: &CodeArtifact, p: &SandboxPolicy) -> Result<RenderedImage, RenderError> {
        let dir = p.working_dir.to_string_lossy();
        if self.jobs.iter().any(|j| dir.contains(j.as_str())) {
            let broken = CodeArtifact::new(
                a.tool,
                format!("{}\nfail injected", a.source),
                a.lang_tag.clone(),
            )?;
            return self.inner.render(&broken, p);
        }
        self.inner.render(a, p)
    }
}

fn opts(out: &Path, workers: usize) -> BatchOptions {
    BatchOptions {
        workers,
        ..BatchOptions::new(out)
    }
}

#[test]
fn manifest_is_identical_across_worker_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = common::hermetic_config();
    config.provider.cache_dir = Some(tmp.path().join("cache"));
    let query = GenerationQuery::new("line charts of rainfall", CategoryChoice::Auto, 12, 7);

    let h = common::Harness::new(&config);
    let (a, ra) = run_batch(&query, &h.deps(), &opts(&tmp.path().join("a"), 4)).unwrap();
    assert_eq!(ra.category, Some(Category::Charts));
    assert_eq!(a.records.len(), 12);
    assert!(validate_shard(&a.dir).is_empty());

    let h = common::Harness::new(&config);
    let (b, rb) = run_batch(&query, &h.deps(), &opts(&tmp.path().join("b"), 1)).unwrap();
    assert_eq!(common::shard_bytes(&a.dir), common::shard_bytes(&b.dir));
    assert_eq!(rb.cache_hit_rate, 1.0);
    assert_eq!(rb.llm_calls, ra.llm_calls);

    let ids: Vec<&str> = a.records.iter().map(|r| r.id.as_str()).collect();
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(ids, sorted);
    for r in &a.records {
        let stages: Vec<Stage> = r.provenance.stages.iter().map(|s| s.stage).collect();
        assert_eq!(
            stages,
            [Stage::Topic, Stage::Data, Stage::Code, Stage::Instruction]
        );
        assert!(!r.qa.is_empty());
        assert!(r
            .provenance
            .stages
            .iter()
            .all(|s| s.model == "mock" && !s.prompt_hash.is_empty()));
    }
}

#[test]
fn injected_failures_are_counted_and_kept() {
    let tmp = tempfile::tempdir().unwrap();
    let config = common::hermetic_config();
    let renderer = FailJobs {
        inner: config.renderer(),
        jobs: vec!["job-000003".into(), "job-000008".into()],
    };
    let h = common::Harness::with_renderer(&config, Box::new(renderer));
    let query = GenerationQuery::new("invoices", CategoryChoice::Auto, 10, 1);
    let out = tmp.path().join("shard");
    let (shard, report) = run_batch(&query, &h.deps(), &opts(&out, 3)).unwrap();
    assert_eq!(report.failed, 2);
    assert_eq!(report.succeeded, 8);
    assert_eq!(shard.records.len(), 8);
    assert_eq!(report.failures_by_stage.get("code"), Some(&2));
    assert_eq!(
        report
            .failures
            .iter()
            .map(|f| f.job_index)
            .collect::<Vec<_>>(),
        [3, 8]
    );
    assert!(report
        .failures
        .iter()
        .all(|f| f.attempts == 3 && f.kind == "render-failed"));
    assert!(out.join("failures/job-000003/error.txt").is_file());
    assert!(out.join("failures/job-000008/error.txt").is_file());
    assert!(validate_shard(&out).is_empty());
    let leftovers: Vec<_> = std::fs::read_dir(tmp.path()).unwrap().collect();
    assert_eq!(leftovers.len(), 1, "work directory left behind");
}

#[test]
fn all_failures_abort_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let config = common::hermetic_config();
    let renderer = FailJobs {
        inner: config.renderer(),
        jobs: vec!["job-".into()],
    };
    let h = common::Harness::with_renderer(&config, Box::new(renderer));
    let query = GenerationQuery::new("x", CategoryChoice::Fixed(Category::Math), 2, 1);
    let out = tmp.path().join("shard");
    match run_batch(&query, &h.deps(), &opts(&out, 2)) {
        Err(BatchError::AllJobsFailed { report, kept }) => {
            assert_eq!(report.failed, 2);
            assert!(kept.join("failures/job-000000/error.txt").is_file());
        }
        other => panic!("{other:?}"),
    }
    assert!(!out.exists());
}

#[test]
fn existing_output_is_refused_before_any_work() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("shard");
    std::fs::create_dir_all(&out).unwrap();
    std::fs::write(out.join("keep.txt"), "x").unwrap();
    let h = common::Harness::new(&common::hermetic_config());
    let query = GenerationQuery::new("tables", CategoryChoice::Auto, 3, 1);
    let err = run_batch(&query, &h.deps(), &opts(&out, 2)).unwrap_err();
    assert!(matches!(
        err,
        BatchError::Shard(codesynth::dataset::ShardError::OutputExists(_))
    ));
    assert_eq!(h.gateway.stats().requests, 0);
}

#[test]
fn pointing_shard_from_html_records() {
    let tmp = tempfile::tempdir().unwrap();
    let h = common::Harness::new(&common::hermetic_config());
    let query = GenerationQuery::new(
        "web documents",
        CategoryChoice::Fixed(Category::Documents),
        6,
        3,
    );
    let (src, _) = run_batch(&query, &h.deps(), &opts(&tmp.path().join("src"), 2)).unwrap();
    let html = src
        .records
        .iter()
        .filter(|r| r.tool == codesynth::Tool::Html)
        .count();
    assert!(html > 0);

    let out = tmp.path().join("points");
    let (shard, report) = run_point_batch(&src.dir, 3, &h.deps(), &opts(&out, 2)).unwrap();
    assert_eq!(report.jobs, html);
    assert_eq!(report.skipped_records, src.records.len() - html);
    assert_eq!(shard.records.len(), report.succeeded);
    assert!(validate_shard(&out).is_empty());
    for r in &shard.records {
        assert_eq!(r.category, Category::Pointing);
        assert!(r.qa.is_empty());
        let src_id = r.provenance.source_record.as_deref().unwrap();
        let source = src.records.iter().find(|s| s.id == src_id).unwrap();
        assert_eq!(r.code, source.code);
        assert_eq!((r.width, r.height), (source.width, source.height));
        for ann in &r.points {
            assert!(!ann.points.is_empty());
            for p in &ann.points {
                assert!((0.0..=100.0).contains(&p[0]) && (0.0..=100.0).contains(&p[1]));
            }
        }
        assert_eq!(r.provenance.stages.last().unwrap().stage, Stage::PointEdit);
    }
    assert!(!out.join("train.jsonl").exists());
}

#[test]
fn a_failed_job_only_removes_its_own_record() {
    let tmp = tempfile::tempdir().unwrap();
    let config = common::hermetic_config();
    let query = GenerationQuery::new("org charts", CategoryChoice::Auto, 8, 21);
    let h = common::Harness::new(&config);
    let (full, _) = run_batch(&query, &h.deps(), &opts(&tmp.path().join("full"), 4)).unwrap();

    let h = common::Harness::with_renderer(
        &config,
        Box::new(FailJobs {
            inner: config.renderer(),
            jobs: vec!["job-000005".into()],
        }),
    );
    let (partial, report) =
        run_batch(&query, &h.deps(), &opts(&tmp.path().join("partial"), 4)).unwrap();
    assert_eq!(report.failed, 1);
    let expected: Vec<_> = full
        .records
        .iter()
        .filter(|r| r.provenance.job_index != 5)
        .cloned()
        .collect();
    assert_eq!(partial.records, expected);
    for r in &partial.records {
        let a = std::fs::read(partial.image_path(r)).unwrap();
        let b = std::fs::read(full.image_path(r)).unwrap();
        assert_eq!(a, b);
    }
}
