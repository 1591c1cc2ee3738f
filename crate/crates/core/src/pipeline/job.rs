//! One generation job: topic → data → code (render) → instruction, or
//! point-edit in place of instruction for the pointing pipeline.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{GenerationQuery, PipelineRegistry, PipelineSpec};
use crate::dataset::{DatasetRecord, Provenance, StageProvenance};
use crate::error::StageError;
use crate::instruction::{self, InstructionContext, InstructionSet};
use crate::llm::parse::{self, DataContent, ParseError};
use crate::llm::{Bindings, Gateway, ModelRoute, Placeholder, PromptTemplate, Stage, StageCall};
use crate::persona::PersonaStore;
use crate::pointing::{self, MarkerSpec, PointAnnotation, PointEditContext, PointingError};
use crate::render::{
    validate_image, CodeArtifact, ImageConstraints, RenderedImage, Renderer, SandboxPolicy,
};
use crate::seed;

/// Salt for the persona draw.
const PERSONA_SALT: u64 = 0;
/// Salt for picking one topic out of the generated list.
const TOPIC_PICK_SALT: u64 = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageRoutes {
    pub topic: ModelRoute,
    pub data: ModelRoute,
    pub code: ModelRoute,
    pub instruction: ModelRoute,
    pub point_edit: ModelRoute,
}

impl Default for StageRoutes {
    fn default() -> Self {
        Self {
            topic: ModelRoute::new("anthropic", "claude-3-5-sonnet-20240620", 1.0),
            data: ModelRoute::new("anthropic", "claude-3-5-sonnet-20240620", 0.7),
            code: ModelRoute::new("anthropic", "claude-3-5-sonnet-20240620", 0.7),
            instruction: ModelRoute::new("openai", "gpt-4o-mini", 0.3),
            point_edit: ModelRoute::new("anthropic", "claude-3-5-sonnet-20240620", 0.7),
        }
    }
}

impl StageRoutes {
    pub fn get(&self, stage: Stage) -> &ModelRoute {
        match stage {
            Stage::Topic => &self.topic,
            Stage::Data => &self.data,
            Stage::Code => &self.code,
            Stage::Instruction => &self.instruction,
            Stage::PointEdit => &self.point_edit,
        }
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ModelRoute> {
        [
            &mut self.topic,
            &mut self.data,
            &mut self.code,
            &mut self.instruction,
            &mut self.point_edit,
        ]
        .into_iter()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobSettings {
    pub routes: StageRoutes,
    /// Attempts per stage, including the first.
    pub max_attempts: u32,
    pub num_topics: usize,
    pub render_timeout: Duration,
    pub max_output_bytes: usize,
    pub network_disabled: bool,
    pub constraints: ImageConstraints,
    pub marker: MarkerSpec,
}

impl Default for JobSettings {
    fn default() -> Self {
        Self {
            routes: StageRoutes::default(),
            max_attempts: 3,
            num_topics: 10,
            render_timeout: Duration::from_secs(60),
            max_output_bytes: 1 << 20,
            network_disabled: true,
            constraints: ImageConstraints::default(),
            marker: MarkerSpec::default(),
        }
    }
}

/// Shared, read-only handles a job runs against.
#[derive(Clone, Copy)]
pub struct JobDeps<'a> {
    pub registry: &'a PipelineRegistry,
    pub personas: &'a PersonaStore,
    pub gateway: &'a Gateway,
    pub renderer: &'a dyn Renderer,
    pub settings: &'a JobSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub stage: Stage,
    pub attempts: u32,
    /// The accepted attempt's completion came from the cache.
    pub cache_hit: bool,
    pub llm_calls: u32,
    pub llm_cache_hits: u32,
    pub duration_ms: u64,
    pub ok: bool,
}

#[derive(Debug, Clone)]
pub struct GenerationJob {
    pub index: u64,
    pub query: GenerationQuery,
    pub pipeline_id: String,
    pub persona_id: u32,
    pub job_seed: u64,
    pub stage_log: Vec<StageOutcome>,
}

impl GenerationJob {
    /// Derives the job seed and draws the persona.
    pub fn new(
        query: &GenerationQuery,
        index: u64,
        pipeline_id: &str,
        personas: &PersonaStore,
    ) -> Self {
        let job_seed = seed::job_seed(query.seed, index);
        let persona_id = personas
            .sample(seed::stage_seed(job_seed, PERSONA_SALT, 0))
            .map(|p| p.id)
            .unwrap_or(0);
        Self {
            index,
            query: query.clone(),
            pipeline_id: pipeline_id.to_string(),
            persona_id,
            job_seed,
            stage_log: Vec::new(),
        }
    }

    pub fn record_id(&self) -> String {
        seed::record_id(self.query.seed, self.index, &self.pipeline_id)
    }

    pub fn llm_calls(&self) -> (u32, u32) {
        self.stage_log
            .iter()
            .fold((0, 0), |(c, h), s| (c + s.llm_calls, h + s.llm_cache_hits))
    }
}

#[derive(Debug, Clone, thiserror::Error)]
#[error("job {job_index} ({pipeline_id}) failed at {stage} after {attempts} attempt(s): {error}")]
pub struct JobFailure {
    pub job_index: u64,
    pub pipeline_id: String,
    pub stage: Stage,
    pub attempts: u32,
    pub error: StageError,
}

type AttemptResult<T> = Result<(T, StageCall), (StageError, Option<StageCall>)>;

/// Runs `f` for attempts 1..=max with attempt-indexed seeds until it
/// succeeds or fails with a non-retryable error.
fn with_retries<T>(
    job: &mut GenerationJob,
    stage: Stage,
    max_attempts: u32,
    mut f: impl FnMut(u32, u64) -> AttemptResult<T>,
) -> Result<(T, StageCall, u32), (StageError, u32)> {
    let started = Instant::now();
    let mut outcome = StageOutcome {
        stage,
        attempts: 0,
        cache_hit: false,
        llm_calls: 0,
        llm_cache_hits: 0,
        duration_ms: 0,
        ok: false,
    };
    let mut last_err = None;
    for attempt in 1..=max_attempts.max(1) {
        outcome.attempts = attempt;
        let seed = seed::stage_seed(job.job_seed, stage.salt(), attempt - 1);
        let result = f(attempt, seed);
        let call = match &result {
            Ok((_, c)) => Some(c),
            Err((_, c)) => c.as_ref(),
        };
        if let Some(c) = call {
            outcome.llm_calls += 1;
            outcome.llm_cache_hits += u32::from(c.response.cached);
        }
        match result {
            Ok((value, call)) => {
                outcome.ok = true;
                outcome.cache_hit = call.response.cached;
                outcome.duration_ms = started.elapsed().as_millis() as u64;
                job.stage_log.push(outcome);
                return Ok((value, call, attempt));
            }
            Err((e, _)) => {
                log::debug!("job {} {stage} attempt {attempt}: {e}", job.index);
                let retry = e.is_retryable();
                last_err = Some(e);
                if !retry {
                    break;
                }
            }
        }
    }
    outcome.duration_ms = started.elapsed().as_millis() as u64;
    let attempts = outcome.attempts;
    job.stage_log.push(outcome);
    Err((last_err.expect("at least one attempt"), attempts))
}

fn call_err(e: StageError) -> (StageError, Option<StageCall>) {
    (e, None)
}

fn stage_prov(
    stage: Stage,
    route: &ModelRoute,
    template: &PromptTemplate,
    call: &StageCall,
    attempts: u32,
) -> StageProvenance {
    StageProvenance {
        stage,
        provider: route.provider.clone(),
        model: route.model.clone(),
        template_id: template.id().to_string(),
        prompt_hash: call.prompt_hash.clone(),
        attempts,
    }
}

fn render_checked(
    deps: &JobDeps<'_>,
    artifact: &CodeArtifact,
    dir: PathBuf,
) -> Result<RenderedImage, StageError> {
    let s = deps.settings;
    let policy = SandboxPolicy {
        wall_timeout: s.render_timeout,
        max_output_bytes: s.max_output_bytes,
        working_dir: dir,
        network_disabled: s.network_disabled,
    };
    let img = deps.renderer.render(artifact, &policy)?;
    validate_image(&img, &s.constraints)?;
    Ok(img)
}

/// Runs every stage of `job`. On success the rendered image is moved to
/// `images_dir/<record id>.png`. `workspace` is the job's private scratch
/// directory; the caller decides whether to keep it.
pub fn run_job(
    job: &mut GenerationJob,
    deps: &JobDeps<'_>,
    workspace: &Path,
    images_dir: &Path,
) -> Result<DatasetRecord, JobFailure> {
    let spec = deps
        .registry
        .get(&job.pipeline_id)
        .ok_or_else(|| JobFailure {
            job_index: job.index,
            pipeline_id: job.pipeline_id.clone(),
            stage: Stage::Topic,
            attempts: 0,
            error: StageError::Template(crate::llm::TemplateError::EmptyBody),
        })?;
    run_stages(job, spec, deps, workspace, images_dir).map_err(|(stage, error, attempts)| {
        JobFailure {
            job_index: job.index,
            pipeline_id: job.pipeline_id.clone(),
            stage,
            attempts,
            error,
        }
    })
}

fn run_stages(
    job: &mut GenerationJob,
    spec: &PipelineSpec,
    deps: &JobDeps<'_>,
    workspace: &Path,
    images_dir: &Path,
) -> Result<DatasetRecord, (Stage, StageError, u32)> {
    let s = deps.settings;
    let gw = deps.gateway;
    let persona = deps
        .personas
        .get(job.persona_id)
        .map(|p| p.text.clone())
        .unwrap_or_default();
    let figure_type = job.query.text.clone();
    let max = s.max_attempts;
    let fail = |stage: Stage| move |(e, n): (StageError, u32)| (stage, e, n);
    let mut stages = Vec::new();

    // topic
    let t = &spec.templates.topic;
    let bindings = Bindings::new()
        .with(Placeholder::Persona, persona.as_str())
        .with(Placeholder::NumTopics, s.num_topics.to_string())
        .with(Placeholder::FigureType, figure_type.as_str());
    let (topics, call, n) = with_retries(job, Stage::Topic, max, |_, seed| {
        let call = gw
            .call_template(t, &bindings, &s.routes.topic, seed)
            .map_err(call_err)?;
        match parse::parse_topics(&call.response.text, s.num_topics) {
            Ok(topics) => Ok((topics, call)),
            Err(ParseError::CountMismatch { topics, .. }) if !topics.is_empty() => {
                Ok((topics, call))
            }
            Err(e) => Err((e.into(), Some(call))),
        }
    })
    .map_err(fail(Stage::Topic))?;
    stages.push(stage_prov(Stage::Topic, &s.routes.topic, t, &call, n));
    let pick =
        seed::rng(seed::stage_seed(job.job_seed, TOPIC_PICK_SALT, 0)).gen_range(0..topics.len());
    let topic = topics[pick].clone();

    // data
    let t = &spec.templates.data;
    let bindings = Bindings::new()
        .with(Placeholder::Persona, persona.as_str())
        .with(Placeholder::Topic, topic.as_str())
        .with(Placeholder::FigureType, figure_type.as_str());
    let (data, call, n): (DataContent, _, _) = with_retries(job, Stage::Data, max, |_, seed| {
        let call = gw
            .call_template(t, &bindings, &s.routes.data, seed)
            .map_err(call_err)?;
        match parse::parse_json_payload(&call.response.text) {
            Ok(d) => Ok((d, call)),
            Err(e) => Err((e.into(), Some(call))),
        }
    })
    .map_err(fail(Stage::Data))?;
    stages.push(stage_prov(Stage::Data, &s.routes.data, t, &call, n));

    // code + render
    let t = &spec.templates.code;
    let bindings = Bindings::new()
        .with(Placeholder::Persona, persona.as_str())
        .with(Placeholder::Topic, topic.as_str())
        .with(Placeholder::FigureType, figure_type.as_str())
        .with(Placeholder::Data, data.json.as_str());
    let ((artifact, image), call, n) = with_retries(job, Stage::Code, max, |attempt, seed| {
        let call = gw
            .call_template(t, &bindings, &s.routes.code, seed)
            .map_err(call_err)?;
        let rendered = parse::extract_code_block(&call.response.text, spec.tool.fence_tag())
            .map_err(StageError::from)
            .and_then(|code| Ok(CodeArtifact::from_fenced(spec.tool, code)?))
            .and_then(|art| {
                let img = render_checked(deps, &art, workspace.join(format!("code-{attempt}")))?;
                Ok((art, img))
            });
        match rendered {
            Ok(v) => Ok((v, call)),
            Err(e) => Err((e, Some(call))),
        }
    })
    .map_err(fail(Stage::Code))?;
    stages.push(stage_prov(Stage::Code, &s.routes.code, t, &call, n));

    let mut qa = Vec::new();
    let mut points = Vec::new();
    if let Some(t) = &spec.templates.instruction {
        let ctx = InstructionContext {
            code: &artifact,
            data: &data,
            persona: &persona,
            topic: &topic,
            figure_type: &figure_type,
        };
        let (set, call, n): (InstructionSet, _, _) =
            with_retries(job, Stage::Instruction, max, |_, seed| {
                instruction::generate_instructions(ctx, t, gw, &s.routes.instruction, seed)
            })
            .map_err(fail(Stage::Instruction))?;
        if set.dropped > 0 {
            log::info!(
                "job {}: dropped {} malformed QA record(s)",
                job.index,
                set.dropped
            );
        }
        stages.push(stage_prov(
            Stage::Instruction,
            &s.routes.instruction,
            t,
            &call,
            n,
        ));
        qa = set.triplets;
    } else if let Some(t) = &spec.templates.point_edit {
        let (ann, call, n) = point_stage(
            job,
            deps,
            &artifact,
            &image,
            t,
            &topic,
            &figure_type,
            workspace,
        )?;
        stages.push(stage_prov(
            Stage::PointEdit,
            &s.routes.point_edit,
            t,
            &call,
            n,
        ));
        points.push(ann);
    }

    let id = job.record_id();
    let image_rel = format!("images/{id}.png");
    let dest = images_dir.join(format!("{id}.png"));
    move_file(&image.path, &dest).map_err(|e| (Stage::Code, StageError::Render(e.into()), 1))?;
    let instruction_model = spec
        .templates
        .instruction
        .as_ref()
        .map(|_| s.routes.instruction.model.clone());
    Ok(DatasetRecord {
        id,
        category: spec.category,
        pipeline_id: spec.id.clone(),
        tool: spec.tool,
        persona,
        topic,
        query: job.query.text.clone(),
        code: artifact.source,
        image: image_rel,
        width: image.width,
        height: image.height,
        qa,
        points,
        provenance: Provenance {
            job_index: job.index,
            job_seed: job.job_seed,
            code_model: s.routes.code.model.clone(),
            instruction_model,
            source_record: None,
            stages,
        },
    })
}

/// Point-edit stage against an already rendered, validated original.
#[allow(clippy::too_many_arguments)]
pub(crate) fn point_stage(
    job: &mut GenerationJob,
    deps: &JobDeps<'_>,
    original: &CodeArtifact,
    original_image: &RenderedImage,
    template: &PromptTemplate,
    topic: &str,
    figure_type: &str,
    workspace: &Path,
) -> Result<(PointAnnotation, StageCall, u32), (Stage, StageError, u32)> {
    let s = deps.settings;
    let pixels = original_image
        .rgb()
        .map_err(|e| (Stage::PointEdit, PointingError::Undecodable(e).into(), 0))?;
    let marker =
        pointing::choose_marker(&pixels, &s.marker).map_err(|e| (Stage::PointEdit, e.into(), 0))?;
    if marker.color != s.marker.color {
        log::info!(
            "job {}: marker color collides, using fallback {}",
            job.index,
            marker.hex()
        );
    }
    let ctx = PointEditContext {
        code: original,
        topic,
        figure_type,
    };
    with_retries(job, Stage::PointEdit, s.max_attempts, |attempt, seed| {
        let ((question, edited), call) = pointing::generate_point_edit(
            ctx,
            &marker,
            template,
            deps.gateway,
            &s.routes.point_edit,
            seed,
        )?;
        let annotated = render_checked(deps, &edited, workspace.join(format!("point-{attempt}")))
            .and_then(|img| {
                if (img.width, img.height) != (original_image.width, original_image.height) {
                    return Err(PointingError::SizeMismatch {
                        original: [original_image.width, original_image.height],
                        edited: [img.width, img.height],
                    }
                    .into());
                }
                let rgb = img.rgb().map_err(PointingError::Undecodable)?;
                Ok(PointAnnotation::extract(question, &rgb, &marker)?)
            });
        match annotated {
            Ok(a) => Ok((a, call)),
            Err(e) => Err((e, Some(call))),
        }
    })
    .map_err(|(e, n)| (Stage::PointEdit, e, n))
}

pub(crate) fn move_file(from: &Path, to: &Path) -> std::io::Result<()> {
    if let Some(parent) = to.parent() {
        std::fs::create_dir_all(parent)?;
    }
    match std::fs::rename(from, to) {
        Ok(()) => Ok(()),
        Err(_) => {
            std::fs::copy(from, to)?;
            std::fs::remove_file(from)
        }
    }
}

/// Pointing job over a record of an existing shard: only the point-edit
/// stage runs; the original render is reused as the record image.
pub fn run_point_job(
    job: &mut GenerationJob,
    deps: &JobDeps<'_>,
    source: &DatasetRecord,
    source_image: &Path,
    workspace: &Path,
    images_dir: &Path,
) -> Result<DatasetRecord, JobFailure> {
    let failure = |job: &GenerationJob, stage, error, attempts| JobFailure {
        job_index: job.index,
        pipeline_id: job.pipeline_id.clone(),
        stage,
        attempts,
        error,
    };
    let spec = deps
        .registry
        .get(&job.pipeline_id)
        .filter(|s| s.templates.point_edit.is_some())
        .ok_or_else(|| {
            failure(
                job,
                Stage::PointEdit,
                StageError::Template(crate::llm::TemplateError::EmptyBody),
                0,
            )
        })?;
    let template = spec.templates.point_edit.as_ref().expect("checked above");
    let artifact = CodeArtifact::new(source.tool, source.code.clone(), source.tool.fence_tag())
        .map_err(|e| failure(job, Stage::PointEdit, e.into(), 0))?;
    let original = RenderedImage::open(source_image).map_err(|e| {
        failure(
            job,
            Stage::PointEdit,
            PointingError::Undecodable(e).into(),
            0,
        )
    })?;
    let (ann, call, n) = point_stage(
        job,
        deps,
        &artifact,
        &original,
        template,
        &source.topic,
        &source.query,
        workspace,
    )
    .map_err(|(stage, e, n)| failure(job, stage, e, n))?;

    let id = job.record_id();
    let dest = images_dir.join(format!("{id}.png"));
    std::fs::create_dir_all(images_dir)
        .and_then(|_| std::fs::copy(source_image, &dest))
        .map_err(|e| failure(job, Stage::PointEdit, StageError::Render(e.into()), n))?;
    let mut stages: Vec<StageProvenance> = source
        .provenance
        .stages
        .iter()
        .filter(|s| matches!(s.stage, Stage::Topic | Stage::Data | Stage::Code))
        .cloned()
        .collect();
    stages.push(stage_prov(
        Stage::PointEdit,
        &deps.settings.routes.point_edit,
        template,
        &call,
        n,
    ));
    Ok(DatasetRecord {
        id: id.clone(),
        category: spec.category,
        pipeline_id: spec.id.clone(),
        tool: source.tool,
        persona: source.persona.clone(),
        topic: source.topic.clone(),
        query: source.query.clone(),
        code: source.code.clone(),
        image: format!("images/{id}.png"),
        width: original.width,
        height: original.height,
        qa: Vec::new(),
        points: vec![ann],
        provenance: Provenance {
            job_index: job.index,
            job_seed: job.job_seed,
            code_model: source.provenance.code_model.clone(),
            instruction_model: None,
            source_record: Some(source.id.clone()),
            stages,
        },
    })
}
