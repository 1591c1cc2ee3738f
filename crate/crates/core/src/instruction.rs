//! Instruction generation and training-example formatting.

use serde::{Deserialize, Serialize};

use crate::error::StageError;
use crate::llm::parse::{self, DataContent};
use crate::llm::{Bindings, Gateway, ModelRoute, Placeholder, PromptTemplate, StageCall};
use crate::render::CodeArtifact;

pub const COT_SUFFIX: &str = " Provide reasoning steps and then give the short answer.";
pub const SHORT_ANSWER_SUFFIX: &str = " Answer with as few words as possible.";
const ANSWER_PREFIX: &str = "Answer: ";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InstructionTriplet {
    pub question: String,
    pub explanation: String,
    pub answer: String,
}

impl InstructionTriplet {
    /// Builds a triplet, rejecting fields that are blank after trimming.
    pub fn new(question: &str, explanation: &str, answer: &str) -> Option<Self> {
        let (q, e, a) = (question.trim(), explanation.trim(), answer.trim());
        (!q.is_empty() && !e.is_empty() && !a.is_empty()).then(|| Self {
            question: q.to_string(),
            explanation: e.to_string(),
            answer: a.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstructionSet {
    pub triplets: Vec<InstructionTriplet>,
    /// SHA-256 of the code the questions were generated from.
    pub source_code_hash: String,
    /// Malformed records the parser dropped.
    pub dropped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Style {
    Cot,
    ShortAnswer,
}

impl Style {
    pub fn as_str(self) -> &'static str {
        match self {
            Style::Cot => "cot",
            Style::ShortAnswer => "short-answer",
        }
    }
}

/// Which training rows to emit per triplet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmitStyle {
    #[default]
    Dual,
    Cot,
    ShortAnswer,
}

impl EmitStyle {
    pub fn styles(self) -> &'static [Style] {
        match self {
            EmitStyle::Dual => &[Style::Cot, Style::ShortAnswer],
            EmitStyle::Cot => &[Style::Cot],
            EmitStyle::ShortAnswer => &[Style::ShortAnswer],
        }
    }
}

impl std::str::FromStr for EmitStyle {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dual" => Ok(EmitStyle::Dual),
            "cot" => Ok(EmitStyle::Cot),
            "short-answer" | "short" => Ok(EmitStyle::ShortAnswer),
            other => Err(format!(
                "unknown emit style `{other}` (dual, cot, short-answer)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub prompt: String,
    pub target: String,
}

/// CoT: `question + COT_SUFFIX` → `explanation\nAnswer: answer`.
/// Short answer: `question + SHORT_ANSWER_SUFFIX` → `answer`.
pub fn format_training_example(t: &InstructionTriplet, style: Style) -> TrainingExample {
    match style {
        Style::Cot => TrainingExample {
            prompt: format!("{}{COT_SUFFIX}", t.question),
            target: format!("{}\n{ANSWER_PREFIX}{}", t.explanation, t.answer),
        },
        Style::ShortAnswer => TrainingExample {
            prompt: format!("{}{SHORT_ANSWER_SUFFIX}", t.question),
            target: t.answer.clone(),
        },
    }
}

/// Splits a CoT target on its final `Answer: ` line into (explanation, answer).
pub fn split_cot_target(target: &str) -> Option<(&str, &str)> {
    let idx = target.rfind(&format!("\n{ANSWER_PREFIX}"))?;
    Some((&target[..idx], &target[idx + 1 + ANSWER_PREFIX.len()..]))
}

/// Inputs of one instruction-generation call.
#[derive(Debug, Clone, Copy)]
pub struct InstructionContext<'a> {
    pub code: &'a CodeArtifact,
    pub data: &'a DataContent,
    pub persona: &'a str,
    pub topic: &'a str,
    pub figure_type: &'a str,
}

/// Asks the model for QA triplets given only the code and data (never the
/// image) and parses the answer.
pub fn generate_instructions(
    ctx: InstructionContext<'_>,
    template: &PromptTemplate,
    gateway: &Gateway,
    route: &ModelRoute,
    seed: u64,
) -> Result<(InstructionSet, StageCall), (StageError, Option<StageCall>)> {
    let bindings = Bindings::new()
        .with(Placeholder::Persona, ctx.persona)
        .with(Placeholder::Topic, ctx.topic)
        .with(Placeholder::FigureType, ctx.figure_type)
        .with(Placeholder::Data, ctx.data.json.as_str())
        .with(Placeholder::Code, ctx.code.source.as_str());
    let call = gateway
        .call_template(template, &bindings, route, seed)
        .map_err(|e| (e, None))?;
    match parse::parse_qa_triplets(&call.response.text) {
        Ok(qa) => Ok((
            InstructionSet {
                triplets: qa.triplets,
                source_code_hash: ctx.code.digest(),
                dropped: qa.dropped,
            },
            call,
        )),
        Err(e) => Err((e.into(), Some(call))),
    }
}
