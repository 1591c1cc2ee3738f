//! Strict parsers for each stage's completion format.
//!
//! Every parser is total: arbitrary input yields either a value or a typed
//! [`ParseError`], never a panic.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::instruction::InstructionTriplet;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("empty output")]
    EmptyOutput,
    #[error("expected {expected} topics, parsed {found}")]
    CountMismatch {
        found: usize,
        expected: usize,
        topics: Vec<String>,
    },
    #[error("no JSON object found")]
    NoObjectFound,
    #[error("malformed JSON payload: {0}")]
    MalformedPayload(String),
    #[error("no fenced code block found")]
    NoCodeBlock,
    #[error("fenced code block is empty")]
    EmptyCodeBlock,
    #[error("{count} fenced blocks and none tagged `{expected}`")]
    MultipleAmbiguousBlocks { count: usize, expected: String },
    #[error("no valid question | explanation | answer record ({dropped} malformed)")]
    ZeroValidTriplets { dropped: usize },
    #[error("no pointing question found")]
    NoQuestion,
}

/// Splits a topic list on `|`. Pieces are trimmed and empty pieces dropped.
///
/// When the count differs from `expected`, the parsed topics are returned
/// inside [`ParseError::CountMismatch`] so the caller can decide to accept
/// them.
pub fn parse_topics(text: &str, expected: usize) -> Result<Vec<String>, ParseError> {
    let topics: Vec<String> = text
        .split('|')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect();
    if topics.is_empty() {
        return Err(ParseError::EmptyOutput);
    }
    if topics.len() != expected {
        return Err(ParseError::CountMismatch {
            found: topics.len(),
            expected,
            topics,
        });
    }
    Ok(topics)
}

/// Materials produced by the data stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataContent {
    /// Parsed top-level object.
    pub payload: Value,
    /// The object's source text exactly as it appeared in the response.
    pub json: String,
    /// The full response.
    pub raw: String,
}

/// Byte ranges of balanced `{ ... }` spans, skipping braces inside JSON
/// string literals. Returns `(start, Some(end_exclusive))` for each candidate
/// and `(start, None)` for an opening brace that never closes.
fn object_spans(text: &str) -> Vec<(usize, Option<usize>)> {
    let bytes = text.as_bytes();
    let mut spans = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] != b'{' {
            i += 1;
            continue;
        }
        let start = i;
        let mut depth = 0usize;
        let mut in_str = false;
        let mut escaped = false;
        let mut end = None;
        let mut j = i;
        while j < bytes.len() {
            let b = bytes[j];
            if in_str {
                if escaped {
                    escaped = false;
                } else if b == b'\\' {
                    escaped = true;
                } else if b == b'"' {
                    in_str = false;
                }
            } else {
                match b {
                    b'"' => in_str = true,
                    b'{' => depth += 1,
                    b'}' => {
                        depth -= 1;
                        if depth == 0 {
                            end = Some(j + 1);
                            break;
                        }
                    }
                    _ => {}
                }
            }
            j += 1;
        }
        spans.push((start, end));
        match end {
            Some(e) => i = e,
            None => break,
        }
    }
    spans
}

/// Extracts and parses the first balanced top-level JSON object in `text`,
/// tolerating prose or code fences around it. Candidates that fail to parse
/// are skipped; no repair is attempted.
pub fn parse_json_payload(text: &str) -> Result<DataContent, ParseError> {
    let spans = object_spans(text);
    if spans.is_empty() {
        return Err(ParseError::NoObjectFound);
    }
    let mut first_err = None;
    for (start, end) in spans {
        let Some(end) = end else {
            first_err.get_or_insert_with(|| "unterminated object".to_string());
            break;
        };
        let slice = &text[start..end];
        match serde_json::from_str::<Value>(slice) {
            Ok(v @ Value::Object(_)) => {
                return Ok(DataContent {
                    payload: v,
                    json: slice.to_string(),
                    raw: text.to_string(),
                })
            }
            Ok(_) => unreachable!("a balanced brace span parses only as an object"),
            Err(e) => {
                first_err.get_or_insert_with(|| e.to_string());
            }
        }
    }
    Err(ParseError::MalformedPayload(
        first_err.unwrap_or_else(|| "unparseable object".into()),
    ))
}

/// A fenced block pulled out of a completion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FencedCode {
    pub source: String,
    /// Tag on the opening fence as received (may be empty).
    pub lang_tag: String,
    /// Set when the block was accepted as the only fence despite a different tag.
    pub tag_mismatch: bool,
}

struct Block {
    tag: String,
    body: String,
}

fn fenced_blocks(text: &str) -> Vec<Block> {
    let mut blocks = Vec::new();
    let mut current: Option<(String, Vec<&str>)> = None;
    for line in text.lines() {
        let trimmed = line.trim();
        match current.as_mut() {
            None => {
                if let Some(rest) = trimmed.strip_prefix("```") {
                    let tag = rest.split_whitespace().next().unwrap_or("").to_string();
                    current = Some((tag, Vec::new()));
                }
            }
            Some((_, lines)) => {
                if trimmed == "```" {
                    let (tag, lines) = current.take().expect("inside a block");
                    blocks.push(Block {
                        tag,
                        body: lines.join("\n"),
                    });
                } else {
                    lines.push(line);
                }
            }
        }
    }
    // An unterminated fence runs to the end of the text.
    if let Some((tag, lines)) = current {
        blocks.push(Block {
            tag,
            body: lines.join("\n"),
        });
    }
    blocks
}

/// Returns the first fenced block tagged `expected_tag` (case-insensitive).
/// If no block matches but exactly one block exists, that block is returned
/// with `tag_mismatch` set. Only the fence lines are stripped.
pub fn extract_code_block(text: &str, expected_tag: &str) -> Result<FencedCode, ParseError> {
    let blocks = fenced_blocks(text);
    let chosen = match blocks
        .iter()
        .find(|b| b.tag.eq_ignore_ascii_case(expected_tag))
    {
        Some(b) => FencedCode {
            source: b.body.clone(),
            lang_tag: b.tag.clone(),
            tag_mismatch: false,
        },
        None => match blocks.as_slice() {
            [] => return Err(ParseError::NoCodeBlock),
            [only] => FencedCode {
                source: only.body.clone(),
                lang_tag: only.tag.clone(),
                tag_mismatch: true,
            },
            many => {
                return Err(ParseError::MultipleAmbiguousBlocks {
                    count: many.len(),
                    expected: expected_tag.to_string(),
                })
            }
        },
    };
    if chosen.source.trim().is_empty() {
        return Err(ParseError::EmptyCodeBlock);
    }
    Ok(chosen)
}

/// Parsed instruction-stage output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QaParse {
    pub triplets: Vec<InstructionTriplet>,
    /// Records that did not split into exactly three non-empty fields.
    pub dropped: usize,
}

/// Parses `question | explanation | answer` records separated by blank lines.
pub fn parse_qa_triplets(text: &str) -> Result<QaParse, ParseError> {
    let mut records: Vec<Vec<&str>> = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !current.is_empty() {
                records.push(std::mem::take(&mut current));
            }
        } else {
            current.push(line);
        }
    }
    if !current.is_empty() {
        records.push(current);
    }

    let mut triplets = Vec::new();
    let mut dropped = 0;
    for record in records {
        let joined = record.join("\n");
        let fields: Vec<&str> = joined.split('|').map(str::trim).collect();
        match fields.as_slice() {
            [q, e, a] if !q.is_empty() && !e.is_empty() && !a.is_empty() => {
                triplets.push(InstructionTriplet {
                    question: q.to_string(),
                    explanation: e.to_string(),
                    answer: a.to_string(),
                })
            }
            _ => dropped += 1,
        }
    }
    if triplets.is_empty() {
        return Err(ParseError::ZeroValidTriplets { dropped });
    }
    Ok(QaParse { triplets, dropped })
}

/// Formats triplets in the instruction-stage wire format (inverse of
/// [`parse_qa_triplets`] for fields without `|` or blank lines).
pub fn format_qa_triplets(triplets: &[InstructionTriplet]) -> String {
    triplets
        .iter()
        .map(|t| format!("{} | {} | {}", t.question, t.explanation, t.answer))
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Splits a point-edit completion into its question and the fenced source.
///
/// The question is taken from the first line starting with `Question:`
/// (case-insensitive) outside the code block, or else the first non-empty
/// line before the fence.
pub fn parse_point_edit(
    text: &str,
    expected_tag: &str,
) -> Result<(String, FencedCode), ParseError> {
    let code = extract_code_block(text, expected_tag)?;
    let before_fence = text.split("```").next().unwrap_or("");
    let mut fallback = None;
    let mut labelled = None;
    for line in before_fence.lines() {
        let l = line.trim();
        if l.is_empty() {
            continue;
        }
        if l.len() >= 9 && l.is_char_boundary(9) && l[..9].eq_ignore_ascii_case("question:") {
            labelled = Some(l[9..].trim().to_string());
            break;
        }
        fallback.get_or_insert_with(|| l.to_string());
    }
    let question = labelled
        .or(fallback)
        .filter(|q| !q.is_empty())
        .ok_or(ParseError::NoQuestion)?;
    Ok((question, code))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn topics_split_on_pipes() {
        assert_eq!(
            parse_topics("topic1 | topic2 | topic3", 3).unwrap(),
            vec!["topic1", "topic2", "topic3"]
        );
        assert_eq!(parse_topics("a", 1).unwrap(), vec!["a"]);
        assert_eq!(parse_topics(" a || b |  ", 2).unwrap(), vec!["a", "b"]);
    }

    #[test]
    fn topic_count_mismatch_carries_topics() {
        match parse_topics("a | b", 3).unwrap_err() {
            ParseError::CountMismatch {
                found,
                expected,
                topics,
            } => {
                assert_eq!((found, expected), (2, 3));
                assert_eq!(topics, vec!["a", "b"]);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(
            parse_topics(" | | ", 2).unwrap_err(),
            ParseError::EmptyOutput
        );
    }

    #[test]
    fn json_in_fence() {
        let d = parse_json_payload("```json\n{\"name\":\"Acme\"}\n```").unwrap();
        assert_eq!(d.payload["name"], "Acme");
        assert_eq!(d.json, "{\"name\":\"Acme\"}");
    }

    #[test]
    fn json_wrapped_in_prose() {
        let d = parse_json_payload("Here you go: {\"a\":1}").unwrap();
        assert_eq!(d.payload, serde_json::json!({"a": 1}));
        assert_eq!(d.raw, "Here you go: {\"a\":1}");
    }

    #[test]
    fn json_braces_inside_strings() {
        let d = parse_json_payload(r#"x {"s": "a } b { \" c", "n": {"m": 2}} y {"z":3}"#).unwrap();
        assert_eq!(d.payload["n"]["m"], 2);
        assert_eq!(d.payload["s"], "a } b { \" c");
    }

    #[test]
    fn json_skips_unparseable_prose_braces() {
        let d = parse_json_payload("Use {curly} braces: {\"ok\": true}").unwrap();
        assert_eq!(d.payload["ok"], true);
    }

    #[test]
    fn json_errors() {
        assert_eq!(
            parse_json_payload("no braces here").unwrap_err(),
            ParseError::NoObjectFound
        );
        assert!(matches!(
            parse_json_payload("{\"a\": 1,}").unwrap_err(),
            ParseError::MalformedPayload(_)
        ));
        assert!(matches!(
            parse_json_payload("{\"a\": {\"b\": 1}").unwrap_err(),
            ParseError::MalformedPayload(_)
        ));
    }

    #[test]
    fn code_block_with_matching_tag() {
        let c = extract_code_block("```html\n<html></html>\n```", "html").unwrap();
        assert_eq!(c.source, "<html></html>");
        assert_eq!(c.lang_tag, "html");
        assert!(!c.tag_mismatch);
    }

    #[test]
    fn code_block_tag_is_case_insensitive_and_first_match_wins() {
        let text = "intro\n```css\nbody{}\n```\n```HTML\n<p>1</p>\n```\n```html\n<p>2</p>\n```";
        let c = extract_code_block(text, "html").unwrap();
        assert_eq!(c.source, "<p>1</p>");
        assert_eq!(c.lang_tag, "HTML");
    }

    #[test]
    fn single_block_with_other_tag_is_accepted_with_warning() {
        let c = extract_code_block("```\ndigraph {a->b}\n```", "dot").unwrap();
        assert!(c.tag_mismatch);
        assert_eq!(c.source, "digraph {a->b}");
    }

    #[test]
    fn code_block_errors() {
        assert_eq!(
            extract_code_block("<html></html>", "html").unwrap_err(),
            ParseError::NoCodeBlock
        );
        assert_eq!(
            extract_code_block("```css\na{}\n```\n```js\nx()\n```", "html").unwrap_err(),
            ParseError::MultipleAmbiguousBlocks {
                count: 2,
                expected: "html".into()
            }
        );
        assert_eq!(
            extract_code_block("```html\n\n```", "html").unwrap_err(),
            ParseError::EmptyCodeBlock
        );
    }

    #[test]
    fn unterminated_fence_runs_to_end() {
        let c = extract_code_block("```python\nimport x\nprint(1)", "python").unwrap();
        assert_eq!(c.source, "import x\nprint(1)");
    }

    #[test]
    fn qa_example_line() {
        let line = "what is the total revenue? | The total revenue is the sum of all revenue sources in the document, which is $2000 + $3000 + $5000 = $10000. | $10000";
        let p = parse_qa_triplets(line).unwrap();
        assert_eq!(p.triplets.len(), 1);
        assert_eq!(p.triplets[0].question, "what is the total revenue?");
        assert_eq!(
            p.triplets[0].explanation,
            "The total revenue is the sum of all revenue sources in the document, which is $2000 + $3000 + $5000 = $10000."
        );
        assert_eq!(p.triplets[0].answer, "$10000");
    }

    #[test]
    fn qa_records_split_on_blank_lines() {
        let p = parse_qa_triplets("q1 | e1 | a1\n\n   \nq2 | e2\ncontinued | a2\n").unwrap();
        assert_eq!(p.triplets.len(), 2);
        assert_eq!(p.triplets[1].explanation, "e2\ncontinued");
        assert_eq!(p.dropped, 0);
    }

    #[test]
    fn qa_malformed_records_are_dropped() {
        let p = parse_qa_triplets("q1 | e1 | a1\n\nq2 | a | b | c\n\nq3 | | a3").unwrap();
        assert_eq!(p.triplets.len(), 1);
        assert_eq!(p.dropped, 2);
        assert_eq!(
            parse_qa_triplets("only one pipe | here").unwrap_err(),
            ParseError::ZeroValidTriplets { dropped: 1 }
        );
        assert_eq!(
            parse_qa_triplets("").unwrap_err(),
            ParseError::ZeroValidTriplets { dropped: 0 }
        );
    }

    #[test]
    fn point_edit_question_and_code() {
        let (q, c) = parse_point_edit(
            "Question: Point to the Checkout button\n```html\n<button>Checkout</button>\n```",
            "html",
        )
        .unwrap();
        assert_eq!(q, "Point to the Checkout button");
        assert_eq!(c.source, "<button>Checkout</button>");
        let (q, _) = parse_point_edit("Point to the logo\n\n```html\n<img>\n```", "html").unwrap();
        assert_eq!(q, "Point to the logo");
        assert_eq!(
            parse_point_edit("```html\n<img>\n```", "html").unwrap_err(),
            ParseError::NoQuestion
        );
        assert_eq!(
            parse_point_edit("Question: where?\n<img>", "html").unwrap_err(),
            ParseError::NoCodeBlock
        );
    }

    fn field() -> impl Strategy<Value = String> {
        "[A-Za-z0-9$?.,+=' ]{0,30}"
            .prop_map(|s| s.trim().to_string())
            .prop_filter("non-empty", |s| !s.is_empty())
    }

    proptest! {
        #[test]
        fn qa_format_round_trips(rows in prop::collection::vec((field(), field(), field()), 1..8)) {
            let triplets: Vec<InstructionTriplet> = rows
                .into_iter()
                .map(|(question, explanation, answer)| InstructionTriplet { question, explanation, answer })
                .collect();
            let parsed = parse_qa_triplets(&format_qa_triplets(&triplets)).unwrap();
            prop_assert_eq!(parsed.dropped, 0);
            prop_assert_eq!(parsed.triplets, triplets);
        }

        #[test]
        fn parsers_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
            let s = String::from_utf8_lossy(&bytes);
            let _ = parse_topics(&s, 3);
            let _ = parse_json_payload(&s);
            let _ = extract_code_block(&s, "html");
            let _ = parse_qa_triplets(&s);
            let _ = parse_point_edit(&s, "html");
        }
    }
}
