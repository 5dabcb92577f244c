//! Rating prompt templates and rendering.
//!
//! A template carries four placeholders, each exactly once: `{instruction}`,
//! `{input}`, `{response}` and `{K}`. Substitution is single-pass, so braces
//! inside sample text are never re-expanded.
//!
//! When a sample has an empty input and `{input}` sits on a template line of
//! its own (literal text only around it), that whole line is dropped, so a
//! header such as `Input: {input}` never dangles.
//! Templates must end on a non-whitespace literal (the score cue) so the
//! rating digit is the very next token.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::dataset_io::Sample;

pub const MIN_K: u8 = 3;
pub const MAX_K: u8 = 9;

const PLACEHOLDERS: [&str; 4] = ["instruction", "input", "response", "K"];

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("unsupported rating scale K={0}; must be within [{MIN_K}, {MAX_K}] so every score is one token")]
    UnsupportedK(u32),
    #[error("template {index}: placeholder {{{placeholder}}} is missing")]
    PlaceholderMissing { index: usize, placeholder: String },
    #[error("template {index}: placeholder {{{placeholder}}} appears more than once")]
    PlaceholderRepeated { index: usize, placeholder: String },
    #[error("template {index}: must end with a non-whitespace score cue such as \"Score:\"")]
    MissingScoreCue { index: usize },
    #[error("expected {expected} templates, found {found}")]
    CountMismatch { expected: usize, found: usize },
    #[error("cannot read prompt file: {0}")]
    Io(String),
    #[error("prompt file is not a JSON array of strings: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Instruction,
    Input,
    Response,
    Scale,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RatingPrompt {
    pub prompt_id: u8,
    pub template: String,
    segments: Vec<Segment>,
    collapse: Option<InputLine>,
}

/// Byte spans removed around `{input}` when the input is empty: the header
/// text before it on the same template line, and the remainder of the line
/// (newline included) after it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct InputLine {
    before: usize,
    after: usize,
}

impl RatingPrompt {
    pub fn new(prompt_id: u8, template: impl Into<String>) -> Result<Self, PromptError> {
        let template = template.into();
        let index = prompt_id as usize;
        let segments = parse_template(&template);

        for name in PLACEHOLDERS {
            let want = placeholder_segment(name);
            let n = segments.iter().filter(|s| **s == want).count();
            if n == 0 {
                return Err(PromptError::PlaceholderMissing {
                    index,
                    placeholder: name.to_owned(),
                });
            }
            if n > 1 {
                return Err(PromptError::PlaceholderRepeated {
                    index,
                    placeholder: name.to_owned(),
                });
            }
        }
        match segments.last() {
            Some(Segment::Literal(s)) if !s.ends_with(char::is_whitespace) => {}
            _ => return Err(PromptError::MissingScoreCue { index }),
        }
        let collapse = input_line(&segments);
        Ok(RatingPrompt {
            prompt_id,
            template,
            segments,
            collapse,
        })
    }

    /// Renders the completion prompt for one sample on a 1..=k scale.
    pub fn render(&self, sample: &Sample, k: u8) -> String {
        let mut out = String::with_capacity(
            self.template.len() + sample.instruction.len() + sample.input.len() + sample.output.len(),
        );
        let collapse = if sample.input.is_empty() { self.collapse } else { None };
        let mut skip = 0;
        for seg in &self.segments {
            match seg {
                Segment::Literal(lit) => {
                    out.push_str(&lit[skip..]);
                    skip = 0;
                }
                Segment::Instruction => out.push_str(&sample.instruction),
                Segment::Response => out.push_str(&sample.output),
                Segment::Scale => out.push_str(&k.to_string()),
                Segment::Input => match collapse {
                    Some(line) => {
                        out.truncate(out.len() - line.before);
                        skip = line.after;
                    }
                    None => out.push_str(&sample.input),
                },
            }
        }
        out
    }
}

/// The `{input}` line collapses only when it holds nothing but literal text
/// around the placeholder.
fn input_line(segments: &[Segment]) -> Option<InputLine> {
    let at = segments.iter().position(|s| *s == Segment::Input)?;
    let before = match at.checked_sub(1).map(|i| &segments[i]) {
        None => 0,
        Some(Segment::Literal(lit)) => match lit.rfind('\n') {
            Some(nl) => lit.len() - nl - 1,
            None if at == 1 => lit.len(),
            None => return None,
        },
        Some(_) => return None,
    };
    let after = match segments.get(at + 1) {
        Some(Segment::Literal(lit)) => lit.find('\n')? + 1,
        _ => return None,
    };
    Some(InputLine { before, after })
}

fn placeholder_segment(name: &str) -> Segment {
    match name {
        "instruction" => Segment::Instruction,
        "input" => Segment::Input,
        "response" => Segment::Response,
        "K" => Segment::Scale,
        _ => unreachable!("closed placeholder set"),
    }
}

fn parse_template(template: &str) -> Vec<Segment> {
    let mut segments = Vec::new();
    let mut literal = String::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        let hit = PLACEHOLDERS.iter().find(|name| {
            after.starts_with(*name) && after[name.len()..].starts_with('}')
        });
        match hit {
            Some(name) => {
                literal.push_str(&rest[..open]);
                if !literal.is_empty() {
                    segments.push(Segment::Literal(std::mem::take(&mut literal)));
                }
                segments.push(placeholder_segment(name));
                rest = &after[name.len() + 1..];
            }
            None => {
                literal.push_str(&rest[..=open]);
                rest = after;
            }
        }
    }
    literal.push_str(rest);
    if !literal.is_empty() {
        segments.push(Segment::Literal(literal));
    }
    segments
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pub prompts: Vec<RatingPrompt>,
    pub k: u8,
}

impl PromptSet {
    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn templates(&self) -> Vec<&str> {
        self.prompts.iter().map(|p| p.template.as_str()).collect()
    }
}

pub fn check_k(k: u32) -> Result<u8, PromptError> {
    if (MIN_K as u32..=MAX_K as u32).contains(&k) {
        Ok(k as u8)
    } else {
        Err(PromptError::UnsupportedK(k))
    }
}

const DEFAULT_TEMPLATES: [&str; MAX_K as usize] = [
    "Below is an instruction paired with a response. Rate the quality of the response on a scale from 1 (very poor) to {K} (excellent).\n\nInstruction: {instruction}\nInput: {input}\nResponse: {response}\n\nScore:",
    "Please evaluate how well the response completes the given task. Give a single integer rating from 1 (worst) to {K} (best).\n\nTask: {instruction}\nContext: {input}\nAnswer: {response}\n\nRating:",
    "You are reviewing training data for an assistant. Judge the response below on a 1-to-{K} scale, with higher numbers meaning a more helpful, accurate and complete answer.\n\n### Instruction\n{instruction}\n### Input: {input}\n### Response\n{response}\n\nQuality score:",
    "Assess the following instruction and its answer. How good is the answer? Reply with one number between 1 and {K}.\n\nQuestion: {instruction}\nAdditional input: {input}\nProposed answer: {response}\n\nYour score:",
    "Score the reply to the user request on an integer scale of 1 to {K}, where a higher score indicates a higher-quality reply.\n\nRequest: {instruction}\nSupplementary information: {input}\nReply: {response}\n\nFinal score:",
    "Here is a task description followed by a candidate solution. Rate the solution from 1 to {K}, where 1 means unusable and the top score means flawless.\n\nTask description: {instruction}\nTask input: {input}\nCandidate solution: {response}\n\nGrade:",
    "Consider the instruction and the response written for it. On a scale of 1 to {K}, how well does the response follow the instruction?\n\n[Instruction]\n{instruction}\n[Input] {input}\n[Response]\n{response}\n\nAnswer with a number. Score =",
    "Evaluate the response for correctness, relevance and clarity with respect to the instruction. Output a rating between 1 and {K} inclusive.\n\nINSTRUCTION: {instruction}\nINPUT: {input}\nRESPONSE: {response}\n\nRATING:",
    "Rate this instruction-following example. Use the scale 1 to {K} (larger is better) to express how high the quality of the response is.\n\nInstruction text: {instruction}\nInput text: {input}\nResponse text: {response}\n\nThe rating is",
];

/// Built-in paraphrased rating templates; the first `k` of a fixed list.
pub fn default_prompt_set(k: u32) -> Result<PromptSet, PromptError> {
    let k = check_k(k)?;
    let prompts = DEFAULT_TEMPLATES[..k as usize]
        .iter()
        .enumerate()
        .map(|(i, t)| RatingPrompt::new(i as u8, *t))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PromptSet { prompts, k })
}

pub fn prompt_set_from_templates(templates: Vec<String>, k: u32) -> Result<PromptSet, PromptError> {
    let k = check_k(k)?;
    if templates.len() != k as usize {
        return Err(PromptError::CountMismatch {
            expected: k as usize,
            found: templates.len(),
        });
    }
    let prompts = templates
        .into_iter()
        .enumerate()
        .map(|(i, t)| RatingPrompt::new(i as u8, t))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PromptSet { prompts, k })
}

/// Loads a JSON array of exactly `k` template strings.
pub fn load_prompt_set(path: impl AsRef<Path>, k: u32) -> Result<PromptSet, PromptError> {
    let text = fs::read_to_string(path.as_ref())
        .map_err(|e| PromptError::Io(format!("{}: {e}", path.as_ref().display())))?;
    let templates: Vec<String> =
        serde_json::from_str(&text).map_err(|e| PromptError::Malformed(e.to_string()))?;
    prompt_set_from_templates(templates, k)
}
