//! Prompt assembly for each task: retrieved history slots followed by the
//! task instruction and the user's input.

use crate::corpus::{Document, Sample, Task};
use crate::error::{Error, Result};

/// Tag vocabulary offered to the model for movie tagging.
pub const LAMP2_TAGS: [&str; 15] = [
    "sci-fi",
    "based on a book",
    "comedy",
    "action",
    "twist ending",
    "dystopia",
    "dark comedy",
    "classic",
    "psychology",
    "fantasy",
    "romance",
    "thought-provoking",
    "social commentary",
    "violence",
    "true story",
];

const PREAMBLE: &str = "The historical profiles are as follows:";
const PROFILE_LEAD: &str = "Based on the historical profiles provided, ";
const TWEET_LEAD: &str = "Based on the style pattern of the historical tweets provided, ";

/// Fields shown for each history document, in order, with the separator
/// placed after each field value. The first field falls back to the
/// document text when the document has no such aux entry.
fn history_format(task: Task) -> &'static [(&'static str, &'static str)] {
    match task {
        Task::Lamp1 => &[("title", " "), ("abstract", "")],
        Task::Lamp2 => &[("description", "; "), ("tag", "")],
        Task::Lamp3 => &[("review", " "), ("score", "")],
        Task::Lamp4 => &[("text", " "), ("title", "")],
        Task::Lamp5 => &[("abstract", " "), ("title", "")],
        Task::Lamp7 => &[("tweet", "")],
        Task::Synthetic => &[("document", "")],
    }
}

/// Renders one history document in the task's profile format.
pub fn format_history(task: Task, doc: &Document) -> Result<String> {
    let mut out = String::new();
    for (i, (field, sep)) in history_format(task).iter().enumerate() {
        let value = match doc.aux.get(*field) {
            Some(v) => v.as_str(),
            None if i == 0 => doc.text.as_str(),
            None => {
                return Err(Error::contract(format!(
                    "{task} history document `{}` has no `{field}` field",
                    doc.id
                )))
            }
        };
        out.push_str(&format!("\"{field}\": {value}{sep}"));
    }
    Ok(out)
}

fn field<'a>(sample: &'a Sample, name: &str) -> Result<&'a str> {
    sample
        .fields
        .get(name)
        .map(String::as_str)
        .ok_or_else(|| Error::contract(format!("sample `{}` has no `{name}` field", sample.id)))
}

/// The sample's main input: its own field when present, else the query.
fn input<'a>(sample: &'a Sample, name: &str) -> &'a str {
    sample
        .fields
        .get(name)
        .map_or(sample.query.as_str(), String::as_str)
}

/// `(lead-in, instruction, input)`: with history the prompt reads
/// `lead-in + instruction`, without it the instruction alone, capitalized.
fn instruction(sample: &Sample) -> Result<(&'static str, String, String)> {
    Ok(match sample.task {
        Task::Lamp1 => (
            PROFILE_LEAD,
            format!(
                "please choose one of the following two references that is more relevant to the user's input title: [1] {}; [2] {}. Please just answer with \"[1]\" or \"[2]\" without explanation.",
                field(sample, "reference_1")?,
                field(sample, "reference_2")?
            ),
            format!("\"title\": {}.", input(sample, "title")),
        ),
        Task::Lamp2 => {
            let tags = match sample.fields.get("tags") {
                Some(t) => t.clone(),
                None => LAMP2_TAGS.join(", "),
            };
            (
                PROFILE_LEAD,
                format!(
                    "please select the tag from [{tags}] that is most relevant to the user's input description. Please just answer with the tag name without explanation."
                ),
                format!("\"description\": {}; \"tag\":", input(sample, "description")),
            )
        }
        Task::Lamp3 => (
            PROFILE_LEAD,
            "what is the score of the following review on a scale of 1 to 5? just answer with 1, 2, 3, 4, or 5 without further explanation.".to_string(),
            format!("\"review\": {}; \"score\":", input(sample, "review")),
        ),
        Task::Lamp4 => (
            PROFILE_LEAD,
            "please generate a title for the given user's input text. Please generate it in the following format: {\"title\": \"generated title\"} without explanation, and use only English.".to_string(),
            format!("\"text\": {}; \"title\":", input(sample, "text")),
        ),
        Task::Lamp5 => (
            PROFILE_LEAD,
            "please generate a title for the given user's input abstract. Please generate it in the following format: {\"title\": \"generated title\"} without explanation, and use only English.".to_string(),
            format!("\"abstract\": {}; \"title\":", input(sample, "abstract")),
        ),
        Task::Lamp7 => (
            TWEET_LEAD,
            "please paraphrase the user's input tweet without any explanation before or after it. Please generate it in the following format: {\"tweet\": \"generated tweet\"} without explanation, and use only English.".to_string(),
            format!("\"tweet\": {}.", input(sample, "tweet")),
        ),
        Task::Synthetic => (
            PROFILE_LEAD,
            "please answer the user's input query without explanation.".to_string(),
            format!("\"query\": {}.", input(sample, "query")),
        ),
    })
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Fills the task template with `docs` as history slots 1..k in the given
/// order. With no documents the zero-shot form is produced: no profile
/// preamble and no reference to it in the instruction.
pub fn build_prompt(sample: &Sample, docs: &[&Document]) -> Result<String> {
    let (lead, instr, input) = instruction(sample)?;
    if docs.is_empty() {
        return Ok(format!("{} {input}", capitalize(&instr)));
    }
    let history = docs
        .iter()
        .map(|d| format_history(sample.task, d))
        .collect::<Result<Vec<_>>>()?
        .join(" ");
    Ok(format!("{PREAMBLE} {history}. {lead}{instr} {input}"))
}
