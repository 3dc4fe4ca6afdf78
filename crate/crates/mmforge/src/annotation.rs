//! Prompt construction for the caption/VQA backends and parsing of their
//! replies into validated annotation records.
//!
//! The VQA wire format is a rigid line protocol so replies stay machine
//! checkable: repeated blocks of `Q: <question>\nA: <answer>\n`, UTF-8, no
//! blank lines inside a block.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coco::{CountLabel, ImageRecord};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnnotationError {
    #[error("{field} must be non-empty")]
    EmptyField { field: &'static str },
    #[error("template body references placeholder {{{name}}} with no value")]
    UnresolvedPlaceholder { name: String },
    #[error("template body uses {{{name}}} which is not in the declared placeholder set")]
    UndeclaredPlaceholder { name: String },
    #[error("caption is for image {caption_image} but prompt is for image {image}")]
    MismatchedImage { image: u64, caption_image: u64 },
    #[error("expected exactly 3 question-answer pairs, parsed {found}")]
    WrongPairCount { found: usize },
    #[error("line {line:?} does not follow the Q:/A: wire format")]
    MalformedPair { line: String },
}

/// Appended when a backend returned the wrong number of pairs and the stage
/// is retried once.
pub const VQA_RETRY_REMINDER: &str =
    "\nReply with exactly three question-answer pairs in the Q:/A: format, nothing else.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionKind {
    FuturePlausible,
}

/// A generated caption describing a plausible future scene for one image.
/// The text is always a single logical paragraph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CaptionRepr", into = "CaptionRepr")]
pub struct CaptionRecord {
    image_id: u64,
    text: String,
    kind: CaptionKind,
}

#[derive(Serialize, Deserialize)]
struct CaptionRepr {
    image_id: u64,
    text: String,
    kind: CaptionKind,
}

impl TryFrom<CaptionRepr> for CaptionRecord {
    type Error = AnnotationError;

    fn try_from(repr: CaptionRepr) -> Result<Self, AnnotationError> {
        CaptionRecord::new(repr.image_id, &repr.text)
    }
}

impl From<CaptionRecord> for CaptionRepr {
    fn from(record: CaptionRecord) -> CaptionRepr {
        CaptionRepr {
            image_id: record.image_id,
            text: record.text,
            kind: record.kind,
        }
    }
}

impl CaptionRecord {
    /// Trims and folds any blank-line separators into single spaces, so the
    /// stored text is one paragraph.
    pub fn new(image_id: u64, text: &str) -> Result<Self, AnnotationError> {
        let text = collapse_paragraphs(text);
        if text.is_empty() {
            return Err(AnnotationError::EmptyField { field: "caption text" });
        }
        Ok(CaptionRecord {
            image_id,
            text,
            kind: CaptionKind::FuturePlausible,
        })
    }

    pub fn image_id(&self) -> u64 {
        self.image_id
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn kind(&self) -> CaptionKind {
        self.kind
    }
}

fn collapse_paragraphs(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for part in text.split_whitespace() {
        if pending_space {
            out.push(' ');
        }
        out.push_str(part);
        pending_space = true;
    }
    out
}

/// One question-answer pair. The question always ends in `?`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VqaPairRepr", into = "VqaPairRepr")]
pub struct VqaPair {
    question: String,
    answer: String,
}

#[derive(Serialize, Deserialize)]
struct VqaPairRepr {
    question: String,
    answer: String,
}

impl TryFrom<VqaPairRepr> for VqaPair {
    type Error = AnnotationError;

    fn try_from(repr: VqaPairRepr) -> Result<Self, AnnotationError> {
        VqaPair::new(&repr.question, &repr.answer)
    }
}

impl From<VqaPair> for VqaPairRepr {
    fn from(pair: VqaPair) -> VqaPairRepr {
        VqaPairRepr {
            question: pair.question,
            answer: pair.answer,
        }
    }
}

impl VqaPair {
    /// Trims both sides, folds internal line breaks (the wire protocol is
    /// line oriented), and appends the terminal `?` when the backend left it
    /// off.
    pub fn new(question: &str, answer: &str) -> Result<Self, AnnotationError> {
        let mut question = collapse_paragraphs(question);
        let answer = collapse_paragraphs(answer);
        if question.is_empty() {
            return Err(AnnotationError::EmptyField { field: "question" });
        }
        if answer.is_empty() {
            return Err(AnnotationError::EmptyField { field: "answer" });
        }
        if !question.ends_with('?') {
            question.push('?');
        }
        Ok(VqaPair { question, answer })
    }

    pub fn question(&self) -> &str {
        &self.question
    }

    pub fn answer(&self) -> &str {
        &self.answer
    }
}

/// Exactly three question-answer pairs tied to one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VqaSetRepr", into = "VqaSetRepr")]
pub struct VqaSet {
    image_id: u64,
    pairs: Vec<VqaPair>,
}

#[derive(Serialize, Deserialize)]
struct VqaSetRepr {
    image_id: u64,
    pairs: Vec<VqaPair>,
}

impl TryFrom<VqaSetRepr> for VqaSet {
    type Error = AnnotationError;

    fn try_from(repr: VqaSetRepr) -> Result<Self, AnnotationError> {
        VqaSet::new(repr.image_id, repr.pairs)
    }
}

impl From<VqaSet> for VqaSetRepr {
    fn from(set: VqaSet) -> VqaSetRepr {
        VqaSetRepr {
            image_id: set.image_id,
            pairs: set.pairs,
        }
    }
}

impl VqaSet {
    pub fn new(image_id: u64, pairs: Vec<VqaPair>) -> Result<Self, AnnotationError> {
        if pairs.len() != 3 {
            return Err(AnnotationError::WrongPairCount { found: pairs.len() });
        }
        Ok(VqaSet { image_id, pairs })
    }

    pub fn image_id(&self) -> u64 {
        self.image_id
    }

    pub fn pairs(&self) -> &[VqaPair] {
        &self.pairs
    }
}

/// A prompt body with `{placeholder}` slots. Every placeholder used in the
/// body must belong to the declared set.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    name: String,
    body: String,
    placeholders: BTreeSet<String>,
}

impl PromptTemplate {
    pub fn new(
        name: &str,
        body: &str,
        declared: &[&str],
    ) -> Result<Self, AnnotationError> {
        let placeholders: BTreeSet<String> = declared.iter().map(|s| s.to_string()).collect();
        for used in scan_placeholders(body) {
            if !placeholders.contains(&used) {
                return Err(AnnotationError::UndeclaredPlaceholder { name: used });
            }
        }
        Ok(PromptTemplate {
            name: name.to_string(),
            body: body.to_string(),
            placeholders,
        })
    }

    /// Load a template from a plain-text file. The placeholders found in the
    /// body form the declared set.
    pub fn from_file(name: &str, path: &Path) -> std::io::Result<Self> {
        let body = std::fs::read_to_string(path)?;
        let placeholders = scan_placeholders(&body).into_iter().collect();
        Ok(PromptTemplate {
            name: name.to_string(),
            body,
            placeholders,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    /// Substitute placeholder values into the body. Any placeholder without a
    /// value is an error.
    pub fn render(&self, values: &BTreeMap<&str, String>) -> Result<String, AnnotationError> {
        let mut out = String::with_capacity(self.body.len());
        let mut rest = self.body.as_str();
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            match after.find('}') {
                Some(close) if is_placeholder_name(&after[..close]) => {
                    let name = &after[..close];
                    match values.get(name) {
                        Some(value) => out.push_str(value),
                        None => {
                            return Err(AnnotationError::UnresolvedPlaceholder {
                                name: name.to_string(),
                            })
                        }
                    }
                    rest = &after[close + 1..];
                }
                _ => {
                    // A bare brace that opens no placeholder is literal text.
                    out.push('{');
                    rest = after;
                }
            }
        }
        out.push_str(rest);
        Ok(out)
    }
}

fn is_placeholder_name(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

fn scan_placeholders(body: &str) -> Vec<String> {
    let mut found = Vec::new();
    let mut rest = body;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if is_placeholder_name(&after[..close]) => {
                found.push(after[..close].to_string());
                rest = &after[close + 1..];
            }
            _ => rest = after,
        }
    }
    found
}

const DEFAULT_CAPTION_TEMPLATE: &str = "You are looking at the image {file_name}. \
Visible object categories: {categories}.\n\
Describe in one vivid paragraph a plausible future scene that could unfold moments \
after this image was taken. Stay grounded in the visible objects and layout.";

const DEFAULT_VQA_TEMPLATE: &str = "Image: {file_name}\nCaption: {caption}\n\
Using both the image and the caption, write exactly three question-answer pairs \
about the visual content.\nReply with exactly three blocks in this format and \
nothing else:\nQ: <question>\nA: <answer>";

/// Builds backend prompts from templates. All builders are pure: fixed
/// inputs give byte-identical prompts.
#[derive(Debug, Clone)]
pub struct PromptBuilder {
    caption_template: PromptTemplate,
    vqa_template: PromptTemplate,
}

impl Default for PromptBuilder {
    fn default() -> Self {
        PromptBuilder {
            caption_template: PromptTemplate::new(
                "caption_default",
                DEFAULT_CAPTION_TEMPLATE,
                &["file_name", "categories"],
            )
            .expect("default caption template is well-formed"),
            vqa_template: PromptTemplate::new(
                "vqa_default",
                DEFAULT_VQA_TEMPLATE,
                &["file_name", "caption"],
            )
            .expect("default vqa template is well-formed"),
        }
    }
}

impl PromptBuilder {
    pub fn with_templates(caption_template: PromptTemplate, vqa_template: PromptTemplate) -> Self {
        PromptBuilder {
            caption_template,
            vqa_template,
        }
    }

    /// The prompt instructing the backend to caption a plausible future scene.
    pub fn build_caption_prompt(
        &self,
        image: &ImageRecord,
        categories: &[String],
    ) -> Result<String, AnnotationError> {
        let categories = if categories.is_empty() {
            "none annotated".to_string()
        } else {
            categories.join(", ")
        };
        let values = BTreeMap::from([
            ("file_name", image.file_name.clone()),
            ("categories", categories),
        ]);
        self.caption_template.render(&values)
    }

    /// The prompt requesting exactly three Q/A pairs, conditioned on the
    /// image and its caption.
    pub fn build_vqa_prompt(
        &self,
        image: &ImageRecord,
        caption: &CaptionRecord,
    ) -> Result<String, AnnotationError> {
        if caption.image_id() != image.id {
            return Err(AnnotationError::MismatchedImage {
                image: image.id,
                caption_image: caption.image_id(),
            });
        }
        let values = BTreeMap::from([
            ("file_name", image.file_name.clone()),
            ("caption", caption.text().to_string()),
        ]);
        self.vqa_template.render(&values)
    }
}

/// Render pairs in the wire format: repeated `Q: <question>\nA: <answer>\n`
/// blocks.
pub fn render_vqa_wire(pairs: &[VqaPair]) -> String {
    let mut out = String::new();
    for pair in pairs {
        writeln!(out, "Q: {}", pair.question()).expect("string write");
        writeln!(out, "A: {}", pair.answer()).expect("string write");
    }
    out
}

/// Parse wire-format text into pairs, however many there are.
pub fn parse_vqa_pairs(text: &str) -> Result<Vec<VqaPair>, AnnotationError> {
    let mut pairs = Vec::new();
    let mut pending_question: Option<&str> = None;
    for line in text.lines() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        match (trimmed.strip_prefix("Q:"), trimmed.strip_prefix("A:")) {
            (Some(question), _) => {
                if pending_question.is_some() {
                    return Err(AnnotationError::MalformedPair {
                        line: trimmed.to_string(),
                    });
                }
                pending_question = Some(question);
            }
            (_, Some(answer)) => match pending_question.take() {
                Some(question) => {
                    let pair = VqaPair::new(question, answer).map_err(|_| {
                        AnnotationError::MalformedPair {
                            line: trimmed.to_string(),
                        }
                    })?;
                    pairs.push(pair);
                }
                None => {
                    return Err(AnnotationError::MalformedPair {
                        line: trimmed.to_string(),
                    })
                }
            },
            _ => {
                return Err(AnnotationError::MalformedPair {
                    line: trimmed.to_string(),
                })
            }
        }
    }
    if let Some(question) = pending_question {
        return Err(AnnotationError::MalformedPair {
            line: format!("Q:{question}"),
        });
    }
    Ok(pairs)
}

/// Parse a backend reply into a validated three-pair set.
pub fn parse_vqa_response(image_id: u64, text: &str) -> Result<VqaSet, AnnotationError> {
    let pairs = parse_vqa_pairs(text)?;
    VqaSet::new(image_id, pairs)
}

/// Turn a count label into counting supervision: one pair per category in
/// ascending name order, then the total.
pub fn counts_to_qa(label: &CountLabel) -> Vec<VqaPair> {
    let mut pairs = Vec::with_capacity(label.per_category.len() + 1);
    for (name, count) in &label.per_category {
        pairs.push(
            VqaPair::new(&format!("How many {name} are in the video?"), &count.to_string())
                .expect("templated counting pair is well-formed"),
        );
    }
    pairs.push(
        VqaPair::new(
            "How many objects are in the video in total?",
            &label.total.to_string(),
        )
        .expect("templated total pair is well-formed"),
    );
    pairs
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn image() -> ImageRecord {
        ImageRecord {
            id: 123,
            file_name: "000123.jpg".into(),
            width: 640,
            height: 480,
        }
    }

    #[test]
    fn caption_prompt_mentions_image_and_instruction() {
        let builder = PromptBuilder::default();
        let prompt = builder
            .build_caption_prompt(&image(), &["dog".to_string()])
            .unwrap();
        assert!(prompt.contains("000123.jpg"));
        assert!(prompt.contains("plausible future scene"));
        assert!(prompt.contains("dog"));
    }

    #[test]
    fn caption_prompt_is_deterministic() {
        let builder = PromptBuilder::default();
        let a = builder.build_caption_prompt(&image(), &["dog".to_string()]).unwrap();
        let b = builder.build_caption_prompt(&image(), &["dog".to_string()]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn caption_prompt_with_missing_placeholder_fails() {
        let template = PromptTemplate::new(
            "custom",
            "Describe {file_name} with {missing}.",
            &["file_name", "categories", "missing"],
        )
        .unwrap();
        let builder = PromptBuilder::with_templates(
            template,
            PromptTemplate::new("vqa", DEFAULT_VQA_TEMPLATE, &["file_name", "caption"]).unwrap(),
        );
        let err = builder
            .build_caption_prompt(&image(), &["dog".to_string()])
            .unwrap_err();
        assert_eq!(err, AnnotationError::UnresolvedPlaceholder { name: "missing".into() });
    }

    #[test]
    fn template_rejects_undeclared_placeholder() {
        let err = PromptTemplate::new("bad", "Hello {who}", &["file_name"]).unwrap_err();
        assert_eq!(err, AnnotationError::UndeclaredPlaceholder { name: "who".into() });
    }

    #[test]
    fn vqa_prompt_embeds_caption_verbatim() {
        let builder = PromptBuilder::default();
        let caption = CaptionRecord::new(123, "A dog chases a ball across the park.").unwrap();
        let prompt = builder.build_vqa_prompt(&image(), &caption).unwrap();
        assert!(prompt.contains("A dog chases a ball across the park."));
    }

    #[test]
    fn vqa_prompt_rejects_mismatched_image() {
        let builder = PromptBuilder::default();
        let caption = CaptionRecord::new(999, "A dog.").unwrap();
        let err = builder.build_vqa_prompt(&image(), &caption).unwrap_err();
        assert_eq!(err, AnnotationError::MismatchedImage { image: 123, caption_image: 999 });
    }

    #[test]
    fn vqa_prompt_is_deterministic() {
        let builder = PromptBuilder::default();
        let caption = CaptionRecord::new(123, "A dog.").unwrap();
        let a = builder.build_vqa_prompt(&image(), &caption).unwrap();
        let b = builder.build_vqa_prompt(&image(), &caption).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn parse_three_pair_reply() {
        let reply = "Q: How many dogs?\nA: two\nQ: Where is it?\nA: park\nQ: What color?\nA: brown";
        let set = parse_vqa_response(1, reply).unwrap();
        assert_eq!(set.pairs().len(), 3);
        assert_eq!(set.pairs()[0].question(), "How many dogs?");
        assert_eq!(set.pairs()[2].answer(), "brown");
    }

    #[test]
    fn two_pairs_is_wrong_pair_count() {
        let reply = "Q: How many dogs?\nA: two\nQ: Where?\nA: park";
        let err = parse_vqa_response(1, reply).unwrap_err();
        assert_eq!(err, AnnotationError::WrongPairCount { found: 2 });
    }

    #[test]
    fn line_without_prefix_is_malformed() {
        let reply = "How many dogs\nA: two";
        let err = parse_vqa_response(1, reply).unwrap_err();
        assert!(matches!(err, AnnotationError::MalformedPair { .. }));
    }

    #[test]
    fn dangling_question_is_malformed() {
        let err = parse_vqa_pairs("Q: one?\nA: yes\nQ: two?").unwrap_err();
        assert!(matches!(err, AnnotationError::MalformedPair { .. }));
    }

    #[test]
    fn question_gains_terminal_question_mark() {
        let pair = VqaPair::new("How many dogs", "two").unwrap();
        assert_eq!(pair.question(), "How many dogs?");
    }

    #[test]
    fn counts_to_qa_orders_categories_then_total() {
        let label = CountLabel {
            image_id: 1,
            per_category: BTreeMap::from([("dog".to_string(), 2), ("cat".to_string(), 1)]),
            total: 3,
        };
        let pairs = counts_to_qa(&label);
        assert_eq!(pairs.len(), 3);
        assert_eq!(pairs[0].question(), "How many cat are in the video?");
        assert_eq!(pairs[0].answer(), "1");
        assert_eq!(pairs[1].answer(), "2");
        assert_eq!(pairs[2].question(), "How many objects are in the video in total?");
        assert_eq!(pairs[2].answer(), "3");
    }

    #[test]
    fn counts_to_qa_empty_label() {
        let label = CountLabel {
            image_id: 1,
            per_category: BTreeMap::new(),
            total: 0,
        };
        let pairs = counts_to_qa(&label);
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].answer(), "0");
    }

    #[test]
    fn counts_to_qa_single_category() {
        let label = CountLabel {
            image_id: 1,
            per_category: BTreeMap::from([("car".to_string(), 7)]),
            total: 7,
        };
        let pairs = counts_to_qa(&label);
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].answer(), "7");
        assert_eq!(pairs[1].answer(), "7");
    }

    #[test]
    fn counts_to_qa_reaggregates() {
        let label = CountLabel {
            image_id: 9,
            per_category: BTreeMap::from([
                ("bird".to_string(), 4),
                ("kite".to_string(), 2),
                ("person".to_string(), 5),
            ]),
            total: 11,
        };
        let pairs = counts_to_qa(&label);
        assert_eq!(pairs.len(), label.per_category.len() + 1);
        let sum: u64 = pairs[..pairs.len() - 1]
            .iter()
            .map(|p| p.answer().parse::<u64>().unwrap())
            .sum();
        assert_eq!(sum, label.total);
        assert_eq!(pairs.last().unwrap().answer(), "11");
    }

    #[test]
    fn caption_folds_blank_lines() {
        let record = CaptionRecord::new(1, "First part.\n\nSecond part.\n").unwrap();
        assert_eq!(record.text(), "First part. Second part.");
    }

    proptest! {
        #[test]
        fn wire_roundtrip(
            contents in proptest::collection::vec(("[ -~]{1,40}", "[ -~]{1,40}"), 3)
        ) {
            let pairs: Vec<VqaPair> = contents
                .iter()
                .filter_map(|(q, a)| VqaPair::new(q, a).ok())
                .collect();
            prop_assume!(pairs.len() == 3);
            let set = VqaSet::new(7, pairs).unwrap();
            let wire = render_vqa_wire(set.pairs());
            let parsed = parse_vqa_response(7, &wire).unwrap();
            prop_assert_eq!(parsed, set);
        }
    }
}
