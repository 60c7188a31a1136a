//! Story-plan data model and its JSON interchange format.
//!
//! The on-disk format uses the field names an LLM planner emits
//! (`"Main Characters"`, `"Story"`, `"Image_Prompt"`, ...). Two optional
//! extensions are written on serialization and tolerated on input:
//! `"plotnpolish_schema"` (format version) and `"Idea"` (the inputs that
//! produced the plan). Unknown keys are carried through untouched.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const SCHEMA_VERSION: &str = "1";
pub const SCHEMA_VERSION_KEY: &str = "plotnpolish_schema";

/// Joins the context, background and style parts of a page prompt.
pub const PROMPT_SEPARATOR: &str = ", ";

const KEY_IDEA: &str = "Idea";
const KEY_CHARACTERS: &str = "Main Characters";
const KEY_STORY: &str = "Story";
const KEY_NAME: &str = "Name";
const KEY_DESCRIPTION: &str = "Description";
const KEY_CATEGORY: &str = "Category";
const KEY_PAGE: &str = "Page";
const KEY_TEXT: &str = "Text";
const KEY_IMAGE_PROMPT: &str = "Image_Prompt";
const KEY_LOCATION: &str = "Location_Description";
const KEY_STYLE: &str = "Style_Prompt";
const KEY_IDEA_PAGES: &str = "Pages";
const KEY_STORY_STYLE: &str = "Story_Style";
const KEY_VISUAL_STYLE: &str = "Visual_Style";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SchemaError {
    #[error("{0} missing")]
    Missing(String),
    #[error("{field} invalid: {reason}")]
    Invalid { field: String, reason: String },
    #[error("duplicate page index {0}")]
    DuplicatePage(usize),
    #[error("malformed JSON: {0}")]
    Syntax(String),
}

impl SchemaError {
    fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        SchemaError::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseMode {
    /// RFC 8259 JSON only.
    Strict,
    /// Additionally accepts trailing commas before `}` and `]`.
    #[default]
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoryIdea {
    pub idea_text: String,
    pub page_count: usize,
    pub story_style: String,
    pub visual_style: String,
}

impl StoryIdea {
    pub fn new(
        idea_text: impl Into<String>,
        page_count: usize,
        story_style: impl Into<String>,
        visual_style: impl Into<String>,
    ) -> Result<Self, SchemaError> {
        let idea = StoryIdea {
            idea_text: idea_text.into(),
            page_count,
            story_style: story_style.into(),
            visual_style: visual_style.into(),
        };
        idea.validate()?;
        Ok(idea)
    }

    pub fn validate(&self) -> Result<(), SchemaError> {
        if self.page_count == 0 {
            return Err(SchemaError::invalid("Idea.Pages", "must be at least 1"));
        }
        for (field, value) in [
            ("Idea.Text", &self.idea_text),
            ("Idea.Story_Style", &self.story_style),
            ("Idea.Visual_Style", &self.visual_style),
        ] {
            if value.trim().is_empty() {
                return Err(SchemaError::invalid(field, "must not be empty"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CharacterSpec {
    pub name: String,
    pub description: String,
    /// Detection concept for this character, e.g. `"woman"`.
    pub category: String,
    pub extra: Map<String, Value>,
}

impl CharacterSpec {
    pub fn new(
        name: impl Into<String>,
        description: impl Into<String>,
        category: impl Into<String>,
    ) -> Self {
        CharacterSpec {
            name: name.into(),
            description: description.into(),
            category: category.into(),
            extra: Map::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StoryPage {
    /// 1-based.
    pub page: usize,
    pub plot_text: String,
    pub context_prompt: String,
    pub background_prompt: String,
    pub style_prompt: String,
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StoryPlan {
    /// Absent for plans imported from bare planner output.
    pub idea: Option<StoryIdea>,
    pub characters: Vec<CharacterSpec>,
    pub pages: Vec<StoryPage>,
    pub extra: Map<String, Value>,
}

/// Builds the text-to-image prompt for one page: context, background and
/// style joined by [`PROMPT_SEPARATOR`], skipping empty parts.
pub fn compose_prompt(page: &StoryPage) -> String {
    [
        &page.context_prompt,
        &page.background_prompt,
        &page.style_prompt,
    ]
    .into_iter()
    .map(|part| part.trim_matches(|c: char| c.is_whitespace() || c == ','))
    .filter(|part| !part.is_empty())
    .collect::<Vec<_>>()
    .join(PROMPT_SEPARATOR)
}

impl StoryPlan {
    pub fn new(
        idea: Option<StoryIdea>,
        characters: Vec<CharacterSpec>,
        pages: Vec<StoryPage>,
    ) -> Result<Self, SchemaError> {
        let plan = StoryPlan {
            idea,
            characters,
            pages,
            extra: Map::new(),
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn page_count(&self) -> usize {
        self.pages.len()
    }

    pub fn composed_prompts(&self) -> Vec<String> {
        self.pages.iter().map(compose_prompt).collect()
    }

    pub fn character(&self, name: &str) -> Option<&CharacterSpec> {
        self.characters.iter().find(|c| c.name == name)
    }

    /// Fills `style_prompt` on pages that lack one from the plan-wide visual
    /// style.
    pub fn apply_visual_style(&mut self, visual_style: &str) {
        for page in &mut self.pages {
            if page.style_prompt.trim().is_empty() {
                page.style_prompt = visual_style.to_string();
            }
        }
    }

    pub fn validate(&self) -> Result<(), SchemaError> {
        if let Some(idea) = &self.idea {
            idea.validate()?;
            if idea.page_count != self.pages.len() {
                return Err(SchemaError::invalid(
                    "Idea.Pages",
                    format!(
                        "declares {} pages but the story has {}",
                        idea.page_count,
                        self.pages.len()
                    ),
                ));
            }
        }
        if self.pages.is_empty() {
            return Err(SchemaError::invalid(KEY_STORY, "must contain at least one page"));
        }

        let mut names = HashSet::new();
        for (i, c) in self.characters.iter().enumerate() {
            let at = |key: &str| format!("{KEY_CHARACTERS}[{i}].{key}");
            if c.name.trim().is_empty() {
                return Err(SchemaError::invalid(at(KEY_NAME), "must not be empty"));
            }
            if !names.insert(c.name.as_str()) {
                return Err(SchemaError::invalid(
                    at(KEY_NAME),
                    format!("duplicate character name {:?}", c.name),
                ));
            }
            if c.category.trim().is_empty() {
                return Err(SchemaError::invalid(at(KEY_CATEGORY), "must not be empty"));
            }
            if c.category != c.category.to_lowercase() || c.category != c.category.trim() {
                return Err(SchemaError::invalid(
                    at(KEY_CATEGORY),
                    "must be a lowercase noun phrase",
                ));
            }
        }

        let mut seen = HashSet::new();
        for p in &self.pages {
            if !seen.insert(p.page) {
                return Err(SchemaError::DuplicatePage(p.page));
            }
        }
        for (i, p) in self.pages.iter().enumerate() {
            if p.page != i + 1 {
                return Err(SchemaError::invalid(
                    format!("{KEY_STORY}[{i}].{KEY_PAGE}"),
                    format!("expected page {} (pages must be contiguous from 1)", i + 1),
                ));
            }
            if p.context_prompt.trim().is_empty() {
                return Err(SchemaError::invalid(
                    format!("{KEY_STORY}[{i}].{KEY_IMAGE_PROMPT}"),
                    "must not be empty",
                ));
            }
        }
        Ok(())
    }
}

/// Removes commas that directly precede a closing `}` or `]`, leaving string
/// contents alone.
fn strip_trailing_commas(text: &str) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    let mut in_string = false;
    let mut escaped = false;
    for (i, &c) in chars.iter().enumerate() {
        if in_string {
            out.push(c);
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_string = false;
            }
            continue;
        }
        match c {
            '"' => {
                in_string = true;
                out.push(c);
            }
            ',' => {
                let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
                if !matches!(next, Some('}') | Some(']')) {
                    out.push(c);
                }
            }
            _ => out.push(c),
        }
    }
    out
}

fn take_string(
    obj: &mut Map<String, Value>,
    key: &str,
    path: &str,
    required: bool,
) -> Result<String, SchemaError> {
    match obj.remove(key) {
        Some(Value::String(s)) => Ok(s),
        Some(Value::Null) | None if !required => Ok(String::new()),
        Some(Value::Null) | None => Err(SchemaError::Missing(format!("{path}{key}"))),
        Some(other) => Err(SchemaError::invalid(
            format!("{path}{key}"),
            format!("expected a string, found {other}"),
        )),
    }
}

fn take_index(obj: &mut Map<String, Value>, key: &str, path: &str) -> Result<usize, SchemaError> {
    match obj.remove(key) {
        None | Some(Value::Null) => Err(SchemaError::Missing(format!("{path}{key}"))),
        Some(Value::Number(n)) => n
            .as_u64()
            .filter(|&v| v >= 1)
            .map(|v| v as usize)
            .ok_or_else(|| SchemaError::invalid(format!("{path}{key}"), "expected a positive integer")),
        Some(other) => Err(SchemaError::invalid(
            format!("{path}{key}"),
            format!("expected a positive integer, found {other}"),
        )),
    }
}

fn take_object(value: Value, path: &str) -> Result<Map<String, Value>, SchemaError> {
    match value {
        Value::Object(m) => Ok(m),
        other => Err(SchemaError::invalid(path, format!("expected an object, found {other}"))),
    }
}

fn take_array(obj: &mut Map<String, Value>, key: &str) -> Result<Vec<Value>, SchemaError> {
    match obj.remove(key) {
        None | Some(Value::Null) => Err(SchemaError::Missing(key.to_string())),
        Some(Value::Array(items)) => Ok(items),
        Some(other) => Err(SchemaError::invalid(key, format!("expected an array, found {other}"))),
    }
}

/// Parses and validates a story plan.
pub fn parse_plan(json_text: &str, mode: ParseMode) -> Result<StoryPlan, SchemaError> {
    let value: Value = match mode {
        ParseMode::Strict => serde_json::from_str(json_text),
        ParseMode::Lenient => serde_json::from_str(&strip_trailing_commas(json_text)),
    }
    .map_err(|e| SchemaError::Syntax(e.to_string()))?;
    plan_from_value(value)
}

pub fn plan_from_value(value: Value) -> Result<StoryPlan, SchemaError> {
    let mut root = take_object(value, "document")?;

    match root.remove(SCHEMA_VERSION_KEY) {
        None => {}
        Some(Value::String(v)) if v == SCHEMA_VERSION => {}
        Some(other) => {
            return Err(SchemaError::invalid(
                SCHEMA_VERSION_KEY,
                format!("unsupported version {other}"),
            ))
        }
    }

    let idea = match root.remove(KEY_IDEA) {
        None | Some(Value::Null) => None,
        Some(v) => {
            let mut obj = take_object(v, KEY_IDEA)?;
            let path = format!("{KEY_IDEA}.");
            Some(StoryIdea {
                idea_text: take_string(&mut obj, KEY_TEXT, &path, true)?,
                page_count: take_index(&mut obj, KEY_IDEA_PAGES, &path)?,
                story_style: take_string(&mut obj, KEY_STORY_STYLE, &path, true)?,
                visual_style: take_string(&mut obj, KEY_VISUAL_STYLE, &path, true)?,
            })
        }
    };

    let characters = take_array(&mut root, KEY_CHARACTERS)?
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let path = format!("{KEY_CHARACTERS}[{i}].");
            let mut obj = take_object(v, &path)?;
            Ok(CharacterSpec {
                name: take_string(&mut obj, KEY_NAME, &path, true)?,
                description: take_string(&mut obj, KEY_DESCRIPTION, &path, true)?,
                category: take_string(&mut obj, KEY_CATEGORY, &path, true)?,
                extra: obj,
            })
        })
        .collect::<Result<Vec<_>, SchemaError>>()?;

    let default_style = idea.as_ref().map(|i| i.visual_style.clone()).unwrap_or_default();
    let mut pages = take_array(&mut root, KEY_STORY)?
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let path = format!("{KEY_STORY}[{i}].");
            let mut obj = take_object(v, &path)?;
            let page = take_index(&mut obj, KEY_PAGE, &path)?;
            let plot_text = take_string(&mut obj, KEY_TEXT, &path, true)?;
            let context_prompt = take_string(&mut obj, KEY_IMAGE_PROMPT, &path, true)?;
            let background_prompt = take_string(&mut obj, KEY_LOCATION, &path, false)?;
            let mut style_prompt = take_string(&mut obj, KEY_STYLE, &path, false)?;
            if style_prompt.trim().is_empty() {
                style_prompt = default_style.clone();
            }
            Ok(StoryPage {
                page,
                plot_text,
                context_prompt,
                background_prompt,
                style_prompt,
                extra: obj,
            })
        })
        .collect::<Result<Vec<_>, SchemaError>>()?;

    let mut seen = HashSet::new();
    for p in &pages {
        if !seen.insert(p.page) {
            return Err(SchemaError::DuplicatePage(p.page));
        }
    }
    pages.sort_by_key(|p| p.page);

    let plan = StoryPlan {
        idea,
        characters,
        pages,
        extra: root,
    };
    plan.validate()?;
    Ok(plan)
}

pub fn plan_to_value(plan: &StoryPlan) -> Value {
    let mut root = Map::new();
    root.insert(SCHEMA_VERSION_KEY.into(), SCHEMA_VERSION.into());
    if let Some(idea) = &plan.idea {
        let mut obj = Map::new();
        obj.insert(KEY_TEXT.into(), idea.idea_text.clone().into());
        obj.insert(KEY_IDEA_PAGES.into(), idea.page_count.into());
        obj.insert(KEY_STORY_STYLE.into(), idea.story_style.clone().into());
        obj.insert(KEY_VISUAL_STYLE.into(), idea.visual_style.clone().into());
        root.insert(KEY_IDEA.into(), Value::Object(obj));
    }
    let characters = plan
        .characters
        .iter()
        .map(|c| {
            let mut obj = Map::new();
            obj.insert(KEY_NAME.into(), c.name.clone().into());
            obj.insert(KEY_DESCRIPTION.into(), c.description.clone().into());
            obj.insert(KEY_CATEGORY.into(), c.category.clone().into());
            obj.extend(c.extra.clone());
            Value::Object(obj)
        })
        .collect();
    root.insert(KEY_CHARACTERS.into(), Value::Array(characters));

    let default_style = plan.idea.as_ref().map(|i| i.visual_style.as_str()).unwrap_or("");
    let pages = plan
        .pages
        .iter()
        .map(|p| {
            let mut obj = Map::new();
            obj.insert(KEY_PAGE.into(), p.page.into());
            obj.insert(KEY_TEXT.into(), p.plot_text.clone().into());
            obj.insert(KEY_IMAGE_PROMPT.into(), p.context_prompt.clone().into());
            obj.insert(KEY_LOCATION.into(), p.background_prompt.clone().into());
            // Styles inherited from the idea are restored on parse.
            if !p.style_prompt.trim().is_empty() && p.style_prompt != default_style {
                obj.insert(KEY_STYLE.into(), p.style_prompt.clone().into());
            }
            obj.extend(p.extra.clone());
            Value::Object(obj)
        })
        .collect();
    root.insert(KEY_STORY.into(), Value::Array(pages));
    root.extend(plan.extra.clone());
    Value::Object(root)
}

/// Serializes with 4-space indentation and a trailing newline.
pub fn serialize_plan(plan: &StoryPlan) -> String {
    let value = plan_to_value(plan);
    let mut buf = Vec::new();
    let formatter = serde_json::ser::PrettyFormatter::with_indent(b"    ");
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, formatter);
    value
        .serialize(&mut ser)
        .expect("serializing a JSON value cannot fail");
    let mut text = String::from_utf8(buf).expect("serde_json emits UTF-8");
    text.push('\n');
    text
}

impl Serialize for StoryPlan {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        plan_to_value(self).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for StoryPlan {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(deserializer)?;
        plan_from_value(value).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn page(context: &str, background: &str, style: &str) -> StoryPage {
        StoryPage {
            page: 1,
            plot_text: "text".into(),
            context_prompt: context.into(),
            background_prompt: background.into(),
            style_prompt: style.into(),
            extra: Map::new(),
        }
    }

    #[test]
    fn compose_skips_empty_parts() {
        assert_eq!(compose_prompt(&page("a cat", "", "")), "a cat");
        assert_eq!(compose_prompt(&page("a cat", "  ", "ink")), "a cat, ink");
        assert_eq!(compose_prompt(&page("a cat", "a yard", "ink")), "a cat, a yard, ink");
    }

    #[test]
    fn trailing_commas_are_stripped_outside_strings() {
        let text = r#"{"a": "x,}", "b": [1, 2,], }"#;
        assert_eq!(strip_trailing_commas(text), r#"{"a": "x,}", "b": [1, 2] }"#);
    }

    #[test]
    fn empty_object_names_characters_first() {
        let err = parse_plan("{}", ParseMode::Strict).unwrap_err();
        assert_eq!(err.to_string(), "Main Characters missing");
    }

    #[test]
    fn duplicate_pages_rejected() {
        let text = r#"{"Main Characters": [], "Story": [
            {"Page": 1, "Text": "a", "Image_Prompt": "x"},
            {"Page": 1, "Text": "b", "Image_Prompt": "y"}]}"#;
        assert_eq!(
            parse_plan(text, ParseMode::Strict).unwrap_err(),
            SchemaError::DuplicatePage(1)
        );
    }

    #[test]
    fn gaps_in_page_numbers_rejected() {
        let text = r#"{"Main Characters": [], "Story": [
            {"Page": 1, "Text": "a", "Image_Prompt": "x"},
            {"Page": 3, "Text": "b", "Image_Prompt": "y"}]}"#;
        assert!(matches!(
            parse_plan(text, ParseMode::Strict),
            Err(SchemaError::Invalid { .. })
        ));
    }

    #[test]
    fn idea_page_count_must_match() {
        let text = r#"{"Idea": {"Text": "t", "Pages": 2, "Story_Style": "s", "Visual_Style": "v"},
            "Main Characters": [], "Story": [{"Page": 1, "Text": "a", "Image_Prompt": "x"}]}"#;
        let err = parse_plan(text, ParseMode::Strict).unwrap_err();
        assert!(err.to_string().starts_with("Idea.Pages invalid"), "{err}");
    }

    #[test]
    fn uppercase_category_rejected() {
        let plan = StoryPlan::new(
            None,
            vec![CharacterSpec::new("A", "d", "Woman")],
            vec![page("x", "", "")],
        );
        assert!(plan.is_err());
    }

    #[test]
    fn unknown_version_rejected() {
        let text = r#"{"plotnpolish_schema": "9", "Main Characters": [], "Story": []}"#;
        assert!(parse_plan(text, ParseMode::Strict).is_err());
    }

    #[test]
    fn idea_style_fills_pages_and_is_not_duplicated() {
        let text = r#"{"Idea": {"Text": "t", "Pages": 1, "Story_Style": "s", "Visual_Style": "ink"},
            "Main Characters": [], "Story": [{"Page": 1, "Text": "a", "Image_Prompt": "x"}]}"#;
        let plan = parse_plan(text, ParseMode::Strict).unwrap();
        assert_eq!(plan.pages[0].style_prompt, "ink");
        assert!(!serialize_plan(&plan).contains("Style_Prompt"));
    }
}
