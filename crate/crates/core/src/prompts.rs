//! Prompt templates and reply parsers for the chat-vision model.
//!
//! Templates are plain text with `{{name}}` placeholders. Defaults are
//! compiled in; a template directory can override any of them by file name.
//! A template's version is a hash of its text, so editing a template
//! invalidates cached replies rendered from the old one.

use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::symbolic::hex_digest;

const LBRU: &str = include_str!("../templates/lbru.txt");
const PIVOT_FRAME: &str = include_str!("../templates/pivot_frame.txt");
const PIVOT_BOX: &str = include_str!("../templates/pivot_box.txt");
const PIVOT_BOX_AVS: &str = include_str!("../templates/pivot_box_avs.txt");
const PIVOT_BOX_DESCRIBE: &str = include_str!("../templates/pivot_box_describe.txt");
const PIVOT_BOX_DIRECT: &str = include_str!("../templates/pivot_box_direct.txt");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    name: String,
    body: String,
    version: String,
}

impl PromptTemplate {
    pub fn new(name: impl Into<String>, body: impl Into<String>) -> Self {
        let body = body.into();
        let mut hasher = Sha256::new();
        hasher.update(body.as_bytes());
        let mut version = hex_digest(hasher);
        version.truncate(12);
        PromptTemplate {
            name: name.into(),
            body,
            version,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    /// Substitutes every `{{key}}`. Unknown placeholders are an error.
    pub fn render(&self, vars: &[(&str, &str)]) -> Result<String> {
        let mut out = String::with_capacity(self.body.len() + 256);
        let mut rest = self.body.as_str();
        while let Some(open) = rest.find("{{") {
            out.push_str(&rest[..open]);
            let after = &rest[open + 2..];
            let close = after
                .find("}}")
                .ok_or_else(|| Error::Template(format!("{}: unclosed placeholder", self.name)))?;
            let key = after[..close].trim();
            let value = vars
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| *v)
                .ok_or_else(|| Error::Template(format!("{}: no value for {{{{{key}}}}}", self.name)))?;
            out.push_str(value);
            rest = &after[close + 2..];
        }
        out.push_str(rest);
        Ok(out)
    }
}

/// The chat prompts the pipeline renders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pub lbru: PromptTemplate,
    pub pivot_frame: PromptTemplate,
    /// Describe each box, analyse the reference's syntax, then select.
    pub pivot_box: PromptTemplate,
    /// Syntax analysis then selection, for the short audio-derived references.
    pub pivot_box_avs: PromptTemplate,
    /// Describe each box then select.
    pub pivot_box_describe: PromptTemplate,
    /// Select directly.
    pub pivot_box_direct: PromptTemplate,
}

impl Default for PromptSet {
    fn default() -> Self {
        PromptSet {
            lbru: PromptTemplate::new("lbru", LBRU),
            pivot_frame: PromptTemplate::new("pivot_frame", PIVOT_FRAME),
            pivot_box: PromptTemplate::new("pivot_box", PIVOT_BOX),
            pivot_box_avs: PromptTemplate::new("pivot_box_avs", PIVOT_BOX_AVS),
            pivot_box_describe: PromptTemplate::new("pivot_box_describe", PIVOT_BOX_DESCRIBE),
            pivot_box_direct: PromptTemplate::new("pivot_box_direct", PIVOT_BOX_DIRECT),
        }
    }
}

impl PromptSet {
    pub fn all(&self) -> [&PromptTemplate; 6] {
        [
            &self.lbru,
            &self.pivot_frame,
            &self.pivot_box,
            &self.pivot_box_avs,
            &self.pivot_box_describe,
            &self.pivot_box_direct,
        ]
    }

    /// Defaults, overridden by `<name>.txt` files present in `dir`.
    pub fn load(dir: Option<&Path>) -> Result<Self> {
        let mut set = PromptSet::default();
        let Some(dir) = dir else { return Ok(set) };
        for slot in [
            &mut set.lbru,
            &mut set.pivot_frame,
            &mut set.pivot_box,
            &mut set.pivot_box_avs,
            &mut set.pivot_box_describe,
            &mut set.pivot_box_direct,
        ] {
            let path = dir.join(format!("{}.txt", slot.name()));
            if path.exists() {
                let body = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                *slot = PromptTemplate::new(slot.name().to_string(), body);
            }
        }
        Ok(set)
    }
}

/// Every JSON value that starts at an opening `delim`, scanning from the end
/// of `reply` backwards.
fn json_candidates(reply: &str, delim: char) -> impl Iterator<Item = Value> + '_ {
    reply
        .char_indices()
        .rev()
        .filter(move |(_, c)| *c == delim)
        .filter_map(move |(i, _)| {
            serde_json::Deserializer::from_str(&reply[i..])
                .into_iter::<Value>()
                .next()
                .and_then(|r| r.ok())
        })
}

/// The last well-formed JSON array of strings in `reply`.
pub fn parse_category_list(reply: &str) -> Option<Vec<String>> {
    json_candidates(reply, '[').find_map(|v| match v {
        Value::Array(items) => items
            .into_iter()
            .map(|x| match x {
                Value::String(s) => Some(s),
                _ => None,
            })
            .collect(),
        _ => None,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdAnswer {
    pub id: usize,
    /// Accompanying free text: the JSON `event`/`rationale` field when present,
    /// otherwise the reply with fenced blocks removed.
    pub text: String,
}

fn json_id(value: &Value, key: &str) -> Option<usize> {
    match value.get(key)? {
        Value::Number(n) => n.as_u64().and_then(|n| usize::try_from(n).ok()),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

fn strip_fences(reply: &str) -> String {
    let fence = Regex::new(r"(?s)```.*?(```|$)").expect("valid regex");
    fence.replace_all(reply, "").trim().to_string()
}

fn parse_id_answer(reply: &str, key: &str, text_key: &str) -> Option<IdAnswer> {
    if let Some(obj) = json_candidates(reply, '{').find(|v| json_id(v, key).is_some()) {
        let text = obj
            .get(text_key)
            .and_then(Value::as_str)
            .map(str::to_owned)
            .unwrap_or_else(|| strip_fences(reply));
        return Some(IdAnswer {
            id: json_id(&obj, key)?,
            text,
        });
    }
    let pattern = Regex::new(&format!(r"(?i)\b{key}(?:\s+id)?\s*[:#=]?\s*(\d+)")).expect("valid regex");
    let last = pattern.captures_iter(reply).last()?;
    Some(IdAnswer {
        id: last[1].parse().ok()?,
        text: strip_fences(reply),
    })
}

/// A frame ID from `{"frame": i}`, or failing that the last "frame i" mention.
pub fn parse_frame_answer(reply: &str) -> Option<IdAnswer> {
    parse_id_answer(reply, "frame", "event")
}

/// A box ID from `{"box": j}`, or failing that the last "box j" mention.
pub fn parse_box_answer(reply: &str) -> Option<IdAnswer> {
    parse_id_answer(reply, "box", "rationale")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_substitutes_and_rejects_unknown() {
        let t = PromptTemplate::new("t", "a {{x}} b {{ y }}");
        assert_eq!(t.render(&[("x", "1"), ("y", "2")]).unwrap(), "a 1 b 2");
        assert!(t.render(&[("x", "1")]).is_err());
        assert!(PromptTemplate::new("t", "{{x").render(&[("x", "1")]).is_err());
    }

    #[test]
    fn versions_track_content() {
        let a = PromptTemplate::new("a", "hello");
        let b = PromptTemplate::new("a", "hello!");
        assert_ne!(a.version(), b.version());
        assert_eq!(a.version().len(), 12);
    }

    #[test]
    fn default_templates_render() {
        let set = PromptSet::default();
        let vars = [
            ("audio_tags", "- dog"),
            ("frame_count", "5"),
            ("frame_mapping", "m"),
            ("reference", "r"),
            ("pivot_label", "3"),
            ("box_count", "2"),
            ("event_summary", "e"),
        ];
        for t in set.all() {
            let out = t.render(&vars).unwrap();
            assert!(!out.contains("{{"), "{}", t.name());
        }
        assert!(set.pivot_frame.body().contains("{\"event\""));
        assert!(set.pivot_box.body().contains("{\"box\""));
        assert!(set.pivot_box.body().contains("Describe the object inside each candidate box"));
        assert!(!set.pivot_box_avs.body().contains("Describe the object inside each candidate box"));
        assert!(set.pivot_box_avs.body().contains("syntax"));
        assert!(set.pivot_box_describe.body().contains("Describe the object inside each candidate box"));
        assert!(!set.pivot_box_describe.body().contains("syntax"));
        assert!(!set.pivot_box_direct.body().contains("Describe"));
        assert!(!set.pivot_box_direct.body().contains("syntax"));
    }

    #[test]
    fn template_dir_overrides() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("pivot_frame.txt"), "custom {{reference}}").unwrap();
        let set = PromptSet::load(Some(dir.path())).unwrap();
        assert_eq!(set.pivot_frame.body(), "custom {{reference}}");
        assert_eq!(set.lbru, PromptSet::default().lbru);
    }

    #[test]
    fn category_lists() {
        let reply = "Tags: [\"x\"] ... final:\n```json\n[\"dog\", \"person\"]\n```";
        assert_eq!(parse_category_list(reply).unwrap(), ["dog", "person"]);
        assert_eq!(parse_category_list("[1, 2]"), None);
        assert_eq!(parse_category_list("no list"), None);
        assert_eq!(parse_category_list("[\"a\", \"b\""), None);
        assert_eq!(parse_category_list("[\"a\"] then [broken"), Some(vec!["a".to_string()]));
        assert_eq!(parse_category_list("[]"), Some(vec![]));
    }

    #[test]
    fn frame_answers() {
        let json = "The dog runs.\n```json\n{\"event\": \"a dog runs left\", \"frame\": 4}\n```";
        assert_eq!(
            parse_frame_answer(json).unwrap(),
            IdAnswer {
                id: 4,
                text: "a dog runs left".into()
            }
        );
        let plain = parse_frame_answer("A dog chases a ball. The answer is frame 4.").unwrap();
        assert_eq!(plain.id, 4);
        assert!(plain.text.starts_with("A dog chases"));
        assert_eq!(parse_frame_answer("{\"frame\": \"2\"}").unwrap().id, 2);
        assert_eq!(parse_frame_answer("Frame ID: 3").unwrap().id, 3);
        assert_eq!(parse_frame_answer("I cannot tell."), None);
        assert_eq!(parse_frame_answer(""), None);
    }

    #[test]
    fn box_answers() {
        let reply = "Box 1 holds a car, box 2 a bicycle behind it.\n```json\n{\"box\": 2}\n```";
        let a = parse_box_answer(reply).unwrap();
        assert_eq!(a.id, 2);
        assert!(a.text.starts_with("Box 1 holds"));
        assert_eq!(parse_box_answer("the one on the left").map(|a| a.id), None);
        assert_eq!(parse_box_answer("{\"box\": -1}").map(|a| a.id), None);
    }
}
