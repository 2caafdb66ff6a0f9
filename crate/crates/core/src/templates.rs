//! Versioned prompt templates.
//!
//! Built-in templates live in `templates/<name>.v<version>.txt` and are
//! compiled into the binary; the file stem is the template id recorded in
//! outputs. A directory with files of the same naming scheme can override
//! or extend them. Placeholders are `{name}`; unknown placeholders are left
//! untouched and substituted values are never re-scanned.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

pub const QUERY_WRITER: &str = "query_writer.v1";
pub const RAG_ANSWER: &str = "rag_answer.v1";
pub const KBALIGN_SHORT: &str = "kbalign_short.v1";
pub const KBALIGN_LONG: &str = "kbalign_long.v1";
pub const DEEPNOTE_REVIEW: &str = "deepnote_review.v1";
pub const DEEPNOTE_REFINE: &str = "deepnote_refine.v1";
pub const DEEPNOTE_ANSWER: &str = "deepnote_answer.v1";

const BUILTIN: &[(&str, &str)] = &[
    (QUERY_WRITER, include_str!("../templates/query_writer.v1.txt")),
    (RAG_ANSWER, include_str!("../templates/rag_answer.v1.txt")),
    (KBALIGN_SHORT, include_str!("../templates/kbalign_short.v1.txt")),
    (KBALIGN_LONG, include_str!("../templates/kbalign_long.v1.txt")),
    (DEEPNOTE_REVIEW, include_str!("../templates/deepnote_review.v1.txt")),
    (DEEPNOTE_REFINE, include_str!("../templates/deepnote_refine.v1.txt")),
    (DEEPNOTE_ANSWER, include_str!("../templates/deepnote_answer.v1.txt")),
];

#[derive(Debug, Error, PartialEq)]
pub enum TemplateError {
    #[error("unknown template id: {0}")]
    Unknown(String),
    #[error("cannot read template directory {0}: {1}")]
    Io(String, String),
}

#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<String, String>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateSet {
    pub fn builtin() -> Self {
        Self {
            templates: BUILTIN.iter().map(|(id, t)| (id.to_string(), t.trim_end().to_string())).collect(),
        }
    }

    /// Built-ins overlaid with every `*.txt` file of `dir`.
    pub fn with_overrides(dir: &Path) -> Result<Self, TemplateError> {
        let mut set = Self::builtin();
        let err = |e: std::io::Error| TemplateError::Io(dir.display().to_string(), e.to_string());
        for entry in std::fs::read_dir(dir).map_err(err)? {
            let path = entry.map_err(err)?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            if let Some(id) = path.file_stem().and_then(|s| s.to_str()) {
                let text = std::fs::read_to_string(&path).map_err(err)?;
                set.templates.insert(id.to_string(), text.trim_end().to_string());
            }
        }
        Ok(set)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    pub fn get(&self, id: &str) -> Result<&str, TemplateError> {
        self.templates.get(id).map(String::as_str).ok_or_else(|| TemplateError::Unknown(id.to_string()))
    }

    pub fn render(&self, id: &str, vars: &[(&str, &str)]) -> Result<String, TemplateError> {
        Ok(render_str(self.get(id)?, vars))
    }
}

pub fn render_str(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after.find('}');
        let name = close.map(|c| &after[..c]);
        match name.and_then(|n| vars.iter().find(|(k, _)| *k == n)) {
            Some((_, v)) => {
                out.push_str(v);
                rest = &after[close.unwrap() + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

/// Renders retrieved passages as `[rank] (chunk_id) text` blocks.
pub fn format_passages<'a>(passages: impl IntoIterator<Item = (usize, &'a str, &'a str)>) -> String {
    passages
        .into_iter()
        .map(|(rank, id, text)| format!("[{rank}] ({id}) {text}"))
        .collect::<Vec<_>>()
        .join("\n\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_present() {
        let t = TemplateSet::builtin();
        assert_eq!(t.ids().count(), 7);
        assert!(t.get(DEEPNOTE_REVIEW).unwrap().contains("VERDICT: UPDATE"));
        assert_eq!(t.get("nope"), Err(TemplateError::Unknown("nope".into())));
    }

    #[test]
    fn substitution_is_single_pass() {
        let s = render_str("Q: {query} / {missing} / {", &[("query", "{query} x")]);
        assert_eq!(s, "Q: {query} x / {missing} / {");
    }

    #[test]
    fn overrides_from_directory() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("rag_answer.v1.txt"), "custom {query}\n").unwrap();
        std::fs::write(dir.path().join("extra.v2.txt"), "extra").unwrap();
        let t = TemplateSet::with_overrides(dir.path()).unwrap();
        assert_eq!(t.render(RAG_ANSWER, &[("query", "q")]).unwrap(), "custom q");
        assert_eq!(t.get("extra.v2").unwrap(), "extra");
    }

    #[test]
    fn passages_format() {
        assert_eq!(format_passages([(1, "a#0", "x"), (2, "b#1", "y")]), "[1] (a#0) x\n\n[2] (b#1) y");
    }
}
