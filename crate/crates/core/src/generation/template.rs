use thiserror::Error;

use crate::model::{PromptTemplate, Sample};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("unresolved placeholder '{0}'")]
    Unresolved(String),
    #[error("malformed placeholder at byte {0}")]
    Malformed(usize),
}

impl TemplateError {
    pub fn placeholder(&self) -> Option<&str> {
        match self {
            TemplateError::Unresolved(name) => Some(name),
            TemplateError::Malformed(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub system: Option<String>,
    pub user: String,
}

/// Substitutes `{name}` slots using `lookup`. `{{` and `}}` produce literal
/// braces; a lone `}` is kept as-is. Placeholder names are `[A-Za-z0-9_]+`.
pub fn render_with<'a>(text: &str, lookup: impl Fn(&str) -> Option<&'a str>) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    let mut offset = 0;
    while let Some(pos) = rest.find(['{', '}']) {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        let escaped = [("{{", '{'), ("}}", '}'), ("}", '}')]
            .into_iter()
            .find_map(|(prefix, c)| tail.strip_prefix(prefix).map(|after| (after, c, prefix.len())));
        if let Some((after, c, len)) = escaped {
            out.push(c);
            rest = after;
            offset += pos + len;
            continue;
        }
        let end = tail.find('}').ok_or(TemplateError::Malformed(offset + pos))?;
        let name = &tail[1..end];
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(TemplateError::Malformed(offset + pos));
        }
        let value = lookup(name).ok_or_else(|| TemplateError::Unresolved(name.to_string()))?;
        out.push_str(value);
        rest = &tail[end + 1..];
        offset += pos + end + 1;
    }
    out.push_str(rest);
    Ok(out)
}

/// Resolves a placeholder against a sample. `prompt`, `input` and
/// `input_text` name the input text; `reference`/`reference_text` the
/// reference; `id`/`sample_id` the id; anything else is a meta key.
pub fn sample_field<'a>(sample: &'a Sample, name: &str) -> Option<&'a str> {
    match name {
        "prompt" | "input" | "input_text" => Some(&sample.input_text),
        "reference" | "reference_text" => sample.reference_text.as_deref(),
        "id" | "sample_id" => Some(&sample.id),
        other => sample.meta.get(other).map(String::as_str),
    }
}

pub fn render_prompt(template: &PromptTemplate, sample: &Sample) -> Result<RenderedPrompt, TemplateError> {
    let lookup = |name: &str| sample_field(sample, name);
    let system = template.system_text.as_deref().map(|s| render_with(s, lookup)).transpose()?;
    let user = render_with(&template.user_text, lookup)?;
    Ok(RenderedPrompt { system, user })
}

/// Placeholder names used by a template text, in order of appearance.
pub fn placeholders(text: &str) -> Result<Vec<String>, TemplateError> {
    let names = std::cell::RefCell::new(Vec::new());
    render_with(text, |name| {
        names.borrow_mut().push(name.to_string());
        Some("")
    })?;
    Ok(names.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(input: &str) -> Sample {
        Sample::new("s1", input)
    }

    #[test]
    fn substitutes_conversation_slot() {
        let t = PromptTemplate::user_only("note", "**Conversation:**\n{prompt}");
        let r = render_prompt(&t, &sample("D: hello")).unwrap();
        assert_eq!(r.user, "**Conversation:**\nD: hello");
        assert_eq!(r.system, None);
    }

    #[test]
    fn no_placeholders_unchanged() {
        let t =
            PromptTemplate { name: "t".into(), system_text: Some("Be brief.".into()), user_text: "Plain text.".into() };
        let r = render_prompt(&t, &sample("x")).unwrap();
        assert_eq!(r.user, "Plain text.");
        assert_eq!(r.system.as_deref(), Some("Be brief."));
    }

    #[test]
    fn missing_placeholder_named() {
        let t = PromptTemplate::user_only("t", "{missing}");
        let err = render_prompt(&t, &sample("x")).unwrap_err();
        assert_eq!(err.placeholder(), Some("missing"));
        let t = PromptTemplate::user_only("t", "{reference}");
        assert_eq!(render_prompt(&t, &sample("x")).unwrap_err(), TemplateError::Unresolved("reference".into()));
    }

    #[test]
    fn escapes_and_meta() {
        let mut s = sample("x");
        s.meta.insert("specialty".into(), "cardiology".into());
        let t = PromptTemplate::user_only("t", "{{\"field\": \"{specialty}\"}} {id}");
        assert_eq!(render_prompt(&t, &s).unwrap().user, "{\"field\": \"cardiology\"} s1");
    }

    #[test]
    fn malformed_placeholders() {
        assert!(matches!(render_with("a {b", |_| Some("")), Err(TemplateError::Malformed(2))));
        assert!(matches!(render_with("{ x }", |_| Some("")), Err(TemplateError::Malformed(0))));
        assert_eq!(placeholders("{a} and {b} {{c}}").unwrap(), ["a", "b"]);
    }

    #[test]
    fn substituted_values_are_verbatim() {
        // values containing braces are not re-interpreted
        let t = PromptTemplate::user_only("t", "<{prompt}>");
        assert_eq!(render_prompt(&t, &sample("{x}}")).unwrap().user, "<{x}}>");
    }

    proptest! {
        #[test]
        fn injective_in_substituted_field(a in "\\PC{0,30}", b in "\\PC{0,30}") {
            prop_assume!(a != b && !a.is_empty() && !b.is_empty());
            let t = PromptTemplate::user_only("t", "Conversation:\n{prompt}\nNote:");
            let ra = render_prompt(&t, &sample(&a)).unwrap();
            let rb = render_prompt(&t, &sample(&b)).unwrap();
            prop_assert_ne!(ra, rb);
        }
    }
}
