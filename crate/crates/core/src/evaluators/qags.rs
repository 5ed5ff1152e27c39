//! Question-answering factual consistency (QAGS), ternary and judge variants.

use serde::{Deserialize, Serialize};

use crate::model::ModelSpec;
use crate::provider::{Client, GenerationRequest, ResponseShape, Sampling};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionMode {
    /// Yes/no-answerable questions.
    Ternary,
    Open,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ternary {
    Yes,
    No,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Equivalent,
    NotEquivalent,
}

pub(crate) fn question_prompt(candidate: &str, mode: QuestionMode, k: usize) -> String {
    let kind = match mode {
        QuestionMode::Ternary => "Each question must be answerable with yes or no.",
        QuestionMode::Open => {
            "Each question should ask for a specific detail such as a finding, value, medication or plan."
        }
    };
    format!(
        "Write {k} distinct questions about the factual claims made in the clinical note below. {kind} \
         Put one question per line, numbered 1 to {k}, with no other text.\n\n**Clinical Note:**\n{candidate}\n\n**Questions:**"
    )
}

pub(crate) fn ternary_prompt(context: &str, question: &str) -> String {
    format!(
        "Answer the question using only the text below. Reply with exactly one word: yes, no, or unknown \
         (if the text does not say).\n\n**Text:**\n{context}\n\n**Question:** {question}\n**Answer:**"
    )
}

fn open_prompt(context: &str, question: &str) -> String {
    format!(
        "Answer the question briefly using only the text below. If the text does not contain the answer, \
         reply \"unknown\".\n\n**Text:**\n{context}\n\n**Question:** {question}\n**Answer:**"
    )
}

fn judge_prompt(question: &str, a: &str, b: &str) -> String {
    format!(
        "Two answers were given to the same question. Decide whether they convey the same information.\n\n\
         **Question:** {question}\n**Answer A:** {a}\n**Answer B:** {b}\n\n\
         Reply with exactly \"equivalent\" or \"not equivalent\"."
    )
}

/// Extracts questions from a numbered or bulleted list, one per line.
pub fn parse_questions(text: &str, k: usize) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for line in text.lines() {
        let mut q = line.trim();
        q = q.trim_start_matches(['-', '*', '•']).trim_start();
        let digits = q.chars().take_while(|c| c.is_ascii_digit()).count();
        if digits > 0 && q[digits..].starts_with(['.', ')', ':']) {
            q = q[digits + 1..].trim_start();
        }
        if let Some(rest) = q.strip_prefix('Q').or_else(|| q.strip_prefix('q')) {
            let d = rest.chars().take_while(|c| c.is_ascii_digit()).count();
            if d > 0 && rest[d..].starts_with([':', '.']) {
                q = rest[d + 1..].trim_start();
            }
        }
        if q.len() > 1 && q.ends_with('?') && !out.iter().any(|o| o.eq_ignore_ascii_case(q)) {
            out.push(q.to_string());
        }
        if out.len() == k {
            break;
        }
    }
    out
}

pub fn parse_ternary(text: &str) -> Option<Ternary> {
    let word: String = text
        .trim()
        .chars()
        .skip_while(|c| !c.is_alphabetic())
        .take_while(|c| c.is_alphabetic())
        .collect::<String>()
        .to_lowercase();
    match word.as_str() {
        "yes" => Some(Ternary::Yes),
        "no" => Some(Ternary::No),
        "unknown" => Some(Ternary::Unknown),
        _ => None,
    }
}

pub fn parse_verdict(text: &str) -> Option<Verdict> {
    let t = text.trim().trim_start_matches(['"', '\'', '*']).to_lowercase();
    if t.starts_with("not equivalent") {
        Some(Verdict::NotEquivalent)
    } else if t.starts_with("equivalent") {
        Some(Verdict::Equivalent)
    } else {
        None
    }
}

fn ask(client: &Client, model: &ModelSpec, prompt: String, shape: ResponseShape) -> Result<String, String> {
    let req = GenerationRequest::new(None, prompt, Sampling::from_model(model)).with_shape(shape);
    client.generate(&req).map(|r| r.text).map_err(|e| e.to_string())
}

pub fn generate_questions(
    candidate: &str,
    client: &Client,
    model: &ModelSpec,
    mode: QuestionMode,
    k: usize,
) -> Result<Vec<String>, String> {
    if candidate.trim().is_empty() {
        return Err("cannot generate questions for an empty candidate".into());
    }
    let text = ask(client, model, question_prompt(candidate, mode, k), ResponseShape::Lines { max: k })?;
    let questions = parse_questions(&text, k);
    if questions.is_empty() {
        return Err("model returned no parsable questions".into());
    }
    Ok(questions)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionOutcome {
    pub question: String,
    pub source_answer: String,
    pub candidate_answer: String,
    /// `None` when the question was dropped.
    pub agrees: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QagsOutcome {
    pub score: f64,
    pub retained: usize,
    pub dropped: usize,
    pub questions: Vec<QuestionOutcome>,
}

impl QagsOutcome {
    fn from_questions(questions: Vec<QuestionOutcome>) -> Result<Self, String> {
        let retained = questions.iter().filter(|q| q.agrees.is_some()).count();
        let agreements = questions.iter().filter(|q| q.agrees == Some(true)).count();
        if retained == 0 {
            return Err(format!("all {} questions were dropped", questions.len()));
        }
        Ok(Self {
            score: agreements as f64 / retained as f64,
            retained,
            dropped: questions.len() - retained,
            questions,
        })
    }
}

/// Agreement of one ternary answer pair; `None` drops the question.
pub fn ternary_agreement(source: Option<Ternary>, candidate: Option<Ternary>) -> Option<bool> {
    match candidate? {
        Ternary::Unknown => None,
        c => Some(source == Some(c)),
    }
}

/// Fraction of retained questions whose answers agree. Fails if every
/// question is dropped.
pub fn agreement_score(outcomes: &[Option<bool>]) -> Result<f64, String> {
    let retained: Vec<bool> = outcomes.iter().flatten().copied().collect();
    if retained.is_empty() {
        return Err("all questions were dropped".into());
    }
    Ok(retained.iter().filter(|a| **a).count() as f64 / retained.len() as f64)
}

pub fn qags_ternary_score(
    source: &str,
    candidate: &str,
    questions: &[String],
    client: &Client,
    model: &ModelSpec,
) -> Result<QagsOutcome, String> {
    if questions.is_empty() {
        return Err("no questions to answer".into());
    }
    let shape = ResponseShape::Choice { options: vec!["yes".into(), "no".into(), "unknown".into()] };
    let mut out = Vec::with_capacity(questions.len());
    for q in questions {
        let from_source = ask(client, model, ternary_prompt(source, q), shape.clone())?;
        let from_candidate = ask(client, model, ternary_prompt(candidate, q), shape.clone())?;
        out.push(QuestionOutcome {
            question: q.clone(),
            agrees: ternary_agreement(parse_ternary(&from_source), parse_ternary(&from_candidate)),
            source_answer: from_source,
            candidate_answer: from_candidate,
        });
    }
    QagsOutcome::from_questions(out)
}

pub fn qags_judge_score(
    source: &str,
    candidate: &str,
    questions: &[String],
    client: &Client,
    model: &ModelSpec,
    judge_client: &Client,
    judge: &ModelSpec,
) -> Result<QagsOutcome, String> {
    if questions.is_empty() {
        return Err("no questions to answer".into());
    }
    let verdicts = ResponseShape::Choice { options: vec!["equivalent".into(), "not equivalent".into()] };
    let mut out = Vec::with_capacity(questions.len());
    for q in questions {
        let from_source = ask(client, model, open_prompt(source, q), ResponseShape::FreeText)?;
        let from_candidate = ask(client, model, open_prompt(candidate, q), ResponseShape::FreeText)?;
        let verdict = ask(judge_client, judge, judge_prompt(q, &from_source, &from_candidate), verdicts.clone())?;
        let agrees = parse_verdict(&verdict).map(|v| v == Verdict::Equivalent);
        if agrees.is_none() {
            log::debug!("dropping question with unparsable verdict {verdict:?}");
        }
        out.push(QuestionOutcome {
            question: q.clone(),
            source_answer: from_source,
            candidate_answer: from_candidate,
            agrees,
        });
    }
    QagsOutcome::from_questions(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use Ternary::*;

    #[test]
    fn question_parsing() {
        let text = "1. Is the patient's blood pressure 120/80?\n2) Does the patient smoke?\n- Is there a fever?\nQ4: Any rash?\nnot a question\n1. Does the patient smoke?";
        let qs = parse_questions(text, 10);
        assert_eq!(
            qs,
            ["Is the patient's blood pressure 120/80?", "Does the patient smoke?", "Is there a fever?", "Any rash?"]
        );
        assert_eq!(parse_questions(text, 3).len(), 3);
    }

    #[test]
    fn answers_and_verdicts() {
        assert_eq!(parse_ternary("Yes."), Some(Yes));
        assert_eq!(parse_ternary(" unknown"), Some(Unknown));
        assert_eq!(parse_ternary("maybe"), None);
        assert_eq!(parse_verdict("Not equivalent."), Some(Verdict::NotEquivalent));
        assert_eq!(parse_verdict("\"equivalent\""), Some(Verdict::Equivalent));
        assert_eq!(parse_verdict("unclear"), None);
    }

    #[test]
    fn agreement_rules() {
        assert_eq!(ternary_agreement(Some(Yes), Some(Yes)), Some(true));
        assert_eq!(ternary_agreement(Some(Unknown), Some(No)), Some(false));
        assert_eq!(ternary_agreement(Some(Yes), Some(Unknown)), None);
        assert_eq!(ternary_agreement(None, Some(No)), Some(false));
        assert_eq!(ternary_agreement(Some(No), None), None);
    }

    #[test]
    fn fraction_examples() {
        let mut v = vec![Some(true); 8];
        v.extend([Some(false); 2]);
        assert_eq!(agreement_score(&v).unwrap(), 0.8);
        let mut v = vec![None, None];
        v.extend([Some(true); 6]);
        v.extend([Some(false); 2]);
        assert_eq!(agreement_score(&v).unwrap(), 0.75);
        assert!(agreement_score(&[None, None]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn agreeing_question_never_lowers_score(v in proptest::collection::vec(proptest::option::of(proptest::bool::ANY), 1..12)) {
            proptest::prop_assume!(v.iter().any(Option::is_some));
            let before = agreement_score(&v).unwrap();
            let mut w = v.clone();
            w.push(Some(true));
            proptest::prop_assert!(agreement_score(&w).unwrap() >= before);
        }
    }
}
