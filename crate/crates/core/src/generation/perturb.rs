//! Perturbation prompts for meta-evaluation ladders.
//!
//! Level 1 rephrases without changing meaning, level 2 introduces minor
//! content changes, level 3 significantly changes the note's meaning. Each
//! prompt receives the original output at `{prompt}`.

use crate::model::PromptTemplate;

pub const LEVEL1_PROMPT: &str = include_str!("../../assets/perturbation_level1.txt");
pub const LEVEL2_PROMPT: &str = include_str!("../../assets/perturbation_level2.txt");
pub const LEVEL3_PROMPT: &str = include_str!("../../assets/perturbation_level3.txt");

/// Clinical note generation prompt used in the reference setup.
pub const NOTE_GENERATION_PROMPT: &str = include_str!("../../assets/note_generation.txt");

/// Built-in perturbation template for `level` (1..=3).
///
/// # Panics
/// If `level` is outside 1..=3.
pub fn default_template(level: u8) -> PromptTemplate {
    let text = match level {
        1 => LEVEL1_PROMPT,
        2 => LEVEL2_PROMPT,
        3 => LEVEL3_PROMPT,
        other => panic!("no perturbation prompt for level {other}"),
    };
    PromptTemplate::user_only(format!("perturbation_level{level}"), text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generation::{placeholders, render_prompt};
    use crate::model::Sample;

    #[test]
    fn level_prompts_carry_their_instructions() {
        assert!(default_template(1)
            .user_text
            .contains("Rephrase sentences while preserving the exact medical meaning"));
        assert!(default_template(2)
            .user_text
            .contains("Make small changes to test results and quantitative measurements"));
        assert!(default_template(3)
            .user_text
            .contains("Significantly alter test results and quantitative measurements"));
        for level in 1..=3 {
            let t = default_template(level);
            assert_eq!(placeholders(&t.user_text).unwrap(), ["prompt"]);
            assert!(t.user_text.ends_with("**Original Clinical Note**\n{prompt}\n\n**Perturbed Clinical Note**"));
        }
    }

    #[test]
    fn note_is_inserted_verbatim() {
        let note = "1. **CHIEF COMPLAINT**: cough {x}";
        let r = render_prompt(&default_template(2), &Sample::new("s", note)).unwrap();
        assert!(r.user.contains("**Original Clinical Note**\n1. **CHIEF COMPLAINT**: cough {x}\n\n"));
    }

    #[test]
    fn note_generation_prompt() {
        assert!(NOTE_GENERATION_PROMPT.starts_with("Your task is to generate a clinical note based on a conversation"));
        assert!(NOTE_GENERATION_PROMPT.contains("**Conversation:**\n{prompt}\n\n**Note:**"));
    }

    #[test]
    #[should_panic]
    fn level_zero_has_no_prompt() {
        default_template(0);
    }
}
