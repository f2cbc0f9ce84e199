//! Guidance-generation prompt and the newline-joined response format shared
//! by fine-tuning and preference records.

use crate::goal::NONE_MARKER;
use crate::types::ContextBundle;

const GUIDANCE_TEMPLATE: &str = "\
Background:
As a Proactive Guidance Model, you are tasked with enhancing user experience in a multi-turn \
dialogue system by predicting potential future inquiries. Through careful analysis of the \
current and past interactions, you will help drive the conversation towards fulfilling the \
user's objectives.

Input Explanation:
The following elements are provided for your analysis:
- Current round's user query ([Q]).
- The corresponding system's answer ([A]).
- Contextual information from previous rounds, which includes:
  - A summary of the dialogue thus far ([S]).
  - Explicit goal analysis, detailing the objectives and needs of the user ([E]).

Thought Process:
In predicting the user's next questions, you should:
1. Assess if the current round's answer ([A]) has adequately addressed the user's query ([Q]).
2. Utilize the contextual information, particularly the summary and explicit goal analysis, to \
comprehend the user's continuous journey and objectives within the dialogue.
3. Anticipate the user's potential next steps by considering the dialogue's progression and any \
identified goals or needs.
4. Generate {k} relevant and contextually appropriate questions as guidance that the user might \
ask next.

Output Format Requirements:
Present your predictions structured as follows:
Guidance_1\\n...\\nGuidance_{k}
";

fn or_none(s: &str) -> &str {
    if s.trim().is_empty() {
        NONE_MARKER
    } else {
        s
    }
}

/// Renders the guidance prompt `x` from the query, answer and goal context.
pub fn render_guidance_prompt(query: &str, answer: &str, context: &ContextBundle, k: usize) -> String {
    let mut out = GUIDANCE_TEMPLATE.replace("{k}", &k.to_string());
    out.push_str("\n[Q]\n");
    out.push_str(or_none(query));
    out.push_str("\n[A]\n");
    out.push_str(or_none(answer));
    out.push_str("\n[S]\n");
    out.push_str(or_none(&context.summary));
    out.push_str("\n[E]\n");
    out.push_str(or_none(&context.explicit_goal));
    out.push('\n');
    out
}

/// Joins phrases into the `Guidance_1\n...\nGuidance_k` response form.
pub fn join_guidance<S: AsRef<str>>(phrases: &[S]) -> String {
    phrases
        .iter()
        .map(|p| p.as_ref().trim())
        .collect::<Vec<_>>()
        .join("\n")
}

/// Splits a response back into trimmed, non-empty phrases.
pub fn split_guidance(response: &str) -> Vec<String> {
    response
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect()
}
