//! Prompt templates for index construction and the auxiliary reasoner calls.
//!
//! Every request starts with a `Task: <name>` line and carries its inputs as
//! a JSON document after an `Input:` marker, so replies and recorded sessions
//! can be matched back to the step that produced them.

use serde_json::Value;

use crate::backends::{ChatMessage, ChatRequest};

pub const CAPTION_SEGMENT: &str = "caption_segment";
pub const EXTRACT_ENTITIES: &str = "extract_entities";
pub const CANONICALIZE: &str = "canonicalize_entities";
pub const MERGE_ENTITIES: &str = "merge_entities";
pub const RECAPTION: &str = "recaption_entity_segment";
pub const SCENE_BOUNDARIES: &str = "detect_scene_boundaries";
pub const SUMMARIZE_SCENE: &str = "summarize_scene";
pub const SUMMARIZE_GLOBAL: &str = "summarize_video";
pub const SCENE_BROWSE: &str = "scene_browse";
pub const VISUAL_INSPECT: &str = "visual_inspect";
pub const FORCED_ANSWER: &str = "forced_answer";
pub const CLARIFY_ANSWER: &str = "clarify_answer";

const INPUT_MARKER: &str = "Input:\n";

pub fn instructions(task: &str) -> &'static str {
    match task {
        CAPTION_SEGMENT => "You are given frames sampled from one video segment together with the \
speaker labels and transcript heard in it. Describe what happens in the segment (people, \
objects, actions, on-screen text, setting). Then, for every speaker label listed, describe which \
visible person is speaking: appearance, actions and any identity cues. Leave speaker_info empty \
when no speakers are listed.\n\
Reply with JSON: {\"caption\": string, \"speaker_info\": string}",
        EXTRACT_ENTITIES => "Read the segment description and list its salient entities: \
characters, locations, events, and other notable subjects. Give each a short name, a category \
(character, location, event or other) and a one or two sentence description grounded in this \
segment. For characters, list the speaker labels (from the provided speakers) whose voice \
belongs to that character, if any.\n\
Reply with JSON: {\"entities\": [{\"name\": string, \"category\": string, \"description\": \
string, \"speakers\": [string]}]}",
        CANONICALIZE => "The mentions below were grouped because their descriptions are similar. \
Decide whether they refer to the same underlying entity. If they do, return a single group with a \
unified name and a description covering all mentions. If some refer to different entities, \
split them into groups. Every mention id must appear in exactly one group.\n\
Reply with JSON: {\"groups\": [{\"name\": string, \"description\": string, \"members\": [int]}]}",
        MERGE_ENTITIES => "The entities below share a speaker voice and are the same person. \
Write one name and one description that covers every appearance.\n\
Reply with JSON: {\"name\": string, \"description\": string}",
        RECAPTION => "Rewrite the segment description so that it focuses only on the given \
entity: its appearance, actions and the events it takes part in within this segment. Omit \
unrelated content. Reply with plain text.",
        SCENE_BOUNDARIES => "The segments below are consecutive parts of a video. Group them into \
scenes with a continuous narrative focus. Return the indices of segments that start a new scene. \
Only use indices that appear in the input.\n\
Reply with JSON: {\"boundaries\": [int]}",
        SUMMARIZE_SCENE => "Summarize this scene in a short paragraph: its key characters, \
events, and transitions. Reply with plain text.",
        SUMMARIZE_GLOBAL => "Write a global summary of the video from its scene summaries: the \
main storyline, recurring entities, and overall context such as background and video type. \
Reply with plain text.",
        SCENE_BROWSE => "Given a question and the list of scenes of a video, pick the scenes that \
are relevant to the question and describe their storyline and order.\n\
Reply with JSON: {\"scene_ids\": [int], \"response\": string}",
        VISUAL_INSPECT => "Answer the question using only what is visible in the frames. Be \
specific about counts, text, colours and actions.",
        FORCED_ANSWER => "The step budget is exhausted. Based only on the information gathered \
so far, give your best final answer to the question. Be concise.",
        CLARIFY_ANSWER => "The answer below should select one of the options. Reply with the \
single option label it selects and nothing else.",
        _ => "",
    }
}

/// Renders the `Task:` header plus instructions.
pub fn system_text(task: &str) -> String {
    format!("Task: {task}\n{}", instructions(task))
}

pub fn input_text(input: &Value) -> String {
    format!(
        "{INPUT_MARKER}{}",
        serde_json::to_string_pretty(input).expect("JSON values always serialize")
    )
}

/// Two-message request: task instructions, then the JSON inputs.
pub fn request(task: &str, input: &Value) -> ChatRequest {
    ChatRequest::new(vec![
        ChatMessage::system(system_text(task)),
        ChatMessage::user(input_text(input)),
    ])
}

/// Single prompt string for vision requests.
pub fn vision_prompt(task: &str, input: &Value) -> String {
    format!("{}\n\n{}", system_text(task), input_text(input))
}

/// Task name from a leading `Task:` line.
pub fn task_of(text: &str) -> Option<&str> {
    text.lines().next()?.strip_prefix("Task: ").map(str::trim)
}

/// JSON document following the `Input:` marker.
pub fn input_of(text: &str) -> Option<Value> {
    let at = text.find(INPUT_MARKER)?;
    serde_json::from_str(&text[at + INPUT_MARKER.len()..]).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn task_and_input_round_trip() {
        let req = request(SUMMARIZE_SCENE, &json!({"span": "00:00:00–00:00:30"}));
        assert_eq!(task_of(&req.messages[0].content), Some(SUMMARIZE_SCENE));
        assert_eq!(input_of(&req.messages[1].content).unwrap()["span"], "00:00:00–00:00:30");
        let prompt = vision_prompt(VISUAL_INSPECT, &json!({"question": "q"}));
        assert_eq!(task_of(&prompt), Some(VISUAL_INSPECT));
        assert_eq!(input_of(&prompt).unwrap()["question"], "q");
    }
}
