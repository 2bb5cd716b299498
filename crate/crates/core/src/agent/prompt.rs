//! Planner prompt rendering.

use crate::backends::{ChatMessage, ChatRequest, ToolSchema};

pub const SUMMARY_HEADER: &str = "## Global summary\n";
pub const VIDEO_HEADER: &str = "## Video\n";
pub const QUESTION_HEADER: &str = "## Question\n";
pub const MEMORY_HEADER: &str = "## Memory\n";
pub const STEP_MARKER: &str = "### Step ";
pub const WHOLE_RANGE_PREFIX: &str = "Whole video range: ";

const GOAL: &str = "\
You will be given a set of tools to assist you exploring the video, understanding it and reasoning the answer.
Please follow the THINK → ACT → OBSERVE loop:
• THOUGHT: Reason step-by-step about what question to ask and which tool to call next.
• ACTION: Call exactly one tool that moves you closer to the final answer.
• OBSERVATION: Summarize the tool call's output.
Continue the loop until the user's query is fully resolved, then end your turn with the final answer.";

const TOOLS: &str = "\
Here are tools you can use to reveal your reasoning process whenever the provided information is insufficient:
• global_scene_browse_tool: for scene-related query to explore scenarios, temporal orders, and contextual structure in a rough manner without precise details (e.g., first appearance, second song, third collision).
• entity_search_tool: for entity-related information retrieval, finding important subjects involved in events.
• clip_caption_search_wtime_tool: to search from rough captions and audio transcriptions of local clips within a list of time ranges related to a query. If you want to search from the whole video, use the whole video time range.
• clip_visual_search_wtime_tool: to search from visual features of local clips within a list of time ranges (list[tuple[HH:MM:SS, HH:MM:SS]]) related to a query. If you want to search from the whole video, use the whole video time range. This tool may provide more detailed information as a supplement to clip_caption_search_wtime_tool.
• clip_caption_inspect_tool: to extract rough captions and audio transcriptions of local clips within any list of time ranges (list[tuple[HH:MM:SS, HH:MM:SS]]). This tool is suitable for further inspecting what happened in a time range before or after some events happened.
• visual_inspect_tool: to extract details from local visual clips within a narrow list of time ranges that covers less than 50 seconds to answer a question or retrieve query-related details. When the time ranges cover over 50 seconds, first use clip_caption_inspect_tool to get a rough context.
• finish: Once you believe you have found the answer, you can call the finish tool with an answer.";

const TOOL_PREFERENCES: &str = "\
• When no context is given, call global_scene_browse_tool for scene-related queries to get an overview of related context and timelines,
or call clip_caption_search_wtime_tool for event-related queries to get a rough context and timelines,
or call entity_search_tool for entity-related queries.
• When you cannot locate the needed context from scene or entity tools, use clip_caption_search_wtime_tool or clip_visual_search_wtime_tool to expand your search.
• If the retrieved material by clip_caption_search_wtime_tool lacks relevant contexts, further call clip_visual_search_wtime_tool for more fine-grained search.
• If the retrieved material lacks precise, question-relevant detail (e.g., an unknown name, count) or you are uncertain of an answer after searching, call clip_caption_inspect_tool
or inspect frames with visual_inspect_tool with a list of time ranges to take a closer look.
• After locating an answer in the script, always make a CONFIRM with visual_inspect_tool query.";

fn hints(max_steps: usize) -> String {
    format!(
        "\
• Before giving the final answer, confirm critical visual or numeric facts with visual_inspect_tool.
• If you call clip_caption_search_wtime_tool in three consecutive times but still cannot find useful information to answer the question, please try clip_visual_search_wtime_tool to get more detailed information.
• You have at most {max_steps} iterations of THINK→ACT→OBSERVE; plan strategically. Avoid redundant information retrieval steps.
• To make a good plan to questions that need complex reasoning, sometimes you need to first ask some other related contexts instead of directly asking the target question,
• For questions that need counting the number of times an event occurs over time, call global_scene_browse_tool first.
If you are uncertain about its answer, please search for related events or subjects without counting first to find all related information, then do the counting based on observations.
• Your final answer must be concise and directly address the question."
    )
}

/// System message: goal, tools, tool preferences and hints, in that order.
pub fn system_prompt(max_steps: usize) -> String {
    format!(
        "GOAL\n{GOAL}\n\nTOOLS\n{TOOLS}\n\nTOOL PREFERENCES\n{TOOL_PREFERENCES}\n\nHINTS\n{}\n",
        hints(max_steps)
    )
}

/// One rendered memory entry after the initial summary.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBlock {
    pub step: usize,
    pub thought: String,
    pub tool: String,
    pub arguments: String,
    pub observation: String,
}

impl MemoryBlock {
    pub fn render(&self, observation: &str) -> String {
        let mut out = format!("{STEP_MARKER}{}\n", self.step);
        if !self.thought.is_empty() {
            out.push_str(&format!("Thought: {}\n", self.thought));
        }
        out.push_str(&format!("Action: {} {}\nObservation:\n{}\n", self.tool, self.arguments, observation));
        out
    }
}

/// User message: summary, video range, question, then memory (if any).
pub fn user_message(summary: &str, whole_range: [&str; 2], question: &str, memory: &str) -> String {
    let mut out = format!(
        "{SUMMARY_HEADER}{}\n\n{VIDEO_HEADER}{WHOLE_RANGE_PREFIX}[\"{}\", \"{}\"]\n\n{QUESTION_HEADER}{}\n",
        summary.trim_end(),
        whole_range[0],
        whole_range[1],
        question.trim_end()
    );
    if !memory.is_empty() {
        out.push_str(&format!("\n{MEMORY_HEADER}{}", memory));
    }
    out
}

pub fn planner_request(
    max_steps: usize,
    tools: Vec<ToolSchema>,
    summary: &str,
    whole_range: [&str; 2],
    question: &str,
    memory: &str,
) -> ChatRequest {
    let mut req = ChatRequest::new(vec![
        ChatMessage::system(system_prompt(max_steps)),
        ChatMessage::user(user_message(summary, whole_range, question, memory)),
    ]);
    req.tools = tools;
    req
}
