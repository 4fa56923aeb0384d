//! Agent instructions and step prompts for the CoT, E2G-base and E2G-Pro
//! strategies.
//!
//! A rendered prompt is laid out as
//!
//! ```text
//! # <agent instruction>
//! # <strategy instruction line>
//! # Context: <context>
//! # Question: <query>
//! <options, output format>
//! ```
//!
//! The E and G steps of a two-step run share every line except the context.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::task_model::{Instance, TaskKind, TaskName};

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("no agent roles registered for task `{0}`")]
    UnregisteredTask(TaskName),
    #[error("context text is empty")]
    EmptyContext,
    #[error("strategy `{0}` is single-step; a G-step prompt cannot be built")]
    GStepNotAllowed(StrategyName),
    #[error("template slot `{{{0}}}` left unfilled")]
    UnfilledSlot(String),
    #[error("unknown strategy `{0}`")]
    UnknownStrategy(String),
    #[error("failed to read template {path}: {message}")]
    TemplateIo { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StrategyName {
    #[serde(rename = "cot")]
    Cot,
    #[serde(rename = "e2g-base")]
    E2gBase,
    #[serde(rename = "e2g-pro")]
    E2gPro,
}

impl StrategyName {
    pub const ALL: [StrategyName; 3] = [StrategyName::Cot, StrategyName::E2gBase, StrategyName::E2gPro];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyName::Cot => "cot",
            StrategyName::E2gBase => "e2g-base",
            StrategyName::E2gPro => "e2g-pro",
        }
    }
}

impl fmt::Display for StrategyName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyName {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StrategyName::ALL
            .into_iter()
            .find(|n| n.as_str() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| PromptError::UnknownStrategy(s.to_string()))
    }
}

pub const COT_LINE: &str = "Think step-by-step";
pub const E2G_BASE_LINE: &str = "Generate the answer with evidence and explanation";
// Hyphenation reproduced as published.
pub const E2G_PRO_LINE: &str = "Think step by step with evidence and explanation. Generate both answer and step-by-step-reasoning-with-evidence-and-explanation";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Strategy {
    pub name: StrategyName,
    pub instruction_line: String,
    /// Maximum number of LLM calls the strategy supports per instance.
    pub steps: u8,
}

impl Strategy {
    pub fn of(name: StrategyName) -> Self {
        let (line, steps) = match name {
            StrategyName::Cot => (COT_LINE, 1),
            StrategyName::E2gBase => (E2G_BASE_LINE, 2),
            StrategyName::E2gPro => (E2G_PRO_LINE, 2),
        };
        Self {
            name,
            instruction_line: line.to_string(),
            steps,
        }
    }

    pub fn asks_for_evidence(&self) -> bool {
        self.name != StrategyName::Cot
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Step {
    E,
    G,
    #[serde(rename = "single")]
    Single,
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Step::E => "E",
            Step::G => "G",
            Step::Single => "single",
        })
    }
}

/// Role names filling the agent instruction slots for one task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AgentRoles {
    pub task_label: &'static str,
    pub input_role: &'static str,
    pub output_role: &'static str,
    /// Label heading the query block.
    pub query_label: &'static str,
}

pub fn agent_roles(task: TaskName) -> Option<AgentRoles> {
    let roles = match task {
        TaskName::LogicalMrc => AgentRoles {
            task_label: "logical reasoning",
            input_role: "question",
            output_role: "answer",
            query_label: "Question",
        },
        TaskName::ArithmeticMrc => AgentRoles {
            task_label: "arithmetic reasoning",
            input_role: "question",
            output_role: "answer",
            query_label: "Question",
        },
        TaskName::MultihopQa => AgentRoles {
            task_label: "multi-hop question answering",
            input_role: "question",
            output_role: "answer",
            query_label: "Question",
        },
        TaskName::OpenQa => AgentRoles {
            task_label: "open-domain question answering",
            input_role: "question",
            output_role: "answer",
            query_label: "Question",
        },
        TaskName::FactVerification => AgentRoles {
            task_label: "text classification",
            input_role: "claim",
            output_role: "judgement to the claim ('SUPPORTS' or 'REFUTES')",
            query_label: "Claim",
        },
        TaskName::Dialogue => AgentRoles {
            task_label: "knowledge grounded dialogue generation",
            input_role: "previous dialogue",
            output_role: "next turn dialogue",
            query_label: "Previous dialogue",
        },
        TaskName::LongFormQa => AgentRoles {
            task_label: "long-form question answering",
            input_role: "question",
            output_role: "long-form answer",
            query_label: "Question",
        },
    };
    Some(roles)
}

/// Prefixes a noun phrase with "a" or "an".
pub fn with_article(phrase: &str) -> String {
    let vowel = phrase
        .chars()
        .next()
        .map(|c| "aeiouAEIOU".contains(c))
        .unwrap_or(false);
    format!("{} {}", if vowel { "an" } else { "a" }, phrase)
}

/// Fills `{slot}` placeholders; every placeholder must be supplied.
pub fn render_template(template: &str, slots: &[(&str, &str)]) -> Result<String, PromptError> {
    let mut out = template.to_string();
    for (name, value) in slots {
        out = out.replace(&format!("{{{name}}}"), value);
    }
    if let Some(start) = out.find('{') {
        if let Some(len) = out[start..].find('}') {
            let slot = &out[start + 1..start + len];
            if !slot.is_empty() && slot.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(PromptError::UnfilledSlot(slot.to_string()));
            }
        }
    }
    Ok(out)
}

/// Template text resources. Defaults are compiled in; any file present in
/// an override directory replaces the corresponding default.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplates {
    pub agent_instruction: String,
    pub classification_instruction: String,
    pub evidence_format: String,
    pub reasoning_format: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            agent_instruction: include_str!("../resources/templates/agent_instruction.txt").to_string(),
            classification_instruction: include_str!("../resources/templates/classification_instruction.txt")
                .to_string(),
            evidence_format: include_str!("../resources/templates/evidence_format.txt").to_string(),
            reasoning_format: include_str!("../resources/templates/reasoning_format.txt").to_string(),
        }
    }
}

impl PromptTemplates {
    pub fn with_overrides(dir: &Path) -> Result<Self, PromptError> {
        let mut templates = Self::default();
        let fields: [(&str, &mut String); 4] = [
            ("agent_instruction.txt", &mut templates.agent_instruction),
            ("classification_instruction.txt", &mut templates.classification_instruction),
            ("evidence_format.txt", &mut templates.evidence_format),
            ("reasoning_format.txt", &mut templates.reasoning_format),
        ];
        for (file, slot) in fields {
            let path = dir.join(file);
            if path.exists() {
                *slot = fs::read_to_string(&path).map_err(|e| PromptError::TemplateIo {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?;
            }
        }
        Ok(templates)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentInstruction {
    pub task_label: String,
    pub input_role: String,
    pub output_role: String,
    pub rendered: String,
}

pub fn build_agent_instruction(task: &TaskKind) -> Result<AgentInstruction, PromptError> {
    build_agent_instruction_with(task, &PromptTemplates::default())
}

pub fn build_agent_instruction_with(
    task: &TaskKind,
    templates: &PromptTemplates,
) -> Result<AgentInstruction, PromptError> {
    let roles = agent_roles(task.name).ok_or(PromptError::UnregisteredTask(task.name))?;
    let template = if task.name == TaskName::FactVerification {
        &templates.classification_instruction
    } else {
        &templates.agent_instruction
    };
    let rendered = render_template(
        template.trim_end(),
        &[
            ("task", &with_article(roles.task_label)),
            ("input", &with_article(roles.input_role)),
            ("output", &with_article(roles.output_role)),
        ],
    )?;
    Ok(AgentInstruction {
        task_label: roles.task_label.to_string(),
        input_role: roles.input_role.to_string(),
        output_role: roles.output_role.to_string(),
        rendered,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub strategy: StrategyName,
    pub step: Step,
    pub agent_instruction: String,
    pub instruction_line: String,
    pub context_block: String,
    pub query_block: String,
    pub full_text: String,
    pub approx_tokens: usize,
}

/// Rough token count: characters / 4, rounded up.
pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

fn query_block(instance: &Instance, strategy: &Strategy, templates: &PromptTemplates) -> String {
    let label = agent_roles(instance.task.name)
        .map(|r| r.query_label)
        .unwrap_or("Question");
    let mut block = format!("# {label}: {}", instance.query);
    if let Some(options) = &instance.options {
        block.push_str("\n# Options:");
        for (i, opt) in options.iter().enumerate() {
            block.push_str(&format!("\n({}) {}", Instance::option_key(i), opt));
        }
    }
    let format = if strategy.asks_for_evidence() {
        &templates.evidence_format
    } else {
        &templates.reasoning_format
    };
    block.push('\n');
    block.push_str(format.trim_end());
    block
}

pub fn build_step_prompt(
    instance: &Instance,
    strategy: &Strategy,
    step: Step,
    context_text: &str,
) -> Result<PromptBundle, PromptError> {
    build_step_prompt_with(instance, strategy, step, context_text, &PromptTemplates::default())
}

pub fn build_step_prompt_with(
    instance: &Instance,
    strategy: &Strategy,
    step: Step,
    context_text: &str,
    templates: &PromptTemplates,
) -> Result<PromptBundle, PromptError> {
    if context_text.trim().is_empty() {
        return Err(PromptError::EmptyContext);
    }
    if step == Step::G && strategy.steps < 2 {
        return Err(PromptError::GStepNotAllowed(strategy.name));
    }
    let agent = build_agent_instruction_with(&instance.task, templates)?;
    let context_block = format!("# Context: {context_text}");
    let query_block = query_block(instance, strategy, templates);
    let full_text = format!(
        "# {}\n# {}\n{}\n{}",
        agent.rendered, strategy.instruction_line, context_block, query_block
    );
    Ok(PromptBundle {
        strategy: strategy.name,
        step,
        agent_instruction: agent.rendered,
        instruction_line: strategy.instruction_line.clone(),
        context_block,
        query_block,
        approx_tokens: estimate_tokens(&full_text),
        full_text,
    })
}
