//! Harness conditions, their stage sequences, and prompt construction.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::task::TaskSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HarnessCondition {
    ModelOnly,
    MinimalShell,
    Pipeline,
    PipelineNoPlan,
    PipelineNoVerify,
    PipelineNoRecover,
}

impl HarnessCondition {
    pub const ALL: [HarnessCondition; 6] = [
        HarnessCondition::ModelOnly,
        HarnessCondition::MinimalShell,
        HarnessCondition::Pipeline,
        HarnessCondition::PipelineNoPlan,
        HarnessCondition::PipelineNoVerify,
        HarnessCondition::PipelineNoRecover,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            HarnessCondition::ModelOnly => "model-only",
            HarnessCondition::MinimalShell => "minimal-shell",
            HarnessCondition::Pipeline => "pipeline",
            HarnessCondition::PipelineNoPlan => "pipeline-no-plan",
            HarnessCondition::PipelineNoVerify => "pipeline-no-verify",
            HarnessCondition::PipelineNoRecover => "pipeline-no-recover",
        }
    }

    /// The full pipeline and its three ablations.
    pub fn is_pipeline_family(self) -> bool {
        !matches!(self, HarnessCondition::ModelOnly | HarnessCondition::MinimalShell)
    }

    pub fn has_stage(self, stage: StageKind) -> bool {
        stage_sequence(self).contains(&stage)
    }
}

impl fmt::Display for HarnessCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HarnessCondition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        HarnessCondition::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown harness condition `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Plan,
    Execute,
    Verify,
    Recover,
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageKind::Plan => "plan",
            StageKind::Execute => "execute",
            StageKind::Verify => "verify",
            StageKind::Recover => "recover",
        })
    }
}

pub fn stage_sequence(condition: HarnessCondition) -> &'static [StageKind] {
    use StageKind::*;
    match condition {
        HarnessCondition::ModelOnly | HarnessCondition::MinimalShell => &[Execute],
        HarnessCondition::Pipeline => &[Plan, Execute, Verify, Recover],
        HarnessCondition::PipelineNoPlan => &[Execute, Verify, Recover],
        HarnessCondition::PipelineNoVerify => &[Plan, Execute],
        HarnessCondition::PipelineNoRecover => &[Plan, Execute, Verify],
    }
}

/// Per-call inputs that vary between stages of one run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StageContext {
    pub plan: Option<String>,
    pub prior_output: Option<String>,
    pub failure_message: Option<String>,
    /// Rendered search evidence, appended to the provided material.
    pub evidence: Option<String>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HarnessError {
    #[error("stage {stage} is not part of the {condition} sequence")]
    StageNotInSequence {
        condition: HarnessCondition,
        stage: StageKind,
    },
    #[error("{stage} prompt needs `{slot}` in its context")]
    MissingContext { stage: StageKind, slot: &'static str },
}

#[derive(Debug, Error)]
#[error("cannot read prompt template {path}: {source}")]
pub struct TemplateLoadError {
    pub path: String,
    #[source]
    pub source: std::io::Error,
}

/// Prompt templates with `{name}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub raw: String,
    pub shell: String,
    pub plan: String,
    pub execute: String,
    pub execute_with_plan: String,
    pub verify: String,
    pub recover: String,
    /// Whether the verify prompt shows the plan alongside the instruction.
    pub verify_includes_plan: bool,
}

const TEMPLATE_FILES: [&str; 7] = [
    "raw",
    "shell",
    "plan",
    "execute",
    "execute_with_plan",
    "verify",
    "recover",
];

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates {
            raw: include_str!("../prompts/raw.txt").to_string(),
            shell: include_str!("../prompts/shell.txt").to_string(),
            plan: include_str!("../prompts/plan.txt").to_string(),
            execute: include_str!("../prompts/execute.txt").to_string(),
            execute_with_plan: include_str!("../prompts/execute_with_plan.txt").to_string(),
            verify: include_str!("../prompts/verify.txt").to_string(),
            recover: include_str!("../prompts/recover.txt").to_string(),
            verify_includes_plan: true,
        }
    }
}

impl PromptTemplates {
    /// Loads `<name>.txt` overrides from `dir`; missing files keep the
    /// built-in default.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateLoadError> {
        let mut t = PromptTemplates::default();
        for name in TEMPLATE_FILES {
            let path = dir.join(format!("{name}.txt"));
            if !path.exists() {
                continue;
            }
            let text = fs::read_to_string(&path).map_err(|source| TemplateLoadError {
                path: path.display().to_string(),
                source,
            })?;
            *t.slot_mut(name) = text;
        }
        Ok(t)
    }

    fn slot_mut(&mut self, name: &str) -> &mut String {
        match name {
            "raw" => &mut self.raw,
            "shell" => &mut self.shell,
            "plan" => &mut self.plan,
            "execute" => &mut self.execute,
            "execute_with_plan" => &mut self.execute_with_plan,
            "verify" => &mut self.verify,
            "recover" => &mut self.recover,
            _ => unreachable!("unknown template slot {name}"),
        }
    }
}

/// Builds the prompt for one stage. Pure: identical inputs give identical
/// text.
pub fn build_prompt(
    templates: &PromptTemplates,
    condition: HarnessCondition,
    stage: StageKind,
    task: &TaskSpec,
    context: &StageContext,
) -> Result<String, HarnessError> {
    if !condition.has_stage(stage) {
        return Err(HarnessError::StageNotInSequence { condition, stage });
    }
    let template = match stage {
        StageKind::Plan => &templates.plan,
        StageKind::Execute => match condition {
            HarnessCondition::ModelOnly => &templates.raw,
            HarnessCondition::MinimalShell => &templates.shell,
            _ if condition.has_stage(StageKind::Plan) => &templates.execute_with_plan,
            _ => &templates.execute,
        },
        StageKind::Verify => {
            if context.prior_output.is_none() {
                return Err(HarnessError::MissingContext {
                    stage,
                    slot: "prior_output",
                });
            }
            &templates.verify
        }
        StageKind::Recover => {
            if context.failure_message.is_none() {
                return Err(HarnessError::MissingContext {
                    stage,
                    slot: "failure_message",
                });
            }
            &templates.recover
        }
    };

    let input_data = match &context.evidence {
        Some(ev) if task.input_data.is_empty() => ev.clone(),
        Some(ev) => format!("{}\n\n{ev}", task.input_data),
        None => task.input_data.clone(),
    };
    let constraints = render_constraints(task);
    let plan = match stage {
        StageKind::Verify if !templates.verify_includes_plan => "(not shown)".to_string(),
        _ => context
            .plan
            .clone()
            .filter(|p| !p.trim().is_empty())
            .unwrap_or_else(|| "(no plan)".to_string()),
    };

    Ok(render(template, |name| match name {
        "instruction" => Some(task.instruction.clone()),
        "input_data" => Some(input_data.clone()),
        "expected_format" => Some(task.expected_format.clone()),
        "constraints" => Some(constraints.clone()),
        "plan" => Some(plan.clone()),
        "prior_output" => Some(context.prior_output.clone().unwrap_or_default()),
        "failure_message" => Some(context.failure_message.clone().unwrap_or_default()),
        _ => None,
    }))
}

fn render_constraints(task: &TaskSpec) -> String {
    if task.constraints.is_empty() {
        return "(none)".to_string();
    }
    task.constraints
        .iter()
        .map(|c| format!("- {}", c.kind.describe()))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Single-pass placeholder substitution. Substituted text is never
/// rescanned, and unknown `{names}` are kept verbatim.
fn render(template: &str, lookup: impl Fn(&str) -> Option<String>) -> String {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let after = &rest[start + 1..];
        let name_len = after
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
            .unwrap_or(after.len());
        let name = &after[..name_len];
        if name_len > 0 && after[name_len..].starts_with('}') {
            if let Some(value) = lookup(name) {
                out.push_str(&value);
                rest = &after[name_len + 1..];
                continue;
            }
        }
        out.push('{');
        rest = after;
    }
    out.push_str(rest);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{Constraint, ConstraintKind, TaskCategory};

    fn task() -> TaskSpec {
        TaskSpec {
            id: "T5-04".into(),
            category: TaskCategory::T5,
            instruction: "Write a status report.".into(),
            input_data: "Quarterly notes".into(),
            expected_format: "plain text".into(),
            constraints: vec![Constraint::hard(ConstraintKind::CharLimit { max: 500 })],
            requires_tool: false,
        }
    }

    #[test]
    fn sequences() {
        use StageKind::*;
        assert_eq!(
            stage_sequence(HarnessCondition::Pipeline),
            [Plan, Execute, Verify, Recover]
        );
        assert_eq!(stage_sequence(HarnessCondition::PipelineNoVerify), [Plan, Execute]);
        assert_eq!(stage_sequence(HarnessCondition::ModelOnly), [Execute]);
        assert_eq!(stage_sequence(HarnessCondition::MinimalShell), [Execute]);
        assert_eq!(
            stage_sequence(HarnessCondition::PipelineNoPlan),
            [Execute, Verify, Recover]
        );
        assert_eq!(
            stage_sequence(HarnessCondition::PipelineNoRecover),
            [Plan, Execute, Verify]
        );
        for c in HarnessCondition::ALL {
            let seq = stage_sequence(c);
            if seq.contains(&Recover) {
                assert!(seq.contains(&Verify), "{c}");
            }
        }
    }

    #[test]
    fn shell_wraps_instruction() {
        let p = build_prompt(
            &PromptTemplates::default(),
            HarnessCondition::MinimalShell,
            StageKind::Execute,
            &task(),
            &StageContext::default(),
        )
        .unwrap();
        let start = p.find("[TASK START]").unwrap();
        let instr = p.find("Write a status report.").unwrap();
        let end = p.find("[OUTPUT]").unwrap();
        assert!(start < instr && instr < end);
        assert_eq!(p.matches("[TASK START]").count(), 1);
        assert_eq!(p.matches("[OUTPUT]").count(), 1);
    }

    #[test]
    fn model_only_is_raw() {
        let p = build_prompt(
            &PromptTemplates::default(),
            HarnessCondition::ModelOnly,
            StageKind::Execute,
            &task(),
            &StageContext::default(),
        )
        .unwrap();
        assert!(!p.contains("[TASK START]"));
        assert!(p.starts_with("Write a status report."));
    }

    #[test]
    fn recover_carries_failure_verbatim() {
        let ctx = StageContext {
            prior_output: Some("long text".into()),
            failure_message: Some("output 542 chars exceeds 500".into()),
            ..Default::default()
        };
        let p = build_prompt(
            &PromptTemplates::default(),
            HarnessCondition::Pipeline,
            StageKind::Recover,
            &task(),
            &ctx,
        )
        .unwrap();
        assert!(p.contains("output 542 chars exceeds 500"));
        assert!(p.contains("long text"));
    }

    #[test]
    fn plan_not_available_for_model_only() {
        let err = build_prompt(
            &PromptTemplates::default(),
            HarnessCondition::ModelOnly,
            StageKind::Plan,
            &task(),
            &StageContext::default(),
        )
        .unwrap_err();
        assert_eq!(
            err,
            HarnessError::StageNotInSequence {
                condition: HarnessCondition::ModelOnly,
                stage: StageKind::Plan
            }
        );
    }

    #[test]
    fn plan_restates_limit() {
        let p = build_prompt(
            &PromptTemplates::default(),
            HarnessCondition::Pipeline,
            StageKind::Plan,
            &task(),
            &StageContext::default(),
        )
        .unwrap();
        assert!(p.contains("500"));
    }

    #[test]
    fn substituted_text_is_not_rescanned() {
        let mut t = task();
        t.instruction = "literal {plan} and {unknown}".into();
        let ctx = StageContext {
            plan: Some("PLAN".into()),
            ..Default::default()
        };
        let p = build_prompt(
            &PromptTemplates::default(),
            HarnessCondition::Pipeline,
            StageKind::Execute,
            &t,
            &ctx,
        )
        .unwrap();
        assert!(p.contains("literal {plan} and {unknown}"));
        assert!(p.contains("PLAN"));
    }

    #[test]
    fn render_keeps_stray_braces() {
        let out = render("a {b} {c d} {} {", |n| (n == "b").then(|| "B".to_string()));
        assert_eq!(out, "a B {c d} {} {");
    }

    #[test]
    fn evidence_is_appended_to_material() {
        let ctx = StageContext {
            evidence: Some("[EVIDENCE]\nx\n[/EVIDENCE]".into()),
            ..Default::default()
        };
        let p = build_prompt(
            &PromptTemplates::default(),
            HarnessCondition::ModelOnly,
            StageKind::Execute,
            &task(),
            &ctx,
        )
        .unwrap();
        assert!(p.contains("Quarterly notes\n\n[EVIDENCE]"));
    }

    #[test]
    fn verify_can_hide_plan() {
        let templates = PromptTemplates {
            verify_includes_plan: false,
            ..Default::default()
        };
        let ctx = StageContext {
            plan: Some("SECRET PLAN".into()),
            prior_output: Some("answer".into()),
            ..Default::default()
        };
        let p = build_prompt(&templates, HarnessCondition::Pipeline, StageKind::Verify, &task(), &ctx).unwrap();
        assert!(!p.contains("SECRET PLAN"));
        assert!(p.contains("answer"));
    }

    #[test]
    fn condition_names_round_trip() {
        for c in HarnessCondition::ALL {
            assert_eq!(c.as_str().parse::<HarnessCondition>().unwrap(), c);
            assert_eq!(serde_json::to_string(&c).unwrap(), format!("\"{c}\""));
        }
    }
}
