//! Instruction rendering per task kind.

use dxgate_core::api::Task;
use dxgate_core::text::{tokenize_words, TokenizerOptions};

use crate::config::TaskTemplates;

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedTask {
    pub message: String,
    pub max_tokens: Option<u32>,
}

/// Fills the task template with `text`. Translation caps output at
/// `translate_length_factor` times the input's word-token count.
pub fn render(task: &Task, text: &str, templates: &TaskTemplates) -> RenderedTask {
    match task {
        Task::Summarize => RenderedTask {
            message: templates
                .summarize
                .replace("{max_tokens}", &templates.summarize_max_tokens.to_string())
                .replace("{text}", text),
            max_tokens: Some(templates.summarize_max_tokens),
        },
        Task::Translate { target_language } => {
            let n = tokenize_words(text, TokenizerOptions::default()).len();
            let cap = ((n as f64) * templates.translate_length_factor).ceil().max(1.0) as u32;
            RenderedTask {
                message: templates
                    .translate
                    .replace("{language}", target_language)
                    .replace("{text}", text),
                max_tokens: Some(cap),
            }
        }
        Task::Custom { template } => RenderedTask {
            message: template.replace("{text}", text),
            max_tokens: None,
        },
    }
}
