//! Task files: one JSON task per line.

use std::fmt::Write as _;
use std::path::Path;

use taml_core::taskgen::Task;

use crate::error::CliError;

pub fn to_jsonl(tasks: &[Task]) -> String {
    let mut out = String::new();
    for t in tasks {
        out.push_str(&serde_json::to_string(t).expect("task serializes"));
        out.push('\n');
    }
    out
}

/// Parses a task file; errors name the 1-based line.
pub fn from_jsonl(text: &str) -> Result<Vec<Task>, CliError> {
    let mut tasks = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let task: Task =
            serde_json::from_str(line).map_err(|e| CliError::Config(format!("task file line {}: {e}", i + 1)))?;
        tasks.push(task);
    }
    Ok(tasks)
}

pub fn save(tasks: &[Task], path: &Path) -> Result<(), CliError> {
    crate::write_file(path, &to_jsonl(tasks))
}

pub fn load(path: &Path) -> Result<Vec<Task>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("cannot read {}", path.display()), e))?;
    from_jsonl(&text)
}

/// Human-readable dump with symbolic tokens (`c7`, `A2`, `B2`).
pub fn preview(tasks: &[Task], per_task: usize) -> String {
    let mut out = String::new();
    for t in tasks {
        let kind = if t.parallel { "parallel" } else { "non-parallel" };
        let _ = writeln!(
            out,
            "# task {} ({kind}, {} sentences, class-1 fraction {:.3})",
            t.id,
            t.len(),
            t.class_fraction(taml_core::text::Style::A)
        );
        let pairs: Vec<String> = t
            .cipher
            .iter()
            .enumerate()
            .map(|(a, &b)| format!("A{a}->B{b}"))
            .collect();
        let _ = writeln!(out, "# cipher {}", pairs.join(" "));
        for ex in t.examples.iter().take(per_task) {
            let _ = write!(out, "{} | {}", ex.style(), ex.source.render(&t.vocab));
            if let Some(target) = &ex.target {
                let _ = write!(out, " => {}", target.render(&t.vocab));
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

/// Number of tasks, sentences and class-1 sentences.
pub fn summary(tasks: &[Task]) -> (usize, usize, usize) {
    let sentences = tasks.iter().map(Task::len).sum();
    let class1 = tasks
        .iter()
        .flat_map(|t| &t.examples)
        .filter(|e| e.style() == taml_core::text::Style::A)
        .count();
    (tasks.len(), sentences, class1)
}
