//! Task corpora on disk: `manifest.json` listing task ids plus one
//! `<task_id>.json` per task in the same directory.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{validate_task, Task};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("task `{task_id}` is invalid: {violations:?}")]
    InvalidTask {
        task_id: String,
        violations: Vec<String>,
    },
    #[error("task id `{0}` appears more than once")]
    DuplicateTask(String),
    #[error("file for `{listed}` declares task id `{found}`")]
    IdMismatch { listed: String, found: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default)]
    pub name: String,
    pub tasks: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub tasks: Vec<Task>,
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| CorpusError::Parse {
        path: path.to_path_buf(),
        source,
    })
}

impl Corpus {
    /// Loads and validates every task listed in the manifest, in manifest
    /// order.
    pub fn load(root: &Path) -> Result<Self, CorpusError> {
        let manifest: Manifest = read_json(&root.join("manifest.json"))?;
        let mut seen = BTreeSet::new();
        let mut tasks = Vec::with_capacity(manifest.tasks.len());
        for id in &manifest.tasks {
            if !seen.insert(id.clone()) {
                return Err(CorpusError::DuplicateTask(id.clone()));
            }
            let task: Task = read_json(&root.join(format!("{id}.json")))?;
            if &task.task_id != id {
                return Err(CorpusError::IdMismatch {
                    listed: id.clone(),
                    found: task.task_id,
                });
            }
            let violations = validate_task(&task);
            if !violations.is_empty() {
                return Err(CorpusError::InvalidTask {
                    task_id: task.task_id,
                    violations,
                });
            }
            tasks.push(task);
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            tasks,
        })
    }

    pub fn get(&self, task_id: &str) -> Option<&Task> {
        self.tasks.iter().find(|t| t.task_id == task_id)
    }

    /// Keeps only the listed tasks, in corpus order.
    pub fn retain(&mut self, ids: &[String]) {
        self.tasks.retain(|t| ids.contains(&t.task_id));
        self.manifest.tasks.retain(|id| ids.contains(id));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) {
        std::fs::write(dir.join(name), body).unwrap();
    }

    const TASK: &str = r#"{"task_id":"a","description":"def a(): ...","entry_point":"a",
        "difficulty":"easy","hidden_tests":["assert a() == 1"]}"#;

    #[test]
    fn loads_listed_tasks() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "manifest.json", r#"{"tasks":["a"]}"#);
        write(dir.path(), "a.json", TASK);
        let c = Corpus::load(dir.path()).unwrap();
        assert_eq!(c.tasks.len(), 1);
        assert!(c.get("a").is_some());
    }

    #[test]
    fn rejects_duplicates_and_mismatches() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "manifest.json", r#"{"tasks":["a","a"]}"#);
        write(dir.path(), "a.json", TASK);
        assert!(matches!(Corpus::load(dir.path()), Err(CorpusError::DuplicateTask(_))));

        write(dir.path(), "manifest.json", r#"{"tasks":["b"]}"#);
        write(dir.path(), "b.json", TASK);
        assert!(matches!(Corpus::load(dir.path()), Err(CorpusError::IdMismatch { .. })));
    }

    #[test]
    fn invalid_task_names_the_field() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "manifest.json", r#"{"tasks":["a"]}"#);
        write(dir.path(), "a.json", &TASK.replace(r#""entry_point":"a""#, r#""entry_point":"""#));
        match Corpus::load(dir.path()) {
            Err(CorpusError::InvalidTask { violations, .. }) => {
                assert!(violations.iter().any(|v| v.contains("entry_point")))
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
