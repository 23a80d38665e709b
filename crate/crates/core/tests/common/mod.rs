#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use effigen_core::corpus::Corpus;
use effigen_core::domain::{PipelineConfig, RunRecord, Variant};
use effigen_core::gateway::{ReplayModel, ReplayStore};
use effigen_core::pipeline::{Pipeline, TaskView};
use effigen_core::prompt::TemplateSet;
use effigen_core::sandbox::Sandbox;

pub fn corpus_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../corpus")
}

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

pub fn corpus() -> Corpus {
    Corpus::load(&corpus_dir()).expect("bundled corpus loads")
}

pub fn config(variant: Variant) -> PipelineConfig {
    PipelineConfig {
        model_name: "scripted".into(),
        variant,
        ..Default::default()
    }
}

/// Runs `tasks` through the pipeline against the shipped replay store.
pub fn replay_runs(variant: Variant, tasks: &[&str]) -> Vec<RunRecord> {
    let corpus = corpus();
    let store = Arc::new(ReplayStore::open(corpus_dir().join("replay")).unwrap());
    let model = ReplayModel::new(store);
    let templates = TemplateSet::builtin();
    let sandbox = Sandbox::default().with_workers(2);
    let pipeline = Pipeline::new(&model, &templates, &sandbox, config(variant));
    tasks
        .iter()
        .map(|id| {
            let task = corpus.get(id).unwrap_or_else(|| panic!("no task {id}"));
            pipeline.run_task(&TaskView::from(task), "it")
        })
        .collect()
}

/// Record as JSON with the fields that legitimately vary between runs
/// (latencies, wall clock) removed.
pub fn stable_json(record: &RunRecord) -> String {
    let mut v = serde_json::to_value(record).unwrap();
    strip(&mut v);
    serde_json::to_string(&v).unwrap()
}

fn strip(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(map) => {
            map.remove("latency");
            map.remove("wall_clock");
            map.values_mut().for_each(strip);
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(strip),
        _ => {}
    }
}
