//! Fixtures shared by the benchmarks.

use ecgnn::datagen::{generate_task, Dataset, SynthConfig, TaskKind};
use ecgnn::pipeline::{Model, ModelConfig};

/// A small desk-scale dataset and a freshly initialized model for `task`.
pub fn fixture(task: TaskKind, train: usize) -> (Dataset, Model) {
    let mut data = SynthConfig::desk(task, 11);
    data.train = train;
    data.test = 1;
    let ds = generate_task(task, &data).expect("valid synthetic config");
    let model = Model::new(ModelConfig::for_dataset(&ds)).expect("valid model config");
    (ds, model)
}

pub const TASKS: [TaskKind; 3] = [TaskKind::Word, TaskKind::Number, TaskKind::Choice];
