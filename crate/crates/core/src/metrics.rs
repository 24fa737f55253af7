//! Class-IL / Task-IL accuracy, loss-peak statistics and seed aggregation.

use serde::{Deserialize, Serialize};

use crate::data::{DataView, TaskSpec};
use crate::error::{Error, Result};
use crate::mah::HeadMap;
use crate::methods::TrainTrace;
use crate::model::{predict, HeadMask, Model};

/// Default window for [`boundary_peaks`].
pub const DEFAULT_PEAK_WINDOW: usize = 50;

/// Accuracy matrices and summary scores of one run.
///
/// Row `i` of each matrix holds accuracies on tasks `0..=i` measured right
/// after training task `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub class_il: Vec<Vec<f64>>,
    pub task_il: Vec<Vec<f64>>,
    /// Mean of the last Class-IL row.
    pub class_il_final: f64,
    /// Mean over tasks of Task-IL accuracy measured at the end of that task.
    pub task_il_avg: f64,
    /// Mean of the last Task-IL row (final model, task-masked).
    pub task_il_final: f64,
    pub boundary_peaks: Vec<f64>,
}

impl EvalRecord {
    pub fn from_matrices(class_il: Vec<Vec<f64>>, task_il: Vec<Vec<f64>>, boundary_peaks: Vec<f64>) -> Self {
        let class_il_final = class_il.last().map_or(0.0, |r| mean(r));
        let task_il_final = task_il.last().map_or(0.0, |r| mean(r));
        let diag: Vec<f64> = task_il.iter().enumerate().map(|(i, r)| r[i]).collect();
        Self {
            class_il_final,
            task_il_avg: mean(&diag),
            task_il_final,
            class_il,
            task_il,
            boundary_peaks,
        }
    }

    pub fn mean_boundary_peak(&self) -> Option<f64> {
        (!self.boundary_peaks.is_empty()).then(|| mean(&self.boundary_peaks))
    }
}

fn accuracy_under(model: &Model, view: &DataView, head_map: &HeadMap, mask: &HeadMask) -> Result<f64> {
    if view.is_empty() {
        return Ok(0.0);
    }
    let preds = predict(&model.logits(&view.all())?, mask)?;
    let correct = view
        .labels()
        .iter()
        .zip(&preds)
        .filter(|(&c, &p)| head_map.head_of_class(c) == Some(p))
        .count();
    Ok(correct as f64 / view.len() as f64)
}

/// Per-task test accuracy with the argmax over every task-owned head.
pub fn eval_class_il(model: &Model, tasks: &[TaskSpec], head_map: &HeadMap) -> Result<Vec<f64>> {
    let mask = head_map.class_il_mask();
    tasks
        .iter()
        .map(|t| accuracy_under(model, &t.test, head_map, &mask))
        .collect()
}

/// Test accuracy with the argmax restricted to the task's own heads.
pub fn eval_task_il(model: &Model, task: &TaskSpec, head_map: &HeadMap) -> Result<f64> {
    if task.index >= head_map.num_tasks() {
        return Err(Error::State(format!("task {} has no heads yet", task.index)));
    }
    accuracy_under(model, &task.test, head_map, &head_map.task_mask(task.index))
}

/// For each task boundary: max total loss over the first `window` iterations
/// of the new task minus the mean over the last `window` iterations of the
/// previous one.
pub fn boundary_peaks(trace: &TrainTrace, window: usize) -> Result<Vec<f64>> {
    let b = &trace.boundaries;
    if b.len() < 2 {
        return Err(Error::State("loss peaks need at least two tasks".into()));
    }
    if window == 0 {
        return Err(Error::Config("peak window must be positive".into()));
    }
    let losses: Vec<f64> = trace.iterations.iter().map(|it| it.total).collect();
    let mut ends: Vec<usize> = b[1..].to_vec();
    ends.push(losses.len());
    let mut peaks = Vec::with_capacity(b.len() - 1);
    for k in 1..b.len() {
        let (prev_start, start, end) = (b[k - 1], b[k], ends[k]);
        if start - prev_start < window || end - start < window {
            return Err(Error::State(format!(
                "trace too short for a {window}-iteration window at boundary {k}"
            )));
        }
        let before = mean(&losses[start - window..start]);
        let after = losses[start..start + window]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        peaks.push(after - before);
    }
    Ok(peaks)
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Mean and sample standard deviation; a single value has deviation 0.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let m = mean(xs);
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64;
    (m, var.sqrt())
}
