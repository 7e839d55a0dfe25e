//! Shared mini-batch machinery for every training stage.
//!
//! Each example gets its own graph, so examples may run on worker threads;
//! their gradients are then reduced in batch order, which keeps every run
//! bitwise reproducible regardless of thread count.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{ParamVars, Parameters};
use crate::tensor::{Graph, Var};

/// Loss of one example as recorded on its graph.
pub struct ExampleLoss {
    pub root: Var,
    /// Relative weight in the batch mean, usually the number of scored tokens.
    pub weight: f64,
    /// Values logged per step (already part of `root` or diagnostic only).
    pub components: Vec<f64>,
}

/// Weighted batch gradient plus weighted means of the logged components.
pub struct BatchGradient {
    pub grads: Parameters<f32>,
    pub components: Vec<f64>,
    pub total_weight: f64,
}

/// Runs `build` for every item and reduces the gradients in item order.
/// Items for which `build` returns `None` do not contribute.
pub fn batch_gradient<T, F>(params: &Parameters<f32>, items: &[T], build: F) -> Result<BatchGradient>
where
    T: Sync,
    F: Fn(&mut Graph<f32>, &ParamVars, &T) -> Result<Option<ExampleLoss>> + Sync,
{
    let per_item: Vec<Option<(Vec<Vec<f32>>, f64, Vec<f64>)>> = items
        .par_iter()
        .map(|item| {
            let mut g = Graph::new();
            let vars = params.register(&mut g, true);
            let Some(loss) = build(&mut g, &vars, item)? else {
                return Ok(None);
            };
            g.backward(loss.root)?;
            let grads = vars
                .vars
                .iter()
                .zip(params.tensors())
                .map(|(&v, t)| g.take_grad(v).unwrap_or_else(|| vec![0.0; t.len()]))
                .collect();
            Ok(Some((grads, loss.weight, loss.components)))
        })
        .collect::<Result<_>>()?;

    let mut grads = Parameters::zeros(*params.config())?;
    let total_weight: f64 = per_item.iter().flatten().map(|(_, w, _)| *w).sum();
    let mut components: Vec<f64> = Vec::new();
    if total_weight <= 0.0 {
        return Ok(BatchGradient {
            grads,
            components,
            total_weight,
        });
    }
    for (item_grads, w, comps) in per_item.iter().flatten() {
        let scale = (*w / total_weight) as f32;
        for (acc, g) in grads.tensors_mut().iter_mut().zip(item_grads) {
            for (a, &x) in acc.data_mut().iter_mut().zip(g) {
                *a += scale * x;
            }
        }
        if components.is_empty() {
            components = vec![0.0; comps.len()];
        }
        for (c, &x) in components.iter_mut().zip(comps) {
            *c += x * *w / total_weight;
        }
    }
    Ok(BatchGradient {
        grads,
        components,
        total_weight,
    })
}

/// Per-step metrics, mirrored to a CSV file when a path is given.
pub struct MetricsLog {
    header: Vec<String>,
    rows: Vec<(usize, Vec<f64>)>,
    file: Option<(PathBuf, fs::File)>,
}

impl MetricsLog {
    pub fn new(columns: &[&str], path: Option<&Path>) -> Result<Self> {
        let header: Vec<String> = columns.iter().map(|s| s.to_string()).collect();
        let file = match path {
            Some(p) => {
                let mut f = fs::File::create(p)?;
                writeln!(f, "step,{}", header.join(","))?;
                Some((p.to_path_buf(), f))
            }
            None => None,
        };
        Ok(Self {
            header,
            rows: Vec::new(),
            file,
        })
    }

    pub fn log(&mut self, step: usize, values: &[f64]) -> Result<()> {
        if values.len() != self.header.len() {
            return Err(Error::Shape(format!(
                "metrics row has {} values for {} columns",
                values.len(),
                self.header.len()
            )));
        }
        if let Some((_, f)) = &mut self.file {
            let cells: Vec<String> = values.iter().map(|v| format!("{v}")).collect();
            writeln!(f, "{step},{}", cells.join(","))?;
        }
        self.rows.push((step, values.to_vec()));
        Ok(())
    }

    pub fn header(&self) -> &[String] {
        &self.header
    }

    pub fn rows(&self) -> &[(usize, Vec<f64>)] {
        &self.rows
    }

    pub fn path(&self) -> Option<&Path> {
        self.file.as_ref().map(|(p, _)| p.as_path())
    }

    /// Values of one named column across all steps.
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|(_, r)| r[i]).collect())
    }
}

/// Shared optimizer hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub clip_norm: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            clip_norm: 1.0,
            steps: 100,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Param("steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Param("batch_size must be >= 1".into()));
        }
        crate::model::Sgd::new(self.lr, self.momentum, self.clip_norm)?;
        Ok(())
    }
}

pub(crate) fn check_finite(step: usize, names: &[&str], values: &[f64]) -> Result<()> {
    for (n, v) in names.iter().zip(values) {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("{n} = {v}"),
            });
        }
    }
    Ok(())
}
