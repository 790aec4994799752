//! Baseline training of source graphs with softmax cross-entropy.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::AutodiffError;
use crate::exec::{self, ExecError};
use crate::graph::CompGraph;
use crate::optim::{step_decay, OptimError, Sgd};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch: 64,
            lr: 0.05,
            momentum: 0.9,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("vertex {vertex}: {source}")]
    Optim { vertex: usize, source: OptimError },
    #[error("{images} images but {labels} labels")]
    Count { images: usize, labels: usize },
    #[error("graph must have exactly one output")]
    Outputs,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStat {
    pub epoch: usize,
    pub loss: f64,
}

/// Writes `values` into the parameter tensor `name` of vertex `vertex`.
pub fn set_param(graph: &mut CompGraph, vertex: usize, name: &str, values: &[f64]) {
    for (n, t) in graph.vertices[vertex].kind.tensors_mut() {
        if n == name {
            t.data_mut().copy_from_slice(values);
        }
    }
}

/// Trains every parameter of a single-output classifier graph.
pub fn train_classifier(
    graph: &mut CompGraph,
    images: &Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochStat),
) -> Result<Vec<EpochStat>, TrainError> {
    let n = images.rows();
    if n != labels.len() {
        return Err(TrainError::Count {
            images: n,
            labels: labels.len(),
        });
    }
    if graph.outputs.len() != 1 {
        return Err(TrainError::Outputs);
    }
    let out = graph.outputs[0];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let steps_per_epoch = n.div_ceil(cfg.batch.max(1));
    let total = steps_per_epoch * cfg.epochs;
    let mut opt = Sgd::new(cfg.lr, cfg.momentum).map_err(|source| TrainError::Optim { vertex: 0, source })?;
    let mut stats = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let x = images.select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut f = exec::forward(graph, &[x])?;
            let logits = f.vars[out].expect("output evaluated");
            let loss = f.tape.softmax_ce(logits, &y)?;
            loss_sum += f.tape.value(loss).data()[0] * chunk.len() as f64;
            let mut grads = f.tape.backward(&[(loss, Tensor::scalar(1.0))])?;
            let gs: Vec<Tensor> = f
                .params
                .iter()
                .map(|p| grads.take(p.var).unwrap_or_else(|| Tensor::zeros(f.tape.value(p.var).shape())))
                .collect();
            let mut values: Vec<Vec<f64>> = f.params.iter().map(|p| f.tape.value(p.var).data().to_vec()).collect();
            opt.lr = step_decay(cfg.lr, step, total);
            {
                let mut refs: Vec<&mut [f64]> = values.iter_mut().map(|v| v.as_mut_slice()).collect();
                let grefs: Vec<&[f64]> = gs.iter().map(|g| g.data()).collect();
                opt.step(&mut refs, &grefs).map_err(|source| {
                    let vertex = match &source {
                        OptimError::NonFinite { param, .. } => f.params[*param].vertex,
                        _ => 0,
                    };
                    TrainError::Optim { vertex, source }
                })?;
            }
            for (p, v) in f.params.iter().zip(&values) {
                set_param(graph, p.vertex, p.name, v);
            }
            step += 1;
        }
        let stat = EpochStat {
            epoch,
            loss: loss_sum / n.max(1) as f64,
        };
        on_epoch(&stat);
        stats.push(stat);
    }
    Ok(stats)
}

/// Rounds every parameter to the nearest `f32`, the precision of saved graphs.
pub fn round_params_f32(graph: &mut CompGraph) {
    for v in &mut graph.vertices {
        for (_, t) in v.kind.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
    }
}

/// Top-1 accuracy of a single-output classifier graph.
pub fn evaluate_classifier(graph: &CompGraph, images: &Tensor, labels: &[usize]) -> Result<f64, ExecError> {
    let out = exec::predict(graph, &[images.clone()], 1000)?;
    Ok(exec::accuracy(&out[0], labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build, Arch};
    use rand::Rng;

    #[test]
    fn learns_a_separable_toy_problem() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 400;
        let mut data = Vec::with_capacity(n * 2);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let (a, b): (f64, f64) = (rng.random(), rng.random());
            data.extend_from_slice(&[a, b]);
            labels.push(usize::from(a + b > 1.0));
        }
        let x = Tensor::new(alloc::vec![n, 2], data).unwrap();
        let mut g = build(&Arch::parse("mlp:2-16-2").unwrap(), 1).unwrap();
        let cfg = TrainConfig {
            epochs: 30,
            batch: 20,
            lr: 0.1,
            ..TrainConfig::default()
        };
        let stats = train_classifier(&mut g, &x, &labels, &cfg, &mut |_| {}).unwrap();
        assert!(stats.last().unwrap().loss < stats[0].loss);
        assert!(evaluate_classifier(&g, &x, &labels).unwrap() > 0.95);
    }
}
