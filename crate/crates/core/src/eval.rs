//! Evaluation of a trained model on synthetic pairs.

use std::fmt::Write as _;

use cascade_tensor::Real;

use crate::data_io::FlowSample;
use crate::error::Result;
use crate::loss::{epe, fl_rate};
use crate::nn::ParamStore;
use crate::pipeline::FlowModel;
use crate::types::FlowField;

#[derive(Clone, Debug, PartialEq)]
pub struct PairMetrics {
    pub index: usize,
    pub epe: f64,
    pub fl: f64,
    pub iterations: usize,
    pub warm_started: bool,
}

/// Metrics of each pair; with `chain`, each pair after the first starts from
/// the previous pair's final flow.
pub fn evaluate<T: Real>(
    model: &FlowModel,
    store: &ParamStore<T>,
    samples: &[FlowSample],
    iters: &[usize],
    chain: bool,
) -> Result<(Vec<PairMetrics>, Vec<FlowField>)> {
    let mut metrics = Vec::with_capacity(samples.len());
    let mut flows: Vec<FlowField> = Vec::with_capacity(samples.len());
    for (index, s) in samples.iter().enumerate() {
        let warm = if chain { flows.last() } else { None };
        let trace = model.estimate(store, &s.image1, &s.image2, iters, warm)?;
        metrics.push(PairMetrics {
            index,
            epe: epe(&trace.final_flow, &s.flow, Some(&s.valid))?,
            fl: fl_rate(&trace.final_flow, &s.flow, Some(&s.valid))?,
            iterations: trace.predictions.len(),
            warm_started: warm.is_some(),
        });
        flows.push(trace.final_flow);
    }
    Ok((metrics, flows))
}

/// Per-pair lines followed by the means, tab separated.
pub fn metrics_table(metrics: &[PairMetrics], iters: &[usize]) -> String {
    let mut out = String::from("pair\tepe\tfl\titerations\twarm\n");
    for m in metrics {
        let _ = writeln!(out, "{}\t{:.6}\t{:.4}\t{}\t{}", m.index, m.epe, m.fl, m.iterations, m.warm_started);
    }
    let n = metrics.len().max(1) as f64;
    let iters: Vec<String> = iters.iter().map(|i| i.to_string()).collect();
    let _ = writeln!(out, "mean_epe\t{:.6}", metrics.iter().map(|m| m.epe).sum::<f64>() / n);
    let _ = writeln!(out, "mean_fl\t{:.4}", metrics.iter().map(|m| m.fl).sum::<f64>() / n);
    let _ = writeln!(out, "eval_iters\t{}", iters.join(","));
    out
}
