//! Multi-scale, multi-iteration training loss and evaluation metrics.

use std::fmt::Write as _;

use cascade_tensor::{CustomOp, Graph, Real, Tensor, Var};

use crate::config::{LossConfig, RobustMode};
use crate::error::{shape_err, FlowError, Result};
use crate::types::{FlowField, ValidMask};

/// Exponential weights over all iterations, scale-major, coarsest first.
#[derive(Clone, Debug, PartialEq)]
pub struct LossSchedule {
    pub gamma: f64,
    pub iters_per_scale: Vec<usize>,
    pub total: usize,
    weights: Vec<f64>,
}

/// Exponent of `gamma` for the `k`-th (1-based) of `total` iterates.
pub type ExponentLaw = fn(total: usize, k: usize) -> i32;

pub fn standard_exponent(total: usize, k: usize) -> i32 {
    (total - k) as i32
}

/// `weight(s, i) = gamma^(total - k)` where `k` is the 1-based position of
/// iteration `i` of scale `s` (both 0-based here) in the overall sequence.
pub fn schedule_weights(gamma: f64, iters_per_scale: &[usize]) -> Result<LossSchedule> {
    schedule_weights_with(gamma, iters_per_scale, standard_exponent)
}

/// [`schedule_weights`] with a replaceable exponent, used to check that the
/// self-test notices a broken law.
pub fn schedule_weights_with(gamma: f64, iters_per_scale: &[usize], exponent: ExponentLaw) -> Result<LossSchedule> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(crate::config::ConfigError::Invalid { key: "gamma".into(), reason: format!("{gamma} is not in (0, 1]") }.into());
    }
    if iters_per_scale.is_empty() || iters_per_scale.contains(&0) {
        return Err(crate::config::ConfigError::Invalid {
            key: "train_iters".into(),
            reason: "every scale needs at least one iteration".into(),
        }
        .into());
    }
    let total: usize = iters_per_scale.iter().sum();
    let weights = (1..=total).map(|k| gamma.powi(exponent(total, k))).collect();
    Ok(LossSchedule { gamma, iters_per_scale: iters_per_scale.to_vec(), total, weights })
}

impl LossSchedule {
    pub fn weight(&self, s: usize, i: usize) -> f64 {
        assert!(i < self.iters_per_scale[s], "iteration {i} out of range for scale {s}");
        let offset: usize = self.iters_per_scale[..s].iter().sum();
        self.weights[offset + i]
    }

    /// All weights in trace order.
    pub fn flat(&self) -> &[f64] {
        &self.weights
    }

    /// Scale index of each trace position.
    pub fn scale_of(&self) -> Vec<usize> {
        self.iters_per_scale.iter().enumerate().flat_map(|(s, &n)| std::iter::repeat_n(s, n)).collect()
    }

    /// Weights actually used by the loss: when `finest_only` is set, every
    /// non-finest term is dropped and the finest terms keep their weights.
    pub fn effective(&self, finest_only: bool) -> Vec<f64> {
        let last = self.iters_per_scale.len() - 1;
        self.weights.iter().zip(self.scale_of()).map(|(&w, s)| if finest_only && s != last { 0.0 } else { w }).collect()
    }
}

fn check_pair(pred: &FlowField, gt: &FlowField, valid: Option<&ValidMask>) -> Result<()> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return shape_err(format!("prediction {}x{} vs ground truth {}x{}", pred.height, pred.width, gt.height, gt.width));
    }
    if let Some(m) = valid {
        if (m.height, m.width) != (gt.height, gt.width) {
            return shape_err("valid mask size differs from the flow");
        }
    }
    Ok(())
}

/// Mean of `f(du, dv, gt_u, gt_v)` over valid pixels.
fn masked_mean(pred: &FlowField, gt: &FlowField, valid: Option<&ValidMask>, f: impl Fn(f64, f64, f64, f64) -> f64) -> Result<f64> {
    check_pair(pred, gt, valid)?;
    let (mut sum, mut count) = (0.0, 0usize);
    for y in 0..gt.height {
        for x in 0..gt.width {
            if valid.is_some_and(|m| !m.get(y, x)) {
                continue;
            }
            let (pu, pv) = pred.get(y, x);
            let (gu, gv) = gt.get(y, x);
            sum += f((pu - gu) as f64, (pv - gv) as f64, gu as f64, gv as f64);
            count += 1;
        }
    }
    if count == 0 {
        return Err(FlowError::EmptyMask);
    }
    Ok(sum / count as f64)
}

/// Per-sample mean of `sqrt(|pred - gt|^2 + eps)` over valid pixels.
pub fn sample_mean(pred: &FlowField, gt: &FlowField, valid: Option<&ValidMask>, eps: f64) -> Result<f64> {
    masked_mean(pred, gt, valid, |du, dv, _, _| (du * du + dv * dv + eps).sqrt())
}

fn check_batch(pred: &[FlowField], gt: &[FlowField], valid: Option<&[ValidMask]>) -> Result<()> {
    if pred.is_empty() || pred.len() != gt.len() || valid.is_some_and(|v| v.len() != gt.len()) {
        return shape_err("batch sizes of predictions, ground truth and masks differ");
    }
    Ok(())
}

/// Loss of one iterate over a batch: per-sample pixel means, then the batch mean.
pub fn per_iteration_loss(pred: &[FlowField], gt: &[FlowField], valid: Option<&[ValidMask]>, eps: f64) -> Result<f64> {
    check_batch(pred, gt, valid)?;
    let mut acc = 0.0;
    for (n, (p, g)) in pred.iter().zip(gt).enumerate() {
        acc += sample_mean(p, g, valid.map(|v| &v[n]), eps)?;
    }
    Ok(acc / pred.len() as f64)
}

/// Robust transform applied to a per-sample mean.
pub fn robust(m: f64, cfg: &LossConfig) -> f64 {
    match cfg.robust_mode {
        RobustMode::Pretrain => m,
        RobustMode::Finetune => (m + cfg.epsilon_prime).powf(cfg.q),
    }
}

/// Weighted sum over all iterates. `predictions[k][n]` is iterate `k` of sample `n`.
pub fn total_loss(
    predictions: &[Vec<FlowField>],
    gt: &[FlowField],
    valid: Option<&[ValidMask]>,
    schedule: &LossSchedule,
    cfg: &LossConfig,
) -> Result<f64> {
    if predictions.len() != schedule.total {
        return shape_err(format!("trace has {} iterates, schedule expects {}", predictions.len(), schedule.total));
    }
    let weights = schedule.effective(cfg.finest_scale_only);
    let mut total = 0.0;
    for (preds, &w) in predictions.iter().zip(&weights) {
        check_batch(preds, gt, valid)?;
        let mut acc = 0.0;
        for (n, (p, g)) in preds.iter().zip(gt).enumerate() {
            acc += robust(sample_mean(p, g, valid.map(|v| &v[n]), cfg.epsilon)?, cfg);
        }
        total += w * acc / preds.len() as f64;
    }
    Ok(total)
}

/// Ground truth and validity for a batch, in graph-friendly layout.
#[derive(Clone, Debug)]
pub struct Target<T: Real> {
    /// `[N, 2, H, W]`.
    pub flow: Tensor<T>,
    /// `[N, H, W]` of 0/1, or `None` for dense ground truth.
    pub valid: Option<Tensor<T>>,
}

impl<T: Real> Target<T> {
    pub fn new(gt: &[FlowField], valid: Option<&[ValidMask]>) -> Result<Self> {
        if gt.is_empty() || valid.is_some_and(|v| v.len() != gt.len()) {
            return shape_err("target batch is empty or masks do not match");
        }
        let (h, w) = (gt[0].height, gt[0].width);
        if gt.iter().any(|f| (f.height, f.width) != (h, w)) {
            return shape_err("target flows differ in size");
        }
        let flows: Vec<Tensor<T>> = gt.iter().map(|f| f.to_tensor()).collect();
        let flow = crate::types::stack(&flows);
        let valid = match valid {
            Some(ms) => {
                let mut data = Vec::with_capacity(ms.len() * h * w);
                for m in ms {
                    if (m.height, m.width) != (h, w) {
                        return shape_err("valid mask size differs from the flow");
                    }
                    if m.count() == 0 {
                        return Err(FlowError::EmptyMask);
                    }
                    data.extend(m.data.iter().map(|&b| if b { T::one() } else { T::zero() }));
                }
                Some(Tensor::from_vec(&[ms.len(), h, w], data))
            }
            None => None,
        };
        Ok(Self { flow, valid })
    }
}

/// `[N]` per-sample Charbonnier means against a fixed target.
struct SampleMeanOp<T: Real> {
    target: Tensor<T>,
    valid: Option<Tensor<T>>,
    eps: T,
}

impl<T: Real> SampleMeanOp<T> {
    fn counts(&self, n: usize, hw: usize) -> Vec<T> {
        (0..n)
            .map(|b| match &self.valid {
                Some(v) => v.data()[b * hw..(b + 1) * hw].iter().copied().sum(),
                None => T::of(hw as f64),
            })
            .collect()
    }

    fn forward(&self, pred: &Tensor<T>) -> Tensor<T> {
        let (n, _, h, w) = pred.dims4();
        let hw = h * w;
        let counts = self.counts(n, hw);
        let mut out = vec![T::zero(); n];
        for b in 0..n {
            let p = &pred.data()[b * 2 * hw..(b + 1) * 2 * hw];
            let t = &self.target.data()[b * 2 * hw..(b + 1) * 2 * hw];
            let mut acc = T::zero();
            for i in 0..hw {
                let m = self.valid.as_ref().map_or(T::one(), |v| v.data()[b * hw + i]);
                if m == T::zero() {
                    continue;
                }
                let (du, dv) = (p[i] - t[i], p[hw + i] - t[hw + i]);
                acc += (du * du + dv * dv + self.eps).sqrt();
            }
            out[b] = acc / counts[b];
        }
        Tensor::from_vec(&[n], out)
    }
}

impl<T: Real> CustomOp<T> for SampleMeanOp<T> {
    fn name(&self) -> &str {
        "sample_mean"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        if !needs[0] {
            return vec![None];
        }
        let pred = inputs[0];
        let (n, _, h, w) = pred.dims4();
        let hw = h * w;
        let counts = self.counts(n, hw);
        let mut d = vec![T::zero(); pred.len()];
        for b in 0..n {
            let scale = grad.data()[b] / counts[b];
            let base = b * 2 * hw;
            for i in 0..hw {
                let m = self.valid.as_ref().map_or(T::one(), |v| v.data()[b * hw + i]);
                if m == T::zero() {
                    continue;
                }
                let (du, dv) = (pred.data()[base + i] - self.target.data()[base + i], pred.data()[base + hw + i] - self.target.data()[base + hw + i]);
                let r = (du * du + dv * dv + self.eps).sqrt();
                d[base + i] = scale * du / r;
                d[base + hw + i] = scale * dv / r;
            }
        }
        vec![Some(Tensor::from_vec(pred.shape(), d))]
    }
}

/// Differentiable per-sample means `[N]` of one iterate.
pub fn sample_means_var<T: Real>(g: &mut Graph<T>, pred: Var, target: &Target<T>, eps: f64) -> Result<Var> {
    if g.shape(pred) != target.flow.shape() {
        return shape_err(format!("prediction {:?} vs target {:?}", g.shape(pred), target.flow.shape()));
    }
    let op = SampleMeanOp { target: target.flow.clone(), valid: target.valid.clone(), eps: T::of(eps) };
    let out = op.forward(g.value(pred));
    Ok(g.custom(&[pred], out, Box::new(op)))
}

/// Differentiable total loss over a trace of `[N, 2, H, W]` predictions.
pub fn total_loss_var<T: Real>(
    g: &mut Graph<T>,
    predictions: &[Var],
    target: &Target<T>,
    schedule: &LossSchedule,
    cfg: &LossConfig,
) -> Result<Var> {
    if predictions.len() != schedule.total {
        return shape_err(format!("trace has {} iterates, schedule expects {}", predictions.len(), schedule.total));
    }
    let weights = schedule.effective(cfg.finest_scale_only);
    let mut terms = Vec::new();
    for (&p, &w) in predictions.iter().zip(&weights) {
        if w == 0.0 {
            continue;
        }
        let m = sample_means_var(g, p, target, cfg.epsilon)?;
        let r = match cfg.robust_mode {
            RobustMode::Pretrain => m,
            RobustMode::Finetune => {
                let shifted = g.add_scalar(m, T::of(cfg.epsilon_prime));
                g.powf(shifted, T::of(cfg.q))
            }
        };
        let mean = g.mean(r);
        terms.push((mean, T::of(w)));
    }
    Ok(g.weighted_sum(&terms))
}

/// Mean end-point error over valid pixels.
pub fn epe(pred: &FlowField, gt: &FlowField, valid: Option<&ValidMask>) -> Result<f64> {
    masked_mean(pred, gt, valid, |du, dv, _, _| (du * du + dv * dv).sqrt())
}

/// Percentage of valid pixels whose end-point error exceeds both 3 px and
/// 5% of the ground-truth magnitude.
pub fn fl_rate(pred: &FlowField, gt: &FlowField, valid: Option<&ValidMask>) -> Result<f64> {
    let frac = masked_mean(pred, gt, valid, |du, dv, gu, gv| {
        let e = (du * du + dv * dv).sqrt();
        let mag = (gu * gu + gv * gv).sqrt();
        if e > 3.0 && e > 0.05 * mag {
            1.0
        } else {
            0.0
        }
    })?;
    Ok(100.0 * frac)
}

/// `name<TAB>value` lines.
pub fn format_metrics(metrics: &[(&str, f64)]) -> String {
    let mut out = String::new();
    for (name, value) in metrics {
        let _ = writeln!(out, "{name}\t{value}");
    }
    out
}
