//! Optimization on synthetic data: AdamW with a one-cycle learning rate,
//! global gradient-norm clipping, metric logs and periodic checkpoints.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use cascade_tensor::{Graph, Real, Tensor};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data_io::{dataset_sample, FlowSample};
use crate::error::{io_err, FlowError, Result};
use crate::loss::{epe, schedule_weights, total_loss_var, LossSchedule, Target};
use crate::nn::ParamStore;
use crate::pipeline::FlowModel;
use crate::types::{stack, FlowField};

/// Linear warm-up from `max / 25` to `max` over the first `pct_start` of the
/// run, then linear decay to `max / 25e4`.
#[derive(Clone, Copy, Debug)]
pub struct OneCycle {
    pub max_lr: f64,
    pub total: usize,
    pub pct_start: f64,
}

impl OneCycle {
    const DIV: f64 = 25.0;
    const FINAL_DIV: f64 = 1e4;

    pub fn lr(&self, step: usize) -> f64 {
        let start = self.max_lr / Self::DIV;
        let end = start / Self::FINAL_DIV;
        let total = self.total.max(1) as f64;
        let up = (self.pct_start * total).max(1.0);
        let t = step as f64;
        if t < up {
            start + (self.max_lr - start) * t / up
        } else {
            let frac = ((t - up) / (total - up).max(1.0)).min(1.0);
            self.max_lr + (end - self.max_lr) * frac
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T: Real> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: ParamStore<T>,
    v: ParamStore<T>,
    t: i32,
}

impl<T: Real> AdamW<T> {
    pub fn new(weight_decay: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, m: ParamStore::new(), v: ParamStore::new(), t: 0 }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[(String, Tensor<T>)], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        for (name, g) in grads {
            let p = params.get_mut(name).expect("gradient for a known parameter");
            if self.m.get(name).is_none() {
                self.m.insert(name.clone(), Tensor::zeros(p.shape()));
                self.v.insert(name.clone(), Tensor::zeros(p.shape()));
            }
            let m = self.m.get_mut(name).unwrap();
            for (mi, &gi) in m.data_mut().iter_mut().zip(g.data()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
            }
            let v = self.v.get_mut(name).unwrap();
            for (vi, &gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            }
            let (m, v) = (self.m.get(name).unwrap(), self.v.get(name).unwrap());
            let decay = T::of(1.0 - lr * self.weight_decay);
            let step = T::of(lr / c1);
            let (inv_c2, eps) = (T::of(1.0 / c2), T::of(self.eps));
            for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                *pi = *pi * decay - step * mi / ((vi * inv_c2).sqrt() + eps);
            }
        }
    }
}

/// Scales gradients so their joint Euclidean norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [(String, Tensor<T>)], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|(_, g)| g.data()).map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
    if norm > max_norm && max_norm > 0.0 {
        let k = T::of(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= k);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub loss: f64,
    /// End-point error of the final prediction, before the update.
    pub epe: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

pub struct Trainer<T: Real> {
    pub cfg: RunConfig,
    pub model: FlowModel,
    pub store: ParamStore<T>,
    pub schedule: LossSchedule,
    opt: AdamW<T>,
    lr: OneCycle,
    step: usize,
}

impl<T: Real> Trainer<T> {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let model = FlowModel::new(&cfg.model);
        let store = model.init_params(cfg.train.seed);
        Self::with_params(cfg, store)
    }

    pub fn with_params(cfg: &RunConfig, store: ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let model = FlowModel::new(&cfg.model);
        let t = &cfg.train;
        Ok(Self {
            cfg: cfg.clone(),
            model,
            store,
            schedule: schedule_weights(cfg.loss.gamma, &cfg.schedule.train_iters)?,
            opt: AdamW::new(t.weight_decay),
            lr: OneCycle { max_lr: t.learning_rate, total: t.steps, pct_start: t.pct_start },
            step: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// One optimization step on a batch.
    pub fn train_step(&mut self, batch: &[&FlowSample]) -> Result<StepStats> {
        let gt: Vec<FlowField> = batch.iter().map(|s| s.flow.clone()).collect();
        let valid: Vec<_> = batch.iter().map(|s| s.valid.clone()).collect();
        let target = Target::<T>::new(&gt, Some(&valid))?;
        let mut g = Graph::new();
        let a = g.constant(stack(&batch.iter().map(|s| s.image1.to_network_input()).collect::<Vec<_>>()));
        let b = g.constant(stack(&batch.iter().map(|s| s.image2.to_network_input()).collect::<Vec<_>>()));
        let trace = self.model.forward(&mut g, &self.store, a, b, &self.cfg.schedule.train_iters, None)?;
        let loss = total_loss_var(&mut g, &trace.predictions, &target, &self.schedule, &self.cfg.loss)?;
        let loss_value = g.value(loss).data()[0].as_f64();
        let final_flow = g.value(trace.final_flow());
        let mut epe_sum = 0.0;
        for (n, s) in batch.iter().enumerate() {
            epe_sum += epe(&FlowField::from_tensor(final_flow, n)?, &s.flow, Some(&s.valid))?;
        }
        if !loss_value.is_finite() {
            return Err(FlowError::NonFinite { step: self.step, detail: format!("loss = {loss_value}") });
        }
        let mut grads_out = g.backward(loss);
        let mut grads: Vec<(String, Tensor<T>)> = g
            .params()
            .filter_map(|(name, v)| grads_out.take(v).map(|t| (name.to_string(), t)))
            .collect();
        if grads.iter().any(|(_, t)| !t.is_finite()) {
            return Err(FlowError::NonFinite { step: self.step, detail: "non-finite gradient".into() });
        }
        let grad_norm = clip_global_norm(&mut grads, self.cfg.train.clip_norm);
        let lr = self.lr.lr(self.step);
        self.opt.step(&mut self.store, &grads, lr);
        let stats = StepStats { step: self.step, loss: loss_value, epe: epe_sum / batch.len() as f64, grad_norm, lr };
        self.step += 1;
        Ok(stats)
    }
}

/// Training data described by a configuration: `samples = 0` draws a fresh
/// sample for every batch slot, otherwise a fixed set is cycled.
pub struct DataSource {
    cfg: crate::config::DataConfig,
    fixed: Vec<FlowSample>,
}

impl DataSource {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let d = cfg.data.clone();
        let fixed = (0..d.samples).map(|i| sample_or_err(&d, i)).collect::<Result<_>>()?;
        Ok(Self { cfg: d, fixed })
    }

    pub fn batch(&self, step: usize, batch_size: usize) -> Result<Vec<FlowSample>> {
        (0..batch_size)
            .map(|j| {
                let k = step * batch_size + j;
                if self.fixed.is_empty() {
                    sample_or_err(&self.cfg, k)
                } else {
                    Ok(self.fixed[k % self.fixed.len()].clone())
                }
            })
            .collect()
    }
}

fn sample_or_err(cfg: &crate::config::DataConfig, index: usize) -> Result<FlowSample> {
    dataset_sample(cfg, index).map_err(|e| crate::config::ConfigError::Invalid { key: "pattern".into(), reason: e }.into())
}

/// Everything a training run writes, for reproducibility.
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub run_id: String,
    pub config: String,
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub metric_log: PathBuf,
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "run_id = {}", self.run_id);
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "checkpoint = {}", self.checkpoint.display());
        let _ = writeln!(out, "metric_log = {}", self.metric_log.display());
        let _ = writeln!(out, "[config]");
        out.push_str(&self.config);
        out
    }
}

/// Short stable identifier of a configuration text (FNV-1a, 64 bits).
pub fn run_id(config_text: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in config_text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// `step<TAB>name<TAB>value` lines for one step.
pub fn metric_lines(s: &StepStats) -> String {
    let mut out = String::new();
    for (name, v) in [("loss", s.loss), ("epe", s.epe), ("grad_norm", s.grad_norm), ("lr", s.lr)] {
        let _ = writeln!(out, "{}\t{name}\t{v}", s.step);
    }
    out
}

/// Result of [`train`].
pub struct TrainOutcome<T: Real> {
    pub store: ParamStore<T>,
    pub history: Vec<StepStats>,
    pub log: String,
    pub manifest: Option<RunManifest>,
}

/// Runs `cfg.train.steps` steps. With `out_dir`, writes the manifest, the
/// metric log, periodic checkpoints and `final.ckpt` there.
pub fn train<T: Real>(cfg: &RunConfig, out_dir: Option<&Path>, mut progress: impl FnMut(&StepStats)) -> Result<TrainOutcome<T>> {
    let mut trainer = Trainer::<T>::new(cfg)?;
    let data = DataSource::new(cfg)?;
    let manifest = out_dir.map(|d| RunManifest {
        run_id: run_id(&cfg.to_text()),
        config: cfg.to_text(),
        seed: cfg.train.seed,
        checkpoint: d.join("final.ckpt"),
        metric_log: d.join("metrics.tsv"),
    });
    if let (Some(d), Some(m)) = (out_dir, &manifest) {
        std::fs::create_dir_all(d).map_err(io_err(d))?;
        let p = d.join("manifest.txt");
        std::fs::write(&p, m.to_text()).map_err(io_err(&p))?;
    }
    let mut log = String::new();
    let mut history = Vec::with_capacity(cfg.train.steps);
    for step in 0..cfg.train.steps {
        let batch = data.batch(step, cfg.train.batch_size)?;
        let refs: Vec<&FlowSample> = batch.iter().collect();
        let stats = trainer.train_step(&refs)?;
        log.push_str(&metric_lines(&stats));
        progress(&stats);
        history.push(stats);
        if let Some(d) = out_dir {
            let every = cfg.train.checkpoint_every;
            if every > 0 && (step + 1) % every == 0 && step + 1 < cfg.train.steps {
                checkpoint::save(&d.join(format!("step{:06}.ckpt", step + 1)), &cfg.model, &trainer.store)?;
            }
        }
    }
    if let (Some(d), Some(m)) = (out_dir, &manifest) {
        checkpoint::save(&m.checkpoint, &cfg.model, &trainer.store)?;
        std::fs::write(&m.metric_log, &log).map_err(io_err(d))?;
    }
    Ok(TrainOutcome { store: trainer.store, history, log, manifest })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_cycle_shape() {
        let s = OneCycle { max_lr: 1.0, total: 100, pct_start: 0.1 };
        assert!((s.lr(0) - 0.04).abs() < 1e-12);
        assert!((s.lr(10) - 1.0).abs() < 1e-12);
        assert!(s.lr(5) > s.lr(0) && s.lr(5) < 1.0);
        assert!(s.lr(50) < s.lr(20));
        assert!((s.lr(100) - 0.04e-4).abs() < 1e-12);
    }

    #[test]
    fn clipping_caps_the_joint_norm() {
        let mut g = vec![("a".to_string(), Tensor::from_vec(&[2], vec![3.0f64, 0.0])), ("b".into(), Tensor::from_vec(&[1], vec![4.0]))];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].1.data()[0] - 0.6).abs() < 1e-12 && (g[1].1.data()[0] - 0.8).abs() < 1e-12);
        assert!((clip_global_norm(&mut g, 2.0) - 1.0).abs() < 1e-12);
        assert!((g[0].1.data()[0] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut p = ParamStore::<f64>::new();
        p.insert("w", Tensor::from_vec(&[2], vec![1.0, -1.0]));
        let mut opt = AdamW::new(0.0);
        opt.step(&mut p, &[("w".into(), Tensor::from_vec(&[2], vec![0.5, -2.0]))], 0.1);
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
    }
}
