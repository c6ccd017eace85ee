//! Training loop, schedules, evaluation and checkpoints.

mod checkpoint;
mod config;
mod eval;
mod suite;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

pub use checkpoint::{load_checkpoint, save_checkpoint, sidecar_path, CheckpointManifest, TensorEntry};
pub use config::TrainConfig;
pub use eval::{accumulate_confusion, argmax_labels, evaluate, report_from_confusion, EvalReport};
pub use suite::{
    compare_csv, compare_seeds_csv, compare_variants, gradient_suite, jitter_biases, standard_variants, CompareRow, GradCase,
    Variant, COMPARE_HEADER,
};

use crate::error::{Error, Result};
use crate::losses::{cross_entropy_map_grad, loss_m_grad, loss_w_grad, total_loss, LossWeights};
use crate::memory::{init_memory, momentum_at, transform, update_memory, InitMode, MomentumSchedule};
use crate::model::{ForwardCache, OutputGrads, SegModel};
use crate::numerics::{Differentiable, Parameter, Tensor};
use crate::seeding::{rng_for, sub_seed};
use crate::synthdata::SegSample;

pub const METRICS_HEADER: &str = "iter,lr,m_t,loss_W,loss_M,loss_O,total";
pub const MEMORY_HEADER: &str = "iter,m_t,drift,bound";

/// `base_lr · (1 − iter/T)^power`.
pub fn poly_lr(base_lr: f64, iter: u64, total: u64, power: f64) -> Result<f64> {
    if iter > total {
        return Err(Error::Range {
            what: "iteration",
            value: iter as f64,
            lo: 0.0,
            hi: total as f64,
        });
    }
    if total == 0 {
        return Ok(base_lr);
    }
    Ok(base_lr * (1.0 - iter as f64 / total as f64).powf(power))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub iter: u64,
    pub lr: f64,
    pub m_t: f64,
    pub loss_w: f64,
    pub loss_m: f64,
    pub loss_o: f64,
    pub total: f64,
    /// `‖M_t − M_{t−1}‖∞` caused by this step's memory update.
    pub drift: f64,
    /// `m_t · (max |feature| + max |M_{t−1}|)`, an upper bound on `drift`.
    pub bound: f64,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.iter, self.lr, self.m_t, self.loss_w, self.loss_m, self.loss_o, self.total
        )
    }

    pub fn memory_row(&self) -> String {
        format!("{},{},{},{}", self.iter, self.m_t, self.drift, self.bound)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub loss_w: f64,
    pub loss_m: f64,
    pub loss_o: f64,
}

/// Forward pass and loss gradients for one sample. `o` and `W` gradients
/// are scaled by `scale`; the memory-head gradient is scaled by `beta_eff`.
fn sample_pass(
    model: &SegModel,
    sample: &SegSample,
    weights: &LossWeights,
    with_memory_head: bool,
    beta_eff: f64,
    scale: f64,
) -> Result<(LossParts, ForwardCache, OutputGrads)> {
    let (out, cache) = model.forward(&sample.image, with_memory_head)?;
    let (loss_o, mut d_o) = cross_entropy_map_grad(&out.o, &sample.gt)?;
    d_o.scale(scale);
    let mut parts = LossParts { loss_o, ..LossParts::default() };
    let dw = match &out.w {
        Some(w) => {
            let (lw, mut g) = loss_w_grad(&w.probs, &sample.gt, model.stride())?;
            parts.loss_w = lw;
            g.scale(weights.alpha * scale);
            Some(g)
        }
        None => None,
    };
    let d_o_mem = match &out.o_mem {
        Some(om) => {
            let (lm, mut g) = loss_m_grad(om)?;
            parts.loss_m = lm;
            g.scale(beta_eff);
            Some(g)
        }
        None => None,
    };
    Ok((parts, cache, OutputGrads { dw, d_o, d_o_mem }))
}

fn sgd_update(model: &mut SegModel, lr: f64, weight_decay: f64) {
    model.visit_params_mut(&mut |_, p| {
        if !p.trainable {
            return;
        }
        let (v, g) = (p.value.data_mut(), p.grad.data());
        for (x, gr) in v.iter_mut().zip(g) {
            *x -= lr * (gr + weight_decay * *x);
        }
    });
}

/// Momentum used by the memory update at iteration `t` of `total`.
pub fn memory_momentum(cfg: &TrainConfig, t: u64, total: u64) -> Result<f64> {
    if cfg.use_poly_schedule {
        momentum_at(&MomentumSchedule::new(cfg.m0, cfg.momentum_power, total.max(1))?, t)
    } else {
        Ok(cfg.m0)
    }
}

/// One iteration: forward, losses, backward, SGD, then the memory update
/// from this batch's detached features.
pub fn train_step(model: &mut SegModel, batch: &[&SegSample], cfg: &TrainConfig, t: u64, total: u64) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    let weights = cfg.loss_weights();
    let beta_eff = if cfg.use_rcl { weights.beta } else { 0.0 };
    let scale = 1.0 / batch.len() as f64;
    let has_memory = model.memory().is_some();
    model.zero_grad();

    let mut sums = LossParts::default();
    let mut feats: Vec<f64> = Vec::new();
    let mut labels: Vec<u8> = Vec::new();
    for (i, s) in batch.iter().enumerate() {
        let with_mem = has_memory && i == 0;
        let (parts, cache, grads) = sample_pass(model, s, &weights, with_mem, beta_eff, scale)?;
        sums.loss_w += parts.loss_w * scale;
        sums.loss_o += parts.loss_o * scale;
        if with_mem {
            sums.loss_m = parts.loss_m;
        }
        if has_memory {
            feats.extend(cache.r.channels_last().into_data());
            labels.extend(s.gt.downsample(model.stride())?.data);
        }
        model.backward(&cache, &grads)?;
    }
    let effective = LossWeights { beta: beta_eff, ..weights };
    let total_value = total_loss(sums.loss_w, sums.loss_m, sums.loss_o, &effective);
    if ![sums.loss_w, sums.loss_m, sums.loss_o, total_value].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            op: format!(
                "loss at iteration {t} (loss_W={}, loss_M={}, loss_O={})",
                sums.loss_w, sums.loss_m, sums.loss_o
            ),
        });
    }
    if let Some(mem) = model.memory() {
        if mem.grad().data().iter().any(|&g| g != 0.0) {
            return Err(Error::Contract("feature memory received a gradient".into()));
        }
    }

    let lr = poly_lr(cfg.base_lr, t, total, cfg.poly_power)?;
    sgd_update(model, lr, cfg.weight_decay);

    let mut m_t = 0.0;
    let (mut drift, mut bound) = (0.0, 0.0);
    if let Some(mem) = model.memory_mut() {
        m_t = memory_momentum(cfg, t, total)?;
        let c = mem.dim();
        let feats = Tensor::from_vec(&[labels.len(), c], feats)?;
        let r_prime = transform(&feats, &labels, mem, cfg.use_cosine)?;
        let before = mem.values().clone();
        update_memory(mem, &r_prime, m_t)?;
        drift = mem.values().max_abs_diff(&before);
        bound = m_t * (feats.max_abs() + before.max_abs());
    }
    Ok(StepMetrics {
        iter: t,
        lr,
        m_t,
        loss_w: sums.loss_w,
        loss_m: sums.loss_m,
        loss_o: sums.loss_o,
        total: total_value,
        drift,
        bound,
    })
}

/// Splits off the last `holdout` samples for evaluation.
pub fn split_holdout(samples: &[SegSample], holdout: usize) -> Result<(&[SegSample], &[SegSample])> {
    if holdout >= samples.len() {
        return Err(Error::Validation(format!(
            "holdout of {holdout} leaves no training samples out of {}",
            samples.len()
        )));
    }
    Ok(samples.split_at(samples.len() - holdout))
}

/// Initializes the model's memory from the untrained backbone's features.
pub fn initialize_memory(model: &mut SegModel, cfg: &TrainConfig, samples: &[SegSample]) -> Result<()> {
    if model.memory().is_none() {
        return Ok(());
    }
    let mode = if cfg.clustering_init { InitMode::Clustering } else { InitMode::RandomPixel };
    let stream = samples.iter().map(|s| model.features_with_labels(&s.image, &s.gt));
    let mem = init_memory(stream, cfg.num_classes, cfg.channels, mode, sub_seed(cfg.seed, "memory-init"))?;
    model.set_memory(mem)
}

/// Training state: the model plus the position in the schedule and the metric rows so far.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: SegModel,
    pub iteration: u64,
    pub iters_per_epoch: u64,
    pub total_iters: u64,
    pub metrics: Vec<String>,
    pub memory_log: Vec<String>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, train_set: &[SegSample]) -> Result<Self> {
        cfg.validate()?;
        let first = train_set
            .first()
            .ok_or_else(|| Error::Validation("training set is empty".into()))?;
        for s in train_set {
            s.gt.validate(cfg.num_classes)?;
            if s.image.shape() != first.image.shape() {
                return Err(Error::Validation("all samples must share one image shape".into()));
            }
        }
        let mut model = SegModel::new(cfg.model_config(first.image.channels()), cfg.seed)?;
        initialize_memory(&mut model, &cfg, train_set)?;
        let iters_per_epoch = train_set.len().div_ceil(cfg.batch_size) as u64;
        Ok(Trainer {
            total_iters: iters_per_epoch * cfg.epochs as u64,
            iters_per_epoch,
            cfg,
            model,
            iteration: 0,
            metrics: Vec::new(),
            memory_log: Vec::new(),
        })
    }

    /// Restores a trainer from a checkpoint written by [`Trainer::save`].
    pub fn resume(path: &Path, train_set: &[SegSample]) -> Result<Self> {
        let (model, manifest) = load_checkpoint(path)?;
        let cfg = manifest.config.clone();
        let iters_per_epoch = train_set.len().div_ceil(cfg.batch_size) as u64;
        let total_iters = iters_per_epoch * cfg.epochs as u64;
        if manifest.iteration > total_iters {
            return Err(Error::Validation(format!(
                "checkpoint at iteration {} is past the schedule's {total_iters} iterations",
                manifest.iteration
            )));
        }
        Ok(Trainer {
            cfg,
            model,
            iteration: manifest.iteration,
            iters_per_epoch,
            total_iters,
            metrics: manifest.metrics,
            memory_log: manifest.memory_log,
        })
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.total_iters
    }

    fn batch_indices(&self, n: usize, t: u64) -> Vec<usize> {
        let epoch = t / self.iters_per_epoch;
        let b = (t % self.iters_per_epoch) as usize;
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng_for(self.cfg.seed, &format!("shuffle/{epoch}")));
        let lo = b * self.cfg.batch_size;
        perm[lo..(lo + self.cfg.batch_size).min(n)].to_vec()
    }

    pub fn step(&mut self, train_set: &[SegSample]) -> Result<StepMetrics> {
        let t = self.iteration;
        let batch: Vec<&SegSample> = self.batch_indices(train_set.len(), t).into_iter().map(|i| &train_set[i]).collect();
        let m = train_step(&mut self.model, &batch, &self.cfg, t, self.total_iters)?;
        self.metrics.push(m.csv_row());
        self.memory_log.push(m.memory_row());
        self.iteration += 1;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.model, &self.cfg, self.iteration, &self.metrics, &self.memory_log)
    }

    /// Runs the remaining iterations, writing periodic checkpoints into `out_dir` when given.
    /// A non-finite loss writes a diagnostic dump before the error is returned.
    pub fn run(&mut self, train_set: &[SegSample], out_dir: Option<&Path>) -> Result<()> {
        while !self.is_done() {
            match self.step(train_set) {
                Ok(m) => {
                    log::debug!("{}", m.csv_row());
                    let every = self.cfg.checkpoint_every as u64;
                    if let (Some(dir), true) = (out_dir, every > 0 && self.iteration.is_multiple_of(every)) {
                        self.save(&dir.join(format!("checkpoint_{:06}.mct", self.iteration)))?;
                    }
                }
                Err(e) => {
                    if let (Some(dir), Error::NonFinite { .. }) = (out_dir, &e) {
                        let dump = dir.join(format!("nonfinite_iter{}", self.iteration));
                        self.save(&dump.with_extension("mct"))?;
                        log::error!("non-finite loss; state dumped to {}", dump.display());
                    }
                    return Err(e);
                }
            }
        }
        Ok(())
    }

    pub fn metrics_csv(&self) -> String {
        csv(METRICS_HEADER, &self.metrics)
    }

    pub fn memory_csv(&self) -> String {
        csv(MEMORY_HEADER, &self.memory_log)
    }
}

fn csv(header: &str, rows: &[String]) -> String {
    let mut s = String::with_capacity(rows.len() * 64);
    s.push_str(header);
    s.push('\n');
    for r in rows {
        s.push_str(r);
        s.push('\n');
    }
    s
}

pub struct TrainOutcome {
    pub trainer: Trainer,
    pub eval: Option<EvalReport>,
    pub checkpoint: Option<PathBuf>,
}

/// Trains from scratch (or continues `resume`), writes `metrics.csv`,
/// `memory.csv` and the final checkpoint into `out_dir`, and evaluates on
/// `val_set` when it is nonempty.
pub fn train(
    cfg: TrainConfig,
    train_set: &[SegSample],
    val_set: &[SegSample],
    out_dir: Option<&Path>,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut trainer = match resume {
        Some(p) => Trainer::resume(p, train_set)?,
        None => Trainer::new(cfg, train_set)?,
    };
    trainer.run(train_set, out_dir)?;
    let mut checkpoint = None;
    if let Some(dir) = out_dir {
        std::fs::write(dir.join("metrics.csv"), trainer.metrics_csv())?;
        std::fs::write(dir.join("memory.csv"), trainer.memory_csv())?;
        let p = dir.join("checkpoint.mct");
        trainer.save(&p)?;
        checkpoint = Some(p);
    }
    let eval = if val_set.is_empty() {
        None
    } else {
        Some(evaluate(&trainer.model, val_set)?)
    };
    Ok(TrainOutcome { trainer, eval, checkpoint })
}

/// The full multi-task loss on one sample as a differentiable objective
/// over every model parameter.
pub struct TotalObjective {
    pub model: SegModel,
    pub sample: SegSample,
    pub weights: LossWeights,
    pub use_rcl: bool,
}

impl TotalObjective {
    fn beta_eff(&self) -> f64 {
        if self.use_rcl {
            self.weights.beta
        } else {
            0.0
        }
    }

    fn combine(&self, p: &LossParts) -> f64 {
        self.weights.alpha * p.loss_w + self.beta_eff() * p.loss_m + p.loss_o
    }
}

impl Differentiable for TotalObjective {
    fn loss(&self) -> Result<f64> {
        let (p, _, _) = sample_pass(&self.model, &self.sample, &self.weights, true, self.beta_eff(), 1.0)?;
        Ok(self.combine(&p))
    }

    fn loss_and_grad(&mut self) -> Result<f64> {
        self.model.zero_grad();
        let (p, cache, grads) = sample_pass(&self.model, &self.sample, &self.weights, true, self.beta_eff(), 1.0)?;
        self.model.backward(&cache, &grads)?;
        Ok(self.combine(&p))
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        self.model.visit_params_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_dataset, SynthTaskSpec};
    use approx::assert_abs_diff_eq;

    fn tiny_spec() -> SynthTaskSpec {
        SynthTaskSpec {
            num_classes: 3,
            height: 8,
            width: 8,
            class_means: vec![vec![0.0, 0.0, 0.0], vec![1.5, 1.5, 1.5], vec![-1.5, 1.5, -1.5]],
            class_weights: vec![1.0; 3],
            min_region: 4,
            regions: 3,
            ..SynthTaskSpec::default()
        }
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            num_classes: 3,
            channels: 4,
            blocks: 2,
            epochs: 2,
            batch_size: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn poly_schedule_values() {
        assert_eq!(poly_lr(0.01, 0, 100, 0.9).unwrap(), 0.01);
        assert_eq!(poly_lr(0.01, 100, 100, 0.9).unwrap(), 0.0);
        // 0.5^0.9 evaluated with 50-digit arithmetic
        assert_abs_diff_eq!(poly_lr(1.0, 50, 100, 0.9).unwrap(), 0.535_886_731_268_146_6, epsilon = 1e-15);
        assert!(poly_lr(0.01, 101, 100, 0.9).is_err());
    }

    #[test]
    fn zero_lr_leaves_parameters_but_moves_memory() {
        let data = generate_dataset(&tiny_spec(), 4, 1).unwrap();
        let mut tr = Trainer::new(tiny_cfg(), &data).unwrap();
        tr.cfg.base_lr = 0.0;
        let before = tr.model.clone();
        let batch: Vec<&SegSample> = data.iter().take(2).collect();
        train_step(&mut tr.model, &batch, &tr.cfg, 0, 10).unwrap();
        let mut a = Vec::new();
        let mut b = Vec::new();
        tr.model.clone().visit_params_mut(&mut |n, p| if n != "memory" { a.push(p.value.clone()) });
        before.clone().visit_params_mut(&mut |n, p| if n != "memory" { b.push(p.value.clone()) });
        assert_eq!(a, b);
        assert_ne!(tr.model.memory().unwrap().values(), before.memory().unwrap().values());
        assert_eq!(tr.model.memory().unwrap().update_count(), before.memory().unwrap().update_count() + 1);
    }

    #[test]
    fn identical_seeds_identical_metrics() {
        let data = generate_dataset(&tiny_spec(), 5, 2).unwrap();
        let run = || {
            let mut tr = Trainer::new(tiny_cfg(), &data).unwrap();
            tr.run(&data, None).unwrap();
            tr.metrics_csv()
        };
        let a = run();
        assert_eq!(a, run());
        assert_eq!(a.lines().count(), 1 + 2 * 2);
    }

}
