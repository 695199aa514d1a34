//! Training recipe: SGD with momentum and selective weight decay, cosine
//! learning-rate annealing without restart (with an optional warm start),
//! the per-step coefficient lifecycle, and test-phase evaluation.
//!
//! Per training step: sample alphas, forward, loss, sample betas, install
//! them on the combine nodes, backward, SGD step. Any non-finite value in
//! the forward pass, the loss or the gradients terminates the run with a
//! divergence report naming the epoch and step.

use crate::data::{collate, AugmentCtx, BatchIter, DatasetStats, LabeledImage};
use crate::error::{Error, Result};
use crate::graph::{Graph, Reduction};
use crate::models::Network;
use crate::params::ParamSet;
use crate::rng::{purpose, substream, RngStream};
use crate::shake::{step_coefficients, CoefficientPass, CoefficientSet, Phase};
use crate::tensor::{Element, Tensor};
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Numeric precision of the training run (verification paths always use
/// double).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    Double,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarmStart {
    pub lr: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    #[serde(default)]
    pub warm_start: Option<WarmStart>,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub seed: u64,
    #[serde(default = "default_precision")]
    pub precision: Precision,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    1e-4
}

fn default_precision() -> Precision {
    Precision::Single
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.lr0 <= 0.0 {
            return Err(Error::Config("lr0 must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if let Some(w) = &self.warm_start {
            if w.lr <= 0.0 {
                return Err(Error::Config("warm_start.lr must be positive".into()));
            }
            if w.epochs >= self.epochs {
                return Err(Error::Config(
                    "warm_start.epochs must leave at least one annealed epoch".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Cosine annealing without restart: `lr(t) = 0.5 * lr0 * (1 + cos(pi t/T))`.
pub fn cosine_lr(t: usize, total: usize, lr0: f64) -> Result<f64> {
    if t > total {
        return Err(Error::Usage(format!(
            "schedule queried at epoch {t} past the end of training ({total})"
        )));
    }
    Ok(0.5 * lr0 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos()))
}

/// Epoch learning rate including the optional warm start: the warm-start
/// rate holds for its configured epochs, then the cosine schedule runs
/// over the remaining epochs.
pub fn schedule_lr(cfg: &TrainConfig, t: usize) -> Result<f64> {
    match &cfg.warm_start {
        Some(w) if t < w.epochs => Ok(w.lr),
        Some(w) => cosine_lr(t - w.epochs, cfg.epochs - w.epochs, cfg.lr0),
        None => cosine_lr(t, cfg.epochs, cfg.lr0),
    }
}

/// Momentum buffers, aligned with parameter registration order.
pub struct SgdState<T: Element> {
    velocity: Vec<Tensor<T>>,
}

impl<T: Element> SgdState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        SgdState {
            velocity: params
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape()))
                .collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    pub fn velocity_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.velocity
    }
}

/// One SGD update:
/// `v <- momentum*v + g + weight_decay*theta; theta <- theta - lr*v`,
/// with weight decay applied only to parameters flagged for it (conv and
/// linear weights; never batchnorm scale/shift or biases). Gradients are
/// zeroed afterwards. Non-finite gradients abort with an error.
pub fn sgd_step<T: Element>(
    params: &mut ParamSet<T>,
    state: &mut SgdState<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for (_, p) in params.iter() {
        if !p.grad.data().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "sgd_step" });
        }
    }
    let lr_t = T::from_f64(lr);
    let mom_t = T::from_f64(momentum);
    let wd_t = T::from_f64(weight_decay);
    for i in 0..params.len() {
        let (theta, grad, decay) = params.update_view(crate::params::ParamId(i));
        let v = &mut state.velocity[i];
        for ((vv, g), t) in v
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(theta.data_mut())
        {
            let mut gg = *g;
            if decay {
                gg += wd_t * *t;
            }
            *vv = mom_t * *vv + gg;
            *t -= lr_t * *vv;
        }
    }
    params.zero_grads();
    Ok(())
}

/// Everything needed to continue training from a point: the optimizer
/// state, the coefficient stream, and the next epoch to run.
pub struct TrainState<T: Element> {
    pub sgd: SgdState<T>,
    pub coeff_rng: RngStream,
    pub next_epoch: usize,
}

impl<T: Element> TrainState<T> {
    pub fn new(net: &Network<T>, seed: u64) -> Self {
        let coeff_seed = {
            use rand::RngCore;
            substream(seed, &[purpose::COEFF]).next_u64()
        };
        TrainState {
            sgd: SgdState::new(&net.params),
            coeff_rng: RngStream::new(coeff_seed),
            next_epoch: 0,
        }
    }
}

/// Per-epoch metrics. `train_loss`/`train_err` are accumulated from the
/// stochastic training-phase forward passes (the quantity training curves
/// plot); `test_err` is a deterministic test-phase evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_err: f64,
    pub test_err: f64,
    pub seconds: f64,
}

pub struct PreparedData<'a> {
    pub train: &'a [LabeledImage],
    pub test: &'a [LabeledImage],
    pub stats: &'a DatasetStats,
    pub augment: bool,
}

fn argmax_rows<T: Element>(logits: &Tensor<T>) -> Vec<usize> {
    let (n, k) = logits.dims2().expect("logits are 2-d");
    (0..n)
        .map(|row| {
            let r = &logits.data()[row * k..(row + 1) * k];
            let mut best = 0;
            for (j, v) in r.iter().enumerate() {
                if *v > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Run epochs `state.next_epoch .. cfg.epochs`, invoking `on_epoch` after
/// each epoch. Returns the records it produced. A divergence terminates
/// the run with [`Error::Diverged`] naming the epoch and step.
pub fn train_loop<T: Element>(
    net: &mut Network<T>,
    data: &PreparedData,
    cfg: &TrainConfig,
    state: &mut TrainState<T>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    net.spec.shake.validate()?;
    let shake = net.spec.shake;
    let num_blocks = net.num_blocks();
    let mut records = Vec::new();

    for epoch in state.next_epoch..cfg.epochs {
        let started = Instant::now();
        let lr = schedule_lr(cfg, epoch)?;
        let mut loss_sum = 0.0f64;
        let mut err_count = 0usize;
        let mut seen = 0usize;

        let diverged = |step: usize| Error::Diverged { epoch, step };
        let batches = BatchIter::for_epoch(data.train.len(), cfg.batch_size, true, cfg.seed, epoch)?;
        for (step, idxs) in batches.enumerate() {
            let aug = data
                .augment
                .then_some(AugmentCtx {
                    seed: cfg.seed,
                    epoch,
                });
            let (images, labels) = collate::<T>(data.train, &idxs, data.stats, aug);
            let n = idxs.len();

            let mut coeffs = CoefficientSet::new(num_blocks);
            step_coefficients(
                &mut coeffs,
                CoefficientPass::Forward,
                &shake,
                n,
                &mut state.coeff_rng,
            )?;

            let mut g: Graph<T> = Graph::new();
            let trace = match net.forward(&mut g, images, Phase::Train, Some(&coeffs)) {
                Ok(t) => t,
                Err(Error::NonFinite { .. }) => return Err(diverged(step)),
                Err(e) => return Err(e),
            };
            let loss = match g.softmax_cross_entropy(trace.logits, &labels, Reduction::Mean) {
                Ok(l) => l,
                Err(Error::NonFinite { .. }) => return Err(diverged(step)),
                Err(e) => return Err(e),
            };
            let loss_val = g.value(loss).item()?.as_f64();
            if !loss_val.is_finite() {
                return Err(diverged(step));
            }
            loss_sum += loss_val * n as f64;
            let preds = argmax_rows(g.value(trace.logits));
            err_count += preds
                .iter()
                .zip(labels.iter())
                .filter(|(p, l)| p != l)
                .count();
            seen += n;

            step_coefficients(
                &mut coeffs,
                CoefficientPass::Backward,
                &shake,
                n,
                &mut state.coeff_rng,
            )?;
            crate::models::attach_betas(&mut g, &trace, &coeffs)?;
            g.backward(loss)?;
            net.harvest_grads(&mut g, &trace)?;
            drop(g);

            match sgd_step(
                &mut net.params,
                &mut state.sgd,
                lr,
                cfg.momentum,
                cfg.weight_decay,
            ) {
                Ok(()) => {}
                Err(Error::NonFinite { .. }) => return Err(diverged(step)),
                Err(e) => return Err(e),
            }
        }

        let eval = evaluate(net, data.test, data.stats, cfg.batch_size)?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / seen as f64,
            train_err: 100.0 * err_count as f64 / seen as f64,
            test_err: eval.error_percent,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        records.push(record);
        state.next_epoch = epoch + 1;
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub loss: f64,
    pub error_percent: f64,
    pub images: usize,
}

/// Deterministic test-phase evaluation: batchnorm in eval mode, both
/// branches at 0.5, no augmentation, original order.
pub fn evaluate<T: Element>(
    net: &mut Network<T>,
    images: &[LabeledImage],
    stats: &DatasetStats,
    batch_size: usize,
) -> Result<EvalResult> {
    let mut rng = substream(0, &[purpose::SHUFFLE]);
    let mut loss_sum = 0.0f64;
    let mut errors = 0usize;
    let mut seen = 0usize;
    for idxs in BatchIter::new(images.len(), batch_size, false, &mut rng)? {
        let (batch, labels) = collate::<T>(images, &idxs, stats, None);
        let mut g: Graph<T> = Graph::new();
        let trace = net.forward(&mut g, batch, Phase::Test, None)?;
        let loss = g.softmax_cross_entropy(trace.logits, &labels, Reduction::Mean)?;
        loss_sum += g.value(loss).item()?.as_f64() * idxs.len() as f64;
        let preds = argmax_rows(g.value(trace.logits));
        errors += preds
            .iter()
            .zip(labels.iter())
            .filter(|(p, l)| p != l)
            .count();
        seen += idxs.len();
    }
    Ok(EvalResult {
        loss: loss_sum / seen as f64,
        error_percent: 100.0 * errors as f64 / seen as f64,
        images: seen,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_and_midpoint_exact() {
        assert_eq!(cosine_lr(0, 100, 0.2).unwrap(), 0.2);
        assert_eq!(cosine_lr(50, 100, 0.2).unwrap(), 0.1);
        assert_eq!(cosine_lr(100, 100, 0.2).unwrap(), 0.0);
    }

    #[test]
    fn cosine_monotone_nonincreasing() {
        let total = 1800;
        let mut prev = f64::INFINITY;
        for t in 0..=total {
            let lr = cosine_lr(t, total, 0.2).unwrap();
            assert!(lr <= prev, "t={t}");
            prev = lr;
        }
    }

    #[test]
    fn cosine_past_end_is_usage_error() {
        assert!(matches!(cosine_lr(11, 10, 0.1), Err(Error::Usage(_))));
    }

    #[test]
    fn warm_start_overrides_then_anneals() {
        let cfg = TrainConfig {
            epochs: 11,
            batch_size: 4,
            lr0: 0.05,
            warm_start: Some(WarmStart {
                lr: 0.025,
                epochs: 1,
            }),
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            precision: Precision::Double,
        };
        assert_eq!(schedule_lr(&cfg, 0).unwrap(), 0.025);
        assert_eq!(schedule_lr(&cfg, 1).unwrap(), 0.05); // cosine resumes at lr0
        assert_eq!(schedule_lr(&cfg, 6).unwrap(), 0.025); // midpoint of remaining 10
        assert_eq!(schedule_lr(&cfg, 11).unwrap(), 0.0);
    }

    fn one_param_setup(theta0: f64) -> (ParamSet<f64>, SgdState<f64>) {
        let mut ps = ParamSet::new();
        ps.add_param("w", Tensor::from_vec(&[1], vec![theta0]).unwrap(), true)
            .unwrap();
        let st = SgdState::new(&ps);
        (ps, st)
    }

    #[test]
    fn sgd_vanilla_step() {
        let (mut ps, mut st) = one_param_setup(0.0);
        let pid = ps.by_name("w").unwrap();
        ps.accumulate_grad(pid, &Tensor::from_vec(&[1], vec![1.0]).unwrap())
            .unwrap();
        sgd_step(&mut ps, &mut st, 0.1, 0.0, 0.0).unwrap();
        assert!((ps.value(pid).data()[0] + 0.1).abs() < 1e-15);
        // Gradients zeroed after the step.
        assert_eq!(ps.grad(pid).data(), &[0.0]);
    }

    #[test]
    fn sgd_momentum_recurrence() {
        let (mut ps, mut st) = one_param_setup(0.0);
        let pid = ps.by_name("w").unwrap();
        for _ in 0..2 {
            ps.accumulate_grad(pid, &Tensor::from_vec(&[1], vec![1.0]).unwrap())
                .unwrap();
            sgd_step(&mut ps, &mut st, 1.0, 0.9, 0.0).unwrap();
        }
        // v1 = 1, theta1 = -1; v2 = 0.9 + 1 = 1.9, theta2 = -2.9.
        assert!((st.velocity()[0].data()[0] - 1.9).abs() < 1e-12);
        assert!((ps.value(pid).data()[0] + 2.9).abs() < 1e-12);
    }

    #[test]
    fn sgd_decay_only_step() {
        let (mut ps, mut st) = one_param_setup(1.0);
        let pid = ps.by_name("w").unwrap();
        sgd_step(&mut ps, &mut st, 1.0, 0.0, 0.1).unwrap();
        assert!((ps.value(pid).data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_skips_decay_on_unflagged_params() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        ps.add_param("bn.scale", Tensor::from_vec(&[1], vec![1.0]).unwrap(), false)
            .unwrap();
        let mut st = SgdState::new(&ps);
        sgd_step(&mut ps, &mut st, 1.0, 0.0, 0.5).unwrap();
        let pid = ps.by_name("bn.scale").unwrap();
        assert_eq!(ps.value(pid).data(), &[1.0]);
    }

    #[test]
    fn sgd_matches_scalar_oracle_exactly() {
        // Hand-rolled recurrence, same arithmetic order, three steps.
        let (mut ps, mut st) = one_param_setup(0.3);
        let pid = ps.by_name("w").unwrap();
        let grads = [0.5, -1.25, 2.0];
        let (lr, mom, wd) = (0.07, 0.9, 0.01);
        let mut v = 0.0f64;
        let mut theta = 0.3f64;
        for g in grads {
            ps.accumulate_grad(pid, &Tensor::from_vec(&[1], vec![g]).unwrap())
                .unwrap();
            sgd_step(&mut ps, &mut st, lr, mom, wd).unwrap();
            let gg = g + wd * theta;
            v = mom * v + gg;
            theta -= lr * v;
            assert_eq!(ps.value(pid).data()[0].to_bits(), theta.to_bits());
            assert_eq!(st.velocity()[0].data()[0].to_bits(), v.to_bits());
        }
    }

    #[test]
    fn sgd_nan_gradient_is_error() {
        let (mut ps, mut st) = one_param_setup(0.0);
        let pid = ps.by_name("w").unwrap();
        ps.accumulate_grad(pid, &Tensor::from_vec(&[1], vec![f64::NAN]).unwrap())
            .unwrap();
        assert!(matches!(
            sgd_step(&mut ps, &mut st, 0.1, 0.9, 0.0),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn train_config_validation() {
        let mut cfg = TrainConfig {
            epochs: 10,
            batch_size: 8,
            lr0: 0.1,
            warm_start: None,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 1,
            precision: Precision::Single,
        };
        assert!(cfg.validate().is_ok());
        cfg.momentum = 1.0;
        assert!(cfg.validate().is_err());
        cfg.momentum = 0.9;
        cfg.warm_start = Some(WarmStart { lr: 0.05, epochs: 10 });
        assert!(cfg.validate().is_err());
    }
}
