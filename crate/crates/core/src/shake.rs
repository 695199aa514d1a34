//! Stochastic two-branch blending coefficients.
//!
//! A residual block with two parallel branches is combined as
//! `x + alpha * branch1 + (1 - alpha) * branch2`, with `alpha` redrawn
//! before every forward pass and an independently chosen `beta` installed
//! before every backward pass. At test time both branches are weighted by
//! the expectation 0.5.
//!
//! Draw order is part of the public contract: blocks in topological order,
//! images in index order. `Even` and `Keep` consume no draws; `Shake`
//! consumes one uniform per coefficient; the update rules M2-M5 consume
//! one uniform per coefficient and M1 none (its formula is deterministic
//! in `alpha`).

use crate::error::{Error, Result};
use crate::rng::RngStream;
use serde::{Deserialize, Serialize};

/// Forward-pass coefficient policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForwardMode {
    /// Constant 0.5 (plain two-branch averaging, up to the factor 2).
    Even,
    /// Fresh uniform draw on the configured interval before each forward.
    Shake,
}

/// Backward-pass coefficient policy: how `beta` relates to `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackwardMode {
    Even,
    Shake,
    /// Reuse the forward coefficients; backward is then the exact gradient
    /// of the sampled forward function.
    Keep,
    M1,
    M2,
    M3,
    M4,
    M5,
}

impl BackwardMode {
    /// Whether the rule's formula contains a fresh uniform draw.
    fn consumes_draw(self) -> bool {
        matches!(
            self,
            BackwardMode::Shake
                | BackwardMode::M2
                | BackwardMode::M3
                | BackwardMode::M4
                | BackwardMode::M5
        )
    }
}

/// Coefficient granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    /// One coefficient per block, shared by every image in the mini-batch.
    Batch,
    /// An independent coefficient per image per block.
    Image,
}

/// Train/test phase. Test phase pins every coefficient to 0.5.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Test,
}

/// Full blending configuration for one model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShakeConfig {
    pub forward: ForwardMode,
    pub backward: BackwardMode,
    pub level: Level,
    /// Lower end of the alpha interval (and of beta for `Shake` backward).
    #[serde(default = "default_alpha_lo")]
    pub alpha_lo: f64,
    /// Upper end of the alpha interval.
    #[serde(default = "default_alpha_hi")]
    pub alpha_hi: f64,
}

fn default_alpha_lo() -> f64 {
    0.0
}

fn default_alpha_hi() -> f64 {
    1.0
}

impl Default for ShakeConfig {
    fn default() -> Self {
        ShakeConfig {
            forward: ForwardMode::Shake,
            backward: BackwardMode::Shake,
            level: Level::Image,
            alpha_lo: 0.0,
            alpha_hi: 1.0,
        }
    }
}

impl ShakeConfig {
    pub fn new(forward: ForwardMode, backward: BackwardMode, level: Level) -> Self {
        ShakeConfig {
            forward,
            backward,
            level,
            alpha_lo: 0.0,
            alpha_hi: 1.0,
        }
    }

    pub fn with_interval(mut self, lo: f64, hi: f64) -> Self {
        self.alpha_lo = lo;
        self.alpha_hi = hi;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha_lo)
            || !(0.0..=1.0).contains(&self.alpha_hi)
            || self.alpha_lo > self.alpha_hi
        {
            return Err(Error::Config(format!(
                "alpha interval [{}, {}] must satisfy 0 <= alpha_lo <= alpha_hi <= 1",
                self.alpha_lo, self.alpha_hi
            )));
        }
        Ok(())
    }

    /// E-E-B baseline: both passes pinned to 0.5.
    pub fn even_even_batch() -> Self {
        ShakeConfig::new(ForwardMode::Even, BackwardMode::Even, Level::Batch)
    }
}

/// One block's coefficients for one training step. Both arrays always hold
/// one entry per image; at `Batch` level every entry is the same value.
#[derive(Debug, Clone)]
pub struct ShakeCoefficients {
    pub block_id: usize,
    pub alpha: Vec<f64>,
    pub beta: Option<Vec<f64>>,
}

/// Sample forward coefficients for one block.
pub fn sample_alpha(config: &ShakeConfig, batch_size: usize, rng: &mut RngStream) -> Vec<f64> {
    match config.forward {
        ForwardMode::Even => vec![0.5; batch_size],
        ForwardMode::Shake => match config.level {
            Level::Image => (0..batch_size)
                .map(|_| rng.uniform_in(config.alpha_lo, config.alpha_hi))
                .collect(),
            Level::Batch => {
                let v = rng.uniform_in(config.alpha_lo, config.alpha_hi);
                vec![v; batch_size]
            }
        },
    }
}

/// Evaluate one backward update rule at a given `alpha` and fresh uniform
/// `r`. For `Shake` the draw is mapped onto the configured interval; the
/// M-rules use `r` directly as `rand(0,1)`.
pub fn beta_from_rule(mode: BackwardMode, alpha: f64, r: f64, lo: f64, hi: f64) -> f64 {
    match mode {
        BackwardMode::Even => 0.5,
        BackwardMode::Keep => alpha,
        BackwardMode::Shake => lo + (hi - lo) * r,
        BackwardMode::M1 => 1.0 - alpha,
        BackwardMode::M2 => {
            if alpha < 0.5 {
                r * alpha
            } else {
                r * (1.0 - alpha) + alpha
            }
        }
        BackwardMode::M3 => {
            if alpha < 0.5 {
                r * (0.5 - alpha) + alpha
            } else {
                r * (alpha - 0.5) + 0.5
            }
        }
        BackwardMode::M4 => {
            if alpha < 0.5 {
                r * (0.5 - alpha) + 0.5
            } else {
                r * (0.5 - (1.0 - alpha)) + (1.0 - alpha)
            }
        }
        BackwardMode::M5 => {
            if alpha < 0.5 {
                r * alpha + (1.0 - alpha)
            } else {
                r * (1.0 - alpha)
            }
        }
    }
}

/// Sample backward coefficients for one block given its forward
/// coefficients.
pub fn sample_beta(config: &ShakeConfig, alpha: &[f64], rng: &mut RngStream) -> Vec<f64> {
    let mode = config.backward;
    match config.level {
        Level::Image => alpha
            .iter()
            .map(|&a| {
                let r = if mode.consumes_draw() { rng.uniform() } else { 0.0 };
                beta_from_rule(mode, a, r, config.alpha_lo, config.alpha_hi)
            })
            .collect(),
        Level::Batch => {
            let a = alpha.first().copied().unwrap_or(0.5);
            let r = if mode.consumes_draw() { rng.uniform() } else { 0.0 };
            let b = beta_from_rule(mode, a, r, config.alpha_lo, config.alpha_hi);
            vec![b; alpha.len()]
        }
    }
}

/// Which half of the per-step coefficient update to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoefficientPass {
    /// Before the forward pass: draw `alpha` for every block.
    Forward,
    /// After the forward pass, before backward: draw `beta` for every block.
    Backward,
}

/// Per-step coefficients for every shake block of a model, sampled in
/// block order.
#[derive(Debug, Clone)]
pub struct CoefficientSet {
    blocks: Vec<ShakeCoefficients>,
    num_blocks: usize,
}

impl CoefficientSet {
    pub fn new(num_blocks: usize) -> Self {
        CoefficientSet {
            blocks: Vec::new(),
            num_blocks,
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    pub fn blocks(&self) -> &[ShakeCoefficients] {
        &self.blocks
    }

    pub fn block(&self, id: usize) -> Option<&ShakeCoefficients> {
        self.blocks.get(id)
    }
}

/// Run one half of the coefficient update for every block.
///
/// Must be called exactly twice per training step: once with
/// [`CoefficientPass::Forward`] before the forward pass and once with
/// [`CoefficientPass::Backward`] before the backward pass. Sampling betas
/// without alphas for the step is a usage error.
pub fn step_coefficients(
    set: &mut CoefficientSet,
    pass: CoefficientPass,
    config: &ShakeConfig,
    batch_size: usize,
    rng: &mut RngStream,
) -> Result<()> {
    match pass {
        CoefficientPass::Forward => {
            set.blocks.clear();
            for block_id in 0..set.num_blocks {
                set.blocks.push(ShakeCoefficients {
                    block_id,
                    alpha: sample_alpha(config, batch_size, rng),
                    beta: None,
                });
            }
            Ok(())
        }
        CoefficientPass::Backward => {
            if set.blocks.len() != set.num_blocks {
                return Err(Error::Usage(
                    "beta sampled before alpha: run the forward coefficient pass first".into(),
                ));
            }
            for block in &mut set.blocks {
                block.beta = Some(sample_beta(config, &block.alpha, rng));
            }
            Ok(())
        }
    }
}
