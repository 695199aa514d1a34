//! Finite-difference gradient verification.
//!
//! Only configurations whose backward pass is a true gradient are
//! checkable: Even-Even (deterministic network) and Keep (backward is the
//! exact gradient of the sampled forward function, checked with the
//! coefficients frozen). Anything else — Shake or the M-rules — is
//! deliberately not a gradient and is rejected.

use crate::error::{Error, Result};
use crate::graph::{Graph, Reduction};
use crate::models::Network;
use crate::params::ParamId;
use crate::rng::RngStream;
use crate::shake::{
    step_coefficients, BackwardMode, CoefficientPass, CoefficientSet, ForwardMode, Phase,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradcheckEntry {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn frozen_coefficients(
    net: &Network<f64>,
    batch: usize,
    seed: u64,
) -> Result<CoefficientSet> {
    let shake = net.spec.shake;
    let mut rng = RngStream::new(seed);
    let mut coeffs = CoefficientSet::new(net.num_blocks());
    step_coefficients(&mut coeffs, CoefficientPass::Forward, &shake, batch, &mut rng)?;
    step_coefficients(&mut coeffs, CoefficientPass::Backward, &shake, batch, &mut rng)?;
    Ok(coeffs)
}

fn loss_value(
    net: &mut Network<f64>,
    images: &Tensor<f64>,
    labels: &[usize],
    coeffs: &CoefficientSet,
) -> Result<f64> {
    let mut g: Graph<f64> = Graph::new();
    let trace = net.forward(&mut g, images.clone(), Phase::Train, Some(coeffs))?;
    let loss = g.softmax_cross_entropy(trace.logits, labels, Reduction::Mean)?;
    g.value(loss).item()
}

/// Compare every parameter's analytic gradient against central finite
/// differences `(L(theta+h) - L(theta-h)) / 2h` with
/// `h = 1e-4 * max(1, |theta|)`, at double precision, with the
/// coefficients frozen for the whole check.
///
/// Returns the max relative error per parameter. Relative error uses
/// `|a - fd| / max(|a|, |fd|, 1e-6)` so that finite-difference noise on
/// near-zero gradients does not register as disagreement.
pub fn gradcheck(
    net: &mut Network<f64>,
    images: &Tensor<f64>,
    labels: &[usize],
    seed: u64,
    tolerance: f64,
) -> Result<GradcheckReport> {
    let shake = net.spec.shake;
    let true_gradient = matches!(
        (shake.forward, shake.backward),
        (ForwardMode::Even, BackwardMode::Even) | (_, BackwardMode::Keep)
    );
    if !true_gradient {
        return Err(Error::Usage(format!(
            "gradcheck rejected for forward {:?} / backward {:?}: the backward pass \
             is deliberately not the gradient of the forward function; use an \
             Even-Even or Keep configuration",
            shake.forward, shake.backward
        )));
    }

    let batch = images.shape()[0];
    let coeffs = frozen_coefficients(net, batch, seed)?;

    // Analytic gradients.
    net.params.zero_grads();
    let mut g: Graph<f64> = Graph::new();
    let trace = net.forward(&mut g, images.clone(), Phase::Train, Some(&coeffs))?;
    let loss = g.softmax_cross_entropy(trace.logits, labels, Reduction::Mean)?;
    crate::models::attach_betas(&mut g, &trace, &coeffs)?;
    g.backward(loss)?;
    net.harvest_grads(&mut g, &trace)?;
    drop(g);

    let analytic: Vec<(String, Tensor<f64>)> = net
        .params
        .iter()
        .map(|(_, p)| (p.name.clone(), p.grad.clone()))
        .collect();
    net.params.zero_grads();

    let mut entries = Vec::with_capacity(analytic.len());
    let mut overall: f64 = 0.0;
    for (pi, (name, grads)) in analytic.iter().enumerate() {
        let pid = ParamId(pi);
        let mut worst: f64 = 0.0;
        for idx in 0..grads.numel() {
            let theta = net.params.value(pid).data()[idx];
            let h = 1e-4 * theta.abs().max(1.0);
            net.params.value_mut(pid).data_mut()[idx] = theta + h;
            let lp = loss_value(net, images, labels, &coeffs)?;
            net.params.value_mut(pid).data_mut()[idx] = theta - h;
            let lm = loss_value(net, images, labels, &coeffs)?;
            net.params.value_mut(pid).data_mut()[idx] = theta;
            let fd = (lp - lm) / (2.0 * h);
            let a = grads.data()[idx];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        overall = overall.max(worst);
        entries.push(GradcheckEntry {
            name: name.clone(),
            max_rel_err: worst,
        });
    }

    Ok(GradcheckReport {
        entries,
        max_rel_err: overall,
        tolerance,
    })
}
