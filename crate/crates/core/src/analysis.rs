//! Branch-correlation analysis.
//!
//! For each residual block, both branch outputs (scaled by 0.5, the
//! test-time coefficient) are flattened and every corresponding element
//! pair is streamed through a single-pass covariance accumulator over the
//! whole dataset; the per-block Pearson correlation comes out of the
//! accumulated moments. A layer-wise variant correlates the outputs of the
//! first three components of the left branch against those of the right
//! branch in all nine combinations, probing whether the end-of-block
//! summation aligns intermediate layers.
//!
//! Accumulation is always at double precision, whatever the model's
//! element type.

use crate::data::{collate, BatchIter, DatasetStats, LabeledImage};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::models::Network;
use crate::rng::{purpose, substream};
use crate::shake::Phase;
use crate::tensor::Element;
use std::fmt::Write as _;

/// Streaming count/means/central second moments/cross moment for one pair
/// of streams (Welford-style single-pass updates).
#[derive(Debug, Clone, Copy, Default)]
pub struct PairCovAccumulator {
    n: u64,
    mean_x: f64,
    mean_y: f64,
    m2x: f64,
    m2y: f64,
    cxy: f64,
}

impl PairCovAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, x: f64, y: f64) {
        self.n += 1;
        let n = self.n as f64;
        let dx = x - self.mean_x;
        let dy = y - self.mean_y;
        self.mean_x += dx / n;
        self.mean_y += dy / n;
        // dx is pre-update, the second factors are post-update.
        self.m2x += dx * (x - self.mean_x);
        self.m2y += dy * (y - self.mean_y);
        self.cxy += dx * (y - self.mean_y);
    }

    /// Combine two accumulators as if their streams were concatenated.
    pub fn merge(&self, other: &Self) -> Self {
        if self.n == 0 {
            return *other;
        }
        if other.n == 0 {
            return *self;
        }
        let na = self.n as f64;
        let nb = other.n as f64;
        let n = na + nb;
        let dx = other.mean_x - self.mean_x;
        let dy = other.mean_y - self.mean_y;
        let w = na * nb / n;
        PairCovAccumulator {
            n: self.n + other.n,
            mean_x: self.mean_x + dx * nb / n,
            mean_y: self.mean_y + dy * nb / n,
            m2x: self.m2x + other.m2x + dx * dx * w,
            m2y: self.m2y + other.m2y + dy * dy * w,
            cxy: self.cxy + other.cxy + dx * dy * w,
        }
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean_x(&self) -> f64 {
        self.mean_x
    }

    pub fn mean_y(&self) -> f64 {
        self.mean_y
    }

    /// Biased covariance (second cross moment over n).
    pub fn covariance(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.cxy / self.n as f64
        }
    }

    pub fn variance_x(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.m2x / self.n as f64
        }
    }

    pub fn variance_y(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.m2y / self.n as f64
        }
    }

    /// Pearson correlation. Errors if fewer than two samples were seen or
    /// either stream has zero variance.
    pub fn correlation(&self) -> Result<f64> {
        if self.n < 2 || self.m2x <= 0.0 || self.m2y <= 0.0 {
            return Err(Error::UndefinedCorrelation);
        }
        Ok(self.cxy / (self.m2x * self.m2y).sqrt())
    }
}

/// Per-block correlation of the two branch outputs. `None` marks blocks
/// where the correlation is undefined (zero-variance output).
#[derive(Debug, Clone)]
pub struct CorrelationReport {
    pub model: String,
    pub images: usize,
    pub per_block: Vec<Option<f64>>,
}

impl CorrelationReport {
    /// CSV rows `block,correlation`; undefined correlations are flagged.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("block,correlation\n");
        for (i, c) in self.per_block.iter().enumerate() {
            match c {
                Some(v) => writeln!(s, "{i},{v:.9}").unwrap(),
                None => writeln!(s, "{i},undefined").unwrap(),
            }
        }
        s
    }
}

/// Per-block 3x3 layer-alignment matrix: entry (m, n) correlates layer m
/// of branch 1 with layer n of branch 2 (0-based here, L1..L3 in reports).
#[derive(Debug, Clone)]
pub struct AlignmentReport {
    pub model: String,
    pub images: usize,
    pub per_block: Vec<[[Option<f64>; 3]; 3]>,
}

impl AlignmentReport {
    /// CSV rows `block,m,n,correlation` with 1-based layer indices.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("block,m,n,correlation\n");
        for (i, mat) in self.per_block.iter().enumerate() {
            for (m, row) in mat.iter().enumerate() {
                for (n, c) in row.iter().enumerate() {
                    match c {
                        Some(v) => writeln!(s, "{i},{},{},{v:.9}", m + 1, n + 1).unwrap(),
                        None => writeln!(s, "{i},{},{},undefined", m + 1, n + 1).unwrap(),
                    }
                }
            }
        }
        s
    }
}

fn stream_pairs<T: Element>(
    acc: &mut PairCovAccumulator,
    xs: &crate::tensor::Tensor<T>,
    ys: &crate::tensor::Tensor<T>,
    scale: f64,
) {
    for (x, y) in xs.data().iter().zip(ys.data()) {
        acc.update(x.as_f64() * scale, y.as_f64() * scale);
    }
}

/// Test-phase forward over the dataset, streaming both branches' final
/// outputs (times the test-time 0.5) into one accumulator per block.
pub fn branch_correlation<T: Element>(
    net: &mut Network<T>,
    images: &[LabeledImage],
    stats: &DatasetStats,
    batch_size: usize,
) -> Result<CorrelationReport> {
    let mut accs = vec![PairCovAccumulator::new(); net.num_blocks()];
    let mut seen = 0usize;
    let mut rng = substream(0, &[purpose::SHUFFLE]);
    for idxs in BatchIter::new(images.len(), batch_size, false, &mut rng)? {
        let (batch, _labels) = collate::<T>(images, &idxs, stats, None);
        let mut g: Graph<T> = Graph::new();
        let trace = net.forward(&mut g, batch, Phase::Test, None)?;
        for (bt, acc) in trace.blocks.iter().zip(accs.iter_mut()) {
            stream_pairs(acc, g.value(bt.b1_out), g.value(bt.b2_out), 0.5);
        }
        seen += idxs.len();
    }
    let per_block = accs
        .iter()
        .map(|a| match a.correlation() {
            Ok(v) => Ok(Some(v)),
            Err(Error::UndefinedCorrelation) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CorrelationReport {
        model: format!("{:?}", net.spec.family),
        images: seen,
        per_block,
    })
}

/// Layer-wise alignment: correlations between the outputs of the first
/// three components of branch 1 and branch 2, all nine pairings, per
/// block. Layer activations are streamed unscaled; shapes agree because
/// both branches share the same structure.
pub fn layerwise_alignment<T: Element>(
    net: &mut Network<T>,
    images: &[LabeledImage],
    stats: &DatasetStats,
    batch_size: usize,
) -> Result<AlignmentReport> {
    let mut accs = vec![[[PairCovAccumulator::new(); 3]; 3]; net.num_blocks()];
    let mut seen = 0usize;
    let mut rng = substream(0, &[purpose::SHUFFLE]);
    for idxs in BatchIter::new(images.len(), batch_size, false, &mut rng)? {
        let (batch, _labels) = collate::<T>(images, &idxs, stats, None);
        let mut g: Graph<T> = Graph::new();
        let trace = net.forward(&mut g, batch, Phase::Test, None)?;
        for (bt, block_accs) in trace.blocks.iter().zip(accs.iter_mut()) {
            let layers = bt.branch1_layers.len().min(bt.branch2_layers.len()).min(3);
            for m in 0..layers {
                for n in 0..layers {
                    stream_pairs(
                        &mut block_accs[m][n],
                        g.value(bt.branch1_layers[m]),
                        g.value(bt.branch2_layers[n]),
                        1.0,
                    );
                }
            }
        }
        seen += idxs.len();
    }
    let per_block = accs
        .iter()
        .map(|mat| {
            let mut out = [[None; 3]; 3];
            for m in 0..3 {
                for n in 0..3 {
                    out[m][n] = match mat[m][n].correlation() {
                        Ok(v) => Some(v),
                        Err(_) => None,
                    };
                }
            }
            out
        })
        .collect();
    Ok(AlignmentReport {
        model: format!("{:?}", net.spec.family),
        images: seen,
        per_block,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn perfectly_correlated_stream() {
        let mut acc = PairCovAccumulator::new();
        acc.update(1.0, 1.0);
        acc.update(2.0, 2.0);
        assert!((acc.correlation().unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn anti_correlated_stream() {
        let mut acc = PairCovAccumulator::new();
        for v in [1.0, 2.0, 3.0] {
            acc.update(v, -v);
        }
        assert!((acc.correlation().unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn matches_two_pass_formula() {
        let mut rng = RngStream::new(31);
        let pairs: Vec<(f64, f64)> = (0..10_000)
            .map(|_| {
                let x = rng.uniform() * 3.0 - 1.0;
                let y = 0.4 * x + rng.uniform();
                (x, y)
            })
            .collect();
        let mut acc = PairCovAccumulator::new();
        for &(x, y) in &pairs {
            acc.update(x, y);
        }
        // Two-pass oracle.
        let n = pairs.len() as f64;
        let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
        let cov = pairs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / n;
        let vx = pairs.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>() / n;
        let vy = pairs.iter().map(|p| (p.1 - my).powi(2)).sum::<f64>() / n;

        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-300);
        assert!(rel(acc.covariance(), cov) < 1e-10);
        assert!(rel(acc.variance_x(), vx) < 1e-10);
        assert!(rel(acc.variance_y(), vy) < 1e-10);
        let rho = cov / (vx * vy).sqrt();
        assert!((acc.correlation().unwrap() - rho).abs() < 1e-10);
    }

    #[test]
    fn zero_variance_is_undefined() {
        let mut acc = PairCovAccumulator::new();
        for i in 0..5 {
            acc.update(7.0, i as f64);
        }
        assert!(matches!(
            acc.correlation(),
            Err(Error::UndefinedCorrelation)
        ));
    }

    #[test]
    fn identical_streams_give_exactly_one() {
        let mut rng = RngStream::new(5);
        let mut acc = PairCovAccumulator::new();
        for _ in 0..1000 {
            let v = rng.uniform() * 10.0 - 5.0;
            acc.update(v, v);
        }
        assert_eq!(acc.correlation().unwrap(), 1.0);
    }

    #[test]
    fn independent_streams_near_zero() {
        let mut rng = RngStream::new(6);
        let mut acc = PairCovAccumulator::new();
        for _ in 0..100_000 {
            let x = rng.normal();
            let y = rng.normal();
            acc.update(x, y);
        }
        assert!(acc.correlation().unwrap().abs() < 0.02);
    }

    #[test]
    fn merge_equals_concatenated_stream() {
        let mut rng = RngStream::new(7);
        let pairs: Vec<(f64, f64)> = (0..2000)
            .map(|_| (rng.normal(), rng.normal() + 0.3))
            .collect();
        let mut whole = PairCovAccumulator::new();
        for &(x, y) in &pairs {
            whole.update(x, y);
        }
        let mut a = PairCovAccumulator::new();
        let mut b = PairCovAccumulator::new();
        for &(x, y) in &pairs[..700] {
            a.update(x, y);
        }
        for &(x, y) in &pairs[700..] {
            b.update(x, y);
        }
        let merged = a.merge(&b);
        let rel = |x: f64, y: f64| (x - y).abs() / y.abs().max(1e-300);
        assert!(rel(merged.covariance(), whole.covariance()) < 1e-10);
        assert!(rel(merged.variance_x(), whole.variance_x()) < 1e-10);
        assert!((merged.correlation().unwrap() - whole.correlation().unwrap()).abs() < 1e-10);
    }

    #[test]
    fn merge_is_associative_within_tolerance() {
        let mut rng = RngStream::new(8);
        let mk = |rng: &mut RngStream, n: usize| {
            let mut acc = PairCovAccumulator::new();
            for _ in 0..n {
                acc.update(rng.normal() * 2.0, rng.normal());
            }
            acc
        };
        let a = mk(&mut rng, 300);
        let b = mk(&mut rng, 500);
        let c = mk(&mut rng, 400);
        let left = a.merge(&b).merge(&c);
        let right = a.merge(&b.merge(&c));
        let rel = |x: f64, y: f64| (x - y).abs() / y.abs().max(1e-300);
        assert!(rel(left.covariance(), right.covariance()) < 1e-10);
        assert!(rel(left.variance_x(), right.variance_x()) < 1e-10);
        assert!(rel(left.variance_y(), right.variance_y()) < 1e-10);
    }

    #[test]
    fn order_invariance_within_tolerance() {
        let mut rng = RngStream::new(9);
        let mut pairs: Vec<(f64, f64)> = (0..5000)
            .map(|_| (rng.normal(), 0.5 * rng.normal() + 1.0))
            .collect();
        let mut fwd = PairCovAccumulator::new();
        for &(x, y) in &pairs {
            fwd.update(x, y);
        }
        // Deterministic shuffle.
        for i in (1..pairs.len()).rev() {
            let j = (rng.uniform() * (i + 1) as f64) as usize;
            pairs.swap(i, j);
        }
        let mut shuf = PairCovAccumulator::new();
        for &(x, y) in &pairs {
            shuf.update(x, y);
        }
        let rel = |x: f64, y: f64| (x - y).abs() / y.abs().max(1e-300);
        assert!(rel(shuf.covariance(), fwd.covariance()) < 1e-10);
        assert!((shuf.correlation().unwrap() - fwd.correlation().unwrap()).abs() < 1e-10);
    }
}
