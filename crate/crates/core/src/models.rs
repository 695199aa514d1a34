//! Declarative model builders.
//!
//! Four families share one executable form:
//!
//! - `ShakeResNet`: stem Conv3x3(3->16); 3 stages of two-branch residual
//!   blocks at widths (W, 2W, 4W) on feature maps (32, 16, 8); identity
//!   skips except where channels change, which use the two-flow
//!   pool/shift/conv projection; head is full-map average pooling plus a
//!   fully connected classifier. Branches are ReLU-Conv3x3-BN-ReLU-Conv3x3-BN.
//! - `ArchA`: the same blocks without any skip path.
//! - `ArchB`: skipless, one conv per branch (ReLU-Conv3x3-BN), twice the
//!   blocks per stage.
//! - `ArchC`: skipless and BN-free (ReLU-Conv3x3-ReLU-Conv3x3, convs carry
//!   biases), paper depth 14.
//!
//! Downsampling in the skipless families: the first conv of each branch in
//! the first block of stages 2 and 3 uses stride 2.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{BufId, ParamId, ParamSet};
use crate::rng::{purpose, substream, RngStream};
use crate::shake::{CoefficientSet, Phase, ShakeConfig};
use crate::tensor::{Element, Tensor};
use serde::{Deserialize, Serialize};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    ShakeResnet,
    ArchA,
    ArchB,
    ArchC,
}

/// Declarative description of a network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub depth: usize,
    pub base_width: usize,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    pub shake: ShakeConfig,
}

fn default_classes() -> usize {
    10
}

impl ModelSpec {
    pub fn shake_resnet(depth: usize, base_width: usize, shake: ShakeConfig) -> Self {
        ModelSpec {
            family: Family::ShakeResnet,
            depth,
            base_width,
            num_classes: 10,
            shake,
        }
    }

    pub fn arch_a(base_width: usize, shake: ShakeConfig) -> Self {
        ModelSpec {
            family: Family::ArchA,
            depth: 26,
            base_width,
            num_classes: 10,
            shake,
        }
    }

    pub fn arch_b(base_width: usize, shake: ShakeConfig) -> Self {
        ModelSpec {
            family: Family::ArchB,
            depth: 26,
            base_width,
            num_classes: 10,
            shake,
        }
    }

    pub fn arch_c(depth: usize, base_width: usize, shake: ShakeConfig) -> Self {
        ModelSpec {
            family: Family::ArchC,
            depth,
            base_width,
            num_classes: 10,
            shake,
        }
    }

    /// Residual blocks per stage, derived from depth.
    pub fn blocks_per_stage(&self) -> Result<usize> {
        let (den, kind) = match self.family {
            Family::ArchB => (3, "depth = 3*blocks_per_stage + 2"),
            _ => (6, "depth = 6*blocks_per_stage + 2"),
        };
        if self.depth < 2 + den || (self.depth - 2) % den != 0 {
            return Err(Error::Config(format!(
                "invalid depth {} for {:?}: {kind}",
                self.depth, self.family
            )));
        }
        Ok((self.depth - 2) / den)
    }

    /// Stage widths (W, 2W, 4W).
    pub fn stage_widths(&self) -> [usize; 3] {
        let w = self.base_width;
        [w, 2 * w, 4 * w]
    }

    pub fn validate(&self) -> Result<()> {
        self.blocks_per_stage()?;
        self.shake.validate()?;
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if self.base_width == 0 {
            return Err(Error::Config("base_width must be positive".into()));
        }
        if self.family == Family::ShakeResnet && self.base_width % 2 != 0 {
            return Err(Error::Config(
                "shake_resnet base_width must be even (projection skip concatenates two half-width flows)".into(),
            ));
        }
        Ok(())
    }
}

const STEM_CHANNELS: usize = 16;

struct ConvLayer {
    w: ParamId,
    b: Option<ParamId>,
    stride: usize,
    pad: usize,
}

struct BnLayer {
    scale: ParamId,
    shift: ParamId,
    mean: BufId,
    var: BufId,
}

enum BranchLayer {
    Relu,
    Conv(ConvLayer),
    Bn(BnLayer),
}

struct Branch {
    layers: Vec<BranchLayer>,
}

enum Skip {
    /// Pass the block input through unchanged.
    Identity,
    /// Two flows of avgpool1x1 + conv1x1 (the second on input shifted one
    /// pixel down-right), concatenated on channels.
    Projection {
        flow1: ConvLayer,
        flow2: ConvLayer,
        stride: usize,
    },
    /// No skip path at all (architectures A, B, C).
    None,
}

struct Block {
    branch1: Branch,
    branch2: Branch,
    skip: Skip,
}

/// An executable model: immutable layout plus a mutable [`ParamSet`].
pub struct Network<T: Element> {
    pub spec: ModelSpec,
    pub params: ParamSet<T>,
    stem: ConvLayer,
    blocks: Vec<Block>,
    fc_w: ParamId,
    fc_b: ParamId,
}

/// Node handles recorded during one forward pass.
pub struct BlockTrace {
    pub block_id: usize,
    /// Activation entering the block (fed to both branches and the skip).
    pub input: NodeId,
    /// Output of each branch component, in order.
    pub branch1_layers: Vec<NodeId>,
    pub branch2_layers: Vec<NodeId>,
    /// Final branch outputs (before coefficient scaling).
    pub b1_out: NodeId,
    pub b2_out: NodeId,
    /// The combine node carrying the block's coefficients.
    pub combine: NodeId,
}

pub struct ForwardTrace {
    pub logits: NodeId,
    pub blocks: Vec<BlockTrace>,
    param_nodes: Vec<(ParamId, NodeId)>,
}

struct Builder<'a, T: Element> {
    params: &'a mut ParamSet<T>,
    rng: RngStream,
}

impl<'a, T: Element> Builder<'a, T> {
    /// Conv kernel: zero-mean normal with std sqrt(2 / fan_in).
    fn conv(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Result<ConvLayer> {
        let fan_in = (c_in * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let n = c_out * c_in * k * k;
        let data: Vec<T> = (0..n)
            .map(|_| T::from_f64(self.rng.normal() * std))
            .collect();
        let w = self
            .params
            .add_param(&format!("{name}.weight"), Tensor::from_vec(&[c_out, c_in, k, k], data)?, true)?;
        let b = if bias {
            Some(
                self.params
                    .add_param(&format!("{name}.bias"), Tensor::zeros(&[c_out]), false)?,
            )
        } else {
            None
        };
        Ok(ConvLayer { w, b, stride, pad })
    }

    fn bn(&mut self, name: &str, c: usize) -> Result<BnLayer> {
        let scale = self
            .params
            .add_param(&format!("{name}.scale"), Tensor::filled(&[c], T::one()), false)?;
        let shift = self
            .params
            .add_param(&format!("{name}.shift"), Tensor::zeros(&[c]), false)?;
        let mean = self
            .params
            .add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[c]))?;
        let var = self
            .params
            .add_buffer(&format!("{name}.running_var"), Tensor::filled(&[c], T::one()))?;
        Ok(BnLayer {
            scale,
            shift,
            mean,
            var,
        })
    }

    /// Linear layer: uniform +-1/sqrt(D) weights, zero bias.
    fn linear(&mut self, name: &str, d: usize, k: usize) -> Result<(ParamId, ParamId)> {
        let bound = 1.0 / (d as f64).sqrt();
        let data: Vec<T> = (0..k * d)
            .map(|_| T::from_f64(self.rng.uniform_in(-bound, bound)))
            .collect();
        let w = self
            .params
            .add_param(&format!("{name}.weight"), Tensor::from_vec(&[k, d], data)?, true)?;
        let b = self
            .params
            .add_param(&format!("{name}.bias"), Tensor::zeros(&[k]), false)?;
        Ok((w, b))
    }

    fn branch(
        &mut self,
        name: &str,
        family: Family,
        c_in: usize,
        c_out: usize,
        stride: usize,
    ) -> Result<Branch> {
        let mut layers = Vec::new();
        match family {
            Family::ShakeResnet | Family::ArchA => {
                layers.push(BranchLayer::Relu);
                layers.push(BranchLayer::Conv(self.conv(
                    &format!("{name}.conv1"),
                    c_in,
                    c_out,
                    3,
                    stride,
                    1,
                    false,
                )?));
                layers.push(BranchLayer::Bn(self.bn(&format!("{name}.bn1"), c_out)?));
                layers.push(BranchLayer::Relu);
                layers.push(BranchLayer::Conv(self.conv(
                    &format!("{name}.conv2"),
                    c_out,
                    c_out,
                    3,
                    1,
                    1,
                    false,
                )?));
                layers.push(BranchLayer::Bn(self.bn(&format!("{name}.bn2"), c_out)?));
            }
            Family::ArchB => {
                layers.push(BranchLayer::Relu);
                layers.push(BranchLayer::Conv(self.conv(
                    &format!("{name}.conv1"),
                    c_in,
                    c_out,
                    3,
                    stride,
                    1,
                    false,
                )?));
                layers.push(BranchLayer::Bn(self.bn(&format!("{name}.bn1"), c_out)?));
            }
            Family::ArchC => {
                layers.push(BranchLayer::Relu);
                layers.push(BranchLayer::Conv(self.conv(
                    &format!("{name}.conv1"),
                    c_in,
                    c_out,
                    3,
                    stride,
                    1,
                    true,
                )?));
                layers.push(BranchLayer::Relu);
                layers.push(BranchLayer::Conv(self.conv(
                    &format!("{name}.conv2"),
                    c_out,
                    c_out,
                    3,
                    1,
                    1,
                    true,
                )?));
            }
        }
        Ok(Branch { layers })
    }
}

/// Two-flow projection skip: each flow is avgpool1x1(stride) followed by a
/// bias-free conv1x1 producing half the output width; the second flow's
/// input is shifted one pixel down and right first. At stage transitions
/// (stride 2) the output width must be exactly twice the input width.
fn build_projection_skip<T: Element>(
    b: &mut Builder<T>,
    name: &str,
    c_in: usize,
    c_out: usize,
    stride: usize,
) -> Result<Skip> {
    if c_out % 2 != 0 {
        return Err(Error::Config(format!(
            "projection skip requires an even output width, got {c_out}"
        )));
    }
    if stride == 2 && c_out != 2 * c_in {
        return Err(Error::Config(format!(
            "downsampling skip must double the width: {c_in} -> {c_out}"
        )));
    }
    let flow1 = b.conv(&format!("{name}.flow1"), c_in, c_out / 2, 1, 1, 0, false)?;
    let flow2 = b.conv(&format!("{name}.flow2"), c_in, c_out / 2, 1, 1, 0, false)?;
    Ok(Skip::Projection {
        flow1,
        flow2,
        stride,
    })
}

impl<T: Element> Network<T> {
    /// Build a model with parameters initialized from `seed`.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let bps = spec.blocks_per_stage()?;
        let widths = spec.stage_widths();
        let mut params = ParamSet::new();
        let init_seed = {
            use rand::RngCore;
            substream(seed, &[purpose::INIT]).next_u64()
        };
        let mut b = Builder {
            params: &mut params,
            rng: RngStream::new(init_seed),
        };

        let stem_bias = spec.family == Family::ArchC;
        let stem = b.conv("stem.conv", 3, STEM_CHANNELS, 3, 1, 1, stem_bias)?;

        let mut blocks = Vec::new();
        let mut c_in = STEM_CHANNELS;
        for (stage, &c_out) in widths.iter().enumerate() {
            for blk in 0..bps {
                let stride = if stage > 0 && blk == 0 { 2 } else { 1 };
                let name = format!("stage{}.block{}", stage + 1, blk + 1);
                let branch1 = b.branch(&format!("{name}.branch1"), spec.family, c_in, c_out, stride)?;
                let branch2 = b.branch(&format!("{name}.branch2"), spec.family, c_in, c_out, stride)?;
                let skip = match spec.family {
                    Family::ShakeResnet => {
                        if stride == 1 && c_in == c_out {
                            Skip::Identity
                        } else {
                            build_projection_skip(
                                &mut b,
                                &format!("{name}.skip"),
                                c_in,
                                c_out,
                                stride,
                            )?
                        }
                    }
                    _ => Skip::None,
                };
                blocks.push(Block {
                    branch1,
                    branch2,
                    skip,
                });
                c_in = c_out;
            }
        }

        let (fc_w, fc_b) = b.linear("fc", widths[2], spec.num_classes)?;

        Ok(Network {
            spec,
            params,
            stem,
            blocks,
            fc_w,
            fc_b,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Total trainable scalar count.
    pub fn count_params(&self) -> usize {
        self.params.num_trainable()
    }

    /// Weighted layers on a single input-to-logits path
    /// (stem + convs of one branch per block + classifier).
    pub fn path_depth(&self) -> usize {
        let convs_per_branch = self
            .blocks
            .first()
            .map(|b| {
                b.branch1
                    .layers
                    .iter()
                    .filter(|l| matches!(l, BranchLayer::Conv(_)))
                    .count()
            })
            .unwrap_or(0);
        1 + self.blocks.len() * convs_per_branch + 1
    }

    fn param_node(
        &self,
        g: &mut Graph<T>,
        cache: &mut Vec<Option<NodeId>>,
        nodes: &mut Vec<(ParamId, NodeId)>,
        pid: ParamId,
    ) -> NodeId {
        if let Some(id) = cache[pid.0] {
            return id;
        }
        let id = g.var(self.params.value(pid).clone());
        cache[pid.0] = Some(id);
        nodes.push((pid, id));
        id
    }

    #[allow(clippy::too_many_arguments)]
    fn run_conv(
        &mut self,
        g: &mut Graph<T>,
        cache: &mut Vec<Option<NodeId>>,
        nodes: &mut Vec<(ParamId, NodeId)>,
        layer_w: ParamId,
        layer_b: Option<ParamId>,
        stride: usize,
        pad: usize,
        x: NodeId,
    ) -> Result<NodeId> {
        let w = self.param_node(g, cache, nodes, layer_w);
        let mut y = g.conv2d(x, w, stride, pad)?;
        if let Some(bid) = layer_b {
            // Broadcast-add the per-channel bias via a reshaped linear
            // trick is overkill; do it as a dedicated tensor op.
            let bias = self.param_node(g, cache, nodes, bid);
            y = g.bias_add_channel(y, bias)?;
        }
        Ok(y)
    }

    /// Run one forward pass, building nodes on `g`.
    ///
    /// Train phase requires a [`CoefficientSet`] with alphas for every
    /// block; test phase ignores coefficients and blends both branches at
    /// 0.5. Batchnorm runs in batch-statistics mode during training and
    /// running-statistics mode at test time.
    pub fn forward(
        &mut self,
        g: &mut Graph<T>,
        images: Tensor<T>,
        phase: Phase,
        coeffs: Option<&CoefficientSet>,
    ) -> Result<ForwardTrace> {
        let (n, c, _, _) = images.dims4()?;
        if c != 3 {
            return Err(Error::Config(format!("expected 3 input channels, got {c}")));
        }
        if phase == Phase::Train {
            match coeffs {
                None => {
                    return Err(Error::Usage(
                        "train-phase forward requires sampled coefficients".into(),
                    ))
                }
                Some(cs) => {
                    if cs.num_blocks() != self.blocks.len() || cs.blocks().len() != self.blocks.len()
                    {
                        return Err(Error::Usage(format!(
                            "coefficient set covers {} blocks, model has {}",
                            cs.blocks().len(),
                            self.blocks.len()
                        )));
                    }
                    for sc in cs.blocks() {
                        if sc.alpha.len() != n {
                            return Err(Error::Usage(format!(
                                "coefficients sampled for batch {}, forward batch is {n}",
                                sc.alpha.len()
                            )));
                        }
                    }
                }
            }
        }

        let mut cache = vec![None; self.params.len()];
        let mut param_nodes = Vec::new();
        let train = phase == Phase::Train;

        let input = g.input(images);
        let mut x = {
            let (w, bopt, stride, pad) =
                (self.stem.w, self.stem.b, self.stem.stride, self.stem.pad);
            self.run_conv(g, &mut cache, &mut param_nodes, w, bopt, stride, pad, input)?
        };

        let mut traces = Vec::new();
        let even = vec![0.5; n];
        for bi in 0..self.blocks.len() {
            let block_in = x;
            let mut layer_outs: [Vec<NodeId>; 2] = [Vec::new(), Vec::new()];
            for (branch_idx, outs) in layer_outs.iter_mut().enumerate() {
                let mut h = block_in;
                let n_layers = if branch_idx == 0 {
                    self.blocks[bi].branch1.layers.len()
                } else {
                    self.blocks[bi].branch2.layers.len()
                };
                for li in 0..n_layers {
                    // Copy the small layer descriptor to end the immutable borrow.
                    enum L {
                        Relu,
                        Conv(ParamId, Option<ParamId>, usize, usize),
                        Bn(ParamId, ParamId, BufId, BufId),
                    }
                    let branch = if branch_idx == 0 {
                        &self.blocks[bi].branch1
                    } else {
                        &self.blocks[bi].branch2
                    };
                    let l = match &branch.layers[li] {
                        BranchLayer::Relu => L::Relu,
                        BranchLayer::Conv(cl) => L::Conv(cl.w, cl.b, cl.stride, cl.pad),
                        BranchLayer::Bn(bn) => L::Bn(bn.scale, bn.shift, bn.mean, bn.var),
                    };
                    h = match l {
                        L::Relu => g.relu(h)?,
                        L::Conv(w, bo, stride, pad) => {
                            self.run_conv(g, &mut cache, &mut param_nodes, w, bo, stride, pad, h)?
                        }
                        L::Bn(scale, shift, mean, var) => {
                            let s = self.param_node(g, &mut cache, &mut param_nodes, scale);
                            let sh = self.param_node(g, &mut cache, &mut param_nodes, shift);
                            let mut rm = self.params.buffer(mean).clone();
                            let mut rv = self.params.buffer(var).clone();
                            let y = g.batchnorm2d(
                                h, s, sh, &mut rm, &mut rv, train, BN_EPS, BN_MOMENTUM,
                            )?;
                            *self.params.buffer_mut(mean) = rm;
                            *self.params.buffer_mut(var) = rv;
                            y
                        }
                    };
                    outs.push(h);
                }
            }
            let [b1_layers, b2_layers] = layer_outs;
            let b1_out = *b1_layers.last().expect("branch has layers");
            let b2_out = *b2_layers.last().expect("branch has layers");

            let skip_node = match &self.blocks[bi].skip {
                Skip::Identity => Some(block_in),
                Skip::None => None,
                Skip::Projection {
                    flow1,
                    flow2,
                    stride,
                } => {
                    let (f1w, f1s) = (flow1.w, *stride);
                    let (f2w, f2s) = (flow2.w, *stride);
                    let p1 = g.avgpool2d(block_in, 1, f1s)?;
                    let w1 = self.param_node(g, &mut cache, &mut param_nodes, f1w);
                    let y1 = g.conv2d(p1, w1, 1, 0)?;
                    let sh = g.pixel_shift(block_in, 1, 1)?;
                    let p2 = g.avgpool2d(sh, 1, f2s)?;
                    let w2 = self.param_node(g, &mut cache, &mut param_nodes, f2w);
                    let y2 = g.conv2d(p2, w2, 1, 0)?;
                    Some(g.concat_channels(y1, y2)?)
                }
            };

            let alpha: &[f64] = match phase {
                Phase::Test => &even,
                Phase::Train => &coeffs.expect("validated above").blocks()[bi].alpha,
            };
            let combine = g.shake_combine(skip_node, b1_out, b2_out, alpha, phase)?;
            traces.push(BlockTrace {
                block_id: bi,
                input: block_in,
                branch1_layers: b1_layers,
                branch2_layers: b2_layers,
                b1_out,
                b2_out,
                combine,
            });
            x = combine;
        }

        // Head: pool the full feature map, flatten, classify.
        let (_, c_out, h, w) = g.value(x).dims4()?;
        if h != w {
            return Err(Error::Config(format!(
                "head expects square feature maps, got {h}x{w}"
            )));
        }
        let pooled = g.avgpool2d(x, h, h)?;
        let flat = g.reshape(pooled, &[n, c_out])?;
        let wfc = self.param_node(g, &mut cache, &mut param_nodes, self.fc_w);
        let bfc = self.param_node(g, &mut cache, &mut param_nodes, self.fc_b);
        let logits = g.linear(flat, wfc, bfc)?;

        Ok(ForwardTrace {
            logits,
            blocks: traces,
            param_nodes,
        })
    }

    /// Move gradients accumulated on the graph's parameter leaves into the
    /// [`ParamSet`] accumulators.
    pub fn harvest_grads(&mut self, g: &mut Graph<T>, trace: &ForwardTrace) -> Result<()> {
        for &(pid, nid) in &trace.param_nodes {
            if let Some(grad) = g.take_grad(nid) {
                self.params.accumulate_grad(pid, &grad)?;
            }
        }
        Ok(())
    }
}

/// Install per-block backward coefficients on the combine nodes of a
/// forward trace, in block order.
pub fn attach_betas<T: Element>(
    g: &mut Graph<T>,
    trace: &ForwardTrace,
    coeffs: &CoefficientSet,
) -> Result<()> {
    if coeffs.blocks().len() != trace.blocks.len() {
        return Err(Error::Usage(format!(
            "coefficient set covers {} blocks, trace has {}",
            coeffs.blocks().len(),
            trace.blocks.len()
        )));
    }
    for bt in &trace.blocks {
        let beta = coeffs.blocks()[bt.block_id]
            .beta
            .as_ref()
            .ok_or_else(|| Error::Usage("beta not sampled for this step".into()))?;
        g.set_shake_beta(bt.combine, beta)?;
    }
    Ok(())
}
