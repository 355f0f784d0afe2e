//! The pose network: toy backbone, feature pyramid and shared task heads.

mod backbone;
mod heads;
pub mod pyramid;

pub use backbone::BackboneConfig;
pub use heads::HeadConfig;
pub use pyramid::{Aggregation, PyramidGraph};

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{AnchorSpec, CORR_DIM};
use crate::scalar::Scalar;
use crate::tensor::{Init, ParamStore, Result, Shape, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PyramidConfig {
    /// Channel count of every pyramid output.
    pub width: usize,
    pub aggregation: Aggregation,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            width: 256,
            aggregation: Aggregation::Pfpn,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub num_classes: usize,
    pub backbone: BackboneConfig,
    pub pyramid: PyramidConfig,
    pub heads: HeadConfig,
    pub anchors: AnchorSpec,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            num_classes: 1,
            backbone: BackboneConfig::default(),
            pyramid: PyramidConfig::default(),
            heads: HeadConfig::default(),
            anchors: AnchorSpec::default(),
        }
    }
}

impl NetworkConfig {
    pub fn anchors_per_location(&self) -> usize {
        self.anchors.per_location()
    }
}

/// A convolution whose weight and bias live in a [`ParamStore`].
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvLayer {
    pub weight: usize,
    pub bias: usize,
    pub pad: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        weight_init: Init,
        bias_init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.init(
            format!("{name}.weight"),
            Shape::new(cout, cin, kernel, kernel),
            weight_init,
            rng,
        );
        let bias = store.init(format!("{name}.bias"), Shape::new(1, cout, 1, 1), bias_init, rng);
        Self {
            weight,
            bias,
            pad: kernel / 2,
        }
    }

    pub(crate) fn apply<T: Scalar>(&self, tape: &mut Tape<T>, bound: &[Var], x: Var) -> Result<Var> {
        tape.conv2d(x, bound[self.weight], bound[self.bias], 1, self.pad)
    }

    pub(crate) fn num_params<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        store.by_index(self.weight).len() + store.by_index(self.bias).len()
    }
}

/// Raw head outputs for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct NetOutputs {
    pub backbone: [Var; 3],
    pub pyramid: [Var; 3],
    /// Sigmoid scores, `N x (A*K) x H x W` per level; channel `a*K + k`.
    pub location: [Var; 3],
    /// Linear outputs, `N x (A*16) x H x W` per level; channel `a*16 + j`.
    pub correspondence: [Var; 3],
    /// Sigmoid scores, `N x K x H/8 x W/8`, computed from P3 only.
    pub mask: Var,
}

/// The full network with its parameters.
#[derive(Debug, Clone)]
pub struct PoseNet<T> {
    pub config: NetworkConfig,
    pub params: ParamStore<T>,
    graph: PyramidGraph,
    backbone: backbone::Backbone,
    pyramid_layers: Vec<Option<ConvLayer>>,
    heads: heads::Heads,
}

impl<T: Scalar> PoseNet<T> {
    pub fn new(config: NetworkConfig, rng: &mut impl Rng) -> Self {
        let mut params = ParamStore::new();
        let backbone = backbone::Backbone::new(&config.backbone, &mut params, rng);
        let graph = PyramidGraph::new(config.pyramid.aggregation);
        let w = config.pyramid.width;
        let in_width = |level: pyramid::BackboneLevel| config.backbone.stage_widths[level.index()];
        let pyramid_layers = graph
            .nodes
            .iter()
            .map(|node| {
                let name = format!("pyramid.{}", node.name);
                let he = Init::HeNormal;
                match node.kind {
                    pyramid::NodeKind::Lateral(input) => {
                        let cin = match input.source {
                            pyramid::Source::Backbone(level) => in_width(level),
                            pyramid::Source::Node(_) => w,
                        };
                        Some(ConvLayer::new(&mut params, &name, cin, w, 1, he, Init::Zeros, rng))
                    }
                    pyramid::NodeKind::Fuse(..) | pyramid::NodeKind::Smooth(_) => Some(
                        ConvLayer::new(&mut params, &name, w, w, 3, he, Init::Zeros, rng),
                    ),
                    pyramid::NodeKind::Add(..) => None,
                }
            })
            .collect();
        let heads = heads::Heads::new(&config, &mut params, rng);
        Self {
            config,
            params,
            graph,
            backbone,
            pyramid_layers,
            heads,
        }
    }

    pub fn graph(&self) -> &PyramidGraph {
        &self.graph
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn anchors_per_location(&self) -> usize {
        self.config.anchors_per_location()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.num_scalars()
    }

    /// Records every parameter on the tape, indexed like the store.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        (0..self.params.len())
            .map(|i| tape.param(&self.params, i))
            .collect()
    }

    pub fn check_input(&self, shape: Shape) -> Result<()> {
        if shape.c != 3 {
            return Err(TensorError::ShapeMismatch {
                axis: "channel",
                left: shape.c,
                right: 3,
                context: "network input must be RGB",
            });
        }
        for (axis, extent) in [("height", shape.h), ("width", shape.w)] {
            if extent == 0 || extent % 32 != 0 {
                return Err(TensorError::Indivisible {
                    axis,
                    extent,
                    context: "network input must be divisible by 32",
                });
            }
        }
        Ok(())
    }

    /// C3, C4, C5 at strides 8, 16, 32.
    pub fn backbone_forward(&self, tape: &mut Tape<T>, bound: &[Var], image: Var) -> Result<[Var; 3]> {
        self.check_input(tape.value(image).shape())?;
        self.backbone.forward(tape, bound, image)
    }

    /// P3, P4, P5 from the three backbone maps.
    pub fn pyramid_forward(&self, tape: &mut Tape<T>, bound: &[Var], levels: [Var; 3]) -> Result<[Var; 3]> {
        for (i, &v) in levels.iter().enumerate().skip(1) {
            let (prev, cur) = (tape.value(levels[i - 1]).shape(), tape.value(v).shape());
            if prev.h != 2 * cur.h {
                return Err(TensorError::ShapeMismatch {
                    axis: "height",
                    left: prev.h,
                    right: 2 * cur.h,
                    context: "backbone levels must halve in resolution",
                });
            }
            if prev.w != 2 * cur.w {
                return Err(TensorError::ShapeMismatch {
                    axis: "width",
                    left: prev.w,
                    right: 2 * cur.w,
                    context: "backbone levels must halve in resolution",
                });
            }
        }
        let mut values: Vec<Var> = Vec::with_capacity(self.graph.nodes.len());
        for (i, node) in self.graph.nodes.iter().enumerate() {
            let fetch = |tape: &mut Tape<T>, input: &pyramid::Input| -> Result<Var> {
                let v = match input.source {
                    pyramid::Source::Backbone(level) => levels[level.index()],
                    pyramid::Source::Node(j) => values[j],
                };
                match input.resample {
                    pyramid::Resample::Same => Ok(v),
                    pyramid::Resample::Up2 => Ok(tape.up2(v)),
                    pyramid::Resample::Down2 => tape.down2(v),
                }
            };
            let out = match node.kind {
                pyramid::NodeKind::Lateral(a) => {
                    let x = fetch(tape, &a)?;
                    self.pyramid_layers[i].expect("lateral conv").apply(tape, bound, x)?
                }
                pyramid::NodeKind::Smooth(a) => {
                    let x = fetch(tape, &a)?;
                    self.pyramid_layers[i].expect("smooth conv").apply(tape, bound, x)?
                }
                pyramid::NodeKind::Add(a, b) => {
                    let (x, y) = (fetch(tape, &a)?, fetch(tape, &b)?);
                    tape.add(x, y)?
                }
                pyramid::NodeKind::Fuse(a, b) => {
                    let (x, y) = (fetch(tape, &a)?, fetch(tape, &b)?);
                    let s = tape.add(x, y)?;
                    let c = self.pyramid_layers[i].expect("fuse conv").apply(tape, bound, s)?;
                    tape.relu(c)
                }
            };
            values.push(out);
        }
        Ok(self.graph.outputs.map(|o| values[o]))
    }

    /// Location and correspondence maps for every pyramid level.
    pub fn heads_forward(&self, tape: &mut Tape<T>, bound: &[Var], pyramid: [Var; 3]) -> Result<([Var; 3], [Var; 3])> {
        Ok((
            self.heads.location(tape, bound, pyramid)?,
            self.heads.correspondence(tape, bound, pyramid)?,
        ))
    }

    /// Per-class mask probabilities; reads P3 alone.
    pub fn mask_forward(&self, tape: &mut Tape<T>, bound: &[Var], p3: Var) -> Result<Var> {
        self.heads.mask(tape, bound, p3)
    }

    pub fn forward(&self, tape: &mut Tape<T>, image: Tensor<T>) -> Result<NetOutputs> {
        let bound = self.bind(tape);
        let x = tape.input(image);
        let backbone = self.backbone_forward(tape, &bound, x)?;
        let pyramid = self.pyramid_forward(tape, &bound, backbone)?;
        let (location, correspondence) = self.heads_forward(tape, &bound, pyramid)?;
        let mask = self.mask_forward(tape, &bound, pyramid[0])?;
        Ok(NetOutputs {
            backbone,
            pyramid,
            location,
            correspondence,
            mask,
        })
    }

    /// Parameters penalised by the l2 term: weights of the first convolutions
    /// of the correspondence head.
    pub fn l2_param_indices(&self) -> Vec<usize> {
        self.heads.l2_param_indices()
    }

    /// `lambda * sum(w^2)` over [`Self::l2_param_indices`].
    pub fn l2_penalty(&self) -> f64 {
        let lambda = self.config.heads.l2_lambda;
        self.l2_param_indices()
            .iter()
            .map(|&i| {
                self.params
                    .by_index(i)
                    .values()
                    .iter()
                    .map(|v| v.to_f64().unwrap_or(0.0).powi(2))
                    .sum::<f64>()
            })
            .sum::<f64>()
            * lambda
    }

    /// Adds `2 * lambda * w` into the penalised parameters' gradients.
    pub fn accumulate_l2_grad(&mut self) -> Result<()> {
        let two_lambda = T::lit(2.0 * self.config.heads.l2_lambda);
        for i in self.l2_param_indices() {
            let delta: Vec<T> = self.params.by_index(i).values().iter().map(|&w| two_lambda * w).collect();
            self.params.accumulate(i, &delta)?;
        }
        Ok(())
    }

    /// Text listing of every layer and pyramid node with parameter counts.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "model: classes {} anchors/location {} pyramid width {} aggregation {}",
            self.config.num_classes,
            self.anchors_per_location(),
            self.config.pyramid.width,
            self.config.pyramid.aggregation
        );
        self.backbone.write_summary(&mut out, &self.params);
        self.graph.write_summary(&mut out, |i| {
            self.pyramid_layers[i].map_or(0, |l| l.num_params(&self.params))
        });
        self.heads.write_summary(&mut out, &self.params);
        let _ = writeln!(out, "total parameters {}", self.parameter_count());
        out
    }

    /// Shape of the per-level head outputs for an image of the given size.
    pub fn output_channels(&self) -> (usize, usize) {
        let a = self.anchors_per_location();
        (a * self.config.num_classes, a * CORR_DIM)
    }
}

#[cfg(test)]
mod tests;
