use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ConvLayer;
use crate::scalar::Scalar;
use crate::tensor::{Init, ParamStore, Result, Tape, TensorError, Var};

/// Small convolutional backbone producing C3, C4 and C5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    /// Output channels of the two stride-2 stem blocks.
    pub stem_widths: [usize; 2],
    /// Channels of C3, C4, C5.
    pub stage_widths: [usize; 3],
    /// 3x3 convolutions per stage, the first of which downsamples.
    pub convs_per_stage: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stem_widths: [8, 16],
            stage_widths: [32, 64, 128],
            convs_per_stage: 2,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Block {
    conv: ConvLayer,
    downsample: bool,
}

#[derive(Debug, Clone)]
pub(crate) struct Backbone {
    stem: Vec<Block>,
    stages: [Vec<Block>; 3],
}

impl Backbone {
    pub(crate) fn new<T: Scalar>(config: &BackboneConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Self {
        let mut cin = 3;
        let mut layer = |store: &mut ParamStore<T>, name: String, cin: usize, cout: usize, downsample: bool| Block {
            conv: ConvLayer::new(store, &name, cin, cout, 3, Init::HeNormal, Init::Zeros, rng),
            downsample,
        };
        let mut stem = Vec::new();
        for (i, &w) in config.stem_widths.iter().enumerate() {
            stem.push(layer(store, format!("backbone.stem{}", i + 1), cin, w, true));
            cin = w;
        }
        let stages = std::array::from_fn(|s| {
            let w = config.stage_widths[s];
            (0..config.convs_per_stage.max(1))
                .map(|i| {
                    let block = layer(store, format!("backbone.c{}.conv{i}", s + 3), cin, w, i == 0);
                    cin = w;
                    block
                })
                .collect()
        });
        Self { stem, stages }
    }

    /// Conv, ReLU and, for downsampling blocks, keeping even rows and
    /// columns. The subsampled conv is evaluated directly at stride 2.
    fn apply<T: Scalar>(block: &Block, tape: &mut Tape<T>, bound: &[Var], x: Var) -> Result<Var> {
        if !block.downsample {
            let y = block.conv.apply(tape, bound, x)?;
            return Ok(tape.relu(y));
        }
        let s = tape.value(x).shape();
        for (axis, extent) in [("height", s.h), ("width", s.w)] {
            if extent % 2 != 0 {
                return Err(TensorError::Indivisible {
                    axis,
                    extent,
                    context: "down2 needs even extents",
                });
            }
        }
        let y = tape.conv2d(x, bound[block.conv.weight], bound[block.conv.bias], 2, block.conv.pad)?;
        Ok(tape.relu(y))
    }

    pub(crate) fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &[Var], image: Var) -> Result<[Var; 3]> {
        let mut x = image;
        for block in &self.stem {
            x = Self::apply(block, tape, bound, x)?;
        }
        let mut outs = [x; 3];
        for (s, stage) in self.stages.iter().enumerate() {
            for block in stage {
                x = Self::apply(block, tape, bound, x)?;
            }
            outs[s] = x;
        }
        Ok(outs)
    }

    pub(crate) fn write_summary<T: Scalar>(&self, out: &mut String, store: &ParamStore<T>) {
        let _ = writeln!(out, "backbone");
        let blocks = self.stem.iter().chain(self.stages.iter().flatten());
        for block in blocks {
            let w = store.by_index(block.conv.weight);
            let name = store.name(block.conv.weight).trim_end_matches(".weight");
            let _ = writeln!(
                out,
                "  {:<22} 3x3 {:>3} -> {:<3} relu{} params {}",
                name,
                w.shape().c,
                w.shape().n,
                if block.downsample { " down2" } else { "" },
                block.conv.num_params(store)
            );
        }
    }
}
