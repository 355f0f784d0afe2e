use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ConvLayer, NetworkConfig};
use crate::anchors::CORR_DIM;
use crate::scalar::Scalar;
use crate::tensor::{Init, ParamStore, Result, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    /// Hidden 3x3 convolutions before each head's output layer.
    pub depth: usize,
    pub location_width: usize,
    pub mask_width: usize,
    pub correspondence_width: usize,
    /// Weight of the l2 penalty on the hidden correspondence convolutions.
    pub l2_lambda: f64,
    /// Initial foreground probability of the sigmoid outputs.
    pub prior: f64,
    /// Standard deviation of the output layer weights.
    pub output_std: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            location_width: 256,
            mask_width: 256,
            correspondence_width: 512,
            l2_lambda: 0.001,
            prior: 0.01,
            output_std: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
struct Head {
    name: &'static str,
    hidden: Vec<ConvLayer>,
    output: ConvLayer,
    sigmoid: bool,
}

impl Head {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Scalar>(
        name: &'static str,
        cin: usize,
        width: usize,
        depth: usize,
        cout: usize,
        config: &HeadConfig,
        sigmoid: bool,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Self {
        let mut c = cin;
        let hidden = (0..depth)
            .map(|i| {
                let l = ConvLayer::new(
                    store,
                    &format!("heads.{name}.conv{i}"),
                    c,
                    width,
                    3,
                    Init::HeNormal,
                    Init::Zeros,
                    rng,
                );
                c = width;
                l
            })
            .collect();
        let bias = if sigmoid {
            let p = config.prior.clamp(1e-6, 1.0 - 1e-6);
            Init::Constant(-((1.0 - p) / p).ln())
        } else {
            Init::Zeros
        };
        let output = ConvLayer::new(
            store,
            &format!("heads.{name}.output"),
            c,
            cout,
            3,
            Init::Normal {
                std: config.output_std,
            },
            bias,
            rng,
        );
        Self {
            name,
            hidden,
            output,
            sigmoid,
        }
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for conv in &self.hidden {
            let y = conv.apply(tape, bound, h)?;
            h = tape.relu(y);
        }
        let y = self.output.apply(tape, bound, h)?;
        Ok(if self.sigmoid { tape.sigmoid(y) } else { y })
    }

    fn write_summary<T: Scalar>(&self, out: &mut String, store: &ParamStore<T>) {
        let params: usize = self
            .hidden
            .iter()
            .chain(std::iter::once(&self.output))
            .map(|l| l.num_params(store))
            .sum();
        let width = self
            .hidden
            .first()
            .map_or(0, |l| store.by_index(l.weight).shape().n);
        let cout = store.by_index(self.output.weight).shape().n;
        let _ = writeln!(
            out,
            "  head {:<14} {} x 3x3 conv width {} -> {} channels{} params {}",
            self.name,
            self.hidden.len(),
            width,
            cout,
            if self.sigmoid { " sigmoid" } else { "" },
            params
        );
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Heads {
    location: Head,
    correspondence: Head,
    mask: Head,
}

impl Heads {
    pub(crate) fn new<T: Scalar>(config: &NetworkConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Self {
        let h = &config.heads;
        let a = config.anchors_per_location();
        let k = config.num_classes;
        let cin = config.pyramid.width;
        let location = Head::new("location", cin, h.location_width, h.depth, a * k, h, true, store, rng);
        let correspondence = Head::new(
            "correspondence",
            cin,
            h.correspondence_width,
            h.depth,
            a * CORR_DIM,
            h,
            false,
            store,
            rng,
        );
        let mask = Head::new("mask", cin, h.mask_width, h.depth, k, h, true, store, rng);
        Self {
            location,
            correspondence,
            mask,
        }
    }

    pub(crate) fn location<T: Scalar>(&self, tape: &mut Tape<T>, bound: &[Var], p: [Var; 3]) -> Result<[Var; 3]> {
        Ok([
            self.location.forward(tape, bound, p[0])?,
            self.location.forward(tape, bound, p[1])?,
            self.location.forward(tape, bound, p[2])?,
        ])
    }

    pub(crate) fn correspondence<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &[Var],
        p: [Var; 3],
    ) -> Result<[Var; 3]> {
        Ok([
            self.correspondence.forward(tape, bound, p[0])?,
            self.correspondence.forward(tape, bound, p[1])?,
            self.correspondence.forward(tape, bound, p[2])?,
        ])
    }

    pub(crate) fn mask<T: Scalar>(&self, tape: &mut Tape<T>, bound: &[Var], p3: Var) -> Result<Var> {
        self.mask.forward(tape, bound, p3)
    }

    pub(crate) fn l2_param_indices(&self) -> Vec<usize> {
        self.correspondence.hidden.iter().map(|l| l.weight).collect()
    }

    pub(crate) fn write_summary<T: Scalar>(&self, out: &mut String, store: &ParamStore<T>) {
        let _ = writeln!(out, "heads (shared across P3, P4, P5; mask on P3 only)");
        self.location.write_summary(out, store);
        self.correspondence.write_summary(out, store);
        self.mask.write_summary(out, store);
    }
}
