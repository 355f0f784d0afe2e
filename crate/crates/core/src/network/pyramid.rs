//! Feature aggregation graphs over the backbone levels C3, C4 and C5.
//!
//! A graph is a topologically ordered node list. Every node is one of
//!
//! * `Lateral`: 1x1 convolution of a single input to the pyramid width,
//! * `Fuse`: element-wise add of exactly two stride-aligned inputs, then a
//!   3x3 convolution and ReLU,
//! * `Add`: element-wise add of two inputs with no convolution (FPN merge),
//! * `Smooth`: 3x3 convolution without activation (FPN output smoothing).
//!
//! The same description drives the forward pass, the topology audit and the
//! text summary.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

/// Which aggregation graph to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Pfpn,
    Fpn,
    None,
}

impl std::str::FromStr for Aggregation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "pfpn" => Ok(Aggregation::Pfpn),
            "fpn" => Ok(Aggregation::Fpn),
            "none" => Ok(Aggregation::None),
            other => Err(format!("unknown aggregation `{other}` (pfpn, fpn, none)")),
        }
    }
}

impl std::fmt::Display for Aggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Aggregation::Pfpn => "pfpn",
            Aggregation::Fpn => "fpn",
            Aggregation::None => "none",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BackboneLevel {
    C3,
    C4,
    C5,
}

impl BackboneLevel {
    pub const fn stride(self) -> usize {
        match self {
            BackboneLevel::C3 => 8,
            BackboneLevel::C4 => 16,
            BackboneLevel::C5 => 32,
        }
    }

    pub const fn index(self) -> usize {
        match self {
            BackboneLevel::C3 => 0,
            BackboneLevel::C4 => 1,
            BackboneLevel::C5 => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Backbone(BackboneLevel),
    Node(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resample {
    Same,
    Up2,
    Down2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Input {
    pub source: Source,
    pub resample: Resample,
}

const fn same(source: Source) -> Input {
    Input {
        source,
        resample: Resample::Same,
    }
}

const fn up(source: Source) -> Input {
    Input {
        source,
        resample: Resample::Up2,
    }
}

const fn down(source: Source) -> Input {
    Input {
        source,
        resample: Resample::Down2,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Lateral(Input),
    Fuse(Input, Input),
    Add(Input, Input),
    Smooth(Input),
}

impl NodeKind {
    pub fn inputs(&self) -> Vec<Input> {
        match *self {
            NodeKind::Lateral(a) | NodeKind::Smooth(a) => vec![a],
            NodeKind::Fuse(a, b) | NodeKind::Add(a, b) => vec![a, b],
        }
    }

    pub fn is_add(&self) -> bool {
        matches!(self, NodeKind::Fuse(..) | NodeKind::Add(..))
    }

    fn label(&self) -> &'static str {
        match self {
            NodeKind::Lateral(_) => "lateral 1x1",
            NodeKind::Fuse(..) => "add + 3x3 conv + relu",
            NodeKind::Add(..) => "add",
            NodeKind::Smooth(_) => "3x3 conv",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphNode {
    pub name: &'static str,
    pub kind: NodeKind,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidGraph {
    pub aggregation: Aggregation,
    pub nodes: Vec<GraphNode>,
    /// Node indices producing P3, P4, P5.
    pub outputs: [usize; 3],
}

use BackboneLevel::{C3, C4, C5};
use Source::{Backbone as B, Node as N};

impl PyramidGraph {
    pub fn new(aggregation: Aggregation) -> Self {
        match aggregation {
            Aggregation::Pfpn => Self::pfpn(),
            Aggregation::Fpn => Self::fpn(),
            Aggregation::None => Self::none(),
        }
    }

    fn node(name: &'static str, kind: NodeKind, stride: usize) -> GraphNode {
        GraphNode { name, kind, stride }
    }

    fn laterals() -> Vec<GraphNode> {
        vec![
            Self::node("l3", NodeKind::Lateral(same(B(C3))), 8),
            Self::node("l4", NodeKind::Lateral(same(B(C4))), 16),
            Self::node("l5", NodeKind::Lateral(same(B(C5))), 32),
        ]
    }

    /// Two-input fuse nodes only. P4 sees all three levels through the
    /// top-down node t4 and the bottom-up node b4; C5 only passes its lateral;
    /// P3 and P4 carry skip connections from their laterals.
    fn pfpn() -> Self {
        let mut nodes = Self::laterals();
        let (l3, l4, l5) = (0, 1, 2);
        nodes.extend([
            Self::node("t4", NodeKind::Fuse(same(N(l4)), up(N(l5))), 16), // 3
            Self::node("t3", NodeKind::Fuse(same(N(l3)), up(N(3))), 8),   // 4
            Self::node("p3", NodeKind::Fuse(same(N(4)), same(N(l3))), 8), // 5
            Self::node("b4", NodeKind::Fuse(same(N(3)), down(N(5))), 16), // 6
            Self::node("p4", NodeKind::Fuse(same(N(6)), same(N(l4))), 16), // 7
            Self::node("p5", NodeKind::Fuse(same(N(l5)), down(N(7))), 32), // 8
        ]);
        Self {
            aggregation: Aggregation::Pfpn,
            nodes,
            outputs: [5, 7, 8],
        }
    }

    /// Classic top-down pathway with 3x3 output smoothing.
    fn fpn() -> Self {
        let mut nodes = Self::laterals();
        nodes.extend([
            Self::node("m4", NodeKind::Add(same(N(1)), up(N(2))), 16), // 3
            Self::node("m3", NodeKind::Add(same(N(0)), up(N(3))), 8),  // 4
            Self::node("p3", NodeKind::Smooth(same(N(4))), 8),         // 5
            Self::node("p4", NodeKind::Smooth(same(N(3))), 16),        // 6
            Self::node("p5", NodeKind::Smooth(same(N(2))), 32),        // 7
        ]);
        Self {
            aggregation: Aggregation::Fpn,
            nodes,
            outputs: [5, 6, 7],
        }
    }

    /// Independent 1x1 projections, no cross-scale flow.
    fn none() -> Self {
        Self {
            aggregation: Aggregation::None,
            nodes: Self::laterals(),
            outputs: [0, 1, 2],
        }
    }

    /// Backbone levels reachable upstream of `node`.
    pub fn ancestors(&self, node: usize) -> BTreeSet<BackboneLevel> {
        let mut out = BTreeSet::new();
        let mut stack = vec![node];
        let mut seen = vec![false; self.nodes.len()];
        while let Some(i) = stack.pop() {
            if std::mem::replace(&mut seen[i], true) {
                continue;
            }
            for input in self.nodes[i].kind.inputs() {
                match input.source {
                    Source::Backbone(level) => {
                        out.insert(level);
                    }
                    Source::Node(j) => stack.push(j),
                }
            }
        }
        out
    }

    /// Checks stride consistency and topological order of the description.
    pub fn validate(&self) -> Result<(), String> {
        for (i, node) in self.nodes.iter().enumerate() {
            for input in node.kind.inputs() {
                let src_stride = match input.source {
                    Source::Backbone(level) => level.stride(),
                    Source::Node(j) if j < i => self.nodes[j].stride,
                    Source::Node(j) => {
                        return Err(format!("{} reads later node {j}", node.name));
                    }
                };
                let stride = match input.resample {
                    Resample::Same => src_stride,
                    Resample::Up2 => src_stride / 2,
                    Resample::Down2 => src_stride * 2,
                };
                if stride != node.stride {
                    return Err(format!(
                        "{} expects stride {} but input arrives at {stride}",
                        node.name, node.stride
                    ));
                }
            }
        }
        Ok(())
    }

    pub(crate) fn describe_input(&self, input: &Input) -> String {
        let name = match input.source {
            Source::Backbone(l) => format!("{l:?}"),
            Source::Node(j) => self.nodes[j].name.to_string(),
        };
        match input.resample {
            Resample::Same => name,
            Resample::Up2 => format!("up2({name})"),
            Resample::Down2 => format!("down2({name})"),
        }
    }

    pub(crate) fn write_summary(&self, out: &mut String, params_of: impl Fn(usize) -> usize) {
        let _ = writeln!(out, "pyramid ({})", self.aggregation);
        for (i, node) in self.nodes.iter().enumerate() {
            let inputs: Vec<String> = node
                .kind
                .inputs()
                .iter()
                .map(|inp| self.describe_input(inp))
                .collect();
            let role = self
                .outputs
                .iter()
                .position(|&o| o == i)
                .map(|l| format!(" -> P{}", l + 3))
                .unwrap_or_default();
            let _ = writeln!(
                out,
                "  node {:<3} {:<22} stride {:<2} inputs [{}] params {}{}",
                node.name,
                node.kind.label(),
                node.stride,
                inputs.join(", "),
                params_of(i),
                role
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_graph_is_stride_consistent() {
        for agg in [Aggregation::Pfpn, Aggregation::Fpn, Aggregation::None] {
            PyramidGraph::new(agg).validate().unwrap();
        }
    }

    #[test]
    fn pfpn_add_nodes_have_two_inputs() {
        let g = PyramidGraph::new(Aggregation::Pfpn);
        for node in &g.nodes {
            if node.kind.is_add() {
                assert_eq!(node.kind.inputs().len(), 2, "{}", node.name);
            } else {
                assert!(matches!(node.kind, NodeKind::Lateral(_)));
            }
        }
    }

    #[test]
    fn pfpn_p4_sees_every_level() {
        let g = PyramidGraph::new(Aggregation::Pfpn);
        let all: BTreeSet<_> = [C3, C4, C5].into_iter().collect();
        assert_eq!(g.ancestors(g.outputs[1]), all);
        assert_eq!(g.ancestors(g.outputs[2]), all);
    }

    #[test]
    fn pfpn_c5_only_passes_a_lateral() {
        let g = PyramidGraph::new(Aggregation::Pfpn);
        let readers: Vec<_> = g
            .nodes
            .iter()
            .filter(|n| n.kind.inputs().iter().any(|i| i.source == B(C5)))
            .collect();
        assert_eq!(readers.len(), 1);
        assert!(matches!(readers[0].kind, NodeKind::Lateral(_)));
    }

    #[test]
    fn pfpn_skips_feed_p3_and_p4() {
        let g = PyramidGraph::new(Aggregation::Pfpn);
        let lateral_of = |level| {
            g.nodes
                .iter()
                .position(|n| n.kind == NodeKind::Lateral(same(B(level))))
                .unwrap()
        };
        for (out, level) in [(g.outputs[0], C3), (g.outputs[1], C4)] {
            let inputs = g.nodes[out].kind.inputs();
            assert!(inputs.contains(&same(N(lateral_of(level)))));
        }
    }

    #[test]
    fn none_mode_keeps_levels_independent() {
        let g = PyramidGraph::new(Aggregation::None);
        for (l, level) in [C3, C4, C5].into_iter().enumerate() {
            assert_eq!(g.ancestors(g.outputs[l]), [level].into_iter().collect());
        }
    }

    #[test]
    fn aggregation_parses() {
        assert_eq!("PFPN".parse::<Aggregation>(), Ok(Aggregation::Pfpn));
        assert!("bifpn".parse::<Aggregation>().is_err());
    }
}
