//! Architecture intermediate representation.
//!
//! An [`ArchGraph`] is a DAG of layer nodes. Every node first merges its
//! predecessors with its junction rule (sum or channel concat) and then
//! applies its layer. Graphs are validated on construction, including
//! channel and spatial agreement at a 32x32 reference resolution.

pub mod genome;
mod json;
pub mod nb201;

pub use genome::{BlockKind, GenomeBlock, ResNetGenome};
pub use json::{parse_graph_json, parse_graph_value};
pub use nb201::{parse_nb201, Nb201Config};

use crate::error::{Error, Result};
use crate::tensor::ops::out_size;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};

/// Spatial size used when validating graphs.
pub const REFERENCE_RESOLUTION: usize = 32;

/// Default image channel count at the input node.
pub const DEFAULT_INPUT_CHANNELS: usize = 3;

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        c_in: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default = "one")]
        groups: usize,
    },
    BatchNorm,
    Relu,
    AvgPool {
        k: usize,
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    MaxPool {
        k: usize,
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    GlobalAvgPool,
    Identity,
    Zero,
}

impl LayerSpec {
    /// A `k x k` convolution with "same" padding and no grouping.
    pub fn conv(c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        LayerSpec::Conv {
            c_in,
            c_out,
            kh: k,
            kw: k,
            stride,
            padding: k / 2,
            groups: 1,
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. })
    }

    fn check(&self) -> std::result::Result<(), String> {
        match *self {
            LayerSpec::Conv {
                c_in,
                c_out,
                kh,
                kw,
                stride,
                groups,
                ..
            } => {
                if c_in == 0 || c_out == 0 || kh == 0 || kw == 0 {
                    return Err("conv sizes must be positive".into());
                }
                if stride == 0 {
                    return Err("stride must be positive".into());
                }
                if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
                    return Err(format!("groups={groups} must divide c_in={c_in} and c_out={c_out}"));
                }
                Ok(())
            }
            LayerSpec::AvgPool { k, stride, padding } | LayerSpec::MaxPool { k, stride, padding } => {
                if k == 0 || stride == 0 {
                    return Err("pool window and stride must be positive".into());
                }
                if 2 * padding > k {
                    return Err("pool padding must be at most half the window".into());
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Trainable parameter count given the channel count entering the layer.
    /// Convolutions carry no bias; batch norm has a scale and a shift.
    pub fn params(&self, in_channels: usize) -> u64 {
        match *self {
            LayerSpec::Conv {
                c_in,
                c_out,
                kh,
                kw,
                groups,
                ..
            } => (c_in * c_out * kh * kw / groups) as u64,
            LayerSpec::BatchNorm => 2 * in_channels as u64,
            _ => 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Junction {
    #[default]
    Sum,
    Concat,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Node {
    pub id: String,
    pub layer: LayerSpec,
    pub junction: Junction,
}

/// `(channels, height, width)` of a feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// A validated architecture graph. Immutable once built.
#[derive(Clone, Debug)]
pub struct ArchGraph {
    nodes: Vec<Node>,
    edges: Vec<(usize, usize)>,
    input: usize,
    output: usize,
    input_channels: usize,
    preds: Vec<Vec<usize>>,
    order: Vec<usize>,
    /// Merged shape entering each node and shape leaving it.
    shapes: Vec<(FeatureShape, FeatureShape)>,
}

impl PartialEq for ArchGraph {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes
            && self.edges == other.edges
            && self.input == other.input
            && self.output == other.output
            && self.input_channels == other.input_channels
    }
}

/// Incremental construction of an [`ArchGraph`].
#[derive(Clone, Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    edges: Vec<(usize, usize)>,
    index: HashMap<String, usize>,
    input_channels: Option<usize>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn input_channels(mut self, c: usize) -> Self {
        self.input_channels = Some(c);
        self
    }

    pub fn node(&mut self, id: impl Into<String>, layer: LayerSpec) -> Result<usize> {
        let id = id.into();
        if self.index.contains_key(&id) {
            return Err(Error::graph(id, "duplicate node id"));
        }
        self.index.insert(id.clone(), self.nodes.len());
        self.nodes.push(Node {
            id,
            layer,
            junction: Junction::Sum,
        });
        Ok(self.nodes.len() - 1)
    }

    pub fn junction(&mut self, node: usize, j: Junction) {
        self.nodes[node].junction = j;
    }

    pub fn edge(&mut self, src: usize, dst: usize) {
        self.edges.push((src, dst));
    }

    pub fn lookup(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Append `layer` after `prev`, returning the new node.
    pub fn chain(&mut self, prev: usize, id: impl Into<String>, layer: LayerSpec) -> Result<usize> {
        let n = self.node(id, layer)?;
        self.edge(prev, n);
        Ok(n)
    }

    pub fn build(self, input: usize, output: usize) -> Result<ArchGraph> {
        ArchGraph::from_parts(
            self.nodes,
            self.edges,
            input,
            output,
            self.input_channels.unwrap_or(DEFAULT_INPUT_CHANNELS),
        )
    }
}

impl ArchGraph {
    pub fn from_parts(
        nodes: Vec<Node>,
        edges: Vec<(usize, usize)>,
        input: usize,
        output: usize,
        input_channels: usize,
    ) -> Result<Self> {
        let n = nodes.len();
        if n == 0 {
            return Err(Error::graph("<graph>", "no nodes"));
        }
        if input >= n || output >= n {
            return Err(Error::graph("<graph>", "input or output index out of range"));
        }
        if input_channels == 0 {
            return Err(Error::graph(&nodes[input].id, "input channel count must be positive"));
        }
        let mut seen = std::collections::HashSet::new();
        for node in &nodes {
            if !seen.insert(node.id.as_str()) {
                return Err(Error::graph(&node.id, "duplicate node id"));
            }
            node.layer.check().map_err(|d| Error::graph(&node.id, d))?;
        }
        let mut preds = vec![Vec::new(); n];
        let mut succ = vec![Vec::new(); n];
        let mut edge_set = std::collections::HashSet::new();
        for &(s, d) in &edges {
            if s >= n || d >= n {
                return Err(Error::graph("<graph>", format!("edge ({s}, {d}) out of range")));
            }
            if !edge_set.insert((s, d)) {
                return Err(Error::graph(&nodes[d].id, format!("duplicate edge from `{}`", nodes[s].id)));
            }
            preds[d].push(s);
            succ[s].push(d);
        }
        if !preds[input].is_empty() {
            return Err(Error::graph(&nodes[input].id, "input node has incoming edges"));
        }
        if !succ[output].is_empty() {
            return Err(Error::graph(&nodes[output].id, "output node has outgoing edges"));
        }

        // Kahn's algorithm, smallest index first for a stable order.
        let mut indeg: Vec<usize> = preds.iter().map(Vec::len).collect();
        let mut ready: std::collections::BTreeSet<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &d in &succ[i] {
                indeg[d] -= 1;
                if indeg[d] == 0 {
                    ready.insert(d);
                }
            }
        }
        if order.len() != n {
            let stuck = (0..n).find(|&i| indeg[i] > 0).expect("cycle node");
            return Err(Error::graph(&nodes[stuck].id, "cycle detected"));
        }
        for i in 0..n {
            if i != input && preds[i].is_empty() {
                return Err(Error::graph(&nodes[i].id, "node is not reachable from the input"));
            }
            if i != output && succ[i].is_empty() {
                return Err(Error::graph(&nodes[i].id, "dangling node: only the output may have no successors"));
            }
        }

        let mut shapes = vec![
            (
                FeatureShape {
                    channels: 0,
                    height: 0,
                    width: 0
                },
                FeatureShape {
                    channels: 0,
                    height: 0,
                    width: 0
                }
            );
            n
        ];
        for &i in &order {
            let node = &nodes[i];
            let merged = if i == input {
                FeatureShape {
                    channels: input_channels,
                    height: REFERENCE_RESOLUTION,
                    width: REFERENCE_RESOLUTION,
                }
            } else {
                let ins: Vec<FeatureShape> = preds[i].iter().map(|&p| shapes[p].1).collect();
                merge_shapes(&node.id, node.junction, &ins)?
            };
            let out = layer_shape(&node.id, &node.layer, merged)?;
            shapes[i] = (merged, out);
        }

        Ok(ArchGraph {
            nodes,
            edges,
            input,
            output,
            input_channels,
            preds,
            order,
            shapes,
        })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn input(&self) -> usize {
        self.input
    }

    pub fn output(&self) -> usize {
        self.output
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn preds(&self, node: usize) -> &[usize] {
        &self.preds[node]
    }

    /// Topological order, deterministic for a given node list.
    pub fn topo_order(&self) -> &[usize] {
        &self.order
    }

    /// Merged input shape of `node` at the reference resolution.
    pub fn input_shape(&self, node: usize) -> FeatureShape {
        self.shapes[node].0
    }

    pub fn output_shape(&self, node: usize) -> FeatureShape {
        self.shapes[node].1
    }

    pub fn conv_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.layer.is_conv()).count()
    }

    /// Sum of per-layer parameters (conv weights and batch-norm affine).
    pub fn count_params(&self) -> u64 {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| n.layer.params(self.shapes[i].0.channels))
            .sum()
    }

    /// Serialize to the JSON graph schema.
    pub fn to_json(&self) -> serde_json::Value {
        let nodes: Vec<serde_json::Value> = self
            .nodes
            .iter()
            .map(|n| serde_json::json!({"id": n.id, "op": n.layer}))
            .collect();
        let edges: Vec<[&str; 2]> = self
            .edges
            .iter()
            .map(|&(s, d)| [self.nodes[s].id.as_str(), self.nodes[d].id.as_str()])
            .collect();
        let junction: BTreeMap<&str, Junction> = self
            .nodes
            .iter()
            .filter(|n| n.junction != Junction::Sum)
            .map(|n| (n.id.as_str(), n.junction))
            .collect();
        serde_json::json!({
            "nodes": nodes,
            "edges": edges,
            "junction": junction,
            "input": self.nodes[self.input].id,
            "output": self.nodes[self.output].id,
            "input_channels": self.input_channels,
        })
    }
}

fn merge_shapes(id: &str, junction: Junction, ins: &[FeatureShape]) -> Result<FeatureShape> {
    let first = ins[0];
    match junction {
        Junction::Sum => {
            if let Some(bad) = ins.iter().find(|s| **s != first) {
                return Err(Error::graph(
                    id,
                    format!(
                        "sum junction shape mismatch: {}x{}x{} vs {}x{}x{}",
                        first.channels, first.height, first.width, bad.channels, bad.height, bad.width
                    ),
                ));
            }
            Ok(first)
        }
        Junction::Concat => {
            if let Some(bad) = ins.iter().find(|s| (s.height, s.width) != (first.height, first.width)) {
                return Err(Error::graph(
                    id,
                    format!(
                        "concat junction spatial mismatch: {}x{} vs {}x{}",
                        first.height, first.width, bad.height, bad.width
                    ),
                ));
            }
            Ok(FeatureShape {
                channels: ins.iter().map(|s| s.channels).sum(),
                ..first
            })
        }
    }
}

fn layer_shape(id: &str, layer: &LayerSpec, s: FeatureShape) -> Result<FeatureShape> {
    let spatial = |k: usize, kw: usize, stride: usize, pad: usize| -> Result<(usize, usize)> {
        match (out_size(s.height, k, stride, pad), out_size(s.width, kw, stride, pad)) {
            (Some(h), Some(w)) => Ok((h, w)),
            _ => Err(Error::graph(
                id,
                format!("window {k}x{kw} does not fit a {}x{} feature map", s.height, s.width),
            )),
        }
    };
    match *layer {
        LayerSpec::Conv {
            c_in,
            c_out,
            kh,
            kw,
            stride,
            padding,
            ..
        } => {
            if c_in != s.channels {
                return Err(Error::graph(id, format!("conv expects {c_in} input channels, receives {}", s.channels)));
            }
            let (h, w) = spatial(kh, kw, stride, padding)?;
            Ok(FeatureShape {
                channels: c_out,
                height: h,
                width: w,
            })
        }
        LayerSpec::AvgPool { k, stride, padding } | LayerSpec::MaxPool { k, stride, padding } => {
            let (h, w) = spatial(k, k, stride, padding)?;
            Ok(FeatureShape {
                channels: s.channels,
                height: h,
                width: w,
            })
        }
        LayerSpec::GlobalAvgPool => Ok(FeatureShape {
            channels: s.channels,
            height: 1,
            width: 1,
        }),
        LayerSpec::BatchNorm | LayerSpec::Relu | LayerSpec::Identity | LayerSpec::Zero => Ok(s),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(layers: &[LayerSpec]) -> ArchGraph {
        let mut b = GraphBuilder::new();
        let mut prev = b.node("in", LayerSpec::Identity).unwrap();
        let input = prev;
        for (i, l) in layers.iter().enumerate() {
            prev = b.chain(prev, format!("l{i}"), l.clone()).unwrap();
        }
        let out = b.chain(prev, "out", LayerSpec::Identity).unwrap();
        b.build(input, out).unwrap()
    }

    #[test]
    fn conv_params() {
        let g = chain(&[LayerSpec::conv(3, 16, 3, 1)]);
        assert_eq!(g.count_params(), 432);
    }

    #[test]
    fn batch_norm_params_follow_channels() {
        let g = chain(&[LayerSpec::conv(3, 16, 1, 1), LayerSpec::BatchNorm]);
        assert_eq!(g.count_params(), 48 + 32);
    }

    #[test]
    fn grouped_conv_params() {
        let g = chain(&[LayerSpec::Conv {
            c_in: 3,
            c_out: 6,
            kh: 3,
            kw: 3,
            stride: 1,
            padding: 1,
            groups: 3,
        }]);
        assert_eq!(g.count_params(), 3 * 6 * 9 / 3);
    }

    #[test]
    fn channel_mismatch_names_node() {
        let mut b = GraphBuilder::new();
        let i = b.node("in", LayerSpec::Identity).unwrap();
        let c = b.chain(i, "c", LayerSpec::conv(4, 8, 3, 1)).unwrap();
        let err = b.build(i, c).unwrap_err();
        assert!(matches!(err, Error::Graph { ref node, .. } if node == "c"));
    }

    #[test]
    fn dangling_node_is_rejected() {
        let mut b = GraphBuilder::new();
        let i = b.node("in", LayerSpec::Identity).unwrap();
        let o = b.chain(i, "out", LayerSpec::Identity).unwrap();
        b.chain(i, "dangling", LayerSpec::Relu).unwrap();
        assert!(b.build(i, o).is_err());
    }

    #[test]
    fn concat_adds_channels() {
        let mut b = GraphBuilder::new();
        let i = b.node("in", LayerSpec::Identity).unwrap();
        let a = b.chain(i, "a", LayerSpec::conv(3, 8, 3, 1)).unwrap();
        let c = b.chain(i, "c", LayerSpec::conv(3, 4, 1, 1)).unwrap();
        let j = b.node("j", LayerSpec::Identity).unwrap();
        b.junction(j, Junction::Concat);
        b.edge(a, j);
        b.edge(c, j);
        let g = b.build(i, j).unwrap();
        assert_eq!(g.output_shape(j).channels, 12);
    }
}
