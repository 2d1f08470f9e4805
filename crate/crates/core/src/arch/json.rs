use super::{ArchGraph, Junction, LayerSpec, Node, DEFAULT_INPUT_CHANNELS};
use crate::error::{Error, Result};
use serde::Deserialize;
use std::collections::{BTreeMap, HashMap};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphDoc {
    nodes: Vec<NodeDoc>,
    edges: Vec<(String, String)>,
    #[serde(default)]
    junction: BTreeMap<String, Junction>,
    input: String,
    output: String,
    #[serde(default)]
    input_channels: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeDoc {
    id: String,
    op: LayerSpec,
}

/// Parse and validate a graph document.
pub fn parse_graph_json(doc: &str) -> Result<ArchGraph> {
    let value: serde_json::Value =
        serde_json::from_str(doc).map_err(|e| Error::graph("<document>", format!("invalid JSON: {e}")))?;
    parse_graph_value(value)
}

/// Like [`parse_graph_json`] for an already parsed document.
pub fn parse_graph_value(value: serde_json::Value) -> Result<ArchGraph> {
    let doc: GraphDoc =
        serde_json::from_value(value).map_err(|e| Error::graph("<document>", format!("schema violation: {e}")))?;
    let index: HashMap<&str, usize> = doc.nodes.iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect();
    let lookup = |id: &str| index.get(id).copied().ok_or_else(|| Error::graph(id, "unknown node id"));
    let edges = doc
        .edges
        .iter()
        .map(|(s, d)| Ok((lookup(s)?, lookup(d)?)))
        .collect::<Result<Vec<_>>>()?;
    for id in doc.junction.keys() {
        lookup(id)?;
    }
    let input = lookup(&doc.input)?;
    let output = lookup(&doc.output)?;
    let nodes = doc
        .nodes
        .iter()
        .map(|n| Node {
            id: n.id.clone(),
            layer: n.op.clone(),
            junction: doc.junction.get(&n.id).copied().unwrap_or_default(),
        })
        .collect();
    ArchGraph::from_parts(nodes, edges, input, output, doc.input_channels.unwrap_or(DEFAULT_INPUT_CHANNELS))
}
