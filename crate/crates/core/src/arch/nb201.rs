//! NAS-Bench-201 cell strings and the benchmark's macro skeleton.
//!
//! Skeleton: a 3x3 stem conv with batch norm, three stages of `num_cells`
//! cells, residual reduction blocks doubling the width between stages, a
//! final batch norm and ReLU, then global average pooling. The benchmark's
//! linear classifier is not part of the graph; see
//! [`Nb201Config::classifier_params`].

use super::{ArchGraph, GraphBuilder, LayerSpec};
use crate::error::{Error, Result};

/// Operations a cell edge may carry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellOp {
    None,
    SkipConnect,
    Conv1x1,
    Conv3x3,
    AvgPool3x3,
}

impl CellOp {
    fn parse(token: &str) -> Option<Self> {
        Some(match token {
            "none" => CellOp::None,
            "skip_connect" => CellOp::SkipConnect,
            "nor_conv_1x1" => CellOp::Conv1x1,
            "nor_conv_3x3" => CellOp::Conv3x3,
            "avg_pool_3x3" => CellOp::AvgPool3x3,
            _ => return None,
        })
    }
}

/// A parsed cell: `edges[j]` lists `(op, source node)` into node `j + 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cell {
    pub edges: Vec<Vec<(CellOp, usize)>>,
}

impl Cell {
    pub fn slots(&self) -> usize {
        self.edges.iter().map(Vec::len).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Nb201Config {
    pub stem_channels: usize,
    pub num_cells: usize,
    pub num_classes: usize,
}

impl Default for Nb201Config {
    fn default() -> Self {
        Nb201Config {
            stem_channels: 16,
            num_cells: 5,
            num_classes: 10,
        }
    }
}

impl Nb201Config {
    /// Weights and biases of the classifier head the benchmark counts.
    pub fn classifier_params(&self) -> u64 {
        let c = 4 * self.stem_channels;
        (c * self.num_classes + self.num_classes) as u64
    }
}

fn parse_err(token: &str, detail: impl Into<String>) -> Error {
    Error::Parse {
        token: token.to_string(),
        detail: detail.into(),
    }
}

/// Parse `|op~0|+|op~0|op~1|+|op~0|op~1|op~2|`.
pub fn parse_cell(s: &str) -> Result<Cell> {
    let groups: Vec<&str> = s.split('+').collect();
    if groups.len() != 3 {
        return Err(parse_err(s, format!("expected 3 node groups separated by '+', found {}", groups.len())));
    }
    let mut edges = Vec::with_capacity(3);
    for (j, group) in groups.iter().enumerate() {
        let inner = group
            .strip_prefix('|')
            .and_then(|g| g.strip_suffix('|'))
            .ok_or_else(|| parse_err(group, "node group must be wrapped in '|'"))?;
        let tokens: Vec<&str> = inner.split('|').collect();
        if tokens.len() != j + 1 {
            return Err(parse_err(group, format!("node {} needs {} inputs, found {}", j + 1, j + 1, tokens.len())));
        }
        let mut node = Vec::with_capacity(j + 1);
        for (k, tok) in tokens.iter().enumerate() {
            let (op, src) = tok
                .split_once('~')
                .ok_or_else(|| parse_err(tok, "expected `op~index`"))?;
            let op = CellOp::parse(op).ok_or_else(|| parse_err(op, "unknown operation"))?;
            let src: usize = src.parse().map_err(|_| parse_err(tok, "input index is not an integer"))?;
            if src != k {
                return Err(parse_err(tok, format!("expected input index {k}")));
            }
            node.push((op, src));
        }
        edges.push(node);
    }
    Ok(Cell { edges })
}

/// Build the full macro graph for a cell string.
pub fn parse_nb201(cell: &str, stem_channels: usize, num_cells: usize) -> Result<ArchGraph> {
    let cfg = Nb201Config {
        stem_channels,
        num_cells,
        ..Default::default()
    };
    build_macro(&parse_cell(cell)?, &cfg)
}

pub fn build_macro(cell: &Cell, cfg: &Nb201Config) -> Result<ArchGraph> {
    if cfg.stem_channels == 0 {
        return Err(Error::Usage("stem channel count must be positive".into()));
    }
    let mut b = GraphBuilder::new();
    let input = b.node("input", LayerSpec::Identity)?;
    let c0 = cfg.stem_channels;
    let mut x = b.chain(input, "stem.conv", LayerSpec::conv(3, c0, 3, 1))?;
    x = b.chain(x, "stem.bn", LayerSpec::BatchNorm)?;
    let mut c = c0;
    for stage in 0..3 {
        if stage > 0 {
            x = reduction(&mut b, x, c, &format!("reduce{stage}"))?;
            c *= 2;
        }
        for k in 0..cfg.num_cells {
            x = add_cell(&mut b, x, cell, c, &format!("s{stage}.c{k}"))?;
        }
    }
    x = b.chain(x, "head.bn", LayerSpec::BatchNorm)?;
    x = b.chain(x, "head.relu", LayerSpec::Relu)?;
    x = b.chain(x, "head.gap", LayerSpec::GlobalAvgPool)?;
    let out = b.chain(x, "output", LayerSpec::Identity)?;
    b.build(input, out)
}

fn add_cell(b: &mut GraphBuilder, input: usize, cell: &Cell, c: usize, p: &str) -> Result<usize> {
    let mut nodes = vec![input];
    for (j, ins) in cell.edges.iter().enumerate() {
        let target = j + 1;
        let mut outs = Vec::with_capacity(ins.len());
        for &(op, src) in ins {
            let e = format!("{p}.e{src}{target}");
            let from = nodes[src];
            let last = match op {
                CellOp::None => b.chain(from, format!("{e}.zero"), LayerSpec::Zero)?,
                CellOp::SkipConnect => b.chain(from, format!("{e}.skip"), LayerSpec::Identity)?,
                CellOp::AvgPool3x3 => b.chain(
                    from,
                    format!("{e}.pool"),
                    LayerSpec::AvgPool {
                        k: 3,
                        stride: 1,
                        padding: 1,
                    },
                )?,
                CellOp::Conv1x1 | CellOp::Conv3x3 => {
                    let k = if op == CellOp::Conv1x1 { 1 } else { 3 };
                    let r = b.chain(from, format!("{e}.relu"), LayerSpec::Relu)?;
                    let cv = b.chain(r, format!("{e}.conv"), LayerSpec::conv(c, c, k, 1))?;
                    b.chain(cv, format!("{e}.bn"), LayerSpec::BatchNorm)?
                }
            };
            outs.push(last);
        }
        let n = b.node(format!("{p}.n{target}"), LayerSpec::Identity)?;
        for o in outs {
            b.edge(o, n);
        }
        nodes.push(n);
    }
    Ok(*nodes.last().expect("three nodes"))
}

/// Basic residual block halving resolution and doubling width.
fn reduction(b: &mut GraphBuilder, x: usize, c: usize, p: &str) -> Result<usize> {
    let r = b.chain(x, format!("{p}.a.relu"), LayerSpec::Relu)?;
    let a = b.chain(r, format!("{p}.a.conv"), LayerSpec::conv(c, 2 * c, 3, 2))?;
    let a = b.chain(a, format!("{p}.a.bn"), LayerSpec::BatchNorm)?;
    let r = b.chain(a, format!("{p}.b.relu"), LayerSpec::Relu)?;
    let m = b.chain(r, format!("{p}.b.conv"), LayerSpec::conv(2 * c, 2 * c, 3, 1))?;
    let m = b.chain(m, format!("{p}.b.bn"), LayerSpec::BatchNorm)?;
    let s = b.chain(
        x,
        format!("{p}.short.pool"),
        LayerSpec::AvgPool {
            k: 2,
            stride: 2,
            padding: 0,
        },
    )?;
    let s = b.chain(s, format!("{p}.short.conv"), LayerSpec::conv(c, 2 * c, 1, 1))?;
    let sum = b.node(format!("{p}.sum"), LayerSpec::Identity)?;
    b.edge(m, sum);
    b.edge(s, sum);
    Ok(sum)
}

#[cfg(test)]
mod tests {
    use super::*;

    const ALL_SKIP: &str = "|skip_connect~0|+|skip_connect~0|skip_connect~1|+|skip_connect~0|skip_connect~1|skip_connect~2|";
    const ALL_NONE: &str = "|none~0|+|none~0|none~1|+|none~0|none~1|none~2|";
    const ALL_CONV3: &str = "|nor_conv_3x3~0|+|nor_conv_3x3~0|nor_conv_3x3~1|+|nor_conv_3x3~0|nor_conv_3x3~1|nor_conv_3x3~2|";

    /// Stem, two reductions and the head batch norm, enumerated by hand.
    fn skeleton_params(c: u64) -> u64 {
        let stem = 3 * c * 9 + 2 * c;
        let red = |c: u64| 9 * c * 2 * c + 2 * 2 * c + 9 * 4 * c * c + 2 * 2 * c + c * 2 * c;
        stem + red(c) + red(2 * c) + 2 * 4 * c
    }

    #[test]
    fn all_identity_cell() {
        let g = parse_nb201(ALL_SKIP, 16, 5).unwrap();
        let cell_ops: Vec<_> = g.nodes().iter().filter(|n| n.id.starts_with("s0.c0.e")).collect();
        assert_eq!(cell_ops.len(), 6);
        assert!(cell_ops.iter().all(|n| n.layer == LayerSpec::Identity));
        assert_eq!(g.count_params(), skeleton_params(16));
    }

    #[test]
    fn all_zero_cell_feeds_only_zeros() {
        let g = parse_nb201(ALL_NONE, 16, 5).unwrap();
        let out = g.nodes().iter().position(|n| n.id == "s0.c0.n3").unwrap();
        assert_eq!(g.preds(out).len(), 3);
        for &p in g.preds(out) {
            assert_eq!(g.nodes()[p].layer, LayerSpec::Zero);
        }
    }

    #[test]
    fn benchmark_parameter_counts() {
        // Reported sizes 0.073306 MB and 1.531546 MB include the classifier.
        let cfg = Nb201Config::default();
        let small = parse_nb201(ALL_SKIP, 16, 5).unwrap();
        assert_eq!(small.count_params() + cfg.classifier_params(), 73_306);
        let big = parse_nb201(ALL_CONV3, 16, 5).unwrap();
        assert_eq!(big.count_params() + cfg.classifier_params(), 1_531_546);
    }

    #[test]
    fn cell_has_six_slots() {
        let c = parse_cell("|nor_conv_1x1~0|+|avg_pool_3x3~0|none~1|+|skip_connect~0|nor_conv_3x3~1|none~2|").unwrap();
        assert_eq!(c.slots(), 6);
    }

    #[test]
    fn unknown_token_is_named() {
        let err = parse_cell("|conv_5x5~0|+|none~0|none~1|+|none~0|none~1|none~2|").unwrap_err();
        assert!(matches!(err, Error::Parse { ref token, .. } if token == "conv_5x5"));
    }

    #[test]
    fn malformed_strings() {
        for bad in [
            "",
            "|none~0|+|none~0|none~1|",
            "|none~0|+|none~0|+|none~0|none~1|none~2|",
            "|none~1|+|none~0|none~1|+|none~0|none~1|none~2|",
            "|none0|+|none~0|none~1|+|none~0|none~1|none~2|",
            "none~0|+|none~0|none~1|+|none~0|none~1|none~2|",
        ] {
            assert!(matches!(parse_cell(bad), Err(Error::Parse { .. })), "{bad}");
        }
    }
}
