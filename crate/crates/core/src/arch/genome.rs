//! ResNet-like macro search space.
//!
//! A genome is a list of at most [`MAX_BLOCKS`] residual blocks. Each block
//! repeats `sublayers` times; only the first repetition uses the block's
//! stride and input width. Decoded convs are followed by batch norm and
//! ReLU, and every repetition ends in a sum with its shortcut (a 1x1
//! projection conv plus batch norm when width or stride changes).

use super::{ArchGraph, GraphBuilder, LayerSpec, DEFAULT_INPUT_CHANNELS};
use crate::error::{Error, Result};
use rand::Rng;
use std::fmt;
use std::str::FromStr;

pub const MAX_BLOCKS: usize = 18;
pub const CHANNEL_STEP: usize = 8;
pub const MAX_CHANNELS: usize = 2048;
pub const MAX_BOTTLENECK: usize = 256;
pub const MAX_SUBLAYERS: usize = 9;
pub const KERNELS: [usize; 3] = [3, 5, 7];
pub const STRIDES: [usize; 2] = [1, 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockKind {
    /// Two `k x k` convs per repetition.
    SuperResKXKX,
    /// `1x1 -> k x k -> 1x1` bottleneck per repetition.
    SuperResK1KXK1,
}

impl BlockKind {
    pub const ALL: [BlockKind; 2] = [BlockKind::SuperResKXKX, BlockKind::SuperResK1KXK1];

    fn name(self) -> &'static str {
        match self {
            BlockKind::SuperResKXKX => "SuperResKXKX",
            BlockKind::SuperResK1KXK1 => "SuperResK1KXK1",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GenomeBlock {
    pub kind: BlockKind,
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
    pub bottleneck: usize,
    pub sublayers: usize,
}

impl GenomeBlock {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !KERNELS.contains(&self.kernel) {
            return Err(format!("kernel {} not in {:?}", self.kernel, KERNELS));
        }
        if !STRIDES.contains(&self.stride) {
            return Err(format!("stride {} not in {:?}", self.stride, STRIDES));
        }
        if self.channels % CHANNEL_STEP != 0 || !(CHANNEL_STEP..=MAX_CHANNELS).contains(&self.channels) {
            return Err(format!("channels {} not in 8..=2048 step 8", self.channels));
        }
        if self.bottleneck % CHANNEL_STEP != 0 || !(CHANNEL_STEP..=MAX_BOTTLENECK).contains(&self.bottleneck) {
            return Err(format!("bottleneck {} not in 8..=256 step 8", self.bottleneck));
        }
        if !(1..=MAX_SUBLAYERS).contains(&self.sublayers) {
            return Err(format!("sublayers {} not in 1..=9", self.sublayers));
        }
        Ok(())
    }

    /// Closed-form parameter count when fed `c_in` channels.
    pub fn params(&self, c_in: usize) -> u64 {
        let (k2, out, btn) = ((self.kernel * self.kernel) as u64, self.channels as u64, self.bottleneck as u64);
        let mut total = 0;
        let mut cin = c_in as u64;
        for rep in 0..self.sublayers {
            let stride = if rep == 0 { self.stride } else { 1 };
            total += match self.kind {
                BlockKind::SuperResKXKX => k2 * cin * btn + 2 * btn + k2 * btn * out + 2 * out,
                BlockKind::SuperResK1KXK1 => cin * btn + 2 * btn + k2 * btn * btn + 2 * btn + btn * out + 2 * out,
            };
            if cin != out || stride != 1 {
                total += cin * out + 2 * out;
            }
            cin = out;
        }
        total
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct ResNetGenome {
    pub blocks: Vec<GenomeBlock>,
}

impl ResNetGenome {
    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Data("genome has no blocks".into()));
        }
        if self.blocks.len() > MAX_BLOCKS {
            return Err(Error::Data(format!("genome has {} blocks, limit {MAX_BLOCKS}", self.blocks.len())));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.validate().map_err(|d| Error::Data(format!("block {i}: {d}")))?;
        }
        Ok(())
    }

    /// Parameter count without decoding the graph.
    pub fn params(&self) -> u64 {
        let mut c = DEFAULT_INPUT_CHANNELS;
        let mut total = 0;
        for b in &self.blocks {
            total += b.params(c);
            c = b.channels;
        }
        total
    }

    /// Decode into a graph over a 3-channel image input.
    pub fn decode(&self) -> Result<ArchGraph> {
        self.validate()?;
        let mut g = GraphBuilder::new();
        let input = g.node("input", LayerSpec::Identity)?;
        let mut x = input;
        let mut c = DEFAULT_INPUT_CHANNELS;
        for (bi, blk) in self.blocks.iter().enumerate() {
            for rep in 0..blk.sublayers {
                let p = format!("b{bi}.r{rep}");
                let stride = if rep == 0 { blk.stride } else { 1 };
                let (k, out, btn) = (blk.kernel, blk.channels, blk.bottleneck);
                let convs: Vec<(usize, usize, usize, usize)> = match blk.kind {
                    BlockKind::SuperResKXKX => vec![(c, btn, k, stride), (btn, out, k, 1)],
                    BlockKind::SuperResK1KXK1 => vec![(c, btn, 1, 1), (btn, btn, k, stride), (btn, out, 1, 1)],
                };
                let mut m = x;
                for (ci, (a, o, kk, s)) in convs.into_iter().enumerate() {
                    m = g.chain(m, format!("{p}.conv{ci}"), LayerSpec::conv(a, o, kk, s))?;
                    m = g.chain(m, format!("{p}.bn{ci}"), LayerSpec::BatchNorm)?;
                    m = g.chain(m, format!("{p}.relu{ci}"), LayerSpec::Relu)?;
                }
                let short = if c != out || stride != 1 {
                    let s = g.chain(x, format!("{p}.proj"), LayerSpec::conv(c, out, 1, stride))?;
                    g.chain(s, format!("{p}.proj_bn"), LayerSpec::BatchNorm)?
                } else {
                    x
                };
                let sum = g.node(format!("{p}.sum"), LayerSpec::Identity)?;
                g.edge(m, sum);
                g.edge(short, sum);
                x = sum;
                c = out;
            }
        }
        let gap = g.chain(x, "head.gap", LayerSpec::GlobalAvgPool)?;
        let out = g.chain(gap, "output", LayerSpec::Identity)?;
        g.build(input, out)
    }
}

/// Index of a value within its ordered domain, and back.
pub mod ordered {
    use super::*;

    pub fn channels_len() -> usize {
        MAX_CHANNELS / CHANNEL_STEP
    }
    pub fn bottleneck_len() -> usize {
        MAX_BOTTLENECK / CHANNEL_STEP
    }
    pub fn sublayers_len() -> usize {
        MAX_SUBLAYERS
    }
    pub fn width_to_index(w: usize) -> usize {
        w / CHANNEL_STEP - 1
    }
    pub fn index_to_width(i: usize) -> usize {
        (i + 1) * CHANNEL_STEP
    }
}

/// Ranges used when sampling the initial population.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitRanges {
    pub channels: (usize, usize),
    pub bottleneck: (usize, usize),
    pub sublayers: (usize, usize),
    pub max_blocks: usize,
}

impl Default for InitRanges {
    fn default() -> Self {
        InitRanges {
            channels: (48, 320),
            bottleneck: (32, 80),
            sublayers: (1, 2),
            max_blocks: MAX_BLOCKS,
        }
    }
}

impl GenomeBlock {
    pub fn random<R: Rng + ?Sized>(r: &InitRanges, rng: &mut R) -> Self {
        let width = |lo: usize, hi: usize, rng: &mut R| rng.gen_range(lo / CHANNEL_STEP..=hi / CHANNEL_STEP) * CHANNEL_STEP;
        GenomeBlock {
            kind: BlockKind::ALL[rng.gen_range(0..2)],
            kernel: KERNELS[rng.gen_range(0..KERNELS.len())],
            stride: STRIDES[rng.gen_range(0..STRIDES.len())],
            channels: width(r.channels.0, r.channels.1, rng),
            bottleneck: width(r.bottleneck.0, r.bottleneck.1, rng),
            sublayers: rng.gen_range(r.sublayers.0..=r.sublayers.1),
        }
    }
}

impl ResNetGenome {
    /// Random genome with a uniformly drawn block count.
    pub fn random<R: Rng + ?Sized>(r: &InitRanges, rng: &mut R) -> Self {
        let n = rng.gen_range(1..=r.max_blocks.max(1));
        ResNetGenome {
            blocks: (0..n).map(|_| GenomeBlock::random(r, rng)).collect(),
        }
    }
}

impl fmt::Display for ResNetGenome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, b) in self.blocks.iter().enumerate() {
            if i > 0 {
                f.write_str(";")?;
            }
            write!(
                f,
                "{}:{}:{}:{}:{}:{}",
                b.kind.name(),
                b.kernel,
                b.stride,
                b.channels,
                b.bottleneck,
                b.sublayers
            )?;
        }
        Ok(())
    }
}

impl FromStr for ResNetGenome {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut blocks = Vec::new();
        for desc in s.trim().split(';').filter(|d| !d.is_empty()) {
            let parts: Vec<&str> = desc.split(':').collect();
            if parts.len() != 6 {
                return Err(Error::Parse {
                    token: desc.into(),
                    detail: "expected type:k:stride:channels:bottleneck:sublayers".into(),
                });
            }
            let kind = BlockKind::ALL
                .into_iter()
                .find(|k| k.name() == parts[0])
                .ok_or_else(|| Error::Parse {
                    token: parts[0].into(),
                    detail: "unknown block type".into(),
                })?;
            let num = |t: &str| -> Result<usize> {
                t.parse().map_err(|_| Error::Parse {
                    token: t.into(),
                    detail: "not an integer".into(),
                })
            };
            blocks.push(GenomeBlock {
                kind,
                kernel: num(parts[1])?,
                stride: num(parts[2])?,
                channels: num(parts[3])?,
                bottleneck: num(parts[4])?,
                sublayers: num(parts[5])?,
            });
        }
        let g = ResNetGenome { blocks };
        g.validate()?;
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn block(kind: BlockKind, sublayers: usize) -> GenomeBlock {
        GenomeBlock {
            kind,
            kernel: 3,
            stride: 1,
            channels: 8,
            bottleneck: 8,
            sublayers,
        }
    }

    fn convs_with_kernel(g: &ArchGraph, k: usize) -> usize {
        g.nodes()
            .iter()
            .filter(|n| matches!(n.layer, LayerSpec::Conv { kh, .. } if kh == k))
            .count()
    }

    #[test]
    fn minimal_kxkx_expansion() {
        let g = ResNetGenome {
            blocks: vec![block(BlockKind::SuperResKXKX, 1)],
        }
        .decode()
        .unwrap();
        assert_eq!(convs_with_kernel(&g, 3), 2);
        // 3 -> 8 needs a projection.
        assert_eq!(convs_with_kernel(&g, 1), 1);
    }

    #[test]
    fn conv_count_linear_in_sublayers() {
        let one = ResNetGenome { blocks: vec![block(BlockKind::SuperResKXKX, 1)] }.decode().unwrap();
        let two = ResNetGenome { blocks: vec![block(BlockKind::SuperResKXKX, 2)] }.decode().unwrap();
        assert_eq!(convs_with_kernel(&two, 3), 2 * convs_with_kernel(&one, 3));
    }

    #[test]
    fn text_form_round_trip() {
        let s = "SuperResKXKX:3:2:64:32:2;SuperResK1KXK1:7:1:128:16:1";
        let g: ResNetGenome = s.parse().unwrap();
        assert_eq!(g.to_string(), s);
        assert!("SuperResKXKX:4:1:64:32:2".parse::<ResNetGenome>().is_err());
        assert!("Bogus:3:1:64:32:2".parse::<ResNetGenome>().is_err());
    }

    fn arb_block() -> impl Strategy<Value = GenomeBlock> {
        (0..2usize, 0..3usize, 0..2usize, 1..=256usize, 1..=32usize, 1..=9usize).prop_map(|(k, ke, s, c, b, sl)| GenomeBlock {
            kind: BlockKind::ALL[k],
            kernel: KERNELS[ke],
            stride: STRIDES[s],
            channels: c * 8,
            bottleneck: b * 8,
            sublayers: sl,
        })
    }

    /// Independent per-repetition formula.
    fn hand_params(g: &ResNetGenome) -> u64 {
        let mut c = 3u64;
        let mut total = 0u64;
        for b in &g.blocks {
            let (k, o, m) = (b.kernel as u64, b.channels as u64, b.bottleneck as u64);
            for rep in 0..b.sublayers {
                let main = match b.kind {
                    BlockKind::SuperResKXKX => c * m * k * k + m * o * k * k + 2 * (m + o),
                    BlockKind::SuperResK1KXK1 => c * m + m * m * k * k + m * o + 2 * (2 * m + o),
                };
                let proj = if c != o || (rep == 0 && b.stride == 2) { c * o + 2 * o } else { 0 };
                total += main + proj;
                c = o;
            }
        }
        total
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn decoded_params_match_closed_form(blocks in prop::collection::vec(arb_block(), 1..=4)) {
            let g = ResNetGenome { blocks };
            let graph = g.decode().unwrap();
            prop_assert_eq!(graph.count_params(), hand_params(&g));
            prop_assert_eq!(g.params(), hand_params(&g));
            prop_assert_eq!(g.decode().unwrap(), graph);
        }
    }
}
