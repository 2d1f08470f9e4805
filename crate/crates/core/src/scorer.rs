//! The learnable scorer: constructed architecture, L1, SymLog, L2, pooling,
//! batch transpose and the batch-wise MLP.

use crate::arch::ArchGraph;
use crate::error::{Error, Result};
use crate::rep::{self, ConstructedArch, SpectralWeights, Unitization, Variant};
use crate::spectral::{FrequencyKernel, KernelShape, FREQ_CHANNELS};
use crate::tensor::{read_checkpoint, write_checkpoint, Checkpoint, ConvAttrs, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

const CHECKPOINT_KIND: &str = "ftscore-scorer";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorerConfig {
    pub variant: Variant,
    /// Width of the L1 output.
    pub fixed_channels: usize,
    /// Hidden widths of the batch-wise MLP; its input width is the batch size.
    pub mlp_hidden: Vec<usize>,
    pub freq_channels: usize,
    pub k_max: usize,
    /// `(B, C, H, W)` of the input-like tensor.
    pub input_shape: [usize; 4],
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig {
            variant: Variant::VNorm,
            fixed_channels: 64,
            mlp_hidden: vec![64, 32],
            freq_channels: FREQ_CHANNELS,
            k_max: 3,
            input_shape: [64, 3, 32, 32],
        }
    }
}

impl ScorerConfig {
    /// Small shapes for tests and quick experiments.
    pub fn tiny() -> Self {
        ScorerConfig {
            variant: Variant::VNorm,
            fixed_channels: 8,
            mlp_hidden: vec![8, 4],
            freq_channels: 8,
            k_max: 3,
            input_shape: [8, 3, 8, 8],
        }
    }

    fn validate(&self) -> Result<()> {
        let dims_ok = self.fixed_channels > 0
            && self.freq_channels > 0
            && self.k_max > 0
            && self.input_shape.iter().all(|&d| d > 0)
            && self.mlp_hidden.iter().all(|&d| d > 0);
        if dims_ok {
            Ok(())
        } else {
            Err(Error::Usage(format!("scorer dimensions must be positive: {self:?}")))
        }
    }
}

/// Everything the scorer learns.
#[derive(Clone, Debug, PartialEq)]
pub struct ScorerParams {
    pub config: ScorerConfig,
    pub fk: FrequencyKernel,
    pub input: Tensor,
    /// `(1, fixed_channels, 1, 1)`.
    pub l2: Tensor,
    /// `(weight (out, in), bias (out))` per layer; ReLU between layers.
    pub mlp: Vec<(Tensor, Tensor)>,
}

/// A recorded forward pass, kept for a later backward.
pub struct ScoreTrace {
    pub tape: Tape,
    pub params: Vec<Var>,
    pub score: Var,
}

impl ScoreTrace {
    pub fn value(&self) -> f64 {
        self.tape.value(self.score).item()
    }

    /// Parameter gradients of `upstream * score`, in [`ScorerParams::names`] order.
    pub fn grads(&self, upstream: f64) -> Result<Vec<Tensor>> {
        let mut g = self.tape.backward_scaled(self.score, upstream)?;
        Ok(self.params.iter().map(|&v| g.take(v)).collect())
    }
}

impl ScorerParams {
    pub fn init(config: ScorerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fk = FrequencyKernel::random(config.freq_channels, config.k_max, &mut rng);
        let input = Tensor::randn(&config.input_shape, 1.0, &mut rng);
        let f = config.fixed_channels;
        let l2 = Tensor::randn(&[1, f, 1, 1], (1.0 / f as f64).sqrt(), &mut rng);
        let mut widths = vec![config.input_shape[0]];
        widths.extend(&config.mlp_hidden);
        widths.push(1);
        let mlp = widths
            .windows(2)
            .map(|w| {
                let weight = Tensor::randn(&[w[1], w[0]], (2.0 / w[0] as f64).sqrt(), &mut rng);
                let bias = Tensor::uniform(&[w[1]], 1.0 / (w[0] as f64).sqrt(), &mut rng);
                (weight, bias)
            })
            .collect();
        Ok(ScorerParams {
            config,
            fk,
            input,
            l2,
            mlp,
        })
    }

    pub fn names(&self) -> Vec<String> {
        let mut n = vec!["fk".to_string(), "input".to_string(), "l2.weight".to_string()];
        for i in 0..self.mlp.len() {
            n.push(format!("mlp.{i}.weight"));
            n.push(format!("mlp.{i}.bias"));
        }
        n
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut t = vec![self.fk.tensor(), &self.input, &self.l2];
        for (w, b) in &self.mlp {
            t.push(w);
            t.push(b);
        }
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut t = vec![self.fk.tensor_mut(), &mut self.input, &mut self.l2];
        for (w, b) in &mut self.mlp {
            t.push(w);
            t.push(b);
        }
        t
    }

    /// Record the score of `g` on a tape, with the parameters either as
    /// trainable leaves or as constants.
    pub fn trace(&self, g: &ArchGraph, trainable: bool) -> Result<ScoreTrace> {
        let mut tape = Tape::new();
        let params: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        let score = self.forward_with(&mut tape, &params, g)?;
        Ok(ScoreTrace { tape, params, score })
    }

    /// Build the score on `tape` from parameter leaves given in
    /// [`ScorerParams::names`] order.
    pub fn forward_with(&self, tape: &mut Tape, params: &[Var], g: &ArchGraph) -> Result<Var> {
        if params.len() != 3 + 2 * self.mlp.len() {
            return Err(Error::Usage(format!("expected {} parameter leaves", 3 + 2 * self.mlp.len())));
        }
        let ca = rep::build(g, self.config.variant)?;
        let mode = match self.config.variant {
            Variant::VNorm => Unitization::Measure,
            Variant::Static | Variant::StaticMultiply => Unitization::Static,
        };
        self.forward_constructed(tape, params, &ca, mode)
    }

    /// Like [`ScorerParams::forward_with`] on an already built architecture
    /// with an explicit unitization mode.
    pub fn forward_constructed(&self, tape: &mut Tape, params: &[Var], ca: &ConstructedArch, mode: Unitization) -> Result<Var> {
        if params.len() != 3 + 2 * self.mlp.len() {
            return Err(Error::Usage(format!("expected {} parameter leaves", 3 + 2 * self.mlp.len())));
        }
        let (fk, input, l2) = (params[0], params[1], params[2]);
        let mut weights = SpectralWeights::new(fk);
        let feats = ca.run(tape, input, &mut weights, mode)?.output;
        let x = self.head(tape, feats, &mut weights, l2)?;
        self.mlp_forward(tape, x, &params[3..])
    }

    fn head(&self, tape: &mut Tape, feats: Var, weights: &mut SpectralWeights, l2: Var) -> Result<Var> {
        let c_feat = tape.value(feats).shape()[1];
        let l1 = KernelShape::new(c_feat, self.config.fixed_channels, 1, 1);
        let w1 = rep::ConvWeights::weight(weights, tape, usize::MAX, l1)?;
        let mut x = tape.conv2d(feats, w1, ConvAttrs::default())?;
        if self.config.variant == Variant::VNorm {
            let s = tape.std(x)?;
            x = tape.divide_by_scalar(x, s)?;
        }
        let x = tape.symlog(x)?;
        let x = tape.conv2d(x, l2, ConvAttrs::default())?;
        let x = tape.global_avg_pool(x)?;
        tape.transpose_batch_channel(x)
    }

    fn mlp_forward(&self, tape: &mut Tape, mut x: Var, layers: &[Var]) -> Result<Var> {
        let n = layers.len() / 2;
        for i in 0..n {
            x = tape.linear(x, layers[2 * i], Some(layers[2 * i + 1]))?;
            if i + 1 < n {
                x = tape.relu(x)?;
            }
        }
        Ok(x)
    }

    /// Input vector of the batch-wise MLP, for inspection.
    pub fn mlp_input(&self, g: &ArchGraph) -> Result<Tensor> {
        let mut tape = Tape::new();
        let fk = tape.constant(self.fk.tensor().clone());
        let input = tape.constant(self.input.clone());
        let l2 = tape.constant(self.l2.clone());
        let mut weights = SpectralWeights::new(fk);
        let ca = rep::build(g, self.config.variant)?;
        let mode = match self.config.variant {
            Variant::VNorm => Unitization::Measure,
            _ => Unitization::Static,
        };
        let feats = ca.run(&mut tape, input, &mut weights, mode)?.output;
        let x = self.head(&mut tape, feats, &mut weights, l2)?;
        Ok(tape.value(x).clone())
    }

    pub fn score(&self, g: &ArchGraph) -> Result<f64> {
        Ok(self.trace(g, false)?.value())
    }

    /// Scores in input order; the first failure aborts with its index.
    pub fn score_batch(&self, gs: &[ArchGraph]) -> Result<Vec<f64>> {
        let results: Vec<Result<f64>> = gs.par_iter().map(|g| self.score(g)).collect();
        results
            .into_iter()
            .enumerate()
            .map(|(index, r)| r.map_err(|e| Error::AtIndex { index, source: Box::new(e) }))
            .collect()
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            meta: serde_json::json!({
                "kind": CHECKPOINT_KIND,
                "config": serde_json::to_value(&self.config)?,
            }),
            tensors: self.names().into_iter().zip(self.tensors().into_iter().cloned()).collect(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta.get("kind").and_then(|k| k.as_str()) != Some(CHECKPOINT_KIND) {
            return Err(Error::Checkpoint("not a scorer checkpoint".into()));
        }
        let config: ScorerConfig = serde_json::from_value(ckpt.meta["config"].clone())?;
        let mut p = ScorerParams::init(config, 0)?;
        let names = p.names();
        for (name, slot) in names.iter().zip(p.tensors_mut()) {
            let t = ckpt
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        p.fk = FrequencyKernel::new(p.fk.tensor().clone())?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.to_checkpoint()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&read_checkpoint(path)?)
    }
}

/// One line of score output.
pub fn score_line(arch_id: &str, score: f64) -> String {
    serde_json::json!({ "arch_id": arch_id, "score": score }).to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{parse_graph_json, GraphBuilder, LayerSpec};
    use crate::tensor::finite_diff_check_sampled;

    fn small_graph() -> ArchGraph {
        let mut b = GraphBuilder::new();
        let i = b.node("in", LayerSpec::Identity).unwrap();
        let c = b.chain(i, "c1", LayerSpec::conv(3, 4, 3, 1)).unwrap();
        let r = b.chain(c, "r1", LayerSpec::Relu).unwrap();
        let c2 = b.chain(r, "c2", LayerSpec::conv(4, 4, 3, 2)).unwrap();
        let o = b.chain(c2, "out", LayerSpec::Identity).unwrap();
        b.build(i, o).unwrap()
    }

    fn branchy(names: [&str; 4]) -> ArchGraph {
        let doc = serde_json::json!({
            "nodes": [
                {"id": names[0], "op": {"type": "identity"}},
                {"id": names[1], "op": {"type": "conv", "c_in": 3, "c_out": 4, "kh": 3, "kw": 3, "padding": 1}},
                {"id": names[2], "op": {"type": "conv", "c_in": 3, "c_out": 4, "kh": 1, "kw": 1}},
                {"id": names[3], "op": {"type": "relu"}},
            ],
            "edges": [[names[0], names[1]], [names[0], names[2]], [names[1], names[3]], [names[2], names[3]]],
            "input": names[0],
            "output": names[3],
        });
        parse_graph_json(&doc.to_string()).unwrap()
    }

    #[test]
    fn deterministic_and_label_invariant() {
        let p = ScorerParams::init(ScorerConfig::tiny(), 3).unwrap();
        let a = branchy(["in", "a", "b", "out"]);
        let b = branchy(["x", "z", "y", "w"]);
        assert_eq!(p.score(&a).unwrap(), p.score(&a).unwrap());
        assert_eq!(p.score(&a).unwrap(), p.score(&b).unwrap());
    }

    #[test]
    fn extra_identity_layer_does_not_change_score() {
        let p = ScorerParams::init(ScorerConfig::tiny(), 4).unwrap();
        let g = small_graph();
        let mut b = GraphBuilder::new();
        let i = b.node("in", LayerSpec::Identity).unwrap();
        let c = b.chain(i, "c1", LayerSpec::conv(3, 4, 3, 1)).unwrap();
        let id = b.chain(c, "extra", LayerSpec::Identity).unwrap();
        let r = b.chain(id, "r1", LayerSpec::Relu).unwrap();
        let c2 = b.chain(r, "c2", LayerSpec::conv(4, 4, 3, 2)).unwrap();
        let o = b.chain(c2, "out", LayerSpec::Identity).unwrap();
        let h = b.build(i, o).unwrap();
        assert_eq!(p.score(&g).unwrap(), p.score(&h).unwrap());
    }

    #[test]
    fn batch_preserves_order() {
        let p = ScorerParams::init(ScorerConfig::tiny(), 5).unwrap();
        assert!(p.score_batch(&[]).unwrap().is_empty());
        let gs = vec![small_graph(), branchy(["in", "a", "b", "out"])];
        let single = p.score(&gs[0]).unwrap();
        assert_eq!(p.score_batch(&gs[..1]).unwrap(), vec![single]);
        let fwd = p.score_batch(&gs).unwrap();
        let rev: Vec<ArchGraph> = gs.iter().rev().cloned().collect();
        let mut back = p.score_batch(&rev).unwrap();
        back.reverse();
        assert_eq!(fwd, back);
    }

    #[test]
    fn batch_error_carries_index() {
        let p = ScorerParams::init(ScorerConfig::tiny(), 6).unwrap();
        let mut b = GraphBuilder::new();
        let i = b.node("in", LayerSpec::Identity).unwrap();
        let z = b.chain(i, "z", LayerSpec::Zero).unwrap();
        let c = b.chain(z, "c", LayerSpec::conv(3, 4, 1, 1)).unwrap();
        let bad = b.build(i, c).unwrap();
        let err = p.score_batch(&[small_graph(), bad]).unwrap_err();
        assert!(matches!(err, Error::AtIndex { index: 1, .. }));
    }

    #[test]
    fn pipeline_gradient_matches_finite_differences() {
        for variant in [Variant::VNorm, Variant::Static] {
            let cfg = ScorerConfig {
                variant,
                input_shape: [4, 3, 5, 5],
                ..ScorerConfig::tiny()
            };
            let p = ScorerParams::init(cfg, 7).unwrap();
            let g = small_graph();
            let params: Vec<Tensor> = p.tensors().into_iter().cloned().collect();
            let err = finite_diff_check_sampled(|t, v| p.forward_with(t, v, &g), &params, 1e-5, 12, 1).unwrap();
            assert!(err <= 1e-3, "{variant}: {err}");
        }
    }

    #[test]
    fn post_l1_unitized_tensor_has_unit_std() {
        let p = ScorerParams::init(ScorerConfig::tiny(), 8).unwrap();
        let g = small_graph();
        let mut tape = Tape::new();
        let fk = tape.constant(p.fk.tensor().clone());
        let input = tape.constant(p.input.clone());
        let mut w = SpectralWeights::new(fk);
        let feats = rep::build(&g, Variant::VNorm)
            .unwrap()
            .run(&mut tape, input, &mut w, Unitization::Measure)
            .unwrap()
            .output;
        let l1 = KernelShape::new(4, 8, 1, 1);
        let w1 = rep::ConvWeights::weight(&mut w, &mut tape, usize::MAX, l1).unwrap();
        let x = tape.conv2d(feats, w1, ConvAttrs::default()).unwrap();
        let s = tape.std(x).unwrap();
        let y = tape.divide_by_scalar(x, s).unwrap();
        assert!((tape.value(y).std() - 1.0).abs() < 1e-9);
        assert_eq!(p.mlp_input(&g).unwrap().shape(), &[1, 8]);
    }

    #[test]
    fn checkpoint_round_trip_keeps_scores() {
        let p = ScorerParams::init(ScorerConfig::tiny(), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ckpt");
        p.save(&path).unwrap();
        let q = ScorerParams::load(&path).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.score(&small_graph()).unwrap(), q.score(&small_graph()).unwrap());
    }

    #[test]
    fn score_line_format() {
        let line = score_line("a1", 0.5);
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["arch_id"], "a1");
        assert_eq!(v["score"], 0.5);
    }
}
