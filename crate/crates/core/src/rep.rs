//! Constructed architectures: an [`ArchGraph`] with every operator replaced
//! by its representation.
//!
//! Convolutions run with weights synthesized from the shared frequency
//! tensor; pooling and ReLU run as themselves; batch norm normalizes across
//! the batch axis; identity passes through and zero emits zeros of the same
//! shape. Each conv output is then unitized, either by a per-node factor
//! measured with v-norm or by the static `sqrt(2/n)` constant.

use crate::arch::{ArchGraph, Junction, LayerSpec};
use crate::error::{Error, Result};
use crate::spectral::KernelShape;
use crate::tensor::ops::SCALE_TOLERANCE;
use crate::tensor::{ConvAttrs, PoolAttrs, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// How conv outputs are brought to unit scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Per-node standard deviation measured on the input-like tensor.
    #[serde(rename = "vnorm")]
    VNorm,
    /// Divide each conv output by `sqrt(2/n)`, `n` = input channels.
    Static,
    /// Multiply by `sqrt(2/n)` instead (ablation switch).
    StaticMultiply,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::VNorm => "vnorm",
            Variant::Static => "static",
            Variant::StaticMultiply => "static-multiply",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vnorm" | "v_norm" => Ok(Variant::VNorm),
            "static" => Ok(Variant::Static),
            "static_multiply" | "static-multiply" => Ok(Variant::StaticMultiply),
            _ => Err(Error::Usage(format!("unknown variant `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum RepOp {
    Conv { shape: KernelShape, attrs: ConvAttrs },
    Relu,
    AvgPool(PoolAttrs),
    MaxPool(PoolAttrs),
    GlobalAvgPool,
    BatchNorm,
    Identity,
    Zero,
}

#[derive(Clone, Debug)]
struct Step {
    node: usize,
    preds: Vec<usize>,
    junction: Junction,
    op: RepOp,
}

/// Executable mirror of an [`ArchGraph`].
#[derive(Clone, Debug)]
pub struct ConstructedArch {
    steps: Vec<Step>,
    node_ids: Vec<String>,
    input: usize,
    output: usize,
    variant: Variant,
    factors: BTreeMap<usize, f64>,
    calibrated: bool,
}

/// Supplies a weight tensor for each conv node.
pub trait ConvWeights {
    fn weight(&mut self, tape: &mut Tape, node: usize, shape: KernelShape) -> Result<Var>;
}

/// Weights materialized from a frequency tensor already on the tape,
/// shared between all convs of the same shape.
pub struct SpectralWeights {
    fk: Var,
    cache: BTreeMap<KernelShape, Var>,
}

impl SpectralWeights {
    pub fn new(fk: Var) -> Self {
        SpectralWeights {
            fk,
            cache: BTreeMap::new(),
        }
    }
}

impl ConvWeights for SpectralWeights {
    fn weight(&mut self, tape: &mut Tape, _node: usize, shape: KernelShape) -> Result<Var> {
        if let Some(&v) = self.cache.get(&shape) {
            return Ok(v);
        }
        let v = tape.materialize(self.fk, shape)?;
        self.cache.insert(shape, v);
        Ok(v)
    }
}

/// Independent Kaiming-normal weights per conv node, seeded per node.
pub struct KaimingWeights {
    seed: u64,
}

impl KaimingWeights {
    pub fn new(seed: u64) -> Self {
        KaimingWeights { seed }
    }
}

impl ConvWeights for KaimingWeights {
    fn weight(&mut self, tape: &mut Tape, node: usize, shape: KernelShape) -> Result<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (node as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let fan_in = (shape.c_in * shape.kh * shape.kw) as f64;
        let t = Tensor::randn(&shape.dims(), (2.0 / fan_in).sqrt(), &mut rng);
        Ok(tape.constant(t))
    }
}

/// How each conv output is scaled during a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unitization {
    /// Measure the std of each conv output and divide by it (as a constant).
    Measure,
    /// Divide by the factors stored by [`ConstructedArch::calibrate_vnorm`].
    Stored,
    /// `sqrt(2/n)` division or multiplication per the variant.
    Static,
    /// Leave conv outputs untouched.
    None,
}

/// Values produced by one execution.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub output: Var,
    /// Output of every node, indexed like the source graph.
    pub nodes: Vec<Option<Var>>,
    /// Factor applied at each conv node.
    pub factors: BTreeMap<usize, f64>,
    /// Constant leaves holding those factors.
    pub factor_vars: BTreeMap<usize, Var>,
}

pub fn build(g: &ArchGraph, variant: Variant) -> Result<ConstructedArch> {
    let mut steps = Vec::with_capacity(g.nodes().len());
    for &i in g.topo_order() {
        let node = &g.nodes()[i];
        let op = match node.layer {
            LayerSpec::Conv {
                c_in,
                c_out,
                kh,
                kw,
                stride,
                padding,
                groups,
            } => RepOp::Conv {
                shape: KernelShape::new(c_in / groups, c_out, kh, kw),
                attrs: ConvAttrs { stride, padding, groups },
            },
            LayerSpec::Relu => RepOp::Relu,
            LayerSpec::AvgPool { k, stride, padding } => RepOp::AvgPool(PoolAttrs { k, stride, padding }),
            LayerSpec::MaxPool { k, stride, padding } => RepOp::MaxPool(PoolAttrs { k, stride, padding }),
            LayerSpec::GlobalAvgPool => RepOp::GlobalAvgPool,
            LayerSpec::BatchNorm => RepOp::BatchNorm,
            LayerSpec::Identity => RepOp::Identity,
            LayerSpec::Zero => RepOp::Zero,
        };
        steps.push(Step {
            node: i,
            preds: g.preds(i).to_vec(),
            junction: node.junction,
            op,
        });
    }
    Ok(ConstructedArch {
        steps,
        node_ids: g.nodes().iter().map(|n| n.id.clone()).collect(),
        input: g.input(),
        output: g.output(),
        variant,
        factors: BTreeMap::new(),
        calibrated: false,
    })
}

impl ConstructedArch {
    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn is_calibrated(&self) -> bool {
        self.calibrated
    }

    /// Unitization factor per conv node index (after calibration).
    pub fn factors(&self) -> &BTreeMap<usize, f64> {
        &self.factors
    }

    pub fn set_factors(&mut self, factors: BTreeMap<usize, f64>) {
        self.factors = factors;
        self.calibrated = true;
    }

    pub fn node_id(&self, node: usize) -> &str {
        &self.node_ids[node]
    }

    pub fn conv_nodes(&self) -> Vec<usize> {
        self.steps
            .iter()
            .filter(|s| matches!(s.op, RepOp::Conv { .. }))
            .map(|s| s.node)
            .collect()
    }

    pub fn relu_nodes(&self) -> Vec<usize> {
        self.steps.iter().filter(|s| s.op == RepOp::Relu).map(|s| s.node).collect()
    }

    /// Gradient-free pass measuring each conv output's standard deviation
    /// and dividing by it before it reaches successors.
    pub fn calibrate_vnorm(&mut self, input: &Tensor, weights: &mut dyn ConvWeights, tape: &mut Tape) -> Result<()> {
        if self.variant != Variant::VNorm {
            return Err(Error::Usage("calibrate_vnorm requires the v-norm variant".into()));
        }
        let x = tape.constant(input.clone());
        let run = self.run(tape, x, weights, Unitization::Measure)?;
        self.set_factors(run.factors);
        Ok(())
    }

    /// Second pass producing the output feature map.
    ///
    /// With `record_gradients` a v-norm arch must be calibrated first; without
    /// it an uncalibrated v-norm arch measures and divides in a single pass.
    pub fn forward_features(
        &self,
        tape: &mut Tape,
        input: Var,
        weights: &mut dyn ConvWeights,
        record_gradients: bool,
    ) -> Result<RunOutput> {
        let mode = match self.variant {
            Variant::VNorm if self.calibrated => Unitization::Stored,
            Variant::VNorm if record_gradients => {
                return Err(Error::Usage("v-norm arch must be calibrated before a gradient pass".into()))
            }
            Variant::VNorm => Unitization::Measure,
            Variant::Static | Variant::StaticMultiply => Unitization::Static,
        };
        self.run(tape, input, weights, mode)
    }

    pub fn run(&self, tape: &mut Tape, input: Var, weights: &mut dyn ConvWeights, mode: Unitization) -> Result<RunOutput> {
        if mode == Unitization::Stored && !self.calibrated {
            return Err(Error::Usage("no stored unitization factors".into()));
        }
        let n = self.node_ids.len();
        let mut outs: Vec<Option<Var>> = vec![None; n];
        let mut factors = BTreeMap::new();
        let mut factor_vars = BTreeMap::new();
        for step in &self.steps {
            let merged = if step.node == self.input {
                input
            } else {
                let ins: Vec<Var> = step.preds.iter().map(|&p| outs[p].expect("topological order")).collect();
                match step.junction {
                    Junction::Sum => tape.add(&ins)?,
                    Junction::Concat if ins.len() == 1 => ins[0],
                    Junction::Concat => tape.concat(&ins)?,
                }
            };
            let y = match &step.op {
                RepOp::Identity => merged,
                RepOp::Zero => tape.scale_by_scalar(merged, 0.0)?,
                RepOp::Relu => tape.relu(merged)?,
                RepOp::BatchNorm => tape.batch_norm_rep(merged)?,
                RepOp::AvgPool(a) => tape.avgpool2d(merged, *a)?,
                RepOp::MaxPool(a) => tape.maxpool2d(merged, *a)?,
                RepOp::GlobalAvgPool => {
                    let s = tape.value(merged).shape().to_vec();
                    if s.len() != 4 || s[2] != s[3] {
                        return Err(Error::shape("global_avg_pool", format!("needs a square map, got {s:?}")));
                    }
                    tape.avgpool2d(merged, PoolAttrs { k: s[2], stride: 1, padding: 0 })?
                }
                RepOp::Conv { shape, attrs } => {
                    let w = weights.weight(tape, step.node, *shape)?;
                    let y = tape.conv2d(merged, w, *attrs)?;
                    let factor = match mode {
                        Unitization::None => None,
                        Unitization::Measure => {
                            let sd = tape.value(y).std();
                            if !(sd >= SCALE_TOLERANCE) {
                                return Err(Error::DegenerateScale {
                                    context: format!("v-norm at node `{}`", self.node_ids[step.node]),
                                    value: sd,
                                });
                            }
                            Some(sd)
                        }
                        Unitization::Stored => Some(*self.factors.get(&step.node).ok_or_else(|| {
                            Error::Usage(format!("node `{}` has no stored factor", self.node_ids[step.node]))
                        })?),
                        Unitization::Static => {
                            let k = (2.0 / (shape.c_in * attrs.groups) as f64).sqrt();
                            Some(if self.variant == Variant::StaticMultiply { 1.0 / k } else { k })
                        }
                    };
                    match factor {
                        Some(f) => {
                            factors.insert(step.node, f);
                            let c = tape.constant(Tensor::scalar(f));
                            factor_vars.insert(step.node, c);
                            tape.divide_by_scalar(y, c)?
                        }
                        None => y,
                    }
                }
            };
            outs[step.node] = Some(y);
        }
        Ok(RunOutput {
            output: outs[self.output].expect("output visited"),
            nodes: outs,
            factors,
            factor_vars,
        })
    }
}
