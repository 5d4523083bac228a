//! Closed-form cost accounting.
//!
//! One "flop" is one multiply-accumulate. For an input edge of shape
//! `(c, h, w)`:
//!
//! - convolution:      `floor(h * w * c_i * c_o * k_h * k_w / (s_h * s_w * g))`
//! - deconvolution:    `h * w * c_i * c_o * k_h * k_w * s_h * s_w / g`
//! - fully connected:  `h * w * c * c_o`
//! - everything else:  `h * w * c` (one op per input element)
//! - input:            `0`
//!
//! The convolution form charges the output grid `h'*w' = h*w/(s_h*s_w)`
//! implicitly, which is why the division floors. All arithmetic is exact:
//! products are taken in `u128` and divided once at the end.

use crate::error::{Error, Result};
use crate::model::{LayerKind, LayerSpec, Model, Shape};

/// Cost of a single layer given its input edge shape.
pub fn layer_flops(spec: &LayerSpec, input: Shape) -> u64 {
    let (c, h, w) = (input.c as u128, input.h as u128, input.w as u128);
    let v = match spec {
        LayerSpec::Input => 0,
        LayerSpec::Convolution(p) => {
            let num = h * w * p.c_i as u128 * p.c_o as u128 * p.k_h as u128 * p.k_w as u128;
            num / (p.s_h as u128 * p.s_w as u128 * p.g as u128)
        }
        LayerSpec::Deconvolution(p) => {
            let num = h * w * p.c_i as u128 * p.c_o as u128 * p.k_h as u128 * p.k_w as u128
                * p.s_h as u128
                * p.s_w as u128;
            num / p.g as u128
        }
        LayerSpec::FullyConnected { c_o, .. } => h * w * c * *c_o as u128,
        LayerSpec::BatchNorm { .. }
        | LayerSpec::Scale
        | LayerSpec::ReLU
        | LayerSpec::Pooling(_)
        | LayerSpec::EltwiseAdd => h * w * c,
    };
    u64::try_from(v).expect("flop count exceeds u64")
}

/// Per-node cost entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeCost {
    pub name: String,
    pub kind: LayerKind,
    pub flops: u64,
    /// Bytes of all referenced parameter tensors (f32).
    pub weight_bytes: u64,
    /// Bytes of the produced activation (f32).
    pub activation_bytes: u64,
}

/// Whole-model cost breakdown.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub per_node: Vec<NodeCost>,
    pub total_flops: u64,
    pub total_weight_bytes: u64,
    pub total_activation_bytes: u64,
}

/// Costs every node of a valid model (shape inference must succeed).
pub fn model_cost(m: &Model) -> Result<CostReport> {
    let shapes = m.infer_shapes()?;
    let mut per_node = Vec::with_capacity(m.nodes.len());
    for n in &m.nodes {
        let input = match n.inputs.first() {
            Some(e) => *shapes
                .get(e)
                .ok_or_else(|| Error::Graph(format!("edge `{e}` missing from shape map")))?,
            None => Shape::new(1, 1, 1), // input node; costs 0 anyway
        };
        let weight_bytes: u64 = n
            .weights
            .iter()
            .chain(n.bias.iter())
            .map(|t| m.tensor(t).map(|t| t.len() as u64 * 4))
            .sum::<Result<u64>>()?;
        let out_shape = shapes
            .get(&n.output)
            .ok_or_else(|| Error::Graph(format!("edge `{}` missing from shape map", n.output)))?;
        per_node.push(NodeCost {
            name: n.name.clone(),
            kind: n.spec.kind(),
            flops: layer_flops(&n.spec, input),
            weight_bytes,
            activation_bytes: out_shape.elements() as u64 * 4,
        });
    }
    let total_flops = per_node.iter().map(|c| c.flops).sum();
    let total_weight_bytes = per_node.iter().map(|c| c.weight_bytes).sum();
    let total_activation_bytes = per_node.iter().map(|c| c.activation_bytes).sum();
    Ok(CostReport { per_node, total_flops, total_weight_bytes, total_activation_bytes })
}
