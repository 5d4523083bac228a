//! Lossless fusion of linear layers.
//!
//! Three rewrites, each exact up to float rounding:
//!
//! 1. **Normalization after a representation layer.** Batch norm and scale
//!    are per-channel affine maps `y = a*x + c`; applied after a layer with
//!    weights `W` and bias `b` they fold into `W'[o,..] = a_o * W[o,..]`,
//!    `b'_o = a_o * b_o + c_o`. Batch norm contributes
//!    `a = 1/sqrt(var + eps)`, `c = -mu/sqrt(var + eps)`; scale contributes
//!    `a = alpha`, `c = beta`.
//! 2. **Normalization before a convolution or fully-connected layer**
//!    (unpadded, ungrouped). The input transform `x_i -> a_i*x_i + c_i`
//!    folds into `W'[:,i,..] = a_i * W[:,i,..]` with the constant response
//!    absorbed into the bias: `b'_o = b_o + sum_i c_i * sum_{y,x} W[o,i,y,x]`.
//!    Padding is excluded because padded zeros do not undergo the input
//!    transform, so the fold would be wrong at the borders (deconvolution
//!    is skipped for the same reason).
//! 3. **Adjacent representation layers.** A pointwise (1x1, stride 1,
//!    unpadded, ungrouped) layer after any ungrouped representation layer
//!    composes into one layer:
//!    `W'[o,i,y,x] = sum_m W2[o,m] * W1[m,i,y,x]`,
//!    `b'_o = sum_m W2[o,m] * b1_m + b2_o`. Applied only when the merged
//!    layer is not more expensive than the pair.
//!
//! The graph pass applies these one rewrite at a time, scanning in
//! topological order (after-patterns first, then before-patterns, then
//! adjacent merges) until a fixed point, so e.g. `conv -> bn -> scale`
//! collapses in two steps. All folds are computed in `f64` and cast back
//! to `f32` once.

use crate::error::{Error, Result};
use crate::flops::layer_flops;
use crate::model::{
    BatchNormParams, LayerKind, LayerSpec, Model, ScaleParams, Shape,
};
use crate::tensor::Tensor4;

/// Per-channel affine transform `y_i = a_i * x_i + c_i` in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAffine {
    pub a: Vec<f64>,
    pub c: Vec<f64>,
}

impl ChannelAffine {
    pub fn channels(&self) -> usize {
        self.a.len()
    }
}

/// Combines optional batch norm and scale (applied in that order) into one
/// per-channel affine. At least one must be present.
pub fn channel_affine(
    bn: Option<&BatchNormParams>,
    sc: Option<&ScaleParams>,
) -> Result<ChannelAffine> {
    let channels = match (bn, sc) {
        (Some(b), _) => b.mu.len(),
        (None, Some(s)) => s.alpha.len(),
        (None, None) => {
            return Err(Error::InvalidArgument("nothing to fuse: no batch norm or scale".into()))
        }
    };
    let mut a = vec![1.0f64; channels];
    let mut c = vec![0.0f64; channels];
    if let Some(b) = bn {
        if b.var.len() != channels {
            return Err(Error::InvalidArgument(format!(
                "batch norm mu/var lengths differ: {} vs {}",
                b.mu.len(),
                b.var.len()
            )));
        }
        for i in 0..channels {
            let denom2 = b.var[i] as f64 + b.eps as f64;
            if denom2 <= 0.0 {
                return Err(Error::Numeric {
                    rows: channels,
                    cols: 1,
                    msg: format!("var + eps = {denom2} is not positive in channel {i}"),
                });
            }
            let denom = denom2.sqrt();
            a[i] = 1.0 / denom;
            c[i] = -(b.mu[i] as f64) / denom;
        }
    }
    if let Some(s) = sc {
        if s.alpha.len() != channels || s.beta.len() != channels {
            return Err(Error::InvalidArgument(format!(
                "scale length {} does not match {channels} channels",
                s.alpha.len()
            )));
        }
        for i in 0..channels {
            // scale(bn(x)) = alpha*(a*x + c) + beta.
            a[i] *= s.alpha[i] as f64;
            c[i] = s.alpha[i] as f64 * c[i] + s.beta[i] as f64;
        }
    }
    Ok(ChannelAffine { a, c })
}

/// Folds a per-output-channel affine applied *after* the layer into its
/// weights and bias. Returns the new `(weight, bias)`; the result always
/// has a bias (zeros absorb the constant term).
pub fn fuse_bn_scale_after(
    w: &Tensor4,
    bias: Option<&Tensor4>,
    bn: Option<&BatchNormParams>,
    sc: Option<&ScaleParams>,
) -> Result<(Tensor4, Tensor4)> {
    let t = channel_affine(bn, sc)?;
    let (c_o, d1, d2, d3) = w.dims();
    if t.channels() != c_o {
        return Err(Error::InvalidArgument(format!(
            "affine has {} channels but layer has c_o={c_o}",
            t.channels()
        )));
    }
    check_bias(bias, c_o)?;
    let mut new_w = vec![0.0f32; w.len()];
    let per_filter = d1 * d2 * d3;
    for o in 0..c_o {
        for j in 0..per_filter {
            let idx = o * per_filter + j;
            new_w[idx] = (t.a[o] * w.as_slice()[idx] as f64) as f32;
        }
    }
    let mut new_b = vec![0.0f32; c_o];
    for o in 0..c_o {
        let b0 = bias.map_or(0.0, |b| b.as_slice()[o] as f64);
        new_b[o] = (t.a[o] * b0 + t.c[o]) as f32;
    }
    Ok((Tensor4::new((c_o, d1, d2, d3), new_w)?, Tensor4::vector(new_b)?))
}

/// Folds a per-input-channel affine applied *before* an unpadded,
/// ungrouped convolution into its weights and bias. The caller is
/// responsible for the pad/group precondition; dims are checked here.
pub fn fuse_bn_scale_before(
    w: &Tensor4,
    bias: Option<&Tensor4>,
    bn: Option<&BatchNormParams>,
    sc: Option<&ScaleParams>,
) -> Result<(Tensor4, Tensor4)> {
    let t = channel_affine(bn, sc)?;
    let (c_o, c_i, k_h, k_w) = w.dims();
    if t.channels() != c_i {
        return Err(Error::InvalidArgument(format!(
            "affine has {} channels but layer has c_i={c_i}",
            t.channels()
        )));
    }
    check_bias(bias, c_o)?;
    let mut new_w = vec![0.0f32; w.len()];
    let mut new_b = vec![0.0f32; c_o];
    for o in 0..c_o {
        let mut extra = 0.0f64;
        for i in 0..c_i {
            let mut kernel_sum = 0.0f64;
            for y in 0..k_h {
                for x in 0..k_w {
                    let idx = w.index(o, i, y, x);
                    let v = w.as_slice()[idx] as f64;
                    new_w[idx] = (t.a[i] * v) as f32;
                    kernel_sum += v;
                }
            }
            extra += t.c[i] * kernel_sum;
        }
        let b0 = bias.map_or(0.0, |b| b.as_slice()[o] as f64);
        new_b[o] = (b0 + extra) as f32;
    }
    Ok((Tensor4::new((c_o, c_i, k_h, k_w), new_w)?, Tensor4::vector(new_b)?))
}

/// As [`fuse_bn_scale_before`] for a fully-connected layer: the affine is
/// per source channel, broadcast over the `spatial = h * w` positions that
/// each channel occupies in the flattened input.
pub fn fuse_bn_scale_before_fc(
    w: &Tensor4,
    bias: Option<&Tensor4>,
    bn: Option<&BatchNormParams>,
    sc: Option<&ScaleParams>,
    spatial: usize,
) -> Result<(Tensor4, Tensor4)> {
    let t = channel_affine(bn, sc)?;
    let (c_o, c_i, _, _) = w.dims();
    if spatial == 0 || c_i % spatial != 0 || c_i / spatial != t.channels() {
        return Err(Error::InvalidArgument(format!(
            "flattened width {c_i} is not {} channels x {spatial} positions",
            t.channels()
        )));
    }
    check_bias(bias, c_o)?;
    let mut new_w = vec![0.0f32; w.len()];
    let mut new_b = vec![0.0f32; c_o];
    for o in 0..c_o {
        let mut extra = 0.0f64;
        for f in 0..c_i {
            let ch = f / spatial;
            let v = w.as_slice()[o * c_i + f] as f64;
            new_w[o * c_i + f] = (t.a[ch] * v) as f32;
            extra += t.c[ch] * v;
        }
        let b0 = bias.map_or(0.0, |b| b.as_slice()[o] as f64);
        new_b[o] = (b0 + extra) as f32;
    }
    Ok((Tensor4::with_ndim((c_o, c_i, 1, 1), w.ndim(), new_w)?, Tensor4::vector(new_b)?))
}

/// Composes a pointwise second layer into a first layer:
/// `W'[o,i,y,x] = sum_m w2[o,m,0,0] * w1[m,i,y,x]` plus the bias chain.
/// Returns `(weight, bias)`; the bias is `None` when neither input layer
/// had one.
pub fn fuse_adjacent(
    w1: &Tensor4,
    b1: Option<&Tensor4>,
    w2: &Tensor4,
    b2: Option<&Tensor4>,
) -> Result<(Tensor4, Option<Tensor4>)> {
    let (c_m, c_i, k_h, k_w) = w1.dims();
    let (c_o, c_m2, k2h, k2w) = w2.dims();
    if (k2h, k2w) != (1, 1) || c_m2 != c_m {
        return Err(Error::InvalidArgument(format!(
            "second layer must be pointwise over {c_m} channels, got dims {:?}",
            w2.dims()
        )));
    }
    check_bias(b1, c_m)?;
    check_bias(b2, c_o)?;
    let per_filter = c_i * k_h * k_w;
    let mut acc = vec![0.0f64; c_o * per_filter];
    for o in 0..c_o {
        for m in 0..c_m {
            let f = w2.get(o, m, 0, 0) as f64;
            if f == 0.0 {
                continue;
            }
            for j in 0..per_filter {
                acc[o * per_filter + j] += f * w1.as_slice()[m * per_filter + j] as f64;
            }
        }
    }
    let new_w: Vec<f32> = acc.iter().map(|&v| v as f32).collect();

    let bias = match (b1, b2) {
        (None, None) => None,
        _ => {
            let mut nb = vec![0.0f32; c_o];
            for o in 0..c_o {
                let mut v = b2.map_or(0.0, |b| b.as_slice()[o] as f64);
                if let Some(b1) = b1 {
                    for m in 0..c_m {
                        v += w2.get(o, m, 0, 0) as f64 * b1.as_slice()[m] as f64;
                    }
                }
                nb[o] = v as f32;
            }
            Some(Tensor4::vector(nb)?)
        }
    };
    Ok((Tensor4::new((c_o, c_i, k_h, k_w), new_w)?, bias))
}

fn check_bias(bias: Option<&Tensor4>, c_o: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.len() != c_o {
            return Err(Error::InvalidArgument(format!(
                "bias length {} does not match c_o {c_o}",
                b.len()
            )));
        }
    }
    Ok(())
}

/// One applied rewrite, for the audit trail.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionEvent {
    /// Which rewrite fired.
    pub pattern: &'static str,
    /// Node that was removed from the graph.
    pub removed: String,
    /// Kind of the removed node.
    pub removed_kind: LayerKind,
    /// Cost of the removed node before fusion.
    pub removed_flops: u64,
    /// Surviving node that absorbed it.
    pub into: String,
}

/// Runs the lossless pass to a fixed point. See the module docs for the
/// rewrite set. The input model must be valid.
pub fn run_lossless_pass(m: &Model) -> Result<Model> {
    Ok(run_lossless_pass_logged(m)?.0)
}

/// As [`run_lossless_pass`], also returning the applied rewrites in order.
pub fn run_lossless_pass_logged(m: &Model) -> Result<(Model, Vec<FusionEvent>)> {
    m.check_valid()?;
    let mut model = m.clone();
    let mut events = Vec::new();
    loop {
        if let Some(ev) = fuse_norm_after_once(&mut model)? {
            events.push(ev);
            continue;
        }
        if let Some(ev) = fuse_norm_before_once(&mut model)? {
            events.push(ev);
            continue;
        }
        if let Some(ev) = fuse_adjacent_once(&mut model)? {
            events.push(ev);
            continue;
        }
        break;
    }
    model.gc_tensors();
    debug_assert!(model.validate().is_empty(), "fusion broke the model");
    Ok((model, events))
}

/// Consumer indices of `edge`, if there is exactly one.
fn sole_consumer(m: &Model, edge: &str) -> Option<usize> {
    let mut found = None;
    for (i, n) in m.nodes.iter().enumerate() {
        for inp in &n.inputs {
            if inp == edge {
                if found.is_some() {
                    return None;
                }
                found = Some(i);
            }
        }
    }
    found
}

/// Replaces the tensor behind `old_ref` if this node is its only user,
/// otherwise stores under a fresh name. Returns the ref to use.
fn upsert_tensor(m: &mut Model, old_ref: Option<&str>, base: String, t: Tensor4) -> String {
    if let Some(old) = old_ref {
        let users = m
            .nodes
            .iter()
            .flat_map(|n| n.weights.iter().chain(n.bias.iter()))
            .filter(|r| r.as_str() == old)
            .count();
        if users == 1 && m.tensors.contains_key(old) {
            m.tensors.insert(old.to_string(), t);
            return old.to_string();
        }
    }
    let name = m.fresh_tensor_name(&base);
    m.tensors.insert(name.clone(), t);
    name
}

fn removed_event(
    m: &Model,
    shapes: &indexmap::IndexMap<String, Shape>,
    pattern: &'static str,
    removed_idx: usize,
    into: &str,
) -> FusionEvent {
    let node = &m.nodes[removed_idx];
    let input_shape = node
        .inputs
        .first()
        .and_then(|e| shapes.get(e))
        .copied()
        .unwrap_or(Shape::new(1, 1, 1));
    FusionEvent {
        pattern,
        removed: node.name.clone(),
        removed_kind: node.spec.kind(),
        removed_flops: layer_flops(&node.spec, input_shape),
        into: into.to_string(),
    }
}

/// representation -> (batch norm | scale), the normalization being the
/// sole consumer: fold into the layer, take over the output edge.
fn fuse_norm_after_once(m: &mut Model) -> Result<Option<FusionEvent>> {
    let order = m.topo_order()?;
    let shapes = m.infer_shapes()?;
    for &idx in &order {
        if !m.nodes[idx].spec.kind().is_representation() {
            continue;
        }
        let Some(norm_idx) = sole_consumer(m, &m.nodes[idx].output.clone()) else {
            continue;
        };
        let norm = &m.nodes[norm_idx];
        let (bn, sc, pattern) = match norm.spec {
            LayerSpec::BatchNorm { .. } => {
                (Some(m.batch_norm_params(norm)?), None, "fold_batch_norm_after")
            }
            LayerSpec::Scale => (None, Some(m.scale_params(norm)?), "fold_scale_after"),
            _ => continue,
        };

        let rep = &m.nodes[idx];
        let w = m.tensor(&rep.weights[0])?;
        let bias = rep.bias.as_deref().map(|b| m.tensor(b)).transpose()?;
        let (new_w, new_b) = fuse_bn_scale_after(w, bias, bn.as_ref(), sc.as_ref())?;

        let event = removed_event(m, &shapes, pattern, norm_idx, &rep.name);
        let rep_name = rep.name.clone();
        let old_w_ref = rep.weights[0].clone();
        let old_b_ref = rep.bias.clone();
        let norm_output = m.nodes[norm_idx].output.clone();

        let w_ref = upsert_tensor(m, Some(&old_w_ref), format!("{rep_name}_w"), new_w);
        let b_ref = upsert_tensor(m, old_b_ref.as_deref(), format!("{rep_name}_b"), new_b);
        let rep = &mut m.nodes[idx];
        rep.weights[0] = w_ref;
        rep.bias = Some(b_ref);
        rep.output = norm_output;
        m.nodes.remove(norm_idx);
        m.gc_tensors();
        return Ok(Some(event));
    }
    Ok(None)
}

/// (batch norm | scale) -> representation layer, the layer being the sole
/// consumer and eligible (convolution: unpadded + ungrouped;
/// fully-connected: always; deconvolution: never).
fn fuse_norm_before_once(m: &mut Model) -> Result<Option<FusionEvent>> {
    let order = m.topo_order()?;
    let shapes = m.infer_shapes()?;
    for &idx in &order {
        let norm = &m.nodes[idx];
        let (bn, sc, pattern) = match norm.spec {
            LayerSpec::BatchNorm { .. } => {
                (Some(m.batch_norm_params(norm)?), None, "fold_batch_norm_before")
            }
            LayerSpec::Scale => (None, Some(m.scale_params(norm)?), "fold_scale_before"),
            _ => continue,
        };
        let Some(rep_idx) = sole_consumer(m, &norm.output) else { continue };
        let rep = &m.nodes[rep_idx];
        let fused = match &rep.spec {
            LayerSpec::Convolution(p) if p.pad_h == 0 && p.pad_w == 0 && p.g == 1 => {
                let w = m.tensor(&rep.weights[0])?;
                let bias = rep.bias.as_deref().map(|b| m.tensor(b)).transpose()?;
                Some(fuse_bn_scale_before(w, bias, bn.as_ref(), sc.as_ref())?)
            }
            LayerSpec::FullyConnected { .. } => {
                let in_shape = shapes[&norm.inputs[0]];
                let w = m.tensor(&rep.weights[0])?;
                let bias = rep.bias.as_deref().map(|b| m.tensor(b)).transpose()?;
                Some(fuse_bn_scale_before_fc(
                    w,
                    bias,
                    bn.as_ref(),
                    sc.as_ref(),
                    in_shape.h * in_shape.w,
                )?)
            }
            _ => None,
        };
        let Some((new_w, new_b)) = fused else { continue };

        let event = removed_event(m, &shapes, pattern, idx, &m.nodes[rep_idx].name);
        let rep_name = m.nodes[rep_idx].name.clone();
        let old_w_ref = m.nodes[rep_idx].weights[0].clone();
        let old_b_ref = m.nodes[rep_idx].bias.clone();
        let norm_input = m.nodes[idx].inputs[0].clone();

        let w_ref = upsert_tensor(m, Some(&old_w_ref), format!("{rep_name}_w"), new_w);
        let b_ref = upsert_tensor(m, old_b_ref.as_deref(), format!("{rep_name}_b"), new_b);
        let rep = &mut m.nodes[rep_idx];
        rep.weights[0] = w_ref;
        rep.bias = Some(b_ref);
        rep.inputs[0] = norm_input;
        m.nodes.remove(idx);
        m.gc_tensors();
        return Ok(Some(event));
    }
    Ok(None)
}

/// representation -> pointwise representation, sole consumer, both
/// ungrouped: merge into one layer when not more expensive.
fn fuse_adjacent_once(m: &mut Model) -> Result<Option<FusionEvent>> {
    let order = m.topo_order()?;
    let shapes = m.infer_shapes()?;
    for &idx in &order {
        let first = &m.nodes[idx];
        let merged_spec = |c_o: usize| -> Option<LayerSpec> {
            match &first.spec {
                LayerSpec::Convolution(p) if p.g == 1 => {
                    Some(LayerSpec::Convolution(crate::model::ConvParams { c_o, ..*p }))
                }
                LayerSpec::Deconvolution(p) if p.g == 1 => {
                    Some(LayerSpec::Deconvolution(crate::model::ConvParams { c_o, ..*p }))
                }
                LayerSpec::FullyConnected { c_i, .. } => {
                    Some(LayerSpec::FullyConnected { c_i: *c_i, c_o })
                }
                _ => None,
            }
        };
        if !first.spec.kind().is_representation() {
            continue;
        }
        let Some(second_idx) = sole_consumer(m, &first.output) else { continue };
        let second = &m.nodes[second_idx];
        let second_pointwise = match &second.spec {
            LayerSpec::Convolution(p) => {
                (p.k_h, p.k_w, p.s_h, p.s_w, p.pad_h, p.pad_w, p.g) == (1, 1, 1, 1, 0, 0, 1)
            }
            LayerSpec::FullyConnected { .. } => {
                matches!(first.spec, LayerSpec::FullyConnected { .. })
            }
            _ => false,
        };
        if !second_pointwise {
            continue;
        }
        let c_o = match &second.spec {
            LayerSpec::Convolution(p) => p.c_o,
            LayerSpec::FullyConnected { c_o, .. } => *c_o,
            _ => unreachable!(),
        };
        let Some(new_spec) = merged_spec(c_o) else { continue };

        // Cost gate: merging must not increase the closed-form cost.
        let first_in = shapes[&first.inputs[0]];
        let second_in = shapes[&first.output];
        let cost_pair = layer_flops(&first.spec, first_in)
            + layer_flops(&second.spec, second_in);
        let cost_merged = layer_flops(&new_spec, first_in);
        if cost_merged > cost_pair {
            continue;
        }

        let w1 = m.tensor(&first.weights[0])?;
        let b1 = first.bias.as_deref().map(|b| m.tensor(b)).transpose()?;
        let w2 = m.tensor(&second.weights[0])?;
        let b2 = second.bias.as_deref().map(|b| m.tensor(b)).transpose()?;
        let (new_w, new_b) = fuse_adjacent(w1, b1, w2, b2)?;

        let event = removed_event(m, &shapes, "merge_adjacent", second_idx, &first.name);
        let first_name = first.name.clone();
        let old_w_ref = first.weights[0].clone();
        let old_b_ref = first.bias.clone();
        let second_output = second.output.clone();

        let w_ref = upsert_tensor(m, Some(&old_w_ref), format!("{first_name}_w"), new_w);
        let b_ref = new_b.map(|b| upsert_tensor(m, old_b_ref.as_deref(), format!("{first_name}_b"), b));
        let first = &mut m.nodes[idx];
        first.spec = new_spec;
        first.weights[0] = w_ref;
        first.bias = b_ref;
        first.output = second_output;
        m.nodes.remove(second_idx);
        m.gc_tensors();
        return Ok(Some(event));
    }
    Ok(None)
}
