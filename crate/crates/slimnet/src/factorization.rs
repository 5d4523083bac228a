//! Low-rank factorizations of representation layers.
//!
//! Each scheme replaces one convolution / deconvolution / fully-connected
//! layer with a short chain of cheaper layers whose composition approximates
//! the original linear map. The rank `b` trades accuracy for arithmetic; at
//! full rank every scheme reproduces the original layer exactly (up to
//! floating-point rounding).
//!
//! Schemes, for an original weight `W` of dims `(c_o, c_i, k_h, k_w)`:
//!
//! * `filter_wise` — SVD of the `(c_o) x (c_i*k_h*k_w)` flattening. First
//!   factor keeps the full kernel with `b` output channels, second is a
//!   pointwise mix up to `c_o`.
//! * `projection_first` — SVD of the `(c_o*k_h*k_w) x (c_i)` flattening.
//!   First factor is a pointwise projection down to `b` channels, second
//!   keeps the full kernel.
//! * `separable` — SVD of the `(c_o*k_h) x (c_i*k_w)` flattening. Splits the
//!   kernel into a horizontal `1 x k_w` pass and a vertical `k_h x 1` pass.
//! * `per_channel` — independent SVD of each input channel's
//!   `(c_o) x (k_h*k_w)` slice; the first factor is a grouped layer with `b`
//!   filters per input channel, the second a pointwise mix.
//! * chains — a `filter_wise` or `projection_first` split whose spatial
//!   factor is then split again by any base scheme.
//!
//! Stride, padding, and the layer kind (convolution vs deconvolution) ride
//! along on the factor that carries the spatial kernel; pointwise factors
//! are plain 1x1 convolutions (fully-connected when the original layer was
//! fully-connected). The original bias always lands on the last factor.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::flops::layer_flops;
use crate::model::{
    conv_output_shape, deconv_output_shape, ConvParams, LayerKind, LayerSpec, Model, Shape,
};
use crate::svd::{explained_variation, svd, truncate, Mat, SvdResult};
use crate::tensor::{flatten, FlattenScheme, Tensor4};

/// A representation layer lifted out of the graph: everything a
/// factorization needs, independent of node wiring.
#[derive(Debug, Clone)]
pub struct RepLayer {
    pub name: String,
    pub kind: LayerKind,
    /// Hyperparameters; fully-connected layers present as a pointwise map
    /// over their flattened input.
    pub params: ConvParams,
    pub weight: Tensor4,
    pub bias: Option<Tensor4>,
    pub input_shape: Shape,
}

impl RepLayer {
    pub fn new(
        name: &str,
        spec: &LayerSpec,
        weight: Tensor4,
        bias: Option<Tensor4>,
        input_shape: Shape,
    ) -> Result<RepLayer> {
        let params = spec.conv_view().ok_or_else(|| {
            Error::InvalidArgument(format!(
                "layer `{name}` ({}) has no weights to factorize",
                spec.kind().label()
            ))
        })?;
        if weight.dims() != params.weight_dims() {
            return Err(Error::InvalidArgument(format!(
                "layer `{name}` weight dims {:?} do not match {:?}",
                weight.dims(),
                params.weight_dims()
            )));
        }
        Ok(RepLayer {
            name: name.to_string(),
            kind: spec.kind(),
            params,
            weight,
            bias,
            input_shape,
        })
    }

    /// Lifts a named node out of a model. `shapes` is the edge-shape map
    /// from [`Model::infer_shapes`].
    pub fn from_node(
        model: &Model,
        shapes: &IndexMap<String, Shape>,
        name: &str,
    ) -> Result<RepLayer> {
        let node = model
            .node(name)
            .ok_or_else(|| Error::Graph(format!("node `{name}` not found")))?;
        let weight = model.tensor(&node.weights[0])?.clone();
        let bias = match &node.bias {
            Some(b) => Some(model.tensor(b)?.clone()),
            None => None,
        };
        let input_shape = *shapes.get(&node.inputs[0]).ok_or_else(|| {
            Error::Graph(format!("no shape for edge `{}`", node.inputs[0]))
        })?;
        RepLayer::new(name, &node.spec, weight, bias, input_shape)
    }

    /// The layer spec this view was lifted from.
    pub fn spec(&self) -> LayerSpec {
        rep_spec(self.kind, self.params)
    }

    pub fn output_shape(&self) -> Result<Shape> {
        next_shape(&self.spec(), self.input_shape)
    }
}

/// Representation-layer spec for a kind and conv-style parameters.
pub(crate) fn rep_spec(kind: LayerKind, p: ConvParams) -> LayerSpec {
    match kind {
        LayerKind::Deconvolution => LayerSpec::Deconvolution(p),
        LayerKind::FullyConnected => LayerSpec::FullyConnected { c_i: p.c_i, c_o: p.c_o },
        _ => LayerSpec::Convolution(p),
    }
}

/// Output shape of a representation layer applied to `input`.
pub fn next_shape(spec: &LayerSpec, input: Shape) -> Result<Shape> {
    match spec {
        LayerSpec::Convolution(p) => conv_output_shape(input, p).map_err(Error::Graph),
        LayerSpec::Deconvolution(p) => deconv_output_shape(input, p).map_err(Error::Graph),
        LayerSpec::FullyConnected { c_i, c_o } => {
            if *c_i != input.elements() {
                return Err(Error::Graph(format!(
                    "fully-connected c_i {c_i} does not match input {input}"
                )));
            }
            Ok(Shape::new(*c_o, 1, 1))
        }
        _ => Err(Error::Graph(format!(
            "`{}` is not a representation layer",
            spec.kind().label()
        ))),
    }
}

/// Base factorization scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FactorKind {
    FilterWise,
    ProjectionFirst,
    Separable,
    PerChannel,
}

impl FactorKind {
    pub const ALL: [FactorKind; 4] = [
        FactorKind::FilterWise,
        FactorKind::ProjectionFirst,
        FactorKind::Separable,
        FactorKind::PerChannel,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            FactorKind::FilterWise => "filter_wise",
            FactorKind::ProjectionFirst => "projection_first",
            FactorKind::Separable => "separable",
            FactorKind::PerChannel => "per_channel",
        }
    }
}

/// A base scheme or a two-step chain (inner split, then the inner spatial
/// factor split again by the outer scheme).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CandidateKind {
    Base(FactorKind),
    Chain { inner: FactorKind, outer: FactorKind },
}

impl CandidateKind {
    pub fn label(&self) -> String {
        match self {
            CandidateKind::Base(k) => k.label().to_string(),
            CandidateKind::Chain { inner, outer } => {
                format!("chain:{}+{}", inner.label(), outer.label())
            }
        }
    }
}

/// One layer of a factorization's replacement chain.
#[derive(Debug, Clone)]
pub struct ReplacementLayer {
    pub spec: LayerSpec,
    pub weight: Tensor4,
    pub bias: Option<Tensor4>,
}

/// A concrete factorization of one layer at fixed rank(s), with its
/// predicted accuracy and cost.
#[derive(Debug, Clone)]
pub struct FactorizationCandidate {
    pub kind: CandidateKind,
    /// One rank for base schemes; `[outer, inner]` for chains.
    pub ranks: Vec<usize>,
    pub replacement: Vec<ReplacementLayer>,
    /// Explained variation `A` retained by the truncation, in `[0, 1]`.
    /// Chains multiply the two steps' values.
    pub accuracy: f64,
    pub flops_before: u64,
    pub flops_after: u64,
}

impl FactorizationCandidate {
    /// Runtime gain `R = max(0, 1 - after/before)`.
    pub fn runtime_gain(&self) -> f64 {
        if self.flops_before == 0 {
            return 0.0;
        }
        (1.0 - self.flops_after as f64 / self.flops_before as f64).max(0.0)
    }

    /// Selection score `S = p*A + (1-p)*R`.
    pub fn score(&self, p: f64) -> f64 {
        p * self.accuracy + (1.0 - p) * self.runtime_gain()
    }

    pub fn reduces_flops(&self) -> bool {
        self.flops_after < self.flops_before
    }

    /// Channel widths of the activations between replacement layers (the
    /// `c_o` of every layer but the last).
    pub fn intermediate_channels(&self) -> Vec<usize> {
        self.replacement[..self.replacement.len() - 1]
            .iter()
            .filter_map(|r| r.spec.conv_view().map(|p| p.c_o))
            .collect()
    }
}

/// Largest admissible rank for a scheme on a layer.
pub fn max_rank(layer: &RepLayer, kind: FactorKind) -> usize {
    let p = &layer.params;
    match kind {
        FactorKind::FilterWise => p.c_o.min(p.c_i * p.k_h * p.k_w),
        FactorKind::ProjectionFirst => (p.c_o * p.k_h * p.k_w).min(p.c_i),
        FactorKind::Separable => (p.c_o * p.k_h).min(p.c_i * p.k_w),
        FactorKind::PerChannel => p.c_o.min(p.k_h * p.k_w),
    }
}

fn check_applicable(layer: &RepLayer, kind: FactorKind) -> Result<()> {
    let p = &layer.params;
    if p.g > 1 {
        return Err(Error::NotApplicable(format!(
            "layer `{}` is grouped (g = {}); grouped layers are not factorized",
            layer.name, p.g
        )));
    }
    match kind {
        FactorKind::Separable if p.k_h * p.k_w == 1 => Err(Error::NotApplicable(format!(
            "separable split needs a spatial kernel; `{}` is 1x1",
            layer.name
        ))),
        FactorKind::PerChannel if layer.kind == LayerKind::FullyConnected => {
            Err(Error::NotApplicable(
                "per-channel split does not apply to fully-connected layers".into(),
            ))
        }
        _ => Ok(()),
    }
}

/// Precomputed SVD(s) of one flattening of a layer's weight, shared across
/// ranks during enumeration.
enum Decomposition {
    Whole(SvdResult),
    PerSlice(Vec<SvdResult>),
}

fn decompose(layer: &RepLayer, kind: FactorKind) -> Result<Decomposition> {
    check_applicable(layer, kind)?;
    let scheme = match kind {
        FactorKind::FilterWise => FlattenScheme::FilterWise,
        FactorKind::ProjectionFirst => FlattenScheme::ProjectionFirst,
        FactorKind::Separable => FlattenScheme::Separable,
        FactorKind::PerChannel => {
            let mut slices = Vec::with_capacity(layer.params.c_i);
            for i in 0..layer.params.c_i {
                slices.push(svd(&flatten(&layer.weight, FlattenScheme::PerChannelSlice(i))?)?);
            }
            return Ok(Decomposition::PerSlice(slices));
        }
    };
    Ok(Decomposition::Whole(svd(&flatten(&layer.weight, scheme)?)?))
}

fn build_with(
    layer: &RepLayer,
    kind: FactorKind,
    dec: &Decomposition,
    b: usize,
) -> Result<FactorizationCandidate> {
    match (kind, dec) {
        (FactorKind::FilterWise, Decomposition::Whole(s)) => filter_wise_with(layer, s, b),
        (FactorKind::ProjectionFirst, Decomposition::Whole(s)) => {
            projection_first_with(layer, s, b)
        }
        (FactorKind::Separable, Decomposition::Whole(s)) => separable_with(layer, s, b),
        (FactorKind::PerChannel, Decomposition::PerSlice(v)) => per_channel_with(layer, v, b),
        _ => Err(Error::Graph("decomposition does not match factor kind".into())),
    }
}

/// Splits `layer` with the given base scheme at rank `b`.
pub fn factorize(layer: &RepLayer, kind: FactorKind, b: usize) -> Result<FactorizationCandidate> {
    let dec = decompose(layer, kind)?;
    build_with(layer, kind, &dec, b)
}

/// One scheme at every grid rank, sharing a single decomposition.
pub fn enumerate_kind(
    layer: &RepLayer,
    kind: FactorKind,
    grid: RankGrid,
) -> Result<Vec<FactorizationCandidate>> {
    let dec = decompose(layer, kind)?;
    grid.ranks(max_rank(layer, kind))
        .into_iter()
        .map(|b| build_with(layer, kind, &dec, b))
        .collect()
}

pub fn filter_wise(layer: &RepLayer, b: usize) -> Result<FactorizationCandidate> {
    factorize(layer, FactorKind::FilterWise, b)
}

pub fn projection_first(layer: &RepLayer, b: usize) -> Result<FactorizationCandidate> {
    factorize(layer, FactorKind::ProjectionFirst, b)
}

pub fn separable(layer: &RepLayer, b: usize) -> Result<FactorizationCandidate> {
    factorize(layer, FactorKind::Separable, b)
}

pub fn per_channel(layer: &RepLayer, b: usize) -> Result<FactorizationCandidate> {
    factorize(layer, FactorKind::PerChannel, b)
}

fn mat_to_f32(m: &Mat) -> Vec<f32> {
    m.data.iter().map(|&v| v as f32).collect()
}

/// Spec for a factor that carries the original spatial kernel.
fn kinded_spec(kind: LayerKind, p: ConvParams) -> LayerSpec {
    match kind {
        LayerKind::Deconvolution => LayerSpec::Deconvolution(p),
        _ => LayerSpec::Convolution(p),
    }
}

/// Spec for a pointwise mixing factor: fully-connected stays
/// fully-connected, everything else becomes a 1x1 convolution.
pub(crate) fn mixing_spec(kind: LayerKind, c_o: usize, c_i: usize) -> LayerSpec {
    if kind == LayerKind::FullyConnected {
        LayerSpec::FullyConnected { c_i, c_o }
    } else {
        LayerSpec::Convolution(ConvParams::pointwise(c_o, c_i))
    }
}

fn filter_wise_with(
    layer: &RepLayer,
    dec: &SvdResult,
    b: usize,
) -> Result<FactorizationCandidate> {
    let p = layer.params;
    let (left, right) = truncate(dec, b)?;
    // right is (b) x (c_i*k_h*k_w): identical row-major layout to the
    // (b, c_i, k_h, k_w) kernel tensor.
    let w1 = Tensor4::new((b, p.c_i, p.k_h, p.k_w), mat_to_f32(&right))?;
    // left is (c_o) x (b): the pointwise mix.
    let w2 = Tensor4::new((p.c_o, b, 1, 1), mat_to_f32(&left))?;
    let spec1 = if layer.kind == LayerKind::FullyConnected {
        LayerSpec::FullyConnected { c_i: p.c_i, c_o: b }
    } else {
        kinded_spec(layer.kind, ConvParams { c_o: b, g: 1, ..p })
    };
    let spec2 = mixing_spec(layer.kind, p.c_o, b);
    let replacement = vec![
        ReplacementLayer { spec: spec1, weight: w1, bias: None },
        ReplacementLayer { spec: spec2, weight: w2, bias: layer.bias.clone() },
    ];
    let a = explained_variation(dec, b)?;
    build_candidate(layer, CandidateKind::Base(FactorKind::FilterWise), vec![b], a, replacement)
}

fn projection_first_with(
    layer: &RepLayer,
    dec: &SvdResult,
    b: usize,
) -> Result<FactorizationCandidate> {
    let p = layer.params;
    let (left, right) = truncate(dec, b)?;
    // right is (b) x (c_i): the pointwise projection.
    let w1 = Tensor4::new((b, p.c_i, 1, 1), mat_to_f32(&right))?;
    // left is (c_o*k_h*k_w) x (b): permute into the (c_o, b, k_h, k_w)
    // kernel tensor.
    let mut w2 = Tensor4::zeros((p.c_o, b, p.k_h, p.k_w))?;
    for o in 0..p.c_o {
        for m in 0..b {
            for y in 0..p.k_h {
                for x in 0..p.k_w {
                    let v = left.get((o * p.k_h + y) * p.k_w + x, m);
                    w2.set(o, m, y, x, v as f32);
                }
            }
        }
    }
    let spec1 = mixing_spec(layer.kind, b, p.c_i);
    let spec2 = if layer.kind == LayerKind::FullyConnected {
        LayerSpec::FullyConnected { c_i: b, c_o: p.c_o }
    } else {
        kinded_spec(layer.kind, ConvParams { c_i: b, g: 1, ..p })
    };
    let replacement = vec![
        ReplacementLayer { spec: spec1, weight: w1, bias: None },
        ReplacementLayer { spec: spec2, weight: w2, bias: layer.bias.clone() },
    ];
    let a = explained_variation(dec, b)?;
    build_candidate(
        layer,
        CandidateKind::Base(FactorKind::ProjectionFirst),
        vec![b],
        a,
        replacement,
    )
}

fn separable_with(layer: &RepLayer, dec: &SvdResult, b: usize) -> Result<FactorizationCandidate> {
    let p = layer.params;
    let (left, right) = truncate(dec, b)?;
    // right is (b) x (c_i*k_w): a horizontal 1 x k_w pass, identical
    // row-major layout to (b, c_i, 1, k_w).
    let w1 = Tensor4::new((b, p.c_i, 1, p.k_w), mat_to_f32(&right))?;
    // left is (c_o*k_h) x (b): permute into the vertical k_h x 1 pass.
    let mut w2 = Tensor4::zeros((p.c_o, b, p.k_h, 1))?;
    for o in 0..p.c_o {
        for m in 0..b {
            for y in 0..p.k_h {
                w2.set(o, m, y, 0, left.get(o * p.k_h + y, m) as f32);
            }
        }
    }
    // The horizontal pass applies the original horizontal stride/pad, the
    // vertical pass the vertical stride/pad.
    let spec1 = kinded_spec(
        layer.kind,
        ConvParams {
            c_o: b,
            c_i: p.c_i,
            k_h: 1,
            k_w: p.k_w,
            s_h: 1,
            s_w: p.s_w,
            pad_h: 0,
            pad_w: p.pad_w,
            g: 1,
        },
    );
    let spec2 = kinded_spec(
        layer.kind,
        ConvParams {
            c_o: p.c_o,
            c_i: b,
            k_h: p.k_h,
            k_w: 1,
            s_h: p.s_h,
            s_w: 1,
            pad_h: p.pad_h,
            pad_w: 0,
            g: 1,
        },
    );
    let replacement = vec![
        ReplacementLayer { spec: spec1, weight: w1, bias: None },
        ReplacementLayer { spec: spec2, weight: w2, bias: layer.bias.clone() },
    ];
    let a = explained_variation(dec, b)?;
    build_candidate(layer, CandidateKind::Base(FactorKind::Separable), vec![b], a, replacement)
}

fn per_channel_with(
    layer: &RepLayer,
    decs: &[SvdResult],
    b: usize,
) -> Result<FactorizationCandidate> {
    let p = layer.params;
    // Grouped first factor: b filters per input channel, each seeing only
    // its own channel.
    let mut w1 = Tensor4::zeros((b * p.c_i, 1, p.k_h, p.k_w))?;
    let mut w2 = Tensor4::zeros((p.c_o, b * p.c_i, 1, 1))?;
    let mut acc = 0.0f64;
    for (i, dec) in decs.iter().enumerate() {
        let (left, right) = truncate(dec, b)?;
        for m in 0..b {
            for y in 0..p.k_h {
                for x in 0..p.k_w {
                    w1.set(i * b + m, 0, y, x, right.get(m, y * p.k_w + x) as f32);
                }
            }
            for o in 0..p.c_o {
                w2.set(o, i * b + m, 0, 0, left.get(o, m) as f32);
            }
        }
        acc += explained_variation(dec, b)?;
    }
    let a = acc / p.c_i as f64;
    let spec1 = kinded_spec(
        layer.kind,
        ConvParams { c_o: b * p.c_i, g: p.c_i, ..p },
    );
    let spec2 = mixing_spec(layer.kind, p.c_o, b * p.c_i);
    let replacement = vec![
        ReplacementLayer { spec: spec1, weight: w1, bias: None },
        ReplacementLayer { spec: spec2, weight: w2, bias: layer.bias.clone() },
    ];
    build_candidate(layer, CandidateKind::Base(FactorKind::PerChannel), vec![b], a, replacement)
}

fn check_chain_applicable(layer: &RepLayer, inner: FactorKind) -> Result<()> {
    check_applicable(layer, inner)?;
    if layer.params.k_h * layer.params.k_w == 1 {
        return Err(Error::NotApplicable(format!(
            "chained split needs a spatial kernel; `{}` is 1x1",
            layer.name
        )));
    }
    if !matches!(inner, FactorKind::FilterWise | FactorKind::ProjectionFirst) {
        return Err(Error::NotApplicable(format!(
            "chain inner step must be filter_wise or projection_first, got {}",
            inner.label()
        )));
    }
    Ok(())
}

/// The spatial factor of an inner split, viewed as a layer in its own right
/// so the outer split can be applied to it.
fn spatial_rep_of(
    layer: &RepLayer,
    inner: FactorKind,
    inner_cand: &FactorizationCandidate,
) -> Result<RepLayer> {
    let (idx, input_shape) = match inner {
        FactorKind::FilterWise => (0, layer.input_shape),
        FactorKind::ProjectionFirst => {
            (1, next_shape(&inner_cand.replacement[0].spec, layer.input_shape)?)
        }
        _ => return Err(Error::Graph("chain inner step has no spatial factor".into())),
    };
    let repl = &inner_cand.replacement[idx];
    RepLayer::new(
        &format!("{}#spatial", layer.name),
        &repl.spec,
        repl.weight.clone(),
        repl.bias.clone(),
        input_shape,
    )
}

fn splice_chain(
    layer: &RepLayer,
    inner: FactorKind,
    b2: usize,
    inner_cand: &FactorizationCandidate,
    outer: FactorKind,
    b1: usize,
    outer_cand: &FactorizationCandidate,
) -> Result<FactorizationCandidate> {
    let mut replacement = Vec::with_capacity(outer_cand.replacement.len() + 1);
    match inner {
        // Inner kept kernel first: the outer split replaces that kernel
        // factor, then the inner pointwise mix follows.
        FactorKind::FilterWise => {
            replacement.extend(outer_cand.replacement.iter().cloned());
            replacement.push(inner_cand.replacement[1].clone());
        }
        // Inner projected first: keep the projection, then the outer split
        // of the kernel factor.
        FactorKind::ProjectionFirst => {
            replacement.push(inner_cand.replacement[0].clone());
            replacement.extend(outer_cand.replacement.iter().cloned());
        }
        _ => return Err(Error::Graph("chain inner step has no spatial factor".into())),
    }
    build_candidate(
        layer,
        CandidateKind::Chain { inner, outer },
        vec![b1, b2],
        inner_cand.accuracy * outer_cand.accuracy,
        replacement,
    )
}

/// Two-step split: `inner` at rank `b2`, then `outer` at rank `b1` applied
/// to the inner split's spatial factor.
pub fn chain(
    layer: &RepLayer,
    outer: FactorKind,
    b1: usize,
    inner: FactorKind,
    b2: usize,
) -> Result<FactorizationCandidate> {
    check_chain_applicable(layer, inner)?;
    let dec = decompose(layer, inner)?;
    let inner_cand = build_with(layer, inner, &dec, b2)?;
    let spatial = spatial_rep_of(layer, inner, &inner_cand)?;
    let odec = decompose(&spatial, outer)?;
    let outer_cand = build_with(&spatial, outer, &odec, b1)?;
    splice_chain(layer, inner, b2, &inner_cand, outer, b1, &outer_cand)
}

fn build_candidate(
    layer: &RepLayer,
    kind: CandidateKind,
    ranks: Vec<usize>,
    accuracy: f64,
    replacement: Vec<ReplacementLayer>,
) -> Result<FactorizationCandidate> {
    let flops_before = layer_flops(&layer.spec(), layer.input_shape);
    let mut shape = layer.input_shape;
    let mut flops_after = 0u64;
    for r in &replacement {
        flops_after = flops_after.saturating_add(layer_flops(&r.spec, shape));
        shape = next_shape(&r.spec, shape)?;
    }
    let expected = layer.output_shape()?;
    if shape != expected {
        return Err(Error::Graph(format!(
            "replacement chain for `{}` produces {shape}, expected {expected}",
            layer.name
        )));
    }
    Ok(FactorizationCandidate { kind, ranks, replacement, accuracy, flops_before, flops_after })
}

/// Hardware the optimized model is meant for. GPUs only benefit when the
/// intermediate activations have power-of-two channel counts, so candidate
/// enumeration filters on that.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Cpu,
    Gpu,
}

impl Target {
    pub fn label(&self) -> &'static str {
        match self {
            Target::Cpu => "cpu",
            Target::Gpu => "gpu",
        }
    }
}

/// Which ranks to try per scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankGrid {
    /// 1, 2, 4, ... plus the maximum itself.
    PowersOfTwo,
    /// n, 2n, 3n, ... plus the maximum itself.
    Step(usize),
}

impl RankGrid {
    /// Candidate ranks in ascending order, always ending at `max`.
    pub fn ranks(&self, max: usize) -> Vec<usize> {
        if max == 0 {
            return Vec::new();
        }
        let mut v = Vec::new();
        match self {
            RankGrid::PowersOfTwo => {
                let mut b = 1usize;
                while b <= max {
                    v.push(b);
                    b *= 2;
                }
            }
            RankGrid::Step(n) => {
                let n = (*n).max(1);
                let mut b = n;
                while b <= max {
                    v.push(b);
                    b += n;
                }
            }
        }
        if v.last() != Some(&max) {
            v.push(max);
        }
        v
    }

    pub fn label(&self) -> String {
        match self {
            RankGrid::PowersOfTwo => "powers_of_two".into(),
            RankGrid::Step(n) => format!("step:{n}"),
        }
    }
}

/// Search-space limits for candidate enumeration.
#[derive(Debug, Clone, Copy)]
pub struct EnumerationConstraints {
    /// Accuracy-vs-speed weight in `[0, 1]`, used to order the result.
    pub p: f64,
    pub target: Target,
    pub grid: RankGrid,
    /// Maximum split depth: 1 tries base schemes only, 2 also tries chains.
    pub max_chain: usize,
}

/// All admissible factorizations of a layer: every applicable scheme at
/// every grid rank, chains included, keeping only candidates that strictly
/// reduce FLOPs (and, for GPU targets, whose intermediate channel counts
/// are powers of two). Sorted by score (descending), then cost, then label,
/// then ranks, so the order is deterministic.
pub fn enumerate_candidates(
    layer: &RepLayer,
    cons: &EnumerationConstraints,
) -> Result<Vec<FactorizationCandidate>> {
    let mut out = Vec::new();
    if layer.params.g > 1 {
        return Ok(out);
    }
    for kind in FactorKind::ALL {
        if check_applicable(layer, kind).is_err() {
            continue;
        }
        let dec = decompose(layer, kind)?;
        let ranks = RankGrid::ranks(&cons.grid, max_rank(layer, kind));
        for &b in &ranks {
            out.push(build_with(layer, kind, &dec, b)?);
        }
        if cons.max_chain >= 2 && check_chain_applicable(layer, kind).is_ok() {
            for &b2 in &ranks {
                let inner_cand = build_with(layer, kind, &dec, b2)?;
                let spatial = spatial_rep_of(layer, kind, &inner_cand)?;
                for outer in FactorKind::ALL {
                    if check_applicable(&spatial, outer).is_err() {
                        continue;
                    }
                    let odec = decompose(&spatial, outer)?;
                    for b1 in cons.grid.ranks(max_rank(&spatial, outer)) {
                        let outer_cand = build_with(&spatial, outer, &odec, b1)?;
                        out.push(splice_chain(
                            layer,
                            kind,
                            b2,
                            &inner_cand,
                            outer,
                            b1,
                            &outer_cand,
                        )?);
                    }
                }
            }
        }
    }
    out.retain(|c| c.reduces_flops());
    if cons.target == Target::Gpu {
        out.retain(|c| c.intermediate_channels().iter().all(|n| n.is_power_of_two()));
    }
    sort_candidates(&mut out, cons.p);
    Ok(out)
}

/// Deterministic candidate order: score descending, then fewer FLOPs, then
/// scheme label, then ranks.
pub fn candidate_order(
    a: &FactorizationCandidate,
    b: &FactorizationCandidate,
    p: f64,
) -> std::cmp::Ordering {
    b.score(p)
        .partial_cmp(&a.score(p))
        .unwrap_or(std::cmp::Ordering::Equal)
        .then_with(|| a.flops_after.cmp(&b.flops_after))
        .then_with(|| a.kind.label().cmp(&b.kind.label()))
        .then_with(|| a.ranks.cmp(&b.ranks))
}

pub fn sort_candidates(cands: &mut [FactorizationCandidate], p: f64) {
    cands.sort_by(|a, b| candidate_order(a, b, p));
}
