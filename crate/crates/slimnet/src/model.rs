//! In-memory model representation: a DAG of named layers over named
//! activation edges, plus a tensor store for weights.
//!
//! Representation layers (convolution, deconvolution, fully-connected) are
//! the ones the optimizer rewrites; everything else (batch norm, scale,
//! relu, pooling, eltwise add) is either folded away losslessly or passed
//! through untouched.

use indexmap::IndexMap;

use crate::error::{Error, Result, Violation};
use crate::tensor::Tensor4;

/// Activation shape `(c, h, w)`; a single sample, no batch dim.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Shape { c, h, w }
    }

    pub fn elements(&self) -> usize {
        self.c * self.h * self.w
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

/// Layer tag without parameters, used in reports and cost tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Input,
    Convolution,
    Deconvolution,
    FullyConnected,
    BatchNorm,
    Scale,
    ReLU,
    Pooling,
    EltwiseAdd,
}

impl LayerKind {
    pub fn label(&self) -> &'static str {
        match self {
            LayerKind::Input => "input",
            LayerKind::Convolution => "convolution",
            LayerKind::Deconvolution => "deconvolution",
            LayerKind::FullyConnected => "fully_connected",
            LayerKind::BatchNorm => "batch_norm",
            LayerKind::Scale => "scale",
            LayerKind::ReLU => "relu",
            LayerKind::Pooling => "pooling",
            LayerKind::EltwiseAdd => "eltwise_add",
        }
    }

    /// Layers that carry a learned linear map and are candidates for
    /// fusion and factorization.
    pub fn is_representation(&self) -> bool {
        matches!(
            self,
            LayerKind::Convolution | LayerKind::Deconvolution | LayerKind::FullyConnected
        )
    }
}

/// Convolution/deconvolution hyperparameters. The weight tensor has dims
/// `(c_o, c_i / g, k_h, k_w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvParams {
    pub c_o: usize,
    pub c_i: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub s_h: usize,
    pub s_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub g: usize,
}

impl ConvParams {
    /// 1x1, stride 1, no padding, ungrouped.
    pub fn pointwise(c_o: usize, c_i: usize) -> Self {
        ConvParams { c_o, c_i, k_h: 1, k_w: 1, s_h: 1, s_w: 1, pad_h: 0, pad_w: 0, g: 1 }
    }

    /// Square kernel with common stride/pad, ungrouped.
    pub fn square(c_o: usize, c_i: usize, k: usize, s: usize, pad: usize) -> Self {
        ConvParams { c_o, c_i, k_h: k, k_w: k, s_h: s, s_w: s, pad_h: pad, pad_w: pad, g: 1 }
    }

    pub fn weight_dims(&self) -> (usize, usize, usize, usize) {
        (self.c_o, self.c_i / self.g.max(1), self.k_h, self.k_w)
    }
}

/// Pooling window operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolParams {
    pub mode: PoolMode,
    pub k_h: usize,
    pub k_w: usize,
    pub s_h: usize,
    pub s_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

/// A layer and its typed parameters. Parameter tensors (conv weights, batch
/// norm statistics, scale coefficients) live in the model tensor store and
/// are referenced by name from the node.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    /// Source of the network input; exactly one per model.
    Input,
    /// Weight refs: `[weight]`. Optional bias.
    Convolution(ConvParams),
    /// Transposed convolution. Weight refs: `[weight]`. Optional bias.
    Deconvolution(ConvParams),
    /// Dense layer over the flattened input. Weight dims `(c_o, c_i, 1, 1)`
    /// with `c_i = c * h * w` of the input edge. Weight refs: `[weight]`.
    FullyConnected { c_i: usize, c_o: usize },
    /// Per-channel normalization `(x - mu) / sqrt(var + eps)`.
    /// Weight refs: `[mu, var]`.
    BatchNorm { eps: f32 },
    /// Per-channel affine `alpha * x + beta`. Weight refs: `[alpha, beta]`.
    Scale,
    ReLU,
    Pooling(PoolParams),
    /// Elementwise sum of two or more same-shape inputs.
    EltwiseAdd,
}

impl LayerSpec {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerSpec::Input => LayerKind::Input,
            LayerSpec::Convolution(_) => LayerKind::Convolution,
            LayerSpec::Deconvolution(_) => LayerKind::Deconvolution,
            LayerSpec::FullyConnected { .. } => LayerKind::FullyConnected,
            LayerSpec::BatchNorm { .. } => LayerKind::BatchNorm,
            LayerSpec::Scale => LayerKind::Scale,
            LayerSpec::ReLU => LayerKind::ReLU,
            LayerSpec::Pooling(_) => LayerKind::Pooling,
            LayerSpec::EltwiseAdd => LayerKind::EltwiseAdd,
        }
    }

    /// Convolution-style view of a representation layer; fully-connected
    /// layers present as a 1x1 map over their flattened input.
    pub fn conv_view(&self) -> Option<ConvParams> {
        match self {
            LayerSpec::Convolution(p) | LayerSpec::Deconvolution(p) => Some(*p),
            LayerSpec::FullyConnected { c_i, c_o } => Some(ConvParams::pointwise(*c_o, *c_i)),
            _ => None,
        }
    }
}

/// One node of the model graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    pub spec: LayerSpec,
    /// Names of consumed activation edges (empty for the input node).
    pub inputs: Vec<String>,
    /// Name of the produced activation edge.
    pub output: String,
    /// Parameter tensor refs, meaning depends on the layer kind.
    pub weights: Vec<String>,
    /// Optional bias tensor ref (representation layers only).
    pub bias: Option<String>,
}

/// Resolved batch norm parameters (copied out of the tensor store).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub mu: Vec<f32>,
    pub var: Vec<f32>,
    pub eps: f32,
}

/// Resolved scale parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleParams {
    pub alpha: Vec<f32>,
    pub beta: Vec<f32>,
}

/// A network: input shape, layer nodes, and the weight tensor store.
/// Tensor order in the store is preserved through serialization.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub input_shape: Shape,
    pub nodes: Vec<Node>,
    pub tensors: IndexMap<String, Tensor4>,
}

impl Model {
    pub fn node(&self, name: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor4> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Graph(format!("tensor `{name}` not found")))
    }

    /// Producer node index for each edge name.
    pub fn producers(&self) -> IndexMap<&str, usize> {
        let mut map = IndexMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            map.insert(n.output.as_str(), i);
        }
        map
    }

    /// Consumer node indices for each edge name, in node order.
    pub fn consumers(&self) -> IndexMap<&str, Vec<usize>> {
        let mut map: IndexMap<&str, Vec<usize>> = IndexMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            for inp in &n.inputs {
                map.entry(inp.as_str()).or_default().push(i);
            }
        }
        map
    }

    /// Edges produced but never consumed — the network outputs.
    pub fn terminal_edges(&self) -> Vec<String> {
        let consumed: std::collections::HashSet<&str> =
            self.nodes.iter().flat_map(|n| n.inputs.iter().map(String::as_str)).collect();
        self.nodes
            .iter()
            .filter(|n| !consumed.contains(n.output.as_str()))
            .map(|n| n.output.clone())
            .collect()
    }

    /// Node indices in topological order. Ready nodes are emitted in
    /// ascending name order so the result is unique for a given graph.
    /// Fails on cycles or edges consumed before (or without) a producer.
    pub fn topo_order(&self) -> Result<Vec<usize>> {
        let producers = self.producers();
        if producers.len() != self.nodes.len() {
            return Err(Error::Graph("duplicate edge producer".into()));
        }
        let mut indegree = vec![0usize; self.nodes.len()];
        let mut dependents: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            for inp in &n.inputs {
                match producers.get(inp.as_str()) {
                    Some(&p) => {
                        indegree[i] += 1;
                        dependents[p].push(i);
                    }
                    None => {
                        return Err(Error::Graph(format!(
                            "node `{}` consumes edge `{inp}` which no node produces",
                            n.name
                        )))
                    }
                }
            }
        }
        let mut ready: Vec<usize> =
            (0..self.nodes.len()).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while !ready.is_empty() {
            ready.sort_by(|&a, &b| self.nodes[b].name.cmp(&self.nodes[a].name));
            let next = ready.pop().unwrap();
            order.push(next);
            for &d in &dependents[next] {
                indegree[d] -= 1;
                if indegree[d] == 0 {
                    ready.push(d);
                }
            }
        }
        if order.len() != self.nodes.len() {
            let stuck = self
                .nodes
                .iter()
                .enumerate()
                .filter(|(i, _)| indegree[*i] > 0)
                .map(|(_, n)| n.name.clone())
                .min()
                .unwrap_or_default();
            return Err(Error::Graph(format!("cycle detected involving node `{stuck}`")));
        }
        Ok(order)
    }

    /// Shape of every edge, inferred from the input shape in topological
    /// order. Fails if the graph is invalid or a window does not fit.
    pub fn infer_shapes(&self) -> Result<IndexMap<String, Shape>> {
        let order = self.topo_order()?;
        let mut shapes: IndexMap<String, Shape> = IndexMap::new();
        for idx in order {
            let node = &self.nodes[idx];
            let shape_err = |msg: String| {
                Error::Validation(vec![Violation::new(&node.name, msg)])
            };
            let input_of = |i: usize| -> Result<Shape> {
                let edge = node.inputs.get(i).ok_or_else(|| {
                    shape_err(format!("missing input {i}"))
                })?;
                shapes.get(edge).copied().ok_or_else(|| {
                    shape_err(format!("input edge `{edge}` has no inferred shape"))
                })
            };
            let out = match &node.spec {
                LayerSpec::Input => self.input_shape,
                LayerSpec::Convolution(p) => {
                    let s = input_of(0)?;
                    conv_output_shape(s, p).map_err(|m| shape_err(m))?
                }
                LayerSpec::Deconvolution(p) => {
                    let s = input_of(0)?;
                    deconv_output_shape(s, p).map_err(|m| shape_err(m))?
                }
                LayerSpec::FullyConnected { c_i, c_o } => {
                    let s = input_of(0)?;
                    if s.elements() != *c_i {
                        return Err(shape_err(format!(
                            "fully-connected c_i={c_i} does not match flattened input {s} ({})",
                            s.elements()
                        )));
                    }
                    Shape::new(*c_o, 1, 1)
                }
                LayerSpec::Pooling(p) => {
                    let s = input_of(0)?;
                    pool_output_shape(s, p).map_err(|m| shape_err(m))?
                }
                LayerSpec::BatchNorm { .. } | LayerSpec::Scale | LayerSpec::ReLU => input_of(0)?,
                LayerSpec::EltwiseAdd => {
                    let first = input_of(0)?;
                    for i in 1..node.inputs.len() {
                        let s = input_of(i)?;
                        if s != first {
                            return Err(shape_err(format!(
                                "eltwise inputs disagree: {first} vs {s}"
                            )));
                        }
                    }
                    first
                }
            };
            shapes.insert(node.output.clone(), out);
        }
        Ok(shapes)
    }

    /// Normalized depth of a representation layer: 0 for the first
    /// representation layer in topological order, 1 for the last, linear in
    /// between. A model with a single representation layer yields 0.
    pub fn depth_fraction(&self, name: &str) -> Result<f64> {
        let order = self.topo_order()?;
        let reps: Vec<&str> = order
            .iter()
            .map(|&i| &self.nodes[i])
            .filter(|n| n.spec.kind().is_representation())
            .map(|n| n.name.as_str())
            .collect();
        let pos = reps.iter().position(|&n| n == name).ok_or_else(|| {
            Error::InvalidArgument(format!("`{name}` is not a representation layer"))
        })?;
        if reps.len() == 1 {
            return Ok(0.0);
        }
        Ok(pos as f64 / (reps.len() - 1) as f64)
    }

    /// Resolves batch norm statistics for a node.
    pub fn batch_norm_params(&self, node: &Node) -> Result<BatchNormParams> {
        match node.spec {
            LayerSpec::BatchNorm { eps } => {
                let mu = self.tensor(&node.weights[0])?.as_slice().to_vec();
                let var = self.tensor(&node.weights[1])?.as_slice().to_vec();
                Ok(BatchNormParams { mu, var, eps })
            }
            _ => Err(Error::InvalidArgument(format!(
                "node `{}` is not a batch norm layer",
                node.name
            ))),
        }
    }

    /// Resolves scale coefficients for a node.
    pub fn scale_params(&self, node: &Node) -> Result<ScaleParams> {
        match node.spec {
            LayerSpec::Scale => {
                let alpha = self.tensor(&node.weights[0])?.as_slice().to_vec();
                let beta = self.tensor(&node.weights[1])?.as_slice().to_vec();
                Ok(ScaleParams { alpha, beta })
            }
            _ => Err(Error::InvalidArgument(format!(
                "node `{}` is not a scale layer",
                node.name
            ))),
        }
    }

    /// Checks every structural invariant and returns all violations found
    /// (empty = valid). Runs shape inference as part of the check.
    pub fn validate(&self) -> Vec<Violation> {
        let mut v = Vec::new();

        if self.input_shape.c == 0 || self.input_shape.h == 0 || self.input_shape.w == 0 {
            v.push(Violation::global(format!(
                "input shape {} has a zero dim",
                self.input_shape
            )));
        }

        // Unique node names, unique edge producers, exactly one input node.
        let mut names = std::collections::HashSet::new();
        let mut outputs = std::collections::HashSet::new();
        let mut input_nodes = 0;
        for n in &self.nodes {
            if !names.insert(n.name.as_str()) {
                v.push(Violation::new(&n.name, "duplicate node name"));
            }
            if !outputs.insert(n.output.as_str()) {
                v.push(Violation::new(&n.name, format!("edge `{}` has two producers", n.output)));
            }
            if matches!(n.spec, LayerSpec::Input) {
                input_nodes += 1;
            }
        }
        if input_nodes != 1 {
            v.push(Violation::global(format!(
                "model must have exactly one input node, found {input_nodes}"
            )));
        }

        for n in &self.nodes {
            self.validate_node(n, &mut v);
        }

        // Graph-level checks piggyback on shape inference; skip if node
        // checks already failed badly enough that inference would cascade.
        match self.infer_shapes() {
            Ok(shapes) => {
                for n in &self.nodes {
                    self.validate_node_shapes(n, &shapes, &mut v);
                }
            }
            Err(Error::Validation(inner)) => v.extend(inner),
            Err(e) => v.push(Violation::global(e.to_string())),
        }
        v
    }

    fn validate_node(&self, n: &Node, v: &mut Vec<Violation>) {
        let mut complain = |msg: String| v.push(Violation::new(&n.name, msg));
        let arity = |want: usize| n.inputs.len() == want;
        let weight_count = |want: usize, v: &mut Vec<Violation>| {
            if n.weights.len() != want {
                v.push(Violation::new(
                    &n.name,
                    format!("expected {want} weight refs, found {}", n.weights.len()),
                ));
                false
            } else {
                true
            }
        };
        let tensor_ok = |name: &str, v: &mut Vec<Violation>| -> Option<&Tensor4> {
            match self.tensors.get(name) {
                Some(t) => Some(t),
                None => {
                    v.push(Violation::new(&n.name, format!("missing tensor `{name}`")));
                    None
                }
            }
        };

        match &n.spec {
            LayerSpec::Input => {
                if !n.inputs.is_empty() {
                    complain("input node must not consume edges".into());
                }
                if !n.weights.is_empty() || n.bias.is_some() {
                    complain("input node must not reference tensors".into());
                }
            }
            LayerSpec::Convolution(p) | LayerSpec::Deconvolution(p) => {
                if !arity(1) {
                    complain(format!("expected 1 input, found {}", n.inputs.len()));
                }
                validate_conv_params(p, n, v);
                if weight_count(1, v) {
                    if let Some(t) = tensor_ok(&n.weights[0], v) {
                        let want = p.weight_dims();
                        if t.dims() != want {
                            v.push(Violation::new(
                                &n.name,
                                format!("weight dims {:?} do not match params {want:?}", t.dims()),
                            ));
                        }
                    }
                }
                self.validate_bias(n, p.c_o, v);
            }
            LayerSpec::FullyConnected { c_i, c_o } => {
                if !arity(1) {
                    complain(format!("expected 1 input, found {}", n.inputs.len()));
                }
                if *c_i == 0 || *c_o == 0 {
                    complain("fully-connected dims must be nonzero".into());
                }
                if weight_count(1, v) {
                    if let Some(t) = tensor_ok(&n.weights[0], v) {
                        if t.dims() != (*c_o, *c_i, 1, 1) {
                            v.push(Violation::new(
                                &n.name,
                                format!(
                                    "weight dims {:?} do not match ({c_o}, {c_i}, 1, 1)",
                                    t.dims()
                                ),
                            ));
                        }
                    }
                }
                self.validate_bias(n, *c_o, v);
            }
            LayerSpec::BatchNorm { eps } => {
                if !arity(1) {
                    complain(format!("expected 1 input, found {}", n.inputs.len()));
                }
                if !(*eps > 0.0) {
                    complain(format!("eps must be positive, got {eps}"));
                }
                if n.bias.is_some() {
                    complain("batch norm does not take a bias ref".into());
                }
                if weight_count(2, v) {
                    let mu = tensor_ok(&n.weights[0], v).map(Tensor4::len);
                    if let Some(var) = tensor_ok(&n.weights[1], v) {
                        if let Some(mu_len) = mu {
                            if mu_len != var.len() {
                                v.push(Violation::new(
                                    &n.name,
                                    format!("mu length {mu_len} != var length {}", var.len()),
                                ));
                            }
                        }
                        if var.as_slice().iter().any(|&x| x < 0.0) {
                            v.push(Violation::new(&n.name, "variance has negative entries"));
                        }
                    }
                }
            }
            LayerSpec::Scale => {
                if !arity(1) {
                    complain(format!("expected 1 input, found {}", n.inputs.len()));
                }
                if n.bias.is_some() {
                    complain("scale does not take a bias ref".into());
                }
                if weight_count(2, v) {
                    let a = tensor_ok(&n.weights[0], v).map(Tensor4::len);
                    if let (Some(al), Some(b)) = (a, tensor_ok(&n.weights[1], v)) {
                        if al != b.len() {
                            v.push(Violation::new(
                                &n.name,
                                format!("alpha length {al} != beta length {}", b.len()),
                            ));
                        }
                    }
                }
            }
            LayerSpec::ReLU => {
                if !arity(1) {
                    complain(format!("expected 1 input, found {}", n.inputs.len()));
                }
                if !n.weights.is_empty() || n.bias.is_some() {
                    complain("relu must not reference tensors".into());
                }
            }
            LayerSpec::Pooling(p) => {
                if !arity(1) {
                    complain(format!("expected 1 input, found {}", n.inputs.len()));
                }
                if !n.weights.is_empty() || n.bias.is_some() {
                    complain("pooling must not reference tensors".into());
                }
                if p.k_h == 0 || p.k_w == 0 || p.s_h == 0 || p.s_w == 0 {
                    complain("pooling window and stride must be nonzero".into());
                }
                if p.pad_h >= p.k_h || p.pad_w >= p.k_w {
                    complain("pooling pad must be smaller than the window".into());
                }
            }
            LayerSpec::EltwiseAdd => {
                if n.inputs.len() < 2 {
                    complain(format!("expected >= 2 inputs, found {}", n.inputs.len()));
                }
                if !n.weights.is_empty() || n.bias.is_some() {
                    complain("eltwise add must not reference tensors".into());
                }
            }
        }
    }

    fn validate_bias(&self, n: &Node, c_o: usize, v: &mut Vec<Violation>) {
        if let Some(b) = &n.bias {
            match self.tensors.get(b) {
                Some(t) => {
                    if t.len() != c_o {
                        v.push(Violation::new(
                            &n.name,
                            format!("bias length {} != c_o {c_o}", t.len()),
                        ));
                    }
                }
                None => v.push(Violation::new(&n.name, format!("missing tensor `{b}`"))),
            }
        }
    }

    /// Shape-dependent checks, run once inference has succeeded.
    fn validate_node_shapes(
        &self,
        n: &Node,
        shapes: &IndexMap<String, Shape>,
        v: &mut Vec<Violation>,
    ) {
        let input_shape = n.inputs.first().and_then(|e| shapes.get(e)).copied();
        let Some(s) = input_shape else { return };
        match &n.spec {
            LayerSpec::Convolution(p) | LayerSpec::Deconvolution(p) => {
                if s.c != p.c_i {
                    v.push(Violation::new(
                        &n.name,
                        format!("input channels {} do not match c_i {}", s.c, p.c_i),
                    ));
                }
            }
            LayerSpec::FullyConnected { c_i, .. } => {
                if s.elements() != *c_i {
                    v.push(Violation::new(
                        &n.name,
                        format!("flattened input {} ({}) != c_i {c_i}", s, s.elements()),
                    ));
                }
            }
            LayerSpec::BatchNorm { .. } | LayerSpec::Scale => {
                if let Some(t) = n.weights.first().and_then(|w| self.tensors.get(w)) {
                    if t.len() != s.c {
                        v.push(Violation::new(
                            &n.name,
                            format!("per-channel tensor length {} != channels {}", t.len(), s.c),
                        ));
                    }
                }
            }
            _ => {}
        }
    }

    /// Asserts validity, turning violations into an error.
    pub fn check_valid(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(v))
        }
    }

    /// Drops tensors no node references (used after graph rewrites).
    pub fn gc_tensors(&mut self) {
        let live: std::collections::HashSet<&str> = self
            .nodes
            .iter()
            .flat_map(|n| n.weights.iter().chain(n.bias.iter()))
            .map(String::as_str)
            .collect();
        self.tensors.retain(|name, _| live.contains(name.as_str()));
    }

    /// A fresh node name: `base` itself if free, else `base_2`, `base_3`, ...
    pub fn fresh_node_name(&self, base: &str) -> String {
        let taken: std::collections::HashSet<&str> =
            self.nodes.iter().map(|n| n.name.as_str()).collect();
        fresh_name(base, |n| !taken.contains(n))
    }

    /// A fresh edge name, avoiding all existing edge names.
    pub fn fresh_edge_name(&self, base: &str) -> String {
        let taken: std::collections::HashSet<&str> = self
            .nodes
            .iter()
            .flat_map(|n| n.inputs.iter().chain(std::iter::once(&n.output)))
            .map(String::as_str)
            .collect();
        fresh_name(base, |n| !taken.contains(n))
    }

    /// A fresh tensor name.
    pub fn fresh_tensor_name(&self, base: &str) -> String {
        fresh_name(base, |n| !self.tensors.contains_key(n))
    }
}

fn fresh_name(base: &str, free: impl Fn(&str) -> bool) -> String {
    if free(base) {
        return base.to_string();
    }
    for i in 2.. {
        let cand = format!("{base}_{i}");
        if free(&cand) {
            return cand;
        }
    }
    unreachable!()
}

fn validate_conv_params(p: &ConvParams, n: &Node, v: &mut Vec<Violation>) {
    let mut complain = |msg: String| v.push(Violation::new(&n.name, msg));
    if p.c_o == 0 || p.c_i == 0 || p.k_h == 0 || p.k_w == 0 || p.s_h == 0 || p.s_w == 0 {
        complain("channels, kernel, and stride must be nonzero".into());
    }
    if p.g == 0 {
        complain("groups must be nonzero".into());
        return;
    }
    if p.c_i % p.g != 0 || p.c_o % p.g != 0 {
        complain(format!(
            "groups {} must divide c_i {} and c_o {}",
            p.g, p.c_i, p.c_o
        ));
    }
}

/// Output spatial extent of a convolution:
/// `h' = floor((h + 2*pad - k) / s) + 1`.
pub fn conv_output_shape(s: Shape, p: &ConvParams) -> std::result::Result<Shape, String> {
    let h_num = (s.h + 2 * p.pad_h).checked_sub(p.k_h);
    let w_num = (s.w + 2 * p.pad_w).checked_sub(p.k_w);
    match (h_num, w_num) {
        (Some(h), Some(w)) => Ok(Shape::new(p.c_o, h / p.s_h + 1, w / p.s_w + 1)),
        _ => Err(format!(
            "kernel {}x{} does not fit input {s} with pad {}x{}",
            p.k_h, p.k_w, p.pad_h, p.pad_w
        )),
    }
}

/// Output spatial extent of a deconvolution:
/// `h' = (h - 1) * s - 2*pad + k`.
pub fn deconv_output_shape(s: Shape, p: &ConvParams) -> std::result::Result<Shape, String> {
    let h = ((s.h - 1) * p.s_h + p.k_h).checked_sub(2 * p.pad_h);
    let w = ((s.w - 1) * p.s_w + p.k_w).checked_sub(2 * p.pad_w);
    match (h, w) {
        (Some(h), Some(w)) if h > 0 && w > 0 => Ok(Shape::new(p.c_o, h, w)),
        _ => Err(format!(
            "deconvolution output collapses for input {s} with pad {}x{}",
            p.pad_h, p.pad_w
        )),
    }
}

/// Pooling uses the convolution output formula over the window.
pub fn pool_output_shape(s: Shape, p: &PoolParams) -> std::result::Result<Shape, String> {
    let h_num = (s.h + 2 * p.pad_h).checked_sub(p.k_h);
    let w_num = (s.w + 2 * p.pad_w).checked_sub(p.k_w);
    match (h_num, w_num) {
        (Some(h), Some(w)) => Ok(Shape::new(s.c, h / p.s_h + 1, w / p.s_w + 1)),
        _ => Err(format!(
            "pooling window {}x{} does not fit input {s} with pad {}x{}",
            p.k_h, p.k_w, p.pad_h, p.pad_w
        )),
    }
}

/// Incremental model construction for tests and fixtures.
pub struct ModelBuilder {
    model: Model,
}

impl ModelBuilder {
    /// Starts a model whose input node is named `input` producing edge
    /// `data`.
    pub fn new(input_shape: Shape) -> Self {
        let model = Model {
            input_shape,
            nodes: vec![Node {
                name: "input".into(),
                spec: LayerSpec::Input,
                inputs: vec![],
                output: "data".into(),
                weights: vec![],
                bias: None,
            }],
            tensors: IndexMap::new(),
        };
        ModelBuilder { model }
    }

    pub fn tensor(mut self, name: &str, t: Tensor4) -> Self {
        self.model.tensors.insert(name.into(), t);
        self
    }

    /// Adds a node producing edge `"{name}_out"`.
    pub fn node(
        mut self,
        name: &str,
        spec: LayerSpec,
        inputs: &[&str],
        weights: &[&str],
        bias: Option<&str>,
    ) -> Self {
        self.model.nodes.push(Node {
            name: name.into(),
            spec,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            output: format!("{name}_out"),
            weights: weights.iter().map(|s| s.to_string()).collect(),
            bias: bias.map(String::from),
        });
        self
    }

    pub fn build(self) -> Model {
        self.model
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_node(name: &str, input: &str, p: ConvParams, weight: &str) -> Node {
        Node {
            name: name.into(),
            spec: LayerSpec::Convolution(p),
            inputs: vec![input.into()],
            output: format!("{name}_out"),
            weights: vec![weight.into()],
            bias: None,
        }
    }

    fn small_model() -> Model {
        let p1 = ConvParams::square(4, 3, 3, 1, 1);
        let p2 = ConvParams::pointwise(2, 4);
        ModelBuilder::new(Shape::new(3, 8, 8))
            .tensor("w1", Tensor4::zeros(p1.weight_dims()).unwrap())
            .tensor("w2", Tensor4::zeros(p2.weight_dims()).unwrap())
            .node("conv1", LayerSpec::Convolution(p1), &["data"], &["w1"], None)
            .node("relu1", LayerSpec::ReLU, &["conv1_out"], &[], None)
            .node("conv2", LayerSpec::Convolution(p2), &["relu1_out"], &["w2"], None)
            .build()
    }

    #[test]
    fn valid_model_passes_validation() {
        let m = small_model();
        let v = m.validate();
        assert!(v.is_empty(), "unexpected violations: {v:?}");
    }

    #[test]
    fn shape_inference_follows_conv_formulas() {
        let m = small_model();
        let shapes = m.infer_shapes().unwrap();
        assert_eq!(shapes["data"], Shape::new(3, 8, 8));
        // (8 + 2*1 - 3) / 1 + 1 = 8
        assert_eq!(shapes["conv1_out"], Shape::new(4, 8, 8));
        assert_eq!(shapes["relu1_out"], Shape::new(4, 8, 8));
        assert_eq!(shapes["conv2_out"], Shape::new(2, 8, 8));
    }

    #[test]
    fn conv_output_shape_matches_hand_cases() {
        // Worked by hand: h'=floor((5+0-3)/2)+1=2; with pad 1: floor(4/2)+1=3.
        let s = Shape::new(1, 5, 5);
        let p = ConvParams::square(1, 1, 3, 2, 0);
        assert_eq!(conv_output_shape(s, &p).unwrap(), Shape::new(1, 2, 2));
        let p = ConvParams::square(1, 1, 3, 2, 1);
        assert_eq!(conv_output_shape(s, &p).unwrap(), Shape::new(1, 3, 3));
    }

    #[test]
    fn deconv_output_shape_matches_hand_cases() {
        // h' = (h-1)*s - 2*pad + k = (5-1)*2 - 2 + 4 = 10.
        let s = Shape::new(1, 5, 5);
        let p = ConvParams { s_h: 2, s_w: 2, pad_h: 1, pad_w: 1, ..ConvParams::square(1, 1, 4, 1, 0) };
        let p = ConvParams { k_h: 4, k_w: 4, ..p };
        assert_eq!(deconv_output_shape(s, &p).unwrap(), Shape::new(1, 10, 10));
    }

    #[test]
    fn kernel_larger_than_padded_input_is_a_violation() {
        let p = ConvParams::square(1, 3, 9, 1, 0);
        let m = ModelBuilder::new(Shape::new(3, 4, 4))
            .tensor("w", Tensor4::zeros(p.weight_dims()).unwrap())
            .node("conv", LayerSpec::Convolution(p), &["data"], &["w"], None)
            .build();
        let v = m.validate();
        assert!(v.iter().any(|x| x.reason.contains("does not fit")), "{v:?}");
    }

    #[test]
    fn cycles_are_rejected_with_a_named_node() {
        let p = ConvParams::pointwise(3, 3);
        let mut m = ModelBuilder::new(Shape::new(3, 4, 4))
            .tensor("w", Tensor4::zeros(p.weight_dims()).unwrap())
            .build();
        m.nodes.push(conv_node("a", "b_out", p, "w"));
        m.nodes.push(conv_node("b", "a_out", p, "w"));
        match m.topo_order() {
            Err(Error::Graph(msg)) => assert!(msg.contains('`'), "{msg}"),
            other => panic!("expected graph error, got {other:?}"),
        }
    }

    #[test]
    fn dangling_input_edge_is_rejected() {
        let p = ConvParams::pointwise(3, 3);
        let m = ModelBuilder::new(Shape::new(3, 4, 4))
            .tensor("w", Tensor4::zeros(p.weight_dims()).unwrap())
            .node("conv", LayerSpec::Convolution(p), &["nope"], &["w"], None)
            .build();
        assert!(m.topo_order().is_err());
        assert!(!m.validate().is_empty());
    }

    #[test]
    fn duplicate_names_and_producers_are_violations() {
        let p = ConvParams::pointwise(3, 3);
        let mut m = ModelBuilder::new(Shape::new(3, 4, 4))
            .tensor("w", Tensor4::zeros(p.weight_dims()).unwrap())
            .node("conv", LayerSpec::Convolution(p), &["data"], &["w"], None)
            .build();
        let mut dup = m.nodes[1].clone();
        dup.inputs = vec!["data".into()];
        m.nodes.push(dup);
        let v = m.validate();
        assert!(v.iter().any(|x| x.reason.contains("duplicate node name")));
        assert!(v.iter().any(|x| x.reason.contains("two producers")));
    }

    #[test]
    fn weight_dim_mismatch_is_a_violation() {
        let p = ConvParams::square(4, 3, 3, 1, 1);
        let m = ModelBuilder::new(Shape::new(3, 8, 8))
            .tensor("w", Tensor4::zeros((4, 3, 2, 2)).unwrap())
            .node("conv", LayerSpec::Convolution(p), &["data"], &["w"], None)
            .build();
        let v = m.validate();
        assert!(v.iter().any(|x| x.reason.contains("do not match params")), "{v:?}");
    }

    #[test]
    fn group_divisibility_is_checked() {
        let p = ConvParams { g: 3, ..ConvParams::square(4, 4, 3, 1, 1) };
        let m = ModelBuilder::new(Shape::new(4, 8, 8))
            .tensor("w", Tensor4::zeros((4, 1, 3, 3)).unwrap())
            .node("conv", LayerSpec::Convolution(p), &["data"], &["w"], None)
            .build();
        let v = m.validate();
        assert!(v.iter().any(|x| x.reason.contains("must divide")), "{v:?}");
    }

    #[test]
    fn eltwise_shape_mismatch_is_a_violation() {
        let p1 = ConvParams::square(2, 3, 3, 1, 1); // 8x8 out
        let p2 = ConvParams::square(2, 3, 3, 2, 1); // 4x4 out
        let m = ModelBuilder::new(Shape::new(3, 8, 8))
            .tensor("w1", Tensor4::zeros(p1.weight_dims()).unwrap())
            .tensor("w2", Tensor4::zeros(p2.weight_dims()).unwrap())
            .node("a", LayerSpec::Convolution(p1), &["data"], &["w1"], None)
            .node("b", LayerSpec::Convolution(p2), &["data"], &["w2"], None)
            .node("add", LayerSpec::EltwiseAdd, &["a_out", "b_out"], &[], None)
            .build();
        let v = m.validate();
        assert!(v.iter().any(|x| x.reason.contains("disagree")), "{v:?}");
    }

    #[test]
    fn topo_order_breaks_ties_by_name() {
        let p = ConvParams::square(2, 3, 3, 1, 1);
        let m = ModelBuilder::new(Shape::new(3, 8, 8))
            .tensor("w", Tensor4::zeros(p.weight_dims()).unwrap())
            .node("zebra", LayerSpec::Convolution(p), &["data"], &["w"], None)
            .node("alpha", LayerSpec::Convolution(p), &["data"], &["w"], None)
            .build();
        let order = m.topo_order().unwrap();
        let names: Vec<&str> = order.iter().map(|&i| m.nodes[i].name.as_str()).collect();
        assert_eq!(names, vec!["input", "alpha", "zebra"]);
    }

    #[test]
    fn depth_fraction_is_linear_over_representation_layers() {
        let p = ConvParams::square(3, 3, 3, 1, 1);
        let m = ModelBuilder::new(Shape::new(3, 8, 8))
            .tensor("w", Tensor4::zeros(p.weight_dims()).unwrap())
            .node("c1", LayerSpec::Convolution(p), &["data"], &["w"], None)
            .node("r1", LayerSpec::ReLU, &["c1_out"], &[], None)
            .node("c2", LayerSpec::Convolution(p), &["r1_out"], &["w"], None)
            .node("c3", LayerSpec::Convolution(p), &["c2_out"], &["w"], None)
            .build();
        assert_eq!(m.depth_fraction("c1").unwrap(), 0.0);
        assert_eq!(m.depth_fraction("c2").unwrap(), 0.5);
        assert_eq!(m.depth_fraction("c3").unwrap(), 1.0);
        assert!(m.depth_fraction("r1").is_err());
    }

    #[test]
    fn single_representation_layer_has_depth_zero() {
        let p = ConvParams::square(3, 3, 3, 1, 1);
        let m = ModelBuilder::new(Shape::new(3, 8, 8))
            .tensor("w", Tensor4::zeros(p.weight_dims()).unwrap())
            .node("only", LayerSpec::Convolution(p), &["data"], &["w"], None)
            .build();
        assert_eq!(m.depth_fraction("only").unwrap(), 0.0);
    }

    #[test]
    fn terminal_edges_are_unconsumed_outputs() {
        let m = small_model();
        assert_eq!(m.terminal_edges(), vec!["conv2_out".to_string()]);
    }

    #[test]
    fn gc_drops_only_unreferenced_tensors() {
        let mut m = small_model();
        m.tensors.insert("orphan".into(), Tensor4::vector(vec![1.0]).unwrap());
        m.gc_tensors();
        assert!(m.tensors.contains_key("w1"));
        assert!(m.tensors.contains_key("w2"));
        assert!(!m.tensors.contains_key("orphan"));
    }

    #[test]
    fn fresh_names_avoid_collisions() {
        let m = small_model();
        assert_eq!(m.fresh_node_name("conv1"), "conv1_2");
        assert_eq!(m.fresh_node_name("new"), "new");
        assert_eq!(m.fresh_edge_name("conv1_out"), "conv1_out_2");
        assert_eq!(m.fresh_tensor_name("w1"), "w1_2");
    }
}
