//! Model serialization: a JSON manifest describing the graph and a binary
//! little-endian blob holding the weight tensors.
//!
//! Manifest (JSON):
//! ```json
//! {
//!   "version": 1,
//!   "input": {"c": 3, "h": 32, "w": 32},
//!   "nodes": [
//!     {"name": "conv1", "kind": "convolution",
//!      "params": {"c_o": 16, "c_i": 3, "k_h": 3, "k_w": 3, "s_h": 1,
//!                 "s_w": 1, "pad_h": 1, "pad_w": 1, "g": 1},
//!      "inputs": ["data"], "output": "conv1_out",
//!      "weights": ["conv1_w"], "bias": "conv1_b"}
//!   ]
//! }
//! ```
//! Stride, padding, and groups default to 1/0/1 when omitted; batch norm
//! `eps` defaults to the loader's `default_bn_eps`.
//!
//! Weights blob: magic `DLAW`, u32 version, u32 tensor count, then per
//! tensor: u16 name length, UTF-8 name, u8 ndim (1..=4), ndim u32 dims,
//! and the f32 elements. Everything little-endian. Saving and loading
//! round-trip tensors bit-identically, including NaN payloads and -0.0.

use indexmap::IndexMap;
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::model::{
    ConvParams, LayerSpec, Model, Node, PoolMode, PoolParams, Shape,
};
use crate::tensor::Tensor4;

pub const MANIFEST_VERSION: u64 = 1;
pub const BLOB_MAGIC: &[u8; 4] = b"DLAW";
pub const BLOB_VERSION: u32 = 1;
/// Batch norm epsilon used when a manifest omits the field.
pub const DEFAULT_BN_EPS: f32 = 1e-5;

// ---- saving ----

/// Serializes the graph to pretty-printed JSON (stable key order, so the
/// same model always produces the same bytes).
pub fn save_manifest(m: &Model) -> Vec<u8> {
    let nodes: Vec<Value> = m.nodes.iter().map(node_to_json).collect();
    let doc = json!({
        "version": MANIFEST_VERSION,
        "input": {"c": m.input_shape.c, "h": m.input_shape.h, "w": m.input_shape.w},
        "nodes": nodes,
    });
    let mut out = serde_json::to_string_pretty(&doc).expect("manifest serialization");
    out.push('\n');
    out.into_bytes()
}

fn node_to_json(n: &Node) -> Value {
    let mut obj = Map::new();
    obj.insert("name".into(), json!(n.name));
    obj.insert("kind".into(), json!(n.spec.kind().label()));
    if let Some(params) = params_to_json(&n.spec) {
        obj.insert("params".into(), params);
    }
    if !n.inputs.is_empty() {
        obj.insert("inputs".into(), json!(n.inputs));
    }
    obj.insert("output".into(), json!(n.output));
    if !n.weights.is_empty() {
        obj.insert("weights".into(), json!(n.weights));
    }
    if let Some(b) = &n.bias {
        obj.insert("bias".into(), json!(b));
    }
    Value::Object(obj)
}

fn params_to_json(spec: &LayerSpec) -> Option<Value> {
    match spec {
        LayerSpec::Convolution(p) | LayerSpec::Deconvolution(p) => Some(json!({
            "c_o": p.c_o, "c_i": p.c_i, "k_h": p.k_h, "k_w": p.k_w,
            "s_h": p.s_h, "s_w": p.s_w, "pad_h": p.pad_h, "pad_w": p.pad_w,
            "g": p.g,
        })),
        LayerSpec::FullyConnected { c_i, c_o } => Some(json!({"c_i": c_i, "c_o": c_o})),
        LayerSpec::BatchNorm { eps } => Some(json!({ "eps": eps })),
        LayerSpec::Pooling(p) => Some(json!({
            "mode": match p.mode { PoolMode::Max => "max", PoolMode::Avg => "avg" },
            "k_h": p.k_h, "k_w": p.k_w, "s_h": p.s_h, "s_w": p.s_w,
            "pad_h": p.pad_h, "pad_w": p.pad_w,
        })),
        LayerSpec::Input | LayerSpec::Scale | LayerSpec::ReLU | LayerSpec::EltwiseAdd => None,
    }
}

/// Serializes the tensor store to the binary blob, preserving order.
pub fn save_weights(tensors: &IndexMap<String, Tensor4>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(BLOB_MAGIC);
    out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        assert!(bytes.len() <= u16::MAX as usize, "tensor name too long");
        out.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(bytes);
        out.push(t.ndim());
        let dims = [t.dims().0, t.dims().1, t.dims().2, t.dims().3];
        for &d in dims.iter().take(t.ndim() as usize) {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Serializes a model to `(manifest, weights)` byte buffers.
pub fn save_model(m: &Model) -> (Vec<u8>, Vec<u8>) {
    (save_manifest(m), save_weights(&m.tensors))
}

// ---- loading ----

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Blob {
                offset: self.pos,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

/// Parses a weights blob. Reports the byte offset of any structural
/// problem (bad magic, version, truncation, bad tensor header).
pub fn load_weights(bytes: &[u8]) -> Result<IndexMap<String, Tensor4>> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.take(4, "magic")?;
    if magic != BLOB_MAGIC {
        return Err(Error::Blob { offset: 0, msg: format!("bad magic {magic:?}") });
    }
    let version = c.u32("version")?;
    if version != BLOB_VERSION {
        return Err(Error::Blob {
            offset: 4,
            msg: format!("unsupported blob version {version}"),
        });
    }
    let count = c.u32("tensor count")?;
    let mut tensors = IndexMap::new();
    for _ in 0..count {
        let name_off = c.pos;
        let name_len = c.u16("name length")? as usize;
        let name_bytes = c.take(name_len, "tensor name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::Blob { offset: name_off + 2, msg: "name is not UTF-8".into() })?
            .to_string();
        let ndim_off = c.pos;
        let ndim = c.u8("ndim")?;
        if !(1..=4).contains(&ndim) {
            return Err(Error::Blob {
                offset: ndim_off,
                msg: format!("tensor `{name}` has ndim {ndim}, expected 1..=4"),
            });
        }
        let mut dims = [1usize; 4];
        let mut elements = 1usize;
        for d in dims.iter_mut().take(ndim as usize) {
            let dim_off = c.pos;
            let val = c.u32("dim")? as usize;
            if val == 0 {
                return Err(Error::Blob {
                    offset: dim_off,
                    msg: format!("tensor `{name}` has a zero dim"),
                });
            }
            elements = elements.checked_mul(val).ok_or(Error::Blob {
                offset: dim_off,
                msg: format!("tensor `{name}` dims overflow"),
            })?;
            *d = val;
        }
        let data_off = c.pos;
        let raw = c.take(elements * 4, "tensor data")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let t = Tensor4::with_ndim((dims[0], dims[1], dims[2], dims[3]), ndim, data)
            .map_err(|e| Error::Blob { offset: data_off, msg: e.to_string() })?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Blob {
                offset: name_off,
                msg: format!("duplicate tensor `{name}`"),
            });
        }
    }
    if c.pos != bytes.len() {
        return Err(Error::Blob {
            offset: c.pos,
            msg: format!("{} trailing bytes after last tensor", bytes.len() - c.pos),
        });
    }
    Ok(tensors)
}

/// Parses a manifest, applying `default_bn_eps` to batch norm nodes that
/// omit `eps`.
pub fn load_manifest(bytes: &[u8], default_bn_eps: f32) -> Result<(Shape, Vec<Node>)> {
    let doc: Value = serde_json::from_slice(bytes)?;
    let root = doc
        .as_object()
        .ok_or_else(|| manifest_err(None, "manifest root must be an object"))?;
    let version = field(root, None, "version")?.as_u64();
    if version != Some(MANIFEST_VERSION) {
        return Err(manifest_err(
            None,
            format!("unsupported manifest version {:?}", field(root, None, "version")?),
        ));
    }
    let input = field(root, None, "input")?
        .as_object()
        .ok_or_else(|| manifest_err(None, "`input` must be an object"))?;
    let shape = Shape::new(
        get_usize(input, None, "c")?,
        get_usize(input, None, "h")?,
        get_usize(input, None, "w")?,
    );
    let nodes_json = field(root, None, "nodes")?
        .as_array()
        .ok_or_else(|| manifest_err(None, "`nodes` must be an array"))?;
    let mut nodes = Vec::with_capacity(nodes_json.len());
    for nj in nodes_json {
        nodes.push(parse_node(nj, default_bn_eps)?);
    }
    Ok((shape, nodes))
}

/// Loads a model from manifest + blob bytes and checks that every tensor
/// reference resolves. Semantic validation (shapes, dims, graph) is left
/// to [`Model::validate`] so callers can collect all problems at once.
pub fn load_model(manifest: &[u8], weights: &[u8]) -> Result<Model> {
    load_model_with_eps(manifest, weights, DEFAULT_BN_EPS)
}

/// As [`load_model`] with an explicit default batch norm epsilon.
pub fn load_model_with_eps(manifest: &[u8], weights: &[u8], default_bn_eps: f32) -> Result<Model> {
    let (input_shape, nodes) = load_manifest(manifest, default_bn_eps)?;
    let tensors = load_weights(weights)?;
    for n in &nodes {
        for w in n.weights.iter().chain(n.bias.iter()) {
            if !tensors.contains_key(w) {
                return Err(Error::DanglingTensor { node: n.name.clone(), tensor: w.clone() });
            }
        }
    }
    Ok(Model { input_shape, nodes, tensors })
}

fn manifest_err(node: Option<&str>, msg: impl Into<String>) -> Error {
    Error::Manifest { node: node.map(String::from), msg: msg.into() }
}

fn field<'v>(obj: &'v Map<String, Value>, node: Option<&str>, key: &str) -> Result<&'v Value> {
    obj.get(key).ok_or_else(|| manifest_err(node, format!("missing field `{key}`")))
}

fn get_usize(obj: &Map<String, Value>, node: Option<&str>, key: &str) -> Result<usize> {
    field(obj, node, key)?
        .as_u64()
        .map(|v| v as usize)
        .ok_or_else(|| manifest_err(node, format!("field `{key}` must be a non-negative integer")))
}

fn get_usize_or(obj: &Map<String, Value>, node: Option<&str>, key: &str, default: usize) -> Result<usize> {
    match obj.get(key) {
        None => Ok(default),
        Some(v) => v
            .as_u64()
            .map(|v| v as usize)
            .ok_or_else(|| manifest_err(node, format!("field `{key}` must be a non-negative integer"))),
    }
}

fn get_str<'v>(obj: &'v Map<String, Value>, node: Option<&str>, key: &str) -> Result<&'v str> {
    field(obj, node, key)?
        .as_str()
        .ok_or_else(|| manifest_err(node, format!("field `{key}` must be a string")))
}

fn parse_node(v: &Value, default_bn_eps: f32) -> Result<Node> {
    let obj = v
        .as_object()
        .ok_or_else(|| manifest_err(None, "node entries must be objects"))?;
    let name = get_str(obj, None, "name")?.to_string();
    let node = Some(name.as_str());
    let kind = get_str(obj, node, "kind")?;

    let inputs: Vec<String> = match obj.get("inputs") {
        None => Vec::new(),
        Some(Value::Array(a)) => a
            .iter()
            .map(|x| {
                x.as_str()
                    .map(String::from)
                    .ok_or_else(|| manifest_err(node, "`inputs` entries must be strings"))
            })
            .collect::<Result<_>>()?,
        Some(_) => return Err(manifest_err(node, "`inputs` must be an array")),
    };
    let output = get_str(obj, node, "output")?.to_string();
    let weights: Vec<String> = match obj.get("weights") {
        None => Vec::new(),
        Some(Value::Array(a)) => a
            .iter()
            .map(|x| {
                x.as_str()
                    .map(String::from)
                    .ok_or_else(|| manifest_err(node, "`weights` entries must be strings"))
            })
            .collect::<Result<_>>()?,
        Some(_) => return Err(manifest_err(node, "`weights` must be an array")),
    };
    let bias = match obj.get("bias") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err(manifest_err(node, "`bias` must be a string")),
    };

    let params = || -> Result<&Map<String, Value>> {
        field(obj, node, "params")?
            .as_object()
            .ok_or_else(|| manifest_err(node, "`params` must be an object"))
    };

    let spec = match kind {
        "input" => LayerSpec::Input,
        "convolution" | "deconvolution" => {
            let p = params()?;
            let cp = ConvParams {
                c_o: get_usize(p, node, "c_o")?,
                c_i: get_usize(p, node, "c_i")?,
                k_h: get_usize(p, node, "k_h")?,
                k_w: get_usize(p, node, "k_w")?,
                s_h: get_usize_or(p, node, "s_h", 1)?,
                s_w: get_usize_or(p, node, "s_w", 1)?,
                pad_h: get_usize_or(p, node, "pad_h", 0)?,
                pad_w: get_usize_or(p, node, "pad_w", 0)?,
                g: get_usize_or(p, node, "g", 1)?,
            };
            if kind == "convolution" {
                LayerSpec::Convolution(cp)
            } else {
                LayerSpec::Deconvolution(cp)
            }
        }
        "fully_connected" => {
            let p = params()?;
            LayerSpec::FullyConnected {
                c_i: get_usize(p, node, "c_i")?,
                c_o: get_usize(p, node, "c_o")?,
            }
        }
        "batch_norm" => {
            let eps = match obj.get("params").and_then(|p| p.get("eps")) {
                None | Some(Value::Null) => default_bn_eps,
                Some(v) => v
                    .as_f64()
                    .map(|x| x as f32)
                    .ok_or_else(|| manifest_err(node, "`eps` must be a number"))?,
            };
            LayerSpec::BatchNorm { eps }
        }
        "scale" => LayerSpec::Scale,
        "relu" => LayerSpec::ReLU,
        "pooling" => {
            let p = params()?;
            let mode = match get_str(p, node, "mode")? {
                "max" => PoolMode::Max,
                "avg" => PoolMode::Avg,
                other => {
                    return Err(manifest_err(node, format!("unknown pooling mode `{other}`")))
                }
            };
            LayerSpec::Pooling(PoolParams {
                mode,
                k_h: get_usize(p, node, "k_h")?,
                k_w: get_usize(p, node, "k_w")?,
                s_h: get_usize_or(p, node, "s_h", 1)?,
                s_w: get_usize_or(p, node, "s_w", 1)?,
                pad_h: get_usize_or(p, node, "pad_h", 0)?,
                pad_w: get_usize_or(p, node, "pad_w", 0)?,
            })
        }
        "eltwise_add" => LayerSpec::EltwiseAdd,
        other => return Err(manifest_err(node, format!("unknown layer kind `{other}`"))),
    };

    Ok(Node { name, spec, inputs, output, weights, bias })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelBuilder, PoolMode};

    fn sample_model() -> Model {
        let conv = ConvParams::square(4, 3, 3, 1, 1);
        let deconv = ConvParams { s_h: 2, s_w: 2, ..ConvParams::square(3, 4, 2, 1, 0) };
        let pool = PoolParams { mode: PoolMode::Max, k_h: 2, k_w: 2, s_h: 2, s_w: 2, pad_h: 0, pad_w: 0 };
        let wv = |n: usize| -> Vec<f32> { (0..n).map(|i| i as f32 * 0.25 - 1.0).collect() };
        ModelBuilder::new(Shape::new(3, 8, 8))
            .tensor("conv_w", Tensor4::new((4, 3, 3, 3), wv(108)).unwrap())
            .tensor("conv_b", Tensor4::vector(wv(4)).unwrap())
            .tensor("mu", Tensor4::vector(vec![0.1, -0.2, 0.3, 0.0]).unwrap())
            .tensor("var", Tensor4::vector(vec![1.0, 0.5, 2.0, 0.25]).unwrap())
            .tensor("alpha", Tensor4::vector(vec![1.5, 1.0, -2.0, 0.5]).unwrap())
            .tensor("beta", Tensor4::vector(vec![0.0, 0.1, -0.1, 0.2]).unwrap())
            .tensor("deconv_w", Tensor4::new((3, 4, 2, 2), wv(48)).unwrap())
            .tensor("fc_w", Tensor4::with_ndim((2, 192, 1, 1), 2, wv(384)).unwrap())
            .tensor("fc_b", Tensor4::vector(vec![0.5, -0.5]).unwrap())
            .node("conv1", LayerSpec::Convolution(conv), &["data"], &["conv_w"], Some("conv_b"))
            .node("bn1", LayerSpec::BatchNorm { eps: 2e-5 }, &["conv1_out"], &["mu", "var"], None)
            .node("sc1", LayerSpec::Scale, &["bn1_out"], &["alpha", "beta"], None)
            .node("relu1", LayerSpec::ReLU, &["sc1_out"], &[], None)
            .node("up", LayerSpec::Deconvolution(deconv), &["relu1_out"], &["deconv_w"], None)
            .node("pool", LayerSpec::Pooling(pool), &["up_out"], &[], None)
            .node(
                "fc",
                LayerSpec::FullyConnected { c_i: 3 * 8 * 8, c_o: 2 },
                &["pool_out"],
                &["fc_w"],
                Some("fc_b"),
            )
            .build()
    }

    #[test]
    fn round_trip_preserves_graph_and_weights() {
        let m = sample_model();
        assert!(m.validate().is_empty(), "{:?}", m.validate());
        let (manifest, weights) = save_model(&m);
        let loaded = load_model(&manifest, &weights).unwrap();
        assert_eq!(loaded, m);
        // Saving again produces byte-identical artifacts.
        let (manifest2, weights2) = save_model(&loaded);
        assert_eq!(manifest, manifest2);
        assert_eq!(weights, weights2);
    }

    #[test]
    fn weights_round_trip_is_bit_exact_for_odd_floats() {
        let mut tensors = IndexMap::new();
        let odd = vec![
            0.0f32,
            -0.0,
            f32::MIN_POSITIVE,
            1e-42, // subnormal
            f32::from_bits(0x7fc0_1234), // NaN with payload
            f32::INFINITY,
            f32::NEG_INFINITY,
            -3.5,
        ];
        tensors.insert(
            "odd".to_string(),
            Tensor4::with_ndim((8, 1, 1, 1), 1, odd.clone()).unwrap(),
        );
        let bytes = save_weights(&tensors);
        let loaded = load_weights(&bytes).unwrap();
        for (a, b) in loaded["odd"].as_slice().iter().zip(&odd) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(loaded["odd"].ndim(), 1);
    }

    #[test]
    fn blob_errors_carry_offsets() {
        match load_weights(b"XYZW") {
            Err(Error::Blob { offset: 0, .. }) => {}
            other => panic!("expected magic error, got {other:?}"),
        }
        let mut good = save_weights(&sample_model().tensors);
        good.truncate(good.len() - 3);
        match load_weights(&good) {
            Err(Error::Blob { offset, msg }) => {
                assert!(offset > 0);
                assert!(msg.contains("truncated"), "{msg}");
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
        let mut bad_version = save_weights(&IndexMap::new());
        bad_version[4] = 9;
        match load_weights(&bad_version) {
            Err(Error::Blob { offset: 4, .. }) => {}
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn bad_ndim_is_rejected() {
        let mut tensors = IndexMap::new();
        tensors.insert("t".to_string(), Tensor4::vector(vec![1.0]).unwrap());
        let mut bytes = save_weights(&tensors);
        // name_len(2) + "t"(1) => ndim byte at offset 12 + 3 = 15.
        let ndim_off = 4 + 4 + 4 + 2 + 1;
        assert_eq!(bytes[ndim_off], 1);
        bytes[ndim_off] = 5;
        match load_weights(&bytes) {
            Err(Error::Blob { offset, msg }) => {
                assert_eq!(offset, ndim_off);
                assert!(msg.contains("ndim"), "{msg}");
            }
            other => panic!("expected ndim error, got {other:?}"),
        }
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let mut bytes = save_weights(&IndexMap::new());
        bytes.push(0);
        assert!(matches!(load_weights(&bytes), Err(Error::Blob { .. })));
    }

    #[test]
    fn dangling_tensor_ref_is_reported_with_names() {
        let m = sample_model();
        let (manifest, _) = save_model(&m);
        let empty = save_weights(&IndexMap::new());
        match load_model(&manifest, &empty) {
            Err(Error::DanglingTensor { node, tensor }) => {
                assert_eq!(node, "conv1");
                assert_eq!(tensor, "conv_w");
            }
            other => panic!("expected dangling tensor error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_kind_and_missing_fields_name_the_node() {
        let bad = br#"{"version": 1, "input": {"c":1,"h":1,"w":1},
            "nodes": [{"name": "x", "kind": "warp", "output": "y"}]}"#;
        match load_manifest(bad, DEFAULT_BN_EPS) {
            Err(Error::Manifest { node: Some(n), msg }) => {
                assert_eq!(n, "x");
                assert!(msg.contains("warp"), "{msg}");
            }
            other => panic!("expected manifest error, got {other:?}"),
        }
        let missing = br#"{"version": 1, "input": {"c":1,"h":1,"w":1},
            "nodes": [{"name": "c", "kind": "convolution", "output": "y",
                       "params": {"c_o": 1, "c_i": 1, "k_h": 1}}]}"#;
        match load_manifest(missing, DEFAULT_BN_EPS) {
            Err(Error::Manifest { node: Some(n), msg }) => {
                assert_eq!(n, "c");
                assert!(msg.contains("k_w"), "{msg}");
            }
            other => panic!("expected manifest error, got {other:?}"),
        }
    }

    #[test]
    fn conv_defaults_apply_when_omitted() {
        let manifest = br#"{"version": 1, "input": {"c":1,"h":4,"w":4},
            "nodes": [
              {"name": "input", "kind": "input", "output": "data"},
              {"name": "c", "kind": "convolution", "inputs": ["data"], "output": "y",
               "params": {"c_o": 2, "c_i": 1, "k_h": 3, "k_w": 3}, "weights": ["w"]}
            ]}"#;
        let (_, nodes) = load_manifest(manifest, DEFAULT_BN_EPS).unwrap();
        match &nodes[1].spec {
            LayerSpec::Convolution(p) => {
                assert_eq!((p.s_h, p.s_w, p.pad_h, p.pad_w, p.g), (1, 1, 0, 0, 1));
            }
            other => panic!("unexpected spec {other:?}"),
        }
    }

    #[test]
    fn bn_eps_defaults_to_loader_value() {
        let manifest = br#"{"version": 1, "input": {"c":2,"h":4,"w":4},
            "nodes": [
              {"name": "input", "kind": "input", "output": "data"},
              {"name": "bn", "kind": "batch_norm", "inputs": ["data"], "output": "y",
               "weights": ["mu", "var"]}
            ]}"#;
        let (_, nodes) = load_manifest(manifest, 3e-4).unwrap();
        match &nodes[1].spec {
            LayerSpec::BatchNorm { eps } => assert_eq!(*eps, 3e-4),
            other => panic!("unexpected spec {other:?}"),
        }
    }

    #[test]
    fn unsupported_manifest_version_is_rejected() {
        let bad = br#"{"version": 7, "input": {"c":1,"h":1,"w":1}, "nodes": []}"#;
        assert!(matches!(
            load_manifest(bad, DEFAULT_BN_EPS),
            Err(Error::Manifest { node: None, .. })
        ));
    }

    #[test]
    fn non_json_input_is_a_json_error() {
        assert!(matches!(
            load_manifest(b"not json", DEFAULT_BN_EPS),
            Err(Error::Json(_))
        ));
    }
}
