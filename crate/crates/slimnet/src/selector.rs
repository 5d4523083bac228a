//! Model-level optimization: lossless fusion first, then per-layer (or
//! per-group) choice of a low-rank factorization driven by a single
//! accuracy-vs-speed weight `p`, applied in one deterministic rewrite.
//!
//! Each representation layer gets a depth-dependent accuracy threshold that
//! starts near 1.0 at the input and relaxes linearly to `p` at the output;
//! among candidates clearing the threshold the one with the best score
//! `S = p*A + (1-p)*R` wins. Layers that share an input edge, or whose
//! outputs are summed by one eltwise-add, are factorized jointly through a
//! concatenated weight matrix so part of the arithmetic is shared.

use std::collections::{HashMap, HashSet};

use indexmap::IndexMap;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::factorization::{
    candidate_order, enumerate_candidates, enumerate_kind, mixing_spec, next_shape, rep_spec,
    EnumerationConstraints, FactorKind, FactorizationCandidate, RankGrid, RepLayer,
    ReplacementLayer, Target,
};
use crate::flops::{layer_flops, model_cost, CostReport};
use crate::fusion::{run_lossless_pass_logged, FusionEvent};
use crate::model::{LayerKind, LayerSpec, Model, Node, Shape};
use crate::report::{
    Action, LayerRecord, OptimizationReport, RankValue, ReportConfig, ReportTotals,
};
use crate::tensor::Tensor4;

/// Optimizer settings. `p` weighs accuracy against speed and doubles as the
/// endpoint of the depth-dependent accuracy threshold.
#[derive(Debug, Clone, Copy)]
pub struct SelectorConfig {
    /// Accuracy weight in `[0, 1]`; must not exceed `start_threshold`.
    pub p: f64,
    /// Accuracy threshold at the input end of the network.
    pub start_threshold: f64,
    pub target: Target,
    pub grid: RankGrid,
    /// Maximum factorization chain length (1 = base schemes only).
    pub max_chain: usize,
    /// Recorded in the report for provenance; selection itself is
    /// deterministic and uses no randomness.
    pub seed: Option<u64>,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        SelectorConfig {
            p: 0.5,
            start_threshold: 0.99,
            target: Target::Cpu,
            grid: RankGrid::PowersOfTwo,
            max_chain: 2,
            seed: None,
        }
    }
}

impl SelectorConfig {
    pub fn with_p(p: f64) -> Self {
        SelectorConfig { p, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.p.is_finite() || !(0.0..=1.0).contains(&self.p) {
            return Err(Error::InvalidArgument(format!("p must be in [0, 1], got {}", self.p)));
        }
        if !self.start_threshold.is_finite()
            || self.start_threshold < self.p
            || self.start_threshold > 1.0
        {
            return Err(Error::InvalidArgument(format!(
                "start threshold must be in [p, 1], got {}",
                self.start_threshold
            )));
        }
        if self.max_chain < 1 {
            return Err(Error::InvalidArgument("chain cap must be at least 1".into()));
        }
        if let RankGrid::Step(0) = self.grid {
            return Err(Error::InvalidArgument("rank grid step must be at least 1".into()));
        }
        Ok(())
    }

    fn constraints(&self) -> EnumerationConstraints {
        EnumerationConstraints {
            p: self.p,
            target: self.target,
            grid: self.grid,
            max_chain: self.max_chain,
        }
    }
}

/// Accuracy threshold at a given depth fraction: starts at
/// `start_threshold` and falls linearly to `p` at the output.
pub fn layer_threshold(cfg: &SelectorConfig, depth: f64) -> f64 {
    cfg.start_threshold - (cfg.start_threshold - cfg.p) * depth
}

/// Selection score `S = p*A + (1-p)*R`.
pub fn score(a: f64, r: f64, p: f64) -> f64 {
    p * a + (1.0 - p) * r
}

/// Highest-scoring candidate whose accuracy clears the depth threshold
/// (ties: fewer FLOPs, then scheme label, then ranks); `None` keeps the
/// original layer.
pub fn choose_best<'a>(
    candidates: &'a [FactorizationCandidate],
    cfg: &SelectorConfig,
    depth: f64,
) -> Option<&'a FactorizationCandidate> {
    let t = layer_threshold(cfg, depth);
    let mut best: Option<&FactorizationCandidate> = None;
    for c in candidates.iter().filter(|c| c.accuracy >= t) {
        best = match best {
            None => Some(c),
            Some(cur) => {
                if candidate_order(c, cur, cfg.p) == std::cmp::Ordering::Less {
                    Some(c)
                } else {
                    Some(cur)
                }
            }
        };
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupKind {
    SharedInput,
    SharedOutputSum,
    Singleton,
}

impl GroupKind {
    pub fn label(&self) -> &'static str {
        match self {
            GroupKind::SharedInput => "shared_input",
            GroupKind::SharedOutputSum => "shared_output_sum",
            GroupKind::Singleton => "singleton",
        }
    }
}

/// Representation layers decided together: either a true group (shared
/// input edge, or outputs summed by one eltwise-add) or a singleton.
#[derive(Debug, Clone)]
pub struct ApproximationGroup {
    pub kind: GroupKind,
    /// Member node names; shared-output-sum members follow the add's input
    /// order, shared-input members the graph's node order.
    pub members: Vec<String>,
    /// The EltwiseAdd node for shared-output-sum groups.
    pub join: Option<String>,
}

/// Hyperparameters that must agree for layers to share a factorization.
type GroupSignature = (LayerKind, usize, usize, usize, usize, usize, usize, usize);

fn shared_input_signature(n: &Node) -> Option<GroupSignature> {
    let p = n.spec.conv_view()?;
    if !n.spec.kind().is_representation() || p.g > 1 {
        return None;
    }
    Some((n.spec.kind(), p.c_i, p.k_h, p.k_w, p.s_h, p.s_w, p.pad_h, p.pad_w))
}

fn shared_output_signature(n: &Node) -> Option<GroupSignature> {
    let p = n.spec.conv_view()?;
    if !n.spec.kind().is_representation() || p.g > 1 {
        return None;
    }
    Some((n.spec.kind(), p.c_o, p.k_h, p.k_w, p.s_h, p.s_w, p.pad_h, p.pad_w))
}

/// Partitions the representation layers into approximation groups:
/// shared-input groups first, then shared-output-sum groups among the
/// remaining layers, then singletons, ordered by the topological position
/// of each group's first member.
pub fn find_approximation_groups(m: &Model) -> Result<Vec<ApproximationGroup>> {
    let topo = m.topo_order()?;
    let consumers = m.consumers();
    let producers = m.producers();
    let mut assigned: HashSet<String> = HashSet::new();
    let mut groups: Vec<ApproximationGroup> = Vec::new();

    // Shared-input groups: bucket each edge's representation consumers by
    // hyperparameter signature.
    for &ni in &topo {
        let edge = m.nodes[ni].output.clone();
        let Some(cons) = consumers.get(edge.as_str()) else { continue };
        let mut buckets: IndexMap<GroupSignature, Vec<String>> = IndexMap::new();
        for &ci in cons {
            let n = &m.nodes[ci];
            if assigned.contains(&n.name) {
                continue;
            }
            if let Some(sig) = shared_input_signature(n) {
                buckets.entry(sig).or_default().push(n.name.clone());
            }
        }
        for (_, members) in buckets {
            if members.len() >= 2 {
                assigned.extend(members.iter().cloned());
                groups.push(ApproximationGroup {
                    kind: GroupKind::SharedInput,
                    members,
                    join: None,
                });
            }
        }
    }

    // Shared-output-sum groups: an eltwise-add whose inputs all come from
    // matching representation layers, each feeding only that add.
    for &ni in &topo {
        let add = &m.nodes[ni];
        if add.spec != LayerSpec::EltwiseAdd || add.inputs.len() < 2 {
            continue;
        }
        let mut members = Vec::new();
        let mut sig: Option<GroupSignature> = None;
        let mut ok = true;
        for inp in &add.inputs {
            let Some(&pi) = producers.get(inp.as_str()) else {
                ok = false;
                break;
            };
            let n = &m.nodes[pi];
            let Some(s) = shared_output_signature(n) else {
                ok = false;
                break;
            };
            if assigned.contains(&n.name)
                || members.contains(&n.name)
                || consumers.get(inp.as_str()).map(Vec::as_slice) != Some(&[ni])
            {
                ok = false;
                break;
            }
            if *sig.get_or_insert(s) != s {
                ok = false;
                break;
            }
            members.push(n.name.clone());
        }
        if ok && members.len() >= 2 {
            assigned.extend(members.iter().cloned());
            groups.push(ApproximationGroup {
                kind: GroupKind::SharedOutputSum,
                members,
                join: Some(add.name.clone()),
            });
        }
    }

    for &ni in &topo {
        let n = &m.nodes[ni];
        if n.spec.kind().is_representation() && !assigned.contains(&n.name) {
            groups.push(ApproximationGroup {
                kind: GroupKind::Singleton,
                members: vec![n.name.clone()],
                join: None,
            });
        }
    }

    let pos: HashMap<&str, usize> =
        topo.iter().enumerate().map(|(p, &i)| (m.nodes[i].name.as_str(), p)).collect();
    groups.sort_by_key(|g| g.members.iter().map(|m| pos[m.as_str()]).min().unwrap_or(0));
    Ok(groups)
}

/// One member's share of a group factorization.
#[derive(Debug, Clone)]
pub struct MemberPiece {
    pub name: String,
    pub spec: LayerSpec,
    pub weight: Tensor4,
    /// Shared-input members keep their original bias on the rewritten node;
    /// shared-output-sum members lose it (the summed bias moves onto the
    /// shared factor after the add).
    pub keep_bias: bool,
    pub flops_before: u64,
    /// The shared factor's cost is charged to the first member.
    pub flops_after: u64,
}

/// A chosen joint factorization for a group, ready to apply.
#[derive(Debug, Clone)]
pub struct GroupChoice {
    pub kind: GroupKind,
    pub b: usize,
    pub accuracy: f64,
    pub flops_before: u64,
    pub flops_after: u64,
    /// Shared factor: the first layer for shared-input groups, the layer
    /// after the add for shared-output-sum groups.
    pub shared: ReplacementLayer,
    pub pieces: Vec<MemberPiece>,
    pub join: Option<String>,
    /// Original member specs, checked again at application time.
    expected: Vec<(String, LayerSpec)>,
}

impl GroupChoice {
    pub fn runtime_gain(&self) -> f64 {
        if self.flops_before == 0 {
            return 0.0;
        }
        (1.0 - self.flops_after as f64 / self.flops_before as f64).max(0.0)
    }

    pub fn score(&self, p: f64) -> f64 {
        score(self.accuracy, self.runtime_gain(), p)
    }
}

fn group_order(a: &GroupChoice, b: &GroupChoice, p: f64) -> std::cmp::Ordering {
    b.score(p)
        .partial_cmp(&a.score(p))
        .unwrap_or(std::cmp::Ordering::Equal)
        .then_with(|| a.flops_after.cmp(&b.flops_after))
        .then_with(|| a.b.cmp(&b.b))
}

/// Concatenates member weights along the output-channel axis (shared-input
/// groups): row-major layout makes this a plain append.
fn concat_output_axis(members: &[RepLayer]) -> Result<RepLayer> {
    let first = &members[0];
    let mut p = first.params;
    p.c_o = members.iter().map(|m| m.params.c_o).sum();
    let mut data = Vec::new();
    for m in members {
        data.extend_from_slice(m.weight.as_slice());
    }
    let weight = Tensor4::new(p.weight_dims(), data)?;
    RepLayer::new("shared_input_group", &rep_spec(first.kind, p), weight, None, first.input_shape)
}

/// Concatenates member weights along the input-channel axis
/// (shared-output-sum groups): summing member outputs equals one layer over
/// the channel-concatenated inputs.
fn concat_input_axis(members: &[RepLayer]) -> Result<RepLayer> {
    let first = &members[0];
    let mut p = first.params;
    p.c_i = members.iter().map(|m| m.params.c_i).sum();
    let mut weight = Tensor4::zeros(p.weight_dims())?;
    let mut base = 0;
    for m in members {
        for o in 0..p.c_o {
            for i in 0..m.params.c_i {
                for y in 0..p.k_h {
                    for x in 0..p.k_w {
                        weight.set(o, base + i, y, x, m.weight.get(o, i, y, x));
                    }
                }
            }
        }
        base += m.params.c_i;
    }
    let input_shape = if first.kind == LayerKind::FullyConnected {
        Shape::new(p.c_i, 1, 1)
    } else {
        Shape::new(p.c_i, first.input_shape.h, first.input_shape.w)
    };
    RepLayer::new("shared_output_group", &rep_spec(first.kind, p), weight, None, input_shape)
}

fn concat_members(members: &[RepLayer], kind: GroupKind) -> Result<RepLayer> {
    match kind {
        GroupKind::SharedInput => concat_output_axis(members),
        GroupKind::SharedOutputSum => concat_input_axis(members),
        GroupKind::Singleton => {
            Err(Error::InvalidArgument("singleton groups have no joint choice".into()))
        }
    }
}

fn finish_choice(
    members: &[RepLayer],
    kind: GroupKind,
    join: Option<&str>,
    cand: &FactorizationCandidate,
    b: usize,
) -> Result<GroupChoice> {
    let mut choice = match kind {
        GroupKind::SharedInput => split_shared_input(members, cand, b)?,
        GroupKind::SharedOutputSum => split_shared_output(members, cand, b)?,
        GroupKind::Singleton => unreachable!(),
    };
    choice.join = join.map(String::from);
    choice.expected = members.iter().map(|m| (m.name.clone(), m.spec())).collect();
    choice.flops_before = members
        .iter()
        .map(|m| layer_flops(&m.spec(), m.input_shape))
        .fold(0u64, |a, b| a.saturating_add(b));
    choice.accuracy = cand.accuracy;
    Ok(choice)
}

/// The joint filter-wise factorization of a group at one rank, with no
/// FLOP-reduction filtering.
pub fn group_factorization(
    members: &[RepLayer],
    kind: GroupKind,
    join: Option<&str>,
    b: usize,
) -> Result<GroupChoice> {
    let concat = concat_members(members, kind)?;
    let cand = crate::factorization::factorize(&concat, FactorKind::FilterWise, b)?;
    finish_choice(members, kind, join, &cand, b)
}

/// All joint filter-wise factorizations of a group over the rank grid,
/// subject to the same strict-FLOP-reduction and GPU power-of-two filters
/// as single-layer candidates, best first.
pub fn group_choices(
    members: &[RepLayer],
    kind: GroupKind,
    join: Option<&str>,
    cfg: &SelectorConfig,
) -> Result<Vec<GroupChoice>> {
    let concat = concat_members(members, kind)?;
    let mut out = Vec::new();
    for cand in enumerate_kind(&concat, FactorKind::FilterWise, cfg.grid)? {
        let b = cand.ranks[0];
        if cfg.target == Target::Gpu && !b.is_power_of_two() {
            continue;
        }
        let choice = finish_choice(members, kind, join, &cand, b)?;
        if choice.flops_after >= choice.flops_before {
            continue;
        }
        out.push(choice);
    }
    out.sort_by(|a, b| group_order(a, b, cfg.p));
    Ok(out)
}

/// Splits the joint candidate of a shared-input group: the kernel factor is
/// shared, the pointwise mix is row-split per member.
fn split_shared_input(
    members: &[RepLayer],
    cand: &FactorizationCandidate,
    b: usize,
) -> Result<GroupChoice> {
    let shared = cand.replacement[0].clone();
    let mix = &cand.replacement[1].weight;
    let mid_shape = next_shape(&shared.spec, members[0].input_shape)?;
    let shared_flops = layer_flops(&shared.spec, members[0].input_shape);
    let mut pieces = Vec::with_capacity(members.len());
    let mut total_after = shared_flops;
    let mut off = 0usize;
    for (n, m) in members.iter().enumerate() {
        let c_o = m.params.c_o;
        let rows = mix.as_slice()[off * b..(off + c_o) * b].to_vec();
        let weight = Tensor4::new((c_o, b, 1, 1), rows)?;
        let spec = mixing_spec(m.kind, c_o, b);
        let fa = layer_flops(&spec, mid_shape);
        total_after = total_after.saturating_add(fa);
        pieces.push(MemberPiece {
            name: m.name.clone(),
            spec,
            weight,
            keep_bias: true,
            flops_before: layer_flops(&m.spec(), m.input_shape),
            flops_after: if n == 0 { fa + shared_flops } else { fa },
        });
        off += c_o;
    }
    Ok(GroupChoice {
        kind: GroupKind::SharedInput,
        b,
        accuracy: cand.accuracy,
        flops_before: 0, // filled by caller
        flops_after: total_after,
        shared,
        pieces,
        join: None,
        expected: Vec::new(), // filled by caller
    })
}

/// Splits the joint candidate of a shared-output-sum group: the kernel
/// factor is column-split per member (each bias-free), the pointwise mix is
/// shared after the add and carries the summed biases.
fn split_shared_output(
    members: &[RepLayer],
    cand: &FactorizationCandidate,
    b: usize,
) -> Result<GroupChoice> {
    let first = &members[0];
    let kernel = &cand.replacement[0].weight;
    let mut shared = cand.replacement[1].clone();
    let c_o = first.params.c_o;
    if members.iter().any(|m| m.bias.is_some()) {
        let mut acc = vec![0.0f64; c_o];
        for m in members {
            if let Some(t) = &m.bias {
                for (a, v) in acc.iter_mut().zip(t.as_slice()) {
                    *a += *v as f64;
                }
            }
        }
        shared.bias =
            Some(Tensor4::new((c_o, 1, 1, 1), acc.iter().map(|&v| v as f32).collect())?);
    }
    let mut pieces = Vec::with_capacity(members.len());
    let mut total_after = 0u64;
    let mut off = 0usize;
    for m in members {
        let c_i = m.params.c_i;
        let mut weight = Tensor4::zeros((b, c_i, m.params.k_h, m.params.k_w))?;
        for r in 0..b {
            for i in 0..c_i {
                for y in 0..m.params.k_h {
                    for x in 0..m.params.k_w {
                        weight.set(r, i, y, x, kernel.get(r, off + i, y, x));
                    }
                }
            }
        }
        let spec = rep_spec(m.kind, crate::model::ConvParams { c_o: b, g: 1, ..m.params });
        let fa = layer_flops(&spec, m.input_shape);
        total_after = total_after.saturating_add(fa);
        pieces.push(MemberPiece {
            name: m.name.clone(),
            spec,
            weight,
            keep_bias: false,
            flops_before: layer_flops(&m.spec(), m.input_shape),
            flops_after: fa,
        });
        off += c_i;
    }
    // The shared mix runs once on the summed b-channel map.
    let mid_shape = next_shape(&pieces[0].spec, first.input_shape)?;
    let shared_flops = layer_flops(&shared.spec, mid_shape);
    total_after = total_after.saturating_add(shared_flops);
    pieces[0].flops_after += shared_flops;
    Ok(GroupChoice {
        kind: GroupKind::SharedOutputSum,
        b,
        accuracy: cand.accuracy,
        flops_before: 0, // filled by caller
        flops_after: total_after,
        shared,
        pieces,
        join: None,
        expected: Vec::new(), // filled by caller
    })
}

/// What the selector decided for one group.
#[derive(Debug, Clone)]
pub enum Decision {
    /// Keep every member unchanged, with an explanation.
    Keep { reason: String },
    /// Replace the single member with a candidate's chain.
    Single { name: String, cand: FactorizationCandidate },
    /// Apply a joint factorization.
    Group(Box<GroupChoice>),
}

/// Decides a group: singleton groups delegate to candidate enumeration and
/// [`choose_best`]; true groups pick the best joint choice clearing the
/// group threshold (minimum member depth — the most conservative).
pub fn approximate_group(
    fused: &Model,
    shapes: &IndexMap<String, Shape>,
    depths: &HashMap<String, f64>,
    group: &ApproximationGroup,
    cfg: &SelectorConfig,
) -> Result<Decision> {
    let depth = group
        .members
        .iter()
        .map(|m| depths.get(m).copied().unwrap_or(0.0))
        .fold(f64::INFINITY, f64::min);
    let t = layer_threshold(cfg, depth);
    match group.kind {
        GroupKind::Singleton => {
            let name = &group.members[0];
            let layer = RepLayer::from_node(fused, shapes, name)?;
            if layer.params.g > 1 {
                return Ok(Decision::Keep {
                    reason: format!("grouped layer (g = {}) is kept as-is", layer.params.g),
                });
            }
            let cands = enumerate_candidates(&layer, &cfg.constraints())?;
            if cands.is_empty() {
                return Ok(Decision::Keep {
                    reason: "no admissible candidate reduces FLOPs".into(),
                });
            }
            match choose_best(&cands, cfg, depth) {
                Some(c) => Ok(Decision::Single { name: name.clone(), cand: c.clone() }),
                None => Ok(Decision::Keep {
                    reason: format!("no candidate met accuracy threshold {t:.4}"),
                }),
            }
        }
        GroupKind::SharedInput | GroupKind::SharedOutputSum => {
            let members: Vec<RepLayer> = group
                .members
                .iter()
                .map(|m| RepLayer::from_node(fused, shapes, m))
                .collect::<Result<_>>()?;
            let choices = group_choices(&members, group.kind, group.join.as_deref(), cfg)?;
            match choices.into_iter().find(|c| c.accuracy >= t) {
                Some(c) => Ok(Decision::Group(Box::new(c))),
                None => Ok(Decision::Keep {
                    reason: format!(
                        "no joint candidate met accuracy threshold {t:.4} with a FLOP reduction"
                    ),
                }),
            }
        }
    }
}

/// Replaces one node with a candidate's replacement chain. The last factor
/// keeps the node's name and output edge so consumers are untouched;
/// returns the chain's node names in graph order.
fn apply_single(model: &mut Model, name: &str, cand: &FactorizationCandidate) -> Result<Vec<String>> {
    let idx = model
        .node_index(name)
        .ok_or_else(|| Error::Graph(format!("node `{name}` not found")))?;
    let node = model.nodes[idx].clone();
    let n = cand.replacement.len();
    let mut new_nodes = Vec::with_capacity(n);
    let mut names = Vec::with_capacity(n);
    let mut prev_edge = node.inputs[0].clone();
    for (i, r) in cand.replacement.iter().enumerate() {
        let is_last = i + 1 == n;
        let node_name = if is_last {
            node.name.clone()
        } else {
            model.fresh_node_name(&format!("{}.f{i}", node.name))
        };
        let out_edge = if is_last {
            node.output.clone()
        } else {
            model.fresh_edge_name(&format!("{}.e{i}", node.name))
        };
        let w_name = model.fresh_tensor_name(&format!("{node_name}.w"));
        model.tensors.insert(w_name.clone(), r.weight.clone());
        new_nodes.push(Node {
            name: node_name.clone(),
            spec: r.spec.clone(),
            inputs: vec![prev_edge.clone()],
            output: out_edge.clone(),
            weights: vec![w_name],
            bias: if is_last { node.bias.clone() } else { None },
        });
        names.push(node_name);
        prev_edge = out_edge;
    }
    model.nodes.splice(idx..=idx, new_nodes);
    Ok(names)
}

fn check_group_fresh(model: &Model, choice: &GroupChoice) -> Result<()> {
    for (name, spec) in &choice.expected {
        let node = model
            .node(name)
            .ok_or_else(|| Error::Graph(format!("stale approximation group: `{name}` is gone")))?;
        if &node.spec != spec {
            return Err(Error::Graph(format!(
                "stale approximation group: `{name}` changed since discovery"
            )));
        }
    }
    Ok(())
}

/// Applies a shared-input group choice: inserts the shared kernel factor
/// before the first member and rewrites each member into its pointwise mix.
/// Returns the shared node's name.
fn apply_shared_input(model: &mut Model, choice: &GroupChoice) -> Result<String> {
    check_group_fresh(model, choice)?;
    let first = &choice.pieces[0].name;
    let first_idx = model.node_index(first).unwrap();
    let input_edge = model.nodes[first_idx].inputs[0].clone();
    for piece in &choice.pieces {
        let idx = model.node_index(&piece.name).unwrap();
        if model.nodes[idx].inputs[0] != input_edge {
            return Err(Error::Graph(format!(
                "stale approximation group: `{}` no longer shares the input",
                piece.name
            )));
        }
    }
    let shared_name = model.fresh_node_name(&format!("{first}.shared"));
    let shared_edge = model.fresh_edge_name(&format!("{shared_name}.out"));
    let shared_w = model.fresh_tensor_name(&format!("{shared_name}.w"));
    model.tensors.insert(shared_w.clone(), choice.shared.weight.clone());
    model.nodes.insert(
        first_idx,
        Node {
            name: shared_name.clone(),
            spec: choice.shared.spec.clone(),
            inputs: vec![input_edge],
            output: shared_edge.clone(),
            weights: vec![shared_w],
            bias: None,
        },
    );
    for piece in &choice.pieces {
        let idx = model.node_index(&piece.name).unwrap();
        let w_name = model.fresh_tensor_name(&format!("{}.w", piece.name));
        model.tensors.insert(w_name.clone(), piece.weight.clone());
        let node = &mut model.nodes[idx];
        node.spec = piece.spec.clone();
        node.inputs = vec![shared_edge.clone()];
        node.weights = vec![w_name];
        // keep_bias: the member's bias ref stays in place.
    }
    Ok(shared_name)
}

/// Applies a shared-output-sum group choice: rewrites each member into its
/// bias-free kernel factor and inserts the shared pointwise mix after the
/// add, taking over the add's output edge. Returns the mix node's name.
fn apply_shared_output(model: &mut Model, choice: &GroupChoice) -> Result<String> {
    check_group_fresh(model, choice)?;
    let join = choice.join.as_deref().ok_or_else(|| {
        Error::Graph("shared-output-sum choice is missing its add node".into())
    })?;
    let add_idx = model
        .node_index(join)
        .ok_or_else(|| Error::Graph(format!("stale approximation group: `{join}` is gone")))?;
    if model.nodes[add_idx].spec != LayerSpec::EltwiseAdd {
        return Err(Error::Graph(format!(
            "stale approximation group: `{join}` is no longer an eltwise add"
        )));
    }
    for piece in &choice.pieces {
        let idx = model.node_index(&piece.name).unwrap();
        let w_name = model.fresh_tensor_name(&format!("{}.w", piece.name));
        model.tensors.insert(w_name.clone(), piece.weight.clone());
        let node = &mut model.nodes[idx];
        node.spec = piece.spec.clone();
        node.weights = vec![w_name];
        node.bias = None;
    }
    let mix_name = model.fresh_node_name(&format!("{join}.mix"));
    let sum_edge = model.fresh_edge_name(&format!("{join}.sum"));
    let out_edge = model.nodes[add_idx].output.clone();
    model.nodes[add_idx].output = sum_edge.clone();
    let w_name = model.fresh_tensor_name(&format!("{mix_name}.w"));
    model.tensors.insert(w_name.clone(), choice.shared.weight.clone());
    let bias = match &choice.shared.bias {
        Some(t) => {
            let b_name = model.fresh_tensor_name(&format!("{mix_name}.bias"));
            model.tensors.insert(b_name.clone(), t.clone());
            Some(b_name)
        }
        None => None,
    };
    model.nodes.insert(
        add_idx + 1,
        Node {
            name: mix_name.clone(),
            spec: choice.shared.spec.clone(),
            inputs: vec![sum_edge],
            output: out_edge,
            weights: vec![w_name],
            bias,
        },
    );
    Ok(mix_name)
}

/// Depth fraction of every representation layer, by node name.
fn rep_depths(m: &Model) -> Result<HashMap<String, f64>> {
    let order = m.topo_order()?;
    let reps: Vec<&str> = order
        .iter()
        .map(|&i| &m.nodes[i])
        .filter(|n| n.spec.kind().is_representation())
        .map(|n| n.name.as_str())
        .collect();
    let mut out = HashMap::new();
    for (i, name) in reps.iter().enumerate() {
        let d = if reps.len() <= 1 { 0.0 } else { i as f64 / (reps.len() - 1) as f64 };
        out.insert(name.to_string(), d);
    }
    Ok(out)
}

/// What one factorized layer contributed to the report.
struct Outcome {
    kind: String,
    ranks: Vec<usize>,
    a: f64,
    r: f64,
    s: f64,
    replacements: Vec<String>,
}

/// Runs the whole pipeline: validation, lossless fusion, grouping, parallel
/// per-group decisions, a sequential deterministic rewrite, and a final
/// audit. The report covers every layer of the *input* model.
pub fn optimize_model(m: &Model, cfg: &SelectorConfig) -> Result<(Model, OptimizationReport)> {
    cfg.validate()?;
    m.check_valid()?;
    let original_cost = model_cost(m)?;
    let original_shapes = m.infer_shapes()?;

    let (fused, events) = run_lossless_pass_logged(m)?;
    let shapes = fused.infer_shapes()?;
    let depths = rep_depths(&fused)?;
    let groups = find_approximation_groups(&fused)?;

    let decisions: Vec<Decision> = groups
        .par_iter()
        .map(|g| approximate_group(&fused, &shapes, &depths, g, cfg))
        .collect::<Result<_>>()?;

    let mut out = fused.clone();
    let mut outcomes: HashMap<String, Outcome> = HashMap::new();
    let mut kept_reasons: HashMap<String, String> = HashMap::new();
    for (group, decision) in groups.iter().zip(&decisions) {
        match decision {
            Decision::Keep { reason } => {
                for member in &group.members {
                    kept_reasons.insert(member.clone(), reason.clone());
                }
            }
            Decision::Single { name, cand } => {
                let names = apply_single(&mut out, name, cand)?;
                outcomes.insert(
                    name.clone(),
                    Outcome {
                        kind: cand.kind.label(),
                        ranks: cand.ranks.clone(),
                        a: cand.accuracy,
                        r: cand.runtime_gain(),
                        s: cand.score(cfg.p),
                        replacements: names,
                    },
                );
            }
            Decision::Group(choice) => {
                let shared_name = match choice.kind {
                    GroupKind::SharedInput => apply_shared_input(&mut out, choice)?,
                    GroupKind::SharedOutputSum => apply_shared_output(&mut out, choice)?,
                    GroupKind::Singleton => unreachable!(),
                };
                let kind_label = format!("{}:filter_wise", choice.kind.label());
                for (n, piece) in choice.pieces.iter().enumerate() {
                    let replacements = match (choice.kind, n) {
                        (GroupKind::SharedInput, 0) => {
                            vec![shared_name.clone(), piece.name.clone()]
                        }
                        (GroupKind::SharedOutputSum, 0) => {
                            vec![piece.name.clone(), shared_name.clone()]
                        }
                        _ => vec![piece.name.clone()],
                    };
                    outcomes.insert(
                        piece.name.clone(),
                        Outcome {
                            kind: kind_label.clone(),
                            ranks: vec![choice.b],
                            a: choice.accuracy,
                            r: choice.runtime_gain(),
                            s: choice.score(cfg.p),
                            replacements,
                        },
                    );
                }
            }
        }
    }

    out.gc_tensors();
    out.check_valid()?;
    let out_shapes = out.infer_shapes()?;
    for edge in m.terminal_edges() {
        if original_shapes.get(&edge) != out_shapes.get(&edge) {
            return Err(Error::Graph(format!(
                "optimization changed the shape of output edge `{edge}`"
            )));
        }
    }
    let final_cost = model_cost(&out)?;
    if final_cost.total_flops > original_cost.total_flops {
        return Err(Error::Graph("optimization increased total FLOPs".into()));
    }

    let report =
        build_report(m, &original_cost, &events, &final_cost, &outcomes, &kept_reasons, cfg);
    Ok((out, report))
}

fn build_report(
    original: &Model,
    original_cost: &CostReport,
    events: &[FusionEvent],
    final_cost: &CostReport,
    outcomes: &HashMap<String, Outcome>,
    kept_reasons: &HashMap<String, String>,
    cfg: &SelectorConfig,
) -> OptimizationReport {
    let orig_flops: HashMap<&str, u64> =
        original_cost.per_node.iter().map(|c| (c.name.as_str(), c.flops)).collect();
    let final_flops: HashMap<&str, u64> =
        final_cost.per_node.iter().map(|c| (c.name.as_str(), c.flops)).collect();
    let fused_away: HashMap<&str, &FusionEvent> =
        events.iter().map(|e| (e.removed.as_str(), e)).collect();

    let mut layers = Vec::with_capacity(original.nodes.len());
    for node in &original.nodes {
        let name = node.name.as_str();
        let before = orig_flops.get(name).copied().unwrap_or(0);
        let record = if let Some(ev) = fused_away.get(name) {
            LayerRecord {
                name: name.into(),
                action: Action::Fused,
                kind: ev.removed_kind.label().into(),
                b: None,
                a: None,
                r: None,
                s: None,
                flops_before: before,
                flops_after: 0,
                reason: Some(format!("{} into {}", ev.pattern, ev.into)),
                replacements: None,
            }
        } else if let Some(o) = outcomes.get(name) {
            let after = o
                .replacements
                .iter()
                .map(|r| final_flops.get(r.as_str()).copied().unwrap_or(0))
                .sum();
            LayerRecord {
                name: name.into(),
                action: Action::Factorized,
                kind: o.kind.clone(),
                b: Some(RankValue::from_ranks(&o.ranks)),
                a: Some(o.a),
                r: Some(o.r),
                s: Some(o.s),
                flops_before: before,
                flops_after: after,
                reason: None,
                replacements: Some(o.replacements.clone()),
            }
        } else {
            let after = final_flops.get(name).copied().unwrap_or(0);
            let mut rec = LayerRecord::kept(name, node.spec.kind().label(), before, after);
            if let Some(reason) = kept_reasons.get(name) {
                rec = rec.with_reason(reason.clone());
            }
            rec
        };
        layers.push(record);
    }

    let ratio = if final_cost.total_flops > 0 {
        original_cost.total_flops as f64 / final_cost.total_flops as f64
    } else {
        1.0
    };
    OptimizationReport {
        config: ReportConfig {
            p: cfg.p,
            start_threshold: cfg.start_threshold,
            target: cfg.target.label().into(),
            rank_grid: cfg.grid.label(),
            max_chain: cfg.max_chain,
            seed: cfg.seed,
        },
        totals: ReportTotals {
            flops_before: original_cost.total_flops,
            flops_after: final_cost.total_flops,
            flop_reduction_ratio: ratio,
            weight_bytes_before: original_cost.total_weight_bytes,
            weight_bytes_after: final_cost.total_weight_bytes,
            activation_bytes_before: original_cost.total_activation_bytes,
            activation_bytes_after: final_cost.total_activation_bytes,
        },
        layers,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluator::compare_models;
    use crate::model::{ConvParams, ModelBuilder, PoolMode, PoolParams};
    use crate::serialize::save_model;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_tensor(dims: (usize, usize, usize, usize), seed: u64) -> Tensor4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.0 * dims.1 * dims.2 * dims.3;
        let data: Vec<f32> = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        Tensor4::new(dims, data).unwrap()
    }

    /// Random weight of rank at most `rank` in the filter-wise flattening.
    fn low_rank_tensor(dims: (usize, usize, usize, usize), rank: usize, seed: u64) -> Tensor4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = dims.0;
        let cols = dims.1 * dims.2 * dims.3;
        let mut data = vec![0.0f32; rows * cols];
        for _ in 0..rank {
            let u: Vec<f32> = (0..rows).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
            let v: Vec<f32> = (0..cols).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
            for r in 0..rows {
                for c in 0..cols {
                    data[r * cols + c] += u[r] * v[c];
                }
            }
        }
        Tensor4::new(dims, data).unwrap()
    }

    fn cfg_with(p: f64) -> SelectorConfig {
        SelectorConfig::with_p(p)
    }

    #[test]
    fn threshold_is_linear_in_depth() {
        let cfg = cfg_with(0.5);
        assert!((layer_threshold(&cfg, 0.0) - 0.99).abs() < 1e-12);
        assert!((layer_threshold(&cfg, 1.0) - 0.5).abs() < 1e-12);
        assert!((layer_threshold(&cfg, 0.5) - 0.745).abs() < 1e-12);
        let cfg9 = cfg_with(0.9);
        assert!((layer_threshold(&cfg9, 0.0) - 0.99).abs() < 1e-12);
    }

    #[test]
    fn score_is_the_weighted_sum() {
        assert!((score(0.9, 0.5, 0.5) - 0.7).abs() < 1e-12);
        assert!((score(0.9, 0.5, 1.0) - 0.9).abs() < 1e-12);
        assert!((score(0.9, 0.5, 0.0) - 0.5).abs() < 1e-12);
    }

    fn synthetic_candidate(
        label_rank: usize,
        accuracy: f64,
        flops_before: u64,
        flops_after: u64,
    ) -> FactorizationCandidate {
        FactorizationCandidate {
            kind: crate::factorization::CandidateKind::Base(FactorKind::FilterWise),
            ranks: vec![label_rank],
            replacement: Vec::new(),
            accuracy,
            flops_before,
            flops_after,
        }
    }

    #[test]
    fn choose_best_filters_then_maximizes_score() {
        let cfg = cfg_with(0.5);
        // depth 1 → threshold 0.5.
        let cands = vec![
            synthetic_candidate(1, 0.4, 1000, 100), // below threshold
            synthetic_candidate(2, 0.8, 1000, 600), // S = 0.6
            synthetic_candidate(3, 0.9, 1000, 800), // S = 0.55
        ];
        let best = choose_best(&cands, &cfg, 1.0).unwrap();
        assert_eq!(best.ranks, vec![2]);
        // All below threshold → keep.
        assert!(choose_best(&cands[..1], &cfg, 1.0).is_none());
        // Tie on S → fewer FLOPs wins.
        let tied = vec![
            synthetic_candidate(4, 0.8, 1000, 400), // S = 0.7
            synthetic_candidate(5, 0.9, 1000, 600), // S = 0.65 + ... recompute
        ];
        // S(4) = 0.5*0.8 + 0.5*0.6 = 0.7; S(5) = 0.5*0.9 + 0.5*0.4 = 0.65.
        assert_eq!(choose_best(&tied, &cfg, 1.0).unwrap().ranks, vec![4]);
        let exact_tie = vec![
            synthetic_candidate(6, 0.8, 1000, 500),
            synthetic_candidate(7, 0.7, 1000, 300),
        ];
        // S(6) = 0.65, S(7) = 0.7 → candidate 7; then force a real tie
        // (values exactly representable in binary so S is bit-equal):
        let real_tie = vec![
            synthetic_candidate(8, 0.5, 1000, 250), // S = 0.25 + 0.375
            synthetic_candidate(9, 0.75, 1000, 500), // S = 0.375 + 0.25
        ];
        assert_eq!(choose_best(&exact_tie, &cfg, 1.0).unwrap().ranks, vec![7]);
        assert_eq!(choose_best(&real_tie, &cfg, 1.0).unwrap().ranks, vec![8]);
    }

    #[test]
    fn config_validation_rejects_bad_settings() {
        assert!(cfg_with(1.2).validate().is_err());
        assert!(cfg_with(-0.1).validate().is_err());
        assert!(SelectorConfig { start_threshold: 0.4, ..cfg_with(0.5) }.validate().is_err());
        assert!(SelectorConfig { grid: RankGrid::Step(0), ..cfg_with(0.5) }.validate().is_err());
        assert!(SelectorConfig { max_chain: 0, ..cfg_with(0.5) }.validate().is_err());
        assert!(cfg_with(0.5).validate().is_ok());
    }

    fn outer_product(u: &[f32], v: &[f32], dims: (usize, usize, usize, usize)) -> Tensor4 {
        let mut data = Vec::with_capacity(u.len() * v.len());
        for &a in u {
            for &b in v {
                data.push(a * b);
            }
        }
        Tensor4::new(dims, data).unwrap()
    }

    fn gaussian(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
    }

    /// input → conv1 → relu → conv2a / conv2b (shared input). The branch
    /// weights share their right factor, so the stacked matrix has rank 1
    /// and the joint rank-1 candidate is exact and strictly best.
    fn shared_input_model() -> Model {
        let p1 = ConvParams::square(6, 3, 3, 1, 1);
        let pa = ConvParams::square(8, 6, 3, 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let v = gaussian(6 * 9, &mut rng);
        let ua = gaussian(8, &mut rng);
        let ub = gaussian(8, &mut rng);
        ModelBuilder::new(Shape::new(3, 8, 8))
            .tensor("w1", random_tensor(p1.weight_dims(), 40))
            .tensor("wa", outer_product(&ua, &v, pa.weight_dims()))
            .tensor("wb", outer_product(&ub, &v, pa.weight_dims()))
            .tensor("ba", random_tensor((8, 1, 1, 1), 43))
            .tensor("bb", random_tensor((8, 1, 1, 1), 44))
            .node("conv1", LayerSpec::Convolution(p1), &["data"], &["w1"], None)
            .node("relu1", LayerSpec::ReLU, &["conv1_out"], &[], None)
            .node("conv2a", LayerSpec::Convolution(pa), &["relu1_out"], &["wa"], Some("ba"))
            .node("conv2b", LayerSpec::Convolution(pa), &["relu1_out"], &["wb"], Some("bb"))
            .build()
    }

    /// Two independent branches whose final convs feed one add. The branch
    /// convs share their left factor, so the input-axis-concatenated matrix
    /// has rank 1 and the joint rank-1 candidate is exact. The branches use
    /// different kernel sizes so no shared-input group forms upstream.
    fn shared_output_model() -> Model {
        let p1a = ConvParams::square(6, 3, 3, 1, 1);
        let p1b = ConvParams::square(5, 3, 5, 1, 2);
        let pa = ConvParams::square(8, 6, 3, 1, 1);
        let pb = ConvParams::square(8, 5, 3, 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let u = gaussian(8, &mut rng);
        let va = gaussian(6 * 9, &mut rng);
        let vb = gaussian(5 * 9, &mut rng);
        ModelBuilder::new(Shape::new(3, 8, 8))
            .tensor("w1a", random_tensor(p1a.weight_dims(), 50))
            .tensor("w1b", low_rank_tensor(p1b.weight_dims(), 1, 55))
            .tensor("wa", outer_product(&u, &va, pa.weight_dims()))
            .tensor("wb", outer_product(&u, &vb, pb.weight_dims()))
            .tensor("ba", random_tensor((8, 1, 1, 1), 53))
            .tensor("bb", random_tensor((8, 1, 1, 1), 54))
            .node("conv1a", LayerSpec::Convolution(p1a), &["data"], &["w1a"], None)
            .node("relu_a", LayerSpec::ReLU, &["conv1a_out"], &[], None)
            .node("conv1b", LayerSpec::Convolution(p1b), &["data"], &["w1b"], None)
            .node("relu_b", LayerSpec::ReLU, &["conv1b_out"], &[], None)
            .node("conv2a", LayerSpec::Convolution(pa), &["relu_a_out"], &["wa"], Some("ba"))
            .node("conv2b", LayerSpec::Convolution(pb), &["relu_b_out"], &["wb"], Some("bb"))
            .node("add", LayerSpec::EltwiseAdd, &["conv2a_out", "conv2b_out"], &[], None)
            .node("relu2", LayerSpec::ReLU, &["add_out"], &[], None)
            .build()
    }

    #[test]
    fn grouping_finds_shared_input_pairs() {
        let m = shared_input_model();
        let groups = find_approximation_groups(&m).unwrap();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].kind, GroupKind::Singleton);
        assert_eq!(groups[0].members, vec!["conv1"]);
        assert_eq!(groups[1].kind, GroupKind::SharedInput);
        assert_eq!(groups[1].members, vec!["conv2a", "conv2b"]);
    }

    #[test]
    fn grouping_finds_shared_output_sums() {
        let m = shared_output_model();
        let groups = find_approximation_groups(&m).unwrap();
        assert_eq!(groups.len(), 3);
        assert!(groups[..2].iter().all(|g| g.kind == GroupKind::Singleton));
        assert_eq!(groups[2].kind, GroupKind::SharedOutputSum);
        assert_eq!(groups[2].members, vec!["conv2a", "conv2b"]);
        assert_eq!(groups[2].join.as_deref(), Some("add"));
    }

    #[test]
    fn grouping_requires_identical_hyperparameters() {
        let pa = ConvParams::square(8, 3, 3, 1, 1);
        let pb = ConvParams::square(8, 3, 3, 2, 1); // different stride
        let m = ModelBuilder::new(Shape::new(3, 9, 9))
            .tensor("wa", random_tensor(pa.weight_dims(), 60))
            .tensor("wb", random_tensor(pb.weight_dims(), 61))
            .node("ca", LayerSpec::Convolution(pa), &["data"], &["wa"], None)
            .node("cb", LayerSpec::Convolution(pb), &["data"], &["wb"], None)
            .build();
        let groups = find_approximation_groups(&m).unwrap();
        assert!(groups.iter().all(|g| g.kind == GroupKind::Singleton));
        assert_eq!(groups.len(), 2);
    }

    #[test]
    fn grouping_rejects_members_with_extra_consumers() {
        // conv2a's output also feeds a pooling layer, so the add's inputs
        // are not exclusively owned and no sum group forms.
        let p1 = ConvParams::square(6, 3, 3, 1, 1);
        let pa = ConvParams::square(8, 6, 3, 1, 1);
        let pool = PoolParams { mode: PoolMode::Max, k_h: 2, k_w: 2, s_h: 2, s_w: 2, pad_h: 0, pad_w: 0 };
        let m = ModelBuilder::new(Shape::new(3, 8, 8))
            .tensor("w1", random_tensor(p1.weight_dims(), 62))
            .tensor("wa", random_tensor(pa.weight_dims(), 63))
            .tensor("wb", random_tensor(pa.weight_dims(), 64))
            .node("conv1", LayerSpec::Convolution(p1), &["data"], &["w1"], None)
            .node("conv2a", LayerSpec::Convolution(pa), &["conv1_out"], &["wa"], None)
            .node("conv2b", LayerSpec::Convolution(pa), &["conv1_out"], &["wb"], None)
            .node("add", LayerSpec::EltwiseAdd, &["conv2a_out", "conv2b_out"], &[], None)
            .node("side", LayerSpec::Pooling(pool), &["conv2a_out"], &[], None)
            .build();
        let groups = find_approximation_groups(&m).unwrap();
        // conv2a/conv2b still share an input, which takes priority anyway.
        assert!(groups.iter().any(|g| g.kind == GroupKind::SharedInput));
        assert!(groups.iter().all(|g| g.kind != GroupKind::SharedOutputSum));
    }

    #[test]
    fn shared_input_group_rewrite_matches_original() {
        let m = shared_input_model();
        let cfg = cfg_with(0.5);
        let (out, report) = optimize_model(&m, &cfg).unwrap();
        let rec = report.record("conv2a").unwrap();
        assert_eq!(rec.action, Action::Factorized);
        assert_eq!(rec.kind, "shared_input:filter_wise");
        let stats = compare_models(&m, &out, 8, 3).unwrap();
        assert!(stats.max_abs <= 1e-4, "max abs {}", stats.max_abs);
        // The shared factor is literally one node with two consumers.
        let shared = out
            .nodes
            .iter()
            .find(|n| n.name.contains(".shared"))
            .expect("shared node present");
        let consumers = out.consumers();
        assert_eq!(consumers[shared.output.as_str()].len(), 2);
        // Member nodes survive with their names and output edges.
        assert!(out.node("conv2a").is_some());
        assert!(out.node("conv2b").is_some());
    }

    #[test]
    fn shared_output_group_rewrite_matches_original() {
        let m = shared_output_model();
        let cfg = cfg_with(0.5);
        let (out, report) = optimize_model(&m, &cfg).unwrap();
        let rec = report.record("conv2b").unwrap();
        assert_eq!(rec.action, Action::Factorized);
        assert_eq!(rec.kind, "shared_output_sum:filter_wise");
        let stats = compare_models(&m, &out, 8, 4).unwrap();
        assert!(stats.max_abs <= 1e-4, "max abs {}", stats.max_abs);
        // The mix node sits after the add and took over its output edge.
        let mix = out.node("add.mix").expect("mix node present");
        assert_eq!(mix.output, "add_out");
        assert_eq!(out.node("add").unwrap().output, "add.sum");
        // Member convs lost their biases; the mix carries the sum.
        assert!(out.node("conv2a").unwrap().bias.is_none());
        assert!(mix.bias.is_some());
        let summed = out.tensor(mix.bias.as_ref().unwrap()).unwrap();
        let ba = random_tensor((8, 1, 1, 1), 53);
        let bb = random_tensor((8, 1, 1, 1), 54);
        for i in 0..8 {
            let want = ba.as_slice()[i] + bb.as_slice()[i];
            assert!((summed.as_slice()[i] - want).abs() < 1e-6);
        }
    }

    /// A plain chain: conv → bn → relu → conv → pool → fc.
    fn chain_model() -> Model {
        let p1 = ConvParams::square(8, 3, 3, 1, 1);
        let p2 = ConvParams::square(12, 8, 3, 1, 1);
        let pool = PoolParams { mode: PoolMode::Avg, k_h: 2, k_w: 2, s_h: 2, s_w: 2, pad_h: 0, pad_w: 0 };
        ModelBuilder::new(Shape::new(3, 8, 8))
            .tensor("w1", random_tensor(p1.weight_dims(), 70))
            .tensor("b1", random_tensor((8, 1, 1, 1), 71))
            .tensor("mu", Tensor4::vector(vec![0.1; 8]).unwrap())
            .tensor("var", Tensor4::vector(vec![1.5; 8]).unwrap())
            .tensor("w2", random_tensor(p2.weight_dims(), 72))
            .tensor("wf", random_tensor((5, 12 * 4 * 4, 1, 1), 73))
            .tensor("bf", random_tensor((5, 1, 1, 1), 74))
            .node("conv1", LayerSpec::Convolution(p1), &["data"], &["w1"], Some("b1"))
            .node("bn1", LayerSpec::BatchNorm { eps: 1e-5 }, &["conv1_out"], &["mu", "var"], None)
            .node("relu1", LayerSpec::ReLU, &["bn1_out"], &[], None)
            .node("conv2", LayerSpec::Convolution(p2), &["relu1_out"], &["w2"], None)
            .node("pool1", LayerSpec::Pooling(pool), &["conv2_out"], &[], None)
            .node(
                "fc1",
                LayerSpec::FullyConnected { c_i: 12 * 4 * 4, c_o: 5 },
                &["pool1_out"],
                &["wf"],
                Some("bf"),
            )
            .build()
    }

    #[test]
    fn optimize_reports_every_original_layer() {
        let m = chain_model();
        let (out, report) = optimize_model(&m, &cfg_with(0.5)).unwrap();
        out.check_valid().unwrap();
        assert_eq!(report.layers.len(), m.nodes.len());
        for node in &m.nodes {
            let rec = report.record(&node.name).expect("record for every original node");
            match rec.action {
                Action::Fused => assert_eq!(rec.flops_after, 0),
                Action::Factorized => {
                    assert!(rec.a.is_some() && rec.r.is_some() && rec.s.is_some());
                    for r in rec.replacements.as_ref().unwrap() {
                        assert!(out.node(r).is_some(), "replacement `{r}` missing");
                    }
                }
                Action::Kept => {}
            }
        }
        // bn1 was folded.
        assert_eq!(report.record("bn1").unwrap().action, Action::Fused);
        assert!(report.totals.flops_after <= report.totals.flops_before);
        // Totals agree with direct cost measurement.
        assert_eq!(report.totals.flops_after, model_cost(&out).unwrap().total_flops);
        // Per-layer FLOPs add up to the totals.
        let sum_after: u64 = report.layers.iter().map(|l| l.flops_after).sum();
        assert_eq!(sum_after, report.totals.flops_after);
        let sum_before: u64 = report.layers.iter().map(|l| l.flops_before).sum();
        assert_eq!(sum_before, report.totals.flops_before);
    }

    #[test]
    fn threshold_soundness_is_auditable_from_report() {
        let m = chain_model();
        let cfg = cfg_with(0.6);
        let (_, report) = optimize_model(&m, &cfg).unwrap();
        // Recompute depths on the fused model exactly as the selector does.
        let (fused, _) = run_lossless_pass_logged(&m).unwrap();
        let depths = rep_depths(&fused).unwrap();
        for rec in &report.layers {
            if rec.action == Action::Factorized {
                let depth = depths[&rec.name];
                let t = layer_threshold(&cfg, depth);
                assert!(
                    rec.a.unwrap() >= t,
                    "{}: A {} below threshold {t}",
                    rec.name,
                    rec.a.unwrap()
                );
            }
        }
    }

    #[test]
    fn optimize_is_deterministic() {
        let m = chain_model();
        let cfg = cfg_with(0.5);
        let (out1, rep1) = optimize_model(&m, &cfg).unwrap();
        let (out2, rep2) = optimize_model(&m, &cfg).unwrap();
        let bytes1 = save_model(&out1);
        let bytes2 = save_model(&out2);
        assert_eq!(bytes1.0, bytes2.0);
        assert_eq!(bytes1.1, bytes2.1);
        assert_eq!(rep1.to_json().unwrap(), rep2.to_json().unwrap());
    }

    #[test]
    fn p_one_with_unit_threshold_only_keeps_exact_rewrites() {
        let m = chain_model();
        let cfg = SelectorConfig { p: 1.0, start_threshold: 1.0, ..Default::default() };
        let (out, report) = optimize_model(&m, &cfg).unwrap();
        // Random full-rank weights: no truncation reaches A = 1 while
        // reducing FLOPs, so everything representation-like is kept.
        for rec in &report.layers {
            assert_ne!(rec.action, Action::Factorized, "{} was factorized", rec.name);
        }
        // Output equals the fused model exactly.
        let (fused, _) = run_lossless_pass_logged(&m).unwrap();
        let stats = compare_models(&fused, &out, 4, 5).unwrap();
        assert_eq!(stats.max_abs, 0.0);
    }

    #[test]
    fn lower_p_never_costs_more_flops() {
        let m = chain_model();
        let (_, rep_high) = optimize_model(&m, &cfg_with(0.9)).unwrap();
        let (_, rep_low) = optimize_model(&m, &cfg_with(0.4)).unwrap();
        assert!(rep_low.totals.flops_after <= rep_high.totals.flops_after);
    }

    #[test]
    fn gpu_target_yields_power_of_two_intermediates() {
        let p1 = ConvParams::square(12, 3, 3, 1, 1);
        let p2 = ConvParams::square(10, 12, 3, 1, 1);
        let m = ModelBuilder::new(Shape::new(3, 8, 8))
            .tensor("w1", low_rank_tensor(p1.weight_dims(), 3, 80))
            .tensor("w2", low_rank_tensor(p2.weight_dims(), 3, 81))
            .node("conv1", LayerSpec::Convolution(p1), &["data"], &["w1"], None)
            .node("conv2", LayerSpec::Convolution(p2), &["conv1_out"], &["w2"], None)
            .build();
        let cfg = SelectorConfig { target: Target::Gpu, ..cfg_with(0.4) };
        let (out, report) = optimize_model(&m, &cfg).unwrap();
        assert!(report.layers.iter().any(|l| l.action == Action::Factorized));
        let shapes = out.infer_shapes().unwrap();
        // Every edge the factorization introduced must carry a power-of-two
        // channel count; pre-existing edges keep their original widths.
        let original_edges: HashSet<&str> = m.nodes.iter().map(|n| n.output.as_str()).collect();
        let mut checked = 0;
        for node in &out.nodes {
            if node.spec.kind().is_representation()
                && !original_edges.contains(node.output.as_str())
            {
                let c = shapes[&node.output].c;
                assert!(c.is_power_of_two(), "edge {} has {} channels", node.output, c);
                checked += 1;
            }
        }
        assert!(checked > 0, "expected factorization to introduce edges");
    }

    #[test]
    fn stale_group_application_fails() {
        let m = shared_input_model();
        let (fused, _) = run_lossless_pass_logged(&m).unwrap();
        let shapes = fused.infer_shapes().unwrap();
        let depths = rep_depths(&fused).unwrap();
        let groups = find_approximation_groups(&fused).unwrap();
        let group = groups.iter().find(|g| g.kind == GroupKind::SharedInput).unwrap();
        let cfg = cfg_with(0.5);
        let decision = approximate_group(&fused, &shapes, &depths, group, &cfg).unwrap();
        let Decision::Group(choice) = decision else { panic!("expected a group decision") };
        // Mutate a member, then try to apply.
        let mut stale = fused.clone();
        let idx = stale.node_index("conv2a").unwrap();
        stale.nodes[idx].spec =
            LayerSpec::Convolution(ConvParams::square(8, 6, 3, 2, 1));
        let err = apply_shared_input(&mut stale, &choice).unwrap_err();
        assert!(matches!(err, Error::Graph(msg) if msg.contains("stale")));
    }

    #[test]
    fn invalid_config_and_model_are_rejected() {
        let m = chain_model();
        assert!(optimize_model(&m, &cfg_with(1.5)).is_err());
        let mut broken = m.clone();
        broken.nodes[3].weights = vec!["missing".into()];
        assert!(optimize_model(&broken, &cfg_with(0.5)).is_err());
    }
}
