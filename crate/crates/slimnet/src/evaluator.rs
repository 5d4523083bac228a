//! Direct (reference) execution of a model on a single input sample.
//!
//! The point of this evaluator is trust, not speed: every layer is the
//! plainest possible loop over `Vec` data, in a fixed order, so results
//! are deterministic and easy to audit. It doubles as the counting oracle
//! for the closed-form cost table: the inner convolution loops count one
//! multiply per kernel tap (padding taps included — they multiply an
//! explicit zero).
//!
//! Arithmetic runs in `f32` by default; [`forward_f64`] accumulates in
//! `f64` as a debug aid for separating algorithm error from rounding.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{ConvParams, LayerSpec, Model, PoolMode, PoolParams, Shape};
use crate::tensor::Tensor4;

/// Scalar type the evaluator can run in.
pub trait Scalar:
    Copy
    + PartialOrd
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
{
    const ZERO: Self;
    const NEG_INF: Self;
    fn from_f32(v: f32) -> Self;
    fn to_f32(self) -> f32;
    fn sqrt(self) -> Self;
}

impl Scalar for f32 {
    const ZERO: f32 = 0.0;
    const NEG_INF: f32 = f32::NEG_INFINITY;
    fn from_f32(v: f32) -> f32 {
        v
    }
    fn to_f32(self) -> f32 {
        self
    }
    fn sqrt(self) -> f32 {
        self.sqrt()
    }
}

impl Scalar for f64 {
    const ZERO: f64 = 0.0;
    const NEG_INF: f64 = f64::NEG_INFINITY;
    fn from_f32(v: f32) -> f64 {
        v as f64
    }
    fn to_f32(self) -> f32 {
        self as f32
    }
    fn sqrt(self) -> f64 {
        self.sqrt()
    }
}

/// One activation map.
struct Act<F> {
    shape: Shape,
    data: Vec<F>,
}

impl<F: Scalar> Act<F> {
    fn zeros(shape: Shape) -> Self {
        Act { shape, data: vec![F::ZERO; shape.elements()] }
    }

    #[inline]
    fn get(&self, c: usize, y: usize, x: usize) -> F {
        self.data[(c * self.shape.h + y) * self.shape.w + x]
    }

    #[inline]
    fn set(&mut self, c: usize, y: usize, x: usize, v: F) {
        self.data[(c * self.shape.h + y) * self.shape.w + x] = v;
    }

    fn to_tensor(&self) -> Tensor4 {
        let data: Vec<f32> = self.data.iter().map(|v| v.to_f32()).collect();
        Tensor4::with_ndim((self.shape.c, self.shape.h, self.shape.w, 1), 3, data)
            .expect("activation dims")
    }
}

/// Runs the model on one `(c, h, w)` input and returns every edge
/// activation as an `ndim=3` tensor, keyed by edge name in production
/// order.
pub fn forward(m: &Model, input: &Tensor4) -> Result<IndexMap<String, Tensor4>> {
    Ok(run::<f32>(m, input, None)?.0)
}

/// As [`forward`] but accumulating in `f64` (outputs are still cast back
/// to `f32` tensors).
pub fn forward_f64(m: &Model, input: &Tensor4) -> Result<IndexMap<String, Tensor4>> {
    Ok(run::<f64>(m, input, None)?.0)
}

/// As [`forward`], additionally returning the multiply count of every
/// representation layer, keyed by node name.
pub fn forward_counted(
    m: &Model,
    input: &Tensor4,
) -> Result<(IndexMap<String, Tensor4>, IndexMap<String, u64>)> {
    let mut counts = IndexMap::new();
    let acts = run::<f32>(m, input, Some(&mut counts))?.0;
    Ok((acts, counts))
}

fn run<F: Scalar>(
    m: &Model,
    input: &Tensor4,
    mut counts: Option<&mut IndexMap<String, u64>>,
) -> Result<(IndexMap<String, Tensor4>, ())> {
    let shapes = m.infer_shapes()?;
    let want = m.input_shape;
    let (d0, d1, d2, d3) = input.dims();
    if (d0, d1, d2, d3) != (want.c, want.h, want.w, 1) {
        return Err(Error::InvalidArgument(format!(
            "input dims {:?} do not match model input shape {want}",
            input.dims()
        )));
    }

    let mut acts: IndexMap<String, Act<F>> = IndexMap::new();
    let order = m.topo_order()?;
    for idx in order {
        let node = &m.nodes[idx];
        let out_shape = *shapes.get(&node.output).expect("inferred shape");
        let get_in = |i: usize| -> &Act<F> { acts.get(&node.inputs[i]).expect("topo order") };
        let mut mults: u64 = 0;
        let out = match &node.spec {
            LayerSpec::Input => {
                let mut a = Act::zeros(out_shape);
                for (dst, &src) in a.data.iter_mut().zip(input.as_slice()) {
                    *dst = F::from_f32(src);
                }
                a
            }
            LayerSpec::Convolution(p) => {
                let w = cast_weights::<F>(m.tensor(&node.weights[0])?);
                let b = bias_vec::<F>(m, node)?;
                conv(get_in(0), out_shape, p, &w, b.as_deref(), &mut mults)
            }
            LayerSpec::Deconvolution(p) => {
                let w = cast_weights::<F>(m.tensor(&node.weights[0])?);
                let b = bias_vec::<F>(m, node)?;
                deconv(get_in(0), out_shape, p, &w, b.as_deref(), &mut mults)
            }
            LayerSpec::FullyConnected { c_i, c_o } => {
                let w = cast_weights::<F>(m.tensor(&node.weights[0])?);
                let b = bias_vec::<F>(m, node)?;
                let x = get_in(0);
                let mut a = Act::zeros(out_shape);
                for o in 0..*c_o {
                    let mut acc = b.as_ref().map_or(F::ZERO, |b| b[o]);
                    for f in 0..*c_i {
                        acc = acc + w[o * c_i + f] * x.data[f];
                        mults += 1;
                    }
                    a.data[o] = acc;
                }
                a
            }
            LayerSpec::BatchNorm { .. } => {
                let bn = m.batch_norm_params(node)?;
                let x = get_in(0);
                let mut a = Act::zeros(out_shape);
                for c in 0..out_shape.c {
                    let mu = F::from_f32(bn.mu[c]);
                    let denom = (F::from_f32(bn.var[c]) + F::from_f32(bn.eps)).sqrt();
                    for y in 0..out_shape.h {
                        for x_ in 0..out_shape.w {
                            a.set(c, y, x_, (x.get(c, y, x_) - mu) / denom);
                        }
                    }
                }
                a
            }
            LayerSpec::Scale => {
                let sc = m.scale_params(node)?;
                let x = get_in(0);
                let mut a = Act::zeros(out_shape);
                for c in 0..out_shape.c {
                    let alpha = F::from_f32(sc.alpha[c]);
                    let beta = F::from_f32(sc.beta[c]);
                    for y in 0..out_shape.h {
                        for x_ in 0..out_shape.w {
                            a.set(c, y, x_, x.get(c, y, x_) * alpha + beta);
                        }
                    }
                }
                a
            }
            LayerSpec::ReLU => {
                let x = get_in(0);
                let mut a = Act::zeros(out_shape);
                for (dst, &src) in a.data.iter_mut().zip(&x.data) {
                    *dst = if src > F::ZERO { src } else { F::ZERO };
                }
                a
            }
            LayerSpec::Pooling(p) => pool(get_in(0), out_shape, p),
            LayerSpec::EltwiseAdd => {
                let mut a = Act::zeros(out_shape);
                for i in 0..node.inputs.len() {
                    let x = get_in(i);
                    for (dst, &src) in a.data.iter_mut().zip(&x.data) {
                        *dst = *dst + src;
                    }
                }
                a
            }
        };
        if node.spec.kind().is_representation() {
            if let Some(c) = counts.as_deref_mut() {
                c.insert(node.name.clone(), mults);
            }
        }
        acts.insert(node.output.clone(), out);
    }

    let tensors = acts.iter().map(|(k, v)| (k.clone(), v.to_tensor())).collect();
    Ok((tensors, ()))
}

fn cast_weights<F: Scalar>(t: &Tensor4) -> Vec<F> {
    t.as_slice().iter().map(|&v| F::from_f32(v)).collect()
}

fn bias_vec<F: Scalar>(m: &Model, node: &crate::model::Node) -> Result<Option<Vec<F>>> {
    match &node.bias {
        Some(b) => Ok(Some(cast_weights::<F>(m.tensor(b)?))),
        None => Ok(None),
    }
}

fn conv<F: Scalar>(
    x: &Act<F>,
    out_shape: Shape,
    p: &ConvParams,
    w: &[F],
    bias: Option<&[F]>,
    mults: &mut u64,
) -> Act<F> {
    let mut out = Act::zeros(out_shape);
    let cig = p.c_i / p.g;
    let cog = p.c_o / p.g;
    let (kh, kw) = (p.k_h, p.k_w);
    for o in 0..p.c_o {
        let grp = o / cog;
        for oy in 0..out_shape.h {
            for ox in 0..out_shape.w {
                let mut acc = bias.map_or(F::ZERO, |b| b[o]);
                for il in 0..cig {
                    let ic = grp * cig + il;
                    for ky in 0..kh {
                        let iy = (oy * p.s_h + ky) as isize - p.pad_h as isize;
                        for kx in 0..kw {
                            let ix = (ox * p.s_w + kx) as isize - p.pad_w as isize;
                            let v = if iy >= 0
                                && (iy as usize) < x.shape.h
                                && ix >= 0
                                && (ix as usize) < x.shape.w
                            {
                                x.get(ic, iy as usize, ix as usize)
                            } else {
                                F::ZERO
                            };
                            acc = acc + w[((o * cig + il) * kh + ky) * kw + kx] * v;
                            *mults += 1;
                        }
                    }
                }
                out.set(o, oy, ox, acc);
            }
        }
    }
    out
}

/// Transposed convolution as a gather: output pixel `(oy, ox)` pulls from
/// input pixel `((oy + pad - ky) / s, ...)` when that offset lands on the
/// stride grid inside the input; off-grid taps contribute a zero (and are
/// still counted — the cost model charges every tap).
fn deconv<F: Scalar>(
    x: &Act<F>,
    out_shape: Shape,
    p: &ConvParams,
    w: &[F],
    bias: Option<&[F]>,
    mults: &mut u64,
) -> Act<F> {
    let mut out = Act::zeros(out_shape);
    let cig = p.c_i / p.g;
    let cog = p.c_o / p.g;
    let (kh, kw) = (p.k_h, p.k_w);
    for o in 0..p.c_o {
        let grp = o / cog;
        for oy in 0..out_shape.h {
            for ox in 0..out_shape.w {
                let mut acc = bias.map_or(F::ZERO, |b| b[o]);
                for il in 0..cig {
                    let ic = grp * cig + il;
                    for ky in 0..kh {
                        let ny = (oy + p.pad_h) as isize - ky as isize;
                        for kx in 0..kw {
                            let nx = (ox + p.pad_w) as isize - kx as isize;
                            let v = if ny >= 0
                                && nx >= 0
                                && ny % p.s_h as isize == 0
                                && nx % p.s_w as isize == 0
                                && (ny / p.s_h as isize) < x.shape.h as isize
                                && (nx / p.s_w as isize) < x.shape.w as isize
                            {
                                x.get(ic, (ny / p.s_h as isize) as usize, (nx / p.s_w as isize) as usize)
                            } else {
                                F::ZERO
                            };
                            acc = acc + w[((o * cig + il) * kh + ky) * kw + kx] * v;
                            *mults += 1;
                        }
                    }
                }
                out.set(o, oy, ox, acc);
            }
        }
    }
    out
}

fn pool<F: Scalar>(x: &Act<F>, out_shape: Shape, p: &PoolParams) -> Act<F> {
    let mut out = Act::zeros(out_shape);
    for c in 0..out_shape.c {
        for oy in 0..out_shape.h {
            for ox in 0..out_shape.w {
                let mut acc = match p.mode {
                    PoolMode::Max => F::NEG_INF,
                    PoolMode::Avg => F::ZERO,
                };
                for ky in 0..p.k_h {
                    let iy = (oy * p.s_h + ky) as isize - p.pad_h as isize;
                    if iy < 0 || iy as usize >= x.shape.h {
                        continue;
                    }
                    for kx in 0..p.k_w {
                        let ix = (ox * p.s_w + kx) as isize - p.pad_w as isize;
                        if ix < 0 || ix as usize >= x.shape.w {
                            continue;
                        }
                        let v = x.get(c, iy as usize, ix as usize);
                        acc = match p.mode {
                            PoolMode::Max => {
                                if v > acc {
                                    v
                                } else {
                                    acc
                                }
                            }
                            PoolMode::Avg => acc + v,
                        };
                    }
                }
                // Average pooling treats padding as zeros: divide by the
                // full window size.
                if matches!(p.mode, PoolMode::Avg) {
                    acc = acc / F::from_f32((p.k_h * p.k_w) as f32);
                }
                out.set(c, oy, ox, acc);
            }
        }
    }
    out
}

/// Standard-normal input samples for a shape, reproducible from the seed.
pub fn random_inputs(shape: Shape, n: usize, seed: u64) -> Vec<Tensor4> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let data: Vec<f32> =
                (0..shape.elements()).map(|_| StandardNormal.sample(&mut rng)).collect();
            Tensor4::with_ndim((shape.c, shape.h, shape.w, 1), 3, data).expect("input dims")
        })
        .collect()
}

/// Per-edge output difference between two models.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeDiff {
    pub edge: String,
    /// Largest elementwise |a - b| over all samples.
    pub max_abs: f64,
    /// sum|a - b| / (sum|a| + 1e-12), i.e. L1 error relative to the
    /// reference model `a`.
    pub mean_rel: f64,
}

/// Output difference summary over every terminal edge.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffStats {
    pub per_edge: Vec<EdgeDiff>,
    /// Max of the per-edge `max_abs`.
    pub max_abs: f64,
    /// Mean of the per-edge `mean_rel`.
    pub mean_rel: f64,
}

/// Feeds `n_inputs` seeded standard-normal samples through both models and
/// compares the terminal-edge outputs (model `a` is the reference). The
/// models must agree on input shape and terminal edge names.
pub fn compare_models(a: &Model, b: &Model, n_inputs: usize, seed: u64) -> Result<DiffStats> {
    if a.input_shape != b.input_shape {
        return Err(Error::InvalidArgument(format!(
            "input shapes differ: {} vs {}",
            a.input_shape, b.input_shape
        )));
    }
    let mut ta = a.terminal_edges();
    let mut tb = b.terminal_edges();
    ta.sort();
    tb.sort();
    if ta != tb {
        return Err(Error::InvalidArgument(format!(
            "terminal edges differ: {ta:?} vs {tb:?}"
        )));
    }
    if n_inputs == 0 {
        return Err(Error::InvalidArgument("n_inputs must be positive".into()));
    }

    let mut max_abs = vec![0.0f64; ta.len()];
    let mut sum_diff = vec![0.0f64; ta.len()];
    let mut sum_ref = vec![0.0f64; ta.len()];
    for input in random_inputs(a.input_shape, n_inputs, seed) {
        let out_a = forward(a, &input)?;
        let out_b = forward(b, &input)?;
        for (i, edge) in ta.iter().enumerate() {
            let xa = out_a[edge].as_slice();
            let xb = out_b[edge].as_slice();
            for (&va, &vb) in xa.iter().zip(xb) {
                let d = (va as f64 - vb as f64).abs();
                max_abs[i] = max_abs[i].max(d);
                sum_diff[i] += d;
                sum_ref[i] += (va as f64).abs();
            }
        }
    }
    let per_edge: Vec<EdgeDiff> = ta
        .iter()
        .enumerate()
        .map(|(i, edge)| EdgeDiff {
            edge: edge.clone(),
            max_abs: max_abs[i],
            mean_rel: sum_diff[i] / (sum_ref[i] + 1e-12),
        })
        .collect();
    let overall_max = per_edge.iter().map(|e| e.max_abs).fold(0.0, f64::max);
    let overall_rel =
        per_edge.iter().map(|e| e.mean_rel).sum::<f64>() / per_edge.len() as f64;
    Ok(DiffStats { per_edge, max_abs: overall_max, mean_rel: overall_rel })
}
