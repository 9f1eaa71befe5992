use std::ops::Range;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::math::{self, sigmoid, softplus, Quat, Vec3};
use crate::triplane::{clamp_point, gather_taps, plane_tap, point_taps, PlaneSamples, Tap};
use crate::volume_render::composite::{composite_backward, composite_kernel};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Rows per parallel work item. Reductions are split on these fixed
/// boundaries and summed in order, so results do not depend on the number of
/// worker threads.
const ROW_CHUNK: usize = 2048;
const GATHER_CHUNK: usize = 16384;
const PAR_THRESHOLD: usize = 4096;

/// Geometry of a batched composite: `rays × samples` with `channels` colors.
#[derive(Debug, Clone)]
pub struct CompositeLayout {
    pub rays: usize,
    pub samples: usize,
    pub channels: usize,
    /// `rays × samples` depths.
    pub depths: Arc<Vec<f64>>,
    /// `rays × samples` spacings.
    pub deltas: Arc<Vec<f64>>,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Exp(Var),
    Softplus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    Clamp01(Var),
    Sum(Var),
    Mean(Var),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { a: Var, rows: usize, cols: usize },
    AddRow { a: Var, row: Var, n: usize },
    MulRow { a: Var, row: Var, n: usize },
    RowSoftmax { a: Var, n: usize },
    LayerNorm { a: Var, n: usize, inv_std: Vec<f64> },
    Select { a: Var, idx: Arc<Vec<usize>> },
    Gather { planes: Var, res: usize, ch: usize, points: PointSource },
    SamplePlanes { planes: Var, res: usize, ch: usize, uvs: Arc<PlaneSamples> },
    Composite { sigma: Var, color: Var, layout: CompositeLayout },
    QuatRotate { q: Var, points: Var, pivot: Vec3 },
    Upsample { a: Var, res: usize, ch: usize, factor: usize },
    AvgPool2 { a: Var, side: usize, ch: usize },
}

#[derive(Debug, Clone)]
enum PointSource {
    Fixed(Arc<Vec<Vec3>>),
    Node(Var),
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Records vector-valued primitives for one reverse pass.
///
/// Every node holds a flat `Vec<f64>`; a scalar is a length-1 node. Only
/// nodes downstream of a [`Tape::param`] leaf take part in the reverse pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    differentiated: bool,
    fault: Option<Fault>,
}

/// A deliberate backward-pass error, for checking that gradient checks fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Negates the density adjoint of every composite.
    CompositeSigmaSign,
}

/// Adjoints from one reverse pass.
#[derive(Debug)]
pub struct Gradients {
    adj: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Gradients {
    /// Gradient for `v`, zeros when nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Vec<f64> {
        match &self.adj[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.lens[v.0]],
        }
    }

    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.adj[v.0].as_deref()
    }
}

/// Names accepted by [`Tape::apply`].
pub const REGISTERED_PRIMITIVES: &[&str] = &[
    "add", "sub", "mul", "neg", "exp", "softplus", "sigmoid", "tanh", "abs", "sum", "mean",
];

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Corrupts later backward passes of this tape.
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(vec![v])
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn take_value(&mut self, v: Var) -> Vec<f64> {
        std::mem::take(&mut self.nodes[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn size(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    /// Dispatches a registered elementwise or reduction primitive by name.
    pub fn apply(&mut self, name: &str, args: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if args.len() != n {
                return Err(Error::Config(format!("primitive `{name}` takes {n} argument(s), got {}", args.len())));
            }
            Ok(())
        };
        let v = match name {
            "add" => {
                arity(2)?;
                self.add(args[0], args[1])
            }
            "sub" => {
                arity(2)?;
                self.sub(args[0], args[1])
            }
            "mul" => {
                arity(2)?;
                self.mul(args[0], args[1])
            }
            "neg" => {
                arity(1)?;
                self.scale(args[0], -1.0)
            }
            "exp" => {
                arity(1)?;
                self.exp(args[0])
            }
            "softplus" => {
                arity(1)?;
                self.softplus(args[0])
            }
            "sigmoid" => {
                arity(1)?;
                self.sigmoid(args[0])
            }
            "tanh" => {
                arity(1)?;
                self.tanh(args[0])
            }
            "abs" => {
                arity(1)?;
                self.abs(args[0])
            }
            "sum" => {
                arity(1)?;
                self.sum(args[0])
            }
            "mean" => {
                arity(1)?;
                self.mean(args[0])
            }
            other => return Err(Error::UnknownPrimitive(other.to_string())),
        };
        Ok(v)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if vb.len() == 1 {
            let s = vb[0];
            va.iter().map(|x| f(*x, s)).collect()
        } else {
            assert_eq!(va.len(), vb.len(), "elementwise operands differ in length");
            va.iter().zip(vb).map(|(x, y)| f(*x, *y)).collect()
        }
    }

    /// `a + b`; `b` may be a scalar broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x + y);
        let g = self.grad_of(&[a, b]);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x - y);
        let g = self.grad_of(&[a, b]);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x * y);
        let g = self.grad_of(&[a, b]);
        self.push(v, Op::Mul(a, b), g)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.nodes[a.0].value.iter().map(|x| x * k).collect();
        let g = self.grad_of(&[a]);
        self.push(v, Op::Scale(a, k), g)
    }

    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        let v = self.nodes[a.0].value.iter().map(|x| x + k).collect();
        let g = self.grad_of(&[a]);
        self.push(v, Op::Offset(a), g)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64 + Sync) -> Var {
        let src = &self.nodes[a.0].value;
        let v: Vec<f64> = if src.len() >= PAR_THRESHOLD {
            src.par_iter().map(|x| f(*x)).collect()
        } else {
            src.iter().map(|x| f(*x)).collect()
        };
        let g = self.grad_of(&[a]);
        self.push(v, op, g)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    /// `|a|` with subgradient 0 at 0.
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn clamp01(&mut self, a: Var) -> Var {
        self.unary(a, Op::Clamp01(a), |x| x.clamp(0.0, 1.0))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        let g = self.grad_of(&[a]);
        self.push(vec![s], Op::Sum(a), g)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let src = &self.nodes[a.0].value;
        let s = src.iter().sum::<f64>() / src.len() as f64;
        let g = self.grad_of(&[a]);
        self.push(vec![s], Op::Mean(a), g)
    }

    /// `(m × k) · (k × n)`, row-major.
    pub fn matmul(&mut self, a: Var, b: Var, m: usize, k: usize, n: usize) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.len(), m * k, "matmul lhs shape");
        assert_eq!(vb.len(), k * n, "matmul rhs shape");
        let mut out = vec![0.0; m * n];
        let row = |(i, o): (usize, &mut [f64])| {
            let ar = &va[i * k..(i + 1) * k];
            for (kk, &x) in ar.iter().enumerate() {
                let br = &vb[kk * n..(kk + 1) * n];
                for (ov, bv) in o.iter_mut().zip(br) {
                    *ov += x * bv;
                }
            }
        };
        if m * n >= PAR_THRESHOLD {
            out.par_chunks_mut(n).enumerate().for_each(row);
        } else {
            out.chunks_mut(n).enumerate().for_each(row);
        }
        let g = self.grad_of(&[a, b]);
        self.push(out, Op::MatMul { a, b, m, k, n }, g)
    }

    pub fn transpose(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let va = &self.nodes[a.0].value;
        assert_eq!(va.len(), rows * cols);
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = va[i * cols + j];
            }
        }
        let g = self.grad_of(&[a]);
        self.push(out, Op::Transpose { a, rows, cols }, g)
    }

    /// Adds a length-`n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var, n: usize) -> Var {
        let (va, vr) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        assert_eq!(vr.len(), n);
        assert_eq!(va.len() % n, 0);
        let out = va.iter().enumerate().map(|(i, x)| x + vr[i % n]).collect();
        let g = self.grad_of(&[a, row]);
        self.push(out, Op::AddRow { a, row, n }, g)
    }

    pub fn mul_row(&mut self, a: Var, row: Var, n: usize) -> Var {
        let (va, vr) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        assert_eq!(vr.len(), n);
        assert_eq!(va.len() % n, 0);
        let out = va.iter().enumerate().map(|(i, x)| x * vr[i % n]).collect();
        let g = self.grad_of(&[a, row]);
        self.push(out, Op::MulRow { a, row, n }, g)
    }

    /// Softmax over each length-`n` row.
    pub fn row_softmax(&mut self, a: Var, n: usize) -> Var {
        let va = &self.nodes[a.0].value;
        let mut out = vec![0.0; va.len()];
        for (src, dst) in va.chunks(n).zip(out.chunks_mut(n)) {
            let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - max).exp();
                total += *d;
            }
            for d in dst.iter_mut() {
                *d /= total;
            }
        }
        let g = self.grad_of(&[a]);
        self.push(out, Op::RowSoftmax { a, n }, g)
    }

    /// Zero-mean, unit-variance normalisation of each length-`n` row.
    pub fn layer_norm(&mut self, a: Var, n: usize) -> Var {
        const EPS: f64 = 1e-5;
        let va = &self.nodes[a.0].value;
        let rows = va.len() / n;
        let mut out = vec![0.0; va.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for (src, dst) in va.chunks(n).zip(out.chunks_mut(n)) {
            let mean = src.iter().sum::<f64>() / n as f64;
            let var = src.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + EPS).sqrt();
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * is;
            }
            inv_std.push(is);
        }
        let g = self.grad_of(&[a]);
        self.push(out, Op::LayerNorm { a, n, inv_std }, g)
    }

    /// `out[i] = a[idx[i]]`.
    pub fn select(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Var {
        let va = &self.nodes[a.0].value;
        let out = idx.iter().map(|&i| va[i]).collect();
        let g = self.grad_of(&[a]);
        self.push(out, Op::Select { a, idx }, g)
    }

    /// Contiguous elements `range` of `a`.
    pub fn slice(&mut self, a: Var, range: Range<usize>) -> Var {
        assert!(range.end <= self.size(a), "slice out of bounds");
        self.select(a, Arc::new(range.collect()))
    }

    /// Columns `[start, start + len)` of an `m × n` matrix.
    pub fn columns(&mut self, a: Var, n: usize, start: usize, len: usize) -> Var {
        let m = self.size(a) / n;
        let idx: Vec<usize> = (0..m).flat_map(|i| (start..start + len).map(move |j| i * n + j)).collect();
        self.select(a, Arc::new(idx))
    }

    fn gather_forward(planes: &[f64], res: usize, ch: usize, pts: &[Vec3]) -> Vec<f64> {
        let mut out = vec![0.0; pts.len() * ch];
        let one = |(x, o): (&Vec3, &mut [f64])| {
            let taps = point_taps(res, ch, clamp_point(*x));
            gather_taps(planes, &taps, ch, o);
        };
        if pts.len() >= PAR_THRESHOLD {
            pts.par_iter().zip(out.par_chunks_mut(ch)).for_each(one);
        } else {
            pts.iter().zip(out.chunks_mut(ch)).for_each(one);
        }
        out
    }

    /// Summed triplane features at fixed points (clamped to `[-1, 1]³`).
    /// `planes` is a flat triplane of `res² × ch` per plane.
    pub fn gather(&mut self, planes: Var, res: usize, ch: usize, points: Arc<Vec<Vec3>>) -> Var {
        assert_eq!(self.size(planes), 3 * res * res * ch, "gather planes shape");
        let out = Self::gather_forward(&self.nodes[planes.0].value, res, ch, &points);
        let g = self.grad_of(&[planes]);
        self.push(out, Op::Gather { planes, res, ch, points: PointSource::Fixed(points) }, g)
    }

    /// Like [`Tape::gather`] with differentiable point coordinates.
    pub fn gather_at(&mut self, planes: Var, res: usize, ch: usize, points: Var) -> Var {
        assert_eq!(self.size(planes), 3 * res * res * ch, "gather planes shape");
        let pts: Vec<Vec3> = self.nodes[points.0]
            .value
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        let out = Self::gather_forward(&self.nodes[planes.0].value, res, ch, &pts);
        let g = self.grad_of(&[planes, points]);
        self.push(out, Op::Gather { planes, res, ch, points: PointSource::Node(points) }, g)
    }

    /// Per-plane bilinear lookups; rows are the XY samples, then YZ, then ZX.
    pub fn sample_planes(&mut self, planes: Var, res: usize, ch: usize, uvs: Arc<PlaneSamples>) -> Var {
        let vp = &self.nodes[planes.0].value;
        assert_eq!(vp.len(), 3 * res * res * ch, "sample_planes shape");
        let plane_len = res * res * ch;
        let total: usize = uvs.iter().map(Vec::len).sum();
        let mut out = vec![0.0; total * ch];
        let mut row = 0;
        for (p, list) in uvs.iter().enumerate() {
            for &uv in list {
                let tap = plane_tap(res, ch, p * plane_len, uv);
                gather_taps(vp, &[tap], ch, &mut out[row * ch..(row + 1) * ch]);
                row += 1;
            }
        }
        let g = self.grad_of(&[planes]);
        self.push(out, Op::SamplePlanes { planes, res, ch, uvs }, g)
    }

    /// Batched emission–absorption compositing. Output is
    /// `rays × (channels + 2)`: features, then depth, then opacity.
    pub fn composite(&mut self, sigma: Var, color: Var, layout: CompositeLayout) -> Var {
        let (r, s, c) = (layout.rays, layout.samples, layout.channels);
        let (vs, vc) = (&self.nodes[sigma.0].value, &self.nodes[color.0].value);
        assert_eq!(vs.len(), r * s, "composite sigma shape");
        assert_eq!(vc.len(), r * s * c, "composite color shape");
        let stride = c + 2;
        let mut out = vec![0.0; r * stride];
        let one = |(ray, o): (usize, &mut [f64])| {
            let mut weights = vec![0.0; s];
            let rs = ray * s..(ray + 1) * s;
            let (feat, tail) = o.split_at_mut(c);
            let (d, op) = composite_kernel(
                &vs[rs.clone()],
                &vc[ray * s * c..(ray + 1) * s * c],
                &layout.depths[rs.clone()],
                &layout.deltas[rs],
                c,
                feat,
                &mut weights,
            );
            tail[0] = d;
            tail[1] = op;
        };
        if r >= 64 {
            out.par_chunks_mut(stride).enumerate().for_each(one);
        } else {
            out.chunks_mut(stride).enumerate().for_each(one);
        }
        let g = self.grad_of(&[sigma, color]);
        self.push(out, Op::Composite { sigma, color, layout }, g)
    }

    /// Rotates each point of an `N × 3` node about `pivot` by the
    /// normalised quaternion `q` (`[w, x, y, z]`).
    pub fn quat_rotate(&mut self, q: Var, points: Var, pivot: Vec3) -> Var {
        let vq = &self.nodes[q.0].value;
        assert_eq!(vq.len(), 4);
        let n = math::quat_normalize([vq[0], vq[1], vq[2], vq[3]]);
        let m = math::quat_to_matrix(n);
        let out = self.nodes[points.0]
            .value
            .chunks_exact(3)
            .flat_map(|p| {
                let local = math::sub([p[0], p[1], p[2]], pivot);
                math::add(pivot, math::mat_vec(&m, local))
            })
            .collect();
        let g = self.grad_of(&[q, points]);
        self.push(out, Op::QuatRotate { q, points, pivot }, g)
    }

    /// Bilinear upsampling of the first three channels of a
    /// `res × res × ch` image by an integer `factor`.
    pub fn upsample(&mut self, a: Var, res: usize, ch: usize, factor: usize) -> Var {
        let va = &self.nodes[a.0].value;
        assert!(ch >= 3 && va.len() == res * res * ch);
        let out = upsample_forward(va, res, ch, factor);
        let g = self.grad_of(&[a]);
        self.push(out, Op::Upsample { a, res, ch, factor }, g)
    }

    /// 2×2 box average of a `side × side × ch` image (side even).
    pub fn avg_pool2(&mut self, a: Var, side: usize, ch: usize) -> Var {
        let va = &self.nodes[a.0].value;
        assert!(side.is_multiple_of(2) && va.len() == side * side * ch);
        let out = avg_pool2_forward(va, side, ch);
        let g = self.grad_of(&[a]);
        self.push(out, Op::AvgPool2 { a, side, ch }, g)
    }

    /// Reverse pass from the scalar `output`. A tape can be differentiated
    /// once; a second request is rejected.
    pub fn backward(&mut self, output: Var) -> Result<Gradients> {
        if self.differentiated {
            return Err(Error::NestedDifferentiation);
        }
        if self.size(output) != 1 {
            return Err(Error::Config(format!(
                "backward needs a scalar output, node has {} values",
                self.size(output)
            )));
        }
        self.differentiated = true;
        let n = self.nodes.len();
        let mut adj: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        adj[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        let lens = self.nodes.iter().map(|nd| nd.value.len()).collect();
        Ok(Gradients { adj, lens })
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| -> &[f64] { &self.nodes[v.0].value };
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if wants(*a) {
                    accumulate(adj, *a, val(*a).len(), |d| add_into(d, g));
                }
                if wants(*b) {
                    let lb = val(*b).len();
                    accumulate(adj, *b, lb, |d| {
                        if lb == 1 && g.len() != 1 {
                            d[0] += sign * g.iter().sum::<f64>();
                        } else {
                            for (x, y) in d.iter_mut().zip(g) {
                                *x += sign * y;
                            }
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let broadcast = vb.len() == 1 && va.len() != 1;
                if wants(*a) {
                    accumulate(adj, *a, va.len(), |d| {
                        if broadcast {
                            for (x, y) in d.iter_mut().zip(g) {
                                *x += y * vb[0];
                            }
                        } else {
                            for ((x, y), bv) in d.iter_mut().zip(g).zip(vb) {
                                *x += y * bv;
                            }
                        }
                    });
                }
                if wants(*b) {
                    accumulate(adj, *b, vb.len(), |d| {
                        if broadcast {
                            d[0] += g.iter().zip(va).map(|(y, x)| y * x).sum::<f64>();
                        } else {
                            for ((x, y), av) in d.iter_mut().zip(g).zip(va) {
                                *x += y * av;
                            }
                        }
                    });
                }
            }
            Op::Scale(a, k) => {
                accumulate(adj, *a, g.len(), |d| {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x += k * y;
                    }
                });
            }
            Op::Offset(a) => accumulate(adj, *a, g.len(), |d| add_into(d, g)),
            Op::Exp(a) => {
                let out = &node.value;
                accumulate(adj, *a, g.len(), |d| {
                    for ((x, y), o) in d.iter_mut().zip(g).zip(out) {
                        *x += y * o;
                    }
                });
            }
            Op::Softplus(a) => {
                let src = val(*a);
                accumulate(adj, *a, g.len(), |d| {
                    for ((x, y), s) in d.iter_mut().zip(g).zip(src) {
                        *x += y * sigmoid(*s);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let out = &node.value;
                accumulate(adj, *a, g.len(), |d| {
                    for ((x, y), o) in d.iter_mut().zip(g).zip(out) {
                        *x += y * o * (1.0 - o);
                    }
                });
            }
            Op::Tanh(a) => {
                let out = &node.value;
                accumulate(adj, *a, g.len(), |d| {
                    for ((x, y), o) in d.iter_mut().zip(g).zip(out) {
                        *x += y * (1.0 - o * o);
                    }
                });
            }
            Op::Abs(a) => {
                let src = val(*a);
                accumulate(adj, *a, g.len(), |d| {
                    for ((x, y), s) in d.iter_mut().zip(g).zip(src) {
                        let sign = if *s > 0.0 {
                            1.0
                        } else if *s < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        *x += y * sign;
                    }
                });
            }
            Op::Clamp01(a) => {
                let src = val(*a);
                accumulate(adj, *a, g.len(), |d| {
                    for ((x, y), s) in d.iter_mut().zip(g).zip(src) {
                        if (0.0..=1.0).contains(s) {
                            *x += y;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let len = val(*a).len();
                accumulate(adj, *a, len, |d| d.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Mean(a) => {
                let len = val(*a).len();
                let s = g[0] / len as f64;
                accumulate(adj, *a, len, |d| d.iter_mut().for_each(|x| *x += s));
            }
            Op::MatMul { a, b, m, k, n } => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (*m, *k, *n);
                if wants(*a) {
                    // dA = G Bᵀ
                    accumulate(adj, *a, m * k, |d| {
                        let row = |(i, dr): (usize, &mut [f64])| {
                            let gr = &g[i * n..(i + 1) * n];
                            for (kk, x) in dr.iter_mut().enumerate() {
                                let br = &vb[kk * n..(kk + 1) * n];
                                let mut acc = 0.0;
                                for (gv, bv) in gr.iter().zip(br) {
                                    acc += gv * bv;
                                }
                                *x += acc;
                            }
                        };
                        if m * k >= PAR_THRESHOLD {
                            d.par_chunks_mut(k).enumerate().for_each(row);
                        } else {
                            d.chunks_mut(k).enumerate().for_each(row);
                        }
                    });
                }
                if wants(*b) {
                    // dB = Aᵀ G, reduced over fixed row chunks
                    let partial = chunked_reduce(m, ROW_CHUNK, k * n, |rows, buf| {
                        for i in rows {
                            let ar = &va[i * k..(i + 1) * k];
                            let gr = &g[i * n..(i + 1) * n];
                            for (kk, &x) in ar.iter().enumerate() {
                                let dst = &mut buf[kk * n..(kk + 1) * n];
                                for (dv, gv) in dst.iter_mut().zip(gr) {
                                    *dv += x * gv;
                                }
                            }
                        }
                    });
                    accumulate(adj, *b, k * n, |d| add_into(d, &partial));
                }
            }
            Op::Transpose { a, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                accumulate(adj, *a, rows * cols, |d| {
                    for i in 0..rows {
                        for j in 0..cols {
                            d[i * cols + j] += g[j * rows + i];
                        }
                    }
                });
            }
            Op::AddRow { a, row, n } => {
                let n = *n;
                if wants(*a) {
                    accumulate(adj, *a, g.len(), |d| add_into(d, g));
                }
                if wants(*row) {
                    let m = g.len() / n;
                    let partial = chunked_reduce(m, ROW_CHUNK, n, |rows, buf| {
                        for i in rows {
                            add_into(buf, &g[i * n..(i + 1) * n]);
                        }
                    });
                    accumulate(adj, *row, n, |d| add_into(d, &partial));
                }
            }
            Op::MulRow { a, row, n } => {
                let n = *n;
                let (va, vr) = (val(*a), val(*row));
                if wants(*a) {
                    accumulate(adj, *a, g.len(), |d| {
                        for (idx, (x, y)) in d.iter_mut().zip(g).enumerate() {
                            *x += y * vr[idx % n];
                        }
                    });
                }
                if wants(*row) {
                    let m = g.len() / n;
                    let partial = chunked_reduce(m, ROW_CHUNK, n, |rows, buf| {
                        for i in rows {
                            for j in 0..n {
                                buf[j] += g[i * n + j] * va[i * n + j];
                            }
                        }
                    });
                    accumulate(adj, *row, n, |d| add_into(d, &partial));
                }
            }
            Op::RowSoftmax { a, n } => {
                let out = &node.value;
                accumulate(adj, *a, g.len(), |d| {
                    for ((dr, gr), yr) in d.chunks_mut(*n).zip(g.chunks(*n)).zip(out.chunks(*n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for ((x, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *x += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { a, n, inv_std } => {
                let n = *n;
                let out = &node.value;
                accumulate(adj, *a, g.len(), |d| {
                    for (r, ((dr, gr), yr)) in d.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)).enumerate() {
                        let mg = gr.iter().sum::<f64>() / n as f64;
                        let mgy = gr.iter().zip(yr).map(|(x, y)| x * y).sum::<f64>() / n as f64;
                        for ((x, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *x += inv_std[r] * (gv - mg - yv * mgy);
                        }
                    }
                });
            }
            Op::Select { a, idx } => {
                let len = val(*a).len();
                accumulate(adj, *a, len, |d| {
                    for (gv, &j) in g.iter().zip(idx.iter()) {
                        d[j] += gv;
                    }
                });
            }
            Op::Gather { planes, res, ch, points } => {
                let (res, ch) = (*res, *ch);
                let vp = val(*planes);
                let owned;
                let (pts, pts_var): (&[Vec3], Option<Var>) = match points {
                    PointSource::Fixed(p) => (p.as_slice(), None),
                    PointSource::Node(v) => {
                        owned = val(*v).chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect::<Vec<Vec3>>();
                        (owned.as_slice(), Some(*v))
                    }
                };
                if wants(*planes) {
                    let partial = chunked_reduce(pts.len(), GATHER_CHUNK, vp.len(), |range, buf| {
                        for p in range {
                            let taps = point_taps(res, ch, clamp_point(pts[p]));
                            let gp = &g[p * ch..(p + 1) * ch];
                            for tap in &taps {
                                scatter_tap(buf, tap, gp, ch);
                            }
                        }
                    });
                    accumulate(adj, *planes, vp.len(), |d| add_into(d, &partial));
                }
                if let Some(pv) = pts_var.filter(|v| wants(*v)) {
                    accumulate(adj, pv, pts.len() * 3, |d| {
                        for (p, x) in pts.iter().enumerate() {
                            let taps = point_taps(res, ch, clamp_point(*x));
                            let gp = &g[p * ch..(p + 1) * ch];
                            let mut dx = [0.0; 3];
                            // plane (u, v) axes: XY -> (0, 1), YZ -> (1, 2), ZX -> (2, 0)
                            for (tap, (ua, va_)) in taps.iter().zip([(0usize, 1usize), (1, 2), (2, 0)]) {
                                let (du, dv) = tap_coord_grad(vp, tap, gp, ch);
                                dx[ua] += du;
                                dx[va_] += dv;
                            }
                            d[3 * p] += dx[0];
                            d[3 * p + 1] += dx[1];
                            d[3 * p + 2] += dx[2];
                        }
                    });
                }
            }
            Op::SamplePlanes { planes, res, ch, uvs } => {
                let (res, ch) = (*res, *ch);
                let len = val(*planes).len();
                let plane_len = res * res * ch;
                accumulate(adj, *planes, len, |d| {
                    let mut row = 0;
                    for (p, list) in uvs.iter().enumerate() {
                        for &uv in list {
                            let tap = plane_tap(res, ch, p * plane_len, uv);
                            scatter_tap(d, &tap, &g[row * ch..(row + 1) * ch], ch);
                            row += 1;
                        }
                    }
                });
            }
            Op::Composite { sigma, color, layout } => {
                let (r, s, c) = (layout.rays, layout.samples, layout.channels);
                let (vs, vc) = (val(*sigma), val(*color));
                let stride = c + 2;
                let mut gs = vec![0.0; r * s];
                let mut gc = vec![0.0; r * s * c];
                let one = |((ray, gs_r), gc_r): ((usize, &mut [f64]), &mut [f64])| {
                    let go = &g[ray * stride..(ray + 1) * stride];
                    let rs = ray * s..(ray + 1) * s;
                    let mut scratch = Vec::new();
                    composite_backward(
                        &vs[rs.clone()],
                        &vc[ray * s * c..(ray + 1) * s * c],
                        &layout.depths[rs.clone()],
                        &layout.deltas[rs],
                        c,
                        &go[..c],
                        go[c],
                        go[c + 1],
                        Some(gs_r),
                        Some(gc_r),
                        &mut scratch,
                    );
                };
                if r >= 64 {
                    gs.par_chunks_mut(s)
                        .enumerate()
                        .zip(gc.par_chunks_mut(s * c))
                        .for_each(one);
                } else {
                    gs.chunks_mut(s).enumerate().zip(gc.chunks_mut(s * c)).for_each(one);
                }
                if self.fault == Some(Fault::CompositeSigmaSign) {
                    gs.iter_mut().for_each(|v| *v = -*v);
                }
                if wants(*sigma) {
                    accumulate(adj, *sigma, r * s, |d| add_into(d, &gs));
                }
                if wants(*color) {
                    accumulate(adj, *color, r * s * c, |d| add_into(d, &gc));
                }
            }
            Op::QuatRotate { q, points, pivot } => {
                let vq = val(*q);
                let raw: Quat = [vq[0], vq[1], vq[2], vq[3]];
                let qn = math::quat_norm(raw);
                let nq = math::quat_normalize(raw);
                let m = math::quat_to_matrix(nq);
                let vp = val(*points);
                if wants(*points) {
                    accumulate(adj, *points, vp.len(), |d| {
                        for (dp, gp) in d.chunks_mut(3).zip(g.chunks(3)) {
                            let back = math::mat_t_vec(&m, [gp[0], gp[1], gp[2]]);
                            dp[0] += back[0];
                            dp[1] += back[1];
                            dp[2] += back[2];
                        }
                    });
                }
                if wants(*q) {
                    // G = Σ g_i (p_i − pivot)ᵀ
                    let mut gm = [[0.0; 3]; 3];
                    for (p, gp) in vp.chunks(3).zip(g.chunks(3)) {
                        let l = math::sub([p[0], p[1], p[2]], *pivot);
                        for a in 0..3 {
                            for b in 0..3 {
                                gm[a][b] += gp[a] * l[b];
                            }
                        }
                    }
                    let dn = quat_matrix_vjp(nq, &gm);
                    // through n = q / |q|
                    let dot = math::quat_dot(dn, nq);
                    accumulate(adj, *q, 4, |d| {
                        for c in 0..4 {
                            d[c] += (dn[c] - nq[c] * dot) / qn;
                        }
                    });
                }
            }
            Op::Upsample { a, res, ch, factor } => {
                let (res, ch, f) = (*res, *ch, *factor);
                accumulate(adj, *a, res * res * ch, |d| upsample_backward(g, res, ch, f, d));
            }
            Op::AvgPool2 { a, side, ch } => {
                let (side, ch) = (*side, *ch);
                accumulate(adj, *a, side * side * ch, |d| {
                    let half = side / 2;
                    for r in 0..side {
                        for c in 0..side {
                            let o = ((r / 2) * half + c / 2) * ch;
                            for k in 0..ch {
                                d[(r * side + c) * ch + k] += 0.25 * g[o + k];
                            }
                        }
                    }
                });
            }
        }
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    for (x, y) in d.iter_mut().zip(g) {
        *x += y;
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = adj[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

/// Sums per-chunk partial buffers in chunk order.
fn chunked_reduce<F>(items: usize, chunk: usize, out_len: usize, f: F) -> Vec<f64>
where
    F: Fn(Range<usize>, &mut [f64]) + Sync,
{
    let ranges: Vec<Range<usize>> = (0..items.div_ceil(chunk))
        .map(|c| c * chunk..((c + 1) * chunk).min(items))
        .collect();
    if ranges.len() <= 1 {
        let mut buf = vec![0.0; out_len];
        if let Some(r) = ranges.into_iter().next() {
            f(r, &mut buf);
        }
        return buf;
    }
    let partials: Vec<Vec<f64>> = ranges
        .into_par_iter()
        .map(|r| {
            let mut buf = vec![0.0; out_len];
            f(r, &mut buf);
            buf
        })
        .collect();
    let mut iter = partials.into_iter();
    let mut total = iter.next().unwrap();
    for p in iter {
        add_into(&mut total, &p);
    }
    total
}

#[inline]
fn scatter_tap(buf: &mut [f64], tap: &Tap, g: &[f64], ch: usize) {
    for corner in 0..4 {
        let w = tap.weights[corner];
        if w == 0.0 {
            continue;
        }
        let dst = &mut buf[tap.offsets[corner]..tap.offsets[corner] + ch];
        for (d, gv) in dst.iter_mut().zip(g) {
            *d += w * gv;
        }
    }
}

#[inline]
fn tap_coord_grad(data: &[f64], tap: &Tap, g: &[f64], ch: usize) -> (f64, f64) {
    let mut du = 0.0;
    let mut dv = 0.0;
    for corner in 0..4 {
        let t = &data[tap.offsets[corner]..tap.offsets[corner] + ch];
        let dot: f64 = t.iter().zip(g).map(|(a, b)| a * b).sum();
        du += tap.du[corner] * dot;
        dv += tap.dv[corner] * dot;
    }
    (du, dv)
}

/// `∂L/∂n` for `R(n)` given `G = ∂L/∂R`.
fn quat_matrix_vjp(n: Quat, gm: &[[f64; 3]; 3]) -> Quat {
    let [w, x, y, z] = n;
    let dw = [[0.0, -2.0 * z, 2.0 * y], [2.0 * z, 0.0, -2.0 * x], [-2.0 * y, 2.0 * x, 0.0]];
    let dx = [[0.0, 2.0 * y, 2.0 * z], [2.0 * y, -4.0 * x, -2.0 * w], [2.0 * z, 2.0 * w, -4.0 * x]];
    let dy = [[-4.0 * y, 2.0 * x, 2.0 * w], [2.0 * x, 0.0, 2.0 * z], [-2.0 * w, 2.0 * z, -4.0 * y]];
    let dz = [[-4.0 * z, -2.0 * w, 2.0 * x], [2.0 * w, -4.0 * z, 2.0 * y], [2.0 * x, 2.0 * y, 0.0]];
    let contract = |dm: &[[f64; 3]; 3]| {
        let mut s = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                s += dm[a][b] * gm[a][b];
            }
        }
        s
    };
    [contract(&dw), contract(&dx), contract(&dy), contract(&dz)]
}

/// Source taps of one output coordinate: `(i0, i1, frac)` under the
/// half-pixel convention with clamp-to-edge.
pub(crate) fn upsample_axis(out_len: usize, src_len: usize) -> Vec<(usize, usize, f64)> {
    let f = out_len as f64 / src_len as f64;
    (0..out_len)
        .map(|o| {
            let s = ((o as f64 + 0.5) / f - 0.5).clamp(0.0, (src_len - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src_len - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

pub(crate) fn upsample_forward(src: &[f64], res: usize, ch: usize, factor: usize) -> Vec<f64> {
    let out_res = res * factor;
    let axis = upsample_axis(out_res, res);
    let mut out = vec![0.0; out_res * out_res * 3];
    for (oy, &(y0, y1, fy)) in axis.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in axis.iter().enumerate() {
            let o = (oy * out_res + ox) * 3;
            for k in 0..3 {
                let a = src[(y0 * res + x0) * ch + k];
                let b = src[(y0 * res + x1) * ch + k];
                let c = src[(y1 * res + x0) * ch + k];
                let d = src[(y1 * res + x1) * ch + k];
                out[o + k] = (1.0 - fy) * ((1.0 - fx) * a + fx * b) + fy * ((1.0 - fx) * c + fx * d);
            }
        }
    }
    out
}

fn upsample_backward(g: &[f64], res: usize, ch: usize, factor: usize, d: &mut [f64]) {
    let out_res = res * factor;
    let axis = upsample_axis(out_res, res);
    for (oy, &(y0, y1, fy)) in axis.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in axis.iter().enumerate() {
            let o = (oy * out_res + ox) * 3;
            for k in 0..3 {
                let gv = g[o + k];
                d[(y0 * res + x0) * ch + k] += gv * (1.0 - fy) * (1.0 - fx);
                d[(y0 * res + x1) * ch + k] += gv * (1.0 - fy) * fx;
                d[(y1 * res + x0) * ch + k] += gv * fy * (1.0 - fx);
                d[(y1 * res + x1) * ch + k] += gv * fy * fx;
            }
        }
    }
}

pub(crate) fn avg_pool2_forward(src: &[f64], side: usize, ch: usize) -> Vec<f64> {
    let half = side / 2;
    let mut out = vec![0.0; half * half * ch];
    for r in 0..half {
        for c in 0..half {
            for k in 0..ch {
                let at = |rr: usize, cc: usize| src[(rr * side + cc) * ch + k];
                out[(r * half + c) * ch + k] =
                    0.25 * (at(2 * r, 2 * c) + at(2 * r, 2 * c + 1) + at(2 * r + 1, 2 * c) + at(2 * r + 1, 2 * c + 1));
            }
        }
    }
    out
}
