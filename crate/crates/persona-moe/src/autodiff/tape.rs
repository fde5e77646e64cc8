//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every forward op appends a node recording its inputs and any values the
//! backward rule needs. `backward` walks the tape in reverse, accumulating
//! gradients into each `requires_grad` node. The tape is rebuilt per training
//! step (dynamic graph) and is strictly single-threaded.

use crate::autodiff::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Reduction mode for the language-modeling loss. `Sum` is the canonical
/// per-sequence form; `Mean` divides by the number of positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    Mean,
}

enum Payload<F: Real> {
    Leaf,
    Add(Var, Var),
    AddN(Vec<Var>),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: F },
    MulScalar { x: Var, s: Var },
    AddRowBroadcast { m: Var, v: Var },
    MatMul { a: Var, b: Var },
    MatMulNT { a: Var, b: Var },
    Relu(Var),
    Gelu(Var),
    Square(Var),
    SumAll(Var),
    MeanRows(Var),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Embedding { table: Var, ids: Vec<usize> },
    SoftmaxRows { x: Var, tau: F, causal: bool },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor<F>, inv_std: Vec<F> },
    CosineSim { a: Var, b: Var, dot: F, norm_a: F, norm_b: F },
    CrossEntropyLm { logits: Var, targets: Vec<usize>, reduction: Reduction, probs: Tensor<F> },
    StackScalars(Vec<Var>),
    IndexScalar { x: Var, index: usize },
}

struct Node<F: Real> {
    payload: Payload<F>,
    value: Tensor<F>,
    requires_grad: bool,
    grad: Option<Tensor<F>>,
}

/// The computation tape. Append-only during forward; `backward` fills
/// gradients for every node that requires them.
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

// ── raw kernels ──────────────────────────────────────────────────────

/// out[m,n] += a[m,k] · b[k,n]
fn matmul_acc<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &apk) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += apk * bv;
            }
        }
    }
}

/// out[m,n] += a[m,k] · b[n,k]ᵀ
fn matmul_nt_acc<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let dot: F = arow.iter().zip(brow.iter()).map(|(&x, &y)| x * y).sum();
            *o += dot;
        }
    }
}

/// out[k,n] += a[m,k]ᵀ · b[m,n]
fn matmul_tn_acc<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &apk) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += apk * bv;
            }
        }
    }
}

fn gelu_forward<F: Real>(x: F) -> F {
    // tanh approximation; smooth everywhere, which keeps finite-difference
    // checks meaningful
    let c = F::real(0.7978845608028654); // sqrt(2/pi)
    let k = F::real(0.044715);
    let u = c * (x + k * x * x * x);
    F::real(0.5) * x * (F::one() + u.tanh())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::real(0.7978845608028654);
    let k = F::real(0.044715);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (F::one() + F::real(3.0) * k * x * x);
    F::real(0.5) * (F::one() + t) + F::real(0.5) * x * (F::one() - t * t) * du
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, payload: Payload<F>, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            payload,
            value,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// The cached forward value of a node.
    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a node, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Clear all accumulated gradients, keeping the graph.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ── graph construction ───────────────────────────────────────────

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(Payload::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn constant_scalar(&mut self, v: F) -> Var {
        self.leaf(Tensor::scalar(v), false)
    }

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape {
                op,
                details: format!("{:?} vs {:?}", sa, sb),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Payload::Add(a, b), value, rg))
    }

    /// Sum of same-shaped tensors. Handy for folding loss terms.
    pub fn add_n(&mut self, terms: &[Var]) -> Result<Var> {
        let first = *terms.first().ok_or_else(|| Error::InvalidInput("add_n needs at least one term".into()))?;
        let shape = self.value(first).shape().to_vec();
        let mut data = vec![F::zero(); self.value(first).numel()];
        for &t in terms {
            self.check_same_shape("add_n", first, t)?;
            for (o, &v) in data.iter_mut().zip(self.value(t).data()) {
                *o += v;
            }
        }
        let rg = terms.iter().any(|&t| self.rg(t));
        Ok(self.push(Payload::AddN(terms.to_vec()), Tensor::new(shape, data)?, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Payload::Sub(a, b), value, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Payload::Mul(a, b), value, rg))
    }

    /// Elementwise `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: F, shift: F) -> Var {
        let data = self.value(x).data().iter().map(|&v| scale * v + shift).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(Payload::Affine { x, scale }, value, rg)
    }

    /// Multiply a tensor by a scalar variable (gradients flow to both).
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(Error::Shape {
                op: "mul_scalar",
                details: format!("scale has shape {:?}", self.value(s).shape()),
            });
        }
        let sv = self.value(s).item();
        let data = self.value(x).data().iter().map(|&v| v * sv).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(Payload::MulScalar { x, s }, value, rg))
    }

    /// Add a length-k vector to every row of an [m,k] matrix.
    pub fn add_row_broadcast(&mut self, m: Var, v: Var) -> Result<Var> {
        let (rows, cols) = self.value(m).dims2();
        if self.value(v).shape() != [cols] {
            return Err(Error::Shape {
                op: "add_row_broadcast",
                details: format!("matrix {:?} vs vector {:?}", self.value(m).shape(), self.value(v).shape()),
            });
        }
        let vd = self.value(v).data().to_vec();
        let mut data = self.value(m).data().to_vec();
        for r in 0..rows {
            for (o, &b) in data[r * cols..(r + 1) * cols].iter_mut().zip(&vd) {
                *o += b;
            }
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        let rg = self.rg(m) || self.rg(v);
        Ok(self.push(Payload::AddRowBroadcast { m, v }, value, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                details: format!("{:?} x {:?}", self.value(a).shape(), self.value(b).shape()),
            });
        }
        let mut out = vec![F::zero(); m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Payload::MatMul { a, b }, Tensor::new(vec![m, n], out)?, rg))
    }

    /// a[m,k] · b[n,k]ᵀ → [m,n]
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (n, k2) = self.value(b).dims2();
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_nt",
                details: format!("{:?} x {:?}ᵀ", self.value(a).shape(), self.value(b).shape()),
            });
        }
        let mut out = vec![F::zero(); m * n];
        matmul_nt_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Payload::MatMulNT { a, b }, Tensor::new(vec![m, n], out)?, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > F::zero() { v } else { F::zero() })
            .collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(Payload::Relu(x), value, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| gelu_forward(v)).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(Payload::Gelu(x), value, rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| v * v).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(Payload::Square(x), value, rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: F = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Payload::SumAll(x), Tensor::scalar(s), rg)
    }

    /// Mean over rows of an [m,k] matrix, yielding a length-k vector.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, k) = self.value(x).dims2();
        let inv = F::one() / F::real(m as f64);
        let mut out = vec![F::zero(); k];
        for r in 0..m {
            for (o, &v) in out.iter_mut().zip(&self.value(x).data()[r * k..(r + 1) * k]) {
                *o += v * inv;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Payload::MeanRows(x), Tensor::vector(out), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, k) = self.value(x).dims2();
        if start >= end || end > m {
            return Err(Error::Shape {
                op: "slice_rows",
                details: format!("rows {}..{} of {}", start, end, m),
            });
        }
        let data = self.value(x).data()[start * k..end * k].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Payload::SliceRows { x, start }, Tensor::new(vec![end - start, k], data)?, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, k) = self.value(x).dims2();
        if start >= end || end > k {
            return Err(Error::Shape {
                op: "slice_cols",
                details: format!("cols {}..{} of {}", start, end, k),
            });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for r in 0..m {
            data.extend_from_slice(&self.value(x).data()[r * k + start..r * k + end]);
        }
        let rg = self.rg(x);
        Ok(self.push(Payload::SliceCols { x, start }, Tensor::new(vec![m, w], data)?, rg))
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::InvalidInput("concat_cols needs at least one part".into()))?;
        let (m, _) = self.value(first).dims2();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (pm, pk) = self.value(p).dims2();
                debug_assert_eq!(pm, m);
                pk
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Payload::ConcatCols(parts.to_vec()), Tensor::new(vec![m, total], data)?, rg))
    }

    /// Row gather: ids index into a [V,d] table, producing [len,d].
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.value(table).dims2();
        if ids.is_empty() {
            return Err(Error::InvalidInput("embedding lookup on empty id sequence".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::InvalidInput(format!("token id {} out of range for vocab {}", bad, v)));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&self.value(table).data()[id * d..(id + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Payload::Embedding { table, ids: ids.to_vec() },
            Tensor::new(vec![ids.len(), d], data)?,
            rg,
        ))
    }

    /// Row-wise temperature softmax. With `causal`, row i is a softmax over
    /// columns 0..=i and zero beyond (for square score matrices).
    pub fn softmax_rows(&mut self, x: Var, tau: F, causal: bool) -> Result<Var> {
        if tau <= F::zero() {
            return Err(Error::InvalidParameter {
                name: "tau",
                details: format!("temperature must be positive, got {}", tau),
            });
        }
        let (m, k) = self.value(x).dims2();
        if causal && m != k {
            return Err(Error::Shape {
                op: "softmax_rows",
                details: format!("causal softmax needs a square matrix, got {:?}", self.value(x).shape()),
            });
        }
        let mut out = vec![F::zero(); m * k];
        for r in 0..m {
            let width = if causal { r + 1 } else { k };
            let row = &self.value(x).data()[r * k..r * k + width];
            let maxv = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut denom = F::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = ((v - maxv) / tau).exp();
                out[r * k + j] = e;
                denom += e;
            }
            for o in &mut out[r * k..r * k + width] {
                *o = *o / denom;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Payload::SoftmaxRows { x, tau, causal }, Tensor::new(vec![m, k], out)?, rg))
    }

    /// Temperature-scaled softmax over a vector of logits.
    pub fn softmax_with_temperature(&mut self, logits: Var, tau: F) -> Result<Var> {
        let n = self.value(logits).numel();
        if self.value(logits).shape().len() != 1 {
            return Err(Error::Shape {
                op: "softmax_with_temperature",
                details: format!("expected a vector, got {:?}", self.value(logits).shape()),
            });
        }
        if !self.value(logits).all_finite() {
            return Err(Error::NonFinite("softmax_with_temperature"));
        }
        // reuse the row kernel on a [1,n] view
        let as_row = {
            let t = Tensor::new(vec![1, n], self.value(logits).data().to_vec())?;
            let rg = self.rg(logits);
            // SliceRows with start 0 is an exact pass-through reshape
            self.push(Payload::SliceRows { x: logits, start: 0 }, t, rg)
        };
        let sm = self.softmax_rows(as_row, tau, false)?;
        let flat = Tensor::vector(self.value(sm).data().to_vec());
        let rg = self.rg(sm);
        Ok(self.push(Payload::SliceRows { x: sm, start: 0 }, flat, rg))
    }

    /// Row-wise layer normalization with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let (m, k) = self.value(x).dims2();
        if self.value(gamma).shape() != [k] || self.value(beta).shape() != [k] {
            return Err(Error::Shape {
                op: "layer_norm",
                details: format!(
                    "x {:?}, gamma {:?}, beta {:?}",
                    self.value(x).shape(),
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            });
        }
        let inv_k = F::one() / F::real(k as f64);
        let mut xhat = vec![F::zero(); m * k];
        let mut inv_std = vec![F::zero(); m];
        let mut out = vec![F::zero(); m * k];
        for r in 0..m {
            let row = &self.value(x).data()[r * k..(r + 1) * k];
            let mean: F = row.iter().copied().sum::<F>() * inv_k;
            let var: F = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_k;
            let istd = F::one() / (var + eps).sqrt();
            inv_std[r] = istd;
            for j in 0..k {
                let xh = (row[j] - mean) * istd;
                xhat[r * k + j] = xh;
                out[r * k + j] = self.value(gamma).data()[j] * xh + self.value(beta).data()[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let xhat = Tensor::new(vec![m, k], xhat)?;
        Ok(self.push(
            Payload::LayerNorm { x, gamma, beta, xhat, inv_std },
            Tensor::new(vec![m, k], out)?,
            rg,
        ))
    }

    /// Cosine similarity between two vectors: a·b / (‖a‖‖b‖).
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape().len() != 1 || self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape {
                op: "cosine_similarity",
                details: format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            });
        }
        let norm_a = self.value(a).l2_norm();
        let norm_b = self.value(b).l2_norm();
        let tiny = F::real(1e-30);
        if norm_a < tiny || norm_b < tiny {
            return Err(Error::DegenerateInput {
                op: "cosine_similarity",
                details: "zero-norm vector".into(),
            });
        }
        let dot: F = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .sum();
        let cosv = dot / (norm_a * norm_b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Payload::CosineSim { a, b, dot, norm_a, norm_b },
            Tensor::scalar(cosv),
            rg,
        ))
    }

    /// Token-level cross entropy of a [T,V] logit matrix against T target
    /// ids: −Σ_t log p(target_t). `Sum` is the per-sequence total.
    pub fn cross_entropy_lm(&mut self, logits: Var, targets: &[usize], reduction: Reduction) -> Result<Var> {
        let (t, v) = self.value(logits).dims2();
        if targets.len() != t {
            return Err(Error::InvalidInput(format!(
                "cross_entropy_lm: {} logit rows vs {} targets",
                t,
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&id| id >= v) {
            return Err(Error::InvalidInput(format!(
                "cross_entropy_lm: target id {} out of range for vocab {}",
                bad, v
            )));
        }
        let mut probs = vec![F::zero(); t * v];
        let mut total = F::zero();
        for r in 0..t {
            let row = &self.value(logits).data()[r * v..(r + 1) * v];
            let maxv = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut denom = F::zero();
            for (j, &lv) in row.iter().enumerate() {
                let e = (lv - maxv).exp();
                probs[r * v + j] = e;
                denom += e;
            }
            for p in &mut probs[r * v..(r + 1) * v] {
                *p = *p / denom;
            }
            // -log p(target) via logsumexp for stability
            let lse = denom.ln() + maxv;
            total += lse - row[targets[r]];
        }
        if reduction == Reduction::Mean {
            total = total / F::real(t as f64);
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Payload::CrossEntropyLm {
                logits,
                targets: targets.to_vec(),
                reduction,
                probs: Tensor::new(vec![t, v], probs)?,
            },
            Tensor::scalar(total),
            rg,
        ))
    }

    /// Collect scalar nodes into one vector node.
    pub fn stack_scalars(&mut self, scalars: &[Var]) -> Result<Var> {
        if scalars.is_empty() {
            return Err(Error::InvalidInput("stack_scalars on empty list".into()));
        }
        let mut data = Vec::with_capacity(scalars.len());
        for &s in scalars {
            if !self.value(s).is_scalar() {
                return Err(Error::Shape {
                    op: "stack_scalars",
                    details: format!("element has shape {:?}", self.value(s).shape()),
                });
            }
            data.push(self.value(s).item());
        }
        let rg = scalars.iter().any(|&s| self.rg(s));
        Ok(self.push(Payload::StackScalars(scalars.to_vec()), Tensor::vector(data), rg))
    }

    /// Extract one element of a vector as a scalar node.
    pub fn index_scalar(&mut self, x: Var, index: usize) -> Result<Var> {
        if self.value(x).shape().len() != 1 || index >= self.value(x).numel() {
            return Err(Error::Shape {
                op: "index_scalar",
                details: format!("index {} into {:?}", index, self.value(x).shape()),
            });
        }
        let v = self.value(x).data()[index];
        let rg = self.rg(x);
        Ok(self.push(Payload::IndexScalar { x, index }, Tensor::scalar(v), rg))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Gradients accumulate into every
    /// `requires_grad` node; repeated calls after `zero_grads` reproduce
    /// identical values.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(Error::NonScalarRoot(self.value(root).shape().to_vec()));
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Vec<F>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[root.0] = Some(vec![F::one()]);

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            let node = &mut self.nodes[i];
            let stored = node
                .grad
                .get_or_insert_with(|| Tensor::zeros(node.value.shape()));
            for (o, &v) in stored.data_mut().iter_mut().zip(&g) {
                *o += v;
            }
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Vec<F>>], target: Var, delta: impl FnOnce(&mut [F])) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let slot = &mut grads[target.0];
        let buf = slot.get_or_insert_with(|| vec![F::zero(); self.nodes[target.0].value.numel()]);
        delta(buf);
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) -> Result<()> {
        match &self.nodes[i].payload {
            Payload::Leaf => {}
            Payload::Add(a, b) => {
                self.acc(grads, *a, |buf| {
                    for (o, &v) in buf.iter_mut().zip(g) {
                        *o += v;
                    }
                });
                self.acc(grads, *b, |buf| {
                    for (o, &v) in buf.iter_mut().zip(g) {
                        *o += v;
                    }
                });
            }
            Payload::AddN(terms) => {
                for &t in terms {
                    self.acc(grads, t, |buf| {
                        for (o, &v) in buf.iter_mut().zip(g) {
                            *o += v;
                        }
                    });
                }
            }
            Payload::Sub(a, b) => {
                self.acc(grads, *a, |buf| {
                    for (o, &v) in buf.iter_mut().zip(g) {
                        *o += v;
                    }
                });
                self.acc(grads, *b, |buf| {
                    for (o, &v) in buf.iter_mut().zip(g) {
                        *o -= v;
                    }
                });
            }
            Payload::Mul(a, b) => {
                let (av, bv) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                self.acc(grads, *a, |buf| {
                    for ((o, &v), &y) in buf.iter_mut().zip(g).zip(bv) {
                        *o += v * y;
                    }
                });
                self.acc(grads, *b, |buf| {
                    for ((o, &v), &x) in buf.iter_mut().zip(g).zip(av) {
                        *o += v * x;
                    }
                });
            }
            Payload::Affine { x, scale, .. } => {
                let k = *scale;
                self.acc(grads, *x, |buf| {
                    for (o, &v) in buf.iter_mut().zip(g) {
                        *o += v * k;
                    }
                });
            }
            Payload::MulScalar { x, s } => {
                let sv = self.nodes[s.0].value.item();
                let xv = self.nodes[x.0].value.data();
                self.acc(grads, *x, |buf| {
                    for (o, &v) in buf.iter_mut().zip(g) {
                        *o += v * sv;
                    }
                });
                let dot: F = g.iter().zip(xv).map(|(&gv, &xvv)| gv * xvv).sum();
                self.acc(grads, *s, |buf| buf[0] += dot);
            }
            Payload::AddRowBroadcast { m, v } => {
                let (rows, cols) = self.nodes[m.0].value.dims2();
                self.acc(grads, *m, |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o += gv;
                    }
                });
                self.acc(grads, *v, |buf| {
                    for r in 0..rows {
                        for (o, &gv) in buf.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                            *o += gv;
                        }
                    }
                });
            }
            Payload::MatMul { a, b } => {
                let (m, k) = self.nodes[a.0].value.dims2();
                let (_, nn) = self.nodes[b.0].value.dims2();
                let (av, bv) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                // dA += dC · Bᵀ
                self.acc(grads, *a, |buf| matmul_nt_acc(g, bv, m, nn, k, buf));
                // dB += Aᵀ · dC
                self.acc(grads, *b, |buf| matmul_tn_acc(av, g, m, k, nn, buf));
            }
            Payload::MatMulNT { a, b } => {
                let (m, k) = self.nodes[a.0].value.dims2();
                let (nn, _) = self.nodes[b.0].value.dims2();
                let (av, bv) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                // C = A·Bᵀ: dA += dC·B ; dB += dCᵀ·A
                self.acc(grads, *a, |buf| matmul_acc(g, bv, m, nn, k, buf));
                self.acc(grads, *b, |buf| matmul_tn_acc(g, av, m, nn, k, buf));
            }
            Payload::Relu(x) => {
                let xv = self.nodes[x.0].value.data();
                self.acc(grads, *x, |buf| {
                    for ((o, &gv), &v) in buf.iter_mut().zip(g).zip(xv) {
                        if v > F::zero() {
                            *o += gv;
                        }
                    }
                });
            }
            Payload::Gelu(x) => {
                let xv = self.nodes[x.0].value.data();
                self.acc(grads, *x, |buf| {
                    for ((o, &gv), &v) in buf.iter_mut().zip(g).zip(xv) {
                        *o += gv * gelu_grad(v);
                    }
                });
            }
            Payload::Square(x) => {
                let xv = self.nodes[x.0].value.data();
                self.acc(grads, *x, |buf| {
                    for ((o, &gv), &v) in buf.iter_mut().zip(g).zip(xv) {
                        *o += gv * F::real(2.0) * v;
                    }
                });
            }
            Payload::SumAll(x) => {
                let gv = g[0];
                self.acc(grads, *x, |buf| {
                    for o in buf.iter_mut() {
                        *o += gv;
                    }
                });
            }
            Payload::MeanRows(x) => {
                let (m, k) = self.nodes[x.0].value.dims2();
                let inv = F::one() / F::real(m as f64);
                self.acc(grads, *x, |buf| {
                    for r in 0..m {
                        for (o, &gv) in buf[r * k..(r + 1) * k].iter_mut().zip(g) {
                            *o += gv * inv;
                        }
                    }
                });
            }
            Payload::SliceRows { x, start } => {
                // start 0 doubles as the shape-free pass-through used by
                // the vector softmax; rank-1 sources only occur there.
                let shape = self.nodes[x.0].value.shape();
                debug_assert!(shape.len() == 2 || *start == 0, "rank-1 slice must be a pass-through");
                let off = if shape.len() == 2 { start * shape[1] } else { 0 };
                self.acc(grads, *x, |buf| {
                    for (o, &gv) in buf[off..off + g.len()].iter_mut().zip(g) {
                        *o += gv;
                    }
                });
            }
            Payload::SliceCols { x, start } => {
                let (m, k) = self.nodes[x.0].value.dims2();
                let w = g.len() / m;
                self.acc(grads, *x, |buf| {
                    for r in 0..m {
                        for (o, &gv) in buf[r * k + start..r * k + start + w].iter_mut().zip(&g[r * w..(r + 1) * w]) {
                            *o += gv;
                        }
                    }
                });
            }
            Payload::ConcatCols(parts) => {
                let m = self.nodes[parts[0].0].value.dims2().0;
                let total: usize = g.len() / m;
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.dims2().1;
                    let start = off;
                    self.acc(grads, p, |buf| {
                        for r in 0..m {
                            for (o, &gv) in buf[r * w..(r + 1) * w].iter_mut().zip(&g[r * total + start..r * total + start + w]) {
                                *o += gv;
                            }
                        }
                    });
                    off += w;
                }
            }
            Payload::Embedding { table, ids } => {
                let (_, d) = self.nodes[table.0].value.dims2();
                self.acc(grads, *table, |buf| {
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, &gv) in buf[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *o += gv;
                        }
                    }
                });
            }
            Payload::SoftmaxRows { x, tau, causal } => {
                let (m, k) = self.nodes[i].value.dims2();
                let y = self.nodes[i].value.data();
                let (tau, causal) = (*tau, *causal);
                self.acc(grads, *x, |buf| {
                    for r in 0..m {
                        let width = if causal { r + 1 } else { k };
                        let yr = &y[r * k..r * k + width];
                        let gr = &g[r * k..r * k + width];
                        let inner: F = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                        for j in 0..width {
                            buf[r * k + j] += yr[j] * (gr[j] - inner) / tau;
                        }
                    }
                });
            }
            Payload::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (m, k) = xhat.dims2();
                let gam = self.nodes[gamma.0].value.data();
                let inv_k = F::one() / F::real(k as f64);
                self.acc(grads, *x, |buf| {
                    for r in 0..m {
                        let xh = &xhat.data()[r * k..(r + 1) * k];
                        let gr = &g[r * k..(r + 1) * k];
                        let mut sum_dxhat = F::zero();
                        let mut sum_dxhat_xhat = F::zero();
                        for j in 0..k {
                            let dxh = gr[j] * gam[j];
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xh[j];
                        }
                        for j in 0..k {
                            let dxh = gr[j] * gam[j];
                            buf[r * k + j] += inv_std[r] * (dxh - inv_k * sum_dxhat - xh[j] * inv_k * sum_dxhat_xhat);
                        }
                    }
                });
                self.acc(grads, *gamma, |buf| {
                    for r in 0..m {
                        for j in 0..k {
                            buf[j] += g[r * k + j] * xhat.data()[r * k + j];
                        }
                    }
                });
                self.acc(grads, *beta, |buf| {
                    for r in 0..m {
                        for (o, &gv) in buf.iter_mut().zip(&g[r * k..(r + 1) * k]) {
                            *o += gv;
                        }
                    }
                });
            }
            Payload::CosineSim { a, b, dot, norm_a, norm_b } => {
                let gv = g[0];
                let (av, bv) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                let (dot, na, nb) = (*dot, *norm_a, *norm_b);
                let inv_ab = F::one() / (na * nb);
                let cosv = dot * inv_ab;
                self.acc(grads, *a, |buf| {
                    for ((o, &x), &y) in buf.iter_mut().zip(av).zip(bv) {
                        *o += gv * (y * inv_ab - cosv * x / (na * na));
                    }
                });
                self.acc(grads, *b, |buf| {
                    for ((o, &x), &y) in buf.iter_mut().zip(av).zip(bv) {
                        *o += gv * (x * inv_ab - cosv * y / (nb * nb));
                    }
                });
            }
            Payload::CrossEntropyLm { logits, targets, reduction, probs } => {
                let (t, v) = probs.dims2();
                let scale = match reduction {
                    Reduction::Sum => g[0],
                    Reduction::Mean => g[0] / F::real(t as f64),
                };
                self.acc(grads, *logits, |buf| {
                    for r in 0..t {
                        let pr = &probs.data()[r * v..(r + 1) * v];
                        for j in 0..v {
                            let indicator = if j == targets[r] { F::one() } else { F::zero() };
                            buf[r * v + j] += scale * (pr[j] - indicator);
                        }
                    }
                });
            }
            Payload::StackScalars(scalars) => {
                for (j, &s) in scalars.iter().enumerate() {
                    let gv = g[j];
                    self.acc(grads, s, |buf| buf[0] += gv);
                }
            }
            Payload::IndexScalar { x, index } => {
                let gv = g[0];
                let idx = *index;
                self.acc(grads, *x, |buf| buf[idx] += gv);
            }
        }
        Ok(())
    }
}
