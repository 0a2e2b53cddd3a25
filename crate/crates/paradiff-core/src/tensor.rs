//! Dense matrices with reverse-mode differentiation on a define-by-run tape.
//!
//! Every recorded tensor is a row-major matrix `(rows, cols)`; scalars are
//! `(1, 1)`. Operations append nodes to the tape, so insertion order is a
//! topological order and `backward` is a single reverse sweep that visits
//! each node exactly once. Graphs are rebuilt per step; recorded values are
//! never mutated in place.

use crate::error::{Error, Result};
use crate::real::Real;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

const LN_EPS: f64 = 1e-5;

enum Op<R> {
    Leaf,
    Add(TensorId, TensorId),
    /// `[m,n] + [1,n]`, bias broadcast over rows.
    AddBias(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    MulScalar(TensorId, R),
    AddScalar(TensorId),
    Matmul(TensorId, TensorId),
    /// `a · bᵀ` with `a: [m,k]`, `b: [n,k]`.
    MatmulNT(TensorId, TensorId),
    SoftmaxRows(TensorId),
    LogSoftmaxRows(TensorId),
    Exp(TensorId),
    Log(TensorId),
    Sum(TensorId),
    Gelu(TensorId),
    ReluSq(TensorId),
    GatherRows(TensorId, Vec<u32>),
    SliceCols {
        src: TensorId,
        start: usize,
    },
    ConcatCols(Vec<TensorId>),
    /// Row-wise normalization with learned gain/bias; aux holds x̂ then 1/σ.
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
    },
    /// Weighted negative log-likelihood over active rows; aux holds probs.
    MaskedCrossEntropy {
        logits: TensorId,
        targets: Vec<u32>,
        active: Vec<bool>,
        weights: Vec<R>,
    },
    Pick(TensorId, usize, usize),
    Reshape(TensorId),
    Minimum(TensorId, TensorId),
    Clamp {
        src: TensorId,
        lo: R,
        hi: R,
    },
}

/// Define-by-run computation graph.
pub struct Tape<R: Real> {
    shapes: Vec<(usize, usize)>,
    ops: Vec<Op<R>>,
    values: Vec<Vec<R>>,
    aux: Vec<Vec<R>>,
    grads: Vec<Vec<R>>,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Tape {
            shapes: Vec::new(),
            ops: Vec::new(),
            values: Vec::new(),
            aux: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn shape(&self, id: TensorId) -> (usize, usize) {
        self.shapes[id.0]
    }

    pub fn value(&self, id: TensorId) -> &[R] {
        &self.values[id.0]
    }

    /// Gradient of `id`; empty slice before `backward` has run.
    pub fn grad(&self, id: TensorId) -> &[R] {
        &self.grads[id.0]
    }

    fn push(&mut self, rows: usize, cols: usize, op: Op<R>, value: Vec<R>, aux: Vec<R>) -> TensorId {
        debug_assert_eq!(value.len(), rows * cols);
        self.shapes.push((rows, cols));
        self.ops.push(op);
        self.values.push(value);
        self.aux.push(aux);
        self.grads.push(Vec::new());
        TensorId(self.ops.len() - 1)
    }

    pub fn leaf(&mut self, rows: usize, cols: usize, values: Vec<R>) -> Result<TensorId> {
        if values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "leaf values length {} does not match shape {}x{}",
                values.len(),
                rows,
                cols
            )));
        }
        Ok(self.push(rows, cols, Op::Leaf, values, Vec::new()))
    }

    pub fn scalar(&mut self, v: R) -> TensorId {
        self.push(1, 1, Op::Leaf, vec![v], Vec::new())
    }

    fn same_shape(&self, a: TensorId, b: TensorId, what: &str) -> Result<(usize, usize)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(Error::Shape(format!(
                "{what}: shapes {}x{} and {}x{} differ",
                sa.0, sa.1, sb.0, sb.1
            )));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (r, c) = self.same_shape(a, b, "add")?;
        let v = zip2(&self.values[a.0], &self.values[b.0], |x, y| x + y);
        Ok(self.push(r, c, Op::Add(a, b), v, Vec::new()))
    }

    pub fn add_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let (r, c) = self.shape(a);
        let (br, bc) = self.shape(bias);
        if br != 1 || bc != c {
            return Err(Error::Shape(format!(
                "add_bias: {r}x{c} + {br}x{bc} (bias must be 1x{c})"
            )));
        }
        let bv = &self.values[bias.0];
        let mut v = self.values[a.0].clone();
        for row in v.chunks_exact_mut(c) {
            for (o, &b) in row.iter_mut().zip(bv.iter()) {
                *o += b;
            }
        }
        Ok(self.push(r, c, Op::AddBias(a, bias), v, Vec::new()))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (r, c) = self.same_shape(a, b, "sub")?;
        let v = zip2(&self.values[a.0], &self.values[b.0], |x, y| x - y);
        Ok(self.push(r, c, Op::Sub(a, b), v, Vec::new()))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (r, c) = self.same_shape(a, b, "mul")?;
        let v = zip2(&self.values[a.0], &self.values[b.0], |x, y| x * y);
        Ok(self.push(r, c, Op::Mul(a, b), v, Vec::new()))
    }

    pub fn mul_scalar(&mut self, a: TensorId, s: R) -> TensorId {
        let (r, c) = self.shape(a);
        let v = self.values[a.0].iter().map(|&x| x * s).collect();
        self.push(r, c, Op::MulScalar(a, s), v, Vec::new())
    }

    pub fn add_scalar(&mut self, a: TensorId, s: R) -> TensorId {
        let (r, c) = self.shape(a);
        let v = self.values[a.0].iter().map(|&x| x + s).collect();
        self.push(r, c, Op::AddScalar(a), v, Vec::new())
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: inner dimensions disagree, {m}x{k} vs {k2}x{n}"
            )));
        }
        let mut v = vec![R::zero(); m * n];
        mm(m, k, n, &self.values[a.0], &self.values[b.0], &mut v);
        Ok(self.push(m, n, Op::Matmul(a, b), v, Vec::new()))
    }

    /// `a · bᵀ` where `a: [m,k]` and `b: [n,k]`.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul_nt: inner dimensions disagree, {m}x{k} vs ({n}x{k2})^T"
            )));
        }
        let mut v = vec![R::zero(); m * n];
        mm_nt(m, k, n, &self.values[a.0], &self.values[b.0], &mut v);
        Ok(self.push(m, n, Op::MatmulNT(a, b), v, Vec::new()))
    }

    pub fn softmax_rows(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        let mut v = self.values[a.0].clone();
        for row in v.chunks_exact_mut(c) {
            softmax_in_place(row);
        }
        self.push(r, c, Op::SoftmaxRows(a), v, Vec::new())
    }

    pub fn log_softmax_rows(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        let mut v = self.values[a.0].clone();
        for row in v.chunks_exact_mut(c) {
            log_softmax_in_place(row);
        }
        self.push(r, c, Op::LogSoftmaxRows(a), v, Vec::new())
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        let v = self.values[a.0].iter().map(|&x| x.exp()).collect();
        self.push(r, c, Op::Exp(a), v, Vec::new())
    }

    pub fn log(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        let v = self.values[a.0].iter().map(|&x| x.ln()).collect();
        self.push(r, c, Op::Log(a), v, Vec::new())
    }

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let total: R = self.values[a.0].iter().copied().sum();
        self.push(1, 1, Op::Sum(a), vec![total], Vec::new())
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        let v = self.values[a.0].iter().map(|&x| gelu_value(x)).collect();
        self.push(r, c, Op::Gelu(a), v, Vec::new())
    }

    /// Squared ReLU, `max(x,0)^2`. Continuously differentiable, so finite
    /// differences stay well-behaved in gradient checks.
    pub fn relu_sq(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        let z = R::zero();
        let v = self.values[a.0]
            .iter()
            .map(|&x| {
                let p = x.max(z);
                p * p
            })
            .collect();
        self.push(r, c, Op::ReluSq(a), v, Vec::new())
    }

    /// Rows of `src` selected by `ids` (duplicates allowed); the embedding
    /// gather. Backward scatter-adds.
    pub fn gather_rows(&mut self, src: TensorId, ids: &[u32]) -> Result<TensorId> {
        let (r, c) = self.shape(src);
        for &id in ids {
            if id as usize >= r {
                return Err(Error::Shape(format!(
                    "gather_rows: row {id} out of range for {r}x{c}"
                )));
            }
        }
        let sv = &self.values[src.0];
        let mut v = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            v.extend_from_slice(&sv[id as usize * c..(id as usize + 1) * c]);
        }
        Ok(self.push(
            ids.len(),
            c,
            Op::GatherRows(src, ids.to_vec()),
            v,
            Vec::new(),
        ))
    }

    pub fn slice_cols(&mut self, src: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (r, c) = self.shape(src);
        if start + len > c {
            return Err(Error::Shape(format!(
                "slice_cols: columns {start}..{} out of range for {r}x{c}",
                start + len
            )));
        }
        let sv = &self.values[src.0];
        let mut v = Vec::with_capacity(r * len);
        for row in sv.chunks_exact(c) {
            v.extend_from_slice(&row[start..start + len]);
        }
        Ok(self.push(r, len, Op::SliceCols { src, start }, v, Vec::new()))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols: no inputs".into()));
        }
        let r = self.shape(parts[0]).0;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pr != r {
                return Err(Error::Shape(format!(
                    "concat_cols: row counts differ ({r} vs {pr})"
                )));
            }
            total += pc;
        }
        let mut v = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let pc = self.shape(p).1;
                v.extend_from_slice(&self.values[p.0][i * pc..(i + 1) * pc]);
            }
        }
        Ok(self.push(r, total, Op::ConcatCols(parts.to_vec()), v, Vec::new()))
    }

    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId) -> Result<TensorId> {
        let (r, c) = self.shape(x);
        for (p, name) in [(gain, "gain"), (bias, "bias")] {
            let s = self.shape(p);
            if s != (1, c) {
                return Err(Error::Shape(format!(
                    "layer_norm {name}: expected 1x{c}, got {}x{}",
                    s.0, s.1
                )));
            }
        }
        let eps = R::from_f64(LN_EPS);
        let nrec = R::from_f64(1.0 / c as f64);
        let gv = self.values[gain.0].clone();
        let bv = self.values[bias.0].clone();
        let xv = &self.values[x.0];
        let mut v = vec![R::zero(); r * c];
        // aux: normalized x̂ (r*c) followed by per-row inverse std (r)
        let mut aux = vec![R::zero(); r * c + r];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<R>() * nrec;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<R>() * nrec;
            let inv = (var + eps).sqrt().recip();
            aux[r * c + i] = inv;
            for j in 0..c {
                let xh = (row[j] - mean) * inv;
                aux[i * c + j] = xh;
                v[i * c + j] = xh * gv[j] + bv[j];
            }
        }
        Ok(self.push(r, c, Op::LayerNorm { x, gain, bias }, v, aux))
    }

    /// `Σ_i active[i] · weights[i] · (−log softmax(logits[i])[targets[i]])`.
    /// Gradient flows only through active rows.
    pub fn masked_cross_entropy(
        &mut self,
        logits: TensorId,
        targets: &[u32],
        active: &[bool],
        weights: &[R],
    ) -> Result<TensorId> {
        let (r, c) = self.shape(logits);
        if targets.len() != r || active.len() != r || weights.len() != r {
            return Err(Error::Shape(format!(
                "masked_cross_entropy: logits have {r} rows but targets/active/weights have \
                 {}/{}/{}",
                targets.len(),
                active.len(),
                weights.len()
            )));
        }
        for (i, &t) in targets.iter().enumerate() {
            if active[i] && t as usize >= c {
                return Err(Error::Vocab(format!(
                    "masked_cross_entropy: target id {t} at row {i} outside vocabulary of size {c}"
                )));
            }
        }
        for (i, &w) in weights.iter().enumerate() {
            if active[i] && w < R::zero() {
                return Err(Error::Contract(format!(
                    "masked_cross_entropy: negative weight at row {i}"
                )));
            }
        }
        let lv = &self.values[logits.0];
        let mut probs = vec![R::zero(); r * c];
        let mut total = R::zero();
        for i in 0..r {
            if !active[i] {
                continue;
            }
            let row = &lv[i * c..(i + 1) * c];
            let dst = &mut probs[i * c..(i + 1) * c];
            dst.copy_from_slice(row);
            log_softmax_in_place(dst);
            let logp = dst[targets[i] as usize];
            total -= weights[i] * logp;
            for x in dst.iter_mut() {
                *x = x.exp();
            }
        }
        Ok(self.push(
            1,
            1,
            Op::MaskedCrossEntropy {
                logits,
                targets: targets.to_vec(),
                active: active.to_vec(),
                weights: weights.to_vec(),
            },
            vec![total],
            probs,
        ))
    }

    /// Same values under a new `(rows, cols)` shape.
    pub fn reshape(&mut self, src: TensorId, rows: usize, cols: usize) -> Result<TensorId> {
        let (r, c) = self.shape(src);
        if r * c != rows * cols {
            return Err(Error::Shape(format!(
                "reshape: {r}x{c} has {} values, target {rows}x{cols} needs {}",
                r * c,
                rows * cols
            )));
        }
        let v = self.values[src.0].clone();
        Ok(self.push(rows, cols, Op::Reshape(src), v, Vec::new()))
    }

    pub fn pick(&mut self, src: TensorId, row: usize, col: usize) -> Result<TensorId> {
        let (r, c) = self.shape(src);
        if row >= r || col >= c {
            return Err(Error::Shape(format!(
                "pick: ({row},{col}) out of range for {r}x{c}"
            )));
        }
        let v = self.values[src.0][row * c + col];
        Ok(self.push(1, 1, Op::Pick(src, row, col), vec![v], Vec::new()))
    }

    /// Elementwise minimum; on ties the gradient goes to `a`.
    pub fn minimum(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (r, c) = self.same_shape(a, b, "minimum")?;
        let v = zip2(&self.values[a.0], &self.values[b.0], |x, y| {
            if x <= y {
                x
            } else {
                y
            }
        });
        Ok(self.push(r, c, Op::Minimum(a, b), v, Vec::new()))
    }

    /// Clamp to `[lo, hi]`; gradient is 1 inside the band, 0 outside.
    pub fn clamp(&mut self, src: TensorId, lo: R, hi: R) -> TensorId {
        let (r, c) = self.shape(src);
        let v = self.values[src.0]
            .iter()
            .map(|&x| {
                if x < lo {
                    lo
                } else if x > hi {
                    hi
                } else {
                    x
                }
            })
            .collect();
        self.push(r, c, Op::Clamp { src, lo, hi }, v, Vec::new())
    }

    /// Reverse sweep from a scalar `loss`. Every node reachable from the loss
    /// gets its gradient populated; unreachable nodes keep zero gradients.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            let (r, c) = self.shape(loss);
            return Err(Error::Contract(format!(
                "backward: loss must be a scalar, got {r}x{c}"
            )));
        }
        let n = self.ops.len();
        self.grads = self.values.iter().map(|v| vec![R::zero(); v.len()]).collect();
        let mut reached = vec![false; n];
        reached[loss.0] = true;
        self.grads[loss.0][0] = R::one();

        for i in (0..=loss.0).rev() {
            if !reached[i] {
                continue;
            }
            let g = std::mem::take(&mut self.grads[i]);
            let op = std::mem::replace(&mut self.ops[i], Op::Leaf);
            match &op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    axpy(&mut self.grads[a.0], &g, R::one());
                    axpy(&mut self.grads[b.0], &g, R::one());
                    reached[a.0] = true;
                    reached[b.0] = true;
                }
                Op::AddBias(a, b) => {
                    axpy(&mut self.grads[a.0], &g, R::one());
                    let c = self.shapes[b.0].1;
                    let gb = &mut self.grads[b.0];
                    for row in g.chunks_exact(c) {
                        for (o, &x) in gb.iter_mut().zip(row) {
                            *o += x;
                        }
                    }
                    reached[a.0] = true;
                    reached[b.0] = true;
                }
                Op::Sub(a, b) => {
                    axpy(&mut self.grads[a.0], &g, R::one());
                    axpy(&mut self.grads[b.0], &g, -R::one());
                    reached[a.0] = true;
                    reached[b.0] = true;
                }
                Op::Mul(a, b) => {
                    mul_acc(&mut self.grads[a.0], &g, &self.values[b.0]);
                    mul_acc(&mut self.grads[b.0], &g, &self.values[a.0]);
                    reached[a.0] = true;
                    reached[b.0] = true;
                }
                Op::MulScalar(a, s) => {
                    axpy(&mut self.grads[a.0], &g, *s);
                    reached[a.0] = true;
                }
                Op::AddScalar(a) => {
                    axpy(&mut self.grads[a.0], &g, R::one());
                    reached[a.0] = true;
                }
                Op::Matmul(a, b) => {
                    let (m, k) = self.shapes[a.0];
                    let n2 = self.shapes[b.0].1;
                    // da += g · bᵀ ; db += aᵀ · g
                    {
                        let (bv, da) = (&self.values[b.0], &mut self.grads[a.0]);
                        mm_nt(m, n2, k, &g, bv, da);
                    }
                    {
                        let (av, db) = (&self.values[a.0], &mut self.grads[b.0]);
                        mm_tn(m, k, n2, av, &g, db);
                    }
                    reached[a.0] = true;
                    reached[b.0] = true;
                }
                Op::MatmulNT(a, b) => {
                    let (m, k) = self.shapes[a.0];
                    let n2 = self.shapes[b.0].0;
                    // out = a·bᵀ: da += g · b ; db += gᵀ · a
                    {
                        let (bv, da) = (&self.values[b.0], &mut self.grads[a.0]);
                        mm(m, n2, k, &g, bv, da);
                    }
                    {
                        let (av, db) = (&self.values[a.0], &mut self.grads[b.0]);
                        mm_tn(m, n2, k, &g, av, db);
                    }
                    reached[a.0] = true;
                    reached[b.0] = true;
                }
                Op::SoftmaxRows(a) => {
                    let c = self.shapes[i].1;
                    let y = &self.values[i];
                    let da = &mut self.grads[a.0];
                    for (ri, (grow, yrow)) in g.chunks_exact(c).zip(y.chunks_exact(c)).enumerate() {
                        let dot: R = grow.iter().zip(yrow).map(|(&gj, &yj)| gj * yj).sum();
                        let dst = &mut da[ri * c..(ri + 1) * c];
                        for j in 0..c {
                            dst[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                    reached[a.0] = true;
                }
                Op::LogSoftmaxRows(a) => {
                    let c = self.shapes[i].1;
                    let y = &self.values[i];
                    let da = &mut self.grads[a.0];
                    for (ri, (grow, yrow)) in g.chunks_exact(c).zip(y.chunks_exact(c)).enumerate() {
                        let gsum: R = grow.iter().copied().sum();
                        let dst = &mut da[ri * c..(ri + 1) * c];
                        for j in 0..c {
                            dst[j] += grow[j] - yrow[j].exp() * gsum;
                        }
                    }
                    reached[a.0] = true;
                }
                Op::Exp(a) => {
                    mul_acc(&mut self.grads[a.0], &g, &self.values[i]);
                    reached[a.0] = true;
                }
                Op::Log(a) => {
                    let xv = &self.values[a.0];
                    let da = &mut self.grads[a.0];
                    for (j, &gj) in g.iter().enumerate() {
                        da[j] += gj / xv[j];
                    }
                    reached[a.0] = true;
                }
                Op::Sum(a) => {
                    let g0 = g[0];
                    for o in self.grads[a.0].iter_mut() {
                        *o += g0;
                    }
                    reached[a.0] = true;
                }
                Op::Gelu(a) => {
                    let xv = &self.values[a.0];
                    let da = &mut self.grads[a.0];
                    for (j, &gj) in g.iter().enumerate() {
                        da[j] += gj * gelu_derivative(xv[j]);
                    }
                    reached[a.0] = true;
                }
                Op::ReluSq(a) => {
                    let xv = &self.values[a.0];
                    let da = &mut self.grads[a.0];
                    let two = R::from_f64(2.0);
                    let z = R::zero();
                    for (j, &gj) in g.iter().enumerate() {
                        da[j] += gj * two * xv[j].max(z);
                    }
                    reached[a.0] = true;
                }
                Op::GatherRows(src, ids) => {
                    let c = self.shapes[i].1;
                    let ds = &mut self.grads[src.0];
                    for (r0, &id) in ids.iter().enumerate() {
                        let dst = &mut ds[id as usize * c..(id as usize + 1) * c];
                        for (o, &x) in dst.iter_mut().zip(&g[r0 * c..(r0 + 1) * c]) {
                            *o += x;
                        }
                    }
                    reached[src.0] = true;
                }
                Op::SliceCols { src, start } => {
                    let start = *start;
                    let len = self.shapes[i].1;
                    let c = self.shapes[src.0].1;
                    let ds = &mut self.grads[src.0];
                    for (r0, grow) in g.chunks_exact(len).enumerate() {
                        let dst = &mut ds[r0 * c + start..r0 * c + start + len];
                        for (o, &x) in dst.iter_mut().zip(grow) {
                            *o += x;
                        }
                    }
                    reached[src.0] = true;
                }
                Op::ConcatCols(parts) => {
                    let total = self.shapes[i].1;
                    let rows = self.shapes[i].0;
                    let mut offset = 0;
                    for p in parts {
                        let pc = self.shapes[p.0].1;
                        let dp = &mut self.grads[p.0];
                        for r0 in 0..rows {
                            let grow = &g[r0 * total + offset..r0 * total + offset + pc];
                            let dst = &mut dp[r0 * pc..(r0 + 1) * pc];
                            for (o, &x) in dst.iter_mut().zip(grow) {
                                *o += x;
                            }
                        }
                        offset += pc;
                        reached[p.0] = true;
                    }
                }
                Op::LayerNorm { x, gain, bias } => {
                    let (r, c) = self.shapes[i];
                    let nrec = R::from_f64(1.0 / c as f64);
                    let aux = std::mem::take(&mut self.aux[i]);
                    let (xhat, inv) = aux.split_at(r * c);
                    let gv = self.values[gain.0].clone();
                    {
                        let dgain = &mut self.grads[gain.0];
                        for (grow, xrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                            for j in 0..c {
                                dgain[j] += grow[j] * xrow[j];
                            }
                        }
                    }
                    {
                        let dbias = &mut self.grads[bias.0];
                        for grow in g.chunks_exact(c) {
                            for j in 0..c {
                                dbias[j] += grow[j];
                            }
                        }
                    }
                    {
                        let dx = &mut self.grads[x.0];
                        for ri in 0..r {
                            let grow = &g[ri * c..(ri + 1) * c];
                            let xrow = &xhat[ri * c..(ri + 1) * c];
                            let mut s1 = R::zero();
                            let mut s2 = R::zero();
                            for j in 0..c {
                                let dxh = grow[j] * gv[j];
                                s1 += dxh;
                                s2 += dxh * xrow[j];
                            }
                            s1 *= nrec;
                            s2 *= nrec;
                            let dst = &mut dx[ri * c..(ri + 1) * c];
                            for j in 0..c {
                                let dxh = grow[j] * gv[j];
                                dst[j] += inv[ri] * (dxh - s1 - xrow[j] * s2);
                            }
                        }
                    }
                    self.aux[i] = aux;
                    reached[x.0] = true;
                    reached[gain.0] = true;
                    reached[bias.0] = true;
                }
                Op::MaskedCrossEntropy {
                    logits,
                    targets,
                    active,
                    weights,
                } => {
                    let c = self.shapes[logits.0].1;
                    let g0 = g[0];
                    let probs = std::mem::take(&mut self.aux[i]);
                    let dl = &mut self.grads[logits.0];
                    for (ri, &act) in active.iter().enumerate() {
                        if !act {
                            continue;
                        }
                        let w = weights[ri] * g0;
                        let prow = &probs[ri * c..(ri + 1) * c];
                        let dst = &mut dl[ri * c..(ri + 1) * c];
                        for j in 0..c {
                            dst[j] += w * prow[j];
                        }
                        dst[targets[ri] as usize] -= w;
                    }
                    self.aux[i] = probs;
                    reached[logits.0] = true;
                }
                Op::Pick(src, row, col) => {
                    let c = self.shapes[src.0].1;
                    self.grads[src.0][row * c + col] += g[0];
                    reached[src.0] = true;
                }
                Op::Reshape(src) => {
                    axpy(&mut self.grads[src.0], &g, R::one());
                    reached[src.0] = true;
                }
                Op::Minimum(a, b) => {
                    let av = &self.values[a.0];
                    let bv = &self.values[b.0];
                    let takes_a: Vec<bool> =
                        av.iter().zip(bv.iter()).map(|(&x, &y)| x <= y).collect();
                    {
                        let da = &mut self.grads[a.0];
                        for (j, &gj) in g.iter().enumerate() {
                            if takes_a[j] {
                                da[j] += gj;
                            }
                        }
                    }
                    {
                        let db = &mut self.grads[b.0];
                        for (j, &gj) in g.iter().enumerate() {
                            if !takes_a[j] {
                                db[j] += gj;
                            }
                        }
                    }
                    reached[a.0] = true;
                    reached[b.0] = true;
                }
                Op::Clamp { src, lo, hi } => {
                    let (lo, hi) = (*lo, *hi);
                    let xv = &self.values[src.0];
                    let ds = &mut self.grads[src.0];
                    for (j, &gj) in g.iter().enumerate() {
                        if xv[j] >= lo && xv[j] <= hi {
                            ds[j] += gj;
                        }
                    }
                    reached[src.0] = true;
                }
            }
            self.ops[i] = op;
            self.grads[i] = g;
        }
        Ok(())
    }
}

fn zip2<R: Real>(a: &[R], b: &[R], f: impl Fn(R, R) -> R) -> Vec<R> {
    a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
}

fn axpy<R: Real>(out: &mut [R], x: &[R], s: R) {
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        *o += v * s;
    }
}

fn mul_acc<R: Real>(out: &mut [R], g: &[R], v: &[R]) {
    for ((o, &gj), &vj) in out.iter_mut().zip(g.iter()).zip(v.iter()) {
        *o += gj * vj;
    }
}

/// `c[m,n] += a[m,k] · b[k,n]`, row-major. The i-k-j loop order keeps the
/// inner loop contiguous; k is unrolled by 4 for instruction-level
/// parallelism.
pub(crate) fn mm<R: Real>(m: usize, k: usize, n: usize, a: &[R], b: &[R], c: &mut [R]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let k4 = k - k % 4;
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        let mut kk = 0;
        while kk < k4 {
            let a0 = arow[kk];
            let a1 = arow[kk + 1];
            let a2 = arow[kk + 2];
            let a3 = arow[kk + 3];
            let b0 = &b[kk * n..(kk + 1) * n];
            let b1 = &b[(kk + 1) * n..(kk + 2) * n];
            let b2 = &b[(kk + 2) * n..(kk + 3) * n];
            let b3 = &b[(kk + 3) * n..(kk + 4) * n];
            for ((((o, &v0), &v1), &v2), &v3) in
                crow.iter_mut().zip(b0).zip(b1).zip(b2).zip(b3)
            {
                *o += a0 * v0 + a1 * v1 + a2 * v2 + a3 * v3;
            }
            kk += 4;
        }
        while kk < k {
            let aik = arow[kk];
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in crow.iter_mut().zip(brow.iter()) {
                *o += aik * bv;
            }
            kk += 1;
        }
    }
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ` (row dot products with 8 accumulator lanes).
pub(crate) fn mm_nt<R: Real>(m: usize, k: usize, n: usize, a: &[R], b: &[R], c: &mut [R]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, o) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut lanes = [R::zero(); 8];
            let chunks = k / 8;
            for t in 0..chunks {
                let x = &arow[t * 8..t * 8 + 8];
                let y = &brow[t * 8..t * 8 + 8];
                for l in 0..8 {
                    lanes[l] += x[l] * y[l];
                }
            }
            let mut acc = lanes.iter().copied().sum::<R>();
            for t in chunks * 8..k {
                acc += arow[t] * brow[t];
            }
            *o += acc;
        }
    }
}

/// `c[k,n] += a[m,k]ᵀ · b[m,n]`, unrolled over m.
pub(crate) fn mm_tn<R: Real>(m: usize, k: usize, n: usize, a: &[R], b: &[R], c: &mut [R]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    let m4 = m - m % 4;
    for kk in 0..k {
        let crow = &mut c[kk * n..(kk + 1) * n];
        let mut i = 0;
        while i < m4 {
            let a0 = a[i * k + kk];
            let a1 = a[(i + 1) * k + kk];
            let a2 = a[(i + 2) * k + kk];
            let a3 = a[(i + 3) * k + kk];
            let b0 = &b[i * n..(i + 1) * n];
            let b1 = &b[(i + 1) * n..(i + 2) * n];
            let b2 = &b[(i + 2) * n..(i + 3) * n];
            let b3 = &b[(i + 3) * n..(i + 4) * n];
            for ((((o, &v0), &v1), &v2), &v3) in
                crow.iter_mut().zip(b0).zip(b1).zip(b2).zip(b3)
            {
                *o += a0 * v0 + a1 * v1 + a2 * v2 + a3 * v3;
            }
            i += 4;
        }
        while i < m {
            let aik = a[i * k + kk];
            let brow = &b[i * n..(i + 1) * n];
            for (o, &bv) in crow.iter_mut().zip(brow.iter()) {
                *o += aik * bv;
            }
            i += 1;
        }
    }
}

/// Max-subtracted softmax over one row.
pub(crate) fn softmax_in_place<R: Real>(row: &mut [R]) {
    let max = row.iter().copied().fold(R::neg_infinity(), R::max);
    let mut sum = R::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = sum.recip();
    for x in row.iter_mut() {
        *x *= inv;
    }
}

pub(crate) fn log_softmax_in_place<R: Real>(row: &mut [R]) {
    let max = row.iter().copied().fold(R::neg_infinity(), R::max);
    let mut sum = R::zero();
    for &x in row.iter() {
        sum += (x - max).exp();
    }
    let lse = max + sum.ln();
    for x in row.iter_mut() {
        *x = *x - lse;
    }
}

fn gelu_value<R: Real>(x: R) -> R {
    let half = R::from_f64(0.5);
    let c = R::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = R::from_f64(0.044715);
    let u = c * (x + a * x * x * x);
    half * x * (R::one() + u.tanh())
}

fn gelu_derivative<R: Real>(x: R) -> R {
    let half = R::from_f64(0.5);
    let c = R::from_f64(0.797_884_560_802_865_4);
    let a = R::from_f64(0.044715);
    let three = R::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (R::one() + three * a * x * x);
    half * (R::one() + t) + half * x * (R::one() - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;

    fn tape() -> Tape<f64> {
        Tape::new()
    }

    #[test]
    fn matmul_identity() {
        let mut t = tape();
        let a = t.leaf(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let id = t.leaf(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let c = t.matmul(a, id).unwrap();
        assert_eq!(t.value(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_product() {
        let mut t = tape();
        let a = t.leaf(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = t.leaf(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut t = tape();
        let a = t.leaf(2, 3, vec![0.0; 6]).unwrap();
        let b = t.leaf(2, 3, vec![0.0; 6]).unwrap();
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3"), "error should name both shapes: {msg}");
    }

    #[test]
    fn matmul_backward_accumulates_transposed_products() {
        // loss = sum(a·b); da = 1·bᵀ summed, db = aᵀ·1
        let mut t = tape();
        let a = t.leaf(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = t.leaf(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = t.matmul(a, b).unwrap();
        let loss = t.sum(c);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(a), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(t.grad(b), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let mut t = tape();
        let x = t.leaf(1, 3, vec![0.0, 0.0, 0.0]).unwrap();
        let y = t.softmax_rows(x);
        for &v in t.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_no_overflow_on_large_logits() {
        let mut t = tape();
        let x = t.leaf(1, 2, vec![1000.0, 0.0]).unwrap();
        let y = t.softmax_rows(x);
        let v = t.value(y);
        assert!(v[0] > 0.999_999 && v[0].is_finite());
        assert!(v[1] >= 0.0 && v[1] < 1e-12);
    }

    #[test]
    fn softmax_direct_evaluation() {
        let mut t = tape();
        let x = t.leaf(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let y = t.softmax_rows(x);
        let v = t.value(y);
        let expect = [0.090_030_573_170_380_46, 0.244_728_471_054_797_7, 0.665_240_955_774_821_8];
        for (a, e) in v.iter().zip(expect.iter()) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn cross_entropy_empty_mask_is_zero_with_zero_grad() {
        let mut t = tape();
        let logits = t.leaf(3, 4, (0..12).map(|i| i as f64).collect()).unwrap();
        let loss = t
            .masked_cross_entropy(logits, &[0, 1, 2], &[false, false, false], &[1.0, 1.0, 1.0])
            .unwrap();
        assert_eq!(t.value(loss), &[0.0]);
        t.backward(loss).unwrap();
        assert!(t.grad(logits).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_v() {
        let mut t = tape();
        let logits = t.leaf(1, 4, vec![0.0; 4]).unwrap();
        let loss = t
            .masked_cross_entropy(logits, &[2], &[true], &[1.0])
            .unwrap();
        assert!((t.value(loss)[0] - 4.0f64.ln()).abs() < 1e-12);

        let mut t = tape();
        let logits = t.leaf(1, 4, vec![0.0; 4]).unwrap();
        let loss = t
            .masked_cross_entropy(logits, &[2], &[true], &[2.0])
            .unwrap();
        assert!((t.value(loss)[0] - 2.0 * 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_out_of_vocab_target() {
        let mut t = tape();
        let logits = t.leaf(1, 4, vec![0.0; 4]).unwrap();
        let err = t
            .masked_cross_entropy(logits, &[4], &[true], &[1.0])
            .unwrap_err();
        assert!(matches!(err, Error::Vocab(_)));
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut t = tape();
        let x = t.leaf(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum(sq);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_constant_loss_zeroes_grads() {
        let mut t = tape();
        let x = t.leaf(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let c = t.scalar(7.0);
        t.backward(c).unwrap();
        assert!(t.grad(x).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = tape();
        let x = t.leaf(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut t = Tape::<f32>::new();
            let x = t.leaf(2, 3, vec![0.3, -1.2, 0.7, 2.2, -0.4, 0.05]).unwrap();
            let w = t.leaf(3, 3, vec![0.1; 9]).unwrap();
            let h = t.matmul(x, w).unwrap();
            let a = t.gelu(h);
            let s = t.softmax_rows(a);
            let lg = t.log(s);
            let m = t.mul(s, lg).unwrap();
            let loss = t.sum(m);
            t.backward(loss).unwrap();
            (t.grad(x).to_vec(), t.grad(w).to_vec())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn composite_gradients_match_finite_differences() {
        let x0: Vec<f64> = vec![0.31, -0.75, 1.2, 0.44, -0.9, 0.13];
        let err = grad_check(
            |t, x| {
                let w = t.leaf(3, 2, vec![0.4, -0.2, 0.33, 0.8, -0.51, 0.12])?;
                let h = t.matmul(x, w)?;
                let a = t.gelu(h);
                let s = t.softmax_rows(a);
                let l = t.log(s);
                let m = t.mul(s, l)?;
                Ok(t.sum(m))
            },
            2,
            3,
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "max rel err {err}");
    }

    #[test]
    fn layer_norm_and_gather_match_finite_differences() {
        let x0: Vec<f64> = vec![0.5, -1.0, 0.25, 2.0, 0.8, -0.3, 1.5, 0.0];
        let err = grad_check(
            |t, x| {
                let gain = t.leaf(1, 4, vec![1.1, 0.9, 1.0, 1.3])?;
                let bias = t.leaf(1, 4, vec![0.05, -0.02, 0.0, 0.3])?;
                let ln = t.layer_norm(x, gain, bias)?;
                let g = t.gather_rows(ln, &[1, 0, 1])?;
                let sl = t.slice_cols(g, 1, 2)?;
                let cc = t.concat_cols(&[sl, sl])?;
                let e = t.exp(cc);
                Ok(t.sum(e))
            },
            2,
            4,
            &x0,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-7, "max rel err {err}");
    }

    #[test]
    fn clamp_minimum_pick_match_finite_differences() {
        let x0: Vec<f64> = vec![0.4, 1.6, -0.7, 0.95];
        let err = grad_check(
            |t, x| {
                let c = t.clamp(x, 0.8, 1.2);
                let m = t.minimum(x, c)?;
                let p = t.pick(m, 0, 1)?;
                let s = t.sum(m);
                let two_p = t.mul_scalar(p, 2.0);
                t.add(s, two_p)
            },
            1,
            4,
            &x0,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8, "max rel err {err}");
    }

    #[test]
    fn relu_sq_matches_finite_differences() {
        let x0: Vec<f64> = vec![0.6, -0.4, 1.3, -2.0, 0.02];
        let err = grad_check(
            |t, x| {
                let a = t.relu_sq(x);
                Ok(t.sum(a))
            },
            1,
            5,
            &x0,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-7, "max rel err {err}");
    }

    #[test]
    fn unreachable_leaves_keep_zero_grad() {
        let mut t = tape();
        let x = t.leaf(1, 2, vec![1.0, 2.0]).unwrap();
        let y = t.leaf(1, 2, vec![3.0, 4.0]).unwrap();
        let loss = t.sum(x);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x), &[1.0, 1.0]);
        assert_eq!(t.grad(y), &[0.0, 0.0]);
    }
}
