use std::sync::Arc;

use super::kernels::{self, ConvDims};
use super::{Graph, NodeId, Op, SamplePlan};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

impl<F: Real> Graph<F> {
    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&self, a: NodeId, b: NodeId, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data).expect("shape preserved")
    }

    fn dims3_of(&self, op: &'static str, id: NodeId) -> Result<(usize, usize, usize)> {
        self.value(id)
            .dims3()
            .ok_or_else(|| Error::shape(op, format!("expected (C, H, W), got {:?}", self.shape(id))))
    }

    fn dims2_of(&self, op: &'static str, id: NodeId) -> Result<(usize, usize)> {
        self.value(id)
            .dims2()
            .ok_or_else(|| Error::shape(op, format!("expected a matrix, got {:?}", self.shape(id))))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let s = F::of(s);
        let v = self.value(x).map(|e| e * s);
        self.push(v, Op::Scale(x, s), &[x])
    }

    pub fn offset(&mut self, x: NodeId, c: f64) -> NodeId {
        let c = F::of(c);
        let v = self.value(x).map(|e| e + c);
        self.push(v, Op::Offset(x), &[x])
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|e| e * e);
        self.push(v, Op::Square(x), &[x])
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|e| if e > F::zero() { e } else { F::zero() });
        self.push(v, Op::Relu(x), &[x])
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let (lo, hi) = (F::of(lo), F::of(hi));
        let v = self.value(x).map(|e| e.max(lo).min(hi));
        self.push(v, Op::Clamp { input: x, lo, hi }, &[x])
    }

    /// `(m, k) x (k, n) -> (m, n)`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims2_of("matmul", a)?;
        let (k2, n) = self.dims2_of("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("({m}, {k}) x ({k2}, {n})")));
        }
        let v = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::new([m, n], v)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// `out.flat[i] = x.flat[index[i]]`; the adjoint scatter-adds.
    pub fn gather(&mut self, x: NodeId, index: Vec<usize>, shape: &[usize]) -> Result<NodeId> {
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::shape("gather", format!("index {bad} out of {} values", src.len())));
        }
        let v = Tensor::new(shape.to_vec(), index.iter().map(|&i| src[i]).collect())?;
        Ok(self.push(v, Op::Gather { input: x, index: Arc::new(index) }, &[x]))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2_of("transpose", x)?;
        let index = (0..c).flat_map(|j| (0..r).map(move |i| i * c + j)).collect();
        self.gather(x, index, &[c, r])
    }

    /// Keeps the listed columns of a matrix, in order.
    pub fn select_cols(&mut self, x: NodeId, cols: &[usize]) -> Result<NodeId> {
        let (r, c) = self.dims2_of("select_cols", x)?;
        if cols.is_empty() || cols.iter().any(|&j| j >= c) {
            return Err(Error::shape("select_cols", format!("columns {cols:?} of {c}")));
        }
        let index = (0..r).flat_map(|i| cols.iter().map(move |&j| i * c + j)).collect();
        self.gather(x, index, &[r, cols.len()])
    }

    /// Stride-1 convolution, `k / 2` zero padding on each side (odd `k`).
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let (cin, h, wd) = self.dims3_of("conv2d", x)?;
        let ws = self.shape(w).to_vec();
        let [cout, wcin, k, k2] = ws[..] else {
            return Err(Error::shape("conv2d", format!("weight must be (Cout, Cin, k, k), got {ws:?}")));
        };
        if wcin != cin || k != k2 || k % 2 == 0 {
            return Err(Error::shape("conv2d", format!("input {:?} with weight {ws:?}", self.shape(x))));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {cout} outputs", self.shape(b))));
            }
        }
        let d = ConvDims { cin, cout, h, w: wd, k };
        let v = kernels::conv2d(
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
            &d,
        );
        let t = Tensor::new([cout, h, wd], v)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(t, Op::Conv2d { input: x, weight: w, bias }, &inputs))
    }

    /// Non-overlapping `k x k` average pooling; output extents are
    /// `ceil(H / k) x ceil(W / k)`.
    pub fn avg_pool(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let (c, h, w) = self.dims3_of("avg_pool", x)?;
        if k == 0 {
            return Err(Error::shape("avg_pool", "window must be positive"));
        }
        let v = kernels::avg_pool(self.value(x).data(), c, h, w, k);
        let t = Tensor::new([c, h.div_ceil(k), w.div_ceil(k)], v)?;
        Ok(self.push(t, Op::AvgPool { input: x, k }, &[x]))
    }

    /// `(C, H, W) -> (C)` spatial mean.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.dims3_of("global_avg_pool", x)?;
        let n = F::of((h * w) as f64);
        let src = self.value(x).data();
        let v = (0..c).map(|ch| src[ch * h * w..(ch + 1) * h * w].iter().copied().sum::<F>() / n).collect();
        let t = Tensor::new([c], v)?;
        Ok(self.push(t, Op::GlobalAvgPool(x), &[x]))
    }

    /// Adds a per-channel vector to every cell of a `(C, H, W)` map.
    pub fn add_channel_vec(&mut self, map: NodeId, vec: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.dims3_of("add_channel_vec", map)?;
        if self.shape(vec) != [c] {
            return Err(Error::shape("add_channel_vec", format!("{:?} + {:?}", self.shape(map), self.shape(vec))));
        }
        let hw = h * w;
        let (m, v) = (self.value(map).data(), self.value(vec).data());
        let out = m.iter().enumerate().map(|(i, &x)| x + v[i / hw]).collect();
        let t = Tensor::new([c, h, w], out)?;
        Ok(self.push(t, Op::AddChannelVec { map, vec }, &[map, vec]))
    }

    /// Normalizes each column of a `(C, N)` matrix to unit L2 norm. Zero
    /// columns stay zero.
    pub fn l2_normalize_cols(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, n) = self.dims2_of("l2_normalize", x)?;
        let src = self.value(x).data();
        let inv_norms: Vec<F> = (0..n)
            .map(|j| {
                let ss: F = (0..c).map(|i| src[i * n + j] * src[i * n + j]).sum();
                if ss > F::zero() { F::one() / ss.sqrt() } else { F::zero() }
            })
            .collect();
        let out = src.iter().enumerate().map(|(i, &v)| v * inv_norms[i % n]).collect();
        let t = Tensor::new([c, n], out)?;
        Ok(self.push(t, Op::L2NormalizeCols { input: x, inv_norms }, &[x]))
    }

    /// Applies a precomputed bilinear sampling plan to each channel.
    pub fn resample(&mut self, x: NodeId, plan: Arc<SamplePlan>) -> Result<NodeId> {
        let (c, h, w) = self.dims3_of("resample", x)?;
        if (h, w) != (plan.in_h, plan.in_w) {
            return Err(Error::shape("resample", format!("plan expects {}x{}, input is {h}x{w}", plan.in_h, plan.in_w)));
        }
        let v = plan.apply(self.value(x).data(), c);
        let t = Tensor::new([c, plan.out_h, plan.out_w], v)?;
        Ok(self.push(t, Op::Resample { input: x, plan }, &[x]))
    }

    pub fn bilinear_resize(&mut self, x: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        let (_, h, w) = self.dims3_of("bilinear_resize", x)?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape("bilinear_resize", "target extents must be positive"));
        }
        if (h, w) == (out_h, out_w) {
            return Ok(x);
        }
        self.resample(x, Arc::new(SamplePlan::resize(h, w, out_h, out_w)))
    }

    /// Concatenates along the leading axis; trailing extents must agree.
    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let first = xs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &x in xs {
            if self.shape(x)[1..] != tail[..] {
                return Err(Error::shape("concat", format!("{:?} vs trailing {tail:?}", self.shape(x))));
            }
            lead += self.shape(x)[0];
            data.extend_from_slice(self.value(x).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Concat(xs.to_vec()), xs))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: F = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `(x - min x) / (max x - min x + eps)` over all entries.
    pub fn minmax_norm(&mut self, x: NodeId, eps: f64) -> NodeId {
        let src = self.value(x).data();
        let (mut argmin, mut argmax) = (0, 0);
        for (i, &v) in src.iter().enumerate() {
            if v < src[argmin] {
                argmin = i;
            }
            if v > src[argmax] {
                argmax = i;
            }
        }
        let (lo, hi) = (src[argmin], src[argmax]);
        let denom = hi - lo + F::of(eps);
        let v = self.value(x).map(|e| (e - lo) / denom);
        self.push(v, Op::MinMaxNorm { input: x, argmin, argmax, denom }, &[x])
    }

    /// Sum of absolute off-diagonal entries of a square matrix.
    pub fn off_diag_abs_sum(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2_of("off_diagonal", x)?;
        if r != c {
            return Err(Error::shape("off_diagonal", format!("matrix must be square, got ({r}, {c})")));
        }
        let src = self.value(x).data();
        let s: F = src
            .iter()
            .enumerate()
            .filter(|(i, _)| i / c != i % c)
            .map(|(_, v)| v.abs())
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::OffDiagSum(x), &[x]))
    }

    /// Row-wise log-softmax of a matrix.
    pub fn row_log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2_of("log_softmax", x)?;
        let src = self.value(x).data();
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<F>().ln();
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        let t = Tensor::new([r, c], out)?;
        Ok(self.push(t, Op::RowLogSoftmax(x), &[x]))
    }
}
