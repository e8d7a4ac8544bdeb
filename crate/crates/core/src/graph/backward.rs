use super::kernels::{self, ConvDims};
use super::{Graph, Op};
use crate::tensor::Real;

impl<F: Real> Graph<F> {
    /// Propagates the gradient `g` of node `id` into its inputs.
    pub(super) fn backprop(&self, id: usize, g: Vec<F>, grads: &mut [Option<Vec<F>>]) {
        let val = |n: super::NodeId| self.nodes[n.0].value.data();
        let wants = |n: super::NodeId| self.nodes[n.0].needs_grad;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if wants(*b) {
                    self.accumulate(grads, *b, g.clone());
                }
                self.accumulate(grads, *a, g);
            }
            Op::Sub(a, b) => {
                if wants(*b) {
                    self.accumulate(grads, *b, g.iter().map(|&v| -v).collect());
                }
                self.accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    self.accumulate(grads, *a, g.iter().zip(val(*b)).map(|(&x, &y)| x * y).collect());
                }
                if wants(*b) {
                    self.accumulate(grads, *b, g.iter().zip(val(*a)).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.iter().map(|&v| v * *s).collect()),
            Op::Offset(x) | Op::Reshape(x) => self.accumulate(grads, *x, g),
            Op::Square(x) => {
                let two = F::of(2.0);
                self.accumulate(grads, *x, g.iter().zip(val(*x)).map(|(&d, &v)| two * v * d).collect())
            }
            Op::Relu(x) => {
                let out = g
                    .iter()
                    .zip(val(*x))
                    .map(|(&d, &v)| if v > F::zero() { d } else { F::zero() })
                    .collect();
                self.accumulate(grads, *x, out)
            }
            Op::Clamp { input, lo, hi } => {
                let out = g
                    .iter()
                    .zip(val(*input))
                    .map(|(&d, &v)| if v >= *lo && v <= *hi { d } else { F::zero() })
                    .collect();
                self.accumulate(grads, *input, out)
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2().expect("matrix");
                let n = self.nodes[b.0].value.dims2().expect("matrix").1;
                if wants(*a) {
                    self.accumulate(grads, *a, kernels::matmul_nt(&g, val(*b), m, n, k));
                }
                if wants(*b) {
                    self.accumulate(grads, *b, kernels::matmul_tn(val(*a), &g, m, k, n));
                }
            }
            Op::Gather { input, index } => {
                let mut out = vec![F::zero(); self.nodes[input.0].value.len()];
                for (&i, &d) in index.iter().zip(&g) {
                    out[i] += d;
                }
                self.accumulate(grads, *input, out)
            }
            Op::Conv2d { input, weight, bias } => {
                let (cin, h, w) = self.nodes[input.0].value.dims3().expect("chw");
                let ws = self.nodes[weight.0].value.shape();
                let d = ConvDims { cin, cout: ws[0], h, w, k: ws[2] };
                let (gx, gw) =
                    kernels::conv2d_backward(val(*input), val(*weight), &g, &d, wants(*input), wants(*weight));
                if let Some(gx) = gx {
                    self.accumulate(grads, *input, gx);
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, *weight, gw);
                }
                if let Some(b) = bias.filter(|b| wants(*b)) {
                    let hw = h * w;
                    let gb = (0..d.cout).map(|co| g[co * hw..(co + 1) * hw].iter().copied().sum()).collect();
                    self.accumulate(grads, b, gb);
                }
            }
            Op::AvgPool { input, k } => {
                let (c, h, w) = self.nodes[input.0].value.dims3().expect("chw");
                self.accumulate(grads, *input, kernels::avg_pool_backward(&g, c, h, w, *k))
            }
            Op::GlobalAvgPool(x) => {
                let (c, h, w) = self.nodes[x.0].value.dims3().expect("chw");
                let n = F::of((h * w) as f64);
                let out = (0..c * h * w).map(|i| g[i / (h * w)] / n).collect();
                self.accumulate(grads, *x, out)
            }
            Op::AddChannelVec { map, vec } => {
                let (c, h, w) = self.nodes[map.0].value.dims3().expect("chw");
                if wants(*vec) {
                    let hw = h * w;
                    let gv = (0..c).map(|ch| g[ch * hw..(ch + 1) * hw].iter().copied().sum()).collect();
                    self.accumulate(grads, *vec, gv);
                }
                self.accumulate(grads, *map, g)
            }
            Op::L2NormalizeCols { input, inv_norms } => {
                let (c, n) = self.nodes[input.0].value.dims2().expect("matrix");
                let y = self.nodes[id].value.data();
                let mut out = vec![F::zero(); c * n];
                for j in 0..n {
                    let dot: F = (0..c).map(|i| y[i * n + j] * g[i * n + j]).sum();
                    for i in 0..c {
                        out[i * n + j] = (g[i * n + j] - y[i * n + j] * dot) * inv_norms[j];
                    }
                }
                self.accumulate(grads, *input, out)
            }
            Op::Resample { input, plan } => {
                let c = self.nodes[input.0].value.shape()[0];
                self.accumulate(grads, *input, plan.apply_transpose(&g, c))
            }
            Op::Concat(xs) => {
                let mut start = 0;
                for x in xs {
                    let n = self.nodes[x.0].value.len();
                    if wants(*x) {
                        self.accumulate(grads, *x, g[start..start + n].to_vec());
                    }
                    start += n;
                }
            }
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.len();
                self.accumulate(grads, *x, vec![g[0]; n])
            }
            Op::MinMaxNorm { input, argmin, argmax, denom } => {
                let y = self.nodes[id].value.data();
                let total: F = g.iter().copied().sum();
                let gy: F = g.iter().zip(y).map(|(&a, &b)| a * b).sum();
                let mut out: Vec<F> = g.iter().map(|&d| d / *denom).collect();
                out[*argmin] += (gy - total) / *denom;
                out[*argmax] -= gy / *denom;
                self.accumulate(grads, *input, out)
            }
            Op::OffDiagSum(x) => {
                let n = self.nodes[x.0].value.dims2().expect("matrix").1;
                let out = val(*x)
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        if i / n == i % n {
                            F::zero()
                        } else if v >= F::zero() {
                            g[0]
                        } else {
                            -g[0]
                        }
                    })
                    .collect();
                self.accumulate(grads, *x, out)
            }
            Op::RowLogSoftmax(x) => {
                let (r, c) = self.nodes[x.0].value.dims2().expect("matrix");
                let y = self.nodes[id].value.data();
                let mut out = vec![F::zero(); r * c];
                for i in 0..r {
                    let gs: F = g[i * c..(i + 1) * c].iter().copied().sum();
                    for j in 0..c {
                        out[i * c + j] = g[i * c + j] - y[i * c + j].exp() * gs;
                    }
                }
                self.accumulate(grads, *x, out)
            }
        }
    }
}
