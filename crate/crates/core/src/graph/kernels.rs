//! Forward and adjoint loops for the dense ops.

use crate::Real;

pub(crate) struct ConvDims {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvDims {
    /// Valid output row/column window for a kernel offset `d`.
    #[inline]
    fn range(d: isize, n: usize) -> (usize, usize) {
        let lo = (-d).max(0) as usize;
        let hi = (n as isize - d).min(n as isize).max(0) as usize;
        (lo, hi.max(lo))
    }
}

/// Stride-1 cross-correlation with symmetric zero padding `k / 2`.
pub(crate) fn conv2d<F: Real>(x: &[F], w: &[F], bias: Option<&[F]>, d: &ConvDims) -> Vec<F> {
    let hw = d.h * d.w;
    let pad = (d.k / 2) as isize;
    let mut out = vec![F::zero(); d.cout * hw];
    for co in 0..d.cout {
        let o = &mut out[co * hw..(co + 1) * hw];
        if let Some(b) = bias {
            o.iter_mut().for_each(|v| *v = b[co]);
        }
        for ci in 0..d.cin {
            let xi = &x[ci * hw..(ci + 1) * hw];
            for ky in 0..d.k {
                let dy = ky as isize - pad;
                let (y0, y1) = ConvDims::range(dy, d.h);
                for kx in 0..d.k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = ConvDims::range(dx, d.w);
                    if x0 >= x1 {
                        continue;
                    }
                    let wv = w[((co * d.cin + ci) * d.k + ky) * d.k + kx];
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let orow = &mut o[y * d.w + x0..y * d.w + x1];
                        let sx0 = (x0 as isize + dx) as usize;
                        let irow = &xi[sy * d.w + sx0..sy * d.w + sx0 + (x1 - x0)];
                        for (ov, iv) in orow.iter_mut().zip(irow) {
                            *ov += wv * *iv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`conv2d`] with respect to input and weight.
pub(crate) fn conv2d_backward<F: Real>(
    x: &[F],
    w: &[F],
    g: &[F],
    d: &ConvDims,
    want_x: bool,
    want_w: bool,
) -> (Option<Vec<F>>, Option<Vec<F>>) {
    let hw = d.h * d.w;
    let pad = (d.k / 2) as isize;
    let mut gx = want_x.then(|| vec![F::zero(); d.cin * hw]);
    let mut gw = want_w.then(|| vec![F::zero(); w.len()]);
    for co in 0..d.cout {
        let go = &g[co * hw..(co + 1) * hw];
        for ci in 0..d.cin {
            let xi = &x[ci * hw..(ci + 1) * hw];
            for ky in 0..d.k {
                let dy = ky as isize - pad;
                let (y0, y1) = ConvDims::range(dy, d.h);
                for kx in 0..d.k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = ConvDims::range(dx, d.w);
                    if x0 >= x1 {
                        continue;
                    }
                    let widx = ((co * d.cin + ci) * d.k + ky) * d.k + kx;
                    let wv = w[widx];
                    let mut acc = F::zero();
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let sx0 = (x0 as isize + dx) as usize;
                        let grow = &go[y * d.w + x0..y * d.w + x1];
                        let s = sy * d.w + sx0;
                        if let Some(gx) = gx.as_mut() {
                            let dst = &mut gx[ci * hw + s..ci * hw + s + (x1 - x0)];
                            for (dv, gv) in dst.iter_mut().zip(grow) {
                                *dv += wv * *gv;
                            }
                        }
                        if gw.is_some() {
                            let irow = &xi[s..s + (x1 - x0)];
                            for (iv, gv) in irow.iter().zip(grow) {
                                acc += *iv * *gv;
                            }
                        }
                    }
                    if let Some(gw) = gw.as_mut() {
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    (gx, gw)
}

/// `(m, k) x (k, n)` row-major product.
pub(crate) fn matmul<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * *bv;
            }
        }
    }
    out
}

/// `(m, k)^T`-free helper: returns `a^T b` for `a: (k, m)`, `b: (k, n)`.
pub(crate) fn matmul_tn<F: Real>(a: &[F], b: &[F], k: usize, m: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == F::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * *bv;
            }
        }
    }
    out
}

/// Returns `a b^T` for `a: (m, k)`, `b: (n, k)`.
pub(crate) fn matmul_nt<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| *x * *y).sum();
        }
    }
    out
}

/// Ceil-mode average pooling over non-overlapping `k x k` windows; partial
/// windows average only their in-bounds elements.
pub(crate) fn avg_pool<F: Real>(x: &[F], c: usize, h: usize, w: usize, k: usize) -> Vec<F> {
    let (oh, ow) = (h.div_ceil(k), w.div_ceil(k));
    let mut out = vec![F::zero(); c * oh * ow];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let (ys, ye) = (oy * k, ((oy + 1) * k).min(h));
            for ox in 0..ow {
                let (xs, xe) = (ox * k, ((ox + 1) * k).min(w));
                let mut acc = F::zero();
                for y in ys..ye {
                    acc += plane[y * w + xs..y * w + xe].iter().copied().sum::<F>();
                }
                out[(ch * oh + oy) * ow + ox] = acc / F::of(((ye - ys) * (xe - xs)) as f64);
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward<F: Real>(g: &[F], c: usize, h: usize, w: usize, k: usize) -> Vec<F> {
    let (oh, ow) = (h.div_ceil(k), w.div_ceil(k));
    let mut out = vec![F::zero(); c * h * w];
    for ch in 0..c {
        for oy in 0..oh {
            let (ys, ye) = (oy * k, ((oy + 1) * k).min(h));
            for ox in 0..ow {
                let (xs, xe) = (ox * k, ((ox + 1) * k).min(w));
                let share = g[(ch * oh + oy) * ow + ox] / F::of(((ye - ys) * (xe - xs)) as f64);
                for y in ys..ye {
                    for v in &mut out[ch * h * w + y * w + xs..ch * h * w + y * w + xe] {
                        *v += share;
                    }
                }
            }
        }
    }
    out
}
