//! Bilinear sampling plans shared by resizing and homography warping.
//!
//! A plan records, for every output pixel, the four source taps and their
//! weights (or `None` when the sample falls outside the source). The same plan
//! is applied to every channel, so validity depends only on geometry.

/// Tolerance for sample coordinates that land just outside the source due to
/// rounding in the inverse transform.
const EDGE_TOL: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct SamplePlan {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    taps: Vec<Option<Taps>>,
}

#[derive(Clone, Copy, Debug)]
struct Taps {
    idx: [u32; 4],
    w: [f64; 4],
}

impl SamplePlan {
    /// Builds a plan from a per-pixel source coordinate function. Pixel
    /// centers sit at integer coordinates, `x` is the column.
    pub fn from_fn(
        in_h: usize,
        in_w: usize,
        out_h: usize,
        out_w: usize,
        mut src: impl FnMut(f64, f64) -> Option<(f64, f64)>,
    ) -> Self {
        let mut taps = Vec::with_capacity(out_h * out_w);
        let (max_x, max_y) = ((in_w - 1) as f64, (in_h - 1) as f64);
        for oy in 0..out_h {
            for ox in 0..out_w {
                let tap = src(ox as f64, oy as f64).and_then(|(sx, sy)| {
                    if !(sx.is_finite() && sy.is_finite()) {
                        return None;
                    }
                    if sx < -EDGE_TOL || sy < -EDGE_TOL || sx > max_x + EDGE_TOL || sy > max_y + EDGE_TOL {
                        return None;
                    }
                    Some(bilinear_taps(sx.clamp(0.0, max_x), sy.clamp(0.0, max_y), in_w, in_h))
                });
                taps.push(tap);
            }
        }
        SamplePlan { in_h, in_w, out_h, out_w, taps }
    }

    /// Half-pixel-center resize with edge clamping; always fully valid.
    pub fn resize(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        let sy = in_h as f64 / out_h as f64;
        let sx = in_w as f64 / out_w as f64;
        let (max_x, max_y) = ((in_w - 1) as f64, (in_h - 1) as f64);
        Self::from_fn(in_h, in_w, out_h, out_w, |x, y| {
            Some((
                ((x + 0.5) * sx - 0.5).clamp(0.0, max_x),
                ((y + 0.5) * sy - 0.5).clamp(0.0, max_y),
            ))
        })
    }

    pub fn valid(&self) -> Vec<bool> {
        self.taps.iter().map(Option::is_some).collect()
    }

    pub(crate) fn apply<F: crate::Real>(&self, src: &[F], channels: usize) -> Vec<F> {
        let (ip, op) = (self.in_h * self.in_w, self.out_h * self.out_w);
        let mut out = vec![F::zero(); channels * op];
        for c in 0..channels {
            let s = &src[c * ip..(c + 1) * ip];
            let o = &mut out[c * op..(c + 1) * op];
            for (dst, tap) in o.iter_mut().zip(&self.taps) {
                if let Some(t) = tap {
                    let mut acc = F::zero();
                    for k in 0..4 {
                        if t.w[k] != 0.0 {
                            acc += F::of(t.w[k]) * s[t.idx[k] as usize];
                        }
                    }
                    *dst = acc;
                }
            }
        }
        out
    }

    pub(crate) fn apply_transpose<F: crate::Real>(&self, grad: &[F], channels: usize) -> Vec<F> {
        let (ip, op) = (self.in_h * self.in_w, self.out_h * self.out_w);
        let mut out = vec![F::zero(); channels * ip];
        for c in 0..channels {
            let g = &grad[c * op..(c + 1) * op];
            let o = &mut out[c * ip..(c + 1) * ip];
            for (gv, tap) in g.iter().zip(&self.taps) {
                if let Some(t) = tap {
                    for k in 0..4 {
                        if t.w[k] != 0.0 {
                            o[t.idx[k] as usize] += F::of(t.w[k]) * *gv;
                        }
                    }
                }
            }
        }
        out
    }
}

fn bilinear_taps(x: f64, y: f64, w: usize, h: usize) -> Taps {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let x0 = x0 as usize;
    let y0 = y0 as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let at = |yy: usize, xx: usize| (yy * w + xx) as u32;
    Taps {
        idx: [at(y0, x0), at(y0, x1), at(y1, x0), at(y1, x1)],
        w: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
    }
}
