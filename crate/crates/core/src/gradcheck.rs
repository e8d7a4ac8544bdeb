//! Central finite-difference checks of reverse-mode gradients.
//!
//! Each [`GradCase`] builds a scalar from a few 64-bit inputs. The harness
//! compares the tape's gradient with `(f(x + h) - f(x - h)) / 2h` for every
//! input element and reports the norm-wise relative error.

use std::sync::Arc;

use crate::adapter::init_adapter;
use crate::error::Result;
use crate::geometry::{warp_features, warp_image, Transform};
use crate::graph::{Graph, NodeId};
use crate::image::Image;
use crate::params::Tag;
use crate::prior::{BackboneConfig, BackboneKind, PriorBackbone};
use crate::restorer::{Restorer, RestorerConfig};
use crate::rng;
use crate::synth::{gen_scene, SceneKind};
use crate::tensor::Tensor;
use crate::tta::{loss_graph, AdaptConfig, StepInputs};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, serde::Serialize)]
pub struct CheckOutcome {
    pub op: String,
    pub seed: u64,
    pub rel_error: f64,
    pub passed: bool,
}

pub trait GradCase {
    fn name(&self) -> String;

    fn inputs(&self, seed: u64) -> Vec<Tensor<f64>>;

    /// Builds the scalar root from the input nodes.
    fn forward(&self, g: &mut Graph<f64>, inputs: &[NodeId]) -> Result<NodeId>;

    /// Gradient of the root with respect to each input. The default runs the
    /// tape; test doubles override it.
    fn analytic(&self, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
        let mut g = Graph::new();
        let ids: Vec<_> = inputs.iter().map(|t| g.watch(t.clone())).collect();
        let root = self.forward(&mut g, &ids)?;
        let grads = g.backward(root)?;
        Ok(ids
            .iter()
            .zip(inputs)
            .map(|(id, t)| grads.input(*id).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect())
    }
}

/// `||a - b||_2 / max(||a||_2, ||b||_2, 1e-12)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-12)
}

fn eval_root(case: &dyn GradCase, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::new();
    let ids: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let root = case.forward(&mut g, &ids)?;
    Ok(g.value(root).data()[0])
}

pub fn numeric_gradient(case: &dyn GradCase, inputs: &[Tensor<f64>], h: f64) -> Result<Vec<Tensor<f64>>> {
    let mut out = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for k in 0..inputs.len() {
        let mut grad = Vec::with_capacity(inputs[k].len());
        for i in 0..inputs[k].len() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let fp = eval_root(case, &work)?;
            work[k].data_mut()[i] = orig - h;
            let fm = eval_root(case, &work)?;
            work[k].data_mut()[i] = orig;
            grad.push((fp - fm) / (2.0 * h));
        }
        out.push(Tensor::new(inputs[k].shape(), grad)?);
    }
    Ok(out)
}

pub fn check(case: &dyn GradCase, seed: u64, h: f64, tol: f64) -> Result<CheckOutcome> {
    let inputs = case.inputs(seed);
    let analytic = case.analytic(&inputs)?;
    let numeric = numeric_gradient(case, &inputs, h)?;
    let a: Vec<f64> = analytic.iter().flat_map(|t| t.data().to_vec()).collect();
    let n: Vec<f64> = numeric.iter().flat_map(|t| t.data().to_vec()).collect();
    let rel_error = relative_error(&a, &n);
    Ok(CheckOutcome { op: case.name(), seed, rel_error, passed: rel_error <= tol })
}

/// Runs every case; a case that errors is reported as failed with an
/// infinite error.
pub fn run_suite(cases: &[Box<dyn GradCase>], seed: u64) -> Vec<CheckOutcome> {
    cases
        .iter()
        .map(|c| {
            check(c.as_ref(), seed, DEFAULT_STEP, DEFAULT_TOLERANCE).unwrap_or_else(|_| CheckOutcome {
                op: c.name(),
                seed,
                rel_error: f64::INFINITY,
                passed: false,
            })
        })
        .collect()
}

fn randn(seed: u64, label: &str, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng::normals(&mut rng::stream(seed, label), n)).expect("shape")
}

/// Projects a tensor node onto fixed random weights so that every output
/// element contributes to the scalar root.
pub fn project(g: &mut Graph<f64>, x: NodeId, seed: u64) -> Result<NodeId> {
    let w = randn(seed, "projection", g.shape(x));
    let w = g.constant(w);
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

type Forward = dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId> + Send + Sync;

/// A gradient case assembled from input shapes and a closure.
pub struct OpCase {
    name: String,
    shapes: Vec<Vec<usize>>,
    positive: bool,
    forward: Arc<Forward>,
}

impl OpCase {
    pub fn new(
        name: impl Into<String>,
        shapes: &[&[usize]],
        forward: impl Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId> + Send + Sync + 'static,
    ) -> Self {
        OpCase {
            name: name.into(),
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
            positive: false,
            forward: Arc::new(forward),
        }
    }

    /// Draws inputs uniformly from `[0.05, 0.95]` instead of N(0, 1).
    pub fn unit_interval(mut self) -> Self {
        self.positive = true;
        self
    }
}

impl GradCase for OpCase {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn inputs(&self, seed: u64) -> Vec<Tensor<f64>> {
        self.shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let label = format!("{}#{i}", self.name);
                if self.positive {
                    let mut r = rng::stream(seed, &label);
                    let n = s.iter().product();
                    let v = (0..n).map(|_| rng::uniform(&mut r, 0.05, 0.95)).collect();
                    Tensor::new(s.clone(), v).expect("shape")
                } else {
                    randn(seed, &label, s)
                }
            })
            .collect()
    }

    fn forward(&self, g: &mut Graph<f64>, inputs: &[NodeId]) -> Result<NodeId> {
        (self.forward)(g, inputs)
    }
}

/// Finite-difference cases for every differentiable tape op.
pub fn op_cases() -> Vec<Box<dyn GradCase>> {
    let s = 7;
    let mut cases: Vec<Box<dyn GradCase>> = vec![
        Box::new(OpCase::new("add", &[&[3, 4], &[3, 4]], move |g, x| {
            let y = g.add(x[0], x[1])?;
            project(g, y, s)
        })),
        Box::new(OpCase::new("sub", &[&[3, 4], &[3, 4]], move |g, x| {
            let y = g.sub(x[0], x[1])?;
            project(g, y, s)
        })),
        Box::new(OpCase::new("mul", &[&[3, 4], &[3, 4]], move |g, x| {
            let y = g.mul(x[0], x[1])?;
            project(g, y, s)
        })),
        Box::new(OpCase::new("scale_offset_square", &[&[5]], move |g, x| {
            let y = g.scale(x[0], -1.7);
            let y = g.offset(y, 0.3);
            let y = g.square(y);
            project(g, y, s)
        })),
        Box::new(OpCase::new("matmul", &[&[3, 4], &[4, 5]], move |g, x| {
            let y = g.matmul(x[0], x[1])?;
            project(g, y, s)
        })),
        Box::new(OpCase::new("transpose_select", &[&[4, 6]], move |g, x| {
            let t = g.transpose(x[0])?;
            let t = g.reshape(t, &[6, 4])?;
            let y = g.select_cols(t, &[3, 0, 2])?;
            project(g, y, s)
        })),
        Box::new(OpCase::new("gather", &[&[3, 4]], move |g, x| {
            let y = g.gather(x[0], vec![5, 0, 11, 5, 7], &[5])?;
            project(g, y, s)
        })),
        Box::new(OpCase::new("conv2d", &[&[2, 5, 6], &[3, 2, 3, 3], &[3]], move |g, x| {
            let y = g.conv2d(x[0], x[1], Some(x[2]))?;
            project(g, y, s)
        })),
        Box::new(OpCase::new("relu", &[&[4, 5]], move |g, x| {
            let y = g.relu(x[0]);
            project(g, y, s)
        })),
        Box::new(OpCase::new("avg_pool", &[&[2, 5, 7]], move |g, x| {
            let y = g.avg_pool(x[0], 2)?;
            project(g, y, s)
        })),
        Box::new(OpCase::new("global_avg_pool", &[&[3, 4, 4]], move |g, x| {
            let y = g.global_avg_pool(x[0])?;
            project(g, y, s)
        })),
        Box::new(OpCase::new("add_channel_vec", &[&[3, 2, 4], &[3]], move |g, x| {
            let y = g.add_channel_vec(x[0], x[1])?;
            project(g, y, s)
        })),
        Box::new(OpCase::new("l2_normalize", &[&[4, 6]], move |g, x| {
            let y = g.l2_normalize_cols(x[0])?;
            project(g, y, s)
        })),
        Box::new(OpCase::new("bilinear_resize", &[&[2, 4, 5]], move |g, x| {
            let y = g.bilinear_resize(x[0], 7, 3)?;
            project(g, y, s)
        })),
        Box::new(OpCase::new("warp", &[&[2, 8, 8]], move |g, x| {
            let t = Transform::from_rows([[0.95, 0.12, 0.4], [-0.08, 1.03, -0.3], [0.002, -0.001, 1.0]])?;
            let plan = crate::geometry::warp_plan(&t, (8, 8), (8, 8))?;
            let y = g.resample(x[0], Arc::new(plan))?;
            project(g, y, s)
        })),
        Box::new(OpCase::new("concat", &[&[2, 3, 3], &[1, 3, 3]], move |g, x| {
            let y = g.concat(&[x[0], x[1]])?;
            project(g, y, s)
        })),
        Box::new(
            OpCase::new("clamp", &[&[12]], move |g, x| {
                let y = g.scale(x[0], 1.5);
                let y = g.offset(y, -0.2);
                let y = g.clamp(y, 0.0, 1.0);
                project(g, y, s)
            })
            .unit_interval(),
        ),
        Box::new(OpCase::new("minmax_off_diagonal", &[&[5, 5]], move |g, x| {
            let y = g.minmax_norm(x[0], 1e-8);
            g.off_diag_abs_sum(y)
        })),
        Box::new(OpCase::new("minmax_norm", &[&[4, 4]], move |g, x| {
            let y = g.minmax_norm(x[0], 1e-8);
            project(g, y, s)
        })),
        Box::new(OpCase::new("row_log_softmax", &[&[3, 5]], move |g, x| {
            let y = g.row_log_softmax(x[0])?;
            project(g, y, s)
        })),
    ];
    cases.push(Box::new(OpCase::new("sum_mean", &[&[2, 3]], |g, x| {
        let m = g.mean(x[0]);
        let sq = g.square(x[0]);
        let s2 = g.sum(sq);
        let both = g.concat(&[m, s2])?;
        Ok(g.sum(both))
    })));
    cases
}

/// A restorer whose zero-initialized layers are replaced by small seeded
/// weights, so that every path carries gradient.
fn live_restorer(seed: u64) -> Result<Restorer> {
    let mut r = Restorer::init(RestorerConfig::default(), seed)?;
    let names = r.params().names(Tag::Trainable);
    for name in names {
        let t = r.params_mut().trainable_mut(&name)?;
        if t.data().iter().all(|&v| v == 0.0) {
            let shape = t.shape().to_vec();
            *t = randn(seed, &name, &shape).map(|v| 0.1 * v);
        }
    }
    Ok(r.freeze())
}

/// Gradient cases through the composite modules and the full adaptation
/// loss. The end-to-end case differentiates `L_total` on a 16x16 pair with
/// respect to both adapter matrices.
pub fn pipeline_cases() -> Result<Vec<Box<dyn GradCase>>> {
    let s = 13;
    let restorer = Arc::new(live_restorer(s)?);
    let cr = restorer.channels();
    let mut cases: Vec<Box<dyn GradCase>> = Vec::new();

    let r = restorer.clone();
    cases.push(Box::new(
        OpCase::new("restore_with_injections", &[&[3, 6, 6], &[3, 6, 6], &[cr, 6, 6], &[cr, 6, 6]], move |g, x| {
            let y = r.restore_node(g, x[0], x[1], Some(x[2]), Some(x[3]))?;
            project(g, y, s)
        })
        .unit_interval(),
    ));

    let adapter = Arc::new(init_adapter(8, cr, 3, s)?);
    let a = adapter.clone();
    cases.push(Box::new(OpCase::new("adapter_projection", &[&[8, 3, 4], &[3, 8], &[cr, 3]], move |g, x| {
        let y = a.apply_with(g, x[0], (6, 8), x[1], x[2])?;
        project(g, y, s)
    })));

    for kind in [BackboneKind::PatchToken, BackboneKind::Diffusion, BackboneKind::Autoregressive] {
        let m = Arc::new(PriorBackbone::init(BackboneConfig { kind, ..Default::default() }, s)?);
        cases.push(Box::new(
            OpCase::new(format!("matcher_features_{}", kind.as_str()), &[&[3, 8, 8]], move |g, x| {
                let y = m.features(g, x[0])?;
                project(g, y, s)
            })
            .unit_interval(),
        ));
    }

    cases.push(Box::new(end_to_end_case(restorer, s)?));
    Ok(cases)
}

fn end_to_end_case(restorer: Arc<Restorer>, seed: u64) -> Result<OpCase> {
    let size = 16;
    let matcher = Arc::new(PriorBackbone::init(BackboneConfig::default(), seed)?);
    let hq = gen_scene(seed, SceneKind::Mixed, 3, size, size);
    let noise = rng::normals(&mut rng::stream(seed, "e2e-noise"), hq.data().len());
    let lq = Image::new(3, size, size, hq.data().iter().zip(noise).map(|(v, n)| v + 0.1 * n).collect())?.clamp01();
    let t = Transform::from_rows([[1.0, 0.02, 0.8], [-0.01, 1.0, -0.6], [0.0, 0.0, 1.0]])?;
    let z_src = matcher.extract_prior_as::<f64>(&lq)?;
    let z_hq = matcher.extract_prior_as::<f64>(&hq)?;
    let (warped_lq, mask) = warp_image(&lq, &t, (size, size))?;
    let (z_src_warped, _) = warp_features(&z_src, &t, matcher.stride(), (z_hq.height(), z_hq.width()))?;
    let inputs = Arc::new(StepInputs { warped_lq, hq, z_src_warped, z_hq, mask });
    let (cz, cr, rank) = (matcher.channels(), restorer.channels(), 4);
    let adapter = Arc::new(init_adapter(cz, cr, rank, seed)?);
    let lambda_p = AdaptConfig::default().lambda_p;
    Ok(OpCase::new("end_to_end_psi", &[&[rank, cz], &[cr, rank]], move |g, x| {
        let down = g.scale(x[0], 0.1);
        let up = g.scale(x[1], 0.1);
        let nodes = loss_graph(g, &inputs, &matcher, &restorer, &adapter, (down, up), lambda_p, 1e-8, true)?;
        Ok(nodes.total)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_case_passes() {
        for out in run_suite(&op_cases(), 11) {
            assert!(out.passed, "{} rel error {}", out.op, out.rel_error);
        }
    }

    #[test]
    fn every_pipeline_case_passes() {
        for out in run_suite(&pipeline_cases().unwrap(), 11) {
            assert!(out.passed, "{} rel error {}", out.op, out.rel_error);
        }
    }

    struct Wrong;

    impl GradCase for Wrong {
        fn name(&self) -> String {
            "planted_square".into()
        }
        fn inputs(&self, _: u64) -> Vec<Tensor<f64>> {
            vec![Tensor::new([2], vec![0.5, -1.0]).unwrap()]
        }
        fn forward(&self, g: &mut Graph<f64>, x: &[NodeId]) -> Result<NodeId> {
            let y = g.square(x[0]);
            Ok(g.sum(y))
        }
        fn analytic(&self, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
            // d/dx x^2 reported as x instead of 2x
            Ok(vec![inputs[0].clone()])
        }
    }

    #[test]
    fn planted_wrong_gradient_is_reported_by_name() {
        let out = run_suite(&[Box::new(Wrong)], 0);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].op, "planted_square");
        assert!(!out[0].passed);
        assert!(out[0].rel_error > 0.1);
    }
}
