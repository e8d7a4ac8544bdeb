//! Layer helpers shared by the stand-in networks.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::params::{ParamRegistry, Tag};
use crate::tensor::{Real, Tensor};

pub(crate) enum Init {
    /// Normal with variance `2 / fan_in`.
    He,
    Zero,
}

/// Registers `<name>.w` of shape `(cout, cin, k, k)` and a zero `<name>.b`.
pub(crate) fn add_conv(
    reg: &mut ParamRegistry,
    rng: &mut impl Rng,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    init: Init,
) -> Result<()> {
    let n = cout * cin * k * k;
    let w = match init {
        Init::He => {
            let normal = Normal::new(0.0, (2.0 / (cin * k * k) as f64).sqrt()).expect("positive std");
            (0..n).map(|_| normal.sample(rng)).collect()
        }
        Init::Zero => vec![0.0; n],
    };
    reg.insert(format!("{name}.w"), Tensor::new([cout, cin, k, k], w)?, Tag::Trainable)?;
    reg.insert(format!("{name}.b"), Tensor::zeros([cout]), Tag::Trainable)?;
    Ok(())
}

pub(crate) fn conv<F: Real>(
    g: &mut Graph<F>,
    reg: &ParamRegistry,
    name: &str,
    x: NodeId,
    relu: bool,
) -> Result<NodeId> {
    let w = g.param(reg, &format!("{name}.w"))?;
    let b = g.param(reg, &format!("{name}.b"))?;
    let y = g.conv2d(x, w, Some(b))?;
    Ok(if relu { g.relu(y) } else { y })
}

/// `(C, H, W)` map to the `(C, H*W)` matrix of its cells.
pub(crate) fn cells<F: Real>(g: &mut Graph<F>, x: NodeId) -> Result<NodeId> {
    let s = g.shape(x).to_vec();
    g.reshape(x, &[s[0], s[1] * s[2]])
}

/// Cosine-similarity matrix between the cells of two equally shaped maps.
pub(crate) fn cosine_volume<F: Real>(g: &mut Graph<F>, a: NodeId, b: NodeId) -> Result<NodeId> {
    let (ca, cb) = (cells(g, a)?, cells(g, b)?);
    let (na, nb) = (g.l2_normalize_cols(ca)?, g.l2_normalize_cols(cb)?);
    let at = g.transpose(na)?;
    g.matmul(at, nb)
}

/// Mean squared difference of two nodes.
pub(crate) fn mse<F: Real>(g: &mut Graph<F>, a: NodeId, b: NodeId) -> Result<NodeId> {
    let d = g.sub(a, b)?;
    let s = g.square(d);
    Ok(g.mean(s))
}
