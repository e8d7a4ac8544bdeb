//! Zero-initialized low-rank adapter.
//!
//! Matcher features are resampled to the restorer grid and passed through a
//! per-cell `C_z -> r -> C_r` linear map. The up projection starts at exact
//! zeros so the adapter's output is zero until the first update.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::image::FeatureMap;
use crate::params::{ParamRegistry, Tag};
use crate::rng;
use crate::tensor::{Real, Tensor};

pub const DOWN: &str = "adapter.down";
pub const UP: &str = "adapter.up";

/// Standard deviation of the seeded down-projection entries.
const DOWN_STD: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub c_z: usize,
    pub c_r: usize,
    pub rank: usize,
    pub seed: u64,
}

/// `psi`: the only trainable weights in an adaptation run.
#[derive(Clone, Debug)]
pub struct AdapterState {
    pub config: AdapterConfig,
    pub params: ParamRegistry,
}

pub fn init_adapter(c_z: usize, c_r: usize, rank: usize, seed: u64) -> Result<AdapterState> {
    if rank < 1 {
        return Err(Error::invalid(format!("adapter rank must be at least 1, got {rank}")));
    }
    if c_z == 0 || c_r == 0 {
        return Err(Error::invalid("adapter widths must be positive"));
    }
    let mut rng = rng::stream(seed, "adapter-init");
    let down = rng::normals(&mut rng, rank * c_z).into_iter().map(|v| DOWN_STD * v).collect();
    let mut params = ParamRegistry::new();
    params.insert(DOWN, Tensor::new([rank, c_z], down)?, Tag::Trainable)?;
    params.insert(UP, Tensor::zeros([c_r, rank]), Tag::Trainable)?;
    Ok(AdapterState { config: AdapterConfig { c_z, c_r, rank, seed }, params })
}

impl AdapterState {
    pub fn from_params(config: AdapterConfig, params: ParamRegistry) -> Result<Self> {
        let (r, cz, cr) = (config.rank, config.c_z, config.c_r);
        if params.value(DOWN)?.shape() != [r, cz] || params.value(UP)?.shape() != [cr, r] || params.len() != 2 {
            return Err(Error::invalid("adapter weights do not match the configuration"));
        }
        Ok(AdapterState { config, params })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars(Tag::Trainable)
    }

    /// Graph form of [`AdapterState::apply`]. Each call site reuses the same
    /// parameter nodes, so both streams share `psi` and its gradient.
    pub fn apply_node<F: Real>(&self, g: &mut Graph<F>, z: NodeId, grid: (usize, usize)) -> Result<NodeId> {
        let down = g.param(&self.params, DOWN)?;
        let up = g.param(&self.params, UP)?;
        self.apply_with(g, z, grid, down, up)
    }

    /// Projection with explicit `(down, up)` nodes in place of the stored
    /// parameters.
    pub fn apply_with<F: Real>(
        &self,
        g: &mut Graph<F>,
        z: NodeId,
        grid: (usize, usize),
        down: NodeId,
        up: NodeId,
    ) -> Result<NodeId> {
        let s = g.shape(z).to_vec();
        if s.len() != 3 || s[0] != self.config.c_z {
            return Err(Error::shape("adapter", format!("expected {} channels, got {s:?}", self.config.c_z)));
        }
        let z = if (s[1], s[2]) == grid { z } else { g.bilinear_resize(z, grid.0, grid.1)? };
        let cells = g.reshape(z, &[self.config.c_z, grid.0 * grid.1])?;
        let low = g.matmul(down, cells)?;
        let out = g.matmul(up, low)?;
        g.reshape(out, &[self.config.c_r, grid.0, grid.1])
    }

    /// Injection for a matcher feature map on a restorer grid.
    pub fn apply(&self, z: &FeatureMap, grid: (usize, usize)) -> Result<FeatureMap> {
        let mut g = Graph::<f64>::new();
        let x = g.constant(z.to_tensor());
        let y = self.apply_node(&mut g, x, grid)?;
        FeatureMap::from_tensor(g.value(y))
    }
}
