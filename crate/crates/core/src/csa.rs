//! Convolutional side adapter.
//!
//! Layer 0 seeds the side stream; layers `1..=depth` run ahead of each backbone
//! block; layer `depth + 1` runs on the encoder output. Each step expands the
//! side feature to the backbone width, adds it into the backbone stream, then
//! compresses the fused activation back to the side width.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Conv1x1Block, Init, Scope};
use crate::params::ParamStore;
use crate::tensor::{Float, Tensor};

/// How the side stream is seeded from the patch embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CsaInit {
    #[default]
    Zeros,
    /// A learned 1x1 block, `csa.init`, applied to the patch embedding.
    Projection,
}

#[derive(Debug, Clone)]
pub struct Csa {
    pub side_width: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub init: CsaInit,
}

impl Csa {
    pub fn new(side_width: usize, embed_dim: usize, depth: usize, init: CsaInit) -> Result<Self> {
        if side_width == 0 || embed_dim == 0 || depth == 0 {
            return Err(Error::Config("csa widths and depth must be positive".into()));
        }
        Ok(Self {
            side_width,
            embed_dim,
            depth,
            init,
        })
    }

    /// Layers including the seeding layer 0.
    pub fn layer_count(&self) -> usize {
        self.depth + 2
    }

    /// Indices of the layers that run an expand/inject/compress step.
    pub fn step_layers(&self) -> std::ops::RangeInclusive<usize> {
        1..=self.depth + 1
    }

    pub fn expand_block(&self, layer: usize) -> Conv1x1Block {
        Conv1x1Block::conv1x1(format!("csa.layers.{layer}.expand"), self.side_width, self.embed_dim)
    }

    pub fn compress_block(&self, layer: usize) -> Conv1x1Block {
        Conv1x1Block::conv1x1(format!("csa.layers.{layer}.compress"), self.embed_dim, self.side_width)
    }

    pub fn init_block(&self) -> Conv1x1Block {
        Conv1x1Block::conv1x1("csa.init", self.embed_dim, self.side_width)
    }

    /// Scalars in one expand/compress pair.
    pub fn layer_param_count(&self) -> usize {
        let (c1, c) = (self.side_width, self.embed_dim);
        (c1 * c + c + 2 * c) + (c * c1 + c1 + 2 * c1)
    }

    pub fn param_count(&self) -> usize {
        let seed = match self.init {
            CsaInit::Zeros => 0,
            CsaInit::Projection => self.init_block().param_count(),
        };
        seed + (self.depth + 1) * self.layer_param_count()
    }

    pub fn register<T: Float>(&self, store: &mut ParamStore<T>, init: &mut Init<'_>) -> Result<()> {
        if self.init == CsaInit::Projection {
            self.init_block().register(store, init, false)?;
        }
        for layer in self.step_layers() {
            self.expand_block(layer).register(store, init, false)?;
            self.compress_block(layer).register(store, init, false)?;
        }
        Ok(())
    }

    /// Side feature `F_csa^0` of width `side_width` at the patch grid.
    pub fn csa_init<'t, T: Float>(&self, scope: &Scope<'_, 't, T>, patch_feat: Var<'t, T>) -> Result<Var<'t, T>> {
        let (b, _, h, w) = patch_feat.dims4().map_err(|e| e.context("csa.init"))?;
        match self.init {
            CsaInit::Zeros => Ok(scope.tape().constant(Tensor::zeros(&[b, self.side_width, h, w]))),
            CsaInit::Projection => self.init_block().forward(scope, patch_feat),
        }
    }

    /// Returns `(F_vit_next, F_csa_next)` for step layer `layer`.
    pub fn csa_step<'t, T: Float>(
        &self,
        scope: &Scope<'_, 't, T>,
        layer: usize,
        f_csa: Var<'t, T>,
        f_vit: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        if !self.step_layers().contains(&layer) {
            return Err(Error::Config(format!("csa layer {layer} is not a step layer")));
        }
        let (bs, cs, hs, ws) = f_csa.dims4()?;
        let (bv, cv, hv, wv) = f_vit.dims4()?;
        if (bs, hs, ws) != (bv, hv, wv) || cs != self.side_width || cv != self.embed_dim {
            return Err(Error::Shape(format!(
                "csa.layers.{layer}: side stream {:?} and backbone stream {:?} do not match",
                f_csa.shape(),
                f_vit.shape()
            )));
        }
        let injected = self.expand_block(layer).forward(scope, f_csa)?;
        let f_vit_next = f_vit.add(injected)?;
        let f_csa_next = self.compress_block(layer).forward(scope, f_vit_next)?;
        Ok((f_vit_next, f_csa_next))
    }
}
