//! Multi-scale refinement module.
//!
//! Each layer projects a tapped backbone activation to `refine_width`
//! channels, lifts it to `2x` and `4x` the patch grid with stride-2
//! transposed convolutions, gates each scale per pixel and adds the result
//! into a running `(H/8, H/4)` feature pair.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::kernels;
use crate::nn::{batch_norm, Conv1x1Block, Init, Mode, Scope};
use crate::params::{EntryKind, ParamStore};
use crate::tensor::{Float, Tensor};

/// Per-pixel channel MLP: `tanh(w2 relu(w1 x + b1) + b2) * x`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GatingUnit {
    pub prefix: String,
    pub width: usize,
    pub hidden: usize,
}

impl GatingUnit {
    pub fn new(prefix: impl Into<String>, width: usize, hidden: usize) -> Self {
        Self {
            prefix: prefix.into(),
            width,
            hidden,
        }
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    pub fn param_count(&self) -> usize {
        2 * self.width * self.hidden + self.hidden + self.width
    }

    pub fn register<T: Float>(&self, store: &mut ParamStore<T>, init: &mut Init<'_>) -> Result<()> {
        let (c, h) = (self.width, self.hidden);
        store.insert(&self.name("w1"), init.fan_in_uniform(&[h, c], c), false, EntryKind::Param)?;
        store.insert(&self.name("b1"), init.fan_in_uniform(&[h], c), false, EntryKind::Param)?;
        store.insert(&self.name("w2"), init.fan_in_uniform(&[c, h], h), false, EntryKind::Param)?;
        store.insert(&self.name("b2"), init.fan_in_uniform(&[c], h), false, EntryKind::Param)
    }

    pub fn gate<'t, T: Float>(&self, scope: &Scope<'_, 't, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.width {
            return Err(Error::Shape(format!(
                "{}: expected {} channels, got {c}",
                self.prefix, self.width
            )));
        }
        let ctx = |e: Error| e.context(&self.prefix);
        let hidden = kernels::pointwise(x, scope.param(&self.name("w1"))?, Some(scope.param(&self.name("b1"))?))
            .map_err(ctx)?
            .relu();
        let weights = kernels::pointwise(hidden, scope.param(&self.name("w2"))?, Some(scope.param(&self.name("b2"))?))
            .map_err(ctx)?
            .tanh();
        weights.mul(x)
    }
}

/// Stride-2, kernel-2 transposed convolution stored as `{prefix}.weight` `(Ci, Co, 2, 2)` and `{prefix}.bias`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Deconv2x {
    pub prefix: String,
    pub c_in: usize,
    pub c_out: usize,
}

impl Deconv2x {
    pub fn new(prefix: impl Into<String>, c_in: usize, c_out: usize) -> Self {
        Self {
            prefix: prefix.into(),
            c_in,
            c_out,
        }
    }

    pub fn param_count(&self) -> usize {
        self.c_in * self.c_out * 4 + self.c_out
    }

    pub fn register<T: Float>(&self, store: &mut ParamStore<T>, init: &mut Init<'_>) -> Result<()> {
        let fan_in = self.c_out * 4;
        store.insert(
            &format!("{}.weight", self.prefix),
            init.fan_in_uniform(&[self.c_in, self.c_out, 2, 2], fan_in),
            false,
            EntryKind::Param,
        )?;
        store.insert(
            &format!("{}.bias", self.prefix),
            init.fan_in_uniform(&[self.c_out], fan_in),
            false,
            EntryKind::Param,
        )
    }

    pub fn forward<'t, T: Float>(&self, scope: &Scope<'_, 't, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let w = scope.param(&format!("{}.weight", self.prefix))?;
        let b = scope.param(&format!("{}.bias", self.prefix))?;
        kernels::deconv2x(x, w, b).map_err(|e| e.context(&self.prefix))
    }
}

/// One refinement layer and its parameter names.
#[derive(Debug, Clone)]
pub struct MrmLayer {
    pub prefix: String,
    pub project: Conv1x1Block,
    pub up2: Deconv2x,
    pub up4_first: Deconv2x,
    pub up4_second: Deconv2x,
    pub gates: [GatingUnit; 2],
}

impl MrmLayer {
    fn new(index: usize, embed_dim: usize, width: usize) -> Self {
        let prefix = format!("mrm.layers.{index}");
        Self {
            project: Conv1x1Block::conv1x1(format!("{prefix}.project"), embed_dim, width),
            up2: Deconv2x::new(format!("{prefix}.up2"), width, width),
            up4_first: Deconv2x::new(format!("{prefix}.up4.0"), width, width),
            up4_second: Deconv2x::new(format!("{prefix}.up4.1"), width, width),
            gates: [
                GatingUnit::new(format!("{prefix}.gate1"), width, width),
                GatingUnit::new(format!("{prefix}.gate2"), width, width),
            ],
            prefix,
        }
    }

    fn up4_bn(&self) -> String {
        format!("{}.up4.bn", self.prefix)
    }

    pub fn param_count(&self) -> usize {
        self.project.param_count()
            + self.up2.param_count()
            + self.up4_first.param_count()
            + 2 * self.up4_first.c_out
            + self.up4_second.param_count()
            + self.gates.iter().map(GatingUnit::param_count).sum::<usize>()
    }

    fn register<T: Float>(&self, store: &mut ParamStore<T>, init: &mut Init<'_>) -> Result<()> {
        self.project.register(store, init, false)?;
        self.up2.register(store, init)?;
        self.up4_first.register(store, init)?;
        let c = self.up4_first.c_out;
        let bn = self.up4_bn();
        store.insert(&format!("{bn}.weight"), Tensor::ones(&[c]), false, EntryKind::Param)?;
        store.insert(&format!("{bn}.bias"), Tensor::zeros(&[c]), false, EntryKind::Param)?;
        store.insert(&format!("{bn}.running_mean"), Tensor::zeros(&[c]), false, EntryKind::Buffer)?;
        store.insert(&format!("{bn}.running_var"), Tensor::ones(&[c]), false, EntryKind::Buffer)?;
        self.up4_second.register(store, init)?;
        for g in &self.gates {
            g.register(store, init)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Mrm {
    pub embed_dim: usize,
    pub refine_width: usize,
    pub taps: Vec<usize>,
    pub layers: Vec<MrmLayer>,
}

impl Mrm {
    pub fn new(embed_dim: usize, refine_width: usize, taps: Vec<usize>, depth: usize) -> Result<Self> {
        if refine_width == 0 || embed_dim == 0 {
            return Err(Error::Config("mrm widths must be positive".into()));
        }
        if taps.is_empty() {
            return Err(Error::Config("mrm needs at least one tap".into()));
        }
        if taps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("mrm taps {taps:?} are not strictly increasing")));
        }
        if let Some(&bad) = taps.iter().find(|&&t| t >= depth) {
            return Err(Error::Config(format!("mrm tap {bad} is out of range for depth {depth}")));
        }
        let layers = (0..taps.len()).map(|i| MrmLayer::new(i, embed_dim, refine_width)).collect();
        Ok(Self {
            embed_dim,
            refine_width,
            taps,
            layers,
        })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(MrmLayer::param_count).sum()
    }

    pub fn register<T: Float>(&self, store: &mut ParamStore<T>, init: &mut Init<'_>) -> Result<()> {
        for layer in &self.layers {
            layer.register(store, init)?;
        }
        Ok(())
    }

    fn layer(&self, index: usize) -> Result<&MrmLayer> {
        self.layers
            .get(index)
            .ok_or_else(|| Error::Config(format!("mrm layer {index} does not exist")))
    }

    /// Zero accumulators at `2x` and `4x` the `(h, w)` patch grid.
    pub fn init_hierarchy<'t, T: Float>(
        &self,
        scope: &Scope<'_, 't, T>,
        batch: usize,
        h: usize,
        w: usize,
    ) -> (Var<'t, T>, Var<'t, T>) {
        let c = self.refine_width;
        let tape = scope.tape();
        (
            tape.constant(Tensor::zeros(&[batch, c, 2 * h, 2 * w])),
            tape.constant(Tensor::zeros(&[batch, c, 4 * h, 4 * w])),
        )
    }

    /// Projects `f_vit` and lifts it to `2x` and `4x` resolution.
    pub fn project_and_upsample<'t, T: Float>(
        &self,
        scope: &Scope<'_, 't, T>,
        index: usize,
        f_vit: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let layer = self.layer(index)?;
        let p = layer.project.forward(scope, f_vit)?;
        let up2 = layer.up2.forward(scope, p)?;
        let mid = layer.up4_first.forward(scope, p)?;
        let bn = layer.up4_bn();
        if scope.mode() == Mode::Train && mid.dims4()?.0 < 2 {
            return Err(Error::Validation(format!(
                "{bn}: train-mode batch statistics need a batch of at least 2, got {}",
                mid.dims4()?.0
            )));
        }
        let mid = batch_norm(scope, &bn, mid)?;
        let up4 = layer.up4_second.forward(scope, mid.relu())?;
        Ok((up2, up4))
    }

    pub fn gate<'t, T: Float>(
        &self,
        scope: &Scope<'_, 't, T>,
        index: usize,
        scale: usize,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let unit = self
            .layer(index)?
            .gates
            .get(scale)
            .ok_or_else(|| Error::Config(format!("mrm scale {scale} does not exist")))?;
        unit.gate(scope, x)
    }

    /// `prev[k] + gate_k(up_k(project(f_vit)))` for both scales.
    pub fn mrm_step<'t, T: Float>(
        &self,
        scope: &Scope<'_, 't, T>,
        index: usize,
        f_vit: Var<'t, T>,
        prev: (Var<'t, T>, Var<'t, T>),
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let (up2, up4) = self.project_and_upsample(scope, index, f_vit)?;
        let mut out = Vec::with_capacity(2);
        for (k, (fresh, acc)) in [(up2, prev.0), (up4, prev.1)].into_iter().enumerate() {
            if fresh.shape() != acc.shape() {
                return Err(Error::Shape(format!(
                    "mrm.layers.{index}: scale {} accumulator has shape {:?}, expected {:?}",
                    k + 1,
                    acc.shape(),
                    fresh.shape()
                )));
            }
            out.push(self.gate(scope, index, k, fresh)?.add(acc)?);
        }
        Ok((out[0], out[1]))
    }
}
