//! Frozen ViT-style image encoder.
//!
//! A 16x16 stride-16 patch embedding followed by `depth` pre-norm transformer
//! blocks operating at `H/16 x W/16`. Activations stay in `(B, C, h, w)`
//! layout throughout; attention runs globally over all `h*w` tokens.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::kernels;
use crate::nn::{Init, Scope};
use crate::params::{EntryKind, ParamStore};
use crate::tensor::{Float, Tensor};

pub const PATCH_SIZE: usize = 16;
const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub patch_size: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            depth: 4,
            patch_size: PATCH_SIZE,
            num_heads: 4,
            mlp_ratio: 4.0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size != PATCH_SIZE {
            return Err(Error::Config(format!(
                "backbone.patch_size must be {PATCH_SIZE}, got {}",
                self.patch_size
            )));
        }
        if self.embed_dim == 0 || self.depth == 0 || self.num_heads == 0 {
            return Err(Error::Config(
                "backbone embed_dim, depth and num_heads must be positive".into(),
            ));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "backbone.embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return Err(Error::Config(format!("invalid backbone.mlp_ratio {}", self.mlp_ratio)));
        }
        Ok(())
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    /// Closed-form number of backbone scalars.
    pub fn param_count(&self) -> usize {
        let c = self.embed_dim;
        let hidden = self.mlp_hidden();
        let patch = c * 3 * PATCH_SIZE * PATCH_SIZE + c;
        let block = 2 * c // norm1
            + 3 * c * c + 3 * c // qkv
            + c * c + c // proj
            + 2 * c // norm2
            + hidden * c + hidden // fc1
            + c * hidden + c; // fc2
        patch + self.depth * block
    }
}

/// Per-block outputs of the encoder.
#[derive(Debug, Clone)]
pub struct BackboneActivations<'t, T: Float> {
    /// Output of block `j`, before any injection ahead of block `j+1`.
    pub per_block: Vec<Var<'t, T>>,
    pub final_feature: Var<'t, T>,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    fn block_name(j: usize, rest: &str) -> String {
        format!("backbone.blocks.{j}.{rest}")
    }

    /// Adds all backbone parameters to `store`, flagged frozen.
    pub fn register<T: Float>(&self, store: &mut ParamStore<T>, init: &mut Init<'_>) -> Result<()> {
        let c = self.config.embed_dim;
        let hidden = self.config.mlp_hidden();
        let add = |store: &mut ParamStore<T>, name: String, t: Tensor<T>| {
            store.insert(&name, t, true, EntryKind::Param)
        };
        add(
            store,
            "backbone.patch_embed.weight".into(),
            init.trunc_normal(&[c, 3, PATCH_SIZE, PATCH_SIZE], INIT_STD),
        )?;
        add(store, "backbone.patch_embed.bias".into(), Tensor::zeros(&[c]))?;
        for j in 0..self.config.depth {
            add(store, Self::block_name(j, "norm1.weight"), Tensor::ones(&[c]))?;
            add(store, Self::block_name(j, "norm1.bias"), Tensor::zeros(&[c]))?;
            add(store, Self::block_name(j, "attn.qkv.weight"), init.trunc_normal(&[3 * c, c, 1, 1], INIT_STD))?;
            add(store, Self::block_name(j, "attn.qkv.bias"), Tensor::zeros(&[3 * c]))?;
            add(store, Self::block_name(j, "attn.proj.weight"), init.trunc_normal(&[c, c, 1, 1], INIT_STD))?;
            add(store, Self::block_name(j, "attn.proj.bias"), Tensor::zeros(&[c]))?;
            add(store, Self::block_name(j, "norm2.weight"), Tensor::ones(&[c]))?;
            add(store, Self::block_name(j, "norm2.bias"), Tensor::zeros(&[c]))?;
            add(store, Self::block_name(j, "mlp.fc1.weight"), init.trunc_normal(&[hidden, c, 1, 1], INIT_STD))?;
            add(store, Self::block_name(j, "mlp.fc1.bias"), Tensor::zeros(&[hidden]))?;
            add(store, Self::block_name(j, "mlp.fc2.weight"), init.trunc_normal(&[c, hidden, 1, 1], INIT_STD))?;
            add(store, Self::block_name(j, "mlp.fc2.bias"), Tensor::zeros(&[c]))?;
        }
        Ok(())
    }

    /// `(B, 3, H, W)` image to `(B, C, H/16, W/16)` patch tokens.
    pub fn patch_embed<'t, T: Float>(&self, scope: &Scope<'_, 't, T>, image: Var<'t, T>) -> Result<Var<'t, T>> {
        let (_, c, h, w) = image.dims4().map_err(|e| e.context("backbone.patch_embed"))?;
        if c != 3 {
            return Err(Error::Shape(format!(
                "backbone.patch_embed: expected 3 input channels, got {c}"
            )));
        }
        for (dim, len) in [("height", h), ("width", w)] {
            if len == 0 || len % PATCH_SIZE != 0 {
                return Err(Error::Shape(format!(
                    "backbone.patch_embed: image {dim} {len} is not a positive multiple of {PATCH_SIZE}"
                )));
            }
        }
        if !image.value().is_finite() {
            return Err(Error::Numeric("backbone.patch_embed: image contains non-finite values".into()));
        }
        let weight = scope.param("backbone.patch_embed.weight")?;
        let bias = scope.param("backbone.patch_embed.bias")?;
        kernels::conv2d(image, weight, Some(bias), PATCH_SIZE, 0).map_err(|e| e.context("backbone.patch_embed"))
    }

    /// One pre-norm transformer block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
    pub fn block_forward<'t, T: Float>(
        &self,
        scope: &Scope<'_, 't, T>,
        j: usize,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        if j >= self.config.depth {
            return Err(Error::Config(format!("block index {j} >= depth {}", self.config.depth)));
        }
        let p = |rest: &str| scope.param(&Self::block_name(j, rest));
        let ctx = |e: Error| e.context(&format!("backbone.blocks.{j}"));

        let h = kernels::layer_norm_channels(x, p("norm1.weight")?, p("norm1.bias")?, LN_EPS).map_err(ctx)?;
        let qkv = kernels::pointwise(h, p("attn.qkv.weight")?, Some(p("attn.qkv.bias")?)).map_err(ctx)?;
        let a = kernels::self_attention(qkv, self.config.num_heads).map_err(ctx)?;
        let a = kernels::pointwise(a, p("attn.proj.weight")?, Some(p("attn.proj.bias")?)).map_err(ctx)?;
        let x = x.add(a).map_err(ctx)?;

        let h = kernels::layer_norm_channels(x, p("norm2.weight")?, p("norm2.bias")?, LN_EPS).map_err(ctx)?;
        let m = kernels::pointwise(h, p("mlp.fc1.weight")?, Some(p("mlp.fc1.bias")?)).map_err(ctx)?;
        let m = kernels::pointwise(m.gelu(), p("mlp.fc2.weight")?, Some(p("mlp.fc2.bias")?)).map_err(ctx)?;
        let out = x.add(m).map_err(ctx)?;
        if !out.value().is_finite() {
            return Err(Error::Numeric(format!("backbone block {j} produced non-finite activations")));
        }
        Ok(out)
    }

    /// Runs the whole encoder, adding `injections[j]` (when present) to the input of block `j`.
    pub fn encoder_forward<'t, T: Float>(
        &self,
        scope: &Scope<'_, 't, T>,
        image: Var<'t, T>,
        injections: Option<&[Option<Var<'t, T>>]>,
    ) -> Result<BackboneActivations<'t, T>> {
        let depth = self.config.depth;
        if let Some(inj) = injections {
            if inj.len() != depth {
                return Err(Error::Shape(format!(
                    "backbone: {} injections supplied for {depth} blocks",
                    inj.len()
                )));
            }
        }
        let mut x = self.patch_embed(scope, image)?;
        let mut per_block = Vec::with_capacity(depth);
        for j in 0..depth {
            if let Some(Some(delta)) = injections.map(|inj| inj[j]) {
                if delta.shape() != x.shape() {
                    return Err(Error::Shape(format!(
                        "backbone: injection for block {j} has shape {:?}, activations are {:?}",
                        delta.shape(),
                        x.shape()
                    )));
                }
                x = x.add(delta)?;
            }
            x = self.block_forward(scope, j, x)?;
            per_block.push(x);
        }
        Ok(BackboneActivations {
            per_block,
            final_feature: x,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::nn::Mode;
    use crate::params::CountFilter;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn build<T: Float>(cfg: BackboneConfig, seed: u64) -> (Backbone, ParamStore<T>) {
        let bb = Backbone::new(cfg).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        bb.register(&mut store, &mut Init { rng: &mut rng }).unwrap();
        (bb, store)
    }

    fn random_image<T: Float>(shape: &[usize], seed: u64) -> Tensor<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| T::of_f64(rng.random_range(0.0..1.0)))
    }

    #[test]
    fn config_validation() {
        assert!(BackboneConfig::default().validate().is_ok());
        let bad = BackboneConfig { patch_size: 8, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = BackboneConfig { num_heads: 5, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn param_count_matches_store() {
        let (bb, store) = build::<f32>(BackboneConfig::default(), 0);
        assert_eq!(store.count(CountFilter::All), bb.config.param_count());
        assert_eq!(store.count(CountFilter::Frozen), store.count(CountFilter::All));
    }

    #[test]
    fn patch_embed_shape_and_divisibility() {
        let (bb, store) = build::<f32>(BackboneConfig::default(), 0);
        let tape = Tape::new();
        let scope = Scope::new(&tape, &store, Mode::Eval, false);
        let img = tape.constant(random_image(&[1, 3, 64, 64], 1));
        assert_eq!(bb.patch_embed(&scope, img).unwrap().shape(), vec![1, 32, 4, 4]);

        let img = tape.constant(Tensor::zeros(&[1, 3, 64, 40]));
        let err = bb.patch_embed(&scope, img).unwrap_err().to_string();
        assert!(err.contains("width 40"), "{err}");
        let img = tape.constant(Tensor::zeros(&[1, 3, 24, 64]));
        let err = bb.patch_embed(&scope, img).unwrap_err().to_string();
        assert!(err.contains("height 24"), "{err}");
    }

    #[test]
    fn patch_embed_zero_weights_zero_output() {
        let (bb, mut store) = build::<f32>(BackboneConfig::default(), 0);
        store.set("backbone.patch_embed.weight", Tensor::zeros(&[32, 3, 16, 16])).unwrap();
        let tape = Tape::new();
        let scope = Scope::new(&tape, &store, Mode::Eval, false);
        let out = bb.patch_embed(&scope, tape.constant(Tensor::zeros(&[1, 3, 32, 32]))).unwrap();
        assert!(out.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patch_embed_deterministic() {
        let run = || {
            let (bb, store) = build::<f32>(BackboneConfig::default(), 0);
            let tape = Tape::new();
            let scope = Scope::new(&tape, &store, Mode::Eval, false);
            let out = bb.patch_embed(&scope, tape.constant(random_image(&[1, 3, 64, 64], 0))).unwrap();
            out.value().checksum()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zeroed_output_projections_give_identity_block() {
        let (bb, mut store) = build::<f64>(BackboneConfig::default(), 3);
        store.set("backbone.blocks.1.attn.proj.weight", Tensor::zeros(&[32, 32, 1, 1])).unwrap();
        store.set("backbone.blocks.1.mlp.fc2.weight", Tensor::zeros(&[32, 128, 1, 1])).unwrap();
        let tape = Tape::new();
        let scope = Scope::new(&tape, &store, Mode::Eval, false);
        let x = random_image::<f64>(&[2, 32, 4, 4], 4);
        let y = bb.block_forward(&scope, 1, tape.constant(x.clone())).unwrap();
        assert_eq!(*y.value(), x);
    }

    #[test]
    fn block_rejects_non_finite() {
        let (bb, store) = build::<f32>(BackboneConfig::default(), 0);
        let tape = Tape::new();
        let scope = Scope::new(&tape, &store, Mode::Eval, false);
        let mut x = Tensor::<f32>::zeros(&[1, 32, 2, 2]);
        x.data_mut()[5] = f32::INFINITY;
        let err = bb.block_forward(&scope, 2, tape.constant(x)).unwrap_err();
        assert!(matches!(err, Error::Numeric(ref m) if m.contains("block 2")), "{err}");
    }

    #[test]
    fn encoder_shapes_and_injection_prefix() {
        let (bb, store) = build::<f64>(BackboneConfig::default(), 5);
        let tape = Tape::new();
        let scope = Scope::new(&tape, &store, Mode::Eval, false);
        let img = tape.constant(random_image(&[2, 3, 64, 64], 6));
        let plain = bb.encoder_forward(&scope, img, None).unwrap();
        assert_eq!(plain.per_block.len(), 4);
        for a in &plain.per_block {
            assert_eq!(a.shape(), vec![2, 32, 4, 4]);
        }

        let zeros: Vec<_> = (0..4).map(|_| Some(tape.constant(Tensor::zeros(&[2, 32, 4, 4])))).collect();
        let zero_inj = bb.encoder_forward(&scope, img, Some(&zeros)).unwrap();
        for (a, b) in plain.per_block.iter().zip(&zero_inj.per_block) {
            assert_eq!(a.value().le_bytes(), b.value().le_bytes());
        }

        let mut inj: Vec<Option<Var<'_, f64>>> = vec![None; 4];
        inj[2] = Some(tape.constant(random_image(&[2, 32, 4, 4], 7)));
        let poked = bb.encoder_forward(&scope, img, Some(&inj)).unwrap();
        for j in 0..2 {
            assert_eq!(plain.per_block[j].value().le_bytes(), poked.per_block[j].value().le_bytes());
        }
        for j in 2..4 {
            assert_ne!(plain.per_block[j].value().le_bytes(), poked.per_block[j].value().le_bytes());
        }
    }

    #[test]
    fn injection_shape_mismatch_names_block() {
        let (bb, store) = build::<f32>(BackboneConfig::default(), 5);
        let tape = Tape::new();
        let scope = Scope::new(&tape, &store, Mode::Eval, false);
        let img = tape.constant(random_image(&[1, 3, 32, 32], 6));
        let mut inj: Vec<Option<Var<'_, f32>>> = vec![None; 4];
        inj[3] = Some(tape.constant(Tensor::zeros(&[1, 32, 3, 2])));
        let err = bb.encoder_forward(&scope, img, Some(&inj)).unwrap_err().to_string();
        assert!(err.contains("block 3"), "{err}");
    }
}
