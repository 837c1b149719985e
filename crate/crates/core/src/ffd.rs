//! Feature fusion decoder.
//!
//! Two resolution-doubling stages lift the side stream from the patch grid to
//! `H/4`. Stage A injects pooled keys from the `H/8` feature, upsamples, then
//! fuses the full `H/8` feature; stage B does the same with the `H/4` feature.
//! A bilinear `4x` upsample and a 1x1 conv produce one logit per pixel.

use crate::autograd::{concat_channels, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::nn::{Conv1x1Block, ConvBlock, Init, Linear1x1, Scope};
use crate::params::ParamStore;
use crate::tensor::Float;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    A,
    B,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::A => "stage_a",
            Stage::B => "stage_b",
        }
    }
}

/// `avgpool2x2(x) + maxpool2x2(x)`.
pub fn pool_keys<'t, T: Float>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    kernels::avg_pool2(x)?.add(kernels::max_pool2(x)?)
}

/// Spatial sizes visited by one decoder pass, coarsest first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ladder(pub Vec<(usize, usize)>);

impl Ladder {
    /// Checks the `H/16 -> H/8 -> H/4 -> H` progression for an `(h, w)` image.
    pub fn check(&self, image_hw: (usize, usize)) -> Result<()> {
        let (h, w) = image_hw;
        let expected = vec![(h / 16, w / 16), (h / 8, w / 8), (h / 4, w / 4), (h, w)];
        if self.0 != expected {
            return Err(Error::Shape(format!(
                "ffd: resolution ladder {:?} differs from expected {:?}",
                self.0, expected
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Ffd {
    pub side_width: usize,
    pub refine_width: usize,
    pub in_proj: Conv1x1Block,
    pub mrm_proj: [Conv1x1Block; 2],
    pub inject: [ConvBlock; 2],
    pub fuse: [ConvBlock; 2],
    pub head: Linear1x1,
}

impl Ffd {
    pub fn new(side_width: usize, refine_width: usize) -> Result<Self> {
        if side_width == 0 || refine_width == 0 {
            return Err(Error::Config("ffd widths must be positive".into()));
        }
        let (c1, ck) = (side_width, refine_width);
        let stage = |s: Stage, part: &str| ConvBlock::conv3x3(format!("ffd.{}.{part}", s.name()), c1 + ck, c1);
        Ok(Self {
            side_width,
            refine_width,
            in_proj: Conv1x1Block::conv1x1("ffd.in_proj", c1, c1),
            mrm_proj: [
                Conv1x1Block::conv1x1("ffd.mrm_proj.1", ck, ck),
                Conv1x1Block::conv1x1("ffd.mrm_proj.2", ck, ck),
            ],
            inject: [stage(Stage::A, "inject"), stage(Stage::B, "inject")],
            fuse: [stage(Stage::A, "fuse"), stage(Stage::B, "fuse")],
            head: Linear1x1::new("ffd.head", c1, 1),
        })
    }

    pub fn param_count(&self) -> usize {
        self.in_proj.param_count()
            + self.mrm_proj.iter().map(ConvBlock::param_count).sum::<usize>()
            + self.inject.iter().chain(&self.fuse).map(ConvBlock::param_count).sum::<usize>()
            + self.head.param_count()
    }

    pub fn register<T: Float>(&self, store: &mut ParamStore<T>, init: &mut Init<'_>) -> Result<()> {
        self.in_proj.register(store, init, false)?;
        for b in &self.mrm_proj {
            b.register(store, init, false)?;
        }
        for k in 0..2 {
            self.inject[k].register(store, init, false)?;
            self.fuse[k].register(store, init, false)?;
        }
        self.head.register(store, init, false)
    }

    fn stage_index(stage: Stage) -> usize {
        match stage {
            Stage::A => 0,
            Stage::B => 1,
        }
    }

    /// Projects a hierarchy feature and pools it to half resolution.
    pub fn key_pool<'t, T: Float>(&self, scope: &Scope<'_, 't, T>, stage: Stage, f_mrm: Var<'t, T>) -> Result<Var<'t, T>> {
        let (_, _, h, w) = f_mrm.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "ffd.{}: cannot pool odd spatial size {h}x{w}",
                stage.name()
            )));
        }
        let projected = self.mrm_proj[Self::stage_index(stage)].forward(scope, f_mrm)?;
        pool_keys(projected).map_err(|e| e.context(&format!("ffd.{}", stage.name())))
    }

    /// `fuse(concat(up2(inject(concat(x, key))), full))`.
    pub fn inject_stage<'t, T: Float>(
        &self,
        scope: &Scope<'_, 't, T>,
        stage: Stage,
        x: Var<'t, T>,
        key: Var<'t, T>,
        full: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let name = format!("ffd.{}", stage.name());
        let (bx, _, h, w) = x.dims4()?;
        let (bk, _, hk, wk) = key.dims4()?;
        let (bf, _, hf, wf) = full.dims4()?;
        if (bk, hk, wk) != (bx, h, w) {
            return Err(Error::Shape(format!(
                "{name}: key {:?} is not at the stream resolution {:?}",
                key.shape(),
                x.shape()
            )));
        }
        if (bf, hf, wf) != (bx, 2 * h, 2 * w) {
            return Err(Error::Shape(format!(
                "{name}: full feature {:?} is not at twice the stream resolution {:?}",
                full.shape(),
                x.shape()
            )));
        }
        let k = Self::stage_index(stage);
        let ctx = |e: Error| e.context(&name);
        let y = self.inject[k].forward(scope, concat_channels(&[x, key]).map_err(ctx)?)?;
        let y = kernels::upsample_bilinear(y, 2).map_err(ctx)?;
        self.fuse[k].forward(scope, concat_channels(&[y, full]).map_err(ctx)?)
    }

    /// Decodes the side stream and the `(H/8, H/4)` pair into `(B, 1, H, W)` logits.
    pub fn forward<'t, T: Float>(
        &self,
        scope: &Scope<'_, 't, T>,
        f_csa: Var<'t, T>,
        hierarchy: (Var<'t, T>, Var<'t, T>),
        image_hw: (usize, usize),
    ) -> Result<(Var<'t, T>, Ladder)> {
        let hw = |v: Var<'t, T>| -> Result<(usize, usize)> {
            let (_, _, h, w) = v.dims4()?;
            Ok((h, w))
        };
        let mut ladder = vec![hw(f_csa)?];
        let x = self.in_proj.forward(scope, f_csa)?;
        let key1 = self.key_pool(scope, Stage::A, hierarchy.0)?;
        let x = self.inject_stage(scope, Stage::A, x, key1, hierarchy.0)?;
        ladder.push(hw(x)?);
        let key2 = self.key_pool(scope, Stage::B, hierarchy.1)?;
        let x = self.inject_stage(scope, Stage::B, x, key2, hierarchy.1)?;
        ladder.push(hw(x)?);
        let x = kernels::upsample_bilinear(x, 4).map_err(|e| e.context("ffd.head"))?;
        let logits = self.head.forward(scope, x)?;
        ladder.push(hw(logits)?);
        let ladder = Ladder(ladder);
        ladder.check(image_hw)?;
        Ok((logits, ladder))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::nn::Mode;
    use crate::params::CountFilter;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn build() -> (Ffd, ParamStore<f64>) {
        let ffd = Ffd::new(16, 8).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        ffd.register(&mut store, &mut Init { rng: &mut rng }).unwrap();
        (ffd, store)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn all_params_trainable_and_counted() {
        let (ffd, store) = build();
        assert_eq!(store.count(CountFilter::Frozen), 0);
        assert_eq!(store.count(CountFilter::Trainable), ffd.param_count());
    }

    #[test]
    fn pool_keys_on_constant_field_doubles() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[1, 3, 4, 6], 0.7));
        let y = pool_keys(x).unwrap();
        assert_eq!(y.shape(), vec![1, 3, 2, 3]);
        assert!(y.value().data().iter().all(|&v| (v - 1.4).abs() < 1e-15));
    }

    #[test]
    fn key_pool_rejects_odd() {
        let (ffd, store) = build();
        let tape = Tape::new();
        let scope = Scope::new(&tape, &store, Mode::Eval, false);
        let err = ffd
            .key_pool(&scope, Stage::B, tape.constant(Tensor::zeros(&[1, 8, 5, 4])))
            .unwrap_err();
        assert!(matches!(err, Error::Shape(ref m) if m.contains("stage_b")), "{err}");
    }

    #[test]
    fn stage_shapes_and_errors() {
        let (ffd, store) = build();
        let tape = Tape::new();
        let scope = Scope::new(&tape, &store, Mode::Eval, false);
        let x = tape.constant(random(&[1, 16, 4, 4], 1));
        let key = tape.constant(random(&[1, 8, 4, 4], 2));
        let full = tape.constant(random(&[1, 8, 8, 8], 3));
        let y = ffd.inject_stage(&scope, Stage::A, x, key, full).unwrap();
        assert_eq!(y.shape(), vec![1, 16, 8, 8]);

        let err = ffd.inject_stage(&scope, Stage::B, x, key, key).unwrap_err().to_string();
        assert!(err.contains("ffd.stage_b"), "{err}");
        let err = ffd.inject_stage(&scope, Stage::A, x, full, full).unwrap_err().to_string();
        assert!(err.contains("ffd.stage_a"), "{err}");
    }

    #[test]
    fn forward_ladder_and_zero_head() {
        let (ffd, mut store) = build();
        store.set("ffd.head.weight", Tensor::zeros(&[1, 16, 1, 1])).unwrap();
        store.set("ffd.head.bias", Tensor::zeros(&[1])).unwrap();
        let tape = Tape::new();
        let scope = Scope::new(&tape, &store, Mode::Eval, false);
        let (logits, ladder) = ffd
            .forward(
                &scope,
                tape.constant(random(&[2, 16, 4, 4], 1)),
                (tape.constant(random(&[2, 8, 8, 8], 2)), tape.constant(random(&[2, 8, 16, 16], 3))),
                (64, 64),
            )
            .unwrap();
        assert_eq!(logits.shape(), vec![2, 1, 64, 64]);
        assert_eq!(ladder.0, vec![(4, 4), (8, 8), (16, 16), (64, 64)]);
        assert!(logits.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ladder_check_rejects_skips() {
        assert!(Ladder(vec![(4, 4), (8, 8), (16, 16), (64, 64)]).check((64, 64)).is_ok());
        assert!(Ladder(vec![(4, 4), (16, 16), (64, 64)]).check((64, 64)).is_err());
    }
}
