//! Full two-stream model: frozen backbone, side adapter, refinement module and
//! fusion decoder, plus the wiring used when components are switched off.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::backbone::{Backbone, BackboneConfig, PATCH_SIZE};
use crate::csa::{Csa, CsaInit};
use crate::error::{Error, Result};
use crate::ffd::{Ffd, Ladder};
use crate::kernels;
use crate::mrm::Mrm;
use crate::nn::{Conv1x1Block, Init, Linear1x1, Mode, Scope};
use crate::params::{CountFilter, ParamStore};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub side_width: usize,
    pub refine_width: usize,
    pub csa_enabled: bool,
    pub mrm_ffd_enabled: bool,
    /// Backbone blocks feeding the refinement module; `None` taps every block.
    pub mrm_tap_indices: Option<Vec<usize>>,
    pub csa_init: CsaInit,
    /// `[height, width]`.
    pub image_size: [usize; 2],
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            side_width: 16,
            refine_width: 8,
            csa_enabled: true,
            mrm_ffd_enabled: true,
            mrm_tap_indices: None,
            csa_init: CsaInit::Zeros,
            image_size: [64, 64],
            seed: 0,
        }
    }
}

/// The four component toggles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    CsaOnly,
    MrmFfdOnly,
    Neither,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Neither, Ablation::CsaOnly, Ablation::MrmFfdOnly, Ablation::Full];

    pub fn flags(self) -> (bool, bool) {
        match self {
            Ablation::Full => (true, true),
            Ablation::CsaOnly => (true, false),
            Ablation::MrmFfdOnly => (false, true),
            Ablation::Neither => (false, false),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::CsaOnly => "csa_only",
            Ablation::MrmFfdOnly => "mrm_ffd_only",
            Ablation::Neither => "neither",
        }
    }
}

impl ModelConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn with_ablation(&self, ablation: Ablation) -> Self {
        let (csa, mrm) = ablation.flags();
        Self {
            csa_enabled: csa,
            mrm_ffd_enabled: mrm,
            ..self.clone()
        }
    }

    pub fn ablation(&self) -> Ablation {
        match (self.csa_enabled, self.mrm_ffd_enabled) {
            (true, true) => Ablation::Full,
            (true, false) => Ablation::CsaOnly,
            (false, true) => Ablation::MrmFfdOnly,
            (false, false) => Ablation::Neither,
        }
    }

    pub fn taps(&self) -> Vec<usize> {
        self.mrm_tap_indices
            .clone()
            .unwrap_or_else(|| (0..self.backbone.depth).collect())
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let [h, w] = self.image_size;
        for (dim, len) in [("height", h), ("width", w)] {
            if len == 0 || len % PATCH_SIZE != 0 {
                return Err(Error::Config(format!(
                    "image {dim} {len} is not a positive multiple of {PATCH_SIZE}"
                )));
            }
        }
        if self.side_width == 0 || self.refine_width == 0 {
            return Err(Error::Config("side_width and refine_width must be positive".into()));
        }
        if self.mrm_ffd_enabled {
            Mrm::new(self.backbone.embed_dim, self.refine_width, self.taps(), self.backbone.depth)?;
        }
        Ok(())
    }
}

/// 1x1 projection, bilinear 16x upsample and 1x1 head; stands in for the
/// decoder when the fusion decoder is disabled.
#[derive(Debug, Clone)]
pub struct FallbackDecoder {
    pub proj: Conv1x1Block,
    pub head: Linear1x1,
}

impl FallbackDecoder {
    pub fn new(c_in: usize, width: usize) -> Self {
        Self {
            proj: Conv1x1Block::conv1x1("fallback.proj", c_in, width),
            head: Linear1x1::new("fallback.head", width, 1),
        }
    }

    pub fn param_count(&self) -> usize {
        self.proj.param_count() + self.head.param_count()
    }

    fn register<T: Float>(&self, store: &mut ParamStore<T>, init: &mut Init<'_>) -> Result<()> {
        self.proj.register(store, init, false)?;
        self.head.register(store, init, false)
    }

    pub fn forward<'t, T: Float>(&self, scope: &Scope<'_, 't, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = self.proj.forward(scope, x)?;
        let y = kernels::upsample_bilinear(y, PATCH_SIZE).map_err(|e| e.context("fallback"))?;
        self.head.forward(scope, y)
    }
}

/// Closed-form trainable scalars per module.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CountBreakdown {
    pub backbone: usize,
    pub csa: usize,
    pub mrm: usize,
    pub ffd: usize,
    pub fallback: usize,
}

impl CountBreakdown {
    pub fn trainable(&self) -> usize {
        self.csa + self.mrm + self.ffd + self.fallback
    }

    pub fn all(&self) -> usize {
        self.backbone + self.trainable()
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<'t, T: Float> {
    pub logits: Var<'t, T>,
    /// Backbone block outputs before any following injection.
    pub per_block: Vec<Var<'t, T>>,
    /// Activations handed to the refinement taps, after the following injection.
    pub fused: Vec<Var<'t, T>>,
    pub side: Option<Var<'t, T>>,
    pub hierarchy: Option<(Var<'t, T>, Var<'t, T>)>,
    pub ladder: Option<Ladder>,
}

#[derive(Debug, Clone)]
pub struct TsSam {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub csa: Option<Csa>,
    pub mrm: Option<Mrm>,
    pub ffd: Option<Ffd>,
    /// Replaces the side stream feeding the decoder when the adapter is off.
    pub backbone_proj: Option<Conv1x1Block>,
    pub fallback: Option<FallbackDecoder>,
}

impl TsSam {
    /// Validates `config` and lays out the modules without allocating parameters.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config.backbone.embed_dim;
        let c1 = config.side_width;
        let backbone = Backbone::new(config.backbone.clone())?;
        let csa = config
            .csa_enabled
            .then(|| Csa::new(c1, c, config.backbone.depth, config.csa_init))
            .transpose()?;
        let (mrm, ffd) = if config.mrm_ffd_enabled {
            (
                Some(Mrm::new(c, config.refine_width, config.taps(), config.backbone.depth)?),
                Some(Ffd::new(c1, config.refine_width)?),
            )
        } else {
            (None, None)
        };
        let backbone_proj = (config.mrm_ffd_enabled && !config.csa_enabled)
            .then(|| Conv1x1Block::conv1x1("ffd.backbone_proj", c, c1));
        let fallback = (!config.mrm_ffd_enabled).then(|| FallbackDecoder::new(if config.csa_enabled { c1 } else { c }, c1));
        Ok(Self {
            config,
            backbone,
            csa,
            mrm,
            ffd,
            backbone_proj,
            fallback,
        })
    }

    /// Builds the model and a freshly initialized parameter store seeded from `config.seed`.
    pub fn build<T: Float>(config: ModelConfig) -> Result<(Self, ParamStore<T>)> {
        let model = Self::new(config)?;
        let store = model.init_params()?;
        Ok((model, store))
    }

    pub fn init_params<T: Float>(&self) -> Result<ParamStore<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut init = Init { rng: &mut rng };
        let mut store = ParamStore::new();
        self.backbone.register(&mut store, &mut init)?;
        if let Some(csa) = &self.csa {
            csa.register(&mut store, &mut init)?;
        }
        if let Some(mrm) = &self.mrm {
            mrm.register(&mut store, &mut init)?;
        }
        if let Some(ffd) = &self.ffd {
            ffd.register(&mut store, &mut init)?;
        }
        if let Some(p) = &self.backbone_proj {
            p.register(&mut store, &mut init, false)?;
        }
        if let Some(f) = &self.fallback {
            f.register(&mut store, &mut init)?;
        }
        Ok(store)
    }

    /// Checks that `store` holds exactly this model's entries with matching shapes.
    pub fn check_store<T: Float>(&self, store: &ParamStore<T>) -> Result<()> {
        let expected: ParamStore<T> = self.init_params()?;
        if expected.len() != store.len() {
            return Err(Error::Config(format!(
                "parameter store has {} entries, model expects {}",
                store.len(),
                expected.len()
            )));
        }
        for ((en, ee), (gn, ge)) in expected.iter().zip(store.iter()) {
            if en != gn || ee.tensor.shape() != ge.tensor.shape() || ee.frozen != ge.frozen || ee.kind != ge.kind {
                return Err(Error::Config(format!(
                    "parameter `{gn}` {:?} does not match expected `{en}` {:?}",
                    ge.tensor.shape(),
                    ee.tensor.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn count_breakdown(&self) -> CountBreakdown {
        CountBreakdown {
            backbone: self.config.backbone.param_count(),
            csa: self.csa.as_ref().map_or(0, Csa::param_count),
            mrm: self.mrm.as_ref().map_or(0, Mrm::param_count),
            ffd: self.ffd.as_ref().map_or(0, Ffd::param_count)
                + self.backbone_proj.as_ref().map_or(0, Conv1x1Block::param_count),
            fallback: self.fallback.as_ref().map_or(0, FallbackDecoder::param_count),
        }
    }

    pub fn forward<'t, T: Float>(&self, scope: &Scope<'_, 't, T>, image: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.forward_traced(scope, image)?.logits)
    }

    pub fn forward_traced<'t, T: Float>(
        &self,
        scope: &Scope<'_, 't, T>,
        image: Var<'t, T>,
    ) -> Result<ForwardTrace<'t, T>> {
        let (b, c, h, w) = image.dims4().map_err(|e| e.context("model"))?;
        let [eh, ew] = self.config.image_size;
        if c != 3 || (h, w) != (eh, ew) {
            return Err(Error::Shape(format!(
                "model: expected a (B, 3, {eh}, {ew}) image, got {:?}",
                image.shape()
            )));
        }
        if image
            .value()
            .data()
            .iter()
            .any(|&v| !(v >= T::zero() && v <= T::one()))
        {
            return Err(Error::Validation("model: image values must lie in [0, 1]".into()));
        }

        let depth = self.config.backbone.depth;
        let mut x = self.backbone.patch_embed(scope, image)?;
        let mut side = match &self.csa {
            Some(csa) => {
                let s = csa.csa_init(scope, x)?;
                let (xn, sn) = csa.csa_step(scope, 1, s, x)?;
                x = xn;
                Some(sn)
            }
            None => None,
        };
        let mut per_block = Vec::with_capacity(depth);
        let mut fused = Vec::with_capacity(depth);
        for j in 0..depth {
            x = self.backbone.block_forward(scope, j, x)?;
            per_block.push(x);
            if let (Some(csa), Some(s)) = (&self.csa, side) {
                let (xn, sn) = csa.csa_step(scope, j + 2, s, x)?;
                x = xn;
                side = Some(sn);
            }
            fused.push(x);
        }
        let backbone_out = per_block[depth - 1];

        let (logits, hierarchy, ladder) = match (&self.mrm, &self.ffd) {
            (Some(mrm), Some(ffd)) => {
                let (_, _, hp, wp) = backbone_out.dims4()?;
                let mut pair = mrm.init_hierarchy(scope, b, hp, wp);
                for (i, &tap) in mrm.taps.iter().enumerate() {
                    pair = mrm.mrm_step(scope, i, fused[tap], pair)?;
                }
                let stream = match (side, &self.backbone_proj) {
                    (Some(s), _) => s,
                    (None, Some(p)) => p.forward(scope, backbone_out)?,
                    (None, None) => unreachable!("decoder input is wired at construction"),
                };
                let (logits, ladder) = ffd.forward(scope, stream, pair, (h, w))?;
                (logits, Some(pair), Some(ladder))
            }
            _ => {
                let fallback = self.fallback.as_ref().expect("fallback decoder present without fusion decoder");
                let input = side.unwrap_or(backbone_out);
                (fallback.forward(scope, input)?, None, None)
            }
        };
        if !logits.value().is_finite() {
            return Err(Error::Numeric("model: logits contain non-finite values".into()));
        }
        Ok(ForwardTrace {
            logits,
            per_block,
            fused,
            side,
            hierarchy,
            ladder,
        })
    }

    /// Eval-mode logits for a batch, without gradient tracking.
    pub fn predict<T: Float>(&self, store: &ParamStore<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let scope = Scope::new(&tape, store, Mode::Eval, false);
        let logits = self.forward(&scope, tape.constant(image.clone()))?;
        let out = logits.value();
        Ok((*out).clone())
    }
}

/// Scalars in `store` matching `filter`.
pub fn count_parameters<T: Float>(store: &ParamStore<T>, filter: CountFilter) -> usize {
    store.count(filter)
}

/// Loads a checkpoint and checks it against the model built from `config`.
pub fn load_model<T: Float>(config: ModelConfig, path: impl AsRef<Path>) -> Result<(TsSam, ParamStore<T>)> {
    let model = TsSam::new(config)?;
    let store = ParamStore::<T>::load_checkpoint(path)?;
    model.check_store(&store)?;
    Ok((model, store))
}
