//! The two-stage network, its configuration and the ablation variants.
//!
//! Each stage is a four-scale encoder-decoder with channel ladder
//! `b, 2b, 4b, 8b`: one residual unit per encoder scale, one at the
//! bottleneck and one per decoder scale (seven in total), joined by three
//! strided downsamplings and three transposed upsamplings.
//!
//! Stage 1 (amplitude-guided) has encoder-to-decoder skips at the three upper
//! scales and hands over through the supervised attention module. Stage 2
//! (phase-guided) has no skips; its decoder instead receives the stage-1
//! decoder and stage-2 encoder features through the triple interaction module.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::atim::{CrossScaleFuse, DynamicFilterBlock, ScaleSet};
use crate::blocks::{BlockConfig, Downsample, ResidualBlock, Sam, SpectralBranch, Upsample};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::miloss::EmbeddingHead;
use crate::nn::{Conv2d, ParamStore, Scope};
use crate::objective::Stage1Guidance;
use crate::tensor::{Shape, Tensor};

pub const IMAGE_CHANNELS: usize = 3;
pub const SCALES: usize = 4;
pub const UNITS_PER_STAGE: usize = 7;
/// Spatial dims must be divisible by this (three halvings).
pub const SIZE_MULTIPLE: usize = 8;

/// Which plane the first stage restores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageOrder {
    AmplitudeFirst,
    PhaseFirst,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage2Input {
    /// Stage-1 output's restored plane combined with the hazy image's other plane.
    AmpSwap,
    /// Stage-1 output as is.
    RawY1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub units_per_stage: usize,
    pub scales: usize,
    pub adfb_k: usize,
    pub d_emb: usize,
    pub mi_channels: usize,
    pub use_spectral_rab: bool,
    pub use_spectral_rpb: bool,
    pub stage_order: StageOrder,
    pub stage2_input_mode: Stage2Input,
    pub use_triple_interaction: bool,
    pub use_adfb: bool,
    pub use_mic: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_channels: 20,
            units_per_stage: UNITS_PER_STAGE,
            scales: SCALES,
            adfb_k: 3,
            d_emb: 128,
            mi_channels: 64,
            use_spectral_rab: true,
            use_spectral_rpb: true,
            stage_order: StageOrder::AmplitudeFirst,
            stage2_input_mode: Stage2Input::AmpSwap,
            use_triple_interaction: true,
            use_adfb: true,
            use_mic: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.base_channels == 0 {
            return fail("model.base_channels must be positive".into());
        }
        if self.units_per_stage != UNITS_PER_STAGE {
            return fail(format!(
                "model.units_per_stage must be {UNITS_PER_STAGE} (3 encoder + 1 bottleneck + 3 decoder), got {}",
                self.units_per_stage
            ));
        }
        if self.scales != SCALES {
            return fail(format!("model.scales must be {SCALES}, got {}", self.scales));
        }
        if self.adfb_k == 0 || self.adfb_k % 2 == 0 {
            return fail(format!("model.adfb_k must be odd, got {}", self.adfb_k));
        }
        if self.d_emb == 0 || self.mi_channels == 0 {
            return fail("model.d_emb and model.mi_channels must be positive".into());
        }
        Ok(())
    }

    /// Channel count at scale index `i` (0 = full resolution).
    pub fn channels(&self, i: usize) -> usize {
        self.base_channels << i
    }

    fn guidance(&self) -> Stage1Guidance {
        match self.stage_order {
            StageOrder::AmplitudeFirst => Stage1Guidance::Amplitude,
            StageOrder::PhaseFirst => Stage1Guidance::Phase,
        }
    }

    fn stage_branches(&self) -> [SpectralBranch; 2] {
        let rab = if self.use_spectral_rab {
            SpectralBranch::Amplitude
        } else {
            SpectralBranch::None
        };
        let rpb = if self.use_spectral_rpb {
            SpectralBranch::Phase
        } else {
            SpectralBranch::None
        };
        match self.stage_order {
            StageOrder::AmplitudeFirst => [rab, rpb],
            StageOrder::PhaseFirst => [rpb, rab],
        }
    }
}

/// Ablation variants: M1–M6 vary the two-stage design (all without the
/// interaction module and MI constraint), Ma–Me toggle interaction, dynamic
/// filtering and MI on top of M6.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    M1,
    M2,
    M3,
    M4,
    M5,
    M6,
    Ma,
    Mb,
    Mc,
    Md,
    Me,
}

impl Variant {
    pub const ALL: [Variant; 11] = [
        Variant::M1,
        Variant::M2,
        Variant::M3,
        Variant::M4,
        Variant::M5,
        Variant::M6,
        Variant::Ma,
        Variant::Mb,
        Variant::Mc,
        Variant::Md,
        Variant::Me,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::M1 => "M1",
            Variant::M2 => "M2",
            Variant::M3 => "M3",
            Variant::M4 => "M4",
            Variant::M5 => "M5",
            Variant::M6 => "M6",
            Variant::Ma => "Ma",
            Variant::Mb => "Mb",
            Variant::Mc => "Mc",
            Variant::Md => "Md",
            Variant::Me => "Me",
        }
    }

    /// Apply this variant's switches to `base`; widths and sizes are kept.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = ModelConfig {
            use_spectral_rab: true,
            use_spectral_rpb: true,
            stage_order: StageOrder::AmplitudeFirst,
            stage2_input_mode: Stage2Input::AmpSwap,
            use_triple_interaction: false,
            use_adfb: false,
            use_mic: false,
            ..base.clone()
        };
        match self {
            Variant::M1 => {
                cfg.use_spectral_rab = false;
                cfg.use_spectral_rpb = false;
            }
            Variant::M2 => cfg.use_spectral_rab = false,
            Variant::M3 => cfg.use_spectral_rpb = false,
            Variant::M4 => cfg.stage_order = StageOrder::PhaseFirst,
            Variant::M5 => cfg.stage2_input_mode = Stage2Input::RawY1,
            Variant::M6 | Variant::Ma => {}
            Variant::Mb => cfg.use_triple_interaction = true,
            Variant::Mc => cfg.use_adfb = true,
            Variant::Md => {
                cfg.use_triple_interaction = true;
                cfg.use_adfb = true;
            }
            Variant::Me => {
                cfg.use_triple_interaction = true;
                cfg.use_adfb = true;
                cfg.use_mic = true;
            }
        }
        cfg
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::UnknownVariant {
                name: s.to_string(),
                valid: Variant::ALL.map(Variant::name).join(", "),
            })
    }
}

pub fn build_variant(name: &str, base: &ModelConfig) -> Result<ModelConfig> {
    Ok(name.parse::<Variant>()?.apply(base))
}

/// Inference parameter count of the model `cfg` describes (MI heads excluded).
pub fn count_parameters(cfg: &ModelConfig) -> Result<usize> {
    Ok(Mitnet::new(cfg.clone(), 0)?.store.count_inference())
}

/// One stage's outputs and intermediate features.
#[derive(Clone, Debug)]
pub struct StageBundle {
    /// Restored image, unclamped.
    pub output: Var,
    /// Encoder unit outputs at s1..s3 followed by the bottleneck at s4.
    pub encoder: [Var; 4],
    /// Decoder unit outputs at s1..s3.
    pub decoder: [Var; 3],
    /// MI embeddings at s1..s3 (stage 1: decoder side, stage 2: encoder side).
    pub embeddings: Option<[Var; 3]>,
}

pub struct ForwardOutput {
    pub stage1: StageBundle,
    pub stage2: StageBundle,
    /// Image fed to stage 2.
    pub stage2_input: Var,
}

/// Counts of the structural pieces of one stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageLayout {
    pub encoder_units: usize,
    pub bottleneck_units: usize,
    pub decoder_units: usize,
    pub downsamples: usize,
    pub upsamples: usize,
    pub skips: usize,
}

impl StageLayout {
    pub fn units(&self) -> usize {
        self.encoder_units + self.bottleneck_units + self.decoder_units
    }
}

/// Encoder half plus bottleneck and upsamplers, shared by both stages.
#[derive(Clone, Debug)]
struct Trunk {
    input: Conv2d,
    encoder: Vec<ResidualBlock>,
    down: Vec<Downsample>,
    bottleneck: ResidualBlock,
    up: Vec<Upsample>,
    decoder: Vec<ResidualBlock>,
}

impl Trunk {
    fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, branch: SpectralBranch) -> Self {
        let block = |store: &mut ParamStore, n: String, i: usize| {
            ResidualBlock::new(
                store,
                &n,
                BlockConfig {
                    channels: cfg.channels(i),
                    spectral_branch: branch,
                },
            )
        };
        Trunk {
            input: Conv2d::new(store, &format!("{name}.input"), IMAGE_CHANNELS, cfg.base_channels, 3, 1),
            encoder: (0..3).map(|i| block(store, format!("{name}.enc{}", i + 1), i)).collect(),
            down: (0..3)
                .map(|i| Downsample::new(store, &format!("{name}.down{}", i + 1), cfg.channels(i)))
                .collect(),
            bottleneck: block(store, format!("{name}.bottleneck"), 3),
            up: (0..3)
                .map(|i| Upsample::new(store, &format!("{name}.up{}", i + 1), cfg.channels(i + 1)))
                .collect(),
            decoder: (0..3).map(|i| block(store, format!("{name}.dec{}", i + 1), i)).collect(),
        }
    }

    /// Encoder pass from initial features; returns `[e1, e2, e3, bottleneck]`.
    fn encode(&self, s: &mut Scope, mut x: Var) -> Result<[Var; 4]> {
        let mut out = [x; 4];
        for i in 0..3 {
            let e = self.encoder[i].forward(s, x)?;
            out[i] = e;
            x = self.down[i].forward(s, e)?;
        }
        out[3] = self.bottleneck.forward(s, x)?;
        Ok(out)
    }
}

#[derive(Clone, Debug)]
enum DecoderMerge {
    Dynamic(DynamicFilterBlock),
    Concat(Conv2d),
}

#[derive(Clone, Debug)]
pub struct Mitnet {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    stage1: Trunk,
    skips: Vec<Conv2d>,
    sam: Sam,
    stage2: Trunk,
    stage2_out: Conv2d,
    fuse_d1: Option<CrossScaleFuse>,
    fuse_e2: Option<CrossScaleFuse>,
    merges: Vec<DecoderMerge>,
    mi_decoder: Vec<EmbeddingHead>,
    mi_encoder: Vec<EmbeddingHead>,
}

impl Mitnet {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(seed);
        let st = &mut store;
        let b = cfg.base_channels;
        let [branch1, branch2] = cfg.stage_branches();

        let stage1 = Trunk::new(st, "stage1", &cfg, branch1);
        let skips = (0..3)
            .map(|i| Conv2d::new(st, &format!("stage1.skip{}", i + 1), 2 * cfg.channels(i), cfg.channels(i), 1, 1))
            .collect();
        let sam = Sam::new(st, "sam", b, IMAGE_CHANNELS);
        let stage2 = Trunk::new(st, "stage2", &cfg, branch2);
        let stage2_out = Conv2d::new(st, "stage2.output", b, IMAGE_CHANNELS, 3, 1);

        let (fuse_d1, fuse_e2) = if cfg.use_triple_interaction {
            (
                Some(CrossScaleFuse::new(st, "atim.fuse_d1", b)),
                Some(CrossScaleFuse::new(st, "atim.fuse_e2", b)),
            )
        } else {
            (None, None)
        };
        let merges = (0..3)
            .map(|i| {
                let c = cfg.channels(i);
                if cfg.use_adfb {
                    DecoderMerge::Dynamic(DynamicFilterBlock::new(st, &format!("atim.adfb{}", i + 1), c, cfg.adfb_k))
                } else {
                    DecoderMerge::Concat(Conv2d::new(st, &format!("atim.merge{}", i + 1), 3 * c, c, 1, 1))
                }
            })
            .collect();

        let (mut mi_decoder, mut mi_encoder) = (Vec::new(), Vec::new());
        if cfg.use_mic {
            for i in 0..3 {
                let c = cfg.channels(i);
                mi_decoder.push(EmbeddingHead::new(st, &format!("mi.decoder{}", i + 1), c, cfg.mi_channels, cfg.d_emb));
                mi_encoder.push(EmbeddingHead::new(st, &format!("mi.encoder{}", i + 1), c, cfg.mi_channels, cfg.d_emb));
            }
        }

        Ok(Mitnet {
            cfg,
            store,
            stage1,
            skips,
            sam,
            stage2,
            stage2_out,
            fuse_d1,
            fuse_e2,
            merges,
            mi_decoder,
            mi_encoder,
        })
    }

    pub fn guidance(&self) -> Stage1Guidance {
        self.cfg.guidance()
    }

    pub fn layout(&self) -> [StageLayout; 2] {
        let of = |t: &Trunk, skips: usize| StageLayout {
            encoder_units: t.encoder.len(),
            bottleneck_units: 1,
            decoder_units: t.decoder.len(),
            downsamples: t.down.len(),
            upsamples: t.up.len(),
            skips,
        };
        [of(&self.stage1, self.skips.len()), of(&self.stage2, 0)]
    }

    /// Full forward pass. Spatial dims must be multiples of 8; use
    /// [`Mitnet::infer`] for arbitrary sizes. Embeddings are computed only
    /// when `with_embeddings` is set and the MI heads exist.
    pub fn forward(&self, s: &mut Scope, hazy: Var, with_embeddings: bool) -> Result<ForwardOutput> {
        let shape = s.shape(hazy);
        if shape.c != IMAGE_CHANNELS {
            return Err(Error::Shape(format!("expected a 3-channel image, got {shape}")));
        }
        if shape.h < SIZE_MULTIPLE
            || shape.w < SIZE_MULTIPLE
            || shape.h % SIZE_MULTIPLE != 0
            || shape.w % SIZE_MULTIPLE != 0
        {
            return Err(Error::Shape(format!(
                "spatial dims must be multiples of {SIZE_MULTIPLE} and at least {SIZE_MULTIPLE}, got {shape}"
            )));
        }
        s.value(hazy).ensure_finite("input image")?;
        let embed = with_embeddings && self.cfg.use_mic;

        // stage 1
        let f = self.stage1.input.forward(s, hazy)?;
        let enc1 = self.stage1.encode(s, f)?;
        let mut x = enc1[3];
        let mut dec1 = [x; 3];
        for i in (0..3).rev() {
            let z = self.stage1.up[i].forward(s, x)?;
            let cat = s.concat_channels(&[z, enc1[i]])?;
            let z = self.skips[i].forward(s, cat)?;
            x = self.stage1.decoder[i].forward(s, z)?;
            dec1[i] = x;
        }
        let sam = self.sam.forward(s, dec1[0], hazy)?;
        let y1 = sam.restored;

        let stage2_input = match (self.cfg.stage2_input_mode, self.cfg.stage_order) {
            (Stage2Input::RawY1, _) => y1,
            (Stage2Input::AmpSwap, StageOrder::AmplitudeFirst) => s.amp_swap(y1, hazy)?,
            (Stage2Input::AmpSwap, StageOrder::PhaseFirst) => s.amp_swap(hazy, y1)?,
        };

        // stage 2
        let f2 = self.stage2.input.forward(s, stage2_input)?;
        let f2 = s.add(f2, sam.gated)?;
        let enc2 = self.stage2.encode(s, f2)?;

        let (d1_hat, e2_hat) = match (&self.fuse_d1, &self.fuse_e2) {
            (Some(fd), Some(fe)) => (
                fd.forward(s, ScaleSet(dec1))?.0,
                fe.forward(s, ScaleSet([enc2[0], enc2[1], enc2[2]]))?.0,
            ),
            _ => (dec1, [enc2[0], enc2[1], enc2[2]]),
        };

        let mut x = enc2[3];
        let mut dec2 = [x; 3];
        for i in (0..3).rev() {
            let z = self.stage2.up[i].forward(s, x)?;
            let z = match &self.merges[i] {
                DecoderMerge::Dynamic(block) => block.forward(s, d1_hat[i], e2_hat[i], z)?,
                DecoderMerge::Concat(conv) => {
                    let cat = s.concat_channels(&[z, d1_hat[i], e2_hat[i]])?;
                    conv.forward(s, cat)?
                }
            };
            x = self.stage2.decoder[i].forward(s, z)?;
            dec2[i] = x;
        }
        let residual = self.stage2_out.forward(s, dec2[0])?;
        let y2 = s.add(residual, stage2_input)?;

        let (emb1, emb2) = if embed {
            let mut e1 = [y1; 3];
            let mut e2 = [y1; 3];
            for i in 0..3 {
                e1[i] = self.mi_decoder[i].forward(s, dec1[i])?;
                e2[i] = self.mi_encoder[i].forward(s, enc2[i])?;
            }
            (Some(e1), Some(e2))
        } else {
            (None, None)
        };

        Ok(ForwardOutput {
            stage1: StageBundle {
                output: y1,
                encoder: enc1,
                decoder: dec1,
                embeddings: emb1,
            },
            stage2: StageBundle {
                output: y2,
                encoder: enc2,
                decoder: dec2,
                embeddings: emb2,
            },
            stage2_input,
        })
    }

    /// Inference on an image of any size ≥ 1×1: reflect-pads to a multiple of
    /// 8, runs both stages, crops back and clamps to `[0, 1]`.
    pub fn infer(&self, hazy: &Tensor) -> Result<(Tensor, Tensor)> {
        let shape = hazy.shape();
        let pad = |v: usize| v.max(SIZE_MULTIPLE).div_ceil(SIZE_MULTIPLE) * SIZE_MULTIPLE;
        let (ph, pw) = (pad(shape.h), pad(shape.w));
        let input = if (ph, pw) == (shape.h, shape.w) {
            hazy.clone()
        } else {
            hazy.pad_reflect_to(ph, pw)
        };
        let mut s = Scope::inference(&self.store);
        let x = s.constant(input);
        let out = self.forward(&mut s, x, false)?;
        let finish = |v: Var| -> Result<Tensor> {
            let t = s.value(v).crop(0, 0, shape.h, shape.w)?;
            Ok(t.clamp(0.0, 1.0))
        };
        Ok((finish(out.stage1.output)?, finish(out.stage2.output)?))
    }
}

/// Shape of the features at scale index `i` for an `(n, 3, h, w)` input.
pub fn feature_shape(cfg: &ModelConfig, input: Shape, i: usize) -> Shape {
    Shape::new(input.n, cfg.channels(i), input.h >> i, input.w >> i)
}
