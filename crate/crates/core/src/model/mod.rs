//! Four-stage hierarchical backbone, top-down decoder and per-stage
//! projection heads.
//!
//! Stage `s` emits a token map with side `image_side / (4·2^(s-1))`, i.e.
//! one token per ground-truth patch of the matching [`StageSpec`]. The
//! projection heads exist only on the training path and are never bound by
//! [`Model::backbone_forward`] or [`Model::decode`].

mod checkpoint;
mod layers;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patching::{StageSpec, DEFAULT_PATCH_SIZES};
use crate::raster::Image;
use crate::tensor::{Parameters, Session, Tensor, Var};
use layers::{space_to_depth, window_partition, window_reverse, Init, LayerNorm, Linear, Mlp};

pub const STAGES: usize = 4;

/// Spatial token mixer used inside each backbone block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixerKind {
    /// Self-attention inside non-overlapping windows (no shifting).
    WindowedAttention,
    /// 3×3 average pooling minus identity.
    MeanPooling,
}

impl MixerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MixerKind::WindowedAttention => "windowed-attention",
            MixerKind::MeanPooling => "mean-pooling",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub mixer: MixerKind,
    pub stage_dims: [usize; STAGES],
    pub blocks_per_stage: usize,
    /// Width `n` of the contrastive embeddings.
    pub projection_dim: usize,
    pub num_classes: usize,
    pub image_side: usize,
    pub decoder_dim: usize,
    pub mlp_ratio: usize,
    /// Attention window side in tokens (clamped to the stage grid).
    pub window: usize,
    pub head_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mixer: MixerKind::MeanPooling,
            stage_dims: [16, 32, 64, 128],
            blocks_per_stage: 1,
            projection_dim: 64,
            num_classes: 6,
            image_side: 64,
            decoder_dim: 32,
            mlp_ratio: 2,
            window: 4,
            head_dim: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_side == 0 || self.image_side % 32 != 0 {
            return bad(format!(
                "model.image_side {} must be a positive multiple of 32",
                self.image_side
            ));
        }
        if self.stage_dims[0] == 0 || self.stage_dims.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "model.stage_dims {:?} must be strictly increasing",
                self.stage_dims
            ));
        }
        if self.blocks_per_stage == 0 || self.mlp_ratio == 0 || self.window == 0 {
            return bad("model.blocks_per_stage, mlp_ratio and window must be positive".into());
        }
        if self.projection_dim == 0 || self.decoder_dim == 0 {
            return bad("model.projection_dim and decoder_dim must be positive".into());
        }
        if !(2..=255).contains(&self.num_classes) {
            return bad(format!(
                "model.num_classes {} must be in 2..=255",
                self.num_classes
            ));
        }
        if self.mixer == MixerKind::WindowedAttention {
            if self.head_dim == 0 {
                return bad("model.head_dim must be positive".into());
            }
            if let Some(d) = self.stage_dims.iter().find(|&&d| d % self.head_dim != 0) {
                return bad(format!(
                    "stage width {d} not divisible by model.head_dim {}",
                    self.head_dim
                ));
            }
            for (s, spec) in self.stage_specs()?.iter().enumerate() {
                let win = self.window.min(spec.grid_h);
                if spec.grid_h % win != 0 {
                    return bad(format!(
                        "stage {} grid {} not divisible by window {win}",
                        s + 1,
                        spec.grid_h
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn stage_specs(&self) -> Result<Vec<StageSpec>> {
        StageSpec::hierarchy(self.image_side, self.image_side, &DEFAULT_PATCH_SIZES)
    }
}

/// Per-stage token maps `Z_s` and, on the training path, projections `F_s`.
pub struct StageFeatures {
    /// Input pixels `[B,H,W,3]`, reused by the decoder's full-resolution skip.
    pub image: Var,
    /// `Z_s` as `[B, grid, grid, d_s]`.
    pub tokens: Vec<Var>,
    /// `F_s` as `[B, grid, grid, n]`, present after [`Model::project`].
    pub projected: Option<Vec<Var>>,
}

#[derive(Clone, Debug)]
enum Mixer {
    Pool,
    Attention {
        q: Linear,
        k: Linear,
        v: Linear,
        out: Linear,
        heads: usize,
        window: usize,
    },
}

#[derive(Clone, Debug)]
struct Block {
    norm1: LayerNorm,
    mixer: Mixer,
    norm2: LayerNorm,
    mlp: Mlp,
}

#[derive(Clone, Debug)]
struct Stage {
    /// Patch size folded into channels before `embed` (4 at stage 1, then 2).
    fold: usize,
    embed: Linear,
    embed_norm: LayerNorm,
    blocks: Vec<Block>,
}

#[derive(Clone, Debug)]
struct Decoder {
    lateral: Vec<Linear>,
    pixel: Linear,
    head: Linear,
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    stages: Vec<Stage>,
    decoder: Decoder,
    heads: Vec<Mlp>,
}

impl Model {
    /// Builds the model and its freshly initialized parameters.
    ///
    /// Backbone and decoder leaves are drawn before projection leaves, so two
    /// models built from the same seed share their segmentation weights.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<(Self, Parameters)> {
        cfg.validate()?;
        let mut params = Parameters::new();
        let mut init = Init {
            params: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let mut stages = Vec::with_capacity(STAGES);
        let mut in_dim = Image::CHANNELS;
        for (si, &dim) in cfg.stage_dims.iter().enumerate() {
            let name = format!("backbone.stage{}", si + 1);
            let fold = if si == 0 { DEFAULT_PATCH_SIZES[0] } else { 2 };
            let embed = Linear::new(
                &mut init,
                &format!("{name}.embed"),
                fold * fold * in_dim,
                dim,
            )?;
            let embed_norm = LayerNorm::new(&mut init, &format!("{name}.embed_norm"), dim)?;
            let mut blocks = Vec::with_capacity(cfg.blocks_per_stage);
            for bi in 0..cfg.blocks_per_stage {
                let bn = format!("{name}.block{bi}");
                let mixer = match cfg.mixer {
                    MixerKind::MeanPooling => Mixer::Pool,
                    MixerKind::WindowedAttention => Mixer::Attention {
                        q: Linear::new(&mut init, &format!("{bn}.attn.q"), dim, dim)?,
                        k: Linear::new(&mut init, &format!("{bn}.attn.k"), dim, dim)?,
                        v: Linear::new(&mut init, &format!("{bn}.attn.v"), dim, dim)?,
                        out: Linear::new(&mut init, &format!("{bn}.attn.out"), dim, dim)?,
                        heads: (dim / cfg.head_dim).max(1),
                        window: cfg.window,
                    },
                };
                blocks.push(Block {
                    norm1: LayerNorm::new(&mut init, &format!("{bn}.norm1"), dim)?,
                    mixer,
                    norm2: LayerNorm::new(&mut init, &format!("{bn}.norm2"), dim)?,
                    mlp: Mlp::new(
                        &mut init,
                        &format!("{bn}.mlp"),
                        dim,
                        dim * cfg.mlp_ratio,
                        dim,
                    )?,
                });
            }
            stages.push(Stage {
                fold,
                embed,
                embed_norm,
                blocks,
            });
            in_dim = dim;
        }
        let d = cfg.decoder_dim;
        let lateral = cfg
            .stage_dims
            .iter()
            .enumerate()
            .map(|(si, &dim)| Linear::new(&mut init, &format!("decoder.lateral{}", si + 1), dim, d))
            .collect::<Result<Vec<_>>>()?;
        let decoder = Decoder {
            lateral,
            pixel: Linear::new(&mut init, "decoder.pixel", Image::CHANNELS, d)?,
            head: Linear::new(&mut init, "decoder.head", d, cfg.num_classes)?,
        };
        let heads = cfg
            .stage_dims
            .iter()
            .enumerate()
            .map(|(si, &dim)| {
                let n = cfg.projection_dim;
                Mlp::new(&mut init, &format!("projection.stage{}", si + 1), dim, n, n)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((
            Self {
                cfg,
                stages,
                decoder,
                heads,
            },
            params,
        ))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// True for leaves belonging to the projection heads.
    pub fn is_projection_param(name: &str) -> bool {
        name.starts_with("projection.")
    }

    pub fn is_decoder_param(name: &str) -> bool {
        name.starts_with("decoder.")
    }

    pub fn is_backbone_param(name: &str) -> bool {
        name.starts_with("backbone.")
    }

    /// Stacks a batch of images into a `[B,H,W,3]` tensor.
    pub fn batch_tensor(&self, images: &[&Image]) -> Result<Tensor> {
        let side = self.cfg.image_side;
        let mut data = Vec::with_capacity(images.len() * side * side * 3);
        for img in images {
            if img.height != side || img.width != side {
                return Err(Error::shape(
                    "backbone_forward",
                    &[side, side],
                    &[img.height, img.width],
                ));
            }
            data.extend_from_slice(&img.data);
        }
        Tensor::new(vec![images.len(), side, side, Image::CHANNELS], data)
    }

    /// φ: image batch → per-stage token maps.
    pub fn backbone_forward(&self, s: &mut Session, images: &[&Image]) -> Result<StageFeatures> {
        let input = self.batch_tensor(images)?;
        let image = s.graph.constant(input);
        let mut x = image;
        let mut tokens = Vec::with_capacity(STAGES);
        for stage in &self.stages {
            x = space_to_depth(s, x, stage.fold)?;
            x = stage.embed.forward(s, x)?;
            x = stage.embed_norm.forward(s, x)?;
            for block in &stage.blocks {
                x = block.forward(s, x)?;
            }
            tokens.push(x);
        }
        Ok(StageFeatures {
            image,
            tokens,
            projected: None,
        })
    }

    /// ψ: attaches `F_s` for every stage. Fails on an inference session.
    pub fn project(&self, s: &mut Session, features: &mut StageFeatures) -> Result<()> {
        if !s.is_tracking() {
            return Err(Error::op(
                "project",
                "projection heads are training-only and unavailable in inference mode",
            ));
        }
        let projected = features
            .tokens
            .iter()
            .zip(&self.heads)
            .map(|(&z, head)| head.forward(s, z))
            .collect::<Result<Vec<_>>>()?;
        features.projected = Some(projected);
        Ok(())
    }

    /// ω: token maps → `[B,H,W,K]` class logits.
    pub fn decode(&self, s: &mut Session, features: &StageFeatures) -> Result<Var> {
        if features.tokens.len() != STAGES {
            return Err(Error::op(
                "decode",
                format!("expected {STAGES} stages, got {}", features.tokens.len()),
            ));
        }
        let dec = &self.decoder;
        let mut p = dec.lateral[STAGES - 1].forward(s, features.tokens[STAGES - 1])?;
        for si in (0..STAGES - 1).rev() {
            let up = s.graph.upsample(p, 2)?;
            let lat = dec.lateral[si].forward(s, features.tokens[si])?;
            p = s.graph.add(up, lat)?;
        }
        let up = s.graph.upsample(p, DEFAULT_PATCH_SIZES[0])?;
        let pix = dec.pixel.forward(s, features.image)?;
        let h = s.graph.add(up, pix)?;
        let h = s.graph.gelu(h);
        dec.head.forward(s, h)
    }

    /// Inference path: backbone and decoder only.
    pub fn predict(&self, params: &Parameters, images: &[&Image]) -> Result<Tensor> {
        let mut s = params.inference();
        let feats = self.backbone_forward(&mut s, images)?;
        let logits = self.decode(&mut s, &feats)?;
        Ok(s.graph.value(logits).clone())
    }
}

impl Block {
    fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.norm1.forward(s, x)?;
        let h = self.mixer.forward(s, h)?;
        let x = s.graph.add(x, h)?;
        let h = self.norm2.forward(s, x)?;
        let h = self.mlp.forward(s, h)?;
        s.graph.add(x, h)
    }
}

impl Mixer {
    fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        match self {
            Mixer::Pool => {
                let pooled = s.graph.pool3(x)?;
                s.graph.sub(pooled, x)
            }
            Mixer::Attention {
                q,
                k,
                v,
                out,
                heads,
                window,
            } => {
                let shape = s.graph.shape(x).to_vec();
                let (b, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
                let win = (*window).min(h).min(w);
                let xw = window_partition(s, x, win)?;
                let nwin = s.graph.shape(xw)[0];
                let t = win * win;
                let dh = c / heads;
                let split = |s: &mut Session, y: Var| -> Result<Var> {
                    let y = s.graph.reshape(y, &[nwin, t, *heads, dh])?;
                    let y = s.graph.permute(y, &[0, 2, 1, 3])?;
                    s.graph.reshape(y, &[nwin * heads, t, dh])
                };
                let qv = q.forward(s, xw)?;
                let qh = split(s, qv)?;
                let kv = k.forward(s, xw)?;
                let kh = split(s, kv)?;
                let vv = v.forward(s, xw)?;
                let vh = split(s, vv)?;
                let kt = s.graph.transpose(kh)?;
                let scores = s.graph.bmm(qh, kt)?;
                let scores = s.graph.scale(scores, 1.0 / (dh as f32).sqrt());
                let attn = s.graph.softmax(scores, 2)?;
                let ctx = s.graph.bmm(attn, vh)?;
                let ctx = s.graph.reshape(ctx, &[nwin, *heads, t, dh])?;
                let ctx = s.graph.permute(ctx, &[0, 2, 1, 3])?;
                let ctx = s.graph.reshape(ctx, &[nwin, t, c])?;
                let y = out.forward(s, ctx)?;
                window_reverse(s, y, win, (b, h, w, c))
            }
        }
    }
}

#[cfg(test)]
mod tests;
