//! Architecture hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The four spectrogram time windows, in seconds.
pub const DURATIONS: [f32; 4] = [0.5, 1.0, 2.0, 4.0];

/// How branches exchange information.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// A shared CLS token queries every branch's patch tokens before each
    /// block's per-branch self-attention.
    ClsFusion,
    /// One self-attention over the CLS token and all branches' patch tokens.
    AllAttention,
    /// Branches are independent until the latent projection.
    None,
}

impl FusionMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cls_fusion" => Some(FusionMode::ClsFusion),
            "all_attention" => Some(FusionMode::AllAttention),
            "none" => Some(FusionMode::None),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::ClsFusion => "cls_fusion",
            FusionMode::AllAttention => "all_attention",
            FusionMode::None => "none",
        }
    }
}

/// Which sub-paths each block keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    CnnVit,
    CnnOnly,
    VitOnly,
}

impl BlockKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cnn_vit" => Some(BlockKind::CnnVit),
            "cnn_only" => Some(BlockKind::CnnOnly),
            "vit_only" => Some(BlockKind::VitOnly),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BlockKind::CnnVit => "cnn_vit",
            BlockKind::CnnOnly => "cnn_only",
            BlockKind::VitOnly => "vit_only",
        }
    }

    pub fn has_cnn(self) -> bool {
        self != BlockKind::VitOnly
    }

    pub fn has_attention(self) -> bool {
        self != BlockKind::CnnOnly
    }
}

/// Nonlinearity inside the convolutional path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    /// Smooth stand-in, used where finite differences must not straddle kinks.
    Gelu,
}

impl Activation {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "gelu" => Some(Activation::Gelu),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
        }
    }
}

/// One encoder part: `blocks` CNN-ViT blocks producing `channels` feature
/// maps of side `size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub blocks: usize,
    pub channels: usize,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_size: usize,
    pub input_channels: usize,
    pub stage_schedule: Vec<Stage>,
    pub token_grid: usize,
    pub enc_embed: usize,
    pub dec_embed: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Width of the fused vector before the CLS token is appended.
    pub fused_dim: usize,
    pub latent_dim: usize,
    pub pooled_size: usize,
    pub fusion_mode: FusionMode,
    pub block_kind: BlockKind,
    /// Subset of [`DURATIONS`] this model consumes, in increasing order.
    pub branch_durations: Vec<f32>,
    #[serde(default)]
    pub activation: Activation,
}

/// Shape of one block after the schedule is expanded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockPlan {
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_size: usize,
    pub out_size: usize,
}

impl BlockPlan {
    pub fn stride(&self) -> usize {
        self.in_size / self.out_size
    }
}

impl ModelConfig {
    /// CPU-sized configuration for 64x64 inputs.
    pub fn desk() -> Self {
        ModelConfig {
            input_size: 64,
            input_channels: 1,
            stage_schedule: vec![
                Stage { blocks: 1, channels: 8, size: 32 },
                Stage { blocks: 1, channels: 16, size: 16 },
                Stage { blocks: 1, channels: 32, size: 8 },
                Stage { blocks: 1, channels: 32, size: 4 },
            ],
            token_grid: 4,
            enc_embed: 64,
            dec_embed: 32,
            heads: 2,
            mlp_ratio: 4,
            fused_dim: 128,
            latent_dim: 64,
            pooled_size: 4,
            fusion_mode: FusionMode::ClsFusion,
            block_kind: BlockKind::CnnVit,
            branch_durations: DURATIONS.to_vec(),
            activation: Activation::Relu,
        }
    }

    /// Full scale: 224x224 inputs, parts of 1, 3, 3 and 3 blocks.
    pub fn full() -> Self {
        ModelConfig {
            input_size: 224,
            input_channels: 1,
            stage_schedule: vec![
                Stage { blocks: 1, channels: 64, size: 224 },
                Stage { blocks: 3, channels: 128, size: 112 },
                Stage { blocks: 3, channels: 256, size: 56 },
                Stage { blocks: 3, channels: 512, size: 14 },
            ],
            token_grid: 14,
            enc_embed: 384,
            dec_embed: 192,
            heads: 6,
            mlp_ratio: 4,
            fused_dim: 512,
            latent_dim: 128,
            // 14x14 maps do not tile into 4x4 windows; 7x7 keeps pooling exact.
            pooled_size: 7,
            fusion_mode: FusionMode::ClsFusion,
            block_kind: BlockKind::CnnVit,
            branch_durations: DURATIONS.to_vec(),
            activation: Activation::Relu,
        }
    }

    /// Smallest model that still exercises every path: 16x16 inputs, a 2x2
    /// token grid and one block per part.
    pub fn tiny() -> Self {
        ModelConfig {
            input_size: 16,
            input_channels: 1,
            stage_schedule: vec![
                Stage { blocks: 1, channels: 4, size: 16 },
                Stage { blocks: 1, channels: 4, size: 8 },
                Stage { blocks: 1, channels: 8, size: 4 },
                Stage { blocks: 1, channels: 8, size: 2 },
            ],
            token_grid: 2,
            enc_embed: 8,
            dec_embed: 4,
            heads: 2,
            mlp_ratio: 2,
            fused_dim: 8,
            latent_dim: 6,
            pooled_size: 2,
            fusion_mode: FusionMode::ClsFusion,
            block_kind: BlockKind::CnnVit,
            branch_durations: DURATIONS.to_vec(),
            activation: Activation::Relu,
        }
    }

    /// Single-branch variant on the 4.0 s view.
    pub fn single_branch(mut self, kind: BlockKind) -> Self {
        self.block_kind = kind;
        self.fusion_mode = FusionMode::None;
        self.branch_durations = vec![4.0];
        self
    }

    pub fn with_fusion(mut self, mode: FusionMode) -> Self {
        self.fusion_mode = mode;
        self
    }

    pub fn branches(&self) -> usize {
        self.branch_durations.len()
    }

    pub fn tokens(&self) -> usize {
        self.token_grid * self.token_grid
    }

    /// Stride of the stem convolution.
    pub fn stem_stride(&self) -> usize {
        self.input_size / self.stage_schedule[0].size
    }

    pub fn final_stage(&self) -> Stage {
        *self.stage_schedule.last().expect("validated schedule")
    }

    /// Width of each branch's flattened code before fusion.
    pub fn branch_code_dim(&self) -> usize {
        match self.block_kind {
            BlockKind::VitOnly => self.tokens() * self.enc_embed,
            _ => self.final_stage().channels * self.pooled_size * self.pooled_size,
        }
    }

    /// Encoder blocks in order. A part that shrinks the map by `2^k` spends
    /// one halving in each of its first blocks; the last block absorbs any
    /// remainder.
    pub fn encoder_blocks(&self) -> Vec<BlockPlan> {
        let mut plans = Vec::new();
        let mut channels = self.stage_schedule[0].channels;
        let mut size = self.stage_schedule[0].size;
        for stage in &self.stage_schedule {
            let mut remaining = size / stage.size;
            for j in 0..stage.blocks {
                let step = if j + 1 == stage.blocks { remaining } else { remaining.min(2) };
                remaining /= step;
                let out_size = size / step;
                plans.push(BlockPlan { in_channels: channels, out_channels: stage.channels, in_size: size, out_size });
                channels = stage.channels;
                size = out_size;
            }
        }
        plans
    }

    /// Decoder blocks: the encoder blocks reversed, each mapping its output
    /// shape back to its input shape.
    pub fn decoder_blocks(&self) -> Vec<BlockPlan> {
        self.encoder_blocks()
            .into_iter()
            .rev()
            .map(|b| BlockPlan { in_channels: b.out_channels, out_channels: b.in_channels, in_size: b.out_size, out_size: b.in_size })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let pow2 = |r: usize| r.is_power_of_two();
        if self.input_channels == 0 || self.input_size == 0 {
            return bad("input size and channels must be positive".into());
        }
        if self.stage_schedule.is_empty() {
            return bad("stage schedule is empty".into());
        }
        let mut prev = self.input_size;
        for (i, s) in self.stage_schedule.iter().enumerate() {
            if s.blocks == 0 || s.channels == 0 || s.size == 0 {
                return bad(format!("stage {i} has a zero field: {s:?}"));
            }
            if prev % s.size != 0 || !pow2(prev / s.size) {
                return bad(format!("stage {i} size {} is not a power-of-two reduction of {prev}", s.size));
            }
            if i > 0 && prev / s.size > 1 << s.blocks {
                return bad(format!("stage {i} cannot shrink {prev} -> {} in {} blocks", s.size, s.blocks));
            }
            if self.block_kind.has_attention() && s.size % self.token_grid != 0 {
                return bad(format!("token grid {} does not divide stage {i} size {}", self.token_grid, s.size));
            }
            prev = s.size;
        }
        if self.token_grid == 0 || self.input_size % self.token_grid != 0 {
            return bad(format!("token grid {} does not divide input size {}", self.token_grid, self.input_size));
        }
        if self.pooled_size == 0 || prev % self.pooled_size != 0 {
            return bad(format!("pooled size {} does not divide final size {prev}", self.pooled_size));
        }
        if self.heads == 0 || self.enc_embed % self.heads != 0 || self.dec_embed % self.heads != 0 {
            return bad(format!("embeddings {}/{} not divisible by {} heads", self.enc_embed, self.dec_embed, self.heads));
        }
        if self.latent_dim == 0 || self.fused_dim == 0 || self.mlp_ratio == 0 {
            return bad("latent, fused and MLP widths must be positive".into());
        }
        let n = self.branch_durations.len();
        if n == 0 || self.branch_durations.iter().any(|d| !DURATIONS.contains(d)) {
            return bad(format!("branch durations {:?} must be drawn from {DURATIONS:?}", self.branch_durations));
        }
        if self.branch_durations.windows(2).any(|w| w[0] >= w[1]) {
            return bad("branch durations must be strictly increasing".into());
        }
        if self.fusion_mode != FusionMode::None && (n < 2 || !self.block_kind.has_attention()) {
            return bad(format!("fusion mode {} needs several branches with attention", self.fusion_mode.as_str()));
        }
        Ok(())
    }
}
