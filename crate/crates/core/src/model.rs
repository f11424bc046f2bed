//! The multi-branch CNN-ViT autoencoder.
//!
//! Every branch runs its own stack of blocks. Inside a block a bottleneck
//! does any resampling, a bridge hands the CNN map to the token path
//! ([`downsample`]), self-attention mixes the tokens, and the result comes
//! back ([`upsample`]) to be fused by a second bottleneck. Branches talk
//! only through the CLS token (or, in the joint mode, through one shared
//! attention).

use ctsae_tensor::{BatchNormMode, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{BlockKind, BlockPlan, FusionMode, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{activate, attention, BatchNorm, Bottleneck, Builder, Conv, Graph, LayerNorm, Linear, ParamId, ParamStore, Qkv, Resample, TransformerLayer};

const POS_INIT: f64 = 0.02;

/// Convolution-to-token and token-to-convolution adapters of one block.
#[derive(Debug, Clone, Copy)]
pub struct Bridge {
    pub down: Conv,
    pub down_ln: LayerNorm,
    pub up: Conv,
    pub up_bn: BatchNorm,
}

impl Bridge {
    fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, channels: usize, width: usize) -> Self {
        let mut s = b.scope("bridge");
        Bridge {
            down: Conv::new(&mut s, "down", channels, width, 1, 1, 0, true),
            down_ln: LayerNorm::new(&mut s, "down_ln", width),
            up: Conv::new(&mut s, "up", width, channels, 1, 1, 0, true),
            up_bn: BatchNorm::new(&mut s, "up_bn", channels),
        }
    }
}

/// `[N,C,H,W]` map to `[N,T,K]` tokens: 1x1 projection, average pooling
/// with window `H / token_grid`, flattening and layer norm.
///
/// Pooling runs before the projection; both are linear, so the order does
/// not change the result and the projection touches `T` pixels, not `HW`.
pub fn downsample<T: Scalar>(g: &mut Graph<'_, T>, bridge: &Bridge, x_c: Var, token_grid: usize) -> Result<Var> {
    let s = g.shape(x_c);
    let (n, h, w) = (s[0], s[2], s[3]);
    if h != w || token_grid == 0 || h % token_grid != 0 {
        return Err(Error::Config(format!("token grid {token_grid} does not tile a {h}x{w} map")));
    }
    let window = h / token_grid;
    let pooled = if window > 1 { g.tape.avg_pool2d(x_c, window, window)? } else { x_c };
    let y = bridge.down.forward(g, pooled)?;
    let width = g.shape(y)[1];
    let y = g.tape.reshape(y, &[n, width, token_grid * token_grid])?;
    let y = g.tape.permute(y, &[0, 2, 1])?;
    bridge.down_ln.forward(g, y)
}

/// `[N,T,K]` tokens to a `[N,C,H,H]` map: grid reshape, 1x1 projection,
/// nearest-neighbour expansion and batch norm.
pub fn upsample<T: Scalar>(g: &mut Graph<'_, T>, bridge: &Bridge, y_t: Var, token_grid: usize, size: usize) -> Result<Var> {
    let s = g.shape(y_t);
    let (n, t, width) = (s[0], s[1], s[2]);
    if t != token_grid * token_grid || size % token_grid != 0 {
        return Err(Error::Config(format!("{t} tokens cannot be expanded to a {size}x{size} map on a {token_grid}-grid")));
    }
    let y = g.tape.permute(y_t, &[0, 2, 1])?;
    let y = g.tape.reshape(y, &[n, width, token_grid, token_grid])?;
    let y = bridge.up.forward(g, y)?;
    let factor = size / token_grid;
    let y = if factor > 1 { g.tape.upsample_nearest(y, factor)? } else { y };
    bridge.up_bn.forward(g, y)
}

/// Updates the shared CLS token `[N,1,K]` by attending, with the shared
/// query/key/value weights, over itself and every branch's tokens.
pub fn cls_fusion<T: Scalar>(g: &mut Graph<'_, T>, qkv: &Qkv, heads: usize, cls: Var, tokens: &[Var]) -> Result<Var> {
    let width = g.shape(cls)[2];
    if let Some(t) = tokens.iter().find(|&&t| g.shape(t)[2] != width) {
        return Err(Error::Config(format!("branch tokens {:?} do not match CLS width {width}", g.shape(*t))));
    }
    let mut all = vec![cls];
    all.extend_from_slice(tokens);
    let context = g.tape.concat(&all, 1)?;
    let q = qkv.q.forward(g, cls)?;
    let k = qkv.k.forward(g, context)?;
    let v = qkv.v.forward(g, context)?;
    let a = attention(&mut g.tape, q, k, v, heads)?;
    Ok(g.tape.add(cls, a)?)
}

/// One branch's share of a block. Absent parts are skipped by the
/// CNN-only and ViT-only variants.
#[derive(Debug, Clone, Copy)]
pub struct BranchBlock {
    pub pre: Option<Bottleneck>,
    pub bridge: Option<Bridge>,
    pub attn: Option<TransformerLayer>,
    pub fuse: Option<Bottleneck>,
}

/// The CNN map and token sequence carried between blocks.
#[derive(Debug, Clone, Copy)]
pub struct BranchState {
    pub x_c: Option<Var>,
    pub x_t: Option<Var>,
}

/// CLS token(s) carried between blocks.
#[derive(Debug, Clone)]
pub enum Cls {
    Shared(Var),
    PerBranch(Vec<Var>),
    Absent,
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    kind: BlockKind,
    mode: FusionMode,
    heads: usize,
    token_grid: usize,
}

/// All branches at one depth, plus the cross-branch attention for that depth.
#[derive(Debug, Clone)]
pub struct Block {
    pub plan: BlockPlan,
    pub branches: Vec<BranchBlock>,
    pub fusion: Option<Qkv>,
    pub joint: Option<TransformerLayer>,
    layout: Layout,
}

fn split_cls<T: Scalar>(g: &mut Graph<'_, T>, seq: Var, t: usize) -> Result<(Var, Var)> {
    let cls = g.tape.narrow(seq, 1, 0, 1)?;
    let tokens = g.tape.narrow(seq, 1, 1, t)?;
    Ok((cls, tokens))
}

fn mean_of<T: Scalar>(g: &mut Graph<'_, T>, vars: &[Var]) -> Result<Var> {
    if vars.len() == 1 {
        return Ok(vars[0]);
    }
    let s = g.tape.add_all(vars)?;
    Ok(g.tape.scale(s, T::lit(1.0 / vars.len() as f64)))
}

impl Block {
    fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, cfg: &ModelConfig, plan: BlockPlan, width: usize, resample: Resample) -> Self {
        let kind = cfg.block_kind;
        let mode = cfg.fusion_mode;
        let fusion = (mode == FusionMode::ClsFusion).then(|| Qkv::new(b, "qkv", width));
        let joint = (mode == FusionMode::AllAttention).then(|| TransformerLayer::new(b, "joint", width, cfg.heads, cfg.mlp_ratio, None));
        let branches = (0..cfg.branches())
            .map(|j| {
                let mut s = b.scope(&format!("branch{j}"));
                BranchBlock {
                    pre: kind.has_cnn().then(|| Bottleneck::new(&mut s, "pre", plan.in_channels, plan.out_channels, resample, cfg.activation)),
                    bridge: (kind == BlockKind::CnnVit).then(|| Bridge::new(&mut s, plan.out_channels, width)),
                    attn: (kind.has_attention() && mode != FusionMode::AllAttention)
                        .then(|| TransformerLayer::new(&mut s, "attn", width, cfg.heads, cfg.mlp_ratio, fusion)),
                    fuse: kind.has_cnn().then(|| Bottleneck::new(&mut s, "fuse", plan.out_channels, plan.out_channels, Resample::Keep, cfg.activation)),
                }
            })
            .collect();
        let layout = Layout { kind, mode, heads: cfg.heads, token_grid: cfg.token_grid };
        Block { plan, branches, fusion, joint, layout }
    }

    /// Advances every branch through this block.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, states: &mut [BranchState], cls: &mut Cls) -> Result<()> {
        let Layout { kind, mode, heads, token_grid } = self.layout;
        let t = token_grid * token_grid;

        for (bb, st) in self.branches.iter().zip(states.iter_mut()) {
            if let (Some(pre), Some(x)) = (bb.pre, st.x_c) {
                st.x_c = Some(pre.forward(g, x)?);
            }
            if let (Some(bridge), Some(x_c), Some(x_t)) = (bb.bridge, st.x_c, st.x_t) {
                let x_d = downsample(g, &bridge, x_c, token_grid)?;
                st.x_t = Some(g.tape.add(x_d, x_t)?);
            }
        }

        if kind.has_attention() {
            let tokens: Vec<Var> = states.iter().map(|s| s.x_t.expect("attention blocks carry tokens")).collect();
            match (mode, &mut *cls) {
                (FusionMode::ClsFusion, Cls::Shared(c)) => {
                    let qkv = self.fusion.as_ref().expect("fusion weights");
                    let fused = cls_fusion(g, qkv, heads, *c, &tokens)?;
                    let mut outs = Vec::with_capacity(tokens.len());
                    for (bb, st) in self.branches.iter().zip(states.iter_mut()) {
                        let seq = g.tape.concat(&[fused, st.x_t.unwrap()], 1)?;
                        let y = bb.attn.unwrap().forward(g, seq)?;
                        let (c_b, y_t) = split_cls(g, y, t)?;
                        outs.push(c_b);
                        st.x_t = Some(y_t);
                    }
                    *c = mean_of(g, &outs)?;
                }
                (FusionMode::AllAttention, Cls::Shared(c)) => {
                    let mut all = vec![*c];
                    all.extend_from_slice(&tokens);
                    let seq = g.tape.concat(&all, 1)?;
                    let y = self.joint.as_ref().expect("joint layer").forward(g, seq)?;
                    *c = g.tape.narrow(y, 1, 0, 1)?;
                    for (j, st) in states.iter_mut().enumerate() {
                        st.x_t = Some(g.tape.narrow(y, 1, 1 + j * t, t)?);
                    }
                }
                (FusionMode::None, Cls::PerBranch(cs)) => {
                    for ((bb, st), c) in self.branches.iter().zip(states.iter_mut()).zip(cs.iter_mut()) {
                        let seq = g.tape.concat(&[*c, st.x_t.unwrap()], 1)?;
                        let y = bb.attn.unwrap().forward(g, seq)?;
                        let (c_b, y_t) = split_cls(g, y, t)?;
                        *c = c_b;
                        st.x_t = Some(y_t);
                    }
                }
                _ => return Err(Error::Config(format!("CLS state does not fit fusion mode {}", mode.as_str()))),
            }
        }

        for (bb, st) in self.branches.iter().zip(states.iter_mut()) {
            let Some(x_c) = st.x_c else { continue };
            let x_hat = match (bb.bridge, st.x_t) {
                (Some(bridge), Some(y_t)) => {
                    let up = upsample(g, &bridge, y_t, token_grid, self.plan.out_size)?;
                    g.tape.add(up, x_c)?
                }
                _ => x_c,
            };
            st.x_c = Some(match bb.fuse {
                Some(fuse) => fuse.forward(g, x_hat)?,
                None => x_hat,
            });
        }
        Ok(())
    }
}

fn build_blocks<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, cfg: &ModelConfig, plans: &[BlockPlan], width: usize) -> Vec<Block> {
    plans
        .iter()
        .enumerate()
        .map(|(i, &plan)| {
            let resample = if plan.out_size < plan.in_size {
                Resample::Down(plan.in_size / plan.out_size)
            } else if plan.out_size > plan.in_size {
                Resample::Up(plan.out_size / plan.in_size)
            } else {
                Resample::Keep
            };
            Block::new(&mut b.scope(&format!("block{i}")), cfg, plan, width, resample)
        })
        .collect()
}

fn cls_params<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, cfg: &ModelConfig, width: usize) -> Vec<ParamId> {
    if !cfg.block_kind.has_attention() {
        return Vec::new();
    }
    let count = if cfg.fusion_mode == FusionMode::None { cfg.branches() } else { 1 };
    (0..count).map(|j| b.zeros(&format!("cls{j}"), vec![1, 1, width])).collect()
}

fn expand<T: Scalar>(g: &mut Graph<'_, T>, id: ParamId, n: usize) -> Result<Var> {
    let p = g.param(id);
    Ok(if n == 1 { p } else { g.tape.repeat_leading(p, n)? })
}

fn initial_cls<T: Scalar>(g: &mut Graph<'_, T>, mode: FusionMode, ids: &[ParamId], n: usize) -> Result<Cls> {
    if ids.is_empty() {
        return Ok(Cls::Absent);
    }
    let toks = ids.iter().map(|&id| expand(g, id, n)).collect::<Result<Vec<_>>>()?;
    Ok(if mode == FusionMode::None { Cls::PerBranch(toks) } else { Cls::Shared(toks[0]) })
}

/// `[N,K]` summary of the CLS state, if there is one.
fn cls_vector<T: Scalar>(g: &mut Graph<'_, T>, cls: &Cls) -> Result<Option<Var>> {
    let c = match cls {
        Cls::Shared(c) => *c,
        Cls::PerBranch(cs) => mean_of(g, cs)?,
        Cls::Absent => return Ok(None),
    };
    Ok(Some(g.tape.flatten_from(c, 1)?))
}

#[derive(Debug, Clone, Copy)]
enum Stem {
    Conv(Conv, BatchNorm),
    Patch(Conv),
}

#[derive(Debug, Clone)]
pub struct Encoder {
    stems: Vec<Stem>,
    pos: Vec<ParamId>,
    cls: Vec<ParamId>,
    pub blocks: Vec<Block>,
    /// Concatenated branch codes to the fused vector.
    pub fuse: Linear,
    /// Fused vector plus CLS to the latent code.
    pub latent: Linear,
}

/// Intermediate codes of one encoder pass.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub z_i: Vec<Var>,
    pub z: Var,
    pub cls: Option<Var>,
    pub z_hat: Var,
}

impl Encoder {
    fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, cfg: &ModelConfig) -> Self {
        let k = cfg.enc_embed;
        let c0 = cfg.stage_schedule[0].channels;
        let patch = cfg.input_size / cfg.token_grid;
        let stems = (0..cfg.branches())
            .map(|j| {
                let mut s = b.scope(&format!("stem{j}"));
                match cfg.block_kind {
                    BlockKind::VitOnly => Stem::Patch(Conv::new(&mut s, "patch", cfg.input_channels, k, patch, patch, 0, true)),
                    _ => Stem::Conv(
                        Conv::new(&mut s, "conv", cfg.input_channels, c0, 3, cfg.stem_stride(), 1, false),
                        BatchNorm::new(&mut s, "bn", c0),
                    ),
                }
            })
            .collect();
        let pos = if cfg.block_kind.has_attention() {
            (0..cfg.branches()).map(|j| b.uniform(&format!("pos{j}"), vec![1, cfg.tokens(), k], POS_INIT)).collect()
        } else {
            Vec::new()
        };
        let cls = cls_params(b, cfg, k);
        let blocks = build_blocks(b, cfg, &cfg.encoder_blocks(), k);
        let fuse = Linear::new(b, "fuse", cfg.branch_code_dim() * cfg.branches(), cfg.fused_dim);
        let cls_width = if cls.is_empty() { 0 } else { k };
        let latent = Linear::new(b, "latent", cfg.fused_dim + cls_width, cfg.latent_dim);
        Encoder { stems, pos, cls, blocks, fuse, latent }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, cfg: &ModelConfig, views: &[Var]) -> Result<Encoded> {
        let n = g.shape(views[0])[0];
        let mut states = Vec::with_capacity(views.len());
        for (j, &view) in views.iter().enumerate() {
            let pos = match self.pos.get(j) {
                Some(&id) => Some(expand(g, id, n)?),
                None => None,
            };
            states.push(match self.stems[j] {
                Stem::Conv(conv, bn) => {
                    let y = conv.forward(g, view)?;
                    let y = bn.forward(g, y)?;
                    BranchState { x_c: Some(activate(g, cfg.activation, y)), x_t: pos }
                }
                Stem::Patch(conv) => {
                    let y = conv.forward(g, view)?;
                    let y = g.tape.reshape(y, &[n, cfg.enc_embed, cfg.tokens()])?;
                    let y = g.tape.permute(y, &[0, 2, 1])?;
                    let y = g.tape.add(y, pos.expect("token path has positions"))?;
                    BranchState { x_c: None, x_t: Some(y) }
                }
            });
        }
        let mut cls = initial_cls(g, cfg.fusion_mode, &self.cls, n)?;
        for block in &self.blocks {
            block.forward(g, &mut states, &mut cls)?;
        }
        let final_size = cfg.final_stage().size;
        let mut z_i = Vec::with_capacity(states.len());
        for st in &states {
            let code = match st.x_c {
                Some(x_c) => {
                    let window = final_size / cfg.pooled_size;
                    let p = if window > 1 { g.tape.avg_pool2d(x_c, window, window)? } else { x_c };
                    g.tape.flatten_from(p, 1)?
                }
                None => g.tape.flatten_from(st.x_t.unwrap(), 1)?,
            };
            z_i.push(code);
        }
        let joined = if z_i.len() == 1 { z_i[0] } else { g.tape.concat(&z_i, 1)? };
        let z = self.fuse.forward(g, joined)?;
        let cls = cls_vector(g, &cls)?;
        let head = match cls {
            Some(c) => g.tape.concat(&[z, c], 1)?,
            None => z,
        };
        let z_hat = self.latent.forward(g, head)?;
        Ok(Encoded { z_i, z, cls, z_hat })
    }
}

#[derive(Debug, Clone, Copy)]
enum Head {
    Conv(Conv),
    Unpatch(Conv),
}

#[derive(Debug, Clone)]
pub struct Decoder {
    seeds: Vec<Linear>,
    cls_seeds: Vec<Linear>,
    pos: Vec<ParamId>,
    pub blocks: Vec<Block>,
    heads: Vec<Head>,
}

impl Decoder {
    fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, cfg: &ModelConfig) -> Self {
        let k = cfg.dec_embed;
        let last = cfg.final_stage();
        let nb = cfg.branches();
        let seed_width = match cfg.block_kind {
            BlockKind::VitOnly => cfg.tokens() * k,
            _ => last.channels * cfg.pooled_size * cfg.pooled_size,
        };
        let seeds = (0..nb).map(|j| Linear::new(b, &format!("seed{j}"), cfg.latent_dim, seed_width)).collect();
        let cls_count = match (cfg.block_kind.has_attention(), cfg.fusion_mode) {
            (false, _) => 0,
            (true, FusionMode::None) => nb,
            (true, _) => 1,
        };
        let cls_seeds = (0..cls_count).map(|j| Linear::new(b, &format!("cls_seed{j}"), cfg.latent_dim, k)).collect();
        let pos = if cfg.block_kind.has_attention() {
            (0..nb).map(|j| b.uniform(&format!("pos{j}"), vec![1, cfg.tokens(), k], POS_INIT)).collect()
        } else {
            Vec::new()
        };
        let blocks = build_blocks(b, cfg, &cfg.decoder_blocks(), k);
        let c0 = cfg.stage_schedule[0].channels;
        let s = cfg.stem_stride();
        let patch = cfg.input_size / cfg.token_grid;
        let heads = (0..nb)
            .map(|j| {
                let name = format!("head{j}");
                match cfg.block_kind {
                    BlockKind::VitOnly => Head::Unpatch(Conv::transposed(b, &name, k, cfg.input_channels, patch, patch, 0, true)),
                    _ if s == 1 => Head::Conv(Conv::new(b, &name, c0, cfg.input_channels, 3, 1, 1, true)),
                    _ => Head::Conv(Conv::transposed(b, &name, c0, cfg.input_channels, 2 * s, s, s / 2, true)),
                }
            })
            .collect();
        Decoder { seeds, cls_seeds, pos, blocks, heads }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, cfg: &ModelConfig, z_hat: Var) -> Result<Vec<Var>> {
        let n = g.shape(z_hat)[0];
        let k = cfg.dec_embed;
        let last = cfg.final_stage();
        let mut states = Vec::with_capacity(self.seeds.len());
        for (j, seed) in self.seeds.iter().enumerate() {
            let s = seed.forward(g, z_hat)?;
            let pos = match self.pos.get(j) {
                Some(&id) => Some(expand(g, id, n)?),
                None => None,
            };
            states.push(match cfg.block_kind {
                BlockKind::VitOnly => {
                    let t = g.tape.reshape(s, &[n, cfg.tokens(), k])?;
                    BranchState { x_c: None, x_t: Some(g.tape.add(t, pos.unwrap())?) }
                }
                _ => {
                    let m = g.tape.reshape(s, &[n, last.channels, cfg.pooled_size, cfg.pooled_size])?;
                    let factor = last.size / cfg.pooled_size;
                    let m = if factor > 1 { g.tape.upsample_nearest(m, factor)? } else { m };
                    BranchState { x_c: Some(m), x_t: pos }
                }
            });
        }
        let mut seeded = Vec::with_capacity(self.cls_seeds.len());
        for lin in &self.cls_seeds {
            let c = lin.forward(g, z_hat)?;
            seeded.push(g.tape.reshape(c, &[n, 1, k])?);
        }
        let mut cls = match (seeded.len(), cfg.fusion_mode) {
            (0, _) => Cls::Absent,
            (_, FusionMode::None) => Cls::PerBranch(seeded),
            _ => Cls::Shared(seeded[0]),
        };
        for block in &self.blocks {
            block.forward(g, &mut states, &mut cls)?;
        }
        let mut out = Vec::with_capacity(states.len());
        for (st, head) in states.iter().zip(&self.heads) {
            out.push(match *head {
                Head::Conv(conv) => conv.forward(g, st.x_c.unwrap())?,
                Head::Unpatch(conv) => {
                    let t = g.tape.permute(st.x_t.unwrap(), &[0, 2, 1])?;
                    let t = g.tape.reshape(t, &[n, k, cfg.token_grid, cfg.token_grid])?;
                    conv.forward(g, t)?
                }
            });
        }
        Ok(out)
    }
}

/// Reconstruction loss of one batch: the total and each view's MSE.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub per_view: Vec<f64>,
    /// The total as computed on the tape, in working precision.
    pub objective: f64,
}

/// Loss variables on the tape.
#[derive(Debug, Clone)]
pub struct LossVars {
    pub total: Var,
    pub per_view: Vec<Var>,
    pub recon: Vec<Var>,
    pub targets: Vec<Var>,
}

/// Architecture without parameter values.
#[derive(Debug, Clone)]
pub struct Network {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Network {
    /// Builds the architecture and registers freshly initialized parameters.
    pub fn build<T: Scalar, R: Rng>(config: ModelConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut b = Builder::new(store, rng);
        let encoder = Encoder::new(&mut b.scope("enc"), &config);
        let decoder = Decoder::new(&mut b.scope("dec"), &config);
        Ok(Network { config, encoder, decoder })
    }

    fn check_views<T: Scalar>(&self, g: &Graph<'_, T>, views: &[Var]) -> Result<()> {
        let cfg = &self.config;
        if views.len() != cfg.branches() {
            return Err(Error::Config(format!("model takes {} views, got {}", cfg.branches(), views.len())));
        }
        let first = g.shape(views[0]);
        for &v in views {
            let s = g.shape(v);
            if s.len() != 4 || s[1] != cfg.input_channels || s[2] != cfg.input_size || s[3] != cfg.input_size || s[0] != first[0] {
                return Err(Error::Config(format!(
                    "view shape {s:?} does not match [N,{},{},{}]",
                    cfg.input_channels, cfg.input_size, cfg.input_size
                )));
            }
        }
        Ok(())
    }

    pub fn encode<T: Scalar>(&self, g: &mut Graph<'_, T>, views: &[Var]) -> Result<Encoded> {
        self.check_views(g, views)?;
        self.encoder.forward(g, &self.config, views)
    }

    pub fn decode<T: Scalar>(&self, g: &mut Graph<'_, T>, z_hat: Var) -> Result<Vec<Var>> {
        let s = g.shape(z_hat);
        if s.len() != 2 || s[1] != self.config.latent_dim {
            return Err(Error::Config(format!("latent shape {s:?} does not match [N,{}]", self.config.latent_dim)));
        }
        self.decoder.forward(g, &self.config, z_hat)
    }

    /// Sum over views of the mean squared reconstruction error.
    pub fn forward_loss<T: Scalar>(&self, g: &mut Graph<'_, T>, views: &[Var]) -> Result<LossVars> {
        let enc = self.encode(g, views)?;
        let recon = self.decode(g, enc.z_hat)?;
        let per_view = recon.iter().zip(views).map(|(&r, &v)| g.tape.mse_loss(r, v)).collect::<Result<Vec<_>, _>>()?;
        let total = g.tape.add_all(&per_view)?;
        Ok(LossVars { total, per_view, recon, targets: views.to_vec() })
    }
}

/// Network plus parameter values.
#[derive(Debug, Clone)]
pub struct Ctsae<T: Scalar> {
    pub net: Network,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Ctsae<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Network::build(config, &mut params, &mut rng)?;
        Ok(Ctsae { net, params })
    }

    /// Rebuilds the network for `config` around existing values, which must
    /// match it name for name and shape for shape.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let fresh = Ctsae::<T>::new(config, 0)?;
        let expected: Vec<(&str, &[usize])> = fresh.params.iter().map(|(n, t)| (n, t.shape())).collect();
        let found: Vec<(&str, &[usize])> = params.iter().map(|(n, t)| (n, t.shape())).collect();
        if expected != found {
            let diff = expected.iter().zip(&found).find(|(a, b)| a != b);
            let msg = match diff {
                Some((a, b)) => format!("expected {} {:?}, found {} {:?}", a.0, a.1, b.0, b.1),
                None => format!("expected {} tensors, found {}", expected.len(), found.len()),
            };
            return Err(Error::Config(format!("parameters do not fit the model configuration: {msg}")));
        }
        let expected_stats: Vec<(&str, usize)> = fresh.params.stats().map(|(n, s)| (n, s.mean.len())).collect();
        let found_stats: Vec<(&str, usize)> = params.stats().map(|(n, s)| (n, s.mean.len())).collect();
        if expected_stats != found_stats {
            return Err(Error::Config("normalization buffers do not fit the model configuration".into()));
        }
        Ok(Ctsae { net: fresh.net, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    fn inputs(g: &mut Graph<'_, T>, views: &[Tensor<T>]) -> Vec<Var> {
        views.iter().map(|v| g.input(v.clone())).collect()
    }

    /// Latent codes `[N, latent_dim]`, using running normalization statistics.
    pub fn encode(&mut self, views: &[Tensor<T>]) -> Result<Tensor<T>> {
        let mut g = self.params.graph(BatchNormMode::Eval, false);
        let vars = Self::inputs(&mut g, views);
        let enc = self.net.encode(&mut g, &vars)?;
        Ok(g.value(enc.z_hat).clone())
    }

    pub fn reconstruct(&mut self, views: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        self.reconstruct_in(views, BatchNormMode::Eval)
    }

    pub fn reconstruct_in(&mut self, views: &[Tensor<T>], mode: BatchNormMode) -> Result<Vec<Tensor<T>>> {
        let mut g = self.params.graph(mode, false);
        let vars = Self::inputs(&mut g, views);
        let enc = self.net.encode(&mut g, &vars)?;
        let out = self.net.decode(&mut g, enc.z_hat)?;
        Ok(out.iter().map(|&v| g.value(v).clone()).collect())
    }

    /// Loss without gradients. `Train` mode uses (and updates) batch
    /// statistics; `Eval` uses the running ones.
    pub fn loss(&mut self, views: &[Tensor<T>], mode: BatchNormMode) -> Result<LossReport> {
        let mut g = self.params.graph(mode, false);
        let vars = Self::inputs(&mut g, views);
        let l = self.net.forward_loss(&mut g, &vars)?;
        Ok(report(&g, &l))
    }

    /// Training-mode loss and the gradient of every parameter, in store
    /// order. `None` marks a parameter the forward pass never touched.
    pub fn loss_and_grads(&mut self, views: &[Tensor<T>]) -> Result<(LossReport, Vec<Option<Vec<T>>>)> {
        let mut g = self.params.graph(BatchNormMode::Train, true);
        let vars = Self::inputs(&mut g, views);
        let l = self.net.forward_loss(&mut g, &vars)?;
        let rep = report(&g, &l);
        let (tape, bound) = g.finish();
        let grads = tape.backward(l.total)?;
        let out = bound.iter().map(|v| v.map(|v| grads.get_or_zeros(&tape, v))).collect();
        Ok((rep, out))
    }
}

/// Per-view errors recomputed in `f64` from the reconstructions, so the
/// reported total is their exact sum whatever the working precision.
fn report<T: Scalar>(g: &Graph<'_, T>, l: &LossVars) -> LossReport {
    let per_view: Vec<f64> = l.recon.iter().zip(&l.targets).map(|(&r, &t)| mse_f64(g.value(r), g.value(t))).collect();
    let objective = g.value(l.total).data()[0].to_f64().unwrap();
    LossReport { total: per_view.iter().sum(), per_view, objective }
}

pub(crate) fn mse_f64<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let s: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x.to_f64().unwrap() - y.to_f64().unwrap()).powi(2)).sum();
    s / a.numel() as f64
}
