//! Dual-branch Swin encoder, attentional feature fusion and the
//! skip-connected Swin decoder.

use dbswin_tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;

use crate::error::{Error, Result};
use crate::layers::{LayerNorm, Linear, ParamInit};
use crate::swin::{
    crop_grid, pad_grid, pad_image, patch_embed, patch_expand, patch_merge, resample_nearest, SwinBlock,
};

pub const NUM_STAGES: usize = 4;

/// One encoder branch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BranchConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    /// Swin blocks per stage; blocks alternate regular and shifted windows.
    pub depths: [usize; NUM_STAGES],
    pub heads: [usize; NUM_STAGES],
    pub window: usize,
}

impl BranchConfig {
    /// Two blocks per stage and heads that double with the channel width,
    /// starting from one head per 8 channels.
    pub fn new(patch_size: usize, embed_dim: usize, window: usize) -> Self {
        let base = (embed_dim / 8).max(1);
        BranchConfig {
            patch_size,
            embed_dim,
            depths: [2; NUM_STAGES],
            heads: [base, base * 2, base * 4, base * 8],
            window,
        }
    }

    pub fn dim(&self, level: usize) -> usize {
        self.embed_dim << level
    }

    /// Pixel side of one token at `level`.
    pub fn cell(&self, level: usize) -> usize {
        self.patch_size << level
    }

    /// Image side after zero padding to whole patches.
    pub fn padded_extent(&self, size: usize) -> usize {
        size.div_ceil(self.patch_size) * self.patch_size
    }

    /// Token grid side at `level` for an image side of `size`; odd grids
    /// round up at each merge.
    pub fn grid(&self, level: usize, size: usize) -> usize {
        (0..level).fold(size.div_ceil(self.patch_size), |g, _| g.div_ceil(2))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Ordered by strictly increasing patch size; the first is the anchor
    /// whose resolution the fusion and decoder follow.
    pub branches: Vec<BranchConfig>,
    pub in_channels: usize,
    pub out_classes: usize,
    /// Swin blocks per decoder stage.
    pub decoder_depth: usize,
    pub mlp_ratio: usize,
    /// Bottleneck reduction of the channel-attention branches.
    pub aff_ratio: usize,
}

impl ModelConfig {
    pub fn new(patch_sizes: &[usize], embed_dim: usize, window: usize, in_channels: usize) -> Self {
        ModelConfig {
            branches: patch_sizes
                .iter()
                .map(|&s| BranchConfig::new(s, embed_dim, window))
                .collect(),
            in_channels,
            out_classes: 1,
            decoder_depth: 2,
            mlp_ratio: 4,
            aff_ratio: 4,
        }
    }

    /// 64×64 grayscale desk model: C=16, M=4, branches s=4 and s=8.
    pub fn desk() -> Self {
        Self::new(&[4, 8], 16, 4, 1)
    }

    /// Tiny dual-branch model used for end-to-end gradient checks.
    pub fn tiny() -> Self {
        Self::new(&[4, 8], 8, 4, 1)
    }

    pub fn anchor(&self) -> &BranchConfig {
        &self.branches[0]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(1..=3).contains(&self.branches.len()) {
            return bad(format!("expected 1 to 3 branches, got {}", self.branches.len()));
        }
        if self.branches.windows(2).any(|p| p[0].patch_size >= p[1].patch_size) {
            return bad("branch patch sizes must be strictly increasing".into());
        }
        let anchor = self.anchor().patch_size;
        if !anchor.is_power_of_two() {
            return bad(format!(
                "anchor patch size {anchor} must be a power of two for the decoder upsampling chain"
            ));
        }
        if self.out_classes != 1 {
            return bad("only binary segmentation (one output class) is supported".into());
        }
        if self.in_channels == 0 || self.mlp_ratio == 0 || self.aff_ratio == 0 || self.decoder_depth == 0 {
            return bad("channel counts and ratios must be positive".into());
        }
        for (b, br) in self.branches.iter().enumerate() {
            if br.patch_size == 0 || br.embed_dim == 0 || br.window == 0 {
                return bad(format!("branch {b}: patch size, embed dim and window must be positive"));
            }
            for lvl in 0..NUM_STAGES {
                if br.depths[lvl] == 0 {
                    return bad(format!("branch {b}: stage {lvl} has no blocks"));
                }
                if br.heads[lvl] == 0 || br.dim(lvl) % br.heads[lvl] != 0 {
                    return bad(format!(
                        "branch {b}: {} heads do not divide stage {lvl} width {}",
                        br.heads[lvl],
                        br.dim(lvl)
                    ));
                }
            }
        }
        Ok(())
    }

    /// Total scalar parameter count, determined by the configuration alone.
    pub fn param_count(&self) -> Result<usize> {
        Ok(DbSwin::new(self.clone(), 0)?.params().numel())
    }

    /// Patch sizes joined with commas, e.g. `4,8`.
    pub fn patch_label(&self) -> String {
        self.branches
            .iter()
            .map(|b| b.patch_size.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }
}

fn blocks(
    init: &mut ParamInit<'_>,
    count: usize,
    dim: usize,
    heads: usize,
    window: usize,
    mlp_ratio: usize,
) -> Result<Vec<SwinBlock>> {
    (0..count)
        .map(|j| SwinBlock::new(&mut init.scope(&format!("block{j}")), dim, heads, window, mlp_ratio))
        .collect()
}

fn run_blocks(tape: &mut Tape, ps: &ParamStore, blocks: &[SwinBlock], mut x: Var) -> Result<Var> {
    for (j, b) in blocks.iter().enumerate() {
        x = b.forward(tape, ps, x, j % 2 == 1)?;
    }
    Ok(x)
}

#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub blocks: Vec<SwinBlock>,
    pub merge: Option<ParamId>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: BranchConfig,
    pub embed: Linear,
    pub stages: Vec<EncoderStage>,
}

/// Pre-merge stage outputs, shallowest first: `[h_i, w_i, C·2^i]`.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub levels: Vec<Var>,
}

impl Encoder {
    fn new(init: &mut ParamInit<'_>, cfg: &BranchConfig, in_channels: usize, mlp_ratio: usize) -> Result<Self> {
        let embed = Linear::new(
            init,
            "embed",
            in_channels * cfg.patch_size * cfg.patch_size,
            cfg.embed_dim,
            true,
        )?;
        let stages = (0..NUM_STAGES)
            .map(|i| {
                let mut s = init.scope(&format!("stage{i}"));
                let dim = cfg.dim(i);
                let blocks = blocks(&mut s, cfg.depths[i], dim, cfg.heads[i], cfg.window, mlp_ratio)?;
                let merge = if i + 1 < NUM_STAGES {
                    Some(s.fan_in_uniform("merge", 4 * dim, 2 * dim)?)
                } else {
                    None
                };
                Ok(EncoderStage { blocks, merge })
            })
            .collect::<Result<_>>()?;
        Ok(Encoder {
            config: cfg.clone(),
            embed,
            stages,
        })
    }

    /// Encodes a `[Cin, H, W]` image. The image is zero-padded to whole
    /// patches and odd grids are zero-padded before each merge, so padding
    /// never forms whole tokens that pass through a block.
    pub fn forward(&self, tape: &mut Tape, ps: &ParamStore, image: Var) -> Result<EncoderOutput> {
        let (h, w) = match *tape.shape(image) {
            [_, h, w] => (h, w),
            ref s => return Err(Error::Config(format!("expected a [C, H, W] image, got {s:?}"))),
        };
        let padded = pad_image(tape, image, self.config.padded_extent(h), self.config.padded_extent(w))?;
        let mut x = patch_embed(tape, ps, padded, self.config.patch_size, &self.embed)?;
        let mut levels = Vec::with_capacity(NUM_STAGES);
        for stage in &self.stages {
            x = run_blocks(tape, ps, &stage.blocks, x)?;
            levels.push(x);
            if let Some(m) = stage.merge {
                let (h, w) = (tape.shape(x)[0], tape.shape(x)[1]);
                x = pad_grid(tape, x, h.div_ceil(2) * 2, w.div_ceil(2) * 2)?;
                x = patch_merge(tape, ps, x, m)?;
            }
        }
        Ok(EncoderOutput { levels })
    }
}

/// Pointwise bottleneck `C → C/r → C` with a normalization in between.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub fc1: Linear,
    pub norm: LayerNorm,
    pub fc2: Linear,
}

impl Bottleneck {
    fn new(init: &mut ParamInit<'_>, dim: usize, ratio: usize) -> Result<Self> {
        let hidden = (dim / ratio).max(1);
        Ok(Bottleneck {
            fc1: Linear::new(init, "fc1", dim, hidden, true)?,
            norm: LayerNorm::new(init, "norm", hidden)?,
            fc2: Linear::new(init, "fc2", hidden, dim, true)?,
        })
    }

    fn forward(&self, tape: &mut Tape, ps: &ParamStore, x: Var) -> Result<Var> {
        let y = self.fc1.forward(tape, ps, x)?;
        let y = self.norm.forward(tape, ps, y)?;
        let y = tape.gelu(y);
        self.fc2.forward(tape, ps, y)
    }
}

/// Attentional feature fusion driven by multi-scale channel attention.
#[derive(Clone, Debug)]
pub struct Aff {
    pub dim: usize,
    pub global: Bottleneck,
    pub local: Bottleneck,
}

impl Aff {
    pub fn new(init: &mut ParamInit<'_>, dim: usize, ratio: usize) -> Result<Self> {
        Ok(Aff {
            dim,
            global: Bottleneck::new(&mut init.scope("global"), dim, ratio)?,
            local: Bottleneck::new(&mut init.scope("local"), dim, ratio)?,
        })
    }

    /// `sigmoid(bottleneck_g(avgpool(u)) + bottleneck_l(u))`, broadcasting the
    /// pooled branch over every position.
    pub fn ms_cam(&self, tape: &mut Tape, ps: &ParamStore, u: Var) -> Result<Var> {
        let (h, w, c) = match *tape.shape(u) {
            [h, w, c] => (h, w, c),
            ref s => return Err(Error::Config(format!("ms_cam: expected [h, w, C], got {s:?}"))),
        };
        if c != self.dim {
            return Err(Error::Config(format!("ms_cam: {c} channels, expected {}", self.dim)));
        }
        let flat = tape.reshape(u, &[h * w, c])?;
        let pooled = tape.mean_axis(flat, 0)?;
        let g = self.global.forward(tape, ps, pooled)?;
        let l = self.local.forward(tape, ps, u)?;
        let s = tape.add(l, g)?;
        Ok(tape.sigmoid(s))
    }

    /// `Z = M(X ⊕ Y) ⊗ X + (1 − M(X ⊕ Y)) ⊗ Y` with `⊕` as addition,
    /// evaluated as `Y + M ⊗ (X − Y)`.
    pub fn fuse(&self, tape: &mut Tape, ps: &ParamStore, x: Var, y: Var) -> Result<Var> {
        if tape.shape(x) != tape.shape(y) {
            return Err(Error::Config(format!(
                "aff_fuse: shapes {:?} and {:?} differ",
                tape.shape(x),
                tape.shape(y)
            )));
        }
        let sum = tape.add(x, y)?;
        let m = self.ms_cam(tape, ps, sum)?;
        let diff = tape.sub(x, y)?;
        let gated = tape.mul(m, diff)?;
        Ok(tape.add(y, gated)?)
    }
}

/// Brings a coarser branch's level onto the anchor grid and width.
#[derive(Clone, Debug)]
pub enum Align {
    /// Exact 2× ratio: learned patch expansion.
    Expand { weight: ParamId },
    /// Any other ratio: nearest-neighbour replication, then a projection.
    Nearest { proj: Linear },
}

#[derive(Clone, Debug)]
pub struct Fusion {
    pub align: Align,
    pub aff: Aff,
    pub src_cell: usize,
    pub dst_cell: usize,
}

impl Fusion {
    /// Aligns `src` to a `[th, tw, ·]` anchor grid.
    pub fn align(&self, tape: &mut Tape, ps: &ParamStore, src: Var, th: usize, tw: usize) -> Result<Var> {
        match &self.align {
            Align::Expand { weight } => {
                let up = patch_expand(tape, ps, src, *weight)?;
                crop_grid(tape, up, th, tw)
            }
            Align::Nearest { proj } => {
                let r = resample_nearest(tape, src, self.src_cell, th, tw, self.dst_cell)?;
                proj.forward(tape, ps, r)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub up: ParamId,
    pub reduce: Linear,
    pub blocks: Vec<SwinBlock>,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub stages: Vec<DecoderStage>,
    /// Successive 2× expansions from the anchor patch grid to pixels.
    pub final_up: Vec<ParamId>,
    pub head_norm: LayerNorm,
    pub head: Linear,
}

impl Decoder {
    fn new(init: &mut ParamInit<'_>, cfg: &ModelConfig) -> Result<Self> {
        let a = cfg.anchor();
        let stages = (0..NUM_STAGES - 1)
            .map(|k| {
                let level = NUM_STAGES - 2 - k;
                let (cin, cout) = (a.dim(level + 1), a.dim(level));
                let mut s = init.scope(&format!("stage{k}"));
                Ok(DecoderStage {
                    up: s.fan_in_uniform("up", cin, 4 * cout)?,
                    reduce: Linear::new(&mut s, "reduce", 2 * cout, cout, true)?,
                    blocks: blocks(&mut s, cfg.decoder_depth, cout, a.heads[level], a.window, cfg.mlp_ratio)?,
                })
            })
            .collect::<Result<_>>()?;
        let c = a.embed_dim;
        let final_up = (0..a.patch_size.trailing_zeros())
            .map(|i| init.fan_in_uniform(&format!("final_up{i}"), c, 4 * c))
            .collect::<Result<_>>()?;
        Ok(Decoder {
            stages,
            final_up,
            head_norm: LayerNorm::new(init, "head_norm", c)?,
            head: Linear::new(init, "head", c, cfg.out_classes, true)?,
        })
    }

    /// Decodes from the bottleneck through the skips (shallowest first,
    /// one per level above the bottleneck) to `[Hp, Wp, 1]` logits.
    pub fn forward(
        &self,
        tape: &mut Tape,
        ps: &ParamStore,
        bottleneck: Var,
        skips: &[Var],
        trace: &mut Vec<Var>,
    ) -> Result<Var> {
        if skips.len() != self.stages.len() {
            return Err(Error::Config(format!(
                "decoder has {} stages but received {} skip features",
                self.stages.len(),
                skips.len()
            )));
        }
        let mut x = bottleneck;
        for (stage, &skip) in self.stages.iter().zip(skips.iter().rev()) {
            let (sh, sw) = (tape.shape(skip)[0], tape.shape(skip)[1]);
            let up = patch_expand(tape, ps, x, stage.up)?;
            let up = crop_grid(tape, up, sh, sw)?;
            let cat = tape.concat_lastdim(&[up, skip])?;
            let y = stage.reduce.forward(tape, ps, cat)?;
            x = run_blocks(tape, ps, &stage.blocks, y)?;
            trace.push(x);
        }
        for &w in &self.final_up {
            x = patch_expand(tape, ps, x, w)?;
            trace.push(x);
        }
        let x = self.head_norm.forward(tape, ps, x)?;
        self.head.forward(tape, ps, x)
    }
}

/// Every intermediate of one forward pass, for inspection.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Per branch, the four encoder levels.
    pub branch_levels: Vec<Vec<Var>>,
    /// Per extra branch (index 0 = second branch), its aligned levels.
    pub aligned: Vec<Vec<Var>>,
    pub fused: Vec<Var>,
    /// Decoder stage outputs followed by each final upsampling.
    pub decoder: Vec<Var>,
    /// `[1, H, W]` logits.
    pub logits: Var,
}

/// The full segmentation network and its parameters.
#[derive(Clone, Debug)]
pub struct DbSwin {
    config: ModelConfig,
    params: ParamStore,
    encoders: Vec<Encoder>,
    /// `fusions[b][level]` fuses branch `b + 1` into the anchor.
    fusions: Vec<Vec<Fusion>>,
    decoder: Decoder,
}

impl DbSwin {
    /// Builds the model with parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
        let mut init = ParamInit::new(&mut params, &mut rng);
        let mut encoders = Vec::with_capacity(config.branches.len());
        for (b, br) in config.branches.iter().enumerate() {
            encoders.push(Encoder::new(
                &mut init.scope(&format!("branch{b}")),
                br,
                config.in_channels,
                config.mlp_ratio,
            )?);
        }
        let anchor = config.anchor().clone();
        let mut fusions = Vec::new();
        for (b, br) in config.branches.iter().enumerate().skip(1) {
            let mut per_level = Vec::with_capacity(NUM_STAGES);
            for lvl in 0..NUM_STAGES {
                let mut s = init.scope(&format!("fusion{b}.level{lvl}"));
                let (src_dim, dst_dim) = (br.dim(lvl), anchor.dim(lvl));
                let align = if br.patch_size == 2 * anchor.patch_size {
                    Align::Expand {
                        weight: s.fan_in_uniform("align", src_dim, 4 * dst_dim)?,
                    }
                } else {
                    Align::Nearest {
                        proj: Linear::new(&mut s, "align", src_dim, dst_dim, false)?,
                    }
                };
                per_level.push(Fusion {
                    align,
                    aff: Aff::new(&mut s.scope("aff"), dst_dim, config.aff_ratio)?,
                    src_cell: br.cell(lvl),
                    dst_cell: anchor.cell(lvl),
                });
            }
            fusions.push(per_level);
        }
        let decoder = Decoder::new(&mut init.scope("decoder"), &config)?;
        Ok(DbSwin {
            config,
            params,
            encoders,
            fusions,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn encoders(&self) -> &[Encoder] {
        &self.encoders
    }

    pub fn fusions(&self) -> &[Vec<Fusion>] {
        &self.fusions
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    /// `[1, H, W]` logits for a `[Cin, H, W]` image.
    pub fn forward(&self, tape: &mut Tape, image: &Tensor) -> Result<Var> {
        Ok(self.forward_trace(tape, image)?.logits)
    }

    pub fn forward_trace(&self, tape: &mut Tape, image: &Tensor) -> Result<ForwardTrace> {
        let (h, w) = match *image.shape() {
            [c, h, w] if c == self.config.in_channels => (h, w),
            ref s => {
                return Err(Error::Config(format!(
                    "expected a [{}, H, W] image, got {s:?}",
                    self.config.in_channels
                )))
            }
        };
        let ps = &self.params;
        let img = tape.constant(image.clone());
        let branch_levels: Vec<Vec<Var>> = self
            .encoders
            .iter()
            .map(|e| Ok(e.forward(tape, ps, img)?.levels))
            .collect::<Result<_>>()?;

        let mut fused = branch_levels[0].clone();
        let mut aligned = Vec::with_capacity(self.fusions.len());
        for (b, per_level) in self.fusions.iter().enumerate() {
            let mut al = Vec::with_capacity(NUM_STAGES);
            for (lvl, f) in per_level.iter().enumerate() {
                let (th, tw) = (tape.shape(fused[lvl])[0], tape.shape(fused[lvl])[1]);
                let a = f.align(tape, ps, branch_levels[b + 1][lvl], th, tw)?;
                fused[lvl] = f.aff.fuse(tape, ps, fused[lvl], a)?;
                al.push(a);
            }
            aligned.push(al);
        }

        let mut decoder = Vec::new();
        let out = self
            .decoder
            .forward(tape, ps, fused[NUM_STAGES - 1], &fused[..NUM_STAGES - 1], &mut decoder)?;
        let out = crop_grid(tape, out, h, w)?;
        let logits = tape.reshape(out, &[1, h, w])?;
        Ok(ForwardTrace {
            branch_levels,
            aligned,
            fused,
            decoder,
            logits,
        })
    }
}
