//! Swin Transformer block primitives.
//!
//! Feature maps are channels-last `[h, w, C]` tensors whose tokens are laid
//! out row-major over the patch grid.

use dbswin_tensor::{ParamId, ParamStore, Tape, Tensor, Var, ZERO_INDEX};

use crate::error::{Error, Result};
use crate::layers::{LayerNorm, Linear, ParamInit};

/// Logit offset that keeps masked query/key pairs out of the softmax.
pub const MASK_VALUE: f64 = -1e9;

/// Window geometry for one stage: window side `window`, shift
/// `floor(window / 2)`, and the real (unpadded) patch grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowConfig {
    pub window: usize,
    pub shift: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl WindowConfig {
    pub fn new(window: usize, grid_h: usize, grid_w: usize) -> Result<Self> {
        if window == 0 || grid_h == 0 || grid_w == 0 {
            return Err(Error::Config(format!(
                "window {window} and grid {grid_h}x{grid_w} must be positive"
            )));
        }
        Ok(WindowConfig {
            window,
            shift: window / 2,
            grid_h,
            grid_w,
        })
    }

    /// Grid height after right/bottom zero padding to a multiple of the window.
    pub fn padded_h(&self) -> usize {
        self.grid_h.div_ceil(self.window) * self.window
    }

    pub fn padded_w(&self) -> usize {
        self.grid_w.div_ceil(self.window) * self.window
    }

    pub fn is_padded(&self) -> bool {
        self.padded_h() != self.grid_h || self.padded_w() != self.grid_w
    }

    pub fn num_windows(&self) -> usize {
        (self.padded_h() / self.window) * (self.padded_w() / self.window)
    }
}

/// `[M², M²]` map from (query, key) window positions to rows of the
/// `(2M−1)²`-entry relative-position-bias table.
pub fn relative_position_index(window: usize) -> Vec<usize> {
    let n = window * window;
    let span = 2 * window - 1;
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        let (yi, xi) = (i / window, i % window);
        for j in 0..n {
            let (yj, xj) = (j / window, j % window);
            let dy = yi + window - 1 - yj;
            let dx = xi + window - 1 - xj;
            idx.push(dy * span + dx);
        }
    }
    idx
}

fn check_grid(tape: &Tape, x: Var, op: &str) -> Result<(usize, usize, usize)> {
    match *tape.shape(x) {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(Error::Config(format!("{op}: expected [h, w, C], got {s:?}"))),
    }
}

/// `[Hp, Wp, C] → [num_windows, M², C]`, windows and in-window tokens both
/// row-major.
pub fn window_partition(tape: &mut Tape, x: Var, window: usize) -> Result<Var> {
    let (h, w, c) = check_grid(tape, x, "window_partition")?;
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::Config(format!(
            "window_partition: grid {h}x{w} is not divisible by window {window}"
        )));
    }
    let (nh, nw) = (h / window, w / window);
    let mut index = Vec::with_capacity(h * w * c);
    for wy in 0..nh {
        for wx in 0..nw {
            for py in 0..window {
                for px in 0..window {
                    let base = ((wy * window + py) * w + wx * window + px) * c;
                    index.extend(base..base + c);
                }
            }
        }
    }
    Ok(tape.gather(x, index, &[nh * nw, window * window, c])?)
}

/// Inverse of [`window_partition`].
pub fn window_reverse(tape: &mut Tape, windows: Var, h: usize, w: usize) -> Result<Var> {
    let (nwin, n, c) = match *tape.shape(windows) {
        [a, b, c] => (a, b, c),
        ref s => {
            return Err(Error::Config(format!(
                "window_reverse: expected [nW, M², C], got {s:?}"
            )))
        }
    };
    let window = (n as f64).sqrt().round() as usize;
    if window * window != n
        || !h.is_multiple_of(window)
        || !w.is_multiple_of(window)
        || nwin != (h / window) * (w / window)
    {
        return Err(Error::Config(format!(
            "window_reverse: {nwin} windows of {n} tokens do not tile {h}x{w}"
        )));
    }
    let nw = w / window;
    let mut index = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            let win = (y / window) * nw + x / window;
            let pos = (y % window) * window + x % window;
            let base = (win * n + pos) * c;
            index.extend(base..base + c);
        }
    }
    Ok(tape.gather(windows, index, &[h, w, c])?)
}

/// Toroidal shift: `out[i][j] = x[(i + dy) mod h][(j + dx) mod w]`.
/// Positive offsets move content toward the top-left.
pub fn cyclic_shift(tape: &mut Tape, x: Var, dy: isize, dx: isize) -> Result<Var> {
    let (h, w, c) = check_grid(tape, x, "cyclic_shift")?;
    let mut index = Vec::with_capacity(h * w * c);
    for i in 0..h {
        let si = (i as isize + dy).rem_euclid(h as isize) as usize;
        for j in 0..w {
            let sj = (j as isize + dx).rem_euclid(w as isize) as usize;
            let base = (si * w + sj) * c;
            index.extend(base..base + c);
        }
    }
    Ok(tape.gather(x, index, &[h, w, c])?)
}

/// Zero-pads `[h, w, C]` on the right and bottom to `[ph, pw, C]`.
pub fn pad_grid(tape: &mut Tape, x: Var, ph: usize, pw: usize) -> Result<Var> {
    let (h, w, c) = check_grid(tape, x, "pad_grid")?;
    if ph < h || pw < w {
        return Err(Error::Config(format!("pad_grid: {h}x{w} does not fit in {ph}x{pw}")));
    }
    if (ph, pw) == (h, w) {
        return Ok(x);
    }
    let mut index = Vec::with_capacity(ph * pw * c);
    for i in 0..ph {
        for j in 0..pw {
            if i < h && j < w {
                let base = (i * w + j) * c;
                index.extend(base..base + c);
            } else {
                index.extend(std::iter::repeat_n(ZERO_INDEX, c));
            }
        }
    }
    Ok(tape.gather(x, index, &[ph, pw, c])?)
}

/// Keeps the top-left `[h, w, C]` of a larger grid.
pub fn crop_grid(tape: &mut Tape, x: Var, h: usize, w: usize) -> Result<Var> {
    let (ph, pw, c) = check_grid(tape, x, "crop_grid")?;
    if h > ph || w > pw {
        return Err(Error::Config(format!("crop_grid: {h}x{w} exceeds {ph}x{pw}")));
    }
    if (ph, pw) == (h, w) {
        return Ok(x);
    }
    let mut index = Vec::with_capacity(h * w * c);
    for i in 0..h {
        for j in 0..w {
            let base = (i * pw + j) * c;
            index.extend(base..base + c);
        }
    }
    Ok(tape.gather(x, index, &[h, w, c])?)
}

fn region(i: usize, size: usize, window: usize, shift: usize) -> usize {
    if i < size - window {
        0
    } else if i < size - shift {
        1
    } else {
        2
    }
}

fn mask_from_labels(labels: &[usize], grid_w: usize, cfg_window: usize, nwin: usize) -> Tensor {
    let n = cfg_window * cfg_window;
    let nw = grid_w / cfg_window;
    let mut data = Vec::with_capacity(nwin * n * n);
    for win in 0..nwin {
        let (wy, wx) = (win / nw, win % nw);
        let label = |p: usize| {
            let y = wy * cfg_window + p / cfg_window;
            let x = wx * cfg_window + p % cfg_window;
            labels[y * grid_w + x]
        };
        for i in 0..n {
            let li = label(i);
            for j in 0..n {
                data.push(if li == label(j) { 0.0 } else { MASK_VALUE });
            }
        }
    }
    Tensor::new([nwin, n, n], data).expect("mask shape")
}

/// SW-MSA mask on a (padded) `grid_h × grid_w` grid in the shifted frame.
///
/// Each position is labelled by the 3×3 partition the shift boundaries
/// induce; pairs in one window with different labels get [`MASK_VALUE`].
pub fn shift_attention_mask(grid_h: usize, grid_w: usize, window: usize, shift: usize) -> Result<Tensor> {
    if shift == 0 || shift >= window {
        return Err(Error::Config(format!(
            "shift_attention_mask: shift {shift} must lie in (0, {window}); use unshifted attention instead"
        )));
    }
    if !grid_h.is_multiple_of(window) || !grid_w.is_multiple_of(window) {
        return Err(Error::Config(format!(
            "shift_attention_mask: grid {grid_h}x{grid_w} is not divisible by window {window}"
        )));
    }
    let labels: Vec<usize> = (0..grid_h * grid_w)
        .map(|p| region(p / grid_w, grid_h, window, shift) * 3 + region(p % grid_w, grid_w, window, shift))
        .collect();
    let nwin = (grid_h / window) * (grid_w / window);
    Ok(mask_from_labels(&labels, grid_w, window, nwin))
}

/// Mask for one block: shift regions (when `shifted`) combined with the
/// padding policy that keeps real and padded positions apart. `None` when
/// neither applies.
pub fn block_attention_mask(cfg: &WindowConfig, shifted: bool) -> Option<Tensor> {
    let shifted = shifted && cfg.shift > 0;
    if !shifted && !cfg.is_padded() {
        return None;
    }
    let (ph, pw) = (cfg.padded_h(), cfg.padded_w());
    let s = if shifted { cfg.shift } else { 0 };
    let labels: Vec<usize> = (0..ph * pw)
        .map(|p| {
            let (i, j) = (p / pw, p % pw);
            let shift_label = if shifted {
                region(i, ph, cfg.window, s) * 3 + region(j, pw, cfg.window, s)
            } else {
                0
            };
            let (oi, oj) = ((i + s) % ph, (j + s) % pw);
            let real = oi < cfg.grid_h && oj < cfg.grid_w;
            shift_label * 2 + usize::from(real)
        })
        .collect();
    Some(mask_from_labels(&labels, pw, cfg.window, cfg.num_windows()))
}

/// W-MSA / SW-MSA projection weights and relative position bias.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub num_heads: usize,
    pub dim: usize,
    pub window: usize,
    pub qkv: Linear,
    pub proj: Linear,
    pub bias_table: ParamId,
    pub bias_index: Vec<usize>,
}

/// Output of [`window_attention`] plus the post-softmax weights
/// `[nW, heads, M², M²]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Var,
}

impl AttentionParams {
    pub fn new(init: &mut ParamInit<'_>, dim: usize, num_heads: usize, window: usize) -> Result<Self> {
        if num_heads == 0 || !dim.is_multiple_of(num_heads) {
            return Err(Error::Config(format!(
                "channel dim {dim} is not divisible into {num_heads} heads"
            )));
        }
        let span = 2 * window - 1;
        Ok(AttentionParams {
            num_heads,
            dim,
            window,
            qkv: Linear::new(init, "qkv", dim, 3 * dim, true)?,
            proj: Linear::new(init, "proj", dim, dim, true)?,
            bias_table: init.trunc_normal("rel_bias", &[span * span, num_heads], 0.02)?,
            bias_index: relative_position_index(window),
        })
    }
}

/// Multi-head self-attention within each window:
/// `softmax(QKᵀ/√d + B + mask)·V`, then the output projection.
pub fn window_attention(
    tape: &mut Tape,
    ps: &ParamStore,
    windows: Var,
    params: &AttentionParams,
    mask: Option<&Tensor>,
) -> Result<AttentionOutput> {
    let (nwin, n, c) = match *tape.shape(windows) {
        [a, b, c] => (a, b, c),
        ref s => {
            return Err(Error::Config(format!(
                "window_attention: expected [nW, M², C], got {s:?}"
            )))
        }
    };
    let heads = params.num_heads;
    if c != params.dim || n != params.window * params.window {
        return Err(Error::Config(format!(
            "window_attention: input [{nwin}, {n}, {c}] does not match {heads} heads over dim {} with window {}",
            params.dim, params.window
        )));
    }
    let d = c / heads;
    let qkv = params.qkv.forward(tape, ps, windows)?;

    // q, v: [nW, heads, n, d]; kᵀ: [nW, heads, d, n]
    let gather_part = |part: usize, transpose: bool| {
        let mut idx = Vec::with_capacity(nwin * n * c);
        for w in 0..nwin {
            for h in 0..heads {
                if transpose {
                    for dd in 0..d {
                        for t in 0..n {
                            idx.push((w * n + t) * 3 * c + part * c + h * d + dd);
                        }
                    }
                } else {
                    for t in 0..n {
                        for dd in 0..d {
                            idx.push((w * n + t) * 3 * c + part * c + h * d + dd);
                        }
                    }
                }
            }
        }
        idx
    };
    let q = tape.gather(qkv, gather_part(0, false), &[nwin, heads, n, d])?;
    let kt = tape.gather(qkv, gather_part(1, true), &[nwin, heads, d, n])?;
    let v = tape.gather(qkv, gather_part(2, false), &[nwin, heads, n, d])?;

    let logits = tape.matmul(q, kt)?;
    let mut logits = tape.scale(logits, 1.0 / (d as f64).sqrt());

    let table = tape.param(ps, params.bias_table);
    let bias_idx: Vec<usize> = (0..heads)
        .flat_map(|h| params.bias_index.iter().map(move |&r| r * heads + h))
        .collect();
    let bias = tape.gather(table, bias_idx, &[heads, n, n])?;
    logits = tape.add(logits, bias)?;

    if let Some(mask) = mask {
        if mask.shape() != [nwin, n, n] {
            return Err(Error::Config(format!(
                "window_attention: mask {:?} does not match [{nwin}, {n}, {n}]",
                mask.shape()
            )));
        }
        let m = tape.constant(mask.clone().reshape([nwin, 1, n, n])?);
        logits = tape.add(logits, m)?;
    }
    let weights = tape.softmax_lastdim(logits)?;
    let out = tape.matmul(weights, v)?;
    let mut idx = Vec::with_capacity(nwin * n * c);
    for w in 0..nwin {
        for t in 0..n {
            for h in 0..heads {
                let base = ((w * heads + h) * n + t) * d;
                idx.extend(base..base + d);
            }
        }
    }
    let merged = tape.gather(out, idx, &[nwin, n, c])?;
    let output = params.proj.forward(tape, ps, merged)?;
    Ok(AttentionOutput { output, weights })
}

/// One pre-norm Swin block: attention and MLP sublayers with residuals.
#[derive(Clone, Debug)]
pub struct SwinBlock {
    pub norm1: LayerNorm,
    pub attn: AttentionParams,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl SwinBlock {
    pub fn new(
        init: &mut ParamInit<'_>,
        dim: usize,
        num_heads: usize,
        window: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        Ok(SwinBlock {
            norm1: LayerNorm::new(init, "norm1", dim)?,
            attn: AttentionParams::new(&mut init.scope("attn"), dim, num_heads, window)?,
            norm2: LayerNorm::new(init, "norm2", dim)?,
            fc1: Linear::new(init, "fc1", dim, mlp_ratio * dim, true)?,
            fc2: Linear::new(init, "fc2", mlp_ratio * dim, dim, true)?,
        })
    }

    /// `ẑ = (S)W-MSA(LN(z)) + z; z' = MLP(LN(ẑ)) + ẑ` on a `[h, w, C]` grid.
    pub fn forward(&self, tape: &mut Tape, ps: &ParamStore, x: Var, shifted: bool) -> Result<Var> {
        let (h, w, _) = check_grid(tape, x, "swin_block")?;
        let cfg = WindowConfig::new(self.attn.window, h, w)?;
        let attn = self.attention_sublayer(tape, ps, x, &cfg, shifted)?;
        let x = tape.add(x, attn)?;
        let y = self.norm2.forward(tape, ps, x)?;
        let y = self.fc1.forward(tape, ps, y)?;
        let y = tape.gelu(y);
        let y = self.fc2.forward(tape, ps, y)?;
        Ok(tape.add(x, y)?)
    }

    fn attention_sublayer(
        &self,
        tape: &mut Tape,
        ps: &ParamStore,
        x: Var,
        cfg: &WindowConfig,
        shifted: bool,
    ) -> Result<Var> {
        let shift = if shifted { cfg.shift as isize } else { 0 };
        let (ph, pw) = (cfg.padded_h(), cfg.padded_w());
        let y = self.norm1.forward(tape, ps, x)?;
        let mut y = pad_grid(tape, y, ph, pw)?;
        if shift != 0 {
            y = cyclic_shift(tape, y, shift, shift)?;
        }
        let windows = window_partition(tape, y, cfg.window)?;
        let mask = block_attention_mask(cfg, shifted);
        let att = window_attention(tape, ps, windows, &self.attn, mask.as_ref())?;
        let mut y = window_reverse(tape, att.output, ph, pw)?;
        if shift != 0 {
            y = cyclic_shift(tape, y, -shift, -shift)?;
        }
        crop_grid(tape, y, cfg.grid_h, cfg.grid_w)
    }
}

/// A W-MSA block followed by an SW-MSA block.
pub fn swin_block_pair(
    tape: &mut Tape,
    ps: &ParamStore,
    x: Var,
    regular: &SwinBlock,
    shifted: &SwinBlock,
) -> Result<Var> {
    let y = regular.forward(tape, ps, x, false)?;
    shifted.forward(tape, ps, y, true)
}

/// Zero-pads a `[C, H, W]` image on the right and bottom.
pub fn pad_image(tape: &mut Tape, image: Var, ph: usize, pw: usize) -> Result<Var> {
    let (c, h, w) = match *tape.shape(image) {
        [c, h, w] => (c, h, w),
        ref s => return Err(Error::Config(format!("expected a [C, H, W] image, got {s:?}"))),
    };
    if (ph, pw) == (h, w) {
        return Ok(image);
    }
    if ph < h || pw < w {
        return Err(Error::Config(format!("pad_image: {h}x{w} does not fit in {ph}x{pw}")));
    }
    let mut index = Vec::with_capacity(c * ph * pw);
    for ch in 0..c {
        for i in 0..ph {
            for j in 0..pw {
                index.push(if i < h && j < w {
                    (ch * h + i) * w + j
                } else {
                    ZERO_INDEX
                });
            }
        }
    }
    Ok(tape.gather(image, index, &[c, ph, pw])?)
}

/// Splits a `[Cin, H, W]` image into `S×S` patches, flattens each in
/// `(channel, row, col)` order and projects to `[H/S, W/S, C]`.
pub fn patch_embed(tape: &mut Tape, ps: &ParamStore, image: Var, patch: usize, proj: &Linear) -> Result<Var> {
    let (cin, h, w) = match *tape.shape(image) {
        [c, h, w] => (c, h, w),
        ref s => return Err(Error::Config(format!("expected a [C, H, W] image, got {s:?}"))),
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!(
            "patch_embed: image {h}x{w} is not divisible by patch size {patch}"
        )));
    }
    if proj.in_dim != cin * patch * patch {
        return Err(Error::Config(format!(
            "patch_embed: projection expects {} inputs, patches have {}",
            proj.in_dim,
            cin * patch * patch
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut index = Vec::with_capacity(cin * h * w);
    for gy in 0..gh {
        for gx in 0..gw {
            for ch in 0..cin {
                for py in 0..patch {
                    for px in 0..patch {
                        index.push((ch * h + gy * patch + py) * w + gx * patch + px);
                    }
                }
            }
        }
    }
    let patches = tape.gather(image, index, &[gh, gw, cin * patch * patch])?;
    proj.forward(tape, ps, patches)
}

/// Concatenates each 2×2 neighbourhood (top-left, top-right, bottom-left,
/// bottom-right) into `4C` channels and projects to `2C`.
pub fn patch_merge(tape: &mut Tape, ps: &ParamStore, x: Var, weight: ParamId) -> Result<Var> {
    let (h, w, c) = check_grid(tape, x, "patch_merge")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Config(format!("patch_merge: odd grid {h}x{w}")));
    }
    let mut index = Vec::with_capacity(h * w * c);
    for y in 0..h / 2 {
        for xx in 0..w / 2 {
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let base = ((2 * y + dy) * w + 2 * xx + dx) * c;
                index.extend(base..base + c);
            }
        }
    }
    let cat = tape.gather(x, index, &[h / 2, w / 2, 4 * c])?;
    let wv = tape.param(ps, weight);
    Ok(tape.matmul(cat, wv)?)
}

/// Patch expansion: projects `[h, w, Cin]` to `4·Cout` channels and
/// rearranges each token into a 2×2 block, giving `[2h, 2w, Cout]`.
pub fn patch_expand(tape: &mut Tape, ps: &ParamStore, x: Var, weight: ParamId) -> Result<Var> {
    let (h, w, _) = check_grid(tape, x, "patch_expand")?;
    let wv = tape.param(ps, weight);
    let y = tape.matmul(x, wv)?;
    let c4 = tape.shape(y)[2];
    if !c4.is_multiple_of(4) {
        return Err(Error::Config(format!(
            "patch_expand: {c4} output channels are not divisible by 4"
        )));
    }
    let cout = c4 / 4;
    let mut index = Vec::with_capacity(h * w * c4);
    for oy in 0..2 * h {
        for ox in 0..2 * w {
            let block = (oy % 2) * 2 + ox % 2;
            let base = ((oy / 2) * w + ox / 2) * c4 + block * cout;
            index.extend(base..base + cout);
        }
    }
    Ok(tape.gather(y, index, &[2 * h, 2 * w, cout])?)
}

/// Nearest-neighbour resampling between patch grids of different cell
/// sizes (in pixels), matching cell centres.
pub fn resample_nearest(
    tape: &mut Tape,
    x: Var,
    src_cell: usize,
    target_h: usize,
    target_w: usize,
    target_cell: usize,
) -> Result<Var> {
    let (h, w, c) = check_grid(tape, x, "resample_nearest")?;
    let src = |t: usize, limit: usize| ((2 * t * target_cell + target_cell) / (2 * src_cell)).min(limit - 1);
    let mut index = Vec::with_capacity(target_h * target_w * c);
    for y in 0..target_h {
        let sy = src(y, h);
        for xx in 0..target_w {
            let sx = src(xx, w);
            let base = (sy * w + sx) * c;
            index.extend(base..base + c);
        }
    }
    Ok(tape.gather(x, index, &[target_h, target_w, c])?)
}
