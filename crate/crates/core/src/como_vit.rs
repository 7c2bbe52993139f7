//! Local-to-global window attention block, its ablation variants, and the
//! stage-2 decoder.
//!
//! All feature maps are `[H, W, c]`. Windows are `w × w` tiles in row-major
//! order; a window's pixels are flattened row-major into `m = w²` tokens.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{hwc_dims, hwc_to_nchw, nchw_to_hwc, Conv, DropPath, LayerNorm, Linear, TransformerLayer};
use crate::tensor::{Init, ParamId, ParamStore, Real, Tensor};

/// Tiling of an `H × W` map into `w × w` windows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowGrid {
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub rows: usize,
    pub cols: usize,
}

impl WindowGrid {
    pub fn new(height: usize, width: usize, window: usize) -> Result<Self> {
        if window == 0 || !height.is_multiple_of(window) || !width.is_multiple_of(window) {
            return Err(Error::shape(
                "window_grid",
                format!("{height}x{width} is not divisible into {window}x{window} windows"),
            ));
        }
        Ok(WindowGrid {
            height,
            width,
            window,
            rows: height / window,
            cols: width / window,
        })
    }

    /// Number of windows `n`.
    pub fn count(&self) -> usize {
        self.rows * self.cols
    }

    /// Pixels per window `m`.
    pub fn pixels(&self) -> usize {
        self.window * self.window
    }

    /// `(window index, local row, local col)` of image pixel `(y, x)`.
    pub fn locate(&self, y: usize, x: usize) -> (usize, usize, usize) {
        let w = self.window;
        ((y / w) * self.cols + x / w, y % w, x % w)
    }

    /// Image coordinates of local pixel `(ly, lx)` of window `index`.
    pub fn pixel(&self, index: usize, ly: usize, lx: usize) -> (usize, usize) {
        let w = self.window;
        ((index / self.cols) * w + ly, (index % self.cols) * w + lx)
    }

    /// For every element of the partitioned layout, its flat offset in the
    /// `[H, W, c]` image.
    fn partition_index(&self, channels: usize) -> Vec<usize> {
        let w = self.window;
        let mut idx = Vec::with_capacity(self.height * self.width * channels);
        for win in 0..self.count() {
            for ly in 0..w {
                for lx in 0..w {
                    let (y, x) = self.pixel(win, ly, lx);
                    let base = (y * self.width + x) * channels;
                    idx.extend(base..base + channels);
                }
            }
        }
        idx
    }

    fn merge_index(&self, channels: usize) -> Vec<usize> {
        let part = self.partition_index(channels);
        let mut idx = vec![0; part.len()];
        for (p, &img) in part.iter().enumerate() {
            idx[img] = p;
        }
        idx
    }
}

/// `[H, W, c] -> [n, w, w, c]`.
pub fn window_partition<T: Real>(f: &Tensor<T>, window: usize) -> Result<(Tensor<T>, WindowGrid)> {
    let [h, w, c] = hwc_dims(f, "window_partition")?;
    let grid = WindowGrid::new(h, w, window)?;
    let out = f.gather(grid.partition_index(c).into(), vec![grid.count(), window, window, c])?;
    Ok((out, grid))
}

/// Inverse of [`window_partition`]. Accepts `[n, w, w, c]` or `[n, m, c]`.
pub fn window_merge<T: Real>(windows: &Tensor<T>, grid: &WindowGrid) -> Result<Tensor<T>> {
    let s = windows.shape();
    let (n, m) = (grid.count(), grid.pixels());
    let c = match *s {
        [a, b, d, c] if a == n && b == grid.window && d == grid.window => c,
        [a, b, c] if a == n && b == m => c,
        _ => {
            return Err(Error::shape(
                "window_merge",
                format!("{s:?} does not match a {}x{} grid of {}x{} windows", grid.rows, grid.cols, grid.window, grid.window),
            ))
        }
    };
    windows.gather(grid.merge_index(c).into(), vec![grid.height, grid.width, c])
}

/// Reflect-pad `[H, W, c]` at the bottom and right edge.
pub fn reflect_pad<T: Real>(x: &Tensor<T>, pad_h: usize, pad_w: usize) -> Result<Tensor<T>> {
    let [h, w, c] = hwc_dims(x, "reflect_pad")?;
    if pad_h == 0 && pad_w == 0 {
        return Ok(x.clone());
    }
    let reflect = |i: usize, n: usize| -> usize {
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let r = i % period;
        if r < n {
            r
        } else {
            period - r
        }
    };
    let (hp, wp) = (h + pad_h, w + pad_w);
    let mut idx = Vec::with_capacity(hp * wp * c);
    for y in 0..hp {
        let sy = reflect(y, h);
        for xx in 0..wp {
            let base = (sy * w + reflect(xx, w)) * c;
            idx.extend(base..base + c);
        }
    }
    x.gather(idx.into(), vec![hp, wp, c])
}

/// Top-left `h × w` region of `[H, W, c]`.
pub fn crop<T: Real>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let [hh, ww, c] = hwc_dims(x, "crop")?;
    if h > hh || w > ww || h == 0 || w == 0 {
        return Err(Error::shape("crop", format!("cannot crop {hh}x{ww} to {h}x{w}")));
    }
    if h == hh && w == ww {
        return Ok(x.clone());
    }
    let mut idx = Vec::with_capacity(h * w * c);
    for y in 0..h {
        let base = y * ww * c;
        idx.extend(base..base + w * c);
    }
    x.gather(idx.into(), vec![h, w, c])
}

/// Which parts of the block are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AblationVariant {
    /// No local attention: pixel embeddings feed the window embedding directly.
    A1,
    /// No global attention: output is the merged local/conv combination.
    A2,
    /// Global attention over conv-branch windows, local output added to the
    /// window embedding as a bypass.
    A3,
    /// Full local-to-global block.
    A4,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [Self::A1, Self::A2, Self::A3, Self::A4];

    pub fn describe(self) -> &'static str {
        match self {
            Self::A1 => "no local attention",
            Self::A2 => "no global attention",
            Self::A3 => "local bypass into global",
            Self::A4 => "local-to-global",
        }
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A1" => Ok(Self::A1),
            "A2" => Ok(Self::A2),
            "A3" => Ok(Self::A3),
            "A4" => Ok(Self::A4),
            _ => Err(Error::Config(format!("unknown attention variant `{s}` (expected A1, A2, A3 or A4)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockConfig {
    pub channels: usize,
    pub heads: usize,
    pub window: usize,
    /// Width of the window tokens.
    pub global_dim: usize,
    pub global_heads: usize,
    pub mlp_ratio: usize,
    /// Side of the window grid the window-position table is sized for.
    pub pos_grid: usize,
}

impl BlockConfig {
    pub fn new(channels: usize, heads: usize, window: usize, pos_grid: usize) -> Self {
        BlockConfig {
            channels,
            heads,
            window,
            global_dim: 4 * channels,
            global_heads: heads,
            mlp_ratio: 4,
            pos_grid: pos_grid.max(1),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConvSeBranch {
    pub norm: LayerNorm,
    pub conv: Conv,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Window-level stage: embedding, transformer and back-projection.
#[derive(Clone, Debug)]
pub struct GlobalStage {
    pub embed: Linear,
    /// Extra embedding for the local bypass of [`AblationVariant::A3`].
    pub embed_local: Option<Linear>,
    pub win_pos: ParamId,
    pub transformer: TransformerLayer,
    pub back: Linear,
}

#[derive(Clone, Debug)]
pub struct LocalStage {
    pub pixel_embed: Linear,
    pub pos: ParamId,
    /// Absent in [`AblationVariant::A1`].
    pub transformer: Option<TransformerLayer>,
}

#[derive(Clone, Debug)]
pub struct ComoVitBlock {
    pub variant: AblationVariant,
    pub config: BlockConfig,
    pub local: LocalStage,
    pub conv: ConvSeBranch,
    /// Absent in [`AblationVariant::A2`].
    pub global: Option<GlobalStage>,
}

#[derive(Clone, Debug)]
pub struct BlockOutput<T: Real = f32> {
    pub features: Tensor<T>,
    /// `[n, heads, m, m]`, when the local attention branch ran.
    pub local_attention: Option<Tensor<T>>,
    /// `[1, heads, n, n]`, when the global attention branch ran.
    pub global_attention: Option<Tensor<T>>,
}

/// Local/conv combination before the window-level step.
#[derive(Clone, Debug)]
pub struct LocalOutput<T: Real = f32> {
    /// Conv branch in window layout `[n, m, c]`.
    pub q: Tensor<T>,
    /// Local branch `[n, m, c]`.
    pub y: Tensor<T>,
    /// `Q + Y`.
    pub combined: Tensor<T>,
    pub attention: Option<Tensor<T>>,
}

/// Build a block of the given variant.
pub fn make_ablation<T: Real>(
    variant: AblationVariant,
    config: &BlockConfig,
    ps: &mut ParamStore<T>,
    name: &str,
    rng: &mut ChaCha8Rng,
) -> Result<ComoVitBlock> {
    ComoVitBlock::new(ps, name, config.clone(), variant, rng)
}

fn small_normal(rng: &mut ChaCha8Rng) -> Init {
    use rand::Rng;
    Init::Normal {
        mean: 0.0,
        std: 0.02,
        seed: rng.random(),
    }
}

impl ComoVitBlock {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        name: &str,
        config: BlockConfig,
        variant: AblationVariant,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let c = config.channels;
        let m = config.window * config.window;
        if config.heads == 0 || !c.is_multiple_of(config.heads) {
            return Err(Error::Config(format!(
                "heads ({}) must divide embed_dim ({c})",
                config.heads
            )));
        }
        let local = LocalStage {
            pixel_embed: Linear::new(ps, &format!("{name}.local.pixel_embed"), c, c, true, rng)?,
            pos: ps.add_init(format!("{name}.local.pos"), &[m, c], small_normal(rng))?,
            transformer: match variant {
                AblationVariant::A1 => None,
                _ => Some(TransformerLayer::new(
                    ps,
                    &format!("{name}.local.layer"),
                    c,
                    config.heads,
                    config.mlp_ratio,
                    rng,
                )?),
            },
        };
        let squeeze = (c / 4).max(1);
        let conv = ConvSeBranch {
            norm: LayerNorm::new(ps, &format!("{name}.conv.norm"), c)?,
            conv: Conv::new(ps, &format!("{name}.conv.conv"), c, c, 3, rng)?,
            fc1: Linear::new(ps, &format!("{name}.conv.se_fc1"), c, squeeze, true, rng)?,
            fc2: Linear::new(ps, &format!("{name}.conv.se_fc2"), squeeze, c, true, rng)?,
        };
        let global = match variant {
            AblationVariant::A2 => None,
            _ => {
                let d = config.global_dim;
                let g = config.pos_grid;
                Some(GlobalStage {
                    embed: Linear::new(ps, &format!("{name}.global.embed"), m * c, d, true, rng)?,
                    embed_local: match variant {
                        AblationVariant::A3 => Some(Linear::new(
                            ps,
                            &format!("{name}.global.embed_local"),
                            m * c,
                            d,
                            false,
                            rng,
                        )?),
                        _ => None,
                    },
                    win_pos: ps.add_init(format!("{name}.global.win_pos"), &[g, g, d], small_normal(rng))?,
                    transformer: TransformerLayer::new(
                        ps,
                        &format!("{name}.global.layer"),
                        d,
                        config.global_heads,
                        config.mlp_ratio,
                        rng,
                    )?,
                    back: Linear::new(ps, &format!("{name}.global.back"), d, m * c, true, rng)?,
                })
            }
        };
        Ok(ComoVitBlock {
            variant,
            config,
            local,
            conv,
            global,
        })
    }

    /// Pixel embedding plus location embedding, `[n, m, c]`.
    pub fn pixel_sequence<T: Real>(&self, ps: &ParamStore<T>, windows: &Tensor<T>) -> Result<Tensor<T>> {
        self.local.pixel_embed.forward(ps, windows)?.add(ps.get(self.local.pos))
    }

    /// Pre-norm transformer applied independently to every window.
    pub fn local_transformer<T: Real>(
        &self,
        ps: &ParamStore<T>,
        x: &Tensor<T>,
        drop: &mut DropPath,
    ) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        match &self.local.transformer {
            Some(layer) => layer.forward(ps, x, drop),
            None => Ok((x.clone(), None)),
        }
    }

    /// `F' = Conv(LN(F))`, `F_conv = F' ⊙ SE(F')`.
    pub fn conv_se_branch<T: Real>(&self, ps: &ParamStore<T>, f: &Tensor<T>) -> Result<Tensor<T>> {
        let [_, _, c] = hwc_dims(f, "conv_se_branch")?;
        let br = &self.conv;
        let x = hwc_to_nchw(&br.norm.forward(ps, f)?)?;
        let y = x.conv2d(ps.get(br.conv.weight), Some(ps.get(br.conv.bias)), 1, 1)?;
        let pooled = y.global_avg_pool()?;
        let gate = br.fc2.forward(ps, &br.fc1.forward(ps, &pooled)?.relu())?.sigmoid();
        nchw_to_hwc(&y)?.mul(&gate.reshape(&[c])?)
    }

    /// Local branch, conv branch and their sum in window layout.
    pub fn local_stage<T: Real>(
        &self,
        ps: &ParamStore<T>,
        f: &Tensor<T>,
        drop: &mut DropPath,
    ) -> Result<(LocalOutput<T>, WindowGrid)> {
        let [_, _, c] = hwc_dims(f, "como_vit_block")?;
        if c != self.config.channels {
            return Err(Error::shape(
                "como_vit_block",
                format!("input has {c} channels, block expects {}", self.config.channels),
            ));
        }
        let (p, grid) = window_partition(f, self.config.window)?;
        let (n, m) = (grid.count(), grid.pixels());
        let p = p.reshape(&[n, m, c])?;
        let x = self.pixel_sequence(ps, &p)?;
        let (y, attention) = self.local_transformer(ps, &x, drop)?;
        let (q, _) = window_partition(&self.conv_se_branch(ps, f)?, self.config.window)?;
        let q = q.reshape(&[n, m, c])?;
        let combined = combine_branches(&q, &y)?;
        Ok((
            LocalOutput {
                q,
                y,
                combined,
                attention,
            },
            grid,
        ))
    }

    /// Window-position embeddings for `grid`, resampled nearest-neighbour
    /// from the stored table when the grid size differs.
    pub fn window_positions<T: Real>(
        &self,
        ps: &ParamStore<T>,
        stage: &GlobalStage,
        grid: &WindowGrid,
    ) -> Result<Tensor<T>> {
        let table = ps.get(stage.win_pos);
        let g = self.config.pos_grid;
        let d = self.config.global_dim;
        if grid.rows == g && grid.cols == g {
            return table.reshape(&[g * g, d]);
        }
        let mut idx = Vec::with_capacity(grid.count() * d);
        for r in 0..grid.rows {
            let sr = r * g / grid.rows;
            for cc in 0..grid.cols {
                let sc = cc * g / grid.cols;
                let base = (sr * g + sc) * d;
                idx.extend(base..base + d);
            }
        }
        table.gather(Rc::from(idx), vec![grid.count(), d])
    }

    /// `u_i = FC(Vec(C_i)) + win_pos_i`, `[n, d_g]`.
    pub fn window_embed<T: Real>(
        &self,
        ps: &ParamStore<T>,
        stage: &GlobalStage,
        c: &Tensor<T>,
        grid: &WindowGrid,
    ) -> Result<Tensor<T>> {
        let n = grid.count();
        let flat = c.reshape(&[n, c.numel() / n])?;
        stage
            .embed
            .forward(ps, &flat)?
            .add(&self.window_positions(ps, stage, grid)?)
    }

    /// Transformer over window tokens, projected back into window layout
    /// `[n, m, c]`.
    pub fn global_transformer<T: Real>(
        &self,
        ps: &ParamStore<T>,
        stage: &GlobalStage,
        u: &Tensor<T>,
        drop: &mut DropPath,
    ) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let (n, d) = (u.shape()[0], u.shape()[1]);
        let (z, attn) = stage.transformer.forward(ps, &u.reshape(&[1, n, d])?, drop)?;
        let z = stage.back.forward(ps, &z.reshape(&[n, d])?)?;
        let m = self.config.window * self.config.window;
        Ok((z.reshape(&[n, m, self.config.channels])?, attn))
    }

    pub fn forward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        f: &Tensor<T>,
        drop: &mut DropPath,
    ) -> Result<BlockOutput<T>> {
        let (local, grid) = self.local_stage(ps, f, drop)?;
        let Some(stage) = &self.global else {
            return Ok(BlockOutput {
                features: window_merge(&local.combined, &grid)?,
                local_attention: local.attention,
                global_attention: None,
            });
        };
        let (base, u) = match &stage.embed_local {
            Some(embed_local) => {
                let n = grid.count();
                let u = self.window_embed(ps, stage, &local.q, &grid)?;
                let bypass = embed_local.forward(ps, &local.y.reshape(&[n, local.y.numel() / n])?)?;
                (local.q.clone(), u.add(&bypass)?)
            }
            None => {
                let u = self.window_embed(ps, stage, &local.combined, &grid)?;
                (local.combined.clone(), u)
            }
        };
        let (z, global_attention) = self.global_transformer(ps, stage, &u, drop)?;
        Ok(BlockOutput {
            features: window_merge(&base.add(&z)?, &grid)?,
            local_attention: local.attention,
            global_attention,
        })
    }
}

/// `C = Q + Y`.
pub fn combine_branches<T: Real>(q: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    if q.shape() != y.shape() {
        return Err(Error::shape(
            "combine_branches",
            format!("{:?} vs {:?}", q.shape(), y.shape()),
        ));
    }
    q.add(y)
}

/// Stage-2 decoder: one 3×3 convolution to RGB.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub conv: Conv,
}

/// Initial decoder output level.
pub const DECODER_BIAS: f64 = 0.5;

impl Decoder {
    /// Weights start at a tenth of the usual `±1/sqrt(fan_in)` range and the
    /// bias at [`DECODER_BIAS`], so `R_s2` starts near mid-gray instead of
    /// straddling zero, where the local gamma path clamps.
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let bound = 0.1 / ((channels * 9) as f64).sqrt();
        let w = Init::Uniform {
            lo: -bound,
            hi: bound,
            seed: rng.random(),
        };
        Ok(Decoder {
            conv: Conv::with_init(ps, &format!("{name}.conv"), channels, 3, 3, w, Init::Constant(DECODER_BIAS))?,
        })
    }

    pub fn decode<T: Real>(&self, ps: &ParamStore<T>, f: &Tensor<T>) -> Result<Tensor<T>> {
        self.conv.forward(ps, f)
    }
}
