//! Window-based multi-head self-attention with cyclic shifts.
//!
//! Token grids are laid out as `[planes, rows, cols, channels]`. A pass over
//! a grid first pads it to whole windows, optionally rolls it by
//! `-shift` on both axes, cuts it into non-overlapping windows, runs
//! attention inside each window, and undoes the three steps. Pairs of tokens
//! that only share a window because of the torus wrap, and padding cells, are
//! excluded with an additive logit mask.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{maps, ParamStore, Tape, Var, ZERO};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Additive logit for blocked query/key pairs.
pub const MASK_VALUE: f64 = -1e9;
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub channels: usize,
    pub heads: usize,
    pub window: usize,
    #[serde(default = "default_true")]
    pub use_relative_bias: bool,
    pub mlp_ratio: f64,
}

fn default_true() -> bool {
    true
}

impl AttentionConfig {
    pub fn new(channels: usize, heads: usize, window: usize) -> Self {
        Self {
            channels,
            heads,
            window,
            use_relative_bias: true,
            mlp_ratio: 4.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "channels ({}) must be a positive multiple of heads ({})",
                self.channels, self.heads
            )));
        }
        if self.window == 0 {
            return Err(Error::Config("window size must be >= 1".into()));
        }
        if !(self.mlp_ratio > 0.0 && self.mlp_ratio.is_finite()) {
            return Err(Error::Config(format!("mlp_ratio must be > 0, got {}", self.mlp_ratio)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn hidden(&self) -> usize {
        ((self.channels as f64 * self.mlp_ratio).round() as usize).max(1)
    }
}

/// Independent 2-D token grids processed together.
#[derive(Clone, Debug, PartialEq)]
pub struct PlaneBatch {
    pub tokens: Tensor,
}

impl PlaneBatch {
    pub fn new(tokens: Tensor) -> Result<Self> {
        if tokens.ndim() != 4 {
            return Err(Error::shape(
                "plane_batch",
                format!("expected [planes, rows, cols, channels], got {:?}", tokens.shape()),
            ));
        }
        Ok(Self { tokens })
    }

    pub fn planes(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn rows(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn cols(&self) -> usize {
        self.tokens.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.tokens.shape()[3]
    }
}

/// Window layout of one attention pass over a `rows × cols` grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowGeometry {
    pub rows: usize,
    pub cols: usize,
    pub win_r: usize,
    pub win_c: usize,
    pub shift_r: usize,
    pub shift_c: usize,
}

impl WindowGeometry {
    /// Layout used inside a transformer pass: an axis no longer than `w` is
    /// covered by a single window of its own length and never shifted.
    pub fn for_pass(rows: usize, cols: usize, w: usize, shifted: bool) -> Self {
        let axis = |len: usize| {
            if len <= w {
                (len, 0)
            } else {
                (w, if shifted { w / 2 } else { 0 })
            }
        };
        let (win_r, shift_r) = axis(rows);
        let (win_c, shift_c) = axis(cols);
        Self {
            rows,
            cols,
            win_r,
            win_c,
            shift_r,
            shift_c,
        }
    }

    /// Square `w × w` windows with the same shift on both axes, no clamping.
    pub fn square(rows: usize, cols: usize, w: usize, shift: usize) -> Result<Self> {
        if w == 0 {
            return Err(Error::Config("window size must be >= 1".into()));
        }
        if shift >= w {
            return Err(Error::Config(format!("shift {shift} must be < window {w}")));
        }
        if rows == 0 || cols == 0 {
            return Err(Error::Config("plane extents must be >= 1".into()));
        }
        Ok(Self {
            rows,
            cols,
            win_r: w,
            win_c: w,
            shift_r: shift,
            shift_c: shift,
        })
    }

    pub fn padded_rows(&self) -> usize {
        self.rows.div_ceil(self.win_r) * self.win_r
    }

    pub fn padded_cols(&self) -> usize {
        self.cols.div_ceil(self.win_c) * self.win_c
    }

    pub fn windows_r(&self) -> usize {
        self.padded_rows() / self.win_r
    }

    pub fn windows_c(&self) -> usize {
        self.padded_cols() / self.win_c
    }

    /// Windows per plane.
    pub fn num_windows(&self) -> usize {
        self.windows_r() * self.windows_c()
    }

    pub fn tokens_per_window(&self) -> usize {
        self.win_r * self.win_c
    }

    pub fn has_padding(&self) -> bool {
        self.padded_rows() != self.rows || self.padded_cols() != self.cols
    }

    pub fn needs_mask(&self) -> bool {
        self.has_padding() || self.shift_r > 0 || self.shift_c > 0
    }

    /// Position in the padded, unshifted grid of rolled position `(pr, pc)`.
    pub fn source_of(&self, pr: usize, pc: usize) -> (usize, usize) {
        (
            (pr + self.shift_r) % self.padded_rows(),
            (pc + self.shift_c) % self.padded_cols(),
        )
    }

    /// Rolled position of padded-grid position `(r, c)`.
    pub fn rolled_of(&self, r: usize, c: usize) -> (usize, usize) {
        let (pr, pc) = (self.padded_rows(), self.padded_cols());
        ((r + pr - self.shift_r) % pr, (c + pc - self.shift_c) % pc)
    }

    /// `(window index within plane, token index within window)` of a rolled
    /// position.
    pub fn window_of(&self, pr: usize, pc: usize) -> (usize, usize) {
        let w = (pr / self.win_r) * self.windows_c() + pc / self.win_c;
        let t = (pr % self.win_r) * self.win_c + pc % self.win_c;
        (w, t)
    }

    fn rolled_of_window(&self, window: usize, token: usize) -> (usize, usize) {
        let (wi, wj) = (window / self.windows_c(), window % self.windows_c());
        let (r, c) = (token / self.win_c, token % self.win_c);
        (wi * self.win_r + r, wj * self.win_c + c)
    }

    /// Gather map `[planes, rows, cols, ch] -> [planes * nwin, n, ch]`.
    pub fn partition_map(&self, planes: usize, ch: usize) -> Vec<usize> {
        let (nwin, n) = (self.num_windows(), self.tokens_per_window());
        let mut map = Vec::with_capacity(planes * nwin * n * ch);
        for b in 0..planes {
            for w in 0..nwin {
                for t in 0..n {
                    let (pr, pc) = self.rolled_of_window(w, t);
                    let (r, c) = self.source_of(pr, pc);
                    let inside = r < self.rows && c < self.cols;
                    let base = ((b * self.rows + r) * self.cols + c) * ch;
                    map.extend((0..ch).map(|k| if inside { base + k } else { ZERO }));
                }
            }
        }
        map
    }

    /// Gather map `[planes * nwin, n, ch] -> [planes, rows, cols, ch]`.
    pub fn merge_map(&self, planes: usize, ch: usize) -> Vec<usize> {
        let (nwin, n) = (self.num_windows(), self.tokens_per_window());
        let mut map = Vec::with_capacity(planes * self.rows * self.cols * ch);
        for b in 0..planes {
            for r in 0..self.rows {
                for c in 0..self.cols {
                    let (pr, pc) = self.rolled_of(r, c);
                    let (w, t) = self.window_of(pr, pc);
                    let base = ((b * nwin + w) * n + t) * ch;
                    map.extend(base..base + ch);
                }
            }
        }
        map
    }

    /// True when rolled position `(pr, pc)` holds a padding cell.
    pub fn is_padding(&self, pr: usize, pc: usize) -> bool {
        let (r, c) = self.source_of(pr, pc);
        r >= self.rows || c >= self.cols
    }

    fn region(p: usize, padded: usize, win: usize, shift: usize) -> usize {
        if shift == 0 || p < padded - win {
            0
        } else if p < padded - shift {
            1
        } else {
            2
        }
    }

    /// Region label of a rolled position; tokens may only attend within one
    /// region.
    pub fn region_of(&self, pr: usize, pc: usize) -> usize {
        let a = Self::region(pr, self.padded_rows(), self.win_r, self.shift_r);
        let b = Self::region(pc, self.padded_cols(), self.win_c, self.shift_c);
        a * 3 + b
    }
}

/// Padding bookkeeping for [`partition_windows`] / [`merge_windows`].
#[derive(Clone, Debug, PartialEq)]
pub struct PadRecord {
    pub geometry: WindowGeometry,
    pub planes: usize,
    pub channels: usize,
    /// Row-major over the padded grid of one plane; `true` marks padding.
    pub pad_mask: Vec<bool>,
}

/// Splits a plane batch into `w × w` windows, zero-padding each axis to a
/// multiple of `w`. Returns `[planes * nwin, w*w, channels]`.
pub fn partition_windows(plane: &PlaneBatch, w: usize) -> Result<(Tensor, PadRecord)> {
    let g = WindowGeometry::square(plane.rows(), plane.cols(), w, 0)?;
    let (b, ch) = (plane.planes(), plane.channels());
    let map = g.partition_map(b, ch);
    let out = maps::apply(
        &plane.tokens,
        vec![b * g.num_windows(), g.tokens_per_window(), ch],
        &map,
    );
    let pad_mask = (0..g.padded_rows())
        .flat_map(|r| (0..g.padded_cols()).map(move |c| (r, c)))
        .map(|(r, c)| g.is_padding(r, c))
        .collect();
    Ok((
        out,
        PadRecord {
            geometry: g,
            planes: b,
            channels: ch,
            pad_mask,
        },
    ))
}

/// Inverse of [`partition_windows`]; padding cells are discarded.
pub fn merge_windows(windows: &Tensor, rec: &PadRecord) -> Result<PlaneBatch> {
    let g = &rec.geometry;
    let expected = [
        rec.planes * g.num_windows(),
        g.tokens_per_window(),
        rec.channels,
    ];
    if windows.shape() != expected
        || rec.pad_mask.len() != g.padded_rows() * g.padded_cols()
    {
        return Err(Error::Contract(format!(
            "windows {:?} do not match pad record (expected {expected:?})",
            windows.shape()
        )));
    }
    let map = g.merge_map(rec.planes, rec.channels);
    PlaneBatch::new(maps::apply(
        windows,
        vec![rec.planes, g.rows, g.cols, rec.channels],
        &map,
    ))
}

/// Torus roll of every plane: `out[r][c] = in[(r - dr) mod rows][(c - dc) mod cols]`.
pub fn cyclic_shift(plane: &PlaneBatch, offset_rows: isize, offset_cols: isize) -> PlaneBatch {
    let shape = plane.tokens.shape().to_vec();
    let m1 = maps::roll(&shape, 1, offset_rows).expect("axis 1 exists");
    let t = maps::apply(&plane.tokens, shape.clone(), &m1);
    let m2 = maps::roll(&shape, 2, offset_cols).expect("axis 2 exists");
    PlaneBatch {
        tokens: maps::apply(&t, shape, &m2),
    }
}

/// Additive attention mask, `[nwin, n, n]`, entries `0` or [`MASK_VALUE`].
#[derive(Clone, Debug, PartialEq)]
pub struct WindowMask {
    pub mask: Tensor,
}

impl WindowMask {
    pub fn num_windows(&self) -> usize {
        self.mask.shape()[0]
    }

    pub fn is_blocked(&self, window: usize, i: usize, j: usize) -> bool {
        self.mask.get(&[window, i, j]) != 0.0
    }
}

/// Mask for `geom`: a pair is blocked when the tokens come from different
/// regions of the rolled grid (their adjacency is a torus artifact) or when
/// either is padding. The diagonal is never blocked.
pub fn build_window_mask(geom: &WindowGeometry) -> WindowMask {
    let (nwin, n) = (geom.num_windows(), geom.tokens_per_window());
    let mut data = vec![0.0; nwin * n * n];
    for w in 0..nwin {
        let info: Vec<(usize, bool)> = (0..n)
            .map(|t| {
                let (pr, pc) = geom.rolled_of_window(w, t);
                (geom.region_of(pr, pc), geom.is_padding(pr, pc))
            })
            .collect();
        for i in 0..n {
            for j in 0..n {
                if i != j && (info[i].0 != info[j].0 || info[i].1 || info[j].1) {
                    data[(w * n + i) * n + j] = MASK_VALUE;
                }
            }
        }
    }
    WindowMask {
        mask: Tensor::from_parts(vec![nwin, n, n], data),
    }
}

/// Square-window shift mask for a `rows × cols` grid.
pub fn build_shift_mask(rows: usize, cols: usize, w: usize, shift: usize) -> Result<WindowMask> {
    Ok(build_window_mask(&WindowGeometry::square(rows, cols, w, shift)?))
}

fn relative_index_map(geom: &WindowGeometry, w: usize, heads: usize) -> Vec<usize> {
    let n = geom.tokens_per_window();
    let side = 2 * w - 1;
    let mut map = Vec::with_capacity(heads * n * n);
    for h in 0..heads {
        for i in 0..n {
            for j in 0..n {
                let (ri, ci) = ((i / geom.win_c) as isize, (i % geom.win_c) as isize);
                let (rj, cj) = ((j / geom.win_c) as isize, (j % geom.win_c) as isize);
                let dr = (ri - rj + w as isize - 1) as usize;
                let dc = (ci - cj + w as isize - 1) as usize;
                map.push((dr * side + dc) * heads + h);
            }
        }
    }
    map
}

/// Output of [`wmsa_detailed`].
pub struct WmsaOutput {
    pub out: Var,
    /// Post-softmax weights, `[Nw, heads, n, n]`.
    pub attention: Var,
}

/// Multi-head attention inside each window of `windows: [Nw, n, C]`.
///
/// `prefix` names the parameters `{prefix}.qkv.{weight,bias}`,
/// `{prefix}.proj.{weight,bias}` and, when enabled, `{prefix}.rel_bias`.
pub fn wmsa(
    tape: &mut Tape,
    windows: Var,
    geom: &WindowGeometry,
    mask: Option<&WindowMask>,
    store: &ParamStore,
    prefix: &str,
    cfg: &AttentionConfig,
) -> Result<Var> {
    wmsa_detailed(tape, windows, geom, mask, store, prefix, cfg).map(|o| o.out)
}

pub fn wmsa_detailed(
    tape: &mut Tape,
    windows: Var,
    geom: &WindowGeometry,
    mask: Option<&WindowMask>,
    store: &ParamStore,
    prefix: &str,
    cfg: &AttentionConfig,
) -> Result<WmsaOutput> {
    cfg.validate()?;
    let shape = tape.shape(windows).to_vec();
    let (c, h, d) = (cfg.channels, cfg.heads, cfg.head_dim());
    let n = geom.tokens_per_window();
    if shape.len() != 3 || shape[1] != n || shape[2] != c {
        return Err(Error::shape(
            "wmsa",
            format!("windows {shape:?}, expected [_, {n}, {c}]"),
        ));
    }
    let nw = shape[0];
    if let Some(m) = mask {
        if m.mask.shape() != [m.num_windows(), n, n] || nw % m.num_windows() != 0 {
            return Err(Error::Contract(format!(
                "mask {:?} does not fit {nw} windows of {n} tokens",
                m.mask.shape()
            )));
        }
    }

    let flat = tape.reshape(windows, &[nw * n, c])?;
    let wqkv = tape.param(store, &format!("{prefix}.qkv.weight"))?;
    let bqkv = tape.param(store, &format!("{prefix}.qkv.bias"))?;
    let qkv = tape.linear(flat, wqkv, Some(bqkv))?;

    // qkv rows are laid out as (3, heads, head_dim)
    let split = |part: usize, transposed: bool| -> Rc<[usize]> {
        let mut map = Vec::with_capacity(nw * n * c);
        for w in 0..nw {
            for hh in 0..h {
                if transposed {
                    for j in 0..d {
                        for i in 0..n {
                            map.push((w * n + i) * 3 * c + part * c + hh * d + j);
                        }
                    }
                } else {
                    for i in 0..n {
                        for j in 0..d {
                            map.push((w * n + i) * 3 * c + part * c + hh * d + j);
                        }
                    }
                }
            }
        }
        map.into()
    };
    let q = tape.gather(qkv, vec![nw, h, n, d], split(0, false))?;
    let q = tape.scale(q, 1.0 / (d as f64).sqrt())?;
    let kt = tape.gather(qkv, vec![nw, h, d, n], split(1, true))?;
    let v = tape.gather(qkv, vec![nw, h, n, d], split(2, false))?;

    let mut logits = tape.matmul(q, kt)?;
    tape.count_attention_pairs((nw * n * n) as u64);

    if cfg.use_relative_bias {
        let table = tape.param(store, &format!("{prefix}.rel_bias"))?;
        let map = relative_index_map(geom, cfg.window, h);
        let bias = tape.gather(table, vec![h, n, n], map.into())?;
        logits = tape.add(logits, bias)?;
    }
    if let Some(m) = mask {
        let nwin = m.num_windows();
        let expanded: Vec<f64> = (0..nwin)
            .flat_map(|w| (0..h).map(move |_| w))
            .flat_map(|w| m.mask.data()[w * n * n..(w + 1) * n * n].iter().copied())
            .collect();
        let mv = tape.constant(Tensor::from_parts(vec![nwin, h, n, n], expanded));
        let grouped = tape.reshape(logits, &[nw / nwin, nwin, h, n, n])?;
        let masked = tape.add(grouped, mv)?;
        logits = tape.reshape(masked, &[nw, h, n, n])?;
    }
    let attention = tape.softmax_last(logits)?;
    let heads_out = tape.matmul(attention, v)?;
    let merged = tape.permute(heads_out, &[0, 2, 1, 3])?;
    let merged = tape.reshape(merged, &[nw * n, c])?;
    let wp = tape.param(store, &format!("{prefix}.proj.weight"))?;
    let bp = tape.param(store, &format!("{prefix}.proj.bias"))?;
    let out = tape.linear(merged, wp, Some(bp))?;
    let out = tape.reshape(out, &[nw, n, c])?;
    Ok(WmsaOutput { out, attention })
}

/// Adds the parameters of one attention module under `prefix`.
pub fn init_attention_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &AttentionConfig,
    rng: &mut R,
) -> Result<()> {
    let c = cfg.channels;
    store.insert(format!("{prefix}.qkv.weight"), Tensor::randn(&[c, 3 * c], 0.02, rng))?;
    store.insert(format!("{prefix}.qkv.bias"), Tensor::zeros(&[3 * c]))?;
    store.insert(format!("{prefix}.proj.weight"), Tensor::randn(&[c, c], 0.02, rng))?;
    store.insert(format!("{prefix}.proj.bias"), Tensor::zeros(&[c]))?;
    if cfg.use_relative_bias {
        let side = 2 * cfg.window - 1;
        store.insert(
            format!("{prefix}.rel_bias"),
            Tensor::randn(&[side * side, cfg.heads], 0.02, rng),
        )?;
    }
    Ok(())
}

/// Adds the parameters of one pre-norm transformer block under `prefix`.
pub fn init_block_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &AttentionConfig,
    rng: &mut R,
) -> Result<()> {
    let (c, hid) = (cfg.channels, cfg.hidden());
    store.insert(format!("{prefix}.norm1.weight"), Tensor::full(&[c], 1.0))?;
    store.insert(format!("{prefix}.norm1.bias"), Tensor::zeros(&[c]))?;
    init_attention_params(store, &format!("{prefix}.attn"), cfg, rng)?;
    store.insert(format!("{prefix}.norm2.weight"), Tensor::full(&[c], 1.0))?;
    store.insert(format!("{prefix}.norm2.bias"), Tensor::zeros(&[c]))?;
    store.insert(format!("{prefix}.mlp.fc1.weight"), Tensor::randn(&[c, hid], 0.02, rng))?;
    store.insert(format!("{prefix}.mlp.fc1.bias"), Tensor::zeros(&[hid]))?;
    store.insert(format!("{prefix}.mlp.fc2.weight"), Tensor::randn(&[hid, c], 0.02, rng))?;
    store.insert(format!("{prefix}.mlp.fc2.bias"), Tensor::zeros(&[c]))?;
    Ok(())
}

/// Parameters of a regular + shifted block pair (`{prefix}.block0/1`).
pub fn init_pair_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &AttentionConfig,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    init_block_params(store, &format!("{prefix}.block0"), cfg, rng)?;
    init_block_params(store, &format!("{prefix}.block1"), cfg, rng)
}

/// True for parameters that feed a residual branch's final linear map
/// (attention output projection, second MLP layer). Zeroing all of them turns
/// every block into the identity.
pub fn is_residual_output(name: &str) -> bool {
    name.contains(".attn.proj.") || name.contains(".mlp.fc2.")
}

fn layer_norm_rows(tape: &mut Tape, x: Var, store: &ParamStore, prefix: &str) -> Result<Var> {
    let g = tape.param(store, &format!("{prefix}.weight"))?;
    let b = tape.param(store, &format!("{prefix}.bias"))?;
    tape.layer_norm(x, g, b, LN_EPS)
}

/// One pre-norm block: `x + WMSA(LN(x))`, then `x + MLP(LN(x))`.
pub fn transformer_block(
    tape: &mut Tape,
    x: Var,
    shifted: bool,
    store: &ParamStore,
    prefix: &str,
    cfg: &AttentionConfig,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 4 || shape[3] != cfg.channels {
        return Err(Error::shape(
            "transformer_block",
            format!("tokens {shape:?}, channels {}", cfg.channels),
        ));
    }
    let (b, rows, cols, c) = (shape[0], shape[1], shape[2], shape[3]);
    let geom = WindowGeometry::for_pass(rows, cols, cfg.window, shifted);
    let tokens = b * rows * cols;

    let flat = tape.reshape(x, &[tokens, c])?;
    let normed = layer_norm_rows(tape, flat, store, &format!("{prefix}.norm1"))?;
    let windows = tape.gather(
        normed,
        vec![b * geom.num_windows(), geom.tokens_per_window(), c],
        geom.partition_map(b, c).into(),
    )?;
    let mask = geom.needs_mask().then(|| build_window_mask(&geom));
    let attn = wmsa(
        tape,
        windows,
        &geom,
        mask.as_ref(),
        store,
        &format!("{prefix}.attn"),
        cfg,
    )?;
    let merged = tape.gather(attn, vec![tokens, c], geom.merge_map(b, c).into())?;
    let x1 = tape.add(flat, merged)?;

    let normed = layer_norm_rows(tape, x1, store, &format!("{prefix}.norm2"))?;
    let w1 = tape.param(store, &format!("{prefix}.mlp.fc1.weight"))?;
    let b1 = tape.param(store, &format!("{prefix}.mlp.fc1.bias"))?;
    let hidden = tape.linear(normed, w1, Some(b1))?;
    let hidden = tape.gelu(hidden)?;
    let w2 = tape.param(store, &format!("{prefix}.mlp.fc2.weight"))?;
    let b2 = tape.param(store, &format!("{prefix}.mlp.fc2.bias"))?;
    let mlp = tape.linear(hidden, w2, Some(b2))?;
    let x2 = tape.add(x1, mlp)?;
    tape.reshape(x2, &shape)
}

/// Regular-window block followed by a shifted-window block over
/// `[planes, rows, cols, channels]` tokens.
pub fn swin_pair_pass(
    tape: &mut Tape,
    x: Var,
    store: &ParamStore,
    prefix: &str,
    cfg: &AttentionConfig,
) -> Result<Var> {
    let y = transformer_block(tape, x, false, store, &format!("{prefix}.block0"), cfg)?;
    transformer_block(tape, y, true, store, &format!("{prefix}.block1"), cfg)
}

/// [`swin_pair_pass`] on a plain plane batch, without gradient tracking.
pub fn swin_pair_pass_plane(
    plane: &PlaneBatch,
    store: &ParamStore,
    prefix: &str,
    cfg: &AttentionConfig,
) -> Result<PlaneBatch> {
    let mut tape = Tape::inference();
    let x = tape.constant(plane.tokens.clone());
    let y = swin_pair_pass(&mut tape, x, store, prefix, cfg)?;
    PlaneBatch::new(tape.value(y).clone())
}
