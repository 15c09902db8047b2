//! Attention cost accounting: dense 3-D self-attention over a `C×H×W×T`
//! stack versus the three-view windowed cascade.
//!
//! Counts follow exactly what the implementation computes: each view runs a
//! regular and a shifted pass over every plane, windows clamp to short axes,
//! and padded tokens cost the same as real ones.

use serde::{Deserialize, Serialize};

use crate::attention::WindowGeometry;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CostMode {
    #[serde(rename = "FULL3D")]
    Full3d,
    #[serde(rename = "VD")]
    Vd,
}

impl CostMode {
    pub const ALL: [CostMode; 2] = [CostMode::Full3d, CostMode::Vd];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostShape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub t: usize,
    pub window: usize,
}

impl CostShape {
    pub fn new(c: usize, h: usize, w: usize, t: usize, window: usize) -> Self {
        Self { c, h, w, t, window }
    }

    fn check(&self) -> Result<()> {
        if [self.c, self.h, self.w, self.t, self.window].contains(&0) {
            return Err(Error::Config(format!("cost shape needs positive extents, got {self:?}")));
        }
        Ok(())
    }

    /// `(planes, rows, cols)` of the WT, HT and HW views.
    fn views(&self) -> [(usize, usize, usize); 3] {
        [(self.h, self.w, self.t), (self.w, self.h, self.t), (self.t, self.h, self.w)]
    }

    fn passes(&self) -> impl Iterator<Item = (usize, WindowGeometry)> + '_ {
        self.views().into_iter().flat_map(move |(planes, r, c)| {
            [false, true].map(|shifted| (planes, WindowGeometry::for_pass(r, c, self.window, shifted)))
        })
    }

    fn tokens(&self) -> u64 {
        (self.h * self.w * self.t) as u64
    }
}

fn pass_pairs(planes: usize, g: &WindowGeometry) -> u64 {
    let n = g.tokens_per_window() as u64;
    planes as u64 * g.num_windows() as u64 * n * n
}

fn pass_tokens(planes: usize, g: &WindowGeometry) -> u64 {
    (planes * g.padded_rows() * g.padded_cols()) as u64
}

/// Query-key logit entries.
pub fn pair_count(mode: CostMode, s: &CostShape) -> Result<u64> {
    s.check()?;
    Ok(match mode {
        CostMode::Full3d => s.tokens() * s.tokens(),
        CostMode::Vd => s.passes().map(|(p, g)| pass_pairs(p, &g)).sum(),
    })
}

/// Multiply-adds count two FLOPs. Per pass: q·k and attn·v cost `2C` each
/// per pair; the qkv and output projections cost `8C²` per token.
pub fn attention_flops(mode: CostMode, s: &CostShape) -> Result<u64> {
    let c = s.c as u64;
    let pairs = pair_count(mode, s)?;
    let tokens = match mode {
        CostMode::Full3d => s.tokens(),
        CostMode::Vd => s.passes().map(|(p, g)| pass_tokens(p, &g)).sum(),
    };
    Ok(4 * c * pairs + 8 * c * c * tokens)
}

/// Peak activation bytes: input and output maps, the largest attention
/// weight tensor alive at once, and its q/k/v projections.
pub fn activation_bytes(mode: CostMode, s: &CostShape, bytes_per_scalar: u64) -> Result<u64> {
    s.check()?;
    let c = s.c as u64;
    let maps = 2 * c * s.tokens();
    let (weights, qkv_tokens) = match mode {
        CostMode::Full3d => (s.tokens() * s.tokens(), s.tokens()),
        CostMode::Vd => s
            .passes()
            .map(|(p, g)| (pass_pairs(p, &g), pass_tokens(p, &g)))
            .fold((0, 0), |a, b| (a.0.max(b.0), a.1.max(b.1))),
    };
    Ok(bytes_per_scalar * (maps + weights + 3 * c * qkv_tokens))
}

pub const DEFAULT_BYTES_PER_SCALAR: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub mode: CostMode,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub t: usize,
    pub window: usize,
    pub pairs: u64,
    pub flops: u64,
    pub activation_bytes: u64,
}

impl CostReport {
    pub fn compute(mode: CostMode, s: &CostShape, bytes_per_scalar: u64) -> Result<Self> {
        Ok(Self {
            mode,
            c: s.c,
            h: s.h,
            w: s.w,
            t: s.t,
            window: s.window,
            pairs: pair_count(mode, s)?,
            flops: attention_flops(mode, s)?,
            activation_bytes: activation_bytes(mode, s, bytes_per_scalar)?,
        })
    }
}

/// Shapes swept by the benchmark command. VD only pays off once a plane
/// holds several windows: six passes over padded planes cost more than
/// dense attention on tiny stacks (e.g. 8×8×8 with w = 7), so such rows are
/// left out.
pub fn default_grid() -> Vec<CostShape> {
    let mut g = Vec::new();
    for (h, w, t) in [(4, 4, 4), (8, 8, 8), (16, 16, 3), (16, 16, 4), (16, 16, 16), (32, 32, 3), (64, 64, 3), (128, 128, 3)] {
        for window in [2, 4, 7] {
            if window >= 7 && h < 16 && h > window {
                continue;
            }
            g.push(CostShape::new(256, h, w, t, window));
        }
    }
    g
}

/// One row per mode × shape.
pub fn bench(grid: &[CostShape], bytes_per_scalar: u64) -> Result<Vec<CostReport>> {
    grid.iter()
        .flat_map(|s| CostMode::ALL.map(|m| CostReport::compute(m, s, bytes_per_scalar)))
        .collect()
}

pub fn to_csv(rows: &[CostReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Reads rows written by [`to_csv`]; lines starting with `#` are skipped.
pub fn from_csv(text: &str) -> Result<Vec<CostReport>> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}
