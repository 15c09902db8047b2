//! Synthetic volumes: spheres are lesions, depth-running tubes are
//! distractors whose single-slice cross-sections look exactly like a
//! sphere's central slice. Only the 3-D extent tells them apart.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::boxes::LesionBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    /// Inclusive range of sphere counts.
    pub lesions: [usize; 2],
    pub lesion_radius: [f64; 2],
    pub tubes: [usize; 2],
    pub tube_radius: [f64; 2],
    /// Minimum tube length in slices.
    pub tube_min_length: usize,
    /// Largest in-plane drift of a tube axis per slice.
    pub tube_jitter: f64,
    pub background: f64,
    pub background_amplitude: f64,
    pub noise: f64,
    pub max_retries: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            depth: 16,
            height: 64,
            width: 64,
            lesions: [1, 3],
            lesion_radius: [2.0, 4.0],
            tubes: [1, 2],
            tube_radius: [2.0, 3.0],
            tube_min_length: 8,
            tube_jitter: 0.15,
            background: 0.2,
            background_amplitude: 0.03,
            noise: 0.05,
            max_retries: 200,
        }
    }
}

/// Edge softness of the intensity bump, in voxels.
const BUMP_HEIGHT: f64 = 0.5;
/// Free space kept between objects (voxels).
const CLEARANCE: f64 = 2.0;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.depth < 16 || self.height < 16 || self.width < 16 {
            bad.push(format!(
                "synth: depth/height/width must be >= 16, got {}x{}x{}",
                self.depth, self.height, self.width
            ));
        }
        if self.lesions[0] > self.lesions[1] {
            bad.push("synth.lesions: min > max".into());
        }
        if self.tubes[0] > self.tubes[1] {
            bad.push("synth.tubes: min > max".into());
        }
        for (name, r) in [("lesion_radius", self.lesion_radius), ("tube_radius", self.tube_radius)] {
            if !(r[0] >= 1.0 && r[0] <= r[1] && r[1].is_finite()) {
                bad.push(format!("synth.{name}: need 1 <= min <= max, got {r:?}"));
            }
        }
        if self.tube_min_length == 0 || self.tube_min_length > self.depth {
            bad.push(format!("synth.tube_min_length must be in 1..={}", self.depth));
        }
        if !(self.noise >= 0.0 && self.background_amplitude >= 0.0 && self.tube_jitter >= 0.0) {
            bad.push("synth: noise, background_amplitude and tube_jitter must be >= 0".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(bad))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sphere {
    pub cx: f64,
    pub cy: f64,
    pub cz: usize,
    pub radius: f64,
}

impl Sphere {
    /// Box of the cross-section on slice `z`, if its radius is at least 1.
    pub fn cross_section(&self, z: usize) -> Option<LesionBox> {
        let dz = z as f64 - self.cz as f64;
        let h2 = self.radius * self.radius - dz * dz;
        if h2 < 1.0 {
            return None;
        }
        let h = h2.sqrt();
        Some(LesionBox::new(z, self.cx - h, self.cy - h, self.cx + h, self.cy + h))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tube {
    /// Axis position on slice `z0`.
    pub x0: f64,
    pub y0: f64,
    pub z0: usize,
    pub length: usize,
    /// In-plane axis drift per slice.
    pub dx: f64,
    pub dy: f64,
    pub radius: f64,
}

impl Tube {
    pub fn covers(&self, z: usize) -> bool {
        z >= self.z0 && z < self.z0 + self.length
    }

    pub fn axis_at(&self, z: usize) -> (f64, f64) {
        let k = z as f64 - self.z0 as f64;
        (self.x0 + self.dx * k, self.y0 + self.dy * k)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVolume {
    pub id: String,
    pub seed: u64,
    /// `[D, H, W]`, values exactly representable as `f32`.
    pub voxels: Tensor,
    pub lesions: Vec<Sphere>,
    pub distractors: Vec<Tube>,
    /// Sorted by slice, then by lesion index.
    pub gt_boxes: Vec<LesionBox>,
}

impl SyntheticVolume {
    pub fn depth(&self) -> usize {
        self.voxels.shape()[0]
    }

    pub fn boxes_on(&self, z: usize) -> Vec<LesionBox> {
        self.gt_boxes.iter().filter(|b| b.slice == z).copied().collect()
    }
}

/// Soft-edged bump: full height inside `radius - 0.5`, zero beyond
/// `radius + 0.5`, linear in between.
pub fn bump(radius: f64, dist: f64) -> f64 {
    BUMP_HEIGHT * (radius + 0.5 - dist).clamp(0.0, 1.0)
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

fn count(rng: &mut ChaCha8Rng, r: [usize; 2]) -> usize {
    rng.random_range(r[0]..=r[1])
}

/// Deterministic seed of sub-stream `stream` of `base` (splitmix64 mixing).
pub fn derive_seed(base: u64, stream: &[u64]) -> u64 {
    let mut z = base;
    for &s in stream {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(s);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

fn place_tube(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Tube {
    let radius = uniform(rng, cfg.tube_radius);
    let length = rng.random_range(cfg.tube_min_length..=cfg.depth);
    let z0 = rng.random_range(0..=cfg.depth - length);
    let j = cfg.tube_jitter;
    let (dx, dy) = if j > 0.0 {
        (rng.random_range(-j..j), rng.random_range(-j..j))
    } else {
        (0.0, 0.0)
    };
    // keep the whole axis at least radius + 1 from the borders
    let span = (length - 1) as f64;
    let range = |lo: f64, hi: f64, d: f64, rng: &mut ChaCha8Rng| {
        let a = lo - (d * span).min(0.0);
        let b = hi - (d * span).max(0.0);
        if a < b { rng.random_range(a..b) } else { (lo + hi) / 2.0 }
    };
    let m = radius + 1.0;
    let x0 = range(m, cfg.width as f64 - m, dx, rng);
    let y0 = range(m, cfg.height as f64 - m, dy, rng);
    Tube {
        x0,
        y0,
        z0,
        length,
        dx,
        dy,
        radius,
    }
}

fn place_sphere(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Sphere {
    let radius = uniform(rng, cfg.lesion_radius);
    let m = radius + 1.0;
    let rz = radius.ceil() as usize;
    let cz = if cfg.depth > 2 * rz {
        rng.random_range(rz..cfg.depth - rz)
    } else {
        cfg.depth / 2
    };
    Sphere {
        cx: rng.random_range(m..cfg.width as f64 - m),
        cy: rng.random_range(m..cfg.height as f64 - m),
        cz,
        radius,
    }
}

fn spheres_clash(a: &Sphere, b: &Sphere) -> bool {
    let d2 = (a.cx - b.cx).powi(2) + (a.cy - b.cy).powi(2) + (a.cz as f64 - b.cz as f64).powi(2);
    d2.sqrt() < a.radius + b.radius + CLEARANCE
}

fn tube_sphere_clash(t: &Tube, s: &Sphere) -> bool {
    let lo = (s.cz as f64 - s.radius - CLEARANCE).floor().max(0.0) as usize;
    let hi = (s.cz as f64 + s.radius + CLEARANCE).ceil() as usize;
    (lo..=hi).filter(|&z| t.covers(z)).any(|z| {
        let (ax, ay) = t.axis_at(z);
        ((ax - s.cx).powi(2) + (ay - s.cy).powi(2)).sqrt() < t.radius + s.radius + CLEARANCE
    })
}

fn tubes_clash(a: &Tube, b: &Tube) -> bool {
    (0..a.z0 + a.length).filter(|&z| a.covers(z) && b.covers(z)).any(|z| {
        let (ax, ay) = a.axis_at(z);
        let (bx, by) = b.axis_at(z);
        ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt() < a.radius + b.radius + CLEARANCE
    })
}

fn retry<T>(
    what: &str,
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
    mut make: impl FnMut(&mut ChaCha8Rng) -> T,
    ok: impl Fn(&T) -> bool,
) -> Result<T> {
    for _ in 0..cfg.max_retries.max(1) {
        let c = make(rng);
        if ok(&c) {
            return Ok(c);
        }
    }
    Err(Error::Generation(format!(
        "could not place {what} after {} attempts",
        cfg.max_retries.max(1)
    )))
}

/// Generates one volume; identical `(seed, cfg)` give identical output.
pub fn generate_volume(seed: u64, cfg: &SynthConfig) -> Result<SyntheticVolume> {
    generate_volume_with_id(seed, cfg, format!("synth-{seed:016x}"))
}

pub fn generate_volume_with_id(seed: u64, cfg: &SynthConfig, id: String) -> Result<SyntheticVolume> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, h, w) = (cfg.depth, cfg.height, cfg.width);

    let n_tubes = count(&mut rng, cfg.tubes);
    let mut tubes: Vec<Tube> = Vec::with_capacity(n_tubes);
    for _ in 0..n_tubes {
        let t = retry("tube", cfg, &mut rng, |r| place_tube(r, cfg), |t| {
            tubes.iter().all(|o| !tubes_clash(o, t))
        })?;
        tubes.push(t);
    }
    let n_lesions = count(&mut rng, cfg.lesions);
    let mut spheres: Vec<Sphere> = Vec::with_capacity(n_lesions);
    for _ in 0..n_lesions {
        let s = retry("lesion", cfg, &mut rng, |r| place_sphere(r, cfg), |s| {
            spheres.iter().all(|o| !spheres_clash(o, s)) && tubes.iter().all(|t| !tube_sphere_clash(t, s))
        })?;
        spheres.push(s);
    }

    // low-frequency background: a few plane waves
    let waves: Vec<[f64; 4]> = (0..3)
        .map(|_| {
            [
                rng.random_range(1..=2) as f64,
                rng.random_range(1..=2) as f64,
                rng.random_range(0..=1) as f64,
                rng.random_range(0.0..std::f64::consts::TAU),
            ]
        })
        .collect();
    let amp = cfg.background_amplitude / waves.len() as f64;
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;

    let mut vox = Vec::with_capacity(d * h * w);
    for z in 0..d {
        let tube_axes: Vec<(f64, f64, f64)> = tubes
            .iter()
            .filter(|t| t.covers(z))
            .map(|t| {
                let (ax, ay) = t.axis_at(z);
                (ax, ay, t.radius)
            })
            .collect();
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut v = cfg.background;
                for wv in &waves {
                    let phase = std::f64::consts::TAU
                        * (wv[0] * px / w as f64 + wv[1] * py / h as f64 + wv[2] * z as f64 / d as f64)
                        + wv[3];
                    v += amp * phase.cos();
                }
                for s in &spheres {
                    let dist = ((px - s.cx).powi(2) + (py - s.cy).powi(2) + (z as f64 - s.cz as f64).powi(2)).sqrt();
                    v += bump(s.radius, dist);
                }
                for &(ax, ay, r) in &tube_axes {
                    v += bump(r, ((px - ax).powi(2) + (py - ay).powi(2)).sqrt());
                }
                if cfg.noise > 0.0 {
                    v += noise.sample(&mut rng);
                }
                vox.push(v.clamp(0.0, 1.0) as f32 as f64);
            }
        }
    }

    let mut gt_boxes = Vec::new();
    for z in 0..d {
        gt_boxes.extend(spheres.iter().filter_map(|s| s.cross_section(z)));
    }
    Ok(SyntheticVolume {
        id,
        seed,
        voxels: Tensor::new(vec![d, h, w], vox)?,
        lesions: spheres,
        distractors: tubes,
        gt_boxes,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VolumeHeader {
    dtype: String,
    shape: Vec<usize>,
    volume_id: String,
}

/// Single-line JSON header, `\n`, then `f32` little-endian voxels
/// (row-major, W fastest).
pub fn encode_volume(id: &str, voxels: &Tensor) -> Result<Vec<u8>> {
    let header = VolumeHeader {
        dtype: "f32le".into(),
        shape: voxels.shape().to_vec(),
        volume_id: id.into(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.reserve(voxels.len() * 4);
    for &v in voxels.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn write_volume(path: &Path, id: &str, voxels: &Tensor) -> Result<()> {
    fs::write(path, encode_volume(id, voxels)?).map_err(|e| Error::io(path, e))
}

/// Returns `(volume_id, voxels[D, H, W])`.
pub fn read_volume(path: &Path) -> Result<(String, Tensor)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, "missing header line"))?;
    let header: VolumeHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    if header.dtype != "f32le" {
        return Err(Error::format(path, format!("unsupported dtype `{}`", header.dtype)));
    }
    if header.shape.len() != 3 || header.shape.contains(&0) {
        return Err(Error::format(path, format!("shape {:?} is not [D, H, W]", header.shape)));
    }
    let n: usize = header.shape.iter().product();
    let payload = &bytes[nl + 1..];
    if payload.len() != 4 * n {
        return Err(Error::format(
            path,
            format!("payload has {} bytes, shape {:?} needs {}", payload.len(), header.shape, 4 * n),
        ));
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let t = Tensor::new(header.shape, data).map_err(|e| Error::format(path, e.to_string()))?;
    Ok((header.volume_id, t))
}
