//! Per-slice 2-D feature pyramid: patch embedding, four windowed-attention
//! stages joined by patch merging, and top-down FPN fusion to P2–P6.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{init_pair_params, swin_pair_pass, AttentionConfig, LN_EPS};
use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pyramid levels produced by [`fpn_fuse`], in order.
pub const LEVELS: [usize; 5] = [2, 3, 4, 5, 6];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub patch: usize,
    pub depths: [usize; 4],
    pub widths: [usize; 4],
    pub heads: [usize; 4],
    pub window: usize,
    pub mlp_ratio: f64,
    #[serde(default = "default_true")]
    pub use_relative_bias: bool,
    /// Channel count of every pyramid level.
    pub fpn_channels: usize,
}

fn default_true() -> bool {
    true
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            patch: 4,
            depths: [1, 1, 1, 1],
            widths: [32, 64, 128, 256],
            heads: [2, 2, 4, 4],
            window: 4,
            mlp_ratio: 4.0,
            use_relative_bias: true,
            fpn_channels: 256,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.in_channels == 0 || self.fpn_channels == 0 {
            return Err(Error::Config("patch, in_channels and fpn_channels must be >= 1".into()));
        }
        if self.widths.windows(2).any(|p| p[1] != 2 * p[0]) {
            return Err(Error::Config(format!(
                "stage widths must double from stage to stage, got {:?}",
                self.widths
            )));
        }
        for s in 0..4 {
            self.stage_attention(s).validate()?;
        }
        Ok(())
    }

    pub fn stage_attention(&self, s: usize) -> AttentionConfig {
        AttentionConfig {
            channels: self.widths[s],
            heads: self.heads[s],
            window: self.window,
            use_relative_bias: self.use_relative_bias,
            mlp_ratio: self.mlp_ratio,
        }
    }

    /// Images must be divisible by this in both extents.
    pub fn granularity(&self) -> usize {
        self.patch * 8
    }

    pub fn check_image(&self, shape: &[usize]) -> Result<()> {
        let g = self.granularity();
        if shape.len() != 3 || shape[0] != self.in_channels || shape[1] % g != 0 || shape[2] % g != 0 {
            return Err(Error::Contract(format!(
                "image {shape:?} must be [{}, H, W] with H, W multiples of {g}",
                self.in_channels
            )));
        }
        // P6 pools P5, which needs at least 2×2
        if shape[1] < 2 * g || shape[2] < 2 * g {
            return Err(Error::Contract(format!(
                "image {shape:?} too small: need H, W >= {}",
                2 * g
            )));
        }
        Ok(())
    }
}

/// `[C, H, W]` → `[1, H, W, C]` token grid and back.
fn to_tokens(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let t = tape.permute(x, &[1, 2, 0])?;
    tape.reshape(t, &[1, s[1], s[2], s[0]])
}

fn from_tokens(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let t = tape.reshape(x, &[s[1], s[2], s[3]])?;
    tape.permute(t, &[2, 0, 1])
}

/// Non-overlapping `p×p` patches projected to the stage-1 width.
pub fn patch_embed(tape: &mut Tape, image: Var, store: &ParamStore, prefix: &str, p: usize) -> Result<Var> {
    let s = tape.shape(image).to_vec();
    if p == 0 || s.len() != 3 || s[1] % p != 0 || s[2] % p != 0 {
        return Err(Error::Contract(format!(
            "patch_embed: image {s:?} not divisible by patch size {p}"
        )));
    }
    let w = tape.param(store, &format!("{prefix}.weight"))?;
    let b = tape.param(store, &format!("{prefix}.bias"))?;
    tape.conv2d(image, w, Some(b), p, 0)
}

/// Gathers every 2×2 neighbourhood of `[c, h, w]` into rows of `4c`
/// channels, ordered (0,0), (1,0), (0,1), (1,1) as (row, col) offsets.
pub fn merge_gather_map(c: usize, h: usize, w: usize) -> Vec<usize> {
    let (ho, wo) = (h / 2, w / 2);
    let mut map = Vec::with_capacity(ho * wo * 4 * c);
    for i in 0..ho {
        for j in 0..wo {
            for (dr, dc) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let (r, col) = (2 * i + dr, 2 * j + dc);
                map.extend((0..c).map(|ch| (ch * h + r) * w + col));
            }
        }
    }
    map
}

/// `[c, h, w]` → `[2c, h/2, w/2]`: concatenate 2×2 neighbourhoods,
/// layer-norm, project without bias.
pub fn patch_merge(tape: &mut Tape, x: Var, store: &ParamStore, prefix: &str) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
        return Err(Error::Contract(format!("patch_merge needs even extents, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let map: Rc<[usize]> = merge_gather_map(c, h, w).into();
    let rows = tape.gather(x, vec![h / 2 * (w / 2), 4 * c], map)?;
    let g = tape.param(store, &format!("{prefix}.norm.weight"))?;
    let b = tape.param(store, &format!("{prefix}.norm.bias"))?;
    let normed = tape.layer_norm(rows, g, b, LN_EPS)?;
    let wr = tape.param(store, &format!("{prefix}.reduction.weight"))?;
    let y = tape.linear(normed, wr, None)?;
    let y = tape.reshape(y, &[h / 2, w / 2, 2 * c])?;
    tape.permute(y, &[2, 0, 1])
}

/// Stage outputs C2..C5 for one `[in_channels, H, W]` image.
pub fn encoder_forward(
    tape: &mut Tape,
    image: Var,
    cfg: &BackboneConfig,
    store: &ParamStore,
    prefix: &str,
) -> Result<[Var; 4]> {
    cfg.check_image(tape.shape(image))?;
    let mut x = patch_embed(tape, image, store, &format!("{prefix}.patch_embed"), cfg.patch)?;
    let mut outs = Vec::with_capacity(4);
    for s in 0..4 {
        let acfg = cfg.stage_attention(s);
        let mut t = to_tokens(tape, x)?;
        for k in 0..cfg.depths[s] {
            t = swin_pair_pass(tape, t, store, &format!("{prefix}.stage{s}.pass{k}"), &acfg)?;
        }
        let c = from_tokens(tape, t)?;
        outs.push(c);
        if s < 3 {
            x = patch_merge(tape, c, store, &format!("{prefix}.merge{s}"))?;
        }
    }
    Ok([outs[0], outs[1], outs[2], outs[3]])
}

fn conv1x1(tape: &mut Tape, x: Var, store: &ParamStore, prefix: &str) -> Result<Var> {
    let w = tape.param(store, &format!("{prefix}.weight"))?;
    let b = tape.param(store, &format!("{prefix}.bias"))?;
    tape.conv2d(x, w, Some(b), 1, 0)
}

/// Top-down fusion: `P5 = L5(C5)`, `Pi = Li(Ci) + Up(P(i+1))`,
/// `P6 = maxpool(P5)`. Returns `[P2, P3, P4, P5, P6]`.
pub fn fpn_fuse(tape: &mut Tape, c: &[Var; 4], store: &ParamStore, prefix: &str) -> Result<[Var; 5]> {
    let p5 = conv1x1(tape, c[3], store, &format!("{prefix}.lateral5"))?;
    let mut p = vec![p5];
    for i in (2..=4).rev() {
        let lat = conv1x1(tape, c[i - 2], store, &format!("{prefix}.lateral{i}"))?;
        let up = tape.upsample2x(*p.last().unwrap())?;
        if tape.shape(up) != tape.shape(lat) {
            return Err(Error::Contract(format!(
                "fpn level {i}: upsampled {:?} vs lateral {:?}",
                tape.shape(up),
                tape.shape(lat)
            )));
        }
        p.push(tape.add(lat, up)?);
    }
    let p6 = tape.maxpool2x2(p5)?;
    Ok([p[3], p[2], p[1], p[0], p6])
}

/// Encoder + FPN.
pub fn pyramid_forward(
    tape: &mut Tape,
    image: Var,
    cfg: &BackboneConfig,
    store: &ParamStore,
) -> Result<[Var; 5]> {
    let c = encoder_forward(tape, image, cfg, store, "backbone")?;
    fpn_fuse(tape, &c, store, "fpn")
}

/// He-normal convolution kernel `[cout, cin, k, k]`.
pub(crate) fn conv_weight<R: Rng + ?Sized>(cout: usize, cin: usize, k: usize, rng: &mut R) -> Tensor {
    Tensor::randn(&[cout, cin, k, k], (2.0 / (cin * k * k) as f64).sqrt(), rng)
}

pub fn init_encoder_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &BackboneConfig,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    let w0 = cfg.widths[0];
    store.insert(
        format!("{prefix}.patch_embed.weight"),
        conv_weight(w0, cfg.in_channels, cfg.patch, rng),
    )?;
    store.insert(format!("{prefix}.patch_embed.bias"), Tensor::zeros(&[w0]))?;
    for s in 0..4 {
        let acfg = cfg.stage_attention(s);
        for k in 0..cfg.depths[s] {
            init_pair_params(store, &format!("{prefix}.stage{s}.pass{k}"), &acfg, rng)?;
        }
        if s < 3 {
            let c = cfg.widths[s];
            store.insert(format!("{prefix}.merge{s}.norm.weight"), Tensor::full(&[4 * c], 1.0))?;
            store.insert(format!("{prefix}.merge{s}.norm.bias"), Tensor::zeros(&[4 * c]))?;
            store.insert(
                format!("{prefix}.merge{s}.reduction.weight"),
                Tensor::randn(&[4 * c, 2 * c], 0.02, rng),
            )?;
        }
    }
    Ok(())
}

pub fn init_fpn_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &BackboneConfig,
    rng: &mut R,
) -> Result<()> {
    let f = cfg.fpn_channels;
    for i in 2..=5 {
        let c = cfg.widths[i - 2];
        store.insert(format!("{prefix}.lateral{i}.weight"), conv_weight(f, c, 1, rng))?;
        store.insert(format!("{prefix}.lateral{i}.bias"), Tensor::zeros(&[f]))?;
    }
    Ok(())
}

pub fn init_pyramid_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    cfg: &BackboneConfig,
    rng: &mut R,
) -> Result<()> {
    init_encoder_params(store, "backbone", cfg, rng)?;
    init_fpn_params(store, "fpn", cfg, rng)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::gradcheck;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn small_cfg() -> BackboneConfig {
        BackboneConfig {
            in_channels: 3,
            patch: 2,
            depths: [1, 1, 1, 1],
            widths: [4, 8, 16, 32],
            heads: [1, 2, 2, 4],
            window: 2,
            mlp_ratio: 1.0,
            use_relative_bias: true,
            fpn_channels: 6,
        }
    }

    fn perturbed(store: &mut ParamStore, std: f64, seed: u64) {
        let mut r = rng(seed);
        for p in store.iter_mut() {
            let n = Tensor::randn(p.value.shape(), std, &mut r);
            for (v, e) in p.value.data_mut().iter_mut().zip(n.data()) {
                *v += e;
            }
        }
    }

    #[test]
    fn patch_embed_of_zero_image_is_bias() {
        let mut store = ParamStore::new();
        store.insert("pe.weight", Tensor::randn(&[5, 3, 4, 4], 1.0, &mut rng(1))).unwrap();
        store.insert("pe.bias", Tensor::new(vec![5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap()).unwrap();
        let mut tape = Tape::inference();
        let img = tape.constant(Tensor::zeros(&[3, 8, 8]));
        let y = patch_embed(&mut tape, img, &store, "pe", 4).unwrap();
        assert_eq!(tape.shape(y), &[5, 2, 2]);
        for c in 0..5 {
            for i in 0..4 {
                assert_eq!(tape.value(y).data()[c * 4 + i], c as f64 + 1.0);
            }
        }
        let bad = tape.constant(Tensor::zeros(&[3, 6, 8]));
        assert!(matches!(patch_embed(&mut tape, bad, &store, "pe", 4), Err(Error::Contract(_))));
    }

    #[test]
    fn patch_embed_matches_flatten_matmul() {
        let mut r = rng(2);
        let (cout, p) = (4, 2);
        let w = Tensor::randn(&[cout, 3, p, p], 1.0, &mut r);
        let b = Tensor::randn(&[cout], 1.0, &mut r);
        let img = Tensor::randn(&[3, 6, 4], 1.0, &mut r);
        let mut store = ParamStore::new();
        store.insert("pe.weight", w.clone()).unwrap();
        store.insert("pe.bias", b.clone()).unwrap();
        let mut tape = Tape::inference();
        let iv = tape.constant(img.clone());
        let y = patch_embed(&mut tape, iv, &store, "pe", p).unwrap();
        let y = tape.value(y);
        for i in 0..3 {
            for j in 0..2 {
                // flatten patch in (cin, dy, dx) order and dot with each filter
                let patch: Vec<f64> = (0..3)
                    .flat_map(|c| (0..p).flat_map(move |dy| (0..p).map(move |dx| (c, dy, dx))))
                    .map(|(c, dy, dx)| img.get(&[c, i * p + dy, j * p + dx]))
                    .collect();
                for o in 0..cout {
                    let want = b.data()[o] + patch.iter().zip(&w.data()[o * 12..(o + 1) * 12]).map(|(a, b)| a * b).sum::<f64>();
                    assert!((y.get(&[o, i, j]) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn patch_merge_matches_gather_matmul() {
        let mut r = rng(3);
        let (c, h, w) = (2, 4, 6);
        let x = Tensor::randn(&[c, h, w], 1.0, &mut r);
        let mut store = ParamStore::new();
        let g = Tensor::randn(&[4 * c], 1.0, &mut r);
        let bt = Tensor::randn(&[4 * c], 1.0, &mut r);
        let red = Tensor::randn(&[4 * c, 2 * c], 1.0, &mut r);
        store.insert("m.norm.weight", g.clone()).unwrap();
        store.insert("m.norm.bias", bt.clone()).unwrap();
        store.insert("m.reduction.weight", red.clone()).unwrap();
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let y = patch_merge(&mut tape, xv, &store, "m").unwrap();
        let y = tape.value(y).clone();
        assert_eq!(y.shape(), &[2 * c, h / 2, w / 2]);
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                let mut v = Vec::new();
                for (dr, dc) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    for ch in 0..c {
                        v.push(x.get(&[ch, 2 * i + dr, 2 * j + dc]));
                    }
                }
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                let var = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / v.len() as f64;
                let n: Vec<f64> = v
                    .iter()
                    .enumerate()
                    .map(|(k, a)| (a - mean) / (var + LN_EPS).sqrt() * g.data()[k] + bt.data()[k])
                    .collect();
                for o in 0..2 * c {
                    let want: f64 = (0..4 * c).map(|k| n[k] * red.get(&[k, o])).sum();
                    assert!((y.get(&[o, i, j]) - want).abs() < 1e-12);
                }
            }
        }
        let odd = tape.constant(Tensor::zeros(&[2, 3, 4]));
        assert!(matches!(patch_merge(&mut tape, odd, &store, "m"), Err(Error::Contract(_))));
    }

    #[test]
    fn default_shape_chain() {
        let cfg = BackboneConfig::default();
        let mut store = ParamStore::new();
        init_pyramid_params(&mut store, &cfg, &mut rng(4)).unwrap();
        let mut tape = Tape::inference();
        let img = tape.constant(Tensor::randn(&[3, 64, 64], 1.0, &mut rng(5)));
        let c = encoder_forward(&mut tape, img, &cfg, &store, "backbone").unwrap();
        let shapes: Vec<_> = c.iter().map(|v| tape.shape(*v).to_vec()).collect();
        assert_eq!(shapes, vec![vec![32, 16, 16], vec![64, 8, 8], vec![128, 4, 4], vec![256, 2, 2]]);
        let p = fpn_fuse(&mut tape, &c, &store, "fpn").unwrap();
        let shapes: Vec<_> = p.iter().map(|v| tape.shape(*v).to_vec()).collect();
        assert_eq!(
            shapes,
            vec![vec![256, 16, 16], vec![256, 8, 8], vec![256, 4, 4], vec![256, 2, 2], vec![256, 1, 1]]
        );
    }

    #[test]
    fn config_checks() {
        let mut cfg = BackboneConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.widths = [32, 64, 96, 256];
        assert!(cfg.validate().is_err());
        let cfg = BackboneConfig::default();
        assert!(cfg.check_image(&[3, 48, 64]).is_err());
        assert!(cfg.check_image(&[3, 32, 32]).is_err());
        assert!(cfg.check_image(&[3, 64, 128]).is_ok());
    }

    #[test]
    fn fpn_additive_form() {
        let cfg = small_cfg();
        let f = cfg.fpn_channels;
        let mut store = ParamStore::new();
        init_fpn_params(&mut store, "fpn", &cfg, &mut rng(6)).unwrap();
        let mut tape = Tape::inference();
        let c: Vec<Var> = (0..4)
            .map(|s| {
                let e = 16 >> s;
                let t = if s == 3 {
                    Tensor::randn(&[cfg.widths[s], e, e], 1.0, &mut rng(7))
                } else {
                    Tensor::zeros(&[cfg.widths[s], e, e])
                };
                tape.constant(t)
            })
            .collect();
        // zero lateral biases so zero inputs contribute nothing
        for i in 2..=4 {
            store.by_name_mut(&format!("fpn.lateral{i}.bias")).unwrap().value.data_mut().fill(0.0);
        }
        let c = [c[0], c[1], c[2], c[3]];
        let p = fpn_fuse(&mut tape, &c, &store, "fpn").unwrap();
        let up = tape.upsample2x(p[3]).unwrap();
        assert_eq!(tape.value(p[2]), tape.value(up));
        assert_eq!(tape.shape(p[0]), &[f, 16, 16]);
    }

    #[test]
    fn fpn_matches_compositional_oracle() {
        let cfg = small_cfg();
        let f = cfg.fpn_channels;
        let mut store = ParamStore::new();
        init_fpn_params(&mut store, "fpn", &cfg, &mut rng(8)).unwrap();
        perturbed(&mut store, 0.5, 9);
        let ins: Vec<Tensor> = (0..4)
            .map(|s| Tensor::randn(&[cfg.widths[s], 16 >> s, 16 >> s], 1.0, &mut rng(10 + s as u64)))
            .collect();
        let lateral = |i: usize, x: &Tensor| -> Vec<Vec<Vec<f64>>> {
            let w = &store.by_name(&format!("fpn.lateral{i}.weight")).unwrap().value;
            let b = &store.by_name(&format!("fpn.lateral{i}.bias")).unwrap().value;
            let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            (0..f)
                .map(|o| {
                    (0..h)
                        .map(|r| {
                            (0..wd)
                                .map(|q| b.data()[o] + (0..c).map(|k| w.get(&[o, k, 0, 0]) * x.get(&[k, r, q])).sum::<f64>())
                                .collect()
                        })
                        .collect()
                })
                .collect()
        };
        let mut want = vec![lateral(5, &ins[3])];
        for i in (2..=4).rev() {
            let mut l = lateral(i, &ins[i - 2]);
            let above = want.last().unwrap().clone();
            for (o, plane) in l.iter_mut().enumerate() {
                for (r, row) in plane.iter_mut().enumerate() {
                    for (q, v) in row.iter_mut().enumerate() {
                        *v += above[o][r / 2][q / 2];
                    }
                }
            }
            want.push(l);
        }
        let mut tape = Tape::inference();
        let c: Vec<Var> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        let p = fpn_fuse(&mut tape, &[c[0], c[1], c[2], c[3]], &store, "fpn").unwrap();
        for (k, lvl) in [(3usize, 0usize), (2, 1), (1, 2), (0, 3)] {
            let got = tape.value(p[k]);
            for o in 0..f {
                for (r, row) in want[lvl][o].iter().enumerate() {
                    for (q, v) in row.iter().enumerate() {
                        assert!((got.get(&[o, r, q]) - v).abs() < 1e-12);
                    }
                }
            }
        }
        let p6 = tape.value(p[4]);
        assert_eq!(p6.shape(), &[f, 1, 1]);
        for o in 0..f {
            let m = want[0][o].iter().flatten().cloned().fold(f64::MIN, f64::max);
            assert_eq!(p6.get(&[o, 0, 0]), m);
        }
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        init_pyramid_params(&mut store, &cfg, &mut rng(20)).unwrap();
        perturbed(&mut store, 0.1, 21);
        let mut tape = Tape::new();
        let img = tape.constant(Tensor::randn(&[3, 32, 32], 1.0, &mut rng(22)));
        let p = pyramid_forward(&mut tape, img, &cfg, &store).unwrap();
        let mut total = None;
        for (k, v) in p.iter().enumerate() {
            let probe = tape.constant(Tensor::randn(tape.shape(*v), 1.0, &mut rng(30 + k as u64)));
            let m = tape.mul(*v, probe).unwrap();
            let s = tape.sum(m).unwrap();
            total = Some(match total {
                None => s,
                Some(t) => tape.add(t, s).unwrap(),
            });
        }
        tape.backward(total.unwrap(), &mut store).unwrap();
        for p in store.iter() {
            assert!(p.grad.data().iter().any(|g| *g != 0.0), "{} has zero gradient", p.name);
        }
    }

    #[test]
    fn encoder_and_fpn_gradients() {
        let mut cfg = small_cfg();
        cfg.widths = [2, 4, 8, 16];
        cfg.heads = [1, 1, 2, 2];
        cfg.fpn_channels = 3;
        cfg.patch = 1;
        let mut store = ParamStore::new();
        init_pyramid_params(&mut store, &cfg, &mut rng(40)).unwrap();
        perturbed(&mut store, 0.2, 41);
        let img = Tensor::randn(&[3, 16, 16], 1.0, &mut rng(42));
        let probes: Vec<Tensor> = [16usize, 8, 4, 2, 1]
            .iter()
            .enumerate()
            .map(|(k, &e)| Tensor::randn(&[3, e, e], 1.0, &mut rng(50 + k as u64)))
            .collect();
        let report = gradcheck::check(&mut store, &[img], 2, &mut rng(43), |tape, s, ins| {
            let p = pyramid_forward(tape, ins[0], &cfg, s)?;
            let mut total = None;
            for (v, probe) in p.iter().zip(&probes) {
                let w = tape.constant(probe.clone());
                let m = tape.mul(*v, w)?;
                let sm = tape.sum(m)?;
                total = Some(match total {
                    None => sm,
                    Some(t) => tape.add(t, sm)?,
                });
            }
            Ok(total.unwrap())
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "{report:?}");
    }

    #[test]
    fn deterministic() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        init_pyramid_params(&mut store, &cfg, &mut rng(60)).unwrap();
        let img = Tensor::randn(&[3, 32, 32], 1.0, &mut rng(61));
        let run = || {
            let mut tape = Tape::inference();
            let iv = tape.constant(img.clone());
            let p = pyramid_forward(&mut tape, iv, &cfg, &store).unwrap();
            p.iter().map(|v| tape.value(*v).clone()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn levels_halve(hm in 2usize..5, wm in 2usize..5) {
            let cfg = small_cfg();
            let mut store = ParamStore::new();
            init_pyramid_params(&mut store, &cfg, &mut rng(70)).unwrap();
            let (h, w) = (hm * 16, wm * 16);
            let mut tape = Tape::inference();
            let img = tape.constant(Tensor::zeros(&[3, h, w]));
            let p = pyramid_forward(&mut tape, img, &cfg, &store).unwrap();
            for (k, lvl) in LEVELS.iter().enumerate().take(4) {
                let d = 1 << lvl;
                prop_assert_eq!(tape.shape(p[k]), &[cfg.fpn_channels, h * 2 / d, w * 2 / d]);
            }
            prop_assert_eq!(tape.shape(p[4]), &[cfg.fpn_channels, h / 32, w / 32]);
        }
    }
}
