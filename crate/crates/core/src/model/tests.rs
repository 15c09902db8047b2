use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::attention::is_residual_output;
use crate::autodiff::gradcheck;

fn tiny(fusion: FusionMode) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            in_channels: 3,
            patch: 1,
            depths: [1, 1, 1, 1],
            widths: [4, 8, 16, 32],
            heads: [1, 1, 2, 2],
            window: 2,
            mlp_ratio: 1.0,
            use_relative_bias: true,
            fpn_channels: 4,
        },
        fusion,
        slices: 3,
        attention: FusionAttention {
            heads: 2,
            window: 2,
            mlp_ratio: 1.0,
            use_relative_bias: true,
        },
        head: HeadConfig {
            tower_channels: 4,
            prior: 0.01,
        },
        score_threshold: 0.0,
        nms_iou: 0.5,
    }
}

fn volume(depth: usize, seed: u64) -> Tensor {
    Tensor::uniform(&[depth, 16, 16], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn raw_outputs(det: &Detector, vol: &Tensor, t: usize) -> Vec<Tensor> {
    let mut tape = Tape::inference();
    let preds = det.forward(&mut tape, vol, t).unwrap();
    preds
        .iter()
        .flat_map(|p| [tape.value(p.logits).clone(), tape.value(p.boxes).clone()])
        .collect()
}

#[test]
fn slice_image_zero_pads_the_ends() {
    let v = volume(3, 1);
    let first = slice_image(&v, 0).unwrap();
    assert!(first.data()[..256].iter().all(|&x| x == 0.0));
    assert_eq!(&first.data()[256..], &v.data()[..512]);
    let last = slice_image(&v, 2).unwrap();
    assert_eq!(&last.data()[..512], &v.data()[256..]);
    assert!(last.data()[512..].iter().all(|&x| x == 0.0));
    assert!(matches!(slice_image(&v, 3), Err(Error::Index { index: 3, len: 3 })));
}

#[test]
fn detections_carry_their_slice() {
    let det = Detector::new(tiny(FusionMode::Vdformer), 3).unwrap();
    let v = volume(5, 2);
    for t in [0, 2, 4] {
        let boxes = det.detect_slice(&v, t).unwrap();
        assert!(!boxes.is_empty());
        assert!(boxes.iter().all(|b| b.slice == t && b.is_valid()));
        assert!(boxes.iter().all(|b| b.x1 >= 0.0 && b.x2 <= 16.0 && b.y1 >= 0.0 && b.y2 <= 16.0));
    }
    assert!(matches!(det.detect_slice(&v, 5), Err(Error::Index { index: 5, len: 5 })));
}

#[test]
fn identity_fusion_matches_no_fusion() {
    let mut vd = Detector::new(tiny(FusionMode::Vdformer), 4).unwrap();
    // 5 levels × 3 views × 2 blocks × (proj, fc2) × (weight, bias)
    let zeroed = vd.params.zero_where(|n| n.starts_with("vdformer.") && is_residual_output(n));
    assert_eq!(zeroed, 5 * 3 * 2 * 4);
    let none = Detector::with_params(tiny(FusionMode::None), vd.params.clone()).unwrap();
    let v = volume(4, 5);
    for t in 0..4 {
        assert_eq!(raw_outputs(&vd, &v, t), raw_outputs(&none, &v, t));
        assert_eq!(vd.detect_slice(&v, t).unwrap(), none.detect_slice(&v, t).unwrap());
    }
}

#[test]
fn reach_of_each_mode() {
    let v = volume(7, 6);
    let mut far = v.clone();
    for x in &mut far.data_mut()[5 * 256..6 * 256] {
        *x += 0.5;
    }
    let mut near = v.clone();
    for x in &mut near.data_mut()[4 * 256..5 * 256] {
        *x += 0.5;
    }
    // slice 5 is t + 2, slice 4 is t + 1
    let none = Detector::new(tiny(FusionMode::None), 7).unwrap();
    assert_eq!(raw_outputs(&none, &v, 3), raw_outputs(&none, &far, 3));
    assert_ne!(raw_outputs(&none, &v, 3), raw_outputs(&none, &near, 3));
    for mode in [FusionMode::Vdformer, FusionMode::C3d, FusionMode::P3d] {
        let det = Detector::new(tiny(mode), 7).unwrap();
        assert_ne!(raw_outputs(&det, &v, 3), raw_outputs(&det, &far, 3), "{mode:?}");
    }
}

#[test]
fn volume_detection_equals_per_slice_detection() {
    let det = Detector::new(tiny(FusionMode::Vdformer), 8).unwrap();
    let v = volume(4, 9);
    let per_slice: Vec<LesionBox> = (0..4).flat_map(|t| det.detect_slice(&v, t).unwrap()).collect();
    assert_eq!(det.detect_volume(&v).unwrap(), per_slice);
    let again = Detector::new(tiny(FusionMode::Vdformer), 8).unwrap();
    assert_eq!(again.detect_volume(&v).unwrap(), per_slice);
}

#[test]
fn config_problems_are_listed() {
    let mut cfg = tiny(FusionMode::Vdformer);
    cfg.slices = 4;
    cfg.backbone.in_channels = 1;
    cfg.attention.heads = 3;
    let bad = cfg.problems();
    assert_eq!(bad.len(), 3, "{bad:?}");
    assert!(matches!(Detector::new(cfg, 0), Err(Error::Validation(_))));
}

#[test]
fn end_to_end_gradients() {
    let v = volume(3, 10);
    let gt = [LesionBox::new(1, 2.0, 3.0, 9.0, 8.0), LesionBox::new(1, 10.0, 10.0, 13.0, 15.0)];
    for mode in [FusionMode::Vdformer, FusionMode::None] {
        let det = Detector::new(tiny(mode), 11).unwrap();
        let mut store = det.params.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let report = gradcheck::check(&mut store, &[], 2, &mut rng, |tape, s, _| {
            Ok(det.loss_with(tape, s, &v, 1, &gt)?.total)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "{mode:?}: {report:?}");
        assert!(report.checked > 100);
    }
}

#[test]
fn loss_is_finite_and_positive() {
    let det = Detector::new(tiny(FusionMode::C3d), 13).unwrap();
    let v = volume(3, 14);
    let mut tape = Tape::new();
    let l = det.loss(&mut tape, &v, 0, &[LesionBox::new(0, 0.0, 0.0, 16.0, 16.0)]).unwrap();
    let total = tape.value(l.total).data()[0];
    assert!(total.is_finite() && total > 0.0);
    let mut store = det.params.clone();
    tape.backward(l.total, &mut store).unwrap();
    for name in ["backbone.patch_embed.weight", "fpn.lateral2.weight", "c3d.level6.bias", "head.cls.bias"] {
        let g = &store.by_name(name).unwrap().grad;
        assert!(g.data().iter().any(|&x| x != 0.0), "{name}");
    }
}
