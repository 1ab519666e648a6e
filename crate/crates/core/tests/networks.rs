mod common;

use common::*;
use facecomp_core::code::FaceCode;
use facecomp_core::geometry::{BoxSet, ComponentId, Rect};
use facecomp_core::imaging::Image;
use facecomp_core::networks::{
    box_mask, cam_apply, crop, CodeTensors, DecoderMode, FaceModel, ModelConfig, ModulatedConv2d,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tch::{Kind, Tensor};

#[test]
fn unit_style_on_normalised_weights_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = randn(&mut rng, &[4, 3, 3, 3], Kind::Double);
    let norm = w.square().sum_dim_intlist([1i64, 2, 3].as_slice(), true, Kind::Double).sqrt();
    let w = w / norm;
    let conv = ModulatedConv2d::from_weight(w.shallow_clone(), true);
    let eff = conv.effective_weights(&Tensor::ones([1, 3], (Kind::Double, tch::Device::Cpu)));
    assert!(max_abs(&(eff.squeeze_dim(0) - w)) < 1e-6);
}

#[test]
fn demodulation_norms_and_scale_invariance() {
    let (norm_dev, scale_dev) = modulation_invariants(7);
    assert!(norm_dev < 1e-3, "{norm_dev}");
    assert!(scale_dev < 1e-5, "{scale_dev}");
}

#[test]
fn cam_apply_identity_and_constant_grid() {
    let r = 8;
    let b = Rect::new(2, 1, 5, 4);
    let masks: [Tensor; 4] = std::array::from_fn(|i| {
        let rect = [b, Rect::new(0, 6, 1, 8), Rect::new(6, 6, 8, 8), Rect::new(7, 0, 8, 2)][i];
        box_mask(rect, r)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = randn(&mut rng, &[2, 3, 8, 8], Kind::Float);
    let ones: [Tensor; 4] = std::array::from_fn(|_| Tensor::ones([2, 3], (Kind::Float, tch::Device::Cpu)));
    assert!(cam_apply(&x, &ones, &masks).equal(&x));

    let grid = Tensor::ones([1, 3, 8, 8], (Kind::Float, tch::Device::Cpu));
    let mut sig: [Tensor; 4] = std::array::from_fn(|_| Tensor::ones([1, 3], (Kind::Float, tch::Device::Cpu)));
    sig[0] = sig[0].shallow_clone() * 2.0;
    let out = to_vec(&cam_apply(&grid, &sig, &masks));
    for c in 0..3 {
        for y in 0..8 {
            for xx in 0..8 {
                let want = if b.contains(y, xx) { 2.0 } else { 1.0 };
                assert_eq!(out[(c * 8 + y) * 8 + xx], want);
            }
        }
    }
}

#[test]
fn cam_overlap_goes_to_the_later_component() {
    let r = 4;
    let masks: [Tensor; 4] = std::array::from_fn(|i| {
        let rect = [Rect::new(0, 0, 2, 2), Rect::new(0, 2, 2, 4), Rect::new(1, 1, 3, 3), Rect::new(2, 0, 4, 4)][i];
        box_mask(rect, r)
    });
    let sig: [Tensor; 4] =
        std::array::from_fn(|i| Tensor::full([1, 1], (i + 2) as f64, (Kind::Double, tch::Device::Cpu)));
    let out = to_vec(&cam_apply(&Tensor::ones([1, 1, 4, 4], (Kind::Double, tch::Device::Cpu)), &sig, &masks));
    // nose (index 2) is applied first, so eyes and mouth win where they overlap it
    assert_eq!(out[5], 2.0);
    assert_eq!(out[6], 3.0);
    assert_eq!(out[9], 5.0);
    assert_eq!(out[10], 5.0);
}

#[test]
fn cam_locality_on_a_random_decoder() {
    let m = model(ModelConfig::tiny(DecoderMode::Cam));
    randomize(&m, 11, 0.5);
    let rep = cam_locality(&m, 3, 5);
    assert_eq!(rep.leaked_cells, 0);
    assert_eq!(rep.active_pairs, rep.checked_pairs);
}

#[test]
fn decode_shapes_and_zero_embedding_intervention() {
    let m = model(ModelConfig::tiny(DecoderMode::GlobalModulation));
    let img = Image::filled(16, 16, [0.3, 0.5, 0.7]);
    let code = m.encode(&img).unwrap();
    let out = m.decode(&code).unwrap();
    assert_eq!((out.height, out.width), (16, 16));
    assert!(out.data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));

    let mut zero = code.clone();
    for c in &mut zero.components {
        c.iter_mut().for_each(|v| *v = 0.0);
    }
    let out = m.decode(&zero).unwrap();
    assert!(out.data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
}

#[test]
fn encoder_is_deterministic_and_decode_rejects_bad_codes() {
    let m = model(ModelConfig::tiny(DecoderMode::Cam));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Image {
        height: 16,
        width: 16,
        data: to_vec(&uniform(&mut rng, &[3 * 16 * 16], Kind::Float)).iter().map(|v| *v as f32).collect(),
    };
    assert_eq!(m.encode(&x).unwrap(), m.encode(&x).unwrap());
    let mut code = m.encode(&x).unwrap();
    code.components[2].push(0.0);
    assert!(m.decode(&code).is_err());
    assert!(m.encode(&Image::new(8, 8)).is_err());
}

#[test]
fn component_gradient_vanishes_outside_receptive_field() {
    let mut m = model(ModelConfig::tiny(DecoderMode::Cam));
    m.to_double();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = uniform(&mut rng, &[1, 3, 16, 16], Kind::Double).set_requires_grad(true);
    for c in ComponentId::ALL {
        let e = m.encoder.forward(&x).unwrap();
        let z = &e.components[c.index()];
        let g = Tensor::run_backward(&[z.square().sum(Kind::Double)], &[&x], false, false).remove(0);
        let rf = m.encoder.receptive_field(m.encoder.latent_boxes().get(c));
        let g = to_vec(&g.abs().sum_dim_intlist([0i64, 1].as_slice(), false, Kind::Double));
        let mut inside_mass = 0.0;
        for (i, v) in g.iter().enumerate() {
            if rf.contains(i / 16, i % 16) {
                inside_mass += v;
            } else {
                assert_eq!(*v, 0.0, "{c} pixel {i} outside {rf}");
            }
        }
        assert!(inside_mass > 0.0);
    }
}

#[test]
fn far_pixel_changes_only_the_icon() {
    let m = model(ModelConfig::tiny(DecoderMode::Cam));
    let boxes = BoxSet::default_for(16).unwrap();
    let (py, px) = (0, 0);
    for c in ComponentId::ALL {
        assert!(!boxes.get(c).contains(py, px));
        assert!(!m.encoder.receptive_field(m.encoder.latent_boxes().get(c)).contains(py, px));
    }
    let a = Image::filled(16, 16, [0.4, 0.4, 0.4]);
    let mut b = a.clone();
    b.set(0, py, px, 1.0);
    let (ca, cb) = (m.encode(&a).unwrap(), m.encode(&b).unwrap());
    assert_eq!(ca.components, cb.components);
    assert_ne!(ca.icon, cb.icon);
}

#[test]
fn crop_takes_box_values() {
    let t = Tensor::arange(2 * 4 * 4, (Kind::Float, tch::Device::Cpu)).view([1, 2, 4, 4]);
    let c = crop(&t, Rect::new(1, 2, 3, 4));
    assert_eq!(c.size(), vec![1, 2, 2, 2]);
    assert_eq!(to_vec(&c), vec![6.0, 7.0, 10.0, 11.0, 22.0, 23.0, 26.0, 27.0]);
}

#[test]
fn discriminator_is_deterministic_and_batch_aligned() {
    let m = model(ModelConfig::tiny(DecoderMode::Cam));
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = uniform(&mut rng, &[3, 3, 16, 16], Kind::Float);
    let s = to_vec(&m.discriminator.forward(&x).unwrap());
    assert_eq!(s, to_vec(&m.discriminator.forward(&x).unwrap()));
    for i in 0..3 {
        let single = to_vec(&m.discriminator.forward(&x.narrow(0, i, 1)).unwrap());
        assert!((single[0] - s[i as usize]).abs() < 1e-5);
    }
}

#[test]
fn discriminator_input_gradient_matches_finite_differences() {
    // 32-bit autodiff checked against central differences on the 64-bit copy
    let m32 = model(ModelConfig::tiny(DecoderMode::Cam));
    let mut m64 = model(ModelConfig::tiny(DecoderMode::Cam));
    m64.to_double();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x64 = uniform(&mut rng, &[1, 3, 16, 16], Kind::Double);
    let x32 = x64.to_kind(Kind::Float).set_requires_grad(true);
    let score = m32.discriminator.forward(&x32).unwrap().sum(Kind::Float);
    let g = to_vec(&Tensor::run_backward(&[score], &[&x32], false, false)[0]);
    for idx in [5i64, 300, 700] {
        let h = 1e-5;
        let eval = |d: f64| {
            let x = x64.copy();
            let _ = x.view([-1]).get(idx).g_add_scalar_(d);
            f64::try_from(m64.discriminator.forward(&x).unwrap().sum(Kind::Double)).unwrap()
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        let rel = (g[idx as usize] - numeric).abs() / numeric.abs().max(1e-6);
        assert!(g[idx as usize].is_finite());
        assert!(rel < 1e-2, "pixel {idx}: {} vs {numeric}", g[idx as usize]);
    }
}

#[test]
fn gradients_match_finite_differences_in_double_precision() {
    let checks = gradient_check(21, 20);
    assert_eq!(checks.len(), 60);
    for (module, name, rel, _) in &checks {
        assert!(*rel < 1e-3, "{module} {name}: {rel}");
    }
    let nonzero = checks.iter().filter(|c| c.3.abs() > 1e-6).count();
    assert!(nonzero >= 45, "only {nonzero} non-trivial gradients");
}

#[test]
fn icon_ablation_shapes_construct_and_run() {
    // 1x1, 4x4, 8x8, 16x16 icons with many channels and a 16x16x1 icon
    for (mode, size, channels) in [
        (DecoderMode::GlobalModulation, 1, 64),
        (DecoderMode::Cam, 4, 64),
        (DecoderMode::Cam, 8, 64),
        (DecoderMode::Cam, 16, 64),
        (DecoderMode::Cam, 16, 1),
    ] {
        let mut cfg = ModelConfig::desk(mode);
        cfg.encoder.down_blocks = 2;
        cfg.encoder.icon_size = size;
        cfg.encoder.icon_channels = channels;
        let m = FaceModel::new(cfg, BoxSet::default_for(64).unwrap()).unwrap();
        let code = m.encode(&Image::filled(64, 64, [0.5, 0.5, 0.5])).unwrap();
        assert_eq!(code.icon.shape(), [channels, size, size]);
        let out = m.decode(&code).unwrap();
        assert_eq!(out.height, 64);
    }
}

#[test]
fn code_tensor_round_trip() {
    let m = model(ModelConfig::tiny(DecoderMode::Cam));
    let code = m.encode(&Image::filled(16, 16, [0.1, 0.2, 0.3])).unwrap();
    let t = CodeTensors::from_codes(std::slice::from_ref(&code), Kind::Double);
    let back: Vec<FaceCode> = t.to_codes();
    assert_eq!(back[0], code);
}
