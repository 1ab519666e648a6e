#![allow(dead_code)]

pub mod oracles;

use facecomp_core::geometry::{BoxSet, Rect};
use facecomp_core::networks::{DecoderMode, FaceModel, ModelConfig, ModulatedConv2d, NoiseGrids};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tch::{Device, Kind, Tensor};

pub fn model(config: ModelConfig) -> FaceModel {
    let boxes = BoxSet::default_for(config.image_resolution()).unwrap();
    FaceModel::new(config, boxes).unwrap()
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[i64], kind: Kind) -> Tensor {
    let n: i64 = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::from_slice(&v).view(shape).to_kind(kind)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[i64], kind: Kind) -> Tensor {
    let n: i64 = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    Tensor::from_slice(&v).view(shape).to_kind(kind)
}

/// Overwrite every parameter with `N(0, std^2)` noise (gives the CAM heads,
/// biases and noise strengths non-trivial values).
pub fn randomize(model: &FaceModel, seed: u64, std: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    tch::no_grad(|| {
        for (_, mut p) in model.named_parameters() {
            let r = randn(&mut rng, &p.size(), p.kind()) * std;
            p.copy_(&r);
        }
    });
}

pub fn max_abs(t: &Tensor) -> f64 {
    f64::try_from(t.abs().max()).unwrap()
}

/// Boolean `[R, R]` grid marking the cells of `b`.
pub fn inside(b: Rect, r: usize) -> Vec<bool> {
    (0..r * r).map(|i| b.contains(i / r, i % r)).collect()
}

pub fn to_vec(t: &Tensor) -> Vec<f64> {
    Vec::<f64>::try_from(t.to_kind(Kind::Double).contiguous().view([-1])).unwrap()
}

/// Outcome of one CAM locality sweep.
#[derive(Debug, Default)]
pub struct LocalityReport {
    /// Cells outside `b_i^k` that changed (must be 0).
    pub leaked_cells: usize,
    /// Layer/component pairs where some inside cell changed.
    pub active_pairs: usize,
    pub checked_pairs: usize,
}

/// For random codes, perturb one component embedding at a time and compare
/// each layer's component modulation applied to the same incoming features.
pub fn cam_locality(model: &FaceModel, trials: usize, seed: u64) -> LocalityReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = model.config();
    let [ic, is, _] = cfg.encoder.icon_shape();
    let d = cfg.encoder.embedding_dim as i64;
    let kind = model.kind();
    let dec = &model.decoder;
    let mut report = LocalityReport::default();
    let _g = tch::no_grad_guard();
    for _ in 0..trials {
        let icon = randn(&mut rng, &[1, ic as i64, is as i64, is as i64], kind);
        let comps: [Tensor; 4] = std::array::from_fn(|_| randn(&mut rng, &[1, d], kind));
        let trace = dec.trace(&icon, &comps).unwrap();
        for i in 0..4 {
            let mut other: [Tensor; 4] = std::array::from_fn(|j| comps[j].shallow_clone());
            other[i] = randn(&mut rng, &[1, d], kind);
            for k in 0..dec.num_layers() {
                let x = &trace.pre_cam[k];
                let a = dec.apply_cam(k, x, &comps).unwrap();
                let b = dec.apply_cam(k, x, &other).unwrap();
                let r = dec.layer_resolution(k);
                let boxr = dec.latent_boxes(k).unwrap().boxes[i];
                let mask = inside(boxr, r);
                let diff = to_vec(&(a - b).abs().amax([1].as_slice(), false));
                let mut changed_inside = false;
                for (cell, dv) in diff.iter().enumerate() {
                    if mask[cell] {
                        changed_inside |= *dv != 0.0;
                    } else if *dv != 0.0 {
                        report.leaked_cells += 1;
                    }
                }
                report.checked_pairs += 1;
                report.active_pairs += changed_inside as usize;
            }
        }
    }
    report
}

/// `(max |norm - 1|, max scale-invariance deviation)` over random layers.
pub fn modulation_invariants(seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut norm_dev: f64 = 0.0;
    let mut scale_dev: f64 = 0.0;
    for trial in 0..10 {
        let (o, i, k) = (2 + trial % 5, 3 + trial % 7, if trial % 2 == 0 { 3 } else { 1 });
        let w = randn(&mut rng, &[o as i64, i as i64, k, k], Kind::Float);
        let conv = ModulatedConv2d::from_weight(w, true);
        let s = uniform(&mut rng, &[4, i as i64], Kind::Float) * 2.0 + 0.05;
        let eff = conv.effective_weights(&s);
        let norms = eff.square().sum_dim_intlist([2i64, 3, 4].as_slice(), false, Kind::Float).sqrt();
        norm_dev = norm_dev.max(max_abs(&(norms - 1.0)));
        for lambda in [0.1, 3.0, 42.0] {
            let scaled = conv.effective_weights(&(&s * lambda));
            scale_dev = scale_dev.max(max_abs(&(scaled - &eff)));
        }
    }
    (norm_dev, scale_dev)
}

/// Autodiff against central differences for `per_module` random scalar
/// parameters of the encoder, decoder and discriminator of a 64-bit model.
/// Returns `(module, parameter name, relative error, analytic gradient)`.
pub fn gradient_check(seed: u64, per_module: usize) -> Vec<(String, String, f64, f64)> {
    let mut model = model(ModelConfig::tiny(DecoderMode::Cam));
    model.to_double();
    randomize(&model, seed, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let kind = Kind::Double;
    let r = model.resolution() as i64;
    let x = uniform(&mut rng, &[2, 3, r, r], kind);
    let cfg = model.config().clone();
    let [ic, is, _] = cfg.encoder.icon_shape();
    let d = cfg.encoder.embedding_dim as i64;
    let icon = randn(&mut rng, &[2, ic as i64, is as i64, is as i64], kind);
    let comps: [Tensor; 4] = std::array::from_fn(|_| randn(&mut rng, &[2, d], kind));
    let noise = NoiseGrids::sample(&model.decoder.noise_shapes(2), &mut rng, kind);
    let w_img = randn(&mut rng, &[2, 3, r, r], kind);
    let w_icon = randn(&mut rng, &[2, ic as i64, is as i64, is as i64], kind);
    let w_comp: Vec<Tensor> = (0..4).map(|_| randn(&mut rng, &[2, d], kind)).collect();
    let w_score = randn(&mut rng, &[2], kind);

    let loss = |module: &str| -> Tensor {
        match module {
            "encoder" => {
                let e = model.encoder.forward(&x).unwrap();
                let mut l = (&e.icon * &w_icon).sum(kind);
                for i in 0..4 {
                    l += (&e.components[i] * &w_comp[i]).sum(kind);
                }
                l
            }
            "decoder" => {
                let img = model.decoder.forward(&icon, &comps, Some(&noise.0)).unwrap();
                (img * &w_img).sum(kind)
            }
            _ => (model.discriminator.forward(&x).unwrap() * &w_score).sum(kind),
        }
    };

    let mut out = Vec::new();
    for module in ["encoder", "decoder", "discriminator"] {
        let params: Vec<(String, Tensor)> = model
            .named_parameters()
            .into_iter()
            .filter(|(n, _)| n.starts_with(module))
            .collect();
        let tensors: Vec<&Tensor> = params.iter().map(|(_, t)| t).collect();
        let grads = Tensor::run_backward(&[loss(module)], &tensors, false, false);
        for _ in 0..per_module {
            let pi = rng.random_range(0..params.len());
            let (name, p) = &params[pi];
            let idx = rng.random_range(0..p.numel()) as i64;
            let analytic = f64::try_from(grads[pi].view([-1]).get(idx)).unwrap();
            let h = 1e-6;
            let eval = |delta: f64| -> f64 {
                tch::no_grad(|| {
                    let _ = p.view([-1]).get(idx).g_add_scalar_(delta);
                    let v = f64::try_from(loss(module)).unwrap();
                    let _ = p.view([-1]).get(idx).g_add_scalar_(-delta);
                    v
                })
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            out.push((module.to_string(), name.clone(), rel, analytic));
        }
    }
    out
}

pub fn device() -> Device {
    Device::Cpu
}
