use super::*;
use crate::physics::{Decoder, DecoderConfig, ImagingParams, OpticsConfig, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn tiny(head: HeadKind) -> EncoderConfig {
    EncoderConfig { n: 16, filters: [3, 4, 5], mlp: alloc::vec![12, 10], head, activation: Activation::Relu }
}

fn random_image(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n * n).map(|_| r.gen_range(-1.0..1.0)).collect()
}

#[test]
fn same_seed_same_weights() {
    let cfg = tiny(HeadKind::S2s2);
    assert_eq!(EncoderWeights::init(&cfg, &mut rng(1)), EncoderWeights::init(&cfg, &mut rng(1)));
    assert_ne!(EncoderWeights::init(&cfg, &mut rng(1)), EncoderWeights::init(&cfg, &mut rng(2)));
}

#[test]
fn weight_variance_is_two_over_fan_in() {
    let cfg = EncoderConfig::standard(32, HeadKind::Quaternion);
    let w = EncoderWeights::init(&cfg, &mut rng(3));
    for ((name, shape), t) in cfg.manifest().iter().zip(w.tensors()) {
        assert!(t.iter().all(|v| v.is_finite() && *v != 0.0), "{name}");
        if name.ends_with(".weight") && t.len() >= 10_000 {
            let fan = if shape.len() == 4 { shape[1] * 9 } else { shape[0] };
            let var = t.iter().map(|v| v * v).sum::<f64>() / t.len() as f64;
            let target = 2.0 / fan as f64;
            assert!((var / target - 1.0).abs() < 0.2, "{name}: {var} vs {target}");
        }
    }
}

#[test]
fn standard_geometry_and_parameter_count() {
    let cfg = EncoderConfig::standard(32, HeadKind::S2s2);
    assert_eq!(cfg.flatten_len(), 2048);
    assert_eq!(cfg.param_count(), 1_601_254);
    let q = EncoderConfig::standard(32, HeadKind::Euler);
    assert_eq!(q.param_count(), 1_601_254 - 3 * 512 - 3);
    assert_eq!(tiny(HeadKind::Euler).param_count(), 1204);
}

#[test]
fn output_length_follows_the_head() {
    let mut r = rng(4);
    let img = random_image(&mut r, 16);
    for head in HeadKind::ALL {
        let cfg = tiny(head);
        let w = EncoderWeights::init(&cfg, &mut r);
        assert_eq!(encode(&cfg, &w, &img).unwrap().len(), if head == HeadKind::S2s2 { 6 } else { 3 });
    }
}

#[test]
fn wrong_image_size_is_rejected() {
    let cfg = tiny(HeadKind::Euler);
    let w = EncoderWeights::init(&cfg, &mut rng(5));
    assert_eq!(encode(&cfg, &w, &[0.0; 10]), Err(EncoderError::ImageSize { expected: 256, found: 10 }));
}

#[test]
fn encoding_is_bit_deterministic_and_valid() {
    let mut r = rng(6);
    let img = random_image(&mut r, 16);
    for head in HeadKind::ALL {
        let cfg = tiny(head);
        let w = EncoderWeights::init(&cfg, &mut r);
        let a = encode_to_rotation(&cfg, &w, &img).unwrap();
        let b = encode_to_rotation(&cfg, &w, &img).unwrap();
        assert_eq!(a, b);
        assert!(a.rotation.is_valid(1e-9));
    }
}

#[test]
fn zero_euler_head_gives_identity() {
    let cfg = tiny(HeadKind::Euler);
    let mut w = EncoderWeights::init(&cfg, &mut rng(7));
    let k = w.tensors().len();
    for t in &mut w.tensors_mut()[k - 2..] {
        t.iter_mut().for_each(|v| *v = 0.0);
    }
    let mut r = rng(8);
    for _ in 0..3 {
        let p = encode_to_rotation(&cfg, &w, &random_image(&mut r, 16)).unwrap();
        assert_eq!(p.rotation, RotationMatrix::IDENTITY);
    }
}

#[test]
fn gradient_reaches_the_input() {
    let cfg = tiny(HeadKind::Quaternion);
    let mut r = rng(9);
    let w = EncoderWeights::init(&cfg, &mut r);
    let img = random_image(&mut r, 16);
    let out_sum = |img: &[f64], grad: bool| {
        let mut g = Graph::new();
        let t = Tensor::real(&[1, 16, 16], img.to_vec());
        let x = if grad { g.param(t) } else { g.constant(t) };
        let p = w.register(&cfg, &mut g, false);
        let y = encode_graph(&mut g, &cfg, &p, x);
        let l = g.sum(y);
        let v = g.value(l).item();
        (v, grad.then(|| g.backward(l).unwrap().take(x).unwrap().into_real()))
    };
    let ad = out_sum(&img, true).1.unwrap();
    let pix = 7 * 16 + 9;
    let h = 1e-6;
    let mut up = img.clone();
    up[pix] += h;
    let mut dn = img.clone();
    dn[pix] -= h;
    let fd = (out_sum(&up, false).0 - out_sum(&dn, false).0) / (2.0 * h);
    assert!(fd.abs() > 1e-8);
    assert!((ad[pix] - fd).abs() < 1e-6 * fd.abs().max(1.0));
}

/// Squared error between the decoder image at the encoder's pose and a
/// target, as a function of the encoder weights.
fn end_to_end_loss(cfg: &EncoderConfig, w: &EncoderWeights, vol: &Volume, images: &[Vec<f64>], grad: bool) -> (f64, Option<Vec<Vec<f64>>>) {
    let n = cfg.n;
    let dec = Decoder::new(n, DecoderConfig::default(), OpticsConfig::default()).unwrap();
    let mut g = Graph::new();
    let refs: Vec<&[f64]> = images.iter().map(|v| v.as_slice()).collect();
    let x = g.constant(normalized_batch(cfg, &refs).unwrap());
    let params = w.register(cfg, &mut g, grad);
    let raw = encode_graph(&mut g, cfg, &params, x);
    let rot = g.rotation_head(raw, cfg.head);
    let v = g.constant(vol.tensor());
    let fv = dec.fourier_volume(&mut g, v);
    let filters = dec.filters(&alloc::vec![ImagingParams::from_rotation(RotationMatrix::IDENTITY); images.len()]);
    let yhat = dec.project(&mut g, fv, rot, &filters);
    let y = g.constant(Tensor::real(&[images.len(), n, n], images.concat()));
    let d = g.sub(yhat, y);
    let d2 = g.mul(d, d);
    let l = g.sum(d2);
    let val = g.value(l).item();
    let grads = grad.then(|| {
        let mut gr = g.backward(l).unwrap();
        params.iter().map(|p| gr.take(*p).unwrap().into_real()).collect()
    });
    (val, grads)
}

#[test]
fn end_to_end_weight_gradient_matches_finite_differences() {
    let mut r = rng(10);
    let n = 16;
    let vol = Volume::from_fn(n, 1.0, |p| {
        libm::exp(-((p[0] - 2.0).powi(2) + p[1].powi(2) + (p[2] + 1.0).powi(2)) / 4.0)
            + 0.5 * libm::exp(-((p[0] + 2.0).powi(2) + (p[1] - 3.0).powi(2) + p[2].powi(2)) / 3.0)
    })
    .unwrap();
    let dec = Decoder::new(n, DecoderConfig::default(), OpticsConfig::default()).unwrap();
    let images: Vec<Vec<f64>> = (0..2)
        .map(|_| dec.forward_project(&vol, &ImagingParams::from_rotation(so3::sample_uniform_rotation(&mut r))))
        .collect();
    for head in HeadKind::ALL {
        let cfg = tiny(head);
        let w = EncoderWeights::init(&cfg, &mut r);
        let ad = end_to_end_loss(&cfg, &w, &vol, &images, true).1.unwrap();
        let h = 1e-6;
        let (mut num, mut den) = (0.0, 0.0);
        for _ in 0..10 {
            let t = r.gen_range(0..w.tensors().len());
            let i = r.gen_range(0..w.tensors()[t].len());
            let mut up = w.clone();
            up.tensors_mut()[t][i] += h;
            let mut dn = w.clone();
            dn.tensors_mut()[t][i] -= h;
            let fd = (end_to_end_loss(&cfg, &up, &vol, &images, false).0
                - end_to_end_loss(&cfg, &dn, &vol, &images, false).0)
                / (2.0 * h);
            num += (ad[t][i] - fd).powi(2);
            den += fd * fd;
        }
        let e = libm::sqrt(num / den);
        assert!(e < 1e-3, "{}: relative error {e}", head.name());
    }
}

#[test]
fn normalized_image_has_zero_mean_unit_variance() {
    let img = random_image(&mut rng(11), 16);
    let z = normalize_image(&img);
    let mean = z.iter().sum::<f64>() / 256.0;
    let var = z.iter().map(|v| v * v).sum::<f64>() / 256.0;
    assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    assert_eq!(normalize_image(&[2.0; 4]), alloc::vec![0.0; 4]);
}
