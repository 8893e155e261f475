use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regionedit::conditioning::{DecoupledCrossAttention, Tati};
use regionedit::data::{decode_dataset, encode_dataset, generate_dataset};
use regionedit::diffusion::{cfg_combine, condition_dropout, Denoiser, DenoiserCondition, NoiseSchedule};
use regionedit::image::{Image, Rect, RegionSet};
use regionedit::model::EditModel;
use regionedit::nn::Builder;
use regionedit::vision::{LatentCodec, VisionStack};
use regionedit::RunConfig;
use regionedit_tensor::{ParamStore, Session, Tensor};

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_image(rng: &mut ChaCha8Rng, size: usize) -> Image {
    let mut img = Image::filled(size, size, [0.0; 3]);
    for v in img.data.iter_mut() {
        *v = rng.random_range(0.0..1.0);
    }
    img
}

#[test]
fn codec_inverts_and_preserves_norms_on_random_images() {
    let codec = LatentCodec::new(2);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let x = random_tensor(&mut rng, &[16, 16, 3]);
        let z = codec.encode(&x).unwrap();
        assert_eq!(z.shape(), &[8, 8, 12]);
        let back = codec.decode(&z).unwrap();
        let max_err = x.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max_err <= 1e-5, "round trip error {max_err}");
        let norm = |t: &Tensor<f64>| t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm(&x) - norm(&z)).abs() <= 1e-5 * norm(&x).max(1.0));
    }
}

#[test]
fn encoded_images_decode_into_range() {
    let codec = LatentCodec::new(2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = random_image(&mut rng, 16);
    let back = codec.decode_image(&codec.encode_image(&img).unwrap()).unwrap();
    for (a, b) in img.data.iter().zip(&back.data) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn guidance_reduces_to_single_branches() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let [u, i, f] = [0, 1, 2].map(|_| random_tensor(&mut rng, &[4, 4, 12]));
    let zero = cfg_combine(&u, &i, &f, 0.0, 0.0).unwrap();
    let one = cfg_combine(&u, &i, &f, 1.0, 1.0).unwrap();
    for k in 0..u.numel() {
        assert!((zero.data()[k] - u.data()[k]).abs() <= 1e-6);
        assert!((one.data()[k] - f.data()[k]).abs() <= 1e-6);
    }
}

proptest! {
    #[test]
    fn guidance_is_affine_in_each_scale(s_img in -3.0f64..3.0, s_txt in -8.0f64..8.0, d in 0.1f64..2.0, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [u, i, f] = [0, 1, 2].map(|_| random_tensor(&mut rng, &[2, 2, 3]));
        let at = |a: f64, b: f64| cfg_combine(&u, &i, &f, a, b).unwrap();
        let (p0, p1, p2) = (at(s_img, s_txt), at(s_img + d, s_txt + d), at(s_img + 2.0 * d, s_txt + 2.0 * d));
        for k in 0..u.numel() {
            let mid = 0.5 * (p0.data()[k] + p2.data()[k]);
            prop_assert!((p1.data()[k] - mid).abs() <= 1e-6);
        }
    }

    #[test]
    fn add_noise_matches_the_closed_form(t in 0usize..=64, seed in 0u64..1000) {
        let sched = NoiseSchedule::linear(64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z0 = random_tensor(&mut rng, &[3, 5]);
        let eps = random_tensor(&mut rng, &[3, 5]);
        let z = sched.add_noise(&z0, t, &eps).unwrap();
        let ab: f64 = sched.betas[..t].iter().map(|b| 1.0 - b).product();
        for k in 0..15 {
            let expect = ab.sqrt() * z0.data()[k] + (1.0 - ab).sqrt() * eps.data()[k];
            prop_assert!((z.data()[k] - expect).abs() <= 1e-6);
        }
    }

    #[test]
    fn region_order_does_not_change_region_tokens(seed in 0u64..200) {
        let cfg = RunConfig::micro();
        let mut b = Builder::new(seed);
        let stack = VisionStack::new(&mut b, &cfg).unwrap();
        let store = b.finish();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = random_image(&mut rng, cfg.image_size);
        let boxes: Vec<Rect> = (0..3)
            .map(|_| {
                let (x0, y0) = (rng.random_range(0..6), rng.random_range(0..6));
                Rect::new(x0, y0, x0 + rng.random_range(1..3), y0 + rng.random_range(1..3))
            })
            .collect();
        let mut reversed = boxes.clone();
        reversed.reverse();
        let s = Session::new(&store);
        let map = stack.patches.forward(&s, &img).unwrap();
        let a = stack.regions.forward(&s, &map, &RegionSet::oracle(boxes)).unwrap();
        let b = stack.regions.forward(&s, &map, &RegionSet::oracle(reversed)).unwrap();
        prop_assert!(s.value(a).bit_eq(&s.value(b)));
    }
}

fn dca_setup(seed: u64) -> (DecoupledCrossAttention, ParamStore<f64>) {
    let mut b = Builder::new(seed);
    let dca = DecoupledCrossAttention::new(&mut b, "dca", 6, 5).unwrap();
    (dca, b.finish().cast())
}

#[test]
fn decoupled_attention_with_zero_lambda_is_the_text_branch() {
    let (dca, store) = dca_setup(1);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = Session::new(&store);
    let z = s.constant(random_tensor(&mut rng, &[7, 6]));
    let c = s.constant(random_tensor(&mut rng, &[3, 5]));
    let v = s.constant(random_tensor(&mut rng, &[4, 5]));
    let mixed = dca.forward(&s, z, c, Some(v), 0.0).unwrap();
    let text_only = dca.forward(&s, z, c, None, 1.0).unwrap();
    assert!(s.value(mixed).bit_eq(&s.value(text_only)));
}

#[test]
fn decoupled_attention_residual_scales_with_lambda() {
    let (dca, store) = dca_setup(2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = Session::new(&store);
    let z = s.constant(random_tensor(&mut rng, &[5, 6]));
    let c = s.constant(random_tensor(&mut rng, &[3, 5]));
    let v = s.constant(random_tensor(&mut rng, &[2, 5]));
    let base = s.value(dca.forward(&s, z, c, None, 0.0).unwrap());
    let one = s.value(dca.forward(&s, z, c, Some(v), 1.0).unwrap());
    for lambda in [-1.5, 0.3, 2.0, 4.0] {
        let out = s.value(dca.forward(&s, z, c, Some(v), lambda).unwrap());
        for k in 0..out.numel() {
            let expect = lambda * (one.data()[k] - base.data()[k]);
            assert!((out.data()[k] - base.data()[k] - expect).abs() <= 1e-6);
        }
    }
}

#[test]
fn decoupled_attention_single_key_returns_both_values() {
    let (dca, store) = dca_setup(3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = Session::new(&store);
    let z = s.constant(random_tensor(&mut rng, &[4, 6]));
    let c = s.constant(random_tensor(&mut rng, &[1, 5]));
    let v = s.constant(random_tensor(&mut rng, &[1, 5]));
    let lambda = 0.7;
    let out = s.value(dca.forward(&s, z, c, Some(v), lambda).unwrap());
    let v1 = s.value(dca.v_text.forward(&s, c).unwrap());
    let v2 = s.value(dca.v_visual.forward(&s, v).unwrap());
    for r in 0..4 {
        for j in 0..6 {
            let expect = v1.data()[j] + lambda * v2.data()[j];
            assert!((out.data()[r * 6 + j] - expect).abs() <= 1e-6);
        }
    }
}

#[test]
fn zero_initialized_lora_leaves_the_base_model_unchanged() {
    let cfg = RunConfig::default();
    let (model, store) = EditModel::new(&cfg).unwrap();
    let rec = &generate_dataset(&cfg, 2).unwrap()[0];
    let s = Session::new(&store);
    let adapted = model.vlm_hidden(&s, &rec.source, &rec.instruction, &rec.boxes, true).unwrap();
    let base = model.vlm_hidden(&s, &rec.source, &rec.instruction, &rec.boxes, false).unwrap();
    assert!(s.value(adapted).bit_eq(&s.value(base)));
}

#[test]
fn zero_initialized_tati_ignores_the_timestep() {
    let cfg = RunConfig::default();
    let mut b = Builder::new(9);
    let tati = Tati::new(&mut b, &cfg).unwrap();
    let store = b.finish();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let s = Session::new(&store);
    let e = s.constant(random_tensor(&mut rng, &[cfg.qformer_queries, cfg.cond_width]).cast::<f32>());
    let first = s.value(tati.forward(&s, e, 0).unwrap());
    for t in [1, 17, cfg.timesteps - 1, cfg.timesteps] {
        assert!(s.value(tati.forward(&s, e, t).unwrap()).bit_eq(&first));
    }
}

#[test]
fn trained_tati_modulation_depends_on_the_timestep() {
    let cfg = RunConfig::micro();
    let mut b = Builder::new(4);
    let tati = Tati::new(&mut b, &cfg).unwrap();
    let mut store = b.finish();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for id in tati.modulation_params() {
        for v in store.get_mut(id).value_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    let s = Session::new(&store);
    let e = s.constant(random_tensor(&mut rng, &[cfg.qformer_queries, cfg.cond_width]).cast::<f32>());
    let a = s.value(tati.forward(&s, e, 0).unwrap());
    let b = s.value(tati.forward(&s, e, cfg.timesteps).unwrap());
    assert!(!a.bit_eq(&b));
}

#[test]
fn denoiser_sees_the_source_latent() {
    let cfg = RunConfig::micro();
    let l = cfg.latent_size();
    let shape = [l, l, cfg.latent_channels()];
    for seed in 0..10 {
        let mut b = Builder::new(seed);
        let den = Denoiser::new(&mut b, &cfg).unwrap();
        let store = b.finish();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Session::new(&store);
        let z = s.constant(random_tensor(&mut rng, &shape).cast::<f32>());
        let src = s.constant(random_tensor(&mut rng, &shape).cast::<f32>());
        let zero = s.constant(Tensor::zeros(shape.to_vec()));
        let text = s.constant(random_tensor(&mut rng, &[cfg.tati_queries, cfg.cond_width]).cast::<f32>());
        let cond = DenoiserCondition { text, visual: None, lambda: 1.0 };
        let with = s.value(den.forward(&s, z, 10, src, &cond).unwrap());
        let without = s.value(den.forward(&s, z, 10, zero, &cond).unwrap());
        assert_eq!(with.shape(), &shape);
        assert!(!with.bit_eq(&without));
    }
}

#[test]
fn dataset_records_change_only_inside_the_edit_box() {
    let cfg = RunConfig { records: 200, ..RunConfig::default() };
    for critical in [false, true] {
        let cfg = RunConfig { region_critical_only: critical, ..cfg.clone() };
        let records = generate_dataset(&cfg, 21).unwrap();
        assert_eq!(records.len(), 200);
        for r in &records {
            for y in 0..r.source.height {
                for x in 0..r.source.width {
                    if !r.edit_box.contains(y, x) {
                        assert_eq!(r.source.pixel(y, x), r.target.pixel(y, x));
                    }
                }
            }
            assert_ne!(r.source, r.target);
            for bx in &r.boxes.boxes {
                // oracle boxes are exact: every pixel inside has one colour
                let c = r.source.pixel(bx.y0, bx.x0);
                for y in bx.y0..bx.y1 {
                    for x in bx.x0..bx.x1 {
                        assert_eq!(r.source.pixel(y, x), c);
                    }
                }
            }
            if critical {
                assert!(r.region_critical);
            }
        }
        assert_eq!(decode_dataset(&encode_dataset(&records)).unwrap(), records);
    }
}

#[test]
fn condition_dropout_frequencies_match_probabilities() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 40_000;
    let (mut img, mut txt) = (0usize, 0usize);
    for _ in 0..n {
        let d = condition_dropout(0.3, 0.1, &mut rng).unwrap();
        img += d.image as usize;
        txt += d.text as usize;
    }
    let (fi, ft) = (img as f64 / n as f64, txt as f64 / n as f64);
    assert!((fi - 0.3).abs() < 0.01, "image drop rate {fi}");
    assert!((ft - 0.1).abs() < 0.01, "text drop rate {ft}");
    assert!(condition_dropout(1.5, 0.0, &mut rng).is_err());
}

#[test]
fn edit_representation_shape_is_fixed() {
    let cfg = RunConfig::micro();
    let (model, store) = EditModel::new(&cfg).unwrap();
    let rec = &generate_dataset(&cfg, 1).unwrap()[0];
    let s = Session::new(&store);
    let e = model.edit_representation(&s, &rec.source, &rec.instruction, &rec.boxes).unwrap();
    assert_eq!(s.shape(e), vec![cfg.qformer_queries, cfg.cond_width]);
}
