mod common;

use proptest::prelude::*;

use prompt_sid::image::{decode_psid, encode_psid};
use prompt_sid::metrics::{psnr, ssim};
use prompt_sid::nn::diffusion::{forward_diffuse, DiffusionSchedule};
use prompt_sid::sampling::{block_offset, srd_sample};
use prompt_sid::train::ModelState;
use prompt_sid::{checkpoint, crop_patch, ImageTensor, NoiseSpec, Rng};

fn image(h: usize, w: usize, c: usize, seed: u64) -> ImageTensor {
    let mut rng = Rng::new(seed);
    ImageTensor::from_fn(h, w, c, |_, _, _| rng.uniform() as f32)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn psid_round_trip_is_bit_exact(h in 1usize..12, w in 1usize..12, c in 1usize..4, seed: u64) {
        let mut rng = Rng::new(seed);
        let img = ImageTensor::from_fn(h, w, c, |_, _, _| (rng.normal() * 1e3) as f32);
        let back = decode_psid(&encode_psid(&img)).unwrap();
        prop_assert_eq!(back, img);
    }

    #[test]
    fn sub_images_come_from_adjacent_pixels_of_their_block(bh in 1usize..8, bw in 1usize..8, c in 1usize..4, seed: u64) {
        let (h, w) = (2 * bh, 2 * bw);
        // Distinct values make the source of every sampled pixel recoverable.
        let img = ImageTensor::from_fn(h, w, c, |y, x, ch| ((y * w + x) * c + ch) as f32);
        let s = srd_sample(&img, &mut Rng::new(seed)).unwrap();
        for i in 0..bh {
            for j in 0..bw {
                let triple = s.pattern.triple(i, j);
                let mut seen = [false; 4];
                for (n, &pos) in triple.iter().enumerate() {
                    prop_assert!(!seen[pos as usize]);
                    seen[pos as usize] = true;
                    let (dy, dx) = block_offset(pos);
                    for ch in 0..c {
                        prop_assert_eq!(s.subs[n].get(i, j, ch), img.get(2 * i + dy, 2 * j + dx, ch));
                    }
                }
                for n in 1..3 {
                    let diff = triple[0] ^ triple[n];
                    prop_assert!(diff == 1 || diff == 2);
                }
            }
        }
    }

    #[test]
    fn patches_keep_the_block_grid(h in 4usize..20, w in 4usize..20, half in 1usize..3, seed: u64) {
        let size = 2 * half;
        let img = ImageTensor::from_fn(h, w, 1, |y, x, _| (y * 1000 + x) as f32);
        let p = crop_patch(&img, size, &mut Rng::new(seed)).unwrap();
        let v = p.get(0, 0, 0) as usize;
        let (oy, ox) = (v / 1000, v % 1000);
        prop_assert!(oy % 2 == 0 && ox % 2 == 0);
        prop_assert!(oy + size <= h && ox + size <= w);
        prop_assert_eq!(p, img.crop(oy, ox, size).unwrap());
    }

    #[test]
    fn metrics_are_symmetric_and_bounded(h in 11usize..20, w in 11usize..20, c in 1usize..4, sa: u64, sb: u64) {
        let (a, b) = (image(h, w, c, sa), image(h, w, c, sb));
        prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        let s = ssim(&a, &b).unwrap();
        prop_assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((-1.0..=1.0 + 1e-12).contains(&s));
        prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn schedule_is_a_decreasing_product(steps in 1usize..200, lo in 1e-5f64..0.1, span in 0.0f64..0.5) {
        let s = DiffusionSchedule::linear(steps, lo, lo + span).unwrap();
        let mut prod = 1.0f64;
        for t in 1..=steps {
            prop_assert!(s.beta(t) >= lo - 1e-15 && s.beta(t) <= lo + span + 1e-15);
            prod *= 1.0 - s.beta(t);
            prop_assert!((s.alpha_bar(t) - prod).abs() <= 1e-15);
            prop_assert!(s.alpha_bar(t) > 0.0 && s.alpha_bar(t) < 1.0);
        }
    }

    #[test]
    fn noiseless_forward_diffusion_scales_the_signal(n in 1usize..32, t in 1usize..100, seed: u64) {
        let s = DiffusionSchedule::linear(100, 1e-4, 0.02).unwrap();
        let c0 = Rng::new(seed).normal_vec(n);
        let out = forward_diffuse(&s, &c0, t, &vec![0.0; n]).unwrap();
        let k = s.alpha_bar(t).sqrt();
        for (o, c) in out.0.iter().zip(&c0) {
            prop_assert_eq!(*o, k * c);
        }
    }

    #[test]
    fn noise_spec_text_round_trips(kind in 0usize..4, a in 0.5f64..60.0, b in 0.0f64..40.0) {
        let spec = match kind {
            0 => NoiseSpec::GaussianFixed { sigma: a },
            1 => NoiseSpec::GaussianRange { min: a, max: a + b },
            2 => NoiseSpec::PoissonFixed { lambda: a },
            _ => NoiseSpec::PoissonRange { min: a, max: a + b },
        };
        prop_assert_eq!(spec.to_string().parse::<NoiseSpec>().unwrap(), spec);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn checkpoints_round_trip(seed: u64, step in 0u64..10_000) {
        let mut state = ModelState::<f32>::new(common::tiny_config(1), seed).unwrap();
        let mut rng = Rng::new(seed ^ 1);
        for t in state.adam_v.tensors_mut() {
            t.iter_mut().for_each(|v| *v = rng.uniform() as f32);
        }
        state.step = step;
        let bytes = checkpoint::encode(&state);
        let back = checkpoint::decode(&bytes, Some(state.model.config())).unwrap();
        prop_assert_eq!(back.step, step);
        prop_assert_eq!(back.params.tensors(), state.params.tensors());
        prop_assert_eq!(back.adam_v.tensors(), state.adam_v.tensors());
        prop_assert_eq!(checkpoint::encode(&back), bytes);
    }
}
