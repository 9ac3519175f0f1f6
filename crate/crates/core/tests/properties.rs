//! Invariants that must hold for every input, checked with proptest.

use proptest::collection::vec;
use proptest::prelude::*;

use inv2inv::energy::LowPass;
use inv2inv::metrics::{psnr, shape_l2, sliced_wasserstein};
use inv2inv::pipeline::config::Config;
use inv2inv::pipeline::io::{decode_ivit, decode_pnm, encode_ivit, encode_pnm};
use inv2inv::pipeline::kv;
use inv2inv::rng::Stream;
use inv2inv::sde::SdeSchedule;
use inv2inv::tensor::Tensor;
use inv2inv::{Image, Shape};

fn image(shape: Shape, lo: f64, hi: f64) -> impl Strategy<Value = Image> {
    vec(lo..hi, shape.len()).prop_map(move |v| Image::from_vec(shape, v).unwrap())
}

fn any_shape() -> impl Strategy<Value = Shape> {
    (prop_oneof![Just(1usize), Just(3)], 1usize..7, 1usize..7).prop_map(|(c, h, w)| Shape::new(c, h, w))
}

fn config_text() -> impl Strategy<Value = String> {
    (
        (0.01f64..1.0, 1.0f64..40.0, 0.5f64..2.0),
        (0.01f64..=1.0, 1usize..300, 0.01f64..=1.0, 1usize..300, 1usize..4),
        (
            prop::sample::select(vec!["two_stage", "variant1", "variant2", "sdedit"]),
            0.0f64..1.0,
            prop::sample::select(vec!["minimize", "literal"]),
        ),
        (0.0f64..20.0, 0.0f64..20.0, prop::sample::select(vec!["l2", "l1"])),
        (prop::option::of(1usize..9), any::<u64>(), prop::sample::select(vec!["net", "gmm"]), 1e-4f64..1.0),
        (
            1e-5f64..1.0,
            1usize..512,
            0usize..50_000,
            0.001f64..0.5,
            1usize..1000,
            prop::sample::select(vec!["unweighted", "sigma_squared", "data_space"]),
        ),
        (8usize..64, 1usize..100, 0.0f64..0.3, any::<u64>()),
    )
        .prop_map(|(sch, st, md, en, sc, tr, ds)| {
            let mut t = String::new();
            t += &format!("schedule.beta_min = {}\nschedule.beta_max = {}\nschedule.T = {}\n", sch.0, sch.1, sch.2);
            t += &format!(
                "sampler.m_frac = {}\nsampler.steps = {}\nsampler.stage2.m_frac = {}\nsampler.stage2.steps = {}\nsampler.k = {}\n",
                st.0, st.1, st.2, st.3, st.4
            );
            t += &format!("sampler.mode = {}\nsampler.mixup_ratio = {}\nsampler.appearance_sign = {}\n", md.0, md.1, md.2);
            t += &format!("energy.lambda_g = {}\nenergy.lambda_a = {}\nenergy.similarity = {}\n", en.0, en.1, en.2);
            t += &format!(
                "lowpass.factor = {}\npyramid.seed = {}\nscore.backend = {}\nscore.gmm_variance = {}\n",
                sc.0.map_or("auto".to_string(), |f| f.to_string()),
                sc.1,
                sc.2,
                sc.3
            );
            t += &format!(
                "train.learning_rate = {}\ntrain.batch_size = {}\ntrain.iterations = {}\ntrain.t_min_frac = {}\ntrain.log_interval = {}\ntrain.weighting = {}\n",
                tr.0, tr.1, tr.2, tr.3, tr.4, tr.5
            );
            t += &format!("dataset.size = {}\ndataset.count = {}\ndataset.jitter = {}\nseed = {}\n", ds.0, ds.1, ds.2, ds.3);
            t
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_render_parses_back(text in config_text()) {
        let c = Config::parse(&text).unwrap();
        let back = Config::parse(&c.render()).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn ivit_round_trip_is_exact_at_f32(dims in vec(1usize..5, 1..4), seed in any::<u64>()) {
        let n: usize = dims.iter().product();
        let mut rng = Stream::new(seed, 0);
        let data: Vec<f64> = rng.normals(n).into_iter().map(|v| v as f32 as f64).collect();
        let t = Tensor::new(dims, data).unwrap();
        prop_assert_eq!(decode_ivit(&encode_ivit(&t)).unwrap(), t);
    }

    #[test]
    fn pnm_quantisation_error_is_at_most_half_a_level(img in any_shape().prop_flat_map(|s| image(s, -1.0, 1.0))) {
        let back = decode_pnm(&encode_pnm(&img).unwrap()).unwrap();
        prop_assert_eq!(back.shape(), img.shape());
        let err = back.sub(&img).unwrap().max_abs();
        prop_assert!(err <= 1.0 / 255.0 + 1e-12, "error {}", err);
    }

    #[test]
    fn kv_round_trip(pairs in vec(("[a-z][a-z0-9_.]{0,12}", "[ -~]{0,20}"), 0..10)) {
        let pairs: Vec<(String, String)> = pairs;
        prop_assert_eq!(kv::parse(&kv::render(&pairs)).unwrap(), pairs);
    }

    #[test]
    fn alpha_and_sigma_are_on_the_unit_circle(t in 0.0f64..=1.0) {
        let (a, s) = SdeSchedule::default().alpha_sigma(t).unwrap();
        prop_assert!((a * a + s * s - 1.0).abs() <= 1e-12);
        prop_assert!(a > 0.0 && a <= 1.0 && s >= 0.0);
    }

    #[test]
    fn perturbation_is_affine(
        (x, y, zx, zy) in any_shape().prop_flat_map(|s| (image(s, -1.0, 1.0), image(s, -1.0, 1.0), image(s, -3.0, 3.0), image(s, -3.0, 3.0))),
        t in 0.0f64..=1.0,
        c in -2.0f64..2.0,
    ) {
        let sched = SdeSchedule::default();
        // P(x + c y, zx + c zy) = P(x, zx) + c P(y, zy)
        let lhs = sched.perturb(&x.add(&y.scale(c)).unwrap(), t, &zx.add(&zy.scale(c)).unwrap()).unwrap();
        let rhs = sched.perturb(&x, t, &zx).unwrap().add(&sched.perturb(&y, t, &zy).unwrap().scale(c)).unwrap();
        prop_assert!(lhs.sub(&rhs).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn drift_is_odd(y in any_shape().prop_flat_map(|s| image(s, -5.0, 5.0)), t in 0.0f64..=1.0) {
        let sched = SdeSchedule::default();
        let a = sched.drift(&y, t).unwrap();
        let b = sched.drift(&y.scale(-1.0), t).unwrap();
        prop_assert!(a.add(&b).unwrap().max_abs() == 0.0);
    }

    #[test]
    fn omega_is_an_orthogonal_projection(
        factor in 1usize..4,
        blocks in (1usize..4, 1usize..4),
        seed in any::<u64>(),
    ) {
        let s = Shape::new(3, factor * blocks.0, factor * blocks.1);
        let mut rng = Stream::new(seed, 1);
        let x = Image::from_vec(s, rng.normals(s.len())).unwrap();
        let y = Image::from_vec(s, rng.normals(s.len())).unwrap();
        let lp = LowPass::new(factor).unwrap();
        let ox = lp.omega(&x).unwrap();
        prop_assert!(lp.omega(&ox).unwrap().sub(&ox).unwrap().max_abs() <= 1e-12);
        let l = ox.dot(&y).unwrap();
        let r = x.dot(&lp.omega(&y).unwrap()).unwrap();
        prop_assert!((l - r).abs() <= 1e-10 * (1.0 + l.abs()));
    }

    #[test]
    fn shape_l2_is_a_metric(
        (a, b, c) in (1usize..6, 1usize..6).prop_flat_map(|(h, w)| {
            let s = Shape::new(1, h, w);
            (image(s, 0.0, 1.0), image(s, 0.0, 1.0), image(s, 0.0, 1.0))
        })
    ) {
        let ab = shape_l2(&a, &b).unwrap();
        prop_assert_eq!(ab, shape_l2(&b, &a).unwrap());
        prop_assert!(shape_l2(&a, &a).unwrap() == 0.0);
        prop_assert!(shape_l2(&a, &c).unwrap() <= ab + shape_l2(&b, &c).unwrap() + 1e-12);
    }

    #[test]
    fn psnr_falls_as_the_error_grows(
        (x, d) in any_shape().prop_flat_map(|s| (image(s, -1.0, 1.0), image(s, -0.5, 0.5))),
        k in 1.01f64..4.0,
    ) {
        prop_assume!(d.sq_norm() / d.len() as f64 > 1e-10);
        let near = psnr(&x, &x.add(&d).unwrap()).unwrap();
        let far = psnr(&x, &x.add(&d.scale(k)).unwrap()).unwrap();
        prop_assert!(far < near);
    }

    #[test]
    fn sliced_wasserstein_ignores_a_common_shift(
        seed in any::<u64>(),
        shift in vec(-5.0f64..5.0, 2),
    ) {
        let mut rng = Stream::new(seed, 2);
        let a: Vec<Vec<f64>> = (0..60).map(|_| rng.normals(2)).collect();
        let b: Vec<Vec<f64>> = (0..40).map(|_| rng.normals(2).iter().map(|v| 0.5 * v + 1.0).collect()).collect();
        let moved = |p: &[Vec<f64>]| -> Vec<Vec<f64>> {
            p.iter().map(|x| x.iter().zip(&shift).map(|(v, s)| v + s).collect()).collect()
        };
        let d0 = sliced_wasserstein(&a, &b, 32, &mut Stream::new(seed, 3)).unwrap();
        let d1 = sliced_wasserstein(&moved(&a), &moved(&b), 32, &mut Stream::new(seed, 3)).unwrap();
        prop_assert!((d0 - d1).abs() <= 1e-9 * (1.0 + d0), "{} vs {}", d0, d1);
        prop_assert!(sliced_wasserstein(&a, &a, 32, &mut Stream::new(seed, 3)).unwrap() <= 1e-12);
    }
}
