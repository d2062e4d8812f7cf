use inclg_core::graph::{Graph, Var};
use inclg_core::losses::{
    hinge_discriminator, hinge_generator, landmark_loss, perceptual_loss, perceptual_loss_from, pixel_loss, style_loss,
    style_loss_from, tv_loss, ExtractorConfig, FeatureExtractor, LossBundle, LossWeights, Term,
};
use inclg_core::metrics::{masked_psnr, psnr_from_mse, PSNR_CAP};
use inclg_core::tensor::Tensor;
use inclg_core::types::{BinaryMask, FaceImage};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

fn eval2(a: &Tensor<f64>, b: &Tensor<f64>, f: impl Fn(&mut Graph<f64>, Var, Var) -> Var) -> f64 {
    let mut g = Graph::new();
    let a = g.input(a.clone());
    let b = g.input(b.clone());
    let l = f(&mut g, a, b);
    g.value(l).item()
}

fn small_extractor() -> ExtractorConfig {
    ExtractorConfig::Conv { widths: vec![4, 6, 8], layers: vec![0, 1, 2], seed: 3 }
}

#[test]
fn pixel_loss_of_identical_images_is_zero() {
    let x = rand_tensor(&mut ChaCha8Rng::seed_from_u64(1), &[2, 3, 8, 8]);
    assert_eq!(eval2(&x, &x, |g, a, b| pixel_loss(g, a, b, None).unwrap()), 0.0);
}

#[test]
fn pixel_loss_of_uniform_shift_is_the_shift() {
    let x = rand_tensor(&mut ChaCha8Rng::seed_from_u64(2), &[1, 3, 8, 8]);
    let shifted = x.map(|v| v + 0.5);
    let l = eval2(&shifted, &x, |g, a, b| pixel_loss(g, a, b, None).unwrap());
    assert!((l - 0.5).abs() < 1e-12, "{l}");
}

#[test]
fn pixel_loss_region_weight_scales_the_hole() {
    let x = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
    let y = Tensor::full(&[1, 1, 2, 2], 1.0);
    let w = std::sync::Arc::new(Tensor::from_vec(&[1, 1, 2, 2], vec![6.0, 1.0, 1.0, 0.0]).unwrap());
    let l = eval2(&x, &y, |g, a, b| pixel_loss(g, a, b, Some(w.clone())).unwrap());
    assert!((l - 2.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn closer_output_has_lower_pixel_loss(seed in 0u64..1000, t in 0.05f64..0.95) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = rand_tensor(&mut rng, &[1, 3, 4, 4]);
        let far = rand_tensor(&mut rng, &[1, 3, 4, 4]);
        prop_assume!(far.max_abs_diff(&target) > 1e-3);
        let near = far.zip_map(&target, |f, x| x + t * (f - x));
        let l_far = eval2(&far, &target, |g, a, b| pixel_loss(g, a, b, None).unwrap());
        let l_near = eval2(&near, &target, |g, a, b| pixel_loss(g, a, b, None).unwrap());
        prop_assert!(l_near < l_far);
    }
}

#[test]
fn landmark_loss_closed_form() {
    let k = rand_tensor(&mut ChaCha8Rng::seed_from_u64(4), &[1, 136]);
    assert_eq!(eval2(&k, &k, |g, a, b| landmark_loss(g, a, b).unwrap()), 0.0);
    let mut off = k.clone();
    off.data_mut()[17] += 0.1;
    let l = eval2(&off, &k, |g, a, b| landmark_loss(g, a, b).unwrap());
    let d = off.data()[17] - k.data()[17];
    assert!((l - d * d / 136.0).abs() < 1e-15);
    assert!((l - 0.01 / 136.0).abs() < 1e-12);
    assert_eq!(l, eval2(&k, &off, |g, a, b| landmark_loss(g, a, b).unwrap()));
}

#[test]
fn landmark_loss_rejects_wrong_count() {
    let mut g = Graph::<f64>::new();
    let a = g.input(Tensor::zeros(&[1, 135]));
    let b = g.input(Tensor::zeros(&[1, 135]));
    assert!(landmark_loss(&mut g, a, b).is_err());
}

#[test]
fn tv_loss_hand_computed_and_shift_invariant() {
    let x = Tensor::from_vec(&[1, 1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
    let tv = |t: &Tensor<f64>| eval2(t, t, |g, a, _| tv_loss(g, a).unwrap());
    assert_eq!(tv(&x), 0.5);
    assert_eq!(tv(&Tensor::full(&[1, 3, 5, 5], 0.3)), 0.0);
    let y = rand_tensor(&mut ChaCha8Rng::seed_from_u64(5), &[1, 3, 6, 6]);
    // 0.25 is exact in binary, so differences are unchanged bit for bit
    assert_eq!(tv(&y), tv(&y.map(|v| v + 0.25)));
}

#[test]
fn gram_matches_outer_product_oracle() {
    // one sample, 2 channels, 1x2 spatial
    let f = [[1.0, 2.0], [3.0, -1.0]];
    let acts = Tensor::from_vec(&[1, 2, 1, 2], vec![f[0][0], f[0][1], f[1][0], f[1][1]]).unwrap();
    let zero = Tensor::zeros(&[1, 2, 1, 2]);
    let mut oracle = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            oracle[i][j] = (f[i][0] * f[j][0] + f[i][1] * f[j][1]) / 4.0;
        }
    }
    let mut g = Graph::<f64>::new();
    let a = g.input(acts.clone());
    let gram = g.gram(a).unwrap();
    assert_eq!(g.value(gram).data(), &[oracle[0][0], oracle[0][1], oracle[1][0], oracle[1][1]]);
    // gram of zero activations is zero, so the loss is the mean |oracle|
    let expect = oracle.iter().flatten().map(|v: &f64| v.abs()).sum::<f64>() / 4.0;
    let l = eval2(&acts, &zero, |g, a, b| style_loss_from(g, &[a], &[b]).unwrap());
    assert!((l - expect).abs() < 1e-15);
}

#[test]
fn style_loss_ignores_spatial_shuffles_of_activations() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (c, p) = (4, 25);
    let a = rand_tensor(&mut rng, &[1, c, 5, 5]);
    let mut perm: Vec<usize> = (0..p).collect();
    perm.shuffle(&mut rng);
    let shuffled: Vec<f64> = (0..c).flat_map(|ch| perm.iter().map(move |&i| (ch, i))).map(|(ch, i)| a.data()[ch * p + i]).collect();
    let b = Tensor::from_vec(&[1, c, 5, 5], shuffled).unwrap();
    let l = eval2(&a, &b, |g, x, y| style_loss_from(g, &[x], &[y]).unwrap());
    assert!(l < 1e-15, "{l}");
    assert!(eval2(&a, &b, |g, x, y| perceptual_loss_from(g, &[x], &[y]).unwrap()) > 0.01);
}

#[test]
fn feature_losses_of_identical_images_are_zero() {
    let fx = FeatureExtractor::<f64>::new(&small_extractor()).unwrap();
    let x = rand_tensor(&mut ChaCha8Rng::seed_from_u64(7), &[2, 3, 16, 16]);
    assert_eq!(eval2(&x, &x, |g, a, b| style_loss(g, &fx, a, b).unwrap()), 0.0);
    assert_eq!(eval2(&x, &x, |g, a, b| perceptual_loss(g, &fx, a, b).unwrap()), 0.0);
    let y = rand_tensor(&mut ChaCha8Rng::seed_from_u64(8), &[2, 3, 16, 16]);
    assert!(eval2(&x, &y, |g, a, b| perceptual_loss(g, &fx, a, b).unwrap()) > 0.0);
    assert!(eval2(&x, &y, |g, a, b| style_loss(g, &fx, a, b).unwrap()) > 0.0);
}

#[test]
fn identity_extractor_reduces_perceptual_to_pixel_l1() {
    let fx = FeatureExtractor::<f64>::new(&ExtractorConfig::Identity).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&mut rng, &[2, 3, 8, 8]);
    let y = rand_tensor(&mut rng, &[2, 3, 8, 8]);
    let p = eval2(&x, &y, |g, a, b| perceptual_loss(g, &fx, a, b).unwrap());
    let l1 = eval2(&x, &y, |g, a, b| pixel_loss(g, a, b, None).unwrap());
    assert_eq!(p, l1);
}

#[test]
fn extractor_activations_follow_stage_pooling() {
    let fx = FeatureExtractor::<f64>::new(&small_extractor()).unwrap();
    let mut g = Graph::new();
    let x = g.input(Tensor::full(&[1, 3, 16, 16], 0.5));
    let acts = fx.activations(&mut g, x).unwrap();
    let shapes: Vec<Vec<usize>> = acts.iter().map(|&a| g.shape(a).to_vec()).collect();
    assert_eq!(shapes, vec![vec![1, 4, 16, 16], vec![1, 6, 8, 8], vec![1, 8, 4, 4]]);
    assert!(acts.iter().all(|&a| g.value(a).data().iter().all(|&v| v >= 0.0)));
}

#[test]
fn extractor_is_seeded_and_rejects_bad_layers() {
    let a = FeatureExtractor::<f32>::new(&small_extractor()).unwrap();
    let b = FeatureExtractor::<f32>::new(&small_extractor()).unwrap();
    assert!(a.params().unwrap().bit_identical(b.params().unwrap()));
    let bad = ExtractorConfig::Conv { widths: vec![4], layers: vec![1], seed: 0 };
    assert!(FeatureExtractor::<f32>::new(&bad).is_err());
    let empty = ExtractorConfig::Conv { widths: vec![4], layers: vec![], seed: 0 };
    assert!(FeatureExtractor::<f32>::new(&empty).is_err());
}

#[test]
fn extractor_weights_receive_no_gradient() {
    let fx = FeatureExtractor::<f64>::new(&small_extractor()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut g = Graph::new();
    let x = g.variable(rand_tensor(&mut rng, &[1, 3, 8, 8]));
    let y = g.input(rand_tensor(&mut rng, &[1, 3, 8, 8]));
    let l = perceptual_loss(&mut g, &fx, x, y).unwrap();
    let grads = g.backward(l);
    assert!(grads.params(&g).is_empty());
    assert!(grads.get(x).is_some());
}

#[test]
fn hinge_losses_closed_forms() {
    let ones = Tensor::full(&[2, 1, 3, 3], 1.0);
    let neg = Tensor::full(&[2, 1, 3, 3], -1.0);
    assert_eq!(eval2(&ones, &neg, |g, r, f| hinge_discriminator(g, r, f).unwrap()), 0.0);
    assert_eq!(eval2(&neg, &neg, |g, _, f| hinge_generator(g, f)), 1.0);
    let zeros = Tensor::zeros(&[2, 1, 3, 3]);
    assert_eq!(eval2(&zeros, &zeros, |g, _, f| hinge_generator(g, f)), 0.0);
    let r = Tensor::scalar(0.5);
    let f = Tensor::scalar(-0.5);
    assert_eq!(eval2(&r, &f, |g, r, f| hinge_discriminator(g, r, f).unwrap()), 1.0);
}

#[test]
fn aggregate_is_weighted_sum_of_terms() {
    let b = LossBundle::from_values([1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    assert_eq!(b.aggregate(&LossWeights::uniform(1.0)).unwrap(), 21.0);
    let mut w = LossWeights::uniform(1.0);
    w.set(Term::Tv, 0.0);
    assert_eq!(b.aggregate(&w).unwrap(), 18.0);

    let mut nan = b;
    nan.set(Term::Style, f64::NAN);
    w.set(Term::Style, 0.0);
    assert_eq!(nan.aggregate(&w).unwrap(), 14.0);
    assert_eq!(nan.first_non_finite(), Some(Term::Style));

    let d = LossWeights::default();
    let expect = 1.0 * d.pixel + 2.0 * d.landmark + 3.0 * d.tv + 4.0 * d.style + 5.0 * d.perceptual + 6.0 * d.adversarial;
    assert_eq!(b.aggregate(&d).unwrap(), expect);
    assert_eq!(expect, 1.0 + 0.2 + 0.30000000000000004 + 1000.0 + 0.5 + 0.6000000000000001);
}

#[test]
fn aggregate_reports_missing_term() {
    let mut b = LossBundle::default();
    for t in Term::ALL.into_iter().filter(|&t| t != Term::Landmark) {
        b.set(t, 1.0);
    }
    let err = b.aggregate(&LossWeights::default()).unwrap_err().to_string();
    assert!(err.contains("landmark"), "{err}");
}

#[test]
fn weights_reject_negative_values() {
    let mut w = LossWeights::default();
    assert!(w.validate().is_ok());
    w.set(Term::Perceptual, -0.1);
    assert!(w.validate().unwrap_err().to_string().contains("perceptual"));
}

/// Largest relative error between the analytic gradient of `f` at `x` and
/// central differences, skipping coordinates whose probes straddle a kink.
fn gradient_error(x: &Tensor<f64>, f: &dyn Fn(&mut Graph<f64>, Var) -> Var) -> f64 {
    let mut g = Graph::new();
    let v = g.variable(x.clone());
    let l = f(&mut g, v);
    let analytic = g.backward(l).get(v).unwrap().clone();
    let eval = |t: &Tensor<f64>| {
        let mut g = Graph::new();
        let v = g.variable(t.clone());
        let l = f(&mut g, v);
        (g.value(l).item(), g.kink_pattern())
    };
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for i in 0..x.len() {
        let mut p = x.clone();
        p.data_mut()[i] += h;
        let mut m = x.clone();
        m.data_mut()[i] -= h;
        let ((lp, kp), (lm, km)) = (eval(&p), eval(&m));
        if kp != km {
            continue;
        }
        checked += 1;
        let numeric = (lp - lm) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
    }
    assert!(checked * 10 >= x.len() * 9, "too many kinks: {checked}/{}", x.len());
    worst
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let target = rand_tensor(&mut rng, &[1, 3, 8, 8]);
    let x = rand_tensor(&mut rng, &[1, 3, 8, 8]);
    let fx = FeatureExtractor::<f64>::new(&small_extractor()).unwrap();
    let lm_target = rand_tensor(&mut rng, &[1, 136]);
    let lm = rand_tensor(&mut rng, &[1, 136]);
    let scores = rand_tensor(&mut rng, &[2, 1, 3, 3]).map(|v| 4.0 * v - 2.0);
    let real = rand_tensor(&mut rng, &[2, 1, 3, 3]).map(|v| 4.0 * v - 2.0);

    let cases: Vec<(&str, Tensor<f64>, Box<dyn Fn(&mut Graph<f64>, Var) -> Var>)> = vec![
        ("pixel", x.clone(), Box::new(|g, v| { let t = g.input(target.clone()); pixel_loss(g, v, t, None).unwrap() })),
        ("landmark", lm.clone(), Box::new(|g, v| { let t = g.input(lm_target.clone()); landmark_loss(g, v, t).unwrap() })),
        ("tv", x.clone(), Box::new(|g, v| tv_loss(g, v).unwrap())),
        ("style", x.clone(), Box::new(|g, v| { let t = g.input(target.clone()); style_loss(g, &fx, v, t).unwrap() })),
        ("perceptual", x.clone(), Box::new(|g, v| { let t = g.input(target.clone()); perceptual_loss(g, &fx, v, t).unwrap() })),
        ("hinge_g", scores.clone(), Box::new(|g, v| hinge_generator(g, v))),
        ("hinge_d", scores.clone(), Box::new(|g, v| { let r = g.input(real.clone()); hinge_discriminator(g, r, v).unwrap() })),
    ];
    for (name, at, f) in &cases {
        let err = gradient_error(at, f.as_ref());
        assert!(err < 1e-3, "{name}: relative error {err}");
    }
}

#[test]
fn psnr_metrics() {
    assert_eq!(psnr_from_mse(0.0), PSNR_CAP);
    assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
    let a = FaceImage::filled(4, 4, 0.5);
    let b = FaceImage::filled(4, 4, 0.25);
    let mask = BinaryMask::from_fn(4, 4, |x, _| x < 2);
    // mse inside the hole is 0.0625, so 10 log10(16)
    assert!((masked_psnr(&a, &b, &mask).unwrap() - 10.0 * 16f64.log10()).abs() < 1e-9);
    assert_eq!(masked_psnr(&a, &b, &BinaryMask::zeros(4, 4)).unwrap(), PSNR_CAP);
    assert_eq!(masked_psnr(&a, &a, &mask).unwrap(), PSNR_CAP);
}
