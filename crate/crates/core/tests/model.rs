use inclg_core::graph::Graph;
use inclg_core::model::layers::{Conv2d, GatedConv, ResidualBlock, NORM_EPS};
use inclg_core::model::{Discriminator, Generator, LandmarkHead, ModelConfig, ParamStore};
use inclg_core::tensor::Tensor;
use inclg_core::types::{BinaryMask, LANDMARK_VALUES};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Direct sliding-window convolution of a single `[C, H, W]` sample.
fn brute_conv(x: &[f64], c: usize, h: usize, w: usize, weight: &[f64], bias: &[f64], k: usize, pad: usize, dil: usize) -> Vec<f64> {
    let o = bias.len();
    let oh = h + 2 * pad - dil * (k - 1);
    let ow = w + 2 * pad - dil * (k - 1);
    let mut out = vec![0.0; o * oh * ow];
    for oc in 0..o {
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = bias[oc];
                for ic in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (y + ky * dil) as isize - pad as isize;
                            let ix = (xx + kx * dil) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                acc += x[(ic * h + iy as usize) * w + ix as usize] * weight[((oc * c + ic) * k + ky) * k + kx];
                            }
                        }
                    }
                }
                out[(oc * oh + y) * ow + xx] = acc;
            }
        }
    }
    out
}

fn instance_norm_plane(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    v.iter().map(|x| (x - mean) / (var + NORM_EPS).sqrt()).collect()
}

fn gated_layer(gate_bias: f64) -> (GatedConv, ParamStore<f64>, Tensor<f64>) {
    let layer = GatedConv::new(Conv2d::new("t", 1, 2, 3));
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::init(&layer.specs(), &mut rng);
    store.set(&layer.feature.bias_key(), Tensor::from_vec(&[2], vec![0.1, -0.2]).unwrap());
    store.set(&layer.gate.bias_key(), Tensor::full(&[2], gate_bias));
    let x = rand_tensor(&mut rng, &[1, 1, 8, 8]);
    (layer, store, x)
}

#[test]
fn gate_saturated_open_matches_direct_convolution() {
    let (layer, store, x) = gated_layer(1000.0);
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let parts = layer.forward_parts(&mut g, &store, xv).unwrap();
    let out = g.value(parts.output).clone();
    assert_eq!(out.shape(), &[1, 2, 8, 8]);

    let w = store.get(&layer.feature.weight_key()).unwrap();
    let b = store.get(&layer.feature.bias_key()).unwrap();
    let conv = brute_conv(x.data(), 1, 8, 8, w.data(), b.data(), 3, 1, 1);
    for ch in 0..2 {
        let relu: Vec<f64> = conv[ch * 64..(ch + 1) * 64].iter().map(|v| v.max(0.0)).collect();
        let expected = instance_norm_plane(&relu);
        for (a, e) in out.data()[ch * 64..(ch + 1) * 64].iter().zip(&expected) {
            assert!((a - e).abs() < 1e-5, "{a} vs {e}");
        }
    }
}

#[test]
fn gate_saturated_closed_silences_output() {
    let (layer, store, x) = gated_layer(-1000.0);
    let mut g = Graph::new();
    let xv = g.input(x);
    let out = layer.forward(&mut g, &store, xv).unwrap();
    assert!(g.value(out).data().iter().all(|v| v.abs() < 1e-6));
}

#[test]
fn gate_values_lie_strictly_inside_unit_interval() {
    let (layer, store, _) = gated_layer(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[2, 1, 8, 8]).map(|v| v * 5.0);
    let mut g = Graph::new();
    let xv = g.input(x);
    let parts = layer.forward_parts(&mut g, &store, xv).unwrap();
    let gate = layer.gate_values(&mut g, &parts).unwrap();
    assert!(g.value(gate).data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn gated_conv_rejects_channel_mismatch() {
    let (layer, store, _) = gated_layer(0.0);
    let mut g = Graph::new();
    let xv = g.input(Tensor::<f64>::zeros(&[1, 3, 8, 8]));
    assert!(layer.forward(&mut g, &store, xv).is_err());
}

#[test]
fn residual_block_with_zero_weights_is_identity() {
    let block = ResidualBlock::new("r", 8, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store: ParamStore<f64> = ParamStore::init(&block.specs(), &mut rng);
    for spec in block.specs() {
        store.set(&spec.key, Tensor::zeros(&spec.shape));
    }
    let x = rand_tensor(&mut rng, &[2, 8, 12, 12]);
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = block.forward(&mut g, &store, xv).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn dilated_kernel_footprint_is_the_dilated_grid() {
    let block = ResidualBlock::new("r", 1, 2);
    let mut store: ParamStore<f64> = ParamStore::init(&block.specs(), &mut ChaCha8Rng::seed_from_u64(0));
    store.set(&block.dilated.weight_key(), Tensor::full(&[1, 1, 3, 3], 1.0));
    store.set(&block.dilated.bias_key(), Tensor::zeros(&[1]));
    let mut x = Tensor::zeros(&[1, 1, 11, 11]);
    x.data_mut()[5 * 11 + 5] = 1.0;
    let mut g = Graph::new();
    let xv = g.input(x);
    let r = block.dilated_response(&mut g, &store, xv).unwrap();
    let resp = g.value(r);
    assert_eq!(resp.shape(), &[1, 1, 11, 11]);
    for y in 0..11 {
        for xx in 0..11 {
            let (dy, dx) = (y as i32 - 5, xx as i32 - 5);
            let expected = if [-2, 0, 2].contains(&dy) && [-2, 0, 2].contains(&dx) { 1.0 } else { 0.0 };
            assert_eq!(resp.data()[y * 11 + xx], expected, "offset ({dy}, {dx})");
        }
    }
}

#[test]
fn residual_chain_preserves_shared_feature_shape() {
    let cfg = ModelConfig { residual_blocks: 2, ..ModelConfig::full() };
    let gen = Generator::new(cfg).unwrap();
    let store = gen.init_params::<f32>(&mut ChaCha8Rng::seed_from_u64(1));
    let mut g = Graph::new();
    let mut h = g.input(Tensor::full(&[1, 256, 64, 64], 0.1f32));
    for block in &gen.blocks {
        h = block.forward(&mut g, &store, h).unwrap();
    }
    assert_eq!(g.shape(h), &[1, 256, 64, 64]);
}

#[test]
fn attention_without_holes_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[1, 4, 6, 6]);
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = g.attention(xv, &[false; 36], 0.1, 1e-6).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn attention_prefers_the_aligned_candidate() {
    // positions: 0 = hole q, 1 = u1 (parallel to q), 2 = u2 (orthogonal)
    let q = [2.0, 0.0];
    let u1 = [1.0, 0.0];
    let u2 = [0.0, 3.0];
    let data = vec![q[0], u1[0], u2[0], q[1], u1[1], u2[1]];
    let x = Tensor::from_vec(&[1, 2, 1, 3], data).unwrap();
    let mut g = Graph::new();
    let xv = g.input(x);
    let y = g.attention(xv, &[true, false, false], 1.0, 1e-12).unwrap();
    let out = g.value(y).data().to_vec();

    let (s1, s2) = (1.0f64.exp(), 0.0f64.exp());
    let w1 = s1 / (s1 + s2);
    assert!(w1 > 0.73);
    let expected = [q[0] + w1 * u1[0] + (1.0 - w1) * u2[0], q[1] + w1 * u1[1] + (1.0 - w1) * u2[1]];
    assert!((out[0] - expected[0]).abs() < 1e-12);
    assert!((out[3] - expected[1]).abs() < 1e-12);
    // known positions pass through
    assert_eq!([out[1], out[2], out[4], out[5]], [u1[0], u2[0], u1[1], u2[1]]);
}

#[test]
fn fully_masked_attention_falls_back_with_warning() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[1, 3, 4, 4]);
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = g.attention(xv, &[true; 16], 0.1, 1e-6).unwrap();
    assert_eq!(g.value(y), &x);
    assert_eq!(g.warnings().len(), 1);
}

fn head_setup() -> (LandmarkHead, ParamStore<f64>) {
    let head = LandmarkHead::new("h", 6, 5, &[2, 3, 4]);
    let store = ParamStore::init(&head.specs(), &mut ChaCha8Rng::seed_from_u64(8));
    (head, store)
}

#[test]
fn zero_gamma_decouples_landmarks_from_image_feature() {
    let (head, store) = head_setup();
    assert_eq!(store.get(head.gamma_key()).unwrap().data(), &[0.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let f_share = rand_tensor(&mut rng, &[2, 6, 4, 4]);
    let run = |f1: Tensor<f64>| {
        let mut g = Graph::new();
        let fs = g.input(f_share.clone());
        let f1 = g.input(f1);
        let out = head.forward(&mut g, &store, fs, f1).unwrap();
        g.value(out).clone()
    };
    let base = run(rand_tensor(&mut rng, &[2, 5, 8, 8]));
    assert_eq!(base.shape(), &[2, LANDMARK_VALUES]);
    for scale in [1e-3, 1.0, 1e6] {
        let other = rand_tensor(&mut rng, &[2, 5, 8, 8]).map(|v| v * scale);
        let out = run(other);
        assert!(out.data().iter().zip(base.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn unit_gamma_adds_projected_image_feature() {
    let (head, mut store) = head_setup();
    store.set(head.gamma_key(), Tensor::scalar(1.0).reshape(&[1]).unwrap());
    let n = head.feature_len();
    // identity-like fc: first n outputs copy the fused vector
    let mut fc = vec![0.0; LANDMARK_VALUES * n];
    for i in 0..n {
        fc[i * n + i] = 1.0;
    }
    store.set(&head.fc.weight_key(), Tensor::from_vec(&[LANDMARK_VALUES, n], fc).unwrap());
    store.set(&head.fc.bias_key(), Tensor::zeros(&[LANDMARK_VALUES]));
    let pooled = [0.3, -0.7, 1.1, 0.05, 2.0];
    let mut g = Graph::new();
    let f1 = g.input(Tensor::from_vec(&[1, 5], pooled.to_vec()).unwrap());
    let f_lmk = g.input(Tensor::zeros(&[1, n]));
    let out = head.fuse(&mut g, &store, f1, f_lmk).unwrap();
    let out = g.value(out).data();

    let p = store.get(&head.projection.weight_key()).unwrap();
    for r in 0..n {
        let direct: f64 = (0..5).map(|c| p.data()[r * 5 + c] * pooled[c]).sum();
        assert!((out[r] - direct).abs() < 1e-12);
    }
    assert!(out[n..].iter().all(|&v| v == 0.0));
}

#[test]
fn fusion_rejects_mismatched_lengths() {
    let (head, store) = head_setup();
    let mut g = Graph::new();
    let f1 = g.input(Tensor::<f64>::zeros(&[1, 4]));
    let f_lmk = g.input(Tensor::zeros(&[1, head.feature_len()]));
    assert!(matches!(head.fuse(&mut g, &store, f1, f_lmk), Err(inclg_core::Error::Config(_))));
    let f1 = g.input(Tensor::zeros(&[1, 5]));
    let f_lmk = g.input(Tensor::zeros(&[1, head.feature_len() + 1]));
    assert!(matches!(head.fuse(&mut g, &store, f1, f_lmk), Err(inclg_core::Error::Config(_))));
}

#[test]
fn landmark_branches_widen_and_concatenate() {
    let cfg = ModelConfig::full();
    let gen = Generator::new(cfg.clone()).unwrap();
    let widths: Vec<usize> = gen.landmarks.branches.iter().map(|b| b.out_channels).collect();
    assert_eq!(widths, cfg.landmark_branches);
    assert!(widths.windows(2).all(|w| w[0] < w[1]));
    assert!(gen.landmarks.branches.iter().all(|b| b.kernel == 1 && b.in_channels == cfg.channels[2]));

    let small = Generator::new(ModelConfig::reduced()).unwrap();
    let store = small.init_params::<f64>(&mut ChaCha8Rng::seed_from_u64(0));
    let mut g = Graph::new();
    let fs = g.input(Tensor::full(&[1, 64, 8, 8], 0.5));
    let feats = small.landmarks.features(&mut g, &store, fs).unwrap();
    let lens: Vec<usize> = feats.branches.iter().map(|&b| g.shape(b)[1]).collect();
    assert_eq!(lens, vec![16, 32, 64]);
    assert_eq!(g.shape(feats.f_lmk), &[1, lens.iter().sum::<usize>()]);
}

#[test]
fn config_rejects_non_increasing_branches() {
    let cfg = ModelConfig { landmark_branches: vec![16, 16, 32], ..ModelConfig::reduced() };
    assert!(Generator::new(cfg).is_err());
}

fn hole_mask(size: usize) -> BinaryMask {
    BinaryMask::from_fn(size, size, |x, y| x >= size / 4 && x < size / 2 && y >= size / 2 && y < 3 * size / 4)
}

#[test]
fn full_width_shapes() {
    let gen = Generator::new(ModelConfig { residual_blocks: 1, ..ModelConfig::full() }).unwrap();
    let store = gen.init_params::<f32>(&mut ChaCha8Rng::seed_from_u64(1));
    let img = Tensor::full(&[1, 3, 256, 256], 0.4f32);
    let mask = hole_mask(256);
    let mut g = Graph::new();
    let enc = gen.encode(&mut g, &store, &img, std::slice::from_ref(&mask)).unwrap();
    let sizes: Vec<usize> = enc.stages.iter().map(|&s| g.shape(s)[2]).collect();
    assert_eq!(sizes, vec![256, 128, 64]);
    assert_eq!(g.shape(enc.f_share), &[1, 256, 64, 64]);

    let mut g = Graph::new();
    let out = gen.forward(&mut g, &store, &img, std::slice::from_ref(&mask)).unwrap();
    assert_eq!(g.shape(out.image), &[1, 3, 256, 256]);
    assert_eq!(g.shape(out.landmarks), &[1, LANDMARK_VALUES]);
    assert!(g.value(out.image).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert_eq!(out.landmark_maps[0].channels(), 68);
    assert_eq!(out.landmark_maps[0].size(), 128);
}

#[test]
fn encoder_ignores_hole_content() {
    let cfg = ModelConfig::reduced();
    let gen = Generator::new(cfg).unwrap();
    let store = gen.init_params::<f64>(&mut ChaCha8Rng::seed_from_u64(2));
    let mask = hole_mask(32);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_tensor(&mut rng, &[1, 3, 32, 32]).map(|v| v.abs());
    let mut b = a.clone();
    for c in 0..3 {
        for (i, &m) in mask.data().iter().enumerate() {
            if m == 1 {
                b.data_mut()[c * 1024 + i] = rng.gen();
            }
        }
    }
    assert_ne!(a, b);
    let share = |img: &Tensor<f64>| {
        let mut g = Graph::new();
        let enc = gen.encode(&mut g, &store, img, std::slice::from_ref(&mask)).unwrap();
        g.value(enc.f_share).clone()
    };
    assert!(share(&a).max_abs_diff(&share(&b)) < 1e-5);
}

#[test]
fn zero_parameters_give_zero_encoder_features() {
    let gen = Generator::new(ModelConfig::reduced()).unwrap();
    let mut store = gen.init_params::<f64>(&mut ChaCha8Rng::seed_from_u64(0));
    for spec in gen.specs() {
        store.set(&spec.key, Tensor::zeros(&spec.shape));
    }
    let mut g = Graph::new();
    let enc = gen.encode(&mut g, &store, &Tensor::zeros(&[1, 3, 32, 32]), &[BinaryMask::zeros(32, 32)]).unwrap();
    for s in enc.stages {
        assert!(g.value(s).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn generator_rejects_wrong_resolution() {
    let gen = Generator::new(ModelConfig::reduced()).unwrap();
    let store = gen.init_params::<f64>(&mut ChaCha8Rng::seed_from_u64(0));
    let mut g = Graph::new();
    let r = gen.forward(&mut g, &store, &Tensor::zeros(&[1, 3, 64, 64]), &[BinaryMask::zeros(64, 64)]);
    assert!(r.is_err());
}

#[test]
fn forward_preserves_known_pixels_and_is_deterministic() {
    let gen = Generator::new(ModelConfig::reduced()).unwrap();
    let store = gen.init_params::<f32>(&mut ChaCha8Rng::seed_from_u64(6));
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let img = Tensor::from_vec(&[2, 3, 32, 32], (0..2 * 3 * 1024).map(|_| rng.gen::<f32>()).collect()).unwrap();
    let masks = vec![hole_mask(32), BinaryMask::from_fn(32, 32, |x, y| (x + y) % 3 == 0)];
    let run = || {
        let mut g = Graph::new();
        let out = gen.forward(&mut g, &store, &img, &masks).unwrap();
        (g.value(out.image).clone(), g.value(out.landmarks).clone())
    };
    let (a, la) = run();
    for (s, mask) in masks.iter().enumerate() {
        for c in 0..3 {
            for (i, &m) in mask.data().iter().enumerate() {
                let idx = (s * 3 + c) * 1024 + i;
                if m == 0 {
                    assert_eq!(a.data()[idx].to_bits(), img.data()[idx].to_bits());
                }
            }
        }
    }
    let (b, lb) = run();
    assert_eq!(a, b);
    assert_eq!(la, lb);
}

#[test]
fn generator_pixel_loss_gradient_matches_finite_differences() {
    let gen = Generator::new(ModelConfig::reduced()).unwrap();
    let store = gen.init_params::<f64>(&mut ChaCha8Rng::seed_from_u64(12));
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let img = rand_tensor(&mut rng, &[1, 3, 32, 32]).map(|v| 0.5 + 0.4 * v);
    let masks = [hole_mask(32)];
    let loss_of = |store: &ParamStore<f64>| {
        let mut g = Graph::new();
        let out = gen.forward(&mut g, store, &img, &masks).unwrap();
        let target = g.input(img.clone());
        let l = g.l1(out.raw, target, None).unwrap();
        (g, l, out.landmark_maps)
    };
    let (g, l, _) = loss_of(&store);
    let grads = g.backward(l).params(&g);
    let keys = ["gen.enc1.feature.weight", "gen.enc2.gate.weight", "gen.res0.dilated.weight", "gen.up2.feature.weight", "gen.out.weight"];
    for key in keys {
        let analytic = &grads[key];
        for _ in 0..3 {
            let i = rng.gen_range(0..analytic.len());
            let eval = |d: f64| {
                let mut s = store.clone();
                s.get_mut(key).unwrap().data_mut()[i] += d;
                let (g, l, maps) = loss_of(&s);
                (g.value(l).item(), g.kink_pattern(), maps)
            };
            // shrink the step until both probes sit on the same linear piece
            let mut h = 1e-5;
            let numeric = loop {
                let (plus, kp, mp) = eval(h);
                let (minus, km, mm) = eval(-h);
                if (kp == km && mp == mm) || h < 1e-8 {
                    break (plus - minus) / (2.0 * h);
                }
                h /= 10.0;
            };
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            assert!(err < 1e-3, "{key}[{i}] step {h:e}: analytic {a} numeric {numeric}");
        }
    }
}

#[test]
fn discriminator_output_follows_conv_arithmetic() {
    let d = Discriminator::new(&ModelConfig::full());
    let mut size = 256usize;
    for layer in &d.layers {
        size = (size + 2 * layer.opts.pad - layer.kernel) / layer.opts.stride + 1;
    }
    assert_eq!(d.output_size(256), Some(size));
    assert_eq!(size, 30);
}
