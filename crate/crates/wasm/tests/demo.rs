use inclg_core::data::{group_of, synthetic};
use inclg_core::types::{rasterize_landmarks, BinaryMask, FaceImage};
use inclg_wasm::{attention_fill, Demo};

#[test]
fn size_is_bounded() {
    assert!(Demo::new(0, 8).is_err());
    assert!(Demo::new(0, 512).is_err());
    let d = Demo::new(1, 64).unwrap();
    let img = d.image();
    assert_eq!(img.len(), 64 * 64 * 4);
    assert!(img.chunks(4).all(|p| p[3] == 255));
}

#[test]
fn mask_stats_report_group() {
    let d = Demo::new(2, 64).unwrap();
    let mouth = d.mouth_mask();
    let stats: serde_json::Value = serde_json::from_str(&d.mask_stats(&mouth).unwrap()).unwrap();
    let holes = mouth.iter().filter(|&&v| v == 1).count();
    assert_eq!(stats["holes"], holes);
    let ratio = holes as f64 / 4096.0;
    assert_eq!(stats["ratio"], ratio);
    assert_eq!(stats["group"], group_of(ratio).unwrap().name());

    let empty: serde_json::Value = serde_json::from_str(&d.mask_stats(&[0; 4096]).unwrap()).unwrap();
    assert!(empty["group"].is_null());
    // 255 counts as hole, like a painted canvas alpha
    let full: serde_json::Value = serde_json::from_str(&d.mask_stats(&[255; 4096]).unwrap()).unwrap();
    assert_eq!(full["ratio"], 1.0);
    assert!(full["group"].is_null());
    assert!(d.mask_stats(&[0; 10]).unwrap_err().contains("4096"));
}

#[test]
fn overlay_marks_only_landmark_pixels() {
    let d = Demo::new(3, 96).unwrap();
    let (_, lm) = synthetic::face(3, 96);
    let maps = rasterize_landmarks(&lm, 96, 1);
    let (img, over) = (d.image(), d.landmark_overlay());
    let mut marked = 0;
    for (i, (a, b)) in img.chunks(4).zip(over.chunks(4)).enumerate() {
        if maps.plane()[i] == 1 {
            assert_eq!(b, [255, 40, 40, 255]);
            marked += 1;
        } else {
            assert_eq!(a, b);
        }
    }
    assert_eq!(marked, maps.ones());
    assert!(marked > 40, "only {marked} distinct landmark pixels");
}

#[test]
fn fill_keeps_known_pixels_and_stays_in_range() {
    let d = Demo::new(4, 48).unwrap();
    let mask = d.mouth_mask();
    let img = d.image();
    let out = d.attention_fill(&mask, 0.1).unwrap();
    let (mut lo, mut hi) = ([255u8; 3], [0u8; 3]);
    for (p, &m) in img.chunks(4).zip(&mask) {
        if m == 0 {
            (0..3).for_each(|c| {
                lo[c] = lo[c].min(p[c]);
                hi[c] = hi[c].max(p[c]);
            });
        }
    }
    for ((a, b), &m) in img.chunks(4).zip(out.chunks(4)).zip(&mask) {
        if m == 0 {
            assert_eq!(a, b);
        } else {
            // attention weights are a softmax, so each fill is a convex mix of known colours
            assert!((0..3).all(|c| b[c] >= lo[c] && b[c] <= hi[c]), "{b:?} outside {lo:?}..{hi:?}");
        }
    }
    assert_ne!(img, out);
}

#[test]
fn hole_in_flat_region_takes_its_colour() {
    // left half red, right half blue; hole well inside the red half
    let (w, h) = (24, 16);
    let plane = w * h;
    let mut px = vec![0.0f32; 3 * plane];
    for i in 0..plane {
        let red = i % w < w / 2;
        px[i] = if red { 0.9 } else { 0.1 };
        px[2 * plane + i] = if red { 0.1 } else { 0.8 };
        px[plane + i] = 0.2;
    }
    let img = FaceImage::new(w, h, px).unwrap();
    let mask = BinaryMask::from_fn(w, h, |x, y| (3..7).contains(&x) && (5..10).contains(&y));
    let out = attention_fill(&img, &mask, 0.01).unwrap();
    for (i, &m) in mask.data().iter().enumerate() {
        for c in 0..3 {
            let (a, b) = (out.pixels()[c * plane + i], img.pixels()[c * plane + i]);
            if m == 1 {
                assert!((a - [0.9, 0.2, 0.1][c]).abs() < 1e-3, "pixel {i} channel {c}: {a}");
            } else {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}

#[test]
fn fill_rejects_bad_input() {
    let d = Demo::new(5, 32).unwrap();
    assert!(d.attention_fill(&[1; 1024], 0.1).unwrap_err().contains("no known pixels"));
    assert!(d.attention_fill(&[0; 1024], 0.0).is_err());
    assert_eq!(d.attention_fill(&[0; 1024], 0.1).unwrap(), d.image());
}
