use std::fs;
use std::path::{Path, PathBuf};

use inclg_core::data::{
    build_flist, group_and_sample, group_and_sample_masks, group_of, load_image, load_landmarks, load_mask, synthetic,
    write_landmarks, Batches, Dataset, FileList, MaskGroup, DEFAULT_BATCH_SIZE, IMAGE_EXTENSIONS,
};
use inclg_core::error::Error;
use inclg_core::types::{BinaryMask, FaceImage, LandmarkSet};
use tempfile::tempdir;

fn save_gray(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> u8) {
    image::GrayImage::from_fn(w, h, |x, y| image::Luma([f(x, y)])).save(path).unwrap();
}

fn save_rgb(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> [u8; 3]) {
    image::RgbImage::from_fn(w, h, |x, y| image::Rgb(f(x, y))).save(path).unwrap();
}

/// Recursive listing with plain `read_dir`, independent of the walker the
/// library uses.
fn walk(dir: &Path, out: &mut Vec<PathBuf>) {
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            walk(&p, out);
        } else if p.extension().is_some_and(|x| x == "png") {
            out.push(p);
        }
    }
}

#[test]
fn flist_is_sorted() {
    let d = tempdir().unwrap();
    save_gray(&d.path().join("b.png"), 2, 2, |_, _| 0);
    save_gray(&d.path().join("a.png"), 2, 2, |_, _| 0);
    fs::write(d.path().join("notes.txt"), "x").unwrap();
    let l = build_flist(d.path(), &IMAGE_EXTENSIONS).unwrap();
    assert_eq!(l.0, vec![d.path().join("a.png"), d.path().join("b.png")]);
}

#[test]
fn flist_of_empty_directory_is_empty() {
    let d = tempdir().unwrap();
    assert!(build_flist(d.path(), &IMAGE_EXTENSIONS).unwrap().is_empty());
}

#[test]
fn flist_matches_recursive_walk() {
    let d = tempdir().unwrap();
    for (i, sub) in ["", "x", "x/y", "z", "z"].iter().enumerate() {
        let dir = d.path().join(sub);
        fs::create_dir_all(&dir).unwrap();
        save_gray(&dir.join(format!("{i}.png")), 2, 2, |_, _| 0);
    }
    let l = build_flist(d.path(), &["png"]).unwrap();
    let mut oracle = Vec::new();
    walk(d.path(), &mut oracle);
    oracle.sort();
    assert_eq!(l.len(), 5);
    assert_eq!(l.0, oracle);
}

#[test]
fn flist_round_trips_and_rejects_missing_or_duplicate() {
    let d = tempdir().unwrap();
    save_gray(&d.path().join("a.png"), 2, 2, |_, _| 0);
    let list = build_flist(d.path(), &["png"]).unwrap();
    let f = d.path().join("l.flist");
    list.write(&f).unwrap();
    assert!(fs::read_to_string(&f).unwrap().ends_with(".png\n"));
    assert_eq!(FileList::read(&f, None).unwrap(), list);

    fs::write(&f, "a.png\n").unwrap();
    assert_eq!(FileList::read(&f, Some(d.path())).unwrap(), list);
    fs::write(&f, "a.png\na.png\n").unwrap();
    assert!(FileList::read(&f, Some(d.path())).unwrap_err().to_string().contains("duplicate"));
    fs::write(&f, "missing.png\n").unwrap();
    assert!(FileList::read(&f, Some(d.path())).is_err());
}

#[test]
fn load_image_resizes_and_scales() {
    let d = tempdir().unwrap();
    let big = d.path().join("big.png");
    save_rgb(&big, 512, 512, |x, y| [(x / 2) as u8, (y / 2) as u8, 7]);
    let img = load_image(&big).unwrap();
    assert_eq!((img.width(), img.height()), (256, 256));

    let gray = d.path().join("gray.png");
    save_rgb(&gray, 300, 200, |_, _| [128, 128, 128]);
    let g = load_image(&gray).unwrap();
    assert!(g.pixels().iter().all(|&v| (v - 128.0 / 255.0).abs() < 1e-6));
    assert!((g.pixels()[0] - 0.50196).abs() < 1e-5);
}

#[test]
fn load_image_at_model_size_is_not_resampled() {
    let d = tempdir().unwrap();
    let p = d.path().join("n.png");
    save_rgb(&p, 256, 256, |x, y| [(x * 7 % 256) as u8, (y * 13 % 256) as u8, ((x ^ y) % 256) as u8]);
    let img = load_image(&p).unwrap();
    let back = img.to_rgb8();
    let orig = image::open(&p).unwrap().to_rgb8();
    assert_eq!(back, orig);
}

#[test]
fn load_image_reports_decode_failure() {
    let d = tempdir().unwrap();
    let p = d.path().join("bad.png");
    fs::write(&p, b"not a png").unwrap();
    assert!(matches!(load_image(&p), Err(Error::Decode { .. })));
}

#[test]
fn load_mask_thresholds_and_resizes() {
    let d = tempdir().unwrap();
    let white = d.path().join("w.png");
    save_gray(&white, 100, 80, |_, _| 255);
    assert_eq!(load_mask(&white).unwrap().ratio(), 1.0);
    let black = d.path().join("b.png");
    save_gray(&black, 64, 64, |_, _| 0);
    assert_eq!(load_mask(&black).unwrap().ratio(), 0.0);
    let half = d.path().join("h.png");
    save_gray(&half, 512, 512, |x, _| if x < 256 { 255 } else { 0 });
    let m = load_mask(&half).unwrap();
    assert_eq!((m.width(), m.height()), (256, 256));
    let oracle = m.data().iter().filter(|&&v| v == 1).count() as f64 / 65536.0;
    assert_eq!(m.ratio(), oracle);
    assert!((m.ratio() - 0.5).abs() < 0.01);
    // 127 is below one half, 128 above
    let edge = d.path().join("e.png");
    save_gray(&edge, 256, 256, |x, _| if x < 128 { 127 } else { 128 });
    assert_eq!(load_mask(&edge).unwrap().ratio(), 0.5);
}

#[test]
fn mask_ratio_counting() {
    let zeros = BinaryMask::zeros(256, 256);
    assert_eq!(zeros.ratio(), 0.0);
    let m = BinaryMask::from_fn(256, 256, |x, y| y * 256 + x < 6553);
    assert_eq!(m.hole_count(), 6553);
    assert_eq!(m.ratio(), 6553.0 / 65536.0);
    assert_eq!(group_of(m.ratio()), Some(MaskGroup::G1));
    assert_eq!(group_of(BinaryMask::ones(256, 256).ratio()), None);
}

#[test]
fn group_boundaries() {
    let cases = [
        (0.0, None),
        (1e-9, Some(MaskGroup::G1)),
        (0.1999, Some(MaskGroup::G1)),
        (0.2, Some(MaskGroup::G2)),
        (0.3999, Some(MaskGroup::G2)),
        (0.4, Some(MaskGroup::G3)),
        (0.6, Some(MaskGroup::G3)),
        (0.61, None),
        (1.0, None),
    ];
    for (r, g) in cases {
        assert_eq!(group_of(r), g, "ratio {r}");
    }
}

fn entries(per_group: usize) -> Vec<(PathBuf, f64)> {
    let mut v = Vec::new();
    for (gi, base) in [0.05, 0.25, 0.45].iter().enumerate() {
        for i in 0..per_group {
            v.push((PathBuf::from(format!("g{gi}/{i:05}.png")), base + 0.1 * i as f64 / per_group as f64));
        }
    }
    v.push(("zero.png".into(), 0.0));
    v.push(("big.png".into(), 0.7));
    v
}

#[test]
fn default_split_sizes() {
    let s = group_and_sample(&entries(3500), 3300, 200, 1).unwrap();
    assert_eq!((s.train.len(), s.val.len()), (9900, 600));
    assert_eq!(s.discarded.len(), 2);
}

#[test]
fn exact_partition_of_a_small_group() {
    let s = group_and_sample(&entries(3), 2, 1, 9).unwrap();
    for (g, train, val) in &s.groups {
        assert_eq!((train.len(), val.len()), (2, 1));
        assert!(val.iter().all(|v| !train.contains(v)), "{g:?}");
        let mut all: Vec<_> = train.iter().chain(val).cloned().collect();
        all.sort();
        let prefix = format!("g{}/", *g as usize);
        assert_eq!(all, (0..3).map(|i| PathBuf::from(format!("{prefix}{i:05}.png"))).collect::<Vec<_>>());
    }
}

#[test]
fn sampling_is_seeded_and_order_independent() {
    let e = entries(50);
    let a = group_and_sample(&e, 10, 5, 42).unwrap();
    let b = group_and_sample(&e, 10, 5, 42).unwrap();
    assert_eq!(a, b);
    let mut rev = e.clone();
    rev.reverse();
    assert_eq!(group_and_sample(&rev, 10, 5, 42).unwrap(), a);
    assert_ne!(group_and_sample(&e, 10, 5, 43).unwrap().train, a.train);
}

#[test]
fn insufficient_group_is_named() {
    let mut e = entries(5);
    e.retain(|(p, _)| !p.starts_with("g1") || p.ends_with("00000.png"));
    match group_and_sample(&e, 2, 1, 0) {
        Err(Error::InsufficientMasks { group, needed, found }) => assert_eq!((group.as_str(), needed, found), ("G2", 3, 1)),
        other => panic!("{other:?}"),
    }
}

#[test]
fn sampling_mask_files_on_disk() {
    let d = tempdir().unwrap();
    let mut paths = Vec::new();
    // 16 rows of 16: k rows of holes give ratio k/16
    for (i, k) in [1, 2, 3, 4, 5, 6, 7, 8, 9, 12, 0, 16].iter().enumerate() {
        let p = d.path().join(format!("{i:02}.png"));
        save_gray(&p, 16, 16, |_, y| if y < *k { 255 } else { 0 });
        paths.push(p);
    }
    let s = group_and_sample_masks(&FileList(paths), 1, 1, 3).unwrap();
    assert_eq!((s.train.len(), s.val.len()), (3, 3));
    assert_eq!(s.discarded.len(), 3);
}

#[test]
fn landmark_files() {
    let d = tempdir().unwrap();
    let p = d.path().join("l.txt");
    fs::write(&p, format!("512 512\n{}\n", vec!["0"; 136].join(" "))).unwrap();
    assert!(load_landmarks(&p).unwrap().points().all(|pt| pt == (0.0, 0.0)));

    fs::write(&p, format!("512 512\n{}\n", vec!["1"; 135].join(" "))).unwrap();
    match load_landmarks(&p) {
        Err(Error::Landmarks { path, reason }) => {
            assert_eq!(path, p);
            assert!(reason.contains("135"), "{reason}");
        }
        other => panic!("{other:?}"),
    }

    let mut vals = vec!["0".to_string(); 136];
    vals[0] = "256".into();
    vals[1] = "128".into();
    fs::write(&p, format!("512 512\n{}\n", vals.join(" "))).unwrap();
    assert_eq!(load_landmarks(&p).unwrap().point(0), (0.5, 0.25));
}

#[test]
fn landmark_write_read_round_trip() {
    let d = tempdir().unwrap();
    let (_, lm) = synthetic::face(4, 64);
    for (w, h) in [(256, 256), (640, 480)] {
        let p = d.path().join(format!("{w}.txt"));
        write_landmarks(&p, &lm, w, h).unwrap();
        assert_eq!(load_landmarks(&p).unwrap(), lm);
    }
}

#[test]
fn batch_schedule() {
    let b = Batches::new(8, 3, DEFAULT_BATCH_SIZE, 5).unwrap();
    assert_eq!(DEFAULT_BATCH_SIZE, 4);
    assert_eq!(b.per_epoch(), 2);
    let epoch0: Vec<_> = b.iter_from(0).take(2).collect();
    let mut seen: Vec<usize> = epoch0.iter().flat_map(|i| i.records.clone()).collect();
    seen.sort();
    assert_eq!(seen, (0..8).collect::<Vec<_>>());
    assert_eq!(b.at(2).epoch, 1);
    assert!(epoch0.iter().all(|i| i.masks.len() == 4 && i.masks.iter().all(|&m| m < 3)));

    let again = Batches::new(8, 3, 4, 5).unwrap();
    assert_eq!((0..20).map(|s| b.at(s)).collect::<Vec<_>>(), (0..20).map(|s| again.at(s)).collect::<Vec<_>>());
    let other = Batches::new(8, 3, 4, 6).unwrap();
    assert_ne!((0..4).map(|s| b.at(s)).collect::<Vec<_>>(), (0..4).map(|s| other.at(s)).collect::<Vec<_>>());

    assert!(Batches::new(3, 1, 4, 0).is_err());
    assert!(Batches::new(8, 1, 0, 0).is_err());
}

#[test]
fn batches_keep_image_landmark_pairing() {
    let recs: Vec<(FaceImage, LandmarkSet)> = (0..8).map(|i| synthetic::face(i, 16)).collect();
    let masks = vec![BinaryMask::zeros(16, 16), BinaryMask::ones(16, 16)];
    let data = Dataset::new(recs.iter().map(|r| r.0.clone()).collect(), recs.iter().map(|r| r.1.clone()).collect(), masks).unwrap();
    let sched = Batches::for_dataset(&data, 4, 1).unwrap();
    for step in 0..6 {
        let idx = sched.at(step);
        let batch = data.batch::<f32>(&idx).unwrap();
        assert_eq!(batch.images.shape(), &[4, 3, 16, 16]);
        for (k, &r) in batch.records.iter().enumerate() {
            assert_eq!(&batch.images.data()[k * 768..(k + 1) * 768], recs[r].0.pixels());
            assert_eq!(&batch.landmarks.data()[k * 136..(k + 1) * 136], recs[r].1.values());
        }
    }
}

#[test]
fn dataset_rejects_misaligned_lists_and_skips_bad_records() {
    let d = tempdir().unwrap();
    let paths = synthetic::write_dataset(d.path(), 5, 2, 32, 0).unwrap();
    let images = FileList::read(&paths.images, None).unwrap();
    let landmarks = FileList::read(&paths.landmarks, None).unwrap();
    let masks = FileList::read(&paths.masks, None).unwrap();

    let short = FileList(landmarks.0[..4].to_vec());
    assert!(Dataset::load(&images, &short, &masks, 32).is_err());

    fs::write(&images.0[2], b"garbage").unwrap();
    let (data, skipped) = Dataset::load(&images, &landmarks, &masks, 32).unwrap();
    assert_eq!((data.len(), skipped), (4, 1));
    // record 3 moved up one slot, landmarks with it
    assert_eq!(data.landmarks[2], load_landmarks(&landmarks.0[3]).unwrap());
}

#[test]
fn synthetic_faces_are_deterministic_and_in_range() {
    let (a, la) = synthetic::face(7, 64);
    let (b, lb) = synthetic::face(7, 64);
    assert_eq!((&a, &la), (&b, &lb));
    assert!(la.values().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_ne!(synthetic::face(8, 64).0, a);
    let m = synthetic::stroke_mask(1, 64, 0.3);
    assert!(m.ratio() >= 0.3 && m.ratio() < 0.9, "{}", m.ratio());
    let mouth = synthetic::mouth_mask(&la, 64);
    let (mx, my) = la.point(51);
    assert!(mouth.is_hole((mx * 64.0) as usize, (my * 64.0) as usize));
    assert!(mouth.ratio() > 0.0 && mouth.ratio() < 0.2);
}
