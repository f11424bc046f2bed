use std::collections::HashMap;
use std::path::Path;

use ctsae::data::synth::{crop_view, render, view_columns};
use ctsae::data::{
    batch_views, load_dataset, preprocess, preprocess_image, read_manifest, resize_bilinear, split_indices, synthesize, ClassKind, Image,
    SynthSpec, DEFAULT_FRACTIONS,
};
use ctsae::{Error, DURATIONS};
use proptest::prelude::*;

/// Interpolation at one output pixel written from the textbook formula:
/// source coordinate `(i + 1/2) * src/dst - 1/2`, clamped to the raster.
fn bilinear_at(img: &Image, w: usize, h: usize, x: usize, y: usize) -> f64 {
    let coord = |i: usize, src: usize, dst: usize| ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).max(0.0).min((src - 1) as f64);
    let (sx, sy) = (coord(x, img.width, w), coord(y, img.height, h));
    let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(img.width - 1), (y0 + 1).min(img.height - 1));
    let (ax, ay) = (sx - x0 as f64, sy - y0 as f64);
    let v = |x: usize, y: usize| f64::from(img.pixels[y * img.width + x]);
    v(x0, y0) * (1.0 - ax) * (1.0 - ay) + v(x1, y0) * ax * (1.0 - ay) + v(x0, y1) * (1.0 - ax) * ay + v(x1, y1) * ax * ay
}

fn assert_matches_oracle(img: &Image, w: usize, h: usize) {
    let out = resize_bilinear(img, w, h).unwrap();
    assert_eq!((out.width, out.height), (w, h));
    for y in 0..h {
        for x in 0..w {
            let want = bilinear_at(img, w, h, x, y);
            let got = f64::from(out.pixels[y * w + x]);
            assert!((got - want).abs() < 1e-6 * want.abs().max(1.0), "({x},{y}) {got} vs {want}");
        }
    }
}

#[test]
fn checkerboard_downsize_matches_bilinear_weights() {
    let board = Image::new(4, 4, (0..16).map(|i| if (i % 4 + i / 4) % 2 == 0 { 1.0 } else { 0.0 }).collect());
    assert_matches_oracle(&board, 2, 2);
    let out = resize_bilinear(&board, 2, 2).unwrap();
    assert!(out.pixels.iter().all(|&p| (p - 0.5).abs() < 1e-6));
}

#[test]
fn arbitrary_resizes_match_bilinear_weights() {
    let img = Image::new(7, 5, (0..35).map(|i| ((i * 37) % 256) as f32).collect());
    for (w, h) in [(3, 4), (14, 10), (7, 2), (1, 1), (20, 3)] {
        assert_matches_oracle(&img, w, h);
    }
}

#[test]
fn normalization_endpoints_and_identity() {
    let img = Image::new(2, 2, vec![0.0, 255.0, 127.5, 51.0]);
    let out = preprocess_image(&img, 2).unwrap();
    assert_eq!(out.pixels[0], -1.0);
    assert_eq!(out.pixels[1], 1.0);
    assert_eq!(out.pixels[2], 0.0);
    assert!((out.pixels[3] - (51.0 / 127.5 - 1.0)).abs() < 1e-7);
    assert_eq!(preprocess_image(&out, 2).unwrap(), out);
}

proptest! {
    #[test]
    fn preprocessing_stays_in_unit_interval(px in prop::collection::vec(0u8..=255, 30), size in 1usize..12) {
        let img = Image::new(6, 5, px.into_iter().map(f32::from).collect());
        let out = preprocess_image(&img, size).unwrap();
        prop_assert!(out.pixels.iter().all(|p| (-1.0..=1.0).contains(p)));
        prop_assert_eq!(preprocess_image(&out, size).unwrap(), out);
    }
}

#[test]
fn unlabeled_split_sizes() {
    let s = split_indices(&[None; 10], DEFAULT_FRACTIONS, 1).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 1, 2));
}

#[test]
fn stratified_split_is_balanced_and_exhaustive() {
    let labels: Vec<Option<usize>> = (0..100).map(|i| Some(i % 4)).collect();
    for seed in 0..10 {
        let s = split_indices(&labels, DEFAULT_FRACTIONS, seed).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        for part in [&s.train, &s.val, &s.test] {
            let mut counts = [0usize; 4];
            part.iter().for_each(|&i| counts[labels[i].unwrap()] += 1);
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            assert!(hi - lo <= 1, "{counts:?}");
        }
        assert_eq!(s, split_indices(&labels, DEFAULT_FRACTIONS, seed).unwrap());
    }
}

#[test]
fn half_second_view_is_the_central_eighth() {
    let size = 32;
    let r = render(ClassKind::Chirp, size, 0.0, 3, 0);
    let stride = 8 * size;
    let cols = view_columns(size, 0.5);
    assert_eq!(cols.len(), size);
    let view = &r.views[0];
    for row in 0..size {
        for c in 0..size {
            assert!((view[row * size + c] - r.master[row * stride + cols.start + c]).abs() < 1e-5);
        }
    }
}

#[test]
fn one_second_view_is_the_resized_central_quarter() {
    let size = 32;
    let r = render(ClassKind::Chirp, size, 0.0, 3, 0);
    let cols = view_columns(size, 1.0);
    let stride = 8 * size;
    let crop: Vec<f32> = (0..size).flat_map(|row| r.master[row * stride + cols.start..row * stride + cols.end].to_vec()).collect();
    let resized = resize_bilinear(&Image::new(cols.len(), size, crop), size, size).unwrap();
    for (a, b) in resized.pixels.iter().zip(&r.views[1]) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn every_view_is_a_block_average_of_the_master() {
    for kind in ClassKind::ALL {
        let size = 16;
        let r = render(kind, size, 0.05, 11, 2);
        for (k, &d) in DURATIONS.iter().enumerate() {
            let cols = view_columns(size, d);
            let group = cols.len() / size;
            for row in 0..size {
                for c in 0..size {
                    let start = row * 8 * size + cols.start + c * group;
                    let mean = r.master[start..start + group].iter().map(|&v| f64::from(v)).sum::<f64>() / group as f64;
                    assert!((f64::from(r.views[k][row * size + c]) - mean).abs() < 1e-5);
                }
            }
            assert_eq!(crop_view(&r.master, size, d), r.views[k]);
        }
    }
}

#[test]
fn classes_render_differently() {
    let masters: Vec<Vec<f32>> = ClassKind::ALL.iter().map(|&k| render(k, 16, 0.0, 1, 0).master).collect();
    for i in 0..4 {
        for j in i + 1..4 {
            assert_ne!(masters[i], masters[j]);
        }
    }
}

fn spec(per_class: usize, seed: u64) -> SynthSpec {
    SynthSpec { samples_per_class: per_class, image_size: 16, seed, ..SynthSpec::default() }
}

#[test]
fn synthesis_writes_a_balanced_loadable_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let rows = synthesize(&spec(5, 2), dir.path()).unwrap();
    assert_eq!(rows.len(), 20);
    let manifest = dir.path().join("manifest.csv");
    assert_eq!(read_manifest(&manifest).unwrap(), rows);
    let samples = load_dataset(&manifest).unwrap();
    assert_eq!(samples.len(), 20);
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for (s, r) in samples.iter().zip(&rows) {
        assert_eq!(s.id, r.id);
        assert_eq!(s.label, r.label);
        *counts.entry(s.label.unwrap()).or_default() += 1;
        assert_eq!(s.views.len(), 4);
    }
    assert!(counts.values().all(|&c| c == 5) && counts.len() == 4);
    let text = std::fs::read_to_string(&manifest).unwrap();
    assert!(text.starts_with("id,label,path_0.5,path_1.0,path_2.0,path_4.0\n"));
}

fn image_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir.join("images"))
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn synthesis_is_bit_identical_under_a_seed() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    synthesize(&spec(3, 9), a.path()).unwrap();
    synthesize(&spec(3, 9), b.path()).unwrap();
    synthesize(&spec(3, 10), c.path()).unwrap();
    assert_eq!(image_bytes(a.path()), image_bytes(b.path()));
    assert_ne!(image_bytes(a.path()), image_bytes(c.path()));
}

#[test]
fn unwritable_output_aborts() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    assert!(matches!(synthesize(&spec(1, 0), &blocker.join("out")), Err(Error::Io { .. })));
}

#[test]
fn preprocessed_samples_stack_into_batches() {
    let dir = tempfile::tempdir().unwrap();
    synthesize(&spec(2, 4), dir.path()).unwrap();
    let samples = load_dataset(&dir.path().join("manifest.csv")).unwrap();
    assert!(batch_views::<f32>(&samples.iter().collect::<Vec<_>>(), &DURATIONS).is_err());
    let prepared: Vec<_> = samples.iter().map(|s| preprocess(s, 8).unwrap()).collect();
    let refs: Vec<_> = prepared.iter().collect();
    let batch = batch_views::<f32>(&refs, &DURATIONS).unwrap();
    assert_eq!(batch.len(), 4);
    assert_eq!(batch[0].shape(), &[8, 1, 8, 8]);
    let single = batch_views::<f32>(&refs, &[4.0]).unwrap();
    assert_eq!(single[0].data(), batch[3].data());
}

#[test]
fn malformed_rows_are_all_reported() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.csv");
    std::fs::write(&m, "id,label,path_0.5,path_1.0,path_2.0,path_4.0\na,0,w,x,y,z\nb,1,x\nc,0,w,x,y,z,extra\n").unwrap();
    match read_manifest(&m).unwrap_err() {
        Error::Rows { rows, .. } => {
            let lines: Vec<usize> = rows.iter().map(|r| r.line).collect();
            assert_eq!(lines, vec![3, 4]);
        }
        e => panic!("{e}"),
    }
    let err = load_dataset(&m).unwrap_err().to_string();
    assert!(err.contains("line 3") && err.contains("line 4"), "{err}");
}

#[test]
fn missing_view_rejects_its_row() {
    let dir = tempfile::tempdir().unwrap();
    synthesize(&spec(1, 4), dir.path()).unwrap();
    std::fs::remove_file(dir.path().join("images/syn00002_1.0.pgm")).unwrap();
    let err = load_dataset(&dir.path().join("manifest.csv")).unwrap_err();
    match &err {
        Error::Rows { rows, .. } => {
            assert_eq!(rows.len(), 1);
            assert_eq!(rows[0].line, 4);
        }
        e => panic!("{e}"),
    }
    assert!(err.to_string().contains("syn00002_1.0.pgm"));
}
