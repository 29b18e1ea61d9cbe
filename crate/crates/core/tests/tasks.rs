mod common;

use std::path::Path;
use std::sync::Arc;

use common::checks::{check_episode, episode_invariants};
use image::{GrayImage, Luma, Rgb, RgbImage};
use metaforge::tasks::{ClassSource, GlyphConfig, GlyphFamily, ImageFolder, Split, TaskFamily};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn ten_thousand_random_episodes_satisfy_invariants() {
    assert_eq!(episode_invariants(10_000, 11), Ok(10_000));
}

#[test]
fn five_way_one_shot_with_sixteen_queries() {
    let fam = TaskFamily::new(Arc::new(GlyphFamily::new("glyphs", GlyphConfig::default()).unwrap()), [0.6, 0.2, 0.2], 3).unwrap();
    let ep = fam.episode(Split::Train, 5, 1, 16, 0).unwrap();
    check_episode(&ep, 5, 1, 16, &[1, 28, 28]).unwrap();
    assert_eq!((ep.support_x.shape()[0], ep.query_x.shape()[0]), (5, 80));
    let again = fam.episode(Split::Train, 5, 1, 16, 0).unwrap();
    assert!(ep.support_x.bit_eq(&again.support_x) && ep.query_x.bit_eq(&again.query_x));
}

fn pearson(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().map(|&v| v as f64).sum::<f64>() / n, b.iter().map(|&v| v as f64).sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    sab / (saa * sbb).sqrt()
}

#[test]
fn same_class_glyphs_correlate_more_than_different_classes() {
    let fam = GlyphFamily::new("glyphs", GlyphConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut same, mut diff) = (0.0, 0.0);
    let draws = 1000;
    for _ in 0..draws {
        let c = rng.random_range(0..200);
        let mut d = rng.random_range(0..199);
        if d >= c {
            d += 1;
        }
        let a = fam.render(c, rng.random()).unwrap();
        same += pearson(&a, &fam.render(c, rng.random()).unwrap());
        diff += pearson(&a, &fam.render(d, rng.random()).unwrap());
    }
    let (same, diff) = (same / draws as f64, diff / draws as f64);
    assert!(same > diff + 0.2, "same-class {same:.3}, different-class {diff:.3}");
}

fn write_fixture(root: &Path) {
    for (c, name) in ["alpha", "beta", "gamma"].iter().enumerate() {
        let dir = root.join(name);
        std::fs::create_dir_all(&dir).unwrap();
        for i in 0..4u8 {
            let v = 40 * c as u8 + 10 * i;
            if i % 2 == 0 {
                GrayImage::from_pixel(6, 5, Luma([v])).save(dir.join(format!("{i}.png"))).unwrap();
            } else {
                RgbImage::from_pixel(7, 7, Rgb([v, v, v])).save(dir.join(format!("{i}.png"))).unwrap();
            }
        }
        std::fs::write(dir.join("notes.txt"), "ignored").unwrap();
    }
}

#[test]
fn image_folder_fixture_loads_three_classes() {
    let tmp = tempfile::tempdir().unwrap();
    write_fixture(tmp.path());
    for channels in [1, 3] {
        let folder = ImageFolder::load(tmp.path(), channels, 4, 4, 4).unwrap();
        assert_eq!(folder.class_names(), ["alpha", "beta", "gamma"]);
        assert_eq!(folder.input_shape(), vec![channels, 4, 4]);
        for c in 0..3 {
            let imgs = folder.images(c).unwrap();
            assert_eq!(imgs.len(), 4);
            for (i, img) in imgs.iter().enumerate() {
                assert_eq!(img.len(), channels * 16);
                let expected = (40 * c + 10 * i) as f32 / 255.0;
                assert!(img.iter().all(|&p| (p - expected).abs() < 1e-6), "class {c} image {i}");
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(folder.sample(1, 3, &mut rng).unwrap().len(), 3 * channels * 16);
        assert!(folder.sample(1, 5, &mut rng).is_err());
    }
}

#[test]
fn undecodable_files_and_small_classes_are_skipped() {
    let tmp = tempfile::tempdir().unwrap();
    write_fixture(tmp.path());
    std::fs::write(tmp.path().join("beta").join("broken.png"), b"not a png").unwrap();
    std::fs::create_dir(tmp.path().join("tiny")).unwrap();
    GrayImage::new(3, 3).save(tmp.path().join("tiny").join("only.png")).unwrap();
    let folder = ImageFolder::load(tmp.path(), 1, 4, 4, 2).unwrap();
    assert_eq!(folder.class_names(), ["alpha", "beta", "gamma"]);
    assert_eq!(folder.images(1).unwrap().len(), 4);
}

#[test]
fn empty_directory_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(ImageFolder::load(tmp.path(), 1, 4, 4, 1).is_err());
    assert!(ImageFolder::load(&tmp.path().join("missing"), 1, 4, 4, 1).is_err());
}
