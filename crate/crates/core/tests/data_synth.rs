use proptest::prelude::*;
use tci_core::data::morphology::{dilate, erode, make_boundary};
use tci_core::data::{generate, io, split, Dataset, Image, Mask, Split, SynthConfig};
use tci_core::Error;

/// Independent cross-element morphology: dilation then erosion, by neighbour offsets.
fn brute_boundary(m: &Mask) -> Mask {
    let (h, w) = (m.height as i64, m.width as i64);
    let at = |i: i64, j: i64| i >= 0 && j >= 0 && i < h && j < w && m.data[(i * w + j) as usize];
    let offsets = [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)];
    Mask::from_fn(m.height, m.width, |i, j| {
        let (i, j) = (i as i64, j as i64);
        let dil = offsets.iter().any(|&(a, b)| at(i + a, j + b));
        let ero = offsets.iter().all(|&(a, b)| at(i + a, j + b));
        dil && !ero
    })
}

#[test]
fn target_areas_stay_in_range_over_100_seeds() {
    let cfg = SynthConfig::default();
    let mut seen = 0;
    for seed in 0..100 {
        let s = generate(&cfg, seed).unwrap();
        assert!((cfg.min_targets..=cfg.max_targets).contains(&s.meta.targets.len()));
        for t in &s.meta.targets {
            assert!((cfg.min_area..=cfg.max_area).contains(&t.area), "seed {seed}: area {}", t.area);
        }
        // targets are separated, so the mask is their disjoint union
        assert_eq!(s.mask.count(), s.meta.targets.iter().map(|t| t.area).sum::<usize>());
        assert!(s.image.values.iter().all(|v| (0.0..=1.0).contains(v)));
        seen += s.meta.targets.len();
    }
    assert!(seen >= 100);
}

#[test]
fn generation_is_deterministic() {
    let cfg = SynthConfig::default();
    let a = generate(&cfg, 42).unwrap();
    let b = generate(&cfg, 42).unwrap();
    assert_eq!(a, b);
    assert!(a.image.values.iter().zip(&b.image.values).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_ne!(a.image, generate(&cfg, 43).unwrap().image);
}

#[test]
fn zero_targets_give_empty_labels() {
    let cfg = SynthConfig { min_targets: 0, max_targets: 0, ..Default::default() };
    for seed in 0..5 {
        let s = generate(&cfg, seed).unwrap();
        assert_eq!((s.mask.count(), s.boundary.count()), (0, 0));
    }
}

#[test]
fn generated_boundaries_satisfy_the_label_invariants() {
    let cfg = SynthConfig::default();
    for seed in 0..30 {
        let s = generate(&cfg, seed).unwrap();
        let (d, e) = (dilate(&s.mask), erode(&s.mask));
        for k in 0..s.mask.data.len() {
            if s.boundary.data[k] {
                assert!(d.data[k] && !e.data[k]);
            }
        }
        assert_eq!(s.boundary, brute_boundary(&s.mask));
    }
}

#[test]
fn single_pixel_boundary_is_a_cross() {
    let mut m = Mask::empty(7, 7);
    m.set(3, 3, true);
    let b = make_boundary(&m);
    assert_eq!(b.count(), 5);
    for (i, j) in [(3, 3), (2, 3), (4, 3), (3, 2), (3, 4)] {
        assert!(b.get(i, j));
    }
}

#[test]
fn square_boundary_matches_brute_force() {
    let m = Mask::from_fn(10, 10, |i, j| (3..7).contains(&i) && (3..7).contains(&j));
    let b = make_boundary(&m);
    assert_eq!(b, brute_boundary(&m));
    // 16 outer cross neighbours + 12 pixels of the square's own rim
    assert_eq!(b.count(), 28);
    assert!(!b.get(4, 4) && !b.get(5, 5) && b.get(3, 3) && b.get(2, 4) && !b.get(2, 2));
}

#[test]
fn boundary_at_the_image_edge() {
    // pixels outside the image count as unset, so a full mask has a rim boundary
    let b = make_boundary(&Mask::from_fn(4, 5, |_, _| true));
    assert_eq!(b.count(), 4 * 5 - 2 * 3);
}

#[test]
fn empty_mask_has_empty_boundary() {
    assert_eq!(make_boundary(&Mask::empty(5, 5)).count(), 0);
}

#[test]
fn image_and_mask_round_trip_for_both_formats() {
    let dir = tempfile::tempdir().unwrap();
    let values: Vec<f64> = (0..=255).map(|v| f64::from(v) / 255.0).collect();
    let img = Image { height: 16, width: 16, values };
    let mask = Mask::from_fn(16, 16, |i, j| (i * 7 + j * 3) % 5 == 0);
    for ext in ["pgm", "png"] {
        let ip = dir.path().join(format!("i.{ext}"));
        io::save_image(&ip, &img).unwrap();
        assert_eq!(io::load_image(&ip).unwrap(), img);
        let mp = dir.path().join(format!("m.{ext}"));
        io::save_mask(&mp, &mask).unwrap();
        assert_eq!(io::load_mask(&mp).unwrap(), mask);
    }
    assert!(matches!(io::save_mask(&dir.path().join("m.bmp"), &mask), Err(Error::Format { .. })));
}

#[test]
fn split_is_80_20_and_disjoint() {
    let (train, test) = split(200, 0.8, 5).unwrap();
    assert_eq!((train.len(), test.len()), (160, 40));
    let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..200).collect::<Vec<_>>());
    assert_eq!(split(200, 0.8, 5).unwrap(), (train, test));
    assert!(split(10, 1.5, 0).is_err());
}

#[test]
fn dataset_save_load_round_trip() {
    let cfg = SynthConfig { height: 32, width: 32, max_targets: 1, max_area: 30, ..Default::default() };
    let ds = Dataset::synthesize(&cfg, 10, 9, 0.8).unwrap();
    assert_eq!((ds.subset(Split::Train).len(), ds.subset(Split::Test).len()), (8, 2));
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path(), &cfg).unwrap();
    for sub in ["images/00000.pgm", "masks/00000.png", "boundaries/00009.png", "manifest.csv", "synth.toml"] {
        assert!(dir.path().join(sub).exists(), "{sub}");
    }

    let files = Dataset::load(dir.path(), false).unwrap();
    assert_eq!(files.manifest, ds.manifest);
    for (a, b) in files.samples.iter().zip(&ds.samples) {
        assert_eq!((&a.mask, &a.boundary), (&b.mask, &b.boundary));
        let err = a.image.values.iter().zip(&b.image.values).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(err <= 0.5 / 255.0 + 1e-12);
    }
    let regen = Dataset::load(dir.path(), true).unwrap();
    assert_eq!(regen.samples, ds.samples);
}

#[test]
fn infeasible_configs_are_rejected() {
    let crowded = SynthConfig { height: 16, width: 16, max_targets: 5, ..Default::default() };
    assert!(matches!(generate(&crowded, 0), Err(Error::Config(_))));
    let invisible = SynthConfig { min_contrast: 0.02, noise_sigma: 0.03, ..Default::default() };
    assert!(matches!(generate(&invisible, 0), Err(Error::Config(_))));
}

proptest! {
    #[test]
    fn random_mask_boundaries_are_consistent(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
        let mut x = seed | 1;
        let m = Mask::from_fn(h, w, |_, _| {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            x % 3 == 0
        });
        let b = make_boundary(&m);
        prop_assert_eq!(&b, &brute_boundary(&m));
        let (d, e) = (dilate(&m), erode(&m));
        for k in 0..m.data.len() {
            prop_assert!(!b.data[k] || (d.data[k] && !e.data[k]));
        }
    }
}
