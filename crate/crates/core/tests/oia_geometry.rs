mod common;

use fcformer::data::generate_dataset;
use fcformer::oia::{augment_batch, augment_one, AugmentConfig, Placement, DEFAULT_DELTA_RANGE};
use fcformer::oil::{load_library, make_synthetic_library, Library, Prior};
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{compositing_violation, touches_bottom};

fn subset(lib: &Library, prior: Prior) -> Library {
    Library::from_instances(lib.instances().iter().filter(|i| i.prior == prior).cloned().collect())
}

fn images() -> Vec<RgbImage> {
    let ds = generate_dataset(3, 4, 4, 2).unwrap();
    let mut imgs: Vec<RgbImage> = ds.train.iter().map(|s| s.image.clone()).collect();
    imgs.push(image::imageops::resize(&imgs[0], 64, 128, image::imageops::FilterType::Nearest));
    imgs
}

fn check_compositing(holistic: &RgbImage, occluded: &RgbImage, mask: &image::GrayImage) {
    if let Some((x, y)) = compositing_violation(holistic, occluded, mask) {
        panic!("pixel ({x}, {y}) changed outside the mask or mask is not binary");
    }
}

#[test]
fn thousand_augmentations_stay_in_coverage_bounds() {
    let lib = make_synthetic_library(1, 8);
    let imgs = images();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (mut lo, mut hi) = (1.0f64, 0.0f64);
    for i in 0..1000 {
        let img = &imgs[i % imgs.len()];
        let (occ, mask) = augment_one(img, &lib, DEFAULT_DELTA_RANGE, None, &mut rng).unwrap();
        let f = fcformer::oia::mask_fraction(&mask);
        lo = lo.min(f);
        hi = hi.max(f);
        assert!((0.05..=0.75).contains(&f), "augmentation {i}: fraction {f}");
        check_compositing(img, &occ, &mask);
    }
    assert!(hi - lo > 0.2, "coverage should vary, got [{lo}, {hi}]");
}

#[test]
fn strong_prior_occluders_touch_the_bottom_edge() {
    let lib = subset(&make_synthetic_library(2, 8), Prior::Strong);
    let imgs = images();
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for i in 0..1000 {
        let img = &imgs[i % imgs.len()];
        let delta = (rng.gen_range(0.1..0.7), 0.7);
        let (_, mask) = augment_one(img, &lib, delta, None, &mut rng).unwrap();
        assert!(touches_bottom(&mask), "augmentation {i} leaves the bottom row clear");
    }
}

#[test]
fn weak_prior_occluders_are_not_pinned_to_the_bottom() {
    let lib = subset(&make_synthetic_library(3, 8), Prior::Weak);
    let img = &images()[0];
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let clear = (0..200)
        .filter(|_| {
            let (_, mask) = augment_one(img, &lib, (0.1, 0.2), None, &mut rng).unwrap();
            let bottom = mask.height() - 1;
            (0..mask.width()).all(|x| mask.get_pixel(x, bottom)[0] == 0)
        })
        .count();
    assert!(clear > 100, "only {clear} of 200 weak pastes avoid the bottom row");
}

#[test]
fn batch_pairs_keep_identity_and_holistic_image() {
    let lib = make_synthetic_library(4, 4);
    let batch: Vec<(RgbImage, usize, usize)> = images().into_iter().take(6).enumerate().map(|(i, im)| (im, i, i % 2)).collect();
    let pairs = augment_batch(&batch, &lib, &AugmentConfig::default(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    for ((img, pid, cam), p) in batch.iter().zip(&pairs) {
        assert_eq!((&p.holistic, p.pid, p.cam), (img, *pid, *cam));
        check_compositing(&p.holistic, &p.occluded, &p.occ_mask);
        assert!(p.mask_fraction() > 0.0);
    }
    let again = augment_batch(&batch, &lib, &AugmentConfig::default(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(pairs, again);
}

#[test]
fn fixed_placement_shares_one_position() {
    let lib = subset(&make_synthetic_library(5, 1), Prior::Weak);
    let lib = Library::from_instances(lib.instances()[..1].to_vec());
    let img = RgbImage::new(32, 64);
    let batch = vec![(img.clone(), 0, 0), (img.clone(), 1, 0), (img, 2, 0)];
    let cfg = AugmentConfig {
        delta_range: (0.2, 0.2),
        placement: Placement::Fixed,
    };
    let pairs = augment_batch(&batch, &lib, &cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    assert!(pairs.windows(2).all(|w| w[0].occ_mask == w[1].occ_mask));
    let random = AugmentConfig {
        placement: Placement::Random,
        ..cfg
    };
    let pairs = augment_batch(&batch, &lib, &random, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    assert!(pairs.windows(2).any(|w| w[0].occ_mask != w[1].occ_mask));
}

#[test]
fn invalid_inputs_are_rejected() {
    let lib = make_synthetic_library(7, 2);
    let batch = vec![(RgbImage::new(32, 64), 0, 0)];
    let bad = AugmentConfig {
        delta_range: (0.0, 0.5),
        ..AugmentConfig::default()
    };
    assert!(augment_batch(&batch, &lib, &bad, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    assert!(augment_batch(&[], &lib, &AugmentConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    let empty = Library::default();
    assert!(augment_batch(&batch, &empty, &AugmentConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn library_round_trips_through_manifest() {
    let lib = make_synthetic_library(8, 3);
    let dir = tempfile::tempdir().unwrap();
    let manifest = lib.save(dir.path()).unwrap();
    let back = load_library(&manifest).unwrap();
    assert_eq!(back.instances(), lib.instances());
    assert_eq!(back.count(Prior::Strong), 3);
    assert_eq!(back.count(Prior::Weak), 3);
}
