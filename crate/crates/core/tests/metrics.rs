use fcformer::eval::{cmc_map, GalleryIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod common;

use common::{random_index, random_retrieval_case, retrieval_reference};

#[test]
fn cmc_map_matches_reference_on_random_configurations() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for config in 0..50 {
        let (query, gallery) = random_retrieval_case(&mut rng, config);
        let (cmc, map, excluded) = retrieval_reference(&query, &gallery);
        match cmc_map(&query, &gallery) {
            Ok(r) => {
                assert_eq!(r.excluded_queries, excluded, "config {config}");
                assert!((r.map - map).abs() < 1e-9, "config {config}: {} vs {map}", r.map);
                assert_eq!(r.cmc.len(), cmc.len());
                for (a, b) in r.cmc.iter().zip(&cmc) {
                    assert!((a - b).abs() < 1e-9, "config {config}");
                }
            }
            Err(_) => assert_eq!(excluded, query.len(), "config {config}"),
        }
    }
}

#[test]
fn second_place_match_has_half_precision() {
    let gallery = GalleryIndex::new(2, vec![1.0, 0.0, 0.6, 0.8, 0.0, 1.0], vec![0, 1, 2], vec![1, 1, 1]).unwrap();
    let query = GalleryIndex::new(2, vec![0.95, 0.3], vec![1], vec![0]).unwrap();
    let r = cmc_map(&query, &gallery).unwrap();
    assert_eq!(r.map, 0.5);
    assert_eq!(r.rank(1), 0.0);
    assert_eq!(r.rank(5), 1.0);
}

#[test]
fn cmc_is_monotone_and_ends_at_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let gallery = random_index(&mut rng, 30, 4, 3, 1);
    let query = random_index(&mut rng, 10, 4, 3, 2);
    let r = cmc_map(&query, &gallery).unwrap();
    assert!(r.cmc.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(*r.cmc.last().unwrap(), 1.0);
    assert!(r.map > 0.0 && r.map <= 1.0);
}

#[test]
fn every_query_excluded_is_an_error() {
    let gallery = GalleryIndex::new(1, vec![1.0], vec![0], vec![0]).unwrap();
    let query = GalleryIndex::new(1, vec![1.0], vec![0], vec![0]).unwrap();
    assert!(cmc_map(&query, &gallery).is_err());
}

#[test]
fn report_json_uses_table_keys() {
    let gallery = GalleryIndex::new(1, vec![1.0, -1.0], vec![0, 1], vec![1, 1]).unwrap();
    let query = GalleryIndex::new(1, vec![1.0], vec![0], vec![0]).unwrap();
    let json = cmc_map(&query, &gallery).unwrap().to_json();
    assert_eq!(json["mAP"], 1.0);
    assert_eq!(json["cmc"]["1"], 1.0);
}

#[test]
fn gallery_index_round_trips_through_disk() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let index = random_index(&mut rng, 7, 5, 3, 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gallery.fcf");
    index.save(&path).unwrap();
    assert_eq!(GalleryIndex::load(&path).unwrap(), index);
}
