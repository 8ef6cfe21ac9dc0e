mod common;

use cdnet_core::cloud::{format_cloud, parse_cloud, CloudFormat, Epoch, LabeledPointCloud};
use cdnet_core::fps::{farthest_point_sample, fps_indices, FpsStart};
use cdnet_core::index::{knn_rows, sq_dist, SpatialIndex};
use cdnet_core::{load_cloud, save_cloud, Error};
use common::{brute_knn, brute_knn3, random_points};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn knn_matches_brute_force_on_random_clouds() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..200 {
        let n = rng.gen_range(1..300);
        let mut pts = random_points(n, 5.0, &mut rng);
        if trial % 5 == 0 {
            // duplicates and grid ties
            for p in pts.iter_mut() {
                *p = [p[0].round(), p[1].round(), 0.0];
            }
        }
        let index = SpatialIndex::from_points("c", pts.clone()).unwrap();
        for _ in 0..5 {
            let q = random_points(1, 6.0, &mut rng)[0];
            let k = rng.gen_range(1..20);
            let got = index.knn(&q, k);
            let want = brute_knn3(&pts, &q, k);
            assert_eq!(got.indices, want, "trial {trial} n={n} k={k}");
            for (&j, &d) in got.indices.iter().zip(&got.sq_dists) {
                assert!((d - sq_dist(&pts[j], &q)).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn knn_rows_matches_brute_force_in_feature_space() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..50 {
        let (n, dim, k) = (rng.gen_range(2..80), rng.gen_range(1..9), rng.gen_range(1..12));
        let rows = common::random_rows(n, dim, &mut rng);
        let flat: Vec<f64> = rows.concat();
        let q = &rows[rng.gen_range(0..n)];
        assert_eq!(knn_rows(&flat, dim, q, k), brute_knn(&rows, q, k));
    }
}

#[test]
fn within_radius_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let pts = random_points(500, 3.0, &mut rng);
    let index = SpatialIndex::from_points("c", pts.clone()).unwrap();
    let q = [0.5, -0.2, 0.1];
    let mut got = index.within(&q, 1.0);
    got.sort_unstable();
    let want: Vec<usize> = (0..pts.len()).filter(|&j| sq_dist(&pts[j], &q) <= 1.0).collect();
    assert_eq!(got, want);
}

#[test]
fn empty_index_is_rejected() {
    assert!(matches!(SpatialIndex::from_points("e", vec![]), Err(Error::EmptyCloud(_))));
}

#[test]
fn fps_is_deterministic_distinct_and_maximin() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let pts = random_points(400, 2.0, &mut rng);
    let cloud = LabeledPointCloud::new("c", Epoch::T1, pts.clone(), None).unwrap();
    let a = farthest_point_sample(&cloud, 50, 3).unwrap();
    assert_eq!(a, farthest_point_sample(&cloud, 50, 3).unwrap());
    let mut sorted = a.clone();
    sorted.sort_unstable();
    sorted.dedup();
    assert_eq!(sorted.len(), 50);
    // every pick is the farthest point from those before it
    for t in 1..a.len() {
        let d = |j: usize| a[..t].iter().map(|&s| sq_dist(&pts[s], &pts[j])).fold(f64::INFINITY, f64::min);
        let best = (0..pts.len()).map(d).fold(0.0, f64::max);
        assert_eq!(d(a[t]), best);
    }
}

#[test]
fn fps_covers_the_cloud_and_handles_edges() {
    let pts: Vec<_> = (0..10).flat_map(|i| (0..10).map(move |j| [i as f64, j as f64, 0.0])).collect();
    let idx = fps_indices(&pts, 4, FpsStart::LowestCoordinate).unwrap();
    let mut corners: Vec<_> = idx.iter().map(|&i| pts[i]).collect();
    corners.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert_eq!(corners, vec![[0.0, 0.0, 0.0], [0.0, 9.0, 0.0], [9.0, 0.0, 0.0], [9.0, 9.0, 0.0]]);
    assert_eq!(fps_indices(&pts, 100, FpsStart::Index(0)).unwrap().len(), 100);
    assert!(fps_indices(&pts, 101, FpsStart::Index(0)).is_err());
    assert!(fps_indices(&[], 1, FpsStart::Index(0)).is_err());
}

#[test]
fn lowest_coordinate_start_ignores_point_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let pts = random_points(120, 1.0, &mut rng);
    let rev: Vec<_> = pts.iter().rev().copied().collect();
    let a: Vec<_> = fps_indices(&pts, 20, FpsStart::LowestCoordinate).unwrap().iter().map(|&i| pts[i]).collect();
    let b: Vec<_> = fps_indices(&rev, 20, FpsStart::LowestCoordinate).unwrap().iter().map(|&i| rev[i]).collect();
    assert_eq!(a, b);
}

#[test]
fn cloud_files_round_trip_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let pts: Vec<_> = random_points(100, 10.0, &mut rng)
        .into_iter()
        .map(|p| p.map(|v| (v * 1e6).round() / 1e6))
        .collect();
    let labels: Vec<u8> = (0..100).map(|i| (i % 7 == 0) as u8).collect();
    let cloud = LabeledPointCloud::new("c", Epoch::T2, pts, Some(labels)).unwrap();
    let path = dir.path().join("c.xyzl");
    save_cloud(&cloud, &path).unwrap();
    let back = load_cloud(&path, CloudFormat::Xyzl, Epoch::T2).unwrap();
    assert_eq!(back.points(), cloud.points());
    assert_eq!(back.labels(), cloud.labels());
    let again = dir.path().join("d.xyzl");
    save_cloud(&back, &again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn cloud_parser_accepts_comments_and_crlf_and_rejects_junk() {
    let c = parse_cloud("# hdr\r\n1 2 3 1\r\n\r\n4 5 6 0\r\n", CloudFormat::Xyzl, "c", Epoch::T2).unwrap();
    assert_eq!(c.points(), &[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
    assert_eq!(c.labels(), Some(&[1u8, 0][..]));
    assert_eq!(format_cloud(&c), "1.000000 2.000000 3.000000 1\n4.000000 5.000000 6.000000 0\n");
    assert!(parse_cloud("1 2\n", CloudFormat::Xyz, "c", Epoch::T1).is_err());
    assert!(parse_cloud("1 2 3 2\n", CloudFormat::Xyzl, "c", Epoch::T1).is_err());
    assert!(parse_cloud("1 2 nan\n", CloudFormat::Xyz, "c", Epoch::T1).is_err());
}
