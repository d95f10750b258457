use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rankmerge::retrieval::{distance, rank_all, rank_queries, DistanceKind};
use rankmerge::store::LabeledEmbeddings;

fn random_set(n: usize, dim: usize, seed: u64) -> LabeledEmbeddings {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f32> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    LabeledEmbeddings::new(dim, v, (0..n as u32).map(|i| i % 3).collect(), (0..n as u64).map(|i| 40 - i).collect())
        .unwrap()
}

fn l2_oracle(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn analytic_distances() {
    let d = distance(&[1.0, 0.0], &[0.0, 1.0], DistanceKind::L2).unwrap();
    assert!((d - std::f64::consts::SQRT_2).abs() < 1e-15);
    assert_eq!(distance(&[1.0, 0.0], &[0.0, 1.0], DistanceKind::Cosine).unwrap(), 1.0);
    assert!(distance(&[0.0, 0.0], &[0.0, 1.0], DistanceKind::Cosine).is_err());
    assert!(distance(&[1.0], &[0.0, 1.0], DistanceKind::L2).is_err());
}

#[test]
fn random_gallery_matches_oracle_sort() {
    let g = random_set(5, 4, 3);
    let q = [0.1f32, -0.2, 0.3, 0.05];
    let mut oracle: Vec<(f32, u64)> = g
        .rows()
        .zip(g.ids())
        .map(|(r, &id)| (l2_oracle(&q, r) as f32, id))
        .collect();
    oracle.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let got = rank_all(&q, &g, DistanceKind::L2).unwrap();
    assert_eq!(got.ids().collect::<Vec<_>>(), oracle.iter().map(|o| o.1).collect::<Vec<_>>());
}

#[test]
fn exact_match_comes_first_and_single_item_gallery() {
    let g = random_set(6, 3, 9);
    let got = rank_all(g.row(4), &g, DistanceKind::Cosine).unwrap();
    assert_eq!(got.entries()[0].gallery_id, g.ids()[4]);
    assert!(got.entries()[0].distance.abs() < 1e-6);
    let one = g.select(&[2]);
    assert_eq!(rank_all(g.row(0), &one, DistanceKind::L2).unwrap().len(), 1);
    assert!(rank_all(g.row(0), &LabeledEmbeddings::empty(3).unwrap(), DistanceKind::L2).unwrap().is_empty());
}

#[test]
fn parallel_batch_equals_sequential() {
    let g = random_set(40, 8, 1);
    let q = random_set(25, 8, 2);
    let par = rank_queries(&q, &g, DistanceKind::Cosine).unwrap();
    for (i, list) in par.iter().enumerate() {
        assert_eq!(list, &rank_all(q.row(i), &g, DistanceKind::Cosine).unwrap());
    }
}

proptest! {
    #[test]
    fn ranking_is_a_sorted_permutation(seed in any::<u64>(), n in 1usize..30) {
        let g = random_set(n, 3, seed);
        let q = [0.3f32, 0.1, -0.7];
        for kind in [DistanceKind::L2, DistanceKind::Cosine] {
            let r = rank_all(&q, &g, kind).unwrap();
            let mut ids: Vec<u64> = r.ids().collect();
            prop_assert!(r.entries().windows(2).all(|w| w[0].distance <= w[1].distance));
            ids.sort_unstable();
            let mut expect = g.ids().to_vec();
            expect.sort_unstable();
            prop_assert_eq!(ids, expect);
            if kind == DistanceKind::Cosine {
                prop_assert!(r.entries().iter().all(|e| (0.0..=2.0).contains(&e.distance)));
            }
        }
    }

    #[test]
    fn distance_is_symmetric_and_l2_is_a_metric(
        a in prop::collection::vec(-10f32..10.0, 4),
        b in prop::collection::vec(-10f32..10.0, 4),
        c in prop::collection::vec(-10f32..10.0, 4),
    ) {
        let ab = distance(&a, &b, DistanceKind::L2).unwrap();
        prop_assert_eq!(ab, distance(&b, &a, DistanceKind::L2).unwrap());
        prop_assert!(ab >= 0.0);
        let bc = distance(&b, &c, DistanceKind::L2).unwrap();
        let ac = distance(&a, &c, DistanceKind::L2).unwrap();
        prop_assert!(ac <= ab + bc + 1e-9);
    }

    #[test]
    fn appending_rows_keeps_relative_order(seed in any::<u64>(), n in 2usize..20, extra in 1usize..10) {
        let full = random_set(n + extra, 3, seed);
        let prefix = full.select(&(0..n).collect::<Vec<_>>());
        let q = [0.5f32, -0.5, 0.25];
        let small: Vec<u64> = rank_all(&q, &prefix, DistanceKind::L2).unwrap().ids().collect();
        let big: Vec<u64> = rank_all(&q, &full, DistanceKind::L2)
            .unwrap()
            .ids()
            .filter(|id| prefix.ids().contains(id))
            .collect();
        prop_assert_eq!(small, big);
    }
}
