use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rankmerge::store::{LabeledEmbeddings, HEADER_BYTES};
use rankmerge::Error;

fn two_label_set() -> LabeledEmbeddings {
    let rows: Vec<[f32; 2]> = (0..10).map(|i| [i as f32, 1.0]).collect();
    let labels = vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1];
    LabeledEmbeddings::from_rows(&rows, labels, (100..110).collect()).unwrap()
}

/// The split procedure spelled out by hand for two labels of five rows:
/// 2.5 quotas each, the tie on the remainder goes to label 0.
fn split_oracle(set: &LabeledEmbeddings, seed: u64) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut queries = Vec::new();
    for (label, take) in [(0u32, 3usize), (1, 2)] {
        let mut rows: Vec<usize> = (0..set.len()).filter(|&i| set.labels()[i] == label).collect();
        rows.shuffle(&mut rng);
        queries.extend(rows[..take].iter().map(|&r| set.ids()[r]));
    }
    queries.sort_unstable();
    queries
}

#[test]
fn balanced_split_example() {
    let set = two_label_set();
    let (q, g) = set.split(0.5, 1).unwrap();
    assert_eq!((q.len(), g.len()), (5, 5));
    assert_eq!(q.ids(), split_oracle(&set, 1).as_slice());
    assert_eq!(q.ids(), &[102, 103, 105, 106, 108]);
    for part in [&q, &g] {
        assert!(part.labels().contains(&0) && part.labels().contains(&1));
    }
    assert!(q.ids().iter().all(|id| !g.ids().contains(id)));
    assert_eq!(set.split(0.5, 1).unwrap(), (q, g));
}

#[test]
fn split_that_empties_a_label_fails() {
    let rows = [[1.0f32], [2.0], [3.0], [4.0]];
    let set = LabeledEmbeddings::from_rows(&rows, vec![0, 0, 1, 1], vec![0, 1, 2, 3]).unwrap();
    assert!(set.split(0.99, 0).is_err());
}

#[test]
fn one_by_one_file_layout() {
    let set = LabeledEmbeddings::from_rows(&[[0.0f32]], vec![0], vec![0]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("one.bmeb");
    set.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(bytes.len(), HEADER_BYTES + 8 + 4 + 4);
    assert_eq!(&bytes[..4], b"BMEB");
    assert_eq!(LabeledEmbeddings::load(&path).unwrap(), set);
}

#[test]
fn load_errors() {
    let set = two_label_set();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.bmeb");
    let good = set.to_bytes().unwrap();

    std::fs::write(&path, &good[..good.len() - 1]).unwrap();
    let err = LabeledEmbeddings::load(&path).unwrap_err();
    assert!(err.to_string().contains("payload size mismatch"), "{err}");

    let mut dup = good.clone();
    let rec = 8 + 4 + 4 * 2;
    dup.copy_within(HEADER_BYTES..HEADER_BYTES + 8, HEADER_BYTES + rec);
    std::fs::write(&path, &dup).unwrap();
    let err = LabeledEmbeddings::load(&path).unwrap_err();
    assert!(err.to_string().contains("duplicate id"), "{err}");

    let mut magic = good;
    magic[0] = b'X';
    std::fs::write(&path, &magic).unwrap();
    assert!(matches!(LabeledEmbeddings::load(&path), Err(Error::BadMagic { .. })));

    assert!(matches!(
        LabeledEmbeddings::load(dir.path().join("missing.bmeb")),
        Err(Error::Io(_))
    ));
}

#[test]
fn nan_never_reaches_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nan.bmeb");
    let set = two_label_set();
    let mut v = set.vectors().to_vec();
    v[3] = f32::NAN;
    let err = set.with_vectors(2, v).and_then(|bad| bad.save(&path)).unwrap_err();
    assert!(matches!(err, Error::NonFinite { row: 1, col: 1 }), "{err}");
    assert!(!path.exists());
}

fn arb_set() -> impl Strategy<Value = LabeledEmbeddings> {
    (1usize..6, 1usize..12).prop_flat_map(|(dim, n)| {
        (
            prop::collection::vec(-1e6f32..1e6, dim * n),
            prop::collection::vec(0u32..5, n),
            prop::collection::hash_set(any::<u64>(), n),
        )
            .prop_map(move |(v, labels, ids)| {
                LabeledEmbeddings::new(dim, v, labels, ids.into_iter().collect()).unwrap()
            })
    })
}

proptest! {
    #[test]
    fn save_load_is_bitwise_identity(set in arb_set()) {
        let bytes = set.to_bytes().unwrap();
        let back = LabeledEmbeddings::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        prop_assert_eq!(back, set);
    }

    #[test]
    fn split_is_a_stratified_partition(seed in any::<u64>(), per_label in 2usize..8, labels in 2u32..5) {
        let n = per_label * labels as usize;
        let rows: Vec<[f32; 1]> = (0..n).map(|i| [i as f32]).collect();
        let set = LabeledEmbeddings::from_rows(&rows, (0..n).map(|i| i as u32 % labels).collect(), (0..n as u64).collect()).unwrap();
        let (q, g) = set.split(0.3, seed).unwrap();
        prop_assert_eq!(q.len() + g.len(), n);
        prop_assert_eq!(q.len(), (0.3 * n as f64).round() as usize);
        for l in 0..labels {
            prop_assert!(g.labels().contains(&l));
        }
        let mut all: Vec<u64> = q.ids().iter().chain(g.ids()).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n as u64).collect::<Vec<_>>());
    }
}
