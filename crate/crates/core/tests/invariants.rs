mod common;

use hiercon::data::{read_dataset, write_dataset, DataFormat, Dataset, EmbeddingRecord, Split};
use hiercon::eval::{balanced_accuracy, knn_predict, Metric, ReferenceSet, Source};
use hiercon::linalg::{l2_norm, Matrix};
use hiercon::losses::{himulcon, himulcone, supcon, LevelInput, LossConfig, LossVariant};
use hiercon::network::{forward, init_params, read_checkpoint, write_checkpoint, ArchConfig};
use hiercon::taxonomy::{positive_mask, LabelTriple, Level};
use proptest::prelude::*;

const TREE: [(&str, &str, &str); 6] = [
    ("i0", "s0", "t0"),
    ("i1", "s0", "t0"),
    ("i2", "s1", "t0"),
    ("i3", "s2", "t1"),
    ("i4", "s2", "t1"),
    ("i5", "s3", "t1"),
];

fn triple(k: usize) -> LabelTriple {
    let (i, s, t) = TREE[k];
    LabelTriple::new(i, s, t).unwrap()
}

fn unit_matrix(rows: &[Vec<f64>]) -> Matrix {
    let normed: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let n = l2_norm(r).max(1e-9);
            r.iter().map(|x| x / n).collect()
        })
        .collect();
    Matrix::from_rows(&normed).unwrap()
}

/// Batch of 3..=8 unit rows in 3 dimensions with labels that include a repeat.
fn batch() -> impl Strategy<Value = (Matrix, Vec<LabelTriple>)> {
    (3usize..=8).prop_flat_map(|b| {
        (
            prop::collection::vec(prop::collection::vec(0.1f64..1.0, 3).prop_map(|mut v| {
                v[0] -= 0.55;
                v
            }), b),
            prop::collection::vec(0usize..6, b - 1),
        )
            .prop_map(|(rows, mut ids)| {
                ids.push(ids[0]);
                (unit_matrix(&rows), ids.into_iter().map(triple).collect())
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn supcon_permutation_invariant((z, labels) in batch(), seed in any::<u64>(), tau in 0.1f64..1.0) {
        let ids: Vec<&str> = labels.iter().map(|l| l.individual.as_str()).collect();
        let base = supcon(&z, &ids, tau).unwrap().total;
        let mut order: Vec<usize> = (0..ids.len()).collect();
        let mut state = seed;
        for i in (1..order.len()).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(i, (state >> 33) as usize % (i + 1));
        }
        let permuted_z = z.select_rows(&order);
        let permuted_ids: Vec<&str> = order.iter().map(|&i| ids[i]).collect();
        let again = supcon(&permuted_z, &permuted_ids, tau).unwrap().total;
        prop_assert!((base - again).abs() <= 1e-12 * base.abs().max(1.0));
    }

    #[test]
    fn losses_nonnegative_and_constrained_dominates((z, labels) in batch(), tau in 0.1f64..1.0, l in prop::array::uniform3(0.0f64..5.0)) {
        let inputs: Vec<LevelInput> = Level::ALL.iter().map(|&level| LevelInput { level, z: &z }).collect();
        let cfg = LossConfig { variant: LossVariant::HiMulCon, tau, lambdas: l };
        let hc = himulcon(&inputs, &labels, &cfg).unwrap();
        let hce = himulcone(&inputs, &labels, &cfg).unwrap();
        prop_assert!(hc.total >= 0.0);
        prop_assert!(hce.total >= hc.total - 1e-12);
        for level in &hce.per_level {
            prop_assert!(level.loss >= 0.0);
            prop_assert_eq!(level.clamp_pattern.len(), level.positive_pairs);
        }
    }

    #[test]
    fn masks_nest_and_are_symmetric(ids in prop::collection::vec(0usize..6, 2..12)) {
        let labels: Vec<LabelTriple> = ids.into_iter().map(triple).collect();
        let masks: Vec<_> = Level::ALL.iter().map(|&l| positive_mask(&labels, l)).collect();
        let n = labels.len();
        for i in 0..n {
            prop_assert!(!masks.iter().any(|m| m.get(i, i)));
            for j in 0..n {
                for m in &masks {
                    prop_assert_eq!(m.get(i, j), m.get(j, i));
                }
                if masks[0].get(i, j) { prop_assert!(masks[1].get(i, j)); }
                if masks[1].get(i, j) { prop_assert!(masks[2].get(i, j)); }
            }
        }
    }

    #[test]
    fn balanced_accuracy_permutation_invariant(pairs in prop::collection::vec((0u8..4, 0u8..4), 1..40), rot in 0usize..40) {
        let preds: Vec<u8> = pairs.iter().map(|p| p.0).collect();
        let truths: Vec<u8> = pairs.iter().map(|p| p.1).collect();
        let a = balanced_accuracy(&preds, &truths).unwrap();
        let k = rot % pairs.len();
        let mut p2 = preds.clone();
        let mut t2 = truths.clone();
        p2.rotate_left(k);
        t2.rotate_left(k);
        p2.reverse();
        t2.reverse();
        let b = balanced_accuracy(&p2, &t2).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn one_nn_is_always_a_reference_path(
        refs in prop::collection::vec((prop::collection::vec(-1.0f64..1.0, 2), 0usize..6), 1..20),
        query in prop::collection::vec(-1.0f64..1.0, 2),
    ) {
        for metric in [Metric::Cosine, Metric::Euclidean] {
            let mut reference = ReferenceSet::new(metric);
            for (i, (v, id)) in refs.iter().enumerate() {
                reference.push(&format!("r{i}"), v, triple(*id), Source::Train);
            }
            let p = knn_predict(&reference, &query, None, 1, false).unwrap();
            prop_assert!(refs.iter().any(|(_, id)| triple(*id) == p));
        }
    }

    #[test]
    fn checkpoint_round_trip_and_unit_heads(
        dims in prop::array::uniform5(1usize..6),
        seed in any::<u64>(),
        identity in any::<bool>(),
    ) {
        let arch = ArchConfig {
            input_dim: dims[0],
            adapter_hidden: dims[1],
            shared_dim: dims[2],
            projector_hidden: dims[3],
            projector_out: dims[4],
            activation: if identity { hiercon::network::Activation::Identity } else { hiercon::network::Activation::Relu },
            heads: Level::ALL.to_vec(),
        };
        let params = init_params(&arch, seed).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&params, &mut buf).unwrap();
        let (back, back_arch) = read_checkpoint(buf.as_slice()).unwrap();
        prop_assert_eq!(&back_arch, &arch);
        let bits = |p: &hiercon::network::EncoderParams| -> Vec<u64> {
            p.tensors().iter().flat_map(|t| t.iter().map(|x| x.to_bits())).collect()
        };
        prop_assert_eq!(bits(&back), bits(&params));

        let x = Matrix::from_vec(3, dims[0], (0..3 * dims[0]).map(|i| (i as f64 * 0.37).sin() + 0.5).collect());
        let out = forward(&params, &x).unwrap();
        for (_, z) in &out.projections {
            for r in z.row_iter() {
                let n = l2_norm(r);
                prop_assert!(n == 0.0 || (n - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn dataset_files_round_trip(values in prop::collection::vec(prop::num::f64::NORMAL, 6)) {
        let records: Vec<EmbeddingRecord> = (0..3)
            .map(|i| EmbeddingRecord {
                key: format!("k{i}"),
                features: values[2 * i..2 * i + 2].to_vec(),
                label: triple(i % 2),
                split: if i == 2 { Split::Val } else { Split::Train },
            })
            .collect();
        let ds = Dataset::new(records).unwrap();
        for format in [DataFormat::Csv, DataFormat::JsonLines] {
            let mut buf = Vec::new();
            write_dataset(&ds, &mut buf, format).unwrap();
            let back = read_dataset(buf.as_slice(), format).unwrap();
            prop_assert_eq!(back.records(), ds.records());
        }
    }
}

#[test]
fn supcon_matches_oracle_on_non_string_labels() {
    let mut rng = common::rng(77);
    let z = common::unit_rows(&mut rng, 6, 3);
    let labels = [3u32, 3, 9, 9, 9, 1];
    let got = supcon(&z, &labels, 0.2).unwrap().total;
    let want = common::supcon_oracle(&z, &labels, 0.2);
    assert!((got - want).abs() < 1e-10);
}
