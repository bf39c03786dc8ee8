//! Synthetic dataset structure, bit-exact serialization and deterministic
//! generation.

mod common;

use common::{induced, isomorphic, small_gen};
use leci_core::exec::{with_threads, Exec};
use leci_core::graph::{DatasetSplit, Graph, SplitName};
use leci_core::jsonl;
use leci_core::metrics::plugin_mi;
use leci_core::motif::{generate, generate_with, make_base, make_motif, BaseKind, FeatureMode, GenConfig, MotifKind, ShiftKind};
use leci_core::rng::Rng;
use proptest::prelude::*;

fn motif_of(g: &Graph) -> MotifKind {
    MotifKind::ALL[g.y]
}

/// Base edges come first, then the motif edges, then the attachment edge.
fn base_edges(g: &Graph) -> Vec<(usize, usize)> {
    let first_motif = g.motif_mask.iter().position(|&m| m).unwrap();
    g.edges[..first_motif].to_vec()
}

#[test]
fn motif_masks_are_isomorphic_to_the_label_motif() {
    let split = generate(&small_gen(1)).unwrap();
    for name in SplitName::ALL {
        for g in split.get(name) {
            let masked: Vec<_> = g.edges.iter().zip(&g.motif_mask).filter(|(_, &m)| m).map(|(&e, _)| e).collect();
            let (n, e) = induced(&masked);
            let (mn, me) = make_motif(motif_of(g));
            assert!(isomorphic(n, &e, mn, &me), "{} graph labelled {:?}", name.as_str(), motif_of(g));
            for other in MotifKind::ALL.into_iter().filter(|&k| k != motif_of(g)) {
                let (on, oe) = make_motif(other);
                assert!(!isomorphic(n, &e, on, &oe));
            }
            assert!(g.is_connected());
            assert!(!g.motif_mask.last().unwrap(), "attachment edge must not be in the motif");
        }
    }
}

#[test]
fn motifs_are_pairwise_non_isomorphic() {
    for a in MotifKind::ALL {
        for b in MotifKind::ALL {
            let (na, ea) = make_motif(a);
            let (nb, eb) = make_motif(b);
            assert_eq!(isomorphic(na, &ea, nb, &eb), a == b);
        }
    }
}

#[test]
fn base_families_have_their_shape() {
    let mut rng = Rng::new(0);
    let deg = |n: usize, e: &[(usize, usize)]| {
        let mut d = vec![0; n];
        for &(u, v) in e {
            d[u] += 1;
            d[v] += 1;
        }
        d
    };
    let wheel = make_base(BaseKind::Wheel, 6, &mut rng).unwrap();
    assert_eq!(wheel.len(), 10);
    assert_eq!(deg(6, &wheel).iter().max(), Some(&5));
    let path = make_base(BaseKind::Path, 5, &mut rng).unwrap();
    assert_eq!(path.len(), 4);
    assert_eq!(deg(5, &path).iter().filter(|&&d| d == 1).count(), 2);
    let star = make_base(BaseKind::Star, 7, &mut rng).unwrap();
    assert_eq!(deg(7, &star)[0], 6);
    let ladder = make_base(BaseKind::Ladder, 8, &mut rng).unwrap();
    assert_eq!(ladder.len(), 3 * 4 - 2);
    let circ = make_base(BaseKind::CircularLadder, 8, &mut rng).unwrap();
    assert!(deg(8, &circ).iter().all(|&d| d == 3));
    let dm = make_base(BaseKind::DorogovtsevMendes, 9, &mut rng).unwrap();
    assert_eq!(dm.len(), 3 + 2 * 6);
    // Small cases agree with brute-force isomorphism against hand-built graphs.
    assert!(isomorphic(4, &make_base(BaseKind::Wheel, 4, &mut rng).unwrap(), 4, &[(0, 1), (0, 2), (0, 3), (1, 2), (2, 3), (1, 3)]));
    assert!(isomorphic(4, &make_base(BaseKind::Tree, 4, &mut rng).unwrap(), 4, &[(0, 1), (0, 2), (1, 3)]));
    assert!(make_base(BaseKind::Ladder, 7, &mut rng).is_err());
}

#[test]
fn ood_splits_use_their_bases() {
    let split = generate(&small_gen(2)).unwrap();
    for g in &split.ood_test {
        let e = base_edges(g);
        let (n, _) = induced(&e);
        let mut d = vec![0; g.num_nodes];
        for &(u, v) in &e {
            d[u] += 1;
            d[v] += 1;
        }
        assert_eq!(e.len(), n - 1, "a path has one edge fewer than nodes");
        assert!(d.iter().all(|&x| x <= 2));
    }
    for g in &split.ood_val {
        let e = base_edges(g);
        let (n, _) = induced(&e);
        let hub = (0..g.num_nodes).filter(|&v| e.iter().filter(|&&(a, b)| a == v || b == v).count() == n - 1).count();
        assert_eq!(hub, 1, "a star has one hub");
    }
}

#[test]
fn training_environments_carry_no_label_information() {
    let split = generate(&small_gen(3)).unwrap();
    let mut table = vec![vec![0u64; 3]; split.num_envs()];
    for g in &split.train {
        table[g.env][g.y] += 1;
    }
    assert_eq!(plugin_mi(&table).unwrap(), 0.0);
    assert_eq!(split.train.len(), 3 * 3 * 4);
}

#[test]
fn desk_scale_split_sizes() {
    let split = generate(&GenConfig::default()).unwrap();
    assert_eq!(split.train.len(), 1800);
    assert_eq!(split.id_val.len(), 300);
    assert_eq!(split.ood_val.len(), 300);
    assert_eq!(split.ood_test.len(), 300);
}

#[test]
fn size_split_buckets_bound_the_base() {
    let cfg = GenConfig {
        shift: ShiftKind::Size,
        ..small_gen(4)
    };
    let split = generate(&cfg).unwrap();
    for g in &split.train {
        let n_base = g.num_nodes - 5;
        let (lo, hi) = cfg.size_buckets[g.env];
        assert!(n_base + 1 >= lo && n_base <= hi + 1, "env {} base {}", g.env, n_base);
    }
    for g in &split.ood_test {
        assert!(g.num_nodes - 5 + 1 >= cfg.oodtest_size_range.0);
    }
}

#[test]
fn env_color_features_follow_the_environment() {
    let cfg = GenConfig {
        feature_mode: FeatureMode::EnvColor,
        ..small_gen(5)
    };
    let split = generate(&cfg).unwrap();
    let d = cfg.feature_dim();
    for g in &split.train {
        assert_eq!(g.feature_dim, d);
        assert_eq!(g.x[1 + g.env], 1.0);
    }
    for g in &split.ood_test {
        assert_eq!(g.x[d - 1], 1.0, "ood graphs carry the unseen colour");
    }
}

fn bytes(split: &DatasetSplit) -> String {
    jsonl::split_to_string(split).unwrap()
}

#[test]
fn generation_is_invariant_to_execution_mode_and_workers() {
    let cfg = small_gen(6);
    let reference = bytes(&generate_with(&cfg, Exec::Sequential).unwrap());
    for threads in [1, 2, 5] {
        let par = with_threads(threads, || generate_with(&cfg, Exec::Parallel).unwrap());
        assert_eq!(bytes(&par), reference, "{threads} workers");
    }
    assert_ne!(bytes(&generate(&small_gen(7)).unwrap()), reference);
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GenConfig {
        feature_mode: FeatureMode::DegreeOnehot,
        noise_edge_prob: 0.3,
        ..small_gen(8)
    };
    let split = generate(&cfg).unwrap();
    jsonl::save_dir(&split, dir.path()).unwrap();
    let back = jsonl::load_dir(dir.path()).unwrap();
    assert_eq!(back, split);
    assert_eq!(bytes(&back), bytes(&split));
}

fn arb_graph() -> impl Strategy<Value = Graph> {
    (2usize..8, 1usize..4).prop_flat_map(|(n, d)| {
        let edges = prop::collection::btree_set((0..n, 0..n).prop_filter("no loops", |(u, v)| u < v), 0..10);
        let x = prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), n * d);
        (Just(n), Just(d), edges, x, 0usize..3, 0usize..4, any::<u64>()).prop_map(|(n, d, edges, x, y, env, bits)| {
            let edges: Vec<_> = edges.into_iter().collect();
            let mask = (0..edges.len()).map(|i| bits >> (i % 64) & 1 == 1).collect();
            Graph::new(n, d, x, edges, y, env, mask).unwrap()
        })
    })
}

proptest! {
    #[test]
    fn arbitrary_graphs_round_trip_exactly(graphs in prop::collection::vec(arb_graph(), 0..6)) {
        let d = graphs.first().map(|g| g.feature_dim);
        let graphs: Vec<Graph> = graphs.into_iter().filter(|g| Some(g.feature_dim) == d).collect();
        let split = DatasetSplit { train: graphs, ..DatasetSplit::default() };
        let text = bytes(&split);
        let back = jsonl::from_str(&text).unwrap();
        prop_assert_eq!(&back, &split);
        prop_assert_eq!(bytes(&back), text);
    }

    #[test]
    fn plugin_mi_is_nonnegative_and_symmetric(cells in prop::collection::vec(0u64..20, 6)) {
        prop_assume!(cells.iter().any(|&c| c > 0));
        let t: Vec<Vec<u64>> = cells.chunks(3).map(|r| r.to_vec()).collect();
        let tt: Vec<Vec<u64>> = (0..3).map(|j| t.iter().map(|r| r[j]).collect()).collect();
        let a = plugin_mi(&t).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - plugin_mi(&tt).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn plugin_mi_of_outer_products_is_exactly_zero(r in prop::collection::vec(1u64..9, 2..4), c in prop::collection::vec(1u64..9, 2..4)) {
        let t: Vec<Vec<u64>> = r.iter().map(|&a| c.iter().map(|&b| a * b).collect()).collect();
        prop_assert_eq!(plugin_mi(&t).unwrap(), 0.0);
    }
}
