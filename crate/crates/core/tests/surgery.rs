mod common;

use std::collections::BTreeSet;

use blockprune::graph::{prunable_blocks, prune_blocks, validate_graph, ArchDesc, BlockGraph, BlockKind};
use blockprune::metrics::{block_flops, count_flops, layer_flops};
use blockprune::network::Network;
use blockprune::Error;
use common::*;
use proptest::prelude::*;

fn dense_graph() -> BlockGraph {
    let arch = ArchDesc::Dense {
        units_per_stage: vec![3, 2],
        growth: 4,
        stem_channels: 6,
    };
    BlockGraph::from_arch(&arch, meta(5, 3, 8)).unwrap()
}

fn residual_graph() -> BlockGraph {
    BlockGraph::from_arch(&ArchDesc::Residual { depth: 14, width: 4 }, meta(5, 3, 8)).unwrap()
}

#[test]
fn unmasked_oracle_matches_the_network() {
    let g = dense_graph();
    let w = random_weights(&g, 1);
    let x = random_input(3, [3, 8, 8], 2);
    let net = Network::new(&g, &w).unwrap();
    let dev = max_dev(&net.forward(&x).unwrap(), &masked_dense_forward(&g, &w, &x, &BTreeSet::new()));
    assert!(dev <= 1e-5, "{dev}");
}

#[test]
fn every_dense_subset_matches_the_masked_oracle() {
    let g = dense_graph();
    let w = random_weights(&g, 3);
    let x = random_input(3, [3, 8, 8], 4);
    let prunable: Vec<usize> = prunable_blocks(&g).into_iter().collect();
    assert_eq!(prunable.len(), 5);
    for mask in 0u32..(1 << prunable.len()) {
        let set: BTreeSet<usize> = prunable
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, &id)| id)
            .collect();
        let pruned = prune_blocks(&g, &w, &set).unwrap();
        let v = validate_graph(&pruned.graph);
        assert!(v.is_empty(), "{set:?} {v:?}");
        let net = Network::new(&pruned.graph, &pruned.weights).unwrap();
        let dev = max_dev(&net.forward(&x).unwrap(), &masked_dense_forward(&g, &w, &x, &set));
        assert!(dev <= 1e-5, "{set:?}: {dev}");
    }
}

#[test]
fn empty_prune_set_is_identity() {
    for g in [dense_graph(), residual_graph()] {
        let w = random_weights(&g, 5);
        let pruned = prune_blocks(&g, &w, &BTreeSet::new()).unwrap();
        assert_eq!(pruned.graph, g);
        assert_eq!(pruned.weights.to_bytes(), w.to_bytes());
        let x = random_input(2, [3, 8, 8], 6);
        let a = Network::new(&g, &w).unwrap().forward(&x).unwrap();
        let b = Network::new(&pruned.graph, &pruned.weights).unwrap().forward(&x).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn zero_residual_branch_prunes_without_change() {
    let g = residual_graph();
    let mut w = random_weights(&g, 7);
    // s1.u1 is an identity-shortcut unit; with a zero branch it outputs relu(x) = x.
    let target = g.blocks.iter().find(|b| b.name == "s1.u1").unwrap().id;
    for suffix in ["bn2.weight", "bn2.bias"] {
        w.get_mut(&format!("s1.u1.{suffix}")).unwrap().data_mut().fill(0.0);
    }
    let pruned = prune_blocks(&g, &w, &BTreeSet::from([target])).unwrap();
    let full = Network::new(&g, &w).unwrap();
    let small = Network::new(&pruned.graph, &pruned.weights).unwrap();
    for seed in 0..10 {
        let x = random_input(2, [3, 8, 8], 100 + seed);
        let dev = full.forward(&x).unwrap().max_abs_diff(&small.forward(&x).unwrap());
        assert!(dev <= 1e-5, "{dev}");
    }
}

#[test]
fn surviving_residual_tensors_are_copied_bit_for_bit() {
    let g = residual_graph();
    let w = random_weights(&g, 8);
    let set: BTreeSet<usize> = prunable_blocks(&g).into_iter().step_by(2).collect();
    let pruned = prune_blocks(&g, &w, &set).unwrap();
    for (name, t) in pruned.weights.iter() {
        assert_eq!(t, w.get(name).unwrap(), "{name}");
    }
    let removed: usize = set.iter().map(|&id| g.blocks[id].param_names.len()).sum();
    assert_eq!(pruned.weights.len() + removed, w.len());
    for (old, new) in &pruned.id_map {
        assert_eq!(g.blocks[*old].name, pruned.graph.blocks[*new].name);
    }
}

#[test]
fn projection_and_structural_blocks_are_refused() {
    let g = residual_graph();
    let w = random_weights(&g, 9);
    let projection = g.blocks.iter().find(|b| b.name == "s2.u0").unwrap().id;
    assert!(matches!(prune_blocks(&g, &w, &BTreeSet::from([projection])), Err(Error::NotPrunable(_))));
    assert!(matches!(prune_blocks(&g, &w, &BTreeSet::from([0])), Err(Error::NotPrunable(0))));
    assert!(matches!(
        prune_blocks(&g, &w, &BTreeSet::from([g.len()])),
        Err(Error::BlockOutOfRange { .. })
    ));
}

#[test]
fn chain_removal_keeps_the_rest_intact() {
    let g = BlockGraph::from_arch(&ArchDesc::Chain { units: 4, width: 6 }, meta(3, 3, 8)).unwrap();
    let w = random_weights(&g, 10);
    let pruned = prune_blocks(&g, &w, &BTreeSet::from([2, 3])).unwrap();
    assert_eq!(pruned.graph.unit_count(), 2);
    assert!(validate_graph(&pruned.graph).is_empty());
    let x = random_input(2, [3, 8, 8], 11);
    Network::new(&pruned.graph, &pruned.weights).unwrap().forward(&x).unwrap();
}

#[test]
fn hand_counted_conv_flops() {
    let g = BlockGraph::from_arch(&ArchDesc::Chain { units: 1, width: 16 }, meta(10, 16, 32)).unwrap();
    assert_eq!(block_flops(&g, 1), 4_718_592);
}

fn arch_strategy() -> impl Strategy<Value = ArchDesc> {
    prop_oneof![
        (1usize..5, 2usize..6).prop_map(|(units, width)| ArchDesc::Chain { units, width }),
        (1usize..3, 2usize..5).prop_map(|(n, width)| ArchDesc::Residual { depth: 6 * n + 2, width }),
        (prop::collection::vec(0usize..4, 1..4), 1usize..5, 1usize..6).prop_map(|(units_per_stage, growth, stem_channels)| {
            ArchDesc::Dense {
                units_per_stage,
                growth,
                stem_channels,
            }
        }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    /// Random prune sets on random graphs: the result validates, holds
    /// exactly the declared tensors, runs, and its FLOPs agree with a count
    /// taken from the weight shapes alone.
    #[test]
    fn random_surgery_is_consistent(arch in arch_strategy(), mask in any::<u64>(), seed in 0u64..1000) {
        let g = BlockGraph::from_arch(&arch, meta(4, 3, 8)).unwrap();
        let w = random_weights(&g, seed);
        let set: BTreeSet<usize> = prunable_blocks(&g)
            .into_iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << (i % 64)) != 0)
            .map(|(_, id)| id)
            .collect();
        let pruned = prune_blocks(&g, &w, &set).unwrap();
        prop_assert!(validate_graph(&pruned.graph).is_empty());
        pruned.graph.check_weights(&pruned.weights).unwrap();
        prop_assert_eq!(pruned.graph.len(), g.len() - set.len());
        prop_assert_eq!(count_flops(&pruned.graph), flops_from_weights(&pruned.graph, &pruned.weights));
        prop_assert_eq!(count_flops(&g), layer_flops(&g).iter().map(|l| l.flops).sum::<u64>());
        prop_assert!(set.is_empty() || count_flops(&pruned.graph) < count_flops(&g));
        let x = random_input(2, [3, 8, 8], seed);
        let logits = Network::new(&pruned.graph, &pruned.weights).unwrap().forward(&x).unwrap();
        prop_assert!(logits.all_finite());
        if matches!(arch, ArchDesc::Dense { .. }) {
            let dev = max_dev(&logits, &masked_dense_forward(&g, &w, &x, &set));
            prop_assert!(dev <= 1e-5, "dev {}", dev);
        }
    }

    /// Pruning A and then the survivors of B equals pruning A ∪ B at once.
    #[test]
    fn surgery_composes(arch in arch_strategy(), mask_a in any::<u64>(), mask_b in any::<u64>(), seed in 0u64..1000) {
        let g = BlockGraph::from_arch(&arch, meta(4, 3, 8)).unwrap();
        let w = random_weights(&g, seed);
        let prunable: Vec<usize> = prunable_blocks(&g).into_iter().collect();
        let pick = |mask: u64| -> BTreeSet<usize> {
            prunable.iter().enumerate().filter(|(i, _)| mask & (1 << (i % 64)) != 0).map(|(_, &id)| id).collect()
        };
        let a = pick(mask_a);
        let b: BTreeSet<usize> = pick(mask_b).difference(&a).copied().collect();
        let first = prune_blocks(&g, &w, &a).unwrap();
        let b_mapped: BTreeSet<usize> = b.iter().map(|id| first.id_map[id]).collect();
        let two_step = prune_blocks(&first.graph, &first.weights, &b_mapped).unwrap();
        let union: BTreeSet<usize> = a.union(&b).copied().collect();
        let one_step = prune_blocks(&g, &w, &union).unwrap();
        prop_assert_eq!(&two_step.graph, &one_step.graph);
        prop_assert_eq!(two_step.weights.to_bytes(), one_step.weights.to_bytes());
    }
}

#[test]
fn dense_removal_slices_only_direct_consumers() {
    let g = dense_graph();
    let w = random_weights(&g, 12);
    let first = g.blocks.iter().find(|b| b.kind == BlockKind::DenseUnit).unwrap().id;
    let pruned = prune_blocks(&g, &w, &BTreeSet::from([first])).unwrap();
    // The second stage reads the transition output, whose width is unchanged.
    for b in pruned.graph.blocks.iter().filter(|b| b.name.starts_with("d2")) {
        let orig = g.blocks.iter().find(|o| o.name == b.name).unwrap();
        assert_eq!(b.in_shape, orig.in_shape);
        for name in &b.param_names {
            assert_eq!(pruned.weights.get(name).unwrap(), w.get(name).unwrap());
        }
    }
    let t1 = pruned.graph.blocks.iter().find(|b| b.name == "t1").unwrap();
    assert_eq!(t1.in_shape[0], 6 + 2 * 4);
    assert_eq!(t1.out_shape[0], 6 + 3 * 4);
}
