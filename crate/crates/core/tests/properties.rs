use proptest::prelude::*;

use slate_embed::data::{generate_synthetic, PlantedConfig, Split, SyntheticKind};
use slate_embed::eval::{rank_of, reciprocal_rank, single_item_ndcg};
use slate_embed::models::ModelVariant;
use slate_embed::optim::{sweep, SweepGrid, TrainConfig};
use slate_embed::slate::{embed_tree, EmbeddingTable, FeatureSpec, Leaf, Schema, SlateNode};
use slate_embed::{evaluate, Checkpoint, Metric};

fn logits_and_click() -> impl Strategy<Value = (Vec<f64>, usize)> {
    prop::collection::vec(-5.0f64..5.0, 1..12).prop_flat_map(|z| {
        let n = z.len();
        (Just(z), 0..n)
    })
}

proptest! {
    #[test]
    fn rank_metrics_ignore_monotone_transforms((z, c) in logits_and_click(), scale in 0.1f64..10.0, shift in -20.0f64..20.0) {
        let t: Vec<f64> = z.iter().map(|x| (scale * x + shift).tanh() * 3.0 + x.exp()).collect();
        prop_assert_eq!(rank_of(&z, c), rank_of(&t, c));
        prop_assert_eq!(reciprocal_rank(&z, c), reciprocal_rank(&t, c));
        prop_assert_eq!(single_item_ndcg(&z, c), single_item_ndcg(&t, c));
    }

    #[test]
    fn rank_metrics_lie_in_unit_interval((z, c) in logits_and_click()) {
        let rr = reciprocal_rank(&z, c);
        let nd = single_item_ndcg(&z, c);
        prop_assert!(rr > 0.0 && rr <= 1.0);
        prop_assert!(nd > 0.0 && nd <= 1.0);
        prop_assert!(nd >= rr);
    }

    #[test]
    fn ties_rank_by_original_index(n in 2usize..10, c in 0usize..10) {
        let c = c % n;
        prop_assert_eq!(rank_of(&vec![1.0; n], c), c + 1);
    }

    #[test]
    fn nested_slates_are_order_invariant(ids in prop::collection::vec((0usize..6, -2.0f64..2.0), 2..7), seed in 0u64..1000) {
        let schema = Schema::new(vec![FeatureSpec::categorical("item", 6), FeatureSpec::numerical("price")]).unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let table = EmbeddingTable::gaussian(schema.clone(), 4, 0.7, &mut rng).unwrap();
        let (item, price) = (schema.id("item").unwrap(), schema.id("price").unwrap());
        let slot = |&(i, p): &(usize, f64)| SlateNode::internal(vec![
            SlateNode::leaf(Leaf::categorical(item, i)),
            SlateNode::leaf(Leaf::numerical(price, p)),
        ]);
        let forward = SlateNode::internal(ids.iter().map(slot).collect());
        let reversed = SlateNode::internal(ids.iter().rev().map(|s| {
            let SlateNode::Internal(c) = slot(s) else { unreachable!() };
            SlateNode::internal(c.into_iter().rev().collect())
        }).collect());
        let a = embed_tree(&table, &forward).unwrap();
        let b = embed_tree(&table, &reversed).unwrap();
        prop_assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn planted_regression_fits_training_data() {
    let config = PlantedConfig {
        records: 2000,
        users: 50,
        movies: 100,
        ..PlantedConfig::default()
    };
    let (data, planted) = generate_synthetic(SyntheticKind::Regression, &config, 8).unwrap();
    let ckpt = Checkpoint::new(planted, data.schema().clone(), None);
    assert_eq!(evaluate(&ckpt.model, data.batch(Split::Train), Metric::Mse).unwrap().value, 0.0);

    let train_config = TrainConfig {
        epochs: 200,
        patience: 0,
        ..TrainConfig::new(ModelVariant::Regression)
    };
    let out = slate_embed::train(&train_config, &data).unwrap();
    let mse = evaluate(&out.model, data.batch(Split::Train), Metric::Mse).unwrap();
    assert!(mse.value < 1e-3, "{mse}");
}

#[test]
fn sweep_ranks_planted_dimension_above_smaller_one() {
    let config = PlantedConfig {
        dim: 5,
        records: 3000,
        planted_std: Some(2.0),
        ..PlantedConfig::default()
    };
    let (data, _) = generate_synthetic(SyntheticKind::Click, &config, 21).unwrap();
    let base = TrainConfig {
        learning_rate: 3e-2,
        batch_size: Some(64),
        epochs: 60,
        patience: 10,
        ..TrainConfig::new(ModelVariant::Semb1)
    };
    let grid = SweepGrid {
        dim: vec![2, 5],
        lambda: vec![1e-4, 1e-3],
        ..SweepGrid::default()
    };
    let out = sweep(&base, &grid, &data).unwrap();
    let dims: Vec<usize> = out.ranked.iter().map(|r| r.config.dim).collect();
    assert_eq!(dims, vec![5, 5, 2, 2], "{:?}", out.ranked.iter().map(|r| r.result.clone()).collect::<Vec<_>>());
    assert_eq!(out.best.unwrap().config.dim, 5);
}
