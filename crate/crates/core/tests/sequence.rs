mod common;

use common::{central_diff, rel_err};
use curio_core::corpus::{Interaction, ItemId, UserEvents};
use curio_core::factorization::FactorModel;
use curio_core::optim::ParamTensors;
use curio_core::sequence::{short_term_preferences, train_sequence_model, SeqHyper, TimeAwareLstm};
use curio_core::snapshot;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_space(dim: usize, items: u32, seed: u64) -> FactorModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut space = FactorModel::zeros(dim, 3.5, vec![1], (1..=items).collect());
    for i in 1..=items {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        space.set_item(i, 0.0, &v).unwrap();
    }
    space
}

fn session(items: &[ItemId], gaps: &[i64]) -> Vec<Interaction> {
    let mut ts = 978_300_000;
    items
        .iter()
        .enumerate()
        .map(|(k, &item)| {
            if k > 0 {
                ts += gaps[(k - 1) % gaps.len()];
            }
            Interaction {
                user_id: 1,
                item_id: item,
                rating: 4,
                timestamp: ts,
            }
        })
        .collect()
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let (dim, hidden) = (4, 4);
    let space = random_space(dim, 12, 5);
    let events = session(&[3, 7, 1, 9, 3, 12], &[0, 45, 86_400, 7, 3_600_000]);
    let negatives = [5, 2, 11, 4, 8];
    let mut model = TimeAwareLstm::new(dim, hidden, 17);
    // Non-trivial biases and time scales so every path carries signal.
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for (_, t) in model.params_mut().tensors_mut() {
        for x in t.iter_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
    }
    let (_, grads) = model.loss_and_grad(&events, &negatives, &space).unwrap();

    let names: Vec<&str> = model.params().tensors().iter().map(|(n, _)| *n).collect();
    let mut worst = 0.0f64;
    for (t_idx, name) in names.iter().enumerate() {
        let len = model.params().tensors()[t_idx].1.len();
        for j in 0..len {
            let mut values = model.params().tensors()[t_idx].1.to_vec();
            let numeric = central_diff(&mut values, j, 1e-5, |v| {
                let mut m = model.clone();
                m.params_mut().tensors_mut()[t_idx].1.copy_from_slice(v);
                m.session_loss(&events, &negatives, &space).unwrap()
            });
            let analytic = grads.tensors()[t_idx].1[j];
            let err = rel_err(analytic, numeric);
            assert!(err < 1e-4, "{name}[{j}]: analytic {analytic} numeric {numeric}");
            worst = worst.max(err);
        }
    }
    assert!(worst < 1e-4);
}

#[test]
fn alternating_user_learns_the_cycle() {
    let space = random_space(8, 10, 3);
    let a_items: Vec<ItemId> = (0..30).map(|k| if k % 2 == 0 { 1 } else { 2 }).collect();
    let b_items: Vec<ItemId> = (0..30).map(|k| 4 + (k % 5) as ItemId).collect();
    let a = session(&a_items, &[600]);
    let b = session(&b_items, &[900]);
    let sessions = [
        UserEvents { user_id: 1, events: &a },
        UserEvents { user_id: 2, events: &b },
    ];
    let hyper = SeqHyper {
        epochs: 60,
        ..SeqHyper::default()
    };
    let trained = train_sequence_model(&sessions, &space, &hyper, 11).unwrap();
    let probe = session(&[2, 1, 2, 1], &[600]);
    let pooled = trained.model.pool_session(&probe, &space).unwrap();
    let score = |i: ItemId| pooled.vector.iter().zip(space.item_factors(i).unwrap()).map(|(a, b)| a * b).sum::<f64>();
    assert!(score(2) > score(3), "score(2)={} score(3)={}", score(2), score(3));
    let first = trained.epoch_loss[0];
    let last = *trained.epoch_loss.last().unwrap();
    assert!(last < first, "loss {first} -> {last}");
}

fn user_sessions(space: &FactorModel, users: u32, seed: u64) -> Vec<Vec<Interaction>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids = space.item_ids().to_vec();
    (0..users)
        .map(|_| {
            let len = rng.random_range(1..9);
            let items: Vec<ItemId> = (0..len).map(|_| *ids.choose(&mut rng).unwrap()).collect();
            let gaps: Vec<i64> = (0..len).map(|_| rng.random_range(0..200_000)).collect();
            session(&items, &gaps)
        })
        .collect()
}

#[test]
fn training_is_deterministic_and_loss_trends_down() {
    let space = random_space(6, 40, 8);
    let raw = user_sessions(&space, 24, 2);
    let sessions: Vec<UserEvents<'_>> = raw
        .iter()
        .enumerate()
        .map(|(u, e)| UserEvents {
            user_id: u as u32,
            events: e,
        })
        .collect();
    let hyper = SeqHyper {
        epochs: 12,
        ..SeqHyper::default()
    };
    let a = train_sequence_model(&sessions, &space, &hyper, 4).unwrap();
    let b = train_sequence_model(&sessions, &space, &hyper, 4).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.epoch_loss, b.epoch_loss);
    // Sampling noise allows small upticks; the trend must be downward.
    let head: f64 = a.epoch_loss[..3].iter().sum();
    let tail: f64 = a.epoch_loss[a.epoch_loss.len() - 3..].iter().sum();
    assert!(tail < head);
    for w in a.epoch_loss.windows(2) {
        assert!(w[1] <= w[0] * 1.05, "{:?}", a.epoch_loss);
    }
}

#[test]
fn thread_count_does_not_change_the_result() {
    let space = random_space(6, 40, 8);
    let raw = user_sessions(&space, 40, 6);
    let sessions: Vec<UserEvents<'_>> = raw
        .iter()
        .enumerate()
        .map(|(u, e)| UserEvents {
            user_id: u as u32,
            events: e,
        })
        .collect();
    let hyper = SeqHyper {
        epochs: 2,
        ..SeqHyper::default()
    };
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| train_sequence_model(&sessions, &space, &hyper, 21).unwrap())
    };
    assert_eq!(run(1).model, run(4).model);
}

#[test]
fn attention_weights_sum_to_one() {
    let space = random_space(5, 30, 1);
    let model = TimeAwareLstm::new(5, 5, 2);
    for raw in user_sessions(&space, 50, 3) {
        let pooled = model.pool_session(&raw, &space).unwrap();
        assert_eq!(pooled.weights.len(), raw.len());
        assert!(pooled.weights.iter().all(|&w| w >= 0.0));
        assert!((pooled.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn decade_long_gaps_stay_finite_and_scores_move_continuously() {
    let space = random_space(5, 30, 1);
    let model = TimeAwareLstm::new(5, 5, 2);
    let ten_years = 10 * 365 * 86_400;
    let items = [1, 4, 9, 16, 25];
    let base = session(&items, &[3_600, 86_400, 600, 40_000]);
    let reference = model.pool_session(&base, &space).unwrap().vector;
    for scale in [1.0 + 1e-9, 2.0, 1e3, 1e5] {
        let gaps: Vec<i64> = [3_600.0, 86_400.0, 600.0, 40_000.0]
            .iter()
            .map(|g: &f64| ((g * scale) as i64).min(ten_years))
            .collect();
        let pooled = model.pool_session(&session(&items, &gaps), &space).unwrap();
        assert!(pooled.vector.iter().all(|v| v.is_finite()));
        if scale < 1.0 + 1e-6 {
            let drift: f64 = pooled.vector.iter().zip(&reference).map(|(a, b)| (a - b).abs()).sum();
            assert!(drift < 1e-6);
        }
    }
    let extreme = session(&items, &[ten_years]);
    assert!(model.pool_session(&extreme, &space).unwrap().vector.iter().all(|v| v.is_finite()));
}

#[test]
fn short_term_set_matches_argsort_and_ignores_catalog_order() {
    let space = random_space(6, 60, 12);
    let raw = user_sessions(&space, 10, 13);
    let sessions: Vec<UserEvents<'_>> = raw
        .iter()
        .enumerate()
        .map(|(u, e)| UserEvents {
            user_id: u as u32,
            events: e,
        })
        .collect();
    let hyper = SeqHyper {
        epochs: 3,
        ..SeqHyper::default()
    };
    let model = train_sequence_model(&sessions, &space, &hyper, 5).unwrap().model;
    let probe = &raw[0];
    let set = short_term_preferences(&model, 7, probe, &space, 1..=60).unwrap();

    let pooled = model.pool_session(probe, &space).unwrap().vector;
    let mut oracle: Vec<(ItemId, f64)> = (1..=60)
        .map(|i| (i, pooled.iter().zip(space.item_factors(i).unwrap()).map(|(a, b)| a * b).sum()))
        .collect();
    oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let expected: Vec<ItemId> = oracle[..20].iter().map(|p| p.0).collect();
    assert_eq!(set.items, expected);
    for (item, v) in set.items.iter().zip(&set.vectors) {
        assert_eq!(v.as_slice(), space.item_factors(*item).unwrap());
    }

    let mut shuffled: Vec<ItemId> = (1..=60).collect();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
    assert_eq!(short_term_preferences(&model, 7, probe, &space, shuffled).unwrap(), set);
}

#[test]
fn catalog_of_twenty_returns_everything() {
    let space = random_space(4, 20, 2);
    let model = TimeAwareLstm::new(4, 4, 1);
    let set = short_term_preferences(&model, 1, &session(&[3, 5], &[10]), &space, 1..=20).unwrap();
    let mut items = set.items.clone();
    items.sort_unstable();
    assert_eq!(items, (1..=20).collect::<Vec<_>>());
}

#[test]
fn snapshot_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("seq.json");
    let model = TimeAwareLstm::new(6, 6, 3);
    snapshot::save(&model, &path).unwrap();
    let back: TimeAwareLstm = snapshot::load(&path).unwrap();
    assert_eq!(back, model);
}

#[test]
fn hidden_size_must_match_the_item_space() {
    let space = random_space(4, 6, 1);
    let model = TimeAwareLstm::new(4, 5, 2);
    let events = session(&[1, 2, 3], &[60]);
    assert!(model.session_loss(&events, &[4, 5], &space).is_err());
    assert!(model.pool_session(&events, &space).is_err());
}
