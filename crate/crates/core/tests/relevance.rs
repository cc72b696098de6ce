mod common;

use common::{central_diff, rel_err};
use curio_core::corpus::{Interaction, ItemId, UserEvents, UserId};
use curio_core::optim::ParamTensors;
use curio_core::relevance::{train_ctr, CtrHyper, CtrModel};
use curio_core::snapshot;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> CtrHyper {
    CtrHyper {
        dim: 4,
        hidden: 3,
        mlp_hidden: 5,
        ..CtrHyper::default()
    }
}

fn events(user: UserId, items: &[ItemId]) -> Vec<Interaction> {
    items
        .iter()
        .enumerate()
        .map(|(k, &item_id)| Interaction {
            user_id: user,
            item_id,
            rating: 4,
            timestamp: 1_000 + k as i64,
        })
        .collect()
}

/// Fraction of (positive, negative) pairs ordered correctly, ties counted
/// as one half.
fn auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut hits = 0.0;
    for p in pos {
        for n in neg {
            hits += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    hits / (pos.len() * neg.len()) as f64
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let items: Vec<ItemId> = (1..=8).collect();
    let mut model = CtrModel::new(&items, &[3, 5], &tiny(), 21);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (_, t) in model.dense_mut().tensors_mut() {
        for x in t.iter_mut() {
            *x += rng.random_range(-0.2..0.2);
        }
    }
    let history = [2, 7, 1, 7, 4];
    let targets = [(4, true), (6, false)];
    let (_, grads) = model.example_loss_and_grad(5, &history, &targets).unwrap();
    let loss = |m: &CtrModel| m.example_loss(5, &history, &targets).unwrap();

    let names: Vec<&str> = model.dense().tensors().iter().map(|(n, _)| *n).collect();
    for (t_idx, name) in names.iter().enumerate() {
        let mut values = model.dense().tensors()[t_idx].1.to_vec();
        for j in 0..values.len() {
            let numeric = central_diff(&mut values, j, 1e-5, |v| {
                let mut m = model.clone();
                m.dense_mut().tensors_mut()[t_idx].1.copy_from_slice(v);
                loss(&m)
            });
            let analytic = grads.dense.tensors()[t_idx].1[j];
            assert!(rel_err(analytic, numeric) < 1e-4, "{name}[{j}]: {analytic} vs {numeric}");
        }
    }

    for item in [1, 2, 4, 6, 7] {
        let mut values = model.item_latent(item).unwrap().to_vec();
        for j in 0..values.len() {
            let numeric = central_diff(&mut values, j, 1e-5, |v| {
                let mut m = model.clone();
                m.item_embedding_mut(item).unwrap().copy_from_slice(v);
                loss(&m)
            });
            let analytic = grads.items[&item][j];
            assert!(rel_err(analytic, numeric) < 1e-4, "item {item}[{j}]: {analytic} vs {numeric}");
        }
    }
    assert!(!grads.items.contains_key(&3), "untouched rows carry no gradient");

    let mut values = model.user_embedding(5).unwrap().to_vec();
    for j in 0..values.len() {
        let numeric = central_diff(&mut values, j, 1e-5, |v| {
            let mut m = model.clone();
            m.user_embedding_mut(5).unwrap().copy_from_slice(v);
            loss(&m)
        });
        let analytic = grads.users[&5][j];
        assert!(rel_err(analytic, numeric) < 1e-4, "user[{j}]: {analytic} vs {numeric}");
    }
}

#[test]
fn backward_pass_mirrors_forward_pass_on_reversed_history() {
    let mut model = CtrModel::new(&(1..=6).collect::<Vec<_>>(), &[1], &tiny(), 8);
    model.dense_mut().tie_backward_to_forward();
    let history = [4, 1, 6];
    let reversed: Vec<ItemId> = history.iter().rev().copied().collect();
    let (_, bwd) = model.directional_states(&history).unwrap();
    let (fwd_rev, _) = model.directional_states(&reversed).unwrap();
    for j in 0..history.len() {
        assert_eq!(bwd[j], fwd_rev[history.len() - 1 - j]);
    }
}

#[test]
fn attention_and_scores_stay_well_formed() {
    let items: Vec<ItemId> = (1..=40).collect();
    let model = CtrModel::new(&items, &[1], &CtrHyper::default(), 2);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for len in [1, 2, 17, 100, 512] {
        let history: Vec<ItemId> = (0..len).map(|_| *items.choose(&mut rng).unwrap()).collect();
        let enc = model.encode_history(&history).unwrap();
        assert_eq!(enc.weights.len(), len);
        assert!(enc.weights.iter().all(|&w| w >= 0.0));
        assert!((enc.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for &item in items.iter().take(5) {
            let s = model.usefulness_encoded(&enc, 1, item).unwrap().value;
            assert!(s > 0.0 && s < 1.0);
        }
    }
}

#[test]
fn separable_clicks_are_learned() {
    // Four categories of 25 items; a user only ever clicks items of their
    // own category, so the click label is a function of (history, item).
    let category = |i: ItemId| (i - 1) / 25;
    let items: Vec<ItemId> = (1..=100).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let own = |c: u32| -> Vec<ItemId> { items.iter().copied().filter(|&i| category(i) == c).collect() };
    let train: Vec<Vec<Interaction>> = (0..200u32)
        .map(|u| {
            let mut pool = own(u % 4);
            pool.shuffle(&mut rng);
            events(u, &pool[..15])
        })
        .collect();
    let users: Vec<UserEvents<'_>> = train
        .iter()
        .enumerate()
        .map(|(u, e)| UserEvents {
            user_id: u as u32,
            events: e,
        })
        .collect();
    let hyper = CtrHyper {
        epochs: 15,
        ..CtrHyper::default()
    };
    let model = train_ctr(&users, &items, &hyper, 5).unwrap().model;

    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for u in 1000..1040u32 {
        let c = u % 4;
        let mut pool = own(c);
        pool.shuffle(&mut rng);
        let (history, fresh) = pool.split_at(10);
        let enc = model.encode_history(history).unwrap();
        for &i in &fresh[..5] {
            pos.push(model.usefulness_encoded(&enc, u, i).unwrap().value);
        }
        let others: Vec<ItemId> = items.iter().copied().filter(|&i| category(i) != c).collect();
        for &i in others.choose_multiple(&mut rng, 15) {
            neg.push(model.usefulness_encoded(&enc, u, i).unwrap().value);
        }
    }
    let score = auc(&pos, &neg);
    assert!(score > 0.95, "held-out AUC {score}");
}

#[test]
fn a_single_repeated_example_is_memorized() {
    let seq = events(1, &[1, 2]);
    let users = [UserEvents {
        user_id: 1,
        events: &seq,
    }];
    let hyper = CtrHyper {
        epochs: 400,
        lr: 0.01,
        ..CtrHyper::default()
    };
    // With three items the only unseen negative is item 3, so every epoch
    // presents the same pair of examples.
    let t = train_ctr(&users, &[1, 2, 3], &hyper, 3).unwrap();
    let last = *t.epoch_loss.last().unwrap();
    assert!(last < 0.01, "final loss {last}");
    assert!(t.model.usefulness(1, 2, &[1]).unwrap().value > 0.99);
    assert!(t.model.usefulness(1, 3, &[1]).unwrap().value < 0.01);
}

fn random_users(seed: u64, n: u32, items: u32) -> Vec<Vec<Interaction>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|u| {
            let len = rng.random_range(1..30);
            let seq: Vec<ItemId> = (0..len).map(|_| rng.random_range(1..=items)).collect();
            events(u, &seq)
        })
        .collect()
}

#[test]
fn training_is_deterministic_and_loss_trends_down() {
    let raw = random_users(3, 60, 50);
    let users: Vec<UserEvents<'_>> = raw
        .iter()
        .enumerate()
        .map(|(u, e)| UserEvents {
            user_id: u as u32,
            events: e,
        })
        .collect();
    let items: Vec<ItemId> = (1..=50).collect();
    let hyper = CtrHyper {
        epochs: 8,
        ..CtrHyper::default()
    };
    let a = train_ctr(&users, &items, &hyper, 12).unwrap();
    let b = train_ctr(&users, &items, &hyper, 12).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.epoch_loss, b.epoch_loss);
    let head: f64 = a.epoch_loss[..2].iter().sum();
    let tail: f64 = a.epoch_loss[a.epoch_loss.len() - 2..].iter().sum();
    assert!(tail < head, "{:?}", a.epoch_loss);

    let threaded = rayon::ThreadPoolBuilder::new()
        .num_threads(3)
        .build()
        .unwrap()
        .install(|| train_ctr(&users, &items, &hyper, 12).unwrap());
    assert_eq!(threaded.model, a.model);
}

#[test]
fn item_latent_contracts() {
    let raw = random_users(1, 10, 20);
    let users: Vec<UserEvents<'_>> = raw
        .iter()
        .enumerate()
        .map(|(u, e)| UserEvents {
            user_id: u as u32,
            events: e,
        })
        .collect();
    let items: Vec<ItemId> = (1..=20).collect();
    let hyper = CtrHyper {
        epochs: 0,
        ..CtrHyper::default()
    };
    let untrained = train_ctr(&users, &items, &hyper, 9).unwrap().model;
    let user_ids: Vec<UserId> = (0..10).collect();
    let init = CtrModel::new(&items, &user_ids, &hyper, 9);
    assert_eq!(untrained.item_latent(4).unwrap(), init.item_latent(4).unwrap());

    let first = untrained.item_latent(7).unwrap().to_vec();
    assert_eq!(untrained.item_latent(7).unwrap(), first.as_slice());
    assert!(untrained.item_latent(99).is_err());

    let mut m = untrained.clone();
    let other = m.item_latent(8).unwrap().to_vec();
    m.item_embedding_mut(7).unwrap().fill(123.0);
    assert_eq!(m.item_latent(8).unwrap(), other.as_slice());
    assert_ne!(m.item_latent(7).unwrap(), first.as_slice());
}

#[test]
fn snapshot_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ctr.json");
    let model = CtrModel::new(&[1, 2, 3], &[1, 2], &CtrHyper::default(), 3);
    snapshot::save(&model, &path).unwrap();
    let back: CtrModel = snapshot::load(&path).unwrap();
    assert_eq!(back, model);
}
