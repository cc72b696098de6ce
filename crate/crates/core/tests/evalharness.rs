use std::collections::{BTreeMap, HashMap, HashSet};

use curio_core::corpus::{ItemId, Percent, UserId};
use curio_core::curiosity::CuriosityProfile;
use curio_core::evalharness::{
    compare_strategies, curiosity_histogram, precision_recall_at_k, sweep_x, unexp_at_k, MetricRow, Strategy, SweepOutcome,
    UserCandidates,
};
use curio_core::reranker::Candidate;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pools(seed: u64, users: u32) -> Vec<UserCandidates> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (1..=users)
        .map(|u| {
            let mut ids: Vec<ItemId> = (1..=400).collect();
            ids.shuffle(&mut rng);
            let candidates: Vec<Candidate> = ids[..50]
                .iter()
                .map(|&item_id| Candidate {
                    item_id,
                    useful: rng.random_range(0.01..0.99),
                    unexp: rng.random_range(0.0..0.5),
                })
                .collect();
            UserCandidates {
                user_id: u,
                positive: ids[0],
                candidates,
            }
        })
        .collect()
}

fn constant(pools: &[UserCandidates], c: f64) -> BTreeMap<UserId, f64> {
    pools.iter().map(|p| (p.user_id, c)).collect()
}

fn rows_for<'a>(rows: &'a [MetricRow], label: &str) -> Vec<&'a MetricRow> {
    rows.iter().filter(|r| r.strategy == label).collect()
}

fn metrics_eq(a: &[&MetricRow], b: &[&MetricRow]) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert_eq!((x.k, x.precision, x.recall, x.unexp), (y.k, y.precision, y.recall, y.unexp));
    }
}

#[test]
fn unexp_matches_flat_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let users = rng.random_range(1..30);
        let mut lists = Vec::new();
        let mut scores = HashMap::new();
        for u in 0..users {
            let items: Vec<ItemId> = (0..20).map(|k| u * 100 + k).collect();
            for &i in &items {
                scores.insert((u, i), rng.random_range(0.0..1.0));
            }
            lists.push((u, items));
        }
        for k in [1, 5, 10, 20] {
            let mut outer = 0.0;
            for (u, items) in &lists {
                let mut inner = 0.0;
                for i in items.iter().take(k) {
                    inner += scores[&(*u, *i)];
                }
                outer += inner / k as f64;
            }
            let want = outer / lists.len() as f64;
            assert!((unexp_at_k(&lists, &scores, k).unwrap() - want).abs() < 1e-12);
        }
    }
}

#[test]
fn constant_scores_give_constant_unexp() {
    let lists = vec![(1, vec![1, 2, 3]), (2, vec![4, 5, 6])];
    let scores: HashMap<(UserId, ItemId), f64> = lists
        .iter()
        .flat_map(|(u, items)| items.iter().map(move |&i| ((*u, i), 0.37)))
        .collect();
    assert!((unexp_at_k(&lists, &scores, 3).unwrap() - 0.37).abs() < 1e-15);
}

#[test]
fn counting_identity_holds() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let mut rec: Vec<ItemId> = (1..=50).collect();
        rec.shuffle(&mut rng);
        let relevant: HashSet<ItemId> = (0..rng.random_range(1..6)).map(|_| rng.random_range(1..=60)).collect();
        for k in [5, 10, 15, 20] {
            let (p, r) = precision_recall_at_k(&rec, &relevant, k).unwrap();
            assert!((p * k as f64 - r * relevant.len() as f64).abs() < 1e-12);
            assert!(p <= (relevant.len() as f64 / k as f64).min(1.0) + 1e-15);
            assert!((0.0..=1.0).contains(&r));
        }
    }
}

#[test]
fn boundary_curiosities_reproduce_single_signal_rows() {
    let p = pools(1, 40);
    let strategies = Strategy::standard();
    let ks = [5, 10, 15, 20];
    let zero = compare_strategies(&p, &constant(&p, 0.0), &strategies, &ks).unwrap();
    metrics_eq(&rows_for(&zero, "curiosity_weighted"), &rows_for(&zero, "useful_only"));
    let one = compare_strategies(&p, &constant(&p, 1.0), &strategies, &ks).unwrap();
    metrics_eq(&rows_for(&one, "curiosity_weighted"), &rows_for(&one, "unexp_only"));
    let half = compare_strategies(&p, &constant(&p, 0.5), &strategies, &ks).unwrap();
    metrics_eq(&rows_for(&half, "curiosity_weighted"), &rows_for(&half, "fixed_0.5"));
}

#[test]
fn unexp_only_dominates_useful_only_on_unexp() {
    let p = pools(2, 60);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let curiosity: BTreeMap<UserId, f64> = p.iter().map(|u| (u.user_id, rng.random_range(0.0..1.0))).collect();
    let rows = compare_strategies(&p, &curiosity, &Strategy::standard(), &[5, 10, 15, 20]).unwrap();
    for (u, x) in rows_for(&rows, "useful_only").iter().zip(rows_for(&rows, "unexp_only")) {
        assert!(x.unexp >= u.unexp);
    }
}

#[test]
fn metrics_are_reproducible() {
    let p = pools(4, 30);
    let c = constant(&p, 0.3);
    let a = compare_strategies(&p, &c, &Strategy::standard(), &[5, 10]).unwrap();
    let b = compare_strategies(&p, &c, &Strategy::standard(), &[5, 10]).unwrap();
    assert_eq!(a, b);
}

fn fake_profiles(seed: u64, n: u32, x: Percent) -> Vec<CuriosityProfile> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (1..=n)
        .map(|u| {
            let diff_norm: f64 = rng.random_range(0.0..=1.0);
            let div: f64 = if u == 1 { 1.0 } else { rng.random_range(0.0..=1.0) };
            let diff_norm = if u == 1 { 1.0 } else { diff_norm };
            CuriosityProfile {
                user_id: u,
                diff_raw: diff_norm * 2.0,
                diff_norm,
                div,
                curiosity: (diff_norm + div) / 2.0,
                x_used: x,
                degenerate: false,
            }
        })
        .collect()
}

#[test]
fn sweep_is_seeded_and_histograms_cover_every_user() {
    let xs: Vec<Percent> = [5, 10, 15, 20, 25, 30].iter().map(|&x| Percent::new(x).unwrap()).collect();
    let run = || sweep_x(&xs, 99, |x, seed| Ok::<_, String>(fake_profiles(seed, 57, x)));
    let a = run();
    assert_eq!(a, run());
    assert_eq!(a.len(), 6);
    let mut seeds = HashSet::new();
    for outcome in &a {
        let SweepOutcome::Done(r) = outcome else {
            panic!("unexpected failure")
        };
        assert_eq!(r.histogram.iter().sum::<usize>(), 57);
        assert_eq!(r.histogram, curiosity_histogram(&r.profiles));
        assert!(seeds.insert(r.seed));
    }
}
