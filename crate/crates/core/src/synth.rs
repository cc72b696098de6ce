//! Seeded generator for MovieLens-1M-format corpora (`ratings.dat`,
//! `movies.dat`).
//!
//! Items get one to three genres, a release year and a Zipf-like popularity.
//! Users have a few favorite genres; some switch favorites part-way through
//! their history so short- and long-term tastes differ. Ratings rise with
//! genre affinity. Timestamps start near the ML-1M collection period and
//! advance in bursts.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample_weighted;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusError, ItemId, UserId};
use crate::rng::stream_rng;

pub const GENRES: [&str; 18] = [
    "Action",
    "Adventure",
    "Animation",
    "Children's",
    "Comedy",
    "Crime",
    "Documentary",
    "Drama",
    "Fantasy",
    "Film-Noir",
    "Horror",
    "Musical",
    "Mystery",
    "Romance",
    "Sci-Fi",
    "Thriller",
    "War",
    "Western",
];

const FIRST_TIMESTAMP: i64 = 956_703_932;

const ADJECTIVES: [&str; 24] = [
    "Silent", "Crimson", "Hidden", "Broken", "Golden", "Last", "Midnight", "Distant", "Wild", "Hollow", "Burning", "Quiet",
    "Lonely", "Electric", "Frozen", "Secret", "Bitter", "Brave", "Restless", "Pale", "Shattered", "Endless", "Lucky", "Savage",
];

const NOUNS: [&str; 24] = [
    "Harbor", "Empire", "Garden", "Stranger", "River", "Horizon", "Promise", "Kingdom", "Shadow", "Station", "Letter", "Voyage",
    "Frontier", "Witness", "Carnival", "Orchard", "Signal", "Summer", "Bridge", "Circus", "Island", "Verdict", "Mirror", "Outlaw",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub users: u32,
    pub items: u32,
    /// Mean events per user; every user gets at least 20.
    pub mean_events: f64,
    /// Share of users whose favorite genres change part-way through.
    pub drift_share: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            users: 1000,
            items: 1200,
            mean_events: 90.0,
            drift_share: 0.4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthItem {
    pub id: ItemId,
    pub title: String,
    pub year: u16,
    pub genres: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthRating {
    pub user_id: UserId,
    pub item_id: ItemId,
    pub rating: u8,
    pub timestamp: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub items: Vec<SynthItem>,
    pub ratings: Vec<SynthRating>,
}

fn taste(rng: &mut impl Rng) -> [f64; 18] {
    let mut t = [0.05; 18];
    let picks = rng.random_range(2..=3);
    let mut order: Vec<usize> = (0..18).collect();
    order.shuffle(rng);
    for (rank, &g) in order.iter().take(picks).enumerate() {
        t[g] += 1.0 / (rank as f64 + 1.0);
    }
    t
}

fn affinity(taste: &[f64; 18], item: &SynthItem) -> f64 {
    let max = taste.iter().cloned().fold(0.0, f64::max);
    item.genres.iter().map(|&g| taste[g]).fold(0.0, f64::max) / max
}

fn make_items(cfg: &SynthConfig, seed: u64) -> (Vec<SynthItem>, Vec<f64>) {
    let mut rng = stream_rng(seed, "synth-items", 0);
    let mut popularity_rank: Vec<usize> = (0..cfg.items as usize).collect();
    popularity_rank.shuffle(&mut rng);
    let mut items = Vec::with_capacity(cfg.items as usize);
    let mut popularity = Vec::with_capacity(cfg.items as usize);
    for k in 0..cfg.items {
        let id = k + 1;
        let n_genres = match rng.random_range(0..10) {
            0..=4 => 1,
            5..=8 => 2,
            _ => 3,
        };
        let mut genres: Vec<usize> = rand::seq::index::sample(&mut rng, GENRES.len(), n_genres).into_vec();
        genres.sort_unstable();
        let year = if rng.random_bool(0.7) {
            rng.random_range(1980..=2000)
        } else {
            rng.random_range(1919..1980)
        };
        let title = format!(
            "{} {}",
            ADJECTIVES[rng.random_range(0..ADJECTIVES.len())],
            NOUNS[rng.random_range(0..NOUNS.len())]
        );
        items.push(SynthItem { id, title, year, genres });
        popularity.push(1.0 / (popularity_rank[k as usize] as f64 + 10.0).powf(0.9));
    }
    (items, popularity)
}

/// Draw `n` distinct items weighted by popularity times squared affinity.
fn draw(
    rng: &mut impl Rng,
    items: &[SynthItem],
    popularity: &[f64],
    taste: &[f64; 18],
    taken: &[bool],
    n: usize,
) -> Vec<usize> {
    let weights: Vec<f64> = items
        .iter()
        .zip(popularity)
        .zip(taken)
        .map(|((it, p), &t)| if t { 0.0 } else { p * (affinity(taste, it).powi(2) + 0.01) })
        .collect();
    let available = weights.iter().filter(|w| **w > 0.0).count();
    sample_weighted(rng, items.len(), |i| weights[i], n.min(available))
        .map(|s| s.into_vec())
        .unwrap_or_default()
}

/// Generate a corpus. Identical `(cfg, seed)` pairs give identical output.
pub fn generate(cfg: &SynthConfig, seed: u64) -> SynthCorpus {
    let (items, popularity) = make_items(cfg, seed);
    let gap_noise = Normal::new(0.0, 0.8).expect("valid normal");
    let extra = Exp::new(1.0 / (cfg.mean_events - 20.0).max(1.0)).expect("valid rate");
    let mut ratings = Vec::new();
    for u in 0..cfg.users {
        let user_id = u + 1;
        let mut rng = stream_rng(seed, "synth-user", u64::from(user_id));
        let n = (20 + extra.sample(&mut rng) as usize).min(items.len() / 2);
        let early = taste(&mut rng);
        let drifts = rng.random_bool(cfg.drift_share);
        let late = if drifts { taste(&mut rng) } else { early };
        let switch = if drifts { n * rng.random_range(50..80) / 100 } else { n };

        let mut taken = vec![false; items.len()];
        let mut chosen = draw(&mut rng, &items, &popularity, &early, &taken, switch);
        for &i in &chosen {
            taken[i] = true;
        }
        if n > switch {
            chosen.extend(draw(&mut rng, &items, &popularity, &late, &taken, n - switch));
        }

        let mut ts = FIRST_TIMESTAMP + rng.random_range(0..180 * 86_400);
        for (pos, &i) in chosen.iter().enumerate() {
            ts += match rng.random_range(0..100) {
                0..=69 => rng.random_range(10..600),
                70..=94 => rng.random_range(3_600..3 * 86_400),
                _ => rng.random_range(7 * 86_400..60 * 86_400),
            };
            let t = if pos < switch { &early } else { &late };
            let score = 2.4 + 2.2 * affinity(t, &items[i]) + gap_noise.sample(&mut rng);
            ratings.push(SynthRating {
                user_id,
                item_id: items[i].id,
                rating: score.round().clamp(1.0, 5.0) as u8,
                timestamp: ts,
            });
        }
    }
    SynthCorpus { items, ratings }
}

/// Write `ratings.dat` and `movies.dat` into `dir`; returns their paths.
pub fn write_movielens(corpus: &SynthCorpus, dir: &Path) -> Result<(PathBuf, PathBuf), CorpusError> {
    let write_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| CorpusError::Write { path, source }
    };
    std::fs::create_dir_all(dir).map_err(write_err(dir))?;
    let ratings = dir.join("ratings.dat");
    let movies = dir.join("movies.dat");

    let mut out = BufWriter::new(File::create(&ratings).map_err(write_err(&ratings))?);
    for r in &corpus.ratings {
        writeln!(out, "{}::{}::{}::{}", r.user_id, r.item_id, r.rating, r.timestamp).map_err(write_err(&ratings))?;
    }
    out.flush().map_err(write_err(&ratings))?;

    let mut out = BufWriter::new(File::create(&movies).map_err(write_err(&movies))?);
    for it in &corpus.items {
        let genres: Vec<&str> = it.genres.iter().map(|&g| GENRES[g]).collect();
        writeln!(out, "{}::{} ({})::{}", it.id, it.title, it.year, genres.join("|")).map_err(write_err(&movies))?;
    }
    out.flush().map_err(write_err(&movies))?;
    Ok((ratings, movies))
}
