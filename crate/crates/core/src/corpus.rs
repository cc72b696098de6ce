//! MovieLens ingestion, leave-last-out splitting and session suffixes.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::IteratorRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::stream_rng;

pub type UserId = u32;
pub type ItemId = u32;

/// Users with fewer events than this are dropped at load time.
pub const MIN_EVENTS: usize = 5;
pub const VALIDATION_NEGATIVES: usize = 9;
pub const TEST_NEGATIVES: usize = 49;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },
    #[error("{file}:{line}: rating {rating} outside 1..=5")]
    InvalidRating { file: String, line: usize, rating: i64 },
    #[error("{file}:{line}: timestamp {timestamp} must be positive")]
    InvalidTimestamp {
        file: String,
        line: usize,
        timestamp: i64,
    },
    #[error("{file}:{line}: item {item} is not listed in the movies file")]
    UnknownItem { file: String, line: usize, item: ItemId },
    #[error("user {user} has only {unseen} unseen items, {needed} negatives required")]
    InsufficientNegatives {
        user: UserId,
        unseen: usize,
        needed: usize,
    },
    #[error("session percentage {0} outside 1..=100")]
    Percent(u32),
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// One rating event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: UserId,
    pub item_id: ItemId,
    pub rating: u8,
    pub timestamp: i64,
}

/// A user's events in ascending timestamp order, ties kept in file order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user_id: UserId,
    pub events: Vec<Interaction>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemMeta {
    /// Title with the trailing `(year)` removed.
    pub title: String,
    pub genres: Vec<String>,
    pub year: Option<u16>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Catalog {
    pub items: BTreeMap<ItemId, ItemMeta>,
}

impl Catalog {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn contains(&self, item: ItemId) -> bool {
        self.items.contains_key(&item)
    }

    pub fn ids(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.items.keys().copied()
    }

    pub fn get(&self, item: ItemId) -> Option<&ItemMeta> {
        self.items.get(&item)
    }
}

/// Share of a training sequence kept as the short-term session, 1..=100.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct Percent(u8);

impl Percent {
    pub fn new(value: u32) -> Result<Self> {
        if (1..=100).contains(&value) {
            Ok(Self(value as u8))
        } else {
            Err(CorpusError::Percent(value))
        }
    }

    pub fn get(self) -> u32 {
        u32::from(self.0)
    }
}

impl TryFrom<u32> for Percent {
    type Error = CorpusError;

    fn try_from(value: u32) -> Result<Self> {
        Self::new(value)
    }
}

impl From<Percent> for u32 {
    fn from(p: Percent) -> u32 {
        p.get()
    }
}

impl std::fmt::Display for Percent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One held-out positive plus its sampled negatives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCase {
    pub positive: Interaction,
    pub negatives: Vec<ItemId>,
}

impl EvalCase {
    /// Candidate pool: the positive first, then the negatives in sampling order.
    pub fn candidates(&self) -> Vec<ItemId> {
        std::iter::once(self.positive.item_id)
            .chain(self.negatives.iter().copied())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSplit {
    pub user_id: UserId,
    pub train: Vec<Interaction>,
    pub validation: EvalCase,
    pub test: EvalCase,
}

impl UserSplit {
    /// Every item the user interacted with, across all three partitions.
    pub fn seen_items(&self) -> HashSet<ItemId> {
        self.train
            .iter()
            .map(|e| e.item_id)
            .chain([self.validation.positive.item_id, self.test.positive.item_id])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitDataset {
    /// Ascending by user id.
    pub users: Vec<UserSplit>,
    pub catalog: Catalog,
}

impl SplitDataset {
    pub fn train_events(&self) -> impl Iterator<Item = &Interaction> {
        self.users.iter().flat_map(|u| u.train.iter())
    }

    pub fn user(&self, user_id: UserId) -> Option<&UserSplit> {
        self.users
            .binary_search_by_key(&user_id, |u| u.user_id)
            .ok()
            .map(|i| &self.users[i])
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })
}

/// MovieLens `.dat` files are latin-1; accept UTF-8 when it is valid.
fn decode_line(bytes: &[u8]) -> String {
    match std::str::from_utf8(bytes) {
        Ok(s) => s.to_owned(),
        Err(_) => bytes.iter().map(|&b| b as char).collect(),
    }
}

fn read_lines<R: Read>(reader: R, file: &str) -> Result<Vec<(usize, String)>> {
    let mut reader = BufReader::new(reader);
    let mut out = Vec::new();
    let mut buf = Vec::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        let n = reader
            .read_until(b'\n', &mut buf)
            .map_err(|source| CorpusError::Io {
                path: PathBuf::from(file),
                source,
            })?;
        if n == 0 {
            break;
        }
        line_no += 1;
        let line = decode_line(&buf);
        let line = line.trim_end_matches(['\n', '\r']);
        if !line.trim().is_empty() {
            out.push((line_no, line.to_owned()));
        }
    }
    Ok(out)
}

fn parse_field<T: std::str::FromStr>(raw: &str, what: &str, file: &str, line: usize) -> Result<T> {
    raw.trim().parse().map_err(|_| CorpusError::Parse {
        file: file.to_owned(),
        line,
        message: format!("invalid {what} {raw:?}"),
    })
}

/// A ratings record tagged with its source line, before catalog validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RatingLine {
    pub line: usize,
    pub interaction: Interaction,
}

/// Parse `UserID::MovieID::Rating::Timestamp` lines.
pub fn parse_ratings<R: Read>(reader: R, file: &str) -> Result<Vec<RatingLine>> {
    let mut out = Vec::new();
    for (line, text) in read_lines(reader, file)? {
        let fields: Vec<&str> = text.split("::").collect();
        if fields.len() != 4 {
            return Err(CorpusError::Parse {
                file: file.to_owned(),
                line,
                message: format!("expected 4 `::`-separated fields, found {}", fields.len()),
            });
        }
        let user_id = parse_field(fields[0], "user id", file, line)?;
        let item_id = parse_field(fields[1], "movie id", file, line)?;
        let rating: i64 = parse_field(fields[2], "rating", file, line)?;
        let timestamp: i64 = parse_field(fields[3], "timestamp", file, line)?;
        if !(1..=5).contains(&rating) {
            return Err(CorpusError::InvalidRating {
                file: file.to_owned(),
                line,
                rating,
            });
        }
        if timestamp <= 0 {
            return Err(CorpusError::InvalidTimestamp {
                file: file.to_owned(),
                line,
                timestamp,
            });
        }
        out.push(RatingLine {
            line,
            interaction: Interaction {
                user_id,
                item_id,
                rating: rating as u8,
                timestamp,
            },
        });
    }
    Ok(out)
}

fn split_title_year(raw: &str) -> (String, Option<u16>) {
    let trimmed = raw.trim();
    if let Some(open) = trimmed.rfind('(') {
        if trimmed.ends_with(')') {
            let inner = &trimmed[open + 1..trimmed.len() - 1];
            if inner.len() == 4 {
                if let Ok(year) = inner.parse::<u16>() {
                    return (trimmed[..open].trim_end().to_owned(), Some(year));
                }
            }
        }
    }
    (trimmed.to_owned(), None)
}

/// Parse `MovieID::Title (Year)::Genre|Genre` lines.
pub fn parse_movies<R: Read>(reader: R, file: &str) -> Result<Catalog> {
    let mut items = BTreeMap::new();
    for (line, text) in read_lines(reader, file)? {
        let fields: Vec<&str> = text.split("::").collect();
        if fields.len() != 3 {
            return Err(CorpusError::Parse {
                file: file.to_owned(),
                line,
                message: format!("expected 3 `::`-separated fields, found {}", fields.len()),
            });
        }
        let id: ItemId = parse_field(fields[0], "movie id", file, line)?;
        let (title, year) = split_title_year(fields[1]);
        let genres = fields[2]
            .split('|')
            .map(str::trim)
            .filter(|g| !g.is_empty())
            .map(str::to_owned)
            .collect();
        if items.insert(id, ItemMeta { title, genres, year }).is_some() {
            return Err(CorpusError::Parse {
                file: file.to_owned(),
                line,
                message: format!("duplicate movie id {id}"),
            });
        }
    }
    Ok(Catalog { items })
}

/// Group ratings per user, order by timestamp (stable), validate items against
/// the catalog and drop users below [`MIN_EVENTS`].
pub fn build_sequences(ratings: &[RatingLine], catalog: &Catalog, file: &str) -> Result<Vec<UserSequence>> {
    let mut by_user: BTreeMap<UserId, Vec<Interaction>> = BTreeMap::new();
    for r in ratings {
        if !catalog.contains(r.interaction.item_id) {
            return Err(CorpusError::UnknownItem {
                file: file.to_owned(),
                line: r.line,
                item: r.interaction.item_id,
            });
        }
        by_user
            .entry(r.interaction.user_id)
            .or_default()
            .push(r.interaction);
    }
    let mut dropped = 0usize;
    let mut out = Vec::with_capacity(by_user.len());
    for (user_id, mut events) in by_user {
        if events.len() < MIN_EVENTS {
            dropped += 1;
            continue;
        }
        events.sort_by_key(|e| e.timestamp);
        out.push(UserSequence { user_id, events });
    }
    if dropped > 0 {
        log::info!("dropped {dropped} users with fewer than {MIN_EVENTS} events");
    }
    Ok(out)
}

/// Load `ratings.dat` and `movies.dat` into per-user sequences and a catalog.
pub fn load_movielens(ratings_path: &Path, movies_path: &Path) -> Result<(Vec<UserSequence>, Catalog)> {
    let movies_label = movies_path.display().to_string();
    let ratings_label = ratings_path.display().to_string();
    let catalog = parse_movies(open(movies_path)?, &movies_label)?;
    let ratings = parse_ratings(open(ratings_path)?, &ratings_label)?;
    let sequences = build_sequences(&ratings, &catalog, &ratings_label)?;
    Ok((sequences, catalog))
}

/// Keep a seeded random subset of `n` users (all users when `n` exceeds the
/// population). Output stays ordered by user id.
pub fn subsample_users(sequences: Vec<UserSequence>, n: usize, seed: u64) -> Vec<UserSequence> {
    if n >= sequences.len() {
        return sequences;
    }
    let mut rng = stream_rng(seed, "subsample", 0);
    let mut keep = (0..sequences.len()).choose_multiple(&mut rng, n);
    keep.sort_unstable();
    let keep: HashSet<usize> = keep.into_iter().collect();
    sequences
        .into_iter()
        .enumerate()
        .filter(|(i, _)| keep.contains(i))
        .map(|(_, s)| s)
        .collect()
}

fn sample_negatives(
    catalog: &Catalog,
    seen: &HashSet<ItemId>,
    count: usize,
    seed: u64,
    stream: &str,
    user: UserId,
) -> Result<Vec<ItemId>> {
    let unseen: Vec<ItemId> = catalog.ids().filter(|i| !seen.contains(i)).collect();
    if unseen.len() < count {
        return Err(CorpusError::InsufficientNegatives {
            user,
            unseen: unseen.len(),
            needed: count,
        });
    }
    let mut rng = stream_rng(seed, stream, u64::from(user));
    let picks = rand::seq::index::sample(&mut rng, unseen.len(), count);
    Ok(picks.into_iter().map(|i| unseen[i]).collect())
}

/// Leave-last-out split: the last event goes to test, the one before to
/// validation, the rest to training. Negatives are sampled uniformly without
/// replacement from the items the user never touched.
pub fn split_leave_last_out(sequences: &[UserSequence], catalog: &Catalog, seed: u64) -> Result<SplitDataset> {
    let mut users = Vec::with_capacity(sequences.len());
    let mut excluded = 0usize;
    for seq in sequences {
        let n = seq.events.len();
        if n < MIN_EVENTS {
            excluded += 1;
            continue;
        }
        let seen: HashSet<ItemId> = seq.events.iter().map(|e| e.item_id).collect();
        let validation = EvalCase {
            positive: seq.events[n - 2],
            negatives: sample_negatives(catalog, &seen, VALIDATION_NEGATIVES, seed, "val-neg", seq.user_id)?,
        };
        let test = EvalCase {
            positive: seq.events[n - 1],
            negatives: sample_negatives(catalog, &seen, TEST_NEGATIVES, seed, "test-neg", seq.user_id)?,
        };
        users.push(UserSplit {
            user_id: seq.user_id,
            train: seq.events[..n - 2].to_vec(),
            validation,
            test,
        });
    }
    if excluded > 0 {
        log::warn!("excluded {excluded} users with fewer than {MIN_EVENTS} events from the split");
    }
    users.sort_by_key(|u| u.user_id);
    Ok(SplitDataset {
        users,
        catalog: catalog.clone(),
    })
}

/// A borrowed run of one user's events.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UserEvents<'a> {
    pub user_id: UserId,
    pub events: &'a [Interaction],
}

/// Number of trailing events kept for a session of `len` events at `x`%:
/// `ceil(x/100 * len)`, at least 1 (0 only for an empty sequence).
pub fn suffix_len(len: usize, x: Percent) -> usize {
    if len == 0 {
        return 0;
    }
    let x = x.get() as usize;
    ((x * len).div_ceil(100)).clamp(1, len)
}

/// The most recent `x`% of a training sequence, order preserved.
pub fn session_suffix(train: &[Interaction], x: Percent) -> &[Interaction] {
    let keep = suffix_len(train.len(), x);
    &train[train.len() - keep..]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Pos,
    Neg,
}

/// One line of `train.jsonl`, `val.jsonl` or `test.jsonl`. Negatives carry no
/// rating or timestamp.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub user_id: UserId,
    pub item_id: ItemId,
    pub rating: Option<u8>,
    pub timestamp: Option<i64>,
    pub role: Role,
}

impl SplitRecord {
    fn positive(e: &Interaction) -> Self {
        Self {
            user_id: e.user_id,
            item_id: e.item_id,
            rating: Some(e.rating),
            timestamp: Some(e.timestamp),
            role: Role::Pos,
        }
    }

    fn negative(user_id: UserId, item_id: ItemId) -> Self {
        Self {
            user_id,
            item_id,
            rating: None,
            timestamp: None,
            role: Role::Neg,
        }
    }
}

fn eval_records(user_id: UserId, case: &EvalCase) -> impl Iterator<Item = SplitRecord> + '_ {
    std::iter::once(SplitRecord::positive(&case.positive))
        .chain(case.negatives.iter().map(move |&i| SplitRecord::negative(user_id, i)))
}

fn write_jsonl<I: IntoIterator<Item = SplitRecord>>(path: &Path, records: I) -> Result<()> {
    let wrap = |source| CorpusError::Write {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(wrap)?);
    for r in records {
        let line = serde_json::to_string(&r).expect("split records always serialize");
        writeln!(out, "{line}").map_err(wrap)?;
    }
    out.flush().map_err(wrap)
}

/// Write `train.jsonl`, `val.jsonl` and `test.jsonl` into `dir`, creating it
/// if needed.
pub fn write_split_jsonl(split: &SplitDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| CorpusError::Write {
        path: dir.to_path_buf(),
        source,
    })?;
    write_jsonl(
        &dir.join("train.jsonl"),
        split.train_events().map(SplitRecord::positive),
    )?;
    write_jsonl(
        &dir.join("val.jsonl"),
        split
            .users
            .iter()
            .flat_map(|u| eval_records(u.user_id, &u.validation)),
    )?;
    write_jsonl(
        &dir.join("test.jsonl"),
        split
            .users
            .iter()
            .flat_map(|u| eval_records(u.user_id, &u.test)),
    )
}

/// Item -> number of distinct users, over the training partition.
pub fn item_user_counts(split: &SplitDataset) -> BTreeMap<ItemId, usize> {
    let mut sets: BTreeMap<ItemId, BTreeSet<UserId>> = BTreeMap::new();
    for e in split.train_events() {
        sets.entry(e.item_id).or_default().insert(e.user_id);
    }
    sets.into_iter().map(|(k, v)| (k, v.len())).collect()
}
