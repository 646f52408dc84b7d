//! Interaction-log ingestion, per-user chronological sequences, the
//! leave-last-two split, and fixed-length window sampling.

use std::collections::HashMap;
use std::io::{BufRead, Read, Write};

use rand::Rng;

use crate::error::{Error, Result};

/// Item and user index reserved for padding.
pub const PAD: usize = 0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionRecord {
    pub user: String,
    pub item: String,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Delimiter {
    Tab,
    /// `::`, as in the Movielens `ratings.dat` distribution.
    DoubleColon,
    Comma,
    Other(String),
}

impl Delimiter {
    fn as_str(&self) -> &str {
        match self {
            Delimiter::Tab => "\t",
            Delimiter::DoubleColon => "::",
            Delimiter::Comma => ",",
            Delimiter::Other(s) => s,
        }
    }
}

impl std::str::FromStr for Delimiter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "tab" | "tsv" | "\t" => Delimiter::Tab,
            "::" | "movielens" => Delimiter::DoubleColon,
            "," | "csv" | "comma" => Delimiter::Comma,
            "" => return Err(Error::Contract("empty delimiter".into())),
            other => Delimiter::Other(other.to_string()),
        })
    }
}

/// Line format: `user<D>item<D>timestamp` or `user<D>item<D>rating<D>timestamp`.
/// The rating column, when present, is ignored.
#[derive(Debug, Clone)]
pub struct FormatSpec {
    pub delimiter: Delimiter,
    pub strict: bool,
}

impl Default for FormatSpec {
    fn default() -> Self {
        FormatSpec {
            delimiter: Delimiter::Tab,
            strict: false,
        }
    }
}

impl FormatSpec {
    pub fn movielens() -> Self {
        FormatSpec {
            delimiter: Delimiter::DoubleColon,
            strict: false,
        }
    }
}

#[derive(Debug, Default)]
pub struct LoadReport {
    pub records: Vec<InteractionRecord>,
    pub malformed: usize,
    pub first_malformed_line: Option<usize>,
}

fn parse_line(line: &str, delim: &str) -> Option<InteractionRecord> {
    let fields: Vec<&str> = line.split(delim).map(str::trim).collect();
    let (user, item, ts) = match fields.as_slice() {
        [u, i, t] | [u, i, _, t] => (*u, *i, *t),
        _ => return None,
    };
    if user.is_empty() || item.is_empty() {
        return None;
    }
    let timestamp = ts.parse::<u64>().ok()?;
    Some(InteractionRecord {
        user: user.to_string(),
        item: item.to_string(),
        timestamp,
    })
}

/// Reads interactions in file order. Blank lines are skipped; lines that do not
/// parse are counted, and in strict mode the first one aborts the load.
pub fn load_interactions<R: BufRead>(source: R, spec: &FormatSpec) -> Result<LoadReport> {
    let delim = spec.delimiter.as_str();
    let mut report = LoadReport::default();
    for (n, line) in source.lines().enumerate() {
        let line = line?;
        let lineno = n + 1;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() {
            continue;
        }
        match parse_line(trimmed, delim) {
            Some(rec) => report.records.push(rec),
            None => {
                if spec.strict {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!("expected user{delim}item[{delim}rating]{delim}timestamp"),
                    });
                }
                report.malformed += 1;
                report.first_malformed_line.get_or_insert(lineno);
            }
        }
    }
    Ok(report)
}

/// Raw-id ↔ index bijections. Real users and items are numbered from 1.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdMaps {
    users: Vec<String>,
    items: Vec<String>,
    user_index: HashMap<String, usize>,
    item_index: HashMap<String, usize>,
}

impl IdMaps {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_raw(users: Vec<String>, items: Vec<String>) -> Result<Self> {
        let mut maps = IdMaps::new();
        for u in users {
            if maps.user_index.contains_key(&u) {
                return Err(Error::Cache(format!("duplicate user id {u:?}")));
            }
            maps.intern_user(&u);
        }
        for i in items {
            if maps.item_index.contains_key(&i) {
                return Err(Error::Cache(format!("duplicate item id {i:?}")));
            }
            maps.intern_item(&i);
        }
        Ok(maps)
    }

    pub fn intern_user(&mut self, raw: &str) -> usize {
        intern(&mut self.users, &mut self.user_index, raw)
    }

    pub fn intern_item(&mut self, raw: &str) -> usize {
        intern(&mut self.items, &mut self.item_index, raw)
    }

    pub fn user(&self, raw: &str) -> Option<usize> {
        self.user_index.get(raw).copied()
    }

    pub fn item(&self, raw: &str) -> Option<usize> {
        self.item_index.get(raw).copied()
    }

    pub fn user_raw(&self, index: usize) -> Option<&str> {
        index.checked_sub(1).and_then(|i| self.users.get(i)).map(String::as_str)
    }

    pub fn item_raw(&self, index: usize) -> Option<&str> {
        index.checked_sub(1).and_then(|i| self.items.get(i)).map(String::as_str)
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }
}

fn intern(names: &mut Vec<String>, index: &mut HashMap<String, usize>, raw: &str) -> usize {
    if let Some(&i) = index.get(raw) {
        return i;
    }
    names.push(raw.to_string());
    let i = names.len();
    index.insert(raw.to_string(), i);
    i
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSequence {
    pub user: usize,
    /// Item indices, oldest first.
    pub items: Vec<usize>,
}

/// Groups records per user and orders each user's items by timestamp, keeping
/// file order for ties. Unknown ids are interned in first-seen order.
pub fn build_sequences(records: &[InteractionRecord], maps: &mut IdMaps) -> Vec<UserSequence> {
    let mut per_user: Vec<Vec<(u64, usize, usize)>> = Vec::new();
    for (pos, rec) in records.iter().enumerate() {
        let u = maps.intern_user(&rec.user);
        let i = maps.intern_item(&rec.item);
        if per_user.len() < u {
            per_user.resize_with(u, Vec::new);
        }
        per_user[u - 1].push((rec.timestamp, pos, i));
    }
    per_user
        .into_iter()
        .enumerate()
        .filter(|(_, v)| !v.is_empty())
        .map(|(u, mut events)| {
            events.sort_by_key(|&(ts, pos, _)| (ts, pos));
            UserSequence {
                user: u + 1,
                items: events.into_iter().map(|(_, _, i)| i).collect(),
            }
        })
        .collect()
}

/// Iteratively drops users with fewer than `min_user` interactions and items
/// with fewer than `min_item`, then renumbers both densely, preserving order.
/// `(1, 1)` is the identity.
pub fn filter_min_counts(
    sequences: &[UserSequence],
    maps: &IdMaps,
    min_user: usize,
    min_item: usize,
) -> (Vec<UserSequence>, IdMaps) {
    let mut seqs: Vec<UserSequence> = sequences.to_vec();
    loop {
        let mut counts = vec![0usize; maps.n_items() + 1];
        for s in &seqs {
            for &i in &s.items {
                counts[i] += 1;
            }
        }
        let before: usize = seqs.iter().map(|s| s.items.len()).sum::<usize>() + seqs.len();
        for s in &mut seqs {
            s.items.retain(|&i| counts[i] >= min_item);
        }
        seqs.retain(|s| s.items.len() >= min_user.max(1));
        let after: usize = seqs.iter().map(|s| s.items.len()).sum::<usize>() + seqs.len();
        if after == before {
            break;
        }
    }

    let mut out_maps = IdMaps::new();
    for s in &seqs {
        out_maps.intern_user(maps.user_raw(s.user).expect("user known to source maps"));
    }
    let mut used = vec![false; maps.n_items() + 1];
    for s in &seqs {
        for &i in &s.items {
            used[i] = true;
        }
    }
    let mut remap = vec![PAD; maps.n_items() + 1];
    for (i, &u) in used.iter().enumerate().skip(1) {
        if u {
            remap[i] = out_maps.intern_item(maps.item_raw(i).expect("item known to source maps"));
        }
    }
    let seqs = seqs
        .into_iter()
        .map(|s| UserSequence {
            user: out_maps.user(maps.user_raw(s.user).unwrap()).unwrap(),
            items: s.items.into_iter().map(|i| remap[i]).collect(),
        })
        .collect();
    (seqs, out_maps)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct UserSplit {
    pub train: Vec<usize>,
    pub valid: Option<usize>,
    pub test: Option<usize>,
}

impl UserSplit {
    pub fn has_eval(&self) -> bool {
        self.valid.is_some() && self.test.is_some()
    }

    /// Items in chronological order across train, valid and test.
    pub fn full_sequence(&self) -> Vec<usize> {
        let mut v = self.train.clone();
        v.extend(self.valid);
        v.extend(self.test);
        v
    }
}

/// Leave-last-two split. `users[u]` belongs to user index `u`; slot 0 is the
/// empty padding user.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub n_users: usize,
    pub n_items: usize,
    pub users: Vec<UserSplit>,
    /// Sorted, deduplicated items each user ever interacted with.
    pub histories: Vec<Vec<usize>>,
}

impl DatasetSplit {
    pub fn history(&self, user: usize) -> &[usize] {
        &self.histories[user]
    }

    pub fn eval_users(&self) -> impl Iterator<Item = usize> + '_ {
        (1..=self.n_users).filter(|&u| self.users[u].has_eval())
    }

    /// Training interaction counts per item (index 0 unused).
    pub fn train_item_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.n_items + 1];
        for s in &self.users {
            for &i in &s.train {
                counts[i] += 1;
            }
        }
        counts
    }
}

pub fn split_leave_last_two(sequences: &[UserSequence], n_users: usize, n_items: usize) -> DatasetSplit {
    let mut users = vec![UserSplit::default(); n_users + 1];
    let mut histories = vec![Vec::new(); n_users + 1];
    for s in sequences {
        let items = &s.items;
        let split = if items.len() >= 3 {
            let t = items.len();
            UserSplit {
                train: items[..t - 2].to_vec(),
                valid: Some(items[t - 2]),
                test: Some(items[t - 1]),
            }
        } else {
            UserSplit {
                train: items.clone(),
                valid: None,
                test: None,
            }
        };
        let mut h = items.clone();
        h.sort_unstable();
        h.dedup();
        histories[s.user] = h;
        users[s.user] = split;
    }
    DatasetSplit {
        n_users,
        n_items,
        users,
        histories,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowConfig {
    pub max_len: usize,
    pub sampling_prob: f64,
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_len < 2 {
            return Err(Error::Contract(format!("max_len must be ≥ 2, got {}", self.max_len)));
        }
        if !(0.0..=1.0).contains(&self.sampling_prob) {
            return Err(Error::Contract(format!(
                "sampling_prob must lie in [0, 1], got {}",
                self.sampling_prob
            )));
        }
        Ok(())
    }
}

/// Most recent `t` items, left-padded with [`PAD`] to length `t`.
pub fn recent_window(items: &[usize], t: usize) -> Vec<usize> {
    let tail = &items[items.len().saturating_sub(t)..];
    let mut w = vec![PAD; t - tail.len()];
    w.extend_from_slice(tail);
    w
}

/// Model input for predicting the item after `items`: a leading pad followed by
/// the most recent `t − 1` items, left-padded. This is the layout every
/// training step sees, where position 0 is always padding.
pub fn inference_window(items: &[usize], t: usize) -> Vec<usize> {
    let mut w = vec![PAD];
    w.extend(recent_window(items, t - 1));
    w
}

/// Fixed-length training view of a user's history.
///
/// Short histories are left-padded. Longer ones use the most recent `max_len`
/// items, except that with probability `sampling_prob` the window instead
/// starts at a 1-based offset drawn uniformly from `[1, len − max_len]`.
/// The RNG is consulted only when a sampled window is possible.
pub fn pad_and_window<R: Rng + ?Sized>(items: &[usize], cfg: &WindowConfig, rng: &mut R) -> Result<Vec<usize>> {
    if items.is_empty() {
        return Err(Error::Contract("cannot window an empty sequence".into()));
    }
    let t = cfg.max_len;
    let len = items.len();
    if len <= t || cfg.sampling_prob == 0.0 {
        return Ok(recent_window(items, t));
    }
    if rng.gen::<f64>() < cfg.sampling_prob {
        let start = rng.gen_range(1..=len - t);
        Ok(items[start - 1..start - 1 + t].to_vec())
    } else {
        Ok(recent_window(items, t))
    }
}

/// Shift-by-one next-item pairs over a window, aligned to the model's `T`
/// positions: position `p` consumes `inputs[p]` and predicts `targets[p]`.
/// `inputs` is the window shifted right by one with a leading pad, so the last
/// position always holds the newest input item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingPairs {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub valid: Vec<bool>,
}

impl TrainingPairs {
    pub fn valid_steps(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn steps(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        (0..self.inputs.len())
            .filter(|&p| self.valid[p])
            .map(|p| (p, self.inputs[p], self.targets[p]))
    }
}

pub fn training_pairs(window: &[usize]) -> TrainingPairs {
    let t = window.len();
    let mut inputs = vec![PAD; t];
    inputs[1..].copy_from_slice(&window[..t - 1]);
    let targets = window.to_vec();
    let valid = inputs
        .iter()
        .zip(&targets)
        .map(|(&i, &o)| i != PAD && o != PAD)
        .collect();
    TrainingPairs {
        inputs,
        targets,
        valid,
    }
}

const CACHE_MAGIC: &[u8; 4] = b"SEQ1";

/// Writes the sequence cache: `SEQ1`, then little-endian `u32` user and item
/// counts, then for every user index `1..=n` a `u32` length and that many `u32`
/// item indices, then every raw user id and raw item id as a `u32` byte length
/// followed by UTF-8 bytes.
pub fn write_cache<W: Write>(mut out: W, sequences: &[UserSequence], maps: &IdMaps) -> Result<()> {
    let n = maps.n_users();
    let mut by_user: Vec<&[usize]> = vec![&[]; n + 1];
    for s in sequences {
        by_user[s.user] = &s.items;
    }
    out.write_all(CACHE_MAGIC)?;
    write_u32(&mut out, n)?;
    write_u32(&mut out, maps.n_items())?;
    for items in &by_user[1..] {
        write_u32(&mut out, items.len())?;
        for &i in *items {
            write_u32(&mut out, i)?;
        }
    }
    for raw in maps.users.iter().chain(&maps.items) {
        write_u32(&mut out, raw.len())?;
        out.write_all(raw.as_bytes())?;
    }
    Ok(())
}

pub fn read_cache<R: Read>(mut input: R) -> Result<(Vec<UserSequence>, IdMaps)> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != CACHE_MAGIC {
        return Err(Error::Cache("bad magic, not a sequence cache".into()));
    }
    let n = read_u32(&mut input)?;
    let m = read_u32(&mut input)?;
    let mut sequences = Vec::with_capacity(n);
    for u in 1..=n {
        let len = read_u32(&mut input)?;
        let mut items = Vec::with_capacity(len);
        for _ in 0..len {
            let i = read_u32(&mut input)?;
            if i == PAD || i > m {
                return Err(Error::Cache(format!("item index {i} out of range 1..={m}")));
            }
            items.push(i);
        }
        if !items.is_empty() {
            sequences.push(UserSequence { user: u, items });
        }
    }
    let mut read_names = |count: usize| -> Result<Vec<String>> {
        (0..count)
            .map(|_| {
                let len = read_u32(&mut input)?;
                let mut buf = vec![0u8; len];
                input.read_exact(&mut buf)?;
                String::from_utf8(buf).map_err(|e| Error::Cache(e.to_string()))
            })
            .collect()
    };
    let users = read_names(n)?;
    let items = read_names(m)?;
    Ok((sequences, IdMaps::from_raw(users, items)?))
}

fn write_u32<W: Write>(out: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Cache(format!("{v} does not fit in u32")))?;
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(input: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

/// Table-1 style corpus statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub avg_len: f64,
    pub max_len: usize,
}

pub fn corpus_stats(sequences: &[UserSequence]) -> CorpusStats {
    let interactions: usize = sequences.iter().map(|s| s.items.len()).sum();
    let mut distinct: Vec<usize> = sequences.iter().flat_map(|s| s.items.iter().copied()).collect();
    distinct.sort_unstable();
    distinct.dedup();
    CorpusStats {
        users: sequences.len(),
        items: distinct.len(),
        interactions,
        avg_len: if sequences.is_empty() {
            0.0
        } else {
            interactions as f64 / sequences.len() as f64
        },
        max_len: sequences.iter().map(|s| s.items.len()).max().unwrap_or(0),
    }
}
