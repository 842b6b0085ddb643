//! Interaction loading, temporal splits and batching.
//!
//! Files are tab-separated `user_id  item_id  rating_or_feedback  timestamp`
//! with an optional header line; lines starting with `#` are comments.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DfarError, Result};
use crate::rng::Rng;

pub const SECONDS_PER_DAY: i64 = 86_400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Interaction {
    pub user: u64,
    pub item: u64,
    pub timestamp: i64,
    /// 1 = positive (no-skip), 0 = negative (skip).
    pub feedback: u8,
}

/// Meaning of the third column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    /// Explicit ratings: above 3 is positive, below 2 negative, 2 and 3
    /// are dropped.
    Rating,
    /// Binary 0/1 feedback.
    #[default]
    Feedback,
}

impl FromStr for Format {
    type Err = DfarError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rating" => Ok(Format::Rating),
            "feedback" => Ok(Format::Feedback),
            other => Err(DfarError::Config(format!("unknown data format `{other}`"))),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Rating => "rating",
            Format::Feedback => "feedback",
        })
    }
}

pub fn rating_to_feedback(rating: f64) -> Option<u8> {
    if rating > 3.0 {
        Some(1)
    } else if rating < 2.0 {
        Some(0)
    } else {
        None
    }
}

/// Parses interactions in file order, keeping raw ids.
pub fn parse_interactions<R: BufRead>(reader: R, format: Format) -> Result<Vec<Interaction>> {
    let mut out = Vec::new();
    let mut seen_data = false;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = trimmed.split('\t').map(str::trim).collect();
        if !seen_data && cols.first().is_some_and(|c| c.parse::<u64>().is_err()) {
            // header line
            seen_data = true;
            continue;
        }
        seen_data = true;
        let parse_err = |msg: String| DfarError::Parse { line: lineno, msg };
        if cols.len() != 4 {
            return Err(parse_err(format!("expected 4 tab-separated columns, found {}", cols.len())));
        }
        let user = cols[0]
            .parse::<u64>()
            .map_err(|e| parse_err(format!("user id `{}`: {e}", cols[0])))?;
        let item = cols[1]
            .parse::<u64>()
            .map_err(|e| parse_err(format!("item id `{}`: {e}", cols[1])))?;
        let timestamp = cols[3]
            .parse::<i64>()
            .map_err(|e| parse_err(format!("timestamp `{}`: {e}", cols[3])))?;
        let feedback = match format {
            Format::Rating => {
                let r = cols[2]
                    .parse::<f64>()
                    .map_err(|e| parse_err(format!("rating `{}`: {e}", cols[2])))?;
                if !r.is_finite() {
                    return Err(parse_err(format!("rating `{}` is not finite", cols[2])));
                }
                match rating_to_feedback(r) {
                    Some(y) => y,
                    None => continue,
                }
            }
            Format::Feedback => match cols[2] {
                "0" => 0,
                "1" => 1,
                other => return Err(parse_err(format!("feedback `{other}` is not 0 or 1"))),
            },
        };
        out.push(Interaction {
            user,
            item,
            timestamp,
            feedback,
        });
    }
    Ok(out)
}

pub fn read_interactions(path: &Path, format: Format) -> Result<Vec<Interaction>> {
    let file = File::open(path)?;
    parse_interactions(BufReader::new(file), format)
}

/// Writes binary-feedback TSV with a header row.
pub fn write_interactions<W: Write>(mut out: W, rows: &[Interaction]) -> Result<()> {
    writeln!(out, "user_id\titem_id\tfeedback\ttimestamp")?;
    for r in rows {
        writeln!(out, "{}\t{}\t{}\t{}", r.user, r.item, r.feedback, r.timestamp)?;
    }
    Ok(())
}

/// Bijection between raw ids and dense indices starting at `offset`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct IdMap {
    offset: usize,
    raw: Vec<u64>,
    index: BTreeMap<u64, usize>,
}

impl IdMap {
    /// Dense indices assigned in ascending raw-id order.
    pub fn build(ids: impl IntoIterator<Item = u64>, offset: usize) -> Self {
        let mut raw: Vec<u64> = ids.into_iter().collect();
        raw.sort_unstable();
        raw.dedup();
        let index = raw.iter().enumerate().map(|(i, &r)| (r, i + offset)).collect();
        Self { offset, raw, index }
    }

    pub fn dense(&self, raw: u64) -> Option<usize> {
        self.index.get(&raw).copied()
    }

    pub fn raw(&self, dense: usize) -> Option<u64> {
        dense.checked_sub(self.offset).and_then(|i| self.raw.get(i).copied())
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn raw_ids(&self) -> &[u64] {
        &self.raw
    }

    /// Hex SHA-256 of the offset and the sorted raw ids.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.offset as u64).to_le_bytes());
        for r in &self.raw {
            h.update(r.to_le_bytes());
        }
        hex_digest(h)
    }
}

pub(crate) fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Interactions with dense ids: users from 0, items from 1 (0 is padding).
#[derive(Debug, Clone)]
pub struct Corpus {
    pub interactions: Vec<Interaction>,
    pub users: IdMap,
    pub items: IdMap,
}

impl Corpus {
    pub fn densify(raw: &[Interaction]) -> Self {
        let users = IdMap::build(raw.iter().map(|r| r.user), 0);
        let items = IdMap::build(raw.iter().map(|r| r.item), 1);
        let interactions = raw
            .iter()
            .map(|r| Interaction {
                user: users.dense(r.user).expect("mapped") as u64,
                item: items.dense(r.item).expect("mapped") as u64,
                ..*r
            })
            .collect();
        Self {
            interactions,
            users,
            items,
        }
    }

    /// Rows of the item table including the padding row.
    pub fn item_rows(&self) -> usize {
        self.items.len() + 1
    }
}

pub fn load_interactions(path: &Path, format: Format) -> Result<Corpus> {
    Ok(Corpus::densify(&read_interactions(path, format)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    /// Last calendar day: before 12:00 validation, from 12:00 test.
    LastDayNoon,
    /// Last calendar day test, the day before validation.
    #[default]
    LastTwoDays,
}

impl FromStr for SplitMode {
    type Err = DfarError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last-day-noon" => Ok(SplitMode::LastDayNoon),
            "last-two-days" => Ok(SplitMode::LastTwoDays),
            other => Err(DfarError::Config(format!("unknown split mode `{other}`"))),
        }
    }
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitMode::LastDayNoon => "last-day-noon",
            SplitMode::LastTwoDays => "last-two-days",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Part {
    Train,
    Validation,
    Test,
}

/// One user's events in time order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Timeline {
    pub user: usize,
    pub items: Vec<usize>,
    pub feedback: Vec<u8>,
    pub timestamps: Vec<i64>,
    pub n_train: usize,
    pub n_validation: usize,
}

impl Timeline {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// A prediction target with its history: events `..prefix_end` of the
/// user's timeline predict event `target`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Example {
    pub timeline: usize,
    pub prefix_end: usize,
    pub target: usize,
}

#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub timelines: Vec<Timeline>,
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
    /// Users with fewer than two training events; they give no training
    /// examples.
    pub short_users: usize,
    pub mode: SplitMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitOptions {
    pub mode: SplitMode,
    /// Only the final training event of each user becomes a target.
    pub last_target_only: bool,
}

impl Default for SplitOptions {
    fn default() -> Self {
        Self {
            mode: SplitMode::LastTwoDays,
            last_target_only: false,
        }
    }
}

/// Splits by calendar day (UTC) of the newest interaction.
///
/// Training targets slide over each user's training events. Validation
/// targets see the user's training events; test targets see training and
/// validation events, so no prefix ever reaches past its target's day.
pub fn temporal_split(interactions: &[Interaction], opts: SplitOptions) -> Result<SplitDataset> {
    let Some(last_ts) = interactions.iter().map(|r| r.timestamp).max() else {
        return Err(DfarError::DegenerateSplit("no interactions".into()));
    };
    let first_ts = interactions.iter().map(|r| r.timestamp).min().unwrap_or(last_ts);
    if first_ts == last_ts {
        return Err(DfarError::DegenerateSplit(
            "all interactions share one timestamp".into(),
        ));
    }
    let last_day = last_ts.div_euclid(SECONDS_PER_DAY);
    let part_of = |ts: i64| -> Part {
        let day = ts.div_euclid(SECONDS_PER_DAY);
        match opts.mode {
            SplitMode::LastDayNoon => {
                if day < last_day {
                    Part::Train
                } else if ts.rem_euclid(SECONDS_PER_DAY) < SECONDS_PER_DAY / 2 {
                    Part::Validation
                } else {
                    Part::Test
                }
            }
            SplitMode::LastTwoDays => {
                if day < last_day - 1 {
                    Part::Train
                } else if day == last_day - 1 {
                    Part::Validation
                } else {
                    Part::Test
                }
            }
        }
    };

    let mut by_user: BTreeMap<u64, Vec<(i64, usize, Interaction)>> = BTreeMap::new();
    for (i, r) in interactions.iter().enumerate() {
        by_user.entry(r.user).or_default().push((r.timestamp, i, *r));
    }

    let mut out = SplitDataset {
        timelines: Vec::with_capacity(by_user.len()),
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        short_users: 0,
        mode: opts.mode,
    };
    for (user, mut events) in by_user {
        events.sort_by_key(|&(ts, i, _)| (ts, i));
        let parts: Vec<Part> = events.iter().map(|e| part_of(e.0)).collect();
        let n_train = parts.iter().filter(|&&p| p == Part::Train).count();
        let n_validation = parts.iter().filter(|&&p| p == Part::Validation).count();
        let tl = out.timelines.len();
        let timeline = Timeline {
            user: user as usize,
            items: events.iter().map(|e| e.2.item as usize).collect(),
            feedback: events.iter().map(|e| e.2.feedback).collect(),
            timestamps: events.iter().map(|e| e.0).collect(),
            n_train,
            n_validation,
        };
        if n_train < 2 {
            out.short_users += 1;
        } else if opts.last_target_only {
            out.train.push(Example {
                timeline: tl,
                prefix_end: n_train - 1,
                target: n_train - 1,
            });
        } else {
            for k in 1..n_train {
                out.train.push(Example {
                    timeline: tl,
                    prefix_end: k,
                    target: k,
                });
            }
        }
        if n_train > 0 {
            for target in n_train..n_train + n_validation {
                out.validation.push(Example {
                    timeline: tl,
                    prefix_end: n_train,
                    target,
                });
            }
        }
        let history = n_train + n_validation;
        if history > 0 {
            for target in history..timeline.len() {
                out.test.push(Example {
                    timeline: tl,
                    prefix_end: history,
                    target,
                });
            }
        }
        out.timelines.push(timeline);
    }
    if out.train.is_empty() {
        return Err(DfarError::DegenerateSplit(
            "the training part holds no examples".into(),
        ));
    }
    Ok(out)
}

impl SplitDataset {
    pub fn examples(&self, part: Part) -> &[Example] {
        match part {
            Part::Train => &self.train,
            Part::Validation => &self.validation,
            Part::Test => &self.test,
        }
    }

    pub fn history_len(&self, ex: &Example) -> usize {
        ex.prefix_end
    }

    pub fn target_label(&self, ex: &Example) -> u8 {
        self.timelines[ex.timeline].feedback[ex.target]
    }
}

/// A sequence cut to `len` positions: the newest `len` events first-to-last,
/// followed by padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Padded {
    pub items: Vec<usize>,
    pub feedback: Vec<u8>,
    pub padded: Vec<bool>,
}

pub fn pad_truncate(items: &[usize], feedback: &[u8], len: usize) -> Padded {
    let start = items.len().saturating_sub(len);
    let real = items.len() - start;
    let mut out = Padded {
        items: items[start..].to_vec(),
        feedback: feedback[start..].to_vec(),
        padded: vec![false; real],
    };
    out.items.resize(len, 0);
    out.feedback.resize(len, 0);
    out.padded.resize(len, true);
    out
}

/// Padded stack of examples, row-major `B × t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub size: usize,
    pub len: usize,
    pub item_ids: Vec<usize>,
    pub feedback: Vec<u8>,
    pub padded: Vec<bool>,
    pub target_ids: Vec<usize>,
    pub target_labels: Vec<u8>,
    /// Dense user id per example.
    pub users: Vec<usize>,
    /// Real (unpadded) history length per example.
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn build(data: &SplitDataset, examples: &[Example], len: usize) -> Self {
        let mut b = Batch {
            size: examples.len(),
            len,
            item_ids: Vec::with_capacity(examples.len() * len),
            feedback: Vec::with_capacity(examples.len() * len),
            padded: Vec::with_capacity(examples.len() * len),
            target_ids: Vec::with_capacity(examples.len()),
            target_labels: Vec::with_capacity(examples.len()),
            users: Vec::with_capacity(examples.len()),
            lengths: Vec::with_capacity(examples.len()),
        };
        for ex in examples {
            let tl = &data.timelines[ex.timeline];
            let p = pad_truncate(&tl.items[..ex.prefix_end], &tl.feedback[..ex.prefix_end], len);
            b.item_ids.extend(p.items);
            b.feedback.extend(p.feedback);
            b.padded.extend(p.padded);
            b.target_ids.push(tl.items[ex.target]);
            b.target_labels.push(tl.feedback[ex.target]);
            b.users.push(tl.user);
            b.lengths.push(ex.prefix_end);
        }
        b
    }
}

/// Example order for one pass.
pub fn epoch_order(n: usize, shuffle: Option<&mut Rng>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(rng) = shuffle {
        rng.shuffle(&mut order);
    }
    order
}

/// Batches of `batch_size` examples in `order`; the last may be smaller.
pub fn batch_iter<'a>(
    data: &'a SplitDataset,
    examples: &'a [Example],
    order: &'a [usize],
    batch_size: usize,
    len: usize,
) -> impl Iterator<Item = Batch> + 'a {
    let batch_size = batch_size.max(1);
    order.chunks(batch_size).map(move |chunk| {
        let picked: Vec<Example> = chunk.iter().map(|&i| examples[i]).collect();
        Batch::build(data, &picked, len)
    })
}

/// Git-style content hash: SHA-256 of `"blob <len>\0"` followed by the bytes.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex_digest(h)
}
