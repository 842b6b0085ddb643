//! Synthetic interaction corpora with a planted feedback process.
//!
//! Each user likes `liked_topics` of the `n_topics` topics; items are split
//! evenly across topics. Feedback follows a two-state Markov chain with
//! transition matrix `p_<from>_<to>`, started from its stationary law. The
//! item of an event is then drawn given its feedback:
//!
//! * positive: an item of a liked topic;
//! * negative: if the last `fatigue_k` exposures all share one topic, an item
//!   of that topic (the user is tired of it), otherwise an item of a topic the
//!   user does not like;
//! * with probability `noise`, any item regardless of feedback.
//!
//! Events are spaced evenly over `days` calendar days starting at
//! `start_day` (days since the Unix epoch), `events_per_day` per user per day.
//! All draws come from the `synth` stream of `seed`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{Interaction, SECONDS_PER_DAY};
use crate::error::{DfarError, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_users: usize,
    pub n_items: usize,
    pub n_topics: usize,
    pub liked_topics: usize,
    pub p_neg_neg: f64,
    pub p_neg_pos: f64,
    pub p_pos_neg: f64,
    pub p_pos_pos: f64,
    pub fatigue_k: usize,
    pub noise: f64,
    pub days: usize,
    pub events_per_day: usize,
    pub start_day: i64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            n_users: 2000,
            n_items: 40,
            n_topics: 4,
            liked_topics: 1,
            p_neg_neg: 0.9,
            p_neg_pos: 0.1,
            p_pos_neg: 0.1,
            p_pos_pos: 0.9,
            fatigue_k: 3,
            noise: 0.05,
            days: 8,
            events_per_day: 2,
            start_day: 19_000,
        }
    }
}

const KEYS: [&str; 14] = [
    "seed",
    "n_users",
    "n_items",
    "n_topics",
    "liked_topics",
    "p_neg_neg",
    "p_neg_pos",
    "p_pos_neg",
    "p_pos_pos",
    "fatigue_k",
    "noise",
    "days",
    "events_per_day",
    "start_day",
];

/// Tolerance on transition-matrix row sums.
pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

impl SynthSpec {
    /// Parses `key = value` lines; `#` starts a comment. Missing keys keep
    /// their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| DfarError::Parse {
                line: i + 1,
                msg: format!("expected key = value, got `{line}`"),
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut spec = SynthSpec::default();
        for (k, v) in &map {
            spec.set(k, v)?;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| DfarError::Config(format!("{key}: cannot parse `{v}`")))
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "n_users" => self.n_users = num(key, value)?,
            "n_items" => self.n_items = num(key, value)?,
            "n_topics" => self.n_topics = num(key, value)?,
            "liked_topics" => self.liked_topics = num(key, value)?,
            "p_neg_neg" => self.p_neg_neg = num(key, value)?,
            "p_neg_pos" => self.p_neg_pos = num(key, value)?,
            "p_pos_neg" => self.p_pos_neg = num(key, value)?,
            "p_pos_pos" => self.p_pos_pos = num(key, value)?,
            "fatigue_k" => self.fatigue_k = num(key, value)?,
            "noise" => self.noise = num(key, value)?,
            "days" => self.days = num(key, value)?,
            "events_per_day" => self.events_per_day = num(key, value)?,
            "start_day" => self.start_day = num(key, value)?,
            other => return Err(DfarError::Config(format!("unknown synth key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("p_neg_neg", self.p_neg_neg),
            ("p_neg_pos", self.p_neg_pos),
            ("p_pos_neg", self.p_pos_neg),
            ("p_pos_pos", self.p_pos_pos),
            ("noise", self.noise),
        ];
        for (k, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(DfarError::Config(format!("{k} = {p} is not a probability")));
            }
        }
        for (row, sum) in [
            ("neg", self.p_neg_neg + self.p_neg_pos),
            ("pos", self.p_pos_neg + self.p_pos_pos),
        ] {
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(DfarError::Config(format!(
                    "transition row `{row}` sums to {sum}, not 1"
                )));
            }
        }
        if self.n_topics == 0 || self.n_items < self.n_topics {
            return Err(DfarError::Config(format!(
                "need 1 ≤ n_topics ≤ n_items, got {} topics and {} items",
                self.n_topics, self.n_items
            )));
        }
        if self.liked_topics == 0 || self.liked_topics >= self.n_topics {
            return Err(DfarError::Config(format!(
                "liked_topics must be in 1..{}, got {}",
                self.n_topics, self.liked_topics
            )));
        }
        if self.fatigue_k == 0 || self.days == 0 || self.events_per_day == 0 {
            return Err(DfarError::Config(
                "fatigue_k, days and events_per_day must be ≥ 1".into(),
            ));
        }
        if self.events_per_day as i64 > SECONDS_PER_DAY {
            return Err(DfarError::Config("events_per_day exceeds one per second".into()));
        }
        Ok(())
    }

    /// `key = value` lines in canonical key order.
    pub fn to_lines(&self) -> Vec<String> {
        let json = serde_json::to_value(self).expect("serializable");
        KEYS.iter()
            .map(|k| format!("{k} = {}", json[k]))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for l in self.to_lines() {
            let _ = writeln!(s, "{l}");
        }
        s
    }

    /// Topic of a raw item id (items are `1..=n_items`).
    pub fn topic_of(&self, item: u64) -> usize {
        ((item as usize - 1) * self.n_topics) / self.n_items
    }

    fn topic_range(&self, topic: usize) -> (usize, usize) {
        // inverse of `topic_of`: items i with ⌊(i-1)·T/N⌋ = topic
        let lo = (topic * self.n_items).div_ceil(self.n_topics) + 1;
        let hi = ((topic + 1) * self.n_items).div_ceil(self.n_topics);
        (lo, hi)
    }

    fn item_in(&self, topic: usize, rng: &mut Rng) -> u64 {
        let (lo, hi) = self.topic_range(topic);
        (lo + rng.below(hi - lo + 1)) as u64
    }
}

/// Generates the corpus, ordered by timestamp then user.
pub fn synth_generate(spec: &SynthSpec) -> Result<Vec<Interaction>> {
    spec.validate()?;
    let mut rng = Rng::stream(spec.seed, "synth");
    let per_user = spec.days * spec.events_per_day;
    let spacing = SECONDS_PER_DAY / spec.events_per_day as i64;
    let stationary_pos = {
        let denom = spec.p_neg_pos + spec.p_pos_neg;
        if denom > 0.0 {
            spec.p_neg_pos / denom
        } else {
            0.5
        }
    };
    let mut rows = Vec::with_capacity(spec.n_users * per_user);
    for user in 0..spec.n_users {
        let mut topics: Vec<usize> = (0..spec.n_topics).collect();
        rng.shuffle(&mut topics);
        let (liked, disliked) = topics.split_at(spec.liked_topics);
        let mut recent: Vec<usize> = Vec::with_capacity(per_user);
        let mut y = u8::from(rng.bernoulli(stationary_pos));
        for k in 0..per_user {
            if k > 0 {
                let p_pos = if y == 1 { spec.p_pos_pos } else { spec.p_neg_pos };
                y = u8::from(rng.bernoulli(p_pos));
            }
            let item = if rng.bernoulli(spec.noise) {
                (1 + rng.below(spec.n_items)) as u64
            } else if y == 1 {
                spec.item_in(liked[rng.below(liked.len())], &mut rng)
            } else {
                let tail = &recent[recent.len().saturating_sub(spec.fatigue_k)..];
                let fatigued = tail.len() == spec.fatigue_k && tail.iter().all(|&t| t == tail[0]);
                let topic = if fatigued {
                    tail[0]
                } else {
                    disliked[rng.below(disliked.len())]
                };
                spec.item_in(topic, &mut rng)
            };
            recent.push(spec.topic_of(item));
            let day = spec.start_day + (k / spec.events_per_day) as i64;
            let slot = (k % spec.events_per_day) as i64;
            let jitter = (user as i64 * 37) % spacing.min(3600);
            rows.push(Interaction {
                user: user as u64,
                item,
                timestamp: day * SECONDS_PER_DAY + slot * spacing + jitter,
                feedback: y,
            });
        }
    }
    rows.sort_by_key(|r| (r.timestamp, r.user));
    Ok(rows)
}
