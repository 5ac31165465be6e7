//! Interaction logs and their on-disk formats.
//!
//! Two line formats are accepted:
//!
//! * `ml1m`: `user::item::rating::timestamp`, all integers.
//! * `amazon_csv`: `user,item,rating,timestamp` where user and item are
//!   arbitrary strings without commas. A first line starting with `user` is
//!   treated as a header. Rating may be fractional.
//!
//! Blank lines are ignored. Raw ids are remapped to dense indices in sorted
//! order (numeric for `ml1m`, lexicographic for `amazon_csv`); the inverse
//! mapping is kept in [`InteractionLog::user_ids`] / [`InteractionLog::item_ids`].

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogFormat {
    Ml1m,
    AmazonCsv,
}

impl FromStr for LogFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ml1m" => Ok(LogFormat::Ml1m),
            "amazon_csv" => Ok(LogFormat::AmazonCsv),
            other => Err(Error::invalid(format!("unknown log format `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interaction {
    pub user: u32,
    pub item: u32,
    pub rating: f32,
    pub timestamp: i64,
}

/// A deduplicated implicit-feedback log with dense ids.
#[derive(Debug, Clone)]
pub struct InteractionLog {
    /// Sorted by `(user, timestamp, item)`.
    pub interactions: Vec<Interaction>,
    pub num_users: usize,
    pub num_items: usize,
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    /// `1 − interactions / (users · items)`.
    pub sparsity: f64,
}

/// A record before id remapping.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub user: String,
    pub item: String,
    pub rating: f32,
    pub timestamp: i64,
}

impl InteractionLog {
    /// Builds a log from raw records, deduplicating `(user, item)` pairs by
    /// keeping the latest timestamp (later records win ties).
    pub fn from_records(records: Vec<RawRecord>, numeric_ids: bool) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Missing("interaction log has no records".into()));
        }
        let sort_ids = |ids: Vec<&String>| -> Vec<String> {
            let mut ids: Vec<String> = ids.into_iter().cloned().collect();
            ids.sort();
            ids.dedup();
            if numeric_ids {
                ids.sort_by_key(|s| s.parse::<i64>().unwrap_or(i64::MAX));
            }
            ids
        };
        let user_ids = sort_ids(records.iter().map(|r| &r.user).collect());
        let item_ids = sort_ids(records.iter().map(|r| &r.item).collect());
        let user_index: HashMap<&str, u32> = user_ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i as u32))
            .collect();
        let item_index: HashMap<&str, u32> = item_ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i as u32))
            .collect();

        let mut latest: BTreeMap<(u32, u32), Interaction> = BTreeMap::new();
        for r in &records {
            let it = Interaction {
                user: user_index[r.user.as_str()],
                item: item_index[r.item.as_str()],
                rating: r.rating,
                timestamp: r.timestamp,
            };
            match latest.get(&(it.user, it.item)) {
                Some(prev) if prev.timestamp > it.timestamp => {}
                _ => {
                    latest.insert((it.user, it.item), it);
                }
            }
        }
        let mut interactions: Vec<Interaction> = latest.into_values().collect();
        interactions.sort_by_key(|i| (i.user, i.timestamp, i.item));
        Ok(Self {
            interactions,
            num_users: user_ids.len(),
            num_items: item_ids.len(),
            user_ids,
            item_ids,
        })
    }

    pub fn stats(&self) -> LogStats {
        let cells = self.num_users as f64 * self.num_items as f64;
        LogStats {
            users: self.num_users,
            items: self.num_items,
            interactions: self.interactions.len(),
            sparsity: 1.0 - self.interactions.len() as f64 / cells,
        }
    }

    /// Items of every user in `(timestamp, item)` order.
    pub fn user_histories(&self) -> Vec<Vec<Interaction>> {
        let mut out = vec![Vec::new(); self.num_users];
        for it in &self.interactions {
            out[it.user as usize].push(*it);
        }
        out
    }

    pub fn item_index(&self, raw: &str) -> Option<u32> {
        // item_ids is sorted, but numerically for ml1m; fall back to a scan
        self.item_ids.iter().position(|s| s == raw).map(|i| i as u32)
    }
}

fn parse_line(line: &str, format: LogFormat) -> std::result::Result<RawRecord, String> {
    let fields: Vec<&str> = match format {
        LogFormat::Ml1m => line.split("::").collect(),
        LogFormat::AmazonCsv => line.split(',').collect(),
    };
    if fields.len() != 4 {
        return Err(format!("expected 4 fields, found {}", fields.len()));
    }
    let (user, item) = (fields[0].trim(), fields[1].trim());
    if user.is_empty() || item.is_empty() {
        return Err("empty user or item id".into());
    }
    if format == LogFormat::Ml1m {
        for (name, v) in [("user", user), ("item", item)] {
            v.parse::<i64>()
                .map_err(|_| format!("{name} id `{v}` is not an integer"))?;
        }
    }
    let rating: f32 = fields[2]
        .trim()
        .parse()
        .map_err(|_| format!("bad rating `{}`", fields[2]))?;
    let ts = fields[3].trim();
    let timestamp: i64 = ts
        .parse()
        .or_else(|_| ts.parse::<f64>().map(|v| v as i64))
        .map_err(|_| format!("bad timestamp `{ts}`"))?;
    if !rating.is_finite() {
        return Err("non-finite rating".into());
    }
    Ok(RawRecord {
        user: user.to_string(),
        item: item.to_string(),
        rating,
        timestamp,
    })
}

/// Parses a log from any reader; `origin` is used in error messages.
pub fn parse_interactions<R: BufRead>(reader: R, format: LogFormat, origin: &str) -> Result<InteractionLog> {
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(origin, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if idx == 0 && format == LogFormat::AmazonCsv && trimmed.to_ascii_lowercase().starts_with("user") {
            continue;
        }
        let rec = parse_line(trimmed, format).map_err(|message| Error::Parse {
            path: origin.to_string(),
            line: idx + 1,
            message,
        })?;
        records.push(rec);
    }
    InteractionLog::from_records(records, format == LogFormat::Ml1m)
}

pub fn load_interactions(path: impl AsRef<Path>, format: LogFormat) -> Result<InteractionLog> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(BufReader::new(file), format, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str, format: LogFormat) -> Result<InteractionLog> {
        parse_interactions(text.as_bytes(), format, "mem")
    }

    #[test]
    fn toy_ml1m() {
        let log = parse("0::0::5::10\n0::1::4::20\n", LogFormat::Ml1m).unwrap();
        let s = log.stats();
        assert_eq!((s.users, s.items, s.interactions), (1, 2, 2));
        assert_eq!(s.sparsity, 0.0);
    }

    #[test]
    fn malformed_line_reports_number() {
        let err = parse("1::2::3::4\n1::x::3::4\n", LogFormat::Ml1m).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
        assert!(matches!(
            parse("1::2::3\n", LogFormat::Ml1m),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn duplicates_keep_latest() {
        let log = parse("5::7::1::30\n5::7::4::10\n5::8::2::20\n", LogFormat::Ml1m).unwrap();
        assert_eq!(log.interactions.len(), 2);
        let it = log.interactions.iter().find(|i| i.item == 0).unwrap();
        assert_eq!((it.timestamp, it.rating), (30, 1.0));
    }

    #[test]
    fn numeric_remap_is_sorted_bijection() {
        let log = parse("10::100::1::1\n2::9::1::2\n33::100::1::3\n", LogFormat::Ml1m).unwrap();
        assert_eq!(log.user_ids, vec!["2", "10", "33"]);
        assert_eq!(log.item_ids, vec!["9", "100"]);
        assert_eq!(log.item_index("100"), Some(1));
    }

    #[test]
    fn amazon_with_header_and_string_ids() {
        let text = "user,item,rating,timestamp\nA1X,B00Z,5.0,1400000000\nA2Y,B00Z,3.0,1400000100\nA1X,B01Q,4.0,1400000200\n";
        let log = parse(text, LogFormat::AmazonCsv).unwrap();
        assert_eq!((log.num_users, log.num_items), (2, 2));
        assert_eq!(log.user_ids, vec!["A1X", "A2Y"]);
    }
}
