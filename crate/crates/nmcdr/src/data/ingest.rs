//! Parsing and dense indexing of one interaction domain.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{DataError, RawInteraction};

/// Declared input formats. Both carry the same four columns
/// (user, item, optional rating, optional timestamp).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputFormat {
    /// Tab-separated, `#` comment lines ignored.
    #[serde(rename = "tsv-ratings")]
    TsvRatings,
    /// Comma-separated with RFC-4180 quoting, `#` comment lines ignored.
    #[serde(rename = "csv-ratings")]
    CsvRatings,
}

impl FromStr for InputFormat {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, DataError> {
        match s {
            "tsv-ratings" => Ok(InputFormat::TsvRatings),
            "csv-ratings" => Ok(InputFormat::CsvRatings),
            other => Err(DataError::UnknownFormat(other.to_string())),
        }
    }
}

/// One indexed interaction: dense item id plus optional timestamp.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub item: usize,
    pub timestamp: Option<i64>,
}

/// Dense index over one domain. User and item ids are assigned by
/// lexicographic key order, so re-ingesting the same bytes (or any
/// permutation of the same lines) reproduces identical ids.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DomainIndex {
    users: Vec<String>,
    items: Vec<String>,
    /// Per user, sorted by item id.
    interactions: Vec<Vec<Interaction>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainStats {
    pub users: usize,
    pub items: usize,
    pub ratings: usize,
    pub density: f64,
}

impl DomainIndex {
    /// Dedupe, filter users below `min_interactions`, and index.
    /// Duplicate (user, item) pairs collapse to one edge keeping the latest
    /// timestamp.
    pub fn build(raw: &[RawInteraction], min_interactions: usize) -> Result<Self, DataError> {
        let mut edges: BTreeMap<(&str, &str), Option<i64>> = BTreeMap::new();
        for r in raw {
            let slot = edges.entry((r.user_key.as_str(), r.item_key.as_str())).or_insert(None);
            if r.timestamp > *slot {
                *slot = r.timestamp;
            }
        }

        let mut per_user: BTreeMap<&str, Vec<(&str, Option<i64>)>> = BTreeMap::new();
        for (&(u, i), &ts) in &edges {
            per_user.entry(u).or_default().push((i, ts));
        }
        per_user.retain(|_, v| v.len() >= min_interactions);
        if per_user.is_empty() {
            return Err(DataError::EmptyAfterFilter { min: min_interactions });
        }

        let users: Vec<String> = per_user.keys().map(|k| k.to_string()).collect();
        let mut item_keys: Vec<&str> = per_user.values().flatten().map(|(i, _)| *i).collect();
        item_keys.sort_unstable();
        item_keys.dedup();
        let items: Vec<String> = item_keys.iter().map(|k| k.to_string()).collect();
        let item_id: BTreeMap<&str, usize> =
            item_keys.iter().enumerate().map(|(id, &k)| (k, id)).collect();

        let interactions = per_user
            .values()
            .map(|list| {
                let mut row: Vec<Interaction> = list
                    .iter()
                    .map(|&(i, ts)| Interaction { item: item_id[i], timestamp: ts })
                    .collect();
                row.sort_unstable_by_key(|x| x.item);
                row
            })
            .collect();

        Ok(DomainIndex { users, items, interactions })
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn n_interactions(&self) -> usize {
        self.interactions.iter().map(Vec::len).sum()
    }

    pub fn user_key(&self, id: usize) -> &str {
        &self.users[id]
    }

    pub fn item_key(&self, id: usize) -> &str {
        &self.items[id]
    }

    pub fn user_id(&self, key: &str) -> Option<usize> {
        self.users.binary_search_by(|k| k.as_str().cmp(key)).ok()
    }

    pub fn item_id(&self, key: &str) -> Option<usize> {
        self.items.binary_search_by(|k| k.as_str().cmp(key)).ok()
    }

    pub fn user_keys(&self) -> &[String] {
        &self.users
    }

    /// Sorted-by-item interaction list for one user.
    pub fn interactions(&self, user: usize) -> &[Interaction] {
        &self.interactions[user]
    }

    /// Sorted item ids the user interacted with (train, validation and test
    /// alike).
    pub fn interacted_items(&self, user: usize) -> Vec<usize> {
        self.interactions[user].iter().map(|x| x.item).collect()
    }

    /// Flat edge list in canonical (user, item) order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, &Interaction)> {
        self.interactions.iter().enumerate().flat_map(|(u, l)| l.iter().map(move |x| (u, x)))
    }

    pub fn stats(&self) -> DomainStats {
        let ratings = self.n_interactions();
        let cells = self.n_users() * self.n_items();
        DomainStats {
            users: self.n_users(),
            items: self.n_items(),
            ratings,
            density: if cells == 0 { 0.0 } else { ratings as f64 / cells as f64 },
        }
    }

    /// Reconstruct the raw edge list (canonical order) for re-indexing.
    pub(crate) fn to_raw(&self) -> Vec<RawInteraction> {
        self.edges()
            .map(|(u, x)| RawInteraction {
                user_key: self.users[u].clone(),
                item_key: self.items[x.item].clone(),
                rating: Some(1.0),
                timestamp: x.timestamp,
            })
            .collect()
    }
}

/// Parse one file in the given format. Malformed lines abort with the line
/// number; comment (`#`) and blank lines are skipped.
pub fn parse_file(path: &Path, format: InputFormat) -> Result<Vec<RawInteraction>, DataError> {
    let display = path.display().to_string();
    let io_err = |source| DataError::Io { path: display.clone(), source };
    match format {
        InputFormat::TsvRatings => {
            let file = File::open(path).map_err(io_err)?;
            let mut out = Vec::new();
            for (no, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(io_err)?;
                let trimmed = line.trim_end_matches(['\r', '\n']);
                if trimmed.is_empty() || trimmed.starts_with('#') {
                    continue;
                }
                let fields: Vec<&str> = trimmed.split('\t').collect();
                out.push(interaction_from_fields(&fields, &display, no + 1)?);
            }
            Ok(out)
        }
        InputFormat::CsvRatings => {
            let mut reader = csv::ReaderBuilder::new()
                .has_headers(false)
                .flexible(true)
                .comment(Some(b'#'))
                .from_path(path)
                .map_err(|e| DataError::Malformed {
                    path: display.clone(),
                    line: 0,
                    msg: e.to_string(),
                })?;
            let mut out = Vec::new();
            for result in reader.records() {
                let record = result.map_err(|e| DataError::Malformed {
                    path: display.clone(),
                    line: e.position().map_or(0, |p| p.line() as usize),
                    msg: e.to_string(),
                })?;
                let line = record.position().map_or(0, |p| p.line() as usize);
                let fields: Vec<&str> = record.iter().collect();
                if fields.len() == 1 && fields[0].is_empty() {
                    continue;
                }
                out.push(interaction_from_fields(&fields, &display, line)?);
            }
            Ok(out)
        }
    }
}

fn interaction_from_fields(
    fields: &[&str],
    path: &str,
    line: usize,
) -> Result<RawInteraction, DataError> {
    let malformed = |msg: String| DataError::Malformed { path: path.to_string(), line, msg };
    if fields.len() < 2 || fields.len() > 4 {
        return Err(malformed(format!("expected 2-4 fields, found {}", fields.len())));
    }
    let user_key = fields[0].trim().to_string();
    let item_key = fields[1].trim().to_string();
    if user_key.is_empty() || item_key.is_empty() {
        return Err(malformed("empty user or item key".into()));
    }
    let rating = match fields.get(2).map(|s| s.trim()) {
        None | Some("") => None,
        Some(s) => Some(s.parse::<f64>().map_err(|_| malformed(format!("bad rating {s:?}")))?),
    };
    let timestamp = match fields.get(3).map(|s| s.trim()) {
        None | Some("") => None,
        Some(s) => Some(s.parse::<i64>().map_err(|_| malformed(format!("bad timestamp {s:?}")))?),
    };
    Ok(RawInteraction { user_key, item_key, rating, timestamp })
}

/// Parse, filter and index one domain; returns the index with its statistics
/// record.
pub fn ingest(
    path: &Path,
    format: InputFormat,
    min_interactions: usize,
) -> Result<(DomainIndex, DomainStats), DataError> {
    let raw = parse_file(path, format)?;
    let index = DomainIndex::build(&raw, min_interactions)?;
    let stats = index.stats();
    log::info!(
        "ingested {}: {} users, {} items, {} ratings (density {:.6})",
        path.display(),
        stats.users,
        stats.items,
        stats.ratings,
        stats.density
    );
    Ok((index, stats))
}
