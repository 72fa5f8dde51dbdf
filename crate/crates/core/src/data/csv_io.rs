use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use super::{Dataset, DatasetSchema, RatingExample};
use crate::error::{Error, Result};

/// Raw id as it appears in the file. Integer ids sort numerically and come
/// before any non-numeric id, so exported indices survive a round trip.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum RawId {
    Num(u64),
    Text(String),
}

impl RawId {
    fn parse(s: &str) -> Option<Self> {
        let s = s.trim();
        if s.is_empty() {
            return None;
        }
        Some(s.parse().map(RawId::Num).unwrap_or_else(|_| RawId::Text(s.to_string())))
    }
}

struct Row {
    user: RawId,
    item: RawId,
    rating: f64,
    title: String,
}

/// Reads `user_id,item_id,rating[,title]` rows. A leading `user_id` header
/// line is skipped. Ids are re-indexed contiguously in sorted order.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(file);

    let mut rows = Vec::new();
    for (n, record) in reader.records().enumerate() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(n as u64 + 1, |p| p.line());
            Error::Parse {
                path: path.to_path_buf(),
                line,
                message: e.to_string(),
            }
        })?;
        let line = record.position().map_or(n as u64 + 1, |p| p.line());
        if n == 0 && record.get(0).map(str::trim) == Some("user_id") {
            continue;
        }
        let bad = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        if !(3..=4).contains(&record.len()) {
            return Err(bad(format!("expected 3 or 4 fields, found {}", record.len())));
        }
        let user = RawId::parse(&record[0]).ok_or_else(|| bad("empty user_id".into()))?;
        let item = RawId::parse(&record[1]).ok_or_else(|| bad("empty item_id".into()))?;
        let rating: f64 = record[2]
            .trim()
            .parse()
            .map_err(|_| bad(format!("unparseable rating `{}`", &record[2])))?;
        if !rating.is_finite() {
            return Err(bad(format!("non-finite rating `{}`", &record[2])));
        }
        let title = record.get(3).unwrap_or("").to_string();
        rows.push(Row {
            user,
            item,
            rating,
            title,
        });
    }

    let users = index_ids(rows.iter().map(|r| &r.user));
    let items = index_ids(rows.iter().map(|r| &r.item));
    let mut titles = vec![String::new(); items.len()];
    let mut examples = Vec::with_capacity(rows.len());
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for row in rows {
        let item = items[&row.item];
        if titles[item].is_empty() && !row.title.is_empty() {
            titles[item] = row.title;
        }
        lo = lo.min(row.rating);
        hi = hi.max(row.rating);
        examples.push(RatingExample {
            user: users[&row.user],
            item,
            rating: row.rating,
        });
    }
    let rating_range = if examples.is_empty() { (0.0, 0.0) } else { (lo, hi) };
    Ok(Dataset {
        schema: DatasetSchema {
            n_users: users.len(),
            n_items: items.len(),
            rating_range,
            split_seed: 0,
        },
        examples,
        titles,
    })
}

fn index_ids<'a>(ids: impl Iterator<Item = &'a RawId>) -> BTreeMap<RawId, usize> {
    let mut map: BTreeMap<RawId, usize> = ids.map(|id| (id.clone(), 0)).collect();
    for (i, v) in map.values_mut().enumerate() {
        *v = i;
    }
    map
}

/// Writes a dataset in the format [`load_csv`] reads, with a header line.
pub fn write_csv(data: &Dataset, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["user_id", "item_id", "rating", "title"])?;
    for ex in &data.examples {
        w.write_record([
            ex.user.to_string(),
            ex.item.to_string(),
            ex.rating.to_string(),
            data.title(ex.item).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
