//! Rating datasets: synthetic latent-factor generation, CSV ingestion,
//! feature encoding and deterministic train/test splits.

mod csv_io;
mod encode;
mod synthetic;

use serde::{Deserialize, Serialize};

pub use csv_io::{load_csv, write_csv};
pub use encode::{encode, hash_token, tokenize, FeatureView, ModelInput, DEFAULT_TEXT_BUCKETS};
pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticTruth};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub(crate) fn fnv1a_start() -> u64 {
    FNV_OFFSET
}

pub(crate) fn fnv1a_extend(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// 64-bit FNV-1a; stable across platforms.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    fnv1a_extend(FNV_OFFSET, bytes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingExample {
    pub user: usize,
    pub item: usize,
    pub rating: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub n_users: usize,
    pub n_items: usize,
    pub rating_range: (f64, f64),
    pub split_seed: u64,
}

/// Percentage of examples assigned to the training split.
pub const TRAIN_PERCENT: u64 = 80;

impl DatasetSchema {
    /// True when the example keyed by `(user, item)` belongs to the train split.
    pub fn is_train(&self, user: usize, item: usize) -> bool {
        let mut key = [0u8; 24];
        key[..8].copy_from_slice(&(user as u64).to_le_bytes());
        key[8..16].copy_from_slice(&(item as u64).to_le_bytes());
        key[16..].copy_from_slice(&self.split_seed.to_le_bytes());
        fnv1a(&key) % 100 < TRAIN_PERCENT
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub schema: DatasetSchema,
    pub examples: Vec<RatingExample>,
    /// Title per item index; empty strings when unknown.
    pub titles: Vec<String>,
}

/// Example indices of each split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn title(&self, item: usize) -> &str {
        self.titles.get(item).map_or("", String::as_str)
    }

    pub fn split(&self) -> Split {
        let (train, test) = (0..self.examples.len()).partition(|&i| {
            let ex = &self.examples[i];
            self.schema.is_train(ex.user, ex.item)
        });
        Split { train, test }
    }

    pub fn mean_rating(&self, indices: &[usize]) -> f64 {
        if indices.is_empty() {
            return 0.0;
        }
        indices.iter().map(|&i| self.examples[i].rating).sum::<f64>() / indices.len() as f64
    }

    /// Token hashes of every item title, computed once per dataset.
    pub fn title_hashes(&self) -> Vec<Vec<u64>> {
        self.titles
            .iter()
            .map(|t| tokenize(t).map(hash_token).collect())
            .collect()
    }
}

/// A mini-batch in both feature views; each model reads the view it needs.
#[derive(Clone, Debug, Default)]
pub struct Batch {
    pub users: Vec<usize>,
    pub items: Vec<usize>,
    pub token_hashes: Vec<Vec<u64>>,
    pub targets: Vec<f64>,
}

impl Batch {
    pub fn from_indices(data: &Dataset, hashes: &[Vec<u64>], indices: &[usize]) -> Self {
        let mut b = Batch {
            users: Vec::with_capacity(indices.len()),
            items: Vec::with_capacity(indices.len()),
            token_hashes: Vec::with_capacity(indices.len()),
            targets: Vec::with_capacity(indices.len()),
        };
        for &i in indices {
            let ex = &data.examples[i];
            b.users.push(ex.user);
            b.items.push(ex.item);
            b.token_hashes
                .push(hashes.get(ex.item).cloned().unwrap_or_default());
            b.targets.push(ex.rating);
        }
        b
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Token-bucket bags for a table of `buckets` rows.
    pub fn bags(&self, buckets: usize) -> Vec<Vec<usize>> {
        self.token_hashes
            .iter()
            .map(|hs| hs.iter().map(|h| (h % buckets as u64) as usize).collect())
            .collect()
    }
}
