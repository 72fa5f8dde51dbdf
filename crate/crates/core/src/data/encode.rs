use serde::{Deserialize, Serialize};

use super::{fnv1a, DatasetSchema, RatingExample};
use crate::error::{Error, Result};

pub const DEFAULT_TEXT_BUCKETS: usize = 4096;

/// Which input features a model consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureView {
    /// User id and item id through embedding tables.
    Categorical,
    /// User id plus the item title as a bag of hashed tokens.
    HashedText,
}

impl std::str::FromStr for FeatureView {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "categorical" => Ok(FeatureView::Categorical),
            "hashed-text" => Ok(FeatureView::HashedText),
            other => Err(Error::Config(format!("unknown feature view `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ModelInput {
    Categorical { user: usize, item: usize },
    HashedText { user: usize, bag: Vec<usize> },
}

pub fn tokenize(title: &str) -> impl Iterator<Item = &str> {
    title.split_whitespace()
}

pub fn hash_token(token: &str) -> u64 {
    fnv1a(token.as_bytes())
}

/// Encodes one example for the given view; `buckets` sizes the token table.
pub fn encode(
    example: &RatingExample,
    title: &str,
    view: FeatureView,
    schema: &DatasetSchema,
    buckets: usize,
) -> Result<ModelInput> {
    if example.user >= schema.n_users {
        return Err(Error::OutOfVocab {
            field: "user",
            index: example.user,
            vocab: schema.n_users,
        });
    }
    Ok(match view {
        FeatureView::Categorical => {
            if example.item >= schema.n_items {
                return Err(Error::OutOfVocab {
                    field: "item",
                    index: example.item,
                    vocab: schema.n_items,
                });
            }
            ModelInput::Categorical {
                user: example.user,
                item: example.item,
            }
        }
        FeatureView::HashedText => ModelInput::HashedText {
            user: example.user,
            bag: tokenize(title)
                .map(|t| (hash_token(t) % buckets as u64) as usize)
                .collect(),
        },
    })
}
