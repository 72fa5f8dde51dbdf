use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetSchema, RatingExample};
use crate::error::{Error, Result};

const GLOBAL_MEAN: f64 = 3.0;
const RATING_RANGE: (f64, f64) = (1.0, 5.0);
const INTERACTION_SD: f64 = 0.8;
const BIAS_SD: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub latent_dim: usize,
    pub noise_sd: f64,
    pub n_ratings: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_users: 1000,
            n_items: 500,
            latent_dim: 8,
            noise_sd: 0.3,
            n_ratings: 50_000,
            seed: 0,
        }
    }
}

/// The generating factors, kept for oracle checks.
#[derive(Clone, Debug)]
pub struct SyntheticTruth {
    pub user_factors: Vec<Vec<f64>>,
    pub item_factors: Vec<Vec<f64>>,
    pub user_bias: Vec<f64>,
    pub item_bias: Vec<f64>,
    pub global_mean: f64,
    pub rating_range: (f64, f64),
}

impl SyntheticTruth {
    /// Noise-free rating, clamped like the generated data.
    pub fn predict(&self, user: usize, item: usize) -> f64 {
        let dot: f64 = self.user_factors[user]
            .iter()
            .zip(&self.item_factors[item])
            .map(|(a, b)| a * b)
            .sum();
        let raw = self.global_mean + self.user_bias[user] + self.item_bias[item] + dot;
        raw.clamp(self.rating_range.0, self.rating_range.1)
    }
}

/// Latent-factor ratings: `clamp(μ + b_u + b_i + ⟨u, v⟩ + ε)`.
///
/// Item titles spell out the sign of every item factor and of the item bias,
/// plus one token unique to the item, so a text-only view of the item still
/// carries most of the rating signal.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<(Dataset, SyntheticTruth)> {
    if cfg.n_users == 0 || cfg.n_items == 0 || cfg.latent_dim == 0 || cfg.n_ratings == 0 {
        return Err(Error::Config("synthetic counts must be positive".into()));
    }
    if cfg.n_ratings > cfg.n_users * cfg.n_items {
        return Err(Error::Config(format!(
            "{} ratings requested but only {} user/item pairs exist",
            cfg.n_ratings,
            cfg.n_users * cfg.n_items
        )));
    }
    if !(cfg.noise_sd >= 0.0 && cfg.noise_sd.is_finite()) {
        return Err(Error::Config("noise_sd must be finite and non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let factor_sd = (INTERACTION_SD.powi(2) / cfg.latent_dim as f64).powf(0.25);
    let factor = Normal::new(0.0, factor_sd).expect("valid sd");
    let bias = Normal::new(0.0, BIAS_SD).expect("valid sd");

    let draw_factors = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..cfg.latent_dim).map(|_| factor.sample(rng)).collect())
            .collect()
    };
    let user_factors = draw_factors(cfg.n_users, &mut rng);
    let item_factors = draw_factors(cfg.n_items, &mut rng);
    let user_bias: Vec<f64> = (0..cfg.n_users).map(|_| bias.sample(&mut rng)).collect();
    let item_bias: Vec<f64> = (0..cfg.n_items).map(|_| bias.sample(&mut rng)).collect();

    let truth = SyntheticTruth {
        user_factors,
        item_factors,
        user_bias,
        item_bias,
        global_mean: GLOBAL_MEAN,
        rating_range: RATING_RANGE,
    };

    let titles = (0..cfg.n_items)
        .map(|i| item_title(i, &truth.item_factors[i], truth.item_bias[i]))
        .collect();

    let noise = Normal::new(0.0, cfg.noise_sd.max(f64::MIN_POSITIVE)).expect("valid sd");
    let mut seen = HashSet::with_capacity(cfg.n_ratings);
    let mut examples = Vec::with_capacity(cfg.n_ratings);
    while examples.len() < cfg.n_ratings {
        let user = rng.random_range(0..cfg.n_users);
        let item = rng.random_range(0..cfg.n_items);
        if !seen.insert((user, item)) {
            continue;
        }
        let eps = if cfg.noise_sd > 0.0 {
            noise.sample(&mut rng)
        } else {
            0.0
        };
        let dot: f64 = truth.user_factors[user]
            .iter()
            .zip(&truth.item_factors[item])
            .map(|(a, b)| a * b)
            .sum();
        let raw = GLOBAL_MEAN + truth.user_bias[user] + truth.item_bias[item] + dot + eps;
        examples.push(RatingExample {
            user,
            item,
            rating: raw.clamp(RATING_RANGE.0, RATING_RANGE.1),
        });
    }

    let schema = DatasetSchema {
        n_users: cfg.n_users,
        n_items: cfg.n_items,
        rating_range: RATING_RANGE,
        split_seed: cfg.seed,
    };
    Ok((
        Dataset {
            schema,
            examples,
            titles,
        },
        truth,
    ))
}

const THEMES: [&str; 12] = [
    "space", "heist", "romance", "war", "noir", "musical", "western", "horror", "family", "sport",
    "court", "satire",
];

fn item_title(item: usize, factors: &[f64], bias: f64) -> String {
    let mut words = Vec::with_capacity(factors.len() + 2);
    for (k, f) in factors.iter().enumerate() {
        let theme = THEMES[k % THEMES.len()];
        let round = k / THEMES.len();
        let tone = if *f >= 0.0 { "bright" } else { "dark" };
        if round == 0 {
            words.push(format!("{tone}-{theme}"));
        } else {
            words.push(format!("{tone}-{theme}{round}"));
        }
    }
    words.push(if bias >= 0.0 { "acclaimed" } else { "panned" }.to_string());
    words.push(format!("m{item}"));
    words.join(" ")
}
