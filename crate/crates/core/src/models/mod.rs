//! Embedding-table + MLP networks with readable hidden-state taps and
//! injection points. Students and teachers share this one type.
//!
//! Hidden states are indexed by layer: state 0 is the concatenated embedding
//! output, state `k` the ReLU output of hidden layer `k`. The last state is
//! the input of the prediction head.

mod checkpoint;
mod layers;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, DatasetSchema, FeatureView, DEFAULT_TEXT_BUCKETS};
use crate::error::{Error, Result};
use crate::tensor::{HasParams, Parameter, Tape, Tensor, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use layers::{Linear, Mlp};

pub const DEFAULT_EMBED_DIM: usize = 16;

/// Hidden widths of the student and the two categorical teachers.
pub const MLP_S: [usize; 2] = [128, 64];
pub const MLP_M: [usize; 2] = [512, 256];
pub const MLP_L: [usize; 2] = [1024, 512];

/// Every preset at full width, for shape-level checks.
pub fn preset_menu() -> Vec<(&'static str, FeatureView, Vec<usize>)> {
    vec![
        ("mlp-s", FeatureView::Categorical, MLP_S.to_vec()),
        ("mlp-m", FeatureView::Categorical, MLP_M.to_vec()),
        ("mlp-l", FeatureView::Categorical, MLP_L.to_vec()),
        ("text", FeatureView::HashedText, MLP_L.to_vec()),
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Student,
    Teacher,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub role: Role,
    pub hidden_sizes: Vec<usize>,
    pub feature_view: FeatureView,
    pub embed_dim: usize,
    pub text_buckets: usize,
    /// 1 for rating regression; more for a logit head.
    pub output_dim: usize,
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(name: impl Into<String>, role: Role, hidden_sizes: &[usize], seed: u64) -> Self {
        ModelSpec {
            name: name.into(),
            role,
            hidden_sizes: hidden_sizes.to_vec(),
            feature_view: FeatureView::Categorical,
            embed_dim: DEFAULT_EMBED_DIM,
            text_buckets: DEFAULT_TEXT_BUCKETS,
            output_dim: 1,
            seed,
        }
    }

    pub fn with_view(mut self, view: FeatureView) -> Self {
        self.feature_view = view;
        self
    }

    /// A named preset (`mlp-s`, `mlp-m`, `mlp-l`, `text`) with every hidden
    /// width divided by `width_divisor`.
    pub fn preset(name: &str, role: Role, width_divisor: usize, seed: u64) -> Result<Self> {
        let (_, view, sizes) = preset_menu()
            .into_iter()
            .find(|(n, _, _)| *n == name)
            .ok_or_else(|| {
                Error::Config(format!("unknown model `{name}` (mlp-s, mlp-m, mlp-l, text)"))
            })?;
        if width_divisor == 0 {
            return Err(Error::Config("width divisor must be positive".into()));
        }
        let sizes: Vec<usize> = sizes.iter().map(|w| (w / width_divisor).max(1)).collect();
        Ok(ModelSpec::new(name, role, &sizes, seed).with_view(view))
    }

    /// Width of hidden state `layer`.
    pub fn width(&self, layer: usize) -> Option<usize> {
        if layer == 0 {
            Some(2 * self.embed_dim)
        } else {
            self.hidden_sizes.get(layer - 1).copied()
        }
    }

    /// Closed-form parameter count for a schema.
    pub fn expected_param_count(&self, schema: &DatasetSchema) -> usize {
        let second_rows = match self.feature_view {
            FeatureView::Categorical => schema.n_items,
            FeatureView::HashedText => self.text_buckets,
        };
        let tables = (schema.n_users + second_rows) * self.embed_dim;
        let mut fan_in = 2 * self.embed_dim;
        let mut total = tables;
        for &w in &self.hidden_sizes {
            total += fan_in * w + w;
            fan_in = w;
        }
        total + fan_in * self.output_dim + self.output_dim
    }
}

/// Output of a (possibly injected) forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `[B, output_dim]`.
    pub prediction: Var,
    /// Hidden states by layer index; `None` for layers an injection skipped.
    pub taps: Vec<Option<Var>>,
}

impl Forward {
    pub fn tap(&self, layer: usize) -> Var {
        self.taps[layer].expect("tap recorded")
    }
}

/// Forward passes run by a model. A clone starts from the source's count
/// and then counts on its own.
#[derive(Debug, Default)]
struct PassCounter(AtomicU64);

impl Clone for PassCounter {
    fn clone(&self) -> Self {
        PassCounter(AtomicU64::new(self.0.load(Ordering::Relaxed)))
    }
}

#[derive(Clone, Debug)]
pub struct TapModel {
    spec: ModelSpec,
    passes: PassCounter,
    user_table: Parameter,
    /// Item table for the categorical view, token-bucket table for hashed text.
    item_table: Parameter,
    layers: Vec<Linear>,
    head: Linear,
}

/// Builds a freshly initialised model. Deterministic in `spec.seed`.
pub fn build(spec: &ModelSpec, schema: &DatasetSchema) -> Result<TapModel> {
    if spec.embed_dim == 0 || spec.output_dim == 0 || spec.hidden_sizes.contains(&0) {
        return Err(Error::Config(format!("model `{}`: zero width", spec.name)));
    }
    if schema.n_users == 0 {
        return Err(Error::Config("schema has no users".into()));
    }
    let second_rows = match spec.feature_view {
        FeatureView::Categorical => schema.n_items,
        FeatureView::HashedText => spec.text_buckets,
    };
    if second_rows == 0 {
        return Err(Error::Config(format!("model `{}`: empty item/token table", spec.name)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let emb_std = 0.1;
    let user_table = Parameter::new(
        format!("{}.user_table", spec.name),
        Tensor::normal(&[schema.n_users, spec.embed_dim], emb_std, &mut rng),
    );
    let item_table = Parameter::new(
        format!("{}.item_table", spec.name),
        Tensor::normal(&[second_rows, spec.embed_dim], emb_std, &mut rng),
    );
    let mut layers = Vec::with_capacity(spec.hidden_sizes.len());
    let mut fan_in = 2 * spec.embed_dim;
    for (k, &w) in spec.hidden_sizes.iter().enumerate() {
        layers.push(Linear::he_uniform(
            &format!("{}.layer{}", spec.name, k + 1),
            fan_in,
            w,
            &mut rng,
        ));
        fan_in = w;
    }
    let mut head = Linear::he_uniform(&format!("{}.head", spec.name), fan_in, spec.output_dim, &mut rng);
    if spec.output_dim == 1 {
        let (lo, hi) = schema.rating_range;
        head.bias.value_mut().data_mut()[0] = 0.5 * (lo + hi);
    }
    Ok(TapModel {
        spec: spec.clone(),
        passes: PassCounter::default(),
        user_table,
        item_table,
        layers,
        head,
    })
}

impl TapModel {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn feature_view(&self) -> FeatureView {
        self.spec.feature_view
    }

    /// Layer whose state questions replace: the embedding output.
    pub fn tap_in(&self) -> usize {
        0
    }

    /// Layer whose state feeds the answer augmenter: input of the head.
    pub fn tap_out(&self) -> usize {
        self.layers.len()
    }

    pub fn num_states(&self) -> usize {
        self.layers.len() + 1
    }

    pub fn width(&self, layer: usize) -> Option<usize> {
        self.spec.width(layer)
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut Linear {
        &mut self.head
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    /// Hidden state 0 for a batch.
    pub fn embed(&self, tape: &mut Tape, batch: &Batch) -> Result<Var> {
        for &u in &batch.users {
            if u >= self.user_table.shape()[0] {
                return Err(Error::OutOfVocab {
                    field: "user",
                    index: u,
                    vocab: self.user_table.shape()[0],
                });
            }
        }
        let users = tape.embedding_lookup(&self.user_table, &batch.users)?;
        let second = match self.spec.feature_view {
            FeatureView::Categorical => tape.embedding_lookup(&self.item_table, &batch.items)?,
            FeatureView::HashedText => {
                let bags = batch.bags(self.spec.text_buckets);
                tape.embedding_bag_mean(&self.item_table, &bags)?
            }
        };
        tape.concat_cols(&[users, second])
    }

    pub fn forward(&self, tape: &mut Tape, batch: &Batch) -> Result<Forward> {
        let x = self.embed(tape, batch)?;
        self.run_from(tape, x, 0)
    }

    /// Runs the network from `layer` onward with `injected` standing in for
    /// hidden state `layer`.
    pub fn forward_with_injection(&self, tape: &mut Tape, injected: Var, layer: usize) -> Result<Forward> {
        let expected = self.width(layer).ok_or_else(|| {
            Error::Precondition(format!(
                "model `{}` has no hidden state {layer} (states 0..={})",
                self.spec.name,
                self.tap_out()
            ))
        })?;
        let shape = tape.shape(injected);
        if shape.len() != 2 || shape[1] != expected {
            return Err(Error::InjectionWidth {
                layer,
                expected,
                got: shape.last().copied().unwrap_or(0),
            });
        }
        self.run_from(tape, injected, layer)
    }

    /// Forward passes run so far, injected or not.
    pub fn forward_passes(&self) -> u64 {
        self.passes.0.load(Ordering::Relaxed)
    }

    fn run_from(&self, tape: &mut Tape, state: Var, layer: usize) -> Result<Forward> {
        self.passes.0.fetch_add(1, Ordering::Relaxed);
        let mut taps = vec![None; self.num_states()];
        taps[layer] = Some(state);
        let mut h = state;
        for (k, lin) in self.layers.iter().enumerate().skip(layer) {
            let z = lin.forward(tape, h)?;
            h = tape.relu(z);
            taps[k + 1] = Some(h);
        }
        let prediction = self.head.forward(tape, h)?;
        Ok(Forward { prediction, taps })
    }

    /// Predictions for a batch without keeping a tape around.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, batch)?;
        Ok(tape.value(out.prediction).data().to_vec())
    }
}

impl HasParams for TapModel {
    fn params(&self) -> Vec<&Parameter> {
        let mut v = vec![&self.user_table, &self.item_table];
        for l in &self.layers {
            v.extend(l.params());
        }
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = vec![&mut self.user_table, &mut self.item_table];
        for l in &mut self.layers {
            v.extend(l.params_mut());
        }
        v.extend(self.head.params_mut());
        v
    }
}
