//! Differentiable classification models over flat parameter vectors.
//!
//! Models are deliberately dense and small (multinomial logistic regression
//! and fully-connected MLPs) so that exact gradients, Fisher matrices, and
//! finite-difference oracles stay tractable. Parameters live in one flat
//! vector with an explicit layout table, which turns Fisher diagonals,
//! natural-gradient steps, and quadratic anchor penalties into plain vector
//! arithmetic.

mod binary;
mod classifier;
mod gaussian;
mod optim;
mod train;

pub use binary::BinaryLogistic;
pub use classifier::{
    batch_loss_grad, grad_log_likelihood, input_grad, log_likelihood, predict,
};
pub use gaussian::GaussianLinearModel;
pub use optim::Adam;
pub use train::{train, train_detailed, validation_split, OptimizerConfig, TrainOutcome};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// A labelled example: an input vector with intensities in `[0, 1]`, a class
/// label, and a stable identifier that survives subsampling and corruption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub input: Vec<f64>,
    pub label: usize,
    pub id: u64,
}

impl Example {
    pub fn new(input: Vec<f64>, label: usize, id: u64) -> Self {
        Example { input, label, id }
    }
}

/// An ordered collection of examples with a known class count and an
/// optional per-example corruption flag (ground truth for detection metrics).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    examples: Vec<Example>,
    corruption_mask: Option<Vec<bool>>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(examples: Vec<Example>, num_classes: usize) -> Result<Self> {
        let mut seen = std::collections::HashSet::with_capacity(examples.len());
        for ex in &examples {
            if !seen.insert(ex.id) {
                return Err(CoreError::invalid_config(format!(
                    "duplicate example id {}",
                    ex.id
                )));
            }
            if ex.label >= num_classes {
                return Err(CoreError::invalid_config(format!(
                    "example {} has label {} but num_classes is {}",
                    ex.id, ex.label, num_classes
                )));
            }
        }
        Ok(Dataset {
            examples,
            corruption_mask: None,
            num_classes,
        })
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.examples.len() {
            return Err(CoreError::DimensionMismatch {
                axis: "corruption_mask".into(),
                expected: self.examples.len(),
                got: mask.len(),
            });
        }
        self.corruption_mask = Some(mask);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn corruption_mask(&self) -> Option<&[bool]> {
        self.corruption_mask.as_deref()
    }

    /// Ids of examples flagged as corrupted, empty when no mask is present.
    pub fn corrupted_ids(&self) -> std::collections::BTreeSet<u64> {
        match &self.corruption_mask {
            None => Default::default(),
            Some(mask) => self
                .examples
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|(ex, _)| ex.id)
                .collect(),
        }
    }

    /// Replaces the example list wholesale, carrying the mask when the caller
    /// provides one of matching length.
    pub(crate) fn replace_examples(
        &self,
        examples: Vec<Example>,
        mask: Option<Vec<bool>>,
    ) -> Result<Self> {
        let ds = Dataset::new(examples, self.num_classes)?;
        match mask {
            Some(m) => ds.with_mask(m),
            None => Ok(ds),
        }
    }

    /// New dataset holding only the examples whose id passes the predicate.
    /// The corruption mask is filtered in lockstep.
    pub fn filter_by_id(&self, mut keep: impl FnMut(u64) -> bool) -> Dataset {
        let mut examples = Vec::new();
        let mut mask = self.corruption_mask.as_ref().map(|_| Vec::new());
        for (i, ex) in self.examples.iter().enumerate() {
            if keep(ex.id) {
                examples.push(ex.clone());
                if let (Some(m), Some(src)) = (mask.as_mut(), self.corruption_mask.as_ref()) {
                    m.push(src[i]);
                }
            }
        }
        Dataset {
            examples,
            corruption_mask: mask,
            num_classes: self.num_classes,
        }
    }

    /// Dataset minus the examples whose ids appear in `ids`.
    pub fn remove_ids(&self, ids: &std::collections::BTreeSet<u64>) -> Dataset {
        self.filter_by_id(|id| !ids.contains(&id))
    }

    /// Dataset restricted to the examples whose ids appear in `ids`.
    pub fn keep_ids(&self, ids: &std::collections::BTreeSet<u64>) -> Dataset {
        self.filter_by_id(|id| ids.contains(&id))
    }
}

/// One named tensor in the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

impl LayoutEntry {
    pub fn size(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Flat real vector of model parameters plus the layout table mapping it
/// back to named tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub values: Vec<f64>,
    pub layout: Vec<LayoutEntry>,
}

impl ParameterVector {
    pub fn new(values: Vec<f64>, layout: Vec<LayoutEntry>) -> Result<Self> {
        let total: usize = layout.iter().map(|e| e.size()).sum();
        if total != values.len() {
            return Err(CoreError::DimensionMismatch {
                axis: "parameter layout".into(),
                expected: total,
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite {
                context: format!("parameter vector at index {i}"),
            });
        }
        Ok(ParameterVector { values, layout })
    }

    pub fn zeros_like(&self) -> ParameterVector {
        ParameterVector {
            values: vec![0.0; self.values.len()],
            layout: self.layout.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    MultinomialLogistic,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Tanh,
}

/// Architecture description: a linear softmax classifier or a dense MLP.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub hidden_layers: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_activation() -> Activation {
    Activation::Relu
}

impl ModelSpec {
    pub fn logistic(input_dim: usize, num_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::MultinomialLogistic,
            input_dim,
            num_classes,
            hidden_layers: Vec::new(),
            activation: Activation::Relu,
        }
    }

    pub fn mlp(
        input_dim: usize,
        hidden_layers: Vec<usize>,
        num_classes: usize,
        activation: Activation,
    ) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp,
            input_dim,
            num_classes,
            hidden_layers,
            activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes == 0 {
            return Err(CoreError::invalid_config(
                "input_dim and num_classes must be positive",
            ));
        }
        if self.hidden_layers.iter().any(|&w| w == 0) {
            return Err(CoreError::invalid_config("hidden layer widths must be positive"));
        }
        if self.kind == ModelKind::MultinomialLogistic && !self.hidden_layers.is_empty() {
            return Err(CoreError::invalid_config(
                "multinomial-logistic models take no hidden layers",
            ));
        }
        Ok(())
    }

    /// Layer dimensions from input to logits.
    pub(crate) fn dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_layers.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_layers);
        dims.push(self.num_classes);
        dims
    }

    pub fn param_layout(&self) -> Vec<LayoutEntry> {
        let dims = self.dims();
        let mut layout = Vec::new();
        for i in 0..dims.len() - 1 {
            layout.push(LayoutEntry {
                name: format!("w{}", i + 1),
                shape: vec![dims[i + 1], dims[i]],
            });
            layout.push(LayoutEntry {
                name: format!("b{}", i + 1),
                shape: vec![dims[i + 1]],
            });
        }
        layout
    }

    pub fn param_count(&self) -> usize {
        self.param_layout().iter().map(|e| e.size()).sum()
    }

    /// Seeded uniform fan-in initialisation: weights drawn from
    /// `U[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
    pub fn init_params(&self, seed: u64) -> ParameterVector {
        use rand::distributions::{Distribution, Uniform};
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let dims = self.dims();
        let mut values = Vec::with_capacity(self.param_count());
        for i in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[i], dims[i + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            for _ in 0..fan_in * fan_out {
                values.push(dist.sample(&mut rng));
            }
            values.extend(std::iter::repeat(0.0).take(fan_out));
        }
        ParameterVector {
            values,
            layout: self.param_layout(),
        }
    }

    pub fn zero_params(&self) -> ParameterVector {
        ParameterVector {
            values: vec![0.0; self.param_count()],
            layout: self.param_layout(),
        }
    }
}

/// A differentiable per-example log-likelihood over a flat parameter vector.
///
/// [`ModelSpec`] implements this for softmax classifiers; the posterior,
/// identify, and treat machinery is generic over it so that alternative
/// likelihoods (e.g. [`GaussianLinearModel`]) flow through the same update
/// rules and their conjugate closed forms can serve as exactness oracles.
pub trait Model: Sync {
    fn param_count(&self) -> usize;

    fn log_likelihood(&self, params: &[f64], z: &Example) -> Result<f64>;

    /// Exact reverse-mode gradient of [`Model::log_likelihood`] with respect
    /// to the flat parameters.
    fn grad_log_likelihood(&self, params: &[f64], z: &Example) -> Result<Vec<f64>>;

    /// Class probability vector for an input. Non-classifier likelihoods may
    /// not support this.
    fn predict(&self, params: &[f64], input: &[f64]) -> Result<Vec<f64>>;
}

/// Sum of per-example log-likelihoods: `log p(data | params)` under the
/// i.i.d. factorisation.
pub fn dataset_log_likelihood(model: &dyn Model, params: &[f64], data: &Dataset) -> Result<f64> {
    let mut total = 0.0;
    for z in data.examples() {
        total += model.log_likelihood(params, z)?;
    }
    Ok(total)
}

/// Sum of per-example log-likelihood gradients over a dataset.
pub fn dataset_grad_log_likelihood(
    model: &dyn Model,
    params: &[f64],
    data: &Dataset,
) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; model.param_count()];
    for z in data.examples() {
        let g = model.grad_log_likelihood(params, z)?;
        for (a, gi) in acc.iter_mut().zip(&g) {
            *a += gi;
        }
    }
    Ok(acc)
}

/// Predicted class for an input: argmax of the probability vector, ties
/// broken by the lowest class index.
pub fn argmax_class(probs: &[f64]) -> usize {
    let mut best = 0;
    for (c, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = c;
        }
    }
    best
}

/// Top-1 accuracy of a model over a dataset; `None` when the set is empty
/// (never silently zero).
pub fn accuracy(model: &dyn Model, params: &[f64], data: &Dataset) -> Result<Option<f64>> {
    if data.is_empty() {
        return Ok(None);
    }
    let mut correct = 0usize;
    for z in data.examples() {
        let probs = model.predict(params, &z.input)?;
        if argmax_class(&probs) == z.label {
            correct += 1;
        }
    }
    Ok(Some(correct as f64 / data.len() as f64))
}
