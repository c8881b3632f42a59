//! Fully connected ReLU multilayer perceptrons with a clamped scalar output.
//!
//! A network with depth `L` and width `H` maps `R^p -> R` through `L` hidden ReLU layers of
//! `H` units each and a linear output unit; units connect only to the neighbouring layers.
//! The raw output is hard-clamped to `[-B, B]` with `B = clamp_bound`, so every model
//! satisfies `|f(x)| <= B` exactly. Inside the interval the clamp passes gradients through,
//! at or beyond saturation it contributes a zero gradient.
//!
//! Training minimises the weight-normalised empirical risk
//! `(1/Σw) Σ w_i loss(f(x_i), y_i)` by plain mini-batch gradient descent with a fixed step,
//! keeping the epoch checkpoint with the lowest validation loss.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{seed, Error, Result, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// `(y - f)^2`.
    Square,
    /// `-y f + log(1 + e^f)` for labels `y ∈ [0, 1]`; `f` is a logit.
    Logistic,
}

impl Loss {
    #[inline]
    fn value<F: Scalar>(self, f: F, y: F) -> F {
        match self {
            Loss::Square => (y - f) * (y - f),
            Loss::Logistic => softplus(f) - y * f,
        }
    }

    /// Derivative with respect to the (clamped) network output.
    #[inline]
    fn derivative<F: Scalar>(self, f: F, y: F) -> F {
        match self {
            Loss::Square => F::lit(2.0) * (f - y),
            Loss::Logistic => sigmoid(f) - y,
        }
    }
}

/// Numerically stable `log(1 + e^x)`.
#[inline]
pub fn softplus<F: Scalar>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

/// Logistic link `e^u / (1 + e^u)`.
#[inline]
pub fn sigmoid<F: Scalar>(u: F) -> F {
    if u >= F::zero() {
        F::one() / (F::one() + (-u).exp())
    } else {
        let e = u.exp();
        e / (F::one() + e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct MlpConfig<F> {
    /// Number of hidden layers.
    pub depth: usize,
    /// Units per hidden layer.
    pub width: usize,
    /// Output bound; `None` resolves at fit time to `2 * 1.1 * max|target|`.
    pub clamp_bound: Option<F>,
    pub loss: Loss,
    pub epochs: usize,
    pub batch_size: usize,
    pub step_size: F,
    pub seed: u64,
    /// Fraction of samples held out for checkpoint selection, in `[0, 0.5]`.
    pub validation_fraction: F,
}

impl<F: Scalar> Default for MlpConfig<F> {
    fn default() -> Self {
        Self {
            depth: 2,
            width: 32,
            clamp_bound: None,
            loss: Loss::Square,
            epochs: 100,
            batch_size: 32,
            step_size: F::lit(0.02),
            seed: 0,
            validation_fraction: F::lit(0.2),
        }
    }
}

impl<F: Scalar> MlpConfig<F> {
    pub fn new(depth: usize, width: usize) -> Self {
        Self { depth, width, ..Self::default() }
    }

    pub fn with_loss(mut self, loss: Loss) -> Self {
        self.loss = loss;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_clamp_bound(mut self, bound: F) -> Self {
        self.clamp_bound = Some(bound);
        self
    }

    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self
    }

    pub fn with_step_size(mut self, step: F) -> Self {
        self.step_size = step;
        self
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size;
        self
    }

    pub fn with_validation_fraction(mut self, fraction: F) -> Self {
        self.validation_fraction = fraction;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.depth == 0 {
            return fail("depth must be at least 1");
        }
        if self.width == 0 {
            return fail("width must be at least 1");
        }
        if let Some(b) = self.clamp_bound {
            if !(b > F::zero()) || !b.is_finite() {
                return fail("clamp_bound must be positive and finite");
            }
        }
        if !(self.step_size > F::zero()) || !self.step_size.is_finite() {
            return fail("step_size must be positive and finite");
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        let v = self.validation_fraction;
        if !(v >= F::zero() && v <= F::lit(0.5)) {
            return fail("validation_fraction must lie in [0, 0.5]");
        }
        Ok(())
    }

    /// Number of trainable parameters for input dimension `p`.
    pub fn parameter_count(&self, p: usize) -> usize {
        let h = self.width;
        h * (p + 1) + (self.depth - 1) * h * (h + 1) + (h + 1)
    }
}

/// A training sample with a nonnegative weight (e.g. a subgroup indicator).
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedSample<F> {
    pub x: Vec<F>,
    pub target: F,
    pub weight: F,
}

impl<F: Scalar> WeightedSample<F> {
    pub fn new(x: Vec<F>, target: F, weight: F) -> Self {
        Self { x, target, weight }
    }

    pub fn unit(x: Vec<F>, target: F) -> Self {
        Self { x, target, weight: F::one() }
    }
}

/// A fitted network. Layer `l < depth` has a `width x fan_in` weight matrix stored
/// row-major; the last entry of `weights` is the `1 x width` output layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct MlpModel<F> {
    config: MlpConfig<F>,
    input_dim: usize,
    weights: Vec<Vec<F>>,
    biases: Vec<Vec<F>>,
    #[serde(default)]
    training_loss_trace: Vec<F>,
}

/// Gradient with the same layout as the model's weights and biases.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<F> {
    pub weights: Vec<Vec<F>>,
    pub biases: Vec<Vec<F>>,
}

impl<F: Scalar> Gradients<F> {
    fn zeros_like(model: &MlpModel<F>) -> Self {
        Self {
            weights: model.weights.iter().map(|w| vec![F::zero(); w.len()]).collect(),
            biases: model.biases.iter().map(|b| vec![F::zero(); b.len()]).collect(),
        }
    }

    fn fill_zero(&mut self) {
        self.weights.iter_mut().chain(self.biases.iter_mut()).for_each(|v| v.fill(F::zero()));
    }

    /// Flattened in the same order as [`MlpModel::parameters`].
    pub fn flatten(&self) -> Vec<F> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }
}

/// Weighted mean loss and its gradient over a batch.
#[derive(Clone, Debug)]
pub struct LossGrad<F> {
    pub loss: F,
    pub grad: Gradients<F>,
}

/// Per-layer activations reused across samples.
struct Scratch<F> {
    pre: Vec<Vec<F>>,
    act: Vec<Vec<F>>,
    delta: Vec<Vec<F>>,
}

impl<F: Scalar> Scratch<F> {
    fn new(depth: usize, width: usize) -> Self {
        Self {
            pre: vec![vec![F::zero(); width]; depth],
            act: vec![vec![F::zero(); width]; depth],
            delta: vec![vec![F::zero(); width]; depth],
        }
    }
}

impl<F: Scalar> MlpModel<F> {
    pub fn config(&self) -> &MlpConfig<F> {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn depth(&self) -> usize {
        self.config.depth
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn clamp_bound(&self) -> F {
        self.config.clamp_bound.unwrap_or_else(F::max_value)
    }

    pub fn weights(&self) -> &[Vec<F>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<F>] {
        &self.biases
    }

    pub fn training_loss_trace(&self) -> &[F] {
        &self.training_loss_trace
    }

    /// `(rows, cols)` of every weight matrix, hidden layers first.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let (p, h) = (self.input_dim, self.config.width);
        let mut shapes = vec![(h, p)];
        shapes.extend(std::iter::repeat_n((h, h), self.config.depth - 1));
        shapes.push((1, h));
        shapes
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(Vec::len).sum()
    }

    /// All parameters, layer by layer: weights (row-major) then biases.
    pub fn parameters(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    /// Copy of the model with parameters replaced, in [`Self::parameters`] order.
    pub fn with_parameters(&self, params: &[F]) -> Result<Self> {
        if params.len() != self.parameter_count() {
            return Err(Error::Input(format!("expected {} parameters, got {}", self.parameter_count(), params.len())));
        }
        let mut out = self.clone();
        let mut it = params.iter().copied();
        for (w, b) in out.weights.iter_mut().zip(out.biases.iter_mut()) {
            w.iter_mut().chain(b.iter_mut()).for_each(|v| *v = it.next().unwrap());
        }
        Ok(out)
    }

    /// Validates shapes after deserialisation.
    pub fn from_json(json: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(json)?;
        model.config.validate()?;
        let shapes = model.layer_shapes();
        if model.weights.len() != shapes.len() || model.biases.len() != shapes.len() {
            return Err(Error::Input("layer count does not match depth".into()));
        }
        for (l, &(rows, cols)) in shapes.iter().enumerate() {
            if model.weights[l].len() != rows * cols || model.biases[l].len() != rows {
                return Err(Error::Input(format!("layer {l} has the wrong shape")));
            }
        }
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    fn check_dim(&self, x: &[F]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::Input(format!("input has dimension {}, model expects {}", x.len(), self.input_dim)));
        }
        Ok(())
    }

    /// Unclamped network output.
    pub fn raw_forward(&self, x: &[F]) -> Result<F> {
        self.check_dim(x)?;
        let mut s = Scratch::new(self.config.depth, self.config.width);
        Ok(self.forward_into(x, &mut s))
    }

    /// Clamped output; for the logistic loss this is the clamped logit.
    pub fn predict(&self, x: &[F]) -> Result<F> {
        Ok(self.clamp(self.raw_forward(x)?))
    }

    /// Clamped output without the dimension check. Panics on a short input.
    pub fn predict_unchecked(&self, x: &[F]) -> F {
        debug_assert_eq!(x.len(), self.input_dim);
        let mut s = Scratch::new(self.config.depth, self.config.width);
        self.clamp(self.forward_into(x, &mut s))
    }

    /// Smallest `|pre-activation|` over all hidden units at `x`.
    pub fn min_abs_preactivation(&self, x: &[F]) -> Result<F> {
        self.check_dim(x)?;
        let mut s = Scratch::new(self.config.depth, self.config.width);
        self.forward_into(x, &mut s);
        Ok(s.pre.iter().flatten().fold(F::infinity(), |m, z| m.min(z.abs())))
    }

    #[inline]
    fn clamp(&self, raw: F) -> F {
        let b = self.clamp_bound();
        raw.max(-b).min(b)
    }

    fn forward_into(&self, x: &[F], s: &mut Scratch<F>) -> F {
        let depth = self.config.depth;
        for l in 0..depth {
            let (w, b) = (&self.weights[l], &self.biases[l]);
            let (before, rest) = s.act.split_at_mut(l);
            let input: &[F] = if l == 0 { x } else { &before[l - 1] };
            let fan_in = input.len();
            let (pre, act) = (&mut s.pre[l], &mut rest[0]);
            for (i, (z, a)) in pre.iter_mut().zip(act.iter_mut()).enumerate() {
                let row = &w[i * fan_in..(i + 1) * fan_in];
                let mut acc = b[i];
                for (wi, xi) in row.iter().zip(input) {
                    acc += *wi * *xi;
                }
                *z = acc;
                *a = acc.max(F::zero());
            }
        }
        let out_w = &self.weights[depth];
        let mut acc = self.biases[depth][0];
        for (wi, ai) in out_w.iter().zip(&s.act[depth - 1]) {
            acc += *wi * *ai;
        }
        acc
    }

    /// Adds `scale * ∂loss/∂θ` at one sample into `grad`; returns the unscaled loss.
    fn accumulate(&self, x: &[F], y: F, scale: F, s: &mut Scratch<F>, grad: &mut Gradients<F>) -> F {
        let depth = self.config.depth;
        let raw = self.forward_into(x, s);
        let b = self.clamp_bound();
        let out = raw.max(-b).min(b);
        let loss = self.config.loss.value(out, y);
        if scale == F::zero() {
            return loss;
        }
        let pass = if raw.abs() < b { F::one() } else { F::zero() };
        let g_out = scale * self.config.loss.derivative(out, y) * pass;
        if g_out == F::zero() {
            return loss;
        }

        let top = &s.act[depth - 1];
        for (gw, a) in grad.weights[depth].iter_mut().zip(top) {
            *gw += g_out * *a;
        }
        grad.biases[depth][0] += g_out;
        for ((d, w), z) in s.delta[depth - 1].iter_mut().zip(&self.weights[depth]).zip(&s.pre[depth - 1]) {
            *d = if *z > F::zero() { g_out * *w } else { F::zero() };
        }

        for l in (0..depth).rev() {
            let input: &[F] = if l == 0 { x } else { &s.act[l - 1] };
            let fan_in = input.len();
            let (gw, gb) = (&mut grad.weights[l], &mut grad.biases[l]);
            for (i, d) in s.delta[l].iter().enumerate() {
                if *d == F::zero() {
                    continue;
                }
                gb[i] += *d;
                for (g, xi) in gw[i * fan_in..(i + 1) * fan_in].iter_mut().zip(input) {
                    *g += *d * *xi;
                }
            }
            if l > 0 {
                let (lower, upper) = s.delta.split_at_mut(l);
                let (below, here) = (&mut lower[l - 1], &upper[0]);
                let w = &self.weights[l];
                for (k, (db, z)) in below.iter_mut().zip(&s.pre[l - 1]).enumerate() {
                    if *z > F::zero() {
                        let mut acc = F::zero();
                        for (i, d) in here.iter().enumerate() {
                            acc += w[i * fan_in + k] * *d;
                        }
                        *db = acc;
                    } else {
                        *db = F::zero();
                    }
                }
            }
        }
        loss
    }

    /// Weighted mean loss `(1/Σw) Σ w_i loss(f(x_i), y_i)` and its gradient.
    /// A batch whose weights are all zero yields zero loss and a zero gradient.
    pub fn loss_grad(&self, batch: &[WeightedSample<F>]) -> Result<LossGrad<F>> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        for smp in batch {
            self.check_dim(&smp.x)?;
        }
        let mut grad = Gradients::zeros_like(self);
        let total: F = batch.iter().map(|s| s.weight).sum();
        if total == F::zero() {
            return Ok(LossGrad { loss: F::zero(), grad });
        }
        let mut s = Scratch::new(self.config.depth, self.config.width);
        let mut loss = F::zero();
        for smp in batch {
            let scale = smp.weight / total;
            loss += scale * self.accumulate(&smp.x, smp.target, scale, &mut s, &mut grad);
        }
        Ok(LossGrad { loss, grad })
    }

    fn weighted_loss(&self, samples: &[&WeightedSample<F>], s: &mut Scratch<F>) -> F {
        let mut num = F::zero();
        let mut den = F::zero();
        for smp in samples {
            let out = self.clamp(self.forward_into(&smp.x, s));
            num += smp.weight * self.config.loss.value(out, smp.target);
            den += smp.weight;
        }
        num / den
    }

    fn step(&mut self, grad: &Gradients<F>, step: F) {
        for (p, g) in self.weights.iter_mut().zip(&grad.weights).chain(self.biases.iter_mut().zip(&grad.biases)) {
            for (pi, gi) in p.iter_mut().zip(g) {
                *pi -= step * *gi;
            }
        }
    }
}

/// Random initial network: zero biases, weights `~ N(0, 2 / fan_in)` from the seeded
/// generator.
pub fn mlp_init<F: Scalar>(config: &MlpConfig<F>, input_dim: usize) -> Result<MlpModel<F>> {
    config.validate()?;
    if input_dim == 0 {
        return Err(Error::Config("input_dim must be at least 1".into()));
    }
    let mut rng = seed::rng(config.seed);
    Ok(init_with(config.clone(), input_dim, &mut rng))
}

fn init_with<F: Scalar>(config: MlpConfig<F>, input_dim: usize, rng: &mut ChaCha8Rng) -> MlpModel<F> {
    let mut model =
        MlpModel { config, input_dim, weights: Vec::new(), biases: Vec::new(), training_loss_trace: Vec::new() };
    for (rows, cols) in model.layer_shapes() {
        let sd = (2.0 / cols as f64).sqrt();
        let w = (0..rows * cols).map(|_| F::lit(sd * rng.sample::<f64, _>(StandardNormal))).collect();
        model.weights.push(w);
        model.biases.push(vec![F::zero(); rows]);
    }
    model
}

/// Default output bound `2 * 1.1 * max|target|` (1 when every target is zero).
pub fn default_clamp_bound<F: Scalar>(samples: &[WeightedSample<F>]) -> F {
    let m = samples.iter().fold(F::zero(), |m, s| m.max(s.target.abs()));
    let m = if m > F::zero() { m } else { F::one() };
    F::lit(2.2) * m
}

/// Weighted empirical-risk minimisation over the clamped MLP class.
///
/// Zero-weight samples are discarded before anything else, and weights are rescaled to
/// mean one, so fits are invariant to both. The remaining samples are split once into
/// training and validation parts; each epoch shuffles the training part and takes fixed
/// gradient steps over mini-batches. The returned model is the epoch checkpoint with the
/// lowest validation loss (earliest on ties), or the final one without validation data.
pub fn mlp_fit<F: Scalar>(samples: &[WeightedSample<F>], config: &MlpConfig<F>) -> Result<MlpModel<F>> {
    config.validate()?;
    let p = samples.first().map(|s| s.x.len()).ok_or_else(|| Error::EmptySubgroup("no samples".into()))?;
    if p == 0 {
        return Err(Error::Input("samples have zero covariates".into()));
    }
    for (i, s) in samples.iter().enumerate() {
        if s.x.len() != p {
            return Err(Error::Input(format!("sample {i} has dimension {}, expected {p}", s.x.len())));
        }
        if !s.x.iter().all(|v| v.is_finite()) || !s.target.is_finite() {
            return Err(Error::Input(format!("sample {i} is not finite")));
        }
        if !(s.weight >= F::zero()) || !s.weight.is_finite() {
            return Err(Error::Input(format!("sample {i} has an invalid weight")));
        }
        if config.loss == Loss::Logistic && !(s.target >= F::zero() && s.target <= F::one()) {
            return Err(Error::Input(format!("sample {i}: logistic targets must lie in [0, 1]")));
        }
    }

    let active: Vec<&WeightedSample<F>> = samples.iter().filter(|s| s.weight > F::zero()).collect();
    if active.is_empty() {
        return Err(Error::EmptySubgroup("all sample weights are zero".into()));
    }
    let mean_w = active.iter().map(|s| s.weight).sum::<F>() / F::lit(active.len() as f64);
    let data: Vec<WeightedSample<F>> =
        active.iter().map(|s| WeightedSample { x: s.x.clone(), target: s.target, weight: s.weight / mean_w }).collect();

    let mut resolved = config.clone();
    if resolved.clamp_bound.is_none() {
        resolved.clamp_bound = Some(default_clamp_bound(&data));
    }

    let mut init_rng = seed::rng(config.seed);
    let mut model = init_with(resolved, p, &mut init_rng);
    let mut split_rng = seed::child_rng(config.seed, &[1]);
    let mut shuffle_rng = seed::child_rng(config.seed, &[2]);

    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut split_rng);
    let n_val = ((config.validation_fraction.as_f64() * n as f64).floor() as usize).min(n - 1);
    let validation: Vec<&WeightedSample<F>> = order[..n_val].iter().map(|&i| &data[i]).collect();
    let mut train: Vec<usize> = order[n_val..].to_vec();
    train.sort_unstable();

    let mut grad = Gradients::zeros_like(&model);
    let mut scratch = Scratch::new(config.depth, config.width);
    let mut best: Option<(F, MlpModel<F>)> = None;
    let mut trace = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        train.shuffle(&mut shuffle_rng);
        let mut epoch_loss = F::zero();
        let mut epoch_weight = F::zero();
        for batch in train.chunks(config.batch_size) {
            let total: F = batch.iter().map(|&i| data[i].weight).sum();
            grad.fill_zero();
            for &i in batch {
                let smp = &data[i];
                let scale = smp.weight / total;
                let l = model.accumulate(&smp.x, smp.target, scale, &mut scratch, &mut grad);
                epoch_loss += smp.weight * l;
            }
            epoch_weight += total;
            model.step(&grad, config.step_size);
        }
        let epoch_loss = epoch_loss / epoch_weight;
        if !epoch_loss.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        trace.push(epoch_loss);

        if !validation.is_empty() {
            let v = model.weighted_loss(&validation, &mut scratch);
            if !v.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, model.clone()));
            }
        }
    }

    let mut fitted = match best {
        Some((_, m)) => m,
        None => model,
    };
    fitted.training_loss_trace = trace;
    Ok(fitted)
}
