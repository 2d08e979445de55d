//! Episodic training of the feature extractor under the NW objective, plus a
//! linear-classifier baseline trained with the same optimizer.
//!
//! Each training query is paired with a support set drawn from the training
//! data; the loss is the cross-entropy of the NW prediction. Gradients flow
//! through both the query and the support embeddings.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::{check_epsilon, expected_calibration_error, DEFAULT_BIN_COUNT};
use crate::error::{Error, Result};
use crate::head::{cross_entropy, euclidean, nw_predict_batch, nw_weights, LabeledExample, SupportSet};
use crate::model::{embed_examples, layer_params, layer_params_mut, softmax, DenseLayer, ExtractorModel, ForwardTrace};

/// Floor on the distance in the derivative of `||q - s||`.
pub const DISTANCE_GRAD_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Nw,
    Fc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportSampling {
    /// A fresh support set for every query.
    PerQuery,
    /// One support set shared by the whole mini-batch.
    PerBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub head: Head,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub batch_size: usize,
    pub support_size: usize,
    pub temperature: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub steps: usize,
    /// The learning rate is divided by 10 at each of these steps.
    pub lr_decay_steps: Vec<usize>,
    pub seed: u64,
    pub label_smoothing: f64,
    pub support_sampling: SupportSampling,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            head: Head::Nw,
            hidden: vec![64, 64],
            embed_dim: 16,
            batch_size: 4,
            support_size: 10,
            temperature: 1.0,
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            steps: 2000,
            lr_decay_steps: vec![1000, 1500],
            seed: 0,
            label_smoothing: 0.0,
            support_sampling: SupportSampling::PerQuery,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.head == Head::Nw && self.support_size < 2 {
            return bad("support size must be at least 2".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be finite and non-negative, got {}", self.lr));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidTemperature(self.temperature));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        if self.embed_dim == 0 || self.hidden.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        check_epsilon(self.label_smoothing)
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let decays = self.lr_decay_steps.iter().filter(|&&s| step >= s).count();
        self.lr * 0.1f64.powi(decays as i32)
    }

    pub fn dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(&self.hidden);
        dims.push(self.embed_dim);
        dims
    }
}

/// One sampled (query, support) pair, as indices into the training set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub query: usize,
    pub support: Vec<usize>,
}

/// Draws `n` distinct indices from `0..len` skipping everything in `excluded`.
fn draw_excluding<R: Rng + ?Sized>(len: usize, excluded: &BTreeSet<usize>, n: usize, rng: &mut R) -> Vec<usize> {
    let pool: Vec<usize> = (0..len).filter(|i| !excluded.contains(i)).collect();
    index::sample(rng, pool.len(), n)
        .into_iter()
        .map(|p| pool[p])
        .collect()
}

/// A support set of `support_size` for `query_index`: one same-class example
/// drawn uniformly, the rest drawn uniformly without replacement from
/// everything except the query, then shuffled.
pub fn sample_episode<R: Rng + ?Sized>(
    train: &[LabeledExample],
    query_index: usize,
    support_size: usize,
    rng: &mut R,
) -> Result<Episode> {
    let query = train.get(query_index).ok_or_else(|| {
        Error::InvalidArgument(format!("query index {query_index} outside training set"))
    })?;
    if support_size == 0 || train.len() < support_size + 1 {
        return Err(Error::InvalidArgument(format!(
            "training set of {} cannot supply a support of {support_size} plus the query",
            train.len()
        )));
    }
    let peers: Vec<usize> = train
        .iter()
        .enumerate()
        .filter(|(i, ex)| *i != query_index && ex.label == query.label)
        .map(|(i, _)| i)
        .collect();
    if peers.is_empty() {
        return Err(Error::InsufficientClass {
            class: query.label,
            have: 1,
            need: 2,
        });
    }
    let anchor = peers[rng.random_range(0..peers.len())];
    let excluded = BTreeSet::from([query_index, anchor]);
    let mut support = draw_excluding(train.len(), &excluded, support_size - 1, rng);
    support.push(anchor);
    support.shuffle(rng);
    Ok(Episode {
        query: query_index,
        support,
    })
}

/// One support set shared by `queries`: excludes every query and contains at
/// least one example of each query class.
pub fn sample_shared_support<R: Rng + ?Sized>(
    train: &[LabeledExample],
    queries: &[usize],
    support_size: usize,
    rng: &mut R,
) -> Result<Vec<Episode>> {
    let excluded: BTreeSet<usize> = queries.iter().copied().collect();
    let classes: BTreeSet<usize> = queries.iter().map(|&q| train[q].label).collect();
    if classes.len() > support_size {
        return Err(Error::InvalidArgument(format!(
            "support size {support_size} cannot cover {} query classes",
            classes.len()
        )));
    }
    if train.len() < support_size + excluded.len() {
        return Err(Error::InvalidArgument(format!(
            "training set of {} cannot supply a support of {support_size} plus {} queries",
            train.len(),
            excluded.len()
        )));
    }
    let mut taken = excluded.clone();
    let mut support = Vec::with_capacity(support_size);
    for &c in &classes {
        let peers: Vec<usize> = (0..train.len())
            .filter(|i| train[*i].label == c && !taken.contains(i))
            .collect();
        if peers.is_empty() {
            return Err(Error::InsufficientClass { class: c, have: 1, need: 2 });
        }
        let pick = peers[rng.random_range(0..peers.len())];
        taken.insert(pick);
        support.push(pick);
    }
    support.extend(draw_excluding(train.len(), &taken, support_size - support.len(), rng));
    support.shuffle(rng);
    Ok(queries
        .iter()
        .map(|&q| Episode {
            query: q,
            support: support.clone(),
        })
        .collect())
}

/// The loss target for one query: one-hot, or smoothed over `classes`.
fn target(label: usize, classes: &BTreeSet<usize>, class_count: usize, epsilon: f64) -> Vec<f64> {
    let mut t = vec![0.0; class_count];
    if epsilon == 0.0 {
        t[label] = 1.0;
        return t;
    }
    let floor = epsilon / classes.len() as f64;
    for &c in classes {
        t[c] = floor;
    }
    t[label] += 1.0 - epsilon;
    t
}

/// `(loss, d loss / d probs)` for a soft target; classes without target mass
/// contribute nothing.
fn soft_loss_grad(probs: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut grad = vec![0.0; probs.len()];
    for c in 0..probs.len() {
        if target[c] > 0.0 {
            if probs[c] == 0.0 {
                loss = f64::INFINITY;
                grad[c] = f64::NEG_INFINITY;
            } else {
                loss -= target[c] * probs[c].ln();
                grad[c] = -target[c] / probs[c];
            }
        }
    }
    (loss, grad)
}

struct Embedded {
    value: Vec<f64>,
    trace: ForwardTrace,
    grad: Vec<f64>,
}

/// Mean NW cross-entropy over `episodes` and its gradient with respect to
/// every extractor parameter.
///
/// With `epsilon > 0` the target is smoothed over the classes present in each
/// episode's support, which is the label set the prediction ranges over.
pub fn nw_loss_and_grad(
    model: &ExtractorModel,
    train: &[LabeledExample],
    episodes: &[Episode],
    temperature: f64,
    epsilon: f64,
    class_count: usize,
) -> Result<(f64, ExtractorModel)> {
    check_epsilon(epsilon)?;
    if episodes.is_empty() {
        return Err(Error::EmptyInput("no episodes".into()));
    }
    // Each distinct example is embedded once per batch; its gradient
    // accumulates over every episode that uses it.
    let mut cache: BTreeMap<usize, Embedded> = BTreeMap::new();
    for ep in episodes {
        for &i in std::iter::once(&ep.query).chain(&ep.support) {
            if let std::collections::btree_map::Entry::Vacant(slot) = cache.entry(i) {
                let ex = train.get(i).ok_or_else(|| {
                    Error::InvalidArgument(format!("episode index {i} outside training set"))
                })?;
                let (value, trace) = model.forward_trace(&ex.features)?;
                let grad = vec![0.0; value.len()];
                slot.insert(Embedded { value, trace, grad });
            }
        }
    }

    let mut total_loss = 0.0;
    for ep in episodes {
        let query_label = train[ep.query].label;
        let labels: Vec<usize> = ep.support.iter().map(|&i| train[i].label).collect();
        if let Some(&bad) = labels.iter().chain([&query_label]).find(|&&l| l >= class_count) {
            return Err(Error::InvalidArgument(format!("label {bad} outside [0, {class_count})")));
        }
        let q = cache[&ep.query].value.clone();
        let diffs: Vec<Vec<f64>> = ep
            .support
            .iter()
            .map(|i| q.iter().zip(&cache[i].value).map(|(a, b)| a - b).collect())
            .collect();
        let dists: Vec<f64> = ep.support.iter().map(|i| euclidean(&q, &cache[i].value)).collect();
        if dists.iter().any(|d| !d.is_finite()) {
            total_loss = f64::INFINITY;
            continue;
        }
        let weights = nw_weights(&dists, temperature)?.weights;
        let mut probs = vec![0.0; class_count];
        for (w, &y) in weights.iter().zip(&labels) {
            probs[y] += w;
        }
        let present: BTreeSet<usize> = labels.iter().copied().collect();
        let t = target(query_label, &present, class_count, epsilon);
        let (loss, dprobs) = soft_loss_grad(&probs, &t);
        total_loss += loss;
        if !loss.is_finite() {
            continue;
        }
        // d loss / d logit_i = w_i (g_{y_i} - sum_c g_c p_c), logit_i = -d_i / tau.
        let mean_g: f64 = dprobs.iter().zip(&probs).map(|(g, p)| g * p).sum();
        let scale = 1.0 / episodes.len() as f64;
        let mut dq = vec![0.0; q.len()];
        for (k, &si) in ep.support.iter().enumerate() {
            let dlogit = weights[k] * (dprobs[labels[k]] - mean_g);
            let ddist = -dlogit / temperature * scale;
            if ddist == 0.0 {
                continue;
            }
            let r = dists[k].max(DISTANCE_GRAD_FLOOR);
            let s_grad = &mut cache.get_mut(&si).expect("cached").grad;
            for (j, diff) in diffs[k].iter().enumerate() {
                let g = ddist * diff / r;
                dq[j] += g;
                s_grad[j] -= g;
            }
        }
        for (a, b) in cache.get_mut(&ep.query).expect("cached").grad.iter_mut().zip(dq) {
            *a += b;
        }
    }

    let mut grads = model.zeros_like();
    for e in cache.values() {
        if e.grad.iter().any(|g| *g != 0.0) {
            model.backward(&e.trace, &e.grad, &mut grads);
        }
    }
    Ok((total_loss / episodes.len() as f64, grads))
}

/// Mean softmax cross-entropy of a linear classifier on the embeddings of
/// `queries`, with gradients for the classifier and the extractor.
pub fn fc_loss_and_grad(
    model: &ExtractorModel,
    classifier: &DenseLayer,
    train: &[LabeledExample],
    queries: &[usize],
    epsilon: f64,
) -> Result<(f64, ExtractorModel, DenseLayer)> {
    check_epsilon(epsilon)?;
    if queries.is_empty() {
        return Err(Error::EmptyInput("no queries".into()));
    }
    let class_count = classifier.output;
    let all: BTreeSet<usize> = (0..class_count).collect();
    let mut grads = model.zeros_like();
    let mut cgrad = DenseLayer::zeros(classifier.input, classifier.output);
    let mut total = 0.0;
    let scale = 1.0 / queries.len() as f64;
    for &qi in queries {
        let ex = &train[qi];
        let (emb, trace) = model.forward_trace(&ex.features)?;
        let probs = softmax(&classifier.apply(&emb));
        let t = target(ex.label, &all, class_count, epsilon);
        let (loss, _) = soft_loss_grad(&probs, &t);
        total += loss;
        // Softmax + cross-entropy: d loss / d logits = p - t.
        let dlogits: Vec<f64> = probs.iter().zip(&t).map(|(p, t)| (p - t) * scale).collect();
        let demb = classifier.backward(&emb, &dlogits, &mut cgrad);
        model.backward(&trace, &demb, &mut grads);
    }
    Ok((total * scale, grads, cgrad))
}

/// A trained extractor and, for the FC baseline, its linear classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub extractor: ExtractorModel,
    pub classifier: Option<DenseLayer>,
}

impl TrainedModel {
    pub fn head(&self) -> Head {
        if self.classifier.is_some() {
            Head::Fc
        } else {
            Head::Nw
        }
    }

    fn layers(&self) -> Vec<&DenseLayer> {
        self.extractor.layers.iter().chain(&self.classifier).collect()
    }

    /// All parameters in checkpoint order.
    pub fn params(&self) -> Vec<f64> {
        layer_params(&self.layers())
    }

    pub fn params_mut(&mut self) -> Vec<&mut f64> {
        layer_params_mut(
            self.extractor
                .layers
                .iter_mut()
                .chain(self.classifier.as_mut())
                .collect(),
        )
    }

    /// Class probabilities from the linear classifier, if there is one.
    pub fn fc_predict(&self, features: &[f64]) -> Result<Option<Vec<f64>>> {
        match &self.classifier {
            None => Ok(None),
            Some(c) => Ok(Some(softmax(&c.apply(&self.extractor.forward(features)?)))),
        }
    }
}

/// Momentum SGD with L2 weight decay folded into the gradient:
/// `v <- mu v + (g + lambda theta)`, `theta <- theta - lr v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(param_count: usize, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: vec![0.0; param_count],
        }
    }

    pub fn step(&mut self, params: Vec<&mut f64>, grad: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), grad.len());
        for ((p, g), v) in params.into_iter().zip(grad).zip(&mut self.velocity) {
            let d = g + self.weight_decay * *p;
            *v = self.momentum * *v + d;
            *p -= lr * *v;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_ece: Option<f64>,
}

pub type TrainLog = Vec<LogRecord>;

/// Initial parameters, drawn from stream 0 of `seed`.
pub fn init_model(config: &TrainConfig, input_dim: usize, class_count: usize) -> Result<TrainedModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(0);
    let extractor = ExtractorModel::new(&config.dims(input_dim), &mut rng)?;
    let classifier = match config.head {
        Head::Nw => None,
        Head::Fc => Some(DenseLayer::random(config.embed_dim, class_count, 1.0, &mut rng)),
    };
    Ok(TrainedModel {
        extractor,
        classifier,
    })
}

/// Episode sampling uses stream 1 of `seed`.
pub fn sampling_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Draws the next mini-batch of query indices and, for the NW head, their episodes.
pub fn sample_batch<R: Rng + ?Sized>(
    train: &[LabeledExample],
    config: &TrainConfig,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<Episode>)> {
    let nb = config.batch_size.min(train.len());
    let queries = index::sample(rng, train.len(), nb).into_vec();
    let episodes = match (config.head, config.support_sampling) {
        (Head::Fc, _) => Vec::new(),
        (Head::Nw, SupportSampling::PerQuery) => queries
            .iter()
            .map(|&q| sample_episode(train, q, config.support_size, rng))
            .collect::<Result<_>>()?,
        (Head::Nw, SupportSampling::PerBatch) => {
            sample_shared_support(train, &queries, config.support_size, rng)?
        }
    };
    Ok((queries, episodes))
}

/// Loss and flat gradient (checkpoint order) of one mini-batch.
pub fn batch_loss_and_grad(
    model: &TrainedModel,
    train: &[LabeledExample],
    class_count: usize,
    config: &TrainConfig,
    queries: &[usize],
    episodes: &[Episode],
) -> Result<(f64, Vec<f64>)> {
    match &model.classifier {
        None => {
            let (loss, g) = nw_loss_and_grad(
                &model.extractor,
                train,
                episodes,
                config.temperature,
                config.label_smoothing,
                class_count,
            )?;
            Ok((loss, layer_params(&g.layers.iter().collect::<Vec<_>>())))
        }
        Some(c) => {
            let (loss, g, cg) = fc_loss_and_grad(&model.extractor, c, train, queries, config.label_smoothing)?;
            let mut layers: Vec<&DenseLayer> = g.layers.iter().collect();
            layers.push(&cg);
            Ok((loss, layer_params(&layers)))
        }
    }
}

/// Validation error and ECE: Full-mode NW predictions over the training set,
/// or the linear classifier for the FC head.
pub fn evaluate_split(
    model: &TrainedModel,
    train: &[LabeledExample],
    queries: &[LabeledExample],
    class_count: usize,
    temperature: f64,
) -> Result<(f64, f64)> {
    let probs: Vec<Vec<f64>> = match model.head() {
        Head::Nw => {
            let support = SupportSet::from_examples(embed_examples(&model.extractor, train)?, class_count)?;
            let embedded = embed_examples(&model.extractor, queries)?;
            nw_predict_batch(&embedded, &support, temperature)?
                .into_iter()
                .map(|p| p.probs)
                .collect()
        }
        Head::Fc => queries
            .iter()
            .map(|q| Ok(model.fc_predict(&q.features)?.expect("classifier")))
            .collect::<Result<_>>()?,
    };
    let labels: Vec<usize> = queries.iter().map(|q| q.label).collect();
    let report = expected_calibration_error(&probs, &labels, DEFAULT_BIN_COUNT)?;
    let wrong = probs
        .iter()
        .zip(&labels)
        .filter(|(p, &y)| crate::head::argmax(p) != y)
        .count();
    Ok((wrong as f64 / labels.len() as f64, report.ece))
}

pub fn train(
    train_set: &[LabeledExample],
    val_set: &[LabeledExample],
    class_count: usize,
    config: &TrainConfig,
) -> Result<(TrainedModel, TrainLog)> {
    config.validate()?;
    let input_dim = train_set
        .first()
        .ok_or_else(|| Error::EmptyInput("empty training set".into()))?
        .features
        .len();
    let mut model = init_model(config, input_dim, class_count)?;
    let mut rng = sampling_rng(config.seed);
    let mut opt = Sgd::new(model.params().len(), config.momentum, config.weight_decay);
    let mut log = Vec::new();
    let log_every = config.log_every.max(1);

    for step in 0..config.steps {
        let (queries, episodes) = sample_batch(train_set, config, &mut rng)?;
        let (loss, grad) = batch_loss_and_grad(&model, train_set, class_count, config, &queries, &episodes)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { step, loss });
        }
        let lr = config.lr_at(step);
        opt.step(model.params_mut(), &grad, lr);
        if !model.params().iter().all(|p| p.is_finite()) {
            return Err(Error::Divergence { step, loss });
        }

        let last = step + 1 == config.steps;
        if (step + 1) % log_every == 0 || last {
            let (val_error, val_ece) = if val_set.is_empty() {
                (None, None)
            } else {
                let (e, c) = evaluate_split(&model, train_set, val_set, class_count, config.temperature)?;
                (Some(e), Some(c))
            };
            log.push(LogRecord {
                step: step + 1,
                lr,
                train_loss: loss,
                val_error,
                val_ece,
            });
        }
    }
    Ok((model, log))
}

/// Plain NW loss of a single query; used to cross-check the batched path.
pub fn episode_loss(
    model: &ExtractorModel,
    train: &[LabeledExample],
    episode: &Episode,
    temperature: f64,
    class_count: usize,
) -> Result<f64> {
    let embed = |i: usize| -> Result<LabeledExample> {
        Ok(LabeledExample {
            id: train[i].id.clone(),
            features: model.forward(&train[i].features)?,
            label: train[i].label,
        })
    };
    let q = embed(episode.query)?;
    let support = SupportSet::from_examples(
        episode.support.iter().map(|&i| embed(i)).collect::<Result<_>>()?,
        class_count,
    )?;
    let p = crate::head::nw_predict(&q.id, &q.features, &support, temperature)?;
    cross_entropy(&p.probs, q.label)
}
