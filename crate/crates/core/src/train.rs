//! Toy scorer and the combined classification + tree-triplet training loop.
//!
//! The scorer is one affine map per node on top of fixed pixel features.
//! Its logit vector doubles as the pixel embedding fed to the projection
//! head, so the triplet term shapes the same weights the classifier uses.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::coherence::{check_negative_constraint, check_positive_constraint, DEFAULT_THRESHOLD};
use crate::decode::{decode_field, evaluate_prediction, LevelScore};
use crate::embedding::{
    sample_triplets_with, tree_triplet_loss, MarginConfig, Projection, Triplet,
    DEFAULT_TRIPLET_COUNT, PROJECTION_DIM,
};
use crate::error::{Error, Result};
use crate::field::{LabelField, ScoreField};
use crate::losses::{field_loss, softmax, softmax_backward, FocalConfig, LossKind};
use crate::synthetic::{Dataset, FeatureField};
use crate::taxonomy::ClassHierarchy;

pub const DEFAULT_BETA_MAX: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BetaSchedule {
    /// `beta_max * (1 - cos(pi t / T)) / 2`.
    #[default]
    Cosine,
    Constant,
}

impl std::str::FromStr for BetaSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(BetaSchedule::Cosine),
            "constant" => Ok(BetaSchedule::Constant),
            _ => Err(Error::invalid(format!("unknown beta schedule `{s}`"))),
        }
    }
}

/// Cosine ramp of the triplet weight from 0 at `step = 0` to `beta_max` at
/// `step = total`.
pub fn beta_schedule(step: usize, total: usize, beta_max: f64) -> Result<f64> {
    if step > total {
        return Err(Error::invalid(format!("step {step} exceeds total {total}")));
    }
    if total == 0 {
        return Ok(0.0);
    }
    let t = step as f64 / total as f64;
    Ok(beta_max * (1.0 - (std::f64::consts::PI * t).cos()) / 2.0)
}

impl BetaSchedule {
    pub fn at(self, step: usize, total: usize, beta_max: f64) -> Result<f64> {
        match self {
            BetaSchedule::Cosine => beta_schedule(step, total, beta_max),
            BetaSchedule::Constant => {
                if step > total {
                    return Err(Error::invalid(format!("step {step} exceeds total {total}")));
                }
                Ok(beta_max)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub loss: LossKind,
    pub focal: FocalConfig,
    /// Adds the tree-triplet term when set.
    pub tree_triplet: bool,
    pub triplet_count: usize,
    pub margin: MarginConfig,
    pub beta_schedule: BetaSchedule,
    pub beta_max: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            batch_size: 512,
            learning_rate: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-4,
            loss: LossKind::FocalTreeMin,
            focal: FocalConfig::default(),
            tree_triplet: false,
            triplet_count: DEFAULT_TRIPLET_COUNT,
            margin: MarginConfig::default(),
            beta_schedule: BetaSchedule::Cosine,
            beta_max: DEFAULT_BETA_MAX,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(0.0..=DEFAULT_BETA_MAX).contains(&self.beta_max) {
            return Err(Error::invalid(format!(
                "beta_max {} outside [0, 0.5]",
                self.beta_max
            )));
        }
        for (name, v) in [
            ("learning rate", self.learning_rate),
            ("momentum", self.momentum),
            ("weight decay", self.weight_decay),
            ("gamma", self.focal.gamma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// One affine map per node: `z = W x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyScorer {
    pub classes: usize,
    pub dim: usize,
    /// `classes x dim`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl ToyScorer {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            classes,
            dim,
            weight: vec![0.0; classes * dim],
            bias: vec![0.0; classes],
        }
    }

    pub fn random(classes: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut s = Self::zeros(classes, dim);
        let n = Normal::new(0.0, 0.01).expect("valid std");
        s.weight.iter_mut().for_each(|w| *w = n.sample(rng));
        s
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.classes)
            .map(|v| {
                let row = &self.weight[v * self.dim..(v + 1) * self.dim];
                self.bias[v] + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>()
            })
            .collect()
    }

    /// Sigmoid scores for every node.
    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        self.logits(x).into_iter().map(sigmoid).collect()
    }

    pub fn score_field(&self, features: &FeatureField) -> Result<ScoreField> {
        let mut data = Vec::with_capacity(features.num_pixels() * self.classes);
        for i in 0..features.num_pixels() {
            data.extend(self.scores(features.pixel(i)));
        }
        ScoreField::new(features.height, features.width, self.classes, data)
    }

    /// Leaf predictions: path decoding on sigmoid scores, or leaf argmax for
    /// the categorical baseline.
    pub fn predict(
        &self,
        h: &ClassHierarchy,
        kind: LossKind,
        features: &FeatureField,
    ) -> Result<LabelField> {
        if kind != LossKind::Cce {
            return decode_field(h, &self.score_field(features)?);
        }
        let labels = (0..features.num_pixels())
            .map(|i| {
                let z = self.logits(features.pixel(i));
                let mut best = h.leaves()[0];
                for &l in h.leaves() {
                    if z[l] > z[best] {
                        best = l;
                    }
                }
                best as u32
            })
            .collect();
        LabelField::new(features.height, features.width, labels)
    }
}

/// Gradient of one objective term with respect to every trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub scorer: ToyScorer,
    pub projection: Option<Projection>,
}

impl Gradients {
    fn zeros(scorer: &ToyScorer, projection: Option<&Projection>) -> Self {
        Self {
            scorer: ToyScorer::zeros(scorer.classes, scorer.dim),
            projection: projection.map(|p| Projection::zeros(p.input, p.hidden, p.output)),
        }
    }

    /// Flattened view: scorer weights, scorer biases, then projection params.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.scorer.weight.clone();
        out.extend_from_slice(&self.scorer.bias);
        if let Some(p) = &self.projection {
            out.extend(p.params().copied());
        }
        out
    }
}

/// Classification and triplet terms of the objective on one batch, kept apart
/// so they can be combined with any weight.
#[derive(Debug, Clone)]
pub struct ObjectiveParts {
    pub classification: f64,
    pub triplet: f64,
    pub triplets_used: usize,
    pub classification_grad: Gradients,
    pub triplet_grad: Gradients,
}

impl ObjectiveParts {
    pub fn value(&self, beta: f64) -> f64 {
        self.classification + beta * self.triplet
    }

    /// `grad(classification) + beta * grad(triplet)`.
    pub fn combined(&self, beta: f64) -> Gradients {
        let mut g = self.classification_grad.clone();
        for (a, b) in g
            .scorer
            .weight
            .iter_mut()
            .zip(&self.triplet_grad.scorer.weight)
        {
            *a += beta * b;
        }
        for (a, b) in g.scorer.bias.iter_mut().zip(&self.triplet_grad.scorer.bias) {
            *a += beta * b;
        }
        if let (Some(p), Some(t)) = (&mut g.projection, &self.triplet_grad.projection) {
            for (a, b) in p.params_mut().zip(t.params()) {
                *a += beta * b;
            }
        }
        g
    }
}

/// A batch of pixels drawn from a dataset.
#[derive(Debug, Clone)]
pub struct Batch {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_indices(data: &Dataset, indices: &[usize]) -> Self {
        let mut features = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if let Some(l) = data.labels.get(i) {
                features.push(data.features.pixel(i).to_vec());
                labels.push(l);
            }
        }
        Self { features, labels }
    }
}

/// Evaluates both objective terms and their gradients on `batch`.
///
/// The triplet term is the mean hinge over `triplets`, computed on projected
/// logits; it is zero (with zero gradient) when `triplets` is empty or no
/// projection is supplied.
pub fn objective(
    h: &ClassHierarchy,
    scorer: &ToyScorer,
    projection: Option<&Projection>,
    batch: &Batch,
    triplets: &[Triplet],
    cfg: &TrainConfig,
) -> Result<ObjectiveParts> {
    let n = h.len();
    let b = batch.labels.len();
    let logits: Vec<Vec<f64>> = batch.features.iter().map(|x| scorer.logits(x)).collect();
    if logits.iter().flatten().any(|z| !z.is_finite()) {
        return Err(Error::Numerical(
            "non-finite logits; training diverged".into(),
        ));
    }

    // Classification term through the shared field loss.
    let mut data = Vec::with_capacity(b * n);
    for z in &logits {
        if cfg.loss == LossKind::Cce {
            let leaf_z: Vec<f64> = h.leaves().iter().map(|&l| z[l]).collect();
            let mut s = vec![0.0; n];
            for (&l, y) in h.leaves().iter().zip(softmax(&leaf_z)) {
                s[l] = y;
            }
            data.extend(s);
        } else {
            data.extend(z.iter().map(|&x| sigmoid(x)));
        }
    }
    let scores = ScoreField::new(1, b, n, data)?;
    let labels = LabelField::new(1, b, batch.labels.iter().map(|&l| l as u32).collect())?;
    let cls = field_loss(h, &scores, &labels, cfg.loss, &cfg.focal)?;

    let mut grad_logits = vec![0.0; b * n];
    for i in 0..b {
        let s = scores.pixel(i);
        let gs = &cls.grad[i * n..(i + 1) * n];
        let gz = &mut grad_logits[i * n..(i + 1) * n];
        if cfg.loss == LossKind::Cce {
            let y: Vec<f64> = h.leaves().iter().map(|&l| s[l]).collect();
            let gy: Vec<f64> = h.leaves().iter().map(|&l| gs[l]).collect();
            for (&l, g) in h.leaves().iter().zip(softmax_backward(&y, &gy)) {
                gz[l] = g;
            }
        } else {
            for v in 0..n {
                gz[v] = gs[v] * s[v] * (1.0 - s[v]);
            }
        }
    }
    let classification_grad = scorer_grad(scorer, projection, batch, &grad_logits);

    // Triplet term.
    let mut triplet_grad = Gradients::zeros(scorer, projection);
    let mut triplet = 0.0;
    let mut used = 0;
    if let (Some(proj), false) = (projection, triplets.is_empty()) {
        let mut cache = vec![None; b];
        for t in triplets {
            for i in [t.anchor, t.positive, t.negative] {
                if cache[i].is_none() {
                    cache[i] = Some(proj.forward(&logits[i])?);
                }
            }
        }
        let scale = 1.0 / triplets.len() as f64;
        let mut grad_out: Vec<Option<Vec<f64>>> = vec![None; b];
        for t in triplets {
            let emb = |i: usize| &cache[i].as_ref().expect("cached").0;
            let r = tree_triplet_loss(emb(t.anchor), emb(t.positive), emb(t.negative), t.margin)?;
            triplet += r.value;
            for (i, g) in [
                (t.anchor, r.grad_anchor),
                (t.positive, r.grad_positive),
                (t.negative, r.grad_negative),
            ] {
                let acc = grad_out[i].get_or_insert_with(|| vec![0.0; proj.output]);
                acc.iter_mut().zip(g).for_each(|(a, g)| *a += g * scale);
            }
        }
        triplet *= scale;
        used = triplets.len();

        let proj_grad = triplet_grad
            .projection
            .as_mut()
            .expect("projection present");
        let mut grad_logits = vec![0.0; b * n];
        for (i, g) in grad_out.iter().enumerate() {
            if let Some(g) = g {
                let (_, c) = cache[i].as_ref().expect("cached");
                let gz = proj.backward(c, g, proj_grad)?;
                grad_logits[i * n..(i + 1) * n].copy_from_slice(&gz);
            }
        }
        triplet_grad.scorer = scorer_grad(scorer, None, batch, &grad_logits).scorer;
    }

    Ok(ObjectiveParts {
        classification: cls.value,
        triplet,
        triplets_used: used,
        classification_grad,
        triplet_grad,
    })
}

fn scorer_grad(
    scorer: &ToyScorer,
    projection: Option<&Projection>,
    batch: &Batch,
    grad_logits: &[f64],
) -> Gradients {
    let mut g = Gradients::zeros(scorer, projection);
    let n = scorer.classes;
    for (i, x) in batch.features.iter().enumerate() {
        for v in 0..n {
            let gz = grad_logits[i * n + v];
            if gz == 0.0 {
                continue;
            }
            g.scorer.bias[v] += gz;
            let row = &mut g.scorer.weight[v * scorer.dim..(v + 1) * scorer.dim];
            row.iter_mut().zip(x).for_each(|(w, xi)| *w += gz * xi);
        }
    }
    g
}

/// Heavy-ball SGD with coupled weight decay.
#[derive(Debug, Clone)]
struct Sgd {
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    fn step<'a>(&mut self, params: impl Iterator<Item = &'a mut f64>, grads: &[f64]) {
        if self.velocity.is_empty() {
            self.velocity = vec![0.0; grads.len()];
        }
        for ((p, g), v) in params.zip(grads).zip(self.velocity.iter_mut()) {
            let d = g + self.weight_decay * *p;
            *v = self.momentum * *v + d;
            *p -= self.lr * *v;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub beta: f64,
    pub classification: f64,
    pub triplet: f64,
    pub total: f64,
    pub triplets: usize,
}

/// Share of pixels whose raw scores break a hierarchy constraint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoherenceStats {
    pub threshold: f64,
    pub pixels: usize,
    pub positive: usize,
    pub negative: usize,
    pub any: usize,
}

impl CoherenceStats {
    pub fn rate(&self) -> f64 {
        if self.pixels == 0 {
            0.0
        } else {
            self.any as f64 / self.pixels as f64
        }
    }
}

pub fn coherence_stats(
    h: &ClassHierarchy,
    scores: &ScoreField,
    threshold: f64,
) -> Result<CoherenceStats> {
    scores.check_hierarchy(h)?;
    let mut st = CoherenceStats {
        threshold,
        pixels: scores.num_pixels(),
        positive: 0,
        negative: 0,
        any: 0,
    };
    for s in scores.pixels() {
        let p = !check_positive_constraint(h, s, threshold)?.is_empty();
        let n = !check_negative_constraint(h, s, threshold)?.is_empty();
        st.positive += usize::from(p);
        st.negative += usize::from(n);
        st.any += usize::from(p || n);
    }
    Ok(st)
}

/// Everything a training run produces; serializable as the run artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub config: TrainConfig,
    /// Class names by node id, for reports.
    pub class_names: Vec<String>,
    pub steps: Vec<StepRecord>,
    pub levels: Vec<LevelScore>,
    pub coherence: CoherenceStats,
    pub scorer: ToyScorer,
}

impl TrainRun {
    pub fn leaf_miou(&self) -> f64 {
        self.levels.first().map_or(0.0, |l| l.miou)
    }
}

/// Trains a [`ToyScorer`] on `train` and evaluates it on `eval`.
pub fn train(
    h: &ClassHierarchy,
    train: &Dataset,
    eval: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainRun> {
    cfg.validate()?;
    train.labels.validate(h)?;
    eval.labels.validate(h)?;
    if train.features.dim != eval.features.dim {
        return Err(Error::invalid("train and eval feature widths differ"));
    }
    let pool: Vec<usize> = (0..train.labels.num_pixels())
        .filter(|&i| train.labels.get(i).is_some())
        .collect();
    if pool.is_empty() {
        return Err(Error::invalid("training set has no labeled pixels"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut scorer = ToyScorer::random(h.len(), train.features.dim, &mut rng);
    // Projection init and triplet draws use their own stream so enabling the
    // triplet term leaves the batch sequence untouched.
    let mut aux = ChaCha8Rng::seed_from_u64(cfg.seed);
    aux.set_stream(1);
    let mut projection = cfg
        .tree_triplet
        .then(|| Projection::random(h.len(), PROJECTION_DIM, &mut aux));
    let new_sgd = || Sgd {
        lr: cfg.learning_rate,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        velocity: Vec::new(),
    };
    let (mut opt_scorer, mut opt_proj) = (new_sgd(), new_sgd());

    let batch_size = cfg.batch_size.min(pool.len());
    let mut steps = Vec::with_capacity(cfg.iterations);
    for step in 0..cfg.iterations {
        let picks = index::sample(&mut rng, pool.len(), batch_size);
        let indices: Vec<usize> = picks.iter().map(|k| pool[k]).collect();
        let batch = Batch::from_indices(train, &indices);

        let beta = if cfg.tree_triplet {
            cfg.beta_schedule.at(step, cfg.iterations, cfg.beta_max)?
        } else {
            0.0
        };
        let triplets = if cfg.tree_triplet && beta > 0.0 && cfg.triplet_count > 0 {
            sample_triplets_with(h, &batch.labels, cfg.triplet_count, &cfg.margin, &mut aux)?
        } else {
            Vec::new()
        };
        let parts = objective(h, &scorer, projection.as_ref(), &batch, &triplets, cfg)?;
        let total = parts.value(beta);
        if !total.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss {total} at step {step} (classification {}, triplet {})",
                parts.classification, parts.triplet
            )));
        }
        let g = parts.combined(beta);
        let scorer_grads: Vec<f64> = g
            .scorer
            .weight
            .iter()
            .chain(&g.scorer.bias)
            .copied()
            .collect();
        opt_scorer.step(
            scorer.weight.iter_mut().chain(scorer.bias.iter_mut()),
            &scorer_grads,
        );
        if let (Some(p), Some(gp)) = (projection.as_mut(), g.projection.as_ref()) {
            let flat: Vec<f64> = gp.params().copied().collect();
            opt_proj.step(p.params_mut(), &flat);
        }
        steps.push(StepRecord {
            step,
            beta,
            classification: parts.classification,
            triplet: parts.triplet,
            total,
            triplets: parts.triplets_used,
        });
    }

    let pred = scorer.predict(h, cfg.loss, &eval.features)?;
    let levels = evaluate_prediction(h, &pred, &eval.labels)?;
    let coherence = coherence_stats(h, &scorer.score_field(&eval.features)?, DEFAULT_THRESHOLD)?;
    Ok(TrainRun {
        config: cfg.clone(),
        class_names: h.names().to_vec(),
        steps,
        levels,
        coherence,
        scorer,
    })
}
