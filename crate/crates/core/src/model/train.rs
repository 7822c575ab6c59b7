use std::collections::{BTreeMap, HashMap};

use log::debug;
use rand::seq::SliceRandom;
use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::params::{Activation, Architecture, Input, ModelParams, ModelShape};
use super::{objective_loss, Model, Objective};
use crate::corpus::{Corpus, ObjectFeatures};
use crate::error::{Error, Result};
use crate::pseudo::{roi_mixup_with_lambda, sample_beta_with, Example, MixupConfig};
use crate::scalar::Scalar;
use crate::seed::{derive_seed, rng_from, Rng};

/// Features and tokenized questions addressable by id.
#[derive(Debug, Clone, Default)]
pub struct Store<T> {
    pub features: BTreeMap<String, ObjectFeatures<T>>,
    pub tokens: HashMap<String, Vec<String>>,
}

impl<T: Scalar> Store<T> {
    pub fn from_corpus(corpus: &Corpus) -> Self {
        let mut s = Self::default();
        s.extend(corpus);
        s
    }

    pub fn extend(&mut self, corpus: &Corpus) {
        for (id, f) in &corpus.features {
            self.features.insert(id.clone(), f.cast());
        }
        for q in &corpus.questions {
            self.tokens.insert(q.id.clone(), q.tokens.clone());
        }
    }

    pub fn input(&self, image_id: &str, question_id: &str) -> Result<Input<'_, T>> {
        let regions = self
            .features
            .get(image_id)
            .ok_or_else(|| Error::invalid(format!("no features for image `{image_id}`")))?;
        let tokens = self
            .tokens
            .get(question_id)
            .ok_or_else(|| Error::invalid(format!("unknown question `{question_id}`")))?;
        Ok(Input { regions, tokens })
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.features.values().next().map(|f| f.dim)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub buckets: usize,
    pub d_t: usize,
    pub d_v: usize,
    pub h1: usize,
    pub h2: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            buckets: 4096,
            d_t: 32,
            d_v: 32,
            h1: 64,
            h2: 64,
            activation: Activation::Relu,
        }
    }
}

impl ModelConfig {
    pub fn shape(&self, k: usize, feature_dim: usize, aux: bool) -> ModelShape {
        ModelShape {
            k,
            feature_dim,
            buckets: self.buckets,
            d_t: self.d_t,
            d_v: self.d_v,
            h1: self.h1,
            h2: self.h2,
            activation: self.activation,
            aux,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Optimizer {
    Sgd,
    /// Adam with the usual moment decay rates.
    AdaptiveMoment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// RoI Mixup on training examples; `None` disables it.
    pub mixup: Option<MixupConfig>,
    /// Pseudo UQs drawn per epoch, relative to the number of AQs.
    pub pseudo_ratio: f64,
    pub optimizer: Optimizer,
    /// Weight of the detector loss for [`Architecture::Branched`].
    pub aux_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 20,
            batch_size: 32,
            seed: 0,
            mixup: None,
            pseudo_ratio: 1.0,
            optimizer: Optimizer::Sgd,
            aux_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be > 0"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be >= 1"));
        }
        if !(self.pseudo_ratio >= 0.0 && self.pseudo_ratio.is_finite()) {
            return Err(Error::invalid("pseudo_ratio must be >= 0"));
        }
        if !(self.aux_weight >= 0.0) {
            return Err(Error::invalid("aux_weight must be >= 0"));
        }
        if let Some(m) = &self.mixup {
            m.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean example loss per epoch.
    pub epoch_loss: Vec<f64>,
    /// Second network's losses (the detector of a separated model).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub detector_loss: Vec<f64>,
}

struct Adam<T> {
    m: ModelParams<T>,
    v: ModelParams<T>,
    t: i32,
}

enum OptState<T> {
    Sgd,
    Adam(Box<Adam<T>>),
}

impl<T: Scalar> OptState<T> {
    fn new(kind: Optimizer, shape: ModelShape) -> Self {
        match kind {
            Optimizer::Sgd => Self::Sgd,
            Optimizer::AdaptiveMoment => Self::Adam(Box::new(Adam {
                m: ModelParams::zeros(shape),
                v: ModelParams::zeros(shape),
                t: 0,
            })),
        }
    }

    fn step(&mut self, params: &mut ModelParams<T>, grad: &ModelParams<T>, lr: f64) {
        let lr = T::of(lr);
        match self {
            Self::Sgd => {
                for ((_, p), (_, g)) in params.blocks_mut().into_iter().zip(grad.blocks()) {
                    for (p, &g) in p.iter_mut().zip(g) {
                        *p -= lr * g;
                    }
                }
            }
            Self::Adam(st) => {
                let (b1, b2, eps) = (T::of(0.9), T::of(0.999), T::of(1e-8));
                st.t += 1;
                let c1 = T::one() - b1.powi(st.t);
                let c2 = T::one() - b2.powi(st.t);
                let Adam { m, v, .. } = st.as_mut();
                for (((_, p), (_, g)), ((_, m), (_, v))) in params
                    .blocks_mut()
                    .into_iter()
                    .zip(grad.blocks())
                    .zip(m.blocks_mut().into_iter().zip(v.blocks_mut()))
                {
                    for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = b1 * *m + (T::one() - b1) * g;
                        *v = b2 * *v + (T::one() - b2) * g * g;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

fn scale(grad: &mut ModelParams<impl Scalar>, by: f64) {
    for (_, b) in grad.blocks_mut() {
        for v in b.iter_mut() {
            *v *= Scalar::of(by);
        }
    }
}

fn accumulate<T: Scalar>(
    params: &ModelParams<T>,
    obj: Objective,
    input: &Input<'_, T>,
    target: &[T],
    grad: &mut ModelParams<T>,
) -> Result<f64> {
    let fwd = params.forward(input);
    let (loss, dz, daux) = objective_loss(obj, &fwd, target)?;
    params.backward(&fwd, &dz, daux, grad);
    Ok(loss.as_f64())
}

/// One network trained against one objective.
fn fit<T: Scalar>(
    params: &mut ModelParams<T>,
    obj: Objective,
    aq: &[Example<T>],
    pseudo: &[Example<T>],
    store: &Store<T>,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let images: Vec<&String> = store.features.keys().collect();
    let n_pseudo = ((cfg.pseudo_ratio * aq.len() as f64).round() as usize).min(pseudo.len());
    let mut opt = OptState::new(cfg.optimizer, params.shape);
    let mut grad = ModelParams::zeros(params.shape);
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<&Example<T>> = aq.iter().collect();
        order.extend(sample(rng, pseudo.len(), n_pseudo).into_iter().map(|i| &pseudo[i]));
        order.shuffle(rng);

        let (mut total, mut seen) = (0.0, 0usize);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            grad.fill_zero();
            let mut batch_loss = 0.0;
            let mut n_terms = 0usize;
            for ex in batch {
                let base = store.input(&ex.image_id, &ex.question_id)?;
                batch_loss += accumulate(params, obj, &base, &ex.target, &mut grad)?;
                n_terms += 1;
                // mixed copies are added next to the clean example
                if let Some(m) = &cfg.mixup {
                    if images.len() >= 2 && rng.random::<f64>() < m.apply_prob {
                        let lambda = sample_beta_with(rng, m.beta)?;
                        let donor = loop {
                            let d = images[rng.random_range(0..images.len())];
                            if *d != ex.image_id {
                                break &store.features[d];
                            }
                        };
                        let mx = roi_mixup_with_lambda(ex, base.regions, donor, lambda, rng)?;
                        let input = Input {
                            regions: &mx.features,
                            tokens: base.tokens,
                        };
                        batch_loss += accumulate(params, obj, &input, &mx.target, &mut grad)?;
                        n_terms += 1;
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: batch_loss,
                });
            }
            total += batch_loss;
            seen += n_terms;
            scale(&mut grad, 1.0 / n_terms as f64);
            opt.step(params, &grad, cfg.learning_rate);
            if !params.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: batch_loss,
                });
            }
        }
        let mean = total / seen.max(1) as f64;
        debug!("epoch {epoch}: loss {mean:.5}");
        log.push(mean);
    }
    Ok(log)
}

/// Train a classifier on answerable examples plus zero-target pseudo UQs.
///
/// `Separated` trains the answering network on the AQs alone and a second
/// network of the same shape as a binary detector on both streams.
pub fn train<T: Scalar>(
    aq: &[Example<T>],
    pseudo: &[Example<T>],
    store: &Store<T>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    arch: Architecture,
) -> Result<(Model<T>, TrainLog)> {
    cfg.validate()?;
    let first = aq.first().ok_or_else(|| Error::invalid("training needs at least one AQ"))?;
    let k = first.k();
    if let Some(e) = aq.iter().chain(pseudo).find(|e| e.k() != k) {
        return Err(Error::Shape(format!(
            "example `{}` has a {}-dim target, expected {k}",
            e.question_id,
            e.k()
        )));
    }
    let dim = store
        .feature_dim()
        .ok_or_else(|| Error::invalid("feature store is empty"))?;
    let seed = cfg.seed;

    let obj = Objective::for_arch(arch, cfg.aux_weight);
    let shape = model_cfg.shape(k, dim, obj.needs_aux());
    let mut vqa = ModelParams::init(shape, &mut rng_from(derive_seed(seed, "init")));
    let mut rng = rng_from(derive_seed(seed, "train"));
    let mut log = TrainLog::default();

    if arch == Architecture::Separated {
        log.epoch_loss = fit(&mut vqa, Objective::Integrated, aq, &[], store, cfg, &mut rng)?;
        let det_shape = model_cfg.shape(k, dim, true);
        let mut det = ModelParams::init(det_shape, &mut rng_from(derive_seed(seed, "init/detector")));
        let mut det_rng = rng_from(derive_seed(seed, "train/detector"));
        log.detector_loss = fit(&mut det, Objective::Detector, aq, pseudo, store, cfg, &mut det_rng)?;
        return Ok((
            Model {
                arch,
                vqa,
                detector: Some(det),
            },
            log,
        ));
    }
    log.epoch_loss = fit(&mut vqa, obj, aq, pseudo, store, cfg, &mut rng)?;
    Ok((
        Model {
            arch,
            vqa,
            detector: None,
        },
        log,
    ))
}
