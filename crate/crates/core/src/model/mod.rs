//! Small multi-label VQA classifier with hand-written gradients.
//!
//! Hashed bag-of-tokens plus mean-pooled, projected regions feed a two-layer
//! trunk; a `K`-way sigmoid head answers, and an optional extra logit serves
//! as a binary detector or as the UQ class.

mod checkpoint;
mod params;
mod train;

pub use checkpoint::{load_model, save_model, CheckpointManifest};
pub use params::{Activation, Architecture, Dense, Forward, Input, ModelParams, ModelShape};
pub use train::{train, ModelConfig, Optimizer, Store, TrainConfig, TrainLog};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Lower/upper clamp applied to probabilities before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// `-sum_k [y_k ln f_k + (1 - y_k) ln(1 - f_k)]` on clamped scores, and the
/// gradient with respect to the logits, `f - y`.
pub fn bce_loss<T: Scalar>(scores: &[T], target: &[T]) -> Result<(T, Vec<T>)> {
    if scores.len() != target.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {}-dim target",
            scores.len(),
            target.len()
        )));
    }
    let lo = T::of(PROB_CLAMP);
    let hi = T::one() - lo;
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(scores.len());
    for (&f, &y) in scores.iter().zip(target) {
        let fc = f.max(lo).min(hi);
        loss -= y * fc.ln() + (T::one() - y) * (T::one() - fc).ln();
        grad.push(f - y);
    }
    Ok((loss, grad))
}

/// Same loss evaluated from logits: `softplus(z) - y z` per output.
pub fn bce_with_logits<T: Scalar>(logits: &[T], target: &[T]) -> (T, Vec<T>) {
    let mut loss = T::zero();
    let grad = logits
        .iter()
        .zip(target)
        .map(|(&z, &y)| {
            loss += z.softplus() - y * z;
            z.sigmoid() - y
        })
        .collect();
    (loss, grad)
}

pub fn softmax<T: Scalar>(z: &[T]) -> Vec<T> {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_sum_exp<T: Scalar>(z: &[T]) -> T {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    m + z.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

/// Training loss attached to a set of outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Objective {
    /// BCE on the `K` answer logits.
    Integrated,
    /// Answer BCE on answerable examples only, plus weighted BCE on the
    /// extra logit with target "answerable".
    Branched { aux_weight: f64 },
    /// Softmax cross-entropy over `K + 1` classes, the last being UQ.
    KPlusOne,
    /// BCE on the extra logit only.
    Detector,
}

impl Objective {
    pub fn for_arch(arch: Architecture, aux_weight: f64) -> Self {
        match arch {
            Architecture::Integrated | Architecture::Separated => Self::Integrated,
            Architecture::Branched => Self::Branched { aux_weight },
            Architecture::KPlusOne => Self::KPlusOne,
        }
    }

    pub fn needs_aux(self) -> bool {
        !matches!(self, Self::Integrated)
    }
}

/// Loss of one forward pass and its gradients w.r.t. the answer logits and
/// the extra logit. `target` is the (possibly mixup-scaled) label vector;
/// its sum is the soft "answerable" target.
pub fn objective_loss<T: Scalar>(obj: Objective, fwd: &Forward<T>, target: &[T]) -> Result<(T, Vec<T>, Option<T>)> {
    let k = fwd.logits.len();
    if target.len() != k {
        return Err(Error::Shape(format!("{k} logits vs {}-dim target", target.len())));
    }
    let mass = target.iter().copied().sum::<T>().min(T::one());
    let aux = |what: &'static str| fwd.aux.ok_or(Error::NotDifferentiable(what));
    Ok(match obj {
        Objective::Integrated => {
            let (l, g) = bce_with_logits(&fwd.logits, target);
            (l, g, fwd.aux.map(|_| T::zero()))
        }
        Objective::Branched { aux_weight } => {
            let w = T::of(aux_weight);
            let a = aux("branched objective needs an aux head")?;
            let (mut loss, dz) = if mass > T::zero() {
                let inv = T::one() / target.iter().copied().sum::<T>();
                let hard: Vec<T> = target.iter().map(|&y| y * inv).collect();
                bce_with_logits(&fwd.logits, &hard)
            } else {
                (T::zero(), vec![T::zero(); k])
            };
            loss += w * (a.softplus() - mass * a);
            (loss, dz, Some(w * (a.sigmoid() - mass)))
        }
        Objective::KPlusOne => {
            let a = aux("K+1 objective needs an extra logit")?;
            let mut z = fwd.logits.clone();
            z.push(a);
            let mut p_target = target.to_vec();
            p_target.push(T::one() - mass);
            let total = p_target.iter().copied().sum::<T>();
            let loss = total * log_sum_exp(&z) - z.iter().zip(&p_target).map(|(&zi, &pi)| zi * pi).sum::<T>();
            let p = softmax(&z);
            let d: Vec<T> = p.iter().zip(&p_target).map(|(&pi, &ti)| pi * total - ti).collect();
            let daux = d[k];
            (loss, d[..k].to_vec(), Some(daux))
        }
        Objective::Detector => {
            let a = aux("detector objective needs an aux head")?;
            (a.softplus() - mass * a, vec![T::zero(); k], Some(a.sigmoid() - mass))
        }
    })
}

/// Loss and full parameter gradient for one example.
pub fn loss_and_grad<T: Scalar>(
    params: &ModelParams<T>,
    obj: Objective,
    input: &Input<'_, T>,
    target: &[T],
) -> Result<(T, ModelParams<T>)> {
    let fwd = params.forward(input);
    let (loss, dz, daux) = objective_loss(obj, &fwd, target)?;
    let mut grad = ModelParams::zeros(params.shape);
    params.backward(&fwd, &dz, daux, &mut grad);
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    /// Largest relative error in each parameter block.
    pub blocks: Vec<(String, f64)>,
    pub max_rel_error: f64,
}

/// Compare analytic gradients to central differences on every parameter.
///
/// Relative error per entry is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn gradient_check(
    params: &ModelParams<f64>,
    obj: Objective,
    input: &Input<'_, f64>,
    target: &[f64],
    epsilon: f64,
) -> Result<GradCheck> {
    if !(epsilon > 1e-8 && epsilon < 1e-3) {
        return Err(Error::invalid(format!("epsilon must be in (1e-8, 1e-3), got {epsilon}")));
    }
    let (_, analytic) = loss_and_grad(params, obj, input, target)?;
    let loss_at = |p: &ModelParams<f64>| -> Result<f64> {
        let fwd = p.forward(input);
        Ok(objective_loss(obj, &fwd, target)?.0)
    };
    let mut probe = params.clone();
    let mut blocks = Vec::new();
    let n_blocks = analytic.blocks().len();
    for bi in 0..n_blocks {
        let (name, grads) = {
            let (n, g) = analytic.blocks()[bi];
            (n, g.to_vec())
        };
        let mut worst = 0.0f64;
        for (j, &a) in grads.iter().enumerate() {
            let orig = probe.blocks()[bi].1[j];
            probe.blocks_mut()[bi].1[j] = orig + epsilon;
            let up = loss_at(&probe)?;
            probe.blocks_mut()[bi].1[j] = orig - epsilon;
            let down = loss_at(&probe)?;
            probe.blocks_mut()[bi].1[j] = orig;
            let n = (up - down) / (2.0 * epsilon);
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        blocks.push((name.to_string(), worst));
    }
    let max_rel_error = blocks.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(GradCheck { blocks, max_rel_error })
}

/// Output of a model on one input.
#[derive(Debug, Clone, PartialEq)]
pub struct Scores<T> {
    pub arch: Architecture,
    pub logits: Vec<T>,
    /// `K` per-answer scores: sigmoids, or the first `K` softmax entries for
    /// [`Architecture::KPlusOne`].
    pub answer: Vec<T>,
    /// Detector sigmoid (Branched, Separated) or UQ-class probability (K+1).
    pub aux: Option<T>,
}

impl<T: Scalar> Scores<T> {
    /// Larger means more likely answerable.
    pub fn confidence(&self) -> T {
        match self.arch {
            Architecture::Integrated => max(&self.answer),
            Architecture::Branched | Architecture::Separated => self.aux.expect("detector score"),
            Architecture::KPlusOne => T::one() - self.aux.expect("UQ class probability"),
        }
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.answer)
    }
}

pub(crate) fn max<T: Scalar>(v: &[T]) -> T {
    v.iter().copied().fold(T::neg_infinity(), T::max)
}

/// First index of the maximum.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RejectionRule {
    pub theta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction<T> {
    pub accepted: bool,
    pub answer: Option<usize>,
    pub confidence: T,
}

fn decide<T: Scalar>(confidence: T, answer: usize, rule: RejectionRule) -> Prediction<T> {
    let accepted = confidence.as_f64() > rule.theta;
    Prediction {
        accepted,
        answer: accepted.then_some(answer),
        confidence,
    }
}

/// A trained classifier. `Separated` keeps its detector as a second network.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub arch: Architecture,
    pub vqa: ModelParams<T>,
    pub detector: Option<ModelParams<T>>,
}

impl<T: Scalar> Model<T> {
    pub fn k(&self) -> usize {
        self.vqa.shape.k
    }

    pub fn scores(&self, input: &Input<'_, T>) -> Scores<T> {
        let fwd = self.vqa.forward(input);
        self.scores_from(fwd.logits, fwd.aux, input)
    }

    fn scores_from(&self, logits: Vec<T>, aux_logit: Option<T>, input: &Input<'_, T>) -> Scores<T> {
        match self.arch {
            Architecture::Integrated => Scores {
                arch: self.arch,
                answer: logits.iter().map(|z| z.sigmoid()).collect(),
                logits,
                aux: None,
            },
            Architecture::Branched => Scores {
                arch: self.arch,
                answer: logits.iter().map(|z| z.sigmoid()).collect(),
                logits,
                aux: aux_logit.map(T::sigmoid),
            },
            Architecture::Separated => {
                let det = self.detector.as_ref().expect("separated model has a detector");
                let a = det.forward(input).aux.expect("detector has an aux head");
                Scores {
                    arch: self.arch,
                    answer: logits.iter().map(|z| z.sigmoid()).collect(),
                    logits,
                    aux: Some(a.sigmoid()),
                }
            }
            Architecture::KPlusOne => {
                let mut z = logits.clone();
                z.push(aux_logit.expect("K+1 model has an extra logit"));
                let mut p = softmax(&z);
                let uq = p.pop();
                Scores {
                    arch: self.arch,
                    logits,
                    answer: p,
                    aux: uq,
                }
            }
        }
    }

    /// Full `K + 1` softmax for [`Architecture::KPlusOne`].
    pub fn softmax_k_plus_one(&self, input: &Input<'_, T>) -> Option<Vec<T>> {
        (self.arch == Architecture::KPlusOne).then(|| {
            let fwd = self.vqa.forward(input);
            let mut z = fwd.logits;
            z.push(fwd.aux.expect("extra logit"));
            softmax(&z)
        })
    }

    pub fn predict(&self, input: &Input<'_, T>, rule: RejectionRule) -> Prediction<T> {
        let s = self.scores(input);
        decide(s.confidence(), s.argmax(), rule)
    }

    /// Penultimate features of the answering network.
    pub fn hidden(&self, input: &Input<'_, T>) -> Vec<T> {
        self.vqa.encode(input)
    }
}

pub fn predict_with_rejection<T: Scalar>(model: &Model<T>, input: &Input<'_, T>, rule: RejectionRule) -> Prediction<T> {
    model.predict(input, rule)
}

/// Per-answer product of member sigmoids.
pub fn ensemble_scores<T: Scalar>(models: &[&Model<T>], input: &Input<'_, T>) -> Result<Vec<T>> {
    let first = models.first().ok_or_else(|| Error::invalid("ensemble needs at least one model"))?;
    let k = first.k();
    let mut prod = vec![T::one(); k];
    for m in models {
        if m.arch != Architecture::Integrated {
            return Err(Error::invalid(format!("ensemble members must be Integrated, got {:?}", m.arch)));
        }
        if m.k() != k {
            return Err(Error::Shape(format!("ensemble member has K = {}, expected {k}", m.k())));
        }
        for (p, s) in prod.iter_mut().zip(m.scores(input).answer) {
            *p *= s;
        }
    }
    Ok(prod)
}

pub fn ensemble_predict<T: Scalar>(
    models: &[&Model<T>],
    input: &Input<'_, T>,
    rule: RejectionRule,
) -> Result<Prediction<T>> {
    let s = ensemble_scores(models, input)?;
    Ok(decide(max(&s), argmax(&s), rule))
}
