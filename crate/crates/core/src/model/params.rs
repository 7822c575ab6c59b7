use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::seed::{stable_hash, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    Integrated,
    Branched,
    Separated,
    KPlusOne,
}

impl Architecture {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().replace(['-', '_', '+'], "").as_str() {
            "integrated" => Some(Self::Integrated),
            "branched" => Some(Self::Branched),
            "separated" => Some(Self::Separated),
            "kplusone" | "k1" => Some(Self::KPlusOne),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    /// No nonlinearity; used to check gradients on a purely linear model.
    Identity,
}

impl Activation {
    fn apply<T: Scalar>(self, a: T) -> T {
        match self {
            Self::Relu => a.max(T::zero()),
            Self::Identity => a,
        }
    }

    fn derivative<T: Scalar>(self, a: T) -> T {
        match self {
            Self::Relu if a > T::zero() => T::one(),
            Self::Relu => T::zero(),
            Self::Identity => T::one(),
        }
    }
}

/// Layer widths and vocabulary size of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub k: usize,
    pub feature_dim: usize,
    pub buckets: usize,
    pub d_t: usize,
    pub d_v: usize,
    pub h1: usize,
    pub h2: usize,
    pub activation: Activation,
    /// One extra output logit (binary detector or the UQ class).
    pub aux: bool,
}

impl ModelShape {
    /// Hash bucket of a token. The row after the last bucket is the null token.
    pub fn bucket(&self, token: &str) -> usize {
        (stable_hash(token.as_bytes()) % self.buckets as u64) as usize
    }

    pub fn null_row(&self) -> usize {
        self.buckets
    }
}

/// Fully connected layer `y = W x + b` with `W` stored row-major (`out x inp`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub out: usize,
    pub inp: usize,
    pub w: Vec<T>,
    pub b: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(out: usize, inp: usize) -> Self {
        Self {
            out,
            inp,
            w: vec![T::zero(); out * inp],
            b: vec![T::zero(); out],
        }
    }

    fn init(out: usize, inp: usize, rng: &mut Rng) -> Self {
        let a = (6.0 / (inp + out) as f64).sqrt();
        Self {
            out,
            inp,
            w: (0..out * inp).map(|_| T::of(rng.random_range(-a..a))).collect(),
            b: vec![T::zero(); out],
        }
    }

    pub fn forward(&self, x: &[T]) -> Vec<T> {
        debug_assert_eq!(x.len(), self.inp);
        self.w
            .chunks_exact(self.inp)
            .zip(&self.b)
            .map(|(row, &b)| row.iter().zip(x).fold(b, |acc, (&w, &xi)| acc + w * xi))
            .collect()
    }

    /// Accumulate parameter gradients into `grad`; return `dL/dx` if asked.
    fn backward(&self, x: &[T], dy: &[T], grad: &mut Dense<T>, want_dx: bool) -> Option<Vec<T>> {
        let mut dx = want_dx.then(|| vec![T::zero(); self.inp]);
        for (o, &d) in dy.iter().enumerate() {
            if d == T::zero() {
                continue;
            }
            grad.b[o] += d;
            let gw = &mut grad.w[o * self.inp..(o + 1) * self.inp];
            for (g, &xi) in gw.iter_mut().zip(x) {
                *g += d * xi;
            }
            if let Some(dx) = dx.as_mut() {
                let row = &self.w[o * self.inp..(o + 1) * self.inp];
                for (acc, &w) in dx.iter_mut().zip(row) {
                    *acc += d * w;
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub shape: ModelShape,
    /// `(buckets + 1) x d_t`; the last row embeds the empty question.
    pub token_embedding: Vec<T>,
    pub visual: Dense<T>,
    pub trunk1: Dense<T>,
    pub trunk2: Dense<T>,
    pub answer_head: Dense<T>,
    pub aux_head: Option<Dense<T>>,
}

/// What the model sees for one example.
#[derive(Debug, Clone, Copy)]
pub struct Input<'a, T> {
    pub regions: &'a crate::corpus::ObjectFeatures<T>,
    pub tokens: &'a [String],
}

/// Intermediates kept from a forward pass for backprop.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward<T> {
    pub rows: Vec<usize>,
    pub mean_region: Vec<T>,
    pub x: Vec<T>,
    pub a1: Vec<T>,
    pub h1: Vec<T>,
    pub a2: Vec<T>,
    /// Trunk output; the penultimate feature.
    pub hidden: Vec<T>,
    pub logits: Vec<T>,
    pub aux: Option<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(shape: ModelShape) -> Self {
        Self {
            shape,
            token_embedding: vec![T::zero(); (shape.buckets + 1) * shape.d_t],
            visual: Dense::zeros(shape.d_v, shape.feature_dim),
            trunk1: Dense::zeros(shape.h1, shape.d_t + shape.d_v),
            trunk2: Dense::zeros(shape.h2, shape.h1),
            answer_head: Dense::zeros(shape.k, shape.h2),
            aux_head: shape.aux.then(|| Dense::zeros(1, shape.h2)),
        }
    }

    pub fn init(shape: ModelShape, rng: &mut Rng) -> Self {
        let token_embedding = (0..(shape.buckets + 1) * shape.d_t)
            .map(|_| T::of(rng.random_range(-1.0..1.0)))
            .collect();
        let visual = Dense::init(shape.d_v, shape.feature_dim, rng);
        let trunk1 = Dense::init(shape.h1, shape.d_t + shape.d_v, rng);
        let trunk2 = Dense::init(shape.h2, shape.h1, rng);
        let answer_head = Dense::init(shape.k, shape.h2, rng);
        let aux_head = shape.aux.then(|| Dense::init(1, shape.h2, rng));
        Self {
            shape,
            token_embedding,
            visual,
            trunk1,
            trunk2,
            answer_head,
            aux_head,
        }
    }

    /// Named parameter blocks in a fixed order.
    pub fn blocks(&self) -> Vec<(&'static str, &[T])> {
        let mut out: Vec<(&'static str, &[T])> = vec![
            ("token_embedding", &self.token_embedding),
            ("visual.w", &self.visual.w),
            ("visual.b", &self.visual.b),
            ("trunk1.w", &self.trunk1.w),
            ("trunk1.b", &self.trunk1.b),
            ("trunk2.w", &self.trunk2.w),
            ("trunk2.b", &self.trunk2.b),
            ("answer_head.w", &self.answer_head.w),
            ("answer_head.b", &self.answer_head.b),
        ];
        if let Some(aux) = &self.aux_head {
            out.push(("aux_head.w", &aux.w));
            out.push(("aux_head.b", &aux.b));
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(&'static str, &mut [T])> {
        let mut out: Vec<(&'static str, &mut [T])> = vec![
            ("token_embedding", &mut self.token_embedding),
            ("visual.w", &mut self.visual.w),
            ("visual.b", &mut self.visual.b),
            ("trunk1.w", &mut self.trunk1.w),
            ("trunk1.b", &mut self.trunk1.b),
            ("trunk2.w", &mut self.trunk2.w),
            ("trunk2.b", &mut self.trunk2.b),
            ("answer_head.w", &mut self.answer_head.w),
            ("answer_head.b", &mut self.answer_head.b),
        ];
        if let Some(aux) = &mut self.aux_head {
            out.push(("aux_head.w", &mut aux.w));
            out.push(("aux_head.b", &mut aux.b));
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|(_, b)| b.iter().all(|v| v.is_finite()))
    }

    pub fn fill_zero(&mut self) {
        for (_, b) in self.blocks_mut() {
            b.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let c = |v: &[T]| v.iter().map(|x| U::of(x.as_f64())).collect::<Vec<U>>();
        let d = |l: &Dense<T>| Dense {
            out: l.out,
            inp: l.inp,
            w: c(&l.w),
            b: c(&l.b),
        };
        ModelParams {
            shape: self.shape,
            token_embedding: c(&self.token_embedding),
            visual: d(&self.visual),
            trunk1: d(&self.trunk1),
            trunk2: d(&self.trunk2),
            answer_head: d(&self.answer_head),
            aux_head: self.aux_head.as_ref().map(d),
        }
    }

    fn embedding_row(&self, r: usize) -> &[T] {
        &self.token_embedding[r * self.shape.d_t..(r + 1) * self.shape.d_t]
    }

    /// Question and image vectors concatenated, plus their inputs.
    fn encode_inputs(&self, input: &Input<'_, T>) -> (Vec<usize>, Vec<T>, Vec<T>) {
        let s = &self.shape;
        let rows: Vec<usize> = if input.tokens.is_empty() {
            vec![s.null_row()]
        } else {
            input.tokens.iter().map(|t| s.bucket(t)).collect()
        };
        let mut q = vec![T::zero(); s.d_t];
        for &r in &rows {
            for (acc, &e) in q.iter_mut().zip(self.embedding_row(r)) {
                *acc += e;
            }
        }
        let inv = T::one() / T::of(rows.len() as f64);
        q.iter_mut().for_each(|v| *v *= inv);
        // mean of projected regions == projection of the mean region
        let mean_region = input.regions.mean_region();
        let mut x = q;
        x.extend(self.visual.forward(&mean_region));
        (rows, mean_region, x)
    }

    pub fn forward(&self, input: &Input<'_, T>) -> Forward<T> {
        let act = self.shape.activation;
        let (rows, mean_region, x) = self.encode_inputs(input);
        let a1 = self.trunk1.forward(&x);
        let h1: Vec<T> = a1.iter().map(|&a| act.apply(a)).collect();
        let a2 = self.trunk2.forward(&h1);
        let hidden: Vec<T> = a2.iter().map(|&a| act.apply(a)).collect();
        let logits = self.answer_head.forward(&hidden);
        let aux = self.aux_head.as_ref().map(|h| h.forward(&hidden)[0]);
        Forward {
            rows,
            mean_region,
            x,
            a1,
            h1,
            a2,
            hidden,
            logits,
            aux,
        }
    }

    /// Trunk output for one input.
    pub fn encode(&self, input: &Input<'_, T>) -> Vec<T> {
        self.forward(input).hidden
    }

    /// Backpropagate `dL/dlogits` and `dL/daux` into `grad`. Returns
    /// `dL/d(mean region)`.
    pub fn backward(&self, fwd: &Forward<T>, dlogits: &[T], daux: Option<T>, grad: &mut ModelParams<T>) -> Vec<T> {
        let s = &self.shape;
        let act = s.activation;
        let mut dh = self
            .answer_head
            .backward(&fwd.hidden, dlogits, &mut grad.answer_head, true)
            .expect("dx requested");
        if let (Some(head), Some(d), Some(g)) = (&self.aux_head, daux, grad.aux_head.as_mut()) {
            let dx = head.backward(&fwd.hidden, &[d], g, true).expect("dx requested");
            for (a, b) in dh.iter_mut().zip(dx) {
                *a += b;
            }
        }
        let da2: Vec<T> = dh.iter().zip(&fwd.a2).map(|(&d, &a)| d * act.derivative(a)).collect();
        let dh1 = self.trunk2.backward(&fwd.h1, &da2, &mut grad.trunk2, true).expect("dx requested");
        let da1: Vec<T> = dh1.iter().zip(&fwd.a1).map(|(&d, &a)| d * act.derivative(a)).collect();
        let dx = self.trunk1.backward(&fwd.x, &da1, &mut grad.trunk1, true).expect("dx requested");

        let (dq, dv) = dx.split_at(s.d_t);
        let inv = T::one() / T::of(fwd.rows.len() as f64);
        for &r in &fwd.rows {
            let row = &mut grad.token_embedding[r * s.d_t..(r + 1) * s.d_t];
            for (g, &d) in row.iter_mut().zip(dq) {
                *g += d * inv;
            }
        }
        self.visual
            .backward(&fwd.mean_region, dv, &mut grad.visual, true)
            .expect("dx requested")
    }

    /// `dL/d(region m)` for every region, given `dL/d(mean region)`.
    pub fn region_gradient(&self, d_mean: &[T], m: usize) -> Vec<T> {
        let inv = T::one() / T::of(m as f64);
        let row: Vec<T> = d_mean.iter().map(|&d| d * inv).collect();
        row.repeat(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ObjectFeatures;
    use crate::seed::rng_from;

    fn shape() -> ModelShape {
        ModelShape {
            k: 3,
            feature_dim: 4,
            buckets: 16,
            d_t: 3,
            d_v: 3,
            h1: 5,
            h2: 4,
            activation: Activation::Relu,
            aux: false,
        }
    }

    fn feats(data: Vec<f64>) -> ObjectFeatures<f64> {
        ObjectFeatures::new("i", data.len() / 4, 4, data).unwrap()
    }

    #[test]
    fn deterministic_and_permutation_invariant() {
        let p = ModelParams::<f64>::init(shape(), &mut rng_from(1));
        let toks = vec!["what".to_string(), "color".into()];
        let a = feats(vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 0.0, 2.0]);
        let b = feats(vec![-1.0, 0.5, 0.0, 2.0, 1.0, 2.0, 3.0, 4.0]);
        let fa = p.forward(&Input { regions: &a, tokens: &toks });
        let fa2 = p.forward(&Input { regions: &a, tokens: &toks });
        let fb = p.forward(&Input { regions: &b, tokens: &toks });
        assert_eq!(fa, fa2);
        for (x, y) in fa.hidden.iter().zip(&fb.hidden) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_params_give_zero_hidden() {
        let p = ModelParams::<f64>::zeros(shape());
        let f = feats(vec![1.0; 8]);
        let out = p.forward(&Input { regions: &f, tokens: &[] });
        assert!(out.hidden.iter().all(|&h| h == 0.0));
        assert_eq!(out.rows, [16]);
    }

    #[test]
    fn block_names_are_unique() {
        let mut s = shape();
        s.aux = true;
        let p = ModelParams::<f32>::zeros(s);
        let names: std::collections::BTreeSet<_> = p.blocks().iter().map(|(n, _)| *n).collect();
        assert_eq!(names.len(), 11);
        assert_eq!(p.n_params(), 17 * 3 + 4 * 3 + 3 + 6 * 5 + 5 + 5 * 4 + 4 + 4 * 3 + 3 + 4 + 1);
    }
}
