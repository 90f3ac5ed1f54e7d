use ndarray::{s, Array1, Array2, ArrayView1, Axis, Zip};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::input::{build_input, InputItem, ScorerInputSequence, Vocabulary, SEP};
use crate::binning::StreamBinning;
use crate::error::{Error, Result};
use crate::records::{Dataset, GenerationRecord, StreamMask};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const LOSS_EPSILON: f64 = 1e-7;
const EMBED_INIT: f64 = 0.05;
/// Examples per gradient chunk. Chunks are reduced in index order, so the
/// summation order does not depend on the thread count.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Mean of token embeddings fed to the feed-forward head.
    MeanPool,
    /// One single-head self-attention layer with a residual connection,
    /// mean-pooled, then the feed-forward head.
    Attention,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean_pool" => Ok(Variant::MeanPool),
            "attention" => Ok(Variant::Attention),
            other => Err(Error::invalid(format!("unknown encoder variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub emb: Array2<f64>,
    /// Learned positions; empty for [`Variant::MeanPool`].
    pub pos: Array2<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

impl Params {
    pub fn zeros(
        variant: Variant,
        vocab: usize,
        max_len: usize,
        embed: usize,
        hidden: usize,
    ) -> Self {
        let (l, a) = match variant {
            Variant::MeanPool => (0, 0),
            Variant::Attention => (max_len, embed),
        };
        Params {
            emb: Array2::zeros((vocab, embed)),
            pos: Array2::zeros((l, embed)),
            wq: Array2::zeros((a, a)),
            wk: Array2::zeros((a, a)),
            wv: Array2::zeros((a, a)),
            w1: Array2::zeros((embed, hidden)),
            b1: Array2::zeros((1, hidden)),
            w2: Array2::zeros((hidden, 1)),
            b2: Array2::zeros((1, 1)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |a: &Array2<f64>| Array2::zeros(a.raw_dim());
        Params {
            emb: z(&self.emb),
            pos: z(&self.pos),
            wq: z(&self.wq),
            wk: z(&self.wk),
            wv: z(&self.wv),
            w1: z(&self.w1),
            b1: z(&self.b1),
            w2: z(&self.w2),
            b2: z(&self.b2),
        }
    }

    pub fn tensors(&self) -> [&Array2<f64>; 9] {
        [
            &self.emb, &self.pos, &self.wq, &self.wk, &self.wv, &self.w1, &self.b1, &self.w2,
            &self.b2,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Array2<f64>; 9] {
        [
            &mut self.emb,
            &mut self.pos,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn add_assign(&mut self, other: &Params) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for a in self.tensors_mut() {
            a.mapv_inplace(|x| x * factor);
        }
    }

    /// All parameters in a fixed order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, index: usize, value: f64) {
        let mut offset = index;
        for t in self.tensors_mut() {
            if offset < t.len() {
                let cols = t.ncols();
                t[[offset / cols, offset % cols]] = value;
                return;
            }
            offset -= t.len();
        }
        panic!("parameter index {index} out of range");
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub max_len: usize,
    pub max_vocab: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Attention,
            embed_dim: 64,
            hidden_dim: 64,
            max_len: 256,
            max_vocab: 5000,
        }
    }
}

/// A labeled input already mapped to vocabulary ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    pub ids: Vec<usize>,
    pub label: u8,
}

/// The learned scoring function: vocabulary, binning, stream mask and
/// parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerModel {
    pub version: u32,
    pub name: String,
    pub config: ModelConfig,
    pub mask: StreamMask,
    pub bins: StreamBinning,
    pub vocab: Vocabulary,
    pub params: Params,
}

pub fn default_method_name(mask: StreamMask) -> String {
    if mask == StreamMask::ALL {
        "lemuq".to_string()
    } else if mask == StreamMask::FULL_ONLY {
        "lars".to_string()
    } else {
        format!("scorer[{mask}]")
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct Forward {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Array2<f64>,
    pooled: Array1<f64>,
    hidden: Array1<f64>,
    logit: f64,
}

impl ScorerModel {
    /// A fresh model with the given binning. Embeddings (and positions) are
    /// uniform in [-0.05, 0.05], projection matrices are Xavier-uniform, and
    /// the output layer is zero so the untrained score is exactly 0.5.
    pub fn new(
        bins: StreamBinning,
        vocab: Vocabulary,
        mask: StreamMask,
        config: ModelConfig,
        seed: u64,
    ) -> Result<Self> {
        bins.validate()?;
        if mask.is_empty() {
            return Err(Error::invalid("stream mask is empty"));
        }
        if vocab.k() != bins.k() {
            return Err(Error::ModelMismatch(
                "vocabulary and binning disagree on k".into(),
            ));
        }
        if config.embed_dim == 0
            || config.hidden_dim == 0
            || config.max_len < super::input::MIN_MAX_LEN
        {
            return Err(Error::invalid("invalid model dimensions"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::zeros(
            config.variant,
            vocab.len(),
            config.max_len,
            config.embed_dim,
            config.hidden_dim,
        );
        let embed = Uniform::new_inclusive(-EMBED_INIT, EMBED_INIT);
        params.emb.mapv_inplace(|_| embed.sample(&mut rng));
        params.pos.mapv_inplace(|_| embed.sample(&mut rng));
        for w in [
            &mut params.wq,
            &mut params.wk,
            &mut params.wv,
            &mut params.w1,
        ] {
            if w.is_empty() {
                continue;
            }
            let bound = (6.0 / (w.nrows() + w.ncols()) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            w.mapv_inplace(|_| dist.sample(&mut rng));
        }
        Ok(ScorerModel {
            version: CHECKPOINT_VERSION,
            name: default_method_name(mask),
            config,
            mask,
            bins,
            vocab,
            params,
        })
    }

    /// Fits the vocabulary on `train` and initializes with the given bins.
    pub fn with_bins(
        train: &Dataset,
        bins: StreamBinning,
        mask: StreamMask,
        config: ModelConfig,
        seed: u64,
    ) -> Result<Self> {
        let vocab = Vocabulary::build(train, bins.k(), config.max_vocab);
        Self::new(bins, vocab, mask, config, seed)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: ScorerModel = serde_json::from_str(text)?;
        if model.version != CHECKPOINT_VERSION {
            return Err(Error::ModelMismatch(format!(
                "checkpoint version {} (expected {CHECKPOINT_VERSION})",
                model.version
            )));
        }
        model.bins.validate()?;
        let expected = Params::zeros(
            model.config.variant,
            model.vocab.len(),
            model.config.max_len,
            model.config.embed_dim,
            model.config.hidden_dim,
        );
        if expected
            .tensors()
            .iter()
            .zip(model.params.tensors())
            .any(|(a, b)| a.dim() != b.dim())
        {
            return Err(Error::ModelMismatch(
                "parameter shapes disagree with the configuration".into(),
            ));
        }
        Ok(model)
    }

    pub fn input_for(&self, rec: &GenerationRecord) -> Result<ScorerInputSequence> {
        build_input(rec, &self.bins, self.mask, self.config.max_len)
    }

    pub fn encode(&self, seq: &ScorerInputSequence) -> Result<Vec<usize>> {
        if seq.mask != self.mask {
            return Err(Error::ModelMismatch(format!(
                "input built for mask {} but model uses {}",
                seq.mask, self.mask
            )));
        }
        if seq.k != self.bins.k() {
            return Err(Error::ModelMismatch(format!(
                "input built with k = {} but model uses {}",
                seq.k,
                self.bins.k()
            )));
        }
        if seq.len() > self.config.max_len {
            return Err(Error::ModelMismatch(format!(
                "sequence of {} exceeds max_len {}",
                seq.len(),
                self.config.max_len
            )));
        }
        seq.items
            .iter()
            .map(|item| match item {
                InputItem::Question(w) | InputItem::Context(w) | InputItem::Response(w) => {
                    Ok(self.vocab.word_id(w))
                }
                InputItem::Sep => Ok(SEP),
                InputItem::Prob(t) => self.vocab.prob_id(*t),
            })
            .collect()
    }

    pub fn encode_record(&self, rec: &GenerationRecord, label: u8) -> Result<EncodedExample> {
        Ok(EncodedExample {
            ids: self.encode(&self.input_for(rec)?)?,
            label,
        })
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::invalid("empty input sequence"));
        }
        if ids.len() > self.config.max_len {
            return Err(Error::ModelMismatch(format!(
                "sequence of {} exceeds max_len {}",
                ids.len(),
                self.config.max_len
            )));
        }
        if let Some(id) = ids.iter().find(|id| **id >= self.vocab.len()) {
            return Err(Error::ModelMismatch(format!(
                "token id {id} outside the vocabulary"
            )));
        }
        Ok(())
    }

    fn run(&self, ids: &[usize]) -> Forward {
        let p = &self.params;
        let t = ids.len();
        let e = self.config.embed_dim;
        let mut x = Array2::zeros((t, e));
        for (row, &id) in ids.iter().enumerate() {
            x.row_mut(row).assign(&p.emb.row(id));
        }
        let (q, k, v, attn, pooled) = match self.config.variant {
            Variant::MeanPool => {
                let pooled = x.mean_axis(Axis(0)).expect("nonempty");
                let empty = Array2::zeros((0, 0));
                (empty.clone(), empty.clone(), empty.clone(), empty, pooled)
            }
            Variant::Attention => {
                x += &p.pos.slice(s![..t, ..]);
                let q = x.dot(&p.wq);
                let k = x.dot(&p.wk);
                let v = x.dot(&p.wv);
                let mut attn = q.dot(&k.t()) / (e as f64).sqrt();
                for mut row in attn.rows_mut() {
                    let max = row.fold(f64::NEG_INFINITY, |m, &a| m.max(a));
                    row.mapv_inplace(|a| (a - max).exp());
                    let sum = row.sum();
                    row /= sum;
                }
                let h = &x + &attn.dot(&v);
                let pooled = h.mean_axis(Axis(0)).expect("nonempty");
                (q, k, v, attn, pooled)
            }
        };
        let hidden = (pooled.dot(&p.w1) + p.b1.row(0)).mapv(f64::tanh);
        let logit = hidden.dot(&p.w2.column(0)) + p.b2[[0, 0]];
        Forward {
            x,
            q,
            k,
            v,
            attn,
            pooled,
            hidden,
            logit,
        }
    }

    /// Pre-sigmoid score.
    pub fn logit_ids(&self, ids: &[usize]) -> Result<f64> {
        self.check_ids(ids)?;
        Ok(self.run(ids).logit)
    }

    pub fn forward_ids(&self, ids: &[usize]) -> Result<f64> {
        Ok(stable_sigmoid(self.logit_ids(ids)?))
    }

    /// Probability that the response is correct, in (0, 1).
    pub fn forward(&self, seq: &ScorerInputSequence) -> Result<f64> {
        self.forward_ids(&self.encode(seq)?)
    }

    /// Adds `dlogit * d(logit)/d(params)` into `grad`.
    fn backward(&self, ids: &[usize], f: &Forward, dlogit: f64, grad: &mut Params) {
        let p = &self.params;
        let t = ids.len();
        let e = self.config.embed_dim;

        Zip::from(grad.w2.column_mut(0))
            .and(&f.hidden)
            .for_each(|g, &u| *g += dlogit * u);
        grad.b2[[0, 0]] += dlogit;
        let dz1: Array1<f64> = Zip::from(&f.hidden)
            .and(p.w2.column(0))
            .map_collect(|&u, &w| dlogit * w * (1.0 - u * u));
        outer_add(&mut grad.w1, f.pooled.view(), dz1.view());
        grad.b1.row_mut(0).scaled_add(1.0, &dz1);
        let dpooled = p.w1.dot(&dz1);
        let drow = &dpooled / t as f64;

        match self.config.variant {
            Variant::MeanPool => {
                for &id in ids {
                    grad.emb.row_mut(id).scaled_add(1.0, &drow);
                }
            }
            Variant::Attention => {
                // Every row of dH (and so of dO) equals drow.
                let d_out = drow.broadcast((t, e)).expect("broadcast").to_owned();
                let mut dx = d_out.clone();
                let dattn = d_out.dot(&f.v.t());
                let dv = f.attn.t().dot(&d_out);
                let mut dscores = &f.attn * &dattn;
                for (mut row, a_row) in dscores.rows_mut().into_iter().zip(f.attn.rows()) {
                    let inner = row.sum();
                    Zip::from(&mut row)
                        .and(a_row)
                        .for_each(|d, &a| *d -= a * inner);
                }
                dscores /= (e as f64).sqrt();
                let dq = dscores.dot(&f.k);
                let dk = dscores.t().dot(&f.q);
                grad.wq += &f.x.t().dot(&dq);
                grad.wk += &f.x.t().dot(&dk);
                grad.wv += &f.x.t().dot(&dv);
                dx += &dq.dot(&p.wq.t());
                dx += &dk.dot(&p.wk.t());
                dx += &dv.dot(&p.wv.t());
                for (row, &id) in ids.iter().enumerate() {
                    grad.emb.row_mut(id).scaled_add(1.0, &dx.row(row));
                    grad.pos.row_mut(row).scaled_add(1.0, &dx.row(row));
                }
            }
        }
    }

    /// Adds the gradient of one example's BCE loss into `grad` and returns
    /// the loss.
    fn accumulate(&self, ex: &EncodedExample, grad: &mut Params) -> f64 {
        let f = self.run(&ex.ids);
        let y = stable_sigmoid(f.logit);
        let g = ex.label as f64;
        let yc = y.clamp(LOSS_EPSILON, 1.0 - LOSS_EPSILON);
        let loss = -(g * yc.ln() + (1.0 - g) * (1.0 - yc).ln());
        // The clamp is flat outside [eps, 1 - eps].
        if y > LOSS_EPSILON && y < 1.0 - LOSS_EPSILON {
            self.backward(&ex.ids, &f, y - g, grad);
        }
        loss
    }

    /// Mean binary cross-entropy over the batch and its exact gradient.
    pub fn loss_and_gradient(&self, batch: &[EncodedExample]) -> Result<(f64, Params)> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        for ex in batch {
            self.check_ids(&ex.ids)?;
            if ex.label > 1 {
                return Err(Error::invalid("labels must be 0 or 1"));
            }
        }
        let partials: Vec<(f64, Params)> = batch
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| {
                let mut grad = self.params.zeros_like();
                let loss: f64 = chunk.iter().map(|ex| self.accumulate(ex, &mut grad)).sum();
                (loss, grad)
            })
            .collect();
        let mut iter = partials.into_iter();
        let (mut loss, mut grad) = iter.next().expect("nonempty batch");
        for (l, g) in iter {
            loss += l;
            grad.add_assign(&g);
        }
        let n = batch.len() as f64;
        grad.scale(1.0 / n);
        Ok((loss / n, grad))
    }

    /// Mean loss only.
    pub fn loss(&self, batch: &[EncodedExample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let losses: Vec<f64> = batch
            .par_iter()
            .map(|ex| {
                self.check_ids(&ex.ids)?;
                let y = self
                    .forward_ids(&ex.ids)?
                    .clamp(LOSS_EPSILON, 1.0 - LOSS_EPSILON);
                let g = ex.label as f64;
                Ok(-(g * y.ln() + (1.0 - g) * (1.0 - y).ln()))
            })
            .collect::<Result<_>>()?;
        Ok(losses.iter().sum::<f64>() / batch.len() as f64)
    }
}

fn outer_add(target: &mut Array2<f64>, a: ArrayView1<f64>, b: ArrayView1<f64>) {
    for (mut row, &ai) in target.rows_mut().into_iter().zip(a.iter()) {
        row.scaled_add(ai, &b);
    }
}
