//! Contextual discrepancy estimation: a reconstruction model trained on
//! healthy segments, and the per-timestep anomaly score built from its
//! reconstruction error and attention concentration.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::encoder::{add_attention_block, attention_block, positional_encoding};
use crate::error::{Error, Result};
use crate::nn::{Bound, Ctx, ParamStore};
use crate::optim::AdamState;
use crate::real::sq;
use crate::rng::{self, Rng};
use crate::signal::{Label, TimeSeriesSegment};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CdeKind {
    /// Transformer autoencoder; contributes both error and attention terms.
    Transformer,
    /// Per-timestep two-layer perceptron; attention term is zero.
    Vanilla,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CdeConfig {
    pub kind: CdeKind,
    pub d_in: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub d_latent: usize,
    /// Timesteps per Transformer token; `T` must be a multiple.
    pub patch: usize,
}

impl Default for CdeConfig {
    fn default() -> Self {
        CdeConfig {
            kind: CdeKind::Transformer,
            d_in: 2,
            d_model: 16,
            n_blocks: 2,
            n_heads: 2,
            d_ff: 32,
            d_latent: 6,
            patch: 8,
        }
    }
}

impl CdeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_latent == 0 || self.patch == 0 {
            return Err(Error::invalid("CDE widths and patch length must be positive"));
        }
        if self.kind == CdeKind::Transformer {
            if self.n_blocks == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) || !self.d_model.is_multiple_of(2) {
                return Err(Error::invalid(format!(
                    "CDE d_model {} must be even and divisible by {} heads, with at least one block",
                    self.d_model, self.n_heads
                )));
            }
            if self.d_ff == 0 {
                return Err(Error::invalid("CDE d_ff must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CdeModel {
    pub cfg: CdeConfig,
    pub params: ParamStore<f32>,
}

/// Head- and layer-averaged attention weights, `T x T` (rows are queries).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSummary {
    pub mean_weights: Tensor<f64>,
}

/// Per-timestep reconstruction error `e`, attention indicator `a` and the
/// combined score `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyScores {
    pub e: Vec<f64>,
    pub a: Vec<f64>,
    pub s: Vec<f64>,
}

pub fn init_params<T: crate::Real>(cfg: &CdeConfig, rng: &mut Rng) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    match cfg.kind {
        CdeKind::Transformer => {
            store.add_linear(rng, "in", cfg.patch * cfg.d_in, cfg.d_model)?;
            for b in 0..cfg.n_blocks {
                add_attention_block(&mut store, rng, &format!("block{b}"), cfg.d_model, cfg.d_ff)?;
            }
            store.add_layer_norm("ln_f", cfg.d_model)?;
            store.add_linear(rng, "latent", cfg.d_model, cfg.d_latent)?;
            store.add_linear(rng, "dec", cfg.d_latent, cfg.patch * cfg.d_in)?;
        }
        CdeKind::Vanilla => {
            store.add_linear(rng, "enc", cfg.d_in, cfg.d_latent)?;
            store.add_linear(rng, "dec", cfg.d_latent, cfg.d_in)?;
        }
    }
    Ok(store)
}

/// Reconstruction `x_hat` of `x`. The Transformer reads `x` as
/// non-overlapping patches of `cfg.patch` timesteps, one token each, and
/// decodes every token back to its patch. Token-level attention weights of
/// every head and layer are pushed onto `attn` when given.
pub fn forward<T: crate::Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    x: Var,
    cfg: &CdeConfig,
    attn: Option<&mut Vec<Var>>,
) -> Result<Var> {
    if tape.value(x).rank() != 2 || tape.value(x).cols() != cfg.d_in {
        return Err(Error::shape("cde", format!("expected T x {}, got {:?}", cfg.d_in, tape.shape(x))));
    }
    match cfg.kind {
        CdeKind::Transformer => {
            let (t_len, d) = (tape.value(x).rows(), cfg.d_in);
            if t_len % cfg.patch != 0 {
                return Err(Error::shape("cde", format!("T = {t_len} is not a multiple of patch {}", cfg.patch)));
            }
            let n_tok = t_len / cfg.patch;
            let tokens = tape.reshape(x, &[n_tok, cfg.patch * d])?;
            let mut h = p.linear(tape, "in", tokens)?;
            let pe = tape.constant(positional_encoding(tape.value(h).rows(), cfg.d_model)?);
            h = tape.add(h, pe)?;
            let mut attn = attn;
            for b in 0..cfg.n_blocks {
                h = attention_block(tape, p, &format!("block{b}"), h, cfg.n_heads, &mut Ctx::eval(), attn.as_deref_mut())?;
            }
            let h = p.layer_norm(tape, "ln_f", h)?;
            let z = p.linear(tape, "latent", h)?;
            let out = p.linear(tape, "dec", z)?;
            tape.reshape(out, &[t_len, d])
        }
        CdeKind::Vanilla => {
            let z = p.linear(tape, "enc", x)?;
            let z = tape.relu(z)?;
            p.linear(tape, "dec", z)
        }
    }
}

/// Mean squared reconstruction error over all entries.
pub fn recon_loss<T: crate::Real>(tape: &mut Tape<T>, p: &Bound, x: Var, cfg: &CdeConfig) -> Result<Var> {
    let x_hat = forward(tape, p, x, cfg, None)?;
    let diff = tape.sub(x_hat, x)?;
    let sq = tape.square(diff)?;
    tape.mean(sq)
}

impl CdeModel {
    pub fn new(cfg: CdeConfig, seed: u64) -> Result<Self> {
        let mut r = rng::stream(seed, rng::hash_str("cde.init"), 0);
        let params = init_params(&cfg, &mut r)?;
        Ok(CdeModel { cfg, params })
    }

    /// Reconstruction and, for the Transformer variant, the averaged
    /// attention map expanded from tokens to timesteps
    /// (`A[t, u] = A_tok[t / P, u / P] / P`).
    pub fn reconstruct(&self, x: &Tensor<f32>) -> Result<(Tensor<f32>, Option<AttentionSummary>)> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let mut attn = Vec::new();
        let x_hat = forward(&mut tape, &p, xv, &self.cfg, Some(&mut attn))?;
        let summary = if attn.is_empty() {
            None
        } else {
            let n_tok = tape.value(attn[0]).rows();
            let mut tok = vec![0.0f64; n_tok * n_tok];
            for &w in &attn {
                for (a, v) in tok.iter_mut().zip(tape.value(w).data()) {
                    *a += f64::from(*v);
                }
            }
            let t_len = x.rows();
            let patch = self.cfg.patch;
            let norm = (attn.len() * patch) as f64;
            let mut full = Vec::with_capacity(t_len * t_len);
            for t in 0..t_len {
                full.extend((0..t_len).map(|u| tok[(t / patch) * n_tok + u / patch] / norm));
            }
            Some(AttentionSummary { mean_weights: Tensor::new(vec![t_len, t_len], full)? })
        };
        Ok((tape.value(x_hat).clone(), summary))
    }

    pub fn score(&self, x: &Tensor<f32>, beta: f64) -> Result<AnomalyScores> {
        let (x_hat, summary) = self.reconstruct(x)?;
        let e = recon_error(x, &x_hat)?;
        let a = match &summary {
            Some(s) => attention_indicator(s)?,
            None => vec![0.0; e.len()],
        };
        let s = anomaly_score(&e, &a, beta)?;
        Ok(AnomalyScores { e, a, s })
    }
}

/// `e_t = ||x_t - x_hat_t||^2`.
pub fn recon_error(x: &Tensor<f32>, x_hat: &Tensor<f32>) -> Result<Vec<f64>> {
    if x.shape() != x_hat.shape() || x.rank() != 2 {
        return Err(Error::shape("recon_error", format!("{:?} vs {:?}", x.shape(), x_hat.shape())));
    }
    Ok((0..x.rows())
        .map(|t| x.row(t).iter().zip(x_hat.row(t)).map(|(a, b)| sq(f64::from(*a) - f64::from(*b))).sum())
        .collect())
}

/// `a_t = 1 - H(p_t) / ln T`, where `p_t` is column `t` of the averaged
/// attention map renormalized to sum to one. A single timestep scores 1.
pub fn attention_indicator(summary: &AttentionSummary) -> Result<Vec<f64>> {
    let w = &summary.mean_weights;
    let t_len = w.rows();
    if w.rank() != 2 || w.cols() != t_len {
        return Err(Error::shape("attention_indicator", format!("attention map {:?} is not square", w.shape())));
    }
    if t_len == 1 {
        return Ok(vec![1.0]);
    }
    let log_t = libm::log(t_len as f64);
    let mut out = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let col_sum: f64 = (0..t_len).map(|q| w.at(q, t)).sum();
        if !(col_sum > 0.0) {
            return Err(Error::NonFinite { op: "attention_indicator" });
        }
        let h: f64 = (0..t_len)
            .map(|q| w.at(q, t) / col_sum)
            .filter(|&p| p > 0.0)
            .map(|p| -p * libm::log(p))
            .sum();
        out.push((1.0 - h / log_t).clamp(0.0, 1.0));
    }
    Ok(out)
}

/// Standardizes with the population deviation; a constant vector maps to
/// zeros.
pub fn z_normalize(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| sq(x - mean)).sum::<f64>() / n;
    let sd = libm::sqrt(var);
    if sd <= 1e-12 * mean.abs().max(1.0) {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - mean) / sd).collect()
}

/// `s = z(e) + beta * z(a)`.
pub fn anomaly_score(e: &[f64], a: &[f64], beta: f64) -> Result<Vec<f64>> {
    if e.len() != a.len() || e.is_empty() {
        return Err(Error::shape("anomaly_score", format!("e has {} steps, a has {}", e.len(), a.len())));
    }
    if e.iter().chain(a).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "anomaly_score" });
    }
    Ok(z_normalize(e).into_iter().zip(z_normalize(a)).map(|(ze, za)| ze + beta * za).collect())
}

/// Optimization settings for the reconstruction model.
#[derive(Clone, Debug, PartialEq)]
pub struct CdeTrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for CdeTrainOptions {
    fn default() -> Self {
        CdeTrainOptions { epochs: 30, lr: 1e-3, batch_size: 8 }
    }
}

/// Fits the model to healthy segments with mini-batch Adam on the mean
/// squared error. Returns the mean batch loss of every epoch.
pub fn train_cde(model: &mut CdeModel, healthy: &[TimeSeriesSegment], opts: &CdeTrainOptions, seed: u64) -> Result<Vec<f64>> {
    if healthy.is_empty() {
        return Err(Error::Data("no healthy segments for CDE training".into()));
    }
    for seg in healthy {
        if seg.label != Label::Healthy {
            return Err(Error::DiseasedInHealthySet { patient_id: seg.patient_id.clone() });
        }
        seg.check()?;
    }
    if opts.batch_size == 0 || opts.epochs == 0 {
        return Err(Error::invalid("CDE epochs and batch size must be positive"));
    }
    let mut adam = AdamState::new(&model.params);
    let mut order: Vec<usize> = (0..healthy.len()).collect();
    let mut curve = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        let mut r = rng::stream(seed, rng::hash_str("cde.shuffle"), epoch as u64);
        rng::shuffle(&mut r, &mut order);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(opts.batch_size) {
            let mut tape = Tape::new();
            let p = model.params.bind(&mut tape, true);
            let mut losses = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let x = tape.constant(healthy[i].x.clone());
                losses.push(recon_loss(&mut tape, &p, x, &model.cfg)?);
            }
            let loss = mean_of(&mut tape, &losses)?;
            total += tape.scalar_value(loss);
            batches += 1;
            tape.backward(loss)?;
            let grads = p.grads(&tape);
            adam.step(&mut model.params, &grads, opts.lr)?;
        }
        curve.push(total / batches as f64);
    }
    Ok(curve)
}

/// Mean of scalar vars.
pub(crate) fn mean_of<T: crate::Real>(tape: &mut Tape<T>, vals: &[Var]) -> Result<Var> {
    if vals.is_empty() {
        return Err(Error::invalid("mean of no values"));
    }
    let mut acc = vals[0];
    for &v in &vals[1..] {
        acc = tape.add(acc, v)?;
    }
    tape.scale(acc, 1.0 / vals.len() as f64)
}
