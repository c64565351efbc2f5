//! Score-weighted two-view contrastive learning: augmentation, the weight
//! head, pooling and projection, and the inter-view and temporal InfoNCE
//! objectives.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::encoder::{encode, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::{Bound, Ctx, ParamStore};
use crate::real::Real;
use crate::rng::{self, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Shortest crop accepted by [`augment`].
pub const MIN_CROP: usize = 8;
/// Hidden width of the weight head.
pub const HEAD_HIDDEN: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationSpec {
    pub crop_frac: f64,
    pub jitter_sigma: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec { crop_frac: 0.75, jitter_sigma: 0.1, scale_lo: 0.8, scale_hi: 1.2 }
    }
}

impl AugmentationSpec {
    pub fn identity() -> Self {
        AugmentationSpec { crop_frac: 1.0, jitter_sigma: 0.0, scale_lo: 1.0, scale_hi: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.crop_frac > 0.0 && self.crop_frac <= 1.0) {
            return Err(Error::invalid(format!("crop_frac must lie in (0, 1], got {}", self.crop_frac)));
        }
        if !(self.jitter_sigma >= 0.0) || !self.jitter_sigma.is_finite() {
            return Err(Error::invalid(format!("jitter_sigma must be >= 0, got {}", self.jitter_sigma)));
        }
        if !(self.scale_lo > 0.0 && self.scale_lo <= self.scale_hi) || !self.scale_hi.is_finite() {
            return Err(Error::invalid(format!("scale range [{}, {}] is invalid", self.scale_lo, self.scale_hi)));
        }
        Ok(())
    }

    pub fn crop_len(&self, t_len: usize) -> usize {
        libm::round(self.crop_frac * t_len as f64) as usize
    }
}

/// Random crop of native length `round(crop_frac * T)`, then Gaussian
/// jitter, then one random scale. Returns the view and its crop offset.
pub fn augment(x: &Tensor<f32>, spec: &AugmentationSpec, seed: u64) -> Result<(Tensor<f32>, usize)> {
    spec.validate()?;
    let t_len = x.rows();
    let len = spec.crop_len(t_len);
    if len < MIN_CROP {
        return Err(Error::invalid(format!("crop of {len} timesteps is shorter than {MIN_CROP}")));
    }
    let mut r = rng::stream(seed, rng::hash_str("augment"), 0);
    let offset = r.gen_range(0..=t_len - len);
    let mut view = x.slice_rows(offset, len)?;
    if spec.jitter_sigma > 0.0 {
        for v in view.data_mut() {
            *v = (f64::from(*v) + spec.jitter_sigma * rng::normal(&mut r)) as f32;
        }
    }
    let scale = rng::uniform(&mut r, spec.scale_lo, spec.scale_hi);
    if scale != 1.0 {
        for v in view.data_mut() {
            *v = (f64::from(*v) * scale) as f32;
        }
    }
    Ok((view, offset))
}

/// How per-timestep weights are produced during pre-training.
#[derive(Clone, Debug, PartialEq)]
pub enum Weighting {
    /// `w_t = sigmoid(MLP(s_t))` with a trained head.
    Learned,
    /// The same weight at every timestep.
    Constant(f64),
}

/// Weight head `1 -> 8 -> 1`, initialized monotone non-decreasing in the
/// score: first-layer and output weights are nonnegative, biases zero, so
/// `w_t = 0.5` for `s_t <= 0` and grows with larger scores.
pub fn init_weight_head<T: Real>(rng: &mut Rng) -> Result<ParamStore<T>> {
    let mut store = ParamStore::new();
    let abs = |t: Tensor<T>| t.map(|v| T::from_f64(v.to_f64().abs()));
    store.insert("l1.w", abs(ParamStore::xavier(rng, &[1, HEAD_HIDDEN], 1, HEAD_HIDDEN)))?;
    store.insert("l1.b", Tensor::zeros(&[HEAD_HIDDEN]))?;
    store.insert("l2.w", abs(ParamStore::xavier(rng, &[HEAD_HIDDEN, 1], HEAD_HIDDEN, 1)))?;
    store.insert("l2.b", Tensor::zeros(&[1]))?;
    Ok(store)
}

/// Head applied to a column of scores `L x 1`, giving weights `L x 1`.
pub fn head_forward<T: Real>(tape: &mut Tape<T>, head: &Bound, scores: Var) -> Result<Var> {
    let h = head.linear(tape, "l1", scores)?;
    let h = tape.relu(h)?;
    let o = head.linear(tape, "l2", h)?;
    tape.sigmoid(o)
}

/// Scalar form of [`head_forward`].
pub fn weight_from_score<T: Real>(head: &ParamStore<T>, s: f64) -> Result<f64> {
    if !s.is_finite() {
        return Err(Error::NonFinite { op: "weight_from_score" });
    }
    let mut tape = Tape::new();
    let p = head.bind(&mut tape, false);
    let x = tape.constant(Tensor::from_f64(&[1, 1], &[s])?);
    let w = head_forward(&mut tape, &p, x)?;
    Ok(tape.scalar_value(w))
}

/// `h'_t = w_t * h_t`.
pub fn apply_weights<T: Real>(tape: &mut Tape<T>, h: Var, w: Var) -> Result<Var> {
    tape.row_scale(h, w)
}

/// Projection `d_hidden -> d_hidden -> d_project` with ReLU in between.
pub fn init_projection<T: Real>(d_hidden: usize, d_project: usize, rng: &mut Rng) -> Result<ParamStore<T>> {
    let mut store = ParamStore::new();
    store.add_linear(rng, "l1", d_hidden, d_hidden)?;
    store.add_linear(rng, "l2", d_hidden, d_project)?;
    Ok(store)
}

/// Global mean over time followed by the projection, `1 x d_project`.
pub fn pool_and_project<T: Real>(tape: &mut Tape<T>, proj: &Bound, h: Var) -> Result<Var> {
    let pooled = tape.mean_rows(h)?;
    let z = proj.linear(tape, "l1", pooled)?;
    let z = tape.relu(z)?;
    proj.linear(tape, "l2", z)
}

/// Symmetric inter-view InfoNCE over cosine similarities: row `i` of `z1`
/// and row `i` of `z2` are positives, every other pairing a negative.
pub fn loss_inter<T: Real>(tape: &mut Tape<T>, z1: Var, z2: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    if tape.shape(z1) != tape.shape(z2) || tape.value(z1).rank() != 2 {
        return Err(Error::shape("loss_inter", format!("{:?} vs {:?}", tape.shape(z1), tape.shape(z2))));
    }
    let n = tape.value(z1).rows();
    let targets: Vec<usize> = (0..n).collect();
    let u1 = tape.l2_normalize_rows(z1)?;
    let u2 = tape.l2_normalize_rows(z2)?;
    let sim = tape.matmul_t(u1, u2)?;
    let sim = tape.scale(sim, 1.0 / tau)?;
    let a = tape.softmax_cross_entropy(sim, &targets)?;
    let sim_t = tape.transpose(sim)?;
    let b = tape.softmax_cross_entropy(sim_t, &targets)?;
    let both = tape.add(a, b)?;
    tape.scale(both, 0.5)
}

/// Negatives drawn per anchor by [`loss_intra`].
pub const INTRA_NEGATIVES: usize = 8;

/// Temporal InfoNCE inside one view: each of `n_pairs` anchors `t` is
/// contrasted against a positive `t'` with `1 <= |t - t'| <= delta` and
/// [`INTRA_NEGATIVES`] negatives with `|t - t''| > 2 delta`, all drawn
/// from `seed`.
pub fn loss_intra<T: Real>(tape: &mut Tape<T>, h: Var, tau: f64, delta: usize, n_pairs: usize, seed: u64) -> Result<Var> {
    if !(tau > 0.0) || delta == 0 || n_pairs == 0 {
        return Err(Error::invalid("loss_intra needs tau > 0, delta >= 1 and n_pairs >= 1"));
    }
    let t_len = tape.value(h).rows();
    // The first and last steps are the only anchors guaranteed a negative;
    // one exists as soon as T >= 2 delta + 2.
    if t_len < 2 * delta + 2 {
        return Err(Error::invalid(format!("view of {t_len} steps is too short for delta {delta}")));
    }
    let far = |t: usize, u: usize| t.abs_diff(u) > 2 * delta;
    let anchors: Vec<usize> = (0..t_len).filter(|&t| far(t, 0) || far(t, t_len - 1)).collect();
    let mut r = rng::stream(seed, rng::hash_str("intra"), 0);
    let k = 1 + INTRA_NEGATIVES;
    let mut idx = Vec::with_capacity(n_pairs * k);
    for _ in 0..n_pairs {
        let t = anchors[rng::below(&mut r, anchors.len())];
        let near: Vec<usize> = (t.saturating_sub(delta)..=(t + delta).min(t_len - 1)).filter(|&u| u != t).collect();
        let negs: Vec<usize> = (0..t_len).filter(|&u| far(t, u)).collect();
        idx.push(t * t_len + near[rng::below(&mut r, near.len())]);
        for _ in 0..INTRA_NEGATIVES {
            idx.push(t * t_len + negs[rng::below(&mut r, negs.len())]);
        }
    }
    let u = tape.l2_normalize_rows(h)?;
    let sim = tape.matmul_t(u, u)?;
    let logits = tape.gather(sim, idx, &[n_pairs, k])?;
    let logits = tape.scale(logits, 1.0 / tau)?;
    tape.softmax_cross_entropy(logits, &alloc::vec![0; n_pairs])
}

/// `l_inter + lambda * l_intra`.
pub fn loss_total<T: Real>(tape: &mut Tape<T>, inter: Var, intra: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda must be >= 0, got {lambda}")));
    }
    if lambda == 0.0 {
        return Ok(inter);
    }
    let w = tape.scale(intra, lambda)?;
    tape.add(inter, w)
}

/// Parameters trained during contrastive pre-training.
pub struct DmcfBound<'a> {
    pub encoder: &'a Bound,
    pub head: &'a Bound,
    pub projection: &'a Bound,
}

/// Output of one view: weighted representations `L x d_hidden` and the
/// projected embedding `1 x d_project`.
pub struct ViewOutput {
    pub weighted: Var,
    pub z: Var,
}

/// Encoder, weighting and projection for one augmented view whose scores
/// are already aligned to the crop.
pub fn view_forward<T: Real>(
    tape: &mut Tape<T>,
    p: &DmcfBound<'_>,
    view: Var,
    scores: &[f64],
    weighting: &Weighting,
    enc_cfg: &EncoderConfig,
    ctx: &mut Ctx<'_>,
) -> Result<ViewOutput> {
    let h = encode(tape, p.encoder, view, enc_cfg, ctx)?;
    let len = tape.value(h).rows();
    if scores.len() != len {
        return Err(Error::shape("view_forward", format!("{} scores for a view of {len} steps", scores.len())));
    }
    let w = match weighting {
        Weighting::Learned => {
            let s = tape.constant(Tensor::from_f64(&[len, 1], scores)?);
            head_forward(tape, p.head, s)?
        }
        Weighting::Constant(c) => tape.constant(Tensor::full(&[len], T::from_f64(*c))),
    };
    let weighted = apply_weights(tape, h, w)?;
    let z = pool_and_project(tape, p.projection, weighted)?;
    Ok(ViewOutput { weighted, z })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check_many, DEFAULT_TOL};
    use crate::real::sq;
    use alloc::string::String;
    use alloc::vec;
    use rand::SeedableRng;

    /// Literal double loop over the symmetric InfoNCE definition.
    fn inter_oracle(z1: &[Vec<f64>], z2: &[Vec<f64>], tau: f64) -> f64 {
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = libm::sqrt(a.iter().map(|x| sq(*x)).sum());
            let nb = libm::sqrt(b.iter().map(|x| sq(*x)).sum());
            dot / (na * nb)
        };
        let n = z1.len();
        let mut total = 0.0;
        for i in 0..n {
            let mut den1 = 0.0;
            let mut den2 = 0.0;
            for j in 0..n {
                den1 += libm::exp(cos(&z1[i], &z2[j]) / tau);
                den2 += libm::exp(cos(&z2[i], &z1[j]) / tau);
            }
            total += libm::log(libm::exp(cos(&z1[i], &z2[i]) / tau) / den1);
            total += libm::log(libm::exp(cos(&z2[i], &z1[i]) / tau) / den2);
        }
        -total / (2.0 * n as f64)
    }

    fn inter_value(z1: &[Vec<f64>], z2: &[Vec<f64>], tau: f64) -> f64 {
        let mut tape = Tape::<f64>::new();
        let rows = |z: &[Vec<f64>]| {
            let flat: Vec<f64> = z.iter().flatten().copied().collect();
            Tensor::from_f64(&[z.len(), z[0].len()], &flat).unwrap()
        };
        let a = tape.constant(rows(z1));
        let b = tape.constant(rows(z2));
        let l = loss_inter(&mut tape, a, b, tau).unwrap();
        tape.scalar_value(l)
    }

    #[test]
    fn augmentation_examples() {
        let x = crate::signal::gen_healthy("h000", 128, 2, 1).unwrap().x;
        let (v, off) = augment(&x, &AugmentationSpec::identity(), 9).unwrap();
        assert_eq!((v, off), (x.clone(), 0));
        let spec = AugmentationSpec { scale_lo: 2.0, scale_hi: 2.0, ..AugmentationSpec::identity() };
        let (v, _) = augment(&x, &spec, 3).unwrap();
        assert_eq!(v, x.map(|a| a * 2.0));
        let spec = AugmentationSpec { crop_frac: 0.05, ..AugmentationSpec::identity() };
        assert!(augment(&x, &spec, 0).is_err());
    }

    #[test]
    fn crop_offsets_are_uniform() {
        let x = crate::signal::gen_healthy("h000", 128, 2, 1).unwrap().x;
        let spec = AugmentationSpec { crop_frac: 0.5, ..AugmentationSpec::identity() };
        let mut counts = [0usize; 65];
        for seed in 0..1000 {
            let (v, off) = augment(&x, &spec, seed).unwrap();
            assert_eq!(v.rows(), 64);
            assert_eq!(v, x.slice_rows(off, 64).unwrap());
            counts[off] += 1;
        }
        let expected = 1000.0 / 65.0;
        let chi2: f64 = counts.iter().map(|&c| sq(c as f64 - expected) / expected).sum();
        // 99th percentile of chi-square with 64 degrees of freedom.
        assert!(chi2 < 93.22, "chi2 = {chi2}");
    }

    #[test]
    fn weight_head_examples() {
        let mut zero = init_weight_head::<f64>(&mut Rng::seed_from_u64(0)).unwrap();
        for (_, t) in zero.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        for s in [-5.0, 0.0, 3.0] {
            assert_eq!(weight_from_score(&zero, s).unwrap(), 0.5);
        }
        // Pass-through head: one hidden unit carries s, output copies it.
        let mut pass = zero.clone();
        pass.set("l1.w", Tensor::from_f64(&[1, 8], &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap()).unwrap();
        pass.set("l2.w", Tensor::from_f64(&[8, 1], &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap()).unwrap();
        assert!(weight_from_score(&pass, 40.0).unwrap() > 1.0 - 1e-12);
        assert!(weight_from_score(&pass, f64::NAN).is_err());

        let init = init_weight_head::<f64>(&mut Rng::seed_from_u64(4)).unwrap();
        assert_eq!(weight_from_score(&init, -2.0).unwrap(), 0.5);
        let ws: Vec<f64> = [0.0, 1.0, 2.0, 4.0].iter().map(|&s| weight_from_score(&init, s).unwrap()).collect();
        assert!(ws.windows(2).all(|p| p[1] > p[0]), "{ws:?}");
    }

    #[test]
    fn weighting_and_pooling_examples() {
        let mut tape = Tape::<f64>::new();
        let h = tape.constant(Tensor::from_rows(&[&[2.0, 4.0]]).unwrap());
        let w = tape.constant(Tensor::scalar(0.5));
        let hw = apply_weights(&mut tape, h, w).unwrap();
        assert_eq!(tape.value(hw).data(), &[1.0, 2.0]);

        let h = tape.constant(Tensor::from_rows(&[&[1.0, -2.0], &[3.0, 4.0], &[5.0, 6.0]]).unwrap());
        let ones = tape.constant(Tensor::full(&[3], 1.0));
        let same = apply_weights(&mut tape, h, ones).unwrap();
        assert_eq!(tape.value(same), tape.value(h));
        let zeros = tape.constant(Tensor::zeros(&[3]));
        let gone = apply_weights(&mut tape, h, zeros).unwrap();
        assert!(tape.value(gone).data().iter().all(|&v| v == 0.0));
        let short = tape.constant(Tensor::full(&[2], 1.0));
        assert!(apply_weights(&mut tape, h, short).is_err());

        let c = tape.constant(Tensor::from_rows(&[&[1.5, -0.5], &[1.5, -0.5]]).unwrap());
        let pooled = tape.mean_rows(c).unwrap();
        assert_eq!(tape.value(pooled).data(), &[1.5, -0.5]);

        let mut proj = init_projection::<f64>(2, 3, &mut Rng::seed_from_u64(1)).unwrap();
        for (_, t) in proj.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let p = proj.bind(&mut tape, false);
        let z = pool_and_project(&mut tape, &p, c).unwrap();
        assert_eq!(tape.value(z).data(), &[0.0, 0.0, 0.0]);
        assert!(matches!(loss_inter(&mut tape, z, z, 0.2), Err(Error::ZeroNorm { .. })));
    }

    #[test]
    fn inter_loss_closed_forms() {
        let e1 = vec![1.0, 0.0];
        let e2 = vec![0.0, 1.0];
        let v = inter_value(&[e1.clone(), e2.clone()], &[e1.clone(), e2.clone()], 1.0);
        assert!((v - libm::log(1.0 + libm::exp(-1.0))).abs() < 1e-12);
        assert!((v - 0.31326).abs() < 1e-5);
        assert_eq!(inter_value(&[vec![0.3, -1.0]], &[vec![2.0, 0.1]], 0.2), 0.0);
    }

    #[test]
    fn inter_loss_matches_double_loop() {
        let mut r = Rng::seed_from_u64(21);
        for _ in 0..100 {
            let n = 1 + rng::below(&mut r, 8);
            let d = 1 + rng::below(&mut r, 6);
            let tau = rng::uniform(&mut r, 0.1, 2.0);
            let mut draw = || -> Vec<Vec<f64>> { (0..n).map(|_| (0..d).map(|_| rng::normal(&mut r)).collect()).collect() };
            let (z1, z2) = (draw(), draw());
            assert!((inter_value(&z1, &z2, tau) - inter_oracle(&z1, &z2, tau)).abs() < 1e-9);
        }
    }

    #[test]
    fn inter_loss_falls_as_a_positive_pair_aligns() {
        let z1 = vec![vec![1.0, 0.2, 0.0], vec![0.0, 1.0, 0.5], vec![0.3, 0.0, 1.0]];
        let mut z2 = vec![vec![0.2, 1.0, 0.1], vec![0.1, 1.0, 0.4], vec![1.0, 0.3, 0.2]];
        let mut prev = inter_value(&z1, &z2, 0.5);
        for _ in 0..10 {
            // Move the first positive toward its partner.
            z2[0] = z2[0].iter().zip(&z1[0]).map(|(a, b)| 0.8 * a + 0.2 * b).collect();
            let v = inter_value(&z1, &z2, 0.5);
            assert!(v <= prev + 1e-12);
            prev = v;
        }
    }

    fn intra_value(rows: &[Vec<f64>], tau: f64) -> f64 {
        let mut tape = Tape::<f64>::new();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let h = tape.constant(Tensor::from_f64(&[rows.len(), rows[0].len()], &flat).unwrap());
        let l = loss_intra(&mut tape, h, tau, 4, 16, 7).unwrap();
        tape.scalar_value(l)
    }

    #[test]
    fn intra_loss_closed_forms() {
        let same = vec![vec![0.5, -1.0, 2.0]; 32];
        assert!((intra_value(&same, 0.2) - libm::log(9.0)).abs() < 1e-12);

        // delta = 1, T = 4: only steps 0 and 3 have a negative. Rows 0-1
        // and 2-3 share a direction, the two halves are orthogonal.
        let rows = [vec![1.0, 0.0], vec![2.0, 0.0], vec![0.0, 0.5], vec![0.0, 3.0]];
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let mut tape = Tape::<f64>::new();
        let h = tape.constant(Tensor::from_f64(&[4, 2], &flat).unwrap());
        let v = loss_intra(&mut tape, h, 1.0, 1, 16, 7).unwrap();
        let expect = libm::log(1.0 + 8.0 * libm::exp(-1.0));
        assert!((tape.scalar_value(v) - expect).abs() < 1e-12);
        assert!((expect - 1.37196).abs() < 1e-5);
    }

    #[test]
    fn intra_loss_needs_room_for_negatives() {
        let mut tape = Tape::<f64>::new();
        let h = tape.constant(Tensor::full(&[9, 2], 1.0));
        assert!(loss_intra(&mut tape, h, 0.2, 4, 4, 0).is_err());
        let h = tape.constant(Tensor::full(&[10, 2], 1.0));
        assert!(loss_intra(&mut tape, h, 0.2, 4, 4, 0).is_ok());
    }

    #[test]
    fn total_loss_is_linear_in_lambda() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::scalar(0.3));
        let b = tape.constant(Tensor::scalar(2.0));
        let t = loss_total(&mut tape, a, b, 0.5).unwrap();
        assert!((tape.scalar_value(t) - 1.3).abs() < 1e-12);
        let t0 = loss_total(&mut tape, a, b, 0.0).unwrap();
        assert_eq!(tape.scalar_value(t0), 0.3);
        let t1 = loss_total(&mut tape, a, b, 1.0).unwrap();
        assert!((tape.scalar_value(t1) - tape.scalar_value(t0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn weighting_chain_gradients_match_finite_differences() {
        let cfg = EncoderConfig {
            d_in: 2,
            d_hidden: 8,
            conv_layers: vec![crate::encoder::ConvLayer { kernel: 3, dilation: 1, channels: 8 }],
            n_attn_blocks: 1,
            n_heads: 2,
            d_ff: 8,
            dropout: 0.0,
        };
        let x = crate::signal::gen_healthy("h002", 32, 2, 5).unwrap().x;
        let views: Vec<Tensor<f64>> = (0..2).map(|k| x.slice_rows(4 * k, 12).unwrap().cast()).collect();
        let scores: Vec<f64> = (0..12).map(|t| libm::sin(t as f64 + 0.5) * 1.5).collect();
        for seed in 0..3 {
            let mut r = Rng::seed_from_u64(seed);
            let enc: ParamStore<f64> = crate::encoder::init_params(&cfg, &mut r).unwrap();
            let head: ParamStore<f64> = init_weight_head(&mut r).unwrap();
            let proj: ParamStore<f64> = init_projection(8, 4, &mut r).unwrap();
            let names = |s: &ParamStore<f64>| s.iter().map(|(n, _)| String::from(n)).collect::<Vec<_>>();
            let (ne, nh, np) = (names(&enc), names(&head), names(&proj));
            let mut inputs = views.clone();
            for s in [&enc, &head, &proj] {
                inputs.extend(s.iter().map(|(_, t)| t.clone()));
            }
            let (a, b) = (2 + ne.len(), 2 + ne.len() + nh.len());
            let loss = |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
                let bind = |names: &[String], vs: &[Var]| Bound::from_pairs(names.iter().cloned().zip(vs.iter().copied()).collect());
                let (e, h, p) = (bind(&ne, &vars[2..a]), bind(&nh, &vars[a..b]), bind(&np, &vars[b..]));
                let dp = DmcfBound { encoder: &e, head: &h, projection: &p };
                let mut zs = Vec::new();
                let mut intra = Vec::new();
                for k in 0..2 {
                    let out = view_forward(tape, &dp, vars[k], &scores, &Weighting::Learned, &cfg, &mut Ctx::eval())?;
                    zs.push(out.z);
                    intra.push(loss_intra(tape, out.weighted, 0.5, 2, 4, k as u64)?);
                }
                // Two samples per batch: the second pairs the views swapped.
                let z1 = tape.concat_rows(&[zs[0], zs[1]])?;
                let z2 = tape.concat_rows(&[zs[1], zs[0]])?;
                let inter = loss_inter(tape, z1, z2, 0.5)?;
                let intra = tape.add(intra[0], intra[1])?;
                loss_total(tape, inter, intra, 0.5)
            };
            let report = grad_check_many(loss, &inputs, DEFAULT_TOL).unwrap();
            assert!(report.passed(), "seed {seed}: {report:?}");
            assert!(report.skipped * 10 < report.checked, "seed {seed}: {report:?}");
        }
    }
}
