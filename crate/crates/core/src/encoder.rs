//! Shared encoder: a stack of dilated convolutions followed by sinusoidal
//! positional encodings and pre-norm multi-head self-attention blocks.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nn::{Bound, Ctx, ParamStore};
use crate::real::Real;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLayer {
    pub kernel: usize,
    pub dilation: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub d_in: usize,
    pub d_hidden: usize,
    pub conv_layers: Vec<ConvLayer>,
    pub n_attn_blocks: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        let d_hidden = 32;
        EncoderConfig {
            d_in: 2,
            d_hidden,
            conv_layers: [1, 2, 4]
                .iter()
                .map(|&dilation| ConvLayer { kernel: 3, dilation, channels: d_hidden })
                .collect(),
            n_attn_blocks: 2,
            n_heads: 4,
            d_ff: 64,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    /// Convenience constructor with uniform kernel size and `channels ==
    /// d_hidden` for every conv layer.
    pub fn with_dilations(d_in: usize, d_hidden: usize, kernel: usize, dilations: &[usize]) -> Self {
        EncoderConfig {
            d_in,
            d_hidden,
            conv_layers: dilations.iter().map(|&dilation| ConvLayer { kernel, dilation, channels: d_hidden }).collect(),
            ..EncoderConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_hidden == 0 {
            return Err(Error::invalid("encoder widths must be positive"));
        }
        if self.n_heads == 0 || !self.d_hidden.is_multiple_of(self.n_heads) {
            return Err(Error::invalid(format!("d_hidden {} not divisible by {} heads", self.d_hidden, self.n_heads)));
        }
        if !self.d_hidden.is_multiple_of(2) {
            return Err(Error::invalid("d_hidden must be even for positional encodings"));
        }
        let last = self.conv_layers.last().ok_or_else(|| Error::invalid("at least one conv layer"))?;
        if last.channels != self.d_hidden {
            return Err(Error::invalid("last conv layer must output d_hidden channels"));
        }
        for (i, l) in self.conv_layers.iter().enumerate() {
            if l.kernel % 2 == 0 {
                return Err(Error::invalid(format!("conv layer {i}: kernel {} is even", l.kernel)));
            }
            if l.dilation == 0 || l.channels == 0 {
                return Err(Error::invalid(format!("conv layer {i}: dilation and channels must be positive")));
            }
            if i > 0 && l.dilation <= self.conv_layers[i - 1].dilation {
                return Err(Error::invalid("conv dilations must be strictly increasing"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must lie in [0, 1)"));
        }
        Ok(())
    }

    /// `1 + sum_i (K_i - 1) * d_i`.
    pub fn receptive_field(&self) -> usize {
        1 + self.conv_layers.iter().map(|l| (l.kernel - 1) * l.dilation).sum::<usize>()
    }
}

/// `PE[t, 2i] = sin(t / 10000^(2i/d))`, `PE[t, 2i+1] = cos(...)`.
pub fn positional_encoding<T: Real>(t_len: usize, d: usize) -> Result<Tensor<T>> {
    if !d.is_multiple_of(2) || d == 0 {
        return Err(Error::invalid(format!("positional encoding width must be even, got {d}")));
    }
    let mut data = Vec::with_capacity(t_len * d);
    for t in 0..t_len {
        for j in 0..d {
            let i2 = (j - j % 2) as f64;
            let angle = t as f64 / libm::pow(10000.0, i2 / d as f64);
            data.push(T::from_f64(if j % 2 == 0 { libm::sin(angle) } else { libm::cos(angle) }));
        }
    }
    Tensor::new(vec![t_len, d], data)
}

/// `softmax(Q K^T / sqrt(d_k)) V`; returns the output and the weights.
pub fn scaled_dot_attention<T: Real>(tape: &mut Tape<T>, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let dk = tape.value(q).cols();
    if tape.value(k).cols() != dk || tape.value(k).rows() != tape.value(v).rows() {
        return Err(Error::shape(
            "scaled_dot_attention",
            format!("Q {:?}, K {:?}, V {:?}", tape.shape(q), tape.shape(k), tape.shape(v)),
        ));
    }
    let scores = tape.matmul_t(q, k)?;
    let scores = tape.scale(scores, 1.0 / libm::sqrt(dk as f64))?;
    let weights = tape.softmax_rows(scores)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

pub(crate) fn add_attention_block<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut Rng,
    prefix: &str,
    d: usize,
    d_ff: usize,
) -> Result<()> {
    store.add_layer_norm(&format!("{prefix}.ln1"), d)?;
    for m in ["q", "k", "v", "o"] {
        store.add_linear(rng, &format!("{prefix}.attn.{m}"), d, d)?;
    }
    store.add_layer_norm(&format!("{prefix}.ln2"), d)?;
    store.add_linear(rng, &format!("{prefix}.ff1"), d, d_ff)?;
    store.add_linear(rng, &format!("{prefix}.ff2"), d_ff, d)
}

/// Multi-head self-attention over the rows of `x`. Per-head weight matrices
/// are pushed onto `attn` when given.
pub(crate) fn multi_head_attention<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    prefix: &str,
    x: Var,
    n_heads: usize,
    mut attn: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let q = p.linear(tape, &format!("{prefix}.q"), x)?;
    let k = p.linear(tape, &format!("{prefix}.k"), x)?;
    let v = p.linear(tape, &format!("{prefix}.v"), x)?;
    let d = tape.value(q).cols();
    let dh = d / n_heads;
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (qh, kh, vh) = if n_heads == 1 {
            (q, k, v)
        } else {
            (tape.slice_cols(q, h * dh, dh)?, tape.slice_cols(k, h * dh, dh)?, tape.slice_cols(v, h * dh, dh)?)
        };
        let (out, w) = scaled_dot_attention(tape, qh, kh, vh)?;
        if let Some(a) = attn.as_deref_mut() {
            a.push(w);
        }
        heads.push(out);
    }
    let joined = if n_heads == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    p.linear(tape, &format!("{prefix}.o"), joined)
}

/// Pre-norm Transformer block: `h + MHA(LN(h))`, then `h + FF(LN(h))`.
pub(crate) fn attention_block<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    prefix: &str,
    h: Var,
    n_heads: usize,
    ctx: &mut Ctx<'_>,
    attn: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let n1 = p.layer_norm(tape, &format!("{prefix}.ln1"), h)?;
    let a = multi_head_attention(tape, p, &format!("{prefix}.attn"), n1, n_heads, attn)?;
    let a = ctx.apply_dropout(tape, a)?;
    let h = tape.add(h, a)?;
    let n2 = p.layer_norm(tape, &format!("{prefix}.ln2"), h)?;
    let f = p.linear(tape, &format!("{prefix}.ff1"), n2)?;
    let f = tape.relu(f)?;
    let f = p.linear(tape, &format!("{prefix}.ff2"), f)?;
    let f = ctx.apply_dropout(tape, f)?;
    tape.add(h, f)
}

/// Fresh encoder parameters: Xavier-uniform weights, zero biases.
pub fn init_params<T: Real>(cfg: &EncoderConfig, rng: &mut Rng) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut c_in = cfg.d_in;
    for (i, l) in cfg.conv_layers.iter().enumerate() {
        let w = ParamStore::xavier(rng, &[l.channels, c_in, l.kernel], c_in * l.kernel, l.channels * l.kernel);
        store.insert(format!("conv{i}.w"), w)?;
        store.insert(format!("conv{i}.b"), Tensor::zeros(&[l.channels]))?;
        c_in = l.channels;
    }
    for b in 0..cfg.n_attn_blocks {
        add_attention_block(&mut store, rng, &format!("block{b}"), cfg.d_hidden, cfg.d_ff)?;
    }
    Ok(store)
}

/// Dilated convolution stack with ReLU after each layer.
pub fn conv_stack<T: Real>(tape: &mut Tape<T>, p: &Bound, x: Var, cfg: &EncoderConfig) -> Result<Var> {
    if tape.value(x).rank() != 2 || tape.value(x).cols() != cfg.d_in {
        return Err(Error::shape("encode", format!("expected T x {}, got {:?}", cfg.d_in, tape.shape(x))));
    }
    let mut h = x;
    for (i, l) in cfg.conv_layers.iter().enumerate() {
        let w = p.get(&format!("conv{i}.w"))?;
        let b = p.get(&format!("conv{i}.b"))?;
        h = tape.conv1d_dilated(h, w, l.dilation)?;
        h = tape.add_row(h, b)?;
        h = tape.relu(h)?;
    }
    Ok(h)
}

/// Per-timestep representations `T x d_hidden`.
pub fn encode<T: Real>(tape: &mut Tape<T>, p: &Bound, x: Var, cfg: &EncoderConfig, ctx: &mut Ctx<'_>) -> Result<Var> {
    let h = conv_stack(tape, p, x, cfg)?;
    let t_len = tape.value(h).rows();
    let pe = tape.constant(positional_encoding(t_len, cfg.d_hidden)?);
    let mut h = tape.add(h, pe)?;
    for b in 0..cfg.n_attn_blocks {
        h = attention_block(tape, p, &format!("block{b}"), h, cfg.n_heads, ctx, None)?;
    }
    Ok(h)
}

/// Evaluation-mode forward pass on a fresh tape.
pub fn encode_eval<T: Real>(params: &ParamStore<T>, x: &Tensor<T>, cfg: &EncoderConfig) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let h = encode(&mut tape, &p, xv, cfg, &mut Ctx::eval())?;
    Ok(tape.value(h).clone())
}

/// Global mean of the encoder output, the embedding used for
/// classification and separability.
pub fn pooled_embedding<T: Real>(params: &ParamStore<T>, x: &Tensor<T>, cfg: &EncoderConfig) -> Result<Vec<f64>> {
    Ok(encode_eval(params, x, cfg)?.column_means())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check_many, DEFAULT_TOL};
    use rand::{Rng as _, SeedableRng};

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            d_in: 2,
            d_hidden: 8,
            conv_layers: vec![ConvLayer { kernel: 3, dilation: 1, channels: 8 }, ConvLayer { kernel: 3, dilation: 2, channels: 8 }],
            n_attn_blocks: 1,
            n_heads: 2,
            d_ff: 8,
            dropout: 0.0,
        }
    }

    fn random(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn positional_encoding_values() {
        let pe = positional_encoding::<f64>(16, 8).unwrap();
        for j in 0..8 {
            assert_eq!(pe.at(0, j), if j % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!((pe.at(1, 0) - 0.84147).abs() < 1e-5);
        assert!(positional_encoding::<f64>(4, 3).is_err());
    }

    #[test]
    fn receptive_field_formula() {
        let cfg = EncoderConfig::with_dilations(1, 4, 3, &[1, 2, 4]);
        assert_eq!(cfg.receptive_field(), 15);
    }

    #[test]
    fn impulse_response_support_matches_receptive_field() {
        // Positive kernels keep every ReLU active, so the support of the
        // response is exactly the receptive field.
        let cfg = EncoderConfig { n_attn_blocks: 0, ..EncoderConfig::with_dilations(1, 4, 3, &[1, 2, 4]) };
        let mut store = ParamStore::<f64>::new();
        let mut c_in = 1;
        for (i, l) in cfg.conv_layers.iter().enumerate() {
            store.insert(format!("conv{i}.w"), Tensor::full(&[l.channels, c_in, l.kernel], 0.1)).unwrap();
            store.insert(format!("conv{i}.b"), Tensor::zeros(&[l.channels])).unwrap();
            c_in = l.channels;
        }
        let t_len = 41;
        let mut x = Tensor::<f64>::zeros(&[t_len, 1]);
        x.data_mut()[20] = 1.0;
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let xv = tape.constant(x);
        let h = conv_stack(&mut tape, &p, xv, &cfg).unwrap();
        let support: Vec<usize> = (0..t_len).filter(|&t| tape.value(h).at(t, 0) != 0.0).collect();
        assert_eq!(support.len(), cfg.receptive_field());
        assert_eq!(support, (13..=27).collect::<Vec<_>>());
    }

    #[test]
    fn output_shape_contract() {
        let mut rng = Rng::seed_from_u64(3);
        let cfg = EncoderConfig { dropout: 0.0, ..EncoderConfig::default() };
        let params = init_params::<f32>(&cfg, &mut rng).unwrap();
        for t_len in [32, 128] {
            let x = random(&mut rng, &[t_len, 2]).cast();
            let h = encode_eval(&params, &x, &cfg).unwrap();
            assert_eq!(h.shape(), &[t_len, cfg.d_hidden]);
        }
    }

    #[test]
    fn zero_input_gives_zero_conv_output() {
        let mut rng = Rng::seed_from_u64(4);
        let cfg = EncoderConfig::default();
        let params = init_params::<f32>(&cfg, &mut rng).unwrap();
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[32, 2]));
        let h = conv_stack(&mut tape, &p, x, &cfg).unwrap();
        assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let mut rng = Rng::seed_from_u64(4);
        let cfg = EncoderConfig::default();
        let params = init_params::<f32>(&cfg, &mut rng).unwrap();
        assert!(encode_eval(&params, &Tensor::zeros(&[32, 3]), &cfg).is_err());
    }

    #[test]
    fn config_validation() {
        let cfg = EncoderConfig { n_heads: 5, ..EncoderConfig::default() };
        assert!(cfg.validate().is_err());
        let mut cfg = EncoderConfig::default();
        cfg.conv_layers[1].dilation = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = EncoderConfig::default();
        cfg.conv_layers[0].kernel = 4;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn attention_with_equal_keys_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::from_rows(&[&[1.0, 2.0], &[-1.0, 0.5], &[0.3, 0.3]]).unwrap());
        let k = tape.constant(Tensor::from_rows(&[&[0.5, 0.5], &[0.5, 0.5], &[0.5, 0.5]]).unwrap());
        let v = tape.constant(Tensor::from_rows(&[&[1.0], &[2.0], &[3.0]]).unwrap());
        let (_, w) = scaled_dot_attention(&mut tape, q, k, v).unwrap();
        assert!(tape.value(w).data().iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-12));

        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::from_rows(&[&[0.7, -0.2]]).unwrap());
        let k = tape.constant(Tensor::from_rows(&[&[0.1, 0.9]]).unwrap());
        let v = tape.constant(Tensor::from_rows(&[&[4.0, 5.0, 6.0]]).unwrap());
        let (o, w) = scaled_dot_attention(&mut tape, q, k, v).unwrap();
        assert_eq!(tape.value(w).data(), &[1.0]);
        assert_eq!(tape.value(o).data(), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn attention_matches_direct_formula() {
        let mut rng = Rng::seed_from_u64(11);
        let (q, k, v) = (random(&mut rng, &[3, 2]), random(&mut rng, &[3, 2]), random(&mut rng, &[3, 2]));
        // Direct oracle.
        let mut want = [[0.0f64; 2]; 3];
        for i in 0..3 {
            let s: Vec<f64> = (0..3).map(|j| (q.at(i, 0) * k.at(j, 0) + q.at(i, 1) * k.at(j, 1)) / 2f64.sqrt()).collect();
            let z: f64 = s.iter().map(|x| x.exp()).sum();
            for j in 0..3 {
                for c in 0..2 {
                    want[i][c] += s[j].exp() / z * v.at(j, c);
                }
            }
        }
        let mut tape = Tape::<f64>::new();
        let (qv, kv, vv) = (tape.constant(q), tape.constant(k), tape.constant(v));
        let (o, w) = scaled_dot_attention(&mut tape, qv, kv, vv).unwrap();
        for i in 0..3 {
            let row: f64 = tape.value(w).row(i).iter().sum();
            assert!((row - 1.0).abs() < 1e-12);
            for c in 0..2 {
                assert!((tape.value(o).at(i, c) - want[i][c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn encoder_gradients_pass_finite_difference_check() {
        let cfg = tiny_cfg();
        let mut rng = Rng::seed_from_u64(5);
        let params = init_params::<f64>(&cfg, &mut rng).unwrap();
        // Non-zero biases so every parameter gets exercised.
        let mut inputs: Vec<Tensor<f64>> = params
            .iter()
            .map(|(_, t)| {
                let noise: Vec<f64> = (0..t.numel()).map(|_| rng.gen_range(-0.1..0.1)).collect();
                let data = t.data().iter().zip(&noise).map(|(a, b)| a + b).collect();
                Tensor::new(t.shape().to_vec(), data).unwrap()
            })
            .collect();
        let names: Vec<_> = params.iter().map(|(n, _)| alloc::string::String::from(n)).collect();
        inputs.push(random(&mut rng, &[8, 2]));
        let report = grad_check_many(
            |tape, vars| {
                let bound = bound_from(&names, &vars[..vars.len() - 1]);
                let h = encode(tape, &bound, vars[vars.len() - 1], &cfg, &mut Ctx::eval())?;
                tape.sum(h)
            },
            &inputs,
            DEFAULT_TOL,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    pub(crate) fn bound_from(names: &[alloc::string::String], vars: &[Var]) -> Bound {
        Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()).collect())
    }
}
