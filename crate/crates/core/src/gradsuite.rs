//! Finite-difference checks of every tape primitive and of the composed
//! training losses on small random instances.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand::SeedableRng;

use crate::cde::{self, CdeConfig};
use crate::dmcf::{self, DmcfBound, Weighting};
use crate::encoder::{self, ConvLayer, EncoderConfig};
use crate::error::Result;
use crate::gradcheck::{grad_check_many, GradCheckReport, DEFAULT_TOL};
use crate::nn::{Bound, Ctx, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One named check; `run(seed)` builds a random instance and compares
/// gradients.
pub struct Case {
    pub name: &'static str,
    pub run: fn(u64) -> Result<GradCheckReport>,
}

fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed ^ 0x6772_6164)
}

fn rand_t(r: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).expect("shape")
}

/// `sum(out * R)` for a fixed random `R`, so every output element carries
/// a distinct weight.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut r = Rng::seed_from_u64(seed ^ 0x7072_6f6a);
    let w = rand_t(&mut r, tape.shape(out));
    let wv = tape.constant(w);
    let prod = tape.mul(out, wv)?;
    tape.sum(prod)
}

fn check(inputs: &[Tensor<f64>], seed: u64, f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> Result<GradCheckReport> {
    grad_check_many(
        |tape, v| {
            let out = f(tape, v)?;
            project(tape, out, seed)
        },
        inputs,
        DEFAULT_TOL,
    )
}

fn names(s: &ParamStore<f64>) -> Vec<String> {
    s.iter().map(|(n, _)| String::from(n)).collect()
}

fn bind(names: &[String], vars: &[Var]) -> Bound {
    Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()).collect())
}

/// Parameters perturbed away from their initialization so zero biases and
/// unit gains do not hide errors.
fn jittered(store: &ParamStore<f64>, r: &mut Rng) -> Vec<Tensor<f64>> {
    store
        .iter()
        .map(|(_, t)| {
            let data = t.data().iter().map(|v| v + r.gen_range(-0.1..0.1)).collect();
            Tensor::new(t.shape().to_vec(), data).expect("shape")
        })
        .collect()
}

fn tiny_encoder() -> EncoderConfig {
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

macro_rules! unary {
    ($name:literal, $shape:expr, |$t:ident, $x:ident| $body:expr) => {
        Case {
            name: $name,
            run: |seed| {
                let mut r = rng(seed);
                let x = rand_t(&mut r, &$shape);
                check(&[x], seed, |$t, v| {
                    let $x = v[0];
                    $body
                })
            },
        }
    };
}

macro_rules! binary {
    ($name:literal, $sa:expr, $sb:expr, |$t:ident, $a:ident, $b:ident| $body:expr) => {
        Case {
            name: $name,
            run: |seed| {
                let mut r = rng(seed);
                let a = rand_t(&mut r, &$sa);
                let b = rand_t(&mut r, &$sb);
                check(&[a, b], seed, |$t, v| {
                    let ($a, $b) = (v[0], v[1]);
                    $body
                })
            },
        }
    };
}

pub fn primitive_cases() -> Vec<Case> {
    vec![
        binary!("matmul", [3, 4], [4, 2], |t, a, b| t.matmul(a, b)),
        binary!("matmul_t", [3, 4], [5, 4], |t, a, b| t.matmul_t(a, b)),
        unary!("transpose", [3, 4], |t, x| t.transpose(x)),
        binary!("add", [3, 4], [3, 4], |t, a, b| t.add(a, b)),
        binary!("sub", [3, 4], [3, 4], |t, a, b| t.sub(a, b)),
        binary!("mul", [3, 4], [3, 4], |t, a, b| t.mul(a, b)),
        binary!("add_row", [3, 4], [4], |t, a, b| t.add_row(a, b)),
        unary!("scale", [3, 4], |t, x| t.scale(x, -1.7)),
        Case {
            name: "conv1d_dilated",
            run: |seed| {
                let mut r = rng(seed);
                let x = rand_t(&mut r, &[9, 2]);
                let w = rand_t(&mut r, &[3, 2, 3]);
                let dilation = 1 + (seed % 3) as usize;
                check(&[x, w], seed, |t, v| t.conv1d_dilated(v[0], v[1], dilation))
            },
        },
        unary!("softmax_rows", [3, 5], |t, x| t.softmax_rows(x)),
        Case {
            name: "layer_norm",
            run: |seed| {
                let mut r = rng(seed);
                let x = rand_t(&mut r, &[3, 5]);
                let g = rand_t(&mut r, &[5]);
                let b = rand_t(&mut r, &[5]);
                check(&[x, g, b], seed, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5))
            },
        },
        unary!("sigmoid", [3, 4], |t, x| t.sigmoid(x)),
        unary!("relu", [3, 4], |t, x| t.relu(x)),
        unary!("square", [3, 4], |t, x| t.square(x)),
        unary!("mean_rows", [4, 3], |t, x| t.mean_rows(x)),
        unary!("sum", [3, 4], |t, x| t.sum(x)),
        unary!("mean", [3, 4], |t, x| t.mean(x)),
        binary!("row_scale", [4, 3], [4], |t, a, b| t.row_scale(a, b)),
        unary!("reshape", [3, 4], |t, x| t.reshape(x, &[2, 6])),
        unary!("slice_rows", [5, 3], |t, x| t.slice_rows(x, 1, 3)),
        unary!("slice_cols", [3, 5], |t, x| t.slice_cols(x, 2, 2)),
        binary!("concat_cols", [3, 2], [3, 4], |t, a, b| t.concat_cols(&[a, b])),
        binary!("concat_rows", [2, 3], [4, 3], |t, a, b| t.concat_rows(&[a, b])),
        unary!("l2_normalize_rows", [3, 4], |t, x| t.l2_normalize_rows(x)),
        unary!("gather", [3, 4], |t, x| t.gather(x, vec![0, 5, 5, 11, 2, 7], &[2, 3])),
        Case {
            name: "softmax_cross_entropy",
            run: |seed| {
                let mut r = rng(seed);
                let x = rand_t(&mut r, &[4, 5]);
                let targets: Vec<usize> = (0..4).map(|_| r.gen_range(0..5)).collect();
                check(&[x], seed, |t, v| t.softmax_cross_entropy(v[0], &targets))
            },
        },
        Case {
            name: "bce",
            run: |seed| {
                let mut r = rng(seed);
                let x = rand_t(&mut r, &[5, 1]);
                let y: Vec<f64> = (0..5).map(|_| f64::from(r.gen::<bool>() as u8)).collect();
                check(&[x], seed, |t, v| {
                    let p = t.sigmoid(v[0])?;
                    t.bce(p, &y)
                })
            },
        },
        Case {
            name: "dropout",
            run: |seed| {
                let mut r = rng(seed);
                let x = rand_t(&mut r, &[3, 4]);
                let keep: Vec<bool> = (0..12).map(|_| r.gen::<f64>() >= 0.3).collect();
                check(&[x], seed, |t, v| t.dropout(v[0], 0.3, &keep))
            },
        },
    ]
}

/// Reconstruction loss of the Transformer autoencoder.
fn recon_case(seed: u64) -> Result<GradCheckReport> {
    let cfg = CdeConfig { d_model: 4, n_heads: 2, d_ff: 4, d_latent: 2, patch: 2, ..CdeConfig::default() };
    let mut r = rng(seed);
    let store: ParamStore<f64> = cde::init_params(&cfg, &mut r)?;
    let ns = names(&store);
    let mut inputs = vec![rand_t(&mut r, &[8, 2])];
    inputs.extend(jittered(&store, &mut r));
    grad_check_many(|t, v| cde::recon_loss(t, &bind(&ns, &v[1..]), v[0], &cfg), &inputs, DEFAULT_TOL)
}

/// Symmetric inter-view InfoNCE.
fn inter_case(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let n = 2 + (seed % 4) as usize;
    let z1 = rand_t(&mut r, &[n, 3]);
    let z2 = rand_t(&mut r, &[n, 3]);
    grad_check_many(|t, v| dmcf::loss_inter(t, v[0], v[1], 0.2), &[z1, z2], DEFAULT_TOL)
}

/// Temporal intra-view loss.
fn intra_case(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let h = rand_t(&mut r, &[12, 3]);
    grad_check_many(|t, v| dmcf::loss_intra(t, v[0], 0.2, 2, 4, seed), &[h], DEFAULT_TOL)
}

/// Encoder, weight head, weighting, pooling, projection and the combined
/// contrastive loss over two views.
fn weighted_chain_case(seed: u64) -> Result<GradCheckReport> {
    let cfg = tiny_encoder();
    let mut r = rng(seed);
    let enc: ParamStore<f64> = encoder::init_params(&cfg, &mut r)?;
    let head: ParamStore<f64> = dmcf::init_weight_head(&mut r)?;
    let proj: ParamStore<f64> = dmcf::init_projection(8, 4, &mut r)?;
    let (ne, nh, np) = (names(&enc), names(&head), names(&proj));
    let scores: Vec<Vec<f64>> = (0..2).map(|_| (0..12).map(|_| r.gen_range(-2.0..2.0)).collect()).collect();
    let mut inputs = vec![rand_t(&mut r, &[12, 2]), rand_t(&mut r, &[12, 2]), rand_t(&mut r, &[12, 2]), rand_t(&mut r, &[12, 2])];
    for s in [&enc, &head, &proj] {
        inputs.extend(jittered(s, &mut r));
    }
    let (a, b) = (4 + ne.len(), 4 + ne.len() + nh.len());
    grad_check_many(
        |t, v| {
            let (e, h, p) = (bind(&ne, &v[4..a]), bind(&nh, &v[a..b]), bind(&np, &v[b..]));
            let dp = DmcfBound { encoder: &e, head: &h, projection: &p };
            let mut zs = [Vec::new(), Vec::new()];
            let mut intra = Vec::new();
            for i in 0..2 {
                for (k, zk) in zs.iter_mut().enumerate() {
                    let out = dmcf::view_forward(t, &dp, v[2 * i + k], &scores[k], &Weighting::Learned, &cfg, &mut Ctx::eval())?;
                    zk.push(out.z);
                    intra.push(dmcf::loss_intra(t, out.weighted, 0.2, 2, 3, seed + k as u64)?);
                }
            }
            let z1 = t.concat_rows(&zs[0])?;
            let z2 = t.concat_rows(&zs[1])?;
            let inter = dmcf::loss_inter(t, z1, z2, 0.2)?;
            let intra = cde::mean_of(t, &intra)?;
            dmcf::loss_total(t, inter, intra, 0.5)
        },
        &inputs,
        DEFAULT_TOL,
    )
}

/// Binary cross-entropy of a linear classifier on mean-pooled encoder
/// output.
fn classifier_case(seed: u64) -> Result<GradCheckReport> {
    let cfg = tiny_encoder();
    let mut r = rng(seed);
    let enc: ParamStore<f64> = encoder::init_params(&cfg, &mut r)?;
    let ne = names(&enc);
    let xs: Vec<Tensor<f64>> = (0..3).map(|_| rand_t(&mut r, &[10, 2])).collect();
    let y = [1.0, 0.0, 1.0];
    let mut inputs = xs;
    inputs.push(rand_t(&mut r, &[8, 1]));
    inputs.push(rand_t(&mut r, &[1]));
    inputs.extend(jittered(&enc, &mut r));
    grad_check_many(
        |t, v| {
            let e = bind(&ne, &v[5..]);
            let mut pooled = Vec::new();
            for &x in &v[..3] {
                let h = encoder::encode(t, &e, x, &cfg, &mut Ctx::eval())?;
                pooled.push(t.mean_rows(h)?);
            }
            let feats = t.concat_rows(&pooled)?;
            let logits = t.matmul(feats, v[3])?;
            let logits = t.add_row(logits, v[4])?;
            let p = t.sigmoid(logits)?;
            t.bce(p, &y)
        },
        &inputs,
        DEFAULT_TOL,
    )
}

pub fn composed_cases() -> Vec<Case> {
    vec![
        Case { name: "reconstruction loss", run: recon_case },
        Case { name: "inter-view InfoNCE", run: inter_case },
        Case { name: "intra-view loss", run: intra_case },
        Case { name: "weighted contrastive chain", run: weighted_chain_case },
        Case { name: "classifier cross-entropy chain", run: classifier_case },
    ]
}

/// Outcome of one case over several instances.
#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    pub reports: Vec<GradCheckReport>,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        !self.reports.is_empty() && self.reports.iter().all(GradCheckReport::passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }
}

/// Runs every case on seeds `0..instances`.
pub fn run_all(instances: u64) -> Result<Vec<CaseResult>> {
    primitive_cases()
        .into_iter()
        .chain(composed_cases())
        .map(|c| {
            let reports = (0..instances).map(|s| (c.run)(s)).collect::<Result<Vec<_>>>()?;
            Ok(CaseResult { name: c.name, reports })
        })
        .collect()
}
