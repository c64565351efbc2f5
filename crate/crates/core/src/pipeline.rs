//! The three training stages, fine-tuning, evaluation and a full per-seed
//! run.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::cde::{self, CdeModel};
use crate::config::{FineTuneMode, TrainConfig};
use crate::dmcf::{self, AugmentationSpec, DmcfBound, Weighting};
use crate::encoder;
use crate::error::{Error, Result};
use crate::metrics::{self, SeedMetrics};
use crate::nn::{Ctx, ParamStore};
use crate::optim::AdamState;
use crate::rng::{self, hash_str};
use crate::signal::{self, DatasetSplit, Label, TimeSeriesSegment};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Cde,
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn tag(self) -> u8 {
        match self {
            Stage::Cde => 1,
            Stage::Pretrain => 2,
            Stage::Finetune => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(Stage::Cde),
            2 => Ok(Stage::Pretrain),
            3 => Ok(Stage::Finetune),
            _ => Err(Error::Data(format!("unknown stage tag {tag}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Cde => "cde",
            Stage::Pretrain => "dmcf",
            Stage::Finetune => "finetune",
        }
    }
}

/// Everything needed to resume from, or evaluate, the end of a stage.
/// Stores belonging to later stages are empty.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub config: TrainConfig,
    pub seed: u64,
    pub cde: ParamStore<f32>,
    pub encoder: ParamStore<f32>,
    pub weight_head: ParamStore<f32>,
    pub projection: ParamStore<f32>,
    pub classifier: ParamStore<f32>,
}

impl Checkpoint {
    pub fn stores(&self) -> [(&'static str, &ParamStore<f32>); 5] {
        [
            ("cde", &self.cde),
            ("encoder", &self.encoder),
            ("weight_head", &self.weight_head),
            ("projection", &self.projection),
            ("classifier", &self.classifier),
        ]
    }

    pub fn stores_mut(&mut self) -> [(&'static str, &mut ParamStore<f32>); 5] {
        [
            ("cde", &mut self.cde),
            ("encoder", &mut self.encoder),
            ("weight_head", &mut self.weight_head),
            ("projection", &mut self.projection),
            ("classifier", &mut self.classifier),
        ]
    }

    /// The frozen reconstruction model, if the variant trains one.
    pub fn cde_model(&self) -> Option<CdeModel> {
        let kind = self.config.variant.cde_kind()?;
        if self.cde.is_empty() {
            return None;
        }
        Some(CdeModel { cfg: self.config.cde(kind), params: self.cde.clone() })
    }

    /// Parameter layout a checkpoint of `stage` must have under `config`,
    /// as `(store, name, shape)`.
    pub fn expected_layout(config: &TrainConfig, stage: Stage) -> Result<Vec<(&'static str, String, Vec<usize>)>> {
        let template = Checkpoint::template(config, stage)?;
        let mut out = Vec::new();
        for (store, params) in template.stores() {
            out.extend(params.iter().map(|(n, t)| (store, String::from(n), t.shape().to_vec())));
        }
        Ok(out)
    }

    fn template(config: &TrainConfig, stage: Stage) -> Result<Checkpoint> {
        let mut r = rng::stream(0, 0, 0);
        let cde = match config.variant.cde_kind() {
            Some(kind) => cde::init_params(&config.cde(kind), &mut r)?,
            None => ParamStore::new(),
        };
        let mut ck = Checkpoint {
            stage,
            config: config.clone(),
            seed: 0,
            cde,
            encoder: ParamStore::new(),
            weight_head: ParamStore::new(),
            projection: ParamStore::new(),
            classifier: ParamStore::new(),
        };
        if stage != Stage::Cde {
            ck.encoder = encoder::init_params(&config.encoder(), &mut r)?;
            ck.weight_head = dmcf::init_weight_head(&mut r)?;
            ck.projection = dmcf::init_projection(config.d_hidden, config.d_project, &mut r)?;
        }
        if stage == Stage::Finetune {
            ck.classifier = init_classifier(config.d_hidden)?;
        }
        Ok(ck)
    }
}

/// Healthy reference data plus the target training segments with labels
/// stripped, for contrastive pre-training.
#[derive(Clone, Debug)]
pub struct PretrainPool {
    pub healthy: Vec<TimeSeriesSegment>,
    pub target: Vec<TimeSeriesSegment>,
}

impl PretrainPool {
    pub fn new(healthy: &[TimeSeriesSegment], target_train: &[TimeSeriesSegment]) -> Self {
        PretrainPool {
            healthy: healthy.iter().map(TimeSeriesSegment::unlabeled).collect(),
            target: target_train.iter().map(TimeSeriesSegment::unlabeled).collect(),
        }
    }

    fn check(&self) -> Result<()> {
        for seg in self.healthy.iter().chain(&self.target) {
            if seg.label != Label::Unlabeled {
                return Err(Error::LabelLeak { patient_id: seg.patient_id.clone() });
            }
        }
        if self.target.is_empty() && self.healthy.is_empty() {
            return Err(Error::Data("empty pre-training pool".into()));
        }
        Ok(())
    }
}

/// Data of one seed: the split target cohort and the healthy reference.
#[derive(Clone, Debug)]
pub struct RunData {
    pub split: DatasetSplit,
    pub healthy: Vec<TimeSeriesSegment>,
}

pub fn prepare_data(cfg: &TrainConfig, seed: u64) -> Result<RunData> {
    let segs = signal::make_dataset(&cfg.dataset(), seed)?;
    let split = signal::split_by_patient(&segs, cfg.split, cfg.label_fraction, seed)?;
    let healthy = signal::make_healthy_set(cfg.healthy_patients, cfg.healthy_segs_per_patient, cfg.t_len, cfg.channels, seed)?;
    Ok(RunData { split, healthy })
}

/// Stage 1: fits the reconstruction model on healthy data only. Returns the
/// checkpoint and the per-epoch loss (empty when the variant has no CDE).
pub fn stage1(cfg: &TrainConfig, healthy: &[TimeSeriesSegment], seed: u64) -> Result<(Checkpoint, Vec<f64>)> {
    cfg.validate()?;
    if let Some(seg) = healthy.iter().find(|s| s.label != Label::Healthy) {
        return Err(Error::DiseasedInHealthySet { patient_id: seg.patient_id.clone() });
    }
    let (store, curve) = match cfg.variant.cde_kind() {
        Some(kind) => {
            let mut model = CdeModel::new(cfg.cde(kind), rng::derive_seed(seed, hash_str("stage1"), 0))?;
            let curve = cde::train_cde(&mut model, healthy, &cfg.cde_train(), seed)?;
            (model.params, curve)
        }
        None => (ParamStore::new(), Vec::new()),
    };
    let ck = Checkpoint {
        stage: Stage::Cde,
        config: cfg.clone(),
        seed,
        cde: store,
        encoder: ParamStore::new(),
        weight_head: ParamStore::new(),
        projection: ParamStore::new(),
        classifier: ParamStore::new(),
    };
    Ok((ck, curve))
}

/// Per-timestep scores for every pool segment; zeros when the weighting
/// ignores them.
fn pool_scores(ck: &Checkpoint, segs: &[TimeSeriesSegment], weighting: &Weighting) -> Result<Vec<Vec<f64>>> {
    match weighting {
        Weighting::Constant(_) => Ok(segs.iter().map(|s| vec![0.0; s.len()]).collect()),
        Weighting::Learned => {
            let model = ck
                .cde_model()
                .ok_or_else(|| Error::invalid("learned weighting needs a trained CDE in the checkpoint"))?;
            segs.iter().map(|s| Ok(model.score(&s.x, ck.config.beta)?.s)).collect()
        }
    }
}

/// Batches of indices into `healthy ++ target`: every target segment once
/// per epoch, topped up with `round(N * healthy_frac)` healthy segments
/// drawn cyclically from a shuffled order.
fn mixed_batches(cfg: &TrainConfig, n_healthy: usize, n_target: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let n = cfg.batch_size;
    let mut per_h = libm::round(n as f64 * cfg.stage2_healthy_frac) as usize;
    if n_healthy == 0 {
        per_h = 0;
    } else if n_target == 0 {
        per_h = n;
    }
    let per_t = n - per_h;
    let mut r = rng::stream(seed, hash_str("stage2.batches"), epoch as u64);
    let mut h: Vec<usize> = (0..n_healthy).collect();
    let mut t: Vec<usize> = (0..n_target).map(|i| n_healthy + i).collect();
    rng::shuffle(&mut r, &mut h);
    rng::shuffle(&mut r, &mut t);
    let n_batches = if per_t == 0 { n_healthy.div_ceil(n) } else { n_target.div_ceil(per_t) };
    let mut hc = 0usize;
    (0..n_batches)
        .map(|b| {
            let mut batch: Vec<usize> = if per_t == 0 {
                Vec::new()
            } else {
                t[b * per_t..((b + 1) * per_t).min(n_target)].to_vec()
            };
            for _ in 0..per_h {
                batch.push(h[hc % n_healthy]);
                hc += 1;
            }
            batch
        })
        .filter(|b| b.len() >= 2)
        .collect()
}

/// Stage 2: contrastive pre-training of encoder, weight head and
/// projection with the CDE frozen. Returns the checkpoint and the mean
/// batch loss of every epoch.
pub fn stage2(cde_ck: &Checkpoint, pool: &PretrainPool, seed: u64) -> Result<(Checkpoint, Vec<f64>)> {
    pool.check()?;
    let cfg = &cde_ck.config;
    cfg.validate()?;
    let variant = cfg.variant;
    let weighting = variant.weighting();
    let lambda = variant.lambda(cfg);
    let enc_cfg = cfg.encoder();
    let spec = if variant.fixed_views() {
        AugmentationSpec { jitter_sigma: cfg.jitter_sigma, ..AugmentationSpec::identity() }
    } else {
        cfg.augmentation()
    };

    let segs: Vec<&TimeSeriesSegment> = pool.healthy.iter().chain(&pool.target).collect();
    let owned: Vec<TimeSeriesSegment> = segs.iter().map(|s| (*s).clone()).collect();
    let scores = pool_scores(cde_ck, &owned, &weighting)?;

    let mut r = rng::stream(seed, hash_str("stage2.init"), 0);
    let mut enc = encoder::init_params::<f32>(&enc_cfg, &mut r)?;
    let mut head = dmcf::init_weight_head::<f32>(&mut r)?;
    let mut proj = dmcf::init_projection::<f32>(cfg.d_hidden, cfg.d_project, &mut r)?;
    let mut adam_enc = AdamState::new(&enc);
    let mut adam_head = AdamState::new(&head);
    let mut adam_proj = AdamState::new(&proj);
    let train_head = weighting == Weighting::Learned;

    let mut curve = Vec::with_capacity(cfg.stage2_epochs);
    for epoch in 0..cfg.stage2_epochs {
        let batches = mixed_batches(cfg, pool.healthy.len(), pool.target.len(), seed, epoch);
        let mut total = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let step = (epoch as u64) << 32 | b as u64;
            let mut tape = Tape::<f32>::new();
            let pe = enc.bind(&mut tape, true);
            let ph = head.bind(&mut tape, train_head);
            let pp = proj.bind(&mut tape, true);
            let bound = DmcfBound { encoder: &pe, head: &ph, projection: &pp };
            let mut drop_rng = rng::stream(seed, hash_str("stage2.dropout"), step);
            let mut z: [Vec<Var>; 2] = [Vec::new(), Vec::new()];
            let mut intra = Vec::new();
            for (slot, &i) in batch.iter().enumerate() {
                for (k, zk) in z.iter_mut().enumerate() {
                    let aug_seed = if variant.fixed_views() {
                        rng::derive_seed(seed, hash_str("stage2.fixed_view"), (i * 2 + k) as u64)
                    } else {
                        rng::derive_seed(seed, hash_str("stage2.view"), step << 8 ^ (slot * 2 + k) as u64)
                    };
                    let (view, offset) = dmcf::augment(&segs[i].x, &spec, aug_seed)?;
                    let len = view.rows();
                    let xv = tape.constant(view);
                    let mut ctx = Ctx::train(cfg.dropout, &mut drop_rng);
                    let out = dmcf::view_forward(&mut tape, &bound, xv, &scores[i][offset..offset + len], &weighting, &enc_cfg, &mut ctx)?;
                    zk.push(out.z);
                    if lambda > 0.0 {
                        let intra_seed = rng::derive_seed(aug_seed, hash_str("stage2.intra"), 0);
                        intra.push(dmcf::loss_intra(&mut tape, out.weighted, cfg.tau, cfg.delta, cfg.n_pairs, intra_seed)?);
                    }
                }
            }
            let z1 = tape.concat_rows(&z[0])?;
            let z2 = tape.concat_rows(&z[1])?;
            let inter = dmcf::loss_inter(&mut tape, z1, z2, cfg.tau)?;
            let loss = if intra.is_empty() {
                inter
            } else {
                let intra = cde::mean_of(&mut tape, &intra)?;
                dmcf::loss_total(&mut tape, inter, intra, lambda)?
            };
            total += tape.scalar_value(loss);
            tape.backward(loss)?;
            adam_enc.step(&mut enc, &pe.grads(&tape), cfg.stage2_lr)?;
            if train_head {
                adam_head.step(&mut head, &ph.grads(&tape), cfg.stage2_lr)?;
            }
            adam_proj.step(&mut proj, &pp.grads(&tape), cfg.stage2_lr)?;
        }
        if batches.is_empty() {
            return Err(Error::Data("pre-training pool too small for a batch of two".into()));
        }
        let mean = total / batches.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite { op: "stage2 loss" });
        }
        curve.push(mean);
    }
    let ck = Checkpoint {
        stage: Stage::Pretrain,
        encoder: enc,
        weight_head: head,
        projection: proj,
        classifier: ParamStore::new(),
        seed,
        ..cde_ck.clone()
    };
    Ok((ck, curve))
}

/// Zero-initialized affine classifier `d_hidden -> 1`.
pub fn init_classifier(d_hidden: usize) -> Result<ParamStore<f32>> {
    let mut store = ParamStore::new();
    store.insert("clf.w", Tensor::zeros(&[d_hidden, 1]))?;
    store.insert("clf.b", Tensor::zeros(&[1]))?;
    Ok(store)
}

fn targets(segs: &[TimeSeriesSegment]) -> Result<Vec<f64>> {
    segs.iter()
        .map(|s| s.label.as_target().ok_or_else(|| Error::Data(format!("{}: segment has no label", s.patient_id))))
        .collect()
}

/// Pooled embeddings and classifier probabilities in evaluation mode.
pub fn predict(encoder_params: &ParamStore<f32>, classifier: &ParamStore<f32>, cfg: &TrainConfig, segs: &[TimeSeriesSegment]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let enc_cfg = cfg.encoder();
    let w = classifier.get("clf.w")?.to_f64_vec();
    let b = f64::from(classifier.get("clf.b")?.data()[0]);
    let mut emb = Vec::with_capacity(segs.len());
    let mut prob = Vec::with_capacity(segs.len());
    for seg in segs {
        let e = encoder::pooled_embedding(encoder_params, &seg.x, &enc_cfg)?;
        let logit = b + e.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
        prob.push(1.0 / (1.0 + libm::exp(-logit)));
        emb.push(e);
    }
    Ok((emb, prob))
}

/// Mean binary cross-entropy with the same clamp as the training loss.
pub fn bce(y: &[f64], p: &[f64]) -> f64 {
    let c = crate::tape::BCE_CLAMP;
    let n = y.len().max(1) as f64;
    y.iter()
        .zip(p)
        .map(|(&y, &p)| {
            let q = p.clamp(c, 1.0 - c);
            -(y * libm::log(q) + (1.0 - y) * libm::log(1.0 - q))
        })
        .sum::<f64>()
        / n
}

/// Training trace of stage 3.
#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneLog {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// `None` when the validation labels hold a single class.
    pub val_auroc: Vec<Option<f64>>,
    pub best_epoch: usize,
}

/// Stage 3: supervised fine-tuning of a zero-initialized linear classifier
/// on mean-pooled encoder output; with `Fft` the encoder is trained too.
/// The epoch with the best validation AUROC (ties: lower validation loss)
/// is kept.
pub fn stage3(pre_ck: &Checkpoint, mode: FineTuneMode, labeled: &[TimeSeriesSegment], val: &[TimeSeriesSegment], seed: u64) -> Result<(Checkpoint, FinetuneLog)> {
    let cfg = &pre_ck.config;
    if pre_ck.encoder.is_empty() {
        return Err(Error::invalid("stage 3 needs a pre-trained encoder"));
    }
    let y = targets(labeled)?;
    if !(y.contains(&0.0) && y.contains(&1.0)) {
        return Err(Error::SingleClass);
    }
    let y_val = targets(val)?;
    let enc_cfg = cfg.encoder();
    let mut enc = pre_ck.encoder.clone();
    let mut clf = init_classifier(cfg.d_hidden)?;
    let mut adam_enc = AdamState::new(&enc);
    let mut adam_clf = AdamState::new(&clf);
    let frozen_features = match mode {
        FineTuneMode::Pft => {
            let rows: Vec<f64> = labeled
                .iter()
                .map(|s| encoder::pooled_embedding(&enc, &s.x, &enc_cfg))
                .collect::<Result<Vec<_>>>()?
                .concat();
            Some(Tensor::<f32>::from_f64(&[labeled.len(), cfg.d_hidden], &rows)?)
        }
        FineTuneMode::Fft => None,
    };

    let mut log = FinetuneLog { train_loss: Vec::new(), val_loss: Vec::new(), val_auroc: Vec::new(), best_epoch: 0 };
    let mut best: Option<(f64, f64, ParamStore<f32>, ParamStore<f32>)> = None;
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    for epoch in 0..cfg.stage3_epochs {
        let mut r = rng::stream(seed, hash_str("stage3.shuffle"), epoch as u64);
        rng::shuffle(&mut r, &mut order);
        let mut total = 0.0;
        let mut n_batches = 0usize;
        for (b, chunk) in order.chunks(cfg.stage3_batch).enumerate() {
            let mut tape = Tape::<f32>::new();
            let pc = clf.bind(&mut tape, true);
            let pe = enc.bind(&mut tape, mode == FineTuneMode::Fft);
            let feats = match &frozen_features {
                Some(all) => {
                    let rows: Vec<f32> = chunk.iter().flat_map(|&i| all.row(i).iter().copied()).collect();
                    tape.constant(Tensor::new(vec![chunk.len(), cfg.d_hidden], rows)?)
                }
                None => {
                    let step = (epoch as u64) << 32 | b as u64;
                    let mut drop_rng = rng::stream(seed, hash_str("stage3.dropout"), step);
                    let mut pooled = Vec::with_capacity(chunk.len());
                    for &i in chunk {
                        let xv = tape.constant(labeled[i].x.clone());
                        let mut ctx = Ctx::train(cfg.dropout, &mut drop_rng);
                        let h = encoder::encode(&mut tape, &pe, xv, &enc_cfg, &mut ctx)?;
                        pooled.push(tape.mean_rows(h)?);
                    }
                    tape.concat_rows(&pooled)?
                }
            };
            let logits = pc.linear(&mut tape, "clf", feats)?;
            let p = tape.sigmoid(logits)?;
            let yb: Vec<f64> = chunk.iter().map(|&i| y[i]).collect();
            let loss = tape.bce(p, &yb)?;
            total += tape.scalar_value(loss);
            n_batches += 1;
            tape.backward(loss)?;
            if mode == FineTuneMode::Fft {
                adam_enc.step(&mut enc, &pe.grads(&tape), cfg.lr_fft)?;
            }
            adam_clf.step(&mut clf, &pc.grads(&tape), cfg.lr_classifier)?;
        }
        log.train_loss.push(total / n_batches as f64);

        let (_, p_val) = predict(&enc, &clf, cfg, val)?;
        let y_val_u8: Vec<u8> = y_val.iter().map(|&v| v as u8).collect();
        let vl = bce(&y_val, &p_val);
        let va = match metrics::auroc(&y_val_u8, &p_val) {
            Ok(a) => Some(a),
            Err(Error::SingleClass) => None,
            Err(e) => return Err(e),
        };
        log.val_loss.push(vl);
        log.val_auroc.push(va);
        let key = va.unwrap_or(0.0);
        let better = match &best {
            None => true,
            Some((ba, bl, _, _)) => key > *ba || (key == *ba && vl < *bl),
        };
        if better {
            best = Some((key, vl, enc.clone(), clf.clone()));
            log.best_epoch = epoch;
        }
    }
    let (enc, clf) = match best {
        Some((_, _, e, c)) => (e, c),
        None => (enc, clf),
    };
    let ck = Checkpoint { stage: Stage::Finetune, encoder: enc, classifier: clf, seed, ..pre_ck.clone() };
    Ok((ck, log))
}

/// Test-set predictions and metrics of a fine-tuned checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub metrics: SeedMetrics,
    pub y: Vec<u8>,
    pub prob: Vec<f64>,
    pub embeddings: Vec<Vec<f64>>,
}

pub fn evaluate(ck: &Checkpoint, segs: &[TimeSeriesSegment]) -> Result<Evaluation> {
    if ck.classifier.is_empty() {
        return Err(Error::invalid("evaluation needs a fine-tuned checkpoint"));
    }
    let y: Vec<u8> = targets(segs)?.iter().map(|&v| v as u8).collect();
    let (embeddings, prob) = predict(&ck.encoder, &ck.classifier, &ck.config, segs)?;
    let metrics = SeedMetrics::compute(ck.seed, &y, &prob, &embeddings)?;
    Ok(Evaluation { metrics, y, prob, embeddings })
}

/// All artifacts of one seed.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub metrics: SeedMetrics,
    pub cde_curve: Vec<f64>,
    pub stage2_curve: Vec<f64>,
    pub finetune: FinetuneLog,
    pub stage1: Checkpoint,
    pub stage2: Checkpoint,
    pub final_ck: Checkpoint,
}

/// Stages 1 to 3 and test evaluation with `cfg.mode`.
pub fn run_seed(cfg: &TrainConfig, seed: u64) -> Result<SeedRun> {
    Ok(run_seed_modes(cfg, seed, &[cfg.mode])?.remove(0))
}

/// Shares stages 1 and 2 between several fine-tuning modes.
pub fn run_seed_modes(cfg: &TrainConfig, seed: u64, modes: &[FineTuneMode]) -> Result<Vec<SeedRun>> {
    let data = prepare_data(cfg, seed)?;
    let (ck1, cde_curve) = stage1(cfg, &data.healthy, seed)?;
    let pool = PretrainPool::new(&data.healthy, &data.split.train);
    let (ck2, stage2_curve) = stage2(&ck1, &pool, seed)?;
    let labeled = data.split.labeled_train();
    modes
        .iter()
        .map(|&mode| {
            let (ck3, finetune) = stage3(&ck2, mode, &labeled, &data.split.val, seed)?;
            let metrics = evaluate(&ck3, &data.split.test)?.metrics;
            Ok(SeedRun {
                metrics,
                cde_curve: cde_curve.clone(),
                stage2_curve: stage2_curve.clone(),
                finetune,
                stage1: ck1.clone(),
                stage2: ck2.clone(),
                final_ck: ck3,
            })
        })
        .collect()
}
