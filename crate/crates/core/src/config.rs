//! Run configuration with defaults for every field.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::ablation::AblationVariant;
use crate::cde::{CdeConfig, CdeKind, CdeTrainOptions};
use crate::dmcf::AugmentationSpec;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::signal::DatasetConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FineTuneMode {
    /// Encoder frozen; only the classifier is trained.
    Pft,
    /// Encoder and classifier trained together.
    Fft,
}

impl FineTuneMode {
    pub fn name(self) -> &'static str {
        match self {
            FineTuneMode::Pft => "pft",
            FineTuneMode::Fft => "fft",
        }
    }
}

impl core::str::FromStr for FineTuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pft" => Ok(FineTuneMode::Pft),
            "fft" => Ok(FineTuneMode::Fft),
            _ => Err(Error::invalid(format!("unknown fine-tuning mode `{s}` (expected pft or fft)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seeds: Vec<u64>,
    pub variant: AblationVariant,

    pub n_patients: usize,
    pub segs_per_patient: usize,
    pub disease_rate: f64,
    pub t_len: usize,
    pub channels: usize,
    pub split: [f64; 3],
    pub label_fraction: f64,
    pub healthy_patients: usize,
    pub healthy_segs_per_patient: usize,

    pub cde_d_model: usize,
    pub cde_blocks: usize,
    pub cde_heads: usize,
    pub cde_d_ff: usize,
    pub cde_d_latent: usize,
    pub cde_patch: usize,
    pub cde_epochs: usize,
    pub cde_lr: f64,
    pub cde_batch: usize,
    pub beta: f64,

    pub d_hidden: usize,
    pub kernel: usize,
    pub dilations: Vec<usize>,
    pub attn_blocks: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout: f64,

    pub d_project: usize,
    pub tau: f64,
    pub lambda: f64,
    pub delta: usize,
    pub n_pairs: usize,
    pub crop_frac: f64,
    pub jitter_sigma: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
    pub stage2_epochs: usize,
    pub stage2_lr: f64,
    pub batch_size: usize,
    pub stage2_healthy_frac: f64,

    pub mode: FineTuneMode,
    pub stage3_epochs: usize,
    pub stage3_batch: usize,
    pub lr_fft: f64,
    pub lr_classifier: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let data = DatasetConfig::default();
        let cde = CdeConfig::default();
        let cde_opts = CdeTrainOptions::default();
        let aug = AugmentationSpec::default();
        TrainConfig {
            seeds: vec![0, 1, 2, 3, 4],
            variant: AblationVariant::Full,
            n_patients: data.n_patients,
            segs_per_patient: data.segs_per_patient,
            disease_rate: data.disease_rate,
            t_len: data.t_len,
            channels: data.channels,
            split: [0.6, 0.2, 0.2],
            label_fraction: 0.1,
            healthy_patients: 25,
            healthy_segs_per_patient: 8,
            cde_d_model: cde.d_model,
            cde_blocks: cde.n_blocks,
            cde_heads: cde.n_heads,
            cde_d_ff: cde.d_ff,
            cde_d_latent: cde.d_latent,
            cde_patch: cde.patch,
            cde_epochs: cde_opts.epochs,
            cde_lr: cde_opts.lr,
            cde_batch: cde_opts.batch_size,
            beta: 0.5,
            d_hidden: 32,
            kernel: 3,
            dilations: vec![1, 2, 4],
            attn_blocks: 2,
            heads: 4,
            d_ff: 64,
            dropout: 0.1,
            d_project: 16,
            tau: 0.2,
            lambda: 0.5,
            delta: 4,
            n_pairs: 16,
            crop_frac: aug.crop_frac,
            jitter_sigma: aug.jitter_sigma,
            scale_lo: aug.scale_lo,
            scale_hi: aug.scale_hi,
            stage2_epochs: 20,
            stage2_lr: 1e-3,
            batch_size: 16,
            stage2_healthy_frac: 0.5,
            mode: FineTuneMode::Fft,
            stage3_epochs: 60,
            stage3_batch: 16,
            lr_fft: 5e-4,
            lr_classifier: 1e-2,
        }
    }
}

impl TrainConfig {
    pub fn dataset(&self) -> DatasetConfig {
        DatasetConfig {
            n_patients: self.n_patients,
            segs_per_patient: self.segs_per_patient,
            disease_rate: self.disease_rate,
            t_len: self.t_len,
            channels: self.channels,
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        let mut cfg = EncoderConfig::with_dilations(self.channels, self.d_hidden, self.kernel, &self.dilations);
        cfg.n_attn_blocks = self.attn_blocks;
        cfg.n_heads = self.heads;
        cfg.d_ff = self.d_ff;
        cfg.dropout = self.dropout;
        cfg
    }

    pub fn cde(&self, kind: CdeKind) -> CdeConfig {
        CdeConfig {
            kind,
            d_in: self.channels,
            d_model: self.cde_d_model,
            n_blocks: self.cde_blocks,
            n_heads: self.cde_heads,
            d_ff: self.cde_d_ff,
            d_latent: self.cde_d_latent,
            patch: self.cde_patch,
        }
    }

    pub fn cde_train(&self) -> CdeTrainOptions {
        CdeTrainOptions { epochs: self.cde_epochs, lr: self.cde_lr, batch_size: self.cde_batch }
    }

    pub fn augmentation(&self) -> AugmentationSpec {
        AugmentationSpec {
            crop_frac: self.crop_frac,
            jitter_sigma: self.jitter_sigma,
            scale_lo: self.scale_lo,
            scale_hi: self.scale_hi,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::invalid(msg));
        if self.seeds.is_empty() {
            return fail("at least one seed is required");
        }
        if (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 || self.split.iter().any(|v| *v < 0.0) {
            return fail("split fractions must be nonnegative and sum to 1");
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return fail("label_fraction must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.stage2_healthy_frac) {
            return fail("stage2_healthy_frac must lie in [0, 1)");
        }
        if !(self.tau > 0.0) || !(self.lambda >= 0.0) || !(self.beta >= 0.0) {
            return fail("tau must be positive; lambda and beta nonnegative");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        if self.batch_size < 2 || self.stage3_batch == 0 || self.cde_batch == 0 {
            return fail("batch sizes must be positive (contrastive batches need at least 2)");
        }
        if self.d_project == 0 || self.n_pairs == 0 || self.delta == 0 {
            return fail("d_project, n_pairs and delta must be positive");
        }
        for lr in [self.cde_lr, self.stage2_lr, self.lr_fft, self.lr_classifier] {
            if !(lr >= 0.0) || !lr.is_finite() {
                return fail("learning rates must be finite and nonnegative");
            }
        }
        if !self.t_len.is_multiple_of(self.cde_patch) {
            return Err(Error::invalid(format!("t_len {} must be a multiple of cde_patch {}", self.t_len, self.cde_patch)));
        }
        let view = self.augmentation().crop_len(self.t_len);
        if view < 2 * self.delta + 2 {
            return Err(Error::invalid(format!("views of {view} steps are too short for delta {}", self.delta)));
        }
        self.encoder().validate()?;
        self.cde(CdeKind::Transformer).validate()?;
        self.augmentation().validate()
    }
}
