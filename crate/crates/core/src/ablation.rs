//! Component ablations, each a single documented change to the full
//! method.

use alloc::format;
use alloc::vec::Vec;

use crate::cde::CdeKind;
use crate::config::TrainConfig;
use crate::dmcf::Weighting;
use crate::error::{Error, Result};
use crate::metrics::{aggregate, MetricsReport};
use crate::pipeline::run_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AblationVariant {
    Full,
    CdeVanillaAe,
    CdeNone,
    DmcfStatic,
    DmcfFixedViews,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 5] = [
        AblationVariant::Full,
        AblationVariant::CdeVanillaAe,
        AblationVariant::CdeNone,
        AblationVariant::DmcfStatic,
        AblationVariant::DmcfFixedViews,
    ];

    pub fn id(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::CdeVanillaAe => "cde_vanilla_ae",
            AblationVariant::CdeNone => "cde_none",
            AblationVariant::DmcfStatic => "dmcf_static",
            AblationVariant::DmcfFixedViews => "dmcf_fixed_views",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            AblationVariant::Full => "Transformer CDE scores drive learned per-timestep view weights",
            AblationVariant::CdeVanillaAe => "per-timestep perceptron autoencoder replaces the Transformer CDE; attention term is zero",
            AblationVariant::CdeNone => "no CDE; every timestep weighted 0.5",
            AblationVariant::DmcfStatic => "CDE trained but unused; every timestep weighted 0.5",
            AblationVariant::DmcfFixedViews => "identity crop with per-sample fixed jitter, no weighting, inter-view loss only",
        }
    }

    /// Reconstruction model trained in stage 1, if any.
    pub fn cde_kind(self) -> Option<CdeKind> {
        match self {
            AblationVariant::CdeVanillaAe => Some(CdeKind::Vanilla),
            AblationVariant::CdeNone => None,
            _ => Some(CdeKind::Transformer),
        }
    }

    pub fn weighting(self) -> Weighting {
        match self {
            AblationVariant::Full | AblationVariant::CdeVanillaAe => Weighting::Learned,
            AblationVariant::CdeNone | AblationVariant::DmcfStatic => Weighting::Constant(0.5),
            AblationVariant::DmcfFixedViews => Weighting::Constant(1.0),
        }
    }

    pub fn fixed_views(self) -> bool {
        self == AblationVariant::DmcfFixedViews
    }

    pub fn lambda(self, cfg: &TrainConfig) -> f64 {
        if self.fixed_views() {
            0.0
        } else {
            cfg.lambda
        }
    }
}

impl core::fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.id())
    }
}

impl core::str::FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationVariant::ALL
            .into_iter()
            .find(|v| v.id() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant `{s}`")))
    }
}

/// Runs `variant` once per seed, in order, and aggregates the metrics.
pub fn run_ablation(variant: AblationVariant, cfg: &TrainConfig, seeds: &[u64]) -> Result<MetricsReport> {
    let cfg = TrainConfig { variant, ..cfg.clone() };
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        per_seed.push(run_seed(&cfg, seed)?.metrics);
    }
    aggregate(variant.id(), per_seed)
}
