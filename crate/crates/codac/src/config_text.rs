//! `key = value` configuration text. Keys are the [`TrainConfig`] field
//! names; missing keys keep their defaults and unknown keys are errors.

use std::fmt::Write as _;
use std::path::Path;

use codac_core::ablation::AblationVariant;
use codac_core::config::{FineTuneMode, TrainConfig};

use crate::error::{CliError, Result};

trait Value: Sized {
    fn render(&self) -> String;
    fn parse(s: &str) -> std::result::Result<Self, String>;
}

macro_rules! scalar_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn render(&self) -> String {
                self.to_string()
            }
            fn parse(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("`{s}`: {e}"))
            }
        }
    )*};
}

scalar_value!(usize, u64, f64);

fn render_list<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list<T: Value>(s: &str) -> std::result::Result<Vec<T>, String> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|p| T::parse(p.trim())).collect()
}

impl Value for Vec<u64> {
    fn render(&self) -> String {
        render_list(self)
    }
    fn parse(s: &str) -> std::result::Result<Self, String> {
        parse_list(s)
    }
}

impl Value for Vec<usize> {
    fn render(&self) -> String {
        render_list(self)
    }
    fn parse(s: &str) -> std::result::Result<Self, String> {
        parse_list(s)
    }
}

impl Value for [f64; 3] {
    fn render(&self) -> String {
        render_list(self)
    }
    fn parse(s: &str) -> std::result::Result<Self, String> {
        let v: Vec<f64> = parse_list(s)?;
        v.try_into().map_err(|v: Vec<f64>| format!("expected 3 values, got {}", v.len()))
    }
}

impl Value for AblationVariant {
    fn render(&self) -> String {
        self.id().to_string()
    }
    fn parse(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|e: codac_core::Error| e.to_string())
    }
}

impl Value for FineTuneMode {
    fn render(&self) -> String {
        self.name().to_string()
    }
    fn parse(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|e: codac_core::Error| e.to_string())
    }
}

macro_rules! config_fields {
    ($($field:ident),* $(,)?) => {
        /// Every accepted key, in canonical order.
        pub const KEYS: &[&str] = &[$(stringify!($field)),*];

        /// Canonical text: one line per key in [`KEYS`] order.
        pub fn format_config(cfg: &TrainConfig) -> String {
            let mut out = String::new();
            $(writeln!(out, "{} = {}", stringify!($field), cfg.$field.render()).expect("write to string");)*
            out
        }

        fn set_field(cfg: &mut TrainConfig, key: &str, value: &str) -> Option<std::result::Result<(), String>> {
            match key {
                $(stringify!($field) => Some(Value::parse(value).map(|v| cfg.$field = v)),)*
                _ => None,
            }
        }
    };
}

config_fields!(
    seeds, variant, n_patients, segs_per_patient, disease_rate, t_len, channels, split, label_fraction,
    healthy_patients, healthy_segs_per_patient, cde_d_model, cde_blocks, cde_heads, cde_d_ff, cde_d_latent,
    cde_patch, cde_epochs, cde_lr, cde_batch, beta, d_hidden, kernel, dilations, attn_blocks, heads, d_ff,
    dropout, d_project, tau, lambda, delta, n_pairs, crop_frac, jitter_sigma, scale_lo, scale_hi,
    stage2_epochs, stage2_lr, batch_size, stage2_healthy_frac, mode, stage3_epochs, stage3_batch, lr_fft,
    lr_classifier,
);

/// Parses configuration text over the defaults and validates the result.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let mut seen = std::collections::BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::format(format!("config line {}: expected `key = value`", i + 1)))?;
        let key = key.trim();
        if !seen.insert(key.to_string()) {
            return Err(CliError::format(format!("config line {}: duplicate key `{key}`", i + 1)));
        }
        match set_field(&mut cfg, key, value.trim()) {
            None => return Err(CliError::format(format!("config line {}: unknown key `{key}`", i + 1))),
            Some(Err(e)) => return Err(CliError::format(format!("config line {}: {key}: {e}", i + 1))),
            Some(Ok(())) => {}
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_exactly() {
        let cfg = TrainConfig::default();
        let text = format_config(&cfg);
        assert_eq!(parse_config(&text).unwrap(), cfg);
        assert_eq!(format_config(&parse_config(&text).unwrap()), text);
        assert_eq!(text.lines().count(), KEYS.len());
    }

    #[test]
    fn awkward_floats_round_trip() {
        let cfg = TrainConfig { tau: 0.1 + 0.2, cde_lr: 1e-7 / 3.0, seeds: vec![7, 11], ..TrainConfig::default() };
        assert_eq!(parse_config(&format_config(&cfg)).unwrap(), cfg);
    }

    #[test]
    fn comments_blanks_and_partial_files() {
        let cfg = parse_config("# tuned\n\ntau = 0.5  # warmer\nvariant = dmcf_static\n").unwrap();
        assert_eq!(cfg.tau, 0.5);
        assert_eq!(cfg.variant, AblationVariant::DmcfStatic);
        assert_eq!(cfg.lambda, TrainConfig::default().lambda);
    }

    #[test]
    fn bad_input_is_rejected() {
        for (text, needle) in [
            ("temperature = 0.2\n", "unknown key `temperature`"),
            ("tau = 0.2\ntau = 0.3\n", "duplicate key"),
            ("tau\n", "expected `key = value`"),
            ("tau = warm\n", "tau"),
            ("split = 0.5,0.5\n", "expected 3 values"),
        ] {
            let err = parse_config(text).unwrap_err().to_string();
            assert!(err.contains(needle), "{text:?}: {err}");
        }
        assert!(matches!(parse_config("tau = 0\n"), Err(CliError::Core(_))));
    }
}
