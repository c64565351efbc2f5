//! Synthetic "healthy" and "diseased" multichannel recordings with known
//! anomaly masks, plus patient-independent dataset splits.
//!
//! Healthy channels are sums of 2-4 sinusoids at patient-specific
//! frequencies with AR(1) noise, z-normalized per channel. Disease is
//! modelled as one localized event per segment (impulse train, smooth
//! plateau, or doubled-frequency oscillation).

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::str::FromStr;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::real::sq;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

const STREAM_PROFILE: u64 = 0x5052_4f46;
const STREAM_SEGMENT: u64 = 0x5345_474d;
const STREAM_ANOMALY: u64 = 0x414e_4f4d;
const STREAM_DATASET: u64 = 0x4441_5441;
const STREAM_SPLIT: u64 = 0x5350_4c54;
const STREAM_REFERENCE: u64 = 0x5245_4646;

pub const AR_COEF: f64 = 0.8;
pub const AR_SIGMA: f64 = 0.1;
pub const FREQ_RANGE: (f64, f64) = (0.5, 8.0);
pub const SPIKE_AMPLITUDE: f64 = 3.0;
pub const BUMP_AMPLITUDE: f64 = 1.5;
pub const OSCILLATION_RMS: f64 = 1.5;
/// Event length range, as a fraction of the window, used by [`make_dataset`].
pub const SPAN_RANGE: (f64, f64) = (0.08, 0.2);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Label {
    Healthy,
    Disease,
    /// Present for self-supervised use only.
    Unlabeled,
}

impl Label {
    pub fn code(self) -> i8 {
        match self {
            Label::Healthy => 0,
            Label::Disease => 1,
            Label::Unlabeled => -1,
        }
    }

    pub fn from_code(c: i64) -> Result<Self> {
        match c {
            0 => Ok(Label::Healthy),
            1 => Ok(Label::Disease),
            -1 => Ok(Label::Unlabeled),
            other => Err(Error::Data(format!("invalid label {other}"))),
        }
    }

    pub fn as_target(self) -> Option<f64> {
        match self {
            Label::Healthy => Some(0.0),
            Label::Disease => Some(1.0),
            Label::Unlabeled => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesSegment {
    pub patient_id: String,
    pub label: Label,
    /// `T x D`.
    pub x: Tensor<f32>,
    pub anomaly_mask: Vec<bool>,
}

impl TimeSeriesSegment {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.anomaly_mask.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.x.cols()
    }

    /// Copy with the label hidden.
    pub fn unlabeled(&self) -> Self {
        TimeSeriesSegment { label: Label::Unlabeled, ..self.clone() }
    }

    pub fn check(&self) -> Result<()> {
        if self.anomaly_mask.len() != self.len() {
            return Err(Error::Data(format!("{}: mask length {} != T {}", self.patient_id, self.anomaly_mask.len(), self.len())));
        }
        match self.label {
            Label::Healthy if self.anomaly_mask.iter().any(|&m| m) => {
                Err(Error::Data(format!("{}: healthy segment with anomaly mask", self.patient_id)))
            }
            Label::Disease if !self.anomaly_mask.iter().any(|&m| m) => {
                Err(Error::Data(format!("{}: diseased segment without anomaly mask", self.patient_id)))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnomalyKind {
    Spike,
    FreqShift,
    Bump,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 3] = [AnomalyKind::Spike, AnomalyKind::FreqShift, AnomalyKind::Bump];
}

impl FromStr for AnomalyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spike" => Ok(AnomalyKind::Spike),
            "freq_shift" => Ok(AnomalyKind::FreqShift),
            "bump" => Ok(AnomalyKind::Bump),
            other => Err(Error::invalid(format!("unknown anomaly kind `{other}`"))),
        }
    }
}

/// Spectral make-up of one patient: per channel, `(frequency, amplitude)`
/// pairs with frequencies in cycles per window.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientProfile {
    pub channels: Vec<Vec<(f64, f64)>>,
}

impl PatientProfile {
    pub fn draw(patient_id: &str, d: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, STREAM_PROFILE, rng::hash_str(patient_id));
        let channels = (0..d)
            .map(|_| {
                let n = r.gen_range(2..=4);
                (0..n).map(|_| (r.gen_range(FREQ_RANGE.0..FREQ_RANGE.1), r.gen_range(0.5..1.5))).collect()
            })
            .collect();
        PatientProfile { channels }
    }

    /// One z-normalized segment; phases and noise come from `seed`.
    pub fn segment(&self, t_len: usize, seed: u64) -> Tensor<f32> {
        let d = self.channels.len();
        let mut r = rng::stream(seed, STREAM_SEGMENT, 0);
        let mut data = vec![0.0f64; t_len * d];
        for (c, comps) in self.channels.iter().enumerate() {
            let phases: Vec<f64> = comps.iter().map(|_| r.gen_range(0.0..2.0 * PI)).collect();
            let mut ar = rng::normal(&mut r) * AR_SIGMA / libm::sqrt(1.0 - AR_COEF * AR_COEF);
            for t in 0..t_len {
                let mut v = 0.0;
                for (&(f, a), ph) in comps.iter().zip(&phases) {
                    v += a * libm::sin(2.0 * PI * f * t as f64 / t_len as f64 + ph);
                }
                ar = AR_COEF * ar + AR_SIGMA * rng::normal(&mut r);
                data[t * d + c] = v + ar;
            }
        }
        z_normalize(&mut data, t_len, d);
        Tensor::new(vec![t_len, d], data.into_iter().map(|v| v as f32).collect()).expect("segment shape")
    }
}

/// Per-channel standardization with population std.
fn z_normalize(data: &mut [f64], t_len: usize, d: usize) {
    for c in 0..d {
        let mean = (0..t_len).map(|t| data[t * d + c]).sum::<f64>() / t_len as f64;
        let var = (0..t_len).map(|t| sq(data[t * d + c] - mean)).sum::<f64>() / t_len as f64;
        let sd = libm::sqrt(var);
        for t in 0..t_len {
            let v = &mut data[t * d + c];
            *v = if sd > 0.0 { (*v - mean) / sd } else { 0.0 };
        }
    }
}

fn renormalize(x: &Tensor<f32>) -> Tensor<f32> {
    let (t_len, d) = (x.rows(), x.cols());
    let mut data = x.to_f64_vec();
    z_normalize(&mut data, t_len, d);
    Tensor::new(vec![t_len, d], data.into_iter().map(|v| v as f32).collect()).expect("same shape")
}

pub fn gen_healthy(patient_id: &str, t_len: usize, d: usize, seed: u64) -> Result<TimeSeriesSegment> {
    if t_len < 32 || d < 1 {
        return Err(Error::invalid(format!("need T >= 32 and D >= 1, got T={t_len}, D={d}")));
    }
    let profile = PatientProfile::draw(patient_id, d, seed);
    Ok(TimeSeriesSegment {
        patient_id: patient_id.to_string(),
        label: Label::Healthy,
        x: profile.segment(t_len, rng::derive_seed(seed, STREAM_SEGMENT, 0)),
        anomaly_mask: vec![false; t_len],
    })
}

/// Index of the strongest non-DC periodogram bin of one channel.
pub fn dominant_bin(x: &Tensor<f32>, channel: usize) -> usize {
    let t_len = x.rows();
    let vals: Vec<f64> = (0..t_len).map(|t| x.at(t, channel) as f64).collect();
    (1..=t_len / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, v) in vals.iter().enumerate() {
                let a = 2.0 * PI * k as f64 * t as f64 / t_len as f64;
                re += v * libm::cos(a);
                im -= v * libm::sin(a);
            }
            (k, re * re + im * im)
        })
        .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best })
        .0
}

/// Adds one localized event over a contiguous window of
/// `max(1, round(span_frac * T))` timesteps. Values outside the window are
/// untouched.
pub fn inject_anomaly(seg: &TimeSeriesSegment, kind: AnomalyKind, span_frac: f64, seed: u64) -> Result<TimeSeriesSegment> {
    if !(span_frac > 0.0 && span_frac <= 0.5) {
        return Err(Error::invalid(format!("span_frac must lie in (0, 0.5], got {span_frac}")));
    }
    let (t_len, d) = (seg.len(), seg.channels());
    let len = (libm::round(span_frac * t_len as f64) as usize).clamp(1, t_len);
    let mut r = rng::stream(seed, STREAM_ANOMALY, 0);
    let start = r.gen_range(0..=t_len - len);
    let mut data = seg.x.to_f64_vec();
    for c in 0..d {
        let col: Vec<f64> = (0..t_len).map(|t| data[t * d + c]).collect();
        let mean = col.iter().sum::<f64>() / t_len as f64;
        let sigma = libm::sqrt(col.iter().map(|v| sq(v - mean)).sum::<f64>() / t_len as f64).max(1e-12);
        let sign = |r: &mut Rng| if r.gen::<bool>() { 1.0 } else { -1.0 };
        let add: Vec<f64> = match kind {
            AnomalyKind::Spike => (0..len)
                .map(|i| if i % 2 == 0 { sign(&mut r) * SPIKE_AMPLITUDE * sigma } else { 0.0 })
                .collect(),
            AnomalyKind::Bump => {
                let s = sign(&mut r);
                let ramp = len / 4;
                (0..len)
                    .map(|i| {
                        let edge = i.min(len - 1 - i);
                        let taper = if edge < ramp {
                            0.5 * (1.0 - libm::cos(PI * (edge + 1) as f64 / (ramp + 1) as f64))
                        } else {
                            1.0
                        };
                        s * BUMP_AMPLITUDE * sigma * taper
                    })
                    .collect()
            }
            AnomalyKind::FreqShift => {
                // Oscillation at twice the channel's dominant frequency,
                // with at least one full cycle inside the window.
                let f_dom = dominant_bin(&seg.x, c) as f64;
                let cycles = (2.0 * f_dom).max(t_len as f64 / len as f64);
                let phase = r.gen_range(0.0..2.0 * PI);
                let raw: Vec<f64> = (0..len)
                    .map(|i| libm::sin(2.0 * PI * cycles * (start + i) as f64 / t_len as f64 + phase))
                    .collect();
                let rms = libm::sqrt(raw.iter().map(|v| v * v).sum::<f64>() / len as f64);
                if rms > 1e-9 {
                    raw.iter().map(|v| v / rms * OSCILLATION_RMS * sigma).collect()
                } else {
                    vec![OSCILLATION_RMS * sigma; len]
                }
            }
        };
        for (i, a) in add.iter().enumerate() {
            data[(start + i) * d + c] += a;
        }
    }
    let mut mask = seg.anomaly_mask.clone();
    mask[start..start + len].iter_mut().for_each(|m| *m = true);
    Ok(TimeSeriesSegment {
        patient_id: seg.patient_id.clone(),
        label: Label::Disease,
        x: Tensor::new(vec![t_len, d], data.into_iter().map(|v| v as f32).collect())?,
        anomaly_mask: mask,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub n_patients: usize,
    pub segs_per_patient: usize,
    pub disease_rate: f64,
    pub t_len: usize,
    pub channels: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { n_patients: 24, segs_per_patient: 8, disease_rate: 0.5, t_len: 128, channels: 2 }
    }
}

/// Target cohort: `round(disease_rate * n_patients)` diseased patients,
/// each of whose segments carries one event. Diseased segments are
/// re-standardized per channel after injection so that segment-level
/// moments match healthy ones.
pub fn make_dataset(cfg: &DatasetConfig, seed: u64) -> Result<Vec<TimeSeriesSegment>> {
    if !(0.0..=1.0).contains(&cfg.disease_rate) {
        return Err(Error::invalid("disease_rate must lie in [0, 1]"));
    }
    if cfg.n_patients == 0 || cfg.segs_per_patient == 0 {
        return Err(Error::invalid("empty dataset requested"));
    }
    let mut r = rng::stream(seed, STREAM_DATASET, 0);
    let mut order: Vec<usize> = (0..cfg.n_patients).collect();
    rng::shuffle(&mut r, &mut order);
    let n_dis = libm::round(cfg.disease_rate * cfg.n_patients as f64) as usize;
    let diseased: BTreeSet<usize> = order[..n_dis].iter().copied().collect();
    let mut out = Vec::with_capacity(cfg.n_patients * cfg.segs_per_patient);
    for p in 0..cfg.n_patients {
        let pid = format!("p{p:03}");
        let profile = PatientProfile::draw(&pid, cfg.channels, seed);
        for s in 0..cfg.segs_per_patient {
            let seg_seed = rng::derive_seed(seed, STREAM_SEGMENT, (p * cfg.segs_per_patient + s) as u64);
            if cfg.t_len < 32 {
                return Err(Error::invalid("T must be >= 32"));
            }
            let mut seg = TimeSeriesSegment {
                patient_id: pid.clone(),
                label: Label::Healthy,
                x: profile.segment(cfg.t_len, seg_seed),
                anomaly_mask: vec![false; cfg.t_len],
            };
            if diseased.contains(&p) {
                let mut er = rng::stream(seg_seed, STREAM_ANOMALY, 1);
                let kind = AnomalyKind::ALL[er.gen_range(0..3)];
                let span = er.gen_range(SPAN_RANGE.0..SPAN_RANGE.1);
                seg = inject_anomaly(&seg, kind, span, er.gen())?;
                seg.x = renormalize(&seg.x);
            }
            out.push(seg);
        }
    }
    Ok(out)
}

/// External healthy reference cohort (patients `h000`, `h001`, ...).
pub fn make_healthy_set(n_patients: usize, segs_per_patient: usize, t_len: usize, d: usize, seed: u64) -> Result<Vec<TimeSeriesSegment>> {
    if t_len < 32 || d < 1 {
        return Err(Error::invalid("need T >= 32 and D >= 1"));
    }
    let mut out = Vec::with_capacity(n_patients * segs_per_patient);
    for p in 0..n_patients {
        let pid = format!("h{p:03}");
        let profile = PatientProfile::draw(&pid, d, seed);
        for s in 0..segs_per_patient {
            let seg_seed = rng::derive_seed(seed, STREAM_REFERENCE, (p * segs_per_patient + s) as u64);
            out.push(TimeSeriesSegment {
                patient_id: pid.clone(),
                label: Label::Healthy,
                x: profile.segment(t_len, seg_seed),
                anomaly_mask: vec![false; t_len],
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<TimeSeriesSegment>,
    pub val: Vec<TimeSeriesSegment>,
    pub test: Vec<TimeSeriesSegment>,
    pub label_fraction: f64,
}

impl DatasetSplit {
    pub fn labeled_train(&self) -> Vec<TimeSeriesSegment> {
        self.train.iter().filter(|s| s.label != Label::Unlabeled).cloned().collect()
    }
}

/// Groups segments by patient in first-appearance order.
fn patients(segs: &[TimeSeriesSegment]) -> Vec<(String, Vec<usize>)> {
    let mut order: Vec<(String, Vec<usize>)> = Vec::new();
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, s) in segs.iter().enumerate() {
        match index.get(s.patient_id.as_str()) {
            Some(&k) => order[k].1.push(i),
            None => {
                index.insert(&s.patient_id, order.len());
                order.push((s.patient_id.clone(), vec![i]));
            }
        }
    }
    order
}

/// Patient-disjoint train/val/test partition, stratified by patient class,
/// then label subsampling inside train: exactly
/// `ceil(label_fraction * n_labeled_train)` segments keep their labels,
/// picked round-robin across patients (alternating classes).
pub fn split_by_patient(segs: &[TimeSeriesSegment], ratios: [f64; 3], label_fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 || ratios.iter().any(|&r| r < 0.0) {
        return Err(Error::invalid(format!("split ratios must be nonnegative and sum to 1, got {ratios:?}")));
    }
    if !(label_fraction > 0.0 && label_fraction <= 1.0) {
        return Err(Error::invalid(format!("label_fraction must lie in (0, 1], got {label_fraction}")));
    }
    let groups = patients(segs);
    if groups.len() < 3 {
        return Err(Error::invalid(format!("need at least 3 patients to split, got {}", groups.len())));
    }
    let mut r = rng::stream(seed, STREAM_SPLIT, 0);
    let is_sick = |idx: &[usize]| idx.iter().any(|&i| segs[i].label == Label::Disease);
    let mut assign: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for class in [false, true] {
        let mut members: Vec<usize> = (0..groups.len()).filter(|&g| is_sick(&groups[g].1) == class).collect();
        rng::shuffle(&mut r, &mut members);
        let counts = largest_remainder(members.len(), &ratios);
        let mut it = members.into_iter();
        for (k, &n) in counts.iter().enumerate() {
            assign[k].extend(it.by_ref().take(n));
        }
    }
    // Every split needs at least one patient.
    for k in 0..3 {
        if assign[k].is_empty() {
            let donor = (0..3).max_by_key(|&j| assign[j].len()).expect("three splits");
            let moved = assign[donor].pop().expect("donor has patients");
            assign[k].push(moved);
        }
    }
    let collect = |ids: &[usize]| -> Vec<TimeSeriesSegment> {
        let mut sorted = ids.to_vec();
        sorted.sort_unstable();
        sorted.iter().flat_map(|&g| groups[g].1.iter().map(|&i| segs[i].clone())).collect()
    };
    let mut train = collect(&assign[0]);
    let val = collect(&assign[1]);
    let test = collect(&assign[2]);

    // Label subsampling.
    let candidates: Vec<usize> = (0..train.len()).filter(|&i| train[i].label != Label::Unlabeled).collect();
    let keep = libm::ceil(label_fraction * candidates.len() as f64 - 1e-9) as usize;
    let mut by_patient: Vec<(bool, Vec<usize>)> = Vec::new();
    let mut pos: BTreeMap<String, usize> = BTreeMap::new();
    for &i in &candidates {
        let pid = &train[i].patient_id;
        let k = *pos.entry(pid.clone()).or_insert_with(|| {
            by_patient.push((false, Vec::new()));
            by_patient.len() - 1
        });
        by_patient[k].0 |= train[i].label == Label::Disease;
        by_patient[k].1.push(i);
    }
    for (_, idx) in by_patient.iter_mut() {
        rng::shuffle(&mut r, idx);
    }
    let mut healthy: Vec<usize> = (0..by_patient.len()).filter(|&k| !by_patient[k].0).collect();
    let mut sick: Vec<usize> = (0..by_patient.len()).filter(|&k| by_patient[k].0).collect();
    rng::shuffle(&mut r, &mut healthy);
    rng::shuffle(&mut r, &mut sick);
    let mut rotation = Vec::with_capacity(by_patient.len());
    for i in 0..healthy.len().max(sick.len()) {
        if let Some(&s) = sick.get(i) {
            rotation.push(s);
        }
        if let Some(&h) = healthy.get(i) {
            rotation.push(h);
        }
    }
    let mut chosen = BTreeSet::new();
    let mut cursor = vec![0usize; by_patient.len()];
    while chosen.len() < keep {
        let mut progressed = false;
        for &k in &rotation {
            if chosen.len() >= keep {
                break;
            }
            if let Some(&i) = by_patient[k].1.get(cursor[k]) {
                cursor[k] += 1;
                chosen.insert(i);
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    for &i in &candidates {
        if !chosen.contains(&i) {
            train[i].label = Label::Unlabeled;
        }
    }
    Ok(DatasetSplit { train, val, test, label_fraction })
}

fn largest_remainder(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let raw: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts = [0usize; 3];
    for k in 0..3 {
        counts[k] = libm::floor(raw[k]) as usize;
    }
    let mut rest = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - libm::floor(raw[a]);
        let fb = raw[b] - libm::floor(raw[b]);
        fb.partial_cmp(&fa).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &k in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[k] += 1;
        rest -= 1;
    }
    counts
}
