//! Segment CSV files and the `meta.txt` manifest.
//!
//! Header: `patient_id,label,mask,c0_t0,...,c0_t{T-1},c1_t0,...`; label is
//! 0, 1 or -1 (unlabeled); mask is a string of `T` zeros and ones; values
//! carry nine significant digits.

use std::path::Path;

use codac_core::signal::{DatasetSplit, Label, TimeSeriesSegment};
use codac_core::Tensor;

use crate::error::{CliError, Result};

/// `%.9g`-style rendering.
pub fn sig9(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { v.to_string() };
    }
    let exp = v.abs().log10().floor() as i32;
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        let s = format!("{v:.8e}");
        let (mant, e) = s.split_once('e').expect("exponent");
        let mant = if mant.contains('.') { mant.trim_end_matches('0').trim_end_matches('.') } else { mant };
        format!("{mant}e{e}")
    }
}

fn header(t_len: usize, d: usize) -> Vec<String> {
    let mut h = vec!["patient_id".to_string(), "label".into(), "mask".into()];
    for c in 0..d {
        for t in 0..t_len {
            h.push(format!("c{c}_t{t}"));
        }
    }
    h
}

pub fn write_csv(segs: &[TimeSeriesSegment], path: &Path) -> Result<()> {
    let first = segs.first().ok_or_else(|| CliError::format("empty dataset"))?;
    let (t_len, d) = (first.len(), first.channels());
    let mut w = csv::WriterBuilder::new().from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header(t_len, d)).map_err(|e| csv_err(path, e))?;
    for seg in segs {
        if seg.len() != t_len || seg.channels() != d {
            return Err(CliError::format(format!("{}: segment shape differs from the first segment", seg.patient_id)));
        }
        let mut row = vec![seg.patient_id.clone(), seg.label.code().to_string()];
        row.push(seg.anomaly_mask.iter().map(|&m| if m { '1' } else { '0' }).collect());
        for c in 0..d {
            for t in 0..t_len {
                row.push(sig9(f64::from(seg.x.at(t, c))));
            }
        }
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(CliError::io(path))
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => CliError::Io { path: path.to_path_buf(), source },
        other => CliError::format(format!("{}: {other:?}", path.display())),
    }
}

/// Reads segments; `T` and `D` come from the header.
pub fn read_csv(path: &Path) -> Result<Vec<TimeSeriesSegment>> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    parse_csv(&text).map_err(|e| match e {
        CliError::Format(msg) => CliError::format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_csv(text: &str) -> Result<Vec<TimeSeriesSegment>> {
    if text.trim().is_empty() {
        return Err(CliError::format("empty dataset"));
    }
    let mut r = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(text.as_bytes());
    let head = r.headers().map_err(|e| CliError::format(format!("header: {e}")))?.clone();
    let n_values = head.len().saturating_sub(3);
    if head.len() < 4 || &head[0] != "patient_id" || &head[1] != "label" || &head[2] != "mask" {
        return Err(CliError::format("malformed header: expected patient_id,label,mask,<values>"));
    }
    let d = head.iter().skip(3).filter(|h| h.ends_with("_t0")).count();
    if d == 0 || n_values % d != 0 {
        return Err(CliError::format("malformed header: cannot infer channel count"));
    }
    let t_len = n_values / d;
    if head.iter().skip(3).ne(header(t_len, d).iter().skip(3).map(String::as_str)) {
        return Err(CliError::format("malformed header: value columns must be c<channel>_t<step> in channel-major order"));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| CliError::format(format!("row {row}: {e}")))?;
        if rec.len() != head.len() {
            return Err(CliError::format(format!("row {row}: expected {} columns, found {}", head.len(), rec.len())));
        }
        let code: i64 = rec[1].trim().parse().map_err(|_| CliError::format(format!("row {row}: label `{}` is not an integer", &rec[1])))?;
        let label = Label::from_code(code).map_err(|_| CliError::format(format!("row {row}: label {code} not in {{0, 1, -1}}")))?;
        let mask: Vec<bool> = rec[2]
            .chars()
            .map(|ch| match ch {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(CliError::format(format!("row {row}: mask may only hold 0 and 1"))),
            })
            .collect::<Result<_>>()?;
        if mask.len() != t_len {
            return Err(CliError::format(format!("row {row}: mask has {} steps, expected {t_len}", mask.len())));
        }
        let mut data = vec![0.0f32; t_len * d];
        for (j, cell) in rec.iter().skip(3).enumerate() {
            let v: f32 = cell
                .trim()
                .parse()
                .map_err(|_| CliError::format(format!("row {row}, column {}: `{cell}` is not a number", j + 4)))?;
            if !v.is_finite() {
                return Err(CliError::format(format!("row {row}, column {}: non-finite value", j + 4)));
            }
            let (c, t) = (j / t_len, j % t_len);
            data[t * d + c] = v;
        }
        let seg = TimeSeriesSegment { patient_id: rec[0].to_string(), label, x: Tensor::new(vec![t_len, d], data)?, anomaly_mask: mask };
        seg.check().map_err(|e| CliError::format(format!("row {row}: {e}")))?;
        out.push(seg);
    }
    if out.is_empty() {
        return Err(CliError::format("empty dataset"));
    }
    Ok(out)
}

pub fn write_meta(path: &Path, t_len: usize, d: usize) -> Result<()> {
    std::fs::write(path, format!("T={t_len}\nD={d}\n")).map_err(CliError::io(path))
}

pub fn read_meta(path: &Path) -> Result<(usize, usize)> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    let (mut t, mut d) = (None, None);
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| CliError::format(format!("meta.txt: bad line `{line}`")))?;
        let v: usize = v.trim().parse().map_err(|_| CliError::format(format!("meta.txt: bad value in `{line}`")))?;
        match k.trim() {
            "T" => t = Some(v),
            "D" => d = Some(v),
            other => return Err(CliError::format(format!("meta.txt: unknown key `{other}`"))),
        }
    }
    match (t, d) {
        (Some(t), Some(d)) => Ok((t, d)),
        _ => Err(CliError::format("meta.txt: needs T and D")),
    }
}

/// The split target cohort and the healthy reference cohort on disk.
pub struct DataDir {
    pub split: DatasetSplit,
    pub healthy: Vec<TimeSeriesSegment>,
}

const FILES: [&str; 4] = ["train.csv", "val.csv", "test.csv", "healthy.csv"];

pub fn write_data_dir(dir: &Path, data: &DataDir) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    let parts = [&data.split.train, &data.split.val, &data.split.test, &data.healthy];
    for (name, segs) in FILES.iter().zip(parts) {
        write_csv(segs, &dir.join(name))?;
    }
    let first = &data.healthy[0];
    write_meta(&dir.join("meta.txt"), first.len(), first.channels())
}

pub fn read_data_dir(dir: &Path, label_fraction: f64) -> Result<DataDir> {
    let (t_len, d) = read_meta(&dir.join("meta.txt"))?;
    let mut parts = Vec::with_capacity(4);
    for name in FILES {
        let path = dir.join(name);
        let segs = read_csv(&path)?;
        if segs.iter().any(|s| s.len() != t_len || s.channels() != d) {
            return Err(CliError::format(format!("{}: shape disagrees with meta.txt (T={t_len}, D={d})", path.display())));
        }
        parts.push(segs);
    }
    let healthy = parts.pop().expect("four files");
    let test = parts.pop().expect("four files");
    let val = parts.pop().expect("four files");
    let train = parts.pop().expect("four files");
    Ok(DataDir { split: DatasetSplit { train, val, test, label_fraction }, healthy })
}
