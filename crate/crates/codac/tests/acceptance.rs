//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion.
//! Failures are reported but only change the exit status when
//! `CODAC_ACCEPTANCE_STRICT` is set.

use std::time::{Duration, Instant};

use codac::checkpoint_io;
use codac::cli::run_ablation_grid;
use codac::report;
use codac_core::ablation::AblationVariant;
use codac_core::config::{FineTuneMode, TrainConfig};
use codac_core::gradsuite;
use codac_core::metrics::{self, aggregate, MetricsReport, SeedMetrics};
use codac_core::pipeline::{self, evaluate, Evaluation, SeedRun};
use codac_core::rng::{self, Rng};
use codac_core::signal::{self, Label};
use codac_core::{dmcf, Tape, Tensor};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn report_line(id: usize, title: &str, elapsed: Duration, o: &Outcome) -> usize {
    let tag = if o.pass { "PASS" } else { "FAIL" };
    println!("{tag} criterion {id}: {title} ({:.1}s) {}", elapsed.as_secs_f64(), o.detail);
    usize::from(o.pass)
}

fn timed(id: usize, title: &str, f: impl FnOnce() -> Outcome) -> usize {
    let t = Instant::now();
    let o = f();
    report_line(id, title, t.elapsed(), &o)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let results = match gradsuite::run_all(10) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("error: {e}")),
    };
    let elapsed = start.elapsed();
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    let checked: usize = results.iter().flat_map(|r| &r.reports).map(|r| r.checked).sum();
    let pass = failed.is_empty() && elapsed < Duration::from_secs(60);
    outcome(pass, format!("{} cases x 10 instances, {checked} elements checked, failed {failed:?}", results.len()))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn inter_oracle(z1: &[Vec<f64>], z2: &[Vec<f64>], tau: f64) -> f64 {
    let n = z1.len();
    let mut total = 0.0;
    for i in 0..n {
        for (a, b) in [(z1, z2), (z2, z1)] {
            let den: f64 = (0..n).map(|j| (cosine(&a[i], &b[j]) / tau).exp()).sum();
            total -= ((cosine(&a[i], &b[i]) / tau).exp() / den).ln();
        }
    }
    total / (2.0 * n as f64)
}

fn inter_value(z1: &[Vec<f64>], z2: &[Vec<f64>], tau: f64) -> codac_core::Result<f64> {
    let mut tape = Tape::<f64>::new();
    let to_tensor = |z: &[Vec<f64>]| Tensor::from_f64(&[z.len(), z[0].len()], &z.concat());
    let a = tape.constant(to_tensor(z1)?);
    let b = tape.constant(to_tensor(z2)?);
    let out = dmcf::loss_inter(&mut tape, a, b, tau)?;
    Ok(tape.value(out).data()[0])
}

fn criterion_2() -> Outcome {
    let mut r = rng::stream(2, 0, 0);
    let mut worst = 0.0f64;
    for k in 0..100 {
        let n = 1 + k % 8;
        let d = 2 + rng::below(&mut r, 6);
        let tau = rng::uniform(&mut r, 0.05, 2.0);
        let draw = |r: &mut Rng| -> Vec<Vec<f64>> { (0..n).map(|_| (0..d).map(|_| rng::normal(r)).collect()).collect() };
        let z1 = draw(&mut r);
        let z2 = draw(&mut r);
        match inter_value(&z1, &z2, tau) {
            Ok(v) => worst = worst.max((v - inter_oracle(&z1, &z2, tau)).abs()),
            Err(e) => return outcome(false, format!("error: {e}")),
        }
    }
    let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let ortho = match inter_value(&eye, &eye, 1.0) {
        Ok(v) => v,
        Err(e) => return outcome(false, format!("error: {e}")),
    };
    let expected = (1.0 + (-1.0f64).exp()).ln();
    let ortho_err = (ortho - expected).abs();
    outcome(worst < 1e-6 && ortho_err < 1e-6, format!("max oracle error {worst:.2e}, orthogonal case error {ortho_err:.2e}"))
}

fn auroc_oracle(y: &[u8], s: &[f64]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..y.len() {
        for j in 0..y.len() {
            if y[i] == 1 && y[j] == 0 {
                den += 1.0;
                num += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
            }
        }
    }
    num / den
}

fn auprc_oracle(y: &[u8], s: &[f64]) -> f64 {
    let mut thresholds = s.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let pos = y.iter().filter(|&&v| v == 1).count() as f64;
    let (mut prev, mut ap) = (0.0, 0.0);
    for th in thresholds {
        let tp = (0..y.len()).filter(|&i| s[i] >= th && y[i] == 1).count() as f64;
        let pred = (0..y.len()).filter(|&i| s[i] >= th).count() as f64;
        ap += (tp / pos - prev) * (tp / pred);
        prev = tp / pos;
    }
    ap
}

fn criterion_3() -> Outcome {
    let mut r = rng::stream(3, 0, 0);
    let (mut worst_roc, mut worst_pr) = (0.0f64, 0.0f64);
    let mut invariant = true;
    for k in 0..200 {
        let n = 2 + rng::below(&mut r, 99);
        let y: Vec<u8> = loop {
            let y: Vec<u8> = (0..n).map(|_| rng::below(&mut r, 2) as u8).collect();
            if y.contains(&0) && y.contains(&1) {
                break y;
            }
        };
        let s: Vec<f64> = if k % 2 == 0 {
            (0..n).map(|_| rng::below(&mut r, 15) as f64 / 7.0).collect()
        } else {
            (0..n).map(|_| rng::normal(&mut r)).collect()
        };
        let (roc, pr) = match (metrics::auroc(&y, &s), metrics::auprc(&y, &s)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => return outcome(false, format!("error: {e}")),
        };
        worst_roc = worst_roc.max((roc - auroc_oracle(&y, &s)).abs());
        worst_pr = worst_pr.max((pr - auprc_oracle(&y, &s)).abs());
        let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() + 1.0).collect();
        invariant &= metrics::auroc(&y, &t).ok() == Some(roc);
    }
    outcome(
        worst_roc < 1e-9 && worst_pr < 1e-9 && invariant,
        format!("max auroc error {worst_roc:.2e}, max auprc error {worst_pr:.2e}, monotone invariance {invariant}"),
    )
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let cfg = TrainConfig::default();
    let seed = 0;
    let run = || -> codac_core::Result<(f64, usize, usize)> {
        let data = pipeline::prepare_data(&cfg, seed)?;
        let (ck, _) = pipeline::stage1(&cfg, &data.healthy, seed)?;
        let model = ck.cde_model().expect("full variant has a CDE");
        let segs = signal::make_dataset(&cfg.dataset(), seed)?;
        let (mut y, mut s) = (Vec::new(), Vec::new());
        let (mut inside_wins, mut diseased) = (0, 0);
        for seg in segs.iter().filter(|g| g.label == Label::Disease) {
            let scores = model.score(&seg.x, cfg.beta)?.s;
            let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
            for (v, &m) in scores.iter().zip(&seg.anomaly_mask) {
                y.push(u8::from(m));
                s.push(*v);
                if m {
                    si += v;
                    ni += 1;
                } else {
                    so += v;
                    no += 1;
                }
            }
            diseased += 1;
            if ni > 0 && no > 0 && si / ni as f64 > so / no as f64 {
                inside_wins += 1;
            }
        }
        Ok((metrics::auroc(&y, &s)?, inside_wins, diseased))
    };
    match run() {
        Ok((auc, wins, n)) => {
            let frac = wins as f64 / n as f64;
            let elapsed = start.elapsed();
            outcome(
                auc >= 0.80 && frac >= 0.90 && elapsed < Duration::from_secs(180),
                format!("timestep auroc {auc:.4}, inside > outside on {wins}/{n} = {:.1}%", 100.0 * frac),
            )
        }
        Err(e) => outcome(false, format!("error: {e}")),
    }
}

/// Shared 5-seed experiment behind criteria 5, 6, 7 and 9.
struct Grid {
    full_fft: Vec<SeedRun>,
    full_pft: Vec<SeedRun>,
    max_seed_time: Duration,
    others: Vec<MetricsReport>,
}

fn run_grid(cfg: &TrainConfig) -> Result<Grid, String> {
    let full_cfg = TrainConfig { variant: AblationVariant::Full, ..cfg.clone() };
    let (mut full_fft, mut full_pft) = (Vec::new(), Vec::new());
    let mut max_seed_time = Duration::ZERO;
    for &seed in &SEEDS {
        let t = Instant::now();
        let mut runs = pipeline::run_seed_modes(&full_cfg, seed, &[FineTuneMode::Fft, FineTuneMode::Pft]).map_err(|e| e.to_string())?;
        max_seed_time = max_seed_time.max(t.elapsed());
        full_pft.push(runs.pop().expect("two modes"));
        full_fft.push(runs.pop().expect("two modes"));
        println!("  full seed {seed}: fft auroc {:.4}, pft auroc {:.4}", full_fft[full_fft.len() - 1].metrics.auroc, full_pft[full_pft.len() - 1].metrics.auroc);
    }
    let variants: Vec<AblationVariant> = AblationVariant::ALL.into_iter().filter(|v| *v != AblationVariant::Full).collect();
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let others = run_ablation_grid(cfg, &variants, &SEEDS, threads).map_err(|e| e.to_string())?;
    Ok(Grid { full_fft, full_pft, max_seed_time, others })
}

fn metric_of(runs: &[SeedRun], f: fn(&SeedMetrics) -> f64) -> Vec<f64> {
    runs.iter().map(|r| f(&r.metrics)).collect()
}

fn other(g: &Grid, v: AblationVariant) -> &MetricsReport {
    g.others.iter().find(|r| r.variant == v.id()).expect("variant ran")
}

fn criterion_5(g: &Grid) -> Outcome {
    let full = metric_of(&g.full_fft, |m| m.auroc);
    let stat = other(g, AblationVariant::DmcfStatic).values("auroc").expect("auroc");
    let wins = full.iter().zip(&stat).filter(|(a, b)| a > b).count();
    let (mf, ms) = (mean(&full), mean(&stat));
    outcome(
        mf >= 0.90 && mf >= ms && wins >= 3 && g.max_seed_time < Duration::from_secs(600),
        format!(
            "full auroc {mf:.4} (per seed {full:.3?}), dmcf_static {ms:.4} (per seed {stat:.3?}), strict wins {wins}/5, slowest seed {:.0}s",
            g.max_seed_time.as_secs_f64()
        ),
    )
}

fn criterion_6(g: &Grid) -> Outcome {
    let full = mean(&metric_of(&g.full_fft, |m| m.auroc));
    let mut pass = true;
    let mut parts = vec![format!("full {full:.4}")];
    for r in &g.others {
        let m = r.mean("auroc").expect("auroc");
        pass &= full >= m - 0.005;
        parts.push(format!("{} {m:.4}", r.variant));
    }
    outcome(pass, parts.join(", "))
}

fn criterion_7(g: &Grid) -> Outcome {
    let fft = mean(&metric_of(&g.full_fft, |m| m.auroc));
    let pft = mean(&metric_of(&g.full_pft, |m| m.auroc));
    let frozen = g.full_pft.iter().all(|r| r.final_ck.encoder == r.stage2.encoder && r.final_ck.encoder.checksum() == r.stage2.encoder.checksum());
    outcome(fft >= pft - 0.01 && frozen, format!("fft auroc {fft:.4}, pft auroc {pft:.4}, pft encoder unchanged {frozen}"))
}

fn criterion_9(g: &Grid) -> Outcome {
    let full = mean(&metric_of(&g.full_fft, |m| m.rep_sep));
    let stat = other(g, AblationVariant::DmcfStatic).mean("rep_sep").expect("rep_sep");
    outcome(full >= stat, format!("full rep_sep {full:.3}, dmcf_static rep_sep {stat:.3}"))
}

fn bits(e: &Evaluation) -> (Vec<u64>, Vec<u64>) {
    (e.prob.iter().map(|v| v.to_bits()).collect(), e.embeddings.iter().flatten().map(|v| v.to_bits()).collect())
}

fn criterion_8(cfg: &TrainConfig, g: &Grid) -> Outcome {
    let check = || -> Result<(bool, bool, bool), String> {
        let full_cfg = TrainConfig { variant: AblationVariant::Full, ..cfg.clone() };
        let again = pipeline::run_seed(&full_cfg, 0).map_err(|e| e.to_string())?;
        let first = &g.full_fft[0];
        let dirs = [tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?];
        let mut texts = Vec::new();
        for (dir, run) in dirs.iter().zip([first, &again]) {
            let rep = aggregate("full", vec![run.metrics.clone()]).map_err(|e| e.to_string())?;
            report::write_summary(dir.path(), &[rep]).map_err(|e| e.to_string())?;
            texts.push(std::fs::read(dir.path().join("summary.csv")).map_err(|e| e.to_string())?);
        }
        let summary_same = texts[0] == texts[1];

        let data = pipeline::prepare_data(&full_cfg, 0).map_err(|e| e.to_string())?;
        let mut round_trip = true;
        for ck in [&first.stage1, &first.stage2, &first.final_ck, &g.full_pft[0].final_ck] {
            let path = dirs[0].path().join(format!("{}.ckpt", ck.stage.name()));
            checkpoint_io::save(ck, &path).map_err(|e| e.to_string())?;
            let back = checkpoint_io::load(&path).map_err(|e| e.to_string())?;
            round_trip &= back == *ck;
            if let (Some(a), Some(b)) = (ck.cde_model(), back.cde_model()) {
                for seg in data.split.test.iter().take(4) {
                    let sa = a.score(&seg.x, cfg.beta).map_err(|e| e.to_string())?.s;
                    let sb = b.score(&seg.x, cfg.beta).map_err(|e| e.to_string())?.s;
                    round_trip &= sa.iter().zip(&sb).all(|(x, y)| x.to_bits() == y.to_bits());
                }
            }
            if !ck.classifier.is_empty() {
                let ea = evaluate(ck, &data.split.test).map_err(|e| e.to_string())?;
                let eb = evaluate(&back, &data.split.test).map_err(|e| e.to_string())?;
                round_trip &= bits(&ea) == bits(&eb);
            }
        }

        let cde_frozen = [&g.full_fft[..], &g.full_pft[..]].concat().iter().all(|r| {
            let c = r.stage1.cde.checksum();
            r.stage2.cde.checksum() == c && r.final_ck.cde.checksum() == c
        });
        let encoder_frozen = g.full_pft.iter().all(|r| r.final_ck.encoder.checksum() == r.stage2.encoder.checksum());
        Ok((summary_same, round_trip, cde_frozen && encoder_frozen))
    };
    match check() {
        Ok((a, b, c)) => outcome(a && b && c, format!("summary identical {a}, checkpoint round trip identical {b}, freezing checksums hold {c}")),
        Err(e) => outcome(false, format!("error: {e}")),
    }
}

fn main() {
    let mut passed = 0;
    passed += timed(1, "gradient integrity", criterion_1);
    passed += timed(2, "inter-view loss oracle", criterion_2);
    passed += timed(3, "metric oracles", criterion_3);
    passed += timed(4, "CDE discrimination", criterion_4);

    let cfg = TrainConfig::default();
    let t = Instant::now();
    match run_grid(&cfg) {
        Ok(g) => {
            let grid_time = t.elapsed();
            passed += report_line(5, "small-sample benefit", grid_time, &criterion_5(&g));
            passed += report_line(6, "ablation ordering", grid_time, &criterion_6(&g));
            passed += report_line(7, "PFT/FFT contract", grid_time, &criterion_7(&g));
            passed += timed(8, "determinism and persistence", || criterion_8(&cfg, &g));
            passed += report_line(9, "representation separability", grid_time, &criterion_9(&g));
        }
        Err(e) => {
            for (id, title) in [(5, "small-sample benefit"), (6, "ablation ordering"), (7, "PFT/FFT contract"), (8, "determinism and persistence"), (9, "representation separability")] {
                passed += report_line(id, title, t.elapsed(), &outcome(false, format!("grid error: {e}")));
            }
        }
    }
    println!("{passed}/9 criteria passed");
    if passed < 9 && std::env::var_os("CODAC_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
