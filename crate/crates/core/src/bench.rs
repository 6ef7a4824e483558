//! Pair-count, accounted-memory and wall-time scaling of the contrastive losses.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::losses::{count_pairs, evaluate, LossConfig, LossKind, PairCounts};
use crate::numcore::Matrix;
use crate::rng::{derive_seed, tags, RngStream};
use crate::superpoint::SegmentAssignment;

pub const BYTES_PER_ENTRY: u64 = 8;
pub const MIB: u64 = 1 << 20;

/// Header line documenting what the byte column means.
pub const ACCOUNTING_NOTE: &str = "bytes = 8 per similarity entry (positive + negative pairs), \
one f64 buffer reused for exponentials and gradients; computed from shapes, not measured";

/// Accounted auxiliary bytes for a full-enumeration evaluation.
pub fn accounted_bytes(kind: LossKind, n: usize, m: usize, c: usize) -> u64 {
    BYTES_PER_ENTRY * count_pairs(kind, n, m, c).total()
}

/// Fails with a budget error when `kind` at size `n` needs more than `budget` bytes.
pub fn check_budget(kind: LossKind, n: usize, m: usize, c: usize, budget: u64) -> Result<u64> {
    let needed = accounted_bytes(kind, n, m, c);
    if needed > budget {
        return Err(Error::Budget { n, needed, budget });
    }
    Ok(needed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchMode {
    /// Single-threaded, `repeats` timed evaluations per size.
    Timed,
    /// One evaluation per size, sizes run in parallel, no timing.
    CountOnly,
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub kind: LossKind,
    pub sizes: Vec<usize>,
    pub m: usize,
    pub c: usize,
    pub repeats: usize,
    pub seed: u64,
    pub budget: Option<u64>,
    pub mode: BenchMode,
}

impl BenchConfig {
    pub fn new(kind: LossKind, sizes: Vec<usize>) -> Self {
        Self {
            kind,
            sizes,
            m: 32,
            c: 32,
            repeats: 3,
            seed: 0,
            budget: None,
            mode: BenchMode::Timed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() || self.sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParam("sizes must be non-empty and strictly ascending".into()));
        }
        if self.repeats < 3 {
            return Err(Error::InvalidParam(format!("repeats {} must be >= 3", self.repeats)));
        }
        if self.kind == LossKind::Ep {
            return Err(Error::InvalidParam("bench measures pc, ag or cc".into()));
        }
        if self.m < 2 || self.c < 2 {
            return Err(Error::InvalidParam("bench needs m >= 2 and c >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub kind: LossKind,
    pub n: usize,
    pub m: usize,
    pub c: usize,
    pub counts: PairCounts,
    pub bytes: u64,
    /// Median over repeats; `None` in count-only mode.
    pub seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub negatives_exponent: Option<f64>,
    pub bytes_exponent: Option<f64>,
    pub time_exponent: Option<f64>,
}

fn fmt_opt(v: Option<f64>, prec: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.prec$}"))
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,n,m,c,positives,negatives,bytes,seconds\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.kind,
                r.n,
                r.m,
                r.c,
                r.counts.positives,
                r.counts.negatives,
                r.bytes,
                r.seconds.map_or(String::new(), |s| s.to_string())
            );
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("# {ACCOUNTING_NOTE}\n");
        let _ = writeln!(
            out,
            "{:>4} {:>8} {:>6} {:>4} {:>10} {:>14} {:>12} {:>10}",
            "kind", "N", "M", "C", "positives", "negatives", "MiB", "seconds"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:>4} {:>8} {:>6} {:>4} {:>10} {:>14} {:>12.3} {:>10}",
                r.kind,
                r.n,
                r.m,
                r.c,
                r.counts.positives,
                r.counts.negatives,
                r.bytes as f64 / MIB as f64,
                fmt_opt(r.seconds, 4)
            );
        }
        let _ = writeln!(
            out,
            "exponents: negatives {}  bytes {}  time {}",
            fmt_opt(self.negatives_exponent, 3),
            fmt_opt(self.bytes_exponent, 3),
            fmt_opt(self.time_exponent, 3)
        );
        out
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_exponent(sizes: &[f64], measurements: &[f64]) -> Result<f64> {
    if sizes.len() != measurements.len() {
        return Err(Error::Length {
            expected: sizes.len(),
            actual: measurements.len(),
        });
    }
    if sizes.len() < 4 {
        return Err(Error::InvalidParam(format!(
            "exponent fit needs >= 4 points, got {}",
            sizes.len()
        )));
    }
    if let Some(bad) = sizes.iter().chain(measurements).find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::Domain(format!("non-positive value {bad} in exponent fit")));
    }
    let xs: Vec<f64> = sizes.iter().map(|v| v.ln()).collect();
    let ys: Vec<f64> = measurements.iter().map(|v| v.ln()).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Domain("exponent fit needs at least two distinct sizes".into()));
    }
    Ok(sxy / sxx)
}

fn random_embedding(n: usize, c: usize, stream: &mut RngStream) -> Result<Matrix> {
    Matrix::from_vec(n, c, (0..n * c).map(|_| stream.standard_normal()).collect())
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let k = values.len();
    if k % 2 == 1 {
        values[k / 2]
    } else {
        0.5 * (values[k / 2 - 1] + values[k / 2])
    }
}

fn run_size(cfg: &BenchConfig, n: usize, timed: bool) -> Result<BenchRow> {
    let m = cfg.m.min(n);
    if let Some(budget) = cfg.budget {
        check_budget(cfg.kind, n, m, cfg.c, budget)?;
    }
    let mut data = RngStream::new(derive_seed(cfg.seed, tags::BENCH)).substream(n as u64);
    let f1 = random_embedding(n, cfg.c, &mut data)?;
    let f2 = random_embedding(n, cfg.c, &mut data)?;
    let seg = SegmentAssignment::new((0..n).map(|i| i % m).collect(), m)?;
    let loss = LossConfig::default();
    let runs = if timed { cfg.repeats } else { 1 };
    let mut times = Vec::with_capacity(runs);
    let mut counts = None;
    for _ in 0..runs {
        let mut stream = data.substream(tags::NEG_SAMPLING);
        let start = Instant::now();
        let out = evaluate(cfg.kind, &f1, &f2, Some(&seg), &loss, &mut stream)?;
        times.push(start.elapsed().as_secs_f64());
        counts = Some(out.counts);
    }
    let counts = counts.expect("at least one run");
    let expected = count_pairs(cfg.kind, n, m, cfg.c);
    if counts != expected {
        return Err(Error::Domain(format!(
            "instrumented counts {counts:?} differ from {expected:?} at n={n}"
        )));
    }
    Ok(BenchRow {
        kind: cfg.kind,
        n,
        m,
        c: cfg.c,
        counts,
        bytes: BYTES_PER_ENTRY * counts.total(),
        seconds: timed.then(|| median(&mut times)),
    })
}

/// Runs the vectorized loss on random embeddings at each size and fits
/// log-log exponents when at least four sizes are given.
pub fn bench_loss(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let rows: Vec<BenchRow> = match cfg.mode {
        BenchMode::Timed => cfg
            .sizes
            .iter()
            .map(|&n| run_size(cfg, n, true))
            .collect::<Result<_>>()?,
        BenchMode::CountOnly => cfg
            .sizes
            .par_iter()
            .map(|&n| run_size(cfg, n, false))
            .collect::<Result<_>>()?,
    };
    let xs: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let fit = |ys: Vec<f64>| {
        if rows.len() >= 4 {
            fit_exponent(&xs, &ys).ok()
        } else {
            None
        }
    };
    let negatives_exponent = fit(rows.iter().map(|r| r.counts.negatives as f64).collect());
    let bytes_exponent = fit(rows.iter().map(|r| r.bytes as f64).collect());
    let time_exponent = if cfg.mode == BenchMode::Timed {
        fit(rows.iter().map(|r| r.seconds.unwrap_or(0.0)).collect())
    } else {
        None
    };
    Ok(BenchReport {
        rows,
        negatives_exponent,
        bytes_exponent,
        time_exponent,
    })
}
