//! Reference values by explicit enumeration of the pair sets.
//!
//! Deliberately shares no code with the vectorized path: normalization,
//! pooling, dot products and the log-sum-exp are all spelled out as loops.
//! Sampling is never applied.

use super::{LossConfig, LossKind, PairCounts, Reduction};
use crate::error::{Error, Result};
use crate::numcore::Matrix;
use crate::superpoint::SegmentAssignment;

pub const ORACLE_MAX_N: usize = 256;
pub const ORACLE_MAX_C: usize = 64;
pub const ORACLE_MAX_M: usize = 64;

type Rows = Vec<Vec<f64>>;

fn rows_of(m: &Matrix) -> Rows {
    (0..m.rows()).map(|r| (0..m.cols()).map(|c| m.get(r, c)).collect()).collect()
}

fn columns_of(m: &Matrix) -> Rows {
    (0..m.cols()).map(|c| (0..m.rows()).map(|r| m.get(r, c)).collect()).collect()
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let mut sq = 0.0;
    for x in v {
        sq += x * x;
    }
    let norm = if sq.sqrt() > 1e-12 { sq.sqrt() } else { 1e-12 };
    v.iter().map(|x| x / norm).collect()
}

/// Similarity counter threaded through the enumeration.
struct Sim {
    evals: u64,
}

impl Sim {
    fn eval(&mut self, a: &[f64], b: &[f64]) -> f64 {
        self.evals += 1;
        let mut s = 0.0;
        for k in 0..a.len() {
            s += a[k] * b[k];
        }
        s
    }
}

/// One InfoNCE sum over explicit (anchor, key) enumeration.
fn enumerate(
    queries: &Rows,
    keys: &Rows,
    positive_of: &dyn Fn(usize) -> usize,
    abs_negatives: bool,
    cfg: &LossConfig,
    counts: &mut PairCounts,
) -> Result<f64> {
    let mut sim = Sim { evals: 0 };
    let before = counts.total();
    let mut total = 0.0;
    for (i, q) in queries.iter().enumerate() {
        let p = positive_of(i);
        let pos = sim.eval(q, &keys[p]) / cfg.tau;
        counts.positives += 1;
        let mut denom_terms = Vec::new();
        for (j, key) in keys.iter().enumerate() {
            if j == p {
                continue;
            }
            let s = sim.eval(q, key);
            counts.negatives += 1;
            denom_terms.push(if abs_negatives { s.abs() } else { s } / cfg.tau);
        }
        if cfg.include_positive_in_denominator {
            denom_terms.push(pos);
        }
        if denom_terms.is_empty() {
            return Err(Error::EmptyNegativeSet(format!("anchor {i} has no negatives")));
        }
        let mut shift = f64::NEG_INFINITY;
        for t in &denom_terms {
            if *t > shift {
                shift = *t;
            }
        }
        let mut sum = 0.0;
        for t in &denom_terms {
            sum += (t - shift).exp();
        }
        total += -(pos - (shift + sum.ln()));
    }
    debug_assert_eq!(sim.evals, counts.total() - before);
    Ok(match cfg.reduction {
        Reduction::Sum => total,
        Reduction::Mean => total / queries.len() as f64,
    })
}

pub fn brute_force_loss(
    kind: LossKind,
    f1: &Matrix,
    f2: &Matrix,
    seg: Option<&SegmentAssignment>,
    cfg: &LossConfig,
) -> Result<f64> {
    brute_force_loss_counted(kind, f1, f2, seg, cfg).map(|(v, _)| v)
}

/// Oracle value plus the number of similarity evaluations it performed.
pub fn brute_force_loss_counted(
    kind: LossKind,
    f1: &Matrix,
    f2: &Matrix,
    seg: Option<&SegmentAssignment>,
    cfg: &LossConfig,
) -> Result<(f64, PairCounts)> {
    cfg.validate()?;
    if f1.shape() != f2.shape() {
        return Err(Error::Shape {
            op: "brute_force_loss",
            left: f1.shape(),
            right: f2.shape(),
        });
    }
    let (n, c) = f1.shape();
    if n > ORACLE_MAX_N || c > ORACLE_MAX_C {
        return Err(Error::InvalidParam(format!(
            "oracle limited to N <= {ORACLE_MAX_N}, C <= {ORACLE_MAX_C}; got {n}x{c}"
        )));
    }
    let mut counts = PairCounts::default();
    let value = match kind {
        LossKind::Pc => {
            let (q, k) = maybe_normalize(rows_of(f1), rows_of(f2), cfg.normalize_rows);
            enumerate(&q, &k, &|i| i, false, cfg, &mut counts)?
        }
        LossKind::Ag => ag(f1, f2, need(seg)?, cfg, &mut counts)?,
        LossKind::Cc => cc(f1, f2, cfg, &mut counts)?,
        LossKind::Ep => {
            let a = ag(f1, f2, need(seg)?, cfg, &mut counts)?;
            let b = cc(f1, f2, cfg, &mut counts)?;
            a + cfg.lambda * b
        }
    };
    Ok((value, counts))
}

fn need(seg: Option<&SegmentAssignment>) -> Result<&SegmentAssignment> {
    seg.ok_or_else(|| Error::InvalidParam("oracle needs a segment assignment".into()))
}

fn maybe_normalize(q: Rows, k: Rows, on: bool) -> (Rows, Rows) {
    if on {
        (
            q.iter().map(|r| normalized(r)).collect(),
            k.iter().map(|r| normalized(r)).collect(),
        )
    } else {
        (q, k)
    }
}

fn pooled(f: &Matrix, seg: &SegmentAssignment) -> Result<Rows> {
    let mut out = Vec::new();
    for alpha in 0..seg.num_segments() {
        let mut acc = vec![0.0; f.cols()];
        let mut members = 0usize;
        for i in 0..f.rows() {
            if seg.segment_of()[i] == alpha {
                members += 1;
                for k in 0..f.cols() {
                    acc[k] += f.get(i, k);
                }
            }
        }
        if members == 0 {
            return Err(Error::PartitionViolation(alpha));
        }
        out.push(acc.into_iter().map(|v| v / members as f64).collect());
    }
    Ok(out)
}

fn ag_one_way(
    queries: &Matrix,
    keys: &Matrix,
    seg: &SegmentAssignment,
    cfg: &LossConfig,
    counts: &mut PairCounts,
) -> Result<f64> {
    let segs = pooled(keys, seg)?;
    let (q, k) = maybe_normalize(rows_of(queries), segs, cfg.normalize_rows);
    let of = seg.segment_of().to_vec();
    enumerate(&q, &k, &move |i| of[i], false, cfg, counts)
}

fn ag(
    f1: &Matrix,
    f2: &Matrix,
    seg: &SegmentAssignment,
    cfg: &LossConfig,
    counts: &mut PairCounts,
) -> Result<f64> {
    if seg.num_points() != f1.rows() {
        return Err(Error::Shape {
            op: "brute_force_loss",
            left: f1.shape(),
            right: (seg.num_points(), seg.num_segments()),
        });
    }
    if seg.num_segments() > ORACLE_MAX_M {
        return Err(Error::InvalidParam(format!(
            "oracle limited to M <= {ORACLE_MAX_M}, got {}",
            seg.num_segments()
        )));
    }
    if seg.num_segments() < 2 {
        return Err(Error::EmptyNegativeSet("need at least two segments".into()));
    }
    let forward = ag_one_way(f1, f2, seg, cfg, counts)?;
    if cfg.symmetric_ag {
        let backward = ag_one_way(f2, f1, seg, cfg, counts)?;
        Ok(0.5 * (forward + backward))
    } else {
        Ok(forward)
    }
}

fn cc(f1: &Matrix, f2: &Matrix, cfg: &LossConfig, counts: &mut PairCounts) -> Result<f64> {
    if f1.cols() < 2 {
        return Err(Error::EmptyNegativeSet("need at least two channels".into()));
    }
    let (q, k) = maybe_normalize(columns_of(f1), columns_of(f2), cfg.normalize_channels);
    enumerate(&q, &k, &|i| i, true, cfg, counts)
}
