//! Contrastive objectives over two embeddings of the same scene.
//!
//! All three losses share one shape: a query matrix `Q` (one row per anchor),
//! a key matrix `K`, a positive key per anchor and a set of negative keys per
//! anchor. Per anchor `i` with positive `p(i)`,
//!
//! ```text
//! term_i = -log( exp(s[i][p(i)] / tau) / Σ_{j ∈ neg(i)} exp(t[i][j] / tau) )
//! ```
//!
//! where `s = Q·Kᵀ` and `t` is `s` (point and point-to-segment losses) or
//! `|s|` (channel loss). The positive is left out of the denominator unless
//! [`LossConfig::include_positive_in_denominator`] is set.
//!
//! | kind | queries            | keys                     | positive     | negatives |
//! |------|--------------------|--------------------------|--------------|-----------|
//! | PC   | rows of `f1`       | rows of `f2`             | same index   | all other rows |
//! | AG   | rows of `f1`       | segment means of `f2`    | own segment  | all other segments |
//! | CC   | columns of `f1`    | columns of `f2`          | same channel | all other channels, absolute value |

mod oracle;
mod pool;

use std::fmt;
use std::str::FromStr;

use rand::seq::index;

pub use oracle::{brute_force_loss, brute_force_loss_counted, ORACLE_MAX_C, ORACLE_MAX_M, ORACLE_MAX_N};
pub use pool::{segment_pool, segment_pool_backward};

use crate::error::{Error, Result};
use crate::numcore::{
    matmul, matmul_nt, matmul_tn, pairwise_sum, row_l2_normalize, row_l2_normalize_backward,
    Matrix, NORM_EPS,
};
use crate::rng::RngStream;
use crate::superpoint::SegmentAssignment;

/// Per-point features, one row per point and one column per channel.
pub type Embedding = Matrix;

/// Negatives drawn per anchor when sampling is switched on without a count.
pub const DEFAULT_NEG_SAMPLES: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    /// Point-to-point InfoNCE.
    Pc,
    /// Point-to-segment (asymmetric granularity).
    Ag,
    /// Channel-to-channel with absolute-valued negatives.
    Cc,
    /// `AG + lambda * CC`.
    Ep,
}

impl LossKind {
    pub fn needs_segments(self) -> bool {
        matches!(self, LossKind::Ag | LossKind::Ep)
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pc" => Ok(LossKind::Pc),
            "ag" => Ok(LossKind::Ag),
            "cc" => Ok(LossKind::Cc),
            "ep" => Ok(LossKind::Ep),
            _ => Err(Error::InvalidParam(format!(
                "unknown loss kind {s:?} (expected pc, ag, cc or ep)"
            ))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Pc => "pc",
            LossKind::Ag => "ag",
            LossKind::Cc => "cc",
            LossKind::Ep => "ep",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    /// Divide the sum by the number of positive pairs.
    Mean,
}

impl FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Reduction::Sum),
            "mean" => Ok(Reduction::Mean),
            _ => Err(Error::InvalidParam(format!("unknown reduction {s:?} (expected sum or mean)"))),
        }
    }
}

impl fmt::Display for Reduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Reduction::Sum => "sum",
            Reduction::Mean => "mean",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda: f64,
    pub normalize_rows: bool,
    pub normalize_channels: bool,
    pub include_positive_in_denominator: bool,
    pub reduction: Reduction,
    /// Per-anchor negative sample size for the point loss; `None` uses all.
    pub neg_sample_count: Option<usize>,
    /// Average the point-to-segment loss over both directions.
    pub symmetric_ag: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            lambda: 0.1,
            normalize_rows: true,
            normalize_channels: true,
            include_positive_in_denominator: false,
            reduction: Reduction::Mean,
            neg_sample_count: None,
            symmetric_ag: false,
        }
    }
}

impl LossConfig {
    /// Sum reduction, everything else default.
    pub fn summed() -> Self {
        Self {
            reduction: Reduction::Sum,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidParam(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidParam(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.neg_sample_count == Some(0) {
            return Err(Error::InvalidParam("neg_sample_count must be >= 1".into()));
        }
        Ok(())
    }
}

/// Number of positive and negative pair terms in a loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PairCounts {
    pub positives: u64,
    pub negatives: u64,
}

impl PairCounts {
    pub fn total(self) -> u64 {
        self.positives + self.negatives
    }
}

impl std::ops::Add for PairCounts {
    type Output = PairCounts;

    fn add(self, rhs: Self) -> Self {
        PairCounts {
            positives: self.positives + rhs.positives,
            negatives: self.negatives + rhs.negatives,
        }
    }
}

/// Sizes of the full pair sets: PC `(n, n²-n)`, AG `(n, n(m-1))`, CC `(c, c²-c)`.
/// EP is the sum of AG and CC.
pub fn count_pairs(kind: LossKind, n: usize, m: usize, c: usize) -> PairCounts {
    let (n, m, c) = (n as u64, m as u64, c as u64);
    match kind {
        LossKind::Pc => PairCounts {
            positives: n,
            negatives: n * n - n,
        },
        LossKind::Ag => PairCounts {
            positives: n,
            negatives: n * m.saturating_sub(1),
        },
        LossKind::Cc => PairCounts {
            positives: c,
            negatives: c * c - c,
        },
        LossKind::Ep => {
            count_pairs(LossKind::Ag, n as usize, m as usize, c as usize)
                + count_pairs(LossKind::Cc, n as usize, m as usize, c as usize)
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub grad_f1: Matrix,
    pub grad_f2: Matrix,
    /// Pair terms actually evaluated.
    pub counts: PairCounts,
}

impl LossOutput {
    fn combine(a: LossOutput, b: LossOutput, weight_b: f64) -> Result<LossOutput> {
        let mut grad_f1 = a.grad_f1;
        grad_f1.add_scaled(&b.grad_f1, weight_b)?;
        let mut grad_f2 = a.grad_f2;
        grad_f2.add_scaled(&b.grad_f2, weight_b)?;
        Ok(LossOutput {
            value: a.value + weight_b * b.value,
            grad_f1,
            grad_f2,
            counts: a.counts + b.counts,
        })
    }
}

enum Negatives {
    /// Every key except the positive, in index order.
    All,
    /// Sorted per-anchor subsets that never contain the positive.
    Sampled(Vec<Vec<usize>>),
}

/// Shared InfoNCE kernel. Takes the similarity matrix by value and returns it
/// overwritten with `∂L/∂s`, so the pair buffer is materialized once.
fn infonce_core(
    mut sims: Matrix,
    positive: &[usize],
    negatives: &Negatives,
    abs_negatives: bool,
    cfg: &LossConfig,
) -> Result<(f64, Matrix, PairCounts)> {
    let (n, k) = sims.shape();
    let inv_tau = 1.0 / cfg.tau;
    let weight = match cfg.reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / n as f64,
    };
    let mut terms = Vec::with_capacity(n);
    let mut logits = Vec::with_capacity(k);
    let mut idx = Vec::with_capacity(k);
    let mut signs: Vec<f64> = Vec::with_capacity(k);
    let mut counts = PairCounts::default();

    for i in 0..n {
        let p = positive[i];
        let row = sims.row_mut(i);
        let pos_logit = row[p] * inv_tau;
        logits.clear();
        idx.clear();
        match negatives {
            Negatives::All => idx.extend((0..k).filter(|&j| j != p)),
            Negatives::Sampled(sets) => idx.extend_from_slice(&sets[i]),
        }
        for &j in &idx {
            let s = row[j];
            logits.push(if abs_negatives { s.abs() } else { s } * inv_tau);
        }
        counts.positives += 1;
        counts.negatives += idx.len() as u64;
        if cfg.include_positive_in_denominator {
            logits.push(pos_logit);
        }
        let lse = crate::numcore::logsumexp(&logits).map_err(|_| {
            Error::EmptyNegativeSet(format!("anchor {i} has no negative keys"))
        })?;
        terms.push(lse - pos_logit);

        // ∂term/∂s: softmax over the denominator, minus one on the numerator.
        let mut grad_pos = -inv_tau;
        signs.clear();
        signs.extend(idx.iter().map(|&j| match abs_negatives {
            // subgradient of |s| at 0 is 0
            true if row[j] == 0.0 => 0.0,
            true => row[j].signum(),
            false => 1.0,
        }));
        row.iter_mut().for_each(|v| *v = 0.0);
        for ((&j, &sign), &logit) in idx.iter().zip(&signs).zip(&logits) {
            row[j] = weight * (logit - lse).exp() * sign * inv_tau;
        }
        if cfg.include_positive_in_denominator {
            grad_pos += (pos_logit - lse).exp() * inv_tau;
        }
        row[p] = weight * grad_pos;
    }

    let value = weight * pairwise_sum(&terms);
    Ok((value, sims, counts))
}

/// Query/key contrast with optional row normalization on both sides.
/// Returns the loss value and the gradients on the raw query and key rows.
fn contrast_rows(
    queries: &Matrix,
    keys: &Matrix,
    positive: &[usize],
    negatives: &Negatives,
    abs_negatives: bool,
    normalize: bool,
    cfg: &LossConfig,
) -> Result<(f64, Matrix, Matrix, PairCounts)> {
    let (q, k) = if normalize {
        (row_l2_normalize(queries, NORM_EPS), row_l2_normalize(keys, NORM_EPS))
    } else {
        (queries.clone(), keys.clone())
    };
    let sims = matmul_nt(&q, &k)?;
    let (value, dsims, counts) = infonce_core(sims, positive, negatives, abs_negatives, cfg)?;
    let mut dq = matmul(&dsims, &k)?;
    let mut dk = matmul_tn(&dsims, &q)?;
    if normalize {
        dq = row_l2_normalize_backward(queries, &dq, NORM_EPS);
        dk = row_l2_normalize_backward(keys, &dk, NORM_EPS);
    }
    Ok((value, dq, dk, counts))
}

fn check_pair(f1: &Matrix, f2: &Matrix, op: &'static str) -> Result<()> {
    if f1.shape() != f2.shape() {
        return Err(Error::Shape {
            op,
            left: f1.shape(),
            right: f2.shape(),
        });
    }
    if f1.rows() == 0 || f1.cols() == 0 {
        return Err(Error::InvalidParam(format!("{op}: empty embedding {:?}", f1.shape())));
    }
    Ok(())
}

fn check_segments(f: &Matrix, seg: &SegmentAssignment, op: &'static str) -> Result<()> {
    if seg.num_points() != f.rows() {
        return Err(Error::Shape {
            op,
            left: f.shape(),
            right: (seg.num_points(), seg.num_segments()),
        });
    }
    Ok(())
}

/// Point-level InfoNCE between matched rows of `f1` and `f2`.
///
/// With `neg_sample_count = Some(k)` and `k < n - 1`, each anchor uses `k`
/// negatives drawn uniformly without replacement from `stream`; otherwise all
/// `n - 1` are used and `stream` is not touched.
pub fn point_infonce(
    f1: &Embedding,
    f2: &Embedding,
    cfg: &LossConfig,
    stream: &mut RngStream,
) -> Result<LossOutput> {
    cfg.validate()?;
    check_pair(f1, f2, "point_infonce")?;
    let n = f1.rows();
    if n < 2 {
        return Err(Error::EmptyNegativeSet(
            "point loss needs at least two points".into(),
        ));
    }
    let negatives = match cfg.neg_sample_count {
        Some(k) if k < n - 1 => Negatives::Sampled(
            (0..n)
                .map(|i| {
                    let mut picks: Vec<usize> = index::sample(stream, n - 1, k)
                        .into_iter()
                        .map(|j| if j >= i { j + 1 } else { j })
                        .collect();
                    picks.sort_unstable();
                    picks
                })
                .collect(),
        ),
        _ => Negatives::All,
    };
    let positive: Vec<usize> = (0..n).collect();
    let (value, grad_f1, grad_f2, counts) =
        contrast_rows(f1, f2, &positive, &negatives, false, cfg.normalize_rows, cfg)?;
    Ok(LossOutput {
        value,
        grad_f1,
        grad_f2,
        counts,
    })
}

/// One direction of the point-to-segment loss: points of `queries` against
/// segment means of `keys`.
fn ag_directed(
    queries: &Matrix,
    keys: &Matrix,
    seg: &SegmentAssignment,
    cfg: &LossConfig,
) -> Result<(f64, Matrix, Matrix, PairCounts)> {
    let pooled = segment_pool(keys, seg)?;
    let (value, dq, dpooled, counts) = contrast_rows(
        queries,
        &pooled,
        seg.segment_of(),
        &Negatives::All,
        false,
        cfg.normalize_rows,
        cfg,
    )?;
    let dkeys = segment_pool_backward(&dpooled, seg)?;
    Ok((value, dq, dkeys, counts))
}

/// Points of `f1` against the average-pooled segments of `f2`.
pub fn ag_contrast(
    f1: &Embedding,
    f2: &Embedding,
    seg: &SegmentAssignment,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    cfg.validate()?;
    check_pair(f1, f2, "ag_contrast")?;
    check_segments(f1, seg, "ag_contrast")?;
    if seg.num_segments() < 2 {
        return Err(Error::EmptyNegativeSet(
            "point-to-segment loss needs at least two segments".into(),
        ));
    }
    let (value, grad_f1, grad_f2, counts) = ag_directed(f1, f2, seg, cfg)?;
    if !cfg.symmetric_ag {
        return Ok(LossOutput {
            value,
            grad_f1,
            grad_f2,
            counts,
        });
    }
    let (rvalue, rgrad_f2, rgrad_f1, rcounts) = ag_directed(f2, f1, seg, cfg)?;
    let mut out = LossOutput {
        value: 0.5 * value,
        grad_f1,
        grad_f2,
        counts: counts + rcounts,
    };
    out.grad_f1.scale(0.5);
    out.grad_f2.scale(0.5);
    out.grad_f1.add_scaled(&rgrad_f1, 0.5)?;
    out.grad_f2.add_scaled(&rgrad_f2, 0.5)?;
    out.value += 0.5 * rvalue;
    Ok(out)
}

/// Channel maps (columns) of `f1` against those of `f2`. Negatives enter as
/// absolute similarities, the positive does not.
pub fn channel_contrast(f1: &Embedding, f2: &Embedding, cfg: &LossConfig) -> Result<LossOutput> {
    cfg.validate()?;
    check_pair(f1, f2, "channel_contrast")?;
    let c = f1.cols();
    if c < 2 {
        return Err(Error::EmptyNegativeSet(
            "channel loss needs at least two channels".into(),
        ));
    }
    let positive: Vec<usize> = (0..c).collect();
    let (value, d1, d2, counts) = contrast_rows(
        &f1.transpose(),
        &f2.transpose(),
        &positive,
        &Negatives::All,
        true,
        cfg.normalize_channels,
        cfg,
    )?;
    Ok(LossOutput {
        value,
        grad_f1: d1.transpose(),
        grad_f2: d2.transpose(),
        counts,
    })
}

/// `AG + lambda * CC`.
pub fn ep_contrast(
    f1: &Embedding,
    f2: &Embedding,
    seg: &SegmentAssignment,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    let ag = ag_contrast(f1, f2, seg, cfg)?;
    let cc = channel_contrast(f1, f2, cfg)?;
    LossOutput::combine(ag, cc, cfg.lambda)
}

/// Dispatches on `kind`. `seg` is required for AG and EP.
pub fn evaluate(
    kind: LossKind,
    f1: &Embedding,
    f2: &Embedding,
    seg: Option<&SegmentAssignment>,
    cfg: &LossConfig,
    stream: &mut RngStream,
) -> Result<LossOutput> {
    let need_seg = || {
        seg.ok_or_else(|| Error::InvalidParam(format!("loss {kind} needs a segment assignment")))
    };
    match kind {
        LossKind::Pc => point_infonce(f1, f2, cfg, stream),
        LossKind::Ag => ag_contrast(f1, f2, need_seg()?, cfg),
        LossKind::Cc => channel_contrast(f1, f2, cfg),
        LossKind::Ep => ep_contrast(f1, f2, need_seg()?, cfg),
    }
}
