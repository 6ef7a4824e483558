//! Synthetic scenes, the pre-training loop and linear-probe evaluation.

use std::fmt::Write as _;
use std::str::FromStr;

use log::warn;
use rand::seq::{index, SliceRandom};
use rayon::prelude::*;

use crate::encoder::{
    encoder_backward, encoder_forward, encoder_init, MlpGrads, MlpParams, DEFAULT_CHANNELS,
    DEFAULT_HIDDEN, INPUT_DIM,
};
use crate::error::{Error, Result};
use crate::losses::{evaluate, LossConfig, LossKind};
use crate::numcore::{dot, row_l2_normalize, Matrix, NORM_EPS};
use crate::pointcloud::{make_view_pair, AugmentParams, PointCloud};
use crate::rng::{derive_seed, tags, RngStream};
use crate::superpoint::{kmeans_segments, KMeansConfig, SegmentAssignment};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSceneConfig {
    pub num_clusters: usize,
    pub points_per_cluster: usize,
    /// Spatial spread of each cluster, meters.
    pub cluster_std: f64,
    pub color_noise_std: f64,
    /// Side of the cubic room, meters.
    pub extent: f64,
    pub seed: u64,
}

impl Default for SyntheticSceneConfig {
    fn default() -> Self {
        Self {
            num_clusters: 8,
            points_per_cluster: 128,
            cluster_std: 0.3,
            color_noise_std: 0.1,
            extent: 6.0,
            seed: 0,
        }
    }
}

impl SyntheticSceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clusters < 1 || self.points_per_cluster < 1 {
            return Err(Error::InvalidParam("scene needs >= 1 cluster and >= 1 point per cluster".into()));
        }
        if !(self.cluster_std >= 0.0 && self.color_noise_std >= 0.0 && self.extent >= 0.0) {
            return Err(Error::InvalidParam("scene spreads and extent must be >= 0".into()));
        }
        Ok(())
    }
}

/// Base color of class `k` out of `classes`: evenly spaced hues.
pub fn class_color(k: usize, classes: usize) -> [f64; 3] {
    let h = 6.0 * k as f64 / classes as f64;
    let (s, v) = (0.7, 0.85);
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Gaussian clusters at uniform centers; cluster `k` is labeled `k` and
/// colored `class_color(k)` plus clipped per-point noise.
pub fn generate_scene(cfg: &SyntheticSceneConfig, stream: &mut RngStream) -> Result<PointCloud> {
    cfg.validate()?;
    let n = cfg.num_clusters * cfg.points_per_cluster;
    let mut pos = Vec::with_capacity(n * 3);
    let mut col = Vec::with_capacity(n * 3);
    let mut labels = Vec::with_capacity(n);
    for k in 0..cfg.num_clusters {
        let center: [f64; 3] = std::array::from_fn(|_| stream.uniform(0.0, cfg.extent));
        let base = class_color(k, cfg.num_clusters);
        for _ in 0..cfg.points_per_cluster {
            for c in center {
                pos.push(c + cfg.cluster_std * stream.standard_normal());
            }
            for b in base {
                col.push((b + cfg.color_noise_std * stream.standard_normal()).clamp(0.0, 1.0));
            }
            labels.push(k as u32);
        }
    }
    PointCloud::new(
        Matrix::from_vec(n, 3, pos)?,
        Matrix::from_vec(n, 3, col)?,
        Some(labels),
    )
}

/// `count` scenes from independent substreams of `cfg.seed`.
pub fn generate_scenes(cfg: &SyntheticSceneConfig, count: usize) -> Result<Vec<PointCloud>> {
    let root = RngStream::new(cfg.seed).substream(tags::SCENES);
    (0..count)
        .into_par_iter()
        .map(|i| generate_scene(cfg, &mut root.substream(i as u64)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimState {
    pub fn new(params: &MlpParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.slices().iter().map(|s| vec![0.0; s.len()]).collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Pure: returns new parameters and state.
pub fn adam_step(
    params: &MlpParams,
    grads: &MlpGrads,
    state: &OptimState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<(MlpParams, OptimState)> {
    let mut next = params.clone();
    let mut st = state.clone();
    st.step += 1;
    let t = st.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let gs = grads.slices();
    let mut ps = next.slices_mut();
    if gs.len() != ps.len() || st.first.len() != ps.len() {
        return Err(Error::InvalidParam("gradient layout does not match parameters".into()));
    }
    for (k, p) in ps.iter_mut().enumerate() {
        let (g, m, v) = (gs[k], &mut st.first[k], &mut st.second[k]);
        if g.len() != p.len() || m.len() != p.len() {
            return Err(Error::InvalidParam(format!("tensor {k} size mismatch")));
        }
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            p[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok((next, st))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// Half cosine from the base rate to zero over all steps.
    Cosine,
}

impl FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            _ => Err(Error::InvalidParam(format!("unknown lr schedule {s:?}"))),
        }
    }
}

impl std::fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        })
    }
}

impl LrSchedule {
    pub fn rate(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let frac = step as f64 / total.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Scenes per optimizer step.
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_schedule: LrSchedule,
    pub adam: AdamConfig,
    pub loss_kind: LossKind,
    pub loss: LossConfig,
    pub augment: AugmentParams,
    pub hidden: usize,
    pub channels: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 1,
            base_lr: 0.01,
            lr_schedule: LrSchedule::Cosine,
            adam: AdamConfig::default(),
            loss_kind: LossKind::Ep,
            loss: LossConfig::default(),
            augment: AugmentParams::default(),
            hidden: DEFAULT_HIDDEN,
            channels: DEFAULT_CHANNELS,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(Error::InvalidParam("epochs and batch_size must be >= 1".into()));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::InvalidParam(format!("learning rate {} must be >= 0", self.base_lr)));
        }
        self.loss.validate()?;
        self.augment.validate()
    }

    pub fn init_params(&self) -> Result<MlpParams> {
        encoder_init(
            INPUT_DIM,
            self.hidden,
            self.channels,
            derive_seed(self.seed, tags::ENCODER_INIT),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from("step,epoch,loss,lr\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.step, r.epoch, r.loss, r.lr);
    }
    out
}

/// Parameters, optimizer moments and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: MlpParams,
    pub optim: OptimState,
}

#[derive(Debug, Clone)]
pub struct PretrainResult {
    pub initial: MlpParams,
    pub state: TrainState,
    pub history: Vec<HistoryRow>,
}

impl PretrainResult {
    pub fn params(&self) -> &MlpParams {
        &self.state.params
    }
}

/// Segments for each scene, computed once on the un-augmented cloud.
pub fn scene_segments(scenes: &[PointCloud], kmeans: &KMeansConfig) -> Vec<SegmentAssignment> {
    scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let cfg = KMeansConfig {
                seed: derive_seed(kmeans.seed, i as u64),
                ..kmeans.clone()
            };
            kmeans_segments(s, &cfg)
        })
        .collect()
}

/// Loss and parameter gradient for one scene.
fn scene_step(
    params: &MlpParams,
    scene: &PointCloud,
    seg: &SegmentAssignment,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(f64, MlpGrads)> {
    let pair = make_view_pair(scene, &cfg.augment, seed);
    let (f1, cache1) = encoder_forward(params, &pair.view1)?;
    let (f2, cache2) = encoder_forward(params, &pair.view2)?;
    let mut sampling = RngStream::new(derive_seed(seed, tags::NEG_SAMPLING));
    let out = evaluate(cfg.loss_kind, &f1, &f2, Some(seg), &cfg.loss, &mut sampling)?;
    let mut grads = encoder_backward(params, &cache1, &out.grad_f1)?;
    grads.add_scaled(&encoder_backward(params, &cache2, &out.grad_f2)?, 1.0);
    Ok((out.value, grads))
}

/// Augment, encode both views, contrast, backprop, Adam. One history row
/// per optimizer step.
pub fn pretrain(
    scenes: &[PointCloud],
    cfg: &TrainConfig,
    kmeans: &KMeansConfig,
) -> Result<PretrainResult> {
    pretrain_from(scenes, cfg, kmeans, cfg.init_params()?)
}

pub fn pretrain_from(
    scenes: &[PointCloud],
    cfg: &TrainConfig,
    kmeans: &KMeansConfig,
    initial: MlpParams,
) -> Result<PretrainResult> {
    cfg.validate()?;
    kmeans.validate()?;
    if scenes.is_empty() {
        return Err(Error::InvalidParam("pretraining needs at least one scene".into()));
    }
    let segments = if cfg.loss_kind.needs_segments() {
        scene_segments(scenes, kmeans)
    } else {
        scenes.iter().map(|s| SegmentAssignment::singletons(s.len())).collect()
    };

    let steps_per_epoch = scenes.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let root = RngStream::new(cfg.seed);
    let mut state = TrainState {
        optim: OptimState::new(&initial),
        params: initial.clone(),
    };
    let mut history = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..scenes.len()).collect();

    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut root.substream(tags::SHUFFLE).substream(epoch as u64));
        for batch in order.chunks(cfg.batch_size) {
            let step = history.len();
            let lr = cfg.lr_schedule.rate(cfg.base_lr, step, total);
            let weight = 1.0 / batch.len() as f64;
            let mut grads = state.params.zeros_like();
            let mut loss = 0.0;
            for &idx in batch {
                let seed = derive_seed(
                    derive_seed(cfg.seed, tags::AUGMENT),
                    (epoch * scenes.len() + idx) as u64,
                );
                let (value, g) = scene_step(&state.params, &scenes[idx], &segments[idx], cfg, seed)?;
                loss += weight * value;
                grads.add_scaled(&g, weight);
            }
            let (params, optim) = adam_step(&state.params, &grads, &state.optim, lr, &cfg.adam)?;
            state = TrainState { params, optim };
            history.push(HistoryRow {
                step,
                epoch,
                loss,
                lr,
            });
        }
    }
    Ok(PretrainResult {
        initial,
        state,
        history,
    })
}

/// Per-point embeddings of every scene, stacked.
pub fn embed_scenes(params: &MlpParams, scenes: &[PointCloud]) -> Result<Matrix> {
    let parts = scenes
        .iter()
        .map(|s| encoder_forward(params, s).map(|(e, _)| e))
        .collect::<Result<Vec<_>>>()?;
    let cols = params.output_dim();
    let data: Vec<f64> = parts.into_iter().flat_map(Matrix::into_vec).collect();
    let rows = data.len() / cols;
    Matrix::from_vec(rows, cols, data)
}

/// Mean `|cos|` between distinct channel maps (columns).
pub fn channel_redundancy(embedding: &Matrix) -> f64 {
    let channels = row_l2_normalize(&embedding.transpose(), NORM_EPS);
    let c = channels.rows();
    if c < 2 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..c {
        for j in 0..c {
            if i != j {
                acc += dot(channels.row(i), channels.row(j)).abs();
            }
        }
    }
    acc / (c * (c - 1)) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    /// Fraction of training points whose labels the probe sees.
    pub label_fraction: f64,
    pub iters: usize,
    pub lr: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            label_fraction: 1.0,
            iters: 300,
            lr: 1.0,
            l2: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub accuracy: f64,
    pub labeled_points: usize,
    pub test_points: usize,
    /// Classes present in the evaluation set but never seen in training.
    pub absent_classes: Vec<u32>,
}

fn labels_of(scenes: &[PointCloud]) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    for s in scenes {
        out.extend_from_slice(
            s.labels()
                .ok_or_else(|| Error::InvalidParam("probe scenes must carry labels".into()))?,
        );
    }
    Ok(out)
}

/// Multinomial logistic regression on fixed features, full-batch gradient
/// descent. Returns `(weights C x K, bias K)`.
pub fn fit_softmax(
    features: &Matrix,
    labels: &[u32],
    classes: usize,
    cfg: &ProbeConfig,
) -> (Matrix, Vec<f64>) {
    let (n, c) = features.shape();
    let mut w = Matrix::zeros(c, classes);
    let mut b = vec![0.0; classes];
    let mut probs = vec![0.0; classes];
    for _ in 0..cfg.iters {
        let mut gw = Matrix::zeros(c, classes);
        let mut gb = vec![0.0; classes];
        for i in 0..n {
            let x = features.row(i);
            for (k, p) in probs.iter_mut().enumerate() {
                *p = b[k] + (0..c).map(|d| x[d] * w.get(d, k)).sum::<f64>();
            }
            let max = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for p in probs.iter_mut() {
                *p = (*p - max).exp();
                z += *p;
            }
            for (k, p) in probs.iter().enumerate() {
                let err = p / z - if labels[i] as usize == k { 1.0 } else { 0.0 };
                gb[k] += err;
                for d in 0..c {
                    gw.set(d, k, gw.get(d, k) + err * x[d]);
                }
            }
        }
        let inv = 1.0 / n as f64;
        for d in 0..c {
            for k in 0..classes {
                let g = gw.get(d, k) * inv + cfg.l2 * w.get(d, k);
                w.set(d, k, w.get(d, k) - cfg.lr * g);
            }
        }
        for k in 0..classes {
            b[k] -= cfg.lr * gb[k] * inv;
        }
    }
    (w, b)
}

fn predict(features: &Matrix, w: &Matrix, b: &[f64]) -> Vec<u32> {
    (0..features.rows())
        .map(|i| {
            let x = features.row(i);
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for k in 0..b.len() {
                let v = b[k] + (0..x.len()).map(|d| x[d] * w.get(d, k)).sum::<f64>();
                if v > best_v {
                    best_v = v;
                    best = k;
                }
            }
            best as u32
        })
        .collect()
}

/// Probe accuracy on explicit feature matrices (rows are L2-normalized first).
pub fn probe_features(
    train: &Matrix,
    train_labels: &[u32],
    test: &Matrix,
    test_labels: &[u32],
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    if !(cfg.label_fraction > 0.0 && cfg.label_fraction <= 1.0) {
        return Err(Error::InvalidParam(format!(
            "label fraction {} must be in (0, 1]",
            cfg.label_fraction
        )));
    }
    if train.rows() != train_labels.len() || test.rows() != test_labels.len() {
        return Err(Error::InvalidParam("feature and label counts differ".into()));
    }
    let total = train.rows();
    let keep = ((cfg.label_fraction * total as f64).round() as usize).clamp(1, total);
    let mut rng = RngStream::new(derive_seed(cfg.seed, tags::PROBE));
    let mut picked: Vec<usize> = index::sample(&mut rng, total, keep).into_vec();
    picked.sort_unstable();

    let train_n = row_l2_normalize(train, NORM_EPS);
    let x = Matrix::from_fn(keep, train.cols(), |r, c| train_n.get(picked[r], c));
    let y: Vec<u32> = picked.iter().map(|&i| train_labels[i]).collect();
    let classes = train_labels
        .iter()
        .chain(test_labels)
        .copied()
        .max()
        .map_or(1, |m| m as usize + 1);

    let mut seen = vec![false; classes];
    for &l in &y {
        seen[l as usize] = true;
    }
    let mut absent: Vec<u32> = test_labels
        .iter()
        .copied()
        .filter(|&l| !seen[l as usize])
        .collect();
    absent.sort_unstable();
    absent.dedup();
    if !absent.is_empty() {
        warn!("classes {absent:?} have no labeled training points; their test points count as errors");
    }

    let (w, b) = fit_softmax(&x, &y, classes, cfg);
    let pred = predict(&row_l2_normalize(test, NORM_EPS), &w, &b);
    let correct = pred
        .iter()
        .zip(test_labels)
        .filter(|(p, t)| seen[**t as usize] && p == t)
        .count();
    Ok(ProbeReport {
        accuracy: correct as f64 / test_labels.len().max(1) as f64,
        labeled_points: keep,
        test_points: test_labels.len(),
        absent_classes: absent,
    })
}

/// Linear probe on frozen encoder embeddings: trained on `train` scenes,
/// scored point-wise on `test` scenes.
pub fn linear_probe(
    params: &MlpParams,
    train: &[PointCloud],
    test: &[PointCloud],
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let train_labels = labels_of(train)?;
    let test_labels = labels_of(test)?;
    let train_x = embed_scenes(params, train)?;
    let test_x = embed_scenes(params, test)?;
    probe_features(&train_x, &train_labels, &test_x, &test_labels, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::encode_checkpoint;

    fn small_scene_cfg(seed: u64) -> SyntheticSceneConfig {
        SyntheticSceneConfig {
            num_clusters: 4,
            points_per_cluster: 16,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn scene_without_noise_has_identical_cluster_points() {
        let cfg = SyntheticSceneConfig {
            cluster_std: 0.0,
            color_noise_std: 0.0,
            ..small_scene_cfg(1)
        };
        let s = generate_scene(&cfg, &mut RngStream::new(1)).unwrap();
        let labels = s.labels().unwrap();
        for i in 0..s.len() {
            for j in 0..s.len() {
                if labels[i] == labels[j] {
                    assert_eq!(s.positions().row(i), s.positions().row(j));
                    assert_eq!(s.colors().row(i), s.colors().row(j));
                }
            }
        }
    }

    #[test]
    fn label_histogram_is_exact() {
        let s = generate_scene(&small_scene_cfg(2), &mut RngStream::new(2)).unwrap();
        let mut hist = [0; 4];
        for &l in s.labels().unwrap() {
            hist[l as usize] += 1;
        }
        assert_eq!(hist, [16; 4]);
    }

    #[test]
    fn scenes_are_deterministic() {
        let a = generate_scenes(&small_scene_cfg(3), 3).unwrap();
        let b = generate_scenes(&small_scene_cfg(3), 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn palette_colors_are_valid_and_distinct() {
        for k in 0..8 {
            let c = class_color(k, 8);
            assert!(c.iter().all(|v| (0.0..=1.0).contains(v)));
            for j in 0..k {
                assert_ne!(class_color(j, 8), c);
            }
        }
    }

    fn params() -> MlpParams {
        encoder_init(9, 4, 3, 5).unwrap()
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let p = params();
        let (next, st) = adam_step(&p, &p.zeros_like(), &OptimState::new(&p), 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(next, p);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr_against_sign() {
        let p = params();
        let mut g = p.zeros_like();
        let mut s = RngStream::new(9);
        for t in g.slices_mut() {
            t.iter_mut().for_each(|v| *v = s.uniform(-1.0, 1.0));
        }
        let lr = 0.01;
        let (next, _) = adam_step(&p, &g, &OptimState::new(&p), lr, &AdamConfig::default()).unwrap();
        for ((a, b), gv) in next.slices().iter().zip(p.slices()).zip(g.slices()) {
            for i in 0..a.len() {
                let expected = -lr * gv[i].signum();
                assert!((a[i] - b[i] - expected).abs() < lr * 1e-6);
            }
        }
    }

    #[test]
    fn adam_matches_scalar_reference() {
        let cfg = AdamConfig::default();
        let mut p = params();
        let mut st = OptimState::new(&p);
        let mut s = RngStream::new(10);
        let (mut x, mut m, mut v) = (p.layers[0].weight.get(0, 0), 0.0, 0.0);
        for t in 1..=100 {
            let mut g = p.zeros_like();
            for t in g.slices_mut() {
                t.iter_mut().for_each(|v| *v = s.uniform(-1.0, 1.0));
            }
            let g00 = g.layers[0].weight.get(0, 0);
            (p, st) = adam_step(&p, &g, &st, 0.01, &cfg).unwrap();
            m = 0.9 * m + 0.1 * g00;
            v = 0.999 * v + 0.001 * g00 * g00;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.01 * mh / (vh.sqrt() + 1e-8);
            assert!((p.layers[0].weight.get(0, 0) - x).abs() <= 1e-12);
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(LrSchedule::Cosine.rate(0.01, 0, 10), 0.01);
        assert!((LrSchedule::Cosine.rate(0.01, 5, 10) - 0.005).abs() < 1e-15);
        assert_eq!(LrSchedule::Constant.rate(0.01, 7, 10), 0.01);
    }

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            hidden: 8,
            channels: 6,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_lr_leaves_params_untouched() {
        let scenes = generate_scenes(&small_scene_cfg(4), 3).unwrap();
        let cfg = TrainConfig { base_lr: 0.0, ..tiny_train_cfg() };
        let km = KMeansConfig { target_segments: 6, ..Default::default() };
        let out = pretrain(&scenes, &cfg, &km).unwrap();
        assert_eq!(encode_checkpoint(out.params()), encode_checkpoint(&out.initial));
        assert_eq!(out.history.len(), 6);
    }

    #[test]
    fn batched_steps_and_history_csv() {
        let scenes = generate_scenes(&small_scene_cfg(5), 5).unwrap();
        let cfg = TrainConfig { batch_size: 2, epochs: 1, ..tiny_train_cfg() };
        let km = KMeansConfig { target_segments: 6, ..Default::default() };
        let out = pretrain(&scenes, &cfg, &km).unwrap();
        assert_eq!(out.history.len(), 3);
        let csv = history_csv(&out.history);
        assert!(csv.starts_with("step,epoch,loss,lr\n0,0,"));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn single_segment_scene_surfaces_error() {
        let scenes = generate_scenes(&small_scene_cfg(6), 1).unwrap();
        let km = KMeansConfig { target_segments: 1, ..Default::default() };
        assert!(matches!(
            pretrain(&scenes, &tiny_train_cfg(), &km),
            Err(Error::EmptyNegativeSet(_))
        ));
    }

    #[test]
    fn pretrain_runs_for_every_loss_kind() {
        let scenes = generate_scenes(&small_scene_cfg(7), 2).unwrap();
        let km = KMeansConfig { target_segments: 6, ..Default::default() };
        for kind in [LossKind::Pc, LossKind::Ag, LossKind::Cc, LossKind::Ep] {
            let cfg = TrainConfig { loss_kind: kind, epochs: 1, ..tiny_train_cfg() };
            let out = pretrain(&scenes, &cfg, &km).unwrap();
            assert!(out.params().is_finite());
            assert!(out.history.iter().all(|h| h.loss.is_finite()));
        }
    }

    #[test]
    fn probe_on_one_hot_features_is_perfect() {
        let labels: Vec<u32> = (0..40).map(|i| i % 4).collect();
        let x = Matrix::from_fn(40, 4, |r, c| if labels[r] as usize == c { 1.0 } else { 0.0 });
        let r = probe_features(&x, &labels, &x, &labels, &ProbeConfig::default()).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert!(r.absent_classes.is_empty());
    }

    #[test]
    fn probe_on_constant_features_is_chance() {
        let labels: Vec<u32> = (0..400).map(|i| i % 4).collect();
        let x = Matrix::from_fn(400, 3, |_, c| c as f64 + 1.0);
        let r = probe_features(&x, &labels, &x, &labels, &ProbeConfig::default()).unwrap();
        assert!((r.accuracy - 0.25).abs() < 1e-12);
    }

    #[test]
    fn probe_absent_classes_count_as_errors() {
        let train_labels = vec![0u32; 10];
        let test_labels: Vec<u32> = (0..10).map(|i| i % 2).collect();
        let x = Matrix::from_fn(10, 2, |r, c| (r + c) as f64);
        let r = probe_features(&x, &train_labels, &x, &test_labels, &ProbeConfig::default()).unwrap();
        assert_eq!(r.absent_classes, vec![1]);
        assert!(r.accuracy <= 0.5);
    }

    #[test]
    fn probe_does_not_touch_params() {
        let scenes = generate_scenes(&small_scene_cfg(8), 2).unwrap();
        let p = encoder_init(9, 8, 4, 1).unwrap();
        let before = encode_checkpoint(&p);
        let cfg = ProbeConfig { iters: 10, ..Default::default() };
        let r = linear_probe(&p, &scenes[..1], &scenes[1..], &cfg).unwrap();
        assert!((0.0..=1.0).contains(&r.accuracy));
        assert_eq!(encode_checkpoint(&p), before);
    }

    #[test]
    fn channel_redundancy_extremes() {
        let orth = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(channel_redundancy(&orth), 0.0);
        let same = Matrix::from_rows(&[vec![1.0, -1.0], vec![2.0, -2.0]]).unwrap();
        assert!((channel_redundancy(&same) - 1.0).abs() < 1e-12);
    }
}
