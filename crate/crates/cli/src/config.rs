//! Plain-text run configuration: `key = value` lines, `#` comments,
//! dot-namespaced keys, every key with a documented default.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use epcontrast_core::bench::MIB;
use epcontrast_core::losses::{LossConfig, LossKind, Reduction};
use epcontrast_core::pointcloud::{AugmentParams, Axis};
use epcontrast_core::superpoint::KMeansConfig;
use epcontrast_core::trainer::{
    AdamConfig, LrSchedule, ProbeConfig, SyntheticSceneConfig, TrainConfig,
};

/// `(key, default, description)`.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "root seed for every random stream"),
    ("scenes.count", "32", "scenes written by `gen`"),
    ("scenes.clusters", "8", "clusters (= classes) per synthetic scene"),
    ("scenes.points_per_cluster", "128", "points per cluster"),
    ("scenes.cluster_std", "0.3", "spatial spread of a cluster, meters"),
    ("scenes.color_noise", "0.1", "std of per-point color noise"),
    ("scenes.extent", "6.0", "side of the cubic room, meters"),
    ("kmeans.segments", "32", "target segments per scene"),
    ("kmeans.max_iters", "100", "Lloyd iteration cap"),
    ("kmeans.tol", "1e-4", "centroid-move tolerance relative to the feature diagonal"),
    ("kmeans.color_weight", "1.0", "weight of rgb against normalized xyz"),
    ("loss.tau", "1.0", "temperature"),
    ("loss.lambda", "0.1", "weight of the channel term in ep"),
    ("loss.normalize_rows", "true", "L2-normalize point and segment embeddings"),
    ("loss.normalize_channels", "true", "L2-normalize channel maps"),
    ("loss.include_positive", "false", "include the positive in the denominator"),
    ("loss.reduction", "mean", "sum or mean over anchors"),
    ("loss.neg_samples", "0", "negatives per anchor for pc, 0 = all"),
    ("loss.symmetric_ag", "false", "average both directions of the point-to-segment term"),
    ("augment.scale_min", "0.8", "lower bound of the uniform scale"),
    ("augment.scale_max", "1.2", "upper bound of the uniform scale"),
    ("augment.rot_axis", "z", "rotation axis: x, y or z"),
    ("augment.rot_max", "6.283185307179586", "rotation angle drawn from [0, rot_max)"),
    ("augment.jitter_sigma", "0.01", "std of positional jitter, meters"),
    ("augment.jitter_clip", "0.05", "jitter is clipped to +-clip"),
    ("train.epochs", "20", "passes over the scenes"),
    ("train.batch_size", "1", "scenes per optimizer step"),
    ("train.lr", "0.01", "base learning rate"),
    ("train.lr_schedule", "cosine", "constant or cosine"),
    ("train.beta1", "0.9", "first-moment decay"),
    ("train.beta2", "0.999", "second-moment decay"),
    ("train.eps", "1e-8", "denominator guard"),
    ("train.hidden", "64", "hidden width of the encoder"),
    ("train.channels", "32", "embedding channels"),
    ("probe.label_fraction", "1.0", "fraction of training points with visible labels"),
    ("probe.iters", "300", "gradient-descent iterations"),
    ("probe.lr", "1.0", "probe learning rate"),
    ("probe.l2", "1e-4", "probe weight decay"),
    ("probe.holdout", "0.25", "fraction of scenes held out when no --test dir is given"),
    ("bench.m", "32", "segments for ag"),
    ("bench.c", "32", "channels"),
    ("bench.repeats", "3", "timed repeats per size (median reported)"),
    ("bench.budget_mb", "1024", "accounted-bytes budget in MiB, 0 = unlimited"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v, _)| (*k, v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (k, _, _) = KEYS
            .iter()
            .find(|(k, _, _)| *k == key)
            .ok_or_else(|| anyhow!("unknown config key {key:?}"))?;
        self.values.insert(k, value.trim().to_string());
        Ok(())
    }

    /// Applies `key = value` lines.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`", idx + 1))?;
            self.set(key.trim(), value)
                .with_context(|| format!("line {}", idx + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        self.apply_text(&text)
            .with_context(|| format!("in config {}", path.display()))
    }

    /// `key=value` override from the command line.
    pub fn apply_assignment(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects key=value, got {assignment:?}"))?;
        self.set(k.trim(), v)
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("config key {key} is not in the key table"))
    }

    pub fn get<T>(&self, key: &str) -> Result<T>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|e| anyhow!("config key {key}: cannot parse {raw:?}: {e}"))
    }

    /// Every key with its effective value, as a loadable config file.
    pub fn render(&self) -> String {
        let mut out = String::from("# resolved configuration\n");
        for (k, _, doc) in KEYS {
            let _ = writeln!(out, "{k} = {}  # {doc}", self.values[k]);
        }
        out
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    pub fn scene_config(&self) -> Result<SyntheticSceneConfig> {
        let cfg = SyntheticSceneConfig {
            num_clusters: self.get("scenes.clusters")?,
            points_per_cluster: self.get("scenes.points_per_cluster")?,
            cluster_std: self.get("scenes.cluster_std")?,
            color_noise_std: self.get("scenes.color_noise")?,
            extent: self.get("scenes.extent")?,
            seed: self.seed()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn kmeans_config(&self) -> Result<KMeansConfig> {
        let cfg = KMeansConfig {
            target_segments: self.get("kmeans.segments")?,
            max_iters: self.get("kmeans.max_iters")?,
            tol: self.get("kmeans.tol")?,
            color_weight: self.get("kmeans.color_weight")?,
            seed: self.seed()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn loss_config(&self) -> Result<LossConfig> {
        let neg: usize = self.get("loss.neg_samples")?;
        let cfg = LossConfig {
            tau: self.get("loss.tau")?,
            lambda: self.get("loss.lambda")?,
            normalize_rows: self.get("loss.normalize_rows")?,
            normalize_channels: self.get("loss.normalize_channels")?,
            include_positive_in_denominator: self.get("loss.include_positive")?,
            reduction: self.get::<Reduction>("loss.reduction")?,
            neg_sample_count: (neg > 0).then_some(neg),
            symmetric_ag: self.get("loss.symmetric_ag")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn augment_params(&self) -> Result<AugmentParams> {
        let cfg = AugmentParams {
            scale_min: self.get("augment.scale_min")?,
            scale_max: self.get("augment.scale_max")?,
            rot_axis: self.get::<Axis>("augment.rot_axis")?,
            rot_max: self.get("augment.rot_max")?,
            jitter_sigma: self.get("augment.jitter_sigma")?,
            jitter_clip: self.get("augment.jitter_clip")?,
            seed: self.seed()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self, kind: LossKind) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            epochs: self.get("train.epochs")?,
            batch_size: self.get("train.batch_size")?,
            base_lr: self.get("train.lr")?,
            lr_schedule: self.get::<LrSchedule>("train.lr_schedule")?,
            adam: AdamConfig {
                beta1: self.get("train.beta1")?,
                beta2: self.get("train.beta2")?,
                eps: self.get("train.eps")?,
            },
            loss_kind: kind,
            loss: self.loss_config()?,
            augment: self.augment_params()?,
            hidden: self.get("train.hidden")?,
            channels: self.get("train.channels")?,
            seed: self.seed()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn probe_config(&self) -> Result<ProbeConfig> {
        let cfg = ProbeConfig {
            label_fraction: self.get("probe.label_fraction")?,
            iters: self.get("probe.iters")?,
            lr: self.get("probe.lr")?,
            l2: self.get("probe.l2")?,
            seed: self.seed()?,
        };
        if !(cfg.label_fraction > 0.0 && cfg.label_fraction <= 1.0) {
            bail!("probe.label_fraction must be in (0, 1]");
        }
        Ok(cfg)
    }

    pub fn holdout(&self) -> Result<f64> {
        let h: f64 = self.get("probe.holdout")?;
        if !(h > 0.0 && h < 1.0) {
            bail!("probe.holdout must be in (0, 1)");
        }
        Ok(h)
    }

    /// Budget in bytes, `None` when unlimited.
    pub fn bench_budget(&self) -> Result<Option<u64>> {
        let mb: u64 = self.get("bench.budget_mb")?;
        Ok((mb > 0).then(|| mb * MIB))
    }
}
